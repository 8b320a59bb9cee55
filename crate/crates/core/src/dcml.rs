//! Alternating cluster / metric-learning training.
//!
//! Each epoch embeds the training split, whitens and k-means clusters the
//! embeddings, then runs triplet-loss SGD with the cluster indices as
//! pseudo-labels. Training stops once consecutive assignments agree.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Graph, Var};
use crate::cluster::{self, ClusterError, ClusterState, Points, WhitenTransform};
use crate::config::{ConfigError, KeyValues};
use crate::nnet::{Branches, DepModel, ModelError};
use crate::patchex::{self, Manifest, PatchError, Split};
use crate::store;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.depc";
pub const NMI_LOG_FILE: &str = "nmi.tsv";
/// Samples per gradient partial sum; fixed so reductions do not depend on
/// the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("pseudo-label {label} out of range for K={k}")]
    LabelRange { label: usize, k: usize },
    #[error("training split is empty")]
    EmptyDataset,
    #[error("dataset has {images} images but {ids} ids")]
    Dataset { images: usize, ids: usize },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Store(#[from] store::StoreError),
}

/// Negative selection rule for each anchor-positive pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Miner {
    /// Closest negative farther than the positive, else the closest.
    SemiHard,
    /// Closest negative.
    Hardest,
    /// Uniformly random negative.
    Random,
}

impl fmt::Display for Miner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Miner::SemiHard => "semi-hard",
            Miner::Hardest => "hardest",
            Miner::Random => "random",
        })
    }
}

impl FromStr for Miner {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "semi-hard" => Ok(Miner::SemiHard),
            "hardest" => Ok(Miner::Hardest),
            "random" => Ok(Miner::Random),
            _ => Err(format!("unknown miner {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub samples_per_cluster: usize,
    pub k: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub nmi_patience: usize,
    pub nmi_delta: f64,
    pub seed: u64,
    /// Whitening target dimension, capped by the embedding width.
    pub n_pca: usize,
    /// Refit whitening every epoch rather than only on the first.
    pub refit_whiten: bool,
    pub miner: Miner,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            samples_per_cluster: 4,
            k: 150,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            max_epochs: 50,
            nmi_patience: 3,
            nmi_delta: 0.005,
            seed: 0,
            n_pca: cluster::DEFAULT_N_PCA,
            refit_whiten: true,
            miner: Miner::SemiHard,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.k * self.samples_per_cluster
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be finite and non-negative");
        }
        if self.samples_per_cluster == 0 || self.k == 0 || self.max_epochs == 0 {
            return bad("samples_per_cluster, k and max_epochs must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative");
        }
        if self.nmi_patience == 0 || !(self.nmi_delta > 0.0) {
            return bad("nmi_patience and nmi_delta must be positive");
        }
        if self.n_pca == 0 {
            return bad("n_pca must be positive");
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = Self::default();
        kv.take("margin", &mut c.margin)?;
        kv.take("samples_per_cluster", &mut c.samples_per_cluster)?;
        kv.take("k", &mut c.k)?;
        kv.take("learning_rate", &mut c.learning_rate)?;
        kv.take("weight_decay", &mut c.weight_decay)?;
        kv.take("max_epochs", &mut c.max_epochs)?;
        kv.take("nmi_patience", &mut c.nmi_patience)?;
        kv.take("nmi_delta", &mut c.nmi_delta)?;
        kv.take("seed", &mut c.seed)?;
        kv.take("n_pca", &mut c.n_pca)?;
        kv.take("refit_whiten", &mut c.refit_whiten)?;
        kv.take("miner", &mut c.miner)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(store::io_at(path))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "margin={}\nsamples_per_cluster={}\nk={}\nlearning_rate={}\nweight_decay={}\nmax_epochs={}\nnmi_patience={}\nnmi_delta={}\nseed={}\nn_pca={}\nrefit_whiten={}\nminer={}\n",
            self.margin,
            self.samples_per_cluster,
            self.k,
            self.learning_rate,
            self.weight_decay,
            self.max_epochs,
            self.nmi_patience,
            self.nmi_delta,
            self.seed,
            self.n_pca,
            self.refit_whiten,
            self.miner
        )
    }
}

/// Batch slots of one (anchor, positive, negative) triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// `max(0, ‖a−p‖² − ‖a−n‖² + α)`.
pub fn triplet_loss<T: Real>(a: &[T], p: &[T], n: &[T], margin: f64) -> f64 {
    (sq_dist(a, p) - sq_dist(a, n) + margin).max(0.0)
}

/// Summed hinge loss and its gradient with respect to every row.
pub fn batch_loss<T: Real>(
    embeddings: &[&[T]],
    triplets: &[Triplet],
    margin: f64,
) -> (f64, Vec<Vec<T>>) {
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut grads = vec![vec![T::zero(); dim]; embeddings.len()];
    let mut total = 0.0;
    for t in triplets {
        let (a, p, n) = (embeddings[t.anchor], embeddings[t.positive], embeddings[t.negative]);
        let loss = triplet_loss(a, p, n, margin);
        total += loss;
        if loss <= 0.0 {
            continue;
        }
        let two = T::of(2.0);
        for j in 0..dim {
            grads[t.anchor][j] += two * (n[j] - p[j]);
            grads[t.positive][j] -= two * (a[j] - p[j]);
            grads[t.negative][j] += two * (a[j] - n[j]);
        }
    }
    (total, grads)
}

/// Cluster-balanced batches for one epoch.
///
/// Every batch holds `samples_per_cluster` members of each cluster, taken
/// from a per-cluster seeded permutation that is reshuffled when exhausted;
/// clusters smaller than the request repeat members. There are
/// `ceil(N / batch_size)` batches.
pub fn build_batches(
    assignments: &[usize],
    k: usize,
    samples_per_cluster: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, TrainError> {
    let mut members = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        if a >= k {
            return Err(TrainError::LabelRange { label: a, k });
        }
        members[a].push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(TrainError::EmptyCluster(c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; k];
    let batch_size = k * samples_per_cluster;
    let n_batches = assignments.len().div_ceil(batch_size);
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for c in 0..k {
            for _ in 0..samples_per_cluster {
                if cursor[c] == members[c].len() {
                    members[c].shuffle(&mut rng);
                    cursor[c] = 0;
                }
                batch.push(members[c][cursor[c]]);
                cursor[c] += 1;
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Triplets for every anchor-positive pair of a batch.
///
/// `items` identifies the underlying sample of each slot; pairs that refer
/// to the same sample are skipped.
pub fn mine_triplets<T: Real>(
    embeddings: &[&[T]],
    labels: &[usize],
    items: &[usize],
    miner: Miner,
    rng: &mut impl Rng,
) -> Vec<Triplet> {
    let n = embeddings.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(embeddings[i], embeddings[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut out = Vec::new();
    for a in 0..n {
        let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
        if negatives.is_empty() {
            continue;
        }
        for p in 0..n {
            if p == a || labels[p] != labels[a] || items[p] == items[a] {
                continue;
            }
            let d_ap = dist[a * n + p];
            let closest = |filter: &dyn Fn(f64) -> bool| {
                negatives
                    .iter()
                    .copied()
                    .filter(|&j| filter(dist[a * n + j]))
                    .min_by(|&x, &y| dist[a * n + x].total_cmp(&dist[a * n + y]).then(x.cmp(&y)))
            };
            let negative = match miner {
                Miner::SemiHard => closest(&|d| d > d_ap).or_else(|| closest(&|_| true)),
                Miner::Hardest => closest(&|_| true),
                Miner::Random => Some(negatives[rng.random_range(0..negatives.len())]),
            }
            .expect("negatives non-empty");
            out.push(Triplet {
                anchor: a,
                positive: p,
                negative,
            });
        }
    }
    out
}

/// Preprocessed training images in a fixed order.
#[derive(Clone, Debug)]
pub struct PatchDataset<T: Real> {
    pub ids: Vec<String>,
    pub images: Vec<Tensor<T>>,
}

impl<T: Real> PatchDataset<T> {
    pub fn new(ids: Vec<String>, images: Vec<Tensor<T>>) -> Result<Self, TrainError> {
        if ids.len() != images.len() {
            return Err(TrainError::Dataset {
                images: images.len(),
                ids: ids.len(),
            });
        }
        Ok(Self { ids, images })
    }

    /// Loads and resizes every patch of `split` from a dataset directory.
    pub fn load(
        manifest: &Manifest,
        dataset_dir: &Path,
        split: Option<Split>,
        input_size: usize,
    ) -> Result<Self, TrainError> {
        let records: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .collect();
        let images = records
            .par_iter()
            .map(|r| {
                let px = patchex::load_patch(dataset_dir, &r.patch_id)?;
                patchex::resize_patch(&px, input_size)
            })
            .collect::<Result<Vec<_>, PatchError>>()?;
        Self::new(records.iter().map(|r| r.patch_id.clone()).collect(), images)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Losses and parameter gradients of one batch.
pub struct BatchGradients<T: Real> {
    pub loss: f64,
    pub triplets: Vec<Triplet>,
    pub grads: Vec<Tensor<T>>,
}

/// Forward every sample, mine triplets on the batch embeddings, and
/// backpropagate the summed hinge loss.
pub fn batch_gradients<T: Real>(
    model: &DepModel<T>,
    images: &[&Tensor<T>],
    labels: &[usize],
    items: &[usize],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<BatchGradients<T>, TrainError> {
    let forwards: Vec<(Graph<'_, T>, Vec<Var>, Branches)> = images
        .par_iter()
        .map(|img| {
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let b = model.forward(&mut g, &vars, (*img).clone())?;
            Ok((g, vars, b))
        })
        .collect::<Result<_, ModelError>>()?;
    let emb: Vec<&[T]> = forwards
        .iter()
        .map(|(g, _, b)| g.value(b.embedding).map(|t| t.data()))
        .collect::<Result<_, _>>()
        .map_err(ModelError::from)?;
    let triplets = mine_triplets(&emb, labels, items, config.miner, rng);
    let (loss, seeds) = batch_loss(&emb, &triplets, config.margin);
    let zero = || model.params().iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
    let partials: Vec<Vec<Tensor<T>>> = forwards
        .par_chunks(GRAD_CHUNK)
        .zip(seeds.par_chunks(GRAD_CHUNK))
        .map(|(fw, sd)| {
            let mut acc = zero();
            for ((g, vars, b), seed) in fw.iter().zip(sd) {
                if seed.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                let seed = Tensor::from_vec(&[seed.len()], seed.clone()).expect("embedding shape");
                let mut grads = g.backward_with(b.embedding, seed)?;
                for (a, v) in acc.iter_mut().zip(vars) {
                    a.add_assign(&grads.take(*v)?);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_, crate::autograd::AutogradError>>()
        .map_err(ModelError::from)?;
    let mut grads = zero();
    for part in &partials {
        for (a, p) in grads.iter_mut().zip(part) {
            a.add_assign(p);
        }
    }
    Ok(BatchGradients {
        loss,
        triplets,
        grads,
    })
}

/// `p ← p − lr·(g + wd·p)`.
pub fn sgd_step<T: Real>(model: &mut DepModel<T>, grads: &[Tensor<T>], lr: f64, weight_decay: f64) {
    let (lr, wd) = (T::of(lr), T::of(weight_decay));
    for (p, g) in model.params_mut().iter_mut().zip(grads) {
        for (v, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * (*gv + wd * *v);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
    pub triplets: usize,
}

/// One pass of SGD over cluster-balanced batches with fixed pseudo-labels.
pub fn train_epoch<T: Real>(
    model: &mut DepModel<T>,
    data: &PatchDataset<T>,
    pseudo_labels: &[usize],
    k: usize,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if pseudo_labels.len() != data.len() {
        return Err(TrainError::Dataset {
            images: data.len(),
            ids: pseudo_labels.len(),
        });
    }
    let seed = config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let batches = build_batches(pseudo_labels, k, config.samples_per_cluster, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut total = 0.0;
    let mut triplets = 0;
    for (b, batch) in batches.iter().enumerate() {
        let images: Vec<&Tensor<T>> = batch.iter().map(|&i| &data.images[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| pseudo_labels[i]).collect();
        let bg = batch_gradients(model, &images, &labels, batch, config, &mut rng)?;
        if !bg.loss.is_finite() || bg.grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { epoch, batch: b });
        }
        sgd_step(model, &bg.grads, config.learning_rate, config.weight_decay);
        log::debug!("epoch {epoch} batch {b}: loss {:.4} over {} triplets", bg.loss, bg.triplets.len());
        total += bg.loss;
        triplets += bg.triplets.len();
    }
    Ok(EpochStats {
        mean_loss: total / batches.len() as f64,
        batches: batches.len(),
        triplets,
    })
}

/// Embeds every image as `f64` rows.
pub fn embed_points<T: Real>(model: &DepModel<T>, images: &[Tensor<T>]) -> Result<Points, TrainError> {
    let rows = model.embed_batch(images)?;
    let dim = model.config().embed_dim;
    Ok(Points::from_f32(rows.len(), dim, &rows.concat())?)
}

/// Whitens and clusters embeddings; `transform` is reused when given.
pub fn cluster_embeddings(
    points: &Points,
    transform: Option<WhitenTransform>,
    k: usize,
    n_pca: usize,
    seed: u64,
) -> Result<ClusterState, TrainError> {
    let transform = match transform {
        Some(t) => t,
        None => {
            let n_pca = n_pca.min(points.dim()).min(points.len().saturating_sub(1));
            cluster::fit_whiten(points, n_pca)?
        }
    };
    let white = transform.apply_all(points)?;
    let mut state = cluster::kmeans(&white, k, seed)?;
    state.transform = Some(transform);
    Ok(state)
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// NMI between the assignments of epoch `t` and `t−1`, for `t ≥ 1`.
    pub nmi_history: Vec<f64>,
    pub losses: Vec<f64>,
    pub epochs: usize,
    /// Clustering used for the last epoch.
    pub final_clusters: ClusterState,
}

fn append_line(path: &Path, line: &str) -> Result<(), TrainError> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(store::io_at(path))?;
    writeln!(f, "{line}").map_err(store::io_at(path))?;
    Ok(())
}

/// Runs the alternating loop. When `out_dir` is set, the checkpoint is
/// rewritten and one `epoch<TAB>nmi<TAB>mean_loss` line appended after every
/// epoch; `nmi` is `nan` for the first epoch.
pub fn train<T: Real>(
    model: &mut DepModel<T>,
    data: &PatchDataset<T>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let log_path: Option<PathBuf> = out_dir.map(|d| d.join(NMI_LOG_FILE));
    if let (Some(dir), Some(log)) = (out_dir, &log_path) {
        std::fs::create_dir_all(dir).map_err(store::io_at(dir))?;
        std::fs::write(log, "").map_err(store::io_at(log))?;
    }
    let mut nmi_history = Vec::new();
    let mut losses = Vec::new();
    let mut prev: Option<ClusterState> = None;
    let mut streak = 0;
    let mut epoch = 0;
    while epoch < config.max_epochs {
        let points = embed_points(model, &data.images)?;
        let reuse = if config.refit_whiten {
            None
        } else {
            prev.as_ref().and_then(|s| s.transform.clone())
        };
        let state = cluster_embeddings(&points, reuse, config.k, config.n_pca, config.seed.wrapping_add(epoch as u64))?;
        let nmi = match &prev {
            Some(p) => {
                let v = cluster::nmi(&p.assignments, &state.assignments)?;
                if let Some(&last) = nmi_history.last() {
                    let change: f64 = v - last;
                    streak = if change.abs() < config.nmi_delta { streak + 1 } else { 0 };
                }
                nmi_history.push(v);
                v
            }
            None => f64::NAN,
        };
        let stats = train_epoch(model, data, &state.assignments, config.k, config, epoch)?;
        losses.push(stats.mean_loss);
        log::info!("epoch {epoch}: nmi {nmi:.4} loss {:.4} ({} triplets)", stats.mean_loss, stats.triplets);
        if let (Some(dir), Some(log)) = (out_dir, &log_path) {
            model.save(&dir.join(CHECKPOINT_FILE))?;
            append_line(log, &format!("{epoch}\t{nmi}\t{}", stats.mean_loss))?;
        }
        prev = Some(state);
        epoch += 1;
        if streak >= config.nmi_patience {
            break;
        }
    }
    Ok(TrainReport {
        nmi_history,
        losses,
        epochs: epoch,
        final_clusters: prev.expect("at least one epoch"),
    })
}
