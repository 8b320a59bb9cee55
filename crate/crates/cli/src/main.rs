//! `terrain`: patch extraction, taxonomy tools, training, retrieval and the
//! label service.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use labelsvc::labels::{self, LabelStore};
use labelsvc::{ServeConfig, INDEX_FILE, LABELS_FILE};
use terrain_core::cluster::{self, ASSIGNMENTS_FILE};
use terrain_core::dcml::{self, PatchDataset, TrainConfig, CHECKPOINT_FILE};
use terrain_core::nnet::{DepModel, ModelConfig};
use terrain_core::patchex::{self, ExtractConfig, ImageMeta, Manifest, MANIFEST_FILE};
use terrain_core::retrieval::{self, LabeledQuery};
use terrain_core::store::EmbeddingStore;
use terrain_core::synthetic::{self, CorpusSpec};
use terrain_core::taxonomy::{self, ClassRegistry};

#[derive(Parser)]
#[command(name = "terrain", version, about = "Self-supervised terrain texture clustering and retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut train/test patches from a set of source images.
    Extract(ExtractArgs),
    /// Taxonomy code tools.
    #[command(subcommand)]
    Taxon(TaxonCommand),
    /// Model checkpoints.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Whitening plus k-means over an embedding store.
    #[command(subcommand)]
    Cluster(ClusterCommand),
    /// Alternating cluster / triplet training.
    Train(TrainArgs),
    /// Retrieval index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Nearest neighbours of one indexed patch.
    Query(QueryArgs),
    /// Per-class Precision@K over labelled queries.
    Eval(EvalArgs),
    /// Run the label service.
    Serve(ServeArgs),
    /// Label store tools.
    #[command(subcommand)]
    Labels(LabelsCommand),
    /// Write a procedural texture corpus with known classes.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Directory holding the image files.
    #[arg(long)]
    images: PathBuf,
    /// Image metadata table; defaults to `images.tsv` next to the images.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    side_left: u32,
    #[arg(long, default_value_t = 128)]
    side_right: u32,
    /// Stride as a fraction of the patch side.
    #[arg(long, default_value_t = 0.5)]
    stride: f64,
    /// Fraction of the image width, from the left, used for training.
    #[arg(long, default_value_t = 0.6)]
    left_fraction: f64,
    #[arg(long, default_value_t = 15.0)]
    max_range: f64,
    /// File of image ids to drop, one per line.
    #[arg(long)]
    exclude: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TaxonCommand {
    /// Parse a code and print its canonical form.
    Parse { code: String },
    /// Print the attribute description of a code.
    Describe { code: String },
    /// Check a class registry file, listing every error.
    Validate { registry: PathBuf },
    /// Print the built-in class registry.
    Classes,
    /// Print the machine-readable grammar.
    Grammar,
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Write a freshly initialised checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
        /// Model configuration file (`key=value`).
        #[arg(long, conflicts_with = "tiny")]
        config: Option<PathBuf>,
        /// Small configuration for smoke runs.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed the patches of a dataset into an embedding store.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the configuration stored in a checkpoint.
    Show { checkpoint: PathBuf },
}

#[derive(Subcommand)]
enum ClusterCommand {
    Run {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = cluster::DEFAULT_N_PCA)]
        n_pca: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `clusters.tsv` and `centroids.temb`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    dir: PathBuf,
    /// Training configuration file (`key=value`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model configuration for a fresh model.
    #[arg(long, conflicts_with = "init")]
    model_config: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory; defaults to the dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed a split and write the index with its metadata sidecar.
    Build {
        /// Dataset directory.
        #[arg(long)]
        dir: PathBuf,
        /// Defaults to `checkpoint.depc` in the dataset directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `index.temb` in the dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Clusters over the index used to sample queries; 0 disables.
        #[arg(long, default_value_t = 25)]
        clusters: usize,
        #[arg(long, default_value_t = cluster::DEFAULT_N_PCA)]
        n_pca: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct IndexLocation {
    /// Dataset directory with the manifest.
    #[arg(long)]
    dir: PathBuf,
    /// Defaults to `index.temb` in the dataset directory.
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    loc: IndexLocation,
    #[arg(long)]
    patch: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Keep neighbours from the query's own site and drive.
    #[arg(long)]
    no_exclude: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    loc: IndexLocation,
    /// Label export (`patch_id, class_id, taxonomy_code`).
    #[arg(long, required_unless_present = "image_labels")]
    labels: Option<PathBuf>,
    /// Image-level labels (`image_id, class_id`) applied to every patch.
    #[arg(long, conflicts_with = "labels")]
    image_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    no_exclude: bool,
    /// Class registry for the taxonomy column; defaults to the built-in one.
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Artifact directory.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Static UI bundle; defaults to `ui/` in the artifact directory.
    #[arg(long)]
    ui: Option<PathBuf>,
}

#[derive(Subcommand)]
enum LabelsCommand {
    /// Print current labels as `patch_id, class_id, taxonomy_code`.
    Export {
        /// Artifact directory holding `labels.jsonl`.
        #[arg(long, required_unless_present = "labels")]
        dir: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = CorpusSpec::default().images_per_class)]
    images_per_class: usize,
    #[arg(long, default_value_t = CorpusSpec::default().width)]
    width: u32,
    #[arg(long, default_value_t = CorpusSpec::default().height)]
    height: u32,
    #[arg(long, default_value_t = CorpusSpec::default().seed)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<patchex::Split> {
        match self {
            SplitArg::Train => Some(patchex::Split::Train),
            SplitArg::Test => Some(patchex::Split::Test),
            SplitArg::All => None,
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract(a) => extract(a),
        Command::Taxon(c) => taxon(c),
        Command::Model(c) => model(c),
        Command::Cluster(ClusterCommand::Run { embeddings, k, n_pca, seed, out }) => {
            let store = EmbeddingStore::read(&embeddings)?;
            let points = cluster::Points::from_f32(store.len(), store.dim(), store.data())?;
            let state = dcml::cluster_embeddings(&points, None, k, n_pca, seed)?;
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            state.write_dump(store.ids(), &out)?;
            println!("k={k} inertia={:.6} converged={}", state.inertia, state.converged);
            Ok(())
        }
        Command::Train(a) => train(a),
        Command::Index(IndexCommand::Build { dir, checkpoint, out, split, clusters, n_pca, seed }) => {
            let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
            let model = DepModel::<f32>::load(&checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT_FILE)))?;
            let data = PatchDataset::<f32>::load(&manifest, &dir, split.split(), model.config().input_size)?;
            let rows = model.embed_batch(&data.images)?;
            let store = EmbeddingStore::from_rows(data.ids.clone(), &rows)?;
            let index = retrieval::build_index(&manifest, &store, split.split())?;
            let assignments = if clusters > 0 {
                let points = cluster::Points::from_f32(store.len(), store.dim(), store.data())?;
                let k = clusters.min(points.len());
                Some(dcml::cluster_embeddings(&points, None, k, n_pca, seed)?.assignments)
            } else {
                None
            };
            let out = out.unwrap_or_else(|| dir.join(INDEX_FILE));
            retrieval::export_embeddings(&index, &out, assignments.as_deref())?;
            println!("indexed {} patches (dim {}) into {}", index.len(), index.dim(), out.display());
            Ok(())
        }
        Command::Query(a) => {
            let (_, index) = load_index(&a.loc)?;
            let query = index.query_for(&a.patch)?;
            let result = retrieval::knn(&index, &query, a.k, !a.no_exclude)?;
            println!("rank\tpatch_id\tdistance\tsame_site_drive");
            for (i, n) in result.neighbors.iter().enumerate() {
                println!("{}\t{}\t{:.6}\t{}", i + 1, n.patch_id, n.distance, n.same_site_drive);
            }
            if result.short {
                log::warn!("only {} of {} neighbours available", result.neighbors.len(), a.k);
            }
            Ok(())
        }
        Command::Eval(a) => eval(a),
        Command::Serve(a) => {
            let mut config = ServeConfig::new(a.dir, SocketAddr::new(a.host, a.port));
            config.labels = a.labels;
            config.ui = a.ui;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(labelsvc::serve(config))?;
            Ok(())
        }
        Command::Labels(LabelsCommand::Export { dir, labels }) => {
            let path = labels.or_else(|| dir.map(|d| d.join(LABELS_FILE))).expect("clap requires one");
            if !path.exists() {
                bail!("no label store at {}", path.display());
            }
            print!("{}", LabelStore::open(&path)?.snapshot().export_tsv());
            Ok(())
        }
        Command::Synth(a) => {
            let spec = CorpusSpec { images_per_class: a.images_per_class, width: a.width, height: a.height, seed: a.seed };
            let corpus = synthetic::write_corpus(&a.out, &spec)?;
            println!("wrote {} images of 8 classes to {}", corpus.metas.len(), a.out.display());
            Ok(())
        }
    }
}

fn extract(a: ExtractArgs) -> Result<()> {
    let meta_path = a.meta.unwrap_or_else(|| a.images.parent().unwrap_or(Path::new(".")).join(synthetic::META_FILE));
    let text = std::fs::read_to_string(&meta_path).with_context(|| meta_path.display().to_string())?;
    let metas = ImageMeta::parse_file(&text)?;
    let exclude: BTreeSet<String> = match &a.exclude {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| p.display().to_string())?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        None => BTreeSet::new(),
    };
    let config = ExtractConfig {
        side_left: a.side_left,
        side_right: a.side_right,
        stride_fraction: a.stride,
        left_fraction: a.left_fraction,
        max_range_m: a.max_range,
        exclude,
    };
    let s = patchex::build_manifest(&metas, &a.images, &config, &a.out)?;
    println!(
        "images used {}, skipped {}; patches train {}, test {}",
        s.images_used, s.images_skipped, s.train, s.test
    );
    Ok(())
}

fn taxon(c: TaxonCommand) -> Result<()> {
    match c {
        TaxonCommand::Parse { code } => println!("{}", taxonomy::parse(&code)?),
        TaxonCommand::Describe { code } => println!("{}", taxonomy::describe(&taxonomy::parse(&code)?)),
        TaxonCommand::Validate { registry } => {
            let text = std::fs::read_to_string(&registry).with_context(|| registry.display().to_string())?;
            let errors = ClassRegistry::validate(&text);
            for e in &errors {
                println!("{}: {e}", registry.display());
            }
            if !errors.is_empty() {
                bail!("{} errors in {}", errors.len(), registry.display());
            }
            println!("ok");
        }
        TaxonCommand::Classes => print!("{}", ClassRegistry::builtin().to_tsv()),
        TaxonCommand::Grammar => print!("{}", taxonomy::GRAMMAR_JSON),
    }
    Ok(())
}

fn model(c: ModelCommand) -> Result<()> {
    match c {
        ModelCommand::Init { out, config, tiny, seed } => {
            let mut cfg = match (config, tiny) {
                (Some(p), _) => ModelConfig::parse(&std::fs::read_to_string(&p).with_context(|| p.display().to_string())?)?,
                (None, true) => ModelConfig::tiny(),
                (None, false) => ModelConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let model = DepModel::<f32>::new(cfg)?;
            model.save(&out)?;
            println!("{} parameters written to {}", model.param_count(), out.display());
        }
        ModelCommand::Embed { checkpoint, dir, split, out } => {
            let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
            let model = DepModel::<f32>::load(&checkpoint)?;
            let data = PatchDataset::<f32>::load(&manifest, &dir, split.split(), model.config().input_size)?;
            let rows = model.embed_batch(&data.images)?;
            EmbeddingStore::from_rows(data.ids, &rows)?.write(&out)?;
            println!("embedded {} patches into {}", rows.len(), out.display());
        }
        ModelCommand::Show { checkpoint } => {
            let model = DepModel::<f32>::load(&checkpoint)?;
            print!("{}", model.config().to_text());
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        config.max_epochs = e;
    }
    if let Some(k) = a.k {
        config.k = k;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let mut model = match (&a.init, &a.model_config) {
        (Some(p), _) => DepModel::<f32>::load(p)?,
        (None, Some(p)) => {
            DepModel::new(ModelConfig::parse(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?)?
        }
        (None, None) => DepModel::new(ModelConfig::default())?,
    };
    let manifest = Manifest::read(&a.dir.join(MANIFEST_FILE))?;
    let data = PatchDataset::<f32>::load(&manifest, &a.dir, Some(patchex::Split::Train), model.config().input_size)?;
    let out = a.out.unwrap_or_else(|| a.dir.clone());
    log::info!("training on {} patches, k={}, up to {} epochs", data.len(), config.k, config.max_epochs);
    let report = dcml::train(&mut model, &data, &config, Some(&out))?;
    report.final_clusters.write_dump(&data.ids, &out)?;
    std::fs::write(out.join("train.cfg"), config.to_text()).with_context(|| out.display().to_string())?;
    let last = report.nmi_history.last().map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} epochs, final NMI {last}, checkpoint {}, clusters {}",
        report.epochs,
        out.join(CHECKPOINT_FILE).display(),
        out.join(ASSIGNMENTS_FILE).display()
    );
    Ok(())
}

fn load_index(loc: &IndexLocation) -> Result<(Manifest, retrieval::EmbeddingIndex)> {
    let manifest = Manifest::read(&loc.dir.join(MANIFEST_FILE))?;
    let path = loc.index.clone().unwrap_or_else(|| loc.dir.join(INDEX_FILE));
    let store = EmbeddingStore::read(&path)?;
    let held: std::collections::HashSet<&str> = store.ids().iter().map(String::as_str).collect();
    let subset = Manifest {
        records: manifest.records.iter().filter(|r| held.contains(r.patch_id.as_str())).cloned().collect(),
    };
    let index = retrieval::build_index(&subset, &store, None)?;
    Ok((manifest, index))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (manifest, index) = load_index(&a.loc)?;
    let labels: HashMap<String, u32> = match (&a.labels, &a.image_labels) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).with_context(|| p.display().to_string())?;
            labels::labeled_queries(&labels::parse_export(&text)?).1
        }
        (None, Some(p)) => {
            let by_image = synthetic::read_image_labels(p)?;
            manifest
                .records
                .iter()
                .filter_map(|r| by_image.get(&r.image_id).map(|&c| (r.patch_id.clone(), c)))
                .collect()
        }
        (None, None) => unreachable!("clap requires one label source"),
    };
    let mut queries: Vec<LabeledQuery> = index
        .ids()
        .iter()
        .filter_map(|id| labels.get(id).map(|&class_id| LabeledQuery { patch_id: id.clone(), class_id }))
        .collect();
    queries.sort_by(|x, y| x.patch_id.cmp(&y.patch_id));
    if queries.is_empty() {
        bail!("no labelled patches in the index");
    }
    let registry = match &a.registry {
        Some(p) => ClassRegistry::parse(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => ClassRegistry::builtin(),
    };
    let table = retrieval::eval_all(&index, &queries, &labels, a.k, !a.no_exclude, Some(&registry))?;
    print!("{}", table.to_tsv());
    Ok(())
}
