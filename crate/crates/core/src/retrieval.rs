//! Exact nearest-neighbour retrieval and Precision@K evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cluster::ClusterState;
use crate::patchex::{Manifest, Split};
use crate::store::{self, EmbeddingStore, StoreError};
use crate::taxonomy::ClassRegistry;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("empty index")]
    EmptyIndex,
    #[error("duplicate patch id {0}")]
    Duplicate(String),
    #[error("no embedding for patch {0}")]
    MissingEmbedding(String),
    #[error("patch {0} is not in the index")]
    UnknownPatch(String),
    #[error("non-finite embedding for patch {0}")]
    NonFinite(String),
    #[error("query has dimension {actual}, index has {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("K must be at least 1")]
    ZeroK,
    #[error("unlabeled patches: {}", .0.join(", "))]
    Unlabeled(Vec<String>),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Capture location used for near-duplicate exclusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SiteDrive {
    pub site: i64,
    pub drive: i64,
}

/// Immutable set of embeddings with their capture metadata.
#[derive(Clone, Debug)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    meta: Vec<SiteDrive>,
    position: HashMap<String, usize>,
}

impl EmbeddingIndex {
    pub fn new(
        ids: Vec<String>,
        dim: usize,
        data: Vec<f32>,
        meta: Vec<SiteDrive>,
    ) -> Result<Self, RetrievalError> {
        if ids.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if data.len() != ids.len() * dim || meta.len() != ids.len() {
            return Err(RetrievalError::Invalid(format!(
                "{} ids, {} metadata rows, {} values for dim {dim}",
                ids.len(),
                meta.len(),
                data.len()
            )));
        }
        let mut position = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if position.insert(id.clone(), i).is_some() {
                return Err(RetrievalError::Duplicate(id.clone()));
            }
            if data[i * dim..(i + 1) * dim].iter().any(|v| !v.is_finite()) {
                return Err(RetrievalError::NonFinite(id.clone()));
            }
        }
        Ok(Self {
            ids,
            dim,
            data,
            meta,
            position,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self, i: usize) -> SiteDrive {
        self.meta[i]
    }

    pub fn position(&self, patch_id: &str) -> Option<usize> {
        self.position.get(patch_id).copied()
    }

    /// Query description for a member of the index.
    pub fn query_for(&self, patch_id: &str) -> Result<Query<'_>, RetrievalError> {
        let i = self
            .position(patch_id)
            .ok_or_else(|| RetrievalError::UnknownPatch(patch_id.to_string()))?;
        Ok(Query {
            patch_id: Some(&self.ids[i]),
            embedding: self.row(i),
            location: self.meta[i],
        })
    }

    pub fn to_store(&self) -> EmbeddingStore {
        EmbeddingStore::new(self.ids.clone(), self.dim, self.data.clone()).expect("index invariants")
    }
}

/// Indexes the rows of `store` that belong to `split` (every row when
/// `None`), in file order.
pub fn build_index(
    manifest: &Manifest,
    store: &EmbeddingStore,
    split: Option<Split>,
) -> Result<EmbeddingIndex, RetrievalError> {
    let wanted: HashMap<&str, SiteDrive> = manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| {
            (
                r.patch_id.as_str(),
                SiteDrive {
                    site: r.site,
                    drive: r.drive,
                },
            )
        })
        .collect();
    let mut seen = HashSet::new();
    let (mut ids, mut data, mut meta) = (Vec::new(), Vec::new(), Vec::new());
    for (i, id) in store.ids().iter().enumerate() {
        if !seen.insert(id.as_str()) {
            return Err(RetrievalError::Duplicate(id.clone()));
        }
        if let Some(&m) = wanted.get(id.as_str()) {
            ids.push(id.clone());
            data.extend_from_slice(store.row(i));
            meta.push(m);
        }
    }
    let mut missing: Vec<&str> = wanted.keys().copied().filter(|id| !seen.contains(id)).collect();
    missing.sort_unstable();
    if let Some(first) = missing.first() {
        return Err(RetrievalError::MissingEmbedding(first.to_string()));
    }
    EmbeddingIndex::new(ids, store.dim(), data, meta)
}

/// A retrieval request.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    /// Indexed patch the query came from; never returned as its own neighbour.
    pub patch_id: Option<&'a str>,
    pub embedding: &'a [f32],
    pub location: SiteDrive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub patch_id: String,
    pub distance: f64,
    pub same_site_drive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub query_id: Option<String>,
    pub requested: usize,
    pub neighbors: Vec<Neighbor>,
    /// Fewer than `requested` candidates were eligible.
    pub short: bool,
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Exhaustive euclidean k-NN; ties go to the smaller patch id.
pub fn knn(
    index: &EmbeddingIndex,
    query: &Query<'_>,
    k: usize,
    exclude_same_site_drive: bool,
) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if query.embedding.len() != index.dim {
        return Err(RetrievalError::Dimension {
            expected: index.dim,
            actual: query.embedding.len(),
        });
    }
    let mut cands: Vec<(f64, usize)> = (0..index.len())
        .filter(|&i| Some(index.ids[i].as_str()) != query.patch_id)
        .filter(|&i| !(exclude_same_site_drive && index.meta[i] == query.location))
        .map(|i| (distance(query.embedding, index.row(i)), i))
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| index.ids[a.1].cmp(&index.ids[b.1])));
    let short = cands.len() < k;
    cands.truncate(k);
    Ok(RetrievalResult {
        query_id: query.patch_id.map(str::to_string),
        requested: k,
        neighbors: cands
            .into_iter()
            .map(|(d, i)| Neighbor {
                patch_id: index.ids[i].clone(),
                distance: d,
                same_site_drive: index.meta[i] == query.location,
            })
            .collect(),
        short,
    })
}

/// Fraction of the `requested` slots holding a neighbour of the query's
/// class; missing slots of a short result count as misses.
pub fn precision_at_k(
    result: &RetrievalResult,
    labels: &HashMap<String, u32>,
    query_class: u32,
) -> Result<f64, RetrievalError> {
    let missing: Vec<String> = result
        .neighbors
        .iter()
        .filter(|n| !labels.contains_key(&n.patch_id))
        .map(|n| n.patch_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(RetrievalError::Unlabeled(missing));
    }
    let hits = result
        .neighbors
        .iter()
        .filter(|n| labels[&n.patch_id] == query_class)
        .count();
    Ok(hits as f64 / result.requested as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub class_id: u32,
    pub taxonomy: String,
    pub precision: f64,
    pub queries: usize,
}

/// Per-class mean Precision@K with the unweighted mean over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub k: usize,
    pub rows: Vec<EvalRow>,
    pub average: f64,
}

impl EvalTable {
    /// Builds a table from per-class precisions, averaging over classes.
    pub fn from_rows(k: usize, rows: Vec<EvalRow>) -> Self {
        let average = if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| r.precision).sum::<f64>() / rows.len() as f64
        };
        Self { k, rows, average }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("class_id\ttaxonomy\tprecision_at_{}\tqueries\n", self.k);
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{:.3}\t{}\n", r.class_id, r.taxonomy, r.precision, r.queries));
        }
        out.push_str(&format!("avg\t\t{:.3}\t{}\n", self.average, self.rows.iter().map(|r| r.queries).sum::<usize>()));
        out
    }
}

/// A labelled query patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledQuery {
    pub patch_id: String,
    pub class_id: u32,
}

/// Runs every query against the index and aggregates Precision@K by class.
pub fn eval_all(
    index: &EmbeddingIndex,
    queries: &[LabeledQuery],
    labels: &HashMap<String, u32>,
    k: usize,
    exclude_same_site_drive: bool,
    registry: Option<&ClassRegistry>,
) -> Result<EvalTable, RetrievalError> {
    let scores: Vec<(u32, f64)> = queries
        .par_iter()
        .map(|q| {
            let query = index.query_for(&q.patch_id)?;
            let result = knn(index, &query, k, exclude_same_site_drive)?;
            Ok((q.class_id, precision_at_k(&result, labels, q.class_id)?))
        })
        .collect::<Result<_, RetrievalError>>()?;
    let mut by_class: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (c, p) in scores {
        let e = by_class.entry(c).or_default();
        e.0 += p;
        e.1 += 1;
    }
    let rows = by_class
        .into_iter()
        .map(|(class_id, (sum, n))| EvalRow {
            class_id,
            taxonomy: registry
                .and_then(|r| r.get(class_id))
                .map(|c| c.code.to_string())
                .unwrap_or_default(),
            precision: sum / n as f64,
            queries: n,
        })
        .collect();
    Ok(EvalTable::from_rows(k, rows))
}

/// Seeded uniform sample of up to `per_cluster` members from every cluster,
/// in cluster order.
pub fn sample_queries(state: &ClusterState, ids: &[String], per_cluster: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for mut members in state.members() {
        members.shuffle(&mut rng);
        members.truncate(per_cluster);
        out.extend(members.into_iter().map(|i| ids[i].clone()));
    }
    out
}

/// Sidecar with one `patch_id<TAB>cluster<TAB>site<TAB>drive` line per row.
pub fn meta_path(store: &Path) -> PathBuf {
    store.with_extension("meta.tsv")
}

/// Writes the index as an embedding store plus its metadata sidecar.
/// `clusters` is row-aligned with the index; `-1` marks unknown.
pub fn export_embeddings(
    index: &EmbeddingIndex,
    path: &Path,
    clusters: Option<&[usize]>,
) -> Result<(), RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if clusters.is_some_and(|c| c.len() != index.len()) {
        return Err(RetrievalError::Invalid("cluster list is not row-aligned".into()));
    }
    index.to_store().write(path)?;
    let mut text = String::from("patch_id\tcluster\tsite\tdrive\n");
    for (i, id) in index.ids.iter().enumerate() {
        let c = clusters.map_or(-1, |c| c[i] as i64);
        text.push_str(&format!("{id}\t{c}\t{}\t{}\n", index.meta[i].site, index.meta[i].drive));
    }
    store::write_file(&meta_path(path), text.as_bytes())?;
    Ok(())
}

/// One row of the metadata sidecar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaRow {
    pub patch_id: String,
    pub cluster: Option<usize>,
    pub location: SiteDrive,
}

/// Reads the sidecar written by [`export_embeddings`].
pub fn read_meta(path: &Path) -> Result<Vec<MetaRow>, RetrievalError> {
    let text = std::fs::read_to_string(path).map_err(store::io_at(path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || RetrievalError::Invalid(format!("{}:{}: expected patch_id, cluster, site, drive", path.display(), n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let cluster: i64 = f[1].parse().map_err(|_| bad())?;
        out.push(MetaRow {
            patch_id: f[0].to_string(),
            cluster: usize::try_from(cluster).ok(),
            location: SiteDrive {
                site: f[2].parse().map_err(|_| bad())?,
                drive: f[3].parse().map_err(|_| bad())?,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn index_of(rows: &[(&str, [f32; 2], (i64, i64))]) -> EmbeddingIndex {
        EmbeddingIndex::new(
            rows.iter().map(|r| r.0.to_string()).collect(),
            2,
            rows.iter().flat_map(|r| r.1).collect(),
            rows.iter().map(|r| SiteDrive { site: r.2 .0, drive: r.2 .1 }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn self_match_comes_first() {
        let idx = index_of(&[("a", [0.0, 0.0], (1, 1)), ("b", [1.0, 1.0], (2, 2)), ("c", [3.0, 0.0], (3, 3))]);
        let q = Query { patch_id: None, embedding: &[1.0, 1.0], location: SiteDrive { site: 9, drive: 9 } };
        let r = knn(&idx, &q, 2, true).unwrap();
        assert_eq!(r.neighbors[0].patch_id, "b");
        assert_eq!(r.neighbors[0].distance, 0.0);
        assert!(!r.short);
    }

    #[test]
    fn full_exclusion_is_short_and_empty() {
        let idx = index_of(&[("a", [0.0, 0.0], (1, 1)), ("b", [1.0, 1.0], (1, 1))]);
        let q = Query { patch_id: None, embedding: &[0.0, 0.0], location: SiteDrive { site: 1, drive: 1 } };
        let r = knn(&idx, &q, 5, true).unwrap();
        assert!(r.neighbors.is_empty() && r.short);
        let r = knn(&idx, &q, 5, false).unwrap();
        assert_eq!(r.neighbors.len(), 2);
        assert!(r.neighbors.iter().all(|n| n.same_site_drive));
    }

    #[test]
    fn query_never_returns_itself() {
        let idx = index_of(&[("a", [0.0, 0.0], (1, 1)), ("b", [1.0, 1.0], (2, 2))]);
        let r = knn(&idx, &idx.query_for("a").unwrap(), 3, false).unwrap();
        assert_eq!(r.neighbors.len(), 1);
        assert_eq!(r.neighbors[0].patch_id, "b");
    }

    fn result(ids: &[&str], requested: usize) -> RetrievalResult {
        RetrievalResult {
            query_id: None,
            requested,
            neighbors: ids
                .iter()
                .map(|id| Neighbor { patch_id: id.to_string(), distance: 0.0, same_site_drive: false })
                .collect(),
            short: ids.len() < requested,
        }
    }

    #[test]
    fn precision_examples() {
        let ids: Vec<String> = (0..10).map(|i| format!("n{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut labels: HashMap<String, u32> = ids.iter().map(|id| (id.clone(), 2)).collect();
        assert_eq!(precision_at_k(&result(&refs, 10), &labels, 2).unwrap(), 1.0);
        labels.insert("n3".into(), 7);
        assert!((precision_at_k(&result(&refs, 10), &labels, 2).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(precision_at_k(&result(&refs, 10), &labels, 5).unwrap(), 0.0);
        assert_eq!(precision_at_k(&result(&refs[5..], 10), &labels, 2).unwrap(), 0.5);
        assert!(matches!(
            precision_at_k(&result(&["zz"], 1), &labels, 2),
            Err(RetrievalError::Unlabeled(v)) if v == vec!["zz".to_string()]
        ));
    }

    #[test]
    fn macro_average() {
        let rows = |ps: &[f64]| {
            ps.iter()
                .enumerate()
                .map(|(i, &p)| EvalRow { class_id: i as u32, taxonomy: String::new(), precision: p, queries: 1 })
                .collect()
        };
        assert_eq!(EvalTable::from_rows(10, rows(&[1.0, 0.5])).average, 0.75);
        let idx = index_of(&[("a", [0.0, 0.0], (1, 1)), ("b", [0.1, 0.0], (2, 2))]);
        let labels: HashMap<String, u32> = [("a".to_string(), 1), ("b".to_string(), 1)].into();
        let t = eval_all(&idx, &[LabeledQuery { patch_id: "a".into(), class_id: 1 }], &labels, 1, true, None).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.average, 1.0);
        assert!(t.to_tsv().ends_with("avg\t\t1.000\t1\n"));
    }

    #[test]
    fn index_errors() {
        assert!(matches!(
            EmbeddingIndex::new(vec![], 2, vec![], vec![]),
            Err(RetrievalError::EmptyIndex)
        ));
        let sd = SiteDrive { site: 0, drive: 0 };
        assert!(matches!(
            EmbeddingIndex::new(vec!["a".into(), "a".into()], 1, vec![0.0, 1.0], vec![sd, sd]),
            Err(RetrievalError::Duplicate(_))
        ));
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.temb");
        let n = 10;
        let idx = EmbeddingIndex::new(
            (0..n).map(|i| format!("p{i}")).collect(),
            3,
            (0..n * 3).map(|v| (v as f32).sin()).collect(),
            vec![SiteDrive { site: 1, drive: 2 }; n],
        )
        .unwrap();
        export_embeddings(&idx, &path, Some(&[0, 1, 2, 0, 1, 2, 0, 1, 2, 0])).unwrap();
        let back = EmbeddingStore::read(&path).unwrap();
        assert_eq!((back.len(), back.dim()), (10, 3));
        assert_eq!(back.data(), idx.to_store().data());
        let meta = std::fs::read_to_string(meta_path(&path)).unwrap();
        assert_eq!(meta.lines().nth(3).unwrap(), "p2\t2\t1\t2");
        let rows = read_meta(&meta_path(&path)).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[2], MetaRow { patch_id: "p2".into(), cluster: Some(2), location: SiteDrive { site: 1, drive: 2 } });
        export_embeddings(&idx, &path, None).unwrap();
        assert!(read_meta(&meta_path(&path)).unwrap().iter().all(|r| r.cluster.is_none()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn knn_matches_full_sort(
            n in 1usize..80,
            k in 1usize..20,
            seed in any::<u64>(),
            exclude in any::<bool>(),
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n * 2).map(|_| rng.random_range(-2..3) as f32).collect();
            let ids: Vec<String> = (0..n).map(|i| format!("id{:03}", (i * 37) % 1000)).collect();
            let meta: Vec<SiteDrive> = (0..n).map(|_| SiteDrive { site: rng.random_range(0..3), drive: 0 }).collect();
            let idx = EmbeddingIndex::new(ids.clone(), 2, data.clone(), meta.clone()).unwrap();
            let q = [rng.random_range(-2..3) as f32, rng.random_range(-2..3) as f32];
            let loc = SiteDrive { site: rng.random_range(0..3), drive: 0 };
            let r = knn(&idx, &Query { patch_id: None, embedding: &q, location: loc }, k, exclude).unwrap();
            let mut all: Vec<(f64, String)> = (0..n)
                .filter(|&i| !exclude || meta[i] != loc)
                .map(|i| {
                    let dx = (q[0] - data[2 * i]) as f64;
                    let dy = (q[1] - data[2 * i + 1]) as f64;
                    ((dx * dx + dy * dy).sqrt(), ids[i].clone())
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<String> = all.iter().take(k).map(|x| x.1.clone()).collect();
            let got: Vec<String> = r.neighbors.iter().map(|x| x.patch_id.clone()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(r.short, all.len() < k);
            for w in r.neighbors.windows(2) {
                prop_assert!(w[0].distance <= w[1].distance);
            }
        }
    }
}
