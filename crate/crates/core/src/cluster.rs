//! Whitening, k-means pseudo-labelling and partition agreement.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::store::{self, EmbeddingStore, StoreError};

/// Singular values below this fraction of the largest are dropped.
pub const RANK_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_N_PCA: usize = 256;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_N_INIT: usize = 10;
pub const ASSIGNMENTS_FILE: &str = "clusters.tsv";
pub const CENTROIDS_FILE: &str = "centroids.temb";

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("need more than {n_pca} points to whiten, got {n}")]
    TooFewForWhitening { n: usize, n_pca: usize },
    #[error("n_pca {n_pca} exceeds dimension {dim}")]
    TooManyComponents { n_pca: usize, dim: usize },
    #[error("data has zero variance")]
    Degenerate,
    #[error("need at least K={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("K must be positive")]
    ZeroK,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("assignment lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty assignment")]
    Empty,
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Dense row-major `n×dim` matrix of `f64` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Points {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self, ClusterError> {
        if data.len() != n * dim {
            return Err(ClusterError::Dimension {
                expected: n * dim,
                actual: data.len(),
            });
        }
        Ok(Self { n, dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, ClusterError> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(ClusterError::Dimension {
                    expected: dim,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            n: rows.len(),
            dim,
            data,
        })
    }

    pub fn from_f32(n: usize, dim: usize, data: &[f32]) -> Result<Self, ClusterError> {
        Self::new(n, dim, data.iter().map(|&v| v as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Centering plus projection onto the leading principal directions, each
/// scaled to unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct WhitenTransform {
    pub mean: Vec<f64>,
    /// `n_pca×dim`, row `i` is `v_i·sqrt(N−1)/σ_i`.
    pub projection: Vec<f64>,
    pub n_pca: usize,
}

impl WhitenTransform {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Whitened coordinates without the final normalisation.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, ClusterError> {
        let dim = self.input_dim();
        if x.len() != dim {
            return Err(ClusterError::Dimension {
                expected: dim,
                actual: x.len(),
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self
            .projection
            .chunks_exact(dim)
            .map(|row| row.iter().zip(&centered).map(|(p, c)| p * c).sum())
            .collect())
    }

    /// Projects, whitens and ℓ2-normalises; a zero projection stays zero.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, ClusterError> {
        let mut y = self.project(x)?;
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            y.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(y)
    }

    pub fn apply_all(&self, points: &Points) -> Result<Points, ClusterError> {
        let rows: Vec<Vec<f64>> = (0..points.len())
            .into_par_iter()
            .map(|i| self.apply(points.row(i)))
            .collect::<Result<_, _>>()?;
        if rows.is_empty() {
            return Points::new(0, self.n_pca, vec![]);
        }
        Points::from_rows(&rows)
    }
}

/// Fits a whitening transform to at most `n_pca` directions.
pub fn fit_whiten(points: &Points, n_pca: usize) -> Result<WhitenTransform, ClusterError> {
    let (n, dim) = (points.len(), points.dim());
    if n <= n_pca {
        return Err(ClusterError::TooFewForWhitening { n, n_pca });
    }
    if n_pca > dim {
        return Err(ClusterError::TooManyComponents { n_pca, dim });
    }
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(points.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| points.row(i)[j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    if max <= 0.0 || !max.is_finite() {
        return Err(ClusterError::Degenerate);
    }
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| svd.singular_values[i] >= RANK_TOLERANCE * max)
        .take(n_pca)
        .collect();
    let scale = ((n - 1) as f64).sqrt();
    let mut projection = Vec::with_capacity(keep.len() * dim);
    for &i in &keep {
        let s = scale / svd.singular_values[i];
        projection.extend((0..dim).map(|j| v_t[(i, j)] * s));
    }
    Ok(WhitenTransform {
        mean,
        projection,
        n_pca: keep.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KmeansOptions {
    pub max_iter: usize,
    /// Independent seeded restarts; the lowest final inertia wins.
    pub n_init: usize,
}

impl Default for KmeansOptions {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            n_init: DEFAULT_N_INIT,
        }
    }
}

/// Result of one k-means fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub k: usize,
    /// `k×dim` row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every centroid update of the winning restart.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
    pub transform: Option<WhitenTransform>,
}

impl ClusterState {
    pub fn dim(&self) -> usize {
        self.centroids.len() / self.k
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        let d = self.dim();
        &self.centroids[c * d..(c + 1) * d]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    /// Member indices of every cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, &a) in self.assignments.iter().enumerate() {
            m[a].push(i);
        }
        m
    }

    /// Nearest centroid of a point in the clustered space.
    pub fn nearest(&self, x: &[f64]) -> usize {
        nearest_centroid(x, &self.centroids, self.dim()).0
    }

    /// Writes `patch_id<TAB>cluster` lines and the centroid block.
    pub fn write_dump(&self, ids: &[String], dir: &Path) -> Result<(), ClusterError> {
        if ids.len() != self.assignments.len() {
            return Err(ClusterError::LengthMismatch(ids.len(), self.assignments.len()));
        }
        let mut text = String::from("patch_id\tcluster\n");
        for (id, a) in ids.iter().zip(&self.assignments) {
            text.push_str(&format!("{id}\t{a}\n"));
        }
        store::write_file(&dir.join(ASSIGNMENTS_FILE), text.as_bytes())?;
        let cids = (0..self.k).map(|c| format!("centroid-{c}")).collect();
        let data = self.centroids.iter().map(|&v| v as f32).collect();
        EmbeddingStore::new(cids, self.dim(), data)?.write(&dir.join(CENTROIDS_FILE))?;
        Ok(())
    }
}

/// Reads a `patch_id<TAB>cluster` file written by [`ClusterState::write_dump`].
pub fn read_assignments(path: &Path) -> Result<Vec<(String, usize)>, ClusterError> {
    let text = std::fs::read_to_string(path).map_err(store::io_at(path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let bad = || ClusterError::Format(format!("{}:{}: expected patch_id<TAB>cluster", path.display(), n + 1));
        let (id, c) = line.split_once('\t').ok_or_else(bad)?;
        out.push((id.to_string(), c.parse().map_err(|_| bad())?));
    }
    Ok(out)
}

fn nearest_centroid(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.chunks_exact(dim.max(1)).enumerate() {
        let d = if dim == 0 { 0.0 } else { sq_dist(x, cent) };
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all(points: &Points, centroids: &[f64]) -> Vec<usize> {
    (0..points.len())
        .into_par_iter()
        .map(|i| nearest_centroid(points.row(i), centroids, points.dim()).0)
        .collect()
}

fn plus_plus(points: &Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k * points.dim());
    centroids.extend_from_slice(points.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids)).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let row = points.row(pick).to_vec();
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &row));
        }
        centroids.extend_from_slice(&row);
    }
    centroids
}

/// Gives every empty cluster the point farthest from the centroid of the
/// currently largest cluster.
fn repair_empty(points: &Points, centroids: &mut [f64], assign: &mut [usize], k: usize) {
    let dim = points.dim();
    let mut sizes = vec![0usize; k];
    for &a in assign.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        let cent = centroids[largest * dim..(largest + 1) * dim].to_vec();
        let mut far = (usize::MAX, -1.0);
        for (i, &a) in assign.iter().enumerate() {
            if a == largest {
                let d = sq_dist(points.row(i), &cent);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        assign[far.0] = empty;
        sizes[largest] -= 1;
        sizes[empty] = 1;
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(points.row(far.0));
    }
}

fn update_means(points: &Points, assign: &[usize], k: usize) -> Vec<f64> {
    let dim = points.dim();
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        let cnt = counts[c].max(1) as f64;
        sums[c * dim..(c + 1) * dim].iter_mut().for_each(|s| *s /= cnt);
    }
    sums
}

/// Sum of squared distances of every point to its assigned centroid.
pub fn inertia(points: &Points, centroids: &[f64], assign: &[usize]) -> f64 {
    let dim = points.dim();
    assign
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(points.row(i), &centroids[a * dim..(a + 1) * dim]))
        .sum()
}

fn lloyd(points: &Points, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> ClusterState {
    let mut centroids = plus_plus(points, k, rng);
    let mut assign = assign_all(points, &centroids);
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        repair_empty(points, &mut centroids, &mut assign, k);
        centroids = update_means(points, &assign, k);
        history.push(inertia(points, &centroids, &assign));
        let next = assign_all(points, &centroids);
        if next == assign {
            converged = true;
            break;
        }
        assign = next;
    }
    if !converged {
        repair_empty(points, &mut centroids, &mut assign, k);
        centroids = update_means(points, &assign, k);
        history.push(inertia(points, &centroids, &assign));
    }
    ClusterState {
        k,
        inertia: *history.last().unwrap_or(&0.0),
        centroids,
        assignments: assign,
        inertia_history: history,
        converged,
        transform: None,
    }
}

/// k-means with default options.
pub fn kmeans(points: &Points, k: usize, seed: u64) -> Result<ClusterState, ClusterError> {
    kmeans_with(points, k, seed, KmeansOptions::default())
}

/// k-means++ seeding followed by Lloyd iterations, restarted `n_init` times.
pub fn kmeans_with(
    points: &Points,
    k: usize,
    seed: u64,
    options: KmeansOptions,
) -> Result<ClusterState, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if points.len() < k {
        return Err(ClusterError::TooFewPoints { n: points.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ClusterState> = None;
    for _ in 0..options.n_init.max(1) {
        let run = lloyd(points, k, options.max_iter, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Normalised mutual information `I(A;B)/sqrt(H(A)·H(B))`, natural logs.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64, ClusterError> {
    if a.len() != b.len() {
        return Err(ClusterError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(ClusterError::Empty);
    }
    let (ca, cb) = (canonical(a), canonical(b));
    let ka = ca.iter().max().unwrap() + 1;
    let kb = cb.iter().max().unwrap() + 1;
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut row = vec![0usize; ka];
    let mut col = vec![0usize; kb];
    for (&x, &y) in ca.iter().zip(&cb) {
        *joint.entry((x, y)).or_default() += 1;
        row[x] += 1;
        col[y] += 1;
    }
    let ha = entropy(row.iter().copied(), n);
    let hb = entropy(col.iter().copied(), n);
    if ha == 0.0 || hb == 0.0 {
        return Ok(if ca == cb { 1.0 } else { 0.0 });
    }
    let mut keys: Vec<_> = joint.into_iter().collect();
    keys.sort_unstable();
    let mi: f64 = keys
        .into_iter()
        .map(|((x, y), c)| {
            let c = c as f64;
            c / n * (c * n / (row[x] as f64 * col[y] as f64)).ln()
        })
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(n: usize, dim: usize, seed: u64) -> Points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Points::new(n, dim, (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = rows.len() as f64;
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let mut c = vec![vec![0.0; d]; d];
        for r in rows {
            for i in 0..d {
                for j in 0..d {
                    c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        c
    }

    /// Cyclic Jacobi eigenvalues of a symmetric matrix.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn whitening_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mix: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw = random_points(50, 8, 3);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                (0..8)
                    .map(|j| (0..8).map(|k| raw.row(i)[k] * mix[k * 8 + j]).sum())
                    .collect()
            })
            .collect();
        let pts = Points::from_rows(&rows).unwrap();
        let t = fit_whiten(&pts, 4).unwrap();
        assert_eq!(t.n_pca, 4);
        let eig = jacobi_eigenvalues(covariance(&rows));
        // Each projection row has squared norm (N-1)/σ² = 1/λ.
        for (i, row) in t.projection.chunks_exact(8).enumerate() {
            let sq: f64 = row.iter().map(|v| v * v).sum();
            assert!((sq * eig[i] - 1.0).abs() < 1e-8, "direction {i}");
        }
        let out: Vec<Vec<f64>> = rows.iter().map(|r| t.project(r).unwrap()).collect();
        let c = covariance(&out);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c[i][j] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn whitening_white_data_stays_white() {
        let pts = random_points(400, 5, 11);
        let rows: Vec<Vec<f64>> = (0..400).map(|i| pts.row(i).to_vec()).collect();
        let t = fit_whiten(&pts, 5).unwrap();
        let out: Vec<Vec<f64>> = rows.iter().map(|r| t.project(r).unwrap()).collect();
        let twice = fit_whiten(&Points::from_rows(&out).unwrap(), 5).unwrap();
        let again: Vec<Vec<f64>> = out.iter().map(|r| twice.project(r).unwrap()).collect();
        let c = covariance(&again);
        for i in 0..5 {
            for j in 0..5 {
                assert!((c[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rank_one_cloud_keeps_one_direction() {
        let dir = [0.3, -1.2, 0.5, 2.0];
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| dir.iter().map(|d| d * (i as f64 - 7.0) + 1.5).collect())
            .collect();
        let t = fit_whiten(&Points::from_rows(&rows).unwrap(), 3).unwrap();
        assert_eq!(t.n_pca, 1);
    }

    #[test]
    fn whitening_errors() {
        assert!(matches!(
            fit_whiten(&random_points(4, 8, 1), 4),
            Err(ClusterError::TooFewForWhitening { .. })
        ));
        assert!(matches!(
            fit_whiten(&random_points(20, 3, 1), 4),
            Err(ClusterError::TooManyComponents { .. })
        ));
    }

    #[test]
    fn apply_whiten_contract() {
        let pts = random_points(60, 6, 5);
        let t = fit_whiten(&pts, 3).unwrap();
        assert!(t.apply(&t.mean).unwrap().iter().all(|&v| v == 0.0));
        let x = pts.row(4);
        let y = t.apply(x).unwrap();
        assert!((y.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        let scaled: Vec<f64> = x.iter().zip(&t.mean).map(|(a, m)| m + 10.0 * (a - m)).collect();
        let z = t.apply(&scaled).unwrap();
        for (a, b) in y.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_cover_when_n_equals_k() {
        let pts = random_points(12, 3, 2);
        let s = kmeans(&pts, 12, 0).unwrap();
        assert_eq!(s.inertia, 0.0);
        let mut seen = s.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 12);
    }

    fn brute_force_inertia(pts: &Points, k: usize) -> f64 {
        let n = pts.len();
        let mut best = f64::INFINITY;
        for code in 0..k.pow(n as u32) {
            let assign: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
            if (0..k).any(|c| !assign.contains(&c)) {
                continue;
            }
            let cent = update_means(pts, &assign, k);
            best = best.min(inertia(pts, &cent, &assign));
        }
        best
    }

    #[test]
    fn unit_square_matches_exhaustive_optimum() {
        let pts = Points::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let best = brute_force_inertia(&pts, 2);
        assert!((best - 1.0).abs() < 1e-15);
        for seed in 0..20 {
            assert_eq!(kmeans(&pts, 2, seed).unwrap().inertia, best, "seed {seed}");
        }
    }

    #[test]
    fn duplicated_data_gives_same_centroids() {
        let pts = Points::from_rows(&[[0.0, 0.0], [0.2, 0.1], [5.0, 5.0], [5.1, 4.8], [4.9, 5.3]]).unwrap();
        let doubled: Vec<Vec<f64>> = (0..10).map(|i| pts.row(i / 2).to_vec()).collect();
        let a = kmeans(&pts, 2, 1).unwrap();
        let b = kmeans(&Points::from_rows(&doubled).unwrap(), 2, 1).unwrap();
        let mut ca: Vec<Vec<f64>> = (0..2).map(|c| a.centroid(c).to_vec()).collect();
        let mut cb: Vec<Vec<f64>> = (0..2).map(|c| b.centroid(c).to_vec()).collect();
        ca.sort_by(|x, y| x[0].total_cmp(&y[0]));
        cb.sort_by(|x, y| x[0].total_cmp(&y[0]));
        for (x, y) in ca.iter().flatten().zip(cb.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            kmeans(&random_points(3, 2, 0), 4, 0),
            Err(ClusterError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn identical_points_leave_no_empty_cluster() {
        let pts = Points::from_rows(&vec![[1.0, 2.0]; 6]).unwrap();
        let s = kmeans(&pts, 3, 4).unwrap();
        assert!(s.sizes().iter().all(|&c| c > 0));
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap(), 1.0);
        assert!((nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-15);
        // Contingency [[1,1],[1,1]]: every cell p=1/4 equals the product of margins.
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3, 3], &[5, 5, 5]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 1]).unwrap(), 0.0);
        assert!(nmi(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pts = random_points(10, 2, 9);
        let s = kmeans(&pts, 3, 0).unwrap();
        let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        s.write_dump(&ids, dir.path()).unwrap();
        let back = read_assignments(&dir.path().join(ASSIGNMENTS_FILE)).unwrap();
        assert_eq!(back.iter().map(|(_, c)| *c).collect::<Vec<_>>(), s.assignments);
        let cent = EmbeddingStore::read(&dir.path().join(CENTROIDS_FILE)).unwrap();
        assert_eq!((cent.len(), cent.dim()), (3, 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn lloyd_invariants(seed in any::<u64>(), n in 5usize..60, k in 1usize..6, dim in 1usize..5) {
            let pts = random_points(n, dim, seed);
            let k = k.min(n);
            let s = kmeans_with(&pts, k, seed, KmeansOptions { max_iter: 100, n_init: 1 }).unwrap();
            for w in s.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
            prop_assert!(s.sizes().iter().all(|&c| c > 0));
            let recomputed = inertia(&pts, &s.centroids, &s.assignments);
            prop_assert!((recomputed - s.inertia).abs() <= 1e-6 * recomputed.max(1e-12));
            prop_assert_eq!(kmeans(&pts, k, seed).unwrap(), kmeans(&pts, k, seed).unwrap());
        }

        #[test]
        fn nmi_symmetric_and_relabel_invariant(
            a in proptest::collection::vec(0usize..4, 1..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<usize> = a.iter().map(|&x| if rng.random_bool(0.3) { rng.random_range(0..4) } else { x }).collect();
            let v = nmi(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - nmi(&b, &a).unwrap()).abs() < 1e-12);
            let relabeled: Vec<usize> = a.iter().map(|x| 7 - x).collect();
            prop_assert!((v - nmi(&relabeled, &b).unwrap()).abs() < 1e-12);
        }
    }
}
