//! UMAP projection of berry feature vectors and the line-fit ripeness axis.
//!
//! The implementation is sequential and seeded: exact Euclidean kNN, smooth-kNN
//! calibration by bisection, fuzzy-union symmetrization, PCA initialization and
//! negative-sampling SGD. Two runs with the same inputs and seed produce
//! bitwise-identical coordinates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureRecord;
use crate::stats::{principal_axis_2d, spearman};

const SMOOTH_KNN_ITERATIONS: usize = 64;
const GRADIENT_CLIP: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UmapParams {
    /// `None` selects `min(15, N - 1)`.
    pub n_neighbors: Option<usize>,
    pub min_dist: f64,
    pub spread: f64,
    pub n_epochs: usize,
    pub negative_sample_rate: usize,
    pub learning_rate: f64,
    pub init: Init,
}

impl Default for UmapParams {
    fn default() -> Self {
        Self {
            n_neighbors: None,
            min_dist: 0.1,
            spread: 1.0,
            n_epochs: 500,
            negative_sample_rate: 5,
            learning_rate: 1.0,
            init: Init::Pca,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnGraph {
    /// Per point, neighbor indices by ascending distance (self excluded).
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub points: Vec<[f64; 2]>,
    pub knn_graph: KnnGraph,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub n_epochs: usize,
    pub seed: u64,
    pub init: Init,
    /// `(a, b)` of the low-dimensional similarity `1 / (1 + a d^(2b))`.
    pub curve: (f64, f64),
    pub rhos: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl EmbeddingModel {
    /// `|sum_j exp(-max(0, d_ij - rho_i) / sigma_i) - log2(k)|` per point.
    pub fn calibration_residuals(&self) -> Vec<f64> {
        let target = (self.n_neighbors as f64).log2();
        (0..self.points.len())
            .map(|i| {
                (membership_sum(&self.knn_graph.distances[i], self.rhos[i], self.sigmas[i]) - target).abs()
            })
            .collect()
    }
}

/// Exact Euclidean k nearest neighbors; ties broken by lower index.
pub fn exact_knn(data: &[Vec<f64>], k: usize) -> KnnGraph {
    let n = data.len();
    let mut indices = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d2: f64 = data[i].iter().zip(&data[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2.sqrt(), j)
            })
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(k);
        indices.push(cand.iter().map(|c| c.1).collect());
        distances.push(cand.iter().map(|c| c.0).collect());
    }
    KnnGraph { indices, distances }
}

fn membership_sum(dists: &[f64], rho: f64, sigma: f64) -> f64 {
    dists.iter().map(|&d| (-(d - rho).max(0.0) / sigma).exp()).sum()
}

/// Per-point `(rho, sigma)`: rho is the nearest-neighbor distance and sigma is
/// bisected so the membership strengths sum to `log2(k)`.
pub fn smooth_knn(knn: &KnnGraph, k: usize) -> (Vec<f64>, Vec<f64>) {
    let target = (k as f64).log2();
    let mut rhos = Vec::with_capacity(knn.distances.len());
    let mut sigmas = Vec::with_capacity(knn.distances.len());
    for dists in &knn.distances {
        let rho = dists.first().copied().unwrap_or(0.0);
        let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..SMOOTH_KNN_ITERATIONS {
            let s = membership_sum(dists, rho, mid);
            if s > target {
                hi = mid;
                mid = 0.5 * (lo + hi);
            } else {
                lo = mid;
                mid = if hi.is_infinite() { mid * 2.0 } else { 0.5 * (lo + hi) };
            }
        }
        rhos.push(rho);
        sigmas.push(mid);
    }
    (rhos, sigmas)
}

/// Symmetric fuzzy graph `w = a + a^T - a * a^T`, keyed by `(row, col)` for both directions.
pub fn fuzzy_union(knn: &KnnGraph, rhos: &[f64], sigmas: &[f64]) -> BTreeMap<(usize, usize), f64> {
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, (idx, dists)) in knn.indices.iter().zip(&knn.distances).enumerate() {
        for (&j, &d) in idx.iter().zip(dists) {
            let w = (-(d - rhos[i]).max(0.0) / sigmas[i]).exp();
            directed.insert((i, j), w);
        }
    }
    let mut sym = BTreeMap::new();
    for (&(i, j), &w) in &directed {
        let wt = directed.get(&(j, i)).copied().unwrap_or(0.0);
        let v = w + wt - w * wt;
        sym.insert((i, j), v);
        sym.insert((j, i), v);
    }
    sym
}

/// Least-squares fit of `1 / (1 + a x^(2b))` to the target curve that is 1
/// below `min_dist` and `exp(-(x - min_dist) / spread)` above it, sampled on
/// 300 points over `[0, 3 * spread]`. Levenberg-Marquardt.
pub fn fit_curve(min_dist: f64, spread: f64) -> Result<(f64, f64)> {
    if !(spread > 0.0) || !(min_dist >= 0.0) || min_dist > spread {
        return Err(Error::Parameter(format!(
            "min_dist {min_dist} and spread {spread} must satisfy 0 <= min_dist <= spread"
        )));
    }
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut lambda = 1e-3;
    let mut cost = sse(a, b);
    for _ in 0..500 {
        // Normal equations J^T J and J^T r.
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            let u = if x > 0.0 { x.powf(2.0 * b) } else { 0.0 };
            let f = 1.0 / (1.0 + a * u);
            let r = f - y;
            let da = -u * f * f;
            let db = if x > 0.0 { -a * u * 2.0 * x.ln() * f * f } else { 0.0 };
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let mut improved = false;
        for _ in 0..30 {
            let (m00, m11) = (jaa * (1.0 + lambda), jbb * (1.0 + lambda));
            let det = m00 * m11 - jab * jab;
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let step_a = -(m11 * ga - jab * gb) / det;
            let step_b = -(m00 * gb - jab * ga) / det;
            let (na, nb) = (a + step_a, b + step_b);
            if na > 0.0 && nb > 0.0 {
                let c = sse(na, nb);
                if c <= cost {
                    let done = (cost - c) <= 1e-15 * cost.max(1e-300)
                        && step_a.abs() < 1e-12 * a
                        && step_b.abs() < 1e-12 * b;
                    a = na;
                    b = nb;
                    cost = c;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = !done;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok((a, b))
}

/// Top-two principal component scores, jointly scaled so the largest
/// magnitude coordinate is 10.
pub fn pca_init(data: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = data.len();
    let d = data.first().map(Vec::len).unwrap_or(0);
    let mut mean = vec![0.0; d];
    for row in data {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let mut scores = vec![[0.0f64; 2]; n];
    if d <= n {
        let cov = x.transpose() * &x;
        let eig = SymmetricEigen::new(cov);
        let order = descending(eig.eigenvalues.as_slice());
        let lmax = eig.eigenvalues[order[0]].max(0.0);
        for (comp, &e) in order.iter().take(2).enumerate() {
            if eig.eigenvalues[e] <= 1e-12 * lmax || lmax <= 0.0 {
                continue;
            }
            let v = eig.eigenvectors.column(e);
            let s = &x * v;
            for i in 0..n {
                scores[i][comp] = s[i];
            }
        }
    } else {
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = descending(eig.eigenvalues.as_slice());
        let lmax = eig.eigenvalues[order[0]].max(0.0);
        for (comp, &e) in order.iter().take(2).enumerate() {
            let l = eig.eigenvalues[e];
            if l <= 1e-12 * lmax || lmax <= 0.0 {
                continue;
            }
            let u = eig.eigenvectors.column(e);
            for i in 0..n {
                scores[i][comp] = u[i] * l.sqrt();
            }
        }
    }
    for comp in 0..2 {
        let (mut best, mut best_abs) = (0.0, -1.0);
        for s in &scores {
            if s[comp].abs() > best_abs {
                best_abs = s[comp].abs();
                best = s[comp];
            }
        }
        if best < 0.0 {
            for s in &mut scores {
                s[comp] = -s[comp];
            }
        }
    }
    let max_abs = scores.iter().flat_map(|s| s.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        let k = 10.0 / max_abs;
        for s in &mut scores {
            s[0] *= k;
            s[1] *= k;
        }
    }
    scores
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

#[inline]
fn clip(v: f64) -> f64 {
    v.clamp(-GRADIENT_CLIP, GRADIENT_CLIP)
}

fn optimize_layout(
    embedding: &mut [[f64; 2]],
    graph: &BTreeMap<(usize, usize), f64>,
    params: &UmapParams,
    (a, b): (f64, f64),
    seed: u64,
) {
    let n = embedding.len();
    let max_w = graph.values().copied().fold(0.0, f64::max);
    if max_w <= 0.0 || params.n_epochs == 0 {
        return;
    }
    let floor = max_w / params.n_epochs as f64;
    let edges: Vec<(usize, usize, f64)> = graph
        .iter()
        .filter(|(_, &w)| w >= floor && w > 0.0)
        .map(|(&(i, j), &w)| (i, j, max_w / w))
        .collect();
    let neg_rate = params.negative_sample_rate.max(1) as f64;
    let mut next_sample: Vec<f64> = edges.iter().map(|e| e.2).collect();
    let eps_neg: Vec<f64> = edges.iter().map(|e| e.2 / neg_rate).collect();
    let mut next_negative = eps_neg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for epoch in 0..params.n_epochs {
        let alpha = params.learning_rate * (1.0 - epoch as f64 / params.n_epochs as f64);
        let epoch_f = epoch as f64;
        for (e, &(j, k, eps)) in edges.iter().enumerate() {
            if next_sample[e] > epoch_f {
                continue;
            }
            let cur = embedding[j];
            let oth = embedding[k];
            let diff = [cur[0] - oth[0], cur[1] - oth[1]];
            let d2 = diff[0] * diff[0] + diff[1] * diff[1];
            if d2 > 0.0 {
                let coeff = -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0);
                for dim in 0..2 {
                    let g = clip(coeff * diff[dim]) * alpha;
                    embedding[j][dim] += g;
                    embedding[k][dim] -= g;
                }
            }
            next_sample[e] += eps;

            let n_neg = ((epoch_f - next_negative[e]) / eps_neg[e]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let other = rng.random_range(0..n);
                if other == j {
                    continue;
                }
                let cur = embedding[j];
                let oth = embedding[other];
                let diff = [cur[0] - oth[0], cur[1] - oth[1]];
                let d2 = diff[0] * diff[0] + diff[1] * diff[1];
                // Coincident points exert no repulsion.
                if d2 <= 0.0 {
                    continue;
                }
                let coeff = 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0));
                for dim in 0..2 {
                    embedding[j][dim] += clip(coeff * diff[dim]) * alpha;
                }
            }
            next_negative[e] += n_neg as f64 * eps_neg[e];
        }
    }
}

/// Projects `features` (N rows of dimension D) to 2-D.
pub fn umap_embed(features: &[Vec<f64>], params: &UmapParams, seed: u64) -> Result<EmbeddingModel> {
    let n = features.len();
    let d = features.first().map(Vec::len).unwrap_or(0);
    if n < 2 || d == 0 {
        return Err(Error::Parameter(format!(
            "UMAP needs at least 2 points of dimension >= 1, got {n} x {d}"
        )));
    }
    if let Some(i) = features.iter().position(|r| r.len() != d) {
        return Err(Error::Validation(format!("feature row {i} has dimension {}, expected {d}", features[i].len())));
    }
    if let Some(i) = features.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Validation(format!("feature row {i} contains NaN or infinite values")));
    }
    let k = params.n_neighbors.unwrap_or_else(|| 15.min(n - 1));
    if k == 0 || n <= k {
        return Err(Error::Parameter(format!(
            "N = {n} must exceed n_neighbors = {k} (and n_neighbors >= 1)"
        )));
    }
    let curve = fit_curve(params.min_dist, params.spread)?;
    let knn = exact_knn(features, k);
    let (rhos, sigmas) = smooth_knn(&knn, k);
    let graph = fuzzy_union(&knn, &rhos, &sigmas);
    let mut points = match params.init {
        Init::Pca => pca_init(features),
    };
    optimize_layout(&mut points, &graph, params, curve, seed);
    merge_duplicates(features, &mut points);
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Fit("UMAP layout diverged to non-finite coordinates".into()));
    }
    Ok(EmbeddingModel {
        points,
        knn_graph: knn,
        n_neighbors: k,
        min_dist: params.min_dist,
        n_epochs: params.n_epochs,
        seed,
        init: params.init,
        curve,
        rhos,
        sigmas,
    })
}

/// Identical input rows get one shared position (their mean); the stochastic
/// layout otherwise leaves them a small random distance apart.
fn merge_duplicates(features: &[Vec<f64>], points: &mut [[f64; 2]]) {
    let mut groups: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for (i, row) in features.iter().enumerate() {
        groups.entry(row.iter().map(|v| (v + 0.0).to_bits()).collect()).or_default().push(i);
    }
    for members in groups.values().filter(|m| m.len() > 1) {
        let n = members.len() as f64;
        let mean = [0, 1].map(|c| members.iter().map(|&i| points[i][c]).sum::<f64>() / n);
        for &i in members {
            points[i] = mean;
        }
    }
}

/// Feature records embedded in `(berry_id, timepoint)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordEmbedding {
    pub keys: Vec<(u32, u32)>,
    pub model: EmbeddingModel,
}

pub fn embed_records(records: &[FeatureRecord], params: &UmapParams, seed: u64) -> Result<RecordEmbedding> {
    let mut sorted: Vec<&FeatureRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.berry_id, r.timepoint_index));
    let keys = sorted.iter().map(|r| (r.berry_id, r.timepoint_index)).collect();
    let data: Vec<Vec<f64>> = sorted.iter().map(|r| r.vector.clone()).collect();
    Ok(RecordEmbedding {
        keys,
        model: umap_embed(&data, params, seed)?,
    })
}

// ---------------------------------------------------------------------------
// Ripeness axis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RipenessAxis {
    pub direction: [f64; 2],
    pub origin: [f64; 2],
    /// Projection value mapped to ripeness 0.
    pub lo: f64,
    /// Projection value mapped to ripeness 1.
    pub hi: f64,
}

impl RipenessAxis {
    pub fn project(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.origin[0]) * self.direction[0] + (p[1] - self.origin[1]) * self.direction[1]
    }
}

/// Total-least-squares line through the embedding, oriented so projections
/// increase with time, normalized by the population minimum and maximum.
/// Projections are measured from the coordinate origin.
pub fn fit_ripeness_axis(points: &[[f64; 2]], timepoints: &[f64]) -> Result<RipenessAxis> {
    if points.len() != timepoints.len() {
        return Err(Error::Validation(format!(
            "{} points but {} timepoints",
            points.len(),
            timepoints.len()
        )));
    }
    let mut distinct: Vec<f64> = timepoints.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Validation("ripeness axis needs at least 2 distinct timepoints".into()));
    }
    let (_, mut dir, lambdas) = principal_axis_2d(points);
    let scale = points.iter().flat_map(|p| p.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    if !(lambdas[0] > 1e-24 * scale.max(1.0).powi(2)) {
        return Err(Error::Fit("embedding has zero variance".into()));
    }
    let proj = |d: [f64; 2]| -> Vec<f64> { points.iter().map(|p| p[0] * d[0] + p[1] * d[1]).collect() };
    let mut values = proj(dir);
    if spearman(&values, timepoints).unwrap_or(0.0) < 0.0 {
        dir = [-dir[0], -dir[1]];
        values = proj(dir);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Fit("embedding has zero extent along the fitted axis".into()));
    }
    Ok(RipenessAxis {
        direction: dir,
        origin: [0.0, 0.0],
        lo,
        hi,
    })
}

pub fn ripeness_value(axis: &RipenessAxis, point: [f64; 2]) -> f64 {
    ((axis.project(point) - axis.lo) / (axis.hi - axis.lo)).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Extractor comparison

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorEmbedding {
    pub name: String,
    /// `(berry_id, timepoint)` per point.
    pub keys: Vec<(u32, u32)>,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorScore {
    pub name: String,
    /// Share of 2-D variance on the first principal axis.
    pub linearity: f64,
    /// Mean per-berry Spearman correlation of axis projection with time.
    pub monotonicity: f64,
    pub rank: usize,
}

/// Linearity of the embedding and per-berry time-monotonicity.
pub fn score_embedding(keys: &[(u32, u32)], points: &[[f64; 2]]) -> Result<(f64, f64)> {
    let (_, _, l) = principal_axis_2d(points);
    let linearity = if l[0] + l[1] > 0.0 { l[0] / (l[0] + l[1]) } else { 0.0 };
    let times: Vec<f64> = keys.iter().map(|k| k.1 as f64).collect();
    let axis = fit_ripeness_axis(points, &times)?;
    let mut per_berry: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (k, p) in keys.iter().zip(points) {
        let e = per_berry.entry(k.0).or_default();
        e.0.push(axis.project(*p));
        e.1.push(k.1 as f64);
    }
    let rhos: Vec<f64> = per_berry
        .values()
        .filter(|(v, _)| v.len() >= 2)
        .map(|(v, t)| spearman(v, t).unwrap_or(0.0))
        .collect();
    let monotonicity = if rhos.is_empty() { 0.0 } else { rhos.iter().sum::<f64>() / rhos.len() as f64 };
    Ok((linearity, monotonicity))
}

/// Scores every extractor's embedding and ranks them, best first
/// (monotonicity, then linearity, then name).
pub fn select_extractor_report(embeddings: &[ExtractorEmbedding]) -> Result<Vec<ExtractorScore>> {
    if embeddings.len() < 2 {
        return Err(Error::Validation("extractor comparison needs at least 2 embeddings".into()));
    }
    let key_set = |e: &ExtractorEmbedding| {
        let mut k = e.keys.clone();
        k.sort_unstable();
        k
    };
    let reference = key_set(&embeddings[0]);
    for e in embeddings {
        if e.keys.len() != e.points.len() {
            return Err(Error::Validation(format!("{}: keys and points differ in length", e.name)));
        }
        if key_set(e) != reference {
            return Err(Error::Validation(format!(
                "{} does not cover the same berry/timepoint set as {}",
                e.name, embeddings[0].name
            )));
        }
    }
    let mut scores: Vec<ExtractorScore> = embeddings
        .iter()
        .map(|e| {
            let (linearity, monotonicity) = score_embedding(&e.keys, &e.points)?;
            Ok(ExtractorScore { name: e.name.clone(), linearity, monotonicity, rank: 0 })
        })
        .collect::<Result<_>>()?;
    scores.sort_by(|a, b| {
        b.monotonicity
            .total_cmp(&a.monotonicity)
            .then(b.linearity.total_cmp(&a.linearity))
            .then(a.name.cmp(&b.name))
    });
    for (i, s) in scores.iter_mut().enumerate() {
        s.rank = i + 1;
    }
    Ok(scores)
}
