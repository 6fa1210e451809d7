//! Albedo color classes, berry labels, class histograms and ripeness ratios.
//!
//! Five RGB clusters are found by k-means (k-means++ seeding, Lloyd
//! iterations) and mapped to ripeness classes 1 (greenest) through 5
//! (reddest). A berry takes the class held by the majority of its pixels.
//! Histograms count berries, not pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;
/// Classes counted as red for the ripeness ratio.
pub const RED_CLASSES: [u8; 2] = [4, 5];
pub const DEFAULT_SAMPLE_CAP: usize = 500_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingSource {
    Auto,
    HumanOverride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorClassModel {
    pub centroids: [[f64; 3]; NUM_CLASSES],
    /// `class_of_cluster[i]` is the ripeness class (1..=5) of centroid `i`.
    pub class_of_cluster: [u8; NUM_CLASSES],
    pub source: MappingSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub max_iterations: usize,
    /// Stop once no centroid moves farther than this.
    pub tolerance: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iterations: 300,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<[f64; 3]>,
    /// Assignment of each input pixel, in the caller's order.
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub objective: f64,
    pub iterations: usize,
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest(p: &[f64; 3], centroids: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn cmp_rgb(a: &[f64; 3], b: &[f64; 3]) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

fn count_distinct(sorted: &[[f64; 3]]) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    1 + sorted.windows(2).filter(|w| cmp_rgb(&w[0], &w[1]).is_ne()).count()
}

/// Seeded k-means on RGB triples.
///
/// Pixels are sorted before seeding, so the result does not depend on input order.
pub fn kmeans(pixels: &[[f64; 3]], k: usize, seed: u64, params: &KMeansParams) -> Result<KMeansResult> {
    if pixels.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Validation("pixel values must be finite".into()));
    }
    let mut order: Vec<usize> = (0..pixels.len()).collect();
    order.sort_by(|&a, &b| cmp_rgb(&pixels[a], &pixels[b]));
    let pts: Vec<[f64; 3]> = order.iter().map(|&i| pixels[i]).collect();
    let distinct = count_distinct(&pts);
    if k == 0 || distinct < k {
        return Err(Error::Validation(format!(
            "k-means needs >= {k} distinct values (< {k} distinct values present: {distinct})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(&pts, k, &mut rng);
    let mut assign = vec![0usize; pts.len()];
    let mut prev_objective = f64::INFINITY;
    let mut iterations = 0;
    loop {
        let mut objective = 0.0;
        for (a, p) in assign.iter_mut().zip(&pts) {
            let (i, d) = nearest(p, &centroids);
            *a = i;
            objective += d;
        }
        debug_assert!(
            objective <= prev_objective * (1.0 + 1e-12) + 1e-9,
            "k-means objective increased: {prev_objective} -> {objective}"
        );
        prev_objective = objective;
        if iterations >= params.max_iterations {
            break;
        }
        iterations += 1;

        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assign.iter().zip(&pts) {
            counts[*a] += 1;
            for c in 0..3 {
                sums[*a][c] += p[c];
            }
        }
        let mut next: Vec<[f64; 3]> = (0..k)
            .map(|i| {
                if counts[i] > 0 {
                    sums[i].map(|s| s / counts[i] as f64)
                } else {
                    centroids[i]
                }
            })
            .collect();
        let mut taken: Vec<usize> = Vec::new();
        for i in (0..k).filter(|&i| counts[i] == 0) {
            // Re-seed at the point farthest from its assigned centroid.
            let far = (0..pts.len())
                .filter(|j| !taken.contains(j))
                .max_by(|&a, &b| {
                    dist2(&pts[a], &centroids[assign[a]])
                        .total_cmp(&dist2(&pts[b], &centroids[assign[b]]))
                        .then(b.cmp(&a))
                })
                .expect("at least k points");
            taken.push(far);
            next[i] = pts[far];
        }
        let movement = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if movement < params.tolerance {
            // Final assignment against the converged centroids.
            let mut objective = 0.0;
            for (a, p) in assign.iter_mut().zip(&pts) {
                let (i, d) = nearest(p, &centroids);
                *a = i;
                objective += d;
            }
            prev_objective = objective;
            break;
        }
    }

    let mut assignments = vec![0usize; pixels.len()];
    for (sorted_idx, &orig) in order.iter().enumerate() {
        assignments[orig] = assign[sorted_idx];
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        objective: prev_objective,
        iterations,
    })
}

fn kmeans_plus_plus(pts: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut centroids = vec![pts[rng.random_range(0..pts.len())]];
    let mut d: Vec<f64> = pts.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            if acc >= target {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave `target` just above the final sum.
        let pick = pick.unwrap_or_else(|| d.iter().rposition(|&w| w > 0.0).expect("distinct points remain"));
        let c = pts[pick];
        for (di, p) in d.iter_mut().zip(pts) {
            *di = di.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Redness score used for the automatic class mapping.
pub fn redness(rgb: &[f64; 3]) -> f64 {
    rgb[0] - rgb[1]
}

impl ColorClassModel {
    /// Orders clusters by ascending `R - G` so class 1 is the greenest.
    pub fn auto(centroids: [[f64; 3]; NUM_CLASSES]) -> Self {
        let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
        order.sort_by(|&a, &b| redness(&centroids[a]).total_cmp(&redness(&centroids[b])).then(a.cmp(&b)));
        let mut class_of_cluster = [0u8; NUM_CLASSES];
        for (rank, &cluster) in order.iter().enumerate() {
            class_of_cluster[cluster] = rank as u8 + 1;
        }
        Self {
            centroids,
            class_of_cluster,
            source: MappingSource::Auto,
        }
    }

    /// Replaces the cluster-to-class mapping with a human-chosen permutation.
    pub fn with_override(mut self, class_of_cluster: [u8; NUM_CLASSES]) -> Result<Self> {
        let mut seen = [false; NUM_CLASSES];
        for &c in &class_of_cluster {
            if !(1..=NUM_CLASSES as u8).contains(&c) || seen[c as usize - 1] {
                return Err(Error::Validation(format!(
                    "class mapping {class_of_cluster:?} is not a permutation of 1..=5"
                )));
            }
            seen[c as usize - 1] = true;
        }
        self.class_of_cluster = class_of_cluster;
        self.source = MappingSource::HumanOverride;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.clone().with_override(self.class_of_cluster)?;
        for i in 0..NUM_CLASSES {
            for j in i + 1..NUM_CLASSES {
                if self.centroids[i] == self.centroids[j] {
                    return Err(Error::Validation(format!("centroids {i} and {j} coincide")));
                }
            }
        }
        Ok(())
    }

    /// Class of the nearest centroid.
    pub fn classify(&self, rgb: &[f64; 3]) -> u8 {
        self.class_of_cluster[nearest(rgb, &self.centroids).0]
    }

    /// Centroid assigned to a class.
    pub fn centroid_of_class(&self, class: u8) -> Option<[f64; 3]> {
        self.class_of_cluster
            .iter()
            .position(|&c| c == class)
            .map(|i| self.centroids[i])
    }
}

/// k-means with k = 5 and the automatic redness mapping.
///
/// Callers should pass pixels sampled across the whole season (see [`sample_pixels`]).
pub fn fit_color_classes(pixels: &[[f64; 3]], seed: u64) -> Result<ColorClassModel> {
    let km = kmeans(pixels, NUM_CLASSES, seed, &KMeansParams::default())?;
    let centroids: [[f64; 3]; NUM_CLASSES] = km.centroids.try_into().expect("k = 5");
    let model = ColorClassModel::auto(centroids);
    model.validate()?;
    Ok(model)
}

/// Uniform seeded sample of at most `cap` pixels, kept in input order.
pub fn sample_pixels(pixels: &[[f64; 3]], cap: usize, seed: u64) -> Vec<[f64; 3]> {
    if pixels.len() <= cap {
        return pixels.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, pixels.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pixels[i]).collect()
}

/// Majority vote over per-pixel classes; ties go to the riper class.
pub fn label_berry(pixels: &[[f64; 3]], model: &ColorClassModel) -> Result<u8> {
    if pixels.is_empty() {
        return Err(Error::Validation("cannot label a berry with no pixels".into()));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for p in pixels {
        counts[model.classify(p) as usize - 1] += 1;
    }
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if counts[c] >= counts[best] {
            best = c;
        }
    }
    Ok(best as u8 + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub session_id: String,
    pub bog_id: String,
    pub capture_date: String,
    pub counts: [u64; NUM_CLASSES],
    /// Absent when there were no detections.
    pub fractions: Option<[f64; NUM_CLASSES]>,
}

impl ClassHistogram {
    pub fn from_counts(
        session_id: impl Into<String>,
        bog_id: impl Into<String>,
        capture_date: impl Into<String>,
        counts: [u64; NUM_CLASSES],
    ) -> Self {
        let total: u64 = counts.iter().sum();
        let fractions = (total > 0).then(|| counts.map(|c| c as f64 / total as f64));
        Self {
            session_id: session_id.into(),
            bog_id: bog_id.into(),
            capture_date: capture_date.into(),
            counts,
            fractions,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn no_detections(&self) -> bool {
        self.total() == 0
    }

    /// Fraction of berries in classes 4 and 5.
    pub fn red_fraction(&self) -> Option<f64> {
        self.fractions
            .map(|f| RED_CLASSES.iter().map(|&c| f[c as usize - 1]).sum())
    }
}

pub fn class_histogram(
    session_id: &str,
    bog_id: &str,
    capture_date: &str,
    labels: &[u8],
) -> Result<ClassHistogram> {
    let mut counts = [0u64; NUM_CLASSES];
    for &l in labels {
        if !(1..=NUM_CLASSES as u8).contains(&l) {
            return Err(Error::Validation(format!("class label {l} outside 1..=5")));
        }
        counts[l as usize - 1] += 1;
    }
    Ok(ClassHistogram::from_counts(session_id, bog_id, capture_date, counts))
}

/// One bog's ripeness ratios, one value per capture date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub bog_id: String,
    pub dates: Vec<String>,
    pub values: Vec<f64>,
}

/// Red fraction at each date divided by the red fraction at the final date.
/// Values above 1 are kept as they are.
pub fn ripeness_ratio(histograms: &[ClassHistogram]) -> Result<RatioRow> {
    if histograms.len() < 2 {
        return Err(Error::Validation(format!(
            "ripeness ratio needs at least 2 dates, got {}",
            histograms.len()
        )));
    }
    let bog = &histograms[0].bog_id;
    if let Some(h) = histograms.iter().find(|h| &h.bog_id != bog) {
        return Err(Error::Validation(format!(
            "histograms mix bogs {bog:?} and {:?}",
            h.bog_id
        )));
    }
    if histograms.windows(2).any(|w| w[1].capture_date <= w[0].capture_date) {
        return Err(Error::Validation("histograms must be in strictly increasing date order".into()));
    }
    let red: Vec<f64> = histograms
        .iter()
        .map(|h| {
            h.red_fraction().ok_or_else(|| {
                Error::Validation(format!("session {:?} has no detections", h.session_id))
            })
        })
        .collect::<Result<_>>()?;
    let last = red.len() - 1;
    let final_red = red[last];
    if !(final_red > 0.0) {
        return Err(Error::Validation(format!(
            "undefined ratio: red fraction on the final date ({}) is 0",
            histograms[last].capture_date
        )));
    }
    let mut values: Vec<f64> = red.iter().map(|r| r / final_red).collect();
    values[last] = 1.0;
    Ok(RatioRow {
        bog_id: bog.clone(),
        dates: histograms.iter().map(|h| h.capture_date.clone()).collect(),
        values,
    })
}

/// Earliest date whose ratio reaches `threshold`.
pub fn risk_flag(row: &RatioRow, threshold: f64) -> Option<&str> {
    row.values
        .iter()
        .position(|&v| v >= threshold)
        .map(|i| row.dates[i].as_str())
}

/// Bog rows by date columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RipenessRatioTable {
    pub dates: Vec<String>,
    pub rows: Vec<RatioRow>,
}

impl RipenessRatioTable {
    pub fn from_rows(rows: Vec<RatioRow>) -> Self {
        let mut dates: Vec<String> = rows.iter().flat_map(|r| r.dates.iter().cloned()).collect();
        dates.sort();
        dates.dedup();
        Self { dates, rows }
    }

    pub fn value(&self, bog: &str, date: &str) -> Option<f64> {
        let row = self.rows.iter().find(|r| r.bog_id == bog)?;
        row.dates.iter().position(|d| d == date).map(|i| row.values[i])
    }

    /// CSV with a `bog` column and one column per date; missing cells are empty.
    /// Values use the shortest exact decimal form.
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = comment {
            for line in c.lines() {
                out.push_str(&format!("# {line}\n"));
            }
        }
        out.push_str("bog");
        for d in &self.dates {
            out.push(',');
            out.push_str(d);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.bog_id);
            for d in &self.dates {
                out.push(',');
                if let Some(i) = row.dates.iter().position(|x| x == d) {
                    out.push_str(&format!("{}", row.values[i]));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
            .clone();
        if header.get(0) != Some("bog") {
            return Err(Error::Parse { line: 1, message: "first column must be `bog`".into() });
        }
        let dates: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let mut row = RatioRow { bog_id: rec[0].to_string(), dates: Vec::new(), values: Vec::new() };
            for (d, cell) in dates.iter().zip(rec.iter().skip(1)) {
                if cell.is_empty() {
                    continue;
                }
                let v: f64 = cell.parse().map_err(|e| Error::Parse {
                    line,
                    message: format!("{cell:?}: {e}"),
                })?;
                row.dates.push(d.clone());
                row.values.push(v);
            }
            rows.push(row);
        }
        Ok(Self { dates, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    const BLOBS: [[f64; 3]; 5] = [
        [60.0, 160.0, 50.0],
        [110.0, 150.0, 60.0],
        [160.0, 110.0, 60.0],
        [120.0, 20.0, 40.0],
        [180.0, 50.0, 50.0],
    ];

    fn blob_pixels(n_per: usize, sigma: f64, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).unwrap();
        BLOBS
            .iter()
            .flat_map(|c| {
                (0..n_per)
                    .map(|_| [0, 1, 2].map(|k| c[k] + normal.sample(&mut rng)))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Exhaustive minimum of the k-means objective over every partition of the
    /// points into at most `k` groups (restricted growth strings).
    fn brute_force_objective(points: &[[f64; 3]], k: usize) -> f64 {
        fn cost(points: &[[f64; 3]], labels: &[usize], k: usize) -> f64 {
            let mut sums = vec![[0.0; 3]; k];
            let mut n = vec![0usize; k];
            for (p, &l) in points.iter().zip(labels) {
                n[l] += 1;
                for c in 0..3 {
                    sums[l][c] += p[c];
                }
            }
            points
                .iter()
                .zip(labels)
                .map(|(p, &l)| {
                    let m = sums[l].map(|s| s / n[l] as f64);
                    dist2(p, &m)
                })
                .sum()
        }
        fn rec(points: &[[f64; 3]], k: usize, labels: &mut Vec<usize>, used: usize, best: &mut f64) {
            if labels.len() == points.len() {
                *best = best.min(cost(points, labels, k));
                return;
            }
            for l in 0..(used + 1).min(k) {
                labels.push(l);
                rec(points, k, labels, used.max(l + 1), best);
                labels.pop();
            }
        }
        let mut best = f64::INFINITY;
        rec(points, k, &mut Vec::new(), 0, &mut best);
        best
    }

    #[test]
    fn recovers_separated_blobs() {
        let px = blob_pixels(400, 2.0, 1);
        let model = fit_color_classes(&px, 7).unwrap();
        for (k, b) in BLOBS.iter().enumerate() {
            let c = model.centroid_of_class(k as u8 + 1).unwrap();
            for ch in 0..3 {
                assert!((c[ch] - b[ch]).abs() < 3.0, "class {} centroid {c:?} vs {b:?}", k + 1);
            }
        }
        assert_eq!(model.source, MappingSource::Auto);
    }

    #[test]
    fn identical_pixels_rejected() {
        let err = fit_color_classes(&[[1.0, 2.0, 3.0]; 50], 0).unwrap_err().to_string();
        assert!(err.contains("< 5 distinct values"), "{err}");
    }

    #[test]
    fn twelve_pixels_five_values_match_brute_force() {
        let vals = [[10.0, 200.0, 30.0], [90.0, 120.0, 40.0], [200.0, 20.0, 30.0], [150.0, 70.0, 60.0], [40.0, 40.0, 40.0]];
        let px: Vec<[f64; 3]> = (0..12).map(|i| vals[(i * 7) % 5]).collect();
        let km = kmeans(&px, 5, 3, &KMeansParams::default()).unwrap();
        let oracle = brute_force_objective(&px, 5);
        assert!((km.objective - oracle).abs() < 1e-9, "{} vs {oracle}", km.objective);
    }

    #[test]
    fn twelve_distinct_pixels_match_brute_force() {
        let centers = [[20.0, 200.0, 20.0], [100.0, 140.0, 40.0], [200.0, 30.0, 30.0], [120.0, 60.0, 160.0], [30.0, 30.0, 30.0]];
        let offsets = [[0.0, 0.0, 0.0], [3.0, -2.0, 1.0], [-2.0, 4.0, -3.0]];
        let px: Vec<[f64; 3]> = (0..12)
            .map(|i| {
                let c = centers[i % 5];
                let o = offsets[i / 5];
                [c[0] + o[0], c[1] + o[1], c[2] + o[2]]
            })
            .collect();
        let km = kmeans(&px, 5, 11, &KMeansParams::default()).unwrap();
        let oracle = brute_force_objective(&px, 5);
        assert!((km.objective - oracle).abs() < 1e-9, "{} vs {oracle}", km.objective);
    }

    #[test]
    fn input_order_does_not_matter() {
        let px = blob_pixels(60, 8.0, 4);
        let mut rev = px.clone();
        rev.reverse();
        let a = fit_color_classes(&px, 99).unwrap();
        let b = fit_color_classes(&rev, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn override_mapping() {
        let model = fit_color_classes(&blob_pixels(50, 2.0, 2), 1).unwrap();
        let o = model.clone().with_override([5, 4, 3, 2, 1]).unwrap();
        assert_eq!(o.source, MappingSource::HumanOverride);
        assert!(model.clone().with_override([1, 1, 2, 3, 4]).is_err());
        assert!(model.with_override([0, 1, 2, 3, 4]).is_err());
    }

    #[test]
    fn labels_by_majority() {
        let model = ColorClassModel::auto(BLOBS);
        let c2 = model.centroid_of_class(2).unwrap();
        assert_eq!(label_berry(&[c2; 10], &model).unwrap(), 2);
        let c4 = model.centroid_of_class(4).unwrap();
        let c1 = model.centroid_of_class(1).unwrap();
        let mut px = vec![c4; 6];
        px.extend(vec![c1; 4]);
        assert_eq!(label_berry(&px, &model).unwrap(), 4);
        // 50/50 tie resolves to the riper class.
        let tie = vec![c1, c4];
        assert_eq!(label_berry(&tie, &model).unwrap(), 4);
        assert!(label_berry(&[], &model).is_err());
    }

    #[test]
    fn histogram_basics() {
        let h = class_histogram("s", "A5", "2024-08-02", &[1, 1, 5]).unwrap();
        assert_eq!(h.counts, [2, 0, 0, 0, 1]);
        let f = h.fractions.unwrap();
        assert!((f[0] - 2.0 / 3.0).abs() < 1e-15 && (f[4] - 1.0 / 3.0).abs() < 1e-15);
        let empty = class_histogram("s", "A5", "2024-08-02", &[]).unwrap();
        assert!(empty.no_detections() && empty.fractions.is_none());
        assert!(class_histogram("s", "A5", "2024-08-02", &[6]).is_err());
    }

    fn hist(date: &str, red: u64, total: u64) -> ClassHistogram {
        ClassHistogram::from_counts(date, "B", date, [total - red, 0, 0, red / 2, red - red / 2])
    }

    #[test]
    fn ratio_constant_is_one() {
        let hs = vec![hist("2024-08-01", 30, 100), hist("2024-08-05", 30, 100), hist("2024-08-09", 30, 100)];
        let row = ripeness_ratio(&hs).unwrap();
        assert_eq!(row.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn ratio_errors() {
        assert!(ripeness_ratio(&[hist("2024-08-01", 3, 10)]).is_err());
        let err = ripeness_ratio(&[hist("2024-08-01", 3, 10), hist("2024-08-02", 0, 10)])
            .unwrap_err()
            .to_string();
        assert!(err.contains("undefined ratio"), "{err}");
    }

    #[test]
    fn risk_flag_none_for_zero_row() {
        let row = RatioRow { bog_id: "x".into(), dates: vec!["a".into(), "b".into()], values: vec![0.0, 0.0] };
        assert_eq!(risk_flag(&row, 0.6), None);
    }

    #[test]
    fn table_csv_round_trip() {
        let rows = vec![
            RatioRow { bog_id: "A5".into(), dates: vec!["2024-08-02".into(), "2024-09-14".into()], values: vec![0.007, 1.0] },
            RatioRow { bog_id: "A4".into(), dates: vec!["2024-08-31".into(), "2024-09-14".into()], values: vec![1.118, 1.0] },
        ];
        let t = RipenessRatioTable::from_rows(rows);
        let csv = t.to_csv(Some("seed=1"));
        assert!(csv.contains("A5,0.007,,1\n"), "{csv}");
        let back = RipenessRatioTable::from_csv(&csv).unwrap();
        assert_eq!(back.value("A4", "2024-08-31"), Some(1.118));
        assert_eq!(back.value("A5", "2024-09-14"), Some(1.0));
    }

    proptest! {
        #[test]
        fn label_invariant_under_duplication(px in proptest::collection::vec((0.0f64..255.0, 0.0f64..255.0, 0.0f64..255.0), 1..40)) {
            let model = ColorClassModel::auto(BLOBS);
            let px: Vec<[f64; 3]> = px.into_iter().map(|(r, g, b)| [r, g, b]).collect();
            let doubled: Vec<[f64; 3]> = px.iter().chain(px.iter()).copied().collect();
            prop_assert_eq!(label_berry(&px, &model).unwrap(), label_berry(&doubled, &model).unwrap());
        }

        #[test]
        fn final_ratio_is_exactly_one(reds in proptest::collection::vec(1u64..1000, 2..8)) {
            let hs: Vec<ClassHistogram> = reds
                .iter()
                .enumerate()
                .map(|(i, &r)| hist(&format!("2024-08-{:02}", i + 1), r, 1000))
                .collect();
            let row = ripeness_ratio(&hs).unwrap();
            prop_assert_eq!(row.values.last().copied(), Some(1.0));
            prop_assert!(row.values.iter().all(|v| *v >= 0.0));
        }
    }
}
