//! Frame-to-reference registration.
//!
//! Harris corners described by 11x11 zero-mean unit-norm patches are matched
//! by normalized correlation (ratio test plus symmetric cross-check), then a
//! homography is estimated with RANSAC over normalized-DLT minimal fits and
//! refined by least squares on the inlier set. Externally produced
//! correspondences can be passed straight to [`estimate_homography`].

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{GrayRaster, RgbRaster};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    /// Pixel position in the moving frame.
    pub src: [f64; 2],
    /// Pixel position in the reference frame.
    pub dst: [f64; 2],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub harris_k: f64,
    /// Corners must exceed this fraction of the strongest response.
    pub relative_threshold: f64,
    pub nms_radius: usize,
    /// Half-width of the square descriptor patch (5 gives 11x11).
    pub patch_radius: usize,
    /// Lowe ratio on descriptor distances, best / second best.
    pub ratio: f64,
    pub max_corners: usize,
    pub cross_check: bool,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            harris_k: 0.04,
            relative_threshold: 0.01,
            nms_radius: 5,
            patch_radius: 5,
            ratio: 0.8,
            max_corners: 800,
            cross_check: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Symmetric transfer error threshold in pixels.
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            inlier_threshold: 3.0,
            max_iterations: 2000,
            confidence: 0.99,
        }
    }
}

/// Projective map from moving-frame pixels to reference-frame pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    /// Row-major, `h[8] == 1`.
    pub h: [f64; 9],
    pub inlier_count: usize,
    pub reprojection_rms: f64,
}

impl Homography {
    pub fn identity() -> Self {
        Self::from_matrix(&Matrix3::identity()).expect("identity is a valid homography")
    }

    /// Normalizes so that the bottom-right entry is 1.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let scale = m[(2, 2)];
        let norm = m.norm();
        if !norm.is_finite() || scale.abs() <= 1e-12 * norm {
            return Err(Error::Estimation(
                "homography has a vanishing h33 entry and cannot be normalized".into(),
            ));
        }
        let n = m / scale;
        let mut h = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                h[r * 3 + c] = n[(r, c)];
            }
        }
        Ok(Self {
            h,
            inlier_count: 0,
            reprojection_rms: 0.0,
        })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.h)
    }

    /// Maps a point; `None` if it lands on the line at infinity.
    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        project(&self.matrix(), p)
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| Error::Estimation("homography is singular".into()))?;
        Self::from_matrix(&inv)
    }

    /// `other ∘ self`: first apply `self`, then `other`.
    pub fn then(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(&(other.matrix() * self.matrix()))
    }

    /// Largest displacement between the two maps over the corners of a `w x h` frame.
    pub fn corner_transfer_error(&self, other: &Homography, width: f64, height: f64) -> f64 {
        let corners = [[0.0, 0.0], [width, 0.0], [0.0, height], [width, height]];
        corners
            .iter()
            .map(|&c| match (self.apply(c), other.apply(c)) {
                (Some(a), Some(b)) => ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}

#[inline]
fn project(m: &Matrix3<f64>, p: [f64; 2]) -> Option<[f64; 2]> {
    let v = m * Vector3::new(p[0], p[1], 1.0);
    if v[2].abs() < 1e-12 {
        return None;
    }
    Some([v[0] / v[2], v[1] / v[2]])
}

// ---------------------------------------------------------------------------
// Detection and matching

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub x: usize,
    pub y: usize,
    pub response: f64,
}

/// Harris corners with relative thresholding and square non-maximum suppression.
/// Corners closer than `border` pixels to the edge are discarded.
pub fn harris_corners(image: &GrayRaster, params: &MatchParams, border: usize) -> Vec<Corner> {
    let (w, h) = (image.width(), image.height());
    if w < 3 || h < 3 {
        return Vec::new();
    }
    let mut ixx = vec![0.0f64; w * h];
    let mut iyy = vec![0.0f64; w * h];
    let mut ixy = vec![0.0f64; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dx: isize, dy: isize| {
                image.get((x as isize + dx) as usize, (y as isize + dy) as usize) as f64
            };
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let kernel = gaussian_kernel(1.0, 2);
    let sxx = separable_blur(&ixx, w, h, &kernel);
    let syy = separable_blur(&iyy, w, h, &kernel);
    let sxy = separable_blur(&ixy, w, h, &kernel);
    let response: Vec<f64> = (0..w * h)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - params.harris_k * tr * tr
        })
        .collect();
    let border = border.max(2);
    let max_r = (border..h.saturating_sub(border))
        .flat_map(|y| (border..w.saturating_sub(border)).map(move |x| (x, y)))
        .map(|(x, y)| response[y * w + x])
        .fold(0.0f64, f64::max);
    if max_r <= 0.0 {
        return Vec::new();
    }
    let threshold = params.relative_threshold * max_r;
    let r = params.nms_radius as isize;
    let mut corners = Vec::new();
    for y in border..h.saturating_sub(border) {
        for x in border..w.saturating_sub(border) {
            let i = y * w + x;
            let v = response[i];
            if v <= threshold {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize || (dx == 0 && dy == 0) {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    // Equal responses: the earlier pixel in raster order wins.
                    if response[j] > v || (response[j] == v && j < i) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                corners.push(Corner { x, y, response: v });
            }
        }
    }
    corners.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then((a.y, a.x).cmp(&(b.y, b.x)))
    });
    corners.truncate(params.max_corners);
    corners
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn separable_blur(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * src[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Zero-mean, unit-norm square patch; `None` for flat patches.
fn describe(image: &GrayRaster, c: &Corner, radius: usize) -> Option<Vec<f32>> {
    let side = 2 * radius + 1;
    let mut v = Vec::with_capacity(side * side);
    for y in c.y - radius..=c.y + radius {
        for x in c.x - radius..=c.x + radius {
            v.push(image.get(x, y) as f64);
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let norm = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>().sqrt();
    if norm < 1e-6 {
        return None;
    }
    Some(v.into_iter().map(|a| ((a - mean) / norm) as f32).collect())
}

struct Keypoints {
    positions: Vec<[f64; 2]>,
    descriptors: Vec<Vec<f32>>,
}

fn keypoints(image: &GrayRaster, params: &MatchParams) -> Keypoints {
    let corners = harris_corners(image, params, params.patch_radius + 1);
    let mut positions = Vec::new();
    let mut descriptors = Vec::new();
    for c in &corners {
        if let Some(d) = describe(image, c, params.patch_radius) {
            positions.push([c.x as f64, c.y as f64]);
            descriptors.push(d);
        }
    }
    Keypoints {
        positions,
        descriptors,
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Detects, describes and matches corners between a moving frame and the reference.
pub fn detect_and_match(
    moving: &GrayRaster,
    reference: &GrayRaster,
    params: &MatchParams,
) -> Result<Vec<Correspondence>> {
    for (name, img) in [("moving", moving), ("reference", reference)] {
        if img.width() < 64 || img.height() < 64 {
            return Err(Error::Parameter(format!(
                "{name} image is {}x{}, registration needs at least 64x64",
                img.width(),
                img.height()
            )));
        }
    }
    let km = keypoints(moving, params);
    let kr = keypoints(reference, params);
    let (n, m) = (km.descriptors.len(), kr.descriptors.len());
    if n == 0 || m == 0 {
        return Err(Error::InsufficientCorrespondences(0));
    }
    let mut corr = vec![0.0f32; n * m];
    for i in 0..n {
        for j in 0..m {
            corr[i * m + j] = dot(&km.descriptors[i], &kr.descriptors[j]);
        }
    }
    // Reference -> best moving index, for the cross-check.
    let best_for_ref: Vec<usize> = (0..m)
        .map(|j| {
            (0..n)
                .max_by(|&a, &b| corr[a * m + j].total_cmp(&corr[b * m + j]).then(b.cmp(&a)))
                .unwrap()
        })
        .collect();
    let distance = |c: f32| (2.0 - 2.0 * c as f64).max(0.0).sqrt();
    let mut out = Vec::new();
    for i in 0..n {
        let row = &corr[i * m..(i + 1) * m];
        let mut best = (usize::MAX, f32::NEG_INFINITY);
        let mut second = f32::NEG_INFINITY;
        for (j, &c) in row.iter().enumerate() {
            if c > best.1 {
                second = best.1;
                best = (j, c);
            } else if c > second {
                second = c;
            }
        }
        let d_best = distance(best.1);
        if m > 1 {
            let d_second = distance(second);
            if !(d_best < params.ratio * d_second) {
                continue;
            }
        }
        if params.cross_check && best_for_ref[best.0] != i {
            continue;
        }
        out.push(Correspondence {
            src: km.positions[i],
            dst: kr.positions[best.0],
            score: best.1 as f64,
        });
    }
    if out.len() < 4 {
        return Err(Error::InsufficientCorrespondences(out.len()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Estimation

/// Similarity transform moving the centroid to the origin and the mean
/// distance from it to sqrt(2).
fn hartley_normalization(points: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Normalized direct linear transform; least squares when more than four
/// correspondences are given.
pub fn dlt_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Homography> {
    if src.len() != dst.len() || src.len() < 4 {
        return Err(Error::Estimation(format!(
            "DLT needs at least 4 paired points, got {}",
            src.len().min(dst.len())
        )));
    }
    let degenerate = || Error::Estimation("degenerate point configuration".into());
    let ts = hartley_normalization(src).ok_or_else(degenerate)?;
    let td = hartley_normalization(dst).ok_or_else(degenerate)?;
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in src.iter().zip(dst).enumerate() {
        let sn = ts * Vector3::new(s[0], s[1], 1.0);
        let dn = td * Vector3::new(d[0], d[1], 1.0);
        let (x, y) = (sn[0], sn[1]);
        let (u, v) = (dn[0], dn[1]);
        let r = 2 * k;
        let row1 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let row2 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(r, c)] = row1[c];
            a[(r + 1, c)] = row2[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(degenerate)?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .ok_or_else(degenerate)?;
    let hv = v_t.row(min_idx);
    let hn = Matrix3::new(hv[0], hv[1], hv[2], hv[3], hv[4], hv[5], hv[6], hv[7], hv[8]);
    let td_inv = td.try_inverse().ok_or_else(degenerate)?;
    let h = td_inv * hn * ts;
    let upper = h.fixed_view::<2, 2>(0, 0).determinant();
    if upper.abs() <= 1e-12 * h.norm() * h.norm() {
        return Err(degenerate());
    }
    Homography::from_matrix(&h)
}

/// Mean of forward and backward squared transfer errors, square-rooted.
fn symmetric_error(h: &Matrix3<f64>, h_inv: &Matrix3<f64>, c: &Correspondence) -> f64 {
    match (project(h, c.src), project(h_inv, c.dst)) {
        (Some(f), Some(b)) => {
            let df = (f[0] - c.dst[0]).powi(2) + (f[1] - c.dst[1]).powi(2);
            let db = (b[0] - c.src[0]).powi(2) + (b[1] - c.src[1]).powi(2);
            (0.5 * (df + db)).sqrt()
        }
        _ => f64::INFINITY,
    }
}

fn collinear(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let scale = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2))
        .max((c[0] - a[0]).powi(2) + (c[1] - a[1]).powi(2));
    cross.abs() <= 1e-9 * scale.max(1e-300)
}

fn sample_is_degenerate(pts: &[[f64; 2]; 4]) -> bool {
    for i in 0..4 {
        for j in i + 1..4 {
            for k in j + 1..4 {
                if collinear(pts[i], pts[j], pts[k]) {
                    return true;
                }
            }
        }
    }
    false
}

/// Result of robust estimation including the inlier indices (into the caller's slice).
#[derive(Debug, Clone)]
pub struct RansacOutcome {
    pub homography: Homography,
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

pub fn estimate_homography(matches: &[Correspondence], seed: u64) -> Result<Homography> {
    estimate_homography_with(matches, seed, &RansacParams::default()).map(|o| o.homography)
}

/// RANSAC over minimal 4-point samples with adaptive iteration count, followed
/// by least-squares refits on the inlier set.
///
/// Correspondences are first put in a canonical order, so the result depends
/// only on the set of matches and the seed, never on input order.
pub fn estimate_homography_with(
    matches: &[Correspondence],
    seed: u64,
    params: &RansacParams,
) -> Result<RansacOutcome> {
    let n = matches.len();
    if n < 4 {
        return Err(Error::InsufficientCorrespondences(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&matches[a], &matches[b]);
        p.src[0]
            .total_cmp(&q.src[0])
            .then(p.src[1].total_cmp(&q.src[1]))
            .then(p.dst[0].total_cmp(&q.dst[0]))
            .then(p.dst[1].total_cmp(&q.dst[1]))
            .then(p.score.total_cmp(&q.score))
    });
    let sorted: Vec<Correspondence> = order.iter().map(|&i| matches[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut needed = params.max_iterations;
    let mut iterations = 0;
    let mut draws = 0;
    let max_draws = params.max_iterations.saturating_mul(20).max(100);
    while iterations < needed.min(params.max_iterations) && draws < max_draws {
        draws += 1;
        let mut idx = [0usize; 4];
        let mut k = 0;
        while k < 4 {
            let c = rng.random_range(0..n);
            if !idx[..k].contains(&c) {
                idx[k] = c;
                k += 1;
            }
        }
        let src = idx.map(|i| sorted[i].src);
        let dst = idx.map(|i| sorted[i].dst);
        if sample_is_degenerate(&src) || sample_is_degenerate(&dst) {
            continue;
        }
        iterations += 1;
        let Ok(model) = dlt_homography(&src, &dst) else {
            continue;
        };
        let Some((inliers, cost)) = score_model(&model, &sorted, params.inlier_threshold) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((b, bc)) => inliers.len() > b.len() || (inliers.len() == b.len() && cost < *bc),
        };
        if better {
            let w = inliers.len() as f64 / n as f64;
            needed = adaptive_iterations(w, params.confidence, params.max_iterations);
            best = Some((inliers, cost));
        }
    }
    let (mut inliers, _) = best
        .filter(|(inl, _)| inl.len() >= 4)
        .ok_or_else(|| Error::Estimation("no model with at least 4 inliers".into()))?;

    let mut model = refit(&sorted, &inliers)?;
    for _ in 0..5 {
        let Some((next, _)) = score_model(&model, &sorted, params.inlier_threshold) else {
            break;
        };
        if next == inliers || next.len() < 4 {
            break;
        }
        inliers = next;
        model = refit(&sorted, &inliers)?;
    }
    let m = model.matrix();
    let sq: f64 = inliers
        .iter()
        .map(|&i| {
            let c = &sorted[i];
            project(&m, c.src)
                .map(|p| (p[0] - c.dst[0]).powi(2) + (p[1] - c.dst[1]).powi(2))
                .unwrap_or(f64::INFINITY)
        })
        .sum();
    model.inlier_count = inliers.len();
    model.reprojection_rms = (sq / inliers.len() as f64).sqrt();
    let mut original: Vec<usize> = inliers.iter().map(|&i| order[i]).collect();
    original.sort_unstable();
    Ok(RansacOutcome {
        homography: model,
        inliers: original,
        iterations,
    })
}

fn refit(sorted: &[Correspondence], inliers: &[usize]) -> Result<Homography> {
    let src: Vec<[f64; 2]> = inliers.iter().map(|&i| sorted[i].src).collect();
    let dst: Vec<[f64; 2]> = inliers.iter().map(|&i| sorted[i].dst).collect();
    dlt_homography(&src, &dst)
}

fn score_model(model: &Homography, matches: &[Correspondence], threshold: f64) -> Option<(Vec<usize>, f64)> {
    let h = model.matrix();
    let h_inv = h.try_inverse()?;
    let mut inliers = Vec::new();
    let mut cost = 0.0;
    for (i, c) in matches.iter().enumerate() {
        let e = symmetric_error(&h, &h_inv, c);
        if e < threshold {
            inliers.push(i);
            cost += e * e;
        }
    }
    Some((inliers, cost))
}

fn adaptive_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let p_good = inlier_ratio.powi(4);
    if p_good >= 1.0 - 1e-12 {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let k = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if !k.is_finite() {
        return cap;
    }
    (k.ceil() as usize).clamp(1, cap)
}

// ---------------------------------------------------------------------------
// Warping

#[derive(Debug, Clone, PartialEq)]
pub struct Warped {
    pub image: RgbRaster,
    /// Row-major; `false` where the source sample fell outside the moving frame.
    pub valid: Vec<bool>,
}

impl Warped {
    pub fn valid_at(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.image.width() + x]
    }

    pub fn validity_raster(&self) -> GrayRaster {
        let w = self.image.width();
        GrayRaster::from_fn(w, self.image.height(), |x, y| {
            if self.valid[y * w + x] {
                255.0
            } else {
                0.0
            }
        })
    }
}

/// Inverse-warps a moving frame into reference coordinates (same dimensions)
/// with bilinear sampling. Unmapped pixels are black and flagged invalid.
pub fn warp_to_reference(image: &RgbRaster, h: &Homography) -> Result<Warped> {
    let m = h.matrix();
    if m.determinant().abs() < 1e-12 {
        return Err(Error::Estimation("homography is near-singular (|det| < 1e-12)".into()));
    }
    let inv = m
        .try_inverse()
        .ok_or_else(|| Error::Estimation("homography is singular".into()))?;
    let (w, hgt) = (image.width(), image.height());
    let mut valid = vec![false; w * hgt];
    let out = RgbRaster::from_fn(w, hgt, |x, y| {
        match project(&inv, [x as f64, y as f64]).and_then(|p| image.sample_bilinear(p[0], p[1])) {
            Some(v) => {
                valid[y * w + x] = true;
                v
            }
            None => [0.0; 3],
        }
    });
    Ok(Warped { image: out, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn textured(w: usize, h: usize, seed: u64) -> GrayRaster {
        let field = crate::synth::ValueNoise::new(6.0, seed);
        GrayRaster::from_fn(w, h, |x, y| 40.0 + 180.0 * field.sample(x as f64, y as f64) as f32)
    }

    fn h_star() -> Homography {
        Homography::from_matrix(&Matrix3::new(
            1.02, 0.03, 4.0, -0.02, 0.98, -3.0, 1.0e-5, -2.0e-5, 1.0,
        ))
        .unwrap()
    }

    fn synth_matches(h: &Homography, n: usize, outlier_frac: f64, noise: f64, seed: u64) -> Vec<Correspondence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let n_out = (n as f64 * outlier_frac).round() as usize;
        (0..n)
            .map(|i| {
                let src = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
                let dst = if i < n_out {
                    [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)]
                } else {
                    let p = h.apply(src).unwrap();
                    if noise > 0.0 {
                        [p[0] + normal.sample(&mut rng), p[1] + normal.sample(&mut rng)]
                    } else {
                        p
                    }
                };
                Correspondence { src, dst, score: 1.0 }
            })
            .collect()
    }

    #[test]
    fn self_match_is_identity() {
        let img = textured(128, 96, 3);
        let m = detect_and_match(&img, &img, &MatchParams::default()).unwrap();
        assert!(m.len() >= 4);
        assert!(m.iter().all(|c| c.src == c.dst));
    }

    #[test]
    fn featureless_pair_fails() {
        let img = GrayRaster::new(80, 80, 90.0);
        match detect_and_match(&img, &img, &MatchParams::default()) {
            Err(Error::InsufficientCorrespondences(n)) => assert_eq!(n, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn small_images_rejected() {
        let img = GrayRaster::new(32, 80, 1.0);
        assert!(matches!(
            detect_and_match(&img, &img, &MatchParams::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn translated_copy_recovers_shift() {
        let base = textured(240, 180, 11);
        // moving(x, y) = reference(x + 5, y), so true matches satisfy dst = src + (5, 0).
        let moving = GrayRaster::from_fn(240, 180, |x, y| base.get((x + 5).min(239), y));
        let m = detect_and_match(&moving, &base, &MatchParams::default()).unwrap();
        assert!(m.len() >= 50, "only {} matches", m.len());
        let mut dx: Vec<f64> = m.iter().map(|c| c.dst[0] - c.src[0]).collect();
        let mut dy: Vec<f64> = m.iter().map(|c| c.dst[1] - c.src[1]).collect();
        dx.sort_by(f64::total_cmp);
        dy.sort_by(f64::total_cmp);
        let (mx, my) = (dx[dx.len() / 2], dy[dy.len() / 2]);
        assert!((mx - 5.0).abs() <= 0.5 && my.abs() <= 0.5, "median ({mx}, {my})");
    }

    #[test]
    fn identity_matches_give_identity() {
        let matches: Vec<Correspondence> = synth_matches(&Homography::identity(), 50, 0.0, 0.0, 1);
        let h = estimate_homography(&matches, 7).unwrap();
        let id = Matrix3::<f64>::identity();
        assert!((h.matrix() - id).abs().max() < 1e-9, "{:?}", h.h);
        assert!(h.reprojection_rms < 1e-9);
        assert_eq!(h.inlier_count, 50);
    }

    #[test]
    fn four_exact_matches_interpolate() {
        let h = h_star();
        let src = [[10.0, 20.0], [600.0, 35.0], [580.0, 450.0], [30.0, 400.0]];
        let matches: Vec<Correspondence> = src
            .iter()
            .map(|&s| Correspondence { src: s, dst: h.apply(s).unwrap(), score: 1.0 })
            .collect();
        let est = estimate_homography(&matches, 0).unwrap();
        for (a, b) in est.h.iter().zip(&h.h) {
            assert!((a - b).abs() < 1e-7 * b.abs().max(1.0), "{:?} vs {:?}", est.h, h.h);
        }
        for c in &matches {
            let p = est.apply(c.src).unwrap();
            assert!((p[0] - c.dst[0]).abs() < 1e-7 && (p[1] - c.dst[1]).abs() < 1e-7);
        }
    }

    #[test]
    fn robust_to_outliers() {
        let h = h_star();
        let matches = synth_matches(&h, 100, 0.3, 0.0, 42);
        let est = estimate_homography(&matches, 42).unwrap();
        assert!(est.corner_transfer_error(&h, 640.0, 480.0) < 0.5);
        assert!(est.inlier_count >= 70);
    }

    #[test]
    fn noisy_inliers_stay_close() {
        let h = h_star();
        let matches = synth_matches(&h, 200, 0.3, 0.25, 5);
        let est = estimate_homography(&matches, 5).unwrap();
        assert!(est.corner_transfer_error(&h, 640.0, 480.0) < 1.0);
        assert!(est.reprojection_rms < 0.6);
    }

    #[test]
    fn order_invariance() {
        let matches = synth_matches(&h_star(), 80, 0.3, 0.3, 9);
        let mut shuffled = matches.clone();
        shuffled.reverse();
        shuffled.swap(3, 40);
        let a = estimate_homography(&matches, 17).unwrap();
        let b = estimate_homography(&shuffled, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dlt_invariant_to_coordinate_scaling() {
        let h = h_star();
        let matches = synth_matches(&h, 60, 0.0, 0.5, 21);
        let src: Vec<[f64; 2]> = matches.iter().map(|c| c.src).collect();
        let dst: Vec<[f64; 2]> = matches.iter().map(|c| c.dst).collect();
        let base = dlt_homography(&src, &dst).unwrap();
        let s10: Vec<[f64; 2]> = src.iter().map(|p| [p[0] * 10.0, p[1] * 10.0]).collect();
        let d10: Vec<[f64; 2]> = dst.iter().map(|p| [p[0] * 10.0, p[1] * 10.0]).collect();
        let scaled = dlt_homography(&s10, &d10).unwrap();
        // Undo the scaling: S^-1 H' S should equal H.
        let s = Matrix3::new(10.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 1.0);
        let back = Homography::from_matrix(&(s.try_inverse().unwrap() * scaled.matrix() * s)).unwrap();
        for (a, b) in back.h.iter().zip(&base.h) {
            assert!((a - b).abs() < 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn composition_is_consistent() {
        let h_ab = h_star();
        let h_bc = Homography::from_matrix(&Matrix3::new(
            0.99, -0.02, -6.0, 0.015, 1.01, 2.5, -1.0e-5, 1.0e-5, 1.0,
        ))
        .unwrap();
        let h_ac = h_ab.then(&h_bc).unwrap();
        let e_ab = estimate_homography(&synth_matches(&h_ab, 120, 0.2, 0.3, 1), 1).unwrap();
        let e_bc = estimate_homography(&synth_matches(&h_bc, 120, 0.2, 0.3, 2), 2).unwrap();
        let e_ac = estimate_homography(&synth_matches(&h_ac, 120, 0.2, 0.3, 3), 3).unwrap();
        let composed = e_ab.then(&e_bc).unwrap();
        assert!(composed.corner_transfer_error(&e_ac, 640.0, 480.0) < 1.0);
    }

    #[test]
    fn collinear_only_data_fails() {
        let matches: Vec<Correspondence> = (0..20)
            .map(|i| {
                let p = [i as f64 * 10.0, i as f64 * 5.0];
                Correspondence { src: p, dst: p, score: 1.0 }
            })
            .collect();
        assert!(estimate_homography(&matches, 0).is_err());
    }

    #[test]
    fn warp_identity_is_exact() {
        let img = RgbRaster::from_fn(20, 10, |x, y| [x as f32, y as f32, 7.0]);
        let w = warp_to_reference(&img, &Homography::identity()).unwrap();
        assert_eq!(w.image, img);
        assert!(w.valid.iter().all(|&v| v));
    }

    #[test]
    fn warp_translation_margin() {
        let img = RgbRaster::from_fn(20, 10, |x, y| [x as f32 * 5.0, y as f32, 1.0]);
        let t = Homography::from_matrix(&Matrix3::new(1.0, 0.0, 3.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        let w = warp_to_reference(&img, &t).unwrap();
        for y in 0..10 {
            for x in 0..20 {
                assert_eq!(w.valid_at(x, y), x >= 3, "({x},{y})");
                if x >= 3 {
                    assert_eq!(w.image.get(x, y), img.get(x - 3, y));
                } else {
                    assert_eq!(w.image.get(x, y), [0.0; 3]);
                }
            }
        }
    }

    #[test]
    fn warp_round_trip() {
        let field = crate::synth::ValueNoise::new(24.0, 4);
        let img = RgbRaster::from_fn(120, 90, |x, y| {
            let v = field.sample(x as f64, y as f64) as f32;
            [40.0 + 200.0 * v, 100.0 + 60.0 * v, 220.0 - 150.0 * v]
        });
        let h = Homography::from_matrix(&Matrix3::new(
            1.01, 0.02, 2.5, -0.015, 0.99, 1.5, 2.0e-5, -1.0e-5, 1.0,
        ))
        .unwrap();
        let fwd = warp_to_reference(&img, &h).unwrap();
        let back = warp_to_reference(&fwd.image, &h.inverse().unwrap()).unwrap();
        let margin = 8;
        let mut worst = 0.0f32;
        for y in margin..90 - margin {
            for x in margin..120 - margin {
                assert!(back.valid_at(x, y));
                for c in 0..3 {
                    worst = worst.max((back.image.get(x, y)[c] - img.get(x, y)[c]).abs());
                }
            }
        }
        assert!(worst <= 2.0, "max error {worst}");
    }

    #[test]
    fn singular_warp_rejected() {
        let flat = Homography { h: [1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0], inlier_count: 4, reprojection_rms: 0.0 };
        assert!(warp_to_reference(&RgbRaster::new(4, 4, [0.0; 3]), &flat).is_err());
    }
}
