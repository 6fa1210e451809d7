//! Synthetic bog generator with full ground truth.
//!
//! Berries are flat-colored disks on a textured leaf background. Each berry
//! ripens along a logistic curve, its color interpolating from the green to
//! the red endpoint. Every frame is rendered through a known homography, then
//! a per-channel photometric distortion, then Gaussian noise. A separate gray
//! card image per frame carries the same distortion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calib::{default_reference, measure_patch};
use crate::error::{Error, Result};
use crate::model::{
    save_masks_json, save_masks_png, save_series, write_json, FeatureRecord, GrayPatchSample, InstanceMask,
    InstanceMaskSet, Role, Series, SessionManifest,
};
use crate::raster::RgbRaster;
use crate::register::Homography;

/// Smooth lattice noise in `[0, 1]`, defined over the whole plane.
#[derive(Debug, Clone)]
pub struct ValueNoise {
    cell: f64,
    seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ValueNoise {
    pub fn new(cell: f64, seed: u64) -> Self {
        Self { cell, seed }
    }

    fn lattice(&self, i: i64, j: i64) -> f64 {
        let h = splitmix(self.seed ^ splitmix((i as u64).wrapping_mul(0x1656_67B1) ^ (j as u64).rotate_left(32)));
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (i, j) = (gx.floor() as i64, gy.floor() as i64);
        let (fx, fy) = (gx - i as f64, gy - j as f64);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (sx, sy) = (s(fx), s(fy));
        let top = self.lattice(i, j) * (1.0 - sx) + self.lattice(i + 1, j) * sx;
        let bottom = self.lattice(i, j + 1) * (1.0 - sx) + self.lattice(i + 1, j + 1) * sx;
        top * (1.0 - sy) + bottom * sy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerrySpec {
    /// Reference-frame `(x, y)`.
    pub center: [f64; 2],
    pub radius: f64,
    /// Frame index at which the ripening state crosses 0.5.
    pub midpoint: f64,
    /// Logistic rate per frame.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_berries: usize,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub berry_radius: f64,
    /// Explicit berry layout; generated on a jittered grid when absent.
    pub berries: Option<Vec<BerrySpec>>,
    pub midpoint_range: [f64; 2],
    pub rate_range: [f64; 2],
    pub green_rgb: [f64; 3],
    pub red_rgb: [f64; 3],
    /// When set, berries take the flat color of their class instead of the
    /// green-to-red interpolation.
    pub class_palette: Option<[[f64; 3]; 5]>,
    pub leaf_dark_rgb: [f64; 3],
    pub leaf_light_rgb: [f64; 3],
    pub texture_cell: f64,
    /// Per-channel gain range of the photometric distortion (observed = gain * true + offset).
    pub gain_range: [f64; 2],
    pub offset_range: [f64; 2],
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    pub max_perspective: f64,
    pub noise_sigma: f64,
    /// Integer jitter (pixels) applied to each exported mask.
    pub mask_jitter: i64,
    pub start_date: String,
    pub span_days: i64,
    pub bog_id: String,
    pub variety: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_berries: 14,
            n_frames: 27,
            width: 320,
            height: 240,
            berry_radius: 9.0,
            berries: None,
            midpoint_range: [8.0, 17.0],
            rate_range: [0.3, 0.5],
            green_rgb: [70.0, 150.0, 50.0],
            red_rgb: [165.0, 25.0, 35.0],
            class_palette: None,
            leaf_dark_rgb: [30.0, 60.0, 25.0],
            leaf_light_rgb: [120.0, 170.0, 90.0],
            texture_cell: 7.0,
            gain_range: [0.82, 1.0],
            offset_range: [-10.0, 10.0],
            max_translation: 4.0,
            max_rotation_deg: 1.0,
            max_perspective: 1.0e-5,
            noise_sigma: 1.0,
            mask_jitter: 2,
            start_date: "2024-08-02".into(),
            span_days: 42,
            bog_id: "SYN1".into(),
            variety: "synthetic".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerryTruth {
    pub berry_id: u32,
    /// Instance id of this berry in the frame's mask set.
    pub instance_id: u32,
    pub state: f64,
    pub class: u8,
    pub color: [f64; 3],
    /// Mask center in reference coordinates (after jitter).
    pub mask_center: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub session_id: String,
    pub capture_date: String,
    /// Maps frame pixels to reference pixels, row-major.
    pub homography: [f64; 9],
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub berries: Vec<BerryTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub seed: u64,
    pub berries: Vec<BerrySpec>,
    pub frames: Vec<FrameTruth>,
}

impl Truth {
    /// Ripening state per berry (outer) per frame (inner).
    pub fn states(&self) -> Vec<Vec<f64>> {
        (0..self.berries.len())
            .map(|b| self.frames.iter().map(|f| f.berries[b].state).collect())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub session_id: String,
    pub capture_date: String,
    pub image: RgbRaster,
    pub card: RgbRaster,
    pub card_patches: Vec<GrayPatchSample>,
    /// Instance masks in reference coordinates.
    pub masks: InstanceMaskSet,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub frames: Vec<SynthFrame>,
    pub truth: Truth,
}

pub fn logistic_state(frame: f64, midpoint: f64, rate: f64) -> f64 {
    1.0 / (1.0 + (-rate * (frame - midpoint)).exp())
}

/// Quantizes a state in `[0, 1]` into five equal bins, classes 1..=5.
pub fn state_class(state: f64) -> u8 {
    ((state * 5.0).floor().clamp(0.0, 4.0) as u8) + 1
}

pub fn berry_color(cfg: &SynthConfig, state: f64) -> [f64; 3] {
    if let Some(palette) = &cfg.class_palette {
        return palette[state_class(state) as usize - 1];
    }
    [0, 1, 2].map(|c| cfg.green_rgb[c] + state * (cfg.red_rgb[c] - cfg.green_rgb[c]))
}

const CARD_PATCH: usize = 20;
const CARD_BORDER: usize = 4;

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.n_berries == 0 && cfg.berries.as_ref().is_none_or(|b| b.is_empty()) {
        return Err(Error::Validation("synth needs at least one berry".into()));
    }
    if cfg.n_frames == 0 {
        return Err(Error::Validation("synth needs at least one frame".into()));
    }
    if cfg.width < 64 || cfg.height < 64 {
        return Err(Error::Validation("synth frames must be at least 64x64".into()));
    }
    if cfg.n_frames > 1 && cfg.span_days < cfg.n_frames as i64 - 1 {
        return Err(Error::Validation(format!(
            "span_days {} too short for {} distinct capture dates",
            cfg.span_days, cfg.n_frames
        )));
    }
    if !(cfg.noise_sigma >= 0.0) {
        return Err(Error::Validation("noise_sigma must be >= 0".into()));
    }
    crate::model::validate_date(&cfg.start_date)
}

fn layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<BerrySpec>> {
    let margin = cfg.max_translation + cfg.mask_jitter as f64 + 8.0;
    let berries = match &cfg.berries {
        Some(b) => b.clone(),
        None => {
            let r = cfg.berry_radius;
            let min_cell = 2.0 * r + 4.0;
            let usable_w = cfg.width as f64 - 2.0 * margin;
            let usable_h = cfg.height as f64 - 2.0 * margin;
            let cols = (usable_w / min_cell).floor() as usize;
            let rows = (usable_h / min_cell).floor() as usize;
            if cols * rows < cfg.n_berries {
                return Err(Error::Validation(format!(
                    "{} berries of radius {r} overlap in a {}x{} frame",
                    cfg.n_berries, cfg.width, cfg.height
                )));
            }
            // Spread berries over the most square grid that holds them.
            let mut gc = (cfg.n_berries as f64 * usable_w / usable_h).sqrt().ceil() as usize;
            gc = gc.clamp(1, cols);
            let mut gr = cfg.n_berries.div_ceil(gc);
            if gr > rows {
                gr = rows;
                gc = cfg.n_berries.div_ceil(gr);
            }
            let (cw, ch) = (usable_w / gc as f64, usable_h / gr as f64);
            let slack_x = ((cw - min_cell) / 2.0).max(0.0);
            let slack_y = ((ch - min_cell) / 2.0).max(0.0);
            (0..cfg.n_berries)
                .map(|i| {
                    let (row, col) = (i / gc, i % gc);
                    let jx = if slack_x > 0.0 { rng.random_range(-slack_x..slack_x) } else { 0.0 };
                    let jy = if slack_y > 0.0 { rng.random_range(-slack_y..slack_y) } else { 0.0 };
                    BerrySpec {
                        center: [
                            (margin + (col as f64 + 0.5) * cw + jx).round(),
                            (margin + (row as f64 + 0.5) * ch + jy).round(),
                        ],
                        radius: r,
                        midpoint: uniform(rng, cfg.midpoint_range),
                        rate: uniform(rng, cfg.rate_range),
                    }
                })
                .collect()
        }
    };
    let jitter = cfg.mask_jitter as f64;
    for (i, a) in berries.iter().enumerate() {
        if a.radius <= 0.0 {
            return Err(Error::Validation(format!("berry {i} has non-positive radius")));
        }
        for (j, b) in berries.iter().enumerate().skip(i + 1) {
            let d = ((a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2)).sqrt();
            if d < a.radius + b.radius + 2.0 * jitter + 1.0 {
                return Err(Error::Validation(format!("berries {i} and {j} overlap")));
            }
        }
    }
    Ok(berries)
}

fn frame_homography(cfg: &SynthConfig, frame: usize, rng: &mut ChaCha8Rng) -> Result<Homography> {
    if frame == 0 {
        return Ok(Homography::identity());
    }
    let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..m) } else { 0.0 };
    let tx = sym(rng, cfg.max_translation);
    let ty = sym(rng, cfg.max_translation);
    let theta = sym(rng, cfg.max_rotation_deg).to_radians();
    let px = sym(rng, cfg.max_perspective);
    let py = sym(rng, cfg.max_perspective);
    let (cx, cy) = (cfg.width as f64 / 2.0, cfg.height as f64 / 2.0);
    let (c, s) = (theta.cos(), theta.sin());
    // Rotation about the frame center, then translation, then a mild projective term.
    let rot = nalgebra::Matrix3::new(c, -s, cx - c * cx + s * cy + tx, s, c, cy - s * cx - c * cy + ty, 0.0, 0.0, 1.0);
    let persp = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0);
    Homography::from_matrix(&(persp * rot))
}

fn capture_date(cfg: &SynthConfig, frame: usize) -> String {
    let start = chrono::NaiveDate::parse_from_str(&cfg.start_date, "%Y-%m-%d").expect("validated");
    let offset = if cfg.n_frames > 1 {
        (frame as f64 * cfg.span_days as f64 / (cfg.n_frames - 1) as f64).round() as i64
    } else {
        0
    };
    (start + chrono::Duration::days(offset)).format("%Y-%m-%d").to_string()
}

fn disk_mask(id: u32, center: [f64; 2], radius: f64, width: usize, height: usize) -> InstanceMask {
    let (cx, cy) = (center[0], center[1]);
    let r2 = radius * radius;
    let y0 = (cy - radius).floor().max(0.0) as u32;
    let y1 = ((cy + radius).ceil() as u32).min(height as u32 - 1);
    let x0 = (cx - radius).floor().max(0.0) as u32;
    let x1 = ((cx + radius).ceil() as u32).min(width as u32 - 1);
    let px = (y0..=y1).flat_map(move |y| {
        (x0..=x1)
            .filter(move |&x| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r2)
            .map(move |x| (y, x))
    });
    InstanceMask::from_pixels(id, px.collect::<Vec<_>>())
}

/// Renders the dataset in memory. Bitwise deterministic for a fixed config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let berries = layout(cfg, &mut rng)?;
    let texture = ValueNoise::new(cfg.texture_cell, splitmix(cfg.seed ^ 0x7E57));
    let detail = ValueNoise::new(cfg.texture_cell / 2.7, splitmix(cfg.seed ^ 0xDE7A));
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let reference = default_reference().reference_values;
    let (w, h) = (cfg.width, cfg.height);

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut truth_frames = Vec::with_capacity(cfg.n_frames);
    for f in 0..cfg.n_frames {
        let session_id = format!("f{f:02}");
        let capture_date = capture_date(cfg, f);
        let hom = frame_homography(cfg, f, &mut rng)?;
        let gain: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, cfg.gain_range));
        let offset: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, cfg.offset_range));
        let states: Vec<f64> = berries.iter().map(|b| logistic_state(f as f64, b.midpoint, b.rate)).collect();
        let colors: Vec<[f64; 3]> = states.iter().map(|&s| berry_color(cfg, s)).collect();

        let distort = |rng: &mut ChaCha8Rng, v: [f64; 3]| -> [f32; 3] {
            std::array::from_fn(|c| {
                let mut x = gain[c] * v[c] + offset[c];
                if cfg.noise_sigma > 0.0 {
                    x += noise.sample(rng);
                }
                x.clamp(0.0, 255.0) as f32
            })
        };

        let m = hom.matrix();
        let mut image = RgbRaster::new(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let v = m * nalgebra::Vector3::new(x as f64, y as f64, 1.0);
                let (sx, sy) = (v[0] / v[2], v[1] / v[2]);
                let berry = berries
                    .iter()
                    .position(|b| (sx - b.center[0]).powi(2) + (sy - b.center[1]).powi(2) <= b.radius * b.radius);
                let color = match berry {
                    Some(i) => colors[i],
                    None => {
                        let t = (0.65 * texture.sample(sx, sy) + 0.35 * detail.sample(sx, sy)).clamp(0.0, 1.0);
                        [0, 1, 2].map(|c| cfg.leaf_dark_rgb[c] + t * (cfg.leaf_light_rgb[c] - cfg.leaf_dark_rgb[c]))
                    }
                };
                let px = distort(&mut rng, color);
                image.set(x, y, px);
            }
        }

        let card_w = CARD_BORDER * 2 + CARD_PATCH * reference.len();
        let card_h = CARD_BORDER * 2 + CARD_PATCH;
        let mut card = RgbRaster::new(card_w, card_h, [0.0; 3]);
        for y in 0..card_h {
            for x in 0..card_w {
                let inside = x >= CARD_BORDER && x < card_w - CARD_BORDER && y >= CARD_BORDER && y < card_h - CARD_BORDER;
                let v = if inside { reference[(x - CARD_BORDER) / CARD_PATCH] } else { 20.0 };
                let px = distort(&mut rng, [v; 3]);
                card.set(x, y, px);
            }
        }
        let card_patches = reference
            .iter()
            .enumerate()
            .map(|(i, &r)| GrayPatchSample {
                measured_rgb: measure_patch(
                    &card,
                    (CARD_BORDER + i * CARD_PATCH + 3, CARD_BORDER + 3, CARD_PATCH - 6, CARD_PATCH - 6),
                ),
                reference_value: r,
            })
            .collect();

        // Instance ids are shuffled per frame so they carry no identity.
        let mut ids: Vec<u32> = (1..=berries.len() as u32).collect();
        ids.shuffle(&mut rng);
        let mut instances = Vec::with_capacity(berries.len());
        let mut berry_truth = Vec::with_capacity(berries.len());
        for (i, b) in berries.iter().enumerate() {
            let j = cfg.mask_jitter;
            let (dx, dy) = if j > 0 {
                (rng.random_range(-j..=j) as f64, rng.random_range(-j..=j) as f64)
            } else {
                (0.0, 0.0)
            };
            let center = [b.center[0] + dx, b.center[1] + dy];
            instances.push(disk_mask(ids[i], center, b.radius, w, h));
            berry_truth.push(BerryTruth {
                berry_id: i as u32 + 1,
                instance_id: ids[i],
                state: states[i],
                class: state_class(states[i]),
                color: colors[i],
                mask_center: center,
            });
        }
        let masks = InstanceMaskSet::new(session_id.clone(), w as u32, h as u32, instances)?;

        truth_frames.push(FrameTruth {
            session_id: session_id.clone(),
            capture_date: capture_date.clone(),
            homography: hom.h,
            gain,
            offset,
            berries: berry_truth,
        });
        frames.push(SynthFrame {
            session_id,
            capture_date,
            image,
            card,
            card_patches,
            masks,
        });
    }
    Ok(SynthDataset {
        config: cfg.clone(),
        frames,
        truth: Truth {
            seed: cfg.seed,
            berries,
            frames: truth_frames,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// `s * u + noise` for a fixed random unit vector `u`.
    Linear,
    /// As linear, but each berry's timepoints are randomly permuted.
    Scrambled,
}

/// Feature records for an ideal (linear) or useless (scrambled) extractor.
/// `states[b][t]` is berry `b + 1` at timepoint `t`.
pub fn synth_features(states: &[Vec<f64>], dim: usize, mode: FeatureMode, noise_sigma: f64, seed: u64) -> Result<Vec<FeatureRecord>> {
    if dim < 2 {
        return Err(Error::Parameter(format!("feature dimension must be >= 2, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut u: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= norm);
    let mut out = Vec::new();
    for (b, series) in states.iter().enumerate() {
        let mut order: Vec<usize> = (0..series.len()).collect();
        if mode == FeatureMode::Scrambled {
            order.shuffle(&mut rng);
        }
        for (t, &src) in order.iter().enumerate() {
            let s = series[src];
            let vector = u
                .iter()
                .map(|&ui| s * ui + if noise_sigma > 0.0 { noise_sigma * normal.sample(&mut rng) } else { 0.0 })
                .collect();
            out.push(FeatureRecord {
                berry_id: b as u32 + 1,
                timepoint_index: t as u32,
                vector,
            });
        }
    }
    Ok(out)
}

/// Writes `series.json`, `frames/`, `cards/`, `masks/` (RLE JSON),
/// `masks_png/` (label images) and `truth.json` under `dir`.
pub fn write_dataset(ds: &SynthDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["frames", "cards", "masks", "masks_png"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let seed = ds.config.seed.to_string();
    let meta = [("generator", "ripelab synth"), ("seed", seed.as_str())];
    let mut sessions = Vec::with_capacity(ds.frames.len());
    for f in &ds.frames {
        let img_rel = format!("frames/{}.png", f.session_id);
        f.image.save_png(dir.join(&img_rel), &meta)?;
        f.card.save_png(dir.join(format!("cards/{}.png", f.session_id)), &meta)?;
        save_masks_json(&f.masks, dir.join(format!("masks/{}.json", f.session_id)))?;
        save_masks_png(&f.masks, dir.join(format!("masks_png/{}.png", f.session_id)))?;
        sessions.push(SessionManifest {
            session_id: f.session_id.clone(),
            bog_id: ds.config.bog_id.clone(),
            variety: ds.config.variety.clone(),
            capture_date: f.capture_date.clone(),
            image_paths: vec![img_rel.into()],
            card_patches: Some(f.card_patches.clone()),
            role: Role::Ground,
        });
    }
    save_series(
        &Series {
            series_id: ds.config.bog_id.clone(),
            sessions,
        },
        dir.join("series.json"),
    )?;
    write_json(&dir.join("truth.json"), &ds.truth)?;
    write_json(&dir.join("synth_config.json"), &ds.config)
}
