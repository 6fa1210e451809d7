//! Acceptance suite: one PASS/FAIL line per criterion, each with its own
//! runtime budget. Exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ripelab_core::albedo::{fit_color_classes, kmeans, label_berry, ripeness_ratio, risk_flag, KMeansParams};
use ripelab_core::calib::{default_reference, fit_calibration};
use ripelab_core::embed::{
    embed_records, fit_ripeness_axis, ripeness_value, select_extractor_report, umap_embed, ExtractorEmbedding,
};
use ripelab_core::register::estimate_homography;
use ripelab_core::stats::spearman;
use ripelab_core::synth::{generate, synth_features, FeatureMode, SynthConfig};
use ripelab_core::track::{associate, TrackFrame};
use ripelab_core::{ClassHistogram, Correspondence, GrayPatchSample, UmapParams};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Published ratio table rows

const DATES: [&str; 6] = ["2022-08-02", "2022-08-16", "2022-08-25", "2022-08-31", "2022-09-09", "2022-09-14"];
const A5: [&str; 6] = ["0.007", "0.082", "0.331", "0.497", "0.902", "1.000"];
const A4: [&str; 6] = ["0.127", "0.453", "0.926", "1.118", "0.808", "1.000"];
const J12: [&str; 6] = ["0.002", "0.088", "0.419", "0.609", "0.968", "1.000"];

/// Histograms of 2000 berries whose red share is half the published ratio,
/// so the final date has 1000 red berries and the ratio is the count / 1000.
fn histograms_for(bog: &str, ratios: &[&str; 6]) -> Vec<ClassHistogram> {
    DATES
        .iter()
        .zip(ratios)
        .enumerate()
        .map(|(i, (date, r))| {
            let red = (r.parse::<f64>().unwrap() * 1000.0).round() as u64;
            let rest = 2000 - red;
            let counts = [rest / 2, rest - rest / 2 - rest / 4, rest / 4, red / 2, red - red / 2];
            ClassHistogram::from_counts(format!("{bog}-{i}"), bog, *date, counts)
        })
        .collect()
}

fn ratio_arithmetic() -> Outcome {
    for (bog, expected) in [("A5", &A5), ("A4", &A4)] {
        let row = ripeness_ratio(&histograms_for(bog, expected)).map_err(|e| e.to_string())?;
        let got: Vec<String> = row.values.iter().map(|v| format!("{v:.3}")).collect();
        check(got == expected.map(String::from), || format!("{bog}: {got:?} vs {expected:?}"))?;
        check(row.values[5] == 1.0, || format!("{bog}: final ratio {} is not exactly 1", row.values[5]))?;
    }
    let a4 = ripeness_ratio(&histograms_for("A4", &A4)).map_err(|e| e.to_string())?;
    check(a4.values[3] > 1.0, || format!("A4 8/31 clamped to {}", a4.values[3]))?;
    Ok("A5 and A4 reproduced to 3 decimals, A4 8/31 = 1.118 unclamped".into())
}

fn risk_flags() -> Outcome {
    let mut out = Vec::new();
    for (bog, ratios, expected) in [("A5", &A5, "2022-09-09"), ("J12", &J12, "2022-08-31")] {
        let row = ripeness_ratio(&histograms_for(bog, ratios)).map_err(|e| e.to_string())?;
        let flag = risk_flag(&row, 0.6);
        check(flag == Some(expected), || format!("{bog}: flagged {flag:?}, expected {expected}"))?;
        out.push(format!("{bog}->{expected}"));
    }
    Ok(out.join(", "))
}

// ---------------------------------------------------------------------------
// Calibration

fn distorted_card(gain: [f64; 3], offset: [f64; 3], noise: Option<(&Normal<f64>, &mut ChaCha8Rng)>) -> Vec<GrayPatchSample> {
    let reference = default_reference().reference_values;
    let mut noise = noise;
    reference
        .iter()
        .map(|&r| GrayPatchSample {
            measured_rgb: std::array::from_fn(|c| {
                let e = match noise.as_mut() {
                    Some((n, rng)) => n.sample(*rng),
                    None => 0.0,
                };
                gain[c] * r + offset[c] + e
            }),
            reference_value: r,
        })
        .collect()
}

/// The distortion implied by a fitted correction `corrected = g * measured + o`.
fn recovered(model: &ripelab_core::CalibrationModel, c: usize) -> (f64, f64) {
    (1.0 / model.gain[c], -model.offset[c] / model.gain[c])
}

fn calibration_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_clean: f64 = 0.0;
    for _ in 0..100 {
        let g: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.4));
        let o: [f64; 3] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
        let model = fit_calibration(&distorted_card(g, o, None)).map_err(|e| e.to_string())?;
        for c in 0..3 {
            let (rg, ro) = recovered(&model, c);
            worst_clean = worst_clean.max((rg - g[c]).abs()).max((ro - o[c]).abs());
        }
    }
    check(worst_clean < 1e-9, || format!("noise-free error {worst_clean:e}"))?;

    let normal = Normal::new(0.0, 1.0).unwrap();
    let (mut worst_gain, mut worst_offset): (f64, f64) = (0.0, 0.0);
    for trial in 0..100u64 {
        let mut trng = ChaCha8Rng::seed_from_u64(trial);
        let patches = distorted_card([0.8; 3], [5.0; 3], Some((&normal, &mut trng)));
        let model = fit_calibration(&patches).map_err(|e| e.to_string())?;
        for c in 0..3 {
            let (rg, ro) = recovered(&model, c);
            worst_gain = worst_gain.max((rg - 0.8).abs());
            worst_offset = worst_offset.max((ro - 5.0).abs());
        }
    }
    check(worst_gain < 0.05 && worst_offset < 3.0, || {
        format!("sigma=1 worst |dgain| {worst_gain:.4}, |doffset| {worst_offset:.3}")
    })?;
    Ok(format!(
        "noise-free max error {worst_clean:.1e}; sigma=1 worst |dgain| {worst_gain:.4}, |doffset| {worst_offset:.3}"
    ))
}

// ---------------------------------------------------------------------------
// Homography

type Mat3 = [[f64; 3]; 3];

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn apply(m: &Mat3, p: [f64; 2]) -> [f64; 2] {
    let v: [f64; 3] = std::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2]);
    [v[0] / v[2], v[1] / v[2]]
}

/// Similarity about the image center followed by a projective tilt.
fn random_warp(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Mat3 {
    let theta: f64 = rng.random_range(-0.15..0.15);
    let s: f64 = rng.random_range(0.9..1.1);
    let (tx, ty): (f64, f64) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (c, sn) = (s * theta.cos(), s * theta.sin());
    let sim = [[c, -sn, cx - c * cx + sn * cy + tx], [sn, c, cy - sn * cx - c * cy + ty], [0.0, 0.0, 1.0]];
    let tilt = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [rng.random_range(-2e-4..2e-4), rng.random_range(-2e-4..2e-4), 1.0]];
    mul(&tilt, &sim)
}

fn homography_robustness() -> Outcome {
    let (w, h) = (640.0, 480.0);
    let mut good = 0;
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let truth = random_warp(&mut rng, w, h);
        let mut matches: Vec<Correspondence> = (0..100)
            .map(|_| {
                let src = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
                Correspondence { src, dst: apply(&truth, src), score: 1.0 }
            })
            .collect();
        for m in matches.iter_mut().take(30) {
            m.dst = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
        }
        let err = match estimate_homography(&matches, trial) {
            Ok(est) => {
                let m = est.matrix();
                let em: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
                [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]]
                    .iter()
                    .map(|&c| {
                        let (a, b) = (apply(&em, c), apply(&truth, c));
                        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
                    })
                    .fold(0.0, f64::max)
            }
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(err);
        if err < 0.5 {
            good += 1;
        }
    }
    check(good >= 99, || format!("{good}/100 trials under 0.5 px (worst {worst:.3})"))?;
    Ok(format!("{good}/100 trials under 0.5 px, worst corner error {worst:.2e} px"))
}

// ---------------------------------------------------------------------------
// Tracking

fn track_association() -> Outcome {
    let ds = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    check(ds.frames.len() == 27 && ds.truth.berries.len() == 14 && ds.config.mask_jitter == 2, || {
        "default synth is not 14 x 27 with 2-px jitter".into()
    })?;
    let frames: Vec<TrackFrame> = ds
        .frames
        .iter()
        .map(|f| TrackFrame {
            session_id: f.session_id.clone(),
            capture_date: f.capture_date.clone(),
            mask_ref: f.session_id.clone(),
            masks: f.masks.clone(),
        })
        .collect();
    let set = associate(&frames).map_err(|e| e.to_string())?;
    let (mut agree, mut total) = (0usize, 0usize);
    for track in &set.tracks {
        let seed_id = track.entries[0].instance_id;
        let berry = ds.truth.frames[0].berries.iter().position(|b| b.instance_id == seed_id).unwrap();
        for e in &track.entries {
            total += 1;
            if ds.truth.frames[e.frame_index].berries[berry].instance_id == e.instance_id {
                agree += 1;
            }
        }
    }
    check(set.tracks.len() == 14 && total == 14 * 27 && agree == total, || {
        format!("{} tracks, {agree}/{total} entries agree (expected 14 tracks, 378 entries)", set.tracks.len())
    })?;
    Ok(format!("{agree}/{} berry-frames assigned to the true berry", 14 * 27))
}

// ---------------------------------------------------------------------------
// Albedo classes

const BLOBS: [[f64; 3]; 5] = [
    [40.0, 200.0, 40.0],
    [110.0, 190.0, 60.0],
    [170.0, 140.0, 50.0],
    [120.0, 20.0, 90.0],
    [200.0, 60.0, 60.0],
];

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
            .map(|(p, &l)| (0..3).map(|c| (p[c] - sums[l][c] / n[l] as f64).powi(2)).sum::<f64>())
            .sum()
    }
    fn rec(points: &[[f64; 3]], k: usize, labels: &mut Vec<usize>, used: usize, best: &mut f64) {
        if labels.len() == points.len() {
            if used == k {
                *best = best.min(cost(points, labels, k));
            }
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

fn albedo_classes() -> Outcome {
    for (i, a) in BLOBS.iter().enumerate() {
        for b in &BLOBS[i + 1..] {
            let d = (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt();
            check(d >= 60.0, || format!("blob centers only {d:.1} apart"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(0.0, 2.0).unwrap();
    let pixels: Vec<[f64; 3]> = BLOBS
        .iter()
        .flat_map(|c| (0..500).map(|_| c.map(|v| v + normal.sample(&mut rng))).collect::<Vec<_>>())
        .collect();
    let model = fit_color_classes(&pixels, 11).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (k, b) in BLOBS.iter().enumerate() {
        let c = model.centroid_of_class(k as u8 + 1).unwrap();
        for ch in 0..3 {
            worst = worst.max((c[ch] - b[ch]).abs());
        }
    }
    check(worst < 3.0, || format!("worst centroid error {worst:.3}"))?;

    // Berries painted with their class color, sigma = 5 pixel noise.
    let cfg = SynthConfig {
        class_palette: Some(BLOBS),
        noise_sigma: 5.0,
        mask_jitter: 0,
        gain_range: [1.0, 1.0],
        offset_range: [0.0, 0.0],
        max_translation: 0.0,
        max_rotation_deg: 0.0,
        max_perspective: 0.0,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg).map_err(|e| e.to_string())?;
    let berry_pixels = |f: &ripelab_core::synth::SynthFrame, id: u32| -> Vec<[f64; 3]> {
        f.masks.get(id).unwrap().pixels().map(|(r, c)| f.image.get(c as usize, r as usize).map(f64::from)).collect()
    };
    let all: Vec<[f64; 3]> = ds
        .frames
        .iter()
        .flat_map(|f| f.masks.instances.iter().flat_map(|m| berry_pixels(f, m.id)))
        .collect();
    let synth_model = fit_color_classes(&all, 3).map_err(|e| e.to_string())?;
    let (mut agree, mut total) = (0, 0);
    for (f, t) in ds.frames.iter().zip(&ds.truth.frames) {
        for b in &t.berries {
            total += 1;
            if label_berry(&berry_pixels(f, b.instance_id), &synth_model).map_err(|e| e.to_string())? == b.class {
                agree += 1;
            }
        }
    }
    check(agree == total, || format!("labeling agreement {agree}/{total}"))?;

    let vals = [[12.0, 180.0, 40.0], [95.0, 130.0, 35.0], [160.0, 90.0, 50.0], [150.0, 30.0, 45.0], [200.0, 40.0, 60.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let twelve: Vec<[f64; 3]> = (0..12).map(|i| vals[i % 5].map(|v| v + rng.random_range(-8.0..8.0))).collect();
    let oracle = brute_force_objective(&twelve, 5);
    let km = kmeans(&twelve, 5, 0, &KMeansParams::default()).map_err(|e| e.to_string())?;
    check((km.objective - oracle).abs() < 1e-9, || format!("k-means objective {} vs brute force {oracle}", km.objective))?;
    Ok(format!(
        "centroid error {worst:.2}, labels {agree}/{total}, 12-pixel objective {:.6} = brute force",
        km.objective
    ))
}

// ---------------------------------------------------------------------------
// UMAP

fn umap_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|k| (0..64).map(|d| if d == k { 10.0 / std::f64::consts::SQRT_2 } else { 0.0 }).collect())
        .collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..126 {
            data.push(c.iter().map(|v| v + normal.sample(&mut rng)).collect::<Vec<f64>>());
            labels.push(k);
        }
    }
    let params = UmapParams::default();
    let a = umap_embed(&data, &params, 17).map_err(|e| e.to_string())?;
    let b = umap_embed(&data, &params, 17).map_err(|e| e.to_string())?;
    let worst = a.calibration_residuals().into_iter().fold(0.0, f64::max);
    check(worst < 1e-3, || format!("max smooth-kNN residual {worst:e}"))?;
    let bitwise = a.points.len() == b.points.len()
        && a.points.iter().zip(&b.points).all(|(p, q)| p[0].to_bits() == q[0].to_bits() && p[1].to_bits() == q[1].to_bits());
    check(bitwise, || "two runs with the same seed differ".into())?;

    let mut cent = [[0.0f64; 2]; 3];
    for (p, &l) in a.points.iter().zip(&labels) {
        cent[l][0] += p[0] / 126.0;
        cent[l][1] += p[1] / 126.0;
    }
    let pure = a
        .points
        .iter()
        .zip(&labels)
        .filter(|(p, &l)| {
            let d = |c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            (0..3).all(|o| o == l || d(&cent[l]) < d(&cent[o]))
        })
        .count();
    check(pure * 100 >= 95 * 378, || format!("purity {pure}/378"))?;
    Ok(format!("N=378: max residual {worst:.1e}, purity {pure}/378, bitwise reproducible"))
}

// ---------------------------------------------------------------------------
// End-to-end ripeness

fn end_to_end_ripeness() -> Outcome {
    let ds = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let states = ds.truth.states();
    let linear = synth_features(&states, 32, FeatureMode::Linear, 0.01, 1).map_err(|e| e.to_string())?;
    let scrambled = synth_features(&states, 32, FeatureMode::Scrambled, 0.01, 1).map_err(|e| e.to_string())?;
    let params = UmapParams::default();
    let good = embed_records(&linear, &params, 5).map_err(|e| e.to_string())?;
    let times: Vec<f64> = good.keys.iter().map(|k| k.1 as f64).collect();
    let axis = fit_ripeness_axis(&good.model.points, &times).map_err(|e| e.to_string())?;
    let mut rhos = Vec::new();
    for b in 1..=14u32 {
        let (mut r, mut s) = (Vec::new(), Vec::new());
        for (k, p) in good.keys.iter().zip(&good.model.points).filter(|(k, _)| k.0 == b) {
            r.push(ripeness_value(&axis, *p));
            s.push(states[b as usize - 1][k.1 as usize]);
        }
        rhos.push(spearman(&r, &s).unwrap_or(0.0));
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    check(mean >= 0.9, || format!("mean per-berry Spearman {mean:.3}"))?;

    let bad = embed_records(&scrambled, &params, 5).map_err(|e| e.to_string())?;
    let report = select_extractor_report(&[
        ExtractorEmbedding { name: "scrambled".into(), keys: bad.keys, points: bad.model.points },
        ExtractorEmbedding { name: "linear".into(), keys: good.keys, points: good.model.points },
    ])
    .map_err(|e| e.to_string())?;
    check(report[0].name == "linear", || format!("ranking {:?}", report.iter().map(|s| &s.name).collect::<Vec<_>>()))?;
    Ok(format!(
        "mean Spearman {mean:.3} over 14 berries; linear monotonicity {:.3} ranks above scrambled {:.3}",
        report[0].monotonicity, report[1].monotonicity
    ))
}

// ---------------------------------------------------------------------------
// Full run determinism

fn ripelab(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ripelab")).args(args).current_dir(cwd).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("ripelab {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn bundle(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let p = e.map_err(|e| e.to_string())?.path();
            let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
            Ok((p.file_name().unwrap().to_string_lossy().into_owned(), bytes))
        })
        .collect::<Result<_, String>>()?;
    files.sort();
    Ok(files)
}

fn run_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bundles = Vec::new();
    for name in ["first", "second"] {
        let dir = tmp.path().join(name);
        ripelab(&["synth", "--out-dir", dir.to_str().unwrap()], tmp.path())?;
        ripelab(&["run", "--config", "pipeline.json"], &dir)?;
        bundles.push(bundle(&dir.join("out/report"))?);
    }
    let names: Vec<&str> = bundles[0].iter().map(|(n, _)| n.as_str()).collect();
    for required in ["table.csv", "histograms.svg", "embedding.svg", "ripeness.svg"] {
        check(names.contains(&required), || format!("bundle lacks {required}"))?;
    }
    check(bundles[0] == bundles[1], || "bundles differ between runs".into())?;
    let before = bundles[0].clone();
    ripelab(&["run", "--config", "pipeline.json"], &tmp.path().join("first"))?;
    check(bundle(&tmp.path().join("first/out/report"))? == before, || "rerun changed the bundle".into())?;
    Ok(format!("{} files byte-identical across two runs and a cached rerun", names.len()))
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("ripeness-ratio arithmetic", Duration::from_secs(1), ratio_arithmetic),
        ("risk flag", Duration::from_secs(1), risk_flags),
        ("calibration recovery", Duration::from_secs(5), calibration_recovery),
        ("homography robustness", Duration::from_secs(30), homography_robustness),
        ("track association", Duration::from_secs(30), track_association),
        ("albedo classes", Duration::from_secs(30), albedo_classes),
        ("UMAP properties", Duration::from_secs(60), umap_properties),
        ("end-to-end ripeness", Duration::from_secs(60), end_to_end_ripeness),
        ("determinism and idempotence", Duration::from_secs(120), run_determinism),
    ];
    let mut failed = 0;
    for (name, budget, f) in criteria {
        let start = Instant::now();
        let result = f();
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{elapsed:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{elapsed:.2?}]");
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
