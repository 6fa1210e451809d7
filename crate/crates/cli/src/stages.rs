//! Stage implementations shared by the subcommands and `run`.
//!
//! Every function reads its inputs from disk and writes its artifacts under
//! an output directory, returning the paths it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ripelab_core::albedo::{class_histogram, fit_color_classes, label_berry, ripeness_ratio, risk_flag, sample_pixels};
use ripelab_core::calib::{apply_calibration, fit_calibration};
use ripelab_core::embed::{
    embed_records, fit_ripeness_axis, ripeness_value, select_extractor_report, ExtractorEmbedding, ExtractorScore,
};
use ripelab_core::model::{load_features, load_masks, write_json};
use ripelab_core::register::{detect_and_match, estimate_homography_with, warp_to_reference};
use ripelab_core::track::{associate_with, mean_rgb, AssociationParams, TrackFrame};
use ripelab_core::{
    CalibrationModel, ClassHistogram, ColorClassModel, Correspondence, FeatureRecord, Homography, InstanceMaskSet,
    RgbRaster, RipenessAxis, RipenessRatioTable, Series, SessionManifest, TrackSet, UmapParams,
};

use crate::config::{ClassesConfig, RegisterConfig, TrackConfig};
use crate::error::{CliError, CliResult, StageContext};

/// Provenance carried into artifact metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub provenance: String,
}

impl Meta {
    pub fn new(provenance: impl Into<String>) -> Self {
        Self { provenance: provenance.into() }
    }

    fn png(&self) -> [(&str, &str); 1] {
        [("ripelab", self.provenance.as_str())]
    }
}

pub(crate) fn create_dir(stage: &'static str, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Stage {
        stage,
        source: ripelab_core::Error::Io { path: dir.to_path_buf(), source: e },
    })
}

pub(crate) fn write_text(stage: &'static str, path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Stage {
        stage,
        source: ripelab_core::Error::Io { path: path.to_path_buf(), source: e },
    })
}

pub(crate) fn read_text(stage: &'static str, path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingInput { stage, path: path.to_path_buf() },
        _ => CliError::Stage { stage, source: ripelab_core::Error::Io { path: path.to_path_buf(), source: e } },
    })
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(stage: &'static str, path: &Path) -> CliResult<T> {
    let text = read_text(stage, path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("stage {stage}: {}: {e}", path.display())))
}

fn require(stage: &'static str, path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput { stage, path: path.to_path_buf() })
    }
}

/// The frame analysed for a session: its first image.
pub fn session_frame<'m>(stage: &'static str, m: &'m SessionManifest) -> CliResult<&'m Path> {
    m.image_paths
        .first()
        .map(PathBuf::as_path)
        .ok_or_else(|| CliError::Validation(format!("stage {stage}: session {} lists no images", m.session_id)))
}

// ---------------------------------------------------------------------------
// calibrate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub session_id: String,
    #[serde(flatten)]
    pub model: CalibrationModel,
    /// True when the manifest had no gray card and no correction was applied.
    pub identity: bool,
    pub meta: Meta,
}

pub fn calibration_model(m: &SessionManifest) -> CliResult<(CalibrationModel, bool)> {
    match &m.card_patches {
        Some(p) => Ok((fit_calibration(p).stage("calibrate")?, false)),
        None => Ok((CalibrationModel::identity(), true)),
    }
}

/// Corrects every image of one session. Writes `<stem>.png` per image and
/// `calibration.json` into `out_dir`.
pub fn calibrate_manifest(m: &SessionManifest, out_dir: &Path, meta: &Meta) -> CliResult<Vec<PathBuf>> {
    create_dir("calibrate", out_dir)?;
    let (model, identity) = calibration_model(m)?;
    let mut written = Vec::new();
    for img in &m.image_paths {
        let raster = RgbRaster::load(img).stage("calibrate")?;
        let stem = img.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let out = out_dir.join(format!("{stem}.png"));
        apply_calibration(&model, &raster).save_png(&out, &meta.png()).stage("calibrate")?;
        written.push(out);
    }
    let path = out_dir.join("calibration.json");
    write_json(&path, &CalibrationFile { session_id: m.session_id.clone(), model, identity, meta: meta.clone() })
        .stage("calibrate")?;
    written.push(path);
    Ok(written)
}

/// Calibrates each session's frame into `calibrated/<session>.png` and
/// `calibration/<session>.json`.
pub fn calibrate_sessions(sessions: &[&SessionManifest], out_dir: &Path, meta: &Meta) -> CliResult<Vec<PathBuf>> {
    let img_dir = out_dir.join("calibrated");
    let cal_dir = out_dir.join("calibration");
    create_dir("calibrate", &img_dir)?;
    create_dir("calibrate", &cal_dir)?;
    let per: Vec<CliResult<Vec<PathBuf>>> = sessions
        .par_iter()
        .map(|m| {
            let (model, identity) = calibration_model(m)?;
            let raster = RgbRaster::load(session_frame("calibrate", m)?).stage("calibrate")?;
            let img = img_dir.join(format!("{}.png", m.session_id));
            apply_calibration(&model, &raster).save_png(&img, &meta.png()).stage("calibrate")?;
            let cal = cal_dir.join(format!("{}.json", m.session_id));
            write_json(&cal, &CalibrationFile { session_id: m.session_id.clone(), model, identity, meta: meta.clone() })
                .stage("calibrate")?;
            Ok(vec![img, cal])
        })
        .collect();
    flatten(per)
}

fn flatten(per: Vec<CliResult<Vec<PathBuf>>>) -> CliResult<Vec<PathBuf>> {
    let mut all = Vec::new();
    for p in per {
        all.extend(p?);
    }
    Ok(all)
}

// ---------------------------------------------------------------------------
// register

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomographyFile {
    pub session_id: String,
    pub reference_session: String,
    /// Maps this frame's pixels to reference pixels, row-major.
    pub h: [f64; 9],
    pub inlier_count: usize,
    pub reprojection_rms: f64,
    pub seed: u64,
    pub meta: Meta,
}

/// Precomputed correspondences keyed by session id, bypassing the detector.
pub type CorrespondenceFile = BTreeMap<String, Vec<Correspondence>>;

fn estimate(
    moving: &RgbRaster,
    reference: &RgbRaster,
    supplied: Option<&Vec<Correspondence>>,
    params: &RegisterConfig,
    seed: u64,
) -> ripelab_core::Result<Homography> {
    let matches = match supplied {
        Some(m) => m.clone(),
        None => detect_and_match(&moving.to_gray(), &reference.to_gray(), &params.match_params())?,
    };
    Ok(estimate_homography_with(&matches, seed, &params.ransac_params())?.homography)
}

/// Registers every frame of a series to its first session. Images are read
/// from `frame_of(session)`. Writes `h_<session>.json`, `<session>.png`
/// (warped) and `<session>_valid.png` into `out_dir`.
pub fn register_series<F>(
    series: &Series,
    frame_of: F,
    params: &RegisterConfig,
    seed: u64,
    correspondences: Option<&CorrespondenceFile>,
    out_dir: &Path,
    meta: &Meta,
) -> CliResult<Vec<PathBuf>>
where
    F: Fn(&SessionManifest) -> CliResult<PathBuf> + Sync,
{
    create_dir("register", out_dir)?;
    let images: Vec<RgbRaster> = series
        .sessions
        .par_iter()
        .map(|m| RgbRaster::load(frame_of(m)?).stage("register"))
        .collect::<CliResult<_>>()?;
    let reference = &images[0];
    for (m, img) in series.sessions.iter().zip(&images) {
        if (img.width(), img.height()) != (reference.width(), reference.height()) {
            return Err(CliError::Validation(format!(
                "stage register: session {} is {}x{}, reference is {}x{}",
                m.session_id,
                img.width(),
                img.height(),
                reference.width(),
                reference.height()
            )));
        }
    }
    let frame_seed = |i: usize| seed.wrapping_add(i as u64);
    let supplied = |i: usize| correspondences.and_then(|c| c.get(&series.sessions[i].session_id));

    let homographies: Vec<Homography> = if params.chain {
        let mut hs = vec![Homography::identity()];
        for i in 1..images.len() {
            let step = estimate(&images[i], &images[i - 1], supplied(i), params, frame_seed(i))
                .map_err(|e| stage_for("register", &series.sessions[i], e))?;
            let mut total = step.then(&hs[i - 1]).stage("register")?;
            total.inlier_count = step.inlier_count;
            total.reprojection_rms = step.reprojection_rms;
            hs.push(total);
        }
        hs
    } else {
        (0..images.len())
            .into_par_iter()
            .map(|i| {
                if i == 0 {
                    return Ok(Homography::identity());
                }
                estimate(&images[i], reference, supplied(i), params, frame_seed(i))
                    .map_err(|e| stage_for("register", &series.sessions[i], e))
            })
            .collect::<CliResult<_>>()?
    };

    let per: Vec<CliResult<Vec<PathBuf>>> = (0..images.len())
        .into_par_iter()
        .map(|i| {
            let m = &series.sessions[i];
            let h = &homographies[i];
            let warped = warp_to_reference(&images[i], h).stage("register")?;
            let img = out_dir.join(format!("{}.png", m.session_id));
            warped.image.save_png(&img, &meta.png()).stage("register")?;
            let valid = out_dir.join(format!("{}_valid.png", m.session_id));
            warped.validity_raster().save_png(&valid, &meta.png()).stage("register")?;
            let json = out_dir.join(format!("h_{}.json", m.session_id));
            let file = HomographyFile {
                session_id: m.session_id.clone(),
                reference_session: series.sessions[0].session_id.clone(),
                h: h.h,
                inlier_count: h.inlier_count,
                reprojection_rms: h.reprojection_rms,
                seed: frame_seed(i),
                meta: meta.clone(),
            };
            write_json(&json, &file).stage("register")?;
            Ok(vec![json, img, valid])
        })
        .collect();
    flatten(per)
}

fn stage_for(stage: &'static str, m: &SessionManifest, e: ripelab_core::Error) -> CliError {
    let source = match e {
        ripelab_core::Error::InsufficientCorrespondences(n) => ripelab_core::Error::Estimation(format!(
            "session {}: {n} correspondences survived matching, at least 4 required",
            m.session_id
        )),
        ripelab_core::Error::Estimation(msg) => {
            ripelab_core::Error::Estimation(format!("session {}: {msg}", m.session_id))
        }
        other => other,
    };
    CliError::Stage { stage, source }
}

// ---------------------------------------------------------------------------
// track

/// `<dir>/<session>.json`, else `<dir>/<session>.png`.
pub fn mask_path(stage: &'static str, dir: &Path, session_id: &str) -> CliResult<PathBuf> {
    require(stage, dir)?;
    let json = dir.join(format!("{session_id}.json"));
    if json.exists() {
        return Ok(json);
    }
    let png = dir.join(format!("{session_id}.png"));
    require(stage, &png)?;
    Ok(png)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesTracks {
    pub series_id: String,
    pub bog_id: String,
    #[serde(flatten)]
    pub tracks: TrackSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TracksFile {
    pub meta: Meta,
    pub series: Vec<SeriesTracks>,
}

/// A frame to associate: masks plus the image used for mean colors.
pub struct TrackInput {
    pub session_id: String,
    pub capture_date: String,
    pub mask_path: PathBuf,
    pub image: Option<PathBuf>,
}

pub fn track_frames(inputs: &[TrackInput], params: &TrackConfig) -> CliResult<TrackSet> {
    let loaded: Vec<(TrackFrame, Option<RgbRaster>)> = inputs
        .par_iter()
        .map(|inp| {
            let masks = load_masks(&inp.mask_path).stage("track")?;
            let image = match &inp.image {
                Some(p) => Some(RgbRaster::load(p).stage("track")?),
                None => None,
            };
            let mask_ref = inp.mask_path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok((
                TrackFrame {
                    session_id: inp.session_id.clone(),
                    capture_date: inp.capture_date.clone(),
                    mask_ref,
                    masks,
                },
                image,
            ))
        })
        .collect::<CliResult<_>>()?;
    let frames: Vec<TrackFrame> = loaded.iter().map(|(f, _)| f.clone()).collect();
    let assoc = AssociationParams { iou_threshold: params.iou_threshold, max_gap: params.max_gap, spawn_tracks: false };
    let mut set = associate_with(&frames, &assoc).stage("track")?;
    for track in &mut set.tracks {
        for e in &mut track.entries {
            let (frame, image) = &loaded[e.frame_index];
            if let Some(img) = image {
                let mask = frame.masks.get(e.instance_id).expect("tracked instance exists");
                e.mean_rgb = Some(mean_rgb(img, mask).stage("track")?);
            }
        }
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// classes

/// Berry pixels of one frame, skipping pixels outside the warp's valid area.
pub struct ClassFrame {
    pub session_id: String,
    pub bog_id: String,
    pub capture_date: String,
    pub masks: InstanceMaskSet,
    pub image: RgbRaster,
    pub valid: Option<Vec<bool>>,
}

impl ClassFrame {
    pub fn load(m: &SessionManifest, mask: &Path, image: &Path, valid: Option<&Path>) -> CliResult<Self> {
        let image = RgbRaster::load(image).stage("classes")?;
        let valid = match valid {
            Some(p) => {
                let v = RgbRaster::load(p).stage("classes")?;
                Some(v.pixels().iter().map(|p| p[0] > 127.0).collect())
            }
            None => None,
        };
        Ok(Self {
            session_id: m.session_id.clone(),
            bog_id: m.bog_id.clone(),
            capture_date: m.capture_date.clone(),
            masks: load_masks(mask).stage("classes")?,
            image,
            valid,
        })
    }

    fn berry_pixels(&self, id: u32, erode: bool) -> Vec<[f64; 3]> {
        let Some(mask) = self.masks.get(id) else { return Vec::new() };
        let eroded;
        let mask = if erode {
            eroded = mask.eroded();
            &eroded
        } else {
            mask
        };
        let w = self.image.width();
        mask.pixels()
            .filter(|&(r, c)| (c as usize) < w && (r as usize) < self.image.height())
            .filter(|&(r, c)| self.valid.as_ref().is_none_or(|v| v[r as usize * w + c as usize]))
            .map(|(r, c)| self.image.get(c as usize, r as usize).map(f64::from))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassModelFile {
    #[serde(flatten)]
    pub model: ColorClassModel,
    pub seed: u64,
    pub sampled_pixels: usize,
    pub meta: Meta,
}

pub fn fit_classes(frames: &[ClassFrame], cfg: &ClassesConfig, seed: u64) -> CliResult<(ColorClassModel, usize)> {
    let pixels: Vec<[f64; 3]> = frames
        .iter()
        .flat_map(|f| f.masks.instances.iter().flat_map(|m| f.berry_pixels(m.id, cfg.erode)))
        .collect();
    let sample = sample_pixels(&pixels, cfg.sample_cap, seed);
    let mut model = fit_color_classes(&sample, seed).stage("classes")?;
    if let Some(perm) = cfg.class_override {
        model = model.with_override(perm).stage("classes")?;
    }
    Ok((model, sample.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BerryLabel {
    pub session_id: String,
    pub instance_id: u32,
    pub class: u8,
}

/// Labels every instance with at least one usable pixel and builds one
/// histogram per frame.
pub fn apply_classes(
    frames: &[ClassFrame],
    model: &ColorClassModel,
    erode: bool,
) -> CliResult<(Vec<BerryLabel>, Vec<ClassHistogram>)> {
    let per: Vec<CliResult<(Vec<BerryLabel>, ClassHistogram)>> = frames
        .par_iter()
        .map(|f| {
            let mut labels = Vec::new();
            for inst in &f.masks.instances {
                let px = f.berry_pixels(inst.id, erode);
                if px.is_empty() {
                    continue;
                }
                labels.push(BerryLabel {
                    session_id: f.session_id.clone(),
                    instance_id: inst.id,
                    class: label_berry(&px, model).stage("classes")?,
                });
            }
            let classes: Vec<u8> = labels.iter().map(|l| l.class).collect();
            let hist = class_histogram(&f.session_id, &f.bog_id, &f.capture_date, &classes).stage("classes")?;
            Ok((labels, hist))
        })
        .collect();
    let mut labels = Vec::new();
    let mut hists = Vec::new();
    for p in per {
        let (l, h) = p?;
        labels.extend(l);
        hists.push(h);
    }
    Ok((labels, hists))
}

pub fn labels_csv(labels: &[BerryLabel], meta: &Meta) -> String {
    let mut out = format!("# {}\nsession_id,instance_id,class\n", meta.provenance);
    for l in labels {
        out.push_str(&format!("{},{},{}\n", l.session_id, l.instance_id, l.class));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramsFile {
    pub meta: Meta,
    pub histograms: Vec<ClassHistogram>,
}

// ---------------------------------------------------------------------------
// ratio

#[derive(Debug, Clone, PartialEq)]
pub struct RiskFlag {
    pub bog_id: String,
    pub date: Option<String>,
}

/// Ratio rows per bog, in first-appearance order; `bog` restricts to one bog.
pub fn ratio_table(
    histograms: &[ClassHistogram],
    bog: Option<&str>,
    threshold: f64,
) -> CliResult<(RipenessRatioTable, Vec<RiskFlag>)> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_bog: BTreeMap<&str, Vec<ClassHistogram>> = BTreeMap::new();
    for h in histograms {
        if bog.is_some_and(|b| b != h.bog_id) {
            continue;
        }
        if !by_bog.contains_key(h.bog_id.as_str()) {
            order.push(&h.bog_id);
        }
        by_bog.entry(&h.bog_id).or_default().push(h.clone());
    }
    if order.is_empty() {
        return Err(CliError::Validation(match bog {
            Some(b) => format!("stage ratio: no histograms for bog {b:?}"),
            None => "stage ratio: no histograms".into(),
        }));
    }
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for b in order {
        let mut hs = by_bog.remove(b).expect("bog collected");
        hs.sort_by(|x, y| x.capture_date.cmp(&y.capture_date));
        let row = ripeness_ratio(&hs).stage("ratio")?;
        flags.push(RiskFlag { bog_id: row.bog_id.clone(), date: risk_flag(&row, threshold).map(str::to_string) });
        rows.push(row);
    }
    Ok((RipenessRatioTable::from_rows(rows), flags))
}

pub fn risk_csv(flags: &[RiskFlag], threshold: f64, meta: &Meta) -> String {
    let mut out = format!("# {}\nbog,threshold,first_date_at_or_above\n", meta.provenance);
    for f in flags {
        out.push_str(&format!("{},{threshold},{}\n", f.bog_id, f.date.as_deref().unwrap_or("")));
    }
    out
}

// ---------------------------------------------------------------------------
// embed

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub berry_id: u32,
    pub timepoint: u32,
    pub x: f64,
    pub y: f64,
    pub ripeness: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxisFile {
    #[serde(flatten)]
    pub axis: RipenessAxis,
    pub n_neighbors: usize,
    pub seed: u64,
    pub meta: Meta,
}

pub fn embed_features(
    records: &[FeatureRecord],
    params: &UmapParams,
    seed: u64,
) -> CliResult<(Vec<EmbeddingRow>, RipenessAxis, usize)> {
    let emb = embed_records(records, params, seed).stage("embed")?;
    let times: Vec<f64> = emb.keys.iter().map(|k| k.1 as f64).collect();
    let axis = fit_ripeness_axis(&emb.model.points, &times).stage("embed")?;
    let rows = emb
        .keys
        .iter()
        .zip(&emb.model.points)
        .map(|(k, p)| EmbeddingRow { berry_id: k.0, timepoint: k.1, x: p[0], y: p[1], ripeness: ripeness_value(&axis, *p) })
        .collect();
    Ok((rows, axis, emb.model.n_neighbors))
}

pub fn embedding_csv(rows: &[EmbeddingRow], meta: &Meta) -> String {
    let mut out = format!("# {}\nberry_id,timepoint,x,y,ripeness\n", meta.provenance);
    for r in rows {
        out.push_str(&format!("{},{},{:?},{:?},{:?}\n", r.berry_id, r.timepoint, r.x, r.y, r.ripeness));
    }
    out
}

pub fn parse_embedding_csv(stage: &'static str, text: &str) -> CliResult<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            if line.trim() != "berry_id,timepoint,x,y,ripeness" {
                return Err(CliError::Validation(format!("stage {stage}: unexpected embedding header {line:?}")));
            }
            continue;
        }
        let bad = || CliError::Validation(format!("stage {stage}: embedding line {}: {line:?}", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        rows.push(EmbeddingRow {
            berry_id: f[0].parse().map_err(|_| bad())?,
            timepoint: f[1].parse().map_err(|_| bad())?,
            x: f[2].parse().map_err(|_| bad())?,
            y: f[3].parse().map_err(|_| bad())?,
            ripeness: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Embeds each named feature set with the same parameters and ranks them.
pub fn compare_extractors(
    sources: &[(String, Vec<FeatureRecord>)],
    params: &UmapParams,
    seed: u64,
) -> CliResult<Vec<ExtractorScore>> {
    let embeddings: Vec<ExtractorEmbedding> = sources
        .par_iter()
        .map(|(name, recs)| {
            let e = embed_records(recs, params, seed).stage("embed")?;
            Ok(ExtractorEmbedding { name: name.clone(), keys: e.keys, points: e.model.points })
        })
        .collect::<CliResult<_>>()?;
    select_extractor_report(&embeddings).stage("embed")
}

pub fn extractors_csv(scores: &[ExtractorScore], meta: &Meta) -> String {
    let mut out = format!("# {}\nrank,name,monotonicity,linearity\n", meta.provenance);
    for s in scores {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", s.rank, s.name, s.monotonicity, s.linearity));
    }
    out
}

pub fn load_feature_file(stage: &'static str, path: &Path) -> CliResult<Vec<FeatureRecord>> {
    require(stage, path)?;
    load_features(path).stage(stage)
}

/// Tracked mean colors as feature vectors; berry ids are renumbered across
/// series so they stay unique.
pub fn track_color_features(tracks: &TracksFile) -> Vec<FeatureRecord> {
    let mut out = Vec::new();
    let mut next = 1u32;
    for s in &tracks.series {
        for t in &s.tracks.tracks {
            for e in &t.entries {
                if let Some(rgb) = e.mean_rgb {
                    out.push(FeatureRecord { berry_id: next, timepoint_index: e.frame_index as u32, vector: rgb.to_vec() });
                }
            }
            next += 1;
        }
    }
    out
}
