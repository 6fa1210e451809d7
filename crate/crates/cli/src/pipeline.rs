//! `run`: every stage in dependency order, skipping stages whose inputs and
//! outputs are unchanged since the last run.
//!
//! Each stage leaves a stamp in `<out>/.stamps/<stage>.json` holding a hash
//! of its parameters and input file contents plus a hash per output file.
//! A stage is skipped when the input hash matches and every recorded output
//! still has its recorded hash. Hashes cover contents, never timestamps.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ripelab_core::model::{load_series, write_json};
use ripelab_core::{FeatureRecord, Series, SessionManifest};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult, StageContext};
use crate::report::{embedding_svg, histograms_svg, ripeness_svg};
use crate::stages::{self, *};

/// Files making up the report bundle, relative to `<out>/report`.
pub const BUNDLE_FILES: [&str; 5] = ["table.csv", "risk.csv", "histograms.svg", "embedding.svg", "ripeness.svg"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub stages: Vec<StageOutcome>,
    pub bundle_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    input_hash: String,
    outputs: BTreeMap<String, String>,
}

fn file_hash(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| hex::encode(Sha256::digest(&b)))
}

struct Runner<'a> {
    out: &'a Path,
    outcomes: Vec<StageOutcome>,
}

impl Runner<'_> {
    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.out.join(".stamps").join(format!("{stage}.json"))
    }

    fn input_hash(&self, stage: &'static str, params: &serde_json::Value, inputs: &[PathBuf]) -> CliResult<String> {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update(params.to_string().as_bytes());
        for p in inputs {
            let bytes = fs::read(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CliError::MissingInput { stage, path: p.clone() },
                _ => CliError::Stage { stage, source: ripelab_core::Error::Io { path: p.clone(), source: e } },
            })?;
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(hex::encode(h.finalize()))
    }

    fn up_to_date(&self, stage: &str, input_hash: &str) -> bool {
        let Ok(text) = fs::read_to_string(self.stamp_path(stage)) else { return false };
        let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else { return false };
        stamp.input_hash == input_hash
            && stamp.outputs.iter().all(|(rel, hash)| file_hash(&self.out.join(rel)).as_deref() == Some(hash.as_str()))
    }

    fn run<F>(&mut self, stage: &'static str, params: serde_json::Value, inputs: &[PathBuf], body: F) -> CliResult<()>
    where
        F: FnOnce() -> CliResult<Vec<PathBuf>>,
    {
        let input_hash = self.input_hash(stage, &params, inputs)?;
        if self.up_to_date(stage, &input_hash) {
            self.outcomes.push(StageOutcome { stage, skipped: true });
            return Ok(());
        }
        let stamp_path = self.stamp_path(stage);
        // A failed run must not leave a stale stamp behind.
        let _ = fs::remove_file(&stamp_path);
        let written = body()?;
        let mut outputs = BTreeMap::new();
        for p in written {
            let rel = p.strip_prefix(self.out).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            let hash = file_hash(&p).ok_or_else(|| CliError::MissingInput { stage, path: p.clone() })?;
            outputs.insert(rel, hash);
        }
        create_dir(stage, stamp_path.parent().expect("stamp dir"))?;
        write_json(&stamp_path, &Stamp { input_hash, outputs }).stage(stage)?;
        self.outcomes.push(StageOutcome { stage, skipped: false });
        Ok(())
    }
}

fn params(meta: &Meta, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({ "provenance": meta.provenance, "params": extra })
}

fn load_all_series(cfg: &PipelineConfig) -> CliResult<Vec<Series>> {
    if cfg.series.is_empty() {
        return Err(CliError::Validation("config lists no series".into()));
    }
    let series: Vec<Series> = cfg
        .series
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(CliError::MissingInput { stage: "calibrate", path: p.clone() });
            }
            load_series(p).stage("calibrate")
        })
        .collect::<CliResult<_>>()?;
    let mut seen = HashSet::new();
    for m in series.iter().flat_map(|s| &s.sessions) {
        if !seen.insert(m.session_id.as_str()) {
            return Err(CliError::Validation(format!("session id {:?} appears more than once", m.session_id)));
        }
    }
    Ok(series)
}

fn write_tracks_file(path: &Path, file: &TracksFile) -> CliResult<()> {
    write_json(path, file).stage("track")
}

pub fn run_pipeline(cfg: &PipelineConfig) -> CliResult<RunSummary> {
    cfg.validate()?;
    let series = load_all_series(cfg)?;
    let out = cfg.out_dir.as_path();
    create_dir("calibrate", out)?;
    let meta = Meta::new(cfg.provenance());
    let seeds = cfg.seeds();
    let sessions: Vec<&SessionManifest> = series.iter().flat_map(|s| &s.sessions).collect();
    let mut runner = Runner { out, outcomes: Vec::new() };

    let calibrated = |m: &SessionManifest| out.join("calibrated").join(format!("{}.png", m.session_id));
    let registered = |m: &SessionManifest| out.join("registered").join(format!("{}.png", m.session_id));
    let valid = |m: &SessionManifest| out.join("registered").join(format!("{}_valid.png", m.session_id));

    // calibrate
    let mut inputs = cfg.series.clone();
    for m in &sessions {
        inputs.push(stages::session_frame("calibrate", m)?.to_path_buf());
    }
    runner.run("calibrate", params(&meta, serde_json::Value::Null), &inputs, || {
        calibrate_sessions(&sessions, out, &meta)
    })?;

    // register
    let mut inputs = cfg.series.clone();
    inputs.extend(sessions.iter().map(|m| calibrated(m)));
    let reg_params = serde_json::json!({ "register": cfg.register, "seed": seeds.register });
    runner.run("register", params(&meta, reg_params), &inputs, || {
        let mut all = Vec::new();
        for s in &series {
            all.extend(register_series(
                s,
                |m| Ok(calibrated(m)),
                &cfg.register,
                seeds.register,
                None,
                &out.join("registered"),
                &meta,
            )?);
        }
        Ok(all)
    })?;

    // track
    let masks_dir = cfg
        .masks_dir
        .clone()
        .ok_or_else(|| CliError::MissingInput { stage: "track", path: PathBuf::from("<masks_dir not configured>") })?;
    let mask_of: HashMap<&str, PathBuf> = sessions
        .iter()
        .map(|m| Ok((m.session_id.as_str(), mask_path("track", &masks_dir, &m.session_id)?)))
        .collect::<CliResult<_>>()?;
    let tracks_path = out.join("tracks.json");
    let mut inputs = cfg.series.clone();
    inputs.extend(sessions.iter().map(|m| mask_of[m.session_id.as_str()].clone()));
    inputs.extend(sessions.iter().map(|m| registered(m)));
    runner.run("track", params(&meta, serde_json::to_value(&cfg.track).expect("serializes")), &inputs, || {
        let per: Vec<SeriesTracks> = series
            .par_iter()
            .map(|s| {
                let frames: Vec<TrackInput> = s
                    .sessions
                    .iter()
                    .map(|m| TrackInput {
                        session_id: m.session_id.clone(),
                        capture_date: m.capture_date.clone(),
                        mask_path: mask_of[m.session_id.as_str()].clone(),
                        image: Some(registered(m)),
                    })
                    .collect();
                Ok(SeriesTracks {
                    series_id: s.series_id.clone(),
                    bog_id: s.sessions[0].bog_id.clone(),
                    tracks: track_frames(&frames, &cfg.track)?,
                })
            })
            .collect::<CliResult<_>>()?;
        write_tracks_file(&tracks_path, &TracksFile { meta: meta.clone(), series: per })?;
        Ok(vec![tracks_path.clone()])
    })?;

    // classes
    let histograms_path = out.join("histograms.json");
    let mut inputs = cfg.series.clone();
    inputs.push(tracks_path.clone());
    for m in &sessions {
        inputs.push(mask_of[m.session_id.as_str()].clone());
        inputs.push(registered(m));
        inputs.push(valid(m));
    }
    let cls_params = serde_json::json!({ "classes": cfg.classes, "seed": seeds.classes });
    runner.run("classes", params(&meta, cls_params), &inputs, || {
        let frames: Vec<ClassFrame> = sessions
            .par_iter()
            .map(|m| ClassFrame::load(m, &mask_of[m.session_id.as_str()], &registered(m), Some(&valid(m))))
            .collect::<CliResult<_>>()?;
        let (model, sampled) = fit_classes(&frames, &cfg.classes, seeds.classes)?;
        let (labels, histograms) = apply_classes(&frames, &model, cfg.classes.erode)?;
        let dir = out.join("classes");
        create_dir("classes", &dir)?;
        let model_path = dir.join("model.json");
        write_json(&model_path, &ClassModelFile { model, seed: seeds.classes, sampled_pixels: sampled, meta: meta.clone() })
            .stage("classes")?;
        let labels_path = dir.join("labels.csv");
        write_text("classes", &labels_path, &labels_csv(&labels, &meta))?;
        write_json(&histograms_path, &HistogramsFile { meta: meta.clone(), histograms }).stage("classes")?;

        let mut tracks: TracksFile = read_json("classes", &tracks_path)?;
        let lookup: HashMap<(&str, u32), u8> =
            labels.iter().map(|l| ((l.session_id.as_str(), l.instance_id), l.class)).collect();
        for t in tracks.series.iter_mut().flat_map(|s| s.tracks.tracks.iter_mut()) {
            for e in &mut t.entries {
                e.class_label = lookup.get(&(e.session_id.as_str(), e.instance_id)).copied();
            }
        }
        let labeled = dir.join("tracks_labeled.json");
        write_json(&labeled, &tracks).stage("classes")?;
        Ok(vec![model_path, labels_path, histograms_path.clone(), labeled])
    })?;

    // ratio
    let table_path = out.join("table.csv");
    let risk_path = out.join("risk.csv");
    runner.run(
        "ratio",
        params(&meta, serde_json::json!({ "threshold": cfg.threshold })),
        std::slice::from_ref(&histograms_path),
        || {
            let h: HistogramsFile = read_json("ratio", &histograms_path)?;
            let (table, flags) = ratio_table(&h.histograms, None, cfg.threshold)?;
            write_text("ratio", &table_path, &table.to_csv(Some(&meta.provenance)))?;
            write_text("ratio", &risk_path, &risk_csv(&flags, cfg.threshold, &meta))?;
            Ok(vec![table_path.clone(), risk_path.clone()])
        },
    )?;

    // embed
    let embedding_path = out.join("embedding.csv");
    let extractors_path = out.join("extractors.csv");
    let inputs: Vec<PathBuf> = if cfg.features.is_empty() {
        vec![tracks_path.clone()]
    } else {
        cfg.features.iter().map(|f| f.path.clone()).collect()
    };
    let emb_params = serde_json::json!({
        "umap": cfg.umap,
        "seed": seeds.embed,
        "names": cfg.features.iter().map(|f| f.name.as_str()).collect::<Vec<_>>(),
    });
    runner.run("embed", params(&meta, emb_params), &inputs, || {
        let sources: Vec<(String, Vec<FeatureRecord>)> = if cfg.features.is_empty() {
            let tracks: TracksFile = read_json("embed", &tracks_path)?;
            vec![("mean_rgb".to_string(), track_color_features(&tracks))]
        } else {
            cfg.features
                .iter()
                .map(|f| Ok((f.name.clone(), load_feature_file("embed", &f.path)?)))
                .collect::<CliResult<_>>()?
        };
        let (rows, axis, k) = embed_features(&sources[0].1, &cfg.umap, seeds.embed)?;
        write_text("embed", &embedding_path, &embedding_csv(&rows, &meta))?;
        let axis_path = out.join("axis.json");
        write_json(&axis_path, &AxisFile { axis, n_neighbors: k, seed: seeds.embed, meta: meta.clone() }).stage("embed")?;
        let mut written = vec![embedding_path.clone(), axis_path];
        if sources.len() >= 2 {
            let scores = compare_extractors(&sources, &cfg.umap, seeds.embed)?;
            write_text("embed", &extractors_path, &extractors_csv(&scores, &meta))?;
            written.push(extractors_path.clone());
        }
        Ok(written)
    })?;

    // report
    let bundle = out.join("report");
    let mut inputs = cfg.series.clone();
    inputs.extend([table_path.clone(), risk_path.clone(), histograms_path.clone(), embedding_path.clone()]);
    if cfg.features.len() >= 2 {
        inputs.push(extractors_path.clone());
    }
    runner.run("report", params(&meta, serde_json::Value::Null), &inputs, || {
        create_dir("report", &bundle)?;
        let h: HistogramsFile = read_json("report", &histograms_path)?;
        let rows = parse_embedding_csv("report", &read_text("report", &embedding_path)?)?;
        let labels: Vec<String> = series[0].sessions.iter().map(|m| m.capture_date.clone()).collect();
        let mut written = Vec::new();
        for (src, name) in [(&table_path, "table.csv"), (&risk_path, "risk.csv")] {
            let dst = bundle.join(name);
            write_text("report", &dst, &read_text("report", src)?)?;
            written.push(dst);
        }
        for (name, svg) in [
            ("histograms.svg", histograms_svg(&h.histograms, &meta.provenance)),
            ("embedding.svg", embedding_svg(&rows, &meta.provenance)),
            ("ripeness.svg", ripeness_svg(&rows, &labels, &meta.provenance)),
        ] {
            let dst = bundle.join(name);
            write_text("report", &dst, &svg)?;
            written.push(dst);
        }
        if cfg.features.len() >= 2 {
            let dst = bundle.join("extractors.csv");
            write_text("report", &dst, &read_text("report", &extractors_path)?)?;
            written.push(dst);
        }
        Ok(written)
    })?;

    Ok(RunSummary { stages: runner.outcomes, bundle_dir: bundle })
}
