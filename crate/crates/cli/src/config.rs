//! Pipeline configuration and the hash stamped into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ripelab_core::albedo::DEFAULT_SAMPLE_CAP;
use ripelab_core::register::{MatchParams, RansacParams};
use ripelab_core::UmapParams;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSource {
    /// Extractor name shown in the comparison table.
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegisterConfig {
    pub inlier_threshold: f64,
    pub ratio: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    /// Compose consecutive-frame estimates instead of matching every frame
    /// against the reference directly.
    pub chain: bool,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        let r = RansacParams::default();
        Self {
            inlier_threshold: r.inlier_threshold,
            ratio: MatchParams::default().ratio,
            max_iterations: r.max_iterations,
            confidence: r.confidence,
            chain: false,
        }
    }
}

impl RegisterConfig {
    pub fn match_params(&self) -> MatchParams {
        MatchParams { ratio: self.ratio, ..MatchParams::default() }
    }

    pub fn ransac_params(&self) -> RansacParams {
        RansacParams {
            inlier_threshold: self.inlier_threshold,
            max_iterations: self.max_iterations,
            confidence: self.confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    pub iou_threshold: f64,
    pub max_gap: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.3, max_gap: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassesConfig {
    pub sample_cap: usize,
    /// Erode every mask by one pixel before collecting berry pixels.
    pub erode: bool,
    /// Human cluster-to-class mapping replacing the automatic redness order.
    pub class_override: Option<[u8; 5]>,
}

impl Default for ClassesConfig {
    fn default() -> Self {
        Self { sample_cap: DEFAULT_SAMPLE_CAP, erode: false, class_override: None }
    }
}

/// Per-stage seeds; unset stages use the global seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedOverrides {
    pub register: Option<u64>,
    pub classes: Option<u64>,
    pub embed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub register: u64,
    pub classes: u64,
    pub embed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Series manifests, one per bog.
    pub series: Vec<PathBuf>,
    /// Instance masks named `<session_id>.json` or `<session_id>.png`, in
    /// reference-frame coordinates.
    pub masks_dir: Option<PathBuf>,
    /// Feature CSVs; the first drives the ripeness axis. Without any, each
    /// berry's tracked mean color is used as its feature vector.
    pub features: Vec<FeatureSource>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub seeds: SeedOverrides,
    pub register: RegisterConfig,
    pub track: TrackConfig,
    pub classes: ClassesConfig,
    pub umap: UmapParams,
    /// Ripeness-ratio risk threshold.
    pub threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            series: Vec::new(),
            masks_dir: None,
            features: Vec::new(),
            out_dir: PathBuf::from("ripelab-out"),
            seed: 0,
            seeds: SeedOverrides::default(),
            register: RegisterConfig::default(),
            track: TrackConfig::default(),
            classes: ClassesConfig::default(),
            umap: UmapParams::default(),
            threshold: 0.6,
        }
    }
}

impl PipelineConfig {
    /// Reads a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.series.iter_mut().for_each(join);
        if let Some(m) = self.masks_dir.as_mut() {
            join(m);
        }
        self.features.iter_mut().for_each(|f| join(&mut f.path));
        join(&mut self.out_dir);
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            register: self.seeds.register.unwrap_or(self.seed),
            classes: self.seeds.classes.unwrap_or(self.seed),
            embed: self.seeds.embed.unwrap_or(self.seed),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(CliError::Validation(format!("threshold must be > 0, got {}", self.threshold)));
        }
        if !(self.track.iou_threshold > 0.0 && self.track.iou_threshold <= 1.0) {
            return Err(CliError::Validation("track.iou_threshold must be in (0, 1]".into()));
        }
        if !(self.register.inlier_threshold > 0.0) || !(self.register.ratio > 0.0 && self.register.ratio <= 1.0) {
            return Err(CliError::Validation("register.inlier_threshold must be > 0 and register.ratio in (0, 1]".into()));
        }
        let mut names: Vec<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Validation("feature source names must be unique".into()));
        }
        Ok(())
    }

    /// Hash of every parameter that affects results. Paths are left out so
    /// that the same inputs in another directory produce identical artifacts.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for key in ["series", "masks_dir", "out_dir"] {
            obj.remove(key);
        }
        if let Some(serde_json::Value::Array(fs)) = obj.get_mut("features") {
            for f in fs {
                if let Some(o) = f.as_object_mut() {
                    o.remove("path");
                }
            }
        }
        obj.insert("effective_seeds".into(), serde_json::to_value(self.seeds()).expect("seeds serialize"));
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(&digest[..8])
    }

    /// One-line provenance string embedded in CSV, SVG and PNG outputs.
    pub fn provenance(&self) -> String {
        let s = self.seeds();
        format!(
            "ripelab config={} seeds=register:{},classes:{},embed:{}",
            self.hash(),
            s.register,
            s.classes,
            s.embed
        )
    }
}
