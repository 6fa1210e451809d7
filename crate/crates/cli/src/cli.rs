//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ripelab_core::model::{load_manifest, load_series, save_features, write_json};
use ripelab_core::synth::{generate, synth_features, write_dataset, FeatureMode, SynthConfig};
use ripelab_core::{Series, UmapParams};

use crate::config::{FeatureSource, PipelineConfig};
use crate::error::{CliError, CliResult, StageContext, EXIT_VALIDATION};
use crate::pipeline::run_pipeline;
use crate::report::{embedding_svg, histograms_svg, ripeness_svg};
use crate::stages::*;

#[derive(Debug, Parser)]
#[command(name = "ripelab", version, about = "Ripening analysis for time-series crop imagery")]
pub struct Cli {
    /// Seed for every stochastic step (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-session parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (overrides `out_dir` in the pipeline config).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Pipeline config JSON (for `synth`: the generator config).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic bog with ground truth, feature files and a pipeline config.
    Synth(SynthArgs),
    /// Fit and apply gray-card radiometric calibration for one session.
    Calibrate(CalibrateArgs),
    /// Register every frame of a series to its first frame.
    Register(RegisterArgs),
    /// Associate per-frame instance masks into berry tracks.
    Track(TrackArgs),
    /// Fit or apply the five-class albedo model.
    #[command(subcommand)]
    Classes(ClassesCommand),
    /// Ripeness-ratio table and risk flags from class histograms.
    Ratio(RatioArgs),
    /// Embed feature vectors and derive ripeness, or compare extractors.
    Embed(EmbedArgs),
    /// Render SVG charts from histogram and embedding files.
    Report(ReportArgs),
    /// Run every stage, skipping stages that are up to date.
    Run,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dimension of the generated feature vectors.
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    /// Gaussian noise added to each feature component.
    #[arg(long, default_value_t = 0.01)]
    pub feature_noise: f64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub series: PathBuf,
    /// JSON object mapping session ids to precomputed correspondences.
    #[arg(long)]
    pub correspondences: Option<PathBuf>,
    /// Compose consecutive-frame homographies instead of direct matching.
    #[arg(long)]
    pub chain: bool,
    #[arg(long)]
    pub inlier_threshold: Option<f64>,
    #[arg(long)]
    pub ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub masks_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Orders frames by capture date; without it frames are ordered by file
    /// name and the file stem stands in for the date.
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// Directory of `<session>.png` images for per-entry mean colors.
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long)]
    pub max_gap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FrameSource {
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub masks_dir: PathBuf,
    /// Directory of `<session>.png` (and optional `<session>_valid.png`)
    /// images; defaults to each session's first manifest image.
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    /// Erode masks by one pixel before collecting berry pixels.
    #[arg(long)]
    pub erode: bool,
}

#[derive(Debug, Subcommand)]
pub enum ClassesCommand {
    Fit {
        #[command(flatten)]
        frames: FrameSource,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sample_cap: Option<usize>,
        /// Class per cluster, e.g. `2,1,3,5,4`, replacing the redness order.
        #[arg(long, value_delimiter = ',')]
        class_override: Option<Vec<u8>>,
    },
    Apply {
        #[command(flatten)]
        frames: FrameSource,
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RatioArgs {
    #[arg(long)]
    pub histograms: PathBuf,
    #[arg(long)]
    pub bog: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true)]
pub struct EmbedArgs {
    #[command(subcommand)]
    pub compare: Option<EmbedCommand>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub umap: UmapArgs,
}

#[derive(Debug, Args, Clone)]
pub struct UmapArgs {
    #[arg(long)]
    pub n_neighbors: Option<usize>,
    #[arg(long)]
    pub min_dist: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum EmbedCommand {
    /// Rank feature extractors by time-monotonicity and linearity.
    Compare {
        #[arg(long, num_args = 2.., required = true)]
        features: Vec<PathBuf>,
        /// Extractor names (default: file stems).
        #[arg(long, num_args = 1..)]
        names: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        umap: UmapArgs,
    },
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub histograms: PathBuf,
    #[arg(long)]
    pub embedding: PathBuf,
    /// Series whose capture dates label the ripeness chart.
    #[arg(long)]
    pub series: Option<PathBuf>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn base_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> CliResult<&Path> {
    cli.out_dir.as_deref().ok_or_else(|| CliError::Validation("--out-dir is required for this command".into()))
}

fn umap_params(base: &UmapParams, a: &UmapArgs) -> UmapParams {
    UmapParams {
        n_neighbors: a.n_neighbors.or(base.n_neighbors),
        min_dist: a.min_dist.unwrap_or(base.min_dist),
        n_epochs: a.epochs.unwrap_or(base.n_epochs),
        ..base.clone()
    }
}

fn ensure_parent(stage: &'static str, path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(stage, p),
        _ => Ok(()),
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Run => {
            if cli.config.is_none() {
                return Err(CliError::Validation("run needs --config".into()));
            }
            let cfg = base_config(cli)?;
            let summary = run_pipeline(&cfg)?;
            for s in &summary.stages {
                println!("{:<10} {}", s.stage, if s.skipped { "up to date" } else { "done" });
            }
            println!("report: {}", summary.bundle_dir.display());
            Ok(())
        }
        Command::Calibrate(a) => {
            let cfg = base_config(cli)?;
            let m = load_manifest(&a.manifest).stage("calibrate")?;
            let written = calibrate_manifest(&m, out_dir(cli)?, &Meta::new(cfg.provenance()))?;
            println!("wrote {} files", written.len());
            Ok(())
        }
        Command::Register(a) => {
            let mut cfg = base_config(cli)?;
            if let Some(t) = a.inlier_threshold {
                cfg.register.inlier_threshold = t;
            }
            if let Some(r) = a.ratio {
                cfg.register.ratio = r;
            }
            cfg.register.chain |= a.chain;
            cfg.validate()?;
            let series = load_series(&a.series).stage("register")?;
            let corr: Option<CorrespondenceFile> = match &a.correspondences {
                Some(p) => Some(read_json("register", p)?),
                None => None,
            };
            let meta = Meta::new(cfg.provenance());
            register_series(
                &series,
                |m| Ok(session_frame("register", m)?.to_path_buf()),
                &cfg.register,
                cfg.seeds().register,
                corr.as_ref(),
                out_dir(cli)?,
                &meta,
            )?;
            println!("registered {} frames", series.sessions.len());
            Ok(())
        }
        Command::Track(a) => track(cli, a),
        Command::Classes(c) => classes(cli, c),
        Command::Ratio(a) => {
            let cfg = base_config(cli)?;
            let threshold = a.threshold.unwrap_or(cfg.threshold);
            let h: HistogramsFile = read_json("ratio", &a.histograms)?;
            let (table, flags) = ratio_table(&h.histograms, a.bog.as_deref(), threshold)?;
            let meta = Meta::new(cfg.provenance());
            ensure_parent("ratio", &a.out)?;
            write_text("ratio", &a.out, &table.to_csv(Some(&meta.provenance)))?;
            for f in &flags {
                match &f.date {
                    Some(d) => println!("{}: ratio reaches {threshold} on {d}", f.bog_id),
                    None => println!("{}: ratio stays below {threshold}", f.bog_id),
                }
            }
            Ok(())
        }
        Command::Embed(a) => embed(cli, a),
        Command::Report(a) => {
            let cfg = base_config(cli)?;
            let dir = out_dir(cli)?;
            create_dir("report", dir)?;
            let meta = Meta::new(cfg.provenance());
            let h: HistogramsFile = read_json("report", &a.histograms)?;
            let rows = parse_embedding_csv("report", &read_text("report", &a.embedding)?)?;
            let labels: Vec<String> = match &a.series {
                Some(p) => load_series(p).stage("report")?.sessions.iter().map(|m| m.capture_date.clone()).collect(),
                None => Vec::new(),
            };
            write_text("report", &dir.join("histograms.svg"), &histograms_svg(&h.histograms, &meta.provenance))?;
            write_text("report", &dir.join("embedding.svg"), &embedding_svg(&rows, &meta.provenance))?;
            write_text("report", &dir.join("ripeness.svg"), &ripeness_svg(&rows, &labels, &meta.provenance))?;
            Ok(())
        }
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> CliResult<()> {
    let dir = out_dir(cli)?;
    let mut cfg: SynthConfig = match &cli.config {
        Some(p) => read_json("synth", p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ds = generate(&cfg).stage("synth")?;
    write_dataset(&ds, dir).stage("synth")?;
    let states = ds.truth.states();
    for (mode, name) in [(FeatureMode::Linear, "features_linear.csv"), (FeatureMode::Scrambled, "features_scrambled.csv")] {
        let recs = synth_features(&states, a.feature_dim, mode, a.feature_noise, cfg.seed).stage("synth")?;
        save_features(&recs, dir.join(name)).stage("synth")?;
    }
    let pipeline = PipelineConfig {
        series: vec!["series.json".into()],
        masks_dir: Some("masks".into()),
        features: vec![
            FeatureSource { name: "linear".into(), path: "features_linear.csv".into() },
            FeatureSource { name: "scrambled".into(), path: "features_scrambled.csv".into() },
        ],
        out_dir: "out".into(),
        seed: cfg.seed,
        ..Default::default()
    };
    write_json(&dir.join("pipeline.json"), &pipeline).stage("synth")?;
    println!("{} frames, {} berries -> {}", cfg.n_frames, ds.truth.berries.len(), dir.display());
    Ok(())
}

fn track(cli: &Cli, a: &TrackArgs) -> CliResult<()> {
    let mut cfg = base_config(cli)?;
    if let Some(t) = a.iou_threshold {
        cfg.track.iou_threshold = t;
    }
    if let Some(g) = a.max_gap {
        cfg.track.max_gap = g;
    }
    cfg.validate()?;
    let image = |sid: &str| a.images_dir.as_ref().map(|d| d.join(format!("{sid}.png")));
    let (series_id, bog_id, inputs) = match &a.series {
        Some(p) => {
            let s = load_series(p).stage("track")?;
            let inputs = s
                .sessions
                .iter()
                .map(|m| {
                    Ok(TrackInput {
                        session_id: m.session_id.clone(),
                        capture_date: m.capture_date.clone(),
                        mask_path: mask_path("track", &a.masks_dir, &m.session_id)?,
                        image: image(&m.session_id),
                    })
                })
                .collect::<CliResult<Vec<_>>>()?;
            (s.series_id.clone(), s.sessions[0].bog_id.clone(), inputs)
        }
        None => {
            let mut stems: Vec<(String, PathBuf)> = Vec::new();
            let entries = std::fs::read_dir(&a.masks_dir)
                .map_err(|_| CliError::MissingInput { stage: "track", path: a.masks_dir.clone() })?;
            for e in entries.flatten() {
                let p = e.path();
                let ext = p.extension().and_then(|x| x.to_str()).unwrap_or_default();
                if ext != "json" && ext != "png" {
                    continue;
                }
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                // A JSON mask wins over a PNG with the same stem.
                match stems.iter_mut().find(|(s, _)| *s == stem) {
                    Some(slot) if ext == "json" => slot.1 = p,
                    Some(_) => {}
                    None => stems.push((stem, p)),
                }
            }
            stems.sort();
            if stems.is_empty() {
                return Err(CliError::Validation(format!("no mask files in {}", a.masks_dir.display())));
            }
            let inputs = stems
                .into_iter()
                .map(|(stem, p)| TrackInput { session_id: stem.clone(), capture_date: stem.clone(), image: image(&stem), mask_path: p })
                .collect();
            (String::new(), String::new(), inputs)
        }
    };
    let tracks = track_frames(&inputs, &cfg.track)?;
    let n = tracks.tracks.len();
    let file = TracksFile {
        meta: Meta::new(cfg.provenance()),
        series: vec![SeriesTracks { series_id, bog_id, tracks }],
    };
    ensure_parent("track", &a.out)?;
    write_json(&a.out, &file).stage("track")?;
    println!("{n} tracks over {} frames", inputs.len());
    Ok(())
}

fn class_frames(f: &FrameSource) -> CliResult<(Series, Vec<ClassFrame>)> {
    let series = load_series(&f.series).stage("classes")?;
    let frames = series
        .sessions
        .iter()
        .map(|m| {
            let mask = mask_path("classes", &f.masks_dir, &m.session_id)?;
            let (image, valid) = match &f.images_dir {
                Some(d) => {
                    let v = d.join(format!("{}_valid.png", m.session_id));
                    (d.join(format!("{}.png", m.session_id)), v.exists().then_some(v))
                }
                None => (session_frame("classes", m)?.to_path_buf(), None),
            };
            ClassFrame::load(m, &mask, &image, valid.as_deref())
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((series, frames))
}

fn classes(cli: &Cli, c: &ClassesCommand) -> CliResult<()> {
    let mut cfg = base_config(cli)?;
    let meta = Meta::new(cfg.provenance());
    match c {
        ClassesCommand::Fit { frames, out, sample_cap, class_override } => {
            if let Some(cap) = sample_cap {
                cfg.classes.sample_cap = *cap;
            }
            if let Some(o) = class_override {
                let perm: [u8; 5] = o
                    .as_slice()
                    .try_into()
                    .map_err(|_| CliError::Validation(format!("--class-override needs 5 values, got {}", o.len())))?;
                cfg.classes.class_override = Some(perm);
            }
            cfg.classes.erode |= frames.erode;
            let (_, loaded) = class_frames(frames)?;
            let seed = cfg.seeds().classes;
            let (model, sampled) = fit_classes(&loaded, &cfg.classes, seed)?;
            ensure_parent("classes", out)?;
            write_json(out, &ClassModelFile { model, seed, sampled_pixels: sampled, meta: Meta::new(cfg.provenance()) })
                .stage("classes")?;
            println!("fitted 5 classes on {sampled} pixels");
            Ok(())
        }
        ClassesCommand::Apply { frames, model } => {
            let dir = out_dir(cli)?;
            create_dir("classes", dir)?;
            let m: ClassModelFile = read_json("classes", model)?;
            m.model.validate().stage("classes")?;
            let (_, loaded) = class_frames(frames)?;
            let (labels, histograms) = apply_classes(&loaded, &m.model, frames.erode)?;
            write_text("classes", &dir.join("labels.csv"), &labels_csv(&labels, &meta))?;
            write_json(&dir.join("histograms.json"), &HistogramsFile { meta, histograms }).stage("classes")?;
            println!("labeled {} berries", labels.len());
            Ok(())
        }
    }
}

fn embed(cli: &Cli, a: &EmbedArgs) -> CliResult<()> {
    let cfg = base_config(cli)?;
    let meta = Meta::new(cfg.provenance());
    let seed = cfg.seeds().embed;
    match &a.compare {
        Some(EmbedCommand::Compare { features, names, out, umap }) => {
            if !names.is_empty() && names.len() != features.len() {
                return Err(CliError::Validation(format!("{} names for {} feature files", names.len(), features.len())));
            }
            let sources = features
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let name = names.get(i).cloned().unwrap_or_else(|| {
                        p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("extractor{i}"))
                    });
                    Ok((name, load_feature_file("embed", p)?))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let scores = compare_extractors(&sources, &umap_params(&cfg.umap, umap), seed)?;
            let csv = extractors_csv(&scores, &meta);
            match out {
                Some(p) => {
                    ensure_parent("embed", p)?;
                    write_text("embed", p, &csv)?
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        None => {
            let (Some(features), Some(out)) = (&a.features, &a.out) else {
                return Err(CliError::Validation("embed needs --features and --out".into()));
            };
            let recs = load_feature_file("embed", features)?;
            let (rows, _, _) = embed_features(&recs, &umap_params(&cfg.umap, &a.umap), seed)?;
            ensure_parent("embed", out)?;
            write_text("embed", out, &embedding_csv(&rows, &meta))?;
            println!("embedded {} records", rows.len());
            Ok(())
        }
    }
}
