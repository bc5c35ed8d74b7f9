//! Batch orchestration of the full pipeline: model building, fitting,
//! aggregation, synthetic data generation, training, evaluation, and a
//! latency benchmark. One TOML manifest configures every stage; all
//! randomness derives from its single top-level seed.
//!
//! ```
//! use evmorph::pipeline::{run_stage, PipelineManifest, Stage};
//! use evmorph::synth::SynthSpec;
//!
//! let dir = tempfile::tempdir().unwrap();
//! let mut manifest = PipelineManifest::default();
//! manifest.out_dir = dir.path().to_path_buf();
//! manifest.synth = SynthSpec {
//!     n_classes: 2,
//!     n_videos_per_class: 2,
//!     seq_len: 3,
//!     k: 2,
//!     sensor_size: 16,
//!     ..SynthSpec::default()
//! };
//!
//! let report = run_stage(&manifest, Stage::Synth).unwrap();
//! assert_eq!(report.stage, "synth");
//! assert!(dir.path().join("synth/manifest.csv").exists());
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::event::{
    aggregate_periodic, decode_events, render_frame, EventFormat, Image, DEFAULT_DELTA_T,
};
use crate::face3d::{
    build_identity_model, compute_au_offsets, learn_au_dictionary, load_landmark_ids, load_mesh,
    save_model, load_model,
};
use crate::fitting::{
    fit_au_sequence, fit_identity, load_landmark_sequence, save_alpha_sequence, FitConfig,
    NUM_LANDMARKS,
};
use crate::stvit::{forward, init_params, load_checkpoint, save_checkpoint, ModelConfig};
use crate::synth::{gen_alpha_trajectory, gen_synthetic_events, make_dataset,
    render_synthetic_landmarks, synthetic_camera, write_dataset, SynthSpec};
use crate::training::{
    evaluate, load_training_manifest, train, ManifestEntry, Metrics, Split, TrainConfig,
    VideoSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Build3dmm,
    Fit,
    Aggregate,
    Synth,
    Train,
    Eval,
    Bench,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Build3dmm,
        Stage::Fit,
        Stage::Aggregate,
        Stage::Synth,
        Stage::Train,
        Stage::Eval,
        Stage::Bench,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Build3dmm => "build-3dmm",
            Stage::Fit => "fit",
            Stage::Aggregate => "aggregate",
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Bench => "bench",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown stage '{s}'; expected one of {}",
                    Stage::ALL.map(|s| s.name()).join(", ")
                ))
            })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Build3dmmSection {
    pub neutral_meshes: Vec<PathBuf>,
    pub k_identity: usize,
    /// (neutral mesh, apex mesh, label) per action unit sample.
    pub au_pairs: Vec<(PathBuf, PathBuf, String)>,
    pub k_au: usize,
    pub sparsity: usize,
    pub iters: usize,
}

impl Build3dmmSection {
    fn defaults() -> Self {
        Self {
            neutral_meshes: Vec::new(),
            k_identity: 22,
            au_pairs: Vec::new(),
            k_au: 32,
            sparsity: 3,
            iters: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSection {
    /// Per-video landmark sequence files.
    pub landmark_files: Vec<PathBuf>,
    pub identity_model: PathBuf,
    pub au_model: PathBuf,
    /// Mesh vertex ids of the 68 landmarks; defaults to 0..68.
    pub landmark_ids: Option<PathBuf>,
    #[serde(flatten)]
    pub config: FitConfig,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            landmark_files: Vec::new(),
            identity_model: PathBuf::from("identity.m3dm"),
            au_model: PathBuf::from("au.m3dm"),
            landmark_ids: None,
            config: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregateSection {
    pub events: Vec<PathBuf>,
    pub delta_t_us: u64,
}

impl Default for AggregateSection {
    fn default() -> Self {
        Self {
            events: Vec::new(),
            delta_t_us: DEFAULT_DELTA_T,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Training manifest; defaults to the synth stage output.
    pub manifest: Option<PathBuf>,
    pub delta_t_us: u64,
    #[serde(flatten)]
    pub config: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            manifest: None,
            delta_t_us: DEFAULT_DELTA_T,
            config: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EvalSection {
    pub manifest: Option<PathBuf>,
    /// Checkpoint path; defaults to the train stage output.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    /// Event file to benchmark on; defaults to a generated synthetic stream.
    pub events: Option<PathBuf>,
    /// Number of 1-second chunks to measure.
    pub chunks: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            events: None,
            chunks: 5,
        }
    }
}

/// One manifest configures every stage; unset sections fall back to
/// defaults. CLI flags (`--seed`, `--out`, `--threads`) override the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineManifest {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// 0 = library default; 1 = fully deterministic.
    pub threads: usize,
    pub build_3dmm: Build3dmmSection,
    pub fit: FitSection,
    pub aggregate: AggregateSection,
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl Default for PipelineManifest {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            seed: 7,
            threads: 0,
            build_3dmm: Build3dmmSection::defaults(),
            fit: FitSection::default(),
            aggregate: AggregateSection::default(),
            synth: SynthSpec::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl PipelineManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })
    }

    /// Per-stage seed derivation from the single top-level seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let tag = match stage {
            Stage::Build3dmm => 1u64,
            Stage::Fit => 2,
            Stage::Aggregate => 3,
            Stage::Synth => 4,
            Stage::Train => 5,
            Stage::Eval => 6,
            Stage::Bench => 7,
        };
        self.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(tag)
    }
}

// ---------------------------------------------------------------------------
// run report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: String,
    pub timing_ms: u64,
    /// TOML echo of the configuration the stage actually used.
    pub config_echo: String,
    pub version: String,
    pub metrics: Option<Metrics>,
    pub artifacts: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl RunReport {
    fn new(stage: Stage, config_echo: String) -> Self {
        Self {
            stage: stage.name().to_string(),
            timing_ms: 0,
            config_echo,
            version: env!("CARGO_PKG_VERSION").to_string(),
            metrics: None,
            artifacts: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("report_{}.json", self.stage));
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, json)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TextTable,
    Csv,
}

/// Renders the metrics table: columns Acc, Top3, Top5, then one per class.
/// The text table shows percentages; the CSV stores raw fractions with full
/// precision so a re-parse reproduces the metrics exactly. Absent classes
/// render `-` in both formats.
pub fn emit_report(metrics: &Metrics, format: ReportFormat) -> String {
    let mut header = vec!["Acc".to_string(), "Top3".to_string(), "Top5".to_string()];
    header.extend((0..metrics.per_class.len()).map(|c| c.to_string()));
    let cell = |v: Option<f64>| match (v, format) {
        (None, _) => "-".to_string(),
        (Some(v), ReportFormat::TextTable) => format!("{:.1}", v * 100.0),
        (Some(v), ReportFormat::Csv) => format!("{v:?}"),
    };
    let mut row = vec![
        cell(Some(metrics.top1)),
        cell(Some(metrics.top3)),
        cell(Some(metrics.top5)),
    ];
    row.extend(metrics.per_class.iter().map(|v| cell(*v)));
    match format {
        ReportFormat::Csv => format!("{}\n{}\n", header.join(","), row.join(",")),
        ReportFormat::TextTable => {
            let widths: Vec<usize> = header
                .iter()
                .zip(&row)
                .map(|(h, r)| h.len().max(r.len()))
                .collect();
            let fmt_row = |cells: &[String]| {
                cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:>w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            format!("{}\n{}\n", fmt_row(&header), fmt_row(&row))
        }
    }
}

/// Parses the CSV produced by [`emit_report`] back into metrics (confusion
/// counts are not part of the table and come back empty).
pub fn parse_report_csv(text: &str) -> Result<Metrics> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty report".into()))?;
    let row = lines
        .next()
        .ok_or_else(|| Error::Format("report has no data row".into()))?;
    let names: Vec<&str> = header.split(',').collect();
    let cells: Vec<&str> = row.split(',').collect();
    if names.len() != cells.len() || names.len() < 3 {
        return Err(Error::Format("report header/row mismatch".into()));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad number '{s}'")))
    };
    let n = names.len() - 3;
    let mut per_class = Vec::with_capacity(n);
    for &c in &cells[3..] {
        per_class.push(if c == "-" { None } else { Some(parse(c)?) });
    }
    Ok(Metrics {
        top1: parse(cells[0])?,
        top3: parse(cells[1])?,
        top5: parse(cells[2])?,
        per_class,
        confusion: vec![vec![0; n]; n],
    })
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn require_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::MissingInput(p.to_path_buf()));
        }
    }
    Ok(())
}

fn echo<T: Serialize>(value: &T) -> String {
    toml::to_string_pretty(value).unwrap_or_default()
}

fn event_format_of(path: &Path) -> EventFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => EventFormat::Csv,
        _ => EventFormat::Evbin,
    }
}

/// Loads manifest entries into model-ready samples: decode events, aggregate
/// into frames, render, and align with the coefficient targets.
pub fn load_samples(
    entries: &[ManifestEntry],
    delta_t: u64,
    config: &ModelConfig,
) -> Result<Vec<(VideoSample, Split)>> {
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        require_inputs(&[&entry.frames_path, &entry.alpha_path])?;
        let stream = decode_events(&entry.frames_path, event_format_of(&entry.frames_path))?;
        if stream.width as usize != config.image_size
            || stream.height as usize != config.image_size
        {
            return Err(Error::Shape(format!(
                "{}: sensor {}x{} does not match model input {}",
                entry.video_id,
                stream.width,
                stream.height,
                config.image_size
            )));
        }
        let frames: Vec<Image> = aggregate_periodic(&stream, delta_t)?
            .iter()
            .map(render_frame)
            .collect();
        let alphas = crate::fitting::load_alpha_sequence(&entry.alpha_path)?;
        if alphas.k() != config.alpha_dim {
            return Err(Error::Shape(format!(
                "{}: {} coefficients per frame, model expects {}",
                entry.video_id,
                alphas.k(),
                config.alpha_dim
            )));
        }
        let len = frames.len().min(alphas.frames.len()).min(config.seq_len);
        if len == 0 {
            return Err(Error::DegenerateData(format!(
                "{}: no usable frames",
                entry.video_id
            )));
        }
        let mut targets = Mat::zeros(len, config.alpha_dim);
        for t in 0..len {
            targets.row_mut(t).copy_from(&alphas.frames[t].transpose());
        }
        out.push((
            VideoSample::new(frames[..len].to_vec(), targets, entry.class_label, len)?,
            entry.split,
        ));
    }
    Ok(out)
}

fn validate_for_stage(manifest: &PipelineManifest, stage: Stage) -> Result<()> {
    // collect every validation problem, not only the first
    let mut problems = Vec::new();
    let mut push = |r: Result<()>| {
        if let Err(e) = r {
            problems.push(e.to_string());
        }
    };
    match stage {
        Stage::Synth => push(manifest.synth.validate()),
        Stage::Train => {
            push(manifest.model.validate());
            push(manifest.train.config.validate());
        }
        Stage::Eval => push(manifest.model.validate()),
        Stage::Bench => push(manifest.model.validate()),
        Stage::Fit => {
            if manifest.fit.config.lambda_reg < 0.0 {
                problems.push("fit: lambda_reg must be >= 0".into());
            }
        }
        Stage::Build3dmm => {
            if manifest.build_3dmm.k_identity == 0 || manifest.build_3dmm.k_au == 0 {
                problems.push("build-3dmm: component counts must be >= 1".into());
            }
            if manifest.build_3dmm.sparsity == 0 {
                problems.push("build-3dmm: sparsity must be >= 1".into());
            }
        }
        Stage::Aggregate => {
            if manifest.aggregate.delta_t_us == 0 {
                problems.push("aggregate: delta_t_us must be >= 1".into());
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(problems.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

fn run_build_3dmm(manifest: &PipelineManifest, report: &mut RunReport) -> Result<()> {
    let section = &manifest.build_3dmm;
    let inputs: Vec<&Path> = section
        .neutral_meshes
        .iter()
        .map(PathBuf::as_path)
        .chain(
            section
                .au_pairs
                .iter()
                .flat_map(|(a, b, _)| [a.as_path(), b.as_path()]),
        )
        .collect();
    require_inputs(&inputs)?;
    let out = &manifest.out_dir;
    std::fs::create_dir_all(out)?;
    if !section.neutral_meshes.is_empty() {
        let meshes: Result<Vec<_>> = section.neutral_meshes.iter().map(|p| load_mesh(p)).collect();
        let model = build_identity_model(&meshes?, section.k_identity)?;
        let path = out.join("identity.m3dm");
        save_model(&model, &path)?;
        report.artifacts.push(path);
    }
    if !section.au_pairs.is_empty() {
        let mut pairs = Vec::new();
        for (neutral, apex, label) in &section.au_pairs {
            pairs.push((load_mesh(neutral)?, load_mesh(apex)?, label.clone()));
        }
        let offsets = compute_au_offsets(&pairs)?;
        let base = pairs[0].0.clone();
        let (model, history) = learn_au_dictionary(
            &offsets,
            &base,
            section.k_au,
            section.sparsity,
            section.iters,
            manifest.stage_seed(Stage::Build3dmm),
        )?;
        let path = out.join("au.m3dm");
        save_model(&model, &path)?;
        report.artifacts.push(path);
        report
            .notes
            .push(format!("dictionary residual history: {history:?}"));
    }
    if report.artifacts.is_empty() {
        return Err(Error::InvalidArgument(
            "build-3dmm: no neutral meshes and no AU pairs configured".into(),
        ));
    }
    Ok(())
}

fn run_fit(manifest: &PipelineManifest, report: &mut RunReport) -> Result<()> {
    let section = &manifest.fit;
    if section.landmark_files.is_empty() {
        return Err(Error::InvalidArgument(
            "fit: no landmark files configured".into(),
        ));
    }
    let mut inputs: Vec<&Path> = vec![&section.identity_model, &section.au_model];
    inputs.extend(section.landmark_files.iter().map(PathBuf::as_path));
    if let Some(ids) = &section.landmark_ids {
        inputs.push(ids);
    }
    require_inputs(&inputs)?;
    let id_model = load_model(&section.identity_model)?;
    let au_model = load_model(&section.au_model)?;
    let landmark_ids = match &section.landmark_ids {
        Some(path) => load_landmark_ids(path)?,
        None => (0..NUM_LANDMARKS).collect(),
    };
    std::fs::create_dir_all(&manifest.out_dir)?;
    for path in &section.landmark_files {
        let frames = load_landmark_sequence(path)?;
        let first = frames
            .first()
            .ok_or_else(|| Error::DegenerateData(format!("{}: empty", path.display())))?;
        let (_, identity_shape, _) =
            fit_identity(first, &id_model, &landmark_ids, &section.config)?;
        let alphas =
            fit_au_sequence(&frames, &identity_shape, &au_model, &landmark_ids, &section.config)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("video");
        let out_path = manifest.out_dir.join(format!("{stem}.alpha.csv"));
        save_alpha_sequence(&alphas, &out_path)?;
        report.artifacts.push(out_path);
    }
    Ok(())
}

fn run_aggregate(manifest: &PipelineManifest, report: &mut RunReport) -> Result<()> {
    let section = &manifest.aggregate;
    if section.events.is_empty() {
        return Err(Error::InvalidArgument(
            "aggregate: no event files configured".into(),
        ));
    }
    require_inputs(&section.events.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    std::fs::create_dir_all(&manifest.out_dir)?;
    for path in &section.events {
        let stream = decode_events(path, event_format_of(path))?;
        let frames = aggregate_periodic(&stream, section.delta_t_us)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("events");
        let out_path = manifest.out_dir.join(format!("{stem}.frames.csv"));
        // one line per frame: rendered pixel values, row-major
        let mut text = String::new();
        for frame in &frames {
            let img = render_frame(frame);
            let cells: Vec<String> = img.values.iter().map(|v| format!("{v}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        std::fs::write(&out_path, text)?;
        report
            .notes
            .push(format!("{}: {} events, {} frames", stem, stream.len(), frames.len()));
        report.artifacts.push(out_path);
    }
    Ok(())
}

fn run_synth(manifest: &PipelineManifest, report: &mut RunReport) -> Result<()> {
    let mut spec = manifest.synth.clone();
    spec.seed = manifest.stage_seed(Stage::Synth);
    let dataset = make_dataset(&spec)?;
    let dir = manifest.out_dir.join("synth");
    let manifest_path = write_dataset(&dataset, &dir)?;
    report
        .notes
        .push(format!("{} videos generated", dataset.samples.len()));
    report.artifacts.push(manifest_path);
    Ok(())
}

fn training_manifest_path(manifest: &PipelineManifest, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| manifest.out_dir.join("synth").join("manifest.csv"))
}

fn run_train(manifest: &PipelineManifest, report: &mut RunReport) -> Result<()> {
    let section = &manifest.train;
    let manifest_path = training_manifest_path(manifest, &section.manifest);
    require_inputs(&[&manifest_path])?;
    let entries = load_training_manifest(&manifest_path)?;
    let samples = load_samples(&entries, section.delta_t_us, &manifest.model)?;
    let train_set: Vec<VideoSample> = samples
        .iter()
        .filter(|(_, split)| *split == Split::Train)
        .map(|(s, _)| s.clone())
        .collect();
    if train_set.is_empty() {
        return Err(Error::DegenerateData("no training-split samples".into()));
    }
    let mut config = section.config.clone();
    config.seed = manifest.stage_seed(Stage::Train);
    let (params, history) = train(&train_set, &manifest.model, &config)?;
    std::fs::create_dir_all(&manifest.out_dir)?;
    let ckpt = manifest.out_dir.join("model.stvt");
    save_checkpoint(&manifest.model, &params, &ckpt)?;
    let history_path = manifest.out_dir.join("train_history.csv");
    let mut text = String::from("epoch,mean_loss,train_top1\n");
    for (i, h) in history.iter().enumerate() {
        text.push_str(&format!("{i},{:?},{:?}\n", h.mean_loss, h.train_top1));
    }
    std::fs::write(&history_path, text)?;
    if let Some(last) = history.last() {
        report.notes.push(format!(
            "final epoch: loss {:.6}, train top1 {:.4}",
            last.mean_loss, last.train_top1
        ));
    }
    report.artifacts.push(ckpt);
    report.artifacts.push(history_path);
    Ok(())
}

fn run_eval(manifest: &PipelineManifest, report: &mut RunReport) -> Result<()> {
    let section = &manifest.eval;
    let ckpt = section
        .checkpoint
        .clone()
        .unwrap_or_else(|| manifest.out_dir.join("model.stvt"));
    let manifest_path = training_manifest_path(manifest, &section.manifest);
    require_inputs(&[&ckpt, &manifest_path])?;
    let (config, params) = load_checkpoint(&ckpt)?;
    let entries = load_training_manifest(&manifest_path)?;
    let samples = load_samples(&entries, manifest.train.delta_t_us, &config)?;
    let test_set: Vec<VideoSample> = samples
        .iter()
        .filter(|(_, split)| *split == Split::Test)
        .map(|(s, _)| s.clone())
        .collect();
    if test_set.is_empty() {
        return Err(Error::DegenerateData("no test-split samples".into()));
    }
    let metrics = evaluate(&config, &params, &test_set)?;
    std::fs::create_dir_all(&manifest.out_dir)?;
    let csv_path = manifest.out_dir.join("eval_metrics.csv");
    std::fs::write(&csv_path, emit_report(&metrics, ReportFormat::Csv))?;
    let table_path = manifest.out_dir.join("eval_metrics.txt");
    std::fs::write(&table_path, emit_report(&metrics, ReportFormat::TextTable))?;
    report.metrics = Some(metrics);
    report.artifacts.push(csv_path);
    report.artifacts.push(table_path);
    Ok(())
}

fn run_bench(manifest: &PipelineManifest, report: &mut RunReport) -> Result<()> {
    let section = &manifest.bench;
    let config = &manifest.model;
    let seed = manifest.stage_seed(Stage::Bench);
    // a 1-second chunk at the 33 ms window is 30 frames
    let frames_per_chunk = (1_000_000 / DEFAULT_DELTA_T) as usize;
    let stream = match &section.events {
        Some(path) => {
            require_inputs(&[path])?;
            decode_events(path, event_format_of(path))?
        }
        None => {
            let model = crate::synth::grouped_au_model(NUM_LANDMARKS + 12, 4, seed)?;
            let ids: Vec<usize> = (0..NUM_LANDMARKS).collect();
            let camera = synthetic_camera(config.image_size);
            let traj = gen_alpha_trajectory(0, frames_per_chunk * section.chunks.max(1), 4, seed)?;
            let landmarks =
                render_synthetic_landmarks(&traj, &model, &ids, &camera, 0.0, seed)?;
            let (stream, _) = gen_synthetic_events(
                &landmarks,
                config.image_size as u16,
                config.image_size as u16,
                4,
                seed,
            )?;
            stream
        }
    };
    let params = init_params(config, seed);
    let frames: Vec<Image> = aggregate_periodic(&stream, DEFAULT_DELTA_T)?
        .iter()
        .map(render_frame)
        .collect();
    let mut latencies = Vec::new();
    for chunk in frames.chunks(frames_per_chunk.min(config.seq_len)) {
        if chunk.is_empty() {
            continue;
        }
        let start = Instant::now();
        forward(config, &params, chunk, chunk.len())?;
        latencies.push(start.elapsed().as_secs_f64() * 1e3);
    }
    if latencies.is_empty() {
        return Err(Error::DegenerateData("bench stream produced no frames".into()));
    }
    let mean = latencies.iter().sum::<f64>() / latencies.len() as f64;
    report.notes.push(format!(
        "per-chunk latency ms: {:?} (mean {:.2}, {} frames per chunk)",
        latencies.iter().map(|l| (l * 100.0).round() / 100.0).collect::<Vec<_>>(),
        mean,
        frames_per_chunk.min(config.seq_len),
    ));
    Ok(())
}

/// Runs one stage and writes its report fragment under the output directory.
pub fn run_stage(manifest: &PipelineManifest, stage: Stage) -> Result<RunReport> {
    validate_for_stage(manifest, stage)?;
    if manifest.threads > 0 {
        // ignore the error: the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(manifest.threads)
            .build_global();
    }
    let config_echo = match stage {
        Stage::Build3dmm => echo(&manifest.build_3dmm),
        Stage::Fit => echo(&manifest.fit),
        Stage::Aggregate => echo(&manifest.aggregate),
        Stage::Synth => echo(&manifest.synth),
        Stage::Train => echo(&manifest.train),
        Stage::Eval => echo(&manifest.eval),
        Stage::Bench => echo(&manifest.bench),
    };
    let mut report = RunReport::new(stage, config_echo);
    let start = Instant::now();
    match stage {
        Stage::Build3dmm => run_build_3dmm(manifest, &mut report)?,
        Stage::Fit => run_fit(manifest, &mut report)?,
        Stage::Aggregate => run_aggregate(manifest, &mut report)?,
        Stage::Synth => run_synth(manifest, &mut report)?,
        Stage::Train => run_train(manifest, &mut report)?,
        Stage::Eval => run_eval(manifest, &mut report)?,
        Stage::Bench => run_bench(manifest, &mut report)?,
    }
    report.timing_ms = start.elapsed().as_millis() as u64;
    report.save(&manifest.out_dir)?;
    Ok(report)
}

/// Exit code classification: 1 for configuration/validation problems,
/// 2 for runtime failures.
pub fn exit_code_for(error: &Error) -> i32 {
    match error {
        Error::InvalidArgument(_)
        | Error::Parse { .. }
        | Error::Format(_)
        | Error::MissingInput(_)
        | Error::Shape(_)
        | Error::Bounds(_) => 1,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_manifest(out: &Path) -> PipelineManifest {
        let mut m = PipelineManifest::default();
        m.out_dir = out.to_path_buf();
        m.seed = 3;
        m.synth = SynthSpec {
            n_classes: 3,
            n_videos_per_class: 3,
            seq_len: 5,
            k: 4,
            mesh_size: 80,
            noise_sigma: 0.0,
            sensor_size: 16,
            events_per_frame: 3,
            seed: 0, // replaced by the stage seed
        };
        m.model = ModelConfig {
            image_size: 16,
            in_channels: 1,
            patch_size: 8,
            embed_dim: 8,
            spatial_depth: 1,
            temporal_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            alpha_dim: 4,
            seq_len: 5,
            mask_diagonal: true,
            head_hidden: 8,
        };
        m.train.config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        m
    }

    #[test]
    fn stage_names_round_trip() {
        for stage in Stage::ALL {
            assert_eq!(Stage::from_str(stage.name()).unwrap(), stage);
        }
        assert!(Stage::from_str("nope").is_err());
    }

    #[test]
    fn manifest_partial_toml_fills_defaults() {
        let text = "seed = 42\n[model]\nembed_dim = 16\n";
        let m: PipelineManifest = toml::from_str(text).unwrap();
        assert_eq!(m.seed, 42);
        assert_eq!(m.model.embed_dim, 16);
        // untouched fields fall back to defaults
        assert_eq!(m.model.num_classes, ModelConfig::default().num_classes);
        assert_eq!(m.synth.n_classes, SynthSpec::default().n_classes);
    }

    #[test]
    fn missing_input_fails_fast_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small_manifest(dir.path());
        m.train.manifest = Some(dir.path().join("does_not_exist.csv"));
        match run_stage(&m, Stage::Train) {
            Err(Error::MissingInput(p)) => {
                assert!(p.ends_with("does_not_exist.csv"));
            }
            other => panic!("expected missing-input error, got {other:?}"),
        }
    }

    #[test]
    fn validation_errors_are_exhaustive() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small_manifest(dir.path());
        m.model.embed_dim = 7; // not divisible by heads
        m.model.num_classes = 1;
        m.train.config.batch_size = 0;
        m.train.config.learning_rate = -1.0;
        match run_stage(&m, Stage::Train) {
            Err(Error::InvalidArgument(msg)) => {
                assert!(msg.contains("divisible"), "{msg}");
                assert!(msg.contains("num_classes"), "{msg}");
                assert!(msg.contains("batch_size"), "{msg}");
                assert!(msg.contains("learning_rate"), "{msg}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn aggregate_empty_event_file_reports_zero_frames() {
        let dir = tempfile::tempdir().unwrap();
        let events = dir.path().join("empty.csv");
        std::fs::write(&events, "16,16\n").unwrap();
        let mut m = small_manifest(dir.path());
        m.aggregate.events = vec![events];
        let report = run_stage(&m, Stage::Aggregate).unwrap();
        assert!(report.notes[0].contains("0 events"));
        assert!(report.notes[0].contains("0 frames"));
        let frames = std::fs::read_to_string(&report.artifacts[0]).unwrap();
        assert!(frames.is_empty());
    }

    #[test]
    fn synth_train_eval_pipeline_runs() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_manifest(dir.path());
        let synth_report = run_stage(&m, Stage::Synth).unwrap();
        assert!(synth_report.artifacts[0].exists());
        let train_report = run_stage(&m, Stage::Train).unwrap();
        assert!(train_report.artifacts[0].exists());
        let eval_report = run_stage(&m, Stage::Eval).unwrap();
        let metrics = eval_report.metrics.unwrap();
        assert!(metrics.top1 <= metrics.top3 && metrics.top3 <= metrics.top5);
        // report fragments on disk
        assert!(dir.path().join("report_synth.json").exists());
        assert!(dir.path().join("report_train.json").exists());
        assert!(dir.path().join("report_eval.json").exists());
    }

    #[test]
    fn synth_stage_is_idempotent_bitwise() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let ma = small_manifest(dir_a.path());
        let mb = small_manifest(dir_b.path());
        run_stage(&ma, Stage::Synth).unwrap();
        run_stage(&mb, Stage::Synth).unwrap();
        let mut names = BTreeSet::new();
        for entry in std::fs::read_dir(dir_a.path().join("synth")).unwrap() {
            names.insert(entry.unwrap().file_name());
        }
        assert!(!names.is_empty());
        for name in names {
            let a = std::fs::read(dir_a.path().join("synth").join(&name)).unwrap();
            let b = std::fs::read(dir_b.path().join("synth").join(&name)).unwrap();
            // manifests embed absolute paths; compare them textually with
            // the directory prefix stripped
            if name == "manifest.csv" {
                let norm = |bytes: &[u8], dir: &Path| {
                    String::from_utf8(bytes.to_vec())
                        .unwrap()
                        .replace(dir.to_str().unwrap(), "")
                };
                assert_eq!(norm(&a, dir_a.path()), norm(&b, dir_b.path()));
            } else {
                assert_eq!(a, b, "{name:?} differs");
            }
        }
    }

    #[test]
    fn bench_reports_latency() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small_manifest(dir.path());
        m.bench.chunks = 2;
        let report = run_stage(&m, Stage::Bench).unwrap();
        assert!(report.notes[0].contains("per-chunk latency ms"));
    }

    #[test]
    fn report_csv_round_trip_and_rendering() {
        let metrics = Metrics {
            top1: 1.0 / 3.0,
            top3: 0.75,
            top5: 1.0,
            per_class: vec![Some(1.0), None, Some(1.0 / 7.0)],
            confusion: vec![vec![0; 3]; 3],
        };
        let csv = emit_report(&metrics, ReportFormat::Csv);
        let back = parse_report_csv(&csv).unwrap();
        assert_eq!(back.top1, metrics.top1);
        assert_eq!(back.top3, metrics.top3);
        assert_eq!(back.top5, metrics.top5);
        assert_eq!(back.per_class, metrics.per_class);

        let perfect = Metrics {
            top1: 1.0,
            top3: 1.0,
            top5: 1.0,
            per_class: vec![Some(1.0), Some(1.0)],
            confusion: vec![vec![0; 2]; 2],
        };
        let table = emit_report(&perfect, ReportFormat::TextTable);
        assert!(table.contains("100.0"));
        let absent = emit_report(&metrics, ReportFormat::TextTable);
        assert!(absent.lines().nth(1).unwrap().contains(" -"));
    }

    #[test]
    fn exit_codes_classify_errors() {
        assert_eq!(exit_code_for(&Error::InvalidArgument("x".into())), 1);
        assert_eq!(
            exit_code_for(&Error::MissingInput(PathBuf::from("a"))),
            1
        );
        assert_eq!(exit_code_for(&Error::Diverged("x".into())), 2);
        assert_eq!(
            exit_code_for(&Error::Io(std::io::Error::other("x"))),
            2
        );
    }
}
