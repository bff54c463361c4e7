//! Experiment orchestration: data loading, training runs, evaluation, export
//! of per-video prediction files and parameter sweeps. Every reported number
//! is persisted alongside the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::au_pipeline::{predict_au, train_au_model, AuModel};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::dataio::disk::load_split;
use crate::dataio::parse::{au_header, expr_header, VA_HEADER};
use crate::dataio::{filter_split, generate_synthetic, DatasetSplit, FilterPolicy, Provenance, SplitName, SynthOptions};
use crate::error::{Error, Result};
use crate::expr_ensemble::{bootstrap_sample, train_subclassifier, EnsembleScores, SubClassifier};
use crate::metrics::{expr_report, mean_f1_au_masked, va_report, MetricReport};
use crate::nn::TrainCurve;
use crate::seed;
use crate::types::{validate_frame, FrameRecord, Prediction, PredictionSet, Task, N_AUS};
use crate::va_pipeline::{train_va_model, VaModel};

/// Content hash of the library sources this binary was built from.
pub const CODE_VERSION: &str = env!("SOURCE_CONTENT_HASH");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub name: String,
    pub arch_id: usize,
    pub seed: u64,
    pub train: MetricReport,
    pub val: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: Task,
    pub seed: u64,
    pub code_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub n_train_frames: usize,
    pub n_val_frames: usize,
    /// Training curves by stage or member name.
    pub curves: BTreeMap<String, TrainCurve>,
    pub train_report: MetricReport,
    pub val_report: Option<MetricReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub member_reports: Vec<MemberReport>,
    /// Checkpoint files relative to the run directory.
    pub checkpoints: Vec<String>,
    /// Wall-clock seconds per phase; not reproducible.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `key = value` summary of the final metrics.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "task = {}\nseed = {}\nconfig_hash = {}\ncode_version = {}\n",
            self.task, self.seed, self.config_hash, self.code_version
        );
        let mut section = |name: &str, r: &MetricReport| {
            for (k, v) in r.key_values() {
                s.push_str(&format!("{name}.{k} = {v}\n"));
            }
        };
        section("train", &self.train_report);
        if let Some(r) = &self.val_report {
            section("val", r);
        }
        for m in &self.member_reports {
            section(&format!("{}.train", m.name), &m.train);
            if let Some(r) = &m.val {
                section(&format!("{}.val", m.name), r);
            }
        }
        s
    }
}

/// Lists the member checkpoints of an expression ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub task: Task,
    pub config_hash: String,
    pub members: Vec<EnsembleMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    /// Relative to the manifest's directory.
    pub checkpoint: String,
    pub arch_id: usize,
    pub seed: u64,
}

/// Loads one split with every label as annotated, before filtering.
pub fn load_raw_split(config: &ExperimentConfig, split: SplitName) -> Result<DatasetSplit> {
    if config.synthetic {
        let n_videos = match split {
            SplitName::Train => config.synth_train_videos,
            SplitName::Val | SplitName::Test => config.synth_val_videos,
        };
        let opts = SynthOptions {
            image_size: config.image_size,
            extreme_fraction: config.synth_extreme_fraction,
            split,
        };
        generate_synthetic(
            seed::derive(config.seed, "data"),
            n_videos,
            config.synth_frames_per_video,
            config.task,
            &opts,
        )
    } else {
        let root = config
            .data_root
            .as_deref()
            .ok_or_else(|| Error::config("data_root", "required when synthetic = false"))?;
        load_split(Path::new(root), config.task, split, config.image_size)
    }
}

/// Loads, filters for the task and validates one split.
pub fn load_task_split(config: &ExperimentConfig, split: SplitName) -> Result<DatasetSplit> {
    let raw = load_raw_split(config, split)?;
    let filtered = filter_split(raw, config.task, FilterPolicy::from(config));
    for f in filtered.frames() {
        validate_frame(f.clone(), config)?;
    }
    Ok(filtered)
}

/// Trained models for one task.
pub enum Models {
    Va(VaModel),
    Expr(Vec<SubClassifier>),
    Au(AuModel),
}

impl Models {
    pub fn task(&self) -> Task {
        match self {
            Models::Va(_) => Task::Va,
            Models::Expr(_) => Task::Expr,
            Models::Au(_) => Task::Au,
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        match self {
            Models::Va(m) => m.config(),
            Models::Expr(m) => m[0].config(),
            Models::Au(m) => m.config(),
        }
    }

    /// Fused predictions and, for ensembles, one set per member.
    pub fn predict(&self, split: &DatasetSplit) -> Result<(PredictionSet, Vec<PredictionSet>)> {
        match self {
            Models::Va(m) => Ok((m.predict(split)?, Vec::new())),
            Models::Au(m) => Ok((predict_au(m, split, m.config().au_threshold)?, Vec::new())),
            Models::Expr(m) => EnsembleScores::compute(m, split)?.predict(m[0].config().other_threshold),
        }
    }
}

/// Metrics of `predictions` against the labels of a filtered split.
pub fn report_for(task: Task, predictions: &PredictionSet, split: &DatasetSplit, config: &ExperimentConfig) -> Result<MetricReport> {
    let missing = |f: &FrameRecord| Error::Data(format!("no prediction for {}#{}", f.video_id, f.frame_index));
    match task {
        Task::Va => {
            let (mut vp, mut vt, mut ap, mut at) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for f in split.frames() {
                let Some(l) = f.va else { continue };
                match predictions.get(&f.video_id, f.frame_index) {
                    Some(Prediction::Va { valence, arousal }) => {
                        vp.push(*valence);
                        vt.push(l.valence);
                        ap.push(*arousal);
                        at.push(l.arousal);
                    }
                    _ => return Err(missing(f)),
                }
            }
            va_report(&vp, &vt, &ap, &at)
        }
        Task::Expr => {
            let (mut pred, mut truth) = (Vec::new(), Vec::new());
            for f in split.frames() {
                let Some(c) = f.expr.and_then(|l| l.class()) else { continue };
                match predictions.get(&f.video_id, f.frame_index) {
                    Some(Prediction::Expr { class, .. }) => {
                        pred.push(*class);
                        truth.push(c);
                    }
                    _ => return Err(missing(f)),
                }
            }
            expr_report(&pred, &truth)
        }
        Task::Au => {
            let frames: Vec<&FrameRecord> = split.frames().filter(|f| f.aus.is_some()).collect();
            let mut probs = Array2::zeros((frames.len(), N_AUS));
            let mut labels = Array2::zeros((frames.len(), N_AUS));
            let mut mask = Array2::zeros((frames.len(), N_AUS));
            for (r, f) in frames.iter().enumerate() {
                let a = f.aus.expect("filtered above");
                let Some(Prediction::Au { probabilities, .. }) = predictions.get(&f.video_id, f.frame_index) else {
                    return Err(missing(f));
                };
                for j in 0..N_AUS {
                    probs[[r, j]] = probabilities[j];
                    labels[[r, j]] = a.targets()[j];
                    mask[[r, j]] = a.mask()[j];
                }
            }
            mean_f1_au_masked(probs.view(), labels.view(), mask.view(), config.au_threshold)
        }
    }
}

pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: PredictionSet,
    pub member_reports: Vec<MetricReport>,
    pub member_predictions: Vec<PredictionSet>,
}

/// The single prediction-and-metric path used by training runs and `eval`.
pub fn evaluate(models: &Models, split: &DatasetSplit) -> Result<Evaluation> {
    let cfg = models.config();
    let (predictions, member_predictions) = models.predict(split)?;
    let report = report_for(models.task(), &predictions, split, cfg)?;
    let member_reports = member_predictions
        .iter()
        .map(|p| report_for(models.task(), p, split, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        report,
        predictions,
        member_reports,
        member_predictions,
    })
}

fn secs(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

/// Trains the configured task, writing checkpoints, `manifest.json`,
/// `report.txt` and `config.toml` under `out_dir`.
pub fn run_train(config: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    let started = Instant::now();
    let mut timings = BTreeMap::new();
    let train = load_task_split(config, SplitName::Train)?;
    let val = load_task_split(config, SplitName::Val)?;
    if train.is_empty() {
        return Err(Error::config("data", "training split has no usable frames"));
    }
    timings.insert("load_data".to_string(), secs(started));
    log::info!(
        "{} training: {} train / {} val frames",
        config.task,
        train.n_frames(),
        val.n_frames()
    );

    let t_train = Instant::now();
    let mut curves = BTreeMap::new();
    let mut checkpoints = Vec::new();
    let ckpt_dir = out_dir.join("checkpoints");
    let mut members = Vec::new();
    let models = match config.task {
        Task::Va => {
            let (model, polarity, regression) = train_va_model(config, &train)?;
            curves.insert("polarity".to_string(), polarity);
            curves.insert("regression".to_string(), regression);
            model.to_checkpoint("regression")?.save(&ckpt_dir.join("va.json"))?;
            checkpoints.push("checkpoints/va.json".to_string());
            Models::Va(model)
        }
        Task::Au => {
            let (model, curve) = train_au_model(config, &train)?;
            curves.insert("au".to_string(), curve);
            model.to_checkpoint()?.save(&ckpt_dir.join("au.json"))?;
            checkpoints.push("checkpoints/au.json".to_string());
            Models::Au(model)
        }
        Task::Expr => {
            let val_frames: Vec<&FrameRecord> = val.frames().collect();
            let mut subs = Vec::with_capacity(config.n_subclassifiers);
            for k in 0..config.n_subclassifiers {
                let member_seed = seed::derive(config.seed, &format!("member{k}"));
                let arch_id = k % config.backbone_channels.len();
                let sample = bootstrap_sample(&train, config.bootstrap_fraction, config.bootstrap_use_all, member_seed)?;
                let val_arg = (!val_frames.is_empty()).then_some(val_frames.as_slice());
                let (model, curve) = train_subclassifier(&sample, val_arg, config, arch_id, member_seed)?;
                let name = format!("sub{k}");
                model.to_checkpoint()?.save(&ckpt_dir.join(format!("{name}.json")))?;
                checkpoints.push(format!("checkpoints/{name}.json"));
                members.push(EnsembleMember {
                    checkpoint: format!("{name}.json"),
                    arch_id,
                    seed: member_seed,
                });
                curves.insert(name, curve);
                subs.push(model);
            }
            write_json(
                &ckpt_dir.join("ensemble.json"),
                &EnsembleManifest {
                    task: Task::Expr,
                    config_hash: config.hash(),
                    members: members.clone(),
                },
            )?;
            checkpoints.push("checkpoints/ensemble.json".to_string());
            Models::Expr(subs)
        }
    };
    timings.insert("train".to_string(), secs(t_train));

    let t_eval = Instant::now();
    let train_eval = evaluate(&models, &train)?;
    let val_eval = if val.is_empty() { None } else { Some(evaluate(&models, &val)?) };
    timings.insert("evaluate".to_string(), secs(t_eval));
    let member_reports = members
        .iter()
        .enumerate()
        .map(|(k, m)| MemberReport {
            name: format!("sub{k}"),
            arch_id: m.arch_id,
            seed: m.seed,
            train: train_eval.member_reports[k].clone(),
            val: val_eval.as_ref().map(|v| v.member_reports[k].clone()),
        })
        .collect();
    timings.insert("total".to_string(), secs(started));

    let manifest = RunManifest {
        task: config.task,
        seed: config.seed,
        code_version: CODE_VERSION.to_string(),
        config_hash: config.hash(),
        config: config.clone(),
        provenance: train.provenance,
        n_train_frames: train.n_frames(),
        n_val_frames: val.n_frames(),
        curves,
        train_report: train_eval.report,
        val_report: val_eval.map(|v| v.report),
        member_reports,
        checkpoints,
        timings,
    };
    config.save(&out_dir.join("config.toml"))?;
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    write_text(&out_dir.join("report.txt"), &manifest.to_text())?;
    Ok(manifest)
}

/// Loads models from checkpoint files, ensemble manifests or run directories.
/// Several paths are only allowed for expression ensembles.
pub fn load_models(paths: &[PathBuf]) -> Result<Models> {
    let mut checkpoints = Vec::new();
    for path in paths {
        expand_checkpoint_path(path, &mut checkpoints)?;
    }
    let Some((first_path, first)) = checkpoints.first() else {
        return Err(Error::config("checkpoint", "no checkpoint given"));
    };
    let incompatible = |path: &Path, reason: String| Error::IncompatibleCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    match first.task {
        Task::Expr => {
            let mut subs = Vec::with_capacity(checkpoints.len());
            for (path, c) in &checkpoints {
                if c.task != Task::Expr {
                    return Err(incompatible(path, format!("{} checkpoint in an expression ensemble", c.task)));
                }
                subs.push(SubClassifier::from_checkpoint(c).map_err(|e| with_path(e, path))?);
            }
            Ok(Models::Expr(subs))
        }
        task if checkpoints.len() > 1 => Err(incompatible(
            first_path,
            format!("{task} evaluation takes a single checkpoint"),
        )),
        Task::Va => Ok(Models::Va(VaModel::from_checkpoint(first).map_err(|e| with_path(e, first_path))?)),
        Task::Au => Ok(Models::Au(AuModel::from_checkpoint(first).map_err(|e| with_path(e, first_path))?)),
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::IncompatibleCheckpoint { reason, .. } => Error::IncompatibleCheckpoint {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    }
}

fn expand_checkpoint_path(path: &Path, out: &mut Vec<(PathBuf, Checkpoint)>) -> Result<()> {
    if path.is_dir() {
        let dir = path.join("checkpoints");
        for name in ["ensemble.json", "va.json", "au.json"] {
            let candidate = dir.join(name);
            if candidate.exists() {
                return expand_checkpoint_path(&candidate, out);
            }
        }
        return Err(Error::IncompatibleCheckpoint {
            path: path.to_path_buf(),
            reason: "directory holds no checkpoints".into(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(manifest) = serde_json::from_str::<EnsembleManifest>(&text) {
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &manifest.members {
            let p = base.join(&m.checkpoint);
            out.push((p.clone(), Checkpoint::load(&p)?));
        }
        return Ok(());
    }
    out.push((path.to_path_buf(), Checkpoint::load(path)?));
    Ok(())
}

fn check_task(models: &Models, task: Option<Task>, paths: &[PathBuf]) -> Result<()> {
    match task {
        Some(t) if t != models.task() => Err(Error::IncompatibleCheckpoint {
            path: paths[0].clone(),
            reason: format!("checkpoints hold a {} model, --task is {t}", models.task()),
        }),
        _ => Ok(()),
    }
}

/// Evaluates checkpoints on a split, persisting `eval_<split>.txt` and
/// `eval_<split>.json` under `out_dir` when given.
pub fn run_eval(paths: &[PathBuf], split: SplitName, task: Option<Task>, out_dir: Option<&Path>) -> Result<MetricReport> {
    let models = load_models(paths)?;
    check_task(&models, task, paths)?;
    let data = load_task_split(models.config(), split)?;
    if data.is_empty() {
        return Err(Error::Data(format!("{split} split has no usable frames")));
    }
    let eval = evaluate(&models, &data)?;
    if let Some(dir) = out_dir {
        write_text(&dir.join(format!("eval_{split}.txt")), &eval.report.to_text())?;
        write_json(&dir.join(format!("eval_{split}.json")), &eval.report)?;
    }
    Ok(eval.report)
}

/// Writes per-frame predictions of every frame in the split as JSON.
pub fn run_predict(paths: &[PathBuf], split: SplitName, task: Option<Task>, out_dir: &Path) -> Result<PathBuf> {
    let models = load_models(paths)?;
    check_task(&models, task, paths)?;
    let data = load_raw_split(models.config(), split)?;
    let (predictions, _) = models.predict(&data)?;
    let path = out_dir.join(format!("predictions_{split}.json"));
    write_json(&path, &predictions)?;
    Ok(path)
}

fn format_prediction(p: &Prediction) -> String {
    match p {
        Prediction::Va { valence, arousal } => format!("{valence:.6},{arousal:.6}"),
        Prediction::Expr { class, .. } => class.to_string(),
        Prediction::Au { decisions, .. } => decisions
            .iter()
            .map(u8::to_string)
            .collect::<Vec<_>>()
            .join(","),
    }
}

/// One file per video: header line then one line per frame in frame order.
pub fn write_prediction_files(predictions: &PredictionSet, dir: &Path) -> Result<Vec<PathBuf>> {
    let header = match predictions.task {
        Task::Va => VA_HEADER.to_string(),
        Task::Expr => expr_header(),
        Task::Au => au_header(),
    };
    let mut written = Vec::new();
    for (video, frames) in predictions.by_video() {
        let mut text = header.clone();
        text.push('\n');
        for (_, p) in frames {
            text.push_str(&format_prediction(p));
            text.push('\n');
        }
        let path = dir.join(format!("{video}.txt"));
        write_text(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

/// Exports submission-style prediction files for every frame of the split.
/// Expression ensembles write the fused decisions to `fused/` and each
/// member's decisions to `sub<k>/`.
pub fn run_export(paths: &[PathBuf], split: SplitName, task: Option<Task>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let models = load_models(paths)?;
    check_task(&models, task, paths)?;
    let data = load_raw_split(models.config(), split)?;
    let (predictions, members) = models.predict(&data)?;
    if models.task() != Task::Expr {
        return write_prediction_files(&predictions, out_dir);
    }
    let mut written = write_prediction_files(&predictions, &out_dir.join("fused"))?;
    for (k, m) in members.iter().enumerate() {
        written.extend(write_prediction_files(m, &out_dir.join(format!("sub{k}")))?);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub report: MetricReport,
}

/// Keys that only affect prediction, so a sweep over them reuses one trained model.
const INFERENCE_ONLY: [&str; 2] = ["other_threshold", "au_threshold"];

/// One evaluation per value of `key`, on the validation split when it has
/// frames and on the training split otherwise. Writes `sweep.txt` and
/// `sweep.json` under `out_dir`.
pub fn run_sweep(config: &ExperimentConfig, key: &str, values: &[toml::Value], out_dir: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config(key, "sweep needs at least one value"));
    }
    let variants = values
        .iter()
        .map(|v| config.with_value(key, v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    if INFERENCE_ONLY.contains(&key) {
        run_train(config, &out_dir.join("base"))?;
        let models = load_models(&[out_dir.join("base")])?;
        let split = eval_split(config)?;
        for (value, variant) in values.iter().zip(&variants) {
            let retuned = retune(&models, variant)?;
            rows.push(SweepRow {
                value: value.to_string(),
                report: evaluate(&retuned, &split)?.report,
            });
        }
    } else {
        for (value, variant) in values.iter().zip(&variants) {
            let dir = out_dir.join(format!("{key}={}", value.to_string().trim_matches('"')));
            let manifest = run_train(variant, &dir)?;
            rows.push(SweepRow {
                value: value.to_string(),
                report: manifest.val_report.unwrap_or(manifest.train_report),
            });
        }
    }
    let mut table = format!("{key}\theadline\n");
    for r in &rows {
        table.push_str(&format!("{}\t{}\n", r.value, r.report.headline()));
    }
    write_text(&out_dir.join("sweep.txt"), &table)?;
    write_json(&out_dir.join("sweep.json"), &rows)?;
    Ok(rows)
}

fn eval_split(config: &ExperimentConfig) -> Result<DatasetSplit> {
    let val = load_task_split(config, SplitName::Val)?;
    if val.is_empty() {
        load_task_split(config, SplitName::Train)
    } else {
        Ok(val)
    }
}

/// Rebuilds models with an inference-time config change, keeping parameters.
fn retune(models: &Models, config: &ExperimentConfig) -> Result<Models> {
    let rebuild = |c: Checkpoint| Checkpoint {
        config: config.clone(),
        config_hash: config.hash(),
        ..c
    };
    Ok(match models {
        Models::Va(m) => Models::Va(VaModel::from_checkpoint(&rebuild(m.to_checkpoint("regression")?))?),
        Models::Au(m) => Models::Au(AuModel::from_checkpoint(&rebuild(m.to_checkpoint()?))?),
        Models::Expr(subs) => Models::Expr(
            subs.iter()
                .map(|s| SubClassifier::from_checkpoint(&rebuild(s.to_checkpoint()?)))
                .collect::<Result<Vec<_>>>()?,
        ),
    })
}

/// Writes generated train and validation splits in the on-disk layout.
pub fn run_synth(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let mut cfg = config.clone();
    cfg.synthetic = true;
    for split in [SplitName::Train, SplitName::Val] {
        let data = load_raw_split(&cfg, split)?;
        crate::dataio::disk::write_split(out_dir, cfg.task, &data)?;
    }
    Ok(())
}
