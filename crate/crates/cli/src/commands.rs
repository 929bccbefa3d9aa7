//! One function per subcommand. Each loads what it needs from disk, runs
//! the workflow and writes its artifacts under the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use hipline::augment::{AblationTable, TechniqueMask};
use hipline::config::{RunConfig, SCHEMA_VERSION};
use hipline::labelloop::{hidden_truth, Auditor, LoopState, Phase, ReviewerRegistry};
use hipline::metrics::{MetricsTable, RocCurve, TableRow};
use hipline::nnet::{load_checkpoint, save_checkpoint, Checkpoint, EpochRecord};
use hipline::phantom::{Dataset, Split};
use hipline::pipeline::{Disposition, Outcome, Pipeline, Stage, StageRegistry, TruthTable};
use hipline::workflow::{
    self, BoxReport, FractureEval, GateReport, GridRecord, GridSpec, Protocol,
};
use hipline::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::store::{self, DatasetMeta, OutputLayout};

/// Resolved configuration and locations shared by every command.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub data_dir: PathBuf,
    pub out: OutputLayout,
    pub quiet: bool,
}

impl Context {
    /// Explicit directories win over the config; data defaults to
    /// `<output>/data`.
    pub fn new(config: RunConfig, data_dir: Option<PathBuf>, output_dir: Option<PathBuf>) -> Self {
        let root = output_dir.unwrap_or_else(|| config.output_dir.clone());
        let data_dir = data_dir.unwrap_or_else(|| root.join("data"));
        Context {
            config,
            data_dir,
            out: OutputLayout { root },
            quiet: false,
        }
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    pub fn load_dataset(&self) -> Result<(Dataset, DatasetMeta)> {
        store::read_dataset(&self.data_dir)
    }

    fn snapshot_config(&self) -> Result<()> {
        store::write_json(&self.out.config_snapshot(), &self.config)
    }

    fn record(&self, rec: ExperimentRecord) -> Result<()> {
        store::append_jsonl(&self.out.experiments(), &rec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_ms: u64,
    pub wall_seconds: f64,
}

struct Clock {
    started: u64,
    t0: Instant,
}

impl Clock {
    fn start() -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        Clock {
            started,
            t0: Instant::now(),
        }
    }

    fn stop(&self) -> Timing {
        Timing {
            started_unix_ms: self.started,
            wall_seconds: self.t0.elapsed().as_secs_f64(),
        }
    }
}

/// One line of the append-only experiment log. Everything except `timing`
/// is a deterministic function of config, seed and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema_version: u32,
    pub kind: String,
    pub stage: Option<String>,
    pub config_hash: String,
    pub config: RunConfig,
    pub dataset_hash: Option<String>,
    pub epochs: Vec<EpochRecord>,
    pub metrics: serde_json::Value,
    pub artifacts: Vec<PathBuf>,
    pub timing: Timing,
}

impl ExperimentRecord {
    fn new(ctx: &Context, kind: &str, stage: Option<Stage>, dataset_hash: Option<String>) -> Self {
        ExperimentRecord {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            stage: stage.map(|s| s.name().to_string()),
            config_hash: ctx.config.hash(),
            config: ctx.config.clone(),
            dataset_hash,
            epochs: Vec::new(),
            metrics: serde_json::Value::Null,
            artifacts: Vec::new(),
            timing: Timing {
                started_unix_ms: 0,
                wall_seconds: 0.0,
            },
        }
    }
}

pub fn generate(ctx: &Context) -> Result<DatasetMeta> {
    let clock = Clock::start();
    let (mut ds, noise) = workflow::generate(&ctx.config)?;
    let meta = store::dataset_meta(&ds, &ctx.config.hash(), noise);
    if meta.splits.iter().all(|s| s.fractures == 0) {
        eprintln!("warning: fracture prevalence is zero; every hip is negative");
    }
    store::write_dataset(&ctx.data_dir, &mut ds, &meta)?;
    ctx.snapshot_config()?;
    ctx.say(format!(
        "wrote {} hip images to {}",
        ds.hip_count(),
        ctx.data_dir.display()
    ));
    ctx.say(format!(
        "{:<6} {:>6} {:>8} {:>6} {:>10} {:>11} {:>13}",
        "split", "hips", "frontal", "metal", "fractures", "prevalence", "label errors"
    ));
    for s in &meta.splits {
        ctx.say(format!(
            "{:<6} {:>6} {:>8} {:>6} {:>10} {:>11.4} {:>13}",
            s.split.name(),
            s.hips,
            s.frontal,
            s.metal,
            s.fractures,
            s.prevalence,
            s.label_errors
        ));
    }
    if let Some(n) = &meta.noise {
        ctx.say(format!(
            "initial label accuracy {:.4} over {} eligible hips",
            n.label_accuracy, n.population
        ));
    }
    let mut rec = ExperimentRecord::new(ctx, "generate", None, Some(meta.content_hash.clone()));
    rec.metrics = serde_json::to_value(&meta)?;
    rec.artifacts = vec![
        ctx.data_dir.join(store::MANIFEST),
        ctx.data_dir.join(store::META),
    ];
    rec.timing = clock.stop();
    ctx.record(rec)?;
    Ok(meta)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Validation-tuned implant-gate threshold, tied to one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTuning {
    pub schema_version: u32,
    pub config_hash: String,
    pub checkpoint_sha256: String,
    pub min_precision: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Validation {
    Gate(GateReport),
    Boxes(BoxReport),
    Fracture { auc: Option<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub schema_version: u32,
    pub config_hash: String,
    pub dataset_hash: String,
    pub stage: String,
    pub checkpoint_sha256: String,
    pub history: Vec<EpochRecord>,
    pub validation: Validation,
}

fn validate_stage(
    ctx: &Context,
    ds: &Dataset,
    stage: Stage,
    ckpt: &Checkpoint,
    history: &[EpochRecord],
) -> Result<(Validation, Option<f64>)> {
    let cfg = &ctx.config;
    Ok(match stage {
        Stage::Frontal => {
            let net = ckpt.network::<f32>()?;
            let r = workflow::evaluate_gate(
                ds,
                cfg,
                stage,
                &net,
                Split::Val,
                cfg.pipeline.frontal_threshold,
            )?;
            (Validation::Gate(r), None)
        }
        Stage::Metal => {
            let net = ckpt.network::<f32>()?;
            let (logits, labels) = workflow::gate_logits(ds, cfg, stage, &net, Split::Val)?;
            let t = workflow::tune_metal_threshold(
                &logits,
                &labels,
                cfg.evaluation.metal_min_precision,
            );
            (
                Validation::Gate(workflow::gate_report(stage, &logits, &labels, t)?),
                Some(t),
            )
        }
        Stage::Bounding => {
            let net = ckpt.network::<f32>()?;
            (
                Validation::Boxes(workflow::evaluate_boxes(ds, &net, Split::Val)?),
                None,
            )
        }
        Stage::Fracture => (
            Validation::Fracture {
                auc: history.last().and_then(|r| r.val_auc),
            },
            None,
        ),
    })
}

pub fn train(ctx: &Context, stage: Stage, resume: Option<&Path>) -> Result<TrainingLog> {
    let clock = Clock::start();
    let (ds, meta) = ctx.load_dataset()?;
    let resume = match resume {
        Some(p) => {
            let c = load_checkpoint(p)?;
            workflow::check_pairing(&ds, &c)?;
            if c.header.metadata.stage.as_deref() != Some(stage.name()) {
                return Err(Error::data(format!(
                    "{} holds a {:?} checkpoint, not {}",
                    p.display(),
                    c.header.metadata.stage,
                    stage.name()
                )));
            }
            Some(c)
        }
        None => None,
    };
    let quiet = ctx.quiet;
    let name = stage.name();
    let mut progress = |r: &EpochRecord| {
        if !quiet {
            let auc = r
                .val_auc
                .map_or(String::new(), |a| format!(" val_auc {a:.5}"));
            let vl = r
                .val_loss
                .map_or(String::new(), |l| format!(" val_loss {l:.5}"));
            println!(
                "[{name}] epoch {} train_loss {:.5}{vl}{auc}",
                r.epoch, r.train_loss
            );
        }
    };
    let run = workflow::train_stage(
        &ds,
        &ctx.config,
        stage,
        None,
        resume.as_ref(),
        Some(&mut progress),
    )?;
    let path = ctx.out.checkpoint(name);
    save_checkpoint(&path, &run.checkpoint)?;
    let digest = sha256_file(&path)?;
    let (validation, tuned) = validate_stage(ctx, &ds, stage, &run.checkpoint, &run.history)?;
    let mut artifacts = vec![path.clone(), ctx.out.training_log(name)];
    if let Some(t) = tuned {
        let tuning = GateTuning {
            schema_version: SCHEMA_VERSION,
            config_hash: ctx.config.hash(),
            checkpoint_sha256: digest.clone(),
            min_precision: ctx.config.evaluation.metal_min_precision,
            threshold: t,
        };
        store::write_json(&ctx.out.gate_tuning(), &tuning)?;
        artifacts.push(ctx.out.gate_tuning());
        ctx.say(format!(
            "implant gate threshold tuned on validation: {t:.6}"
        ));
    }
    let log = TrainingLog {
        schema_version: SCHEMA_VERSION,
        config_hash: ctx.config.hash(),
        dataset_hash: meta.content_hash.clone(),
        stage: name.to_string(),
        checkpoint_sha256: digest,
        history: run.history.clone(),
        validation,
    };
    store::write_json(&ctx.out.training_log(name), &log)?;
    ctx.snapshot_config()?;
    ctx.say(format!("checkpoint written to {}", path.display()));
    ctx.say(format!(
        "validation: {}",
        serde_json::to_string(&log.validation)?
    ));
    let mut rec = ExperimentRecord::new(ctx, "train", Some(stage), Some(meta.content_hash));
    rec.epochs = run.history;
    rec.metrics = serde_json::to_value(&log.validation)?;
    rec.artifacts = artifacts;
    rec.timing = clock.stop();
    ctx.record(rec)?;
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub stage: String,
    pub backend: String,
    pub checkpoint_sha256: Option<String>,
}

/// The configured pipeline with checkpoints defaulted to the output
/// layout. Refuses missing checkpoints and checkpoints trained on other
/// images.
pub fn build_pipeline(ctx: &Context, ds: &Dataset) -> Result<(Pipeline, Vec<ModelInfo>)> {
    let mut pcfg = ctx.config.pipeline.clone();
    let mut infos = Vec::new();
    let mut needs_truth = false;
    for stage in Stage::ALL {
        let m = pcfg.model_mut(stage);
        let mut digest = None;
        if m.backend == "cnn" {
            let path = m
                .checkpoint
                .get_or_insert_with(|| ctx.out.checkpoint(stage.name()))
                .clone();
            if !path.exists() {
                return Err(Error::data(format!(
                    "missing {} checkpoint {} (run `train --stage {}`)",
                    stage.name(),
                    path.display(),
                    stage.name()
                )));
            }
            workflow::check_pairing(ds, &load_checkpoint(&path)?)?;
            digest = Some(sha256_file(&path)?);
        }
        needs_truth |= m.backend == "oracle";
        infos.push(ModelInfo {
            stage: stage.name().to_string(),
            backend: m.backend.clone(),
            checkpoint_sha256: digest,
        });
    }
    let metal = &infos[Stage::ALL
        .iter()
        .position(|s| *s == Stage::Metal)
        .expect("metal stage")];
    if let Some(digest) = &metal.checkpoint_sha256 {
        let path = ctx.out.gate_tuning();
        if path.exists() {
            let t: GateTuning = store::read_json(&path)?;
            if &t.checkpoint_sha256 == digest {
                pcfg.metal_threshold = t.threshold;
            }
        }
    }
    let truth = needs_truth.then(|| TruthTable::from_dataset(ds));
    let pipeline = Pipeline::load(&pcfg, &StageRegistry::default(), truth.as_ref())?;
    if let Some(e) = pipeline.load_error() {
        return Err(Error::data(format!("pipeline failed to load: {e}")));
    }
    Ok((pipeline, infos))
}

/// Refuse to report numbers produced from non-finite model outputs.
fn check_finite(disp: &[Disposition]) -> Result<()> {
    for d in disp {
        if let Outcome::Failed { stage, reason } = &d.outcome {
            if reason.contains("non-finite") {
                return Err(Error::Numeric(format!(
                    "{} failed at {stage}: {reason}",
                    d.image_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub dataset_hash: String,
    pub split: Split,
    pub models: Vec<ModelInfo>,
    pub frontal_threshold: f64,
    pub metal_threshold: f64,
    pub counts: BTreeMap<String, usize>,
}

fn outcome_counts(disp: &[Disposition]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for d in disp {
        let k = match &d.outcome {
            Outcome::ExcludedNotFrontal => "excluded-not-frontal".to_string(),
            Outcome::ExcludedMetal => "excluded-metal".to_string(),
            Outcome::Analyzed { .. } => "analyzed".to_string(),
            Outcome::Failed { stage, .. } => format!("failed-{stage}"),
        };
        *m.entry(k).or_insert(0) += 1;
    }
    m
}

pub fn run(ctx: &Context, split: Split) -> Result<RunSummary> {
    let clock = Clock::start();
    let (ds, meta) = ctx.load_dataset()?;
    let (pipeline, models) = build_pipeline(ctx, &ds)?;
    let disp = workflow::run_split(&ds, &pipeline, split);
    let dir = ctx.out.run_dir(split.name());
    let mut lines = String::new();
    for d in &disp {
        lines.push_str(&serde_json::to_string(d)?);
        lines.push('\n');
    }
    store::write_atomic(&dir.join("dispositions.jsonl"), lines.as_bytes())?;
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        config_hash: ctx.config.hash(),
        dataset_hash: meta.content_hash.clone(),
        split,
        models,
        frontal_threshold: pipeline.config().frontal_threshold,
        metal_threshold: pipeline.config().metal_threshold,
        counts: outcome_counts(&disp),
    };
    store::write_json(&dir.join("summary.json"), &summary)?;
    for (k, v) in &summary.counts {
        ctx.say(format!("{k:<24} {v}"));
    }
    let mut rec = ExperimentRecord::new(ctx, "run", None, Some(meta.content_hash));
    rec.metrics = serde_json::to_value(&summary.counts)?;
    rec.artifacts = vec![dir.join("dispositions.jsonl"), dir.join("summary.json")];
    rec.timing = clock.stop();
    ctx.record(rec)?;
    check_finite(&disp)?;
    Ok(summary)
}

/// Stage-isolated gate and box quality on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub frontal: GateReport,
    pub metal: GateReport,
    pub bounding: BoxReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub dataset_hash: String,
    pub models: Vec<ModelInfo>,
    pub frontal_threshold: f64,
    pub metal_threshold: f64,
    pub fracture: FractureEval,
    pub table: MetricsTable,
    /// Present when every stage runs a trained network.
    pub gates: Option<GateSummary>,
}

fn gate_summary(
    ctx: &Context,
    ds: &Dataset,
    pipeline: &Pipeline,
    split: Split,
) -> Result<Option<GateSummary>> {
    let p = pipeline.config();
    if [&p.frontal, &p.bounding, &p.metal]
        .iter()
        .any(|m| m.backend != "cnn")
    {
        return Ok(None);
    }
    let net = |stage: Stage| -> Result<hipline::nnet::Network<f32>> {
        let path = p
            .model(stage)
            .checkpoint
            .clone()
            .expect("cnn checkpoint resolved");
        load_checkpoint(&path)?.network::<f32>()
    };
    Ok(Some(GateSummary {
        frontal: workflow::evaluate_gate(
            ds,
            &ctx.config,
            Stage::Frontal,
            &net(Stage::Frontal)?,
            split,
            p.frontal_threshold,
        )?,
        metal: workflow::evaluate_gate(
            ds,
            &ctx.config,
            Stage::Metal,
            &net(Stage::Metal)?,
            split,
            p.metal_threshold,
        )?,
        bounding: workflow::evaluate_boxes(ds, &net(Stage::Bounding)?, split)?,
    }))
}

pub fn eval(ctx: &Context, split: Split, protocol: Protocol) -> Result<(EvalReport, RocCurve)> {
    let clock = Clock::start();
    let (ds, meta) = ctx.load_dataset()?;
    let (pipeline, models) = build_pipeline(ctx, &ds)?;
    let val = workflow::run_split(&ds, &pipeline, Split::Val);
    let test = workflow::run_split(&ds, &pipeline, split);
    check_finite(&val)?;
    check_finite(&test)?;
    let (fracture, curve) =
        workflow::evaluate_fracture(&ds, &val, &test, split, &ctx.config.evaluation, protocol)?;
    let table = MetricsTable {
        rows: fracture
            .operating_points
            .iter()
            .map(|op| TableRow {
                name: match op.mode {
                    hipline::metrics::OperatingMode::HighPrecision => "High precision".into(),
                    hipline::metrics::OperatingMode::HighRecall => "High recall".into(),
                },
                threshold: op.threshold,
                counts: op.metrics.counts,
                metrics: op.intervals,
            })
            .collect(),
    };
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        config_hash: ctx.config.hash(),
        dataset_hash: meta.content_hash.clone(),
        models,
        frontal_threshold: pipeline.config().frontal_threshold,
        metal_threshold: pipeline.config().metal_threshold,
        gates: gate_summary(ctx, &ds, &pipeline, split)?,
        fracture,
        table,
    };
    let protocol_name = match protocol {
        Protocol::Full => "full",
        Protocol::Balanced => "balanced",
    };
    let dir = ctx.out.eval_dir(split.name(), protocol_name);
    store::write_json(&dir.join("metrics.json"), &report)?;
    store::write_atomic(&dir.join("roc.csv"), curve.to_csv().as_bytes())?;
    let title = format!(
        "Fracture ROC, {} split, {protocol_name} protocol (AUC {:.4})",
        split.name(),
        curve.auc
    );
    store::write_atomic(&dir.join("roc.svg"), curve.to_svg(&title).as_bytes())?;
    store::write_atomic(&dir.join("table.txt"), report.table.to_text().as_bytes())?;
    ctx.snapshot_config()?;
    ctx.say(format!(
        "{} split, {protocol_name} protocol: {} hips evaluated, prevalence {:.4}, AUC {:.5}",
        split.name(),
        report.fracture.evaluated,
        report.fracture.prevalence,
        report.fracture.auc
    ));
    ctx.say(report.table.to_text());
    if let Some(g) = &report.gates {
        ctx.say(format!(
            "frontal gate acc {:.4} prec {:.4} rec {:.4}; implant gate prec {:.4} rec {:.4}; box adequacy {:.4}",
            g.frontal.metrics.accuracy,
            g.frontal.metrics.precision,
            g.frontal.metrics.recall,
            g.metal.metrics.precision,
            g.metal.metrics.recall,
            g.bounding.adequacy
        ));
    }
    let mut rec =
        ExperimentRecord::new(ctx, "eval", Some(Stage::Fracture), Some(meta.content_hash));
    rec.metrics = serde_json::to_value(&report)?;
    rec.artifacts = ["metrics.json", "roc.csv", "roc.svg", "table.txt"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    rec.timing = clock.stop();
    ctx.record(rec)?;
    Ok((report, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub dataset_hash: String,
    pub reviewer: String,
    pub population: usize,
    pub rounds: Vec<hipline::labelloop::RoundRecord>,
    pub reviewed: usize,
    pub reviewed_fraction: f64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    /// Audited accuracy after every applied decision.
    pub accuracy_trace: Vec<f64>,
    pub finished: bool,
}

/// Run the cleaning loop. Automatic reviewers finish it here and rewrite
/// the manifest labels; the external reviewer leaves round one open for
/// `serve-review`.
pub fn clean_labels(ctx: &Context, reviewer: Option<&str>) -> Result<CleaningReport> {
    let clock = Clock::start();
    let (mut ds, meta) = ctx.load_dataset()?;
    let mut cfg = ctx.config.clone();
    if let Some(r) = reviewer {
        cfg.label_loop.reviewer = r.to_string();
    }
    let registry = ReviewerRegistry::default();
    let name = cfg.label_loop.reviewer.clone();
    let report = if name == "external" {
        let (pop, labels, mut scorer) = workflow::loop_inputs(&ds, &cfg)?;
        let truth = hidden_truth(&ds, &pop.ids());
        let auditor = Auditor::new(truth);
        let accuracy = auditor.accuracy(&labels);
        let mut state = LoopState::new(cfg.label_loop.clone(), labels)?;
        state.start(&pop, &mut scorer)?;
        store::write_json(&ctx.out.loop_state(), &state)?;
        ctx.say(format!(
            "round {} opened with {} items; adjudicate them with `serve-review`",
            state.round,
            state.pending().count()
        ));
        CleaningReport {
            schema_version: SCHEMA_VERSION,
            config_hash: cfg.hash(),
            dataset_hash: meta.content_hash.clone(),
            reviewer: name.clone(),
            population: state.population,
            rounds: state.history.clone(),
            reviewed: state.reviewed,
            reviewed_fraction: 0.0,
            initial_accuracy: accuracy,
            final_accuracy: accuracy,
            accuracy_trace: vec![accuracy],
            finished: false,
        }
    } else {
        let out = workflow::clean_labels(&mut ds, &cfg, &registry)?;
        store::write_labels(&ctx.data_dir, &ds, &meta)?;
        store::write_json(&ctx.out.loop_state(), &out.state)?;
        for r in &out.state.history {
            ctx.say(format!(
                "round {} {:?}: threshold {:.4}, queued {}, reviewed {}, flipped {}",
                r.round, r.kind, r.threshold, r.queued, r.reviewed, r.flipped
            ));
        }
        ctx.say(format!(
            "label accuracy {:.4} -> {:.4}, reviewed {:.2}% of {} images",
            out.initial_accuracy,
            out.final_accuracy,
            100.0 * out.reviewed_fraction,
            out.state.population
        ));
        CleaningReport {
            schema_version: SCHEMA_VERSION,
            config_hash: cfg.hash(),
            dataset_hash: meta.content_hash.clone(),
            reviewer: name.clone(),
            population: out.state.population,
            rounds: out.state.history.clone(),
            reviewed: out.state.reviewed,
            reviewed_fraction: out.reviewed_fraction,
            initial_accuracy: out.initial_accuracy,
            final_accuracy: out.final_accuracy,
            accuracy_trace: out.accuracy_trace,
            finished: out.state.phase == Phase::Done,
        }
    };
    store::write_json(&ctx.out.loop_report(), &report)?;
    let mut rec = ExperimentRecord::new(
        ctx,
        "clean-labels",
        Some(Stage::Fracture),
        Some(meta.content_hash),
    );
    rec.metrics = serde_json::json!({
        "reviewer": report.reviewer,
        "initial_accuracy": report.initial_accuracy,
        "final_accuracy": report.final_accuracy,
        "reviewed_fraction": report.reviewed_fraction,
        "rounds": report.rounds,
    });
    rec.artifacts = vec![ctx.out.loop_state(), ctx.out.loop_report()];
    rec.timing = clock.stop();
    ctx.record(rec)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub dataset_hash: String,
    pub table: AblationTable,
}

pub fn ablate(ctx: &Context, seeds: &[u64]) -> Result<AblationReport> {
    let clock = Clock::start();
    let (ds, meta) = ctx.load_dataset()?;
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let table = workflow::ablation(&ds, &ctx.config, &TechniqueMask::standard_set(), seeds)?;
    for r in &table.rows {
        let aucs: Vec<String> = r.aucs.iter().map(|a| format!("{a:.5}")).collect();
        ctx.say(format!(
            "{:<24} mean AUC {:.5}  [{}]",
            r.label,
            r.mean_auc,
            aucs.join(", ")
        ));
    }
    let report = AblationReport {
        schema_version: SCHEMA_VERSION,
        config_hash: ctx.config.hash(),
        dataset_hash: meta.content_hash.clone(),
        table,
    };
    store::write_json(&ctx.out.ablation(), &report)?;
    let mut rec = ExperimentRecord::new(
        ctx,
        "ablate",
        Some(Stage::Fracture),
        Some(meta.content_hash),
    );
    rec.metrics = serde_json::to_value(&report.table)?;
    rec.artifacts = vec![ctx.out.ablation()];
    rec.timing = clock.stop();
    ctx.record(rec)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub dataset_hash: String,
    pub stage: String,
    pub grid: GridSpec,
    pub records: Vec<GridRecord>,
}

/// Ranked sweep. Each point is also logged as its own experiment record.
pub fn grid_search(ctx: &Context, stage: Stage, grid: &GridSpec) -> Result<GridReport> {
    let (ds, meta) = ctx.load_dataset()?;
    // reject an empty or malformed grid before any training
    workflow::grid_points(&ctx.config.stage(stage), grid)?;
    let mut clock = Clock::start();
    let mut logged = Vec::new();
    let records = workflow::grid_search(&ds, &ctx.config, stage, grid, |point, run| {
        let mut rec = ExperimentRecord::new(
            ctx,
            "grid-point",
            Some(stage),
            Some(meta.content_hash.clone()),
        );
        rec.epochs = run.history.clone();
        rec.metrics = serde_json::json!({ "params": point.params, "setup_hash": point.setup_hash });
        rec.timing = clock.stop();
        logged.push(rec);
        clock = Clock::start();
    })?;
    for rec in logged {
        ctx.record(rec)?;
    }
    for r in &records {
        ctx.say(format!(
            "#{} score {:.6} {}",
            r.rank,
            r.score,
            serde_json::to_string(&r.point.params)?
        ));
    }
    let report = GridReport {
        schema_version: SCHEMA_VERSION,
        config_hash: ctx.config.hash(),
        dataset_hash: meta.content_hash,
        stage: stage.name().to_string(),
        grid: grid.clone(),
        records,
    };
    store::write_json(&ctx.out.grid(stage.name()), &report)?;
    Ok(report)
}
