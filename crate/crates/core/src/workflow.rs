//! End-to-end operations over a dataset and a [`RunConfig`]: generation,
//! per-stage training and evaluation, pipeline runs, fracture evaluation,
//! label cleaning, augmentation ablation and grid search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{ablation_run, AblationTable, TechniqueMask};
use crate::config::{EvalConfig, Precision, RunConfig, StageSetup};
use crate::error::{Error, Result};
use crate::labelloop::{
    hidden_truth, Auditor, CnnScorer, LabelStore, LoopState, Population, ReviewerRegistry,
};
use crate::metrics::{
    balanced_subsample, pick_operating_point, roc_curve, with_intervals, ConfusionCounts,
    ConfusionMetrics, MetricsWithCi, OperatingMode, RocCurve,
};
use crate::nnet::{
    batch_tensor, evaluate, train, Checkpoint, EpochRecord, HeadKind, Network, Sample, TrainOptions,
};
use crate::phantom::{generate_dataset, inject_label_noise, Dataset, NoiseReport, Split, View};
use crate::pipeline::{
    box_from_logits, check_adequacy, fit_input, frontal_passes, metal_passes, presence_only,
    sigmoid, stage_samples, Disposition, Outcome, Pipeline, Stage, StageInput,
};
use crate::tensor::Scalar;

/// Generate the phantom dataset and apply the configured initial noise.
pub fn generate(cfg: &RunConfig) -> Result<(Dataset, Option<NoiseReport>)> {
    cfg.validate()?;
    let mut ds = generate_dataset(&cfg.phantom_spec(), &cfg.splits)?;
    let splits = cfg
        .noise
        .as_ref()
        .map(|n| n.splits.clone())
        .unwrap_or_default();
    let report = match cfg.noise_config(eligible_prevalence(&ds, &splits))? {
        Some(n) => Some(inject_label_noise(&mut ds, &n)?),
        None => None,
    };
    Ok((ds, report))
}

/// Fracture prevalence among frontal implant-free hips of `splits`.
pub fn eligible_prevalence(ds: &Dataset, splits: &[Split]) -> f64 {
    let (mut n, mut pos) = (0usize, 0usize);
    for (c, h, _) in ds.hips() {
        if splits.contains(&c.split) && h.fracture_eligible(c.view) {
            n += 1;
            pos += h.fracture as usize;
        }
    }
    if n == 0 {
        0.0
    } else {
        pos as f64 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: Split,
    pub hips: usize,
    pub frontal: usize,
    pub metal: usize,
    pub fractures: usize,
    /// Fractures over all hip images of the split.
    pub prevalence: f64,
    pub label_errors: usize,
}

pub fn summarize(ds: &Dataset) -> Vec<SplitSummary> {
    Split::ALL
        .iter()
        .map(|&split| {
            let mut s = SplitSummary {
                split,
                hips: 0,
                frontal: 0,
                metal: 0,
                fractures: 0,
                prevalence: 0.0,
                label_errors: 0,
            };
            for (c, h, _) in ds.hips_in(split) {
                s.hips += 1;
                s.frontal += (c.view == View::Frontal) as usize;
                s.metal += h.metal as usize;
                s.fractures += h.fracture as usize;
                s.label_errors += (h.label.fracture != h.fracture) as usize;
            }
            s.prevalence = if s.hips == 0 {
                0.0
            } else {
                s.fractures as f64 / s.hips as f64
            };
            s
        })
        .collect()
}

/// Training and validation samples of a stage under `setup`.
pub fn stage_data(
    ds: &Dataset,
    cfg: &RunConfig,
    stage: Stage,
    setup: &StageSetup,
    split: Split,
) -> Result<Vec<Sample>> {
    let s = stage_samples(
        ds,
        stage,
        split,
        setup.arch.input_size,
        cfg.pipeline.roi_output_size,
    )?;
    Ok(
        if stage == Stage::Fracture && setup.arch.head == HeadKind::Binary {
            presence_only(s)
        } else {
            s
        },
    )
}

#[derive(Clone, Debug)]
pub struct StageRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

fn train_typed<T: Scalar>(
    setup: &StageSetup,
    resume: Option<&Checkpoint>,
    train_set: &[Sample],
    val_set: &[Sample],
    opts: TrainOptions<'_>,
) -> Result<crate::nnet::TrainReport> {
    let spec = setup.network_spec()?;
    let mut net = match resume {
        Some(c) => c.to_network::<T>(&spec)?,
        None => Network::<T>::init(spec, setup.training.seed),
    };
    train(&mut net, train_set, val_set, &setup.training, opts)
}

/// Train one stage on the training split, logging validation metrics.
/// `setup` overrides the configured stage setup (seeds already mixed).
pub fn train_stage(
    ds: &Dataset,
    cfg: &RunConfig,
    stage: Stage,
    setup: Option<&StageSetup>,
    resume: Option<&Checkpoint>,
    on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<StageRun> {
    let setup = match setup {
        Some(s) => s.clone(),
        None => cfg.stage(stage),
    };
    let train_set = stage_data(ds, cfg, stage, &setup, Split::Train)?;
    let val_set = stage_data(ds, cfg, stage, &setup, Split::Val)?;
    let start_epoch = resume.map_or(0, |c| c.header.metadata.epoch);
    // a resumed run continues up to the configured epoch count
    let mut run_setup = setup.clone();
    run_setup.training.epochs = setup.training.epochs.saturating_sub(start_epoch);
    let opts = TrainOptions {
        start_epoch,
        stage: Some(stage.name().to_string()),
        dataset_hash: Some(ds.content_hash()),
        on_epoch,
    };
    let report = match cfg.precision {
        Precision::F32 => train_typed::<f32>(&run_setup, resume, &train_set, &val_set, opts)?,
        Precision::F64 => train_typed::<f64>(&run_setup, resume, &train_set, &val_set, opts)?,
    };
    let mut checkpoint = report.checkpoint;
    checkpoint.header.metadata.config = serde_json::to_value(&setup)?;
    checkpoint.header.metadata.config_hash = cfg.hash();
    Ok(StageRun {
        checkpoint,
        history: report.history,
    })
}

/// Refuse a checkpoint trained on different images.
pub fn check_pairing(ds: &Dataset, ckpt: &Checkpoint) -> Result<()> {
    let want = ds.content_hash();
    match &ckpt.header.metadata.dataset_hash {
        Some(h) if *h == want => Ok(()),
        Some(h) => Err(Error::data(format!(
            "checkpoint for stage {:?} was trained on dataset {}…, not this dataset {}…",
            ckpt.header.metadata.stage,
            &h[..h.len().min(12)],
            &want[..12]
        ))),
        None => Err(Error::data(
            "checkpoint does not record its training dataset",
        )),
    }
}

fn counts_from(pred: impl Iterator<Item = bool>, labels: &[bool]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (p, &y) in pred.zip(labels) {
        match (p, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// A gate's detection quality: positives are frontal views for the frontal
/// gate and implants for the implant gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub stage: Stage,
    pub threshold: f64,
    pub auc: Option<f64>,
    pub metrics: ConfusionMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxReport {
    pub adequate: usize,
    pub total: usize,
    pub adequacy: f64,
    pub mean_abs_error: [f64; 4],
}

pub fn gate_report(
    stage: Stage,
    logits: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<GateReport> {
    let pred = logits.iter().map(|&s| match stage {
        Stage::Metal => !metal_passes(s, threshold),
        _ => frontal_passes(s, threshold),
    });
    let counts = counts_from(pred, labels);
    let auc = roc_curve(logits, labels).ok().map(|c| c.auc);
    Ok(GateReport {
        stage,
        threshold,
        auc,
        metrics: counts.metrics(),
    })
}

fn presence_labels(samples: &[Sample]) -> Vec<bool> {
    samples
        .iter()
        .map(|s| s.target.presence().unwrap_or(false))
        .collect()
}

/// Raw gate logits and their positive labels on a split.
pub fn gate_logits(
    ds: &Dataset,
    cfg: &RunConfig,
    stage: Stage,
    net: &Network<f32>,
    split: Split,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if !matches!(stage, Stage::Frontal | Stage::Metal) {
        return Err(Error::invalid(format!("{} is not a gate", stage.name())));
    }
    let setup = cfg.stage(stage);
    let samples = stage_data(ds, cfg, stage, &setup, split)?;
    let (_, logits) = evaluate(net, &samples, 1.0)?;
    Ok((logits, presence_labels(&samples)))
}

/// Evaluate a gate network on a split at the given pass threshold.
pub fn evaluate_gate(
    ds: &Dataset,
    cfg: &RunConfig,
    stage: Stage,
    net: &Network<f32>,
    split: Split,
    threshold: f64,
) -> Result<GateReport> {
    let (logits, labels) = gate_logits(ds, cfg, stage, net, split)?;
    gate_report(stage, &logits, &labels, threshold)
}

/// Implant-gate pass threshold from validation scores: the middle (in logit
/// space) of the cutoffs that exclude every implant while keeping
/// precision at least `min_precision`. Falls back to the highest-recall
/// cutoff meeting the precision floor, then to the default 0.5.
pub fn tune_metal_threshold(logits: &[f64], is_metal: &[bool], min_precision: f64) -> f64 {
    if logits.len() != is_metal.len() || !is_metal.contains(&true) {
        return 0.5;
    }
    let mut distinct: Vec<f64> = logits.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    // cutoff c excludes s > c; every c inside one of these intervals
    // produces the same decisions
    let mut intervals = vec![(distinct[0] - 1.0, distinct[0])];
    intervals.extend(distinct.windows(2).map(|w| (w[0], w[1])));
    let decide = |c: f64| {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&s, &m) in logits.iter().zip(is_metal) {
            match (s > c, m) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        (fn_, precision)
    };
    let mid = |(lo, hi): (f64, f64)| 0.5 * (lo + hi);
    let feasible: Vec<(f64, f64)> = intervals
        .iter()
        .copied()
        .filter(|&iv| {
            let (missed, p) = decide(mid(iv));
            missed == 0 && p >= min_precision
        })
        .collect();
    let cut = match (feasible.first(), feasible.last()) {
        (Some(first), Some(last)) => {
            let target = 0.5 * (first.0 + last.1);
            if feasible.iter().any(|&(lo, hi)| lo < target && target < hi) {
                target
            } else {
                let nearest = feasible
                    .iter()
                    .copied()
                    .min_by(|a, b| {
                        (mid(*a) - target)
                            .abs()
                            .total_cmp(&(mid(*b) - target).abs())
                    })
                    .expect("nonempty");
                mid(nearest)
            }
        }
        _ => {
            // no cutoff excludes every implant at the precision floor: keep
            // the floor and miss as few implants as possible
            let best = intervals
                .iter()
                .copied()
                .map(|iv| (iv, decide(mid(iv))))
                .filter(|(_, (_, p))| *p >= min_precision)
                .min_by(|a, b| a.1 .0.cmp(&b.1 .0).then(a.0 .0.total_cmp(&b.0 .0)));
            match best {
                Some((iv, _)) => mid(iv),
                None => return 0.5,
            }
        }
    };
    sigmoid(-cut.clamp(-30.0, 30.0))
}

/// Box adequacy of a bounding network on the frontal hips of a split.
pub fn evaluate_boxes(ds: &Dataset, net: &Network<f32>, split: Split) -> Result<BoxReport> {
    let size = net.input_size();
    let hips: Vec<_> = ds
        .hips_in(split)
        .filter(|(c, _, _)| c.view == View::Frontal)
        .collect();
    let mut adequate = 0;
    let mut err = [0.0f64; 4];
    for chunk in hips.chunks(64) {
        let inputs: Vec<Vec<f32>> = chunk
            .iter()
            .map(|(_, _, img)| fit_input(img, size).data)
            .collect();
        let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
        let out = net.predict(&batch_tensor::<f32>(&refs, size)?)?;
        let v = out
            .bbox
            .ok_or_else(|| Error::invalid("network has no box head"))?
            .to_f64_vec();
        for ((_, hip, img), b) in chunk.iter().zip(v.chunks(4)) {
            let bb = box_from_logits([b[0], b[1], b[2], b[3]]);
            adequate += check_adequacy(&bb, &hip.landmarks, img.width, img.height) as usize;
            for (e, (p, t)) in err
                .iter_mut()
                .zip(bb.as_array().iter().zip(hip.true_bbox.as_array()))
            {
                *e += (p - t).abs();
            }
        }
    }
    let total = hips.len();
    Ok(BoxReport {
        adequate,
        total,
        adequacy: if total == 0 {
            0.0
        } else {
            adequate as f64 / total as f64
        },
        mean_abs_error: err.map(|e| e / total.max(1) as f64),
    })
}

/// Dispositions for every hip of a split, in dataset order.
pub fn run_split(ds: &Dataset, pipeline: &Pipeline, split: Split) -> Vec<Disposition> {
    let inputs: Vec<StageInput<'_>> = ds
        .hips_in(split)
        .map(|(_, h, image)| StageInput {
            image_id: &h.image_id,
            image,
        })
        .collect();
    pipeline.run(&inputs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Every analysed hip of the split.
    Full,
    /// All positives plus as many randomly drawn negatives.
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingReport {
    pub mode: OperatingMode,
    pub target: f64,
    /// Chosen on the validation split.
    pub threshold: f64,
    pub feasible_on_validation: bool,
    pub metrics: ConfusionMetrics,
    pub intervals: MetricsWithCi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractureEval {
    pub split: Split,
    pub protocol: Protocol,
    pub hips: usize,
    pub analyzed: usize,
    pub excluded_not_frontal: usize,
    pub excluded_metal: usize,
    pub failed: usize,
    /// Fracture-eligible hips the gates did not let through.
    pub eligible_not_analyzed: usize,
    pub evaluated: usize,
    pub positives: usize,
    pub prevalence: f64,
    pub auc: f64,
    pub alpha: f64,
    pub operating_points: Vec<OperatingReport>,
}

/// `(scores, labels)` of analysed hips; labels are the reference
/// standard (`truth`) or the current labels.
fn analyzed_scores(
    ds: &Dataset,
    disp: &[Disposition],
    truth: bool,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut s = Vec::new();
    let mut y = Vec::new();
    for d in disp {
        if let Outcome::Analyzed { score } = d.outcome {
            let (_, h, _) = ds.hip(&d.image_id).ok_or_else(|| {
                Error::data(format!("disposition for unknown image {}", d.image_id))
            })?;
            s.push(score);
            y.push(if truth { h.fracture } else { h.label.fracture });
        }
    }
    Ok((s, y))
}

/// Fracture metrics on `test` dispositions with both operating points
/// chosen on `val` dispositions.
pub fn evaluate_fracture(
    ds: &Dataset,
    val: &[Disposition],
    test: &[Disposition],
    split: Split,
    eval: &EvalConfig,
    protocol: Protocol,
) -> Result<(FractureEval, RocCurve)> {
    let (vs, vy) = analyzed_scores(ds, val, false)?;
    let val_curve = roc_curve(&vs, &vy)
        .map_err(|e| Error::data(format!("validation split cannot set operating points: {e}")))?;
    let (mut ts, mut ty) = analyzed_scores(ds, test, true)?;
    if protocol == Protocol::Balanced {
        let keep = balanced_subsample(&ty, eval.balanced_seed)?;
        ts = keep.iter().map(|&i| ts[i]).collect();
        ty = keep.iter().map(|&i| ty[i]).collect();
    }
    let curve = roc_curve(&ts, &ty)?;
    let mut ops = Vec::new();
    for (mode, target) in [
        (OperatingMode::HighPrecision, eval.high_precision_target),
        (OperatingMode::HighRecall, eval.high_recall_target),
    ] {
        let op = pick_operating_point(&val_curve, mode, target);
        let metrics = crate::metrics::confusion_at(&ts, &ty, op.threshold)?;
        ops.push(OperatingReport {
            mode,
            target,
            threshold: op.threshold,
            feasible_on_validation: op.feasible,
            intervals: with_intervals(&metrics, eval.alpha)?,
            metrics,
        });
    }
    let count = |f: fn(&Outcome) -> bool| test.iter().filter(|d| f(&d.outcome)).count();
    let eligible_not_analyzed = test
        .iter()
        .filter(|d| !matches!(d.outcome, Outcome::Analyzed { .. }))
        .filter(|d| {
            ds.hip(&d.image_id)
                .is_some_and(|(c, h, _)| h.fracture_eligible(c.view))
        })
        .count();
    let positives = ty.iter().filter(|&&y| y).count();
    Ok((
        FractureEval {
            split,
            protocol,
            hips: test.len(),
            analyzed: count(|o| matches!(o, Outcome::Analyzed { .. })),
            excluded_not_frontal: count(|o| matches!(o, Outcome::ExcludedNotFrontal)),
            excluded_metal: count(|o| matches!(o, Outcome::ExcludedMetal)),
            failed: count(|o| matches!(o, Outcome::Failed { .. })),
            eligible_not_analyzed,
            evaluated: ty.len(),
            positives,
            prevalence: positives as f64 / ty.len().max(1) as f64,
            auc: curve.auc,
            alpha: eval.alpha,
            operating_points: ops,
        },
        curve,
    ))
}

/// Validation AUC per augmentation mask and seed for the fracture stage.
pub fn ablation(
    ds: &Dataset,
    cfg: &RunConfig,
    masks: &[TechniqueMask],
    seeds: &[u64],
) -> Result<AblationTable> {
    let setup = cfg.stage(Stage::Fracture);
    let train_set = stage_data(ds, cfg, Stage::Fracture, &setup, Split::Train)?;
    let val_set = stage_data(ds, cfg, Stage::Fracture, &setup, Split::Val)?;
    let mut training = setup.training.clone();
    if training.augmentation.is_none() {
        training.augmentation = Some(Default::default());
    }
    ablation_run(
        &setup.network_spec()?,
        &train_set,
        &val_set,
        &training,
        masks,
        seeds,
    )
}

/// Hyperparameter grid: dotted paths into a [`StageSetup`] (for example
/// `training.learning_rate` or `arch.growth_rate`) and the values to try.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridSpec(pub BTreeMap<String, Vec<serde_json::Value>>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub params: BTreeMap<String, serde_json::Value>,
    pub setup: StageSetup,
    pub setup_hash: String,
}

/// Cartesian product of the grid applied to `base`, in key order.
pub fn grid_points(base: &StageSetup, grid: &GridSpec) -> Result<Vec<GridPoint>> {
    if grid.0.is_empty() || grid.0.values().any(Vec::is_empty) {
        return Err(Error::invalid(
            "grid is empty: every listed parameter needs at least one value",
        ));
    }
    let mut combos: Vec<BTreeMap<String, serde_json::Value>> = vec![BTreeMap::new()];
    for (key, values) in &grid.0 {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.insert(key.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|params| {
            let mut doc = serde_json::to_value(base)?;
            for (key, v) in &params {
                let pointer = format!("/{}", key.replace('.', "/"));
                let slot = doc.pointer_mut(&pointer).ok_or_else(|| {
                    Error::invalid(format!("grid key {key} does not name a stage setting"))
                })?;
                *slot = v.clone();
            }
            let setup: StageSetup = serde_json::from_value(doc)?;
            setup.training.validate()?;
            setup.effective_arch().validate()?;
            let setup_hash = hex::encode(Sha256::digest(serde_json::to_vec(&setup)?));
            Ok(GridPoint {
                params,
                setup,
                setup_hash,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub rank: usize,
    pub point: GridPoint,
    /// Final-epoch validation AUC, or minus the validation loss for box
    /// regression.
    pub score: f64,
    pub history: Vec<EpochRecord>,
}

/// Train every grid point and rank by validation score, ties by setup hash.
pub fn grid_search(
    ds: &Dataset,
    cfg: &RunConfig,
    stage: Stage,
    grid: &GridSpec,
    mut on_point: impl FnMut(&GridPoint, &StageRun),
) -> Result<Vec<GridRecord>> {
    let points = grid_points(&cfg.stage(stage), grid)?;
    let mut records = Vec::with_capacity(points.len());
    for point in points {
        let run = train_stage(ds, cfg, stage, Some(&point.setup), None, None)?;
        on_point(&point, &run);
        let last = run.history.last();
        let score = last
            .and_then(|r| r.val_auc.or(r.val_loss.map(|l| -l)))
            .unwrap_or(f64::NEG_INFINITY);
        records.push(GridRecord {
            rank: 0,
            point,
            score,
            history: run.history,
        });
    }
    records.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.point.setup_hash.cmp(&b.point.setup_hash))
    });
    for (i, r) in records.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(records)
}

/// The label-cleaning population of a dataset and the scorer that retrains
/// the fracture model each round.
pub fn loop_inputs(ds: &Dataset, cfg: &RunConfig) -> Result<(Population, LabelStore, CnnScorer)> {
    let setup = cfg.stage(Stage::Fracture);
    let (pop, labels) = Population::from_dataset(
        ds,
        &[Split::Train, Split::Val],
        setup.arch.input_size,
        cfg.pipeline.roi_output_size,
    )?;
    let scorer = CnnScorer {
        arch: setup.effective_arch(),
        training: setup.training,
    };
    Ok((pop, labels, scorer))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleaningOutcome {
    pub state: LoopState,
    /// Audited accuracy before the loop and after every applied decision.
    pub accuracy_trace: Vec<f64>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub reviewed_fraction: f64,
}

/// Run the cleaning loop with a named automatic reviewer and write the
/// resulting labels into `ds`.
pub fn clean_labels(
    ds: &mut Dataset,
    cfg: &RunConfig,
    reviewers: &ReviewerRegistry,
) -> Result<CleaningOutcome> {
    let (pop, labels, mut scorer) = loop_inputs(ds, cfg)?;
    let truth = hidden_truth(ds, &pop.ids());
    let mut reviewer = reviewers.create(&cfg.label_loop.reviewer, Some(&truth))?;
    let mut auditor = Auditor::new(truth);
    auditor.record(&labels);
    let mut state = LoopState::new(cfg.label_loop.clone(), labels)?;
    state.run(&pop, &mut scorer, reviewer.as_mut(), &mut |l| {
        auditor.record(l)
    })?;
    crate::labelloop::apply_labels(ds, &state.labels)?;
    let final_accuracy = auditor.accuracy(&state.labels);
    Ok(CleaningOutcome {
        initial_accuracy: auditor.trace[0],
        final_accuracy,
        reviewed_fraction: state.reviewed as f64 / state.population.max(1) as f64,
        accuracy_trace: auditor.trace,
        state,
    })
}
