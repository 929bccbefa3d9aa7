//! Randomised invariants of the pipeline, metrics, phantom and checkpoint code.

use std::collections::BTreeMap;

use hipline::labelloop::{enumerate_discrepancies, QueueKind};
use hipline::metrics::{balanced_subsample, roc_curve, RocCurve};
use hipline::nnet::{build_network, ArchConfig, Checkpoint, HeadKind, Network, TrainingMetadata};
use hipline::phantom::{
    generate_dataset, inject_label_noise, LabelProvenance, LabelSource, NoiseConfig, NoiseMode,
    PhantomSpec, Split, SplitCounts, View,
};
use hipline::pipeline::{
    check_adequacy, crop_roi, crop_roi_with, Outcome, Pipeline, PipelineConfig, Stage, StageInput,
    StageModel, StageOutput,
};
use hipline::raster::{BoundingBox, Image, Point};
use hipline::Result;
use proptest::prelude::*;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logit values including the awkward ones.
fn logit() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => -12.0..12.0f64,
        1 => Just(f64::NAN),
        1 => Just(f64::INFINITY),
        1 => Just(0.0),
    ]
}

#[derive(Clone, Debug)]
struct Scripted {
    frontal: f64,
    bbox: [f64; 4],
    metal: f64,
    fracture: f64,
}

fn scripted() -> impl Strategy<Value = Scripted> {
    (logit(), prop::array::uniform4(logit()), logit(), logit()).prop_map(
        |(frontal, bbox, metal, fracture)| Scripted {
            frontal,
            bbox,
            metal,
            fracture,
        },
    )
}

/// Answers from a table keyed by image id.
struct TableModel {
    stage: Stage,
    table: BTreeMap<String, Scripted>,
}

impl StageModel for TableModel {
    fn stage(&self) -> Stage {
        self.stage
    }

    fn input_size(&self) -> Option<usize> {
        None
    }

    fn infer(&self, inputs: &[StageInput<'_>]) -> Result<Vec<StageOutput>> {
        Ok(inputs
            .iter()
            .map(|i| {
                let s = &self.table[i.image_id];
                match self.stage {
                    Stage::Frontal => StageOutput::Logit(s.frontal),
                    Stage::Bounding => StageOutput::Box(s.bbox),
                    Stage::Metal => StageOutput::Logit(s.metal),
                    Stage::Fracture => StageOutput::Logit(s.fracture),
                }
            })
            .collect())
    }
}

/// Outcome the gate rules call for, written out step by step.
fn expected_outcome(s: &Scripted, tf: f64, tm: f64) -> (&'static str, usize) {
    if !s.frontal.is_finite() {
        return ("failed-frontal", 0);
    }
    if logistic(s.frontal) < tf {
        return ("not-frontal", 1);
    }
    if s.bbox.iter().any(|v| !v.is_finite()) {
        return ("failed-bounding", 1);
    }
    let b = s.bbox.map(logistic);
    let (cx, cy, w, h) = (b[0], b[1], b[2], b[3]);
    let overlaps = w > 0.0
        && h > 0.0
        && cx - w / 2.0 < 1.0
        && cx + w / 2.0 > 0.0
        && cy - h / 2.0 < 1.0
        && cy + h / 2.0 > 0.0;
    if !overlaps {
        return ("failed-bounding", 1);
    }
    if !s.metal.is_finite() {
        return ("failed-metal", 2);
    }
    if 1.0 - logistic(s.metal) < tm {
        return ("metal", 3);
    }
    if !s.fracture.is_finite() {
        return ("failed-fracture", 3);
    }
    ("analyzed", 4)
}

fn outcome_name(o: &Outcome) -> String {
    match o {
        Outcome::ExcludedNotFrontal => "not-frontal".into(),
        Outcome::ExcludedMetal => "metal".into(),
        Outcome::Analyzed { .. } => "analyzed".into(),
        Outcome::Failed { stage, .. } => format!("failed-{stage}"),
    }
}

fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(
                    prop_oneof![(-5.0..5.0f64), (0..6u8).prop_map(|k| k as f64 * 0.5)],
                    n,
                ),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_map(|(s, mut y)| {
            y[0] = true;
            y[1] = false;
            (s, y)
        })
}

fn provenance_rank(p: LabelProvenance) -> (u8, u32) {
    let stage = match p.source {
        LabelSource::SyntheticTruth => 0,
        LabelSource::NoisyInitial => 1,
        LabelSource::OracleReview | LabelSource::HumanReview => 2,
    };
    (stage, p.round)
}

fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        seed,
        ..PhantomSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roi_crop_has_requested_size_and_reads_in_bounds(
        w in 4usize..40, h in 4usize..40, out in 1usize..24,
        cx in -0.5..1.5f64, cy in -0.5..1.5f64, bw in 0.01..2.0f64, bh in 0.01..2.0f64,
    ) {
        let bbox = BoundingBox { center_x: cx, center_y: cy, width: bw, height: bh };
        let roi = crop_roi_with(w, h, &bbox, out, |x, y| {
            assert!(x < w && y < h, "read at ({x}, {y}) of {w}×{h}");
            0.5
        });
        prop_assert_eq!((roi.width, roi.height, roi.data.len()), (out, out, out * out));
        let img = Image::filled(w, h, 0.25);
        let roi = crop_roi(&img, &bbox, out);
        prop_assert!(roi.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn dispositions_follow_the_gate_rules(
        hips in prop::collection::vec(scripted(), 1..40),
        tf in 0.05..0.95f64, tm in 0.05..0.95f64,
    ) {
        let ids: Vec<String> = (0..hips.len()).map(|i| format!("hip-{i:03}")).collect();
        let table: BTreeMap<String, Scripted> = ids.iter().cloned().zip(hips.iter().cloned()).collect();
        let models: [Box<dyn StageModel>; 4] = Stage::ALL.map(|stage| {
            Box::new(TableModel { stage, table: table.clone() }) as Box<dyn StageModel>
        });
        let config = PipelineConfig { frontal_threshold: tf, metal_threshold: tm, roi_output_size: 8, ..PipelineConfig::default() };
        let pipeline = Pipeline::from_models(&config, models).unwrap();
        let image = Image::filled(16, 16, 0.5);
        let inputs: Vec<StageInput<'_>> = ids.iter().map(|id| StageInput { image_id: id, image: &image }).collect();
        let out = pipeline.run(&inputs);
        prop_assert_eq!(out.len(), hips.len());
        for ((d, s), id) in out.iter().zip(&hips).zip(&ids) {
            prop_assert_eq!(&d.image_id, id);
            prop_assert!(d.is_consistent(), "{:?}", d);
            let (want, ran) = expected_outcome(s, tf, tm);
            prop_assert_eq!(outcome_name(&d.outcome), want);
            let present = [d.frontal_score.is_some(), d.bbox.is_some(), d.metal_score.is_some(), d.fracture_score.is_some()];
            for (k, p) in present.iter().enumerate() {
                prop_assert_eq!(*p, k < ran, "stage {} of {:?}", k, d);
            }
            if let Outcome::Analyzed { score } = d.outcome {
                prop_assert_eq!(score.to_bits(), s.fracture.to_bits());
            }
        }
    }

    #[test]
    fn discrepancy_queue_membership_and_order(
        (scores, labels) in scores(), t in -2.0..2.0f64, fp in any::<bool>(),
    ) {
        let ids: Vec<String> = (0..scores.len()).map(|i| format!("id-{:03}", (i * 37) % 101)).collect();
        let kind = if fp { QueueKind::FalsePositive } else { QueueKind::FalseNegative };
        let items = enumerate_discrepancies(&ids, &scores, &labels, t, kind, 3).unwrap();
        let expected: std::collections::BTreeSet<&str> = ids
            .iter()
            .zip(&scores)
            .zip(&labels)
            .filter(|((_, &s), &y)| if fp { !y && s >= t } else { y && s < t })
            .map(|((id, _), _)| id.as_str())
            .collect();
        let got: std::collections::BTreeSet<&str> = items.iter().map(|i| i.image_id.as_str()).collect();
        prop_assert_eq!(got, expected);
        for pair in items.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let (da, db) = ((a.model_score - t).abs(), (b.model_score - t).abs());
            prop_assert!(da > db || (da == db && a.image_id < b.image_id));
        }
        prop_assert!(items.iter().all(|i| i.round == 3 && i.queue_kind == kind));
    }

    #[test]
    fn adequacy_matches_pointwise_containment(
        cx in 0.0..1.0f64, cy in 0.0..1.0f64, bw in 0.0..1.0f64, bh in 0.0..1.0f64,
        pts in prop::array::uniform3((0.0..128.0f64, 0.0..128.0f64)),
    ) {
        let bbox = BoundingBox { center_x: cx, center_y: cy, width: bw, height: bh };
        let lm = hipline::phantom::Landmarks {
            femoral_head: Point { x: pts[0].0, y: pts[0].1 },
            greater_trochanter: Point { x: pts[1].0, y: pts[1].1 },
            lesser_trochanter: Point { x: pts[2].0, y: pts[2].1 },
        };
        let inside = |(x, y): (f64, f64)| {
            let (u, v) = (x / 128.0, y / 128.0);
            cx - bw / 2.0 <= u && u <= cx + bw / 2.0 && cy - bh / 2.0 <= v && v <= cy + bh / 2.0
        };
        prop_assert_eq!(check_adequacy(&bbox, &lm, 128, 128), pts.iter().all(|&p| inside(p)));
    }

    #[test]
    fn roc_is_monotone_and_antisymmetric((scores, labels) in scores()) {
        let roc = roc_curve(&scores, &labels).unwrap();
        for pair in roc.points.windows(2) {
            prop_assert!(pair[1].fpr >= pair[0].fpr && pair[1].tpr >= pair[0].tpr);
            prop_assert!(pair[1].threshold < pair[0].threshold);
        }
        let last = roc.points.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        let back = roc_curve(&flipped, &labels).unwrap();
        prop_assert!((roc.auc + back.auc - 1.0).abs() < 1e-12);
        prop_assert!((roc.auc - roc.trapezoid_area()).abs() < 1e-12);
        let parsed = RocCurve::parse_csv(&roc.to_csv()).unwrap();
        prop_assert_eq!(parsed.len(), roc.points.len());
        for (a, b) in parsed.iter().zip(&roc.points) {
            prop_assert_eq!(a.threshold.to_bits(), b.threshold.to_bits());
            prop_assert_eq!(a.fpr.to_bits(), b.fpr.to_bits());
            prop_assert_eq!(a.tpr.to_bits(), b.tpr.to_bits());
        }
    }

    #[test]
    fn balanced_subsample_is_half_positive(labels in prop::collection::vec(any::<bool>(), 0..200), seed in any::<u64>()) {
        let pos = labels.iter().filter(|&&y| y).count();
        match balanced_subsample(&labels, seed) {
            Ok(idx) => {
                prop_assert!(labels.len() - pos >= pos);
                prop_assert_eq!(idx.len(), 2 * pos);
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(idx.iter().filter(|&&i| labels[i]).count(), pos);
                prop_assert_eq!(balanced_subsample(&labels, seed).unwrap(), idx);
            }
            Err(_) => prop_assert!(labels.len() - pos < pos),
        }
    }

    #[test]
    fn provenance_never_steps_back(
        steps in prop::collection::vec((0..4u8, 0..5u32), 1..20),
    ) {
        let mut p = LabelProvenance::TRUTH;
        for (s, round) in steps {
            let source = [LabelSource::SyntheticTruth, LabelSource::NoisyInitial, LabelSource::OracleReview, LabelSource::HumanReview][s as usize];
            let next = LabelProvenance { source, round };
            let before = p;
            let allowed = provenance_rank(next) >= provenance_rank(before);
            prop_assert_eq!(p.advance(next).is_ok(), allowed);
            prop_assert_eq!(p, if allowed { next } else { before });
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn phantom_counts_and_ground_truth(seed in any::<u64>(), cases in 4usize..12) {
        let counts = SplitCounts { train: 2 * cases, val: 2 * (cases / 2 + 2), test: 2 * (cases / 2 + 2) };
        let spec = small_spec(seed);
        let ds = generate_dataset(&spec, &counts).unwrap();
        for split in Split::ALL {
            let n = counts.get(split);
            let hips: Vec<_> = ds.hips_in(split).collect();
            prop_assert_eq!(hips.len(), n);
            let prevalence = if split == Split::Test { spec.test_fracture_prevalence } else { spec.fracture_prevalence };
            let round = |r: f64, k: usize| (r * k as f64).round() as usize;
            prop_assert_eq!(hips.iter().filter(|(_, h, _)| h.fracture).count(), round(prevalence, n));
            prop_assert_eq!(hips.iter().filter(|(_, h, _)| h.metal).count(), round(spec.metal_rate, n));
            let lateral_cases = ds.cases.iter().filter(|c| c.split == split && c.view == View::Lateral).count();
            prop_assert_eq!(lateral_cases, round(spec.non_frontal_rate, n / 2));
        }
        for (case, hip, image) in ds.hips() {
            if case.view == View::Lateral || hip.metal {
                prop_assert!(!hip.fracture, "{} is fractured but not eligible", hip.image_id);
            }
            prop_assert!(check_adequacy(&hip.true_bbox, &hip.landmarks, image.width, image.height));
            prop_assert!(image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(hip.label.fracture, hip.fracture);
        }
        let again = generate_dataset(&spec, &counts).unwrap();
        prop_assert_eq!(again.manifest_hash(), ds.manifest_hash());
        prop_assert_eq!(again.content_hash(), ds.content_hash());
    }

    #[test]
    fn exact_count_noise_hits_its_targets(seed in any::<u64>(), miss in 0.0..0.9f64, fp in 0.0..0.5f64) {
        let counts = SplitCounts { train: 40, val: 20, test: 20 };
        let mut ds = generate_dataset(&small_spec(seed), &counts).unwrap();
        let cfg = NoiseConfig { miss_rate: miss, false_positive_rate: fp, mode: NoiseMode::ExactCount, seed, ..NoiseConfig::default() };
        let report = inject_label_noise(&mut ds, &cfg).unwrap();
        prop_assert_eq!(report.missed_positives, (miss * report.positives as f64).round() as usize);
        prop_assert_eq!(report.false_positives, (fp * report.negatives as f64).round() as usize);
        let wrong = ds
            .hips()
            .filter(|(c, h, _)| cfg.splits.contains(&c.split) && h.fracture_eligible(c.view) && h.label.fracture != h.fracture)
            .count();
        prop_assert_eq!(wrong, report.missed_positives + report.false_positives);
        let accuracy = 1.0 - wrong as f64 / report.population as f64;
        prop_assert!((report.label_accuracy - accuracy).abs() < 1e-12);
        let untouched = ds.hips().filter(|(c, _, _)| c.split == Split::Test).all(|(_, h, _)| h.label.fracture == h.fracture);
        prop_assert!(untouched);
    }

    #[test]
    fn checkpoints_round_trip_bit_for_bit(seed in any::<u64>(), depth in 2usize..5) {
        let spec = build_network(&ArchConfig::plain(depth, 4, 3, HeadKind::BinaryPlus3Class, 16)).unwrap();
        let net = Network::<f32>::init(spec, seed);
        let meta = TrainingMetadata { stage: Some("fracture".into()), epoch: 3, seed, ..TrainingMetadata::default() };
        let ckpt = Checkpoint::from_network(&net, meta);
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert!(back.blob.iter().zip(&ckpt.blob).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let restored: Network<f32> = back.network().unwrap();
        let again = Checkpoint::from_network(&restored, back.header.metadata.clone());
        prop_assert_eq!(again.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
    }
}
