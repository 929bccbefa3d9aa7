use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    render_case, Case, CaseAttributes, FractureLabel, FractureLocation, HipAttributes, HipRecord,
    LabelProvenance, LabelSource, PhantomSpec, Split, View,
};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::rng;

/// Hip-image counts per split; each must be even (two hips per case).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 4000,
            val: 600,
            test: 800,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Cases plus their rendered images, index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: PhantomSpec,
    pub cases: Vec<Case>,
    pub images: Vec<[Image; 2]>,
}

impl Dataset {
    pub fn hips(&self) -> impl Iterator<Item = (&Case, &HipRecord, &Image)> {
        self.cases
            .iter()
            .zip(&self.images)
            .flat_map(|(c, imgs)| c.hips.iter().zip(imgs.iter()).map(move |(h, i)| (c, h, i)))
    }

    pub fn hips_in(&self, split: Split) -> impl Iterator<Item = (&Case, &HipRecord, &Image)> {
        self.hips().filter(move |(c, _, _)| c.split == split)
    }

    pub fn hip_count(&self) -> usize {
        self.cases.len() * 2
    }

    /// `(case position, hip position)` of an image id.
    pub fn locate(&self, image_id: &str) -> Option<(usize, usize)> {
        let (case, side) = image_id.rsplit_once('-')?;
        let index: u64 = case.strip_prefix('C')?.parse().ok()?;
        let h = match side {
            "L" => 0,
            "R" => 1,
            _ => return None,
        };
        let pos = self
            .cases
            .binary_search_by_key(&index, |c| c.case_index)
            .ok()?;
        (self.cases[pos].hips[h].image_id == image_id).then_some((pos, h))
    }

    pub fn hip(&self, image_id: &str) -> Option<(&Case, &HipRecord, &Image)> {
        let (c, h) = self.locate(image_id)?;
        Some((&self.cases[c], &self.cases[c].hips[h], &self.images[c][h]))
    }

    /// SHA-256 over the manifest lines (cases without image paths).
    pub fn manifest_hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.cases {
            let mut c = c.clone();
            for hip in &mut c.hips {
                hip.image_path = None;
            }
            h.update(serde_json::to_vec(&c).expect("case serialises"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Like [`manifest_hash`](Self::manifest_hash) but blind to the current
    /// labels, so relabelling keeps the identity of the images.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.cases {
            let mut c = c.clone();
            for hip in &mut c.hips {
                hip.image_path = None;
                hip.label = FractureLabel {
                    fracture: hip.fracture,
                    location: Some(hip.location),
                    provenance: LabelProvenance::TRUTH,
                };
            }
            h.update(serde_json::to_vec(&c).expect("case serialises"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

fn round_count(rate: f64, n: usize) -> usize {
    (rate * n as f64).round() as usize
}

/// Stratified attribute plan for one split: exact counts of lateral cases,
/// fracture hips and implant hips.
fn plan_split(
    spec: &PhantomSpec,
    split: Split,
    n_cases: usize,
    first_index: u64,
) -> Result<Vec<CaseAttributes>> {
    let n_images = 2 * n_cases;
    let prevalence = match split {
        Split::Test => spec.test_fracture_prevalence,
        _ => spec.fracture_prevalence,
    };
    let n_lateral = round_count(spec.non_frontal_rate, n_cases);
    let n_pos = round_count(prevalence, n_images);
    let n_metal = round_count(spec.metal_rate, n_images);
    let frontal_hips = 2 * (n_cases - n_lateral);
    if n_pos + n_metal > frontal_hips {
        return Err(Error::invalid(format!(
            "{} split: {n_pos} fracture and {n_metal} implant hips do not fit in {frontal_hips} frontal hips",
            split.name()
        )));
    }
    let mut r = rng::stream(spec.seed, &[rng::tag("split-plan"), split as u64]);
    let mut case_order: Vec<usize> = (0..n_cases).collect();
    rng::shuffle(&mut r, &mut case_order);
    let mut attrs: Vec<CaseAttributes> = (0..n_cases)
        .map(|_| CaseAttributes {
            view: View::Frontal,
            hips: [HipAttributes {
                metal: false,
                location: FractureLocation::None,
            }; 2],
        })
        .collect();
    for &c in &case_order[..n_lateral] {
        attrs[c].view = View::Lateral;
    }
    let mut hips: Vec<(usize, usize)> = case_order[n_lateral..]
        .iter()
        .flat_map(|&c| [(c, 0), (c, 1)])
        .collect();
    hips.sort_unstable();
    rng::shuffle(&mut r, &mut hips);
    for &(c, h) in &hips[..n_pos] {
        let mut lr = rng::stream(
            spec.seed,
            &[rng::tag("location"), first_index + c as u64, h as u64],
        );
        attrs[c].hips[h].location = if lr.random::<bool>() {
            FractureLocation::IntraCapsular
        } else {
            FractureLocation::ExtraCapsular
        };
    }
    for &(c, h) in &hips[n_pos..n_pos + n_metal] {
        attrs[c].hips[h].metal = true;
    }
    Ok(attrs)
}

/// Render a full dataset. Patients never span splits; a case joins the
/// previous case's patient with probability `repeat_patient_rate`.
pub fn generate_dataset(spec: &PhantomSpec, counts: &SplitCounts) -> Result<Dataset> {
    spec.validate()?;
    let mut cases = Vec::new();
    let mut images = Vec::new();
    let mut next_index = 0u64;
    let mut next_patient = 0u64;
    for split in Split::ALL {
        let n = counts.get(split);
        if !n.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "{} split has {n} hip images; counts must be even (two hips per case)",
                split.name()
            )));
        }
        let plan = plan_split(spec, split, n / 2, next_index)?;
        let mut current_patient: Option<u64> = None;
        for attrs in plan {
            let index = next_index;
            next_index += 1;
            let mut pr = rng::stream(spec.seed, &[rng::tag("patients"), index]);
            let repeat = current_patient.is_some()
                && rng::uniform(&mut pr, 0.0, 1.0) < spec.repeat_patient_rate;
            let patient = match (repeat, current_patient) {
                (true, Some(p)) => p,
                _ => {
                    next_patient += 1;
                    next_patient - 1
                }
            };
            current_patient = Some(patient);
            let rc = render_case(spec, index, &attrs, split, format!("P{patient:05}"));
            cases.push(rc.case);
            images.push(rc.images);
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        cases,
        images,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Independent flips at the given rates.
    Bernoulli,
    /// Exactly `round(rate · count)` flips per class.
    ExactCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub miss_rate: f64,
    pub false_positive_rate: f64,
    pub mode: NoiseMode,
    pub splits: Vec<Split>,
    /// Restrict to frontal, implant-free hips.
    pub eligible_only: bool,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            miss_rate: 0.25,
            false_positive_rate: 0.01,
            mode: NoiseMode::Bernoulli,
            splits: vec![Split::Train, Split::Val],
            eligible_only: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub population: usize,
    pub positives: usize,
    pub negatives: usize,
    pub missed_positives: usize,
    pub false_positives: usize,
    pub label_accuracy: f64,
}

/// False-positive rate giving overall accuracy `target` at `prevalence`
/// and `miss_rate`, from `accuracy = 1 − prev·miss − (1 − prev)·fp`.
pub fn false_positive_rate_for_accuracy(
    prevalence: f64,
    miss_rate: f64,
    target: f64,
) -> Result<f64> {
    let fp = ((1.0 - target) - prevalence * miss_rate) / (1.0 - prevalence);
    if !(0.0..1.0).contains(&fp) {
        return Err(Error::invalid(format!(
            "accuracy {target} is unreachable with miss rate {miss_rate} at prevalence {prevalence}"
        )));
    }
    Ok(fp)
}

/// Replace the current fracture labels of the configured population with
/// noisy ones. Ground truth stays in the hip record for auditing.
pub fn inject_label_noise(dataset: &mut Dataset, cfg: &NoiseConfig) -> Result<NoiseReport> {
    for (name, v) in [
        ("miss_rate", cfg.miss_rate),
        ("false_positive_rate", cfg.false_positive_rate),
    ] {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::invalid(format!(
                "{name} must lie in [0, 1), got {v}"
            )));
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (ci, case) in dataset.cases.iter().enumerate() {
        if !cfg.splits.contains(&case.split) {
            continue;
        }
        for (hi, hip) in case.hips.iter().enumerate() {
            if cfg.eligible_only && !hip.fracture_eligible(case.view) {
                continue;
            }
            if hip.fracture {
                pos.push((ci, hi))
            } else {
                neg.push((ci, hi))
            }
        }
    }
    let flips = |items: &[(usize, usize)], rate: f64, name: &str| -> Vec<(usize, usize)> {
        match cfg.mode {
            NoiseMode::Bernoulli => items
                .iter()
                .copied()
                .filter(|&(c, h)| {
                    let idx = dataset.cases[c].case_index;
                    let mut r = rng::stream(cfg.seed, &[rng::tag(name), idx, h as u64]);
                    r.random::<f64>() < rate
                })
                .collect(),
            NoiseMode::ExactCount => {
                let mut v = items.to_vec();
                rng::shuffle(&mut rng::stream(cfg.seed, &[rng::tag(name)]), &mut v);
                v.truncate(round_count(rate, items.len()));
                v
            }
        }
    };
    let missed = flips(&pos, cfg.miss_rate, "noise-miss");
    let false_pos = flips(&neg, cfg.false_positive_rate, "noise-false-positive");
    let noisy = LabelProvenance {
        source: LabelSource::NoisyInitial,
        round: 0,
    };
    for &(c, h) in pos.iter().chain(&neg) {
        let hip = &mut dataset.cases[c].hips[h];
        hip.label = FractureLabel {
            fracture: hip.fracture,
            location: Some(hip.location),
            provenance: hip.label.provenance,
        };
        hip.label.provenance.advance(noisy)?;
    }
    for &(c, h) in &missed {
        let hip = &mut dataset.cases[c].hips[h];
        hip.label.fracture = false;
        hip.label.location = Some(FractureLocation::None);
    }
    for &(c, h) in &false_pos {
        let hip = &mut dataset.cases[c].hips[h];
        hip.label.fracture = true;
        hip.label.location = None;
    }
    let population = pos.len() + neg.len();
    Ok(NoiseReport {
        population,
        positives: pos.len(),
        negatives: neg.len(),
        missed_positives: missed.len(),
        false_positives: false_pos.len(),
        label_accuracy: if population == 0 {
            1.0
        } else {
            1.0 - (missed.len() + false_pos.len()) as f64 / population as f64
        },
    })
}
