//! Multi-model fusion of per-subject segmentations.
//!
//! Four strategies combine aligned label maps: per-voxel weighted mode,
//! weighted probability (or one-hot) averaging, weighted median over the
//! ordered label scale, and a subject-level volume-threshold switch between
//! two named models. [`oracle_select`] is the retrospective upper bound:
//! given ground truth, pick the best model per subject by mean regional Dice.
//!
//! Inputs are keyed by model name in [`BTreeMap`]s, so every operation is
//! order-free by construction; ties are broken on (ballot weight, label
//! value) keys only.

use std::collections::BTreeMap;
use std::error::Error;
use std::fmt;

use crate::metrics::{dice, MetricError};
use crate::volio::{
    class_index, extract_region, label_of_class, LabelMap, Region, VolError, Volume, LABELS,
};

#[derive(Debug)]
pub enum EnsembleError {
    /// Inputs violate a fusion precondition (too few models, misaligned
    /// grids, bad weights, missing named models).
    Validation(String),
    /// The call itself is malformed (missing ground truth, duplicate
    /// subjects, absent threshold rule).
    Usage(String),
}

impl fmt::Display for EnsembleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnsembleError::Validation(msg) => write!(f, "ensemble validation: {msg}"),
            EnsembleError::Usage(msg) => write!(f, "ensemble usage: {msg}"),
        }
    }
}

impl Error for EnsembleError {}

impl From<VolError> for EnsembleError {
    fn from(e: VolError) -> Self {
        EnsembleError::Validation(e.to_string())
    }
}

impl From<MetricError> for EnsembleError {
    fn from(e: MetricError) -> Self {
        EnsembleError::Validation(e.to_string())
    }
}

/// One subject's predictions from several models, plus integer vote weights.
///
/// `probabilities` optionally carries per-class probability volumes (channel
/// `c` holds class `c`, so channel 3 is label 4); when present it must cover
/// exactly the models in `predictions`. Models absent from `weights` count
/// with weight 1.
#[derive(Clone, Debug)]
pub struct EnsembleInput {
    pub subject_id: String,
    pub predictions: BTreeMap<String, LabelMap>,
    pub probabilities: BTreeMap<String, Volume>,
    pub weights: BTreeMap<String, u32>,
}

impl EnsembleInput {
    /// Bundle with equal weights and no probability volumes.
    pub fn unweighted(
        subject_id: impl Into<String>,
        predictions: BTreeMap<String, LabelMap>,
    ) -> EnsembleInput {
        EnsembleInput {
            subject_id: subject_id.into(),
            predictions,
            probabilities: BTreeMap::new(),
            weights: BTreeMap::new(),
        }
    }

    pub fn weight_of(&self, model: &str) -> u32 {
        self.weights.get(model).copied().unwrap_or(1)
    }
}

/// Subject-level switch: when the fallback model's prediction shows a small
/// necrotic core and a large enhancing tumor, the select model's map is used
/// wholesale; otherwise the fallback's. Volumes are voxel counts of label 1
/// (`tc_volume`) and label 4 (`et_volume`) measured on the fallback map, so
/// the rule is decidable without ground truth.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ThresholdRule {
    pub tc_volume_max: f64,
    pub et_volume_min: f64,
    pub select_model: String,
    pub fallback_model: String,
}

impl ThresholdRule {
    /// Both thresholds default to 60 voxels.
    pub fn new(select_model: impl Into<String>, fallback_model: impl Into<String>) -> Self {
        ThresholdRule {
            tc_volume_max: 60.0,
            et_volume_min: 60.0,
            select_model: select_model.into(),
            fallback_model: fallback_model.into(),
        }
    }
}

/// Record of one threshold decision, suitable for a JSON run log.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ThresholdDecision {
    pub subject_id: String,
    pub tc_volume: f64,
    pub et_volume: f64,
    pub chosen_model: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Mode,
    Average,
    Median,
    Threshold,
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FusionStrategy::Mode => "mode",
            FusionStrategy::Average => "average",
            FusionStrategy::Median => "median",
            FusionStrategy::Threshold => "threshold",
        };
        write!(f, "{name}")
    }
}

/// Common preconditions: at least two models, one aligned grid, weights >= 1
/// naming known models. Returns the shared (dims, spacing).
fn validate(input: &EnsembleInput) -> Result<([usize; 3], [f32; 3]), EnsembleError> {
    if input.predictions.len() < 2 {
        return Err(EnsembleError::Validation(format!(
            "fusion needs at least 2 models, got {}",
            input.predictions.len()
        )));
    }
    let first = input.predictions.values().next().expect("non-empty");
    let (dims, spacing) = (first.dims(), first.spacing());
    for (name, map) in &input.predictions {
        if map.dims() != dims || map.spacing() != spacing {
            return Err(EnsembleError::Validation(format!(
                "model {name} predicts on grid {:?} spacing {:?}, expected {dims:?} spacing {spacing:?}",
                map.dims(),
                map.spacing()
            )));
        }
    }
    for (name, &w) in &input.weights {
        if w == 0 {
            return Err(EnsembleError::Validation(format!(
                "model {name} has weight 0, weights must be >= 1"
            )));
        }
        if !input.predictions.contains_key(name) {
            return Err(EnsembleError::Validation(format!(
                "weight given for unknown model {name}"
            )));
        }
    }
    Ok((dims, spacing))
}

fn ballots(input: &EnsembleInput) -> Vec<(&LabelMap, u64)> {
    input
        .predictions
        .iter()
        .map(|(name, map)| (map, u64::from(input.weight_of(name))))
        .collect()
}

/// Per-voxel weighted majority vote.
///
/// Each model casts its weight in votes for its label. Vote ties are broken
/// by the heaviest single ballot backing a tied label, then by the lowest
/// label value, so the result depends only on (weight, label) multisets.
pub fn fuse_mode(input: &EnsembleInput) -> Result<LabelMap, EnsembleError> {
    let (dims, spacing) = validate(input)?;
    let models = ballots(input);
    let n = dims[0] * dims[1] * dims[2];
    let mut out = vec![0u8; n];
    for v in 0..n {
        let mut votes = [0u64; 4];
        for (map, w) in &models {
            votes[class_index(map.data()[v]).expect("validated at construction")] += w;
        }
        let top = *votes.iter().max().expect("4 classes");
        let mut best: Option<(u64, usize)> = None;
        for (cls, &count) in votes.iter().enumerate() {
            if count != top {
                continue;
            }
            let heaviest = models
                .iter()
                .filter(|(map, _)| class_index(map.data()[v]).unwrap() == cls)
                .map(|&(_, w)| w)
                .max()
                .unwrap_or(0);
            if best.is_none_or(|(bw, _)| heaviest > bw) {
                best = Some((heaviest, cls));
            }
        }
        out[v] = label_of_class(best.expect("top exists").1).expect("class < 4");
    }
    Ok(LabelMap::new(dims, spacing, out)?)
}

/// Weighted mean of per-class probabilities followed by per-voxel argmax.
///
/// Falls back to averaging one-hot label encodings when no probability
/// volumes are supplied, which reduces to a weighted plurality vote with
/// ties going to the lowest label. Averaging the raw label integers would
/// manufacture invalid labels (the mean of 2 and 4 is 3), hence one-hot.
pub fn fuse_average(input: &EnsembleInput) -> Result<LabelMap, EnsembleError> {
    let (dims, spacing) = validate(input)?;
    let n = dims[0] * dims[1] * dims[2];
    let mut mass = vec![[0f64; 4]; n];
    if input.probabilities.is_empty() {
        for (map, w) in ballots(input) {
            let w = w as f64;
            for (v, &label) in map.data().iter().enumerate() {
                mass[v][class_index(label).expect("validated at construction")] += w;
            }
        }
    } else {
        for (name, _) in &input.predictions {
            if !input.probabilities.contains_key(name) {
                return Err(EnsembleError::Validation(format!(
                    "model {name} supplies no probability volume while others do"
                )));
            }
        }
        for (name, vol) in &input.probabilities {
            if !input.predictions.contains_key(name) {
                return Err(EnsembleError::Validation(format!(
                    "probability volume for unknown model {name}"
                )));
            }
            if vol.dims() != dims || vol.channels() != LABELS.len() {
                return Err(EnsembleError::Validation(format!(
                    "model {name} probabilities are {}x{:?}, expected {}x{dims:?}",
                    vol.channels(),
                    vol.dims(),
                    LABELS.len()
                )));
            }
            let w = f64::from(input.weight_of(name));
            for cls in 0..LABELS.len() {
                for (v, &p) in vol.channel(cls).iter().enumerate() {
                    mass[v][cls] += w * f64::from(p);
                }
            }
        }
    }
    // Dividing by the constant total weight cannot change the argmax.
    let out = mass
        .iter()
        .map(|votes| {
            let mut arg = 0;
            for cls in 1..4 {
                if votes[cls] > votes[arg] {
                    arg = cls;
                }
            }
            label_of_class(arg).expect("class < 4")
        })
        .collect();
    Ok(LabelMap::new(dims, spacing, out)?)
}

/// Per-voxel weighted median over the label scale 0 < 1 < 2 < 4.
///
/// A weight-w ballot counts its label w times; even totals take the lower
/// median, so the output is always one of the cast labels.
pub fn fuse_median(input: &EnsembleInput) -> Result<LabelMap, EnsembleError> {
    let (dims, spacing) = validate(input)?;
    let models = ballots(input);
    let total: u64 = models.iter().map(|&(_, w)| w).sum();
    let median_pos = (total - 1) / 2;
    let n = dims[0] * dims[1] * dims[2];
    let mut out = vec![0u8; n];
    for v in 0..n {
        let mut votes = [0u64; 4];
        for (map, w) in &models {
            votes[class_index(map.data()[v]).expect("validated at construction")] += w;
        }
        let mut cum = 0;
        for (cls, &count) in votes.iter().enumerate() {
            cum += count;
            if cum > median_pos {
                out[v] = label_of_class(cls).expect("class < 4");
                break;
            }
        }
    }
    Ok(LabelMap::new(dims, spacing, out)?)
}

/// Evaluates the threshold rule on the fallback model's map without copying
/// either prediction; [`fuse_threshold`] returns the chosen map itself.
pub fn threshold_decision(
    input: &EnsembleInput,
    rule: &ThresholdRule,
) -> Result<ThresholdDecision, EnsembleError> {
    validate(input)?;
    if !(rule.tc_volume_max >= 0.0) || !(rule.et_volume_min >= 0.0) {
        return Err(EnsembleError::Validation(format!(
            "thresholds must be >= 0, got tc_volume_max {} et_volume_min {}",
            rule.tc_volume_max, rule.et_volume_min
        )));
    }
    if rule.select_model == rule.fallback_model {
        return Err(EnsembleError::Validation(format!(
            "threshold rule must name two distinct models, both are {}",
            rule.select_model
        )));
    }
    for name in [&rule.select_model, &rule.fallback_model] {
        if !input.predictions.contains_key(name) {
            return Err(EnsembleError::Validation(format!(
                "threshold rule names missing model {name}"
            )));
        }
    }
    let counts = input.predictions[&rule.fallback_model].label_counts();
    let tc_volume = counts[1] as f64;
    let et_volume = counts[3] as f64;
    let selected = tc_volume < rule.tc_volume_max && et_volume > rule.et_volume_min;
    Ok(ThresholdDecision {
        subject_id: input.subject_id.clone(),
        tc_volume,
        et_volume,
        chosen_model: if selected {
            rule.select_model.clone()
        } else {
            rule.fallback_model.clone()
        },
    })
}

/// Subject-level two-model switch: a small necrotic core (label 1 volume
/// strictly below `tc_volume_max`) together with a large enhancing tumor
/// (label 4 volume strictly above `et_volume_min`) on the fallback model's
/// map hands the whole subject to the select model; anything else keeps the
/// fallback. No voxel mixing.
pub fn fuse_threshold(
    input: &EnsembleInput,
    rule: &ThresholdRule,
) -> Result<LabelMap, EnsembleError> {
    let decision = threshold_decision(input, rule)?;
    Ok(input.predictions[&decision.chosen_model].clone())
}

/// Dispatch by strategy name; `rule` is required for threshold fusion only.
pub fn fuse(
    input: &EnsembleInput,
    strategy: FusionStrategy,
    rule: Option<&ThresholdRule>,
) -> Result<LabelMap, EnsembleError> {
    match strategy {
        FusionStrategy::Mode => fuse_mode(input),
        FusionStrategy::Average => fuse_average(input),
        FusionStrategy::Median => fuse_median(input),
        FusionStrategy::Threshold => {
            let rule = rule.ok_or_else(|| {
                EnsembleError::Usage("threshold fusion needs a threshold rule".into())
            })?;
            fuse_threshold(input, rule)
        }
    }
}

/// Mean Dice over the three evaluation regions; the selection criterion for
/// [`oracle_select`].
pub fn mean_regional_dice(pred: &LabelMap, gt: &LabelMap) -> Result<f64, EnsembleError> {
    if pred.dims() != gt.dims() {
        return Err(EnsembleError::Validation(format!(
            "prediction dims {:?} do not match ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut sum = 0.0;
    for region in Region::all() {
        sum += dice(&extract_region(pred, &region), &extract_region(gt, &region))?;
    }
    Ok(sum / Region::all().len() as f64)
}

/// Retrospective per-subject model selection: with ground truth in hand,
/// keep whichever model scores the highest mean regional Dice, ties going to
/// the lexicographically first model name. The aggregate of these picks is
/// >= every individual model's aggregate by construction.
pub fn oracle_select(
    inputs: &[EnsembleInput],
    ground_truth: &BTreeMap<String, LabelMap>,
) -> Result<BTreeMap<String, (String, LabelMap)>, EnsembleError> {
    let mut out = BTreeMap::new();
    for input in inputs {
        validate(input)?;
        let gt = ground_truth.get(&input.subject_id).ok_or_else(|| {
            EnsembleError::Usage(format!("no ground truth for subject {}", input.subject_id))
        })?;
        let mut best: Option<(f64, &String, &LabelMap)> = None;
        for (name, map) in &input.predictions {
            let score = mean_regional_dice(map, gt)?;
            if best.is_none_or(|(s, _, _)| score > s) {
                best = Some((score, name, map));
            }
        }
        let (_, name, map) = best.expect("validated >= 2 models");
        if out
            .insert(input.subject_id.clone(), (name.clone(), map.clone()))
            .is_some()
        {
            return Err(EnsembleError::Usage(format!(
                "duplicate subject {}",
                input.subject_id
            )));
        }
    }
    Ok(out)
}
