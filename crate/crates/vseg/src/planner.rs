//! Self-adaptive configuration: fingerprint a dataset, then derive network
//! topology and training shape parameters from the fingerprint.
//!
//! The derivation heuristic is deterministic and documented on
//! [`make_plan`]; identical fingerprints and budgets always produce
//! identical plans.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::volio::{LabelMap, Volume};

#[derive(Debug)]
pub enum PlanError {
    /// Malformed call (empty dataset, ...).
    Usage(String),
    /// Dataset violates fingerprint preconditions.
    Validation(String),
    /// The memory budget cannot fit the smallest viable configuration.
    Budget(String),
}

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanError::Usage(m) => write!(f, "usage error: {m}"),
            PlanError::Validation(m) => write!(f, "validation error: {m}"),
            PlanError::Budget(m) => write!(f, "planning error: {m}"),
        }
    }
}

impl std::error::Error for PlanError {}

/// Componentwise dataset summary driving the plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    /// Median spatial extents (x, y, z). For even subject counts the lower
    /// median is taken, so the value is always an observed extent.
    pub median_shape: [usize; 3],
    /// Median voxel spacing in mm, same median convention.
    pub median_spacing: [f64; 3],
    pub channels: usize,
    /// Number of distinct label values observed across the dataset.
    pub class_count: usize,
    pub subject_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    None,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_heads: usize,
    pub num_layers: usize,
    /// Token embedding width; equals the bottleneck channel count.
    pub embed_dim: usize,
    pub mlp_ratio: f64,
    pub positional_encoding: PositionalEncoding,
}

/// Complete architecture and training-shape configuration.
///
/// Per-axis vectors are ordered (x, y, z) like volume extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    /// Input channels (imaging modalities) the network consumes.
    pub in_channels: usize,
    /// Output classes, including background.
    pub class_count: usize,
    pub target_spacing: [f64; 3],
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub stage_count: usize,
    pub strides_per_stage: Vec<[usize; 3]>,
    pub kernels_per_stage: Vec<[usize; 3]>,
    pub base_channels: usize,
    pub max_channels: usize,
    pub transformer: TransformerConfig,
    pub residual_connection: bool,
    /// Number of auxiliary supervision heads beyond the full-resolution one.
    pub deep_supervision_levels: usize,
    /// Negative-slope of every leaky ReLU in the network.
    #[serde(default = "default_leaky_slope")]
    pub leaky_relu_slope: f64,
    /// Dropout probability inside conv units; 0 disables dropout.
    #[serde(default)]
    pub dropout_p: f64,
}

fn default_leaky_slope() -> f64 {
    0.01
}

impl NetworkPlan {
    /// Output channels of encoder stage `i` (0-based).
    pub fn channels_at(&self, stage: usize) -> usize {
        (self.base_channels << stage).min(self.max_channels)
    }

    /// Per-axis product of all stage strides.
    pub fn cumulative_strides(&self) -> [usize; 3] {
        let mut cum = [1usize; 3];
        for s in &self.strides_per_stage {
            for a in 0..3 {
                cum[a] *= s[a];
            }
        }
        cum
    }

    /// Spatial extents at the bottleneck (patch / cumulative strides).
    pub fn bottleneck_dims(&self) -> [usize; 3] {
        let cum = self.cumulative_strides();
        [
            self.patch_size[0] / cum[0],
            self.patch_size[1] / cum[1],
            self.patch_size[2] / cum[2],
        ]
    }

    /// Transformer sequence length.
    pub fn token_count(&self) -> usize {
        self.bottleneck_dims().iter().product()
    }

    /// Spatial extents at encoder level `l` (0 = patch, `stage_count` =
    /// bottleneck).
    pub fn dims_at_level(&self, level: usize) -> [usize; 3] {
        let mut dims = self.patch_size;
        for s in &self.strides_per_stage[..level] {
            for a in 0..3 {
                dims[a] /= s[a];
            }
        }
        dims
    }

    /// Checks every structural invariant; call after deserializing.
    pub fn validate(&self) -> Result<(), PlanError> {
        let err = |m: String| Err(PlanError::Validation(m));
        if self.in_channels == 0 {
            return err("in_channels must be positive".into());
        }
        if self.class_count < 2 {
            return err(format!("class_count must be at least 2, got {}", self.class_count));
        }
        if self.stage_count < 2 {
            return err(format!("stage_count must be at least 2, got {}", self.stage_count));
        }
        if self.strides_per_stage.len() != self.stage_count
            || self.kernels_per_stage.len() != self.stage_count
        {
            return err(format!(
                "strides ({}) and kernels ({}) must both list {} stages",
                self.strides_per_stage.len(),
                self.kernels_per_stage.len(),
                self.stage_count
            ));
        }
        if self.patch_size.iter().any(|&p| p == 0) {
            return err(format!("patch_size must be positive, got {:?}", self.patch_size));
        }
        let cum = self.cumulative_strides();
        for a in 0..3 {
            if cum[a] == 0 || self.patch_size[a] % cum[a] != 0 {
                return err(format!(
                    "patch extent {} not divisible by cumulative stride {} on axis {a}",
                    self.patch_size[a], cum[a]
                ));
            }
        }
        for (i, s) in self.strides_per_stage.iter().enumerate() {
            if s.iter().any(|&v| v == 0) {
                return err(format!("stage {i} has a zero stride: {s:?}"));
            }
        }
        for (i, k) in self.kernels_per_stage.iter().enumerate() {
            if k.iter().any(|&v| v == 0 || v % 2 == 0) {
                return err(format!(
                    "stage {i} kernel {k:?} must have odd positive extents for symmetric padding"
                ));
            }
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return err(format!(
                "channel range {}..{} is invalid",
                self.base_channels, self.max_channels
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.deep_supervision_levels >= self.stage_count {
            return err(format!(
                "deep_supervision_levels {} must be below stage_count {}",
                self.deep_supervision_levels, self.stage_count
            ));
        }
        let t = &self.transformer;
        if t.num_heads == 0 || t.num_layers == 0 {
            return err("transformer needs at least one head and one layer".into());
        }
        if t.embed_dim % t.num_heads != 0 {
            return err(format!(
                "embed_dim {} not divisible by num_heads {}",
                t.embed_dim, t.num_heads
            ));
        }
        if t.embed_dim != self.channels_at(self.stage_count - 1) {
            return err(format!(
                "embed_dim {} does not match bottleneck channels {}",
                t.embed_dim,
                self.channels_at(self.stage_count - 1)
            ));
        }
        if !(t.mlp_ratio > 0.0) {
            return err(format!("mlp_ratio must be positive, got {}", t.mlp_ratio));
        }
        if !self.leaky_relu_slope.is_finite() {
            return err("leaky_relu_slope must be finite".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return err(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if !self.target_spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return err(format!("target_spacing must be positive, got {:?}", self.target_spacing));
        }
        Ok(())
    }
}

/// Lower median: the order statistic at index (n-1)/2.
fn median<T: Copy + PartialOrd>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    values[(values.len() - 1) / 2]
}

/// Componentwise median shape and spacing plus channel and label counts.
pub fn fingerprint_dataset(
    subjects: &[(Volume, LabelMap)],
) -> Result<DatasetFingerprint, PlanError> {
    if subjects.is_empty() {
        return Err(PlanError::Usage("cannot fingerprint an empty dataset".into()));
    }
    let channels = subjects[0].0.channels();
    let mut labels_seen = BTreeSet::new();
    for (i, (v, m)) in subjects.iter().enumerate() {
        if v.channels() != channels {
            return Err(PlanError::Validation(format!(
                "subject {i} has {} channels, expected {channels}",
                v.channels()
            )));
        }
        if v.dims() != m.dims() {
            return Err(PlanError::Validation(format!(
                "subject {i}: volume dims {:?} differ from label dims {:?}",
                v.dims(),
                m.dims()
            )));
        }
        for &l in m.data() {
            labels_seen.insert(l);
        }
    }
    if labels_seen.len() < 2 {
        return Err(PlanError::Validation(format!(
            "dataset shows {} distinct label value(s), need at least 2",
            labels_seen.len()
        )));
    }
    let mut median_shape = [0usize; 3];
    let mut median_spacing = [0f64; 3];
    for a in 0..3 {
        let mut extents: Vec<usize> = subjects.iter().map(|(v, _)| v.dims()[a]).collect();
        median_shape[a] = median(&mut extents);
        let mut spacings: Vec<f64> = subjects.iter().map(|(v, _)| v.spacing()[a] as f64).collect();
        median_spacing[a] = median(&mut spacings);
    }
    Ok(DatasetFingerprint {
        median_shape,
        median_spacing,
        channels,
        class_count: labels_seen.len(),
        subject_count: subjects.len(),
    })
}

const BASE_CHANNELS: usize = 16;
const MAX_CHANNELS: usize = 256;
const MAX_STAGES: usize = 6;
/// Axes below this extent are neither strided nor convolved with width-3
/// kernels.
const SMALL_AXIS: usize = 8;

fn pow2_at_most(v: usize) -> usize {
    let mut p = 1usize;
    while p * 2 <= v {
        p *= 2;
    }
    p
}

/// Derives a plan from a fingerprint under a voxel memory budget.
///
/// Heuristic, applied in order:
/// 1. target spacing = median spacing.
/// 2. patch = per-axis largest power of two ≤ the median shape, then halve
///    the largest axis until patch voxels x channels fits the budget.
/// 3. stages: while any axis extent ≥ 8 (and below the 6-stage cap), add a
///    stage that strides 2 on every axis with extent ≥ 8; at least 2 stages
///    are always emitted (extra ones stride 1).
/// 4. kernels are 3 per axis where the stage input extent ≥ 8, else 1.
/// 5. channels double per stage from 16, capped at 256; the transformer
///    embeds at the bottleneck channel count with 8 heads and 1 layer.
/// 6. batch size = max(2, budget / patch voxels).
pub fn make_plan(
    fp: &DatasetFingerprint,
    memory_budget_voxels: u64,
) -> Result<NetworkPlan, PlanError> {
    if fp.channels == 0 || fp.class_count < 2 || fp.subject_count == 0 {
        return Err(PlanError::Validation(format!(
            "fingerprint invariants violated: {fp:?}"
        )));
    }
    if fp.median_shape.iter().any(|&e| e < 4) {
        return Err(PlanError::Validation(format!(
            "median shape {:?} too small to build a 2-stage network",
            fp.median_shape
        )));
    }
    let min_budget = 32u64.pow(3) * fp.channels as u64;
    if memory_budget_voxels < min_budget {
        return Err(PlanError::Budget(format!(
            "budget {memory_budget_voxels} below minimum {min_budget} (32^3 x {} channels)",
            fp.channels
        )));
    }

    let mut patch = [
        pow2_at_most(fp.median_shape[0]),
        pow2_at_most(fp.median_shape[1]),
        pow2_at_most(fp.median_shape[2]),
    ];
    let fits = |p: &[usize; 3]| {
        (p[0] as u64) * (p[1] as u64) * (p[2] as u64) * fp.channels as u64 <= memory_budget_voxels
    };
    while !fits(&patch) {
        let largest = (0..3).max_by_key(|&a| patch[a]).expect("three axes");
        if patch[largest] <= 4 {
            return Err(PlanError::Budget(format!(
                "cannot shrink patch {patch:?} further to satisfy budget {memory_budget_voxels}"
            )));
        }
        patch[largest] /= 2;
    }

    let mut strides = Vec::new();
    let mut kernels = Vec::new();
    let mut extents = patch;
    while strides.len() < MAX_STAGES && extents.iter().any(|&e| e >= SMALL_AXIS) {
        let stride = [
            if extents[0] >= SMALL_AXIS { 2 } else { 1 },
            if extents[1] >= SMALL_AXIS { 2 } else { 1 },
            if extents[2] >= SMALL_AXIS { 2 } else { 1 },
        ];
        let kernel = [
            if extents[0] >= SMALL_AXIS { 3 } else { 1 },
            if extents[1] >= SMALL_AXIS { 3 } else { 1 },
            if extents[2] >= SMALL_AXIS { 3 } else { 1 },
        ];
        strides.push(stride);
        kernels.push(kernel);
        for a in 0..3 {
            extents[a] /= stride[a];
        }
    }
    while strides.len() < 2 {
        strides.push([1, 1, 1]);
        kernels.push([
            if extents[0] >= SMALL_AXIS { 3 } else { 1 },
            if extents[1] >= SMALL_AXIS { 3 } else { 1 },
            if extents[2] >= SMALL_AXIS { 3 } else { 1 },
        ]);
    }
    let stage_count = strides.len();

    let patch_voxels = (patch[0] * patch[1] * patch[2]) as u64;
    let batch_size = (memory_budget_voxels / patch_voxels).max(2) as usize;

    let bottleneck_channels = (BASE_CHANNELS << (stage_count - 1)).min(MAX_CHANNELS);
    let deep_supervision_levels = if stage_count >= 4 {
        stage_count - 3
    } else {
        stage_count - 1
    };

    let plan = NetworkPlan {
        in_channels: fp.channels,
        class_count: fp.class_count,
        target_spacing: fp.median_spacing,
        patch_size: patch,
        batch_size,
        stage_count,
        strides_per_stage: strides,
        kernels_per_stage: kernels,
        base_channels: BASE_CHANNELS,
        max_channels: MAX_CHANNELS,
        transformer: TransformerConfig {
            num_heads: 8,
            num_layers: 1,
            embed_dim: bottleneck_channels,
            mlp_ratio: 4.0,
            positional_encoding: PositionalEncoding::Learned,
        },
        residual_connection: true,
        deep_supervision_levels,
        leaky_relu_slope: 0.01,
        dropout_p: 0.0,
    };
    plan.validate()?;
    debug_assert!(plan.token_count() <= 512);
    Ok(plan)
}
