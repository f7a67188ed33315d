//! Training: combined Dice + cross-entropy loss, SGD with Nesterov momentum
//! and polynomial learning-rate decay, k-fold splitting, the patch-sampling
//! training loop, and a finite-difference gradient checker.
//!
//! Everything here is deterministic under a fixed seed: subject choice,
//! patch placement, and dropout masks all derive from one seeded stream, so
//! two identical runs produce bitwise-identical weights.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::network::{NetError, SegNetwork};
use crate::planner::NetworkPlan;
use crate::tensor::{Element, Graph, Tensor, TensorError, TensorId};
use crate::volio::{class_index, LabelMap, VolError, Volume};

/// Epsilon in both the numerator and denominator of the soft Dice ratio, so
/// a class absent from both prediction mass and target scores a loss near 0
/// instead of 1.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug)]
pub enum TrainError {
    Usage(String),
    Shape(String),
    Validation(String),
    /// Loss became non-finite; training aborted.
    Diverged { step: usize, value: f64 },
    Net(NetError),
    Tensor(TensorError),
    Volume(VolError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Usage(m) => write!(f, "usage error: {m}"),
            TrainError::Shape(m) => write!(f, "shape error: {m}"),
            TrainError::Validation(m) => write!(f, "validation error: {m}"),
            TrainError::Diverged { step, value } => {
                write!(f, "loss diverged at step {step}: {value}")
            }
            TrainError::Net(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "tensor error: {e}"),
            TrainError::Volume(e) => write!(f, "volume error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<NetError> for TrainError {
    fn from(e: NetError) -> Self {
        TrainError::Net(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Shape(m) => TrainError::Shape(m),
            other => TrainError::Tensor(other),
        }
    }
}

impl From<VolError> for TrainError {
    fn from(e: VolError) -> Self {
        TrainError::Volume(e)
    }
}

/// One loss evaluation broken into its parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub dice_component: f64,
    pub ce_component: f64,
    /// Soft Dice ratio per foreground class (class indices 1..K-1), the
    /// quantity the Dice component averages as `1 - ratio`.
    pub per_class_dice: Vec<f64>,
}

/// Combined soft Dice + cross-entropy loss.
///
/// `logits` is `(N, K, x, y, z)` in `g`; `targets` holds one label map per
/// batch element with dims `(x, y, z)`. The Dice part averages
/// `1 - (2·Σpg + ε)/(Σp + Σg + ε)` over the foreground classes with
/// `p = softmax(logits)`; the cross-entropy part is the mean voxelwise
/// negative log-likelihood, optionally class-weighted (weights apply to the
/// cross-entropy term only and are renormalized over the voxels present).
///
/// Returns the scalar loss node (Dice node + CE node, so the reported
/// decomposition is exact) plus the report of its parts.
pub fn dice_ce_loss<T: Element>(
    g: &mut Graph<T>,
    logits: TensorId,
    targets: &[LabelMap],
    class_weights: Option<&[f64]>,
) -> Result<(TensorId, LossReport), TrainError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 5 {
        return Err(TrainError::Shape(format!(
            "loss expects (N, K, x, y, z) logits, got {shape:?}"
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    let dims = [shape[2], shape[3], shape[4]];
    if k < 2 {
        return Err(TrainError::Usage(format!("need at least 2 classes, got {k}")));
    }
    if targets.len() != n {
        return Err(TrainError::Shape(format!(
            "batch size {n} but {} target maps",
            targets.len()
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != k {
            return Err(TrainError::Usage(format!(
                "{} class weights for {k} classes",
                w.len()
            )));
        }
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(TrainError::Usage(format!("class weights must be >= 0, got {w:?}")));
        }
    }

    let voxels = dims[0] * dims[1] * dims[2];
    let mut one_hot = vec![T::zero(); n * k * voxels];
    // Weighted copy for the CE term; identical to one_hot when unweighted.
    let mut weighted = vec![T::zero(); n * k * voxels];
    let mut weight_total = 0.0f64;
    for (b, t) in targets.iter().enumerate() {
        if t.dims() != dims {
            return Err(TrainError::Shape(format!(
                "target {b} dims {:?} do not match logits spatial dims {dims:?}",
                t.dims()
            )));
        }
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let label = t.at(x, y, z);
                    let cls = class_index(label).filter(|&c| c < k).ok_or_else(|| {
                        TrainError::Validation(format!(
                            "label {label} has no class slot among {k} classes"
                        ))
                    })?;
                    let off = ((b * k + cls) * dims[0] + x) * dims[1] * dims[2]
                        + y * dims[2]
                        + z;
                    one_hot[off] = T::one();
                    let w = class_weights.map_or(1.0, |w| w[cls]);
                    weighted[off] = T::from_f64(w);
                    weight_total += w;
                }
            }
        }
    }
    if weight_total <= 0.0 {
        return Err(TrainError::Usage(
            "class weights zero out every voxel in the batch".into(),
        ));
    }

    let target_shape = [n, k, dims[0], dims[1], dims[2]];
    let one_hot = g.constant(Tensor::new(&target_shape, one_hot)?);

    // Soft Dice over foreground classes.
    let probs = g.softmax(logits, 1)?;
    let mut per_class_dice = Vec::with_capacity(k - 1);
    let mut dice_sum: Option<TensorId> = None;
    for cls in 1..k {
        let p = g.select(probs, 1, cls)?;
        let t = g.select(one_hot, 1, cls)?;
        let pg = g.mul(p, t)?;
        let inter = g.sum(pg)?;
        let psum = g.sum(p)?;
        let tsum = g.sum(t)?;
        let num = g.affine(inter, 2.0, DICE_EPS)?;
        let den_raw = g.add(psum, tsum)?;
        let den = g.affine(den_raw, 1.0, DICE_EPS)?;
        let ratio = g.div(num, den)?;
        per_class_dice.push(g.value(ratio).item()?.to_f64());
        let loss_cls = g.affine(ratio, -1.0, 1.0)?;
        dice_sum = Some(match dice_sum {
            None => loss_cls,
            Some(acc) => g.add(acc, loss_cls)?,
        });
    }
    let dice_loss = g.scale(dice_sum.expect("k >= 2"), 1.0 / (k - 1) as f64)?;

    // Cross-entropy: -sum(weight * one_hot * log_softmax) / sum(weight).
    let weighted = g.constant(Tensor::new(&target_shape, weighted)?);
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(logp, weighted)?;
    let nll_sum = g.sum(picked)?;
    let ce = g.scale(nll_sum, -1.0 / weight_total)?;

    let total = g.add(dice_loss, ce)?;
    let report = LossReport {
        total: g.value(total).item()?.to_f64(),
        dice_component: g.value(dice_loss).item()?.to_f64(),
        ce_component: g.value(ce).item()?.to_f64(),
        per_class_dice,
    };
    Ok((total, report))
}

/// Supervision weights halving per level (`1, 1/2, 1/4, ...`) and
/// normalized to sum 1; index 0 is the full-resolution head.
pub fn deep_supervision_weights(levels: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..levels).map(|l| 0.5f64.powi(l as i32)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Nesterov momentum coefficient.
    pub momentum: f64,
    /// Exponent of the polynomial learning-rate decay
    /// `lr·(1 - t/T)^exponent`.
    pub poly_decay_exponent: f64,
    pub fold_count: usize,
    pub seed: u64,
    /// One weight per supervision head, full resolution first; must be
    /// nonnegative and sum to 1.
    pub deep_supervision_weights: Vec<f64>,
    /// Fraction of patches forced to center on a foreground voxel.
    pub foreground_oversample: f64,
}

impl TrainConfig {
    /// Sensible defaults wired to a plan's supervision depth and batch size.
    pub fn for_plan(plan: &NetworkPlan, epochs: usize, steps_per_epoch: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            steps_per_epoch,
            batch_size: plan.batch_size,
            learning_rate: 0.01,
            momentum: 0.99,
            poly_decay_exponent: 0.9,
            fold_count: 5,
            seed,
            deep_supervision_weights: deep_supervision_weights(
                plan.deep_supervision_levels + 1,
            ),
            foreground_oversample: 1.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Validation(m));
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return err("epochs and steps_per_epoch must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return err(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !self.poly_decay_exponent.is_finite() || self.poly_decay_exponent < 0.0 {
            return err(format!("poly_decay_exponent must be >= 0, got {}", self.poly_decay_exponent));
        }
        if self.fold_count < 2 {
            return err(format!("fold_count must be at least 2, got {}", self.fold_count));
        }
        if self.deep_supervision_weights.is_empty()
            || self.deep_supervision_weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite())
        {
            return err(format!(
                "supervision weights must be nonnegative, got {:?}",
                self.deep_supervision_weights
            ));
        }
        let sum: f64 = self.deep_supervision_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return err(format!("supervision weights sum to {sum}, expected 1"));
        }
        if !(0.0..=1.0).contains(&self.foreground_oversample) {
            return err(format!(
                "foreground_oversample must be in [0, 1], got {}",
                self.foreground_oversample
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_subject_ids: Vec<String>,
    pub val_subject_ids: Vec<String>,
}

/// Splits `subject_ids` into `fold_count` cross-validation folds after a
/// seeded shuffle. Validation sets partition the subjects with sizes
/// differing by at most one (larger folds first).
pub fn make_folds(
    subject_ids: &[String],
    fold_count: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>, TrainError> {
    if fold_count < 2 {
        return Err(TrainError::Usage(format!(
            "fold_count must be at least 2, got {fold_count}"
        )));
    }
    if subject_ids.len() < fold_count {
        return Err(TrainError::Usage(format!(
            "{} subjects cannot fill {fold_count} folds",
            subject_ids.len()
        )));
    }
    let mut shuffled = subject_ids.to_vec();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let n = shuffled.len();
    let base = n / fold_count;
    let extra = n % fold_count;
    let mut folds = Vec::with_capacity(fold_count);
    let mut cursor = 0;
    for fold_index in 0..fold_count {
        let size = base + usize::from(fold_index < extra);
        let val: Vec<String> = shuffled[cursor..cursor + size].to_vec();
        let train: Vec<String> = shuffled[..cursor]
            .iter()
            .chain(&shuffled[cursor + size..])
            .cloned()
            .collect();
        cursor += size;
        folds.push(FoldSplit {
            fold_index,
            train_subject_ids: train,
            val_subject_ids: val,
        });
    }
    Ok(folds)
}

/// One training subject: an intensity volume and its label map.
#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub volume: Volume,
    pub labels: LabelMap,
}

/// Training history of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub fold_index: usize,
    pub steps: usize,
    /// Per-epoch mean of the step loss reports.
    pub epochs: Vec<LossReport>,
}

struct Sampler<'a> {
    subjects: Vec<&'a Subject>,
    /// Foreground voxel coordinates per subject, for oversampling.
    foreground: Vec<Vec<[usize; 3]>>,
    patch: [usize; 3],
}

impl<'a> Sampler<'a> {
    fn new(subjects: Vec<&'a Subject>, patch: [usize; 3]) -> Sampler<'a> {
        let foreground = subjects
            .iter()
            .map(|s| {
                let dims = s.labels.dims();
                let mut fg = Vec::new();
                for z in 0..dims[2] {
                    for y in 0..dims[1] {
                        for x in 0..dims[0] {
                            if s.labels.at(x, y, z) != 0 {
                                fg.push([x, y, z]);
                            }
                        }
                    }
                }
                fg
            })
            .collect();
        Sampler { subjects, foreground, patch }
    }

    /// Picks a patch start so that `center` sits inside the patch, clamped
    /// to keep as much of the patch on the volume as possible.
    fn start_around(&self, dims: [usize; 3], center: [usize; 3]) -> [i64; 3] {
        let mut start = [0i64; 3];
        for a in 0..3 {
            let half = (self.patch[a] / 2) as i64;
            let lo = center[a] as i64 - half;
            let max_start = dims[a] as i64 - self.patch[a] as i64;
            start[a] = lo.clamp(max_start.min(0), max_start.max(0));
        }
        start
    }

    /// Copies one patch (volume channels + labels) starting at `start`,
    /// zero-filling outside the volume.
    fn extract(
        &self,
        subject: &Subject,
        start: [i64; 3],
        vol_out: &mut [f32],
        label_out: &mut [u8],
    ) {
        let dims = subject.volume.dims();
        let [px, py, pz] = self.patch;
        let channels = subject.volume.channels();
        for c in 0..channels {
            for x in 0..px {
                for y in 0..py {
                    for z in 0..pz {
                        let (vx, vy, vz) =
                            (start[0] + x as i64, start[1] + y as i64, start[2] + z as i64);
                        let inside = vx >= 0
                            && vy >= 0
                            && vz >= 0
                            && (vx as usize) < dims[0]
                            && (vy as usize) < dims[1]
                            && (vz as usize) < dims[2];
                        let off = ((c * px + x) * py + y) * pz + z;
                        vol_out[off] = if inside {
                            subject.volume.at(c, vx as usize, vy as usize, vz as usize)
                        } else {
                            0.0
                        };
                        if c == 0 {
                            label_out[(x * py + y) * pz + z] = if inside {
                                subject.labels.at(vx as usize, vy as usize, vz as usize)
                            } else {
                                0
                            };
                        }
                    }
                }
            }
        }
    }

    fn sample(
        &self,
        rng: &mut ChaCha12Rng,
        oversample: f64,
        vol_out: &mut [f32],
        label_out: &mut [u8],
    ) {
        let si = rng.random_range(0..self.subjects.len());
        let subject = self.subjects[si];
        let dims = subject.volume.dims();
        let fg = &self.foreground[si];
        let use_fg = !fg.is_empty() && rng.random::<f64>() < oversample;
        let start = if use_fg {
            let c = fg[rng.random_range(0..fg.len())];
            self.start_around(dims, c)
        } else {
            let mut s = [0i64; 3];
            for a in 0..3 {
                let max_start = dims[a] as i64 - self.patch[a] as i64;
                s[a] = if max_start > 0 { rng.random_range(0..=max_start) } else { max_start / 2 };
            }
            s
        };
        self.extract(subject, start, vol_out, label_out);
    }
}

/// Nearest-voxel label downsampling by integer strides.
fn downsample_labels(labels: &LabelMap, factor: [usize; 3]) -> LabelMap {
    let dims = labels.dims();
    let out_dims = [dims[0] / factor[0], dims[1] / factor[1], dims[2] / factor[2]];
    let mut data = Vec::with_capacity(out_dims[0] * out_dims[1] * out_dims[2]);
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                data.push(labels.at(x * factor[0], y * factor[1], z * factor[2]));
            }
        }
    }
    let sp = labels.spacing();
    let spacing = [
        sp[0] * factor[0] as f32,
        sp[1] * factor[1] as f32,
        sp[2] * factor[2] as f32,
    ];
    LabelMap::new(out_dims, spacing, data).expect("downsampled labels stay valid")
}

/// Trains `net` in place on the fold's training subjects.
///
/// Optimization is SGD with Nesterov momentum and polynomial learning-rate
/// decay over the full step horizon. Deep-supervision losses are combined
/// with the configured weights (auxiliary targets are nearest-voxel
/// downsampled labels). Aborts with [`TrainError::Diverged`] if the loss
/// leaves the finite range.
pub fn train_fold<T: Element>(
    net: &mut SegNetwork<T>,
    fold: &FoldSplit,
    cfg: &TrainConfig,
    subjects: &[Subject],
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    let plan = net.plan().clone();
    if cfg.deep_supervision_weights.len() != plan.deep_supervision_levels + 1 {
        return Err(TrainError::Validation(format!(
            "{} supervision weights for {} heads",
            cfg.deep_supervision_weights.len(),
            plan.deep_supervision_levels + 1
        )));
    }
    let train_subjects: Vec<&Subject> = fold
        .train_subject_ids
        .iter()
        .map(|id| {
            subjects
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| TrainError::Validation(format!("subject \"{id}\" not in dataset")))
        })
        .collect::<Result<_, _>>()?;
    if train_subjects.is_empty() {
        return Err(TrainError::Usage("fold has no training subjects".into()));
    }
    for s in &train_subjects {
        if s.volume.channels() != plan.in_channels {
            return Err(TrainError::Validation(format!(
                "subject \"{}\" has {} channels, plan expects {}",
                s.id,
                s.volume.channels(),
                plan.in_channels
            )));
        }
        if s.volume.dims() != s.labels.dims() {
            return Err(TrainError::Validation(format!(
                "subject \"{}\": volume dims {:?} differ from label dims {:?}",
                s.id,
                s.volume.dims(),
                s.labels.dims()
            )));
        }
    }

    let patch = plan.patch_size;
    let sampler = Sampler::new(train_subjects, patch);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    // Per-level integer downsampling factors for auxiliary targets.
    let mut level_factors = vec![[1usize; 3]];
    for level in 1..=plan.deep_supervision_levels {
        let mut f = level_factors[level - 1];
        for a in 0..3 {
            f[a] *= plan.strides_per_stage[level - 1][a];
        }
        level_factors.push(f);
    }

    let mut velocity: Vec<Vec<T>> = (0..net.parameter_count())
        .map(|i| vec![T::zero(); net.parameter(i).numel()])
        .collect();

    let total_steps = cfg.epochs * cfg.steps_per_epoch;
    let mut log = TrainLog {
        fold_index: fold.fold_index,
        steps: total_steps,
        epochs: Vec::with_capacity(cfg.epochs),
    };

    let patch_len = patch[0] * patch[1] * patch[2];
    let mut vol_buf = vec![0f32; plan.in_channels * patch_len];
    let mut label_buf = vec![0u8; patch_len];
    let mut global_step = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut epoch_reports: Vec<LossReport> = Vec::with_capacity(cfg.steps_per_epoch);
        for _step in 0..cfg.steps_per_epoch {
            // Assemble the batch.
            let mut batch =
                vec![T::zero(); cfg.batch_size * plan.in_channels * patch_len];
            let mut batch_labels: Vec<LabelMap> = Vec::with_capacity(cfg.batch_size);
            for b in 0..cfg.batch_size {
                sampler.sample(&mut rng, cfg.foreground_oversample, &mut vol_buf, &mut label_buf);
                let base = b * plan.in_channels * patch_len;
                for (i, &v) in vol_buf.iter().enumerate() {
                    batch[base + i] = T::from_f32(v);
                }
                // Patch buffers are (x, y, z) with z fastest, matching the
                // tensor layout; LabelMap stores x fastest, so transpose.
                let mut patch_labels = vec![0u8; patch_len];
                for x in 0..patch[0] {
                    for y in 0..patch[1] {
                        for z in 0..patch[2] {
                            patch_labels[(z * patch[1] + y) * patch[0] + x] =
                                label_buf[(x * patch[1] + y) * patch[2] + z];
                        }
                    }
                }
                batch_labels.push(LabelMap::new(
                    patch,
                    [1.0; 3],
                    patch_labels,
                )?);
            }
            let patch_t = Tensor::new(
                &[cfg.batch_size, plan.in_channels, patch[0], patch[1], patch[2]],
                batch,
            )?;

            let mut fp = net.forward(&patch_t, true, cfg.seed.wrapping_add(global_step as u64))?;
            let mut total: Option<TensorId> = None;
            let mut primary_report: Option<LossReport> = None;
            for (level, &out) in fp.outputs.iter().enumerate() {
                let f = level_factors[level];
                let level_targets: Vec<LabelMap> = batch_labels
                    .iter()
                    .map(|l| {
                        if f == [1, 1, 1] {
                            l.clone()
                        } else {
                            downsample_labels(l, f)
                        }
                    })
                    .collect();
                let (loss, report) = dice_ce_loss(&mut fp.graph, out, &level_targets, None)?;
                if level == 0 {
                    primary_report = Some(report);
                }
                let weighted =
                    fp.graph.scale(loss, cfg.deep_supervision_weights[level])?;
                total = Some(match total {
                    None => weighted,
                    Some(acc) => fp.graph.add(acc, weighted)?,
                });
            }
            let total = total.expect("at least one supervision head");
            let total_value = fp.graph.value(total).item()?.to_f64();
            if !total_value.is_finite() {
                return Err(TrainError::Diverged { step: global_step, value: total_value });
            }
            epoch_reports.push(primary_report.expect("level 0 always present"));

            fp.graph.backward(total)?;

            // Nesterov momentum: v <- mu v + g; w <- w - lr (g + mu v).
            let t = global_step as f64 / total_steps as f64;
            let lr = cfg.learning_rate * (1.0 - t).powf(cfg.poly_decay_exponent);
            if lr != 0.0 {
                let mu = T::from_f64(cfg.momentum);
                let lr_t = T::from_f64(lr);
                for (i, &pid) in fp.params.iter().enumerate() {
                    let grad = fp
                        .graph
                        .grad(pid)
                        .ok_or_else(|| TrainError::Validation(format!(
                            "parameter {} received no gradient",
                            net.parameter_name(i)
                        )))?
                        .to_vec();
                    let vel = &mut velocity[i];
                    let w = net.parameter_mut(i).data_mut();
                    for j in 0..w.len() {
                        vel[j] = mu * vel[j] + grad[j];
                        w[j] -= lr_t * (grad[j] + mu * vel[j]);
                    }
                }
            }
            global_step += 1;
        }

        // Component-wise epoch means.
        let m = epoch_reports.len() as f64;
        let classes = epoch_reports[0].per_class_dice.len();
        let mut mean = LossReport {
            total: 0.0,
            dice_component: 0.0,
            ce_component: 0.0,
            per_class_dice: vec![0.0; classes],
        };
        for r in &epoch_reports {
            mean.total += r.total / m;
            mean.dice_component += r.dice_component / m;
            mean.ce_component += r.ce_component / m;
            for (acc, v) in mean.per_class_dice.iter_mut().zip(&r.per_class_dice) {
                *acc += v / m;
            }
        }
        log.epochs.push(mean);
    }
    Ok(log)
}

/// Result of checking one parameter tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub parameter: String,
    pub checked_indices: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub worst_parameter: Option<String>,
    pub passed: bool,
}

/// Central finite-difference check of the full training loss gradient on a
/// freshly initialized double-precision network.
///
/// Checks every parameter tensor whose name satisfies `filter`, sampling up
/// to `samples_per_tensor` scalar entries each. The loss is the
/// deep-supervision weighted Dice + CE on one random patch with random
/// labels. An empty selection yields an empty, passing report.
pub fn grad_check_filtered(
    plan: &NetworkPlan,
    tolerance: f64,
    samples_per_tensor: usize,
    filter: impl Fn(&str) -> bool,
) -> Result<GradCheckReport, TrainError> {
    if !(tolerance > 0.0) {
        return Err(TrainError::Usage(format!(
            "tolerance must be positive, got {tolerance}"
        )));
    }
    let mut net = SegNetwork::<f64>::new(plan, 0)?;
    let patch = plan.patch_size;
    let mut rng = ChaCha12Rng::seed_from_u64(1);

    let patch_t = Tensor::<f64>::from_fn(
        &[1, plan.in_channels, patch[0], patch[1], patch[2]],
        |_| rng.random::<f64>() * 2.0 - 1.0,
    );
    let n_vox = patch[0] * patch[1] * patch[2];
    let labels: Vec<u8> = (0..n_vox)
        .map(|_| {
            let cls = rng.random_range(0..plan.class_count);
            crate::volio::label_of_class(cls).expect("class_count <= 4")
        })
        .collect();
    let target = LabelMap::new(patch, [1.0; 3], labels)?;
    let weights = deep_supervision_weights(plan.deep_supervision_levels + 1);

    // Downsampled targets per level, fixed across evaluations.
    let mut factors = vec![[1usize; 3]];
    for level in 1..=plan.deep_supervision_levels {
        let mut f = factors[level - 1];
        for a in 0..3 {
            f[a] *= plan.strides_per_stage[level - 1][a];
        }
        factors.push(f);
    }
    let targets: Vec<LabelMap> = factors
        .iter()
        .map(|&f| if f == [1, 1, 1] { target.clone() } else { downsample_labels(&target, f) })
        .collect();

    let build_loss =
        |net: &SegNetwork<f64>| -> Result<(Graph<f64>, TensorId, Vec<TensorId>), TrainError> {
            let mut fp = net.forward(&patch_t, false, 0)?;
            let mut total: Option<TensorId> = None;
            for (level, &out) in fp.outputs.iter().enumerate() {
                let (loss, _) =
                    dice_ce_loss(&mut fp.graph, out, std::slice::from_ref(&targets[level]), None)?;
                let w = fp.graph.scale(loss, weights[level])?;
                total = Some(match total {
                    None => w,
                    Some(acc) => fp.graph.add(acc, w)?,
                });
            }
            let total = total.expect("at least one head");
            Ok((fp.graph, total, fp.params))
        };
    let eval_loss = |net: &SegNetwork<f64>| -> Result<f64, TrainError> {
        let (g, total, _) = build_loss(net)?;
        Ok(g.value(total).item()?)
    };

    let (mut graph, total, param_ids) = build_loss(&net)?;
    graph.backward(total)?;

    let selected: Vec<usize> =
        (0..net.parameter_count()).filter(|&i| filter(net.parameter_name(i))).collect();
    let mut entries = Vec::with_capacity(selected.len());
    let mut max_rel = 0.0f64;
    let mut worst: Option<String> = None;

    let mut sample_rng = ChaCha12Rng::seed_from_u64(2);
    for &pi in &selected {
        let name = net.parameter_name(pi).to_owned();
        let numel = net.parameter(pi).numel();
        let analytic = graph
            .grad(param_ids[pi])
            .ok_or_else(|| TrainError::Validation(format!("no gradient for {name}")))?
            .to_vec();
        let count = samples_per_tensor.min(numel);
        let mut tensor_max = 0.0f64;
        for _ in 0..count {
            let j = sample_rng.random_range(0..numel);
            let orig = net.parameter(pi).data()[j];
            let h = 1e-5 * (1.0 + orig.abs());

            net.parameter_mut(pi).data_mut()[j] = orig + h;
            let plus = eval_loss(&net)?;
            net.parameter_mut(pi).data_mut()[j] = orig - h;
            let minus = eval_loss(&net)?;
            net.parameter_mut(pi).data_mut()[j] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let ad = analytic[j];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
            tensor_max = tensor_max.max(rel);
        }
        if tensor_max > max_rel {
            max_rel = tensor_max;
            worst = Some(name.clone());
        }
        entries.push(GradCheckEntry {
            parameter: name,
            checked_indices: count,
            max_rel_error: tensor_max,
        });
    }

    Ok(GradCheckReport {
        tolerance,
        passed: max_rel < tolerance,
        max_rel_error: max_rel,
        worst_parameter: if entries.is_empty() { None } else { worst },
        entries,
    })
}

/// [`grad_check_filtered`] over every parameter, sampling 8 entries per
/// tensor.
pub fn grad_check(plan: &NetworkPlan, tolerance: f64) -> Result<GradCheckReport, TrainError> {
    grad_check_filtered(plan, tolerance, 8, |_| true)
}

/// A minimal two-stage plan small enough for finite-difference checking.
pub fn tiny_plan() -> NetworkPlan {
    use crate::planner::{PositionalEncoding, TransformerConfig};
    NetworkPlan {
        in_channels: 2,
        class_count: 3,
        target_spacing: [1.0; 3],
        patch_size: [8, 8, 8],
        batch_size: 1,
        stage_count: 2,
        strides_per_stage: vec![[2, 2, 2], [2, 2, 2]],
        kernels_per_stage: vec![[3, 3, 3], [3, 3, 3]],
        base_channels: 4,
        max_channels: 8,
        transformer: TransformerConfig {
            num_heads: 2,
            num_layers: 1,
            embed_dim: 8,
            mlp_ratio: 2.0,
            positional_encoding: PositionalEncoding::Learned,
        },
        residual_connection: true,
        deep_supervision_levels: 1,
        leaky_relu_slope: 0.01,
        dropout_p: 0.0,
    }
}
