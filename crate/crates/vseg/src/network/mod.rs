//! The segmentation network: a U-shaped encoder/decoder with a transformer
//! block nested at the bottleneck.
//!
//! The encoder downsamples with strided convolutions, stashing each stage's
//! input as a skip connection. The bottleneck feature map is flattened into
//! tokens, run through self-attention, and reshaped back (optionally added
//! onto its input). The decoder mirrors the encoder with transposed
//! convolutions, concatenating the matching skip at every level, and
//! auxiliary segmentation heads provide deep supervision at the shallower
//! decoder levels.
//!
//! All learnable tensors live in a flat, name-indexed [`ParamBank`]; a
//! forward pass plants them into a fresh [`Graph`] so gradients can be read
//! back per parameter after `backward`.

mod transformer;

pub use transformer::{attention, attention_with_weights, MultiHeadAttention, TransformerBlock};

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::planner::{NetworkPlan, PlanError};
use crate::tensor::{
    load_checkpoint, save_checkpoint, Element, Graph, Tensor, TensorError, TensorId,
};
use crate::volio::{label_of_class, LabelMap, VolError, Volume};

use transformer::{gaussian, NORM_EPS};

#[derive(Debug)]
pub enum NetError {
    /// Architecture configuration is inconsistent.
    Config(String),
    /// An input tensor has the wrong shape.
    Shape(String),
    Tensor(TensorError),
    Volume(VolError),
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::Config(m) => write!(f, "config error: {m}"),
            NetError::Shape(m) => write!(f, "shape error: {m}"),
            NetError::Tensor(e) => write!(f, "tensor error: {e}"),
            NetError::Volume(e) => write!(f, "volume error: {e}"),
        }
    }
}

impl std::error::Error for NetError {}

impl From<TensorError> for NetError {
    fn from(e: TensorError) -> Self {
        // Shape diagnostics keep their flavor so callers can distinguish
        // between bad inputs and internal failures.
        match e {
            TensorError::Shape(m) => NetError::Shape(m),
            other => NetError::Tensor(other),
        }
    }
}

impl From<VolError> for NetError {
    fn from(e: VolError) -> Self {
        NetError::Volume(e)
    }
}

impl From<PlanError> for NetError {
    fn from(e: PlanError) -> Self {
        NetError::Config(e.to_string())
    }
}

/// Flat, ordered store of named parameter tensors.
///
/// Indices are stable from construction, so optimizer state can be kept in
/// parallel vectors; names are unique and double as checkpoint keys.
#[derive(Clone, Debug)]
pub struct ParamBank<T: Element> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> ParamBank<T> {
    pub fn new() -> Self {
        ParamBank { entries: Vec::new() }
    }

    /// Registers a tensor under `name` and returns its index.
    pub fn add(&mut self, name: String, value: Tensor<T>) -> usize {
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn value(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].1
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Plants every parameter into `g`; the returned ids are indexed like
    /// the bank.
    pub fn insert_all(&self, g: &mut Graph<T>) -> Vec<TensorId> {
        self.entries
            .iter()
            .map(|(_, t)| g.parameter(t.clone()))
            .collect()
    }
}

impl<T: Element> Default for ParamBank<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// conv3d -> dropout -> instance norm -> leaky ReLU.
#[derive(Clone, Debug)]
struct ConvUnit {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    stride: [usize; 3],
    pad: [usize; 3],
}

impl ConvUnit {
    fn new<T: Element>(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        slope: f64,
        bank: &mut ParamBank<T>,
        rng: &mut ChaCha12Rng,
    ) -> ConvUnit {
        let fan_in = (c_in * kernel[0] * kernel[1] * kernel[2]) as f64;
        let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        let weight = bank.add(
            format!("{prefix}.conv.weight"),
            gaussian(&[c_out, c_in, kernel[0], kernel[1], kernel[2]], std, rng),
        );
        let bias = bank.add(format!("{prefix}.conv.bias"), Tensor::zeros(&[c_out]));
        let gamma = bank.add(format!("{prefix}.norm.gamma"), Tensor::full(&[c_out], T::one()));
        let beta = bank.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[c_out]));
        ConvUnit {
            weight,
            bias,
            gamma,
            beta,
            stride,
            pad: [(kernel[0] - 1) / 2, (kernel[1] - 1) / 2, (kernel[2] - 1) / 2],
        }
    }

    fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        ids: &[TensorId],
        x: TensorId,
        ctx: &mut ForwardCtx,
    ) -> Result<TensorId, TensorError> {
        let mut h = g.conv3d(x, ids[self.weight], ids[self.bias], self.stride, self.pad)?;
        if ctx.training && ctx.dropout_p > 0.0 {
            h = g.dropout(h, ctx.dropout_p, true, ctx.next_seed())?;
        }
        let h = g.instance_norm(h, ids[self.gamma], ids[self.beta], NORM_EPS)?;
        g.leaky_relu(h, ctx.slope)
    }
}

/// Two stacked conv units; the stage stride is applied by the first.
#[derive(Clone, Debug)]
struct ConvStage {
    units: [ConvUnit; 2],
}

impl ConvStage {
    fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        ids: &[TensorId],
        x: TensorId,
        ctx: &mut ForwardCtx,
    ) -> Result<TensorId, TensorError> {
        let h = self.units[0].forward(g, ids, x, ctx)?;
        self.units[1].forward(g, ids, h, ctx)
    }
}

/// Transposed conv upsampling, skip concatenation, two conv units.
#[derive(Clone, Debug)]
struct DecoderStage {
    up_weight: usize,
    up_bias: usize,
    stride: [usize; 3],
    units: [ConvUnit; 2],
}

#[derive(Clone, Debug)]
struct Head {
    weight: usize,
    bias: usize,
}

/// Per-forward runtime switches plus the dropout seed stream.
struct ForwardCtx {
    training: bool,
    dropout_p: f64,
    slope: f64,
    seed: u64,
    calls: u64,
}

impl ForwardCtx {
    fn next_seed(&mut self) -> u64 {
        self.calls += 1;
        // Distinct per dropout site; splitmix-style spread of the base seed.
        self.seed.wrapping_add(self.calls.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

/// Everything produced by one forward pass. The graph stays alive so the
/// caller can append loss ops and run `backward`; `params` maps bank indices
/// to graph ids for reading gradients.
pub struct ForwardPass<T: Element> {
    pub graph: Graph<T>,
    /// One logits tensor per supervision head, full resolution first,
    /// deepest last.
    pub outputs: Vec<TensorId>,
    pub params: Vec<TensorId>,
}

/// Encoder/decoder segmentation network built from a [`NetworkPlan`].
#[derive(Clone, Debug)]
pub struct SegNetwork<T: Element> {
    plan: NetworkPlan,
    bank: ParamBank<T>,
    encoder: Vec<ConvStage>,
    transformer: TransformerBlock,
    decoder: Vec<DecoderStage>,
    heads: Vec<Head>,
}

impl<T: Element> SegNetwork<T> {
    /// Builds a freshly initialized network; `seed` fixes every random draw.
    pub fn new(plan: &NetworkPlan, seed: u64) -> Result<SegNetwork<T>, NetError> {
        plan.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut bank = ParamBank::new();
        let s = plan.stage_count;
        let slope = plan.leaky_relu_slope;

        let mut encoder = Vec::with_capacity(s);
        for i in 0..s {
            let c_in = if i == 0 { plan.in_channels } else { plan.channels_at(i - 1) };
            let c_out = plan.channels_at(i);
            let k = plan.kernels_per_stage[i];
            encoder.push(ConvStage {
                units: [
                    ConvUnit::new(
                        &format!("enc{i}.unit0"),
                        c_in,
                        c_out,
                        k,
                        plan.strides_per_stage[i],
                        slope,
                        &mut bank,
                        &mut rng,
                    ),
                    ConvUnit::new(
                        &format!("enc{i}.unit1"),
                        c_out,
                        c_out,
                        k,
                        [1, 1, 1],
                        slope,
                        &mut bank,
                        &mut rng,
                    ),
                ],
            });
        }

        let transformer = TransformerBlock::new(
            "transformer",
            &plan.transformer,
            plan.token_count(),
            plan.residual_connection,
            &mut bank,
            &mut rng,
        )?;

        let mut decoder = Vec::with_capacity(s);
        for j in (0..s).rev() {
            let c_in = if j == s - 1 { plan.channels_at(s - 1) } else { plan.channels_at(j + 1) };
            let c_out = plan.channels_at(j);
            let skip_ch = if j == 0 { plan.in_channels } else { plan.channels_at(j - 1) };
            let stride = plan.strides_per_stage[j];
            let k = plan.kernels_per_stage[j];
            let fan_in = (c_in * stride[0] * stride[1] * stride[2]) as f64;
            let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
            let up_weight = bank.add(
                format!("dec{j}.up.weight"),
                gaussian(&[c_in, c_out, stride[0], stride[1], stride[2]], std, &mut rng),
            );
            let up_bias = bank.add(format!("dec{j}.up.bias"), Tensor::zeros(&[c_out]));
            decoder.push(DecoderStage {
                up_weight,
                up_bias,
                stride,
                units: [
                    ConvUnit::new(
                        &format!("dec{j}.unit0"),
                        c_out + skip_ch,
                        c_out,
                        k,
                        [1, 1, 1],
                        slope,
                        &mut bank,
                        &mut rng,
                    ),
                    ConvUnit::new(
                        &format!("dec{j}.unit1"),
                        c_out,
                        c_out,
                        k,
                        [1, 1, 1],
                        slope,
                        &mut bank,
                        &mut rng,
                    ),
                ],
            });
        }
        decoder.reverse();

        let mut heads = Vec::with_capacity(plan.deep_supervision_levels + 1);
        for j in 0..=plan.deep_supervision_levels {
            let c = plan.channels_at(j);
            let std = (1.0 / c as f64).sqrt();
            heads.push(Head {
                weight: bank.add(
                    format!("head{j}.weight"),
                    gaussian(&[plan.class_count, c, 1, 1, 1], std, &mut rng),
                ),
                bias: bank.add(format!("head{j}.bias"), Tensor::zeros(&[plan.class_count])),
            });
        }

        Ok(SegNetwork {
            plan: plan.clone(),
            bank,
            encoder,
            transformer,
            decoder,
            heads,
        })
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    pub fn parameter_count(&self) -> usize {
        self.bank.len()
    }

    pub fn parameter_name(&self, index: usize) -> &str {
        self.bank.name(index)
    }

    pub fn parameter(&self, index: usize) -> &Tensor<T> {
        self.bank.value(index)
    }

    pub fn parameter_mut(&mut self, index: usize) -> &mut Tensor<T> {
        self.bank.value_mut(index)
    }

    /// Total scalar weight count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.bank.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Index of the transformer's zero-initialized output projection weight.
    pub fn transformer_projection_index(&self) -> usize {
        self.transformer.output_projection_index()
    }

    /// Parameter index of the supervision head at decoder level `level`.
    pub fn head_indices(&self, level: usize) -> (usize, usize) {
        (self.heads[level].weight, self.heads[level].bias)
    }

    /// Runs the network on `patch` `(N, in_channels, px, py, pz)`.
    ///
    /// `seed` drives dropout masks and is ignored when `training` is false
    /// or the plan disables dropout.
    pub fn forward(
        &self,
        patch: &Tensor<T>,
        training: bool,
        seed: u64,
    ) -> Result<ForwardPass<T>, NetError> {
        self.forward_impl(patch, training, seed, true)
    }

    /// Ablation forward that skips the bottleneck transformer entirely,
    /// feeding encoder output straight into the decoder. Useful for
    /// isolating the transformer's contribution.
    pub fn forward_bypassed(
        &self,
        patch: &Tensor<T>,
        training: bool,
        seed: u64,
    ) -> Result<ForwardPass<T>, NetError> {
        self.forward_impl(patch, training, seed, false)
    }

    fn forward_impl(
        &self,
        patch: &Tensor<T>,
        training: bool,
        seed: u64,
        use_transformer: bool,
    ) -> Result<ForwardPass<T>, NetError> {
        let sh = patch.shape();
        let p = self.plan.patch_size;
        if sh.len() != 5
            || sh[1] != self.plan.in_channels
            || sh[2] != p[0]
            || sh[3] != p[1]
            || sh[4] != p[2]
        {
            return Err(NetError::Shape(format!(
                "patch shape {sh:?} does not match (N, {}, {}, {}, {})",
                self.plan.in_channels, p[0], p[1], p[2]
            )));
        }
        let mut ctx = ForwardCtx {
            training,
            dropout_p: self.plan.dropout_p,
            slope: self.plan.leaky_relu_slope,
            seed,
            calls: 0,
        };
        let mut g = Graph::new();
        let params = self.bank.insert_all(&mut g);
        let input = g.constant(patch.clone());

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut feats = input;
        for stage in &self.encoder {
            skips.push(feats);
            feats = stage.forward(&mut g, &params, feats, &mut ctx)?;
        }

        if use_transformer {
            feats = self.transformer.forward(&mut g, &params, feats)?;
        }

        let mut head_outputs = vec![None; self.heads.len()];
        for j in (0..self.decoder.len()).rev() {
            let dec = &self.decoder[j];
            let up = g.conv3d_transposed(
                feats,
                params[dec.up_weight],
                params[dec.up_bias],
                dec.stride,
                [0, 0, 0],
            )?;
            let cat = g.concat(&[up, skips[j]], 1)?;
            let h = dec.units[0].forward(&mut g, &params, cat, &mut ctx)?;
            feats = dec.units[1].forward(&mut g, &params, h, &mut ctx)?;
            if j < self.heads.len() {
                let head = &self.heads[j];
                let logits = g.conv3d(
                    feats,
                    params[head.weight],
                    params[head.bias],
                    [1, 1, 1],
                    [0, 0, 0],
                )?;
                head_outputs[j] = Some(logits);
            }
        }

        let outputs = head_outputs
            .into_iter()
            .map(|o| o.expect("every head level is visited by the decoder"))
            .collect();
        Ok(ForwardPass { graph: g, outputs, params })
    }

    /// Sliding-window class probabilities for a whole volume.
    ///
    /// The volume is zero-padded up to the patch size if needed, tiled with
    /// 50% overlapping windows, and per-voxel softmax probabilities are
    /// averaged uniformly over every window that covers the voxel. The
    /// result has one channel per class, cropped back to the input dims.
    pub fn predict_probabilities(&self, vol: &Volume) -> Result<Volume, NetError> {
        if vol.channels() != self.plan.in_channels {
            return Err(NetError::Shape(format!(
                "volume has {} channels, network expects {}",
                vol.channels(),
                self.plan.in_channels
            )));
        }
        let dims = vol.dims();
        let patch = self.plan.patch_size;
        let padded = [
            dims[0].max(patch[0]),
            dims[1].max(patch[1]),
            dims[2].max(patch[2]),
        ];
        let k = self.plan.class_count;
        let pvox = padded[0] * padded[1] * padded[2];
        let mut acc = vec![0f64; k * pvox];
        let mut counts = vec![0f64; pvox];

        let starts = |extent: usize, size: usize| -> Vec<usize> {
            let step = (size / 2).max(1);
            let mut out = Vec::new();
            let mut s = 0;
            loop {
                out.push(s.min(extent - size));
                if s + size >= extent {
                    break;
                }
                s += step;
            }
            out.dedup();
            out
        };
        let xs = starts(padded[0], patch[0]);
        let ys = starts(padded[1], patch[1]);
        let zs = starts(padded[2], patch[2]);

        let mut patch_data = vec![T::zero(); self.plan.in_channels * patch[0] * patch[1] * patch[2]];
        for &sx in &xs {
            for &sy in &ys {
                for &sz in &zs {
                    for v in patch_data.iter_mut() {
                        *v = T::zero();
                    }
                    for c in 0..self.plan.in_channels {
                        for x in 0..patch[0] {
                            if sx + x >= dims[0] {
                                continue;
                            }
                            for y in 0..patch[1] {
                                if sy + y >= dims[1] {
                                    continue;
                                }
                                for z in 0..patch[2] {
                                    if sz + z >= dims[2] {
                                        continue;
                                    }
                                    let t_off = ((c * patch[0] + x) * patch[1] + y) * patch[2] + z;
                                    patch_data[t_off] =
                                        T::from_f32(vol.at(c, sx + x, sy + y, sz + z));
                                }
                            }
                        }
                    }
                    let patch_t = Tensor::new(
                        &[1, self.plan.in_channels, patch[0], patch[1], patch[2]],
                        patch_data.clone(),
                    )?;
                    let mut fp = self.forward(&patch_t, false, 0)?;
                    let probs = fp.graph.softmax(fp.outputs[0], 1)?;
                    let pd = fp.graph.value(probs).data();
                    for cls in 0..k {
                        for x in 0..patch[0] {
                            for y in 0..patch[1] {
                                for z in 0..patch[2] {
                                    let t_off =
                                        ((cls * patch[0] + x) * patch[1] + y) * patch[2] + z;
                                    let a_off = ((cls * padded[2] + sz + z) * padded[1] + sy + y)
                                        * padded[0]
                                        + sx
                                        + x;
                                    acc[a_off] += pd[t_off].to_f64();
                                }
                            }
                        }
                    }
                    for x in 0..patch[0] {
                        for y in 0..patch[1] {
                            for z in 0..patch[2] {
                                counts[((sz + z) * padded[1] + sy + y) * padded[0] + sx + x] += 1.0;
                            }
                        }
                    }
                }
            }
        }

        let n = dims[0] * dims[1] * dims[2];
        let mut out = vec![0f32; k * n];
        for cls in 0..k {
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let a_off =
                            ((cls * padded[2] + z) * padded[1] + y) * padded[0] + x;
                        let c_off = (z * padded[1] + y) * padded[0] + x;
                        let o_off = ((cls * dims[2] + z) * dims[1] + y) * dims[0] + x;
                        out[o_off] = (acc[a_off] / counts[c_off]) as f32;
                    }
                }
            }
        }
        let names = (0..k).map(|c| format!("class{c}")).collect();
        Ok(Volume::new(k, dims, vol.spacing(), names, out)?)
    }

    /// Full-volume prediction: probability averaging followed by a voxelwise
    /// argmax, mapped back to the label alphabet.
    pub fn predict_labels(&self, vol: &Volume) -> Result<LabelMap, NetError> {
        let probs = self.predict_probabilities(vol)?;
        let dims = probs.dims();
        let k = probs.channels();
        let n = dims[0] * dims[1] * dims[2];
        let mut labels = vec![0u8; n];
        for i in 0..n {
            let mut best = 0usize;
            let mut best_p = probs.data()[i];
            for cls in 1..k {
                let p = probs.data()[cls * n + i];
                if p > best_p {
                    best_p = p;
                    best = cls;
                }
            }
            labels[i] = label_of_class(best).ok_or_else(|| {
                NetError::Config(format!("class {best} has no label assignment"))
            })?;
        }
        Ok(LabelMap::new(dims, vol.spacing(), labels)?)
    }

    /// Writes all parameters to `path` in the checkpoint format.
    pub fn save_weights(&self, path: &Path) -> Result<(), NetError> {
        let entries: Vec<(&str, &Tensor<T>)> = self.bank.iter().collect();
        save_checkpoint(path, &entries).map_err(NetError::Tensor)
    }

    /// Loads parameters by name; every network parameter must be present
    /// with a matching shape, and unknown names are rejected.
    pub fn load_weights(&mut self, path: &Path) -> Result<(), NetError> {
        let loaded = load_checkpoint::<T>(path).map_err(NetError::Tensor)?;
        let mut used = vec![false; loaded.len()];
        for i in 0..self.bank.len() {
            let name = self.bank.name(i).to_owned();
            let pos = loaded
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| NetError::Config(format!("checkpoint is missing \"{name}\"")))?;
            if loaded[pos].1.shape() != self.bank.value(i).shape() {
                return Err(NetError::Shape(format!(
                    "checkpoint \"{name}\" has shape {:?}, network expects {:?}",
                    loaded[pos].1.shape(),
                    self.bank.value(i).shape()
                )));
            }
            used[pos] = true;
            *self.bank.value_mut(i) = loaded[pos].1.clone();
        }
        if let Some(pos) = used.iter().position(|u| !u) {
            return Err(NetError::Config(format!(
                "checkpoint contains unknown tensor \"{}\"",
                loaded[pos].0
            )));
        }
        Ok(())
    }
}
