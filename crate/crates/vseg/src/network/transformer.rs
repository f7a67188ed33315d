//! Scaled dot-product attention, multi-head attention, and the bottleneck
//! transformer block.
//!
//! The block follows the standard pre-norm encoder layout: tokens pass
//! through `t += MHA(LN(t))` and `t += MLP(LN(t))` sublayers, a final layer
//! normalization, and a zero-initialized output projection. Zero
//! initialization makes a freshly built block the identity map when the
//! surrounding residual connection is enabled, so inserting the block never
//! perturbs an already useful feature stream.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::planner::{PositionalEncoding, TransformerConfig};
use crate::tensor::{Element, Graph, Tensor, TensorError, TensorId};

use super::{NetError, ParamBank};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Scaled dot-product attention on plain tensors.
///
/// `q`, `k`, `v` are `(tokens, d)` or `(batch, tokens, d)`; all three must
/// share shape. Returns `softmax(q kᵀ / √d) v`.
pub fn attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    attention_with_weights(q, k, v).map(|(out, _)| out)
}

/// Like [`attention`] but also returns the post-softmax weight matrix
/// (`(tokens, tokens)` or `(batch, tokens, tokens)`), each row summing to 1.
pub fn attention_with_weights<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    if q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(TensorError::Shape(format!(
            "attention: q/k/v shapes {:?}/{:?}/{:?} must match",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let rank = q.rank();
    if rank != 2 && rank != 3 {
        return Err(TensorError::Shape(format!(
            "attention: rank must be 2 or 3, got {rank}"
        )));
    }
    let d = q.shape()[rank - 1];
    let mut g = Graph::new();
    let qi = g.constant(q.clone());
    let ki = g.constant(k.clone());
    let vi = g.constant(v.clone());
    let kt = if rank == 2 {
        g.transpose(ki, &[1, 0])?
    } else {
        g.transpose(ki, &[0, 2, 1])?
    };
    let scores = g.matmul(qi, kt)?;
    let scaled = g.affine(scores, 1.0 / (d as f64).sqrt(), 0.0)?;
    let weights = g.softmax(scaled, rank - 1)?;
    let out = g.matmul(weights, vi)?;
    Ok((g.value(out).clone(), g.value(weights).clone()))
}

/// Multi-head self-attention over `(batch, tokens, embed)` sequences.
///
/// Heads attend over disjoint `embed / num_heads` slices after learned Q/K/V
/// projections; outputs are concatenated and projected back to `embed`. The
/// output projection carries no bias, so zeroing its weights annihilates the
/// sublayer output.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    embed_dim: usize,
    num_heads: usize,
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
    out_w: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Element>(
        prefix: &str,
        embed_dim: usize,
        num_heads: usize,
        bank: &mut ParamBank<T>,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self, NetError> {
        if num_heads == 0 || embed_dim % num_heads != 0 {
            return Err(NetError::Config(format!(
                "embed_dim {embed_dim} not divisible by num_heads {num_heads}"
            )));
        }
        let std = (2.0 / (embed_dim + embed_dim) as f64).sqrt();
        let mut linear = |name: &str| {
            let w = bank.add(
                format!("{prefix}.{name}.weight"),
                gaussian(&[embed_dim, embed_dim], std, rng),
            );
            let b = bank.add(format!("{prefix}.{name}.bias"), Tensor::zeros(&[embed_dim]));
            (w, b)
        };
        let (q_w, q_b) = linear("q");
        let (k_w, k_b) = linear("k");
        let (v_w, v_b) = linear("v");
        let out_w = bank.add(
            format!("{prefix}.out.weight"),
            gaussian(&[embed_dim, embed_dim], std, rng),
        );
        Ok(MultiHeadAttention {
            embed_dim,
            num_heads,
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            out_w,
        })
    }

    /// `x` is `(batch, tokens, embed)`; output has the same shape.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        ids: &[TensorId],
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.embed_dim {
            return Err(TensorError::Shape(format!(
                "multi-head attention expects (batch, tokens, {}), got {shape:?}",
                self.embed_dim
            )));
        }
        let (n, s) = (shape[0], shape[1]);
        let h = self.num_heads;
        let hd = self.embed_dim / h;

        let project = |g: &mut Graph<T>, w: usize, b: usize| -> Result<TensorId, TensorError> {
            let p = g.matmul(x, ids[w])?;
            let p = g.add(p, ids[b])?;
            // (n, s, h*hd) -> (n*h, s, hd) with heads as the batch axis.
            let p = g.reshape(p, &[n, s, h, hd])?;
            let p = g.transpose(p, &[0, 2, 1, 3])?;
            g.reshape(p, &[n * h, s, hd])
        };
        let q = project(g, self.q_w, self.q_b)?;
        let k = project(g, self.k_w, self.k_b)?;
        let v = project(g, self.v_w, self.v_b)?;

        let kt = g.transpose(k, &[0, 2, 1])?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.affine(scores, 1.0 / (hd as f64).sqrt(), 0.0)?;
        let weights = g.softmax(scaled, 2)?;
        let ctx = g.matmul(weights, v)?;

        let ctx = g.reshape(ctx, &[n, h, s, hd])?;
        let ctx = g.transpose(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n, s, self.embed_dim])?;
        g.matmul(ctx, ids[self.out_w])
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1_g: usize,
    ln1_b: usize,
    attn: MultiHeadAttention,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

/// Sequence-to-sequence block nested at the bottleneck.
///
/// Input `(N, C, a, b, c)` is flattened to `a·b·c` tokens of width `C`,
/// transformed, and reshaped back; with `residual` the block output is added
/// onto its input.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    embed_dim: usize,
    seq_len: usize,
    residual: bool,
    pos: Option<usize>,
    layers: Vec<EncoderLayer>,
    final_ln_g: usize,
    final_ln_b: usize,
    proj_w: usize,
    proj_b: usize,
}

impl TransformerBlock {
    /// `seq_len` must equal the product of the spatial dims the block will
    /// see; it sizes the learned positional table.
    pub fn new<T: Element>(
        prefix: &str,
        cfg: &TransformerConfig,
        seq_len: usize,
        residual: bool,
        bank: &mut ParamBank<T>,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self, NetError> {
        if cfg.num_layers == 0 {
            return Err(NetError::Config("transformer needs at least one layer".into()));
        }
        if seq_len == 0 {
            return Err(NetError::Config("transformer sequence length must be positive".into()));
        }
        let c = cfg.embed_dim;
        let hidden = (c as f64 * cfg.mlp_ratio).round() as usize;
        if hidden == 0 {
            return Err(NetError::Config(format!(
                "mlp_ratio {} collapses the feed-forward width to zero",
                cfg.mlp_ratio
            )));
        }
        let pos = match cfg.positional_encoding {
            PositionalEncoding::None => None,
            PositionalEncoding::Learned => Some(bank.add(
                format!("{prefix}.pos"),
                gaussian(&[seq_len, c], 0.02, rng),
            )),
        };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let lp = format!("{prefix}.layer{l}");
            let ln1_g = bank.add(format!("{lp}.ln1.gamma"), Tensor::full(&[c], T::one()));
            let ln1_b = bank.add(format!("{lp}.ln1.beta"), Tensor::zeros(&[c]));
            let attn =
                MultiHeadAttention::new(&format!("{lp}.attn"), c, cfg.num_heads, bank, rng)?;
            let ln2_g = bank.add(format!("{lp}.ln2.gamma"), Tensor::full(&[c], T::one()));
            let ln2_b = bank.add(format!("{lp}.ln2.beta"), Tensor::zeros(&[c]));
            let std1 = (2.0 / (c + hidden) as f64).sqrt();
            let fc1_w = bank.add(format!("{lp}.mlp.fc1.weight"), gaussian(&[c, hidden], std1, rng));
            let fc1_b = bank.add(format!("{lp}.mlp.fc1.bias"), Tensor::zeros(&[hidden]));
            let fc2_w = bank.add(format!("{lp}.mlp.fc2.weight"), gaussian(&[hidden, c], std1, rng));
            let fc2_b = bank.add(format!("{lp}.mlp.fc2.bias"), Tensor::zeros(&[c]));
            layers.push(EncoderLayer {
                ln1_g,
                ln1_b,
                attn,
                ln2_g,
                ln2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        let final_ln_g = bank.add(format!("{prefix}.final_ln.gamma"), Tensor::full(&[c], T::one()));
        let final_ln_b = bank.add(format!("{prefix}.final_ln.beta"), Tensor::zeros(&[c]));
        // Zero-initialized so the block starts as the identity (with the
        // residual) or the zero map (without it).
        let proj_w = bank.add(format!("{prefix}.proj.weight"), Tensor::zeros(&[c, c]));
        let proj_b = bank.add(format!("{prefix}.proj.bias"), Tensor::zeros(&[c]));
        Ok(TransformerBlock {
            embed_dim: c,
            seq_len,
            residual,
            pos,
            layers,
            final_ln_g,
            final_ln_b,
            proj_w,
            proj_b,
        })
    }

    /// `x` is `(N, C, a, b, c)` with `C == embed_dim` and `a·b·c == seq_len`.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        ids: &[TensorId],
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != self.embed_dim {
            return Err(TensorError::Shape(format!(
                "transformer block expects (N, {}, a, b, c), got {shape:?}",
                self.embed_dim
            )));
        }
        let n = shape[0];
        let s = shape[2] * shape[3] * shape[4];
        if self.pos.is_some() && s != self.seq_len {
            return Err(TensorError::Shape(format!(
                "positional table sized for {} tokens, input has {s}",
                self.seq_len
            )));
        }

        let t = g.reshape(x, &[n, self.embed_dim, s])?;
        let mut t = g.transpose(t, &[0, 2, 1])?;
        if let Some(pos) = self.pos {
            t = g.add(t, ids[pos])?;
        }
        for layer in &self.layers {
            let h = g.layer_norm(t, ids[layer.ln1_g], ids[layer.ln1_b], NORM_EPS)?;
            let a = layer.attn.forward(g, ids, h)?;
            t = g.add(t, a)?;

            let h = g.layer_norm(t, ids[layer.ln2_g], ids[layer.ln2_b], NORM_EPS)?;
            let m = g.matmul(h, ids[layer.fc1_w])?;
            let m = g.add(m, ids[layer.fc1_b])?;
            let m = g.gelu(m)?;
            let m = g.matmul(m, ids[layer.fc2_w])?;
            let m = g.add(m, ids[layer.fc2_b])?;
            t = g.add(t, m)?;
        }
        let t = g.layer_norm(t, ids[self.final_ln_g], ids[self.final_ln_b], NORM_EPS)?;
        let t = g.matmul(t, ids[self.proj_w])?;
        let t = g.add(t, ids[self.proj_b])?;

        let t = g.transpose(t, &[0, 2, 1])?;
        let out = g.reshape(t, &shape)?;
        if self.residual {
            g.add(x, out)
        } else {
            Ok(out)
        }
    }

    /// Parameter index of the final output projection weight, exposed so
    /// tests can perturb it.
    pub fn output_projection_index(&self) -> usize {
        self.proj_w
    }

    /// Parameter index of the final output projection bias.
    pub fn output_bias_index(&self) -> usize {
        self.proj_b
    }
}

pub(crate) fn gaussian<T: Element>(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{PositionalEncoding, TransformerConfig};
    use rand::SeedableRng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        gaussian(shape, 1.0, &mut rng)
    }

    #[test]
    fn single_token_attention_returns_v() {
        let q = rand_tensor(&[1, 6], 1);
        let k = rand_tensor(&[1, 6], 2);
        let v = rand_tensor(&[1, 6], 3);
        let out = attention(&q, &k, &v).unwrap();
        for (o, e) in out.data().iter().zip(v.data()) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_logits_average_the_values() {
        // q orthogonal to every key: all logits 0, softmax uniform.
        let q = Tensor::<f64>::new(&[3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let k = Tensor::<f64>::new(&[3, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, -1.0]).unwrap();
        let v = Tensor::<f64>::new(&[3, 2], vec![1.0, 10.0, 2.0, 20.0, 6.0, 30.0]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        for row in 0..3 {
            assert!((out.data()[row * 2] - 3.0).abs() < 1e-12);
            assert!((out.data()[row * 2 + 1] - 20.0).abs() < 1e-12);
        }
    }

    // Direct scalar-loop evaluation of softmax(q kT / sqrt(d)) v.
    fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
        let (s, d) = (q.shape()[0], q.shape()[1]);
        let mut out = vec![0.0; s * d];
        for i in 0..s {
            let mut logits = vec![0.0; s];
            for j in 0..s {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q.data()[i * d + c] * k.data()[j * d + c];
                }
                logits[j] = dot / (d as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..s {
                for c in 0..d {
                    out[i * d + c] += exps[j] / z * v.data()[j * d + c];
                }
            }
        }
        out
    }

    #[test]
    fn random_attention_matches_scalar_oracle() {
        let q = rand_tensor(&[4, 8], 10);
        let k = rand_tensor(&[4, 8], 11);
        let v = rand_tensor(&[4, 8], 12);
        let out = attention(&q, &k, &v).unwrap();
        let expect = attention_oracle(&q, &k, &v);
        for (o, e) in out.data().iter().zip(&expect) {
            assert!((o - e).abs() < 1e-6, "got {o}, oracle {e}");
        }
    }

    #[test]
    fn attention_weight_rows_sum_to_one() {
        let q = rand_tensor(&[2, 5, 4], 20);
        let k = rand_tensor(&[2, 5, 4], 21);
        let v = rand_tensor(&[2, 5, 4], 22);
        let (_, w) = attention_with_weights(&q, &k, &v).unwrap();
        assert_eq!(w.shape(), &[2, 5, 5]);
        for row in w.data().chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_mismatched_shapes() {
        let q = rand_tensor(&[4, 8], 1);
        let k = rand_tensor(&[3, 8], 2);
        assert!(attention(&q, &k, &k).is_err());
        let r1 = rand_tensor(&[4], 3);
        assert!(attention(&r1, &r1, &r1).is_err());
    }

    #[test]
    fn single_head_with_identity_projections_is_plain_attention() {
        let mut bank = ParamBank::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new("attn", 6, 1, &mut bank, &mut rng).unwrap();
        let eye = Tensor::from_fn(&[6, 6], |i| if i / 6 == i % 6 { 1.0 } else { 0.0 });
        for w in [mha.q_w, mha.k_w, mha.v_w, mha.out_w] {
            *bank.value_mut(w) = eye.clone();
        }
        for b in [mha.q_b, mha.k_b, mha.v_b] {
            *bank.value_mut(b) = Tensor::zeros(&[6]);
        }
        let x = rand_tensor(&[1, 5, 6], 30);
        let mut g = Graph::new();
        let ids = bank.insert_all(&mut g);
        let xi = g.constant(x.clone());
        let out = mha.forward(&mut g, &ids, xi).unwrap();

        let x2 = Tensor::new(&[5, 6], x.data().to_vec()).unwrap();
        let expect = attention(&x2, &x2, &x2).unwrap();
        for (o, e) in g.value(out).data().iter().zip(expect.data()) {
            assert!((o - e).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_output_projection_annihilates() {
        let mut bank = ParamBank::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new("attn", 8, 2, &mut bank, &mut rng).unwrap();
        *bank.value_mut(mha.out_w) = Tensor::zeros(&[8, 8]);
        let mut g = Graph::new();
        let ids = bank.insert_all(&mut g);
        let xi = g.constant(rand_tensor(&[2, 4, 8], 31));
        let out = mha.forward(&mut g, &ids, xi).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mha_output_shape_matches_input() {
        let mut bank = ParamBank::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mha = MultiHeadAttention::new("attn", 64, 8, &mut bank, &mut rng).unwrap();
        let mut g = Graph::new();
        let ids = bank.insert_all(&mut g);
        let xi = g.constant(rand_tensor(&[1, 64, 64], 32));
        let out = mha.forward(&mut g, &ids, xi).unwrap();
        assert_eq!(g.shape(out), &[1, 64, 64]);
    }

    #[test]
    fn indivisible_heads_are_a_config_error() {
        let mut bank = ParamBank::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        assert!(matches!(
            MultiHeadAttention::new("attn", 6, 4, &mut bank, &mut rng),
            Err(NetError::Config(_))
        ));
    }

    fn block_cfg(embed: usize, heads: usize, pos: PositionalEncoding) -> TransformerConfig {
        TransformerConfig {
            num_heads: heads,
            num_layers: 1,
            embed_dim: embed,
            mlp_ratio: 4.0,
            positional_encoding: pos,
        }
    }

    #[test]
    fn fresh_block_with_residual_is_the_identity() {
        let mut bank = ParamBank::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let cfg = block_cfg(32, 8, PositionalEncoding::Learned);
        let block = TransformerBlock::new("t", &cfg, 64, true, &mut bank, &mut rng).unwrap();
        let x = rand_tensor(&[1, 32, 4, 4, 4], 40);
        let mut g = Graph::new();
        let ids = bank.insert_all(&mut g);
        let xi = g.constant(x.clone());
        let out = block.forward(&mut g, &ids, xi).unwrap();
        assert_eq!(g.shape(out), &[1, 32, 4, 4, 4]);
        for (o, e) in g.value(out).data().iter().zip(x.data()) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_block_without_residual_returns_the_bias_path() {
        let mut bank = ParamBank::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let cfg = block_cfg(16, 4, PositionalEncoding::Learned);
        let block = TransformerBlock::new("t", &cfg, 8, false, &mut bank, &mut rng).unwrap();
        // Projection weights are zero from construction; give the bias a
        // recognizable per-channel value.
        let bias = Tensor::from_fn(&[16], |i| i as f64 * 0.5);
        *bank.value_mut(block.output_bias_index()) = bias.clone();
        let x = rand_tensor(&[1, 16, 2, 2, 2], 41);
        let mut g = Graph::new();
        let ids = bank.insert_all(&mut g);
        let xi = g.constant(x.clone());
        let out = block.forward(&mut g, &ids, xi).unwrap();
        let v = g.value(out);
        // Output = bias broadcast over space, independent of x.
        for c in 0..16 {
            for sp in 0..8 {
                let got = v.data()[c * 8 + sp];
                assert!((got - bias.data()[c]).abs() < 1e-12);
                assert_ne!(got, x.data()[c * 8 + sp]);
            }
        }
    }

    #[test]
    fn block_preserves_shape_and_token_count() {
        let mut bank = ParamBank::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let cfg = block_cfg(32, 8, PositionalEncoding::Learned);
        let block = TransformerBlock::new("t", &cfg, 64, true, &mut bank, &mut rng).unwrap();
        let mut g = Graph::new();
        let ids = bank.insert_all(&mut g);
        let xi = g.constant(rand_tensor(&[1, 32, 4, 4, 4], 42));
        let out = block.forward(&mut g, &ids, xi).unwrap();
        assert_eq!(g.shape(out), &[1, 32, 4, 4, 4]);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let mut bank = ParamBank::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let cfg = block_cfg(32, 8, PositionalEncoding::Learned);
        let block = TransformerBlock::new("t", &cfg, 8, true, &mut bank, &mut rng).unwrap();
        let mut g = Graph::new();
        let ids = bank.insert_all(&mut g);
        let xi = g.constant(rand_tensor(&[1, 16, 2, 2, 2], 43));
        assert!(block.forward(&mut g, &ids, xi).is_err());
    }

    #[test]
    fn without_positional_encoding_tokens_permute_equivariantly() {
        let mut bank = ParamBank::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let cfg = block_cfg(8, 2, PositionalEncoding::None);
        let block = TransformerBlock::new("t", &cfg, 8, true, &mut bank, &mut rng).unwrap();
        // Give the output projection real weights so the block is not the
        // identity.
        let mut wrng = ChaCha12Rng::seed_from_u64(11);
        *bank.value_mut(block.output_projection_index()) = gaussian(&[8, 8], 0.3, &mut wrng);

        let x = rand_tensor(&[1, 8, 2, 2, 2], 44);
        let run = |input: &Tensor<f64>| {
            let mut g = Graph::new();
            let ids = bank.insert_all(&mut g);
            let xi = g.constant(input.clone());
            let out = block.forward(&mut g, &ids, xi).unwrap();
            g.value(out).clone()
        };
        let base = run(&x);

        // Reverse token order (a permutation of the 8 spatial positions).
        let permuted = Tensor::from_fn(&[1, 8, 2, 2, 2], |i| {
            let (c, sp) = (i / 8, i % 8);
            x.data()[c * 8 + (7 - sp)]
        });
        let out_p = run(&permuted);
        for c in 0..8 {
            for sp in 0..8 {
                let got = out_p.data()[c * 8 + (7 - sp)];
                let want = base.data()[c * 8 + sp];
                assert!(
                    (got - want).abs() < 1e-6,
                    "channel {c} token {sp}: {got} vs {want}"
                );
            }
        }
    }
}
