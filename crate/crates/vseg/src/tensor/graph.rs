//! Arena-based reverse-mode autodiff graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::conv::{
    channel_sums_x, channel_sums_y, conv_forward, conv_input_adjoint, conv_weight_grad,
    ConvGeometry,
};
use super::{Element, Tensor, TensorError};

/// Handle to a node inside one [`Graph`]. Handles from different graphs are
/// not interchangeable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Saved per-group statistics of a normalization op, reused in backward.
#[derive(Clone, Debug)]
struct NormStats<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add {
        lhs: TensorId,
        rhs: TensorId,
    },
    Mul {
        lhs: TensorId,
        rhs: TensorId,
    },
    Div {
        lhs: TensorId,
        rhs: TensorId,
    },
    Affine {
        x: TensorId,
        mul: T,
    },
    Matmul {
        lhs: TensorId,
        rhs: TensorId,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LogSoftmax {
        x: TensorId,
        axis: usize,
    },
    LeakyRelu {
        x: TensorId,
        slope: T,
    },
    Gelu {
        x: TensorId,
    },
    /// `mask` is pre-scaled by 1/(1-p); an empty mask means identity.
    Dropout {
        x: TensorId,
        mask: Vec<T>,
    },
    Reshape {
        x: TensorId,
    },
    Permute {
        x: TensorId,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Select {
        x: TensorId,
        axis: usize,
        index: usize,
    },
    Sum {
        x: TensorId,
    },
    Mean {
        x: TensorId,
    },
    Conv3d {
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
        geom: ConvGeometry,
    },
    ConvTransposed3d {
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
        geom: ConvGeometry,
    },
    InstanceNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: NormStats<T>,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: NormStats<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Computation tape. Nodes are appended by the op methods; inputs always
/// precede their consumers, so one reverse sweep visits every node after all
/// of its uses.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Trainable leaf: participates in backward and keeps its gradient.
    pub fn parameter(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable leaf: inputs, targets, fixed masks.
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn check(&self, id: TensorId) -> Result<(), TensorError> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::Usage(format!(
                "tensor id {} does not exist in this graph",
                id.0
            )));
        }
        Ok(())
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Element-wise sum. The rhs shape must equal the lhs shape or a trailing
    /// suffix of it; a suffix is broadcast over the leading axes.
    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, TensorError> {
        self.check(lhs)?;
        self.check(rhs)?;
        let (ls, rs) = (self.shape(lhs).to_vec(), self.shape(rhs).to_vec());
        if rs.len() > ls.len() || ls[ls.len() - rs.len()..] != rs[..] {
            return Err(TensorError::Shape(format!(
                "add: rhs shape {rs:?} is not a suffix of lhs shape {ls:?}"
            )));
        }
        let a = self.nodes[lhs.0].value.data();
        let b = self.nodes[rhs.0].value.data();
        let chunk = b.len();
        let mut out = a.to_vec();
        for piece in out.chunks_mut(chunk) {
            for (o, bv) in piece.iter_mut().zip(b) {
                *o += *bv;
            }
        }
        let value = Tensor::new(&ls, out)?;
        let needs = self.needs(&[lhs, rhs]);
        Ok(self.push(value, needs, Op::Add { lhs, rhs }))
    }

    /// Element-wise product of same-shaped tensors.
    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, TensorError> {
        self.check(lhs)?;
        self.check(rhs)?;
        if self.shape(lhs) != self.shape(rhs) {
            return Err(TensorError::Shape(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let a = self.nodes[lhs.0].value.data();
        let b = self.nodes[rhs.0].value.data();
        let out: Vec<T> = a.iter().zip(b).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(&self.shape(lhs).to_vec(), out)?;
        let needs = self.needs(&[lhs, rhs]);
        Ok(self.push(value, needs, Op::Mul { lhs, rhs }))
    }

    /// Element-wise quotient of same-shaped tensors.
    pub fn div(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, TensorError> {
        self.check(lhs)?;
        self.check(rhs)?;
        if self.shape(lhs) != self.shape(rhs) {
            return Err(TensorError::Shape(format!(
                "div: shapes {:?} and {:?} differ",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let a = self.nodes[lhs.0].value.data();
        let b = self.nodes[rhs.0].value.data();
        let out: Vec<T> = a.iter().zip(b).map(|(x, y)| *x / *y).collect();
        let value = Tensor::new(&self.shape(lhs).to_vec(), out)?;
        let needs = self.needs(&[lhs, rhs]);
        Ok(self.push(value, needs, Op::Div { lhs, rhs }))
    }

    /// `x * mul + add`, element-wise with scalar coefficients.
    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> Result<TensorId, TensorError> {
        self.check(x)?;
        let (m, a) = (T::from_f64(mul), T::from_f64(add));
        let out: Vec<T> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| v * m + a)
            .collect();
        let value = Tensor::new(&self.shape(x).to_vec(), out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, needs, Op::Affine { x, mul: m }))
    }

    /// Scalar multiple of a tensor.
    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId, TensorError> {
        self.affine(x, factor, 0.0)
    }

    /// Matrix product. Accepts `(m,k)x(k,n)`, batched `(B,m,k)x(B,k,n)`, and
    /// `(B,m,k)x(k,n)` with the rhs shared across the batch.
    pub fn matmul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, TensorError> {
        self.check(lhs)?;
        self.check(rhs)?;
        let ls = self.shape(lhs).to_vec();
        let rs = self.shape(rhs).to_vec();
        let (batch, m, k, n, shared_rhs, out_shape) = match (ls.len(), rs.len()) {
            (2, 2) => {
                if ls[1] != rs[0] {
                    return Err(TensorError::Shape(format!(
                        "matmul: inner dims {} and {} differ",
                        ls[1], rs[0]
                    )));
                }
                (1, ls[0], ls[1], rs[1], true, vec![ls[0], rs[1]])
            }
            (3, 3) => {
                if ls[0] != rs[0] || ls[2] != rs[1] {
                    return Err(TensorError::Shape(format!(
                        "matmul: batched shapes {ls:?} and {rs:?} do not align"
                    )));
                }
                (ls[0], ls[1], ls[2], rs[2], false, vec![ls[0], ls[1], rs[2]])
            }
            (3, 2) => {
                if ls[2] != rs[0] {
                    return Err(TensorError::Shape(format!(
                        "matmul: inner dims {} and {} differ",
                        ls[2], rs[0]
                    )));
                }
                (ls[0], ls[1], ls[2], rs[1], true, vec![ls[0], ls[1], rs[1]])
            }
            _ => {
                return Err(TensorError::Shape(format!(
                    "matmul: unsupported ranks {} and {}",
                    ls.len(),
                    rs.len()
                )))
            }
        };
        let a = self.nodes[lhs.0].value.data();
        let b = self.nodes[rhs.0].value.data();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ab = &a[bi * m * k..(bi + 1) * m * k];
            let bb = if shared_rhs {
                &b[..k * n]
            } else {
                &b[bi * k * n..(bi + 1) * k * n]
            };
            gemm_nn(ab, bb, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let value = Tensor::new(&out_shape, out)?;
        let needs = self.needs(&[lhs, rhs]);
        Ok(self.push(value, needs, Op::Matmul { lhs, rhs }))
    }

    /// Softmax along one axis.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Usage(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut out = self.nodes[x.0].value.data().to_vec();
        for_each_lane(&shape, axis, |offset, stride, len| {
            let mut max = out[offset];
            for j in 1..len {
                let v = out[offset + j * stride];
                if v > max {
                    max = v;
                }
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (out[offset + j * stride] - max).exp();
                out[offset + j * stride] = e;
                total += e;
            }
            for j in 0..len {
                out[offset + j * stride] /= total;
            }
        });
        let value = Tensor::new(&shape, out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, needs, Op::Softmax { x, axis }))
    }

    /// Log-softmax along one axis, computed with the max-shift for stability.
    pub fn log_softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Usage(format!(
                "log_softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut out = self.nodes[x.0].value.data().to_vec();
        for_each_lane(&shape, axis, |offset, stride, len| {
            let mut max = out[offset];
            for j in 1..len {
                let v = out[offset + j * stride];
                if v > max {
                    max = v;
                }
            }
            let mut total = T::zero();
            for j in 0..len {
                total += (out[offset + j * stride] - max).exp();
            }
            let log_z = max + total.ln();
            for j in 0..len {
                out[offset + j * stride] -= log_z;
            }
        });
        let value = Tensor::new(&shape, out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, needs, Op::LogSoftmax { x, axis }))
    }

    /// max(x, 0) + slope * min(x, 0).
    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> Result<TensorId, TensorError> {
        self.check(x)?;
        let s = T::from_f64(slope);
        let out: Vec<T> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * s })
            .collect();
        let value = Tensor::new(&self.shape(x).to_vec(), out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, needs, Op::LeakyRelu { x, slope: s }))
    }

    /// GELU, tanh approximation:
    /// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.check(x)?;
        let out: Vec<T> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| gelu_forward(v))
            .collect();
        let value = Tensor::new(&self.shape(x).to_vec(), out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, needs, Op::Gelu { x }))
    }

    /// Inverted dropout: keeps each element with probability 1-p and scales
    /// survivors by 1/(1-p), so the expected value is unchanged. Identity
    /// when `training` is false or p = 0. The mask is drawn from a
    /// counter-based generator seeded with `seed`, so a (seed, shape) pair
    /// always produces the same mask.
    pub fn dropout(
        &mut self,
        x: TensorId,
        p: f64,
        training: bool,
        seed: u64,
    ) -> Result<TensorId, TensorError> {
        self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Parameter(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        if !training || p == 0.0 {
            let value = self.nodes[x.0].value.clone();
            return Ok(self.push(value, needs, Op::Dropout { x, mask: Vec::new() }));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.nodes[x.0].value.numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<T> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, needs, Op::Dropout { x, mask }))
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        self.check(x)?;
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.nodes[x.0].value.numel() {
            return Err(TensorError::Shape(format!(
                "reshape: {:?} does not hold {} elements",
                shape,
                self.nodes[x.0].value.numel()
            )));
        }
        let value = Tensor::new(shape, self.nodes[x.0].value.data().to_vec())?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, needs, Op::Reshape { x }))
    }

    /// Axis permutation (generalized transpose), materialized.
    pub fn transpose(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId, TensorError> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if !is_permutation(axes, shape.len()) {
            return Err(TensorError::Usage(format!(
                "transpose: {axes:?} is not a permutation of 0..{}",
                shape.len()
            )));
        }
        let (out_shape, out) = permute_raw(self.nodes[x.0].value.data(), &shape, axes);
        let value = Tensor::new(&out_shape, out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            value,
            needs,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Concatenation along one axis; all other extents must match.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Usage("concat: no inputs".into()));
        }
        for &id in inputs {
            self.check(id)?;
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Usage(format!(
                "concat: axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len() {
                return Err(TensorError::Shape("concat: ranks differ".into()));
            }
            for (a, (&da, &db)) in s.iter().zip(&first).enumerate() {
                if a != axis && da != db {
                    return Err(TensorError::Shape(format!(
                        "concat: extent {da} vs {db} on non-concat axis {a}"
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let node = &self.nodes[id.0].value;
                let rows = node.shape()[axis];
                let chunk = rows * inner;
                out.extend_from_slice(&node.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let needs = self.needs(inputs);
        Ok(self.push(
            value,
            needs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// One index along an axis; the axis disappears from the shape.
    pub fn select(
        &mut self,
        x: TensorId,
        axis: usize,
        index: usize,
    ) -> Result<TensorId, TensorError> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(TensorError::Usage(format!(
                "select: axis {axis} index {index} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let data = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * len + index) * inner;
            out.extend_from_slice(&data[base..base + inner]);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, needs, Op::Select { x, axis, index }))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.check(x)?;
        let mut total = T::zero();
        for v in self.nodes[x.0].value.data() {
            total += *v;
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(total), needs, Op::Sum { x }))
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.check(x)?;
        let n = self.nodes[x.0].value.numel();
        let mut total = T::zero();
        for v in self.nodes[x.0].value.data() {
            total += *v;
        }
        let value = Tensor::scalar(total / T::from_f64(n as f64));
        let needs = self.needs(&[x]);
        Ok(self.push(value, needs, Op::Mean { x }))
    }

    /// Strided 3D convolution. `x` is `(N, C, d1, d2, d3)`, `weight` is
    /// `(F, C, k1, k2, k3)`, `bias` is `(F)`.
    pub fn conv3d(
        &mut self,
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<TensorId, TensorError> {
        self.check(x)?;
        self.check(weight)?;
        self.check(bias)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 5 || ws.len() != 5 || bs.len() != 1 {
            return Err(TensorError::Shape(format!(
                "conv3d: expected ranks 5/5/1, got {}/{}/{}",
                xs.len(),
                ws.len(),
                bs.len()
            )));
        }
        if ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(TensorError::Shape(format!(
                "conv3d: channel mismatch, input {xs:?} weight {ws:?} bias {bs:?}"
            )));
        }
        let geom = ConvGeometry::forward(
            xs[0],
            xs[1],
            ws[0],
            [xs[2], xs[3], xs[4]],
            [ws[2], ws[3], ws[4]],
            stride,
            pad,
        )?;
        let out = conv_forward(
            self.nodes[x.0].value.data(),
            self.nodes[weight.0].value.data(),
            Some(self.nodes[bias.0].value.data()),
            &geom,
        );
        let out_shape = [
            geom.batch,
            geom.c_y,
            geom.y_dims[0],
            geom.y_dims[1],
            geom.y_dims[2],
        ];
        let value = Tensor::new(&out_shape, out)?;
        let needs = self.needs(&[x, weight, bias]);
        Ok(self.push(
            value,
            needs,
            Op::Conv3d {
                x,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Transposed 3D convolution, the exact adjoint of [`Graph::conv3d`]
    /// with the same weight, stride, and padding. `x` is `(N, F, d1, d2, d3)`,
    /// `weight` is `(F, C, k1, k2, k3)` (input channels first), `bias` is `(C)`.
    pub fn conv3d_transposed(
        &mut self,
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<TensorId, TensorError> {
        self.check(x)?;
        self.check(weight)?;
        self.check(bias)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 5 || ws.len() != 5 || bs.len() != 1 {
            return Err(TensorError::Shape(format!(
                "conv3d_transposed: expected ranks 5/5/1, got {}/{}/{}",
                xs.len(),
                ws.len(),
                bs.len()
            )));
        }
        if ws[0] != xs[1] || bs[0] != ws[1] {
            return Err(TensorError::Shape(format!(
                "conv3d_transposed: channel mismatch, input {xs:?} weight {ws:?} bias {bs:?}"
            )));
        }
        let geom = ConvGeometry::transposed(
            xs[0],
            xs[1],
            ws[1],
            [xs[2], xs[3], xs[4]],
            [ws[2], ws[3], ws[4]],
            stride,
            pad,
        )?;
        let out = conv_input_adjoint(
            self.nodes[x.0].value.data(),
            self.nodes[weight.0].value.data(),
            Some(self.nodes[bias.0].value.data()),
            &geom,
        );
        let out_shape = [
            geom.batch,
            geom.c_x,
            geom.x_dims[0],
            geom.x_dims[1],
            geom.x_dims[2],
        ];
        let value = Tensor::new(&out_shape, out)?;
        let needs = self.needs(&[x, weight, bias]);
        Ok(self.push(
            value,
            needs,
            Op::ConvTransposed3d {
                x,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Instance normalization: zero mean / unit variance per (sample,
    /// channel) over the spatial axes, then a per-channel affine.
    /// `x` is `(N, C, spatial...)` with at least two spatial elements.
    pub fn instance_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        if eps <= 0.0 {
            return Err(TensorError::Parameter(format!(
                "instance_norm: eps must be positive, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(TensorError::Shape(format!(
                "instance_norm: need (N, C, spatial...), got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if spatial < 2 {
            return Err(TensorError::Shape(
                "instance_norm: spatial size must be at least 2".into(),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::Shape(format!(
                "instance_norm: gamma/beta must have shape [{c}]"
            )));
        }
        let eps_t = T::from_f64(eps);
        let groups = n * c;
        let mut mean = vec![T::zero(); groups];
        let mut inv_std = vec![T::zero(); groups];
        let data = self.nodes[x.0].value.data();
        let gamma_v = self.nodes[gamma.0].value.data();
        let beta_v = self.nodes[beta.0].value.data();
        let mut out = vec![T::zero(); data.len()];
        let count = T::from_f64(spatial as f64);
        for g in 0..groups {
            let base = g * spatial;
            let xs = &data[base..base + spatial];
            let mut mu = T::zero();
            for v in xs {
                mu += *v;
            }
            mu /= count;
            let mut var = T::zero();
            for v in xs {
                let d = *v - mu;
                var += d * d;
            }
            var /= count;
            let inv = (var + eps_t).sqrt().recip();
            mean[g] = mu;
            inv_std[g] = inv;
            let (gm, bt) = (gamma_v[g % c], beta_v[g % c]);
            for (o, v) in out[base..base + spatial].iter_mut().zip(xs) {
                *o = (*v - mu) * inv * gm + bt;
            }
        }
        let value = Tensor::new(&shape, out)?;
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            needs,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats: NormStats { mean, inv_std },
            },
        ))
    }

    /// Layer normalization over the last axis with per-feature affine.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        if eps <= 0.0 {
            return Err(TensorError::Parameter(format!(
                "layer_norm: eps must be positive, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::Shape("layer_norm: scalar input".into()));
        }
        let feat = *shape.last().unwrap();
        if self.shape(gamma) != [feat] || self.shape(beta) != [feat] {
            return Err(TensorError::Shape(format!(
                "layer_norm: gamma/beta must have shape [{feat}]"
            )));
        }
        let eps_t = T::from_f64(eps);
        let groups = self.nodes[x.0].value.numel() / feat;
        let mut mean = vec![T::zero(); groups];
        let mut inv_std = vec![T::zero(); groups];
        let data = self.nodes[x.0].value.data();
        let gamma_v = self.nodes[gamma.0].value.data();
        let beta_v = self.nodes[beta.0].value.data();
        let mut out = vec![T::zero(); data.len()];
        let count = T::from_f64(feat as f64);
        for g in 0..groups {
            let base = g * feat;
            let xs = &data[base..base + feat];
            let mut mu = T::zero();
            for v in xs {
                mu += *v;
            }
            mu /= count;
            let mut var = T::zero();
            for v in xs {
                let d = *v - mu;
                var += d * d;
            }
            var /= count;
            let inv = (var + eps_t).sqrt().recip();
            mean[g] = mu;
            inv_std[g] = inv;
            for j in 0..feat {
                out[base + j] = (xs[j] - mu) * inv * gamma_v[j] + beta_v[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats: NormStats { mean, inv_std },
            },
        ))
    }

    /// Reverse sweep from a scalar root. Fills `grad` for every node that
    /// transitively feeds the root and requires gradients; leaves keep their
    /// gradient for the optimizer to read.
    pub fn backward(&mut self, root: TensorId) -> Result<(), TensorError> {
        self.check(root)?;
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward: root must be scalar, shape is {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].needs_grad {
            return Err(TensorError::Usage(
                "backward: root does not depend on any trainable parameter".into(),
            ));
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            if self.nodes[id].grad.is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let dy = self.nodes[id].grad.take().unwrap();
            let contributions = self.backprop(id, &dy);
            self.nodes[id].grad = Some(dy);
            for (target, contrib) in contributions {
                self.accumulate(target, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: Vec<T>) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(contrib.len(), node.value.numel());
        match &mut node.grad {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(contrib) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    /// Gradient contributions of one node to its inputs.
    fn backprop(&self, id: usize, dy: &[T]) -> Vec<(TensorId, Vec<T>)> {
        let node = &self.nodes[id];
        let val = |t: TensorId| self.nodes[t.0].value.data();
        let shp = |t: TensorId| self.nodes[t.0].value.shape();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add { lhs, rhs } => {
                let chunk = self.nodes[rhs.0].value.numel();
                let mut drhs = vec![T::zero(); chunk];
                for piece in dy.chunks(chunk) {
                    for (d, v) in drhs.iter_mut().zip(piece) {
                        *d += *v;
                    }
                }
                vec![(*lhs, dy.to_vec()), (*rhs, drhs)]
            }
            Op::Mul { lhs, rhs } => {
                let a = val(*lhs);
                let b = val(*rhs);
                let da: Vec<T> = dy.iter().zip(b).map(|(d, v)| *d * *v).collect();
                let db: Vec<T> = dy.iter().zip(a).map(|(d, v)| *d * *v).collect();
                vec![(*lhs, da), (*rhs, db)]
            }
            Op::Div { lhs, rhs } => {
                let b = val(*rhs);
                let z = node.value.data();
                let da: Vec<T> = dy.iter().zip(b).map(|(d, v)| *d / *v).collect();
                let db: Vec<T> = dy
                    .iter()
                    .zip(z.iter().zip(b))
                    .map(|(d, (zv, bv))| -(*d) * *zv / *bv)
                    .collect();
                vec![(*lhs, da), (*rhs, db)]
            }
            Op::Affine { x, mul } => {
                let m = *mul;
                vec![(*x, dy.iter().map(|d| *d * m).collect())]
            }
            Op::Matmul { lhs, rhs } => {
                let ls = shp(*lhs).to_vec();
                let rs = shp(*rhs).to_vec();
                let (batch, m, k, n, shared_rhs) = match (ls.len(), rs.len()) {
                    (2, 2) => (1, ls[0], ls[1], rs[1], true),
                    (3, 3) => (ls[0], ls[1], ls[2], rs[2], false),
                    (3, 2) => (ls[0], ls[1], ls[2], rs[1], true),
                    _ => unreachable!("validated at construction"),
                };
                let a = val(*lhs);
                let b = val(*rhs);
                let mut da = vec![T::zero(); a.len()];
                let mut db = vec![T::zero(); b.len()];
                for bi in 0..batch {
                    let dyb = &dy[bi * m * n..(bi + 1) * m * n];
                    let ab = &a[bi * m * k..(bi + 1) * m * k];
                    let bb = if shared_rhs {
                        &b[..k * n]
                    } else {
                        &b[bi * k * n..(bi + 1) * k * n]
                    };
                    gemm_nt(dyb, bb, m, n, k, &mut da[bi * m * k..(bi + 1) * m * k]);
                    let dbb = if shared_rhs {
                        &mut db[..k * n]
                    } else {
                        &mut db[bi * k * n..(bi + 1) * k * n]
                    };
                    gemm_tn(ab, dyb, m, k, n, dbb);
                }
                vec![(*lhs, da), (*rhs, db)]
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape().to_vec();
                let mut dx = vec![T::zero(); y.len()];
                for_each_lane(&shape, *axis, |offset, stride, len| {
                    let mut dot = T::zero();
                    for j in 0..len {
                        let idx = offset + j * stride;
                        dot += dy[idx] * y[idx];
                    }
                    for j in 0..len {
                        let idx = offset + j * stride;
                        dx[idx] = y[idx] * (dy[idx] - dot);
                    }
                });
                vec![(*x, dx)]
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape().to_vec();
                let mut dx = vec![T::zero(); y.len()];
                for_each_lane(&shape, *axis, |offset, stride, len| {
                    let mut total = T::zero();
                    for j in 0..len {
                        total += dy[offset + j * stride];
                    }
                    for j in 0..len {
                        let idx = offset + j * stride;
                        dx[idx] = dy[idx] - y[idx].exp() * total;
                    }
                });
                vec![(*x, dx)]
            }
            Op::LeakyRelu { x, slope } => {
                let xs = val(*x);
                let s = *slope;
                let dx: Vec<T> = dy
                    .iter()
                    .zip(xs)
                    .map(|(d, v)| if *v > T::zero() { *d } else { *d * s })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Gelu { x } => {
                let xs = val(*x);
                let dx: Vec<T> = dy
                    .iter()
                    .zip(xs)
                    .map(|(d, v)| *d * gelu_derivative(*v))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Dropout { x, mask } => {
                if mask.is_empty() {
                    vec![(*x, dy.to_vec())]
                } else {
                    let dx: Vec<T> = dy.iter().zip(mask).map(|(d, m)| *d * *m).collect();
                    vec![(*x, dx)]
                }
            }
            Op::Reshape { x } => vec![(*x, dy.to_vec())],
            Op::Permute { x, axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, dx) = permute_raw(dy, node.value.shape(), &inverse);
                vec![(*x, dx)]
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let mut grads: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|id| Vec::with_capacity(self.nodes[id.0].value.numel()))
                    .collect();
                let mut cursor = 0usize;
                for _ in 0..outer {
                    for (gi, id) in inputs.iter().enumerate() {
                        let rows = self.nodes[id.0].value.shape()[*axis];
                        let chunk = rows * inner;
                        grads[gi].extend_from_slice(&dy[cursor..cursor + chunk]);
                        cursor += chunk;
                    }
                }
                inputs.iter().copied().zip(grads).collect()
            }
            Op::Select { x, axis, index } => {
                let in_shape = shp(*x).to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let len = in_shape[*axis];
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for o in 0..outer {
                    let base = (o * len + *index) * inner;
                    dx[base..base + inner].copy_from_slice(&dy[o * inner..(o + 1) * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].value.numel();
                vec![(*x, vec![dy[0]; n])]
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.numel();
                let d = dy[0] / T::from_f64(n as f64);
                vec![(*x, vec![d; n])]
            }
            Op::Conv3d {
                x,
                weight,
                bias,
                geom,
            } => {
                let dx = conv_input_adjoint(dy, val(*weight), None, geom);
                let dw = conv_weight_grad(val(*x), dy, geom);
                let db = channel_sums_y(dy, geom);
                vec![(*x, dx), (*weight, dw), (*bias, db)]
            }
            Op::ConvTransposed3d {
                x,
                weight,
                bias,
                geom,
            } => {
                // Node input lives on the y side, node output on the x side.
                let dx = conv_forward(dy, val(*weight), None, geom);
                let dw = conv_weight_grad(dy, val(*x), geom);
                let db = channel_sums_x(dy, geom);
                vec![(*x, dx), (*weight, dw), (*bias, db)]
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let shape = shp(*x).to_vec();
                let c = shape[1];
                let spatial: usize = shape[2..].iter().product();
                let xs = val(*x);
                let gamma_v = val(*gamma);
                let groups = stats.mean.len();
                let mut dx = vec![T::zero(); xs.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let count = T::from_f64(spatial as f64);
                for g in 0..groups {
                    let base = g * spatial;
                    let (mu, inv) = (stats.mean[g], stats.inv_std[g]);
                    let gm = gamma_v[g % c];
                    let mut sum_h = T::zero();
                    let mut sum_hx = T::zero();
                    let mut sum_dy = T::zero();
                    let mut sum_dyx = T::zero();
                    for j in 0..spatial {
                        let xh = (xs[base + j] - mu) * inv;
                        let d = dy[base + j];
                        let h = d * gm;
                        sum_h += h;
                        sum_hx += h * xh;
                        sum_dy += d;
                        sum_dyx += d * xh;
                    }
                    dgamma[g % c] += sum_dyx;
                    dbeta[g % c] += sum_dy;
                    let mean_h = sum_h / count;
                    let mean_hx = sum_hx / count;
                    for j in 0..spatial {
                        let xh = (xs[base + j] - mu) * inv;
                        let h = dy[base + j] * gm;
                        dx[base + j] = inv * (h - mean_h - xh * mean_hx);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let shape = shp(*x).to_vec();
                let feat = *shape.last().unwrap();
                let xs = val(*x);
                let gamma_v = val(*gamma);
                let groups = stats.mean.len();
                let mut dx = vec![T::zero(); xs.len()];
                let mut dgamma = vec![T::zero(); feat];
                let mut dbeta = vec![T::zero(); feat];
                let count = T::from_f64(feat as f64);
                for g in 0..groups {
                    let base = g * feat;
                    let (mu, inv) = (stats.mean[g], stats.inv_std[g]);
                    let mut sum_h = T::zero();
                    let mut sum_hx = T::zero();
                    for j in 0..feat {
                        let xh = (xs[base + j] - mu) * inv;
                        let d = dy[base + j];
                        dgamma[j] += d * xh;
                        dbeta[j] += d;
                        let h = d * gamma_v[j];
                        sum_h += h;
                        sum_hx += h * xh;
                    }
                    let mean_h = sum_h / count;
                    let mean_hx = sum_hx / count;
                    for j in 0..feat {
                        let xh = (xs[base + j] - mu) * inv;
                        let h = dy[base + j] * gamma_v[j];
                        dx[base + j] = inv * (h - mean_h - xh * mean_hx);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
        }
    }
}

/// out += a(m,k) * b(k,n), all row-major.
fn gemm_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
}

/// out(m,k) += a(m,n) * b(k,n)^T.
fn gemm_nt<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            out[i * k + kk] += acc;
        }
    }
}

/// out(k,n) += a(m,k)^T * b(m,n).
fn gemm_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
}

/// Calls `f(offset, stride, len)` for every 1D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

fn is_permutation(axes: &[usize], rank: usize) -> bool {
    if axes.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

/// Materialized axis permutation of a row-major buffer.
fn permute_raw<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Stride of output axis j in the input buffer.
    let gather_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    loop {
        out.push(data[src]);
        // Odometer increment over the output multi-index.
        let mut axis = rank;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            src += gather_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src -= gather_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

fn gelu_forward<T: Element>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_derivative<T: Element>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rnd(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn add_broadcasts_suffix() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::new(&[3], vec![10., 20., 30.]).unwrap());
        let b_bad = g.constant(Tensor::new(&[2], vec![0., 0.]).unwrap());
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11., 22., 33., 14., 25., 36.]);
        assert!(g.add(a, b_bad).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = rnd(&mut rng, &[4, 5]);
        let b = rnd(&mut rng, &[5, 3]);
        let mut expect = vec![0.0f64; 12];
        for i in 0..4 {
            for j in 0..3 {
                for kk in 0..5 {
                    expect[i * 3 + j] += a.data()[i * 5 + kk] * b.data()[kk * 3 + j];
                }
            }
        }
        let mut g = Graph::new();
        let ai = g.constant(a);
        let bi = g.constant(b);
        let y = g.matmul(ai, bi).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let a = rnd(&mut rng, &[2, 3, 4]);
        let b = rnd(&mut rng, &[4, 5]);
        let mut g = Graph::new();
        let ai = g.constant(a.clone());
        let bi = g.constant(b.clone());
        let y = g.matmul(ai, bi).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 5]);
        // Batch 1, row 2, col 1 by hand.
        let mut want = 0.0;
        for kk in 0..4 {
            want += a.data()[(1 * 3 + 2) * 4 + kk] * b.data()[kk * 5 + 1];
        }
        let got = g.value(y).data()[(1 * 3 + 2) * 5 + 1];
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2, 3], vec![1., 2., 3., -1., 0., 1.]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + d[1] + d[2] - 1.0).abs() < 1e-12);
        assert!((d[3] + d[4] + d[5] - 1.0).abs() < 1e-12);
        // Shifting a lane by a constant leaves softmax unchanged.
        let xs = g.constant(Tensor::new(&[2, 3], vec![101., 102., 103., 99., 100., 101.]).unwrap());
        let ys = g.softmax(xs, 1).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_agrees_with_softmax_log() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 4], vec![0.3, -1.2, 2.0, 0.0]).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let ls = g.log_softmax(x, 1).unwrap();
        for (a, b) in g.value(s).data().iter().zip(g.value(ls).data()) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let t = rnd(&mut rng, &[2, 3, 4]);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let p = g.transpose(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.transpose(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), t.data());
    }

    #[test]
    fn concat_then_select_recovers_parts() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::new(&[2, 2, 2], vec![5., 6., 7., 8., 9., 10., 11., 12.]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(
            g.value(c).data(),
            &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]
        );
        let s = g.select(c, 1, 0).unwrap();
        assert_eq!(g.value(s).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn instance_norm_constant_input_returns_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 2, 2, 2], 3.25));
        let gamma = g.parameter(Tensor::full(&[2], 1.0));
        let beta = g.parameter(Tensor::full(&[2], 5.0));
        let y = g.instance_norm(x, gamma, beta, 1e-5).unwrap();
        for v in g.value(y).data() {
            assert!((v - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let t = rnd(&mut rng, &[2, 3, 4, 4, 4]);
        let mut g = Graph::new();
        let x = g.constant(t);
        let gamma = g.parameter(Tensor::full(&[3], 1.0));
        let beta = g.parameter(Tensor::full(&[3], 0.0));
        let y = g.instance_norm(x, gamma, beta, 1e-12).unwrap();
        let d = g.value(y).data();
        let spatial = 64;
        for group in 0..6 {
            let xs = &d[group * spatial..(group + 1) * spatial];
            let mean: f64 = xs.iter().sum::<f64>() / spatial as f64;
            let var: f64 = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / spatial as f64;
            assert!(mean.abs() < 1e-9, "group {group} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "group {group} var {var}");
        }
    }

    #[test]
    fn dropout_identity_in_eval_and_expectation_in_train() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[10_000], 1.0));
        let eval = g.dropout(x, 0.4, false, 1).unwrap();
        assert_eq!(g.value(eval).data(), g.value(x).data());
        let train = g.dropout(x, 0.4, true, 1).unwrap();
        let mean: f64 = g.value(train).data().iter().sum::<f64>() / 10_000.0;
        // Survivors are scaled by 1/(1-p); the mean stays near 1.
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        let zeros = g.value(train).data().iter().filter(|v| **v == 0.0).count();
        assert!((zeros as f64 / 10_000.0 - 0.4).abs() < 0.03);
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[512], 2.0));
        let a = g.dropout(x, 0.3, true, 42).unwrap();
        let b = g.dropout(x, 0.3, true, 42).unwrap();
        let c = g.dropout(x, 0.3, true, 43).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
        assert_ne!(g.value(a).data(), g.value(c).data());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.parameter(Tensor::full(&[3], 1.0));
        let y = g.affine(x, 2.0, 0.0).unwrap();
        assert!(g.backward(y).is_err());
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.parameter(Tensor::full(&[2], 1.5));
        let c = g.constant(Tensor::full(&[2], 2.0));
        let y = g.mul(p, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[2.0, 2.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        // y = x*x summed: dy/dx = 2x via the two mul branches.
        let mut g = Graph::<f64>::new();
        let x = g.parameter(Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, -4.0]);
    }

    /// Central-difference check of d(sum of f(x)) / dx for a graph builder.
    fn finite_diff_check(
        shape: &[usize],
        seed: u64,
        build: impl Fn(&mut Graph<f64>, TensorId) -> TensorId,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let base = rnd(&mut rng, shape);
        let loss = |t: &Tensor<f64>| -> f64 {
            let mut g = Graph::new();
            let x = g.parameter(t.clone());
            let y = build(&mut g, x);
            let s = g.sum(y).unwrap();
            g.value(s).item().unwrap()
        };
        let mut g = Graph::new();
        let x = g.parameter(base.clone());
        let y = build(&mut g, x);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();
        let h = 1e-6;
        for i in (0..base.numel()).step_by(base.numel().div_ceil(7).max(1)) {
            let mut up = base.clone();
            up.data_mut()[i] += h;
            let mut down = base.clone();
            down.data_mut()[i] -= h;
            let fd = (loss(&up) - loss(&down)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-5,
                "index {i}: analytic {} fd {}",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn elementwise_backward_matches_finite_differences() {
        finite_diff_check(&[4, 5], 10, |g, x| {
            let a = g.leaky_relu(x, 0.01).unwrap();
            let b = g.gelu(a).unwrap();
            g.affine(b, 1.5, 0.25).unwrap()
        });
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        finite_diff_check(&[3, 4], 11, |g, x| {
            let s = g.softmax(x, 1).unwrap();
            // Weighted so the pullback is not uniform.
            let w = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.37 - 1.0));
            g.mul(s, w).unwrap()
        });
    }

    #[test]
    fn log_softmax_backward_matches_finite_differences() {
        finite_diff_check(&[2, 5], 12, |g, x| {
            let s = g.log_softmax(x, 1).unwrap();
            let w = g.constant(Tensor::from_fn(&[2, 5], |i| (i as f64).sin()));
            g.mul(s, w).unwrap()
        });
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        finite_diff_check(&[3, 4], 13, |g, x| {
            let w = g.constant(Tensor::from_fn(&[4, 2], |i| 0.1 * i as f64 - 0.3));
            g.matmul(x, w).unwrap()
        });
        finite_diff_check(&[2, 3, 4], 14, |g, x| {
            let w = g.constant(Tensor::from_fn(&[4, 3], |i| 0.2 * (i as f64).cos()));
            g.matmul(x, w).unwrap()
        });
    }

    #[test]
    fn div_backward_matches_finite_differences() {
        finite_diff_check(&[6], 15, |g, x| {
            let shifted = g.affine(x, 1.0, 3.0).unwrap(); // keep denominators away from zero
            let num = g.constant(Tensor::from_fn(&[6], |i| i as f64 + 1.0));
            g.div(num, shifted).unwrap()
        });
    }

    #[test]
    fn norm_backward_matches_finite_differences() {
        finite_diff_check(&[2, 2, 3, 2, 2], 16, |g, x| {
            let gamma = g.constant(Tensor::from_fn(&[2], |i| 0.5 + i as f64));
            let beta = g.constant(Tensor::from_fn(&[2], |i| 0.1 * i as f64));
            let y = g.instance_norm(x, gamma, beta, 1e-5).unwrap();
            let w = g.constant(Tensor::from_fn(&[2, 2, 3, 2, 2], |i| (i as f64 * 0.11).sin()));
            g.mul(y, w).unwrap()
        });
        finite_diff_check(&[3, 5], 17, |g, x| {
            let gamma = g.constant(Tensor::from_fn(&[5], |i| 1.0 + 0.2 * i as f64));
            let beta = g.constant(Tensor::from_fn(&[5], |i| -0.3 + 0.1 * i as f64));
            let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
            let w = g.constant(Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.23).cos()));
            g.mul(y, w).unwrap()
        });
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        finite_diff_check(&[1, 2, 4, 4, 4], 18, |g, x| {
            let w = g.constant(Tensor::from_fn(&[3, 2, 3, 3, 3], |i| {
                0.05 * ((i * 7 % 13) as f64 - 6.0)
            }));
            let b = g.constant(Tensor::from_fn(&[3], |i| 0.1 * i as f64));
            g.conv3d(x, w, b, [2, 2, 2], [1, 1, 1]).unwrap()
        });
    }

    #[test]
    fn conv_weight_backward_matches_finite_differences() {
        finite_diff_check(&[2, 2, 2, 2, 2], 19, |g, w| {
            let w5 = g.reshape(w, &[2, 2, 2, 2, 2]).unwrap();
            let x = g.constant(Tensor::from_fn(&[1, 2, 4, 4, 4], |i| {
                ((i * 3 % 17) as f64 - 8.0) * 0.1
            }));
            let b = g.constant(Tensor::full(&[2], 0.0));
            g.conv3d(x, w5, b, [1, 1, 1], [0, 0, 0]).unwrap()
        });
    }

    #[test]
    fn transposed_conv_backward_matches_finite_differences() {
        finite_diff_check(&[1, 3, 3, 3, 3], 20, |g, x| {
            let w = g.constant(Tensor::from_fn(&[3, 2, 2, 2, 2], |i| {
                0.07 * ((i * 5 % 11) as f64 - 5.0)
            }));
            let b = g.constant(Tensor::from_fn(&[2], |i| 0.2 * i as f64));
            let y = g.conv3d_transposed(x, w, b, [2, 2, 2], [0, 0, 0]).unwrap();
            let y_shape = g.shape(y).to_vec();
            let scale = g.constant(Tensor::from_fn(&y_shape, |i| (i as f64 * 0.19).sin()));
            g.mul(y, scale).unwrap()
        });
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> with shared weights.
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let x = rnd(&mut rng, &[1, 2, 5, 5, 5]);
        let w = rnd(&mut rng, &[3, 2, 3, 3, 3]);
        let zero_b3 = Tensor::full(&[3], 0.0);
        let zero_b2 = Tensor::full(&[2], 0.0);

        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let wi = g.constant(w.clone());
        let bi = g.constant(zero_b3);
        let fwd = g.conv3d(xi, wi, bi, [2, 2, 2], [1, 1, 1]).unwrap();
        let y = rnd(&mut rng, g.shape(fwd));
        let yi = g.constant(y.clone());
        let b2 = g.constant(zero_b2);
        let adj = g.conv3d_transposed(yi, wi, b2, [2, 2, 2], [1, 1, 1]).unwrap();
        assert_eq!(g.shape(adj), x.shape());
        let lhs: f64 = g
            .value(fwd)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = g
            .value(adj)
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn gelu_matches_reference_values() {
        // Reference values of the tanh-approximated GELU.
        let cases = [
            (0.0f64, 0.0f64),
            (1.0, 0.8411919906082768),
            (-1.0, -0.15880800939172324),
            (2.0, 1.954597694087775),
        ];
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[4], cases.iter().map(|c| c.0).collect()).unwrap());
        let y = g.gelu(x).unwrap();
        for (got, (_, want)) in g.value(y).data().iter().zip(&cases) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}
