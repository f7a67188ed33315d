//! Direct 3D convolution kernels.
//!
//! One geometry describes both convolution directions. `x` names the dense
//! side (input of a strided convolution, output of a transposed one) and `y`
//! the strided side. Three loop kernels cover every need:
//!
//! * [`conv_forward`]: x -> y, the strided cross-correlation.
//! * [`conv_input_adjoint`]: y -> x, the exact linear adjoint. This is also
//!   the forward pass of a transposed convolution.
//! * [`conv_weight_grad`]: accumulates d(loss)/d(weight) from the pair of
//!   x-side and y-side arrays.
//!
//! Weights are laid out `(c_y, c_x, k1, k2, k3)`: for a plain convolution
//! that is `(out_channels, in_channels, ...)`, for a transposed one
//! `(in_channels, out_channels, ...)`.

use super::{Element, TensorError};

/// Shape bookkeeping for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    /// Channels on the dense (x) side.
    pub c_x: usize,
    /// Channels on the strided (y) side.
    pub c_y: usize,
    pub x_dims: [usize; 3],
    pub y_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    /// Geometry for a strided convolution with known input spatial dims.
    ///
    /// Output extents follow `floor((x + 2*pad - k) / stride) + 1` and must
    /// come out positive.
    pub fn forward(
        batch: usize,
        c_x: usize,
        c_y: usize,
        x_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self, TensorError> {
        let mut y_dims = [0usize; 3];
        for a in 0..3 {
            if kernel[a] == 0 || stride[a] == 0 {
                return Err(TensorError::Parameter(format!(
                    "kernel and stride must be positive, got kernel={kernel:?} stride={stride:?}"
                )));
            }
            let padded = x_dims[a] + 2 * pad[a];
            if padded < kernel[a] {
                return Err(TensorError::Shape(format!(
                    "kernel {} exceeds padded extent {} on axis {}",
                    kernel[a], padded, a
                )));
            }
            y_dims[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(ConvGeometry {
            batch,
            c_x,
            c_y,
            x_dims,
            y_dims,
            kernel,
            stride,
            pad,
        })
    }

    /// Geometry for a transposed convolution with known input spatial dims.
    ///
    /// The input lives on the y side; the produced extents follow
    /// `(y - 1) * stride - 2*pad + k` and must come out positive.
    pub fn transposed(
        batch: usize,
        c_y: usize,
        c_x: usize,
        y_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self, TensorError> {
        let mut x_dims = [0usize; 3];
        for a in 0..3 {
            if kernel[a] == 0 || stride[a] == 0 {
                return Err(TensorError::Parameter(format!(
                    "kernel and stride must be positive, got kernel={kernel:?} stride={stride:?}"
                )));
            }
            let grown = (y_dims[a] - 1) * stride[a] + kernel[a];
            if grown <= 2 * pad[a] {
                return Err(TensorError::Shape(format!(
                    "padding {} swallows the whole output extent on axis {}",
                    pad[a], a
                )));
            }
            x_dims[a] = grown - 2 * pad[a];
        }
        Ok(ConvGeometry {
            batch,
            c_x,
            c_y,
            x_dims,
            y_dims,
            kernel,
            stride,
            pad,
        })
    }

    pub fn x_spatial(&self) -> usize {
        self.x_dims.iter().product()
    }

    pub fn y_spatial(&self) -> usize {
        self.y_dims.iter().product()
    }

    pub fn x_len(&self) -> usize {
        self.batch * self.c_x * self.x_spatial()
    }

    pub fn y_len(&self) -> usize {
        self.batch * self.c_y * self.y_spatial()
    }

    pub fn weight_len(&self) -> usize {
        self.c_y * self.c_x * self.kernel.iter().product::<usize>()
    }

    /// Valid y range `[lo, hi)` on one axis for a fixed kernel offset: every
    /// o in the range maps to an in-bounds x index `o*stride + k_off - pad`.
    fn axis_range(&self, axis: usize, k_off: usize) -> (usize, usize) {
        let (x, y, s, p) = (
            self.x_dims[axis] as isize,
            self.y_dims[axis] as isize,
            self.stride[axis] as isize,
            self.pad[axis] as isize,
        );
        let k = k_off as isize;
        let lo = if k >= p { 0 } else { (p - k + s - 1) / s };
        let hi_num = x - 1 + p - k;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(y);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

/// Strided cross-correlation, x side to y side.
pub fn conv_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    debug_assert_eq!(x.len(), g.x_len());
    debug_assert_eq!(w.len(), g.weight_len());
    let [k1, k2, k3] = g.kernel;
    let [x1, x2, x3] = g.x_dims;
    let [y1, y2, y3] = g.y_dims;
    let [s1, s2, s3] = g.stride;
    let [p1, p2, p3] = g.pad;
    let _ = (x1, y1);
    let xsp = g.x_spatial();
    let ysp = g.y_spatial();

    let mut y = vec![T::zero(); g.y_len()];
    if let Some(b) = bias {
        debug_assert_eq!(b.len(), g.c_y);
        for n in 0..g.batch {
            for f in 0..g.c_y {
                let base = (n * g.c_y + f) * ysp;
                y[base..base + ysp].fill(b[f]);
            }
        }
    }

    for n in 0..g.batch {
        for f in 0..g.c_y {
            let ybase = (n * g.c_y + f) * ysp;
            for c in 0..g.c_x {
                let xbase = (n * g.c_x + c) * xsp;
                let wbase = (f * g.c_x + c) * k1 * k2 * k3;
                for kk1 in 0..k1 {
                    let (lo1, hi1) = g.axis_range(0, kk1);
                    for kk2 in 0..k2 {
                        let (lo2, hi2) = g.axis_range(1, kk2);
                        for kk3 in 0..k3 {
                            let (lo3, hi3) = g.axis_range(2, kk3);
                            if lo3 >= hi3 {
                                continue;
                            }
                            let wv = w[wbase + (kk1 * k2 + kk2) * k3 + kk3];
                            for o1 in lo1..hi1 {
                                let i1 = o1 * s1 + kk1 - p1;
                                for o2 in lo2..hi2 {
                                    let i2 = o2 * s2 + kk2 - p2;
                                    let xrow = xbase + (i1 * x2 + i2) * x3;
                                    let yrow = ybase + (o1 * y2 + o2) * y3;
                                    if s3 == 1 {
                                        let x0 = xrow + lo3 + kk3 - p3;
                                        let xs = &x[x0..x0 + (hi3 - lo3)];
                                        let ys = &mut y[yrow + lo3..yrow + hi3];
                                        for (yv, xv) in ys.iter_mut().zip(xs) {
                                            *yv += wv * *xv;
                                        }
                                    } else {
                                        for o3 in lo3..hi3 {
                                            y[yrow + o3] += wv * x[xrow + o3 * s3 + kk3 - p3];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Exact adjoint of [`conv_forward`], y side to x side.
///
/// Doubles as the forward pass of a transposed convolution; `bias` is then
/// the transposed convolution's per-output-channel bias.
pub fn conv_input_adjoint<T: Element>(
    y: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    debug_assert_eq!(y.len(), g.y_len());
    debug_assert_eq!(w.len(), g.weight_len());
    let [k1, k2, k3] = g.kernel;
    let [_, x2, x3] = g.x_dims;
    let [_, y2, y3] = g.y_dims;
    let [s1, s2, s3] = g.stride;
    let [p1, p2, p3] = g.pad;
    let xsp = g.x_spatial();
    let ysp = g.y_spatial();

    let mut x = vec![T::zero(); g.x_len()];
    if let Some(b) = bias {
        debug_assert_eq!(b.len(), g.c_x);
        for n in 0..g.batch {
            for c in 0..g.c_x {
                let base = (n * g.c_x + c) * xsp;
                x[base..base + xsp].fill(b[c]);
            }
        }
    }

    for n in 0..g.batch {
        for f in 0..g.c_y {
            let ybase = (n * g.c_y + f) * ysp;
            for c in 0..g.c_x {
                let xbase = (n * g.c_x + c) * xsp;
                let wbase = (f * g.c_x + c) * k1 * k2 * k3;
                for kk1 in 0..k1 {
                    let (lo1, hi1) = g.axis_range(0, kk1);
                    for kk2 in 0..k2 {
                        let (lo2, hi2) = g.axis_range(1, kk2);
                        for kk3 in 0..k3 {
                            let (lo3, hi3) = g.axis_range(2, kk3);
                            if lo3 >= hi3 {
                                continue;
                            }
                            let wv = w[wbase + (kk1 * k2 + kk2) * k3 + kk3];
                            for o1 in lo1..hi1 {
                                let i1 = o1 * s1 + kk1 - p1;
                                for o2 in lo2..hi2 {
                                    let i2 = o2 * s2 + kk2 - p2;
                                    let xrow = xbase + (i1 * x2 + i2) * x3;
                                    let yrow = ybase + (o1 * y2 + o2) * y3;
                                    if s3 == 1 {
                                        let x0 = xrow + lo3 + kk3 - p3;
                                        let xs = &mut x[x0..x0 + (hi3 - lo3)];
                                        let ys = &y[yrow + lo3..yrow + hi3];
                                        for (xv, yv) in xs.iter_mut().zip(ys) {
                                            *xv += wv * *yv;
                                        }
                                    } else {
                                        for o3 in lo3..hi3 {
                                            x[xrow + o3 * s3 + kk3 - p3] += wv * y[yrow + o3];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Weight gradient from an x-side array and a y-side array.
///
/// For a plain convolution pass `(input, output_grad)`;
/// for a transposed one pass `(output_grad, input)`.
pub fn conv_weight_grad<T: Element>(x: &[T], y: &[T], g: &ConvGeometry) -> Vec<T> {
    debug_assert_eq!(x.len(), g.x_len());
    debug_assert_eq!(y.len(), g.y_len());
    let [k1, k2, k3] = g.kernel;
    let [_, x2, x3] = g.x_dims;
    let [_, y2, y3] = g.y_dims;
    let [s1, s2, s3] = g.stride;
    let [p1, p2, p3] = g.pad;
    let xsp = g.x_spatial();
    let ysp = g.y_spatial();

    let mut dw = vec![T::zero(); g.weight_len()];
    for n in 0..g.batch {
        for f in 0..g.c_y {
            let ybase = (n * g.c_y + f) * ysp;
            for c in 0..g.c_x {
                let xbase = (n * g.c_x + c) * xsp;
                let wbase = (f * g.c_x + c) * k1 * k2 * k3;
                for kk1 in 0..k1 {
                    let (lo1, hi1) = g.axis_range(0, kk1);
                    for kk2 in 0..k2 {
                        let (lo2, hi2) = g.axis_range(1, kk2);
                        for kk3 in 0..k3 {
                            let (lo3, hi3) = g.axis_range(2, kk3);
                            if lo3 >= hi3 {
                                continue;
                            }
                            let mut acc = T::zero();
                            for o1 in lo1..hi1 {
                                let i1 = o1 * s1 + kk1 - p1;
                                for o2 in lo2..hi2 {
                                    let i2 = o2 * s2 + kk2 - p2;
                                    let xrow = xbase + (i1 * x2 + i2) * x3;
                                    let yrow = ybase + (o1 * y2 + o2) * y3;
                                    if s3 == 1 {
                                        let x0 = xrow + lo3 + kk3 - p3;
                                        let xs = &x[x0..x0 + (hi3 - lo3)];
                                        let ys = &y[yrow + lo3..yrow + hi3];
                                        for (xv, yv) in xs.iter().zip(ys) {
                                            acc += *xv * *yv;
                                        }
                                    } else {
                                        for o3 in lo3..hi3 {
                                            acc += x[xrow + o3 * s3 + kk3 - p3] * y[yrow + o3];
                                        }
                                    }
                                }
                            }
                            dw[wbase + (kk1 * k2 + kk2) * k3 + kk3] += acc;
                        }
                    }
                }
            }
        }
    }
    dw
}

/// Per-channel sums over a y-side array (bias gradient of a convolution).
pub fn channel_sums_y<T: Element>(y: &[T], g: &ConvGeometry) -> Vec<T> {
    let ysp = g.y_spatial();
    let mut out = vec![T::zero(); g.c_y];
    for n in 0..g.batch {
        for f in 0..g.c_y {
            let base = (n * g.c_y + f) * ysp;
            let mut acc = T::zero();
            for v in &y[base..base + ysp] {
                acc += *v;
            }
            out[f] += acc;
        }
    }
    out
}

/// Per-channel sums over an x-side array (bias gradient of a transposed
/// convolution).
pub fn channel_sums_x<T: Element>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let xsp = g.x_spatial();
    let mut out = vec![T::zero(); g.c_x];
    for n in 0..g.batch {
        for c in 0..g.c_x {
            let base = (n * g.c_x + c) * xsp;
            let mut acc = T::zero();
            for v in &x[base..base + xsp] {
                acc += *v;
            }
            out[c] += acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn geom(
        x_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        c_x: usize,
        c_y: usize,
        batch: usize,
    ) -> ConvGeometry {
        ConvGeometry::forward(batch, c_x, c_y, x_dims, kernel, stride, pad).unwrap()
    }

    #[test]
    fn output_extent_formula() {
        let g = geom([128, 128, 128], [3, 3, 3], [2, 2, 2], [1, 1, 1], 1, 1, 1);
        assert_eq!(g.y_dims, [64, 64, 64]);
        let g = geom([5, 7, 9], [3, 3, 3], [1, 2, 2], [1, 1, 0], 1, 1, 1);
        assert_eq!(g.y_dims, [5, 4, 4]);
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        assert!(ConvGeometry::forward(1, 1, 1, [2, 5, 5], [3, 3, 3], [1, 1, 1], [0, 1, 1]).is_err());
    }

    #[test]
    fn axis_aligned_moving_sum() {
        // 1x1x4 input [1,2,3,4], kernel [1,1,2] of ones, stride 1, no pad.
        let g = geom([1, 1, 4], [1, 1, 2], [1, 1, 1], [0, 0, 0], 1, 1, 1);
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let w = [1.0, 1.0];
        let y = conv_forward(&x, &w, None, &g);
        assert_eq!(y, vec![3.0, 5.0, 7.0]);
    }

    #[test]
    fn stride_two_with_padding() {
        // [1,2,3,4,5] * [1,1,1], stride 2, pad 1: windows at centers 0, 2, 4.
        let g = geom([1, 1, 5], [1, 1, 3], [1, 1, 2], [0, 0, 1], 1, 1, 1);
        let x = [1.0f64, 2.0, 3.0, 4.0, 5.0];
        let w = [1.0, 1.0, 1.0];
        let y = conv_forward(&x, &w, None, &g);
        assert_eq!(y, vec![3.0, 9.0, 9.0]);
    }

    #[test]
    fn channels_sum_and_bias_applies() {
        // Two input channels, 1x1x1 kernel with weights 2 and 10, bias 0.5.
        let g = geom([1, 1, 3], [1, 1, 1], [1, 1, 1], [0, 0, 0], 2, 1, 1);
        let x = [1.0f64, 2.0, 3.0, 10.0, 20.0, 30.0];
        let w = [2.0, 10.0];
        let y = conv_forward(&x, &w, Some(&[0.5]), &g);
        assert_eq!(y, vec![102.5, 204.5, 306.5]);
    }

    #[test]
    fn cube_kernel_full_overlap() {
        // 2x2x2 ones kernel over a 2x2x2 ones cube: single output = 8.
        let g = geom([2, 2, 2], [2, 2, 2], [1, 1, 1], [0, 0, 0], 1, 1, 1);
        let y = conv_forward(&[1.0f64; 8], &[1.0; 8], None, &g);
        assert_eq!(y, vec![8.0]);
    }

    #[test]
    fn transposed_extent_formula() {
        let g = ConvGeometry::transposed(1, 4, 2, [4, 4, 4], [2, 2, 2], [2, 2, 2], [0, 0, 0])
            .unwrap();
        assert_eq!(g.x_dims, [8, 8, 8]);
    }

    fn random_fill(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        // <conv(x), y> == <x, adjoint(y)> for random shapes and data.
        #[test]
        fn adjoint_identity(
            x1 in 1usize..6, x2 in 1usize..6, x3 in 1usize..6,
            k in 1usize..4, s in 1usize..3, p in 0usize..2,
            c_x in 1usize..3, c_y in 1usize..3, seed in 0u64..1000,
        ) {
            let kernel = [k.min(x1 + 2 * p), k.min(x2 + 2 * p), k.min(x3 + 2 * p)];
            let g = ConvGeometry::forward(
                1, c_x, c_y, [x1, x2, x3], kernel, [s, s, s], [p, p, p],
            ).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let x = random_fill(&mut rng, g.x_len());
            let y = random_fill(&mut rng, g.y_len());
            let w = random_fill(&mut rng, g.weight_len());
            let cx = conv_forward(&x, &w, None, &g);
            let cty = conv_input_adjoint(&y, &w, None, &g);
            let lhs = dot(&cx, &y);
            let rhs = dot(&x, &cty);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs().max(rhs.abs())));
        }
    }

    #[test]
    fn weight_grad_matches_finite_differences() {
        let g = geom([4, 4, 4], [3, 3, 3], [2, 2, 2], [1, 1, 1], 2, 2, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = random_fill(&mut rng, g.x_len());
        let mut w = random_fill(&mut rng, g.weight_len());
        let dy = random_fill(&mut rng, g.y_len());
        let dw = conv_weight_grad(&x, &dy, &g);
        // loss = <conv(x; w), dy>; d loss / d w_i via central differences.
        let h = 1e-6;
        for i in [0usize, 5, 13, g.weight_len() - 1] {
            let orig = w[i];
            w[i] = orig + h;
            let up = dot(&conv_forward(&x, &w, None, &g), &dy);
            w[i] = orig - h;
            let down = dot(&conv_forward(&x, &w, None, &g), &dy);
            w[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (dw[i] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "weight {i}: analytic {} vs fd {}",
                dw[i],
                fd
            );
        }
    }
}
