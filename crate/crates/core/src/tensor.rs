//! Dense rank-4 tensors and the 3x3 cross-correlation kernels everything else
//! is built from.
//!
//! Layout is `[N, C, H, W]`, row-major, batch outermost. Convolutions use zero
//! padding of width one so the output keeps the input's spatial size.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Spatial extent of every kernel in this crate.
pub const KERNEL: usize = 3;
/// Number of taps in a 3x3 kernel.
pub const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// `H * W`.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + i) * self.shape[3] + j
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> f32 {
        self.data[self.offset(n, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, value: f32) {
        let at = self.offset(n, c, i, j);
        self.data[at] = value;
    }

    /// The `H x W` plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &mut self.data[start..start + len]
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        self.check_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn mul_scalar(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// Sum with an `f64` accumulator.
    pub fn sum(&self) -> f64 {
        sum(&self.data)
    }

    pub fn mean(&self) -> f64 {
        mean(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, ctx: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(ctx))
        }
    }

    /// Copies samples `indices` into a new batch.
    pub fn select_batch(&self, indices: &[usize]) -> Tensor {
        let sample = self.shape[1] * self.plane_len();
        let mut data = Vec::with_capacity(indices.len() * sample);
        for &n in indices {
            data.extend_from_slice(&self.data[n * sample..(n + 1) * sample]);
        }
        Tensor {
            shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }
}

pub fn sum(values: &[f32]) -> f64 {
    values.iter().map(|&v| v as f64).sum()
}

pub fn mean(values: &[f32]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        sum(values) / values.len() as f64
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Nearest-rank quantile: the element at sorted index `ceil(q * n) - 1`
/// (index 0 when `q == 0`).
pub fn quantile(values: &[f32], q: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty sequence"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantile input"));
    }
    let mut sorted = values.to_vec();
    let k = nearest_rank_index(q, sorted.len());
    let (_, kth, _) = sorted.select_nth_unstable_by(k, f32::total_cmp);
    Ok(*kth)
}

/// Sorted index selected by the nearest-rank rule.
pub fn nearest_rank_index(q: f64, n: usize) -> usize {
    // The small slack keeps e.g. 0.3 * 10 from rounding up to rank 4.
    let rank = libm::ceil(q * n as f64 - 1e-9);
    (rank as usize).clamp(1, n) - 1
}

/// Bank of `out x in` 3x3 kernels, stored `[out, in, 3, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    out_channels: usize,
    in_channels: usize,
    data: Vec<f32>,
}

impl KernelBank {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        KernelBank {
            out_channels,
            in_channels,
            data: vec![0.0; out_channels * in_channels * TAPS],
        }
    }

    pub fn from_vec(out_channels: usize, in_channels: usize, data: Vec<f32>) -> Result<Self> {
        let len = out_channels * in_channels * TAPS;
        if data.len() != len {
            return Err(Error::shape(
                "KernelBank::from_vec",
                format!(
                    "[{out_channels}, {in_channels}, 3, 3] needs {len} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(KernelBank {
            out_channels,
            in_channels,
            data,
        })
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// The nine taps of kernel `(k, c)`, row-major.
    #[inline]
    pub fn kernel(&self, k: usize, c: usize) -> &[f32] {
        let start = (k * self.in_channels + c) * TAPS;
        &self.data[start..start + TAPS]
    }

    #[inline]
    pub fn kernel_mut(&mut self, k: usize, c: usize) -> &mut [f32] {
        let start = (k * self.in_channels + c) * TAPS;
        &mut self.data[start..start + TAPS]
    }

    /// All `in x 9` taps of output channel `k`.
    #[inline]
    pub fn filter(&self, k: usize) -> &[f32] {
        let len = self.in_channels * TAPS;
        &self.data[k * len..(k + 1) * len]
    }
}

/// Gradients of [`conv2d_forward`] with respect to its three inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: KernelBank,
    pub dbias: Vec<f32>,
}

fn check_conv_args(
    op: &'static str,
    x: &Tensor,
    w: &KernelBank,
    bias: Option<&[f32]>,
) -> Result<()> {
    if x.channels() != w.in_channels() {
        return Err(Error::shape(
            op,
            format!(
                "input has {} channels, kernels expect {}",
                x.channels(),
                w.in_channels()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.len() != w.out_channels() {
            return Err(Error::shape(
                op,
                format!(
                    "bias has {} entries for {} kernels",
                    b.len(),
                    w.out_channels()
                ),
            ));
        }
    }
    Ok(())
}

/// Same-size 3x3 cross-correlation with zero padding.
///
/// `out[n,k,i,j] = sum_c sum_{di,dj} w[k,c,di+1,dj+1] * x[n,c,i+di,j+dj] + bias[k]`.
/// Taps are accumulated channel-major then row-major, skipping taps that fall
/// outside the grid; the sparse SMoE dispatch relies on this exact order.
pub fn conv2d_forward(x: &Tensor, w: &KernelBank, bias: Option<&[f32]>) -> Result<Tensor> {
    check_conv_args("conv2d_forward", x, w, bias)?;
    let [n_batch, channels, height, width] = x.shape();
    let kernels = w.out_channels();
    let mut out = Tensor::zeros([n_batch, kernels, height, width]);
    for n in 0..n_batch {
        for k in 0..kernels {
            let b = bias.map_or(0.0, |b| b[k]);
            for i in 0..height {
                for j in 0..width {
                    let mut acc = 0.0f32;
                    for c in 0..channels {
                        let plane = x.plane(n, c);
                        let taps = w.kernel(k, c);
                        for di in 0..KERNEL {
                            let Some(row) = (i + di).checked_sub(1).filter(|&r| r < height) else {
                                continue;
                            };
                            for dj in 0..KERNEL {
                                let Some(col) = (j + dj).checked_sub(1).filter(|&s| s < width)
                                else {
                                    continue;
                                };
                                acc += taps[di * KERNEL + dj] * plane[row * width + col];
                            }
                        }
                    }
                    out.set(n, k, i, j, acc + b);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d_forward`].
pub fn conv2d_backward(dy: &Tensor, x: &Tensor, w: &KernelBank) -> Result<ConvGrads> {
    check_conv_args("conv2d_backward", x, w, None)?;
    let [n_batch, channels, height, width] = x.shape();
    let kernels = w.out_channels();
    if dy.shape() != [n_batch, kernels, height, width] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "dy {:?} does not match output [{n_batch}, {kernels}, {height}, {width}]",
                dy.shape()
            ),
        ));
    }

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = vec![0.0f64; kernels * channels * TAPS];
    let mut dbias = vec![0.0f64; kernels];

    for n in 0..n_batch {
        for k in 0..kernels {
            let g = dy.plane(n, k);
            dbias[k] += sum(g);
            for c in 0..channels {
                let xp = x.plane(n, c);
                let taps = w.kernel(k, c);
                let dw_kc = &mut dw[(k * channels + c) * TAPS..(k * channels + c + 1) * TAPS];
                let dxp = dx.plane_mut(n, c);
                for i in 0..height {
                    for j in 0..width {
                        let gij = g[i * width + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for di in 0..KERNEL {
                            let Some(row) = (i + di).checked_sub(1).filter(|&r| r < height) else {
                                continue;
                            };
                            for dj in 0..KERNEL {
                                let Some(col) = (j + dj).checked_sub(1).filter(|&s| s < width)
                                else {
                                    continue;
                                };
                                let t = di * KERNEL + dj;
                                dw_kc[t] += (gij * xp[row * width + col]) as f64;
                                dxp[row * width + col] += gij * taps[t];
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        dx,
        dw: KernelBank::from_vec(
            kernels,
            channels,
            dw.into_iter().map(|v| v as f32).collect(),
        )?,
        dbias: dbias.into_iter().map(|v| v as f32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn impulse(h: usize, w: usize, i: usize, j: usize) -> Tensor {
        let mut x = Tensor::zeros([1, 1, h, w]);
        x.set(0, 0, i, j, 1.0);
        x
    }

    fn random_tensor(shape: [usize; 4], rng: &mut Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn random_bank(k: usize, c: usize, rng: &mut Rng) -> KernelBank {
        KernelBank::from_vec(
            k,
            c,
            (0..k * c * TAPS).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = Rng::new(1);
        let w = random_bank(2, 3, &mut rng);
        let y = conv2d_forward(&Tensor::zeros([2, 3, 5, 5]), &w, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut w = KernelBank::zeros(1, 1);
        w.kernel_mut(0, 0)[4] = 1.0;
        let x = impulse(5, 5, 2, 2);
        assert_eq!(conv2d_forward(&x, &w, None).unwrap(), x);
    }

    #[test]
    fn five_point_stencil_on_impulse() {
        let w = KernelBank::from_vec(1, 1, vec![0.0, 0.25, 0.0, 0.25, 0.0, 0.25, 0.0, 0.25, 0.0])
            .unwrap();
        let y = conv2d_forward(&impulse(6, 6, 3, 2), &w, None).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let manhattan = (i as isize - 3).abs() + (j as isize - 2).abs();
                let expected = if manhattan == 1 { 0.25 } else { 0.0 };
                assert_eq!(y.get(0, 0, i, j), expected, "({i},{j})");
            }
        }
    }

    #[test]
    fn bias_is_added_everywhere() {
        let w = KernelBank::zeros(2, 1);
        let y = conv2d_forward(&Tensor::zeros([1, 1, 3, 3]), &w, Some(&[1.5, -2.0])).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 1.5));
        assert!(y.plane(0, 1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let w = KernelBank::zeros(1, 2);
        let err = conv2d_forward(&Tensor::zeros([1, 3, 4, 4]), &w, None).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        let err = conv2d_backward(
            &Tensor::zeros([1, 1, 4, 4]),
            &Tensor::zeros([1, 3, 4, 4]),
            &w,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = Rng::new(2);
        let x = random_tensor([2, 2, 4, 4], &mut rng);
        let w = random_bank(3, 2, &mut rng);
        let g = conv2d_backward(&Tensor::zeros([2, 3, 4, 4]), &x, &w).unwrap();
        assert!(g.dx.data().iter().all(|&v| v == 0.0));
        assert!(g.dw.data().iter().all(|&v| v == 0.0));
        assert!(g.dbias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_adjoint_is_identity() {
        let mut rng = Rng::new(3);
        let mut w = KernelBank::zeros(1, 1);
        w.kernel_mut(0, 0)[4] = 1.0;
        let x = random_tensor([1, 1, 5, 4], &mut rng);
        let dy = random_tensor([1, 1, 5, 4], &mut rng);
        assert_eq!(conv2d_backward(&dy, &x, &w).unwrap().dx, dy);
    }

    #[test]
    fn forward_is_linear() {
        let mut rng = Rng::new(4);
        let w = random_bank(2, 2, &mut rng);
        let x1 = random_tensor([1, 2, 6, 6], &mut rng);
        let x2 = random_tensor([1, 2, 6, 6], &mut rng);
        let (a, b) = (0.7f32, -1.3f32);
        let combo = x1.mul_scalar(a).add(&x2.mul_scalar(b)).unwrap();
        let lhs = conv2d_forward(&combo, &w, None).unwrap();
        let rhs = conv2d_forward(&x1, &w, None)
            .unwrap()
            .mul_scalar(a)
            .add(&conv2d_forward(&x2, &w, None).unwrap().mul_scalar(b))
            .unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() <= 1e-5 * (1.0 + r.abs()), "{l} vs {r}");
        }
    }

    #[test]
    fn quantile_examples() {
        let v: Vec<f32> = (1..=10).map(|v| v as f32).collect();
        assert_eq!(quantile(&v, 0.7).unwrap(), 7.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 10.0);
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&v, 0.3).unwrap(), 3.0);
        assert_eq!(quantile(&[5.0], 0.3).unwrap(), 5.0);
        assert!(quantile(&[], 0.5).is_err());
        assert!(quantile(&[1.0], 1.5).is_err());
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(100.0) <= 1.0 && sigmoid(-100.0) >= 0.0);
        assert!(sigmoid(-3.0) < sigmoid(-2.0));
        let mut rng = Rng::new(5);
        let x = random_tensor([1, 1, 3, 3], &mut rng);
        let z = x.hadamard(&Tensor::zeros([1, 1, 3, 3])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(mean(&[2.0, 4.0, 6.0]), 4.0);
        assert!(x.add(&Tensor::zeros([1, 1, 3, 4])).is_err());
        let d = x.sub(&x).unwrap();
        assert_eq!(d.sum(), 0.0);
    }
}
