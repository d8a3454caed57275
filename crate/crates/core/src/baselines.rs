//! Comparison models: a small conv net and a locally connected layer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{conv2d_backward, conv2d_forward, KernelBank, Tensor, KERNEL, TAPS};

pub const MAX_CONV_LAYERS: usize = 3;
pub const MAX_CONV_WIDTH: usize = 12;

/// One to three 3x3 conv layers with ReLU between them and one output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    layers: Vec<(KernelBank, Vec<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetCache {
    /// Input to every layer; entries after the first are post-ReLU.
    inputs: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetGrads {
    pub dx: Tensor,
    pub layers: Vec<(KernelBank, Vec<f32>)>,
}

impl ConvNet {
    pub fn new(in_channels: usize, depth: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        if !(1..=MAX_CONV_LAYERS).contains(&depth) {
            return Err(Error::invalid(format!(
                "conv net depth {depth} outside 1..={MAX_CONV_LAYERS}"
            )));
        }
        if depth > 1 && !(1..=MAX_CONV_WIDTH).contains(&width) {
            return Err(Error::invalid(format!(
                "conv net width {width} outside 1..={MAX_CONV_WIDTH}"
            )));
        }
        if in_channels == 0 {
            return Err(Error::invalid("conv net needs at least one input channel"));
        }
        let mut layers = Vec::with_capacity(depth);
        let mut c_in = in_channels;
        for l in 0..depth {
            let c_out = if l + 1 == depth { 1 } else { width };
            let bound = libm::sqrtf(6.0 / (c_in * TAPS) as f32);
            let data = (0..c_out * c_in * TAPS)
                .map(|_| rng.uniform(-bound, bound))
                .collect();
            layers.push((KernelBank::from_vec(c_out, c_in, data)?, vec![0.0; c_out]));
            c_in = c_out;
        }
        Ok(ConvNet { layers })
    }

    pub fn from_layers(layers: Vec<(KernelBank, Vec<f32>)>) -> Result<Self> {
        if !(1..=MAX_CONV_LAYERS).contains(&layers.len()) {
            return Err(Error::invalid(format!(
                "conv net depth {} outside 1..={MAX_CONV_LAYERS}",
                layers.len()
            )));
        }
        for (l, (w, b)) in layers.iter().enumerate() {
            if b.len() != w.out_channels() {
                return Err(Error::shape(
                    "ConvNet",
                    format!("layer {l} bias length {}", b.len()),
                ));
            }
            if l > 0 && w.in_channels() != layers[l - 1].0.out_channels() {
                return Err(Error::shape(
                    "ConvNet",
                    format!("layer {l} input channels mismatch"),
                ));
            }
            if w.out_channels() > MAX_CONV_WIDTH {
                return Err(Error::invalid(format!(
                    "layer {l} is wider than {MAX_CONV_WIDTH}"
                )));
            }
        }
        if layers[layers.len() - 1].0.out_channels() != 1 {
            return Err(Error::invalid(
                "final conv layer must have one output channel",
            ));
        }
        Ok(ConvNet { layers })
    }

    pub fn layers(&self) -> &[(KernelBank, Vec<f32>)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(KernelBank, Vec<f32>)] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|(w, b)| w.data().len() + b.len())
            .sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvNetCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let out = conv2d_forward(&h, w, Some(b))?;
            inputs.push(h);
            h = if l + 1 < self.layers.len() {
                out.map(|v| v.max(0.0))
            } else {
                out
            };
        }
        Ok((h, ConvNetCache { inputs }))
    }

    pub fn backward(&self, dy: &Tensor, cache: &ConvNetCache) -> Result<ConvNetGrads> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::invalid("conv net cache is from a different model"));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = dy.clone();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            let cg = conv2d_backward(&g, input, &self.layers[l].0)?;
            grads.push((cg.dw, cg.dbias));
            g = cg.dx;
            if l > 0 {
                // the stored input is post-ReLU, so positive entries mark active units
                for (gv, &a) in g.data_mut().iter_mut().zip(input.data()) {
                    if a <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
        }
        grads.reverse();
        Ok(ConvNetGrads {
            dx: g,
            layers: grads,
        })
    }
}

/// Locally connected 3x3 layer: an unshared kernel and bias at every location,
/// one output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LcnLayer {
    height: usize,
    width: usize,
    in_channels: usize,
    /// `[H, W, C, 3, 3]`.
    kernels: Vec<f32>,
    /// `[H, W]`.
    bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcnGrads {
    pub dx: Tensor,
    pub dkernels: Vec<f32>,
    pub dbias: Vec<f32>,
}

impl LcnLayer {
    pub fn zeros(height: usize, width: usize, in_channels: usize) -> Self {
        LcnLayer {
            height,
            width,
            in_channels,
            kernels: vec![0.0; height * width * in_channels * TAPS],
            bias: vec![0.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, in_channels: usize, rng: &mut Rng) -> Result<Self> {
        if height == 0 || width == 0 || in_channels == 0 {
            return Err(Error::invalid("LCN dimensions must be positive"));
        }
        let mut layer = Self::zeros(height, width, in_channels);
        let bound = 1.0 / libm::sqrtf((in_channels * TAPS) as f32);
        layer
            .kernels
            .iter_mut()
            .for_each(|v| *v = rng.uniform(-bound, bound));
        Ok(layer)
    }

    pub fn from_parts(
        height: usize,
        width: usize,
        in_channels: usize,
        kernels: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if kernels.len() != height * width * in_channels * TAPS || bias.len() != height * width {
            return Err(Error::shape(
                "LcnLayer",
                format!(
                    "{} kernel and {} bias values for {height}x{width}x{in_channels}",
                    kernels.len(),
                    bias.len()
                ),
            ));
        }
        Ok(LcnLayer {
            height,
            width,
            in_channels,
            kernels,
            bias,
        })
    }

    /// Every location uses the same kernel (one output channel) and bias.
    pub fn from_shared(height: usize, width: usize, w: &KernelBank, bias: f32) -> Result<Self> {
        if w.out_channels() != 1 {
            return Err(Error::invalid("LCN has a single output channel"));
        }
        let kernels = w.filter(0).repeat(height * width);
        Self::from_parts(
            height,
            width,
            w.in_channels(),
            kernels,
            vec![bias; height * width],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernels(&self) -> &[f32] {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut [f32] {
        &mut self.kernels
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    /// Taps of channel `c` at location `(i, j)`.
    pub fn kernel_at(&self, i: usize, j: usize, c: usize) -> &[f32] {
        let o = ((i * self.width + j) * self.in_channels + c) * TAPS;
        &self.kernels[o..o + TAPS]
    }

    pub fn kernel_at_mut(&mut self, i: usize, j: usize, c: usize) -> &mut [f32] {
        let o = ((i * self.width + j) * self.in_channels + c) * TAPS;
        &mut self.kernels[o..o + TAPS]
    }

    /// `H * W * (9C + 1)`.
    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }

    fn check(&self, op: &'static str, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.in_channels || h != self.height || w != self.width {
            return Err(Error::shape(
                op,
                format!(
                    "input {:?} for a {}x{} layer over {} channels",
                    x.shape(),
                    self.height,
                    self.width,
                    self.in_channels
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check("lcn_forward", x)?;
        let [n_batch, channels, height, width] = x.shape();
        let mut out = Tensor::zeros([n_batch, 1, height, width]);
        for n in 0..n_batch {
            for i in 0..height {
                for j in 0..width {
                    let mut acc = 0.0f32;
                    for c in 0..channels {
                        let plane = x.plane(n, c);
                        let taps = self.kernel_at(i, j, c);
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
                    out.set(n, 0, i, j, acc + self.bias[i * width + j]);
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, dy: &Tensor, x: &Tensor) -> Result<LcnGrads> {
        self.check("lcn_backward", x)?;
        let [n_batch, channels, height, width] = x.shape();
        if dy.shape() != [n_batch, 1, height, width] {
            return Err(Error::shape("lcn_backward", format!("dy {:?}", dy.shape())));
        }
        let mut dx = Tensor::zeros(x.shape());
        let mut dk = vec![0.0f64; self.kernels.len()];
        let mut db = vec![0.0f64; self.bias.len()];
        for n in 0..n_batch {
            let g = dy.plane(n, 0);
            for i in 0..height {
                for j in 0..width {
                    let gij = g[i * width + j];
                    db[i * width + j] += gij as f64;
                    if gij == 0.0 {
                        continue;
                    }
                    for c in 0..channels {
                        let o = ((i * width + j) * channels + c) * TAPS;
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
                                let idx = x.offset(n, c, row, col);
                                dk[o + t] += (gij * x.data()[idx]) as f64;
                                dx.data_mut()[idx] += gij * self.kernels[o + t];
                            }
                        }
                    }
                }
            }
        }
        Ok(LcnGrads {
            dx,
            dkernels: dk.into_iter().map(|v| v as f32).collect(),
            dbias: db.into_iter().map(|v| v as f32).collect(),
        })
    }
}
