use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::smoe::gate::{
    init_gate, top_e_select, GateInit, Normalization, RoutingRecord, SharedGate,
};
use crate::tensor::{conv2d_forward, KernelBank, Tensor, KERNEL, TAPS};

/// Shape and behaviour of an [`SmoeLayer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoeConfig {
    pub num_experts: usize,
    /// Experts applied per point (`E`).
    pub select: usize,
    /// Output channels per expert (`F`).
    pub expert_out: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Scale expert outputs by their routing score.
    pub weighted: bool,
    pub bias: bool,
    pub normalization: Normalization,
}

impl SmoeConfig {
    /// Three single-output 3x3 experts, one selected per point, unweighted.
    pub fn heat(height: usize, width: usize) -> Self {
        SmoeConfig {
            num_experts: 3,
            select: 1,
            expert_out: 1,
            in_channels: 1,
            height,
            width,
            weighted: false,
            bias: false,
            normalization: Normalization::None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.select * self.expert_out
    }

    fn validate(&self) -> Result<()> {
        if self.num_experts == 0
            || self.expert_out == 0
            || self.in_channels == 0
            || self.height == 0
            || self.width == 0
        {
            return Err(Error::invalid(format!("degenerate SMoE config {self:?}")));
        }
        if self.select == 0 || self.select > self.num_experts {
            return Err(Error::invalid(format!(
                "cannot select {} of {} experts",
                self.select, self.num_experts
            )));
        }
        if self.num_experts > u32::MAX as usize {
            return Err(Error::invalid("too many experts"));
        }
        Ok(())
    }
}

/// Expert-error damping applied in [`SmoeLayer::backward`].
#[derive(Debug, Clone, Copy)]
pub struct Damping<'a> {
    pub factor: f32,
    /// Per `(slot, point)` flags, laid out `[E, H, W]`.
    pub incorrect: Option<&'a [bool]>,
}

impl Damping<'_> {
    pub const NONE: Damping<'static> = Damping {
        factor: 1.0,
        incorrect: None,
    };
}

/// What the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct SmoeCache {
    input: Tensor,
    logits: Tensor,
    routing: RoutingRecord,
    /// Unscaled expert outputs at their selected slots (weighted layers only).
    raw: Option<Tensor>,
}

impl SmoeCache {
    pub fn routing(&self) -> &RoutingRecord {
        &self.routing
    }

    /// Gate logits the routing was computed from.
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

#[derive(Debug, Clone)]
pub struct SmoeForward {
    /// `[N, E*F, H, W]`
    pub y: Tensor,
    pub cache: SmoeCache,
    /// Multiply-adds spent on expert convolutions.
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoeGrads {
    pub dx: Tensor,
    pub dkernels: KernelBank,
    pub dbias: Option<Vec<f32>>,
    /// End-to-end gradient on the gate logits; zero for unweighted layers.
    pub dgate: Tensor,
}

/// Spatial mixture of 3x3 convolution experts routed by a tensor gate.
///
/// Expert `e` owns kernel rows `e*F .. (e+1)*F` of the bank. At every point the
/// outputs of the selected experts are stacked slot by slot, in descending
/// routing-score order, into `E*F` output channels.
#[derive(Debug)]
pub struct SmoeLayer {
    cfg: SmoeConfig,
    kernels: KernelBank,
    bias: Option<Vec<f32>>,
    gate: SharedGate,
    experts_frozen: bool,
}

impl SmoeLayer {
    /// Random experts (uniform on `+-1/sqrt(9 C)`) and a gate initialised by `gate_init`.
    pub fn new(cfg: SmoeConfig, gate_init: GateInit<'_>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let gate = init_gate(
            cfg.num_experts,
            cfg.select,
            cfg.expert_out,
            cfg.height,
            cfg.width,
            gate_init,
            rng,
        )?;
        let rows = cfg.num_experts * cfg.expert_out;
        let bound = 1.0 / libm::sqrtf((cfg.in_channels * TAPS) as f32);
        let kernels = KernelBank::from_vec(
            rows,
            cfg.in_channels,
            (0..rows * cfg.in_channels * TAPS)
                .map(|_| rng.uniform(-bound, bound))
                .collect(),
        )?;
        let bias = cfg
            .bias
            .then(|| (0..rows).map(|_| rng.uniform(-bound, bound)).collect());
        Ok(SmoeLayer {
            cfg,
            kernels,
            bias,
            gate: SharedGate::from_init(gate),
            experts_frozen: false,
        })
    }

    pub fn from_parts(
        cfg: SmoeConfig,
        kernels: KernelBank,
        bias: Option<Vec<f32>>,
        gate: SharedGate,
    ) -> Result<Self> {
        cfg.validate()?;
        if kernels.out_channels() != cfg.num_experts * cfg.expert_out
            || kernels.in_channels() != cfg.in_channels
        {
            return Err(Error::shape(
                "SmoeLayer::from_parts",
                format!(
                    "kernel bank [{}, {}] for {} experts x {} outputs over {} channels",
                    kernels.out_channels(),
                    kernels.in_channels(),
                    cfg.num_experts,
                    cfg.expert_out,
                    cfg.in_channels
                ),
            ));
        }
        if bias
            .as_ref()
            .map(Vec::len)
            .unwrap_or(kernels.out_channels())
            != kernels.out_channels()
        {
            return Err(Error::shape("SmoeLayer::from_parts", "bias length"));
        }
        if gate.dims() != (cfg.num_experts, cfg.height, cfg.width) {
            return Err(Error::shape(
                "SmoeLayer::from_parts",
                format!("gate {:?} vs config", gate.dims()),
            ));
        }
        Ok(SmoeLayer {
            cfg: SmoeConfig {
                bias: bias.is_some(),
                ..cfg
            },
            kernels,
            bias,
            gate,
            experts_frozen: false,
        })
    }

    pub fn config(&self) -> &SmoeConfig {
        &self.cfg
    }

    pub fn kernels(&self) -> &KernelBank {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut KernelBank {
        &mut self.kernels
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<f32>> {
        self.bias.as_mut()
    }

    /// Taps of expert `e`, output `f`, input channel `c`.
    pub fn expert_kernel(&self, e: usize, f: usize, c: usize) -> &[f32] {
        self.kernels.kernel(e * self.cfg.expert_out + f, c)
    }

    pub fn gate(&self) -> &SharedGate {
        &self.gate
    }

    pub(crate) fn bind_gate(&mut self, gate: SharedGate) {
        self.gate = gate;
    }

    pub fn experts_frozen(&self) -> bool {
        self.experts_frozen
    }

    pub fn set_experts_frozen(&mut self, frozen: bool) {
        self.experts_frozen = frozen;
    }

    pub fn set_weighted(&mut self, weighted: bool) {
        self.cfg.weighted = weighted;
    }

    /// Copy that owns its own gate storage.
    pub fn snapshot(&self) -> SmoeLayer {
        SmoeLayer {
            cfg: self.cfg,
            kernels: self.kernels.clone(),
            bias: self.bias.clone(),
            gate: self.gate.deep_clone(),
            experts_frozen: self.experts_frozen,
        }
    }

    /// Expert parameters plus one gate logit per expert per point.
    pub fn param_count(&self) -> (usize, usize) {
        let experts = self.kernels.data().len() + self.bias.as_ref().map_or(0, Vec::len);
        (
            experts,
            self.cfg.num_experts * self.cfg.height * self.cfg.width,
        )
    }

    /// Routing from the current gate.
    pub fn route(&self) -> Result<RoutingRecord> {
        self.route_logits(&self.gate.logits())
    }

    /// Routing from explicit logits, e.g. a noisy copy of the gate.
    pub fn route_logits(&self, logits: &Tensor) -> Result<RoutingRecord> {
        top_e_select(&self.cfg.normalization.apply(logits), self.cfg.select)
    }

    fn check_input(&self, x: &Tensor, op: &'static str) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.cfg.in_channels || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::shape(
                op,
                format!(
                    "input {:?} vs layer [_, {}, {}, {}]",
                    x.shape(),
                    self.cfg.in_channels,
                    self.cfg.height,
                    self.cfg.width
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass routed by the current gate.
    pub fn forward(&self, x: &Tensor) -> Result<SmoeForward> {
        let logits = self.gate.logits().clone();
        self.forward_with_logits(x, logits)
    }

    /// Forward pass routed by `logits` (shape of the gate).
    pub fn forward_with_logits(&self, x: &Tensor, logits: Tensor) -> Result<SmoeForward> {
        self.check_input(x, "SmoeLayer::forward")?;
        if logits.shape() != [1, self.cfg.num_experts, self.cfg.height, self.cfg.width] {
            return Err(Error::shape(
                "SmoeLayer::forward",
                format!("routing logits {:?}", logits.shape()),
            ));
        }
        let routing = self.route_logits(&logits)?;
        let (y, raw, macs) = self.dispatch(x, &routing);
        Ok(SmoeForward {
            y,
            cache: SmoeCache {
                input: x.clone(),
                logits,
                routing,
                raw,
            },
            macs,
        })
    }

    /// Sparse dispatch: gather each expert's points, evaluate it only there,
    /// scatter the results into their slots.
    fn dispatch(&self, x: &Tensor, routing: &RoutingRecord) -> (Tensor, Option<Tensor>, u64) {
        let SmoeConfig {
            expert_out,
            height,
            width,
            weighted,
            ..
        } = self.cfg;
        let [n_batch, channels, _, _] = x.shape();
        let plane = height * width;
        let out_channels = self.cfg.out_channels();
        let mut y = Tensor::zeros([n_batch, out_channels, height, width]);
        let mut raw = weighted.then(|| Tensor::zeros(y.shape()));
        let lists = routing.dispatch_lists();
        let mut macs = 0u64;
        for n in 0..n_batch {
            let sample = &x.data()[n * channels * plane..(n + 1) * channels * plane];
            for (e, points) in lists.iter().enumerate() {
                for f in 0..expert_out {
                    let row = e * expert_out + f;
                    let filter = self.kernels.filter(row);
                    let b = self.bias.as_ref().map_or(0.0, |b| b[row]);
                    for &(p, slot) in points {
                        let (p, slot) = (p as usize, slot as usize);
                        let v = tap_sum(
                            sample,
                            channels,
                            height,
                            width,
                            filter,
                            p / width,
                            p % width,
                        ) + b;
                        let out_at = (n * out_channels + slot * expert_out + f) * plane + p;
                        if let Some(raw) = raw.as_mut() {
                            raw.data_mut()[out_at] = v;
                            y.data_mut()[out_at] = v * routing.score(slot, p);
                        } else {
                            y.data_mut()[out_at] = v;
                        }
                    }
                    macs += (points.len() * channels * TAPS) as u64;
                }
            }
        }
        (y, raw, macs)
    }

    /// Reference path: run every expert at every point as a dense convolution,
    /// then gather the selected slots. Returns the output and its multiply-adds.
    pub fn forward_apply_all(&self, x: &Tensor, routing: &RoutingRecord) -> Result<(Tensor, u64)> {
        self.check_input(x, "SmoeLayer::forward_apply_all")?;
        let all = conv2d_forward(x, &self.kernels, self.bias.as_deref())?;
        let macs = (all.len() * self.cfg.in_channels * TAPS) as u64;
        let [n_batch, _, height, width] = x.shape();
        let f_out = self.cfg.expert_out;
        let mut y = Tensor::zeros([n_batch, self.cfg.out_channels(), height, width]);
        for n in 0..n_batch {
            for slot in 0..self.cfg.select {
                for f in 0..f_out {
                    for p in 0..height * width {
                        let e = routing.expert(slot, p);
                        let (i, j) = (p / width, p % width);
                        let mut v = all.get(n, e * f_out + f, i, j);
                        if self.cfg.weighted {
                            v *= routing.score(slot, p);
                        }
                        y.set(n, slot * f_out + f, i, j, v);
                    }
                }
            }
        }
        Ok((y, macs))
    }

    /// Sparse adjoint of [`forward`](Self::forward).
    ///
    /// Where `damping.incorrect` is set, the upstream gradient of that slot is
    /// scaled by `damping.factor` before it reaches the expert kernels and the
    /// input. The gate gradient always sees the undamped signal.
    pub fn backward(
        &self,
        dy: &Tensor,
        cache: &SmoeCache,
        damping: &Damping<'_>,
    ) -> Result<SmoeGrads> {
        let x = &cache.input;
        let routing = &cache.routing;
        let SmoeConfig {
            num_experts,
            select,
            expert_out,
            height,
            width,
            weighted,
            ..
        } = self.cfg;
        let [n_batch, channels, _, _] = x.shape();
        let plane = height * width;
        let out_channels = self.cfg.out_channels();
        if dy.shape() != [n_batch, out_channels, height, width] {
            return Err(Error::shape(
                "SmoeLayer::backward",
                format!(
                    "dy {:?} vs output [{n_batch}, {out_channels}, {height}, {width}]",
                    dy.shape()
                ),
            ));
        }
        if let Some(mask) = damping.incorrect {
            if mask.len() != select * plane {
                return Err(Error::shape(
                    "SmoeLayer::backward",
                    format!(
                        "damping mask has {} entries, expected {}",
                        mask.len(),
                        select * plane
                    ),
                ));
            }
        }
        if !(0.0..=1.0).contains(&damping.factor) {
            return Err(Error::invalid(format!(
                "damping factor {} outside [0, 1]",
                damping.factor
            )));
        }

        let rows = num_experts * expert_out;
        let mut dx = Tensor::zeros(x.shape());
        let mut dk = vec![0.0f64; rows * channels * TAPS];
        let mut db = vec![0.0f64; rows];
        let mut dscores = Tensor::zeros([1, num_experts, height, width]);
        let lists = routing.dispatch_lists();

        for n in 0..n_batch {
            let sample = &x.data()[n * channels * plane..(n + 1) * channels * plane];
            let dx_sample = &mut dx.data_mut()[n * channels * plane..(n + 1) * channels * plane];
            for (e, points) in lists.iter().enumerate() {
                for f in 0..expert_out {
                    let row = e * expert_out + f;
                    let filter = self.kernels.filter(row);
                    let dk_row = &mut dk[row * channels * TAPS..(row + 1) * channels * TAPS];
                    for &(p, slot) in points {
                        let (p, slot) = (p as usize, slot as usize);
                        let out_at = (n * out_channels + slot * expert_out + f) * plane + p;
                        let g = dy.data()[out_at];
                        if g == 0.0 {
                            continue;
                        }
                        let damp = match damping.incorrect {
                            Some(mask) if mask[slot * plane + p] => damping.factor,
                            _ => 1.0,
                        };
                        let mut g_in = g * damp;
                        if weighted {
                            let raw = cache
                                .raw
                                .as_ref()
                                .expect("weighted forward keeps raw outputs");
                            dscores.data_mut()[e * plane + p] += raw.data()[out_at] * g;
                            g_in *= routing.score(slot, p);
                        }
                        if g_in == 0.0 {
                            continue;
                        }
                        db[row] += g_in as f64;
                        tap_scatter(
                            sample,
                            dx_sample,
                            channels,
                            height,
                            width,
                            filter,
                            dk_row,
                            p / width,
                            p % width,
                            g_in,
                        );
                    }
                }
            }
        }

        let dgate = if weighted {
            self.cfg.normalization.backward(&cache.logits, &dscores)
        } else {
            dscores
        };
        Ok(SmoeGrads {
            dx,
            dkernels: KernelBank::from_vec(
                rows,
                channels,
                dk.into_iter().map(|v| v as f32).collect(),
            )?,
            dbias: self
                .bias
                .as_ref()
                .map(|_| db.into_iter().map(|v| v as f32).collect()),
            dgate,
        })
    }
}

/// One output value of a 3x3 filter at `(i, j)`, accumulated in the same
/// order as [`conv2d_forward`].
#[inline]
fn tap_sum(
    sample: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    filter: &[f32],
    i: usize,
    j: usize,
) -> f32 {
    let plane = height * width;
    let mut acc = 0.0f32;
    for c in 0..channels {
        let xp = &sample[c * plane..(c + 1) * plane];
        let taps = &filter[c * TAPS..(c + 1) * TAPS];
        for di in 0..KERNEL {
            let Some(row) = (i + di).checked_sub(1).filter(|&r| r < height) else {
                continue;
            };
            for dj in 0..KERNEL {
                let Some(col) = (j + dj).checked_sub(1).filter(|&s| s < width) else {
                    continue;
                };
                acc += taps[di * KERNEL + dj] * xp[row * width + col];
            }
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn tap_scatter(
    sample: &[f32],
    dx: &mut [f32],
    channels: usize,
    height: usize,
    width: usize,
    filter: &[f32],
    dk: &mut [f64],
    i: usize,
    j: usize,
    g: f32,
) {
    let plane = height * width;
    for c in 0..channels {
        for di in 0..KERNEL {
            let Some(row) = (i + di).checked_sub(1).filter(|&r| r < height) else {
                continue;
            };
            for dj in 0..KERNEL {
                let Some(col) = (j + dj).checked_sub(1).filter(|&s| s < width) else {
                    continue;
                };
                let t = c * TAPS + di * KERNEL + dj;
                let at = c * plane + row * width + col;
                dk[t] += (g * sample[at]) as f64;
                dx[at] += g * filter[t];
            }
        }
    }
}

/// Binds every layer to the first layer's routing tensor.
///
/// All layers must agree on expert count and spatial size. Afterwards an
/// update through any layer's gate is visible to all of them and gate
/// gradients accumulate in one place.
pub fn gate_share_handle(layers: &mut [&mut SmoeLayer]) -> Result<SharedGate> {
    let Some(first) = layers.first() else {
        return Err(Error::invalid("no layers to bind"));
    };
    let shared = first.gate().clone();
    let dims = shared.dims();
    for layer in layers.iter() {
        if layer.gate().dims() != dims {
            return Err(Error::shape(
                "gate_share_handle",
                format!("gate {:?} vs {:?}", layer.gate().dims(), dims),
            ));
        }
    }
    for layer in layers.iter_mut() {
        layer.bind_gate(shared.clone());
    }
    Ok(shared)
}
