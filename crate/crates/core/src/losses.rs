//! Task loss, routing-classification loss and the auxiliary balancing losses.
//!
//! The routing-classification (RC) loss treats gate training as dense
//! multi-label classification. A selected expert counts as misrouted at a
//! point when its error-signal magnitude there is above the `q`-quantile of
//! all slot magnitudes; labels are then built so that misrouted experts are
//! pushed down and their probability mass is spread evenly over the experts
//! that were not selected.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::smoe::RoutingRecord;
use crate::tensor::{quantile, sigmoid_f64, Tensor};

/// Probability clamp used inside the BCE logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean squared error and its gradient `2/N (X - Y)`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.len().max(1) as f64;
    let scale = (2.0 / n) as f32;
    let mut total = 0.0f64;
    let mut signal = Vec::with_capacity(pred.len());
    for (&x, &y) in pred.data().iter().zip(target.data()) {
        let d = x - y;
        total += d as f64 * d as f64;
        signal.push(scale * d);
    }
    Ok(((total / n) as f32, Tensor::from_vec(pred.shape(), signal)?))
}

/// How a slot's error signal is reduced to one magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorMagnitude {
    /// Mean of `|error|` over the slot's channels and the batch.
    #[default]
    Absolute,
    /// Mean of the signed error.
    Signed,
}

impl ErrorMagnitude {
    pub fn name(self) -> &'static str {
        match self {
            ErrorMagnitude::Absolute => "abs",
            ErrorMagnitude::Signed => "signed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "abs" => Some(ErrorMagnitude::Absolute),
            "signed" => Some(ErrorMagnitude::Signed),
            _ => None,
        }
    }
}

/// Per-expert gate targets plus the per-slot misrouting flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RcLabels {
    /// `[1, experts, H, W]`, every entry in `[0, 1]`.
    pub labels: Tensor,
    /// `[E, H, W]`: slot judged misrouted.
    pub incorrect: Vec<bool>,
    /// The quantile the slot magnitudes were compared against.
    pub threshold: f32,
}

impl RcLabels {
    pub fn num_incorrect(&self) -> usize {
        self.incorrect.iter().filter(|&&b| b).count()
    }
}

/// Slot magnitudes `[E, H, W]` of an error signal `[N, E*F, H, W]`.
pub fn slot_error_magnitudes(
    error_signal: &Tensor,
    routing: &RoutingRecord,
    mode: ErrorMagnitude,
) -> Result<Vec<f32>> {
    let [n_batch, channels, height, width] = error_signal.shape();
    let select = routing.select();
    if height != routing.height()
        || width != routing.width()
        || channels == 0
        || channels % select != 0
    {
        return Err(Error::shape(
            "slot_error_magnitudes",
            format!(
                "error signal {:?} vs routing of {select} slots over {}x{}",
                error_signal.shape(),
                routing.height(),
                routing.width()
            ),
        ));
    }
    let per_slot = channels / select;
    let plane = height * width;
    let mut out = vec![0.0f32; select * plane];
    let norm = (n_batch * per_slot).max(1) as f64;
    for (slot, chunk) in out.chunks_mut(plane).enumerate() {
        for (p, value) in chunk.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for n in 0..n_batch {
                for f in 0..per_slot {
                    let e = error_signal.data()[(n * channels + slot * per_slot + f) * plane + p]
                        as f64;
                    acc += match mode {
                        ErrorMagnitude::Absolute => libm::fabs(e),
                        ErrorMagnitude::Signed => e,
                    };
                }
            }
            *value = (acc / norm) as f32;
        }
    }
    Ok(out)
}

/// RC labels from the absolute error signal.
pub fn build_rc_labels(
    error_signal: &Tensor,
    routing: &RoutingRecord,
    q: f64,
    num_experts: usize,
    select: usize,
) -> Result<RcLabels> {
    if num_experts != routing.num_experts() || select != routing.select() {
        return Err(Error::invalid(format!(
            "routing selects {} of {} experts, caller expected {select} of {num_experts}",
            routing.select(),
            routing.num_experts()
        )));
    }
    build_rc_labels_with(error_signal, routing, q, ErrorMagnitude::Absolute)
}

pub fn build_rc_labels_with(
    error_signal: &Tensor,
    routing: &RoutingRecord,
    q: f64,
    mode: ErrorMagnitude,
) -> Result<RcLabels> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("error quantile {q} outside (0, 1)")));
    }
    let magnitudes = slot_error_magnitudes(error_signal, routing, mode)?;
    let threshold = quantile(&magnitudes, q)?;
    let incorrect: Vec<bool> = magnitudes.iter().map(|&m| m > threshold).collect();

    let num_experts = routing.num_experts();
    let select = routing.select();
    let plane = routing.plane_len();
    let unselected = num_experts - select;
    let mut labels = Tensor::zeros([1, num_experts, routing.height(), routing.width()]);
    let data = labels.data_mut();
    for p in 0..plane {
        let mut wrong = 0usize;
        for s in 0..select {
            let e = routing.expert(s, p);
            if incorrect[s * plane + p] {
                wrong += 1;
            } else {
                data[e * plane + p] = 1.0;
            }
        }
        if wrong > 0 && unselected > 0 {
            let share = (wrong as f32 / unselected as f32).min(1.0);
            for e in 0..num_experts {
                if !routing.is_selected(e, p) {
                    data[e * plane + p] = share;
                }
            }
        }
    }
    Ok(RcLabels {
        labels,
        incorrect,
        threshold,
    })
}

/// Mean binary cross-entropy of `sigmoid(logits)` against the RC labels, and
/// its gradient `(p - label) / count` with respect to the logits.
pub fn rc_loss(logits: &Tensor, labels: &RcLabels) -> Result<(f32, Tensor)> {
    bce_with_logits(logits, &labels.labels)
}

pub fn bce_with_logits(logits: &Tensor, labels: &Tensor) -> Result<(f32, Tensor)> {
    if logits.shape() != labels.shape() {
        return Err(Error::shape(
            "rc_loss",
            format!("{:?} vs {:?}", logits.shape(), labels.shape()),
        ));
    }
    if let Some(l) = labels.data().iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::invalid(format!("label {l} outside [0, 1]")));
    }
    let count = logits.len().max(1) as f64;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &l) in logits.data().iter().zip(labels.data()) {
        let p = sigmoid_f64(z as f64);
        let l = l as f64;
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= l * libm::log(pc) + (1.0 - l) * libm::log(1.0 - pc);
        grad.push(((p - l) / count) as f32);
    }
    Ok((
        (total / count) as f32,
        Tensor::from_vec(logits.shape(), grad)?,
    ))
}

/// Which auxiliary balancing losses are active, and the routing noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxConfig {
    pub use_importance: bool,
    pub use_load: bool,
    pub use_spatial_agreement: bool,
    pub noise_std: f32,
    pub aux_scale: f32,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            use_importance: false,
            use_load: false,
            use_spatial_agreement: false,
            noise_std: 0.0,
            aux_scale: 0.01,
        }
    }
}

impl AuxConfig {
    pub fn any_enabled(&self) -> bool {
        self.use_importance || self.use_load || self.use_spatial_agreement
    }

    pub fn enabled_count(&self) -> usize {
        [
            self.use_importance,
            self.use_load,
            self.use_spatial_agreement,
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!(
                "noise_std {} must be >= 0",
                self.noise_std
            )));
        }
        if self.any_enabled() && !(self.aux_scale > 0.0 && self.aux_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "aux_scale {} must be > 0",
                self.aux_scale
            )));
        }
        if self.use_load && self.noise_std == 0.0 {
            return Err(Error::invalid(
                "load loss needs routing noise (noise_std > 0)",
            ));
        }
        Ok(())
    }
}

/// A balancing-loss value; `degenerate` is set when the mean it divides by
/// was zero and the value was defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxValue {
    pub value: f32,
    pub degenerate: bool,
}

fn cv_squared_f64(values: &[f64]) -> Option<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.is_empty() || libm::fabs(mean) < 1e-12 {
        return None;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(var / (mean * mean))
}

/// Squared coefficient of variation (population std).
pub fn cv_squared(values: &[f64]) -> AuxValue {
    match cv_squared_f64(values) {
        Some(v) => AuxValue {
            value: v as f32,
            degenerate: false,
        },
        None => AuxValue {
            value: 0.0,
            degenerate: true,
        },
    }
}

/// Gradient of [`cv_squared`] with respect to each value.
pub fn cv_squared_grad(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.is_empty() || libm::fabs(mean) < 1e-12 {
        return vec![0.0; values.len()];
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    values
        .iter()
        .map(|v| 2.0 * (v - mean) / (n * mean * mean) - 2.0 * var / (n * mean * mean * mean))
        .collect()
}

fn per_expert_totals(gate: &Tensor) -> Vec<f64> {
    let [batch, experts, _, _] = gate.shape();
    (0..experts)
        .map(|e| {
            (0..batch)
                .map(|n| crate::tensor::sum(gate.plane(n, e)))
                .sum()
        })
        .collect()
}

/// Importance loss over effective gate values `[B, experts, H, W]` (zero for
/// unselected experts): CV^2 of the per-expert totals.
pub fn importance_loss(gate: &Tensor) -> Result<AuxValue> {
    if gate.channels() < 2 {
        return Err(Error::invalid("importance loss needs at least two experts"));
    }
    Ok(cv_squared(&per_expert_totals(gate)))
}

/// Gradient of [`importance_loss`] with respect to the gate values.
pub fn importance_grad(gate: &Tensor) -> Result<Tensor> {
    importance_loss(gate)?;
    let grads = cv_squared_grad(&per_expert_totals(gate));
    let mut out = Tensor::zeros(gate.shape());
    for n in 0..gate.batch() {
        for (e, &g) in grads.iter().enumerate() {
            out.plane_mut(n, e).iter_mut().for_each(|v| *v = g as f32);
        }
    }
    Ok(out)
}

/// Dense `[1, experts, H, W]` effective gate: selected scores, zeros elsewhere.
pub fn effective_gate(routing: &RoutingRecord) -> Tensor {
    let plane = routing.plane_len();
    let mut out = Tensor::zeros([1, routing.num_experts(), routing.height(), routing.width()]);
    for s in 0..routing.select() {
        for p in 0..plane {
            out.data_mut()[routing.expert(s, p) * plane + p] = routing.score(s, p);
        }
    }
    out
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / core::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    libm::exp(-0.5 * z * z) / libm::sqrt(2.0 * core::f64::consts::PI)
}

fn selection_probabilities(
    scores: &Tensor,
    routing: &RoutingRecord,
    noise_std: f32,
) -> Result<Vec<f64>> {
    if !(noise_std > 0.0) {
        return Err(Error::invalid(
            "load loss is only defined with routing noise (noise_std > 0)",
        ));
    }
    let experts = routing.num_experts();
    if scores.shape() != [1, experts, routing.height(), routing.width()] {
        return Err(Error::shape(
            "load_loss",
            format!(
                "scores {:?} vs routing over {experts} experts",
                scores.shape()
            ),
        ));
    }
    let plane = routing.plane_len();
    let last = routing.select() - 1;
    let sigma = noise_std as f64;
    let mut z = vec![0.0f64; experts * plane];
    for e in 0..experts {
        for p in 0..plane {
            let threshold = routing.score(last, p) as f64;
            z[e * plane + p] = (scores.data()[e * plane + p] as f64 - threshold) / sigma;
        }
    }
    Ok(z)
}

/// Load loss: CV^2 of the expected per-expert load when only the routing noise
/// is resampled. `scores` are the clean routing scores; `routing` is the
/// (noisy) selection whose `E`-th score is the per-point threshold.
pub fn load_loss(scores: &Tensor, routing: &RoutingRecord, noise_std: f32) -> Result<AuxValue> {
    let z = selection_probabilities(scores, routing, noise_std)?;
    let plane = routing.plane_len();
    let loads: Vec<f64> = z
        .chunks(plane)
        .map(|zs| zs.iter().map(|&v| normal_cdf(v)).sum())
        .collect();
    Ok(cv_squared(&loads))
}

/// Gradient of [`load_loss`] with respect to the clean scores (threshold held fixed).
pub fn load_grad(scores: &Tensor, routing: &RoutingRecord, noise_std: f32) -> Result<Tensor> {
    let z = selection_probabilities(scores, routing, noise_std)?;
    let plane = routing.plane_len();
    let loads: Vec<f64> = z
        .chunks(plane)
        .map(|zs| zs.iter().map(|&v| normal_cdf(v)).sum())
        .collect();
    let dloads = cv_squared_grad(&loads);
    let sigma = noise_std as f64;
    let mut out = Tensor::zeros(scores.shape());
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v = (dloads[k / plane] * normal_pdf(z[k]) / sigma) as f32;
    }
    Ok(out)
}

/// Spatial agreement over per-sample gate values `[B, experts, H, W]`: the
/// population std across the batch, averaged over points, summed over experts.
pub fn spatial_agreement_loss(per_sample: &Tensor) -> Result<f32> {
    let [batch, experts, height, width] = per_sample.shape();
    if batch < 2 {
        return Err(Error::invalid(
            "spatial agreement needs a batch of at least two",
        ));
    }
    let plane = height * width;
    let mut total = 0.0f64;
    for e in 0..experts {
        let mut per_expert = 0.0f64;
        for p in 0..plane {
            let vals = (0..batch).map(|n| per_sample.data()[(n * experts + e) * plane + p] as f64);
            let mean = vals.clone().sum::<f64>() / batch as f64;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / batch as f64;
            per_expert += libm::sqrt(var);
        }
        total += per_expert / plane as f64;
    }
    Ok(total as f32)
}

/// `aux_scale * mean(values)`; 0 when nothing is enabled.
pub fn combine_aux(values: &[f32], cfg: &AuxConfig) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
    (cfg.aux_scale as f64 * mean) as f32
}

/// Adds i.i.d. `N(0, noise_std^2)` to every logit.
pub fn routing_noise(logits: &Tensor, noise_std: f32, rng: &mut Rng) -> Result<Tensor> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!(
            "noise_std {noise_std} must be >= 0"
        )));
    }
    if noise_std == 0.0 {
        return Ok(logits.clone());
    }
    let sigma = noise_std as f64;
    Ok(logits.map(|v| (v as f64 + sigma * rng.standard_normal()) as f32))
}
