//! Finite-difference checks of every hand-written backward pass.
//!
//! Each check perturbs one input entry at a time, takes a central difference
//! of a scalar objective and compares it with the analytic gradient. Layer
//! outputs are reduced with a fixed random projection `L = sum(r * y)`, so the
//! analytic gradient is the backward pass fed with `dy = r`.

use alloc::format;
use alloc::vec::Vec;

use crate::baselines::{ConvNet, LcnLayer};
use crate::error::{Error, Result};
use crate::losses::{bce_with_logits, build_rc_labels, mse_loss, rc_loss};
use crate::rng::Rng;
use crate::smoe::{
    top_e_select, Damping, GateInit, Normalization, SharedGate, SmoeConfig, SmoeLayer,
};
use crate::tensor::{conv2d_backward, conv2d_forward, KernelBank, Tensor};

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-3;

/// Entries whose finite difference is below this fraction of the largest one
/// are compared against that fraction instead of their own size.
const RELATIVE_FLOOR: f64 = 1e-2;

/// Result of one gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub component: &'static str,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Max relative error between analytic and finite-difference gradients.
pub fn max_relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).abs() / n.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every entry of `params`.
pub fn numeric_grad(
    params: &mut [f32],
    h: f32,
    mut f: impl FnMut(&[f32]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let up = f(params)?;
        params[i] = orig - h;
        let down = f(params)?;
        params[i] = orig;
        let step = (orig + h) as f64 - (orig - h) as f64;
        out.push((up - down) / step);
    }
    Ok(out)
}

fn check(component: &'static str, analytic: &[f32], numeric: &[f64]) -> Result<GradCheck> {
    if analytic.len() != numeric.len() {
        return Err(Error::invalid(format!(
            "{component}: {} analytic vs {} numeric entries",
            analytic.len(),
            numeric.len()
        )));
    }
    Ok(GradCheck {
        component,
        entries: analytic.len(),
        max_rel_error: max_relative_error(analytic, numeric),
    })
}

fn random_tensor(shape: [usize; 4], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .expect("shape matches length")
}

fn random_vec(n: usize, rng: &mut Rng) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

fn with_data(shape: [usize; 4], data: &[f32]) -> Result<Tensor> {
    Tensor::from_vec(shape, data.to_vec())
}

const H: f32 = 1e-2;

/// Conv2d gradients with respect to input, kernels and bias.
pub fn check_conv2d(rng: &mut Rng) -> Result<Vec<GradCheck>> {
    let (n, c, k, side) = (2, 3, 2, 5);
    let x = random_tensor([n, c, side, side], rng);
    let w = KernelBank::from_vec(k, c, random_vec(k * c * 9, rng))?;
    let b = random_vec(k, rng);
    let r = random_tensor([n, k, side, side], rng);
    let g = conv2d_backward(&r, &x, &w)?;

    let mut xs = x.data().to_vec();
    let dx = numeric_grad(&mut xs, H, |v| {
        Ok(project(
            &conv2d_forward(&with_data(x.shape(), v)?, &w, Some(&b))?,
            &r,
        ))
    })?;
    let mut ws = w.data().to_vec();
    let dw = numeric_grad(&mut ws, H, |v| {
        let w = KernelBank::from_vec(k, c, v.to_vec())?;
        Ok(project(&conv2d_forward(&x, &w, Some(&b))?, &r))
    })?;
    let mut bs = b.clone();
    let db = numeric_grad(&mut bs, H, |v| {
        Ok(project(&conv2d_forward(&x, &w, Some(v))?, &r))
    })?;
    Ok(alloc::vec![
        check("conv2d.dx", g.dx.data(), &dx)?,
        check("conv2d.dw", g.dw.data(), &dw)?,
        check("conv2d.dbias", &g.dbias, &db)?,
    ])
}

/// Locally connected layer gradients.
pub fn check_lcn(rng: &mut Rng) -> Result<Vec<GradCheck>> {
    let (n, c, side) = (2, 2, 4);
    let mut layer = LcnLayer::new(side, side, c, rng)?;
    layer
        .bias_mut()
        .iter_mut()
        .for_each(|b| *b = rng.uniform(-1.0, 1.0));
    let x = random_tensor([n, c, side, side], rng);
    let r = random_tensor([n, 1, side, side], rng);
    let g = layer.backward(&r, &x)?;

    let mut xs = x.data().to_vec();
    let dx = numeric_grad(&mut xs, H, |v| {
        Ok(project(&layer.forward(&with_data(x.shape(), v)?)?, &r))
    })?;
    let mut ks = layer.kernels().to_vec();
    let dk = numeric_grad(&mut ks, H, |v| {
        let l = LcnLayer::from_parts(side, side, c, v.to_vec(), layer.bias().to_vec())?;
        Ok(project(&l.forward(&x)?, &r))
    })?;
    let mut bs = layer.bias().to_vec();
    let db = numeric_grad(&mut bs, H, |v| {
        let l = LcnLayer::from_parts(side, side, c, layer.kernels().to_vec(), v.to_vec())?;
        Ok(project(&l.forward(&x)?, &r))
    })?;
    Ok(alloc::vec![
        check("lcn.dx", g.dx.data(), &dx)?,
        check("lcn.dkernels", &g.dkernels, &dk)?,
        check("lcn.dbias", &g.dbias, &db)?,
    ])
}

/// Sign pattern of every hidden pre-activation.
fn relu_pattern(net: &ConvNet, x: &Tensor) -> Result<Vec<bool>> {
    let mut h = x.clone();
    let mut pattern = Vec::new();
    let last = net.layers().len() - 1;
    for (l, (w, b)) in net.layers().iter().enumerate() {
        let out = conv2d_forward(&h, w, Some(b))?;
        if l < last {
            pattern.extend(out.data().iter().map(|&v| v > 0.0));
            h = out.map(|v| v.max(0.0));
        }
    }
    Ok(pattern)
}

fn convnet_from_flat(shapes: &[(usize, usize)], v: &[f32]) -> Result<ConvNet> {
    let mut layers = Vec::with_capacity(shapes.len());
    let mut at = 0;
    for &(k, c) in shapes {
        let w = KernelBank::from_vec(k, c, v[at..at + k * c * 9].to_vec())?;
        at += k * c * 9;
        layers.push((w, v[at..at + k].to_vec()));
        at += k;
    }
    ConvNet::from_layers(layers)
}

/// Conv net gradients through ReLU, input and every parameter.
///
/// With the activation pattern held fixed the net is linear in any single
/// entry, so a step that keeps the pattern gives an exact central difference.
/// Instances where some step flips a unit are redrawn.
pub fn check_convnet(rng: &mut Rng) -> Result<Vec<GradCheck>> {
    let (n, side, width) = (2, 4, 3);
    for _ in 0..100 {
        let mut net = ConvNet::new(1, 3, width, rng)?;
        for (_, b) in net.layers_mut() {
            b.iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        }
        let x = random_tensor([n, 1, side, side], rng);
        let r = random_tensor([n, 1, side, side], rng);
        match convnet_instance(&net, &x, &r) {
            Err(Error::InvalidArgument(msg)) if msg == KINK => continue,
            other => return other,
        }
    }
    Err(Error::invalid(
        "no conv net instance kept its activation pattern",
    ))
}

const KINK: &str = "finite-difference step crossed a ReLU kink";

fn convnet_instance(net: &ConvNet, x: &Tensor, r: &Tensor) -> Result<Vec<GradCheck>> {
    let base = relu_pattern(net, x)?;
    let kink = || Error::invalid(KINK);
    let (_, cache) = net.forward(x)?;
    let g = net.backward(r, &cache)?;

    let mut xs = x.data().to_vec();
    let dx = numeric_grad(&mut xs, H, |v| {
        let x = with_data(x.shape(), v)?;
        if relu_pattern(net, &x)? != base {
            return Err(kink());
        }
        Ok(project(&net.forward(&x)?.0, r))
    })?;

    let mut analytic = Vec::new();
    let mut flat = Vec::new();
    for (gw, gb) in &g.layers {
        analytic.extend_from_slice(gw.data());
        analytic.extend_from_slice(gb);
    }
    for (w, b) in net.layers() {
        flat.extend_from_slice(w.data());
        flat.extend_from_slice(b);
    }
    let shapes: Vec<(usize, usize)> = net
        .layers()
        .iter()
        .map(|(w, _)| (w.out_channels(), w.in_channels()))
        .collect();
    let dp = numeric_grad(&mut flat, H, |v| {
        let net = convnet_from_flat(&shapes, v)?;
        if relu_pattern(&net, x)? != base {
            return Err(kink());
        }
        Ok(project(&net.forward(x)?.0, r))
    })?;
    Ok(alloc::vec![
        check("convnet.dx", g.dx.data(), &dx)?,
        check("convnet.params", &analytic, &dp)?
    ])
}

/// Gate logits whose top-E order survives a perturbation of `h`.
fn separated_logits(cfg: &SmoeConfig, rng: &mut Rng) -> Result<Tensor> {
    let plane = cfg.height * cfg.width;
    let mut data = alloc::vec![0.0f32; cfg.num_experts * plane];
    for p in 0..plane {
        let mut order: Vec<usize> = (0..cfg.num_experts).collect();
        rng.shuffle(&mut order);
        for (rank, &e) in order.iter().enumerate() {
            data[e * plane + p] = 0.5 + rank as f32 * 0.5 + rng.uniform(-0.1, 0.1);
        }
    }
    Tensor::from_vec([1, cfg.num_experts, cfg.height, cfg.width], data)
}

/// SMoE gradients along the selected path, weighted so the gate is included.
pub fn check_smoe(rng: &mut Rng) -> Result<Vec<GradCheck>> {
    let cfg = SmoeConfig {
        num_experts: 4,
        select: 2,
        expert_out: 2,
        in_channels: 2,
        height: 4,
        width: 5,
        weighted: true,
        bias: true,
        normalization: Normalization::None,
    };
    let n = 2;
    let logits = separated_logits(&cfg, rng)?;
    let gate = SharedGate::new(logits.clone(), false);
    let kernels = KernelBank::from_vec(
        cfg.num_experts * cfg.expert_out,
        cfg.in_channels,
        random_vec(cfg.num_experts * cfg.expert_out * cfg.in_channels * 9, rng),
    )?;
    let bias = random_vec(cfg.num_experts * cfg.expert_out, rng);
    let layer = SmoeLayer::from_parts(cfg, kernels.clone(), Some(bias.clone()), gate)?;
    let x = random_tensor([n, cfg.in_channels, cfg.height, cfg.width], rng);
    let r = random_tensor([n, cfg.out_channels(), cfg.height, cfg.width], rng);
    let fwd = layer.forward(&x)?;
    let g = layer.backward(&r, &fwd.cache, &Damping::NONE)?;

    let rebuild = |k: &[f32], b: &[f32], d: &Tensor| -> Result<SmoeLayer> {
        let bank = KernelBank::from_vec(kernels.out_channels(), kernels.in_channels(), k.to_vec())?;
        SmoeLayer::from_parts(
            cfg,
            bank,
            Some(b.to_vec()),
            SharedGate::new(d.clone(), false),
        )
    };
    let routing = fwd.cache.routing().clone();
    let same_routing = |l: &SmoeLayer| -> Result<()> {
        if l.route()?.selected() != routing.selected() {
            return Err(Error::invalid("finite-difference step changed the routing"));
        }
        Ok(())
    };

    let mut xs = x.data().to_vec();
    let dx = numeric_grad(&mut xs, H, |v| {
        Ok(project(&layer.forward(&with_data(x.shape(), v)?)?.y, &r))
    })?;
    let mut ks = kernels.data().to_vec();
    let dk = numeric_grad(&mut ks, H, |v| {
        Ok(project(&rebuild(v, &bias, &logits)?.forward(&x)?.y, &r))
    })?;
    let mut bs = bias.clone();
    let db = numeric_grad(&mut bs, H, |v| {
        Ok(project(
            &rebuild(kernels.data(), v, &logits)?.forward(&x)?.y,
            &r,
        ))
    })?;
    let mut ds = logits.data().to_vec();
    let dd = numeric_grad(&mut ds, H, |v| {
        let l = rebuild(kernels.data(), &bias, &with_data(logits.shape(), v)?)?;
        same_routing(&l)?;
        Ok(project(&l.forward(&x)?.y, &r))
    })?;
    let dbias = g.dbias.unwrap_or_default();
    Ok(alloc::vec![
        check("smoe.dx", g.dx.data(), &dx)?,
        check("smoe.dkernels", g.dkernels.data(), &dk)?,
        check("smoe.dbias", &dbias, &db)?,
        check("smoe.dgate", g.dgate.data(), &dd)?,
    ])
}

/// MSE error signal against differences of the loss value.
pub fn check_mse(rng: &mut Rng) -> Result<Vec<GradCheck>> {
    let pred = random_tensor([2, 1, 3, 3], rng);
    let target = random_tensor([2, 1, 3, 3], rng);
    let (_, signal) = mse_loss(&pred, &target)?;
    let mut ps = pred.data().to_vec();
    let fd = numeric_grad(&mut ps, H, |v| {
        Ok(mse_loss(&with_data(pred.shape(), v)?, &target)?.0 as f64)
    })?;
    Ok(alloc::vec![check("mse.signal", signal.data(), &fd)?])
}

/// BCE on logits with soft labels, and the RC loss on labels built from an
/// error signal.
pub fn check_bce(rng: &mut Rng) -> Result<Vec<GradCheck>> {
    let logits = random_tensor([1, 3, 1, 2], rng).mul_scalar(2.0);
    let labels = random_tensor([1, 3, 1, 2], rng).map(|v| 0.5 * (v + 1.0));
    let (_, grad) = bce_with_logits(&logits, &labels)?;
    let mut zs = logits.data().to_vec();
    let fd = numeric_grad(&mut zs, H, |v| {
        Ok(bce_with_logits(&with_data(logits.shape(), v)?, &labels)?.0 as f64)
    })?;

    let scores = random_tensor([1, 3, 1, 2], rng);
    let routing = top_e_select(&scores, 1)?;
    let signal = random_tensor([4, 1, 1, 2], rng);
    let rc = build_rc_labels(&signal, &routing, 0.7, 3, 1)?;
    let (_, rc_grad) = rc_loss(&logits, &rc)?;
    let mut zs = logits.data().to_vec();
    let rc_fd = numeric_grad(&mut zs, H, |v| {
        Ok(rc_loss(&with_data(logits.shape(), v)?, &rc)?.0 as f64)
    })?;
    Ok(alloc::vec![
        check("bce.logits", grad.data(), &fd)?,
        check("rc.logits", rc_grad.data(), &rc_fd)?
    ])
}

/// Every check, seeded.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let base = Rng::new(seed);
    let mut out = Vec::new();
    out.extend(check_conv2d(&mut base.fork(0))?);
    out.extend(check_lcn(&mut base.fork(1))?);
    out.extend(check_convnet(&mut base.fork(2))?);
    out.extend(check_smoe(&mut base.fork(3))?);
    out.extend(check_smoe_unweighted(&mut base.fork(6))?);
    out.extend(check_mse(&mut base.fork(4))?);
    out.extend(check_bce(&mut base.fork(5))?);
    Ok(out)
}

/// Heat-shaped layer used by the unweighted selected-path check.
pub fn check_smoe_unweighted(rng: &mut Rng) -> Result<Vec<GradCheck>> {
    let cfg = SmoeConfig::heat(5, 5);
    let layer = SmoeLayer::new(cfg, GateInit::Uniform, rng)?;
    let x = random_tensor([3, 1, 5, 5], rng);
    let r = random_tensor([3, 1, 5, 5], rng);
    let fwd = layer.forward(&x)?;
    let g = layer.backward(&r, &fwd.cache, &Damping::NONE)?;
    let logits = layer.gate().logits().clone();
    let kernels = layer.kernels().clone();
    let mut ks = kernels.data().to_vec();
    let dk = numeric_grad(&mut ks, H, |v| {
        let bank = KernelBank::from_vec(kernels.out_channels(), kernels.in_channels(), v.to_vec())?;
        let l = SmoeLayer::from_parts(cfg, bank, None, SharedGate::new(logits.clone(), false))?;
        Ok(project(&l.forward(&x)?.y, &r))
    })?;
    let zero_gate = g.dgate.data().iter().all(|&v| v == 0.0);
    if !zero_gate {
        return Err(Error::invalid("unweighted layer produced a gate gradient"));
    }
    Ok(alloc::vec![check(
        "smoe_unweighted.dkernels",
        g.dkernels.data(),
        &dk
    )?])
}
