//! Tensor-routing gate: the learnable `[experts, H, W]` logit tensor, its
//! initialisation modes, top-E selection, and sharing across layers.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::heat::RegionMap;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How the routing tensor starts out.
#[derive(Debug, Clone, Copy)]
pub enum GateInit<'a> {
    /// i.i.d. uniform on `[-b, b]` with `b = 3 |experts| / (E F)`.
    Uniform,
    /// `+b` for the experts assigned to a cell's region type, `-b` elsewhere.
    /// Expert `e` belongs to type `e % num_types`.
    FromMap(&'a RegionMap),
    /// Uniform draw, then frozen.
    FixedRandom,
}

/// A freshly initialised routing tensor and whether it starts frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct InitGate {
    pub logits: Tensor,
    pub frozen: bool,
}

/// Half-width of the uniform initialisation interval.
pub fn uniform_bound(num_experts: usize, select: usize, expert_out: usize) -> f32 {
    3.0 * num_experts as f32 / (select * expert_out) as f32
}

pub fn init_gate(
    num_experts: usize,
    select: usize,
    expert_out: usize,
    height: usize,
    width: usize,
    mode: GateInit<'_>,
    rng: &mut Rng,
) -> Result<InitGate> {
    if num_experts == 0 || select == 0 || expert_out == 0 || height == 0 || width == 0 {
        return Err(Error::invalid("gate dimensions must be positive"));
    }
    if select > num_experts {
        return Err(Error::invalid(format!(
            "cannot select {select} of {num_experts} experts"
        )));
    }
    let bound = uniform_bound(num_experts, select, expert_out);
    let shape = [1, num_experts, height, width];
    let uniform = |rng: &mut Rng| {
        let len = num_experts * height * width;
        Tensor::from_vec(
            shape,
            (0..len).map(|_| rng.uniform(-bound, bound)).collect(),
        )
    };
    match mode {
        GateInit::Uniform => Ok(InitGate {
            logits: uniform(rng)?,
            frozen: false,
        }),
        GateInit::FixedRandom => Ok(InitGate {
            logits: uniform(rng)?,
            frozen: true,
        }),
        GateInit::FromMap(map) => {
            if map.height() != height || map.width() != width {
                return Err(Error::shape(
                    "init_gate",
                    format!(
                        "region map {}x{} vs gate {height}x{width}",
                        map.height(),
                        map.width()
                    ),
                ));
            }
            if map.num_types() > num_experts {
                return Err(Error::invalid(format!(
                    "{} region types need at least as many experts, have {num_experts}",
                    map.num_types()
                )));
            }
            let mut logits = Tensor::filled(shape, -bound);
            for i in 0..height {
                for j in 0..width {
                    let t = map.region(i, j);
                    for e in (t..num_experts).step_by(map.num_types()) {
                        logits.set(0, e, i, j, bound);
                    }
                }
            }
            Ok(InitGate {
                logits,
                frozen: false,
            })
        }
    }
}

/// Optional normalisation of gate logits before top-E selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    None,
    Softmax,
    Abs,
    /// Softmax over absolute values.
    SoftmaxAbs,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::Softmax => "softmax",
            Normalization::Abs => "abs",
            Normalization::SoftmaxAbs => "softmax_abs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Normalization::None),
            "softmax" => Some(Normalization::Softmax),
            "abs" => Some(Normalization::Abs),
            "softmax_abs" => Some(Normalization::SoftmaxAbs),
            _ => None,
        }
    }

    /// Routing scores from logits `[1, experts, H, W]`.
    pub fn apply(self, logits: &Tensor) -> Tensor {
        match self {
            Normalization::None => logits.clone(),
            Normalization::Abs => logits.map(libm::fabsf),
            Normalization::Softmax => softmax_experts(logits),
            Normalization::SoftmaxAbs => softmax_experts(&logits.map(libm::fabsf)),
        }
    }

    /// Pulls a gradient on the scores back to the logits.
    pub fn backward(self, logits: &Tensor, dscores: &Tensor) -> Tensor {
        match self {
            Normalization::None => dscores.clone(),
            Normalization::Abs => {
                let mut out = dscores.clone();
                for (g, &l) in out.data_mut().iter_mut().zip(logits.data()) {
                    *g *= sign(l);
                }
                out
            }
            Normalization::Softmax => softmax_backward(&softmax_experts(logits), dscores),
            Normalization::SoftmaxAbs => {
                let mut out = softmax_backward(&softmax_experts(&logits.map(libm::fabsf)), dscores);
                for (g, &l) in out.data_mut().iter_mut().zip(logits.data()) {
                    *g *= sign(l);
                }
                out
            }
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softmax_experts(logits: &Tensor) -> Tensor {
    let experts = logits.channels();
    let plane = logits.plane_len();
    let mut out = logits.clone();
    let data = out.data_mut();
    for p in 0..plane {
        let max = (0..experts)
            .map(|e| data[e * plane + p])
            .fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for e in 0..experts {
            let v = libm::expf(data[e * plane + p] - max);
            data[e * plane + p] = v;
            total += v;
        }
        for e in 0..experts {
            data[e * plane + p] /= total;
        }
    }
    out
}

fn softmax_backward(probs: &Tensor, dscores: &Tensor) -> Tensor {
    let experts = probs.channels();
    let plane = probs.plane_len();
    let (s, g) = (probs.data(), dscores.data());
    let mut out = Tensor::zeros(probs.shape());
    let d = out.data_mut();
    for p in 0..plane {
        let dot: f32 = (0..experts)
            .map(|e| s[e * plane + p] * g[e * plane + p])
            .sum();
        for e in 0..experts {
            let at = e * plane + p;
            d[at] = s[at] * (g[at] - dot);
        }
    }
    out
}

/// Experts chosen at every point, in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    num_experts: usize,
    select: usize,
    height: usize,
    width: usize,
    /// `[select, H, W]`
    selected: Vec<u32>,
    /// `[select, H, W]`
    scores: Vec<f32>,
}

impl RoutingRecord {
    pub fn new(
        num_experts: usize,
        height: usize,
        width: usize,
        selected: Vec<u32>,
        scores: Vec<f32>,
    ) -> Result<Self> {
        let plane = height * width;
        if plane == 0 || selected.len() != scores.len() || !selected.len().is_multiple_of(plane) {
            return Err(Error::shape(
                "RoutingRecord::new",
                format!(
                    "{} indices / {} scores over {height}x{width}",
                    selected.len(),
                    scores.len()
                ),
            ));
        }
        let select = selected.len() / plane;
        if select == 0 || select > num_experts {
            return Err(Error::invalid(format!(
                "{select} slots for {num_experts} experts"
            )));
        }
        let rec = RoutingRecord {
            num_experts,
            select,
            height,
            width,
            selected,
            scores,
        };
        for p in 0..plane {
            let mut seen = vec![false; num_experts];
            for s in 0..select {
                let e = rec.expert(s, p);
                if e >= num_experts || seen[e] {
                    return Err(Error::invalid(format!("bad expert set at point {p}")));
                }
                seen[e] = true;
            }
        }
        Ok(rec)
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn select(&self) -> usize {
        self.select
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Expert in slot `slot` at flat point `p`.
    #[inline]
    pub fn expert(&self, slot: usize, p: usize) -> usize {
        self.selected[slot * self.plane_len() + p] as usize
    }

    #[inline]
    pub fn score(&self, slot: usize, p: usize) -> f32 {
        self.scores[slot * self.plane_len() + p]
    }

    pub fn selected(&self) -> &[u32] {
        &self.selected
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    /// Top-1 expert per point.
    pub fn winners(&self) -> &[u32] {
        &self.selected[..self.plane_len()]
    }

    /// Is expert `e` selected at point `p`?
    pub fn is_selected(&self, e: usize, p: usize) -> bool {
        (0..self.select).any(|s| self.expert(s, p) == e)
    }

    /// `(point, slot)` lists per expert.
    pub fn dispatch_lists(&self) -> Vec<Vec<(u32, u32)>> {
        let plane = self.plane_len();
        let mut lists = vec![Vec::new(); self.num_experts];
        for s in 0..self.select {
            for p in 0..plane {
                lists[self.expert(s, p)].push((p as u32, s as u32));
            }
        }
        lists
    }

    /// Points selecting each expert, counting every slot.
    pub fn utilization(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_experts];
        for &e in &self.selected {
            counts[e as usize] += 1;
        }
        counts
    }

    /// Points whose selected expert set differs from `other`'s.
    pub fn changed_points(&self, other: &RoutingRecord) -> usize {
        if self.select != other.select || self.plane_len() != other.plane_len() {
            return self.plane_len();
        }
        (0..self.plane_len())
            .filter(|&p| (0..self.select).any(|s| !other.is_selected(self.expert(s, p), p)))
            .count()
    }
}

/// Picks the `select` largest scores at every point of `[1, experts, H, W]`.
/// Ties go to the lower expert index; slots are ordered by descending score.
pub fn top_e_select(scores: &Tensor, select: usize) -> Result<RoutingRecord> {
    let [batch, experts, height, width] = scores.shape();
    if batch != 1 {
        return Err(Error::shape(
            "top_e_select",
            format!("expected one gate, got batch {batch}"),
        ));
    }
    if select == 0 || select > experts {
        return Err(Error::invalid(format!(
            "cannot select {select} of {experts} experts"
        )));
    }
    let plane = height * width;
    let data = scores.data();
    let mut selected = vec![0u32; select * plane];
    let mut picked = vec![0f32; select * plane];
    let mut order: Vec<usize> = (0..experts).collect();
    for p in 0..plane {
        order.iter_mut().enumerate().for_each(|(k, e)| *e = k);
        // stable sort keeps lower indices first among equal scores
        order.sort_by(|&a, &b| data[b * plane + p].total_cmp(&data[a * plane + p]));
        for s in 0..select {
            selected[s * plane + p] = order[s] as u32;
            picked[s * plane + p] = data[order[s] * plane + p];
        }
    }
    Ok(RoutingRecord {
        num_experts: experts,
        select,
        height,
        width,
        selected,
        scores: picked,
    })
}

#[derive(Debug)]
struct GateState {
    logits: Tensor,
    grad: Tensor,
    frozen: bool,
}

/// Handle to a routing tensor. Clones share storage: an update through any
/// handle is seen by all of them, and gradients accumulate.
#[derive(Debug, Clone)]
pub struct SharedGate(Rc<RefCell<GateState>>);

impl SharedGate {
    pub fn new(logits: Tensor, frozen: bool) -> Self {
        let grad = Tensor::zeros(logits.shape());
        SharedGate(Rc::new(RefCell::new(GateState {
            logits,
            grad,
            frozen,
        })))
    }

    pub fn from_init(init: InitGate) -> Self {
        Self::new(init.logits, init.frozen)
    }

    pub fn logits(&self) -> Ref<'_, Tensor> {
        Ref::map(self.0.borrow(), |s| &s.logits)
    }

    /// `(experts, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.borrow();
        (s.logits.channels(), s.logits.height(), s.logits.width())
    }

    pub fn set_logits(&self, logits: Tensor) -> Result<()> {
        let mut s = self.0.borrow_mut();
        if logits.shape() != s.logits.shape() {
            return Err(Error::shape(
                "SharedGate::set_logits",
                format!("{:?} vs {:?}", logits.shape(), s.logits.shape()),
            ));
        }
        s.logits = logits;
        Ok(())
    }

    pub fn update<R>(&self, f: impl FnOnce(&mut Tensor) -> R) -> R {
        f(&mut self.0.borrow_mut().logits)
    }

    pub fn accumulate_grad(&self, grad: &Tensor) -> Result<()> {
        let mut s = self.0.borrow_mut();
        if grad.shape() != s.grad.shape() {
            return Err(Error::shape(
                "SharedGate::accumulate_grad",
                format!("{:?} vs {:?}", grad.shape(), s.grad.shape()),
            ));
        }
        for (acc, &g) in s.grad.data_mut().iter_mut().zip(grad.data()) {
            *acc += g;
        }
        Ok(())
    }

    /// Returns the accumulated gradient and resets it to zero.
    pub fn take_grad(&self) -> Tensor {
        let mut s = self.0.borrow_mut();
        let zero = Tensor::zeros(s.grad.shape());
        core::mem::replace(&mut s.grad, zero)
    }

    pub fn is_frozen(&self) -> bool {
        self.0.borrow().frozen
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.0.borrow_mut().frozen = frozen;
    }

    pub fn ptr_eq(&self, other: &SharedGate) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Independent copy with its own storage.
    pub fn deep_clone(&self) -> SharedGate {
        let s = self.0.borrow();
        SharedGate(Rc::new(RefCell::new(GateState {
            logits: s.logits.clone(),
            grad: s.grad.clone(),
            frozen: s.frozen,
        })))
    }
}
