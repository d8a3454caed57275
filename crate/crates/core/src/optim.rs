//! Adam and the plateau learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moments for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f32], &[f32]) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam update. A frozen group is left untouched,
/// moments and step counter included.
pub fn adam_step(
    params: &mut [f32],
    grads: &[f32],
    state: &mut AdamState,
    lr: f32,
    frozen: bool,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::invalid(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if frozen {
        return Ok(());
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(BETA1, t as f64);
    let c2 = 1.0 - libm::pow(BETA2, t as f64);
    let lr = lr as f64;
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let g = g as f64;
        let m_new = BETA1 * *m as f64 + (1.0 - BETA1) * g;
        let v_new = BETA2 * *v as f64 + (1.0 - BETA2) * g * g;
        *m = m_new as f32;
        *v = v_new as f32;
        let update = lr * (m_new / c1) / (libm::sqrt(v_new / c2) + EPS);
        *p = (*p as f64 - update) as f32;
    }
    Ok(())
}

/// What the schedule decided after one validation result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlateauDecision {
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

/// Divides the learning rate after `patience` epochs without improvement (at
/// most `max_decays` times) and requests a stop after `early_stop` epochs
/// without improvement. Higher metric is better.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    lr: f32,
    factor: f32,
    patience: usize,
    early_stop: usize,
    max_decays: usize,
    tolerance: f64,
    best: f64,
    since_best: usize,
    since_change: usize,
    decays: usize,
}

impl PlateauSchedule {
    pub const MAX_DECAYS: usize = 3;
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(lr: f32, factor: f32, patience: usize, early_stop: usize) -> Result<Self> {
        if patience == 0 || early_stop == 0 {
            return Err(Error::invalid("patience values must be positive"));
        }
        if !(factor > 1.0) || !(lr > 0.0) {
            return Err(Error::invalid(format!(
                "lr {lr} must be > 0 and decay factor {factor} > 1"
            )));
        }
        Ok(PlateauSchedule {
            lr,
            factor,
            patience,
            early_stop,
            max_decays: Self::MAX_DECAYS,
            tolerance: Self::TOLERANCE,
            best: f64::NEG_INFINITY,
            since_best: 0,
            since_change: 0,
            decays: 0,
        })
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn decays(&self) -> usize {
        self.decays
    }

    pub fn observe(&mut self, metric: f64) -> PlateauDecision {
        let improved = metric > self.best + self.tolerance;
        let mut decayed = false;
        if improved {
            self.best = metric;
            self.since_best = 0;
            self.since_change = 0;
        } else {
            self.since_best += 1;
            self.since_change += 1;
            if self.since_change >= self.patience && self.decays < self.max_decays {
                self.lr /= self.factor;
                self.decays += 1;
                self.since_change = 0;
                decayed = true;
            }
        }
        PlateauDecision {
            improved,
            decayed,
            stop: self.since_best >= self.early_stop,
        }
    }
}
