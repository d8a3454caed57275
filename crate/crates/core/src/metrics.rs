//! Evaluation metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::smoe::RoutingRecord;
use crate::tensor::Tensor;

/// Truth magnitudes below this are judged by absolute error.
pub const NEAR_ZERO: f32 = 1e-12;
pub const ABS_TOLERANCE: f32 = 1e-6;
pub const REL_TOLERANCE: f64 = 0.01;

/// Whether one prediction is within 1% of its truth.
pub fn within_1pct(pred: f32, truth: f32) -> bool {
    let diff = (pred as f64 - truth as f64).abs();
    if truth.abs() >= NEAR_ZERO {
        diff <= REL_TOLERANCE * (truth as f64).abs()
    } else {
        diff <= ABS_TOLERANCE as f64
    }
}

/// Count of locations within 1%.
pub fn count_within_1pct(pred: &[f32], truth: &[f32]) -> usize {
    pred.iter()
        .zip(truth)
        .filter(|(&p, &t)| within_1pct(p, t))
        .count()
}

/// Percentage of locations (over all samples) within 1% relative error.
pub fn pct_within_1pct(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "pct_within_1pct",
            format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        ));
    }
    if pred.is_empty() {
        return Ok(100.0);
    }
    Ok(100.0 * count_within_1pct(pred.data(), truth.data()) as f64 / pred.len() as f64)
}

/// Fraction of point-slots routed to each expert.
pub fn utilization_shares(routing: &RoutingRecord) -> Vec<f64> {
    let counts = routing.utilization();
    let total = counts.iter().sum::<usize>().max(1) as f64;
    counts.iter().map(|&c| c as f64 / total).collect()
}

/// Shannon entropy (nats) of the expert utilization distribution.
pub fn utilization_entropy(routing: &RoutingRecord) -> f64 {
    utilization_shares(routing)
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| -s * libm::log(s))
        .sum()
}

/// Fraction of cells whose top-1 expert maps to the cell's true region type
/// under the best expert-to-type assignment, and that assignment.
///
/// With as many experts as types the assignment is a permutation; otherwise
/// each expert is mapped to the type it overlaps most.
pub fn routing_agreement(
    winners: &[u32],
    num_experts: usize,
    types: &[u8],
    num_types: usize,
) -> Result<(f64, Vec<usize>)> {
    if winners.len() != types.len() || winners.is_empty() {
        return Err(Error::shape(
            "routing_agreement",
            format!(
                "{} routed cells vs {} map cells",
                winners.len(),
                types.len()
            ),
        ));
    }
    let mut confusion = vec![vec![0usize; num_types]; num_experts];
    for (&e, &t) in winners.iter().zip(types) {
        let (e, t) = (e as usize, t as usize);
        if e >= num_experts || t >= num_types {
            return Err(Error::invalid(format!(
                "expert {e} or type {t} out of range"
            )));
        }
        confusion[e][t] += 1;
    }
    let assignment: Vec<usize> = if num_experts == num_types {
        let mut perm: Vec<usize> = (0..num_types).collect();
        let mut best = (0usize, perm.clone());
        permutations(&mut perm, 0, &mut |p| {
            let score = p.iter().enumerate().map(|(e, &t)| confusion[e][t]).sum();
            if score > best.0 {
                best = (score, p.to_vec());
            }
        });
        best.1
    } else {
        confusion
            .iter()
            .map(|row| {
                (0..num_types)
                    .max_by_key(|&t| (row[t], core::cmp::Reverse(t)))
                    .unwrap_or(0)
            })
            .collect()
    };
    let hits: usize = assignment
        .iter()
        .enumerate()
        .map(|(e, &t)| confusion[e][t])
        .sum();
    Ok((hits as f64 / winners.len() as f64, assignment))
}

fn permutations(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, visit);
        items.swap(k, i);
    }
}
