//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed. Set
//! `SMOE_ACCEPT_FULL=1` to add the long 64×64 preset run to criterion 1.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use smoe_core::baselines::LcnLayer;
use smoe_core::gradcheck;
use smoe_core::heat::{
    diffusion_step, generate_region_map, stencil, HeatDataset, Preset, Split,
    BENCHMARK_DIFFUSIVITIES,
};
use smoe_core::losses::{
    bce_with_logits, build_rc_labels, importance_loss, load_loss, slot_error_magnitudes,
    ErrorMagnitude,
};
use smoe_core::metrics::routing_agreement;
use smoe_core::smoe::{top_e_select, GateInit, SmoeConfig, SmoeLayer};
use smoe_core::tensor::{conv2d_forward, KernelBank, Tensor};
use smoe_core::train::{evaluate, fit, ExpertInitMode, Freeze, GateInitMode, TrainConfig};
use smoe_core::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn tensor(shape: [usize; 4], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Result of one training run, reduced to what the criteria look at.
struct Trained {
    test_pct: f64,
    best_epoch: usize,
    elapsed: Duration,
    agreement: Option<f64>,
    /// Worst per-tap gap between each expert and its assigned region's stencil.
    stencil_gap: Option<f64>,
}

fn train(data: &HeatDataset, cfg: &TrainConfig) -> Trained {
    let start = Instant::now();
    let result = fit(data, cfg).expect("training failed");
    let elapsed = start.elapsed();
    let test_pct = evaluate(&result.model, data, Split::Test)
        .unwrap()
        .pct_within_1;
    let map = data.region_map();
    let (agreement, stencil_gap) = match result.model.as_smoe() {
        Some(layer) => {
            let routing = layer.route().unwrap();
            let (frac, assignment) = routing_agreement(
                routing.winners(),
                routing.num_experts(),
                map.grid(),
                map.num_types(),
            )
            .unwrap();
            let gap = assignment
                .iter()
                .enumerate()
                .flat_map(|(e, &t)| {
                    let truth = stencil(map.diffusivities()[t]);
                    layer
                        .expert_kernel(e, 0, 0)
                        .iter()
                        .zip(truth)
                        .map(|(&k, s)| (k as f64 - s as f64).abs())
                        .collect::<Vec<_>>()
                })
                .fold(0.0f64, f64::max);
            (Some(frac), Some(gap))
        }
        None => (None, None),
    };
    Trained {
        test_pct,
        best_epoch: result.best_epoch,
        elapsed,
        agreement,
        stencil_gap,
    }
}

fn ablation_cfg(rc: bool, damping: bool, seed: u64) -> TrainConfig {
    TrainConfig {
        rc_enabled: rc,
        damping_enabled: damping,
        // without RC the gate only learns through weighted outputs
        weighted: !rc,
        seed,
        ..TrainConfig::default()
    }
}

fn criterion_1(run: &Trained) -> Outcome {
    let mut pass =
        run.test_pct >= 99.0 && run.best_epoch <= 50 && run.elapsed <= Duration::from_secs(600);
    let mut detail = format!(
        "reduced preset test {:.3}% (need >= 99.0), best epoch {}, {:.0} s",
        run.test_pct,
        run.best_epoch,
        run.elapsed.as_secs_f64()
    );
    if std::env::var_os("SMOE_ACCEPT_FULL").is_some() {
        let data = Preset::Paper.generate(0).unwrap();
        let full = train(&data, &TrainConfig::default());
        pass &= full.test_pct >= 99.9;
        detail.push_str(&format!(
            "; paper preset test {:.3}% (need >= 99.9)",
            full.test_pct
        ));
    } else {
        detail.push_str("; paper preset skipped (set SMOE_ACCEPT_FULL=1)");
    }
    outcome(pass, detail)
}

fn criterion_2(data: &HeatDataset, default_seed0: &Trained) -> Outcome {
    let cells = [
        ("rc+damping", true, true),
        ("rc only", true, false),
        ("damping only", false, true),
        ("neither", false, false),
    ];
    let mut means = Vec::new();
    for (name, rc, damping) in cells {
        let pcts: Vec<f64> = (0..3)
            .map(|seed| {
                if rc && damping && seed == 0 {
                    default_seed0.test_pct
                } else {
                    train(data, &ablation_cfg(rc, damping, seed)).test_pct
                }
            })
            .collect();
        means.push((name, pcts.iter().sum::<f64>() / pcts.len() as f64));
    }
    let m = |i: usize| means[i].1;
    let pass = m(0) > m(1) && m(1) > m(2).max(m(3)) && m(0) - m(3) >= 4.0;
    let detail = means
        .iter()
        .map(|(n, v)| format!("{n} {v:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("3-seed mean test %: {detail}"))
}

fn criterion_3(data: &HeatDataset) -> Outcome {
    let gate_fixed = train(
        data,
        &TrainConfig {
            gate_init: GateInitMode::Perfect,
            freeze: Freeze {
                gate: true,
                experts: false,
            },
            ..TrainConfig::default()
        },
    );
    let experts_fixed = train(
        data,
        &TrainConfig {
            expert_init: ExpertInitMode::Perfect,
            freeze: Freeze {
                gate: false,
                experts: true,
            },
            rc_enabled: false,
            damping_enabled: false,
            weighted: false,
            ..TrainConfig::default()
        },
    );
    let pass = gate_fixed.test_pct >= 99.5 && experts_fixed.test_pct <= 95.0;
    outcome(
        pass,
        format!(
            "frozen perfect gate + random experts {:.3}% (need >= 99.5); frozen perfect experts + random gate without RC {:.3}% (need <= 95)",
            gate_fixed.test_pct, experts_fixed.test_pct
        ),
    )
}

fn criterion_4(run: &Trained) -> Outcome {
    let a = run.agreement.unwrap();
    outcome(
        a >= 0.99,
        format!("routing agreement {:.2}% of cells (need >= 99)", 100.0 * a),
    )
}

fn criterion_5(run: &Trained) -> Outcome {
    let gap = run.stencil_gap.unwrap();
    outcome(
        gap <= 0.02,
        format!("largest tap error against the assigned stencil {gap:.4} (need <= 0.02)"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = Rng::new(606);
    let mut dispatch_ok = 0;
    for case in 0..100 {
        let experts = 2 + rng.below(4);
        let select = 1 + rng.below(experts - 1);
        let f = 1 + rng.below(2);
        let (h, w) = (2 + rng.below(7), 2 + rng.below(7));
        let cfg = SmoeConfig {
            num_experts: experts,
            select,
            expert_out: f,
            in_channels: 1 + rng.below(2),
            height: h,
            width: w,
            weighted: rng.below(2) == 0,
            bias: rng.below(2) == 0,
            ..SmoeConfig::heat(h, w)
        };
        let layer = SmoeLayer::new(cfg, GateInit::Uniform, &mut rng.fork(case)).unwrap();
        let x = tensor([1 + rng.below(3), cfg.in_channels, h, w], &mut rng);
        let sparse = layer.forward(&x).unwrap();
        let (dense, _) = layer.forward_apply_all(&x, sparse.cache.routing()).unwrap();
        let same = sparse
            .y
            .data()
            .iter()
            .zip(dense.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        dispatch_ok += usize::from(same && sparse.y.shape() == dense.shape());
    }

    let mut lcn_gap = 0.0f32;
    for _ in 0..20 {
        let (h, w, c) = (3 + rng.below(6), 3 + rng.below(6), 1 + rng.below(3));
        let bank = KernelBank::from_vec(1, c, (0..9 * c).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let bias = rng.uniform(-1.0, 1.0);
        let lcn = LcnLayer::from_shared(h, w, &bank, bias).unwrap();
        let x = tensor([2, c, h, w], &mut rng);
        let a = lcn.forward(&x).unwrap();
        let b = conv2d_forward(&x, &bank, Some(&[bias])).unwrap();
        lcn_gap = a
            .data()
            .iter()
            .zip(b.data())
            .fold(lcn_gap, |m, (p, q)| m.max((p - q).abs()));
    }

    let mut heat_gap = 0.0f32;
    for s in 0..20 {
        let map =
            generate_region_map(12, 10, &BENCHMARK_DIFFUSIVITIES, &mut rng.fork(100 + s)).unwrap();
        let state = tensor([1, 1, 12, 10], &mut rng).map(f32::abs);
        let next = diffusion_step(&state, &map).unwrap();
        for (t, &alpha) in BENCHMARK_DIFFUSIVITIES.iter().enumerate() {
            let k = KernelBank::from_vec(1, 1, stencil(alpha).to_vec()).unwrap();
            let oracle = conv2d_forward(&state, &k, None).unwrap();
            for (p, &g) in map.grid().iter().enumerate() {
                if g as usize == t {
                    heat_gap = heat_gap.max((next.data()[p] - oracle.data()[p]).abs());
                }
            }
        }
    }
    let pass = dispatch_ok == 100 && lcn_gap <= 1e-6 && heat_gap <= 1e-6;
    outcome(
        pass,
        format!("sparse = apply-all bit-exact on {dispatch_ok}/100; LCN vs conv max gap {lcn_gap:.1e}; diffusion vs region kernels max gap {heat_gap:.1e}"),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let checks = gradcheck::run_suite(7).unwrap();
    let elapsed = start.elapsed();
    let worst = checks
        .iter()
        .map(|c| c.max_rel_error)
        .fold(0.0f64, f64::max);
    let covered = ["conv2d.", "lcn.", "smoe.", "mse.", "bce.", "rc."]
        .iter()
        .all(|p| checks.iter().any(|c| c.component.starts_with(p)));
    let pass = covered
        && checks.iter().all(|c| c.max_rel_error < 1e-3)
        && elapsed < Duration::from_secs(30);
    outcome(
        pass,
        format!(
            "{} checks, worst relative error {worst:.2e} (need < 1e-3), {:.2} s",
            checks.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Nearest-rank quantile by sorting, then a strict count above it.
fn oracle_incorrect(mags: &[f32], q: f64) -> usize {
    let mut sorted = mags.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * sorted.len() as f64 - 1e-9).ceil() as usize).max(1) - 1;
    mags.iter().filter(|&&m| m > sorted[rank]).count()
}

fn criterion_8() -> Outcome {
    let mut rng = Rng::new(808);
    let mut failures = Vec::new();
    for case in 0..1000 {
        let experts = 2 + rng.below(4);
        let select = 1 + rng.below(experts - 1);
        let (h, w, batch, f) = (
            1 + rng.below(6),
            1 + rng.below(6),
            1 + rng.below(3),
            1 + rng.below(2),
        );
        let q = [0.5, 0.6, 0.7, 0.8, 0.9][rng.below(5)];
        let routing = top_e_select(&tensor([1, experts, h, w], &mut rng), select).unwrap();
        let signal = tensor([batch, select * f, h, w], &mut rng);
        let labels = build_rc_labels(&signal, &routing, q, experts, select).unwrap();
        let mags = slot_error_magnitudes(&signal, &routing, ErrorMagnitude::Absolute).unwrap();
        if labels.num_incorrect() != oracle_incorrect(&mags, q) {
            failures.push(format!("case {case}: incorrect count"));
            continue;
        }
        let plane = h * w;
        for p in 0..plane {
            let wrong = (0..select)
                .filter(|&s| labels.incorrect[s * plane + p])
                .count();
            let mut mass = 0.0f32;
            for e in 0..experts {
                let l = labels.labels.data()[e * plane + p];
                let expected = match (0..select).find(|&s| routing.expert(s, p) == e) {
                    Some(s) if labels.incorrect[s * plane + p] => 0.0,
                    Some(_) => 1.0,
                    None => (wrong as f32 / (experts - select) as f32).min(1.0),
                };
                if l != expected || !(0.0..=1.0).contains(&l) {
                    failures.push(format!("case {case}: label ({e}, {p})"));
                }
                mass += l;
            }
            if wrong <= experts - select && (mass - select as f32).abs() > 1e-5 {
                failures.push(format!("case {case}: label mass {mass} at {p}"));
            }
        }
    }
    let detail = match failures.first() {
        None => "1000 instances, all invariants hold, counts match the sorting oracle".to_string(),
        Some(first) => format!("{} violations, first: {first}", failures.len()),
    };
    outcome(failures.is_empty(), detail)
}

fn criterion_9() -> Outcome {
    let imp = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
    let imp = importance_loss(&imp).unwrap().value as f64;

    let (bce, _) = bce_with_logits(
        &Tensor::zeros([1, 4, 1, 1]),
        &Tensor::filled([1, 4, 1, 1], 0.5),
    )
    .unwrap();
    let bce = bce as f64;

    // Phi(-1) from a normal table
    let p = [0.158_655_253_931_457_f64, 0.5];
    let mean = (p[0] + p[1]) / 2.0;
    let var = ((p[0] - mean).powi(2) + (p[1] - mean).powi(2)) / 2.0;
    let expected_load = var / (mean * mean);
    let logits = Tensor::from_vec([1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
    let routing = top_e_select(&logits, 1).unwrap();
    let load = load_loss(&logits, &routing, 1.0).unwrap().value as f64;

    let pass = (imp - 0.25).abs() <= 1e-6
        && (bce - std::f64::consts::LN_2).abs() <= 1e-6
        && (load - expected_load).abs() <= 1e-4;
    outcome(
        pass,
        format!(
            "importance {imp:.6} (0.25), BCE {bce:.7} (ln 2), load {load:.5} ({expected_load:.5})"
        ),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        println!(
            "criterion {n}: {} {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, o));
    };

    report(9, criterion_9());
    report(8, criterion_8());
    report(7, criterion_7());
    report(6, criterion_6());

    let data = Preset::Reduced.generate(0).unwrap();
    let headline = train(&data, &TrainConfig::default());
    report(1, criterion_1(&headline));
    report(4, criterion_4(&headline));
    report(5, criterion_5(&headline));
    report(3, criterion_3(&data));
    report(2, criterion_2(&data, &headline));

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, o)| !o.pass)
        .map(|(n, _)| n.to_string())
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
