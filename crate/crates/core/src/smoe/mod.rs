//! The spatial mixture-of-experts layer.

mod gate;
mod layer;

pub use gate::{
    init_gate, top_e_select, uniform_bound, GateInit, InitGate, Normalization, RoutingRecord,
    SharedGate,
};
pub use layer::{
    gate_share_handle, Damping, SmoeCache, SmoeConfig, SmoeForward, SmoeGrads, SmoeLayer,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heat::{diffusion_step, generate_region_map, stencil, BENCHMARK_DIFFUSIVITIES};
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use alloc::vec;
    use alloc::vec::Vec;

    fn random_input(shape: [usize; 4], rng: &mut Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn config(
        num_experts: usize,
        select: usize,
        expert_out: usize,
        in_channels: usize,
        weighted: bool,
    ) -> SmoeConfig {
        SmoeConfig {
            num_experts,
            select,
            expert_out,
            in_channels,
            height: 6,
            width: 5,
            weighted,
            bias: true,
            normalization: Normalization::None,
        }
    }

    #[test]
    fn perfect_layer_reproduces_diffusion() {
        let map = generate_region_map(16, 16, &BENCHMARK_DIFFUSIVITIES, &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(1);
        let mut layer =
            SmoeLayer::new(SmoeConfig::heat(16, 16), GateInit::FromMap(&map), &mut rng).unwrap();
        for (e, &a) in map.diffusivities().iter().enumerate() {
            layer
                .kernels_mut()
                .kernel_mut(e, 0)
                .copy_from_slice(&stencil(a));
        }
        let x = Tensor::from_vec(
            [2, 1, 16, 16],
            (0..512).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )
        .unwrap();
        let y = layer.forward(&x).unwrap().y;
        let truth = diffusion_step(&x, &map).unwrap();
        for (a, b) in y.data().iter().zip(truth.data()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn weighted_with_unit_scores_matches_unweighted() {
        let mut rng = Rng::new(2);
        let unweighted =
            SmoeLayer::new(config(3, 2, 2, 2, false), GateInit::Uniform, &mut rng).unwrap();
        let mut weighted = unweighted.snapshot();
        weighted.set_weighted(true);
        // two experts at 1.0, one below: scores of the selected pair are exactly 1
        weighted.gate().update(|d| {
            let plane = d.plane_len();
            for (k, v) in d.data_mut().iter_mut().enumerate() {
                *v = if k / plane == 1 { -1.0 } else { 1.0 };
            }
        });
        unweighted
            .gate()
            .set_logits(weighted.gate().logits().clone())
            .unwrap();
        let x = random_input([2, 2, 6, 5], &mut rng);
        assert_eq!(
            weighted.forward(&x).unwrap().y,
            unweighted.forward(&x).unwrap().y
        );
    }

    #[test]
    fn sparse_dispatch_equals_apply_all_bitwise() {
        let mut rng = Rng::new(3);
        for trial in 0..20 {
            let weighted = trial % 2 == 1;
            let cfg = config(4, 1 + trial % 4, 1 + trial % 2, 1 + trial % 3, weighted);
            let layer = SmoeLayer::new(cfg, GateInit::Uniform, &mut rng).unwrap();
            let x = random_input([2, cfg.in_channels, 6, 5], &mut rng);
            let out = layer.forward(&x).unwrap();
            let (dense, dense_macs) = layer.forward_apply_all(&x, out.cache.routing()).unwrap();
            let same = out
                .y
                .data()
                .iter()
                .zip(dense.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "trial {trial}");
            // sparse work is exactly E / |experts| of the dense work
            assert_eq!(
                out.macs * cfg.num_experts as u64,
                dense_macs * cfg.select as u64
            );
        }
    }

    #[test]
    fn exactly_e_distinct_experts_everywhere() {
        let mut rng = Rng::new(4);
        for select in 1..=4 {
            let layer = SmoeLayer::new(config(4, select, 1, 1, false), GateInit::Uniform, &mut rng)
                .unwrap();
            let r = layer.route().unwrap();
            for p in 0..r.plane_len() {
                let mut set: Vec<usize> = (0..select).map(|s| r.expert(s, p)).collect();
                set.sort_unstable();
                set.dedup();
                assert_eq!(set.len(), select);
                for s in 1..select {
                    assert!(r.score(s - 1, p) >= r.score(s, p));
                }
            }
        }
    }

    #[test]
    fn routing_is_input_independent() {
        let mut rng = Rng::new(5);
        let layer = SmoeLayer::new(config(3, 1, 1, 1, false), GateInit::Uniform, &mut rng).unwrap();
        let a = layer
            .forward(&random_input([1, 1, 6, 5], &mut rng))
            .unwrap();
        let b = layer
            .forward(&random_input([3, 1, 6, 5], &mut rng))
            .unwrap();
        assert_eq!(a.cache.routing(), b.cache.routing());
    }

    #[test]
    fn shifting_a_point_does_not_change_its_selection() {
        let mut rng = Rng::new(6);
        let layer = SmoeLayer::new(config(4, 2, 1, 1, false), GateInit::Uniform, &mut rng).unwrap();
        let before = layer.route().unwrap();
        let plane = 30;
        layer.gate().update(|d| {
            for e in 0..4 {
                d.data_mut()[e * plane + 7] += 5.5;
            }
        });
        let after = layer.route().unwrap();
        assert_eq!(before.selected(), after.selected());
    }

    #[test]
    fn damping_edge_cases() {
        let mut rng = Rng::new(7);
        let layer = SmoeLayer::new(config(3, 2, 1, 2, false), GateInit::Uniform, &mut rng).unwrap();
        let x = random_input([2, 2, 6, 5], &mut rng);
        let out = layer.forward(&x).unwrap();
        let dy = random_input(out.y.shape(), &mut rng);
        let plain = layer.backward(&dy, &out.cache, &Damping::NONE).unwrap();

        let all = vec![true; 2 * 30];
        let none = vec![false; 2 * 30];
        let unit = Damping {
            factor: 1.0,
            incorrect: Some(&all),
        };
        assert_eq!(layer.backward(&dy, &out.cache, &unit).unwrap(), plain);
        let unmasked = Damping {
            factor: 0.1,
            incorrect: Some(&none),
        };
        assert_eq!(layer.backward(&dy, &out.cache, &unmasked).unwrap(), plain);

        let zero = Damping {
            factor: 0.0,
            incorrect: Some(&all),
        };
        let g = layer.backward(&dy, &out.cache, &zero).unwrap();
        assert!(g.dkernels.data().iter().all(|&v| v == 0.0));
        assert!(g.dx.data().iter().all(|&v| v == 0.0));

        let short = vec![true; 3];
        let bad = Damping {
            factor: 0.5,
            incorrect: Some(&short),
        };
        assert!(layer.backward(&dy, &out.cache, &bad).is_err());
    }

    #[test]
    fn unselected_experts_get_no_gradient() {
        let mut rng = Rng::new(8);
        let layer = SmoeLayer::new(config(3, 1, 1, 1, false), GateInit::Uniform, &mut rng).unwrap();
        // route every point to expert 2
        layer.gate().update(|d| {
            for (k, v) in d.data_mut().iter_mut().enumerate() {
                *v = if k / 30 == 2 { 1.0 } else { 0.0 };
            }
        });
        let x = random_input([2, 1, 6, 5], &mut rng);
        let out = layer.forward(&x).unwrap();
        let dy = random_input(out.y.shape(), &mut rng);
        let g = layer.backward(&dy, &out.cache, &Damping::NONE).unwrap();
        assert!(g
            .dkernels
            .filter(0)
            .iter()
            .chain(g.dkernels.filter(1))
            .all(|&v| v == 0.0));
        assert!(g.dkernels.filter(2).iter().any(|&v| v != 0.0));
        assert!(g.dgate.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let mut rng = Rng::new(9);
        let layer = SmoeLayer::new(config(3, 1, 1, 1, false), GateInit::Uniform, &mut rng).unwrap();
        assert!(layer.forward(&Tensor::zeros([1, 1, 5, 5])).is_err());
        assert!(layer.forward(&Tensor::zeros([1, 2, 6, 5])).is_err());
    }

    #[test]
    fn shared_gate_binding() {
        let mut rng = Rng::new(10);
        let mut a = SmoeLayer::new(config(3, 1, 1, 1, true), GateInit::Uniform, &mut rng).unwrap();
        let mut b = SmoeLayer::new(config(3, 1, 2, 2, true), GateInit::Uniform, &mut rng).unwrap();
        let x_a = random_input([2, 1, 6, 5], &mut rng);
        let x_b = random_input([2, 2, 6, 5], &mut rng);

        let handle = gate_share_handle(&mut [&mut a, &mut b]).unwrap();
        handle.update(|d| d.data_mut()[0] = 42.0);
        assert_eq!(a.gate().logits().data()[0], 42.0);
        assert_eq!(b.gate().logits().data()[0], 42.0);

        let fa = a.forward(&x_a).unwrap();
        let fb = b.forward(&x_b).unwrap();
        let ga = a
            .backward(
                &random_input(fa.y.shape(), &mut rng),
                &fa.cache,
                &Damping::NONE,
            )
            .unwrap();
        let gb = b
            .backward(
                &random_input(fb.y.shape(), &mut rng),
                &fb.cache,
                &Damping::NONE,
            )
            .unwrap();
        a.gate().accumulate_grad(&ga.dgate).unwrap();
        b.gate().accumulate_grad(&gb.dgate).unwrap();
        let total = handle.take_grad();
        assert_eq!(total, ga.dgate.add(&gb.dgate).unwrap());

        let mut c = SmoeLayer::new(config(4, 1, 1, 1, true), GateInit::Uniform, &mut rng).unwrap();
        assert!(gate_share_handle(&mut [&mut a, &mut c]).is_err());

        let solo_before = c.gate().logits().clone();
        let solo = gate_share_handle(&mut [&mut c]).unwrap();
        assert!(solo.ptr_eq(c.gate()));
        assert_eq!(*c.gate().logits(), solo_before);
    }
}
