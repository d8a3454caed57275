#![allow(dead_code)]

use smoe_core::heat::{
    generate_dataset, generate_region_map, DropConfig, HeatDataset, BENCHMARK_DIFFUSIVITIES,
};
use smoe_core::train::{perfect_init, Model, ModelKind, TrainConfig};
use smoe_core::Rng;

/// 16x16 map, 10 trajectories of 4 steps.
pub fn small_dataset(seed: u64) -> HeatDataset {
    let base = Rng::new(seed);
    let map = generate_region_map(16, 16, &BENCHMARK_DIFFUSIVITIES, &mut base.fork(0)).unwrap();
    let drops = DropConfig {
        count: 6,
        magnitude: 1.0,
    };
    generate_dataset(&map, 10, 4, drops, &mut base.fork(1)).unwrap()
}

pub fn model(kind: ModelKind, data: &HeatDataset, seed: u64) -> Model {
    let cfg = TrainConfig {
        model: kind,
        expert_bias: true,
        ..TrainConfig::default()
    };
    Model::build(&cfg, data.region_map(), &mut Rng::new(seed)).unwrap()
}

pub fn perfect_smoe(data: &HeatDataset) -> Model {
    let mut m = model(ModelKind::Smoe, data, 0);
    if let Model::Smoe(layer) = &mut m {
        perfect_init(layer, data.region_map()).unwrap();
    }
    m
}

pub fn params(model: &Model) -> Vec<f32> {
    match model {
        Model::Smoe(l) => {
            let mut v = l.kernels().data().to_vec();
            v.extend_from_slice(l.bias().unwrap_or(&[]));
            v.extend_from_slice(l.gate().logits().data());
            v
        }
        Model::Conv(n) => n
            .layers()
            .iter()
            .flat_map(|(w, b)| w.data().iter().chain(b).copied().collect::<Vec<_>>())
            .collect(),
        Model::Lcn(l) => l.kernels().iter().chain(l.bias()).copied().collect(),
    }
}
