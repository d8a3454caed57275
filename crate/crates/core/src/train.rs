//! Training loop for the heat-diffusion task: one step wires forward, MSE,
//! RC labels, damped backward, gate losses and Adam together; `fit` adds the
//! epoch loop with plateau decay, early stopping and best-model selection.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::baselines::{ConvNet, LcnLayer};
use crate::error::{Error, Result};
use crate::heat::{stencil, HeatDataset, RegionMap, Split};
use crate::losses::{
    build_rc_labels_with, combine_aux, effective_gate, importance_grad, importance_loss, load_grad,
    load_loss, mse_loss, rc_loss, routing_noise, spatial_agreement_loss, AuxConfig, ErrorMagnitude,
};
use crate::metrics::{count_within_1pct, utilization_entropy};
use crate::optim::{adam_step, AdamState, PlateauSchedule};
use crate::rng::Rng;
use crate::smoe::{
    init_gate, Damping, GateInit, Normalization, RoutingRecord, SmoeConfig, SmoeLayer,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelKind {
    #[default]
    Smoe,
    Conv,
    Lcn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Smoe => "smoe",
            ModelKind::Conv => "conv",
            ModelKind::Lcn => "lcn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "smoe" => Some(ModelKind::Smoe),
            "conv" => Some(ModelKind::Conv),
            "lcn" => Some(ModelKind::Lcn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateInitMode {
    #[default]
    Uniform,
    /// From the dataset's region map.
    Perfect,
    /// Uniform draw, never trained.
    FixedRandom,
}

impl GateInitMode {
    pub fn name(self) -> &'static str {
        match self {
            GateInitMode::Uniform => "uniform",
            GateInitMode::Perfect => "perfect",
            GateInitMode::FixedRandom => "fixed_random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(GateInitMode::Uniform),
            "perfect" => Some(GateInitMode::Perfect),
            "fixed_random" => Some(GateInitMode::FixedRandom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpertInitMode {
    #[default]
    Random,
    /// Each expert starts as its region type's true stencil.
    Perfect,
}

impl ExpertInitMode {
    pub fn name(self) -> &'static str {
        match self {
            ExpertInitMode::Random => "random",
            ExpertInitMode::Perfect => "perfect",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(ExpertInitMode::Random),
            "perfect" => Some(ExpertInitMode::Perfect),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Freeze {
    pub gate: bool,
    pub experts: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub num_experts: usize,
    pub select: usize,
    pub expert_bias: bool,
    pub normalization: Normalization,
    pub conv_depth: usize,
    pub conv_width: usize,

    pub batch_size: usize,
    pub lr: f32,
    pub plateau_patience: usize,
    pub lr_decay: f32,
    pub early_stop_patience: usize,
    pub max_epochs: usize,

    pub q: f64,
    pub damping_factor: f32,
    pub rc_enabled: bool,
    pub damping_enabled: bool,
    pub error_magnitude: ErrorMagnitude,
    pub aux: AuxConfig,
    pub weighted: bool,
    pub freeze: Freeze,
    pub gate_init: GateInitMode,
    pub expert_init: ExpertInitMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Smoe,
            num_experts: 3,
            select: 1,
            expert_bias: false,
            normalization: Normalization::None,
            conv_depth: 3,
            conv_width: 12,
            batch_size: 32,
            lr: 1e-3,
            plateau_patience: 15,
            lr_decay: 10.0,
            early_stop_patience: 30,
            max_epochs: 50,
            q: 0.7,
            damping_factor: 0.1,
            rc_enabled: true,
            damping_enabled: true,
            error_magnitude: ErrorMagnitude::Absolute,
            aux: AuxConfig::default(),
            weighted: false,
            freeze: Freeze::default(),
            gate_init: GateInitMode::Uniform,
            expert_init: ExpertInitMode::Random,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be positive"));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid("patience values must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr {} must be > 0", self.lr)));
        }
        if !(self.lr_decay > 1.0) {
            return Err(Error::invalid(format!(
                "lr_decay {} must be > 1",
                self.lr_decay
            )));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::invalid(format!("q {} outside (0, 1)", self.q)));
        }
        if !(0.0..=1.0).contains(&self.damping_factor) {
            return Err(Error::invalid(format!(
                "damping_factor {} outside [0, 1]",
                self.damping_factor
            )));
        }
        self.aux.validate()?;
        if self.model == ModelKind::Smoe && (self.select == 0 || self.select > self.num_experts) {
            return Err(Error::invalid(format!(
                "cannot select {} of {} experts",
                self.select, self.num_experts
            )));
        }
        Ok(())
    }
}

/// A trainable model for the heat task.
#[derive(Debug)]
pub enum Model {
    Smoe(SmoeLayer),
    Conv(ConvNet),
    Lcn(LcnLayer),
}

impl Model {
    /// Builds and initialises the model described by `cfg` for grids shaped like `map`.
    pub fn build(cfg: &TrainConfig, map: &RegionMap, rng: &mut Rng) -> Result<Model> {
        let (h, w) = (map.height(), map.width());
        match cfg.model {
            ModelKind::Smoe => {
                let scfg = SmoeConfig {
                    num_experts: cfg.num_experts,
                    select: cfg.select,
                    expert_out: 1,
                    in_channels: 1,
                    height: h,
                    width: w,
                    weighted: cfg.weighted,
                    bias: cfg.expert_bias,
                    normalization: cfg.normalization,
                };
                let mode = match cfg.gate_init {
                    GateInitMode::Uniform => GateInit::Uniform,
                    GateInitMode::Perfect => GateInit::FromMap(map),
                    GateInitMode::FixedRandom => GateInit::FixedRandom,
                };
                let mut layer = SmoeLayer::new(scfg, mode, rng)?;
                if cfg.expert_init == ExpertInitMode::Perfect {
                    perfect_experts(&mut layer, map)?;
                }
                if cfg.freeze.gate {
                    layer.gate().set_frozen(true);
                }
                layer.set_experts_frozen(cfg.freeze.experts);
                Ok(Model::Smoe(layer))
            }
            ModelKind::Conv => Ok(Model::Conv(ConvNet::new(
                1,
                cfg.conv_depth,
                cfg.conv_width,
                rng,
            )?)),
            ModelKind::Lcn => Ok(Model::Lcn(LcnLayer::new(h, w, 1, rng)?)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Smoe(_) => ModelKind::Smoe,
            Model::Conv(_) => ModelKind::Conv,
            Model::Lcn(_) => ModelKind::Lcn,
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Model::Smoe(l) => Ok(l.forward(x)?.y),
            Model::Conv(n) => Ok(n.forward(x)?.0),
            Model::Lcn(l) => l.forward(x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Model::Smoe(l) => {
                let (experts, gate) = l.param_count();
                experts + gate
            }
            Model::Conv(n) => n.param_count(),
            Model::Lcn(l) => l.param_count(),
        }
    }

    /// Independent copy; an SMoE gate is deep-cloned.
    pub fn snapshot(&self) -> Model {
        match self {
            Model::Smoe(l) => Model::Smoe(l.snapshot()),
            Model::Conv(n) => Model::Conv(n.clone()),
            Model::Lcn(l) => Model::Lcn(l.clone()),
        }
    }

    pub fn as_smoe(&self) -> Option<&SmoeLayer> {
        match self {
            Model::Smoe(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_smoe_mut(&mut self) -> Option<&mut SmoeLayer> {
        match self {
            Model::Smoe(l) => Some(l),
            _ => None,
        }
    }

    pub fn routing(&self) -> Result<Option<RoutingRecord>> {
        self.as_smoe().map(SmoeLayer::route).transpose()
    }

    fn param_lens(&self) -> Vec<usize> {
        match self {
            Model::Smoe(l) => {
                let mut lens = vec![l.kernels().data().len()];
                if let Some(b) = l.bias() {
                    lens.push(b.len());
                }
                lens.push(l.gate().logits().len());
                lens
            }
            Model::Conv(n) => n
                .layers()
                .iter()
                .flat_map(|(w, b)| [w.data().len(), b.len()])
                .collect(),
            Model::Lcn(l) => vec![l.kernels().len(), l.bias().len()],
        }
    }
}

fn check_perfect(layer: &SmoeLayer, map: &RegionMap) -> Result<()> {
    let cfg = layer.config();
    if cfg.num_experts < map.num_types() {
        return Err(Error::invalid(format!(
            "{} region types need at least as many experts, have {}",
            map.num_types(),
            cfg.num_experts
        )));
    }
    if cfg.expert_out != 1 || cfg.in_channels != 1 {
        return Err(Error::invalid(
            "perfect initialisation needs single-channel experts",
        ));
    }
    if cfg.height != map.height() || cfg.width != map.width() {
        return Err(Error::shape(
            "perfect_init",
            format!(
                "layer {}x{} vs map {}x{}",
                cfg.height,
                cfg.width,
                map.height(),
                map.width()
            ),
        ));
    }
    Ok(())
}

/// Expert `e` becomes the stencil of region type `e % num_types`; biases are zeroed.
pub fn perfect_experts(layer: &mut SmoeLayer, map: &RegionMap) -> Result<()> {
    check_perfect(layer, map)?;
    let types = map.num_types();
    for e in 0..layer.config().num_experts {
        layer
            .kernels_mut()
            .kernel_mut(e, 0)
            .copy_from_slice(&stencil(map.diffusivities()[e % types]));
    }
    if let Some(b) = layer.bias_mut() {
        b.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

/// Gate set from the region map.
pub fn perfect_gate(layer: &mut SmoeLayer, map: &RegionMap) -> Result<()> {
    check_perfect(layer, map)?;
    let cfg = *layer.config();
    let init = init_gate(
        cfg.num_experts,
        cfg.select,
        cfg.expert_out,
        cfg.height,
        cfg.width,
        GateInit::FromMap(map),
        &mut Rng::new(0),
    )?;
    layer.gate().set_logits(init.logits)
}

/// Both experts and gate set to the true solution.
pub fn perfect_init(layer: &mut SmoeLayer, map: &RegionMap) -> Result<()> {
    perfect_experts(layer, map)?;
    perfect_gate(layer, map)
}

/// Losses from one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub mse: f32,
    pub rc_loss: f32,
    pub aux_loss: f32,
    /// Slots judged misrouted (0 when no labels were built).
    pub incorrect: usize,
}

/// A model plus its optimizer state.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    states: Vec<AdamState>,
    lr: f32,
    noise_rng: Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: Model) -> Result<Self> {
        cfg.validate()?;
        if let Model::Smoe(l) = &model {
            if l.config().out_channels() != 1 {
                return Err(Error::invalid(
                    "the heat task needs a single output channel (E * F = 1)",
                ));
            }
        }
        let states = model.param_lens().into_iter().map(AdamState::new).collect();
        Ok(Trainer {
            lr: cfg.lr,
            noise_rng: Rng::new(cfg.seed).fork(2),
            cfg,
            model,
            states,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn train_step(&mut self, x: &Tensor, y: &Tensor) -> Result<StepReport> {
        let Trainer {
            cfg,
            model,
            states,
            lr,
            noise_rng,
        } = self;
        let lr = *lr;
        match model {
            Model::Smoe(layer) => smoe_step(cfg, layer, states, lr, noise_rng, x, y),
            Model::Conv(net) => {
                let (pred, cache) = net.forward(x)?;
                let (mse, dy) = finite_mse(&pred, y)?;
                let grads = net.backward(&dy, &cache)?;
                for ((w, b), ((dw, db), st)) in net
                    .layers_mut()
                    .iter_mut()
                    .zip(grads.layers.iter().zip(states.chunks_mut(2)))
                {
                    adam_step(w.data_mut(), dw.data(), &mut st[0], lr, false)?;
                    adam_step(b, db, &mut st[1], lr, false)?;
                }
                Ok(StepReport {
                    mse,
                    rc_loss: 0.0,
                    aux_loss: 0.0,
                    incorrect: 0,
                })
            }
            Model::Lcn(layer) => {
                let pred = layer.forward(x)?;
                let (mse, dy) = finite_mse(&pred, y)?;
                let grads = layer.backward(&dy, x)?;
                adam_step(
                    layer.kernels_mut(),
                    &grads.dkernels,
                    &mut states[0],
                    lr,
                    false,
                )?;
                adam_step(layer.bias_mut(), &grads.dbias, &mut states[1], lr, false)?;
                Ok(StepReport {
                    mse,
                    rc_loss: 0.0,
                    aux_loss: 0.0,
                    incorrect: 0,
                })
            }
        }
    }
}

fn finite_mse(pred: &Tensor, y: &Tensor) -> Result<(f32, Tensor)> {
    let (mse, dy) = mse_loss(pred, y)?;
    if !mse.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    Ok((mse, dy))
}

fn smoe_step(
    cfg: &TrainConfig,
    layer: &mut SmoeLayer,
    states: &mut [AdamState],
    lr: f32,
    noise_rng: &mut Rng,
    x: &Tensor,
    y: &Tensor,
) -> Result<StepReport> {
    let clean = layer.gate().logits().clone();
    let noisy = routing_noise(&clean, cfg.aux.noise_std, noise_rng)?;
    let fwd = layer.forward_with_logits(x, noisy)?;
    let (mse, dy) = finite_mse(&fwd.y, y)?;

    let labels = if cfg.rc_enabled || cfg.damping_enabled {
        Some(build_rc_labels_with(
            &dy,
            fwd.cache.routing(),
            cfg.q,
            cfg.error_magnitude,
        )?)
    } else {
        None
    };
    let damping = match (&labels, cfg.damping_enabled) {
        (Some(l), true) => Damping {
            factor: cfg.damping_factor,
            incorrect: Some(&l.incorrect),
        },
        _ => Damping::NONE,
    };
    let grads = layer.backward(&dy, &fwd.cache, &damping)?;

    let mut rc_value = 0.0;
    let mut dgate = match (&labels, cfg.rc_enabled) {
        (Some(l), true) => {
            let (v, g) = rc_loss(&clean, l)?;
            rc_value = v;
            g
        }
        _ if cfg.weighted => grads.dgate.clone(),
        _ => Tensor::zeros(clean.shape()),
    };
    let (aux_value, aux_grad) = aux_terms(
        cfg,
        layer,
        &clean,
        fwd.cache.logits(),
        fwd.cache.routing(),
        x.batch(),
    )?;
    if let Some(g) = aux_grad {
        dgate = dgate.add(&g)?;
    }
    dgate.ensure_finite("gate gradient")?;

    let experts_frozen = cfg.freeze.experts || layer.experts_frozen();
    adam_step(
        layer.kernels_mut().data_mut(),
        grads.dkernels.data(),
        &mut states[0],
        lr,
        experts_frozen,
    )?;
    let mut next = 1;
    if let (Some(b), Some(db)) = (layer.bias_mut(), grads.dbias.as_ref()) {
        adam_step(b, db, &mut states[1], lr, experts_frozen)?;
        next = 2;
    }
    let gate_frozen = cfg.freeze.gate || layer.gate().is_frozen();
    let gate_state = &mut states[next];
    layer
        .gate()
        .update(|d| adam_step(d.data_mut(), dgate.data(), gate_state, lr, gate_frozen))?;

    Ok(StepReport {
        mse,
        rc_loss: rc_value,
        aux_loss: aux_value,
        incorrect: labels.as_ref().map_or(0, |l| l.num_incorrect()),
    })
}

/// Combined auxiliary loss and its gradient on the gate logits.
fn aux_terms(
    cfg: &TrainConfig,
    layer: &SmoeLayer,
    clean: &Tensor,
    noisy: &Tensor,
    routing: &RoutingRecord,
    batch: usize,
) -> Result<(f32, Option<Tensor>)> {
    let aux = &cfg.aux;
    if !aux.any_enabled() {
        return Ok((0.0, None));
    }
    let norm = layer.config().normalization;
    let scale = aux.aux_scale / aux.enabled_count() as f32;
    let plane = routing.plane_len();
    let mut values = Vec::new();
    let mut dgate = Tensor::zeros(clean.shape());

    let gate = effective_gate(routing);
    if aux.use_importance {
        values.push(importance_loss(&gate)?.value);
        let g = importance_grad(&gate)?;
        // only selected entries depend on the scores
        let mut dscores = Tensor::zeros(clean.shape());
        for s in 0..routing.select() {
            for p in 0..plane {
                let at = routing.expert(s, p) * plane + p;
                dscores.data_mut()[at] = scale * g.data()[at];
            }
        }
        dgate = dgate.add(&norm.backward(noisy, &dscores))?;
    }
    if aux.use_load {
        let scores = norm.apply(clean);
        values.push(load_loss(&scores, routing, aux.noise_std)?.value);
        let g = load_grad(&scores, routing, aux.noise_std)?.mul_scalar(scale);
        dgate = dgate.add(&norm.backward(clean, &g))?;
    }
    if aux.use_spatial_agreement {
        // every sample shares the routing tensor, so the loss and its gradient vanish
        let value = if batch >= 2 {
            let mut per_sample = Vec::with_capacity(batch * gate.len());
            for _ in 0..batch {
                per_sample.extend_from_slice(gate.data());
            }
            let [_, e, h, w] = gate.shape();
            spatial_agreement_loss(&Tensor::from_vec([batch, e, h, w], per_sample)?)?
        } else {
            0.0
        };
        values.push(value);
    }
    Ok((combine_aux(&values, aux), Some(dgate)))
}

/// Accuracy and error over one split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub pct_within_1: f64,
    pub mse: f64,
    pub samples: usize,
}

const EVAL_CHUNK: usize = 64;

pub fn evaluate(model: &Model, dataset: &HeatDataset, split: Split) -> Result<EvalReport> {
    let range = dataset.split_range(split);
    evaluate_indices(model, dataset, &range.collect::<Vec<_>>())
}

pub fn evaluate_indices(
    model: &Model,
    dataset: &HeatDataset,
    indices: &[usize],
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let mut within = 0usize;
    let mut sq = 0.0f64;
    let mut total = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = dataset.batch(chunk);
        let pred = model.predict(&x)?;
        within += count_within_1pct(pred.data(), y.data());
        sq += pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &t)| (p as f64 - t as f64) * (p as f64 - t as f64))
            .sum::<f64>();
        total += pred.len();
    }
    let mse = sq / total as f64;
    if !mse.is_finite() {
        return Err(Error::NonFinite("evaluation"));
    }
    Ok(EvalReport {
        pct_within_1: 100.0 * within as f64 / total as f64,
        mse,
        samples: indices.len(),
    })
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_pct: f64,
    pub val_mse: f64,
    /// Learning rate used during the epoch.
    pub lr: f32,
    pub rc_loss: f64,
    pub aux_loss: f64,
    pub utilization: Vec<usize>,
    pub utilization_entropy: f64,
    /// Points whose selected expert set changed since the previous epoch.
    pub routing_changes: usize,
    pub improved: bool,
}

#[derive(Debug)]
pub struct FitResult {
    /// Model at the best validation epoch (epoch 0 is the initial model).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub initial_val_pct: f64,
    pub best_epoch: usize,
    pub best_val_pct: f64,
    pub stopped_early: bool,
}

/// Builds the model described by `cfg` and trains it.
pub fn fit(dataset: &HeatDataset, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    let mut init_rng = Rng::new(cfg.seed).fork(0);
    let model = Model::build(cfg, dataset.region_map(), &mut init_rng)?;
    fit_model(dataset, cfg, model)
}

/// Trains an already built model.
pub fn fit_model(dataset: &HeatDataset, cfg: &TrainConfig, model: Model) -> Result<FitResult> {
    fit_with(dataset, cfg, model, |_, _| {})
}

/// [`fit_model`] with a callback after every epoch.
pub fn fit_with(
    dataset: &HeatDataset,
    cfg: &TrainConfig,
    model: Model,
    mut on_epoch: impl FnMut(&EpochRecord, &Model),
) -> Result<FitResult> {
    let train = dataset.split_range(Split::Train);
    if train.is_empty() || dataset.split_range(Split::Val).is_empty() {
        return Err(Error::invalid(
            "training needs non-empty train and validation splits",
        ));
    }
    let mut trainer = Trainer::new(*cfg, model)?;
    let mut schedule = PlateauSchedule::new(
        cfg.lr,
        cfg.lr_decay,
        cfg.plateau_patience,
        cfg.early_stop_patience,
    )?;
    let mut shuffle_rng = Rng::new(cfg.seed).fork(1);

    let initial = evaluate(trainer.model(), dataset, Split::Val)?;
    schedule.observe(initial.pct_within_1);
    let mut best = trainer.model().snapshot();
    let mut best_epoch = 0;
    let mut prev_routing = trainer.model().routing()?;
    let mut order: Vec<usize> = train.collect();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        trainer.set_lr(lr);
        shuffle_rng.shuffle(&mut order);
        let (mut mse, mut rc, mut aux) = (0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = dataset.batch(chunk);
            let step = trainer.train_step(&x, &y)?;
            mse += step.mse as f64;
            rc += step.rc_loss as f64;
            aux += step.aux_loss as f64;
            batches += 1;
        }
        let n = batches as f64;
        let val = evaluate(trainer.model(), dataset, Split::Val)?;
        let routing = trainer.model().routing()?;
        let (utilization, entropy, changes) = match (&routing, &prev_routing) {
            (Some(r), Some(prev)) => (
                r.utilization(),
                utilization_entropy(r),
                r.changed_points(prev),
            ),
            _ => (Vec::new(), 0.0, 0),
        };
        prev_routing = routing;

        let decision = schedule.observe(val.pct_within_1);
        if decision.improved {
            best = trainer.model().snapshot();
            best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            train_mse: mse / n,
            val_pct: val.pct_within_1,
            val_mse: val.mse,
            lr,
            rc_loss: rc / n,
            aux_loss: aux / n,
            utilization,
            utilization_entropy: entropy,
            routing_changes: changes,
            improved: decision.improved,
        };
        on_epoch(&record, trainer.model());
        history.push(record);
        if decision.stop {
            stopped_early = true;
            break;
        }
    }

    Ok(FitResult {
        model: best,
        history,
        initial_val_pct: initial.pct_within_1,
        best_epoch,
        best_val_pct: schedule.best(),
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heat::{generate_dataset, generate_region_map, DropConfig, BENCHMARK_DIFFUSIVITIES};

    fn tiny_dataset(seed: u64) -> HeatDataset {
        let mut rng = Rng::new(seed);
        let map = generate_region_map(12, 12, &BENCHMARK_DIFFUSIVITIES, &mut rng).unwrap();
        generate_dataset(&map, 20, 5, DropConfig::default(), &mut rng).unwrap()
    }

    fn smoe_trainer(cfg: TrainConfig, data: &HeatDataset) -> Trainer {
        let model = Model::build(&cfg, data.region_map(), &mut Rng::new(cfg.seed)).unwrap();
        Trainer::new(cfg, model).unwrap()
    }

    #[test]
    fn without_rc_an_unweighted_gate_never_moves() {
        let data = tiny_dataset(1);
        let cfg = TrainConfig {
            rc_enabled: false,
            damping_enabled: false,
            ..TrainConfig::default()
        };
        let mut t = smoe_trainer(cfg, &data);
        let before = t.model().as_smoe().unwrap().gate().logits().clone();
        let (x, y) = data.batch(&[0, 1, 2, 3, 4, 5, 6, 7]);
        for _ in 0..5 {
            t.train_step(&x, &y).unwrap();
        }
        assert_eq!(*t.model().as_smoe().unwrap().gate().logits(), before);
    }

    #[test]
    fn unit_damping_matches_no_damping() {
        let data = tiny_dataset(2);
        let base = TrainConfig {
            rc_enabled: false,
            ..TrainConfig::default()
        };
        let mut a = smoe_trainer(
            TrainConfig {
                damping_enabled: false,
                ..base
            },
            &data,
        );
        let mut b = smoe_trainer(
            TrainConfig {
                damping_enabled: true,
                damping_factor: 1.0,
                ..base
            },
            &data,
        );
        let (x, y) = data.batch(&[3, 4, 5, 6]);
        for _ in 0..3 {
            a.train_step(&x, &y).unwrap();
            b.train_step(&x, &y).unwrap();
        }
        let (la, lb) = (a.model().as_smoe().unwrap(), b.model().as_smoe().unwrap());
        assert_eq!(la.kernels(), lb.kernels());
    }

    #[test]
    fn one_step_reduces_batch_mse() {
        let data = tiny_dataset(3);
        for model in [ModelKind::Smoe, ModelKind::Conv, ModelKind::Lcn] {
            let cfg = TrainConfig {
                model,
                ..TrainConfig::default()
            };
            let mut t = smoe_trainer(cfg, &data);
            let (x, y) = data.batch(&[0, 5, 10, 15]);
            let before = mse_loss(&t.model().predict(&x).unwrap(), &y).unwrap().0;
            t.train_step(&x, &y).unwrap();
            let after = mse_loss(&t.model().predict(&x).unwrap(), &y).unwrap().0;
            assert!(after < before, "{model:?}: {after} >= {before}");
        }
    }

    #[test]
    fn perfect_model_is_exact_without_training() {
        let data = tiny_dataset(4);
        let cfg = TrainConfig {
            gate_init: GateInitMode::Perfect,
            expert_init: ExpertInitMode::Perfect,
            ..TrainConfig::default()
        };
        let model = Model::build(&cfg, data.region_map(), &mut Rng::new(0)).unwrap();
        assert_eq!(
            evaluate(&model, &data, Split::Test).unwrap().pct_within_1,
            100.0
        );
    }

    #[test]
    fn perfect_init_is_idempotent() {
        let data = tiny_dataset(5);
        let map = data.region_map();
        let mut layer = SmoeLayer::new(
            SmoeConfig::heat(12, 12),
            GateInit::Uniform,
            &mut Rng::new(1),
        )
        .unwrap();
        perfect_init(&mut layer, map).unwrap();
        let once = (layer.kernels().clone(), layer.gate().logits().clone());
        perfect_init(&mut layer, map).unwrap();
        assert_eq!(
            (layer.kernels().clone(), layer.gate().logits().clone()),
            once
        );

        let mut small = SmoeLayer::new(
            SmoeConfig {
                num_experts: 2,
                ..SmoeConfig::heat(12, 12)
            },
            GateInit::Uniform,
            &mut Rng::new(1),
        )
        .unwrap();
        assert!(perfect_init(&mut small, map).is_err());
    }

    #[test]
    fn fit_is_deterministic_and_keeps_the_best() {
        let data = tiny_dataset(6);
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = fit(&data, &cfg).unwrap();
        let b = fit(&data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
        let best = evaluate(&a.model, &data, Split::Val).unwrap().pct_within_1;
        assert!((best - a.best_val_pct).abs() < 1e-9);
        assert!(a.history.iter().all(|r| r.val_pct <= a.best_val_pct + 1e-9));
    }

    #[test]
    fn fit_rejects_empty_splits_and_bad_config() {
        let mut rng = Rng::new(7);
        let map = generate_region_map(8, 8, &BENCHMARK_DIFFUSIVITIES, &mut rng).unwrap();
        let data = generate_dataset(&map, 2, 2, DropConfig::default(), &mut rng).unwrap();
        assert!(fit(&data, &TrainConfig::default()).is_err());

        let ok = tiny_dataset(8);
        for bad in [
            TrainConfig {
                q: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                damping_factor: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                plateau_patience: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                select: 2,
                ..TrainConfig::default()
            },
        ] {
            assert!(fit(&ok, &bad).is_err());
        }
    }

    #[test]
    fn frozen_groups_stay_put() {
        let data = tiny_dataset(9);
        let cfg = TrainConfig {
            freeze: Freeze {
                gate: true,
                experts: true,
            },
            ..TrainConfig::default()
        };
        let mut t = smoe_trainer(cfg, &data);
        let layer = t.model().as_smoe().unwrap();
        let before = (layer.kernels().clone(), layer.gate().logits().clone());
        let (x, y) = data.batch(&[1, 2, 3]);
        t.train_step(&x, &y).unwrap();
        let layer = t.model().as_smoe().unwrap();
        assert_eq!(
            (layer.kernels().clone(), layer.gate().logits().clone()),
            before
        );
    }

    #[test]
    fn aux_losses_run_and_touch_only_the_gate() {
        let data = tiny_dataset(10);
        let cfg = TrainConfig {
            rc_enabled: false,
            damping_enabled: false,
            aux: AuxConfig {
                use_importance: true,
                use_load: true,
                use_spatial_agreement: true,
                noise_std: 0.5,
                aux_scale: 0.01,
            },
            ..TrainConfig::default()
        };
        let mut t = smoe_trainer(cfg, &data);
        let before = t.model().as_smoe().unwrap().gate().logits().clone();
        let (x, y) = data.batch(&[0, 1, 2, 3]);
        let r = t.train_step(&x, &y).unwrap();
        assert!(r.aux_loss.is_finite() && r.aux_loss >= 0.0);
        assert_ne!(*t.model().as_smoe().unwrap().gate().logits(), before);
    }
}
