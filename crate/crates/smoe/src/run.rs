//! Experiment runs: dataset generation, training with artifacts, evaluation
//! and the ablation matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use smoe_core::heat::{HeatDataset, Preset, Split};
use smoe_core::metrics::routing_agreement;
use smoe_core::train::{evaluate, fit_with, EvalReport, FitResult, Model};
use smoe_core::Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{Result, SmoeError};
use crate::export;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "SMOE_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.smck";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const MATRIX_FILE: &str = "matrix.csv";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Where a training run writes: the explicit directory, else the config's
/// `out_dir` (relative paths under the output root), else a name derived
/// from the model and seed under the output root.
pub fn resolve_out_dir(explicit: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match &cfg.out_dir {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => output_root().join(p),
        None => output_root().join(format!("{}-seed{}", cfg.train.model.name(), cfg.train.seed)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSummary {
    pub height: usize,
    pub width: usize,
    pub pairs: usize,
    pub diffusivities: Vec<f32>,
    pub region_sizes: Vec<usize>,
}

impl DataSummary {
    pub fn of(data: &HeatDataset) -> Self {
        let map = data.region_map();
        DataSummary {
            height: map.height(),
            width: map.width(),
            pairs: data.len(),
            diffusivities: map.diffusivities().to_vec(),
            region_sizes: map.region_sizes(),
        }
    }
}

impl std::fmt::Display for DataSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "grid {}x{}, {} pairs",
            self.height, self.width, self.pairs
        )?;
        for (t, (a, n)) in self
            .diffusivities
            .iter()
            .zip(&self.region_sizes)
            .enumerate()
        {
            writeln!(f, "region {t}: diffusivity {a}, {n} cells")?;
        }
        Ok(())
    }
}

pub fn gen_data(preset: Preset, seed: u64, out: &Path) -> Result<DataSummary> {
    let data = preset.generate(seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| SmoeError::io(parent, e))?;
    }
    dataset::write(out, &data)?;
    Ok(DataSummary::of(&data))
}

/// Loads the dataset file or, without one, generates the configured preset.
pub fn load_data(path: Option<&Path>, cfg: &RunConfig) -> Result<HeatDataset> {
    match path {
        Some(p) => dataset::read(p),
        None => Ok(cfg.preset.generate(cfg.data_seed)?),
    }
}

/// Final numbers of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub model: String,
    pub param_count: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub initial_val_pct: f64,
    pub best_val_pct: f64,
    pub test_pct: f64,
    pub test_mse: f64,
    /// Best-assignment agreement of the routing map with the region map.
    pub routing_agreement: Option<f64>,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model = {}", self.model);
        let _ = writeln!(out, "param_count = {}", self.param_count);
        let _ = writeln!(out, "epochs_run = {}", self.epochs_run);
        let _ = writeln!(out, "best_epoch = {}", self.best_epoch);
        let _ = writeln!(out, "stopped_early = {}", self.stopped_early);
        let _ = writeln!(out, "initial_val_pct = {}", self.initial_val_pct);
        let _ = writeln!(out, "best_val_pct = {}", self.best_val_pct);
        let _ = writeln!(out, "test_pct = {}", self.test_pct);
        let _ = writeln!(out, "test_mse = {}", self.test_mse);
        if let Some(a) = self.routing_agreement {
            let _ = writeln!(out, "routing_agreement = {a}");
        }
        out
    }
}

/// Agreement of an SMoE's routing with the dataset's region map.
pub fn model_agreement(model: &Model, data: &HeatDataset) -> Result<Option<f64>> {
    let Some(routing) = model.routing()? else {
        return Ok(None);
    };
    let map = data.region_map();
    if routing.height() != map.height() || routing.width() != map.width() {
        return Err(SmoeError::Mismatch(format!(
            "routing map is {}x{}, region map {}x{}",
            routing.height(),
            routing.width(),
            map.height(),
            map.width()
        )));
    }
    let (frac, _) = routing_agreement(
        routing.winners(),
        routing.num_experts(),
        map.grid(),
        map.num_types(),
    )?;
    Ok(Some(frac))
}

#[derive(Debug)]
pub struct RunOutcome {
    pub fit: FitResult,
    pub report: MetricReport,
    pub out_dir: PathBuf,
}

/// Trains per `cfg`, then writes the effective config, best checkpoint,
/// history and report into `out_dir`. `log` receives one line per epoch.
pub fn train(
    cfg: &RunConfig,
    data: &HeatDataset,
    out_dir: &Path,
    mut log: impl FnMut(&str),
) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| SmoeError::io(out_dir, e))?;
    let settings = cfg.to_text();
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, &settings).map_err(|e| SmoeError::io(&config_path, e))?;

    let mut rng = Rng::new(cfg.train.seed).fork(0);
    let model = Model::build(&cfg.train, data.region_map(), &mut rng)?;
    let fit = fit_with(data, &cfg.train, model, |r, _| {
        log(&format!(
            "epoch {:>3}  train_mse {:.3e}  val {:>7.3}%  lr {:.0e}  rc {:.4}  changes {}{}",
            r.epoch,
            r.train_mse,
            r.val_pct,
            r.lr,
            r.rc_loss,
            r.routing_changes,
            if r.improved { "  *" } else { "" }
        ))
    })?;

    let test: EvalReport = evaluate(&fit.model, data, Split::Test)?;
    let report = MetricReport {
        model: cfg.train.model.name().to_string(),
        param_count: fit.model.param_count(),
        epochs_run: fit.history.last().map_or(0, |r| r.epoch),
        best_epoch: fit.best_epoch,
        stopped_early: fit.stopped_early,
        initial_val_pct: fit.initial_val_pct,
        best_val_pct: fit.best_val_pct,
        test_pct: test.pct_within_1,
        test_mse: test.mse,
        routing_agreement: model_agreement(&fit.model, data)?,
    };

    let mut meta = BTreeMap::new();
    meta.insert("best_epoch".to_string(), fit.best_epoch.to_string());
    meta.insert("seed".to_string(), cfg.train.seed.to_string());
    checkpoint::write(&out_dir.join(CHECKPOINT_FILE), &fit.model, &meta)?;
    let history_path = out_dir.join(HISTORY_FILE);
    fs::write(&history_path, export::history_csv(&settings, &fit.history))
        .map_err(|e| SmoeError::io(&history_path, e))?;
    let report_path = out_dir.join(REPORT_FILE);
    fs::write(&report_path, report.to_text()).map_err(|e| SmoeError::io(&report_path, e))?;
    Ok(RunOutcome {
        fit,
        report,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Parses `key=v1,v2,...` matrix axes; `on`/`off` are accepted as booleans.
pub fn parse_axes<S: AsRef<str>>(specs: &[S]) -> Result<Vec<(String, Vec<String>)>> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for spec in specs {
        let spec = spec.as_ref();
        let (k, vs) = spec
            .split_once('=')
            .ok_or_else(|| SmoeError::config(format!("matrix axis {spec:?} is not key=v1,v2")))?;
        let key = match k.trim() {
            "rc" => "rc_enabled",
            "damping" => "damping_enabled",
            other => other,
        };
        if !RunConfig::KEYS.contains(&key) {
            return Err(SmoeError::config(format!("matrix axis {key}: unknown key")));
        }
        if axes.iter().any(|(a, _)| a == key) {
            return Err(SmoeError::config(format!("matrix axis {key} given twice")));
        }
        let values: Vec<String> = vs
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(SmoeError::config(format!(
                "matrix axis {key} has no values"
            )));
        }
        axes.push((key.to_string(), values));
    }
    Ok(axes)
}

/// One matrix cell: `(key, value)` per axis.
pub type Cell = Vec<(String, String)>;

/// Every combination of axis values, first axis varying slowest.
pub fn cells(axes: &[(String, Vec<String>)]) -> Vec<Cell> {
    let mut out = vec![Vec::new()];
    for (k, vs) in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                vs.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    out
}

/// Runs every cell of the matrix in its own subdirectory and writes a summary
/// table with one row per cell.
///
/// Cells that switch RC off use the weighted layer unless `weighted` is an
/// axis itself, so the gate keeps a gradient path.
pub fn matrix(
    base: &RunConfig,
    axes: &[(String, Vec<String>)],
    data: &HeatDataset,
    out_dir: &Path,
    mut log: impl FnMut(&str),
) -> Result<Vec<(Cell, MetricReport)>> {
    let combos = cells(axes);
    let mut configs = Vec::with_capacity(combos.len());
    for cell in &combos {
        let mut cfg = base.clone();
        let overrides: Vec<String> = cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
        cfg.apply_overrides(&overrides)?;
        let rc_axis = cell.iter().any(|(k, _)| k == "rc_enabled");
        let weighted_axis = cell.iter().any(|(k, _)| k == "weighted");
        if rc_axis && !weighted_axis && !cfg.train.rc_enabled {
            cfg.train.weighted = true;
        }
        configs.push(cfg);
    }
    fs::create_dir_all(out_dir).map_err(|e| SmoeError::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(combos.len());
    for (cell, cfg) in combos.into_iter().zip(configs) {
        let name: Vec<String> = cell.iter().map(|(k, v)| format!("{k}-{v}")).collect();
        let dir = out_dir.join(name.join("_"));
        log(&format!("cell {}", name.join(" ")));
        let outcome = train(&cfg, data, &dir, &mut log)?;
        rows.push((cell, outcome.report));
    }
    let mut table = String::new();
    let keys: Vec<&str> = axes.iter().map(|(k, _)| k.as_str()).collect();
    let _ = writeln!(table, "{},best_epoch,best_val_pct,test_pct", keys.join(","));
    for (cell, r) in &rows {
        let vals: Vec<&str> = cell.iter().map(|(_, v)| v.as_str()).collect();
        let _ = writeln!(
            table,
            "{},{},{},{}",
            vals.join(","),
            r.best_epoch,
            r.best_val_pct,
            r.test_pct
        );
    }
    let path = out_dir.join(MATRIX_FILE);
    fs::write(&path, table).map_err(|e| SmoeError::io(&path, e))?;
    Ok(rows)
}

/// Evaluates a checkpoint on one split of a dataset.
pub fn eval(model: &Model, data: &HeatDataset, split: Split) -> Result<EvalReport> {
    check_compatible(model, data)?;
    Ok(evaluate(model, data, split)?)
}

/// Rejects checkpoints whose grid differs from the dataset's.
pub fn check_compatible(model: &Model, data: &HeatDataset) -> Result<()> {
    let dims = match model {
        Model::Smoe(l) => Some((l.config().height, l.config().width)),
        Model::Lcn(l) => Some((l.height(), l.width())),
        Model::Conv(_) => None,
    };
    if let Some((h, w)) = dims {
        if (h, w) != (data.height(), data.width()) {
            return Err(SmoeError::Mismatch(format!(
                "checkpoint expects {h}x{w} grids, dataset has {}x{}",
                data.height(),
                data.width()
            )));
        }
    }
    Ok(())
}
