//! Plain-text run configuration: UTF-8 `key = value` lines, `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use smoe_core::heat::Preset;
use smoe_core::losses::ErrorMagnitude;
use smoe_core::smoe::Normalization;
use smoe_core::train::{ExpertInitMode, GateInitMode, ModelKind, TrainConfig};

use crate::error::{Result, SmoeError};

/// Everything a `train` invocation needs besides the dataset path.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Dataset generated when no data file is given.
    pub preset: Preset,
    pub data_seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            preset: Preset::Reduced,
            data_seed: 0,
            out_dir: None,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("{v:?} is not a valid number"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    parse_bool(v).ok_or_else(|| format!("{v:?} is not a boolean"))
}

fn named<T>(
    v: &str,
    parse: fn(&str) -> Option<T>,
    options: &str,
) -> std::result::Result<T, String> {
    parse(v).ok_or_else(|| format!("{v:?} is not one of {options}"))
}

impl RunConfig {
    /// Every accepted key, in file order.
    pub const KEYS: &'static [&'static str] = &[
        "model",
        "preset",
        "data_seed",
        "out_dir",
        "seed",
        "num_experts",
        "select",
        "expert_bias",
        "weighted",
        "normalization",
        "conv_depth",
        "conv_width",
        "batch_size",
        "lr",
        "lr_decay",
        "plateau_patience",
        "early_stop_patience",
        "max_epochs",
        "rc_enabled",
        "damping_enabled",
        "q",
        "damping_factor",
        "error_magnitude",
        "use_importance",
        "use_load",
        "use_spatial_agreement",
        "noise_std",
        "aux_scale",
        "gate_init",
        "expert_init",
        "freeze_gate",
        "freeze_experts",
    ];

    /// Sets one key; the error names the problem without the key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "model" => t.model = named(value, ModelKind::parse, "smoe, conv, lcn")?,
            "preset" => self.preset = named(value, Preset::parse, "reduced, paper")?,
            "data_seed" => self.data_seed = num(value)?,
            "out_dir" => self.out_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "seed" => t.seed = num(value)?,
            "num_experts" => t.num_experts = num(value)?,
            "select" => t.select = num(value)?,
            "expert_bias" => t.expert_bias = flag(value)?,
            "weighted" => t.weighted = flag(value)?,
            "normalization" => {
                t.normalization = named(
                    value,
                    Normalization::parse,
                    "none, softmax, abs, softmax_abs",
                )?
            }
            "conv_depth" => t.conv_depth = num(value)?,
            "conv_width" => t.conv_width = num(value)?,
            "batch_size" => t.batch_size = num(value)?,
            "lr" => t.lr = num(value)?,
            "lr_decay" => t.lr_decay = num(value)?,
            "plateau_patience" => t.plateau_patience = num(value)?,
            "early_stop_patience" => t.early_stop_patience = num(value)?,
            "max_epochs" => t.max_epochs = num(value)?,
            "rc_enabled" => t.rc_enabled = flag(value)?,
            "damping_enabled" => t.damping_enabled = flag(value)?,
            "q" => t.q = num(value)?,
            "damping_factor" => t.damping_factor = num(value)?,
            "error_magnitude" => {
                t.error_magnitude = named(value, ErrorMagnitude::parse, "abs, signed")?
            }
            "use_importance" => t.aux.use_importance = flag(value)?,
            "use_load" => t.aux.use_load = flag(value)?,
            "use_spatial_agreement" => t.aux.use_spatial_agreement = flag(value)?,
            "noise_std" => t.aux.noise_std = num(value)?,
            "aux_scale" => t.aux.aux_scale = num(value)?,
            "gate_init" => {
                t.gate_init = named(value, GateInitMode::parse, "uniform, perfect, fixed_random")?
            }
            "expert_init" => {
                t.expert_init = named(value, ExpertInitMode::parse, "random, perfect")?
            }
            "freeze_gate" => t.freeze.gate = flag(value)?,
            "freeze_experts" => t.freeze.experts = flag(value)?,
            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }

    /// Current value of a key in the file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "model" => t.model.name().to_string(),
            "preset" => self.preset.name().to_string(),
            "data_seed" => self.data_seed.to_string(),
            "out_dir" => self
                .out_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "seed" => t.seed.to_string(),
            "num_experts" => t.num_experts.to_string(),
            "select" => t.select.to_string(),
            "expert_bias" => t.expert_bias.to_string(),
            "weighted" => t.weighted.to_string(),
            "normalization" => t.normalization.name().to_string(),
            "conv_depth" => t.conv_depth.to_string(),
            "conv_width" => t.conv_width.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "lr_decay" => t.lr_decay.to_string(),
            "plateau_patience" => t.plateau_patience.to_string(),
            "early_stop_patience" => t.early_stop_patience.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "rc_enabled" => t.rc_enabled.to_string(),
            "damping_enabled" => t.damping_enabled.to_string(),
            "q" => t.q.to_string(),
            "damping_factor" => t.damping_factor.to_string(),
            "error_magnitude" => t.error_magnitude.name().to_string(),
            "use_importance" => t.aux.use_importance.to_string(),
            "use_load" => t.aux.use_load.to_string(),
            "use_spatial_agreement" => t.aux.use_spatial_agreement.to_string(),
            "noise_std" => t.aux.noise_std.to_string(),
            "aux_scale" => t.aux.aux_scale.to_string(),
            "gate_init" => t.gate_init.name().to_string(),
            "expert_init" => t.expert_init.name().to_string(),
            "freeze_gate" => t.freeze.gate.to_string(),
            "freeze_experts" => t.freeze.experts.to_string(),
            _ => return None,
        })
    }

    /// Parses a whole file, reporting every bad line at once.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut problems = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    n + 1
                ));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                problems.push(format!("line {}: key {k} given twice", n + 1));
                continue;
            }
            if let Err(e) = cfg.set(k, v) {
                problems.push(format!("line {}: key {k}: {e}", n + 1));
            }
        }
        if !problems.is_empty() {
            return Err(SmoeError::config(problems.join("; ")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| SmoeError::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            SmoeError::Config(msg) => SmoeError::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies `key=value` overrides, all problems reported together.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut problems = Vec::new();
        for o in overrides {
            let o = o.as_ref();
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v.trim()) {
                        problems.push(format!("override {}: {e}", k.trim()));
                    }
                }
                None => problems.push(format!("override {o:?} is not key=value")),
            }
        }
        if !problems.is_empty() {
            return Err(SmoeError::config(problems.join("; ")));
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| SmoeError::config(format!("invalid training settings: {e}")))
    }

    /// The file form; parsing it back gives an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let v = self.get(key).unwrap_or_default();
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }
}
