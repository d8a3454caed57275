use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use smoe::checkpoint;
use smoe::config::RunConfig;
use smoe::error::{Result, SmoeError};
use smoe::export;
use smoe::run;
use smoe_core::gradcheck;
use smoe_core::heat::{Preset, Split};

#[derive(Parser)]
#[command(
    name = "smoe",
    version,
    about = "Spatial mixture-of-experts on location-dependent heat diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Reduced,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Reduced => Preset::Reduced,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a heat-diffusion dataset file.
    GenData {
        #[arg(long, value_enum, default_value = "reduced")]
        preset: PresetArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes config, checkpoint, history and report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file; the configured preset is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Ablation axis, repeatable; runs every combination.
        #[arg(long, value_name = "KEY=V1,V2")]
        matrix: Vec<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Write the routing map of an SMoE checkpoint as .csv or .pgm.
    ExportRouting {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write each expert's kernel of an SMoE checkpoint as CSV.
    ExportExperts {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn smoe_layer(path: &std::path::Path) -> Result<smoe_core::smoe::SmoeLayer> {
    let ck = checkpoint::read(path)?;
    match ck.model {
        smoe_core::train::Model::Smoe(layer) => Ok(layer),
        other => Err(SmoeError::Mismatch(format!(
            "{} holds a {} model, not smoe",
            path.display(),
            other.kind().name()
        ))),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { preset, seed, out } => {
            let summary = run::gen_data(preset.into(), seed, &out)?;
            print!("{summary}");
            println!("wrote {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            set,
            matrix,
            quiet,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            cfg.apply_overrides(&set)?;
            let axes = run::parse_axes(&matrix)?;
            let dataset = run::load_data(data.as_deref(), &cfg)?;
            let out_dir = run::resolve_out_dir(out.as_deref(), &cfg);
            let log = |line: &str| {
                if !quiet {
                    println!("{line}");
                }
            };
            if axes.is_empty() {
                let outcome = run::train(&cfg, &dataset, &out_dir, log)?;
                print!("{}", outcome.report.to_text());
            } else {
                let rows = run::matrix(&cfg, &axes, &dataset, &out_dir, log)?;
                for (cell, r) in rows {
                    let name: Vec<String> = cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    println!(
                        "{}: best epoch {}, test {:.3}%",
                        name.join(" "),
                        r.best_epoch,
                        r.test_pct
                    );
                }
            }
            println!("outputs in {}", out_dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let ck = checkpoint::read(&checkpoint)?;
            let dataset = smoe::dataset::read(&data)?;
            let r = run::eval(&ck.model, &dataset, split.into())?;
            println!("samples = {}", r.samples);
            println!("pct_within_1 = {}", r.pct_within_1);
            println!("mse = {}", r.mse);
        }
        Command::ExportRouting { checkpoint, out } => {
            let layer = smoe_layer(&checkpoint)?;
            let routing = smoe_core::train::Model::Smoe(layer)
                .routing()?
                .ok_or_else(|| SmoeError::Mismatch("model has no routing".into()))?;
            export::write_routing(&out, &routing)?;
            println!("wrote {}", out.display());
        }
        Command::ExportExperts { checkpoint, out } => {
            let layer = smoe_layer(&checkpoint)?;
            for p in export::write_experts(&out, &layer)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Gradcheck { seed } => {
            let results = gradcheck::run_suite(seed)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<20} max rel error {:.3e}  {status}",
                    r.component, r.max_rel_error
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(SmoeError::Numeric(format!(
                    "{failed} gradient checks exceed relative error {}",
                    gradcheck::TOLERANCE
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
