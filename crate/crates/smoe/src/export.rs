//! Text and image exports: routing maps, expert kernels, training history.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use smoe_core::smoe::{RoutingRecord, SmoeLayer};
use smoe_core::train::EpochRecord;

use crate::error::{Result, SmoeError};

/// H lines of W comma-separated cells. Each cell is the selected expert, or
/// the selected experts in slot order joined by `|` when more than one is
/// selected.
pub fn routing_csv(routing: &RoutingRecord) -> String {
    let (h, w) = (routing.height(), routing.width());
    let mut out = String::new();
    for i in 0..h {
        let row: Vec<String> = (0..w)
            .map(|j| {
                let p = i * w + j;
                (0..routing.select())
                    .map(|s| routing.expert(s, p).to_string())
                    .collect::<Vec<_>>()
                    .join("|")
            })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Binary 8-bit PGM of the top-1 expert, scaled so the last expert is 255.
pub fn routing_pgm(routing: &RoutingRecord) -> Vec<u8> {
    let (h, w) = (routing.height(), routing.width());
    let top = routing.num_experts().saturating_sub(1).max(1) as u32;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(routing.winners().iter().map(|&e| (e * 255 / top) as u8));
    out
}

/// Writes the routing map, choosing CSV or PGM by extension.
pub fn write_routing(path: &Path, routing: &RoutingRecord) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => routing_csv(routing).into_bytes(),
        Some("pgm") => routing_pgm(routing),
        _ => {
            return Err(SmoeError::config(format!(
                "routing export path {} must end in .csv or .pgm",
                path.display()
            )))
        }
    };
    fs::write(path, bytes).map_err(|e| SmoeError::io(path, e))
}

/// One expert's taps as CSV: three rows of three per (output, input) channel
/// pair, pairs in output-major order.
pub fn expert_csv(layer: &SmoeLayer, e: usize) -> String {
    let c = layer.config();
    let mut out = String::new();
    for f in 0..c.expert_out {
        for ch in 0..c.in_channels {
            for row in layer.expert_kernel(e, f, ch).chunks(3) {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", cells.join(","));
            }
        }
    }
    out
}

/// Writes `expert_<e>.csv` for every expert into `dir`.
pub fn write_experts(dir: &Path, layer: &SmoeLayer) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| SmoeError::io(dir, e))?;
    (0..layer.config().num_experts)
        .map(|e| {
            let path = dir.join(format!("expert_{e}.csv"));
            fs::write(&path, expert_csv(layer, e)).map_err(|err| SmoeError::io(&path, err))?;
            Ok(path)
        })
        .collect()
}

/// Parses an expert CSV back into its taps.
pub fn parse_expert_csv(text: &str) -> std::result::Result<Vec<f32>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .flat_map(|l| l.split(','))
        .map(|v| {
            v.trim()
                .parse::<f32>()
                .map_err(|_| format!("bad tap {v:?}"))
        })
        .collect()
}

pub const HISTORY_HEADER: &str =
    "epoch,train_mse,val_pct,val_mse,lr,rc_loss,aux_loss,utilization,utilization_entropy,routing_changes,improved";

/// History CSV. Leading `# key = value` lines record the run's settings.
pub fn history_csv(settings: &str, history: &[EpochRecord]) -> String {
    let mut out = String::new();
    for line in settings.lines() {
        let _ = writeln!(out, "# {line}");
    }
    let _ = writeln!(out, "{HISTORY_HEADER}");
    for r in history {
        let util: Vec<String> = r.utilization.iter().map(|u| u.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_mse,
            r.val_pct,
            r.val_mse,
            r.lr,
            r.rc_loss,
            r.aux_loss,
            util.join("|"),
            r.utilization_entropy,
            r.routing_changes,
            r.improved
        );
    }
    out
}
