//! The `SMHD` dataset file.
//!
//! Layout, little-endian:
//!
//! ```text
//! "SMHD"  u32 version=1  u32 H  u32 W  u32 num_types
//! f32 diffusivities[num_types]  u8 grid[H*W]
//! u64 n_pairs  u64 train_start  u64 val_start  u64 test_start
//! n_pairs x (f32 input[H*W], f32 target[H*W])
//! u64 xxh64(seed 0) of every preceding byte
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use smoe_core::heat::{HeatDataset, RegionMap, Splits, MAX_TYPES};

use crate::container::{HashingReader, HashingWriter};
use crate::error::{Result, SmoeError};

pub const MAGIC: &[u8; 4] = b"SMHD";
pub const VERSION: u32 = 1;

pub fn write_to<W: Write>(out: W, path: &Path, data: &HeatDataset) -> Result<W> {
    let map = data.region_map();
    let mut w = HashingWriter::new(out, path);
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u32(map.height() as u32)?;
    w.u32(map.width() as u32)?;
    w.u32(map.num_types() as u32)?;
    w.f32s(map.diffusivities())?;
    w.bytes(map.grid())?;
    let s = data.splits();
    w.u64(data.len() as u64)?;
    for v in [s.train_start, s.val_start, s.test_start] {
        w.u64(v as u64)?;
    }
    for k in 0..data.len() {
        let (x, y) = data.pair(k);
        w.f32s(x)?;
        w.f32s(y)?;
    }
    w.finish()
}

pub fn write(path: &Path, data: &HeatDataset) -> Result<()> {
    let file = File::create(path).map_err(|e| SmoeError::io(path, e))?;
    write_to(BufWriter::new(file), path, data)?;
    Ok(())
}

pub fn read_from<R: Read>(input: R, path: &Path) -> Result<HeatDataset> {
    let mut r = HashingReader::new(input, path);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let at = r.offset();
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    if height == 0 || width == 0 || height.saturating_mul(width) > 1 << 26 {
        return Err(r.error(at, format!("implausible grid {height}x{width}")));
    }
    let at = r.offset();
    let num_types = r.u32("num_types")? as usize;
    if num_types == 0 || num_types > MAX_TYPES {
        return Err(r.error(at, format!("num_types {num_types} outside 1..={MAX_TYPES}")));
    }
    let mut diffusivities = Vec::with_capacity(num_types);
    r.f32s_into(&mut diffusivities, num_types, "diffusivities")?;
    let grid_at = r.offset();
    let mut grid = vec![0u8; height * width];
    r.bytes(&mut grid, "region grid")?;
    let map = RegionMap::new(height, width, grid, diffusivities, 0)
        .map_err(|e| r.error(grid_at, e.to_string()))?;

    let at = r.offset();
    let n_pairs = r.u64("pair count")?;
    let train_start = r.u64("train offset")?;
    let val_start = r.u64("val offset")?;
    let test_start = r.u64("test offset")?;
    let splits = Splits {
        train_start: train_start as usize,
        val_start: val_start as usize,
        test_start: test_start as usize,
        total: n_pairs as usize,
    };
    splits.validate().map_err(|e| r.error(at, e.to_string()))?;

    let plane = height * width;
    let total = (n_pairs as usize)
        .checked_mul(plane)
        .ok_or_else(|| r.error(at, format!("{n_pairs} pairs overflow")))?;
    let mut inputs = Vec::with_capacity(total.min(1 << 28));
    let mut targets = Vec::with_capacity(total.min(1 << 28));
    for _ in 0..n_pairs {
        r.f32s_into(&mut inputs, plane, "pair input")?;
        r.f32s_into(&mut targets, plane, "pair target")?;
    }
    r.finish()?;
    Ok(HeatDataset::new(map, inputs, targets, splits)?)
}

pub fn read(path: &Path) -> Result<HeatDataset> {
    let file = File::open(path).map_err(|e| SmoeError::io(path, e))?;
    read_from(BufReader::new(file), path)
}
