//! The `SMCK` checkpoint file.
//!
//! Layout, little-endian:
//!
//! ```text
//! "SMCK"  u32 version=1
//! u32 meta_len  meta[meta_len]            UTF-8 `key=value` lines
//! u32 n_sections
//! n_sections x (u16 name_len, name, u64 count, f32 values[count])
//! u64 xxh64(seed 0) of every preceding byte
//! ```
//!
//! The meta block names the model kind and its shape; sections carry the
//! parameters (`kernels`, `bias`, `gate` for SMoE; `layerN.w`/`layerN.b` for
//! the conv net; `kernels`, `bias` for the LCN).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use smoe_core::baselines::{ConvNet, LcnLayer};
use smoe_core::smoe::{Normalization, SharedGate, SmoeConfig, SmoeLayer};
use smoe_core::train::{Model, ModelKind};
use smoe_core::{KernelBank, Tensor};

use crate::container::{HashingReader, HashingWriter};
use crate::error::{Result, SmoeError};

pub const MAGIC: &[u8; 4] = b"SMCK";
pub const VERSION: u32 = 1;

/// A model plus free-form metadata carried alongside it.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, String>,
}

struct Sections(Vec<(String, Vec<f32>)>);

impl Sections {
    fn push(&mut self, name: impl Into<String>, values: &[f32]) {
        self.0.push((name.into(), values.to_vec()));
    }
}

fn describe(model: &Model, meta: &mut BTreeMap<String, String>) -> Sections {
    let mut s = Sections(Vec::new());
    let mut set = |k: &str, v: String| {
        meta.insert(k.to_string(), v);
    };
    set("model", model.kind().name().to_string());
    match model {
        Model::Smoe(layer) => {
            let c = layer.config();
            set("num_experts", c.num_experts.to_string());
            set("select", c.select.to_string());
            set("expert_out", c.expert_out.to_string());
            set("in_channels", c.in_channels.to_string());
            set("height", c.height.to_string());
            set("width", c.width.to_string());
            set("weighted", c.weighted.to_string());
            set("bias", c.bias.to_string());
            set("normalization", c.normalization.name().to_string());
            set("gate_frozen", layer.gate().is_frozen().to_string());
            set("experts_frozen", layer.experts_frozen().to_string());
            s.push("kernels", layer.kernels().data());
            if let Some(b) = layer.bias() {
                s.push("bias", b);
            }
            s.push("gate", layer.gate().logits().data());
        }
        Model::Conv(net) => {
            set("depth", net.layers().len().to_string());
            for (l, (w, b)) in net.layers().iter().enumerate() {
                set(
                    &format!("layer{l}.shape"),
                    format!("{},{}", w.out_channels(), w.in_channels()),
                );
                s.push(format!("layer{l}.w"), w.data());
                s.push(format!("layer{l}.b"), b);
            }
        }
        Model::Lcn(lcn) => {
            set("height", lcn.height().to_string());
            set("width", lcn.width().to_string());
            set("in_channels", lcn.in_channels().to_string());
            s.push("kernels", lcn.kernels());
            s.push("bias", lcn.bias());
        }
    }
    s
}

pub fn write_to<W: Write>(
    out: W,
    path: &Path,
    model: &Model,
    extra: &BTreeMap<String, String>,
) -> Result<W> {
    let mut meta = extra.clone();
    let sections = describe(model, &mut meta);
    let mut text = String::new();
    for (k, v) in &meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(SmoeError::config(format!(
                "checkpoint meta entry {k:?} cannot be stored"
            )));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    let mut w = HashingWriter::new(out, path);
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u32(text.len() as u32)?;
    w.bytes(text.as_bytes())?;
    w.u32(sections.0.len() as u32)?;
    for (name, values) in &sections.0 {
        w.u16(name.len() as u16)?;
        w.bytes(name.as_bytes())?;
        w.u64(values.len() as u64)?;
        w.f32s(values)?;
    }
    w.finish()
}

pub fn write(path: &Path, model: &Model, extra: &BTreeMap<String, String>) -> Result<()> {
    let file = File::create(path).map_err(|e| SmoeError::io(path, e))?;
    write_to(BufWriter::new(file), path, model, extra)?;
    Ok(())
}

struct Parsed<'a> {
    path: &'a Path,
    meta: BTreeMap<String, String>,
    sections: BTreeMap<String, Vec<f32>>,
    meta_at: u64,
    sections_at: u64,
}

impl Parsed<'_> {
    fn error(&self, offset: u64, detail: impl Into<String>) -> SmoeError {
        SmoeError::Format {
            path: self.path.to_path_buf(),
            offset,
            detail: detail.into(),
        }
    }

    fn key(&self, k: &str) -> Result<&str> {
        self.meta
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| self.error(self.meta_at, format!("missing meta key {k}")))
    }

    fn num(&self, k: &str) -> Result<usize> {
        let v = self.key(k)?;
        v.parse()
            .map_err(|_| self.error(self.meta_at, format!("meta key {k}={v} is not a count")))
    }

    fn flag(&self, k: &str) -> Result<bool> {
        let v = self.key(k)?;
        v.parse()
            .map_err(|_| self.error(self.meta_at, format!("meta key {k}={v} is not true/false")))
    }

    fn section(&mut self, name: &str) -> Result<Vec<f32>> {
        self.sections
            .remove(name)
            .ok_or_else(|| self.error(self.sections_at, format!("missing section {name}")))
    }

    fn bad(&self, e: smoe_core::Error) -> SmoeError {
        self.error(self.sections_at, e.to_string())
    }

    fn model(&mut self) -> Result<Model> {
        let kind = self.key("model")?;
        let kind = ModelKind::parse(kind)
            .ok_or_else(|| self.error(self.meta_at, format!("unknown model kind {kind}")))?;
        let model = match kind {
            ModelKind::Smoe => {
                let norm = self.key("normalization")?;
                let normalization = Normalization::parse(norm).ok_or_else(|| {
                    self.error(self.meta_at, format!("unknown normalization {norm}"))
                })?;
                let cfg = SmoeConfig {
                    num_experts: self.num("num_experts")?,
                    select: self.num("select")?,
                    expert_out: self.num("expert_out")?,
                    in_channels: self.num("in_channels")?,
                    height: self.num("height")?,
                    width: self.num("width")?,
                    weighted: self.flag("weighted")?,
                    bias: self.flag("bias")?,
                    normalization,
                };
                let gate_frozen = self.flag("gate_frozen")?;
                let experts_frozen = self.flag("experts_frozen")?;
                let k = self.section("kernels")?;
                let kernels =
                    KernelBank::from_vec(cfg.num_experts * cfg.expert_out, cfg.in_channels, k)
                        .map_err(|e| self.bad(e))?;
                let bias = if cfg.bias {
                    Some(self.section("bias")?)
                } else {
                    None
                };
                let g = self.section("gate")?;
                let logits = Tensor::from_vec([1, cfg.num_experts, cfg.height, cfg.width], g)
                    .map_err(|e| self.bad(e))?;
                let mut layer =
                    SmoeLayer::from_parts(cfg, kernels, bias, SharedGate::new(logits, gate_frozen))
                        .map_err(|e| self.bad(e))?;
                layer.set_experts_frozen(experts_frozen);
                Model::Smoe(layer)
            }
            ModelKind::Conv => {
                let depth = self.num("depth")?;
                let mut layers = Vec::with_capacity(depth);
                for l in 0..depth {
                    let shape = self.key(&format!("layer{l}.shape"))?.to_string();
                    let (o, i) = shape
                        .split_once(',')
                        .and_then(|(o, i)| {
                            Some((o.parse::<usize>().ok()?, i.parse::<usize>().ok()?))
                        })
                        .ok_or_else(|| {
                            self.error(self.meta_at, format!("bad layer shape {shape}"))
                        })?;
                    let w = self.section(&format!("layer{l}.w"))?;
                    let w = KernelBank::from_vec(o, i, w).map_err(|e| self.bad(e))?;
                    layers.push((w, self.section(&format!("layer{l}.b"))?));
                }
                Model::Conv(ConvNet::from_layers(layers).map_err(|e| self.bad(e))?)
            }
            ModelKind::Lcn => {
                let (h, w, c) = (
                    self.num("height")?,
                    self.num("width")?,
                    self.num("in_channels")?,
                );
                let k = self.section("kernels")?;
                let b = self.section("bias")?;
                Model::Lcn(LcnLayer::from_parts(h, w, c, k, b).map_err(|e| self.bad(e))?)
            }
        };
        if let Some(name) = self.sections.keys().next() {
            return Err(self.error(self.sections_at, format!("unexpected section {name}")));
        }
        Ok(model)
    }
}

/// Meta keys describing the model itself; everything else is passed through.
const STRUCTURAL: &[&str] = &[
    "model",
    "num_experts",
    "select",
    "expert_out",
    "in_channels",
    "height",
    "width",
    "weighted",
    "bias",
    "normalization",
    "gate_frozen",
    "experts_frozen",
    "depth",
];

pub fn read_from<R: Read>(input: R, path: &Path) -> Result<Checkpoint> {
    let mut r = HashingReader::new(input, path);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let at = r.offset();
    let len = r.u32("meta length")? as usize;
    if len > 1 << 20 {
        return Err(r.error(at, format!("meta block of {len} bytes")));
    }
    let meta_at = r.offset();
    let mut raw = vec![0u8; len];
    r.bytes(&mut raw, "meta")?;
    let text = String::from_utf8(raw).map_err(|_| r.error(meta_at, "meta is not UTF-8"))?;
    let mut meta = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| r.error(meta_at, format!("meta line {line:?} has no '='")))?;
        meta.insert(k.to_string(), v.to_string());
    }

    let sections_at = r.offset();
    let n = r.u32("section count")?;
    let mut sections = BTreeMap::new();
    for _ in 0..n {
        let at = r.offset();
        let name_len = r.u16("section name length")? as usize;
        let mut name = vec![0u8; name_len];
        r.bytes(&mut name, "section name")?;
        let name = String::from_utf8(name).map_err(|_| r.error(at, "section name is not UTF-8"))?;
        let count_at = r.offset();
        let count = r.u64("section length")? as usize;
        if count > 1 << 30 {
            return Err(r.error(count_at, format!("section {name} claims {count} values")));
        }
        let mut values = Vec::with_capacity(count);
        r.f32s_into(&mut values, count, "section values")?;
        if sections.insert(name.clone(), values).is_some() {
            return Err(r.error(at, format!("duplicate section {name}")));
        }
    }
    r.finish()?;
    let mut p = Parsed {
        path,
        meta,
        sections,
        meta_at,
        sections_at,
    };
    let model = p.model()?;
    let mut meta = p.meta;
    meta.retain(|k, _| !STRUCTURAL.contains(&k.as_str()) && !k.starts_with("layer"));
    Ok(Checkpoint { model, meta })
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| SmoeError::io(path, e))?;
    read_from(BufReader::new(file), path)
}
