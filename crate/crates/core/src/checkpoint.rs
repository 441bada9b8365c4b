//! Binary checkpoints.
//!
//! ```text
//! b"BDNCKPT\0"        magic
//! u32 LE              format version
//! u32 LE              header length in bytes
//! header              UTF-8 text: `key=value` lines, then one
//!                     `tensor <name> <n> <c> <h> <w>` line per tensor
//! data                every tensor's values as f64 LE, in header order
//! ```
//!
//! The `kind` key distinguishes model, attribute-stage and auto-encoder
//! checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::arch::{build_scae, build_trunk, prefixed, prefixed_mut, AttributeStage, BdnModel, Profile, Scae, Variant};
use crate::error::{Error, Result};
use crate::layers::ConvLayer;
use crate::network::{Layer, Sequential};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"BDNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Header metadata plus named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n', ' ']) || v.contains('\n') {
                return Err(err(format!("metadata entry '{}' cannot be stored", k)));
            }
            header.push_str(&format!("{}={}\n", k, v));
        }
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains([' ', '\n']) {
                return Err(err(format!("tensor name '{}' cannot be stored", name)));
            }
            let s = t.shape();
            header.push_str(&format!("tensor {} {} {} {} {}\n", name, s.n, s.c, s.h, s.w));
        }
        let data_len: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(err(format!("unsupported checkpoint version {}", version)));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header = bytes
            .get(16..16 + header_len)
            .ok_or_else(|| err("truncated checkpoint header"))?;
        let header = std::str::from_utf8(header).map_err(|_| err("checkpoint header is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        let mut shapes = Vec::new();
        for (i, line) in header.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                let dims: Option<Vec<usize>> = f.get(1..).map(|d| d.iter().filter_map(|v| v.parse().ok()).collect());
                match dims {
                    Some(d) if f.len() == 5 && d.len() == 4 => {
                        shapes.push((f[0].to_string(), Shape::new(d[0], d[1], d[2], d[3])))
                    }
                    _ => return Err(err(format!("malformed tensor entry on header line {}", i + 1))),
                }
            } else if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            } else {
                return Err(err(format!("malformed header line {}", i + 1)));
            }
        }
        let mut pos = 16 + header_len;
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let end = pos + shape.len() * 8;
            let raw = bytes
                .get(pos..end)
                .ok_or_else(|| err(format!("checkpoint data ends inside tensor {}", name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(err(format!("{} trailing bytes after checkpoint data", bytes.len() - pos)));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| err(format!("checkpoint header lacks '{}'", key)))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| err(format!("bad value '{}' for '{}'", v, key)))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        let found = self.get("kind")?;
        if found != kind {
            return Err(err(format!("expected a {} checkpoint, found {}", kind, found)));
        }
        Ok(())
    }

    /// Copies stored values into `targets`, which must match by name, order
    /// and shape.
    fn fill(&self, targets: Vec<(String, &mut Tensor)>) -> Result<()> {
        if targets.len() != self.tensors.len() {
            return Err(err(format!(
                "checkpoint holds {} tensors, the network has {}",
                self.tensors.len(),
                targets.len()
            )));
        }
        for ((name, dst), (src_name, src)) in targets.into_iter().zip(&self.tensors) {
            if name != *src_name || dst.shape() != src.shape() {
                return Err(err(format!(
                    "checkpoint tensor {} {} does not match network tensor {} {}",
                    src_name,
                    src.shape(),
                    name,
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

fn owned(params: Vec<(String, &Tensor)>) -> Vec<(String, Tensor)> {
    params
        .into_iter()
        .map(|(k, t)| {
            let mut t = t.clone();
            t.clear_grad();
            (k, t)
        })
        .collect()
}

fn join(styles: &[usize]) -> String {
    styles.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

fn split(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| v.parse().map_err(|_| err(format!("bad style list '{}'", s))))
        .collect()
}

fn check_count(ck: &Checkpoint, live: usize) -> Result<()> {
    let stored: usize = ck.parse("param_count")?;
    if stored != live {
        return Err(err(format!("header declares {} parameters, data holds {}", stored, live)));
    }
    Ok(())
}

pub fn model_checkpoint(model: &BdnModel) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "model".into());
    meta.insert("variant".into(), model.variant.to_string());
    meta.insert("head".into(), model.head.to_string());
    meta.insert("profile".into(), model.profile.to_string());
    meta.insert("pathways".into(), model.pathways.len().to_string());
    meta.insert("styles".into(), join(&model.styles));
    meta.insert("frozen_pathways".into(), model.frozen_pathways.to_string());
    meta.insert("param_count".into(), model.param_count().to_string());
    Checkpoint {
        meta,
        tensors: owned(model.params()),
    }
}

pub fn save_model(model: &BdnModel, path: &Path) -> Result<()> {
    model_checkpoint(model).save(path)
}

/// Rebuilds a model from a checkpoint; `expected` rejects other variants.
pub fn model_from_checkpoint(ck: &Checkpoint, expected: Option<Variant>) -> Result<BdnModel> {
    ck.expect_kind("model")?;
    let variant: Variant = ck.get("variant")?.parse()?;
    if let Some(e) = expected {
        if e != variant {
            return Err(err(format!("checkpoint holds a {} model, expected {}", variant, e)));
        }
    }
    let profile: Profile = ck.get("profile")?.parse()?;
    let n: usize = ck.parse("pathways")?;
    let trunks = (0..n).map(|_| build_trunk(profile, 0)).collect();
    let mut model = BdnModel::new(
        variant,
        ck.get("head")?.parse()?,
        profile,
        trunks,
        split(ck.get("styles")?)?,
        0,
    )?;
    model.frozen_pathways = ck.parse("frozen_pathways")?;
    ck.fill(model.params_mut())?;
    check_count(ck, model.param_count())?;
    Ok(model)
}

pub fn load_model(path: &Path, expected: Option<Variant>) -> Result<BdnModel> {
    model_from_checkpoint(&Checkpoint::load(path)?, expected)
}

pub fn attribute_checkpoint(stage: &AttributeStage) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "attributes".into());
    meta.insert("source".into(), stage.source.to_string());
    meta.insert("profile".into(), stage.profile.to_string());
    meta.insert("trunks".into(), stage.trunks.len().to_string());
    meta.insert("styles".into(), join(&stage.styles));
    let mut tensors = Vec::new();
    for (i, t) in stage.trunks.iter().enumerate() {
        tensors.extend(owned(prefixed(&format!("trunk{}", i), t)));
    }
    match &stage.head {
        Some(h) => {
            meta.insert("form".into(), "with-head".into());
            meta.insert("head_outputs".into(), head_outputs(h).to_string());
            tensors.extend(owned(prefixed("head", h)));
        }
        None => {
            meta.insert("form".into(), "headless".into());
        }
    }
    let count: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    meta.insert("param_count".into(), count.to_string());
    Checkpoint { meta, tensors }
}

fn head_outputs(head: &Sequential) -> usize {
    head.conv("conv4").map(|c| c.out_channels).unwrap_or(0)
}

pub fn save_attributes(stage: &AttributeStage, path: &Path) -> Result<()> {
    attribute_checkpoint(stage).save(path)
}

pub fn attributes_from_checkpoint(ck: &Checkpoint) -> Result<AttributeStage> {
    ck.expect_kind("attributes")?;
    let profile: Profile = ck.get("profile")?.parse()?;
    let n: usize = ck.parse("trunks")?;
    let mut stage = AttributeStage {
        profile,
        source: ck.get("source")?.parse()?,
        styles: split(ck.get("styles")?)?,
        trunks: (0..n).map(|_| build_trunk(profile, 0)).collect(),
        head: None,
    };
    if ck.get("form")? == "with-head" {
        let outputs: usize = ck.parse("head_outputs")?;
        let mut head = Sequential::new();
        head.push(
            "conv4",
            Layer::Conv(ConvLayer::new(
                n * profile.pathway_channels(),
                outputs,
                (1, 1),
                (1, 1),
                (0, 0),
            )?),
        )
        .push("gap", Layer::Gap);
        stage.head = Some(head);
    }
    let mut params = Vec::new();
    for (i, t) in stage.trunks.iter_mut().enumerate() {
        params.extend(prefixed_mut(&format!("trunk{}", i), t));
    }
    if let Some(h) = stage.head.as_mut() {
        params.extend(prefixed_mut("head", h));
    }
    ck.fill(params)?;
    let live = stage.trunks.iter().map(|t| t.param_count()).sum::<usize>()
        + stage.head.as_ref().map_or(0, |h| h.param_count());
    check_count(ck, live)?;
    stage.validate()?;
    Ok(stage)
}

pub fn load_attributes(path: &Path) -> Result<AttributeStage> {
    attributes_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn scae_checkpoint(scae: &Scae) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "scae".into());
    meta.insert("profile".into(), scae.profile.to_string());
    meta.insert("blocks".into(), scae.blocks.len().to_string());
    meta.insert("param_count".into(), scae.param_count().to_string());
    Checkpoint {
        meta,
        tensors: owned(scae.params()),
    }
}

pub fn save_scae(scae: &Scae, path: &Path) -> Result<()> {
    scae_checkpoint(scae).save(path)
}

pub fn scae_from_checkpoint(ck: &Checkpoint) -> Result<Scae> {
    ck.expect_kind("scae")?;
    let mut scae = build_scae(ck.get("profile")?.parse()?, ck.parse("blocks")?, 0)?;
    ck.fill(scae.params_mut())?;
    check_count(ck, scae.param_count())?;
    Ok(scae)
}

pub fn load_scae(path: &Path) -> Result<Scae> {
    scae_from_checkpoint(&Checkpoint::load(path)?)
}
