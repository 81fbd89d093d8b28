//! Binary checkpoints: magic bytes, a JSON header, then named parameter
//! blocks stored as little-endian `f64`.
//!
//! Layout: `GMENETCK`, `u32` header length, header JSON, `u32` block count,
//! then per block `u32` name length, name, `u32` group length, group,
//! `u64` rows, `u64` cols and `rows·cols` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::nn::ParamStore;
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

pub const MAGIC: &[u8; 8] = b"GMENETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Generator parameters plus the stems they were pretrained against.
    Cggm,
    /// A full model, optionally with optimizer state.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub schema_version: u32,
    pub model: ModelConfig,
    pub variant: Option<Variant>,
    pub seed: u64,
    pub frozen_groups: Vec<String>,
    /// Optimizer configuration and step count, when moments are included.
    pub optimizer: Option<(AdamWConfig, u64)>,
    /// Position of the batch-sampling RNG.
    pub rng_word_pos: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub group: String,
    pub value: Tensor2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blocks: Vec<Block>,
}

const MOMENT1: &str = "adamw.m:";
const MOMENT2: &str = "adamw.v:";

impl Checkpoint {
    /// Parameter blocks for every parameter whose group passes `keep`.
    pub fn from_params<S: Scalar>(header: CheckpointHeader, ps: &ParamStore<S>, keep: impl Fn(&str) -> bool) -> Self {
        let blocks = ps
            .iter()
            .filter(|p| keep(&p.group))
            .map(|p| Block {
                name: p.name.clone(),
                group: p.group.clone(),
                value: p.value.cast(),
            })
            .collect();
        Self { header, blocks }
    }

    /// Appends the optimizer moments as extra blocks.
    pub fn with_optimizer<S: Scalar>(mut self, ps: &ParamStore<S>, opt: &AdamW<S>) -> Self {
        self.header.optimizer = Some((opt.cfg, opt.step));
        for (k, p) in ps.iter().enumerate() {
            self.blocks.push(Block {
                name: format!("{MOMENT1}{}", p.name),
                group: p.group.clone(),
                value: opt.m[k].cast(),
            });
            self.blocks.push(Block {
                name: format!("{MOMENT2}{}", p.name),
                group: p.group.clone(),
                value: opt.v[k].cast(),
            });
        }
        self
    }

    fn param_blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks
            .iter()
            .filter(|b| !b.name.starts_with(MOMENT1) && !b.name.starts_with(MOMENT2))
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Copies every stored parameter into `ps`. Each block must name an
    /// existing parameter of the same group and shape.
    pub fn apply<S: Scalar>(&self, ps: &mut ParamStore<S>) -> Result<usize> {
        let mut n = 0;
        for b in self.param_blocks() {
            let id = ps
                .find(&b.name)
                .ok_or_else(|| Error::Format(format!("checkpoint parameter {} not in model", b.name)))?;
            let p = ps.param(id);
            if p.group != b.group || p.value.shape() != b.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {} is {:?} in group {}, model has {:?} in group {}",
                    b.name,
                    b.value.shape(),
                    b.group,
                    p.value.shape(),
                    p.group
                )));
            }
            *ps.value_mut(id) = b.value.cast();
            n += 1;
        }
        Ok(n)
    }

    /// Rebuilds optimizer state for `ps` from the stored moments.
    pub fn optimizer<S: Scalar>(&self, ps: &ParamStore<S>) -> Result<Option<AdamW<S>>> {
        let Some((cfg, step)) = self.header.optimizer else {
            return Ok(None);
        };
        let mut opt = AdamW::new(cfg, ps);
        opt.step = step;
        for (k, p) in ps.iter().enumerate() {
            for (prefix, dst) in [(MOMENT1, &mut opt.m[k]), (MOMENT2, &mut opt.v[k])] {
                let b = self
                    .block(&format!("{prefix}{}", p.name))
                    .ok_or_else(|| Error::Format(format!("missing optimizer moment for {}", p.name)))?;
                if b.value.shape() != dst.shape() {
                    return Err(Error::Format(format!("optimizer moment shape mismatch for {}", p.name)));
                }
                *dst = b.value.cast();
            }
        }
        Ok(Some(opt))
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MAGIC)?;
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        out.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        for b in &self.blocks {
            for s in [&b.name, &b.group] {
                out.write_all(&(s.len() as u32).to_le_bytes())?;
                out.write_all(s.as_bytes())?;
            }
            out.write_all(&(b.value.rows() as u64).to_le_bytes())?;
            out.write_all(&(b.value.cols() as u64).to_le_bytes())?;
            for v in b.value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(input, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let len = read_u32(input, "header length")? as usize;
        let mut header = vec![0u8; len];
        read_exact(input, &mut header, "header")?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.schema_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                header.schema_version
            )));
        }
        let count = read_u32(input, "block count")?;
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_string(input)?;
            let group = read_string(input)?;
            let rows = read_u64(input, "rows")? as usize;
            let cols = read_u64(input, "cols")? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|&n| n <= 1 << 28)
                .ok_or_else(|| Error::Format(format!("block {name} has implausible shape {rows} x {cols}")))?;
            let mut raw = vec![0u8; n * 8];
            read_exact(input, &mut raw, "block data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.push(Block {
                name,
                group,
                value: Tensor2::new(rows, cols, data)?,
            });
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last block".into()));
        }
        Ok(Self { header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("checkpoint truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(input: &mut R) -> Result<String> {
    let len = read_u32(input, "name length")? as usize;
    if len > 4096 {
        return Err(Error::Format(format!("block name length {len} is implausible")));
    }
    let mut b = vec![0u8; len];
    read_exact(input, &mut b, "name")?;
    String::from_utf8(b).map_err(|e| Error::Format(format!("block name: {e}")))
}
