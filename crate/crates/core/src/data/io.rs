//! Line-delimited JSON dataset files.
//!
//! The first line is a header `{"raw_dim", "schema_version", "seed"}`; every
//! following line is one record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::labels::{LabelSet, Pathology, Task};
use crate::data::record::{Center, SampleRecord};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub raw_dim: usize,
    pub schema_version: u32,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    center: String,
    idh: u8,
    codel: u8,
    path: u8,
    mask_fl: bool,
    mask_t1c: bool,
    fl: Option<Vec<f64>>,
    t1c: Option<Vec<f64>>,
}

impl Line {
    fn from_record(r: &SampleRecord) -> Self {
        Self {
            id: r.id.clone(),
            center: r.center.as_str().to_string(),
            idh: r.labels.class(Task::Idh) as u8,
            codel: r.labels.class(Task::Codel) as u8,
            path: r.labels.pathology.index() as u8,
            mask_fl: r.fl.is_some(),
            mask_t1c: r.t1c.is_some(),
            fl: r.fl.clone(),
            t1c: r.t1c.clone(),
        }
    }

    fn into_record(self, raw_dim: usize) -> std::result::Result<SampleRecord, String> {
        let center = Center::parse(&self.center).ok_or_else(|| format!("unknown center {:?}", self.center))?;
        let pathology = Pathology::from_index(self.path as usize).ok_or_else(|| format!("bad path {}", self.path))?;
        let labels = LabelSet::from_pathology(pathology);
        if labels.class(Task::Idh) != self.idh as usize || labels.class(Task::Codel) != self.codel as usize {
            return Err(format!(
                "labels idh={} codel={} contradict pathology {}",
                self.idh, self.codel, self.path
            ));
        }
        for (name, mask, v) in [("fl", self.mask_fl, &self.fl), ("t1c", self.mask_t1c, &self.t1c)] {
            if mask != v.is_some() {
                return Err(format!("mask_{name} = {mask} disagrees with {name} field"));
            }
        }
        if self.fl.is_none() && self.t1c.is_none() {
            return Err("record has neither sequence".into());
        }
        Ok(SampleRecord {
            id: self.id,
            center,
            fl: self.fl,
            t1c: self.t1c,
            labels,
        })
        .and_then(|r| {
            for v in [&r.fl, &r.t1c].into_iter().flatten() {
                if v.len() != raw_dim {
                    return Err(format!("dimension {} does not match header raw_dim {raw_dim}", v.len()));
                }
            }
            Ok(r)
        })
    }
}

pub fn write_dataset(path: &Path, header: DatasetHeader, records: &[SampleRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut out, header, records)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset_to<W: Write>(out: &mut W, header: DatasetHeader, records: &[SampleRecord]) -> Result<()> {
    let to_io = |e: serde_json::Error| Error::Format(e.to_string());
    serde_json::to_writer(&mut *out, &header).map_err(to_io)?;
    out.write_all(b"\n")?;
    for r in records {
        for v in [&r.fl, &r.t1c].into_iter().flatten() {
            if v.len() != header.raw_dim {
                return Err(Error::Format(format!(
                    "record {} has dimension {} but header says {}",
                    r.id,
                    v.len(),
                    header.raw_dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("record {}", r.id)));
            }
        }
        serde_json::to_writer(&mut *out, &Line::from_record(r)).map_err(to_io)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SampleRecord>)> {
    read_dataset_from(BufReader::new(File::open(path)?), path)
}

/// Parses a dataset; `path` is only used in error messages.
pub fn read_dataset_from<R: BufRead>(reader: R, path: &Path) -> Result<(DatasetHeader, Vec<SampleRecord>)> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| err(1, "missing header line".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| err(1, format!("header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported schema version {} (expected {SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| err(n, e.to_string()))?;
        let record = parsed.into_record(header.raw_dim).map_err(|m| {
            if m.starts_with("dimension") {
                Error::Format(format!("{}:{n}: {m}", path.display()))
            } else {
                err(n, m)
            }
        })?;
        records.push(record);
    }
    Ok((header, records))
}
