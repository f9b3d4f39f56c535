//! Binary record files and model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RISM"  u32 version
//! repeated until EOF:
//!   u32 name_len, name bytes (UTF-8), u8 frozen, u32 rank,
//!   rank × u64 dims, product(dims) × f64 payload
//! ```
//!
//! A checkpoint is a record file holding every parameter and batch-norm
//! statistic, plus a `.meta` sidecar in the flat `key = value` config format
//! with the training position appended.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::SegmentationModel;
use crate::nn::Module;

pub const MAGIC: &[u8; 4] = b"RISM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub frozen: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_records(mut w: impl Write, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for r in records {
        let n: usize = r.shape.iter().product();
        if n != r.data.len() {
            return Err(Error::Format(format!("record {} shape/data mismatch", r.name)));
        }
        w.write_all(&(r.name.len() as u32).to_le_bytes())?;
        w.write_all(r.name.as_bytes())?;
        w.write_all(&[u8::from(r.frozen)])?;
        w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &d in &r.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &r.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::Format("truncated record".into()));
        }
        filled += n;
    }
    Ok(true)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated record".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_records(mut r: impl Read) -> Result<Vec<Record>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("missing header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !read_exact_or_eof(&mut r, &mut len)? {
            break;
        }
        let len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)
            .map_err(|_| Error::Format("truncated flag".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("truncated dims".into()))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("truncated payload for {name}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Record {
            name,
            frozen: flag[0] != 0,
            shape,
            data,
        });
    }
    Ok(out)
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    write_records(BufWriter::new(fs::File::create(path)?), records)
}

pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    read_records(BufReader::new(fs::File::open(path)?))
}

/// Training position stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: usize,
    pub loss_digest: String,
}

/// SHA-256 over the bit patterns of a loss sequence.
pub fn loss_digest(losses: impl IntoIterator<Item = f64>) -> String {
    let mut h = Sha256::new();
    for l in losses {
        h.update(l.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        format!(
            "{}epoch = {}\nstep = {}\nloss_digest = {}\n",
            self.config.to_text(),
            self.epoch,
            self.step,
            self.loss_digest
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        let (mut epoch, mut step, mut digest) = (0, 0, String::new());
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad meta line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::Format(format!("bad {k}")));
            match k {
                "epoch" => epoch = parse(v)?,
                "step" => step = parse(v)?,
                "loss_digest" => digest = v.to_string(),
                _ => config.set(k, v)?,
            }
        }
        config.validate()?;
        Ok(CheckpointMeta {
            config,
            epoch,
            step,
            loss_digest: digest,
        })
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

/// Parameters (trainable and frozen) followed by batch-norm statistics.
pub fn model_records(model: &SegmentationModel) -> Vec<Record> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| {
        out.push(Record {
            name: p.name().to_string(),
            frozen: p.is_frozen(),
            shape: p.shape().to_vec(),
            data: p.data().to_vec(),
        })
    });
    model.visit_stats(&mut |s| {
        let st = s.stats.lock().expect("stats lock");
        for (suffix, v) in [("running_mean", &st.mean), ("running_var", &st.var)] {
            out.push(Record {
                name: format!("{}.{suffix}", s.name),
                frozen: true,
                shape: vec![v.len()],
                data: v.clone(),
            });
        }
    });
    out
}

/// Overwrites every parameter and statistic from `records`; all must be
/// present with matching shapes.
pub fn apply_records(model: &mut SegmentationModel, records: Vec<Record>) -> Result<()> {
    let mut by_name: HashMap<String, Record> = records.into_iter().map(|r| (r.name.clone(), r)).collect();
    let mut failure = None;
    model.visit_params_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        match by_name.remove(p.name()) {
            Some(r) if r.shape == p.shape() && r.frozen == p.is_frozen() => {
                if let Err(e) = p.set_data(r.data) {
                    failure = Some(e);
                }
            }
            Some(r) => {
                failure = Some(Error::Format(format!(
                    "parameter {} has shape {:?} (frozen {}), checkpoint has {:?} (frozen {})",
                    p.name(),
                    p.shape(),
                    p.is_frozen(),
                    r.shape,
                    r.frozen
                )))
            }
            None => failure = Some(Error::Format(format!("checkpoint lacks parameter {}", p.name()))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut missing = None;
    model.visit_stats(&mut |s| {
        let mut guard = s.stats.lock().expect("stats lock");
        let st = &mut *guard;
        let c = st.mean.len();
        for (suffix, slot) in [("running_mean", &mut st.mean), ("running_var", &mut st.var)] {
            let key = format!("{}.{suffix}", s.name);
            match by_name.remove(&key) {
                Some(r) if r.data.len() == c => *slot = r.data,
                _ => missing = Some(key),
            }
        }
    });
    if let Some(k) = missing {
        return Err(Error::Format(format!("checkpoint lacks or misshapes {k}")));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("checkpoint has unknown record {extra}")));
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &SegmentationModel, meta: &CheckpointMeta) -> Result<()> {
    save_records(path, &model_records(model))?;
    fs::write(meta_path(path), meta.to_text())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(SegmentationModel, CheckpointMeta)> {
    let meta = CheckpointMeta::from_text(&fs::read_to_string(meta_path(path))?)?;
    let mut model = SegmentationModel::new(&meta.config)?;
    apply_records(&mut model, load_records(path)?)?;
    Ok((model, meta))
}
