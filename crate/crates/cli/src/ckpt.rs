//! The `CKPT1` checkpoint format.
//!
//! Layout: magic `CKPT1`, a u32 little-endian header length plus that many
//! bytes of UTF-8 JSON (architecture and trainer metadata, used for shape
//! validation on load), a u32 tensor count, then per-tensor records: u32
//! name length, UTF-8 name, u32 rank, u32 little-endian extents, raw f32
//! little-endian values.
//!
//! A training checkpoint stores both networks (`a.*` / `b.*` prefixes) and
//! both optimizers' moment accumulators (`opt_a.m.*`, `opt_a.v.*`, ...), so
//! resuming reproduces the exact trainer state.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use cyclediff_core::denoiser::{Denoiser, DenoiserConfig};
use cyclediff_core::loss::{DualTrainer, TrainConfig};
use cyclediff_core::optim::OptimizerState;
use cyclediff_core::schedule::{DiffusionSchedule, ScheduleKind};
use cyclediff_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 5] = b"CKPT1";
pub const SCHEMA: &str = "cyclediff.ckpt.v1";

/// JSON header of a training checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CkptHeader {
    pub schema: String,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleKind,
    pub train: TrainConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs_done: usize,
    pub opt_step_a: u64,
    pub opt_step_b: u64,
}

/// Writes raw named tensors with a JSON header string.
pub fn write_tensors(
    path: &Path,
    header_json: &str,
    entries: &[(String, Tensor<f32>)],
) -> AppResult<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let hb = header_json.as_bytes();
    buf.extend_from_slice(&(hb.len() as u32).to_le_bytes());
    buf.extend_from_slice(hb);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads back the header string and all tensor records.
pub fn read_tensors(path: &Path) -> AppResult<(String, Vec<(String, Tensor<f32>)>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| AppError::checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let fail = |m: &str| AppError::checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(fail("bad magic"));
    }
    let mut off = 5usize;
    let take_u32 = |off: &mut usize| -> AppResult<u32> {
        if *off + 4 > bytes.len() {
            return Err(fail("truncated"));
        }
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    };
    let hlen = take_u32(&mut off)? as usize;
    if off + hlen > bytes.len() {
        return Err(fail("truncated header"));
    }
    let header = String::from_utf8(bytes[off..off + hlen].to_vec())
        .map_err(|_| fail("header not UTF-8"))?;
    off += hlen;
    let count = take_u32(&mut off)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = take_u32(&mut off)? as usize;
        if off + nlen > bytes.len() {
            return Err(fail("truncated name"));
        }
        let name = String::from_utf8(bytes[off..off + nlen].to_vec())
            .map_err(|_| fail("name not UTF-8"))?;
        off += nlen;
        let rank = take_u32(&mut off)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut off)? as usize);
        }
        let numel: usize = shape.iter().product();
        if off + 4 * numel > bytes.len() {
            return Err(fail("truncated payload"));
        }
        let data: Vec<f32> = bytes[off..off + 4 * numel]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += 4 * numel;
        entries.push((
            name,
            Tensor::from_vec(&shape, data).map_err(|e| fail(&e.to_string()))?,
        ));
    }
    if off != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    Ok((header, entries))
}

fn prefixed(prefix: &str, names: &[String], tensors: &[Tensor<f32>]) -> Vec<(String, Tensor<f32>)> {
    names
        .iter()
        .zip(tensors.iter())
        .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
        .collect()
}

/// Serializes the full trainer state.
pub fn save_trainer(
    path: &Path,
    trainer: &DualTrainer<f32>,
    schedule_kind: ScheduleKind,
    epochs_done: usize,
) -> AppResult<()> {
    let header = CkptHeader {
        schema: SCHEMA.to_string(),
        denoiser: trainer.net_a.config.clone(),
        schedule: schedule_kind,
        train: trainer.config.clone(),
        learning_rate: trainer.opt_a.learning_rate,
        weight_decay: trainer.opt_a.weight_decay,
        epochs_done,
        opt_step_a: trainer.opt_a.step,
        opt_step_b: trainer.opt_b.step,
    };
    let mut entries = Vec::new();
    entries.extend(prefixed("a.", trainer.net_a.params.names(), trainer.net_a.params.tensors()));
    entries.extend(prefixed("b.", trainer.net_b.params.names(), trainer.net_b.params.tensors()));
    let (ma, va) = trainer.opt_a.moments();
    let (mb, vb) = trainer.opt_b.moments();
    entries.extend(prefixed("opt_a.m.", trainer.net_a.params.names(), ma));
    entries.extend(prefixed("opt_a.v.", trainer.net_a.params.names(), va));
    entries.extend(prefixed("opt_b.m.", trainer.net_b.params.names(), mb));
    entries.extend(prefixed("opt_b.v.", trainer.net_b.params.names(), vb));
    write_tensors(path, &serde_json::to_string(&header)?, &entries)
}

fn collect_group(
    entries: &[(String, Tensor<f32>)],
    prefix: &str,
    names: &[String],
) -> AppResult<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(names.len());
    for n in names {
        let key = format!("{prefix}{n}");
        let found = entries
            .iter()
            .find(|(en, _)| *en == key)
            .ok_or_else(|| AppError::checkpoint(format!("missing tensor '{key}'")))?;
        out.push(found.1.clone());
    }
    Ok(out)
}

/// Loaded model pair plus metadata, for sampling.
pub struct ModelBundle {
    pub header: CkptHeader,
    pub net_a: Denoiser<f32>,
    pub net_b: Denoiser<f32>,
    pub schedule: DiffusionSchedule,
}

pub fn load_bundle(path: &Path) -> AppResult<ModelBundle> {
    let (header_json, entries) = read_tensors(path)?;
    let header: CkptHeader = serde_json::from_str(&header_json)
        .map_err(|e| AppError::checkpoint(format!("header: {e}")))?;
    if header.schema != SCHEMA {
        return Err(AppError::checkpoint(format!(
            "schema '{}' (expected '{SCHEMA}')",
            header.schema
        )));
    }
    let mut net_a = Denoiser::<f32>::init(header.denoiser.clone(), 0)
        .map_err(|e| AppError::checkpoint(e.to_string()))?;
    let mut net_b = Denoiser::<f32>::init(header.denoiser.clone(), 1)
        .map_err(|e| AppError::checkpoint(e.to_string()))?;
    let names_a = net_a.params.names().to_vec();
    let names_b = net_b.params.names().to_vec();
    net_a
        .params
        .replace_all(collect_group(&entries, "a.", &names_a)?)
        .map_err(|e| AppError::checkpoint(e.to_string()))?;
    net_b
        .params
        .replace_all(collect_group(&entries, "b.", &names_b)?)
        .map_err(|e| AppError::checkpoint(e.to_string()))?;
    let schedule = DiffusionSchedule::new(header.schedule, header.train.n_steps)
        .map_err(|e| AppError::checkpoint(e.to_string()))?;
    Ok(ModelBundle {
        header,
        net_a,
        net_b,
        schedule,
    })
}

/// Rebuilds a resumable trainer from a checkpoint.
pub fn load_trainer(path: &Path) -> AppResult<(DualTrainer<f32>, usize)> {
    let bundle = load_bundle(path)?;
    let (header_json, entries) = read_tensors(path)?;
    let header: CkptHeader = serde_json::from_str(&header_json)
        .map_err(|e| AppError::checkpoint(format!("header: {e}")))?;
    let names_a = bundle.net_a.params.names().to_vec();
    let names_b = bundle.net_b.params.names().to_vec();

    let mut opt_a = OptimizerState::new(
        bundle.net_a.params.tensors(),
        header.learning_rate,
        header.weight_decay,
    );
    opt_a
        .restore(
            header.opt_step_a,
            collect_group(&entries, "opt_a.m.", &names_a)?,
            collect_group(&entries, "opt_a.v.", &names_a)?,
        )
        .map_err(|e| AppError::checkpoint(e.to_string()))?;
    let mut opt_b = OptimizerState::new(
        bundle.net_b.params.tensors(),
        header.learning_rate,
        header.weight_decay,
    );
    opt_b
        .restore(
            header.opt_step_b,
            collect_group(&entries, "opt_b.m.", &names_b)?,
            collect_group(&entries, "opt_b.v.", &names_b)?,
        )
        .map_err(|e| AppError::checkpoint(e.to_string()))?;

    let trainer = DualTrainer {
        net_a: bundle.net_a,
        net_b: bundle.net_b,
        opt_a,
        opt_b,
        schedule: bundle.schedule,
        config: header.train.clone(),
    };
    Ok((trainer, header.epochs_done))
}
