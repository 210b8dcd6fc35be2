//! Model checkpoints.
//!
//! Little-endian layout:
//! `"PTWT"(4) | u16 version=1 | u32 param count`, then per parameter:
//! `u16 path length | path bytes | u8 trainable | u8 rank | rank x u32 dims |
//! f32 data`.

use std::io::{Read, Write};
use std::path::Path;

use tsvit_core::{ParamSet, Tensor, TsVit};

use crate::error::{Result, RunError};
use crate::util::atomic_write;

pub const CKPT_MAGIC: &[u8; 4] = b"PTWT";
pub const CKPT_VERSION: u16 = 1;

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(CKPT_MAGIC)?;
    buf.write_all(&CKPT_VERSION.to_le_bytes())?;
    buf.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        let path_bytes = p.path.as_bytes();
        if path_bytes.len() > u16::MAX as usize {
            return Err(RunError::Invalid(format!("parameter path too long: {}", p.path)));
        }
        buf.write_all(&(path_bytes.len() as u16).to_le_bytes())?;
        buf.write_all(path_bytes)?;
        buf.push(u8::from(p.trainable));
        let shape = p.tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(RunError::Invalid(format!("rank too large at {}", p.path)));
        }
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.tensor.data() {
            buf.write_all(&v.to_le_bytes())?;
        }
    }
    atomic_write(path, &buf)
}

/// Parameters read back from disk, in file order.
#[derive(Debug)]
pub struct LoadedParams {
    pub entries: Vec<(String, bool, Tensor)>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedParams> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > buf.len() {
            return Err(RunError::Truncated {
                path: path.to_path_buf(),
                offset: buf.len() as u64,
                needed: (*off + n - buf.len()) as u64,
            });
        }
        let out = &buf[*off..*off + n];
        *off += n;
        Ok(out)
    };
    if take(&mut off, 4)? != CKPT_MAGIC {
        return Err(RunError::BadMagic {
            path: path.to_path_buf(),
            expected: "PTWT",
        });
    }
    let ver = take(&mut off, 2)?;
    let ver = u16::from_le_bytes([ver[0], ver[1]]);
    if ver != CKPT_VERSION {
        return Err(RunError::BadVersion {
            path: path.to_path_buf(),
            found: ver,
            offset: 4,
        });
    }
    let count = take(&mut off, 4)?;
    let count = u32::from_le_bytes(count.try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = take(&mut off, 2)?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let name_off = off;
        let name = std::str::from_utf8(take(&mut off, len)?)
            .map_err(|_| RunError::Corrupt {
                path: path.to_path_buf(),
                what: "parameter path is not UTF-8".into(),
                offset: name_off as u64,
            })?
            .to_string();
        let trainable = take(&mut off, 1)?[0] != 0;
        let rank = take(&mut off, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = take(&mut off, 4)?;
            shape.push(u32::from_le_bytes(d.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let data_off = off;
        let bytes = take(&mut off, 4 * numel)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| RunError::Corrupt {
            path: path.to_path_buf(),
            what: e.to_string(),
            offset: data_off as u64,
        })?;
        entries.push((name, trainable, tensor));
    }
    if off != buf.len() {
        return Err(RunError::Corrupt {
            path: path.to_path_buf(),
            what: format!("{} trailing bytes", buf.len() - off),
            offset: off as u64,
        });
    }
    Ok(LoadedParams { entries })
}

/// Load checkpoint values into a model whose registry already has exactly
/// the same parameter paths (surgery re-applied from config beforehand).
pub fn restore_into(model: &mut TsVit, loaded: &LoadedParams) -> Result<()> {
    if loaded.entries.len() != model.params.len() {
        return Err(RunError::Invalid(format!(
            "checkpoint has {} parameters, model has {}",
            loaded.entries.len(),
            model.params.len()
        )));
    }
    for (name, trainable, tensor) in &loaded.entries {
        let p = model
            .params
            .by_path_mut(name)
            .ok_or_else(|| RunError::Invalid(format!("checkpoint parameter `{name}` not in model")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(RunError::Invalid(format!(
                "shape mismatch at `{name}`: checkpoint {:?}, model {:?}",
                tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = tensor.clone();
        p.trainable = *trainable;
    }
    Ok(())
}

/// Load only the base (non-PEFT) weights from a pretraining checkpoint,
/// leaving freshly attached module parameters at their init values.
pub fn warm_start(model: &mut TsVit, loaded: &LoadedParams) -> Result<()> {
    for (name, _, tensor) in &loaded.entries {
        if name.starts_with("peft.") {
            continue;
        }
        let p = model
            .params
            .by_path_mut(name)
            .ok_or_else(|| RunError::Invalid(format!("checkpoint parameter `{name}` not in model")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(RunError::Invalid(format!(
                "shape mismatch at `{name}`: checkpoint {:?}, model {:?}",
                tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = tensor.clone();
    }
    Ok(())
}
