//! Flat binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! byte 0        format version (currently 1)
//! u32           entry count
//! per entry:    u16 name length, name bytes (UTF-8),
//!               u8 rank, rank * u32 extents,
//!               numel * f32 values (row-major)
//! ```
//!
//! Values are stored as 32-bit floats regardless of the in-memory element
//! type. Writes go through a temp file plus rename so a crash never leaves a
//! half-written checkpoint behind.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Param;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_VERSION: u8 = 1;

pub type ParamTable = BTreeMap<String, Tensor<f32>>;

pub fn params_to_table<E: Element>(params: &[Param<E>]) -> ParamTable {
    let mut table = ParamTable::new();
    for p in params {
        table.insert(p.name(), p.value().cast::<f32>());
    }
    table
}

pub fn save(path: &Path, table: &ParamTable) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.push(CHECKPOINT_VERSION);
    buf.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, tensor) in table {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {name}")));
        }
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank too large for {name}")));
        }
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamTable> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let version = take(&mut pos, 1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut table = ParamTable::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Format("non-UTF-8 parameter name".into()))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            shape.push(d);
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format("extent overflow".into()))?;
        }
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if table
            .insert(name.clone(), Tensor::from_vec(&shape, data)?)
            .is_some()
        {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok(table)
}

/// Copy values from `table` into live parameters, matching by name and shape.
pub fn restore<E: Element>(params: &[Param<E>], table: &ParamTable) -> Result<()> {
    for p in params {
        let name = p.name();
        let t = table
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing parameter {name}")))?;
        if t.shape() != p.value().shape() {
            return Err(Error::Format(format!(
                "shape mismatch for {name}: file {:?}, model {:?}",
                t.shape(),
                p.value().shape()
            )));
        }
        p.set_value(t.cast::<E>());
    }
    Ok(())
}
