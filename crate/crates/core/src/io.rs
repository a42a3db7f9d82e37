//! Model container format.
//!
//! ```text
//! magic      4 bytes  "FMRM"
//! version    u32 LE   1
//! arch_id    u64 LE
//! n_layers   u32 LE
//! per layer: layer_index u32 LE, rank u32 LE, rank x dim u64 LE
//! payload:   all values as f64 LE, layer by layer
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LayerBlock, LayeredModel};

const MAGIC: &[u8; 4] = b"FMRM";
const VERSION: u32 = 1;

pub fn encode_model(model: &LayeredModel) -> Vec<u8> {
    let header_len = 20 + model.layers.iter().map(|b| 8 + 8 * b.shape.len()).sum::<usize>();
    let mut out = Vec::with_capacity(header_len + model.byte_size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.arch_id.to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for b in &model.layers {
        out.extend_from_slice(&(b.layer_index as u32).to_le_bytes());
        out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for v in model.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<LayeredModel> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let arch_id = c.u64()?;
    let n_layers = c.u32()? as usize;
    let mut headers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let index = c.u32()? as usize;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        headers.push((index, shape));
    }
    let mut blocks = Vec::with_capacity(n_layers);
    for (index, shape) in headers {
        let len: usize = shape.iter().product();
        let values = (0..len).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        blocks.push(LayerBlock::new(index, shape, values)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    let model = LayeredModel::from_blocks(blocks)?;
    if model.arch_id != arch_id {
        return Err(Error::Format(format!(
            "header fingerprint {arch_id:#x} does not match layer shapes ({:#x})",
            model.arch_id
        )));
    }
    Ok(model)
}

pub fn write_model(path: impl AsRef<Path>, model: &LayeredModel) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_model(model))?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<LayeredModel> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_model(&buf)
}

/// Human-readable dump. Values survive the trip exactly (serde_json prints
/// shortest round-trip representations).
pub fn model_to_json(model: &LayeredModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(model)?)
}

pub fn model_from_json(s: &str) -> Result<LayeredModel> {
    let m: LayeredModel = serde_json::from_str(s)?;
    let rebuilt = LayeredModel::from_blocks(m.layers.iter().map(|b| (**b).clone()).collect())?;
    if rebuilt.arch_id != m.arch_id {
        return Err(Error::Format("arch_id does not match layer shapes".into()));
    }
    Ok(rebuilt)
}
