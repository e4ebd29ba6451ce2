//! Binary parameter checkpoints.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! magic            8 bytes  "ACRVIT\0\0"
//! version          u32
//! config           9 × u32: patch_size, grid_h, grid_w, channels, embed_dim,
//!                           num_layers, num_heads, mlp_ratio, num_classes
//! use_pos_embed    u32 (0 or 1)
//! tensor count     u32
//! per tensor       name_len u32, name (UTF-8), ndim u32, dims ndim × u32,
//!                  payload numel × f64 (little-endian)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ViTConfig, ViTParams};
use crate::error::{AcrError, Result};
use crate::grid::GridShape;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"ACRVIT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| AcrError::Format(format!("value {v} does not fit the checkpoint format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint<W: Write>(params: &ViTParams, mut w: W) -> Result<()> {
    let c = params.config();
    let mut buf = Vec::with_capacity(64 + params.num_scalars() * 8);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.patch_size,
        c.grid.h(),
        c.grid.w(),
        c.channels,
        c.embed_dim,
        c.num_layers,
        c.num_heads,
        c.mlp_ratio,
        c.num_classes,
        c.use_positional_embedding as usize,
        params.tensors().len(),
    ] {
        put_u32(&mut buf, v)?;
    }
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.ndim())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| AcrError::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ViTParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(AcrError::Format("not an ACR checkpoint (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(AcrError::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut f = [0usize; 10];
    for v in &mut f {
        *v = cur.u32()?;
    }
    let use_pos = match f[9] {
        0 => false,
        1 => true,
        other => return Err(AcrError::Format(format!("bad positional flag {other}"))),
    };
    let config = ViTConfig {
        patch_size: f[0],
        grid: GridShape::new(f[1], f[2]).map_err(|e| AcrError::Format(e.to_string()))?,
        channels: f[3],
        embed_dim: f[4],
        num_layers: f[5],
        num_heads: f[6],
        mlp_ratio: f[7],
        num_classes: f[8],
        use_positional_embedding: use_pos,
    };
    let count = cur.u32()?;
    let mut named = Vec::new();
    for _ in 0..count {
        let len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| AcrError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.u32()?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()?);
        }
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(8) > bytes.len() - cur.pos {
            return Err(AcrError::Format("checkpoint is truncated".into()));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cur.f64()?);
        }
        let t = Tensor::new(shape, data).map_err(|e| AcrError::Format(e.to_string()))?;
        if !t.all_finite() {
            return Err(AcrError::Format(format!("parameter `{name}` holds non-finite values")));
        }
        named.push((name, t));
    }
    if cur.pos != bytes.len() {
        return Err(AcrError::Format("trailing bytes after the last tensor".into()));
    }
    ViTParams::from_named(config, named)
}

pub fn save_checkpoint(params: &ViTParams, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ViTParams> {
    read_checkpoint(std::fs::File::open(path)?)
}
