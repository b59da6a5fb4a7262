//! `ARCOPO-CKPT-1` model checkpoints.
//!
//! Layout: magic line, four `u32` dimensions (chunk, context, hidden1,
//! hidden2), block count, then for each block its name, `rows`, `cols` and
//! the row-major `f64` values. All integers and floats are little-endian.

use std::path::Path;

use crate::binio::{content_id, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::toygen::{ModelDims, ModelParams};

pub const CHECKPOINT_MAGIC: &str = "ARCOPO-CKPT-1";

pub fn write_checkpoint(params: &ModelParams) -> Vec<u8> {
    let d = params.dims;
    let mut w = ByteWriter::new(CHECKPOINT_MAGIC);
    for v in [d.chunk_dim, d.context_dim, d.hidden1, d.hidden2] {
        w.u32(v);
    }
    let layout = d.layout();
    w.u32(layout.len());
    for b in &layout {
        w.str(b.name);
        w.u32(b.rows);
        w.u32(b.cols);
        for x in &params.values[b.range()] {
            w.f64(*x);
        }
    }
    w.buf
}

/// Parse a checkpoint; with `expected` set, any dimension mismatch is an
/// error.
pub fn read_checkpoint(bytes: &[u8], expected: Option<ModelDims>) -> Result<ModelParams> {
    let mut r = ByteReader::new(bytes, CHECKPOINT_MAGIC)?;
    let dims = ModelDims {
        chunk_dim: r.u32()?,
        context_dim: r.u32()?,
        hidden1: r.u32()?,
        hidden2: r.u32()?,
    };
    dims.validate()?;
    if let Some(e) = expected {
        if e != dims {
            return Err(Error::InvalidArgument(format!(
                "checkpoint dimensions {dims:?} do not match expected {e:?}"
            )));
        }
    }
    let layout = dims.layout();
    if r.u32()? != layout.len() {
        return Err(Error::Format("unexpected block count".into()));
    }
    let mut values = Vec::with_capacity(dims.param_count());
    for b in &layout {
        let name = r.str()?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        if name != b.name || rows != b.rows || cols != b.cols {
            return Err(Error::Format(format!(
                "block `{name}` {rows}x{cols} does not match layout `{}` {}x{}",
                b.name, b.rows, b.cols
            )));
        }
        for _ in 0..b.len() {
            values.push(r.f64()?);
        }
    }
    r.finish()?;
    ModelParams::from_values(dims, values)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<String> {
    let bytes = write_checkpoint(params);
    std::fs::write(path, &bytes)?;
    Ok(content_id(&bytes))
}

/// Load a checkpoint and return it with its content id.
pub fn load_checkpoint(path: &Path, expected: Option<ModelDims>) -> Result<(ModelParams, String)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("checkpoint {}", path.display())),
        _ => Error::Io(e),
    })?;
    Ok((read_checkpoint(&bytes, expected)?, content_id(&bytes)))
}

impl ModelParams {
    /// Content id of the serialized checkpoint.
    pub fn checkpoint_id(&self) -> String {
        content_id(&write_checkpoint(self))
    }
}
