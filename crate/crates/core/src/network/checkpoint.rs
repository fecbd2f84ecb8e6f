//! Binary checkpoint format.
//!
//! ```text
//! magic   b"GEBDCKPT"
//! version u32 LE (1)
//! config  u32 LE byte length, then TrunkConfig as JSON
//! count   u32 LE number of parameters
//! per parameter:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank × u32 extents
//!   row-major f64 LE values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ScTransformer, TrunkConfig};
use crate::error::{Error, Result};
use crate::io_util::{read_u32, write_atomic};
use crate::param::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GEBDCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint(model: &ScTransformer, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(&config)?;
    let store = model.params();
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses a checkpoint and rebuilds the model it describes. Every stored
/// parameter must match the name and shape the config implies.
pub fn read_checkpoint(input: &mut impl Read) -> Result<ScTransformer> {
    let io = |e: std::io::Error| bad(format!("truncated: {e}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(input).map_err(io)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = read_u32(input).map_err(io)? as usize;
    let mut config = vec![0u8; len];
    input.read_exact(&mut config).map_err(io)?;
    let config: TrunkConfig =
        serde_json::from_slice(&config).map_err(|e| bad(format!("config: {e}")))?;
    let mut model = ScTransformer::new(config, 0)?;

    let count = read_u32(input).map_err(io)? as usize;
    if count != model.params().len() {
        return Err(bad(format!(
            "config implies {} parameters, file has {count}",
            model.params().len()
        )));
    }
    let mut stored = ParamStore::new();
    for _ in 0..count {
        let n = read_u32(input).map_err(io)? as usize;
        let mut name = vec![0u8; n];
        input.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = read_u32(input).map_err(io)? as usize;
        if rank == 0 || rank > 8 {
            return Err(bad(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(input).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let expected = model
            .params()
            .find(&name)
            .map(|id| model.params().get(id).value.len())
            .ok_or_else(|| bad(format!("unexpected parameter {name}")))?;
        let numel: usize = shape.iter().product();
        if numel != expected {
            return Err(bad(format!("{name}: shape {shape:?} does not match model")));
        }
        let mut buf = vec![0u8; numel * 8];
        input.read_exact(&mut buf).map_err(io)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("{name}: non-finite value")));
        }
        stored.add(name, Tensor::new(shape, data)?);
    }
    model.params_mut().load_values_from(&stored)?;
    Ok(model)
}

pub fn save_checkpoint(model: &ScTransformer, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("in-memory write");
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<ScTransformer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice())
}
