//! Named-tensor blob: magic, version, tensor count, then per tensor the name,
//! rank, dims and little-endian `f32` data. The model config travels as the
//! UTF-8 bytes of its JSON in the rank-1 tensor `meta.config`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{IppdModel, ModelConfig, ModelError};
use crate::path_encoder::Vocab;
use crate::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IPPDCKPT";
const VERSION: u32 = 1;
const CONFIG_TENSOR: &str = "meta.config";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_checkpoint<T: Scalar>(model: &IppdModel<T>, out: &mut impl Write) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, model.params().len() as u32 + 1);
    let json = serde_json::to_vec(model.config()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    put_tensor(&mut buf, CONFIG_TENSOR, &[json.len()], json.iter().map(|&b| f32::from(b)));
    for (name, t) in model.params().iter() {
        put_tensor(&mut buf, name, &[t.nrows(), t.ncols()], t.iter().map(|v| v.as_f64() as f32));
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| ModelError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

type Tensor = (String, Vec<usize>, Vec<f32>);

fn parse(buf: &[u8]) -> Result<Vec<Tensor>, ModelError> {
    let mut c = Cursor { buf, at: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ModelError::Checkpoint(format!("{name}: size overflow")))?;
        let raw = c.take(len.checked_mul(4).ok_or_else(|| ModelError::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("four bytes"))).collect();
        out.push((name, dims, data));
    }
    if c.at != buf.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

pub fn read_checkpoint<T: Scalar>(input: &mut impl Read, vocab: std::sync::Arc<Vocab>) -> Result<IppdModel<T>, ModelError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let tensors = parse(&buf)?;
    let (_, _, cfg) = tensors
        .iter()
        .find(|(n, _, _)| n == CONFIG_TENSOR)
        .ok_or_else(|| ModelError::Checkpoint("missing model config".into()))?;
    let json: Vec<u8> = cfg.iter().map(|&v| v as u8).collect();
    let config: ModelConfig = serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(format!("model config: {e}")))?;
    let mut model = IppdModel::<T>::new(config, vocab)?;
    let mut seen = 0;
    for (name, dims, data) in &tensors {
        if name == CONFIG_TENSOR {
            continue;
        }
        let id = model.params().find(name).ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor {name}")))?;
        let shape = model.params().get(id).dim();
        if dims.as_slice() != [shape.0, shape.1] {
            return Err(ModelError::Checkpoint(format!("{name}: shape {dims:?} does not match {shape:?}")));
        }
        *model.params_mut().get_mut(id) = Array2::from_shape_vec(shape, data.iter().map(|&v| T::of(f64::from(v))).collect()).expect("checked shape");
        seen += 1;
    }
    if seen != model.params().len() {
        return Err(ModelError::Checkpoint(format!("{} of {} tensors present", seen, model.params().len())));
    }
    if !model.params().all_finite() {
        return Err(ModelError::Checkpoint("non-finite tensor values".into()));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &IppdModel<T>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>, vocab: std::sync::Arc<Vocab>) -> Result<IppdModel<T>, ModelError> {
    read_checkpoint(&mut std::fs::File::open(path)?, vocab)
}
