//! Binary parameter snapshots.
//!
//! Layout, all little-endian: magic `MWCK`, `u32` version, `u64` seed, five
//! `u64` dims (items, categories, K, hidden1, hidden2), `u32` theta count,
//! `u32` phi count, then per tensor a `u32` rank, `u64` extents and the raw
//! `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelDims, ModelError, ParamSet};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"MWCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub params: ParamSet,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint(mut w: impl Write, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let p = &ckpt.params;
    let d = &p.dims;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ckpt.seed.to_le_bytes())?;
    for v in [d.n_items, d.n_categories, d.k, d.hidden[0], d.hidden[1]] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&(p.theta.len() as u32).to_le_bytes())?;
    w.write_all(&(p.phi.len() as u32).to_le_bytes())?;
    for t in p.theta.iter().chain(&p.phi) {
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], ModelError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => bad("truncated file"),
        _ => ModelError::Io(e),
    })?;
    Ok(buf)
}

fn u32_of(r: &mut impl Read) -> Result<u32, ModelError> {
    take::<4>(r).map(u32::from_le_bytes)
}

fn u64_of(r: &mut impl Read) -> Result<u64, ModelError> {
    take::<8>(r).map(u64::from_le_bytes)
}

fn usize_of(r: &mut impl Read) -> Result<usize, ModelError> {
    usize::try_from(u64_of(r)?).map_err(|_| bad("extent does not fit in memory"))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint, ModelError> {
    if &take::<4>(&mut r)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32_of(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let seed = u64_of(&mut r)?;
    let mut d = [0usize; 5];
    for v in &mut d {
        *v = usize_of(&mut r)?;
    }
    let dims = ModelDims { n_items: d[0], n_categories: d[1], k: d[2], hidden: [d[3], d[4]] };
    let n_theta = u32_of(&mut r)? as usize;
    let n_phi = u32_of(&mut r)? as usize;
    let expected: Vec<Vec<usize>> = dims.theta_shapes().into_iter().chain(dims.phi_shapes()).collect();
    if n_theta + n_phi != expected.len() || n_phi != dims.phi_shapes().len() {
        return Err(bad(format!("expected {} tensors, found {}", expected.len(), n_theta + n_phi)));
    }

    let mut tensors = Vec::with_capacity(expected.len());
    for want in &expected {
        let rank = u32_of(&mut r)? as usize;
        let shape = (0..rank).map(|_| usize_of(&mut r)).collect::<Result<Vec<_>, _>>()?;
        if &shape != want {
            return Err(bad(format!("tensor shape {shape:?} does not match {want:?}")));
        }
        let n = shape.iter().product();
        let data = (0..n).map(|_| take::<8>(&mut r).map(f64::from_le_bytes)).collect::<Result<Vec<_>, _>>()?;
        tensors.push(Tensor::new(shape, data));
    }
    let phi = tensors.split_off(n_theta);
    Ok(Checkpoint { seed, params: ParamSet { dims, theta: tensors, phi } })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
