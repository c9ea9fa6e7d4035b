//! Versioned checkpoint container: one JSON metadata blob plus named f32
//! tensors, little-endian throughout.
//!
//! ```text
//! magic    b"EDCK"
//! version  u32 = 1
//! meta_len u32, meta (JSON bytes)
//! n        u32
//! n x { name_len u16, name, ndim u8, dims u32.., data f32.. }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::layers::Params;
use crate::nn::Tensor;

const MAGIC: &[u8; 4] = b"EDCK";
const VERSION: u32 = 1;

pub fn save_container<M: Serialize>(
    path: &Path,
    meta: &M,
    tensors: &[(String, ArrayD<f32>)],
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let meta_bytes = serde_json::to_vec(meta)
        .map_err(|e| Error::format(format!("checkpoint meta serialization: {e}")))?;
    w.write_u32::<LittleEndian>(meta_bytes.len() as u32)?;
    w.write_all(&meta_bytes)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, arr) in tensors {
        let name_bytes = name.as_bytes();
        w.write_u16::<LittleEndian>(name_bytes.len() as u16)?;
        w.write_all(name_bytes)?;
        w.write_u8(arr.ndim() as u8)?;
        for &d in arr.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in arr.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn load_container<M: DeserializeOwned>(
    path: &Path,
) -> Result<(M, Vec<(String, ArrayD<f32>)>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "{}: not a checkpoint container",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = r.read_u32::<LittleEndian>()? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: M = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::format(format!("checkpoint meta: {e}")))?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("tensor name is not utf-8".to_string()))?;
        let ndim = r.read_u8()? as usize;
        let mut dims = vec![0usize; ndim];
        for d in dims.iter_mut() {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let len: usize = dims.iter().product();
        let mut data = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
        tensors.push((name, arr));
    }
    Ok((meta, tensors))
}

/// Snapshot a module's parameters under a name prefix.
pub fn dump_params(module: &impl Params<f32>, prefix: &str) -> Vec<(String, ArrayD<f32>)> {
    let mut named = Vec::new();
    module.collect(prefix, &mut named);
    named
        .into_iter()
        .map(|(name, t)| (name, t.to_array()))
        .collect()
}

/// Load values into a freshly built module; every parameter must be present
/// with a matching shape.
pub fn restore_params(
    module: &impl Params<f32>,
    prefix: &str,
    tensors: &std::collections::HashMap<String, ArrayD<f32>>,
) -> Result<()> {
    let mut named: Vec<(String, Tensor<f32>)> = Vec::new();
    module.collect(prefix, &mut named);
    for (name, t) in named {
        let arr = tensors.get(&name).ok_or_else(|| {
            Error::format(format!("checkpoint is missing parameter {name}"))
        })?;
        if arr.shape() != t.shape() {
            return Err(Error::format(format!(
                "parameter {name}: checkpoint shape {:?} vs model {:?}",
                arr.shape(),
                t.shape()
            )));
        }
        t.set_value(arr.clone());
    }
    Ok(())
}
