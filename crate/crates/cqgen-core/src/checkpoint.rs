//! Binary checkpoint container shared by the generator and coordinator.
//!
//! Layout: an 8-byte magic `CQGCKPT1`, then one or more sections. Each
//! section is a 4-byte tag (`GEN0` or `CRD0`), a little-endian u32 header,
//! and the parameter tensors as length-prefixed little-endian f32 arrays in
//! the order documented on `params_mut` of the respective model.
//!
//! Generator header: format version, vocab size, hidden dim, layers, heads,
//! max context. Coordinator header: format version, hidden dim, blocks,
//! heads, max generation length, then the layer-norm epsilon as one f32.

use std::io::{Read, Write};
use std::path::Path;

use crate::coordinator::{CoordinatorConfig, CoordinatorParams};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorParams};
use crate::scalar::Real;

const MAGIC: &[u8; 8] = b"CQGCKPT1";
const FORMAT_VERSION: u32 = 1;
const GENERATOR_TAG: &[u8; 4] = b"GEN0";
const COORDINATOR_TAG: &[u8; 4] = b"CRD0";

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn write_u32(w: &mut impl Write, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_f32(w: &mut impl Write, x: f32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

fn write_tensors<S: Real>(w: &mut impl Write, tensors: &[&[S]]) -> Result<()> {
    write_u32(w, tensors.len() as u32)?;
    for tensor in tensors {
        write_u32(w, tensor.len() as u32)?;
        for x in tensor.iter() {
            write_f32(w, x.as_f64() as f32)?;
        }
    }
    Ok(())
}

fn read_into_params<S: Real>(
    r: &mut impl Read,
    path: &Path,
    params: &mut [&mut crate::nn::Param<S>],
) -> Result<()> {
    let count = read_u32(r)? as usize;
    if count != params.len() {
        return Err(ckpt_err(
            path,
            format!("expected {} tensors, found {}", params.len(), count),
        ));
    }
    for param in params.iter_mut() {
        let len = read_u32(r)? as usize;
        if len != param.len() {
            return Err(ckpt_err(
                path,
                format!("tensor length {} does not match layout {}", len, param.len()),
            ));
        }
        for slot in param.w.iter_mut() {
            *slot = S::from_f64(read_f32(r)? as f64);
        }
    }
    Ok(())
}

pub fn save_generator<S: Real>(path: impl AsRef<Path>, params: &GeneratorParams<S>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(GENERATOR_TAG)?;
    write_u32(&mut file, FORMAT_VERSION)?;
    write_u32(&mut file, params.vocab_size as u32)?;
    write_u32(&mut file, params.hidden_dim as u32)?;
    write_u32(&mut file, params.layers as u32)?;
    write_u32(&mut file, params.heads as u32)?;
    write_u32(&mut file, params.max_context as u32)?;
    let mut owned = params.clone();
    let tensors: Vec<Vec<S>> = owned.params_mut().iter().map(|p| p.w.clone()).collect();
    let views: Vec<&[S]> = tensors.iter().map(|t| t.as_slice()).collect();
    write_tensors(&mut file, &views)
}

pub fn load_generator<S: Real>(path: impl AsRef<Path>) -> Result<GeneratorParams<S>> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path)?;
    expect_magic_and_tag(&mut file, path, GENERATOR_TAG)?;
    let version = read_u32(&mut file)?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {version}")));
    }
    let vocab_size = read_u32(&mut file)? as usize;
    let cfg = GeneratorConfig {
        hidden_dim: read_u32(&mut file)? as usize,
        layers: read_u32(&mut file)? as usize,
        heads: read_u32(&mut file)? as usize,
        max_context: read_u32(&mut file)? as usize,
        ..GeneratorConfig::default()
    };
    let mut params = GeneratorParams::<S>::zeroed(vocab_size, &cfg)?;
    read_into_params(&mut file, path, &mut params.params_mut())?;
    Ok(params)
}

pub fn save_coordinator<S: Real>(
    path: impl AsRef<Path>,
    params: &CoordinatorParams<S>,
) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(COORDINATOR_TAG)?;
    write_u32(&mut file, FORMAT_VERSION)?;
    write_u32(&mut file, params.hidden_dim as u32)?;
    write_u32(&mut file, params.blocks_n as u32)?;
    write_u32(&mut file, params.heads as u32)?;
    write_u32(&mut file, params.max_gen_len as u32)?;
    write_f32(&mut file, params.ln_eps as f32)?;
    let mut owned = params.clone();
    let tensors: Vec<Vec<S>> = owned.params_mut().iter().map(|p| p.w.clone()).collect();
    let views: Vec<&[S]> = tensors.iter().map(|t| t.as_slice()).collect();
    write_tensors(&mut file, &views)
}

pub fn load_coordinator<S: Real>(path: impl AsRef<Path>) -> Result<CoordinatorParams<S>> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path)?;
    expect_magic_and_tag(&mut file, path, COORDINATOR_TAG)?;
    let version = read_u32(&mut file)?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {version}")));
    }
    let cfg = CoordinatorConfig {
        hidden_dim: read_u32(&mut file)? as usize,
        blocks: read_u32(&mut file)? as usize,
        heads: read_u32(&mut file)? as usize,
        max_gen_len: read_u32(&mut file)? as usize,
        ln_eps: read_f32(&mut file)? as f64,
        ..CoordinatorConfig::default()
    };
    let mut params = CoordinatorParams::<S>::zeroed(&cfg)?;
    read_into_params(&mut file, path, &mut params.params_mut())?;
    Ok(params)
}

fn expect_magic_and_tag(r: &mut impl Read, path: &Path, tag: &[u8; 4]) -> Result<()> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file (bad magic)"));
    }
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if &found != tag {
        return Err(ckpt_err(
            path,
            format!(
                "section tag mismatch: wanted {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(&found)
            ),
        ));
    }
    Ok(())
}
