//! SAE checkpoint and activation-dump files.
//!
//! The SAE checkpoint reuses the model container layout (magic `IGDS`,
//! version u32, header u32s, named f32 blocks) with an extended header:
//! layer, d_model and d_sae as u32s, then activation kind as u8
//! (0 = relu, 1 = jumprelu) and theta as f32.
//!
//! Activation dumps carry raw residual states between the tapping stage and
//! SAE training/scoring: magic `IGDA`, version u32, layer u32, d u32,
//! count u64, then `count` rows of `d` little-endian f32 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::numcore::{RealMatrix, RealVector};
use crate::toymodel::checkpoint::{
    atomic_write, expect_magic, read_block, read_u32, write_block, CkptError, FORMAT_VERSION,
    MODEL_MAGIC,
};

use super::{SaeActivation, SaeParams};

pub const DUMP_MAGIC: &[u8; 4] = b"IGDA";

pub type Result<T> = std::result::Result<T, CkptError>;

pub fn save_sae(path: &Path, sae: &SaeParams) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(MODEL_MAGIC)?;
    buf.write_all(&FORMAT_VERSION.to_le_bytes())?;
    buf.write_all(&(sae.layer as u32).to_le_bytes())?;
    buf.write_all(&(sae.d_model() as u32).to_le_bytes())?;
    buf.write_all(&(sae.d_sae() as u32).to_le_bytes())?;
    let (kind, theta) = match sae.activation {
        SaeActivation::Relu => (0u8, 0.0f32),
        SaeActivation::JumpRelu { theta } => (1u8, theta as f32),
    };
    buf.push(kind);
    buf.write_all(&theta.to_le_bytes())?;
    let b_enc = sae.b_enc.as_array().clone().insert_axis(Axis(0));
    let b_dec = sae.b_dec.as_array().clone().insert_axis(Axis(0));
    write_block(&mut buf, "w_enc", sae.w_enc.as_array())?;
    write_block(&mut buf, "b_enc", &b_enc)?;
    write_block(&mut buf, "w_dec", sae.w_dec.as_array())?;
    write_block(&mut buf, "b_dec", &b_dec)?;
    atomic_write(path, &buf)?;
    Ok(())
}

pub fn load_sae(path: &Path) -> Result<SaeParams> {
    let data = fs::read(path)?;
    let mut r = data.as_slice();
    expect_magic(&mut r, MODEL_MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CkptError::Format(format!("unsupported version {version}")));
    }
    let layer = read_u32(&mut r)? as usize;
    let d_model = read_u32(&mut r)? as usize;
    let d_sae = read_u32(&mut r)? as usize;
    let mut kind = [0u8; 1];
    std::io::Read::read_exact(&mut r, &mut kind)?;
    let mut theta_bytes = [0u8; 4];
    std::io::Read::read_exact(&mut r, &mut theta_bytes)?;
    let theta = f32::from_le_bytes(theta_bytes) as f64;
    let activation = match kind[0] {
        0 => SaeActivation::Relu,
        1 => SaeActivation::JumpRelu { theta },
        k => return Err(CkptError::Format(format!("unknown activation kind {k}"))),
    };
    let mut take = |expected: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
        let (name, block) = read_block(&mut r)?;
        if name != expected {
            return Err(CkptError::Format(format!(
                "expected block {expected}, found {name}"
            )));
        }
        if block.nrows() != rows || block.ncols() != cols {
            return Err(CkptError::Format(format!(
                "block {name}: expected {rows}x{cols}, found {}x{}",
                block.nrows(),
                block.ncols()
            )));
        }
        Ok(block)
    };
    let w_enc = take("w_enc", d_model, d_sae)?;
    let b_enc = take("b_enc", 1, d_sae)?;
    let w_dec = take("w_dec", d_sae, d_model)?;
    let b_dec = take("b_dec", 1, d_model)?;
    SaeParams::new(
        layer,
        RealMatrix::from_array(w_enc),
        RealVector::from_array(b_enc.index_axis(Axis(0), 0).to_owned()),
        RealMatrix::from_array(w_dec),
        RealVector::from_array(b_dec.index_axis(Axis(0), 0).to_owned()),
        activation,
    )
    .map_err(|e| CkptError::Format(e.to_string()))
}

/// Persist residual states for one layer in single precision.
pub fn save_activation_dump(path: &Path, layer: usize, states: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(DUMP_MAGIC)?;
    buf.write_all(&FORMAT_VERSION.to_le_bytes())?;
    buf.write_all(&(layer as u32).to_le_bytes())?;
    buf.write_all(&(states.ncols() as u32).to_le_bytes())?;
    buf.write_all(&(states.nrows() as u64).to_le_bytes())?;
    for v in states.iter() {
        buf.write_all(&(*v as f32).to_le_bytes())?;
    }
    atomic_write(path, &buf)?;
    Ok(())
}

/// Load a dump back as (layer, states); values are the f32 quantizations
/// widened to f64.
pub fn load_activation_dump(path: &Path) -> Result<(usize, Array2<f64>)> {
    let data = fs::read(path)?;
    let mut r = data.as_slice();
    expect_magic(&mut r, DUMP_MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CkptError::Format(format!("unsupported version {version}")));
    }
    let layer = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut count_bytes = [0u8; 8];
    std::io::Read::read_exact(&mut r, &mut count_bytes)?;
    let count = u64::from_le_bytes(count_bytes) as usize;
    if r.len() != count * d * 4 {
        return Err(CkptError::Format(format!(
            "dump payload is {} bytes, expected {}",
            r.len(),
            count * d * 4
        )));
    }
    let mut data = Vec::with_capacity(count * d);
    let mut buf = [0u8; 4];
    for _ in 0..count * d {
        std::io::Read::read_exact(&mut r, &mut buf)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    let arr =
        Array2::from_shape_vec((count, d), data).map_err(|e| CkptError::Format(e.to_string()))?;
    Ok((layer, arr))
}
