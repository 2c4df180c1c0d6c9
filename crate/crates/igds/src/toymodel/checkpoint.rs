//! Binary checkpoint container.
//!
//! Layout: magic `IGDS`, format version u32, the six ModelConfig fields as
//! little-endian u32s, then named weight blocks, each as (name length u16,
//! name UTF-8, rows u32, cols u32, row-major f32 values). Weights are held
//! in f64 in memory and quantized to f32 on write; load -> save round-trips
//! are byte-identical.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::{LayerParams, ModelConfig, TransformerParams};

pub const MODEL_MAGIC: &[u8; 4] = b"IGDS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CkptError>;

pub(crate) fn write_block<W: Write>(w: &mut W, name: &str, block: &Array2<f64>) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(CkptError::Format(format!("block name too long: {name}")));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&(block.nrows() as u32).to_le_bytes())?;
    w.write_all(&(block.ncols() as u32).to_le_bytes())?;
    for v in block.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_block<R: Read>(r: &mut R) -> Result<(String, Array2<f64>)> {
    let mut len2 = [0u8; 2];
    r.read_exact(&mut len2)?;
    let name_len = u16::from_le_bytes(len2) as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| CkptError::Format("block name is not UTF-8".into()))?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 4];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    let arr = Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| CkptError::Format(e.to_string()))?;
    Ok((name, arr))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(CkptError::Format(format!(
            "bad magic: expected {:?}, got {:?}",
            magic, buf
        )));
    }
    Ok(())
}

/// Write config header and all weight blocks in canonical order, atomically.
pub fn save_model(path: &Path, cfg: &ModelConfig, params: &TransformerParams) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(MODEL_MAGIC)?;
    buf.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for field in [
        cfg.vocab_size as u32,
        cfg.d_model as u32,
        cfg.n_layers as u32,
        cfg.n_heads as u32,
        cfg.max_seq_len as u32,
        cfg.seed,
    ] {
        buf.write_all(&field.to_le_bytes())?;
    }
    for (name, block) in params.named_blocks() {
        write_block(&mut buf, &name, block)?;
    }
    atomic_write(path, &buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, TransformerParams)> {
    let data = fs::read(path)?;
    let mut r = data.as_slice();
    expect_magic(&mut r, MODEL_MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CkptError::Format(format!("unsupported version {version}")));
    }
    let cfg = ModelConfig {
        vocab_size: read_u32(&mut r)? as usize,
        d_model: read_u32(&mut r)? as usize,
        n_layers: read_u32(&mut r)? as usize,
        n_heads: read_u32(&mut r)? as usize,
        max_seq_len: read_u32(&mut r)? as usize,
        seed: read_u32(&mut r)?,
    };
    cfg.validate()
        .map_err(|e| CkptError::Format(e.to_string()))?;

    let d = cfg.d_model;
    let hidden = 4 * d;
    let mut take = |expected_name: String, rows: usize, cols: usize| -> Result<Array2<f64>> {
        let (name, block) = read_block(&mut r)?;
        if name != expected_name {
            return Err(CkptError::Format(format!(
                "expected block {expected_name}, found {name}"
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

    let token_embed = take("token_embed".into(), cfg.vocab_size, d)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(LayerParams {
            ln1_gain: take(format!("layer{i}.ln1_gain"), 1, d)?,
            ln1_bias: take(format!("layer{i}.ln1_bias"), 1, d)?,
            w_q: take(format!("layer{i}.w_q"), d, d)?,
            w_k: take(format!("layer{i}.w_k"), d, d)?,
            w_v: take(format!("layer{i}.w_v"), d, d)?,
            w_o: take(format!("layer{i}.w_o"), d, d)?,
            ln2_gain: take(format!("layer{i}.ln2_gain"), 1, d)?,
            ln2_bias: take(format!("layer{i}.ln2_bias"), 1, d)?,
            w_mlp_in: take(format!("layer{i}.w_mlp_in"), d, hidden)?,
            b_mlp_in: take(format!("layer{i}.b_mlp_in"), 1, hidden)?,
            w_mlp_out: take(format!("layer{i}.w_mlp_out"), hidden, d)?,
            b_mlp_out: take(format!("layer{i}.b_mlp_out"), 1, d)?,
        });
    }
    let final_gain = take("final_gain".into(), 1, d)?;
    let final_bias = take("final_bias".into(), 1, d)?;
    let unembed = take("unembed".into(), d, cfg.vocab_size)?;
    if !r.is_empty() {
        return Err(CkptError::Format(format!(
            "{} trailing bytes after last block",
            r.len()
        )));
    }
    Ok((
        cfg,
        TransformerParams {
            token_embed,
            layers,
            final_gain,
            final_bias,
            unembed,
        },
    ))
}

/// Write via temp file in the same directory, then rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "file".into()),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{tiny_config, Model};

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(tiny_config()).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_model(&p1, &model.cfg, &model.params).unwrap();
        let (cfg, params) = load_model(&p1).unwrap();
        assert_eq!(cfg, model.cfg);
        save_model(&p2, &cfg, &params).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(tiny_config()).unwrap();
        let p = dir.path().join("c.ckpt");
        save_model(&p, &model.cfg, &model.params).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(load_model(&p).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        fs::write(&p, b"NOPE0000").unwrap();
        assert!(matches!(load_model(&p), Err(CkptError::Format(_))));
    }
}
