//! Binary checkpoint format.
//!
//! ```text
//! magic        b"PMRT"
//! version      u32
//! config       u32 x 8 (n_enc_layers, n_dec_layers, d_model, n_heads,
//!              head_dim, ffn_dim, text_vocab, audio_vocab),
//!              u8 pm_rope_enabled, f64 progress_scale, f64 rope_base
//! count        u32
//! directory    per tensor: u32 name_len, UTF-8 name, u8 dtype (0 = f32),
//!              u32 rank, u32 x rank dims
//! payloads     f32 row-major, in directory order
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"PMRT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(buf)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(get(r)?) as usize)
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(get(r)?))
}

pub fn write_checkpoint(params: &ModelParams<f32>, w: &mut impl Write) -> Result<()> {
    let c = &params.config;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [
        c.n_enc_layers,
        c.n_dec_layers,
        c.d_model,
        c.n_heads,
        c.head_dim,
        c.ffn_dim,
        c.text_vocab,
        c.audio_vocab,
    ] {
        put_u32(w, v)?;
    }
    w.write_all(&[u8::from(c.pm_rope_enabled)])?;
    w.write_all(&c.progress_scale.to_le_bytes())?;
    w.write_all(&c.rope_base.to_le_bytes())?;

    put_u32(w, params.tensors.len())?;
    for (name, t) in params.names.iter().zip(&params.tensors) {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F32])?;
        put_u32(w, t.shape().len())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
    }
    for t in &params.tensors {
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParams<f32>> {
    if &get::<4>(r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(get(r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = get_u32(r)?;
    }
    let pm = get::<1>(r)?[0];
    if pm > 1 {
        return Err(Error::Checkpoint(format!("bad pm_rope flag {pm}")));
    }
    let config = ModelConfig {
        n_enc_layers: dims[0],
        n_dec_layers: dims[1],
        d_model: dims[2],
        n_heads: dims[3],
        head_dim: dims[4],
        ffn_dim: dims[5],
        text_vocab: dims[6],
        audio_vocab: dims[7],
        pm_rope_enabled: pm == 1,
        progress_scale: get_f64(r)?,
        rope_base: get_f64(r)?,
    };
    config.validate()?;

    let count = get_u32(r)?;
    let mut directory = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = get::<1>(r)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
        }
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        directory.push((name, shape));
    }
    let mut named = Vec::with_capacity(directory.len());
    for (name, shape) in directory {
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("{name}: truncated payload: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        named.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    ModelParams::from_named(&config, named)
}

pub fn save(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(Error::file(path))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(params, &mut w)?;
    w.flush().map_err(Error::file(path))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    let file = File::open(path).map_err(Error::file(path))?;
    read_checkpoint(&mut BufReader::new(file))
}
