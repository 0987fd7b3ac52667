//! Versioned binary checkpoints.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic   8 bytes  "TCASTCKP"
//! version u32
//! config  u32 length + UTF-8 JSON of the model config
//! count   u32
//! tensor  u32 name length, name, u64 rows, u64 cols, rows*cols f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{CombinedModelParams, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Parameters;

const MAGIC: &[u8; 8] = b"TCASTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &CombinedModelParams, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&params.config).map_err(std::io::Error::other)?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    let tensors = params.named_tensors("");
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for v in t.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parses a checkpoint; `label` names the source in error messages.
pub fn read_checkpoint<R: Read>(mut r: R, label: &Path) -> Result<CombinedModelParams> {
    let corrupt = |reason: String| Error::Corrupt {
        path: label.to_path_buf(),
        reason,
    };
    let io = |e: std::io::Error| corrupt(format!("truncated: {e}"));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint".into()));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r).map_err(io)? as usize;
    let mut config = vec![0u8; len];
    r.read_exact(&mut config).map_err(io)?;
    let config: ModelConfig =
        serde_json::from_slice(&config).map_err(|e| corrupt(format!("config: {e}")))?;

    // Build a zeroed skeleton from the config, then fill it by name.
    let mut params = {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        CombinedModelParams::new(config, &mut rng)?
    };
    let names: Vec<(String, (usize, usize))> = params
        .named_tensors("")
        .into_iter()
        .map(|(n, t)| (n, t.shape()))
        .collect();
    let count = read_u32(&mut r).map_err(io)? as usize;
    if count != names.len() {
        return Err(corrupt(format!("{count} tensors, config implies {}", names.len())));
    }
    let mut tensors = params.tensors_mut();
    for (i, (expected, shape)) in names.iter().enumerate() {
        let name_len = read_u32(&mut r).map_err(io)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8".into()))?;
        if &name != expected {
            return Err(corrupt(format!("tensor {i} is '{name}', expected '{expected}'")));
        }
        let rows = read_u64(&mut r).map_err(io)? as usize;
        let cols = read_u64(&mut r).map_err(io)? as usize;
        if (rows, cols) != *shape {
            return Err(corrupt(format!(
                "'{name}' is {rows}x{cols}, expected {}x{}",
                shape.0, shape.1
            )));
        }
        let mut buf = [0u8; 8];
        for v in tensors[i].as_mut_slice() {
            r.read_exact(&mut buf).map_err(io)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    drop(tensors);
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", rest.len())));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &CombinedModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CombinedModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::tiny_config;
    use crate::losses::ProgressLossKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let model =
            CombinedModelParams::new(tiny_config(ProgressLossKind::CpLoss), &mut ChaCha8Rng::seed_from_u64(3))
                .unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice(), Path::new("mem")).unwrap();
        for (a, b) in model.tensors().iter().zip(back.tensors()) {
            let a: Vec<u64> = a.as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = b.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(model, back);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let model =
            CombinedModelParams::new(tiny_config(ProgressLossKind::L2), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();

        let truncated = &bytes[..bytes.len() - 3];
        assert!(read_checkpoint(truncated, Path::new("t")).is_err());

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(bad_magic.as_slice(), Path::new("m")).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(read_checkpoint(trailing.as_slice(), Path::new("x")).is_err());
    }
}
