//! Checkpoint files: the model configuration as text, then every running
//! statistic and parameter as binary tensor blobs.
//!
//! Layout after the `RFLC` magic and a u32 version: the configuration
//! text, epoch (u32), an adversarial-training flag (u8), the running
//! statistics (count, then name/mean/var per site), and the parameters
//! (count, then name/buffer per entry). Strings are u32 length + UTF-8;
//! integers are little-endian.

use super::model::Model;
use super::norm::RunningStat;
use super::ModelConfig;
use crate::config::Kv;
use crate::error::{Error, Result};
use crate::tensor::io::{read_buffer, write_buffer};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"RFLC";
const VERSION: u32 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|e| Error::Checkpoint(format!("truncated {what} length: {e}")))?;
    let len = u32::from_le_bytes(b4) as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated {what}: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("{what} is not UTF-8: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated {what}: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, &model.config.to_kv().to_text())?;
    w.write_all(&(model.epoch as u32).to_le_bytes())?;
    w.write_all(&[model.adversarially_trained as u8])?;
    w.write_all(&(model.running.len() as u32).to_le_bytes())?;
    for (name, stat) in &model.running {
        write_str(&mut w, name)?;
        write_buffer(&mut w, &stat.mean)?;
        write_buffer(&mut w, &stat.var)?;
    }
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, buf) in &model.params {
        write_str(&mut w, name)?;
        write_buffer(&mut w, buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, not a checkpoint file"
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let config_text = read_str(&mut r, "config")?;
    let config = ModelConfig::from_kv(&Kv::parse(&config_text)?)?;
    let epoch = read_u32(&mut r, "epoch")? as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)
        .map_err(|e| Error::Checkpoint(format!("truncated flags: {e}")))?;
    let n_running = read_u32(&mut r, "running count")?;
    let mut running = BTreeMap::new();
    for _ in 0..n_running {
        let name = read_str(&mut r, "running name")?;
        let mean = read_buffer(&mut r)?;
        let var = read_buffer(&mut r)?;
        running.insert(name, RunningStat { mean, var });
    }
    let n_params = read_u32(&mut r, "parameter count")?;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let name = read_str(&mut r, "parameter name")?;
        params.insert(name, read_buffer(&mut r)?);
    }
    Ok(Model {
        config,
        params,
        running,
        epoch,
        adversarially_trained: flag[0] != 0,
    })
}

/// Writes `ckpt_epoch_<k>` into `dir` for the model's current epoch.
pub fn save_epoch_checkpoint(dir: &Path, model: &Model) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("ckpt_epoch_{}", model.epoch));
    save_checkpoint(&path, model)?;
    Ok(path)
}
