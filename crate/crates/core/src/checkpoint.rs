//! On-disk checkpoints: a JSON manifest plus one binary blob per tensor.
//!
//! Layout of a checkpoint directory:
//!
//! ```text
//! manifest.json
//! params/{name}.bin
//! optimizer/{g,d}/state.json
//! optimizer/{g,d}/{name}.m.bin, {name}.v.bin
//! ```
//!
//! Blobs are `TGT1`, four little-endian `u32` dimensions, then `f32` LE data.
//! Directories are written under a temporary name and renamed into place, so a
//! crash never leaves a half-written checkpoint under the final name.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twingan_autograd::Tensor;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, AdamSlot};
use crate::params::ParamStore;
use crate::schedule::{Phase, StageState};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"TGT1";

/// Which networks the stored parameters are laid out for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub resolution: usize,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: RunConfig,
    /// Schedule position implied by `global_images_seen`.
    pub stage: StageState,
    pub layout: Layout,
    pub step: u64,
    pub global_images_seen: u64,
    /// Images drawn so far from the A and B streams.
    pub drawn: [u64; 2],
    pub seed: u64,
    /// Relative path of the optimizer state.
    pub optimizer: String,
    /// Tags of the derived random streams; each is keyed by `(seed, tag, index)`.
    pub rng_streams: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerState {
    config: AdamConfig,
    steps: BTreeMap<String, u64>,
}

/// Everything needed to rebuild a trainer.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + t.len() * 4);
    buf.extend_from_slice(MAGIC);
    for d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if buf.len() < 20 || &buf[..4] != MAGIC {
        return Err(bad("not a tensor blob"));
    }
    let mut shape = [0usize; 4];
    for (i, d) in shape.iter_mut().enumerate() {
        let o = 4 + i * 4;
        *d = u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
    }
    let n: usize = shape.iter().product();
    if buf.len() != 20 + n * 4 {
        return Err(bad("truncated data"));
    }
    let data = buf[20..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::from_vec(shape, data))
}

fn write_optimizer(dir: &Path, opt: &Adam) -> Result<()> {
    fs::create_dir_all(dir)?;
    let state = OptimizerState {
        config: opt.config,
        steps: opt.slots.iter().map(|(n, s)| (n.clone(), s.steps)).collect(),
    };
    fs::write(dir.join("state.json"), serde_json::to_vec_pretty(&state)?)?;
    for (name, slot) in &opt.slots {
        write_tensor(&dir.join(format!("{name}.m.bin")), &slot.m)?;
        write_tensor(&dir.join(format!("{name}.v.bin")), &slot.v)?;
    }
    Ok(())
}

fn read_optimizer(dir: &Path) -> Result<Adam> {
    let state: OptimizerState = serde_json::from_slice(&fs::read(dir.join("state.json"))?)?;
    let mut opt = Adam::new(state.config);
    for (name, steps) in state.steps {
        let m = read_tensor(&dir.join(format!("{name}.m.bin")))?;
        let v = read_tensor(&dir.join(format!("{name}.v.bin")))?;
        opt.slots.insert(name, AdamSlot { m, v, steps });
    }
    Ok(opt)
}

/// Writes `ckpt` to `dir`, replacing any previous checkpoint of that name.
pub fn save(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("invalid checkpoint path {}", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(tmp.join("params"))?;
    for (n, t) in ckpt.params.iter() {
        write_tensor(&tmp.join("params").join(format!("{n}.bin")), t)?;
    }
    write_optimizer(&tmp.join("optimizer/g"), &ckpt.opt_g)?;
    write_optimizer(&tmp.join("optimizer/d"), &ckpt.opt_d)?;
    let mut f = fs::File::create(tmp.join(MANIFEST))?;
    f.write_all(&serde_json::to_vec_pretty(&ckpt.manifest)?)?;
    f.sync_all()?;
    if dir.exists() {
        let old = parent.join(format!(".{name}.old"));
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dir, &old)?;
        fs::rename(&tmp, dir)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, dir)?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    let bytes = fs::read(&manifest_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported schema version {} (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let mut params = ParamStore::new();
    for entry in fs::read_dir(dir.join("params"))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".bin")) else {
            continue;
        };
        params.insert(name.to_string(), read_tensor(&path)?);
    }
    let opt_dir = dir.join(&manifest.optimizer);
    Ok(Checkpoint {
        opt_g: read_optimizer(&opt_dir.join("g"))?,
        opt_d: read_optimizer(&opt_dir.join("d"))?,
        manifest,
        params,
    })
}

/// Checkpoint directories under `root`, ordered by the step they were taken at.
pub fn list(root: &Path) -> Result<Vec<(PathBuf, Manifest)>> {
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let hidden = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
        if hidden || !path.join(MANIFEST).exists() {
            continue;
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(path.join(MANIFEST))?)?;
        out.push((path, manifest));
    }
    out.sort_by(|a, b| (a.1.step, &a.0).cmp(&(b.1.step, &b.0)));
    Ok(out)
}
