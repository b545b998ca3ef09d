//! Self-describing checkpoint archive.
//!
//! Layout: the 8-byte magic `FACDIFF\0`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! every tensor as little-endian f32 in manifest order. The manifest carries
//! the architecture, variant, training configuration, step counter, noise
//! schedule and a tensor directory, so a checkpoint can be rebuilt without
//! any outside configuration.

use std::io::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, SigmaMode};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::trainer::{TrainConfig, TrainState};
use crate::unet::{ArchSpec, FactorizedUnet, Variant};

pub const MAGIC: &[u8; 8] = b"FACDIFF\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Param,
    Ema,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub betas: Vec<f64>,
    pub sigma_mode: SigmaMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arch: ArchSpec,
    pub variant: Variant,
    pub train: TrainConfig,
    pub step: u64,
    pub schedule: Option<ScheduleRecord>,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: the training state and, if recorded, the schedule.
#[derive(Debug)]
pub struct Checkpoint {
    pub state: TrainState,
    pub schedule: Option<NoiseSchedule>,
}

fn f32_bytes(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serialise `state` (and optionally the schedule it was trained with).
pub fn to_bytes(state: &TrainState, schedule: Option<&NoiseSchedule>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let (m, v) = state.moments();
    let groups: [(Group, Vec<(&str, Tensor)>); 4] = [
        (Group::Param, state.params().iter().map(|(n, v)| (n, v.as_tensor().clone())).collect()),
        (Group::Ema, state.ema_params().iter().map(|(n, v)| (n, v.as_tensor().clone())).collect()),
        (Group::AdamM, state.params().names().iter().map(|n| n.as_str()).zip(m.iter().cloned()).collect()),
        (Group::AdamV, state.params().names().iter().map(|n| n.as_str()).zip(v.iter().cloned()).collect()),
    ];
    for (group, list) in &groups {
        for (name, t) in list {
            tensors.push(TensorEntry {
                name: name.to_string(),
                group: *group,
                shape: t.dims().to_vec(),
            });
            f32_bytes(t, &mut payload)?;
        }
    }
    let manifest = Manifest {
        arch: state.arch.clone(),
        variant: state.variant,
        train: state.config.clone(),
        step: state.step,
        schedule: schedule.map(|s| ScheduleRecord {
            betas: s.beta_table().to_vec(),
            sigma_mode: s.sigma_mode(),
        }),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest is serialisable");
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Write atomically: a temporary sibling file is renamed over `path`.
pub fn save(state: &TrainState, schedule: Option<&NoiseSchedule>, path: &Path) -> Result<()> {
    let bytes = to_bytes(state, schedule)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|e| *e <= bytes.len()).ok_or_else(|| {
        Error::Truncated(format!("{what} needs {n} bytes at offset {pos}, file has {}", bytes.len()))
    })?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

/// Read only the header and manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8, "magic")? != MAGIC {
        return Err(Error::Malformed("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(take(bytes, &mut pos, 8, "manifest length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Malformed("manifest length overflows".into()))?;
    let json = take(bytes, &mut pos, len, "manifest")?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Malformed(format!("manifest: {e}")))?;
    manifest.arch.validate()?;
    Ok((manifest, pos))
}

/// Parse a checkpoint. With `expected`, the stored architecture must match.
pub fn from_bytes(bytes: &[u8], expected: Option<&ArchSpec>) -> Result<Checkpoint> {
    let (manifest, mut pos) = read_manifest(bytes)?;
    if let Some(want) = expected {
        if *want != manifest.arch {
            return Err(Error::config(
                "model",
                format!("checkpoint architecture {:?} differs from the configured {:?}", manifest.arch, want),
            ));
        }
    }
    // Reference layout: names and shapes the architecture defines.
    let mut reference = ParamStore::new(DType::F32, manifest.train.seed);
    FactorizedUnet::build(&manifest.arch, manifest.variant, &mut reference, true)?;

    let mut params = ParamStore::new(DType::F32, manifest.train.seed);
    let mut ema = ParamStore::new(DType::F32, manifest.train.seed);
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    for entry in &manifest.tensors {
        let want = reference
            .get(&entry.name)
            .ok_or_else(|| Error::Malformed(format!("unexpected tensor `{}`", entry.name)))?;
        if want.dims() != entry.shape.as_slice() {
            return Err(Error::TensorShape {
                tensor: entry.name.clone(),
                expected: want.dims().to_vec(),
                got: entry.shape.clone(),
            });
        }
        let n: usize = entry.shape.iter().product();
        let raw = take(bytes, &mut pos, n * 4, &format!("tensor `{}`", entry.name))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_vec(data, entry.shape.as_slice(), &Device::Cpu)?;
        match entry.group {
            Group::Param => params.insert(&entry.name, &t)?,
            Group::Ema => ema.insert(&entry.name, &t)?,
            Group::AdamM => adam_m.push((entry.name.clone(), t)),
            Group::AdamV => adam_v.push((entry.name.clone(), t)),
        }
    }
    if pos != bytes.len() {
        return Err(Error::Malformed(format!("{} trailing bytes after the last tensor", bytes.len() - pos)));
    }
    for (label, store) in [("param", &params), ("ema", &ema)] {
        if let Some(missing) = reference.names().iter().find(|n| store.get(n).is_none()) {
            return Err(Error::Malformed(format!("missing {label} tensor `{missing}`")));
        }
        if store.names() != reference.names() {
            return Err(Error::Malformed(format!("{label} tensors are out of order")));
        }
    }
    let order = |list: Vec<(String, Tensor)>, label: &str| -> Result<Vec<Tensor>> {
        if list.len() != reference.len() || list.iter().zip(reference.names()).any(|((a, _), b)| a != b) {
            return Err(Error::Malformed(format!("{label} moments do not match the parameter list")));
        }
        Ok(list.into_iter().map(|(_, t)| t).collect())
    };
    let moments = (order(adam_m, "first")?, order(adam_v, "second")?);
    let state = TrainState::from_parts(
        &manifest.arch,
        manifest.variant,
        &manifest.train,
        params,
        Some(ema),
        Some(moments),
        manifest.step,
    )?;
    let schedule = match manifest.schedule {
        Some(s) => Some(NoiseSchedule::from_betas(s.betas, s.sigma_mode)?),
        None => None,
    };
    Ok(Checkpoint { state, schedule })
}

pub fn load_full(path: &Path, expected: Option<&ArchSpec>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected)
}

pub fn load(path: &Path, expected: Option<&ArchSpec>) -> Result<TrainState> {
    Ok(load_full(path, expected)?.state)
}
