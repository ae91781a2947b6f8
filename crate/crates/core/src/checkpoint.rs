//! Checkpoint archive.
//!
//! Layout, all integers little-endian:
//! 1. magic `FRCKPT01` (8 bytes);
//! 2. manifest length `n` (u64) followed by `n` bytes of JSON manifest;
//! 3. the parameter arrays, then the Adam first and second moments, each
//!    in manifest order as raw f64 values;
//! 4. SHA-256 of everything above (32 bytes).
//!
//! The manifest carries `format_version`, the model configuration and its
//! hash, the training counters and the sampler RNG position. Files are
//! written to a temporary sibling and renamed into place.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::network::{Model, Params};
use crate::tensor::{Shape, Tensor};
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"FRCKPT01";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Extra per-save information.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Meta {
    /// Loss that triggered the save (e.g. the epoch mean).
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngRecord {
    seed: [u8; 32],
    stream: u64,
    /// Decimal `u128`.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config_hash: String,
    model: ModelConfig,
    epoch: u64,
    step: u64,
    loss: Option<f64>,
    best_loss: Option<f64>,
    rng: RngRecord,
    arrays: Vec<ArrayRecord>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn encode(state: &TrainState, meta: &Meta) -> Result<Vec<u8>> {
    let model = &state.model;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: model.config.hash(),
        model: model.config.clone(),
        epoch: state.epoch,
        step: state.step,
        loss: finite(meta.loss),
        best_loss: finite(state.best_loss),
        rng: RngRecord {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        arrays: model
            .params
            .iter()
            .map(|(name, t)| ArrayRecord {
                name: name.to_string(),
                shape: t.shape().dims(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 3 * 8 * model.params.numel() + DIGEST_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for store in [&model.params, &state.moment1, &state.moment2] {
        for rec in &manifest.arrays {
            for v in store.get(&rec.name)?.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Write `state` atomically to `path`.
pub fn save(state: &TrainState, meta: &Meta, path: &Path) -> Result<()> {
    let bytes = encode(state, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Save a bare model (zero optimizer moments, counters at zero).
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let state = TrainState::new(model.clone(), 0);
    save(&state, &Meta { loss: f64::NAN }, path)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn describe_mismatch(found: &ModelConfig, expected: &ModelConfig) -> String {
    let mut diffs = Vec::new();
    if found.pyramid_depth != expected.pyramid_depth {
        diffs.push(format!("pyramid_depth {} vs {}", found.pyramid_depth, expected.pyramid_depth));
    }
    if found.base_channels != expected.base_channels {
        diffs.push(format!("base_channels {} vs {}", found.base_channels, expected.base_channels));
    }
    if found.correlation_range != expected.correlation_range {
        diffs.push(format!(
            "correlation_range {} vs {}",
            found.correlation_range, expected.correlation_range
        ));
    }
    if found.patch_scales != expected.patch_scales {
        diffs.push(format!("patch_scales {:?} vs {:?}", found.patch_scales, expected.patch_scales));
    }
    if diffs.is_empty() {
        diffs.push("ablation or refinement switches differ".into());
    }
    format!("checkpoint was saved with {}", diffs.join(", "))
}

/// Read a checkpoint. With `expected`, refuse archives saved under a
/// different model configuration.
pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<(TrainState, Meta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint or is truncated", path.display())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format(format!("{} is corrupt or truncated (digest mismatch)", path.display())));
    }
    let mut pos = MAGIC.len();
    let len = u64::from_le_bytes(take(body, &mut pos, 8)?.try_into().expect("8 bytes")) as usize;
    let manifest: Manifest =
        serde_json::from_slice(take(body, &mut pos, len)?).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    if manifest.config_hash != manifest.model.hash() {
        return Err(Error::Format("manifest config hash does not match its configuration".into()));
    }
    if let Some(want) = expected {
        if want.hash() != manifest.config_hash {
            return Err(Error::CheckpointMismatch(describe_mismatch(&manifest.model, want)));
        }
    }
    let mut stores = [Params::new(), Params::new(), Params::new()];
    for store in &mut stores {
        for rec in &manifest.arrays {
            let shape = Shape::from_dims(rec.shape);
            let raw = take(body, &mut pos, shape.numel() * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.insert(rec.name.clone(), Tensor::from_vec(shape, data)?);
        }
    }
    if pos != body.len() {
        return Err(Error::Format("trailing bytes after checkpoint arrays".into()));
    }
    let [params, moment1, moment2] = stores;
    let model = Model::with_params(manifest.model.clone(), params)?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(manifest.rng.seed);
    rng.set_stream(manifest.rng.stream);
    let word_pos: u128 = manifest
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Format("bad rng word position".into()))?;
    rng.set_word_pos(word_pos);
    let state = TrainState {
        model,
        moment1,
        moment2,
        step: manifest.step,
        epoch: manifest.epoch,
        rng,
        best_loss: manifest.best_loss.unwrap_or(f64::INFINITY),
    };
    Ok((state, Meta { loss: manifest.loss.unwrap_or(f64::NAN) }))
}

/// Load only the model.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    Ok(load(path, expected)?.0.model)
}
