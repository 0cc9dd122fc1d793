//! Model checkpoints: a JSON manifest plus a flat little-endian payload.
//!
//! The payload holds the global parameters followed by one block parameter
//! set per storage slot, ordered by the slot's representative layer. Each
//! block set follows [`LayerLayout`](super::LayerLayout) order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::scalar::Scalar;
use super::store::ParameterStore;
use crate::error::{Error, Result};
use crate::tying::TyingState;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotEntry {
    /// Lowest layer using this slot.
    pub representative: usize,
    /// Element offset into the payload.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub step: u64,
    pub tying: TyingState,
    pub frozen: Vec<bool>,
    pub slot_of: Vec<usize>,
    pub first_transition_pending: bool,
    pub globals_len: usize,
    pub slots: Vec<SlotEntry>,
}

fn dtype_name<T: Scalar>() -> &'static str {
    match T::BYTES {
        4 => "f32",
        8 => "f64",
        _ => unreachable!("unsupported scalar width"),
    }
}

/// Checked sizes (layer, globals) so hostile configs cannot overflow.
fn checked_sizes(cfg: &ModelConfig) -> Option<(usize, usize)> {
    let (d, f, v, c) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.context_length);
    let dd = d.checked_mul(d)?;
    let df = d.checked_mul(f)?;
    let layer = dd
        .checked_mul(4)?
        .checked_add(d.checked_mul(4)?)?
        .checked_add(df.checked_mul(2)?)?
        .checked_add(f)?
        .checked_add(d.checked_mul(5)?)?;
    let vd = v.checked_mul(d)?;
    let mut globals = vd.checked_add(c.checked_mul(d)?)?.checked_add(d.checked_mul(2)?)?.checked_add(v)?;
    if !cfg.tie_embedding_to_head {
        globals = globals.checked_add(vd)?;
    }
    Some((layer, globals))
}

pub fn encode<T: Scalar>(store: &ParameterStore<T>, step: u64) -> (CheckpointManifest, Vec<u8>) {
    let cfg = store.config().clone();
    let n = cfg.n_layers;
    let mut payload = Vec::new();
    for &x in store.globals() {
        x.push_le(&mut payload);
    }
    let globals_len = store.globals().len();
    let mut offset = globals_len;
    let mut slots = Vec::with_capacity(store.slot_count());
    for s in 0..store.slot_count() {
        let representative = (0..n)
            .find(|&i| store.slot_of(i) == s)
            .expect("compact slots are all referenced");
        let params = store.slot_params(s);
        for &x in params {
            x.push_le(&mut payload);
        }
        slots.push(SlotEntry {
            representative,
            offset,
            len: params.len(),
        });
        offset += params.len();
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        dtype: dtype_name::<T>().to_string(),
        config: cfg,
        step,
        tying: store.tying().clone(),
        frozen: store.frozen().to_vec(),
        slot_of: store.slot_map().to_vec(),
        first_transition_pending: store.first_transition_pending(),
        globals_len,
        slots,
    };
    (manifest, payload)
}

/// Rebuilds a store from a manifest and its payload. Optimizer moments are
/// not part of the checkpoint and restart at zero.
pub fn decode<T: Scalar>(manifest: &CheckpointManifest, payload: &[u8]) -> Result<ParameterStore<T>> {
    let bad = |m: &str| Error::format("checkpoint", m);
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(bad("unsupported format version"));
    }
    if manifest.dtype != dtype_name::<T>() {
        return Err(bad("dtype does not match the requested precision"));
    }
    manifest.config.validate()?;
    let (layer_len, globals_len) =
        checked_sizes(&manifest.config).ok_or_else(|| bad("dimensions overflow"))?;
    if manifest.globals_len != globals_len {
        return Err(bad("globals_len does not match config"));
    }
    let elems = manifest
        .slots
        .len()
        .checked_mul(layer_len)
        .and_then(|x| x.checked_add(globals_len))
        .ok_or_else(|| bad("dimensions overflow"))?;
    if payload.len() != elems.saturating_mul(T::BYTES) || elems.checked_mul(T::BYTES).is_none() {
        return Err(bad("payload length does not match manifest"));
    }
    let mut expected_offset = globals_len;
    for (s, entry) in manifest.slots.iter().enumerate() {
        if entry.len != layer_len || entry.offset != expected_offset {
            return Err(bad("slot table inconsistent"));
        }
        if manifest.slot_of.get(entry.representative) != Some(&s)
            || manifest.slot_of[..entry.representative].contains(&s)
        {
            return Err(bad("slot representative inconsistent"));
        }
        expected_offset += layer_len;
    }
    let read = |start: usize, len: usize| -> Vec<T> {
        payload[start * T::BYTES..(start + len) * T::BYTES]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect()
    };
    let globals = read(0, globals_len);
    let slots = manifest
        .slots
        .iter()
        .map(|e| read(e.offset, e.len))
        .collect();
    ParameterStore::from_parts(
        manifest.config.clone(),
        manifest.tying.clone(),
        manifest.frozen.clone(),
        manifest.slot_of.clone(),
        globals,
        slots,
        manifest.first_transition_pending,
    )
}

/// Parses manifest text and payload bytes together.
pub fn decode_bytes<T: Scalar>(manifest_json: &[u8], payload: &[u8]) -> Result<ParameterStore<T>> {
    let manifest: CheckpointManifest = serde_json::from_slice(manifest_json)?;
    decode(&manifest, payload)
}

/// Paths of the two files making up checkpoint `name` inside `dir`.
pub fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.json")), dir.join(format!("{name}.bin")))
}

pub fn save<T: Scalar>(store: &ParameterStore<T>, step: u64, dir: &Path, name: &str) -> Result<()> {
    let (manifest, payload) = encode(store, step);
    let (mpath, ppath) = paths(dir, name);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    fs::write(&ppath, payload).map_err(|e| Error::io(&ppath, e))?;
    Ok(())
}

pub fn load<T: Scalar>(dir: &Path, name: &str) -> Result<(ParameterStore<T>, CheckpointManifest)> {
    let (mpath, ppath) = paths(dir, name);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let payload = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
    let store = decode(&manifest, &payload)?;
    Ok((store, manifest))
}
