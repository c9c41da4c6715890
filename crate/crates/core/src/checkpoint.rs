//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MWNMT" | u32 version | u64 manifest length | manifest (JSON) | payload
//! ```
//!
//! The manifest holds the model configuration, the attention registry, the
//! trained directions and one `(path, shape, offset)` entry per array; the
//! payload is the concatenation of those arrays as IEEE-754 `f64`. Optimizer
//! moments, when present, are stored as `adam/first/<path>` and
//! `adam/second/<path>`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiWayModel, SHARED_ATTENTION};
use crate::tensor::Tensor;
use crate::training::AdamState;

pub const MAGIC: &[u8; 5] = b"MWNMT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 5 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub path: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ModelConfig,
    /// Attention ids other than the shared one, in creation order.
    pub attention_clones: Vec<String>,
    /// `(source, target, attention id)`.
    pub routes: Vec<(String, String, String)>,
    pub trained: Vec<(String, String)>,
    pub optimizer_step: Option<u64>,
    pub entries: Vec<Entry>,
    pub payload_bytes: u64,
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Serialize `model` (and optionally optimizer state) to bytes.
pub fn to_bytes(model: &MultiWayModel, optimizer: Option<&AdamState>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |path: String, t: &Tensor, entries: &mut Vec<Entry>| {
        entries.push(Entry {
            path,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        payload.extend_from_slice(&t.to_le_bytes());
    };
    for (_, name, t) in model.store().iter() {
        push(name.to_string(), t, &mut entries);
    }
    if let Some(adam) = optimizer {
        for (kind, moments) in [("first", &adam.first), ("second", &adam.second)] {
            for (id, t) in moments {
                push(format!("adam/{kind}/{}", model.store().name(*id)), t, &mut entries);
            }
        }
    }
    let manifest = Manifest {
        config: model.config().clone(),
        attention_clones: model
            .store()
            .iter()
            .filter_map(|(_, name, _)| name.strip_prefix("attention/")?.strip_suffix("/W_key"))
            .filter(|a| *a != SHARED_ATTENTION)
            .map(str::to_string)
            .collect(),
        routes: model
            .routes()
            .iter()
            .map(|((s, t), a)| (s.clone(), t.clone(), a.clone()))
            .collect(),
        trained: model.trained_directions().iter().cloned().collect(),
        optimizer_step: optimizer.map(|a| a.step),
        entries,
        payload_bytes: payload.len() as u64,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Write a checkpoint atomically (temporary file, then rename).
pub fn save(model: &MultiWayModel, optimizer: Option<&AdamState>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, optimizer)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(".tmp");
    let tmp = Path::new(&tmp_name);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(tmp, e))?;
    f.sync_all().map_err(|e| Error::io(tmp, e))?;
    drop(f);
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

/// Parse and validate the header and manifest; returns the manifest and the
/// payload slice.
pub fn read_manifest<'a>(bytes: &'a [u8], path: &Path) -> Result<(Manifest, &'a [u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(path, "corrupt payload: file shorter than header"));
    }
    if &bytes[..5] != MAGIC {
        return Err(corrupt(path, "bad magic, not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(
            path,
            format!("unsupported format version {version} (expected {VERSION})"),
        ));
    }
    let mlen = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
    let end = usize::try_from(mlen)
        .ok()
        .and_then(|m| HEADER_LEN.checked_add(m))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(path, "corrupt payload: manifest extends past end of file"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..end])
        .map_err(|e| corrupt(path, format!("corrupt manifest: {e}")))?;
    let payload = &bytes[end..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(corrupt(
            path,
            format!(
                "corrupt payload: {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_bytes
            ),
        ));
    }
    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n: u64 = e.shape.iter().map(|&d| d as u64).product();
        let stop = n
            .checked_mul(8)
            .and_then(|b| e.offset.checked_add(b))
            .filter(|&s| s <= manifest.payload_bytes)
            .ok_or_else(|| corrupt(path, format!("corrupt payload: entry `{}` out of bounds", e.path)))?;
        spans.push((e.offset, stop));
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].1 > w[1].0) {
        return Err(corrupt(path, "corrupt manifest: overlapping entries"));
    }
    Ok((manifest, payload))
}

fn tensor_at(payload: &[u8], e: &Entry) -> Result<Tensor> {
    let start = e.offset as usize;
    let n: usize = e.shape.iter().product();
    let data = payload[start..start + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(e.shape.clone(), data)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(MultiWayModel, Option<AdamState>)> {
    let (manifest, payload) = read_manifest(bytes, path)?;
    let mut model = MultiWayModel::new(manifest.config.clone()).map_err(|e| corrupt(path, e.to_string()))?;
    model
        .restore_registry(&manifest.attention_clones, &manifest.routes, &manifest.trained)
        .map_err(|e| corrupt(path, format!("bad attention registry: {e}")))?;
    let by_path: HashMap<&str, &Entry> = manifest.entries.iter().map(|e| (e.path.as_str(), e)).collect();
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let name = model.store().name(id).to_string();
        let e = by_path
            .get(name.as_str())
            .ok_or_else(|| corrupt(path, format!("missing parameter `{name}`")))?;
        if e.shape != model.store().get(id).shape() {
            return Err(corrupt(
                path,
                format!(
                    "shape mismatch for `{name}`: file {:?}, configuration {:?}",
                    e.shape,
                    model.store().get(id).shape()
                ),
            ));
        }
        *model.store_mut().get_mut(id) = tensor_at(payload, e)?;
    }
    let optimizer = match manifest.optimizer_step {
        None => None,
        Some(step) => {
            let mut adam = AdamState {
                step,
                ..AdamState::default()
            };
            for e in &manifest.entries {
                let Some(rest) = e.path.strip_prefix("adam/") else { continue };
                let (kind, name) = rest.split_once('/').ok_or_else(|| corrupt(path, format!("bad entry `{}`", e.path)))?;
                let id = model
                    .store()
                    .id(name)
                    .ok_or_else(|| corrupt(path, format!("optimizer entry for unknown `{name}`")))?;
                let t = tensor_at(payload, e)?;
                match kind {
                    "first" => adam.first.insert(id, t),
                    "second" => adam.second.insert(id, t),
                    _ => return Err(corrupt(path, format!("bad entry `{}`", e.path))),
                };
            }
            Some(adam)
        }
    };
    Ok((model, optimizer))
}

pub fn load(path: &Path) -> Result<(MultiWayModel, Option<AdamState>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

pub fn load_model(path: &Path) -> Result<MultiWayModel> {
    load(path).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LanguageVocab;
    use crate::params::ParamId;
    use crate::zero_resource::clone_attention;

    fn model() -> MultiWayModel {
        let v = |n: &str| LanguageVocab::with_size(n, 9);
        let mut cfg = ModelConfig::new(vec![v("A"), v("B")], vec![v("A"), v("C")]);
        cfg.embed_dim = 3;
        cfg.hidden_dim = 4;
        cfg.attn_hidden_dim = 3;
        cfg.readout_dim = 5;
        MultiWayModel::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = model();
        m.store_mut().get_mut(ParamId(0)).data_mut()[0] = -0.0;
        m.mark_trained("A", "C");
        let id = clone_attention(&mut m, "B", "C").unwrap();
        let v = m.attention(&id).unwrap().v;
        m.store_mut().get_mut(v).data_mut()[0] = 0.125;
        let mut adam = AdamState {
            step: 3,
            ..AdamState::default()
        };
        adam.first.insert(ParamId(1), m.store().get(ParamId(1)).map(|x| x * 2.0));
        adam.second.insert(ParamId(1), m.store().get(ParamId(1)).map(|x| x * x));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&m, Some(&adam), &path).unwrap();
        let (back, opt) = load(&path).unwrap();
        assert!(back.store().bit_eq(m.store()));
        assert_eq!(back.attention_id_for("B", "C"), id);
        assert_eq!(back.attention_id_for("A", "C"), SHARED_ATTENTION);
        assert!(back.is_trained("A", "C"));
        assert_eq!(opt.unwrap(), adam);

        let again = dir.path().join("m2.ckpt");
        save(&back, Some(&adam), &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }

    #[test]
    fn rejects_damaged_files() {
        let m = model();
        let bytes = to_bytes(&m, None).unwrap();
        let p = Path::new("x.ckpt");

        let err = from_bytes(&bytes[..bytes.len() - 8], p).unwrap_err().to_string();
        assert!(err.contains("corrupt payload"), "{err}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad, p).unwrap_err().to_string().contains("magic"));

        let mut bumped = bytes.clone();
        bumped[5..9].copy_from_slice(&(VERSION + 1).to_le_bytes());
        let err = from_bytes(&bumped, p).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");

        assert!(from_bytes(&bytes[..10], p).is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let m = model();
        let bytes = to_bytes(&m, None).unwrap();
        let (mut manifest, payload) = read_manifest(&bytes, Path::new("x")).unwrap();
        manifest.config.hidden_dim = 5;
        let json = serde_json::to_vec_pretty(&manifest).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(payload);
        let err = from_bytes(&out, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("shape mismatch"), "{err}");
    }

    #[test]
    fn manifest_offsets_are_disjoint_and_in_bounds() {
        let bytes = to_bytes(&model(), None).unwrap();
        let (manifest, payload) = read_manifest(&bytes, Path::new("x")).unwrap();
        let mut expected = 0;
        for e in &manifest.entries {
            assert_eq!(e.offset, expected);
            expected += 8 * e.shape.iter().product::<usize>() as u64;
        }
        assert_eq!(expected, payload.len() as u64);
    }
}
