//! Binary checkpoints: a versioned JSON manifest followed by every parameter
//! tensor as little-endian floats, in parameter-name order.
//!
//! Layout: the 8-byte magic `TDCKPT\0\0`, the manifest length as a
//! little-endian `u64`, the manifest, then the tensor data.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tokdetok_core::downstream::{SetupConfig, TaskKind, TaskModel};
use tokdetok_core::model::{Bundle, BundleConfig, Stage};
use tokdetok_core::{ParamStore, Real, Tensor};

use crate::error::{Error, Result};
use crate::{io, vocab_file};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TDCKPT\0\0";
const WIDTH: usize = std::mem::size_of::<Real>();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub setup: SetupConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub stage: Stage,
    pub config: BundleConfig,
    /// The vocabulary in its text file format.
    pub vocab: String,
    pub task: Option<TaskManifest>,
    pub params: Vec<ParamEntry>,
}

fn dtype() -> String {
    format!("f{}", WIDTH * 8)
}

pub fn to_bytes(bundle: &Bundle, task: Option<TaskManifest>) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: dtype(),
        stage: bundle.stage,
        config: bundle.config.clone(),
        vocab: vocab_file::render(&bundle.vocab),
        task,
        params: bundle
            .store
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Invalid {
        field: "manifest",
        reason: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(16 + json.len() + bundle.store.count("") * WIDTH);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in bundle.store.iter() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits checkpoint bytes into the manifest and a parameter store.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<(Manifest, ParamStore)> {
    let bad = |msg: String| Error::Config {
        path: origin.to_path_buf(),
        msg,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a tokdetok checkpoint".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.dtype != dtype() {
        return Err(bad(format!("checkpoint holds {} values, this build uses {}", manifest.dtype, dtype())));
    }
    let mut data = &bytes[16 + len..];
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        if data.len() < n * WIDTH {
            return Err(bad(format!("truncated data for `{}`", p.name)));
        }
        let vals: Vec<Real> = data[..n * WIDTH]
            .chunks_exact(WIDTH)
            .map(|c| Real::from_le_bytes(c.try_into().expect("float width")))
            .collect();
        data = &data[n * WIDTH..];
        store.add(&p.name, Tensor::new(p.shape.clone(), vals)?)?;
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    Ok((manifest, store))
}

pub fn bundle_from(manifest: &Manifest, store: ParamStore, origin: &Path) -> Result<Bundle> {
    let vocab = vocab_file::parse(&manifest.vocab, origin)?;
    Ok(Bundle::from_parts(manifest.config.clone(), manifest.stage, vocab, store)?)
}

pub fn save_bundle(path: &Path, bundle: &Bundle) -> Result<()> {
    io::write_bytes(path, &to_bytes(bundle, None)?)
}

pub fn load_bundle(path: &Path) -> Result<Bundle> {
    let (m, store) = from_bytes(&io::read_bytes(path)?, path)?;
    bundle_from(&m, store, path)
}

pub fn save_task(path: &Path, model: &TaskModel) -> Result<()> {
    let task = TaskManifest {
        kind: model.kind,
        labels: model.labels.clone(),
        setup: model.setup.clone(),
    };
    io::write_bytes(path, &to_bytes(&model.bundle, Some(task))?)
}

pub fn load_task(path: &Path) -> Result<TaskModel> {
    let (m, store) = from_bytes(&io::read_bytes(path)?, path)?;
    let task = m.task.clone().ok_or_else(|| Error::Config {
        path: path.to_path_buf(),
        msg: "checkpoint has no task head".into(),
    })?;
    let bundle = bundle_from(&m, store, path)?;
    Ok(TaskModel::from_parts(bundle, task.setup, task.kind, task.labels)?)
}
