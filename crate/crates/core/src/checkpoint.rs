//! Checkpoints: a JSON manifest plus a little-endian f64 blob holding the
//! parameter groups in manifest order, optionally followed by Adam moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::InitScheme;
use crate::nnet::{LhucSite, Model, ModelSpec};
use crate::optim::{AdamState, Moments};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    /// Groups with moments; each stores `m` then `v`, `2 * len` values.
    pub groups: Vec<GroupEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub seed: u64,
    pub lhuc0: bool,
    pub lhuc1: bool,
    pub groups: Vec<GroupEntry>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerEntry>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub blob: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        optimizer: Option<&AdamState>,
        metadata: serde_json::Map<String, serde_json::Value>,
    ) -> Result<Self> {
        let mut blob = Vec::with_capacity(model.param_count());
        let mut groups = Vec::new();
        for g in model.groups() {
            let v = model.group_values(&g.name)?;
            groups.push(GroupEntry {
                name: g.name.clone(),
                shape: g.shape.clone(),
                offset: blob.len(),
                len: v.len(),
            });
            blob.extend_from_slice(&v);
        }
        let optimizer = optimizer.map(|st| {
            let mut entries = Vec::new();
            for (name, m) in &st.moments {
                entries.push(GroupEntry {
                    name: name.clone(),
                    shape: vec![m.m.len()],
                    offset: blob.len(),
                    len: m.m.len(),
                });
                blob.extend_from_slice(&m.m);
                blob.extend_from_slice(&m.v);
            }
            OptimizerEntry {
                step: st.step,
                groups: entries,
            }
        });
        Ok(Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                spec: model.spec.clone(),
                seed: model.seed,
                lhuc0: model.has_lhuc(LhucSite::SincOutput),
                lhuc1: model.has_lhuc(LhucSite::Conv1Output),
                groups,
                metadata,
                optimizer,
            },
            blob,
        })
    }

    fn slice(&self, e: &GroupEntry, len: usize) -> Result<&[f64]> {
        self.blob
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("group {} runs past the end of the blob", e.name)))
    }

    pub fn to_model(&self) -> Result<Model> {
        let m = &self.manifest;
        let mut model = Model::build(&m.spec, InitScheme::Flat, m.seed)?;
        if m.lhuc0 {
            model.attach_lhuc(LhucSite::SincOutput)?;
        }
        if m.lhuc1 {
            model.attach_lhuc(LhucSite::Conv1Output)?;
        }
        let expected: Vec<String> = model.groups().into_iter().map(|g| g.name).collect();
        let stored: Vec<&str> = m.groups.iter().map(|g| g.name.as_str()).collect();
        if expected != stored {
            return Err(Error::Checkpoint(format!(
                "group list {stored:?} does not match the spec's {expected:?}"
            )));
        }
        for e in &m.groups {
            model.set_group_values(&e.name, self.slice(e, e.len)?)?;
        }
        model.filterbank.validate()?;
        Ok(model)
    }

    pub fn optimizer_state(&self) -> Result<Option<AdamState>> {
        let Some(opt) = &self.manifest.optimizer else {
            return Ok(None);
        };
        let mut st = AdamState {
            step: opt.step,
            ..Default::default()
        };
        for e in &opt.groups {
            let both = self.slice(e, 2 * e.len)?;
            st.moments.insert(
                e.name.clone(),
                Moments {
                    m: both[..e.len].to_vec(),
                    v: both[e.len..].to_vec(),
                },
            );
        }
        Ok(Some(st))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join(MANIFEST_FILE);
        fs::write(&manifest, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| Error::io(&manifest, e))?;
        let bytes: Vec<u8> = self.blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        let params = dir.join(PARAMS_FILE);
        fs::write(&params, bytes).map_err(|e| Error::io(&params, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format version {version:?}, expected {FORMAT_VERSION}",
                mpath.display()
            )));
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        let ppath = dir.join(PARAMS_FILE);
        let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!(
                "{}: length {} is not a multiple of 8",
                ppath.display(),
                bytes.len()
            )));
        }
        let blob = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self { manifest, blob })
    }
}

pub fn save_model(
    model: &Model,
    dir: impl AsRef<Path>,
    metadata: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    Checkpoint::from_model(model, None, metadata)?.save(dir)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    Checkpoint::load(dir)?.to_model()
}
