//! Checkpoint directories: a human-readable `manifest.json` next to a flat
//! little-endian f32 blob `params.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::evalkit::{Localizer, LocalizerConfig};
use crate::model::{Model, ModelConfig};
use crate::scenegen::{read_json, write_json};
use crate::training::{Optimizers, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub epoch: usize,
    pub seed: u64,
    pub dataset_hash: Option<String>,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub vocab: Vocabulary,
    pub localizer: Option<LocalizerConfig>,
    /// Adam step counters per parameter group.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub groups: Vec<GroupEntry>,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
}

/// Metadata recorded alongside the parameters.
#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub dataset_hash: Option<String>,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    /// All tensors as f32: model parameters and buffers under their own
    /// names, localizer under `loc.*`, Adam moments under
    /// `opt.<group>.<m|v>.<param>`.
    pub tensors: BTreeMap<String, Tensor>,
}

fn f32_host(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        opt: Option<&Optimizers>,
        localizer: Option<&Localizer>,
        meta: CheckpointMeta,
    ) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (n, v) in model.params.params().chain(model.params.buffers()) {
            tensors.insert(n.clone(), v.as_tensor().to_dtype(DType::F32)?);
        }
        let mut groups: Vec<GroupEntry> = model
            .params
            .group_names()
            .into_iter()
            .map(|g| GroupEntry { elements: model.params.num_elements(&g), name: g })
            .collect();
        if let Some(loc) = localizer {
            let mut elements = 0;
            for (n, t) in loc.tensors() {
                elements += t.elem_count();
                tensors.insert(n, t.to_dtype(DType::F32)?);
            }
            groups.push(GroupEntry { name: "loc".into(), elements });
        }
        let mut optimizer_steps = BTreeMap::new();
        if let Some(opt) = opt {
            for (group, adam) in opt.all() {
                optimizer_steps.insert(group.to_string(), adam.steps_taken());
                for (n, t) in adam.state_tensors(&model.params)? {
                    tensors.insert(format!("opt.{group}.{n}"), t.to_dtype(DType::F32)?);
                }
            }
        }
        let mut offset = 0;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.dims().to_vec(), offset };
                offset += t.elem_count();
                e
            })
            .collect();
        let mut ck = Self {
            manifest: CheckpointManifest {
                version: CHECKPOINT_VERSION,
                epoch: meta.epoch,
                seed: meta.seed,
                dataset_hash: meta.dataset_hash,
                model: model.config.clone(),
                train: meta.train,
                vocab: model.vocab.clone(),
                localizer: localizer.map(|l| l.config.clone()),
                optimizer_steps,
                groups,
                tensors: entries,
                blob_sha256: String::new(),
            },
            tensors,
        };
        ck.manifest.blob_sha256 = hex::encode(Sha256::digest(ck.blob_bytes()?));
        Ok(ck)
    }

    /// The parameter payload exactly as written to `params.bin`.
    pub fn blob_bytes(&self) -> Result<Vec<u8>> {
        let total: usize = self.tensors.values().map(|t| t.elem_count()).sum();
        let mut out = Vec::with_capacity(4 * total);
        for e in &self.manifest.tensors {
            let t = self
                .tensors
                .get(&e.name)
                .ok_or_else(|| Error::NotFound(format!("checkpoint tensor {}", e.name)))?;
            for v in f32_host(t)? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Writes the blob first and the manifest last, so a directory with a
    /// manifest is complete.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob = dir.join(BLOB_FILE);
        fs::write(&blob, self.blob_bytes()?).map_err(|e| Error::io(&blob, e))?;
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let manifest: CheckpointManifest = read_json(&mpath)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: mpath,
                reason: format!(
                    "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                    manifest.version
                ),
            });
        }
        let bpath = dir.join(BLOB_FILE);
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != manifest.blob_sha256 {
            return Err(Error::Format {
                path: bpath,
                reason: format!("checksum {digest} does not match manifest {}", manifest.blob_sha256),
            });
        }
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let (a, b) = (4 * e.offset, 4 * (e.offset + n));
            if b > bytes.len() {
                return Err(Error::Format {
                    path: bpath.clone(),
                    reason: format!("tensor {} extends past the end of the blob", e.name),
                });
            }
            let v: Vec<f32> = bytes[a..b]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?);
        }
        Ok(Self { manifest, tensors })
    }

    /// Copy parameters and buffers into an existing model.
    pub fn restore_model(&self, model: &Model) -> Result<()> {
        for (name, _) in model.params.params().chain(model.params.buffers()) {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::NotFound(format!("checkpoint has no tensor {name}")))?;
            model.params.assign(name, t)?;
        }
        Ok(())
    }

    /// Build the model described by the manifest and load its parameters.
    pub fn build_model(&self) -> Result<Model> {
        self.build_model_with(self.manifest.model.clone())
    }

    /// Build a model from `config` and load this checkpoint into it; shape
    /// disagreements are reported with both shapes.
    pub fn build_model_with(&self, config: ModelConfig) -> Result<Model> {
        let model = Model::new(config, self.manifest.vocab.clone(), self.manifest.seed, DType::F32)?;
        self.restore_model(&model)?;
        Ok(model)
    }

    pub fn restore_optimizers(&self, model: &Model, opt: &mut Optimizers) -> Result<()> {
        for (group, adam) in opt.all_mut() {
            let step = *self
                .manifest
                .optimizer_steps
                .get(group)
                .ok_or_else(|| Error::NotFound(format!("optimizer state for group {group}")))?;
            let prefix = format!("opt.{group}.");
            let state: BTreeMap<String, Tensor> = self
                .tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(&prefix).map(|s| (s.to_string(), t.clone())))
                .collect();
            adam.load_state(&model.params, step, &state)?;
        }
        Ok(())
    }

    pub fn localizer(&self) -> Result<Option<Localizer>> {
        let Some(cfg) = &self.manifest.localizer else {
            return Ok(None);
        };
        let m = &self.manifest.model;
        let loc = Localizer::new(cfg.clone(), m.catalog.clone(), m.image_size)?;
        loc.load_tensors(&self.tensors)?;
        Ok(Some(loc))
    }
}
