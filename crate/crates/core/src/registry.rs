//! Base-model registry: a directory of checkpoints plus a `registry.json`
//! index. Every write goes through temp file + rename, so an interrupted run
//! leaves either the old or the new index, never a torn one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SubjectId;
use crate::fsutil::{from_json_slice, to_json_pretty, write_atomic};
use crate::nn::{
    load_checkpoint, save_checkpoint, Architecture, CheckpointMeta, ModelError, SegModel,
};
use crate::train::{GridJob, SplitSpec, TrainOutcome};

pub const REGISTRY_INDEX: &str = "registry.json";
pub const REGISTRY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("registry {0} does not exist")]
    Missing(PathBuf),
    #[error("{path}: {message}")]
    Index { path: PathBuf, message: String },
    #[error("registry has no entry {name} ({architecture})")]
    NoEntry {
        name: String,
        architecture: Architecture,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    pub architecture: Architecture,
    pub group: Vec<SubjectId>,
    pub split: SplitSpec,
    pub seed: u64,
    /// Hash of model config, training config, group and split.
    pub job_hash: String,
    /// Relative to the registry directory.
    pub checkpoint: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_loss: f64,
    pub val_dice: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    schema_version: u32,
    entries: Vec<RegistryEntry>,
}

#[derive(Debug)]
pub struct Registry {
    dir: PathBuf,
    entries: Vec<RegistryEntry>,
}

impl Registry {
    /// Open the registry at `dir`, creating an empty one if absent.
    pub fn open_or_create(dir: &Path) -> Result<Self, RegistryError> {
        if dir.join(REGISTRY_INDEX).exists() {
            return Self::open(dir);
        }
        let reg = Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        };
        reg.write_index()?;
        Ok(reg)
    }

    /// Open an existing registry.
    pub fn open(dir: &Path) -> Result<Self, RegistryError> {
        let path = dir.join(REGISTRY_INDEX);
        if !path.exists() {
            return Err(RegistryError::Missing(dir.to_path_buf()));
        }
        let bytes = fs::read(&path).map_err(|source| RegistryError::Io {
            path: path.clone(),
            source,
        })?;
        let index: Index = from_json_slice(&bytes).map_err(|e| RegistryError::Index {
            path: path.clone(),
            message: format!("{} at {}", e.message, e.pointer),
        })?;
        if index.schema_version != REGISTRY_SCHEMA_VERSION {
            return Err(RegistryError::Index {
                path,
                message: format!("schema version {} not supported", index.schema_version),
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: index.entries,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Entries sorted by architecture, group size, split and name.
    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, architecture: Architecture, name: &str) -> Option<&RegistryEntry> {
        self.entries
            .iter()
            .find(|e| e.architecture == architecture && e.name == name)
    }

    pub fn checkpoint_rel(architecture: Architecture, name: &str) -> String {
        format!("checkpoints/{}/{name}.bin", architecture.as_str())
    }

    pub fn checkpoint_path(&self, entry: &RegistryEntry) -> PathBuf {
        self.dir.join(&entry.checkpoint)
    }

    /// True when `job` is recorded with the same hash and its checkpoint is
    /// on disk.
    pub fn is_complete(&self, job: &GridJob) -> bool {
        self.get(job.architecture, &job.name).is_some_and(|e| {
            e.job_hash == job.job_hash()
                && self.checkpoint_path(e).exists()
                && self.checkpoint_path(e).with_extension("json").exists()
        })
    }

    /// Save the trained model's checkpoint, then upsert its entry and
    /// rewrite the index.
    pub fn record(
        &mut self,
        job: &GridJob,
        outcome: &TrainOutcome,
    ) -> Result<&RegistryEntry, RegistryError> {
        let rel = Self::checkpoint_rel(job.architecture, &job.name);
        let best = outcome.best_record();
        let mut meta = CheckpointMeta::new(&job.model, job.model.seed, outcome.best_epoch);
        meta.val_loss = Some(best.val_loss);
        meta.val_dice = Some(best.val_dice);
        save_checkpoint(&self.dir.join(&rel), &outcome.model, &meta)?;
        let entry = RegistryEntry {
            name: job.name.clone(),
            architecture: job.architecture,
            group: job.group.clone(),
            split: job.split,
            seed: job.model.seed,
            job_hash: job.job_hash(),
            checkpoint: rel,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
            val_loss: best.val_loss,
            val_dice: best.val_dice,
        };
        let pos = match self
            .entries
            .iter()
            .position(|e| e.architecture == entry.architecture && e.name == entry.name)
        {
            Some(i) => {
                self.entries[i] = entry;
                i
            }
            None => {
                self.entries.push(entry);
                self.entries.len() - 1
            }
        };
        let key = (
            self.entries[pos].architecture,
            self.entries[pos].name.clone(),
        );
        self.entries.sort_by(|a, b| {
            (a.architecture, a.group.len(), a.split, &a.name).cmp(&(
                b.architecture,
                b.group.len(),
                b.split,
                &b.name,
            ))
        });
        self.write_index()?;
        Ok(self
            .entries
            .iter()
            .find(|e| (e.architecture, &e.name) == (key.0, &key.1))
            .expect("just inserted"))
    }

    pub fn load_model(&self, entry: &RegistryEntry) -> Result<SegModel<f32>, RegistryError> {
        Ok(load_checkpoint(&self.checkpoint_path(entry))?.0)
    }

    fn write_index(&self) -> Result<(), RegistryError> {
        let path = self.dir.join(REGISTRY_INDEX);
        let index = Index {
            schema_version: REGISTRY_SCHEMA_VERSION,
            entries: self.entries.clone(),
        };
        write_atomic(&path, &to_json_pretty(&index))
            .map_err(|source| RegistryError::Io { path, source })
    }
}
