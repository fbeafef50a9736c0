//! Stage checkpoints: a directory holding a JSON manifest and one array file
//! per trainable tensor, class-text matrix and optimizer moment.
//!
//! Frozen encoder weights are not stored; they are rebuilt from the
//! encoder config and checked against the recorded fingerprint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, Ix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PhpModel};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::store::{encode_array, read_json, sha256_hex, write_atomic, write_json};
use crate::tensor::Parameters;

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const ARRAY_DIR: &str = "arrays";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub multi_label: bool,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub model: ModelConfig,
    /// Training configuration of the run, stored verbatim.
    pub train: serde_json::Value,
    pub order: Vec<String>,
    /// Zero-based index of the last completed stage.
    pub stage: usize,
    pub tasks: Vec<TaskRecord>,
    pub backbone_fingerprint: String,
    pub trainable_fingerprint: String,
    pub optimizer: Option<OptimizerRecord>,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: PhpModel<f32>,
    pub optimizer: Option<Adam<f32>>,
    pub order: Vec<String>,
    pub stage: usize,
    pub train: serde_json::Value,
}

fn param_key(name: &str) -> String {
    format!("param.{name}")
}

fn text_key(task: &str) -> String {
    format!("class_text.{task}")
}

/// Writes `ckpt` to `dir`, replacing any previous content. The directory is
/// assembled next to its destination and renamed into place, so a reader
/// sees either the old checkpoint or the complete new one.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<CheckpointManifest> {
    let staging = sibling(dir, "partial");
    if staging.exists() {
        fs::remove_dir_all(&staging)
            .map_err(|e| Error::io(format!("clearing {}", staging.display()), e))?;
    }
    let arrays_dir = staging.join(ARRAY_DIR);
    fs::create_dir_all(&arrays_dir)
        .map_err(|e| Error::io(format!("creating {}", arrays_dir.display()), e))?;

    let mut arrays = Vec::new();
    let mut put = |name: String, a: ndarray::ArrayViewD<'_, f32>| -> Result<()> {
        let shape = a.shape().to_vec();
        let bytes = encode_array(a);
        let file = format!("{ARRAY_DIR}/{name}.f32");
        write_atomic(&staging.join(&file), &bytes)?;
        arrays.push(ArrayEntry {
            shape,
            sha256: sha256_hex(&bytes),
            name,
            file,
        });
        Ok(())
    };

    let mut params = Vec::new();
    ckpt.model.visit("", &mut |name, a| params.push((name, a)));
    for (name, a) in params {
        put(param_key(&name), a)?;
    }
    let mut tasks = Vec::new();
    for id in ckpt.model.task_ids() {
        let info = ckpt.model.task_info(id)?;
        tasks.push(TaskRecord {
            task_id: id.clone(),
            multi_label: info.multi_label,
            num_classes: info.num_classes,
        });
        put(text_key(id), ckpt.model.class_text(id)?.view().into_dyn())?;
    }
    let optimizer = match &ckpt.optimizer {
        Some(opt) => {
            for (name, mo) in &opt.state {
                put(format!("adam_m.{name}"), mo.m.view())?;
                put(format!("adam_v.{name}"), mo.v.view())?;
            }
            Some(OptimizerRecord {
                config: opt.config,
                step: opt.step,
            })
        }
        None => None,
    };

    let manifest = CheckpointManifest {
        schema_version: SCHEMA_VERSION,
        model: ckpt.model.config().clone(),
        train: ckpt.train.clone(),
        order: ckpt.order.clone(),
        stage: ckpt.stage,
        tasks,
        backbone_fingerprint: ckpt.model.encoders().fingerprint().to_string(),
        trainable_fingerprint: ckpt.model.fingerprint(),
        optimizer,
        arrays,
    };
    write_json(&staging.join(MANIFEST), &manifest)?;

    if dir.exists() {
        let old = sibling(dir, "old");
        if old.exists() {
            fs::remove_dir_all(&old)
                .map_err(|e| Error::io(format!("clearing {}", old.display()), e))?;
        }
        fs::rename(dir, &old)
            .map_err(|e| Error::io(format!("moving aside {}", dir.display()), e))?;
        fs::rename(&staging, dir)
            .map_err(|e| Error::io(format!("installing {}", dir.display()), e))?;
        fs::remove_dir_all(&old)
            .map_err(|e| Error::io(format!("removing {}", old.display()), e))?;
    } else {
        fs::rename(&staging, dir)
            .map_err(|e| Error::io(format!("installing {}", dir.display()), e))?;
    }
    Ok(manifest)
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = read_json(&dir.join(MANIFEST))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::invalid(
            "checkpoint manifest",
            format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                m.schema_version
            ),
        ));
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let mut arrays: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
    for e in &manifest.arrays {
        let corrupt = |reason: String| Error::CorruptArray {
            name: e.name.clone(),
            reason,
        };
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| {
            Error::io(
                format!("reading array {} from {}", e.name, path.display()),
                err,
            )
        })?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(corrupt("content hash differs from the manifest".into()));
        }
        let a = crate::store::decode_array(&e.name, &bytes)?;
        if a.shape() != e.shape.as_slice() {
            return Err(corrupt(format!(
                "shape {:?}, manifest says {:?}",
                a.shape(),
                e.shape
            )));
        }
        arrays.insert(e.name.clone(), a);
    }

    let mut model = PhpModel::<f32>::new(manifest.model.clone())?;
    if model.encoders().fingerprint() != manifest.backbone_fingerprint {
        return Err(Error::invalid(
            "checkpoint",
            "encoder config does not reproduce the recorded backbone",
        ));
    }
    for t in &manifest.tasks {
        let key = text_key(&t.task_id);
        let text = arrays
            .remove(&key)
            .ok_or_else(|| Error::CorruptArray {
                name: key.clone(),
                reason: "missing".into(),
            })?
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::CorruptArray {
                name: key.clone(),
                reason: e.to_string(),
            })?;
        if text.nrows() != t.num_classes {
            return Err(Error::CorruptArray {
                name: key,
                reason: format!("{} rows for {} classes", text.nrows(), t.num_classes),
            });
        }
        model.register_task(&t.task_id, Array2::from(text), t.multi_label)?;
    }

    let mut failure = None;
    model.visit_mut("", &mut |name, mut p| {
        if failure.is_some() {
            return;
        }
        let key = param_key(&name);
        match arrays.remove(&key) {
            Some(a) if a.shape() == p.shape() => p.assign(&a),
            Some(a) => {
                failure = Some(Error::CorruptArray {
                    name: key,
                    reason: format!("shape {:?}, model expects {:?}", a.shape(), p.shape()),
                })
            }
            None => {
                failure = Some(Error::CorruptArray {
                    name: key,
                    reason: "missing".into(),
                })
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if model.fingerprint() != manifest.trainable_fingerprint {
        return Err(Error::invalid(
            "checkpoint",
            "restored parameters do not match the recorded fingerprint",
        ));
    }

    let optimizer = match &manifest.optimizer {
        Some(rec) => {
            let mut opt = Adam::new(rec.config);
            opt.step = rec.step;
            let names: Vec<String> = arrays
                .keys()
                .filter_map(|k| k.strip_prefix("adam_m.").map(str::to_string))
                .collect();
            for name in names {
                let m = arrays.remove(&format!("adam_m.{name}")).expect("listed");
                let v = arrays.remove(&format!("adam_v.{name}")).ok_or_else(|| {
                    Error::CorruptArray {
                        name: format!("adam_v.{name}"),
                        reason: "missing".into(),
                    }
                })?;
                opt.state.insert(name, Moments { m, v });
            }
            Some(opt)
        }
        None => None,
    };
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::CorruptArray {
            name: extra.clone(),
            reason: "not used by the model".into(),
        });
    }
    Ok(Checkpoint {
        model,
        optimizer,
        order: manifest.order,
        stage: manifest.stage,
        train: manifest.train,
    })
}
