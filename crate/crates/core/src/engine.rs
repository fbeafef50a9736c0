//! Sequential multi-task training: one stage per task of an order, with the
//! shared adapter always trainable and every earlier task's components
//! frozen.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{debug, info};
use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::heads::argmax;
use crate::metrics::{task_columns, MetricsTable, StageMatrix};
use crate::model::{ComponentSet, ModelConfig, PhpModel, PlacementConfig};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::synthetic::{class_text_embeddings, Flavor, Label, Split, TaskDataset};
use crate::tensor::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Seed of batch shuffling.
    pub seed: u64,
    /// Clips per forward pass at evaluation time.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 3,
            epochs_per_task: 10,
            lr: 3e-4,
            weight_decay: 2e-4,
            seed: 0,
            eval_batch: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs_per_task == 0 || self.eval_batch == 0 {
            return Err(Error::invalid(
                "train config",
                "batch size, epochs and eval batch must be positive",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return Err(Error::invalid(
                "train config",
                "learning rate must be positive and weight decay non-negative",
            ));
        }
        Ok(())
    }
}

/// Gradient bookkeeping of one stage, taken on its first batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub declared: BTreeSet<String>,
    /// Names that received a non-zero gradient.
    pub observed: BTreeSet<String>,
}

impl Ledger {
    pub fn matches(&self) -> bool {
        self.declared == self.observed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub task_id: String,
    pub steps: usize,
    pub first_lr: f64,
    pub last_lr: f64,
    /// Mean training loss of every epoch.
    pub epoch_loss: Vec<f64>,
    pub ledger: Ledger,
    /// Backbone fingerprint recomputed after the stage.
    pub backbone_fingerprint: String,
    /// Fingerprint of every registered task's pool/projection, deep prompts
    /// and heads (keys `tmdg.task.{id}`, `tmi.task.{id}`, `heads.{id}`),
    /// plus `tma` and `tmdg.summarizer`.
    pub component_fingerprints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub order: Vec<String>,
    /// `acc[s][k]`: test accuracy (percent) of `order[k]` after stage `s`,
    /// defined for `k ≤ s`.
    pub acc: Vec<Vec<f64>>,
    pub stages: Vec<StageRecord>,
    /// Checkpoint directory of every stage, when checkpointing was on.
    pub checkpoints: Vec<PathBuf>,
}

impl SequenceResult {
    pub fn final_row(&self) -> &[f64] {
        self.acc.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Accuracies of `task` across the stages since it was trained.
    pub fn trajectory(&self, task: &str) -> Option<Vec<f64>> {
        let k = self.order.iter().position(|t| t == task)?;
        Some(self.acc[k..].iter().map(|row| row[k]).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.acc.len() != self.order.len() {
            return Err(Error::invalid(
                "sequence result",
                "one accuracy row per stage is required",
            ));
        }
        for (s, row) in self.acc.iter().enumerate() {
            if row.len() != s + 1 {
                return Err(Error::invalid(
                    "sequence result",
                    format!("stage {s} has {} entries, expected {}", row.len(), s + 1),
                ));
            }
            if row.iter().any(|a| !(0.0..=100.0).contains(a)) {
                return Err(Error::invalid(
                    "sequence result",
                    format!("stage {s} has an accuracy outside [0, 100]"),
                ));
            }
        }
        Ok(())
    }
}

/// Fingerprint of the model arrays whose names start with `prefix.`.
pub fn prefix_fingerprint<P: Parameters<f32> + ?Sized>(p: &P, prefix: &str) -> String {
    let dotted = format!("{prefix}.");
    let mut h = Sha256::new();
    p.visit("", &mut |name, a| {
        if name.starts_with(&dotted) {
            h.update(name.as_bytes());
            for v in a.iter() {
                h.update(v.to_le_bytes());
            }
        }
    });
    hex::encode(h.finalize())
}

fn component_fingerprints(model: &PhpModel<f32>) -> BTreeMap<String, String> {
    let mut keys = vec!["tma".to_string(), "tmdg.summarizer".to_string()];
    for id in model.task_ids() {
        keys.extend([
            format!("tmdg.task.{id}"),
            format!("tmi.task.{id}"),
            format!("heads.{id}"),
        ]);
    }
    keys.into_iter()
        .map(|k| {
            let f = prefix_fingerprint(model, &k);
            (k, f)
        })
        .collect()
}

fn shuffle_rng(seed: u64, stage: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | epoch as u64);
    rng
}

/// Test-split accuracy in percent: exact match for single-label tasks,
/// subset accuracy for multi-label ones.
pub fn evaluate(
    model: &PhpModel<f32>,
    task_id: &str,
    split: &Split,
    eval_batch: usize,
) -> Result<f64> {
    let multi = model.task_info(task_id)?.multi_label;
    if split.is_empty() {
        return Err(Error::invalid(
            format!("task {task_id}"),
            "empty evaluation split",
        ));
    }
    let rows: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0usize;
    for chunk in rows.chunks(eval_batch.max(1)) {
        let (v, a) = split.batch(chunk);
        let logits = model.class_logits(task_id, v.view(), a.view())?;
        for (row, &i) in logits.axis_iter(Axis(0)).zip(chunk) {
            let hit = match (&split.labels[i], multi) {
                (Label::Single(c), false) => argmax(row) == *c,
                (Label::Multi(hot), true) => row.iter().zip(hot).all(|(&s, &h)| (s > 0.0) == h),
                _ => {
                    return Err(Error::invalid(
                        format!("task {task_id}"),
                        "label kind does not match the task",
                    ))
                }
            };
            correct += hit as usize;
        }
    }
    Ok(100.0 * correct as f64 / split.len() as f64)
}

/// Where a sequence writes its per-stage checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub root: PathBuf,
}

impl CheckpointSink {
    fn stage_dir(&self, stage: usize) -> PathBuf {
        self.root.join(format!("stage{stage}"))
    }
}

/// Trains one stage on `task_id`, which must already be registered.
fn train_stage(
    model: &mut PhpModel<f32>,
    ds: &TaskDataset,
    stage: usize,
    train: &TrainConfig,
) -> Result<(StageRecord, Adam<f32>)> {
    let task_id = ds.spec.task_id.as_str();
    let declared = model.declared_trainable(task_id);
    let n = ds.train.len();
    if n == 0 {
        return Err(Error::invalid(
            format!("task {task_id}"),
            "empty training split",
        ));
    }
    let per_epoch = n.div_ceil(train.batch_size);
    let total = per_epoch * train.epochs_per_task;
    let mut opt = Adam::new(AdamConfig {
        weight_decay: train.weight_decay,
        ..AdamConfig::default()
    });
    let class_text = model.class_text(task_id)?.clone();
    let mut ledger = None;
    let mut epoch_loss = Vec::with_capacity(train.epochs_per_task);
    let mut k = 0;
    let mut last_lr = train.lr;
    for epoch in 0..train.epochs_per_task {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng(train.seed, stage, epoch));
        let mut sum = 0.0;
        for rows in order.chunks(train.batch_size) {
            let (v, a) = ds.train.batch(rows);
            let text = ds.train.text_targets(rows, class_text.view());
            let (loss, grads) =
                model.loss_and_grads(task_id, v.view(), a.view(), text.view(), false)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss of {task_id} at step {k}"
                )));
            }
            if ledger.is_none() {
                ledger = Some(Ledger {
                    declared: declared.clone(),
                    observed: grads.nonzero_names(),
                });
            }
            last_lr = cosine_lr(train.lr, k, total);
            opt.update(model, &grads, &declared, last_lr);
            sum += loss as f64;
            k += 1;
        }
        let mean = sum / per_epoch as f64;
        debug!("{task_id} epoch {epoch}: loss {mean:.4}");
        epoch_loss.push(mean);
    }
    if !model.all_finite() {
        return Err(Error::NonFinite(format!(
            "parameters after training {task_id}"
        )));
    }
    let record = StageRecord {
        task_id: task_id.to_string(),
        steps: total,
        first_lr: cosine_lr(train.lr, 0, total),
        last_lr,
        epoch_loss,
        ledger: ledger.expect("at least one batch"),
        backbone_fingerprint: model.encoders().compute_fingerprint(),
        component_fingerprints: component_fingerprints(model),
    };
    Ok((record, opt))
}

fn check_order(order: &[String], datasets: &BTreeMap<String, TaskDataset>) -> Result<()> {
    if order.is_empty() {
        return Err(Error::invalid("task order", "empty"));
    }
    let mut seen = BTreeSet::new();
    for t in order {
        if !seen.insert(t) {
            return Err(Error::DuplicateTask(t.clone()));
        }
        if !datasets.contains_key(t) {
            return Err(Error::UnknownTask(t.clone()));
        }
    }
    Ok(())
}

/// Runs every stage of `order`: register, train, evaluate all tasks seen so
/// far on their test splits, optionally checkpoint.
pub fn run_sequence(
    order: &[String],
    datasets: &BTreeMap<String, TaskDataset>,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<SequenceResult> {
    train.validate()?;
    check_order(order, datasets)?;
    let mut model = PhpModel::<f32>::new(model_cfg.clone())?;
    let dim = model_cfg.encoder.model_dim;
    let mut result = SequenceResult {
        order: order.to_vec(),
        acc: Vec::new(),
        stages: Vec::new(),
        checkpoints: Vec::new(),
    };
    for (s, task_id) in order.iter().enumerate() {
        let ds = &datasets[task_id];
        let text = class_text_embeddings(&ds.spec, dim)?;
        model.register_task(task_id, text, ds.spec.flavor == Flavor::MultiLabel)?;
        let (record, opt) = train_stage(&mut model, ds, s, train)?;
        let mut row = Vec::with_capacity(s + 1);
        for seen in &order[..=s] {
            row.push(evaluate(
                &model,
                seen,
                &datasets[seen].test,
                train.eval_batch,
            )?);
        }
        info!(
            "stage {s} ({task_id}): {}",
            row.iter()
                .map(|a| format!("{a:.2}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
        result.acc.push(row);
        result.stages.push(record);
        if let Some(sink) = sink {
            let dir = sink.stage_dir(s);
            let ckpt = Checkpoint {
                model: model.clone(),
                optimizer: Some(opt),
                order: order.to_vec(),
                stage: s,
                train: serde_json::to_value(train).expect("serializable"),
            };
            save_checkpoint(&ckpt, &dir)?;
            result.checkpoints.push(dir);
        }
    }
    Ok(result)
}

/// Test accuracy of `task` trained on its own: an order of length one.
pub fn single_task_baseline(
    task: &str,
    datasets: &BTreeMap<String, TaskDataset>,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
) -> Result<f64> {
    let r = run_sequence(&[task.to_string()], datasets, model_cfg, train, None)?;
    Ok(r.acc[0][0])
}

/// Every permutation of `ids`, lexicographic by position in `ids`.
pub fn all_orders(ids: &[String]) -> Vec<Vec<String>> {
    fn rec(rest: &mut Vec<String>, cur: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for i in 0..rest.len() {
            let t = rest.remove(i);
            cur.push(t.clone());
            rec(rest, cur, out);
            cur.pop();
            rest.insert(i, t);
        }
    }
    let mut out = Vec::new();
    rec(&mut ids.to_vec(), &mut Vec::new(), &mut out);
    out
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub components: ComponentSet,
    pub placement: PlacementConfig,
}

/// The eight component-mask rows: none, each component alone, each pair,
/// all three.
pub fn component_rows() -> Vec<AblationRow> {
    let masks = [
        "none", "TMA", "TMDG", "TMI", "TMA,TMDG", "TMA,TMI", "TMDG,TMI", "all",
    ];
    masks
        .iter()
        .enumerate()
        .map(|(i, m)| AblationRow {
            label: format!("Row {}", i + 1),
            components: m.parse().expect("valid mask"),
            placement: PlacementConfig::default(),
        })
        .collect()
}

/// The six placement rows; the default shallow-middle-deep assignment is
/// the last one.
pub fn placement_rows() -> Vec<AblationRow> {
    PlacementConfig::ablation_rows()
        .into_iter()
        .enumerate()
        .map(|(i, p)| AblationRow {
            label: format!("Row {}", i + 1),
            components: ComponentSet::all(),
            placement: p,
        })
        .collect()
}

impl AblationRow {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            components: self.components.clone(),
            placement: self.placement,
            ..base.clone()
        }
    }
}

/// Everything measured for one ablation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub row: AblationRow,
    pub results: Vec<StageMatrix>,
    pub table: MetricsTable,
}

/// Runs every order under each row's configuration and tabulates the
/// metrics, labelled by row.
pub fn run_ablation(
    rows: &[AblationRow],
    orders: &[Vec<String>],
    datasets: &BTreeMap<String, TaskDataset>,
    base: &ModelConfig,
    train: &TrainConfig,
) -> Result<Vec<AblationOutcome>> {
    if rows.is_empty() || orders.is_empty() {
        return Err(Error::invalid(
            "ablation",
            "needs at least one row and one order",
        ));
    }
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let cfg = row.apply(base);
        cfg.validate()?;
        let mut results = Vec::with_capacity(orders.len());
        for order in orders {
            info!(
                "{} ({}, {}): {}",
                row.label,
                row.components,
                row.placement,
                order.join(",")
            );
            results.push(StageMatrix::from(&run_sequence(
                order, datasets, &cfg, train, None,
            )?));
        }
        let table = MetricsTable::from_results(&row.label, &task_columns(&results), &results)?;
        out.push(AblationOutcome {
            row: row.clone(),
            results,
            table,
        });
    }
    Ok(out)
}

/// Checkpoint directory for order `index` under a run directory.
pub fn order_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("order{index}"))
}
