//! The five verbs. Each one locks the output directory for its duration
//! and leaves a manifest under `manifests/` describing how to redo it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use php_av::engine::{
    component_rows, placement_rows, run_ablation, run_sequence, single_task_baseline,
    CheckpointSink, SequenceResult,
};
use php_av::metrics::{task_columns, MetricsTable, StageMatrix};
use php_av::model::PhpModel;
use php_av::report::{ablation_csv, render_report, stage_tables_csv, AblationKind, ReportFormat};
use php_av::store::sha256_hex;
use php_av::synthetic::{load_dataset, make_task, save_dataset, TaskDataset};
use serde::Serialize;
use walkdir::WalkDir;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::lock::OutputLock;
use crate::plot::accuracy_vs_stage;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
const DATA_INDEX: &str = "index.json";
const RESULT_FILE: &str = "result.json";

/// Reproduction record written by every command.
#[derive(Debug, Serialize)]
struct RunManifest<'a, T: Serialize> {
    command: &'a str,
    code_version: &'a str,
    config: &'a ExperimentConfig,
    seeds: Seeds,
    backbone_fingerprint: String,
    dataset_hashes: BTreeMap<String, String>,
    outcome: T,
}

#[derive(Debug, Serialize)]
struct Seeds {
    train: u64,
    encoder: u64,
    tasks: BTreeMap<String, u64>,
}

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::runtime(format!("{what} {}: {e}", path.display()))
}

/// Writes `bytes` unless the file already holds them. Returns whether it wrote.
fn write_if_changed(path: &Path, bytes: &[u8]) -> CliResult<bool> {
    if fs::read(path).ok().as_deref() == Some(bytes) {
        return Ok(false);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err("creating", parent, e))?;
    }
    php_av::store::write_atomic(path, bytes)?;
    Ok(true)
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

/// Creates the output directory (its parent must exist) and locks it.
fn prepare_output(cfg: &ExperimentConfig) -> CliResult<OutputLock> {
    let out = &cfg.output_dir;
    let parent = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(CliError::validation(format!(
            "parent of output directory {} does not exist",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| io_err("creating", out, e))?;
    OutputLock::acquire(out)
}

fn write_manifest<T: Serialize>(
    cfg: &ExperimentConfig,
    command: &str,
    hashes: BTreeMap<String, String>,
    outcome: T,
) -> CliResult<bool> {
    let backbone = PhpModel::<f32>::new(cfg.model_config())?
        .encoders()
        .fingerprint()
        .to_string();
    let m = RunManifest {
        command,
        code_version: CODE_VERSION,
        config: cfg,
        seeds: Seeds {
            train: cfg.train.seed,
            encoder: cfg.encoder.seed,
            tasks: cfg
                .tasks
                .iter()
                .map(|t| (t.task_id.clone(), t.seed))
                .collect(),
        },
        backbone_fingerprint: backbone,
        dataset_hashes: hashes,
        outcome,
    };
    write_if_changed(
        &cfg.output_dir
            .join("manifests")
            .join(format!("{command}.json")),
        &to_json(&m),
    )
}

/// Materializes every task. Datasets whose files already match are left
/// alone, so a repeated call writes nothing.
pub fn generate(cfg: &ExperimentConfig) -> CliResult<usize> {
    let _lock = prepare_output(cfg)?;
    let data = cfg.data_dir();
    let mut hashes = BTreeMap::new();
    let mut written = 0;
    for spec in &cfg.tasks {
        let ds = make_task(spec)?;
        let outcome = save_dataset(&ds, &data.join(&spec.task_id))?;
        if outcome.files_written == 0 {
            info!("{}: up to date", spec.task_id);
        } else {
            info!("{}: wrote {} files", spec.task_id, outcome.files_written);
        }
        written += outcome.files_written;
        hashes.insert(spec.task_id.clone(), outcome.manifest_sha256);
    }
    written += write_if_changed(&data.join(DATA_INDEX), &to_json(&hashes))? as usize;
    written += write_manifest(cfg, "generate", hashes, cfg.task_ids())? as usize;
    if written == 0 {
        info!("datasets up to date");
    }
    Ok(written)
}

/// Loads the generated datasets, checking them against the recorded
/// hashes and the configured specs.
pub fn load_datasets(
    cfg: &ExperimentConfig,
) -> CliResult<(BTreeMap<String, TaskDataset>, BTreeMap<String, String>)> {
    let data = cfg.data_dir();
    let index_path = data.join(DATA_INDEX);
    let index: BTreeMap<String, String> = match fs::read(&index_path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map_err(|e| CliError::runtime(format!("{}: {e}", index_path.display())))?,
        Err(_) => {
            return Err(CliError::validation(format!(
                "no datasets under {}; run `generate` first",
                data.display()
            )))
        }
    };
    let mut out = BTreeMap::new();
    for spec in &cfg.tasks {
        let dir = data.join(&spec.task_id);
        let recorded = index.get(&spec.task_id).ok_or_else(|| {
            CliError::validation(format!(
                "task {} was never generated; run `generate`",
                spec.task_id
            ))
        })?;
        let manifest = dir.join("manifest.json");
        let bytes = fs::read(&manifest).map_err(|e| io_err("reading", &manifest, e))?;
        if &sha256_hex(&bytes) != recorded {
            return Err(CliError::runtime(format!(
                "{} does not match the recorded hash",
                manifest.display()
            )));
        }
        let ds = load_dataset(&dir)?;
        if &ds.spec != spec {
            return Err(CliError::validation(format!(
                "dataset {} was generated from a different spec; run `generate` again",
                spec.task_id
            )));
        }
        out.insert(spec.task_id.clone(), ds);
    }
    Ok((out, index))
}

fn relative(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| path.to_path_buf())
}

/// Trains every configured order, writing per-stage checkpoints and one
/// `result.json` per order.
pub fn run(cfg: &ExperimentConfig) -> CliResult<Vec<SequenceResult>> {
    let _lock = prepare_output(cfg)?;
    let (datasets, hashes) = load_datasets(cfg)?;
    let model_cfg = cfg.model_config();
    let runs = cfg.runs_dir();
    if runs.exists() {
        fs::remove_dir_all(&runs).map_err(|e| io_err("clearing", &runs, e))?;
    }
    let mut results = Vec::new();
    for (i, order) in cfg.resolved_orders().iter().enumerate() {
        let dir = php_av::engine::order_dir(&runs, i);
        info!("order {i}: {}", order.join(" → "));
        let sink = CheckpointSink { root: dir.clone() };
        let mut r = run_sequence(order, &datasets, &model_cfg, &cfg.train, Some(&sink))?;
        r.checkpoints = r
            .checkpoints
            .iter()
            .map(|p| relative(p, &cfg.output_dir))
            .collect();
        write_if_changed(&dir.join(RESULT_FILE), &to_json(&r))?;
        results.push(r);
    }
    let finals: Vec<(String, Vec<f64>)> = results
        .iter()
        .map(|r| (r.order.join(","), r.final_row().to_vec()))
        .collect();
    write_manifest(cfg, "run", hashes, finals)?;
    Ok(results)
}

/// Every `result.json` below `dir`, in path order.
pub fn collect_results(dir: &Path) -> CliResult<Vec<(PathBuf, StageMatrix)>> {
    if !dir.is_dir() {
        return Err(CliError::validation(format!(
            "results directory {} does not exist",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry =
            entry.map_err(|e| CliError::runtime(format!("walking {}: {e}", dir.display())))?;
        if entry.file_type().is_file() && entry.file_name() == RESULT_FILE {
            let bytes = fs::read(entry.path()).map_err(|e| io_err("reading", entry.path(), e))?;
            let m: StageMatrix = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::validation(format!("{}: {e}", entry.path().display())))?;
            m.validate()?;
            out.push((entry.path().to_path_buf(), m));
        }
    }
    if out.is_empty() {
        return Err(CliError::validation(format!(
            "no {RESULT_FILE} files under {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Files written by [`report`].
#[derive(Debug, Clone, Serialize)]
pub struct ReportOutcome {
    pub table: MetricsTable,
    pub files: Vec<PathBuf>,
}

/// Tabulates the results under `results_dir` into `report/`: the
/// forgetting and transfer tables (CSV and JSON), the stage matrices and
/// one accuracy-vs-stage plot per order.
pub fn report(
    cfg: &ExperimentConfig,
    results_dir: &Path,
    method: &str,
) -> CliResult<ReportOutcome> {
    let found = collect_results(results_dir)?;
    let matrices: Vec<StageMatrix> = found.iter().map(|(_, m)| m.clone()).collect();
    let table = MetricsTable::from_results(method, &task_columns(&matrices), &matrices)?;
    let _lock = prepare_output(cfg)?;
    let dir = cfg.output_dir.join("report");
    let mut files = Vec::new();
    let tables = std::slice::from_ref(&table);
    for format in [ReportFormat::Csv, ReportFormat::Json] {
        for doc in render_report(tables, format)? {
            let path = dir.join(&doc.file_name);
            write_if_changed(&path, doc.contents.as_bytes())?;
            files.push(path);
        }
    }
    let stages = dir.join("stages.csv");
    write_if_changed(&stages, stage_tables_csv(&matrices)?.as_bytes())?;
    files.push(stages);
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| io_err("creating", &plots, e))?;
    for (i, m) in matrices.iter().enumerate() {
        let path = plots.join(format!("order{i}.svg"));
        accuracy_vs_stage(m, &path)?;
        files.push(path);
    }
    let inputs: BTreeMap<String, String> = found
        .iter()
        .map(|(p, _)| {
            (
                relative(p, results_dir).display().to_string(),
                sha256_hex(&fs::read(p).unwrap_or_default()),
            )
        })
        .collect();
    write_manifest(cfg, "report", BTreeMap::new(), &inputs)?;
    Ok(ReportOutcome { table, files })
}

/// Runs the component-mask and/or placement ablations over the configured
/// orders and writes their comparison tables under `ablation/`.
pub fn ablate(cfg: &ExperimentConfig, kinds: &[AblationKind]) -> CliResult<Vec<PathBuf>> {
    let _lock = prepare_output(cfg)?;
    let (datasets, hashes) = load_datasets(cfg)?;
    let orders = cfg.resolved_orders();
    let base = cfg.model_config();
    let dir = cfg.output_dir.join("ablation");
    let mut files = Vec::new();
    let mut summary = BTreeMap::new();
    for &kind in kinds {
        let rows = match kind {
            AblationKind::Components => component_rows(),
            AblationKind::Placement => placement_rows(),
        };
        let outcomes = run_ablation(&rows, &orders, &datasets, &base, &cfg.train)?;
        let (forgetting, transfer) = ablation_csv(kind, &outcomes)?;
        for (name, text) in [
            (format!("{kind}_forgetting.csv"), forgetting.into_bytes()),
            (format!("{kind}_transfer.csv"), transfer.into_bytes()),
            (format!("{kind}.json"), to_json(&outcomes)),
        ] {
            let path = dir.join(name);
            write_if_changed(&path, &text)?;
            files.push(path);
        }
        summary.insert(
            kind.to_string(),
            outcomes
                .iter()
                .map(|o| (o.row.label.clone(), o.table.aggregates))
                .collect::<Vec<_>>(),
        );
    }
    write_manifest(cfg, "ablate", hashes, summary)?;
    Ok(files)
}

/// Single-task accuracy of each requested task (all tasks when empty),
/// written to `baselines.json`.
pub fn baseline(cfg: &ExperimentConfig, tasks: &[String]) -> CliResult<BTreeMap<String, f64>> {
    let _lock = prepare_output(cfg)?;
    let (datasets, hashes) = load_datasets(cfg)?;
    let ids = if tasks.is_empty() {
        cfg.task_ids()
    } else {
        tasks.to_vec()
    };
    let model_cfg = cfg.model_config();
    let mut out = BTreeMap::new();
    for t in &ids {
        if !datasets.contains_key(t) {
            return Err(php_av::Error::UnknownTask(t.clone()).into());
        }
        let acc = single_task_baseline(t, &datasets, &model_cfg, &cfg.train)?;
        info!("{t}: {acc:.2}");
        out.insert(t.clone(), acc);
    }
    write_if_changed(&cfg.output_dir.join("baselines.json"), &to_json(&out))?;
    write_manifest(cfg, "baseline", hashes, &out)?;
    Ok(out)
}
