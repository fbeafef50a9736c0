use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use php_av::metrics::{MetricsTable, StageMatrix};
use php_av::report::{parse_metrics_json, parse_stage_tables};
use php_av::synthetic::default_suite;
use php_av_cli::{ExperimentConfig, Overrides};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_php-av"));
    c.env("RUST_LOG", "info");
    c
}

/// Default suite shrunk to a few clips per split and one epoch.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::default();
    for t in &mut cfg.tasks {
        t.clips_train = 9;
        t.clips_val = 2;
        t.clips_test = 6;
    }
    cfg.train.epochs_per_task = 1;
    cfg.output_dir = dir.join("out");
    let path = dir.join("cfg.json");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn php(cfg: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(cfg).args(args).output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, (Vec<u8>, std::time::SystemTime)> {
    walk(dir)
        .into_iter()
        .map(|p| {
            let meta = fs::metadata(&p).unwrap();
            (p.clone(), (fs::read(&p).unwrap(), meta.modified().unwrap()))
        })
        .collect()
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_idempotent_and_records_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(&php(&cfg, &["generate"]));
    let out = tmp.path().join("out");
    let before = snapshot(&out);
    let log = ok(&php(&cfg, &["generate"]));
    assert!(log.contains("up to date"), "{log}");
    assert_eq!(before, snapshot(&out));

    let index: BTreeMap<String, String> =
        serde_json::from_slice(&fs::read(out.join("data/index.json")).unwrap()).unwrap();
    assert_eq!(index.len(), 3);
    for (task, hash) in index {
        let bytes = fs::read(out.join("data").join(&task).join("manifest.json")).unwrap();
        assert_eq!(php_av::store::sha256_hex(&bytes), hash);
    }
    assert!(out.join("manifests/generate.json").is_file());
}

#[test]
fn missing_output_parent_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = php(
        &cfg,
        &[
            "--out",
            tmp.path().join("no/such/out").to_str().unwrap(),
            "generate",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_report_and_rerun_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(&php(&cfg, &["generate"]));
    let stdout = ok(&php(&cfg, &["--orders", "AVE,AVVP,AVQA", "run"]));
    let runs = tmp.path().join("out/runs");
    let results: Vec<PathBuf> = walk(&runs)
        .into_iter()
        .filter(|p| p.ends_with("result.json"))
        .collect();
    assert_eq!(results.len(), 1, "{stdout}");
    let first = fs::read(&results[0]).unwrap();
    for s in 0..3 {
        assert!(runs
            .join(format!("order0/stage{s}/manifest.json"))
            .is_file());
    }

    ok(&php(&cfg, &["--orders", "AVE,AVVP,AVQA", "run"]));
    assert_eq!(first, fs::read(&results[0]).unwrap());

    ok(&php(&cfg, &["report"]));
    let report = tmp.path().join("out/report");
    for f in [
        "forgetting.csv",
        "transfer.csv",
        "metrics.json",
        "stages.csv",
        "plots/order0.svg",
    ] {
        assert!(report.join(f).is_file(), "{f}");
    }
    let svg = fs::read_to_string(report.join("plots/order0.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("AVQA"));
    let stages =
        parse_stage_tables(&fs::read_to_string(report.join("stages.csv")).unwrap()).unwrap();
    let m: StageMatrix = serde_json::from_slice(&first).unwrap();
    assert_eq!(stages[0].order, m.order);

    // Reports are pure functions of the result files.
    let metrics = fs::read(report.join("metrics.json")).unwrap();
    ok(&php(&cfg, &["report"]));
    assert_eq!(metrics, fs::read(report.join("metrics.json")).unwrap());
}

fn write_results(dir: &Path, matrices: &[StageMatrix]) {
    for (i, m) in matrices.iter().enumerate() {
        let d = dir.join(format!("order{i}"));
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("result.json"), serde_json::to_vec(m).unwrap()).unwrap();
    }
}

fn fixture(name: &str) -> String {
    fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../core/fixtures")
            .join(name),
    )
    .unwrap()
}

#[test]
fn report_over_fixture_results_matches_the_metric_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let matrices = parse_stage_tables(&fixture("stages_ewc.csv")).unwrap();
    let results = tmp.path().join("ewc");
    write_results(&results, &matrices);
    ok(&php(
        &cfg,
        &[
            "report",
            "--results",
            results.to_str().unwrap(),
            "--method",
            "EWC",
        ],
    ));
    let json = fs::read_to_string(tmp.path().join("out/report/metrics.json")).unwrap();
    let tables = parse_metrics_json(&json).unwrap();
    let tasks: Vec<String> = ["AVE", "AVVP", "AVQA"].map(String::from).to_vec();
    let direct = MetricsTable::from_results("EWC", &tasks, &matrices).unwrap();
    assert_eq!(tables[0].method, "EWC");
    for ((t, got), (_, want)) in tables[0].per_task.iter().zip(&direct.per_task) {
        for (g, w) in [
            (got.a_mean, want.a_mean),
            (got.a_final, want.a_final),
            (got.f_mean, want.f_mean),
            (got.a_multi, want.a_multi),
        ] {
            // Rendered values are rounded half-up to cents.
            assert!(
                (g.unwrap() - w.unwrap()).abs() <= 0.005 + 1e-9,
                "{t}: {g:?} vs {w:?}"
            );
        }
    }

    // Printed EWC row of the forgetting table.
    let agg = tables[0].aggregates;
    for (got, printed) in [
        (agg.a_mean, 29.26),
        (agg.f_mean, 12.89),
        (agg.a_final, 20.05),
    ] {
        assert!(
            (got.unwrap() - printed).abs() <= 0.02,
            "{got:?} vs {printed}"
        );
    }
}

#[test]
fn report_rejects_empty_and_mixed_length_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(
        php(&cfg, &["report", "--results", empty.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );

    let mixed = tmp.path().join("mixed");
    write_results(
        &mixed,
        &[
            StageMatrix {
                order: vec!["AVE".into()],
                acc: vec![vec![50.0]],
            },
            StageMatrix {
                order: vec!["AVVP".into(), "AVE".into()],
                acc: vec![vec![40.0], vec![30.0, 20.0]],
            },
        ],
    );
    assert_eq!(
        php(&cfg, &["report", "--results", mixed.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn ablation_tables_have_the_row_layout_and_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(&php(&cfg, &["generate"]));
    ok(&php(
        &cfg,
        &[
            "--orders",
            "AVE,AVQA,AVVP",
            "ablate",
            "--kind",
            "components",
        ],
    ));
    let dir = tmp.path().join("out/ablation");
    let forgetting = fs::read_to_string(dir.join("components_forgetting.csv")).unwrap();
    let lines: Vec<&str> = forgetting.lines().collect();
    assert_eq!(lines.len(), 9);
    assert_eq!(lines[0], "Row,TMA,TMDG,TMI,A_mean,A_final,F_mean");
    assert!(lines[1].starts_with("Row 1,,,,"));
    assert!(lines[8].starts_with("Row 8,✓,✓,✓,"));
    assert!(lines[6].starts_with("Row 6,✓,,✓,"));
    let transfer = fs::read_to_string(dir.join("components_transfer.csv")).unwrap();
    assert_eq!(
        transfer.lines().next(),
        Some("Row,TMA,TMDG,TMI,A_single,A_multi,Diff")
    );

    let again = tempfile::tempdir().unwrap();
    let cfg2 = tiny_config(again.path());
    ok(&php(&cfg2, &["generate"]));
    ok(&php(
        &cfg2,
        &[
            "--orders",
            "AVE,AVQA,AVVP",
            "ablate",
            "--kind",
            "components",
        ],
    ));
    assert_eq!(
        forgetting,
        fs::read_to_string(again.path().join("out/ablation/components_forgetting.csv")).unwrap()
    );
}

#[test]
fn baseline_equals_the_first_stage_of_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(&php(&cfg, &["generate"]));
    ok(&php(&cfg, &["baseline", "--task", "AVQA"]));
    let b: BTreeMap<String, f64> =
        serde_json::from_slice(&fs::read(tmp.path().join("out/baselines.json")).unwrap()).unwrap();
    ok(&php(&cfg, &["--orders", "AVQA,AVE,AVVP", "run"]));
    let r: StageMatrix =
        serde_json::from_slice(&fs::read(tmp.path().join("out/runs/order0/result.json")).unwrap())
            .unwrap();
    assert_eq!(b["AVQA"], r.acc[0][0]);
}

#[test]
fn exit_codes_separate_bad_input_from_runtime_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    assert_eq!(
        bin().arg("--bogus").output().unwrap().status.code(),
        Some(1)
    );
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(
        php(&cfg, &["--placement", "S-S-D", "generate"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        php(&cfg, &["--orders", "AVE,AVE,AVQA", "generate"])
            .status
            .code(),
        Some(1)
    );
    // Training before generating.
    assert_eq!(php(&cfg, &["run"]).status.code(), Some(1));
    let o = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("run")
        .env("PHP_TRAIN__EPOCHS_PER_TASK", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));

    ok(&php(&cfg, &["generate"]));
    let lock = tmp.path().join("out").join(php_av_cli::lock::LOCK_FILE);
    fs::write(&lock, "1").unwrap();
    assert_eq!(php(&cfg, &["generate"]).status.code(), Some(2));
    fs::remove_file(&lock).unwrap();

    // A dataset edited behind the index's back.
    let manifest = tmp.path().join("out/data/AVE/manifest.json");
    let mut text = fs::read_to_string(&manifest).unwrap();
    text.push(' ');
    fs::write(&manifest, text).unwrap();
    assert_eq!(php(&cfg, &["run"]).status.code(), Some(2));
}

#[test]
fn environment_overrides_the_file_and_flags_override_both() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let env_out = tmp.path().join("from-env");
    let o = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("generate")
        .env("PHP_OUTPUT_DIR", &env_out)
        .output()
        .unwrap();
    ok(&o);
    assert!(env_out.join("data/index.json").is_file());

    let flag_out = tmp.path().join("from-flag");
    let o = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["--out", flag_out.to_str().unwrap(), "generate"])
        .env("PHP_OUTPUT_DIR", &env_out)
        .output()
        .unwrap();
    ok(&o);
    assert!(flag_out.join("data/index.json").is_file());
}

#[test]
fn default_config_covers_every_order_of_the_suite() {
    let cfg = ExperimentConfig::load(None, &Overrides::default()).unwrap();
    assert_eq!(cfg.tasks, default_suite());
    assert_eq!(cfg.resolved_orders().len(), 6);
    let one = ExperimentConfig::load(
        None,
        &Overrides {
            orders: vec!["AVE,AVVP,AVQA".into()],
            seed: Some(5),
            placement: Some("D-M-S".into()),
            components: Some("TMA,TMI".into()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(
        one.resolved_orders(),
        vec![vec!["AVE".to_string(), "AVVP".into(), "AVQA".into()]]
    );
    assert_eq!(one.model_config().seed, 5);
    assert_eq!(one.placement.to_string(), "D-M-S");
    assert_eq!(one.components.to_string(), "TMA,TMI");
    let short = Overrides {
        orders: vec!["AVE,AVVP".into()],
        ..Default::default()
    };
    assert!(ExperimentConfig::load(None, &short).is_ok());
    let ragged = Overrides {
        orders: vec!["AVE,AVVP".into(), "AVQA".into()],
        ..Default::default()
    };
    assert!(ExperimentConfig::load(None, &ragged).is_err());
    let unknown = Overrides {
        orders: vec!["AVE,AVS".into()],
        ..Default::default()
    };
    assert!(ExperimentConfig::load(None, &unknown).is_err());
}
