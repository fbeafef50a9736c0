use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;

use php_av::metrics::{
    diff_metric, first_task_stats, multi_task_acc, MetricsTable, StageMatrix, DIFF_EPS,
};
use php_av::report::{
    parse_metrics_json, parse_report_csv, parse_stage_tables, render_report, round2,
    stage_tables_csv, ReportFormat,
};

fn fixture(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name);
    fs::read_to_string(p).unwrap()
}

fn tasks() -> Vec<String> {
    ["AVE", "AVVP", "AVQA"].map(String::from).to_vec()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn finetune_first_task_stats_match_printed_row() {
    let r = parse_stage_tables(&fixture("stages_finetune.csv")).unwrap();
    let s = first_task_stats(&r, "AVE").unwrap();
    assert!(close(s.a_mean, 29.61, 0.005), "{}", s.a_mean);
    assert!(close(s.a_final, 12.74, 0.005), "{}", s.a_final);
    assert!(close(s.f_mean, 22.37, 0.02), "{}", s.f_mean);
    assert!(close(multi_task_acc(&r, "AVE").unwrap(), 18.22, 0.005));
    assert!(close(multi_task_acc(&r, "AVQA").unwrap(), 54.13, 0.005));
}

#[test]
fn ewc_first_task_stats_match_printed_row() {
    let r = parse_stage_tables(&fixture("stages_ewc.csv")).unwrap();
    let s = first_task_stats(&r, "AVE").unwrap();
    assert!(close(s.a_mean, 8.52, 0.02), "{}", s.a_mean);
    assert!(close(s.f_mean, 7.71, 0.005), "{}", s.f_mean);
}

#[test]
fn stage_fixtures_render_back_cell_for_cell() {
    for f in [
        "stages_finetune.csv",
        "stages_ewc.csv",
        "stages_l2p.csv",
        "stages_sprompt.csv",
        "stages_dualprompt.csv",
        "stages_pc.csv",
    ] {
        let text = fixture(f);
        let parsed = parse_stage_tables(&text).unwrap();
        assert_eq!(parsed.len(), 6, "{f}");
        assert_eq!(
            stage_tables_csv(&parsed).unwrap().trim_end(),
            text.trim_end(),
            "{f}"
        );
    }
}

#[test]
fn diff_examples() {
    assert!(close(diff_metric(45.83, 45.10, DIFF_EPS), -2.87, 0.02));
    assert!(close(diff_metric(62.36, 63.47, DIFF_EPS), 7.79, 0.05));
    assert!(diff_metric(100.0, 100.0, DIFF_EPS) == 0.0);
}

#[test]
fn diff_sign_and_monotone_penalty() {
    for s in (0..100).map(|i| i as f64) {
        for m in [0.0, s / 2.0, s, (s + 100.0) / 2.0, 100.0] {
            let d = diff_metric(s, m, DIFF_EPS);
            assert_eq!(d > 0.0, m > s, "s={s} m={m}");
        }
    }
    let gain = 0.5;
    let mut prev = f64::NEG_INFINITY;
    for i in 0..199 {
        let s = i as f64 * 0.5;
        let d = diff_metric(s, s + gain, DIFF_EPS);
        assert!(d > prev, "s={s}");
        prev = d;
    }
}

#[test]
fn aggregates_are_unweighted_task_means() {
    let r = parse_stage_tables(&fixture("stages_finetune.csv")).unwrap();
    let t = MetricsTable::from_results("Fine-tune", &tasks(), &r).unwrap();
    let mean = |f: fn(&php_av::metrics::TaskMetrics) -> Option<f64>| {
        t.per_task.iter().map(|(_, m)| f(m).unwrap()).sum::<f64>() / 3.0
    };
    assert!((t.aggregates.a_mean.unwrap() - mean(|m| m.a_mean)).abs() < 1e-9);
    assert!((t.aggregates.f_mean.unwrap() - mean(|m| m.f_mean)).abs() < 1e-9);
    assert!((t.aggregates.a_multi.unwrap() - mean(|m| m.a_multi)).abs() < 1e-9);
    let d = diff_metric(
        t.aggregates.a_single.unwrap(),
        t.aggregates.a_multi.unwrap(),
        DIFF_EPS,
    );
    assert_eq!(t.aggregates.diff.unwrap(), d);
}

#[test]
fn report_round_trips_within_rounding() {
    let tables: Vec<MetricsTable> = ["stages_finetune.csv", "stages_ewc.csv"]
        .iter()
        .map(|f| {
            MetricsTable::from_results(f, &tasks(), &parse_stage_tables(&fixture(f)).unwrap())
                .unwrap()
        })
        .collect();
    let csv = render_report(&tables, ReportFormat::Csv).unwrap();
    let back = parse_report_csv(&csv[0].contents, &csv[1].contents).unwrap();
    let json = render_report(&tables, ReportFormat::Json).unwrap();
    let back_json = parse_metrics_json(&json[0].contents).unwrap();
    for parsed in [back, back_json] {
        assert_eq!(parsed.len(), tables.len());
        for (a, b) in tables.iter().zip(&parsed) {
            assert_eq!(a.method, b.method);
            for ((ta, ma), (tb, mb)) in a.per_task.iter().zip(&b.per_task) {
                assert_eq!(ta, tb);
                for (x, y) in [
                    (ma.a_mean, mb.a_mean),
                    (ma.a_final, mb.a_final),
                    (ma.f_mean, mb.f_mean),
                    (ma.a_single, mb.a_single),
                    (ma.a_multi, mb.a_multi),
                ] {
                    assert!(close(x.unwrap(), y.unwrap(), 0.005 + 1e-9));
                }
            }
            assert!(close(
                a.aggregates.diff.unwrap(),
                b.aggregates.diff.unwrap(),
                0.005 + 1e-9
            ));
        }
    }
}

#[test]
fn single_order_leaves_positional_cells_empty() {
    let r = vec![StageMatrix {
        order: tasks(),
        acc: vec![vec![50.0], vec![40.0, 60.0], vec![30.0, 55.0, 70.0]],
    }];
    let t = MetricsTable::from_results("x", &tasks(), &r).unwrap();
    assert_eq!(t.task("AVE").unwrap().a_final, Some(30.0));
    assert_eq!(t.task("AVVP").unwrap().a_mean, None);
    assert_eq!(t.task("AVQA").unwrap().a_multi, Some(70.0));
    assert_eq!(t.aggregates.a_mean, None);
    let csv = render_report(&[t], ReportFormat::Csv).unwrap();
    assert!(csv[0]
        .contents
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("x,40.00,30.00,10.00,,,"));
}

proptest! {
    #[test]
    fn diff_is_finite_and_signed_like_the_gap(single in 0.0f64..=100.0, multi in 0.0f64..=100.0) {
        let d = diff_metric(single, multi, DIFF_EPS);
        prop_assert!(d.is_finite());
        prop_assert_eq!(d > 0.0, multi > single);
        prop_assert_eq!(d < 0.0, multi < single);
    }

    #[test]
    fn round2_is_idempotent_and_within_half_a_cent(x in -1000.0f64..1000.0) {
        let r = round2(x);
        prop_assert_eq!(round2(r), r);
        prop_assert!((r - x).abs() <= 0.005 + 1e-9);
    }
}
