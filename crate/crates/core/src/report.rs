//! CSV and JSON renderings of metric tables and stage matrices.
//!
//! Numbers are rounded half-up to two decimals when rendered; everything
//! upstream stays in full precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::AblationOutcome;
use crate::error::{Error, Result};
use crate::metrics::{Aggregates, MetricsTable, StageMatrix, TaskMetrics};
use crate::model::Component;

/// Orders per horizontal block of a stage-table file.
pub const ORDERS_PER_BLOCK: usize = 3;
const ARROW: &str = "→";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::invalid(
                "report format",
                format!("unknown format `{other}` (csv or json)"),
            )),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Json => "json",
        })
    }
}

/// Half-up rounding to two decimals. Values are first snapped to 1e-6 of a
/// cent so that decimal ties stored just below the half (`2.675`) still
/// round up.
pub fn round2(x: f64) -> f64 {
    let cents = x * 100.0;
    let snapped = (cents * 1e6).round() / 1e6;
    let r = (snapped + 0.5).floor() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

pub fn fmt2(x: f64) -> String {
    format!("{:.2}", round2(x))
}

fn cell(x: Option<f64>) -> String {
    x.map(fmt2).unwrap_or_default()
}

fn parse_cell(what: &str, s: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::invalid(what.to_string(), format!("`{s}` is not a number")))
}

/// One rendered file.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub file_name: String,
    pub contents: String,
}

fn task_list(tables: &[MetricsTable]) -> Result<Vec<String>> {
    let first = tables
        .first()
        .ok_or_else(|| Error::invalid("report", "no metric tables to render"))?;
    let tasks: Vec<String> = first.per_task.iter().map(|(t, _)| t.clone()).collect();
    if tables
        .iter()
        .any(|t| t.per_task.iter().map(|(id, _)| id).ne(tasks.iter()))
    {
        return Err(Error::invalid(
            "report",
            "tables disagree on the task columns",
        ));
    }
    Ok(tasks)
}

fn write_csv(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid("csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn read_csv(text: &str) -> Result<Vec<Vec<String>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        out.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(out)
}

/// Forgetting layout: per task `A_mean, A_final, F_mean`, then the means
/// of `A_mean`, `F_mean`, `A_final`.
pub fn forgetting_csv(tables: &[MetricsTable]) -> Result<String> {
    let tasks = task_list(tables)?;
    let mut header = vec!["Method".to_string()];
    for t in &tasks {
        header.extend([
            format!("{t} A_mean"),
            format!("{t} A_final"),
            format!("{t} F_mean"),
        ]);
    }
    header.extend(["Mean A_mean", "Mean F_mean", "Mean A_final"].map(String::from));
    let mut rows = vec![header];
    for tab in tables {
        let mut r = vec![tab.method.clone()];
        for (_, m) in &tab.per_task {
            r.extend([cell(m.a_mean), cell(m.a_final), cell(m.f_mean)]);
        }
        let a = &tab.aggregates;
        r.extend([cell(a.a_mean), cell(a.f_mean), cell(a.a_final)]);
        rows.push(r);
    }
    write_csv(rows)
}

/// Transfer layout: per task `A_single, A_multi`, then their means and Diff.
pub fn transfer_csv(tables: &[MetricsTable]) -> Result<String> {
    let tasks = task_list(tables)?;
    let mut header = vec!["Method".to_string()];
    for t in &tasks {
        header.extend([format!("{t} A_single"), format!("{t} A_multi")]);
    }
    header.extend(["Mean A_single", "Mean A_multi", "Diff"].map(String::from));
    let mut rows = vec![header];
    for tab in tables {
        let mut r = vec![tab.method.clone()];
        for (_, m) in &tab.per_task {
            r.extend([cell(m.a_single), cell(m.a_multi)]);
        }
        let a = &tab.aggregates;
        r.extend([cell(a.a_single), cell(a.a_multi), cell(a.diff)]);
        rows.push(r);
    }
    write_csv(rows)
}

fn rounded(t: &MetricsTable) -> MetricsTable {
    let r = |x: Option<f64>| x.map(round2);
    MetricsTable {
        method: t.method.clone(),
        per_task: t
            .per_task
            .iter()
            .map(|(id, m)| {
                (
                    id.clone(),
                    TaskMetrics {
                        a_mean: r(m.a_mean),
                        a_final: r(m.a_final),
                        f_mean: r(m.f_mean),
                        a_single: r(m.a_single),
                        a_multi: r(m.a_multi),
                    },
                )
            })
            .collect(),
        aggregates: Aggregates {
            a_mean: r(t.aggregates.a_mean),
            f_mean: r(t.aggregates.f_mean),
            a_final: r(t.aggregates.a_final),
            a_single: r(t.aggregates.a_single),
            a_multi: r(t.aggregates.a_multi),
            diff: r(t.aggregates.diff),
        },
    }
}

pub fn metrics_json(tables: &[MetricsTable]) -> Result<String> {
    task_list(tables)?;
    let rounded: Vec<MetricsTable> = tables.iter().map(rounded).collect();
    Ok(serde_json::to_string_pretty(&rounded).expect("serializable") + "\n")
}

/// Renders `tables` as `forgetting.csv` + `transfer.csv`, or `metrics.json`.
pub fn render_report(tables: &[MetricsTable], format: ReportFormat) -> Result<Vec<Document>> {
    Ok(match format {
        ReportFormat::Csv => vec![
            Document {
                file_name: "forgetting.csv".into(),
                contents: forgetting_csv(tables)?,
            },
            Document {
                file_name: "transfer.csv".into(),
                contents: transfer_csv(tables)?,
            },
        ],
        ReportFormat::Json => vec![Document {
            file_name: "metrics.json".into(),
            contents: metrics_json(tables)?,
        }],
    })
}

pub fn parse_metrics_json(text: &str) -> Result<Vec<MetricsTable>> {
    serde_json::from_str(text).map_err(|e| Error::invalid("metrics json", e.to_string()))
}

/// Inverse of [`forgetting_csv`] + [`transfer_csv`].
pub fn parse_report_csv(forgetting: &str, transfer: &str) -> Result<Vec<MetricsTable>> {
    let f = read_csv(forgetting)?;
    let t = read_csv(transfer)?;
    let (fh, frows) = f
        .split_first()
        .ok_or_else(|| Error::invalid("forgetting csv", "empty"))?;
    let (th, trows) = t
        .split_first()
        .ok_or_else(|| Error::invalid("transfer csv", "empty"))?;
    if frows.len() != trows.len() {
        return Err(Error::invalid(
            "report csv",
            "forgetting and transfer tables list different methods",
        ));
    }
    let ntasks = (fh.len().saturating_sub(4)) / 3;
    if fh.len() != 4 + 3 * ntasks || th.len() != 4 + 2 * ntasks || ntasks == 0 {
        return Err(Error::invalid("report csv", "unexpected column layout"));
    }
    let tasks: Vec<String> = (0..ntasks)
        .map(|i| fh[1 + 3 * i].trim_end_matches(" A_mean").to_string())
        .collect();
    let mut out = Vec::new();
    for (fr, tr) in frows.iter().zip(trows) {
        if fr.len() != fh.len() || tr.len() != th.len() || fr[0] != tr[0] {
            return Err(Error::invalid(
                "report csv",
                format!("row `{}` is malformed", fr[0]),
            ));
        }
        let num = |s: &str| parse_cell("report csv", s);
        let mut per_task = Vec::new();
        for (i, id) in tasks.iter().enumerate() {
            per_task.push((
                id.clone(),
                TaskMetrics {
                    a_mean: num(&fr[1 + 3 * i])?,
                    a_final: num(&fr[2 + 3 * i])?,
                    f_mean: num(&fr[3 + 3 * i])?,
                    a_single: num(&tr[1 + 2 * i])?,
                    a_multi: num(&tr[2 + 2 * i])?,
                },
            ));
        }
        let k = 1 + 3 * ntasks;
        let j = 1 + 2 * ntasks;
        out.push(MetricsTable {
            method: fr[0].clone(),
            per_task,
            aggregates: Aggregates {
                a_mean: num(&fr[k])?,
                f_mean: num(&fr[k + 1])?,
                a_final: num(&fr[k + 2])?,
                a_single: num(&tr[j])?,
                a_multi: num(&tr[j + 1])?,
                diff: num(&tr[j + 2])?,
            },
        });
    }
    Ok(out)
}

/// Which ablation a comparison table belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    /// Component masks: a check mark per enabled component.
    Components,
    /// Placements: the band letter of each component.
    Placement,
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "components" => Ok(Self::Components),
            "placement" => Ok(Self::Placement),
            other => Err(Error::invalid(
                "ablation kind",
                format!("unknown kind `{other}` (components or placement)"),
            )),
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Components => "components",
            Self::Placement => "placement",
        })
    }
}

/// Forgetting and transfer comparison tables for an ablation:
/// `Row, TMA, TMDG, TMI` followed by `A_mean, A_final, F_mean` or
/// `A_single, A_multi, Diff` (averaged over tasks).
pub fn ablation_csv(kind: AblationKind, outcomes: &[AblationOutcome]) -> Result<(String, String)> {
    if outcomes.is_empty() {
        return Err(Error::invalid("ablation table", "no rows"));
    }
    let setup = |o: &AblationOutcome| -> Vec<String> {
        Component::ALL
            .iter()
            .map(|&c| match kind {
                AblationKind::Components if o.row.components.contains(c) => "✓".to_string(),
                AblationKind::Components => String::new(),
                AblationKind::Placement => o.row.placement.band(c).letter().to_string(),
            })
            .collect()
    };
    let head = |cols: [&str; 3]| -> Vec<String> {
        ["Row", "TMA", "TMDG", "TMI"]
            .iter()
            .chain(cols.iter())
            .map(|s| s.to_string())
            .collect()
    };
    let mut forgetting = vec![head(["A_mean", "A_final", "F_mean"])];
    let mut transfer = vec![head(["A_single", "A_multi", "Diff"])];
    for o in outcomes {
        let a = &o.table.aggregates;
        let mut f = vec![o.row.label.clone()];
        f.extend(setup(o));
        f.extend([cell(a.a_mean), cell(a.a_final), cell(a.f_mean)]);
        forgetting.push(f);
        let mut t = vec![o.row.label.clone()];
        t.extend(setup(o));
        t.extend([cell(a.a_single), cell(a.a_multi), cell(a.diff)]);
        transfer.push(t);
    }
    Ok((write_csv(forgetting)?, write_csv(transfer)?))
}

/// Stage matrices side by side, [`ORDERS_PER_BLOCK`] orders per block:
/// a `Stage` header naming each order (`A→B→C`), then one line per stage.
pub fn stage_tables_csv(results: &[StageMatrix]) -> Result<String> {
    let first = results
        .first()
        .ok_or_else(|| Error::invalid("stage tables", "no task orders"))?;
    let s = first.stages();
    for r in results {
        r.validate()?;
        if r.stages() != s {
            return Err(Error::invalid(
                "stage tables",
                "orders of different lengths",
            ));
        }
    }
    let mut rows = Vec::new();
    for block in results.chunks(ORDERS_PER_BLOCK) {
        let mut header = vec!["Stage".to_string()];
        for r in block {
            header.push(r.order.join(ARROW));
            header.extend(std::iter::repeat_n(String::new(), s - 1));
        }
        rows.push(header);
        for stage in 0..s {
            let mut line = vec![(stage + 1).to_string()];
            for r in block {
                for k in 0..s {
                    line.push(r.acc[stage].get(k).map(|&a| fmt2(a)).unwrap_or_default());
                }
            }
            rows.push(line);
        }
    }
    write_csv(rows)
}

pub fn parse_stage_tables(text: &str) -> Result<Vec<StageMatrix>> {
    let rows = read_csv(text)?;
    let bad = |m: String| Error::invalid("stage tables", m);
    let mut out = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let header = &rows[i];
        if header.first().map(String::as_str) != Some("Stage") {
            return Err(bad(format!(
                "line {} should start a block with `Stage`",
                i + 1
            )));
        }
        let body: Vec<&Vec<String>> = rows[i + 1..]
            .iter()
            .take_while(|r| r.first().map(String::as_str) != Some("Stage"))
            .collect();
        let s = body.len();
        if s == 0 {
            return Err(bad(format!("block at line {} has no stages", i + 1)));
        }
        let orders: Vec<(usize, Vec<String>)> = header
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, c)| !c.is_empty())
            .map(|(col, c)| (col, c.split(ARROW).map(str::to_string).collect()))
            .collect();
        for (col, order) in orders {
            if order.len() != s {
                return Err(bad(format!(
                    "order `{}` has {} tasks but the block has {s} stages",
                    order.join(ARROW),
                    order.len()
                )));
            }
            let mut acc = Vec::with_capacity(s);
            for (stage, line) in body.iter().enumerate() {
                let mut row = Vec::with_capacity(stage + 1);
                for k in 0..=stage {
                    let v = line.get(col + k).map(String::as_str).unwrap_or("");
                    row.push(parse_cell("stage tables", v)?.ok_or_else(|| {
                        bad(format!(
                            "missing value at stage {} of `{}`",
                            stage + 1,
                            order.join(ARROW)
                        ))
                    })?);
                }
                acc.push(row);
            }
            let m = StageMatrix { order, acc };
            m.validate()?;
            out.push(m);
        }
        i += 1 + s;
    }
    if out.is_empty() {
        return Err(bad("no task orders".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_up_rounding() {
        assert_eq!(fmt2(2.675), "2.68");
        assert_eq!(fmt2(-58.165), "-58.16");
        assert_eq!(fmt2(1.004999), "1.00");
        assert_eq!(fmt2(-0.001), "0.00");
    }

    #[test]
    fn unknown_format_is_rejected() {
        assert!("xml".parse::<ReportFormat>().is_err());
        assert_eq!("CSV".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(render_report(&[], ReportFormat::Csv).is_err());
        assert!(stage_tables_csv(&[]).is_err());
        assert!(parse_stage_tables("").is_err());
    }
}
