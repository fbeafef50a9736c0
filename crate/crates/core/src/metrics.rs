//! Forgetting and transfer metrics over the stage matrices of several task
//! orders.
//!
//! For a task `t` and the orders where it comes first, with accuracies
//! `a_1..a_S` of `t` after each stage:
//! `A_mean` averages every `a_s`, `A_final` averages `a_S`, `F_mean`
//! averages `(a_1 − a_S)/(S − 1)` and `A_single` averages `a_1`.
//! `A_multi` averages the final-stage accuracy over the orders where `t`
//! comes last.

use serde::{Deserialize, Serialize};

use crate::engine::SequenceResult;
use crate::error::{Error, Result};

pub const DIFF_EPS: f64 = 0.001;

/// Task order plus its lower-triangular accuracy matrix (percent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMatrix {
    pub order: Vec<String>,
    pub acc: Vec<Vec<f64>>,
}

impl From<&SequenceResult> for StageMatrix {
    fn from(r: &SequenceResult) -> Self {
        Self {
            order: r.order.clone(),
            acc: r.acc.clone(),
        }
    }
}

impl StageMatrix {
    pub fn stages(&self) -> usize {
        self.order.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.order.is_empty() || self.acc.len() != self.order.len() {
            return Err(Error::invalid(
                "stage matrix",
                format!("{} rows for {} tasks", self.acc.len(), self.order.len()),
            ));
        }
        for (s, row) in self.acc.iter().enumerate() {
            if row.len() != s + 1 {
                return Err(Error::invalid(
                    "stage matrix",
                    format!("stage {} has {} entries", s + 1, row.len()),
                ));
            }
            if let Some(a) = row.iter().find(|a| !a.is_finite()) {
                return Err(Error::invalid(
                    "stage matrix",
                    format!("stage {} holds {a}", s + 1),
                ));
            }
        }
        Ok(())
    }

    /// Accuracy of the first task at every stage.
    fn first_trajectory(&self) -> Vec<f64> {
        self.acc.iter().map(|r| r[0]).collect()
    }
}

fn check_uniform(results: &[StageMatrix]) -> Result<usize> {
    let first = results
        .first()
        .ok_or_else(|| Error::invalid("results", "no task orders"))?;
    for r in results {
        r.validate()?;
        if r.stages() != first.stages() {
            return Err(Error::invalid(
                "results",
                format!(
                    "orders of different lengths ({} and {})",
                    first.stages(),
                    r.stages()
                ),
            ));
        }
    }
    Ok(first.stages())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstTaskStats {
    pub a_mean: f64,
    pub a_final: f64,
    pub f_mean: f64,
    pub a_single: f64,
}

/// Statistics of `task` over the orders where it is trained first. With a
/// single stage there is nothing to forget and `F_mean` is 0.
pub fn first_task_stats(results: &[StageMatrix], task: &str) -> Result<FirstTaskStats> {
    let s = check_uniform(results)?;
    let trajectories: Vec<Vec<f64>> = results
        .iter()
        .filter(|r| r.order[0] == task)
        .map(StageMatrix::first_trajectory)
        .collect();
    if trajectories.is_empty() {
        return Err(Error::invalid(
            format!("task {task}"),
            "never trained first",
        ));
    }
    let all: Vec<f64> = trajectories.iter().flatten().copied().collect();
    let finals: Vec<f64> = trajectories.iter().map(|t| t[s - 1]).collect();
    let firsts: Vec<f64> = trajectories.iter().map(|t| t[0]).collect();
    let f_mean = if s > 1 {
        mean(
            &trajectories
                .iter()
                .map(|t| (t[0] - t[s - 1]) / (s - 1) as f64)
                .collect::<Vec<_>>(),
        )
    } else {
        0.0
    };
    Ok(FirstTaskStats {
        a_mean: mean(&all),
        a_final: mean(&finals),
        f_mean,
        a_single: mean(&firsts),
    })
}

/// Mean final accuracy of `task` over the orders where it is trained last.
pub fn multi_task_acc(results: &[StageMatrix], task: &str) -> Result<f64> {
    let s = check_uniform(results)?;
    let finals: Vec<f64> = results
        .iter()
        .filter(|r| r.order[s - 1] == task)
        .map(|r| r.acc[s - 1][s - 1])
        .collect();
    if finals.is_empty() {
        return Err(Error::invalid(format!("task {task}"), "never trained last"));
    }
    Ok(mean(&finals))
}

/// Single-task accuracy: the first-stage accuracy of the orders where
/// `task` comes first, which is exactly training it alone.
pub fn single_task_acc(results: &[StageMatrix], task: &str) -> Result<f64> {
    Ok(first_task_stats(results, task)?.a_single)
}

/// Normalized penalty-aware difference in percent:
/// `(A_multi − A_single) / max(100 − A_single, eps) · (1 + A_single/100)² · 100`.
pub fn diff_metric(a_single: f64, a_multi: f64, eps: f64) -> f64 {
    let headroom = (100.0 - a_single).max(eps);
    let penalty = (1.0 + a_single / 100.0).powi(2);
    (a_multi - a_single) / headroom * penalty * 100.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub a_mean: Option<f64>,
    pub a_final: Option<f64>,
    pub f_mean: Option<f64>,
    pub a_single: Option<f64>,
    pub a_multi: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub a_mean: Option<f64>,
    pub f_mean: Option<f64>,
    pub a_final: Option<f64>,
    pub a_single: Option<f64>,
    pub a_multi: Option<f64>,
    pub diff: Option<f64>,
}

/// One method's row of the forgetting and transfer tables. A cell is
/// `None` when no order puts the task in the needed position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub method: String,
    /// `(task, metrics)` in column order.
    pub per_task: Vec<(String, TaskMetrics)>,
    pub aggregates: Aggregates,
}

/// Every task of `results` in order of first appearance.
pub fn task_columns(results: &[StageMatrix]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in results.iter().flat_map(|r| &r.order) {
        if !out.contains(t) {
            out.push(t.clone());
        }
    }
    out
}

/// Mean of a column when every task has it.
fn column_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

impl MetricsTable {
    pub fn from_results(method: &str, tasks: &[String], results: &[StageMatrix]) -> Result<Self> {
        check_uniform(results)?;
        if tasks.is_empty() {
            return Err(Error::invalid("metrics", "no tasks"));
        }
        for r in results {
            if let Some(t) = r.order.iter().find(|t| !tasks.contains(t)) {
                return Err(Error::UnknownTask(t.clone()));
            }
        }
        let per_task = tasks
            .iter()
            .map(|t| {
                let first = first_task_stats(results, t).ok();
                let m = TaskMetrics {
                    a_mean: first.map(|f| f.a_mean),
                    a_final: first.map(|f| f.a_final),
                    f_mean: first.map(|f| f.f_mean),
                    a_single: first.map(|f| f.a_single),
                    a_multi: multi_task_acc(results, t).ok(),
                };
                (t.clone(), m)
            })
            .collect();
        Ok(Self::with_per_task(method, per_task))
    }

    /// Builds the aggregates from per-task metrics.
    pub fn with_per_task(method: &str, per_task: Vec<(String, TaskMetrics)>) -> Self {
        let col =
            |f: fn(&TaskMetrics) -> Option<f64>| column_mean(per_task.iter().map(|(_, m)| f(m)));
        let a_single = col(|m| m.a_single);
        let a_multi = col(|m| m.a_multi);
        let aggregates = Aggregates {
            a_mean: col(|m| m.a_mean),
            f_mean: col(|m| m.f_mean),
            a_final: col(|m| m.a_final),
            a_single,
            a_multi,
            diff: a_single
                .zip(a_multi)
                .map(|(s, m)| diff_metric(s, m, DIFF_EPS)),
        };
        Self {
            method: method.to_string(),
            per_task,
            aggregates,
        }
    }

    pub fn task(&self, id: &str) -> Option<&TaskMetrics> {
        self.per_task.iter().find(|(t, _)| t == id).map(|(_, m)| m)
    }
}
