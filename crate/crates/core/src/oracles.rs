//! Independent reference implementations used by the test suite.
//!
//! Everything here is plain `f64` scalar-loop code over `Vec`s and slices;
//! none of it calls into the pipeline modules, so agreement between the two
//! is meaningful evidence.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub param_name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

/// Central differences of `loss` around `params`, compared with `analytic`.
pub fn finite_diff_grad(
    param_name: &str,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::shape(
            format!("gradient of {param_name}"),
            &[params.len()],
            &[analytic.len()],
        ));
    }
    let mut x = params.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss while perturbing {param_name}[{i}]"
            )));
        }
        numeric.push((up - down) / (2.0 * h));
    }
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        param_name: param_name.to_string(),
        analytic: analytic.to_vec(),
        numeric,
        max_rel_err,
    })
}

pub type Matrix = Vec<Vec<f64>>;

fn matvec_rows(x: &[f64], w: &Matrix) -> Vec<f64> {
    // x · W with W stored [in][out].
    let out = w.first().map_or(0, Vec::len);
    (0..out)
        .map(|j| x.iter().enumerate().map(|(i, &xi)| xi * w[i][j]).sum())
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Multi-head attention weights, `[in][out]` layout, q/k/v stacked along out.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveAttentionWeights {
    pub w_qkv: Matrix,
    pub b_qkv: Vec<f64>,
    pub w_o: Matrix,
    pub b_o: Vec<f64>,
    pub heads: usize,
}

/// O(n²) attention over `tokens: [n][d]`. Returns the output rows and the
/// attention probabilities `[head][query][key]`.
pub fn naive_attention(tokens: &[Vec<f64>], w: &NaiveAttentionWeights) -> (Matrix, Vec<Matrix>) {
    let n = tokens.len();
    let d = w.w_o.len();
    let dh = d / w.heads;
    let qkv: Matrix = tokens
        .iter()
        .map(|x| {
            matvec_rows(x, &w.w_qkv)
                .iter()
                .zip(&w.b_qkv)
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    let mut ctx = vec![vec![0.0; d]; n];
    let mut probs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let mut ph = Vec::with_capacity(n);
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += qkv[i][h * dh + c] * qkv[j][d + h * dh + c];
                    }
                    s / (dh as f64).sqrt()
                })
                .collect();
            let p = softmax(&scores);
            for c in 0..dh {
                ctx[i][h * dh + c] = (0..n).map(|j| p[j] * qkv[j][2 * d + h * dh + c]).sum();
            }
            ph.push(p);
        }
        probs.push(ph);
    }
    let out = ctx
        .iter()
        .map(|c| {
            matvec_rows(c, &w.w_o)
                .iter()
                .zip(&w.b_o)
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    (out, probs)
}

/// Gate fusion by explicit triple loop over a `[T][S][C]` block:
/// `out[t][s][c] = (α·m_c[c] + β·m_s[s] + γ·m_t[t]) · x[t][s][c]`.
pub fn naive_fuse(
    x: &[Matrix],
    m_c: &[f64],
    m_s: &[f64],
    m_t: &[f64],
    coef: (f64, f64, f64),
) -> Vec<Matrix> {
    let (a, b, g) = coef;
    let mut out = x.to_vec();
    for t in 0..x.len() {
        for s in 0..x[t].len() {
            for c in 0..x[t][s].len() {
                out[t][s][c] = (a * m_c[c] + b * m_s[s] + g * m_t[t]) * x[t][s][c];
            }
        }
    }
    out
}

/// Channel gate `σ(W · δ · ā)` with matrices in `[out][in]` layout.
pub fn naive_channel_gate(w: &Matrix, delta: &Matrix, stat: &[f64]) -> Vec<f64> {
    let u: Vec<f64> = delta
        .iter()
        .map(|row| row.iter().zip(stat).map(|(a, b)| a * b).sum())
        .collect();
    w.iter()
        .map(|row| sigmoid(row.iter().zip(&u).map(|(a, b)| a * b).sum()))
        .collect()
}

/// One GRU step (gate order r, z, n); weights `[3H][in]`, `[3H][H]`.
pub fn naive_gru_step(
    x: &[f64],
    h: &[f64],
    w_ih: &Matrix,
    w_hh: &Matrix,
    b_ih: &[f64],
    b_hh: &[f64],
) -> Vec<f64> {
    let hd = h.len();
    let dot = |row: &Vec<f64>, v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    (0..hd)
        .map(|j| {
            let r = sigmoid(dot(&w_ih[j], x) + b_ih[j] + dot(&w_hh[j], h) + b_hh[j]);
            let z = sigmoid(
                dot(&w_ih[hd + j], x) + b_ih[hd + j] + dot(&w_hh[hd + j], h) + b_hh[hd + j],
            );
            let n = (dot(&w_ih[2 * hd + j], x)
                + b_ih[2 * hd + j]
                + r * (dot(&w_hh[2 * hd + j], h) + b_hh[2 * hd + j]))
                .tanh();
            (1.0 - z) * n + z * h[j]
        })
        .collect()
}

/// Two-layer perceptron with ReLU, weights `[in][out]`.
pub fn naive_mlp(x: &[f64], w1: &Matrix, b1: &[f64], w2: &Matrix, b2: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = matvec_rows(x, w1)
        .iter()
        .zip(b1)
        .map(|(a, b)| (a + b).max(0.0))
        .collect();
    matvec_rows(&h, w2)
        .iter()
        .zip(b2)
        .map(|(a, b)| a + b)
        .collect()
}

/// Row-softmax of `logits` (length `n·L`, row-major `[n][L]`) mixed with
/// `pool: [L][d]`. Returns `(weights, prompts)`.
pub fn naive_softmax_mix(logits: &[f64], n: usize, pool: &Matrix) -> (Matrix, Matrix) {
    let l = pool.len();
    let d = pool.first().map_or(0, Vec::len);
    let mut weights = Vec::with_capacity(n);
    let mut prompts = Vec::with_capacity(n);
    for r in 0..n {
        let w = softmax(&logits[r * l..(r + 1) * l]);
        let g: Vec<f64> = (0..d)
            .map(|c| (0..l).map(|k| w[k] * pool[k][c]).sum())
            .collect();
        weights.push(w);
        prompts.push(g);
    }
    (weights, prompts)
}

/// Symmetric InfoNCE written out term by term.
pub fn naive_contrastive(f: &Matrix, t: &Matrix, tau: f64) -> f64 {
    let n = f.len();
    let sim = |i: usize, j: usize| f[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| sim(i, j).exp()).sum();
        let col: f64 = (0..n).map(|j| sim(j, i).exp()).sum();
        total += (sim(i, i).exp() / row).ln() + (sim(i, i).exp() / col).ln();
    }
    -total / (2.0 * n as f64)
}

/// Exhaustive arg-max, lowest index on ties.
pub fn brute_argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

/// Nearest-class-mean accuracy in `[0, 1]`: class means from `train`,
/// squared Euclidean distance, ties to the lowest class key.
pub fn nearest_class_mean_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)]) -> f64 {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (x, y) in train {
        let e = sums.entry(*y).or_insert_with(|| (vec![0.0; x.len()], 0));
        e.0.iter_mut().zip(x).for_each(|(s, v)| *s += v);
        e.1 += 1;
    }
    let means: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let mut correct = 0;
    for (x, y) in test {
        let mut best = (f64::INFINITY, usize::MAX);
        for (k, m) in &means {
            let d: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, *k);
            }
        }
        if best.1 == *y {
            correct += 1;
        }
    }
    correct as f64 / test.len().max(1) as f64
}

/// Normalized, penalty-aware difference, in percent.
pub fn naive_diff(a_single: f64, a_multi: f64) -> f64 {
    (a_multi - a_single) / (100.0 - a_single).max(0.001) * (1.0 + a_single / 100.0).powi(2) * 100.0
}

/// One recomputed cell of the summary tables.
#[derive(Debug, Clone, PartialEq)]
pub struct CellDiff {
    pub method: String,
    pub column: String,
    pub printed: f64,
    pub recomputed: f64,
}

impl CellDiff {
    pub fn abs_diff(&self) -> f64 {
        (self.printed - self.recomputed).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrintedTableReport {
    pub cells: Vec<CellDiff>,
}

impl PrintedTableReport {
    /// Cells whose recomputation differs from print by more than `tol`.
    pub fn discrepancies(&self, tol: f64) -> Vec<&CellDiff> {
        self.cells.iter().filter(|c| c.abs_diff() > tol).collect()
    }

    pub fn cell(&self, method: &str, column: &str) -> Option<&CellDiff> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.column == column)
    }
}

/// Stage-table fixture of each method that has one.
pub const STAGE_FIXTURES: [(&str, &str); 6] = [
    ("Fine-tune", "stages_finetune.csv"),
    ("EWC", "stages_ewc.csv"),
    ("L2P", "stages_l2p.csv"),
    ("S-prompt", "stages_sprompt.csv"),
    ("Dualprompt", "stages_dualprompt.csv"),
    ("PC", "stages_pc.csv"),
];

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::invalid("fixture", format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for r in rdr.records() {
        rows.push(r?.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

/// `order name → (tasks, lower-triangular accuracies)`.
fn read_stage_tables(path: &Path) -> Result<Vec<(Vec<String>, Vec<Vec<f64>>)>> {
    let rows = read_rows(path)?;
    let mut out = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        if rows[i].first().map(String::as_str) != Some("Stage") {
            i += 1;
            continue;
        }
        let header = &rows[i];
        let mut starts = Vec::new();
        for (c, cell) in header.iter().enumerate().skip(1) {
            if !cell.is_empty() {
                starts.push((c, cell.split('→').map(str::to_string).collect::<Vec<_>>()));
            }
        }
        for (col, tasks) in starts {
            let s = tasks.len();
            let mut acc = Vec::new();
            for stage in 0..s {
                let row = rows.get(i + 1 + stage).ok_or_else(|| {
                    Error::invalid("fixture", format!("{} is truncated", path.display()))
                })?;
                let vals = (0..=stage)
                    .map(|k| {
                        row.get(col + k)
                            .and_then(|v| v.trim().parse::<f64>().ok())
                            .ok_or_else(|| {
                                Error::invalid(
                                    "fixture",
                                    format!("{}: bad cell at stage {}", path.display(), stage + 1),
                                )
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                acc.push(vals);
            }
            out.push((tasks, acc));
        }
        i += 1;
    }
    Ok(out)
}

fn read_printed(path: &Path) -> Result<(Vec<String>, BTreeMap<String, Vec<f64>>)> {
    let rows = read_rows(path)?;
    let header = rows
        .first()
        .cloned()
        .ok_or_else(|| Error::invalid("fixture", format!("{} is empty", path.display())))?;
    let mut out = BTreeMap::new();
    for r in &rows[1..] {
        let vals = r[1..]
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    Error::invalid("fixture", format!("{}: bad number {v}", path.display()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(r[0].clone(), vals);
    }
    Ok((header[1..].to_vec(), out))
}

/// Recomputes the summary-table cells of every method with a stage table
/// and pairs them with the printed values.
pub fn recompute_printed_tables(fixture_dir: &Path) -> Result<PrintedTableReport> {
    for f in ["printed_forgetting.csv", "printed_transfer.csv"]
        .into_iter()
        .chain(STAGE_FIXTURES.iter().map(|(_, f)| *f))
    {
        if !fixture_dir.join(f).is_file() {
            return Err(Error::invalid(
                "fixtures",
                format!("missing {}", fixture_dir.join(f).display()),
            ));
        }
    }
    let (cols1, printed1) = read_printed(&fixture_dir.join("printed_forgetting.csv"))?;
    let (cols2, printed2) = read_printed(&fixture_dir.join("printed_transfer.csv"))?;
    let tasks = ["AVE", "AVVP", "AVQA"];
    let mut cells = Vec::new();
    for (method, file) in STAGE_FIXTURES {
        let orders = read_stage_tables(&fixture_dir.join(file))?;
        let mut t1 = Vec::new();
        let mut t2 = Vec::new();
        for task in tasks {
            let first: Vec<Vec<f64>> = orders
                .iter()
                .filter(|(ts, _)| ts[0] == task)
                .map(|(_, acc)| acc.iter().map(|row| row[0]).collect())
                .collect();
            let s = first[0].len() as f64;
            let k = first.len() as f64;
            let a_mean = first.iter().flatten().sum::<f64>() / (s * k);
            let a_final = first.iter().map(|a| a[a.len() - 1]).sum::<f64>() / k;
            let f_mean = first
                .iter()
                .map(|a| (a[0] - a[a.len() - 1]) / (s - 1.0))
                .sum::<f64>()
                / k;
            let a_single = first.iter().map(|a| a[0]).sum::<f64>() / k;
            let last: Vec<f64> = orders
                .iter()
                .filter(|(ts, _)| ts.last().map(String::as_str) == Some(task))
                .map(|(_, acc)| *acc.last().and_then(|r| r.last()).expect("non-empty"))
                .collect();
            let a_multi = last.iter().sum::<f64>() / last.len() as f64;
            t1.extend([a_mean, a_final, f_mean]);
            t2.extend([a_single, a_multi]);
        }
        let mean = |v: &[f64], off: usize, step: usize| {
            v.iter().skip(off).step_by(step).sum::<f64>() / 3.0
        };
        t1.extend([mean(&t1, 0, 3), mean(&t1, 2, 3), mean(&t1, 1, 3)]);
        let (ms, mm) = (mean(&t2, 0, 2), mean(&t2, 1, 2));
        t2.extend([ms, mm, naive_diff(ms, mm)]);
        for (cols, printed, rec) in [(&cols1, &printed1, &t1), (&cols2, &printed2, &t2)] {
            let p = printed.get(method).ok_or_else(|| {
                Error::invalid("fixtures", format!("no printed row for {method}"))
            })?;
            for ((c, &pv), &rv) in cols.iter().zip(p).zip(rec) {
                cells.push(CellDiff {
                    method: method.to_string(),
                    column: c.clone(),
                    printed: pv,
                    recomputed: rv,
                });
            }
        }
    }
    Ok(PrintedTableReport { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let r = finite_diff_grad("x", &[1.0, 2.0], &[1.0, 2.0], 1e-4, |x| {
            0.5 * (x[0] * x[0] + x[1] * x[1])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let w = NaiveAttentionWeights {
            w_qkv: vec![
                vec![1.0, 0.0, 2.0, 0.5, 3.0, -1.0],
                vec![0.0, 1.0, 0.0, 1.0, 1.0, 4.0],
            ],
            b_qkv: vec![0.0; 6],
            w_o: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            b_o: vec![0.0; 2],
            heads: 1,
        };
        let (out, probs) = naive_attention(&[vec![1.0, 2.0]], &w);
        assert_eq!(out[0], vec![5.0, 7.0]);
        assert_eq!(probs[0][0], vec![1.0]);
    }

    #[test]
    fn contrastive_identity_case() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((naive_contrastive(&e, &e, 1.0) - 0.313262).abs() < 1e-5);
    }
}
