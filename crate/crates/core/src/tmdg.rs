//! Task-specific, modality-shared dynamic prompt generation.
//!
//! Per task there is a prompt pool `P ∈ ℝ^{L×d}` and a projection `δ_s`.
//! An instance summary `S = mean(SelfAttn([tokens; P]))` is projected to
//! `n × L` logits; each row is softmax-normalized and mixes the pool rows,
//! giving `n` generated prompts that are prepended to the token stream. The
//! same pool and projection serve the video and audio streams.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionCache, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::tensor::{
    join_name, lit, normal, softmax_rows, softmax_rows_backward, Parameters, Real,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmdgConfig {
    /// Pool size `L`.
    pub pool_size: usize,
    /// Generated prompt length `n`.
    pub prompt_len: usize,
    pub heads: usize,
}

impl Default for TmdgConfig {
    fn default() -> Self {
        Self {
            pool_size: 10,
            prompt_len: 4,
            heads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool<F> {
    pub task_id: String,
    /// `[L, d]`
    pub prompts: Array2<F>,
}

/// Trainable per-task part of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct TmdgTask<F> {
    pub pool: PromptPool<F>,
    /// `[n·L, d]`
    pub delta_s: Array2<F>,
}

impl<F: Real> TmdgTask<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, task_id: &str, cfg: &TmdgConfig, dim: usize) -> Self {
        Self {
            pool: PromptPool {
                task_id: task_id.to_string(),
                prompts: normal(rng, (cfg.pool_size, dim), 0.02),
            },
            delta_s: normal(
                rng,
                (cfg.prompt_len * cfg.pool_size, dim),
                1.0 / (dim as f64).sqrt(),
            ),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            pool: PromptPool {
                task_id: self.pool.task_id.clone(),
                prompts: Array2::zeros(self.pool.prompts.raw_dim()),
            },
            delta_s: Array2::zeros(self.delta_s.raw_dim()),
        }
    }

    pub fn pool_size(&self) -> usize {
        self.pool.prompts.nrows()
    }

    pub fn prompt_len(&self) -> usize {
        self.delta_s.nrows() / self.pool_size()
    }
}

impl<F: Real> Parameters<F> for TmdgTask<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'a, F>)) {
        f(
            join_name(prefix, "pool"),
            self.pool.prompts.view().into_dyn(),
        );
        f(join_name(prefix, "delta_s"), self.delta_s.view().into_dyn());
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'a, F>),
    ) {
        f(
            join_name(prefix, "pool"),
            self.pool.prompts.view_mut().into_dyn(),
        );
        f(
            join_name(prefix, "delta_s"),
            self.delta_s.view_mut().into_dyn(),
        );
    }
}

/// Self-attention block with residual, `X + MHA(X)`, shared by all tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Summarizer<F> {
    pub attn: MultiHeadAttention<F>,
}

pub struct SummarizeCache<F> {
    attn: AttentionCache<F>,
    tokens_len: usize,
    rows: usize,
}

impl<F: Real> Summarizer<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(rng, dim, heads)?,
        })
    }

    /// Self-attention that reduces to the identity (zero output projection).
    pub fn identity(dim: usize, heads: usize) -> Self {
        Self {
            attn: MultiHeadAttention::zeros(dim, heads),
        }
    }

    /// `S = mean_rows(X + MHA(X))` with `X = [tokens; P]`; `tokens: [B, T', d]`.
    pub fn summarize(
        &self,
        tokens: ArrayView3<'_, F>,
        pool: &PromptPool<F>,
    ) -> Result<(Array2<F>, SummarizeCache<F>)> {
        let (b, t, d) = tokens.dim();
        let (l, pd) = pool.prompts.dim();
        if d != pd || d != self.attn.dim() {
            return Err(Error::shape(
                "TMDG summarize tokens",
                &[b, t, pd],
                &[b, t, d],
            ));
        }
        let pool_b = pool.prompts.broadcast((b, l, d)).expect("broadcast pool");
        let x = concatenate(Axis(1), &[tokens, pool_b]).expect("same width");
        let (att, cache) = self.attn.forward(x.view())?;
        let y = x + att;
        let s = y.mean_axis(Axis(1)).expect("non-empty");
        Ok((
            s,
            SummarizeCache {
                attn: cache,
                tokens_len: t,
                rows: t + l,
            },
        ))
    }

    /// Returns `(d_tokens [B, T', d], d_pool [L, d])`. Attention weight
    /// gradients are accumulated only when `attn_grads` is given.
    pub fn summarize_backward(
        &self,
        cache: &SummarizeCache<F>,
        d_summary: ArrayView2<'_, F>,
        attn_grads: Option<&mut MultiHeadAttention<F>>,
    ) -> (Array3<F>, Array2<F>) {
        let (b, d) = d_summary.dim();
        let scale = lit::<F>(1.0 / cache.rows as f64);
        let dy = Array3::from_shape_fn((b, cache.rows, d), |(i, _, k)| d_summary[[i, k]] * scale);
        let dx = &dy + &self.attn.backward(&cache.attn, dy.view(), attn_grads);
        let d_tokens = dx.slice(s![.., ..cache.tokens_len, ..]).to_owned();
        let d_pool = dx.slice(s![.., cache.tokens_len.., ..]).sum_axis(Axis(0));
        (d_tokens, d_pool)
    }
}

pub struct GenerateCache<F> {
    summary: Array2<F>,
    /// Mixture weights `[B, n, L]`.
    weights: Array3<F>,
}

impl<F: Real> GenerateCache<F> {
    pub fn weights(&self) -> &Array3<F> {
        &self.weights
    }
}

/// `G[b] = softmax_rows(reshape(δ_s S[b], n × L)) · P`; returns `[B, n, d]`.
pub fn generate<F: Real>(
    summary: ArrayView2<'_, F>,
    task: &TmdgTask<F>,
) -> Result<(Array3<F>, GenerateCache<F>)> {
    let (b, d) = summary.dim();
    let (l, pd) = task.pool.prompts.dim();
    if d != pd || task.delta_s.ncols() != d {
        return Err(Error::shape("TMDG summary", &[b, pd], &[b, d]));
    }
    let n = task.prompt_len();
    let logits = summary.dot(&task.delta_s.t());
    let mut weights = logits.into_shape_with_order((b, n, l)).expect("n·L logits");
    for mut m in weights.outer_iter_mut() {
        softmax_rows(m.view_mut());
    }
    let mut g = Array3::zeros((b, n, d));
    for (mut gb, wb) in g.outer_iter_mut().zip(weights.outer_iter()) {
        gb.assign(&wb.dot(&task.pool.prompts));
    }
    Ok((
        g,
        GenerateCache {
            summary: summary.to_owned(),
            weights,
        },
    ))
}

/// Returns `d_summary` and accumulates pool/projection gradients.
pub fn generate_backward<F: Real>(
    cache: &GenerateCache<F>,
    task: &TmdgTask<F>,
    d_g: ArrayView3<'_, F>,
    grads: &mut TmdgTask<F>,
) -> Array2<F> {
    let (b, n, l) = cache.weights.dim();
    let mut d_logits = Array3::zeros((b, n, l));
    for i in 0..b {
        let w = cache.weights.index_axis(Axis(0), i);
        let dg = d_g.index_axis(Axis(0), i);
        grads.pool.prompts += &w.t().dot(&dg);
        let dw = dg.dot(&task.pool.prompts.t());
        d_logits
            .index_axis_mut(Axis(0), i)
            .assign(&softmax_rows_backward(w, dw.view()));
    }
    let d_logits = d_logits
        .into_shape_with_order((b, n * l))
        .expect("contiguous");
    grads.delta_s += &d_logits.t().dot(&cache.summary);
    d_logits.dot(&task.delta_s)
}

/// Prepends generated prompts to a token matrix: `[G; tokens]`.
pub fn inject<F: Real>(g: ArrayView2<'_, F>, tokens: ArrayView2<'_, F>) -> Result<Array2<F>> {
    if g.ncols() != tokens.ncols() && g.nrows() > 0 {
        return Err(Error::shape(
            "TMDG inject",
            &[g.nrows(), tokens.ncols()],
            g.shape(),
        ));
    }
    if g.nrows() == 0 {
        return Ok(tokens.to_owned());
    }
    Ok(concatenate(Axis(0), &[g, tokens]).expect("same width"))
}

/// Per-timestep mean over space: `[B, T, S, d]` → `[B, T, d]`, the token
/// sequence the generator summarizes.
pub fn step_tokens<F: Real>(body: ndarray::ArrayView4<'_, F>) -> Array3<F> {
    body.mean_axis(Axis(2)).expect("S ≥ 1")
}

/// Gradient of [`step_tokens`] spread back over space.
pub fn step_tokens_backward<F: Real>(d_tokens: &Array3<F>, space: usize) -> ndarray::Array4<F> {
    let (b, t, d) = d_tokens.dim();
    let scale = lit::<F>(1.0 / space as f64);
    let mut out = ndarray::Array4::zeros((b, t, space, d));
    for si in 0..space {
        out.slice_mut(s![.., .., si, ..])
            .assign(&(d_tokens * scale));
    }
    out
}

/// Frozen shared summarizer plus one trainable generator per registered task.
#[derive(Debug, Clone)]
pub struct TmdgBank<F> {
    pub config: TmdgConfig,
    pub summarizer: Summarizer<F>,
    tasks: BTreeMap<String, TmdgTask<F>>,
}

impl<F: Real> TmdgBank<F> {
    pub fn new(config: TmdgConfig, summarizer: Summarizer<F>) -> Self {
        if config.pool_size < config.prompt_len {
            log::warn!(
                "prompt pool of {} rows is smaller than the generated prompt length {}",
                config.pool_size,
                config.prompt_len
            );
        }
        Self {
            config,
            summarizer,
            tasks: BTreeMap::new(),
        }
    }

    pub fn register<R: Rng + ?Sized>(&mut self, rng: &mut R, task_id: &str) -> Result<()> {
        if self.tasks.contains_key(task_id) {
            return Err(Error::DuplicateTask(task_id.to_string()));
        }
        let dim = self.summarizer.attn.dim();
        self.tasks.insert(
            task_id.to_string(),
            TmdgTask::new(rng, task_id, &self.config, dim),
        );
        Ok(())
    }

    pub fn get(&self, task_id: &str) -> Result<&TmdgTask<F>> {
        self.tasks
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn get_mut(&mut self, task_id: &str) -> Result<&mut TmdgTask<F>> {
        self.tasks
            .get_mut(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &String> {
        self.tasks.keys()
    }

    /// The shared summarizer and every task, mutably, at once.
    pub fn split_mut(
        &mut self,
    ) -> (
        &mut Summarizer<F>,
        impl Iterator<Item = (&String, &mut TmdgTask<F>)>,
    ) {
        (&mut self.summarizer, self.tasks.iter_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task(rng: &mut ChaCha8Rng, d: usize, l: usize, n: usize) -> TmdgTask<f64> {
        TmdgTask::new(
            rng,
            "t",
            &TmdgConfig {
                pool_size: l,
                prompt_len: n,
                heads: 1,
            },
            d,
        )
    }

    #[test]
    fn identity_attention_summary_is_row_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = task(&mut rng, 4, 3, 2);
        let tokens: Array3<f64> = normal(&mut rng, (1, 2, 4), 1.0);
        let (s, _) = Summarizer::identity(4, 1)
            .summarize(tokens.view(), &t.pool)
            .unwrap();
        let all = concatenate(
            Axis(0),
            &[tokens.index_axis(Axis(0), 0), t.pool.prompts.view()],
        )
        .unwrap();
        let mean = all.mean_axis(Axis(0)).unwrap();
        for k in 0..4 {
            assert!((s[[0, k]] - mean[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn one_token_one_prompt_summary_is_average() {
        let pool = PromptPool {
            task_id: "t".into(),
            prompts: array![[1.0, 3.0]],
        };
        let tokens = array![[[5.0, -1.0]]];
        let (s, _) = Summarizer::identity(2, 1)
            .summarize(tokens.view(), &pool)
            .unwrap();
        assert_eq!(s, array![[3.0, 1.0]]);
    }

    #[test]
    fn zero_projection_gives_uniform_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = task(&mut rng, 4, 3, 2);
        t.delta_s.fill(0.0);
        let s: Array2<f64> = normal(&mut rng, (1, 4), 1.0);
        let (g, _) = generate(s.view(), &t).unwrap();
        let mean = t.pool.prompts.mean_axis(Axis(0)).unwrap();
        for row in g.index_axis(Axis(0), 0).rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_logits_select_one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = task(&mut rng, 2, 3, 1);
        t.delta_s = array![[0.0, 0.0], [1e6, 0.0], [0.0, 0.0]];
        let s = array![[1.0, 0.0]];
        let (g, _) = generate(s.view(), &t).unwrap();
        for k in 0..2 {
            assert!((g[[0, 0, k]] - t.pool.prompts[[1, k]]).abs() < 1e-6);
        }
    }

    #[test]
    fn inject_prepends_and_round_trips() {
        let g = Array2::from_elem((4, 3), 1.0);
        let tokens = Array2::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64);
        let out = inject(g.view(), tokens.view()).unwrap();
        assert_eq!(out.nrows(), 14);
        assert_eq!(out.slice(s![4.., ..]), tokens);
        let empty = Array2::<f64>::zeros((0, 3));
        assert_eq!(inject(empty.view(), tokens.view()).unwrap(), tokens);
    }

    #[test]
    fn duplicate_registration_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bank = TmdgBank::<f64>::new(TmdgConfig::default(), Summarizer::identity(4, 1));
        bank.register(&mut rng, "a").unwrap();
        assert!(matches!(
            bank.register(&mut rng, "a"),
            Err(Error::DuplicateTask(_))
        ));
        assert!(matches!(bank.get("b"), Err(Error::UnknownTask(_))));
    }
}
