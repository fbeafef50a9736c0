//! Multi-head scaled dot-product self-attention over groups of token
//! sequences, with an explicit backward pass.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    join_name, lit, normal, softmax_rows, softmax_rows_backward, Parameters, Real,
};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<F> {
    /// Fused query/key/value projection, applied as `x · w_qkv`.
    pub w_qkv: Array2<F>,
    /// Query and value biases. A key bias would shift every score of a row
    /// by the same amount and cancel in the softmax, so there is none.
    pub b_q: Array1<F>,
    pub b_v: Array1<F>,
    pub w_o: Array2<F>,
    pub b_o: Array1<F>,
    pub heads: usize,
}

pub struct AttentionCache<F> {
    x: Array2<F>,
    qkv: Array2<F>,
    /// Attention probabilities, one `[n, n]` matrix per (group, head).
    probs: Array3<F>,
    ctx: Array2<F>,
    groups: usize,
    len: usize,
}

impl<F: Real> AttentionCache<F> {
    pub fn probs(&self) -> &Array3<F> {
        &self.probs
    }
}

impl<F: Real> MultiHeadAttention<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("dim {dim} not divisible by {heads} heads"),
            ));
        }
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            w_qkv: normal(rng, (dim, 3 * dim), std),
            b_q: Array1::zeros(dim),
            b_v: Array1::zeros(dim),
            w_o: normal(rng, (dim, dim), std),
            b_o: Array1::zeros(dim),
            heads,
        })
    }

    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            w_qkv: Array2::zeros((dim, 3 * dim)),
            b_q: Array1::zeros(dim),
            b_v: Array1::zeros(dim),
            w_o: Array2::zeros((dim, dim)),
            b_o: Array1::zeros(dim),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_o.nrows()
    }

    /// Attends within each group of `x: [groups, len, dim]`.
    pub fn forward(&self, x: ArrayView3<'_, F>) -> Result<(Array3<F>, AttentionCache<F>)> {
        let (g, n, d) = x.dim();
        if d != self.dim() {
            return Err(Error::shape(
                "attention input",
                &[g, n, self.dim()],
                &[g, n, d],
            ));
        }
        let heads = self.heads;
        let dh = d / heads;
        let scale = lit::<F>(1.0 / (dh as f64).sqrt());
        let x2 = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((g * n, d))
            .expect("contiguous");
        let mut qkv = x2.dot(&self.w_qkv);
        qkv.slice_mut(s![.., ..d]).scaled_add(F::one(), &self.b_q);
        qkv.slice_mut(s![.., 2 * d..])
            .scaled_add(F::one(), &self.b_v);
        let mut probs = Array3::zeros((g * heads, n, n));
        let mut ctx = Array2::zeros((g * n, d));
        for gi in 0..g {
            let rows = gi * n..(gi + 1) * n;
            for h in 0..heads {
                let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = probs.index_axis_mut(Axis(0), gi * heads + h);
                p.assign(&(q.dot(&k.t()) * scale));
                softmax_rows(p.view_mut());
                ctx.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&p.dot(&v));
            }
        }
        let out = ctx.dot(&self.w_o) + &self.b_o;
        let out = out.into_shape_with_order((g, n, d)).expect("contiguous");
        Ok((
            out,
            AttentionCache {
                x: x2,
                qkv,
                probs,
                ctx,
                groups: g,
                len: n,
            },
        ))
    }

    /// Input gradient; accumulates parameter gradients into `grads` when given.
    pub fn backward(
        &self,
        cache: &AttentionCache<F>,
        dout: ArrayView3<'_, F>,
        grads: Option<&mut Self>,
    ) -> Array3<F> {
        let (g, n) = (cache.groups, cache.len);
        let d = self.dim();
        let heads = self.heads;
        let dh = d / heads;
        let scale = lit::<F>(1.0 / (dh as f64).sqrt());
        let dout2 = dout
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((g * n, d))
            .expect("contiguous");
        let dctx = dout2.dot(&self.w_o.t());
        let mut dqkv = Array2::zeros((g * n, 3 * d));
        for gi in 0..g {
            let rows = gi * n..(gi + 1) * n;
            for h in 0..heads {
                let q = cache.qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = cache
                    .qkv
                    .slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = cache
                    .qkv
                    .slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let p = cache.probs.index_axis(Axis(0), gi * heads + h);
                let dc = dctx.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let dp = dc.dot(&v.t());
                let dv = p.t().dot(&dc);
                let ds = softmax_rows_backward(p, dp.view()) * scale;
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&dq);
                dqkv.slice_mut(s![rows.clone(), d + h * dh..d + (h + 1) * dh])
                    .assign(&dk);
                dqkv.slice_mut(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh])
                    .assign(&dv);
            }
        }
        if let Some(gr) = grads {
            gr.w_o += &cache.ctx.t().dot(&dout2);
            gr.b_o += &dout2.sum_axis(Axis(0));
            gr.w_qkv += &cache.x.t().dot(&dqkv);
            gr.b_q += &dqkv.slice(s![.., ..d]).sum_axis(Axis(0));
            gr.b_v += &dqkv.slice(s![.., 2 * d..]).sum_axis(Axis(0));
        }
        dqkv.dot(&self.w_qkv.t())
            .into_shape_with_order((g, n, d))
            .expect("contiguous")
    }
}

impl<F: Real> Parameters<F> for MultiHeadAttention<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'a, F>)) {
        f(join_name(prefix, "w_qkv"), self.w_qkv.view().into_dyn());
        f(join_name(prefix, "b_q"), self.b_q.view().into_dyn());
        f(join_name(prefix, "b_v"), self.b_v.view().into_dyn());
        f(join_name(prefix, "w_o"), self.w_o.view().into_dyn());
        f(join_name(prefix, "b_o"), self.b_o.view().into_dyn());
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'a, F>),
    ) {
        f(join_name(prefix, "w_qkv"), self.w_qkv.view_mut().into_dyn());
        f(join_name(prefix, "b_q"), self.b_q.view_mut().into_dyn());
        f(join_name(prefix, "b_v"), self.b_v.view_mut().into_dyn());
        f(join_name(prefix, "w_o"), self.w_o.view_mut().into_dyn());
        f(join_name(prefix, "b_o"), self.b_o.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::<f64>::new(&mut rng, 8, 2).unwrap();
        let x: Array3<f64> = normal(&mut rng, (3, 5, 8), 1.0);
        let (_, cache) = mha.forward(x.view()).unwrap();
        for row in cache.probs().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::<f64>::new(&mut rng, 8, 2).unwrap();
        let x = Array3::<f64>::zeros((1, 2, 4));
        assert!(mha.forward(x.view()).is_err());
    }
}
