//! Projection heads, the symmetric contrastive objective and the
//! similarity-based classifier.

use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{join_name, lit, softmax_rows, uniform, Parameters, Real};

/// Norm floor used by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;
/// `ln 0.07`, the initial stored log-temperature.
pub const LOG_TAU_INIT: f64 = -2.659_260_036_932_778;

static DEGENERATE_WARNED: AtomicBool = AtomicBool::new(false);

/// `D → D_p → D_p` perceptron with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2<F> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

pub struct MlpCache<F> {
    x: Array2<F>,
    pre: Array2<F>,
}

impl<F: Real> Mlp2<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> Self {
        let a1 = 1.0 / (input as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: uniform(rng, (input, hidden), a1),
            b1: uniform(rng, hidden, a1),
            w2: uniform(rng, (hidden, hidden), a2),
            b2: uniform(rng, hidden, a2),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> Result<(Array2<F>, MlpCache<F>)> {
        if x.ncols() != self.w1.nrows() {
            return Err(Error::shape(
                "head input",
                &[x.nrows(), self.w1.nrows()],
                x.shape(),
            ));
        }
        let pre = x.dot(&self.w1) + &self.b1;
        let h = pre.mapv(|v| v.max(F::zero()));
        let y = h.dot(&self.w2) + &self.b2;
        Ok((
            y,
            MlpCache {
                x: x.to_owned(),
                pre,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &MlpCache<F>,
        dy: ArrayView2<'_, F>,
        grads: &mut Self,
    ) -> Array2<F> {
        let h = cache.pre.mapv(|v| v.max(F::zero()));
        grads.w2 += &h.t().dot(&dy);
        grads.b2 += &dy.sum_axis(Axis(0));
        let mut dpre = dy.dot(&self.w2.t());
        Zip::from(&mut dpre).and(&cache.pre).for_each(|d, &p| {
            if p <= F::zero() {
                *d = F::zero();
            }
        });
        grads.w1 += &cache.x.t().dot(&dpre);
        grads.b1 += &dpre.sum_axis(Axis(0));
        dpre.dot(&self.w1.t())
    }
}

impl<F: Real> Parameters<F> for Mlp2<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        f(join_name(prefix, "w1"), self.w1.view().into_dyn());
        f(join_name(prefix, "b1"), self.b1.view().into_dyn());
        f(join_name(prefix, "w2"), self.w2.view().into_dyn());
        f(join_name(prefix, "b2"), self.b2.view().into_dyn());
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, F>)) {
        f(join_name(prefix, "w1"), self.w1.view_mut().into_dyn());
        f(join_name(prefix, "b1"), self.b1.view_mut().into_dyn());
        f(join_name(prefix, "w2"), self.w2.view_mut().into_dyn());
        f(join_name(prefix, "b2"), self.b2.view_mut().into_dyn());
    }
}

/// Per-task projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<F> {
    pub mlp_v: Mlp2<F>,
    pub mlp_a: Mlp2<F>,
    pub mlp_tv: Mlp2<F>,
    pub mlp_ta: Mlp2<F>,
}

impl<F: Real> HeadParams<F> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        embed_dim: usize,
        text_dim: usize,
        proj_dim: usize,
    ) -> Self {
        Self {
            mlp_v: Mlp2::new(rng, embed_dim, proj_dim),
            mlp_a: Mlp2::new(rng, embed_dim, proj_dim),
            mlp_tv: Mlp2::new(rng, text_dim, proj_dim),
            mlp_ta: Mlp2::new(rng, text_dim, proj_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mlp_v: self.mlp_v.zeros_like(),
            mlp_a: self.mlp_a.zeros_like(),
            mlp_tv: self.mlp_tv.zeros_like(),
            mlp_ta: self.mlp_ta.zeros_like(),
        }
    }

    /// Projects and L2-normalizes `(F_v, F_a, T_v, T_a)`.
    pub fn project(
        &self,
        video: ArrayView2<'_, F>,
        audio: ArrayView2<'_, F>,
        text: ArrayView2<'_, F>,
    ) -> Result<(Projected<F>, ProjectCache<F>)> {
        let (fv, cv) = self.mlp_v.forward(video)?;
        let (fa, ca) = self.mlp_a.forward(audio)?;
        let (tv, ctv) = self.mlp_tv.forward(text)?;
        let (ta, cta) = self.mlp_ta.forward(text)?;
        let (fv, nv) = l2_normalize(fv);
        let (fa, na) = l2_normalize(fa);
        let (tv, ntv) = l2_normalize(tv);
        let (ta, nta) = l2_normalize(ta);
        let out = Projected { fv, fa, tv, ta };
        let cache = ProjectCache {
            mlp: [cv, ca, ctv, cta],
            norms: [nv, na, ntv, nta],
        };
        Ok((out, cache))
    }

    /// Returns gradients w.r.t. the video and audio embeddings; head
    /// gradients are accumulated into `grads`.
    pub fn project_backward(
        &self,
        out: &Projected<F>,
        cache: &ProjectCache<F>,
        d: &Projected<F>,
        grads: &mut Self,
    ) -> (Array2<F>, Array2<F>) {
        let [cv, ca, ctv, cta] = &cache.mlp;
        let [nv, na, ntv, nta] = &cache.norms;
        let dv = self.mlp_v.backward(
            cv,
            l2_normalize_backward(&out.fv, nv, &d.fv).view(),
            &mut grads.mlp_v,
        );
        let da = self.mlp_a.backward(
            ca,
            l2_normalize_backward(&out.fa, na, &d.fa).view(),
            &mut grads.mlp_a,
        );
        self.mlp_tv.backward(
            ctv,
            l2_normalize_backward(&out.tv, ntv, &d.tv).view(),
            &mut grads.mlp_tv,
        );
        self.mlp_ta.backward(
            cta,
            l2_normalize_backward(&out.ta, nta, &d.ta).view(),
            &mut grads.mlp_ta,
        );
        (dv, da)
    }

    /// Projected class embeddings `(T_v, T_a)`, each `[K, D_p]`.
    pub fn class_targets(&self, class_text: ArrayView2<'_, F>) -> Result<(Array2<F>, Array2<F>)> {
        let tv = l2_normalize(self.mlp_tv.forward(class_text)?.0).0;
        let ta = l2_normalize(self.mlp_ta.forward(class_text)?.0).0;
        Ok((tv, ta))
    }
}

impl<F: Real> Parameters<F> for HeadParams<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        self.mlp_v.visit(&join_name(prefix, "mlp_v"), f);
        self.mlp_a.visit(&join_name(prefix, "mlp_a"), f);
        self.mlp_tv.visit(&join_name(prefix, "mlp_tv"), f);
        self.mlp_ta.visit(&join_name(prefix, "mlp_ta"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, F>)) {
        self.mlp_v.visit_mut(&join_name(prefix, "mlp_v"), f);
        self.mlp_a.visit_mut(&join_name(prefix, "mlp_a"), f);
        self.mlp_tv.visit_mut(&join_name(prefix, "mlp_tv"), f);
        self.mlp_ta.visit_mut(&join_name(prefix, "mlp_ta"), f);
    }
}

/// Normalized projections, `[N, D_p]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected<F> {
    pub fv: Array2<F>,
    pub fa: Array2<F>,
    pub tv: Array2<F>,
    pub ta: Array2<F>,
}

pub struct ProjectCache<F> {
    mlp: [MlpCache<F>; 4],
    norms: [Array1<F>; 4],
}

/// Shared log-temperatures; `τ = exp(log_tau)` is positive by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Temperatures<F> {
    pub log_tau_v: Array1<F>,
    pub log_tau_a: Array1<F>,
}

impl<F: Real> Temperatures<F> {
    pub fn new() -> Self {
        Self {
            log_tau_v: Array1::from_elem(1, lit(LOG_TAU_INIT)),
            log_tau_a: Array1::from_elem(1, lit(LOG_TAU_INIT)),
        }
    }

    pub fn zeros() -> Self {
        Self {
            log_tau_v: Array1::zeros(1),
            log_tau_a: Array1::zeros(1),
        }
    }

    pub fn tau_v(&self) -> F {
        self.log_tau_v[0].exp()
    }

    pub fn tau_a(&self) -> F {
        self.log_tau_a[0].exp()
    }
}

impl<F: Real> Default for Temperatures<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Parameters<F> for Temperatures<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        f(
            join_name(prefix, "log_tau_v"),
            self.log_tau_v.view().into_dyn(),
        );
        f(
            join_name(prefix, "log_tau_a"),
            self.log_tau_a.view().into_dyn(),
        );
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, F>)) {
        f(
            join_name(prefix, "log_tau_v"),
            self.log_tau_v.view_mut().into_dyn(),
        );
        f(
            join_name(prefix, "log_tau_a"),
            self.log_tau_a.view_mut().into_dyn(),
        );
    }
}

/// Row-wise L2 normalization with a norm floor of [`NORM_EPS`]. Returns the
/// floored norms for the backward pass. A degenerate (near-zero) row logs a
/// warning once per process.
pub fn l2_normalize<F: Real>(mut x: Array2<F>) -> (Array2<F>, Array1<F>) {
    let eps = lit::<F>(NORM_EPS);
    let mut norms = Array1::zeros(x.nrows());
    for (mut row, n) in x.rows_mut().into_iter().zip(norms.iter_mut()) {
        let raw = row.dot(&row).sqrt();
        if raw < eps && !DEGENERATE_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("projection with near-zero norm; normalizing with an epsilon floor");
        }
        *n = raw.max(eps);
        row.mapv_inplace(|v| v / *n);
    }
    (x, norms)
}

pub fn l2_normalize_backward<F: Real>(
    y: &Array2<F>,
    norms: &Array1<F>,
    dy: &Array2<F>,
) -> Array2<F> {
    let eps = lit::<F>(NORM_EPS);
    let mut dx = dy.clone();
    for ((mut row, yr), &n) in dx.rows_mut().into_iter().zip(y.rows()).zip(norms.iter()) {
        if n > eps {
            let proj = yr.dot(&row);
            Zip::from(&mut row)
                .and(&yr)
                .for_each(|d, &yv| *d = (*d - yv * proj) / n);
        } else {
            row.mapv_inplace(|v| v / n);
        }
    }
    dx
}

pub struct ContrastiveCache<F> {
    logits: Array2<F>,
    row_soft: Array2<F>,
    col_soft: Array2<F>,
}

/// Symmetric InfoNCE over a batch of paired rows with similarities scaled
/// by `1/τ`, `τ = exp(log_tau)`:
/// `L = -(1/2N) Σ_i [log softmax_row(Z)_ii + log softmax_col(Z)_ii]`.
pub fn contrastive_loss<F: Real>(
    f: ArrayView2<'_, F>,
    t: ArrayView2<'_, F>,
    log_tau: F,
) -> Result<(F, ContrastiveCache<F>)> {
    let n = f.nrows();
    if n == 0 {
        return Err(Error::invalid("contrastive batch", "empty batch"));
    }
    if t.dim() != f.dim() {
        return Err(Error::shape("contrastive targets", f.shape(), t.shape()));
    }
    let scale = (-log_tau).exp();
    let logits = f.dot(&t.t()) * scale;
    let mut row_soft = logits.clone();
    softmax_rows(row_soft.view_mut());
    let mut col_soft = logits.t().to_owned();
    softmax_rows(col_soft.view_mut());
    let col_soft = col_soft.reversed_axes().as_standard_layout().to_owned();
    let mut total = F::zero();
    for i in 0..n {
        total += row_soft[[i, i]].ln() + col_soft[[i, i]].ln();
    }
    let loss = -total / lit::<F>(2.0 * n as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    Ok((
        loss,
        ContrastiveCache {
            logits,
            row_soft,
            col_soft,
        },
    ))
}

/// Returns `(dF, dT, d log_tau)` scaled by `d_loss`.
pub fn contrastive_loss_backward<F: Real>(
    cache: &ContrastiveCache<F>,
    f: ArrayView2<'_, F>,
    t: ArrayView2<'_, F>,
    log_tau: F,
    d_loss: F,
) -> (Array2<F>, Array2<F>, F) {
    let n = f.nrows();
    let coef = d_loss / lit::<F>(2.0 * n as f64);
    let mut dz = &cache.row_soft + &cache.col_soft;
    for i in 0..n {
        dz[[i, i]] -= lit::<F>(2.0);
    }
    dz.mapv_inplace(|v| v * coef);
    let d_log_tau = -(&dz * &cache.logits).sum();
    let scale = (-log_tau).exp();
    let df = dz.dot(&t) * scale;
    let dt = dz.t().dot(&f) * scale;
    (df, dt, d_log_tau)
}

/// Fused class scores `½(F_v T_vᵀ + F_a T_aᵀ)`, `[N, K]`.
pub fn class_logits<F: Real>(
    fv: ArrayView2<'_, F>,
    fa: ArrayView2<'_, F>,
    tv: ArrayView2<'_, F>,
    ta: ArrayView2<'_, F>,
) -> Array2<F> {
    (fv.dot(&tv.t()) + fa.dot(&ta.t())) * lit::<F>(0.5)
}

/// Arg-max with ties resolved to the lowest class id.
pub fn argmax<F: Real>(row: ndarray::ArrayView1<'_, F>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Single-label prediction per row.
pub fn predict<F: Real>(
    fv: ArrayView2<'_, F>,
    fa: ArrayView2<'_, F>,
    tv: ArrayView2<'_, F>,
    ta: ArrayView2<'_, F>,
) -> Vec<usize> {
    class_logits(fv, fa, tv, ta)
        .rows()
        .into_iter()
        .map(argmax)
        .collect()
}

/// Multi-hot prediction per row: classes whose fused score is positive.
pub fn predict_multi<F: Real>(
    fv: ArrayView2<'_, F>,
    fa: ArrayView2<'_, F>,
    tv: ArrayView2<'_, F>,
    ta: ArrayView2<'_, F>,
) -> Vec<Vec<bool>> {
    class_logits(fv, fa, tv, ta)
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v > F::zero()).collect())
        .collect()
}
