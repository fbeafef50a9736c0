//! Single-layer gated recurrent unit over `[batch, time, input]` sequences.
//!
//! Gate order inside the stacked weights is reset, update, candidate:
//! `r = σ(W_ir x + b_ir + W_hr h + b_hr)`, `z = σ(W_iz x + b_iz + W_hz h + b_hz)`,
//! `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = (1 − z) ⊙ n + z ⊙ h`.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{join_name, sigmoid, uniform, Parameters, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct GruCell<F> {
    /// `[3·hidden, input]`
    pub w_ih: Array2<F>,
    /// `[3·hidden, hidden]`
    pub w_hh: Array2<F>,
    pub b_ih: Array1<F>,
    pub b_hh: Array1<F>,
}

pub struct GruCache<F> {
    x: Array3<F>,
    /// Hidden state entering each step, `[time, batch, hidden]`.
    h_prev: Array3<F>,
    r: Array3<F>,
    z: Array3<F>,
    n: Array3<F>,
    /// `W_hn h + b_hn` per step.
    hn: Array3<F>,
}

impl<F: Real> GruCell<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: uniform(rng, (3 * hidden, input), bound),
            w_hh: uniform(rng, (3 * hidden, hidden), bound),
            b_ih: uniform(rng, 3 * hidden, bound),
            b_hh: uniform(rng, 3 * hidden, bound),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Array2::zeros((3 * hidden, input)),
            w_hh: Array2::zeros((3 * hidden, hidden)),
            b_ih: Array1::zeros(3 * hidden),
            b_hh: Array1::zeros(3 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    /// Hidden states for every step, `[batch, time, hidden]`, from `h₀ = 0`.
    pub fn forward(&self, x: ArrayView3<'_, F>) -> Result<(Array3<F>, GruCache<F>)> {
        let (b, t, i) = x.dim();
        if i != self.w_ih.ncols() {
            return Err(Error::shape(
                "recurrent cell input",
                &[b, t, self.w_ih.ncols()],
                &[b, t, i],
            ));
        }
        let hd = self.hidden();
        let mut h = Array2::zeros((b, hd));
        let mut out = Array3::zeros((b, t, hd));
        let mut cache = GruCache {
            x: x.to_owned(),
            h_prev: Array3::zeros((t, b, hd)),
            r: Array3::zeros((t, b, hd)),
            z: Array3::zeros((t, b, hd)),
            n: Array3::zeros((t, b, hd)),
            hn: Array3::zeros((t, b, hd)),
        };
        for step in 0..t {
            let xt = x.index_axis(Axis(1), step);
            let gi = xt.dot(&self.w_ih.t()) + &self.b_ih;
            let gh = h.dot(&self.w_hh.t()) + &self.b_hh;
            let r = (&gi.slice(s![.., ..hd]) + &gh.slice(s![.., ..hd])).mapv(sigmoid);
            let z = (&gi.slice(s![.., hd..2 * hd]) + &gh.slice(s![.., hd..2 * hd])).mapv(sigmoid);
            let hn = gh.slice(s![.., 2 * hd..]).to_owned();
            let n = (&gi.slice(s![.., 2 * hd..]) + &(&r * &hn)).mapv(|v| v.tanh());
            let h_new = &n + &(&z * &(&h - &n));
            cache.h_prev.index_axis_mut(Axis(0), step).assign(&h);
            cache.r.index_axis_mut(Axis(0), step).assign(&r);
            cache.z.index_axis_mut(Axis(0), step).assign(&z);
            cache.n.index_axis_mut(Axis(0), step).assign(&n);
            cache.hn.index_axis_mut(Axis(0), step).assign(&hn);
            out.index_axis_mut(Axis(1), step).assign(&h_new);
            h = h_new;
        }
        Ok((out, cache))
    }

    /// Backpropagation through time. `d_out: [batch, time, hidden]`.
    pub fn backward(
        &self,
        cache: &GruCache<F>,
        d_out: ArrayView3<'_, F>,
        grads: &mut Self,
    ) -> Array3<F> {
        let (b, t, _) = cache.x.dim();
        let hd = self.hidden();
        let one = F::one();
        let mut dx = Array3::zeros(cache.x.raw_dim());
        let mut dh_next: Array2<F> = Array2::zeros((b, hd));
        for step in (0..t).rev() {
            let dh = &d_out.index_axis(Axis(1), step) + &dh_next;
            let h = cache.h_prev.index_axis(Axis(0), step);
            let r = cache.r.index_axis(Axis(0), step);
            let z = cache.z.index_axis(Axis(0), step);
            let n = cache.n.index_axis(Axis(0), step);
            let hn = cache.hn.index_axis(Axis(0), step);

            let dn_pre = ndarray::Zip::from(&dh)
                .and(&z)
                .and(&n)
                .map_collect(|&g, &z, &n| g * (one - z) * (one - n * n));
            let dz_pre = ndarray::Zip::from(&dh)
                .and(&h)
                .and(&n)
                .and(&z)
                .map_collect(|&g, &h, &n, &z| g * (h - n) * z * (one - z));
            let dr_pre = ndarray::Zip::from(&dn_pre)
                .and(&hn)
                .and(&r)
                .map_collect(|&g, &hn, &r| g * hn * r * (one - r));

            let mut gi = Array2::zeros((b, 3 * hd));
            gi.slice_mut(s![.., ..hd]).assign(&dr_pre);
            gi.slice_mut(s![.., hd..2 * hd]).assign(&dz_pre);
            gi.slice_mut(s![.., 2 * hd..]).assign(&dn_pre);
            let mut gh = gi.clone();
            gh.slice_mut(s![.., 2 * hd..]).assign(&(&dn_pre * &r));

            let xt = cache.x.index_axis(Axis(1), step);
            grads.w_ih += &gi.t().dot(&xt);
            grads.b_ih += &gi.sum_axis(Axis(0));
            grads.w_hh += &gh.t().dot(&h);
            grads.b_hh += &gh.sum_axis(Axis(0));
            dx.index_axis_mut(Axis(1), step).assign(&gi.dot(&self.w_ih));
            dh_next = gh.dot(&self.w_hh) + &(&dh * &z);
        }
        dx
    }
}

impl<F: Real> Parameters<F> for GruCell<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'a, F>)) {
        f(join_name(prefix, "w_ih"), self.w_ih.view().into_dyn());
        f(join_name(prefix, "w_hh"), self.w_hh.view().into_dyn());
        f(join_name(prefix, "b_ih"), self.b_ih.view().into_dyn());
        f(join_name(prefix, "b_hh"), self.b_hh.view().into_dyn());
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'a, F>),
    ) {
        f(join_name(prefix, "w_ih"), self.w_ih.view_mut().into_dyn());
        f(join_name(prefix, "w_hh"), self.w_hh.view_mut().into_dyn());
        f(join_name(prefix, "b_ih"), self.b_ih.view_mut().into_dyn());
        f(join_name(prefix, "b_hh"), self.b_hh.view_mut().into_dyn());
    }
}
