//! Task-shared modality-aggregating adapter: bidirectional cross-modal
//! channel, spatial and temporal gates fused by learnable coefficients.
//!
//! Each modality is gated by statistics of the *other* one:
//!
//! * channel: `M_vc = σ(W_v δ_v ā)`, `M_ac = σ(W_a δ_a v̄)` where `ā`, `v̄`
//!   are global means over time and space;
//! * spatial: `M_vs = σ(Ψ_a ā)`, `M_as = σ(Ψ_v v̄)`;
//! * temporal: `M_vt = σ(Γ_a GRU_a(ā_t))`, `M_at = σ(Γ_v GRU_v(v̄_t))` on
//!   per-step spatial means;
//!
//! and the fused token is `(α M_c[c] + β M_s[s] + γ M_t[t]) · x[t, s, c]`.

use ndarray::{Array2, Array3, Array4, ArrayView4, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::{GruCache, GruCell};
use crate::tensor::{
    join_name, lit, normal, scalar_view, scalar_view_mut, sigmoid, Parameters, Real,
};

/// Dimensions of the two token bodies the adapter gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TmaDims {
    pub video_channels: usize,
    pub audio_channels: usize,
    pub video_positions: usize,
    pub audio_positions: usize,
    pub rnn_hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TmaParams<F> {
    /// `[C_v, C_v]`
    pub w_v: Array2<F>,
    /// `[C_v, C_a]`: audio statistics → video channels.
    pub delta_v: Array2<F>,
    pub w_a: Array2<F>,
    pub delta_a: Array2<F>,
    /// `[H·W, C_a]`
    pub psi_a: Array2<F>,
    /// `[L·F, C_v]`
    pub psi_v: Array2<F>,
    pub rnn_a: GruCell<F>,
    pub rnn_v: GruCell<F>,
    /// `[1, d_rnn]`
    pub gamma_a: Array2<F>,
    pub gamma_v: Array2<F>,
    pub alpha: F,
    pub beta: F,
    pub gamma: F,
}

/// Sigmoid gates, batched along the first axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps<F> {
    /// `[B, C_v]`
    pub m_vc: Array2<F>,
    pub m_ac: Array2<F>,
    /// `[B, H·W]`
    pub m_vs: Array2<F>,
    pub m_as: Array2<F>,
    /// `[B, T]`
    pub m_vt: Array2<F>,
    pub m_at: Array2<F>,
}

impl<F: Real> AttentionMaps<F> {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Array2<F>)> {
        [
            ("M_vc", &self.m_vc),
            ("M_ac", &self.m_ac),
            ("M_vs", &self.m_vs),
            ("M_as", &self.m_as),
            ("M_vt", &self.m_vt),
            ("M_at", &self.m_at),
        ]
        .into_iter()
    }

    /// All six maps lie strictly inside (0, 1).
    pub fn in_open_unit_interval(&self) -> bool {
        self.iter()
            .all(|(_, m)| m.iter().all(|&v| v > F::zero() && v < F::one()))
    }
}

impl<F: Real> TmaParams<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dims: TmaDims) -> Self {
        let (cv, ca) = (dims.video_channels, dims.audio_channels);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let third = lit::<F>(1.0 / 3.0);
        Self {
            w_v: normal(rng, (cv, cv), inv(cv)),
            delta_v: normal(rng, (cv, ca), inv(ca)),
            w_a: normal(rng, (ca, ca), inv(ca)),
            delta_a: normal(rng, (ca, cv), inv(cv)),
            psi_a: normal(rng, (dims.video_positions, ca), inv(ca)),
            psi_v: normal(rng, (dims.audio_positions, cv), inv(cv)),
            rnn_a: GruCell::new(rng, ca, dims.rnn_hidden),
            rnn_v: GruCell::new(rng, cv, dims.rnn_hidden),
            gamma_a: normal(rng, (1, dims.rnn_hidden), inv(dims.rnn_hidden)),
            gamma_v: normal(rng, (1, dims.rnn_hidden), inv(dims.rnn_hidden)),
            alpha: third,
            beta: third,
            gamma: third,
        }
    }

    pub fn zeros(dims: TmaDims) -> Self {
        let (cv, ca) = (dims.video_channels, dims.audio_channels);
        Self {
            w_v: Array2::zeros((cv, cv)),
            delta_v: Array2::zeros((cv, ca)),
            w_a: Array2::zeros((ca, ca)),
            delta_a: Array2::zeros((ca, cv)),
            psi_a: Array2::zeros((dims.video_positions, ca)),
            psi_v: Array2::zeros((dims.audio_positions, cv)),
            rnn_a: GruCell::zeros(ca, dims.rnn_hidden),
            rnn_v: GruCell::zeros(cv, dims.rnn_hidden),
            gamma_a: Array2::zeros((1, dims.rnn_hidden)),
            gamma_v: Array2::zeros((1, dims.rnn_hidden)),
            alpha: F::zero(),
            beta: F::zero(),
            gamma: F::zero(),
        }
    }

    pub fn dims(&self) -> TmaDims {
        TmaDims {
            video_channels: self.w_v.nrows(),
            audio_channels: self.w_a.nrows(),
            video_positions: self.psi_a.nrows(),
            audio_positions: self.psi_v.nrows(),
            rnn_hidden: self.rnn_a.hidden(),
        }
    }

    fn check(&self, video: &ArrayView4<'_, F>, audio: &ArrayView4<'_, F>) -> Result<()> {
        let d = self.dims();
        let (b, t, _, _) = video.dim();
        let want_v = [b, t, d.video_positions, d.video_channels];
        let want_a = [b, t, d.audio_positions, d.audio_channels];
        if video.shape() != want_v {
            return Err(Error::shape("TMA video block", &want_v, video.shape()));
        }
        if audio.shape() != want_a {
            return Err(Error::shape("TMA audio block", &want_a, audio.shape()));
        }
        Ok(())
    }

    /// Channel gates `(M_vc, M_ac)`.
    pub fn channel_attention(
        &self,
        video: ArrayView4<'_, F>,
        audio: ArrayView4<'_, F>,
    ) -> Result<(Array2<F>, Array2<F>)> {
        self.check(&video, &audio)?;
        let (a_bar, v_bar) = (global_mean(&audio), global_mean(&video));
        let m_vc = a_bar
            .dot(&self.delta_v.t())
            .dot(&self.w_v.t())
            .mapv(sigmoid);
        let m_ac = v_bar
            .dot(&self.delta_a.t())
            .dot(&self.w_a.t())
            .mapv(sigmoid);
        Ok((m_vc, m_ac))
    }

    /// Spatial gates `(M_vs, M_as)`.
    pub fn spatial_attention(
        &self,
        video: ArrayView4<'_, F>,
        audio: ArrayView4<'_, F>,
    ) -> Result<(Array2<F>, Array2<F>)> {
        self.check(&video, &audio)?;
        let (a_bar, v_bar) = (global_mean(&audio), global_mean(&video));
        Ok((
            a_bar.dot(&self.psi_a.t()).mapv(sigmoid),
            v_bar.dot(&self.psi_v.t()).mapv(sigmoid),
        ))
    }

    /// Temporal gates `(M_vt, M_at)`, each `[B, T]`.
    pub fn temporal_attention(
        &self,
        video: ArrayView4<'_, F>,
        audio: ArrayView4<'_, F>,
    ) -> Result<(Array2<F>, Array2<F>)> {
        self.check(&video, &audio)?;
        let (h_a, _) = self.rnn_a.forward(step_mean(&audio).view())?;
        let (h_v, _) = self.rnn_v.forward(step_mean(&video).view())?;
        Ok((
            project_steps(&h_a, &self.gamma_a).mapv(sigmoid),
            project_steps(&h_v, &self.gamma_v).mapv(sigmoid),
        ))
    }

    pub fn attention_maps(
        &self,
        video: ArrayView4<'_, F>,
        audio: ArrayView4<'_, F>,
    ) -> Result<AttentionMaps<F>> {
        let (m_vc, m_ac) = self.channel_attention(video, audio)?;
        let (m_vs, m_as) = self.spatial_attention(video, audio)?;
        let (m_vt, m_at) = self.temporal_attention(video, audio)?;
        Ok(AttentionMaps {
            m_vc,
            m_ac,
            m_vs,
            m_as,
            m_vt,
            m_at,
        })
    }

    /// Applies the fused gates to both bodies. With `residual` the gated
    /// tokens are added to the input instead of replacing it.
    pub fn fuse(
        &self,
        video: ArrayView4<'_, F>,
        audio: ArrayView4<'_, F>,
        maps: &AttentionMaps<F>,
        residual: bool,
    ) -> (Array4<F>, Array4<F>) {
        let coef = (self.alpha, self.beta, self.gamma);
        let gv = fused_gate(coef, &maps.m_vc, &maps.m_vs, &maps.m_vt);
        let ga = fused_gate(coef, &maps.m_ac, &maps.m_as, &maps.m_at);
        (
            apply_gate(&gv, video, residual),
            apply_gate(&ga, audio, residual),
        )
    }

    /// Full adapter forward with the cache needed by [`TmaParams::backward`].
    pub fn forward(
        &self,
        video: ArrayView4<'_, F>,
        audio: ArrayView4<'_, F>,
        residual: bool,
    ) -> Result<(Array4<F>, Array4<F>, TmaCache<F>)> {
        self.check(&video, &audio)?;
        let (a_bar, v_bar) = (global_mean(&audio), global_mean(&video));
        let u_v = a_bar.dot(&self.delta_v.t());
        let u_a = v_bar.dot(&self.delta_a.t());
        let m_vc = u_v.dot(&self.w_v.t()).mapv(sigmoid);
        let m_ac = u_a.dot(&self.w_a.t()).mapv(sigmoid);
        let m_vs = a_bar.dot(&self.psi_a.t()).mapv(sigmoid);
        let m_as = v_bar.dot(&self.psi_v.t()).mapv(sigmoid);
        let (h_a, rnn_a) = self.rnn_a.forward(step_mean(&audio).view())?;
        let (h_v, rnn_v) = self.rnn_v.forward(step_mean(&video).view())?;
        let m_vt = project_steps(&h_a, &self.gamma_a).mapv(sigmoid);
        let m_at = project_steps(&h_v, &self.gamma_v).mapv(sigmoid);
        let maps = AttentionMaps {
            m_vc,
            m_ac,
            m_vs,
            m_as,
            m_vt,
            m_at,
        };
        let (v_out, a_out) = self.fuse(video, audio, &maps, residual);
        Ok((
            v_out,
            a_out,
            TmaCache {
                video: video.to_owned(),
                audio: audio.to_owned(),
                a_bar,
                v_bar,
                u_v,
                u_a,
                h_a,
                h_v,
                rnn_a,
                rnn_v,
                maps,
                residual,
            },
        ))
    }

    /// Returns input gradients `(d_video, d_audio)` and accumulates
    /// parameter gradients into `grads`.
    pub fn backward(
        &self,
        cache: &TmaCache<F>,
        d_video: ArrayView4<'_, F>,
        d_audio: ArrayView4<'_, F>,
        grads: &mut Self,
    ) -> (Array4<F>, Array4<F>) {
        let maps = &cache.maps;
        let coef = (self.alpha, self.beta, self.gamma);
        let gv = fused_gate(coef, &maps.m_vc, &maps.m_vs, &maps.m_vt);
        let ga = fused_gate(coef, &maps.m_ac, &maps.m_as, &maps.m_at);

        // Gradient through the elementwise gating.
        let mut dv = &d_video * &gv;
        let mut da = &d_audio * &ga;
        if cache.residual {
            dv += &d_video;
            da += &d_audio;
        }
        let dgate_v = &d_video * &cache.video;
        let dgate_a = &d_audio * &cache.audio;

        let gate_grads = |dgate: &Array4<F>, mc: &Array2<F>, ms: &Array2<F>, mt: &Array2<F>| {
            // Per-family reductions of the gate gradient.
            let by_c = dgate.sum_axis(Axis(1)).sum_axis(Axis(1)); // [B, C]
            let by_s = dgate.sum_axis(Axis(1)).sum_axis(Axis(2)); // [B, S]
            let by_t = dgate.sum_axis(Axis(2)).sum_axis(Axis(2)); // [B, T]
            let d_alpha = (&by_c * mc).sum();
            let d_beta = (&by_s * ms).sum();
            let d_gamma = (&by_t * mt).sum();
            (by_c, by_s, by_t, d_alpha, d_beta, d_gamma)
        };
        let (vc, vs, vt, dal_v, dbe_v, dga_v) =
            gate_grads(&dgate_v, &maps.m_vc, &maps.m_vs, &maps.m_vt);
        let (ac, as_, at, dal_a, dbe_a, dga_a) =
            gate_grads(&dgate_a, &maps.m_ac, &maps.m_as, &maps.m_at);
        grads.alpha += dal_v + dal_a;
        grads.beta += dbe_v + dbe_a;
        grads.gamma += dga_v + dga_a;

        let sig_back = |g: Array2<F>, coef: F, m: &Array2<F>| {
            Zip::from(&g)
                .and(m)
                .map_collect(|&g, &m| g * coef * m * (F::one() - m))
        };
        let dz_vc = sig_back(vc, self.alpha, &maps.m_vc);
        let dz_ac = sig_back(ac, self.alpha, &maps.m_ac);
        let dz_vs = sig_back(vs, self.beta, &maps.m_vs);
        let dz_as = sig_back(as_, self.beta, &maps.m_as);
        let dz_vt = sig_back(vt, self.gamma, &maps.m_vt);
        let dz_at = sig_back(at, self.gamma, &maps.m_at);

        // Channel branch.
        grads.w_v += &dz_vc.t().dot(&cache.u_v);
        let du_v = dz_vc.dot(&self.w_v);
        grads.delta_v += &du_v.t().dot(&cache.a_bar);
        let mut d_abar = du_v.dot(&self.delta_v);
        grads.w_a += &dz_ac.t().dot(&cache.u_a);
        let du_a = dz_ac.dot(&self.w_a);
        grads.delta_a += &du_a.t().dot(&cache.v_bar);
        let mut d_vbar = du_a.dot(&self.delta_a);

        // Spatial branch.
        grads.psi_a += &dz_vs.t().dot(&cache.a_bar);
        d_abar += &dz_vs.dot(&self.psi_a);
        grads.psi_v += &dz_as.t().dot(&cache.v_bar);
        d_vbar += &dz_as.dot(&self.psi_v);

        // Temporal branch.
        let (d_atmp, dgam_a) = project_steps_backward(
            &cache.h_a,
            &self.gamma_a,
            &dz_vt,
            &self.rnn_a,
            &cache.rnn_a,
            &mut grads.rnn_a,
        );
        grads.gamma_a += &dgam_a;
        let (d_vtmp, dgam_v) = project_steps_backward(
            &cache.h_v,
            &self.gamma_v,
            &dz_at,
            &self.rnn_v,
            &cache.rnn_v,
            &mut grads.rnn_v,
        );
        grads.gamma_v += &dgam_v;

        spread_statistics(&mut da, &d_abar, &d_atmp);
        spread_statistics(&mut dv, &d_vbar, &d_vtmp);
        (dv, da)
    }
}

pub struct TmaCache<F> {
    video: Array4<F>,
    audio: Array4<F>,
    a_bar: Array2<F>,
    v_bar: Array2<F>,
    u_v: Array2<F>,
    u_a: Array2<F>,
    h_a: Array3<F>,
    h_v: Array3<F>,
    rnn_a: GruCache<F>,
    rnn_v: GruCache<F>,
    maps: AttentionMaps<F>,
    residual: bool,
}

impl<F: Real> TmaCache<F> {
    pub fn maps(&self) -> &AttentionMaps<F> {
        &self.maps
    }
}

/// Mean over time and space: `[B, T, S, C]` → `[B, C]`.
fn global_mean<F: Real>(x: &ArrayView4<'_, F>) -> Array2<F> {
    x.mean_axis(Axis(1))
        .expect("T ≥ 1")
        .mean_axis(Axis(1))
        .expect("S ≥ 1")
}

/// Mean over space per step: `[B, T, S, C]` → `[B, T, C]`.
fn step_mean<F: Real>(x: &ArrayView4<'_, F>) -> Array3<F> {
    x.mean_axis(Axis(2)).expect("S ≥ 1")
}

/// `[B, T, H] · Γᵀ` → `[B, T]`.
fn project_steps<F: Real>(h: &Array3<F>, gamma: &Array2<F>) -> Array2<F> {
    let g = gamma.row(0);
    let (b, t, _) = h.dim();
    Array2::from_shape_fn((b, t), |(i, j)| h.slice(ndarray::s![i, j, ..]).dot(&g))
}

fn project_steps_backward<F: Real>(
    h: &Array3<F>,
    gamma: &Array2<F>,
    dz: &Array2<F>,
    rnn: &GruCell<F>,
    rnn_cache: &GruCache<F>,
    rnn_grads: &mut GruCell<F>,
) -> (Array3<F>, Array2<F>) {
    let (b, t, hd) = h.dim();
    let mut dgamma = Array2::zeros((1, hd));
    let mut dh = Array3::zeros((b, t, hd));
    for i in 0..b {
        for j in 0..t {
            let g = dz[[i, j]];
            let hij = h.slice(ndarray::s![i, j, ..]);
            dgamma.row_mut(0).scaled_add(g, &hij);
            dh.slice_mut(ndarray::s![i, j, ..])
                .assign(&(&gamma.row(0) * g));
        }
    }
    (rnn.backward(rnn_cache, dh.view(), rnn_grads), dgamma)
}

/// Adds the gradients of the global mean `[B, C]` and per-step mean
/// `[B, T, C]` back onto the tokens `[B, T, S, C]`.
fn spread_statistics<F: Real>(dx: &mut Array4<F>, d_global: &Array2<F>, d_step: &Array3<F>) {
    let (_, t, s, _) = dx.dim();
    let g_scale = lit::<F>(1.0 / (t * s) as f64);
    let s_scale = lit::<F>(1.0 / s as f64);
    for (bi, mut per_b) in dx.outer_iter_mut().enumerate() {
        let g = d_global.row(bi);
        for (ti, mut per_t) in per_b.outer_iter_mut().enumerate() {
            let st = d_step.slice(ndarray::s![bi, ti, ..]);
            for mut tok in per_t.outer_iter_mut() {
                Zip::from(&mut tok)
                    .and(&g)
                    .and(&st)
                    .for_each(|o, &g, &st| *o = *o + g * g_scale + st * s_scale);
            }
        }
    }
}

/// `gate[b, t, s, c] = α·M_c[b, c] + β·M_s[b, s] + γ·M_t[b, t]`.
pub fn fused_gate<F: Real>(
    coef: (F, F, F),
    mc: &Array2<F>,
    ms: &Array2<F>,
    mt: &Array2<F>,
) -> Array4<F> {
    let (alpha, beta, gamma) = coef;
    let (b, c) = mc.dim();
    let (s, t) = (ms.ncols(), mt.ncols());
    let mut gate = Array4::zeros((b, t, s, c));
    for bi in 0..b {
        for ti in 0..t {
            let tv = gamma * mt[[bi, ti]];
            for si in 0..s {
                let sv = beta * ms[[bi, si]] + tv;
                let mut row = gate.slice_mut(ndarray::s![bi, ti, si, ..]);
                Zip::from(&mut row)
                    .and(&mc.row(bi))
                    .for_each(|o, &m| *o = alpha * m + sv);
            }
        }
    }
    gate
}

fn apply_gate<F: Real>(gate: &Array4<F>, x: ArrayView4<'_, F>, residual: bool) -> Array4<F> {
    let mut out = gate * &x;
    if residual {
        out += &x;
    }
    out
}

impl<F: Real> Parameters<F> for TmaParams<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'a, F>)) {
        let mats: [(&str, &'a Array2<F>); 8] = [
            ("w_v", &self.w_v),
            ("delta_v", &self.delta_v),
            ("w_a", &self.w_a),
            ("delta_a", &self.delta_a),
            ("psi_a", &self.psi_a),
            ("psi_v", &self.psi_v),
            ("gamma_a", &self.gamma_a),
            ("gamma_v", &self.gamma_v),
        ];
        for (n, m) in mats {
            f(join_name(prefix, n), m.view().into_dyn());
        }
        self.rnn_a.visit(&join_name(prefix, "rnn_a"), f);
        self.rnn_v.visit(&join_name(prefix, "rnn_v"), f);
        f(join_name(prefix, "alpha"), scalar_view(&self.alpha));
        f(join_name(prefix, "beta"), scalar_view(&self.beta));
        f(join_name(prefix, "gamma"), scalar_view(&self.gamma));
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'a, F>),
    ) {
        let mats: [(&str, &'a mut Array2<F>); 8] = [
            ("w_v", &mut self.w_v),
            ("delta_v", &mut self.delta_v),
            ("w_a", &mut self.w_a),
            ("delta_a", &mut self.delta_a),
            ("psi_a", &mut self.psi_a),
            ("psi_v", &mut self.psi_v),
            ("gamma_a", &mut self.gamma_a),
            ("gamma_v", &mut self.gamma_v),
        ];
        for (n, m) in mats {
            f(join_name(prefix, n), m.view_mut().into_dyn());
        }
        self.rnn_a.visit_mut(&join_name(prefix, "rnn_a"), f);
        self.rnn_v.visit_mut(&join_name(prefix, "rnn_v"), f);
        f(join_name(prefix, "alpha"), scalar_view_mut(&mut self.alpha));
        f(join_name(prefix, "beta"), scalar_view_mut(&mut self.beta));
        f(join_name(prefix, "gamma"), scalar_view_mut(&mut self.gamma));
    }
}

/// Convenience for callers holding a single clip: lifts `[T, S, C]` to a batch of one.
pub fn single<F: Real>(x: ndarray::ArrayView3<'_, F>) -> Array4<F> {
    x.to_owned().insert_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(c: usize, sv: usize, sa: usize) -> TmaDims {
        TmaDims {
            video_channels: c,
            audio_channels: c,
            video_positions: sv,
            audio_positions: sa,
            rnn_hidden: c,
        }
    }

    fn block(
        rng: &mut ChaCha8Rng,
        t: usize,
        sv: usize,
        sa: usize,
        c: usize,
    ) -> (Array4<f64>, Array4<f64>) {
        (
            normal(rng, (1, t, sv, c), 1.0),
            normal(rng, (1, t, sa, c), 1.0),
        )
    }

    #[test]
    fn zero_weights_give_half_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = TmaParams::<f64>::zeros(dims(3, 4, 2));
        let (v, a) = block(&mut rng, 5, 4, 2, 3);
        let maps = p.attention_maps(v.view(), a.view()).unwrap();
        for (_, m) in maps.iter() {
            assert!(m.iter().all(|&x| x == 0.5));
        }
        assert_eq!(maps.m_vc.dim(), (1, 3));
        assert_eq!(maps.m_vs.dim(), (1, 4));
        assert_eq!(maps.m_vt.dim(), (1, 5));
        assert_eq!(maps.m_at.dim(), (1, 5));
    }

    #[test]
    fn unit_channel_gate_matches_hand_value() {
        let mut p = TmaParams::<f64>::zeros(dims(1, 1, 1));
        p.w_v = array![[1.0]];
        p.delta_v = array![[1.0]];
        let v = Array4::from_elem((1, 1, 1, 1), 0.0);
        let a = Array4::from_elem((1, 1, 1, 1), 2.0);
        let (m_vc, _) = p.channel_attention(v.view(), a.view()).unwrap();
        assert!((m_vc[[0, 0]] - 0.880_797).abs() < 1e-6);
    }

    #[test]
    fn unit_spatial_gate_matches_hand_value() {
        let mut p = TmaParams::<f64>::zeros(dims(1, 1, 1));
        p.psi_a = array![[3.0]];
        let v = Array4::from_elem((1, 1, 1, 1), 0.0);
        let a = Array4::from_elem((1, 1, 1, 1), 1.0);
        let (m_vs, _) = p.spatial_attention(v.view(), a.view()).unwrap();
        assert!((m_vs[[0, 0]] - 0.952_574).abs() < 1e-6);
    }

    #[test]
    fn single_step_temporal_gate_matches_hand_recurrence() {
        let mut p = TmaParams::<f64>::zeros(dims(1, 1, 1));
        p.rnn_a.w_ih = array![[0.5], [-0.3], [0.8]];
        p.rnn_a.b_ih = array![0.1, 0.2, -0.1];
        p.rnn_a.b_hh = array![0.0, 0.0, 0.3];
        p.gamma_a = array![[2.0]];
        let v = Array4::from_elem((1, 1, 1, 1), 0.0);
        let a = Array4::from_elem((1, 1, 1, 1), 1.5);
        // h0 = 0: r = σ(0.5·1.5 + 0.1), z = σ(−0.3·1.5 + 0.2), n = tanh(0.8·1.5 − 0.1 + r·0.3), h = (1 − z)·n
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let r = sig(0.85);
        let z = sig(-0.25);
        let n = (1.1 + r * 0.3).tanh();
        let h = (1.0 - z) * n;
        let (m_vt, _) = p.temporal_attention(v.view(), a.view()).unwrap();
        assert!((m_vt[[0, 0]] - sig(2.0 * h)).abs() < 1e-12);
    }

    #[test]
    fn zero_coefficients_zero_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = TmaParams::<f64>::new(&mut rng, dims(2, 4, 4));
        p.alpha = 0.0;
        p.beta = 0.0;
        p.gamma = 0.0;
        let (v, a) = block(&mut rng, 3, 4, 4, 2);
        let (vo, ao, _) = p.forward(v.view(), a.view(), false).unwrap();
        assert!(vo.iter().chain(ao.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn channel_only_gate_halves_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = TmaParams::<f64>::zeros(dims(2, 4, 4));
        p.alpha = 1.0;
        let (v, a) = block(&mut rng, 3, 4, 4, 2);
        let (vo, _, _) = p.forward(v.view(), a.view(), false).unwrap();
        assert_eq!(vo, v.mapv(|x| x * 0.5));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = TmaParams::<f64>::zeros(dims(2, 4, 4));
        let v = Array::zeros((1, 3, 5, 2));
        let a = Array::zeros((1, 3, 4, 2));
        assert!(matches!(
            p.forward(v.view(), a.view(), false),
            Err(Error::Shape { .. })
        ));
    }
}
