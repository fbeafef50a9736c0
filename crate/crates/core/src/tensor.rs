//! Numeric plumbing shared by the model components: the scalar trait, a few
//! activation functions with their derivatives, row-wise layer norm and the
//! parameter visitor used by the optimizer, checkpoints and fingerprints.

use std::iter::Sum;

use ndarray::{
    Array, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Dimension, IxDyn, NdFloat,
    ShapeBuilder,
};
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Floating-point element type of every model tensor (`f32` in the pipeline,
/// `f64` for gradient verification).
pub trait Real: NdFloat + FromPrimitive + Default + Sum + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn lit<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("representable literal")
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `tanh` through a single `exp`; noticeably cheaper than the libm routine
/// and accurate to a few ulps away from zero (absolute error near zero).
#[inline]
pub fn fast_tanh<F: Real>(x: F) -> F {
    let e = (x + x).exp();
    F::one() - lit::<F>(2.0) / (e + F::one())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let inner = lit::<F>(GELU_K) * (x + lit::<F>(GELU_C) * x * x * x);
    lit::<F>(0.5) * x * (F::one() + fast_tanh(inner))
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let k = lit::<F>(GELU_K);
    let c = lit::<F>(GELU_C);
    let t = fast_tanh(k * (x + c * x * x * x));
    let half = lit::<F>(0.5);
    half * (F::one() + t)
        + half * x * (F::one() - t * t) * k * (F::one() + lit::<F>(3.0) * c * x * x)
}

pub const LN_EPS: f64 = 1e-5;

/// Affine-free layer norm over the last axis of a row matrix. Returns the
/// normalized rows and the per-row reciprocal standard deviation.
pub fn layer_norm<F: Real>(x: ArrayView2<'_, F>) -> (Array2<F>, Array1<F>) {
    let d = lit::<F>(x.ncols() as f64);
    let eps = lit::<F>(LN_EPS);
    let mut y = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in y.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        let inv = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *r = inv;
    }
    (y, rstd)
}

/// Input gradient of [`layer_norm`] given its outputs and the output gradient.
pub fn layer_norm_backward<F: Real>(
    y: ArrayView2<'_, F>,
    rstd: &Array1<F>,
    dy: ArrayView2<'_, F>,
) -> Array2<F> {
    let d = lit::<F>(y.ncols() as f64);
    let mut dx = Array2::zeros(y.raw_dim());
    for (((yr, dyr), mut dxr), &r) in y
        .rows()
        .into_iter()
        .zip(dy.rows())
        .zip(dx.rows_mut())
        .zip(rstd.iter())
    {
        let mean_dy = dyr.sum() / d;
        let mean_dyy = yr.iter().zip(dyr.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
        for ((o, &yv), &g) in dxr.iter_mut().zip(yr.iter()).zip(dyr.iter()) {
            *o = r * (g - mean_dy - yv * mean_dyy);
        }
    }
    dx
}

/// In-place softmax over each row.
pub fn softmax_rows<F: Real>(mut m: ndarray::ArrayViewMut2<'_, F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Backward of a row softmax: `ds = p * (dp - sum(dp * p))`.
pub fn softmax_rows_backward<F: Real>(p: ArrayView2<'_, F>, dp: ArrayView2<'_, F>) -> Array2<F> {
    let mut ds = Array2::zeros(p.raw_dim());
    for ((pr, dpr), mut dsr) in p.rows().into_iter().zip(dp.rows()).zip(ds.rows_mut()) {
        let dot = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum::<F>();
        for ((o, &pv), &g) in dsr.iter_mut().zip(pr.iter()).zip(dpr.iter()) {
            *o = pv * (g - dot);
        }
    }
    ds
}

/// Gaussian-initialized array.
pub fn normal<F: Real, D: Dimension, Sh: ShapeBuilder<Dim = D>, R: Rng + ?Sized>(
    rng: &mut R,
    shape: Sh,
    std: f64,
) -> Array<F, D> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array::from_shape_simple_fn(shape, || lit::<F>(dist.sample(rng)))
}

/// Uniform(-bound, bound) initialized array.
pub fn uniform<F: Real, D: Dimension, Sh: ShapeBuilder<Dim = D>, R: Rng + ?Sized>(
    rng: &mut R,
    shape: Sh,
    bound: f64,
) -> Array<F, D> {
    Array::from_shape_simple_fn(shape, || lit::<F>(rng.random_range(-bound..=bound)))
}

/// Sum over the leading axis of a batched array, e.g. to reduce per-sample
/// gradients of a broadcast parameter.
pub fn sum_leading<F: Real>(a: ArrayViewD<'_, F>) -> ndarray::ArrayD<F> {
    a.sum_axis(Axis(0))
}

pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn scalar_view<F>(x: &F) -> ArrayViewD<'_, F> {
    ArrayViewD::from_shape(IxDyn(&[1]), std::slice::from_ref(x)).expect("one element")
}

pub fn scalar_view_mut<F>(x: &mut F) -> ArrayViewMutD<'_, F> {
    ArrayViewMutD::from_shape(IxDyn(&[1]), std::slice::from_mut(x)).expect("one element")
}

/// Named tensors that an optimizer may update and a checkpoint may store.
///
/// Names are dotted paths (`tma.l0.w_v`); visiting order is stable.
pub trait Parameters<F: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, F>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }

    /// Hex SHA-256 over names, shapes and float32 little-endian values.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, a| {
            h.update(name.as_bytes());
            for d in a.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in a.iter() {
                h.update(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Collects owned copies of every visited tensor, keyed by name.
pub fn snapshot<F: Real, P: Parameters<F> + ?Sized>(
    p: &P,
    prefix: &str,
) -> std::collections::BTreeMap<String, ndarray::ArrayD<F>> {
    let mut out = std::collections::BTreeMap::new();
    p.visit(prefix, &mut |name, a| {
        out.insert(name, a.to_owned());
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn fast_tanh_agrees_with_libm_and_saturates() {
        for i in -80..=80 {
            let x = i as f64 * 0.1;
            assert!((fast_tanh(x) - x.tanh()).abs() < 1e-14, "{x}");
        }
        assert_eq!(fast_tanh(200.0f32), 1.0);
        assert_eq!(fast_tanh(-200.0f32), -1.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(2.0f64) - 0.880_797_077_977_882_4).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_backward_matches_difference_quotient() {
        let x = array![[0.3f64, -1.2, 2.0, 0.5], [1.0, 1.5, -0.5, 0.0]];
        let w = array![[0.7f64, -0.1, 0.4, 1.1], [-0.3, 0.9, 0.2, -0.8]];
        let loss = |x: &Array2<f64>| (layer_norm(x.view()).0 * &w).sum();
        let (y, rstd) = layer_norm(x.view());
        let dx = layer_norm_backward(y.view(), &rstd, w.view());
        for i in 0..2 {
            for j in 0..4 {
                let mut p = x.clone();
                p[[i, j]] += 1e-6;
                let mut m = x.clone();
                m[[i, j]] -= 1e-6;
                let num = (loss(&p) - loss(&m)) / 2e-6;
                assert!((num - dx[[i, j]]).abs() < 1e-7);
            }
        }
    }
}
