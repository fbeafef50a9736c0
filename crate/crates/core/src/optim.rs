//! Adam with coupled L2 weight decay and a per-stage cosine schedule.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::tensor::{lit, Parameters, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * param` before the moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 2e-4,
        }
    }
}

/// First and second moments of one array.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F> {
    pub m: ArrayD<F>,
    pub v: ArrayD<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    /// Number of updates taken so far.
    pub step: u64,
    pub state: BTreeMap<String, Moments<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update of every array of `params` that is both in `trainable`
    /// and present in `grads` (matched by name). Everything else is left
    /// untouched, weight decay included.
    pub fn update<P, G>(&mut self, params: &mut P, grads: &G, trainable: &BTreeSet<String>, lr: f64)
    where
        P: Parameters<F> + ?Sized,
        G: Parameters<F> + ?Sized,
    {
        let mut named = BTreeMap::new();
        grads.visit("", &mut |name, g| {
            if trainable.contains(&name) {
                named.insert(name, g);
            }
        });
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (lit::<F>(c.beta1), lit::<F>(c.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let bc1 = lit::<F>(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = lit::<F>(1.0 - c.beta2.powi(self.step as i32));
        let (wd, eps, lr) = (lit::<F>(c.weight_decay), lit::<F>(c.eps), lit::<F>(lr));
        let state = &mut self.state;
        params.visit_mut("", &mut |name, mut p| {
            let Some(g) = named.get(&name) else { return };
            let mo = state.entry(name).or_insert_with(|| Moments {
                m: ArrayD::zeros(p.raw_dim()),
                v: ArrayD::zeros(p.raw_dim()),
            });
            Zip::from(&mut p)
                .and(g)
                .and(&mut mo.m)
                .and(&mut mo.v)
                .for_each(|p, &g, m, v| {
                    let g = g + wd * *p;
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                });
        });
    }
}

/// Learning rate of step `k` out of `total`: `lr0 · ½(1 + cos(πk/(total−1)))`,
/// reaching exactly zero on the last step. A single-step schedule uses `lr0`.
pub fn cosine_lr(lr0: f64, k: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let t = k.min(total - 1) as f64 / (total - 1) as f64;
    let lr = lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    lr.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{scalar_view, scalar_view_mut};
    use ndarray::{ArrayViewD, ArrayViewMutD};

    struct Pair {
        a: f64,
        b: f64,
    }

    impl Parameters<f64> for Pair {
        fn visit<'a>(&'a self, _: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
            f("a".into(), scalar_view(&self.a));
            f("b".into(), scalar_view(&self.b));
        }
        fn visit_mut<'a>(&'a mut self, _: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
            f("a".into(), scalar_view_mut(&mut self.a));
            f("b".into(), scalar_view_mut(&mut self.b));
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut p = Pair { a: 1.0, b: 1.0 };
        let g = Pair { a: 0.5, b: -3.0 };
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.update(&mut p, &g, &["a".to_string(), "b".to_string()].into(), 0.1);
        assert!((p.a - 0.9).abs() < 1e-6);
        assert!((p.b - 1.1).abs() < 1e-6);
    }

    #[test]
    fn untrainable_names_are_untouched() {
        let mut p = Pair { a: 1.0, b: 1.0 };
        let g = Pair { a: 0.5, b: 0.5 };
        let mut opt = Adam::new(AdamConfig::default());
        opt.update(&mut p, &g, &["a".to_string()].into(), 0.1);
        assert_eq!(p.b, 1.0);
        assert!(opt.state.contains_key("a") && !opt.state.contains_key("b"));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Pair { a: 3.0, b: -2.0 };
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let names: BTreeSet<String> = ["a".to_string(), "b".to_string()].into();
        for k in 0..2000 {
            let g = Pair { a: p.a, b: p.b };
            opt.update(&mut p, &g, &names, cosine_lr(0.05, k, 2000));
        }
        assert!(p.a.abs() < 1e-2 && p.b.abs() < 1e-2, "{} {}", p.a, p.b);
    }

    #[test]
    fn cosine_schedule_starts_at_lr0_and_ends_at_zero() {
        assert_eq!(cosine_lr(3e-4, 0, 100), 3e-4);
        assert!(cosine_lr(3e-4, 99, 100) < 1e-6 * 3e-4);
        let mut prev = f64::INFINITY;
        for k in 0..100 {
            let lr = cosine_lr(3e-4, k, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
