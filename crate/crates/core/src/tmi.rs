//! Task-specific, modality-independent deep prompts.
//!
//! Every task owns one `[m, D]` prompt per modality per layer of the band it
//! is placed in. The prompts are prepended (re-injected) before each of
//! those layers.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{join_name, normal, Parameters, Real};

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmiConfig {
    /// Deep prompt length `m`.
    pub prompt_len: usize,
}

impl Default for TmiConfig {
    fn default() -> Self {
        Self { prompt_len: 4 }
    }
}

/// Prompts of one task at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair<F> {
    pub video: Array2<F>,
    pub audio: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TmiTask<F> {
    /// Keyed by encoder layer index.
    pub layers: BTreeMap<usize, PromptPair<F>>,
}

impl<F: Real> TmiTask<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, layers: &[usize], m: usize, dim: usize) -> Self {
        let layers = layers
            .iter()
            .map(|&l| {
                let video = normal(rng, (m, dim), PROMPT_INIT_STD);
                let audio = normal(rng, (m, dim), PROMPT_INIT_STD);
                (l, PromptPair { video, audio })
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|(&l, p)| {
                    (
                        l,
                        PromptPair {
                            video: Array2::zeros(p.video.raw_dim()),
                            audio: Array2::zeros(p.audio.raw_dim()),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&PromptPair<F>> {
        self.layers.get(&layer)
    }
}

impl<F: Real> Parameters<F> for TmiTask<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        for (l, p) in &self.layers {
            let base = join_name(prefix, &format!("layer{l}"));
            f(join_name(&base, "video"), p.video.view().into_dyn());
            f(join_name(&base, "audio"), p.audio.view().into_dyn());
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, F>)) {
        for (l, p) in self.layers.iter_mut() {
            let base = join_name(prefix, &format!("layer{l}"));
            f(join_name(&base, "video"), p.video.view_mut().into_dyn());
            f(join_name(&base, "audio"), p.audio.view_mut().into_dyn());
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TaskBank<F> {
    pub config: TmiConfig,
    tasks: BTreeMap<String, TmiTask<F>>,
}

impl<F: Real> TaskBank<F> {
    pub fn new(config: TmiConfig) -> Self {
        Self {
            config,
            tasks: BTreeMap::new(),
        }
    }

    pub fn register<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        task_id: &str,
        layers: &[usize],
        dim: usize,
    ) -> Result<()> {
        if self.tasks.contains_key(task_id) {
            return Err(Error::DuplicateTask(task_id.to_string()));
        }
        let task = TmiTask::new(rng, layers, self.config.prompt_len, dim);
        self.tasks.insert(task_id.to_string(), task);
        Ok(())
    }

    pub fn select(&self, task_id: &str) -> Result<&TmiTask<F>> {
        self.tasks
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn select_mut(&mut self, task_id: &str) -> Result<&mut TmiTask<F>> {
        self.tasks
            .get_mut(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.tasks.contains_key(task_id)
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &String> {
        self.tasks.keys()
    }

    pub fn tasks_mut(&mut self) -> impl Iterator<Item = (&String, &mut TmiTask<F>)> {
        self.tasks.iter_mut()
    }
}

/// `[P; tokens]`.
pub fn concat_prompts<F: Real>(
    prompts: ArrayView2<'_, F>,
    tokens: ArrayView2<'_, F>,
) -> Result<Array2<F>> {
    if prompts.nrows() == 0 {
        return Ok(tokens.to_owned());
    }
    if prompts.ncols() != tokens.ncols() {
        return Err(Error::shape(
            "TMI prompts",
            &[prompts.nrows(), tokens.ncols()],
            prompts.shape(),
        ));
    }
    Ok(concatenate(Axis(0), &[prompts, tokens]).expect("same width"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn select_returns_registered_prompts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = TaskBank::<f32>::new(TmiConfig::default());
        bank.register(&mut rng, "t1", &[4, 5], 8).unwrap();
        let a = bank.select("t1").unwrap() as *const _;
        let b = bank.select("t1").unwrap() as *const _;
        assert_eq!(a, b);
        assert_eq!(bank.select("t1").unwrap().layers.len(), 2);
        assert!(matches!(bank.select("t2"), Err(Error::UnknownTask(_))));
        assert!(matches!(
            bank.register(&mut rng, "t1", &[4], 8),
            Err(Error::DuplicateTask(_))
        ));
    }

    #[test]
    fn concat_lengths() {
        let tokens = Array2::<f64>::ones((10, 3));
        assert_eq!(
            concat_prompts(Array2::zeros((0, 3)).view(), tokens.view()).unwrap(),
            tokens
        );
        assert_eq!(
            concat_prompts(Array2::zeros((2, 3)).view(), tokens.view())
                .unwrap()
                .nrows(),
            12
        );
        assert!(concat_prompts(Array2::zeros((2, 4)).view(), tokens.view()).is_err());
    }
}
