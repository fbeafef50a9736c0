//! The assembled model: frozen towers, the three adapter components placed
//! on depth bands, per-task heads and the shared temperatures.
//!
//! Parameter names (used by the optimizer, checkpoints and the gradient
//! ledger):
//!
//! | prefix | contents | trainable |
//! |---|---|---|
//! | `tma.layer{l}` | TMA adapter of layer `l` | every stage |
//! | `tmdg.summarizer` | shared self-attention | never |
//! | `tmdg.task.{id}` | pool and `delta_s` | stage of `id` |
//! | `tmi.task.{id}` | deep prompts | stage of `id` |
//! | `heads.{id}` | projection heads | stage of `id` |
//! | `temperature` | `log_tau_v`, `log_tau_a` | every stage |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::MultiHeadAttention;
use crate::encoder::{
    Band, EncoderConfig, FrozenEncoders, HookSet, LayerCache, LayerHook, PoolCache,
};
use crate::error::{Error, Result};
use crate::heads::{
    self, contrastive_loss, contrastive_loss_backward, HeadParams, Projected, Temperatures,
};
use crate::stream::{PromptSource, SegmentEdit, TokenStream};
use crate::tensor::{join_name, Parameters, Real};
use crate::tma::{TmaCache, TmaDims, TmaParams};
use crate::tmdg::{
    generate, generate_backward, step_tokens, step_tokens_backward, GenerateCache, SummarizeCache,
    Summarizer, TmdgBank, TmdgConfig, TmdgTask,
};
use crate::tmi::{PromptPair, TaskBank, TmiConfig, TmiTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "TMA")]
    Tma,
    #[serde(rename = "TMDG")]
    Tmdg,
    #[serde(rename = "TMI")]
    Tmi,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Tma, Component::Tmdg, Component::Tmi];

    pub fn name(self) -> &'static str {
        match self {
            Component::Tma => "TMA",
            Component::Tmdg => "TMDG",
            Component::Tmi => "TMI",
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TMA" => Ok(Component::Tma),
            "TMDG" => Ok(Component::Tmdg),
            "TMI" => Ok(Component::Tmi),
            other => Err(Error::invalid(
                "component",
                format!("unknown component `{other}`"),
            )),
        }
    }
}

/// Subset of enabled components. Parses `all`, `none` or a comma list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentSet(pub BTreeSet<Component>);

impl ComponentSet {
    pub fn all() -> Self {
        Self(Component::ALL.into_iter().collect())
    }

    pub fn none() -> Self {
        Self(BTreeSet::new())
    }

    pub fn contains(&self, c: Component) -> bool {
        self.0.contains(&c)
    }
}

impl Default for ComponentSet {
    fn default() -> Self {
        Self::all()
    }
}

impl FromStr for ComponentSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(Self::all()),
            "" | "none" => Ok(Self::none()),
            _ => s
                .split(',')
                .map(str::parse)
                .collect::<Result<_>>()
                .map(Self),
        }
    }
}

impl fmt::Display for ComponentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<_> = self.0.iter().map(|c| c.name()).collect();
        f.write_str(&names.join(","))
    }
}

/// Band of each component; written `S-M-D` (TMA, TMDG, TMI).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub tma: Band,
    pub tmdg: Band,
    pub tmi: Band,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            tma: Band::Shallow,
            tmdg: Band::Middle,
            tmi: Band::Deep,
        }
    }
}

impl PlacementConfig {
    pub fn band(&self, c: Component) -> Band {
        match c {
            Component::Tma => self.tma,
            Component::Tmdg => self.tmdg,
            Component::Tmi => self.tmi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bands: BTreeSet<_> = [self.tma, self.tmdg, self.tmi].into_iter().collect();
        if bands.len() != 3 {
            return Err(Error::invalid(
                "placement",
                format!("{self} must put one component in each band"),
            ));
        }
        Ok(())
    }

    /// All six bijective placements in the ablation row order.
    pub fn ablation_rows() -> [PlacementConfig; 6] {
        use Band::*;
        let p = |tma, tmdg, tmi| PlacementConfig { tma, tmdg, tmi };
        [
            p(Deep, Middle, Shallow),
            p(Middle, Deep, Shallow),
            p(Deep, Shallow, Middle),
            p(Middle, Shallow, Deep),
            p(Shallow, Deep, Middle),
            p(Shallow, Middle, Deep),
        ]
    }
}

impl fmt::Display for PlacementConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}-{}",
            self.tma.letter(),
            self.tmdg.letter(),
            self.tmi.letter()
        )
    }
}

impl FromStr for PlacementConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.trim().split('-').collect();
        let band = |p: &str| {
            let mut chars = p.chars();
            match (chars.next().and_then(Band::from_letter), chars.next()) {
                (Some(b), None) => Ok(b),
                _ => Err(Error::invalid(
                    "placement",
                    format!("`{s}` is not of the form S-M-D"),
                )),
            }
        };
        if parts.len() != 3 {
            return Err(Error::invalid(
                "placement",
                format!("`{s}` is not of the form S-M-D"),
            ));
        }
        let p = Self {
            tma: band(parts[0])?,
            tmdg: band(parts[1])?,
            tmi: band(parts[2])?,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub placement: PlacementConfig,
    pub components: ComponentSet,
    pub tmdg: TmdgConfig,
    pub tmi: TmiConfig,
    /// Body tokens per frame of each modality (grid size).
    pub video_positions: usize,
    pub audio_positions: usize,
    /// Projection width `D_p`; `0` means the model width.
    pub proj_dim: usize,
    /// Add the gated tokens to the input instead of replacing it.
    pub tma_residual: bool,
    /// Seed of every trainable initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            placement: PlacementConfig::default(),
            components: ComponentSet::all(),
            tmdg: TmdgConfig::default(),
            tmi: TmiConfig::default(),
            video_positions: 16,
            audio_positions: 16,
            proj_dim: 0,
            tma_residual: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.placement.validate()?;
        if self.video_positions == 0 || self.audio_positions == 0 {
            return Err(Error::invalid(
                "model config",
                "token grids must be non-empty",
            ));
        }
        if self.components.contains(Component::Tmdg)
            && (self.tmdg.prompt_len == 0 || self.tmdg.pool_size == 0)
        {
            return Err(Error::invalid(
                "TMDG config",
                "pool size and prompt length must be positive",
            ));
        }
        if self.encoder.model_dim % self.tmdg.heads != 0 {
            return Err(Error::invalid(
                "TMDG config",
                "model width must be divisible by the head count",
            ));
        }
        Ok(())
    }

    pub fn proj_dim(&self) -> usize {
        if self.proj_dim == 0 {
            self.encoder.model_dim
        } else {
            self.proj_dim
        }
    }

    /// Layers receiving `c`, or nothing when it is disabled.
    pub fn layers_of(&self, c: Component) -> Vec<usize> {
        if !self.components.contains(c) {
            return Vec::new();
        }
        self.encoder
            .band_map
            .layers(self.placement.band(c))
            .iter()
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub multi_label: bool,
    pub num_classes: usize,
}

/// Stream for task-specific initialization, stable under any task order.
fn task_rng(seed: u64, task_id: &str, part: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("{task_id}/{part}").as_bytes());
    let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn shared_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
pub struct PhpModel<F> {
    config: ModelConfig,
    encoders: FrozenEncoders<F>,
    pub tma: BTreeMap<usize, TmaParams<F>>,
    pub tmdg: TmdgBank<F>,
    pub tmi: TaskBank<F>,
    pub heads: BTreeMap<String, HeadParams<F>>,
    pub temps: Temperatures<F>,
    class_text: BTreeMap<String, Array2<F>>,
    tasks: BTreeMap<String, TaskInfo>,
}

impl<F: Real> PhpModel<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoders = FrozenEncoders::init(&config.encoder)?;
        Self::with_encoders(config, encoders)
    }

    /// Builds the trainable state around existing frozen towers.
    pub fn with_encoders(config: ModelConfig, encoders: FrozenEncoders<F>) -> Result<Self> {
        config.validate()?;
        if encoders.config() != &config.encoder {
            return Err(Error::invalid(
                "model",
                "encoder weights were built from a different config",
            ));
        }
        let d = config.encoder.model_dim;
        let dims = TmaDims {
            video_channels: d,
            audio_channels: d,
            video_positions: config.video_positions,
            audio_positions: config.audio_positions,
            rnn_hidden: d,
        };
        let mut rng = shared_rng(config.seed, 1);
        let tma = config
            .layers_of(Component::Tma)
            .into_iter()
            .map(|l| (l, TmaParams::new(&mut rng, dims)))
            .collect();
        let mut rng = shared_rng(config.seed, 2);
        let summarizer = Summarizer::new(&mut rng, d, config.tmdg.heads)?;
        Ok(Self {
            tmdg: TmdgBank::new(config.tmdg, summarizer),
            tmi: TaskBank::new(config.tmi),
            config,
            encoders,
            tma,
            heads: BTreeMap::new(),
            temps: Temperatures::new(),
            class_text: BTreeMap::new(),
            tasks: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoders(&self) -> &FrozenEncoders<F> {
        &self.encoders
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &String> {
        self.tasks.keys()
    }

    pub fn task_info(&self, task_id: &str) -> Result<&TaskInfo> {
        self.tasks
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn class_text(&self, task_id: &str) -> Result<&Array2<F>> {
        self.class_text
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    /// Adds a task's pool, deep prompts and heads. `class_text: [K, dim]`.
    pub fn register_task(
        &mut self,
        task_id: &str,
        class_text: Array2<F>,
        multi_label: bool,
    ) -> Result<()> {
        if self.tasks.contains_key(task_id) {
            return Err(Error::DuplicateTask(task_id.to_string()));
        }
        let d = self.config.encoder.model_dim;
        if class_text.nrows() < 2 {
            return Err(Error::invalid(
                format!("task {task_id}"),
                "needs at least two classes",
            ));
        }
        let seed = self.config.seed;
        if self.config.components.contains(Component::Tmdg) {
            self.tmdg
                .register(&mut task_rng(seed, task_id, "tmdg"), task_id)?;
        }
        let tmi_layers = self.config.layers_of(Component::Tmi);
        if !tmi_layers.is_empty() {
            self.tmi
                .register(&mut task_rng(seed, task_id, "tmi"), task_id, &tmi_layers, d)?;
        }
        let heads = HeadParams::new(
            &mut task_rng(seed, task_id, "heads"),
            d,
            class_text.ncols(),
            self.config.proj_dim(),
        );
        self.heads.insert(task_id.to_string(), heads);
        self.tasks.insert(
            task_id.to_string(),
            TaskInfo {
                multi_label,
                num_classes: class_text.nrows(),
            },
        );
        self.class_text.insert(task_id.to_string(), class_text);
        Ok(())
    }

    fn lowest_trainable_layer(&self) -> usize {
        Component::ALL
            .iter()
            .flat_map(|&c| self.config.layers_of(c))
            .min()
            .unwrap_or(self.config.encoder.num_layers)
    }

    /// Forward pass for `task_id` over raw batches `[B, T, positions, C]`.
    pub fn forward(
        &self,
        task_id: &str,
        video_raw: ArrayView4<'_, F>,
        audio_raw: ArrayView4<'_, F>,
    ) -> Result<(Array2<F>, Array2<F>, ForwardCache<F>)> {
        self.task_info(task_id)?;
        if video_raw.dim().0 != audio_raw.dim().0 || video_raw.dim().1 != audio_raw.dim().1 {
            return Err(Error::shape(
                "audio-visual batch",
                &[video_raw.dim().0, video_raw.dim().1],
                &[audio_raw.dim().0, audio_raw.dim().1],
            ));
        }
        let tma_layers: BTreeSet<usize> = self.tma.keys().copied().collect();
        let tmdg_layers: BTreeSet<usize> =
            self.config.layers_of(Component::Tmdg).into_iter().collect();
        let tmi_layers: BTreeSet<usize> =
            self.config.layers_of(Component::Tmi).into_iter().collect();
        let tmdg_task = if tmdg_layers.is_empty() {
            None
        } else {
            Some(self.tmdg.get(task_id)?)
        };
        let tmi_task = if tmi_layers.is_empty() {
            None
        } else {
            Some(self.tmi.select(task_id)?)
        };

        let mut video = TokenStream::from_body(self.encoders.video().embed(video_raw)?);
        let mut audio = TokenStream::from_body(self.encoders.audio().embed(audio_raw)?);
        let mut records = Vec::with_capacity(self.config.encoder.num_layers);
        let mut stream_lens = Vec::with_capacity(self.config.encoder.num_layers);
        for layer in 0..self.config.encoder.num_layers {
            let mut ops = Vec::new();
            if tma_layers.contains(&layer) {
                ops.push(apply_tma(
                    &self.tma[&layer],
                    self.config.tma_residual,
                    &mut video,
                    &mut audio,
                )?);
            }
            if let (true, Some(task)) = (tmdg_layers.contains(&layer), tmdg_task) {
                ops.push(apply_tmdg(
                    &self.tmdg.summarizer,
                    task,
                    &mut video,
                    &mut audio,
                )?);
            }
            if let (true, Some(task)) = (tmi_layers.contains(&layer), tmi_task) {
                let pair = task.layer(layer).ok_or_else(|| {
                    Error::invalid("TMI", format!("no prompts for layer {layer}"))
                })?;
                ops.push(apply_tmi(pair, &mut video, &mut audio)?);
            }
            stream_lens.push((video.tokens.dim().2, audio.tokens.dim().2));
            let (v_next, v_cache) =
                self.encoders.video().layers[layer].forward(video.tokens.view())?;
            let (a_next, a_cache) =
                self.encoders.audio().layers[layer].forward(audio.tokens.view())?;
            video.tokens = v_next;
            audio.tokens = a_next;
            records.push(LayerRecord {
                ops,
                video: v_cache,
                audio: a_cache,
            });
        }
        let (emb_v, pool_v) = self.encoders.video().pool(&video);
        let (emb_a, pool_a) = self.encoders.audio().pool(&audio);
        Ok((
            emb_v,
            emb_a,
            ForwardCache {
                task_id: task_id.to_string(),
                records,
                pool_v,
                pool_a,
                prefix_v: video.prefix_len(),
                prefix_a: audio.prefix_len(),
                stream_lens,
            },
        ))
    }

    /// Back-propagates embedding gradients into the component gradients.
    /// Frozen tower weights only pass gradients through.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        d_emb_v: &Array2<F>,
        d_emb_a: &Array2<F>,
        grads: &mut Grads<F>,
    ) {
        let stop = self.lowest_trainable_layer();
        if stop >= self.config.encoder.num_layers {
            return;
        }
        let mut dv = with_prefix(
            self.encoders.video().pool_backward(&cache.pool_v, d_emb_v),
            cache.prefix_v,
        );
        let mut da = with_prefix(
            self.encoders.audio().pool_backward(&cache.pool_a, d_emb_a),
            cache.prefix_a,
        );
        for layer in (stop..self.config.encoder.num_layers).rev() {
            let rec = &cache.records[layer];
            dv = self.encoders.video().layers[layer].backward(&rec.video, dv.view());
            da = self.encoders.audio().layers[layer].backward(&rec.audio, da.view());
            for op in rec.ops.iter().rev() {
                match op {
                    OpCache::Tma {
                        cache: c,
                        prefix_v,
                        prefix_a,
                    } => {
                        let params = &self.tma[&layer];
                        let g = grads
                            .tma
                            .entry(layer)
                            .or_insert_with(|| TmaParams::zeros(params.dims()));
                        let bv = dv.slice(s![.., .., *prefix_v.., ..]).to_owned();
                        let ba = da.slice(s![.., .., *prefix_a.., ..]).to_owned();
                        let (gv, ga) = params.backward(c, bv.view(), ba.view(), g);
                        dv.slice_mut(s![.., .., *prefix_v.., ..]).assign(&gv);
                        da.slice_mut(s![.., .., *prefix_a.., ..]).assign(&ga);
                    }
                    OpCache::Tmdg(c) => {
                        let task = self
                            .tmdg
                            .get(&cache.task_id)
                            .expect("registered at forward");
                        let g = grads.tmdg.get_or_insert_with(|| task.zeros_like());
                        dv = tmdg_backward(
                            &self.tmdg.summarizer,
                            task,
                            &c.video,
                            dv,
                            g,
                            grads.summarizer.as_mut(),
                        );
                        da = tmdg_backward(
                            &self.tmdg.summarizer,
                            task,
                            &c.audio,
                            da,
                            g,
                            grads.summarizer.as_mut(),
                        );
                    }
                    OpCache::Tmi { edit_v, edit_a } => {
                        let task = self
                            .tmi
                            .select(&cache.task_id)
                            .expect("registered at forward");
                        let g = grads.tmi.get_or_insert_with(|| task.zeros_like());
                        let pair = g.layers.get_mut(&layer).expect("same layers");
                        let (nv, pv) = edit_v.backward(dv.view());
                        let (na, pa) = edit_a.backward(da.view());
                        pair.video += &pv.sum_axis(Axis(0));
                        pair.audio += &pa.sum_axis(Axis(0));
                        dv = nv;
                        da = na;
                    }
                }
            }
        }
    }

    /// Total contrastive loss `L_v + L_a` of a batch and every gradient it
    /// induces. `text: [B, dim]` are the per-clip text targets.
    pub fn loss_and_grads(
        &self,
        task_id: &str,
        video_raw: ArrayView4<'_, F>,
        audio_raw: ArrayView4<'_, F>,
        text: ArrayView2<'_, F>,
        summarizer_grads: bool,
    ) -> Result<(F, Grads<F>)> {
        let (emb_v, emb_a, cache) = self.forward(task_id, video_raw, audio_raw)?;
        let head = &self.heads[task_id];
        let (p, pcache) = head.project(emb_v.view(), emb_a.view(), text)?;
        let (ltv, lta) = (self.temps.log_tau_v[0], self.temps.log_tau_a[0]);
        let (lv, cv) = contrastive_loss(p.fv.view(), p.tv.view(), ltv)?;
        let (la, ca) = contrastive_loss(p.fa.view(), p.ta.view(), lta)?;
        let (dfv, dtv, dltv) =
            contrastive_loss_backward(&cv, p.fv.view(), p.tv.view(), ltv, F::one());
        let (dfa, dta, dlta) =
            contrastive_loss_backward(&ca, p.fa.view(), p.ta.view(), lta, F::one());
        let mut grads = Grads::new(task_id, head.zeros_like());
        if summarizer_grads && self.config.components.contains(Component::Tmdg) {
            grads.summarizer = Some(MultiHeadAttention::zeros(
                self.config.encoder.model_dim,
                self.config.tmdg.heads,
            ));
        }
        grads.temps.log_tau_v[0] = dltv;
        grads.temps.log_tau_a[0] = dlta;
        let d = Projected {
            fv: dfv,
            fa: dfa,
            tv: dtv,
            ta: dta,
        };
        let (d_emb_v, d_emb_a) = head.project_backward(&p, &pcache, &d, &mut grads.heads);
        self.backward(&cache, &d_emb_v, &d_emb_a, &mut grads);
        Ok((lv + la, grads))
    }

    /// Loss only (no gradients); used by finite-difference checks.
    pub fn loss(
        &self,
        task_id: &str,
        video_raw: ArrayView4<'_, F>,
        audio_raw: ArrayView4<'_, F>,
        text: ArrayView2<'_, F>,
    ) -> Result<F> {
        let (emb_v, emb_a, _) = self.forward(task_id, video_raw, audio_raw)?;
        let (p, _) = self.heads[task_id].project(emb_v.view(), emb_a.view(), text)?;
        let lv = contrastive_loss(p.fv.view(), p.tv.view(), self.temps.log_tau_v[0])?.0;
        let la = contrastive_loss(p.fa.view(), p.ta.view(), self.temps.log_tau_a[0])?.0;
        Ok(lv + la)
    }

    /// Fused class scores `[B, K]`.
    pub fn class_logits(
        &self,
        task_id: &str,
        video_raw: ArrayView4<'_, F>,
        audio_raw: ArrayView4<'_, F>,
    ) -> Result<Array2<F>> {
        let (emb_v, emb_a, _) = self.forward(task_id, video_raw, audio_raw)?;
        let head = &self.heads[task_id];
        let fv = heads::l2_normalize(head.mlp_v.forward(emb_v.view())?.0).0;
        let fa = heads::l2_normalize(head.mlp_a.forward(emb_a.view())?.0).0;
        let (tv, ta) = head.class_targets(self.class_text(task_id)?.view())?;
        Ok(heads::class_logits(
            fv.view(),
            fa.view(),
            tv.view(),
            ta.view(),
        ))
    }

    /// Hooks reproducing this model's adapters for `task_id` on the generic
    /// encoder forward.
    pub fn hook_set(&self, task_id: &str) -> Result<HookSet<F>> {
        self.task_info(task_id)?;
        let mut hooks = HookSet::new();
        for (&l, p) in &self.tma {
            hooks.add(
                l,
                Box::new(TmaHook {
                    params: p.clone(),
                    residual: self.config.tma_residual,
                }),
            );
        }
        for l in self.config.layers_of(Component::Tmdg) {
            hooks.add(
                l,
                Box::new(TmdgHook {
                    summarizer: self.tmdg.summarizer.clone(),
                    task: self.tmdg.get(task_id)?.clone(),
                }),
            );
        }
        for l in self.config.layers_of(Component::Tmi) {
            let pair = self
                .tmi
                .select(task_id)?
                .layer(l)
                .cloned()
                .expect("prompts per band layer");
            hooks.add(l, Box::new(TmiHook { pair }));
        }
        Ok(hooks)
    }

    /// Names of the arrays a stage on `task_id` may update: every TMA
    /// layer, the task's own pool, projection, prompts and heads, and the
    /// temperatures.
    pub fn declared_trainable(&self, task_id: &str) -> BTreeSet<String> {
        let own = [
            format!("tmdg.task.{task_id}."),
            format!("tmi.task.{task_id}."),
            format!("heads.{task_id}."),
        ];
        let mut out = BTreeSet::new();
        self.visit("", &mut |name, _| {
            if name.starts_with("tma.")
                || name.starts_with("temperature.")
                || own.iter().any(|p| name.starts_with(p.as_str()))
            {
                out.insert(name);
            }
        });
        out
    }
}

impl<F: Real> Parameters<F> for PhpModel<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        for (l, p) in &self.tma {
            p.visit(&join_name(prefix, &format!("tma.layer{l}")), f);
        }
        self.tmdg
            .summarizer
            .attn
            .visit(&join_name(prefix, "tmdg.summarizer"), f);
        for id in self.tmdg.task_ids() {
            self.tmdg
                .get(id)
                .expect("listed")
                .visit(&join_name(prefix, &format!("tmdg.task.{id}")), f);
        }
        for id in self.tmi.task_ids() {
            self.tmi
                .select(id)
                .expect("listed")
                .visit(&join_name(prefix, &format!("tmi.task.{id}")), f);
        }
        for (id, h) in &self.heads {
            h.visit(&join_name(prefix, &format!("heads.{id}")), f);
        }
        self.temps.visit(&join_name(prefix, "temperature"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, F>)) {
        for (l, p) in self.tma.iter_mut() {
            p.visit_mut(&join_name(prefix, &format!("tma.layer{l}")), f);
        }
        let (summarizer, tasks) = self.tmdg.split_mut();
        summarizer
            .attn
            .visit_mut(&join_name(prefix, "tmdg.summarizer"), f);
        for (id, t) in tasks {
            t.visit_mut(&join_name(prefix, &format!("tmdg.task.{id}")), f);
        }
        for (id, t) in self.tmi.tasks_mut() {
            t.visit_mut(&join_name(prefix, &format!("tmi.task.{id}")), f);
        }
        for (id, h) in self.heads.iter_mut() {
            h.visit_mut(&join_name(prefix, &format!("heads.{id}")), f);
        }
        self.temps.visit_mut(&join_name(prefix, "temperature"), f);
    }
}

/// Gradients of one batch, laid out with the model's parameter names.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub task_id: String,
    pub tma: BTreeMap<usize, TmaParams<F>>,
    pub tmdg: Option<TmdgTask<F>>,
    pub summarizer: Option<MultiHeadAttention<F>>,
    pub tmi: Option<TmiTask<F>>,
    pub heads: HeadParams<F>,
    pub temps: Temperatures<F>,
}

impl<F: Real> Grads<F> {
    fn new(task_id: &str, heads: HeadParams<F>) -> Self {
        Self {
            task_id: task_id.to_string(),
            tma: BTreeMap::new(),
            tmdg: None,
            summarizer: None,
            tmi: None,
            heads,
            temps: Temperatures::zeros(),
        }
    }

    /// Named gradient arrays.
    pub fn named(&self) -> BTreeMap<String, ndarray::ArrayD<F>> {
        crate::tensor::snapshot(self, "")
    }

    /// Names whose gradient has at least one non-zero entry.
    pub fn nonzero_names(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.visit("", &mut |name, a| {
            if a.iter().any(|v| *v != F::zero()) {
                out.insert(name);
            }
        });
        out
    }
}

impl<F: Real> Parameters<F> for Grads<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        for (l, p) in &self.tma {
            p.visit(&join_name(prefix, &format!("tma.layer{l}")), f);
        }
        if let Some(s) = &self.summarizer {
            s.visit(&join_name(prefix, "tmdg.summarizer"), f);
        }
        if let Some(t) = &self.tmdg {
            t.visit(
                &join_name(prefix, &format!("tmdg.task.{}", self.task_id)),
                f,
            );
        }
        if let Some(t) = &self.tmi {
            t.visit(&join_name(prefix, &format!("tmi.task.{}", self.task_id)), f);
        }
        self.heads
            .visit(&join_name(prefix, &format!("heads.{}", self.task_id)), f);
        self.temps.visit(&join_name(prefix, "temperature"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, F>)) {
        for (l, p) in self.tma.iter_mut() {
            p.visit_mut(&join_name(prefix, &format!("tma.layer{l}")), f);
        }
        if let Some(s) = &mut self.summarizer {
            s.visit_mut(&join_name(prefix, "tmdg.summarizer"), f);
        }
        if let Some(t) = &mut self.tmdg {
            t.visit_mut(
                &join_name(prefix, &format!("tmdg.task.{}", self.task_id)),
                f,
            );
        }
        if let Some(t) = &mut self.tmi {
            t.visit_mut(&join_name(prefix, &format!("tmi.task.{}", self.task_id)), f);
        }
        self.heads
            .visit_mut(&join_name(prefix, &format!("heads.{}", self.task_id)), f);
        self.temps.visit_mut(&join_name(prefix, "temperature"), f);
    }
}

pub struct ForwardCache<F> {
    task_id: String,
    records: Vec<LayerRecord<F>>,
    pool_v: PoolCache<F>,
    pool_a: PoolCache<F>,
    prefix_v: usize,
    prefix_a: usize,
    stream_lens: Vec<(usize, usize)>,
}

impl<F> ForwardCache<F> {
    /// Tokens per frame `(video, audio)` entering each encoder layer,
    /// prompts included.
    pub fn stream_lens(&self) -> &[(usize, usize)] {
        &self.stream_lens
    }

    /// Prompt tokens per frame `(video, audio)` after the last layer.
    pub fn prefix_lens(&self) -> (usize, usize) {
        (self.prefix_v, self.prefix_a)
    }
}

struct LayerRecord<F> {
    ops: Vec<OpCache<F>>,
    video: LayerCache<F>,
    audio: LayerCache<F>,
}

enum OpCache<F> {
    Tma {
        cache: TmaCache<F>,
        prefix_v: usize,
        prefix_a: usize,
    },
    Tmdg(TmdgCache<F>),
    Tmi {
        edit_v: SegmentEdit,
        edit_a: SegmentEdit,
    },
}

struct TmdgSide<F> {
    edit: SegmentEdit,
    summarize: SummarizeCache<F>,
    generate: GenerateCache<F>,
    /// Prefix length of the stream before the edit.
    prefix: usize,
    space: usize,
}

struct TmdgCache<F> {
    video: TmdgSide<F>,
    audio: TmdgSide<F>,
}

fn with_prefix<F: Real>(d_body: Array4<F>, prefix: usize) -> Array4<F> {
    if prefix == 0 {
        return d_body;
    }
    let (b, t, n, d) = d_body.dim();
    let mut out = Array4::zeros((b, t, prefix + n, d));
    out.slice_mut(s![.., .., prefix.., ..]).assign(&d_body);
    out
}

fn apply_tma<F: Real>(
    params: &TmaParams<F>,
    residual: bool,
    video: &mut TokenStream<F>,
    audio: &mut TokenStream<F>,
) -> Result<OpCache<F>> {
    let (v, a, cache) = params.forward(video.body(), audio.body(), residual)?;
    video.set_body(v.view())?;
    audio.set_body(a.view())?;
    Ok(OpCache::Tma {
        cache,
        prefix_v: video.prefix_len(),
        prefix_a: audio.prefix_len(),
    })
}

fn tmdg_side<F: Real>(
    summarizer: &Summarizer<F>,
    task: &TmdgTask<F>,
    stream: &mut TokenStream<F>,
) -> Result<TmdgSide<F>> {
    let body = stream.body();
    let space = body.dim().2;
    let tokens = step_tokens(body);
    let (summary, summarize) = summarizer.summarize(tokens.view(), &task.pool)?;
    let (g, generate) = generate(summary.view(), task)?;
    let prefix = stream.prefix_len();
    let (next, edit) = stream.put_segment(PromptSource::Generated, g.view())?;
    *stream = next;
    Ok(TmdgSide {
        edit,
        summarize,
        generate,
        prefix,
        space,
    })
}

fn apply_tmdg<F: Real>(
    summarizer: &Summarizer<F>,
    task: &TmdgTask<F>,
    video: &mut TokenStream<F>,
    audio: &mut TokenStream<F>,
) -> Result<OpCache<F>> {
    Ok(OpCache::Tmdg(TmdgCache {
        video: tmdg_side(summarizer, task, video)?,
        audio: tmdg_side(summarizer, task, audio)?,
    }))
}

fn tmdg_backward<F: Real>(
    summarizer: &Summarizer<F>,
    task: &TmdgTask<F>,
    side: &TmdgSide<F>,
    d_after: Array4<F>,
    grads: &mut TmdgTask<F>,
    attn_grads: Option<&mut MultiHeadAttention<F>>,
) -> Array4<F> {
    let (mut d_before, d_g) = side.edit.backward(d_after.view());
    let d_summary = generate_backward(&side.generate, task, d_g.view(), grads);
    let (d_tokens, d_pool) =
        summarizer.summarize_backward(&side.summarize, d_summary.view(), attn_grads);
    grads.pool.prompts += &d_pool;
    let d_body = step_tokens_backward(&d_tokens, side.space);
    let mut body = d_before.slice_mut(s![.., .., side.prefix.., ..]);
    body += &d_body;
    d_before
}

fn broadcast_batch<F: Real>(p: &Array2<F>, batch: usize) -> Array3<F> {
    p.broadcast((batch, p.nrows(), p.ncols()))
        .expect("broadcast prompts")
        .to_owned()
}

fn apply_tmi<F: Real>(
    pair: &PromptPair<F>,
    video: &mut TokenStream<F>,
    audio: &mut TokenStream<F>,
) -> Result<OpCache<F>> {
    let b = video.tokens.dim().0;
    let (v, edit_v) =
        video.put_segment(PromptSource::Deep, broadcast_batch(&pair.video, b).view())?;
    let (a, edit_a) =
        audio.put_segment(PromptSource::Deep, broadcast_batch(&pair.audio, b).view())?;
    *video = v;
    *audio = a;
    Ok(OpCache::Tmi { edit_v, edit_a })
}

/// TMA gating as an encoder hook.
pub struct TmaHook<F> {
    pub params: TmaParams<F>,
    pub residual: bool,
}

impl<F: Real> LayerHook<F> for TmaHook<F> {
    fn name(&self) -> &str {
        "tma"
    }

    fn apply(
        &self,
        _: usize,
        video: &mut TokenStream<F>,
        audio: &mut TokenStream<F>,
    ) -> Result<()> {
        apply_tma(&self.params, self.residual, video, audio).map(|_| ())
    }
}

/// TMDG prompt generation and injection as an encoder hook.
pub struct TmdgHook<F> {
    pub summarizer: Summarizer<F>,
    pub task: TmdgTask<F>,
}

impl<F: Real> LayerHook<F> for TmdgHook<F> {
    fn name(&self) -> &str {
        "tmdg"
    }

    fn apply(
        &self,
        _: usize,
        video: &mut TokenStream<F>,
        audio: &mut TokenStream<F>,
    ) -> Result<()> {
        apply_tmdg(&self.summarizer, &self.task, video, audio).map(|_| ())
    }
}

/// TMI deep-prompt injection as an encoder hook.
pub struct TmiHook<F> {
    pub pair: PromptPair<F>,
}

impl<F: Real> LayerHook<F> for TmiHook<F> {
    fn name(&self) -> &str {
        "tmi"
    }

    fn apply(
        &self,
        _: usize,
        video: &mut TokenStream<F>,
        audio: &mut TokenStream<F>,
    ) -> Result<()> {
        apply_tmi(&self.pair, video, audio).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_round_trips_and_validates() {
        for p in PlacementConfig::ablation_rows() {
            assert_eq!(p.to_string().parse::<PlacementConfig>().unwrap(), p);
        }
        assert_eq!(PlacementConfig::default().to_string(), "S-M-D");
        assert!("S-S-D".parse::<PlacementConfig>().is_err());
        assert!("S-M".parse::<PlacementConfig>().is_err());
    }

    #[test]
    fn component_sets_parse() {
        assert_eq!("all".parse::<ComponentSet>().unwrap(), ComponentSet::all());
        assert_eq!(
            "none".parse::<ComponentSet>().unwrap(),
            ComponentSet::none()
        );
        let s: ComponentSet = "tma,TMI".parse().unwrap();
        assert_eq!(s.to_string(), "TMA,TMI");
        assert!("TMX".parse::<ComponentSet>().is_err());
    }
}
