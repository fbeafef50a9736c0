//! Toy frozen transformer encoders standing in for the pretrained video and
//! audio towers. Weights are seeded, never updated, and fingerprinted.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionCache, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::stream::TokenStream;
use crate::tensor::{
    gelu, gelu_grad, join_name, layer_norm, layer_norm_backward, lit, normal, Parameters, Real,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    #[serde(rename = "S")]
    Shallow,
    #[serde(rename = "M")]
    Middle,
    #[serde(rename = "D")]
    Deep,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Shallow, Band::Middle, Band::Deep];

    pub fn letter(self) -> char {
        match self {
            Band::Shallow => 'S',
            Band::Middle => 'M',
            Band::Deep => 'D',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'S' => Some(Band::Shallow),
            'M' => Some(Band::Middle),
            'D' => Some(Band::Deep),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandMap {
    pub shallow: BTreeSet<usize>,
    pub middle: BTreeSet<usize>,
    pub deep: BTreeSet<usize>,
}

impl BandMap {
    /// Three equal bands over `num_layers` (remainder goes to the deep band).
    pub fn even(num_layers: usize) -> Self {
        let w = num_layers / 3;
        Self {
            shallow: (0..w).collect(),
            middle: (w..2 * w).collect(),
            deep: (2 * w..num_layers).collect(),
        }
    }

    pub fn layers(&self, band: Band) -> &BTreeSet<usize> {
        match band {
            Band::Shallow => &self.shallow,
            Band::Middle => &self.middle,
            Band::Deep => &self.deep,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        for band in Band::ALL {
            let layers = self.layers(band);
            if layers.is_empty() {
                return Err(Error::invalid(
                    "band_map",
                    format!("band {} is empty", band.letter()),
                ));
            }
            if let Some(&l) = layers.iter().find(|&&l| l >= num_layers) {
                return Err(Error::invalid(
                    "band_map",
                    format!("layer {l} outside [0, {num_layers})"),
                ));
            }
        }
        let ordered = |a: &BTreeSet<usize>, b: &BTreeSet<usize>| a.last() < b.first();
        if !ordered(&self.shallow, &self.middle) || !ordered(&self.middle, &self.deep) {
            return Err(Error::invalid(
                "band_map",
                "bands must be disjoint and ordered shallow < middle < deep",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Hidden width of each feed-forward block, as a multiple of `model_dim`.
    pub mlp_ratio: usize,
    /// Channels of the raw token tensors fed to the input projection.
    pub input_channels: usize,
    pub band_map: BandMap,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            model_dim: 32,
            heads: 2,
            mlp_ratio: 2,
            input_channels: 8,
            band_map: BandMap::even(6),
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.model_dim == 0
            || self.mlp_ratio == 0
            || self.input_channels == 0
        {
            return Err(Error::invalid(
                "encoder config",
                "dimensions must be positive",
            ));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::invalid(
                "encoder config",
                format!(
                    "model_dim {} not divisible by {} heads",
                    self.model_dim, self.heads
                ),
            ));
        }
        self.band_map.validate(self.num_layers)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Debug, Clone)]
pub struct FrozenLayer<F> {
    pub attn: MultiHeadAttention<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

pub struct LayerCache<F> {
    ln1: Array2<F>,
    rstd1: Array1<F>,
    attn: AttentionCache<F>,
    ln2: Array2<F>,
    rstd2: Array1<F>,
    pre_act: Array2<F>,
    shape: (usize, usize, usize, usize),
}

impl<F: Real> FrozenLayer<F> {
    fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(rng, dim, heads)?,
            w1: normal(rng, (dim, hidden), 1.0 / (dim as f64).sqrt()),
            b1: normal(rng, hidden, 0.02),
            w2: normal(rng, (hidden, dim), 1.0 / (hidden as f64).sqrt()),
            b2: Array1::zeros(dim),
        })
    }

    /// Runs the block over every frame of `x: [batch, time, tokens, dim]`.
    pub fn forward(&self, x: ArrayView4<'_, F>) -> Result<(Array4<F>, LayerCache<F>)> {
        let shape = x.dim();
        let (b, t, n, d) = shape;
        let rows = b * t * n;
        let x2 = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, d))
            .expect("contiguous");
        let (ln1, rstd1) = layer_norm(x2.view());
        let ln1_3 = ln1
            .view()
            .into_shape_with_order((b * t, n, d))
            .expect("contiguous");
        let (attn_out, attn) = self.attn.forward(ln1_3)?;
        let x1 = x2
            + attn_out
                .into_shape_with_order((rows, d))
                .expect("contiguous");
        let (ln2, rstd2) = layer_norm(x1.view());
        let pre_act = ln2.dot(&self.w1) + &self.b1;
        let act = pre_act.mapv(gelu);
        let out = x1 + act.dot(&self.w2) + &self.b2;
        Ok((
            out.into_shape_with_order(shape).expect("contiguous"),
            LayerCache {
                ln1,
                rstd1,
                attn,
                ln2,
                rstd2,
                pre_act,
                shape,
            },
        ))
    }

    /// Input gradient only; the block's weights are frozen.
    pub fn backward(&self, cache: &LayerCache<F>, dy: ArrayView4<'_, F>) -> Array4<F> {
        let (b, t, n, d) = cache.shape;
        let rows = b * t * n;
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, d))
            .expect("contiguous");
        let mut d_act = dy2.dot(&self.w2.t());
        ndarray::Zip::from(&mut d_act)
            .and(&cache.pre_act)
            .for_each(|g, &u| *g = *g * gelu_grad(u));
        let d_ln2 = d_act.dot(&self.w1.t());
        let dx1 = dy2 + layer_norm_backward(cache.ln2.view(), &cache.rstd2, d_ln2.view());
        let dx1_3 = dx1
            .view()
            .into_shape_with_order((b * t, n, d))
            .expect("contiguous");
        let d_ln1 = self.attn.backward(&cache.attn, dx1_3, None);
        let d_ln1 = d_ln1.into_shape_with_order((rows, d)).expect("contiguous");
        let dx = dx1 + layer_norm_backward(cache.ln1.view(), &cache.rstd1, d_ln1.view());
        dx.into_shape_with_order(cache.shape).expect("contiguous")
    }
}

impl<F: Real> Parameters<F> for FrozenLayer<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'a, F>)) {
        self.attn.visit(&join_name(prefix, "attn"), f);
        f(join_name(prefix, "w1"), self.w1.view().into_dyn());
        f(join_name(prefix, "b1"), self.b1.view().into_dyn());
        f(join_name(prefix, "w2"), self.w2.view().into_dyn());
        f(join_name(prefix, "b2"), self.b2.view().into_dyn());
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'a, F>),
    ) {
        self.attn.visit_mut(&join_name(prefix, "attn"), f);
        f(join_name(prefix, "w1"), self.w1.view_mut().into_dyn());
        f(join_name(prefix, "b1"), self.b1.view_mut().into_dyn());
        f(join_name(prefix, "w2"), self.w2.view_mut().into_dyn());
        f(join_name(prefix, "b2"), self.b2.view_mut().into_dyn());
    }
}

/// One modality's tower: linear token embedding, frozen blocks, final norm
/// and mean-pool over body tokens.
#[derive(Debug, Clone)]
pub struct ModalityEncoder<F> {
    pub w_in: Array2<F>,
    pub layers: Vec<FrozenLayer<F>>,
}

pub struct PoolCache<F> {
    ln: Array2<F>,
    rstd: Array1<F>,
    shape: (usize, usize, usize, usize),
}

impl<F: Real> ModalityEncoder<F> {
    fn new(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.model_dim;
        let layers = (0..cfg.num_layers)
            .map(|_| FrozenLayer::new(rng, d, cfg.heads, d * cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self {
            w_in: normal(
                rng,
                (cfg.input_channels, d),
                1.0 / (cfg.input_channels as f64).sqrt(),
            ),
            layers,
        })
    }

    /// `raw: [batch, time, space, channels]` → body tokens `[.., model_dim]`.
    pub fn embed(&self, raw: ArrayView4<'_, F>) -> Result<Array4<F>> {
        let (b, t, s_, c) = raw.dim();
        if c != self.w_in.nrows() {
            return Err(Error::shape(
                "token embedding",
                &[b, t, s_, self.w_in.nrows()],
                &[b, t, s_, c],
            ));
        }
        let flat = raw
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * t * s_, c))
            .expect("contiguous");
        Ok(flat
            .dot(&self.w_in)
            .into_shape_with_order((b, t, s_, self.w_in.ncols()))
            .expect("contiguous"))
    }

    /// Final layer norm, then mean over body tokens (prompts are dropped).
    pub fn pool(&self, stream: &TokenStream<F>) -> (Array2<F>, PoolCache<F>) {
        let body = stream.body();
        let shape = body.dim();
        let (b, t, s_, d) = shape;
        let flat = body
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * t * s_, d))
            .expect("contiguous");
        let (ln, rstd) = layer_norm(flat.view());
        let pooled = ln
            .view()
            .into_shape_with_order((b, t * s_, d))
            .expect("contiguous")
            .mean_axis(Axis(1))
            .expect("non-empty");
        (pooled, PoolCache { ln, rstd, shape })
    }

    /// Gradient w.r.t. the body tokens of the pooled stream.
    pub fn pool_backward(&self, cache: &PoolCache<F>, d_pooled: &Array2<F>) -> Array4<F> {
        let (b, t, s_, d) = cache.shape;
        let scale = lit::<F>(1.0 / (t * s_) as f64);
        let mut dln = Array3::zeros((b, t * s_, d));
        for (mut blk, g) in dln.outer_iter_mut().zip(d_pooled.outer_iter()) {
            blk.assign(&(&g * scale));
        }
        let dln = dln
            .into_shape_with_order((b * t * s_, d))
            .expect("contiguous");
        layer_norm_backward(cache.ln.view(), &cache.rstd, dln.view())
            .into_shape_with_order(cache.shape)
            .expect("contiguous")
    }
}

impl<F: Real> Parameters<F> for ModalityEncoder<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'a, F>)) {
        f(join_name(prefix, "w_in"), self.w_in.view().into_dyn());
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join_name(prefix, &format!("l{i}")), f);
        }
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'a, F>),
    ) {
        f(join_name(prefix, "w_in"), self.w_in.view_mut().into_dyn());
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join_name(prefix, &format!("l{i}")), f);
        }
    }
}

/// Both frozen towers. Only shared references are handed out, so the weights
/// cannot change after [`FrozenEncoders::init`].
#[derive(Debug, Clone)]
pub struct FrozenEncoders<F> {
    config: EncoderConfig,
    video: ModalityEncoder<F>,
    audio: ModalityEncoder<F>,
    fingerprint: String,
}

impl<F: Real> FrozenEncoders<F> {
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let video = ModalityEncoder::new(&mut rng, config)?;
        let audio = ModalityEncoder::new(&mut rng, config)?;
        let mut enc = Self {
            config: config.clone(),
            video,
            audio,
            fingerprint: String::new(),
        };
        enc.fingerprint = enc.compute_fingerprint();
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn video(&self) -> &ModalityEncoder<F> {
        &self.video
    }

    pub fn audio(&self) -> &ModalityEncoder<F> {
        &self.audio
    }

    /// Fingerprint recorded at initialization.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Fingerprint recomputed from the current weights.
    pub fn compute_fingerprint(&self) -> String {
        struct Both<'a, F>(&'a ModalityEncoder<F>, &'a ModalityEncoder<F>);
        impl<F: Real> Parameters<F> for Both<'_, F> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, ndarray::ArrayViewD<'a, F>),
            ) {
                self.0.visit(&join_name(prefix, "video"), f);
                self.1.visit(&join_name(prefix, "audio"), f);
            }
            fn visit_mut<'a>(
                &'a mut self,
                _: &str,
                _: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'a, F>),
            ) {
                unreachable!("frozen")
            }
        }
        Both(&self.video, &self.audio).fingerprint()
    }

    /// Forward pass with arbitrary hooks; returns pooled embeddings and the
    /// per-layer trace (the streams entering each layer after its hooks, plus
    /// the final output at index `num_layers`).
    pub fn forward(
        &self,
        video_raw: ArrayView4<'_, F>,
        audio_raw: ArrayView4<'_, F>,
        hooks: &HookSet<F>,
    ) -> Result<EncoderOutput<F>> {
        if video_raw.dim().0 != audio_raw.dim().0 || video_raw.dim().1 != audio_raw.dim().1 {
            return Err(Error::shape(
                "audio-visual pair (batch, time)",
                &[video_raw.dim().0, video_raw.dim().1],
                &[audio_raw.dim().0, audio_raw.dim().1],
            ));
        }
        if let Some(&l) = hooks.hooks.keys().find(|&&l| l >= self.config.num_layers) {
            return Err(Error::invalid(
                "hook set",
                format!("layer {l} does not exist"),
            ));
        }
        let mut video = TokenStream::from_body(self.video.embed(video_raw)?);
        let mut audio = TokenStream::from_body(self.audio.embed(audio_raw)?);
        let mut trace = Vec::with_capacity(self.config.num_layers + 1);
        for layer in 0..self.config.num_layers {
            if let Some(list) = hooks.hooks.get(&layer) {
                for hook in list {
                    let (vb, ab) = (video.tokens.dim(), audio.tokens.dim());
                    let (vs, as_) = (video.body_len(), audio.body_len());
                    hook.apply(layer, &mut video, &mut audio)?;
                    check_hook_output(layer, hook.name(), &video, vb, vs)?;
                    check_hook_output(layer, hook.name(), &audio, ab, as_)?;
                }
            }
            trace.push(ActivationBlock {
                video: video.clone(),
                audio: audio.clone(),
                layer_index: layer,
            });
            video.tokens = self.video.layers[layer].forward(video.tokens.view())?.0;
            audio.tokens = self.audio.layers[layer].forward(audio.tokens.view())?.0;
        }
        trace.push(ActivationBlock {
            video: video.clone(),
            audio: audio.clone(),
            layer_index: self.config.num_layers,
        });
        let (video_embedding, _) = self.video.pool(&video);
        let (audio_embedding, _) = self.audio.pool(&audio);
        Ok(EncoderOutput {
            video_embedding,
            audio_embedding,
            trace,
        })
    }
}

fn check_hook_output<F: Real>(
    layer: usize,
    hook: &str,
    stream: &TokenStream<F>,
    before: (usize, usize, usize, usize),
    body_before: usize,
) -> Result<()> {
    let (b, t, n, d) = stream.tokens.dim();
    let prefix = stream.prefix_len();
    if b != before.0 || t != before.1 || d != before.3 || n < prefix || n - prefix != body_before {
        return Err(Error::shape(
            format!("layer {layer} (hook `{hook}`)"),
            &[before.0, before.1, prefix + body_before, before.3],
            &[b, t, n, d],
        ));
    }
    Ok(())
}

/// Token streams of both modalities as seen by one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBlock<F> {
    pub video: TokenStream<F>,
    pub audio: TokenStream<F>,
    pub layer_index: usize,
}

impl<F: Real> ActivationBlock<F> {
    pub fn all_finite(&self) -> bool {
        self.video
            .tokens
            .iter()
            .chain(self.audio.tokens.iter())
            .all(|v| v.is_finite())
    }
}

pub struct EncoderOutput<F> {
    pub video_embedding: Array2<F>,
    pub audio_embedding: Array2<F>,
    pub trace: Vec<ActivationBlock<F>>,
}

/// Transformation applied to both token streams before a layer's attention.
pub trait LayerHook<F: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn apply(
        &self,
        layer: usize,
        video: &mut TokenStream<F>,
        audio: &mut TokenStream<F>,
    ) -> Result<()>;
}

#[derive(Default)]
pub struct HookSet<F: Real> {
    hooks: BTreeMap<usize, Vec<Box<dyn LayerHook<F> + 'static>>>,
}

impl<F: Real> HookSet<F> {
    pub fn new() -> Self {
        Self {
            hooks: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, layer: usize, hook: Box<dyn LayerHook<F> + 'static>) -> &mut Self {
        self.hooks.entry(layer).or_default().push(hook);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }
}

/// Hook scaling every body token by a constant; handy for probing the pipeline.
pub struct ScaleHook<F>(pub F);

impl<F: Real> LayerHook<F> for ScaleHook<F> {
    fn name(&self) -> &str {
        "scale"
    }

    fn apply(
        &self,
        _: usize,
        video: &mut TokenStream<F>,
        audio: &mut TokenStream<F>,
    ) -> Result<()> {
        for st in [video, audio] {
            let p = st.prefix_len();
            st.tokens
                .slice_mut(s![.., .., p.., ..])
                .mapv_inplace(|v| v * self.0);
        }
        Ok(())
    }
}
