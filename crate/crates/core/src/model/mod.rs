//! The multi-task Transformer U-Net.
//!
//! A four-stage strided conv stem reduces the image by 16. Every cell of the
//! resulting map becomes one segmentation token; a zero-initialised
//! classification token is appended last and the whole sequence is projected
//! to `embed_dim` without positional embeddings. After `layers` pre-LN
//! Transformer blocks the sequence splits: the segmentation tokens are
//! decoded with skip connections into mask logits and a level set, the
//! classification token feeds a linear classifier.

mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub use layers::{Conv, DoubleConv, LayerNorm, LayerOutput, Linear, TransformerLayer};
use layers::Init;

/// Total downsampling of the stem.
pub const STEM_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub stem_channels: [usize; 4],
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub decode_channels: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            stem_channels: [8, 16, 32, 64],
            embed_dim: 64,
            heads: 4,
            layers: 4,
            num_classes: 2,
            decode_channels: [32, 16, 16, 16],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(STEM_STRIDE) {
            return Err(Error::Contract(format!(
                "input size {} must be a positive multiple of {STEM_STRIDE}",
                self.input_size
            )));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Contract(format!(
                "embed dim {} must be divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Contract("at least two classes are required".into()));
        }
        if self.in_channels == 0
            || self.stem_channels.contains(&0)
            || self.decode_channels.contains(&0)
        {
            return Err(Error::Contract("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Side of the token grid for the configured input.
    pub fn token_grid(&self) -> usize {
        self.input_size / STEM_STRIDE
    }

    pub fn num_tokens(&self) -> usize {
        self.token_grid() * self.token_grid()
    }
}

/// Feature maps produced by the stem.
pub struct StemOutput {
    /// Final map at 1/16 resolution.
    pub features: Var,
    /// Intermediate maps at 1/2, 1/4 and 1/8 resolution.
    pub skips: [Var; 3],
}

/// Graph handles of one forward pass.
pub struct ForwardVars {
    /// `[2, H, W]` background/foreground logits.
    pub mask_logits: Var,
    /// `[H, W]` level set in `(-1, 1)`.
    pub level_set: Var,
    /// `[num_classes]`.
    pub class_logits: Var,
    /// `[gh * gw]` classification-token attention over segmentation tokens, sums to 1.
    pub cls_attention: Var,
    /// Per layer, per head `[N + 1, N + 1]` attention weights.
    pub attention: Vec<Vec<Var>>,
    pub grid: (usize, usize),
}

/// Plain-value outputs for one image.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub mask_logits: Tensor,
    pub level_set: Tensor,
    pub class_logits: Tensor,
    pub cls_attention: Tensor,
    /// Per layer `[heads, N + 1, N + 1]`.
    pub attention: Vec<Tensor>,
    pub grid: (usize, usize),
}

impl ModelOutput {
    /// Foreground probability per pixel, `[H, W]`.
    pub fn foreground_probability(&self) -> Tensor {
        foreground_probability(&self.mask_logits)
    }

    pub fn class_probabilities(&self) -> Vec<f64> {
        let logits = self.class_logits.data();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        exp.into_iter().map(|v| v / total).collect()
    }
}

/// Softmax foreground channel of `[2, H, W]` logits.
pub fn foreground_probability(mask_logits: &Tensor) -> Tensor {
    let s = mask_logits.shape();
    let plane = s[1] * s[2];
    let d = mask_logits.data();
    Tensor::from_fn(&[s[1], s[2]], |i| crate::diffcore::stable_sigmoid(d[plane + i] - d[i]))
}

#[derive(Clone, Debug)]
pub struct MtTransUNet {
    config: ModelConfig,
    store: ParamStore,
    stem: Vec<DoubleConv>,
    embed: crate::diffcore::ParamId,
    cls_token: crate::diffcore::ParamId,
    layers: Vec<TransformerLayer>,
    decoder: Vec<DoubleConv>,
    mask_head: Conv,
    level_set_head: Conv,
    classifier: Linear,
}

impl MtTransUNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let mut stem = Vec::with_capacity(4);
        let mut prev = config.in_channels;
        for (i, &width) in config.stem_channels.iter().enumerate() {
            stem.push(DoubleConv::new(&mut store, &format!("stem.{i}"), prev, width, 2, &mut rng)?);
            prev = width;
        }

        let feat = config.stem_channels[3];
        let d = config.embed_dim;
        let embed = store.add(
            "embed.projection",
            layers::uniform_weight(&mut rng, &[feat, d], feat, Init::Lecun),
        )?;
        let cls_token = store.add("embed.cls_token", Tensor::zeros(&[1, feat]))?;

        let layers = (0..config.layers)
            .map(|i| TransformerLayer::new(&mut store, &format!("layers.{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;

        let skip_widths = [config.stem_channels[2], config.stem_channels[1], config.stem_channels[0]];
        let mut decoder = Vec::with_capacity(4);
        let mut prev = d;
        for (i, &width) in config.decode_channels.iter().enumerate() {
            let input = prev + skip_widths.get(i).copied().unwrap_or(0);
            decoder.push(DoubleConv::new(&mut store, &format!("decoder.{i}"), input, width, 1, &mut rng)?);
            prev = width;
        }
        let mask_head = Conv::new(&mut store, "head.mask", prev, 2, 1, 1, Init::Lecun, &mut rng)?;
        let level_set_head = Conv::new(&mut store, "head.level_set", prev, 1, 1, 1, Init::Lecun, &mut rng)?;
        let classifier = Linear::new(&mut store, "head.classifier", d, config.num_classes, Init::Lecun, &mut rng)?;
        store.check_unique_names()?;

        Ok(Self {
            config,
            store,
            stem,
            embed,
            cls_token,
            layers,
            decoder,
            mask_head,
            level_set_head,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layers(&self) -> &[TransformerLayer] {
        &self.layers
    }

    /// Strided conv stem. Accepts any `[C, H, W]` with `H` and `W` divisible by 16,
    /// which is what lets the same weights serve multi-scale test-time inputs.
    pub fn stem_encode(&self, g: &mut Graph, image: Var) -> Result<StemOutput> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != self.config.in_channels || !s[1].is_multiple_of(STEM_STRIDE) || !s[2].is_multiple_of(STEM_STRIDE) {
            return Err(Error::dim(
                "stem_encode",
                format!(
                    "expected [{}, H, W] with H, W multiples of {STEM_STRIDE}, got {s:?}",
                    self.config.in_channels
                ),
            ));
        }
        let mut x = image;
        let mut maps = Vec::with_capacity(4);
        for stage in &self.stem {
            x = stage.forward(g, &self.store, x)?;
            maps.push(x);
        }
        Ok(StemOutput { features: maps[3], skips: [maps[0], maps[1], maps[2]] })
    }

    /// `[N + 1, D]` token sequence: one projected token per feature cell in
    /// row-major order, then the projected classification token.
    pub fn tokenize(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let s = g.shape(features).to_vec();
        let (c, cells) = (s[0], s[1] * s[2]);
        let flat = g.reshape(features, &[c, cells])?;
        let seg = g.transpose(flat)?;
        let cls = g.param(&self.store, self.cls_token)?;
        let all = g.concat(&[seg, cls], 0)?;
        let e = g.param(&self.store, self.embed)?;
        g.matmul(all, e)
    }

    pub fn transformer_layer(&self, g: &mut Graph, index: usize, tokens: Var) -> Result<LayerOutput> {
        self.layers[index].forward(g, &self.store, tokens)
    }

    /// Decodes `[N, D]` segmentation tokens into `([2, H, W] logits, [H, W] level set)`.
    pub fn decode(&self, g: &mut Graph, seg_tokens: Var, skips: &[Var; 3], grid: (usize, usize)) -> Result<(Var, Var)> {
        let (gh, gw) = grid;
        let t = g.transpose(seg_tokens)?;
        let mut x = g.reshape(t, &[self.config.embed_dim, gh, gw])?;
        let skip_order = [skips[2], skips[1], skips[0]];
        for (i, stage) in self.decoder.iter().enumerate() {
            let s = g.shape(x).to_vec();
            x = g.resize_bilinear(x, s[1] * 2, s[2] * 2)?;
            if let Some(&skip) = skip_order.get(i) {
                x = g.concat(&[x, skip], 0)?;
            }
            x = stage.forward(g, &self.store, x)?;
        }
        let mask = self.mask_head.forward(g, &self.store, x)?;
        let ls = self.level_set_head.forward(g, &self.store, x)?;
        let ls = g.tanh(ls)?;
        let s = g.shape(ls).to_vec();
        let ls = g.reshape(ls, &[s[1], s[2]])?;
        Ok((mask, ls))
    }

    /// Linear classifier on the `[1, D]` classification token.
    pub fn classify(&self, g: &mut Graph, cls_token: Var) -> Result<Var> {
        let logits = self.classifier.forward(g, &self.store, cls_token)?;
        g.reshape(logits, &[self.config.num_classes])
    }

    pub fn forward_graph(&self, g: &mut Graph, image: &Tensor) -> Result<ForwardVars> {
        let image = g.constant(image.clone())?;
        let stem = self.stem_encode(g, image)?;
        let fs = g.shape(stem.features).to_vec();
        let grid = (fs[1], fs[2]);
        let n = grid.0 * grid.1;

        let mut tokens = self.tokenize(g, stem.features)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let out = self.transformer_layer(g, i, tokens)?;
            tokens = out.tokens;
            attention.push(out.attention);
        }

        let seg = g.narrow(tokens, 0, 0, n)?;
        let cls = g.narrow(tokens, 0, n, 1)?;
        let (mask_logits, level_set) = self.decode(g, seg, &stem.skips, grid)?;
        let class_logits = self.classify(g, cls)?;
        let cls_attention = match attention.last() {
            Some(heads) => cls_attention(g, heads, n)?,
            // No Transformer layers: nothing attends, fall back to a uniform map.
            None => g.constant(Tensor::full(&[n], 1.0 / n as f64))?,
        };
        Ok(ForwardVars { mask_logits, level_set, class_logits, cls_attention, attention, grid })
    }

    /// Forward pass without keeping the graph.
    pub fn forward(&self, image: &Tensor) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let vars = self.forward_graph(&mut g, image)?;
        let attention = vars
            .attention
            .iter()
            .map(|heads| {
                let t = g.shape(heads[0])[0];
                let mut data = Vec::with_capacity(heads.len() * t * t);
                for &h in heads {
                    data.extend_from_slice(g.value(h).data());
                }
                Tensor::new(&[heads.len(), t, t], data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelOutput {
            mask_logits: g.value(vars.mask_logits).clone(),
            level_set: g.value(vars.level_set).clone(),
            class_logits: g.value(vars.class_logits).clone(),
            cls_attention: g.value(vars.cls_attention).clone(),
            attention,
            grid: vars.grid,
        })
    }
}

/// Head-averaged attention of the classification query (last row) over the
/// `n` segmentation keys, with its own key dropped and the rest renormalised.
pub fn cls_attention(g: &mut Graph, heads: &[Var], n: usize) -> Result<Var> {
    let mut total = heads[0];
    for &h in &heads[1..] {
        total = g.add(total, h)?;
    }
    let avg = g.scale(total, 1.0 / heads.len() as f64)?;
    let row = g.narrow(avg, 0, n, 1)?;
    let row = g.narrow(row, 1, 0, n)?;
    let row = g.reshape(row, &[n])?;
    g.normalize_sum(row)
}


impl crate::diffcore::Parametrized for MtTransUNet {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}
