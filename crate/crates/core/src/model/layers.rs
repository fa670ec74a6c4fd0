use rand::Rng;

use crate::diffcore::{ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Weight initialisation scale.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Uniform with variance `2 / fan_in`, for layers followed by ReLU.
    He,
    /// Uniform with variance `1 / fan_in`.
    Lecun,
}

pub(crate) fn uniform_weight(rng: &mut impl Rng, shape: &[usize], fan_in: usize, init: Init) -> Tensor {
    let gain = match init {
        Init::He => 6.0,
        Init::Lecun => 3.0,
    };
    let bound = (gain / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Affine map on the last axis of a `[rows, in]` matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), uniform_weight(rng, &[input, output], input, init))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = input * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_weight(rng, &[output, input, kernel, kernel], fan_in, init),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?;
        Ok(Self { weight, bias, spec: ConvSpec { stride, padding: kernel / 2 } })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.conv2d(x, w, Some(b), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

/// Two 3x3 convolutions with ReLU; the first one may stride.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub first: Conv,
    pub second: Conv,
}

impl DoubleConv {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            first: Conv::new(store, &format!("{name}.conv_a"), input, output, 3, stride, Init::He, rng)?,
            second: Conv::new(store, &format!("{name}.conv_b"), output, output, 3, 1, Init::He, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.first.forward(g, store, x)?;
        let y = g.relu(y)?;
        let y = self.second.forward(g, store, y)?;
        g.relu(y)
    }
}

/// Pre-LN Transformer block: `z' = MSA(LN(z)) + z`, `z'' = FFN(LN(z')) + z'`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub dim: usize,
    pub heads: usize,
    pub norm_attn: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Output of one Transformer block: new tokens and per-head attention weights.
pub struct LayerOutput {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            dim,
            heads,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim)?,
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim, Init::Lecun, rng)?,
            attn_out: Linear::new(store, &format!("{name}.attn.out"), dim, dim, Init::Lecun, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim)?,
            ffn_in: Linear::new(store, &format!("{name}.ffn.fc1"), dim, 4 * dim, Init::He, rng)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn.fc2"), 4 * dim, dim, Init::Lecun, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<LayerOutput> {
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let h = self.norm_attn.forward(g, store, z)?;
        let qkv = self.qkv.forward(g, store, h)?;
        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = g.narrow(qkv, 1, head * head_dim, head_dim)?;
            let k = g.narrow(qkv, 1, self.dim + head * head_dim, head_dim)?;
            let v = g.narrow(qkv, 1, 2 * self.dim + head * head_dim, head_dim)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax(scores, 1)?;
            attention.push(weights);
            head_outputs.push(g.matmul(weights, v)?);
        }
        let merged = if head_outputs.len() == 1 { head_outputs[0] } else { g.concat(&head_outputs, 1)? };
        let attn = self.attn_out.forward(g, store, merged)?;
        let z1 = g.add(attn, z)?;

        let h = self.norm_ffn.forward(g, store, z1)?;
        let f = self.ffn_in.forward(g, store, h)?;
        let f = g.relu(f)?;
        let f = self.ffn_out.forward(g, store, f)?;
        let tokens = g.add(f, z1)?;
        Ok(LayerOutput { tokens, attention })
    }
}
