//! Parameterized building blocks recorded onto a [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::param::{glorot, ParamId, ParamStore};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, heads: usize) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), width, width),
            key: Linear::new(store, rng, &format!("{name}.key"), width, width),
            value: Linear::new(store, rng, &format!("{name}.value"), width, width),
            output: Linear::new(store, rng, &format!("{name}.output"), width, width),
            heads,
        }
    }

    /// Scaled dot-product attention of `queries` over `memory`. Each head's
    /// attention matrix is appended to `probes`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        probes: &mut Vec<Var>,
    ) -> Result<Var> {
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, memory)?;
        let v = self.value.forward(g, store, memory)?;
        let width = g.value(q).cols();
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_rows(scores)?;
            probes.push(attn);
            outs.push(g.matmul(attn, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.output.forward(g, store, joined)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    pub expand: Linear,
    pub project: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            expand: Linear::new(store, rng, &format!("{name}.expand"), width, hidden),
            project: Linear::new(store, rng, &format!("{name}.project"), hidden, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.project.forward(g, store, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub(crate) struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, heads: usize, hidden: usize) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), width),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), width, heads),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), width),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), width, hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, probes: &mut Vec<Var>) -> Result<Var> {
        let n = self.norm_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, n, n, probes)?;
        let x = g.add(x, a)?;
        let n = self.norm_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, n)?;
        g.add(x, f)
    }
}

/// Pre-norm cross-attention block: the query stream attends over encoder
/// outputs used as keys and values, which are not normalized again.
#[derive(Clone, Debug)]
pub(crate) struct DecoderBlock {
    pub norm_query: LayerNorm,
    pub cross: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, heads: usize, hidden: usize) -> Self {
        Self {
            norm_query: LayerNorm::new(store, &format!("{name}.norm_query"), width),
            cross: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), width, heads),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), width),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), width, hidden),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        memory: Var,
        probes: &mut Vec<Var>,
    ) -> Result<Var> {
        let n = self.norm_query.forward(g, store, query)?;
        let a = self.cross.forward(g, store, n, memory, probes)?;
        let x = g.add(query, a)?;
        let n = self.norm_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, n)?;
        g.add(x, f)
    }
}

/// 1-D convolution over rows, applied independently to consecutive segments
/// of `segment` rows with edge-replication padding.
#[derive(Clone, Debug)]
pub(crate) struct Conv1d {
    /// `(kernel · in) × out`, kernel taps outermost.
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                glorot(rng, kernel * in_channels, out_channels),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segment: usize) -> Result<Var> {
        let rows = g.value(x).rows();
        let half = (self.kernel / 2) as isize;
        let mut taps = Vec::with_capacity(self.kernel);
        for d in -half..=half {
            let index = (0..rows)
                .map(|r| {
                    let base = r - r % segment;
                    let pos = ((r % segment) as isize + d).clamp(0, segment as isize - 1);
                    base + pos as usize
                })
                .collect();
            taps.push(g.gather_rows(x, index)?);
        }
        let cols = if taps.len() == 1 { taps[0] } else { g.concat_cols(&taps)? };
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(cols, w)?;
        g.add_row(y, b)
    }
}
