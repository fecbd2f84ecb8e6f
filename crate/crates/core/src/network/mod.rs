//! The boundary detection network.
//!
//! For every SPoS window the trunk runs a stack of self-attention encoder
//! blocks, summarizes the refined window with a learnable query through
//! cross-attention decoder blocks (`f`), and builds per-frame group-cosine
//! similarity features (`h`). A binary head scores `[h | f]` per frame; an
//! optional multi-class head predicts boundary categories from `f`.

mod checkpoint;
mod layers;
mod similarity;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use similarity::group_similarity;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{normal, ParamId, ParamStore};
use crate::spos::{self, ContextPlan};
use crate::supervision::{self, SoftLabels};
use crate::tensor::Tensor;
use layers::{Conv1d, DecoderBlock, EncoderBlock};

/// Kernel size of every convolution in the heads.
pub const HEAD_KERNEL: usize = 3;

/// Prior boundary probability the untrained heads start from.
const BOUNDARY_PRIOR: f64 = 0.1;

/// Output convolutions start with Glorot weights scaled by this, so an
/// untrained model sits at the prior everywhere.
const OUTPUT_INIT_SCALE: f64 = 0.01;

fn shrink(store: &mut ParamStore, id: ParamId) {
    for w in store.get_mut(id).value.data_mut() {
        *w *= OUTPUT_INIT_SCALE;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrunkConfig {
    /// Feature channels `C` of the input sequence and width of the trunk.
    pub channels: usize,
    /// SPoS window length `L`.
    pub window: usize,
    /// SPoS group stride `s`.
    pub stride: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub feedforward_width: usize,
    /// Channel groups `G` for the similarity maps.
    pub similarity_groups: usize,
    /// Output channels of the similarity convolutions; `D_h = window * this`.
    pub similarity_channels: usize,
    /// Number of boundary categories `K`.
    pub categories: usize,
    /// Whether the multi-class head is built and trained.
    pub category_head: bool,
    /// Learned positional embeddings added to each window.
    pub positional: bool,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            window: 16,
            stride: 8,
            encoder_blocks: 2,
            decoder_blocks: 1,
            heads: 4,
            feedforward_width: 32,
            similarity_groups: 4,
            similarity_channels: 8,
            categories: 8,
            category_head: true,
            positional: true,
        }
    }
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [
            ("channels", self.channels),
            ("window", self.window),
            ("stride", self.stride),
            ("heads", self.heads),
            ("feedforward_width", self.feedforward_width),
            ("similarity_groups", self.similarity_groups),
            ("similarity_channels", self.similarity_channels),
            ("categories", self.categories),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.stride > self.window {
            return bad(format!("stride {} exceeds window {}", self.stride, self.window));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return bad(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if !self.channels.is_multiple_of(self.similarity_groups) {
            return bad(format!(
                "channels {} not divisible by similarity_groups {}",
                self.channels, self.similarity_groups
            ));
        }
        Ok(())
    }

    /// Width of the per-frame similarity feature `h`.
    pub fn similarity_width(&self) -> usize {
        self.window * self.similarity_channels
    }

    pub fn head_hidden(&self) -> usize {
        (self.channels / 2).max(1)
    }
}

#[derive(Clone, Debug)]
struct BinaryHead {
    first: Conv1d,
    second: Conv1d,
}

#[derive(Clone, Debug)]
struct CategoryHead {
    first: Conv1d,
    second: Conv1d,
}

#[derive(Clone, Debug)]
pub struct ScTransformer {
    config: TrunkConfig,
    store: ParamStore,
    positional: Option<ParamId>,
    encoder: Vec<EncoderBlock>,
    query: ParamId,
    decoder: Vec<DecoderBlock>,
    similarity: [Conv1d; 2],
    binary: BinaryHead,
    category: Option<CategoryHead>,
}

/// Graph handles produced by one forward pass over a video.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Boundary probability per frame, shape `[T]`.
    pub b: Var,
    /// Category distribution per frame, `T × (K+1)`.
    pub m: Option<Var>,
    /// Decoder summary per frame, `T × C`.
    pub f: Var,
    /// Similarity features per frame, `T × D_h`.
    pub h: Var,
    /// Every attention probability matrix computed, one per head per block.
    pub attention: Vec<Var>,
    /// Number of windows pushed through the encoder stack.
    pub encoder_calls: usize,
}

impl ScTransformer {
    pub fn new(config: TrunkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;

        let positional = config
            .positional
            .then(|| store.add("positional", normal(&mut rng, &[config.window, c], 0.1)));
        let encoder = (0..config.encoder_blocks)
            .map(|i| {
                EncoderBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("encoder.{i}"),
                    c,
                    config.heads,
                    config.feedforward_width,
                )
            })
            .collect();
        let query = store.add("decoder.query", normal(&mut rng, &[1, c], 0.1));
        let decoder = (0..config.decoder_blocks)
            .map(|i| {
                DecoderBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("decoder.{i}"),
                    c,
                    config.heads,
                    config.feedforward_width,
                )
            })
            .collect();
        let sc = config.similarity_channels;
        let similarity = [
            Conv1d::new(&mut store, &mut rng, "similarity.0", HEAD_KERNEL, config.similarity_groups, sc),
            Conv1d::new(&mut store, &mut rng, "similarity.1", HEAD_KERNEL, sc, sc),
        ];
        let hidden = config.head_hidden();
        let binary = BinaryHead {
            first: Conv1d::new(
                &mut store,
                &mut rng,
                "binary.0",
                HEAD_KERNEL,
                config.similarity_width() + c,
                hidden,
            ),
            second: Conv1d::new(&mut store, &mut rng, "binary.1", HEAD_KERNEL, hidden, 1),
        };
        let logit = (BOUNDARY_PRIOR / (1.0 - BOUNDARY_PRIOR)).ln();
        store.get_mut(binary.second.bias).value.data_mut()[0] = logit;
        shrink(&mut store, binary.second.weight);

        let category = config.category_head.then(|| {
            let head = CategoryHead {
                first: Conv1d::new(&mut store, &mut rng, "category.0", HEAD_KERNEL, c, hidden),
                second: Conv1d::new(
                    &mut store,
                    &mut rng,
                    "category.1",
                    HEAD_KERNEL,
                    hidden,
                    config.categories + 1,
                ),
            };
            // Background gets 1 - prior of the mass at initialization.
            let bg = ((1.0 - BOUNDARY_PRIOR) / BOUNDARY_PRIOR * config.categories as f64).ln();
            store.get_mut(head.second.bias).value.data_mut()[0] = bg;
            shrink(&mut store, head.second.weight);
            head
        });

        Ok(Self {
            config,
            store,
            positional,
            encoder,
            query,
            decoder,
            similarity,
            binary,
            category,
        })
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn query_param(&self) -> ParamId {
        self.query
    }

    pub fn plan(&self, num_frames: usize) -> Result<ContextPlan> {
        spos::plan(num_frames, self.config.window, self.config.stride)
    }

    fn check_context(&self, context: &Tensor) -> Result<()> {
        let expected = [self.config.window, self.config.channels];
        if context.shape() != expected {
            return Err(Error::shape(
                "context",
                format!("expected {expected:?}, got {:?}", context.shape()),
            ));
        }
        Ok(())
    }

    pub(crate) fn encode_var(&self, g: &mut Graph, x: Var, probes: &mut Vec<Var>) -> Result<Var> {
        let mut x = x;
        for block in &self.encoder {
            x = block.forward(g, &self.store, x, probes)?;
        }
        Ok(x)
    }

    pub(crate) fn decode_var(&self, g: &mut Graph, memory: Var, probes: &mut Vec<Var>) -> Result<Var> {
        let mut x = g.param(&self.store, self.query);
        for block in &self.decoder {
            x = block.forward(g, &self.store, x, memory, probes)?;
        }
        Ok(x)
    }

    /// Similarity conv stack over rows of `(frames · L) × G`, returning
    /// `frames × D_h`.
    fn similarity_features(&self, g: &mut Graph, rows: Var) -> Result<Var> {
        let window = self.config.window;
        let x = self.similarity[0].forward(g, &self.store, rows, window)?;
        let x = g.gelu(x)?;
        let x = self.similarity[1].forward(g, &self.store, x, window)?;
        let x = g.gelu(x)?;
        let frames = g.value(x).rows() / window;
        g.reshape(x, vec![frames, self.config.similarity_width()])
    }

    fn binary_var(&self, g: &mut Graph, h: Var, f: Var) -> Result<Var> {
        let t = g.value(f).rows();
        if g.value(h).rows() != t {
            return Err(Error::shape(
                "binary_head",
                format!("h has {} frames, f has {t}", g.value(h).rows()),
            ));
        }
        let x = g.concat_cols(&[h, f])?;
        let x = self.binary.first.forward(g, &self.store, x, t)?;
        let x = g.gelu(x)?;
        let x = self.binary.second.forward(g, &self.store, x, t)?;
        let x = g.sigmoid(x)?;
        g.reshape(x, vec![t])
    }

    fn category_var(&self, g: &mut Graph, f: Var) -> Result<Option<Var>> {
        let Some(head) = &self.category else {
            return Ok(None);
        };
        let t = g.value(f).rows();
        let x = head.first.forward(g, &self.store, f, t)?;
        let x = g.gelu(x)?;
        let x = head.second.forward(g, &self.store, x, t)?;
        Ok(Some(g.softmax_rows(x)?))
    }

    /// Records the whole network on `g` for one `T × C` feature sequence.
    pub fn forward(&self, g: &mut Graph, features: &Tensor) -> Result<ForwardOutput> {
        let c = self.config.channels;
        if features.shape().len() != 2 || features.cols() != c {
            return Err(Error::shape(
                "forward",
                format!("model expects {c} channels, features are {:?}", features.shape()),
            ));
        }
        let plan = self.plan(features.rows())?;
        let window = self.config.window;
        let groups = self.config.similarity_groups;
        let x = g.input(features.clone());
        let pos = self.positional.map(|p| g.param(&self.store, p));

        let mut attention = Vec::new();
        let mut summaries = Vec::with_capacity(plan.num_groups());
        let mut sim_rows = Vec::with_capacity(plan.num_groups());
        for (gi, group) in plan.groups.iter().enumerate() {
            let ctx = g.gather_rows(x, plan.window_rows(gi))?;
            let ctx = match pos {
                Some(p) => g.add(ctx, p)?,
                None => ctx,
            };
            let refined = self.encode_var(g, ctx, &mut attention)?;
            summaries.push(self.decode_var(g, refined, &mut attention)?);
            let sim = similarity::group_similarity_var(g, refined, groups)?;
            let offsets: Vec<usize> = group.frames.clone().map(|t| group.offset_of(t)).collect();
            let index = similarity::row_select_index(&offsets, window, groups);
            sim_rows.push(g.select(sim, index, vec![offsets.len() * window, groups])?);
        }

        let per_group = g.concat_rows(&summaries)?;
        let f = g.gather_rows(per_group, plan.frame_to_group())?;
        let rows = g.concat_rows(&sim_rows)?;
        let h = self.similarity_features(g, rows)?;
        let b = self.binary_var(g, h, f)?;
        let m = self.category_var(g, f)?;
        Ok(ForwardOutput {
            b,
            m,
            f,
            h,
            attention,
            encoder_calls: plan.num_groups(),
        })
    }

    /// Training objective `binary_loss + λ · categorical_loss`; the second
    /// term is dropped when the model has no category head.
    pub fn loss(&self, g: &mut Graph, out: &ForwardOutput, labels: &SoftLabels, lambda: f64) -> Result<Var> {
        let bl = g.binary_cross_entropy(out.b, &labels.binary)?;
        match (out.m, &labels.categorical) {
            (Some(m), Some(target)) => {
                let cl = g.categorical_cross_entropy(m, target)?;
                let cl = g.scale(cl, lambda)?;
                g.add(bl, cl)
            }
            (Some(_), None) => Err(Error::InvalidArgument(
                "category head enabled but labels carry no categories".into(),
            )),
            (None, _) => Ok(bl),
        }
    }

    /// Refines one `L × C` context through the encoder stack.
    pub fn encode(&self, context: &Tensor) -> Result<Tensor> {
        self.check_context(context)?;
        let mut g = Graph::new();
        let x = g.input(context.clone());
        let y = self.encode_var(&mut g, x, &mut Vec::new())?;
        Ok(g.value(y).clone())
    }

    /// Like [`encode`](Self::encode) but also returns every attention
    /// matrix, one per head per block.
    pub fn encode_with_attention(&self, context: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_context(context)?;
        let mut g = Graph::new();
        let x = g.input(context.clone());
        let mut probes = Vec::new();
        let y = self.encode_var(&mut g, x, &mut probes)?;
        let attn = probes.iter().map(|&a| g.value(a).clone()).collect();
        Ok((g.value(y).clone(), attn))
    }

    /// Summarizes a refined window into one `C`-vector with the learnable
    /// query. Also returns the cross-attention weights.
    pub fn decode(&self, refined: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        if refined.shape().len() != 2 || refined.cols() != self.config.channels {
            return Err(Error::shape(
                "decode",
                format!("expected L x {}, got {:?}", self.config.channels, refined.shape()),
            ));
        }
        let mut g = Graph::new();
        let mem = g.input(refined.clone());
        let mut probes = Vec::new();
        let y = self.decode_var(&mut g, mem, &mut probes)?;
        let attn = probes.iter().map(|&a| g.value(a).clone()).collect();
        let f = g.value(y).clone().reshape(vec![self.config.channels])?;
        Ok((f, attn))
    }

    /// Per-frame similarity feature of length `D_h` from a `G × L × L`
    /// similarity stack, for the frame at `offset` within the window.
    pub fn similarity_to_h(&self, sim: &Tensor, offset: usize) -> Result<Tensor> {
        let (groups, window) = (self.config.similarity_groups, self.config.window);
        if sim.shape() != [groups, window, window] {
            return Err(Error::shape(
                "similarity_to_h",
                format!("expected [{groups}, {window}, {window}], got {:?}", sim.shape()),
            ));
        }
        if offset >= window {
            return Err(Error::InvalidArgument(format!("offset {offset} outside window {window}")));
        }
        let mut g = Graph::new();
        let s = g.input(sim.clone());
        let index = similarity::row_select_index(&[offset], window, groups);
        let rows = g.select(s, index, vec![window, groups])?;
        let h = self.similarity_features(&mut g, rows)?;
        g.value(h).clone().reshape(vec![self.config.similarity_width()])
    }

    /// Per-frame boundary probabilities from `h` (`T × D_h`) and `f` (`T × C`).
    pub fn binary_head(&self, h: &Tensor, f: &Tensor) -> Result<Tensor> {
        if h.rows() != f.rows() {
            return Err(Error::shape(
                "binary_head",
                format!("h has {} frames, f has {}", h.rows(), f.rows()),
            ));
        }
        let mut g = Graph::new();
        let (hv, fv) = (g.input(h.clone()), g.input(f.clone()));
        let b = self.binary_var(&mut g, hv, fv)?;
        Ok(g.value(b).clone())
    }

    /// Per-frame category distributions (`T × (K+1)`) from `f`; `None` when
    /// the model was built without the category head.
    pub fn multiclass_head(&self, f: &Tensor) -> Result<Option<Tensor>> {
        let mut g = Graph::new();
        let fv = g.input(f.clone());
        Ok(self.category_var(&mut g, fv)?.map(|m| g.value(m).clone()))
    }

    /// Merged boundary score per frame together with the raw head outputs.
    pub fn predict(&self, features: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, features)?;
        let b = g.value(out.b).clone();
        let m = out.m.map(|m| g.value(m).clone());
        let p = match &m {
            Some(m) => supervision::merge(&b, m)?,
            None => b.clone(),
        };
        Ok(Prediction {
            b,
            m,
            p,
            encoder_calls: out.encoder_calls,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub b: Tensor,
    pub m: Option<Tensor>,
    pub p: Tensor,
    pub encoder_calls: usize,
}
