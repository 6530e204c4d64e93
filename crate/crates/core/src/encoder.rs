//! Blockwise contextual speech encoder.
//!
//! Every layer processes one block of subsampled frames plus one trailing
//! context position inherited from the previous block. The layer output at
//! that trailing position becomes the context handed to the next block, so
//! information flows forward across blocks and never backward.

use crate::error::{AsrError, Result};
use crate::nn::{FeedForward, Init, LayerNorm, Linear, SelfAttention};
use promptstream_nd::{Mask, Padding, ParamId, ParamStore, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    /// Block length in subsampled frames.
    pub block_frames: usize,
    /// Input frames stacked into one subsampled frame.
    pub subsample: usize,
    pub conv_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 16,
            model_dim: 64,
            heads: 4,
            ff_dim: 256,
            layers: 2,
            block_frames: 8,
            subsample: 4,
            conv_kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.model_dim == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(AsrError::config("encoder dimensions and layer count must be positive"));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(AsrError::config(format!(
                "encoder model dimension {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.block_frames == 0 || self.subsample == 0 || self.conv_kernel == 0 {
            return Err(AsrError::config("block length, subsampling and kernel must be positive"));
        }
        Ok(())
    }

    pub fn block_input_frames(&self) -> usize {
        self.block_frames * self.subsample
    }
}

/// Block boundaries of one utterance. Blocks are numbered from 1; boundary
/// `0` is the start of the utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    subsample: usize,
    input_ends: Vec<usize>,
    sub_ends: Vec<usize>,
}

impl BlockPlan {
    /// Non-overlapping blocks of `block_frames` subsampled frames; the last
    /// block may be short.
    pub fn new(input_frames: usize, block_frames: usize, subsample: usize) -> Result<Self> {
        if input_frames == 0 {
            return Err(AsrError::contract("cannot plan blocks for an empty utterance"));
        }
        if block_frames == 0 || subsample == 0 {
            return Err(AsrError::config("block length and subsampling must be positive"));
        }
        let step = block_frames * subsample;
        let mut ends = vec![0];
        let mut t = 0;
        while t < input_frames {
            t = (t + step).min(input_frames);
            ends.push(t);
        }
        Self::from_input_ends(ends, subsample)
    }

    /// A single block covering the whole utterance.
    pub fn single(input_frames: usize, subsample: usize) -> Result<Self> {
        if input_frames == 0 {
            return Err(AsrError::contract("cannot plan blocks for an empty utterance"));
        }
        Self::from_input_ends(vec![0, input_frames], subsample)
    }

    /// Boundaries `T_0 = 0 < T_1 < ... < T_B`. Every block except the last
    /// must hold a multiple of `subsample` frames.
    pub fn from_input_ends(input_ends: Vec<usize>, subsample: usize) -> Result<Self> {
        if input_ends.len() < 2 || input_ends[0] != 0 {
            return Err(AsrError::contract("block boundaries must start at 0 and hold at least one block"));
        }
        let b = input_ends.len() - 1;
        let mut sub_ends = vec![0];
        for i in 1..=b {
            let len = input_ends[i].checked_sub(input_ends[i - 1]).filter(|&l| l > 0).ok_or_else(|| {
                AsrError::contract(format!("block boundaries must strictly increase: {input_ends:?}"))
            })?;
            if i < b && len % subsample != 0 {
                return Err(AsrError::contract(format!(
                    "block {i} holds {len} frames, not a multiple of the subsampling factor {subsample}"
                )));
            }
            sub_ends.push(sub_ends[i - 1] + len.div_ceil(subsample));
        }
        Ok(BlockPlan {
            subsample,
            input_ends,
            sub_ends,
        })
    }

    pub fn blocks(&self) -> usize {
        self.input_ends.len() - 1
    }

    pub fn input_frames(&self) -> usize {
        *self.input_ends.last().expect("non-empty")
    }

    /// `τ_B`.
    pub fn sub_frames(&self) -> usize {
        *self.sub_ends.last().expect("non-empty")
    }

    pub fn subsample(&self) -> usize {
        self.subsample
    }

    /// `T_b` for `b` in `0..=B`.
    pub fn input_end(&self, b: usize) -> usize {
        self.input_ends[b]
    }

    /// `τ_b` for `b` in `0..=B`.
    pub fn sub_end(&self, b: usize) -> usize {
        self.sub_ends[b]
    }

    pub fn input_range(&self, b: usize) -> std::ops::Range<usize> {
        self.input_ends[b - 1]..self.input_ends[b]
    }

    pub fn sub_range(&self, b: usize) -> std::ops::Range<usize> {
        self.sub_ends[b - 1]..self.sub_ends[b]
    }

    /// Block (1-based) containing subsampled frame `t`.
    pub fn block_of_sub_frame(&self, t: usize) -> usize {
        self.sub_ends.partition_point(|&e| e <= t)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn_norm: LayerNorm,
    attn: SelfAttention,
    conv_norm: LayerNorm,
    conv_weight: ParamId,
    conv_bias: ParamId,
    pointwise: Linear,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    fn new(init: &mut Init, name: &str, c: &EncoderConfig) -> Self {
        let d = c.model_dim;
        EncoderLayer {
            attn_norm: LayerNorm::new(init, &format!("{name}.attn_norm"), d),
            attn: SelfAttention::new(init, &format!("{name}.attn"), d, c.heads),
            conv_norm: LayerNorm::new(init, &format!("{name}.conv_norm"), d),
            conv_weight: init.normal(
                &format!("{name}.conv.weight"),
                &[c.conv_kernel, d],
                1.0 / (c.conv_kernel as f64).sqrt(),
            ),
            conv_bias: init.constant(&format!("{name}.conv.bias"), &[d], 0.0),
            pointwise: Linear::new(init, &format!("{name}.pointwise"), d, d),
            ff_norm: LayerNorm::new(init, &format!("{name}.ff_norm"), d),
            ff: FeedForward::new(init, &format!("{name}.ff"), d, c.ff_dim),
        }
    }

    /// `x` holds the block rows followed by the inherited context row; all
    /// positions attend to each other.
    fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let h = self.attn_norm.forward(tape, x)?;
        let a = self.attn.forward(tape, h, &Mask::full(rows, rows))?;
        let x = tape.add(x, a)?;

        let h = self.conv_norm.forward(tape, x)?;
        let h = tape.depthwise_conv1d(h, tape.param(self.conv_weight), tape.param(self.conv_bias), Padding::Causal)?;
        let h = self.pointwise.forward(tape, tape.relu(h))?;
        let x = tape.add(x, h)?;

        let h = self.ff_norm.forward(tape, x)?;
        let h = self.ff.forward(tape, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Per-stream encoder state: the context vectors `c_{n,b}` for `n` in
/// `0..=N` after `block` blocks have been consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T> {
    pub contexts: Vec<Tensor<T>>,
    pub block: usize,
}

/// Output of a whole-utterance encode.
#[derive(Clone, Debug)]
pub struct EncodedUtterance<T> {
    /// `[τ_B, model_dim]`.
    pub h: Tensor<T>,
    /// Last-layer context `c_{N,b}` of every block, each `[1, model_dim]`.
    pub contexts: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub config: EncoderConfig,
    subsample: Linear,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    initial_contexts: ParamId,
}

impl SpeechEncoder {
    pub fn new(init: &mut Init, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let subsample = Linear::new(init, "encoder.subsample", config.input_dim * config.subsample, d);
        let layers = (0..config.layers)
            .map(|n| EncoderLayer::new(init, &format!("encoder.layers.{n}"), config))
            .collect();
        let final_norm = LayerNorm::new(init, "encoder.final_norm", d);
        let initial_contexts = init.normal("encoder.initial_contexts", &[config.layers + 1, d], 0.1);
        Ok(SpeechEncoder {
            config: config.clone(),
            subsample,
            layers,
            final_norm,
            initial_contexts,
        })
    }

    pub fn plan(&self, input_frames: usize) -> Result<BlockPlan> {
        BlockPlan::new(input_frames, self.config.block_frames, self.config.subsample)
    }

    /// Stacks groups of `subsample` frames (zero-padding the tail) and maps
    /// them to model dimension.
    pub fn subsample_tape<T: Real>(&self, tape: &Tape<T>, feats: Var) -> Result<Var> {
        let shape = tape.shape(feats);
        let (n, dim) = (shape[0], shape[1]);
        if n == 0 {
            return Err(AsrError::contract("cannot subsample an empty block"));
        }
        if dim != self.config.input_dim {
            return Err(AsrError::contract(format!(
                "feature dimension {dim} differs from encoder input dimension {}",
                self.config.input_dim
            )));
        }
        let f = self.config.subsample;
        let padded = n.div_ceil(f) * f;
        let x = if padded == n {
            feats
        } else {
            let pad = tape.constant(Tensor::zeros([padded - n, dim]));
            tape.concat_rows(&[feats, pad])?
        };
        let stacked = tape.reshape(x, &[padded / f, f * dim])?;
        self.subsample.forward(tape, stacked)
    }

    pub fn initial_contexts_tape<T: Real>(&self, tape: &Tape<T>) -> Result<Vec<Var>> {
        let table = tape.param(self.initial_contexts);
        (0..=self.config.layers)
            .map(|n| Ok(tape.slice_rows(table, n, n + 1)?))
            .collect()
    }

    /// One block on a tape: returns `H` for the block and the new contexts
    /// `c_{0..=N, b}`.
    pub fn encode_block_tape<T: Real>(
        &self,
        tape: &Tape<T>,
        contexts: &[Var],
        feats: Var,
    ) -> Result<(Var, Vec<Var>)> {
        if contexts.len() != self.layers.len() + 1 {
            return Err(AsrError::contract(format!(
                "expected {} context vectors, got {}",
                self.layers.len() + 1,
                contexts.len()
            )));
        }
        let s = self.subsample_tape(tape, feats)?;
        let len = tape.shape(s)[0];
        let mut next = vec![tape.mean_rows(s)?];
        let mut x = s;
        for (n, layer) in self.layers.iter().enumerate() {
            let input = tape.concat_rows(&[x, contexts[n]])?;
            let mut out = layer.forward(tape, input)?;
            if n + 1 == self.layers.len() {
                out = self.final_norm.forward(tape, out)?;
            }
            x = tape.slice_rows(out, 0, len)?;
            next.push(tape.slice_rows(out, len, len + 1)?);
        }
        Ok((x, next))
    }

    /// Whole utterance on one tape: `H` for all blocks and `c_{N,b}` per block.
    pub fn encode_utterance_tape<T: Real>(
        &self,
        tape: &Tape<T>,
        feats: &Tensor<T>,
        plan: &BlockPlan,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_plan(feats, plan)?;
        let x = tape.constant(feats.clone());
        let mut contexts = self.initial_contexts_tape(tape)?;
        let mut hs = Vec::with_capacity(plan.blocks());
        let mut last = Vec::with_capacity(plan.blocks());
        for b in 1..=plan.blocks() {
            let r = plan.input_range(b);
            let block = tape.slice_rows(x, r.start, r.end)?;
            let (h, c) = self.encode_block_tape(tape, &contexts, block)?;
            hs.push(h);
            last.push(*c.last().expect("N+1 contexts"));
            contexts = c;
        }
        Ok((tape.concat_rows(&hs)?, last))
    }

    fn check_plan<T: Real>(&self, feats: &Tensor<T>, plan: &BlockPlan) -> Result<()> {
        if feats.shape().len() != 2 || feats.rows() != plan.input_frames() {
            return Err(AsrError::contract(format!(
                "block plan covers {} frames but features have shape {:?}",
                plan.input_frames(),
                feats.shape()
            )));
        }
        if plan.subsample() != self.config.subsample {
            return Err(AsrError::contract("block plan subsampling differs from the encoder's"));
        }
        Ok(())
    }

    pub fn initial_state<T: Real>(&self, params: &ParamStore<T>) -> EncoderState<T> {
        let table = params.get(self.initial_contexts);
        let d = self.config.model_dim;
        EncoderState {
            contexts: (0..=self.config.layers)
                .map(|n| Tensor::matrix(1, d, table.row(n).to_vec()).expect("row sized"))
                .collect(),
            block: 0,
        }
    }

    /// Encodes block `block_index` (1-based) given the state after block
    /// `block_index - 1`.
    pub fn encode_block<T: Real>(
        &self,
        params: &ParamStore<T>,
        state: &EncoderState<T>,
        block_index: usize,
        feats: &Tensor<T>,
    ) -> Result<(Tensor<T>, EncoderState<T>)> {
        if block_index != state.block + 1 {
            return Err(AsrError::Sequencing(format!(
                "encoder state is at block {} but block {block_index} was supplied",
                state.block
            )));
        }
        let tape = Tape::with_params(params);
        let contexts: Vec<Var> = state.contexts.iter().map(|c| tape.constant(c.clone())).collect();
        let x = tape.constant(feats.clone());
        let (h, next) = self.encode_block_tape(&tape, &contexts, x)?;
        Ok((
            tape.value(h),
            EncoderState {
                contexts: next.into_iter().map(|v| tape.value(v)).collect(),
                block: block_index,
            },
        ))
    }

    /// Iterates [`SpeechEncoder::encode_block`] over `plan`.
    pub fn encode_utterance<T: Real>(
        &self,
        params: &ParamStore<T>,
        feats: &Tensor<T>,
        plan: &BlockPlan,
    ) -> Result<EncodedUtterance<T>> {
        self.check_plan(feats, plan)?;
        let mut state = self.initial_state(params);
        let mut h = Vec::new();
        let mut contexts = Vec::new();
        for b in 1..=plan.blocks() {
            let block = slice_rows(feats, plan.input_range(b));
            let (hb, next) = self.encode_block(params, &state, b, &block)?;
            h.extend_from_slice(hb.data());
            contexts.push(next.contexts.last().expect("N+1 contexts").clone());
            state = next;
        }
        Ok(EncodedUtterance {
            h: Tensor::matrix(plan.sub_frames(), self.config.model_dim, h)?,
            contexts,
        })
    }
}

pub fn slice_rows<T: Real>(x: &Tensor<T>, range: std::ops::Range<usize>) -> Tensor<T> {
    let c = x.cols();
    Tensor::matrix(range.len(), c, x.data()[range.start * c..range.end * c].to_vec()).expect("rows sized")
}
