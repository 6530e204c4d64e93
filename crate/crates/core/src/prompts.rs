//! Decoder prompts built from blockwise encoder output: CTC prompts for
//! frames whose greedy label is not blank, and one context prompt per block
//! projected from the last-layer context vector.

use crate::ctc::greedy_decode;
use crate::ctc::CtcGrid;
use crate::encoder::{slice_rows, BlockPlan};
use crate::error::{AsrError, Result};
use crate::nn::{Init, Linear};
use crate::vocab::TokenId;
use promptstream_nd::{ParamStore, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    /// CTC prompts only.
    Ctc,
    /// Context prompts only.
    Context,
    /// Both, concatenated per block.
    Both,
}

impl PromptVariant {
    pub fn uses_ctc(self) -> bool {
        matches!(self, PromptVariant::Ctc | PromptVariant::Both)
    }

    pub fn uses_context(self) -> bool {
        matches!(self, PromptVariant::Context | PromptVariant::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptVariant::Ctc => "ctc",
            PromptVariant::Context => "context",
            PromptVariant::Both => "both",
        }
    }
}

impl FromStr for PromptVariant {
    type Err = AsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc" => Ok(PromptVariant::Ctc),
            "context" => Ok(PromptVariant::Context),
            "both" => Ok(PromptVariant::Both),
            other => Err(AsrError::config(format!("unknown prompt variant {other:?} (ctc|context|both)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub variant: PromptVariant,
    /// Place the context prompt before the block's CTC prompts.
    pub context_first: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            variant: PromptVariant::Both,
            context_first: false,
        }
    }
}

/// What a prompt position was built from.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum PromptSource {
    /// CTC prompt of subsampled frame `t` (utterance-global index).
    Frame(usize),
    /// Context prompt of block `b`.
    Context(usize),
}

/// The prompts of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptChunk<T> {
    /// 1-based block index.
    pub block: usize,
    /// `[kept, dim]` CTC prompts in frame order.
    pub ctc_prompts: Tensor<T>,
    /// Utterance-global subsampled frame of each CTC prompt.
    pub kept_frames: Vec<usize>,
    /// `[1, dim]`, absent for the CTC-only variant.
    pub context_prompt: Option<Tensor<T>>,
    pub context_first: bool,
}

impl<T: Real> PromptChunk<T> {
    pub fn len(&self) -> usize {
        self.kept_frames.len() + usize::from(self.context_prompt.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.ctc_prompts.cols()
    }

    /// Sources in chunk order.
    pub fn sources(&self) -> Vec<PromptSource> {
        let frames = self.kept_frames.iter().map(|&t| PromptSource::Frame(t));
        let context = self.context_prompt.as_ref().map(|_| PromptSource::Context(self.block));
        if self.context_first {
            context.into_iter().chain(frames).collect()
        } else {
            frames.chain(context).collect()
        }
    }

    /// `[len, dim]` prompt vectors in chunk order.
    pub fn vectors(&self) -> Tensor<T> {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.len() * d);
        let ctx = self.context_prompt.as_ref().map(|c| c.data()).unwrap_or(&[]);
        if self.context_first {
            data.extend_from_slice(ctx);
            data.extend_from_slice(self.ctc_prompts.data());
        } else {
            data.extend_from_slice(self.ctc_prompts.data());
            data.extend_from_slice(ctx);
        }
        Tensor::matrix(self.len(), d, data).expect("rows sized")
    }
}

/// Frames of a block whose greedy label is not blank, as block-local indices.
pub fn kept_frames(greedy: &[TokenId]) -> Vec<usize> {
    greedy
        .iter()
        .enumerate()
        .filter(|(_, &z)| z != 0)
        .map(|(t, _)| t)
        .collect()
}

#[derive(Clone, Debug)]
pub struct PromptProjector {
    pub config: PromptConfig,
    pub ctc: Linear,
    pub context: Linear,
}

impl PromptProjector {
    pub fn new(init: &mut Init, config: &PromptConfig, encoder_dim: usize, decoder_dim: usize) -> Self {
        PromptProjector {
            config: config.clone(),
            ctc: Linear::new(init, "prompt.ctc", encoder_dim, decoder_dim),
            context: Linear::new(init, "prompt.context", encoder_dim, decoder_dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.ctc.outputs
    }

    /// Projects the frames of `h_block` whose greedy label is non-blank.
    pub fn make_ctc_prompts<T: Real>(
        &self,
        params: &ParamStore<T>,
        h_block: &Tensor<T>,
        greedy: &[TokenId],
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        if greedy.len() != h_block.rows() {
            return Err(AsrError::contract(format!(
                "{} greedy labels for {} encoder frames",
                greedy.len(),
                h_block.rows()
            )));
        }
        let kept = kept_frames(greedy);
        if kept.is_empty() {
            return Ok((Tensor::matrix(0, self.dim(), Vec::new())?, kept));
        }
        let tape = Tape::with_params(params);
        let h = tape.constant(h_block.clone());
        let rows = tape.gather_rows(h, &kept)?;
        let out = self.ctc.forward(&tape, rows)?;
        Ok((tape.value(out), kept))
    }

    pub fn make_context_prompt<T: Real>(&self, params: &ParamStore<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::with_params(params);
        let x = tape.constant(c.reshape([1, c.numel()])?);
        let out = self.context.forward(&tape, x)?;
        Ok(tape.value(out))
    }

    /// Builds the chunk of block `block` from its encoder output, greedy
    /// labels and last-layer context. `frame_offset` is `τ_{b-1}`.
    pub fn chunk<T: Real>(
        &self,
        params: &ParamStore<T>,
        block: usize,
        frame_offset: usize,
        h_block: &Tensor<T>,
        greedy: &[TokenId],
        context: &Tensor<T>,
    ) -> Result<PromptChunk<T>> {
        let v = self.config.variant;
        let (ctc, kept) = if v.uses_ctc() {
            self.make_ctc_prompts(params, h_block, greedy)?
        } else {
            (Tensor::matrix(0, self.dim(), Vec::new())?, Vec::new())
        };
        let cxt = if v.uses_context() {
            Some(self.make_context_prompt(params, context)?)
        } else {
            None
        };
        Ok(assemble_chunk(
            block,
            ctc,
            kept.into_iter().map(|t| t + frame_offset).collect(),
            cxt,
            self.config.context_first,
        ))
    }

    /// Chunks for a whole utterance from its encoder output.
    pub fn chunks<T: Real>(
        &self,
        params: &ParamStore<T>,
        h: &Tensor<T>,
        contexts: &[Tensor<T>],
        grid: &CtcGrid,
        plan: &BlockPlan,
    ) -> Result<Vec<PromptChunk<T>>> {
        let (z, _) = greedy_decode(grid);
        (1..=plan.blocks())
            .map(|b| {
                let r = plan.sub_range(b);
                self.chunk(params, b, r.start, &slice_rows(h, r.clone()), &z[r], &contexts[b - 1])
            })
            .collect()
    }

    /// Whole-utterance prompts on a tape, in the same order and with the same
    /// per-row arithmetic as the streaming chunks.
    pub fn build_tape<T: Real>(
        &self,
        tape: &Tape<T>,
        h: Var,
        contexts: &[Var],
        greedy: &[TokenId],
        plan: &BlockPlan,
    ) -> Result<PromptLayout> {
        let v = self.config.variant;
        let kept = kept_frames(greedy);
        let ctc = if v.uses_ctc() && !kept.is_empty() {
            let rows = tape.gather_rows(h, &kept)?;
            Some(self.ctc.forward(tape, rows)?)
        } else {
            None
        };
        let cxt = if v.uses_context() {
            let c = tape.concat_rows(contexts)?;
            Some(self.context.forward(tape, c)?)
        } else {
            None
        };
        // Rows of [ctc; cxt] in chunk order.
        let n_ctc = if ctc.is_some() { kept.len() } else { 0 };
        let mut order = Vec::new();
        let mut sources = Vec::new();
        let mut block_ends = vec![0];
        let mut k = 0;
        for b in 1..=plan.blocks() {
            let r = plan.sub_range(b);
            let mut frames = Vec::new();
            while ctc.is_some() && k < kept.len() && kept[k] < r.end {
                frames.push((k, kept[k]));
                k += 1;
            }
            let push_ctx = |order: &mut Vec<usize>, sources: &mut Vec<PromptSource>| {
                if cxt.is_some() {
                    order.push(n_ctc + b - 1);
                    sources.push(PromptSource::Context(b));
                }
            };
            if self.config.context_first {
                push_ctx(&mut order, &mut sources);
            }
            for (row, t) in frames {
                order.push(row);
                sources.push(PromptSource::Frame(t));
            }
            if !self.config.context_first {
                push_ctx(&mut order, &mut sources);
            }
            block_ends.push(order.len());
        }
        let prompts = match (ctc, cxt) {
            (None, None) => None,
            (Some(a), None) | (None, Some(a)) => Some(tape.gather_rows(a, &order)?),
            (Some(a), Some(c)) => {
                let all = tape.concat_rows(&[a, c])?;
                Some(tape.gather_rows(all, &order)?)
            }
        };
        Ok(PromptLayout {
            prompts,
            sources,
            block_ends,
        })
    }
}

/// Concatenates a block's CTC prompts and context prompt in chunk order.
pub fn assemble_chunk<T: Real>(
    block: usize,
    ctc_prompts: Tensor<T>,
    kept_frames: Vec<usize>,
    context_prompt: Option<Tensor<T>>,
    context_first: bool,
) -> PromptChunk<T> {
    PromptChunk {
        block,
        ctc_prompts,
        kept_frames,
        context_prompt,
        context_first,
    }
}

/// Whole-utterance prompt matrix with per-position provenance.
#[derive(Clone, Debug)]
pub struct PromptLayout {
    /// `[J, dim]`, `None` when the utterance produced no prompts.
    pub prompts: Option<Var>,
    pub sources: Vec<PromptSource>,
    /// `J_b` for `b` in `0..=B`.
    pub block_ends: Vec<usize>,
}

impl PromptLayout {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn blocks(&self) -> usize {
        self.block_ends.len() - 1
    }
}

/// Accumulated chunks of one stream.
#[derive(Clone, Debug, Default)]
pub struct PromptStream<T> {
    chunks: Vec<PromptChunk<T>>,
    block_ends: Vec<usize>,
}

impl<T: Real> PromptStream<T> {
    pub fn new() -> Self {
        PromptStream {
            chunks: Vec::new(),
            block_ends: vec![0],
        }
    }

    pub fn push(&mut self, chunk: PromptChunk<T>) -> Result<()> {
        if chunk.block != self.chunks.len() + 1 {
            return Err(AsrError::Sequencing(format!(
                "prompt stream holds {} blocks, got chunk for block {}",
                self.chunks.len(),
                chunk.block
            )));
        }
        self.block_ends.push(self.total() + chunk.len());
        self.chunks.push(chunk);
        Ok(())
    }

    pub fn chunks(&self) -> &[PromptChunk<T>] {
        &self.chunks
    }

    /// `J_b` after the latest block.
    pub fn total(&self) -> usize {
        *self.block_ends.last().expect("starts with J_0")
    }

    pub fn block_ends(&self) -> &[usize] {
        &self.block_ends
    }

    pub fn ctc_prompt_count(&self) -> usize {
        self.chunks.iter().map(|c| c.kept_frames.len()).sum()
    }

    /// All prompts stacked, `[J, dim]`.
    pub fn vectors(&self, dim: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.total() * dim);
        for c in &self.chunks {
            data.extend_from_slice(c.vectors().data());
        }
        Tensor::matrix(self.total(), dim, data).expect("rows sized")
    }

    pub fn sources(&self) -> Vec<PromptSource> {
        self.chunks.iter().flat_map(|c| c.sources()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn projector(variant: PromptVariant, context_first: bool) -> (PromptProjector, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = PromptConfig { variant, context_first };
        let p = PromptProjector::new(&mut Init { store: &mut store, rng: &mut rng }, &cfg, 4, 6);
        (p, store)
    }

    #[test]
    fn blank_filtering_counts() {
        let (p, store) = projector(PromptVariant::Both, false);
        let h = Tensor::full([3, 4], 0.5f32);
        let (none, kept) = p.make_ctc_prompts(&store, &h, &[0, 0, 0]).unwrap();
        assert_eq!((none.rows(), kept.len()), (0, 0));
        let (all, kept) = p.make_ctc_prompts(&store, &h, &[1, 2, 2]).unwrap();
        assert_eq!((all.rows(), kept), (3, vec![0, 1, 2]));
        assert!(p.make_ctc_prompts(&store, &h, &[1, 2]).is_err());
    }

    #[test]
    fn chunk_order_and_length() {
        for context_first in [false, true] {
            let (p, store) = projector(PromptVariant::Both, context_first);
            let h = Tensor::full([4, 4], 0.25f32);
            let c = Tensor::full([1, 4], -0.5f32);
            let chunk = p.chunk(&store, 2, 8, &h, &[0, 3, 0, 1], &c).unwrap();
            assert_eq!(chunk.len(), 3);
            let s = chunk.sources();
            if context_first {
                assert_eq!(s, vec![PromptSource::Context(2), PromptSource::Frame(9), PromptSource::Frame(11)]);
            } else {
                assert_eq!(s, vec![PromptSource::Frame(9), PromptSource::Frame(11), PromptSource::Context(2)]);
            }
            let empty = p.chunk(&store, 1, 0, &h, &[0; 4], &c).unwrap();
            assert_eq!(empty.len(), 1);
        }
    }

    #[test]
    fn stream_requires_consecutive_blocks() {
        let (p, store) = projector(PromptVariant::Ctc, false);
        let h = Tensor::full([2, 4], 0.1f32);
        let c = Tensor::full([1, 4], 0.1f32);
        let mut s = PromptStream::new();
        assert!(s.push(p.chunk(&store, 2, 0, &h, &[1, 0], &c).unwrap()).is_err());
        s.push(p.chunk(&store, 1, 0, &h, &[1, 0], &c).unwrap()).unwrap();
        s.push(p.chunk(&store, 2, 2, &h, &[1, 1], &c).unwrap()).unwrap();
        assert_eq!(s.block_ends(), &[0, 1, 3]);
    }
}
