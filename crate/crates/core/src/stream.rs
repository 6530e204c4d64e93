//! Block-by-block streaming driver, the batch (all prompts first) decode,
//! and the RTF / endpoint-latency harness.

use crate::ctc::greedy_decode;
use crate::decoder::DecoderSession;
use crate::encoder::{slice_rows, BlockPlan, EncoderState};
use crate::error::{AsrError, Result};
use crate::model::AsrModel;
use crate::search::{common_prefix, FinalHypothesis, FusionHypothesis, FusionSearch, LanguageModel, SearchConfig};
use crate::vocab::TokenId;
use promptstream_nd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

/// Input frame period in seconds.
pub const DEFAULT_FRAME_PERIOD: f64 = 0.01;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub token: TokenId,
    pub block: usize,
    /// Seconds on the simulated stream clock.
    pub time: f64,
}

/// Counters a recognizer reports after finishing a stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub score: f64,
    pub prompts: usize,
    pub ctc_prompts: usize,
    pub decoder_positions: u64,
    pub decoder_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamResult {
    pub timeline: Vec<Emission>,
    pub hypothesis: Vec<TokenId>,
    pub blocks: usize,
    pub audio_seconds: f64,
    pub processing_seconds: f64,
    pub rtf: f64,
    /// From the arrival of the last input frame to the final hypothesis.
    pub ep_latency: f64,
    pub summary: StreamSummary,
}

/// Something that consumes feature blocks and commits tokens.
pub trait StreamingRecognizer {
    type State;

    fn plan(&self, input_frames: usize) -> Result<BlockPlan>;

    fn start(&self) -> Result<Self::State>;

    /// Consumes block `block` (1-based) and returns the tokens committed by it.
    fn push_block(&self, state: &mut Self::State, block: usize, feats: &Tensor<f32>) -> Result<Vec<TokenId>>;

    /// Ends the stream and returns the remaining tokens of the final hypothesis.
    fn finish(&self, state: &mut Self::State) -> Result<Vec<TokenId>>;

    fn summary(&self, _state: &Self::State) -> StreamSummary {
        StreamSummary::default()
    }
}

/// Runs one utterance through `rec`. Block `b` becomes available at
/// `T_b × frame_period` on a simulated clock; processing starts at the later
/// of its arrival and the end of the previous block's processing, and takes
/// the measured wall time.
pub fn run_stream<R: StreamingRecognizer>(
    rec: &R,
    feats: &Tensor<f32>,
    plan: &BlockPlan,
    frame_period: f64,
) -> Result<(StreamResult, R::State)> {
    if plan.input_frames() != feats.rows() {
        return Err(AsrError::contract(format!(
            "plan covers {} frames, features have {}",
            plan.input_frames(),
            feats.rows()
        )));
    }
    let mut state = rec.start()?;
    let mut timeline = Vec::new();
    let (mut clock, mut busy) = (0.0f64, 0.0f64);
    for b in 1..=plan.blocks() {
        let block = slice_rows(feats, plan.input_range(b));
        let arrival = plan.input_end(b) as f64 * frame_period;
        let t0 = Instant::now();
        let new = rec.push_block(&mut state, b, &block)?;
        let dt = t0.elapsed().as_secs_f64();
        clock = clock.max(arrival) + dt;
        busy += dt;
        timeline.extend(new.into_iter().map(|token| Emission { token, block: b, time: clock }));
    }
    let t0 = Instant::now();
    let rest = rec.finish(&mut state)?;
    let dt = t0.elapsed().as_secs_f64();
    clock += dt;
    busy += dt;
    let blocks = plan.blocks();
    timeline.extend(rest.into_iter().map(|token| Emission {
        token,
        block: blocks,
        time: clock,
    }));
    let audio = feats.rows() as f64 * frame_period;
    let result = StreamResult {
        hypothesis: timeline.iter().map(|e| e.token).collect(),
        timeline,
        blocks,
        audio_seconds: audio,
        processing_seconds: busy,
        rtf: if audio > 0.0 { busy / audio } else { 0.0 },
        ep_latency: clock - plan.input_frames() as f64 * frame_period,
        summary: rec.summary(&state),
    };
    Ok((result, state))
}

/// The joint model behind the streaming interface.
pub struct FusionRecognizer<'a> {
    pub model: &'a AsrModel,
    pub params: &'a ParamStore<f32>,
    pub search: FusionSearch<'a, f32>,
}

pub struct FusionStream {
    encoder: EncoderState<f32>,
    master: DecoderSession<f32>,
    beam: Vec<FusionHypothesis<f32>>,
    committed: usize,
    frames: usize,
    ctc_prompts: usize,
    best: Option<FinalHypothesis>,
}

impl FusionStream {
    pub fn beam(&self) -> &[FusionHypothesis<f32>] {
        &self.beam
    }

    pub fn best(&self) -> Option<&FinalHypothesis> {
        self.best.as_ref()
    }
}

impl<'a> FusionRecognizer<'a> {
    pub fn new(model: &'a AsrModel, params: &'a ParamStore<f32>, config: SearchConfig) -> Result<Self> {
        Ok(FusionRecognizer {
            model,
            params,
            search: FusionSearch::new(&model.decoder, params, config)?,
        })
    }

    pub fn with_lm(mut self, lm: &'a dyn LanguageModel) -> Self {
        self.search = self.search.with_lm(lm);
        self
    }

    fn commit(&self, state: &mut FusionStream) -> Vec<TokenId> {
        let n = common_prefix(&state.beam);
        let new = state.beam[0].tokens[state.committed..n.max(state.committed)].to_vec();
        state.committed = n.max(state.committed);
        new
    }
}

impl StreamingRecognizer for FusionRecognizer<'_> {
    type State = FusionStream;

    fn plan(&self, input_frames: usize) -> Result<BlockPlan> {
        self.model.plan(input_frames)
    }

    fn start(&self) -> Result<FusionStream> {
        let master = self.model.decoder.session(self.params)?;
        Ok(FusionStream {
            encoder: self.model.encoder.initial_state(self.params),
            beam: vec![FusionHypothesis::root(master.clone())],
            master,
            committed: 0,
            frames: 0,
            ctc_prompts: 0,
            best: None,
        })
    }

    fn push_block(&self, state: &mut FusionStream, block: usize, feats: &Tensor<f32>) -> Result<Vec<TokenId>> {
        let m = self.model;
        let (h, next) = m.encoder.encode_block(self.params, &state.encoder, block, feats)?;
        let grid = m.ctc.posteriors(self.params, &h)?;
        let (z, _) = greedy_decode(&grid);
        let context = next.contexts.last().expect("N+1 contexts");
        let chunk = m.projector.chunk(self.params, block, state.frames, &h, &z, context)?;
        state.ctc_prompts += chunk.kept_frames.len();
        m.decoder.ingest_prompts(self.params, &mut state.master, &chunk)?;
        self.search.adopt(&mut state.beam, &state.master)?;
        let mut beam = std::mem::take(&mut state.beam);
        for t in 0..grid.frames() {
            beam = self.search.beam_step(beam, grid.log_row(t))?;
        }
        state.beam = beam;
        state.encoder = next;
        state.frames += grid.frames();
        Ok(self.commit(state))
    }

    fn finish(&self, state: &mut FusionStream) -> Result<Vec<TokenId>> {
        let ranked = self.search.finalize(&mut state.beam)?;
        let best = ranked.into_iter().next().expect("beam is never empty");
        let rest = best.tokens[state.committed.min(best.tokens.len())..].to_vec();
        state.committed = best.tokens.len();
        state.best = Some(best);
        Ok(rest)
    }

    fn summary(&self, state: &FusionStream) -> StreamSummary {
        let stats = state.master.stats();
        StreamSummary {
            score: state.best.as_ref().map_or(f64::NAN, |b| b.score),
            prompts: state.master.prompt_count(),
            ctc_prompts: state.ctc_prompts,
            decoder_positions: stats.positions(),
            decoder_steps: stats.steps(),
        }
    }
}

/// Streaming decode of one utterance with the model's own block plan
/// replaced by `plan`.
pub fn stream_decode(
    model: &AsrModel,
    params: &ParamStore<f32>,
    feats: &Tensor<f32>,
    plan: &BlockPlan,
    search: &SearchConfig,
    frame_period: f64,
) -> Result<StreamResult> {
    let rec = FusionRecognizer::new(model, params, search.clone())?;
    Ok(run_stream(&rec, feats, plan, frame_period)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub hypothesis: Vec<TokenId>,
    pub best: FinalHypothesis,
    pub summary: StreamSummary,
}

/// Encodes the whole utterance, ingests every prompt chunk, then runs the
/// fused search over all frames.
pub fn batch_decode(
    model: &AsrModel,
    params: &ParamStore<f32>,
    feats: &Tensor<f32>,
    plan: &BlockPlan,
    search: &SearchConfig,
) -> Result<Decoded> {
    let fs = FusionSearch::new(&model.decoder, params, search.clone())?;
    let enc = model.encode(params, feats, plan.clone())?;
    let chunks = model.prompt_chunks(params, &enc)?;
    let mut master = model.decoder.session(params)?;
    for c in &chunks {
        model.decoder.ingest_prompts(params, &mut master, c)?;
    }
    let mut beam = vec![FusionHypothesis::root(master.clone())];
    for t in 0..enc.grid.frames() {
        beam = fs.beam_step(beam, enc.grid.log_row(t))?;
    }
    let best = fs.finalize(&mut beam)?.into_iter().next().expect("beam is never empty");
    let stats = master.stats();
    Ok(Decoded {
        hypothesis: best.tokens.clone(),
        summary: StreamSummary {
            score: best.score,
            prompts: master.prompt_count(),
            ctc_prompts: chunks.iter().map(|c| c.kept_frames.len()).sum(),
            decoder_positions: stats.positions(),
            decoder_steps: stats.steps(),
        },
        best,
    })
}

/// Recognizer that only burns a fixed wall time per block.
#[derive(Clone, Debug)]
pub struct MockRecognizer {
    pub block_cost: Duration,
    pub block_frames: usize,
    pub subsample: usize,
}

impl StreamingRecognizer for MockRecognizer {
    type State = ();

    fn plan(&self, input_frames: usize) -> Result<BlockPlan> {
        BlockPlan::new(input_frames, self.block_frames, self.subsample)
    }

    fn start(&self) -> Result<()> {
        Ok(())
    }

    fn push_block(&self, _: &mut (), _: usize, _: &Tensor<f32>) -> Result<Vec<TokenId>> {
        if !self.block_cost.is_zero() {
            std::thread::sleep(self.block_cost);
        }
        Ok(Vec::new())
    }

    fn finish(&self, _: &mut ()) -> Result<Vec<TokenId>> {
        Ok(Vec::new())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub median: f64,
    pub p90: f64,
    pub mean: f64,
    pub max: f64,
}

impl Distribution {
    /// Linear-interpolated quantiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let x = p * (v.len() - 1) as f64;
            let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
        };
        Some(Distribution {
            median: q(0.5),
            p90: q(0.9),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v[v.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub utterances: usize,
    pub rtf: Distribution,
    /// The median is EP50.
    pub ep_latency: Distribution,
}

/// Streams every utterance through `rec` one after another and summarises
/// RTF and endpoint latency.
pub fn measure<R: StreamingRecognizer>(
    rec: &R,
    utterances: &[&Tensor<f32>],
    frame_period: f64,
) -> Result<(Measurement, Vec<StreamResult>)> {
    if utterances.is_empty() {
        return Err(AsrError::config("measure needs at least one utterance"));
    }
    let mut results = Vec::with_capacity(utterances.len());
    for f in utterances {
        let plan = rec.plan(f.rows())?;
        results.push(run_stream(rec, f, &plan, frame_period)?.0);
    }
    let rtf: Vec<f64> = results.iter().map(|r| r.rtf).collect();
    let ep: Vec<f64> = results.iter().map(|r| r.ep_latency).collect();
    Ok((
        Measurement {
            utterances: results.len(),
            rtf: Distribution::of(&rtf).expect("non-empty"),
            ep_latency: Distribution::of(&ep).expect("non-empty"),
        },
        results,
    ))
}
