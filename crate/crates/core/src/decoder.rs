//! Decoder-only transformer over `[u_0, prompts..., ⟨sos⟩, tokens...]`.
//!
//! Prompts and tokens carry separate learned positions plus a two-valued
//! segment embedding, so token positions never shift when prompts arrive.
//! A prompt position attends to earlier prompts only; a token position
//! attends to `u_0`, the prompts visible to it, and earlier tokens.

use crate::error::{AsrError, Result};
use crate::nn::{FeedForward, Init, LayerNorm, SelfAttention};
use crate::prompts::PromptChunk;
use crate::vocab::TokenId;
use promptstream_nd::{kernels, Mask, ParamId, ParamStore, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Content tokens K; the embedding table covers ids `0..=K+2`.
    pub content_tokens: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    /// Prompt positions available besides `u_0`.
    pub max_prompts: usize,
    /// Token positions including `⟨sos⟩`.
    pub max_tokens: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            content_tokens: 16,
            model_dim: 64,
            heads: 4,
            ff_dim: 256,
            layers: 2,
            max_prompts: 256,
            max_tokens: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.content_tokens == 0 || self.model_dim == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(AsrError::config("decoder sizes must be positive"));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(AsrError::config(format!(
                "decoder model dimension {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.max_tokens < 2 {
            return Err(AsrError::config("decoder needs room for at least two token positions"));
        }
        Ok(())
    }

    /// Output classes: content tokens plus `⟨eos⟩`.
    pub fn classes(&self) -> usize {
        self.content_tokens + 1
    }

    pub fn sos(&self) -> TokenId {
        self.content_tokens + 2
    }

    pub fn eos(&self) -> TokenId {
        self.content_tokens + 1
    }
}

/// Log-probabilities over content tokens and `⟨eos⟩` (class `id - 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NextTokenDistribution {
    pub log_probs: Vec<f64>,
}

impl NextTokenDistribution {
    /// Log-probability of token id `id` (content or `⟨eos⟩`).
    pub fn log_prob(&self, id: TokenId) -> f64 {
        id.checked_sub(1)
            .and_then(|c| self.log_probs.get(c).copied())
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Most probable token id; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (c, &v) in self.log_probs.iter().enumerate() {
            if v > self.log_probs[best] {
                best = c;
            }
        }
        best + 1
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    attn_norm: LayerNorm,
    attn: SelfAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct PromptDecoder {
    pub config: DecoderConfig,
    embed: ParamId,
    sos_prompt: ParamId,
    prompt_pos: ParamId,
    token_pos: ParamId,
    segment: ParamId,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
}

const PROMPT_SEGMENT: usize = 0;
const TOKEN_SEGMENT: usize = 1;

impl PromptDecoder {
    pub fn new(init: &mut Init, config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let layers = (0..config.layers)
            .map(|n| {
                let name = format!("decoder.layers.{n}");
                DecoderLayer {
                    attn_norm: LayerNorm::new(init, &format!("{name}.attn_norm"), d),
                    attn: SelfAttention::new(init, &format!("{name}.attn"), d, config.heads),
                    ff_norm: LayerNorm::new(init, &format!("{name}.ff_norm"), d),
                    ff: FeedForward::new(init, &format!("{name}.ff"), d, config.ff_dim),
                }
            })
            .collect();
        Ok(PromptDecoder {
            config: config.clone(),
            embed: init.normal("decoder.embed", &[config.content_tokens + 3, d], 0.05),
            sos_prompt: init.normal("decoder.sos_prompt", &[1, d], 0.05),
            prompt_pos: init.normal("decoder.prompt_pos", &[config.max_prompts + 1, d], 0.05),
            token_pos: init.normal("decoder.token_pos", &[config.max_tokens, d], 0.05),
            segment: init.normal("decoder.segment", &[2, d], 0.05),
            layers,
            final_norm: LayerNorm::new(init, "decoder.final_norm", d),
        })
    }

    fn check_tokens(&self, tokens: &[TokenId], first_position: usize) -> Result<()> {
        let c = &self.config;
        if first_position + tokens.len() > c.max_tokens {
            return Err(AsrError::contract(format!(
                "token position {} exceeds the decoder's {} positions",
                first_position + tokens.len() - 1,
                c.max_tokens
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t == 0 || t == c.eos() || t > c.sos()) {
            return Err(AsrError::contract(format!("token {bad} cannot be fed to the decoder")));
        }
        Ok(())
    }

    fn check_prompts(&self, first: usize, count: usize) -> Result<()> {
        if first + count > self.config.max_prompts + 1 {
            return Err(AsrError::contract(format!(
                "{} prompts exceed the decoder's {} prompt positions",
                first + count - 1,
                self.config.max_prompts
            )));
        }
        Ok(())
    }

    /// Embeds prompt vectors occupying prompt positions `first..first+n`.
    fn embed_prompts<T: Real>(&self, tape: &Tape<T>, prompts: Var, first: usize) -> Result<Var> {
        let n = tape.shape(prompts)[0];
        self.check_prompts(first, n)?;
        let pos: Vec<usize> = (first..first + n).collect();
        let x = tape.add(prompts, tape.gather_rows(tape.param(self.prompt_pos), &pos)?)?;
        Ok(tape.add(x, tape.gather_rows(tape.param(self.segment), &vec![PROMPT_SEGMENT; n])?)?)
    }

    fn embed_tokens<T: Real>(&self, tape: &Tape<T>, tokens: &[TokenId], first: usize) -> Result<Var> {
        self.check_tokens(tokens, first)?;
        let n = tokens.len();
        let pos: Vec<usize> = (first..first + n).collect();
        let x = tape.embedding_lookup(tape.param(self.embed), tokens)?;
        let x = tape.add(x, tape.gather_rows(tape.param(self.token_pos), &pos)?)?;
        Ok(tape.add(x, tape.gather_rows(tape.param(self.segment), &vec![TOKEN_SEGMENT; n])?)?)
    }

    /// `[n, K+1]` output logits from final hidden rows.
    fn logits<T: Real>(&self, tape: &Tape<T>, h: Var) -> Result<Var> {
        let h = self.final_norm.forward(tape, h)?;
        let out = tape.slice_rows(tape.param(self.embed), 1, self.config.content_tokens + 2)?;
        Ok(tape.matmul(h, tape.transpose(out)?)?)
    }

    fn block<T: Real>(&self, tape: &Tape<T>, layer: &DecoderLayer, x: Var, mask: &Mask) -> Result<Var> {
        let h = layer.attn_norm.forward(tape, x)?;
        let a = layer.attn.forward(tape, h, mask)?;
        let x = tape.add(x, a)?;
        let h = layer.ff_norm.forward(tape, x)?;
        Ok(tape.add(x, layer.ff.forward(tape, h)?)?)
    }

    /// Teacher-forced forward. `prompts` is `[J, dim]` (or `None` for J = 0),
    /// `tokens` starts with `⟨sos⟩`, and row `k` of `target_mask`
    /// (`[tokens, J]`) lists the prompts visible when predicting from token
    /// `k`. Returns `[tokens, K+1]` logits.
    pub fn batch_forward_tape<T: Real>(
        &self,
        tape: &Tape<T>,
        prompts: Option<Var>,
        tokens: &[TokenId],
        target_mask: Option<&Mask>,
    ) -> Result<Var> {
        let j = prompts.map_or(0, |p| tape.shape(p)[0]);
        let n = tokens.len();
        if n == 0 {
            return Err(AsrError::contract("batch forward needs at least the ⟨sos⟩ token"));
        }
        if let Some(m) = target_mask {
            if m.rows() != n || m.cols() != j {
                return Err(AsrError::contract(format!(
                    "target mask is {}x{}, expected {n}x{j}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let mut parts = vec![self.embed_prompts(tape, tape.param(self.sos_prompt), 0)?];
        if let Some(p) = prompts {
            parts.push(self.embed_prompts(tape, p, 1)?);
        }
        parts.push(self.embed_tokens(tape, tokens, 0)?);
        let mut x = tape.concat_rows(&parts)?;

        let p = j + 1;
        let mask = Mask::from_fn(p + n, p + n, |r, c| {
            if r < p {
                c <= r
            } else if c == 0 {
                true
            } else if c < p {
                target_mask.is_none_or(|m| m.get(r - p, c - 1))
            } else {
                c <= r
            }
        });
        for layer in &self.layers {
            x = self.block(tape, layer, x, &mask)?;
        }
        let h = tape.slice_rows(x, p, p + n)?;
        self.logits(tape, h)
    }

    /// Batch forward returning per-position distributions.
    pub fn batch_forward<T: Real>(
        &self,
        params: &ParamStore<T>,
        prompts: Option<&Tensor<T>>,
        tokens: &[TokenId],
        target_mask: Option<&Mask>,
    ) -> Result<Vec<NextTokenDistribution>> {
        let tape = Tape::with_params(params);
        let p = prompts.filter(|p| p.rows() > 0).map(|p| tape.constant(p.clone()));
        let mask = match (p, target_mask) {
            (None, Some(m)) if m.cols() > 0 => {
                return Err(AsrError::contract("target mask has prompt columns but no prompts were given"))
            }
            (None, _) => None,
            (Some(_), m) => m,
        };
        let logits = tape.value(self.batch_forward_tape(&tape, p, tokens, mask)?);
        Ok((0..logits.rows()).map(|r| distribution(logits.row(r))).collect())
    }

    /// Fresh session holding only the `⟨sos⟩` prompt `u_0`.
    pub fn session<T: Real>(&self, params: &ParamStore<T>) -> Result<DecoderSession<T>> {
        let mut s = DecoderSession {
            prompt_chunks: Vec::new(),
            prompt_count: 0,
            last_block: 0,
            tokens: Vec::new(),
            ledger: Vec::new(),
            stats: Arc::new(DecoderStats::default()),
        };
        let tape = Tape::with_params(params);
        let x = self.embed_prompts(&tape, tape.param(self.sos_prompt), 0)?;
        let cached = self.run_positions(&tape, &s, x, true)?;
        s.ledger.push(LedgerEntry {
            kind: PositionKind::Prompt,
            index: 0,
            visible_prompts: 0,
        });
        s.prompt_chunks.push(Arc::new(cached.detach()));
        Ok(s)
    }

    /// Runs new positions `x` through the layers against the session cache.
    /// Prompt positions see cached prompts and each other causally; a token
    /// position sees every cached position.
    fn run_positions<T: Real>(
        &self,
        tape: &Tape<T>,
        session: &DecoderSession<T>,
        x: Var,
        prompts: bool,
    ) -> Result<CachedPositions<T>> {
        let n = tape.shape(x)[0];
        let cached_prompts: usize = session.prompt_chunks.iter().map(|c| c.rows).sum();
        let cached = if prompts {
            cached_prompts
        } else {
            cached_prompts + session.tokens.len()
        };
        let mask = Mask::from_fn(n, cached + n, |r, c| c < cached || c - cached <= r);
        let mut keys = Vec::with_capacity(self.layers.len());
        let mut values = Vec::with_capacity(self.layers.len());
        let mut x = x;
        for (li, layer) in self.layers.iter().enumerate() {
            let h = layer.attn_norm.forward(tape, x)?;
            let (q, k, v) = layer.attn.project(tape, h)?;
            let (kv, vv) = (tape.value(k), tape.value(v));
            let (k_all, v_all) = session.gather(li, prompts, &kv, &vv);
            let a = layer.attn.attend(tape, q, tape.constant(k_all), tape.constant(v_all), &mask)?;
            x = tape.add(x, a)?;
            let h = layer.ff_norm.forward(tape, x)?;
            x = tape.add(x, layer.ff.forward(tape, h)?)?;
            keys.push(kv);
            values.push(vv);
        }
        session.stats.positions.fetch_add(n as u64, Ordering::Relaxed);
        Ok(CachedPositions {
            rows: n,
            keys,
            values,
            hidden: x,
        })
    }

    /// Appends one block of prompts.
    pub fn ingest_prompts<T: Real>(
        &self,
        params: &ParamStore<T>,
        session: &mut DecoderSession<T>,
        chunk: &PromptChunk<T>,
    ) -> Result<()> {
        if chunk.block != session.last_block + 1 {
            return Err(AsrError::Sequencing(format!(
                "session has ingested {} blocks, got chunk for block {}",
                session.last_block, chunk.block
            )));
        }
        if !chunk.is_empty() {
            let tape = Tape::with_params(params);
            let p = tape.constant(chunk.vectors());
            let x = self.embed_prompts(&tape, p, session.prompt_count + 1)?;
            let cached = self.run_positions(&tape, session, x, true)?;
            session.push_prompts(Arc::new(cached.detach()), chunk.len());
        }
        session.last_block = chunk.block;
        session.stats.chunks.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Feeds `y_prev` as the next token position and returns the
    /// distribution of the token after it.
    pub fn score_next<T: Real>(
        &self,
        params: &ParamStore<T>,
        session: &mut DecoderSession<T>,
        y_prev: TokenId,
    ) -> Result<NextTokenDistribution> {
        let tape = Tape::with_params(params);
        let k = session.tokens.len();
        let x = self.embed_tokens(&tape, &[y_prev], k)?;
        let cached = self.run_positions(&tape, session, x, false)?;
        let logits = tape.value(self.logits(&tape, cached.hidden)?);
        session.ledger.push(LedgerEntry {
            kind: PositionKind::Token,
            index: k,
            visible_prompts: session.prompt_count,
        });
        session.tokens.push(Arc::new(cached.detach()));
        session.stats.steps.fetch_add(1, Ordering::Relaxed);
        Ok(distribution(logits.row(0)))
    }

    /// Replays `tokens` (starting with `⟨sos⟩`) and returns each step's
    /// distribution.
    pub fn score_sequence<T: Real>(
        &self,
        params: &ParamStore<T>,
        session: &mut DecoderSession<T>,
        tokens: &[TokenId],
    ) -> Result<Vec<NextTokenDistribution>> {
        tokens.iter().map(|&t| self.score_next(params, session, t)).collect()
    }
}

fn distribution<T: Real>(logits: &[T]) -> NextTokenDistribution {
    let row: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    NextTokenDistribution {
        log_probs: kernels::log_softmax(&row),
    }
}

struct CachedPositions<T> {
    rows: usize,
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
    hidden: Var,
}

impl<T> CachedPositions<T> {
    fn detach(self) -> CachedRows<T> {
        CachedRows {
            rows: self.rows,
            keys: self.keys,
            values: self.values,
        }
    }
}

/// Per-layer keys and values of a group of positions.
#[derive(Debug)]
pub struct CachedRows<T> {
    rows: usize,
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PositionKind {
    Prompt,
    Token,
}

/// One cached position: its kind, index within its kind, and the number of
/// prompts (excluding `u_0`) visible to it.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub kind: PositionKind,
    pub index: usize,
    pub visible_prompts: usize,
}

/// Counters shared by a session and all its forks.
#[derive(Debug, Default)]
pub struct DecoderStats {
    positions: AtomicU64,
    steps: AtomicU64,
    chunks: AtomicU64,
}

impl DecoderStats {
    /// Positions pushed through the decoder layers.
    pub fn positions(&self) -> u64 {
        self.positions.load(Ordering::Relaxed)
    }

    pub fn steps(&self) -> u64 {
        self.steps.load(Ordering::Relaxed)
    }

    pub fn chunks(&self) -> u64 {
        self.chunks.load(Ordering::Relaxed)
    }
}

/// Incremental decoder cache. Cloning is a copy-on-write fork: cached rows
/// are shared, later extensions diverge.
#[derive(Clone, Debug)]
pub struct DecoderSession<T> {
    prompt_chunks: Vec<Arc<CachedRows<T>>>,
    prompt_count: usize,
    last_block: usize,
    tokens: Vec<Arc<CachedRows<T>>>,
    ledger: Vec<LedgerEntry>,
    stats: Arc<DecoderStats>,
}

impl<T: Real> DecoderSession<T> {
    fn push_prompts(&mut self, rows: Arc<CachedRows<T>>, n: usize) {
        for i in 0..n {
            self.ledger.push(LedgerEntry {
                kind: PositionKind::Prompt,
                index: self.prompt_count + 1 + i,
                visible_prompts: self.prompt_count + 1 + i,
            });
        }
        self.prompt_count += n;
        self.prompt_chunks.push(rows);
    }

    /// Stacked keys and values of layer `layer` for every cached prompt and,
    /// for token queries, every cached token, followed by `new`.
    fn gather(&self, layer: usize, prompts_only: bool, new_k: &Tensor<T>, new_v: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let d = new_k.cols();
        let tokens: &[Arc<CachedRows<T>>] = if prompts_only { &[] } else { &self.tokens };
        let groups = self.prompt_chunks.iter().chain(tokens);
        let rows: usize = groups.clone().map(|g| g.rows).sum::<usize>() + new_k.rows();
        let mut k = Vec::with_capacity(rows * d);
        let mut v = Vec::with_capacity(rows * d);
        for g in groups {
            k.extend_from_slice(g.keys[layer].data());
            v.extend_from_slice(g.values[layer].data());
        }
        k.extend_from_slice(new_k.data());
        v.extend_from_slice(new_v.data());
        (
            Tensor::matrix(rows, d, k).expect("rows sized"),
            Tensor::matrix(rows, d, v).expect("rows sized"),
        )
    }

    /// Prompts ingested so far, excluding `u_0`.
    pub fn prompt_count(&self) -> usize {
        self.prompt_count
    }

    /// Index of the last ingested block (0 before any chunk).
    pub fn last_block(&self) -> usize {
        self.last_block
    }

    /// Token positions fed so far (the first is `⟨sos⟩`).
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Cached positions: `u_0`, prompts and tokens.
    pub fn len(&self) -> usize {
        1 + self.prompt_count + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    pub fn stats(&self) -> &Arc<DecoderStats> {
        &self.stats
    }

    /// Shares the prompt chunks `source` has ingested beyond this session's.
    /// Both sessions must descend from the same prompt history; the adopted
    /// rows are the ones this session would compute itself, since prompt
    /// positions never see tokens.
    pub fn adopt_prompts(&mut self, source: &DecoderSession<T>) -> Result<()> {
        if source.prompt_chunks.len() < self.prompt_chunks.len()
            || !self
                .prompt_chunks
                .iter()
                .zip(&source.prompt_chunks)
                .all(|(a, b)| Arc::ptr_eq(a, b))
        {
            return Err(AsrError::Sequencing(
                "cannot adopt prompts from a session with a different prompt history".into(),
            ));
        }
        for rows in &source.prompt_chunks[self.prompt_chunks.len()..] {
            let n = rows.rows;
            self.push_prompts(Arc::clone(rows), n);
        }
        self.last_block = source.last_block;
        Ok(())
    }

    /// True when both sessions physically share their prompt cache.
    pub fn shares_prompts_with(&self, other: &DecoderSession<T>) -> bool {
        self.prompt_chunks.len() == other.prompt_chunks.len()
            && self
                .prompt_chunks
                .iter()
                .zip(&other.prompt_chunks)
                .all(|(a, b)| Arc::ptr_eq(a, b))
    }
}
