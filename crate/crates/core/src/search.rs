//! Frame-synchronous CTC prefix beam search fused with label-synchronous
//! decoder scores.
//!
//! A hypothesis's decoder term covers every token it holds: when a prefix
//! is first extended by `c`, the parent's next-token distribution (computed
//! with the prompts ingested at that moment) supplies `log p_dec(c)`, and
//! that value is never revisited.

use crate::ctc::CtcPrefixScore;
use crate::decoder::{DecoderSession, NextTokenDistribution, PromptDecoder};
use crate::error::{AsrError, Result};
use crate::vocab::TokenId;
use promptstream_nd::{ParamStore, Real};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

/// Shallow-fusion weight used when an external LM is supplied.
pub const DEFAULT_LM_WEIGHT: f64 = 0.4;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionWeights {
    pub ctc: f64,
    pub dec: f64,
    pub lm: f64,
    /// Added once per token.
    pub length_penalty: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            ctc: 0.4,
            dec: 0.6,
            lm: 0.0,
            length_penalty: 0.0,
        }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("ctc", self.ctc), ("dec", self.dec), ("lm", self.lm)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(AsrError::config(format!("fusion weight {name} must be a finite non-negative number, got {w}")));
            }
        }
        if !self.length_penalty.is_finite() {
            return Err(AsrError::config("length penalty must be finite"));
        }
        if self.ctc == 0.0 && self.dec == 0.0 {
            return Err(AsrError::config("at least one of the CTC and decoder weights must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub beam: usize,
    /// Extension tokens tried per hypothesis and frame, ranked by CTC
    /// posterior; `None` tries all of them.
    pub prefilter: Option<usize>,
    pub weights: FusionWeights,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam: 8,
            prefilter: Some(4),
            weights: FusionWeights::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(AsrError::config("beam width must be at least 1"));
        }
        if self.prefilter == Some(0) {
            return Err(AsrError::config("prefilter must keep at least one token"));
        }
        self.weights.validate()
    }
}

/// External token LM for shallow fusion.
pub trait LanguageModel: Sync {
    /// `log p(next | history)`; `next` may be `⟨eos⟩`.
    fn log_prob(&self, history: &[TokenId], next: TokenId) -> f64;
}

/// `w · x`, with a zero weight silencing the term even when `x` is `-inf`.
fn weighted(w: f64, x: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * x
    }
}

/// `λ_ctc·log p_ctc + λ_dec·log p_dec + λ_lm·log p_lm + α·len`.
pub fn fusion_score(log_ctc: f64, log_dec: f64, log_lm: Option<f64>, length: usize, w: &FusionWeights) -> f64 {
    weighted(w.ctc, log_ctc)
        + weighted(w.dec, log_dec)
        + log_lm.map_or(0.0, |l| weighted(w.lm, l))
        + w.length_penalty * length as f64
}

/// Decoder state after feeding a hypothesis's last token.
#[derive(Debug)]
struct NextStep<T> {
    session: DecoderSession<T>,
    dist: NextTokenDistribution,
    visible: usize,
}

#[derive(Clone, Debug)]
pub struct FusionHypothesis<T> {
    pub tokens: Vec<TokenId>,
    pub ctc: CtcPrefixScore,
    /// Sum of decoder log-probabilities of the scored tokens.
    pub dec_logp: f64,
    pub lm_logp: f64,
    /// Prompts visible when each scored token was scored.
    pub visible: Vec<usize>,
    /// Session fed `⟨sos⟩` and every token except the last.
    base: DecoderSession<T>,
    next: Option<Arc<NextStep<T>>>,
}

impl<T: Real> FusionHypothesis<T> {
    /// The empty prefix before any frame.
    pub fn root(session: DecoderSession<T>) -> Self {
        FusionHypothesis {
            tokens: Vec::new(),
            ctc: CtcPrefixScore::empty(),
            dec_logp: 0.0,
            lm_logp: 0.0,
            visible: Vec::new(),
            base: session,
            next: None,
        }
    }

    /// Tokens whose decoder probability is included (`i ≤ l`).
    pub fn scored(&self) -> usize {
        self.visible.len()
    }

    pub fn last(&self) -> Option<TokenId> {
        self.tokens.last().copied()
    }

    pub fn score(&self, w: &FusionWeights) -> f64 {
        fusion_score(self.ctc.total(), self.dec_logp, Some(self.lm_logp), self.tokens.len(), w)
    }

    pub fn session(&self) -> &DecoderSession<T> {
        &self.base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalHypothesis {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub ctc_logp: f64,
    /// Including `⟨eos⟩`.
    pub dec_logp: f64,
    pub visible: Vec<usize>,
}

fn rank(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Longest prefix shared by every hypothesis in the beam.
pub fn common_prefix<T>(beam: &[FusionHypothesis<T>]) -> usize {
    let Some(first) = beam.first() else { return 0 };
    let mut n = first.tokens.len();
    for h in &beam[1..] {
        n = n.min(first.tokens.iter().zip(&h.tokens).take_while(|(a, b)| a == b).count());
    }
    n
}

/// Beam operations over one decoder and parameter set.
pub struct FusionSearch<'a, T> {
    pub decoder: &'a PromptDecoder,
    pub params: &'a ParamStore<T>,
    pub config: SearchConfig,
    pub lm: Option<&'a dyn LanguageModel>,
}

impl<'a, T: Real> FusionSearch<'a, T> {
    pub fn new(decoder: &'a PromptDecoder, params: &'a ParamStore<T>, config: SearchConfig) -> Result<Self> {
        config.validate()?;
        Ok(FusionSearch {
            decoder,
            params,
            config,
            lm: None,
        })
    }

    pub fn with_lm(mut self, lm: &'a dyn LanguageModel) -> Self {
        self.lm = Some(lm);
        self
    }

    fn uses_decoder(&self) -> bool {
        self.config.weights.dec > 0.0
    }

    fn lm_term(&self, history: &[TokenId], next: TokenId) -> f64 {
        match self.lm {
            Some(lm) if self.config.weights.lm > 0.0 => lm.log_prob(history, next),
            _ => 0.0,
        }
    }

    /// Next-token distribution of `h` under the prompts its session holds,
    /// reusing the cached one while no new prompts have arrived.
    fn next_step(&self, h: &mut FusionHypothesis<T>) -> Result<Arc<NextStep<T>>> {
        let visible = h.base.prompt_count();
        if let Some(n) = &h.next {
            if n.visible == visible {
                return Ok(Arc::clone(n));
            }
        }
        let mut session = h.base.clone();
        let feed = h.last().unwrap_or(self.decoder.config.sos());
        let dist = self.decoder.score_next(self.params, &mut session, feed)?;
        let step = Arc::new(NextStep { session, dist, visible });
        h.next = Some(Arc::clone(&step));
        Ok(step)
    }

    /// Makes every hypothesis see the prompts `master` has ingested.
    pub fn adopt(&self, beam: &mut [FusionHypothesis<T>], master: &DecoderSession<T>) -> Result<()> {
        for h in beam {
            h.base.adopt_prompts(master)?;
        }
        Ok(())
    }

    fn extension_tokens(&self, log_q: &[f64]) -> Vec<TokenId> {
        let mut c: Vec<TokenId> = (1..log_q.len()).collect();
        if let Some(p) = self.config.prefilter {
            c.sort_by(|&a, &b| log_q[b].total_cmp(&log_q[a]).then(a.cmp(&b)));
            c.truncate(p);
            c.sort_unstable();
        }
        c
    }

    /// Advances the beam by one frame with log posteriors `log_q`.
    pub fn beam_step(&self, mut beam: Vec<FusionHypothesis<T>>, log_q: &[f64]) -> Result<Vec<FusionHypothesis<T>>> {
        if beam.is_empty() {
            return Err(AsrError::contract("beam_step on an empty beam"));
        }
        let w = self.config.weights;
        let tokens = self.extension_tokens(log_q);
        let max_len = self.decoder.config.max_tokens.saturating_sub(1);
        let mut cands: Vec<FusionHypothesis<T>> = Vec::with_capacity(beam.len() * (tokens.len() + 1));
        let mut index: HashMap<Vec<TokenId>, usize> = HashMap::new();
        for h in beam.iter_mut() {
            let last = h.last();
            let mut children = Vec::new();
            if h.tokens.len() < max_len {
                let mut step = None;
                for &c in &tokens {
                    let ctc = h.ctc.extend(last, c, log_q);
                    if w.ctc > 0.0 && ctc.total() == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut child = FusionHypothesis {
                        tokens: [h.tokens.as_slice(), &[c]].concat(),
                        ctc,
                        dec_logp: h.dec_logp,
                        lm_logp: h.lm_logp + self.lm_term(&h.tokens, c),
                        visible: h.visible.clone(),
                        base: h.base.clone(),
                        next: None,
                    };
                    if self.uses_decoder() {
                        if step.is_none() {
                            step = Some(self.next_step(h)?);
                        }
                        let s = step.as_ref().expect("computed above");
                        child.dec_logp += s.dist.log_prob(c);
                        child.visible.push(s.visible);
                        child.base = s.session.clone();
                    }
                    children.push(child);
                }
            }
            let mut stay = h.clone();
            stay.ctc = h.ctc.stay(last, log_q);
            for cand in std::iter::once(stay).chain(children) {
                match index.get(&cand.tokens) {
                    Some(&i) => merge_into(&mut cands[i], cand),
                    None => {
                        index.insert(cand.tokens.clone(), cands.len());
                        cands.push(cand);
                    }
                }
            }
        }
        if w.ctc > 0.0 && cands.iter().any(|h| h.ctc.total() > f64::NEG_INFINITY) {
            cands.retain(|h| h.ctc.total() > f64::NEG_INFINITY);
        }
        let mut scored: Vec<(f64, FusionHypothesis<T>)> = cands.into_iter().map(|h| (h.score(&w), h)).collect();
        scored.sort_by(|a, b| rank((a.0, &a.1.tokens), (b.0, &b.1.tokens)));
        scored.truncate(self.config.beam);
        Ok(scored.into_iter().map(|(_, h)| h).collect())
    }

    /// Adds the `⟨eos⟩` terms and ranks the beam, best first.
    pub fn finalize(&self, beam: &mut [FusionHypothesis<T>]) -> Result<Vec<FinalHypothesis>> {
        let w = self.config.weights;
        let eos = self.decoder.config.eos();
        let mut out = Vec::with_capacity(beam.len());
        for h in beam.iter_mut() {
            let mut dec = h.dec_logp;
            if self.uses_decoder() {
                dec += self.next_step(h)?.dist.log_prob(eos);
            }
            let lm = h.lm_logp + self.lm_term(&h.tokens, eos);
            out.push(FinalHypothesis {
                tokens: h.tokens.clone(),
                score: fusion_score(h.ctc.total(), dec, Some(lm), h.tokens.len(), &w),
                ctc_logp: h.ctc.total(),
                dec_logp: dec,
                visible: h.visible.clone(),
            });
        }
        out.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
        Ok(out)
    }
}

/// Sums the CTC mass of two hypotheses with the same prefix. The decoder
/// branch that saw more prompts survives; on equal visibility, the better
/// decoder score.
fn merge_into<T>(into: &mut FusionHypothesis<T>, other: FusionHypothesis<T>) {
    let ctc = into.ctc.merge(&other.ctc);
    let (vi, vo) = (into.visible.last().copied(), other.visible.last().copied());
    if vo > vi || (vo == vi && other.dec_logp > into.dec_logp) {
        *into = other;
    }
    into.ctc = ctc;
}
