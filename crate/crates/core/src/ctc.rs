//! CTC posteriors, loss, greedy decoding, Viterbi forced alignment and the
//! prefix-probability recursion used by the fused beam search.
//!
//! All probabilistic accumulation runs in f64 log space regardless of the
//! network precision.

use crate::error::{AsrError, Result};
use crate::nn::{Init, Linear};
use crate::vocab::TokenId;
use promptstream_nd::{kernels, CustomBackward, ParamStore, Real, Tape, Tensor, Var};

const NEG_INF: f64 = f64::NEG_INFINITY;

#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Per-frame log posteriors `log q(z_t | h_t)` over CTC classes
/// (blank = 0, content tokens `1..=K`).
#[derive(Clone, Debug, PartialEq)]
pub struct CtcGrid {
    frames: usize,
    classes: usize,
    log_probs: Vec<f64>,
}

impl CtcGrid {
    /// Row-wise log-softmax of `[frames, classes]` logits.
    pub fn from_logits<T: Real>(logits: &Tensor<T>) -> Self {
        let (frames, classes) = (logits.rows(), logits.cols());
        let mut log_probs = Vec::with_capacity(frames * classes);
        for t in 0..frames {
            let row: Vec<f64> = logits.row(t).iter().map(|v| v.as_f64()).collect();
            log_probs.extend(kernels::log_softmax(&row));
        }
        CtcGrid {
            frames,
            classes,
            log_probs,
        }
    }

    /// Grid from explicit probabilities; each row must sum to 1.
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        let mut log_probs = Vec::with_capacity(rows.len() * classes);
        for (t, r) in rows.iter().enumerate() {
            let s: f64 = r.iter().sum();
            if r.len() != classes || (s - 1.0).abs() > 1e-6 || r.iter().any(|&p| p < 0.0) {
                return Err(AsrError::contract(format!("row {t} is not a probability distribution")));
            }
            log_probs.extend(r.iter().map(|p| p.ln()));
        }
        Ok(CtcGrid {
            frames: rows.len(),
            classes,
            log_probs,
        })
    }

    pub fn uniform(frames: usize, classes: usize) -> Self {
        CtcGrid {
            frames,
            classes,
            log_probs: vec![-(classes as f64).ln(); frames * classes],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn log_prob(&self, t: usize, c: usize) -> f64 {
        self.log_probs[t * self.classes + c]
    }

    pub fn log_row(&self, t: usize) -> &[f64] {
        &self.log_probs[t * self.classes..(t + 1) * self.classes]
    }

    pub fn prob_row(&self, t: usize) -> Vec<f64> {
        self.log_row(t).iter().map(|v| v.exp()).collect()
    }

    /// Frames `range` as a grid of their own.
    pub fn slice(&self, range: std::ops::Range<usize>) -> CtcGrid {
        CtcGrid {
            frames: range.len(),
            classes: self.classes,
            log_probs: self.log_probs[range.start * self.classes..range.end * self.classes].to_vec(),
        }
    }

    pub fn append(&mut self, other: &CtcGrid) {
        assert_eq!(self.classes, other.classes, "grids with different class counts");
        self.frames += other.frames;
        self.log_probs.extend_from_slice(&other.log_probs);
    }
}

/// Linear projection from encoder states to CTC logits.
#[derive(Clone, Debug)]
pub struct CtcHead {
    pub proj: Linear,
}

impl CtcHead {
    pub fn new(init: &mut Init, model_dim: usize, classes: usize) -> Self {
        CtcHead {
            proj: Linear::new(init, "ctc.proj", model_dim, classes),
        }
    }

    pub fn logits_tape<T: Real>(&self, tape: &Tape<T>, h: Var) -> Result<Var> {
        self.proj.forward(tape, h)
    }

    pub fn posteriors<T: Real>(&self, params: &ParamStore<T>, h: &Tensor<T>) -> Result<CtcGrid> {
        let tape = Tape::with_params(params);
        let x = tape.constant(h.clone());
        let logits = self.logits_tape(&tape, x)?;
        Ok(CtcGrid::from_logits(&tape.value(logits)))
    }
}

/// Merge adjacent repeats, then delete blanks.
pub fn collapse(z: &[TokenId], blank: TokenId) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in z {
        if Some(c) != prev && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Per-frame argmax (ties to the lowest class index) and its collapse.
pub fn greedy_decode(grid: &CtcGrid) -> (Vec<TokenId>, Vec<TokenId>) {
    let z: Vec<TokenId> = (0..grid.frames())
        .map(|t| {
            let row = grid.log_row(t);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let y = collapse(&z, 0);
    (z, y)
}

/// Frames needed to carry `y`: one per token plus one blank between repeats.
pub fn min_frames(y: &[TokenId]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_labels(grid: &CtcGrid, y: &[TokenId]) -> Result<()> {
    if let Some(&bad) = y.iter().find(|&&c| c == 0 || c >= grid.classes()) {
        return Err(AsrError::contract(format!(
            "label {bad} is not a content class of a {}-class grid",
            grid.classes()
        )));
    }
    let needed = min_frames(y);
    if grid.frames() < needed || (grid.frames() == 0 && y.is_empty()) {
        return Err(AsrError::InfeasibleAlignment {
            frames: grid.frames(),
            needed: needed.max(1),
        });
    }
    Ok(())
}

/// Blank-interleaved state labels `φ y1 φ y2 ... φ`.
fn extended(y: &[TokenId]) -> Vec<TokenId> {
    let mut l = Vec::with_capacity(2 * y.len() + 1);
    l.push(0);
    for &c in y {
        l.push(c);
        l.push(0);
    }
    l
}

#[inline]
fn can_skip(l: &[TokenId], s: usize) -> bool {
    s >= 2 && l[s] != 0 && l[s] != l[s - 2]
}

fn forward_backward(grid: &CtcGrid, y: &[TokenId]) -> (Vec<f64>, Vec<f64>, f64, Vec<TokenId>) {
    let l = extended(y);
    let s_len = l.len();
    let t_len = grid.frames();
    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = grid.log_prob(0, l[0]);
    if s_len > 1 {
        alpha[1] = grid.log_prob(0, l[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(&l, s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + grid.log_prob(t, l[s]);
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }

    let mut beta = vec![NEG_INF; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + grid.log_prob(t + 1, l[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + grid.log_prob(t + 1, l[s + 1]));
            }
            if s + 2 < s_len && can_skip(&l, s + 2) {
                b = log_add(b, beta[next + s + 2] + grid.log_prob(t + 1, l[s + 2]));
            }
            beta[t * s_len + s] = b;
        }
    }
    (alpha, beta, log_p, l)
}

/// `-ln p(y | grid)` summed over all alignments.
pub fn ctc_loss(grid: &CtcGrid, y: &[TokenId]) -> Result<f64> {
    check_labels(grid, y)?;
    let (_, _, log_p, _) = forward_backward(grid, y);
    Ok(-log_p)
}

/// Posterior probability that frame `t` emits class `k`, `[frames, classes]`.
pub fn ctc_occupancy(grid: &CtcGrid, y: &[TokenId]) -> Result<(Vec<f64>, f64)> {
    check_labels(grid, y)?;
    let (alpha, beta, log_p, l) = forward_backward(grid, y);
    let s_len = l.len();
    let mut occ = vec![NEG_INF; grid.frames() * grid.classes()];
    for t in 0..grid.frames() {
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            let cell = &mut occ[t * grid.classes() + l[s]];
            *cell = log_add(*cell, v);
        }
    }
    Ok((occ.into_iter().map(f64::exp).collect(), -log_p))
}

struct CtcLossBackward<T> {
    grad: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Real> CustomBackward<T> for CtcLossBackward<T> {
    fn backward(&self, upstream: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = upstream.item();
        let data = self.grad.iter().map(|&v| v * g).collect();
        vec![Some(Tensor::new(self.shape.clone(), data).expect("shape recorded at forward"))]
    }
}

/// Differentiable CTC loss over raw `[frames, classes]` logits.
pub fn ctc_loss_tape<T: Real>(tape: &Tape<T>, logits: Var, y: &[TokenId]) -> Result<Var> {
    let lv = tape.value(logits);
    let grid = CtcGrid::from_logits(&lv);
    let (occ, loss) = ctc_occupancy(&grid, y)?;
    let grad = (0..occ.len())
        .map(|i| T::of(grid.log_probs[i].exp() - occ[i]))
        .collect();
    Ok(tape.custom(
        &[logits],
        Tensor::scalar(T::of(loss)),
        Box::new(CtcLossBackward {
            grad,
            shape: lv.shape().to_vec(),
        }),
    ))
}

/// Viterbi-best alignment of a transcript to a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ForcedAlignment {
    /// Class emitted at every frame.
    pub path: Vec<TokenId>,
    /// Extended-state index (into `φ y1 φ ... φ`) at every frame.
    pub states: Vec<usize>,
    /// First frame aligned to token `i`.
    pub emit_frames: Vec<usize>,
    /// Last frame aligned to token `i`, `τ(a_i)`.
    pub end_frames: Vec<usize>,
    pub log_prob: f64,
}

/// Best path over the blank-interleaved state graph. Ties prefer the
/// predecessor that emitted earlier (higher state index), and the final
/// blank state over the last token state.
pub fn forced_align(grid: &CtcGrid, y: &[TokenId]) -> Result<ForcedAlignment> {
    check_labels(grid, y)?;
    let l = extended(y);
    let s_len = l.len();
    let t_len = grid.frames();
    let mut score = vec![NEG_INF; t_len * s_len];
    let mut back = vec![0usize; t_len * s_len];
    score[0] = grid.log_prob(0, l[0]);
    if s_len > 1 {
        score[1] = grid.log_prob(0, l[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = (t - 1) * s_len;
            let mut best = s;
            let mut best_v = score[prev + s];
            if s >= 1 && score[prev + s - 1] >= best_v && score[prev + s - 1] > NEG_INF {
                best = s - 1;
                best_v = score[prev + s - 1];
            }
            if can_skip(&l, s) && score[prev + s - 2] >= best_v && score[prev + s - 2] > NEG_INF {
                best = s - 2;
                best_v = score[prev + s - 2];
            }
            score[t * s_len + s] = best_v + grid.log_prob(t, l[s]);
            back[t * s_len + s] = best;
        }
    }
    let last = (t_len - 1) * s_len;
    let mut s = s_len - 1;
    if s_len > 1 && score[last + s_len - 2] > score[last + s_len - 1] {
        s = s_len - 2;
    }
    let log_prob = score[last + s];
    let mut states = vec![0; t_len];
    for t in (0..t_len).rev() {
        states[t] = s;
        s = back[t * s_len + s];
    }
    let path: Vec<TokenId> = states.iter().map(|&s| l[s]).collect();
    let mut emit_frames = vec![usize::MAX; y.len()];
    let mut end_frames = vec![0; y.len()];
    for (t, &s) in states.iter().enumerate() {
        if s % 2 == 1 {
            let i = s / 2;
            emit_frames[i] = emit_frames[i].min(t);
            end_frames[i] = t;
        }
    }
    Ok(ForcedAlignment {
        path,
        states,
        emit_frames,
        end_frames,
        log_prob,
    })
}

/// Log-space CTC prefix mass at one frame: alignments of the frames seen so
/// far that collapse to the prefix and end in blank / non-blank.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct CtcPrefixScore {
    pub log_blank: f64,
    pub log_nonblank: f64,
}

impl CtcPrefixScore {
    /// Empty prefix before any frame.
    pub fn empty() -> Self {
        CtcPrefixScore {
            log_blank: 0.0,
            log_nonblank: NEG_INF,
        }
    }

    /// No mass at all.
    pub fn zero() -> Self {
        CtcPrefixScore {
            log_blank: NEG_INF,
            log_nonblank: NEG_INF,
        }
    }

    /// `log p_ctc = log(γ_b + γ_n)`.
    pub fn total(&self) -> f64 {
        log_add(self.log_blank, self.log_nonblank)
    }

    pub fn merge(&self, other: &CtcPrefixScore) -> CtcPrefixScore {
        CtcPrefixScore {
            log_blank: log_add(self.log_blank, other.log_blank),
            log_nonblank: log_add(self.log_nonblank, other.log_nonblank),
        }
    }

    /// The same prefix one frame later, without extension. `last` is the
    /// final token of the prefix.
    pub fn stay(&self, last: Option<TokenId>, log_q: &[f64]) -> CtcPrefixScore {
        CtcPrefixScore {
            log_blank: self.total() + log_q[0],
            log_nonblank: match last {
                Some(c) => self.log_nonblank + log_q[c],
                None => NEG_INF,
            },
        }
    }

    /// Mass flowing into `g + c` at this frame from the parent `g` (whose
    /// score at the previous frame is `self` and final token `last`).
    pub fn extend(&self, last: Option<TokenId>, c: TokenId, log_q: &[f64]) -> CtcPrefixScore {
        let phi = if last == Some(c) {
            self.log_blank
        } else {
            self.total()
        };
        CtcPrefixScore {
            log_blank: NEG_INF,
            log_nonblank: phi + log_q[c],
        }
    }
}

/// One frame of the prefix recursion for `g + c`: `ext_prev` is the score of
/// `g + c` at frame `t - 1`, `parent_prev` that of `g`, `parent_last` the
/// final token of `g`, and `log_q` the log posteriors of frame `t`.
pub fn prefix_score_step(
    ext_prev: &CtcPrefixScore,
    parent_prev: &CtcPrefixScore,
    parent_last: Option<TokenId>,
    c: TokenId,
    log_q: &[f64],
) -> Result<CtcPrefixScore> {
    if c == 0 {
        return Err(AsrError::contract("a prefix cannot be extended by blank"));
    }
    if c >= log_q.len() {
        return Err(AsrError::contract(format!("token {c} outside a {}-class row", log_q.len())));
    }
    Ok(ext_prev.stay(Some(c), log_q).merge(&parent_prev.extend(parent_last, c, log_q)))
}

/// Scores of every prefix `y[..l]` for `l` in `0..=|y|` after the first `t`
/// frames, by the exact recursion.
pub fn prefix_scores(grid: &CtcGrid, y: &[TokenId], t: usize) -> Result<Vec<CtcPrefixScore>> {
    if t > grid.frames() {
        return Err(AsrError::contract(format!("frame {t} beyond a {}-frame grid", grid.frames())));
    }
    let mut cur = vec![CtcPrefixScore::zero(); y.len() + 1];
    cur[0] = CtcPrefixScore::empty();
    for f in 0..t {
        let q = grid.log_row(f);
        let mut next = vec![CtcPrefixScore::zero(); y.len() + 1];
        next[0] = cur[0].stay(None, q);
        for l in 1..=y.len() {
            let parent_last = if l >= 2 { Some(y[l - 2]) } else { None };
            next[l] = prefix_score_step(&cur[l], &cur[l - 1], parent_last, y[l - 1], q)?;
        }
        cur = next;
    }
    Ok(cur)
}

/// `p_ctc(y, t)` of the full sequence `y` after `t` frames.
pub fn prefix_score(grid: &CtcGrid, y: &[TokenId], t: usize) -> Result<CtcPrefixScore> {
    Ok(*prefix_scores(grid, y, t)?.last().expect("at least the empty prefix"))
}
