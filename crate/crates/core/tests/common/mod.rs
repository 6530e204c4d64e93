//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use promptstream::ctc::CtcGrid;
use promptstream::decoder::DecoderConfig;
use promptstream::encoder::EncoderConfig;
use promptstream::model::{AsrModel, ModelConfig};
use promptstream::nn::Init;
use promptstream::prompts::{PromptChunk, PromptConfig};
use promptstream::TokenId;
use promptstream_nd::gradcheck::{check_gradients, GradCheckReport};
use promptstream_nd::{Mask, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random posterior grid with rows drawn from a flattened Dirichlet-like
/// distribution (no zero entries).
pub fn random_grid(rng: &mut impl Rng, frames: usize, classes: usize) -> CtcGrid {
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| {
            let w: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0f64).powi(2)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect();
    CtcGrid::from_probs(&rows).unwrap()
}

pub fn random_labels(rng: &mut impl Rng, len: usize, content: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(1..=content)).collect()
}

/// Every frame-level path of length `t` over `classes` labels.
pub fn all_paths(t: usize, classes: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = classes.pow(t as u32);
    (0..total).map(move |mut n| {
        let mut p = vec![0; t];
        for slot in p.iter_mut() {
            *slot = n % classes;
            n /= classes;
        }
        p
    })
}

/// Merge repeats, then drop blanks, written independently of the library.
pub fn squash(path: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for (i, &c) in path.iter().enumerate() {
        if c != 0 && (i == 0 || path[i - 1] != c) {
            out.push(c);
        }
    }
    out
}

pub fn path_prob(grid: &CtcGrid, path: &[usize]) -> f64 {
    path.iter().enumerate().map(|(t, &c)| grid.log_prob(t, c).exp()).product()
}

/// Probability mass of alignments of the first `t` frames collapsing to
/// `y`, split by whether the last frame is blank.
pub fn brute_prefix(grid: &CtcGrid, y: &[usize], t: usize) -> (f64, f64) {
    let (mut blank, mut nonblank) = (0.0, 0.0);
    if t == 0 {
        return (if y.is_empty() { 1.0 } else { 0.0 }, 0.0);
    }
    for p in all_paths(t, grid.classes()) {
        if squash(&p) == y {
            let pr = path_prob(grid, &p);
            if p[t - 1] == 0 {
                blank += pr;
            } else {
                nonblank += pr;
            }
        }
    }
    (blank, nonblank)
}

/// Best single alignment probability for `y` over the whole grid.
pub fn brute_viterbi(grid: &CtcGrid, y: &[usize]) -> f64 {
    all_paths(grid.frames(), grid.classes())
        .filter(|p| squash(p) == y)
        .map(|p| path_prob(grid, &p))
        .fold(0.0, f64::max)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

/// Unit-cost edit distance by the textbook recursion over full table rows.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// A small joint model for structural tests.
pub fn tiny_config(content: usize, feature_dim: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        content_tokens: content,
        encoder: EncoderConfig {
            input_dim: feature_dim,
            model_dim: 16,
            heads: 2,
            ff_dim: 32,
            layers: 2,
            block_frames: 4,
            subsample: 2,
            conv_kernel: 3,
        },
        decoder: DecoderConfig {
            content_tokens: content,
            model_dim: 16,
            heads: 2,
            ff_dim: 32,
            layers: 2,
            max_prompts: 128,
            max_tokens: 32,
        },
        prompts: PromptConfig::default(),
        init_seed: seed,
    }
}

pub fn tiny_model(content: usize, feature_dim: usize, seed: u64) -> (AsrModel, ParamStore<f32>) {
    AsrModel::new(&tiny_config(content, feature_dim, seed)).unwrap()
}

/// Random features `[frames, dim]`.
pub fn random_features(rng: &mut impl Rng, frames: usize, dim: usize) -> promptstream_nd::Tensor<f32> {
    let data = (0..frames * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    promptstream_nd::Tensor::matrix(frames, dim, data).unwrap()
}

/// Scales every parameter whose name starts with `prefix`.
pub fn scale_params(store: &mut ParamStore<f32>, prefix: &str, s: f32) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v *= s;
        }
    }
}

/// Every transcript over `content` labels with at most `max_len` tokens.
pub fn all_transcripts(content: usize, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for y in &frontier {
            for c in 1..=content {
                let mut z: Vec<TokenId> = y.clone();
                z.push(c);
                next.push(z);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Random prompt chunk of `n` rows for block `block`.
pub fn random_chunk(rng: &mut impl Rng, block: usize, n: usize, dim: usize) -> promptstream::prompts::PromptChunk<f64> {
    let v = promptstream_nd::Tensor::matrix(n, dim, (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    promptstream::prompts::assemble_chunk(block, v, (0..n).collect(), None, false)
}

/// Fused objective of every transcript that fits in the grid, scored from
/// the full CTC loss and one teacher-forced decoder pass with all prompts
/// visible. Sorted best first.
pub fn exhaustive_fused(
    model: &AsrModel,
    params: &ParamStore<f64>,
    prompts: Option<&promptstream_nd::Tensor<f64>>,
    grid: &CtcGrid,
    w: &promptstream::search::FusionWeights,
) -> Vec<(f64, Vec<TokenId>)> {
    let mut scored: Vec<(f64, Vec<TokenId>)> = all_transcripts(grid.classes() - 1, grid.frames())
        .into_iter()
        .filter_map(|y| {
            let ctc = -promptstream::ctc::ctc_loss(grid, &y).ok()?;
            if !ctc.is_finite() {
                return None;
            }
            let mut tokens = vec![model.sos()];
            tokens.extend(&y);
            let dists = model.decoder.batch_forward(params, prompts, &tokens, None).unwrap();
            let dec = y.iter().enumerate().map(|(i, &c)| dists[i].log_prob(c)).sum::<f64>()
                + dists[y.len()].log_prob(model.eos());
            Some((w.ctc * ctc + w.dec * dec + w.length_penalty * y.len() as f64, y))
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    scored
}

/// Runs the fused beam over every frame of `grid` from a session holding
/// `session`'s prompts, then finalizes.
pub fn run_search(
    search: &promptstream::search::FusionSearch<'_, f64>,
    session: &promptstream::decoder::DecoderSession<f64>,
    grid: &CtcGrid,
) -> Vec<promptstream::search::FinalHypothesis> {
    let mut beam = vec![promptstream::search::FusionHypothesis::root(session.clone())];
    for t in 0..grid.frames() {
        beam = search.beam_step(beam, grid.log_row(t)).unwrap();
    }
    search.finalize(&mut beam).unwrap()
}

/// One beam-versus-exhaustive instance: `(beam best, exhaustive best,
/// exhaustive runner-up score)`.
pub fn beam_vs_exhaustive(rng: &mut impl Rng, seed: u64) -> (Vec<TokenId>, f64, Vec<TokenId>, f64, f64) {
    use promptstream::search::{FusionSearch, SearchConfig};
    let content = rng.random_range(1..=3);
    let frames = rng.random_range(1..=5);
    let (m, p32) = tiny_model(content, 2, seed);
    let params = p32.cast::<f64>();
    let grid = random_grid(rng, frames, content + 1);
    let n = rng.random_range(0..4);
    let chunk = random_chunk(rng, 1, n, m.decoder.config.model_dim);
    let mut session = m.decoder.session(&params).unwrap();
    m.decoder.ingest_prompts(&params, &mut session, &chunk).unwrap();
    let config = SearchConfig {
        beam: (content + 1).pow(frames as u32),
        prefilter: None,
        ..SearchConfig::default()
    };
    let w = config.weights;
    let search = FusionSearch::new(&m.decoder, &params, config).unwrap();
    let best = run_search(&search, &session, &grid).swap_remove(0);
    let prompts = (n > 0).then(|| chunk.vectors());
    let ex = exhaustive_fused(&m, &params, prompts.as_ref(), &grid, &w);
    let runner_up = ex.get(1).map_or(f64::NEG_INFINITY, |e| e.0);
    (best.tokens, best.score, ex[0].1.clone(), ex[0].0, runner_up)
}

pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;

pub fn random64(rng: &mut impl Rng, rows: usize, cols: usize) -> promptstream_nd::Tensor<f64> {
    promptstream_nd::Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar `Σ x ⊙ R` for a fixed random `R`.
pub fn reduce(tape: &Tape<f64>, x: Var, seed: u64) -> Var {
    let s = tape.shape(x);
    let r = random64(&mut ChaCha8Rng::seed_from_u64(seed), s[0], s[1]);
    let p = tape.mul(x, tape.constant(r)).unwrap();
    tape.sum(p)
}

/// Central differences in f64 on a copy of `store`.
pub fn gradcheck(store: &ParamStore<f32>, f: impl Fn(&Tape<f64>) -> Var, per_param: usize) -> GradCheckReport {
    check_gradients(&store.cast::<f64>(), |t| Ok(f(t)), GRAD_STEP, per_param).unwrap()
}

fn build<L>(f: impl FnOnce(&mut Init) -> L) -> (L, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = f(&mut Init {
        store: &mut store,
        rng: &mut rng,
    });
    (layer, store)
}

pub type Checks = Vec<(&'static str, GradCheckReport)>;

pub fn grad_layers() -> Checks {
    use promptstream::nn::{FeedForward, LayerNorm, Linear, SelfAttention};
    let x = random64(&mut ChaCha8Rng::seed_from_u64(1), 5, 6);
    let (lin, s) = build(|i| Linear::new(i, "lin", 6, 4));
    let mut out = vec![("linear", gradcheck(&s, |t| reduce(t, lin.forward(t, t.constant(x.clone())).unwrap(), 2), 64))];
    let (ln, mut s) = build(|i| LayerNorm::new(i, "ln", 6));
    // Move the affine terms off their constant initial values.
    for id in s.ids().collect::<Vec<_>>() {
        let v = s.get(id).map(|v| v + 0.3);
        s.set(id, v).unwrap();
    }
    out.push(("layer norm", gradcheck(&s, |t| reduce(t, ln.forward(t, t.constant(x.clone())).unwrap(), 3), 64)));
    let (ff, s) = build(|i| FeedForward::new(i, "ff", 6, 12));
    out.push(("feed-forward", gradcheck(&s, |t| reduce(t, ff.forward(t, t.constant(x.clone())).unwrap(), 4), 64)));
    let x = random64(&mut ChaCha8Rng::seed_from_u64(7), 5, 8);
    let (att, s) = build(|i| SelfAttention::new(i, "att", 8, 2));
    let mask = Mask::from_fn(5, 5, |r, c| c <= r || c == 4);
    out.push((
        "masked attention",
        gradcheck(&s, |t| reduce(t, att.forward(t, t.constant(x.clone()), &mask).unwrap(), 5), 64),
    ));
    out
}

pub fn grad_model() -> Checks {
    let (m, store) = tiny_model(3, 5, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let feats = random_features(&mut rng, 19, 5).cast::<f64>();
    let plan = m.plan(19).unwrap();
    let encoder = gradcheck(
        &store,
        |t| {
            let (h, cs) = m.encoder.encode_utterance_tape(t, &feats, &plan).unwrap();
            let c = t.concat_rows(&cs).unwrap();
            let all = t.concat_rows(&[h, c]).unwrap();
            reduce(t, all, 11)
        },
        6,
    );
    let ctc = gradcheck(
        &store,
        |t| {
            let (h, _) = m.encoder.encode_utterance_tape(t, &feats, &plan).unwrap();
            let logits = m.ctc.logits_tape(t, h).unwrap();
            promptstream::ctc::ctc_loss_tape(t, logits, &[1, 3, 3]).unwrap()
        },
        6,
    );
    let greedy = vec![0, 1, 0, 2, 2, 0, 0, 3, 1, 0];
    let decoder = gradcheck(
        &store,
        |t| {
            let (h, cs) = m.encoder.encode_utterance_tape(t, &feats, &plan).unwrap();
            let layout = m.projector.build_tape(t, h, &cs, &greedy, &plan).unwrap();
            let rows = layout.len();
            let mask = Mask::from_fn(4, rows, |i, j| (i + j) % 3 != 0);
            let logits = m
                .decoder
                .batch_forward_tape(t, layout.prompts, &[m.sos(), 2, 1, 3], Some(&mask))
                .unwrap();
            t.softmax_cross_entropy(logits, &[1, 0, 2, 3]).unwrap()
        },
        6,
    );
    vec![("blockwise encoder", encoder), ("CTC head and loss", ctc), ("prompts and decoder", decoder)]
}

pub fn grad_finetune() -> Checks {
    use promptstream::train::{finetune_loss, Scheme};
    let (m, store) = tiny_model(3, 5, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let feats = random_features(&mut rng, 21, 5);
    let u = promptstream::corpus::Utterance {
        utterance_id: "g".into(),
        features: feats.clone(),
        transcript: vec![2, 1, 3],
        durations: vec![7, 7, 7],
    };
    let f64feats = feats.cast::<f64>();
    [("fine-tune full", Scheme::Full), ("fine-tune forced-align", Scheme::ForcedAlign), ("fine-tune prefix", Scheme::Prefix)]
        .into_iter()
        .map(|(name, scheme)| {
            let r = gradcheck(
                &store,
                |t| {
                    let mut r = ChaCha8Rng::seed_from_u64(99);
                    finetune_loss(&m, t, &u, &f64feats, scheme, 0.3, &mut r).unwrap().expect("feasible sample")
                },
                5,
            );
            (name, r)
        })
        .collect()
}

fn stack_chunks(chunks: &[PromptChunk<f32>], dim: usize) -> promptstream_nd::Tensor<f32> {
    let mut data = Vec::new();
    let mut rows = 0;
    for c in chunks {
        data.extend_from_slice(c.vectors().data());
        rows += c.len();
    }
    promptstream_nd::Tensor::matrix(rows, dim, data).unwrap()
}

/// One random interleaving of prompt ingestion and token scoring in a
/// session, replayed through the masked batch forward. Returns the largest
/// log-probability difference, or `None` when no token was scored.
pub fn interleaving_case(model: &AsrModel, params: &ParamStore<f32>, rng: &mut impl Rng) -> Option<f64> {
    let dec = &model.decoder;
    let dim = dec.config.model_dim;
    let mut s = dec.session(params).unwrap();
    let mut chunks = Vec::new();
    let mut tokens = vec![model.sos()];
    let mut visible = Vec::new();
    let mut dists = Vec::new();
    let mut fed = 0;
    for _ in 0..rng.random_range(2..10) {
        if rng.random_bool(0.4) {
            let n = rng.random_range(0..4);
            let v = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let v = promptstream_nd::Tensor::matrix(n, dim, v).unwrap();
            let c = promptstream::prompts::assemble_chunk(chunks.len() + 1, v, (0..n).collect(), None, false);
            dec.ingest_prompts(params, &mut s, &c).unwrap();
            chunks.push(c);
        } else {
            if fed > 0 {
                tokens.push(rng.random_range(1..=model.config.content_tokens));
            }
            visible.push(s.prompt_count());
            dists.push(dec.score_next(params, &mut s, tokens[fed]).unwrap());
            fed += 1;
        }
    }
    if dists.is_empty() {
        return None;
    }
    let prompts = stack_chunks(&chunks, dim);
    let mask = Mask::from_fn(fed, prompts.rows(), |i, j| j < visible[i]);
    let batch = dec.batch_forward(params, Some(&prompts), &tokens[..fed], Some(&mask)).unwrap();
    let mut worst = 0.0f64;
    for (a, b) in dists.iter().zip(&batch) {
        for (x, y) in a.log_probs.iter().zip(&b.log_probs) {
            worst = worst.max((x - y).abs());
        }
    }
    Some(worst)
}

/// Corrupts every input frame after a random block boundary and returns the
/// largest change of the encoder output up to that boundary, or `None` for
/// single-block utterances. Panics if earlier contexts move or the later
/// outputs do not.
pub fn causality_case(model: &AsrModel, params: &ParamStore<f32>, rng: &mut impl Rng) -> Option<f32> {
    let dim = model.config.encoder.input_dim;
    let frames = rng.random_range(10..60);
    let plan = model.plan(frames).unwrap();
    if plan.blocks() < 2 {
        return None;
    }
    let b = rng.random_range(1..plan.blocks());
    let feats = random_features(rng, frames, dim);
    let mut corrupt = feats.clone();
    for v in &mut corrupt.data_mut()[plan.input_end(b) * dim..] {
        *v = rng.random_range(-50.0..50.0);
    }
    let a = model.encoder.encode_utterance(params, &feats, &plan).unwrap();
    let c = model.encoder.encode_utterance(params, &corrupt, &plan).unwrap();
    let rows = plan.sub_end(b) * a.h.cols();
    assert_eq!(a.contexts[..b], c.contexts[..b]);
    assert_ne!(a.h.data()[rows..], c.h.data()[rows..]);
    Some(
        a.h.data()[..rows]
            .iter()
            .zip(&c.h.data()[..rows])
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max),
    )
}

/// Single-block streaming and batch decodes of random features; `true`
/// when hypothesis and score agree exactly.
pub fn single_block_case(model: &AsrModel, params: &ParamStore<f32>, rng: &mut impl Rng) -> bool {
    use promptstream::search::SearchConfig;
    use promptstream::stream::{batch_decode, stream_decode, DEFAULT_FRAME_PERIOD};
    let frames = rng.random_range(6..40);
    let feats = random_features(rng, frames, model.config.encoder.input_dim);
    let plan = promptstream::encoder::BlockPlan::single(frames, model.config.encoder.subsample).unwrap();
    let search = SearchConfig::default();
    let s = stream_decode(model, params, &feats, &plan, &search, DEFAULT_FRAME_PERIOD).unwrap();
    let b = batch_decode(model, params, &feats, &plan, &search).unwrap();
    s.hypothesis == b.hypothesis && s.summary.score == b.summary.score
}
