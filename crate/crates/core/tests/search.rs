//! Fused beam search against exhaustive enumeration and the CTC prefix
//! recursion.

mod common;

use common::*;
use promptstream::ctc::{greedy_decode, prefix_score, CtcGrid};
use promptstream::search::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn unbounded_beam_finds_the_exhaustive_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..100 {
        let (beam, beam_score, best, best_score, runner_up) = beam_vs_exhaustive(&mut rng, case);
        assert!((beam_score - best_score).abs() < 1e-9, "case {case}: {beam_score} vs {best_score}");
        if best_score - runner_up > 1e-9 {
            assert_eq!(beam, best, "case {case}");
        }
    }
}

#[test]
fn beam_prefix_scores_match_the_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20 {
        let (m, p32) = tiny_model(3, 2, seed);
        let params = p32.cast::<f64>();
        let frames = rng.random_range(2..6);
        let grid = random_grid(&mut rng, frames, 4);
        let session = m.decoder.session(&params).unwrap();
        let config = SearchConfig {
            beam: 4usize.pow(frames as u32),
            prefilter: None,
            ..SearchConfig::default()
        };
        let search = FusionSearch::new(&m.decoder, &params, config).unwrap();
        let mut beam = vec![FusionHypothesis::root(session)];
        for t in 0..frames {
            beam = search.beam_step(beam, grid.log_row(t)).unwrap();
            for h in &beam {
                let want = prefix_score(&grid, &h.tokens, t + 1).unwrap();
                assert!(rel_err(h.ctc.log_blank.exp(), want.log_blank.exp()) < 1e-6);
                assert!(rel_err(h.ctc.log_nonblank.exp(), want.log_nonblank.exp()) < 1e-6);
                assert!(h.scored() <= h.tokens.len());
            }
        }
    }
}

#[test]
fn one_hot_grid_gives_the_greedy_transcript() {
    let (m, p32) = tiny_model(3, 2, 3);
    let params = p32.cast::<f64>();
    let rows = [[0.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    let grid = CtcGrid::from_probs(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let search = FusionSearch::new(&m.decoder, &params, SearchConfig::default()).unwrap();
    let best = run_search(&search, &m.decoder.session(&params).unwrap(), &grid);
    assert_eq!(best[0].tokens, greedy_decode(&grid).1);
    assert_eq!(best[0].tokens, vec![1, 1, 3]);
}

#[test]
fn scaling_both_weights_keeps_the_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..20 {
        let (m, p32) = tiny_model(3, 2, seed);
        let params = p32.cast::<f64>();
        let grid = random_grid(&mut rng, 6, 4);
        let chunk = random_chunk(&mut rng, 1, 3, m.decoder.config.model_dim);
        let mut session = m.decoder.session(&params).unwrap();
        m.decoder.ingest_prompts(&params, &mut session, &chunk).unwrap();
        let run = |k: f64| {
            let mut config = SearchConfig::default();
            config.weights.ctc *= k;
            config.weights.dec *= k;
            let s = FusionSearch::new(&m.decoder, &params, config).unwrap();
            run_search(&s, &session, &grid)
        };
        let base = run(1.0);
        for k in [0.5, 3.0, 10.0] {
            let scaled = run(k);
            let order: Vec<_> = scaled.iter().map(|h| &h.tokens).collect();
            assert_eq!(order, base.iter().map(|h| &h.tokens).collect::<Vec<_>>());
            for (a, b) in scaled.iter().zip(&base) {
                assert!((a.score - k * b.score).abs() <= 1e-9 * b.score.abs().max(1.0));
            }
        }
    }
}

#[test]
fn pure_decoder_on_a_flat_grid_is_greedy_continuation() {
    let (m, p32) = tiny_model(4, 2, 5);
    let params = p32.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let chunk = random_chunk(&mut rng, 1, 4, m.decoder.config.model_dim);
    let mut session = m.decoder.session(&params).unwrap();
    m.decoder.ingest_prompts(&params, &mut session, &chunk).unwrap();
    let config = SearchConfig {
        beam: 1,
        prefilter: None,
        weights: FusionWeights {
            ctc: 0.0,
            dec: 1.0,
            lm: 0.0,
            length_penalty: 100.0,
        },
    };
    let search = FusionSearch::new(&m.decoder, &params, config).unwrap();
    let frames = 6;
    let best = run_search(&search, &session, &CtcGrid::uniform(frames, 5));

    // Greedy continuation over content tokens from one teacher-forced pass
    // per step.
    let prompts = chunk.vectors();
    let mut tokens = vec![m.sos()];
    for _ in 0..frames {
        let dists = m.decoder.batch_forward(&params, Some(&prompts), &tokens, None).unwrap();
        let d = dists.last().unwrap();
        let next = (1..=4).max_by(|&a, &b| d.log_prob(a).total_cmp(&d.log_prob(b)).then(b.cmp(&a))).unwrap();
        tokens.push(next);
    }
    assert_eq!(best[0].tokens, tokens[1..]);
}

#[test]
fn fusion_score_is_the_weighted_sum() {
    let w = FusionWeights {
        ctc: 0.4,
        dec: 0.6,
        lm: 0.4,
        length_penalty: 0.5,
    };
    let s = fusion_score(-3.0, -2.0, Some(-5.0), 4, &w);
    assert!((s - (0.4 * -3.0 + 0.6 * -2.0 + 0.4 * -5.0 + 0.5 * 4.0)).abs() < 1e-12);
    let ctc_only = FusionWeights {
        ctc: 1.0,
        dec: 0.0,
        ..w
    };
    assert_eq!(fusion_score(-1.5, f64::NEG_INFINITY, None, 0, &ctc_only), -1.5);
    assert_eq!(DEFAULT_LM_WEIGHT, 0.4);
    assert_eq!((FusionWeights::default().ctc, FusionWeights::default().dec), (0.4, 0.6));
}

struct Bigram;

impl LanguageModel for Bigram {
    fn log_prob(&self, history: &[usize], next: usize) -> f64 {
        if history.last() == Some(&next) {
            -0.1
        } else {
            -3.0
        }
    }
}

#[test]
fn external_lm_enters_with_its_weight() {
    let (m, p32) = tiny_model(3, 2, 7);
    let params = p32.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = random_grid(&mut rng, 4, 4);
    let session = m.decoder.session(&params).unwrap();
    let mut config = SearchConfig {
        beam: 64,
        prefilter: None,
        ..SearchConfig::default()
    };
    let plain = run_search(&FusionSearch::new(&m.decoder, &params, config.clone()).unwrap(), &session, &grid);
    // Zero LM weight leaves the search unchanged.
    let silent = run_search(&FusionSearch::new(&m.decoder, &params, config.clone()).unwrap().with_lm(&Bigram), &session, &grid);
    assert_eq!(plain, silent);
    config.weights.lm = DEFAULT_LM_WEIGHT;
    let fused = run_search(&FusionSearch::new(&m.decoder, &params, config).unwrap().with_lm(&Bigram), &session, &grid);
    for h in &fused {
        let mut lm = 0.0;
        let mut hist = Vec::new();
        for &c in h.tokens.iter().chain([&m.eos()]) {
            lm += Bigram.log_prob(&hist, c);
            hist.push(c);
        }
        let want = 0.4 * h.ctc_logp + 0.6 * h.dec_logp + DEFAULT_LM_WEIGHT * lm;
        assert!((h.score - want).abs() < 1e-9);
    }
}
