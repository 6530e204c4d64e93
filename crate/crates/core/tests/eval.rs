//! Error-rate scoring, report aggregation and the experiment report schema.

mod common;

use common::*;
use promptstream::corpus::{generate_corpus, save_corpus, CorpusConfig};
use promptstream::eval::*;
use promptstream::experiment::*;
use promptstream::prompts::PromptVariant;
use promptstream::stream::Distribution;
use promptstream::train::{Scheme, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tokens(max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 0..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn edit_count_equals_the_distance_oracle(r in tokens(12), h in tokens(12)) {
        let c = align(&r, &h);
        prop_assert_eq!(c.errors(), edit_distance(&r, &h));
        prop_assert_eq!(c.reference_tokens, r.len());
        // Every reference token is matched, substituted or deleted.
        prop_assert!(c.substitutions + c.deletions <= r.len());
        prop_assert_eq!(r.len() + c.insertions - c.deletions, h.len());
    }

    #[test]
    fn distance_is_symmetric(r in tokens(10), h in tokens(10)) {
        let (a, b) = (align(&r, &h), align(&h, &r));
        prop_assert_eq!(a.errors(), b.errors());
        prop_assert_eq!(a.substitutions + a.insertions + a.deletions, b.substitutions + b.deletions + b.insertions);
    }
}

#[test]
fn corpus_rate_is_the_ratio_of_summed_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for _ in 0..50 {
        let (a, b) = (rng.random_range(0..10), rng.random_range(0..10));
        refs.push(random_labels(&mut rng, a, 4));
        hyps.push(random_labels(&mut rng, b, 4));
    }
    let total = error_rate(&refs, &hyps).unwrap();
    let edits: usize = refs.iter().zip(&hyps).map(|(r, h)| edit_distance(r, h)).sum();
    let words: usize = refs.iter().map(Vec::len).sum();
    assert_eq!(total.counts.errors(), edits);
    assert_eq!(total.counts.reference_tokens, words);
    assert!((total.rate - edits as f64 / words as f64).abs() < 1e-15);

    let mut sum = EditCounts::default();
    for (r, h) in refs.iter().zip(&hyps) {
        sum.add(&error_rate(std::slice::from_ref(r), std::slice::from_ref(h)).unwrap().counts);
    }
    assert_eq!(sum, total.counts);
    assert!(error_rate(&refs, &hyps[1..]).is_err());
    assert_eq!(error_rate(&[vec![]], &[vec![]]).unwrap().rate, 0.0);
}

#[test]
fn summaries_rescore_and_quantiles() {
    let d = |id: &str, r: Vec<usize>, h: Vec<usize>, rtf: f64, ep: f64| UtteranceDecode {
        utterance_id: id.into(),
        hypothesis: h,
        reference: r,
        emission_times: Vec::new(),
        rtf,
        ep_latency: ep,
        prompts: 4,
        ctc_prompts: 2,
        frames: 10,
    };
    let decodes = vec![
        d("a", vec![1, 2, 3], vec![1, 2, 3], 0.1, 0.02),
        d("b", vec![1, 2], vec![2], 0.3, 0.04),
        d("c", vec![4, 4, 4, 4, 4], vec![4, 1, 4, 4, 4, 2], 0.2, 0.03),
    ];
    let s = summarize(&decodes).unwrap();
    assert_eq!(s.counts, rescore(&decodes));
    assert_eq!(s.counts.errors(), 3);
    assert!((s.wer - 3.0 / 10.0).abs() < 1e-15);
    assert_eq!((s.rtf_median, s.ep50), (0.2, 0.03));
    assert_eq!((s.mean_ctc_prompts, s.mean_frames), (2.0, 10.0));
    assert!(summarize(&[]).is_err());

    let q = Distribution::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
    assert_eq!((q.median, q.mean, q.max), (2.5, 2.5, 4.0));
    assert!((q.p90 - 3.7).abs() < 1e-12);
    assert!(Distribution::of(&[]).is_none());
}

#[test]
fn experiment_report_matches_its_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        content_tokens: 4,
        feature_dim: 3,
        transcript_min: 2,
        transcript_max: 4,
        train: 6,
        dev: 2,
        test: 3,
        subsample: 2,
        ..CorpusConfig::default()
    };
    save_corpus(&generate_corpus(&cfg, 1).unwrap(), &dir.path().join("data")).unwrap();
    let (m, params) = tiny_model(4, 3, 2);
    m.save(&params, &dir.path().join("pre")).unwrap();
    let manifest = ExperimentManifest {
        corpus: "data".into(),
        pretrained: "pre".into(),
        output: "out".into(),
        schemes: vec![Scheme::Prefix, Scheme::Full],
        variants: vec![PromptVariant::Both],
        seeds: vec![1, 2],
        finetune: TrainConfig {
            epochs: 1,
            batch_size: 3,
            max_steps: Some(1),
            dev_limit: Some(1),
            ..TrainConfig::finetune_default(Scheme::Prefix)
        },
        test_limit: Some(2),
        ..ExperimentManifest::default()
    }
    .rebase(dir.path());
    let mut lines = Vec::new();
    let report = run_experiment(&manifest, |l| lines.push(l.to_string())).unwrap();
    assert_eq!(report.test_utterances, 2);
    assert_eq!(report.cells.len(), 4);
    assert_eq!(report.training.len(), 4);
    assert_eq!(lines.len(), 4 * 3);
    let cell = report.cell(Scheme::Prefix, PromptVariant::Both, DecodeMode::Stream).unwrap();
    let mean = cell.seeds.iter().map(|s| s.wer).sum::<f64>() / 2.0;
    assert!((cell.wer - mean).abs() < 1e-15);
    for run in &report.training {
        assert!(run.checkpoint.join(promptstream::model::CONFIG_FILE).exists());
    }
    assert_eq!(report.table().lines().count(), 5);

    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let value = serde_json::to_value(&report).unwrap();
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    let mut bad = value.clone();
    bad["cells"][0]["mode"] = "offline".into();
    assert!(!validator.is_valid(&bad));
    let mut bad = value;
    bad.as_object_mut().unwrap().remove("training");
    assert!(!validator.is_valid(&bad));
}

#[test]
fn partial_configs_keep_section_defaults() {
    use promptstream::train::LrSchedule;
    let cfg: PipelineConfig = from_json_over_default(r#"{"finetune": {"epochs": 1}, "search": {"beam": 3}}"#).unwrap();
    assert_eq!(cfg.finetune.epochs, 1);
    assert_eq!(cfg.finetune.schedule, LrSchedule::Constant { lr: 0.0005 });
    assert_eq!(cfg.encoder_training, PipelineConfig::default().encoder_training);
    assert_eq!((cfg.search.beam, cfg.search.prefilter), (3, Some(4)));

    let cfg: PipelineConfig =
        from_json_over_default(r#"{"finetune": {"schedule": {"kind": "noam", "peak": 0.001, "warmup": 10}}}"#).unwrap();
    assert_eq!(cfg.finetune.schedule, LrSchedule::Noam { peak: 0.001, warmup: 10 });

    let m: ExperimentManifest = from_json_over_default(r#"{"seeds": [7]}"#).unwrap();
    assert_eq!(m.seeds, vec![7]);
    assert_eq!(m.finetune, TrainConfig::finetune_default(Scheme::Prefix));

    for bad in ["[1, 2]", "{\"search\": {\"beam\": \"wide\"}}", "{"] {
        assert!(matches!(from_json_over_default::<PipelineConfig>(bad), Err(promptstream::AsrError::Config(_))), "{bad}");
    }
}
