//! Pipeline configuration, corpus-level decoding and the experiment grid
//! (training scheme × prompt variant × decode mode).

use crate::corpus::{
    generate_corpus, generate_text_corpus, load_corpus, load_text_corpus, save_corpus, save_text_corpus, Corpus,
    CorpusConfig, TextCorpusConfig, Utterance,
};
use crate::error::{AsrError, Result};
use crate::eval::{align, error_rate, EditCounts};
use crate::model::{AsrModel, ModelConfig};
use crate::prompts::{PromptConfig, PromptVariant};
use crate::search::SearchConfig;
use crate::stream::{batch_decode, stream_decode, Distribution, DEFAULT_FRAME_PERIOD};
use crate::train::{finetune, Scheme, TrainConfig, TrainReport};
use crate::vocab::TokenId;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

pub const TEXT_TRAIN_FILE: &str = "text_train.jsonl";
pub const TEXT_DEV_FILE: &str = "text_dev.jsonl";

/// JSON schema of [`ExperimentReport`].
pub const REPORT_SCHEMA: &str = include_str!("../schemas/experiment_report.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub corpus: CorpusConfig,
    pub text_train_sentences: usize,
    pub text_dev_sentences: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: CorpusConfig::default(),
            text_train_sentences: 10_000,
            text_dev_sentences: 500,
        }
    }
}

/// Acoustic corpus plus text train/dev sets for LM pretraining.
pub struct DataSet {
    pub corpus: Corpus,
    pub text_train: Vec<Vec<TokenId>>,
    pub text_dev: Vec<Vec<TokenId>>,
}

pub fn generate_data(cfg: &DataConfig, seed: u64) -> Result<DataSet> {
    let text = |n, s| generate_text_corpus(&TextCorpusConfig::matching(&cfg.corpus, n), s);
    Ok(DataSet {
        corpus: generate_corpus(&cfg.corpus, seed)?,
        text_train: text(cfg.text_train_sentences, seed.wrapping_add(1))?,
        text_dev: text(cfg.text_dev_sentences, seed.wrapping_add(2))?,
    })
}

pub fn save_data(data: &DataSet, dir: &Path) -> Result<()> {
    save_corpus(&data.corpus, dir)?;
    save_text_corpus(&data.text_train, &dir.join(TEXT_TRAIN_FILE))?;
    save_text_corpus(&data.text_dev, &dir.join(TEXT_DEV_FILE))
}

pub fn load_data(dir: &Path) -> Result<DataSet> {
    Ok(DataSet {
        corpus: load_corpus(dir)?,
        text_train: load_text_corpus(&dir.join(TEXT_TRAIN_FILE))?,
        text_dev: load_text_corpus(&dir.join(TEXT_DEV_FILE))?,
    })
}

/// Every tunable of the pipeline; the `--config` file deserialises into this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    /// Vocabulary size and feature dimension are taken from the corpus.
    pub model: ModelConfig,
    pub encoder_training: TrainConfig,
    pub lm_training: TrainConfig,
    pub finetune: TrainConfig,
    pub search: SearchConfig,
    pub frame_period: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            encoder_training: TrainConfig::encoder_default(),
            lm_training: TrainConfig::lm_default(),
            finetune: TrainConfig::finetune_default(Scheme::Prefix),
            search: SearchConfig::default(),
            frame_period: DEFAULT_FRAME_PERIOD,
        }
    }
}

/// Deserializes `text` over `T::default()`: nested objects are merged key by
/// key, so a partial section keeps the defaults of that section rather than
/// those of its type.
pub fn from_json_over_default<T: Default + Serialize + DeserializeOwned>(text: &str) -> Result<T> {
    fn merge(base: &mut Value, over: Value) {
        match (base, over) {
            // A different enum variant replaces the whole object.
            (Value::Object(b), Value::Object(o)) if o.get("kind").is_none_or(|k| b.get("kind") == Some(k)) => {
                for (k, v) in o {
                    match b.get_mut(&k) {
                        Some(slot) => merge(slot, v),
                        None => {
                            b.insert(k, v);
                        }
                    }
                }
            }
            (slot, v) => *slot = v,
        }
    }
    let over: Value = serde_json::from_str(text).map_err(|e| AsrError::config(e.to_string()))?;
    if !over.is_object() {
        return Err(AsrError::config("configuration must be a JSON object"));
    }
    let mut base = serde_json::to_value(T::default())?;
    merge(&mut base, over);
    serde_json::from_value(base).map_err(|e| AsrError::config(e.to_string()))
}

impl PipelineConfig {
    pub fn model_config(&self, corpus: &Corpus) -> ModelConfig {
        let mut m = self.model.clone();
        m.content_tokens = corpus.vocab.content_size();
        m.decoder.content_tokens = m.content_tokens;
        m.encoder.input_dim = corpus.feature_dim;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.data.corpus.validate()?;
        self.model.encoder.validate()?;
        self.model.decoder.validate()?;
        for t in [&self.encoder_training, &self.lm_training, &self.finetune] {
            t.validate()?;
        }
        self.search.validate()?;
        if self.frame_period.is_nan() || self.frame_period <= 0.0 {
            return Err(AsrError::config("frame period must be positive"));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Stream,
    Batch,
}

impl DecodeMode {
    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Stream => "stream",
            DecodeMode::Batch => "batch",
        }
    }
}

impl FromStr for DecodeMode {
    type Err = AsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stream" => Ok(DecodeMode::Stream),
            "batch" => Ok(DecodeMode::Batch),
            other => Err(AsrError::config(format!("unknown decode mode {other:?} (stream|batch)"))),
        }
    }
}

/// One line of `decode` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceDecode {
    pub utterance_id: String,
    pub hypothesis: Vec<TokenId>,
    pub reference: Vec<TokenId>,
    /// Simulated-clock time of each emitted token.
    pub emission_times: Vec<f64>,
    pub rtf: f64,
    pub ep_latency: f64,
    pub prompts: usize,
    pub ctc_prompts: usize,
    /// Subsampled frames `τ_B`.
    pub frames: usize,
}

/// Decodes utterances in parallel; output order follows the input.
pub fn decode_utterances(
    model: &AsrModel,
    params: &promptstream_nd::ParamStore<f32>,
    utts: &[Utterance],
    mode: DecodeMode,
    search: &SearchConfig,
    frame_period: f64,
) -> Result<Vec<UtteranceDecode>> {
    search.validate()?;
    utts.par_iter()
        .map(|u| {
            let plan = model.plan(u.frames())?;
            let audio = u.frames() as f64 * frame_period;
            let base = UtteranceDecode {
                utterance_id: u.utterance_id.clone(),
                hypothesis: Vec::new(),
                reference: u.transcript.clone(),
                emission_times: Vec::new(),
                rtf: 0.0,
                ep_latency: 0.0,
                prompts: 0,
                ctc_prompts: 0,
                frames: plan.sub_frames(),
            };
            match mode {
                DecodeMode::Stream => {
                    let r = stream_decode(model, params, &u.features, &plan, search, frame_period)?;
                    Ok(UtteranceDecode {
                        hypothesis: r.hypothesis,
                        emission_times: r.timeline.iter().map(|e| e.time).collect(),
                        rtf: r.rtf,
                        ep_latency: r.ep_latency,
                        prompts: r.summary.prompts,
                        ctc_prompts: r.summary.ctc_prompts,
                        ..base
                    })
                }
                DecodeMode::Batch => {
                    // Nothing can start before the last frame, so the whole
                    // processing time is endpoint latency.
                    let t0 = Instant::now();
                    let d = batch_decode(model, params, &u.features, &plan, search)?;
                    let dt = t0.elapsed().as_secs_f64();
                    Ok(UtteranceDecode {
                        emission_times: vec![dt; d.hypothesis.len()],
                        hypothesis: d.hypothesis,
                        rtf: dt / audio,
                        ep_latency: dt,
                        prompts: d.summary.prompts,
                        ctc_prompts: d.summary.ctc_prompts,
                        ..base
                    })
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub utterances: usize,
    pub counts: EditCounts,
    pub wer: f64,
    pub rtf_median: f64,
    pub ep50: f64,
    pub mean_ctc_prompts: f64,
    pub mean_frames: f64,
}

pub fn summarize(decodes: &[UtteranceDecode]) -> Result<DecodeSummary> {
    if decodes.is_empty() {
        return Err(AsrError::config("nothing to summarize"));
    }
    let refs: Vec<Vec<TokenId>> = decodes.iter().map(|d| d.reference.clone()).collect();
    let hyps: Vec<Vec<TokenId>> = decodes.iter().map(|d| d.hypothesis.clone()).collect();
    let er = error_rate(&refs, &hyps)?;
    let col = |f: fn(&UtteranceDecode) -> f64| decodes.iter().map(f).collect::<Vec<_>>();
    let n = decodes.len() as f64;
    Ok(DecodeSummary {
        utterances: decodes.len(),
        counts: er.counts,
        wer: er.rate,
        rtf_median: Distribution::of(&col(|d| d.rtf)).expect("non-empty").median,
        ep50: Distribution::of(&col(|d| d.ep_latency)).expect("non-empty").median,
        mean_ctc_prompts: decodes.iter().map(|d| d.ctc_prompts as f64).sum::<f64>() / n,
        mean_frames: decodes.iter().map(|d| d.frames as f64).sum::<f64>() / n,
    })
}

/// Per-utterance counts of an earlier decode, summed.
pub fn rescore(decodes: &[UtteranceDecode]) -> EditCounts {
    let mut c = EditCounts::default();
    for d in decodes {
        c.add(&align(&d.reference, &d.hypothesis));
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentManifest {
    /// Corpus directory written by `gen-data`.
    pub corpus: PathBuf,
    /// Model directory after encoder and LM pretraining.
    pub pretrained: PathBuf,
    /// Fine-tuned checkpoints and the report go here.
    pub output: PathBuf,
    pub schemes: Vec<Scheme>,
    pub variants: Vec<PromptVariant>,
    pub modes: Vec<DecodeMode>,
    pub seeds: Vec<u64>,
    pub finetune: TrainConfig,
    pub search: SearchConfig,
    pub frame_period: f64,
    /// Test utterances decoded per cell (all when `None`).
    pub test_limit: Option<usize>,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        ExperimentManifest {
            corpus: PathBuf::from("data"),
            pretrained: PathBuf::from("models/pretrained"),
            output: PathBuf::from("experiment"),
            schemes: vec![Scheme::Full, Scheme::ForcedAlign, Scheme::Prefix],
            variants: vec![PromptVariant::Ctc, PromptVariant::Context, PromptVariant::Both],
            modes: vec![DecodeMode::Stream, DecodeMode::Batch],
            seeds: vec![1, 2, 3],
            finetune: TrainConfig::finetune_default(Scheme::Prefix),
            search: SearchConfig::default(),
            frame_period: DEFAULT_FRAME_PERIOD,
            test_limit: None,
        }
    }
}

impl ExperimentManifest {
    /// Resolves relative paths against `base`.
    pub fn rebase(mut self, base: &Path) -> Self {
        for p in [&mut self.corpus, &mut self.pretrained, &mut self.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() || self.variants.is_empty() || self.modes.is_empty() || self.seeds.is_empty() {
            return Err(AsrError::config("experiment grid has an empty axis"));
        }
        self.finetune.validate()?;
        self.search.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub wer: f64,
    pub counts: EditCounts,
    pub rtf_median: f64,
    pub ep50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub scheme: Scheme,
    pub variant: PromptVariant,
    pub mode: DecodeMode,
    /// Mean over seeds.
    pub wer: f64,
    pub rtf_median: f64,
    pub ep50: f64,
    pub seeds: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub test_utterances: usize,
    pub cells: Vec<CellReport>,
    pub training: Vec<TrainingRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub scheme: Scheme,
    pub variant: PromptVariant,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub report: TrainReport,
}

impl ExperimentReport {
    pub fn cell(&self, scheme: Scheme, variant: PromptVariant, mode: DecodeMode) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.scheme == scheme && c.variant == variant && c.mode == mode)
    }

    /// Fixed-width table, one row per cell.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<13} {:<8} {:<7} {:>8} {:>8} {:>9}\n",
            "scheme", "prompts", "mode", "WER%", "RTF", "EP50(s)"
        );
        for c in &self.cells {
            s += &format!(
                "{:<13} {:<8} {:<7} {:>8.2} {:>8.4} {:>9.4}\n",
                c.scheme.name(),
                c.variant.name(),
                c.mode.name(),
                100.0 * c.wer,
                c.rtf_median,
                c.ep50
            );
        }
        s
    }
}

/// Fine-tunes the pretrained model once per (scheme, variant, seed), then
/// decodes the test set in every mode. `progress` receives one line per
/// finished unit of work.
pub fn run_experiment(manifest: &ExperimentManifest, mut progress: impl FnMut(&str)) -> Result<ExperimentReport> {
    manifest.validate()?;
    let corpus = load_corpus(&manifest.corpus)?;
    let (base, pretrained) = AsrModel::load(&manifest.pretrained)?;
    let limit = manifest.test_limit.map_or(corpus.test.len(), |n| n.min(corpus.test.len()));
    let test = &corpus.test[..limit];
    let mut training = Vec::new();
    let mut results: Vec<(Scheme, PromptVariant, DecodeMode, SeedResult)> = Vec::new();
    for &scheme in &manifest.schemes {
        for &variant in &manifest.variants {
            let model = base.with_prompts(&PromptConfig {
                variant,
                ..base.config.prompts.clone()
            });
            for &seed in &manifest.seeds {
                let mut params = pretrained.clone();
                let cfg = TrainConfig {
                    scheme,
                    seed,
                    log: None,
                    ..manifest.finetune.clone()
                };
                let report = finetune(&model, &mut params, &corpus, &cfg)?;
                let dir = manifest
                    .output
                    .join(format!("{}-{}-seed{seed}", scheme.name(), variant.name()));
                model.save(&params, &dir)?;
                progress(&format!(
                    "fine-tuned {} / {} / seed {seed}: final loss {:.4}",
                    scheme.name(),
                    variant.name(),
                    report.final_loss
                ));
                training.push(TrainingRun {
                    scheme,
                    variant,
                    seed,
                    checkpoint: dir,
                    report,
                });
                for &mode in &manifest.modes {
                    let d = decode_utterances(&model, &params, test, mode, &manifest.search, manifest.frame_period)?;
                    let s = summarize(&d)?;
                    progress(&format!(
                        "  {} decode: WER {:.2}%",
                        mode.name(),
                        100.0 * s.wer
                    ));
                    results.push((
                        scheme,
                        variant,
                        mode,
                        SeedResult {
                            seed,
                            wer: s.wer,
                            counts: s.counts,
                            rtf_median: s.rtf_median,
                            ep50: s.ep50,
                        },
                    ));
                }
            }
        }
    }
    let mut cells = Vec::new();
    for &scheme in &manifest.schemes {
        for &variant in &manifest.variants {
            for &mode in &manifest.modes {
                let seeds: Vec<SeedResult> = results
                    .iter()
                    .filter(|r| r.0 == scheme && r.1 == variant && r.2 == mode)
                    .map(|r| r.3.clone())
                    .collect();
                let n = seeds.len() as f64;
                let mean = |f: fn(&SeedResult) -> f64| seeds.iter().map(f).sum::<f64>() / n;
                cells.push(CellReport {
                    scheme,
                    variant,
                    mode,
                    wer: mean(|s| s.wer),
                    rtf_median: mean(|s| s.rtf_median),
                    ep50: mean(|s| s.ep50),
                    seeds,
                });
            }
        }
    }
    Ok(ExperimentReport {
        test_utterances: test.len(),
        cells,
        training,
    })
}
