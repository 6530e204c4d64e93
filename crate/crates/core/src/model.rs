//! The joint model: encoder, CTC head, prompt projectors and decoder over a
//! single parameter store, plus its on-disk directory format.

use crate::ctc::{greedy_decode, CtcGrid, CtcHead};
use crate::decoder::{DecoderConfig, PromptDecoder};
use crate::encoder::{BlockPlan, EncoderConfig, SpeechEncoder};
use crate::error::{AsrError, Result};
use crate::nn::Init;
use crate::prompts::{PromptChunk, PromptConfig, PromptProjector};
use crate::vocab::{TokenId, Vocabulary};
use promptstream_nd::{ParamStore, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub content_tokens: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub prompts: PromptConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            content_tokens: 16,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            prompts: PromptConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.content_tokens != self.content_tokens {
            return Err(AsrError::config(format!(
                "decoder vocabulary {} differs from model vocabulary {}",
                self.decoder.content_tokens, self.content_tokens
            )));
        }
        Ok(())
    }

    /// Config whose vocabulary and feature size follow a corpus.
    pub fn for_corpus(vocab: &Vocabulary, feature_dim: usize) -> Self {
        let mut c = ModelConfig {
            content_tokens: vocab.content_size(),
            ..ModelConfig::default()
        };
        c.decoder.content_tokens = vocab.content_size();
        c.encoder.input_dim = feature_dim;
        c
    }
}

#[derive(Clone, Debug)]
pub struct AsrModel {
    pub config: ModelConfig,
    pub encoder: SpeechEncoder,
    pub ctc: CtcHead,
    pub projector: PromptProjector,
    pub decoder: PromptDecoder,
}

/// Encoder-side products of one utterance.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub plan: BlockPlan,
    pub h: Tensor<T>,
    pub contexts: Vec<Tensor<T>>,
    pub grid: CtcGrid,
}

impl AsrModel {
    /// Builds the structure and a freshly initialised store.
    pub fn new(config: &ModelConfig) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let encoder = SpeechEncoder::new(&mut init, &config.encoder)?;
        let ctc = CtcHead::new(&mut init, config.encoder.model_dim, config.content_tokens + 1);
        let projector = PromptProjector::new(&mut init, &config.prompts, config.encoder.model_dim, config.decoder.model_dim);
        let decoder = PromptDecoder::new(&mut init, &config.decoder)?;
        Ok((
            AsrModel {
                config: config.clone(),
                encoder,
                ctc,
                projector,
                decoder,
            },
            store,
        ))
    }

    /// Same parameters, different prompt arrangement.
    pub fn with_prompts(&self, prompts: &PromptConfig) -> Self {
        let mut m = self.clone();
        m.config.prompts = prompts.clone();
        m.projector.config = prompts.clone();
        m
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::synthetic(self.config.content_tokens)
    }

    pub fn sos(&self) -> TokenId {
        self.config.decoder.sos()
    }

    pub fn eos(&self) -> TokenId {
        self.config.decoder.eos()
    }

    pub fn plan(&self, input_frames: usize) -> Result<BlockPlan> {
        self.encoder.plan(input_frames)
    }

    /// Whole-utterance encoder output and CTC posteriors.
    pub fn encode<T: Real>(&self, params: &ParamStore<T>, feats: &Tensor<T>, plan: BlockPlan) -> Result<Encoded<T>> {
        let enc = self.encoder.encode_utterance(params, feats, &plan)?;
        let grid = self.ctc.posteriors(params, &enc.h)?;
        Ok(Encoded {
            plan,
            h: enc.h,
            contexts: enc.contexts,
            grid,
        })
    }

    pub fn prompt_chunks<T: Real>(&self, params: &ParamStore<T>, e: &Encoded<T>) -> Result<Vec<PromptChunk<T>>> {
        self.projector.chunks(params, &e.h, &e.contexts, &e.grid, &e.plan)
    }

    /// Greedy CTC transcript of an utterance.
    pub fn greedy<T: Real>(&self, params: &ParamStore<T>, feats: &Tensor<T>) -> Result<Vec<TokenId>> {
        let plan = self.plan(feats.rows())?;
        Ok(greedy_decode(&self.encode(params, feats, plan)?.grid).1)
    }

    pub fn save(&self, params: &ParamStore<f32>, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&self.config)?)?;
        params.save(dir)?;
        Ok(())
    }

    /// Loads a model directory; every parameter of the configured structure
    /// must be present with a matching shape.
    pub fn load(dir: &Path) -> Result<(Self, ParamStore<f32>)> {
        let path = dir.join(CONFIG_FILE);
        let bytes = fs::read(&path).map_err(|e| AsrError::MissingArtifact {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let config: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| AsrError::Format {
            offset: 0,
            msg: format!("{}: {e}", path.display()),
        })?;
        let (model, mut store) = AsrModel::new(&config)?;
        let manifest = dir.join(promptstream_nd::MANIFEST_FILE);
        if !manifest.exists() {
            return Err(AsrError::MissingArtifact {
                path: manifest,
                msg: "checkpoint manifest not found".into(),
            });
        }
        let loaded = ParamStore::<f32>::load(dir)?;
        let n = store.load_matching(&loaded)?;
        if n != store.len() {
            return Err(AsrError::Format {
                offset: 0,
                msg: format!("checkpoint holds {n} of the model's {} parameters", store.len()),
            });
        }
        Ok((model, store))
    }
}
