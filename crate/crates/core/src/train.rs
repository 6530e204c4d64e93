//! Encoder CTC pretraining, decoder LM pretraining and joint fine-tuning
//! with the full / forced-alignment / prefix prompt-masking schemes.

use crate::corpus::{Corpus, Utterance};
use crate::ctc::{ctc_loss_tape, forced_align, greedy_decode, CtcGrid};
use crate::encoder::BlockPlan;
use crate::error::{AsrError, Result};
use crate::eval::error_rate;
use crate::model::AsrModel;
use crate::prompts::{PromptLayout, PromptSource};
use crate::vocab::TokenId;
use promptstream_nd::{Adam, AdamConfig, GradBuffer, Gradients, Mask, ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Full,
    ForcedAlign,
    Prefix,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Full => "full",
            Scheme::ForcedAlign => "forced-align",
            Scheme::Prefix => "prefix",
        }
    }
}

impl FromStr for Scheme {
    type Err = AsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scheme::Full),
            "forced-align" | "forced_align" => Ok(Scheme::ForcedAlign),
            "prefix" => Ok(Scheme::Prefix),
            other => Err(AsrError::config(format!(
                "unknown masking scheme {other:?} (full|forced-align|prefix)"
            ))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    /// Linear warmup to `peak` over `warmup` steps, then inverse square-root decay.
    Noam { peak: f64, warmup: u64 },
    Constant { lr: f64 },
}

impl LrSchedule {
    /// Rate for 1-based step `step`.
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Noam { peak, warmup } => {
                let s = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                peak * (s / w).min((w / s).sqrt())
            }
            LrSchedule::Constant { lr } => lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    pub seed: u64,
    pub scheme: Scheme,
    /// Weight of the CTC loss added to the decoder loss during fine-tuning.
    pub aux_ctc_weight: f64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Training examples used per epoch (all when `None`).
    pub train_limit: Option<usize>,
    /// Dev examples scored after each epoch (all when `None`).
    pub dev_limit: Option<usize>,
    /// JSON-lines metrics log.
    pub log: Option<PathBuf>,
    /// Worker threads for per-sample work; 0 uses the rayon default.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            schedule: LrSchedule::Noam {
                peak: 0.0025,
                warmup: 500,
            },
            clip_norm: 5.0,
            seed: 0,
            scheme: Scheme::Full,
            aux_ctc_weight: 0.3,
            max_steps: None,
            train_limit: None,
            dev_limit: None,
            log: None,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn encoder_default() -> Self {
        TrainConfig {
            epochs: 12,
            ..TrainConfig::default()
        }
    }

    pub fn lm_default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 32,
            schedule: LrSchedule::Noam {
                peak: 0.0025,
                warmup: 300,
            },
            ..TrainConfig::default()
        }
    }

    pub fn finetune_default(scheme: Scheme) -> Self {
        TrainConfig {
            epochs: 6,
            schedule: LrSchedule::Constant { lr: 0.0005 },
            scheme,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(AsrError::config("batch size must be positive"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 || self.aux_ctc_weight < 0.0 || !self.aux_ctc_weight.is_finite() {
            return Err(AsrError::config("clip norm must be positive and the CTC weight non-negative"));
        }
        let bad_lr = match self.schedule {
            LrSchedule::Noam { peak, .. } => peak.is_nan() || peak <= 0.0,
            LrSchedule::Constant { lr } => lr.is_nan() || lr < 0.0,
        };
        if bad_lr {
            return Err(AsrError::config("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Dev greedy token error rate (encoder), log-perplexity (LM) or
    /// teacher-forced loss (fine-tune).
    pub dev_metric: f64,
    pub skipped: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub steps: u64,
    pub skipped: u64,
    /// Mean loss of the last optimizer step.
    pub final_loss: f64,
}

#[derive(Serialize)]
struct StepLog {
    step: u64,
    loss: f64,
    lr: f64,
    skipped: u64,
}

/// Mixes the run seed with step and sample indices into a per-sample seed.
pub fn sample_seed(seed: u64, step: u64, index: usize) -> u64 {
    let mut z = seed
        .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample outcome: gradients and loss, or a skip.
type SampleResult = Result<Option<(Gradients<f32>, f64)>>;

fn run_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| AsrError::config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Shared optimisation loop. `sample` computes one example's loss on a
/// tape (returning `None` to skip it); `dev` scores the model after each
/// epoch.
fn optimise<S, D>(
    params: &mut ParamStore<f32>,
    examples: usize,
    cfg: &TrainConfig,
    sample: S,
    dev: D,
) -> Result<TrainReport>
where
    S: Fn(&Tape<f32>, usize, &mut ChaCha8Rng) -> Result<Option<Var>> + Sync,
    D: Fn(&ParamStore<f32>) -> Result<f64>,
{
    cfg.validate()?;
    if examples == 0 {
        return Err(AsrError::config("no training examples"));
    }
    let mut log = match &cfg.log {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let mut opt = Adam::new(params, AdamConfig::default());
    let mut report = TrainReport::default();
    let per_epoch = cfg.train_limit.map_or(examples, |n| n.min(examples));
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, u64::MAX - epoch as u64, 0)));
        order.truncate(per_epoch);
        let (mut loss_sum, mut loss_n, mut skipped) = (0.0, 0usize, 0u64);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break 'epochs;
            }
            let step = report.steps + 1;
            let store: &ParamStore<f32> = params;
            let results: Vec<SampleResult> = run_pool(cfg.threads, || {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(k, &idx)| {
                        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, step, k));
                        let tape = Tape::with_params(store);
                        match sample(&tape, idx, &mut rng)? {
                            None => Ok(None),
                            Some(loss) => {
                                let value = tape.value(loss).item() as f64;
                                Ok(Some((tape.backward(loss)?, value)))
                            }
                        }
                    })
                    .collect()
            })?;
            let mut grads = GradBuffer::zeros_like(params);
            let (mut batch_loss, mut used) = (0.0, 0usize);
            for r in results {
                match r? {
                    Some((g, l)) => {
                        grads.accumulate(&g);
                        batch_loss += l;
                        used += 1;
                    }
                    None => skipped += 1,
                }
            }
            report.steps = step;
            let lr = cfg.schedule.at(step);
            if used > 0 {
                batch_loss /= used as f64;
                if !batch_loss.is_finite() || !grads.is_finite() {
                    return Err(AsrError::Diverged {
                        step,
                        msg: format!("loss {batch_loss}, gradient norm {}", grads.global_norm()),
                    });
                }
                grads.scale(1.0 / used as f32);
                grads.clip_global_norm(cfg.clip_norm);
                opt.update(params, &grads, lr);
                loss_sum += batch_loss * used as f64;
                loss_n += used;
                report.final_loss = batch_loss;
            }
            if let Some(f) = log.as_mut() {
                write_log(
                    f,
                    &StepLog {
                        step,
                        loss: batch_loss,
                        lr,
                        skipped: (batch.len() - used) as u64,
                    },
                )?;
            }
        }
        report.skipped += skipped;
        report.epochs.push(EpochReport {
            epoch: epoch + 1,
            mean_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
            dev_metric: dev(params)?,
            skipped,
        });
    }
    Ok(report)
}

fn write_log(f: &mut File, entry: &StepLog) -> Result<()> {
    serde_json::to_writer(&mut *f, entry)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn limited<T>(items: &[T], limit: Option<usize>) -> &[T] {
    &items[..limit.map_or(items.len(), |n| n.min(items.len()))]
}

/// Encoder forward on a tape: CTC logits, last-layer contexts and the plan.
fn encode_tape(model: &AsrModel, tape: &Tape<f32>, u: &Utterance) -> Result<(Var, Var, Vec<Var>, BlockPlan)> {
    let plan = model.plan(u.frames())?;
    let (h, contexts) = model.encoder.encode_utterance_tape(tape, &u.features, &plan)?;
    let logits = model.ctc.logits_tape(tape, h)?;
    Ok((h, logits, contexts, plan))
}

/// Length-normalised CTC loss of one utterance.
fn ctc_term(tape: &Tape<f32>, logits: Var, y: &[TokenId]) -> Result<Var> {
    let loss = ctc_loss_tape(tape, logits, y)?;
    Ok(tape.scale(loss, 1.0 / (y.len() + 1) as f32))
}

/// Greedy token error rate over utterances.
pub fn greedy_error_rate(model: &AsrModel, params: &ParamStore<f32>, utts: &[Utterance]) -> Result<f64> {
    let hyps = utts
        .par_iter()
        .map(|u| model.greedy(params, &u.features))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<TokenId>> = utts.iter().map(|u| u.transcript.clone()).collect();
    Ok(error_rate(&refs, &hyps)?.rate)
}

/// Trains encoder and CTC head with the CTC loss; dev metric is the greedy
/// token error rate.
pub fn pretrain_encoder(
    model: &AsrModel,
    params: &mut ParamStore<f32>,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let dev = limited(&corpus.dev, cfg.dev_limit);
    optimise(
        params,
        corpus.train.len(),
        cfg,
        |tape, i, _| {
            let u = &corpus.train[i];
            let (_, logits, _, _) = encode_tape(model, tape, u)?;
            Ok(Some(ctc_term(tape, logits, &u.transcript)?))
        },
        |p| greedy_error_rate(model, p, dev),
    )
}

fn lm_targets(model: &AsrModel, y: &[TokenId]) -> (Vec<TokenId>, Vec<usize>) {
    let mut tokens = vec![model.sos()];
    tokens.extend_from_slice(y);
    let mut targets: Vec<usize> = y.iter().map(|&t| t - 1).collect();
    targets.push(model.eos() - 1);
    (tokens, targets)
}

/// Mean per-symbol negative log-likelihood (including `⟨eos⟩`) of the
/// decoder on text with no prompts beyond `u_0`.
pub fn lm_log_perplexity(model: &AsrModel, params: &ParamStore<f32>, sentences: &[Vec<TokenId>]) -> Result<f64> {
    let parts = sentences
        .par_iter()
        .map(|s| {
            let (tokens, targets) = lm_targets(model, s);
            let tape = Tape::with_params(params);
            let logits = model.decoder.batch_forward_tape(&tape, None, &tokens, None)?;
            let ce = tape.softmax_cross_entropy(logits, &targets)?;
            Ok((tape.value(ce).item() as f64 * targets.len() as f64, targets.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (nll, n) = parts.iter().fold((0.0, 0), |(a, b), &(x, y)| (a + x, b + y));
    Ok(nll / n.max(1) as f64)
}

/// Next-token training of the decoder on text; dev metric is the
/// log-perplexity in nats per symbol.
pub fn pretrain_lm(
    model: &AsrModel,
    params: &mut ParamStore<f32>,
    train: &[Vec<TokenId>],
    dev: &[Vec<TokenId>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let dev = limited(dev, cfg.dev_limit);
    optimise(
        params,
        train.len(),
        cfg,
        |tape, i, _| {
            let (tokens, targets) = lm_targets(model, &train[i]);
            let logits = model.decoder.batch_forward_tape(tape, None, &tokens, None)?;
            Ok(Some(tape.softmax_cross_entropy(logits, &targets)?))
        },
        |p| lm_log_perplexity(model, p, dev),
    )
}

/// Visibility of prompt `j` to the target predicted from token row `i`
/// (`0..=I`, the last row predicting `⟨eos⟩`) under forced-alignment
/// masking. `end_frames[i]` is the last frame aligned to token `i`; frames
/// are 0-based here, so a frame `t` counts as `t + 1` in the 1-based rule.
pub fn forced_align_mask(sources: &[PromptSource], end_frames: &[usize], plan: &BlockPlan) -> Mask {
    let rows = end_frames.len() + 1;
    Mask::from_fn(rows, sources.len(), |i, j| {
        if i == end_frames.len() {
            return true;
        }
        let end = end_frames[i];
        match sources[j] {
            PromptSource::Frame(t) => t <= end,
            PromptSource::Context(b) => plan.sub_end(b - 1) <= end + 1,
        }
    })
}

/// Every target sees exactly the prompts of blocks `1..=beta`.
pub fn prefix_mask(block_ends: &[usize], beta: usize, rows: usize) -> Mask {
    let visible = block_ends[beta];
    let cols = *block_ends.last().expect("J_0 present");
    Mask::from_fn(rows, cols, |_, j| j < visible)
}

/// Draws `β` uniformly from `1..=B` and returns it with its mask.
pub fn sample_prefix_mask(block_ends: &[usize], rows: usize, rng: &mut impl Rng) -> Result<(usize, Mask)> {
    let blocks = block_ends.len().checked_sub(1).filter(|&b| b >= 1).ok_or_else(|| {
        AsrError::contract("prefix masking needs at least one block")
    })?;
    let beta = rng.random_range(1..=blocks);
    Ok((beta, prefix_mask(block_ends, beta, rows)))
}

/// Everything the fine-tune loss of one utterance is built from.
pub struct FinetuneForward {
    pub layout: PromptLayout,
    pub plan: BlockPlan,
    pub grid: CtcGrid,
    pub ctc_logits: Var,
    pub mask: Option<Mask>,
    /// `[I+1, K+1]` decoder logits.
    pub dec_logits: Var,
    pub targets: Vec<usize>,
    pub beta: Option<usize>,
}

/// Encoder, greedy prompts, scheme mask and teacher-forced decoder for one
/// utterance. `Ok(None)` when the scheme cannot use the sample.
pub fn finetune_forward<T: promptstream_nd::Real>(
    model: &AsrModel,
    tape: &Tape<T>,
    u: &Utterance,
    feats: &promptstream_nd::Tensor<T>,
    scheme: Scheme,
    rng: &mut impl Rng,
) -> Result<Option<FinetuneForward>> {
    let plan = model.plan(u.frames())?;
    let (h, contexts) = model.encoder.encode_utterance_tape(tape, feats, &plan)?;
    let ctc_logits = model.ctc.logits_tape(tape, h)?;
    let grid = CtcGrid::from_logits(&tape.value(ctc_logits));
    let (z, _) = greedy_decode(&grid);
    let layout = model.projector.build_tape(tape, h, &contexts, &z, &plan)?;
    let (tokens, targets) = lm_targets(model, &u.transcript);
    let rows = tokens.len();
    let mut beta = None;
    let mask = match scheme {
        Scheme::Full => None,
        Scheme::ForcedAlign => match forced_align(&grid, &u.transcript) {
            Ok(a) => Some(forced_align_mask(&layout.sources, &a.end_frames, &plan)),
            Err(AsrError::InfeasibleAlignment { .. }) => return Ok(None),
            Err(e) => return Err(e),
        },
        Scheme::Prefix => {
            let (b, m) = sample_prefix_mask(&layout.block_ends, rows, rng)?;
            beta = Some(b);
            Some(m)
        }
    };
    let mask = mask.filter(|_| !layout.is_empty());
    let dec_logits = model.decoder.batch_forward_tape(tape, layout.prompts, &tokens, mask.as_ref())?;
    Ok(Some(FinetuneForward {
        layout,
        plan,
        grid,
        ctc_logits,
        mask,
        dec_logits,
        targets,
        beta,
    }))
}

/// Fine-tune objective of one utterance: decoder cross-entropy plus the
/// weighted, length-normalised CTC loss.
pub fn finetune_loss<T: promptstream_nd::Real>(
    model: &AsrModel,
    tape: &Tape<T>,
    u: &Utterance,
    feats: &promptstream_nd::Tensor<T>,
    scheme: Scheme,
    aux_ctc_weight: f64,
    rng: &mut impl Rng,
) -> Result<Option<Var>> {
    let Some(f) = finetune_forward(model, tape, u, feats, scheme, rng)? else {
        return Ok(None);
    };
    let ce = tape.softmax_cross_entropy(f.dec_logits, &f.targets)?;
    if aux_ctc_weight == 0.0 {
        return Ok(Some(ce));
    }
    let ctc = ctc_loss_tape(tape, f.ctc_logits, &u.transcript)?;
    let ctc = tape.scale(ctc, T::of(aux_ctc_weight / (u.transcript.len() + 1) as f64));
    Ok(Some(tape.add(ce, ctc)?))
}

/// Joint training of all parameters under `cfg.scheme`; dev metric is the
/// full-prompt teacher-forced decoder loss.
pub fn finetune(
    model: &AsrModel,
    params: &mut ParamStore<f32>,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let dev = limited(&corpus.dev, cfg.dev_limit);
    optimise(
        params,
        corpus.train.len(),
        cfg,
        |tape, i, rng| {
            let u = &corpus.train[i];
            finetune_loss(model, tape, u, &u.features, cfg.scheme, cfg.aux_ctc_weight, rng)
        },
        |p| {
            let parts = dev
                .par_iter()
                .map(|u| {
                    let tape = Tape::with_params(p);
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let f = finetune_forward(model, &tape, u, &u.features, Scheme::Full, &mut rng)?
                        .expect("full scheme never skips");
                    let ce = tape.softmax_cross_entropy(f.dec_logits, &f.targets)?;
                    Ok(tape.value(ce).item() as f64)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(parts.iter().sum::<f64>() / parts.len().max(1) as f64)
        },
    )
}
