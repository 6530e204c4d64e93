use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use promptstream::corpus::{load_corpus, Split};
use promptstream::experiment::{
    decode_utterances, from_json_over_default, generate_data, load_data, rescore, run_experiment, save_data, summarize, DecodeMode,
    ExperimentManifest, PipelineConfig, UtteranceDecode,
};
use promptstream::model::AsrModel;
use promptstream::prompts::{PromptConfig, PromptVariant};
use promptstream::stream::{measure, FusionRecognizer, MockRecognizer};
use promptstream::train::{finetune, pretrain_encoder, pretrain_lm, Scheme, TrainConfig, TrainReport};
use promptstream::AsrError;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

#[derive(Parser)]
#[command(name = "promptstream", version, about = "Streaming ASR with a prompt-driven decoder-only model")]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// JSON pipeline configuration; omitted fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic acoustic corpus and the LM text sets.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train encoder and CTC head with the CTC loss.
    PretrainEncoder(TrainArgs),
    /// Train the decoder as a token LM on the text sets.
    PretrainLm(TrainArgs),
    /// Joint fine-tuning under a prompt-masking scheme.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value = "prefix")]
        scheme: Scheme,
        #[arg(long, default_value = "both")]
        prompts: PromptVariant,
    },
    /// Decode a corpus split; writes one JSON line per utterance.
    Decode {
        #[arg(long, default_value = "stream")]
        mode: DecodeMode,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        lambda_ctc: Option<f64>,
        #[arg(long)]
        lambda_dec: Option<f64>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Token error rate of a decode output file.
    Eval {
        /// JSON-lines file written by `decode`.
        decodes: PathBuf,
    },
    /// Prompt compression, RTF / EP latency, and the mock-cost calibration.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 50)]
        limit: usize,
        /// Per-block sleep of the mock recognizer, in milliseconds.
        #[arg(long, default_value_t = 2.0)]
        mock_cost_ms: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a fine-tune / decode grid described by a JSON manifest.
    RunExperiment {
        manifest: PathBuf,
        /// Report path (default: `report.json` in the manifest's output dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Starting model directory (required for fine-tuning).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// JSON-lines metrics log.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(a) = cause.downcast_ref::<AsrError>() {
            if matches!(a, AsrError::Config(_)) {
                return 2;
            }
            if a.is_data_error() {
                return 3;
            }
        }
    }
    1
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        None => PipelineConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| AsrError::config(format!("{}: {e}", p.display())))?;
            from_json_over_default::<PipelineConfig>(&text).with_context(|| p.display().to_string())?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::GenData { out } => {
            let data = generate_data(&cfg.data, seed)?;
            save_data(&data, &out)?;
            let c = &data.corpus;
            println!(
                "wrote {} ({} / {} / {} utterances, {} LM sentences)",
                out.display(),
                c.train.len(),
                c.dev.len(),
                c.test.len(),
                data.text_train.len()
            );
        }
        Command::PretrainEncoder(a) => {
            let data = load_data(&a.corpus)?;
            let (model, mut params) = start_model(&cfg, a.model.as_deref(), &data.corpus, seed)?;
            let tc = train_config(&cfg.encoder_training, &a, seed);
            let report = pretrain_encoder(&model, &mut params, &data.corpus, &tc)?;
            print_epochs(&report, "dev greedy TER");
            finish_training(&model, &params, &report, &a.out)?;
        }
        Command::PretrainLm(a) => {
            let data = load_data(&a.corpus)?;
            let (model, mut params) = start_model(&cfg, a.model.as_deref(), &data.corpus, seed)?;
            let tc = train_config(&cfg.lm_training, &a, seed);
            let report = pretrain_lm(&model, &mut params, &data.text_train, &data.text_dev, &tc)?;
            print_epochs(&report, "dev log-perplexity");
            finish_training(&model, &params, &report, &a.out)?;
        }
        Command::Finetune { train: a, scheme, prompts } => {
            let dir = a
                .model
                .as_deref()
                .ok_or_else(|| AsrError::config("finetune needs --model with a pretrained model directory"))?;
            let corpus = load_corpus(&a.corpus)?;
            let (model, mut params) = AsrModel::load(dir)?;
            let model = model.with_prompts(&PromptConfig {
                variant: prompts,
                ..model.config.prompts.clone()
            });
            let tc = TrainConfig {
                scheme,
                ..train_config(&cfg.finetune, &a, seed)
            };
            let report = finetune(&model, &mut params, &corpus, &tc)?;
            print_epochs(&report, "dev teacher-forced loss");
            if report.skipped > 0 {
                println!("skipped {} samples with infeasible alignments", report.skipped);
            }
            finish_training(&model, &params, &report, &a.out)?;
        }
        Command::Decode {
            mode,
            beam,
            lambda_ctc,
            lambda_dec,
            model,
            corpus,
            out,
            split,
            limit,
        } => {
            let mut search = cfg.search.clone();
            search.beam = beam.unwrap_or(search.beam);
            search.weights.ctc = lambda_ctc.unwrap_or(search.weights.ctc);
            search.weights.dec = lambda_dec.unwrap_or(search.weights.dec);
            let split = parse_split(&split)?;
            let corpus = load_corpus(&corpus)?;
            let (model, params) = AsrModel::load(&model)?;
            let utts = corpus.split(split);
            let utts = &utts[..limit.map_or(utts.len(), |n| n.min(utts.len()))];
            let decodes = decode_utterances(&model, &params, utts, mode, &search, cfg.frame_period)?;
            let mut f = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            for d in &decodes {
                serde_json::to_writer(&mut f, d)?;
                f.write_all(b"\n")?;
            }
            let s = summarize(&decodes)?;
            println!(
                "{} utterances, {} decode: TER {:.2}%  RTF50 {:.4}  EP50 {:.4}s",
                s.utterances,
                mode.name(),
                100.0 * s.wer,
                s.rtf_median,
                s.ep50
            );
        }
        Command::Eval { decodes } => {
            let text = fs::read_to_string(&decodes).map_err(|e| AsrError::MissingArtifact {
                path: decodes.clone(),
                msg: e.to_string(),
            })?;
            let rows = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str::<UtteranceDecode>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(AsrError::from)?;
            let s = summarize(&rows)?;
            debug_assert_eq!(s.counts, rescore(&rows));
            println!("{}", serde_json::to_string_pretty(&s)?);
            let c = s.counts;
            println!(
                "TER {:.2}% (S {} D {} I {} / N {})",
                100.0 * s.wer,
                c.substitutions,
                c.deletions,
                c.insertions,
                c.reference_tokens
            );
        }
        Command::Bench {
            model,
            corpus,
            limit,
            mock_cost_ms,
            out,
        } => {
            let corpus = load_corpus(&corpus)?;
            let (model, params) = AsrModel::load(&model)?;
            let report = bench(&model, &params, &corpus.test[..limit.min(corpus.test.len())], &cfg, mock_cost_ms)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(p) = out {
                fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::RunExperiment { manifest, out } => {
            let text = fs::read_to_string(&manifest).map_err(|e| AsrError::MissingArtifact {
                path: manifest.clone(),
                msg: e.to_string(),
            })?;
            let m: ExperimentManifest =
                from_json_over_default(&text).with_context(|| manifest.display().to_string())?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let m = m.rebase(base);
            let report = run_experiment(&m, |line| eprintln!("{line}"))?;
            print!("{}", report.table());
            let out = out.unwrap_or_else(|| m.output.join("report.json"));
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, AsrError> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(AsrError::config(format!("unknown split {other:?} (train|dev|test)"))),
    }
}

/// Loads `dir` when given, otherwise builds a fresh model for the corpus.
fn start_model(
    cfg: &PipelineConfig,
    dir: Option<&Path>,
    corpus: &promptstream::corpus::Corpus,
    seed: u64,
) -> Result<(AsrModel, promptstream_nd::ParamStore<f32>)> {
    Ok(match dir {
        Some(d) => AsrModel::load(d)?,
        None => {
            let mut mc = cfg.model_config(corpus);
            mc.init_seed = seed;
            AsrModel::new(&mc)?
        }
    })
}

fn train_config(base: &TrainConfig, a: &TrainArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: a.epochs.unwrap_or(base.epochs),
        log: a.log.clone().or_else(|| base.log.clone()),
        seed,
        ..base.clone()
    }
}

fn print_epochs(r: &TrainReport, metric: &str) {
    for e in &r.epochs {
        println!("epoch {:>3}  loss {:.4}  {metric} {:.4}", e.epoch, e.mean_loss, e.dev_metric);
    }
}

fn finish_training(model: &AsrModel, params: &promptstream_nd::ParamStore<f32>, r: &TrainReport, out: &Path) -> Result<()> {
    model.save(params, out)?;
    fs::write(out.join("train_report.json"), serde_json::to_string_pretty(r)?)?;
    println!("saved {} after {} steps", out.display(), r.steps);
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    utterances: usize,
    mean_ctc_prompts: f64,
    mean_frames: f64,
    /// Mean CTC prompts over mean subsampled frames.
    prompt_ratio: f64,
    rtf_median: f64,
    rtf_p90: f64,
    ep50: f64,
    ep90: f64,
    mock_cost_ms: f64,
    mock_rtf: f64,
    mock_rtf_doubled: f64,
    mock_rtf_ratio: f64,
}

fn bench(
    model: &AsrModel,
    params: &promptstream_nd::ParamStore<f32>,
    utts: &[promptstream::corpus::Utterance],
    cfg: &PipelineConfig,
    mock_cost_ms: f64,
) -> Result<BenchReport> {
    if utts.is_empty() {
        return Err(AsrError::config("bench needs at least one test utterance").into());
    }
    let feats: Vec<_> = utts.iter().map(|u| &u.features).collect();
    let rec = FusionRecognizer::new(model, params, cfg.search.clone())?;
    let (m, results) = measure(&rec, &feats, cfg.frame_period)?;
    let n = results.len() as f64;
    let prompts = results.iter().map(|r| r.summary.ctc_prompts as f64).sum::<f64>() / n;
    let frames = utts
        .iter()
        .map(|u| model.plan(u.frames()).map(|p| p.sub_frames() as f64))
        .sum::<Result<f64, _>>()?
        / n;
    let mock = |ms: f64| -> Result<f64> {
        let rec = MockRecognizer {
            block_cost: Duration::from_secs_f64(ms / 1000.0),
            block_frames: model.config.encoder.block_frames,
            subsample: model.config.encoder.subsample,
        };
        Ok(measure(&rec, &feats, cfg.frame_period)?.0.rtf.median)
    };
    let (single, double) = (mock(mock_cost_ms)?, mock(2.0 * mock_cost_ms)?);
    Ok(BenchReport {
        utterances: utts.len(),
        mean_ctc_prompts: prompts,
        mean_frames: frames,
        prompt_ratio: prompts / frames,
        rtf_median: m.rtf.median,
        rtf_p90: m.rtf.p90,
        ep50: m.ep_latency.median,
        ep90: m.ep_latency.p90,
        mock_cost_ms,
        mock_rtf: single,
        mock_rtf_doubled: double,
        mock_rtf_ratio: double / single,
    })
}
