//! Synthetic paired speech/transcription corpus and text-only corpus.
//!
//! Each content token owns a fixed random template vector. An utterance is
//! produced by drawing a transcript from a first-order Markov chain over the
//! content tokens, repeating every token's template for a random number of
//! frames, and adding Gaussian noise. The text-only corpus draws sentences
//! from the same chain, which is what makes decoder pretraining useful.

use crate::error::{AsrError, Result};
use crate::vocab::{TokenId, Vocabulary};
use promptstream_nd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURES_FILE: &str = "features.bin";
pub const VOCAB_FILE: &str = "vocab.json";
pub const GENERATOR_FILE: &str = "generator.json";

/// Acoustic feature matrix `[frames, dim]`.
pub type FeatureSequence = Tensor<f32>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkovChainConfig {
    pub seed: u64,
    /// Softmax temperature applied to unit-Gaussian transition logits;
    /// 0 makes every row deterministic.
    pub temperature: f64,
}

impl Default for MarkovChainConfig {
    fn default() -> Self {
        MarkovChainConfig {
            seed: 7,
            temperature: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub content_tokens: usize,
    pub feature_dim: usize,
    pub duration_min: usize,
    pub duration_max: usize,
    pub noise_sigma: f64,
    pub transcript_min: usize,
    pub transcript_max: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Subsampling factor the feasibility check assumes.
    pub subsample: usize,
    pub chain: MarkovChainConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            content_tokens: 16,
            feature_dim: 16,
            duration_min: 6,
            duration_max: 14,
            noise_sigma: 0.3,
            transcript_min: 5,
            transcript_max: 15,
            train: 2000,
            dev: 200,
            test: 200,
            subsample: 4,
            chain: MarkovChainConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.content_tokens < 4 {
            return Err(AsrError::config("vocabulary size must be at least 4"));
        }
        if self.duration_min < 2 {
            return Err(AsrError::config("minimum token duration must be at least 2 frames"));
        }
        if self.duration_max < self.duration_min {
            return Err(AsrError::config(format!(
                "duration max {} < duration min {}",
                self.duration_max, self.duration_min
            )));
        }
        if self.transcript_min == 0 || self.transcript_max < self.transcript_min {
            return Err(AsrError::config("transcript length range is empty"));
        }
        if self.feature_dim == 0 || self.subsample == 0 {
            return Err(AsrError::config("feature dimension and subsampling must be positive"));
        }
        if self.noise_sigma < 0.0 || self.chain.temperature < 0.0 {
            return Err(AsrError::config("noise and temperature must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextCorpusConfig {
    pub content_tokens: usize,
    pub sentences: usize,
    pub length_min: usize,
    pub length_max: usize,
    pub chain: MarkovChainConfig,
}

impl Default for TextCorpusConfig {
    fn default() -> Self {
        TextCorpusConfig {
            content_tokens: 16,
            sentences: 10_000,
            length_min: 5,
            length_max: 15,
            chain: MarkovChainConfig::default(),
        }
    }
}

impl TextCorpusConfig {
    /// Text corpus drawn from the same chain and length range as `corpus`.
    pub fn matching(corpus: &CorpusConfig, sentences: usize) -> Self {
        TextCorpusConfig {
            content_tokens: corpus.content_tokens,
            sentences,
            length_min: corpus.transcript_min,
            length_max: corpus.transcript_max,
            chain: corpus.chain.clone(),
        }
    }
}

/// First-order Markov chain over content tokens (indices `0..K`, i.e. token
/// id minus one).
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    start: Vec<f64>,
    transitions: Vec<Vec<f64>>,
}

fn tempered(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > logits[b] { i } else { b });
        return (0..logits.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

impl MarkovChain {
    pub fn new(tokens: usize, config: &MarkovChainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let logits: Vec<f64> = (0..tokens).map(|_| rng.sample(StandardNormal)).collect();
            tempered(&logits, config.temperature)
        };
        let start = row(&mut rng);
        let transitions = (0..tokens).map(|_| row(&mut rng)).collect();
        MarkovChain { start, transitions }
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    pub fn transition(&self, from: usize) -> &[f64] {
        &self.transitions[from]
    }

    /// Draws `len` token ids (1-based content ids).
    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(len);
        let mut cur = sample_categorical(&self.start, rng);
        out.push(cur + 1);
        for _ in 1..len {
            cur = sample_categorical(&self.transitions[cur], rng);
            out.push(cur + 1);
        }
        out
    }

    /// Exact entropy in nats per predicted symbol (content tokens plus the
    /// end-of-sentence decision) for sentences whose length is uniform on
    /// `len_min..=len_max`.
    pub fn entropy_per_symbol(&self, len_min: usize, len_max: usize) -> f64 {
        let n_lengths = (len_max - len_min + 1) as f64;
        let length_entropy = n_lengths.ln();
        // Expected token entropy at each position, propagating the marginal.
        let mut marginal = self.start.clone();
        let mut token_entropy_at = vec![entropy(&self.start)];
        for _ in 1..len_max {
            let h: f64 = marginal
                .iter()
                .enumerate()
                .map(|(i, &p)| p * entropy(&self.transitions[i]))
                .sum();
            token_entropy_at.push(h);
            let mut next = vec![0.0; marginal.len()];
            for (i, &p) in marginal.iter().enumerate() {
                for (j, &q) in self.transitions[i].iter().enumerate() {
                    next[j] += p * q;
                }
            }
            marginal = next;
        }
        let mut total = length_entropy;
        let mut symbols = 0.0;
        for len in len_min..=len_max {
            let w = 1.0 / n_lengths;
            total += w * token_entropy_at[..len].iter().sum::<f64>();
            symbols += w * (len as f64 + 1.0);
        }
        total / symbols
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    /// `[frames, feature_dim]`.
    pub features: FeatureSequence,
    pub transcript: Vec<TokenId>,
    /// Generating duration (frames) of each transcript token.
    pub durations: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    /// Token id that generated each frame.
    pub fn frame_tokens(&self) -> Vec<TokenId> {
        self.transcript
            .iter()
            .zip(&self.durations)
            .flat_map(|(&t, &d)| std::iter::repeat_n(t, d))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub config: CorpusConfig,
    pub seed: u64,
    /// `[K][D]` template vectors, row `k` belongs to token id `k + 1`.
    pub templates: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub feature_dim: usize,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub generator: Option<GeneratorInfo>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn splits(&self) -> [(Split, &[Utterance]); 3] {
        [
            (Split::Train, &self.train),
            (Split::Dev, &self.dev),
            (Split::Test, &self.test),
        ]
    }
}

/// Minimum subsampled frame count CTC needs for `transcript`: one frame per
/// token plus one blank between identical neighbours.
pub fn ctc_min_frames(transcript: &[TokenId]) -> usize {
    transcript.len() + transcript.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let k = config.content_tokens;
    let d = config.feature_dim;
    let vocab = Vocabulary::synthetic(k);
    let chain = MarkovChain::new(k, &config.chain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f32>> = (0..k)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect())
        .collect();
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0))
        .map_err(|e| AsrError::config(e.to_string()))?;

    let make_split = |name: &str, count: usize, rng: &mut ChaCha8Rng| -> Vec<Utterance> {
        (0..count)
            .map(|i| {
                let len = rng.random_range(config.transcript_min..=config.transcript_max);
                let transcript = chain.sample(len, rng);
                let needed = ctc_min_frames(&transcript);
                let durations = loop {
                    let ds: Vec<usize> = (0..len)
                        .map(|_| rng.random_range(config.duration_min..=config.duration_max))
                        .collect();
                    let frames: usize = ds.iter().sum();
                    if frames.div_ceil(config.subsample) >= needed {
                        break ds;
                    }
                };
                let frames: usize = durations.iter().sum();
                let mut data = Vec::with_capacity(frames * d);
                for (&tok, &dur) in transcript.iter().zip(&durations) {
                    for _ in 0..dur {
                        for &v in &templates[tok - 1] {
                            let n = if config.noise_sigma > 0.0 {
                                noise.sample(rng)
                            } else {
                                0.0
                            };
                            data.push((v as f64 + n) as f32);
                        }
                    }
                }
                Utterance {
                    utterance_id: format!("{name}-{i:05}"),
                    features: Tensor::matrix(frames, d, data).expect("frame data sized by construction"),
                    transcript,
                    durations,
                }
            })
            .collect()
    };
    let train = make_split("train", config.train, &mut rng);
    let dev = make_split("dev", config.dev, &mut rng);
    let test = make_split("test", config.test, &mut rng);
    Ok(Corpus {
        vocab,
        feature_dim: d,
        train,
        dev,
        test,
        generator: Some(GeneratorInfo {
            config: config.clone(),
            seed,
            templates,
        }),
    })
}

pub fn generate_text_corpus(config: &TextCorpusConfig, seed: u64) -> Result<Vec<Vec<TokenId>>> {
    if config.content_tokens < 4 {
        return Err(AsrError::config("vocabulary size must be at least 4"));
    }
    if config.length_min == 0 || config.length_max < config.length_min {
        return Err(AsrError::config("sentence length range is empty"));
    }
    if config.chain.temperature < 0.0 {
        return Err(AsrError::config("temperature must be non-negative"));
    }
    let chain = MarkovChain::new(config.content_tokens, &config.chain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..config.sentences)
        .map(|_| {
            let len = rng.random_range(config.length_min..=config.length_max);
            chain.sample(len, &mut rng)
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    utterance_id: String,
    split: Split,
    frames: usize,
    dim: usize,
    offset: u64,
    transcript: Vec<TokenId>,
    durations: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    blank: TokenId,
    eos: TokenId,
    sos: TokenId,
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    let mut blob = Vec::new();
    for (split, utts) in corpus.splits() {
        for u in utts {
            let line = ManifestLine {
                utterance_id: u.utterance_id.clone(),
                split,
                frames: u.frames(),
                dim: u.features.cols(),
                offset: blob.len() as u64,
                transcript: u.transcript.clone(),
                durations: u.durations.clone(),
            };
            serde_json::to_writer(&mut manifest, &line)?;
            manifest.push(b'\n');
            for v in u.features.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::File::create(dir.join(FEATURES_FILE))?.write_all(&blob)?;
    let vocab = VocabFile {
        tokens: corpus.vocab.tokens().to_vec(),
        blank: corpus.vocab.blank(),
        eos: corpus.vocab.eos(),
        sos: corpus.vocab.sos(),
    };
    fs::write(dir.join(VOCAB_FILE), serde_json::to_vec_pretty(&vocab)?)?;
    if let Some(g) = &corpus.generator {
        fs::write(dir.join(GENERATOR_FILE), serde_json::to_vec(g)?)?;
    }
    Ok(())
}

fn missing(path: &Path, e: std::io::Error) -> AsrError {
    AsrError::MissingArtifact {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let vocab_path = dir.join(VOCAB_FILE);
    let vf: VocabFile = serde_json::from_slice(&fs::read(&vocab_path).map_err(|e| missing(&vocab_path, e))?)
        .map_err(|e| AsrError::Format {
            offset: 0,
            msg: format!("{}: {e}", VOCAB_FILE),
        })?;
    let vocab = Vocabulary::from_tokens(vf.tokens)?;
    if (vf.blank, vf.eos, vf.sos) != (vocab.blank(), vocab.eos(), vocab.sos()) {
        return Err(AsrError::Format {
            offset: 0,
            msg: "vocab.json reserved indices do not follow the blank/content/eos/sos layout".into(),
        });
    }

    let feat_path = dir.join(FEATURES_FILE);
    let blob = fs::read(&feat_path).map_err(|e| missing(&feat_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let reader = BufReader::new(fs::File::open(&man_path).map_err(|e| missing(&man_path, e))?);

    let mut corpus = Corpus {
        vocab,
        feature_dim: 0,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        generator: None,
    };
    let mut byte = 0u64;
    let mut expected_offset = 0u64;
    for line in reader.split(b'\n') {
        let line = line?;
        let line_start = byte;
        byte += line.len() as u64 + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let m: ManifestLine = serde_json::from_slice(&line).map_err(|e| AsrError::Format {
            offset: line_start,
            msg: format!("{MANIFEST_FILE}: {e}"),
        })?;
        let bad = |msg: String| AsrError::Format {
            offset: line_start,
            msg,
        };
        if corpus.feature_dim == 0 {
            corpus.feature_dim = m.dim;
        } else if m.dim != corpus.feature_dim {
            return Err(bad(format!("{}: dimension {} differs from {}", m.utterance_id, m.dim, corpus.feature_dim)));
        }
        if m.offset != expected_offset {
            return Err(bad(format!("{}: feature offset {} expected {}", m.utterance_id, m.offset, expected_offset)));
        }
        if m.durations.len() != m.transcript.len() || m.durations.iter().sum::<usize>() != m.frames {
            return Err(bad(format!("{}: durations disagree with transcript/frames", m.utterance_id)));
        }
        if m.transcript.iter().any(|&t| !corpus.vocab.is_content(t)) {
            return Err(bad(format!("{}: transcript contains a non-content token", m.utterance_id)));
        }
        let n_bytes = (m.frames * m.dim * 4) as u64;
        let end = m.offset + n_bytes;
        if end > blob.len() as u64 {
            return Err(AsrError::Format {
                offset: blob.len() as u64,
                msg: format!("{FEATURES_FILE} truncated inside {}", m.utterance_id),
            });
        }
        let data = blob[m.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        expected_offset = end;
        let u = Utterance {
            utterance_id: m.utterance_id,
            features: Tensor::matrix(m.frames, m.dim, data)?,
            transcript: m.transcript,
            durations: m.durations,
        };
        match m.split {
            Split::Train => corpus.train.push(u),
            Split::Dev => corpus.dev.push(u),
            Split::Test => corpus.test.push(u),
        }
    }
    if expected_offset != blob.len() as u64 {
        return Err(AsrError::Format {
            offset: expected_offset,
            msg: format!(
                "manifest covers {expected_offset} bytes but {FEATURES_FILE} holds {}",
                blob.len()
            ),
        });
    }
    let gen_path = dir.join(GENERATOR_FILE);
    if gen_path.exists() {
        corpus.generator = Some(serde_json::from_slice(&fs::read(&gen_path)?).map_err(|e| AsrError::Format {
            offset: 0,
            msg: format!("{GENERATOR_FILE}: {e}"),
        })?);
    }
    Ok(corpus)
}

pub fn save_text_corpus(sentences: &[Vec<TokenId>], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for s in sentences {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_text_corpus(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path).map_err(|e| missing(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split('\n') {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line).map_err(|e| AsrError::Format {
                offset,
                msg: e.to_string(),
            })?);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
