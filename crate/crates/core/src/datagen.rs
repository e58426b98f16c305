//! Synthetic streaming corpus with exact token boundaries.
//!
//! Every content token owns a one-hot feature direction. An utterance is a
//! run of token segments (each 2-5 frames of that token's direction plus
//! Gaussian noise) followed by trailing silence, so the end-of-speech frame
//! is known exactly instead of being estimated by forced alignment.
//!
//! Frame numbers in `eos_frame` and `token_spans` are one-based.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LabelSequence, TokenId};
use crate::tensor::Matrix;

pub const CORPUS_FORMAT: &str = "fastemit-corpus";
pub const CORPUS_VERSION: u32 = 1;

/// Stream offset separating the test split from the training split.
const TEST_STREAM_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_utterances: usize,
    pub n_test_utterances: usize,
    /// Non-blank vocabulary size `V`, including `</s>` in endpointer mode.
    pub vocab_size: usize,
    pub u_range: [usize; 2],
    pub frames_per_token_range: [usize; 2],
    pub trailing_silence_range: [usize; 2],
    pub feature_noise_sigma: f64,
    pub feature_dim: usize,
    pub seed: u64,
    pub endpointer: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_utterances: 1000,
            n_test_utterances: 200,
            vocab_size: 16,
            u_range: [2, 10],
            frames_per_token_range: [2, 5],
            trailing_silence_range: [3, 8],
            feature_noise_sigma: 0.1,
            feature_dim: 17,
            seed: 1234,
            endpointer: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl CorpusConfig {
    /// Content tokens are `1..=content_tokens()`; `</s>` follows them.
    pub fn content_tokens(&self) -> usize {
        if self.endpointer {
            self.vocab_size.saturating_sub(1)
        } else {
            self.vocab_size
        }
    }

    pub fn end_of_query(&self) -> Option<TokenId> {
        self.endpointer.then_some(TokenId(self.vocab_size))
    }

    /// Coordinate set on silence frames; the one-hot token block precedes it.
    pub fn silence_coordinate(&self) -> usize {
        self.feature_dim - 1
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("u_range", self.u_range),
            ("frames_per_token_range", self.frames_per_token_range),
            ("trailing_silence_range", self.trailing_silence_range),
        ];
        for (name, [lo, hi]) in ranges {
            if lo > hi {
                return Err(Error::Config(format!("{name} [{lo}, {hi}] is empty")));
            }
        }
        if self.frames_per_token_range[0] == 0 {
            return Err(Error::Config("tokens need at least one frame".into()));
        }
        if !(self.feature_noise_sigma.is_finite() && self.feature_noise_sigma >= 0.0) {
            return Err(Error::Config("feature_noise_sigma must be >= 0".into()));
        }
        if self.content_tokens() == 0 {
            return Err(Error::Config("the vocabulary has no content tokens".into()));
        }
        if self.feature_dim < 2 || self.content_tokens() > self.feature_dim - 1 {
            return Err(Error::Config(format!(
                "{} content tokens do not fit the one-hot capacity of feature_dim {} (one coordinate is reserved for silence)",
                self.content_tokens(),
                self.feature_dim
            )));
        }
        let total =
            self.u_range[1] * self.frames_per_token_range[1] + self.trailing_silence_range[1];
        if total == 0 {
            return Err(Error::Config("utterances would have no frames".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `(T, feature_dim)`.
    pub frames: Matrix,
    /// Content tokens, followed by `</s>` in endpointer mode.
    pub labels: LabelSequence,
    /// One-based index of the last non-silence frame (0 if there is no speech).
    pub eos_frame: usize,
    /// One-based inclusive `(start, end)` frame span of each content token.
    pub token_spans: Vec<(usize, usize)>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Labels without a trailing `</s>`.
    pub fn content_labels(&self, end_of_query: Option<TokenId>) -> &[TokenId] {
        let tokens = self.labels.tokens();
        match (end_of_query, tokens.last()) {
            (Some(eoq), Some(&last)) if last == eoq => &tokens[..tokens.len() - 1],
            _ => tokens,
        }
    }

    /// Checks span layout, silence placement and label/span agreement.
    pub fn validate(&self, config: &CorpusConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("utterance {}: {msg}", self.id)));
        let content = self.content_labels(config.end_of_query());
        if content.len() != self.token_spans.len() {
            return bad(format!(
                "{} labels but {} spans",
                content.len(),
                self.token_spans.len()
            ));
        }
        if config.endpointer && self.labels.tokens().last() != config.end_of_query().as_ref() {
            return bad("endpointer mode requires a trailing </s>".into());
        }
        let mut next = 1;
        for &(start, end) in &self.token_spans {
            if start != next || end < start {
                return bad(format!(
                    "span ({start}, {end}) breaks contiguity at frame {next}"
                ));
            }
            next = end + 1;
        }
        if next - 1 != self.eos_frame {
            return bad(format!(
                "spans end at {} but eos_frame is {}",
                next - 1,
                self.eos_frame
            ));
        }
        if self.eos_frame >= self.num_frames() && config.trailing_silence_range[0] > 0 {
            return bad("no trailing silence".into());
        }
        let sil = config.silence_coordinate();
        for t in self.eos_frame..self.num_frames() {
            let row = self.frames.row(t);
            if config.feature_noise_sigma == 0.0 && row[sil] != 1.0 {
                return bad(format!("frame {} after eos is not silence", t + 1));
            }
        }
        Ok(())
    }
}

/// Unit one-hot direction of content token `k` (one-based), or the silence
/// direction for `None`.
pub fn embedding(config: &CorpusConfig, token: Option<TokenId>) -> Vec<f64> {
    let mut v = vec![0.0; config.feature_dim];
    match token {
        Some(k) => v[k.0 - 1] = 1.0,
        None => v[config.silence_coordinate()] = 1.0,
    }
    v
}

/// Deterministic in `(config, split, index)`.
pub fn generate_utterance(config: &CorpusConfig, split: Split, index: usize) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let stream = match split {
        Split::Train => index as u64,
        Split::Test => TEST_STREAM_BASE + index as u64,
    };
    rng.set_stream(stream);
    let noise = Normal::new(0.0, config.feature_noise_sigma)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;

    let n_tokens = rng.random_range(config.u_range[0]..=config.u_range[1]);
    let n_content = config.content_tokens();
    let mut tokens = Vec::with_capacity(n_tokens + 1);
    let mut rows = Vec::new();
    let mut spans = Vec::with_capacity(n_tokens);
    let push_frames =
        |rng: &mut ChaCha8Rng, rows: &mut Vec<Vec<f64>>, base: &[f64], count: usize| {
            for _ in 0..count {
                rows.push(base.iter().map(|&b| b + noise.sample(rng)).collect());
            }
        };
    for _ in 0..n_tokens {
        let tok = TokenId(rng.random_range(1..=n_content));
        let dur =
            rng.random_range(config.frames_per_token_range[0]..=config.frames_per_token_range[1]);
        let start = rows.len() + 1;
        push_frames(&mut rng, &mut rows, &embedding(config, Some(tok)), dur);
        spans.push((start, rows.len()));
        tokens.push(tok);
    }
    let eos_frame = rows.len();
    let silence =
        rng.random_range(config.trailing_silence_range[0]..=config.trailing_silence_range[1]);
    push_frames(&mut rng, &mut rows, &embedding(config, None), silence);
    if rows.is_empty() {
        // Zero tokens and zero silence: keep one silence frame so T >= 1.
        push_frames(&mut rng, &mut rows, &embedding(config, None), 1);
    }
    if let Some(eoq) = config.end_of_query() {
        tokens.push(eoq);
    }
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    Ok(Utterance {
        id: format!("{prefix}-{index:05}"),
        frames: Matrix::from_rows(&rows)?,
        labels: LabelSequence::new(tokens)?,
        eos_frame,
        token_spans: spans,
    })
}

pub fn generate_split(config: &CorpusConfig, split: Split) -> Result<Vec<Utterance>> {
    config.validate()?;
    let n = match split {
        Split::Train => config.n_utterances,
        Split::Test => config.n_test_utterances,
    };
    (0..n)
        .map(|i| generate_utterance(config, split, i))
        .collect()
}

/// Training split.
pub fn generate(config: &CorpusConfig) -> Result<Vec<Utterance>> {
    generate_split(config, Split::Train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub endpointer: bool,
    pub n_utterances: usize,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    #[serde(rename = "T")]
    frames: usize,
    feature_dim: usize,
    /// Little-endian f64, row-major, base64.
    frames_f64le: String,
    labels: Vec<usize>,
    eos_frame: usize,
    token_spans: Vec<(usize, usize)>,
}

fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f64s(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!(
            "payload of {} bytes is not a whole number of f64",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes one header line and one JSON record per utterance.
pub fn write_corpus(path: &Path, header: &CorpusHeader, utterances: &[Utterance]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let line = serde_json::to_string(header).map_err(|e| Error::format(path, e.to_string()))?;
    writeln!(w, "{line}").map_err(io)?;
    for utt in utterances {
        let rec = Record {
            id: utt.id.clone(),
            frames: utt.frames.rows(),
            feature_dim: utt.frames.cols(),
            frames_f64le: encode_f64s(utt.frames.as_slice()),
            labels: utt.labels.tokens().iter().map(|t| t.0).collect(),
            eos_frame: utt.eos_frame,
            token_spans: utt.token_spans.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_corpus(path: &Path) -> Result<(CorpusHeader, Vec<Utterance>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty corpus file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: CorpusHeader =
        serde_json::from_str(&first).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(Error::format(
            path,
            format!(
                "unsupported corpus format {} v{}",
                header.format, header.version
            ),
        ));
    }
    let mut utterances = Vec::with_capacity(header.n_utterances);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("record {i}: {e}")))?;
        let data = decode_f64s(&rec.frames_f64le)
            .map_err(|e| Error::format(path, format!("record {i}: {e}")))?;
        let frames = Matrix::from_vec(rec.frames, rec.feature_dim, data)
            .map_err(|e| Error::format(path, format!("record {i}: {e}")))?;
        utterances.push(Utterance {
            id: rec.id,
            frames,
            labels: LabelSequence::from_ids(&rec.labels)?,
            eos_frame: rec.eos_frame,
            token_spans: rec.token_spans,
        });
    }
    if utterances.len() != header.n_utterances {
        return Err(Error::format(
            path,
            format!(
                "header promises {} utterances, found {}",
                header.n_utterances,
                utterances.len()
            ),
        ));
    }
    Ok((header, utterances))
}
