//! Run configuration and the end-to-end commands: corpus generation,
//! training, evaluation and λ sweeps. Every command is a deterministic
//! function of its [`RunConfig`].
//!
//! Files under `output_dir`:
//!
//! | file | written by |
//! |---|---|
//! | `train.jsonl`, `test.jsonl`, `manifest.json` | generate |
//! | `training_log.csv`, `eval_log.csv`, `checkpoint.bin`, `train_manifest.json` | train |
//! | `report.json`, `report.csv`, `trace.jsonl`, `eval_manifest.json` | eval |
//! | `sweep.csv`, `lambda_<λ>/` | sweep |

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointHeader};
use crate::datagen::{
    generate_split, read_corpus, write_corpus, CorpusConfig, CorpusHeader, Split, Utterance,
};
use crate::datagen::{CORPUS_FORMAT, CORPUS_VERSION};
use crate::decoder::greedy_decode;
use crate::error::{Error, Result};
use crate::metrics::{LatencyReport, UtteranceResult};
use crate::model::{AdamConfig, ModelConfig, Parameters};
use crate::train::{train_with, StepLog, TrainConfig};

pub const TRAIN_CORPUS: &str = "train.jsonl";
pub const TEST_CORPUS: &str = "test.jsonl";
pub const MANIFEST: &str = "manifest.json";
pub const TRAINING_LOG: &str = "training_log.csv";
pub const EVAL_LOG: &str = "eval_log.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_MANIFEST: &str = "train_manifest.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TRACE: &str = "trace.jsonl";
pub const EVAL_MANIFEST: &str = "eval_manifest.json";
pub const SWEEP_CSV: &str = "sweep.csv";

pub const DEFAULT_GRID: [f64; 7] = [0.0, 0.001, 0.004, 0.008, 0.01, 0.02, 0.04];

/// Flat run configuration. Unset keys take their defaults; unknown keys are
/// rejected. `seed` drives corpus generation, weight initialization and
/// data order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_utterances: usize,
    pub n_test_utterances: usize,
    pub vocab_size: usize,
    pub u_range: [usize; 2],
    pub frames_per_token_range: [usize; 2],
    pub trailing_silence_range: [usize; 2],
    pub feature_noise_sigma: f64,
    pub feature_dim: usize,
    pub endpointer: bool,
    pub seed: u64,

    pub encoder_dim: usize,
    pub predictor_dim: usize,
    pub joint_dim: usize,

    pub fastemit_lambda: f64,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub n_steps: usize,
    pub batch_size: usize,

    /// Evaluate on the test split every this many steps; 0 disables.
    pub eval_every: usize,
    pub frame_ms: f64,
    pub max_symbols_per_frame: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            n_utterances: corpus.n_utterances,
            n_test_utterances: corpus.n_test_utterances,
            vocab_size: corpus.vocab_size,
            u_range: corpus.u_range,
            frames_per_token_range: corpus.frames_per_token_range,
            trailing_silence_range: corpus.trailing_silence_range,
            feature_noise_sigma: corpus.feature_noise_sigma,
            feature_dim: corpus.feature_dim,
            endpointer: corpus.endpointer,
            seed: corpus.seed,
            encoder_dim: model.encoder_dim,
            predictor_dim: model.predictor_dim,
            joint_dim: model.joint_dim,
            fastemit_lambda: train.fastemit_lambda,
            learning_rate: train.adam.learning_rate,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            epsilon: train.adam.epsilon,
            clip_norm: train.clip_norm,
            n_steps: train.n_steps,
            batch_size: train.batch_size,
            eval_every: 0,
            frame_ms: crate::metrics::DEFAULT_FRAME_MS,
            max_symbols_per_frame: crate::decoder::DEFAULT_MAX_SYMBOLS_PER_FRAME,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub fastemit_lambda: Option<f64>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub frame_ms: Option<f64>,
    pub endpointer: Option<bool>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults, then the file at `path` if given, then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text).map_err(|e| Error::format(p, e.to_string()))?
            }
            None => Self::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.fastemit_lambda {
            self.fastemit_lambda = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.frame_ms {
            self.frame_ms = v;
        }
        if let Some(v) = o.endpointer {
            self.endpointer = v;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            n_utterances: self.n_utterances,
            n_test_utterances: self.n_test_utterances,
            vocab_size: self.vocab_size,
            u_range: self.u_range,
            frames_per_token_range: self.frames_per_token_range,
            trailing_silence_range: self.trailing_silence_range,
            feature_noise_sigma: self.feature_noise_sigma,
            feature_dim: self.feature_dim,
            seed: self.seed,
            endpointer: self.endpointer,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            encoder_dim: self.encoder_dim,
            predictor_dim: self.predictor_dim,
            joint_dim: self.joint_dim,
            vocab_size: self.vocab_size,
            endpointer: self.endpointer,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            n_steps: self.n_steps,
            batch_size: self.batch_size,
            fastemit_lambda: self.fastemit_lambda,
            clip_norm: self.clip_norm,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            shuffle_seed: self.seed.wrapping_add(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus().validate()?;
        self.model().validate()?;
        self.train().validate()?;
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        if !(self.frame_ms.is_finite() && self.frame_ms > 0.0) {
            return Err(Error::Config(format!(
                "frame_ms must be > 0, got {}",
                self.frame_ms
            )));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::Config("max_symbols_per_frame must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of every field except
    /// `output_dir`, so a run reproduced elsewhere hashes the same.
    pub fn hash(&self) -> String {
        let located = RunConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        sha256_hex(&serde_json::to_vec(&located).expect("config serializes"))
    }

    /// Hash of the fields that determine the corpus.
    pub fn corpus_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.corpus()).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub corpus_hash: String,
    pub seed: u64,
    pub files: Vec<String>,
    /// Caveats on how the outputs were measured.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub config: RunConfig,
}

/// Measurement caveats attached to every evaluation.
pub const EVAL_NOTES: [&str; 2] = [
    "PR/EP latencies use greedy-decoder emission frames, not a finalized production result",
    "eos_frame is the synthetic ground-truth last speech frame, not a forced alignment",
];

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest(
    config: &RunConfig,
    dir: &Path,
    name: &str,
    command: &str,
    files: &[&str],
) -> Result<Manifest> {
    let notes = match command {
        "eval" | "sweep" => EVAL_NOTES.iter().map(|n| n.to_string()).collect(),
        _ => Vec::new(),
    };
    let manifest = Manifest {
        command: command.into(),
        config_hash: config.hash(),
        corpus_hash: config.corpus_hash(),
        seed: config.seed,
        files: files.iter().map(|f| f.to_string()).collect(),
        notes,
        config: config.clone(),
    };
    write_json(&dir.join(name), &manifest)?;
    Ok(manifest)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the train and test corpora and `manifest.json` into `output_dir`.
pub fn cmd_generate(config: &RunConfig) -> Result<Manifest> {
    config.validate()?;
    let dir = &config.output_dir;
    create_dir(dir)?;
    let corpus = config.corpus();
    for (split, name) in [(Split::Train, TRAIN_CORPUS), (Split::Test, TEST_CORPUS)] {
        let utterances = generate_split(&corpus, split)?;
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            vocab_size: corpus.vocab_size,
            feature_dim: corpus.feature_dim,
            endpointer: corpus.endpointer,
            n_utterances: utterances.len(),
            config_hash: config.corpus_hash(),
        };
        write_corpus(&dir.join(name), &header, &utterances)?;
    }
    write_manifest(
        config,
        dir,
        MANIFEST,
        "generate",
        &[TRAIN_CORPUS, TEST_CORPUS],
    )
}

/// Reads a corpus and checks it matches the model it will be used with.
pub fn load_corpus(path: &Path, model: &ModelConfig) -> Result<(CorpusHeader, Vec<Utterance>)> {
    let (header, utterances) = read_corpus(path)?;
    if header.vocab_size != model.vocab_size
        || header.endpointer != model.endpointer
        || header.feature_dim != model.feature_dim
    {
        return Err(Error::Config(format!(
            "{} (vocab_size {}, endpointer {}, feature_dim {}) does not match the model \
             (vocab_size {}, endpointer {}, feature_dim {})",
            path.display(),
            header.vocab_size,
            header.endpointer,
            header.feature_dim,
            model.vocab_size,
            model.endpointer,
            model.feature_dim
        )));
    }
    Ok((header, utterances))
}

pub fn evaluate(
    params: &Parameters,
    corpus: &[Utterance],
    frame_ms: f64,
    max_symbols: usize,
) -> Result<Vec<UtteranceResult>> {
    let eoq = params.config().end_of_query();
    corpus
        .par_iter()
        .map(|utt| {
            let trace = greedy_decode(params, &utt.frames, max_symbols)?;
            Ok(UtteranceResult::new(utt, &trace, frame_ms, eoq))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub final_nll: f64,
    pub checkpoint: PathBuf,
}

/// Trains on `corpus_dir/train.jsonl` and writes the log and checkpoint into
/// `out_dir`. On a numerical failure the log written so far is kept and no
/// checkpoint is produced.
pub fn train_in(config: &RunConfig, corpus_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let model = config.model();
    let (header, corpus) = load_corpus(&corpus_dir.join(TRAIN_CORPUS), &model)?;
    if header.config_hash != config.corpus_hash() {
        return Err(Error::Config(format!(
            "{} was generated from a different corpus configuration; rerun generate",
            corpus_dir.join(TRAIN_CORPUS).display()
        )));
    }
    let test = if config.eval_every > 0 {
        Some(load_corpus(&corpus_dir.join(TEST_CORPUS), &model)?.1)
    } else {
        None
    };
    create_dir(out_dir)?;

    let log_path = out_dir.join(TRAINING_LOG);
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::io(p.clone(), e)
    };
    let mut log = BufWriter::new(File::create(&log_path).map_err(io(&log_path))?);
    writeln!(log, "step,nll,grad_norm").map_err(io(&log_path))?;
    let eval_path = out_dir.join(EVAL_LOG);
    let mut eval_log = match &test {
        Some(_) => {
            let mut w = BufWriter::new(File::create(&eval_path).map_err(io(&eval_path))?);
            writeln!(w, "step,{}", LatencyReport::csv_header()).map_err(io(&eval_path))?;
            Some(w)
        }
        None => None,
    };

    let mut params = Parameters::init(&model)?;
    let mut last = None;
    let result = train_with(
        &mut params,
        &corpus,
        &config.train(),
        |entry: &StepLog, p| {
            writeln!(log, "{},{},{}", entry.step, entry.nll, entry.grad_norm)
                .map_err(io(&log_path))?;
            last = Some(*entry);
            if let (Some(test), Some(w)) = (&test, eval_log.as_mut()) {
                if entry.step.is_multiple_of(config.eval_every) && entry.nll.is_finite() {
                    let results = evaluate(p, test, config.frame_ms, config.max_symbols_per_frame)?;
                    let report = LatencyReport::from_results(&results, config.frame_ms);
                    writeln!(w, "{},{}", entry.step, report.csv_row()).map_err(io(&eval_path))?;
                }
            }
            Ok(())
        },
    );
    log.flush().map_err(io(&log_path))?;
    if let Some(w) = eval_log.as_mut() {
        w.flush().map_err(io(&eval_path))?;
    }
    result?;

    let final_nll = last.map(|l| l.nll).unwrap_or(f64::NAN);
    if config.n_steps > 0 && !final_nll.is_finite() {
        return Err(Error::Numerical(format!("final loss {final_nll}")));
    }
    let header = CheckpointHeader {
        model,
        config_hash: config.hash(),
        fastemit_lambda: config.fastemit_lambda,
        steps: config.n_steps,
    };
    let ckpt = out_dir.join(CHECKPOINT);
    checkpoint::save(&ckpt, &header, &params)?;
    let mut files = vec![TRAINING_LOG, CHECKPOINT];
    if test.is_some() {
        files.insert(1, EVAL_LOG);
    }
    write_manifest(config, out_dir, TRAIN_MANIFEST, "train", &files)?;
    Ok(TrainOutcome {
        steps: config.n_steps,
        final_nll,
        checkpoint: ckpt,
    })
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    train_in(config, &config.output_dir, &config.output_dir)
}

/// Decodes `corpus` with the checkpoint and writes `report.json`,
/// `report.csv` and the per-utterance `trace.jsonl` into `out_dir`.
pub fn eval_in(
    config: &RunConfig,
    checkpoint_path: &Path,
    corpus_path: &Path,
    out_dir: &Path,
) -> Result<LatencyReport> {
    config.validate()?;
    let (_, params) = checkpoint::load(checkpoint_path)?;
    let (_, corpus) = load_corpus(corpus_path, params.config())?;
    let results = evaluate(
        &params,
        &corpus,
        config.frame_ms,
        config.max_symbols_per_frame,
    )?;
    let report = LatencyReport::from_results(&results, config.frame_ms);
    create_dir(out_dir)?;
    write_json(&out_dir.join(REPORT_JSON), &report)?;
    let csv = format!("{}\n{}\n", LatencyReport::csv_header(), report.csv_row());
    let csv_path = out_dir.join(REPORT_CSV);
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let trace_path = out_dir.join(TRACE);
    let mut trace = String::new();
    for r in &results {
        trace.push_str(
            &serde_json::to_string(r).map_err(|e| Error::format(&trace_path, e.to_string()))?,
        );
        trace.push('\n');
    }
    fs::write(&trace_path, trace).map_err(|e| Error::io(&trace_path, e))?;
    write_manifest(
        config,
        out_dir,
        EVAL_MANIFEST,
        "eval",
        &[REPORT_JSON, REPORT_CSV, TRACE],
    )?;
    Ok(report)
}

/// Evaluates `checkpoint` (default `output_dir/checkpoint.bin`) on `corpus`
/// (default `output_dir/test.jsonl`).
pub fn cmd_eval(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    corpus: Option<&Path>,
) -> Result<LatencyReport> {
    let dir = &config.output_dir;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(CHECKPOINT));
    let corpus = corpus
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(TEST_CORPUS));
    eval_in(config, &ckpt, &corpus, dir)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub outcome: std::result::Result<LatencyReport, String>,
}

impl SweepRow {
    pub fn status(&self) -> String {
        match &self.outcome {
            Ok(_) => "ok".into(),
            Err(msg) => format!("failed: {}", msg.replace([',', '\n', '\r'], " ")),
        }
    }

    /// `lambda,status,<report fields>`; report fields are empty on failure.
    pub fn csv_row(&self) -> String {
        let body = match &self.outcome {
            Ok(report) => report.csv_row(),
            Err(_) => ",".repeat(crate::metrics::REPORT_FIELDS.len() - 1),
        };
        format!("{},{},{}", self.lambda, self.status(), body)
    }

    pub fn csv_header() -> String {
        format!("lambda,status,{}", LatencyReport::csv_header())
    }
}

pub fn member_dir(root: &Path, lambda: f64) -> PathBuf {
    root.join(format!("lambda_{lambda}"))
}

/// Generates the corpus once, then trains and evaluates one model per λ
/// from the same seed. Member failures are recorded in their row.
pub fn cmd_sweep(config: &RunConfig, grid: &[f64]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    cmd_generate(config)?;
    let root = &config.output_dir;
    let rows: Vec<SweepRow> = grid
        .par_iter()
        .map(|&lambda| {
            let member = RunConfig {
                fastemit_lambda: lambda,
                output_dir: member_dir(root, lambda),
                ..config.clone()
            };
            let outcome = train_in(&member, root, &member.output_dir)
                .and_then(|out| {
                    eval_in(
                        &member,
                        &out.checkpoint,
                        &root.join(TEST_CORPUS),
                        &member.output_dir,
                    )
                })
                .map_err(|e| e.to_string());
            SweepRow { lambda, outcome }
        })
        .collect();
    let mut csv = SweepRow::csv_header() + "\n";
    for row in &rows {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    let path = root.join(SWEEP_CSV);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    write_manifest(config, root, "sweep_manifest.json", "sweep", &[SWEEP_CSV])?;
    Ok(rows)
}
