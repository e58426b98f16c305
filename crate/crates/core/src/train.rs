//! Mini-batch training of the toy transducer with FastEmit gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Utterance;
use crate::error::{Error, Result};
use crate::fastemit::fastemit_gradients;
use crate::lattice::JointLattice;
use crate::loss::loss;
use crate::model::{
    clip_global_norm, optimizer_step, AdamConfig, AdamState, ForwardPass, Parameters,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_steps: usize,
    pub batch_size: usize,
    pub fastemit_lambda: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    /// Seed for the data order.
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_steps: 3000,
            batch_size: 8,
            fastemit_lambda: 0.0,
            clip_norm: 5.0,
            adam: AdamConfig::default(),
            shuffle_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.fastemit_lambda.is_finite() && self.fastemit_lambda >= 0.0) {
            return Err(Error::Config(format!(
                "fastemit_lambda must be >= 0, got {}",
                self.fastemit_lambda
            )));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Mean unregularized NLL over the batch.
    pub nll: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// NLL and parameter gradient for one utterance.
pub fn utterance_gradient(
    params: &Parameters,
    utt: &Utterance,
    lambda: f64,
) -> Result<(f64, Parameters)> {
    let pass = ForwardPass::run(params, &utt.frames, &utt.labels)?;
    let lattice = JointLattice::from_logits(&pass.logits, utt.labels.clone())?;
    let tables = loss(&lattice);
    let nll = tables.nll();
    if !nll.is_finite() {
        return Err(Error::Numerical(format!(
            "utterance {} has NLL {nll}",
            utt.id
        )));
    }
    let grads = fastemit_gradients(&lattice, &tables, lambda)?;
    let param_grads = pass.backward(params, &utt.frames, &utt.labels, &grads.d_logits)?;
    Ok((nll, param_grads))
}

/// Mean NLL and mean gradient over `batch`, reduced in batch order.
pub fn batch_gradient(
    params: &Parameters,
    batch: &[&Utterance],
    lambda: f64,
) -> Result<(f64, Parameters)> {
    let parts: Vec<(f64, Parameters)> = batch
        .par_iter()
        .map(|utt| utterance_gradient(params, utt, lambda))
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    let mut nll = 0.0;
    for (l, g) in &parts {
        nll += l;
        total.add_assign(g);
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    Ok((nll * scale, total))
}

/// Trains in place. Each completed step is appended to `log`, so a caller
/// still holds the partial log when training aborts.
pub fn train(
    params: &mut Parameters,
    corpus: &[Utterance],
    config: &TrainConfig,
    log: &mut Vec<StepLog>,
) -> Result<()> {
    train_with(params, corpus, config, |entry, _| {
        log.push(*entry);
        Ok(())
    })
}

/// Trains in place, calling `on_step` after every optimizer update with the
/// step record and the updated parameters. A step whose loss or gradient is
/// non-finite is reported to `on_step` before training stops with a
/// numerical error; its update is not applied.
pub fn train_with(
    params: &mut Parameters,
    corpus: &[Utterance],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepLog, &Parameters) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut state = AdamState::new(params);
    for step in 1..=config.n_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&corpus[order[cursor]]);
            cursor += 1;
        }
        let (nll, mut grads) = match batch_gradient(params, &batch, config.fastemit_lambda) {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                on_step(
                    &StepLog {
                        step,
                        nll: f64::NAN,
                        grad_norm: f64::NAN,
                    },
                    params,
                )?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
        if !nll.is_finite() || !grad_norm.is_finite() {
            on_step(
                &StepLog {
                    step,
                    nll,
                    grad_norm,
                },
                params,
            )?;
            return Err(Error::Numerical(format!(
                "step {step}: nll {nll}, grad norm {grad_norm}"
            )));
        }
        optimizer_step(params, &grads, &mut state, &config.adam);
        on_step(
            &StepLog {
                step,
                nll,
                grad_norm,
            },
            params,
        )?;
    }
    Ok(())
}
