//! Fixed-seed self-checks of the loss against independent references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fastemit::{
    fastemit_gradients, regularized_loss_diagnostic, DiagonalSelection, FastEmitConfig,
};
use crate::lattice::{JointLattice, LabelSequence, Tensor3};
use crate::logspace::log_add;
use crate::loss::{
    diagonal_log_likelihoods, diagonal_nodes, gradients, log_branch_masses, loss, AlphaBetaTables,
};
use crate::model::{ForwardPass, ModelConfig, Parameters};
use crate::oracle::{
    brute_force_likelihood, central_difference, finite_difference_gradients,
    normwise_relative_error, random_lattice,
};
use crate::tensor::Matrix;

pub const MAX_FRAMES: usize = 5;
pub const MAX_LABELS: usize = 4;
pub const MAX_VOCAB: usize = 5;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn lattices(cases: usize, seed: u64) -> impl Iterator<Item = JointLattice> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases).map(move |_| random_lattice(&mut rng, MAX_FRAMES, MAX_LABELS, MAX_VOCAB))
}

/// `|log P_forward − log P_enumerated|`.
pub fn oracle_suite(cases: usize, seed: u64) -> SuiteResult {
    let max_error = lattices(cases, seed)
        .map(|lat| {
            let exact = brute_force_likelihood(&lat).expect("within the enumeration guard");
            (loss(&lat).log_likelihood - exact).abs()
        })
        .fold(0.0, f64::max);
    SuiteResult {
        name: "oracle",
        cases,
        max_error,
        tolerance: 1e-10,
    }
}

/// `|log Σ_diag αβ − log P|` over every diagonal.
pub fn diagonal_suite(cases: usize, seed: u64) -> SuiteResult {
    let max_error = lattices(cases, seed)
        .map(|lat| {
            let tables = loss(&lat);
            diagonal_log_likelihoods(&tables)
                .into_iter()
                .map(|d| (d - tables.log_likelihood).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    SuiteResult {
        name: "diagonal",
        cases,
        max_error,
        tolerance: 1e-9,
    }
}

/// Relative error of the two-branch split at every node, and of the
/// diagonal sum of branch masses against `P`.
pub fn decomposition_error(lat: &JointLattice, tables: &AlphaBetaTables) -> f64 {
    let rel = |log_a: f64, log_b: f64| {
        if log_a == log_b {
            0.0
        } else {
            (log_a - log_b).exp_m1().abs()
        }
    };
    let (frames, n_labels) = (lat.frames(), lat.label_len());
    let mut worst: f64 = 0.0;
    for n in 1..=frames + n_labels {
        let mut diag = f64::NEG_INFINITY;
        for (t, u) in diagonal_nodes(frames, n_labels, n) {
            let (blank, label) = log_branch_masses(lat, tables, t, u).expect("node in range");
            let split = log_add(blank, label);
            worst = worst.max(rel(
                split,
                tables.log_alpha.get(t, u) + tables.log_beta.get(t, u),
            ));
            diag = log_add(diag, split);
        }
        worst = worst.max(rel(diag, tables.log_likelihood));
    }
    worst
}

pub fn decomposition_suite(cases: usize, seed: u64) -> SuiteResult {
    let max_error = lattices(cases, seed)
        .map(|lat| decomposition_error(&lat, &loss(&lat)))
        .fold(0.0, f64::max);
    SuiteResult {
        name: "decomposition",
        cases,
        max_error,
        tolerance: 1e-9,
    }
}

/// Compares `analytic(lattice)` with central differences of the NLL with
/// respect to the logits, relative to the largest gradient entry of each
/// lattice.
pub fn gradient_suite_with(
    cases: usize,
    seed: u64,
    analytic: impl Fn(&JointLattice) -> Tensor3,
) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error: f64 = 0.0;
    for _ in 0..cases {
        // Log-probabilities are their own log-softmax, so they serve as logits.
        let lat = random_lattice(&mut rng, MAX_FRAMES, MAX_LABELS, MAX_VOCAB);
        let logits = lat.log_probs().clone();
        let numeric =
            finite_difference_gradients(&logits, lat.labels(), FD_STEP).expect("positive step");
        let g = analytic(&lat);
        max_error = max_error.max(normwise_relative_error(g.as_slice(), numeric.as_slice()));
    }
    SuiteResult {
        name: "gradient",
        cases,
        max_error,
        tolerance: 1e-6,
    }
}

pub fn gradient_suite(cases: usize, seed: u64) -> SuiteResult {
    gradient_suite_with(cases, seed, |lat| {
        gradients(lat, &loss(lat), 0.0)
            .expect("lambda 0 is valid")
            .d_logits
    })
}

/// How far the FastEmit gradient rule is from the exact logit gradient of
/// the regularized objective evaluated on a single diagonal. Returns the
/// smallest and largest normwise relative discrepancy over every diagonal
/// of every lattice. This is a measurement, not a pass/fail check: the
/// objective differs from diagonal to diagonal, so no single gradient can
/// match all of them.
pub fn fastemit_rule_discrepancy(cases: usize, seed: u64, lambda: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for lat in lattices(cases, seed) {
        let logits = lat.log_probs().clone();
        let labels = lat.labels().clone();
        let rule = fastemit_gradients(&lat, &loss(&lat), lambda)
            .expect("valid lambda")
            .d_logits;
        for n in 1..=lat.frames() + lat.label_len() {
            let config = FastEmitConfig {
                lambda,
                diagonal: DiagonalSelection::Single(n),
            };
            let objective = |x: &[f64]| {
                let probe = Tensor3::from_vec(logits.dims(), x.to_vec()).expect("same shape");
                let lat = JointLattice::from_logits(&probe, labels.clone()).expect("finite logits");
                regularized_loss_diagnostic(&loss(&lat), &lat, &config).expect("diagonal in range")
                    [0]
                .1
            };
            let numeric = central_difference(objective, logits.as_slice(), FD_STEP);
            let err = normwise_relative_error(rule.as_slice(), &numeric);
            lo = lo.min(err);
            hi = hi.max(err);
        }
    }
    (lo, hi)
}

/// NLL of the toy model on one utterance.
pub fn model_nll(params: &Parameters, frames: &Matrix, labels: &LabelSequence) -> f64 {
    let pass = ForwardPass::run(params, frames, labels).expect("shapes match");
    let lattice = JointLattice::from_logits(&pass.logits, labels.clone()).expect("finite logits");
    loss(&lattice).nll()
}

/// Back-propagated parameter gradient of the NLL with FastEmit weight
/// `lambda`.
pub fn model_gradient(
    params: &Parameters,
    frames: &Matrix,
    labels: &LabelSequence,
    lambda: f64,
) -> Parameters {
    let pass = ForwardPass::run(params, frames, labels).expect("shapes match");
    let lattice = JointLattice::from_logits(&pass.logits, labels.clone()).expect("finite logits");
    let g = gradients(&lattice, &loss(&lattice), lambda).expect("valid lambda");
    pass.backward(params, frames, labels, &g.d_logits)
        .expect("shapes match")
}

/// Random parameters (uniform in `[-scale, scale]`), frames and labels for
/// `config`, drawn from `seed`.
pub fn random_model_case(
    config: &ModelConfig,
    n_frames: usize,
    n_labels: usize,
    scale: f64,
    seed: u64,
) -> (Parameters, Matrix, LabelSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::zeros(config).expect("valid config");
    for w in params.as_mut_slice() {
        *w = rng.random_range(-scale..scale);
    }
    let data: Vec<f64> = (0..n_frames * config.feature_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let frames = Matrix::from_vec(n_frames, config.feature_dim, data).expect("sized");
    let ids: Vec<usize> = (0..n_labels)
        .map(|_| rng.random_range(1..=config.vocab_size))
        .collect();
    (
        params,
        frames,
        LabelSequence::from_ids(&ids).expect("non-blank"),
    )
}

/// Normwise relative error between the back-propagated parameter gradient
/// and central differences of the NLL over every parameter.
pub fn model_gradient_error(params: &Parameters, frames: &Matrix, labels: &LabelSequence) -> f64 {
    let analytic = model_gradient(params, frames, labels, 0.0);
    let numeric = central_difference(
        |x| {
            let mut probe = params.clone();
            probe.as_mut_slice().copy_from_slice(x);
            model_nll(&probe, frames, labels)
        },
        params.as_slice(),
        FD_STEP,
    );
    normwise_relative_error(analytic.as_slice(), &numeric)
}

/// Every suite with its default case count.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        oracle_suite(1000, seed),
        diagonal_suite(1000, seed),
        decomposition_suite(1000, seed),
        gradient_suite(100, seed),
    ]
}
