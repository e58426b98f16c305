//! Brute-force references: exhaustive alignment enumeration and central
//! finite differences. Independent of the forward-backward code path; used by
//! tests and the `selftest` command.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lattice::{path_probability, AlignmentPath, JointLattice, LabelSequence, Tensor3};
use crate::logspace::{log_sum_exp, LOG_ZERO};
use crate::loss::{loss, NodeTable};

pub const MAX_FRAMES: usize = 8;
pub const MAX_LABELS: usize = 6;

pub fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n.saturating_sub(k));
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of complete alignments for `(T, U)`: the final blank is forced, the
/// other `T - 1` blanks and `U` labels interleave freely.
pub fn path_count(frames: usize, n_labels: usize) -> u128 {
    binomial((frames + n_labels - 1) as u64, n_labels as u64)
}

/// Every move sequence with `blanks` blank moves and `labels` label moves
/// (`true` = label), in lexicographic order with blank first.
fn interleavings(blanks: usize, labels: usize) -> Vec<Vec<bool>> {
    fn rec(blanks: usize, labels: usize, prefix: &mut Vec<bool>, out: &mut Vec<Vec<bool>>) {
        if blanks == 0 && labels == 0 {
            out.push(prefix.clone());
            return;
        }
        if blanks > 0 {
            prefix.push(false);
            rec(blanks - 1, labels, prefix, out);
            prefix.pop();
        }
        if labels > 0 {
            prefix.push(true);
            rec(blanks, labels - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(
        blanks,
        labels,
        &mut Vec::with_capacity(blanks + labels),
        &mut out,
    );
    out
}

/// All complete alignments of `labels` over `frames` frames.
pub fn enumerate_paths(frames: usize, labels: &LabelSequence) -> Result<Vec<AlignmentPath>> {
    let n_labels = labels.len();
    if frames == 0 {
        return Err(Error::Shape("a lattice needs at least one frame".into()));
    }
    if frames > MAX_FRAMES || n_labels > MAX_LABELS {
        return Err(Error::EnumerationGuard {
            frames,
            labels: n_labels,
            count: path_count(frames, n_labels),
        });
    }
    Ok(interleavings(frames - 1, n_labels)
        .into_iter()
        .map(|mut moves| {
            moves.push(false);
            AlignmentPath::from_moves(&moves, labels)
        })
        .collect())
}

/// `log P(y|x)` as the log-sum-exp of every enumerated path probability.
pub fn brute_force_likelihood(lattice: &JointLattice) -> Result<f64> {
    let paths = enumerate_paths(lattice.frames(), lattice.labels())?;
    let logs = paths
        .iter()
        .map(|p| path_probability(lattice, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&logs))
}

/// `log α(t,u)` as the sum over every partial path from the origin to
/// `(t, u)`.
pub fn brute_force_forward(lattice: &JointLattice) -> Result<NodeTable> {
    let frames = lattice.frames();
    let n_labels = lattice.label_len();
    if frames > MAX_FRAMES || n_labels > MAX_LABELS {
        return Err(Error::EnumerationGuard {
            frames,
            labels: n_labels,
            count: path_count(frames, n_labels),
        });
    }
    let mut table = NodeTable::filled(frames, n_labels + 1, LOG_ZERO);
    for t in 0..frames {
        for u in 0..=n_labels {
            let logs: Vec<f64> = interleavings(t, u)
                .iter()
                .map(|moves| {
                    let (mut tt, mut uu, mut acc) = (0, 0, 0.0);
                    for &emit in moves {
                        if emit {
                            acc += lattice.log_label(tt, uu);
                            uu += 1;
                        } else {
                            acc += lattice.log_blank(tt, uu);
                            tt += 1;
                        }
                    }
                    acc
                })
                .collect();
            table.set(t, u, log_sum_exp(&logs));
        }
    }
    Ok(table)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Forward differences, kept for the O(h) vs O(h²) comparison.
pub fn forward_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let base = f(x);
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig;
            (up - base) / step
        })
        .collect()
}

/// NLL of the lattice built from `logits`, for use as a finite-difference
/// objective.
pub fn nll_of_logits(logits: &Tensor3, labels: &LabelSequence) -> f64 {
    match JointLattice::from_logits(logits, labels.clone()) {
        Ok(lat) => loss(&lat).nll(),
        Err(_) => f64::NAN,
    }
}

/// Central differences of the NLL with respect to every logit.
pub fn finite_difference_gradients(
    logits: &Tensor3,
    labels: &LabelSequence,
    step: f64,
) -> Result<Tensor3> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let dims = logits.dims();
    let grad = central_difference(
        |x| {
            let probe = Tensor3::from_vec(dims, x.to_vec()).expect("same shape");
            nll_of_logits(&probe, labels)
        },
        logits.as_slice(),
        step,
    );
    Tensor3::from_vec(dims, grad)
}

/// Largest relative error `|a - b| / max(|a|, |b|, floor)` between two
/// gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Random lattice with `frames` in `1..=max_frames`, `labels` in
/// `0..=max_labels` and `vocab` non-blank tokens in `1..=max_vocab`. Logits
/// are uniform in `[-3, 3]`.
pub fn random_lattice<R: Rng>(
    rng: &mut R,
    max_frames: usize,
    max_labels: usize,
    max_vocab: usize,
) -> JointLattice {
    let frames = rng.random_range(1..=max_frames.max(1));
    let n_labels = rng.random_range(0..=max_labels);
    let vocab = rng.random_range(1..=max_vocab.max(1));
    let ids: Vec<usize> = (0..n_labels).map(|_| rng.random_range(1..=vocab)).collect();
    let labels = LabelSequence::from_ids(&ids).expect("non-blank ids");
    let logits = Tensor3::from_fn([frames, n_labels + 1, vocab + 1], |_, _, _| {
        rng.random_range(-3.0..3.0)
    });
    JointLattice::from_logits(&logits, labels).expect("finite logits")
}

/// `max |a - b| / max(max |a|, max |b|)`: the error relative to the largest
/// gradient entry, zero when both vectors are zero.
pub fn normwise_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf_norm(analytic).max(inf_norm(numeric));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
