//! Transducer negative log-likelihood by forward-backward over the lattice.
//!
//! All tables are in log space. The recurrences are
//!
//! ```text
//! α(t,u) = ŷ(t,u-1) α(t,u-1) + b(t-1,u) α(t-1,u),        α(0,0) = 1
//! β(t,u) = ŷ(t,u) β(t,u+1) + b(t,u) β(t+1,u),            β(T-1,U) = b(T-1,U)
//! ```
//!
//! with out-of-lattice terms contributing zero probability.

use crate::error::{Error, Result};
use crate::lattice::{JointLattice, Tensor3};
use crate::logspace::{log_add, log_sum_exp, LOG_ZERO};

/// Row-major `(T, U + 1)` table of per-node values.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTable {
    frames: usize,
    cols: usize,
    data: Vec<f64>,
}

impl NodeTable {
    pub fn filled(frames: usize, cols: usize, value: f64) -> Self {
        Self {
            frames,
            cols,
            data: vec![value; frames * cols],
        }
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize) -> f64 {
        self.data[t * self.cols + u]
    }

    #[inline]
    pub fn set(&mut self, t: usize, u: usize, value: f64) {
        self.data[t * self.cols + u] = value;
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            frames: self.frames,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlphaBetaTables {
    pub log_alpha: NodeTable,
    pub log_beta: NodeTable,
    /// `log P(y | x)`; log zero when no alignment has positive probability.
    pub log_likelihood: f64,
}

impl AlphaBetaTables {
    pub fn frames(&self) -> usize {
        self.log_alpha.frames()
    }

    pub fn label_len(&self) -> usize {
        self.log_alpha.cols() - 1
    }

    pub fn is_impossible(&self) -> bool {
        self.log_likelihood == LOG_ZERO
    }

    pub fn nll(&self) -> f64 {
        -self.log_likelihood
    }
}

#[derive(Debug, Clone)]
pub struct LossGradients {
    /// ∂L/∂log ŷ(t,u); the `u = U` column is always zero.
    pub d_log_label: NodeTable,
    /// ∂L/∂log b(t,u).
    pub d_log_blank: NodeTable,
    /// ∂L/∂logits after the per-node softmax Jacobian.
    pub d_logits: Tensor3,
    /// Set when the likelihood is zero and there is no signal to propagate;
    /// every table is then all-zero.
    pub degenerate: bool,
}

pub fn forward(lattice: &JointLattice) -> NodeTable {
    let frames = lattice.frames();
    let n_labels = lattice.label_len();
    let mut alpha = NodeTable::filled(frames, n_labels + 1, LOG_ZERO);
    for t in 0..frames {
        for u in 0..=n_labels {
            let value = if t == 0 && u == 0 {
                0.0
            } else {
                let from_label = if u > 0 {
                    alpha.get(t, u - 1) + lattice.log_label(t, u - 1)
                } else {
                    LOG_ZERO
                };
                let from_blank = if t > 0 {
                    alpha.get(t - 1, u) + lattice.log_blank(t - 1, u)
                } else {
                    LOG_ZERO
                };
                log_add(from_label, from_blank)
            };
            alpha.set(t, u, value);
        }
    }
    alpha
}

pub fn backward(lattice: &JointLattice) -> NodeTable {
    let frames = lattice.frames();
    let n_labels = lattice.label_len();
    let mut beta = NodeTable::filled(frames, n_labels + 1, LOG_ZERO);
    for t in (0..frames).rev() {
        for u in (0..=n_labels).rev() {
            let value = if t == frames - 1 && u == n_labels {
                lattice.log_blank(t, u)
            } else {
                let via_label = if u < n_labels {
                    lattice.log_label(t, u) + beta.get(t, u + 1)
                } else {
                    LOG_ZERO
                };
                let via_blank = if t + 1 < frames {
                    lattice.log_blank(t, u) + beta.get(t + 1, u)
                } else {
                    LOG_ZERO
                };
                log_add(via_label, via_blank)
            };
            beta.set(t, u, value);
        }
    }
    beta
}

/// Runs forward-backward and returns the tables. The negative
/// log-likelihood is `tables.nll()`, `+inf` when every path is impossible.
pub fn loss(lattice: &JointLattice) -> AlphaBetaTables {
    let log_alpha = forward(lattice);
    let log_beta = backward(lattice);
    let (last_t, last_u) = (lattice.frames() - 1, lattice.label_len());
    let log_likelihood = log_alpha.get(last_t, last_u) + lattice.log_blank(last_t, last_u);
    AlphaBetaTables {
        log_alpha,
        log_beta,
        log_likelihood,
    }
}

/// `log Σ_{t+u=n} α(t,u)β(t,u)` for every one-based diagonal
/// `n = 1..=T+U` (frames counted from one). Each entry should equal
/// the log-likelihood.
pub fn diagonal_log_likelihoods(tables: &AlphaBetaTables) -> Vec<f64> {
    let frames = tables.frames();
    let n_labels = tables.label_len();
    (1..=frames + n_labels)
        .map(|n| {
            let terms: Vec<f64> = diagonal_nodes(frames, n_labels, n)
                .map(|(t, u)| tables.log_alpha.get(t, u) + tables.log_beta.get(t, u))
                .collect();
            log_sum_exp(&terms)
        })
        .collect()
}

/// Zero-based nodes `(t, u)` with `(t + 1) + u = n`.
pub fn diagonal_nodes(
    frames: usize,
    n_labels: usize,
    n: usize,
) -> impl Iterator<Item = (usize, usize)> {
    (0..=n_labels).filter_map(move |u| {
        let t1 = n.checked_sub(u)?;
        (t1 >= 1 && t1 <= frames).then(|| (t1 - 1, u))
    })
}

/// Probability mass of complete alignments through node `(t, u)`.
pub fn node_posterior(tables: &AlphaBetaTables, t: usize, u: usize) -> Result<f64> {
    if t >= tables.frames() || u > tables.label_len() {
        return Err(Error::NodeOutOfRange {
            t,
            u,
            frames: tables.frames(),
            labels: tables.label_len(),
        });
    }
    if tables.is_impossible() {
        return Ok(0.0);
    }
    Ok((tables.log_alpha.get(t, u) + tables.log_beta.get(t, u) - tables.log_likelihood).exp())
}

/// Splits the mass through node `(t, u)` into its two outgoing branches,
/// returned in log space as `(blank, label)`:
///
/// `α(t,u)β(t,u) = α(t,u) b(t,u) β(t+1,u) + α(t,u) ŷ(t,u) β(t,u+1)`.
///
/// The terminal blank at `(T-1, U)` counts as the blank branch.
pub fn log_branch_masses(
    lattice: &JointLattice,
    tables: &AlphaBetaTables,
    t: usize,
    u: usize,
) -> Result<(f64, f64)> {
    lattice.check_node(t, u)?;
    let (frames, n_labels) = (lattice.frames(), lattice.label_len());
    let alpha = tables.log_alpha.get(t, u);
    let blank = if t + 1 < frames {
        alpha + lattice.log_blank(t, u) + tables.log_beta.get(t + 1, u)
    } else if u == n_labels {
        alpha + lattice.log_blank(t, u)
    } else {
        LOG_ZERO
    };
    let label = if u < n_labels {
        alpha + lattice.log_label(t, u) + tables.log_beta.get(t, u + 1)
    } else {
        LOG_ZERO
    };
    Ok((blank, label))
}

/// Closed-form gradients of the NLL. `label_scale` multiplies the label
/// branch before the softmax chain; `1.0` gives the plain transducer loss.
pub(crate) fn scaled_gradients(
    lattice: &JointLattice,
    tables: &AlphaBetaTables,
    label_scale: f64,
) -> LossGradients {
    let frames = lattice.frames();
    let n_labels = lattice.label_len();
    let mut d_log_label = NodeTable::filled(frames, n_labels + 1, 0.0);
    let mut d_log_blank = NodeTable::filled(frames, n_labels + 1, 0.0);
    let mut d_logits = Tensor3::zeros(lattice.log_probs().dims());

    if tables.is_impossible() {
        return LossGradients {
            d_log_label,
            d_log_blank,
            d_logits,
            degenerate: true,
        };
    }

    let log_p = tables.log_likelihood;
    for t in 0..frames {
        for u in 0..=n_labels {
            let alpha = tables.log_alpha.get(t, u);
            let g_label = if u < n_labels {
                -(alpha + lattice.log_label(t, u) + tables.log_beta.get(t, u + 1) - log_p).exp()
            } else {
                0.0
            };
            let g_blank = if t + 1 < frames {
                -(alpha + lattice.log_blank(t, u) + tables.log_beta.get(t + 1, u) - log_p).exp()
            } else if u == n_labels {
                -(alpha + lattice.log_blank(t, u) - log_p).exp()
            } else {
                0.0
            };
            let g_label = g_label * label_scale;
            d_log_label.set(t, u, g_label);
            d_log_blank.set(t, u, g_blank);

            // Chain through log-softmax: ∂/∂z_k = g_k - p_k Σ_j g_j.
            let total = g_label + g_blank;
            if total == 0.0 {
                continue;
            }
            let probs = lattice.log_probs().row(t, u);
            let row = d_logits.row_mut(t, u);
            for (out, &lp) in row.iter_mut().zip(probs) {
                *out = -lp.exp() * total;
            }
            row[0] += g_blank;
            if let Some(k) = lattice.labels().next_after(u) {
                row[k.0] += g_label;
            }
        }
    }
    LossGradients {
        d_log_label,
        d_log_blank,
        d_logits,
        degenerate: false,
    }
}

/// Gradients of the NLL, with the FastEmit label scaling `(1 + lambda)`
/// applied when `lambda > 0`.
pub fn gradients(
    lattice: &JointLattice,
    tables: &AlphaBetaTables,
    lambda: f64,
) -> Result<LossGradients> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    Ok(scaled_gradients(lattice, tables, 1.0 + lambda))
}
