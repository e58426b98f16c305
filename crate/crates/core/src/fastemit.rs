//! FastEmit sequence-level emission regularization.
//!
//! The alignment mass through a node splits into a "predict blank" and a
//! "predict label" part. FastEmit adds `λ` times the label part to the
//! objective. Training uses the resulting gradient rule directly: the label
//! branch of the transducer gradient is scaled by `1 + λ`, the blank branch is
//! left untouched. The regularized objective itself depends on which diagonal
//! it is evaluated on, so it is exposed only as a diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::JointLattice;
use crate::logspace::{log_add, log_sum_exp, LOG_ZERO};
use crate::loss::{diagonal_nodes, gradients, AlphaBetaTables, LossGradients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagonalSelection {
    All,
    /// One-based diagonal index `n` in `1..=T+U`.
    Single(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastEmitConfig {
    pub lambda: f64,
    pub diagonal: DiagonalSelection,
}

impl FastEmitConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Config(format!(
                "fastemit_lambda must be >= 0, got {lambda}"
            )));
        }
        Ok(Self {
            lambda,
            diagonal: DiagonalSelection::All,
        })
    }
}

/// `log P̃(A_{t,u}) = log α(t,u) + log ŷ(t,u) + log β(t,u+1)`, log zero on
/// the top row.
pub fn log_predict_label_mass(
    tables: &AlphaBetaTables,
    lattice: &JointLattice,
    t: usize,
    u: usize,
) -> Result<f64> {
    lattice.check_node(t, u)?;
    if u == lattice.label_len() {
        return Ok(LOG_ZERO);
    }
    Ok(tables.log_alpha.get(t, u) + lattice.log_label(t, u) + tables.log_beta.get(t, u + 1))
}

/// Unnormalized "predict label" mass through node `(t, u)`.
pub fn predict_label_mass(
    tables: &AlphaBetaTables,
    lattice: &JointLattice,
    t: usize,
    u: usize,
) -> Result<f64> {
    Ok(log_predict_label_mass(tables, lattice, t, u)?.exp())
}

/// `-log Σ_{t+u=n} (α(t,u)β(t,u) + λ P̃(A_{t,u}))` for the requested
/// diagonals, as `(n, value)` pairs.
pub fn regularized_loss_diagnostic(
    tables: &AlphaBetaTables,
    lattice: &JointLattice,
    config: &FastEmitConfig,
) -> Result<Vec<(usize, f64)>> {
    let frames = lattice.frames();
    let n_labels = lattice.label_len();
    let max = frames + n_labels;
    let diagonals: Vec<usize> = match config.diagonal {
        DiagonalSelection::All => (1..=max).collect(),
        DiagonalSelection::Single(n) if (1..=max).contains(&n) => vec![n],
        DiagonalSelection::Single(n) => return Err(Error::DiagonalOutOfRange { n, max }),
    };
    let log_lambda = if config.lambda > 0.0 {
        config.lambda.ln()
    } else {
        LOG_ZERO
    };
    let mut out = Vec::with_capacity(diagonals.len());
    for n in diagonals {
        let mut terms = Vec::new();
        for (t, u) in diagonal_nodes(frames, n_labels, n) {
            let through = tables.log_alpha.get(t, u) + tables.log_beta.get(t, u);
            let label = log_predict_label_mass(tables, lattice, t, u)?;
            terms.push(log_add(through, log_lambda + label));
        }
        out.push((n, -log_sum_exp(&terms)));
    }
    Ok(out)
}

/// Transducer gradients with the label branch scaled by `1 + λ`.
pub fn fastemit_gradients(
    lattice: &JointLattice,
    tables: &AlphaBetaTables,
    lambda: f64,
) -> Result<LossGradients> {
    gradients(lattice, tables, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::tests::small_lattice;
    use crate::loss::loss;

    #[test]
    fn label_mass_on_small_lattice() {
        let lat = small_lattice();
        let tables = loss(&lat);
        assert!((predict_label_mass(&tables, &lat, 0, 0).unwrap() - 0.21).abs() < 1e-15);
        assert_eq!(predict_label_mass(&tables, &lat, 0, 1).unwrap(), 0.0);
        assert_eq!(predict_label_mass(&tables, &lat, 1, 1).unwrap(), 0.0);
        assert!(predict_label_mass(&tables, &lat, 2, 0).is_err());
    }

    #[test]
    fn diagnostic_reduces_to_nll_without_lambda() {
        let lat = small_lattice();
        let tables = loss(&lat);
        let cfg = FastEmitConfig::new(0.0).unwrap();
        let values = regularized_loss_diagnostic(&tables, &lat, &cfg).unwrap();
        assert_eq!(values.len(), 3);
        for (_, v) in values {
            assert!((v - tables.nll()).abs() < 1e-12);
        }
    }

    #[test]
    fn diagnostic_first_diagonal_by_hand() {
        let lat = small_lattice();
        let tables = loss(&lat);
        let cfg = FastEmitConfig {
            lambda: 0.01,
            diagonal: DiagonalSelection::Single(1),
        };
        let values = regularized_loss_diagnostic(&tables, &lat, &cfg).unwrap();
        assert_eq!(values.len(), 1);
        let expected = -(0.266 + 0.01 * 0.21f64).ln();
        assert!((values[0].1 - expected).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_diagonal() {
        let lat = small_lattice();
        let tables = loss(&lat);
        for n in [0, 4] {
            let cfg = FastEmitConfig {
                lambda: 0.01,
                diagonal: DiagonalSelection::Single(n),
            };
            assert!(matches!(
                regularized_loss_diagnostic(&tables, &lat, &cfg),
                Err(Error::DiagonalOutOfRange { .. })
            ));
        }
        assert!(FastEmitConfig::new(-1.0).is_err());
    }

    #[test]
    fn label_gradient_scaling_is_exact() {
        let lat = small_lattice();
        let tables = loss(&lat);
        let base = fastemit_gradients(&lat, &tables, 0.0).unwrap();
        let reg = fastemit_gradients(&lat, &tables, 0.04).unwrap();
        for (b, r) in base
            .d_log_label
            .as_slice()
            .iter()
            .zip(reg.d_log_label.as_slice())
        {
            assert_eq!(*r, b * (1.0 + 0.04));
        }
        assert_eq!(base.d_log_blank, reg.d_log_blank);
    }
}
