//! Alignment-lattice data model shared by the loss, the regularizer, the
//! oracle and the decoder.
//!
//! Frames are indexed `t = 0..T` (frame `t + 1` in one-based terms) and
//! label-prefix lengths `u = 0..=U`. Node `(t, u)` means "u labels already
//! emitted while consuming frame t". Token 0 is always the blank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::{log_sum_exp, LOG_ZERO};
pub use crate::tensor::Tensor3;

/// Tolerance used when validating that a node row is a distribution.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub usize);

impl TokenId {
    pub const BLANK: TokenId = TokenId(0);

    pub fn is_blank(self) -> bool {
        self.0 == 0
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A blank-free target sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSequence(Vec<TokenId>);

impl LabelSequence {
    pub fn new(tokens: Vec<TokenId>) -> Result<Self> {
        if let Some(pos) = tokens.iter().position(|t| t.is_blank()) {
            return Err(Error::BlankInLabels(pos));
        }
        Ok(Self(tokens))
    }

    pub fn from_ids(ids: &[usize]) -> Result<Self> {
        Self::new(ids.iter().copied().map(TokenId).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    /// Label emitted when leaving prefix length `u`, i.e. `y_{u+1}`.
    pub fn next_after(&self, u: usize) -> Option<TokenId> {
        self.0.get(u).copied()
    }

    /// Checks every token against a vocabulary of `vocab_size` non-blank ids.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|t| t.0 > vocab_size) {
            Some(t) => Err(Error::UnknownToken {
                id: t.0,
                max: vocab_size,
            }),
            None => Ok(()),
        }
    }
}

/// Per-node log-distributions over the extended vocabulary, paired with the
/// target sequence they are scored against.
#[derive(Debug, Clone)]
pub struct JointLattice {
    log_probs: Tensor3,
    labels: LabelSequence,
}

impl JointLattice {
    /// Log-softmax over the last axis of `logits`, which must be shaped
    /// `(T, U + 1, V + 1)` with `U = labels.len()`.
    pub fn from_logits(logits: &Tensor3, labels: LabelSequence) -> Result<Self> {
        let [frames, rows, vocab] = logits.dims();
        Self::check_dims(frames, rows, vocab, &labels)?;
        let mut log_probs = Tensor3::zeros(logits.dims());
        for t in 0..frames {
            for u in 0..rows {
                let row = logits.row(t, u);
                if let Some(k) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteLogit {
                        t,
                        u,
                        k,
                        value: row[k],
                    });
                }
                let lse = log_sum_exp(row);
                for (out, &x) in log_probs.row_mut(t, u).iter_mut().zip(row) {
                    *out = x - lse;
                }
            }
        }
        Ok(Self { log_probs, labels })
    }

    /// Wraps already-normalized log-probabilities, checking every node row.
    pub fn from_log_probs(log_probs: Tensor3, labels: LabelSequence) -> Result<Self> {
        let [frames, rows, vocab] = log_probs.dims();
        Self::check_dims(frames, rows, vocab, &labels)?;
        for t in 0..frames {
            for u in 0..rows {
                let row = log_probs.row(t, u);
                let lse = log_sum_exp(row);
                if row.iter().any(|v| v.is_nan() || *v > 0.0)
                    || lse.is_nan()
                    || lse.abs() > NORMALIZATION_TOL
                {
                    return Err(Error::NotNormalized { t, u, lse });
                }
            }
        }
        Ok(Self { log_probs, labels })
    }

    fn check_dims(frames: usize, rows: usize, vocab: usize, labels: &LabelSequence) -> Result<()> {
        if frames == 0 {
            return Err(Error::Shape("a lattice needs at least one frame".into()));
        }
        if rows != labels.len() + 1 {
            return Err(Error::Shape(format!(
                "second axis has {rows} rows but {} labels need {}",
                labels.len(),
                labels.len() + 1
            )));
        }
        if vocab < 2 {
            return Err(Error::Shape(
                "the vocabulary needs the blank plus at least one token".into(),
            ));
        }
        labels.check_vocab(vocab - 1)
    }

    /// Number of frames `T`.
    pub fn frames(&self) -> usize {
        self.log_probs.dims()[0]
    }

    /// Number of labels `U`.
    pub fn label_len(&self) -> usize {
        self.labels.len()
    }

    /// Size of the extended vocabulary, `V + 1`.
    pub fn vocab_with_blank(&self) -> usize {
        self.log_probs.dims()[2]
    }

    pub fn labels(&self) -> &LabelSequence {
        &self.labels
    }

    pub fn log_probs(&self) -> &Tensor3 {
        &self.log_probs
    }

    #[inline]
    pub fn log_prob(&self, t: usize, u: usize, k: TokenId) -> f64 {
        self.log_probs.get(t, u, k.0)
    }

    /// `log b(t, u)`.
    #[inline]
    pub fn log_blank(&self, t: usize, u: usize) -> f64 {
        self.log_probs.get(t, u, 0)
    }

    /// `log ŷ(t, u)`: log-probability of the next label at node `(t, u)`;
    /// log zero on the top row where no label remains.
    #[inline]
    pub fn log_label(&self, t: usize, u: usize) -> f64 {
        match self.labels.next_after(u) {
            Some(k) => self.log_probs.get(t, u, k.0),
            None => LOG_ZERO,
        }
    }

    pub fn check_node(&self, t: usize, u: usize) -> Result<()> {
        if t >= self.frames() || u > self.label_len() {
            return Err(Error::NodeOutOfRange {
                t,
                u,
                frames: self.frames(),
                labels: self.label_len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node {
    pub t: usize,
    pub u: usize,
}

/// One complete monotone alignment: `T` blanks and `U` labels, ending with
/// the blank at `(T - 1, U)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AlignmentPath {
    pub steps: Vec<(Node, TokenId)>,
}

impl AlignmentPath {
    /// Builds a path from a blank/label move sequence (`true` = emit label).
    pub fn from_moves(moves: &[bool], labels: &LabelSequence) -> Self {
        let (mut t, mut u) = (0, 0);
        let mut steps = Vec::with_capacity(moves.len());
        for &emit in moves {
            if emit {
                let k = labels.next_after(u).unwrap_or(TokenId::BLANK);
                steps.push((Node { t, u }, k));
                u += 1;
            } else {
                steps.push((Node { t, u }, TokenId::BLANK));
                t += 1;
            }
        }
        Self { steps }
    }

    /// Tokens with blanks removed.
    pub fn collapse(&self) -> Vec<TokenId> {
        self.steps
            .iter()
            .map(|&(_, k)| k)
            .filter(|k| !k.is_blank())
            .collect()
    }

    /// Checks continuity, step counts, the final blank and that collapsing
    /// recovers `labels`.
    pub fn validate(&self, frames: usize, labels: &LabelSequence) -> Result<()> {
        let n_labels = labels.len();
        if self.steps.len() != frames + n_labels {
            return Err(Error::MalformedPath(format!(
                "{} steps, expected T + U = {}",
                self.steps.len(),
                frames + n_labels
            )));
        }
        let (mut t, mut u) = (0, 0);
        for (i, &(node, k)) in self.steps.iter().enumerate() {
            if node != (Node { t, u }) {
                return Err(Error::MalformedPath(format!(
                    "step {i} sits at ({}, {}) but the path is at ({t}, {u})",
                    node.t, node.u
                )));
            }
            if t >= frames || u > n_labels {
                return Err(Error::MalformedPath(format!(
                    "step {i} leaves the lattice at ({t}, {u})"
                )));
            }
            if k.is_blank() {
                t += 1;
            } else {
                if labels.next_after(u) != Some(k) {
                    return Err(Error::MalformedPath(format!(
                        "step {i} emits {k} but the next label is {:?}",
                        labels.next_after(u)
                    )));
                }
                u += 1;
            }
        }
        match self.steps.last() {
            Some(&(node, k))
                if k.is_blank()
                    && node
                        == (Node {
                            t: frames - 1,
                            u: n_labels,
                        }) =>
            {
                Ok(())
            }
            _ => Err(Error::MalformedPath(
                "the final step must be the blank at the top-right node".into(),
            )),
        }
    }
}

/// Log-probability of one complete alignment.
pub fn path_probability(lattice: &JointLattice, path: &AlignmentPath) -> Result<f64> {
    path.validate(lattice.frames(), lattice.labels())?;
    Ok(path
        .steps
        .iter()
        .map(|&(node, k)| lattice.log_prob(node.t, node.u, k))
        .sum())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// T=2, U=1, V=1 lattice used throughout the hand-computed examples:
    /// ŷ(1,0)=0.6, b(1,0)=0.4, b(1,1)=0.5, ŷ(2,0)=0.2, b(2,1)=0.7.
    pub(crate) fn small_lattice() -> JointLattice {
        let probs: [[[f64; 2]; 2]; 2] = [[[0.4, 0.6], [0.5, 0.5]], [[0.8, 0.2], [0.7, 0.3]]];
        let t = Tensor3::from_fn([2, 2, 2], |t, u, k| probs[t][u][k].ln());
        JointLattice::from_log_probs(t, LabelSequence::from_ids(&[1]).unwrap()).unwrap()
    }

    #[test]
    fn uniform_softmax_for_zero_logits() {
        let logits = Tensor3::zeros([2, 1, 2]);
        let lat = JointLattice::from_logits(&logits, LabelSequence::default()).unwrap();
        for &v in lat.log_probs().as_slice() {
            assert!((v - 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn two_way_softmax_closed_form() {
        let logits = Tensor3::from_vec([1, 1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let lat = JointLattice::from_logits(&logits, LabelSequence::default()).unwrap();
        assert!((lat.log_blank(0, 0) + 4f64.ln()).abs() < 1e-15);
        assert!((lat.log_prob(0, 0, TokenId(1)) - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn non_finite_logit_is_named() {
        let mut logits = Tensor3::zeros([2, 2, 3]);
        logits.set(1, 0, 2, f64::NAN);
        let err =
            JointLattice::from_logits(&logits, LabelSequence::from_ids(&[2]).unwrap()).unwrap_err();
        match err {
            Error::NonFiniteLogit { t, u, k, .. } => assert_eq!((t, u, k), (1, 0, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_and_vocab_are_checked() {
        let logits = Tensor3::zeros([2, 3, 3]);
        assert!(
            JointLattice::from_logits(&logits, LabelSequence::from_ids(&[1]).unwrap()).is_err()
        );
        assert!(
            JointLattice::from_logits(&logits, LabelSequence::from_ids(&[1, 3]).unwrap()).is_err()
        );
        assert!(
            JointLattice::from_logits(&Tensor3::zeros([0, 1, 2]), LabelSequence::default())
                .is_err()
        );
        assert!(LabelSequence::from_ids(&[1, 0]).is_err());
    }

    #[test]
    fn unnormalized_rows_are_rejected() {
        let t = Tensor3::from_vec([1, 1, 2], vec![0.5f64.ln(), 0.6f64.ln()]).unwrap();
        assert!(matches!(
            JointLattice::from_log_probs(t, LabelSequence::default()),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn single_step_path() {
        let logits = Tensor3::from_vec([1, 1, 2], vec![0.2, -0.4]).unwrap();
        let lat = JointLattice::from_logits(&logits, LabelSequence::default()).unwrap();
        let path = AlignmentPath::from_moves(&[false], lat.labels());
        assert_eq!(path_probability(&lat, &path).unwrap(), lat.log_blank(0, 0));
    }

    #[test]
    fn label_first_path_probability() {
        let lat = small_lattice();
        let path = AlignmentPath::from_moves(&[true, false, false], lat.labels());
        let lp = path_probability(&lat, &path).unwrap();
        assert!((lp - 0.21f64.ln()).abs() < 1e-14);
        assert_eq!(path.collapse(), vec![TokenId(1)]);
    }

    #[test]
    fn malformed_paths_are_rejected() {
        let lat = small_lattice();
        // A third blank walks off the lattice (frame T+1).
        let path = AlignmentPath::from_moves(&[false, false, false], lat.labels());
        assert!(path_probability(&lat, &path).is_err());
        // Label last: final step is not a blank.
        let path = AlignmentPath::from_moves(&[false, false, true], lat.labels());
        assert!(path_probability(&lat, &path).is_err());
        // Discontinuity.
        let mut path = AlignmentPath::from_moves(&[true, false, false], lat.labels());
        path.steps[1].0 = Node { t: 1, u: 1 };
        assert!(path_probability(&lat, &path).is_err());
        // Wrong step count.
        let path = AlignmentPath::from_moves(&[true, false], lat.labels());
        assert!(path_probability(&lat, &path).is_err());
    }
}
