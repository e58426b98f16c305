//! Transducer (RNN-T) loss with FastEmit regularization, a small
//! hand-differentiated streaming transducer, and the latency/error metrics
//! used to study the emission-latency trade-off on synthetic data.

pub mod checkpoint;
pub mod datagen;
pub mod decoder;
pub mod error;
pub mod fastemit;
pub mod lattice;
pub mod logspace;
pub mod loss;
pub mod metrics;
pub mod model;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod run;
#[cfg(any(test, feature = "oracle"))]
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use lattice::{AlignmentPath, JointLattice, LabelSequence, Node, TokenId};
pub use loss::{AlphaBetaTables, LossGradients, NodeTable};
pub use tensor::{Matrix, Tensor3};
