//! Frame-synchronous greedy decoding with emission timestamps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::TokenId;
use crate::model::{encode, joint_logits, predictor_start, predictor_step, Parameters};
use crate::tensor::Matrix;

pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    pub token: TokenId,
    /// One-based frame at which the token was emitted.
    pub frame: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmissionTrace {
    pub emissions: Vec<Emission>,
}

impl EmissionTrace {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.emissions.iter().map(|e| e.token).collect()
    }

    /// Hypothesis without `</s>`.
    pub fn content_tokens(&self, end_of_query: Option<TokenId>) -> Vec<TokenId> {
        self.emissions
            .iter()
            .map(|e| e.token)
            .filter(|&t| Some(t) != end_of_query)
            .collect()
    }

    pub fn last_content_emission(&self, end_of_query: Option<TokenId>) -> Option<Emission> {
        self.emissions
            .iter()
            .rev()
            .find(|e| Some(e.token) != end_of_query)
            .copied()
    }

    pub fn end_of_query_emission(&self, end_of_query: Option<TokenId>) -> Option<Emission> {
        let eoq = end_of_query?;
        self.emissions.iter().find(|e| e.token == eoq).copied()
    }
}

/// Index of the largest entry, lowest index on ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding driven by an arbitrary per-step scorer. `score(t, state,
/// history)` returns the extended-vocabulary scores at zero-based frame `t`
/// and `advance(state, token)` moves the label context forward.
pub fn greedy_decode_with<S>(
    frames: usize,
    max_symbols_per_frame: usize,
    end_of_query: Option<TokenId>,
    mut state: S,
    mut score: impl FnMut(usize, &S) -> Result<Vec<f64>>,
    mut advance: impl FnMut(&S, TokenId) -> Result<S>,
) -> Result<EmissionTrace> {
    if max_symbols_per_frame == 0 {
        return Err(Error::Config("max_symbols_per_frame must be >= 1".into()));
    }
    let mut trace = EmissionTrace::default();
    for t in 0..frames {
        for _ in 0..max_symbols_per_frame {
            let k = TokenId(argmax(&score(t, &state)?));
            if k.is_blank() {
                break;
            }
            trace.emissions.push(Emission {
                token: k,
                frame: t + 1,
            });
            if Some(k) == end_of_query {
                return Ok(trace);
            }
            state = advance(&state, k)?;
        }
    }
    Ok(trace)
}

/// Runs the toy transducer over `frames`, stopping early on `</s>` when the
/// model is in endpointer mode.
pub fn greedy_decode(
    params: &Parameters,
    frames: &Matrix,
    max_symbols_per_frame: usize,
) -> Result<EmissionTrace> {
    let enc = encode(params, frames)?;
    greedy_decode_with(
        enc.rows(),
        max_symbols_per_frame,
        params.config().end_of_query(),
        predictor_start(params)?,
        |t, state| Ok(joint_logits(params, enc.row(t), state)),
        |state, k| predictor_step(params, k, state),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn config() -> ModelConfig {
        ModelConfig {
            feature_dim: 2,
            encoder_dim: 2,
            predictor_dim: 2,
            joint_dim: 2,
            vocab_size: 3,
            endpointer: false,
            seed: 0,
        }
    }

    #[test]
    fn blank_favouring_model_emits_nothing() {
        let mut params = Parameters::zeros(&config()).unwrap();
        params.tensor_mut("output.b").unwrap()[0] = 1.0;
        let frames = Matrix::zeros(2, 2);
        let trace = greedy_decode(&params, &frames, 5).unwrap();
        assert!(trace.emissions.is_empty());
    }

    #[test]
    fn forced_label_then_blanks() {
        // Emit token 2 exactly once, at frame 1: scores depend on frame and
        // on how many labels have been emitted.
        let trace = greedy_decode_with(
            4,
            5,
            None,
            0usize,
            |t, &emitted| {
                Ok(if t == 0 && emitted == 0 {
                    vec![0.0, 0.0, 1.0]
                } else {
                    vec![1.0, 0.0, 0.0]
                })
            },
            |&n, _| Ok(n + 1),
        )
        .unwrap();
        assert_eq!(
            trace.emissions,
            vec![Emission {
                token: TokenId(2),
                frame: 1
            }]
        );
    }

    #[test]
    fn symbol_cap_bounds_emissions() {
        // Zero weights with a label bias: the joint never prefers blank.
        let mut params = Parameters::zeros(&config()).unwrap();
        params.tensor_mut("output.b").unwrap()[1] = 1.0;
        let frames = Matrix::zeros(3, 2);
        let trace = greedy_decode(&params, &frames, 4).unwrap();
        assert_eq!(trace.emissions.len(), 12);
        for t in 1..=3 {
            assert_eq!(trace.emissions.iter().filter(|e| e.frame == t).count(), 4);
        }
        assert!(greedy_decode(&params, &frames, 0).is_err());
    }

    #[test]
    fn ties_break_to_lowest_id() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn stops_at_end_of_query() {
        let cfg = ModelConfig {
            endpointer: true,
            ..config()
        };
        let mut params = Parameters::zeros(&cfg).unwrap();
        params.tensor_mut("output.b").unwrap()[3] = 1.0;
        let frames = Matrix::zeros(5, 2);
        let trace = greedy_decode(&params, &frames, 5).unwrap();
        assert_eq!(
            trace.emissions,
            vec![Emission {
                token: TokenId(3),
                frame: 1
            }]
        );
    }
}
