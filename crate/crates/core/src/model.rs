//! A small streaming transducer with hand-written reverse mode.
//!
//! * encoder: `h_t = tanh(W_x x_t + W_h h_{t-1} + b)`, `h_{-1} = 0`
//! * predictor: `p_u = tanh(E[y_u] + W_h p_{u-1} + b)`, with `y_0` the blank
//!   (acting as start symbol) and `p_{-1} = 0`
//! * joint: `z = tanh(W_e h_t + W_p p_u + b)`, `logits = W_o z + b_o`
//!
//! Every parameter lives in one flat buffer so the optimizer, gradient
//! clipping and finite-difference checks can treat the model as a vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LabelSequence, TokenId};
use crate::loss::LossGradients;
use crate::tensor::{Matrix, Tensor3};

pub const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub encoder_dim: usize,
    pub predictor_dim: usize,
    pub joint_dim: usize,
    /// Number of non-blank tokens `V`, including `</s>` in endpointer mode.
    pub vocab_size: usize,
    /// When set, token `V` is the end-of-query token `</s>`.
    pub endpointer: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 17,
            encoder_dim: 64,
            predictor_dim: 64,
            joint_dim: 64,
            vocab_size: 16,
            endpointer: true,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("encoder_dim", self.encoder_dim),
            ("predictor_dim", self.predictor_dim),
            ("joint_dim", self.joint_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.endpointer && self.vocab_size < 2 {
            return Err(Error::Config(
                "endpointer mode needs vocab_size >= 2 (</s> plus one content token)".into(),
            ));
        }
        Ok(())
    }

    /// `</s>` when endpointer mode is on.
    pub fn end_of_query(&self) -> Option<TokenId> {
        self.endpointer.then_some(TokenId(self.vocab_size))
    }

    fn layout(&self) -> Vec<TensorSpec> {
        let (f, e, p, j, v1) = (
            self.feature_dim,
            self.encoder_dim,
            self.predictor_dim,
            self.joint_dim,
            self.vocab_size + 1,
        );
        let shapes: [(&'static str, usize, usize, bool); 11] = [
            ("encoder.w_x", e, f, true),
            ("encoder.w_h", e, e, true),
            ("encoder.b", 1, e, false),
            ("predictor.embed", v1, p, true),
            ("predictor.w_h", p, p, true),
            ("predictor.b", 1, p, false),
            ("joint.w_enc", j, e, true),
            ("joint.w_pred", j, p, true),
            ("joint.b", 1, j, false),
            ("output.w", v1, j, true),
            ("output.b", 1, v1, false),
        ];
        let mut offset = 0;
        shapes
            .iter()
            .map(|&(name, rows, cols, is_weight)| {
                let spec = TensorSpec {
                    name,
                    rows,
                    cols,
                    offset,
                    is_weight,
                };
                offset += rows * cols;
                spec
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    is_weight: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape as stored in checkpoints: biases are one-dimensional.
    pub fn shape(&self) -> Vec<usize> {
        if self.rows == 1 && !self.is_weight {
            vec![self.cols]
        } else {
            vec![self.rows, self.cols]
        }
    }
}

#[derive(Clone, Copy)]
enum Slot {
    EncWx = 0,
    EncWh,
    EncB,
    PredEmbed,
    PredWh,
    PredB,
    JointWEnc,
    JointWPred,
    JointB,
    OutW,
    OutB,
}

/// Named tensors over one flat buffer. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    layout: Vec<TensorSpec>,
    data: Vec<f64>,
}

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let total = layout.iter().map(TensorSpec::len).sum();
        Ok(Self {
            config: config.clone(),
            layout,
            data: vec![0.0; total],
        })
    }

    /// Weights uniform in `(-0.08, 0.08)`, biases zero, from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for spec in &params.layout {
            if spec.is_weight {
                for w in &mut params.data[spec.offset..spec.offset + spec.len()] {
                    *w = rng.random_range(-INIT_RANGE..INIT_RANGE);
                }
            }
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let spec = self.layout.iter().find(|s| s.name == name)?.clone();
        Some(&mut self.data[spec.offset..spec.offset + spec.len()])
    }

    #[inline]
    fn slot(&self, slot: Slot) -> &[f64] {
        let s = &self.layout[slot as usize];
        &self.data[s.offset..s.offset + s.len()]
    }

    #[inline]
    fn slot_mut(&mut self, slot: Slot) -> &mut [f64] {
        let s = &self.layout[slot as usize];
        let (o, n) = (s.offset, s.len());
        &mut self.data[o..o + n]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &Parameters) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out += W x` with `W` row-major `(out.len(), x.len())`.
#[inline]
fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Wᵀ g`.
#[inline]
fn matvec_t_add(w: &[f64], g: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (&gi, row) in g.iter().zip(w.chunks_exact(n)) {
        if gi != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += gi * a;
            }
        }
    }
}

/// `W += g xᵀ`.
#[inline]
fn outer_add(w: &mut [f64], g: &[f64], x: &[f64]) {
    let n = x.len();
    for (&gi, row) in g.iter().zip(w.chunks_exact_mut(n)) {
        if gi != 0.0 {
            for (a, b) in row.iter_mut().zip(x) {
                *a += gi * b;
            }
        }
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite activation in {what}")));
    }
    Ok(())
}

/// Causal encoder states, shaped `(T, encoder_dim)`.
pub fn encode(params: &Parameters, frames: &Matrix) -> Result<Matrix> {
    let cfg = &params.config;
    if frames.rows() == 0 {
        return Err(Error::Empty("encoder input has no frames"));
    }
    if frames.cols() != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "frames have {} features, the model expects {}",
            frames.cols(),
            cfg.feature_dim
        )));
    }
    let e = cfg.encoder_dim;
    let (wx, wh, b) = (
        params.slot(Slot::EncWx),
        params.slot(Slot::EncWh),
        params.slot(Slot::EncB),
    );
    let mut states = Matrix::zeros(frames.rows(), e);
    let mut prev = vec![0.0; e];
    for t in 0..frames.rows() {
        let mut pre = b.to_vec();
        matvec_add(wx, frames.row(t), &mut pre);
        matvec_add(wh, &prev, &mut pre);
        for v in &mut pre {
            *v = v.tanh();
        }
        check_finite(&pre, "encoder")?;
        states.row_mut(t).copy_from_slice(&pre);
        prev = pre;
    }
    Ok(states)
}

/// One predictor step: the state after consuming `token` from `prev`.
pub fn predictor_step(params: &Parameters, token: TokenId, prev: &[f64]) -> Result<Vec<f64>> {
    let cfg = &params.config;
    if token.0 > cfg.vocab_size {
        return Err(Error::UnknownToken {
            id: token.0,
            max: cfg.vocab_size,
        });
    }
    let p = cfg.predictor_dim;
    let embed = &params.slot(Slot::PredEmbed)[token.0 * p..(token.0 + 1) * p];
    let mut pre: Vec<f64> = embed
        .iter()
        .zip(params.slot(Slot::PredB))
        .map(|(a, b)| a + b)
        .collect();
    matvec_add(params.slot(Slot::PredWh), prev, &mut pre);
    for v in &mut pre {
        *v = v.tanh();
    }
    check_finite(&pre, "predictor")?;
    Ok(pre)
}

/// Predictor start state (after the implicit start symbol).
pub fn predictor_start(params: &Parameters) -> Result<Vec<f64>> {
    predictor_step(
        params,
        TokenId::BLANK,
        &vec![0.0; params.config.predictor_dim],
    )
}

/// Predictor states `(U + 1, predictor_dim)`; row `u` has seen labels `1..=u`.
pub fn predict(params: &Parameters, labels: &LabelSequence) -> Result<Matrix> {
    labels.check_vocab(params.config.vocab_size)?;
    let p = params.config.predictor_dim;
    let mut states = Matrix::zeros(labels.len() + 1, p);
    let mut state = predictor_start(params)?;
    states.row_mut(0).copy_from_slice(&state);
    for (u, &tok) in labels.tokens().iter().enumerate() {
        state = predictor_step(params, tok, &state)?;
        states.row_mut(u + 1).copy_from_slice(&state);
    }
    Ok(states)
}

/// `W_e h + b` for every encoder row.
fn project_encoder(params: &Parameters, enc: &Matrix) -> Matrix {
    let j = params.config.joint_dim;
    let mut out = Matrix::zeros(enc.rows(), j);
    for t in 0..enc.rows() {
        let row = out.row_mut(t);
        row.copy_from_slice(params.slot(Slot::JointB));
        matvec_add(params.slot(Slot::JointWEnc), enc.row(t), row);
    }
    out
}

fn project_predictor(params: &Parameters, pred: &Matrix) -> Matrix {
    let j = params.config.joint_dim;
    let mut out = Matrix::zeros(pred.rows(), j);
    for u in 0..pred.rows() {
        matvec_add(params.slot(Slot::JointWPred), pred.row(u), out.row_mut(u));
    }
    out
}

/// Joint logits for a single `(encoder state, predictor state)` pair.
pub fn joint_logits(params: &Parameters, enc_state: &[f64], pred_state: &[f64]) -> Vec<f64> {
    let cfg = &params.config;
    let mut hidden = params.slot(Slot::JointB).to_vec();
    matvec_add(params.slot(Slot::JointWEnc), enc_state, &mut hidden);
    matvec_add(params.slot(Slot::JointWPred), pred_state, &mut hidden);
    for v in &mut hidden {
        *v = v.tanh();
    }
    let mut logits = params.slot(Slot::OutB).to_vec();
    debug_assert_eq!(logits.len(), cfg.vocab_size + 1);
    matvec_add(params.slot(Slot::OutW), &hidden, &mut logits);
    logits
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub enc: Matrix,
    pub pred: Matrix,
    /// Joint hidden activations, `(T, U + 1, joint_dim)`.
    hidden: Tensor3,
    pub logits: Tensor3,
}

impl ForwardPass {
    pub fn run(params: &Parameters, frames: &Matrix, labels: &LabelSequence) -> Result<Self> {
        let enc = encode(params, frames)?;
        let pred = predict(params, labels)?;
        Ok(Self::from_states(params, enc, pred))
    }

    fn from_states(params: &Parameters, enc: Matrix, pred: Matrix) -> Self {
        let cfg = &params.config;
        let (j, v1) = (cfg.joint_dim, cfg.vocab_size + 1);
        let (frames, rows) = (enc.rows(), pred.rows());
        let enc_proj = project_encoder(params, &enc);
        let pred_proj = project_predictor(params, &pred);
        let mut hidden = Tensor3::zeros([frames, rows, j]);
        let mut logits = Tensor3::zeros([frames, rows, v1]);
        let (out_w, out_b) = (params.slot(Slot::OutW), params.slot(Slot::OutB));
        for t in 0..frames {
            for u in 0..rows {
                let h = hidden.row_mut(t, u);
                for ((h, a), c) in h.iter_mut().zip(enc_proj.row(t)).zip(pred_proj.row(u)) {
                    *h = (a + c).tanh();
                }
                let l = logits.row_mut(t, u);
                l.copy_from_slice(out_b);
                matvec_add(out_w, hidden.row(t, u), l);
            }
        }
        Self {
            enc,
            pred,
            hidden,
            logits,
        }
    }

    /// Reverse-mode gradients seeded with `d_logits`.
    pub fn backward(
        &self,
        params: &Parameters,
        frames: &Matrix,
        labels: &LabelSequence,
        d_logits: &Tensor3,
    ) -> Result<Parameters> {
        let cfg = &params.config;
        let (e, p, j) = (cfg.encoder_dim, cfg.predictor_dim, cfg.joint_dim);
        let dims = self.logits.dims();
        if d_logits.dims() != dims {
            return Err(Error::Shape(format!(
                "seed gradient is {:?}, the forward pass produced {:?}",
                d_logits.dims(),
                dims
            )));
        }
        if labels.len() + 1 != dims[1] || frames.rows() != dims[0] {
            return Err(Error::Shape(
                "frames/labels do not match the forward pass".into(),
            ));
        }
        let (n_frames, rows) = (dims[0], dims[1]);
        let mut grads = params.zeros_like();

        // Joint network.
        let mut d_enc_proj = Matrix::zeros(n_frames, j);
        let mut d_pred_proj = Matrix::zeros(rows, j);
        let out_w = params.slot(Slot::OutW);
        let mut d_out_w = vec![0.0; out_w.len()];
        let mut d_out_b = vec![0.0; cfg.vocab_size + 1];
        let mut dz = vec![0.0; j];
        for t in 0..n_frames {
            for u in 0..rows {
                let d = d_logits.row(t, u);
                if d.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let h = self.hidden.row(t, u);
                outer_add(&mut d_out_w, d, h);
                for (b, g) in d_out_b.iter_mut().zip(d) {
                    *b += g;
                }
                dz.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_add(out_w, d, &mut dz);
                for (g, &hv) in dz.iter_mut().zip(h) {
                    *g *= 1.0 - hv * hv;
                }
                for (a, g) in d_enc_proj.row_mut(t).iter_mut().zip(&dz) {
                    *a += g;
                }
                for (a, g) in d_pred_proj.row_mut(u).iter_mut().zip(&dz) {
                    *a += g;
                }
            }
        }
        grads.slot_mut(Slot::OutW).copy_from_slice(&d_out_w);
        grads.slot_mut(Slot::OutB).copy_from_slice(&d_out_b);

        let mut d_enc = Matrix::zeros(n_frames, e);
        for t in 0..n_frames {
            let g = d_enc_proj.row(t);
            for (b, v) in grads.slot_mut(Slot::JointB).iter_mut().zip(g) {
                *b += v;
            }
            outer_add(grads.slot_mut(Slot::JointWEnc), g, self.enc.row(t));
            matvec_t_add(params.slot(Slot::JointWEnc), g, d_enc.row_mut(t));
        }
        let mut d_pred = Matrix::zeros(rows, p);
        for u in 0..rows {
            let g = d_pred_proj.row(u);
            outer_add(grads.slot_mut(Slot::JointWPred), g, self.pred.row(u));
            matvec_t_add(params.slot(Slot::JointWPred), g, d_pred.row_mut(u));
        }

        // Encoder, back through time.
        let mut carry = vec![0.0; e];
        for t in (0..n_frames).rev() {
            let h = self.enc.row(t);
            let dpre: Vec<f64> = d_enc
                .row(t)
                .iter()
                .zip(&carry)
                .zip(h)
                .map(|((a, c), hv)| (a + c) * (1.0 - hv * hv))
                .collect();
            outer_add(grads.slot_mut(Slot::EncWx), &dpre, frames.row(t));
            if t > 0 {
                outer_add(grads.slot_mut(Slot::EncWh), &dpre, self.enc.row(t - 1));
            }
            for (b, v) in grads.slot_mut(Slot::EncB).iter_mut().zip(&dpre) {
                *b += v;
            }
            carry.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(params.slot(Slot::EncWh), &dpre, &mut carry);
        }

        // Predictor, back through label steps. Step u consumed y_u (blank at u = 0).
        let mut carry = vec![0.0; p];
        for u in (0..rows).rev() {
            let s = self.pred.row(u);
            let dpre: Vec<f64> = d_pred
                .row(u)
                .iter()
                .zip(&carry)
                .zip(s)
                .map(|((a, c), sv)| (a + c) * (1.0 - sv * sv))
                .collect();
            let token = if u == 0 { 0 } else { labels.tokens()[u - 1].0 };
            for (emb, v) in grads.slot_mut(Slot::PredEmbed)[token * p..(token + 1) * p]
                .iter_mut()
                .zip(&dpre)
            {
                *emb += v;
            }
            for (b, v) in grads.slot_mut(Slot::PredB).iter_mut().zip(&dpre) {
                *b += v;
            }
            if u > 0 {
                outer_add(grads.slot_mut(Slot::PredWh), &dpre, self.pred.row(u - 1));
            }
            carry.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(params.slot(Slot::PredWh), &dpre, &mut carry);
        }

        if !grads.all_finite() {
            return Err(Error::Numerical("non-finite parameter gradient".into()));
        }
        Ok(grads)
    }
}

/// Joint logits `(T, U + 1, V + 1)` from precomputed encoder and predictor
/// states.
pub fn joint(params: &Parameters, enc: &Matrix, pred: &Matrix) -> Result<Tensor3> {
    let cfg = &params.config;
    if enc.cols() != cfg.encoder_dim || pred.cols() != cfg.predictor_dim {
        return Err(Error::Shape("state widths do not match the model".into()));
    }
    Ok(ForwardPass::from_states(params, enc.clone(), pred.clone()).logits)
}

/// Parameter gradients for one utterance, recomputing the forward pass.
pub fn backprop(
    params: &Parameters,
    frames: &Matrix,
    labels: &LabelSequence,
    lattice_grads: &LossGradients,
) -> Result<Parameters> {
    let pass = ForwardPass::run(params, frames, labels)?;
    pass.backward(params, frames, labels, &lattice_grads.d_logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid Adam hyperparameters {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            step: 0,
            m: vec![0.0; params.data.len()],
            v: vec![0.0; params.data.len()],
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn optimizer_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut AdamState,
    hyper: &AdamConfig,
) {
    state.step += 1;
    let step = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(step);
    let bc2 = 1.0 - hyper.beta2.powi(step);
    for (((w, &g), m), v) in params
        .data
        .iter_mut()
        .zip(&grads.data)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Parameters, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            encoder_dim: 4,
            predictor_dim: 3,
            joint_dim: 5,
            vocab_size: 3,
            endpointer: false,
            seed: 7,
        }
    }

    fn frames(n: usize, dim: usize) -> Matrix {
        Matrix::from_vec(
            n,
            dim,
            (0..n * dim)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_states_and_uniform_joint() {
        let params = Parameters::zeros(&tiny_config()).unwrap();
        let x = frames(4, 3);
        let enc = encode(&params, &x).unwrap();
        assert!(enc.as_slice().iter().all(|&v| v == 0.0));
        let labels = LabelSequence::from_ids(&[1, 2]).unwrap();
        let pred = predict(&params, &labels).unwrap();
        assert!(pred.as_slice().iter().all(|&v| v == 0.0));
        let logits = joint(&params, &enc, &pred).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_causal() {
        let params = Parameters::init(&tiny_config()).unwrap();
        let x = frames(6, 3);
        let mut y = x.clone();
        y.row_mut(4)[1] += 0.5;
        y.row_mut(5)[0] -= 2.0;
        let a = encode(&params, &x).unwrap();
        let b = encode(&params, &y).unwrap();
        for t in 0..4 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn single_encoder_step_by_hand() {
        let cfg = ModelConfig {
            feature_dim: 2,
            encoder_dim: 2,
            ..tiny_config()
        };
        let mut params = Parameters::zeros(&cfg).unwrap();
        params
            .tensor_mut("encoder.w_x")
            .unwrap()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        params
            .tensor_mut("encoder.b")
            .unwrap()
            .copy_from_slice(&[0.1, -0.2]);
        let x = Matrix::from_vec(1, 2, vec![0.3, 0.4]).unwrap();
        let enc = encode(&params, &x).unwrap();
        assert_eq!(enc.row(0), &[0.4f64.tanh(), 0.2f64.tanh()]);
    }

    #[test]
    fn predictor_is_causal_and_checks_tokens() {
        let params = Parameters::init(&tiny_config()).unwrap();
        let a = predict(&params, &LabelSequence::from_ids(&[1, 2, 3]).unwrap()).unwrap();
        let b = predict(&params, &LabelSequence::from_ids(&[1, 2, 1]).unwrap()).unwrap();
        for u in 0..3 {
            assert_eq!(a.row(u), b.row(u));
        }
        assert_ne!(a.row(3), b.row(3));
        assert!(predict(&params, &LabelSequence::from_ids(&[4]).unwrap()).is_err());
    }

    #[test]
    fn single_predictor_step_by_hand() {
        let cfg = tiny_config();
        let mut params = Parameters::zeros(&cfg).unwrap();
        // Embedding row for token 2.
        params.tensor_mut("predictor.embed").unwrap()[6..9].copy_from_slice(&[0.5, -0.25, 1.0]);
        params
            .tensor_mut("predictor.b")
            .unwrap()
            .copy_from_slice(&[0.1, 0.1, 0.1]);
        let state = predictor_step(&params, TokenId(2), &[0.0; 3]).unwrap();
        assert_eq!(state, vec![0.6f64.tanh(), (-0.15f64).tanh(), 1.1f64.tanh()]);
    }

    #[test]
    fn joint_ignores_u_without_predictor_weights() {
        let mut params = Parameters::init(&tiny_config()).unwrap();
        params
            .tensor_mut("joint.w_pred")
            .unwrap()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let x = frames(3, 3);
        let labels = LabelSequence::from_ids(&[1, 3]).unwrap();
        let pass = ForwardPass::run(&params, &x, &labels).unwrap();
        for t in 0..3 {
            for u in 1..3 {
                assert_eq!(pass.logits.row(t, 0), pass.logits.row(t, u));
            }
        }
    }

    #[test]
    fn zero_seed_gives_zero_gradient() {
        let params = Parameters::init(&tiny_config()).unwrap();
        let x = frames(3, 3);
        let labels = LabelSequence::from_ids(&[2]).unwrap();
        let pass = ForwardPass::run(&params, &x, &labels).unwrap();
        let seed = Tensor3::zeros(pass.logits.dims());
        let g = pass.backward(&params, &x, &labels, &seed).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        let bad = Tensor3::zeros([3, 3, 4]);
        assert!(pass.backward(&params, &x, &labels, &bad).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut params = Parameters::init(&tiny_config()).unwrap();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        optimizer_step(&mut params, &grads, &mut state, &AdamConfig::default());
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut params = Parameters::zeros(&tiny_config()).unwrap();
        let mut grads = params.zeros_like();
        grads.as_mut_slice()[0] = 0.5;
        grads.as_mut_slice()[1] = -2e-9;
        let hyper = AdamConfig::default();
        let mut state = AdamState::new(&params);
        optimizer_step(&mut params, &grads, &mut state, &hyper);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let expected0 = -1e-3 * 0.5 / (0.5 + 1e-8);
        let expected1 = -1e-3 * -2e-9 / (2e-9 + 1e-8);
        assert!((params.as_slice()[0] - expected0).abs() < 1e-18);
        assert!((params.as_slice()[1] - expected1).abs() < 1e-18);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut grads = Parameters::zeros(&tiny_config()).unwrap();
        grads.as_mut_slice()[0] = 3.0;
        grads.as_mut_slice()[1] = 4.0;
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((grads.norm() - 1.0).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut grads, 5.0), grads.norm());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig {
            joint_dim: 0,
            ..tiny_config()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            vocab_size: 1,
            endpointer: true,
            ..tiny_config()
        }
        .validate()
        .is_err());
        assert_eq!(ModelConfig::default().end_of_query(), Some(TokenId(16)));
    }
}
