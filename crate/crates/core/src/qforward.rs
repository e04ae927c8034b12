//! The fixed-point forward pass and the per-layer arithmetic it shares with
//! the two protocol parties.
//!
//! Per linear layer: the ring product `W^D_int · a_int` (scale²) is
//! dequantized, Charlie's factored float part `W^C · â` is added for split
//! layers, then the bias, then the activation, and the result is quantized
//! back to scale 1. [`forward_reference_quantized`] runs this locally with no
//! masking and is the bit-exact target for the hybrid protocol.

use thiserror::Error;

use crate::decompose::{Factors, PlannedModel};
use crate::linalg::Matrix;
use crate::models::{attention_scores, Activation, ModelError, Stage};
use crate::ring::{self, dequantize, quantize, quantize_matrix, FixedVec, IntMatrix, RingError, RingParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForwardError {
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Integer weights plus the row-l1 bound used for the runtime overflow check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingWeights {
    pub w: IntMatrix,
    pub row_l1: u128,
}

impl RingWeights {
    pub fn from_real(w: &Matrix, ring: &RingParams) -> Result<Self, RingError> {
        let w = quantize_matrix(w, ring)?;
        let row_l1 = w.max_row_l1();
        Ok(RingWeights { w, row_l1 })
    }

    /// Token-blocked `W a mod L` after checking `‖W a‖∞ < L/2` can't wrap.
    pub fn apply(&self, a: &FixedVec, ring: &RingParams) -> Result<FixedVec, RingError> {
        self.w.check_headroom(self.row_l1, a, ring)?;
        ring::modmatvec_tokens(&self.w, a, ring)
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        (self.w.rows * self.w.cols * tokens) as u64
    }
}

/// `W^C · â` for every token of `a`.
pub fn charlie_partial(f: &Factors, a: &FixedVec, ring: &RingParams) -> Result<Vec<f64>, RingError> {
    let a_hat = dequantize(a, ring)?;
    Ok(a_hat.chunks(f.v.rows()).flat_map(|x| f.apply(x)).collect())
}

/// Dequantized ring part, plus Charlie's part, plus bias; in that order.
pub fn combine(
    pre: &FixedVec,
    charlie: Option<&[f64]>,
    bias: Option<&[f64]>,
    out_dim: usize,
    ring: &RingParams,
) -> Result<Vec<f64>, RingError> {
    let mut h = dequantize(pre, ring)?;
    if let Some(c) = charlie {
        if c.len() != h.len() {
            return Err(RingError::DimensionMismatch { expected: h.len(), got: c.len() });
        }
        h.iter_mut().zip(c).for_each(|(x, y)| *x += y);
    }
    if let Some(b) = bias {
        for tok in h.chunks_mut(out_dim) {
            tok.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
    Ok(h)
}

/// Adds Charlie's factored part of `a` (if any) and the bias to the ring
/// product `pre = W^D a`.
pub fn finish_projection(
    pre: &FixedVec,
    factors: Option<&Factors>,
    bias: Option<&[f64]>,
    out_dim: usize,
    a: &FixedVec,
    ring: &RingParams,
) -> Result<Vec<f64>, RingError> {
    let c = factors.map(|f| charlie_partial(f, a, ring)).transpose()?;
    combine(pre, c.as_deref(), bias, out_dim, ring)
}

pub fn activate_and_quantize(
    mut h: Vec<f64>,
    act: Activation,
    out_dim: usize,
    ring: &RingParams,
) -> Result<FixedVec, RingError> {
    for tok in h.chunks_mut(out_dim) {
        act.apply(tok);
    }
    quantize(&h, ring)
}

pub fn finish_linear(
    pre: &FixedVec,
    charlie: Option<&[f64]>,
    bias: Option<&[f64]>,
    act: Activation,
    out_dim: usize,
    ring: &RingParams,
) -> Result<FixedVec, RingError> {
    let h = combine(pre, charlie, bias, out_dim, ring)?;
    activate_and_quantize(h, act, out_dim, ring)
}

/// `S · X̂` with `S = softmax(Q Kᵀ / √d_h)`; token-major in and out.
pub fn attention_mix(q: &[f64], k: &[f64], x_hat: &[f64], tokens: usize, d_h: usize) -> Vec<f64> {
    let d = x_hat.len() / tokens;
    let s = attention_scores(q, k, tokens, d_h);
    let x = Matrix::from_vec(tokens, d, x_hat.to_vec()).expect("token-major input");
    s.matmul(&x).into_data()
}

/// Flattens a token matrix and quantizes it at scale 1.
pub fn quantize_tokens(x: &Matrix, ring: &RingParams) -> Result<FixedVec, RingError> {
    quantize(x.data(), ring)
}

/// One layer as seen by whoever runs it locally.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub w: &'a RingWeights,
    pub factors: Option<&'a Factors>,
    pub bias: Option<&'a [f64]>,
    pub activation: Activation,
}

impl LayerView<'_> {
    fn out_dim(&self) -> usize {
        self.w.w.rows
    }

    /// Pre-activation for every token of `a`.
    pub fn project(&self, a: &FixedVec, ring: &RingParams) -> Result<Vec<f64>, RingError> {
        let pre = self.w.apply(a, ring)?;
        finish_projection(&pre, self.factors, self.bias, self.out_dim(), a, ring)
    }
}

pub fn linear_local(l: &LayerView<'_>, a: &FixedVec, ring: &RingParams) -> Result<FixedVec, RingError> {
    let h = l.project(a, ring)?;
    activate_and_quantize(h, l.activation, l.out_dim(), ring)
}

pub fn attention_local(
    q: &LayerView<'_>,
    k: &LayerView<'_>,
    v: &LayerView<'_>,
    a: &FixedVec,
    tokens: usize,
    ring: &RingParams,
) -> Result<FixedVec, RingError> {
    let qv = q.project(a, ring)?;
    let kv = k.project(a, ring)?;
    let mixed = attention_mix(&qv, &kv, &dequantize(a, ring)?, tokens, q.out_dim());
    let a_s = quantize(&mixed, ring)?;
    let h = v.project(&a_s, ring)?;
    activate_and_quantize(h, v.activation, v.out_dim(), ring)
}

pub fn forward_reference_quantized(
    planned: &PlannedModel,
    x: &Matrix,
    ring: &RingParams,
) -> Result<FixedVec, ForwardError> {
    let model = &planned.model;
    model.validate()?;
    if x.cols() != model.input_dim() || x.rows() == 0 || x.rows() > model.max_tokens {
        return Err(ModelError::Shape(format!("input {}x{} does not fit model", x.rows(), x.cols())).into());
    }
    let weights = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, _)| RingWeights::from_real(planned.david_weight(i), ring))
        .collect::<Result<Vec<_>, _>>()?;
    let view = |i: usize| LayerView {
        w: &weights[i],
        factors: planned.charlie_factors(i),
        bias: model.layers[i].bias.as_deref(),
        activation: model.layers[i].activation,
    };
    let mut a = quantize_tokens(x, ring)?;
    for stage in model.stages() {
        a = match stage {
            Stage::Linear { layer } => linear_local(&view(layer), &a, ring)?,
            Stage::Attention { q, k, v } => attention_local(&view(q), &view(k), &view(v), &a, x.rows(), ring)?,
        };
    }
    Ok(a)
}
