//! Toy model definitions and the monolithic float reference forward pass.
//!
//! Every linear layer maps one token at a time, `y = act(W x + b)` with `W`
//! stored `out × in`. Attention weights follow the same convention, so
//! `q_t = W_q x_t` for each token row `x_t` of the input.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{LayerId, LayerType};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

impl Activation {
    /// Applies the activation to one token's pre-activation in place.
    pub fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Softmax => softmax_in_place(v),
        }
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    AttentionHead,
    /// Stack of blocks, each `[q, k, v, o, fc, proj]`.
    Transformer,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub id: LayerId,
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(id: LayerId, weight: Matrix, activation: Activation) -> Self {
        Layer { id, weight, bias: None, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// A unit of the forward pass that one party executes end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Linear {
        layer: usize,
    },
    /// `softmax(Q Kᵀ / √d_h) · X · W_vᵀ`, without the output projection.
    Attention {
        q: usize,
        k: usize,
        v: usize,
    },
}

impl Stage {
    pub fn layers(&self) -> Vec<usize> {
        match *self {
            Stage::Linear { layer } => vec![layer],
            Stage::Attention { q, k, v } => vec![q, k, v],
        }
    }

    /// Layer whose id labels the stage output on the wire.
    pub fn output_layer(&self) -> usize {
        match *self {
            Stage::Linear { layer } => layer,
            Stage::Attention { v, .. } => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub layers: Vec<Layer>,
    /// Largest token count an inference may carry. 1 for MLP and conv models.
    pub max_tokens: usize,
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    pub fn find_layer(&self, id: LayerId) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn head_dim(&self, stage: &Stage) -> usize {
        match *stage {
            Stage::Attention { q, .. } => self.layers[q].out_dim(),
            Stage::Linear { layer } => self.layers[layer].out_dim(),
        }
    }

    pub fn stages(&self) -> Vec<Stage> {
        match self.kind {
            ModelKind::Mlp | ModelKind::Conv => (0..self.layers.len()).map(|layer| Stage::Linear { layer }).collect(),
            ModelKind::AttentionHead => {
                vec![Stage::Attention { q: 0, k: 1, v: 2 }, Stage::Linear { layer: 3 }]
            }
            ModelKind::Transformer => (0..self.layers.len() / 6)
                .flat_map(|b| {
                    let o = 6 * b;
                    [
                        Stage::Attention { q: o, k: o + 1, v: o + 2 },
                        Stage::Linear { layer: o + 3 },
                        Stage::Linear { layer: o + 4 },
                        Stage::Linear { layer: o + 5 },
                    ]
                })
                .collect(),
        }
    }

    /// Dimension a stage consumes and produces, per token.
    pub fn stage_dims(&self, stage: &Stage) -> (usize, usize) {
        match *stage {
            Stage::Linear { layer } => (self.layers[layer].in_dim(), self.layers[layer].out_dim()),
            Stage::Attention { q, v, .. } => (self.layers[q].in_dim(), self.layers[v].out_dim()),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let shape = |m: String| Err(ModelError::Shape(m));
        if self.layers.is_empty() {
            return shape("model has no layers".into());
        }
        if self.max_tokens == 0 {
            return shape("max_tokens must be positive".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.rows() == 0 || l.weight.cols() == 0 || !l.weight.is_finite() {
                return shape(format!("layer {i}: empty or non-finite weight"));
            }
            if let Some(b) = &l.bias {
                if b.len() != l.out_dim() {
                    return shape(format!("layer {i}: bias length {} != {}", b.len(), l.out_dim()));
                }
            }
        }
        match self.kind {
            ModelKind::AttentionHead if self.layers.len() != 4 => {
                return shape("attention head needs exactly W_q, W_k, W_v, W_o".into())
            }
            ModelKind::Transformer if !self.layers.len().is_multiple_of(6) => {
                return shape("transformer blocks carry six layers each".into())
            }
            ModelKind::Mlp | ModelKind::Conv if self.max_tokens != 1 => {
                return shape("MLP and conv models take a single token".into())
            }
            _ => {}
        }
        let mut dim = self.input_dim();
        for stage in self.stages() {
            if let Stage::Attention { q, k, v } = stage {
                let (lq, lk, lv) = (&self.layers[q], &self.layers[k], &self.layers[v]);
                if lq.out_dim() != lk.out_dim() {
                    return shape(format!("W_q rows {} != W_k rows {}", lq.out_dim(), lk.out_dim()));
                }
                if [lq, lk, lv].iter().any(|l| l.in_dim() != dim) {
                    return shape(format!("attention input dimension {dim} mismatch"));
                }
            }
            let (i, o) = self.stage_dims(&stage);
            if i != dim {
                return shape(format!("stage {stage:?} expects {i} inputs, previous produces {dim}"));
            }
            dim = o;
        }
        Ok(())
    }

    /// Multiply-adds of a monolithic float forward pass on `tokens` tokens.
    pub fn monolithic_macs(&self, tokens: usize) -> u64 {
        let t = tokens as u64;
        self.stages()
            .iter()
            .map(|s| match *s {
                Stage::Linear { layer } => {
                    let l = &self.layers[layer];
                    (l.in_dim() * l.out_dim()) as u64 * t
                }
                Stage::Attention { q, k, v } => {
                    let proj: u64 =
                        [q, k, v].iter().map(|&i| (self.layers[i].in_dim() * self.layers[i].out_dim()) as u64).sum();
                    proj * t + attention_core_macs(tokens, self.layers[q].out_dim(), self.layers[q].in_dim())
                }
            })
            .sum()
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| (l.in_dim() * l.out_dim()) as u64).sum()
    }
}

/// `Q Kᵀ` plus `S X`.
pub fn attention_core_macs(tokens: usize, d_h: usize, d: usize) -> u64 {
    (tokens * tokens * d_h + tokens * tokens * d) as u64
}

/// Row-major `tokens × dim` view helper.
pub fn token_rows(x: &[f64], dim: usize) -> impl Iterator<Item = &[f64]> {
    x.chunks(dim)
}

/// Float forward pass of the whole model; `x` holds one token per row.
pub fn forward_reference(model: &ModelParams, x: &Matrix) -> Result<Matrix, ModelError> {
    model.validate()?;
    if x.cols() != model.input_dim() {
        return Err(ModelError::Shape(format!("input has {} features, model expects {}", x.cols(), model.input_dim())));
    }
    if x.rows() == 0 || x.rows() > model.max_tokens {
        return Err(ModelError::Shape(format!("{} tokens, model accepts 1..={}", x.rows(), model.max_tokens)));
    }
    let mut a = x.clone();
    for stage in model.stages() {
        a = match stage {
            Stage::Linear { layer } => linear_float(&model.layers[layer], &a),
            Stage::Attention { q, k, v } => {
                let qm = linear_float(&model.layers[q], &a);
                let km = linear_float(&model.layers[k], &a);
                let vm = linear_float(&model.layers[v], &a);
                let scores = attention_scores(qm.data(), km.data(), a.rows(), qm.cols());
                scores.matmul(&vm)
            }
        };
    }
    Ok(a)
}

fn linear_float(layer: &Layer, x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), layer.out_dim());
    for t in 0..x.rows() {
        let mut y = layer.weight.matvec(x.row(t));
        if let Some(b) = &layer.bias {
            y.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        layer.activation.apply(&mut y);
        out.row_mut(t).copy_from_slice(&y);
    }
    out
}

/// Row-wise `softmax(Q Kᵀ / √d_h)` for token-major `q`, `k`.
pub fn attention_scores(q: &[f64], k: &[f64], tokens: usize, d_h: usize) -> Matrix {
    let inv = 1.0 / (d_h as f64).sqrt();
    let mut s = Matrix::zeros(tokens, tokens);
    for i in 0..tokens {
        let qi = &q[i * d_h..(i + 1) * d_h];
        let row = s.row_mut(i);
        for (j, r) in row.iter_mut().enumerate() {
            *r = dot(qi, &k[j * d_h..(j + 1) * d_h]) * inv;
        }
        softmax_in_place(row);
    }
    s
}

/// Convolution geometry: stride 1, no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub n: usize,
}

impl ConvSpec {
    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }

    /// Input flattening, row-major over `(row, col, channel)`.
    pub fn input_index(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.w + j) * self.c + c
    }

    /// Output flattening, row-major over `(row, col, filter)`.
    pub fn output_index(&self, i: usize, j: usize, n: usize) -> usize {
        (i * self.out_w() + j) * self.n + n
    }

    /// Kernel layout `(kH, kW, C, N)`, row-major.
    pub fn kernel_index(&self, u: usize, v: usize, c: usize, n: usize) -> usize {
        ((u * self.kw + v) * self.c + c) * self.n + n
    }

    fn validate(&self) -> Result<(), ModelError> {
        if [self.h, self.w, self.c, self.kh, self.kw, self.n].contains(&0) {
            return Err(ModelError::Shape("conv dimensions must be positive".into()));
        }
        if self.kh > self.h || self.kw > self.w {
            return Err(ModelError::Shape("kernel larger than input".into()));
        }
        Ok(())
    }
}

/// Unrolls a convolution into the equivalent dense layer, so that
/// `W · vec(X) = vec(conv(X, K))`.
pub fn conv_to_fc(spec: &ConvSpec, kernel: &[f64]) -> Result<Matrix, ModelError> {
    spec.validate()?;
    if kernel.len() != spec.kh * spec.kw * spec.c * spec.n {
        return Err(ModelError::Shape(format!("kernel has {} entries", kernel.len())));
    }
    let mut w = Matrix::zeros(spec.out_h() * spec.out_w() * spec.n, spec.h * spec.w * spec.c);
    for i in 0..spec.out_h() {
        for j in 0..spec.out_w() {
            for n in 0..spec.n {
                let row = spec.output_index(i, j, n);
                for u in 0..spec.kh {
                    for v in 0..spec.kw {
                        for c in 0..spec.c {
                            w[(row, spec.input_index(i + u, j + v, c))] = kernel[spec.kernel_index(u, v, c, n)];
                        }
                    }
                }
            }
        }
    }
    Ok(w)
}

fn gaussian_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// MLP with `dims.len() - 1` layers, relu on hidden layers, identity output,
/// weights `N(0, 1/fan_in)` and small biases.
pub fn toy_mlp(seed: u64, dims: &[usize]) -> ModelParams {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = dims.len() - 1;
    let layers = (0..n)
        .map(|i| {
            let w = gaussian_matrix(&mut rng, dims[i + 1], dims[i], 1.0 / (dims[i] as f64).sqrt());
            let b = gaussian_matrix(&mut rng, 1, dims[i + 1], 0.1).into_data();
            let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
            Layer { id: LayerId::new(i as u32, LayerType::Generic), weight: w, bias: Some(b), activation: act }
        })
        .collect();
    ModelParams { kind: ModelKind::Mlp, layers, max_tokens: 1 }
}

/// Single attention head `[W_q, W_k, W_v, W_o]` with `d_v = d_h`.
pub fn toy_attention(seed: u64, d: usize, d_h: usize, d_out: usize, max_tokens: usize) -> ModelParams {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let std_in = 1.0 / (d as f64).sqrt();
    let types = [LayerType::AttnQ, LayerType::AttnK, LayerType::AttnV];
    let mut layers: Vec<Layer> = types
        .iter()
        .map(|&t| Layer::new(LayerId::new(0, t), gaussian_matrix(&mut rng, d_h, d, std_in), Activation::Identity))
        .collect();
    let w_o = gaussian_matrix(&mut rng, d_out, d_h, 1.0 / (d_h as f64).sqrt());
    layers.push(Layer::new(LayerId::new(0, LayerType::AttnO), w_o, Activation::Identity));
    ModelParams { kind: ModelKind::AttentionHead, layers, max_tokens }
}

/// Stack of `blocks` single-head blocks: attention (`d_h = d`), output
/// projection, then a relu MLP `d → hidden → d`. No residuals or norms.
pub fn toy_transformer(seed: u64, blocks: usize, d: usize, hidden: usize, max_tokens: usize) -> ModelParams {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(blocks * 6);
    let sd = 1.0 / (d as f64).sqrt();
    let sh = 1.0 / (hidden as f64).sqrt();
    for b in 0..blocks as u32 {
        for t in [LayerType::AttnQ, LayerType::AttnK, LayerType::AttnV, LayerType::AttnO] {
            layers.push(Layer::new(LayerId::new(b, t), gaussian_matrix(&mut rng, d, d, sd), Activation::Identity));
        }
        layers.push(Layer::new(
            LayerId::new(b, LayerType::MlpFc),
            gaussian_matrix(&mut rng, hidden, d, sd),
            Activation::Relu,
        ));
        layers.push(Layer::new(
            LayerId::new(b, LayerType::MlpProj),
            gaussian_matrix(&mut rng, d, hidden, sh),
            Activation::Identity,
        ));
    }
    ModelParams { kind: ModelKind::Transformer, layers, max_tokens }
}

/// Default toy transformer shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTransformerShape {
    pub blocks: usize,
    pub d: usize,
    pub hidden: usize,
    pub max_tokens: usize,
}

impl Default for ToyTransformerShape {
    fn default() -> Self {
        ToyTransformerShape { blocks: 12, d: 256, hidden: 1024, max_tokens: 8 }
    }
}

impl ToyTransformerShape {
    pub fn build(&self, seed: u64) -> ModelParams {
        toy_transformer(seed, self.blocks, self.d, self.hidden, self.max_tokens)
    }
}
