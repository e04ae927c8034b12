//! Low-rank splitting of weight matrices between the trusted party (Charlie,
//! who keeps the top-k singular triplets in factored form) and the untrusted
//! party (David, who gets the dense residual and every unaddressed layer).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Svd};
use crate::models::ModelParams;
use crate::ring::{RingError, RingParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecomposeError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("sensitivity rank {k} exceeds matrix rank {rank}")]
    Rank { k: usize, rank: usize },
    #[error("sensitivity rank {0} < 2 leaks the hidden singular vector; refusing without override")]
    UnsafeSplit(usize),
    #[error("no layer {0} in model")]
    UnknownLayer(LayerId),
    #[error("plan does not fit model: {0}")]
    PlanShapeMismatch(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("risk must be positive, got {0}")]
    Domain(f64),
    #[error("layer {layer}: {source}")]
    Headroom { layer: usize, source: RingError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerType {
    MlpFc,
    MlpProj,
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    Generic,
}

impl LayerType {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerType::MlpFc => "mlp_fc",
            LayerType::MlpProj => "mlp_proj",
            LayerType::AttnQ => "attn_q",
            LayerType::AttnK => "attn_k",
            LayerType::AttnV => "attn_v",
            LayerType::AttnO => "attn_o",
            LayerType::Generic => "generic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub block: u32,
    pub layer_type: LayerType,
}

impl LayerId {
    pub fn new(block: u32, layer_type: LayerType) -> Self {
        LayerId { block, layer_type }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.block, self.layer_type.as_str())
    }
}

/// `U_k diag(σ_k) V_kᵀ` kept in factored form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Factors {
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    /// `U (σ ⊙ (Vᵀ x))`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut t = self.v.matvec_t(x);
        t.iter_mut().zip(&self.sigma).for_each(|(a, s)| *a *= s);
        self.u.matvec(&t)
    }

    /// Multiply-adds of one [`Factors::apply`], with the σ scaling not counted.
    pub fn macs(&self) -> u64 {
        (self.k() * (self.u.rows() + self.v.rows())) as u64
    }

    pub fn dense(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.k(), |i, j| self.u[(i, j)] * self.sigma[j]);
        us.matmul(&self.v.transpose())
    }

    /// Stored values: `k (m + n + 1)`.
    pub fn param_count(&self) -> u64 {
        (self.k() * (self.u.rows() + self.v.rows() + 1)) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub charlie: Factors,
    pub david: Matrix,
}

impl Decomposition {
    pub fn k(&self) -> usize {
        self.charlie.k()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.charlie.dense().add(&self.david)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitOptions {
    /// Permit `k = 1`. Only the subspace-attack demonstration sets this.
    pub allow_unsafe_k1: bool,
}

pub fn svd(w: &Matrix) -> Result<Svd, DecomposeError> {
    Ok(linalg::svd(w)?)
}

/// Full singular spectrum, largest first.
pub fn spectral_profile(w: &Matrix) -> Result<Vec<f64>, DecomposeError> {
    Ok(linalg::svd(w)?.sigma)
}

pub fn split(w: &Matrix, k: usize, opts: SplitOptions) -> Result<Decomposition, DecomposeError> {
    if k == 0 || (k == 1 && !opts.allow_unsafe_k1) {
        return Err(DecomposeError::UnsafeSplit(k));
    }
    let s = linalg::svd(w)?;
    let rank = s.rank();
    if k > rank {
        return Err(DecomposeError::Rank { k, rank });
    }
    Ok(split_from_svd(w, &s, k))
}

fn split_from_svd(w: &Matrix, s: &Svd, k: usize) -> Decomposition {
    let charlie = Factors { u: s.u.leading_columns(k), sigma: s.sigma[..k].to_vec(), v: s.v.leading_columns(k) };
    let david = w.sub(&charlie.dense());
    Decomposition { charlie, david }
}

/// Components hidden per layer by [`SplitPlan::default_for`].
pub const DEFAULT_K: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub block: u32,
    pub layer_type: LayerType,
    #[serde(rename = "K")]
    pub k: usize,
}

impl Triplet {
    pub fn id(&self) -> LayerId {
        LayerId::new(self.block, self.layer_type)
    }
}

/// Which layers to split and how many singular components each keeps hidden.
/// Serialized as a bare JSON list of `{"block", "layer_type", "K"}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitPlan {
    pub triplets: Vec<Triplet>,
}

impl SplitPlan {
    pub fn new(triplets: Vec<Triplet>) -> Result<Self, DecomposeError> {
        let plan = SplitPlan { triplets };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), DecomposeError> {
        let mut seen = BTreeSet::new();
        for t in &self.triplets {
            if t.k < 2 {
                return Err(DecomposeError::InvalidPlan(format!("K = {} for {}", t.k, t.id())));
            }
            if !seen.insert(t.id()) {
                return Err(DecomposeError::InvalidPlan(format!("duplicate triplet {}", t.id())));
            }
        }
        Ok(())
    }

    /// Layers the plan leaves entirely to David.
    pub fn offloaded_layers(&self, model: &ModelParams) -> Vec<LayerId> {
        let split: BTreeSet<LayerId> = self.triplets.iter().map(Triplet::id).collect();
        model.layers.iter().map(|l| l.id).filter(|id| !split.contains(id)).collect()
    }

    /// Every layer of the first and last block, hiding up to
    /// [`DEFAULT_K`] components each.
    pub fn default_for(model: &ModelParams) -> SplitPlan {
        Self::edge_blocks(model, 1, DEFAULT_K)
    }

    /// Every layer type in the first `edge_blocks` and last `edge_blocks`
    /// blocks, each hiding `min(k, min(m, n))` components.
    pub fn edge_blocks(model: &ModelParams, edge_blocks: u32, k: usize) -> SplitPlan {
        let blocks = model.layers.iter().map(|l| l.id.block).max().map_or(0, |b| b + 1);
        let chosen = |b: u32| b < edge_blocks || b + edge_blocks >= blocks;
        let triplets = model
            .layers
            .iter()
            .filter(|l| chosen(l.id.block))
            .map(|l| Triplet { block: l.id.block, layer_type: l.id.layer_type, k: k.min(l.in_dim().min(l.out_dim())) })
            .collect();
        SplitPlan { triplets }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Assignment {
    Split(Decomposition),
    Offloaded,
}

impl Assignment {
    pub fn is_split(&self) -> bool {
        matches!(self, Assignment::Split(_))
    }
}

/// A model together with the split/offload decision for every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedModel {
    pub model: ModelParams,
    pub assignments: Vec<Assignment>,
}

impl PlannedModel {
    /// Every layer offloaded.
    pub fn offload_all(model: ModelParams) -> Self {
        let assignments = vec![Assignment::Offloaded; model.layers.len()];
        PlannedModel { model, assignments }
    }

    pub fn split_count(&self) -> usize {
        self.assignments.iter().filter(|a| a.is_split()).count()
    }

    /// Matrix David multiplies by for layer `i`.
    pub fn david_weight(&self, i: usize) -> &Matrix {
        match &self.assignments[i] {
            Assignment::Split(d) => &d.david,
            Assignment::Offloaded => &self.model.layers[i].weight,
        }
    }

    pub fn charlie_factors(&self, i: usize) -> Option<&Factors> {
        match &self.assignments[i] {
            Assignment::Split(d) => Some(&d.charlie),
            Assignment::Offloaded => None,
        }
    }

    /// Checks `scale² · activation_bound · max_row_l1(W^D) < L/2` for every
    /// matrix that will be multiplied in the ring.
    pub fn check_headroom(&self, ring: &RingParams, activation_bound: f64) -> Result<(), DecomposeError> {
        for i in 0..self.model.layers.len() {
            ring.check_headroom(self.david_weight(i).max_row_l1(), activation_bound)
                .map_err(|source| DecomposeError::Headroom { layer: i, source })?;
        }
        Ok(())
    }
}

/// Splits every addressed layer with its `K`; everything else is offloaded.
pub fn plan_decomposition(model: &ModelParams, plan: &SplitPlan) -> Result<PlannedModel, DecomposeError> {
    plan.validate()?;
    let mut assignments = vec![Assignment::Offloaded; model.layers.len()];
    for t in &plan.triplets {
        let idx = model.find_layer(t.id()).ok_or(DecomposeError::UnknownLayer(t.id()))?;
        assignments[idx] = Assignment::Split(split(&model.layers[idx].weight, t.k, SplitOptions::default())?);
    }
    Ok(PlannedModel { model: model.clone(), assignments })
}

/// Parameter and per-token compute split between the parties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub eta: f64,
    pub charlie_params: u64,
    pub total_params: u64,
    pub charlie_flops_per_token: u64,
    pub david_flops_per_token: u64,
    /// Set when factored storage is not smaller than the dense layer it replaces.
    pub dense_warning: bool,
}

pub fn parameter_density(plan: &SplitPlan, model: &ModelParams) -> Result<DensityReport, DecomposeError> {
    plan.validate()?;
    let mut charlie_params = 0u64;
    let mut charlie_flops = 0u64;
    let mut dense_warning = false;
    for t in &plan.triplets {
        let idx = model
            .find_layer(t.id())
            .ok_or_else(|| DecomposeError::PlanShapeMismatch(format!("no layer {}", t.id())))?;
        let (m, n) = (model.layers[idx].out_dim() as u64, model.layers[idx].in_dim() as u64);
        let k = t.k as u64;
        if k > m.min(n) {
            return Err(DecomposeError::PlanShapeMismatch(format!("K = {k} exceeds {m}x{n} layer {}", t.id())));
        }
        let params = k * (m + n + 1);
        dense_warning |= params >= m * n;
        charlie_params += params;
        charlie_flops += 2 * k * (m + n);
    }
    let total_params = model.total_params();
    let david_flops = model.layers.iter().map(|l| 2 * (l.in_dim() * l.out_dim()) as u64).sum();
    let eta = if total_params == 0 { 0.0 } else { charlie_params as f64 / total_params as f64 };
    dense_warning |= eta > 1.0;
    Ok(DensityReport {
        eta,
        charlie_params,
        total_params,
        charlie_flops_per_token: charlie_flops,
        david_flops_per_token: david_flops,
        dense_warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Usefulness {
    pub kappa: f64,
    pub full_risk: f64,
    pub extended_risk: f64,
}

impl Usefulness {
    /// `κ ≤ 1 - K`.
    pub fn is_k_useful(&self, k: f64) -> bool {
        self.kappa <= 1.0 - k
    }
}

/// `κ = risk(full) / risk(extended exposed model)`.
pub fn usefulness_ratio(full_risk: f64, extended_risk: f64) -> Result<Usefulness, DecomposeError> {
    for r in [full_risk, extended_risk] {
        if r.is_nan() || r <= 0.0 {
            return Err(DecomposeError::Domain(r));
        }
    }
    Ok(Usefulness { kappa: full_risk / extended_risk, full_risk, extended_risk })
}
