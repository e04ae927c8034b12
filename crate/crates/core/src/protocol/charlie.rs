use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{OpCounters, Party, Path, ProtocolError, ProtocolMessage, SecurityMode, Topology, PROTOCOL_VERSION};
use crate::decompose::{Factors, PlannedModel};
use crate::linalg::Matrix;
use crate::models::{attention_core_macs, Activation, Stage};
use crate::qforward::{activate_and_quantize, attention_mix, finish_projection, RingWeights};
use crate::ring::{
    dequantize, mask, modmatvec_tokens, quantize, sample_mask, unmask, CancellationMask, FixedVec, MaskSampler,
    MaskVec, RingParams,
};

/// What Charlie keeps for one layer of a stage it drives.
///
/// `w_d` is the residual David also holds; Charlie needs it to derive
/// cancellation masks. For an unsplit layer inside a Charlie-driven attention
/// stage `factors` is `None` and `w_d` is the whole weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharlieLayer {
    pub factors: Option<Factors>,
    pub w_d: Matrix,
    pub bias: Option<Vec<f64>>,
    pub activation: Activation,
}

impl CharlieLayer {
    /// Charlie's share of every layer in a Charlie-driven stage.
    pub fn extract(planned: &PlannedModel, topology: &Topology) -> Vec<Option<CharlieLayer>> {
        let mut out = vec![None; planned.model.layers.len()];
        for stage in topology.stages.iter().filter(|s| topology.owner(s) == Party::Charlie) {
            for i in stage.layers() {
                let l = &planned.model.layers[i];
                out[i] = Some(CharlieLayer {
                    factors: planned.charlie_factors(i).cloned(),
                    w_d: planned.david_weight(i).clone(),
                    bias: l.bias.clone(),
                    activation: l.activation,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct RingLayer {
    factors: Option<Factors>,
    w_d: RingWeights,
    bias: Option<Vec<f64>>,
    activation: Activation,
}

/// Where a Charlie-driven stage is waiting for David.
#[derive(Debug, Clone, PartialEq)]
pub enum PendingLinear {
    Main { a: FixedVec },
    Q { a: FixedVec },
    K { a: FixedVec, q: Vec<f64> },
    V { a_s: FixedVec },
}

#[derive(Debug, Clone)]
struct Pending {
    stage: usize,
    layer: usize,
    path: Path,
    cancel: Option<CancellationMask>,
    state: PendingLinear,
}

#[derive(Debug, Clone, Default)]
struct Inference {
    pending: Option<Pending>,
}

type PoolKey = (u64, usize, Path);

/// Charlie: hidden factors, pads and cancellation masks, and the per-inference
/// position in the stage schedule.
#[derive(Debug, Clone)]
pub struct CharlieState {
    ring: RingParams,
    topology: Topology,
    layers: Vec<Option<RingLayer>>,
    mode: SecurityMode,
    sampler: MaskSampler,
    pool: BTreeMap<PoolKey, (MaskVec, CancellationMask)>,
    next_budget_id: u64,
    active: BTreeMap<u64, Inference>,
    outputs: BTreeMap<u64, FixedVec>,
    counters: OpCounters,
}

impl CharlieState {
    pub fn new(
        topology: Topology,
        layers: Vec<Option<CharlieLayer>>,
        ring: RingParams,
        seed: u64,
        stream: u64,
        mode: SecurityMode,
    ) -> Result<Self, ProtocolError> {
        if layers.len() != topology.layers.len() {
            return Err(ProtocolError::TopologyMismatch(format!(
                "{} layers for a {}-layer topology",
                layers.len(),
                topology.layers.len()
            )));
        }
        let mut ring_layers = Vec::with_capacity(layers.len());
        for (i, l) in layers.into_iter().enumerate() {
            ring_layers.push(match l {
                None => None,
                Some(l) => {
                    let shape = &topology.layers[i];
                    if l.w_d.rows() != shape.rows || l.w_d.cols() != shape.cols {
                        return Err(ProtocolError::TopologyMismatch(format!("layer {i} residual shape")));
                    }
                    Some(RingLayer {
                        w_d: RingWeights::from_real(&l.w_d, &ring)?,
                        factors: l.factors,
                        bias: l.bias,
                        activation: l.activation,
                    })
                }
            });
        }
        for (layer, _) in topology.masked_layers() {
            if ring_layers[layer].is_none() {
                return Err(ProtocolError::TopologyMismatch(format!("Charlie is missing layer {layer}")));
            }
        }
        Ok(CharlieState {
            ring,
            topology,
            layers: ring_layers,
            mode,
            sampler: MaskSampler::new(seed, stream),
            pool: BTreeMap::new(),
            next_budget_id: 0,
            active: BTreeMap::new(),
            outputs: BTreeMap::new(),
            counters: OpCounters::default(),
        })
    }

    pub fn ring(&self) -> &RingParams {
        &self.ring
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn mode(&self) -> SecurityMode {
        self.mode
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = OpCounters::default();
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn pool_entries_for(&self, inference_id: u64) -> usize {
        self.pool.keys().filter(|k| k.0 == inference_id).count()
    }

    /// First inference id that has no pads yet.
    pub fn next_budget_id(&self) -> u64 {
        self.next_budget_id
    }

    pub fn output(&self, inference_id: u64) -> Option<&FixedVec> {
        self.outputs.get(&inference_id)
    }

    /// Draws pads for the next `budget` inference ids; returns the number of
    /// (pad, cancellation) pairs created.
    pub fn precompute(&mut self, budget: u64) -> usize {
        let masked = self.topology.masked_layers();
        let mut created = 0;
        for id in self.next_budget_id..self.next_budget_id + budget {
            for &(layer, path) in &masked {
                let w = &self.layers[layer].as_ref().expect("checked in new").w_d;
                let dim = w.w.cols * self.topology.max_tokens;
                let r = sample_mask(dim, &self.ring, &mut self.sampler);
                let c = modmatvec_tokens(&w.w, &FixedVec::new(r.values.clone(), 1), &self.ring)
                    .expect("pad length is a whole number of tokens");
                self.counters.precompute_macs += w.macs(self.topology.max_tokens);
                self.pool.insert((id, layer, path), (r, CancellationMask { values: c.values, layer_index: layer }));
                created += 1;
            }
        }
        self.next_budget_id += budget;
        created
    }

    /// Forgets an inference and destroys every pad reserved for it.
    pub fn abort_inference(&mut self, inference_id: u64) {
        self.active.remove(&inference_id);
        self.pool.retain(|k, _| k.0 != inference_id);
    }

    /// Consumes one message from David and returns the replies.
    pub fn handle(&mut self, msg: ProtocolMessage) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        match msg {
            ProtocolMessage::SetupParams { version, ring, topology } => {
                if version != PROTOCOL_VERSION {
                    return Err(ProtocolError::VersionMismatch { expected: PROTOCOL_VERSION, got: version });
                }
                if ring != self.ring {
                    return Err(ProtocolError::TopologyMismatch("ring parameters differ".into()));
                }
                if topology != self.topology.digest() {
                    return Err(ProtocolError::TopologyMismatch("topology digest differs".into()));
                }
                Ok(vec![self.setup_message()])
            }
            ProtocolMessage::InferenceInput { inference_id, input } => {
                if self.active.contains_key(&inference_id) {
                    return Err(ProtocolError::Unexpected(format!("inference {inference_id} already running")));
                }
                self.active.insert(inference_id, Inference::default());
                let first = self.topology.stages.first().copied();
                match first {
                    Some(s) if self.topology.owner(&s) == Party::Charlie => {
                        self.check_activation(&input, self.topology.input_dim())?;
                        self.run_from(inference_id, 0, input)
                    }
                    _ => Ok(vec![]),
                }
            }
            ProtocolMessage::PlainActivation { inference_id, layer_id, payload } => {
                let inf = self.inference(inference_id)?;
                if inf.pending.is_some() {
                    return Err(ProtocolError::Unexpected("plain activation while a masked step is open".into()));
                }
                let s = self
                    .topology
                    .stage_of_output(layer_id as usize)
                    .ok_or_else(|| ProtocolError::Unexpected(format!("layer {layer_id} ends no stage")))?;
                let next = s + 1;
                match self.topology.stages.get(next) {
                    Some(st) if self.topology.owner(st) == Party::Charlie => {}
                    _ => {
                        return Err(ProtocolError::Unexpected(format!("stage after layer {layer_id} is not Charlie's")))
                    }
                }
                let dim = self.topology.layers[layer_id as usize].rows;
                self.check_activation(&payload, dim)?;
                self.run_from(inference_id, next, payload)
            }
            ProtocolMessage::MaskedPartial { inference_id, layer_id, path, payload } => {
                self.on_partial(inference_id, layer_id as usize, path, payload)
            }
            ProtocolMessage::InferenceOutput { inference_id, output } => {
                let inf = self.inference(inference_id)?;
                if inf.pending.is_some() {
                    return Err(ProtocolError::Unexpected("output while a masked step is open".into()));
                }
                self.active.remove(&inference_id);
                self.outputs.insert(inference_id, output);
                Ok(vec![])
            }
            other @ ProtocolMessage::MaskedActivation { .. } => {
                Err(ProtocolError::Unexpected(format!("Charlie received {}", other.kind_name())))
            }
        }
    }

    pub fn setup_message(&self) -> ProtocolMessage {
        ProtocolMessage::SetupParams { version: PROTOCOL_VERSION, ring: self.ring, topology: self.topology.digest() }
    }

    fn inference(&self, id: u64) -> Result<&Inference, ProtocolError> {
        self.active.get(&id).ok_or_else(|| ProtocolError::Unexpected(format!("unknown inference {id}")))
    }

    fn check_activation(&self, a: &FixedVec, dim: usize) -> Result<(), ProtocolError> {
        check_tokens(a, dim, self.topology.max_tokens, &self.ring, 1)
    }

    /// Runs Charlie's stages from `stage` until it needs David.
    fn run_from(&mut self, id: u64, stage: usize, a: FixedVec) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        let stages = &self.topology.stages;
        if stage == stages.len() {
            self.active.remove(&id);
            self.outputs.insert(id, a.clone());
            return Ok(vec![ProtocolMessage::InferenceOutput { inference_id: id, output: a }]);
        }
        let st = stages[stage];
        if self.topology.owner(&st) == Party::David {
            let layer_id = stages[stage - 1].output_layer() as u32;
            return Ok(vec![ProtocolMessage::PlainActivation { inference_id: id, layer_id, payload: a }]);
        }
        match st {
            Stage::Linear { layer } => self.open(id, stage, layer, Path::Main, a.clone(), PendingLinear::Main { a }),
            Stage::Attention { q, .. } => self.open(id, stage, q, Path::Q, a.clone(), PendingLinear::Q { a }),
        }
    }

    /// Masks `a` for `layer` (or sends it in the clear in insecure mode).
    fn open(
        &mut self,
        id: u64,
        stage: usize,
        layer: usize,
        path: Path,
        a: FixedVec,
        state: PendingLinear,
    ) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        let (payload, cancel) = match self.mask_for(id, layer, path, &a) {
            Ok(v) => v,
            Err(e) => {
                self.abort_inference(id);
                return Err(e);
            }
        };
        let inf = self.active.get_mut(&id).expect("inference is active");
        inf.pending = Some(Pending { stage, layer, path, cancel, state });
        Ok(vec![ProtocolMessage::MaskedActivation { inference_id: id, layer_id: layer as u32, path, payload }])
    }

    /// The masked payload for one layer step plus the cancellation mask that
    /// undoes it. Consumes the pool entry.
    pub fn mask_for(
        &mut self,
        id: u64,
        layer: usize,
        path: Path,
        a: &FixedVec,
    ) -> Result<(FixedVec, Option<CancellationMask>), ProtocolError> {
        self.mask_with_mode(id, layer, path, a, self.mode)
    }

    pub fn mask_with_mode(
        &mut self,
        id: u64,
        layer: usize,
        path: Path,
        a: &FixedVec,
        mode: SecurityMode,
    ) -> Result<(FixedVec, Option<CancellationMask>), ProtocolError> {
        let l = self.layer(layer)?;
        check_tokens(a, l.w_d.w.cols, self.topology.max_tokens, &self.ring, 1)?;
        l.w_d.w.check_headroom(l.w_d.row_l1, a, &self.ring)?;
        match mode {
            SecurityMode::Insecure => Ok((a.clone(), None)),
            SecurityMode::Secure => {
                let (r, c) = self.pool.remove(&(id, layer, path)).ok_or(ProtocolError::MaskExhausted {
                    inference_id: id,
                    layer,
                    path,
                })?;
                self.counters.elementwise += a.len() as u64;
                Ok((mask(a, &r, &self.ring)?, Some(c)))
            }
        }
    }

    fn layer(&self, layer: usize) -> Result<&RingLayer, ProtocolError> {
        self.layers
            .get(layer)
            .and_then(Option::as_ref)
            .ok_or_else(|| ProtocolError::TopologyMismatch(format!("layer {layer} is not driven by Charlie")))
    }

    /// `W^D a + W^C a + b` from David's reply; `a` is the unmasked input.
    pub fn project(
        &mut self,
        layer: usize,
        a: &FixedVec,
        reply: &FixedVec,
        cancel: Option<&CancellationMask>,
    ) -> Result<Vec<f64>, ProtocolError> {
        let l = self.layer(layer)?;
        let rows = l.w_d.w.rows;
        let tokens = a.len() / l.w_d.w.cols.max(1);
        if reply.logical_scale != 2 || reply.len() != rows * tokens {
            return Err(ProtocolError::Shape(format!(
                "partial for layer {layer}: {} values at scale {}, expected {} at scale 2",
                reply.len(),
                reply.logical_scale,
                rows * tokens
            )));
        }
        if reply.values.iter().any(|&v| v >= self.ring.modulus()) {
            return Err(ProtocolError::Shape("partial holds a residue outside the ring".into()));
        }
        let pre = match cancel {
            Some(c) => unmask(reply, c, &self.ring)?,
            None => reply.clone(),
        };
        let macs = l.factors.as_ref().map_or(0, |f| f.macs() * tokens as u64);
        let h = finish_projection(&pre, l.factors.as_ref(), l.bias.as_deref(), rows, a, &self.ring)?;
        self.counters.macs += macs;
        self.counters.elementwise += (reply.len() * (1 + cancel.is_some() as usize)) as u64;
        Ok(h)
    }

    /// Activation and requantization of a finished projection.
    pub fn activate(&self, layer: usize, h: Vec<f64>) -> Result<FixedVec, ProtocolError> {
        let l = self.layer(layer)?;
        Ok(activate_and_quantize(h, l.activation, l.w_d.w.rows, &self.ring)?)
    }

    fn on_partial(
        &mut self,
        id: u64,
        layer: usize,
        path: Path,
        payload: FixedVec,
    ) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        let inf =
            self.active.get_mut(&id).ok_or_else(|| ProtocolError::Unexpected(format!("unknown inference {id}")))?;
        let p = match inf.pending.take() {
            Some(p) if p.layer == layer && p.path == path => p,
            Some(p) => {
                inf.pending = Some(p);
                return Err(ProtocolError::Unexpected(format!("partial for layer {layer} path {path:?} not expected")));
            }
            None => return Err(ProtocolError::Unexpected("partial with no open step".into())),
        };
        let result = self.advance(id, p, payload);
        if result.is_err() {
            self.abort_inference(id);
        }
        result
    }

    fn advance(&mut self, id: u64, p: Pending, payload: FixedVec) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        let stage = p.stage;
        match (p.state, self.topology.stages[stage]) {
            (PendingLinear::Main { a }, _) => {
                let h = self.project(p.layer, &a, &payload, p.cancel.as_ref())?;
                let next = self.activate(p.layer, h)?;
                self.run_from(id, stage + 1, next)
            }
            (PendingLinear::Q { a }, Stage::Attention { k, .. }) => {
                let q = self.project(p.layer, &a, &payload, p.cancel.as_ref())?;
                self.open(id, stage, k, Path::K, a.clone(), PendingLinear::K { a, q })
            }
            (PendingLinear::K { a, q }, Stage::Attention { v, .. }) => {
                let kk = self.project(p.layer, &a, &payload, p.cancel.as_ref())?;
                let d = self.topology.layers[p.layer].cols;
                let d_h = self.topology.layers[p.layer].rows;
                let tokens = a.len() / d;
                let x_hat = dequantize(&a, &self.ring)?;
                let mixed = attention_mix(&q, &kk, &x_hat, tokens, d_h);
                self.counters.macs += attention_core_macs(tokens, d_h, d);
                let a_s = quantize(&mixed, &self.ring)?;
                self.open(id, stage, v, Path::V, a_s.clone(), PendingLinear::V { a_s })
            }
            (PendingLinear::V { a_s }, _) => {
                let h = self.project(p.layer, &a_s, &payload, p.cancel.as_ref())?;
                let next = self.activate(p.layer, h)?;
                self.run_from(id, stage + 1, next)
            }
            _ => Err(ProtocolError::Unexpected("attention step on a linear stage".into())),
        }
    }
}

/// Payload must be a whole number (1..=max_tokens) of `dim`-wide tokens of
/// in-range residues at the given logical scale.
pub(super) fn check_tokens(
    a: &FixedVec,
    dim: usize,
    max_tokens: usize,
    ring: &RingParams,
    scale: u8,
) -> Result<(), ProtocolError> {
    if a.logical_scale != scale {
        return Err(ProtocolError::Shape(format!("logical scale {} where {scale} is expected", a.logical_scale)));
    }
    if dim == 0 || a.is_empty() || !a.len().is_multiple_of(dim) || a.len() / dim > max_tokens {
        return Err(ProtocolError::Shape(format!(
            "{} values do not form 1..={max_tokens} tokens of width {dim}",
            a.len()
        )));
    }
    if a.values.iter().any(|&v| v >= ring.modulus()) {
        return Err(ProtocolError::Shape("residue outside the ring".into()));
    }
    Ok(())
}
