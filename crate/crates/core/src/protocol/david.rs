use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::charlie::check_tokens;
use super::{OpCounters, Party, ProtocolError, ProtocolMessage, Topology, PROTOCOL_VERSION};
use crate::decompose::PlannedModel;
use crate::linalg::Matrix;
use crate::models::{attention_core_macs, Activation, ModelError, Stage};
use crate::qforward::{attention_local, linear_local, quantize_tokens, LayerView, RingWeights};
use crate::ring::{modmatvec_tokens, FixedVec, RingParams};

/// What David holds for one layer: the residual `W^D` of a split layer, or
/// the whole weight of an offloaded one. Split layers carry no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DavidLayer {
    pub w: Matrix,
    pub bias: Option<Vec<f64>>,
    pub activation: Activation,
}

impl DavidLayer {
    pub fn extract(planned: &PlannedModel) -> Vec<DavidLayer> {
        planned
            .model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let split = planned.assignments[i].is_split();
                DavidLayer {
                    w: planned.david_weight(i).clone(),
                    bias: if split { None } else { l.bias.clone() },
                    activation: l.activation,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct RingLayer {
    w: RingWeights,
    bias: Option<Vec<f64>>,
    activation: Activation,
}

#[derive(Debug, Clone)]
pub struct DavidState {
    ring: RingParams,
    topology: Topology,
    layers: Vec<RingLayer>,
    active: BTreeMap<u64, ()>,
    outputs: BTreeMap<u64, FixedVec>,
    counters: OpCounters,
}

impl DavidState {
    pub fn new(topology: Topology, layers: Vec<DavidLayer>, ring: RingParams) -> Result<Self, ProtocolError> {
        if layers.len() != topology.layers.len() {
            return Err(ProtocolError::TopologyMismatch(format!(
                "{} layers for a {}-layer topology",
                layers.len(),
                topology.layers.len()
            )));
        }
        let mut ring_layers = Vec::with_capacity(layers.len());
        for (i, l) in layers.into_iter().enumerate() {
            let shape = &topology.layers[i];
            if l.w.rows() != shape.rows || l.w.cols() != shape.cols {
                return Err(ProtocolError::TopologyMismatch(format!("layer {i} weight shape")));
            }
            ring_layers.push(RingLayer {
                w: RingWeights::from_real(&l.w, &ring)?,
                bias: l.bias,
                activation: l.activation,
            });
        }
        Ok(DavidState {
            ring,
            topology,
            layers: ring_layers,
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

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = OpCounters::default();
    }

    pub fn output(&self, inference_id: u64) -> Option<&FixedVec> {
        self.outputs.get(&inference_id)
    }

    pub fn setup_message(&self) -> ProtocolMessage {
        ProtocolMessage::SetupParams { version: PROTOCOL_VERSION, ring: self.ring, topology: self.topology.digest() }
    }

    pub fn abort_inference(&mut self, inference_id: u64) {
        self.active.remove(&inference_id);
    }

    /// Starts an inference on a `tokens × d` input.
    ///
    /// The input only travels to Charlie when Charlie runs the first stage;
    /// otherwise `InferenceInput` is empty and only opens the inference.
    pub fn begin(&mut self, inference_id: u64, x: &Matrix) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        if x.cols() != self.topology.input_dim() || x.rows() == 0 || x.rows() > self.topology.max_tokens {
            return Err(ModelError::Shape(format!("input {}x{} does not fit model", x.rows(), x.cols())).into());
        }
        if self.active.contains_key(&inference_id) || self.outputs.contains_key(&inference_id) {
            return Err(ProtocolError::Unexpected(format!("inference {inference_id} already used")));
        }
        let a = quantize_tokens(x, &self.ring)?;
        self.active.insert(inference_id, ());
        let charlie_first = self.topology.stages.first().is_some_and(|s| self.topology.owner(s) == Party::Charlie);
        if charlie_first {
            return Ok(vec![ProtocolMessage::InferenceInput { inference_id, input: a }]);
        }
        let mut out = vec![ProtocolMessage::InferenceInput { inference_id, input: FixedVec::new(vec![], 1) }];
        out.extend(self.run_local(inference_id, 0, a)?);
        Ok(out)
    }

    pub fn handle(&mut self, msg: ProtocolMessage) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        match msg {
            ProtocolMessage::SetupParams { version, ring, topology } => {
                if version != PROTOCOL_VERSION {
                    return Err(ProtocolError::VersionMismatch { expected: PROTOCOL_VERSION, got: version });
                }
                if ring != self.ring || topology != self.topology.digest() {
                    return Err(ProtocolError::TopologyMismatch("Charlie echoed different parameters".into()));
                }
                Ok(vec![])
            }
            ProtocolMessage::MaskedActivation { inference_id, layer_id, path, payload } => {
                self.expect_active(inference_id)?;
                let layer = layer_id as usize;
                if !self.topology.masked_layers().contains(&(layer, path)) {
                    return Err(ProtocolError::Unexpected(format!("no masked step for layer {layer} path {path:?}")));
                }
                let partial = self.partial(layer, &payload)?;
                Ok(vec![ProtocolMessage::MaskedPartial { inference_id, layer_id, path, payload: partial }])
            }
            ProtocolMessage::PlainActivation { inference_id, layer_id, payload } => {
                self.expect_active(inference_id)?;
                let s = self
                    .topology
                    .stage_of_output(layer_id as usize)
                    .ok_or_else(|| ProtocolError::Unexpected(format!("layer {layer_id} ends no stage")))?;
                match self.topology.stages.get(s + 1) {
                    Some(st) if self.topology.owner(st) == Party::David => {}
                    _ => return Err(ProtocolError::Unexpected(format!("stage after layer {layer_id} is not David's"))),
                }
                let dim = self.topology.layers[layer_id as usize].rows;
                check_tokens(&payload, dim, self.topology.max_tokens, &self.ring, 1)?;
                self.run_local(inference_id, s + 1, payload)
            }
            ProtocolMessage::InferenceOutput { inference_id, output } => {
                self.expect_active(inference_id)?;
                self.active.remove(&inference_id);
                self.outputs.insert(inference_id, output);
                Ok(vec![])
            }
            other => Err(ProtocolError::Unexpected(format!("David received {}", other.kind_name()))),
        }
    }

    /// `W^D_int · ã mod L` per token.
    pub fn partial(&mut self, layer: usize, payload: &FixedVec) -> Result<FixedVec, ProtocolError> {
        let w = &self.layers.get(layer).ok_or_else(|| ProtocolError::TopologyMismatch(format!("no layer {layer}")))?.w;
        check_tokens(payload, w.w.cols, self.topology.max_tokens, &self.ring, 1)?;
        // A masked payload is uniform in the ring; no headroom check applies.
        let partial = modmatvec_tokens(&w.w, payload, &self.ring)?;
        self.counters.macs += w.macs(payload.len() / w.w.cols);
        Ok(partial)
    }

    fn expect_active(&self, id: u64) -> Result<(), ProtocolError> {
        if self.active.contains_key(&id) {
            Ok(())
        } else {
            Err(ProtocolError::Unexpected(format!("unknown inference {id}")))
        }
    }

    fn view(&self, i: usize) -> LayerView<'_> {
        let l = &self.layers[i];
        LayerView { w: &l.w, factors: None, bias: l.bias.as_deref(), activation: l.activation }
    }

    /// Runs David's stages from `stage` until the output or a Charlie stage.
    fn run_local(&mut self, id: u64, stage: usize, mut a: FixedVec) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        let n = self.topology.stages.len();
        let mut s = stage;
        while s < n && self.topology.owner(&self.topology.stages[s]) == Party::David {
            let tokens = a.len() / self.topology.stages_input_dim(s);
            a = match self.topology.stages[s] {
                Stage::Linear { layer } => {
                    self.counters.macs += self.layers[layer].w.macs(tokens);
                    linear_local(&self.view(layer), &a, &self.ring)?
                }
                Stage::Attention { q, k, v } => {
                    let (d_h, d) = (self.topology.layers[q].rows, self.topology.layers[q].cols);
                    self.counters.macs += [q, k, v].iter().map(|&i| self.layers[i].w.macs(tokens)).sum::<u64>()
                        + attention_core_macs(tokens, d_h, d);
                    attention_local(&self.view(q), &self.view(k), &self.view(v), &a, tokens, &self.ring)?
                }
            };
            s += 1;
        }
        if s == n {
            self.active.remove(&id);
            self.outputs.insert(id, a.clone());
            return Ok(vec![ProtocolMessage::InferenceOutput { inference_id: id, output: a }]);
        }
        let layer_id = self.topology.stages[s - 1].output_layer() as u32;
        Ok(vec![ProtocolMessage::PlainActivation { inference_id: id, layer_id, payload: a }])
    }
}
