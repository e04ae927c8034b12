//! Two-party hybrid inference as a pair of message-driven state machines.
//!
//! [`CharlieState`] holds the hidden low-rank factors, the one-time pads and
//! their cancellation masks. [`DavidState`] holds the dense residuals and all
//! offloaded layers. Neither touches I/O: `handle` consumes one
//! [`ProtocolMessage`] and returns the messages to send back, so the same
//! machines run over the in-memory driver here and over a socket in the
//! transport crate.
//!
//! Stage ownership follows the end-to-end MLP schedule: a stage that touches
//! a split layer is driven by Charlie, everything else runs locally on David,
//! and the activation crosses in the clear (`PlainActivation`) exactly where
//! ownership changes.

mod charlie;
mod david;
mod driver;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decompose::{LayerId, PlannedModel};
use crate::models::{ModelKind, Stage};
use crate::qforward::ForwardError;
use crate::ring::{FixedVec, RingError, RingParams};

pub use charlie::{CharlieLayer, CharlieState, PendingLinear};
pub use david::{DavidLayer, DavidState};
pub use driver::{
    build_parties, insecure_layer_step, run_attention_hybrid, run_hybrid, run_mlp_hybrid, secure_layer_step, HybridRun,
};

pub const PROTOCOL_VERSION: u8 = 0x01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error("no one-time pad left for inference {inference_id}, layer {layer}, path {path:?}")]
    MaskExhausted { inference_id: u64, layer: usize, path: Path },
    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("protocol version {got} not supported (expected {expected})")]
    VersionMismatch { expected: u8, got: u8 },
}

impl From<crate::models::ModelError> for ProtocolError {
    fn from(e: crate::models::ModelError) -> Self {
        ProtocolError::Forward(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Path {
    Main = 0,
    Q = 1,
    K = 2,
    V = 3,
}

impl Path {
    pub fn from_u8(v: u8) -> Option<Path> {
        match v {
            0 => Some(Path::Main),
            1 => Some(Path::Q),
            2 => Some(Path::K),
            3 => Some(Path::V),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SecurityMode {
    /// One-time-pad masking with precomputed cancellation.
    Secure,
    /// Activations cross unmasked. Exists only to demonstrate weight recovery.
    Insecure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolMessage {
    SetupParams { version: u8, ring: RingParams, topology: u64 },
    InferenceInput { inference_id: u64, input: FixedVec },
    MaskedActivation { inference_id: u64, layer_id: u32, path: Path, payload: FixedVec },
    MaskedPartial { inference_id: u64, layer_id: u32, path: Path, payload: FixedVec },
    PlainActivation { inference_id: u64, layer_id: u32, payload: FixedVec },
    InferenceOutput { inference_id: u64, output: FixedVec },
}

impl ProtocolMessage {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ProtocolMessage::SetupParams { .. } => "SetupParams",
            ProtocolMessage::InferenceInput { .. } => "InferenceInput",
            ProtocolMessage::MaskedActivation { .. } => "MaskedActivation",
            ProtocolMessage::MaskedPartial { .. } => "MaskedPartial",
            ProtocolMessage::PlainActivation { .. } => "PlainActivation",
            ProtocolMessage::InferenceOutput { .. } => "InferenceOutput",
        }
    }

    pub fn inference_id(&self) -> u64 {
        match self {
            ProtocolMessage::SetupParams { .. } => 0,
            ProtocolMessage::InferenceInput { inference_id, .. }
            | ProtocolMessage::MaskedActivation { inference_id, .. }
            | ProtocolMessage::MaskedPartial { inference_id, .. }
            | ProtocolMessage::PlainActivation { inference_id, .. }
            | ProtocolMessage::InferenceOutput { inference_id, .. } => *inference_id,
        }
    }

    pub fn payload(&self) -> Option<&FixedVec> {
        match self {
            ProtocolMessage::SetupParams { .. } => None,
            ProtocolMessage::InferenceInput { input: p, .. }
            | ProtocolMessage::MaskedActivation { payload: p, .. }
            | ProtocolMessage::MaskedPartial { payload: p, .. }
            | ProtocolMessage::PlainActivation { payload: p, .. }
            | ProtocolMessage::InferenceOutput { output: p, .. } => Some(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    CharlieToDavid = 0,
    DavidToCharlie = 1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub message: ProtocolMessage,
}

/// Messages of one inference in the order David observes them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub inference_id: u64,
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn push(&mut self, direction: Direction, message: ProtocolMessage) {
        self.entries.push(TranscriptEntry { direction, message });
    }

    /// `(direction, message kind, layer, path)` per entry.
    pub fn schedule(&self) -> Vec<(Direction, &'static str, Option<u32>, Option<Path>)> {
        self.entries
            .iter()
            .map(|e| {
                let (layer, path) = match &e.message {
                    ProtocolMessage::MaskedActivation { layer_id, path, .. }
                    | ProtocolMessage::MaskedPartial { layer_id, path, .. } => (Some(*layer_id), Some(*path)),
                    ProtocolMessage::PlainActivation { layer_id, .. } => (Some(*layer_id), None),
                    _ => (None, None),
                };
                (e.direction, e.message.kind_name(), layer, path)
            })
            .collect()
    }

    /// Ring values carried by frames of the given kinds.
    pub fn values_of(&self, kinds: &[&str]) -> u64 {
        self.entries
            .iter()
            .filter(|e| kinds.contains(&e.message.kind_name()))
            .filter_map(|e| e.message.payload())
            .map(|p| p.len() as u64)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Party {
    Charlie,
    David,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub id: LayerId,
    pub rows: usize,
    pub cols: usize,
    pub split: bool,
}

/// What both parties must agree on before any model traffic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub kind: ModelKind,
    pub stages: Vec<Stage>,
    pub layers: Vec<LayerShape>,
    pub max_tokens: usize,
}

impl Topology {
    pub fn from_planned(p: &PlannedModel) -> Self {
        let layers = p
            .model
            .layers
            .iter()
            .zip(&p.assignments)
            .map(|(l, a)| LayerShape { id: l.id, rows: l.out_dim(), cols: l.in_dim(), split: a.is_split() })
            .collect();
        Topology { kind: p.model.kind, stages: p.model.stages(), layers, max_tokens: p.model.max_tokens }
    }

    pub fn owner(&self, stage: &Stage) -> Party {
        if stage.layers().iter().any(|&l| self.layers[l].split) {
            Party::Charlie
        } else {
            Party::David
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }

    /// Layers whose products David computes on masked input.
    pub fn masked_layers(&self) -> Vec<(usize, Path)> {
        self.stages
            .iter()
            .filter(|s| self.owner(s) == Party::Charlie)
            .flat_map(|s| match *s {
                Stage::Linear { layer } => vec![(layer, Path::Main)],
                Stage::Attention { q, k, v } => vec![(q, Path::Q), (k, Path::K), (v, Path::V)],
            })
            .collect()
    }

    /// Per-token width a stage consumes.
    pub fn stages_input_dim(&self, stage: usize) -> usize {
        self.layers[self.stages[stage].layers()[0]].cols
    }

    pub fn stage_of_output(&self, layer: usize) -> Option<usize> {
        self.stages.iter().position(|s| s.output_layer() == layer)
    }

    pub fn stage_containing(&self, layer: usize) -> Option<usize> {
        self.stages.iter().position(|s| s.layers().contains(&layer))
    }

    pub fn head_dim(&self, stage: &Stage) -> usize {
        match *stage {
            Stage::Attention { q, .. } => self.layers[q].rows,
            Stage::Linear { layer } => self.layers[layer].rows,
        }
    }

    /// First 8 bytes of SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("topology serializes");
        let h = Sha256::digest(&json);
        u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
    }
}

/// Multiply-add and elementwise counters for one party.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    /// Online multiply-adds (one MAC = 2 FLOPs).
    pub macs: u64,
    /// Masking, unmasking and bias additions.
    pub elementwise: u64,
    /// Offline multiply-adds spent on cancellation masks.
    pub precompute_macs: u64,
}
