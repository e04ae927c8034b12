//! In-memory driver: both parties in one process, messages passed through
//! queues and recorded from David's side of the channel.

use std::collections::VecDeque;

use super::{
    CharlieLayer, CharlieState, DavidLayer, DavidState, Direction, Path, ProtocolError, ProtocolMessage, SecurityMode,
    Topology, Transcript,
};
use crate::decompose::PlannedModel;
use crate::linalg::Matrix;
use crate::models::ModelKind;
use crate::ring::{FixedVec, RingParams};

/// Output and transcript of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridRun {
    pub output: FixedVec,
    pub transcript: Transcript,
}

/// Both parties for a planned model; Charlie's pads come from
/// ChaCha20(`seed`, `stream`). No pads are drawn yet.
pub fn build_parties(
    planned: &PlannedModel,
    ring: RingParams,
    seed: u64,
    stream: u64,
    mode: SecurityMode,
) -> Result<(CharlieState, DavidState), ProtocolError> {
    planned.model.validate()?;
    let topology = Topology::from_planned(planned);
    let charlie =
        CharlieState::new(topology.clone(), CharlieLayer::extract(planned, &topology), ring, seed, stream, mode)?;
    let david = DavidState::new(topology, DavidLayer::extract(planned), ring)?;
    Ok((charlie, david))
}

/// Runs one inference to completion. Both parties end up holding the output.
pub fn run_hybrid(
    charlie: &mut CharlieState,
    david: &mut DavidState,
    inference_id: u64,
    x: &Matrix,
) -> Result<HybridRun, ProtocolError> {
    if charlie.topology() != david.topology() {
        return Err(ProtocolError::TopologyMismatch("parties disagree on the topology".into()));
    }
    let result = drive(charlie, david, inference_id, x);
    if result.is_err() {
        charlie.abort_inference(inference_id);
        david.abort_inference(inference_id);
    }
    result
}

fn drive(
    charlie: &mut CharlieState,
    david: &mut DavidState,
    inference_id: u64,
    x: &Matrix,
) -> Result<HybridRun, ProtocolError> {
    let mut transcript = Transcript { inference_id, entries: vec![] };
    let mut to_charlie: VecDeque<ProtocolMessage> = VecDeque::new();
    let mut to_david: VecDeque<ProtocolMessage> = VecDeque::new();
    for m in david.begin(inference_id, x)? {
        transcript.push(Direction::DavidToCharlie, m.clone());
        to_charlie.push_back(m);
    }
    loop {
        while let Some(m) = to_charlie.pop_front() {
            to_david.extend(charlie.handle(m)?);
        }
        let Some(m) = to_david.pop_front() else { break };
        transcript.push(Direction::CharlieToDavid, m.clone());
        for r in david.handle(m)? {
            transcript.push(Direction::DavidToCharlie, r.clone());
            to_charlie.push_back(r);
        }
    }
    let output = david
        .output(inference_id)
        .cloned()
        .ok_or_else(|| ProtocolError::Unexpected("run ended without an output".into()))?;
    if charlie.output(inference_id) != Some(&output) {
        return Err(ProtocolError::Unexpected("parties hold different outputs".into()));
    }
    Ok(HybridRun { output, transcript })
}

/// [`run_hybrid`] for a single-vector MLP or conv input.
pub fn run_mlp_hybrid(
    charlie: &mut CharlieState,
    david: &mut DavidState,
    inference_id: u64,
    x: &[f64],
) -> Result<HybridRun, ProtocolError> {
    if !matches!(charlie.topology().kind, ModelKind::Mlp | ModelKind::Conv) {
        return Err(ProtocolError::TopologyMismatch("not an MLP topology".into()));
    }
    let x = Matrix::from_vec(1, x.len(), x.to_vec()).map_err(|e| ProtocolError::Shape(e.to_string()))?;
    run_hybrid(charlie, david, inference_id, &x)
}

/// [`run_hybrid`] for a token matrix through an attention head or transformer.
pub fn run_attention_hybrid(
    charlie: &mut CharlieState,
    david: &mut DavidState,
    inference_id: u64,
    x: &Matrix,
) -> Result<HybridRun, ProtocolError> {
    if !matches!(charlie.topology().kind, ModelKind::AttentionHead | ModelKind::Transformer) {
        return Err(ProtocolError::TopologyMismatch("not an attention topology".into()));
    }
    run_hybrid(charlie, david, inference_id, x)
}

/// One masked layer in isolation, consuming the pad for
/// `(inference_id, layer, main)`.
pub fn secure_layer_step(
    charlie: &mut CharlieState,
    david: &mut DavidState,
    inference_id: u64,
    a_prev: &FixedVec,
    layer: usize,
) -> Result<HybridRun, ProtocolError> {
    layer_step(charlie, david, inference_id, a_prev, layer, SecurityMode::Secure)
}

/// One layer with the activation sent in the clear. Same numbers as
/// [`secure_layer_step`]; the transcript reveals `a_prev` and `W^D a_prev`.
pub fn insecure_layer_step(
    charlie: &mut CharlieState,
    david: &mut DavidState,
    inference_id: u64,
    a_prev: &FixedVec,
    layer: usize,
) -> Result<HybridRun, ProtocolError> {
    layer_step(charlie, david, inference_id, a_prev, layer, SecurityMode::Insecure)
}

fn layer_step(
    charlie: &mut CharlieState,
    david: &mut DavidState,
    inference_id: u64,
    a_prev: &FixedVec,
    layer: usize,
    mode: SecurityMode,
) -> Result<HybridRun, ProtocolError> {
    let (payload, cancel) = charlie.mask_with_mode(inference_id, layer, Path::Main, a_prev, mode)?;
    let reply = david.partial(layer, &payload)?;
    let h = charlie.project(layer, a_prev, &reply, cancel.as_ref())?;
    let output = charlie.activate(layer, h)?;
    let mut transcript = Transcript { inference_id, entries: vec![] };
    let layer_id = layer as u32;
    transcript.push(
        Direction::CharlieToDavid,
        ProtocolMessage::MaskedActivation { inference_id, layer_id, path: Path::Main, payload },
    );
    transcript.push(
        Direction::DavidToCharlie,
        ProtocolMessage::MaskedPartial { inference_id, layer_id, path: Path::Main, payload: reply },
    );
    Ok(HybridRun { output, transcript })
}
