//! Charlie and David session runtimes over any [`Link`].

use std::collections::{BTreeSet, HashSet};
use std::net::{SocketAddr, TcpListener};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use slip_core::checkpoint::{CharlieBundle, DavidBundle};
use slip_core::linalg::Matrix;
use slip_core::protocol::{
    CharlieState, DavidState, Direction, OpCounters, Party, ProtocolError, ProtocolMessage, SecurityMode, Topology,
    Transcript,
};
use slip_core::ring::FixedVec;

use crate::frame::{decode_frame, encode_frame, HEADER_LEN};
use crate::link::{memory_pair, Link, TcpLink};
use crate::transcript::TranscriptFile;
use crate::TransportError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointConfig {
    pub role: Party,
    pub address: String,
    pub max_frame_bytes: usize,
    pub session_timeout: Duration,
}

impl EndpointConfig {
    /// Frame limit sized for the largest activation of `topology`.
    pub fn for_topology(role: Party, address: impl Into<String>, topology: &Topology) -> Self {
        EndpointConfig {
            role,
            address: address.into(),
            max_frame_bytes: frame_limit(topology),
            session_timeout: Duration::from_secs(30),
        }
    }
}

/// Largest frame either party can legitimately send for `topology`.
pub fn frame_limit(topology: &Topology) -> usize {
    let widest = topology.layers.iter().map(|l| l.rows.max(l.cols)).max().unwrap_or(0);
    HEADER_LEN + 8 * (widest * topology.max_tokens).max(4)
}

/// How Charlie provisions each session.
#[derive(Debug, Clone)]
pub struct CharlieService {
    pub bundle: CharlieBundle,
    /// CSPRNG seed; the per-session stream is the session id.
    pub seed: u64,
    pub mode: SecurityMode,
    /// Inference ids whose pads are drawn right after the handshake.
    pub budget: u64,
    /// Draw more pads when David opens an id beyond the budget.
    pub replenish: bool,
    /// Largest number of ids one replenish may draw; an id further ahead ends the session.
    pub max_replenish: u64,
    pub config: EndpointConfig,
    used_sessions: Arc<Mutex<HashSet<u64>>>,
}

/// What happened in one Charlie session.
#[derive(Debug)]
pub struct SessionReport {
    pub session_id: Option<u64>,
    pub completed: Vec<u64>,
    pub aborted: Vec<u64>,
    pub error: Option<TransportError>,
    /// Final state; `None` when the handshake never got that far.
    pub state: Option<CharlieState>,
}

impl SessionReport {
    pub fn counters(&self) -> OpCounters {
        self.state.as_ref().map(|s| s.counters()).unwrap_or_default()
    }
}

impl CharlieService {
    pub fn new(bundle: CharlieBundle, seed: u64, mode: SecurityMode, config: EndpointConfig) -> Self {
        CharlieService {
            bundle,
            seed,
            mode,
            budget: 1,
            replenish: true,
            max_replenish: 64,
            config,
            used_sessions: Arc::default(),
        }
    }

    fn fresh_state(&self, session_id: u64) -> Result<CharlieState, TransportError> {
        let b = &self.bundle;
        let mut s = CharlieState::new(b.topology.clone(), b.layers.clone(), b.ring, self.seed, session_id, self.mode)?;
        s.precompute(self.budget);
        Ok(s)
    }

    /// Runs one session to completion. A clean close by David between
    /// inferences is not an error; anything else aborts the open inferences
    /// and destroys their pads.
    pub fn serve_session<L: Link>(&self, mut link: L) -> SessionReport {
        let mut report =
            SessionReport { session_id: None, completed: vec![], aborted: vec![], error: None, state: None };
        let mut active = BTreeSet::new();
        let result = self.session_loop(&mut link, &mut report, &mut active);
        if let Some(state) = report.state.as_mut() {
            for &id in &active {
                state.abort_inference(id);
            }
        }
        if let Err(e) = result {
            if !active.is_empty() || !matches!(e, TransportError::ConnectionClosed) {
                warn!("session {:?} aborted: {e}", report.session_id);
                report.error = Some(e);
            }
        }
        report.aborted = active.into_iter().collect();
        info!(
            "session {:?} closed: {} completed, {} aborted",
            report.session_id,
            report.completed.len(),
            report.aborted.len()
        );
        report
    }

    fn session_loop<L: Link>(
        &self,
        link: &mut L,
        report: &mut SessionReport,
        active: &mut BTreeSet<u64>,
    ) -> Result<(), TransportError> {
        let (session_id, hello) = decode_frame(&link.recv()?, None)?;
        if !matches!(hello, ProtocolMessage::SetupParams { .. }) {
            return Err(TransportError::Handshake(format!("expected setup, got {}", hello.kind_name())));
        }
        if !self.used_sessions.lock().expect("session set").insert(session_id) {
            return Err(TransportError::SessionReused(session_id));
        }
        report.session_id = Some(session_id);
        let state = report.state.insert(self.fresh_state(session_id)?);
        link.send(&encode_frame(&state.setup_message(), session_id))?;
        state.handle(hello)?;
        debug!("session {session_id} established");
        loop {
            let (sid, msg) = decode_frame(&link.recv()?, Some(state.ring()))?;
            if sid != session_id {
                return Err(TransportError::SessionMismatch { expected: session_id, got: sid });
            }
            let id = msg.inference_id();
            if let ProtocolMessage::InferenceInput { inference_id, .. } = &msg {
                if self.replenish && *inference_id >= state.next_budget_id() {
                    let ahead = inference_id - state.next_budget_id() + 1;
                    if ahead > self.max_replenish {
                        return Err(ProtocolError::Unexpected(format!(
                            "inference {inference_id} is {ahead} ids past the pad budget (limit {})",
                            self.max_replenish
                        ))
                        .into());
                    }
                    state.precompute(ahead);
                }
                active.insert(*inference_id);
            }
            let replies = state.handle(msg)?;
            for r in &replies {
                link.send(&encode_frame(r, session_id))?;
            }
            if active.contains(&id) && state.output(id).is_some() {
                active.remove(&id);
                report.completed.push(id);
            }
        }
    }

    /// Accepts connections and serves each on its own thread. With
    /// `max_sessions` set, returns the reports after that many sessions;
    /// otherwise runs until the listener fails.
    pub fn serve_tcp(
        self: Arc<Self>,
        listener: TcpListener,
        max_sessions: Option<usize>,
    ) -> std::io::Result<Vec<SessionReport>> {
        let mut handles = Vec::new();
        for (n, conn) in listener.incoming().enumerate() {
            let stream = conn?;
            let svc = Arc::clone(&self);
            let link = TcpLink::new(stream, svc.config.session_timeout, svc.config.max_frame_bytes)?;
            info!("connection from {:?}", link.peer());
            let h = thread::spawn(move || svc.serve_session(link));
            if max_sessions.is_some() {
                handles.push(h);
            }
            if max_sessions.is_some_and(|m| n + 1 >= m) {
                break;
            }
        }
        Ok(handles.into_iter().map(|h| h.join().expect("session thread panicked")).collect())
    }
}

/// Binds `service.config.address` and serves on a background thread.
pub fn serve_charlie(
    service: CharlieService,
    max_sessions: Option<usize>,
) -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<Vec<SessionReport>>>)> {
    let listener = TcpListener::bind(&service.config.address)?;
    let addr = listener.local_addr()?;
    info!("Charlie listening on {addr}");
    let service = Arc::new(service);
    Ok((addr, thread::spawn(move || service.serve_tcp(listener, max_sessions))))
}

/// One inference as David saw it on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct WireRun {
    pub output: FixedVec,
    pub transcript: Transcript,
    pub file: TranscriptFile,
}

/// David's end of a session.
pub struct DavidClient<L: Link> {
    link: L,
    state: DavidState,
    session_id: u64,
}

impl<L: Link> DavidClient<L> {
    /// Sends Setup and checks Charlie's echo.
    pub fn handshake(mut link: L, mut state: DavidState, session_id: u64) -> Result<Self, TransportError> {
        link.send(&encode_frame(&state.setup_message(), session_id))?;
        let (sid, reply) = decode_frame(&link.recv()?, None)?;
        if sid != session_id {
            return Err(TransportError::SessionMismatch { expected: session_id, got: sid });
        }
        if !matches!(reply, ProtocolMessage::SetupParams { .. }) {
            return Err(TransportError::Handshake(format!("expected setup, got {}", reply.kind_name())));
        }
        state.handle(reply)?;
        Ok(DavidClient { link, state, session_id })
    }

    pub fn state(&self) -> &DavidState {
        &self.state
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn infer(&mut self, inference_id: u64, x: &Matrix) -> Result<WireRun, TransportError> {
        let result = self.drive(inference_id, x);
        if result.is_err() {
            self.state.abort_inference(inference_id);
        }
        result
    }

    fn drive(&mut self, inference_id: u64, x: &Matrix) -> Result<WireRun, TransportError> {
        let sid = self.session_id;
        let mut transcript = Transcript { inference_id, entries: vec![] };
        let mut frames = Vec::new();
        let mut outgoing = self.state.begin(inference_id, x)?;
        loop {
            for m in outgoing.drain(..) {
                let bytes = encode_frame(&m, sid);
                self.link.send(&bytes)?;
                frames.push((Direction::DavidToCharlie, bytes));
                transcript.push(Direction::DavidToCharlie, m);
            }
            if let Some(out) = self.state.output(inference_id) {
                let output = out.clone();
                let file = TranscriptFile { session_id: sid, inference_id, frames };
                return Ok(WireRun { output, transcript, file });
            }
            let bytes = self.link.recv()?;
            let (got, msg) = decode_frame(&bytes, Some(self.state.ring()))?;
            if got != sid {
                return Err(TransportError::SessionMismatch { expected: sid, got });
            }
            frames.push((Direction::CharlieToDavid, bytes));
            transcript.push(Direction::CharlieToDavid, msg.clone());
            outgoing = self.state.handle(msg)?;
        }
    }
}

fn david_state(bundle: &DavidBundle) -> Result<DavidState, ProtocolError> {
    DavidState::new(bundle.topology.clone(), bundle.layers.clone(), bundle.ring)
}

/// Connects to Charlie over TCP, runs one inference and closes the session.
pub fn david_request_inference(
    config: &EndpointConfig,
    bundle: &DavidBundle,
    session_id: u64,
    inference_id: u64,
    x: &Matrix,
) -> Result<WireRun, TransportError> {
    let link = TcpLink::connect(&config.address, config.session_timeout, config.max_frame_bytes)?;
    let mut client = DavidClient::handshake(link, david_state(bundle)?, session_id)?;
    client.infer(inference_id, x)
}

/// Same session as over TCP but through an in-memory channel, with Charlie
/// on a scoped thread.
pub fn run_in_memory(
    service: &CharlieService,
    bundle: &DavidBundle,
    session_id: u64,
    inputs: &[(u64, Matrix)],
) -> (Result<Vec<WireRun>, TransportError>, SessionReport) {
    let (c_end, d_end) = memory_pair(service.config.session_timeout, service.config.max_frame_bytes);
    thread::scope(|s| {
        let charlie = s.spawn(|| service.serve_session(c_end));
        let runs = (|| {
            let mut client = DavidClient::handshake(d_end, david_state(bundle)?, session_id)?;
            inputs.iter().map(|(id, x)| client.infer(*id, x)).collect()
        })();
        (runs, charlie.join().expect("Charlie thread panicked"))
    })
}
