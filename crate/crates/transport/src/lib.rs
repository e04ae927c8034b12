//! Wire format and session runtimes for the two-party protocol.

pub mod endpoint;
pub mod frame;
pub mod link;
pub mod transcript;

use slip_core::protocol::ProtocolError;
use thiserror::Error;

pub use endpoint::{
    david_request_inference, frame_limit, run_in_memory, serve_charlie, CharlieService, DavidClient, EndpointConfig,
    SessionReport, WireRun,
};
pub use frame::{decode_frame, encode_frame, MalformedFrame, WireFrame};
pub use link::{memory_pair, Link, MemoryLink, TcpLink};
pub use transcript::TranscriptFile;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Malformed(#[from] MalformedFrame),
    #[error("protocol: {0}")]
    Protocol(ProtocolError),
    #[error("timed out")]
    Timeout,
    #[error("connection closed")]
    ConnectionClosed,
    #[error("protocol version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u8, got: u8 },
    #[error("handshake: {0}")]
    Handshake(String),
    #[error("session id {0} was already used")]
    SessionReused(u64),
    #[error("frame for session {got} on session {expected}")]
    SessionMismatch { expected: u64, got: u64 },
    #[error("transcript file: {0}")]
    Transcript(String),
}

impl From<ProtocolError> for TransportError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::VersionMismatch { expected, got } => TransportError::VersionMismatch { expected, got },
            e => TransportError::Protocol(e),
        }
    }
}
