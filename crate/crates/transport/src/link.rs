//! Frame-delimited duplex links: an in-memory pair and TCP.

use std::io::{ErrorKind, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use crate::frame::{read_frame, MalformedFrame, ReadFrameError};
use crate::TransportError;

/// Moves whole frames. `recv` blocks for at most the link's timeout.
pub trait Link: Send {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Vec<u8>, TransportError>;
}

/// One end of an in-memory duplex channel.
#[derive(Debug)]
pub struct MemoryLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
    max_frame_bytes: usize,
}

/// Two connected ends.
pub fn memory_pair(timeout: Duration, max_frame_bytes: usize) -> (MemoryLink, MemoryLink) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        MemoryLink { tx: a_tx, rx: a_rx, timeout, max_frame_bytes },
        MemoryLink { tx: b_tx, rx: b_rx, timeout, max_frame_bytes },
    )
}

impl Link for MemoryLink {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.tx.send(frame.to_vec()).map_err(|_| TransportError::ConnectionClosed)
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        let frame = self.rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout,
            RecvTimeoutError::Disconnected => TransportError::ConnectionClosed,
        })?;
        if frame.len() > self.max_frame_bytes {
            return Err(MalformedFrame::TooLarge { len: frame.len(), max: self.max_frame_bytes }.into());
        }
        Ok(frame)
    }
}

/// A TCP stream carrying back-to-back frames.
#[derive(Debug)]
pub struct TcpLink {
    stream: TcpStream,
    max_frame_bytes: usize,
}

impl TcpLink {
    pub fn new(stream: TcpStream, timeout: Duration, max_frame_bytes: usize) -> std::io::Result<Self> {
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(TcpLink { stream, max_frame_bytes })
    }

    pub fn connect(addr: &str, timeout: Duration, max_frame_bytes: usize) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr).map_err(io_error)?;
        Self::new(stream, timeout, max_frame_bytes).map_err(io_error)
    }

    pub fn peer(&self) -> Option<std::net::SocketAddr> {
        self.stream.peer_addr().ok()
    }
}

impl Link for TcpLink {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.stream.write_all(frame).map_err(io_error)
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        read_frame(&mut self.stream, self.max_frame_bytes).map_err(|e| match e {
            ReadFrameError::Io(e) => io_error(e),
            ReadFrameError::Malformed(m) => TransportError::Malformed(m),
            ReadFrameError::Closed => TransportError::ConnectionClosed,
        })
    }
}

fn io_error(e: std::io::Error) -> TransportError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => TransportError::Timeout,
        ErrorKind::ConnectionReset
        | ErrorKind::ConnectionAborted
        | ErrorKind::BrokenPipe
        | ErrorKind::UnexpectedEof
        | ErrorKind::NotConnected => TransportError::ConnectionClosed,
        _ => TransportError::Io(e),
    }
}
