//! `SLP1` frames.
//!
//! Header (30 bytes, little-endian): magic `SLP1`, msg_type u8, session_id
//! u64, inference_id u64, layer_id u32, path u8, payload_len u32. The payload
//! is `payload_len / 8` ring residues as u64. Setup frames carry the four
//! words `[version, modulus, scale, topology digest]`.

use std::io::Read;

use slip_core::protocol::{Path, ProtocolMessage};
use slip_core::ring::{FixedVec, RingParams};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SLP1";
pub const HEADER_LEN: usize = 30;

pub const MSG_SETUP: u8 = 1;
pub const MSG_INPUT: u8 = 2;
pub const MSG_MASKED_ACTIVATION: u8 = 3;
pub const MSG_MASKED_PARTIAL: u8 = 4;
pub const MSG_PLAIN_ACTIVATION: u8 = 5;
pub const MSG_OUTPUT: u8 = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MalformedFrame {
    #[error("bad magic")]
    BadMagic,
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload length {0} is not a multiple of 8")]
    PayloadLength(u32),
    #[error("frame of {len} bytes exceeds the {max}-byte limit")]
    TooLarge { len: usize, max: usize },
    #[error("residue {value} is not below the modulus {modulus}")]
    Residue { value: u64, modulus: u64 },
    #[error("invalid path byte {0}")]
    Path(u8),
    #[error("field {0} must be zero for this message type")]
    NonZeroField(&'static str),
    #[error("bad setup payload: {0}")]
    Setup(String),
    #[error("{0} trailing bytes after the frame")]
    Trailing(usize),
}

/// A frame split into header fields and raw residues.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub msg_type: u8,
    pub session_id: u64,
    pub inference_id: u64,
    pub layer_id: u32,
    pub path: u8,
    pub payload: Vec<u64>,
}

impl WireFrame {
    pub fn from_message(msg: &ProtocolMessage, session_id: u64) -> Self {
        let frame = |msg_type, inference_id, layer_id, path: u8, payload: &FixedVec| WireFrame {
            msg_type,
            session_id,
            inference_id,
            layer_id,
            path,
            payload: payload.values.clone(),
        };
        match msg {
            ProtocolMessage::SetupParams { version, ring, topology } => WireFrame {
                msg_type: MSG_SETUP,
                session_id,
                inference_id: 0,
                layer_id: 0,
                path: 0,
                payload: vec![*version as u64, ring.modulus(), ring.scale(), *topology],
            },
            ProtocolMessage::InferenceInput { inference_id, input } => frame(MSG_INPUT, *inference_id, 0, 0, input),
            ProtocolMessage::MaskedActivation { inference_id, layer_id, path, payload } => {
                frame(MSG_MASKED_ACTIVATION, *inference_id, *layer_id, *path as u8, payload)
            }
            ProtocolMessage::MaskedPartial { inference_id, layer_id, path, payload } => {
                frame(MSG_MASKED_PARTIAL, *inference_id, *layer_id, *path as u8, payload)
            }
            ProtocolMessage::PlainActivation { inference_id, layer_id, payload } => {
                frame(MSG_PLAIN_ACTIVATION, *inference_id, *layer_id, 0, payload)
            }
            ProtocolMessage::InferenceOutput { inference_id, output } => frame(MSG_OUTPUT, *inference_id, 0, 0, output),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(self.msg_type);
        out.extend_from_slice(&self.session_id.to_le_bytes());
        out.extend_from_slice(&self.inference_id.to_le_bytes());
        out.extend_from_slice(&self.layer_id.to_le_bytes());
        out.push(self.path);
        out.extend_from_slice(&((8 * self.payload.len()) as u32).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one frame from the front of `bytes`; returns it with the number
    /// of bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(WireFrame, usize), MalformedFrame> {
        if bytes.len() < HEADER_LEN {
            return Err(MalformedFrame::Truncated { needed: HEADER_LEN, have: bytes.len() });
        }
        let h = Header::parse(bytes[..HEADER_LEN].try_into().expect("header slice"))?;
        let total = HEADER_LEN + h.payload_len as usize;
        if bytes.len() < total {
            return Err(MalformedFrame::Truncated { needed: total, have: bytes.len() });
        }
        let payload = bytes[HEADER_LEN..total]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let frame = WireFrame {
            msg_type: h.msg_type,
            session_id: h.session_id,
            inference_id: h.inference_id,
            layer_id: h.layer_id,
            path: h.path,
            payload,
        };
        Ok((frame, total))
    }

    /// Typed message. `ring` bounds every residue; Setup frames are checked
    /// on their own terms since they carry the ring.
    pub fn to_message(&self, ring: Option<&RingParams>) -> Result<ProtocolMessage, MalformedFrame> {
        let zero = |v: u64, field: &'static str| if v == 0 { Ok(()) } else { Err(MalformedFrame::NonZeroField(field)) };
        if self.msg_type == MSG_SETUP {
            zero(self.inference_id, "inference_id")?;
            zero(self.layer_id as u64, "layer_id")?;
            zero(self.path as u64, "path")?;
            let [version, modulus, scale, topology] = self.payload[..] else {
                return Err(MalformedFrame::Setup(format!("{} words, expected 4", self.payload.len())));
            };
            let version = u8::try_from(version).map_err(|_| MalformedFrame::Setup(format!("version {version}")))?;
            let ring = RingParams::new(modulus, scale).map_err(|e| MalformedFrame::Setup(e.to_string()))?;
            return Ok(ProtocolMessage::SetupParams { version, ring, topology });
        }
        if let Some(ring) = ring {
            if let Some(&value) = self.payload.iter().find(|&&v| v >= ring.modulus()) {
                return Err(MalformedFrame::Residue { value, modulus: ring.modulus() });
            }
        }
        let id = self.inference_id;
        let vec = |scale| FixedVec::new(self.payload.clone(), scale);
        let path = || Path::from_u8(self.path).ok_or(MalformedFrame::Path(self.path));
        match self.msg_type {
            MSG_INPUT => {
                zero(self.layer_id as u64, "layer_id")?;
                zero(self.path as u64, "path")?;
                Ok(ProtocolMessage::InferenceInput { inference_id: id, input: vec(1) })
            }
            MSG_MASKED_ACTIVATION => Ok(ProtocolMessage::MaskedActivation {
                inference_id: id,
                layer_id: self.layer_id,
                path: path()?,
                payload: vec(1),
            }),
            MSG_MASKED_PARTIAL => Ok(ProtocolMessage::MaskedPartial {
                inference_id: id,
                layer_id: self.layer_id,
                path: path()?,
                payload: vec(2),
            }),
            MSG_PLAIN_ACTIVATION => {
                zero(self.path as u64, "path")?;
                Ok(ProtocolMessage::PlainActivation { inference_id: id, layer_id: self.layer_id, payload: vec(1) })
            }
            MSG_OUTPUT => {
                zero(self.layer_id as u64, "layer_id")?;
                zero(self.path as u64, "path")?;
                Ok(ProtocolMessage::InferenceOutput { inference_id: id, output: vec(1) })
            }
            other => Err(MalformedFrame::UnknownType(other)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Header {
    msg_type: u8,
    session_id: u64,
    inference_id: u64,
    layer_id: u32,
    path: u8,
    payload_len: u32,
}

impl Header {
    fn parse(b: &[u8; HEADER_LEN]) -> Result<Header, MalformedFrame> {
        if &b[..4] != MAGIC {
            return Err(MalformedFrame::BadMagic);
        }
        let msg_type = b[4];
        if !(MSG_SETUP..=MSG_OUTPUT).contains(&msg_type) {
            return Err(MalformedFrame::UnknownType(msg_type));
        }
        let payload_len = u32::from_le_bytes(b[26..30].try_into().unwrap());
        if payload_len % 8 != 0 {
            return Err(MalformedFrame::PayloadLength(payload_len));
        }
        Ok(Header {
            msg_type,
            session_id: u64::from_le_bytes(b[5..13].try_into().unwrap()),
            inference_id: u64::from_le_bytes(b[13..21].try_into().unwrap()),
            layer_id: u32::from_le_bytes(b[21..25].try_into().unwrap()),
            path: b[25],
            payload_len,
        })
    }
}

pub fn encode_frame(msg: &ProtocolMessage, session_id: u64) -> Vec<u8> {
    WireFrame::from_message(msg, session_id).to_bytes()
}

/// Decodes exactly one frame; trailing bytes are an error.
pub fn decode_frame(bytes: &[u8], ring: Option<&RingParams>) -> Result<(u64, ProtocolMessage), MalformedFrame> {
    let (frame, used) = WireFrame::parse(bytes)?;
    if used != bytes.len() {
        return Err(MalformedFrame::Trailing(bytes.len() - used));
    }
    Ok((frame.session_id, frame.to_message(ring)?))
}

/// Errors while pulling one frame off a byte stream.
#[derive(Debug, Error)]
pub enum ReadFrameError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Malformed(#[from] MalformedFrame),
    #[error("connection closed")]
    Closed,
}

/// Reads one length-delimited frame and returns its raw bytes.
pub fn read_frame<R: Read>(r: &mut R, max_frame_bytes: usize) -> Result<Vec<u8>, ReadFrameError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(ReadFrameError::Closed),
            Ok(0) => return Err(MalformedFrame::Truncated { needed: HEADER_LEN, have: got }.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = Header::parse(&header)?;
    let total = HEADER_LEN + h.payload_len as usize;
    if total > max_frame_bytes {
        return Err(MalformedFrame::TooLarge { len: total, max: max_frame_bytes }.into());
    }
    let mut out = header.to_vec();
    out.resize(total, 0);
    r.read_exact(&mut out[HEADER_LEN..]).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ReadFrameError::Malformed(MalformedFrame::Truncated { needed: total, have: HEADER_LEN })
        } else {
            ReadFrameError::Io(e)
        }
    })?;
    Ok(out)
}
