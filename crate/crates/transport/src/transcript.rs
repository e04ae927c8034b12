//! `SLPT` transcript files: the frames David saw during one inference.
//!
//! Layout (little-endian): magic `SLPT`, u16 version, u64 session_id,
//! u64 inference_id, u32 entry count, then per entry a direction byte
//! (0 = Charlie→David, 1 = David→Charlie), u32 frame length and the frame.

use std::path::Path as FsPath;

use slip_core::protocol::{Direction, Transcript};
use slip_core::ring::RingParams;

use crate::frame::{decode_frame, encode_frame, MalformedFrame};
use crate::TransportError;

pub const TRANSCRIPT_MAGIC: &[u8; 4] = b"SLPT";
pub const TRANSCRIPT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptFile {
    pub session_id: u64,
    pub inference_id: u64,
    pub frames: Vec<(Direction, Vec<u8>)>,
}

impl TranscriptFile {
    pub fn from_transcript(t: &Transcript, session_id: u64) -> Self {
        TranscriptFile {
            session_id,
            inference_id: t.inference_id,
            frames: t.entries.iter().map(|e| (e.direction, encode_frame(&e.message, session_id))).collect(),
        }
    }

    /// Decodes every frame back into messages.
    pub fn to_transcript(&self, ring: &RingParams) -> Result<Transcript, MalformedFrame> {
        let mut t = Transcript { inference_id: self.inference_id, entries: vec![] };
        for (dir, bytes) in &self.frames {
            let (_, msg) = decode_frame(bytes, Some(ring))?;
            t.push(*dir, msg);
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = TRANSCRIPT_MAGIC.to_vec();
        out.extend_from_slice(&TRANSCRIPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.session_id.to_le_bytes());
        out.extend_from_slice(&self.inference_id.to_le_bytes());
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        for (dir, f) in &self.frames {
            out.push(*dir as u8);
            out.extend_from_slice(&(f.len() as u32).to_le_bytes());
            out.extend_from_slice(f);
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, TransportError> {
        let bad = |m: &str| TransportError::Transcript(m.to_string());
        let mut cur = Cursor { b, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated magic"))? != TRANSCRIPT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?);
        if version != TRANSCRIPT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let session_id = u64::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?);
        let inference_id = u64::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?);
        let count = u32::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?);
        let mut frames = Vec::new();
        for _ in 0..count {
            let dir = match cur.take(1).ok_or_else(|| bad("truncated entry"))?[0] {
                0 => Direction::CharlieToDavid,
                1 => Direction::DavidToCharlie,
                d => return Err(bad(&format!("bad direction {d}"))),
            };
            let len = u32::from_le_bytes(cur.array().ok_or_else(|| bad("truncated entry"))?) as usize;
            frames.push((dir, cur.take(len).ok_or_else(|| bad("truncated frame"))?.to_vec()));
        }
        if cur.pos != b.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(TranscriptFile { session_id, inference_id, frames })
    }

    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<(), TransportError> {
        std::fs::write(path, self.to_bytes()).map_err(TransportError::Io)
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self, TransportError> {
        Self::from_bytes(&std::fs::read(path).map_err(TransportError::Io)?)
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.b.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use slip_core::protocol::ProtocolMessage;
    use slip_core::ring::FixedVec;

    #[test]
    fn round_trip() {
        let ring = RingParams::new(97, 4).unwrap();
        let mut t = Transcript { inference_id: 5, entries: vec![] };
        t.push(
            Direction::DavidToCharlie,
            ProtocolMessage::InferenceInput { inference_id: 5, input: FixedVec::new(vec![1, 2], 1) },
        );
        t.push(
            Direction::CharlieToDavid,
            ProtocolMessage::InferenceOutput { inference_id: 5, output: FixedVec::new(vec![96], 1) },
        );
        let f = TranscriptFile::from_transcript(&t, 11);
        let back = TranscriptFile::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_transcript(&ring).unwrap(), t);
        let bytes = f.to_bytes();
        for cut in 0..bytes.len() {
            assert!(TranscriptFile::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
