//! Framing: 4-byte big-endian length, then a canonical JSON body.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::message::Message;
use crate::encoding::canonical_json;

/// Largest accepted frame body.
pub const MAX_FRAME: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME}-byte limit")]
    Oversize(usize),
    #[error("frame is truncated")]
    Truncated,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let body = canonical_json(msg).expect("messages serialize");
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn decode_body(body: &[u8]) -> Result<Message, CodecError> {
    serde_json::from_slice(body).map_err(|e| CodecError::Malformed(e.to_string()))
}

/// Decodes exactly one whole frame.
pub fn decode(frame: &[u8]) -> Result<Message, CodecError> {
    let Some((prefix, body)) = frame.split_first_chunk::<4>() else {
        return Err(CodecError::Truncated);
    };
    let len = u32::from_be_bytes(*prefix) as usize;
    if len > MAX_FRAME {
        return Err(CodecError::Oversize(len));
    }
    if body.len() != len {
        return Err(CodecError::Truncated);
    }
    decode_body(body)
}

/// Reads one frame body. `Ok(None)` on clean end of stream. The length is
/// checked before any buffer is allocated.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, CodecError> {
    let mut prefix = [0u8; 4];
    match r.read_exact(&mut prefix) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME {
        return Err(CodecError::Oversize(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CodecError::Truncated,
        _ => CodecError::Io(e),
    })?;
    Ok(Some(body))
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> io::Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()
}
