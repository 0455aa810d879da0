//! Input loading and stream chunking.
//!
//! Inputs are pre-reassembled byte streams (files or stdin), raw or hex
//! encoded. Large streams are sliced into overlapping chunks so a payload
//! sitting on a chunk boundary still appears intact in the next chunk.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpu::state::DEFAULT_BUFFER_BASE;

/// One inspectable slice of a stream, mapped at a virtual base address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataBuffer {
    pub bytes: Vec<u8>,
    /// Virtual address the buffer is mapped at during emulation.
    pub base: u32,
    pub origin: Origin,
}

/// Where a buffer came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub source: String,
    /// Offset of this chunk within the original stream.
    pub stream_offset: u64,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("hex input has an odd number of digits")]
    OddHexLength,
    #[error("invalid hex digit {0:?}")]
    BadHexDigit(char),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    Raw,
    Hex,
}

/// Decodes hex text; whitespace between digit pairs is allowed.
pub fn decode_hex(text: &str) -> Result<Vec<u8>, IngestError> {
    let mut out = Vec::with_capacity(text.len() / 2);
    let mut pending: Option<u8> = None;
    for ch in text.chars() {
        if ch.is_ascii_whitespace() {
            continue;
        }
        let nibble = ch.to_digit(16).ok_or(IngestError::BadHexDigit(ch))? as u8;
        pending = match pending {
            None => Some(nibble),
            Some(hi) => {
                out.push((hi << 4) | nibble);
                None
            }
        };
    }
    if pending.is_some() {
        return Err(IngestError::OddHexLength);
    }
    Ok(out)
}

/// Reads a source (path, or stdin when `path` is `None`) in the given format.
pub fn load_input(path: Option<&Path>, format: InputFormat) -> Result<Vec<u8>, IngestError> {
    let mut raw = Vec::new();
    match path {
        Some(p) => {
            raw = std::fs::read(p)?;
        }
        None => {
            std::io::stdin().read_to_end(&mut raw)?;
        }
    }
    match format {
        InputFormat::Raw => Ok(raw),
        InputFormat::Hex => decode_hex(&String::from_utf8_lossy(&raw)),
    }
}

/// Slices a stream into chunks of at most `max_len` bytes where consecutive
/// chunks share `overlap` bytes. Every input byte lands in at least one
/// chunk; a substring no longer than `overlap` bytes that spans a boundary
/// appears intact in the following chunk.
pub fn chunk_stream(bytes: &[u8], source: &str, max_len: usize, overlap: usize) -> Vec<DataBuffer> {
    assert!(max_len > 0 && overlap < max_len, "need 0 <= overlap < max_len");
    let mut chunks = Vec::new();
    if bytes.is_empty() {
        return chunks;
    }
    let step = max_len - overlap;
    let mut start = 0usize;
    loop {
        let end = (start + max_len).min(bytes.len());
        chunks.push(DataBuffer {
            bytes: bytes[start..end].to_vec(),
            base: DEFAULT_BUFFER_BASE,
            origin: Origin { source: source.to_string(), stream_offset: start as u64 },
        });
        if end == bytes.len() {
            break;
        }
        start += step;
    }
    chunks
}
