//! Frame layout on TCP links.
//!
//! ```text
//! length      u32 LE   bytes after this field (HEADER_LEN + payload)
//! src_rank    u32 LE
//! dst_rank    u32 LE
//! tag         u32 LE
//! iteration   u32 LE
//! chunk_index u16 LE
//! chunk_count u16 LE
//! payload     [u8]
//! ```
//!
//! Traffic counters charge each frame its `length` field: header plus payload.

use std::io::{self, Read, Write};

use super::TransportError;

/// Header bytes following the length prefix.
pub const HEADER_LEN: usize = 20;
pub const LENGTH_PREFIX: usize = 4;
pub const DEFAULT_MAX_FRAME: usize = 64 * 1024 * 1024;

pub const TAG_HANDSHAKE: u32 = 0xFFFF_FFFF;
pub const HANDSHAKE_MAGIC: &[u8; 6] = b"DFSIM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub src: u32,
    pub dst: u32,
    pub tag: u32,
    pub iteration: u32,
    pub chunk_index: u16,
    pub chunk_count: u16,
}

impl FrameHeader {
    /// Length prefix plus header, ready to precede `payload_len` bytes.
    pub fn encode(&self, payload_len: usize) -> [u8; LENGTH_PREFIX + HEADER_LEN] {
        let mut buf = [0u8; LENGTH_PREFIX + HEADER_LEN];
        buf[0..4].copy_from_slice(&((HEADER_LEN + payload_len) as u32).to_le_bytes());
        buf[4..8].copy_from_slice(&self.src.to_le_bytes());
        buf[8..12].copy_from_slice(&self.dst.to_le_bytes());
        buf[12..16].copy_from_slice(&self.tag.to_le_bytes());
        buf[16..20].copy_from_slice(&self.iteration.to_le_bytes());
        buf[20..22].copy_from_slice(&self.chunk_index.to_le_bytes());
        buf[22..24].copy_from_slice(&self.chunk_count.to_le_bytes());
        buf
    }

    /// Decodes the header part (without the length prefix).
    pub fn decode(body: &[u8]) -> Result<Self, TransportError> {
        if body.len() < HEADER_LEN {
            return Err(TransportError::Protocol(format!("frame body of {} bytes is shorter than header", body.len())));
        }
        let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(body[o..o + 2].try_into().unwrap());
        let header = Self {
            src: u32_at(0),
            dst: u32_at(4),
            tag: u32_at(8),
            iteration: u32_at(12),
            chunk_index: u16_at(16),
            chunk_count: u16_at(18),
        };
        if header.chunk_count == 0 || header.chunk_index >= header.chunk_count {
            return Err(TransportError::Protocol(format!(
                "chunk {}/{} out of range",
                header.chunk_index, header.chunk_count
            )));
        }
        Ok(header)
    }
}

/// Number of frames a payload is split into.
pub fn chunk_count(payload_len: usize, max_frame: usize) -> Result<u16, TransportError> {
    let chunks = payload_len.div_ceil(max_frame).max(1);
    u16::try_from(chunks).map_err(|_| TransportError::FrameTooLarge { len: payload_len, max: max_frame * u16::MAX as usize })
}

/// Bytes charged to counters for one message.
pub fn framed_len(payload_len: usize, max_frame: usize) -> u64 {
    let chunks = payload_len.div_ceil(max_frame).max(1);
    (chunks * HEADER_LEN + payload_len) as u64
}

/// Writes one message as one or more frames.
pub fn write_message<W: Write>(
    w: &mut W,
    src: u32,
    dst: u32,
    tag: u32,
    iteration: u32,
    payload: &[u8],
    max_frame: usize,
) -> Result<u64, TransportError> {
    let count = chunk_count(payload.len(), max_frame)?;
    let mut written = 0u64;
    for index in 0..count {
        let start = index as usize * max_frame;
        let end = (start + max_frame).min(payload.len());
        let chunk = &payload[start.min(payload.len())..end];
        let header = FrameHeader { src, dst, tag, iteration, chunk_index: index, chunk_count: count };
        w.write_all(&header.encode(chunk.len()))?;
        w.write_all(chunk)?;
        written += (HEADER_LEN + chunk.len()) as u64;
    }
    w.flush()?;
    Ok(written)
}

/// Reads one frame. `Ok(None)` on clean EOF before the length prefix.
pub fn read_frame<R: Read>(r: &mut R, max_frame: usize) -> Result<Option<(FrameHeader, Vec<u8>)>, TransportError> {
    let mut len_buf = [0u8; LENGTH_PREFIX];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    if len < HEADER_LEN {
        return Err(TransportError::Protocol(format!("frame length {len} shorter than header")));
    }
    if len - HEADER_LEN > max_frame {
        return Err(TransportError::FrameTooLarge { len: len - HEADER_LEN, max: max_frame });
    }
    let mut header_buf = [0u8; HEADER_LEN];
    r.read_exact(&mut header_buf)?;
    let header = FrameHeader::decode(&header_buf)?;
    let mut payload = vec![0u8; len - HEADER_LEN];
    r.read_exact(&mut payload)?;
    Ok(Some((header, payload)))
}

pub fn handshake_payload(rank: u32, world_size: u32) -> Vec<u8> {
    let mut p = Vec::with_capacity(14);
    p.extend_from_slice(HANDSHAKE_MAGIC);
    p.extend_from_slice(&rank.to_le_bytes());
    p.extend_from_slice(&world_size.to_le_bytes());
    p
}

/// Returns `(rank, world_size)` from a handshake payload.
pub fn parse_handshake(payload: &[u8]) -> Result<(u32, u32), TransportError> {
    if payload.len() != 14 || &payload[..6] != HANDSHAKE_MAGIC {
        return Err(TransportError::Handshake("bad handshake magic".into()));
    }
    let rank = u32::from_le_bytes(payload[6..10].try_into().unwrap());
    let world = u32::from_le_bytes(payload[10..14].try_into().unwrap());
    Ok((rank, world))
}
