//! Frames and their TCP wire encoding.
//!
//! All integers are little-endian.
//!
//! ```text
//! frame     = "CLT1" | kind u8 | tag u64 | length u32 | payload[length]
//!   kind 0 eager    payload = message bytes
//!   kind 1 rts      payload = rendezvous id u64 | message length u64
//!   kind 2 pull     payload = rendezvous id u64
//!   kind 3 payload  payload = rendezvous id u64 | message bytes
//! handshake = "CLT1" | version u16 | layout digest u64 | worker id u32
//! ```

use std::io::{self, Read, Write};

use crate::tag::Tag;
use crate::time::Nanos;

use super::activity::ActivityToken;

pub const MAGIC: [u8; 4] = *b"CLT1";
pub const PROTOCOL_VERSION: u16 = 1;
pub const FRAME_HEADER_LEN: usize = 4 + 1 + 8 + 4;
pub const HANDSHAKE_LEN: usize = 4 + 2 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Eager = 0,
    Rts = 1,
    Pull = 2,
    Payload = 3,
}

impl FrameKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(FrameKind::Eager),
            1 => Some(FrameKind::Rts),
            2 => Some(FrameKind::Pull),
            3 => Some(FrameKind::Payload),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameBody {
    Eager(Vec<u8>),
    Rts { rndv_id: u64, len: u64 },
    Pull { rndv_id: u64 },
    Payload { rndv_id: u64, data: Vec<u8> },
}

impl FrameBody {
    pub fn kind(&self) -> FrameKind {
        match self {
            FrameBody::Eager(_) => FrameKind::Eager,
            FrameBody::Rts { .. } => FrameKind::Rts,
            FrameBody::Pull { .. } => FrameKind::Pull,
            FrameBody::Payload { .. } => FrameKind::Payload,
        }
    }

    /// Bytes of user data carried (what occupies the modeled link).
    pub fn data_len(&self) -> u64 {
        match self {
            FrameBody::Eager(d) | FrameBody::Payload { data: d, .. } => d.len() as u64,
            _ => 0,
        }
    }
}

/// One tagged unit crossing a link.
#[derive(Debug)]
pub struct Frame {
    pub tag: Tag,
    pub body: FrameBody,
    /// Injection time at the sender (virtual mode).
    pub send_ts: Nanos,
    /// Modeled arrival time at the receiver (virtual mode).
    pub arrival: Nanos,
    pub(crate) token: Option<ActivityToken>,
}

impl Frame {
    pub fn new(tag: Tag, body: FrameBody) -> Self {
        Frame {
            tag,
            body,
            send_ts: 0,
            arrival: 0,
            token: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown frame kind {0}")]
    BadKind(u8),
    #[error("malformed {kind:?} frame: length {len}")]
    BadLength { kind: FrameKind, len: u32 },
    #[error("unsupported protocol version {0}")]
    BadVersion(u16),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_frame(tag: Tag, body: &FrameBody) -> Vec<u8> {
    let payload_len = match body {
        FrameBody::Eager(d) => d.len(),
        FrameBody::Rts { .. } => 16,
        FrameBody::Pull { .. } => 8,
        FrameBody::Payload { data, .. } => 8 + data.len(),
    };
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload_len);
    out.extend_from_slice(&MAGIC);
    out.push(body.kind() as u8);
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&(payload_len as u32).to_le_bytes());
    match body {
        FrameBody::Eager(d) => out.extend_from_slice(d),
        FrameBody::Rts { rndv_id, len } => {
            out.extend_from_slice(&rndv_id.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
        }
        FrameBody::Pull { rndv_id } => out.extend_from_slice(&rndv_id.to_le_bytes()),
        FrameBody::Payload { rndv_id, data } => {
            out.extend_from_slice(&rndv_id.to_le_bytes());
            out.extend_from_slice(data);
        }
    }
    out
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Reads one frame. `Ok(None)` on a clean EOF at a frame boundary.
pub fn read_frame(r: &mut impl Read) -> Result<Option<(Tag, FrameBody)>, WireError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut filled = 0;
    while filled < header.len() {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let magic: [u8; 4] = header[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let kind = FrameKind::from_u8(header[4]).ok_or(WireError::BadKind(header[4]))?;
    let tag = Tag(u64_at(&header, 5));
    let len = u32::from_le_bytes(header[13..17].try_into().unwrap());
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    let bad = || WireError::BadLength { kind, len };
    let body = match kind {
        FrameKind::Eager => FrameBody::Eager(payload),
        FrameKind::Rts => {
            if len != 16 {
                return Err(bad());
            }
            FrameBody::Rts {
                rndv_id: u64_at(&payload, 0),
                len: u64_at(&payload, 8),
            }
        }
        FrameKind::Pull => {
            if len != 8 {
                return Err(bad());
            }
            FrameBody::Pull {
                rndv_id: u64_at(&payload, 0),
            }
        }
        FrameKind::Payload => {
            if len < 8 {
                return Err(bad());
            }
            let rndv_id = u64_at(&payload, 0);
            payload.drain(..8);
            FrameBody::Payload {
                rndv_id,
                data: payload,
            }
        }
    };
    Ok(Some((tag, body)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handshake {
    pub version: u16,
    pub digest: u64,
    pub worker_id: u32,
}

impl Handshake {
    pub fn encode(&self) -> [u8; HANDSHAKE_LEN] {
        let mut out = [0u8; HANDSHAKE_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..6].copy_from_slice(&self.version.to_le_bytes());
        out[6..14].copy_from_slice(&self.digest.to_le_bytes());
        out[14..18].copy_from_slice(&self.worker_id.to_le_bytes());
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, WireError> {
        let mut buf = [0u8; HANDSHAKE_LEN];
        r.read_exact(&mut buf)?;
        let magic: [u8; 4] = buf[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(buf[4..6].try_into().unwrap());
        if version != PROTOCOL_VERSION {
            return Err(WireError::BadVersion(version));
        }
        Ok(Handshake {
            version,
            digest: u64_at(&buf, 6),
            worker_id: u32::from_le_bytes(buf[14..18].try_into().unwrap()),
        })
    }
}
