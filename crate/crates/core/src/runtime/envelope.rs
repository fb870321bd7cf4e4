//! Host-side runtime messages and their binary encoding.
//!
//! Layout (little-endian): kind u8 | collection u32 | index u32 | home_pe u32
//! | entry u32 | source_pe u32 | seq u64 | descriptor count u32 |
//! descriptors (src_addr u64, size u64, tag u64)* | payload.

use std::fmt;

use crate::tag::Tag;
use crate::transport::PeId;

/// Address of one chare: its collection, its index in it and its home PE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChareId {
    pub collection: u32,
    pub index: u32,
    pub home_pe: PeId,
}

impl fmt::Display for ChareId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]@{}", self.collection, self.index, self.home_pe)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum EnvelopeKind {
    /// Entry invocation with host arguments only.
    Regular = 0,
    /// Entry invocation whose device arguments travel as separate tagged
    /// payloads.
    DeviceMeta = 1,
    /// Remote fulfillment of a future.
    Future = 2,
    /// Point-to-point message of the MPI facade.
    Mpi = 3,
}

impl EnvelopeKind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => EnvelopeKind::Regular,
            1 => EnvelopeKind::DeviceMeta,
            2 => EnvelopeKind::Future,
            3 => EnvelopeKind::Mpi,
            _ => return None,
        })
    }
}

/// Source address, size and transport tag of one device payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceDescriptor {
    pub src_addr: u64,
    pub size: u64,
    pub tag: Tag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: EnvelopeKind,
    pub dest: ChareId,
    pub entry: u32,
    pub source_pe: PeId,
    /// Per (source, destination PE) sequence number.
    pub seq: u64,
    pub descriptors: Vec<DeviceDescriptor>,
    pub payload: Vec<u8>,
}

pub const HEADER_LEN: usize = 1 + 4 * 5 + 8 + 4;
pub const DESCRIPTOR_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvelopeError {
    #[error("envelope too short ({0} bytes)")]
    Short(usize),
    #[error("unknown envelope kind {0}")]
    Kind(u8),
}

impl Envelope {
    pub fn encoded_len(&self) -> usize {
        encoded_len(self.descriptors.len(), self.payload.len())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.encoded_len());
        b.push(self.kind as u8);
        for v in [
            self.dest.collection,
            self.dest.index,
            self.dest.home_pe,
            self.entry,
            self.source_pe,
        ] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.seq.to_le_bytes());
        b.extend_from_slice(&(self.descriptors.len() as u32).to_le_bytes());
        for d in &self.descriptors {
            b.extend_from_slice(&d.src_addr.to_le_bytes());
            b.extend_from_slice(&d.size.to_le_bytes());
            b.extend_from_slice(&d.tag.0.to_le_bytes());
        }
        b.extend_from_slice(&self.payload);
        b
    }

    pub fn decode(b: &[u8]) -> Result<Envelope, EnvelopeError> {
        if b.len() < HEADER_LEN {
            return Err(EnvelopeError::Short(b.len()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let kind = EnvelopeKind::from_u8(b[0]).ok_or(EnvelopeError::Kind(b[0]))?;
        let ndesc = u32_at(29) as usize;
        let body = HEADER_LEN + ndesc * DESCRIPTOR_LEN;
        if b.len() < body {
            return Err(EnvelopeError::Short(b.len()));
        }
        let descriptors = (0..ndesc)
            .map(|i| {
                let o = HEADER_LEN + i * DESCRIPTOR_LEN;
                DeviceDescriptor {
                    src_addr: u64_at(o),
                    size: u64_at(o + 8),
                    tag: Tag(u64_at(o + 16)),
                }
            })
            .collect();
        Ok(Envelope {
            kind,
            dest: ChareId {
                collection: u32_at(1),
                index: u32_at(5),
                home_pe: u32_at(9),
            },
            entry: u32_at(13),
            source_pe: u32_at(17),
            seq: u64_at(21),
            descriptors,
            payload: b[body..].to_vec(),
        })
    }
}

/// Encoded size of an envelope with `ndesc` descriptors and `payload` bytes.
pub fn encoded_len(ndesc: usize, payload: usize) -> usize {
    HEADER_LEN + ndesc * DESCRIPTOR_LEN + payload
}
