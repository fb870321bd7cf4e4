//! 64-bit matching tags.
//!
//! Every transport frame carries a tag. The top four bits hold a
//! [`MessageKind`]; the remaining 60 bits are split according to one of two
//! schemes:
//!
//! ```text
//! messaging: | kind:4 | source pe:peBits        | counter:counterBits          |
//! channel:   | kind:4 | channel id:channelIdBits | dir:1 | counter:chanBits-1   |
//! ```
//!
//! Field order is high to low, so numeric tag order follows
//! `(kind, pe, counter)`. Widths are a runtime [`TagLayout`]; all peers must
//! agree on it, which is checked with [`TagLayout::digest`] at connect time.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the kind field. Not configurable.
pub const KIND_BITS: u32 = 4;

/// Mask selecting only the kind bits of a tag.
pub const KIND_MASK: u64 = 0xF << (64 - KIND_BITS);

/// Mask selecting every bit of a tag.
pub const FULL_MASK: u64 = u64::MAX;

/// Message type stored in the top nibble of a tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    /// Host-side runtime message small enough for the eager path.
    Eager = 0,
    /// Host-side runtime message received through probe + receive.
    Probe = 1,
    /// Device payload of the messaging API.
    Device = 2,
    /// Payload sent through a channel.
    Channel = 3,
}

impl MessageKind {
    pub const ALL: [MessageKind; 4] = [
        MessageKind::Eager,
        MessageKind::Probe,
        MessageKind::Device,
        MessageKind::Channel,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MessageKind::Eager),
            1 => Some(MessageKind::Probe),
            2 => Some(MessageKind::Device),
            3 => Some(MessageKind::Channel),
            _ => None,
        }
    }

    /// Tag value with only this kind set; pair with [`KIND_MASK`] for a
    /// kind-wide wildcard receive.
    pub fn wildcard_tag(self) -> Tag {
        Tag((self.code() as u64) << (64 - KIND_BITS))
    }
}

/// Field which did not fit its configured width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagField {
    Kind,
    SourcePe,
    Counter,
    ChannelId,
    Direction,
    ChannelCounter,
}

impl fmt::Display for TagField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TagField::Kind => "kind",
            TagField::SourcePe => "source pe",
            TagField::Counter => "counter",
            TagField::ChannelId => "channel id",
            TagField::Direction => "direction",
            TagField::ChannelCounter => "channel counter",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("{field} value {value} does not fit in {bits} bits")]
    Range { field: TagField, value: u64, bits: u32 },
    #[error("kind {0:?} is not valid for this tag scheme")]
    WrongScheme(MessageKind),
    #[error("unknown message kind code {0:#x}")]
    UnknownKind(u8),
    #[error("invalid tag layout: {0}")]
    Layout(String),
}

/// Field widths of both tag schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TagLayout {
    pub pe_bits: u32,
    pub counter_bits: u32,
    pub channel_id_bits: u32,
    /// Includes the one direction bit.
    pub channel_counter_bits: u32,
}

impl Default for TagLayout {
    fn default() -> Self {
        TagLayout {
            pe_bits: 32,
            counter_bits: 28,
            channel_id_bits: 28,
            channel_counter_bits: 32,
        }
    }
}

impl TagLayout {
    pub fn new(
        pe_bits: u32,
        counter_bits: u32,
        channel_id_bits: u32,
        channel_counter_bits: u32,
    ) -> Result<Self, TagError> {
        let layout = TagLayout {
            pe_bits,
            counter_bits,
            channel_id_bits,
            channel_counter_bits,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<(), TagError> {
        if KIND_BITS + self.pe_bits + self.counter_bits != 64 {
            return Err(TagError::Layout(format!(
                "kind + pe + counter bits = {} (must be 64)",
                KIND_BITS + self.pe_bits + self.counter_bits
            )));
        }
        if KIND_BITS + self.channel_id_bits + self.channel_counter_bits != 64 {
            return Err(TagError::Layout(format!(
                "kind + channel id + channel counter bits = {} (must be 64)",
                KIND_BITS + self.channel_id_bits + self.channel_counter_bits
            )));
        }
        if self.pe_bits == 0 || self.counter_bits == 0 || self.channel_id_bits == 0 {
            return Err(TagError::Layout("field widths must be non-zero".into()));
        }
        if self.channel_counter_bits < 2 {
            return Err(TagError::Layout(
                "channel counter needs at least 2 bits (direction + counter)".into(),
            ));
        }
        Ok(())
    }

    /// Largest messaging-scheme counter plus one.
    pub fn counter_modulus(&self) -> u64 {
        1u64 << self.counter_bits
    }

    /// Number of sends available per channel direction.
    pub fn channel_counter_modulus(&self) -> u64 {
        1u64 << (self.channel_counter_bits - 1)
    }

    /// FNV-1a over the field widths. Exchanged at connection time.
    pub fn digest(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut hash = OFFSET;
        for width in [
            KIND_BITS,
            self.pe_bits,
            self.counter_bits,
            self.channel_id_bits,
            self.channel_counter_bits,
        ] {
            for byte in width.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(PRIME);
            }
        }
        hash
    }
}

/// A raw 64-bit matching tag.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Tag(pub u64);

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tag({:#018x})", self.0)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

impl Tag {
    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn kind_code(self) -> u8 {
        (self.0 >> (64 - KIND_BITS)) as u8
    }

    pub fn kind(self) -> Option<MessageKind> {
        MessageKind::from_code(self.kind_code())
    }

    /// `(self & mask) == (other & mask)`.
    pub fn matches(self, other: Tag, mask: u64) -> bool {
        (self.0 & mask) == (other.0 & mask)
    }
}

/// Decoded form of a tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagFields {
    Messaging {
        kind: MessageKind,
        source_pe: u64,
        counter: u64,
    },
    Channel {
        channel_id: u64,
        direction: u8,
        counter: u64,
    },
}

fn check(field: TagField, value: u64, bits: u32) -> Result<(), TagError> {
    if bits < 64 && value >> bits != 0 {
        return Err(TagError::Range { field, value, bits });
    }
    Ok(())
}

fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Builds a tag under the messaging scheme (`EAGER`, `PROBE`, `DEVICE`).
pub fn encode_messaging_tag(
    kind: MessageKind,
    source_pe: u64,
    counter: u64,
    layout: &TagLayout,
) -> Result<Tag, TagError> {
    if kind == MessageKind::Channel {
        return Err(TagError::WrongScheme(kind));
    }
    check(TagField::SourcePe, source_pe, layout.pe_bits)?;
    check(TagField::Counter, counter, layout.counter_bits)?;
    let raw = ((kind.code() as u64) << (layout.pe_bits + layout.counter_bits))
        | (source_pe << layout.counter_bits)
        | counter;
    Ok(Tag(raw))
}

/// Builds a tag under the channel scheme. `direction` is 0 or 1.
pub fn encode_channel_tag(
    channel_id: u64,
    direction: u8,
    counter: u64,
    layout: &TagLayout,
) -> Result<Tag, TagError> {
    check(TagField::ChannelId, channel_id, layout.channel_id_bits)?;
    check(TagField::Direction, direction as u64, 1)?;
    check(
        TagField::ChannelCounter,
        counter,
        layout.channel_counter_bits - 1,
    )?;
    let raw = ((MessageKind::Channel.code() as u64) << (64 - KIND_BITS))
        | (channel_id << layout.channel_counter_bits)
        | ((direction as u64) << (layout.channel_counter_bits - 1))
        | counter;
    Ok(Tag(raw))
}

/// Inverse of both encoders; the scheme is chosen by the kind nibble.
pub fn decode_tag(tag: Tag, layout: &TagLayout) -> Result<TagFields, TagError> {
    let code = tag.kind_code();
    let kind = MessageKind::from_code(code).ok_or(TagError::UnknownKind(code))?;
    let raw = tag.0;
    Ok(match kind {
        MessageKind::Channel => {
            let cbits = layout.channel_counter_bits;
            TagFields::Channel {
                channel_id: (raw >> cbits) & low_mask(layout.channel_id_bits),
                direction: ((raw >> (cbits - 1)) & 1) as u8,
                counter: raw & low_mask(cbits - 1),
            }
        }
        _ => TagFields::Messaging {
            kind,
            source_pe: (raw >> layout.counter_bits) & low_mask(layout.pe_bits),
            counter: raw & low_mask(layout.counter_bits),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent bit-layout oracle: explicit per-field shifts with the
    // default widths written out as literals.
    fn oracle_messaging(kind: u64, pe: u64, counter: u64) -> u64 {
        (kind << 60) | (pe << 28) | counter
    }

    fn oracle_channel(id: u64, dir: u64, counter: u64) -> u64 {
        (3 << 60) | (id << 32) | (dir << 31) | counter
    }

    #[test]
    fn messaging_examples() {
        let l = TagLayout::default();
        assert_eq!(
            encode_messaging_tag(MessageKind::Eager, 0, 0, &l).unwrap(),
            Tag(0)
        );
        let t = encode_messaging_tag(MessageKind::Device, 3, 5, &l).unwrap();
        assert_eq!(t.0, oracle_messaging(2, 3, 5));
        assert_eq!(t.0, 0x2000_0000_3000_0005);
        let t = encode_messaging_tag(MessageKind::Probe, (1 << 32) - 1, (1 << 28) - 1, &l).unwrap();
        assert_eq!(t.0, oracle_messaging(1, (1 << 32) - 1, (1 << 28) - 1));
        assert_eq!(t.0, 0x1FFF_FFFF_FFFF_FFFF);
    }

    #[test]
    fn channel_examples() {
        let l = TagLayout::default();
        assert_eq!(encode_channel_tag(0, 0, 0, &l).unwrap().0, oracle_channel(0, 0, 0));
        assert_eq!(encode_channel_tag(0, 0, 0, &l).unwrap().0, 0x3000_0000_0000_0000);
        assert_eq!(encode_channel_tag(1, 0, 2, &l).unwrap().0, 0x3000_0001_0000_0002);
        assert_eq!(encode_channel_tag(1, 1, 2, &l).unwrap().0, 0x3000_0001_8000_0002);
        assert_eq!(encode_channel_tag(1, 1, 2, &l).unwrap().0, oracle_channel(1, 1, 2));
    }

    #[test]
    fn decode_examples() {
        let l = TagLayout::default();
        assert_eq!(
            decode_tag(Tag(0x2000_0000_3000_0005), &l).unwrap(),
            TagFields::Messaging {
                kind: MessageKind::Device,
                source_pe: 3,
                counter: 5
            }
        );
        assert_eq!(
            decode_tag(Tag(0xF000_0000_0000_0000), &l),
            Err(TagError::UnknownKind(0xF))
        );
    }

    #[test]
    fn overflow_names_field() {
        let l = TagLayout::default();
        match encode_messaging_tag(MessageKind::Device, 0, 1 << 28, &l) {
            Err(TagError::Range { field, .. }) => assert_eq!(field, TagField::Counter),
            other => panic!("unexpected {other:?}"),
        }
        match encode_messaging_tag(MessageKind::Device, 1 << 32, 0, &l) {
            Err(TagError::Range { field, .. }) => assert_eq!(field, TagField::SourcePe),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            encode_channel_tag(1 << 28, 0, 0, &l),
            Err(TagError::Range { field: TagField::ChannelId, .. })
        ));
        assert!(matches!(
            encode_channel_tag(0, 0, 1 << 31, &l),
            Err(TagError::Range { field: TagField::ChannelCounter, .. })
        ));
        assert!(matches!(
            encode_channel_tag(0, 2, 0, &l),
            Err(TagError::Range { field: TagField::Direction, .. })
        ));
        assert_eq!(
            encode_messaging_tag(MessageKind::Channel, 0, 0, &l),
            Err(TagError::WrongScheme(MessageKind::Channel))
        );
    }

    #[test]
    fn layout_validation() {
        assert!(TagLayout::new(32, 28, 28, 32).is_ok());
        assert!(TagLayout::new(20, 40, 30, 30).is_ok());
        assert!(TagLayout::new(32, 29, 28, 32).is_err());
        assert!(TagLayout::new(32, 28, 59, 1).is_err());
        assert_ne!(
            TagLayout::default().digest(),
            TagLayout::new(20, 40, 28, 32).unwrap().digest()
        );
    }

    #[test]
    fn injective_on_small_subranges() {
        let l = TagLayout::new(4, 56, 4, 56).unwrap();
        let mut seen = std::collections::HashSet::new();
        for kind in [MessageKind::Eager, MessageKind::Probe, MessageKind::Device] {
            for pe in 0..16 {
                for c in 0..64 {
                    assert!(seen.insert(encode_messaging_tag(kind, pe, c, &l).unwrap()));
                }
            }
        }
        for id in 0..16 {
            for dir in 0..2 {
                for c in 0..64 {
                    assert!(seen.insert(encode_channel_tag(id, dir, c, &l).unwrap()));
                }
            }
        }
    }

    #[test]
    fn kind_codes_distinct() {
        let codes: std::collections::HashSet<u8> =
            MessageKind::ALL.iter().map(|k| k.code()).collect();
        assert_eq!(codes.len(), 4);
        assert!(codes.iter().all(|c| *c < 16));
    }
}
