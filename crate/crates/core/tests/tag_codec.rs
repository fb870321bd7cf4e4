use charmlet::tag::{
    decode_tag, encode_channel_tag, encode_messaging_tag, MessageKind, Tag, TagFields, TagLayout,
};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Independent bit layout: kind in bits 60..64; messaging pe in 28..60 and
/// counter in 0..28; channel id in 32..60, direction at 31, counter in 0..31.
fn oracle_messaging(kind: u64, pe: u64, counter: u64) -> u64 {
    (kind << 60) | (pe << 28) | counter
}

fn oracle_channel(id: u64, dir: u64, counter: u64) -> u64 {
    (3 << 60) | (id << 32) | (dir << 31) | counter
}

fn messaging_kind() -> impl Strategy<Value = MessageKind> {
    prop_oneof![
        Just(MessageKind::Eager),
        Just(MessageKind::Probe),
        Just(MessageKind::Device)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn messaging_round_trip(kind in messaging_kind(), pe in 0u64..1 << 32, counter in 0u64..1 << 28) {
        let l = TagLayout::default();
        let tag = encode_messaging_tag(kind, pe, counter, &l).unwrap();
        prop_assert_eq!(tag.0, oracle_messaging(kind.code() as u64, pe, counter));
        prop_assert_eq!(
            decode_tag(tag, &l).unwrap(),
            TagFields::Messaging { kind, source_pe: pe, counter }
        );
    }

    #[test]
    fn channel_round_trip(id in 0u64..1 << 28, dir in 0u8..2, counter in 0u64..1 << 31) {
        let l = TagLayout::default();
        let tag = encode_channel_tag(id, dir, counter, &l).unwrap();
        prop_assert_eq!(tag.0, oracle_channel(id, dir as u64, counter));
        prop_assert_eq!(
            decode_tag(tag, &l).unwrap(),
            TagFields::Channel { channel_id: id, direction: dir, counter }
        );
    }

    #[test]
    fn out_of_range_fields_are_rejected(pe in 1u64 << 32..u64::MAX, id in 1u64 << 28..1 << 40) {
        let l = TagLayout::default();
        prop_assert!(encode_messaging_tag(MessageKind::Device, pe, 0, &l).is_err());
        prop_assert!(encode_channel_tag(id, 0, 0, &l).is_err());
        prop_assert!(encode_channel_tag(0, 2, 0, &l).is_err());
        prop_assert!(encode_channel_tag(0, 0, 1 << 31, &l).is_err());
    }
}

/// Seeded round trips through both schemes, checked against the oracle.
pub fn random_round_trips(seed: u64, cases: usize) {
    let l = TagLayout::default();
    let mut rng = StdRng::seed_from_u64(seed);
    let kinds = [MessageKind::Eager, MessageKind::Probe, MessageKind::Device];
    for _ in 0..cases {
        let kind = kinds[rng.random_range(0..3)];
        let (pe, counter) = (rng.random_range(0..1u64 << 32), rng.random_range(0..1u64 << 28));
        let tag = encode_messaging_tag(kind, pe, counter, &l).unwrap();
        assert_eq!(tag.0, oracle_messaging(kind.code() as u64, pe, counter));
        assert_eq!(decode_tag(tag, &l).unwrap(), TagFields::Messaging { kind, source_pe: pe, counter });
    }
    for _ in 0..cases {
        let (id, dir, counter) = (rng.random_range(0..1u64 << 28), rng.random_range(0..2u8), rng.random_range(0..1u64 << 31));
        let tag = encode_channel_tag(id, dir, counter, &l).unwrap();
        assert_eq!(tag.0, oracle_channel(id, dir as u64, counter));
        assert_eq!(decode_tag(tag, &l).unwrap(), TagFields::Channel { channel_id: id, direction: dir, counter });
    }
}

#[test]
fn seeded_round_trips() {
    random_round_trips(3, 10_000);
}

#[test]
fn raw_values_match_the_bit_layout_oracle() {
    raw_values();
}

pub fn raw_values() {
    let l = TagLayout::default();
    let dev = encode_messaging_tag(MessageKind::Device, 3, 5, &l).unwrap();
    assert_eq!(dev.0, oracle_messaging(2, 3, 5));
    assert_eq!(dev.0, 0x2000_0000_3000_0005);
    let probe = encode_messaging_tag(MessageKind::Probe, (1 << 32) - 1, (1 << 28) - 1, &l).unwrap();
    assert_eq!(probe.0, oracle_messaging(1, (1 << 32) - 1, (1 << 28) - 1));
    assert_eq!(probe.0, 0x1FFF_FFFF_FFFF_FFFF);
    let ch = [(0, 0, 0, 0x3000_0000_0000_0000u64), (1, 0, 2, 0x3000_0001_0000_0002), (1, 1, 2, 0x3000_0001_8000_0002)];
    for (id, dir, c, want) in ch {
        let t = encode_channel_tag(id, dir, c, &l).unwrap();
        assert_eq!(t.0, oracle_channel(id, dir as u64, c));
        assert_eq!(t.0, want);
    }
    assert_eq!(
        decode_tag(Tag(0x2000_0000_3000_0005), &l).unwrap(),
        TagFields::Messaging { kind: MessageKind::Device, source_pe: 3, counter: 5 }
    );
}

#[test]
fn unknown_kind_does_not_decode() {
    assert!(decode_tag(Tag(0xF << 60), &TagLayout::default()).is_err());
}
