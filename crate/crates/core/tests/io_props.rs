//! Frame codec, session replay and fidelity comparison properties.

mod common;

use proptest::prelude::*;

use common::traffic::{self, PLC};
use rtport_core::fidelity::{compare_memory, compare_traces, sha1_hex, MemorySnapshot};
use rtport_core::ioproto::{self, frame_decode, frame_encode, Flag, FrameDecoder, LogKind, Session};

fn flag() -> impl Strategy<Value = Flag> {
    prop_oneof![Just(Flag::Data), Just(Flag::Start), Just(Flag::Stop)]
}

proptest! {
    #[test]
    fn frames_round_trip_across_any_chunking(
        frames in prop::collection::vec((any::<u8>(), flag(), prop::collection::vec(any::<u8>(), 0..300)), 1..12),
        cuts in prop::collection::vec(1usize..64, 1..40),
    ) {
        let mut wire = Vec::new();
        for (id, f, p) in &frames {
            let one = frame_encode(*id, *f, p).unwrap();
            let back = frame_decode(&one).unwrap();
            prop_assert_eq!((back.channel_id, back.flag, &back.payload), (*id, *f, p));
            prop_assert_eq!(&one[..2], b"FP");
            prop_assert_eq!(u16::from_be_bytes([one[4], one[5]]) as usize, p.len());
            wire.extend(one);
        }
        let mut dec = FrameDecoder::default();
        let mut got = Vec::new();
        let mut rest = &wire[..];
        for c in cuts.iter().cycle() {
            if rest.is_empty() {
                break;
            }
            let n = (*c).min(rest.len());
            dec.push(&rest[..n]);
            rest = &rest[n..];
            while let Some(f) = dec.next_frame() {
                got.push(f.unwrap());
            }
        }
        prop_assert_eq!(got.len(), frames.len());
        for (g, (id, f, p)) in got.iter().zip(&frames) {
            prop_assert_eq!((g.channel_id, g.flag, &g.payload), (*id, *f, p));
        }
    }

    #[test]
    fn replay_reproduces_the_outbound_bytes(seed: u64) {
        let sc = traffic::scenario();
        let events = traffic::traffic(seed, 120);
        let (live, session) = traffic::run(&sc, &events);
        let r = ioproto::replay(&sc, &session.log_text()).unwrap();
        prop_assert_eq!(&r.recorded, &live);
        prop_assert_eq!(&r.replayed, &live);
        let (again, _) = traffic::run(&sc, &events);
        prop_assert_eq!(again, live);
    }

    #[test]
    fn unmatched_messages_get_no_reply(msg in "[a-z]{0,30}( [a-z]{1,8}){0,3}") {
        let mut s = Session::new(traffic::scenario()).unwrap();
        let mut wire = frame_encode(1, Flag::Start, &[]).unwrap();
        wire.extend(frame_encode(1, Flag::Data, msg.as_bytes()).unwrap());
        wire.extend(frame_encode(1, Flag::Stop, &[]).unwrap());
        prop_assert!(s.on_bytes(0, PLC, &wire).is_empty());
        let mut line = msg.clone().into_bytes();
        line.push(b'\n');
        prop_assert_eq!(s.on_bytes(0, traffic::CONSOLE, &line).len(), usize::from(msg.starts_with("status")));
    }

    #[test]
    fn data_outside_a_bracket_is_rejected(stray in "GETP[a-z]{0,8}", tail in "[a-z]{1,8}") {
        let mut s = Session::new(traffic::scenario()).unwrap();
        let mut wire = frame_encode(1, Flag::Data, stray.as_bytes()).unwrap();
        wire.extend(frame_encode(1, Flag::Start, &[]).unwrap());
        wire.extend(frame_encode(1, Flag::Data, tail.as_bytes()).unwrap());
        wire.extend(frame_encode(1, Flag::Stop, &[]).unwrap());
        prop_assert!(s.on_bytes(0, PLC, &wire).is_empty());
        let rejected = s.log.iter().any(|e| matches!(&e.kind, LogKind::Note(n) if n.contains("DATA outside")));
        prop_assert!(rejected);
        // The same message inside a bracket is answered.
        let mut ok = frame_encode(1, Flag::Start, &[]).unwrap();
        ok.extend(frame_encode(1, Flag::Data, stray.as_bytes()).unwrap());
        ok.extend(frame_encode(1, Flag::Stop, &[]).unwrap());
        let em = s.on_bytes(1, PLC, &ok);
        prop_assert_eq!(em.len(), 1);
    }

    #[test]
    fn trace_comparison_is_symmetric(a in prop::collection::vec(0u32..8, 0..40), b in prop::collection::vec(0u32..8, 0..40)) {
        let (x, y) = (compare_traces(&a, &b), compare_traces(&b, &a));
        prop_assert_eq!((x.equal, x.lcp), (y.equal, y.lcp));
        prop_assert_eq!(x.equal, a == b);
        prop_assert!(a[..x.lcp] == b[..x.lcp]);
        prop_assert!(x.lcp == a.len() || x.lcp == b.len() || a[x.lcp] != b[x.lcp]);
    }

    #[test]
    fn single_byte_perturbation_is_located(bytes in prop::collection::vec(any::<u8>(), 1..4096), at: prop::sample::Index, flip in 1u8..=255) {
        let a = MemorySnapshot { start: 0x7000, bytes: bytes.clone(), label: "a".into() };
        let same = compare_memory(&a, &a.clone()).unwrap();
        prop_assert!(same.equal && same.first_difference.is_none());
        let i = at.index(bytes.len());
        let mut b = a.clone();
        b.bytes[i] ^= flip;
        let c = compare_memory(&a, &b).unwrap();
        prop_assert!(!c.equal);
        prop_assert_eq!(c.first_difference, Some(i));
        prop_assert_ne!(c.hash_a.full, c.hash_b.full);
    }
}

#[test]
fn sha1_reference_vectors() {
    assert_eq!(sha1_hex(b"abc"), "a9993e364706816aba3e25717850c26c9cd0d89d");
    assert_eq!(sha1_hex(b""), "da39a3ee5e6b4b0d3255bfef95601890afd80709");
    assert_eq!(
        sha1_hex(b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq"),
        "84983e441c3bd26ebaae4aa1f95129e5e54670f1"
    );
    assert_eq!(sha1_hex(&vec![b'a'; 1_000_000]), "34aa973cd4c4daa4f61eeb2bdbad27316534016f");
}

#[test]
fn thousand_frame_session_replays_exactly() {
    let sc = traffic::scenario();
    let events = traffic::traffic(7, 1000);
    let (live, session) = traffic::run(&sc, &events);
    let inbound = session
        .log
        .iter()
        .filter(|e| e.channel == PLC && matches!(e.kind, LogKind::Message { flag: Some(_), .. }))
        .filter(|e| e.dir == ioproto::Direction::In)
        .count();
    assert!(inbound >= 1000, "{inbound} inbound frames");
    let r = ioproto::replay(&sc, &session.log_text()).unwrap();
    assert_eq!(r.replayed, live);
    assert_eq!(r.recorded, live);
}
