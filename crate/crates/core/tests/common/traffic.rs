//! A two-channel scenario and seeded inbound traffic for it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtport_core::ioproto::{frame_encode, Channel, Flag, Framing, Match, Rule, Scenario, Session, Stimulus, Transport};

pub const PLC: &str = "plc";
pub const CONSOLE: &str = "con";

pub fn scenario() -> Scenario {
    Scenario {
        channels: vec![
            Channel {
                name: PLC.into(),
                id: 1,
                transport: Transport::TcpListen,
                address: "127.0.0.1:0".into(),
                framing: Framing::Flagged,
            },
            Channel {
                name: CONSOLE.into(),
                id: 2,
                transport: Transport::TcpListen,
                address: "127.0.0.1:0".into(),
                framing: Framing::Raw,
            },
        ],
        stimuli: vec![Stimulus { channel: PLC.into(), period_ms: 500, payload: b"ADC {seq}".to_vec() }],
        rules: vec![
            Rule {
                channel: PLC.into(),
                pattern: Match::Prefix(b"GETP".to_vec()),
                reply: b"P=42".to_vec(),
                delay_ms: 0,
            },
            Rule { channel: PLC.into(), pattern: Match::Token("PING".into()), reply: b"PONG".to_vec(), delay_ms: 5 },
            Rule {
                channel: CONSOLE.into(),
                pattern: Match::Prefix(b"status".to_vec()),
                reply: b"ok".to_vec(),
                delay_ms: 0,
            },
        ],
        log_path: None,
    }
}

pub enum Event {
    Bytes { ts_ms: u64, channel: &'static str, bytes: Vec<u8> },
    Stimulus { ts_ms: u64 },
}

fn payload(rng: &mut ChaCha8Rng) -> Vec<u8> {
    match rng.gen_range(0..5) {
        0 => b"GETP".to_vec(),
        1 => format!("x{} PING", rng.gen::<u16>()).into_bytes(),
        2 => Vec::new(),
        _ => (0..rng.gen_range(1..40)).map(|_| rng.gen_range(b'a'..=b'z')).collect(),
    }
}

/// Inbound traffic with at least `frames` flagged frames: bracketed
/// messages, stray DATA, RAW lines, arbitrary chunk boundaries, and a
/// stimulus every 500 ms of simulated time.
pub fn traffic(seed: u64, frames: usize) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let (mut ts, mut sent, mut next_stim) = (0u64, 0usize, 500u64);
    while sent < frames {
        ts += rng.gen_range(1..40);
        while next_stim <= ts {
            events.push(Event::Stimulus { ts_ms: next_stim });
            next_stim += 500;
        }
        if rng.gen_bool(0.2) {
            let mut line = payload(&mut rng);
            line.retain(|&b| b != b'\n');
            if rng.gen_bool(0.3) {
                line = b"status".to_vec();
            }
            line.push(b'\n');
            events.push(Event::Bytes { ts_ms: ts, channel: CONSOLE, bytes: line });
            continue;
        }
        let mut wire = Vec::new();
        let mut push = |flag, p: &[u8]| {
            wire.extend(frame_encode(1, flag, p).unwrap());
            sent += 1;
        };
        if rng.gen_bool(0.1) {
            push(Flag::Data, b"GETP");
        }
        push(Flag::Start, &[]);
        let msg = payload(&mut rng);
        let parts = rng.gen_range(1..4).min(msg.len().max(1));
        for chunk in msg.chunks(msg.len().div_ceil(parts).max(1)) {
            push(Flag::Data, chunk);
        }
        push(Flag::Stop, &[]);
        while !wire.is_empty() {
            let n = rng.gen_range(1..=wire.len());
            events.push(Event::Bytes { ts_ms: ts, channel: PLC, bytes: wire.drain(..n).collect() });
        }
    }
    events
}

/// Runs the events through a live session; returns everything it sent
/// and the session for its log.
pub fn run(scenario: &Scenario, events: &[Event]) -> (Vec<u8>, Session) {
    let mut s = Session::new(scenario.clone()).unwrap();
    let mut out = Vec::new();
    for e in events {
        match e {
            Event::Bytes { ts_ms, channel, bytes } => {
                for em in s.on_bytes(*ts_ms, channel, bytes) {
                    out.extend(em.bytes);
                }
            }
            Event::Stimulus { ts_ms } => out.extend(s.stimulus(*ts_ms, 0)),
        }
    }
    (out, s)
}
