//! TCP client side of the I/O server tests.
#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use rtport_core::ioproto::{frame_encode, Channel, Flag, Frame, FrameDecoder, Framing, Scenario, Stimulus, Transport};

pub fn flagged_tcp(name: &str, id: u8) -> Channel {
    Channel {
        name: name.into(),
        id,
        transport: Transport::TcpListen,
        address: "127.0.0.1:0".into(),
        framing: Framing::Flagged,
    }
}

/// One flagged channel with a periodic `ADC {seq}` stimulus.
pub fn adc_scenario(period_ms: u64) -> Scenario {
    Scenario {
        channels: vec![flagged_tcp("adc", 1)],
        stimuli: vec![Stimulus { channel: "adc".into(), period_ms, payload: b"ADC {seq}".to_vec() }],
        ..Default::default()
    }
}

pub struct Client {
    pub stream: TcpStream,
    pub connected: Instant,
    decoder: FrameDecoder,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> Client {
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_nodelay(true).unwrap();
        Client { stream, connected: Instant::now(), decoder: FrameDecoder::default() }
    }

    /// START, one DATA per part, STOP.
    pub fn send_message(&mut self, id: u8, parts: &[&[u8]]) {
        let mut w = frame_encode(id, Flag::Start, &[]).unwrap();
        for p in parts {
            w.extend(frame_encode(id, Flag::Data, p).unwrap());
        }
        w.extend(frame_encode(id, Flag::Stop, &[]).unwrap());
        self.stream.write_all(&w).unwrap();
    }

    pub fn send_raw(&mut self, bytes: &[u8]) {
        self.stream.write_all(bytes).unwrap();
    }

    /// Frames received until `until` after connecting, with arrival times.
    pub fn frames_until(&mut self, until: Duration) -> Vec<(Duration, Frame)> {
        let mut out = Vec::new();
        let mut buf = [0u8; 4096];
        loop {
            let left = until.saturating_sub(self.connected.elapsed());
            if left.is_zero() {
                return out;
            }
            self.stream.set_read_timeout(Some(left)).unwrap();
            match self.stream.read(&mut buf) {
                Ok(0) => return out,
                Ok(n) => {
                    let at = self.connected.elapsed();
                    self.decoder.push(&buf[..n]);
                    while let Some(f) = self.decoder.next_frame() {
                        out.push((at, f.unwrap()));
                    }
                }
                Err(_) => return out,
            }
        }
    }

    /// Messages (DATA payloads between START and STOP) with the arrival
    /// time of their STOP frame.
    pub fn messages_until(&mut self, until: Duration) -> Vec<(Duration, Vec<u8>)> {
        let mut out = Vec::new();
        let mut cur: Option<Vec<u8>> = None;
        for (at, f) in self.frames_until(until) {
            match f.flag {
                Flag::Start => cur = Some(Vec::new()),
                Flag::Data => cur.get_or_insert_with(Vec::new).extend(f.payload),
                Flag::Stop => out.push((at, cur.take().unwrap_or_default())),
            }
        }
        out
    }
}
