//! Flagged frame codec and the transport-free I/O session engine.
//!
//! Frame layout: `"FP"`, channel id, flag (0 DATA, 1 START, 2 STOP),
//! payload length (u16 big-endian), payload.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

pub const MAGIC: [u8; 2] = *b"FP";
pub const HEADER_LEN: usize = 6;
pub const MAX_PAYLOAD: usize = u16::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Flag {
    Data = 0,
    Start = 1,
    Stop = 2,
}

impl Flag {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Flag::Data),
            1 => Some(Flag::Start),
            2 => Some(Flag::Stop),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Flag::Data => "DATA",
            Flag::Start => "START",
            Flag::Stop => "STOP",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub channel_id: u8,
    pub flag: Flag,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("bad frame magic {0:02x} {1:02x}")]
    BadMagic(u8, u8),
    #[error("unknown frame flag {0:#04x}")]
    BadFlag(u8),
    #[error("frame declares {declared} payload bytes, {actual} present")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("frame shorter than its header")]
    Truncated,
    #[error("payload of {0} bytes does not fit a frame")]
    TooLong(usize),
}

pub fn frame_encode(channel_id: u8, flag: Flag, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(FrameError::TooLong(payload.len()));
    }
    let mut v = Vec::with_capacity(HEADER_LEN + payload.len());
    v.extend_from_slice(&MAGIC);
    v.push(channel_id);
    v.push(flag as u8);
    v.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    v.extend_from_slice(payload);
    Ok(v)
}

/// Decodes exactly one frame; trailing or missing bytes are an error.
pub fn frame_decode(bytes: &[u8]) -> Result<Frame, FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Truncated);
    }
    if bytes[..2] != MAGIC {
        return Err(FrameError::BadMagic(bytes[0], bytes[1]));
    }
    let flag = Flag::from_byte(bytes[3]).ok_or(FrameError::BadFlag(bytes[3]))?;
    let declared = u16::from_be_bytes([bytes[4], bytes[5]]) as usize;
    let actual = bytes.len() - HEADER_LEN;
    if declared != actual {
        return Err(FrameError::LengthMismatch { declared, actual });
    }
    Ok(Frame { channel_id: bytes[2], flag, payload: bytes[HEADER_LEN..].to_vec() })
}

/// Incremental frame reader for byte streams. Garbage before a magic is
/// skipped and reported.
#[derive(Debug, Clone, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_frame(&mut self) -> Option<Result<Frame, FrameError>> {
        if self.buf.len() >= 2 && self.buf[..2] != MAGIC {
            let skip = self.buf.windows(2).position(|w| w == MAGIC).unwrap_or(self.buf.len() - 1);
            let err = FrameError::BadMagic(self.buf[0], self.buf[1]);
            self.buf.drain(..skip.max(1));
            return Some(Err(err));
        }
        if self.buf.len() < HEADER_LEN {
            return None;
        }
        let len = u16::from_be_bytes([self.buf[4], self.buf[5]]) as usize;
        if self.buf.len() < HEADER_LEN + len {
            return None;
        }
        let raw: Vec<u8> = self.buf.drain(..HEADER_LEN + len).collect();
        Some(frame_decode(&raw))
    }
}

/// Newline-delimited reader for RAW channels. A trailing `\r` is dropped.
#[derive(Debug, Clone, Default)]
pub struct LineDecoder {
    buf: Vec<u8>,
}

impl LineDecoder {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_line(&mut self) -> Option<Vec<u8>> {
        let at = self.buf.iter().position(|&b| b == b'\n')?;
        let mut line: Vec<u8> = self.buf.drain(..=at).collect();
        line.pop();
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        Some(line)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    TcpListen,
    SerialDevice,
    FileExchange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framing {
    /// One message per line.
    Raw,
    Flagged,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Channel {
    pub name: String,
    pub id: u8,
    pub transport: Transport,
    /// Listen address, device path, or `inbound,outbound` file pair.
    pub address: String,
    pub framing: Framing,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stimulus {
    pub channel: String,
    pub period_ms: u64,
    /// `{seq}` is replaced by the 1-based emission number.
    pub payload: Vec<u8>,
}

impl Stimulus {
    pub fn render(&self, seq: u64) -> Vec<u8> {
        let pat = b"{seq}";
        let mut out = Vec::with_capacity(self.payload.len());
        let mut i = 0;
        while i < self.payload.len() {
            if self.payload[i..].starts_with(pat) {
                out.extend_from_slice(format!("{seq}").as_bytes());
                i += pat.len();
            } else {
                out.push(self.payload[i]);
                i += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Match {
    Prefix(Vec<u8>),
    /// Whitespace-separated token anywhere in the message.
    Token(String),
}

impl Match {
    pub fn matches(&self, msg: &[u8]) -> bool {
        match self {
            Match::Prefix(p) => msg.starts_with(p),
            Match::Token(t) => msg.split(|b| b.is_ascii_whitespace()).any(|w| w == t.as_bytes()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub channel: String,
    pub pattern: Match,
    pub reply: Vec<u8>,
    pub delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Scenario {
    pub channels: Vec<Channel>,
    pub stimuli: Vec<Stimulus>,
    pub rules: Vec<Rule>,
    pub log_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScenarioError {
    #[error("duplicate channel name `{0}`")]
    DuplicateChannel(String),
    #[error("duplicate channel id {0}")]
    DuplicateId(u8),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("stimulus on `{0}` has a period below 1 ms")]
    BadPeriod(String),
    #[error("file-exchange channel `{0}` must use flagged framing")]
    FileNeedsFlags(String),
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut names = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for c in &self.channels {
            if !names.insert(c.name.as_str()) {
                return Err(ScenarioError::DuplicateChannel(c.name.clone()));
            }
            if !ids.insert(c.id) {
                return Err(ScenarioError::DuplicateId(c.id));
            }
            if c.transport == Transport::FileExchange && c.framing != Framing::Flagged {
                return Err(ScenarioError::FileNeedsFlags(c.name.clone()));
            }
        }
        for s in &self.stimuli {
            if !names.contains(s.channel.as_str()) {
                return Err(ScenarioError::UnknownChannel(s.channel.clone()));
            }
            if s.period_ms < 1 {
                return Err(ScenarioError::BadPeriod(s.channel.clone()));
            }
        }
        for r in &self.rules {
            if !names.contains(r.channel.as_str()) {
                return Err(ScenarioError::UnknownChannel(r.channel.clone()));
            }
        }
        Ok(())
    }

    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogKind {
    /// A frame or RAW line; `flag` is `None` for RAW.
    Message { flag: Option<Flag>, payload: Vec<u8> },
    /// Protocol violation or dropped input.
    Note(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub ts_ms: u64,
    pub dir: Direction,
    pub channel: String,
    pub kind: LogKind,
}

impl LogEntry {
    /// `ts dir channel flag len hexpayload`; notes use `NOTE` as the flag.
    pub fn line(&self) -> String {
        let dir = match self.dir {
            Direction::In => "IN",
            Direction::Out => "OUT",
        };
        match &self.kind {
            LogKind::Message { flag, payload } => {
                let mut hex = String::with_capacity(payload.len() * 2);
                for b in payload {
                    let _ = write!(hex, "{b:02x}");
                }
                if hex.is_empty() {
                    hex.push('-');
                }
                format!(
                    "{} {dir} {} {} {} {hex}",
                    self.ts_ms,
                    self.channel,
                    flag.map_or("RAW", |f| f.name()),
                    payload.len()
                )
            }
            LogKind::Note(n) => format!("{} {dir} {} NOTE 0 {}", self.ts_ms, self.channel, n.replace(' ', "_")),
        }
    }
}

impl LogEntry {
    /// Inverse of [`LogEntry::line`]; note text keeps its underscores.
    pub fn parse(line: &str) -> Option<LogEntry> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return None;
        }
        let ts_ms = f[0].parse().ok()?;
        let dir = match f[1] {
            "IN" => Direction::In,
            "OUT" => Direction::Out,
            _ => return None,
        };
        let len: usize = f[4].parse().ok()?;
        let kind = match f[3] {
            "NOTE" => LogKind::Note(f[5].into()),
            tag => {
                let flag = match tag {
                    "RAW" => None,
                    "DATA" => Some(Flag::Data),
                    "START" => Some(Flag::Start),
                    "STOP" => Some(Flag::Stop),
                    _ => return None,
                };
                let payload = if f[5] == "-" { Vec::new() } else { parse_hex(f[5])? };
                if payload.len() != len {
                    return None;
                }
                LogKind::Message { flag, payload }
            }
        };
        Some(LogEntry { ts_ms, dir, channel: f[2].into(), kind })
    }

    /// Wire bytes of a logged message on `ch`.
    pub fn wire_bytes(&self, ch: &Channel) -> Option<Vec<u8>> {
        match &self.kind {
            LogKind::Message { flag: None, payload } => {
                let mut v = payload.clone();
                v.push(b'\n');
                Some(v)
            }
            LogKind::Message { flag: Some(f), payload } => frame_encode(ch.id, *f, payload).ok(),
            LogKind::Note(_) => None,
        }
    }
}

fn parse_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

/// Bytes to send after `delay_ms`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emission {
    pub delay_ms: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Default, Clone)]
struct ChannelState {
    frames: FrameDecoder,
    lines: LineDecoder,
    open: bool,
    message: Vec<u8>,
}

/// Protocol state for one scenario: decoding, bracket tracking, rule
/// matching, framing of replies and stimuli, and the frame log.
#[derive(Debug, Clone)]
pub struct Session {
    scenario: Scenario,
    state: BTreeMap<String, ChannelState>,
    stim_seq: Vec<u64>,
    pub log: Vec<LogEntry>,
}

impl Session {
    pub fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let state = scenario.channels.iter().map(|c| (c.name.clone(), ChannelState::default())).collect();
        let stim_seq = alloc::vec![0; scenario.stimuli.len()];
        Ok(Session { scenario, state, stim_seq, log: Vec::new() })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    fn note(&mut self, ts_ms: u64, dir: Direction, channel: &str, msg: String) {
        self.log.push(LogEntry { ts_ms, dir, channel: channel.into(), kind: LogKind::Note(msg) });
    }

    /// Frames a message for `channel`. FLAGGED output always carries its
    /// own START/STOP bracket.
    fn frame_out(&mut self, ts_ms: u64, channel: &str, payload: &[u8]) -> Vec<u8> {
        let Some(ch) = self.scenario.channel(channel).cloned() else { return Vec::new() };
        let mut out = Vec::new();
        match ch.framing {
            Framing::Raw => {
                out.extend_from_slice(payload);
                out.push(b'\n');
                self.log.push(LogEntry {
                    ts_ms,
                    dir: Direction::Out,
                    channel: ch.name.clone(),
                    kind: LogKind::Message { flag: None, payload: payload.to_vec() },
                });
            }
            Framing::Flagged => {
                let mut parts: Vec<(Flag, &[u8])> = alloc::vec![(Flag::Start, &[][..])];
                parts.extend(payload.chunks(MAX_PAYLOAD).map(|c| (Flag::Data, c)));
                parts.push((Flag::Stop, &[]));
                for (flag, p) in parts {
                    out.extend_from_slice(&frame_encode(ch.id, flag, p).expect("chunked to fit"));
                    self.log.push(LogEntry {
                        ts_ms,
                        dir: Direction::Out,
                        channel: ch.name.clone(),
                        kind: LogKind::Message { flag: Some(flag), payload: p.to_vec() },
                    });
                }
            }
        }
        out
    }

    fn dispatch(&mut self, ts_ms: u64, channel: &str, msg: &[u8]) -> Vec<Emission> {
        let rule = self.scenario.rules.iter().find(|r| r.channel == channel && r.pattern.matches(msg)).cloned();
        match rule {
            Some(r) => {
                let bytes = self.frame_out(ts_ms, channel, &r.reply);
                alloc::vec![Emission { delay_ms: r.delay_ms, bytes }]
            }
            None => {
                self.note(ts_ms, Direction::In, channel, format!("no rule matched; {} bytes dropped", msg.len()));
                Vec::new()
            }
        }
    }

    /// Feeds raw inbound bytes from `channel` and returns what to send back.
    pub fn on_bytes(&mut self, ts_ms: u64, channel: &str, bytes: &[u8]) -> Vec<Emission> {
        let Some(ch) = self.scenario.channel(channel).cloned() else {
            self.note(ts_ms, Direction::In, channel, "unknown channel".into());
            return Vec::new();
        };
        let mut out = Vec::new();
        match ch.framing {
            Framing::Raw => {
                let mut lines = Vec::new();
                {
                    let st = self.state.get_mut(channel).unwrap();
                    st.lines.push(bytes);
                    while let Some(l) = st.lines.next_line() {
                        lines.push(l);
                    }
                }
                for l in lines {
                    self.log.push(LogEntry {
                        ts_ms,
                        dir: Direction::In,
                        channel: ch.name.clone(),
                        kind: LogKind::Message { flag: None, payload: l.clone() },
                    });
                    out.extend(self.dispatch(ts_ms, channel, &l));
                }
            }
            Framing::Flagged => {
                let mut frames = Vec::new();
                {
                    let st = self.state.get_mut(channel).unwrap();
                    st.frames.push(bytes);
                    while let Some(f) = st.frames.next_frame() {
                        frames.push(f);
                    }
                }
                for f in frames {
                    match f {
                        Ok(f) => out.extend(self.on_frame(ts_ms, &ch, f)),
                        Err(e) => self.note(ts_ms, Direction::In, channel, format!("protocol error: {e}")),
                    }
                }
            }
        }
        out
    }

    fn on_frame(&mut self, ts_ms: u64, ch: &Channel, f: Frame) -> Vec<Emission> {
        self.log.push(LogEntry {
            ts_ms,
            dir: Direction::In,
            channel: ch.name.clone(),
            kind: LogKind::Message { flag: Some(f.flag), payload: f.payload.clone() },
        });
        if f.channel_id != ch.id {
            self.note(ts_ms, Direction::In, &ch.name, format!("protocol error: frame for channel id {}", f.channel_id));
            return Vec::new();
        }
        let st = self.state.get_mut(&ch.name).unwrap();
        match f.flag {
            Flag::Start => {
                let was_open = st.open;
                st.open = true;
                st.message.clear();
                if was_open {
                    self.note(ts_ms, Direction::In, &ch.name, "protocol error: START inside open bracket".into());
                }
                Vec::new()
            }
            Flag::Data if !st.open => {
                self.note(
                    ts_ms,
                    Direction::In,
                    &ch.name,
                    "protocol error: DATA outside START/STOP; frame rejected".into(),
                );
                Vec::new()
            }
            Flag::Data => {
                st.message.extend_from_slice(&f.payload);
                Vec::new()
            }
            Flag::Stop if !st.open => {
                self.note(ts_ms, Direction::In, &ch.name, "protocol error: STOP without START".into());
                Vec::new()
            }
            Flag::Stop => {
                st.open = false;
                let msg = core::mem::take(&mut st.message);
                self.dispatch(ts_ms, &ch.name, &msg)
            }
        }
    }

    /// Bytes for the next emission of stimulus `index`.
    pub fn stimulus(&mut self, ts_ms: u64, index: usize) -> Vec<u8> {
        self.stim_seq[index] += 1;
        let s = self.scenario.stimuli[index].clone();
        // Recorded so a replay can re-issue it at the same point.
        self.note(ts_ms, Direction::Out, &s.channel, format!("stimulus {index} seq {}", self.stim_seq[index]));
        let payload = s.render(self.stim_seq[index]);
        self.frame_out(ts_ms, &s.channel, &payload)
    }

    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for e in &self.log {
            s.push_str(&e.line());
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("log line {0} is malformed")]
    BadLine(usize),
    #[error("log line {0} names an unknown channel")]
    UnknownChannel(usize),
}

/// Outbound bytes recorded in a log next to those a fresh session
/// produces when fed the log's inbound traffic and stimulus points.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Replay {
    pub recorded: Vec<u8>,
    pub replayed: Vec<u8>,
    pub inbound_messages: usize,
}

pub fn replay(scenario: &Scenario, log: &str) -> Result<Replay, ReplayError> {
    let mut session = Session::new(scenario.clone())?;
    let mut out = Replay::default();
    for (i, line) in log.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e = LogEntry::parse(line).ok_or(ReplayError::BadLine(i + 1))?;
        let ch = scenario.channel(&e.channel).ok_or(ReplayError::UnknownChannel(i + 1))?;
        match (&e.dir, &e.kind) {
            (Direction::In, LogKind::Message { .. }) => {
                out.inbound_messages += 1;
                let bytes = e.wire_bytes(ch).ok_or(ReplayError::BadLine(i + 1))?;
                for em in session.on_bytes(e.ts_ms, &e.channel, &bytes) {
                    out.replayed.extend(em.bytes);
                }
            }
            (Direction::Out, LogKind::Message { .. }) => {
                out.recorded.extend(e.wire_bytes(ch).ok_or(ReplayError::BadLine(i + 1))?);
            }
            (Direction::Out, LogKind::Note(n)) => {
                let mut parts = n.split('_');
                if let (Some("stimulus"), Some(k)) = (parts.next(), parts.next()) {
                    let k: usize = k.parse().map_err(|_| ReplayError::BadLine(i + 1))?;
                    if k >= scenario.stimuli.len() {
                        return Err(ReplayError::BadLine(i + 1));
                    }
                    out.replayed.extend(session.stimulus(e.ts_ms, k));
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Emissions of a periodic stimulus due by `elapsed_ms`: one at every
/// positive multiple of the period.
pub fn stimuli_due(period_ms: u64, elapsed_ms: u64) -> u64 {
    elapsed_ms / period_ms.max(1)
}
