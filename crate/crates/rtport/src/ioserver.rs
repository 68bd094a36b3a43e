//! Transports for the scripted I/O server. Protocol state lives in one
//! shared [`Session`]; every connection (or device, or file pair) runs its
//! own loop with its own stimulus clock.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rtport_core::ioproto::{Channel, Scenario, ScenarioError, Session, Transport};

/// Poll granularity of every link loop; stimulus deadlines are met to
/// within one tick.
pub const TICK_MS: u64 = 10;
const TICK: Duration = Duration::from_millis(TICK_MS);

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("invalid scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("cannot bind `{addr}` for channel `{channel}`: {source}")]
    Bind { channel: String, addr: String, source: io::Error },
    #[error("cannot open `{path}` for channel `{channel}`: {source}")]
    Open { channel: String, path: String, source: io::Error },
    #[error("cannot open log {path}: {source}")]
    Log { path: String, source: io::Error },
}

struct State {
    session: Session,
    written: usize,
    log: Option<File>,
}

struct Shared {
    state: Mutex<State>,
    start: Instant,
}

impl Shared {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn with<R>(&self, f: impl FnOnce(&mut Session, u64) -> R) -> R {
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let r = f(&mut st.session, self.now_ms());
        // Serialise log writes under the same lock.
        let State { session, written, log } = &mut *st;
        if let Some(file) = log {
            for e in &session.log[*written..] {
                if let Err(err) = writeln!(file, "{}", e.line()) {
                    log::warn!("io log write failed: {err}");
                }
            }
        }
        *written = session.log.len();
        r
    }
}

/// A bidirectional byte pipe.
trait Link: Send {
    /// `Ok(None)` on timeout; an error ends the link.
    fn recv(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>>;
    fn send(&mut self, bytes: &[u8]) -> io::Result<()>;
}

struct TcpLink(TcpStream);

impl Link for TcpLink {
    fn recv(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        self.0.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        let mut buf = [0u8; 4096];
        match self.0.read(&mut buf) {
            Ok(0) => Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => Ok(Some(buf[..n].to_vec())),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.write_all(bytes)
    }
}

/// A device node opened as a file. Reads block on a tty, so a helper
/// thread feeds a queue; on a regular file it follows appended bytes.
struct SerialLink {
    out: File,
    rx: mpsc::Receiver<Vec<u8>>,
}

impl SerialLink {
    fn open(path: &str, stop: Arc<AtomicBool>) -> io::Result<Self> {
        let mut inp = OpenOptions::new().read(true).write(true).open(path)?;
        let out = inp.try_clone()?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut buf = [0u8; 4096];
            while !stop.load(Ordering::Relaxed) {
                match inp.read(&mut buf) {
                    Ok(0) => thread::sleep(TICK),
                    Ok(n) => {
                        if tx.send(buf[..n].to_vec()).is_err() {
                            break;
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                    Err(_) => break,
                }
            }
        });
        Ok(SerialLink { out, rx })
    }
}

impl Link for SerialLink {
    fn recv(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        match self.rx.recv_timeout(timeout) {
            Ok(b) => Ok(Some(b)),
            Err(mpsc::RecvTimeoutError::Timeout) => Ok(None),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(io::ErrorKind::UnexpectedEof.into()),
        }
    }

    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.out.write_all(bytes)
    }
}

/// Inbound file polled for appended bytes; replies appended to the
/// outbound file, which is truncated when the server starts.
struct FileLink {
    inbound: String,
    offset: u64,
    out: File,
}

impl FileLink {
    fn open(address: &str) -> io::Result<Self> {
        let (i, o) = address.split_once(',').ok_or(io::ErrorKind::InvalidInput)?;
        let out = OpenOptions::new().create(true).write(true).truncate(true).open(o)?;
        Ok(FileLink { inbound: i.into(), offset: 0, out })
    }
}

impl Link for FileLink {
    fn recv(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        let mut data = Vec::new();
        if let Ok(mut f) = File::open(&self.inbound) {
            f.seek(SeekFrom::Start(self.offset))?;
            f.read_to_end(&mut data)?;
        }
        if data.is_empty() {
            thread::sleep(timeout);
            return Ok(None);
        }
        self.offset += data.len() as u64;
        Ok(Some(data))
    }

    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.out.write_all(bytes)?;
        self.out.flush()
    }
}

/// Drives one link until it closes or the server stops. Stimulus `k` on
/// this link is due at `connected + k * period`; deadlines are absolute so
/// scheduling jitter never accumulates.
fn run_link(shared: &Shared, stop: &AtomicBool, ch: &Channel, mut link: Box<dyn Link>) {
    let connected = Instant::now();
    let stimuli: Vec<(usize, Duration)> = shared.with(|s, _| {
        s.scenario()
            .stimuli
            .iter()
            .enumerate()
            .filter(|(_, st)| st.channel == ch.name)
            .map(|(i, st)| (i, Duration::from_millis(st.period_ms)))
            .collect()
    });
    let mut next: Vec<u32> = vec![1; stimuli.len()];
    let mut pending: Vec<(Instant, Vec<u8>)> = Vec::new();
    while !stop.load(Ordering::Relaxed) {
        let now = Instant::now();
        for (k, &(idx, period)) in stimuli.iter().enumerate() {
            while connected + period * next[k] <= now {
                let bytes = shared.with(|s, ts| s.stimulus(ts, idx));
                if link.send(&bytes).is_err() {
                    return;
                }
                next[k] += 1;
            }
        }
        pending.sort_by_key(|p| p.0);
        while pending.first().is_some_and(|p| p.0 <= now) {
            let (_, bytes) = pending.remove(0);
            if link.send(&bytes).is_err() {
                return;
            }
        }
        let mut wake = now + TICK;
        for (k, &(_, period)) in stimuli.iter().enumerate() {
            wake = wake.min(connected + period * next[k]);
        }
        if let Some(p) = pending.first() {
            wake = wake.min(p.0);
        }
        match link.recv(wake.saturating_duration_since(Instant::now())) {
            Ok(Some(bytes)) => {
                let emissions = shared.with(|s, ts| s.on_bytes(ts, &ch.name, &bytes));
                for e in emissions {
                    if e.delay_ms == 0 {
                        if link.send(&e.bytes).is_err() {
                            return;
                        }
                    } else {
                        pending.push((Instant::now() + Duration::from_millis(e.delay_ms), e.bytes));
                    }
                }
            }
            Ok(None) => {}
            Err(_) => return,
        }
    }
}

/// A running server. Dropping it without [`Server::shutdown`] leaves the
/// worker threads running until the stop flag is set.
pub struct Server {
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    tcp: BTreeMap<String, SocketAddr>,
}

impl Server {
    /// Opens every channel and starts serving.
    pub fn start(scenario: Scenario) -> Result<Server, ServeError> {
        let session = Session::new(scenario.clone())?;
        let log = match &scenario.log_path {
            Some(p) => Some(File::create(p).map_err(|source| ServeError::Log { path: p.clone(), source })?),
            None => None,
        };
        let shared = Arc::new(Shared { state: Mutex::new(State { session, written: 0, log }), start: Instant::now() });
        let stop = Arc::new(AtomicBool::new(false));
        let mut server = Server { shared, stop, threads: Vec::new(), tcp: BTreeMap::new() };
        for ch in scenario.channels {
            if let Err(e) = server.open(ch) {
                server.stop.store(true, Ordering::Relaxed);
                return Err(e);
            }
        }
        Ok(server)
    }

    fn open(&mut self, ch: Channel) -> Result<(), ServeError> {
        let (shared, stop) = (self.shared.clone(), self.stop.clone());
        match ch.transport {
            Transport::TcpListen => {
                let bind = |source| ServeError::Bind { channel: ch.name.clone(), addr: ch.address.clone(), source };
                let listener = TcpListener::bind(&ch.address).map_err(bind)?;
                self.tcp.insert(ch.name.clone(), listener.local_addr().map_err(bind)?);
                listener.set_nonblocking(true).map_err(bind)?;
                self.threads.push(thread::spawn(move || accept_loop(listener, shared, stop, ch)));
            }
            Transport::SerialDevice | Transport::FileExchange => {
                let opened: io::Result<Box<dyn Link>> = if ch.transport == Transport::SerialDevice {
                    SerialLink::open(&ch.address, stop.clone()).map(|l| Box::new(l) as Box<dyn Link>)
                } else {
                    FileLink::open(&ch.address).map(|l| Box::new(l) as Box<dyn Link>)
                };
                let link = opened.map_err(|source| ServeError::Open {
                    channel: ch.name.clone(),
                    path: ch.address.clone(),
                    source,
                })?;
                self.threads.push(thread::spawn(move || run_link(&shared, &stop, &ch, link)));
            }
        }
        Ok(())
    }

    /// Bound address of a TCP channel (useful with port 0).
    pub fn tcp_addr(&self, channel: &str) -> Option<SocketAddr> {
        self.tcp.get(channel).copied()
    }

    pub fn elapsed_ms(&self) -> u64 {
        self.shared.now_ms()
    }

    /// Stops every loop and returns the session with its full log.
    pub fn shutdown(mut self) -> Session {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let st = self.shared.state.lock().unwrap_or_else(|p| p.into_inner());
        st.session.clone()
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, stop: Arc<AtomicBool>, ch: Channel) {
    let mut conns: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("channel {}: connection from {peer}", ch.name);
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let (shared, stop, ch) = (shared.clone(), stop.clone(), ch.clone());
                conns.push(thread::spawn(move || run_link(&shared, &stop, &ch, Box::new(TcpLink(stream)))));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(1)),
            Err(e) => {
                log::warn!("channel {}: accept failed: {e}", ch.name);
                thread::sleep(TICK);
            }
        }
    }
    for c in conns {
        let _ = c.join();
    }
}

/// Serves until `duration` elapses (forever when `None`) and returns the
/// log text.
pub fn serve(scenario: Scenario, duration: Option<Duration>) -> Result<String, ServeError> {
    let server = Server::start(scenario)?;
    match duration {
        Some(d) => thread::sleep(d),
        None => loop {
            thread::park();
        },
    }
    Ok(server.shutdown().log_text())
}
