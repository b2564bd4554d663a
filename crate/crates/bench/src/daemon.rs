//! Standalone tunnel daemons on real sockets.
//!
//! The client accepts TCP connections on `listen`; each connection must begin
//! with a 14-byte four-tuple preamble in tunnel header format naming the real
//! destination. The preamble becomes the stream header and the rest of the
//! connection is relayed over one long-lived tunnel session to the server,
//! which dials the destination and relays back.

use std::collections::BTreeMap;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use rand_core::{OsRng, RngCore};
use thiserror::Error;

use satpep_core::crypto::{Psk, PSK_LEN};
use satpep_core::pep::{QpepHeader, QPEP_HEADER_LEN, RESET_BAD_HEADER, RESET_DIAL_FAILED, RESET_PEER_RST};
use satpep_core::runtime::wallclock::WallClock;
use satpep_core::runtime::{Micros, RngStream, MICROS_PER_SEC};
use satpep_core::transport::{PacketHeader, ServerEndpoint, Session, SessionEvent, TransportConfig};

/// Connections waiting for a tunnel are refused after this long.
pub const HOLD_DEADLINE: Duration = Duration::from_secs(10);
const MAX_BACKOFF_US: Micros = 30 * MICROS_PER_SEC;
const IDLE_SLEEP: Duration = Duration::from_millis(1);
const READ_CHUNK: usize = 16 * 1024;

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("{0}: {1}")]
    Io(String, #[source] io::Error),
    #[error("psk file must hold {PSK_LEN} raw bytes or {} hex digits", PSK_LEN * 2)]
    BadPsk,
    #[error("invalid transport config: {0}")]
    Config(String),
}

fn io_err(what: &str) -> impl FnOnce(io::Error) -> DaemonError + '_ {
    move |e| DaemonError::Io(what.to_string(), e)
}

/// Reads a key stored either as raw bytes or as hex text.
pub fn read_psk(path: &Path) -> Result<Psk, DaemonError> {
    let raw = std::fs::read(path).map_err(|e| DaemonError::Io(path.display().to_string(), e))?;
    if raw.len() == PSK_LEN {
        return Ok(raw.try_into().expect("length checked"));
    }
    let text = std::str::from_utf8(&raw).map_err(|_| DaemonError::BadPsk)?.trim();
    let bytes = hex::decode(text).map_err(|_| DaemonError::BadPsk)?;
    bytes.try_into().map_err(|_| DaemonError::BadPsk)
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub listen: SocketAddr,
    pub server: SocketAddr,
    pub psk: Psk,
    pub transport: TransportConfig,
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub listen: SocketAddr,
    pub psk: Psk,
    pub transport: TransportConfig,
    pub dial_timeout: Duration,
}

enum Pull {
    Data(Vec<u8>),
    Eof,
    Idle,
    Failed,
}

/// One relayed TCP connection with its pending output.
struct Pipe {
    sock: TcpStream,
    out: Vec<u8>,
    fin_pending: bool,
    read_done: bool,
    write_done: bool,
}

impl Pipe {
    fn new(sock: TcpStream) -> io::Result<Self> {
        sock.set_nonblocking(true)?;
        sock.set_nodelay(true)?;
        Ok(Self {
            sock,
            out: Vec::new(),
            fin_pending: false,
            read_done: false,
            write_done: false,
        })
    }

    fn read(&mut self) -> Pull {
        if self.read_done {
            return Pull::Idle;
        }
        let mut buf = vec![0u8; READ_CHUNK];
        match self.sock.read(&mut buf) {
            Ok(0) => {
                self.read_done = true;
                Pull::Eof
            }
            Ok(n) => {
                buf.truncate(n);
                Pull::Data(buf)
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::Interrupted => Pull::Idle,
            Err(_) => Pull::Failed,
        }
    }

    /// Writes what it can; false if the socket failed.
    fn flush(&mut self) -> bool {
        while !self.out.is_empty() {
            match self.sock.write(&self.out) {
                Ok(0) => return false,
                Ok(n) => {
                    self.out.drain(..n);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::Interrupted => return true,
                Err(_) => return false,
            }
        }
        if self.fin_pending && !self.write_done {
            self.write_done = true;
            let _ = self.sock.shutdown(Shutdown::Write);
        }
        true
    }

    fn is_finished(&self) -> bool {
        self.read_done && self.write_done && self.out.is_empty()
    }

    fn kill(self) {
        let _ = self.sock.shutdown(Shutdown::Both);
    }
}

fn os_rng() -> RngStream {
    RngStream::new(OsRng.next_u64())
}

struct Held {
    pipe: Pipe,
    preamble: Vec<u8>,
    since: Micros,
}

/// Client daemon state; [`run_client`] drives it.
struct Client {
    opts: ClientOptions,
    clock: WallClock,
    rng: RngStream,
    udp: UdpSocket,
    listener: TcpListener,
    session: Option<Session>,
    retry_at: Micros,
    backoff_us: Micros,
    held: Vec<Held>,
    flows: BTreeMap<u64, Pipe>,
}

impl Client {
    fn new(opts: ClientOptions) -> Result<Self, DaemonError> {
        opts.transport.validate().map_err(DaemonError::Config)?;
        let listener = TcpListener::bind(opts.listen).map_err(io_err("tcp listen"))?;
        listener.set_nonblocking(true).map_err(io_err("tcp listen"))?;
        let bind: SocketAddr = if opts.server.is_ipv4() {
            "0.0.0.0:0".parse().unwrap()
        } else {
            "[::]:0".parse().unwrap()
        };
        let udp = UdpSocket::bind(bind).map_err(io_err("udp bind"))?;
        udp.connect(opts.server).map_err(io_err("udp connect"))?;
        udp.set_nonblocking(true).map_err(io_err("udp"))?;
        Ok(Self {
            opts,
            clock: WallClock::new(),
            rng: os_rng(),
            udp,
            listener,
            session: None,
            retry_at: 0,
            backoff_us: MICROS_PER_SEC,
            held: Vec::new(),
            flows: BTreeMap::new(),
        })
    }

    fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    fn ensure_session(&mut self, now: Micros) {
        if self.session.is_some() || now < self.retry_at {
            return;
        }
        let id = self.rng.next_u64();
        let random = self.rng.bytes();
        self.session = Some(Session::client(self.opts.transport.clone(), self.opts.psk, id, random, now));
    }

    fn established(&self) -> bool {
        self.session.as_ref().is_some_and(Session::is_established)
    }

    fn step(&mut self) -> bool {
        let now = self.clock.now_us();
        let mut busy = false;
        self.ensure_session(now);

        loop {
            match self.listener.accept() {
                Ok((sock, _)) => {
                    busy = true;
                    if let Ok(pipe) = Pipe::new(sock) {
                        self.held.push(Held {
                            pipe,
                            preamble: Vec::new(),
                            since: now,
                        });
                    }
                }
                Err(_) => break,
            }
        }

        let mut buf = [0u8; 65_536];
        while let Ok(n) = self.udp.recv(&mut buf) {
            busy = true;
            if let Some(s) = self.session.as_mut() {
                s.handle_datagram(now, &buf[..n]);
            }
        }
        if let Some(s) = self.session.as_mut() {
            if s.next_timeout().is_some_and(|t| t <= now) {
                s.handle_timeout(now);
            }
        }
        busy |= self.drain_events(now);
        busy |= self.service_held(now);
        busy |= self.service_flows();

        if let Some(s) = self.session.as_mut() {
            while let Some(d) = s.poll_transmit(now) {
                busy = true;
                let _ = self.udp.send(&d);
            }
        }
        busy
    }

    fn drain_events(&mut self, now: Micros) -> bool {
        let mut busy = false;
        while let Some(e) = self.session.as_mut().and_then(Session::poll_event) {
            busy = true;
            match e {
                SessionEvent::Ready => self.backoff_us = MICROS_PER_SEC,
                SessionEvent::StreamOpened(id) => {
                    if let Some(s) = self.session.as_mut() {
                        let _ = s.stream_reset(id, RESET_BAD_HEADER);
                    }
                }
                SessionEvent::StreamReadable(id) => {
                    let data = self.session.as_mut().map(|s| s.stream_read(id)).unwrap_or_default();
                    if let Some(p) = self.flows.get_mut(&id) {
                        p.out.extend_from_slice(&data);
                    }
                }
                SessionEvent::StreamFinished(id) => {
                    if let Some(p) = self.flows.get_mut(&id) {
                        p.fin_pending = true;
                    }
                }
                SessionEvent::StreamReset { stream_id, .. } => {
                    if let Some(p) = self.flows.remove(&stream_id) {
                        p.kill();
                    }
                }
                SessionEvent::Closed(_) => {
                    self.session = None;
                    self.retry_at = now + self.backoff_us;
                    self.backoff_us = (self.backoff_us * 2).min(MAX_BACKOFF_US);
                    for (_, p) in std::mem::take(&mut self.flows) {
                        p.kill();
                    }
                    break;
                }
            }
        }
        busy
    }

    fn service_held(&mut self, now: Micros) -> bool {
        let mut busy = false;
        let mut keep = Vec::new();
        for mut h in std::mem::take(&mut self.held) {
            while h.preamble.len() < QPEP_HEADER_LEN {
                match h.pipe.read() {
                    Pull::Data(d) => {
                        busy = true;
                        h.preamble.extend_from_slice(&d);
                    }
                    Pull::Idle => break,
                    Pull::Eof | Pull::Failed => {
                        h.pipe.read_done = true;
                        break;
                    }
                }
            }
            let expired = now.saturating_sub(h.since) > HOLD_DEADLINE.as_micros() as Micros;
            if h.preamble.len() >= QPEP_HEADER_LEN && QpepHeader::decode(&h.preamble).is_err() {
                h.pipe.kill();
                continue;
            }
            if h.preamble.len() < QPEP_HEADER_LEN {
                if h.pipe.read_done || expired {
                    h.pipe.kill();
                } else {
                    keep.push(h);
                }
                continue;
            }
            if !self.established() {
                if expired {
                    h.pipe.kill();
                } else {
                    keep.push(h);
                }
                continue;
            }
            let s = self.session.as_mut().expect("established");
            match s.open_stream() {
                Ok(id) => {
                    busy = true;
                    let _ = s.stream_write(id, &h.preamble);
                    if h.pipe.read_done {
                        let _ = s.stream_finish(id);
                    }
                    self.flows.insert(id, h.pipe);
                }
                Err(_) => h.pipe.kill(),
            }
        }
        self.held = keep;
        busy
    }

    fn service_flows(&mut self) -> bool {
        let mut busy = false;
        let mut dead = Vec::new();
        for (&id, p) in self.flows.iter_mut() {
            loop {
                match p.read() {
                    Pull::Data(d) => {
                        busy = true;
                        if let Some(s) = self.session.as_mut() {
                            let _ = s.stream_write(id, &d);
                        }
                    }
                    Pull::Eof => {
                        busy = true;
                        if let Some(s) = self.session.as_mut() {
                            let _ = s.stream_finish(id);
                        }
                        break;
                    }
                    Pull::Idle => break,
                    Pull::Failed => {
                        if let Some(s) = self.session.as_mut() {
                            let _ = s.stream_reset(id, RESET_PEER_RST);
                        }
                        dead.push(id);
                        break;
                    }
                }
            }
            if !p.flush() {
                if let Some(s) = self.session.as_mut() {
                    let _ = s.stream_reset(id, RESET_PEER_RST);
                }
                dead.push(id);
            } else if p.is_finished() {
                dead.push(id);
            }
        }
        for id in dead {
            if let Some(p) = self.flows.remove(&id) {
                p.kill();
            }
        }
        busy
    }
}

/// Runs the client daemon until `stop` is set. `bound` receives the TCP listen address.
pub fn run_client(opts: ClientOptions, stop: &AtomicBool, bound: impl FnOnce(SocketAddr)) -> Result<(), DaemonError> {
    let mut c = Client::new(opts)?;
    bound(c.local_addr().map_err(io_err("tcp listen"))?);
    while !stop.load(Ordering::Relaxed) {
        if !c.step() {
            std::thread::sleep(IDLE_SLEEP);
        }
    }
    Ok(())
}

enum Leg {
    Header(Vec<u8>, bool),
    Open(Pipe),
}

/// Server daemon state; [`run_server`] drives it.
struct Server {
    opts: ServerOptions,
    clock: WallClock,
    udp: UdpSocket,
    endpoint: ServerEndpoint,
    peers: BTreeMap<u64, SocketAddr>,
    legs: BTreeMap<(u64, u64), Leg>,
}

impl Server {
    fn new(opts: ServerOptions) -> Result<Self, DaemonError> {
        opts.transport.validate().map_err(DaemonError::Config)?;
        let udp = UdpSocket::bind(opts.listen).map_err(io_err("udp bind"))?;
        udp.set_nonblocking(true).map_err(io_err("udp"))?;
        let endpoint = ServerEndpoint::new(opts.transport.clone(), opts.psk, os_rng());
        Ok(Self {
            opts,
            clock: WallClock::new(),
            udp,
            endpoint,
            peers: BTreeMap::new(),
            legs: BTreeMap::new(),
        })
    }

    fn reset(&mut self, sid: u64, id: u64, code: u16) {
        if let Some(s) = self.endpoint.session_mut(sid) {
            let _ = s.stream_reset(id, code);
        }
        if let Some(Leg::Open(p)) = self.legs.remove(&(sid, id)) {
            p.kill();
        }
    }

    fn on_bytes(&mut self, sid: u64, id: u64, data: Vec<u8>, fin: bool) {
        let key = (sid, id);
        let Some(leg) = self.legs.get_mut(&key) else {
            return;
        };
        match leg {
            Leg::Open(p) => {
                p.out.extend_from_slice(&data);
                p.fin_pending |= fin;
            }
            Leg::Header(buf, f) => {
                buf.extend_from_slice(&data);
                *f |= fin;
                if buf.len() < QPEP_HEADER_LEN {
                    if *f {
                        self.reset(sid, id, RESET_BAD_HEADER);
                    }
                    return;
                }
                let Ok(h) = QpepHeader::decode(buf) else {
                    self.reset(sid, id, RESET_BAD_HEADER);
                    return;
                };
                let rest = buf[QPEP_HEADER_LEN..].to_vec();
                let fin = *f;
                let dst = SocketAddr::V4(h.flow.dst);
                let dialed = TcpStream::connect_timeout(&dst, self.opts.dial_timeout).and_then(Pipe::new);
                match dialed {
                    Ok(mut p) => {
                        p.out = rest;
                        p.fin_pending = fin;
                        self.legs.insert(key, Leg::Open(p));
                    }
                    Err(_) => self.reset(sid, id, RESET_DIAL_FAILED),
                }
            }
        }
    }

    fn step(&mut self) -> bool {
        let now = self.clock.now_us();
        let mut busy = false;
        let mut buf = [0u8; 65_536];
        while let Ok((n, from)) = self.udp.recv_from(&mut buf) {
            busy = true;
            if let Ok(h) = PacketHeader::decode(&buf[..n]) {
                self.peers.insert(h.session_id, from);
            }
            self.endpoint.handle_datagram(now, &buf[..n]);
        }
        if self.endpoint.next_timeout().is_some_and(|t| t <= now) {
            self.endpoint.handle_timeout(now);
        }
        while let Some((sid, e)) = self.endpoint.poll_event() {
            busy = true;
            match e {
                SessionEvent::StreamOpened(id) => {
                    self.legs.insert((sid, id), Leg::Header(Vec::new(), false));
                    let data = self.endpoint.session_mut(sid).map(|s| s.stream_read(id)).unwrap_or_default();
                    self.on_bytes(sid, id, data, false);
                }
                SessionEvent::StreamReadable(id) => {
                    let data = self.endpoint.session_mut(sid).map(|s| s.stream_read(id)).unwrap_or_default();
                    self.on_bytes(sid, id, data, false);
                }
                SessionEvent::StreamFinished(id) => {
                    let data = self.endpoint.session_mut(sid).map(|s| s.stream_read(id)).unwrap_or_default();
                    self.on_bytes(sid, id, data, true);
                }
                SessionEvent::StreamReset { stream_id, .. } => {
                    if let Some(Leg::Open(p)) = self.legs.remove(&(sid, stream_id)) {
                        p.kill();
                    }
                }
                SessionEvent::Closed(_) => {
                    self.peers.remove(&sid);
                    let gone: Vec<_> = self.legs.range((sid, 0)..=(sid, u64::MAX)).map(|(k, _)| *k).collect();
                    for k in gone {
                        if let Some(Leg::Open(p)) = self.legs.remove(&k) {
                            p.kill();
                        }
                    }
                }
                SessionEvent::Ready => {}
            }
        }
        busy |= self.service_legs();
        while let Some(d) = self.endpoint.poll_transmit(now) {
            busy = true;
            let peer = PacketHeader::decode(&d).ok().and_then(|h| self.peers.get(&h.session_id).copied());
            if let Some(peer) = peer {
                let _ = self.udp.send_to(&d, peer);
            }
        }
        busy
    }

    fn service_legs(&mut self) -> bool {
        let mut busy = false;
        let mut resets = Vec::new();
        let mut done = Vec::new();
        for (&(sid, id), leg) in self.legs.iter_mut() {
            let Leg::Open(p) = leg else {
                continue;
            };
            let Some(s) = self.endpoint.session_mut(sid) else {
                done.push((sid, id));
                continue;
            };
            loop {
                match p.read() {
                    Pull::Data(d) => {
                        busy = true;
                        let _ = s.stream_write(id, &d);
                    }
                    Pull::Eof => {
                        busy = true;
                        let _ = s.stream_finish(id);
                        break;
                    }
                    Pull::Idle => break,
                    Pull::Failed => {
                        resets.push((sid, id));
                        break;
                    }
                }
            }
            if !p.flush() {
                resets.push((sid, id));
            } else if p.is_finished() {
                done.push((sid, id));
            }
        }
        for (sid, id) in resets {
            self.reset(sid, id, RESET_PEER_RST);
        }
        for k in done {
            if let Some(Leg::Open(p)) = self.legs.remove(&k) {
                p.kill();
            }
        }
        busy
    }
}

/// Runs the server daemon until `stop` is set. `bound` receives the UDP address.
pub fn run_server(opts: ServerOptions, stop: &AtomicBool, bound: impl FnOnce(SocketAddr)) -> Result<(), DaemonError> {
    let mut s = Server::new(opts)?;
    bound(s.udp.local_addr().map_err(io_err("udp bind"))?);
    while !stop.load(Ordering::Relaxed) {
        if !s.step() {
            std::thread::sleep(IDLE_SLEEP);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psk_reads_raw_and_hex() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw");
        std::fs::write(&raw, [7u8; 32]).unwrap();
        assert_eq!(read_psk(&raw).unwrap(), [7u8; 32]);
        let hexf = dir.path().join("hex");
        std::fs::write(&hexf, format!("{}\n", "ab".repeat(32))).unwrap();
        assert_eq!(read_psk(&hexf).unwrap(), [0xab; 32]);
        let short = dir.path().join("short");
        std::fs::write(&short, "abcd").unwrap();
        assert!(matches!(read_psk(&short), Err(DaemonError::BadPsk)));
    }
}
