use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use crate::baseline::tcp::{ConnId, TcpConfig, TcpEvent, TcpStack};
use crate::crypto::Psk;
use crate::net::{FourTuple, IpPacket, PROTO_UDP};
use crate::runtime::{Micros, RngStream, MICROS_PER_SEC};
use crate::transport::{Session, SessionEvent, TransportConfig, TransportError};

use super::flowmap::FlowMap;
use super::header::QpepHeader;
use super::RESET_PEER_RST;

/// How long an accepted connection may wait for the tunnel to come back.
pub const HOLD_DEADLINE_US: Micros = 10 * MICROS_PER_SEC;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ClientSide {
    Lan,
    Tunnel,
}

#[derive(Debug)]
struct Held {
    flow: FourTuple,
    deadline: Micros,
}

/// Counters exposed for tests and reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub sessions_started: u64,
    pub flows_opened: u64,
    pub flows_rejected: u64,
    pub held_expired: u64,
}

/// Customer-side half: intercepts TCP locally and maps each connection to a
/// stream of one long-lived tunnel session.
pub struct QpepClient {
    config: TransportConfig,
    psk: Psk,
    rng: RngStream,
    lan: TcpStack,
    local_ip: Ipv4Addr,
    server_ip: Ipv4Addr,
    session: Option<Session>,
    flows: FlowMap,
    conn_of_stream: BTreeMap<u64, ConnId>,
    stream_of_conn: BTreeMap<ConnId, u64>,
    held: BTreeMap<ConnId, Held>,
    lan_fin: BTreeMap<ConnId, bool>,
    first_ready: Option<Micros>,
    last_error: Option<TransportError>,
    stats: ClientStats,
}

impl QpepClient {
    pub fn new(
        config: TransportConfig,
        lan_config: TcpConfig,
        psk: Psk,
        local_ip: Ipv4Addr,
        server_ip: Ipv4Addr,
        rng: RngStream,
    ) -> Self {
        let mut lan = TcpStack::new(lan_config, rng.fork(1));
        lan.set_intercept(true);
        Self {
            config,
            psk,
            rng: rng.fork(2),
            lan,
            local_ip,
            server_ip,
            session: None,
            flows: FlowMap::new(),
            conn_of_stream: BTreeMap::new(),
            stream_of_conn: BTreeMap::new(),
            held: BTreeMap::new(),
            lan_fin: BTreeMap::new(),
            first_ready: None,
            last_error: None,
            stats: ClientStats::default(),
        }
    }

    /// Negotiates the session eagerly.
    pub fn start(&mut self, now: Micros) {
        if self.session.is_none() {
            let sid = self.rng.next_u64();
            let random = self.rng.bytes();
            self.session = Some(Session::client(self.config.clone(), self.psk, sid, random, now));
            self.stats.sessions_started += 1;
        }
    }

    pub fn is_ready(&self) -> bool {
        self.session.as_ref().is_some_and(Session::is_established)
    }

    pub fn ready_at(&self) -> Option<Micros> {
        self.first_ready
    }

    pub fn session(&self) -> Option<&Session> {
        self.session.as_ref()
    }

    /// Kills the current session, as if the peer had vanished.
    pub fn drop_session(&mut self) {
        if let Some(s) = self.session.as_mut() {
            s.close(0);
        }
    }

    pub fn last_error(&self) -> Option<&TransportError> {
        self.last_error.as_ref()
    }

    pub fn stats(&self) -> ClientStats {
        self.stats
    }

    pub fn lan(&self) -> &TcpStack {
        &self.lan
    }

    pub fn handle_packet(&mut self, now: Micros, side: ClientSide, pkt: &IpPacket) {
        match side {
            ClientSide::Lan => self.lan.handle_packet(now, pkt),
            ClientSide::Tunnel => {
                if pkt.proto == PROTO_UDP {
                    if let Some(s) = self.session.as_mut() {
                        s.handle_datagram(now, &pkt.payload);
                    }
                }
            }
        }
        self.process(now);
    }

    pub fn handle_timeout(&mut self, now: Micros) {
        self.lan.handle_timeout(now);
        if let Some(s) = self.session.as_mut() {
            s.handle_timeout(now);
        }
        let expired: Vec<ConnId> = self
            .held
            .iter()
            .filter(|(_, h)| h.deadline <= now)
            .map(|(&c, _)| c)
            .collect();
        for c in expired {
            self.held.remove(&c);
            self.stats.held_expired += 1;
            self.lan.abort(c);
        }
        self.process(now);
    }

    pub fn next_timeout(&self) -> Option<Micros> {
        [
            self.lan.next_timeout(),
            self.session.as_ref().and_then(Session::next_timeout),
            self.held.values().map(|h| h.deadline).min(),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    pub fn poll_transmit(&mut self, now: Micros) -> Option<(ClientSide, IpPacket)> {
        if let Some(p) = self.lan.poll_transmit(now) {
            return Some((ClientSide::Lan, p));
        }
        let d = self.session.as_mut()?.poll_transmit(now)?;
        Some((
            ClientSide::Tunnel,
            IpPacket::new(self.local_ip, self.server_ip, PROTO_UDP, d),
        ))
    }

    fn open_flow(&mut self, conn: ConnId, flow: FourTuple) {
        let s = self.session.as_mut().unwrap();
        let stream = match s.open_stream() {
            Ok(id) => id,
            Err(_) => {
                self.stats.flows_rejected += 1;
                self.lan.abort(conn);
                return;
            }
        };
        let _ = s.stream_write(stream, &QpepHeader::new(flow).encode());
        let _ = self.flows.insert(flow, stream);
        self.conn_of_stream.insert(stream, conn);
        self.stream_of_conn.insert(conn, stream);
        self.stats.flows_opened += 1;
        let early = self.lan.read(conn);
        if !early.is_empty() {
            let _ = s.stream_write(stream, &early);
        }
        if self.lan_fin.remove(&conn).unwrap_or(false) {
            let _ = s.stream_finish(stream);
            self.flows.local_finished(stream);
        }
    }

    fn process(&mut self, now: Micros) {
        loop {
            let mut progressed = false;
            while let Some(e) = self.lan.poll_event() {
                progressed = true;
                self.on_lan_event(now, e);
            }
            while let Some(e) = self.session.as_mut().and_then(Session::poll_event) {
                progressed = true;
                self.on_session_event(now, e);
            }
            if !progressed {
                break;
            }
        }
    }

    fn on_lan_event(&mut self, now: Micros, e: TcpEvent) {
        match e {
            TcpEvent::Incoming { id, local, remote } => {
                let flow = FourTuple::new(remote, local);
                if self.is_ready() {
                    self.open_flow(id, flow);
                } else {
                    if self.session.is_none() {
                        self.start(now);
                    }
                    self.held.insert(
                        id,
                        Held {
                            flow,
                            deadline: now + HOLD_DEADLINE_US,
                        },
                    );
                }
            }
            TcpEvent::Readable(id) => {
                if let Some(&stream) = self.stream_of_conn.get(&id) {
                    let data = self.lan.read(id);
                    if let Some(s) = self.session.as_mut() {
                        let _ = s.stream_write(stream, &data);
                    }
                }
            }
            TcpEvent::PeerClosed(id) => match self.stream_of_conn.get(&id) {
                Some(&stream) => {
                    if let Some(s) = self.session.as_mut() {
                        let _ = s.stream_finish(stream);
                    }
                    self.flows.local_finished(stream);
                }
                None => {
                    self.lan_fin.insert(id, true);
                }
            },
            TcpEvent::Reset(id, _) => {
                self.held.remove(&id);
                if let Some(stream) = self.stream_of_conn.remove(&id) {
                    if let Some(s) = self.session.as_mut() {
                        let _ = s.stream_reset(stream, RESET_PEER_RST);
                    }
                    self.conn_of_stream.remove(&stream);
                    self.flows.remove(stream);
                }
            }
            TcpEvent::Closed(id) => {
                if let Some(stream) = self.stream_of_conn.remove(&id) {
                    self.conn_of_stream.remove(&stream);
                    self.flows.remove(stream);
                }
            }
            TcpEvent::Connected(_) | TcpEvent::ConnectFailed(..) => {}
        }
    }

    fn on_session_event(&mut self, now: Micros, e: SessionEvent) {
        match e {
            SessionEvent::Ready => {
                self.first_ready.get_or_insert(now);
                let held = std::mem::take(&mut self.held);
                for (conn, h) in held {
                    self.open_flow(conn, h.flow);
                }
            }
            SessionEvent::StreamReadable(stream) | SessionEvent::StreamFinished(stream) => {
                let finished = matches!(e, SessionEvent::StreamFinished(_));
                let data = self.session.as_mut().unwrap().stream_read(stream);
                match self.conn_of_stream.get(&stream) {
                    Some(&conn) => {
                        if !data.is_empty() {
                            let _ = self.lan.send(conn, &data);
                        }
                        if finished {
                            self.lan.close(conn);
                            self.flows.remote_finished(stream);
                        }
                    }
                    None => {
                        let _ = self.session.as_mut().unwrap().stream_reset(stream, RESET_PEER_RST);
                    }
                }
            }
            SessionEvent::StreamOpened(_) => {}
            SessionEvent::StreamReset { stream_id, .. } => {
                if let Some(conn) = self.conn_of_stream.remove(&stream_id) {
                    self.stream_of_conn.remove(&conn);
                    self.lan.abort(conn);
                }
                self.flows.remove(stream_id);
            }
            SessionEvent::Closed(err) => {
                self.last_error = Some(err);
                self.session = None;
                for (stream, conn) in std::mem::take(&mut self.conn_of_stream) {
                    self.flows.remove(stream);
                    self.lan.abort(conn);
                }
                self.stream_of_conn.clear();
                if !self.held.is_empty() {
                    self.start(now);
                }
            }
        }
    }
}
