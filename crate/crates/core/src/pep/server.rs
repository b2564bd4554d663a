use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use crate::baseline::tcp::{ConnId, TcpConfig, TcpEvent, TcpStack};
use crate::crypto::Psk;
use crate::net::{IpPacket, PROTO_UDP};
use crate::runtime::{Micros, RngStream};
use crate::transport::{PacketHeader, ServerEndpoint, SessionEvent, TransportConfig};

use super::flowmap::FlowMap;
use super::header::{QpepHeader, QPEP_HEADER_LEN};
use super::{RESET_BAD_HEADER, RESET_DIAL_FAILED, RESET_PEER_RST};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ServerSide {
    Tunnel,
    Terrestrial,
}

type FlowKey = (u64, u64);

#[derive(Debug, Default)]
struct ServerFlow {
    header: Vec<u8>,
    conn: Option<ConnId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub flows_dialed: u64,
    pub bad_headers: u64,
    pub dial_failures: u64,
}

/// Gateway-side half: reads each stream's flow header, dials the real
/// destination and relays bytes both ways.
pub struct QpepServer {
    endpoint: ServerEndpoint,
    terr: TcpStack,
    local_ip: Ipv4Addr,
    peers: BTreeMap<u64, Ipv4Addr>,
    flows: BTreeMap<FlowKey, ServerFlow>,
    conn_flow: BTreeMap<ConnId, FlowKey>,
    tuples: BTreeMap<u64, FlowMap>,
    stats: ServerStats,
}

impl QpepServer {
    pub fn new(config: TransportConfig, terr_config: TcpConfig, psk: Psk, local_ip: Ipv4Addr, rng: RngStream) -> Self {
        Self {
            endpoint: ServerEndpoint::new(config, psk, rng.fork(1)),
            terr: TcpStack::new(terr_config, rng.fork(2)),
            local_ip,
            peers: BTreeMap::new(),
            flows: BTreeMap::new(),
            conn_flow: BTreeMap::new(),
            tuples: BTreeMap::new(),
            stats: ServerStats::default(),
        }
    }

    pub fn endpoint(&self) -> &ServerEndpoint {
        &self.endpoint
    }

    pub fn stats(&self) -> ServerStats {
        self.stats
    }

    pub fn live_flows(&self) -> usize {
        self.tuples.values().map(FlowMap::len).sum()
    }

    pub fn handle_packet(&mut self, now: Micros, side: ServerSide, pkt: &IpPacket) {
        match side {
            ServerSide::Tunnel => {
                if pkt.proto != PROTO_UDP {
                    return;
                }
                if let Ok(h) = PacketHeader::decode(&pkt.payload) {
                    self.peers.insert(h.session_id, pkt.src);
                }
                self.endpoint.handle_datagram(now, &pkt.payload);
            }
            ServerSide::Terrestrial => self.terr.handle_packet(now, pkt),
        }
        self.process();
    }

    pub fn handle_timeout(&mut self, now: Micros) {
        self.endpoint.handle_timeout(now);
        self.terr.handle_timeout(now);
        self.process();
    }

    pub fn next_timeout(&self) -> Option<Micros> {
        [self.endpoint.next_timeout(), self.terr.next_timeout()]
            .into_iter()
            .flatten()
            .min()
    }

    pub fn poll_transmit(&mut self, now: Micros) -> Option<(ServerSide, IpPacket)> {
        if let Some(p) = self.terr.poll_transmit(now) {
            return Some((ServerSide::Terrestrial, p));
        }
        while let Some(d) = self.endpoint.poll_transmit(now) {
            let Ok(h) = PacketHeader::decode(&d) else {
                continue;
            };
            if let Some(&peer) = self.peers.get(&h.session_id) {
                return Some((ServerSide::Tunnel, IpPacket::new(self.local_ip, peer, PROTO_UDP, d)));
            }
        }
        None
    }

    fn reset_stream(&mut self, key: FlowKey, code: u16) {
        if let Some(s) = self.endpoint.session_mut(key.0) {
            let _ = s.stream_reset(key.1, code);
        }
        self.forget(key);
    }

    fn forget(&mut self, key: FlowKey) {
        if let Some(f) = self.flows.remove(&key) {
            if let Some(c) = f.conn {
                self.conn_flow.remove(&c);
            }
        }
        if let Some(m) = self.tuples.get_mut(&key.0) {
            m.remove(key.1);
        }
    }

    fn process(&mut self) {
        loop {
            let mut progressed = false;
            while let Some((sid, e)) = self.endpoint.poll_event() {
                progressed = true;
                self.on_session_event(sid, e);
            }
            while let Some(e) = self.terr.poll_event() {
                progressed = true;
                self.on_terr_event(e);
            }
            if !progressed {
                break;
            }
        }
    }

    fn on_session_event(&mut self, sid: u64, e: SessionEvent) {
        match e {
            SessionEvent::StreamOpened(stream) => {
                self.flows.entry((sid, stream)).or_default();
            }
            SessionEvent::StreamReadable(stream) | SessionEvent::StreamFinished(stream) => {
                let finished = matches!(e, SessionEvent::StreamFinished(_));
                let key = (sid, stream);
                let Some(session) = self.endpoint.session_mut(sid) else {
                    return;
                };
                let mut data = session.stream_read(stream);
                let Some(flow) = self.flows.get_mut(&key) else {
                    return;
                };
                if flow.conn.is_none() {
                    let need = QPEP_HEADER_LEN - flow.header.len();
                    let take = need.min(data.len());
                    flow.header.extend(data.drain(..take));
                    if flow.header.len() < QPEP_HEADER_LEN {
                        if finished {
                            self.stats.bad_headers += 1;
                            self.reset_stream(key, RESET_BAD_HEADER);
                        }
                        return;
                    }
                    let header = match QpepHeader::decode(&flow.header) {
                        Ok(h) => h,
                        Err(_) => {
                            self.stats.bad_headers += 1;
                            self.reset_stream(key, RESET_BAD_HEADER);
                            return;
                        }
                    };
                    if self.tuples.entry(sid).or_default().insert(header.flow, stream).is_err() {
                        self.stats.bad_headers += 1;
                        if let Some(s) = self.endpoint.session_mut(sid) {
                            let _ = s.stream_reset(stream, RESET_BAD_HEADER);
                        }
                        self.flows.remove(&key);
                        return;
                    }
                    let conn = self.terr.connect(header.flow.src, header.flow.dst);
                    self.stats.flows_dialed += 1;
                    flow.conn = Some(conn);
                    self.conn_flow.insert(conn, key);
                }
                let conn = flow.conn.unwrap();
                if !data.is_empty() {
                    let _ = self.terr.send(conn, &data);
                }
                if finished {
                    self.terr.close(conn);
                    if let Some(m) = self.tuples.get_mut(&sid) {
                        m.remote_finished(stream);
                    }
                }
            }
            SessionEvent::StreamReset { stream_id, .. } => {
                let key = (sid, stream_id);
                if let Some(c) = self.flows.get(&key).and_then(|f| f.conn) {
                    self.terr.abort(c);
                }
                self.forget(key);
            }
            SessionEvent::Closed(_) => {
                let keys: Vec<FlowKey> = self.flows.range((sid, 0)..=(sid, u64::MAX)).map(|(k, _)| *k).collect();
                for key in keys {
                    if let Some(c) = self.flows.get(&key).and_then(|f| f.conn) {
                        self.terr.abort(c);
                    }
                    self.forget(key);
                }
                self.tuples.remove(&sid);
                self.peers.remove(&sid);
            }
            SessionEvent::Ready => {}
        }
    }

    fn on_terr_event(&mut self, e: TcpEvent) {
        match e {
            TcpEvent::Readable(id) => {
                let data = self.terr.read(id);
                if let Some(&(sid, stream)) = self.conn_flow.get(&id) {
                    if let Some(s) = self.endpoint.session_mut(sid) {
                        let _ = s.stream_write(stream, &data);
                    }
                }
            }
            TcpEvent::PeerClosed(id) => {
                if let Some(&(sid, stream)) = self.conn_flow.get(&id) {
                    if let Some(s) = self.endpoint.session_mut(sid) {
                        let _ = s.stream_finish(stream);
                    }
                    if let Some(m) = self.tuples.get_mut(&sid) {
                        m.local_finished(stream);
                    }
                }
            }
            TcpEvent::Reset(id, _) => {
                if let Some(&key) = self.conn_flow.get(&id) {
                    self.reset_stream(key, RESET_PEER_RST);
                }
            }
            TcpEvent::ConnectFailed(id, _) => {
                if let Some(&key) = self.conn_flow.get(&id) {
                    self.stats.dial_failures += 1;
                    self.reset_stream(key, RESET_DIAL_FAILED);
                }
            }
            TcpEvent::Closed(id) => {
                if let Some(key) = self.conn_flow.remove(&id) {
                    self.flows.remove(&key);
                }
            }
            TcpEvent::Incoming { id, .. } => self.terr.abort(id),
            TcpEvent::Connected(_) => {}
        }
    }
}
