use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::{Ipv4Addr, SocketAddrV4};

use super::tcp::{ConnId, TcpConfig, TcpEvent, TcpSegmentHeader, TcpStack, FLAG_ACK, FLAG_RST};
use crate::crypto::{derive_keys, PacketCipher, Psk, TAG_LEN};
use crate::net::{FourTuple, IpPacket, PROTO_TCP};
use crate::runtime::{Micros, RngStream};

pub const VPN_PORT: u16 = 443;

const MSG_CLIENT_HELLO: u8 = 1;
const MSG_SERVER_HELLO: u8 = 2;
const MSG_CLIENT_FINISHED: u8 = 3;
const MSG_SERVER_FINISHED: u8 = 4;
const FINISHED_AAD: &[u8] = b"satpep vpn finished";
const RANDOM_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VpnRole {
    Client,
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Carrier,
    AwaitServerHello,
    AwaitClientHello,
    AwaitClientFinished,
    AwaitServerFinished,
    Ready,
    Failed,
}

struct Tunnel {
    phase: Phase,
    rx_buf: Vec<u8>,
    local_random: [u8; RANDOM_LEN],
    tx: Option<PacketCipher>,
    rx: Option<PacketCipher>,
    tx_counter: u64,
    rx_counter: u64,
}

/// Counters for the record layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VpnStats {
    pub records_sent: u64,
    pub records_received: u64,
    pub auth_failures: u64,
    pub handshake_messages: u64,
}

/// One end of a TCP-over-TCP tunnel: inner IP packets travel as
/// length-prefixed AEAD records inside a single carrier TCP connection,
/// after a fixed four-message key exchange.
pub struct VpnEndpoint {
    role: VpnRole,
    psk: Psk,
    carrier: TcpStack,
    rng: RngStream,
    local: SocketAddrV4,
    server: Option<SocketAddrV4>,
    tunnels: BTreeMap<ConnId, Tunnel>,
    routes: BTreeMap<Ipv4Addr, ConnId>,
    client_conn: Option<ConnId>,
    pending: VecDeque<IpPacket>,
    inner_out: VecDeque<IpPacket>,
    flows: BTreeSet<FourTuple>,
    ready_at: Option<Micros>,
    stats: VpnStats,
}

fn frame(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

impl VpnEndpoint {
    pub fn client(config: TcpConfig, psk: Psk, local: SocketAddrV4, server: SocketAddrV4, rng: RngStream) -> Self {
        Self::new(VpnRole::Client, config, psk, local, Some(server), rng)
    }

    pub fn server(config: TcpConfig, psk: Psk, local: SocketAddrV4, rng: RngStream) -> Self {
        let mut s = Self::new(VpnRole::Server, config, psk, local, None, rng);
        s.carrier.listen(local.port());
        s
    }

    fn new(
        role: VpnRole,
        config: TcpConfig,
        psk: Psk,
        local: SocketAddrV4,
        server: Option<SocketAddrV4>,
        rng: RngStream,
    ) -> Self {
        Self {
            role,
            psk,
            carrier: TcpStack::new(config, rng.fork(1)),
            rng: rng.fork(2),
            local,
            server,
            tunnels: BTreeMap::new(),
            routes: BTreeMap::new(),
            client_conn: None,
            pending: VecDeque::new(),
            inner_out: VecDeque::new(),
            flows: BTreeSet::new(),
            ready_at: None,
            stats: VpnStats::default(),
        }
    }

    /// Dials the carrier. Only meaningful for the client.
    pub fn start(&mut self) {
        if let (VpnRole::Client, Some(server)) = (self.role, self.server) {
            let id = self.carrier.connect(self.local, server);
            self.client_conn = Some(id);
            let t = self.fresh_tunnel(Phase::Carrier);
            self.tunnels.insert(id, t);
        }
    }

    fn fresh_tunnel(&mut self, phase: Phase) -> Tunnel {
        Tunnel {
            phase,
            rx_buf: Vec::new(),
            local_random: self.rng.bytes(),
            tx: None,
            rx: None,
            tx_counter: 1,
            rx_counter: 1,
        }
    }

    pub fn is_ready(&self) -> bool {
        self.ready_at.is_some()
    }

    pub fn ready_at(&self) -> Option<Micros> {
        self.ready_at
    }

    pub fn stats(&self) -> VpnStats {
        self.stats
    }

    pub fn carrier(&self) -> &TcpStack {
        &self.carrier
    }

    pub fn handle_carrier_packet(&mut self, now: Micros, pkt: &IpPacket) {
        self.carrier.handle_packet(now, pkt);
        self.process(now);
    }

    pub fn handle_timeout(&mut self, now: Micros) {
        self.carrier.handle_timeout(now);
        self.process(now);
    }

    pub fn next_timeout(&self) -> Option<Micros> {
        self.carrier.next_timeout()
    }

    pub fn poll_carrier(&mut self, now: Micros) -> Option<IpPacket> {
        self.carrier.poll_transmit(now)
    }

    /// Decapsulated packets to deliver on the inner side.
    pub fn poll_inner(&mut self) -> Option<IpPacket> {
        self.inner_out.pop_front()
    }

    /// Encapsulates an inner packet, or holds it until the tunnel is ready.
    pub fn send_inner(&mut self, pkt: IpPacket) {
        self.note_flow(&pkt);
        let conn = match self.role {
            VpnRole::Client => self.client_conn,
            VpnRole::Server => self.routes.get(&pkt.dst).copied(),
        };
        match conn {
            Some(c) if self.tunnels.get(&c).is_some_and(|t| t.phase == Phase::Ready) => self.seal_record(c, &pkt),
            _ => self.pending.push_back(pkt),
        }
    }

    fn note_flow(&mut self, pkt: &IpPacket) {
        if pkt.proto != PROTO_TCP {
            return;
        }
        if let Ok((h, _)) = TcpSegmentHeader::decode(&pkt.payload) {
            self.flows.insert(FourTuple::new(
                SocketAddrV4::new(pkt.src, h.src_port),
                SocketAddrV4::new(pkt.dst, h.dst_port),
            ));
        }
    }

    fn seal_record(&mut self, conn: ConnId, pkt: &IpPacket) {
        let t = self.tunnels.get_mut(&conn).unwrap();
        let ct = t.tx.as_ref().unwrap().seal(t.tx_counter, &[], &pkt.encode());
        t.tx_counter += 1;
        self.stats.records_sent += 1;
        let _ = self.carrier.send(conn, &frame(&ct));
    }

    fn send_handshake(&mut self, conn: ConnId, kind: u8, body: &[u8]) {
        let mut msg = vec![kind];
        msg.extend_from_slice(body);
        self.stats.handshake_messages += 1;
        let _ = self.carrier.send(conn, &frame(&msg));
    }

    fn install_keys(&mut self, conn: ConnId, peer_random: &[u8]) {
        let t = self.tunnels.get_mut(&conn).unwrap();
        let (cr, sr) = match self.role {
            VpnRole::Client => (t.local_random.as_slice(), peer_random),
            VpnRole::Server => (peer_random, t.local_random.as_slice()),
        };
        let salt = [cr, sr].concat();
        let c2s = PacketCipher::new(&derive_keys(&self.psk, &salt, "satpep vpn c2s"));
        let s2c = PacketCipher::new(&derive_keys(&self.psk, &salt, "satpep vpn s2c"));
        let (tx, rx) = match self.role {
            VpnRole::Client => (c2s, s2c),
            VpnRole::Server => (s2c, c2s),
        };
        t.tx = Some(tx);
        t.rx = Some(rx);
    }

    fn finished_tag(&self, conn: ConnId) -> Vec<u8> {
        self.tunnels[&conn].tx.as_ref().unwrap().seal(0, FINISHED_AAD, &[])
    }

    fn verify_finished(&self, conn: ConnId, tag: &[u8]) -> bool {
        self.tunnels[&conn].rx.as_ref().unwrap().open(0, FINISHED_AAD, tag).is_ok()
    }

    fn mark_ready(&mut self, now: Micros, conn: ConnId) {
        self.tunnels.get_mut(&conn).unwrap().phase = Phase::Ready;
        self.ready_at.get_or_insert(now);
        let pending: Vec<IpPacket> = self.pending.drain(..).collect();
        for p in pending {
            self.send_inner(p);
        }
    }

    fn process(&mut self, now: Micros) {
        while let Some(e) = self.carrier.poll_event() {
            match e {
                TcpEvent::Incoming { id, .. } => {
                    let t = self.fresh_tunnel(Phase::AwaitClientHello);
                    self.tunnels.insert(id, t);
                }
                TcpEvent::Connected(id) => {
                    if self.role == VpnRole::Client && self.client_conn == Some(id) {
                        let random = self.tunnels[&id].local_random;
                        self.tunnels.get_mut(&id).unwrap().phase = Phase::AwaitServerHello;
                        self.send_handshake(id, MSG_CLIENT_HELLO, &random);
                    }
                }
                TcpEvent::Readable(id) => {
                    let data = self.carrier.read(id);
                    if let Some(t) = self.tunnels.get_mut(&id) {
                        t.rx_buf.extend_from_slice(&data);
                        self.drain_records(now, id);
                    }
                }
                TcpEvent::Reset(id, _) | TcpEvent::ConnectFailed(id, _) | TcpEvent::PeerClosed(id) => {
                    self.carrier_lost(id);
                }
                TcpEvent::Closed(_) => {}
            }
        }
    }

    /// Inner flows cannot survive their carrier: reset every one we have seen.
    fn carrier_lost(&mut self, conn: ConnId) {
        let Some(t) = self.tunnels.get_mut(&conn) else {
            return;
        };
        if t.phase == Phase::Failed {
            return;
        }
        t.phase = Phase::Failed;
        self.carrier.abort(conn);
        for f in std::mem::take(&mut self.flows) {
            let (from, to) = match self.role {
                VpnRole::Client => (f.dst, f.src),
                VpnRole::Server => (f.src, f.dst),
            };
            let rst = TcpSegmentHeader {
                src_port: from.port(),
                dst_port: to.port(),
                seq: 0,
                ack: 0,
                flags: FLAG_RST | FLAG_ACK,
                window: 0,
            };
            self.inner_out
                .push_back(IpPacket::new(*from.ip(), *to.ip(), PROTO_TCP, rst.encode(&[])));
        }
    }

    fn drain_records(&mut self, now: Micros, conn: ConnId) {
        loop {
            let t = self.tunnels.get_mut(&conn).unwrap();
            if t.phase == Phase::Failed || t.rx_buf.len() < 4 {
                return;
            }
            let len = u32::from_be_bytes(t.rx_buf[..4].try_into().unwrap()) as usize;
            if t.rx_buf.len() < 4 + len {
                return;
            }
            let body: Vec<u8> = t.rx_buf.drain(..4 + len).skip(4).collect();
            let phase = t.phase;
            self.on_record(now, conn, phase, &body);
        }
    }

    fn on_record(&mut self, now: Micros, conn: ConnId, phase: Phase, body: &[u8]) {
        let kind = body.first().copied();
        match phase {
            Phase::AwaitClientHello if kind == Some(MSG_CLIENT_HELLO) && body.len() == 1 + RANDOM_LEN => {
                self.install_keys(conn, &body[1..]);
                let random = self.tunnels[&conn].local_random;
                self.tunnels.get_mut(&conn).unwrap().phase = Phase::AwaitClientFinished;
                self.send_handshake(conn, MSG_SERVER_HELLO, &random);
            }
            Phase::AwaitServerHello if kind == Some(MSG_SERVER_HELLO) && body.len() == 1 + RANDOM_LEN => {
                self.install_keys(conn, &body[1..]);
                let tag = self.finished_tag(conn);
                self.tunnels.get_mut(&conn).unwrap().phase = Phase::AwaitServerFinished;
                self.send_handshake(conn, MSG_CLIENT_FINISHED, &tag);
            }
            Phase::AwaitClientFinished if kind == Some(MSG_CLIENT_FINISHED) => {
                if !self.verify_finished(conn, &body[1..]) {
                    self.stats.auth_failures += 1;
                    self.carrier_lost(conn);
                    return;
                }
                let tag = self.finished_tag(conn);
                self.send_handshake(conn, MSG_SERVER_FINISHED, &tag);
                self.mark_ready(now, conn);
            }
            Phase::AwaitServerFinished if kind == Some(MSG_SERVER_FINISHED) => {
                if !self.verify_finished(conn, &body[1..]) {
                    self.stats.auth_failures += 1;
                    self.carrier_lost(conn);
                    return;
                }
                self.mark_ready(now, conn);
            }
            Phase::Ready if body.len() >= TAG_LEN => {
                let t = self.tunnels.get_mut(&conn).unwrap();
                let opened = t.rx.as_ref().unwrap().open(t.rx_counter, &[], body);
                match opened.ok().and_then(|pt| IpPacket::decode(&pt).ok()) {
                    Some(inner) => {
                        t.rx_counter += 1;
                        self.stats.records_received += 1;
                        if self.role == VpnRole::Server {
                            self.routes.insert(inner.src, conn);
                        }
                        self.note_flow(&inner);
                        self.inner_out.push_back(inner);
                    }
                    None => {
                        self.stats.auth_failures += 1;
                        self.carrier_lost(conn);
                    }
                }
            }
            _ => {
                self.carrier_lost(conn);
            }
        }
    }
}
