use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::SocketAddrV4;

use super::conn::{Connection, TcpState};
use super::segment::{TcpSegmentHeader, FLAG_ACK, FLAG_RST, FLAG_SYN};
use super::{TcpConfig, TcpError, TcpEvent};
use crate::net::{IpPacket, PROTO_TCP};
use crate::runtime::{Micros, RngStream};

pub type ConnId = u64;

const EPHEMERAL_START: u16 = 49_152;

/// All TCP connections of one host or relay.
///
/// With interception on, a SYN to any address is accepted locally, which is
/// how the split relays and the tunnel client spoof the destination.
#[derive(Debug)]
pub struct TcpStack {
    config: TcpConfig,
    intercept: bool,
    listeners: BTreeSet<u16>,
    conns: BTreeMap<ConnId, Connection>,
    by_tuple: BTreeMap<(SocketAddrV4, SocketAddrV4), ConnId>,
    dirty: BTreeSet<ConnId>,
    cursor: ConnId,
    next_id: ConnId,
    next_port: u16,
    rng: RngStream,
    events: VecDeque<TcpEvent>,
    control: VecDeque<IpPacket>,
}

impl TcpStack {
    pub fn new(config: TcpConfig, rng: RngStream) -> Self {
        Self {
            config,
            intercept: false,
            listeners: BTreeSet::new(),
            conns: BTreeMap::new(),
            by_tuple: BTreeMap::new(),
            dirty: BTreeSet::new(),
            cursor: 0,
            next_id: 1,
            next_port: EPHEMERAL_START,
            rng,
            events: VecDeque::new(),
            control: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &TcpConfig {
        &self.config
    }

    pub fn set_intercept(&mut self, on: bool) {
        self.intercept = on;
    }

    pub fn listen(&mut self, port: u16) {
        self.listeners.insert(port);
    }

    pub fn ephemeral_port(&mut self) -> u16 {
        let p = self.next_port;
        self.next_port = if p == u16::MAX { EPHEMERAL_START } else { p + 1 };
        p
    }

    /// Opens a connection from `local`, which need not be one of our own addresses.
    pub fn connect(&mut self, local: SocketAddrV4, remote: SocketAddrV4) -> ConnId {
        self.connect_with(local, remote, self.config.clone())
    }

    pub fn connect_with(&mut self, local: SocketAddrV4, remote: SocketAddrV4, config: TcpConfig) -> ConnId {
        let id = self.alloc_id();
        let iss = self.rng.next_u64() as u32;
        self.insert(Connection::connecting(id, local, remote, config, iss));
        id
    }

    fn alloc_id(&mut self) -> ConnId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn insert(&mut self, c: Connection) {
        let id = c.id;
        if let Some(old) = self.by_tuple.insert((c.local, c.remote), id) {
            self.conns.remove(&old);
        }
        self.dirty.insert(id);
        self.conns.insert(id, c);
    }

    pub fn send(&mut self, id: ConnId, data: &[u8]) -> Result<(), TcpError> {
        let c = self.conns.get_mut(&id).ok_or(TcpError::UnknownConnection(id))?;
        c.write(data)?;
        self.dirty.insert(id);
        Ok(())
    }

    pub fn read(&mut self, id: ConnId) -> Vec<u8> {
        match self.conns.get_mut(&id) {
            Some(c) => {
                self.dirty.insert(id);
                c.read()
            }
            None => Vec::new(),
        }
    }

    /// Sends FIN once everything written so far has been sent.
    pub fn close(&mut self, id: ConnId) {
        if let Some(c) = self.conns.get_mut(&id) {
            c.close();
            self.dirty.insert(id);
        }
    }

    pub fn abort(&mut self, id: ConnId) {
        if let Some(c) = self.conns.get_mut(&id) {
            c.abort();
            self.dirty.insert(id);
        }
    }

    pub fn state(&self, id: ConnId) -> Option<TcpState> {
        self.conns.get(&id).map(|c| c.state)
    }

    pub fn endpoints(&self, id: ConnId) -> Option<(SocketAddrV4, SocketAddrV4)> {
        self.conns.get(&id).map(|c| (c.local, c.remote))
    }

    pub fn is_writable(&self, id: ConnId) -> bool {
        self.conns.get(&id).is_some_and(Connection::is_writable)
    }

    pub fn cwnd(&self, id: ConnId) -> Option<u64> {
        self.conns.get(&id).map(|c| c.cc.cwnd_bytes)
    }

    pub fn retransmitted_segments(&self) -> u64 {
        self.conns.values().map(|c| c.retransmitted_segments).sum()
    }

    pub fn connection_count(&self) -> usize {
        self.conns.len()
    }

    pub fn poll_event(&mut self) -> Option<TcpEvent> {
        self.events.pop_front()
    }

    pub fn handle_packet(&mut self, now: Micros, pkt: &IpPacket) {
        if pkt.proto != PROTO_TCP {
            return;
        }
        let Ok((h, payload)) = TcpSegmentHeader::decode(&pkt.payload) else {
            return;
        };
        let local = SocketAddrV4::new(pkt.dst, h.dst_port);
        let remote = SocketAddrV4::new(pkt.src, h.src_port);
        if let Some(&id) = self.by_tuple.get(&(local, remote)) {
            let c = self.conns.get_mut(&id).unwrap();
            let fresh_syn = h.has(FLAG_SYN) && !h.has(FLAG_ACK) && c.state == TcpState::Closed;
            if !fresh_syn {
                c.on_segment(now, &h, payload, &mut self.events);
                self.dirty.insert(id);
                return;
            }
        }
        if h.has(FLAG_RST) {
            return;
        }
        if h.has(FLAG_SYN) && !h.has(FLAG_ACK)
            && (self.intercept || self.listeners.contains(&h.dst_port)) {
                let id = self.alloc_id();
                let iss = self.rng.next_u64() as u32;
                let c = Connection::accepting(id, local, remote, self.config.clone(), iss, h.seq);
                self.insert(c);
                self.events.push_back(TcpEvent::Incoming { id, local, remote });
                return;
            }
        let rst = TcpSegmentHeader {
            src_port: h.dst_port,
            dst_port: h.src_port,
            seq: if h.has(FLAG_ACK) { h.ack } else { 0 },
            ack: h.seq.wrapping_add(payload.len() as u32 + u32::from(h.has(FLAG_SYN))),
            flags: FLAG_RST | FLAG_ACK,
            window: 0,
        };
        self.control
            .push_back(IpPacket::new(pkt.dst, pkt.src, PROTO_TCP, rst.encode(&[])));
    }

    pub fn handle_timeout(&mut self, now: Micros) {
        for (id, c) in self.conns.iter_mut() {
            if c.next_timeout().is_some_and(|t| t <= now) {
                c.on_timeout(now, &mut self.events);
                self.dirty.insert(*id);
            }
        }
    }

    pub fn next_timeout(&self) -> Option<Micros> {
        self.conns.values().filter_map(Connection::next_timeout).min()
    }

    /// Round-robins one segment at a time across connections with work.
    pub fn poll_transmit(&mut self, now: Micros) -> Option<IpPacket> {
        if let Some(p) = self.control.pop_front() {
            return Some(p);
        }
        while !self.dirty.is_empty() {
            let id = match self.dirty.range(self.cursor..).next() {
                Some(&id) => id,
                None => *self.dirty.iter().next().unwrap(),
            };
            let Some(c) = self.conns.get_mut(&id) else {
                self.dirty.remove(&id);
                continue;
            };
            match c.poll_segment(now) {
                Some((h, payload)) => {
                    self.cursor = id + 1;
                    let pkt = IpPacket::new(*c.local.ip(), *c.remote.ip(), PROTO_TCP, h.encode(&payload));
                    return Some(pkt);
                }
                None => {
                    self.dirty.remove(&id);
                }
            }
        }
        None
    }
}
