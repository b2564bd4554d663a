use std::collections::{BTreeMap, VecDeque};

use super::config::TransportConfig;
use super::packet::{Handshake, PacketHeader, HEADER_LEN};
use super::session::{Session, SessionEvent};
use crate::crypto::Psk;
use crate::runtime::{Micros, RngStream};

/// Server side: accepts INITs and demultiplexes datagrams by session id.
pub struct ServerEndpoint {
    config: TransportConfig,
    psk: Psk,
    rng: RngStream,
    sessions: BTreeMap<u64, Session>,
    cursor: u64,
    events: VecDeque<(u64, SessionEvent)>,
    pub unknown_session_drops: u64,
}

impl ServerEndpoint {
    pub fn new(config: TransportConfig, psk: Psk, rng: RngStream) -> Self {
        Self {
            config,
            psk,
            rng,
            sessions: BTreeMap::new(),
            cursor: 0,
            events: VecDeque::new(),
            unknown_session_drops: 0,
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn session_ids(&self) -> Vec<u64> {
        self.sessions.keys().copied().collect()
    }

    pub fn session(&self, id: u64) -> Option<&Session> {
        self.sessions.get(&id)
    }

    pub fn session_mut(&mut self, id: u64) -> Option<&mut Session> {
        self.sessions.get_mut(&id)
    }

    pub fn handle_datagram(&mut self, now: Micros, datagram: &[u8]) {
        let Ok(header) = PacketHeader::decode(datagram) else {
            self.unknown_session_drops += 1;
            return;
        };
        if !self.sessions.contains_key(&header.session_id) {
            let init = header
                .is_handshake()
                .then(|| Handshake::decode(&datagram[HEADER_LEN..]).ok())
                .flatten();
            match init {
                Some(Handshake::Init { client_random }) => {
                    let server_random = self.rng.bytes::<32>();
                    let s = Session::server(
                        self.config.clone(),
                        self.psk,
                        header.session_id,
                        client_random,
                        server_random,
                        now,
                    );
                    self.sessions.insert(header.session_id, s);
                }
                _ => {
                    self.unknown_session_drops += 1;
                    return;
                }
            }
        }
        let s = self.sessions.get_mut(&header.session_id).unwrap();
        s.handle_datagram(now, datagram);
        self.collect(header.session_id);
    }

    fn collect(&mut self, id: u64) {
        let Some(s) = self.sessions.get_mut(&id) else {
            return;
        };
        while let Some(e) = s.poll_event() {
            self.events.push_back((id, e));
        }
        if s.is_closed() {
            self.sessions.remove(&id);
        }
    }

    pub fn handle_timeout(&mut self, now: Micros) {
        let due: Vec<u64> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.next_timeout().is_some_and(|t| t <= now))
            .map(|(&id, _)| id)
            .collect();
        for id in due {
            self.sessions.get_mut(&id).unwrap().handle_timeout(now);
            self.collect(id);
        }
    }

    pub fn next_timeout(&self) -> Option<Micros> {
        self.sessions.values().filter_map(Session::next_timeout).min()
    }

    /// Next datagram from any session, round-robin by session id.
    pub fn poll_transmit(&mut self, now: Micros) -> Option<Vec<u8>> {
        let order: Vec<u64> = self
            .sessions
            .range(self.cursor..)
            .chain(self.sessions.range(..self.cursor))
            .map(|(&id, _)| id)
            .collect();
        for id in order {
            let out = self.sessions.get_mut(&id).unwrap().poll_transmit(now);
            self.collect(id);
            if out.is_some() {
                self.cursor = id.wrapping_add(1);
                return out;
            }
        }
        None
    }

    pub fn poll_event(&mut self) -> Option<(u64, SessionEvent)> {
        let ids: Vec<u64> = self.sessions.keys().copied().collect();
        for id in ids {
            self.collect(id);
        }
        self.events.pop_front()
    }
}
