use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tcp::{ConnId, TcpConfig, TcpEvent, TcpStack};
use crate::net::IpPacket;
use crate::runtime::{Micros, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelayMode {
    /// Relay on the terminal only.
    Integrated,
    /// Relays on both sides of the satellite hop.
    Distributed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Side {
    /// Where intercepted connections arrive.
    Near,
    /// Where onward connections are dialed.
    Far,
}

/// Terminates intercepted TCP connections locally and carries each one over
/// its own onward connection, copying bytes, FINs and resets between legs.
#[derive(Debug)]
pub struct SplitRelay {
    near: TcpStack,
    far: TcpStack,
    near_to_far: BTreeMap<ConnId, ConnId>,
    far_to_near: BTreeMap<ConnId, ConnId>,
}

impl SplitRelay {
    pub fn new(near_config: TcpConfig, far_config: TcpConfig, rng: RngStream) -> Self {
        let mut near = TcpStack::new(near_config, rng.fork(1));
        near.set_intercept(true);
        Self {
            near,
            far: TcpStack::new(far_config, rng.fork(2)),
            near_to_far: BTreeMap::new(),
            far_to_near: BTreeMap::new(),
        }
    }

    pub fn onward_legs(&self) -> usize {
        self.far_to_near.len()
    }

    pub fn stack(&self, side: Side) -> &TcpStack {
        match side {
            Side::Near => &self.near,
            Side::Far => &self.far,
        }
    }

    pub fn handle_packet(&mut self, now: Micros, side: Side, pkt: &IpPacket) {
        match side {
            Side::Near => self.near.handle_packet(now, pkt),
            Side::Far => self.far.handle_packet(now, pkt),
        }
        self.process();
    }

    pub fn handle_timeout(&mut self, now: Micros) {
        self.near.handle_timeout(now);
        self.far.handle_timeout(now);
        self.process();
    }

    pub fn next_timeout(&self) -> Option<Micros> {
        [self.near.next_timeout(), self.far.next_timeout()]
            .into_iter()
            .flatten()
            .min()
    }

    pub fn poll_transmit(&mut self, now: Micros) -> Option<(Side, IpPacket)> {
        if let Some(p) = self.near.poll_transmit(now) {
            return Some((Side::Near, p));
        }
        self.far.poll_transmit(now).map(|p| (Side::Far, p))
    }

    fn process(&mut self) {
        loop {
            let mut progressed = false;
            while let Some(e) = self.near.poll_event() {
                progressed = true;
                match e {
                    TcpEvent::Incoming { id, local, remote } => {
                        let far = self.far.connect(remote, local);
                        self.near_to_far.insert(id, far);
                        self.far_to_near.insert(far, id);
                    }
                    TcpEvent::Readable(id) => {
                        let data = self.near.read(id);
                        if let Some(&f) = self.near_to_far.get(&id) {
                            let _ = self.far.send(f, &data);
                        }
                    }
                    TcpEvent::PeerClosed(id) => {
                        if let Some(&f) = self.near_to_far.get(&id) {
                            self.far.close(f);
                        }
                    }
                    TcpEvent::Reset(id, _) | TcpEvent::ConnectFailed(id, _) => {
                        if let Some(&f) = self.near_to_far.get(&id) {
                            self.far.abort(f);
                        }
                    }
                    TcpEvent::Connected(_) | TcpEvent::Closed(_) => {}
                }
            }
            while let Some(e) = self.far.poll_event() {
                progressed = true;
                match e {
                    TcpEvent::Readable(id) => {
                        let data = self.far.read(id);
                        if let Some(&n) = self.far_to_near.get(&id) {
                            let _ = self.near.send(n, &data);
                        }
                    }
                    TcpEvent::PeerClosed(id) => {
                        if let Some(&n) = self.far_to_near.get(&id) {
                            self.near.close(n);
                        }
                    }
                    TcpEvent::Reset(id, _) | TcpEvent::ConnectFailed(id, _) => {
                        if let Some(&n) = self.far_to_near.get(&id) {
                            self.near.abort(n);
                        }
                    }
                    TcpEvent::Incoming { id, .. } => self.far.abort(id),
                    TcpEvent::Connected(_) | TcpEvent::Closed(_) => {}
                }
            }
            if !progressed {
                break;
            }
        }
    }
}
