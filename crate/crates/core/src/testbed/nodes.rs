use std::collections::VecDeque;

use super::apps::{ClientApp, ServerApp};
use super::workload::Driver;
use super::host_of;
use crate::baseline::relay::{Side, SplitRelay};
use crate::baseline::tcp::TcpStack;
use crate::baseline::vpn::VpnEndpoint;
use crate::net::IpPacket;
use crate::pep::{ClientSide, QpepClient, QpepServer, ServerSide};
use crate::runtime::Micros;

pub const LAN: usize = 0;
pub const SAT_AT_TERMINAL: usize = 1;
pub const SAT_AT_GATEWAY: usize = 0;

pub fn terrestrial_iface(host: usize) -> usize {
    1 + host
}

pub struct ClientHost {
    pub stack: TcpStack,
    pub app: ClientApp,
    pub driver: Driver,
}

impl ClientHost {
    fn pump(&mut self, now: Micros) {
        while let Some(e) = self.stack.poll_event() {
            if let Some(idx) = self.app.on_event(&mut self.stack, now, e) {
                self.driver.on_settled(&mut self.app, &mut self.stack, now, idx);
            }
        }
    }

    pub fn start(&mut self, now: Micros) {
        self.driver.start(&mut self.app, &mut self.stack, now);
    }
}

pub struct ServerHost {
    pub stack: TcpStack,
    pub app: ServerApp,
}

impl ServerHost {
    fn pump(&mut self) {
        while let Some(e) = self.stack.poll_event() {
            self.app.on_event(&mut self.stack, e);
        }
    }
}

pub enum Terminal {
    Forward(VecDeque<(usize, IpPacket)>),
    Relay(SplitRelay),
    Vpn(VpnEndpoint),
    Qpep(QpepClient),
}

impl Terminal {
    pub fn is_ready(&self) -> bool {
        match self {
            Terminal::Forward(_) | Terminal::Relay(_) => true,
            Terminal::Vpn(v) => v.is_ready(),
            Terminal::Qpep(q) => q.is_ready(),
        }
    }

    pub fn ready_at(&self) -> Option<Micros> {
        match self {
            Terminal::Forward(_) | Terminal::Relay(_) => Some(0),
            Terminal::Vpn(v) => v.ready_at(),
            Terminal::Qpep(q) => q.ready_at(),
        }
    }
}

pub enum Gateway {
    Forward(VecDeque<(usize, IpPacket)>),
    Relay(SplitRelay),
    Vpn(VpnEndpoint),
    Qpep(QpepServer),
}

pub enum Node {
    Client(ClientHost),
    Server(ServerHost),
    Terminal(Terminal),
    Gateway { hosts: usize, inner: Gateway },
}

impl Node {
    pub fn on_packet(&mut self, now: Micros, iface: usize, pkt: IpPacket) {
        match self {
            Node::Client(c) => {
                c.stack.handle_packet(now, &pkt);
                c.pump(now);
            }
            Node::Server(s) => {
                s.stack.handle_packet(now, &pkt);
                s.pump();
            }
            Node::Terminal(t) => match t {
                Terminal::Forward(q) => q.push_back((if iface == LAN { SAT_AT_TERMINAL } else { LAN }, pkt)),
                Terminal::Relay(r) => {
                    let side = if iface == LAN { Side::Near } else { Side::Far };
                    r.handle_packet(now, side, &pkt);
                }
                Terminal::Vpn(v) => {
                    if iface == LAN {
                        v.send_inner(pkt);
                    } else {
                        v.handle_carrier_packet(now, &pkt);
                    }
                }
                Terminal::Qpep(q) => {
                    let side = if iface == LAN { ClientSide::Lan } else { ClientSide::Tunnel };
                    q.handle_packet(now, side, &pkt);
                }
            },
            Node::Gateway { hosts, inner } => {
                let from_sat = iface == SAT_AT_GATEWAY;
                match inner {
                    Gateway::Forward(q) => {
                        let out = if from_sat {
                            match host_of(pkt.dst, *hosts) {
                                Some(h) => terrestrial_iface(h),
                                None => return,
                            }
                        } else {
                            SAT_AT_GATEWAY
                        };
                        q.push_back((out, pkt));
                    }
                    Gateway::Relay(r) => {
                        let side = if from_sat { Side::Near } else { Side::Far };
                        r.handle_packet(now, side, &pkt);
                    }
                    Gateway::Vpn(v) => {
                        if from_sat {
                            v.handle_carrier_packet(now, &pkt);
                        } else {
                            v.send_inner(pkt);
                        }
                    }
                    Gateway::Qpep(q) => {
                        let side = if from_sat { ServerSide::Tunnel } else { ServerSide::Terrestrial };
                        q.handle_packet(now, side, &pkt);
                    }
                }
            }
        }
    }

    pub fn on_timer(&mut self, now: Micros) {
        match self {
            Node::Client(c) => {
                c.stack.handle_timeout(now);
                c.pump(now);
            }
            Node::Server(s) => {
                s.stack.handle_timeout(now);
                s.pump();
            }
            Node::Terminal(t) => match t {
                Terminal::Forward(_) => {}
                Terminal::Relay(r) => r.handle_timeout(now),
                Terminal::Vpn(v) => v.handle_timeout(now),
                Terminal::Qpep(q) => q.handle_timeout(now),
            },
            Node::Gateway { inner, .. } => match inner {
                Gateway::Forward(_) => {}
                Gateway::Relay(r) => r.handle_timeout(now),
                Gateway::Vpn(v) => v.handle_timeout(now),
                Gateway::Qpep(q) => q.handle_timeout(now),
            },
        }
    }

    pub fn next_timeout(&self) -> Option<Micros> {
        match self {
            Node::Client(c) => c.stack.next_timeout(),
            Node::Server(s) => s.stack.next_timeout(),
            Node::Terminal(t) => match t {
                Terminal::Forward(_) => None,
                Terminal::Relay(r) => r.next_timeout(),
                Terminal::Vpn(v) => v.next_timeout(),
                Terminal::Qpep(q) => q.next_timeout(),
            },
            Node::Gateway { inner, .. } => match inner {
                Gateway::Forward(_) => None,
                Gateway::Relay(r) => r.next_timeout(),
                Gateway::Vpn(v) => v.next_timeout(),
                Gateway::Qpep(q) => q.next_timeout(),
            },
        }
    }

    pub fn poll_output(&mut self, now: Micros) -> Option<(usize, IpPacket)> {
        match self {
            Node::Client(c) => c.stack.poll_transmit(now).map(|p| (LAN, p)),
            Node::Server(s) => s.stack.poll_transmit(now).map(|p| (0, p)),
            Node::Terminal(t) => match t {
                Terminal::Forward(q) => q.pop_front(),
                Terminal::Relay(r) => r.poll_transmit(now).map(|(side, p)| match side {
                    Side::Near => (LAN, p),
                    Side::Far => (SAT_AT_TERMINAL, p),
                }),
                Terminal::Vpn(v) => v
                    .poll_inner()
                    .map(|p| (LAN, p))
                    .or_else(|| v.poll_carrier(now).map(|p| (SAT_AT_TERMINAL, p))),
                Terminal::Qpep(q) => q.poll_transmit(now).map(|(side, p)| match side {
                    ClientSide::Lan => (LAN, p),
                    ClientSide::Tunnel => (SAT_AT_TERMINAL, p),
                }),
            },
            Node::Gateway { hosts, inner } => {
                let hosts = *hosts;
                let route = |p: IpPacket| host_of(p.dst, hosts).map(|h| (terrestrial_iface(h), p));
                loop {
                    let out = match inner {
                        Gateway::Forward(q) => return q.pop_front(),
                        Gateway::Relay(r) => match r.poll_transmit(now)? {
                            (Side::Near, p) => return Some((SAT_AT_GATEWAY, p)),
                            (Side::Far, p) => route(p),
                        },
                        Gateway::Vpn(v) => match v.poll_inner() {
                            Some(p) => route(p),
                            None => return v.poll_carrier(now).map(|p| (SAT_AT_GATEWAY, p)),
                        },
                        Gateway::Qpep(q) => match q.poll_transmit(now)? {
                            (ServerSide::Tunnel, p) => return Some((SAT_AT_GATEWAY, p)),
                            (ServerSide::Terrestrial, p) => route(p),
                        },
                    };
                    if out.is_some() {
                        return out;
                    }
                }
            }
        }
    }
}

