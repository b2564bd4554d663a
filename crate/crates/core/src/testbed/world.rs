use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddrV4;

use super::apps::{ClientApp, Fetch, ServerApp};
use super::nodes::{
    terrestrial_iface, ClientHost, Gateway, Node, ServerHost, Terminal, LAN, SAT_AT_GATEWAY, SAT_AT_TERMINAL,
};
use super::workload::{Driver, Visit, Workload};
use super::{TestbedConfig, TestbedError, TransportKind, CLIENT_IP, GATEWAY_TUNNEL_IP, TERMINAL_TUNNEL_IP};
use crate::baseline::relay::SplitRelay;
use crate::baseline::tcp::TcpStack;
use crate::baseline::vpn::{VpnEndpoint, VPN_PORT};
use crate::link::{tap_contains, DeliveryOutcome, Direction, LinkEmulator, LinkStats, TapRecord};
use crate::net::{IpPacket, PROTO_UDP};
use crate::pep::{QpepClient, QpepServer};
use crate::runtime::{EventHandle, EventLoop, Micros, RngStream};
use crate::transport::PacketHeader;

const CLIENT: usize = 0;
const TERMINAL: usize = 1;
const GATEWAY: usize = 2;
const FIRST_SERVER: usize = 3;
const SAT_LINK: usize = 1;

#[derive(Debug)]
enum Ev {
    Deliver { node: usize, iface: usize, pkt: IpPacket },
    Timer(usize),
}

struct Wire {
    link: LinkEmulator,
    ends: [(usize, usize); 2],
}

/// Result of one run, with enough detail for every metric.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub transport: TransportKind,
    /// When the tunnel (if any) became usable.
    pub tunnel_ready_at: Option<Micros>,
    pub workload_started_at: Option<Micros>,
    pub finished_at: Micros,
    pub timed_out: bool,
    pub fetches: Vec<Fetch>,
    pub visits: Vec<Visit>,
    pub marker_in_tap: bool,
    pub handshake_datagrams: u64,
    pub sat_forward: LinkStats,
    pub sat_return: LinkStats,
    pub events: u64,
    pub trace_digest: u64,
}

impl RunOutcome {
    pub fn all_complete(&self) -> bool {
        !self.fetches.is_empty() && self.fetches.iter().all(Fetch::is_complete)
    }

    /// Application bytes delivered to the client.
    pub fn bytes_received(&self) -> u64 {
        self.fetches.iter().map(|f| f.received).sum()
    }

    /// Last application byte across all fetches.
    pub fn last_byte_at(&self) -> Option<Micros> {
        self.fetches.iter().filter_map(|f| f.last_byte_at).max()
    }

    /// The measured page visit: the last one.
    pub fn measured_visit(&self) -> Option<&Visit> {
        self.visits.last()
    }
}

/// A fully wired topology ready to run one workload.
pub struct Testbed {
    cfg: TestbedConfig,
    ev: EventLoop<Ev>,
    nodes: Vec<Node>,
    wires: Vec<Wire>,
    ports: BTreeMap<(usize, usize), (usize, usize)>,
    timers: Vec<Option<(Micros, EventHandle)>>,
    started: bool,
}

impl Testbed {
    pub fn new(cfg: TestbedConfig, workload: Workload) -> Result<Self, TestbedError> {
        cfg.validate()?;
        workload.validate().map_err(TestbedError::Workload)?;
        let root = RngStream::new(cfg.seed);
        let delays = workload.host_delays_ms();
        let hosts = delays.len();

        let mut marker_rng = root.fork(5);
        let marker = marker_rng.bytes();
        let client = ClientHost {
            stack: TcpStack::new(cfg.tcp.clone(), root.fork(1)),
            app: ClientApp::new(CLIENT_IP, marker),
            driver: Driver::new(workload, root.fork(6)),
        };

        let sat_leg = cfg.tcp.clone().with_initial_window(cfg.sat_leg_initial_window);
        let tunnel_rng = root.fork(3);
        let gw_rng = root.fork(4);
        let (terminal, gateway) = match cfg.transport {
            TransportKind::Plain => (Terminal::Forward(VecDeque::new()), Gateway::Forward(VecDeque::new())),
            TransportKind::PepIntegrated => (
                Terminal::Relay(SplitRelay::new(cfg.tcp.clone(), cfg.tcp.clone(), tunnel_rng)),
                Gateway::Forward(VecDeque::new()),
            ),
            TransportKind::PepDistributed => (
                Terminal::Relay(SplitRelay::new(cfg.tcp.clone(), sat_leg.clone(), tunnel_rng)),
                Gateway::Relay(SplitRelay::new(sat_leg, cfg.tcp.clone(), gw_rng)),
            ),
            TransportKind::Vpn => {
                let server = SocketAddrV4::new(GATEWAY_TUNNEL_IP, VPN_PORT);
                let mut c = VpnEndpoint::client(
                    cfg.tcp.clone(),
                    cfg.psk,
                    SocketAddrV4::new(TERMINAL_TUNNEL_IP, 40_000),
                    server,
                    tunnel_rng,
                );
                c.start();
                (
                    Terminal::Vpn(c),
                    Gateway::Vpn(VpnEndpoint::server(cfg.tcp.clone(), cfg.psk, server, gw_rng)),
                )
            }
            TransportKind::Qpep => {
                let mut c = QpepClient::new(
                    cfg.tunnel.clone(),
                    cfg.tcp.clone(),
                    cfg.psk,
                    TERMINAL_TUNNEL_IP,
                    GATEWAY_TUNNEL_IP,
                    tunnel_rng,
                );
                c.start(0);
                (
                    Terminal::Qpep(c),
                    Gateway::Qpep(QpepServer::new(
                        cfg.tunnel.clone(),
                        cfg.tcp.clone(),
                        cfg.psk,
                        GATEWAY_TUNNEL_IP,
                        gw_rng,
                    )),
                )
            }
        };

        let mut nodes = vec![
            Node::Client(client),
            Node::Terminal(terminal),
            Node::Gateway { hosts, inner: gateway },
        ];
        for h in 0..hosts {
            let mut stack = TcpStack::new(cfg.tcp.clone(), root.fork(100 + h as u64));
            ServerApp::install(&mut stack);
            nodes.push(Node::Server(ServerHost {
                stack,
                app: ServerApp::default(),
            }));
        }

        let mut profile = cfg.link.clone();
        profile.seed = root.fork(2).next_u64();
        let mut wires = vec![
            Wire {
                link: LinkEmulator::wire(cfg.lan_delay_ms, cfg.lan_rate_bps),
                ends: [(CLIENT, LAN), (TERMINAL, LAN)],
            },
            Wire {
                link: LinkEmulator::new(profile),
                ends: [(GATEWAY, SAT_AT_GATEWAY), (TERMINAL, SAT_AT_TERMINAL)],
            },
        ];
        for (h, d) in delays.iter().enumerate() {
            wires.push(Wire {
                link: LinkEmulator::wire(*d, cfg.terrestrial_rate_bps),
                ends: [(GATEWAY, terrestrial_iface(h)), (FIRST_SERVER + h, 0)],
            });
        }
        let mut ports = BTreeMap::new();
        for (i, w) in wires.iter().enumerate() {
            for (end, &(n, iface)) in w.ends.iter().enumerate() {
                ports.insert((n, iface), (i, end));
            }
        }

        let n = nodes.len();
        let mut tb = Self {
            cfg,
            ev: EventLoop::new(),
            nodes,
            wires,
            ports,
            timers: vec![None; n],
            started: false,
        };
        for i in 0..n {
            tb.flush(i);
        }
        tb.maybe_start();
        Ok(tb)
    }

    pub fn config(&self) -> &TestbedConfig {
        &self.cfg
    }

    pub fn now(&self) -> Micros {
        self.ev.now()
    }

    pub fn sat_tap(&self) -> &[TapRecord] {
        self.wires[SAT_LINK].link.tap_dump()
    }

    pub fn sat_link(&self) -> &LinkEmulator {
        &self.wires[SAT_LINK].link
    }

    pub fn client_app(&self) -> &ClientApp {
        &self.client().app
    }

    pub fn qpep_client(&self) -> Option<&QpepClient> {
        match &self.nodes[TERMINAL] {
            Node::Terminal(Terminal::Qpep(q)) => Some(q),
            _ => None,
        }
    }

    pub fn qpep_server(&self) -> Option<&QpepServer> {
        match &self.nodes[GATEWAY] {
            Node::Gateway {
                inner: Gateway::Qpep(q),
                ..
            } => Some(q),
            _ => None,
        }
    }

    pub fn vpn_client(&self) -> Option<&VpnEndpoint> {
        match &self.nodes[TERMINAL] {
            Node::Terminal(Terminal::Vpn(v)) => Some(v),
            _ => None,
        }
    }

    /// Satellite-leg connections opened by a terminal-side split relay.
    pub fn relay_onward_legs(&self) -> Option<usize> {
        match &self.nodes[TERMINAL] {
            Node::Terminal(Terminal::Relay(r)) => Some(r.onward_legs()),
            _ => None,
        }
    }

    fn client(&self) -> &ClientHost {
        match &self.nodes[CLIENT] {
            Node::Client(c) => c,
            _ => unreachable!(),
        }
    }

    fn terminal(&self) -> &Terminal {
        match &self.nodes[TERMINAL] {
            Node::Terminal(t) => t,
            _ => unreachable!(),
        }
    }

    fn maybe_start(&mut self) {
        if self.started || !self.terminal().is_ready() {
            return;
        }
        self.started = true;
        let now = self.ev.now();
        if let Node::Client(c) = &mut self.nodes[CLIENT] {
            c.start(now);
        }
        self.flush(CLIENT);
    }

    /// Moves everything a node wants to send onto its links and re-arms its timer.
    fn flush(&mut self, n: usize) {
        let now = self.ev.now();
        while let Some((iface, pkt)) = self.nodes[n].poll_output(now) {
            self.send(n, iface, pkt, now);
        }
        let want = self.nodes[n].next_timeout().map(|t| t.max(now));
        let have = self.timers[n].map(|(t, _)| t);
        if want != have {
            if let Some((_, h)) = self.timers[n].take() {
                self.ev.cancel(h);
            }
            if let Some(t) = want {
                self.timers[n] = Some((t, self.ev.schedule_at(t, Ev::Timer(n))));
            }
        }
    }

    fn send(&mut self, n: usize, iface: usize, pkt: IpPacket, now: Micros) {
        let Some(&(w, end)) = self.ports.get(&(n, iface)) else {
            return;
        };
        let wire = &mut self.wires[w];
        let dir = if end == 0 { Direction::Forward } else { Direction::Return };
        let (to, to_iface) = wire.ends[1 - end];
        if let Ok(DeliveryOutcome::Delivered { at }) = wire.link.transmit(dir, &pkt.encode(), now) {
            self.ev.schedule_at(
                at,
                Ev::Deliver {
                    node: to,
                    iface: to_iface,
                    pkt,
                },
            );
        }
    }

    fn done(&self) -> bool {
        self.started && self.client().driver.is_done()
    }

    /// Runs until the workload finishes or the deadline passes.
    pub fn run(&mut self) -> Result<RunOutcome, TestbedError> {
        let deadline = self.cfg.deadline_us;
        let mut timed_out = false;
        while !self.done() {
            match self.ev.peek_due() {
                None => break,
                Some(t) if t > deadline => {
                    timed_out = true;
                    break;
                }
                Some(_) => {}
            }
            let Some((now, e)) = self.ev.pop()? else {
                break;
            };
            let n = match e {
                Ev::Deliver { node, iface, pkt } => {
                    self.nodes[node].on_packet(now, iface, pkt);
                    node
                }
                Ev::Timer(node) => {
                    self.timers[node] = None;
                    self.nodes[node].on_timer(now);
                    node
                }
            };
            self.flush(n);
            if !self.started {
                self.maybe_start();
            }
        }
        if !self.done() && !timed_out {
            timed_out = true;
        }
        Ok(self.outcome(timed_out))
    }

    fn outcome(&self, timed_out: bool) -> RunOutcome {
        let c = self.client();
        let tap = self.sat_tap();
        RunOutcome {
            transport: self.cfg.transport,
            tunnel_ready_at: self.terminal().ready_at(),
            workload_started_at: c.driver.started_at(),
            finished_at: self.ev.now(),
            timed_out,
            fetches: c.app.fetches().to_vec(),
            visits: c.driver.visits.clone(),
            marker_in_tap: tap_contains(tap, c.app.marker()),
            handshake_datagrams: count_handshakes(tap),
            sat_forward: self.sat_link().stats(Direction::Forward),
            sat_return: self.sat_link().stats(Direction::Return),
            events: self.ev.dispatched(),
            trace_digest: self.ev.trace_digest(),
        }
    }

    /// Re-injects every tunnel datagram the terminal already received, as an
    /// on-path attacker replaying captured traffic would.
    pub fn replay_forward_tunnel_traffic(&mut self) -> Result<usize, TestbedError> {
        let now = self.ev.now();
        let replays: Vec<IpPacket> = self
            .sat_tap()
            .iter()
            .filter(|r| r.direction == Direction::Forward && r.deliver_time_us.is_some())
            .filter_map(|r| IpPacket::decode(&r.payload).ok())
            .filter(|p| p.proto == PROTO_UDP)
            .collect();
        let count = replays.len();
        for pkt in replays {
            self.nodes[TERMINAL].on_packet(now, SAT_AT_TERMINAL, pkt);
            self.flush(TERMINAL);
        }
        let until = now + 1_000_000;
        while let Some(t) = self.ev.peek_due() {
            if t > until {
                break;
            }
            let Some((now, e)) = self.ev.pop()? else {
                break;
            };
            let n = match e {
                Ev::Deliver { node, iface, pkt } => {
                    self.nodes[node].on_packet(now, iface, pkt);
                    node
                }
                Ev::Timer(node) => {
                    self.timers[node] = None;
                    self.nodes[node].on_timer(now);
                    node
                }
            };
            self.flush(n);
        }
        Ok(count)
    }

    pub fn snapshot(&self) -> RunOutcome {
        self.outcome(false)
    }
}

/// Tunnel handshake datagrams seen on the satellite hop.
pub fn count_handshakes(tap: &[TapRecord]) -> u64 {
    tap.iter()
        .filter_map(|r| IpPacket::decode(&r.payload).ok())
        .filter(|p| p.proto == PROTO_UDP)
        .filter(|p| PacketHeader::decode(&p.payload).is_ok_and(|h| h.is_handshake()))
        .count() as u64
}
