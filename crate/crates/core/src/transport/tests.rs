use super::*;
use crate::link::{Direction, LinkEmulator, LinkProfile, LossModel};
use crate::runtime::{serialization_us, EventHandle, EventLoop, Micros, RngStream};

const PSK: [u8; 32] = [0x42; 32];

enum Ev {
    /// Datagram arriving at the client (Forward) or server (Return).
    Arrive(Direction, Vec<u8>),
    Tick,
}

type Filter = Box<dyn FnMut(Direction, &[u8], &[Frame]) -> bool>;

/// Client session at the terminal, server endpoint at the gateway, one link between.
struct Pair {
    ev: EventLoop<Ev>,
    link: LinkEmulator,
    client: Session,
    server: ServerEndpoint,
    timer: Option<(Micros, EventHandle)>,
    /// Returns true to drop a datagram before it reaches the link.
    filter: Option<Filter>,
    client_events: Vec<(Micros, SessionEvent)>,
    server_events: Vec<(Micros, u64, SessionEvent)>,
}

fn lossless_geo() -> LinkProfile {
    LinkProfile {
        loss_model: LossModel::lossless(),
        ..LinkProfile::geo()
    }
}

impl Pair {
    fn new(cfg: TransportConfig, profile: LinkProfile) -> Self {
        Self::with_psks(cfg, profile, PSK, PSK)
    }

    fn with_psks(cfg: TransportConfig, profile: LinkProfile, cpsk: [u8; 32], spsk: [u8; 32]) -> Self {
        Self::build(cfg, profile, cpsk, spsk, None)
    }

    fn filtered(cfg: TransportConfig, filter: Filter) -> Self {
        Self::build(cfg, lossless_geo(), PSK, PSK, Some(filter))
    }

    fn build(
        cfg: TransportConfig,
        profile: LinkProfile,
        cpsk: [u8; 32],
        spsk: [u8; 32],
        filter: Option<Filter>,
    ) -> Self {
        let rng = RngStream::new(profile.seed);
        let mut client = Session::client(cfg.clone(), cpsk, 0xC0FFEE, rng.fork(1).bytes(), 0);
        client.enable_frame_trace();
        let mut p = Self {
            ev: EventLoop::new(),
            link: LinkEmulator::new(profile),
            client,
            server: ServerEndpoint::new(cfg, spsk, rng.fork(2)),
            timer: None,
            filter,
            client_events: vec![],
            server_events: vec![],
        };
        p.pump();
        p
    }

    fn send(&mut self, dir: Direction, d: Vec<u8>) {
        let now = self.ev.now();
        if let Some(f) = &mut self.filter {
            let frames: &[Frame] = match dir {
                Direction::Return => self.client.frame_trace().last().map(|(_, f)| f.as_slice()).unwrap_or(&[]),
                Direction::Forward => &[],
            };
            let is_latest = dir == Direction::Forward
                || PacketHeader::decode(&d).map(|h| h.is_handshake()).unwrap_or(true)
                || self.client.frame_trace().last().map(|(pn, _)| *pn)
                    == PacketHeader::decode(&d).ok().map(|h| h.packet_number);
            let frames = if is_latest { frames } else { &[] };
            if f(dir, &d, frames) {
                return;
            }
        }
        if let crate::link::DeliveryOutcome::Delivered { at } = self.link.transmit(dir, &d, now).unwrap() {
            self.ev.schedule_at(at, Ev::Arrive(dir, d));
        }
    }

    fn pump(&mut self) {
        let now = self.ev.now();
        loop {
            let mut progressed = false;
            while let Some(d) = self.client.poll_transmit(now) {
                self.send(Direction::Return, d);
                progressed = true;
            }
            while let Some(d) = self.server.poll_transmit(now) {
                self.send(Direction::Forward, d);
                progressed = true;
            }
            while let Some(e) = self.client.poll_event() {
                self.client_events.push((now, e));
            }
            while let Some((id, e)) = self.server.poll_event() {
                if let SessionEvent::StreamReadable(s) | SessionEvent::StreamFinished(s) = e {
                    if let Some(sess) = self.server.session_mut(id) {
                        let _ = sess.stream_read(s);
                    }
                }
                self.server_events.push((now, id, e));
            }
            if !progressed {
                break;
            }
        }
        let next = [self.client.next_timeout(), self.server.next_timeout()]
            .into_iter()
            .flatten()
            .min();
        if self.timer.map(|(t, _)| t) != next {
            if let Some((_, h)) = self.timer.take() {
                self.ev.cancel(h);
            }
            if let Some(t) = next {
                let h = self.ev.schedule_at(t, Ev::Tick);
                self.timer = Some((t, h));
            }
        }
    }

    fn step(&mut self) -> bool {
        let Some((now, ev)) = self.ev.pop().unwrap() else {
            return false;
        };
        match ev {
            Ev::Arrive(Direction::Forward, d) => self.client.handle_datagram(now, &d),
            Ev::Arrive(Direction::Return, d) => self.server.handle_datagram(now, &d),
            Ev::Tick => {
                self.timer = None;
                self.client.handle_timeout(now);
                self.server.handle_timeout(now);
            }
        }
        self.pump();
        true
    }

    fn run_until(&mut self, mut done: impl FnMut(&Self) -> bool, deadline: Micros) -> bool {
        while !done(self) {
            if self.ev.peek_due().is_none_or(|t| t > deadline) || !self.step() {
                return done(self);
            }
        }
        true
    }

    fn ready(&mut self) -> Micros {
        assert!(self.run_until(|p| p.client.is_established(), 60_000_000));
        self.client.ready_at().unwrap()
    }

    fn server_session(&mut self) -> &mut Session {
        let id = self.client.session_id();
        self.server.session_mut(id).unwrap()
    }
}

fn client_frames(p: &Pair) -> Vec<Frame> {
    p.client.frame_trace().iter().flat_map(|(_, f)| f.clone()).collect()
}

#[test]
fn handshake_takes_one_round_trip() {
    let cfg = TransportConfig::default();
    let mut p = Pair::new(cfg.clone(), lossless_geo());
    let init = serialization_us(cfg.max_packet_size_bytes, 2_000_000);
    let resp = serialization_us(HEADER_LEN + 1 + 32, 10_000_000);
    assert_eq!(p.ready(), init + 250_000 + resp + 250_000);
    assert_eq!(p.client.stats().handshake_packets_sent, 1);
}

#[test]
fn lost_init_is_retried_after_initial_pto() {
    let cfg = TransportConfig::default();
    let mut dropped = false;
    let mut p = Pair::filtered(
        cfg.clone(),
        Box::new(move |dir, d, _| {
            let hs = PacketHeader::decode(d).unwrap().is_handshake();
            if dir == Direction::Return && hs && !dropped {
                dropped = true;
                return true;
            }
            false
        }),
    );
    let init = serialization_us(cfg.max_packet_size_bytes, 2_000_000);
    let resp = serialization_us(HEADER_LEN + 33, 10_000_000);
    assert_eq!(p.ready(), cfg.pto_initial_us + init + 250_000 + resp + 250_000);
    assert_eq!(p.client.stats().handshake_packets_sent, 2);
}

#[test]
fn handshake_gives_up_after_max_retries() {
    let cfg = TransportConfig {
        pto_max_retries: 3,
        ..TransportConfig::default()
    };
    let mut p = Pair::filtered(cfg.clone(), Box::new(|_, _, _| true));
    p.run_until(|p| p.client.is_closed(), u64::MAX);
    let last = p.client_events.last().unwrap();
    assert_eq!(last.1, SessionEvent::Closed(TransportError::HandshakeTimeout));
    // 1 + 2 + 4 + 8 initial periods
    assert_eq!(last.0, 15 * cfg.pto_initial_us);
    assert_eq!(p.client.stats().handshake_packets_sent, 4);
}

#[test]
fn wrong_psk_fails_authentication() {
    let mut p = Pair::with_psks(TransportConfig::default(), lossless_geo(), PSK, [0x43; 32]);
    p.ready();
    let s = p.client.open_stream().unwrap();
    p.client.stream_write(s, b"hello").unwrap();
    p.pump();
    p.run_until(|p| p.server_events.iter().any(|e| matches!(e.2, SessionEvent::Closed(_))), 5_000_000);
    assert!(p
        .server_events
        .iter()
        .any(|e| e.2 == SessionEvent::Closed(TransportError::AuthFailure)));
}

#[test]
fn stream_ids_and_limit() {
    let cfg = TransportConfig::default();
    let mut p = Pair::new(cfg.clone(), lossless_geo());
    assert_eq!(p.client.open_stream(), Err(TransportError::NotEstablished));
    p.ready();
    assert_eq!(p.client.open_stream(), Ok(1));
    assert_eq!(p.client.open_stream(), Ok(3));
    for _ in 2..40_000 {
        p.client.open_stream().unwrap();
    }
    assert_eq!(p.client.open_stream_count(), 40_000);
    assert_eq!(p.client.open_stream(), Err(TransportError::StreamLimitExceeded));
    // nothing is sent for streams that were never written
    assert_eq!(p.client.poll_transmit(p.ev.now()), None);
}

#[test]
fn write_splits_at_frame_budget() {
    let cfg = TransportConfig::default();
    let mut p = Pair::new(cfg.clone(), lossless_geo());
    p.ready();
    let s = p.client.open_stream().unwrap();
    p.client.stream_write(s, &[7u8; 3000]).unwrap();
    p.pump();
    let frames = client_frames(&p);
    let offsets: Vec<u64> = frames
        .iter()
        .filter_map(|f| match f {
            Frame::Stream { offset, .. } => Some(*offset),
            _ => None,
        })
        .collect();
    // budget = packet - 18 header - 16 tag; frame header = type + id + offset varint + u16 length
    let budget = 1200 - 18 - 16;
    let leb = |v: u64| if v < 128 { 1 } else if v < 16_384 { 2 } else { 3 };
    let first = budget - (1 + 1 + leb(0) + 2);
    let second = budget - (1 + 1 + leb(first as u64) + 2);
    assert_eq!(offsets, vec![0, first as u64, (first + second) as u64]);
    assert_eq!(offsets, vec![0, 1161, 2321]);
}

#[test]
fn fin_without_data_and_reset_without_data() {
    let mut p = Pair::new(TransportConfig::default(), lossless_geo());
    p.ready();
    let a = p.client.open_stream().unwrap();
    p.client.stream_finish(a).unwrap();
    p.pump();
    assert_eq!(
        client_frames(&p),
        vec![Frame::Stream {
            stream_id: a,
            offset: 0,
            fin: true,
            data: vec![]
        }]
    );
    assert_eq!(p.client.stream_write(a, b"x"), Err(TransportError::StreamClosed));

    let mut p = Pair::new(TransportConfig::default(), lossless_geo());
    p.ready();
    let b = p.client.open_stream().unwrap();
    p.client.stream_reset(b, 1).unwrap();
    p.pump();
    assert_eq!(
        client_frames(&p),
        vec![Frame::ResetStream {
            stream_id: b,
            error_code: 1
        }]
    );
}

#[test]
fn tampered_and_replayed_datagrams_are_dropped() {
    let mut p = Pair::new(TransportConfig::default(), lossless_geo());
    p.ready();
    let s = p.client.open_stream().unwrap();
    p.client.stream_write(s, b"data").unwrap();
    let now = p.ev.now();
    let d = p.client.poll_transmit(now).unwrap();
    let sess = p.server_session();
    sess.handle_datagram(now, &d);
    assert_eq!(sess.stats().packets_received, 1);
    sess.handle_datagram(now, &d);
    assert_eq!(sess.stats().duplicates, 1);
    let mut bad = d.clone();
    bad[30] ^= 0x01;
    sess.handle_datagram(now, &bad);
    assert_eq!(sess.stats().auth_failures, 1);
    assert!(sess.is_established());
    assert_eq!(sess.stats().packets_received, 1);
}

/// Feeds `n` single-packet stream writes from client to server directly and
/// returns the indices (1-based) after which the server emitted an ACK.
fn ack_points(cfg: TransportConfig, n: usize) -> (Pair, Vec<usize>) {
    let mut p = Pair::new(cfg, lossless_geo());
    p.ready();
    let now = p.ev.now();
    let s = p.client.open_stream().unwrap();
    let mut acks = vec![];
    for i in 1..=n {
        p.client.stream_write(s, &[i as u8; 100]).unwrap();
        let d = p.client.poll_transmit(now).unwrap();
        let sess = p.server_session();
        sess.handle_datagram(now, &d);
        let _ = sess.stream_read(s);
        while let Some(out) = sess.poll_transmit(now) {
            let _ = out;
            acks.push(i);
        }
    }
    (p, acks)
}

#[test]
fn decimation_threshold_ten_after_start_ten() {
    let cfg = TransportConfig {
        ack_decimation_start_packet: 10,
        ack_elicitation_threshold: 10,
        initial_cwnd_packets: 50,
        ..TransportConfig::default()
    };
    let (_, acks) = ack_points(cfg, 20);
    assert_eq!(acks, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 20]);
}

#[test]
fn decimation_threshold_one_acks_everything() {
    let cfg = TransportConfig {
        ack_decimation_start_packet: 0,
        ack_elicitation_threshold: 1,
        initial_cwnd_packets: 50,
        ..TransportConfig::default()
    };
    let (_, acks) = ack_points(cfg, 15);
    assert_eq!(acks, (1..=15).collect::<Vec<_>>());
}

#[test]
fn ack_only_packets_do_not_elicit() {
    let cfg = TransportConfig {
        ack_decimation_start_packet: 0,
        ack_elicitation_threshold: 5,
        ack_delay_timeout_us: 0,
        initial_cwnd_packets: 50,
        ..TransportConfig::default()
    };
    let (mut p, acks) = ack_points(cfg, 5);
    assert_eq!(acks, vec![5]);
    // the server's ack reaches the client and makes the client owe nothing
    let now = p.ev.now();
    let s = p.client.open_stream().unwrap();
    p.client.stream_write(s, b"x").unwrap();
    let d = p.client.poll_transmit(now).unwrap();
    let sess = p.server_session();
    sess.handle_datagram(now, &d);
    let out = sess.poll_transmit(now);
    assert!(out.is_none());
    assert_eq!(sess.unacked_eliciting(), 1);
}

#[test]
fn high_threshold_without_timer_waits_for_probe() {
    let cfg = TransportConfig {
        ack_decimation_start_packet: 10,
        ack_elicitation_threshold: 200,
        ack_delay_timeout_us: 0,
        initial_cwnd_packets: 150,
        ..TransportConfig::default()
    };
    let mut p = Pair::new(cfg, lossless_geo());
    p.ready();
    let s = p.client.open_stream().unwrap();
    p.client.stream_write(s, &vec![9u8; 150 * 1100]).unwrap();
    p.pump();
    let sent_at = p.ev.now();
    // run until the client has an ack covering the last packet
    p.run_until(|p| p.client.congestion().bytes_in_flight == 0, 30_000_000);
    let server = p.server_session();
    let acks = server.stats().ack_frames_sent;
    assert_eq!(p.client.stats().pto_fired, 1);
    assert!(acks > 10);
    // ten immediate acks, then silence until the probe's PING arrives
    let probe_sent = p
        .link
        .tap_dump()
        .iter()
        .filter(|r| r.direction == Direction::Return && r.send_time_us > sent_at)
        .map(|r| r.send_time_us)
        .min()
        .unwrap();
    let late_acks: Vec<Micros> = p
        .link
        .tap_dump()
        .iter()
        .filter(|r| r.direction == Direction::Forward && r.send_time_us > sent_at + 250_000 + 11 * 4_800)
        .map(|r| r.send_time_us)
        .collect();
    assert!(late_acks.iter().all(|&t| t > probe_sent + 250_000));
    assert!(!late_acks.is_empty());
}

#[test]
fn packet_threshold_declares_three_lost() {
    let cfg = TransportConfig {
        ack_decimation_start_packet: 1000,
        initial_cwnd_packets: 50,
        ..TransportConfig::default()
    };
    let mut p = Pair::new(cfg, lossless_geo());
    p.ready();
    let now = p.ev.now();
    let s = p.client.open_stream().unwrap();
    let mut pns = vec![];
    let mut dgrams = vec![];
    for _ in 0..6 {
        p.client.stream_write(s, &[1; 50]).unwrap();
        let d = p.client.poll_transmit(now).unwrap();
        pns.push(PacketHeader::decode(&d).unwrap().packet_number);
        dgrams.push(d);
    }
    assert_eq!(pns, vec![1, 2, 3, 4, 5, 6]);
    let mut acks = vec![];
    {
        let sess = p.server_session();
        for d in &dgrams[3..] {
            sess.handle_datagram(now, d);
            while let Some(a) = sess.poll_transmit(now) {
                acks.push(a);
            }
        }
    }
    for a in acks {
        p.client.handle_datagram(now + 1, &a);
    }
    assert_eq!(p.client.stats().lost_packets, 3);
    assert!(p.client.congestion().in_recovery());
}

#[test]
fn unreachable_peer_ends_in_persistent_loss() {
    let cfg = TransportConfig {
        idle_timeout_us: u64::MAX / 4,
        ..TransportConfig::default()
    };
    let mut p = Pair::new(cfg.clone(), lossless_geo());
    let ready = p.ready();
    p.filter = Some(Box::new(|_, _, _| true));
    let s = p.client.open_stream().unwrap();
    p.client.stream_write(s, b"into the void").unwrap();
    p.pump();
    let t0 = p.ev.now();
    assert_eq!(t0, ready);
    let end = {
        let mut last = 0;
        while p.step() {
            last = p.ev.now();
        }
        last
    };
    assert!(p.ev.is_idle() || p.client.is_closed());
    let closed = p.client_events.iter().find(|e| matches!(e.1, SessionEvent::Closed(_))).unwrap();
    assert_eq!(closed.1, SessionEvent::Closed(TransportError::PersistentLoss));
    // srtt from the handshake sample s, rttvar s/2: period = s + 2s + max ack delay
    let sample = ready;
    let period = sample + 4 * (sample / 2) + 25_000;
    assert_eq!(closed.0, t0 + period * 511);
    assert_eq!(p.client.stats().pto_fired, 9);
    let _ = end;
}

fn transfer(seed: u64, loss: f64, streams: usize, size: usize) -> Pair {
    let profile = LinkProfile {
        seed,
        injected_loss: loss,
        loss_model: LossModel::lossless(),
        ..LinkProfile::geo()
    };
    let mut p = Pair::new(TransportConfig::default(), profile);
    assert!(p.run_until(|p| p.client.is_established(), 600_000_000));
    let mut ids = vec![];
    for k in 0..streams {
        let id = p.client.open_stream().unwrap();
        let data: Vec<u8> = (0..size).map(|i| (i * 7 + k) as u8).collect();
        p.client.stream_write(id, &data).unwrap();
        p.client.stream_finish(id).unwrap();
        ids.push(id);
    }
    p.pump();
    p
}

#[test]
fn every_byte_arrives_once_in_order_under_loss() {
    for seed in 0..6 {
        for &loss in &[0.0, 0.05, 0.2] {
            let mut p = transfer(seed, loss, 3, 20_000);
            // collect at the server by wrapping event handling
            let mut got: std::collections::BTreeMap<u64, Vec<u8>> = Default::default();
            let mut finished = 0;
            let sid = p.client.session_id();
            while finished < 3 {
                assert!(p.ev.now() < 900_000_000, "stalled seed {seed} loss {loss}");
                let Some((now, ev)) = p.ev.pop().unwrap() else { panic!("idle") };
                match ev {
                    Ev::Arrive(Direction::Forward, d) => p.client.handle_datagram(now, &d),
                    Ev::Arrive(Direction::Return, d) => p.server.handle_datagram(now, &d),
                    Ev::Tick => {
                        p.timer = None;
                        p.client.handle_timeout(now);
                        p.server.handle_timeout(now);
                    }
                }
                while let Some((_, e)) = p.server.poll_event() {
                    match e {
                        SessionEvent::StreamReadable(s) => {
                            let b = p.server.session_mut(sid).unwrap().stream_read(s);
                            got.entry(s).or_default().extend(b);
                        }
                        SessionEvent::StreamFinished(s) => {
                            let b = p.server.session_mut(sid).unwrap().stream_read(s);
                            got.entry(s).or_default().extend(b);
                            finished += 1;
                        }
                        _ => {}
                    }
                }
                p.pump();
            }
            for (k, id) in [1u64, 3, 5].iter().enumerate() {
                let want: Vec<u8> = (0..20_000).map(|i| (i * 7 + k) as u8).collect();
                assert_eq!(got[id], want, "seed {seed} loss {loss} stream {id}");
            }
        }
    }
}

#[test]
fn losing_one_stream_does_not_block_another() {
    let mut p = Pair::new(TransportConfig::default(), lossless_geo());
    p.ready();
    let a = p.client.open_stream().unwrap();
    let b = p.client.open_stream().unwrap();
    // drop every packet that carries stream a's data
    p.filter = Some(Box::new(move |dir, _, frames| {
        dir == Direction::Return
            && frames
                .iter()
                .any(|f| matches!(f, Frame::Stream { stream_id, .. } if *stream_id == a))
    }));
    p.client.stream_write(a, &[1u8; 30_000]).unwrap();
    p.client.stream_write(b, &[2u8; 30_000]).unwrap();
    p.client.stream_finish(b).unwrap();
    p.pump();
    let sid = p.client.session_id();
    assert!(p.run_until(
        |p| p
            .server_events
            .iter()
            .any(|e| e.1 == sid && e.2 == SessionEvent::StreamFinished(b)),
        60_000_000
    ));
    assert!(!p
        .server_events
        .iter()
        .any(|e| e.2 == SessionEvent::StreamFinished(a)));
}

#[test]
fn packet_numbers_never_repeat() {
    let mut p = transfer(3, 0.1, 2, 30_000);
    p.run_until(|_| false, 60_000_000);
    let mut last: [Option<u64>; 2] = [None, None];
    for r in p.link.tap_dump() {
        let h = PacketHeader::decode(&r.payload).unwrap();
        let i = r.direction.index();
        if let Some(prev) = last[i] {
            assert!(h.packet_number > prev);
        }
        last[i] = Some(h.packet_number);
    }
}
