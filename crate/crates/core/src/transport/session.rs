use std::collections::{BTreeMap, VecDeque};

use super::config::TransportConfig;
use super::frame::{stream_overhead, AckFrame, Frame};
use super::packet::{seal_packet, Handshake, PacketHeader, HEADER_LEN, RANDOM_LEN};
use super::ranges::RangeSet;
use super::stream::Stream;
use super::TransportError;
use crate::congestion::CongestionState;
use crate::crypto::{derive_keys, PacketCipher, Psk, TAG_LEN};
use crate::runtime::Micros;

const C2S_LABEL: &str = "satpep c2s";
const S2C_LABEL: &str = "satpep s2c";
const MAX_ACK_RANGES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEvent {
    /// Keys are in place; streams may be opened.
    Ready,
    StreamOpened(u64),
    StreamReadable(u64),
    /// The peer's fin was reached; everything before it is readable.
    StreamFinished(u64),
    StreamReset { stream_id: u64, error_code: u16 },
    Closed(TransportError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub packets_sent: u64,
    pub packets_received: u64,
    pub handshake_packets_sent: u64,
    pub ack_only_sent: u64,
    pub ack_frames_sent: u64,
    pub auth_failures: u64,
    pub duplicates: u64,
    pub malformed: u64,
    pub lost_packets: u64,
    pub pto_fired: u64,
    pub stream_bytes_retransmitted: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Handshaking,
    Established,
    Closing,
    Closed,
}

#[derive(Debug, Clone)]
enum Retx {
    Stream {
        id: u64,
        offset: u64,
        len: usize,
        fin: bool,
    },
    Reset {
        id: u64,
        code: u16,
    },
}

#[derive(Debug)]
struct SentPacket {
    time: Micros,
    size: u64,
    ack_eliciting: bool,
    frames: Vec<Retx>,
}

/// One end of the encrypted, multiplexed tunnel.
///
/// The session is a pure state machine: feed it datagrams and timeouts, drain
/// datagrams with [`Session::poll_transmit`] and application events with
/// [`Session::poll_event`].
pub struct Session {
    role: Role,
    config: TransportConfig,
    session_id: u64,
    state: State,
    psk: Psk,
    client_random: [u8; RANDOM_LEN],
    server_random: Option<[u8; RANDOM_LEN]>,
    tx: Option<PacketCipher>,
    rx: Option<PacketCipher>,
    opened_any: bool,
    next_pn: u64,
    ready_at: Option<Micros>,

    hs_pending: bool,
    hs_first_sent: Option<Micros>,
    hs_retries: u32,
    hs_deadline: Option<Micros>,

    sent: BTreeMap<u64, SentPacket>,
    largest_acked: Option<u64>,
    cc: CongestionState,
    pto_count: u32,
    last_eliciting_sent: Option<Micros>,
    probes_pending: u32,
    new_data_turn: bool,
    last_retx_stream: Option<u64>,

    received: RangeSet,
    largest_received: Option<(u64, Micros)>,
    total_received: u64,
    eliciting_since_ack: u64,
    ack_needed: bool,
    ack_immediate: bool,
    ack_deadline: Option<Micros>,

    streams: BTreeMap<u64, Stream>,
    next_local_stream: u64,
    next_peer_stream: u64,
    local_open: u64,
    sendable: VecDeque<u64>,
    retx: VecDeque<Retx>,
    pending_resets: VecDeque<(u64, u16)>,
    close_code: Option<u16>,

    idle_deadline: Micros,
    events: VecDeque<SessionEvent>,
    stats: SessionStats,
    frame_trace: Option<Vec<(u64, Vec<Frame>)>>,
}

impl Session {
    pub fn client(
        config: TransportConfig,
        psk: Psk,
        session_id: u64,
        client_random: [u8; RANDOM_LEN],
        now: Micros,
    ) -> Self {
        let mut s = Self::new(Role::Client, config, psk, session_id, client_random, now);
        s.hs_pending = true;
        s
    }

    /// Server side, created from a received INIT.
    pub fn server(
        config: TransportConfig,
        psk: Psk,
        session_id: u64,
        client_random: [u8; RANDOM_LEN],
        server_random: [u8; RANDOM_LEN],
        now: Micros,
    ) -> Self {
        let mut s = Self::new(Role::Server, config, psk, session_id, client_random, now);
        s.server_random = Some(server_random);
        s.install_keys();
        s.state = State::Established;
        s.hs_pending = true;
        s.ready_at = Some(now);
        s.events.push_back(SessionEvent::Ready);
        s
    }

    fn new(
        role: Role,
        config: TransportConfig,
        psk: Psk,
        session_id: u64,
        client_random: [u8; RANDOM_LEN],
        now: Micros,
    ) -> Self {
        let mtu = config.max_packet_size_bytes as u64;
        let cc = CongestionState::new(
            config.initial_cwnd_packets * mtu,
            mtu,
            2 * mtu,
            config.initial_rtt_us,
        );
        let (local, peer) = match role {
            Role::Client => (1, 0),
            Role::Server => (0, 1),
        };
        Self {
            role,
            session_id,
            state: State::Handshaking,
            psk,
            client_random,
            server_random: None,
            tx: None,
            rx: None,
            opened_any: false,
            next_pn: 0,
            ready_at: None,
            hs_pending: false,
            hs_first_sent: None,
            hs_retries: 0,
            hs_deadline: None,
            sent: BTreeMap::new(),
            largest_acked: None,
            cc,
            pto_count: 0,
            last_eliciting_sent: None,
            probes_pending: 0,
            new_data_turn: false,
            last_retx_stream: None,
            received: RangeSet::new(),
            largest_received: None,
            total_received: 0,
            eliciting_since_ack: 0,
            ack_needed: false,
            ack_immediate: false,
            ack_deadline: None,
            streams: BTreeMap::new(),
            next_local_stream: local,
            next_peer_stream: peer,
            local_open: 0,
            sendable: VecDeque::new(),
            retx: VecDeque::new(),
            pending_resets: VecDeque::new(),
            close_code: None,
            idle_deadline: now + config.idle_timeout_us,
            events: VecDeque::new(),
            stats: SessionStats::default(),
            frame_trace: None,
            config,
        }
    }

    fn install_keys(&mut self) {
        let server_random = self.server_random.expect("server random known");
        let mut salt = [0u8; 2 * RANDOM_LEN];
        salt[..RANDOM_LEN].copy_from_slice(&self.client_random);
        salt[RANDOM_LEN..].copy_from_slice(&server_random);
        let c2s = PacketCipher::new(&derive_keys(&self.psk, &salt, C2S_LABEL));
        let s2c = PacketCipher::new(&derive_keys(&self.psk, &salt, S2C_LABEL));
        let (tx, rx) = match self.role {
            Role::Client => (c2s, s2c),
            Role::Server => (s2c, c2s),
        };
        self.tx = Some(tx);
        self.rx = Some(rx);
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn config(&self) -> &TransportConfig {
        &self.config
    }

    pub fn client_random(&self) -> [u8; RANDOM_LEN] {
        self.client_random
    }

    pub fn is_established(&self) -> bool {
        self.state == State::Established
    }

    pub fn is_closed(&self) -> bool {
        self.state == State::Closed
    }

    /// Time the session became usable at this end.
    pub fn ready_at(&self) -> Option<Micros> {
        self.ready_at
    }

    pub fn stats(&self) -> SessionStats {
        self.stats
    }

    pub fn congestion(&self) -> &CongestionState {
        &self.cc
    }

    /// Ack-eliciting packets received since the last ACK went out.
    pub fn unacked_eliciting(&self) -> u64 {
        self.eliciting_since_ack
    }

    pub fn open_stream_count(&self) -> u64 {
        self.local_open
    }

    /// Records every protected packet's frames as sent, for inspection.
    pub fn enable_frame_trace(&mut self) {
        self.frame_trace = Some(Vec::new());
    }

    pub fn frame_trace(&self) -> &[(u64, Vec<Frame>)] {
        self.frame_trace.as_deref().unwrap_or(&[])
    }

    pub fn poll_event(&mut self) -> Option<SessionEvent> {
        self.events.pop_front()
    }

    fn fail(&mut self, err: TransportError) {
        if self.state == State::Closed {
            return;
        }
        self.state = State::Closed;
        self.streams.clear();
        self.sendable.clear();
        self.retx.clear();
        self.pending_resets.clear();
        self.sent.clear();
        self.events.push_back(SessionEvent::Closed(err));
    }

    /// Sends CLOSE and shuts down.
    pub fn close(&mut self, error_code: u16) {
        match self.state {
            State::Established => {
                self.close_code = Some(error_code);
                self.state = State::Closing;
            }
            State::Handshaking => self.fail(TransportError::LocallyClosed),
            _ => {}
        }
    }

    // ---- streams ---------------------------------------------------------

    pub fn open_stream(&mut self) -> Result<u64, TransportError> {
        if self.state != State::Established {
            return Err(TransportError::NotEstablished);
        }
        if self.local_open >= self.config.max_concurrent_streams {
            return Err(TransportError::StreamLimitExceeded);
        }
        let id = self.next_local_stream;
        self.next_local_stream += 2;
        self.local_open += 1;
        self.streams.insert(id, Stream::default());
        Ok(id)
    }

    fn is_local(&self, id: u64) -> bool {
        let client_owned = id % 2 == 1;
        client_owned == (self.role == Role::Client)
    }

    fn stream_for_write(&mut self, id: u64) -> Result<&mut Stream, TransportError> {
        match self.streams.get_mut(&id) {
            Some(s) if s.send.fin => Err(TransportError::StreamClosed),
            Some(s) => Ok(s),
            None => Err(TransportError::UnknownStream(id)),
        }
    }

    pub fn stream_write(&mut self, id: u64, data: &[u8]) -> Result<(), TransportError> {
        if data.is_empty() {
            self.stream_for_write(id)?;
            return Ok(());
        }
        let s = self.stream_for_write(id)?;
        s.send.data.extend_from_slice(data);
        if !s.send.queued {
            s.send.queued = true;
            self.sendable.push_back(id);
        }
        Ok(())
    }

    pub fn stream_finish(&mut self, id: u64) -> Result<(), TransportError> {
        let s = self.stream_for_write(id)?;
        s.send.fin = true;
        if !s.send.queued {
            s.send.queued = true;
            self.sendable.push_back(id);
        }
        Ok(())
    }

    /// Abandons the stream in both directions and tells the peer.
    pub fn stream_reset(&mut self, id: u64, error_code: u16) -> Result<(), TransportError> {
        if self.streams.remove(&id).is_none() {
            return Err(TransportError::UnknownStream(id));
        }
        self.on_stream_removed(id);
        self.pending_resets.push_back((id, error_code));
        Ok(())
    }

    /// Drains all bytes readable so far.
    pub fn stream_read(&mut self, id: u64) -> Vec<u8> {
        let Some(s) = self.streams.get_mut(&id) else {
            return Vec::new();
        };
        let out: Vec<u8> = s.recv.readable.drain(..).collect();
        self.maybe_retire(id);
        out
    }

    pub fn stream_exists(&self, id: u64) -> bool {
        self.streams.contains_key(&id)
    }

    fn on_stream_removed(&mut self, id: u64) {
        if self.is_local(id) {
            self.local_open -= 1;
        }
        self.sendable.retain(|&s| s != id);
    }

    fn maybe_retire(&mut self, id: u64) {
        if self.streams.get(&id).is_some_and(|s| s.is_finished()) {
            self.streams.remove(&id);
            self.on_stream_removed(id);
        }
    }

    // ---- timers ----------------------------------------------------------

    fn pto_period(&self) -> Micros {
        let base = if self.cc.rtt.has_samples() {
            self.cc.rtt.pto_us(self.config.max_ack_delay_us())
        } else {
            self.config.pto_initial_us
        };
        base.saturating_mul(1u64 << self.pto_count.min(30))
    }

    fn pto_deadline(&self) -> Option<Micros> {
        if self.state != State::Established || !self.sent.values().any(|p| p.ack_eliciting) {
            return None;
        }
        self.last_eliciting_sent
            .map(|t| t.saturating_add(self.pto_period()))
    }

    pub fn next_timeout(&self) -> Option<Micros> {
        if self.state == State::Closed {
            return None;
        }
        [
            self.hs_deadline,
            self.pto_deadline(),
            self.ack_deadline,
            Some(self.idle_deadline),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    pub fn handle_timeout(&mut self, now: Micros) {
        if self.state == State::Closed {
            return;
        }
        if now >= self.idle_deadline {
            self.fail(TransportError::IdleTimeout);
            return;
        }
        if let Some(d) = self.hs_deadline {
            if now >= d {
                self.hs_retries += 1;
                if self.hs_retries > self.config.pto_max_retries {
                    self.hs_deadline = None;
                    self.fail(TransportError::HandshakeTimeout);
                    return;
                }
                self.hs_pending = true;
                self.hs_deadline = None;
            }
        }
        if let Some(d) = self.pto_deadline() {
            if now >= d {
                self.on_pto();
            }
        }
        if self.ack_deadline.is_some_and(|d| now >= d) {
            self.ack_immediate = true;
        }
    }

    fn on_pto(&mut self) {
        self.stats.pto_fired += 1;
        self.pto_count += 1;
        if self.pto_count > self.config.pto_max_retries {
            self.fail(TransportError::PersistentLoss);
            return;
        }
        self.probes_pending = 2;
        let oldest = self
            .sent
            .iter()
            .find(|(_, p)| p.ack_eliciting)
            .map(|(&pn, _)| pn);
        if let Some(pn) = oldest {
            let p = self.sent.remove(&pn).unwrap();
            self.cc.discard(p.size);
            for f in p.frames.into_iter().rev() {
                self.requeue(f, true);
            }
        }
    }

    // ---- receive ---------------------------------------------------------

    pub fn handle_datagram(&mut self, now: Micros, datagram: &[u8]) {
        if self.state == State::Closed {
            return;
        }
        let Ok(header) = PacketHeader::decode(datagram) else {
            self.stats.malformed += 1;
            return;
        };
        if header.session_id != self.session_id {
            self.stats.malformed += 1;
            return;
        }
        if header.is_handshake() {
            self.on_handshake(now, &datagram[HEADER_LEN..]);
            return;
        }
        let Some(rx) = &self.rx else {
            return;
        };
        let plain = match rx.open(header.packet_number, &datagram[..HEADER_LEN], &datagram[HEADER_LEN..]) {
            Ok(p) => p,
            Err(_) => {
                self.stats.auth_failures += 1;
                if !self.opened_any {
                    self.fail(TransportError::AuthFailure);
                }
                return;
            }
        };
        self.opened_any = true;
        let pn = header.packet_number;
        if self.received.contains(pn) {
            self.stats.duplicates += 1;
            return;
        }
        let Ok(frames) = Frame::decode_all(&plain) else {
            self.stats.malformed += 1;
            return;
        };
        self.stats.packets_received += 1;
        self.idle_deadline = now + self.config.idle_timeout_us;

        self.received.insert(pn);
        if self.largest_received.is_none_or(|(l, _)| pn > l) {
            self.largest_received = Some((pn, now));
        }
        self.total_received += 1;

        let eliciting = frames.iter().any(Frame::is_ack_eliciting);
        let has_ping = frames.iter().any(|f| matches!(f, Frame::Ping));
        for f in frames {
            if self.state == State::Closed {
                return;
            }
            self.on_frame(now, f);
        }
        if eliciting && self.state != State::Closed {
            self.ack_needed = true;
            self.eliciting_since_ack += 1;
            if self.total_received <= self.config.ack_decimation_start_packet
                || self.eliciting_since_ack >= self.config.ack_elicitation_threshold
                || has_ping
            {
                self.ack_immediate = true;
            } else if self.config.ack_delay_timeout_us > 0 && self.ack_deadline.is_none() {
                self.ack_deadline = Some(now + self.config.ack_delay_timeout_us);
            }
        }
    }

    fn on_handshake(&mut self, now: Micros, body: &[u8]) {
        let Ok(hs) = Handshake::decode(body) else {
            self.stats.malformed += 1;
            return;
        };
        match (self.role, hs) {
            (Role::Client, Handshake::Resp { server_random }) => {
                if self.state != State::Handshaking {
                    return;
                }
                self.server_random = Some(server_random);
                self.install_keys();
                self.state = State::Established;
                self.hs_deadline = None;
                self.hs_pending = false;
                self.ready_at = Some(now);
                self.idle_deadline = now + self.config.idle_timeout_us;
                if self.hs_retries == 0 {
                    if let Some(t) = self.hs_first_sent {
                        self.cc.rtt.update(now - t);
                    }
                }
                self.events.push_back(SessionEvent::Ready);
            }
            (Role::Server, Handshake::Init { client_random }) => {
                if client_random == self.client_random && self.state == State::Established {
                    self.hs_pending = true;
                }
            }
            _ => self.stats.malformed += 1,
        }
    }

    fn on_frame(&mut self, now: Micros, frame: Frame) {
        match frame {
            Frame::Padding { .. } | Frame::Ping => {}
            Frame::Ack(ack) => self.on_ack(now, ack),
            Frame::Close { error_code } => self.fail(TransportError::PeerClosed(error_code)),
            Frame::ResetStream {
                stream_id,
                error_code,
            } => {
                if !self.is_local(stream_id) {
                    self.open_peer_streams_upto(stream_id);
                }
                if self.streams.remove(&stream_id).is_some() {
                    self.on_stream_removed(stream_id);
                    self.retx.retain(|r| !matches!(r, Retx::Stream { id, .. } if *id == stream_id));
                    self.events.push_back(SessionEvent::StreamReset {
                        stream_id,
                        error_code,
                    });
                }
            }
            Frame::Stream {
                stream_id,
                offset,
                fin,
                data,
            } => {
                if self.is_local(stream_id) {
                    if stream_id >= self.next_local_stream {
                        self.fail(TransportError::ProtocolViolation("data on unopened local stream"));
                        return;
                    }
                } else {
                    self.open_peer_streams_upto(stream_id);
                }
                let Some(s) = self.streams.get_mut(&stream_id) else {
                    return;
                };
                let was_empty = s.recv.readable.is_empty();
                let added = s.recv.insert(offset, &data, fin);
                if added > 0 && was_empty {
                    self.events.push_back(SessionEvent::StreamReadable(stream_id));
                }
                if s.recv.all_received() && !s.recv.fin_reported {
                    s.recv.fin_reported = true;
                    self.events.push_back(SessionEvent::StreamFinished(stream_id));
                }
                self.maybe_retire(stream_id);
            }
        }
    }

    fn open_peer_streams_upto(&mut self, id: u64) {
        while self.next_peer_stream <= id {
            let new_id = self.next_peer_stream;
            self.next_peer_stream += 2;
            self.streams.insert(new_id, Stream::default());
            self.events.push_back(SessionEvent::StreamOpened(new_id));
        }
    }

    fn on_ack(&mut self, now: Micros, ack: AckFrame) {
        if ack.largest >= self.next_pn {
            self.fail(TransportError::ProtocolViolation("ack of unsent packet"));
            return;
        }
        let Ok(ranges) = ack.decoded_ranges() else {
            return;
        };
        let mut newly: Vec<(u64, SentPacket)> = Vec::new();
        for (lo, hi) in ranges {
            let pns: Vec<u64> = self.sent.range(lo..=hi).map(|(&pn, _)| pn).collect();
            for pn in pns {
                newly.push((pn, self.sent.remove(&pn).unwrap()));
            }
        }
        self.largest_acked = Some(self.largest_acked.map_or(ack.largest, |l| l.max(ack.largest)));
        if newly.is_empty() {
            return;
        }
        let largest_new = newly.iter().map(|(pn, _)| *pn).max().unwrap();
        if largest_new == ack.largest {
            let p = &newly.iter().find(|(pn, _)| *pn == largest_new).unwrap().1;
            if p.ack_eliciting {
                let sample = now.saturating_sub(p.time);
                self.cc.rtt.update(sample.saturating_sub(ack.ack_delay_us).max(1));
            }
        }
        self.pto_count = 0;
        let mut acked_bytes = 0;
        for (_, p) in newly {
            if p.ack_eliciting {
                acked_bytes += p.size;
            }
            for f in p.frames {
                self.on_retx_acked(f);
            }
        }
        self.cc.on_ack(acked_bytes, largest_new);
        self.detect_losses();
    }

    fn on_retx_acked(&mut self, f: Retx) {
        if let Retx::Stream {
            id,
            offset,
            len,
            fin,
        } = f
        {
            if let Some(s) = self.streams.get_mut(&id) {
                s.send.acked.insert_range(offset, offset + len as u64);
                if fin {
                    s.send.fin_acked = true;
                }
                self.maybe_retire(id);
            }
        }
    }

    fn detect_losses(&mut self) {
        let Some(largest) = self.largest_acked else {
            return;
        };
        let threshold = self.config.packet_reorder_loss_threshold;
        if largest < threshold {
            return;
        }
        let lost: Vec<u64> = self
            .sent
            .range(..=largest - threshold)
            .map(|(&pn, _)| pn)
            .collect();
        if lost.is_empty() {
            return;
        }
        let newest_lost = *lost.last().unwrap();
        for pn in lost {
            let p = self.sent.remove(&pn).unwrap();
            self.stats.lost_packets += 1;
            if p.ack_eliciting {
                self.cc.discard(p.size);
            }
            for f in p.frames {
                self.requeue(f, false);
            }
        }
        self.cc.on_loss(newest_lost, self.next_pn.saturating_sub(1));
    }

    fn requeue(&mut self, f: Retx, front: bool) {
        match f {
            Retx::Stream { id, .. } => {
                if !self.streams.contains_key(&id) {
                    return;
                }
                if front {
                    self.retx.push_front(f);
                } else {
                    self.retx.push_back(f);
                }
            }
            Retx::Reset { id, code } => self.pending_resets.push_back((id, code)),
        }
    }

    // ---- transmit --------------------------------------------------------

    pub fn poll_transmit(&mut self, now: Micros) -> Option<Vec<u8>> {
        match self.state {
            State::Closed => None,
            State::Handshaking => self.transmit_handshake(now),
            State::Closing => {
                let code = self.close_code.take().unwrap_or(0);
                let pkt = self.seal(vec![Frame::Close { error_code: code }]);
                self.fail(TransportError::LocallyClosed);
                Some(pkt)
            }
            State::Established => {
                if self.hs_pending && self.role == Role::Server {
                    return self.transmit_handshake(now);
                }
                self.transmit_protected(now)
            }
        }
    }

    fn transmit_handshake(&mut self, now: Micros) -> Option<Vec<u8>> {
        if !self.hs_pending {
            return None;
        }
        self.hs_pending = false;
        let pn = self.next_pn;
        self.next_pn += 1;
        let header = PacketHeader::new(self.session_id, pn, true);
        let hs = match self.role {
            Role::Client => {
                self.hs_first_sent.get_or_insert(now);
                let backoff = 1u64 << self.hs_retries.min(30);
                self.hs_deadline = Some(now + self.config.pto_initial_us.saturating_mul(backoff));
                Handshake::Init {
                    client_random: self.client_random,
                }
            }
            Role::Server => Handshake::Resp {
                server_random: self.server_random.unwrap(),
            },
        };
        self.stats.packets_sent += 1;
        self.stats.handshake_packets_sent += 1;
        Some(hs.encode(&header, self.config.max_packet_size_bytes))
    }

    fn ack_due(&self) -> bool {
        self.ack_needed && self.ack_immediate
    }

    fn build_ack(&mut self, now: Micros) -> Frame {
        let ranges: Vec<(u64, u64)> = self.received.iter_desc().take(MAX_ACK_RANGES).collect();
        let delay = self.largest_received.map_or(0, |(_, t)| now.saturating_sub(t));
        self.ack_needed = false;
        self.ack_immediate = false;
        self.ack_deadline = None;
        self.eliciting_since_ack = 0;
        self.stats.ack_frames_sent += 1;
        Frame::Ack(AckFrame::from_ranges(&ranges, delay))
    }

    fn transmit_protected(&mut self, now: Micros) -> Option<Vec<u8>> {
        let budget = self.config.frame_budget();
        let mut frames: Vec<Frame> = Vec::new();
        let mut retx: Vec<Retx> = Vec::new();
        let mut used = 0usize;

        if self.ack_due() && !self.received.is_empty() {
            let ack = self.build_ack(now);
            used += ack.encoded_len();
            frames.push(ack);
        }

        let probing = self.probes_pending > 0;
        if probing || self.cc.can_send() {
            if probing {
                self.probes_pending -= 1;
                frames.push(Frame::Ping);
                used += 1;
            }
            while let Some(&(id, code)) = self.pending_resets.front() {
                let f = Frame::ResetStream {
                    stream_id: id,
                    error_code: code,
                };
                if used + f.encoded_len() > budget {
                    break;
                }
                self.pending_resets.pop_front();
                used += f.encoded_len();
                frames.push(f);
                retx.push(Retx::Reset { id, code });
            }
            let both = !self.retx.is_empty() && !self.sendable.is_empty();
            let new_first = both && self.new_data_turn;
            if both {
                self.new_data_turn = !self.new_data_turn;
            }
            if !new_first {
                let split = self.fill_retransmissions(budget, &mut used, &mut frames, &mut retx);
                if probing && split {
                    self.probes_pending += 1;
                }
            }
            if !retx.iter().any(|r| matches!(r, Retx::Stream { .. })) {
                self.fill_new_data(budget, &mut used, &mut frames, &mut retx);
            }
        }

        if frames.is_empty() {
            return None;
        }
        let eliciting = frames.iter().any(Frame::is_ack_eliciting);
        let pn = self.next_pn;
        self.next_pn += 1;
        let size = (HEADER_LEN + used + TAG_LEN) as u64;
        if eliciting {
            self.sent.insert(
                pn,
                SentPacket {
                    time: now,
                    size,
                    ack_eliciting: true,
                    frames: retx,
                },
            );
            self.cc.on_sent(size);
            self.last_eliciting_sent = Some(now);
        } else {
            self.stats.ack_only_sent += 1;
        }
        let header = PacketHeader::new(self.session_id, pn, false);
        let mut payload = Vec::with_capacity(used);
        for f in &frames {
            f.encode(&mut payload);
        }
        if let Some(trace) = &mut self.frame_trace {
            trace.push((pn, frames));
        }
        self.stats.packets_sent += 1;
        Some(seal_packet(self.tx.as_ref().unwrap(), &header, &payload))
    }

    fn seal(&mut self, frames: Vec<Frame>) -> Vec<u8> {
        let pn = self.next_pn;
        self.next_pn += 1;
        let mut payload = Vec::new();
        for f in &frames {
            f.encode(&mut payload);
        }
        self.stats.packets_sent += 1;
        let header = PacketHeader::new(self.session_id, pn, false);
        seal_packet(self.tx.as_ref().unwrap(), &header, &payload)
    }

    fn fill_retransmissions(
        &mut self,
        budget: usize,
        used: &mut usize,
        frames: &mut Vec<Frame>,
        retx: &mut Vec<Retx>,
    ) -> bool {
        self.rotate_retx();
        let mut packet_stream = None;
        while let Some(r) = self.retx.pop_front() {
            let Retx::Stream {
                id,
                offset,
                len,
                fin,
            } = r
            else {
                continue;
            };
            let Some(s) = self.streams.get(&id) else {
                continue;
            };
            if s.send.acked.covers(offset, offset + len as u64) && (!fin || s.send.fin_acked) {
                continue;
            }
            let overhead = stream_overhead(id, offset);
            if *used + overhead + usize::from(len > 0) > budget || packet_stream.is_some_and(|p| p != id) {
                self.retx.push_front(r);
                return false;
            }
            packet_stream = Some(id);
            self.last_retx_stream = Some(id);
            let n = len.min(budget - *used - overhead);
            let data = s.send.data[offset as usize..offset as usize + n].to_vec();
            let this_fin = fin && n == len;
            let split = n < len;
            if split {
                self.retx.push_front(Retx::Stream {
                    id,
                    offset: offset + n as u64,
                    len: len - n,
                    fin,
                });
            }
            self.stats.stream_bytes_retransmitted += n as u64;
            *used += overhead + n;
            frames.push(Frame::Stream {
                stream_id: id,
                offset,
                fin: this_fin,
                data,
            });
            retx.push(Retx::Stream {
                id,
                offset,
                len: n,
                fin: this_fin,
            });
            if split {
                return true;
            }
        }
        false
    }

    /// Moves the first retransmission of a different stream than the last one
    /// served to the front, so one stream's losses cannot starve the others.
    fn rotate_retx(&mut self) {
        let Some(last) = self.last_retx_stream else {
            return;
        };
        let stream_of = |r: &Retx| match r {
            Retx::Stream { id, .. } | Retx::Reset { id, .. } => *id,
        };
        if self.retx.front().map(stream_of) != Some(last) {
            return;
        }
        if let Some(i) = self.retx.iter().position(|r| stream_of(r) != last) {
            let r = self.retx.remove(i).unwrap();
            self.retx.push_front(r);
        }
    }

    fn fill_new_data(
        &mut self,
        budget: usize,
        used: &mut usize,
        frames: &mut Vec<Frame>,
        retx: &mut Vec<Retx>,
    ) {
        while let Some(id) = self.sendable.pop_front() {
            let Some(s) = self.streams.get_mut(&id) else {
                continue;
            };
            if !s.send.has_unsent() {
                s.send.queued = false;
                continue;
            }
            let offset = s.send.next_offset;
            let overhead = stream_overhead(id, offset);
            let avail = s.send.data.len() - offset as usize;
            if *used + overhead + usize::from(avail > 0) > budget {
                self.sendable.push_front(id);
                return;
            }
            let n = avail.min(budget - *used - overhead).min(u16::MAX as usize);
            let fin = s.send.fin && n == avail;
            let data = s.send.data[offset as usize..offset as usize + n].to_vec();
            s.send.next_offset += n as u64;
            if fin {
                s.send.fin_sent = true;
            }
            if s.send.has_unsent() {
                self.sendable.push_back(id);
            } else {
                s.send.queued = false;
            }
            *used += overhead + n;
            frames.push(Frame::Stream {
                stream_id: id,
                offset,
                fin,
                data,
            });
            retx.push(Retx::Stream {
                id,
                offset,
                len: n,
                fin,
            });
        }
    }
}
