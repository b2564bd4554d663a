use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddrV4;

use super::segment::{unwrap_seq, TcpSegmentHeader, FLAG_ACK, FLAG_FIN, FLAG_RST, FLAG_SYN};
use super::{ConnId, TcpConfig, TcpError, TcpEvent, RECEIVE_WINDOW};
use crate::congestion::CongestionState;
use crate::runtime::{Micros, MICROS_PER_SEC};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcpState {
    SynSent,
    SynReceived,
    Established,
    /// Finished or aborted; still answers retransmitted data and FINs with ACKs.
    Closed,
}

/// Sequence numbers are kept relative to the initial sequence number, so the
/// SYN occupies 0 and the first data byte is 1.
#[derive(Debug)]
pub(crate) struct Connection {
    pub id: ConnId,
    pub local: SocketAddrV4,
    pub remote: SocketAddrV4,
    pub state: TcpState,
    config: TcpConfig,
    iss: u32,
    irs: u32,

    send_buf: VecDeque<u8>,
    buf_start: u64,
    written: u64,
    fin_queued: bool,
    fin_acked: bool,
    syn_pending: bool,
    syn_sent_at: Option<Micros>,
    snd_una: u64,
    snd_nxt: u64,
    snd_max: u64,
    peer_window: u64,
    pub cc: CongestionState,
    dupacks: u32,
    recover: Option<u64>,
    retransmit_next: bool,
    rto_deadline: Option<Micros>,
    backoff: u32,
    retries: u32,
    timed: Option<(u64, Micros)>,

    rcv_nxt: u64,
    ooo: BTreeMap<u64, Vec<u8>>,
    peer_fin: Option<u64>,
    fin_received: bool,
    recv_buf: VecDeque<u8>,
    unacked_segments: u32,
    ack_deadline: Option<Micros>,
    ack_now: bool,
    rst_pending: bool,
    pub retransmitted_segments: u64,
}

impl Connection {
    fn new(
        id: ConnId,
        local: SocketAddrV4,
        remote: SocketAddrV4,
        state: TcpState,
        config: TcpConfig,
        iss: u32,
    ) -> Self {
        let mss = config.mss_bytes as u64;
        let cc = CongestionState::new(
            config.initial_cwnd_segments * mss,
            mss,
            2 * mss,
            config.rto_initial_us,
        )
        .with_growth_limit(2 * mss);
        Self {
            id,
            local,
            remote,
            state,
            iss,
            irs: 0,
            send_buf: VecDeque::new(),
            buf_start: 1,
            written: 0,
            fin_queued: false,
            fin_acked: false,
            syn_pending: true,
            syn_sent_at: None,
            snd_una: 0,
            snd_nxt: 0,
            snd_max: 0,
            peer_window: RECEIVE_WINDOW as u64,
            cc,
            dupacks: 0,
            recover: None,
            retransmit_next: false,
            rto_deadline: None,
            backoff: 0,
            retries: 0,
            timed: None,
            rcv_nxt: 0,
            ooo: BTreeMap::new(),
            peer_fin: None,
            fin_received: false,
            recv_buf: VecDeque::new(),
            unacked_segments: 0,
            ack_deadline: None,
            ack_now: false,
            rst_pending: false,
            retransmitted_segments: 0,
            config,
        }
    }

    pub fn connecting(id: ConnId, local: SocketAddrV4, remote: SocketAddrV4, config: TcpConfig, iss: u32) -> Self {
        Self::new(id, local, remote, TcpState::SynSent, config, iss)
    }

    pub fn accepting(
        id: ConnId,
        local: SocketAddrV4,
        remote: SocketAddrV4,
        config: TcpConfig,
        iss: u32,
        peer_iss: u32,
    ) -> Self {
        let mut c = Self::new(id, local, remote, TcpState::SynReceived, config, iss);
        c.irs = peer_iss;
        c.rcv_nxt = 1;
        c
    }

    fn data_end(&self) -> u64 {
        1 + self.written
    }

    fn fin_seq(&self) -> Option<u64> {
        self.fin_queued.then(|| self.data_end())
    }

    fn rto(&self) -> Micros {
        let base = if self.cc.rtt.has_samples() {
            self.cc.rtt.rto_us(self.config.rto_min_us)
        } else {
            self.config.rto_initial_us
        };
        base.saturating_mul(1 << self.backoff.min(16)).min(60 * MICROS_PER_SEC)
    }

    fn window(&self) -> u16 {
        RECEIVE_WINDOW.saturating_sub(self.recv_buf.len()) as u16
    }

    pub fn is_writable(&self) -> bool {
        !self.fin_queued && !matches!(self.state, TcpState::Closed)
    }

    pub fn write(&mut self, data: &[u8]) -> Result<(), TcpError> {
        if !self.is_writable() {
            return Err(TcpError::NotWritable);
        }
        self.send_buf.extend(data);
        self.written += data.len() as u64;
        Ok(())
    }

    pub fn read(&mut self) -> Vec<u8> {
        self.recv_buf.drain(..).collect()
    }

    pub fn close(&mut self) {
        if self.state != TcpState::Closed {
            self.fin_queued = true;
        }
    }

    pub fn abort(&mut self) {
        if self.state != TcpState::Closed {
            self.rst_pending = true;
            self.state = TcpState::Closed;
            self.rto_deadline = None;
            self.ack_deadline = None;
        }
    }

    pub fn next_timeout(&self) -> Option<Micros> {
        [self.rto_deadline, self.ack_deadline].into_iter().flatten().min()
    }

    fn wire_seq(&self, rel: u64) -> u32 {
        self.iss.wrapping_add(rel as u32)
    }

    fn wire_ack(&self) -> u32 {
        self.irs.wrapping_add(self.rcv_nxt as u32)
    }

    fn header(&self, seq: u64, flags: u8) -> TcpSegmentHeader {
        TcpSegmentHeader {
            src_port: self.local.port(),
            dst_port: self.remote.port(),
            seq: self.wire_seq(seq),
            ack: if flags & FLAG_ACK != 0 { self.wire_ack() } else { 0 },
            flags,
            window: self.window(),
        }
    }

    fn clear_ack_state(&mut self) {
        self.ack_now = false;
        self.ack_deadline = None;
        self.unacked_segments = 0;
    }

    fn data_segment(&mut self, now: Micros, seq: u64, max_len: u64) -> (TcpSegmentHeader, Vec<u8>) {
        let end = self.data_end();
        let len = max_len.min(end.saturating_sub(seq));
        let off = (seq - self.buf_start) as usize;
        let payload: Vec<u8> = self.send_buf.range(off..off + len as usize).copied().collect();
        let fin = self.fin_seq() == Some(seq + len);
        let mut flags = FLAG_ACK;
        if fin {
            flags |= FLAG_FIN;
        }
        let seg_end = seq + len + u64::from(fin);
        if seq < self.snd_max {
            self.retransmitted_segments += 1;
            if self.timed.is_some_and(|(e, _)| e > seq) {
                self.timed = None;
            }
        } else if self.timed.is_none() {
            self.timed = Some((seg_end, now));
        }
        self.snd_max = self.snd_max.max(seg_end);
        if self.rto_deadline.is_none() {
            self.rto_deadline = Some(now + self.rto());
        }
        self.clear_ack_state();
        (self.header(seq, flags), payload)
    }

    /// Next segment this connection wants on the wire.
    pub fn poll_segment(&mut self, now: Micros) -> Option<(TcpSegmentHeader, Vec<u8>)> {
        if self.rst_pending {
            self.rst_pending = false;
            return Some((self.header(self.snd_nxt, FLAG_RST | FLAG_ACK), Vec::new()));
        }
        match self.state {
            TcpState::SynSent | TcpState::SynReceived if self.syn_pending => {
                self.syn_pending = false;
                self.syn_sent_at.get_or_insert(now);
                self.snd_nxt = 1;
                self.snd_max = self.snd_max.max(1);
                if self.rto_deadline.is_none() {
                    self.rto_deadline = Some(now + self.rto());
                }
                let flags = if self.state == TcpState::SynSent {
                    FLAG_SYN
                } else {
                    self.clear_ack_state();
                    FLAG_SYN | FLAG_ACK
                };
                return Some((self.header(0, flags), Vec::new()));
            }
            TcpState::Established => {}
            _ => {
                if self.ack_now && self.state == TcpState::Closed {
                    self.ack_now = false;
                    return Some((self.header(self.snd_nxt, FLAG_ACK), Vec::new()));
                }
                return None;
            }
        }

        let mss = self.config.mss_bytes as u64;
        if self.retransmit_next {
            self.retransmit_next = false;
            if self.snd_una < self.snd_max {
                let seq = self.snd_una;
                return Some(self.data_segment(now, seq, mss));
            }
        }
        let window = self.cc.cwnd_bytes.min(self.peer_window);
        let flight = self.snd_nxt - self.snd_una;
        let end = self.data_end();
        if self.snd_nxt < end {
            let len = mss.min(end - self.snd_nxt);
            if flight == 0 || flight + len <= window {
                let seq = self.snd_nxt;
                let seg = self.data_segment(now, seq, len);
                self.snd_nxt = seq + len + u64::from(seg.0.has(FLAG_FIN));
                return Some(seg);
            }
        } else if self.fin_seq() == Some(self.snd_nxt) {
            let seq = self.snd_nxt;
            let seg = self.data_segment(now, seq, 0);
            self.snd_nxt = seq + 1;
            return Some(seg);
        }
        if self.ack_now {
            self.clear_ack_state();
            return Some((self.header(self.snd_nxt, FLAG_ACK), Vec::new()));
        }
        None
    }

    pub fn on_segment(
        &mut self,
        now: Micros,
        h: &TcpSegmentHeader,
        payload: &[u8],
        events: &mut VecDeque<TcpEvent>,
    ) {
        if h.has(FLAG_RST) {
            match self.state {
                TcpState::SynSent => {
                    self.state = TcpState::Closed;
                    self.rto_deadline = None;
                    events.push_back(TcpEvent::ConnectFailed(self.id, TcpError::ConnectionRefused));
                }
                TcpState::Closed => {}
                _ => {
                    self.state = TcpState::Closed;
                    self.rto_deadline = None;
                    self.ack_deadline = None;
                    events.push_back(TcpEvent::Reset(self.id, TcpError::ConnectionReset));
                }
            }
            return;
        }
        match self.state {
            TcpState::SynSent => {
                if !(h.has(FLAG_SYN) && h.has(FLAG_ACK)) || h.ack != self.iss.wrapping_add(1) {
                    return;
                }
                self.irs = h.seq;
                self.rcv_nxt = 1;
                self.establish(now, h.window, events);
                self.ack_now = true;
                return;
            }
            TcpState::SynReceived => {
                if h.has(FLAG_SYN) {
                    self.syn_pending = true;
                    return;
                }
                if !h.has(FLAG_ACK) || h.ack != self.iss.wrapping_add(1) {
                    return;
                }
                self.establish(now, h.window, events);
            }
            TcpState::Established | TcpState::Closed => {
                if h.has(FLAG_SYN) {
                    self.ack_now = true;
                    return;
                }
            }
        }
        if h.has(FLAG_ACK) && self.state == TcpState::Established {
            self.process_ack(now, h, payload.is_empty() && !h.has(FLAG_FIN));
        }
        self.process_data(now, h, payload, events);
        self.check_closed(events);
    }

    fn establish(&mut self, now: Micros, window: u16, events: &mut VecDeque<TcpEvent>) {
        self.state = TcpState::Established;
        self.snd_una = 1;
        self.snd_nxt = self.snd_nxt.max(1);
        self.peer_window = window as u64;
        if self.retries == 0 {
            if let Some(t) = self.syn_sent_at {
                self.cc.rtt.update(now - t);
            }
        }
        self.retries = 0;
        self.backoff = 0;
        self.rto_deadline = None;
        events.push_back(TcpEvent::Connected(self.id));
    }

    fn process_ack(&mut self, now: Micros, h: &TcpSegmentHeader, pure: bool) {
        let ack = unwrap_seq(self.snd_una, h.ack.wrapping_sub(self.iss));
        if ack > self.snd_max {
            return;
        }
        let window_changed = self.peer_window != h.window as u64;
        self.peer_window = h.window as u64;
        if ack > self.snd_una {
            let newly = ack - self.snd_una;
            let data_acked = ack.min(self.data_end());
            while self.buf_start < data_acked {
                self.send_buf.pop_front();
                self.buf_start += 1;
            }
            self.snd_una = ack;
            self.snd_nxt = self.snd_nxt.max(ack);
            if let Some((end, t)) = self.timed {
                if ack >= end {
                    self.cc.rtt.update(now - t);
                    self.timed = None;
                }
            }
            self.retries = 0;
            self.backoff = 0;
            self.dupacks = 0;
            if let Some(rec) = self.recover {
                if ack >= rec {
                    self.recover = None;
                } else {
                    self.retransmit_next = true;
                }
            }
            self.cc.bytes_in_flight = self.snd_nxt - self.snd_una + newly;
            self.cc.on_ack(newly, ack);
            if self.fin_seq().is_some_and(|f| ack > f) {
                self.fin_acked = true;
            }
            self.rto_deadline = (self.snd_una < self.snd_max).then(|| now + self.rto());
        } else if ack == self.snd_una && pure && !window_changed && self.snd_max > self.snd_una {
            self.dupacks += 1;
            if self.dupacks == self.config.dupack_threshold && self.recover.is_none() {
                self.cc.bytes_in_flight = self.snd_nxt - self.snd_una;
                self.cc.on_loss(self.snd_una, self.snd_max - 1);
                self.recover = Some(self.snd_max);
                self.retransmit_next = true;
            }
        }
    }

    fn process_data(&mut self, now: Micros, h: &TcpSegmentHeader, payload: &[u8], events: &mut VecDeque<TcpEvent>) {
        let fin = h.has(FLAG_FIN);
        if payload.is_empty() && !fin {
            return;
        }
        if self.state != TcpState::Established || self.fin_received {
            self.ack_now = true;
            return;
        }
        let seq = unwrap_seq(self.rcv_nxt, h.seq.wrapping_sub(self.irs));
        let len = payload.len() as u64;
        if fin {
            self.peer_fin.get_or_insert(seq + len);
        }
        let mut immediate = false;
        if len > 0 {
            if seq + len <= self.rcv_nxt {
                immediate = true;
            } else if seq <= self.rcv_nxt {
                let had_gap = !self.ooo.is_empty();
                let skip = (self.rcv_nxt - seq) as usize;
                self.recv_buf.extend(&payload[skip..]);
                self.rcv_nxt = seq + len;
                self.drain_ooo();
                events.push_back(TcpEvent::Readable(self.id));
                self.unacked_segments += 1;
                immediate = had_gap || self.unacked_segments >= self.config.delayed_ack_factor;
            } else {
                let keep = self.ooo.get(&seq).is_none_or(|d| d.len() < payload.len());
                if keep {
                    self.ooo.insert(seq, payload.to_vec());
                }
                immediate = true;
            }
        }
        if let Some(f) = self.peer_fin {
            if self.rcv_nxt == f {
                self.rcv_nxt += 1;
                self.fin_received = true;
                self.ooo.clear();
                immediate = true;
                events.push_back(TcpEvent::PeerClosed(self.id));
            }
        }
        if immediate {
            self.ack_now = true;
        } else if self.ack_deadline.is_none() {
            self.ack_deadline = Some(now + self.config.delayed_ack_timeout_us);
        }
    }

    fn drain_ooo(&mut self) {
        while let Some(entry) = self.ooo.first_entry() {
            let start = *entry.key();
            if start > self.rcv_nxt {
                break;
            }
            let data = entry.remove();
            let end = start + data.len() as u64;
            if end > self.rcv_nxt {
                let skip = (self.rcv_nxt - start) as usize;
                self.recv_buf.extend(&data[skip..]);
                self.rcv_nxt = end;
            }
        }
    }

    fn check_closed(&mut self, events: &mut VecDeque<TcpEvent>) {
        if self.state == TcpState::Established && self.fin_acked && self.fin_received {
            self.state = TcpState::Closed;
            self.rto_deadline = None;
            events.push_back(TcpEvent::Closed(self.id));
        }
    }

    pub fn on_timeout(&mut self, now: Micros, events: &mut VecDeque<TcpEvent>) {
        if self.ack_deadline.is_some_and(|d| now >= d) {
            self.ack_deadline = None;
            self.ack_now = true;
        }
        if !self.rto_deadline.is_some_and(|d| now >= d) {
            return;
        }
        self.rto_deadline = None;
        self.retries += 1;
        self.backoff += 1;
        match self.state {
            TcpState::SynSent | TcpState::SynReceived => {
                if self.retries > self.config.syn_retries {
                    let was_connecting = self.state == TcpState::SynSent;
                    self.state = TcpState::Closed;
                    if was_connecting {
                        events.push_back(TcpEvent::ConnectFailed(self.id, TcpError::ConnectTimeout));
                    } else {
                        events.push_back(TcpEvent::Reset(self.id, TcpError::ConnectTimeout));
                    }
                } else {
                    self.syn_pending = true;
                }
            }
            TcpState::Established => {
                if self.snd_una >= self.snd_max {
                    return;
                }
                if self.retries > self.config.data_retries {
                    self.state = TcpState::Closed;
                    self.rst_pending = true;
                    events.push_back(TcpEvent::Reset(self.id, TcpError::TimedOut));
                    return;
                }
                self.cc.on_retransmission_timeout();
                self.snd_nxt = self.snd_una;
                self.recover = None;
                self.retransmit_next = false;
                self.dupacks = 0;
                self.timed = None;
            }
            TcpState::Closed => {}
        }
    }
}
