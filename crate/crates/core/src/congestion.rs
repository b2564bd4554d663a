//! Window-based congestion control and RTT estimation shared by the tunnel
//! transport and the baseline TCP.

use crate::runtime::{Micros, MICROS_PER_MS, MICROS_PER_SEC};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SlowStart,
    Avoidance,
    Recovery,
}

#[derive(Debug, Clone)]
pub struct RttEstimator {
    pub srtt_us: Micros,
    pub rttvar_us: Micros,
    pub min_rtt_us: Micros,
    pub latest_us: Micros,
    samples: u64,
}

impl RttEstimator {
    pub fn new(initial_rtt_us: Micros) -> Self {
        Self {
            srtt_us: initial_rtt_us,
            rttvar_us: initial_rtt_us / 2,
            min_rtt_us: Micros::MAX,
            latest_us: 0,
            samples: 0,
        }
    }

    pub fn has_samples(&self) -> bool {
        self.samples > 0
    }

    pub fn update(&mut self, sample_us: Micros) {
        let sample_us = sample_us.max(1);
        self.latest_us = sample_us;
        self.min_rtt_us = self.min_rtt_us.min(sample_us);
        if self.samples == 0 {
            self.srtt_us = sample_us;
            self.rttvar_us = sample_us / 2;
        } else {
            let dev = self.srtt_us.abs_diff(sample_us);
            self.rttvar_us = (3 * self.rttvar_us + dev) / 4;
            self.srtt_us = (7 * self.srtt_us + sample_us) / 8;
        }
        self.samples += 1;
    }

    /// Probe timeout before backoff.
    pub fn pto_us(&self, max_ack_delay_us: Micros) -> Micros {
        self.srtt_us + (4 * self.rttvar_us).max(MICROS_PER_MS) + max_ack_delay_us
    }

    /// Retransmission timeout for TCP, clamped to `[min, 60 s]`.
    pub fn rto_us(&self, min_us: Micros) -> Micros {
        (self.srtt_us + 4 * self.rttvar_us).clamp(min_us, 60 * MICROS_PER_SEC)
    }
}

/// Reno-style window in bytes.
#[derive(Debug, Clone)]
pub struct CongestionState {
    pub cwnd_bytes: u64,
    pub ssthresh_bytes: u64,
    pub bytes_in_flight: u64,
    pub phase: Phase,
    pub rtt: RttEstimator,
    segment: u64,
    min_window: u64,
    /// Per-ack slow-start growth cap, for byte-counting TCP.
    growth_limit: Option<u64>,
    /// Send marker at entry to recovery; an ack of anything sent later ends it.
    recovery_marker: Option<u64>,
}

impl CongestionState {
    pub fn new(initial_window: u64, segment: u64, min_window: u64, initial_rtt_us: Micros) -> Self {
        Self {
            cwnd_bytes: initial_window.max(1),
            ssthresh_bytes: u64::MAX,
            bytes_in_flight: 0,
            phase: Phase::SlowStart,
            rtt: RttEstimator::new(initial_rtt_us),
            segment,
            min_window,
            growth_limit: None,
            recovery_marker: None,
        }
    }

    pub fn with_growth_limit(mut self, limit: u64) -> Self {
        self.growth_limit = Some(limit);
        self
    }

    pub fn segment(&self) -> u64 {
        self.segment
    }

    pub fn can_send(&self) -> bool {
        self.bytes_in_flight < self.cwnd_bytes
    }

    pub fn available(&self) -> u64 {
        self.cwnd_bytes.saturating_sub(self.bytes_in_flight)
    }

    pub fn on_sent(&mut self, bytes: u64) {
        self.bytes_in_flight += bytes;
    }

    /// Removes bytes from flight without any window reaction.
    pub fn discard(&mut self, bytes: u64) {
        self.bytes_in_flight = self.bytes_in_flight.saturating_sub(bytes);
    }

    /// `marker` is the send-order position of the newest packet this ack covers.
    pub fn on_ack(&mut self, acked_bytes: u64, marker: u64) {
        self.discard(acked_bytes);
        if self.phase == Phase::Recovery {
            match self.recovery_marker {
                Some(m) if marker <= m => return,
                _ => {
                    self.phase = Phase::Avoidance;
                    self.recovery_marker = None;
                }
            }
        }
        match self.phase {
            Phase::SlowStart => {
                let inc = match self.growth_limit {
                    Some(l) => acked_bytes.min(l),
                    None => acked_bytes,
                };
                self.cwnd_bytes += inc;
                if self.cwnd_bytes >= self.ssthresh_bytes {
                    self.phase = Phase::Avoidance;
                }
            }
            Phase::Avoidance => {
                let inc = (self.segment * acked_bytes / self.cwnd_bytes.max(1)).max(1);
                self.cwnd_bytes += inc;
            }
            Phase::Recovery => {}
        }
    }

    /// A loss of something sent at `lost_marker`; `send_marker` is the current send position.
    /// Returns true if the window was reduced.
    pub fn on_loss(&mut self, lost_marker: u64, send_marker: u64) -> bool {
        if let Some(m) = self.recovery_marker {
            if lost_marker <= m {
                return false;
            }
        }
        self.ssthresh_bytes = (self.cwnd_bytes / 2).max(self.min_window);
        self.cwnd_bytes = self.ssthresh_bytes;
        self.phase = Phase::Recovery;
        self.recovery_marker = Some(send_marker);
        true
    }

    pub fn in_recovery(&self) -> bool {
        self.phase == Phase::Recovery
    }

    /// Retransmission timeout: collapse to one segment and restart slow start.
    pub fn on_retransmission_timeout(&mut self) {
        self.ssthresh_bytes = (self.cwnd_bytes / 2).max(2 * self.segment);
        self.cwnd_bytes = self.segment;
        self.phase = Phase::SlowStart;
        self.recovery_marker = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: u64 = 1200;

    fn quic() -> CongestionState {
        CongestionState::new(10 * P, P, 2 * P, 333_000)
    }

    #[test]
    fn initial_window_is_ten_packets() {
        assert_eq!(quic().cwnd_bytes, 12_000);
    }

    #[test]
    fn slow_start_doubles_per_window() {
        let mut c = quic();
        for _ in 0..10 {
            c.on_sent(P);
        }
        for pn in 0..10 {
            c.on_ack(P, pn);
        }
        assert_eq!(c.cwnd_bytes, 24_000);
        assert_eq!(c.bytes_in_flight, 0);
    }

    #[test]
    fn single_ack_adds_packet() {
        let mut c = quic();
        c.on_sent(P);
        c.on_ack(P, 0);
        assert_eq!(c.cwnd_bytes, 12_000 + 1200);
    }

    #[test]
    fn loss_halves_and_recovery_exits_on_post_loss_ack() {
        let mut c = quic();
        c.cwnd_bytes = 24_000;
        assert!(c.on_loss(3, 20));
        assert_eq!((c.ssthresh_bytes, c.cwnd_bytes), (12_000, 12_000));
        // further losses from before recovery started do not reduce again
        assert!(!c.on_loss(5, 21));
        c.on_ack(P, 15);
        assert_eq!(c.phase, Phase::Recovery);
        c.on_ack(P, 21);
        assert_eq!(c.phase, Phase::Avoidance);
        assert!(c.cwnd_bytes > 12_000);
    }

    #[test]
    fn floor_is_two_packets() {
        let mut c = quic();
        for m in 0..10 {
            c.on_loss(100 + m * 100, 100 + m * 100 + 50);
        }
        assert_eq!(c.cwnd_bytes, 2 * P);
    }

    #[test]
    fn avoidance_adds_one_packet_per_window() {
        let mut c = quic();
        c.phase = Phase::Avoidance;
        c.cwnd_bytes = 12_000;
        for _ in 0..10 {
            c.on_ack(P, 1);
        }
        // roughly one packet per window of acks
        assert!((13_000..=13_300).contains(&c.cwnd_bytes), "{}", c.cwnd_bytes);
    }

    #[test]
    fn rto_collapses_to_one_segment() {
        let mut c = CongestionState::new(10 * 1160, 1160, 1160, 1_000_000).with_growth_limit(1160);
        c.cwnd_bytes = 40_000;
        c.on_retransmission_timeout();
        assert_eq!(c.cwnd_bytes, 1160);
        assert_eq!(c.ssthresh_bytes, 20_000);
        c.on_ack(2 * 1160, 1);
        assert_eq!(c.cwnd_bytes, 2 * 1160);
    }

    #[test]
    fn rtt_ewma() {
        let mut r = RttEstimator::new(333_000);
        r.update(500_000);
        assert_eq!((r.srtt_us, r.rttvar_us), (500_000, 250_000));
        r.update(600_000);
        assert_eq!(r.srtt_us, (7 * 500_000 + 600_000) / 8);
        assert_eq!(r.rttvar_us, (3 * 250_000 + 100_000) / 4);
        assert_eq!(r.pto_us(25_000), r.srtt_us + 4 * r.rttvar_us + 25_000);
    }
}
