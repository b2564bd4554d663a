use serde::{Deserialize, Serialize};

use super::packet::{HEADER_LEN, RANDOM_LEN};
use crate::crypto::TAG_LEN;
use crate::runtime::Micros;

/// Tunnel transport knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub initial_cwnd_packets: u64,
    pub ack_elicitation_threshold: u64,
    /// Every ack-eliciting packet among the first this many received is acknowledged at once.
    pub ack_decimation_start_packet: u64,
    /// 0 disables timer-driven acknowledgements.
    pub ack_delay_timeout_us: Micros,
    pub max_concurrent_streams: u64,
    pub max_packet_size_bytes: usize,
    pub packet_reorder_loss_threshold: u64,
    pub initial_rtt_us: Micros,
    pub pto_initial_us: Micros,
    pub pto_max_retries: u32,
    pub idle_timeout_us: Micros,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            initial_cwnd_packets: 10,
            ack_elicitation_threshold: 10,
            ack_decimation_start_packet: 100,
            ack_delay_timeout_us: 25_000,
            max_concurrent_streams: 40_000,
            max_packet_size_bytes: 1200,
            packet_reorder_loss_threshold: 3,
            initial_rtt_us: 333_000,
            pto_initial_us: 666_000,
            pto_max_retries: 8,
            idle_timeout_us: 30_000_000,
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.initial_cwnd_packets < 1 {
            return Err("initial_cwnd_packets must be at least 1".into());
        }
        if self.ack_elicitation_threshold < 1 {
            return Err("ack_elicitation_threshold must be at least 1".into());
        }
        if self.max_concurrent_streams < 1 {
            return Err("max_concurrent_streams must be at least 1".into());
        }
        if self.max_packet_size_bytes < HEADER_LEN + 1 + RANDOM_LEN + TAG_LEN
            || self.max_packet_size_bytes > 65_000
        {
            return Err("max_packet_size_bytes out of range".into());
        }
        if self.packet_reorder_loss_threshold < 1 {
            return Err("packet_reorder_loss_threshold must be at least 1".into());
        }
        if self.pto_initial_us == 0 {
            return Err("pto_initial_us must be positive".into());
        }
        Ok(())
    }

    /// Frame bytes that fit in one protected packet.
    pub fn frame_budget(&self) -> usize {
        self.max_packet_size_bytes - HEADER_LEN - TAG_LEN
    }

    /// Delay assumed for the peer's acknowledgements when computing the probe timeout.
    pub fn max_ack_delay_us(&self) -> Micros {
        if self.ack_delay_timeout_us > 0 {
            self.ack_delay_timeout_us
        } else {
            25_000
        }
    }
}
