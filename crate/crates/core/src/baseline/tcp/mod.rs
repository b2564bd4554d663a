//! A small classic TCP: three-way handshake, delayed ACKs, NewReno fast
//! recovery without window inflation, go-back-N retransmission timeouts and a
//! fixed 64 KB receive window.

mod conn;
mod segment;
mod stack;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::Micros;

pub use conn::TcpState;
pub use segment::{
    unwrap_seq, TcpSegmentHeader, FLAG_ACK, FLAG_FIN, FLAG_RST, FLAG_SYN, SEGMENT_HEADER_LEN,
};
pub use stack::{ConnId, TcpStack};

pub const RECEIVE_WINDOW: usize = 65_535;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcpConfig {
    pub mss_bytes: usize,
    pub initial_cwnd_segments: u64,
    pub delayed_ack_factor: u32,
    pub delayed_ack_timeout_us: Micros,
    pub dupack_threshold: u32,
    pub rto_min_us: Micros,
    pub rto_initial_us: Micros,
    pub syn_retries: u32,
    /// Consecutive timeouts on established data before the connection is reset.
    pub data_retries: u32,
}

impl Default for TcpConfig {
    fn default() -> Self {
        Self {
            mss_bytes: 1160,
            initial_cwnd_segments: 10,
            delayed_ack_factor: 2,
            delayed_ack_timeout_us: 40_000,
            dupack_threshold: 3,
            rto_min_us: 200_000,
            rto_initial_us: 1_000_000,
            syn_retries: 6,
            data_retries: 15,
        }
    }
}

impl TcpConfig {
    pub fn with_initial_window(mut self, segments: u64) -> Self {
        self.initial_cwnd_segments = segments;
        self
    }

    pub fn validate(&self, link_mtu: usize) -> Result<(), TcpError> {
        let overhead = crate::net::IP_HEADER_LEN + SEGMENT_HEADER_LEN;
        if self.mss_bytes == 0 || self.mss_bytes + overhead > link_mtu {
            return Err(TcpError::InvalidConfig("mss does not fit the link mtu"));
        }
        if self.initial_cwnd_segments == 0 || self.delayed_ack_factor == 0 || self.dupack_threshold == 0 {
            return Err(TcpError::InvalidConfig("window and ack factors must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TcpError {
    #[error("connect timed out")]
    ConnectTimeout,
    #[error("connection refused")]
    ConnectionRefused,
    #[error("connection reset")]
    ConnectionReset,
    #[error("retransmissions exhausted")]
    TimedOut,
    #[error("connection is closed for sending")]
    NotWritable,
    #[error("unknown connection {0}")]
    UnknownConnection(u64),
    #[error("malformed segment")]
    Malformed,
    #[error("invalid tcp config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TcpEvent {
    /// A SYN was accepted; `local` is the address the peer dialed.
    Incoming {
        id: ConnId,
        local: std::net::SocketAddrV4,
        remote: std::net::SocketAddrV4,
    },
    Connected(ConnId),
    Readable(ConnId),
    /// The peer sent FIN; all of its data has been delivered.
    PeerClosed(ConnId),
    /// Both directions are finished.
    Closed(ConnId),
    Reset(ConnId, TcpError),
    ConnectFailed(ConnId, TcpError),
}
