//! Encrypted, multiplexed, reliable-stream transport over datagrams.
//!
//! A [`Session`] performs a one-round-trip PSK handshake, then carries any
//! number of independent byte streams in AEAD-protected packets, with
//! configurable acknowledgement decimation and Reno-style congestion control.

mod config;
mod endpoint;
pub mod frame;
pub mod packet;
mod ranges;
mod session;
mod stream;
pub mod varint;

use thiserror::Error;

pub use config::TransportConfig;
pub use endpoint::ServerEndpoint;
pub use frame::{AckFrame, Frame};
pub use packet::{Handshake, PacketHeader, HEADER_LEN, RANDOM_LEN};
pub use ranges::RangeSet;
pub use session::{Role, Session, SessionEvent, SessionStats};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated input")]
    Truncated,
    #[error("varint longer than 64 bits")]
    VarintOverflow,
    #[error("unknown frame type {0:#04x}")]
    BadFrame(u8),
    #[error("invalid ack ranges")]
    BadAckRange,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("malformed handshake")]
    BadHandshake,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("handshake timed out")]
    HandshakeTimeout,
    #[error("first protected packet failed authentication")]
    AuthFailure,
    #[error("stream limit reached")]
    StreamLimitExceeded,
    #[error("stream already finished")]
    StreamClosed,
    #[error("unknown stream {0}")]
    UnknownStream(u64),
    #[error("session not established")]
    NotEstablished,
    #[error("protocol violation: {0}")]
    ProtocolViolation(&'static str),
    #[error("persistent loss: probe retries exhausted")]
    PersistentLoss,
    #[error("idle timeout")]
    IdleTimeout,
    #[error("peer closed with code {0}")]
    PeerClosed(u16),
    #[error("closed locally")]
    LocallyClosed,
}

#[cfg(test)]
mod tests;
