//! The tunnel PEP: a customer-side interceptor mapping TCP connections onto
//! streams of one encrypted session, and a gateway-side decapsulator.

pub mod client;
pub mod flowmap;
pub mod header;
pub mod server;

pub use client::{ClientSide, ClientStats, QpepClient, HOLD_DEADLINE_US};
pub use flowmap::{FlowMap, FlowState};
pub use header::{HeaderError, QpepHeader, QPEP_HEADER_LEN};
pub use server::{QpepServer, ServerSide, ServerStats};

/// RESET_STREAM codes.
pub const RESET_PEER_RST: u16 = 1;
pub const RESET_BAD_HEADER: u16 = 2;
pub const RESET_DIAL_FAILED: u16 = 3;
