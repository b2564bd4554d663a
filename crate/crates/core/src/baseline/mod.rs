//! Comparison transports: plain TCP, split-TCP relays and a TCP-over-TCP VPN.

pub mod relay;
pub mod tcp;
pub mod vpn;

pub use relay::{RelayMode, Side, SplitRelay};
pub use vpn::{VpnEndpoint, VpnRole, VpnStats, VPN_PORT};
