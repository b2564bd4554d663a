//! Deterministic laboratory for an encrypted, multiplexed tunnel PEP over an
//! emulated satellite link, with split-TCP and VPN baselines.

pub mod link;
pub mod runtime;
pub mod congestion;
pub mod crypto;
pub mod transport;
pub mod net;
pub mod baseline;
pub mod pep;
pub mod testbed;
