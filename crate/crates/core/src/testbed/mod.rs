//! End-to-end testbed: a client LAN, a satellite terminal, the emulated
//! satellite hop, a gateway and terrestrial origin servers, wired together
//! for any of the five transports.

pub mod apps;
mod nodes;
pub mod workload;
mod world;

use std::net::{Ipv4Addr, SocketAddrV4};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::tcp::TcpConfig;
use crate::crypto::Psk;
use crate::link::{LinkProfile, ProfileError};
use crate::runtime::{LoopLimitExceeded, Micros, MICROS_PER_SEC};
use crate::transport::TransportConfig;

pub use apps::{Fetch, FetchKind, Marker};
pub use workload::{Driver, PageManifest, SubObject, Visit, Workload};
pub use world::{RunOutcome, Testbed};

pub const CLIENT_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);
pub const SERVER_BASE_IP: Ipv4Addr = Ipv4Addr::new(93, 184, 216, 34);
pub const TERMINAL_TUNNEL_IP: Ipv4Addr = Ipv4Addr::new(192, 168, 100, 1);
pub const GATEWAY_TUNNEL_IP: Ipv4Addr = Ipv4Addr::new(192, 168, 100, 2);
pub const DEFAULT_DEADLINE_US: Micros = 120 * MICROS_PER_SEC;

pub fn server_ip(host: usize) -> Ipv4Addr {
    Ipv4Addr::from(u32::from(SERVER_BASE_IP) + host as u32)
}

pub fn server_addr(host: usize, port: u16) -> SocketAddrV4 {
    SocketAddrV4::new(server_ip(host), port)
}

/// Index of the origin host owning `ip`, if any.
pub fn host_of(ip: Ipv4Addr, hosts: usize) -> Option<usize> {
    let idx = u32::from(ip).checked_sub(u32::from(SERVER_BASE_IP))? as usize;
    (idx < hosts).then_some(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    Plain,
    PepIntegrated,
    PepDistributed,
    Vpn,
    Qpep,
}

impl TransportKind {
    pub const ALL: [TransportKind; 5] = [
        TransportKind::Plain,
        TransportKind::PepIntegrated,
        TransportKind::PepDistributed,
        TransportKind::Vpn,
        TransportKind::Qpep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransportKind::Plain => "plain",
            TransportKind::PepIntegrated => "pep_integrated",
            TransportKind::PepDistributed => "pep_distributed",
            TransportKind::Vpn => "vpn",
            TransportKind::Qpep => "qpep",
        }
    }

    /// Whether application bytes cross the satellite hop encrypted.
    pub fn is_encrypted(self) -> bool {
        matches!(self, TransportKind::Vpn | TransportKind::Qpep)
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown transport {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error("invalid link profile: {0}")]
    Profile(#[from] ProfileError),
    #[error("invalid transport config: {0}")]
    Transport(String),
    #[error("invalid tcp config: {0}")]
    Tcp(String),
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error(transparent)]
    Runaway(#[from] LoopLimitExceeded),
}

/// Everything that defines one run besides the workload.
#[derive(Debug, Clone, PartialEq)]
pub struct TestbedConfig {
    pub transport: TransportKind,
    pub link: LinkProfile,
    pub tunnel: TransportConfig,
    pub tcp: TcpConfig,
    /// Initial window of split-relay connections that cross the satellite hop.
    pub sat_leg_initial_window: u64,
    pub lan_delay_ms: f64,
    pub lan_rate_bps: u64,
    pub terrestrial_rate_bps: u64,
    pub psk: Psk,
    pub seed: u64,
    pub deadline_us: Micros,
}

impl TestbedConfig {
    pub fn new(transport: TransportKind, link: LinkProfile, seed: u64) -> Self {
        Self {
            transport,
            link,
            tunnel: TransportConfig::default(),
            tcp: TcpConfig::default(),
            sat_leg_initial_window: 30,
            lan_delay_ms: 0.1,
            lan_rate_bps: 1_000_000_000,
            terrestrial_rate_bps: 1_000_000_000,
            psk: [0x5a; 32],
            seed,
            deadline_us: DEFAULT_DEADLINE_US,
        }
    }

    pub fn validate(&self) -> Result<(), TestbedError> {
        self.link.validate()?;
        self.tunnel.validate().map_err(TestbedError::Transport)?;
        self.tcp
            .validate(self.link.mtu_bytes)
            .map_err(|e| TestbedError::Tcp(e.to_string()))?;
        if self.sat_leg_initial_window == 0 {
            return Err(TestbedError::Tcp("sat_leg_initial_window must be positive".into()));
        }
        Ok(())
    }
}
