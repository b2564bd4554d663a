use serde::{Deserialize, Serialize};

use super::apps::{ClientApp, FetchKind, ECHO_PORT, HTTP_PORT};
use super::server_addr;
use crate::baseline::tcp::TcpStack;
use crate::runtime::{Micros, RngStream};

/// Synthetic web page: one root object, then every sub-object at once on
/// fresh connections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageManifest {
    pub root_object_bytes: u64,
    pub sub_objects: Vec<SubObject>,
    /// Terrestrial one-way delay to each origin host; the root lives on host 0.
    pub host_delays_ms: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubObject {
    pub host: usize,
    pub size_bytes: u64,
}

impl Default for PageManifest {
    fn default() -> Self {
        Self {
            root_object_bytes: 50_000,
            sub_objects: (0..20)
                .map(|i| SubObject {
                    host: i % 4,
                    size_bytes: 20_000,
                })
                .collect(),
            host_delays_ms: vec![10.0; 4],
        }
    }
}

impl PageManifest {
    pub fn validate(&self) -> Result<(), String> {
        if self.root_object_bytes == 0 || self.sub_objects.iter().any(|s| s.size_bytes == 0) {
            return Err("object sizes must be positive".into());
        }
        if self.host_delays_ms.is_empty() {
            return Err("manifest needs at least one host".into());
        }
        if let Some(s) = self.sub_objects.iter().find(|s| s.host >= self.host_delays_ms.len()) {
            return Err(format!("sub-object refers to unknown host {}", s.host));
        }
        if self.host_delays_ms.iter().any(|d| !(*d >= 0.0)) {
            return Err("host delays must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Workload {
    /// `parallel_connections` downloads of `size_bytes` each, all at once.
    Bulk { size_bytes: u64, parallel_connections: u32 },
    /// A warm-up visit followed by one measured visit.
    PageLoad { manifest: PageManifest },
    /// Connections that send random bytes to the echo port and expect them back.
    Echo { connections: u32, bytes: usize },
}

impl Workload {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Workload::Bulk {
                size_bytes,
                parallel_connections,
            } => {
                if *parallel_connections == 0 || *size_bytes == 0 {
                    return Err("bulk needs at least one connection and one byte".into());
                }
                Ok(())
            }
            Workload::Echo { connections, bytes } => {
                if *connections == 0 || *bytes == 0 {
                    return Err("echo needs at least one connection and one byte".into());
                }
                Ok(())
            }
            Workload::PageLoad { manifest } => manifest.validate(),
        }
    }

    pub fn host_delays_ms(&self) -> Vec<f64> {
        match self {
            Workload::PageLoad { manifest } => manifest.host_delays_ms.clone(),
            _ => vec![10.0],
        }
    }
}

/// One page visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visit {
    pub start: Micros,
    pub ttfb: Option<Micros>,
    pub end: Option<Micros>,
    pub completed: bool,
}

const VISITS: usize = 2;

#[derive(Debug)]
enum Phase {
    Idle,
    Root { visit: usize, fetch: usize },
    Subs { visit: usize, pending: usize },
    Done,
}

/// Starts fetches as the workload dictates and notices when it is over.
#[derive(Debug)]
pub struct Driver {
    workload: Workload,
    rng: RngStream,
    phase: Phase,
    started_at: Option<Micros>,
    outstanding: usize,
    pub visits: Vec<Visit>,
}

impl Driver {
    pub fn new(workload: Workload, rng: RngStream) -> Self {
        Self {
            workload,
            rng,
            phase: Phase::Idle,
            started_at: None,
            outstanding: 0,
            visits: Vec::new(),
        }
    }

    pub fn started_at(&self) -> Option<Micros> {
        self.started_at
    }

    pub fn is_done(&self) -> bool {
        matches!(self.phase, Phase::Done)
    }

    pub fn start(&mut self, app: &mut ClientApp, stack: &mut TcpStack, now: Micros) {
        if self.started_at.is_some() {
            return;
        }
        self.started_at = Some(now);
        match self.workload.clone() {
            Workload::Bulk {
                size_bytes,
                parallel_connections,
            } => {
                for i in 0..parallel_connections {
                    app.start(stack, now, i, server_addr(0, HTTP_PORT), FetchKind::Get { size: size_bytes });
                }
                self.outstanding = parallel_connections as usize;
                self.phase = Phase::Subs { visit: 0, pending: self.outstanding };
            }
            Workload::Echo { connections, bytes } => {
                for i in 0..connections {
                    let mut data = vec![0u8; bytes];
                    self.rng.fill_bytes(&mut data);
                    app.start(stack, now, i, server_addr(0, ECHO_PORT), FetchKind::Echo { data });
                }
                self.outstanding = connections as usize;
                self.phase = Phase::Subs { visit: 0, pending: self.outstanding };
            }
            Workload::PageLoad { .. } => self.begin_visit(app, stack, now, 0),
        }
        if self.outstanding == 0 && !matches!(self.phase, Phase::Root { .. }) {
            self.phase = Phase::Done;
        }
    }

    fn begin_visit(&mut self, app: &mut ClientApp, stack: &mut TcpStack, now: Micros, visit: usize) {
        let Workload::PageLoad { manifest } = &self.workload else {
            return;
        };
        let size = manifest.root_object_bytes;
        let fetch = app.start(stack, now, 0, server_addr(0, HTTP_PORT), FetchKind::Get { size });
        self.visits.push(Visit {
            start: now,
            ttfb: None,
            end: None,
            completed: false,
        });
        self.phase = Phase::Root { visit, fetch };
    }

    /// Called when fetch `idx` has finished one way or another.
    pub fn on_settled(&mut self, app: &mut ClientApp, stack: &mut TcpStack, now: Micros, idx: usize) {
        match self.phase {
            Phase::Root { visit, fetch } if fetch == idx => {
                let f = &app.fetches()[idx];
                self.visits[visit].ttfb = f.first_byte_at;
                if !f.is_complete() {
                    self.visits[visit].end = Some(now);
                    self.next_visit(app, stack, now, visit);
                    return;
                }
                let Workload::PageLoad { manifest } = &self.workload else {
                    return;
                };
                let subs = manifest.sub_objects.clone();
                for (k, s) in subs.iter().enumerate() {
                    let tag = k as u32 + 1;
                    app.start(stack, now, tag, server_addr(s.host, HTTP_PORT), FetchKind::Get { size: s.size_bytes });
                }
                self.phase = Phase::Subs { visit, pending: subs.len() };
                if subs.is_empty() {
                    self.finish_visit(app, stack, now, visit);
                }
            }
            Phase::Subs { visit, pending } => {
                if pending > 1 {
                    self.phase = Phase::Subs { visit, pending: pending - 1 };
                    return;
                }
                match self.workload {
                    Workload::PageLoad { .. } => self.finish_visit(app, stack, now, visit),
                    _ => self.phase = Phase::Done,
                }
            }
            _ => {}
        }
    }

    fn finish_visit(&mut self, app: &mut ClientApp, stack: &mut TcpStack, now: Micros, visit: usize) {
        let subs = self.sub_count();
        let ours = &app.fetches()[app.fetches().len() - subs - 1..];
        let v = &mut self.visits[visit];
        v.completed = ours.iter().all(|f| f.is_complete());
        v.end = ours.iter().filter_map(|f| f.last_byte_at).max().or(Some(now));
        self.next_visit(app, stack, now, visit);
    }

    fn next_visit(&mut self, app: &mut ClientApp, stack: &mut TcpStack, now: Micros, visit: usize) {
        if visit + 1 < VISITS {
            self.begin_visit(app, stack, now, visit + 1);
        } else {
            self.phase = Phase::Done;
        }
    }

    fn sub_count(&self) -> usize {
        match &self.workload {
            Workload::PageLoad { manifest } => manifest.sub_objects.len(),
            _ => 0,
        }
    }
}
