use std::path::Path;

use serde::{Deserialize, Serialize};

use satpep_core::baseline::tcp::TcpConfig;
use satpep_core::link::LinkProfile;
use satpep_core::runtime::{Micros, MICROS_PER_SEC};
use satpep_core::testbed::{PageManifest, TestbedConfig, TransportKind, Workload};
use satpep_core::transport::TransportConfig;

use crate::BenchError;

pub const DEFAULT_REPETITIONS: u32 = 5;
pub const DEFAULT_DEADLINE_S: f64 = 120.0;
/// Added once per run index when deriving run seeds.
pub const RUN_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

fn default_seed() -> u64 {
    1
}

fn default_transports() -> Vec<TransportKind> {
    TransportKind::ALL.to_vec()
}

fn default_deadline() -> f64 {
    DEFAULT_DEADLINE_S
}

fn default_repetitions() -> u32 {
    DEFAULT_REPETITIONS
}

fn default_parallel() -> u32 {
    1
}

/// One experiment as read from a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub link: LinkProfile,
    #[serde(default)]
    pub transport_config: TransportConfig,
    #[serde(default)]
    pub tcp: TcpConfig,
    #[serde(default = "default_transports")]
    pub transports: Vec<TransportKind>,
    #[serde(default = "default_deadline")]
    pub deadline_s: f64,
    pub workload: WorkloadSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    Bulk {
        size_bytes: u64,
        #[serde(default = "default_parallel")]
        parallel_connections: u32,
        #[serde(default = "default_repetitions")]
        repetitions: u32,
    },
    PageLoad {
        #[serde(default)]
        manifest: PageManifest,
        #[serde(default = "default_repetitions")]
        repetitions: u32,
    },
    Echo {
        connections: u32,
        bytes: usize,
        #[serde(default = "default_repetitions")]
        repetitions: u32,
    },
    Sweep {
        base: Box<WorkloadSpec>,
        parameter: SweepParameter,
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    SnrDb,
    AckElicitationThreshold,
    InitialCwndPackets,
}

impl SweepParameter {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParameter::SnrDb => "snr_db",
            SweepParameter::AckElicitationThreshold => "ack_elicitation_threshold",
            SweepParameter::InitialCwndPackets => "initial_cwnd_packets",
        }
    }

    fn is_integral(self) -> bool {
        !matches!(self, SweepParameter::SnrDb)
    }

    fn apply(self, cfg: &mut TestbedConfig, value: f64) {
        match self {
            SweepParameter::SnrDb => cfg.link.set_snr(value),
            SweepParameter::AckElicitationThreshold => cfg.tunnel.ack_elicitation_threshold = value as u64,
            SweepParameter::InitialCwndPackets => cfg.tunnel.initial_cwnd_packets = value as u64,
        }
    }
}

impl WorkloadSpec {
    /// The non-sweep workload and its repetition count.
    pub fn leaf(&self) -> &WorkloadSpec {
        match self {
            WorkloadSpec::Sweep { base, .. } => base.leaf(),
            w => w,
        }
    }

    pub fn repetitions(&self) -> u32 {
        match self.leaf() {
            WorkloadSpec::Bulk { repetitions, .. }
            | WorkloadSpec::PageLoad { repetitions, .. }
            | WorkloadSpec::Echo { repetitions, .. } => *repetitions,
            WorkloadSpec::Sweep { .. } => unreachable!("leaf is never a sweep"),
        }
    }

    pub fn to_workload(&self) -> Workload {
        match self.leaf() {
            WorkloadSpec::Bulk {
                size_bytes,
                parallel_connections,
                ..
            } => Workload::Bulk {
                size_bytes: *size_bytes,
                parallel_connections: *parallel_connections,
            },
            WorkloadSpec::PageLoad { manifest, .. } => Workload::PageLoad {
                manifest: manifest.clone(),
            },
            WorkloadSpec::Echo { connections, bytes, .. } => Workload::Echo {
                connections: *connections,
                bytes: *bytes,
            },
            WorkloadSpec::Sweep { .. } => unreachable!("leaf is never a sweep"),
        }
    }

    pub fn sweep(&self) -> Option<(SweepParameter, &[f64])> {
        match self {
            WorkloadSpec::Sweep { parameter, values, .. } => Some((*parameter, values)),
            _ => None,
        }
    }

    fn validate(&self, nested: bool) -> Result<(), String> {
        match self {
            WorkloadSpec::Bulk {
                size_bytes,
                parallel_connections,
                repetitions,
            } => {
                if *size_bytes == 0 || *parallel_connections == 0 {
                    return Err("bulk needs a positive size and at least one connection".into());
                }
                check_reps(*repetitions)
            }
            WorkloadSpec::PageLoad { manifest, repetitions } => {
                manifest.validate()?;
                check_reps(*repetitions)
            }
            WorkloadSpec::Echo {
                connections,
                bytes,
                repetitions,
            } => {
                if *connections == 0 || *bytes == 0 {
                    return Err("echo needs at least one connection and one byte".into());
                }
                check_reps(*repetitions)
            }
            WorkloadSpec::Sweep {
                base,
                parameter,
                values,
            } => {
                if nested {
                    return Err("sweeps cannot be nested".into());
                }
                if values.is_empty() {
                    return Err("sweep needs at least one value".into());
                }
                for v in values {
                    if !v.is_finite() {
                        return Err(format!("{} value {v} is not finite", parameter.as_str()));
                    }
                    if parameter.is_integral() && (v.fract() != 0.0 || *v < 1.0) {
                        return Err(format!("{} values must be integers >= 1, got {v}", parameter.as_str()));
                    }
                }
                base.validate(true)
            }
        }
    }
}

fn check_reps(r: u32) -> Result<(), String> {
    if r == 0 {
        return Err("repetitions must be at least 1".into());
    }
    Ok(())
}

/// One independent simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Job {
    pub transport: TransportKind,
    pub value_index: usize,
    pub parameter_value: Option<f64>,
    pub run_index: u32,
    pub seed: u64,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| BenchError::Schema(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Schema(m));
        if self.name.is_empty() || self.name.contains(['/', '\\', ',']) {
            return bad(format!("scenario name {:?} must be non-empty without '/', '\\' or ','", self.name));
        }
        if self.transports.is_empty() {
            return bad("at least one transport is required".into());
        }
        if !(self.deadline_s > 0.0 && self.deadline_s.is_finite()) {
            return bad("deadline_s must be positive".into());
        }
        self.workload.validate(false).map_err(BenchError::Schema)?;
        self.config_for(TransportKind::Plain, self.seed)
            .validate()
            .map_err(|e| BenchError::Schema(e.to_string()))
    }

    pub fn deadline_us(&self) -> Micros {
        (self.deadline_s * MICROS_PER_SEC as f64).round() as Micros
    }

    pub fn parameter_name(&self) -> &'static str {
        self.workload.sweep().map_or("none", |(p, _)| p.as_str())
    }

    /// Base configuration for one run, before any sweep value is applied.
    pub fn config_for(&self, transport: TransportKind, seed: u64) -> TestbedConfig {
        let mut cfg = TestbedConfig::new(transport, self.link.clone(), seed);
        cfg.tunnel = self.transport_config.clone();
        cfg.tcp = self.tcp.clone();
        cfg.deadline_us = self.deadline_us();
        cfg
    }

    pub fn job_config(&self, job: &Job) -> TestbedConfig {
        let mut cfg = self.config_for(job.transport, job.seed);
        if let (Some((p, _)), Some(v)) = (self.workload.sweep(), job.parameter_value) {
            p.apply(&mut cfg, v);
        }
        cfg
    }

    /// Every run of the scenario in output order: transport, then value, then repetition.
    pub fn jobs(&self) -> Vec<Job> {
        let values: Vec<Option<f64>> = match self.workload.sweep() {
            Some((_, vs)) => vs.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        let reps = self.workload.repetitions();
        let mut out = Vec::new();
        for &transport in &self.transports {
            for (value_index, &parameter_value) in values.iter().enumerate() {
                for run_index in 0..reps {
                    out.push(Job {
                        transport,
                        value_index,
                        parameter_value,
                        run_index,
                        seed: run_seed(self.seed, value_index, run_index),
                    });
                }
            }
        }
        out
    }
}

/// `base + value_index`, then one stride per repetition.
pub fn run_seed(base: u64, value_index: usize, run_index: u32) -> u64 {
    base.wrapping_add(value_index as u64)
        .wrapping_add((run_index as u64).wrapping_mul(RUN_SEED_STRIDE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults() {
        let s = Scenario::from_json(r#"{"name":"p","workload":{"kind":"page_load"}}"#).unwrap();
        assert_eq!(s.seed, 1);
        assert_eq!(s.transports.len(), 5);
        assert_eq!(s.workload.repetitions(), 5);
        assert_eq!(s.link, LinkProfile::geo());
        assert_eq!(s.jobs().len(), 25);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let e = Scenario::from_json(r#"{"name":"p","colour":1,"workload":{"kind":"page_load"}}"#);
        assert!(matches!(e, Err(BenchError::Schema(_))));
        let e = Scenario::from_json(r#"{"name":"p","workload":{"kind":"bulk","size_bytes":1,"extra":2}}"#);
        assert!(matches!(e, Err(BenchError::Schema(_))));
    }

    #[test]
    fn sweep_values_are_checked() {
        let e = Scenario::from_json(
            r#"{"name":"s","workload":{"kind":"sweep","parameter":"ack_elicitation_threshold","values":[1.5],
                "base":{"kind":"bulk","size_bytes":10}}}"#,
        );
        assert!(matches!(e, Err(BenchError::Schema(_))));
        let e = Scenario::from_json(
            r#"{"name":"s","workload":{"kind":"sweep","parameter":"snr_db","values":[20],
                "base":{"kind":"sweep","parameter":"snr_db","values":[1],"base":{"kind":"bulk","size_bytes":10}}}}"#,
        );
        assert!(matches!(e, Err(BenchError::Schema(_))));
    }

    #[test]
    fn seeds_follow_value_then_run() {
        assert_eq!(run_seed(7, 0, 0), 7);
        assert_eq!(run_seed(7, 3, 0), 10);
        assert_eq!(run_seed(7, 3, 2), 10u64.wrapping_add(2u64.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    }

    #[test]
    fn sweep_value_lands_in_config() {
        let s = Scenario::from_json(
            r#"{"name":"s","transports":["qpep"],"workload":{"kind":"sweep","parameter":"snr_db","values":[20,12.5],
                "base":{"kind":"bulk","size_bytes":10000,"repetitions":2}}}"#,
        )
        .unwrap();
        let jobs = s.jobs();
        assert_eq!(jobs.len(), 4);
        let cfg = s.job_config(&jobs[2]);
        assert_eq!(jobs[2].parameter_value, Some(12.5));
        assert_eq!(cfg.link.attenuation_forward_db, 7.5);
        assert_eq!(s.parameter_name(), "snr_db");
    }
}
