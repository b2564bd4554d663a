use satpep_core::runtime::Micros;
use satpep_core::testbed::{FetchKind, RunOutcome, Testbed, TransportKind, Workload};

use crate::metrics::{Metric, MetricRecord};
use crate::scenario::{Job, Scenario};
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Parallel,
    Sequential,
}

impl Mode {
    /// Parallel when the crate was built with it, sequential otherwise.
    pub fn preferred() -> Self {
        if cfg!(feature = "parallel") {
            Mode::Parallel
        } else {
            Mode::Sequential
        }
    }
}

/// What one run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct JobOutput {
    pub job: Job,
    pub records: Vec<MetricRecord>,
    pub marker_in_tap: bool,
    pub bytes_received: u64,
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub records: Vec<MetricRecord>,
    /// Runs whose tap contradicted the transport's confidentiality class.
    pub confidentiality_violations: Vec<String>,
}

pub fn run_job(scenario: &Scenario, job: &Job) -> Result<JobOutput, BenchError> {
    run_job_inspect(scenario, job, |_| ()).map(|(o, ())| o)
}

/// Like [`run_job`], also handing the finished testbed to `inspect`.
pub fn run_job_inspect<T>(
    scenario: &Scenario,
    job: &Job,
    inspect: impl FnOnce(&mut Testbed) -> T,
) -> Result<(JobOutput, T), BenchError> {
    let cfg = scenario.job_config(job);
    let workload = scenario.workload.to_workload();
    let mut tb = Testbed::new(cfg, workload.clone()).map_err(|e| BenchError::Run(e.to_string()))?;
    let outcome = tb.run().map_err(|e| BenchError::Run(e.to_string()))?;
    let records = records_for(scenario, job, &workload, &outcome);
    let seen = inspect(&mut tb);
    let out = JobOutput {
        job: *job,
        records,
        marker_in_tap: outcome.marker_in_tap,
        bytes_received: outcome.bytes_received(),
        outcome,
    };
    Ok((out, seen))
}

fn since(t: Micros, start: Micros) -> f64 {
    t.saturating_sub(start) as f64
}

/// Goodput over the workload's span; a run that did not finish is measured up to where it stopped.
pub fn goodput_bps(o: &RunOutcome) -> f64 {
    let Some(start) = o.workload_started_at else {
        return 0.0;
    };
    let end = if o.all_complete() {
        o.last_byte_at().unwrap_or(o.finished_at)
    } else {
        o.finished_at
    };
    let elapsed = end.saturating_sub(start).max(1);
    o.bytes_received() as f64 * 8.0 * 1e6 / elapsed as f64
}

fn records_for(scenario: &Scenario, job: &Job, workload: &Workload, o: &RunOutcome) -> Vec<MetricRecord> {
    let rec = |metric, value| MetricRecord {
        scenario: scenario.name.clone(),
        transport: job.transport,
        parameter_name: scenario.parameter_name().to_string(),
        parameter_value: job.parameter_value,
        run_index: job.run_index,
        metric,
        value,
    };
    let mut out = Vec::new();
    match workload {
        Workload::PageLoad { .. } => {
            let visit = o.measured_visit().filter(|_| o.visits.len() == 2);
            let completed = visit.is_some_and(|v| v.completed);
            if let Some(v) = visit {
                if let (true, Some(end)) = (completed, v.end) {
                    out.push(rec(Metric::PltUs, since(end, v.start)));
                }
                if let Some(t) = v.ttfb {
                    out.push(rec(Metric::TtfbUs, since(t, v.start)));
                }
            }
            out.push(rec(Metric::Completed, completed as u8 as f64));
        }
        Workload::Bulk { .. } | Workload::Echo { .. } => {
            out.push(rec(Metric::GoodputBps, goodput_bps(o)));
            let first = o.fetches.iter().filter_map(|f| f.first_byte_at).min();
            if let (Some(t), Some(start)) = (first, o.workload_started_at) {
                out.push(rec(Metric::TtfbUs, since(t, start)));
            }
            out.push(rec(Metric::Completed, o.all_complete() as u8 as f64));
        }
    }
    out
}

#[cfg(feature = "parallel")]
fn map_parallel(scenario: &Scenario, jobs: &[Job]) -> Vec<Result<JobOutput, BenchError>> {
    use rayon::prelude::*;
    jobs.par_iter().map(|j| run_job(scenario, j)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_parallel(scenario: &Scenario, jobs: &[Job]) -> Vec<Result<JobOutput, BenchError>> {
    map_sequential(scenario, jobs)
}

fn map_sequential(scenario: &Scenario, jobs: &[Job]) -> Vec<Result<JobOutput, BenchError>> {
    jobs.iter().map(|j| run_job(scenario, j)).collect()
}

/// Runs `jobs`; results come back in job order whatever the mode.
pub fn run_jobs(scenario: &Scenario, jobs: &[Job], mode: Mode) -> Result<Vec<JobOutput>, BenchError> {
    let results = match mode {
        Mode::Parallel => map_parallel(scenario, jobs),
        Mode::Sequential => map_sequential(scenario, jobs),
    };
    results.into_iter().collect()
}

/// Checks the tap of one run against what its transport is supposed to hide.
pub fn confidentiality_violation(out: &JobOutput) -> Option<String> {
    let t = out.job.transport;
    let what = if t.is_encrypted() && out.marker_in_tap {
        "marker visible on the satellite hop"
    } else if !t.is_encrypted() && !out.marker_in_tap && out.bytes_received > 0 && carries_marker(&out.outcome) {
        "cleartext transport carried data but the marker never appeared"
    } else {
        return None;
    };
    Some(format!("{t} seed {}: {what}", out.job.seed))
}

/// Requests and responses embed the marker; echo payloads do not.
fn carries_marker(o: &RunOutcome) -> bool {
    o.fetches.iter().any(|f| matches!(f.kind, FetchKind::Get { .. }))
}

pub fn run_scenario(scenario: &Scenario, mode: Mode) -> Result<ScenarioReport, BenchError> {
    let outputs = run_jobs(scenario, &scenario.jobs(), mode)?;
    Ok(ScenarioReport {
        confidentiality_violations: outputs.iter().filter_map(confidentiality_violation).collect(),
        records: outputs.into_iter().flat_map(|o| o.records).collect(),
    })
}

/// Keeps only the listed transports.
pub fn restrict(scenario: &mut Scenario, only: &[TransportKind]) {
    scenario.transports.retain(|t| only.contains(t));
}
