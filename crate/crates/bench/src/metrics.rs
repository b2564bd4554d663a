use std::io::{Read, Write};
use std::path::Path;

use satpep_core::testbed::TransportKind;

use crate::BenchError;

pub const CSV_HEADER: [&str; 7] = [
    "scenario",
    "transport",
    "parameter_name",
    "parameter_value",
    "run_index",
    "metric_name",
    "value",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    GoodputBps,
    PltUs,
    TtfbUs,
    Completed,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::GoodputBps, Metric::PltUs, Metric::TtfbUs, Metric::Completed];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::GoodputBps => "goodput_bps",
            Metric::PltUs => "plt_us",
            Metric::TtfbUs => "ttfb_us",
            Metric::Completed => "completed",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

/// One observation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub scenario: String,
    pub transport: TransportKind,
    pub parameter_name: String,
    pub parameter_value: Option<f64>,
    pub run_index: u32,
    pub metric: Metric,
    pub value: f64,
}

/// Integral values print without a fractional part; everything else uses the
/// shortest representation that round-trips.
pub fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

fn format_param(v: Option<f64>) -> String {
    v.map(format_value).unwrap_or_default()
}

pub fn write_csv<W: Write>(records: &[MetricRecord], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in records {
        out.write_record([
            r.scenario.as_str(),
            r.transport.as_str(),
            r.parameter_name.as_str(),
            &format_param(r.parameter_value),
            &r.run_index.to_string(),
            r.metric.as_str(),
            &format_value(r.value),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn to_csv_string(records: &[MetricRecord]) -> String {
    let mut buf = Vec::new();
    write_csv(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn emit_csv(records: &[MetricRecord], path: &Path) -> Result<(), BenchError> {
    if records.is_empty() {
        return Err(BenchError::Empty);
    }
    let f = std::fs::File::create(path).map_err(|e| BenchError::io(path, e))?;
    write_csv(records, std::io::BufWriter::new(f)).map_err(|e| BenchError::Csv(path.display().to_string(), e.to_string()))
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<MetricRecord>, BenchError> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(|e| BenchError::Schema(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(BenchError::Schema(format!("unexpected csv header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (line, row) in rd.records().enumerate() {
        let row = row.map_err(|e| BenchError::Schema(e.to_string()))?;
        let bad = |what: &str| BenchError::Schema(format!("row {}: bad {what}", line + 1));
        let parameter_value = match &row[3] {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("parameter_value"))?),
        };
        out.push(MetricRecord {
            scenario: row[0].to_string(),
            transport: row[1].parse().map_err(|_| bad("transport"))?,
            parameter_name: row[2].to_string(),
            parameter_value,
            run_index: row[4].parse().map_err(|_| bad("run_index"))?,
            metric: row[5].parse().map_err(|_| bad("metric_name"))?,
            value: row[6].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(out)
}

pub fn load_csv(path: &Path) -> Result<Vec<MetricRecord>, BenchError> {
    let f = std::fs::File::open(path).map_err(|e| BenchError::io(path, e))?;
    read_csv(std::io::BufReader::new(f))
}

/// Grouping key for reports: transport and sweep value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Group {
    pub transport: TransportKind,
    pub parameter_value: Option<f64>,
}

/// Values of `metric` per group, groups in order of first appearance.
fn grouped(records: &[MetricRecord], metric: Metric) -> Vec<(Group, Vec<f64>)> {
    let mut out: Vec<(Group, Vec<f64>)> = Vec::new();
    for r in records.iter().filter(|r| r.metric == metric) {
        let g = Group {
            transport: r.transport,
            parameter_value: r.parameter_value,
        };
        match out.iter_mut().find(|(k, _)| *k == g) {
            Some((_, vs)) => vs.push(r.value),
            None => out.push((g, vec![r.value])),
        }
    }
    out
}

/// Sorted `(value, cumulative_fraction)` pairs.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter()
        .enumerate()
        .map(|(i, x)| (x, (i + 1) as f64 / n))
        .collect()
}

pub fn ecdf_by_group(records: &[MetricRecord], metric: Metric) -> Vec<(Group, Vec<(f64, f64)>)> {
    grouped(records, metric)
        .into_iter()
        .map(|(g, vs)| (g, ecdf(&vs)))
        .collect()
}

pub fn emit_ecdf<W: Write>(records: &[MetricRecord], metric: Metric, w: W) -> Result<(), BenchError> {
    if records.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| BenchError::Csv("ecdf".into(), e.to_string());
    out.write_record(["transport", "parameter_value", "value", "cumulative_fraction"])
        .map_err(err)?;
    for (g, points) in ecdf_by_group(records, metric) {
        for (v, f) in points {
            out.write_record([
                g.transport.as_str(),
                &format_param(g.parameter_value),
                &format_value(v),
                &format!("{f}"),
            ])
            .map_err(err)?;
        }
    }
    out.flush().map_err(|e| BenchError::Csv("ecdf".into(), e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(Stats {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            p95: v[rank - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub group: Group,
    pub metric: Metric,
    pub stats: Stats,
}

/// Mean, median and nearest-rank p95 per transport, sweep value and metric.
pub fn summarize(records: &[MetricRecord]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for metric in Metric::ALL {
        for (group, vs) in grouped(records, metric) {
            if let Some(stats) = Stats::of(&vs) {
                rows.push(SummaryRow { group, metric, stats });
            }
        }
    }
    rows
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], w: W) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| BenchError::Csv("summary".into(), e.to_string());
    out.write_record(["transport", "parameter_value", "metric_name", "count", "mean", "median", "p95"])
        .map_err(err)?;
    for r in rows {
        out.write_record([
            r.group.transport.as_str(),
            &format_param(r.group.parameter_value),
            r.metric.as_str(),
            &r.stats.count.to_string(),
            &format_value(r.stats.mean),
            &format_value(r.stats.median),
            &format_value(r.stats.p95),
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| BenchError::Csv("summary".into(), e.to_string()))
}

/// Mean of `metric` for one transport (and sweep value, if given).
pub fn mean_of(records: &[MetricRecord], transport: TransportKind, value: Option<f64>, metric: Metric) -> Option<f64> {
    let vs: Vec<f64> = records
        .iter()
        .filter(|r| r.transport == transport && r.metric == metric && r.parameter_value == value)
        .map(|r| r.value)
        .collect();
    Stats::of(&vs).map(|s| s.mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: TransportKind, v: Option<f64>, run: u32, m: Metric, value: f64) -> MetricRecord {
        MetricRecord {
            scenario: "s".into(),
            transport: t,
            parameter_name: if v.is_some() { "snr_db" } else { "none" }.into(),
            parameter_value: v,
            run_index: run,
            metric: m,
            value,
        }
    }

    #[test]
    fn single_record_ecdf_is_one_point() {
        assert_eq!(ecdf(&[42.0]), vec![(42.0, 1.0)]);
    }

    #[test]
    fn identical_values_summarize_to_that_value() {
        let s = Stats::of(&[3.5; 7]).unwrap();
        assert_eq!((s.mean, s.median, s.p95, s.count), (3.5, 3.5, 3.5, 7));
    }

    #[test]
    fn percentile_is_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        let s = Stats::of(&v).unwrap();
        assert_eq!(s.p95, 19.0);
        assert_eq!(s.median, 10.5);
        assert_eq!(s.mean, 10.5);
    }

    #[test]
    fn csv_round_trips() {
        let records = vec![
            rec(TransportKind::Qpep, None, 0, Metric::PltUs, 1_471_000.0),
            rec(TransportKind::Vpn, Some(12.5), 3, Metric::GoodputBps, 1234.5678),
            rec(TransportKind::PepIntegrated, Some(20.0), 1, Metric::Completed, 1.0),
        ];
        let text = to_csv_string(&records);
        assert!(text.starts_with("scenario,transport,parameter_name,parameter_value,run_index,metric_name,value\n"));
        assert!(text.contains("s,qpep,none,,0,plt_us,1471000\n"));
        assert!(text.contains("s,vpn,snr_db,12.5,3,goodput_bps,1234.5678\n"));
        assert_eq!(read_csv(text.as_bytes()).unwrap(), records);
    }

    #[test]
    fn bad_header_is_a_schema_error() {
        let e = read_csv("a,b\n1,2\n".as_bytes());
        assert!(matches!(e, Err(BenchError::Schema(_))));
    }

    #[test]
    fn summary_groups_by_transport_and_value() {
        let records = vec![
            rec(TransportKind::Plain, Some(20.0), 0, Metric::GoodputBps, 10.0),
            rec(TransportKind::Plain, Some(20.0), 1, Metric::GoodputBps, 20.0),
            rec(TransportKind::Plain, Some(12.0), 0, Metric::GoodputBps, 1.0),
        ];
        let rows = summarize(&records);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].stats.mean, 15.0);
        assert_eq!(rows[1].group.parameter_value, Some(12.0));
        assert_eq!(mean_of(&records, TransportKind::Plain, Some(20.0), Metric::GoodputBps), Some(15.0));
    }

    #[test]
    fn ecdf_output_lists_every_point() {
        let records = vec![
            rec(TransportKind::Qpep, None, 0, Metric::PltUs, 2.0),
            rec(TransportKind::Qpep, None, 1, Metric::PltUs, 1.0),
        ];
        let mut buf = Vec::new();
        emit_ecdf(&records, Metric::PltUs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "transport,parameter_value,value,cumulative_fraction\nqpep,,1,0.5\nqpep,,2,1\n"
        );
    }
}
