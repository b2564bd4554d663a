use std::path::PathBuf;

use satpep_bench::metrics::{mean_of, to_csv_string, Metric};
use satpep_bench::runner::{run_scenario, Mode};
use satpep_bench::{Scenario, WorkloadSpec};
use satpep_core::testbed::TransportKind;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(&root().join("../../scenarios").join(name)).unwrap()
}

#[test]
fn geo_page_load_records_match_pinned_csv() {
    let s = scenario("geo_page_load.json");
    let report = run_scenario(&s, Mode::preferred()).unwrap();
    let pinned = std::fs::read_to_string(root().join("tests/golden/geo_page_load.csv")).unwrap();
    assert_eq!(to_csv_string(&report.records), pinned);
}

#[test]
fn geo_bulk_parallel_goodputs_are_pinned() {
    let mut s = scenario("geo_bulk_parallel.json");
    if let WorkloadSpec::Bulk { repetitions, .. } = &mut s.workload {
        *repetitions = 1;
    }
    let report = run_scenario(&s, Mode::preferred()).unwrap();
    let pinned = [
        (TransportKind::Plain, 7_607_049.490798),
        (TransportKind::PepIntegrated, 7_607_806.179726),
        (TransportKind::PepDistributed, 8_466_141.518963),
        (TransportKind::Vpn, 917_062.222351),
        (TransportKind::Qpep, 7_094_678.574257),
    ];
    for (t, want) in pinned {
        let got = mean_of(&report.records, t, None, Metric::GoodputBps).unwrap();
        assert!((got - want).abs() < 1e-3, "{t}: {got} vs {want}");
    }
}
