use satpep_core::link::{DelayModel, LinkProfile};
use satpep_core::testbed::{PageManifest, Testbed, TestbedConfig, TransportKind, Workload};

use TransportKind::*;

fn bulk(t: TransportKind, size: u64, conns: u32, seed: u64) -> (Testbed, satpep_core::testbed::RunOutcome) {
    let mut tb = Testbed::new(
        TestbedConfig::new(t, LinkProfile::geo(), seed),
        Workload::Bulk {
            size_bytes: size,
            parallel_connections: conns,
        },
    )
    .unwrap();
    let o = tb.run().unwrap();
    (tb, o)
}

#[test]
fn every_transport_completes_a_small_bulk_transfer_intact() {
    for t in TransportKind::ALL {
        let (_, o) = bulk(t, 50_000, 3, 1);
        assert!(o.all_complete(), "{t}");
        assert!(!o.timed_out, "{t}");
        assert_eq!(o.bytes_received(), 150_000, "{t}");
        assert!(o.fetches.iter().all(|f| f.intact), "{t}");
    }
}

#[test]
fn same_seed_same_trace() {
    for t in TransportKind::ALL {
        let (_, a) = bulk(t, 30_000, 2, 9);
        let (_, b) = bulk(t, 30_000, 2, 9);
        assert_eq!(a.trace_digest, b.trace_digest, "{t}");
        assert_eq!(a, b, "{t}");
    }
}

#[test]
fn distributed_relay_opens_one_satellite_leg_per_connection() {
    let (tb, o) = bulk(PepDistributed, 10_000, 7, 1);
    assert!(o.all_complete());
    assert_eq!(tb.relay_onward_legs(), Some(7));
    let (tb, _) = bulk(Qpep, 10_000, 7, 1);
    assert_eq!(tb.relay_onward_legs(), None);
}

#[test]
fn only_tunnel_transports_wait_for_readiness() {
    for t in TransportKind::ALL {
        let (_, o) = bulk(t, 1_000, 1, 1);
        let ready = o.tunnel_ready_at.unwrap();
        assert_eq!(ready > 0, matches!(t, Qpep | Vpn), "{t}");
        assert!(o.workload_started_at.unwrap() >= ready, "{t}");
    }
}

#[test]
fn tunnel_session_is_reused_by_every_connection() {
    let (tb, o) = bulk(Qpep, 5_000, 20, 4);
    assert!(o.all_complete());
    assert_eq!(o.handshake_datagrams, 2);
    let c = tb.qpep_client().unwrap();
    assert_eq!(c.stats().sessions_started, 1);
    assert_eq!(c.stats().flows_opened, 20);
}

#[test]
fn vpn_carrier_authenticates_every_record() {
    let (tb, o) = bulk(Vpn, 100_000, 2, 2);
    assert!(o.all_complete());
    let s = tb.vpn_client().unwrap().stats();
    assert_eq!(s.auth_failures, 0);
    assert!(s.records_received > 0 && s.records_sent > 0);
}

#[test]
fn page_load_runs_warmup_then_measured_visit() {
    let mut tb = Testbed::new(
        TestbedConfig::new(Qpep, LinkProfile::geo(), 1),
        Workload::PageLoad {
            manifest: PageManifest::default(),
        },
    )
    .unwrap();
    let o = tb.run().unwrap();
    assert_eq!(o.visits.len(), 2);
    let v = o.measured_visit().unwrap();
    assert!(v.completed);
    assert!(v.start >= o.visits[0].end.unwrap());
    assert!(v.ttfb.unwrap() <= v.end.unwrap());
}

#[test]
fn page_load_over_tunnel_beats_plain_tcp() {
    let plt = |t| {
        let mut tb = Testbed::new(
            TestbedConfig::new(t, LinkProfile::geo(), 1),
            Workload::PageLoad {
                manifest: PageManifest::default(),
            },
        )
        .unwrap();
        let o = tb.run().unwrap();
        let v = o.measured_visit().unwrap();
        v.end.unwrap() - v.start
    };
    assert!(plt(Qpep) < plt(Plain));
}

#[test]
fn lossy_link_still_delivers_exact_bytes() {
    for t in TransportKind::ALL {
        let mut link = LinkProfile::geo();
        link.injected_loss = 0.05;
        let mut cfg = TestbedConfig::new(t, link, 3);
        cfg.deadline_us = 600_000_000;
        let mut tb = Testbed::new(
            cfg,
            Workload::Echo {
                connections: 2,
                bytes: 20_000,
            },
        )
        .unwrap();
        let o = tb.run().unwrap();
        assert!(o.all_complete(), "{t}");
        assert!(o.fetches.iter().all(|f| f.intact), "{t}");
    }
}

#[test]
fn shorter_delay_means_earlier_tunnel_readiness() {
    let ready = |ms: f64| {
        let mut link = LinkProfile::geo();
        link.forward_delay = DelayModel::Constant { one_way_ms: ms };
        link.return_delay = DelayModel::Constant { one_way_ms: ms };
        let mut tb = Testbed::new(
            TestbedConfig::new(Qpep, link, 1),
            Workload::Bulk {
                size_bytes: 1_000,
                parallel_connections: 1,
            },
        )
        .unwrap();
        tb.run().unwrap().tunnel_ready_at.unwrap()
    };
    let (geo, leo) = (ready(250.0), ready(25.0));
    assert_eq!(geo - leo, 2 * 225_000);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = TestbedConfig::new(Qpep, LinkProfile::geo(), 1);
    cfg.sat_leg_initial_window = 0;
    assert!(Testbed::new(cfg, Workload::Bulk { size_bytes: 1, parallel_connections: 1 }).is_err());
    let cfg = TestbedConfig::new(Qpep, LinkProfile::geo(), 1);
    assert!(Testbed::new(cfg, Workload::Bulk { size_bytes: 1, parallel_connections: 0 }).is_err());
}
