mod common;

use common::*;
use tuhr_core::simulator::{builtin, ScenarioConfig};
use tuhr_server::sim_client::{register_scenario, run_scenario, ClientOptions, SimError};

async fn run(cfg: &ScenarioConfig, connections: usize) -> (String, tuhr_server::sim_client::RunReport) {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path()).await;
    let base = format!("http://{}", srv.api_addr);
    register_scenario(&base, ADMIN.0, ADMIN.1, cfg).await.unwrap();
    // Registering twice is harmless.
    register_scenario(&base, ADMIN.0, ADMIN.1, cfg).await.unwrap();
    let opts = ClientOptions {
        connections,
        ..ClientOptions::default()
    };
    let report = run_scenario(cfg.clone(), srv.telemetry_addr, opts).await.unwrap();
    let bins = serde_json::to_string(&srv.engine().read().bins).unwrap();
    srv.shutdown().await.unwrap();
    (bins, report)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fig4_levels_reach_the_server() {
    let cfg = builtin("fig4_levels").unwrap();
    let (bins, report) = run(&cfg, 2).await;
    let bins: serde_json::Value = serde_json::from_str(&bins).unwrap();
    assert_eq!(bins["bin-001"]["state"], "EMPTY");
    assert_eq!(bins["bin-002"]["state"], "ALMOST_FULL");
    assert_eq!(bins["bin-003"]["state"], "FULL");
    let s = &report.stats;
    assert!(s.balanced(), "{s:?}");
    assert_eq!(s.acks_err, 0);
    assert_eq!(s.records_sent, 9);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn duplicates_do_not_change_the_outcome() {
    let mut cfg = builtin("fig4_levels").unwrap();
    cfg.duration_s = 600.0;
    for b in &mut cfg.bins {
        b.fill_rate_per_hr = 0.5;
        b.fill_jitter = 0.01;
    }
    let (clean, _) = run(&cfg, 1).await;
    cfg.faults.dup_prob = 1.0;
    let (dup, report) = run(&cfg, 3).await;
    assert_eq!(clean, dup);
    assert_eq!(report.stats.acks_dup, report.stats.records_sent / 2);
    assert!(report.stats.balanced());
}

#[tokio::test]
async fn refused_connection_is_reported() {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    let err = run_scenario(builtin("fig4_levels").unwrap(), addr, ClientOptions::default())
        .await
        .unwrap_err();
    assert!(matches!(err, SimError::ConnectionRefused { .. }));
    assert_eq!(err.code(), "CONNECTION_REFUSED");
}
