//! Periodic background jobs. Each runs on a single timer, so a job never
//! overlaps with itself.

use std::time::Duration;

use chrono::Utc;
use tokio::sync::watch;
use tokio::time::MissedTickBehavior;

use tuhr_core::domain::BinState;

use crate::engine::Engine;

pub const DEFAULT_OFFLINE_TIMEOUT: Duration = Duration::from_secs(180);

fn ticker(every: Duration) -> tokio::time::Interval {
    let mut t = tokio::time::interval(every);
    t.set_missed_tick_behavior(MissedTickBehavior::Delay);
    t
}

/// Raise SENSOR_OFFLINE for bins silent longer than `timeout`, measured on
/// the engine's event clock.
pub async fn offline_scanner(
    engine: Engine,
    every: Duration,
    timeout: Duration,
    mut shutdown: watch::Receiver<bool>,
) {
    let Ok(timeout) = chrono::Duration::from_std(timeout) else {
        return;
    };
    let mut tick = ticker(every);
    loop {
        tokio::select! {
            _ = tick.tick() => {}
            _ = shutdown.changed() => return,
        }
        let Some(now) = engine.event_clock() else {
            continue;
        };
        match engine.offline_scan(now, timeout).await {
            Ok(raised) => {
                for a in raised {
                    log::info!("sensor offline: bin {} ({})", a.bin_id, a.alert_id);
                }
            }
            Err(e) => log::warn!("offline scan failed: {e}"),
        }
    }
}

fn plan_due(engine: &Engine) -> bool {
    let state = engine.read();
    match &state.plan {
        Some(p) => p.stale,
        None => state.bins.values().any(|b| b.state == BinState::Full),
    }
}

/// Recompute the dispatch plan when it went stale or when a bin is FULL and
/// no plan exists yet.
pub async fn planner(engine: Engine, every: Duration, mut shutdown: watch::Receiver<bool>) {
    let mut tick = ticker(every);
    loop {
        tokio::select! {
            _ = tick.tick() => {}
            _ = shutdown.changed() => return,
        }
        if !plan_due(&engine) {
            continue;
        }
        match engine.recompute_plan(Utc::now()).await {
            Ok(p) => log::info!("plan {} computed with {} routes", p.plan_id, p.routes.len()),
            Err(e) => log::warn!("plan recompute failed: {e}"),
        }
    }
}
