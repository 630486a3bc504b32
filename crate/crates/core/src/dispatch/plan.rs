use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::assignment::{solve_assignment, CostMatrix};
use super::routing::{order_route_nn, two_opt, Route, Stop};
use crate::domain::{BinRecord, BinState, Role, WorkerProfile};
use crate::geo::{haversine_m, GeoPoint};
use crate::scalar::Cost;

pub const CAPACITY_EXHAUSTED: &str = "CAPACITY_EXHAUSTED";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("no workers or no bins to match")]
    EmptyInput,
}

/// Which worker collects which bin.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// bin id to worker id
    pub assignments: BTreeMap<String, String>,
    /// worker id to bin ids, in the order they were assigned
    pub per_worker: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("worker capacity exhausted with {} bins unassigned", unassigned.len())]
pub struct CapacityExhausted {
    pub partial: Allocation,
    pub unassigned: Vec<String>,
}

pub fn cost_matrix_between<T: Float + Cost>(
    from: &[GeoPoint<T>],
    to: &[GeoPoint<T>],
) -> Result<CostMatrix<T>, DispatchError> {
    if from.is_empty() || to.is_empty() {
        return Err(DispatchError::EmptyInput);
    }
    Ok(CostMatrix::from_fn(from.len(), to.len(), |i, j| haversine_m(&from[i], &to[j]))
        .expect("haversine distances are finite and nonnegative"))
}

/// Worker start locations against bin locations, in meters.
pub fn build_cost_matrix(
    workers: &[WorkerProfile],
    bins: &[BinRecord],
) -> Result<CostMatrix<f64>, DispatchError> {
    let from: Vec<GeoPoint> = workers.iter().map(|w| w.start_location).collect();
    let to: Vec<GeoPoint> = bins.iter().map(|b| b.config.location).collect();
    cost_matrix_between(&from, &to)
}

/// Assign bins to workers in rounds of minimum-cost matching.
///
/// Each round matches up to one bin per worker with capacity left. From the
/// second round on, a worker's cost is measured from the last bin it was
/// given. Inputs are processed in id order so the result does not depend on
/// slice order.
pub fn assign_all(
    bins: &[BinRecord],
    workers: &[WorkerProfile],
) -> Result<Allocation, CapacityExhausted> {
    let mut left: Vec<&BinRecord> = bins.iter().collect();
    left.sort_by(|a, b| a.bin_id().cmp(b.bin_id()));
    let mut crew: Vec<(&WorkerProfile, u32, GeoPoint)> = workers
        .iter()
        .map(|w| (w, w.capacity, w.start_location))
        .collect();
    crew.sort_by(|a, b| a.0.worker_id.cmp(&b.0.worker_id));

    let mut out = Allocation::default();
    while !left.is_empty() {
        let active: Vec<usize> = (0..crew.len()).filter(|&k| crew[k].1 > 0).collect();
        if active.is_empty() {
            break;
        }
        let from: Vec<GeoPoint> = active.iter().map(|&k| crew[k].2).collect();
        let to: Vec<GeoPoint> = left.iter().map(|b| b.config.location).collect();
        let matrix = cost_matrix_between(&from, &to).expect("both sides nonempty");
        let matched = solve_assignment(&matrix);
        let mut taken = vec![false; left.len()];
        for (row, col) in matched.pairs {
            let (worker, remaining, at) = &mut crew[active[row]];
            let bin = left[col];
            *remaining -= 1;
            *at = bin.config.location;
            taken[col] = true;
            out.assignments
                .insert(bin.bin_id().to_owned(), worker.worker_id.clone());
            out.per_worker
                .entry(worker.worker_id.clone())
                .or_default()
                .push(bin.bin_id().to_owned());
        }
        let mut k = 0;
        left.retain(|_| {
            k += 1;
            !taken[k - 1]
        });
    }
    if left.is_empty() {
        Ok(out)
    } else {
        Err(CapacityExhausted {
            partial: out,
            unassigned: left.iter().map(|b| b.bin_id().to_owned()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub plan_id: String,
    pub created_ts: DateTime<Utc>,
    pub routes: Vec<Route>,
    pub stale: bool,
    /// Full bins left out because every worker hit capacity.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unassigned: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl DispatchPlan {
    pub fn total_length_m(&self) -> f64 {
        self.routes.iter().map(|r| r.length_m).sum()
    }

    pub fn stop_count(&self) -> usize {
        self.routes.iter().map(|r| r.stops.len()).sum()
    }
}

/// Route every FULL bin: assign to WORKER-role profiles, then order each
/// worker's bins by nearest neighbor and polish with 2-opt.
pub fn plan_dispatch(
    bins: &[BinRecord],
    workers: &[WorkerProfile],
    plan_id: &str,
    ts: DateTime<Utc>,
) -> DispatchPlan {
    let full: Vec<BinRecord> = bins
        .iter()
        .filter(|b| b.state == BinState::Full)
        .cloned()
        .collect();
    let crew: Vec<WorkerProfile> = workers
        .iter()
        .filter(|w| w.role == Role::Worker)
        .cloned()
        .collect();
    let mut plan = DispatchPlan {
        plan_id: plan_id.to_owned(),
        created_ts: ts,
        routes: Vec::new(),
        stale: false,
        unassigned: Vec::new(),
        error: None,
    };
    if full.is_empty() {
        return plan;
    }
    let allocation = match assign_all(&full, &crew) {
        Ok(a) => a,
        Err(e) => {
            plan.unassigned = e.unassigned;
            plan.error = Some(CAPACITY_EXHAUSTED.to_owned());
            e.partial
        }
    };
    let coords: BTreeMap<String, GeoPoint> = full
        .iter()
        .map(|b| (b.bin_id().to_owned(), b.config.location))
        .collect();
    for (worker_id, bin_ids) in &allocation.per_worker {
        let worker = crew
            .iter()
            .find(|w| &w.worker_id == worker_id)
            .expect("allocated worker exists");
        let stops: Vec<Stop> = bin_ids
            .iter()
            .map(|id| Stop {
                bin_id: id.clone(),
                location: coords[id],
            })
            .collect();
        let nn = order_route_nn(worker_id, &worker.start_location, &stops);
        plan.routes
            .push(two_opt(&nn, &coords, &worker.start_location));
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::BinConfig;
    use chrono::TimeZone;
    use std::collections::BTreeSet;

    fn origin() -> GeoPoint {
        GeoPoint::new(21.4225, 39.8262).unwrap()
    }

    fn bin(id: &str, at: GeoPoint, state: BinState) -> BinRecord {
        let mut r = BinRecord::new(BinConfig {
            bin_id: id.into(),
            sensor_id: format!("s-{id}"),
            location: at,
            zone_id: "z".into(),
            depth_cm: 100.0,
            full_offset_cm: 10.0,
        });
        r.state = state;
        r.fill = if state == BinState::Full { 0.95 } else { 0.1 };
        r
    }

    fn worker(id: &str, at: GeoPoint, capacity: u32) -> WorkerProfile {
        WorkerProfile {
            worker_id: id.into(),
            name: id.into(),
            start_location: at,
            capacity,
            role: Role::Worker,
        }
    }

    fn ts() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 6, 1, 12, 0, 0).unwrap()
    }

    #[test]
    fn cost_matrix_examples() {
        let o = origin();
        let m = build_cost_matrix(&[worker("w", o, 5)], &[bin("a", o, BinState::Full)]).unwrap();
        assert_eq!((m.rows(), m.cols(), m.get(0, 0)), (1, 1, 0.0));

        let p = o.offset_m(1000.0, 0.0);
        let ws = [worker("w1", o, 5), worker("w2", p, 5)];
        let bs = [bin("a", p, BinState::Full), bin("b", o.offset_m(0.0, 700.0), BinState::Full)];
        let m = build_cost_matrix(&ws, &bs).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(m.get(i, j), haversine_m(&ws[i].start_location, &bs[j].config.location));
            }
        }
        assert_eq!(build_cost_matrix(&ws, &[]).unwrap_err(), DispatchError::EmptyInput);
        assert_eq!(build_cost_matrix(&[], &bs).unwrap_err(), DispatchError::EmptyInput);
    }

    #[test]
    fn assign_all_examples() {
        let o = origin();
        let one = assign_all(&[bin("a", o.offset_m(10.0, 0.0), BinState::Full)], &[worker("w", o, 5)])
            .unwrap();
        assert_eq!(one.assignments["a"], "w");

        let three: Vec<BinRecord> = (0..3)
            .map(|k| bin(&format!("b{k}"), o.offset_m(100.0 * k as f64, 0.0), BinState::Full))
            .collect();
        let a = assign_all(&three, &[worker("w", o, 5)]).unwrap();
        assert_eq!(a.per_worker["w"], vec!["b0", "b1", "b2"]);

        let four: Vec<BinRecord> = (0..4)
            .map(|k| bin(&format!("b{k}"), o.offset_m(100.0 * k as f64, 0.0), BinState::Full))
            .collect();
        let err = assign_all(&four, &[worker("w1", o, 1), worker("w2", o, 1)]).unwrap_err();
        assert_eq!(err.partial.assignments.len(), 2);
        assert_eq!(err.unassigned.len(), 2);
    }

    #[test]
    fn no_full_bins_means_no_routes() {
        let o = origin();
        let plan = plan_dispatch(&[bin("a", o, BinState::AlmostFull)], &[worker("w", o, 5)], "p", ts());
        assert!(plan.routes.is_empty());
        assert!(!plan.stale);
    }

    #[test]
    fn fig4_levels_single_worker_gets_only_the_full_bin() {
        let o = origin();
        let bins = [
            bin("empty", o.offset_m(50.0, 0.0), BinState::Empty),
            bin("half", o.offset_m(80.0, 0.0), BinState::AlmostFull),
            bin("full", o.offset_m(120.0, 0.0), BinState::Full),
        ];
        let plan = plan_dispatch(&bins, &[worker("w", o, 5)], "p", ts());
        assert_eq!(plan.routes.len(), 1);
        assert_eq!(plan.routes[0].stops, vec!["full"]);
    }

    #[test]
    fn six_full_bins_two_workers() {
        let o = origin();
        let bins: Vec<BinRecord> = (0..6)
            .map(|k| bin(&format!("b{k}"), o.offset_m(300.0 * k as f64, 150.0 * (k % 2) as f64), BinState::Full))
            .collect();
        let ws = [worker("w1", o, 5), worker("w2", o.offset_m(1500.0, 0.0), 5)];
        let plan = plan_dispatch(&bins, &ws, "p", ts());
        assert_eq!(plan.routes.len(), 2);
        let mut seen = BTreeSet::new();
        for r in &plan.routes {
            assert!(r.stops.len() <= 5);
            for s in &r.stops {
                assert!(seen.insert(s.clone()), "{s} twice");
            }
        }
        let expected: BTreeSet<String> = bins.iter().map(|b| b.bin_id().to_owned()).collect();
        assert_eq!(seen, expected);
        assert!(plan.error.is_none());
    }

    #[test]
    fn admins_are_not_dispatched() {
        let o = origin();
        let mut admin = worker("boss", o, 5);
        admin.role = Role::Admin;
        let plan = plan_dispatch(&[bin("a", o, BinState::Full)], &[admin], "p", ts());
        assert!(plan.routes.is_empty());
        assert_eq!(plan.unassigned, vec!["a"]);
        assert_eq!(plan.error.as_deref(), Some(CAPACITY_EXHAUSTED));
    }

    #[test]
    fn plans_are_byte_identical_for_identical_inputs() {
        let o = origin();
        let bins: Vec<BinRecord> = (0..9)
            .map(|k| bin(&format!("b{k}"), o.offset_m(200.0 * (k % 3) as f64, 200.0 * (k / 3) as f64), BinState::Full))
            .collect();
        let ws = [worker("w1", o, 4), worker("w2", o.offset_m(400.0, 400.0), 4), worker("w3", o, 4)];
        let a = serde_json::to_string(&plan_dispatch(&bins, &ws, "p", ts())).unwrap();
        let mut rev_bins = bins.clone();
        rev_bins.reverse();
        let mut rev_ws = ws.to_vec();
        rev_ws.reverse();
        let b = serde_json::to_string(&plan_dispatch(&rev_bins, &rev_ws, "p", ts())).unwrap();
        assert_eq!(a, b);
    }
}
