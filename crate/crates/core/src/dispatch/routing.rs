//! Per-worker stop ordering: nearest-neighbor construction followed by
//! best-improvement 2-opt on the open path from the worker's start.

use std::collections::BTreeMap;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::geo::{haversine_m, GeoPoint};

/// Reversals must shorten the path by more than this many meters.
pub const TWO_OPT_EPSILON_M: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stop<T = f64> {
    pub bin_id: String,
    pub location: GeoPoint<T>,
}

/// An open path: start location, then each stop in order, no return leg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route<T = f64> {
    pub worker_id: String,
    pub stops: Vec<String>,
    pub length_m: T,
}

pub fn path_length<T: Float>(start: &GeoPoint<T>, points: &[GeoPoint<T>]) -> T {
    let mut prev = start;
    let mut total = T::zero();
    for p in points {
        total = total + haversine_m(prev, p);
        prev = p;
    }
    total
}

/// Recompute a route's length from coordinates.
pub fn route_length<T: Float>(
    route: &Route<T>,
    coords: &BTreeMap<String, GeoPoint<T>>,
    start: &GeoPoint<T>,
) -> T {
    let points: Vec<GeoPoint<T>> = route.stops.iter().map(|id| lookup(coords, id)).collect();
    path_length(start, &points)
}

fn lookup<T: Float>(coords: &BTreeMap<String, GeoPoint<T>>, id: &str) -> GeoPoint<T> {
    *coords
        .get(id)
        .unwrap_or_else(|| panic!("no coordinates for stop {id}"))
}

/// Greedy nearest-neighbor order from `start`; equal distances go to the
/// smaller bin id.
pub fn order_route_nn<T: Float>(worker_id: &str, start: &GeoPoint<T>, stops: &[Stop<T>]) -> Route<T> {
    let mut remaining: Vec<&Stop<T>> = stops.iter().collect();
    remaining.sort_by(|a, b| a.bin_id.cmp(&b.bin_id));
    let mut order = Vec::with_capacity(remaining.len());
    let mut at = *start;
    let mut length = T::zero();
    while !remaining.is_empty() {
        let mut best = 0;
        let mut best_d = haversine_m(&at, &remaining[0].location);
        for (k, s) in remaining.iter().enumerate().skip(1) {
            let d = haversine_m(&at, &s.location);
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        let next = remaining.remove(best);
        length = length + best_d;
        at = next.location;
        order.push(next.bin_id.clone());
    }
    Route {
        worker_id: worker_id.to_owned(),
        stops: order,
        length_m: length,
    }
}

/// Distance table over `[start, p_1, .., p_n]`.
fn distance_table<T: Float>(start: &GeoPoint<T>, points: &[GeoPoint<T>]) -> Vec<Vec<T>> {
    let all: Vec<GeoPoint<T>> = std::iter::once(*start).chain(points.iter().copied()).collect();
    all.iter()
        .map(|a| all.iter().map(|b| haversine_m(a, b)).collect())
        .collect()
}

/// Length change from reversing stops `i..=j` (1-based positions in the
/// node sequence whose position 0 is the fixed start).
fn reversal_gain<T: Float>(d: &[Vec<T>], tour: &[usize], i: usize, j: usize) -> T {
    let n = tour.len() - 1;
    let before = tour[i - 1];
    let first = tour[i];
    let last = tour[j];
    let mut delta = d[before][last] - d[before][first];
    if j < n {
        let after = tour[j + 1];
        delta = delta + d[first][after] - d[last][after];
    }
    delta
}

/// The most improving reversal `(i, j, delta)` with `1 <= i < j <= n`, if any
/// shortens the path by more than [`TWO_OPT_EPSILON_M`]. Ties keep the
/// first `(i, j)` in scan order.
fn best_move<T: Float>(d: &[Vec<T>], tour: &[usize]) -> Option<(usize, usize, T)> {
    let n = tour.len() - 1;
    let eps = T::from(TWO_OPT_EPSILON_M).unwrap();
    let mut best: Option<(usize, usize, T)> = None;
    for i in 1..n {
        for j in i + 1..=n {
            let delta = reversal_gain(d, tour, i, j);
            if delta < -eps && best.is_none_or(|(_, _, b)| delta < b) {
                best = Some((i, j, delta));
            }
        }
    }
    best
}

/// Apply best-improvement 2-opt until no reversal helps. The start stays
/// fixed and the path stays open, so reversing a suffix is a valid move.
pub fn two_opt<T: Float>(
    route: &Route<T>,
    coords: &BTreeMap<String, GeoPoint<T>>,
    start: &GeoPoint<T>,
) -> Route<T> {
    let points: Vec<GeoPoint<T>> = route.stops.iter().map(|id| lookup(coords, id)).collect();
    let d = distance_table(start, &points);
    // node 0 is the start, node k is route.stops[k - 1]
    let mut tour: Vec<usize> = (0..=points.len()).collect();
    while let Some((i, j, _)) = best_move(&d, &tour) {
        tour[i..=j].reverse();
    }
    let stops: Vec<String> = tour[1..].iter().map(|&k| route.stops[k - 1].clone()).collect();
    let ordered: Vec<GeoPoint<T>> = tour[1..].iter().map(|&k| points[k - 1]).collect();
    Route {
        worker_id: route.worker_id.clone(),
        stops,
        length_m: path_length(start, &ordered),
    }
}

/// Whether any single reversal would shorten the route; used to audit
/// local optimality.
pub fn has_improving_move<T: Float>(
    route: &Route<T>,
    coords: &BTreeMap<String, GeoPoint<T>>,
    start: &GeoPoint<T>,
) -> bool {
    let points: Vec<GeoPoint<T>> = route.stops.iter().map(|id| lookup(coords, id)).collect();
    let d = distance_table(start, &points);
    let tour: Vec<usize> = (0..=points.len()).collect();
    best_move(&d, &tour).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn origin() -> GeoPoint {
        GeoPoint::new(21.4225, 39.8262).unwrap()
    }

    fn stop(id: &str, p: GeoPoint) -> Stop {
        Stop {
            bin_id: id.into(),
            location: p,
        }
    }

    fn coords(stops: &[Stop]) -> BTreeMap<String, GeoPoint> {
        stops.iter().map(|s| (s.bin_id.clone(), s.location)).collect()
    }

    fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for k in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(k);
            for mut tail in permutations(&rest) {
                tail.insert(0, head);
                out.push(tail);
            }
        }
        out
    }

    #[test]
    fn single_stop() {
        let s = [stop("a", origin().offset_m(100.0, 0.0))];
        let r = order_route_nn("w", &origin(), &s);
        assert_eq!(r.stops, vec!["a"]);
        assert!((r.length_m - 100.0).abs() < 0.1);
        assert_eq!(two_opt(&r, &coords(&s), &origin()), r);
    }

    #[test]
    fn collinear_stops_in_order() {
        let o = origin();
        let s = [
            stop("c", o.offset_m(3000.0, 0.0)),
            stop("a", o.offset_m(1000.0, 0.0)),
            stop("b", o.offset_m(2000.0, 0.0)),
        ];
        let r = order_route_nn("w", &o, &s);
        assert_eq!(r.stops, vec!["a", "b", "c"]);
    }

    #[test]
    fn nearest_first() {
        let o = origin();
        let s = [stop("west", o.offset_m(-5000.0, 0.0)), stop("east", o.offset_m(1000.0, 0.0))];
        assert_eq!(order_route_nn("w", &o, &s).stops, vec!["east", "west"]);
    }

    #[test]
    fn equidistant_ties_go_to_smaller_id() {
        let o = origin();
        let s = [stop("b", o.offset_m(0.0, 1000.0)), stop("a", o.offset_m(0.0, 1000.0))];
        assert_eq!(order_route_nn("w", &o, &s).stops, vec!["a", "b"]);
    }

    #[test]
    fn two_stops_from_nn_are_left_alone() {
        let o = origin();
        let s = [stop("a", o.offset_m(500.0, 0.0)), stop("b", o.offset_m(900.0, 300.0))];
        let r = order_route_nn("w", &o, &s);
        assert_eq!(two_opt(&r, &coords(&s), &o), r);
    }

    #[test]
    fn unit_square_crossing_is_removed() {
        // corners ~1 km apart, start just outside the south-west corner
        let sw = origin();
        let se = sw.offset_m(1000.0, 0.0);
        let ne = sw.offset_m(1000.0, 1000.0);
        let nw = sw.offset_m(0.0, 1000.0);
        let start = sw.offset_m(-200.0, -200.0);
        let s = [stop("sw", sw), stop("se", se), stop("ne", ne), stop("nw", nw)];
        let c = coords(&s);
        let crossing = Route {
            worker_id: "w".into(),
            stops: vec!["sw".into(), "ne".into(), "se".into(), "nw".into()],
            length_m: 0.0,
        };
        let input_len = route_length(&crossing, &c, &start);
        let out = two_opt(&crossing, &c, &start);
        assert!(out.length_m < input_len - 1.0);
        assert!(!has_improving_move(&out, &c, &start));

        // the result is one of the 2-opt local optima found by enumerating all 24 orders
        let ids = ["sw", "se", "ne", "nw"];
        let local_optima: Vec<Vec<String>> = permutations(&[0, 1, 2, 3])
            .into_iter()
            .map(|p| Route {
                worker_id: "w".into(),
                stops: p.iter().map(|&k| ids[k].to_string()).collect(),
                length_m: 0.0,
            })
            .filter(|r| !has_improving_move(r, &c, &start))
            .map(|r| r.stops)
            .collect();
        assert!(local_optima.contains(&out.stops));
        assert!(!local_optima.contains(&crossing.stops));
    }

    #[test]
    fn far_then_near_pair_gets_swapped() {
        let o = origin();
        let s = [stop("near", o.offset_m(100.0, 0.0)), stop("far", o.offset_m(5000.0, 0.0))];
        let r = Route {
            worker_id: "w".into(),
            stops: vec!["far".into(), "near".into()],
            length_m: 0.0,
        };
        assert_eq!(two_opt(&r, &coords(&s), &o).stops, vec!["near", "far"]);
    }

    #[test]
    fn works_in_single_precision() {
        let o = GeoPoint::<f32>::new(21.4225, 39.8262).unwrap();
        let s: Vec<Stop<f32>> = [(3000.0, 0.0), (1000.0, 10.0), (2000.0, -10.0)]
            .iter()
            .enumerate()
            .map(|(k, &(e, n))| Stop {
                bin_id: format!("b{k}"),
                location: o.offset_m(e, n),
            })
            .collect();
        let r = order_route_nn("w", &o, &s);
        assert_eq!(r.stops, vec!["b1", "b2", "b0"]);
    }

    fn stops_strategy() -> impl Strategy<Value = Vec<Stop>> {
        prop::collection::vec((-3000.0..3000.0f64, -3000.0..3000.0f64), 1..=7).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(k, (e, n))| stop(&format!("b{k}"), origin().offset_m(e, n)))
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn two_opt_improves_nn_and_bounds_hold(s in stops_strategy()) {
            let o = origin();
            let c = coords(&s);
            let nn = order_route_nn("w", &o, &s);
            let opt2 = two_opt(&nn, &c, &o);
            let idx: Vec<usize> = (0..s.len()).collect();
            let exact = permutations(&idx)
                .into_iter()
                .map(|p| {
                    let pts: Vec<GeoPoint> = p.iter().map(|&k| s[k].location).collect();
                    path_length(&o, &pts)
                })
                .fold(f64::INFINITY, f64::min);
            prop_assert!(opt2.length_m <= nn.length_m + 1e-9);
            prop_assert!(opt2.length_m >= exact - 1e-6);
            prop_assert!(!has_improving_move(&opt2, &c, &o));
            let mut a = opt2.stops.clone();
            let mut b = nn.stops.clone();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            let recomputed = route_length(&opt2, &c, &o);
            prop_assert!((recomputed - opt2.length_m).abs() <= 1e-6 * recomputed.max(1.0));
        }
    }
}
