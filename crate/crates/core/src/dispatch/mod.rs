//! Dispatch optimization: who collects which full bin, and in what order.

mod assignment;
mod plan;
mod routing;

pub use assignment::{hungarian, solve_assignment, Assignment, CostMatrix, MatrixError};
pub use plan::{
    assign_all, build_cost_matrix, cost_matrix_between, plan_dispatch, Allocation,
    CapacityExhausted, DispatchError, DispatchPlan, CAPACITY_EXHAUSTED,
};
pub use routing::{
    has_improving_move, order_route_nn, path_length, route_length, two_opt, Route, Stop,
    TWO_OPT_EPSILON_M,
};
