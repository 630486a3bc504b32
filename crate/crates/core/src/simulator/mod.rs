//! Seeded sensor-fleet simulator: scenario files and the traffic model.
//! The network client that replays emissions against a server lives in
//! the server crate.

mod model;
mod scenario;

pub use model::{analytic_fill, trace, Emission, Report, SimStats, Simulator};
pub use scenario::{
    builtin, load_scenario, parse_scenario, Faults, GasEvent, ScenarioConfig, ScenarioError,
    SimBin, BUILTINS, GAS_RAMP_S,
};
