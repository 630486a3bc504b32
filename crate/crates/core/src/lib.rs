//! Core logic of the TUHR smart-waste platform: bin and sensor model,
//! telemetry wire protocol, alert rules, dispatch optimization, the event
//! store and the sensor simulator.
//!
//! The numeric kernels (`geo`, `dispatch`) are generic over the scalar
//! type; the aliases below fix them to `f64`.

pub mod alerting;
pub mod dispatch;
pub mod domain;
pub mod geo;
pub mod scalar;
pub mod simulator;
pub mod store;
pub mod telemetry;

pub use scalar::Cost;

pub type Point = geo::GeoPoint<f64>;
pub type CostMatrix64 = dispatch::CostMatrix<f64>;
pub type Assignment64 = dispatch::Assignment<f64>;
pub type Route64 = dispatch::Route<f64>;
pub type Stop64 = dispatch::Stop<f64>;
