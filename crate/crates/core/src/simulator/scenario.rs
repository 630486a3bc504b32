use std::collections::BTreeSet;
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BinConfig, Thresholds};
use crate::geo::GeoPoint;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("PARSE: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("INVALID {path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("unknown built-in scenario {0:?}")]
    UnknownBuiltin(String),
}

impl ScenarioError {
    pub fn code(&self) -> &'static str {
        match self {
            ScenarioError::Io(_) | ScenarioError::Parse(_) => "PARSE",
            ScenarioError::Invalid { .. } => "INVALID",
            ScenarioError::UnknownBuiltin(_) => "UNKNOWN_SCENARIO",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimBin {
    #[serde(flatten)]
    pub config: BinConfig,
    #[serde(default)]
    pub initial_fill: f64,
    #[serde(default)]
    pub fill_rate_per_hr: f64,
    #[serde(default)]
    pub fill_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasEvent {
    pub bin_id: String,
    pub start_s: f64,
    pub duration_s: f64,
    pub peak_ppm: f64,
}

/// Linear ramp length at each end of a gas event.
pub const GAS_RAMP_S: f64 = 30.0;

impl GasEvent {
    /// Concentration added to ambient at simulated time `t_s`.
    pub fn ppm_at(&self, t_s: f64) -> f64 {
        let end = self.start_s + self.duration_s;
        if t_s <= self.start_s || t_s >= end {
            return 0.0;
        }
        let ramp = GAS_RAMP_S.min(self.duration_s / 2.0);
        let up = (t_s - self.start_s) / ramp;
        let down = (end - t_s) / ramp;
        self.peak_ppm * up.min(down).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Faults {
    pub dup_prob: f64,
    pub loss_prob: f64,
    pub reorder_prob: f64,
    pub max_delay_s: f64,
}

impl Faults {
    pub fn is_zero(&self) -> bool {
        self.dup_prob == 0.0 && self.loss_prob == 0.0 && self.reorder_prob == 0.0
    }
}

fn default_interval() -> f64 {
    60.0
}

fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 6, 1, 0, 0, 0).unwrap()
}

fn default_battery() -> f64 {
    95.0
}

fn default_ambient() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_interval")]
    pub report_interval_s: f64,
    pub bins: Vec<SimBin>,
    #[serde(default)]
    pub gas_events: Vec<GasEvent>,
    #[serde(default)]
    pub faults: Faults,
    #[serde(default)]
    pub time_scale: f64,
    #[serde(default = "default_start")]
    pub start_ts: DateTime<Utc>,
    /// First `seq` used by every sensor.
    #[serde(default)]
    pub seq_base: u64,
    #[serde(default = "default_battery")]
    pub battery_pct: f64,
    #[serde(default = "default_ambient")]
    pub ambient_gas_ppm: f64,
}

fn check(ok: bool, path: impl Into<String>, reason: &str) -> Result<(), ScenarioError> {
    if ok {
        Ok(())
    } else {
        Err(ScenarioError::Invalid {
            path: path.into(),
            reason: reason.into(),
        })
    }
}

fn prob(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

fn nonneg(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        check(
            self.duration_s.is_finite() && self.duration_s > 0.0,
            "duration_s",
            "must be positive",
        )?;
        check(
            self.report_interval_s.is_finite() && self.report_interval_s >= 0.001,
            "report_interval_s",
            "must be at least 1 ms",
        )?;
        check(nonneg(self.time_scale), "time_scale", "must be >= 0")?;
        check(
            (0.0..=100.0).contains(&self.battery_pct),
            "battery_pct",
            "must be in [0, 100]",
        )?;
        check(nonneg(self.ambient_gas_ppm), "ambient_gas_ppm", "must be >= 0")?;
        check(!self.bins.is_empty(), "bins", "must not be empty")?;
        let mut bin_ids = BTreeSet::new();
        let mut sensor_ids = BTreeSet::new();
        for (i, b) in self.bins.iter().enumerate() {
            let at = |f: &str| format!("bins[{i}].{f}");
            b.config.validate().map_err(|e| ScenarioError::Invalid {
                path: format!("bins[{i}]"),
                reason: e.to_string(),
            })?;
            check(bin_ids.insert(&b.config.bin_id), at("bin_id"), "duplicate")?;
            check(sensor_ids.insert(&b.config.sensor_id), at("sensor_id"), "duplicate")?;
            check(prob(b.initial_fill), at("initial_fill"), "must be in [0, 1]")?;
            check(nonneg(b.fill_rate_per_hr), at("fill_rate_per_hr"), "must be >= 0")?;
            check(nonneg(b.fill_jitter), at("fill_jitter"), "must be >= 0")?;
        }
        for (i, g) in self.gas_events.iter().enumerate() {
            let at = |f: &str| format!("gas_events[{i}].{f}");
            check(bin_ids.contains(&g.bin_id), at("bin_id"), "unknown bin")?;
            check(nonneg(g.start_s), at("start_s"), "must be >= 0")?;
            check(
                g.duration_s.is_finite() && g.duration_s > 0.0,
                at("duration_s"),
                "must be positive",
            )?;
            check(nonneg(g.peak_ppm), at("peak_ppm"), "must be >= 0")?;
        }
        let f = &self.faults;
        check(prob(f.dup_prob), "faults.dup_prob", "must be in [0, 1]")?;
        check(prob(f.loss_prob), "faults.loss_prob", "must be in [0, 1]")?;
        check(prob(f.reorder_prob), "faults.reorder_prob", "must be in [0, 1]")?;
        check(nonneg(f.max_delay_s), "faults.max_delay_s", "must be >= 0")?;
        Ok(())
    }

    pub fn zone_ids(&self) -> BTreeSet<&str> {
        self.bins.iter().map(|b| b.config.zone_id.as_str()).collect()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let cfg: ScenarioConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a scenario file, or a built-in scenario by name.
pub fn load_scenario(name_or_path: &str) -> Result<ScenarioConfig, ScenarioError> {
    if let Some(cfg) = builtin(name_or_path) {
        return Ok(cfg);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(ScenarioError::UnknownBuiltin(name_or_path.to_owned()));
    }
    parse_scenario(&std::fs::read_to_string(path)?)
}

pub const BUILTINS: [&str; 3] = ["fig4_levels", "gas_fire", "hajj_day"];

/// Mina, near the Jamarat bridge.
fn site() -> GeoPoint {
    GeoPoint { lat: 21.4133, lon: 39.8933 }
}

fn fixture_bin(i: usize, zone: &str, location: GeoPoint) -> BinConfig {
    BinConfig {
        bin_id: format!("bin-{:03}", i + 1),
        sensor_id: format!("s-{:03}", i + 1),
        location,
        zone_id: zone.to_owned(),
        depth_cm: 100.0,
        full_offset_cm: 10.0,
    }
}

pub fn builtin(name: &str) -> Option<ScenarioConfig> {
    let base = |name: &str, duration_s: f64, report_interval_s: f64, bins| ScenarioConfig {
        name: name.to_owned(),
        seed: 0,
        duration_s,
        report_interval_s,
        bins,
        gas_events: Vec::new(),
        faults: Faults::default(),
        time_scale: 0.0,
        start_ts: default_start(),
        seq_base: 0,
        battery_pct: default_battery(),
        ambient_gas_ppm: default_ambient(),
    };
    match name {
        "fig4_levels" => {
            let bins = [0.0, 0.5, 0.95]
                .iter()
                .enumerate()
                .map(|(i, &f)| SimBin {
                    config: fixture_bin(i, "zone-a", site().offset_m(40.0 * i as f64, 0.0)),
                    initial_fill: f,
                    fill_rate_per_hr: 0.0,
                    fill_jitter: 0.0,
                })
                .collect();
            Some(base(name, 180.0, 60.0, bins))
        }
        "gas_fire" => {
            let bins = vec![SimBin {
                config: fixture_bin(0, "zone-a", site()),
                initial_fill: 0.2,
                fill_rate_per_hr: 0.0,
                fill_jitter: 0.0,
            }];
            let mut cfg = base(name, 600.0, 10.0, bins);
            cfg.gas_events.push(GasEvent {
                bin_id: "bin-001".into(),
                start_s: 300.0,
                duration_s: 120.0,
                peak_ppm: 5.0 * Thresholds::default().gas_alert_ppm,
            });
            Some(cfg)
        }
        "hajj_day" => {
            let bins = (0..50)
                .map(|i| {
                    let (row, col) = ((i / 10) as f64, (i % 10) as f64);
                    let zone = format!("zone-{}", (b'a' + (i / 10) as u8) as char);
                    SimBin {
                        config: fixture_bin(i, &zone, site().offset_m(col * 150.0, row * 150.0)),
                        initial_fill: 0.1 * (i % 5) as f64,
                        // FULL after 8 to 12 hours from empty
                        fill_rate_per_hr: 0.9 / (8.0 + 4.0 * (i % 11) as f64 / 10.0),
                        fill_jitter: 0.005,
                    }
                })
                .collect();
            let mut cfg = base(name, 86_400.0, 60.0, bins);
            cfg.seed = 2025;
            Some(cfg)
        }
        _ => None,
    }
}
