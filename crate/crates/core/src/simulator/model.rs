use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scenario::{ScenarioConfig, SimBin};
use crate::telemetry::{ReadingEnvelope, PROTOCOL_VERSION};

/// One record leaving a simulated sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    /// Simulated milliseconds since scenario start.
    pub at_ms: u64,
    pub envelope: ReadingEnvelope,
    /// True for the second copy of a duplicated record.
    pub duplicate: bool,
}

/// A sensor reading as generated, before the fault model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Report {
    pub bin_index: usize,
    pub seq: u64,
    pub t_ms: u64,
    pub fill: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub records_sent: u64,
    pub acks_ok: u64,
    pub acks_dup: u64,
    pub acks_err: u64,
    pub records_lost: u64,
    /// Analytic fill of each bin at its last report.
    pub final_fill: BTreeMap<String, f64>,
}

impl SimStats {
    /// `records_sent = acks_ok + acks_err + records_lost`.
    pub fn balanced(&self) -> bool {
        self.records_sent == self.acks_ok + self.acks_err + self.records_lost
    }
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Jitter = 0,
    Loss = 1,
    Dup = 2,
    Delay = 3,
}

struct SensorSim {
    next_seq: u64,
    next_due_ms: u64,
    jitter: ChaCha8Rng,
    loss: ChaCha8Rng,
    dup: ChaCha8Rng,
    delay: ChaCha8Rng,
}

fn stream(seed: u64, sensor: usize, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sensor as u64 * 4 + which as u64);
    rng
}

/// Simulated fill of `bin` at `t_ms` before noise.
pub fn analytic_fill(bin: &SimBin, t_ms: u64) -> f64 {
    bin.initial_fill + bin.fill_rate_per_hr * t_ms as f64 / 3_600_000.0
}

fn ms(seconds: f64) -> u64 {
    (seconds * 1000.0).round() as u64
}

/// Deterministic sensor fleet. All randomness comes from per-sensor,
/// per-purpose ChaCha streams derived from the scenario seed.
pub struct Simulator {
    cfg: ScenarioConfig,
    sensors: Vec<SensorSim>,
    interval_ms: u64,
    duration_ms: u64,
    now_ms: u64,
    pending: BinaryHeap<Reverse<(u64, u64, usize)>>,
    slots: Vec<Option<Emission>>,
    order: u64,
    stats: SimStats,
    reports: Vec<Report>,
    keep_reports: bool,
}

impl Simulator {
    pub fn new(cfg: ScenarioConfig) -> Self {
        let n = cfg.bins.len() as u64;
        let interval_ms = ms(cfg.report_interval_s).max(1);
        let sensors = (0..cfg.bins.len())
            .map(|i| SensorSim {
                next_seq: cfg.seq_base,
                next_due_ms: i as u64 * interval_ms / n,
                jitter: stream(cfg.seed, i, Stream::Jitter),
                loss: stream(cfg.seed, i, Stream::Loss),
                dup: stream(cfg.seed, i, Stream::Dup),
                delay: stream(cfg.seed, i, Stream::Delay),
            })
            .collect();
        Simulator {
            duration_ms: ms(cfg.duration_s),
            interval_ms,
            cfg,
            sensors,
            now_ms: 0,
            pending: BinaryHeap::new(),
            slots: Vec::new(),
            order: 0,
            stats: SimStats::default(),
            reports: Vec::new(),
            keep_reports: false,
        }
    }

    /// Record every generated report, for oracle checks.
    pub fn keep_reports(mut self) -> Self {
        self.keep_reports = true;
        self
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn finished(&self) -> bool {
        self.now_ms >= self.duration_ms && self.pending.is_empty()
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    pub fn reports(&self) -> &[Report] {
        &self.reports
    }

    pub fn ts_at(&self, t_ms: u64) -> DateTime<Utc> {
        self.cfg.start_ts + Duration::milliseconds(t_ms as i64)
    }

    fn gas_at(&self, bin_id: &str, t_s: f64) -> f64 {
        self.cfg.ambient_gas_ppm
            + self
                .cfg
                .gas_events
                .iter()
                .filter(|g| g.bin_id == bin_id)
                .map(|g| g.ppm_at(t_s))
                .sum::<f64>()
    }

    fn push(&mut self, at_ms: u64, em: Emission) {
        self.slots.push(Some(em));
        self.pending
            .push(Reverse((at_ms, self.order, self.slots.len() - 1)));
        self.order += 1;
    }

    fn generate(&mut self, i: usize, t_ms: u64) {
        let bin = &self.cfg.bins[i];
        let faults = self.cfg.faults;
        let s = &mut self.sensors[i];
        let noise = Normal::new(0.0, bin.fill_jitter)
            .expect("jitter validated")
            .sample(&mut s.jitter);
        let fill = (analytic_fill(bin, t_ms) + noise).clamp(0.0, 1.0);
        let lost = s.loss.random::<f64>() < faults.loss_prob;
        let dup = s.dup.random::<f64>() < faults.dup_prob;
        let reorder = s.delay.random::<f64>() < faults.reorder_prob;
        let delay_frac = s.delay.random::<f64>();
        let seq = s.next_seq;
        s.next_seq += 1;

        let bin_id = bin.config.bin_id.clone();
        self.stats.final_fill.insert(bin_id.clone(), fill);
        if self.keep_reports {
            self.reports.push(Report {
                bin_index: i,
                seq,
                t_ms,
                fill,
            });
        }
        if lost {
            self.stats.records_sent += 1;
            self.stats.records_lost += 1;
            return;
        }
        let bin = &self.cfg.bins[i];
        let envelope = ReadingEnvelope {
            version: PROTOCOL_VERSION,
            sensor_id: bin.config.sensor_id.clone(),
            seq,
            ts: self.ts_at(t_ms),
            distance_cm: bin.config.distance_for_fill(fill),
            gas_ppm: self.gas_at(&bin_id, t_ms as f64 / 1000.0),
            battery_pct: self.cfg.battery_pct,
        };
        let delay_ms = if reorder {
            (delay_frac * ms(faults.max_delay_s) as f64) as u64
        } else {
            0
        };
        let at = t_ms + delay_ms;
        if dup {
            self.push(
                at,
                Emission {
                    at_ms: at,
                    envelope: envelope.clone(),
                    duplicate: false,
                },
            );
            self.push(
                at,
                Emission {
                    at_ms: at,
                    envelope,
                    duplicate: true,
                },
            );
        } else {
            self.push(
                at,
                Emission {
                    at_ms: at,
                    envelope,
                    duplicate: false,
                },
            );
        }
    }

    /// Advance the clock by `dt_ms` and return the records leaving sensors
    /// in `[now, now + dt)`, in emission order. Once the scenario duration
    /// has passed, delayed records still in flight are flushed.
    pub fn step(&mut self, dt_ms: u64) -> Vec<Emission> {
        assert!(dt_ms > 0, "step needs a positive dt");
        let end = self.now_ms.saturating_add(dt_ms);
        let gen_end = end.min(self.duration_ms);
        let mut due: Vec<(u64, usize)> = Vec::new();
        for (i, s) in self.sensors.iter_mut().enumerate() {
            while s.next_due_ms < gen_end {
                due.push((s.next_due_ms, i));
                s.next_due_ms += self.interval_ms;
            }
        }
        due.sort_unstable();
        for (t, i) in due {
            self.generate(i, t);
        }
        self.now_ms = end;
        let flush_all = end >= self.duration_ms;
        let mut out = Vec::new();
        while let Some(Reverse((at, _, slot))) = self.pending.peek().copied() {
            if at >= end && !flush_all {
                break;
            }
            self.pending.pop();
            let em = self.slots[slot].take().expect("emission popped once");
            self.stats.records_sent += 1;
            out.push(em);
        }
        if self.pending.is_empty() {
            self.slots.clear();
        }
        out
    }

    /// Run to completion, returning every emission.
    pub fn run_to_end(&mut self) -> Vec<Emission> {
        let mut out = Vec::new();
        while !self.finished() {
            out.extend(self.step(self.interval_ms));
        }
        out
    }
}

/// Full emitted record stream of a scenario.
pub fn trace(cfg: &ScenarioConfig) -> Vec<Emission> {
    Simulator::new(cfg.clone()).run_to_end()
}
