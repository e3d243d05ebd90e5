//! Synthetic closed-loop process generator with known ground truth.
//!
//! Each block is a first-order plant under a discrete PI controller with
//! actuator saturation, driven by a slow colored load disturbance. Blocks
//! are mutually independent; extra variables are pure measurement noise.
//! Three scenarios: steady operation, a compensated setpoint step, and an
//! uncompensatable load fault that rides the actuator limit.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::RawDataset;
use crate::error::{Error, Result};

/// First-order plant pole.
pub const PLANT_POLE: f64 = 0.9;
/// Plant input gain.
pub const PLANT_GAIN: f64 = 0.5;
/// Proportional gain of the PI controller.
pub const PI_KP: f64 = 0.8;
/// Integral gain of the PI controller.
pub const PI_KI: f64 = 0.1;
/// Symmetric actuator saturation.
pub const ACTUATOR_LIMIT: f64 = 2.0;
/// Standard deviation of sensor noise.
pub const MEASUREMENT_NOISE: f64 = 0.05;

/// Pole of the slow load disturbance each loop keeps compensating.
const DISTURBANCE_POLE: f64 = 0.85;
/// Stationary standard deviation of that disturbance.
const DISTURBANCE_SIGMA: f64 = 0.035;
/// Setpoint step applied to block 1 in the setpoint scenario.
pub const SETPOINT_STEP: f64 = 7.0;
/// Mean unmeasured load in the fault scenario; sized so the required
/// actuator move exceeds the saturation limit and the loop cannot settle.
pub const FAULT_LOAD: f64 = 1.25;
/// Oscillation amplitude of the fault load.
pub const FAULT_WIGGLE: f64 = 0.15;
/// Oscillation period (samples) of the fault load.
pub const FAULT_PERIOD: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Normal,
    Setpoint,
    Fault,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Scenario::Normal),
            "setpoint" => Ok(Scenario::Setpoint),
            "fault" => Ok(Scenario::Fault),
            other => Err(Error::data(format!(
                "unknown scenario {other:?}; expected normal, setpoint or fault"
            ))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scenario::Normal => "normal",
            Scenario::Setpoint => "setpoint",
            Scenario::Fault => "fault",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub samples: usize,
    pub seed: u64,
    pub blocks: usize,
    pub noise_vars: usize,
    /// Sample index where the setpoint step or fault load begins.
    pub change_at: usize,
}

impl ScenarioConfig {
    /// Defaults: two blocks, four noise variables, event at mid-run.
    pub fn new(scenario: Scenario, samples: usize, seed: u64) -> Self {
        ScenarioConfig {
            scenario,
            samples,
            seed,
            blocks: 2,
            noise_vars: 4,
            change_at: samples / 2,
        }
    }

    /// Checks the documented invariants (at least 200 samples, at least one
    /// block, event inside the run).
    pub fn validate(&self) -> Result<()> {
        if self.samples < 200 {
            return Err(Error::data(format!(
                "need at least 200 samples, got {}",
                self.samples
            )));
        }
        if self.blocks < 1 {
            return Err(Error::data("need at least one block"));
        }
        if self.change_at >= self.samples {
            return Err(Error::data(format!(
                "event at sample {} is outside the run of {}",
                self.change_at, self.samples
            )));
        }
        Ok(())
    }
}

/// Sidecar ground truth written next to generated datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroundTruth {
    pub scenario: Scenario,
    pub change_at: usize,
    /// Column indices of each block's four process variables.
    pub block_variable_map: Vec<Vec<usize>>,
}

struct Loop {
    setpoint: f64,
    y: f64,
    integral: f64,
    disturbance: f64,
}

impl Loop {
    fn new(setpoint: f64) -> Self {
        // Start at the steady state so training data carries no start-up
        // transient: u* = (1 - a) * sp / b, reached with e = 0 via the
        // integral term.
        let u_star = (1.0 - PLANT_POLE) * setpoint / PLANT_GAIN;
        Loop {
            setpoint,
            y: setpoint,
            integral: u_star / PI_KI,
            disturbance: 0.0,
        }
    }
}

/// Simulates one scenario deterministically; returns the dataset and its
/// ground truth. Column layout: per block `e_k, y_k, u_k, r_k`, then the
/// noise variables.
pub fn simulate(cfg: &ScenarioConfig) -> Result<(RawDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.samples;
    let j = 4 * cfg.blocks + cfg.noise_vars;

    let mut loops: Vec<Loop> = (0..cfg.blocks)
        .map(|b| Loop::new(1.0 + 1.5 * b as f64))
        .collect();
    let dist_step = DISTURBANCE_SIGMA * (1.0 - DISTURBANCE_POLE * DISTURBANCE_POLE).sqrt();

    let mut values = DMatrix::zeros(n, j);
    for row in 0..n {
        if cfg.scenario == Scenario::Setpoint && row == cfg.change_at {
            loops[0].setpoint += SETPOINT_STEP;
        }
        for (b, lp) in loops.iter_mut().enumerate() {
            let noise_y: f64 = rng.sample(StandardNormal);
            let noise_e: f64 = rng.sample(StandardNormal);
            let noise_r: f64 = rng.sample(StandardNormal);
            let dist_kick: f64 = rng.sample(StandardNormal);

            let measured = lp.y + MEASUREMENT_NOISE * noise_y;
            let error = lp.setpoint - measured;
            let raw = PI_KP * error + PI_KI * (lp.integral + error);
            // Anti-windup: hold the integral while the actuator is pinned
            // and the error would push it further into the limit.
            if (raw.abs() <= ACTUATOR_LIMIT) || (raw.signum() != error.signum()) {
                lp.integral += error;
            }
            let u = (PI_KP * error + PI_KI * lp.integral)
                .clamp(-ACTUATOR_LIMIT, ACTUATOR_LIMIT);
            // Each logged channel is its own sensor: the error channel is
            // sampled independently of the output channel, so no logged
            // column is an exact linear function of another.
            let logged_error = lp.setpoint - lp.y + MEASUREMENT_NOISE * noise_e;
            let redundant = lp.y + 0.7 * u + MEASUREMENT_NOISE * noise_r;

            let col = 4 * b;
            values[(row, col)] = logged_error;
            values[(row, col + 1)] = measured;
            values[(row, col + 2)] = u;
            values[(row, col + 3)] = redundant;

            let mut load = 0.0;
            if cfg.scenario == Scenario::Fault && b == 0 && row >= cfg.change_at {
                let phase = (row - cfg.change_at) as f64 / FAULT_PERIOD;
                load = FAULT_LOAD + FAULT_WIGGLE * (2.0 * std::f64::consts::PI * phase).sin();
            }
            lp.y = PLANT_POLE * lp.y + PLANT_GAIN * u + lp.disturbance + load;
            lp.disturbance = DISTURBANCE_POLE * lp.disturbance + dist_step * dist_kick;
        }
        for v in 0..cfg.noise_vars {
            values[(row, 4 * cfg.blocks + v)] = rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut names = Vec::with_capacity(j);
    for b in 0..cfg.blocks {
        names.push(format!("e_{}", b + 1));
        names.push(format!("y_{}", b + 1));
        names.push(format!("u_{}", b + 1));
        names.push(format!("r_{}", b + 1));
    }
    for v in 0..cfg.noise_vars {
        names.push(format!("n_{}", v + 1));
    }

    let truth = GroundTruth {
        scenario: cfg.scenario,
        change_at: cfg.change_at,
        block_variable_map: (0..cfg.blocks)
            .map(|b| (4 * b..4 * b + 4).collect())
            .collect(),
    };
    Ok((RawDataset::new(names, values)?, truth))
}
