//! Planar quadrotor gate racing.
//!
//! The drone flies in the vertical `x-y` plane through an ordered list of
//! line gates. A gate is passed when the drone crosses its line in the
//! direction of the gate normal with the crossing point at most half the gate
//! width from the center; crossing the line anywhere else ends the episode.

use std::io::Write;
use std::path::Path;

use fusedmpc::{DynModel, QuadrotorParams};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::{Error, Result};

const BUNDLED_TRACK: &str = include_str!("../assets/reversal.toml");

/// Observation length: next-gate offset (2), following-gate offset (2), next
/// gate normal (2), `sin θ`, `cos θ`, velocity (2), `ω`.
pub const OBS_DIM: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub center: [f64; 2],
    pub normal: [f64; 2],
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    #[serde(default)]
    pub name: String,
    pub laps: usize,
    pub spawn: [f64; 6],
    pub bounds: Arena,
    pub gates: Vec<Gate>,
}

impl TrackSpec {
    pub fn bundled() -> Self {
        Self::from_toml_str(BUNDLED_TRACK).expect("bundled track is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let track: Self = toml::from_str(text).map_err(|e| Error::Track(e.to_string()))?;
        track.validate()?;
        Ok(track)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Track(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.gates.len() < 2 {
            return Err(Error::Track(format!("need at least 2 gates, got {}", self.gates.len())));
        }
        if self.laps == 0 {
            return Err(Error::Track("laps must be >= 1".into()));
        }
        for (i, g) in self.gates.iter().enumerate() {
            if !(g.width > 0.0 && g.width.is_finite()) {
                return Err(Error::Track(format!("gate {i}: width must be positive")));
            }
            let norm = g.normal[0].hypot(g.normal[1]);
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Track(format!("gate {i}: normal has norm {norm}, expected 1")));
            }
            if !g.center.iter().all(|v| v.is_finite()) {
                return Err(Error::Track(format!("gate {i}: non-finite center")));
            }
        }
        let b = &self.bounds;
        if !(b.x[0] < b.x[1] && b.y[0] < b.y[1]) {
            return Err(Error::Track("empty arena bounds".into()));
        }
        if !self.spawn.iter().all(|v| v.is_finite()) {
            return Err(Error::Track("non-finite spawn".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceConfig {
    /// s
    pub dt: f64,
    /// kg
    pub mass: f64,
    /// m
    pub arm_length: f64,
    /// kg·m²
    pub inertia: f64,
    /// m/s²
    pub gravity: f64,
    /// Maximum thrust per rotor, N. The minimum is zero.
    pub thrust_max: f64,
    /// Reward per metre of progress toward the next gate center.
    pub k_progress: f64,
    /// Per-step bound on the progress term.
    pub progress_cap: f64,
    pub gate_bonus: f64,
    pub crash_penalty: f64,
    /// Per second.
    pub time_penalty: f64,
    /// s
    pub timeout: f64,
    /// Std of the Gaussian perturbation added to the spawn state.
    pub spawn_sigma: f64,
}

impl Default for RaceConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            mass: 1.0,
            arm_length: 0.2,
            inertia: 0.02,
            gravity: 9.81,
            thrust_max: 10.0,
            k_progress: 1.0,
            progress_cap: 1.0,
            gate_bonus: 10.0,
            crash_penalty: 10.0,
            time_penalty: 0.1,
            timeout: 20.0,
            spawn_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    LapComplete,
    GateMissed,
    OutOfBounds,
    Timeout,
}

impl DoneReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DoneReason::LapComplete => "lap_complete",
            DoneReason::GateMissed => "gate_missed",
            DoneReason::OutOfBounds => "out_of_bounds",
            DoneReason::Timeout => "timeout",
        }
    }

    pub fn is_failure(self) -> bool {
        matches!(self, DoneReason::GateMissed | DoneReason::OutOfBounds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState<T> {
    /// `[x, y, θ, v_x, v_y, ω]`
    pub x: Vec<T>,
    pub next_gate: usize,
    pub lap: usize,
    pub steps: usize,
    /// s, always `steps · dt`
    pub time: T,
    pub done: Option<DoneReason>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step<T> {
    pub state: EnvState<T>,
    pub obs: Vec<T>,
    pub reward: T,
    pub done: bool,
    pub passed_gate: bool,
}

#[derive(Debug, Clone)]
pub struct RaceEnv<T> {
    pub track: TrackSpec,
    pub cfg: RaceConfig,
    model: DynModel<T>,
}

fn dist<T: Scalar>(px: T, py: T, c: [f64; 2]) -> T {
    let dx = px - T::lit(c[0]);
    let dy = py - T::lit(c[1]);
    (dx * dx + dy * dy).sqrt()
}

impl<T: Scalar> RaceEnv<T> {
    pub fn new(track: TrackSpec, cfg: RaceConfig) -> Result<Self> {
        track.validate()?;
        if !(cfg.thrust_max > 0.0 && cfg.timeout > 0.0 && cfg.spawn_sigma >= 0.0 && cfg.progress_cap >= 0.0) {
            return Err(Error::Config("race: thrust_max and timeout must be positive".into()));
        }
        let params = QuadrotorParams {
            mass: T::lit(cfg.mass),
            arm_length: T::lit(cfg.arm_length),
            inertia: T::lit(cfg.inertia),
            gravity: T::lit(cfg.gravity),
        };
        let model = DynModel::planar_quadrotor(params, T::lit(cfg.dt))?;
        Ok(Self { track, cfg, model })
    }

    pub fn model(&self) -> &DynModel<T> {
        &self.model
    }

    pub fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    pub fn u_min(&self) -> Vec<T> {
        vec![T::zero(); 2]
    }

    pub fn u_max(&self) -> Vec<T> {
        vec![T::lit(self.cfg.thrust_max); 2]
    }

    pub fn hover(&self) -> Vec<T> {
        vec![T::lit(0.5 * self.cfg.mass * self.cfg.gravity); 2]
    }

    fn max_steps(&self) -> usize {
        (self.cfg.timeout / self.cfg.dt).round() as usize
    }

    pub fn reset(&self, rng: &mut impl Rng) -> (EnvState<T>, Vec<T>) {
        let x = self
            .track
            .spawn
            .iter()
            .map(|&v| {
                let z: f64 = if self.cfg.spawn_sigma > 0.0 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                };
                T::lit(v + self.cfg.spawn_sigma * z)
            })
            .collect();
        let s = EnvState {
            x,
            next_gate: 0,
            lap: 0,
            steps: 0,
            time: T::zero(),
            done: None,
        };
        let obs = self.observe(&s);
        (s, obs)
    }

    pub fn observe(&self, s: &EnvState<T>) -> Vec<T> {
        let n = self.track.gates.len();
        let g0 = &self.track.gates[s.next_gate];
        let g1 = &self.track.gates[(s.next_gate + 1) % n];
        let pos_scale = T::lit(0.25);
        let vel_scale = T::lit(0.25);
        let x = &s.x;
        vec![
            (T::lit(g0.center[0]) - x[0]) * pos_scale,
            (T::lit(g0.center[1]) - x[1]) * pos_scale,
            T::lit(g1.center[0] - g0.center[0]) * pos_scale,
            T::lit(g1.center[1] - g0.center[1]) * pos_scale,
            T::lit(g0.normal[0]),
            T::lit(g0.normal[1]),
            x[2].sin(),
            x[2].cos(),
            x[3] * vel_scale,
            x[4] * vel_scale,
            x[5] * vel_scale,
        ]
    }

    /// State in the next gate's frame: position relative to its center.
    pub fn mpc_state(&self, s: &EnvState<T>) -> Vec<T> {
        let c = self.track.gates[s.next_gate].center;
        let mut x = s.x.clone();
        x[0] = x[0] - T::lit(c[0]);
        x[1] = x[1] - T::lit(c[1]);
        x
    }

    fn out_of_bounds(&self, x: &[T]) -> bool {
        let b = &self.track.bounds;
        let (px, py) = (x[0].as_f64(), x[1].as_f64());
        !x.iter().all(|v| v.is_finite()) || px < b.x[0] || px > b.x[1] || py < b.y[0] || py > b.y[1]
    }

    /// Advances one `dt` with control `u` (clamped to the thrust bounds).
    pub fn step(&self, s: &EnvState<T>, u: &[T]) -> Result<Step<T>> {
        if s.done.is_some() {
            return Err(Error::Config("step called on a finished episode".into()));
        }
        Error::check_len("control", 2, u.len())?;
        let u: Vec<T> = u
            .iter()
            .map(|&v| v.max(T::zero()).min(T::lit(self.cfg.thrust_max)))
            .collect();
        let mut next = vec![T::zero(); 6];
        self.model.step_into(&s.x, &u, &mut next);

        let gate = &self.track.gates[s.next_gate];
        let dt = T::lit(self.cfg.dt);
        let mut reward = -T::lit(self.cfg.time_penalty) * dt;
        let mut ns = EnvState {
            x: next,
            next_gate: s.next_gate,
            lap: s.lap,
            steps: s.steps + 1,
            time: T::lit((s.steps + 1) as f64 * self.cfg.dt),
            done: None,
        };
        let mut passed = false;

        if self.out_of_bounds(&ns.x) {
            ns.done = Some(DoneReason::OutOfBounds);
        } else {
            let cap = T::lit(self.cfg.progress_cap);
            let progress = dist(s.x[0], s.x[1], gate.center) - dist(ns.x[0], ns.x[1], gate.center);
            reward = reward + (T::lit(self.cfg.k_progress) * progress).max(-cap).min(cap);

            let signed = |x: &[T]| {
                (x[0] - T::lit(gate.center[0])) * T::lit(gate.normal[0])
                    + (x[1] - T::lit(gate.center[1])) * T::lit(gate.normal[1])
            };
            let (d0, d1) = (signed(&s.x), signed(&ns.x));
            if d0 < T::zero() && d1 >= T::zero() {
                let frac = d0 / (d0 - d1);
                let px = s.x[0] + frac * (ns.x[0] - s.x[0]) - T::lit(gate.center[0]);
                let py = s.x[1] + frac * (ns.x[1] - s.x[1]) - T::lit(gate.center[1]);
                let lateral = (px * T::lit(-gate.normal[1]) + py * T::lit(gate.normal[0])).abs();
                if lateral <= T::lit(0.5 * gate.width) {
                    passed = true;
                    reward = reward + T::lit(self.cfg.gate_bonus);
                    if ns.next_gate + 1 < self.track.gates.len() {
                        ns.next_gate += 1;
                    } else {
                        ns.lap += 1;
                        if ns.lap == self.track.laps {
                            // The index stays on the last gate of a finished run.
                            ns.done = Some(DoneReason::LapComplete);
                        } else {
                            ns.next_gate = 0;
                        }
                    }
                } else {
                    ns.done = Some(DoneReason::GateMissed);
                }
            }
        }
        if ns.done.is_none() && ns.steps >= self.max_steps() {
            ns.done = Some(DoneReason::Timeout);
        }
        if ns.done.is_some_and(DoneReason::is_failure) {
            reward = reward - T::lit(self.cfg.crash_penalty);
        }
        let obs = if ns.x.iter().all(|v| v.is_finite()) {
            self.observe(&ns)
        } else {
            vec![T::zero(); OBS_DIM]
        };
        Ok(Step {
            done: ns.done.is_some(),
            state: ns,
            obs,
            reward,
            passed_gate: passed,
        })
    }
}

/// Episode time at the final gate passage, if the episode completed the lap.
pub fn lap_time<T: Scalar>(states: &[EnvState<T>]) -> Option<T> {
    states
        .last()
        .filter(|s| s.done == Some(DoneReason::LapComplete))
        .map(|s| s.time)
}

/// One row of the trajectory dump.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajRow {
    pub t: f64,
    pub x: [f64; 6],
    pub u: [f64; 2],
    pub gate_idx: usize,
    pub reward: f64,
}

pub const TRAJECTORY_CSV_HEADER: &str = "t,x,y,theta,vx,vy,omega,u1,u2,gate_idx,reward";

pub fn write_trajectory_csv<W: Write>(rows: &[TrajRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.t, r.x[0], r.x[1], r.x[2], r.x[3], r.x[4], r.x[5], r.u[0], r.u[1], r.gate_idx, r.reward
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_track_parses() {
        let t = TrackSpec::bundled();
        assert_eq!(t.gates.len(), 5);
        assert_eq!(t.laps, 1);
    }

    #[test]
    fn invalid_tracks_are_rejected() {
        let mut t = TrackSpec::bundled();
        t.gates.truncate(1);
        assert!(t.validate().is_err());
        let mut t = TrackSpec::bundled();
        t.gates[0].normal = [1.0, 1e-3];
        assert!(t.validate().is_err());
        let mut t = TrackSpec::bundled();
        t.gates[2].width = 0.0;
        assert!(t.validate().is_err());
    }
}
