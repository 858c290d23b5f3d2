//! Sample-and-hold closed loop with independent sampling periods.
//!
//! The evader refreshes `u_e` at multiples of `δ_e`, the pursuer refreshes
//! `u_p` at multiples of `δ_p`, both anchored at `t = 0`. In between, the
//! last sampled values are held and the relative dynamics are integrated
//! with RK4 at step `dt`.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::feedback::{select_controls, SelectionPolicy};
use crate::game::{boundary_crossing_dense, rk4_step, terminates_at, Controls, GameParams, State};
use crate::model::MlpModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleHoldConfig {
    pub delta_e: f64,
    pub delta_p: f64,
    pub dt: f64,
    pub t_max: f64,
    pub policy: SelectionPolicy,
}

impl Default for SampleHoldConfig {
    fn default() -> Self {
        Self {
            delta_e: 0.01,
            delta_p: 0.01,
            dt: 1e-3,
            t_max: 10.0,
            policy: SelectionPolicy::default(),
        }
    }
}

/// Number of `dt` steps in `delta`, if `delta` is a whole multiple of `dt`.
fn steps_in(delta: f64, dt: f64) -> Option<usize> {
    let k = (delta / dt).round();
    (k >= 1.0 && (delta - k * dt).abs() <= 1e-12).then_some(k as usize)
}

impl SampleHoldConfig {
    pub fn validate(&self) -> Result<(usize, usize)> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.t_max > 0.0) {
            return Err(Error::Config(format!(
                "t_max must be positive, got {}",
                self.t_max
            )));
        }
        let n_e = steps_in(self.delta_e, self.dt).ok_or_else(|| {
            Error::Config(format!(
                "delta_e = {} is not a positive multiple of dt = {}",
                self.delta_e, self.dt
            ))
        })?;
        let n_p = steps_in(self.delta_p, self.dt).ok_or_else(|| {
            Error::Config(format!(
                "delta_p = {} is not a positive multiple of dt = {}",
                self.delta_p, self.dt
            ))
        })?;
        Ok((n_e, n_p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Termination {
    /// Outward crossing of the terminal circle at time `t`.
    Terminated {
        t: f64,
    },
    HorizonExhausted,
}

/// Sampled closed-loop run. Row `k` holds the state at `times[k]` and the
/// controls applied from that instant on. A terminated run ends with the
/// crossing row.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub controls: Vec<Controls>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn game_time(&self) -> Option<f64> {
        match self.termination {
            Termination::Terminated { t } => Some(t),
            Termination::HorizonExhausted => None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Runs the sample-and-hold loop from `s0` until the outward crossing or
/// `cfg.t_max`.
pub fn simulate(
    s0: State,
    m: &MlpModel,
    cfg: &SampleHoldConfig,
    p: &GameParams,
) -> Result<Trajectory> {
    let (n_e, n_p) = cfg.validate()?;
    if !(s0.x.is_finite() && s0.y.is_finite()) || s0.norm() > p.rho + 1e-12 {
        return Err(Error::Config(format!(
            "initial state ({}, {}) is outside the game set",
            s0.x, s0.y
        )));
    }
    let mut tr = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        controls: Vec::new(),
        termination: Termination::HorizonExhausted,
    };
    let n_max = (cfg.t_max / cfg.dt).ceil() as usize;
    let mut s = s0;
    let mut held = Controls::default();
    for k in 0..=n_max {
        let t = k as f64 * cfg.dt;
        let (fresh_e, fresh_p) = (k % n_e == 0, k % n_p == 0);
        if fresh_e || fresh_p {
            let c = select_controls(s, m, &cfg.policy).controls;
            if fresh_e {
                held.u_e = c.u_e;
            }
            if fresh_p {
                held.u_p = c.u_p;
            }
        }
        tr.times.push(t);
        tr.states.push(s);
        tr.controls.push(held);
        if k == 0 && terminates_at(s, held, p) {
            tr.termination = Termination::Terminated { t: 0.0 };
            return Ok(tr);
        }
        if k == n_max {
            break;
        }
        if let Some(cr) = boundary_crossing_dense(s, held, cfg.dt, p)? {
            let t_end = t + cr.fraction * cfg.dt;
            tr.times.push(t_end);
            tr.states.push(cr.state);
            tr.controls.push(held);
            tr.termination = Termination::Terminated { t: t_end };
            return Ok(tr);
        }
        s = rk4_step(s, held, cfg.dt, p);
    }
    Ok(tr)
}

/// One row of [`game_time_table`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameTime {
    pub delta_e: f64,
    pub delta_p: f64,
    pub t: Option<f64>,
}

/// Runs [`simulate`] once per `(δ_e, δ_p)` pair, sharing the remaining
/// settings of `base`. Every pair is validated before any run starts.
pub fn game_time_table(
    s0: State,
    m: &MlpModel,
    pairs: &[(f64, f64)],
    base: &SampleHoldConfig,
    p: &GameParams,
) -> Result<Vec<GameTime>> {
    let cfgs: Vec<SampleHoldConfig> = pairs
        .iter()
        .map(|&(delta_e, delta_p)| SampleHoldConfig {
            delta_e,
            delta_p,
            ..*base
        })
        .collect();
    for c in &cfgs {
        c.validate()?;
    }
    cfgs.iter()
        .map(|c| {
            let tr = simulate(s0, m, c, p)?;
            Ok(GameTime {
                delta_e: c.delta_e,
                delta_p: c.delta_p,
                t: tr.game_time(),
            })
        })
        .collect()
}

pub const TRAJECTORY_HEADER: &str = "t,x,y,ue,up";

pub fn write_trajectory(tr: &Trajectory, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{TRAJECTORY_HEADER}").map_err(io)?;
    for k in 0..tr.len() {
        let (s, c) = (tr.states[k], tr.controls[k]);
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            tr.times[k], s.x, s.y, c.u_e, c.u_p
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Samples of a trajectory file as `(t, state, controls)` rows.
pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, State, Controls)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| FormatError::Csv(e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != TRAJECTORY_HEADER {
        return Err(FormatError::Shape(format!("trajectory header `{header}`")).into());
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| FormatError::Csv(e.to_string()))?;
        let v: Vec<f64> = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| FormatError::Csv(e.to_string()))?;
        if v.len() != 5 {
            return Err(FormatError::Truncated(format!("row with {} fields", v.len())).into());
        }
        // Stored controls are already in range; keep them bit-exact.
        rows.push((
            v[0],
            State::new(v[1], v[2]),
            Controls {
                u_e: v[3],
                u_p: v[4],
            },
        ));
    }
    Ok(rows)
}
