//! Game definition: parameters, frames, relative dynamics, RK4 stepping and
//! terminal-surface crossing.
//!
//! The game is played in the evader-centric frame: the origin sits on the
//! evader, the y-axis points along its heading and the x-axis is rotated
//! π/2 clockwise from it. The pursuer's relative position `ξ = (x, y)` obeys
//!
//! ```text
//! ẋ = −ω_e y u_e + v_p sin u_p
//! ẏ =  ω_e x u_e − v_e + v_p cos u_p
//! ```
//!
//! and the game ends when `|ξ|₂ = ρ` is crossed outward.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants of one game instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameParams {
    /// Evader speed.
    pub v_e: f64,
    /// Pursuer speed.
    pub v_p: f64,
    /// Evader maximal turn rate.
    pub omega_e: f64,
    /// Surveillance radius.
    pub rho: f64,
}

impl Default for GameParams {
    /// ρ = 1, v_e = 1.5, v_p = 1, ω_e = 1.
    fn default() -> Self {
        Self {
            v_e: 1.5,
            v_p: 1.0,
            omega_e: 1.0,
            rho: 1.0,
        }
    }
}

impl GameParams {
    pub fn new(v_e: f64, v_p: f64, omega_e: f64, rho: f64) -> Result<Self> {
        let p = Self {
            v_e,
            v_p,
            omega_e,
            rho,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("v_e", self.v_e),
            ("v_p", self.v_p),
            ("omega_e", self.omega_e),
            ("rho", self.rho),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        if self.v_p >= self.v_e {
            return Err(Error::InvalidParams(format!(
                "the evader must be faster than the pursuer (v_p = {} >= v_e = {})",
                self.v_p, self.v_e
            )));
        }
        Ok(())
    }

    /// Whether `s` lies in the game set `{|ξ|₂ ≤ ρ}`.
    pub fn in_game_set(&self, s: State) -> bool {
        s.norm() <= self.rho
    }
}

/// Relative pursuer position in the evader-centric frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
}

impl State {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, d: StateDerivative) -> f64 {
        self.x * d.dx + self.y * d.dy
    }

    /// Mirror image across the y-axis.
    pub fn mirrored(self) -> Self {
        Self::new(-self.x, self.y)
    }

    fn advanced(self, d: StateDerivative, h: f64) -> Self {
        Self::new(self.x + h * d.dx, self.y + h * d.dy)
    }

    /// Point on the segment from `self` to `other` at fraction `t`.
    pub fn lerp(self, other: Self, t: f64) -> Self {
        Self::new(
            self.x + t * (other.x - self.x),
            self.y + t * (other.y - self.y),
        )
    }
}

/// Time derivative of a [`State`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivative {
    pub dx: f64,
    pub dy: f64,
}

/// Wraps an angle onto the principal interval (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Input pair: normalized evader turn rate and pursuer heading relative to
/// the evader.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Controls {
    pub u_e: f64,
    pub u_p: f64,
}

impl Controls {
    /// Clamps `u_e` onto [−1, 1] and wraps `u_p` onto (−π, π].
    pub fn new(u_e: f64, u_p: f64) -> Self {
        Self {
            u_e: u_e.clamp(-1.0, 1.0),
            u_p: wrap_angle(u_p),
        }
    }

    /// Controls that realize the mirrored motion across the y-axis.
    pub fn mirrored(self) -> Self {
        Self::new(-self.u_e, -self.u_p)
    }
}

/// Inertial poses: evader `(x_e, y_e, θ_e)` and pursuer `(x_p, y_p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InertialStates {
    pub x_e: f64,
    pub y_e: f64,
    pub theta_e: f64,
    pub x_p: f64,
    pub y_p: f64,
}

impl InertialStates {
    pub fn new(x_e: f64, y_e: f64, theta_e: f64, x_p: f64, y_p: f64) -> Self {
        Self {
            x_e,
            y_e,
            theta_e: wrap_angle(theta_e),
            x_p,
            y_p,
        }
    }
}

/// Rotates the inertial offset `ξ_p − ξ_e` into the evader-centric frame.
pub fn to_evader_frame(inertial: &InertialStates) -> State {
    let (s, c) = inertial.theta_e.sin_cos();
    let dx = inertial.x_p - inertial.x_e;
    let dy = inertial.y_p - inertial.y_e;
    State::new(c * dx - s * dy, s * dx + c * dy)
}

/// Relative dynamics `f(ξ, u_e, u_p)`.
#[inline]
pub fn dynamics(s: State, c: Controls, p: &GameParams) -> StateDerivative {
    let (sin_p, cos_p) = c.u_p.sin_cos();
    let turn = p.omega_e * c.u_e;
    StateDerivative {
        dx: -turn * s.y + p.v_p * sin_p,
        dy: turn * s.x - p.v_e + p.v_p * cos_p,
    }
}

/// One classical fourth-order Runge–Kutta step holding `c` constant.
pub fn rk4_step(s: State, c: Controls, dt: f64, p: &GameParams) -> State {
    if dt == 0.0 {
        return s;
    }
    let k1 = dynamics(s, c, p);
    let k2 = dynamics(s.advanced(k1, 0.5 * dt), c, p);
    let k3 = dynamics(s.advanced(k2, 0.5 * dt), c, p);
    let k4 = dynamics(s.advanced(k3, dt), c, p);
    State::new(
        s.x + dt / 6.0 * (k1.dx + 2.0 * k2.dx + 2.0 * k3.dx + k4.dx),
        s.y + dt / 6.0 * (k1.dy + 2.0 * k2.dy + 2.0 * k3.dy + k4.dy),
    )
}

/// Located exit through the terminal circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    /// Fraction of the step at which `|ξ|₂ = ρ`.
    pub fraction: f64,
    pub state: State,
}

/// Tolerance on `| |ξ|₂ − ρ |` at a located crossing.
pub const CROSSING_TOL: f64 = 1e-9;

const MAX_BISECTIONS: usize = 200;

/// Locates an exit on the chord from `s_prev` to `s_next`.
///
/// Returns `Ok(None)` when `s_next` is still inside the disc. Otherwise the
/// chord is bisected on `|ξ(θ)|₂ − ρ` and the outward condition
/// `f(ξ, c)ᵀξ > 0` is verified at the root.
pub fn boundary_crossing(
    s_prev: State,
    s_next: State,
    c: Controls,
    p: &GameParams,
) -> Result<Option<Crossing>> {
    locate(s_prev, s_next, c, p, |t| s_prev.lerp(s_next, t))
}

/// Like [`boundary_crossing`], but the sub-step states are the RK4 flow
/// `rk4_step(s_prev, c, θ·dt)` instead of the chord.
pub fn boundary_crossing_dense(
    s_prev: State,
    c: Controls,
    dt: f64,
    p: &GameParams,
) -> Result<Option<Crossing>> {
    let s_next = rk4_step(s_prev, c, dt, p);
    locate(s_prev, s_next, c, p, |t| rk4_step(s_prev, c, t * dt, p))
}

fn locate(
    s_prev: State,
    s_next: State,
    c: Controls,
    p: &GameParams,
    path: impl Fn(f64) -> State,
) -> Result<Option<Crossing>> {
    if s_next.norm() <= p.rho {
        return Ok(None);
    }
    let gap = |s: State| s.norm() - p.rho;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut mid_state = s_next;
    if gap(s_prev) >= 0.0 {
        hi = 0.0;
        mid_state = s_prev;
    } else {
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            mid_state = path(mid);
            let g = gap(mid_state);
            if g.abs() <= CROSSING_TOL * 0.5 {
                lo = mid;
                hi = mid;
                break;
            }
            if g > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if (hi - lo).abs() < f64::EPSILON {
                break;
            }
        }
    }
    let fraction = 0.5 * (lo + hi);
    if (gap(mid_state)).abs() > CROSSING_TOL {
        mid_state = path(fraction);
    }
    if mid_state.dot(dynamics(mid_state, c, p)) <= 0.0 {
        return Err(Error::DegenerateCrossing {
            x: mid_state.x,
            y: mid_state.y,
        });
    }
    Ok(Some(Crossing {
        fraction,
        state: mid_state,
    }))
}

/// Whether the game is already over at `s` under controls `c`: `s` is on or
/// outside the terminal circle and moving outward.
pub fn terminates_at(s: State, c: Controls, p: &GameParams) -> bool {
    s.norm() >= p.rho - CROSSING_TOL && s.dot(dynamics(s, c, p)) > 0.0
}
