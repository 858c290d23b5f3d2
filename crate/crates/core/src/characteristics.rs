//! Open-loop optimal solutions by retrograde integration of the
//! characteristic system, and the training dataset built from them.
//!
//! Three kinds of paths cover the disc:
//! - regular characteristics leaving the usable part of the circle,
//! - the axis path: the universal line on `x = 0, y ∈ [−ρ, 0]` followed by
//!   the dispersal ridge on the positive y-axis,
//! - tributaries that leave the axis path backward with `u_e = −1`.
//!
//! Everything is generated for `x ≥ 0` and mirrored.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::feedback::{evader_feedback, switching_value};
use crate::game::{dynamics, wrap_angle, Controls, GameParams, State, StateDerivative};

/// Value gradient `(∂V/∂x, ∂V/∂y)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Costate {
    pub lx: f64,
    pub ly: f64,
}

impl Costate {
    pub const fn new(lx: f64, ly: f64) -> Self {
        Self { lx, ly }
    }

    pub fn norm(self) -> f64 {
        self.lx.hypot(self.ly)
    }

    pub fn dot(self, d: StateDerivative) -> f64 {
        self.lx * d.dx + self.ly * d.dy
    }

    pub fn mirrored(self) -> Self {
        Self::new(-self.lx, self.ly)
    }
}

/// One training sample `(x, y, ∇ₓV, ∇ᵧV, V)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CharacteristicPoint {
    pub x: f64,
    pub y: f64,
    pub lx: f64,
    pub ly: f64,
    pub v: f64,
}

impl CharacteristicPoint {
    pub fn state(&self) -> State {
        State::new(self.x, self.y)
    }

    pub fn costate(&self) -> Costate {
        Costate::new(self.lx, self.ly)
    }

    pub fn mirrored(&self) -> Self {
        Self {
            x: -self.x,
            y: self.y,
            lx: -self.lx,
            ly: self.ly,
            v: self.v,
        }
    }

    fn from_phase(z: Phase, v: f64) -> Self {
        Self {
            x: z.x,
            y: z.y,
            lx: z.lx,
            ly: z.ly,
            v,
        }
    }
}

/// Optimal feedback `(sign(s), atan2(λ_x, λ_y))` at a costate, with the
/// singular evader case mapped to 0.
pub fn optimal_controls(s: State, l: Costate) -> Controls {
    Controls::new(evader_feedback(l, s).u_e, l.lx.atan2(l.ly))
}

/// `λᵀ f(ξ, u*(λ, ξ)) + 1`.
pub fn hamiltonian(s: State, l: Costate, p: &GameParams) -> f64 {
    l.dot(dynamics(s, optimal_controls(s, l), p)) + 1.0
}

/// Terminal angle β, measured from the positive y-axis, and costate scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalCondition {
    pub beta: f64,
    pub c: f64,
}

impl TerminalCondition {
    pub fn point(&self, p: &GameParams) -> State {
        State::new(p.rho * self.beta.sin(), p.rho * self.beta.cos())
    }

    pub fn costate(&self, p: &GameParams) -> Costate {
        let s = self.point(p);
        Costate::new(self.c * s.x / p.rho, self.c * s.y / p.rho)
    }
}

/// Smallest terminal angle on the usable part with `x_T ≥ 0`.
pub fn usable_beta_min(p: &GameParams) -> f64 {
    (-p.v_p / p.v_e).acos()
}

/// Terminal costate `λ = c·ξ_T/ρ` with `c` fixed by `H = 0`.
pub fn terminal_costate(beta: f64, p: &GameParams) -> Result<(TerminalCondition, Costate)> {
    let y_t = p.rho * beta.cos();
    let radial = -p.v_p * p.rho - p.v_e * y_t;
    if beta.cos() >= -p.v_p / p.v_e || radial <= 0.0 {
        return Err(Error::NotUsable { beta });
    }
    let tc = TerminalCondition {
        beta,
        c: -p.rho / radial,
    };
    Ok((tc, tc.costate(p)))
}

/// Which family a path belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    Regular,
    Axis,
    AxisTributary,
}

/// A retrograde sub-step with constant `u_e`. The pursuer heading moves
/// linearly from `u_p_start` to `u_p_end` over it, which is exact for a
/// costate rotating at constant rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub duration: f64,
    pub u_e: f64,
    pub u_p_start: f64,
    pub u_p_end: f64,
}

/// One path at full resolution.
#[derive(Debug, Clone)]
pub struct Characteristic {
    pub family: Family,
    /// Points ordered by increasing `V`.
    pub points: Vec<CharacteristicPoint>,
    /// Retrograde control record; step `k` joins points `k` and `k + 1`.
    pub segments: Vec<Segment>,
    step_start: Vec<usize>,
    /// Axis-path index this tributary starts from.
    pub axis_index: Option<usize>,
}

impl Characteristic {
    /// Segments of steps `0..k` in retrograde order.
    fn segments_before(&self, k: usize) -> &[Segment] {
        let end = if k < self.step_start.len() {
            self.step_start[k]
        } else {
            self.segments.len()
        };
        &self.segments[..end]
    }
}

#[derive(Debug, Clone, Copy)]
struct Phase {
    x: f64,
    y: f64,
    lx: f64,
    ly: f64,
}

impl Phase {
    fn state(self) -> State {
        State::new(self.x, self.y)
    }

    fn costate(self) -> Costate {
        Costate::new(self.lx, self.ly)
    }

    fn heading(self) -> f64 {
        self.lx.atan2(self.ly)
    }

    fn axpy(self, h: f64, d: Phase) -> Phase {
        Phase {
            x: self.x + h * d.x,
            y: self.y + h * d.y,
            lx: self.lx + h * d.lx,
            ly: self.ly + h * d.ly,
        }
    }
}

fn retro_rhs(z: Phase, u_e: f64, p: &GameParams) -> Phase {
    let c = Controls {
        u_e,
        u_p: z.heading(),
    };
    let f = dynamics(z.state(), c, p);
    let w = p.omega_e * u_e;
    Phase {
        x: -f.dx,
        y: -f.dy,
        lx: w * z.ly,
        ly: -w * z.lx,
    }
}

fn retro_rk4(z: Phase, u_e: f64, h: f64, p: &GameParams) -> Phase {
    let k1 = retro_rhs(z, u_e, p);
    let k2 = retro_rhs(z.axpy(0.5 * h, k1), u_e, p);
    let k3 = retro_rhs(z.axpy(0.5 * h, k2), u_e, p);
    let k4 = retro_rhs(z.axpy(h, k3), u_e, p);
    Phase {
        x: z.x + h / 6.0 * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x),
        y: z.y + h / 6.0 * (k1.y + 2.0 * k2.y + 2.0 * k3.y + k4.y),
        lx: z.lx + h / 6.0 * (k1.lx + 2.0 * k2.lx + 2.0 * k3.lx + k4.lx),
        ly: z.ly + h / 6.0 * (k1.ly + 2.0 * k2.ly + 2.0 * k3.ly + k4.ly),
    }
}

/// A switch is only taken once the switching value has clearly left zero.
const SWITCH_TOL: f64 = 1e-9;
/// Slack on `|ξ|₂ ≤ ρ` for stored points.
const DISC_SLACK: f64 = 1e-9;

fn switching(z: Phase) -> f64 {
    switching_value(z.costate(), z.state())
}

struct Trace {
    start: Phase,
    u_e: f64,
    tau0: f64,
    /// Stop once `x` takes the opposite sign to this (0 disables).
    side: f64,
}

fn trace(
    t: Trace,
    dtau: f64,
    tau_max: f64,
    family: Family,
    axis_index: Option<usize>,
    p: &GameParams,
) -> Characteristic {
    let mut z = t.start;
    let mut u_e = t.u_e;
    let mut points = vec![CharacteristicPoint::from_phase(z, t.tau0)];
    let mut segments = Vec::new();
    let mut step_start = Vec::new();
    let n_steps = ((tau_max - t.tau0) / dtau + 1e-9).floor().max(0.0) as usize;
    for k in 0..n_steps {
        let first = segments.len();
        let up0 = z.heading();
        let mut next = retro_rk4(z, u_e, dtau, p);
        let s_new = switching(next);
        if s_new.abs() > SWITCH_TOL && s_new.signum() != u_e {
            let theta = locate_switch(z, u_e, dtau, p);
            let mid = retro_rk4(z, u_e, theta * dtau, p);
            if theta > 0.0 {
                segments.push(Segment {
                    duration: theta * dtau,
                    u_e,
                    u_p_start: up0,
                    u_p_end: mid.heading(),
                });
            }
            u_e = s_new.signum();
            next = retro_rk4(mid, u_e, (1.0 - theta) * dtau, p);
            segments.push(Segment {
                duration: (1.0 - theta) * dtau,
                u_e,
                u_p_start: mid.heading(),
                u_p_end: next.heading(),
            });
        } else {
            segments.push(Segment {
                duration: dtau,
                u_e,
                u_p_start: up0,
                u_p_end: next.heading(),
            });
        }
        let leaves = next.state().norm() > p.rho + DISC_SLACK;
        let crosses = t.side != 0.0 && next.x * t.side < 0.0;
        if leaves || crosses {
            segments.truncate(first);
            break;
        }
        step_start.push(first);
        z = next;
        points.push(CharacteristicPoint::from_phase(
            z,
            t.tau0 + (k + 1) as f64 * dtau,
        ));
    }
    Characteristic {
        family,
        points,
        segments,
        step_start,
        axis_index,
    }
}

/// Fraction of the step at which the switching value changes sign.
fn locate_switch(z: Phase, u_e: f64, dtau: f64, p: &GameParams) -> f64 {
    let g = |th: f64| switching(retro_rk4(z, u_e, th * dtau, p)) * u_e;
    if g(0.0) <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn check_step(dtau: f64, tau_max: f64) -> Result<()> {
    if !(dtau > 0.0 && dtau <= 1e-2) {
        return Err(Error::Config(format!(
            "retrograde step must lie in (0, 0.01], got {dtau}"
        )));
    }
    if !(tau_max > 0.0 && tau_max.is_finite()) {
        return Err(Error::Config(format!(
            "retrograde horizon must be positive, got {tau_max}"
        )));
    }
    Ok(())
}

/// Regular characteristic from a terminal condition with `x_T ≠ 0`.
///
/// The switching value vanishes on the circle, so the first retrograde
/// evader control is `−sign(x_T)`. Integration stops at `tau_max`, on
/// leaving the disc, or when `x` changes sign.
pub fn generate_characteristic(
    tc: TerminalCondition,
    dtau: f64,
    tau_max: f64,
    p: &GameParams,
) -> Result<Characteristic> {
    check_step(dtau, tau_max)?;
    let s = tc.point(p);
    if s.x.abs() < 1e-12 * p.rho {
        return Err(Error::SingularStall { beta: tc.beta });
    }
    let l = tc.costate(p);
    let start = Phase {
        x: s.x,
        y: s.y,
        lx: l.lx,
        ly: l.ly,
    };
    let side = s.x.signum();
    Ok(trace(
        Trace {
            start,
            u_e: -side,
            tau0: 0.0,
            side,
        },
        dtau,
        tau_max,
        Family::Regular,
        None,
        p,
    ))
}

/// Right-limit costate on the axis at height `y`.
///
/// On the universal line (`y ≤ 0`) this is `(0, 1/(v_e − v_p))`. On the
/// ridge it is `r·(−q, √(1 − q²))` with `q = ω_e y/v_p` and `r` fixed by
/// `H = 0`. Returns `None` where the ridge law breaks down (`q ≥ 1`).
pub fn axis_costate(y: f64, p: &GameParams) -> Option<Costate> {
    let q = (p.omega_e * y / p.v_p).max(0.0);
    if q >= 1.0 {
        return None;
    }
    let c = (1.0 - q * q).sqrt();
    let r = 1.0 / (c * (p.v_e - p.v_p * c));
    Some(Costate::new(-r * q, r * c))
}

/// Retrograde speed `dy/dτ` along the axis path.
fn axis_speed(y: f64, p: &GameParams) -> f64 {
    let q = (p.omega_e * y / p.v_p).clamp(0.0, 1.0);
    p.v_e - p.v_p * (1.0 - q * q).sqrt()
}

/// Right-limit controls along the axis path.
fn axis_controls(y: f64, p: &GameParams) -> Controls {
    if y <= 0.0 {
        Controls { u_e: 0.0, u_p: 0.0 }
    } else {
        let q = (p.omega_e * y / p.v_p).min(1.0);
        Controls {
            u_e: -1.0,
            u_p: -q.asin(),
        }
    }
}

/// Path along the y-axis from `(0, −ρ)`: the universal line up to the
/// origin, where `V(0, y) = (ρ + y)/(v_e − v_p)`, then the dispersal ridge.
/// Costates are the right limits.
pub fn axis_path(dtau: f64, tau_max: f64, p: &GameParams) -> Result<Characteristic> {
    check_step(dtau, tau_max)?;
    let ridge_top = (p.v_p / p.omega_e).min(p.rho) * (1.0 - 1e-6);
    let n_steps = (tau_max / dtau + 1e-9).floor() as usize;
    let mut y = -p.rho;
    let point = |y: f64, v: f64| {
        let l = axis_costate(y, p).expect("axis path stays below the ridge top");
        CharacteristicPoint {
            x: 0.0,
            y,
            lx: l.lx,
            ly: l.ly,
            v,
        }
    };
    let mut points = vec![point(y, 0.0)];
    let mut segments = Vec::new();
    let mut step_start = Vec::new();
    for k in 0..n_steps {
        let k1 = axis_speed(y, p);
        let k2 = axis_speed(y + 0.5 * dtau * k1, p);
        let k3 = axis_speed(y + 0.5 * dtau * k2, p);
        let k4 = axis_speed(y + dtau * k3, p);
        let next = y + dtau / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if next >= ridge_top {
            break;
        }
        let (c0, c1) = (axis_controls(y, p), axis_controls(next, p));
        step_start.push(segments.len());
        if y < 0.0 && next > 0.0 {
            // Split at the origin where the controls change regime.
            let th = -y / (next - y);
            segments.push(Segment {
                duration: th * dtau,
                u_e: 0.0,
                u_p_start: 0.0,
                u_p_end: 0.0,
            });
            segments.push(Segment {
                duration: (1.0 - th) * dtau,
                u_e: -1.0,
                u_p_start: 0.0,
                u_p_end: c1.u_p,
            });
        } else {
            segments.push(Segment {
                duration: dtau,
                u_e: c1.u_e,
                u_p_start: c0.u_p,
                u_p_end: c1.u_p,
            });
        }
        y = next;
        points.push(point(y, (k + 1) as f64 * dtau));
    }
    Ok(Characteristic {
        family: Family::Axis,
        points,
        segments,
        step_start,
        axis_index: None,
    })
}

/// Settings for [`build_field`] and [`build_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Regular characteristics over the usable part with `x_T > 0`.
    pub n_angles: usize,
    pub dtau: f64,
    pub tau_max: f64,
    /// Tributaries leaving the universal line, and again the ridge.
    pub n_tributaries: usize,
    /// Keep every `stride`-th point of each path in the dataset.
    pub stride: usize,
    /// Envelope cell size.
    pub cell: f64,
    /// A branch is dropped from a cell when its smallest value there exceeds
    /// the cell minimum by more than this.
    pub envelope_tol: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_angles: 720,
            dtau: 1e-3,
            tau_max: 6.0,
            n_tributaries: 200,
            stride: 10,
            cell: 0.02,
            envelope_tol: 0.05,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        check_step(self.dtau, self.tau_max)?;
        if self.n_angles < 2 {
            return Err(Error::Config(
                "at least 2 terminal angles are needed".into(),
            ));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if !(self.cell > 0.0 && self.envelope_tol >= 0.0) {
            return Err(Error::Config(
                "envelope cell and tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// All generated paths for `x ≥ 0` at full resolution.
#[derive(Debug, Clone)]
pub struct CharacteristicField {
    pub params: GameParams,
    pub axis: Characteristic,
    pub paths: Vec<Characteristic>,
}

/// Generates regular characteristics, the axis path and its tributaries.
pub fn build_field(p: &GameParams, cfg: &GenConfig) -> Result<CharacteristicField> {
    p.validate()?;
    cfg.validate()?;
    let b0 = usable_beta_min(p);
    if !(b0 < std::f64::consts::PI) {
        return Err(Error::EmptyUsablePart);
    }
    let mut paths = Vec::with_capacity(cfg.n_angles + 2 * cfg.n_tributaries);
    let span = std::f64::consts::PI - b0;
    for i in 0..cfg.n_angles {
        let beta = b0 + span * (i as f64 + 0.5) / cfg.n_angles as f64;
        let (tc, _) = terminal_costate(beta, p)?;
        paths.push(generate_characteristic(tc, cfg.dtau, cfg.tau_max, p)?);
    }
    let axis = axis_path(cfg.dtau, cfg.tau_max, p)?;
    for k in tributary_seeds(&axis, cfg.n_tributaries) {
        let a = axis.points[k];
        let start = Phase {
            x: 0.0,
            y: a.y,
            lx: a.lx,
            ly: a.ly,
        };
        paths.push(trace(
            Trace {
                start,
                u_e: -1.0,
                tau0: a.v,
                side: 0.0,
            },
            cfg.dtau,
            cfg.tau_max,
            Family::AxisTributary,
            Some(k),
            p,
        ));
    }
    Ok(CharacteristicField {
        params: *p,
        axis,
        paths,
    })
}

/// Axis indices spread evenly over the universal line and, separately, over
/// the ridge. The terminal point itself is skipped.
fn tributary_seeds(axis: &Characteristic, n: usize) -> Vec<usize> {
    let origin = axis
        .points
        .iter()
        .position(|q| q.y > 0.0)
        .unwrap_or(axis.points.len());
    let mut seeds = Vec::new();
    let mut spread = |lo: usize, hi: usize| {
        if hi <= lo || n == 0 {
            return;
        }
        let len = hi - lo;
        for j in 1..=n {
            let k = lo + (j * len) / n;
            if k < hi && seeds.last() != Some(&k) {
                seeds.push(k);
            }
        }
    };
    spread(0, origin);
    spread(origin.saturating_sub(1), axis.points.len());
    seeds.sort_unstable();
    seeds.dedup();
    seeds.retain(|&k| k > 0);
    seeds
}

/// Outcome of re-integrating a stored path forward in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replay {
    /// First time `|ξ|₂ ≥ ρ`, if reached.
    pub exit_time: Option<f64>,
    pub end: State,
}

impl CharacteristicField {
    /// Re-integrates the game forward from point `k` of `path` (or of the
    /// axis path when `path` is `None`) using the stored control record,
    /// continuing along the axis path for tributaries. After the record runs
    /// out, the last control is held for up to `extra` time units.
    pub fn replay(&self, path: Option<usize>, k: usize, extra: f64) -> Replay {
        let ch = path.map_or(&self.axis, |i| &self.paths[i]);
        let start = ch.points[k].state();
        let mut chain: Vec<Segment> = ch.segments_before(k).iter().rev().copied().collect();
        if let Some(a) = ch.axis_index {
            chain.extend(self.axis.segments_before(a).iter().rev().copied());
        }
        replay_segments(start, &chain, extra, &self.params)
    }

    /// Flattens into a mirrored, envelope-filtered dataset.
    pub fn to_dataset(&self, cfg: &GenConfig) -> Dataset {
        let mut tagged: Vec<(u8, CharacteristicPoint)> = Vec::new();
        let mut push = |fam: Family, q: &CharacteristicPoint| {
            let id = match fam {
                Family::Regular => 0,
                Family::Axis => 2,
                Family::AxisTributary => 4,
            };
            tagged.push((id, *q));
            tagged.push((id + 1, q.mirrored()));
        };
        let stride = cfg.stride.max(1);
        for q in self.axis.points.iter().step_by(stride) {
            push(Family::Axis, q);
        }
        for ch in &self.paths {
            for q in ch.points.iter().step_by(stride) {
                push(ch.family, q);
            }
        }
        let points = min_envelope(tagged, cfg.cell, cfg.envelope_tol);
        Dataset::from_points(points)
    }
}

fn replay_segments(start: State, chain: &[Segment], extra: f64, p: &GameParams) -> Replay {
    let mut s = start;
    let mut t = 0.0;
    let inside = |s: State| s.norm() < p.rho;
    if !inside(s) {
        return Replay {
            exit_time: Some(0.0),
            end: s,
        };
    }
    let step = |s: State, seg: &Segment, from: f64, h: f64| -> State {
        // Forward time runs the segment backward: heading from end to start.
        let dup = wrap_angle(seg.u_p_start - seg.u_p_end);
        let ctl = |tt: f64| Controls {
            u_e: seg.u_e,
            u_p: seg.u_p_end + dup * (tt / seg.duration).min(1.0),
        };
        let k1 = dynamics(s, ctl(from), p);
        let s2 = State::new(s.x + 0.5 * h * k1.dx, s.y + 0.5 * h * k1.dy);
        let k2 = dynamics(s2, ctl(from + 0.5 * h), p);
        let s3 = State::new(s.x + 0.5 * h * k2.dx, s.y + 0.5 * h * k2.dy);
        let k3 = dynamics(s3, ctl(from + 0.5 * h), p);
        let s4 = State::new(s.x + h * k3.dx, s.y + h * k3.dy);
        let k4 = dynamics(s4, ctl(from + h), p);
        State::new(
            s.x + h / 6.0 * (k1.dx + 2.0 * k2.dx + 2.0 * k3.dx + k4.dx),
            s.y + h / 6.0 * (k1.dy + 2.0 * k2.dy + 2.0 * k3.dy + k4.dy),
        )
    };
    for seg in chain {
        let next = step(s, seg, 0.0, seg.duration);
        if !inside(next) {
            let th = exit_fraction(s, next, p.rho);
            return Replay {
                exit_time: Some(t + th * seg.duration),
                end: next,
            };
        }
        s = next;
        t += seg.duration;
    }
    if let Some(last) = chain.last() {
        let hold = Segment {
            u_p_end: last.u_p_start,
            ..*last
        };
        let h = last.duration.max(1e-6);
        let mut held = 0.0;
        while held < extra {
            let next = step(s, &hold, hold.duration, h);
            if !inside(next) {
                let th = exit_fraction(s, next, p.rho);
                return Replay {
                    exit_time: Some(t + th * h),
                    end: next,
                };
            }
            s = next;
            t += h;
            held += h;
        }
    }
    Replay {
        exit_time: None,
        end: s,
    }
}

/// Chord fraction where `|a + θ(b − a)|₂ = ρ`.
fn exit_fraction(a: State, b: State, rho: f64) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let qa = dx * dx + dy * dy;
    let qb = 2.0 * (a.x * dx + a.y * dy);
    let qc = a.x * a.x + a.y * a.y - rho * rho;
    if qa == 0.0 {
        return 0.0;
    }
    ((-qb + (qb * qb - 4.0 * qa * qc).max(0.0).sqrt()) / (2.0 * qa)).clamp(0.0, 1.0)
}

/// Per cell, drops every branch whose smallest value exceeds the cell
/// minimum by more than `tol`.
fn min_envelope(
    tagged: Vec<(u8, CharacteristicPoint)>,
    cell: f64,
    tol: f64,
) -> Vec<CharacteristicPoint> {
    let key = |q: &CharacteristicPoint| ((q.x / cell).floor() as i64, (q.y / cell).floor() as i64);
    let mut cells: BTreeMap<(i64, i64), BTreeMap<u8, f64>> = BTreeMap::new();
    for (id, q) in &tagged {
        let m = cells
            .entry(key(q))
            .or_default()
            .entry(*id)
            .or_insert(f64::INFINITY);
        *m = m.min(q.v);
    }
    tagged
        .into_iter()
        .filter(|(id, q)| {
            let branches = &cells[&key(q)];
            let lowest = branches.values().fold(f64::INFINITY, |a, &b| a.min(b));
            branches[id] <= lowest + tol
        })
        .map(|(_, q)| q)
        .collect()
}

/// Training data: points sorted by `(x, y)`, exact duplicates removed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub points: Vec<CharacteristicPoint>,
}

fn row_order(a: &CharacteristicPoint, b: &CharacteristicPoint) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.lx.total_cmp(&b.lx))
        .then(a.ly.total_cmp(&b.ly))
        .then(a.v.total_cmp(&b.v))
}

impl Dataset {
    pub fn from_points(mut points: Vec<CharacteristicPoint>) -> Self {
        // −0.0 and 0.0 must land on one row for the mirror pairing.
        for q in &mut points {
            q.x += 0.0;
            q.lx += 0.0;
        }
        points.sort_by(row_order);
        points.dedup_by(|a, b| row_order(a, b).is_eq());
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points with `|λ|₂ ≤ bound`.
    pub fn with_costate_bound(&self, bound: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .filter(|q| q.costate().norm() <= bound)
                .copied()
                .collect(),
        }
    }
}

/// Generates the mirrored, envelope-filtered training dataset.
pub fn build_dataset(p: &GameParams, cfg: &GenConfig) -> Result<Dataset> {
    let field = build_field(p, cfg)?;
    let ds = field.to_dataset(cfg);
    if ds.is_empty() {
        return Err(Error::EmptyUsablePart);
    }
    Ok(ds)
}

pub const DATASET_HEADER: &str = "x,y,dvx,dvy,v";

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{DATASET_HEADER}").map_err(io)?;
    for q in &ds.points {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            q.x, q.y, q.lx, q.ly, q.v
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let header = rdr
        .headers()
        .map_err(|e| FormatError::Csv(e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != DATASET_HEADER {
        return Err(FormatError::Shape(format!(
            "dataset header `{header}`, expected `{DATASET_HEADER}`"
        ))
        .into());
    }
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| FormatError::Csv(e.to_string()))?;
        if rec.len() != 5 {
            return Err(FormatError::Truncated(format!("row with {} fields", rec.len())).into());
        }
        let mut v = [0.0; 5];
        for (slot, field) in v.iter_mut().zip(rec.iter()) {
            *slot = field
                .trim()
                .parse()
                .map_err(|_| FormatError::Csv(format!("bad number `{field}`")))?;
        }
        points.push(CharacteristicPoint {
            x: v[0],
            y: v[1],
            lx: v[2],
            ly: v[3],
            v: v[4],
        });
    }
    Ok(Dataset { points })
}

/// Nearest-neighbour lookup over a dataset on a uniform bucket grid.
#[derive(Debug, Clone)]
pub struct NearestIndex {
    points: Vec<CharacteristicPoint>,
    origin: (f64, f64),
    cell: f64,
    dims: (usize, usize),
    buckets: Vec<Vec<u32>>,
}

impl NearestIndex {
    pub fn new(ds: &Dataset, cell: f64) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for q in &ds.points {
            x0 = x0.min(q.x);
            y0 = y0.min(q.y);
            x1 = x1.max(q.x);
            y1 = y1.max(q.y);
        }
        let nx = ((x1 - x0) / cell).floor() as usize + 1;
        let ny = ((y1 - y0) / cell).floor() as usize + 1;
        let mut buckets = vec![Vec::new(); nx * ny];
        for (i, q) in ds.points.iter().enumerate() {
            let bx = ((q.x - x0) / cell) as usize;
            let by = ((q.y - y0) / cell) as usize;
            buckets[by.min(ny - 1) * nx + bx.min(nx - 1)].push(i as u32);
        }
        Ok(Self {
            points: ds.points.clone(),
            origin: (x0, y0),
            cell,
            dims: (nx, ny),
            buckets,
        })
    }

    pub fn nearest(&self, s: State) -> &CharacteristicPoint {
        let (nx, ny) = self.dims;
        let fx = ((s.x - self.origin.0) / self.cell).floor();
        let fy = ((s.y - self.origin.1) / self.cell).floor();
        let cx = fx.clamp(0.0, (nx - 1) as f64) as i64;
        let cy = fy.clamp(0.0, (ny - 1) as f64) as i64;
        let mut best = (f64::INFINITY, 0u32);
        let mut ring = 0i64;
        loop {
            let mut touched = false;
            for by in (cy - ring)..=(cy + ring) {
                for bx in (cx - ring)..=(cx + ring) {
                    let on_ring = (by - cy).abs() == ring || (bx - cx).abs() == ring;
                    if !on_ring || bx < 0 || by < 0 || bx >= nx as i64 || by >= ny as i64 {
                        continue;
                    }
                    touched = true;
                    for &i in &self.buckets[by as usize * nx + bx as usize] {
                        let q = &self.points[i as usize];
                        let d = (q.x - s.x).powi(2) + (q.y - s.y).powi(2);
                        if d < best.0 || (d == best.0 && i < best.1) {
                            best = (d, i);
                        }
                    }
                }
            }
            // Anything beyond this ring is at least `ring · cell` away.
            let reach = ring as f64 * self.cell;
            if best.0.is_finite() && reach * reach >= best.0 {
                break;
            }
            if !touched && ring as usize > nx.max(ny) {
                break;
            }
            ring += 1;
        }
        &self.points[best.1 as usize]
    }
}
