//! One-hold-interval gain/loss value functions.
//!
//! `V_min^δ` is the best the evader can do against a pursuer that holds its
//! feedback control for `δ`; `V_max^δ` is the pursuer's counterpart. Outside
//! the game set the value is extended by zero.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::characteristics::{Costate, NearestIndex};
use crate::error::{Error, FormatError, Result};
use crate::feedback::{evader_feedback, select_controls, SelectionPolicy};
use crate::game::{rk4_step, wrap_angle, Controls, GameParams, State};
use crate::model::MlpModel;

/// Coarse grid size for the evader turn rate.
pub const UE_GRID: usize = 201;
/// Coarse grid size for the pursuer heading.
pub const UP_GRID: usize = 360;
/// Final bracket width of the golden-section refinement.
pub const REFINE_WIDTH: f64 = 1e-4;
/// Coarse grid for the evader rate when its feedback is set-valued.
const UE_INTERVAL_GRID: usize = 21;
/// Coarse heading cells refined by golden section.
const UP_REFINED_CELLS: usize = 3;
/// Largest integration step of the hold-interval flow.
const MAX_FLOW_DT: f64 = 1e-3;

/// `ψ_V` inside the game set (clamped at zero), zero outside.
pub fn value_eval(s: State, m: &MlpModel, p: &GameParams) -> f64 {
    if s.norm() > p.rho {
        0.0
    } else {
        m.value(s).max(0.0)
    }
}

/// Where `V` comes from inside the game set.
#[derive(Debug, Clone, Copy)]
pub enum ValueSource<'a> {
    Network,
    /// Value of the nearest characteristic point.
    Nearest(&'a NearestIndex),
}

/// Everything the gain/loss functions need besides the state and `δ`.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    /// Supplies the feedback controls, and `V` for [`ValueSource::Network`].
    pub model: &'a MlpModel,
    pub source: ValueSource<'a>,
    pub policy: SelectionPolicy,
    pub params: GameParams,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a MlpModel, params: GameParams) -> Self {
        Self {
            model,
            source: ValueSource::Network,
            policy: SelectionPolicy::default(),
            params,
        }
    }

    pub fn value(&self, s: State) -> f64 {
        match self.source {
            ValueSource::Network => value_eval(s, self.model, &self.params),
            ValueSource::Nearest(idx) => {
                if s.norm() > self.params.rho {
                    0.0
                } else {
                    idx.nearest(s).v.max(0.0)
                }
            }
        }
    }

    /// `δ + V(ξ(δ))` under constant controls. A path that leaves the game
    /// set ends there and contributes `V = 0`.
    pub fn hold_value(&self, s0: State, c: Controls, delta: f64) -> f64 {
        let p = &self.params;
        if s0.norm() > p.rho {
            return delta;
        }
        let n = (delta / MAX_FLOW_DT).ceil().max(10.0) as usize;
        let h = delta / n as f64;
        let mut s = s0;
        for _ in 0..n {
            s = rk4_step(s, c, h, p);
            if s.norm() > p.rho {
                return delta;
            }
        }
        delta + self.value(s)
    }

    /// `W`: the hold value under the paired feedback controls.
    pub fn paired_value(&self, s0: State, delta: f64) -> f64 {
        let sel = select_controls(s0, self.model, &self.policy);
        self.hold_value(s0, sel.controls, delta)
    }

    /// `V_min^δ`: minimum over `u_e ∈ [−1, 1]` and the pursuer's feedback
    /// candidates.
    pub fn v_min_delta(&self, s0: State, delta: f64) -> f64 {
        let sel = select_controls(s0, self.model, &self.policy);
        let mut best = self.hold_value(s0, sel.controls, delta);
        for cand in &sel.candidates {
            let f = |u: f64| self.hold_value(s0, Controls::new(u, cand.u_p), delta);
            best = best.min(minimize_on_interval(f, -1.0, 1.0, UE_GRID));
        }
        best
    }

    /// `V_max^δ`: maximum over `u_p` and the evader's feedback set.
    pub fn v_max_delta(&self, s0: State, delta: f64) -> f64 {
        let sel = select_controls(s0, self.model, &self.policy);
        let mut best = self.hold_value(s0, sel.controls, delta);
        let over_up = |u_e: f64| {
            let f = |u: f64| -self.hold_value(s0, Controls::new(u_e, u), delta);
            -minimize_on_circle(f, UP_GRID, UP_REFINED_CELLS)
        };
        match self.evader_set(s0, &sel.candidates) {
            EvaderSet::Points(us) => {
                for u_e in us {
                    best = best.max(over_up(u_e));
                }
            }
            EvaderSet::Interval => {
                let g = |u_e: f64| -over_up(u_e);
                best = best.max(-minimize_on_interval(g, -1.0, 1.0, UE_INTERVAL_GRID));
            }
        }
        best
    }

    /// The evader's feedback as a set. On the axis the value is symmetric in
    /// `x`, its generalized gradient has a zero `x` component, and the
    /// switching value vanishes; the same holds where the gradient head
    /// itself gives a singular switching value. Both cases admit every rate.
    pub fn evader_set(&self, s0: State, candidates: &[Controls]) -> EvaderSet {
        if candidates.len() > 1 {
            return EvaderSet::Interval;
        }
        let dv = self.model.forward(s0).dv;
        if evader_feedback(Costate::new(dv[0], dv[1]), s0).singular {
            return EvaderSet::Interval;
        }
        EvaderSet::Points(candidates.iter().map(|c| c.u_e).collect())
    }
}

/// Admissible evader rates in `V_max^δ`.
#[derive(Debug, Clone, PartialEq)]
pub enum EvaderSet {
    Points(Vec<f64>),
    /// All of `[−1, 1]`.
    Interval,
}

/// Grid search on `[a, b]` followed by golden section around the best node.
pub fn minimize_on_interval(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let node = |i: usize| a + (b - a) * i as f64 / (n - 1) as f64;
    let (mut best_i, mut best) = (0, f64::INFINITY);
    for i in 0..n {
        let v = f(node(i));
        if v < best {
            best = v;
            best_i = i;
        }
    }
    let lo = node(best_i.saturating_sub(1));
    let hi = node((best_i + 1).min(n - 1));
    best.min(golden_section(&f, lo, hi))
}

/// Grid search over headings on (−π, π], then golden section around the
/// best `k` cells.
pub fn minimize_on_circle(f: impl Fn(f64) -> f64, n: usize, k: usize) -> f64 {
    let step = 2.0 * PI / n as f64;
    let node = |i: usize| -PI + step * (i + 1) as f64;
    let mut vals: Vec<(f64, usize)> = (0..n).map(|i| (f(node(i)), i)).collect();
    let mut best = vals.iter().fold(f64::INFINITY, |a, v| a.min(v.0));
    vals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(_, i) in vals.iter().take(k) {
        let centre = node(i);
        let g = |u: f64| f(wrap_angle(u));
        best = best.min(golden_section(&g, centre - step, centre + step));
    }
    best
}

/// Golden-section minimum of `f` on `[a, b]` down to [`REFINE_WIDTH`].
fn golden_section(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut best = fc.min(fd);
    while b - a > REFINE_WIDTH {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
            best = best.min(fc);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
            best = best.min(fd);
        }
    }
    best
}

/// Gain/loss values on a square grid over the game set's bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainLossField {
    pub delta: f64,
    pub res: usize,
    pub rho: f64,
    /// Row-major with `y` varying slowest. NaN off the mask.
    pub values_min: Vec<f64>,
    pub values_max: Vec<f64>,
    /// `V` at the grid nodes, NaN off the mask.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GainLossField {
    /// Node coordinate `i` of `res` along either axis.
    pub fn coord(rho: f64, res: usize, i: usize) -> f64 {
        let n = (res - 1) as f64;
        rho * (((2 * i) as f64 - n) / n)
    }

    pub fn state(&self, i: usize, j: usize) -> State {
        State::new(
            Self::coord(self.rho, self.res, i),
            Self::coord(self.rho, self.res, j),
        )
    }

    /// Masked cells as `(state, vmin, vmax, v)`.
    pub fn cells(&self) -> impl Iterator<Item = (State, f64, f64, f64)> + '_ {
        (0..self.res * self.res).filter(|&k| self.mask[k]).map(|k| {
            let (i, j) = (k % self.res, k / self.res);
            (
                self.state(i, j),
                self.values_min[k],
                self.values_max[k],
                self.values[k],
            )
        })
    }
}

/// Both functions over a `res × res` grid for every `δ`.
pub fn field_sweep(deltas: &[f64], res: usize, ev: &Evaluator) -> Result<Vec<GainLossField>> {
    if res < 11 {
        return Err(Error::Config(format!(
            "resolution must be at least 11, got {res}"
        )));
    }
    if let Some(d) = deltas.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(Error::Config(format!(
            "hold duration must be positive, got {d}"
        )));
    }
    let rho = ev.params.rho;
    let mut out = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let n = res * res;
        let mut f = GainLossField {
            delta,
            res,
            rho,
            values_min: vec![f64::NAN; n],
            values_max: vec![f64::NAN; n],
            values: vec![f64::NAN; n],
            mask: vec![false; n],
        };
        for k in 0..n {
            let s = f.state(k % res, k / res);
            if s.x * s.x + s.y * s.y > rho * rho {
                continue;
            }
            f.mask[k] = true;
            f.values_min[k] = ev.v_min_delta(s, delta);
            f.values_max[k] = ev.v_max_delta(s, delta);
            f.values[k] = ev.value(s);
        }
        out.push(f);
    }
    Ok(out)
}

pub const FIELD_HEADER: &str = "x,y,vmin,vmax,v";

pub fn write_field(f: &GainLossField, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut body = String::new();
    body.push_str(FIELD_HEADER);
    body.push('\n');
    for (s, lo, hi, v) in f.cells() {
        body.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            s.x, s.y, lo, hi, v
        ));
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Rows of a field file, one per masked cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldRow {
    pub state: State,
    pub vmin: f64,
    pub vmax: f64,
    pub v: f64,
}

pub fn read_field(path: &Path) -> Result<Vec<FieldRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| FormatError::Csv(e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != FIELD_HEADER {
        return Err(FormatError::Shape(format!("field header `{header}`")).into());
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
        rows.push(FieldRow {
            state: State::new(v[0], v[1]),
            vmin: v[2],
            vmax: v[3],
            v: v[4],
        });
    }
    Ok(rows)
}
