//! Optimal feedback laws from a value gradient, and the selection between
//! one-sided limits near the non-differentiability set on the y-axis.

use serde::{Deserialize, Serialize};

use crate::characteristics::Costate;
use crate::error::{Error, Result};
use crate::game::{wrap_angle, Controls, State};
use crate::model::MlpModel;

/// Below this magnitude the switching value counts as zero.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Default axis-proximity threshold.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Evader control from the switching value `∇ₓV·y − ∇ᵧV·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaderChoice {
    /// −1, 0 or +1. Zero only when `singular` is set.
    pub u_e: f64,
    /// The switching value vanished and any `u_e ∈ [−1, 1]` is optimal.
    pub singular: bool,
}

/// Switching function `∇ₓV·y − ∇ᵧV·x`.
#[inline]
pub fn switching_value(grad: Costate, s: State) -> f64 {
    grad.lx * s.y - grad.ly * s.x
}

/// `u_e* = sign(∇ₓV·y − ∇ᵧV·x)`.
pub fn evader_feedback(grad: Costate, s: State) -> EvaderChoice {
    let sw = switching_value(grad, s);
    if sw.abs() <= SINGULAR_TOL {
        EvaderChoice {
            u_e: 0.0,
            singular: true,
        }
    } else {
        EvaderChoice {
            u_e: sw.signum(),
            singular: false,
        }
    }
}

/// `u_p* = atan2(∇ₓV, ∇ᵧV)` on (−π, π].
pub fn pursuer_feedback(grad: Costate) -> Result<f64> {
    if grad.lx == 0.0 && grad.ly == 0.0 {
        return Err(Error::ZeroGradient);
    }
    Ok(wrap_angle(grad.lx.atan2(grad.ly)))
}

/// Source of the controls and tie-break on the axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Use the ψ_u heads. On the axis, take the limit from the side the
    /// state is on (x = 0 counts as the positive side).
    NetworkDirect,
    /// Use the ψ_u heads, always taking the limit from x < 0 on the axis.
    LeftLimit,
    /// Use the ψ_u heads, always taking the limit from x > 0 on the axis.
    RightLimit,
    /// Apply the analytic laws to ψ_dV. On the axis, same side rule as
    /// `NetworkDirect`.
    AnalyticFromGradient,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "network-direct" => Ok(Self::NetworkDirect),
            "left-limit" => Ok(Self::LeftLimit),
            "right-limit" => Ok(Self::RightLimit),
            "analytic-from-gradient" => Ok(Self::AnalyticFromGradient),
            other => Err(Error::Config(format!("unknown selection mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NetworkDirect => "network-direct",
            Self::LeftLimit => "left-limit",
            Self::RightLimit => "right-limit",
            Self::AnalyticFromGradient => "analytic-from-gradient",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub mode: SelectionMode,
    pub epsilon: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            mode: SelectionMode::NetworkDirect,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl SelectionPolicy {
    pub fn new(mode: SelectionMode, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::Config(format!(
                "axis threshold must be positive, got {epsilon}"
            )));
        }
        Ok(Self { mode, epsilon })
    }
}

/// Controls chosen at a state, together with every candidate the policy
/// picked from (one off the axis, two on it).
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub controls: Controls,
    pub candidates: Vec<Controls>,
}

/// Controls at `s` from the model under `policy`.
pub fn select_controls(s: State, m: &MlpModel, policy: &SelectionPolicy) -> Selection {
    let eps = policy.epsilon;
    let source = |q: State| -> Controls {
        match policy.mode {
            SelectionMode::AnalyticFromGradient => analytic_controls(q, m),
            _ => m.controls(q),
        }
    };
    if s.x.abs() > eps {
        let c = source(s);
        return Selection {
            controls: c,
            candidates: vec![c],
        };
    }
    let left = source(State::new(-eps, s.y));
    let right = source(State::new(eps, s.y));
    let controls = match policy.mode {
        SelectionMode::LeftLimit => left,
        SelectionMode::RightLimit => right,
        _ if s.x < 0.0 => left,
        _ => right,
    };
    Selection {
        controls,
        candidates: vec![left, right],
    }
}

/// The analytic laws applied to the gradient head. A singular switching
/// value falls back to the u_e head.
fn analytic_controls(s: State, m: &MlpModel) -> Controls {
    let out = m.forward(s);
    let grad = Costate::new(out.dv[0], out.dv[1]);
    let ev = evader_feedback(grad, s);
    let u_e = if ev.singular { out.u[0] } else { ev.u_e };
    let u_p = pursuer_feedback(grad).unwrap_or(out.u[1]);
    Controls::new(u_e, u_p)
}
