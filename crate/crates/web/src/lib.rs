//! Browser demo. Loads a trained checkpoint and exposes three operations to
//! the page: a sample-and-hold run from a clicked start, a network field on a
//! grid, and the gain/loss values at a point.

use prying_core::closed_loop::{simulate, SampleHoldConfig};
use prying_core::gain_loss::{value_eval, Evaluator, GainLossField};
use prying_core::model::{parse_checkpoint, MlpModel};
use prying_core::{GameParams, State};
use wasm_bindgen::prelude::*;

/// Checkpoint of the default pipeline.
pub const DEFAULT_CHECKPOINT: &str = include_str!("../assets/checkpoint.json");

/// Integration step of demo runs.
const DT: f64 = 1e-3;

/// Outcome of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub game_time: Option<f64>,
    /// `[x0, y0, x1, y1, …]`.
    pub path: Vec<f64>,
}

fn start(x: f64, y: f64, p: &GameParams) -> Result<State, String> {
    let s = State::new(x, y);
    if !(x.is_finite() && y.is_finite()) || !p.in_game_set(s) {
        return Err(format!("({x}, {y}) lies outside the game set"));
    }
    Ok(s)
}

pub fn run(m: &MlpModel, x0: f64, y0: f64, delta_e: f64, delta_p: f64) -> Result<Run, String> {
    let p = GameParams::default();
    let s0 = start(x0, y0, &p)?;
    let cfg = SampleHoldConfig {
        delta_e,
        delta_p,
        dt: DT,
        ..SampleHoldConfig::default()
    };
    let tr = simulate(s0, m, &cfg, &p).map_err(|e| e.to_string())?;
    Ok(Run {
        game_time: tr.game_time(),
        path: tr.states.iter().flat_map(|s| [s.x, s.y]).collect(),
    })
}

/// `res × res` grid over the disc's bounding box, row-major with `y`
/// increasing; NaN outside the disc. `kind` is `value`, `evader` or
/// `pursuer`.
pub fn grid(m: &MlpModel, kind: &str, res: usize) -> Result<Vec<f64>, String> {
    if !(2..=400).contains(&res) {
        return Err(format!("resolution must lie in [2, 400], got {res}"));
    }
    let p = GameParams::default();
    let f: fn(State, &MlpModel, &GameParams) -> f64 = match kind {
        "value" => value_eval,
        "evader" => |s, m, _| m.controls(s).u_e,
        "pursuer" => |s, m, _| m.controls(s).u_p,
        other => return Err(format!("unknown field `{other}`")),
    };
    let mut out = Vec::with_capacity(res * res);
    for j in 0..res {
        for i in 0..res {
            let s = State::new(
                GainLossField::coord(p.rho, res, i),
                GainLossField::coord(p.rho, res, j),
            );
            out.push(if s.norm() <= p.rho {
                f(s, m, &p)
            } else {
                f64::NAN
            });
        }
    }
    Ok(out)
}

/// `[V, V_min^δ, V_max^δ]` at `(x, y)`.
pub fn gain_loss_at(m: &MlpModel, x: f64, y: f64, delta: f64) -> Result<[f64; 3], String> {
    let p = GameParams::default();
    let s = start(x, y, &p)?;
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(format!("hold duration must lie in (0, 1], got {delta}"));
    }
    let ev = Evaluator::new(m, p);
    Ok([
        ev.value(s),
        ev.v_min_delta(s, delta),
        ev.v_max_delta(s, delta),
    ])
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
pub struct Demo {
    model: MlpModel,
}

#[wasm_bindgen]
pub struct SimResult {
    game_time: f64,
    path: Vec<f64>,
}

#[wasm_bindgen]
impl SimResult {
    /// Game time, NaN if the horizon ran out.
    #[wasm_bindgen(getter)]
    pub fn game_time(&self) -> f64 {
        self.game_time
    }

    #[wasm_bindgen(getter)]
    pub fn path(&self) -> Vec<f64> {
        self.path.clone()
    }
}

#[wasm_bindgen]
impl Demo {
    /// Demo backed by the bundled checkpoint.
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsError> {
        Self::from_checkpoint(DEFAULT_CHECKPOINT)
    }

    /// Demo backed by a checkpoint file's text.
    pub fn from_checkpoint(text: &str) -> Result<Demo, JsError> {
        let (model, _) = parse_checkpoint(text).map_err(|e| js(e.to_string()))?;
        Ok(Demo { model })
    }

    pub fn simulate(
        &self,
        x0: f64,
        y0: f64,
        delta_e: f64,
        delta_p: f64,
    ) -> Result<SimResult, JsError> {
        let r = run(&self.model, x0, y0, delta_e, delta_p).map_err(js)?;
        Ok(SimResult {
            game_time: r.game_time.unwrap_or(f64::NAN),
            path: r.path,
        })
    }

    pub fn field(&self, kind: &str, res: usize) -> Result<Vec<f64>, JsError> {
        grid(&self.model, kind, res).map_err(js)
    }

    pub fn gain_loss(&self, x: f64, y: f64, delta: f64) -> Result<Vec<f64>, JsError> {
        gain_loss_at(&self.model, x, y, delta)
            .map(|v| v.to_vec())
            .map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MlpModel {
        parse_checkpoint(DEFAULT_CHECKPOINT).unwrap().0
    }

    #[test]
    fn bundled_checkpoint_runs_the_table_start() {
        let r = run(&model(), 0.0, 1.0, 0.01, 0.01).unwrap();
        let t = r.game_time.unwrap();
        assert!((t - 3.4435).abs() <= 0.15, "{t}");
        assert_eq!(r.path.len() % 2, 0);
        assert_eq!(&r.path[..2], &[0.0, 1.0]);
    }

    #[test]
    fn run_rejects_bad_input() {
        let m = model();
        assert!(run(&m, 2.0, 0.0, 0.01, 0.01).is_err());
        assert!(run(&m, 0.0, 0.0, 0.0105, 0.01).is_err());
    }

    #[test]
    fn grid_masks_outside() {
        let g = grid(&model(), "value", 11).unwrap();
        assert_eq!(g.len(), 121);
        assert!(g[0].is_nan());
        assert!((g[5 * 11 + 5] - 2.0).abs() < 0.05);
        assert!(grid(&model(), "speed", 11).is_err());
        assert!(grid(&model(), "value", 1).is_err());
        let e = grid(&model(), "evader", 11).unwrap();
        assert!(e.iter().filter(|v| v.is_finite()).all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn gain_loss_brackets_value() {
        let [v, lo, hi] = gain_loss_at(&model(), 0.3, 0.2, 0.1).unwrap();
        assert!(lo <= hi && (lo - v).abs() < 0.2 && (hi - v).abs() < 0.2);
        assert!(gain_loss_at(&model(), 0.3, 0.2, 0.0).is_err());
    }
}
