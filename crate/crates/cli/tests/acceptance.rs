//! Acceptance checks. Runs the default pipeline twice through the binary,
//! then verifies each criterion against the artifacts and the library.
//! Prints one PASS/FAIL line per criterion and exits non-zero on any FAIL.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prying_core::characteristics::{build_field, hamiltonian, read_dataset, Costate, GenConfig};
use prying_core::closed_loop::{simulate, SampleHoldConfig};
use prying_core::feedback::{evader_feedback, pursuer_feedback, select_controls};
use prying_core::gain_loss::{read_field, EvaderSet, Evaluator};
use prying_core::game::wrap_angle;
use prying_core::model::{load_checkpoint, loss, loss_terms, LossMode, MlpModel};
use prying_core::{Controls, GameParams, State};

const TABLE_TARGET: [f64; 4] = [3.4435, 3.4410, 3.2275, 3.3090];
const DELTAS: [f64; 3] = [0.05, 0.1, 0.2];

struct Stage {
    name: &'static str,
    secs: f64,
}

fn prying(out: &Path, args: &[&str]) -> f64 {
    let t0 = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_prying"))
        .arg("--out")
        .arg(out)
        .args(args)
        .status()
        .expect("binary runs");
    assert!(status.success(), "prying {args:?} failed: {status}");
    t0.elapsed().as_secs_f64()
}

fn pipeline(out: &Path) -> Vec<Stage> {
    let data = out.display().to_string();
    vec![
        Stage {
            name: "gen-data",
            secs: prying(out, &["gen-data"]),
        },
        Stage {
            name: "train",
            secs: prying(out, &["train", "--data", &data, "--seed", "7"]),
        },
        Stage {
            name: "simulate",
            secs: prying(
                out,
                &[
                    "simulate",
                    "--x0",
                    "0",
                    "--y0",
                    "1",
                    "--pairs",
                    "0.01:0.01,0.2:0.01,0.01:0.2,0.2:0.2",
                ],
            ),
        },
        Stage {
            name: "gainloss",
            secs: prying(
                out,
                &["gainloss", "--delta", "0.05,0.1,0.2", "--res", "101"],
            ),
        },
    ]
}

struct Outcome {
    n: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn kappa(r: &[f64]) -> f64 {
    r.iter().map(|x| 10.0 * x.abs() + x * x).sum()
}

fn sign0(v: f64) -> f64 {
    if v.abs() <= 1e-12 {
        0.0
    } else {
        v.signum()
    }
}

fn criterion_1(out: &Path, secs: f64) -> Outcome {
    let text = std::fs::read_to_string(out.join("game_times.csv")).unwrap();
    let t: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let bands = t.len() == 4
        && t.iter()
            .zip(TABLE_TARGET)
            .all(|(a, b)| (a - b).abs() <= 0.15);
    let order = t.len() == 4 && t[2].max(t[3]) + 0.05 <= t[0].min(t[1]);
    Outcome {
        n: 1,
        name: "game-time table",
        pass: bands && order && secs <= 60.0,
        detail: format!(
            "T = {:?} vs {TABLE_TARGET:?} (±0.15); δp=0.2 below δp=0.01 by ≥0.05: {order}; {secs:.2}s",
            t.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    }
}

fn criterion_2(out: &Path, m: &MlpModel, p: &GameParams) -> Outcome {
    let ds = read_dataset(&out.join("dataset.csv")).unwrap();
    let axis: Vec<f64> = ds
        .points
        .iter()
        .filter(|q| q.x == 0.0 && (-1.0..=0.0).contains(&q.y))
        .map(|q| (q.v - 2.0 * (1.0 + q.y)).abs())
        .collect();
    let data_err = axis.iter().copied().fold(0.0, f64::max);
    let net_err = (0..=100)
        .map(|i| {
            let y = -1.0 + i as f64 / 100.0;
            (m.value(State::new(0.0, y)) - 2.0 * (1.0 + y)).abs()
        })
        .fold(0.0, f64::max);
    let cfg = SampleHoldConfig {
        delta_e: 1e-3,
        delta_p: 1e-3,
        dt: 1e-3,
        ..SampleHoldConfig::default()
    };
    let t = simulate(State::new(0.0, -0.5), m, &cfg, p)
        .unwrap()
        .game_time();
    let t_ok = t.is_some_and(|t| (t - 1.0).abs() <= 0.02);
    Outcome {
        n: 2,
        name: "axis oracle",
        pass: axis.len() > 10 && data_err <= 1e-3 && net_err <= 0.05 && t_ok,
        detail: format!(
            "data max err {data_err:.2e} over {} pts; network max err {net_err:.4}; T(0,-0.5) = {t:?}",
            axis.len()
        ),
    }
}

fn criteria_3_4(p: &GameParams) -> (Outcome, Outcome) {
    let cfg = GenConfig::default();
    let field = build_field(p, &cfg).unwrap();
    let h_max = field
        .paths
        .iter()
        .chain(std::iter::once(&field.axis))
        .flat_map(|c| c.points.iter())
        .map(|q| hamiltonian(q.state(), q.costate(), p).abs())
        .fold(0.0, f64::max);
    let n_points: usize =
        field.paths.iter().map(|c| c.points.len()).sum::<usize>() + field.axis.points.len();
    let c3 = Outcome {
        n: 3,
        name: "Hamiltonian stationarity",
        pass: h_max <= 1e-5,
        detail: format!("max |λᵀf+1| = {h_max:.2e} over {n_points} points"),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut worst, mut missing, mut n) = (0.0f64, 0usize, 0usize);
    while n < 200 {
        let i = rng.gen_range(0..field.paths.len() + 1);
        let (path, ch) = if i == field.paths.len() {
            (None, &field.axis)
        } else {
            (Some(i), &field.paths[i])
        };
        let k = rng.gen_range(0..ch.points.len());
        match field.replay(path, k, 0.05).exit_time {
            Some(t) => worst = worst.max((t - ch.points[k].v).abs()),
            None => missing += 1,
        }
        n += 1;
    }
    let c4 = Outcome {
        n: 4,
        name: "forward replay",
        pass: missing == 0 && worst <= 5e-3,
        detail: format!("{n} random points, max |T_exit − V| = {worst:.2e}, no exit: {missing}"),
    };
    (c3, c4)
}

fn criterion_5(trained: &MlpModel) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut models = vec![trained.clone()];
    models.extend((0..9).map(|_| MlpModel::init(&mut rng)));
    let h = 1e-5;
    let (mut worst, mut n, mut skipped) = (0.0f64, 0usize, 0usize);
    while n < 1000 {
        let m = &models[n % models.len()];
        let s = State::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if m.min_preactivation(s) < 1e-3 {
            skipped += 1;
            continue;
        }
        let g = m.input_gradient(s);
        let fx =
            (m.value(State::new(s.x + h, s.y)) - m.value(State::new(s.x - h, s.y))) / (2.0 * h);
        let fy =
            (m.value(State::new(s.x, s.y + h)) - m.value(State::new(s.x, s.y - h))) / (2.0 * h);
        let num = ((g[0] - fx).powi(2) + (g[1] - fy).powi(2)).sqrt();
        let den = (fx * fx + fy * fy).sqrt().max(1e-8);
        worst = worst.max(num / den);
        n += 1;
    }
    Outcome {
        n: 5,
        name: "gradient check",
        pass: worst <= 1e-4,
        detail: format!(
            "max relative error {worst:.2e} over {n} pairs ({skipped} near-kink draws skipped)"
        ),
    }
}

fn criterion_6(out: &Path, m: &MlpModel) -> Outcome {
    let ds = read_dataset(&out.join("dataset.csv")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut loss_err = 0.0f64;
    for _ in 0..1000 {
        let q = ds.points[rng.gen_range(0..ds.len())];
        let s = q.state();
        let o = m.forward(s);
        let g = m.input_gradient(s);
        let sw_l = q.lx * s.y - q.ly * s.x;
        let sw_d = o.dv[0] * s.y - o.dv[1] * s.x;
        let terms = [
            kappa(&[o.v - q.v]),
            kappa(&[o.dv[0] - q.lx, o.dv[1] - q.ly]),
            kappa(&[o.u[0] - sign0(sw_l), wrap_angle(o.u[1] - q.lx.atan2(q.ly))]),
            kappa(&[g[0] - o.dv[0], g[1] - o.dv[1]]),
            kappa(&[
                o.u[0] - sign0(sw_d),
                wrap_angle(o.u[1] - o.dv[0].atan2(o.dv[1])),
            ]),
        ];
        let lib = loss_terms(m, &q, LossMode::Eval);
        for k in 0..5 {
            loss_err = loss_err.max((terms[k] - lib[k]).abs());
        }
        loss_err = loss_err.max((terms.iter().sum::<f64>() - loss(m, &q, LossMode::Eval)).abs());
    }

    let mut law_gap = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let l = Costate::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let s = State::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        // Evader minimises the u_e part of λᵀf, pursuer maximises the u_p part.
        let ev = |u: f64| (l.ly * s.x - l.lx * s.y) * u;
        let pu = |u: f64| l.lx * u.sin() + l.ly * u.cos();
        let ue = evader_feedback(l, s).u_e;
        let up = pursuer_feedback(l).unwrap();
        let grid_e = (0..=200)
            .map(|i| ev(-1.0 + 0.01 * i as f64))
            .fold(f64::INFINITY, f64::min);
        let grid_p = (0..3600)
            .map(|i| pu(-PI + 2.0 * PI * (i + 1) as f64 / 3600.0))
            .fold(f64::NEG_INFINITY, f64::max);
        law_gap = law_gap.max(ev(ue) - grid_e).max(grid_p - pu(up));
    }
    Outcome {
        n: 6,
        name: "loss and feedback oracles",
        pass: loss_err <= 1e-12 && law_gap <= 1e-12,
        detail: format!(
            "loss recomputation max err {loss_err:.2e} (1000 pts); laws minus grid optimum ≤ {law_gap:.2e} (1000 gradients)"
        ),
    }
}

fn criterion_7(out: &Path, m: &MlpModel, p: &GameParams) -> Outcome {
    let ev = Evaluator::new(m, *p);
    let mut notes = Vec::new();
    let mut pass = true;

    let at = |delta: f64, x: f64, y: f64| {
        read_field(&out.join(format!("gainloss_{delta}.csv")))
            .unwrap()
            .into_iter()
            .find(|r| (r.state.x - x).abs() < 1e-12 && (r.state.y - y).abs() < 1e-12)
            .expect("grid node present")
    };
    let r = at(0.2, 0.0, 0.9);
    let ok = r.vmin <= r.v - 0.05 && r.vmax >= r.v + 0.05;
    pass &= ok;
    notes.push(format!(
        "(0,0.9) δ=0.2: V={:.4} Vmin={:.4} Vmax={:.4}",
        r.v, r.vmin, r.vmax
    ));
    let r = at(0.05, 0.5, -0.5);
    let ok = (r.vmin - r.v).abs() <= 0.05 && (r.vmax - r.v).abs() <= 0.05;
    pass &= ok;
    notes.push(format!(
        "(0.5,-0.5) δ=0.05: V={:.4} Vmin={:.4} Vmax={:.4}",
        r.v, r.vmin, r.vmax
    ));

    let mut violations = 0usize;
    let mut cells = 0usize;
    for delta in DELTAS {
        for r in read_field(&out.join(format!("gainloss_{delta}.csv"))).unwrap() {
            let w = ev.paired_value(r.state, delta);
            if !(r.vmin <= w && w <= r.vmax + 1e-9) {
                violations += 1;
            }
            cells += 1;
        }
    }
    pass &= violations == 0 && cells > 3 * 7000;
    notes.push(format!("sandwich violations {violations}/{cells}"));

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for delta in DELTAS {
        let mut n = 0;
        while n < 100 {
            let r = rng.gen_range(0.0..1.0f64).sqrt();
            let a = rng.gen_range(-PI..PI);
            let s = State::new(r * a.sin(), r * a.cos());
            let sel = select_controls(s, m, &ev.policy);
            let EvaderSet::Points(us) = ev.evader_set(s, &sel.candidates) else {
                continue;
            };
            let w = ev.hold_value(s, sel.controls, delta);
            let mut lo = w;
            for c in &sel.candidates {
                for i in 0..=2000 {
                    let u = -1.0 + i as f64 / 1000.0;
                    lo = lo.min(ev.hold_value(s, Controls::new(u, c.u_p), delta));
                }
            }
            let mut hi = w;
            for &u_e in &us {
                for i in 0..3600 {
                    let u = -PI + 2.0 * PI * (i + 1) as f64 / 3600.0;
                    hi = hi.max(ev.hold_value(s, Controls::new(u_e, u), delta));
                }
            }
            worst = worst
                .max((ev.v_min_delta(s, delta) - lo).abs())
                .max((ev.v_max_delta(s, delta) - hi).abs());
            n += 1;
        }
    }
    pass &= worst <= 1e-3;
    notes.push(format!(
        "optimizer vs exhaustive grid max diff {worst:.2e} (300 pts)"
    ));
    Outcome {
        n: 7,
        name: "gain/loss structure",
        pass,
        detail: notes.join("; "),
    }
}

fn primary_outputs() -> Vec<String> {
    let mut names: Vec<String> = vec![
        "dataset.csv".into(),
        "checkpoint.json".into(),
        "metrics.json".into(),
        "game_times.csv".into(),
    ];
    for k in 0..4 {
        names.push(format!("trajectory_{k}.csv"));
    }
    for d in DELTAS {
        names.push(format!("gainloss_{d}.csv"));
        names.push(format!("gainloss_{d}.json"));
    }
    names
}

fn criterion_8(a: &Path, b: &Path) -> Outcome {
    let names = primary_outputs();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| {
            let fa = std::fs::read(a.join(n));
            let fb = std::fs::read(b.join(n));
            !matches!((fa, fb), (Ok(x), Ok(y)) if x == y)
        })
        .collect();
    Outcome {
        n: 8,
        name: "determinism",
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!(
                "{} primary outputs byte-identical across two runs",
                names.len()
            )
        } else {
            format!("differing or missing: {differing:?}")
        },
    }
}

fn criterion_9(stages: &[Stage]) -> Outcome {
    let total: f64 = stages.iter().map(|s| s.secs).sum();
    let parts: Vec<String> = stages
        .iter()
        .map(|s| format!("{} {:.1}s", s.name, s.secs))
        .collect();
    Outcome {
        n: 9,
        name: "end-to-end runtime",
        pass: total < 900.0,
        detail: format!("{total:.1}s total ({})", parts.join(", ")),
    }
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let run_a: PathBuf = root.path().join("a");
    let run_b: PathBuf = root.path().join("b");
    let stages = pipeline(&run_a);
    pipeline(&run_b);

    let p = GameParams::default();
    let (m, _) = load_checkpoint(&run_a.join("checkpoint.json")).expect("checkpoint");
    let simulate_secs = stages
        .iter()
        .find(|s| s.name == "simulate")
        .map_or(f64::INFINITY, |s| s.secs);

    let (c3, c4) = criteria_3_4(&p);
    let results = vec![
        criterion_1(&run_a, simulate_secs),
        criterion_2(&run_a, &m, &p),
        c3,
        c4,
        criterion_5(&m),
        criterion_6(&run_a, &m),
        criterion_7(&run_a, &m, &p),
        criterion_8(&run_a, &run_b),
        criterion_9(&stages),
    ];
    let mut failed = 0;
    for r in &results {
        let tag = if r.pass { "PASS" } else { "FAIL" };
        println!("criterion {} {tag} {}: {}", r.n, r.name, r.detail);
        if !r.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
