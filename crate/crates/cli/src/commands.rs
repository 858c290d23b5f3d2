use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde_json::{json, Map, Value};

use prying_core::characteristics::{
    build_field, hamiltonian, read_dataset, write_dataset, Dataset, GenConfig, NearestIndex,
};
use prying_core::closed_loop::read_trajectory;
use prying_core::closed_loop::{simulate, write_trajectory, SampleHoldConfig, Termination};
use prying_core::feedback::SelectionPolicy;
use prying_core::gain_loss::{
    field_sweep, read_field, value_eval, write_field, Evaluator, GainLossField, ValueSource,
};
use prying_core::model::{
    file_hash, holdout_metrics, load_checkpoint, save_checkpoint, split, train, CheckpointMeta,
    MlpModel, TrainConfig,
};
use prying_core::{GameParams, State};

use crate::svg::{self, Figure, Heatmap};
use crate::{
    Cli, Cmd, FieldKind, GainlossArgs, GenDataArgs, PolicyArgs, RenderArgs, SimulateArgs,
    TrainArgs, UsageError, ValueSourceArg,
};

pub const DATASET_FILE: &str = "dataset.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const GAME_TIMES_FILE: &str = "game_times.csv";

pub fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("cannot create output directory {}", cli.out.display()))?;
    let run = Run::start(cli, argv)?;
    let outputs = match &cli.cmd {
        Cmd::GenData(a) => gen_data(&cli.out, a)?,
        Cmd::Train(a) => train_cmd(&cli.out, a)?,
        Cmd::Simulate(a) => simulate_cmd(&cli.out, a)?,
        Cmd::Gainloss(a) => gainloss(&cli.out, a)?,
        Cmd::Render(a) => render(&cli.out, a)?,
    };
    run.finish(outputs)
}

/// Run manifest, written before any computation and completed afterwards.
struct Run {
    path: PathBuf,
    doc: Map<String, Value>,
    t0: Instant,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn args_json(cmd: &Cmd) -> Value {
    match cmd {
        Cmd::GenData(a) => json!(a),
        Cmd::Train(a) => json!(a),
        Cmd::Simulate(a) => json!(a),
        Cmd::Gainloss(a) => json!(a),
        Cmd::Render(a) => json!(a),
    }
}

/// One command line that reproduces the run from resolved settings.
fn recipe(cli: &Cli, args: &Value) -> String {
    let mut parts = vec![
        "prying".to_string(),
        "--out".to_string(),
        cli.out.display().to_string(),
        cli.cmd.name().to_string(),
    ];
    fn push(parts: &mut Vec<String>, obj: &Map<String, Value>) {
        for (k, v) in obj {
            let flag = format!("--{}", k.replace('_', "-"));
            match v {
                Value::Null => {}
                Value::Bool(true) => parts.push(flag),
                Value::Bool(false) => {}
                Value::Object(inner) => push(parts, inner),
                Value::String(s) => parts.push(format!("{flag}={s}")),
                Value::Number(n) => parts.push(format!("{flag}={n}")),
                Value::Array(items) => {
                    let joined: Vec<String> = items
                        .iter()
                        .map(|it| match it {
                            Value::Array(pair) => pair
                                .iter()
                                .map(|x| x.to_string())
                                .collect::<Vec<_>>()
                                .join(":"),
                            other => other.to_string(),
                        })
                        .collect();
                    parts.push(format!("{flag}={}", joined.join(",")));
                }
            }
        }
    }
    if let Value::Object(obj) = args {
        push(&mut parts, obj);
    }
    parts.join(" ")
}

impl Run {
    fn start(cli: &Cli, argv: &[String]) -> Result<Self> {
        let args = args_json(&cli.cmd);
        let mut doc = Map::new();
        doc.insert("command".into(), json!(cli.cmd.name()));
        doc.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        doc.insert("argv".into(), json!(argv));
        doc.insert("recipe".into(), json!(recipe(cli, &args)));
        doc.insert("params".into(), json!(GameParams::default()));
        doc.insert("settings".into(), args);
        doc.insert("started_unix".into(), json!(unix_now()));
        doc.insert("status".into(), json!("running"));
        let path = cli.out.join(format!("{}.manifest.json", cli.cmd.name()));
        let run = Self {
            path,
            doc,
            t0: Instant::now(),
        };
        run.write()?;
        Ok(run)
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.doc)?;
        std::fs::write(&self.path, text + "\n")
            .with_context(|| format!("cannot write {}", self.path.display()))
    }

    fn finish(mut self, outputs: Value) -> Result<()> {
        self.doc.insert("outputs".into(), outputs);
        self.doc.insert("status".into(), json!("done"));
        self.doc.insert("finished_unix".into(), json!(unix_now()));
        self.doc
            .insert("elapsed_s".into(), json!(self.t0.elapsed().as_secs_f64()));
        self.write()
    }
}

/// Configuration problems are the caller's fault.
fn usage<T>(r: prying_core::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        prying_core::Error::Config(m) => UsageError(m).into(),
        other => anyhow::Error::new(other),
    })
}

fn hash(path: &Path) -> Result<String> {
    Ok(file_hash(path)?)
}

fn gen_data(out: &Path, a: &GenDataArgs) -> Result<Value> {
    let p = GameParams::default();
    let cfg = GenConfig {
        n_angles: a.angles,
        dtau: a.dtau,
        tau_max: a.tau_max,
        n_tributaries: a.tributaries,
        stride: a.stride,
        cell: a.cell,
        envelope_tol: a.envelope_tol,
    };
    usage(cfg.validate())?;
    let field = build_field(&p, &cfg).context("characteristic generation failed")?;
    let ds = field.to_dataset(&cfg);
    let path = out.join(DATASET_FILE);
    write_dataset(&ds, &path)?;

    let h_max = field
        .paths
        .iter()
        .chain(std::iter::once(&field.axis))
        .flat_map(|c| c.points.iter())
        .map(|q| hamiltonian(q.state(), q.costate(), &p).abs())
        .fold(0.0, f64::max);
    let on_axis: Vec<f64> = ds
        .points
        .iter()
        .filter(|q| q.x == 0.0 && (-1.0..=0.0).contains(&q.y))
        .map(|q| (q.v - 2.0 * (1.0 + q.y)).abs())
        .collect();
    Ok(json!({
        "dataset": DATASET_FILE,
        "dataset_sha256": hash(&path)?,
        "rows": ds.len(),
        "paths": field.paths.len() + 1,
        "hamiltonian_max_abs": h_max,
        "axis_points": on_axis.len(),
        "axis_residual_max": on_axis.iter().copied().fold(0.0, f64::max),
    }))
}

fn dataset_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(DATASET_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_dataset(p: &Path) -> Result<(Dataset, PathBuf)> {
    let path = dataset_path(p);
    if !path.is_file() {
        return Err(UsageError(format!("dataset not found: {}", path.display())).into());
    }
    let ds = read_dataset(&path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok((ds, path))
}

fn train_cmd(out: &Path, a: &TrainArgs) -> Result<Value> {
    let cfg = TrainConfig {
        seed: a.seed,
        learning_rate: a.learning_rate,
        final_learning_rate: a.final_learning_rate,
        batch_size: a.batch_size,
        epochs: a.epochs,
        beta_s: a.beta_s,
        val_fraction: a.val_fraction,
        patience: a.patience,
        max_samples: a.max_samples,
        costate_bound: a.costate_bound,
    };
    usage(cfg.validate())?;
    let (ds, data_path) = load_dataset(&a.data)?;
    let (m, rep) = usage(train(&ds, &cfg))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(
        &m,
        &CheckpointMeta {
            seed: cfg.seed,
            train_loss: rep.final_train_loss,
            val_loss: rep.best_val_loss,
        },
        &ckpt,
    )?;
    let (_, val) = split(&ds, &cfg);
    let metrics = json!({
        "initial_mean_loss": rep.initial_train_loss,
        "final_mean_loss": rep.final_train_loss,
        "loss_ratio": rep.final_train_loss / rep.initial_train_loss,
        "report": rep,
        "holdout": holdout_metrics(&m, &val),
        "checkpoint_sha256": hash(&ckpt)?,
        "dataset_sha256": hash(&data_path)?,
    });
    let metrics_path = out.join(METRICS_FILE);
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&metrics)? + "\n",
    )
    .with_context(|| format!("cannot write {}", metrics_path.display()))?;
    Ok(json!({
        "checkpoint": CHECKPOINT_FILE,
        "checkpoint_sha256": metrics["checkpoint_sha256"],
        "metrics": METRICS_FILE,
        "dataset": data_path,
        "dataset_sha256": metrics["dataset_sha256"],
    }))
}

fn checkpoint_path(out: &Path, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE))
}

fn load_model(path: &Path) -> Result<(MlpModel, String)> {
    if !path.is_file() {
        bail!(
            "checkpoint not found: {} (run `prying train` first)",
            path.display()
        );
    }
    let (m, _) =
        load_checkpoint(path).with_context(|| format!("cannot load {}", path.display()))?;
    Ok((m, hash(path)?))
}

fn policy(a: &PolicyArgs) -> Result<SelectionPolicy> {
    usage(SelectionPolicy::new(a.mode, a.epsilon))
}

pub fn trajectory_file(k: usize) -> String {
    format!("trajectory_{k}.csv")
}

fn simulate_cmd(out: &Path, a: &SimulateArgs) -> Result<Value> {
    let p = GameParams::default();
    let pol = policy(&a.policy)?;
    let s0 = State::new(a.x0, a.y0);
    if !p.in_game_set(s0) {
        return Err(UsageError(format!(
            "start ({}, {}) lies outside the game set",
            a.x0, a.y0
        ))
        .into());
    }
    let cfgs: Vec<SampleHoldConfig> = a
        .pairs
        .0
        .iter()
        .map(|&(delta_e, delta_p)| SampleHoldConfig {
            delta_e,
            delta_p,
            dt: a.dt,
            t_max: a.t_max,
            policy: pol,
        })
        .collect();
    for c in &cfgs {
        usage(c.validate())?;
    }
    let ckpt = checkpoint_path(out, &a.checkpoint);
    let (m, ckpt_hash) = load_model(&ckpt)?;
    let mut table = String::from("delta_e,delta_p,T\n");
    let mut runs = Vec::new();
    for (k, c) in cfgs.iter().enumerate() {
        let tr = simulate(s0, &m, c, &p)?;
        let file = trajectory_file(k);
        write_trajectory(&tr, &out.join(&file))?;
        let t = match tr.termination {
            Termination::Terminated { t } => t,
            Termination::HorizonExhausted => f64::NAN,
        };
        table.push_str(&format!("{},{},{}\n", c.delta_e, c.delta_p, t));
        runs.push(json!({
            "delta_e": c.delta_e,
            "delta_p": c.delta_p,
            "game_time": tr.game_time(),
            "trajectory": file,
        }));
    }
    let table_path = out.join(GAME_TIMES_FILE);
    std::fs::write(&table_path, &table)
        .with_context(|| format!("cannot write {}", table_path.display()))?;
    Ok(json!({
        "checkpoint": ckpt,
        "checkpoint_sha256": ckpt_hash,
        "table": GAME_TIMES_FILE,
        "runs": runs,
    }))
}

pub fn field_stem(delta: f64) -> String {
    format!("gainloss_{delta}")
}

fn gainloss(out: &Path, a: &GainlossArgs) -> Result<Value> {
    let p = GameParams::default();
    let pol = policy(&a.policy)?;
    let ckpt = checkpoint_path(out, &a.checkpoint);
    let (m, ckpt_hash) = load_model(&ckpt)?;
    let index;
    let mut ev = Evaluator::new(&m, p);
    ev.policy = pol;
    let mut data_hash = Value::Null;
    if a.value_source == ValueSourceArg::Nearest {
        let dir = a
            .data
            .as_ref()
            .ok_or_else(|| UsageError("--value-source nearest needs --data".into()))?;
        let (ds, path) = load_dataset(dir)?;
        data_hash = json!(hash(&path)?);
        index = NearestIndex::new(&ds, 0.02)?;
        ev.source = ValueSource::Nearest(&index);
    }
    let fields = usage(field_sweep(&a.delta.0, a.res, &ev))?;
    let mut files = Vec::new();
    for f in &fields {
        let stem = field_stem(f.delta);
        let csv = out.join(format!("{stem}.csv"));
        write_field(f, &csv)?;
        let (mut gain, mut loss, mut n) = (0.0f64, 0.0f64, 0usize);
        for (_, lo, hi, v) in f.cells() {
            gain = gain.max(v - lo);
            loss = loss.max(hi - v);
            n += 1;
        }
        let sidecar = json!({
            "delta": f.delta,
            "res": f.res,
            "rho": f.rho,
            "cells": n,
            "value_source": a.value_source,
            "mode": a.policy.mode,
            "epsilon": a.policy.epsilon,
            "checkpoint_sha256": ckpt_hash,
            "dataset_sha256": data_hash,
            "max_evader_gain": gain,
            "max_pursuer_gain": loss,
        });
        let side = out.join(format!("{stem}.json"));
        std::fs::write(&side, serde_json::to_string_pretty(&sidecar)? + "\n")
            .with_context(|| format!("cannot write {}", side.display()))?;
        files.push(json!({ "csv": format!("{stem}.csv"), "sidecar": format!("{stem}.json"), "csv_sha256": hash(&csv)? }));
    }
    Ok(json!({ "checkpoint": ckpt, "checkpoint_sha256": ckpt_hash, "fields": files }))
}

fn trajectories(out: &Path) -> Result<Vec<Vec<State>>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(out)
        .with_context(|| format!("cannot list {}", out.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("trajectory_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(
            "no trajectory files (trajectory_*.csv) in {} (run `prying simulate` first)",
            out.display()
        );
    }
    files
        .iter()
        .map(|f| {
            Ok(read_trajectory(f)
                .with_context(|| format!("cannot read {}", f.display()))?
                .into_iter()
                .map(|(_, s, _)| s)
                .collect())
        })
        .collect()
}

fn network_heatmap(m: &MlpModel, kind: FieldKind, res: usize, p: &GameParams) -> Heatmap {
    let mut values = vec![f64::NAN; res * res];
    for j in 0..res {
        for i in 0..res {
            let s = State::new(
                GainLossField::coord(p.rho, res, i),
                GainLossField::coord(p.rho, res, j),
            );
            if s.x * s.x + s.y * s.y > p.rho * p.rho {
                continue;
            }
            values[j * res + i] = match kind {
                FieldKind::Value => value_eval(s, m, p),
                FieldKind::Evader => m.controls(s).u_e,
                _ => m.controls(s).u_p,
            };
        }
    }
    let (lo, hi) = match kind {
        FieldKind::Value => (
            0.0,
            values
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .fold(0.0, f64::max),
        ),
        FieldKind::Evader => (-1.0, 1.0),
        _ => (-std::f64::consts::PI, std::f64::consts::PI),
    };
    Heatmap {
        res,
        values,
        lo,
        hi,
    }
}

fn field_heatmap(out: &Path, delta: f64, kind: FieldKind) -> Result<Heatmap> {
    let stem = field_stem(delta);
    let side = out.join(format!("{stem}.json"));
    let csv = out.join(format!("{stem}.csv"));
    for f in [&side, &csv] {
        if !f.is_file() {
            bail!(
                "gain/loss field not found: {} (run `prying gainloss --delta {delta}` first)",
                f.display()
            );
        }
    }
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(&side)?)
        .with_context(|| format!("cannot parse {}", side.display()))?;
    let res = meta["res"].as_u64().context("sidecar lacks `res`")? as usize;
    let rho = meta["rho"].as_f64().context("sidecar lacks `rho`")?;
    let mut values = vec![f64::NAN; res * res];
    let idx = |c: f64| ((c / rho + 1.0) * (res - 1) as f64 / 2.0).round() as usize;
    for r in read_field(&csv)? {
        let v = if kind == FieldKind::Vmin {
            r.vmin
        } else {
            r.vmax
        };
        values[idx(r.state.y) * res + idx(r.state.x)] = v;
    }
    let hi = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    Ok(Heatmap {
        res,
        values,
        lo: 0.0,
        hi,
    })
}

fn render(out: &Path, a: &RenderArgs) -> Result<Value> {
    let p = GameParams::default();
    if a.res < 2 {
        return Err(UsageError("--res must be at least 2".into()).into());
    }
    let (heatmap, title, name, ckpt_hash) = match a.field {
        FieldKind::Value | FieldKind::Evader | FieldKind::Pursuer => {
            let ckpt = checkpoint_path(out, &a.checkpoint);
            let (m, h) = load_model(&ckpt)?;
            let (title, name) = match a.field {
                FieldKind::Value => ("value ψ_V", "value"),
                FieldKind::Evader => ("evader control ψ_u,1", "evader"),
                _ => ("pursuer heading ψ_u,2", "pursuer"),
            };
            (
                Some(network_heatmap(&m, a.field, a.res, &p)),
                title.to_string(),
                name.to_string(),
                json!(h),
            )
        }
        FieldKind::Vmin | FieldKind::Vmax => {
            let which = if a.field == FieldKind::Vmin {
                "vmin"
            } else {
                "vmax"
            };
            (
                Some(field_heatmap(out, a.delta, a.field)?),
                format!(
                    "{} δ = {}",
                    if which == "vmin" { "V_min" } else { "V_max" },
                    a.delta
                ),
                format!("{which}_{}", a.delta),
                Value::Null,
            )
        }
        FieldKind::Trajectories => (
            None,
            "closed-loop trajectories".into(),
            "trajectories".into(),
            Value::Null,
        ),
    };
    let overlay = if a.overlay || a.field == FieldKind::Trajectories {
        trajectories(out)?
    } else {
        Vec::new()
    };
    let fig = Figure {
        title,
        rho: p.rho,
        heatmap,
        trajectories: &overlay,
    };
    let path = a
        .output
        .clone()
        .unwrap_or_else(|| out.join(format!("{name}.svg")));
    std::fs::write(&path, svg::render(&fig))
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(json!({
        "svg": path,
        "checkpoint_sha256": ckpt_hash,
        "scale": fig.heatmap.as_ref().map(|h| [h.lo, h.hi]),
        "trajectories": overlay.len(),
    }))
}
