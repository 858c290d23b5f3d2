//! `prying`: data generation, training, closed-loop simulation, gain/loss
//! fields and SVG rendering for the prying-pedestrian game.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use prying_core::feedback::SelectionMode;

/// Default output directory when neither `--out` nor the environment sets one.
pub const DEFAULT_OUT: &str = "prying-out";

#[derive(Debug, Parser)]
#[command(name = "prying", version, about, args_override_self = true)]
pub struct Cli {
    /// Flat `key = value` file. Keys are long flag names; flags given on the
    /// command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "PRYING_OUT_DIR", default_value = DEFAULT_OUT)]
    pub out: PathBuf,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate the characteristic dataset.
    GenData(GenDataArgs),
    /// Train the network on a dataset.
    Train(TrainArgs),
    /// Sample-and-hold game times and trajectories.
    Simulate(SimulateArgs),
    /// Gain/loss value fields.
    Gainloss(GainlossArgs),
    /// SVG heatmaps and trajectory overlays.
    Render(RenderArgs),
}

impl Cmd {
    pub fn name(&self) -> &'static str {
        match self {
            Cmd::GenData(_) => "gen-data",
            Cmd::Train(_) => "train",
            Cmd::Simulate(_) => "simulate",
            Cmd::Gainloss(_) => "gainloss",
            Cmd::Render(_) => "render",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    /// Terminal angles on the usable part.
    #[arg(long, default_value_t = 720)]
    pub angles: usize,
    /// Retrograde step.
    #[arg(long, default_value_t = 1e-3)]
    pub dtau: f64,
    /// Retrograde horizon.
    #[arg(long, default_value_t = 6.0)]
    pub tau_max: f64,
    /// Tributaries per axis segment.
    #[arg(long, default_value_t = 200)]
    pub tributaries: usize,
    /// Keep every n-th step in the file.
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    /// Envelope cell size.
    #[arg(long, default_value_t = 0.02)]
    pub cell: f64,
    /// Envelope tolerance.
    #[arg(long, default_value_t = 0.05)]
    pub envelope_tol: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset file, or a directory holding `dataset.csv`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub final_learning_rate: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Training samples drawn from the dataset (0 keeps all).
    #[arg(long, default_value_t = 20_000)]
    pub max_samples: usize,
    #[arg(long, default_value_t = 200)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Drop samples with a larger costate norm (0 keeps all).
    #[arg(long, default_value_t = 10.0)]
    pub costate_bound: f64,
    /// Soft-sign sharpness in training.
    #[arg(long, default_value_t = 10.0)]
    pub beta_s: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PolicyArgs {
    /// Control selection near the axis.
    #[arg(long, default_value = "network-direct", value_parser = parse_mode)]
    pub mode: SelectionMode,
    /// Half-width of the axis band.
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
}

fn parse_mode(s: &str) -> Result<SelectionMode, String> {
    s.parse().map_err(|e: prying_core::Error| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Checkpoint file [default: <out>/checkpoint.json].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub x0: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub y0: f64,
    /// Comma-separated `delta_e:delta_p` pairs.
    #[arg(long, default_value = "0.01:0.01,0.2:0.01,0.01:0.2,0.2:0.2", value_parser = parse_pairs)]
    pub pairs: PairList,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long, default_value_t = 10.0)]
    pub t_max: f64,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueSourceArg {
    Network,
    Nearest,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GainlossArgs {
    /// Checkpoint file [default: <out>/checkpoint.json].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated hold durations.
    #[arg(long, default_value = "0.05,0.1,0.2", value_parser = parse_list)]
    pub delta: FloatList,
    /// Grid nodes per axis.
    #[arg(long, default_value_t = 101)]
    pub res: usize,
    /// Where `V` comes from inside the game set.
    #[arg(long, value_enum, default_value_t = ValueSourceArg::Network)]
    pub value_source: ValueSourceArg,
    /// Dataset for `--value-source nearest`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    /// ψ_V.
    Value,
    /// ψ_u,1.
    Evader,
    /// ψ_u,2.
    Pursuer,
    /// V_min from a gain/loss file.
    Vmin,
    /// V_max from a gain/loss file.
    Vmax,
    /// Trajectories on the game-set circle only.
    Trajectories,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RenderArgs {
    #[arg(long, value_enum, default_value_t = FieldKind::Value)]
    pub field: FieldKind,
    /// Checkpoint file [default: <out>/checkpoint.json].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Grid nodes per axis for network fields.
    #[arg(long, default_value_t = 101)]
    pub res: usize,
    /// Hold duration of the gain/loss file to draw.
    #[arg(long, default_value_t = 0.2)]
    pub delta: f64,
    /// Draw the trajectories written by `simulate` on top.
    #[arg(long)]
    pub overlay: bool,
    /// SVG path [default: <out>/<field>.svg].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Comma-separated floats.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct FloatList(pub Vec<f64>);

fn parse_list(s: &str) -> Result<FloatList, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()
        .map(FloatList)
}

/// Comma-separated `a:b` pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PairList(pub Vec<(f64, f64)>);

fn parse_pairs(s: &str) -> Result<PairList, String> {
    s.split(',')
        .map(|t| {
            let (a, b) = t
                .trim()
                .split_once(':')
                .ok_or_else(|| format!("`{t}` is not of the form delta_e:delta_p"))?;
            let a = a.parse::<f64>().map_err(|e| format!("`{a}`: {e}"))?;
            let b = b.parse::<f64>().map_err(|e| format!("`{b}`: {e}"))?;
            Ok((a, b))
        })
        .collect::<Result<_, _>>()
        .map(PairList)
}

/// A problem with the invocation rather than the computation.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match config::parse_with_config(&argv) {
        Ok(cli) => cli,
        Err(config::ParseError::Clap(e)) => e.exit(),
        Err(config::ParseError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
