//! Behaviour of the `prying` binary on a small, fast pipeline.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn prying(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prying"))
        .current_dir(cwd)
        .env_remove("PRYING_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) {
    let o = prying(cwd, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

const SMALL_DATA: [&str; 5] = ["gen-data", "--angles", "60", "--tributaries", "20"];
const SMALL_TRAIN: [&str; 7] = [
    "train",
    "--data",
    "o/dataset.csv",
    "--epochs",
    "30",
    "--max-samples",
    "500",
];

fn with_out<'a>(a: &[&'a str]) -> Vec<&'a str> {
    [&["--out", "o"], a].concat()
}

fn small_pipeline(cwd: &Path) {
    ok(cwd, &with_out(&SMALL_DATA));
    ok(cwd, &with_out(&SMALL_TRAIN));
    ok(
        cwd,
        &with_out(&["simulate", "--pairs", "0.05:0.05,0.2:0.2"]),
    );
    ok(
        cwd,
        &with_out(&["gainloss", "--delta", "0.2", "--res", "11"]),
    );
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(
        prying(d.path(), &["gen-data", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(prying(d.path(), &["frobnicate"]).status.code(), Some(2));
    let o = prying(d.path(), &["train", "--data", "nowhere.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.csv"));
}

#[test]
fn missing_artifacts_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let o = prying(d.path(), &["simulate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
    let o = prying(d.path(), &["render", "--field", "vmin"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn outside_start_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &["--out", "o", SMALL_DATA[0], SMALL_DATA[1], SMALL_DATA[2]],
    );
    ok(d.path(), &[&["--out", "o"][..], &SMALL_TRAIN].concat());
    let o = prying(
        d.path(),
        &["--out", "o", "simulate", "--x0", "0.9", "--y0", "-0.9"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn small_pipeline_writes_expected_artifacts() {
    let d = tempfile::tempdir().unwrap();
    small_pipeline(d.path());
    let o = d.path().join("o");
    let data = fs::read_to_string(o.join("dataset.csv")).unwrap();
    assert_eq!(data.lines().next(), Some("x,y,dvx,dvy,v"));
    let times = fs::read_to_string(o.join("game_times.csv")).unwrap();
    let rows: Vec<&str> = times.lines().collect();
    assert_eq!(rows[0], "delta_e,delta_p,T");
    assert_eq!(rows.len(), 3);
    for r in &rows[1..] {
        let t: f64 = r.split(',').nth(2).unwrap().parse().unwrap();
        assert!(t > 2.0 && t < 6.0, "{r}");
    }
    assert!(o.join("trajectory_1.csv").exists());
    let field = fs::read_to_string(o.join("gainloss_0.2.csv")).unwrap();
    assert_eq!(field.lines().next(), Some("x,y,vmin,vmax,v"));
    // Only nodes inside the disc are written.
    let inside = (0..11)
        .flat_map(|j| (0..11).map(move |i| (i, j)))
        .filter(|&(i, j)| {
            let c = |k: i32| (2 * k - 10) as f64 / 10.0;
            c(i).hypot(c(j)) <= 1.0
        })
        .count();
    assert_eq!(field.lines().count(), 1 + inside);
    for cmd in ["gen-data", "train", "simulate", "gainloss"] {
        let m: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(o.join(format!("{cmd}.manifest.json"))).unwrap(),
        )
        .unwrap();
        assert!(m.get("outputs").is_some(), "{cmd}: {m}");
    }
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(o.join("gainloss_0.2.json")).unwrap()).unwrap();
    assert_eq!(side["res"], 11);
    assert!(side["max_evader_gain"].as_f64().unwrap() >= 0.0);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_pipeline(a.path());
    small_pipeline(b.path());
    for f in [
        "dataset.csv",
        "checkpoint.json",
        "game_times.csv",
        "gainloss_0.2.csv",
    ] {
        let x = fs::read(a.path().join("o").join(f)).unwrap();
        let y = fs::read(b.path().join("o").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn out_dir_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_prying"))
        .current_dir(d.path())
        .env("PRYING_OUT_DIR", "from-env")
        .args(SMALL_DATA)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(d.path().join("from-env/dataset.csv").exists());
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("run.conf"),
        "# small run\nout = cfg\nangles = 60\ntributaries = 20\nepochs = 30\nmax_samples = 500\n",
    )
    .unwrap();
    ok(d.path(), &["--config", "run.conf", "gen-data"]);
    let m: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(d.path().join("cfg/gen-data.manifest.json")).unwrap(),
    )
    .unwrap();
    let text = m.to_string();
    assert!(text.contains("\"angles\":60"), "{text}");

    ok(
        d.path(),
        &[
            "--config", "run.conf", "--out", "cli", "gen-data", "--angles", "40",
        ],
    );
    let m = fs::read_to_string(d.path().join("cli/gen-data.manifest.json")).unwrap();
    assert!(
        m.contains("\"angles\": 40") || m.contains("\"angles\":40"),
        "{m}"
    );

    fs::write(d.path().join("bad.conf"), "no_such_flag = 1\n").unwrap();
    assert_eq!(
        prying(d.path(), &["--config", "bad.conf", "gen-data"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn render_value_uses_zero_based_scale() {
    let d = tempfile::tempdir().unwrap();
    small_pipeline(d.path());
    ok(
        d.path(),
        &["--out", "o", "render", "--field", "value", "--res", "21"],
    );
    let svg = fs::read_to_string(d.path().join("o/value.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains(">0.000</text>"));
    ok(
        d.path(),
        &["--out", "o", "render", "--field", "evader", "--res", "21"],
    );
    let svg = fs::read_to_string(d.path().join("o/evader.svg")).unwrap();
    assert!(svg.contains(">-1.000</text>") && svg.contains(">1.000</text>"));
    ok(
        d.path(),
        &["--out", "o", "render", "--field", "vmin", "--delta", "0.2"],
    );
    ok(
        d.path(),
        &[
            "--out",
            "o",
            "render",
            "--field",
            "trajectories",
            "--res",
            "21",
            "--overlay",
        ],
    );
    let svg = fs::read_to_string(d.path().join("o/trajectories.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
}
