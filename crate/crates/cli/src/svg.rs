//! Minimal SVG output: rect-grid heatmaps, the game-set circle and
//! trajectory polylines.

use std::fmt::Write;

use prying_core::State;

const PLOT: f64 = 480.0;
const MARGIN: f64 = 20.0;
const TOP: f64 = 40.0;
const BAR_X: f64 = MARGIN + PLOT + 20.0;
const BAR_W: f64 = 16.0;
const WIDTH: f64 = BAR_X + BAR_W + 70.0;
const HEIGHT: f64 = TOP + PLOT + MARGIN;

/// Viridis sampled at five stops.
const STOPS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

pub fn colour(t: f64) -> String {
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c: Vec<u8> = (0..3)
        .map(|k| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Values on a `res × res` node grid over `[−ρ, ρ]²`, row-major with `y`
/// slowest. Non-finite entries are masked.
pub struct Heatmap {
    pub res: usize,
    pub values: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

pub struct Figure<'a> {
    pub title: String,
    pub rho: f64,
    pub heatmap: Option<Heatmap>,
    pub trajectories: &'a [Vec<State>],
}

fn px(v: f64, rho: f64) -> f64 {
    MARGIN + (v + rho) / (2.0 * rho) * PLOT
}

fn py(v: f64, rho: f64) -> f64 {
    TOP + (rho - v) / (2.0 * rho) * PLOT
}

fn label(v: f64) -> String {
    format!("{v:.3}")
}

pub fn render(fig: &Figure) -> String {
    let mut s = String::new();
    let rho = fig.rho;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="24" font-size="14">{}</text>"#,
        escape(&fig.title)
    );
    if let Some(h) = &fig.heatmap {
        let cell = PLOT / h.res as f64;
        let span = if h.hi > h.lo { h.hi - h.lo } else { 1.0 };
        let _ = writeln!(s, r#"<g shape-rendering="crispEdges">"#);
        for j in 0..h.res {
            for i in 0..h.res {
                let v = h.values[j * h.res + i];
                if !v.is_finite() {
                    continue;
                }
                let x = MARGIN + i as f64 * cell;
                let y = TOP + (h.res - 1 - j) as f64 * cell;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{w:.2}" fill="{c}"/>"#,
                    w = cell + 0.05,
                    c = colour((v - h.lo) / span)
                );
            }
        }
        let _ = writeln!(s, "</g>");
        let _ = writeln!(
            s,
            r#"<defs><linearGradient id="scale" x1="0" y1="1" x2="0" y2="0">"#
        );
        for k in 0..STOPS.len() {
            let t = k as f64 / (STOPS.len() - 1) as f64;
            let _ = writeln!(s, r#"<stop offset="{t}" stop-color="{}"/>"#, colour(t));
        }
        let _ = writeln!(s, "</linearGradient></defs>");
        let _ = writeln!(
            s,
            r#"<rect x="{BAR_X}" y="{TOP}" width="{BAR_W}" height="{PLOT}" fill="url(#scale)" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            BAR_X + BAR_W + 4.0,
            TOP + 10.0,
            label(h.hi)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            BAR_X + BAR_W + 4.0,
            TOP + PLOT,
            label(h.lo)
        );
    }
    let _ = writeln!(
        s,
        r#"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="none" stroke="black" stroke-width="1.5"/>"#,
        px(0.0, rho),
        py(0.0, rho),
        PLOT / 2.0
    );
    for tr in fig.trajectories {
        let pts: Vec<String> = tr
            .iter()
            .map(|q| format!("{:.2},{:.2}", px(q.x, rho), py(q.y, rho)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="crimson" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
