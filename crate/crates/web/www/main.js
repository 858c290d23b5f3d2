import init, { Demo } from "./pkg/prying_web.js";

const RES = 110;
const canvas = document.getElementById("plot");
const ctx = canvas.getContext("2d");
const $ = (id) => document.getElementById(id);
const N = canvas.width;

let demo;
let start = [0, 1];
let background = null;
let path = null;

// Viridis at five stops.
const STOPS = [[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]];
function colour(t) {
  t = Math.min(1, Math.max(0, t));
  const x = t * (STOPS.length - 1);
  const i = Math.min(Math.floor(x), STOPS.length - 2);
  const f = x - i;
  return STOPS[i].map((c, k) => Math.round(c + f * (STOPS[i + 1][k] - c)));
}

const toPx = (x, y) => [(x + 1) / 2 * N, (1 - y) / 2 * N];
const fromPx = (u, v) => [u / N * 2 - 1, 1 - v / N * 2];

function report(e) {
  $("status").textContent = e ? String(e.message ?? e) : "";
}

function drawField() {
  const kind = $("kind").value;
  const vals = demo.field(kind, RES);
  let lo, hi;
  if (kind === "value") {
    lo = 0;
    hi = vals.reduce((m, v) => (Number.isFinite(v) ? Math.max(m, v) : m), 0);
  } else if (kind === "evader") {
    [lo, hi] = [-1, 1];
  } else {
    [lo, hi] = [-Math.PI, Math.PI];
  }
  $("scale").textContent = `${lo.toFixed(2)} … ${hi.toFixed(2)}`;
  const img = ctx.createImageData(N, N);
  for (let py = 0; py < N; py++) {
    for (let px = 0; px < N; px++) {
      const i = Math.min(RES - 1, Math.floor(px / N * RES));
      const j = RES - 1 - Math.min(RES - 1, Math.floor(py / N * RES));
      const v = vals[j * RES + i];
      const o = 4 * (py * N + px);
      if (Number.isFinite(v)) {
        const [r, g, b] = colour((v - lo) / (hi - lo));
        img.data.set([r, g, b, 255], o);
      } else {
        img.data.set([255, 255, 255, 255], o);
      }
    }
  }
  background = img;
  redraw();
}

function redraw() {
  if (background) ctx.putImageData(background, 0, 0);
  ctx.strokeStyle = "black";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  ctx.arc(N / 2, N / 2, N / 2 - 1, 0, 2 * Math.PI);
  ctx.stroke();
  if (path) {
    ctx.strokeStyle = "crimson";
    ctx.beginPath();
    for (let k = 0; k < path.length; k += 2) {
      const [u, v] = toPx(path[k], path[k + 1]);
      k === 0 ? ctx.moveTo(u, v) : ctx.lineTo(u, v);
    }
    ctx.stroke();
  }
  const [u, v] = toPx(start[0], start[1]);
  ctx.fillStyle = "white";
  ctx.beginPath();
  ctx.arc(u, v, 4, 0, 2 * Math.PI);
  ctx.fill();
  ctx.stroke();
}

function simulate() {
  try {
    const r = demo.simulate(start[0], start[1], Number($("de").value), Number($("dp").value));
    path = r.path;
    $("time").textContent = Number.isNaN(r.game_time) ? "horizon reached" : r.game_time.toFixed(4);
    report(null);
  } catch (e) {
    path = null;
    report(e);
  }
  redraw();
}

function gainLoss() {
  try {
    const [v, lo, hi] = demo.gain_loss(start[0], start[1], Number($("delta").value));
    $("v").textContent = v.toFixed(4);
    $("vmin").textContent = `${lo.toFixed(4)} (${(lo - v).toFixed(4)})`;
    $("vmax").textContent = `${hi.toFixed(4)} (+${(hi - v).toFixed(4)})`;
    report(null);
  } catch (e) {
    report(e);
  }
}

canvas.addEventListener("click", (ev) => {
  const rect = canvas.getBoundingClientRect();
  const [x, y] = fromPx(ev.clientX - rect.left, ev.clientY - rect.top);
  if (x * x + y * y > 1) return;
  start = [Number(x.toFixed(3)), Number(y.toFixed(3))];
  $("start").textContent = `(${start[0]}, ${start[1]})`;
  path = null;
  simulate();
});
$("kind").addEventListener("change", drawField);
$("run").addEventListener("click", simulate);
$("gl").addEventListener("click", gainLoss);

await init();
demo = new Demo();
drawField();
simulate();
