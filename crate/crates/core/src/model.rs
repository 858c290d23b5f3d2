//! Multilayer perceptron approximating `(V, ∇V, u_e*, u_p*)`.
//!
//! Trunk `2 → 10 → 25 → 10` with ReLU, then three affine heads: ψ_V (1),
//! ψ_dV (2) and ψ_u (2). The first ψ_u component is clamped onto [−1, 1]; the
//! second is wrapped onto (−π, π] at inference. All parameters live in one
//! flat vector so the optimizer can treat them uniformly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::characteristics::{CharacteristicPoint, Costate, Dataset};
use crate::error::{Error, FormatError, Result};
use crate::feedback::{evader_feedback, SINGULAR_TOL};
use crate::game::{wrap_angle, Controls, State};

const H1: usize = 10;
const H2: usize = 25;
const H3: usize = 10;

const W1: usize = 0;
const B1: usize = W1 + H1 * 2;
const W2: usize = B1 + H1;
const B2: usize = W2 + H2 * H1;
const W3: usize = B2 + H2;
const B3: usize = W3 + H3 * H2;
const WV: usize = B3 + H3;
const BV: usize = WV + H3;
const WD: usize = BV + 1;
const BD: usize = WD + 2 * H3;
const WU: usize = BD + 2;
const BU: usize = WU + 2 * H3;

/// Total number of weights and biases.
pub const N_PARAMS: usize = BU + 2;

pub const CHECKPOINT_VERSION: u64 = 1;

/// Head outputs at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOutput {
    pub v: f64,
    pub dv: [f64; 2],
    /// `(clamped ψ_u,1, wrapped ψ_u,2)`.
    pub u: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    params: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
struct Pass {
    a0: [f64; 2],
    a1: [f64; H1],
    a2: [f64; H2],
    a3: [f64; H3],
    m1: [f64; H1],
    m2: [f64; H2],
    m3: [f64; H3],
    v: f64,
    d: [f64; 2],
    /// ψ_u before squashing and wrapping.
    u: [f64; 2],
    /// Masked back-products for the input gradient.
    c1: [f64; H1],
    c2: [f64; H2],
    c3: [f64; H3],
    g: [f64; 2],
}

fn layer<const I: usize, const O: usize>(w: &[f64], b: &[f64], x: &[f64; I]) -> [f64; O] {
    let mut out = [0.0; O];
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &w[o * I..(o + 1) * I];
        let mut acc = b[o];
        for i in 0..I {
            acc += row[i] * x[i];
        }
        *slot = acc;
    }
    out
}

fn relu<const N: usize>(z: [f64; N]) -> ([f64; N], [f64; N]) {
    let mut a = [0.0; N];
    let mut m = [0.0; N];
    for i in 0..N {
        if z[i] > 0.0 {
            a[i] = z[i];
            m[i] = 1.0;
        }
    }
    (a, m)
}

/// `wᵀ y` for a row-major `O × I` matrix.
fn back<const I: usize, const O: usize>(w: &[f64], y: &[f64; O]) -> [f64; I] {
    let mut out = [0.0; I];
    for o in 0..O {
        let row = &w[o * I..(o + 1) * I];
        for i in 0..I {
            out[i] += row[i] * y[o];
        }
    }
    out
}

impl MlpModel {
    pub fn zeros() -> Self {
        Self {
            params: vec![0.0; N_PARAMS],
        }
    }

    /// He-uniform trunk, Glorot-uniform heads, first-layer biases uniform on
    /// (−1, 1), other biases zero.
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        let mut params = vec![0.0; N_PARAMS];
        let mut fill = |off: usize, n: usize, bound: f64| {
            for w in &mut params[off..off + n] {
                *w = rng.gen_range(-bound..bound);
            }
        };
        fill(W1, H1 * 2, (6.0f64 / 2.0).sqrt());
        // Spread the first-layer kinks over the disc instead of through the
        // origin.
        fill(B1, H1, 1.0);
        fill(W2, H2 * H1, (6.0 / H1 as f64).sqrt());
        fill(W3, H3 * H2, (6.0 / H2 as f64).sqrt());
        fill(WV, H3, (6.0 / (H3 + 1) as f64).sqrt());
        fill(WD, 2 * H3, (6.0 / (H3 + 2) as f64).sqrt());
        fill(WU, 2 * H3, (6.0 / (H3 + 2) as f64).sqrt());
        Self { params }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != N_PARAMS {
            return Err(FormatError::Shape(format!(
                "{} parameters, expected {N_PARAMS}",
                params.len()
            ))
            .into());
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn pass(&self, s: State) -> Pass {
        let p = &self.params;
        let a0 = [s.x, s.y];
        let (a1, m1) = relu(layer::<2, H1>(&p[W1..B1], &p[B1..W2], &a0));
        let (a2, m2) = relu(layer::<H1, H2>(&p[W2..B2], &p[B2..W3], &a1));
        let (a3, m3) = relu(layer::<H2, H3>(&p[W3..B3], &p[B3..WV], &a2));
        let [v] = layer::<H3, 1>(&p[WV..BV], &p[BV..WD], &a3);
        let d = layer::<H3, 2>(&p[WD..BD], &p[BD..WU], &a3);
        let u = layer::<H3, 2>(&p[WU..BU], &p[BU..N_PARAMS], &a3);

        let mut c3 = [0.0; H3];
        for l in 0..H3 {
            c3[l] = m3[l] * p[WV + l];
        }
        let mut c2 = back::<H2, H3>(&p[W3..B3], &c3);
        for k in 0..H2 {
            c2[k] *= m2[k];
        }
        let mut c1 = back::<H1, H2>(&p[W2..B2], &c2);
        for i in 0..H1 {
            c1[i] *= m1[i];
        }
        let g = back::<2, H1>(&p[W1..B1], &c1);
        Pass {
            a0,
            a1,
            a2,
            a3,
            m1,
            m2,
            m3,
            v,
            d,
            u,
            c1,
            c2,
            c3,
            g,
        }
    }

    pub fn forward(&self, s: State) -> ModelOutput {
        let r = self.pass(s);
        ModelOutput {
            v: r.v,
            dv: r.d,
            u: [squash(r.u[0]), wrap_angle(r.u[1])],
        }
    }

    pub fn value(&self, s: State) -> f64 {
        self.pass(s).v
    }

    /// Feedback pair from the ψ_u heads.
    pub fn controls(&self, s: State) -> Controls {
        let o = self.forward(s);
        Controls::new(o.u[0], o.u[1])
    }

    /// Exact `∇ψ_V`, using subgradient 0 at ReLU kinks.
    pub fn input_gradient(&self, s: State) -> [f64; 2] {
        self.pass(s).g
    }

    /// Smallest |pre-activation| over the trunk at `s`, for kink proximity.
    pub fn min_preactivation(&self, s: State) -> f64 {
        let p = &self.params;
        let a0 = [s.x, s.y];
        let z1 = layer::<2, H1>(&p[W1..B1], &p[B1..W2], &a0);
        let (a1, _) = relu(z1);
        let z2 = layer::<H1, H2>(&p[W2..B2], &p[B2..W3], &a1);
        let (a2, _) = relu(z2);
        let z3 = layer::<H2, H3>(&p[W3..B3], &p[B3..WV], &a2);
        z1.iter()
            .chain(z2.iter())
            .chain(z3.iter())
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }

    /// ReLU on/off pattern of the trunk at `s`, one bit per unit.
    pub fn activation_pattern(&self, s: State) -> u64 {
        let r = self.pass(s);
        r.m1.iter()
            .chain(r.m2.iter())
            .chain(r.m3.iter())
            .enumerate()
            .fold(
                0u64,
                |acc, (i, &m)| if m > 0.0 { acc | (1 << i) } else { acc },
            )
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.params {
            h.update(w.to_le_bytes());
        }
        hex_digest(&h.finalize())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Saturating odd map of the raw ψ_u,1 onto [−1, 1]. It reaches the
/// bang-bang values exactly, unlike `tanh`.
#[inline]
pub fn squash(z: f64) -> f64 {
    z.clamp(-1.0, 1.0)
}

/// `κ₁₀(v) = 10·|v|₁ + |v|₂²`.
pub fn kappa10(v: &[f64]) -> f64 {
    v.iter().map(|r| 10.0 * r.abs() + r * r).sum()
}

/// Subgradient of κ₁₀ for one residual component.
#[inline]
fn dkappa(r: f64) -> f64 {
    let s = if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    };
    10.0 * s + 2.0 * r
}

/// How the sign inside the consistency term is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    /// `sign` replaced by `tanh(β_s ·)`.
    Train {
        beta_s: f64,
    },
    Eval,
}

/// Floor on `|ψ_dV|₂²` inside the atan2 derivative.
const ATAN2_FLOOR: f64 = 1e-4;

/// Target evader control from a costate; singular points get 0.
fn ue_label(l: Costate, s: State) -> f64 {
    evader_feedback(l, s).u_e
}

fn soft_sign(v: f64, mode: LossMode) -> (f64, f64) {
    match mode {
        LossMode::Train { beta_s } => {
            let t = (beta_s * v).tanh();
            (t, beta_s * (1.0 - t * t))
        }
        LossMode::Eval => {
            let s = if v.abs() <= SINGULAR_TOL {
                0.0
            } else {
                v.signum()
            };
            (s, 0.0)
        }
    }
}

/// Residuals of the five loss terms, in order:
/// value, gradient head, control head, input-gradient consistency and
/// control consistency.
struct Residuals {
    r1: f64,
    r2: [f64; 2],
    r3: [f64; 2],
    r4: [f64; 2],
    r5: [f64; 2],
    /// `d squash(ψ_u,1)/dψ_u,1`.
    du1: f64,
    /// `dσ/d(switch)` for the soft sign.
    dsig: f64,
}

fn residuals(r: &Pass, q: &CharacteristicPoint, mode: LossMode) -> Residuals {
    let s = q.state();
    let l = q.costate();
    let u1 = squash(r.u[0]);
    let up_label = l.lx.atan2(l.ly);
    let sw = r.d[0] * s.y - r.d[1] * s.x;
    let (sig, dsig) = soft_sign(sw, mode);
    Residuals {
        r1: r.v - q.v,
        r2: [r.d[0] - l.lx, r.d[1] - l.ly],
        r3: [u1 - ue_label(l, s), wrap_angle(r.u[1] - up_label)],
        r4: [r.g[0] - r.d[0], r.g[1] - r.d[1]],
        r5: [u1 - sig, wrap_angle(r.u[1] - r.d[0].atan2(r.d[1]))],
        du1: if r.u[0].abs() < 1.0 { 1.0 } else { 0.0 },
        dsig,
    }
}

/// The five κ₁₀ terms of the loss at one sample.
pub fn loss_terms(m: &MlpModel, q: &CharacteristicPoint, mode: LossMode) -> [f64; 5] {
    let r = residuals(&m.pass(q.state()), q, mode);
    [
        kappa10(&[r.r1]),
        kappa10(&r.r2),
        kappa10(&r.r3),
        kappa10(&r.r4),
        kappa10(&r.r5),
    ]
}

pub fn loss(m: &MlpModel, q: &CharacteristicPoint, mode: LossMode) -> f64 {
    loss_terms(m, q, mode).iter().sum()
}

pub fn mean_loss(m: &MlpModel, pts: &[CharacteristicPoint], mode: LossMode) -> f64 {
    if pts.is_empty() {
        return 0.0;
    }
    pts.iter().map(|q| loss(m, q, mode)).sum::<f64>() / pts.len() as f64
}

impl MlpModel {
    /// Adds `scale · ∂loss/∂params` into `grad` and returns the loss. The
    /// input-gradient term is differentiated with ReLU masks held fixed.
    pub fn accumulate_gradient(
        &self,
        q: &CharacteristicPoint,
        mode: LossMode,
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let p = &self.params;
        let r = self.pass(q.state());
        let res = residuals(&r, q, mode);
        let value = kappa10(&[res.r1])
            + kappa10(&res.r2)
            + kappa10(&res.r3)
            + kappa10(&res.r4)
            + kappa10(&res.r5);

        // Sensitivities with respect to the head outputs.
        let g_v = dkappa(res.r1);
        let mut g_d = [dkappa(res.r2[0]), dkappa(res.r2[1])];
        let e = [dkappa(res.r4[0]), dkappa(res.r4[1])];
        g_d[0] -= e[0];
        g_d[1] -= e[1];
        let k5 = [dkappa(res.r5[0]), dkappa(res.r5[1])];
        let mut g_u = [
            (dkappa(res.r3[0]) + k5[0]) * res.du1,
            dkappa(res.r3[1]) + k5[1],
        ];
        let (x, y) = (r.a0[0], r.a0[1]);
        // r5[0] = squash(u1) − σ(d0·y − d1·x)
        g_d[0] -= k5[0] * res.dsig * y;
        g_d[1] += k5[0] * res.dsig * x;
        // r5[1] = u2 − atan2(d0, d1)
        let n2 = (r.d[0] * r.d[0] + r.d[1] * r.d[1]).max(ATAN2_FLOOR);
        g_d[0] -= k5[1] * r.d[1] / n2;
        g_d[1] += k5[1] * r.d[0] / n2;

        for slot in g_u.iter_mut().chain(g_d.iter_mut()) {
            *slot *= scale;
        }
        let g_v = g_v * scale;
        let e = [e[0] * scale, e[1] * scale];

        // Heads.
        let mut da3 = [0.0; H3];
        for l in 0..H3 {
            grad[WV + l] += g_v * r.a3[l];
            da3[l] += p[WV + l] * g_v;
            for o in 0..2 {
                grad[WD + o * H3 + l] += g_d[o] * r.a3[l];
                grad[WU + o * H3 + l] += g_u[o] * r.a3[l];
                da3[l] += p[WD + o * H3 + l] * g_d[o] + p[WU + o * H3 + l] * g_u[o];
            }
        }
        grad[BV] += g_v;
        for o in 0..2 {
            grad[BD + o] += g_d[o];
            grad[BU + o] += g_u[o];
        }

        // Trunk, ordinary backpropagation.
        let mut dz3 = [0.0; H3];
        for l in 0..H3 {
            dz3[l] = da3[l] * r.m3[l];
            grad[B3 + l] += dz3[l];
            for k in 0..H2 {
                grad[W3 + l * H2 + k] += dz3[l] * r.a2[k];
            }
        }
        let mut dz2 = back::<H2, H3>(&p[W3..B3], &dz3);
        for k in 0..H2 {
            dz2[k] *= r.m2[k];
            grad[B2 + k] += dz2[k];
            for i in 0..H1 {
                grad[W2 + k * H1 + i] += dz2[k] * r.a1[i];
            }
        }
        let mut dz1 = back::<H1, H2>(&p[W2..B2], &dz2);
        for i in 0..H1 {
            dz1[i] *= r.m1[i];
            grad[B1 + i] += dz1[i];
            for j in 0..2 {
                grad[W1 + i * 2 + j] += dz1[i] * r.a0[j];
            }
        }

        // Input-gradient term: g = W1ᵀ c1, c1 = m1 ⊙ W2ᵀ c2, c2 = m2 ⊙ W3ᵀ c3,
        // c3 = m3 ⊙ w_V, with the masks frozen.
        let mut b1 = [0.0; H1];
        for i in 0..H1 {
            for j in 0..2 {
                grad[W1 + i * 2 + j] += e[j] * r.c1[i];
                b1[i] += p[W1 + i * 2 + j] * e[j];
            }
            b1[i] *= r.m1[i];
        }
        let mut b2 = [0.0; H2];
        for k in 0..H2 {
            for i in 0..H1 {
                grad[W2 + k * H1 + i] += b1[i] * r.c2[k];
                b2[k] += p[W2 + k * H1 + i] * b1[i];
            }
            b2[k] *= r.m2[k];
        }
        let mut b3 = [0.0; H3];
        for l in 0..H3 {
            for k in 0..H2 {
                grad[W3 + l * H2 + k] += b2[k] * r.c3[l];
                b3[l] += p[W3 + l * H2 + k] * b2[k];
            }
            grad[WV + l] += b3[l] * r.m3[l];
        }
        value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    /// The step decays geometrically to this value over `epochs`.
    pub final_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Sharpness of the soft sign in the control-consistency term.
    pub beta_s: f64,
    pub val_fraction: f64,
    /// Stop after this many epochs without a better validation loss.
    pub patience: usize,
    /// Cap on training samples drawn from the dataset (0 keeps all).
    pub max_samples: usize,
    /// Drop samples with `|λ|₂` above this (0 disables). The costate
    /// blows up near the edge of the usable part and at the ridge top.
    pub costate_bound: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            learning_rate: 1e-3,
            final_learning_rate: 1e-5,
            batch_size: 256,
            epochs: 5000,
            beta_s: 10.0,
            val_fraction: 0.1,
            patience: 200,
            max_samples: 20_000,
            costate_bound: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.final_learning_rate > 0.0 && self.final_learning_rate <= self.learning_rate) {
            return bad("final learning rate must lie in (0, learning rate]");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if !(self.beta_s > 0.0) {
            return bad("soft-sign sharpness must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if self.costate_bound < 0.0 {
            return bad("costate bound must be non-negative");
        }
        Ok(())
    }
}

/// Losses recorded during [`train`], all in evaluation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub final_train_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub n_train: usize,
    pub n_val: usize,
}

/// Training and validation split used by [`train`].
pub fn split(
    data: &Dataset,
    cfg: &TrainConfig,
) -> (Vec<CharacteristicPoint>, Vec<CharacteristicPoint>) {
    let mut pts: Vec<CharacteristicPoint> = if cfg.costate_bound > 0.0 {
        data.with_costate_bound(cfg.costate_bound).points
    } else {
        data.points.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    pts.shuffle(&mut rng);
    let n_val = ((pts.len() as f64) * cfg.val_fraction).floor() as usize;
    let n_val = if cfg.max_samples > 0 {
        n_val.min((cfg.max_samples as f64 * cfg.val_fraction).ceil() as usize)
    } else {
        n_val
    };
    let val = pts[..n_val].to_vec();
    let mut tr = pts[n_val..].to_vec();
    if cfg.max_samples > 0 {
        tr.truncate(cfg.max_samples);
    }
    (tr, val)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Mini-batch Adam on the five-term loss. Returns the model with the lowest
/// validation loss (training loss when there is no validation split).
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    let (tr, val) = split(data, cfg);
    train_on(&tr, &val, cfg)
}

/// [`train`] on an explicit split.
pub fn train_on(
    tr: &[CharacteristicPoint],
    val: &[CharacteristicPoint],
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    if tr.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::init(&mut rng);
    // Start the value and gradient heads at the data means.
    let n = tr.len() as f64;
    model.params[BV] = tr.iter().map(|q| q.v).sum::<f64>() / n;
    model.params[BD] = tr.iter().map(|q| q.lx).sum::<f64>() / n;
    model.params[BD + 1] = tr.iter().map(|q| q.ly).sum::<f64>() / n;

    let monitor = |m: &MlpModel| {
        if val.is_empty() {
            mean_loss(m, tr, LossMode::Eval)
        } else {
            mean_loss(m, val, LossMode::Eval)
        }
    };
    let initial_train_loss = mean_loss(&model, tr, LossMode::Eval);
    let initial_val_loss = monitor(&model);
    let mut best = (initial_val_loss, model.clone(), 0usize);

    let mode = LossMode::Train { beta_s: cfg.beta_s };
    let mut adam = Adam::new(N_PARAMS);
    let mut order: Vec<usize> = (0..tr.len()).collect();
    let mut grad = vec![0.0; N_PARAMS];
    let mut epochs_run = 0;
    let decay = (cfg.final_learning_rate / cfg.learning_rate).ln() / cfg.epochs as f64;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate * (decay * (epoch - 1) as f64).exp();
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += model.accumulate_gradient(&tr[i], mode, scale, &mut grad);
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam.step(&mut model.params, &grad, lr);
        }
        epochs_run = epoch;
        let score = monitor(&model);
        if !score.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        if score < best.0 {
            best = (score, model.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    let (best_val_loss, model, best_epoch) = best;
    let report = TrainReport {
        initial_train_loss,
        initial_val_loss,
        final_train_loss: mean_loss(&model, tr, LossMode::Eval),
        best_val_loss,
        best_epoch,
        epochs_run,
        n_train: tr.len(),
        n_val: val.len(),
    };
    Ok((model, report))
}

/// Accuracy of the heads on held-out characteristic points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutMetrics {
    /// Mean `|ψ_V − V|`.
    pub value_mae: f64,
    /// Mean wrapped `|ψ_u,2 − u_p*|` in radians.
    pub heading_mae: f64,
    /// Share of points with `|x| ≥ 0.05` and a non-singular label where
    /// `ψ_u,1` has the sign of `u_e*`.
    pub evader_sign_agreement: f64,
}

pub fn holdout_metrics(m: &MlpModel, pts: &[CharacteristicPoint]) -> HoldoutMetrics {
    let n = pts.len().max(1) as f64;
    let (mut dv, mut du, mut agree, mut counted) = (0.0, 0.0, 0usize, 0usize);
    for q in pts {
        let o = m.forward(q.state());
        dv += (o.v - q.v).abs();
        du += wrap_angle(o.u[1] - q.lx.atan2(q.ly)).abs();
        let label = ue_label(q.costate(), q.state());
        if q.x.abs() >= 0.05 && label != 0.0 {
            counted += 1;
            if o.u[0] * label > 0.0 {
                agree += 1;
            }
        }
    }
    HoldoutMetrics {
        value_mae: dv / n,
        heading_mae: du / n,
        evader_sign_agreement: if counted == 0 {
            1.0
        } else {
            agree as f64 / counted as f64
        },
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Heads {
    v: usize,
    dv: usize,
    u: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u64,
    arch: Vec<usize>,
    heads: Heads,
    /// Row-major matrices: three trunk layers, then the v, dv and u heads.
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    seed: u64,
    train_loss: f64,
    val_loss: f64,
}

/// Metadata stored beside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// `(weight offset, rows, cols, bias offset)` per layer, in file order.
const LAYOUT: [(usize, usize, usize, usize); 6] = [
    (W1, H1, 2, B1),
    (W2, H2, H1, B2),
    (W3, H3, H2, B3),
    (WV, 1, H3, BV),
    (WD, 2, H3, BD),
    (WU, 2, H3, BU),
];

pub fn checkpoint_json(m: &MlpModel, meta: &CheckpointMeta) -> String {
    let p = &m.params;
    let weights = LAYOUT
        .iter()
        .map(|&(off, rows, cols, _)| {
            (0..rows)
                .map(|r| p[off + r * cols..off + (r + 1) * cols].to_vec())
                .collect()
        })
        .collect();
    let biases = LAYOUT
        .iter()
        .map(|&(_, rows, _, b)| p[b..b + rows].to_vec())
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        arch: vec![2, H1, H2, H3],
        heads: Heads { v: 1, dv: 2, u: 2 },
        weights,
        biases,
        seed: meta.seed,
        train_loss: meta.train_loss,
        val_loss: meta.val_loss,
    };
    serde_json::to_string_pretty(&file).expect("checkpoint serializes")
}

pub fn save_checkpoint(m: &MlpModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut text = checkpoint_json(m, meta);
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(text: &str) -> Result<(MlpModel, CheckpointMeta)> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| {
        if e.is_eof() {
            FormatError::Truncated(format!("checkpoint ends early: {e}"))
        } else {
            FormatError::Truncated(format!("checkpoint is not valid JSON: {e}"))
        }
    })?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| FormatError::Truncated("checkpoint has no integer `version`".to_string()))?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let file: CheckpointFile = serde_json::from_value(raw)
        .map_err(|e| FormatError::Truncated(format!("checkpoint fields: {e}")))?;
    if file.arch != [2, H1, H2, H3] || (file.heads.v, file.heads.dv, file.heads.u) != (1, 2, 2) {
        return Err(FormatError::Shape(format!(
            "arch {:?}, heads ({}, {}, {})",
            file.arch, file.heads.v, file.heads.dv, file.heads.u
        ))
        .into());
    }
    if file.weights.len() != LAYOUT.len() || file.biases.len() != LAYOUT.len() {
        return Err(
            FormatError::Shape("expected 6 weight matrices and bias vectors".into()).into(),
        );
    }
    let mut params = vec![0.0; N_PARAMS];
    for (i, &(off, rows, cols, b)) in LAYOUT.iter().enumerate() {
        let w = &file.weights[i];
        if w.len() != rows || w.iter().any(|r| r.len() != cols) || file.biases[i].len() != rows {
            return Err(FormatError::Shape(format!("layer {i} is not {rows}x{cols}")).into());
        }
        for (r, row) in w.iter().enumerate() {
            params[off + r * cols..off + (r + 1) * cols].copy_from_slice(row);
        }
        params[b..b + rows].copy_from_slice(&file.biases[i]);
    }
    if params.iter().any(|w| !w.is_finite()) {
        return Err(FormatError::Shape("non-finite parameter".into()).into());
    }
    let meta = CheckpointMeta {
        seed: file.seed,
        train_loss: file.train_loss,
        val_loss: file.val_loss,
    };
    Ok((MlpModel { params }, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(MlpModel, CheckpointMeta)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn layout_is_620() {
        assert_eq!(N_PARAMS, 620);
    }

    #[test]
    fn zero_network() {
        let m = MlpModel::zeros();
        let o = m.forward(State::new(0.3, -0.2));
        assert_eq!((o.v, o.dv, o.u), (0.0, [0.0, 0.0], [0.0, 0.0]));
        assert_eq!(m.input_gradient(State::new(0.3, -0.2)), [0.0, 0.0]);
    }

    /// Dense matrices pulled out of the flat vector, for oracle arithmetic.
    fn mat(m: &MlpModel, off: usize, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|r| m.params[off + r * cols..off + (r + 1) * cols].to_vec())
            .collect()
    }

    fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum())
            .collect()
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|r| {
                (0..b[0].len())
                    .map(|j| r.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    /// Positive weights and biases keep every pre-activation positive at
    /// points in the positive quadrant, so the network is affine there.
    fn positive_stub() -> MlpModel {
        let mut r = rng(5);
        let mut m = MlpModel::init(&mut r);
        for w in &mut m.params[..WV] {
            *w = r.gen_range(0.05..0.3);
        }
        m
    }

    #[test]
    fn affine_stub_matches_matrix_arithmetic() {
        let m = positive_stub();
        let s = State::new(0.4, 0.7);
        let o = m.forward(s);
        let (w1, w2, w3) = (mat(&m, W1, H1, 2), mat(&m, W2, H2, H1), mat(&m, W3, H3, H2));
        let add = |a: Vec<f64>, off: usize| -> Vec<f64> {
            a.iter()
                .enumerate()
                .map(|(i, v)| v + m.params[off + i])
                .collect()
        };
        let a1 = add(matvec(&w1, &[s.x, s.y]), B1);
        let a2 = add(matvec(&w2, &a1), B2);
        let a3 = add(matvec(&w3, &a2), B3);
        let v = add(matvec(&mat(&m, WV, 1, H3), &a3), BV);
        let d = add(matvec(&mat(&m, WD, 2, H3), &a3), BD);
        let u = add(matvec(&mat(&m, WU, 2, H3), &a3), BU);
        assert!((o.v - v[0]).abs() <= 1e-12);
        assert!((o.dv[0] - d[0]).abs() <= 1e-12 && (o.dv[1] - d[1]).abs() <= 1e-12);
        assert!((o.u[0] - u[0].clamp(-1.0, 1.0)).abs() <= 1e-12);
        assert!((o.u[1] - wrap_angle(u[1])).abs() <= 1e-12);

        // Locally affine: gradient is the plain weight product.
        let prod = matmul(&mat(&m, WV, 1, H3), &matmul(&w3, &matmul(&w2, &w1)));
        let g = m.input_gradient(s);
        assert!((g[0] - prod[0][0]).abs() <= 1e-12 && (g[1] - prod[0][1]).abs() <= 1e-12);
    }

    #[test]
    fn control_head_ranges() {
        let mut r = rng(9);
        let mut m = MlpModel::init(&mut r);
        for w in &mut m.params[WU..] {
            *w *= 50.0;
        }
        for _ in 0..200 {
            let s = State::new(r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
            let o = m.forward(s);
            assert!((-1.0..=1.0).contains(&o.u[0]));
            assert!(o.u[1] > -PI && o.u[1] <= PI);
        }
    }

    /// A pre-activation within 1e-6 of zero, or a mask change inside the
    /// finite-difference stencil.
    pub(crate) fn near_kink(m: &MlpModel, s: State, h: f64) -> bool {
        let base = m.activation_pattern(s);
        m.min_preactivation(s) < 1e-6
            || [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h)]
                .iter()
                .any(|&(dx, dy)| m.activation_pattern(State::new(s.x + dx, s.y + dy)) != base)
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = rng(21);
        let mut checked = 0;
        while checked < 200 {
            let m = MlpModel::init(&mut r);
            let s = State::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
            let h = 1e-5;
            if near_kink(&m, s, h) {
                continue;
            }
            let fd = [
                (m.value(State::new(s.x + h, s.y)) - m.value(State::new(s.x - h, s.y))) / (2.0 * h),
                (m.value(State::new(s.x, s.y + h)) - m.value(State::new(s.x, s.y - h))) / (2.0 * h),
            ];
            let g = m.input_gradient(s);
            let err = (g[0] - fd[0]).hypot(g[1] - fd[1]);
            assert!(err <= 1e-4 * g[0].hypot(g[1]).max(1e-8), "{g:?} vs {fd:?}");
            checked += 1;
        }
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa10(&[0.0]), 0.0);
        assert_eq!(kappa10(&[3.0, 4.0]), 95.0);
        assert_eq!(kappa10(&[-2.0]), 24.0);
    }

    /// Network that reproduces the universal-line solution near (0, −0.5):
    /// V = 2y + 2, ∇V = (0, 2), u = (0, 0).
    fn exact_axis_model() -> MlpModel {
        let mut m = MlpModel::zeros();
        let p = &mut m.params;
        // Layer 1: rows e1, e2 with bias 10 keep the inputs shifted positive.
        p[W1] = 1.0;
        p[W1 + 3] = 1.0;
        p[B1] = 10.0;
        p[B1 + 1] = 10.0;
        // Identity pass-through on the first two units.
        p[W2] = 1.0;
        p[W2 + H1 + 1] = 1.0;
        p[W3] = 1.0;
        p[W3 + H2 + 1] = 1.0;
        // ψ_V = 2 (y + 10) − 18.
        p[WV + 1] = 2.0;
        p[BV] = -18.0;
        p[BD + 1] = 2.0;
        m
    }

    fn axis_sample(v: f64) -> CharacteristicPoint {
        CharacteristicPoint {
            x: 0.0,
            y: -0.5,
            lx: 0.0,
            ly: 2.0,
            v,
        }
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let m = exact_axis_model();
        for mode in [LossMode::Eval, LossMode::Train { beta_s: 10.0 }] {
            assert_eq!(loss_terms(&m, &axis_sample(1.0), mode), [0.0; 5]);
            // Only the value term sees a shifted target.
            assert!((loss(&m, &axis_sample(2.0), mode) - 11.0).abs() <= 1e-12);
        }
    }

    /// Term-by-term recomputation without the shared residual code.
    fn loss_oracle(m: &MlpModel, q: &CharacteristicPoint, beta_s: Option<f64>) -> f64 {
        let k = |v: &[f64]| -> f64 { v.iter().map(|r| 10.0 * r.abs() + r * r).sum() };
        let wrap = |a: f64| {
            let mut a = a % (2.0 * PI);
            if a > PI {
                a -= 2.0 * PI
            }
            if a <= -PI {
                a += 2.0 * PI
            }
            a
        };
        let s = q.state();
        let o = m.forward(s);
        let g = m.input_gradient(s);
        let sw_label = q.lx * q.y - q.ly * q.x;
        let ue = if sw_label.abs() <= 1e-12 {
            0.0
        } else {
            sw_label.signum()
        };
        let t1 = k(&[o.v - q.v]);
        let t2 = k(&[o.dv[0] - q.lx, o.dv[1] - q.ly]);
        let t3 = k(&[o.u[0] - ue, wrap(o.u[1] - q.lx.atan2(q.ly))]);
        let t4 = k(&[g[0] - o.dv[0], g[1] - o.dv[1]]);
        let sw = o.dv[0] * q.y - o.dv[1] * q.x;
        let sig = match beta_s {
            Some(b) => (b * sw).tanh(),
            None if sw.abs() <= 1e-12 => 0.0,
            None => sw.signum(),
        };
        let t5 = k(&[o.u[0] - sig, wrap(o.u[1] - o.dv[0].atan2(o.dv[1]))]);
        t1 + t2 + t3 + t4 + t5
    }

    #[test]
    fn loss_matches_termwise_oracle() {
        let mut r = rng(33);
        for _ in 0..200 {
            let m = MlpModel::init(&mut r);
            let q = CharacteristicPoint {
                x: r.gen_range(-1.0..1.0),
                y: r.gen_range(-1.0..1.0),
                lx: r.gen_range(-3.0..3.0),
                ly: r.gen_range(-3.0..3.0),
                v: r.gen_range(0.0..3.5),
            };
            let a = loss(&m, &q, LossMode::Eval);
            assert!((a - loss_oracle(&m, &q, None)).abs() <= 1e-12 * a.max(1.0));
            let b = loss(&m, &q, LossMode::Train { beta_s: 10.0 });
            assert!((b - loss_oracle(&m, &q, Some(10.0))).abs() <= 1e-12 * b.max(1.0));
        }
    }

    /// Weight gradient against central differences of the training loss,
    /// away from ReLU kinks and from κ₁₀ corners.
    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut r = rng(44);
        let mode = LossMode::Train { beta_s: 10.0 };
        let mut tested = 0;
        while tested < 20 {
            let m = MlpModel::init(&mut r);
            let q = CharacteristicPoint {
                x: r.gen_range(-1.0..1.0),
                y: r.gen_range(-1.0..1.0),
                lx: r.gen_range(-3.0..3.0),
                ly: r.gen_range(-3.0..3.0),
                v: r.gen_range(0.0..3.5),
            };
            if m.min_preactivation(q.state()) < 1e-3 {
                continue;
            }
            let mut g = vec![0.0; N_PARAMS];
            m.accumulate_gradient(&q, mode, 1.0, &mut g);
            for i in (0..N_PARAMS).step_by(7) {
                let h = 1e-7;
                let mut a = m.clone();
                a.params[i] += h;
                let mut b = m.clone();
                b.params[i] -= h;
                if a.min_preactivation(q.state()) < 1e-4 || b.min_preactivation(q.state()) < 1e-4 {
                    continue;
                }
                let fd = (loss(&a, &q, mode) - loss(&b, &q, mode)) / (2.0 * h);
                // A κ₁₀ corner inside the stencil shows up as a jump of 20.
                if (fd - g[i]).abs() > 1.0 {
                    let lo = loss(&m, &q, mode);
                    let one_sided = (loss(&a, &q, mode) - lo) / h;
                    if (one_sided - g[i]).abs() > 1e-3 * g[i].abs().max(1.0) {
                        let other = (lo - loss(&b, &q, mode)) / h;
                        assert!(
                            (other - g[i]).abs() <= 1e-3 * g[i].abs().max(1.0),
                            "param {i}: {} vs {fd}",
                            g[i]
                        );
                    }
                    continue;
                }
                assert!(
                    (fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1.0),
                    "param {i}: {} vs {fd}",
                    g[i]
                );
            }
            tested += 1;
        }
    }

    /// Ten samples of an affine value field, which the network can
    /// represent exactly. All have a switching value of at least 0.5 so the
    /// soft sign is saturated.
    fn tiny_dataset() -> Vec<CharacteristicPoint> {
        let (lx, ly) = (-1.3, 1.8);
        let mut pts = Vec::new();
        let mut i = 0;
        while pts.len() < 10 {
            let a = 0.7 * i as f64;
            i += 1;
            let r = 0.3 + 0.06 * (i % 7) as f64;
            let (x, y) = (r * a.sin(), r * a.cos() - 0.2);
            if (lx * y - ly * x).abs() < 0.5 {
                continue;
            }
            pts.push(CharacteristicPoint {
                x,
                y,
                lx,
                ly,
                v: 2.0 + lx * x + ly * y,
            });
        }
        pts
    }

    #[test]
    fn overfits_ten_samples() {
        let pts = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 5000,
            batch_size: 10,
            patience: 5000,
            learning_rate: 1e-2,
            final_learning_rate: 1e-4,
            ..TrainConfig::default()
        };
        let (m, rep) = train_on(&pts, &[], &cfg).unwrap();
        let train_mode = mean_loss(&m, &pts, LossMode::Train { beta_s: 10.0 });
        assert!(train_mode <= 1e-2, "train-mode loss {train_mode}, {rep:?}");
        assert!(rep.final_train_loss <= 0.1 * rep.initial_train_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let pts = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (a, _) = train_on(&pts, &pts[..3], &cfg).unwrap();
        let (b, _) = train_on(&pts, &pts[..3], &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            train(&Dataset::default(), &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng(66);
        let m = MlpModel::init(&mut r);
        let meta = CheckpointMeta {
            seed: 3,
            train_loss: 0.25,
            val_loss: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&m, &meta, &path).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        for _ in 0..100 {
            let s = State::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
            assert_eq!(m.forward(s), back.forward(s));
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let bumped = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(
            parse_checkpoint(&bumped),
            Err(Error::Format(FormatError::Version { found: 2, .. }))
        ));
        assert!(matches!(
            parse_checkpoint(&text[..text.len() / 2]),
            Err(Error::Format(FormatError::Truncated(_)))
        ));
    }
}
