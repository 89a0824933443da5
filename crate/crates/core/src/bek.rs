//! The scalar backward equation for the base-capacity signal `ℓ`:
//!
//! `E[∫_τ^T e^{-(r-λ0*)t} z_t^α (e^{λ0 t} sup_{τ<=u<=t} e^{-λ0 u} ℓ_u)^{-α} dt | F_τ] = e^{-(r-λ0*)τ} φ_τ`
//!
//! solved in closed form (constant drivers), by κ-scaling of `η = z^α/φ`
//! (exponential Lévy drivers) and on a binomial optimal-stopping lattice.
//!
//! Time integrals use the left-node weights `W_i = e^{λ0* t_i} q_i` with
//! `q_i = ∫_{t_i}^{t_{i+1}} e^{-rt} dt`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drivers::{DriverModel, ScenarioSet};
use crate::error::{Error, Result};
use crate::stats::Estimate;
use crate::time::TimeGrid;

/// `ℓ = (z^α / (φ (r - λ0* + α (λ0 ∨ 0))))^{1/α}` for constant drivers.
pub fn solve_constant(z: f64, phi: f64, alpha: f64, r: f64, lambda0: f64, lambda0_star: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("discount rate must be positive, got {r}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let rate = r - lambda0_star + alpha * lambda0.max(0.0);
    if !(rate > 0.0) || !(phi > 0.0) || !(z >= 0.0) {
        return Err(Error::InvalidParameter("constant signal needs z >= 0, phi > 0, r > lambda0_star".into()));
    }
    Ok((z.powf(alpha) / (phi * rate)).powf(1.0 / alpha))
}

fn bek_weights(time: &TimeGrid, r: f64, lambda0_star: f64) -> Vec<f64> {
    time.discount_weights(r)
        .iter()
        .enumerate()
        .map(|(i, q)| (lambda0_star * time.time(i)).exp() * q)
        .collect()
}

/// `Σ_{i>=i0} W_i z_i^α (e^{λ0 t_i} max_{i0<=j<=i} e^{-λ0 t_j} ℓ_j)^{-α}`.
#[allow(clippy::too_many_arguments)]
fn tail_integral(w: &[f64], time: &TimeGrid, z: &[f64], ell: &[f64], alpha: f64, lambda0: f64, i0: usize) -> (f64, f64) {
    let mut run = 0.0f64;
    let mut sum = 0.0;
    let mut abs = 0.0;
    for i in i0..w.len() {
        let t = time.time(i);
        run = run.max((-lambda0 * t).exp() * ell[i]);
        let v = w[i] * z[i].powf(alpha) * ((lambda0 * t).exp() * run).powf(-alpha);
        sum += v;
        abs += v.abs();
    }
    (sum, abs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaSolution {
    pub kappa: f64,
    /// `E ∫ W z^α (e^{λ0 t} sup e^{-λ0 u} η_u^{1/α})^{-α}` at `κ = 1`.
    pub a: Estimate,
    /// `g(κ) = κ^{-α} A - φ0` with its standard error.
    pub g: Estimate,
    pub bracket: [f64; 2],
    pub truncation_bound: f64,
}

/// `ℓ = κ η^{1/α}`. The map `κ ↦ g(κ) = κ^{-α} A - φ0` is strictly
/// decreasing and homogeneous, so its root is `κ = (A/φ0)^{1/α}`; the
/// bracket is expanded around it as a sanity check.
pub fn solve_kappa(model: &DriverModel, alpha: f64, scenarios: &ScenarioSet, bracket: [f64; 2]) -> Result<KappaSolution> {
    model.validate(alpha)?;
    if model.z0 == 0.0 {
        return Err(Error::Unsupported("kappa signal for zero profit".into()));
    }
    let time = scenarios.time;
    let w = bek_weights(&time, model.r, model.lambda0_star);
    let samples: Vec<f64> = (0..scenarios.len())
        .into_par_iter()
        .map(|s| {
            let z = scenarios.z_path(s);
            let phi = scenarios.phi_path(s);
            let root: Vec<f64> = z.iter().zip(phi).map(|(z, p)| (z.powf(alpha) / p).powf(1.0 / alpha)).collect();
            tail_integral(&w, &time, z, &root, alpha, model.lambda0, 0).0
        })
        .collect();
    let a = Estimate::from_samples(&samples);
    if !(a.mean > 0.0) || !a.mean.is_finite() {
        return Err(Error::Solver(format!("kappa integral is not positive: {}", a.mean)));
    }
    let kappa = (a.mean / model.phi0).powf(1.0 / alpha);
    let mut br = bracket;
    if !(br[0] > 0.0 && br[1] > br[0]) {
        return Err(Error::InvalidParameter(format!("kappa bracket must satisfy 0 < lo < hi, got {br:?}")));
    }
    let mut expansions = 0;
    while !(br[0] <= kappa && kappa <= br[1]) {
        expansions += 1;
        if expansions > 30 {
            return Err(Error::Solver(format!("kappa root {kappa} not bracketed after expansion")));
        }
        br = [br[0] / 10.0, br[1] * 10.0];
    }
    let ka = kappa.powf(-alpha);
    let g = Estimate { mean: ka * a.mean - model.phi0, stderr: ka * a.stderr, n: a.n };
    let growth = model.psi_z(alpha);
    let gap = model.r - model.lambda0_star - growth;
    let truncation_bound = (-gap * time.t_max).exp() / gap * model.z0.powf(alpha) * ka;
    Ok(KappaSolution { kappa, a, g, bracket: br, truncation_bound })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatticeConfig {
    pub levels: usize,
    /// The level grid spans `[ℓ_c/span, span ℓ_c]`.
    pub span: f64,
    pub tol_eq: f64,
    pub max_widen: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self { levels: 200, span: 50.0, tol_eq: 1e-9, max_widen: 6 }
    }
}

/// Recombining `p = 1/2` binomial lattice of the driving factor
/// `k_{i,j} = (2j - i)√dt`, with `log z = log z0 + μ_z t + σ_z k` and
/// `log φ = log φ0 + μ_φ t + ρ σ_φ k`.
#[derive(Debug, Clone)]
pub struct StoppingLattice {
    pub time: TimeGrid,
    pub alpha: f64,
    pub lambda0: f64,
    pub cfg: LatticeConfig,
    factor: Factor,
    /// `ℓ̃ = -1/ξ` levels, ascending.
    levels: Vec<f64>,
    /// `X_{i,j} = e^{-(r-λ0*)t_i} φ_{i,j}`, with `X_M = 0`.
    x: Vec<Vec<f64>>,
    /// `W_i z_{i,j}^α e^{-α λ0 t_i}`: the running reward per unit `(-ξ)^α`.
    c: Vec<Vec<f64>>,
    reference: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Factor {
    log_z0: f64,
    mu_z: f64,
    sigma_z: f64,
    log_phi0: f64,
    mu_phi: f64,
    sigma_phi: f64,
    deterministic: bool,
}

impl Factor {
    fn nodes(&self, i: usize) -> usize {
        if self.deterministic {
            1
        } else {
            i + 1
        }
    }

    fn k(&self, i: usize, j: usize, dt: f64) -> f64 {
        if self.deterministic {
            0.0
        } else {
            (2.0 * j as f64 - i as f64) * dt.sqrt()
        }
    }
}

pub fn build_lattice(model: &DriverModel, alpha: f64, time: TimeGrid, cfg: LatticeConfig) -> Result<StoppingLattice> {
    model.validate(alpha)?;
    if !model.is_one_factor() {
        return Err(Error::Unsupported(
            "lattice solver needs one driving factor (deterministic phi or |rho| = 1, no jumps)".into(),
        ));
    }
    if model.z0 == 0.0 {
        return Err(Error::Unsupported("lattice signal for zero profit".into()));
    }
    if cfg.levels < 4 || !(cfg.span > 1.0) || !(cfg.tol_eq >= 0.0) {
        return Err(Error::InvalidParameter(format!("bad lattice config {cfg:?}")));
    }
    let factor = Factor {
        log_z0: model.z0.ln(),
        mu_z: model.log_drift_z(),
        sigma_z: model.sigma_z,
        log_phi0: model.phi0.ln(),
        mu_phi: model.log_drift_phi(),
        sigma_phi: model.rho * model.sigma_phi,
        deterministic: model.sigma_z == 0.0 && model.sigma_phi == 0.0,
    };
    let dt = time.dt();
    let w = bek_weights(&time, model.r, model.lambda0_star);
    let mut x = Vec::with_capacity(time.len());
    let mut c = Vec::with_capacity(time.len());
    for i in 0..time.len() {
        let t = time.time(i);
        let n = factor.nodes(i);
        let mut xi = Vec::with_capacity(n);
        let mut ci = Vec::with_capacity(n);
        for j in 0..n {
            let k = factor.k(i, j, dt);
            let lz = factor.log_z0 + factor.mu_z * t + factor.sigma_z * k;
            let lphi = factor.log_phi0 + factor.mu_phi * t + factor.sigma_phi * k;
            if i == time.steps {
                xi.push(0.0);
                ci.push(0.0);
            } else {
                xi.push((-(model.r - model.lambda0_star) * t + lphi).exp());
                ci.push(w[i] * (alpha * lz - alpha * model.lambda0 * t).exp());
            }
        }
        x.push(xi);
        c.push(ci);
    }
    let reference = solve_constant(model.z0, model.phi0, alpha, model.r, model.lambda0, model.lambda0_star)?;
    let levels = geometric(reference / cfg.span, reference * cfg.span, cfg.levels);
    Ok(StoppingLattice { time, alpha, lambda0: model.lambda0, cfg, factor, levels, x, c, reference })
}

fn geometric(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let ratio = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|k| lo * (ratio * k as f64).exp()).collect()
}

impl StoppingLattice {
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn x(&self) -> &[Vec<f64>] {
        &self.x
    }

    /// Constant-driver signal at the initial values, the centre of the grid.
    pub fn reference(&self) -> f64 {
        self.reference
    }

    /// `Ξ^ξ` at every node for the level `ℓ̃` (`ξ = -1/ℓ̃`):
    /// `Ξ = min(X, f W + E[Ξ_next])`.
    pub fn xi_level(&self, ell_tilde: f64) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = (0..self.time.len()).map(|i| vec![0.0; self.factor.nodes(i)]).collect();
        out[self.time.steps] = self.x[self.time.steps].clone();
        self.scan_level(ell_tilde, |i, j, x, h, _| out[i][j] = x.min(x + h));
        out
    }

    /// Backward induction at one level, reporting `(i, j, X, h, dh/du)` with
    /// the stopping margin `h = f W + E[Ξ_next] - X` for every node `i < M`.
    fn scan_level(&self, ell_tilde: f64, mut visit: impl FnMut(usize, usize, f64, f64, f64)) {
        let u = ell_tilde.powf(-self.alpha);
        let mut next = self.x[self.time.steps].clone();
        let mut dnext = vec![0.0; next.len()];
        let mut cur = Vec::with_capacity(next.len());
        let mut dcur = Vec::with_capacity(next.len());
        for i in (0..self.time.steps).rev() {
            cur.clear();
            dcur.clear();
            for j in 0..self.factor.nodes(i) {
                let (cont, dcont) = if self.factor.deterministic {
                    (next[0], dnext[0])
                } else {
                    (0.5 * (next[j] + next[j + 1]), 0.5 * (dnext[j] + dnext[j + 1]))
                };
                let x = self.x[i][j];
                let h = self.c[i][j] * u + cont - x;
                let slope = self.c[i][j] + dcont;
                visit(i, j, x, h, slope);
                cur.push(x.min(x + h));
                dcur.push(if h < 0.0 { slope } else { 0.0 });
            }
            std::mem::swap(&mut cur, &mut next);
            std::mem::swap(&mut dcur, &mut dnext);
        }
    }

    fn widened(&self, down: bool, up: bool) -> Vec<f64> {
        let ratio = self.levels[1] / self.levels[0];
        let extra = self.cfg.levels / 2;
        let mut lv = Vec::with_capacity(self.levels.len() + 2 * extra);
        if down {
            lv.extend((1..=extra).rev().map(|k| self.levels[0] / ratio.powi(k as i32)));
        }
        lv.extend_from_slice(&self.levels);
        if up {
            let top = *self.levels.last().unwrap();
            lv.extend((1..=extra).map(|k| top * ratio.powi(k as i32)));
        }
        lv
    }
}

/// Per-node `ℓ̃ = e^{-λ0 t} ℓ` on the lattice plus lookup along paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatticeSolution {
    pub time: TimeGrid,
    pub lambda0: f64,
    factor: Factor,
    /// `ℓ̃` per node for `i < M`.
    pub rows: Vec<Vec<f64>>,
    pub levels_used: usize,
    pub widenings: usize,
}

#[derive(Clone, Copy)]
struct Track {
    q: Option<usize>,
    h_in: f64,
    s_in: f64,
    h_out: f64,
    s_out: f64,
}

/// Backward induction per level, then `ξ = sup{ξ : X - Ξ^ξ <= tol}` per node.
/// Between the last qualifying level and the next one the stopping margin
/// `h(u) = f W + E[Ξ_next] - X`, concave and increasing in `u = (-ξ)^α`, is
/// interpolated linearly to its root.
pub fn solve_grid(lat: &StoppingLattice) -> Result<LatticeSolution> {
    let mut lat = lat.clone();
    let steps = lat.time.steps;
    for round in 0..=lat.cfg.max_widen {
        let mut tracks: Vec<Vec<Track>> = (0..steps)
            .map(|i| vec![Track { q: None, h_in: f64::NAN, s_in: f64::NAN, h_out: f64::NAN, s_out: f64::NAN }; lat.factor.nodes(i)])
            .collect();
        for (k, &lv) in lat.levels.iter().enumerate() {
            lat.scan_level(lv, |i, j, x, h, sl| {
                let tr = &mut tracks[i][j];
                if -h <= lat.cfg.tol_eq * x.abs() {
                    *tr = Track { q: Some(k), h_in: h, s_in: sl, h_out: f64::NAN, s_out: f64::NAN };
                } else if tr.q.is_some() && tr.h_out.is_nan() {
                    tr.h_out = h;
                    tr.s_out = sl;
                }
            });
        }
        let last = lat.levels.len() - 1;
        let down = tracks.iter().flatten().any(|t| t.q.is_none());
        let up = tracks.iter().flatten().any(|t| t.q == Some(last));
        if down || up {
            if round == lat.cfg.max_widen {
                return Err(Error::Solver(format!(
                    "signal outside the level grid [{:.3e}, {:.3e}] after {} widenings",
                    lat.levels[0], lat.levels[last], round
                )));
            }
            lat.levels = lat.widened(down, up);
            continue;
        }
        let a = lat.alpha;
        let u = |k: usize| lat.levels[k].powf(-a);
        // The margin is concave and piecewise linear in `u`, so its root is
        // at least the root of either tangent and at most the chord root.
        // The one-step indifference point `(X - E X_next)/c` bounds it below.
        let rows: Vec<Vec<f64>> = tracks
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let q = t.q.expect("checked above");
                        let (hi, lo) = (u(q), u(q + 1));
                        let next_x = if lat.factor.deterministic {
                            lat.x[i + 1][0]
                        } else {
                            0.5 * (lat.x[i + 1][j] + lat.x[i + 1][j + 1])
                        };
                        let floor = lo.max((lat.x[i][j] - next_x) / lat.c[i][j]);
                        let chord = if t.h_in > t.h_out { hi - t.h_in * (hi - lo) / (t.h_in - t.h_out) } else { hi };
                        let ceil = hi.min(chord).max(floor);
                        let tangent = |u0: f64, h: f64, sl: f64| if sl > 0.0 { u0 - h / sl } else { f64::NEG_INFINITY };
                        let root = tangent(hi, t.h_in, t.s_in).max(tangent(lo, t.h_out, t.s_out));
                        root.clamp(floor, ceil).powf(-1.0 / a)
                    })
                    .collect()
            })
            .collect();
        return Ok(LatticeSolution {
            time: lat.time,
            lambda0: lat.lambda0,
            factor: lat.factor,
            rows,
            levels_used: lat.levels.len(),
            widenings: round,
        });
    }
    unreachable!("loop returns or errors")
}

impl LatticeSolution {
    /// `ℓ_t = e^{λ0 t} ℓ̃_t` at grid time `i` for a driver state, linear in
    /// the factor between neighbouring nodes. The last grid time reuses the
    /// previous row.
    pub fn ell_at(&self, i: usize, z: f64, phi: f64) -> f64 {
        let i = i.min(self.rows.len() - 1);
        let t = self.time.time(i);
        let row = &self.rows[i];
        let lt = if self.factor.deterministic {
            row[0]
        } else {
            let f = &self.factor;
            let k = if f.sigma_z > 0.0 {
                (z.ln() - f.log_z0 - f.mu_z * t) / f.sigma_z
            } else {
                (phi.ln() - f.log_phi0 - f.mu_phi * t) / f.sigma_phi
            };
            let jc = (0.5 * (k / self.time.dt().sqrt() + i as f64)).clamp(0.0, i as f64);
            let j0 = (jc.floor() as usize).min(i);
            let j1 = (j0 + 1).min(i);
            let w = jc - j0 as f64;
            if j0 == j1 {
                row[j0]
            } else {
                // Interpolate in log z (linear in the factor) on the log scale.
                (row[j0].ln() * (1.0 - w) + row[j1].ln() * w).exp()
            }
        };
        (self.lambda0 * t).exp() * lt
    }
}

/// A signal rule mapping driver paths to `ℓ` paths.
#[derive(Debug, Clone)]
pub enum SignalModel {
    Constant { ell: f64 },
    Kappa { kappa: f64, alpha: f64 },
    Lattice(Arc<LatticeSolution>),
}

impl SignalModel {
    pub fn method(&self) -> &'static str {
        match self {
            SignalModel::Constant { .. } => "constant",
            SignalModel::Kappa { .. } => "kappa",
            SignalModel::Lattice(_) => "grid",
        }
    }

    /// `ℓ` at grid time `i` and driver state `(z, φ)`.
    pub fn ell_at(&self, i: usize, z: f64, phi: f64) -> f64 {
        match self {
            SignalModel::Constant { ell } => *ell,
            SignalModel::Kappa { kappa, alpha } => kappa * (z.powf(*alpha) / phi).powf(1.0 / alpha),
            SignalModel::Lattice(sol) => sol.ell_at(i, z, phi),
        }
    }

    /// `ℓ_{t_i}` along one driver path.
    pub fn path(&self, z: &[f64], phi: &[f64]) -> Vec<f64> {
        z.iter().zip(phi).enumerate().map(|(i, (z, p))| self.ell_at(i, *z, *p)).collect()
    }

    pub fn scaled(&self, c: f64) -> SignalModel {
        match self {
            SignalModel::Constant { ell } => SignalModel::Constant { ell: ell * c },
            SignalModel::Kappa { kappa, alpha } => SignalModel::Kappa { kappa: kappa * c, alpha: *alpha },
            SignalModel::Lattice(sol) => {
                let mut s = (**sol).clone();
                for row in &mut s.rows {
                    row.iter_mut().for_each(|v| *v *= c);
                }
                SignalModel::Lattice(Arc::new(s))
            }
        }
    }
}

/// `ℓ` per scenario and the running supremum `ζ_t = sup_{u<=t} e^{-λ0 u} ℓ_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPath {
    pub method: String,
    pub time: TimeGrid,
    pub lambda0: f64,
    n: usize,
    ell: Vec<f64>,
    zeta: Vec<f64>,
}

impl SignalPath {
    pub fn from_model(model: &SignalModel, scenarios: &ScenarioSet, lambda0: f64) -> Result<Self> {
        let m = scenarios.time.len();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..scenarios.len())
            .into_par_iter()
            .map(|s| {
                let ell = model.path(scenarios.z_path(s), scenarios.phi_path(s));
                let zeta = running_sup(&ell, &scenarios.time, lambda0);
                (ell, zeta)
            })
            .collect();
        let mut ell = Vec::with_capacity(m * scenarios.len());
        let mut zeta = Vec::with_capacity(m * scenarios.len());
        for (l, z) in rows {
            if let Some(v) = l.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                return Err(Error::Solver(format!("signal is not strictly positive: {v}")));
            }
            ell.extend(l);
            zeta.extend(z);
        }
        Ok(Self { method: model.method().into(), time: scenarios.time, lambda0, n: scenarios.len(), ell, zeta })
    }

    pub fn len(&self) -> usize {
        self.n
    }
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
    pub fn ell(&self, s: usize) -> &[f64] {
        let m = self.time.len();
        &self.ell[s * m..(s + 1) * m]
    }
    pub fn zeta(&self, s: usize) -> &[f64] {
        let m = self.time.len();
        &self.zeta[s * m..(s + 1) * m]
    }
}

/// `sup_{0<=u<=t_i} e^{-λ0 u} ℓ_u` by prefix maximum.
pub fn running_sup(ell: &[f64], time: &TimeGrid, lambda0: f64) -> Vec<f64> {
    let mut run = f64::NEG_INFINITY;
    ell.iter()
        .enumerate()
        .map(|(i, l)| {
            run = run.max((-lambda0 * time.time(i)).exp() * l);
            run
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum StoppingRule {
    Zero,
    /// First grid time `>= t`.
    Deterministic { t: f64 },
    /// First grid time with `z >= factor z0` (or `<=` for `factor < 1`);
    /// paths that never hit contribute zero.
    FirstHitting { factor: f64 },
}

impl StoppingRule {
    pub fn index(&self, time: &TimeGrid, z: &[f64]) -> Option<usize> {
        match *self {
            StoppingRule::Zero => Some(0),
            StoppingRule::Deterministic { t } => {
                let i = time.ceil_index(t);
                (i < time.steps).then_some(i)
            }
            StoppingRule::FirstHitting { factor } => {
                let level = factor * z[0];
                z[..time.steps]
                    .iter()
                    .position(|&v| if factor >= 1.0 { v >= level } else { v <= level })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualItem {
    pub rule: StoppingRule,
    pub residual: Estimate,
    /// Sample mean of `∫ |integrand|`: the integrability surrogate.
    pub l1: f64,
    pub hits: usize,
}

impl ResidualItem {
    pub fn within(&self, k_sigma: f64, abs_tol: f64) -> bool {
        self.residual.within(0.0, k_sigma, abs_tol)
    }
}

/// Monte Carlo residual of the backward equation at each stopping rule.
pub fn residual_check(
    sig: &SignalPath,
    scenarios: &ScenarioSet,
    alpha: f64,
    r: f64,
    lambda0: f64,
    lambda0_star: f64,
    taus: &[StoppingRule],
) -> Result<Vec<ResidualItem>> {
    if sig.len() != scenarios.len() || sig.time != scenarios.time {
        return Err(Error::ShapeMismatch { expected: scenarios.len(), got: sig.len() });
    }
    let time = scenarios.time;
    let w = bek_weights(&time, r, lambda0_star);
    taus.iter()
        .map(|rule| {
            let rows: Vec<(f64, f64, bool)> = (0..scenarios.len())
                .into_par_iter()
                .map(|s| {
                    let z = scenarios.z_path(s);
                    match rule.index(&time, z) {
                        None => (0.0, 0.0, false),
                        Some(i0) => {
                            let (int, abs) = tail_integral(&w, &time, z, sig.ell(s), alpha, lambda0, i0);
                            let x = (-(r - lambda0_star) * time.time(i0)).exp() * scenarios.phi_path(s)[i0];
                            (int - x, abs, true)
                        }
                    }
                })
                .collect();
            let vals: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let l1 = rows.iter().map(|r| r.1).sum::<f64>() / rows.len().max(1) as f64;
            Ok(ResidualItem {
                rule: *rule,
                residual: Estimate::from_samples(&vals),
                l1,
                hits: rows.iter().filter(|r| r.2).count(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::simulate;

    #[test]
    fn constant_examples() {
        assert!((solve_constant(1.0, 1.0, 0.5, 0.1, 0.0, 0.0).unwrap() - 100.0).abs() < 1e-10);
        assert!((solve_constant(1.0, 10.0, 0.5, 0.1, 0.0, 0.0).unwrap() - 1.0).abs() < 1e-12);
        let a = solve_constant(1.0, 2.0, 0.3, 0.1, 0.0, 0.0).unwrap();
        let b = solve_constant(3.0, 2.0, 0.3, 0.1, 0.0, 0.0).unwrap();
        assert!((b / a - 3.0).abs() < 1e-12);
        // φ -> cφ scales ℓ by c^{-1/α}
        let c = solve_constant(1.0, 4.0, 0.3, 0.1, 0.0, 0.0).unwrap();
        assert!((c / a - 2.0f64.powf(-1.0 / 0.3)).abs() < 1e-12);
        assert!(solve_constant(1.0, 1.0, 0.5, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn constant_signal_solves_equation_for_general_lambda0() {
        // Direct quadrature of the reduced equation at τ = 0 with λ0 != 0.
        for (l0, l0s) in [(0.03, 0.02), (-0.04, -0.01)] {
            let (z, phi, a, r) = (1.3, 0.7, 0.4, 0.2);
            let ell = solve_constant(z, phi, a, r, l0, l0s).unwrap();
            let n = 400_000;
            let t_max = 400.0;
            let dt = t_max / n as f64;
            let mut s = 0.0;
            for i in 0..n {
                let t = (i as f64 + 0.5) * dt;
                let sup = if l0 >= 0.0 { ell } else { ell * (-l0 * t).exp() };
                s += (-(r - l0s) * t).exp() * z.powf(a) * ((l0 * t).exp() * sup).powf(-a) * dt;
            }
            assert!((s - phi).abs() < 1e-6, "{s} vs {phi}");
        }
    }

    fn horizon(r: f64, tol: f64, m: usize) -> TimeGrid {
        TimeGrid::truncated(1.0, tol, r, 0.0, m).unwrap()
    }

    #[test]
    fn kappa_constant_case() {
        let md = DriverModel::constant(2.0, 1.5, 0.1);
        let t = horizon(0.1, 1e-10, 400);
        let sc = simulate(&md, t, 4, 1).unwrap();
        let sol = solve_kappa(&md, 0.5, &sc, [0.1, 10.0]).unwrap();
        let ell = solve_constant(2.0, 1.5, 0.5, 0.1, 0.0, 0.0).unwrap();
        let want = ell * 1.5f64.powf(1.0 / 0.5) / 2.0;
        assert!((sol.kappa / want - 1.0).abs() < 1e-3, "{} vs {}", sol.kappa, want);
        assert!(sol.g.mean.abs() < 1e-12);
    }

    #[test]
    fn kappa_zero_volatility_gbm() {
        // η increasing, so the running sup is η_t itself and A = φ0 Σ q_i.
        let md = DriverModel::gbm(1.0, 0.03, 0.0, 1.0, 0.2);
        let t = horizon(0.2, 1e-8, 300);
        let sc = simulate(&md, t, 2, 1).unwrap();
        let sol = solve_kappa(&md, 0.5, &sc, [1.0, 2.0]).unwrap();
        let want = ((1.0 - (-0.2 * t.t_max).exp()) / 0.2f64).powf(2.0);
        assert!((sol.kappa / want - 1.0).abs() < 1e-4, "{} vs {}", sol.kappa, want);
        assert!(sol.bracket[0] <= sol.kappa && sol.kappa <= sol.bracket[1]);
    }

    #[test]
    fn grid_matches_constant_case() {
        let md = DriverModel::constant(1.0, 1.0, 0.1);
        let t = horizon(0.1, 1e-10, 400);
        let lat = build_lattice(&md, 0.5, t, LatticeConfig::default()).unwrap();
        let sol = solve_grid(&lat).unwrap();
        let l0 = sol.ell_at(0, 1.0, 1.0);
        assert!((l0 / 100.0 - 1.0).abs() < 1e-3, "{l0} {}", sol.widenings);
        assert!(sol.rows.iter().flatten().all(|v| *v > 0.0));
    }

    #[test]
    fn lattice_level_monotonicity() {
        let md = DriverModel::gbm(1.0, 0.02, 0.2, 1.0, 0.2);
        let t = horizon(0.2, 1e-4, 60);
        let lat = build_lattice(&md, 0.5, t, LatticeConfig { levels: 20, ..Default::default() }).unwrap();
        let mut prev: Option<Vec<Vec<f64>>> = None;
        for &lv in lat.levels() {
            let xi = lat.xi_level(lv);
            for (row, xrow) in xi.iter().zip(lat.x()) {
                for (a, x) in row.iter().zip(xrow) {
                    assert!(*a <= *x);
                }
            }
            // ℓ̃ ascending means ξ ascending: Ξ nonincreasing.
            if let Some(p) = &prev {
                for (ra, rb) in p.iter().zip(&xi) {
                    for (a, b) in ra.iter().zip(rb) {
                        assert!(*b <= *a + 1e-15);
                    }
                }
            }
            prev = Some(xi);
        }
    }

    #[test]
    fn zero_volatility_grid_matches_deterministic_program() {
        let md = DriverModel { theta_phi: 0.01, ..DriverModel::gbm(1.0, 0.04, 0.0, 1.0, 0.2) };
        let t = horizon(0.2, 1e-6, 300);
        let a = 0.5;
        let sol = solve_grid(&build_lattice(&md, a, t, LatticeConfig::default()).unwrap()).unwrap();
        // ξ_t from the stopping characterization: stop now iff for every later
        // τ the running reward covers X_t - X_τ.
        let q = t.discount_weights(0.2);
        let m = t.steps;
        let x: Vec<f64> = (0..=m)
            .map(|i| if i == m { 0.0 } else { (-0.2 * t.time(i) + md.log_drift_phi() * t.time(i)).exp() })
            .collect();
        let c: Vec<f64> = (0..m).map(|i| q[i] * (a * md.log_drift_z() * t.time(i)).exp()).collect();
        for i in [0, 10, 100, 200] {
            let mut u = 0.0f64;
            let mut acc = 0.0;
            for tau in i + 1..=m {
                acc += c[tau - 1];
                u = u.max((x[i] - x[tau]) / acc);
            }
            let want = u.powf(-1.0 / a);
            let got = sol.rows[i][0];
            assert!((got / want - 1.0).abs() < 1e-3, "i={i}: {got} vs {want}");
        }
    }

    #[test]
    fn raising_cost_lowers_grid_signal() {
        let md = DriverModel::gbm(1.0, 0.02, 0.2, 1.0, 0.2);
        let t = horizon(0.2, 1e-4, 80);
        let cfg = LatticeConfig { levels: 100, ..Default::default() };
        let lo = solve_grid(&build_lattice(&md, 0.5, t, cfg).unwrap()).unwrap();
        let hi_md = DriverModel { phi0: 1.5, ..md };
        let hi = solve_grid(&build_lattice(&hi_md, 0.5, t, cfg).unwrap()).unwrap();
        for (a, b) in lo.rows.iter().flatten().zip(hi.rows.iter().flatten()) {
            assert!(b < a);
        }
    }

    #[test]
    fn two_factor_lattice_unsupported() {
        let md = DriverModel { sigma_phi: 0.1, rho: 0.5, ..DriverModel::gbm(1.0, 0.02, 0.2, 1.0, 0.2) };
        let t = horizon(0.2, 1e-4, 40);
        assert!(matches!(build_lattice(&md, 0.5, t, LatticeConfig::default()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn constant_residual_is_deterministic_zero() {
        let md = DriverModel::constant(1.0, 1.0, 0.1);
        let t = horizon(0.1, 1e-10, 400);
        let sc = simulate(&md, t, 3, 1).unwrap();
        let sig = SignalPath::from_model(&SignalModel::Constant { ell: 100.0 }, &sc, 0.0).unwrap();
        let rep = residual_check(&sig, &sc, 0.5, 0.1, 0.0, 0.0, &[StoppingRule::Zero]).unwrap();
        assert!(rep[0].residual.mean.abs() < 1e-6);
        assert_eq!(rep[0].residual.stderr, 0.0);
    }

    #[test]
    fn running_sup_is_prefix_max() {
        let t = TimeGrid::new(1.0, 4).unwrap();
        let z = running_sup(&[1.0, 3.0, 2.0, 5.0, 4.0], &t, 0.0);
        assert_eq!(z, vec![1.0, 3.0, 3.0, 5.0, 5.0]);
    }
}
