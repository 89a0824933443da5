//! Monte Carlo check of the first-order conditions at a candidate control.
//!
//! Along a path the marginal value of one unit of capacity added at grid
//! time `k` is `G_k = Σ_{i>=k} q_i (P*)^{i-k} ∇Π(z_i, Y_i)`, computed
//! backward as `G_k = q_k ∇Π_k + P*_dt G_{k+1}`. The conditional expectation
//! `E[G_k | F_k]` is regressed on the Markov state at `k` and
//! `Ψ_k = E[G_k | F_k] - e^{-r t_k} φ_k 1`.
//!
//! Pairings `E Σ <Ψ_k, Δ_k>` are reported with the regression value and the
//! sample error of the pathwise integrand `G - Φ`, which has the same mean
//! for adapted controls. Every statement over all admissible controls is
//! checked on a finite sample only.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{Atom, ControlPath, ControlPolicy};
use crate::drivers::{PathRng, ScenarioSet};
use crate::error::{Error, Result};
use crate::grid::{DualField, Field, SpatialGrid, EPS_POS};
use crate::payoff::{payoff_estimate, Dynamics, PathValue, ProblemSpec};
use crate::policy::{CapacityPolicy, Perturbation, PerturbedPolicy};
use crate::semigroup::Propagator;
use crate::stats::{Estimate, Verdict};
use crate::time::TimeGrid;

/// Printed on every report line.
pub const SURROGATE_NOTE: &str = "sampled surrogate: finitely many controls, scenarios and grid points";

/// Scenarios per deterministic work unit.
const CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocConfig {
    pub degree: usize,
    /// Design condition number above which a slice is estimated by nested
    /// simulation instead.
    pub cond_max: f64,
    pub n_inner: usize,
    pub concordance_outer: usize,
    pub concordance_times: Vec<f64>,
    pub k_sigma: f64,
    /// Absolute slack `rel_tol (1 + E[cost of the control])`.
    pub rel_tol: f64,
    pub n_random: usize,
    /// The sign check tolerates this share of points above the band, since
    /// `Ψ = 0` on the investment region and the band is pointwise.
    pub sign_max_share: f64,
    /// and no point more than this far above it, relative to `Φ`.
    pub sign_max_excess: f64,
    pub battery_seed: u64,
    pub nested_seed: u64,
}

impl Default for FocConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            cond_max: 1e10,
            n_inner: 200,
            concordance_outer: 12,
            concordance_times: vec![0.0, 0.5, 2.0],
            k_sigma: 3.0,
            rel_tol: 1e-6,
            n_random: 10,
            sign_max_share: 0.01,
            sign_max_excess: 0.05,
            battery_seed: 11,
            nested_seed: 0x5eed,
        }
    }
}

/// The control whose `Ψ` is estimated.
#[derive(Clone, Copy)]
pub enum Candidate<'a> {
    /// A base-capacity policy; nested continuation is available when it
    /// carries its signal model.
    Capacity(&'a CapacityPolicy),
    Fixed(&'a dyn ControlPolicy),
}

impl Candidate<'_> {
    fn nu(&self, sc: &ScenarioSet, s: usize) -> Result<ControlPath> {
        match self {
            Candidate::Capacity(p) => p.nu(s),
            Candidate::Fixed(p) => p.control(sc, s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Regression,
    Nested,
}

/// Standardized monomials of total degree `<= d` in the non-degenerate
/// coordinates of `(log z, log φ, log level - log base level)`.
#[derive(Debug, Clone)]
struct Basis {
    mean: [f64; 3],
    sd: [f64; 3],
    exps: Vec<[u8; 3]>,
}

impl Basis {
    fn fit(rows: &[[f64; 3]], degree: usize) -> Self {
        let n = rows.len() as f64;
        let mut mean = [0.0; 3];
        let mut sd = [0.0; 3];
        for v in 0..3 {
            mean[v] = rows.iter().map(|r| r[v]).sum::<f64>() / n;
            sd[v] = (rows.iter().map(|r| (r[v] - mean[v]).powi(2)).sum::<f64>() / n).sqrt();
        }
        let active: Vec<bool> = (0..3).map(|v| sd[v] > 1e-10 * (1.0 + mean[v].abs())).collect();
        let d = degree as u8;
        let mut exps = Vec::new();
        for a in 0..=d {
            for b in 0..=d - a {
                for c in 0..=d - a - b {
                    let e = [a, b, c];
                    if (0..3).all(|v| e[v] == 0 || active[v]) {
                        exps.push(e);
                    }
                }
            }
        }
        exps.sort_by_key(|e| (e.iter().sum::<u8>(), std::cmp::Reverse(*e)));
        Self { mean, sd, exps }
    }

    fn len(&self) -> usize {
        self.exps.len()
    }

    fn eval(&self, v: [f64; 3], out: &mut [f64]) {
        let mut u = [0.0; 3];
        for k in 0..3 {
            u[k] = if self.sd[k] > 0.0 { (v[k] - self.mean[k]) / self.sd[k] } else { 0.0 };
        }
        for (o, e) in out.iter_mut().zip(&self.exps) {
            *o = u[0].powi(e[0] as i32) * u[1].powi(e[1] as i32) * u[2].powi(e[2] as i32);
        }
    }
}

#[derive(Debug, Clone)]
pub struct PsiSlice {
    pub index: usize,
    pub estimator: Estimator,
    /// Condition number of the standardized design.
    pub cond: f64,
    pub terms: usize,
    /// Residual standard deviation per node.
    pub resid_sd: Vec<f64>,
    basis: Basis,
    coef: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    /// Nested means and their standard errors, scenario-major.
    nested: Option<(Vec<f64>, Vec<f64>)>,
}

/// `Ψ` at every grid time `k < M` as a fitted function of the state, plus
/// the state features of the estimation sample.
#[derive(Debug, Clone)]
pub struct PsiEstimate {
    pub time: TimeGrid,
    pub slices: Vec<PsiSlice>,
    pub fallbacks: usize,
    pub max_cond: f64,
    grid: Arc<SpatialGrid>,
    disc: Vec<f64>,
    /// State features per scenario and `k < M`.
    features: Vec<[f64; 3]>,
    n: usize,
}

fn log_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        0.0
    }
}

/// Forward states `Y_i`, `i < M`, flattened, and the control.
fn candidate_states(dyn_: &Dynamics, y: &[f64], nu: &ControlPath) -> Result<Vec<f64>> {
    let m = dyn_.time.steps;
    let n = y.len();
    let mut out = vec![0.0; m * n];
    dyn_.evolve(y, nu, |i, state| {
        if i < m {
            if let Some(v) = state.iter().find(|&&v| v <= EPS_POS) {
                return Err(Error::Domain(format!("candidate capacity {v:e} at step {i} is outside the gradient domain")));
            }
            out[i * n..(i + 1) * n].copy_from_slice(state);
        }
        Ok(())
    })?;
    Ok(out)
}

/// `G_k` for `k < M`, flattened.
fn backward_g(dyn_: &Dynamics, adj: &Propagator, z: &[f64], states: &[f64], alpha: f64, from: usize) -> Vec<f64> {
    let m = dyn_.time.steps;
    let n = dyn_.weights.len();
    let mut g = vec![0.0; m * n];
    let mut next = vec![0.0; n];
    let mut carried = vec![0.0; n];
    for k in (from..m).rev() {
        adj.apply_into(&next, &mut carried);
        let za = z[k].powf(alpha);
        let row = &mut g[k * n..(k + 1) * n];
        for j in 0..n {
            row[j] = dyn_.q[k] * za * states[k * n + j].powf(-alpha) + carried[j];
        }
        next.copy_from_slice(row);
    }
    g
}

/// `log (c ℓ_k(z, φ))` when the candidate knows its signal rule: the state
/// feature is then the log gap between capacity and base capacity, which
/// vanishes at times of investment.
fn base_level(cand: Candidate, k: usize, z: f64, phi: f64) -> f64 {
    match cand {
        Candidate::Capacity(p) => match p.model() {
            Some(m) => (p.scale() * m.ell_at(k, z, phi)).ln(),
            None => 0.0,
        },
        Candidate::Fixed(_) => 0.0,
    }
}

fn level(state: &[f64], w: &[f64], mass: f64) -> f64 {
    state.iter().zip(w).map(|(v, w)| v * w).sum::<f64>() / mass
}

struct Acc {
    gram: Vec<DMatrix<f64>>,
    xtg: Vec<DMatrix<f64>>,
    g2: Vec<Vec<f64>>,
}

impl Acc {
    fn new(bases: &[Basis], nodes: usize) -> Self {
        Self {
            gram: bases.iter().map(|b| DMatrix::zeros(b.len(), b.len())).collect(),
            xtg: bases.iter().map(|b| DMatrix::zeros(b.len(), nodes)).collect(),
            g2: bases.iter().map(|_| vec![0.0; nodes]).collect(),
        }
    }

    fn merge(mut self, o: Acc) -> Acc {
        for k in 0..self.gram.len() {
            self.gram[k] += &o.gram[k];
            self.xtg[k] += &o.xtg[k];
            for (a, b) in self.g2[k].iter_mut().zip(&o.g2[k]) {
                *a += b;
            }
        }
        self
    }
}

/// Regression estimate of `Ψ` along the candidate's state paths, with
/// nested simulation for slices whose design is ill-conditioned.
pub fn estimate_psi(ps: &ProblemSpec, sc: &ScenarioSet, cand: Candidate, cfg: &FocConfig) -> Result<PsiEstimate> {
    let dyn_ = ps.dynamics()?;
    let adj = dyn_.step.adjoint();
    let m = ps.time.steps;
    let nodes = ps.grid().len();
    let mass = ps.grid().total_mass();
    let n = sc.len();
    if n == 0 {
        return Err(Error::InvalidParameter("no scenarios".into()));
    }
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|a| (a, (a + CHUNK).min(n))).collect();

    // Pass 1: state features.
    let feats: Vec<Vec<[f64; 3]>> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let mut out = Vec::with_capacity((b - a) * m);
            for s in a..b {
                let nu = cand.nu(sc, s)?;
                let st = candidate_states(&dyn_, ps.y.values(), &nu)?;
                let (z, phi) = (sc.z_path(s), sc.phi_path(s));
                for k in 0..m {
                    let lv = level(&st[k * nodes..(k + 1) * nodes], &dyn_.weights, mass).ln();
                    out.push([log_or_zero(z[k]), phi[k].ln(), lv - base_level(cand, k, z[k], phi[k])]);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let features: Vec<[f64; 3]> = feats.into_iter().flatten().collect();
    let bases: Vec<Basis> = (0..m)
        .map(|k| {
            let rows: Vec<[f64; 3]> = (0..n).map(|s| features[s * m + k]).collect();
            Basis::fit(&rows, cfg.degree)
        })
        .collect();

    // Pass 2: normal equations.
    let parts: Vec<Acc> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let mut acc = Acc::new(&bases, nodes);
            let mut x = [0.0; 20];
            for s in a..b {
                let nu = cand.nu(sc, s)?;
                let st = candidate_states(&dyn_, ps.y.values(), &nu)?;
                let g = backward_g(&dyn_, &adj, sc.z_path(s), &st, ps.alpha, 0);
                for k in 0..m {
                    let p = bases[k].len();
                    bases[k].eval(features[s * m + k], &mut x[..p]);
                    let gk = &g[k * nodes..(k + 1) * nodes];
                    for i in 0..p {
                        for j in 0..p {
                            acc.gram[k][(i, j)] += x[i] * x[j];
                        }
                        for (j, v) in gk.iter().enumerate() {
                            acc.xtg[k][(i, j)] += x[i] * v;
                        }
                    }
                    for (a2, v) in acc.g2[k].iter_mut().zip(gk) {
                        *a2 += v * v;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = parts.into_iter();
    let acc = it.next().expect("at least one chunk");
    let acc = it.fold(acc, Acc::merge);

    let mut slices = Vec::with_capacity(m);
    let mut fallbacks = 0;
    let mut max_cond = 0.0f64;
    for (k, mut basis) in bases.into_iter().enumerate() {
        let keep = independent_terms(&acc.gram[k]);
        basis.exps = keep.iter().map(|&i| basis.exps[i]).collect();
        let p = basis.len();
        let gram = acc.gram[k].select_rows(&keep).select_columns(&keep);
        let xtg = acc.xtg[k].select_rows(&keep);
        let eig = SymmetricEigen::new(gram.clone());
        let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        let cond = if lo > 0.0 { (hi / lo).sqrt() } else { f64::INFINITY };
        max_cond = max_cond.max(cond);
        if cond > cfg.cond_max || n <= p {
            fallbacks += 1;
            let Candidate::Capacity(cap) = cand else {
                return Err(Error::Solver(format!(
                    "regression at step {k} is ill-conditioned (cond {cond:.3e}) and the candidate has no continuation"
                )));
            };
            let rows = (0..n)
                .into_par_iter()
                .map(|s| nested_g(ps, &dyn_, &adj, sc, cap, s, k, cfg))
                .collect::<Result<Vec<_>>>()?;
            let mut mean = Vec::with_capacity(n * nodes);
            let mut se = Vec::with_capacity(n * nodes);
            for (a, b) in rows {
                mean.extend(a);
                se.extend(b);
            }
            slices.push(PsiSlice {
                index: k,
                estimator: Estimator::Nested,
                cond,
                terms: 0,
                resid_sd: vec![f64::NAN; nodes],
                basis,
                coef: DMatrix::zeros(0, nodes),
                gram_inv: DMatrix::zeros(0, 0),
                nested: Some((mean, se)),
            });
            continue;
        }
        let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
        let gram_inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
        let coef = &gram_inv * &xtg;
        let fit = coef.transpose() * &xtg;
        let resid_sd = (0..nodes)
            .map(|j| ((acc.g2[k][j] - fit[(j, j)]).max(0.0) / (n - p).max(1) as f64).sqrt())
            .collect();
        slices.push(PsiSlice {
            index: k,
            estimator: Estimator::Regression,
            cond,
            terms: p,
            resid_sd,
            basis,
            coef,
            gram_inv,
            nested: None,
        });
    }
    Ok(PsiEstimate {
        time: ps.time,
        slices,
        fallbacks,
        max_cond,
        grid: ps.grid().clone(),
        disc: dyn_.disc.clone(),
        features,
        n,
    })
}

/// Terms kept by an incremental Cholesky of the Gram matrix: a term whose
/// residual after projection on the earlier ones is below `1e-9` of its own
/// norm is dropped.
fn independent_terms(gram: &DMatrix<f64>) -> Vec<usize> {
    let p = gram.nrows();
    let mut keep: Vec<usize> = Vec::with_capacity(p);
    let mut l = DMatrix::<f64>::zeros(p, p);
    for t in 0..p {
        let mut row = vec![0.0; keep.len()];
        for (a, &i) in keep.iter().enumerate() {
            let mut v = gram[(t, i)];
            for b in 0..a {
                v -= row[b] * l[(a, b)];
            }
            row[a] = v / l[(a, a)];
        }
        let d = gram[(t, t)] - row.iter().map(|v| v * v).sum::<f64>();
        if d > 1e-9 * gram[(t, t)] && d > 0.0 {
            let a = keep.len();
            for (b, v) in row.iter().enumerate() {
                l[(a, b)] = *v;
            }
            l[(a, a)] = d.sqrt();
            keep.push(t);
        }
    }
    keep
}

/// Nested estimate of `E[G_k | F_k]` for scenario `s`: mean and standard
/// error per node over `n_inner` continuations of the capacity policy.
#[allow(clippy::too_many_arguments)]
fn nested_g(
    ps: &ProblemSpec,
    dyn_: &Dynamics,
    adj: &Propagator,
    sc: &ScenarioSet,
    cap: &CapacityPolicy,
    s: usize,
    k: usize,
    cfg: &FocConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let model = cap
        .model()
        .ok_or_else(|| Error::Unsupported("nested estimate needs the signal model of the candidate".into()))?;
    let m = ps.time.steps;
    let nodes = ps.grid().len();
    let nu = cap.nu(s)?;
    let outer = candidate_states(dyn_, ps.y.values(), &nu)?;
    let (z0, phi0) = (sc.z_path(s)[k], sc.phi_path(s)[k]);
    let len = m - k + 1;
    let mut z = vec![0.0; m + 1];
    let mut phi = vec![0.0; m + 1];
    let mut st = outer.clone();
    let mut sum = vec![0.0; nodes];
    let mut sum2 = vec![0.0; nodes];
    let dt = ps.time.dt();
    let c = cap.scale();
    let l0 = cap.lambda0();
    for j in 0..cfg.n_inner {
        let stream = ((s * (m + 1) + k) * cfg.n_inner + j) as u64;
        let mut rng = PathRng::new(cfg.nested_seed, stream);
        ps.model.fill_path(dt, z0, phi0, &mut rng, &mut z[k..k + len], &mut phi[k..k + len]);
        let mut top = cap.level(s, k);
        let mut y = outer[k * nodes..(k + 1) * nodes].to_vec();
        let mut nxt = vec![0.0; nodes];
        for i in k + 1..m {
            let t = ps.time.time(i);
            dyn_.step.apply_into(&y, &mut nxt);
            let cand = c * (-l0 * t).exp() * model.ell_at(i, z[i], phi[i]);
            if cand > top {
                let add = (l0 * t).exp() * (cand - top);
                nxt.iter_mut().for_each(|v| *v += add);
                top = cand;
            }
            std::mem::swap(&mut y, &mut nxt);
            st[i * nodes..(i + 1) * nodes].copy_from_slice(&y);
        }
        let g = backward_g(dyn_, adj, &z, &st, ps.alpha, k);
        for (q, v) in g[k * nodes..(k + 1) * nodes].iter().enumerate() {
            sum[q] += v;
            sum2[q] += v * v;
        }
    }
    let ni = cfg.n_inner as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / ni).collect();
    let se = sum2
        .iter()
        .zip(&mean)
        .map(|(v, mu)| ((v / ni - mu * mu).max(0.0) / (ni - 1.0).max(1.0)).sqrt())
        .collect();
    Ok((mean, se))
}

impl PsiEstimate {
    fn feature(&self, s: usize, k: usize) -> [f64; 3] {
        self.features[s * self.time.steps + k]
    }

    /// `E[G_k | F_k]` and its standard error per node for scenario `s` of
    /// the estimation sample (zero at `k = M`).
    pub fn g_hat(&self, s: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
        let nodes = self.grid.len();
        if k >= self.time.steps {
            return (vec![0.0; nodes], vec![0.0; nodes]);
        }
        let sl = &self.slices[k];
        if let Some((mean, se)) = &sl.nested {
            return (mean[s * nodes..(s + 1) * nodes].to_vec(), se[s * nodes..(s + 1) * nodes].to_vec());
        }
        let mut x = vec![0.0; sl.terms];
        sl.basis.eval(self.feature(s, k), &mut x);
        let xv = nalgebra::DVector::from_vec(x);
        let h = (xv.transpose() * &sl.gram_inv * &xv)[(0, 0)].max(0.0).sqrt();
        let g = sl.coef.transpose() * &xv;
        (g.iter().copied().collect(), sl.resid_sd.iter().map(|r| r * h).collect())
    }

    /// `Ψ_k` for scenario `s` given its `φ_k`.
    pub fn psi(&self, s: usize, k: usize, phi_k: f64) -> DualField {
        let (g, _) = self.g_hat(s, k);
        let c = self.disc[k] * phi_k;
        DualField::new(self.grid.clone(), g.into_iter().map(|v| v - c).collect()).expect("grid shape")
    }

    pub fn len(&self) -> usize {
        self.n
    }
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Long-format `time,node,x,psi_mean,psi_min,psi_max,estimator,cond`
    /// over the estimation sample at every `stride`-th grid time.
    pub fn write_csv<W: std::io::Write>(&self, out: W, sc: &ScenarioSet, stride: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "node", "x", "psi_mean", "psi_min", "psi_max", "estimator", "cond"])?;
        let nodes = self.grid.len();
        for k in (0..self.time.steps).step_by(stride.max(1)) {
            let mut sum = vec![0.0; nodes];
            let mut lo = vec![f64::INFINITY; nodes];
            let mut hi = vec![f64::NEG_INFINITY; nodes];
            for s in 0..self.n {
                let p = self.psi(s, k, sc.phi_path(s)[k]);
                for (j, v) in p.values().iter().enumerate() {
                    sum[j] += v;
                    lo[j] = lo[j].min(*v);
                    hi[j] = hi[j].max(*v);
                }
            }
            let sl = &self.slices[k];
            let est = match sl.estimator {
                Estimator::Regression => "regression",
                Estimator::Nested => "nested",
            };
            for j in 0..nodes {
                w.write_record([
                    self.time.time(k).to_string(),
                    j.to_string(),
                    self.grid.nodes()[j].to_string(),
                    (sum[j] / self.n as f64).to_string(),
                    lo[j].to_string(),
                    hi[j].to_string(),
                    est.to_string(),
                    sl.cond.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-scenario pairings of one control with `Ψ`.
#[derive(Debug, Clone, Default)]
struct PairingSamples {
    regression: Vec<f64>,
    pathwise: Vec<f64>,
    initial: Vec<f64>,
    cost: Vec<f64>,
}

/// `E Σ <Ψ_k, Δ_k>` for one control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingItem {
    pub name: String,
    /// Regression value.
    pub value: f64,
    /// Sample error of the pathwise pairing.
    pub stderr: f64,
    pub pathwise: Estimate,
    /// Contribution of atoms at `t = 0`.
    pub initial: Estimate,
    /// Expected discounted cost of the control.
    pub cost: f64,
    pub tol: f64,
    pub pass: bool,
    pub note: String,
}

/// Evaluates all `controls` against `Ψ` and the candidate's pathwise
/// integrand in one sweep over the scenarios.
fn pairings(
    psi: &PsiEstimate,
    ps: &ProblemSpec,
    sc: &ScenarioSet,
    cand: Candidate,
    controls: &[&dyn ControlPolicy],
) -> Result<Vec<PairingSamples>> {
    let dyn_ = ps.dynamics()?;
    let adj = dyn_.step.adjoint();
    let m = ps.time.steps;
    let nodes = ps.grid().len();
    let w = dyn_.weights.clone();
    let n = sc.len();
    if psi.len() != n {
        return Err(Error::ShapeMismatch { expected: psi.len(), got: n });
    }
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|a| (a, (a + CHUNK).min(n))).collect();
    let parts = chunks
        .par_iter()
        .map(|&(a, b)| {
            let mut rows = Vec::with_capacity(b - a);
            for s in a..b {
                let nu = cand.nu(sc, s)?;
                let st = candidate_states(&dyn_, ps.y.values(), &nu)?;
                let g = backward_g(&dyn_, &adj, sc.z_path(s), &st, ps.alpha, 0);
                let phi = sc.phi_path(s);
                let mut row = Vec::with_capacity(controls.len());
                for c in controls {
                    let nu = c.control(sc, s)?;
                    let (mut reg, mut path, mut init, mut cost) = (0.0, 0.0, 0.0, 0.0);
                    for atom in nu.atoms() {
                        let k = ps.time.index_of(atom.time)?;
                        let phik = dyn_.disc[k] * phi[k];
                        let (gh, _) = psi.g_hat(s, k);
                        let d = atom.increment.values();
                        let mut rv = 0.0;
                        let mut pv = 0.0;
                        let mut cv = 0.0;
                        for j in 0..nodes {
                            let gk = if k < m { g[k * nodes + j] } else { 0.0 };
                            rv += (gh[j] - phik) * d[j] * w[j];
                            pv += (gk - phik) * d[j] * w[j];
                            cv += phik * d[j] * w[j];
                        }
                        reg += rv;
                        path += pv;
                        cost += cv;
                        if k == 0 {
                            init += rv;
                        }
                    }
                    row.push((reg, path, init, cost));
                }
                rows.push(row);
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![PairingSamples::default(); controls.len()];
    for row in parts.into_iter().flatten() {
        for (o, (r, p, i, c)) in out.iter_mut().zip(row) {
            o.regression.push(r);
            o.pathwise.push(p);
            o.initial.push(i);
            o.cost.push(c);
        }
    }
    Ok(out)
}

fn item(name: String, smp: &PairingSamples, cfg: &FocConfig, two_sided: bool) -> PairingItem {
    let reg = Estimate::from_samples(&smp.regression);
    let path = Estimate::from_samples(&smp.pathwise);
    let cost = Estimate::from_samples(&smp.cost).mean;
    let tol = cfg.rel_tol * (1.0 + cost.abs());
    let band = cfg.k_sigma * path.stderr + tol;
    let pass = if two_sided { reg.mean.abs() <= band } else { reg.mean <= band };
    PairingItem {
        name,
        value: reg.mean,
        stderr: path.stderr,
        pathwise: path,
        initial: Estimate::from_samples(&smp.initial),
        cost,
        tol,
        pass,
        note: SURROGATE_NOTE.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub items: Vec<PairingItem>,
    pub verdict: Verdict,
    pub note: String,
}

/// `E ∫ <Ψ, dν> <= k σ + tol` for every test control.
pub fn foc_inequality(
    psi: &PsiEstimate,
    ps: &ProblemSpec,
    sc: &ScenarioSet,
    cand: Candidate,
    tests: &[TestControl],
    cfg: &FocConfig,
) -> Result<ConditionReport> {
    let refs: Vec<&dyn ControlPolicy> = tests.iter().map(|t| t as &dyn ControlPolicy).collect();
    let smp = pairings(psi, ps, sc, cand, &refs)?;
    let items: Vec<PairingItem> = tests.iter().zip(&smp).map(|(t, s)| item(t.name.clone(), s, cfg, false)).collect();
    let verdict = Verdict::from_bool(items.iter().all(|i| i.pass));
    Ok(ConditionReport { items, verdict, note: SURROGATE_NOTE.into() })
}

/// `|E ∫ <Ψ, dν★>| <= k σ + tol` for the candidate itself; the item's
/// `initial` field carries the time-zero share.
pub fn foc_equality(
    psi: &PsiEstimate,
    ps: &ProblemSpec,
    sc: &ScenarioSet,
    cand: Candidate,
    cfg: &FocConfig,
) -> Result<ConditionReport> {
    let this: &dyn ControlPolicy = match cand {
        Candidate::Capacity(p) => p,
        Candidate::Fixed(p) => p,
    };
    let smp = pairings(psi, ps, sc, cand, &[this])?;
    let items = vec![item("candidate".into(), &smp[0], cfg, true)];
    let verdict = Verdict::from_bool(items[0].pass);
    Ok(ConditionReport { items, verdict, note: SURROGATE_NOTE.into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignReport {
    pub checked: usize,
    pub violations: usize,
    /// Largest `(Ψ - k se - tol) / Φ` over all points.
    pub worst: f64,
    pub verdict: Verdict,
    pub note: String,
}

/// `Ψ_k <= k se + tol` at every grid time, node and sample scenario, up to
/// the configured share of pointwise exceedances.
pub fn psi_sign(psi: &PsiEstimate, sc: &ScenarioSet, cfg: &FocConfig) -> SignReport {
    let m = psi.time.steps;
    let rows: Vec<(usize, f64)> = (0..psi.n)
        .into_par_iter()
        .map(|s| {
            let phi = sc.phi_path(s);
            let mut bad = 0;
            let mut worst = f64::NEG_INFINITY;
            for k in 0..m {
                let (g, se) = psi.g_hat(s, k);
                let c = psi.disc[k] * phi[k];
                for (gj, sj) in g.iter().zip(&se) {
                    let excess = (gj - c - cfg.k_sigma * sj - cfg.rel_tol * (1.0 + c)) / c;
                    worst = worst.max(excess);
                    if excess > 0.0 {
                        bad += 1;
                    }
                }
            }
            (bad, worst)
        })
        .collect();
    let violations: usize = rows.iter().map(|r| r.0).sum();
    let worst = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let checked = psi.n * m * psi.grid.len();
    let share = violations as f64 / checked.max(1) as f64;
    SignReport {
        checked,
        violations,
        worst,
        verdict: Verdict::from_bool(share <= cfg.sign_max_share && worst <= cfg.sign_max_excess),
        note: SURROGATE_NOTE.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceItem {
    pub time: f64,
    pub outer: usize,
    pub regression: f64,
    pub nested: f64,
    pub stderr: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceReport {
    pub items: Vec<ConcordanceItem>,
    pub verdict: Verdict,
    pub note: String,
}

/// Regression against nested simulation on the first `concordance_outer`
/// scenarios, node-averaged `E[G_k | F_k]` at each configured time.
pub fn concordance(
    psi: &PsiEstimate,
    ps: &ProblemSpec,
    sc: &ScenarioSet,
    cap: &CapacityPolicy,
    cfg: &FocConfig,
) -> Result<ConcordanceReport> {
    let dyn_ = ps.dynamics()?;
    let adj = dyn_.step.adjoint();
    let w = &dyn_.weights;
    let mass = ps.grid().total_mass();
    let outer = cfg.concordance_outer.min(sc.len());
    let avg = |v: &[f64]| v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / mass;
    let mut items = Vec::new();
    for &t in &cfg.concordance_times {
        let k = ps.time.ceil_index(t);
        if k >= ps.time.steps {
            continue;
        }
        let rows = (0..outer)
            .into_par_iter()
            .map(|s| {
                let (mean, se) = nested_g(ps, &dyn_, &adj, sc, cap, s, k, cfg)?;
                let (gh, gse) = psi.g_hat(s, k);
                Ok((avg(&gh), avg(&gse), avg(&mean), avg(&se)))
            })
            .collect::<Result<Vec<_>>>()?;
        let o = outer as f64;
        let reg = rows.iter().map(|r| r.0).sum::<f64>() / o;
        let nes = rows.iter().map(|r| r.2).sum::<f64>() / o;
        let se_reg = rows.iter().map(|r| r.1).sum::<f64>() / o;
        let se_nes = rows.iter().map(|r| r.3 * r.3).sum::<f64>().sqrt() / o;
        let stderr = se_reg.hypot(se_nes);
        let pass = (reg - nes).abs() <= cfg.k_sigma * stderr + cfg.rel_tol * (1.0 + nes.abs());
        items.push(ConcordanceItem { time: ps.time.time(k), outer, regression: reg, nested: nes, stderr, pass });
    }
    let verdict = Verdict::from_bool(items.iter().all(|i| i.pass));
    Ok(ConcordanceReport { items, verdict, note: SURROGATE_NOTE.into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceItem {
    pub name: String,
    pub value: Estimate,
    /// `J(candidate) - J(perturbed)`.
    pub difference: f64,
    pub pooled_stderr: f64,
    pub paired_stderr: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub candidate: Estimate,
    pub items: Vec<DominanceItem>,
    pub verdict: Verdict,
    pub note: String,
}

/// `J(candidate) >= J(perturbed) - k · pooled stderr` on common scenarios.
pub fn payoff_dominance(
    ps: &ProblemSpec,
    sc: &ScenarioSet,
    cand: &CapacityPolicy,
    perts: &[Perturbation],
    cfg: &FocConfig,
) -> Result<(DominanceReport, Vec<Vec<PathValue>>)> {
    let base = payoff_estimate(ps, sc, cand)?;
    let mut items = Vec::new();
    let mut samples = Vec::new();
    for p in perts {
        let pp = PerturbedPolicy::new(cand, *p)?;
        let rep = payoff_estimate(ps, sc, &pp)?;
        let difference = base.value.mean - rep.value.mean;
        let pooled = base.value.pooled_stderr(&rep.value);
        let paired = base.paired_stderr(&rep);
        items.push(DominanceItem {
            name: p.name(),
            value: rep.value,
            difference,
            pooled_stderr: pooled,
            paired_stderr: paired,
            pass: difference >= -cfg.k_sigma * pooled,
        });
        samples.push(rep.samples);
    }
    let verdict = Verdict::from_bool(items.iter().all(|i| i.pass));
    samples.insert(0, base.samples);
    Ok((DominanceReport { candidate: base.value, items, verdict, note: SURROGATE_NOTE.into() }, samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainItem {
    pub name: String,
    /// `E[J★ - J - ∫<Ψ, dν★ - dν>]`, nonnegative for concave `Π`.
    pub gap: Estimate,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub items: Vec<ChainItem>,
    pub verdict: Verdict,
    pub note: String,
}

/// Concavity chain `J(ν★) - J(ν) >= E ∫ <Ψ, dν★ - dν>` with the pathwise
/// integrand, for every perturbation.
pub fn sufficiency_chain(
    psi: &PsiEstimate,
    ps: &ProblemSpec,
    sc: &ScenarioSet,
    cand: &CapacityPolicy,
    perts: &[Perturbation],
    values: &[Vec<PathValue>],
    cfg: &FocConfig,
) -> Result<ChainReport> {
    let pols = perts.iter().map(|p| PerturbedPolicy::new(cand, *p)).collect::<Result<Vec<_>>>()?;
    let mut refs: Vec<&dyn ControlPolicy> = vec![cand];
    refs.extend(pols.iter().map(|p| p as &dyn ControlPolicy));
    let smp = pairings(psi, ps, sc, Candidate::Capacity(cand), &refs)?;
    if values.len() != refs.len() {
        return Err(Error::ShapeMismatch { expected: refs.len(), got: values.len() });
    }
    let mut items = Vec::new();
    for (i, p) in perts.iter().enumerate() {
        let gaps: Vec<f64> = (0..sc.len())
            .map(|s| {
                let dj = values[0][s].net() - values[i + 1][s].net();
                let dp = smp[0].pathwise[s] - smp[i + 1].pathwise[s];
                dj - dp
            })
            .collect();
        let gap = Estimate::from_samples(&gaps);
        let scale = values[0].iter().map(|v| v.profit.abs() + v.cost.abs()).sum::<f64>() / sc.len() as f64;
        let pass = gap.mean >= -cfg.k_sigma * gap.stderr - cfg.rel_tol * (1.0 + scale);
        items.push(ChainItem { name: p.name(), gap, pass });
    }
    let verdict = Verdict::from_bool(items.iter().all(|i| i.pass));
    Ok(ChainReport { items, verdict, note: SURROGATE_NOTE.into() })
}

/// Structured and random test controls for the inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestKind {
    Zero,
    /// `mass` per unit of `μ` on all of `D` at the first grid time `>= t`.
    Uniform { t: f64, mass: f64 },
    /// Density `mass` on nodes with `x / L ∈ [lo, hi)`.
    Indicator { t: f64, lo: f64, hi: f64, mass: f64 },
    /// Gaussian bump in `x / L`.
    Bump { t: f64, center: f64, width: f64, mass: f64 },
    /// Uniform atom at the first grid time where `z` crosses `factor z0`.
    Hitting { factor: f64, mass: f64 },
    /// One to three random nonnegative atoms in the first half of the
    /// horizon, the same on every path.
    Random { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct TestControl {
    pub name: String,
    pub kind: TestKind,
    grid: Arc<SpatialGrid>,
    time: TimeGrid,
    fixed: Option<ControlPath>,
}

impl TestControl {
    pub fn new(kind: TestKind, grid: &Arc<SpatialGrid>, time: TimeGrid) -> Result<Self> {
        let snap = |t: f64| time.time(time.ceil_index(t));
        let l = grid.period();
        let field = |f: &dyn Fn(f64) -> f64| Field::from_fn(grid, |x| f(x / l));
        let fixed = match &kind {
            TestKind::Zero => Some(ControlPath::zero(grid)),
            TestKind::Uniform { t, mass } => Some(ControlPath::single(grid, snap(*t), Field::constant(grid, *mass))?),
            TestKind::Indicator { t, lo, hi, mass } => Some(ControlPath::single(
                grid,
                snap(*t),
                field(&|u| if u >= *lo && u < *hi { *mass } else { 0.0 }),
            )?),
            TestKind::Bump { t, center, width, mass } => Some(ControlPath::single(
                grid,
                snap(*t),
                field(&|u| mass * (-0.5 * ((u - center) / width).powi(2)).exp()),
            )?),
            TestKind::Hitting { .. } => None,
            TestKind::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let count = rng.random_range(1..=3usize);
                let mut idx: Vec<usize> = (0..count).map(|_| rng.random_range(0..=time.steps / 2)).collect();
                idx.sort_unstable();
                idx.dedup();
                let atoms = idx
                    .into_iter()
                    .map(|i| {
                        let v = (0..grid.len())
                            .map(|_| if rng.random_bool(0.5) { rng.random::<f64>() } else { 0.0 })
                            .collect();
                        Ok(Atom { time: time.time(i), increment: Field::new(grid.clone(), v)? })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(ControlPath::new(grid, atoms)?)
            }
        };
        let name = match &kind {
            TestKind::Zero => "zero".to_string(),
            TestKind::Uniform { t, .. } => format!("uniform@{t}"),
            TestKind::Indicator { t, lo, hi, .. } => format!("indicator[{lo},{hi})@{t}"),
            TestKind::Bump { t, center, .. } => format!("bump({center})@{t}"),
            TestKind::Hitting { factor, .. } => format!("hitting({factor})"),
            TestKind::Random { seed } => format!("random#{seed}"),
        };
        Ok(Self { name, kind, grid: grid.clone(), time, fixed })
    }
}

impl ControlPolicy for TestControl {
    fn control(&self, sc: &ScenarioSet, s: usize) -> Result<ControlPath> {
        if let Some(c) = &self.fixed {
            return Ok(c.clone());
        }
        let TestKind::Hitting { factor, mass } = self.kind else { unreachable!("fixed otherwise") };
        let z = sc.z_path(s);
        let level = factor * z[0];
        let hit = z[..self.time.steps].iter().position(|&v| if factor >= 1.0 { v >= level } else { v <= level });
        match hit {
            Some(i) => ControlPath::single(&self.grid, self.time.time(i), Field::constant(&self.grid, mass)),
            None => Ok(ControlPath::zero(&self.grid)),
        }
    }
}

/// Zero, uniform atoms at several times, indicator atoms on 8 subregions at
/// `t = 0` and 4 at `t = 1`, a bump, two hitting-time atoms and
/// `n_random` random controls.
pub fn battery(grid: &Arc<SpatialGrid>, time: TimeGrid, n_random: usize, seed: u64) -> Result<Vec<TestControl>> {
    let mut kinds = vec![TestKind::Zero];
    kinds.extend([0.0, 0.5, 1.0, 2.0, 5.0].map(|t| TestKind::Uniform { t, mass: 1.0 }));
    for (t, parts) in [(0.0, 8), (1.0, 4)] {
        for i in 0..parts {
            let (lo, hi) = (i as f64 / parts as f64, (i + 1) as f64 / parts as f64);
            kinds.push(TestKind::Indicator { t, lo, hi, mass: 1.0 });
        }
    }
    kinds.push(TestKind::Bump { t: 0.0, center: 0.25, width: 0.1, mass: 1.0 });
    kinds.push(TestKind::Hitting { factor: 1.2, mass: 1.0 });
    kinds.push(TestKind::Hitting { factor: 0.8, mass: 1.0 });
    kinds.extend((0..n_random as u64).map(|i| TestKind::Random { seed: seed.wrapping_mul(1000).wrapping_add(i) }));
    kinds.into_iter().map(|k| TestControl::new(k, grid, time)).collect()
}
