//! Running profit `Π(z, k) = (1-α)^{-1} z^α <1, k^{1-α}>`, its gradient,
//! and Monte Carlo estimates of the net-profit functional.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlPath, ControlPolicy, CONE_TOL};
use crate::drivers::{simulate, DriverKind, DriverModel, ScenarioSet};
use crate::error::{Error, Result};
use crate::grid::{DualField, Field, SpatialGrid, EPS_POS};
use crate::semigroup::{OperatorSpec, Propagator};
use crate::stats::{Estimate, Verdict};
use crate::time::TimeGrid;

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub op: Arc<OperatorSpec>,
    pub y: Field,
    pub alpha: f64,
    pub model: DriverModel,
    pub time: TimeGrid,
    pub n_scenarios: usize,
    pub seed: u64,
}

impl ProblemSpec {
    /// Validates the data and copies the declared eigenvalues of `op` into
    /// the driver model.
    pub fn new(
        op: Arc<OperatorSpec>,
        y: Field,
        alpha: f64,
        mut model: DriverModel,
        time: TimeGrid,
        n_scenarios: usize,
        seed: u64,
    ) -> Result<Self> {
        if !y.is_nonneg() {
            return Err(Error::NotInCone(y.min_value()));
        }
        if y.len() != op.grid().len() {
            return Err(Error::GridMismatch);
        }
        model.lambda0 = op.lambda0().unwrap_or(0.0);
        model.lambda0_star = op.lambda0_star().unwrap_or(0.0);
        model.validate(alpha)?;
        if n_scenarios == 0 {
            return Err(Error::InvalidParameter("need at least one scenario".into()));
        }
        Ok(Self { op, y, alpha, model, time, n_scenarios, seed })
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        self.op.grid()
    }
    pub fn r(&self) -> f64 {
        self.model.r
    }
    pub fn lambda0(&self) -> f64 {
        self.model.lambda0
    }
    pub fn lambda0_star(&self) -> f64 {
        self.model.lambda0_star
    }

    pub fn simulate(&self) -> Result<ScenarioSet> {
        simulate(&self.model, self.time, self.n_scenarios, self.seed)
    }

    pub fn simulate_with(&self, n: usize, seed: u64) -> Result<ScenarioSet> {
        simulate(&self.model, self.time, n, seed)
    }

    /// One-step propagator and discount weights shared by all paths.
    pub fn dynamics(&self) -> Result<Dynamics> {
        Ok(Dynamics {
            step: self.op.propagator(self.time.dt())?,
            q: self.time.discount_weights(self.r()),
            disc: (0..self.time.len()).map(|i| (-self.r() * self.time.time(i)).exp()).collect(),
            time: self.time,
            weights: self.grid().weights().to_vec(),
        })
    }
}

/// `(1-α)^{-1} z^α <1, k^{1-α}>`.
pub fn profit(z: f64, k: &Field, alpha: f64) -> Result<f64> {
    if !k.is_nonneg() {
        return Err(Error::Domain(format!("profit of negative capacity {:e}", k.min_value())));
    }
    Ok(profit_slice(z, k.values(), k.grid().weights(), alpha))
}

fn profit_slice(z: f64, k: &[f64], w: &[f64], alpha: f64) -> f64 {
    let s: f64 = k.iter().zip(w).map(|(k, w)| k.max(0.0).powf(1.0 - alpha) * w).sum();
    z.powf(alpha) * s / (1.0 - alpha)
}

/// `∇Π = z^α k^{-α}`, defined for `k > EPS_POS`.
pub fn gradient_profit(z: f64, k: &Field, alpha: f64) -> Result<DualField> {
    if let Some((i, v)) = k.values().iter().enumerate().find(|(_, &v)| v <= EPS_POS) {
        return Err(Error::Domain(format!("profit gradient at capacity {v:e} (node {i})")));
    }
    let za = z.powf(alpha);
    Ok(DualField::new(k.grid().clone(), k.values().iter().map(|v| za * v.powf(-alpha)).collect())
        .expect("same shape"))
}

/// Time-stepping of `Y` on the driver grid: `Y_{i+1} = e^{dt A} Y_i + Δ_{i+1}`.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub step: Propagator,
    /// `q_i = ∫_{t_i}^{t_{i+1}} e^{-rt} dt`.
    pub q: Vec<f64>,
    /// `e^{-r t_i}` at every node.
    pub disc: Vec<f64>,
    pub time: TimeGrid,
    pub weights: Vec<f64>,
}

impl Dynamics {
    /// Grid index of every atom.
    pub fn atom_indices(&self, nu: &ControlPath) -> Result<Vec<usize>> {
        nu.atoms().iter().map(|a| self.time.index_of(a.time)).collect()
    }

    /// Calls `visit(i, Y_i)` for `i = 0..M` (inclusive), `Y` right-continuous.
    pub fn evolve(&self, y: &[f64], nu: &ControlPath, mut visit: impl FnMut(usize, &[f64]) -> Result<()>) -> Result<()> {
        let idx = self.atom_indices(nu)?;
        let mut state = y.to_vec();
        let mut next = vec![0.0; y.len()];
        let mut k = 0;
        for i in 0..self.time.len() {
            if i > 0 {
                self.step.apply_into(&state, &mut next);
                std::mem::swap(&mut state, &mut next);
            }
            while k < idx.len() && idx[k] == i {
                for (s, d) in state.iter_mut().zip(nu.atoms()[k].increment.values()) {
                    *s += d;
                }
                k += 1;
            }
            visit(i, &state)?;
        }
        Ok(())
    }

    /// Profit and cost parts of the discounted net profit along one path.
    pub fn path_value(&self, y: &[f64], z: &[f64], phi: &[f64], alpha: f64, nu: &ControlPath) -> Result<PathValue> {
        let m = self.time.steps;
        let mut profit = 0.0;
        self.evolve(y, nu, |i, state| {
            if i < m {
                let scale = state.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if let Some(v) = state.iter().find(|&&v| v < -CONE_TOL * (1.0 + scale)) {
                    return Err(Error::Domain(format!("capacity left the cone: {v:e}")));
                }
                profit += self.q[i] * profit_slice(z[i], state, &self.weights, alpha);
            }
            Ok(())
        })?;
        let mut cost = 0.0;
        for (a, i) in nu.atoms().iter().zip(self.atom_indices(nu)?) {
            cost += self.disc[i] * phi[i] * a.increment.integral();
        }
        Ok(PathValue { profit, cost })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathValue {
    pub profit: f64,
    pub cost: f64,
}

impl PathValue {
    pub fn net(&self) -> f64 {
        self.profit - self.cost
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffReport {
    pub value: Estimate,
    pub profit: Estimate,
    pub cost: Estimate,
    /// Every cost term is a finite sum, hence finite: the admissibility
    /// surrogate for finitely many atoms.
    pub admissible: bool,
    #[serde(skip)]
    pub samples: Vec<PathValue>,
}

impl PayoffReport {
    pub fn nets(&self) -> Vec<f64> {
        self.samples.iter().map(PathValue::net).collect()
    }

    /// Standard error of the paired difference `self - other` (common
    /// random numbers).
    pub fn paired_stderr(&self, other: &PayoffReport) -> f64 {
        let d: Vec<f64> = self.samples.iter().zip(&other.samples).map(|(a, b)| a.net() - b.net()).collect();
        Estimate::from_samples(&d).stderr
    }
}

/// Monte Carlo estimate of `J(y, ν)` over the scenario set, one control per
/// scenario from `policy`.
pub fn payoff_estimate(ps: &ProblemSpec, scenarios: &ScenarioSet, policy: &dyn ControlPolicy) -> Result<PayoffReport> {
    let dyn_ = ps.dynamics()?;
    let samples = (0..scenarios.len())
        .into_par_iter()
        .map(|s| {
            let nu = policy.control(scenarios, s)?;
            dyn_.path_value(ps.y.values(), scenarios.z_path(s), scenarios.phi_path(s), ps.alpha, &nu)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from(samples))
}

pub fn report_from(samples: Vec<PathValue>) -> PayoffReport {
    let nets: Vec<f64> = samples.iter().map(PathValue::net).collect();
    let profits: Vec<f64> = samples.iter().map(|v| v.profit).collect();
    let costs: Vec<f64> = samples.iter().map(|v| v.cost).collect();
    PayoffReport {
        value: Estimate::from_samples(&nets),
        profit: Estimate::from_samples(&profits),
        cost: Estimate::from_samples(&costs),
        admissible: costs.iter().all(|c| c.is_finite()),
        samples,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundItem {
    pub mean: f64,
    pub stderr: f64,
    pub limit: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueBoundReport {
    pub verdict: Verdict,
    pub reason: String,
    pub m: Option<f64>,
    pub epsilon: Option<f64>,
    pub kappa_epsilon: Option<f64>,
    pub c1: Option<f64>,
    pub c: Option<f64>,
    /// `C (1 + <1, y>)`.
    pub bound: Option<f64>,
    pub items: Vec<BoundItem>,
}

/// Upper bound `J <= C (1 + <1, y>)` with constants from the constructive
/// argument, `ε = 1/(2m)`.
///
/// With `E[∫_s^∞ e^{-(r-λ0*)t} z^α dt | F_s] = K e^{-(r-λ0*)s} z_s^α` for
/// exponential Lévy `z`, the conditional bound holds with `m = K sup η`,
/// which is finite only when `η = z^α/φ` is pathwise bounded.
pub fn value_bound_check(ps: &ProblemSpec, estimates: &[Estimate]) -> ValueBoundReport {
    let skipped = |reason: &str| ValueBoundReport {
        verdict: Verdict::Skipped,
        reason: reason.to_string(),
        m: None,
        epsilon: None,
        kappa_epsilon: None,
        c1: None,
        c: None,
        bound: None,
        items: Vec::new(),
    };
    let md = &ps.model;
    let a = ps.alpha;
    let psi = md.psi_z(a);
    let rate_star = md.r - md.lambda0_star;
    if !(psi < md.r && psi < rate_star) {
        return skipped("integrability of z^alpha fails");
    }
    let eta0 = if md.z0 > 0.0 { md.z0.powf(a) / md.phi0 } else { 0.0 };
    let sup_eta = match md.kind {
        DriverKind::Constant => eta0,
        _ => {
            let (mu, var, jumps) = md.log_eta(a);
            if jumps || var > 1e-14 || mu > 0.0 {
                return skipped("eta = z^alpha/phi is not pathwise bounded; conditional bound unverifiable");
            }
            eta0
        }
    };
    let k_star = 1.0 / (rate_star - psi);
    let m = k_star * sup_eta;
    if !(m > 0.0) {
        // z ≡ 0: no profit, J <= 0.
        let items = bound_items(estimates, 0.0);
        let ok = items.iter().all(|i| i.pass);
        return ValueBoundReport {
            verdict: Verdict::from_bool(ok),
            reason: "zero profit".into(),
            m: Some(0.0),
            epsilon: None,
            kappa_epsilon: None,
            c1: Some(0.0),
            c: Some(0.0),
            bound: Some(0.0),
            items,
        };
    }
    let eps = 1.0 / (2.0 * m);
    let kappa = eps.powf(-(1.0 - a) / a) * a / (1.0 - a);
    let z_a = md.z0.powf(a);
    let c1 = ps.grid().total_mass() * z_a / (md.r - psi);
    let c2_rate = z_a / (rate_star - psi);
    let c = (kappa * c1).max(eps * c2_rate);
    let bound = c * (1.0 + ps.y.integral());
    let items = bound_items(estimates, bound);
    let ok = items.iter().all(|i| i.pass);
    ValueBoundReport {
        verdict: Verdict::from_bool(ok),
        reason: "conditional bound holds with m = K sup eta".into(),
        m: Some(m),
        epsilon: Some(eps),
        kappa_epsilon: Some(kappa),
        c1: Some(c1),
        c: Some(c),
        bound: Some(bound),
        items,
    }
}

fn bound_items(estimates: &[Estimate], bound: f64) -> Vec<BoundItem> {
    estimates
        .iter()
        .map(|e| {
            let limit = bound + 3.0 * e.stderr;
            BoundItem { mean: e.mean, stderr: e.stderr, limit, pass: e.mean <= limit }
        })
        .collect()
}
