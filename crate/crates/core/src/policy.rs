//! Base-capacity policies driven by the running supremum of a signal, the
//! explicit optimum of the separable group case, and its perturbations.
//!
//! In hat coordinates the policy invests `(1 c ℓ0 - y)^+` at time zero and
//! `1 Δ(c ζ)` whenever `c ζ_t = c sup_{u<=t} e^{-λ0 u} ℓ_u` rises. Since
//! `e^{tA} 1 = e^{λ0 t} 1`, a uniform hat atom maps to the uniform atom
//! `1 e^{λ0 t} Δ`.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bek::{SignalModel, SignalPath};
use crate::control::{hat_transform, mild_solution, Atom, ControlPath, ControlPolicy};
use crate::drivers::ScenarioSet;
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::payoff::ProblemSpec;
use crate::semigroup::{OperatorSpec, Propagator};
use crate::stats::{Estimate, Verdict};
use crate::time::TimeGrid;

/// Relative rise of `ζ` below which no atom is emitted.
pub const INCREASE_TOL: f64 = 1e-12;

/// Investment rule `Ŷ_t = max(y, c ℓ0) + c (ζ_t - ζ_0)`.
#[derive(Debug, Clone)]
pub struct CapacityPolicy {
    op: Arc<OperatorSpec>,
    y: Field,
    signal: Arc<SignalPath>,
    scale: f64,
    lambda0: f64,
    model: Option<SignalModel>,
}

impl CapacityPolicy {
    pub fn new(op: Arc<OperatorSpec>, y: Field, signal: Arc<SignalPath>, scale: f64) -> Result<Self> {
        if !op.is_group() {
            return Err(Error::NotAGroup(op.variant().name()));
        }
        let lambda0 = op.lambda0().ok_or(Error::MissingEigenstructure)?;
        if (lambda0 - signal.lambda0).abs() > 1e-12 * (1.0 + lambda0.abs()) {
            return Err(Error::InvalidParameter(format!(
                "signal built for lambda0={} but operator has {lambda0}",
                signal.lambda0
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidParameter(format!("signal scale must be positive, got {scale}")));
        }
        Ok(Self { op, y, signal, scale, lambda0, model: None })
    }

    /// Attaches the rule that produced the signal, enabling continuation
    /// along freshly simulated paths.
    pub fn with_model(mut self, model: SignalModel) -> Self {
        self.model = Some(model);
        self
    }

    pub fn model(&self) -> Option<&SignalModel> {
        self.model.as_ref()
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn signal(&self) -> &Arc<SignalPath> {
        &self.signal
    }
    pub fn op(&self) -> &Arc<OperatorSpec> {
        &self.op
    }
    pub fn y(&self) -> &Field {
        &self.y
    }
    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }
    pub fn time(&self) -> TimeGrid {
        self.signal.time
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        let mut p = Self::new(self.op.clone(), self.y.clone(), self.signal.clone(), self.scale * c)?;
        p.model = self.model.clone();
        Ok(p)
    }

    /// `c ζ_i` for scenario `s`.
    pub fn level(&self, s: usize, i: usize) -> f64 {
        self.scale * self.signal.zeta(s)[i]
    }

    /// Initial hat atom and the later uniform increments `(i, Δ)`.
    pub fn increments(&self, s: usize) -> (Field, Vec<(usize, f64)>) {
        let zeta = self.signal.zeta(s);
        let c0 = self.scale * zeta[0];
        let first = self.y.map(|v| (c0 - v).max(0.0));
        let mut level = c0;
        let mut later = Vec::new();
        for (i, z) in zeta.iter().enumerate().skip(1) {
            let v = self.scale * z;
            if v - level > INCREASE_TOL * v {
                later.push((i, v - level));
                level = v;
            }
        }
        (first, later)
    }

    pub fn nu_hat(&self, s: usize) -> Result<ControlPath> {
        let (first, later) = self.increments(s);
        let grid = self.op.grid();
        let time = self.time();
        let mut atoms = vec![Atom { time: 0.0, increment: first }];
        atoms.extend(later.into_iter().map(|(i, d)| Atom { time: time.time(i), increment: Field::constant(grid, d) }));
        ControlPath::new(grid, atoms)
    }

    /// `ν` with atoms `e^{t_k A} Δ̂_k`.
    pub fn nu(&self, s: usize) -> Result<ControlPath> {
        let (first, later) = self.increments(s);
        let grid = self.op.grid();
        let time = self.time();
        let mut atoms = vec![Atom { time: 0.0, increment: first }];
        atoms.extend(later.into_iter().map(|(i, d)| {
            let t = time.time(i);
            Atom { time: t, increment: Field::constant(grid, (self.lambda0 * t).exp() * d) }
        }));
        ControlPath::new(grid, atoms)
    }
}

impl ControlPolicy for CapacityPolicy {
    fn control(&self, scenarios: &ScenarioSet, s: usize) -> Result<ControlPath> {
        if scenarios.len() != self.signal.len() {
            return Err(Error::ShapeMismatch { expected: self.signal.len(), got: scenarios.len() });
        }
        self.nu(s)
    }
}

/// Discounted investment cost `E Σ <Φ*_t, Δν_t>` of a base-capacity policy
/// split into the lump sum at time zero and the later increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityCost {
    pub lump_sum: f64,
    pub later: Estimate,
    pub total: Estimate,
    /// Share of the later cost paid in the last tenth of the horizon.
    pub tail_share: f64,
    pub verdict: Verdict,
    pub hint: Option<String>,
}

fn admissibility_cost(pol: &CapacityPolicy, ps: &ProblemSpec, scenarios: &ScenarioSet) -> AdmissibilityCost {
    let time = pol.time();
    let rate = ps.r() - ps.lambda0_star();
    let mass = ps.grid().total_mass();
    let t_tail = 0.9 * time.t_max;
    let rows: Vec<(f64, f64, f64)> = (0..scenarios.len())
        .into_par_iter()
        .map(|s| {
            let (first, later) = pol.increments(s);
            let phi = scenarios.phi_path(s);
            let lump = phi[0] * first.integral();
            let (mut rest, mut tail) = (0.0, 0.0);
            for (i, d) in later {
                let t = time.time(i);
                let v = (-rate * t).exp() * phi[i] * d * mass;
                rest += v;
                if t >= t_tail {
                    tail += v;
                }
            }
            (lump, rest, tail)
        })
        .collect();
    let lumps: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let rest: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let totals: Vec<f64> = rows.iter().map(|r| r.0 + r.1).collect();
    let tail: f64 = rows.iter().map(|r| r.2).sum();
    let later = Estimate::from_samples(&rest);
    let total = Estimate::from_samples(&totals);
    let rest_sum: f64 = rest.iter().sum();
    let tail_share = if rest_sum > 0.0 { tail / rest_sum } else { 0.0 };
    let ok = total.mean.is_finite() && total.stderr.is_finite() && tail_share <= 1e-2;
    AdmissibilityCost {
        lump_sum: Estimate::from_samples(&lumps).mean,
        later,
        total,
        tail_share,
        verdict: Verdict::from_bool(ok),
        hint: (!ok).then(|| {
            format!(
                "discounted investment cost does not decay over the horizon (tail share {tail_share:.3e}); \
                 raise r above lambda0_star plus the growth rate of the profit shock"
            )
        }),
    }
}

/// The explicit optimum: a base-capacity policy with `c = 1` and
/// `y <= 1 ℓ0`, so that `Ŷ★_t = 1 ζ★_t` and `Y★_t = 1 e^{λ0 t} ζ★_t`.
#[derive(Debug, Clone)]
pub struct OptimalPolicy {
    pub policy: CapacityPolicy,
    pub ell0: f64,
    pub cost: AdmissibilityCost,
}

/// Builds `ν̂★`, `ν★` and `Y★` from the signal. Refuses initial states above
/// the base capacity `ℓ0` at any node.
pub fn build_policy(ps: &ProblemSpec, scenarios: &ScenarioSet, sig: Arc<SignalPath>) -> Result<OptimalPolicy> {
    if sig.is_empty() || sig.len() != scenarios.len() {
        return Err(Error::ShapeMismatch { expected: scenarios.len(), got: sig.len() });
    }
    let ell0 = sig.ell(0)[0];
    if let Some(s) = (1..sig.len()).find(|&s| (sig.ell(s)[0] - ell0).abs() > 1e-12 * ell0) {
        return Err(Error::Solver(format!("scenario {s} starts from a different signal value")));
    }
    let nodes: Vec<usize> = ps.y.values().iter().enumerate().filter(|(_, &v)| v > ell0).map(|(j, _)| j).collect();
    if !nodes.is_empty() {
        return Err(Error::InitialOverCapacity { nodes });
    }
    let policy = CapacityPolicy::new(ps.op.clone(), ps.y.clone(), sig, 1.0)?;
    let cost = admissibility_cost(&policy, ps, scenarios);
    Ok(OptimalPolicy { policy, ell0, cost })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub ell0: f64,
    pub method: String,
    pub scenarios: usize,
    pub mean_atoms: f64,
    pub max_atoms: usize,
    pub cost: AdmissibilityCost,
}

impl OptimalPolicy {
    pub fn with_model(mut self, model: SignalModel) -> Self {
        self.policy = self.policy.with_model(model);
        self
    }

    pub fn nu_hat(&self, s: usize) -> Result<ControlPath> {
        self.policy.nu_hat(s)
    }

    pub fn nu(&self, s: usize) -> Result<ControlPath> {
        self.policy.nu(s)
    }

    /// Closed form `Y★_t = 1 e^{λ0 t} ζ★_t`, right-continuous in `t`.
    pub fn state_at(&self, s: usize, t: f64) -> Field {
        let time = self.policy.time();
        let i = ((t / time.dt() + 1e-9).floor().max(0.0) as usize).min(time.steps);
        let v = (self.policy.lambda0 * t).exp() * self.policy.level(s, i);
        Field::constant(self.policy.op.grid(), v)
    }

    pub fn summary(&self) -> PolicySummary {
        let n = self.policy.signal.len();
        let counts: Vec<usize> = (0..n).map(|s| 1 + self.policy.increments(s).1.len()).collect();
        PolicySummary {
            ell0: self.ell0,
            method: self.policy.signal.method.clone(),
            scenarios: n,
            mean_atoms: counts.iter().sum::<usize>() as f64 / n.max(1) as f64,
            max_atoms: counts.iter().copied().max().unwrap_or(0),
            cost: self.cost.clone(),
        }
    }

    /// Long-format `scenario,time,node,x,hat_increment,increment` for the
    /// first `cap` scenarios.
    pub fn write_csv<W: Write>(&self, out: W, cap: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario", "time", "node", "x", "hat_increment", "increment"])?;
        let grid = self.policy.op.grid();
        for s in 0..self.policy.signal.len().min(cap) {
            let hat = self.nu_hat(s)?;
            let nu = self.nu(s)?;
            for (a, b) in hat.atoms().iter().zip(nu.atoms()) {
                for (j, x) in grid.nodes().iter().enumerate() {
                    w.write_record([
                        s.to_string(),
                        a.time.to_string(),
                        j.to_string(),
                        x.to_string(),
                        a.increment.values()[j].to_string(),
                        b.increment.values()[j].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStateReport {
    /// `max |ν̂★_0 - (1 ℓ0 - y)|`.
    pub initial_atom_error: f64,
    /// Largest node spread of a later hat atom.
    pub later_atom_spread: f64,
    /// Largest node spread of the recomputed state.
    pub state_spread: f64,
    /// Largest relative gap between the mild solution and the closed form.
    pub mild_rel_error: f64,
    /// `min (Y★_t - e^{tA} y)`, nonnegative for states in `S_y(t)`.
    pub cone_margin: f64,
    /// `max |hat(ν★) - ν̂★|` relative to the atom size.
    pub hat_roundtrip: f64,
    pub scenarios: usize,
    pub times: Vec<f64>,
    pub verdict: Verdict,
}

fn spread(f: &Field) -> f64 {
    f.max_value() - f.min_value()
}

/// Recomputes `Y★` by the mild solution at `times` on the first `cap`
/// scenarios and checks the structural invariants of the optimum.
pub fn verify_policy_state(pol: &OptimalPolicy, ps: &ProblemSpec, times: &[f64], cap: usize) -> Result<PolicyStateReport> {
    let op = &ps.op;
    let n = pol.policy.signal.len().min(cap);
    let want0 = Field::constant(ps.grid(), pol.ell0).sub(&ps.y)?;
    let rows = (0..n)
        .map(|s| {
            let hat = pol.nu_hat(s)?;
            let nu = pol.nu(s)?;
            let init = hat.value_at(0.0).sub(&want0)?.norm_inf();
            let later = hat.atoms().iter().filter(|a| a.time > 0.0).map(|a| spread(&a.increment)).fold(0.0, f64::max);
            let back = hat_transform(op, &nu)?;
            let mut round = 0.0f64;
            for (a, b) in back.atoms().iter().zip(hat.atoms()) {
                let scale = 1.0 + b.increment.norm_inf();
                round = round.max(a.increment.sub(&b.increment)?.norm_inf() / scale);
            }
            let (mut sp, mut rel, mut cone) = (0.0f64, 0.0f64, f64::INFINITY);
            for &t in times {
                let mild = mild_solution(op, &ps.y, &nu, t)?;
                let closed = pol.state_at(s, t);
                let scale = closed.norm_inf().max(1.0);
                sp = sp.max(spread(&mild) / scale);
                rel = rel.max(mild.sub(&closed)?.norm_inf() / scale);
                let free = op.apply(t, &ps.y)?;
                cone = cone.min(closed.sub(&free)?.min_value() / scale);
            }
            Ok((init, later, sp, rel, cone, round))
        })
        .collect::<Result<Vec<_>>>()?;
    let max = |f: fn(&(f64, f64, f64, f64, f64, f64)) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    let initial_atom_error = max(|r| r.0);
    let later_atom_spread = max(|r| r.1);
    let state_spread = max(|r| r.2);
    let mild_rel_error = max(|r| r.3);
    let hat_roundtrip = max(|r| r.5);
    let cone_margin = rows.iter().map(|r| r.4).fold(f64::INFINITY, f64::min);
    let ok = initial_atom_error == 0.0
        && later_atom_spread <= 1e-10
        && state_spread <= 1e-10
        && mild_rel_error <= 1e-8
        && cone_margin >= -1e-10
        && hat_roundtrip <= 1e-10;
    Ok(PolicyStateReport {
        initial_atom_error,
        later_atom_spread,
        state_spread,
        mild_rel_error,
        cone_margin,
        hat_roundtrip,
        scenarios: n,
        times: times.to_vec(),
        verdict: Verdict::from_bool(ok),
    })
}

/// Deviations from the optimum used in payoff comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Perturbation {
    Identity,
    /// Signal `c ℓ`.
    Scale { factor: f64 },
    /// Every hat atom before `t` is paid at the first grid time `>= t`.
    Delay { t: f64 },
    /// Initial atom multiplied by `1 + a cos(2π x / L)`.
    Tilt { amplitude: f64 },
    Zero,
}

impl Perturbation {
    pub fn standard() -> Vec<Perturbation> {
        let mut v = vec![Perturbation::Identity];
        v.extend([0.5, 0.8, 1.25, 2.0].map(|factor| Perturbation::Scale { factor }));
        v.extend([0.1, 0.5].map(|t| Perturbation::Delay { t }));
        v.push(Perturbation::Tilt { amplitude: 0.5 });
        v.push(Perturbation::Zero);
        v
    }

    pub fn name(&self) -> String {
        match self {
            Perturbation::Identity => "identity".into(),
            Perturbation::Scale { factor } => format!("scale-{factor}"),
            Perturbation::Delay { t } => format!("delay-{t}"),
            Perturbation::Tilt { amplitude } => format!("tilt-{amplitude}"),
            Perturbation::Zero => "zero".into(),
        }
    }
}

/// A perturbed base-capacity policy.
pub struct PerturbedPolicy {
    base: CapacityPolicy,
    kind: Perturbation,
    delay: Option<(usize, Propagator)>,
}

impl PerturbedPolicy {
    pub fn new(base: &CapacityPolicy, kind: Perturbation) -> Result<Self> {
        let base = match kind {
            Perturbation::Scale { factor } => base.scaled(factor)?,
            _ => base.clone(),
        };
        let delay = match kind {
            Perturbation::Delay { t } => {
                if !(t >= 0.0) {
                    return Err(Error::InvalidParameter(format!("delay must be nonnegative, got {t}")));
                }
                let i = base.time().ceil_index(t);
                Some((i, base.op.propagator(base.time().time(i))?))
            }
            _ => None,
        };
        if let Perturbation::Tilt { amplitude } = kind {
            if !(0.0..=1.0).contains(&amplitude) {
                return Err(Error::InvalidParameter(format!("tilt amplitude must lie in [0,1], got {amplitude}")));
            }
        }
        Ok(Self { base, kind, delay })
    }

    pub fn kind(&self) -> Perturbation {
        self.kind
    }

    pub fn nu(&self, s: usize) -> Result<ControlPath> {
        let grid = self.base.op.grid();
        match self.kind {
            Perturbation::Identity | Perturbation::Scale { .. } => self.base.nu(s),
            Perturbation::Zero => Ok(ControlPath::zero(grid)),
            Perturbation::Tilt { amplitude } => {
                let nu = self.base.nu(s)?;
                let l = grid.period();
                let mut atoms = nu.atoms().to_vec();
                let first = &atoms[0].increment;
                let tilted = Field::new(
                    grid.clone(),
                    first
                        .values()
                        .iter()
                        .zip(grid.nodes())
                        .map(|(v, x)| v * (1.0 + amplitude * (2.0 * PI * x / l).cos()))
                        .collect(),
                )?;
                atoms[0].increment = tilted;
                ControlPath::new(grid, atoms)
            }
            Perturbation::Delay { .. } => {
                let (k, prop) = self.delay.as_ref().expect("built with the delay");
                let time = self.base.time();
                let (first, later) = self.base.increments(s);
                let mut merged = first;
                let mut atoms = Vec::new();
                for (i, d) in later {
                    if i <= *k {
                        merged = merged.map(|v| v + d);
                    } else {
                        let t = time.time(i);
                        atoms.push(Atom { time: t, increment: Field::constant(grid, (self.base.lambda0 * t).exp() * d) });
                    }
                }
                let moved = Field::new(grid.clone(), prop.apply_slice(merged.values()))?.map(|v| v.max(0.0));
                atoms.insert(0, Atom { time: time.time(*k), increment: moved });
                ControlPath::new(grid, atoms)
            }
        }
    }
}

impl ControlPolicy for PerturbedPolicy {
    fn control(&self, _scenarios: &ScenarioSet, s: usize) -> Result<ControlPath> {
        self.nu(s)
    }
}
