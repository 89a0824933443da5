//! Stage runner behind the command line: simulate, solve the signal, build
//! the policy, verify the first-order conditions and compare payoffs.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bek::{
    build_lattice, residual_check, solve_constant, solve_grid, solve_kappa, KappaSolution, ResidualItem,
    SignalModel, SignalPath,
};
use crate::config::{Method, RunConfig};
use crate::drivers::{DriverKind, ScenarioSet};
use crate::error::{Error, Result};
use crate::foc::{
    battery, concordance, estimate_psi, foc_equality, foc_inequality, payoff_dominance, psi_sign,
    sufficiency_chain, Candidate, ChainReport, ConcordanceReport, ConditionReport, DominanceReport, PsiEstimate,
    SignReport, TestControl,
};
use crate::io::Artifacts;
use crate::payoff::{value_bound_check, PathValue, ProblemSpec, ValueBoundReport};
use crate::policy::{build_policy, verify_policy_state, CapacityPolicy, OptimalPolicy, PolicyStateReport, PolicySummary};
use crate::semigroup::EigenReport;
use crate::stats::{Estimate, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    SolveSignal,
    BuildPolicy,
    VerifyFoc,
    Compare,
    Full,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::SolveSignal => "solve-signal",
            Stage::BuildPolicy => "build-policy",
            Stage::VerifyFoc => "verify-foc",
            Stage::Compare => "compare",
            Stage::Full => "full",
        }
    }
}

/// 2 for schema or parameter errors, 3 for cases outside the supported
/// model (initial state above `ℓ0`, non-group operators, two-factor
/// lattices), 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Json(_)
        | Error::InvalidParameter(_)
        | Error::GridMismatch
        | Error::ShapeMismatch { .. }
        | Error::NotInCone(_)
        | Error::OffGrid(_) => 2,
        Error::InitialOverCapacity { .. } | Error::Unsupported(_) | Error::NotAGroup(_) | Error::MissingEigenstructure => 3,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageVerdict {
    pub stage: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub stage: Stage,
    pub seed: u64,
    pub stages: Vec<StageVerdict>,
    pub files: Vec<String>,
    pub verdict: Verdict,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        i32::from(self.verdict.is_fail())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub scenarios: usize,
    pub steps: usize,
    pub t_max: f64,
    pub dt: f64,
    pub seed: u64,
    pub z_terminal: Estimate,
    pub phi_terminal: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeInfo {
    pub levels_used: usize,
    pub widenings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalReport {
    pub method: String,
    pub ell0: f64,
    /// `(z0^α / (r φ0))^{1/α}` adjusted for `λ0`, constant drivers only.
    pub closed_form: Option<f64>,
    pub kappa: Option<KappaSolution>,
    pub lattice: Option<LatticeInfo>,
    pub residual_tol: f64,
    pub residuals: Vec<ResidualItem>,
    pub false_scale: f64,
    pub false_residuals: Vec<ResidualItem>,
    pub false_rejected: bool,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub summary: PolicySummary,
    pub eigen: EigenReport,
    pub state: PolicyStateReport,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorInfo {
    pub slices: usize,
    pub fallbacks: usize,
    pub max_cond: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocReport {
    pub signal_scale: f64,
    pub estimator: EstimatorInfo,
    pub equality: ConditionReport,
    pub inequality: ConditionReport,
    pub sign: SignReport,
    pub concordance: ConcordanceReport,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffSummary {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub candidate: PayoffSummary,
    pub dominance: DominanceReport,
    pub chain: ChainReport,
    pub value_bound: ValueBoundReport,
    pub verdict: Verdict,
}

struct Signal {
    model: SignalModel,
    path: Arc<SignalPath>,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    ps: ProblemSpec,
    art: Artifacts,
    verdicts: Vec<StageVerdict>,
    sc: Option<Arc<ScenarioSet>>,
    signal: Option<Signal>,
    policy: Option<OptimalPolicy>,
    cand: Option<CapacityPolicy>,
    psi: Option<PsiEstimate>,
}

/// Runs `stage` (and silently whatever it depends on) with artifacts in
/// `out`. Uses a private pool of `cfg.workers` threads when set.
pub fn run(cfg: &RunConfig, stage: Stage, out: &Path) -> Result<Outcome> {
    match cfg.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            pool.install(|| run_stage(cfg, stage, out))
        }
        None => run_stage(cfg, stage, out),
    }
}

fn run_stage(cfg: &RunConfig, stage: Stage, out: &Path) -> Result<Outcome> {
    let ps = cfg.problem()?;
    let art = Artifacts::new(out, &cfg.hash())?;
    let mut r = Run { cfg, ps, art, verdicts: Vec::new(), sc: None, signal: None, policy: None, cand: None, psi: None };
    match stage {
        Stage::Simulate => r.simulate()?,
        Stage::SolveSignal => r.solve_signal()?,
        Stage::BuildPolicy => r.build_policy()?,
        Stage::VerifyFoc => r.verify_foc()?,
        Stage::Compare => r.compare()?,
        Stage::Full => {
            r.simulate()?;
            r.solve_signal()?;
            r.build_policy()?;
            r.verify_foc()?;
            r.compare()?;
        }
    }
    let verdict = Verdict::from_bool(r.verdicts.iter().all(|v| !v.verdict.is_fail()));
    let mut files: Vec<String> =
        r.art.written().iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect();
    files.push("run.json".into());
    let outcome = Outcome { stage, seed: cfg.seed, stages: r.verdicts.clone(), files, verdict };
    r.art.json("run.json", &outcome)?;
    Ok(outcome)
}

impl Run<'_> {
    fn record(&mut self, stage: Stage, verdict: Verdict) {
        self.verdicts.push(StageVerdict { stage: stage.name().into(), verdict });
    }

    fn scenarios(&mut self) -> Result<Arc<ScenarioSet>> {
        if self.sc.is_none() {
            self.sc = Some(Arc::new(self.ps.simulate()?));
        }
        Ok(self.sc.clone().unwrap())
    }

    fn simulate(&mut self) -> Result<()> {
        let sc = self.scenarios()?;
        let last = sc.time.steps;
        let zs: Vec<f64> = (0..sc.len()).map(|s| sc.z_path(s)[last]).collect();
        let ps: Vec<f64> = (0..sc.len()).map(|s| sc.phi_path(s)[last]).collect();
        let rep = SimulateReport {
            scenarios: sc.len(),
            steps: sc.time.steps,
            t_max: sc.time.t_max,
            dt: sc.time.dt(),
            seed: sc.seed,
            z_terminal: Estimate::from_samples(&zs),
            phi_terminal: Estimate::from_samples(&ps),
        };
        let cap = self.cfg.verification.csv_scenarios;
        self.art.csv("scenarios.csv", |w| sc.write_csv(w, cap))?;
        self.art.json("simulate.json", &rep)?;
        self.record(Stage::Simulate, Verdict::Pass);
        Ok(())
    }

    fn solve(&mut self) -> Result<(Signal, SignalReport)> {
        let sc = self.scenarios()?;
        let ps = &self.ps;
        let sv = &self.cfg.solver;
        let md = &ps.model;
        let closed_form = (md.kind == DriverKind::Constant)
            .then(|| solve_constant(md.z0, md.phi0, ps.alpha, md.r, md.lambda0, md.lambda0_star))
            .transpose()?;
        let method = match sv.method {
            Method::Auto if md.kind == DriverKind::Constant => Method::Constant,
            Method::Auto => Method::Kappa,
            m => m,
        };
        let (mut kappa, mut lattice) = (None, None);
        let model = match method {
            Method::Constant => match closed_form {
                Some(ell) => SignalModel::Constant { ell },
                None => return Err(Error::Config("solver.method \"constant\" needs constant drivers".into())),
            },
            Method::Kappa => {
                let k = solve_kappa(md, ps.alpha, &sc, sv.kappa_bracket)?;
                let m = SignalModel::Kappa { kappa: k.kappa, alpha: ps.alpha };
                kappa = Some(k);
                m
            }
            Method::Grid => {
                let lat = build_lattice(md, ps.alpha, ps.time, sv.lattice())?;
                let sol = solve_grid(&lat)?;
                lattice = Some(LatticeInfo { levels_used: sol.levels_used, widenings: sol.widenings });
                SignalModel::Lattice(Arc::new(sol))
            }
            Method::Auto => unreachable!(),
        };
        let path = Arc::new(SignalPath::from_model(&model, &sc, ps.lambda0())?);
        let false_model = model.scaled(sv.false_scale);
        let false_path = SignalPath::from_model(&false_model, &sc, ps.lambda0())?;
        let (a, r, l0, l0s) = (ps.alpha, md.r, ps.lambda0(), ps.lambda0_star());
        let residuals = residual_check(&path, &sc, a, r, l0, l0s, &sv.residual_rules)?;
        let false_residuals = residual_check(&false_path, &sc, a, r, l0, l0s, &sv.residual_rules)?;
        let k = self.cfg.verification.foc.k_sigma;
        let tol = sv.residual_tol * md.phi0;
        let true_ok = residuals.iter().all(|i| i.within(k, tol));
        let false_rejected = false_residuals.iter().any(|i| !i.within(k, tol));
        let rep = SignalReport {
            method: model.method().into(),
            ell0: path.ell(0)[0],
            closed_form,
            kappa,
            lattice,
            residual_tol: tol,
            residuals,
            false_scale: sv.false_scale,
            false_residuals,
            false_rejected,
            verdict: Verdict::from_bool(true_ok && false_rejected),
        };
        Ok((Signal { model, path }, rep))
    }

    fn signal(&mut self) -> Result<()> {
        if self.signal.is_none() {
            self.signal = Some(self.solve()?.0);
        }
        Ok(())
    }

    fn solve_signal(&mut self) -> Result<()> {
        let (sig, rep) = self.solve()?;
        let sc = self.scenarios()?;
        let cap = self.cfg.verification.csv_scenarios;
        let path = sig.path.clone();
        self.art.csv("signal.csv", |w| {
            let mut w = csv::Writer::from_writer(w);
            w.write_record(["scenario", "time", "ell", "zeta"])?;
            for s in 0..path.len().min(cap) {
                for (i, (l, z)) in path.ell(s).iter().zip(path.zeta(s)).enumerate() {
                    w.write_record([s.to_string(), sc.time.time(i).to_string(), l.to_string(), z.to_string()])?;
                }
            }
            w.flush()?;
            Ok(())
        })?;
        self.art.json("signal.json", &rep)?;
        self.record(Stage::SolveSignal, rep.verdict);
        self.signal = Some(sig);
        Ok(())
    }

    fn policy(&mut self) -> Result<()> {
        if self.policy.is_some() {
            return Ok(());
        }
        self.signal()?;
        let sc = self.scenarios()?;
        let sig = self.signal.as_ref().unwrap();
        let pol = build_policy(&self.ps, &sc, sig.path.clone())?.with_model(sig.model.clone());
        let scale = self.cfg.solver.signal_scale;
        self.cand = Some(if scale == 1.0 { pol.policy.clone() } else { pol.policy.scaled(scale)? });
        self.policy = Some(pol);
        Ok(())
    }

    fn build_policy(&mut self) -> Result<()> {
        self.policy()?;
        let v = &self.cfg.verification;
        let pol = self.policy.as_ref().unwrap();
        let state = verify_policy_state(pol, &self.ps, &v.state_times, v.state_scenarios)?;
        let eigen = self.ps.op.eigen_unit_check(&[0.1, 1.0, 3.0])?;
        let summary = pol.summary();
        let ok = !state.verdict.is_fail() && !summary.cost.verdict.is_fail();
        let rep = PolicyReport { summary, eigen, state, verdict: Verdict::from_bool(ok) };
        let cap = v.csv_scenarios;
        let pol = self.policy.as_ref().unwrap();
        self.art.csv("policy.csv", |w| pol.write_csv(w, cap))?;
        self.art.json("policy.json", &rep)?;
        self.record(Stage::BuildPolicy, rep.verdict);
        Ok(())
    }

    fn psi(&mut self) -> Result<()> {
        if self.psi.is_none() {
            self.policy()?;
            let sc = self.scenarios()?;
            let cand = self.cand.as_ref().unwrap();
            self.psi = Some(estimate_psi(&self.ps, &sc, Candidate::Capacity(cand), &self.cfg.verification.foc)?);
        }
        Ok(())
    }

    fn verify_foc(&mut self) -> Result<()> {
        self.psi()?;
        let sc = self.scenarios()?;
        let (ps, v) = (&self.ps, &self.cfg.verification);
        let cfg = &v.foc;
        let cand = self.cand.as_ref().unwrap();
        let psi = self.psi.as_ref().unwrap();
        let mut tests = battery(ps.grid(), ps.time, cfg.n_random, cfg.battery_seed)?;
        for kind in &v.extra_tests {
            tests.push(TestControl::new(kind.clone(), ps.grid(), ps.time)?);
        }
        let c = Candidate::Capacity(cand);
        let equality = foc_equality(psi, ps, &sc, c, cfg)?;
        let inequality = foc_inequality(psi, ps, &sc, c, &tests, cfg)?;
        let sign = psi_sign(psi, &sc, cfg);
        let conc = concordance(psi, ps, &sc, cand, cfg)?;
        let ok = [equality.verdict, inequality.verdict, sign.verdict, conc.verdict].iter().all(|v| !v.is_fail());
        let rep = FocReport {
            signal_scale: self.cfg.solver.signal_scale,
            estimator: EstimatorInfo { slices: psi.slices.len(), fallbacks: psi.fallbacks, max_cond: psi.max_cond },
            equality,
            inequality,
            sign,
            concordance: conc,
            verdict: Verdict::from_bool(ok),
        };
        let stride = v.psi_stride;
        self.art.csv("psi.csv", |w| psi.write_csv(w, &sc, stride))?;
        self.art.json("foc.json", &rep)?;
        self.record(Stage::VerifyFoc, rep.verdict);
        Ok(())
    }

    fn compare(&mut self) -> Result<()> {
        self.psi()?;
        let sc = self.scenarios()?;
        let (ps, v) = (&self.ps, &self.cfg.verification);
        let cand = self.cand.as_ref().unwrap();
        let psi = self.psi.as_ref().unwrap();
        let perts = &v.perturbations;
        let (dominance, values) = payoff_dominance(ps, &sc, cand, perts, &v.foc)?;
        let chain = sufficiency_chain(psi, ps, &sc, cand, perts, &values, &v.foc)?;
        let mut estimates = vec![dominance.candidate];
        estimates.extend(dominance.items.iter().map(|i| i.value));
        let value_bound = value_bound_check(ps, &estimates);
        let ok = [dominance.verdict, chain.verdict, value_bound.verdict].iter().all(|v| !v.is_fail());
        let rep = CompareReport {
            candidate: PayoffSummary {
                mean: dominance.candidate.mean,
                stderr: dominance.candidate.stderr,
                n: dominance.candidate.n,
                seed: sc.seed,
            },
            dominance,
            chain,
            value_bound,
            verdict: Verdict::from_bool(ok),
        };
        let mut names = vec!["candidate".to_string()];
        names.extend(perts.iter().map(|p| p.name()));
        let cap = v.csv_scenarios;
        self.art.csv("payoff.csv", |w| write_values(w, &names, &values, cap))?;
        self.art.json("compare.json", &rep)?;
        self.record(Stage::Compare, rep.verdict);
        Ok(())
    }
}

fn write_values<W: Write>(out: W, names: &[String], values: &[Vec<PathValue>], cap: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy", "scenario", "profit", "cost", "net"])?;
    for (name, vals) in names.iter().zip(values) {
        for (s, v) in vals.iter().enumerate().take(cap) {
            w.write_record([name.clone(), s.to_string(), v.profit.to_string(), v.cost.to_string(), v.net().to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
