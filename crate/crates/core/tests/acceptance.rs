//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails or overruns its time limit.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use capspread::bek::{build_lattice, residual_check, solve_grid, solve_kappa, LatticeConfig, SignalModel, SignalPath, StoppingRule};
use capspread::config::RunConfig;
use capspread::control::{fubini_check, hat_transform, mild_solution, Atom, ControlPath};
use capspread::drivers::{simulate, DriverKind, DriverModel};
use capspread::foc::{battery, estimate_psi, foc_equality, foc_inequality, payoff_dominance, Candidate, FocConfig};
use capspread::grid::{DualField, Field, Geometry, SpatialGrid};
use capspread::payoff::{value_bound_check, ProblemSpec};
use capspread::pipeline::{run, Stage};
use capspread::policy::{build_policy, verify_policy_state, OptimalPolicy, Perturbation};
use capspread::semigroup::{KernelSpec, OperatorConfig, OperatorParams, OperatorSpec, ShiftInterpolation, Variant};
use capspread::stats::Verdict;
use capspread::time::TimeGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> (bool, String);

fn main() {
    let checks: [(u32, &str, u64, Check); 11] = [
        (1, "semigroup laws", 10, semigroup_laws),
        (2, "unit eigenstructure", 5, eigenstructure),
        (3, "fubini exchange", 30, fubini),
        (4, "mild solution affinity and separable form", 30, mild_forms),
        (5, "constant-driver signal", 120, constant_signal),
        (6, "backward-equation residual", 300, residual),
        (7, "optimal policy structure", 60, policy_structure),
        (8, "first-order conditions", 600, foc_conditions),
        (9, "payoff dominance", 600, dominance),
        (10, "value bound", 60, value_bound),
        (11, "end-to-end determinism", 600, determinism),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in checks {
        let start = Instant::now();
        let (ok, detail) = check();
        let took = start.elapsed();
        let ok = ok && took <= Duration::from_secs(limit);
        failed += usize::from(!ok);
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id:>2} {name}: {detail} [{:.2}s of {limit}s]", took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn op(grid: &Arc<SpatialGrid>, variant: Variant, params: OperatorParams, l0: Option<f64>, l0s: Option<f64>) -> OperatorSpec {
    OperatorSpec::new(grid, OperatorConfig { variant, params, lambda0: l0, lambda0_star: l0s }).unwrap()
}

fn kernel(spec: KernelSpec) -> OperatorParams {
    OperatorParams { kernel: Some(spec), ..Default::default() }
}

fn rel(a: &Field, b: &Field) -> f64 {
    a.sub(b).unwrap().norm_p() / (1.0 + b.norm_p())
}

fn random_field(g: &Arc<SpatialGrid>, rng: &mut ChaCha8Rng) -> Field {
    Field::from_fn(g, |_| rng.random::<f64>())
}

/// Operators of all four variants plus the exactly positive shift.
fn operators(n: usize) -> Vec<(String, OperatorSpec, Vec<f64>)> {
    let circle = SpatialGrid::new(Geometry::Circle, n, 1.0, 2.0).unwrap();
    let interval = SpatialGrid::new(Geometry::Interval, n, 1.0, 2.0).unwrap();
    let nearest = OperatorParams { interpolation: ShiftInterpolation::Nearest, ..Default::default() };
    let node = 1.0 / n as f64;
    let times = vec![0.13, 0.37, 0.8];
    vec![
        ("shift".into(), op(&circle, Variant::ShiftGroupCircle, OperatorParams::default(), Some(0.0), Some(0.0)), times.clone()),
        ("shift-nearest".into(), op(&circle, Variant::ShiftGroupCircle, nearest, Some(0.0), Some(0.0)), vec![5.0 * node, 11.0 * node, 40.0 * node]),
        (
            "kernel".into(),
            op(&circle, Variant::IntegralKernel, kernel(KernelSpec::CirculantCosine { c: 0.5, b: 0.8 }), Some(0.5), Some(0.5)),
            times.clone(),
        ),
        ("heat".into(), op(&circle, Variant::HeatCircle, OperatorParams { diffusion: Some(0.01), ..Default::default() }, None, None), times.clone()),
        ("dirichlet".into(), op(&interval, Variant::DirichletLaplacianInterval, OperatorParams::default(), None, None), times),
    ]
}

fn semigroup_laws() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut comp, mut ident, mut under, mut round): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for (name, o, times) in operators(64) {
        let g = o.grid().clone();
        for _ in 0..5 {
            let f = random_field(&g, &mut rng);
            // Band-limited interpolation is positive only on band-limited data.
            let pos = if name == "shift" { Field::from_fn(&g, |x| 1.0 + (2.0 * PI * x).cos()) } else { f.clone() };
            ident = ident.max(rel(&o.apply(0.0, &f).unwrap(), &f));
            for &s in &times {
                let ps = o.apply(s, &pos).unwrap();
                under = under.max(-ps.min_value());
                for &t in &times {
                    let lhs = o.apply(s + t, &f).unwrap();
                    let rhs = o.apply(s, &o.apply(t, &f).unwrap()).unwrap();
                    comp = comp.max(rel(&rhs, &lhs));
                }
                if o.is_group() {
                    let back = o.apply(-s, &o.apply(s, &f).unwrap()).unwrap();
                    round = round.max(rel(&back, &f));
                }
            }
        }
    }
    let ok = comp <= 1e-8 && ident <= 1e-8 && under <= 1e-10 && round <= 1e-8;
    (ok, format!("composition {comp:.1e}, identity {ident:.1e}, undershoot {under:.1e}, group round trip {round:.1e}"))
}

fn eigenstructure() -> (bool, String) {
    let times = [0.1, 1.0, 3.0];
    let circle = SpatialGrid::new(Geometry::Circle, 64, 1.0, 2.0).unwrap();
    let wide = SpatialGrid::new(Geometry::Circle, 64, 2.0, 2.0).unwrap();
    let ops = [
        op(&circle, Variant::ShiftGroupCircle, OperatorParams::default(), Some(0.0), Some(0.0)),
        op(&circle, Variant::IntegralKernel, kernel(KernelSpec::Constant { c: 0.7 }), Some(0.7), Some(0.7)),
        op(&wide, Variant::IntegralKernel, kernel(KernelSpec::CirculantCosine { c: 0.3, b: -0.5 }), Some(0.6), Some(0.6)),
    ];
    let mut worst: f64 = 0.0;
    for o in &ops {
        let r = o.eigen_unit_check(&times).unwrap();
        worst = worst.max(r.primal).max(r.adjoint);
    }
    (worst <= 1e-8, format!("max |e^(tA)1 - e^(l0 t)1| over primal and adjoint {worst:.1e}"))
}

fn random_control(g: &Arc<SpatialGrid>, rng: &mut ChaCha8Rng, t_max: f64) -> ControlPath {
    let k = rng.random_range(1..5);
    let mut times: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * t_max).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let atoms = times.into_iter().map(|t| Atom { time: t, increment: random_field(g, rng) }).collect();
    ControlPath::new(g, atoms).unwrap()
}

fn fubini() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ops = operators(16);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let o = &ops[i % ops.len()].1;
        let g = o.grid().clone();
        let t_max = 1.0 + 3.0 * rng.random::<f64>();
        let r = 0.05 + 0.3 * rng.random::<f64>();
        let nu = random_control(&g, &mut rng, t_max);
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        let g0 = random_field(&g, &mut rng).to_dual();
        let g1 = random_field(&g, &mut rng).to_dual();
        let f = |t: f64| -> capspread::Result<DualField> { g0.scale((-a * t).exp()).axpy(b * t, &g1) };
        let (lhs, rhs) = fubini_check(f, o, r, t_max, &nu, 64).unwrap();
        worst = worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
    }
    (worst <= 1e-10, format!("max |lhs - rhs|/(1+|lhs|) over 50 instances {worst:.1e}"))
}

fn mild_forms() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ops = operators(16);
    let (mut affine, mut separable): (f64, f64) = (0.0, 0.0);
    for i in 0..50 {
        let o = &ops[i % ops.len()].1;
        let g = o.grid().clone();
        let t_max = 2.0;
        let (y1, y2) = (random_field(&g, &mut rng), random_field(&g, &mut rng));
        let (n1, n2) = (random_control(&g, &mut rng, t_max), random_control(&g, &mut rng, t_max));
        let a = rng.random::<f64>();
        let y = y1.scale(a).add(&y2.scale(1.0 - a)).unwrap();
        let nu = n1.scale(a).unwrap().concat(&n2.scale(1.0 - a).unwrap()).unwrap();
        let t = rng.random::<f64>() * t_max;
        let lhs = mild_solution(o, &y, &nu, t).unwrap();
        let rhs = mild_solution(o, &y1, &n1, t).unwrap().scale(a).add(&mild_solution(o, &y2, &n2, t).unwrap().scale(1.0 - a)).unwrap();
        affine = affine.max(rel(&lhs, &rhs));
        if o.is_group() {
            // Y_t = e^{tA}(y + ν̂_t).
            let hat = hat_transform(o, &nu).unwrap();
            let inner = y.add(&hat.value_at(t)).unwrap();
            separable = separable.max(rel(&o.apply(t, &inner).unwrap(), &lhs));
        }
    }
    let ok = affine <= 1e-10 && separable <= 1e-10;
    (ok, format!("affine {affine:.1e}, separable {separable:.1e} over 50 instances"))
}

fn constant_signal() -> (bool, String) {
    let md = DriverModel::constant(1.0, 1.0, 0.1);
    let time = TimeGrid::truncated(1.0, 1e-10, 0.1, 0.0, 400).unwrap();
    let lat = build_lattice(&md, 0.5, time, LatticeConfig { levels: 200, ..Default::default() }).unwrap();
    let grid = solve_grid(&lat).unwrap().ell_at(0, 1.0, 1.0);
    let sc = simulate(&md, time, 4, 1).unwrap();
    let kap = solve_kappa(&md, 0.5, &sc, [0.1, 10.0]).unwrap();
    let kappa = SignalModel::Kappa { kappa: kap.kappa, alpha: 0.5 }.ell_at(0, 1.0, 1.0);
    let (eg, ek) = ((grid / 100.0 - 1.0).abs(), (kappa / 100.0 - 1.0).abs());
    (eg <= 1e-3 && ek <= 1e-3, format!("grid {grid:.4} (rel {eg:.1e}), kappa {kappa:.4} (rel {ek:.1e}) vs 100"))
}

fn shift_problem(n_nodes: usize, model: DriverModel, tail: f64, steps: usize, scenarios: usize, seed: u64) -> ProblemSpec {
    let grid = SpatialGrid::new(Geometry::Circle, n_nodes, 1.0, 2.0).unwrap();
    let o = Arc::new(op(&grid, Variant::ShiftGroupCircle, OperatorParams::default(), Some(0.0), Some(0.0)));
    let y = Field::from_fn(&grid, |x| 0.2 + 0.1 * (2.0 * PI * x).cos());
    let time = TimeGrid::truncated(1.0, tail, model.r, 0.0, steps).unwrap();
    ProblemSpec::new(o, y, 0.5, model, time, scenarios, seed).unwrap()
}

fn gbm() -> DriverModel {
    DriverModel::gbm(1.0, 0.01, 0.2, 1.0, 0.15)
}

fn kappa_policy(ps: &ProblemSpec, sc: &capspread::drivers::ScenarioSet) -> OptimalPolicy {
    let kap = solve_kappa(&ps.model, ps.alpha, sc, [0.1, 10.0]).unwrap();
    let sm = SignalModel::Kappa { kappa: kap.kappa, alpha: ps.alpha };
    let sig = Arc::new(SignalPath::from_model(&sm, sc, ps.lambda0()).unwrap());
    build_policy(ps, sc, sig).unwrap().with_model(sm)
}

fn residual() -> (bool, String) {
    let ps = shift_problem(4, gbm(), 1e-6, 300, 10_000, 6);
    let sc = ps.simulate().unwrap();
    let kap = solve_kappa(&ps.model, ps.alpha, &sc, [0.1, 10.0]).unwrap();
    let sm = SignalModel::Kappa { kappa: kap.kappa, alpha: ps.alpha };
    let rules = [StoppingRule::Zero, StoppingRule::FirstHitting { factor: 1.2 }];
    let check = |m: &SignalModel| {
        let sig = SignalPath::from_model(m, &sc, 0.0).unwrap();
        residual_check(&sig, &sc, ps.alpha, ps.r(), 0.0, 0.0, &rules).unwrap()
    };
    let truth = check(&sm);
    let false_ = check(&sm.scaled(2.0));
    let ok_true = truth.iter().all(|i| i.within(3.0, 0.0));
    let rejected = !false_[0].within(3.0, 0.0);
    let fmt = |v: &[capspread::bek::ResidualItem]| {
        v.iter().map(|i| format!("{:.2e}±{:.1e}", i.residual.mean, i.residual.stderr)).collect::<Vec<_>>().join(", ")
    };
    (ok_true && rejected, format!("true signal [{}], x2 signal [{}]", fmt(&truth), fmt(&false_)))
}

fn policy_structure() -> (bool, String) {
    let mut lines = Vec::new();
    let mut ok = true;
    // Shift group (λ0 = 0) and a kernel group with λ0 = λ0* = 0.02.
    let circle = SpatialGrid::new(Geometry::Circle, 16, 1.0, 2.0).unwrap();
    let ops = [
        op(&circle, Variant::ShiftGroupCircle, OperatorParams::default(), Some(0.0), Some(0.0)),
        op(&circle, Variant::IntegralKernel, kernel(KernelSpec::CirculantCosine { c: 0.02, b: 0.5 }), Some(0.02), Some(0.02)),
    ];
    for o in ops {
        let o = Arc::new(o);
        let grid = o.grid().clone();
        let y = Field::from_fn(&grid, |x| 0.2 + 0.1 * (2.0 * PI * x).cos());
        let time = TimeGrid::truncated(1.0, 1e-4, 0.15, 0.02, 200).unwrap();
        let ps = ProblemSpec::new(o.clone(), y, 0.5, gbm(), time, 200, 9).unwrap();
        let sc = ps.simulate().unwrap();
        let pol = kappa_policy(&ps, &sc);
        let rep = verify_policy_state(&pol, &ps, &[0.0, 0.5, 1.0, 5.0, 20.0], 8).unwrap();
        ok &= rep.initial_atom_error == 0.0 && rep.state_spread <= 1e-10 && rep.mild_rel_error <= 1e-8;
        ok &= rep.verdict == Verdict::Pass;
        lines.push(format!(
            "{}: initial {:.0e}, spread {:.1e}, mild {:.1e}",
            o.variant().name(),
            rep.initial_atom_error,
            rep.state_spread,
            rep.mild_rel_error
        ));
    }
    (ok, lines.join("; "))
}

fn foc_conditions() -> (bool, String) {
    let mut parts = Vec::new();
    // Deterministic drivers: equality to 1e-6.
    let ps = shift_problem(8, DriverModel::constant(1.0, 1.0, 0.1), 1e-11, 250, 3, 2);
    let sc = ps.simulate().unwrap();
    let ell = capspread::bek::solve_constant(1.0, 1.0, 0.5, 0.1, 0.0, 0.0).unwrap();
    let model = SignalModel::Constant { ell };
    let sig = Arc::new(SignalPath::from_model(&model, &sc, 0.0).unwrap());
    let pol = build_policy(&ps, &sc, sig).unwrap().with_model(model);
    let cfg = FocConfig::default();
    let cand = Candidate::Capacity(&pol.policy);
    let psi = estimate_psi(&ps, &sc, cand, &cfg).unwrap();
    let eq = foc_equality(&psi, &ps, &sc, cand, &cfg).unwrap();
    let tests = battery(ps.grid(), ps.time, cfg.n_random, cfg.battery_seed).unwrap();
    let ineq = foc_inequality(&psi, &ps, &sc, cand, &tests, &cfg).unwrap();
    let mut ok = eq.items[0].value.abs() <= 1e-6 && ineq.verdict == Verdict::Pass;
    parts.push(format!("constant: equality {:.1e}, inequality {} controls {:?}", eq.items[0].value, tests.len(), ineq.verdict));

    // gbm at 10^4 scenarios.
    let ps = shift_problem(8, gbm(), 1e-4, 120, 10_000, 3);
    let sc = ps.simulate().unwrap();
    let pol = kappa_policy(&ps, &sc);
    let cfg = FocConfig { n_inner: 100, ..Default::default() };
    let cand = Candidate::Capacity(&pol.policy);
    let psi = estimate_psi(&ps, &sc, cand, &cfg).unwrap();
    let eq = foc_equality(&psi, &ps, &sc, cand, &cfg).unwrap();
    let e = &eq.items[0];
    let tests = battery(ps.grid(), ps.time, cfg.n_random, cfg.battery_seed).unwrap();
    let ineq = foc_inequality(&psi, &ps, &sc, cand, &tests, &cfg).unwrap();
    ok &= e.value.abs() <= 3.0 * e.stderr + e.tol && ineq.verdict == Verdict::Pass && tests.len() >= 20;
    parts.push(format!("gbm: equality {:.3}±{:.3}, inequality {} controls {:?}", e.value, e.stderr, tests.len(), ineq.verdict));
    for c in [0.5, 2.0] {
        let bad = pol.policy.scaled(c).unwrap();
        let cb = Candidate::Capacity(&bad);
        let psi = estimate_psi(&ps, &sc, cb, &cfg).unwrap();
        let eq = foc_equality(&psi, &ps, &sc, cb, &cfg).unwrap();
        let e = &eq.items[0];
        ok &= e.value.abs() > 3.0 * e.stderr + e.tol;
        parts.push(format!("x{c}: {:.3}±{:.3}", e.value, e.stderr));
    }
    (ok, parts.join("; "))
}

fn dominance() -> (bool, String) {
    let ps = shift_problem(8, gbm(), 1e-4, 120, 10_000, 5);
    let sc = ps.simulate().unwrap();
    let pol = kappa_policy(&ps, &sc);
    let perts = Perturbation::standard();
    let (rep, _) = payoff_dominance(&ps, &sc, &pol.policy, &perts, &FocConfig::default()).unwrap();
    let worst = rep.items.iter().filter(|i| i.name != "identity").map(|i| i.difference / i.pooled_stderr.max(1e-300)).fold(f64::INFINITY, f64::min);
    (
        rep.verdict == Verdict::Pass,
        format!("J* = {:.3}±{:.3}, {} perturbations, min gap/pooled se {worst:.2}", rep.candidate.mean, rep.candidate.stderr, rep.items.len()),
    )
}

fn value_bound() -> (bool, String) {
    // φ moves with z^α, so η = z^α/φ is nonincreasing pathwise.
    let md = DriverModel {
        kind: DriverKind::Gbm,
        sigma_phi: 0.1,
        theta_phi: 0.01,
        rho: 1.0,
        ..DriverModel::gbm(1.0, 0.02, 0.2, 1.0, 0.15)
    };
    let ps = shift_problem(8, md, 1e-4, 120, 10_000, 8);
    let sc = ps.simulate().unwrap();
    let pol = kappa_policy(&ps, &sc);
    let (rep, _) = payoff_dominance(&ps, &sc, &pol.policy, &Perturbation::standard(), &FocConfig::default()).unwrap();
    let mut est = vec![rep.candidate];
    est.extend(rep.items.iter().map(|i| i.value));
    let vb = value_bound_check(&ps, &est);
    let top = est.iter().map(|e| e.mean).fold(f64::NEG_INFINITY, f64::max);
    (
        vb.verdict == Verdict::Pass,
        format!("bound {:.3} vs largest estimate {top:.3} over {} policies ({})", vb.bound.unwrap_or(f64::NAN), est.len(), vb.reason),
    )
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn determinism() -> (bool, String) {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["reference_constant.json", "reference_gbm.json"] {
        let mut cfg = RunConfig::load(&root.join(name)).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        cfg.workers = Some(1);
        let ra = run(&cfg, Stage::Full, a.path()).unwrap();
        cfg.workers = Some(3);
        let rb = run(&cfg, Stage::Full, b.path()).unwrap();
        let (fa, fb) = (read_all(a.path()), read_all(b.path()));
        let same = fa == fb && !fa.is_empty();
        ok &= same && ra.verdict == Verdict::Pass && rb.verdict == Verdict::Pass;
        parts.push(format!("{name}: {} files identical {same}, verdict {:?}", fa.len(), ra.verdict));
    }
    (ok, parts.join("; "))
}
