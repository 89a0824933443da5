//! Monotone pure-jump controls, their integrals, the mild solution and the
//! hat transform of the group case.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::drivers::ScenarioSet;
use crate::error::{Error, Result};
use crate::grid::{pairing, DualField, Field, SpatialGrid};
use crate::semigroup::OperatorSpec;
use crate::time::TimeQuadrature;

/// Increments with slightly negative nodes (round-off from a propagator) are
/// accepted down to `-CONE_TOL * (1 + |Δ|_inf)`.
pub const CONE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub time: f64,
    pub increment: Field,
}

/// `ν_t = Σ_{t_k <= t} Δ_k`, right-continuous with `ν_{0-} = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    grid: Arc<SpatialGrid>,
    atoms: Vec<Atom>,
}

impl ControlPath {
    pub fn zero(grid: &Arc<SpatialGrid>) -> Self {
        Self { grid: grid.clone(), atoms: Vec::new() }
    }

    /// Validates ordering, times and cone membership; drops zero atoms.
    pub fn new(grid: &Arc<SpatialGrid>, atoms: Vec<Atom>) -> Result<Self> {
        for a in &atoms {
            let m = a.increment.min_value();
            if m < -CONE_TOL * (1.0 + a.increment.norm_inf()) {
                return Err(Error::NotInCone(m));
            }
        }
        Self::unchecked(grid, atoms)
    }

    /// Like [`ControlPath::new`] without the cone test; hat-transformed
    /// controls may leave `K+`.
    pub(crate) fn unchecked(grid: &Arc<SpatialGrid>, atoms: Vec<Atom>) -> Result<Self> {
        let mut prev = f64::NEG_INFINITY;
        let mut kept = Vec::with_capacity(atoms.len());
        for a in atoms {
            if !(a.time >= 0.0) || !a.time.is_finite() {
                return Err(Error::InvalidParameter(format!("atom time must be >= 0, got {}", a.time)));
            }
            if a.time <= prev {
                return Err(Error::InvalidParameter("atom times must be strictly increasing".into()));
            }
            prev = a.time;
            if a.increment.grid().len() != grid.len() {
                return Err(Error::GridMismatch);
            }
            if a.increment.values().iter().any(|&v| v != 0.0) {
                kept.push(a);
            }
        }
        Ok(Self { grid: grid.clone(), atoms: kept })
    }

    pub fn single(grid: &Arc<SpatialGrid>, time: f64, increment: Field) -> Result<Self> {
        Self::new(grid, vec![Atom { time, increment }])
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        &self.grid
    }
    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }
    pub fn len(&self) -> usize {
        self.atoms.len()
    }
    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `ν_t`.
    pub fn value_at(&self, t: f64) -> Field {
        let mut v = vec![0.0; self.grid.len()];
        for a in self.atoms.iter().take_while(|a| a.time <= t) {
            for (x, d) in v.iter_mut().zip(a.increment.values()) {
                *x += d;
            }
        }
        Field::new(self.grid.clone(), v).expect("shape checked at construction")
    }

    /// `|ν|([0, t]) = Σ_{t_k <= t} |Δ_k|_X`.
    pub fn variation(&self, t: f64) -> f64 {
        self.atoms.iter().take_while(|a| a.time <= t).map(|a| a.increment.norm_p()).sum()
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom { time: a.time, increment: a.increment.scale(c) })
            .collect();
        Self::new(&self.grid, atoms)
    }

    /// Sum of two controls (atoms at equal times merge).
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut atoms: Vec<Atom> = Vec::with_capacity(self.len() + other.len());
        let (mut i, mut j) = (0, 0);
        while i < self.atoms.len() || j < other.atoms.len() {
            let take_left = j >= other.atoms.len()
                || (i < self.atoms.len() && self.atoms[i].time <= other.atoms[j].time);
            let next = if take_left {
                i += 1;
                self.atoms[i - 1].clone()
            } else {
                j += 1;
                other.atoms[j - 1].clone()
            };
            match atoms.last_mut() {
                Some(last) if last.time == next.time => {
                    last.increment = last.increment.add(&next.increment)?;
                }
                _ => atoms.push(next),
            }
        }
        Self::unchecked(&self.grid, atoms)
    }

    pub fn to_record(&self) -> ControlRecord {
        ControlRecord {
            atoms: self
                .atoms
                .iter()
                .map(|a| AtomRecord { time: a.time, values: a.increment.values().to_vec() })
                .collect(),
        }
    }

    pub fn from_record(grid: &Arc<SpatialGrid>, rec: ControlRecord) -> Result<Self> {
        let atoms = rec
            .atoms
            .into_iter()
            .map(|a| Ok(Atom { time: a.time, increment: Field::new(grid.clone(), a.values)? }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, atoms)
    }

    /// CSV rows `time,node,increment`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "node", "increment"])?;
        for a in &self.atoms {
            for (i, v) in a.increment.values().iter().enumerate() {
                w.write_record([a.time.to_string(), i.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// A rule producing one control per simulated driver path. Implementations
/// may only read path values up to each atom's time.
pub trait ControlPolicy: Sync {
    fn control(&self, scenarios: &ScenarioSet, s: usize) -> Result<ControlPath>;
}

impl<F> ControlPolicy for F
where
    F: Fn(&ScenarioSet, usize) -> Result<ControlPath> + Sync,
{
    fn control(&self, scenarios: &ScenarioSet, s: usize) -> Result<ControlPath> {
        self(scenarios, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomRecord {
    pub time: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub atoms: Vec<AtomRecord>,
}

/// `∫_0^t <f_s, dν_s> = Σ_{t_k <= t} <f(t_k), Δ_k>`.
pub fn integrate_dual<F>(f: F, nu: &ControlPath, t: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<DualField>,
{
    let mut s = 0.0;
    for a in nu.atoms.iter().take_while(|a| a.time <= t) {
        s += pairing(&f(a.time)?, &a.increment)?;
    }
    Ok(s)
}

/// `∫_0^t e^{(t-s)A} dν_s`.
pub fn integrate_operator(op: &OperatorSpec, t: f64, nu: &ControlPath) -> Result<Field> {
    let mut acc = Field::zeros(op.grid());
    for a in nu.atoms.iter().take_while(|a| a.time <= t) {
        acc = acc.add(&op.apply(t - a.time, &a.increment)?)?;
    }
    Ok(acc)
}

/// `Y_t = e^{tA} y + ∫_0^t e^{(t-s)A} dν_s`.
pub fn mild_solution(op: &OperatorSpec, y: &Field, nu: &ControlPath, t: f64) -> Result<Field> {
    if !y.is_nonneg() {
        return Err(Error::NotInCone(y.min_value()));
    }
    op.apply(t, y)?.add(&integrate_operator(op, t, nu)?)
}

/// `ν̂`: atoms `(t_k, e^{-t_k A} Δ_k)`.
pub fn hat_transform(op: &OperatorSpec, nu: &ControlPath) -> Result<ControlPath> {
    if !op.is_group() {
        return Err(Error::NotAGroup(op.variant().name()));
    }
    let atoms = nu
        .atoms
        .iter()
        .map(|a| Ok(Atom { time: a.time, increment: op.apply(-a.time, &a.increment)? }))
        .collect::<Result<Vec<_>>>()?;
    ControlPath::unchecked(op.grid(), atoms)
}

/// Inverse of [`hat_transform`].
pub fn unhat_transform(op: &OperatorSpec, nuhat: &ControlPath) -> Result<ControlPath> {
    if !op.is_group() {
        return Err(Error::NotAGroup(op.variant().name()));
    }
    let atoms = nuhat
        .atoms
        .iter()
        .map(|a| Ok(Atom { time: a.time, increment: op.apply(a.time, &a.increment)? }))
        .collect::<Result<Vec<_>>>()?;
    ControlPath::unchecked(op.grid(), atoms)
}

/// Both sides of the Fubini/Tonelli exchange
/// `∫<f_t, ∫_0^t e^{(t-s)A} dν_s> q(dt) = ∫<∫_s^T e^{(t-s)A*} f_t q(dt), dν_s>`
/// under one shared midpoint quadrature.
pub fn fubini_check<F>(f: F, op: &OperatorSpec, r: f64, t_max: f64, nu: &ControlPath, quad_n: usize) -> Result<(f64, f64)>
where
    F: Fn(f64) -> Result<DualField>,
{
    let quad = TimeQuadrature::midpoint(r, t_max, quad_n)?;
    let fs = quad.nodes.iter().map(|&t| f(t)).collect::<Result<Vec<_>>>()?;
    let mut lhs = 0.0;
    for ((&t, &q), ft) in quad.nodes.iter().zip(&quad.weights).zip(&fs) {
        if nu.atoms.first().is_some_and(|a| a.time <= t) {
            lhs += q * pairing(ft, &integrate_operator(op, t, nu)?)?;
        }
    }
    let mut rhs = 0.0;
    for a in &nu.atoms {
        let mut inner = DualField::zeros(op.grid());
        for ((&t, &q), ft) in quad.nodes.iter().zip(&quad.weights).zip(&fs) {
            if t >= a.time {
                inner = inner.axpy(q, &op.apply_adjoint(t - a.time, ft)?)?;
            }
        }
        rhs += pairing(&inner, &a.increment)?;
    }
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;
    use crate::semigroup::{OperatorConfig, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize) -> (Arc<SpatialGrid>, OperatorSpec) {
        let g = SpatialGrid::new(Geometry::Circle, n, 1.0, 2.0).unwrap();
        let op = OperatorSpec::new(
            &g,
            OperatorConfig {
                variant: Variant::ShiftGroupCircle,
                params: Default::default(),
                lambda0: Some(0.0),
                lambda0_star: Some(0.0),
            },
        )
        .unwrap();
        (g, op)
    }

    fn random_control(g: &Arc<SpatialGrid>, rng: &mut ChaCha8Rng, k: usize, t_max: f64) -> ControlPath {
        let mut times: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..t_max)).collect();
        times.sort_by(f64::total_cmp);
        let atoms = times
            .into_iter()
            .map(|time| Atom { time, increment: Field::from_fn(g, |_| rng.random_range(0.0..2.0)) })
            .collect();
        ControlPath::new(g, atoms).unwrap()
    }

    #[test]
    fn integrate_dual_examples() {
        let (g, _) = setup(8);
        let nu = ControlPath::single(&g, 0.0, Field::ones(&g)).unwrap();
        let one = |_: f64| Ok(DualField::ones(&g));
        assert_eq!(integrate_dual(one, &nu, 1.0).unwrap(), 1.0);
        let zero = |_: f64| Ok(DualField::zeros(&g));
        assert_eq!(integrate_dual(zero, &nu, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn integrate_dual_matches_density_factorization() {
        let (g, _) = setup(16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nu = random_control(&g, &mut rng, 3, 2.0);
        let base = DualField::from_fn(&g, |_| rng.random_range(-1.0..1.0));
        let f = |t: f64| Ok(base.scale(1.0 + t * t));
        let got = integrate_dual(f, &nu, 2.0).unwrap();
        // dν = ρ d|ν| with ρ_k = Δ_k / |Δ_k|_X
        let oracle: f64 = nu
            .atoms()
            .iter()
            .map(|a| {
                let mass = a.increment.norm_p();
                let rho = a.increment.scale(1.0 / mass);
                pairing(&f(a.time).unwrap(), &rho).unwrap() * mass
            })
            .sum();
        assert!((got - oracle).abs() <= 1e-12);
    }

    #[test]
    fn zero_atoms_are_dropped_and_cone_enforced() {
        let (g, _) = setup(4);
        let nu = ControlPath::single(&g, 0.5, Field::zeros(&g)).unwrap();
        assert!(nu.is_empty());
        let bad = Field::new(g.clone(), vec![1.0, -0.5, 0.0, 0.0]).unwrap();
        assert!(matches!(ControlPath::single(&g, 0.0, bad), Err(Error::NotInCone(_))));
        let two = vec![
            Atom { time: 1.0, increment: Field::ones(&g) },
            Atom { time: 1.0, increment: Field::ones(&g) },
        ];
        assert!(ControlPath::new(&g, two).is_err());
    }

    #[test]
    fn path_is_monotone_and_right_continuous() {
        let (g, _) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nu = random_control(&g, &mut rng, 5, 3.0);
        let mut prev = Field::zeros(&g);
        for i in 0..=300 {
            let v = nu.value_at(i as f64 * 0.01);
            assert!(v.sub(&prev).unwrap().is_nonneg());
            prev = v;
        }
        let t1 = nu.atoms()[0].time;
        assert_eq!(nu.value_at(t1), nu.atoms()[0].increment);
        assert!(nu.value_at(t1 - 1e-9).norm_inf() == 0.0);
    }

    #[test]
    fn integrate_operator_examples() {
        let (g, op) = setup(8);
        let delta = Field::from_fn(&g, |x| 1.0 + x);
        let nu = ControlPath::single(&g, 0.0, delta.clone()).unwrap();
        let got = integrate_operator(&op, 0.3, &nu).unwrap();
        assert_eq!(got, op.apply(0.3, &delta).unwrap());
        let zero = integrate_operator(&op, 0.3, &ControlPath::zero(&g)).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integrate_operator_matches_shuffled_summation() {
        let (g, op) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nu = random_control(&g, &mut rng, 2, 1.0);
        let got = integrate_operator(&op, 1.5, &nu).unwrap();
        let mut terms: Vec<Field> =
            nu.atoms().iter().map(|a| op.apply(1.5 - a.time, &a.increment).unwrap()).collect();
        terms.reverse();
        let oracle = terms[0].add(&terms[1]).unwrap();
        for (a, b) in got.values().iter().zip(oracle.values()) {
            assert!((a - b).abs() <= 1e-13);
        }
    }

    #[test]
    fn mild_solution_of_shifted_constants() {
        let (g, op) = setup(8);
        let nu = ControlPath::single(&g, 0.5, Field::ones(&g)).unwrap();
        let y = mild_solution(&op, &Field::ones(&g), &nu, 1.0).unwrap();
        assert!(y.values().iter().all(|v| (v - 2.0).abs() < 1e-13));
        let neg = Field::constant(&g, -1.0);
        assert!(mild_solution(&op, &neg, &nu, 1.0).is_err());
    }

    #[test]
    fn hat_round_trip() {
        let (g, op) = setup(16);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let nu = random_control(&g, &mut rng, 4, 2.0);
        let back = unhat_transform(&op, &hat_transform(&op, &nu).unwrap()).unwrap();
        for (a, b) in nu.atoms().iter().zip(back.atoms()) {
            assert_eq!(a.time, b.time);
            assert!(a.increment.sub(&b.increment).unwrap().norm_inf() < 1e-10);
        }
        let c = ControlPath::single(&g, 0.3, Field::ones(&g)).unwrap();
        let h = hat_transform(&op, &c).unwrap();
        assert!(h.atoms()[0].increment.sub(&Field::ones(&g)).unwrap().norm_inf() < 1e-13);
    }

    #[test]
    fn hat_requires_group() {
        let g = SpatialGrid::new(Geometry::Circle, 8, 1.0, 2.0).unwrap();
        let heat = OperatorSpec::new(
            &g,
            OperatorConfig { variant: Variant::HeatCircle, params: Default::default(), lambda0: None, lambda0_star: None },
        )
        .unwrap();
        let nu = ControlPath::single(&g, 0.0, Field::ones(&g)).unwrap();
        assert!(matches!(hat_transform(&heat, &nu), Err(Error::NotAGroup(_))));
    }

    #[test]
    fn fubini_single_atom_closed_form() {
        let (g, op) = setup(8);
        let (r, t_max, s) = (0.3, 4.0, 1.0);
        let nu = ControlPath::single(&g, s, Field::constant(&g, 2.0)).unwrap();
        let (lhs, rhs) = fubini_check(|_| Ok(DualField::ones(&g)), &op, r, t_max, &nu, 400).unwrap();
        let exact = crate::time::exp_integral(r, s, t_max) * 2.0;
        assert!((lhs - exact).abs() < 1e-12 && (rhs - exact).abs() < 1e-12, "{lhs} {rhs} {exact}");
        let (l0, r0) = fubini_check(|_| Ok(DualField::ones(&g)), &op, r, t_max, &ControlPath::zero(&g), 50).unwrap();
        assert_eq!((l0, r0), (0.0, 0.0));
    }

    #[test]
    fn concat_merges_equal_times() {
        let (g, _) = setup(4);
        let a = ControlPath::single(&g, 1.0, Field::ones(&g)).unwrap();
        let b = ControlPath::new(
            &g,
            vec![
                Atom { time: 0.0, increment: Field::ones(&g) },
                Atom { time: 1.0, increment: Field::ones(&g) },
            ],
        )
        .unwrap();
        let c = a.concat(&b).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.atoms()[1].increment.values(), &[2.0; 4]);
    }

    #[test]
    fn control_record_round_trip() {
        let (g, _) = setup(4);
        let nu = ControlPath::single(&g, 0.25, Field::from_fn(&g, |x| x + 1.0)).unwrap();
        let s = serde_json::to_string(&nu.to_record()).unwrap();
        let back = ControlPath::from_record(&g, serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(back, nu);
        let mut buf = Vec::new();
        nu.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}
