//! Exogenous scalar drivers: the profit scale `z` and the marginal
//! investment cost `φ`, simulated exactly in law on a uniform time grid.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriverKind {
    Constant,
    Gbm,
    ExpLevyJumpDiffusion,
}

/// `d log z = (θ - σ_z²/2 - λ k̄) dt + σ_z dW¹ + dJ`,
/// `d log φ = (θ_φ - σ_φ²/2 - λ k̄_φ) dt + σ_φ (ρ dW¹ + √(1-ρ²) dW²) + β dJ`,
/// with Gaussian log-jumps `N(jump_mean, jump_std²)` at rate `jump_intensity`.
/// Compensation keeps `E z_t = z0 e^{θt}` and `E φ_t = φ0 e^{θ_φ t}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverModel {
    pub kind: DriverKind,
    pub z0: f64,
    pub phi0: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub sigma_z: f64,
    #[serde(default)]
    pub theta_phi: f64,
    #[serde(default)]
    pub sigma_phi: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub jump_intensity: f64,
    #[serde(default)]
    pub jump_mean: f64,
    #[serde(default)]
    pub jump_std: f64,
    #[serde(default)]
    pub phi_jump_beta: f64,
    pub r: f64,
    #[serde(default)]
    pub lambda0: f64,
    #[serde(default)]
    pub lambda0_star: f64,
}

impl DriverModel {
    pub fn constant(z0: f64, phi0: f64, r: f64) -> Self {
        Self {
            kind: DriverKind::Constant,
            z0,
            phi0,
            theta: 0.0,
            sigma_z: 0.0,
            theta_phi: 0.0,
            sigma_phi: 0.0,
            rho: 0.0,
            jump_intensity: 0.0,
            jump_mean: 0.0,
            jump_std: 0.0,
            phi_jump_beta: 0.0,
            r,
            lambda0: 0.0,
            lambda0_star: 0.0,
        }
    }

    pub fn gbm(z0: f64, theta: f64, sigma_z: f64, phi0: f64, r: f64) -> Self {
        Self { kind: DriverKind::Gbm, theta, sigma_z, ..Self::constant(z0, phi0, r) }
    }

    /// Parameter invariants plus the moment condition
    /// `E ∫ e^{-(r - λ0* ∨ 0) t} z_t^α dt < ∞`.
    pub fn validate(&self, alpha: f64) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(alpha > 0.0 && alpha < 1.0) {
            return bad(format!("alpha must lie in (0,1), got {alpha}"));
        }
        if !(self.r > self.lambda0_star.max(0.0)) {
            return bad(format!("need r > max(lambda0_star, 0), got r={}, lambda0_star={}", self.r, self.lambda0_star));
        }
        let zero_ok = self.kind == DriverKind::Constant;
        if !(self.z0 > 0.0 || (zero_ok && self.z0 == 0.0)) || !self.z0.is_finite() {
            return bad(format!("z0 must be positive, got {}", self.z0));
        }
        if !(self.phi0 > 0.0) || !self.phi0.is_finite() {
            return bad(format!("phi0 must be positive, got {}", self.phi0));
        }
        if !(self.sigma_z >= 0.0 && self.sigma_phi >= 0.0 && self.jump_std >= 0.0) {
            return bad("volatilities must be >= 0".into());
        }
        if !(self.jump_intensity >= 0.0) {
            return bad("jump intensity must be >= 0".into());
        }
        if !(self.rho.abs() <= 1.0) {
            return bad(format!("correlation must lie in [-1,1], got {}", self.rho));
        }
        let dynamic = [self.theta, self.sigma_z, self.theta_phi, self.sigma_phi, self.jump_intensity];
        match self.kind {
            DriverKind::Constant if dynamic.iter().any(|&v| v != 0.0) => {
                return bad("constant drivers take no drift, volatility or jumps".into());
            }
            DriverKind::Gbm if self.jump_intensity != 0.0 => {
                return bad("gbm drivers take no jumps; use exp-levy-jump-diffusion".into());
            }
            _ => {}
        }
        let growth = self.psi_z(alpha);
        let rate = self.r - self.lambda0_star.max(0.0);
        if !(growth < rate) {
            return bad(format!(
                "moment condition fails: growth rate of E z^alpha is {growth:.6} >= {rate:.6}"
            ));
        }
        Ok(())
    }

    fn mgf_jump(&self, a: f64) -> f64 {
        (a * self.jump_mean + 0.5 * a * a * self.jump_std * self.jump_std).exp()
    }

    /// Drift of `log z` per unit time.
    pub fn log_drift_z(&self) -> f64 {
        self.theta - 0.5 * self.sigma_z.powi(2) - self.jump_intensity * (self.mgf_jump(1.0) - 1.0)
    }

    /// Drift of `log φ` per unit time.
    pub fn log_drift_phi(&self) -> f64 {
        self.theta_phi
            - 0.5 * self.sigma_phi.powi(2)
            - self.jump_intensity * (self.mgf_jump(self.phi_jump_beta) - 1.0)
    }

    /// `ψ(a) = t^{-1} log E[(z_t/z0)^a]`.
    pub fn psi_z(&self, a: f64) -> f64 {
        a * self.log_drift_z() + 0.5 * a * a * self.sigma_z.powi(2) + self.jump_intensity * (self.mgf_jump(a) - 1.0)
    }

    /// Drift and variance rate of `log η = α log z - log φ`, and whether it
    /// has a jump part.
    pub fn log_eta(&self, alpha: f64) -> (f64, f64, bool) {
        let mu = alpha * self.log_drift_z() - self.log_drift_phi();
        let var = (alpha * self.sigma_z).powi(2) - 2.0 * alpha * self.rho * self.sigma_z * self.sigma_phi
            + self.sigma_phi.powi(2);
        let jumps = self.jump_intensity > 0.0 && alpha != self.phi_jump_beta;
        (mu, var.max(0.0), jumps)
    }

    pub fn has_noise(&self) -> bool {
        self.sigma_z > 0.0 || self.sigma_phi > 0.0 || self.jump_intensity > 0.0
    }

    /// `φ` is deterministic, or perfectly (anti)correlated with `z` and
    /// jump-free, so one factor drives both.
    pub fn is_one_factor(&self) -> bool {
        self.jump_intensity == 0.0 && (self.sigma_phi == 0.0 || self.rho.abs() == 1.0)
    }

    /// One exact step of both log-processes.
    fn step<R: Rng>(&self, dt: f64, diff: &mut R, jump: &mut R, lz: &mut f64, lphi: &mut f64) {
        let w1: f64 = diff.sample(StandardNormal);
        let w2: f64 = diff.sample(StandardNormal);
        let sq = dt.sqrt();
        let mut jz = 0.0;
        if self.jump_intensity > 0.0 {
            let count = Poisson::new(self.jump_intensity * dt)
                .map(|p| p.sample(jump))
                .unwrap_or(0.0);
            let e: f64 = jump.sample(StandardNormal);
            if count > 0.0 {
                jz = count * self.jump_mean + count.sqrt() * self.jump_std * e;
            }
        }
        *lz += self.log_drift_z() * dt + self.sigma_z * sq * w1 + jz;
        let w = self.rho * w1 + (1.0 - self.rho * self.rho).max(0.0).sqrt() * w2;
        *lphi += self.log_drift_phi() * dt + self.sigma_phi * sq * w + self.phi_jump_beta * jz;
    }

    /// Fill `z`, `φ` from index 0 of the output slices, starting at the
    /// given values, with `out.len() - 1` steps.
    pub fn fill_path(&self, dt: f64, z_start: f64, phi_start: f64, rngs: &mut PathRng, z: &mut [f64], phi: &mut [f64]) {
        z[0] = z_start;
        phi[0] = phi_start;
        if self.kind == DriverKind::Constant {
            z.fill(z_start);
            phi.fill(phi_start);
            return;
        }
        let (mut lz, mut lphi) = (z_start.ln(), phi_start.ln());
        for i in 1..z.len() {
            self.step(dt, &mut rngs.diffusion, &mut rngs.jumps, &mut lz, &mut lphi);
            z[i] = lz.exp();
            phi[i] = lphi.exp();
        }
    }
}

/// Independent diffusion and jump substreams of one scenario, so a change in
/// the jump intensity leaves the Brownian increments untouched.
pub struct PathRng {
    pub diffusion: ChaCha8Rng,
    pub jumps: ChaCha8Rng,
}

impl PathRng {
    pub fn new(seed: u64, scenario: u64) -> Self {
        let mut diffusion = ChaCha8Rng::seed_from_u64(seed);
        diffusion.set_stream(2 * scenario);
        let mut jumps = ChaCha8Rng::seed_from_u64(seed);
        jumps.set_stream(2 * scenario + 1);
        Self { diffusion, jumps }
    }
}

/// Simulated `(z, φ)` paths, stored scenario-major with `M + 1` values each.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub time: TimeGrid,
    pub seed: u64,
    n: usize,
    z: Vec<f64>,
    phi: Vec<f64>,
}

impl ScenarioSet {
    pub fn from_paths(time: TimeGrid, seed: u64, z: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        let m = time.len();
        if z.len() != phi.len() || !z.len().is_multiple_of(m) {
            return Err(Error::ShapeMismatch { expected: m, got: z.len() });
        }
        Ok(Self { time, seed, n: z.len() / m, z, phi })
    }

    pub fn len(&self) -> usize {
        self.n
    }
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
    pub fn z_path(&self, s: usize) -> &[f64] {
        let m = self.time.len();
        &self.z[s * m..(s + 1) * m]
    }
    pub fn phi_path(&self, s: usize) -> &[f64] {
        let m = self.time.len();
        &self.phi[s * m..(s + 1) * m]
    }
    pub fn min_value(&self) -> f64 {
        self.z.iter().chain(&self.phi).copied().fold(f64::INFINITY, f64::min)
    }

    /// Long-format CSV `scenario,time,z,phi` for the first `cap` scenarios.
    pub fn write_csv<W: Write>(&self, out: W, cap: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario", "time", "z", "phi"])?;
        for s in 0..self.n.min(cap) {
            for (i, (z, p)) in self.z_path(s).iter().zip(self.phi_path(s)).enumerate() {
                w.write_record([s.to_string(), self.time.time(i).to_string(), z.to_string(), p.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `n` scenarios on `time`, scenario `s` drawing from substreams of `seed`.
pub fn simulate(model: &DriverModel, time: TimeGrid, n: usize, seed: u64) -> Result<ScenarioSet> {
    if model.z0 < 0.0 || !(model.phi0 > 0.0) {
        return Err(Error::InvalidParameter("driver initial values must be positive".into()));
    }
    let m = time.len();
    let dt = time.dt();
    let mut z = vec![0.0; n * m];
    let mut phi = vec![0.0; n * m];
    z.par_chunks_mut(m)
        .zip(phi.par_chunks_mut(m))
        .enumerate()
        .for_each(|(s, (zs, ps))| {
            let mut rng = PathRng::new(seed, s as u64);
            model.fill_path(dt, model.z0, model.phi0, &mut rng, zs, ps);
        });
    ScenarioSet::from_paths(time, seed, z, phi)
}

/// `η = z^α / φ` per scenario and grid time, scenario-major.
pub fn eta_ratio(s: &ScenarioSet, alpha: f64) -> Vec<f64> {
    s.z.iter().zip(&s.phi).map(|(z, p)| z.powf(alpha) / p).collect()
}
