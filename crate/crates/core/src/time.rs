//! Uniform time grids and the discounted cell weights shared by every
//! time integral in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `0 = t_0 < ... < t_M = t_max`, uniform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_max: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_max: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("time grid needs at least one step".into()));
        }
        if !(t_max > 0.0) || !t_max.is_finite() {
            return Err(Error::InvalidParameter(format!("t_max must be positive, got {t_max}")));
        }
        Ok(Self { t_max, steps })
    }

    /// Horizon `max(t_user, ln(1/tol) / (r - λ0*))` making the neglected
    /// discounted tail smaller than `tol`.
    pub fn truncated(t_user: f64, tol: f64, r: f64, lambda0_star: f64, steps: usize) -> Result<Self> {
        let gap = r - lambda0_star;
        if !(gap > 0.0) {
            return Err(Error::InvalidParameter(format!("need r > lambda0_star, got r={r}, lambda0_star={lambda0_star}")));
        }
        if !(tol > 0.0 && tol < 1.0) {
            return Err(Error::InvalidParameter(format!("tail tolerance must lie in (0,1), got {tol}")));
        }
        Self::new(t_user.max((1.0 / tol).ln() / gap), steps)
    }

    pub fn dt(&self) -> f64 {
        self.t_max / self.steps as f64
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.t_max
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }

    /// Index of a grid time; atoms off the grid are rejected.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = t / self.dt();
        let i = x.round();
        if i < 0.0 || i > self.steps as f64 || (x - i).abs() > 1e-9 {
            return Err(Error::OffGrid(t));
        }
        Ok(i as usize)
    }

    /// First grid index with `t_i >= t` (clamped to the last node).
    pub fn ceil_index(&self, t: f64) -> usize {
        let x = t / self.dt();
        let i = if (x - x.round()).abs() <= 1e-9 { x.round() } else { x.ceil() };
        (i.max(0.0) as usize).min(self.steps)
    }

    /// `q_i = ∫_{t_i}^{t_{i+1}} e^{-rt} dt` for the `M` cells; processes are
    /// held at their left-node value on each cell.
    pub fn discount_weights(&self, r: f64) -> Vec<f64> {
        (0..self.steps).map(|i| exp_integral(r, self.time(i), self.time(i + 1))).collect()
    }
}

/// `∫_a^b e^{-rt} dt`, stable for small `r`.
pub fn exp_integral(r: f64, a: f64, b: f64) -> f64 {
    if r == 0.0 {
        return b - a;
    }
    // e^{-ra} (1 - e^{-r(b-a)}) / r
    (-r * a).exp() * -(-r * (b - a)).exp_m1() / r
}

/// Composite midpoint rule for `q(dt) = e^{-rt} dt` on `[0, t_max]` with the
/// exact cell masses as weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeQuadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TimeQuadrature {
    pub fn midpoint(r: f64, t_max: f64, n: usize) -> Result<Self> {
        let g = TimeGrid::new(t_max, n)?;
        let nodes = (0..n).map(|i| (i as f64 + 0.5) * g.dt()).collect();
        Ok(Self { nodes, weights: g.discount_weights(r) })
    }
}
