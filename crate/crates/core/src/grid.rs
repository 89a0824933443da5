//! Discretized measure space `(D, μ)` and the lattice operations on
//! `X = L^p(D, μ)` and its dual `X* = L^{p*}(D, μ)`.
//!
//! Both cones share one nodal representation on the same grid; the exponent
//! only enters norms. Quadrature is fixed-weight nodal (midpoint rule), which
//! keeps the pairing exactly bilinear and order preserving.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values at or below this threshold are treated as zero when a negative
/// power (or the profit gradient) is requested.
pub const EPS_POS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    /// `S^1 ≅ R/Z`, nodes `j/n` on `[0, 1)`.
    Circle,
    /// `(0, L)` with `L = μ(D)`, nodes at cell midpoints.
    Interval,
    /// A finite set of atoms without spatial structure.
    AbstractFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    geometry: Geometry,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    p: f64,
}

impl SpatialGrid {
    /// Uniform grid with weights `total_mass / n`.
    pub fn new(geometry: Geometry, n: usize, total_mass: f64, p: f64) -> Result<Arc<Self>> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("grid needs n >= 2 nodes, got {n}")));
        }
        if !(p > 1.0) || !p.is_finite() {
            return Err(Error::InvalidParameter(format!("exponent p must lie in (1, inf), got {p}")));
        }
        if !(total_mass > 0.0) || !total_mass.is_finite() {
            return Err(Error::InvalidParameter(format!("total mass must be positive, got {total_mass}")));
        }
        let h = total_mass / n as f64;
        let nodes = match geometry {
            Geometry::Circle => (0..n).map(|j| j as f64 / n as f64).collect(),
            Geometry::Interval => (0..n).map(|j| (j as f64 + 0.5) * h).collect(),
            Geometry::AbstractFinite => (0..n).map(|j| j as f64).collect(),
        };
        Ok(Arc::new(Self { geometry, nodes, weights: vec![h; n], p }))
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn p(&self) -> f64 {
        self.p
    }
    /// Conjugate exponent `p / (p - 1)`.
    pub fn p_star(&self) -> f64 {
        self.p / (self.p - 1.0)
    }
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
    /// Length of the underlying interval (or `1` for the circle).
    pub fn period(&self) -> f64 {
        match self.geometry {
            Geometry::Circle => 1.0,
            _ => self.total_mass(),
        }
    }
}

fn same_grid(a: &Arc<SpatialGrid>, b: &Arc<SpatialGrid>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

fn weighted_norm(values: &[f64], weights: &[f64], p: f64) -> f64 {
    values
        .iter()
        .zip(weights)
        .map(|(v, w)| v.abs().powf(p) * w)
        .sum::<f64>()
        .powf(1.0 / p)
}

macro_rules! nodal_field {
    ($name:ident, $exponent:ident) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            grid: Arc<SpatialGrid>,
            values: Vec<f64>,
        }

        impl $name {
            pub fn new(grid: Arc<SpatialGrid>, values: Vec<f64>) -> Result<Self> {
                if values.len() != grid.len() {
                    return Err(Error::ShapeMismatch { expected: grid.len(), got: values.len() });
                }
                Ok(Self { grid, values })
            }

            pub fn constant(grid: &Arc<SpatialGrid>, c: f64) -> Self {
                Self { grid: grid.clone(), values: vec![c; grid.len()] }
            }

            pub fn zeros(grid: &Arc<SpatialGrid>) -> Self {
                Self::constant(grid, 0.0)
            }

            /// The unit vector `1`.
            pub fn ones(grid: &Arc<SpatialGrid>) -> Self {
                Self::constant(grid, 1.0)
            }

            pub fn from_fn(grid: &Arc<SpatialGrid>, mut f: impl FnMut(f64) -> f64) -> Self {
                let values = grid.nodes().iter().map(|&x| f(x)).collect();
                Self { grid: grid.clone(), values }
            }

            pub fn grid(&self) -> &Arc<SpatialGrid> {
                &self.grid
            }
            pub fn values(&self) -> &[f64] {
                &self.values
            }
            pub fn values_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }
            pub fn into_values(self) -> Vec<f64> {
                self.values
            }
            pub fn len(&self) -> usize {
                self.values.len()
            }
            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            fn check(&self, other: &Self) -> Result<()> {
                if same_grid(&self.grid, &other.grid) {
                    Ok(())
                } else {
                    Err(Error::GridMismatch)
                }
            }

            fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
                self.check(other)?;
                let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
                Ok(Self { grid: self.grid.clone(), values })
            }

            pub fn add(&self, other: &Self) -> Result<Self> {
                self.zip_with(other, |a, b| a + b)
            }
            pub fn sub(&self, other: &Self) -> Result<Self> {
                self.zip_with(other, |a, b| a - b)
            }
            /// Pointwise supremum.
            pub fn max(&self, other: &Self) -> Result<Self> {
                self.zip_with(other, f64::max)
            }
            /// Pointwise infimum.
            pub fn min(&self, other: &Self) -> Result<Self> {
                self.zip_with(other, f64::min)
            }
            /// `self + a * other`.
            pub fn axpy(&self, a: f64, other: &Self) -> Result<Self> {
                self.zip_with(other, |x, y| x + a * y)
            }
            pub fn scale(&self, a: f64) -> Self {
                self.map(|v| a * v)
            }
            pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
                Self { grid: self.grid.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
            }

            /// Pointwise power `k ↦ k^s`. Negative exponents require strictly
            /// positive values (above [`EPS_POS`]); nonnegative ones require `k >= 0`.
            pub fn powf(&self, s: f64) -> Result<Self> {
                for (i, &v) in self.values.iter().enumerate() {
                    if s < 0.0 && v <= EPS_POS {
                        return Err(Error::Domain(format!(
                            "power {s} of non-positive value {v:e} at node {i}"
                        )));
                    }
                    if s >= 0.0 && v < 0.0 && s.fract() != 0.0 {
                        return Err(Error::Domain(format!(
                            "fractional power {s} of negative value {v:e} at node {i}"
                        )));
                    }
                }
                Ok(self.map(|v| v.powf(s)))
            }

            /// Norm in the space this field belongs to.
            pub fn norm(&self) -> f64 {
                weighted_norm(&self.values, self.grid.weights(), self.grid.$exponent())
            }

            /// Weighted `L^q` norm for an arbitrary exponent `q >= 1`.
            pub fn norm_q(&self, q: f64) -> f64 {
                weighted_norm(&self.values, self.grid.weights(), q)
            }

            pub fn norm_inf(&self) -> f64 {
                self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
            }

            pub fn is_nonneg(&self) -> bool {
                self.values.iter().all(|&v| v >= 0.0)
            }

            pub fn min_value(&self) -> f64 {
                self.values.iter().copied().fold(f64::INFINITY, f64::min)
            }

            pub fn max_value(&self) -> f64 {
                self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }

            /// `∫_D v dμ`.
            pub fn integral(&self) -> f64 {
                self.values.iter().zip(self.grid.weights()).map(|(v, w)| v * w).sum()
            }

            pub fn to_record(&self) -> FieldRecord {
                FieldRecord {
                    geometry: self.grid.geometry(),
                    nodes: self.grid.nodes().to_vec(),
                    weights: self.grid.weights().to_vec(),
                    values: self.values.clone(),
                }
            }

            /// CSV rows `node,weight,value`.
            pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
                self.to_record().write_csv(out)
            }
        }
    };
}

nodal_field!(Field, p);
nodal_field!(DualField, p_star);

impl Field {
    /// Same nodal values read as an element of the dual space.
    pub fn to_dual(&self) -> DualField {
        DualField { grid: self.grid.clone(), values: self.values.clone() }
    }

    /// `norm_p`, the norm of `X`.
    pub fn norm_p(&self) -> f64 {
        self.norm()
    }
}

impl DualField {
    pub fn to_primal(&self) -> Field {
        Field { grid: self.grid.clone(), values: self.values.clone() }
    }
}

/// Duality pairing `<f, g> = Σ f_i g_i μ_i`.
pub fn pairing(f: &DualField, g: &Field) -> Result<f64> {
    if !same_grid(f.grid(), g.grid()) {
        return Err(Error::GridMismatch);
    }
    Ok(pair_slices(f.values(), g.values(), f.grid().weights()))
}

pub(crate) fn pair_slices(f: &[f64], g: &[f64], w: &[f64]) -> f64 {
    f.iter().zip(g).zip(w).map(|((a, b), m)| a * b * m).sum()
}

/// Serialized form `{geometry, nodes, weights, values}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub geometry: Geometry,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub values: Vec<f64>,
}

impl FieldRecord {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node", "weight", "value"])?;
        for ((x, m), v) in self.nodes.iter().zip(&self.weights).zip(&self.values) {
            w.write_record([x.to_string(), m.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn into_field(self, grid: &Arc<SpatialGrid>) -> Result<Field> {
        if self.geometry != grid.geometry() || self.nodes.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        Field::new(grid.clone(), self.values)
    }
}
