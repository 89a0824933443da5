//! Generators `A` and the maps `e^{tA}`, `e^{tA*}` on grid fields.
//!
//! Every variant is realized as a dense propagator matrix `P(t)` acting on
//! nodal values; the adjoint under the μ-weighted pairing is
//! `P* = W^{-1} P^T W`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DualField, Field, Geometry, SpatialGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    ShiftGroupCircle,
    IntegralKernel,
    HeatCircle,
    DirichletLaplacianInterval,
}

impl Variant {
    pub fn is_group(self) -> bool {
        matches!(self, Variant::ShiftGroupCircle | Variant::IntegralKernel)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ShiftGroupCircle => "shift-group-circle",
            Variant::IntegralKernel => "integral-kernel",
            Variant::HeatCircle => "heat-circle",
            Variant::DirichletLaplacianInterval => "dirichlet-laplacian-interval",
        }
    }
}

/// Kernel `a(x, y)` of `(A f)(x) = ∫ a(x, y) f(y) μ(dy)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    /// `a ≡ c`.
    Constant { c: f64 },
    /// `a(x, y) = c (1 + b cos 2π(x - y))`, `|b| <= 1`; rows and columns
    /// integrate to `c μ(D)` on a uniform circle grid.
    CirculantCosine { c: f64, b: f64 },
    /// Explicit nodal values `a(x_i, x_j)`.
    Matrix { values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftInterpolation {
    /// Band-limited trigonometric interpolation: exact group law.
    #[default]
    Trigonometric,
    /// Shift by the nearest whole number of nodes: exactly positive.
    Nearest,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorParams {
    pub kernel: Option<KernelSpec>,
    /// Heat: `a` in the symbol `e^{-2π² k² a t}` (default 1).
    /// Dirichlet: `D` in `A = D Δ` (default 0.5).
    pub diffusion: Option<f64>,
    pub interpolation: ShiftInterpolation,
}

/// Serialized operator description `{variant, params, lambda0, lambda0_star}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub variant: Variant,
    #[serde(default)]
    pub params: OperatorParams,
    #[serde(default)]
    pub lambda0: Option<f64>,
    #[serde(default)]
    pub lambda0_star: Option<f64>,
}

#[derive(Debug, Clone)]
enum Realization {
    /// First column of a circulant operator as a function of t.
    Circulant { heat: Option<f64>, nearest: bool },
    /// Weighted generator matrix `A_ij = a(x_i, x_j) μ_j`.
    Kernel(DMatrix<f64>),
    /// Sine basis on midpoints plus eigenvalues.
    Sine { basis: DMatrix<f64>, inverse: DMatrix<f64>, eigen: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct OperatorSpec {
    config: OperatorConfig,
    grid: Arc<SpatialGrid>,
    realization: Realization,
}

impl OperatorSpec {
    pub fn new(grid: &Arc<SpatialGrid>, config: OperatorConfig) -> Result<Self> {
        let n = grid.len();
        let p = &config.params;
        let realization = match config.variant {
            Variant::ShiftGroupCircle | Variant::HeatCircle => {
                if grid.geometry() != Geometry::Circle {
                    return Err(Error::InvalidParameter(format!(
                        "{} requires a circle grid",
                        config.variant.name()
                    )));
                }
                let heat = if config.variant == Variant::HeatCircle {
                    let a = p.diffusion.unwrap_or(1.0);
                    if !(a >= 0.0) {
                        return Err(Error::InvalidParameter(format!("diffusion must be >= 0, got {a}")));
                    }
                    Some(a)
                } else {
                    None
                };
                Realization::Circulant { heat, nearest: p.interpolation == ShiftInterpolation::Nearest }
            }
            Variant::IntegralKernel => {
                let spec = p.kernel.as_ref().ok_or_else(|| {
                    Error::InvalidParameter("integral-kernel requires params.kernel".into())
                })?;
                let a = kernel_values(grid, spec)?;
                if a.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::InvalidParameter("kernel must be nonnegative entrywise".into()));
                }
                let w = grid.weights();
                Realization::Kernel(DMatrix::from_fn(n, n, |i, j| a[(i, j)] * w[j]))
            }
            Variant::DirichletLaplacianInterval => {
                if grid.geometry() != Geometry::Interval {
                    return Err(Error::InvalidParameter(
                        "dirichlet-laplacian-interval requires an interval grid".into(),
                    ));
                }
                let d = p.diffusion.unwrap_or(0.5);
                if !(d > 0.0) {
                    return Err(Error::InvalidParameter(format!("diffusion must be > 0, got {d}")));
                }
                let len = grid.total_mass();
                let nf = n as f64;
                let basis = DMatrix::from_fn(n, n, |j, k| {
                    ((k + 1) as f64 * PI * (j as f64 + 0.5) / nf).sin()
                });
                // Discrete orthogonality of the sine basis on midpoints.
                let inverse = DMatrix::from_fn(n, n, |k, j| {
                    let s = if k + 1 == n { 1.0 / nf } else { 2.0 / nf };
                    s * basis[(j, k)]
                });
                let eigen = (1..=n).map(|k| -d * (k as f64 * PI / len).powi(2)).collect();
                Realization::Sine { basis, inverse, eigen }
            }
        };
        Ok(Self { config, grid: grid.clone(), realization })
    }

    pub fn config(&self) -> &OperatorConfig {
        &self.config
    }
    pub fn variant(&self) -> Variant {
        self.config.variant
    }
    pub fn grid(&self) -> &Arc<SpatialGrid> {
        &self.grid
    }
    pub fn is_group(&self) -> bool {
        self.config.variant.is_group()
    }
    pub fn lambda0(&self) -> Option<f64> {
        self.config.lambda0
    }
    pub fn lambda0_star(&self) -> Option<f64> {
        self.config.lambda0_star
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::InvalidParameter(format!("time must be finite, got {t}")));
        }
        if t < 0.0 && !self.is_group() {
            return Err(Error::NegativeTime(t));
        }
        Ok(())
    }

    /// Dense matrix of `e^{tA}` on nodal values.
    pub fn propagator(&self, t: f64) -> Result<Propagator> {
        self.check_time(t)?;
        let n = self.grid.len();
        let matrix = if t == 0.0 {
            DMatrix::identity(n, n)
        } else {
            match &self.realization {
                Realization::Circulant { heat, nearest } => {
                    let col = if *nearest {
                        let mut c = vec![0.0; n];
                        let s = (t * n as f64).round().rem_euclid(n as f64) as usize;
                        c[s % n] = 1.0;
                        c
                    } else {
                        circulant_column(n, t, *heat)
                    };
                    DMatrix::from_fn(n, n, |i, j| col[(i + n - j) % n])
                }
                Realization::Kernel(a) => expm(&(a * t)),
                Realization::Sine { basis, inverse, eigen } => {
                    let mut scaled = basis.clone();
                    for (k, lam) in eigen.iter().enumerate() {
                        let m = (lam * t).exp();
                        scaled.column_mut(k).scale_mut(m);
                    }
                    scaled * inverse
                }
            }
        };
        Ok(Propagator { matrix, weights: self.grid.weights().to_vec() })
    }

    /// `e^{tA} f`.
    pub fn apply(&self, t: f64, f: &Field) -> Result<Field> {
        self.check_grid(f.grid())?;
        let out = self.propagator(t)?.apply_slice(f.values());
        Field::new(self.grid.clone(), out)
    }

    /// `e^{tA*} f`.
    pub fn apply_adjoint(&self, t: f64, f: &DualField) -> Result<DualField> {
        self.check_grid(f.grid())?;
        let out = self.propagator(t)?.adjoint().apply_slice(f.values());
        DualField::new(self.grid.clone(), out)
    }

    fn check_grid(&self, g: &Arc<SpatialGrid>) -> Result<()> {
        if Arc::ptr_eq(g, &self.grid) || **g == *self.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// `max_t |e^{tA}1 - e^{λ0 t}1|_p` and the adjoint analogue.
    pub fn eigen_unit_check(&self, times: &[f64]) -> Result<EigenReport> {
        let (l0, l0s) = match (self.config.lambda0, self.config.lambda0_star) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::MissingEigenstructure),
        };
        let one = Field::ones(&self.grid);
        let mut report = EigenReport { lambda0: l0, lambda0_star: l0s, primal: 0.0, adjoint: 0.0 };
        for &t in times {
            let p = self.apply(t, &one)?;
            let r = p.sub(&one.scale((l0 * t).exp()))?.norm_p();
            report.primal = report.primal.max(r);
            let q = self.apply_adjoint(t, &one.to_dual())?;
            let r = q.sub(&one.to_dual().scale((l0s * t).exp()))?.norm();
            report.adjoint = report.adjoint.max(r);
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    pub lambda0: f64,
    pub lambda0_star: f64,
    pub primal: f64,
    pub adjoint: f64,
}

/// A fixed-time propagator, reusable across many fields.
#[derive(Debug, Clone)]
pub struct Propagator {
    matrix: DMatrix<f64>,
    weights: Vec<f64>,
}

impl Propagator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut out = vec![0.0; n];
        self.apply_into(x, &mut out);
        out
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        // Column-major storage: accumulate columns.
        for (j, &xj) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.matrix.column(j).iter()) {
                *o += a * xj;
            }
        }
    }

    /// `W^{-1} P^T W`.
    pub fn adjoint(&self) -> Propagator {
        let n = self.weights.len();
        let w = &self.weights;
        let matrix = DMatrix::from_fn(n, n, |i, j| self.matrix[(j, i)] * w[j] / w[i]);
        Propagator { matrix, weights: self.weights.clone() }
    }
}

fn kernel_values(grid: &SpatialGrid, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let n = grid.len();
    let x = grid.nodes();
    match spec {
        KernelSpec::Constant { c } => Ok(DMatrix::from_element(n, n, *c)),
        KernelSpec::CirculantCosine { c, b } => {
            if b.abs() > 1.0 {
                return Err(Error::InvalidParameter(format!("|b| must be <= 1, got {b}")));
            }
            let period = grid.period();
            Ok(DMatrix::from_fn(n, n, |i, j| {
                c * (1.0 + b * (2.0 * PI * (x[i] - x[j]) / period).cos())
            }))
        }
        KernelSpec::Matrix { values } => {
            if values.len() != n || values.iter().any(|r| r.len() != n) {
                return Err(Error::ShapeMismatch { expected: n * n, got: values.iter().map(Vec::len).sum() });
            }
            Ok(DMatrix::from_fn(n, n, |i, j| values[i][j]))
        }
    }
}

/// First column `c[d]` of the circulant `e^{tA}` for the circle shift
/// (`heat = None`, multiplier `e^{-2πikt}`) or heat (`e^{-2π²k²at}`).
/// The Nyquist mode of an even grid is held fixed by the shift.
fn circulant_column(n: usize, t: f64, heat: Option<f64>) -> Vec<f64> {
    let nf = n as f64;
    let half = (n - 1) / 2;
    let nyquist = if n.is_multiple_of(2) {
        match heat {
            Some(a) => (-2.0 * PI * PI * (nf / 2.0).powi(2) * a * t).exp(),
            None => 1.0,
        }
    } else {
        0.0
    };
    let mut col = vec![0.0; n];
    for (d, c) in col.iter_mut().enumerate() {
        let mut s = 1.0;
        for k in 1..=half {
            let kf = k as f64;
            let phase = 2.0 * PI * kf * d as f64 / nf;
            s += match heat {
                Some(a) => 2.0 * (-2.0 * PI * PI * kf * kf * a * t).exp() * phase.cos(),
                None => 2.0 * (phase - 2.0 * PI * kf * t).cos(),
            };
        }
        if n.is_multiple_of(2) {
            s += nyquist * if d % 2 == 0 { 1.0 } else { -1.0 };
        }
        *c = s / nf;
    }
    col
}

/// Matrix exponential by scaling and squaring with a Taylor series
/// truncated once the next term drops below `1e-14` of the partial sum.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.iter().fold(0.0f64, |m, v| m.max(v.abs())) * n as f64;
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let b = a * scale;
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..200 {
        term = &term * &b / k as f64;
        sum += &term;
        if term.norm() < 1e-14 * sum.norm() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}
