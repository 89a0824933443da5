//! JSON run configuration and its content hash.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bek::{LatticeConfig, StoppingRule};
use crate::drivers::DriverModel;
use crate::error::{Error, Result};
use crate::foc::{FocConfig, TestKind};
use crate::grid::{Field, Geometry, SpatialGrid};
use crate::payoff::ProblemSpec;
use crate::policy::Perturbation;
use crate::semigroup::{OperatorConfig, OperatorSpec};
use crate::time::TimeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub geometry: Geometry,
    pub n: usize,
    #[serde(default = "one")]
    pub total_mass: f64,
    #[serde(default = "two")]
    pub p: f64,
}

/// Initial capacity `y`, by name or by nodal values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialShape {
    Constant { value: f64 },
    /// `mean + amplitude cos(2π modes x / L)`.
    Cosine {
        mean: f64,
        amplitude: f64,
        #[serde(default = "one_usize")]
        modes: usize,
    },
    /// `base + height` on `x / L ∈ [lo, hi)`.
    Step { base: f64, height: f64, lo: f64, hi: f64 },
    Values { values: Vec<f64> },
}

impl InitialShape {
    pub fn field(&self, grid: &Arc<SpatialGrid>) -> Result<Field> {
        let l = grid.period();
        match self {
            InitialShape::Constant { value } => Ok(Field::constant(grid, *value)),
            InitialShape::Cosine { mean, amplitude, modes } => {
                Ok(Field::from_fn(grid, |x| mean + amplitude * (2.0 * PI * *modes as f64 * x / l).cos()))
            }
            InitialShape::Step { base, height, lo, hi } => {
                Ok(Field::from_fn(grid, |x| if (*lo..*hi).contains(&(x / l)) { base + height } else { *base }))
            }
            InitialShape::Values { values } => {
                if values.len() != grid.len() {
                    return Err(Error::Config(format!(
                        "problem.y has {} values but the grid has {} nodes",
                        values.len(),
                        grid.len()
                    )));
                }
                Field::new(grid.clone(), values.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub y: InitialShape,
    pub alpha: f64,
}

/// `T_max = max(t_user, log(1/tail_tol)/(r - λ0*))` split into `steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_user: f64,
    #[serde(default = "tail_tol")]
    pub tail_tol: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Constant drivers use the closed form, all others the κ-method.
    #[default]
    Auto,
    Constant,
    Kappa,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub levels: usize,
    pub span: f64,
    pub tol_eq: f64,
    pub max_widen: usize,
    pub kappa_bracket: [f64; 2],
    /// Multiplies the solved signal before the policy is built; anything
    /// other than 1 yields a deliberately wrong candidate.
    pub signal_scale: f64,
    pub residual_rules: Vec<StoppingRule>,
    /// Absolute residual slack, relative to `φ0`.
    pub residual_tol: f64,
    /// Scale of the false signal that the residual check must reject.
    pub false_scale: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let lat = LatticeConfig::default();
        Self {
            method: Method::Auto,
            levels: lat.levels,
            span: lat.span,
            tol_eq: lat.tol_eq,
            max_widen: lat.max_widen,
            kappa_bracket: [0.1, 10.0],
            signal_scale: 1.0,
            residual_rules: vec![StoppingRule::Zero, StoppingRule::FirstHitting { factor: 1.2 }],
            residual_tol: 1e-3,
            false_scale: 2.0,
        }
    }
}

impl SolverConfig {
    pub fn lattice(&self) -> LatticeConfig {
        LatticeConfig { levels: self.levels, span: self.span, tol_eq: self.tol_eq, max_widen: self.max_widen }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationConfig {
    pub foc: FocConfig,
    pub perturbations: Vec<Perturbation>,
    /// Appended to the standard battery.
    pub extra_tests: Vec<TestKind>,
    pub state_times: Vec<f64>,
    pub state_scenarios: usize,
    /// Scenarios written to the long-format CSVs.
    pub csv_scenarios: usize,
    pub psi_stride: usize,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            foc: FocConfig::default(),
            perturbations: Perturbation::standard(),
            extra_tests: Vec::new(),
            state_times: vec![0.0, 0.5, 1.0, 2.0],
            state_scenarios: 8,
            csv_scenarios: 20,
            psi_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub operator: OperatorConfig,
    pub problem: ProblemConfig,
    pub drivers: DriverModel,
    pub time: TimeConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub verification: VerificationConfig,
    pub scenarios: usize,
    #[serde(default)]
    pub seed: u64,
    /// Thread count; results do not depend on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn one_usize() -> usize {
    1
}
fn tail_tol() -> f64 {
    1e-6
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON with `workers` and `output` cleared,
    /// since neither changes any result.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = None;
        c.output = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Checks the cross-field constraints serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scenarios == 0 {
            return bad("scenarios must be positive".into());
        }
        if self.time.steps == 0 {
            return bad("time.steps must be positive".into());
        }
        if !(self.solver.signal_scale > 0.0) {
            return bad(format!("solver.signal_scale must be positive, got {}", self.solver.signal_scale));
        }
        if self.verification.psi_stride == 0 {
            return bad("verification.psi_stride must be positive".into());
        }
        if let Some(0) = self.workers {
            return bad("workers must be positive".into());
        }
        let (l0, l0s) = (self.operator.lambda0, self.operator.lambda0_star);
        if self.drivers.lambda0 != 0.0 && Some(self.drivers.lambda0) != l0 {
            return bad("drivers.lambda0 disagrees with operator.lambda0; set it on the operator only".into());
        }
        if self.drivers.lambda0_star != 0.0 && Some(self.drivers.lambda0_star) != l0s {
            return bad("drivers.lambda0_star disagrees with operator.lambda0_star; set it on the operator only".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Arc<SpatialGrid>> {
        let g = &self.grid;
        SpatialGrid::new(g.geometry, g.n, g.total_mass, g.p)
    }

    pub fn operator(&self) -> Result<Arc<OperatorSpec>> {
        Ok(Arc::new(OperatorSpec::new(&self.grid()?, self.operator.clone())?))
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        let l0s = self.operator.lambda0_star.unwrap_or(0.0);
        TimeGrid::truncated(self.time.t_user, self.time.tail_tol, self.drivers.r, l0s, self.time.steps)
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        self.validate()?;
        let op = self.operator()?;
        let y = self.problem.y.field(op.grid())?;
        ProblemSpec::new(op, y, self.problem.alpha, self.drivers.clone(), self.time_grid()?, self.scenarios, self.seed)
    }
}
