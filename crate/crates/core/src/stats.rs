use serde::{Deserialize, Serialize};

/// Sample mean with its standard error (sample standard deviation / sqrt(n)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    /// Ordered two-pass reduction, so results do not depend on thread scheduling.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self { mean: f64::NAN, stderr: f64::NAN, n };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, stderr: 0.0, n };
        }
        let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
        let sd = (ss / (n as f64 - 1.0)).sqrt();
        Self { mean, stderr: sd / (n as f64).sqrt(), n }
    }

    pub fn exact(value: f64) -> Self {
        Self { mean: value, stderr: 0.0, n: 1 }
    }

    /// `sqrt(se_a^2 + se_b^2)`.
    pub fn pooled_stderr(&self, other: &Estimate) -> f64 {
        self.stderr.hypot(other.stderr)
    }

    pub fn within(&self, target: f64, k_sigma: f64, abs_tol: f64) -> bool {
        (self.mean - target).abs() <= k_sigma * self.stderr + abs_tol
    }
}

/// Outcome of a numerical check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn is_fail(self) -> bool {
        self == Verdict::Fail
    }
}
