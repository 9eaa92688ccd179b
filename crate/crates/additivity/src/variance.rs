//! Model-based (inverse expected information) and robust sandwich
//! covariance matrices, plus Wald tests and confidence intervals.
//!
//! Expected information defines both the model-based covariance and the
//! bread of the sandwich; for the canonical logit link this coincides with
//! the observed information, and for identity/log links it is the stable
//! choice. No small-sample correction is applied to the sandwich, and the
//! normal (not t) reference is used throughout.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::glm::{cells_from_beta, Estimation, FitCore, FitResult, ModelSpec, Observations};
use crate::table::CELL_ORDER;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceFlavor {
    ModelBased,
    RobustIndependence,
}

impl std::fmt::Display for CovarianceFlavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CovarianceFlavor::ModelBased => "model_based",
            CovarianceFlavor::RobustIndependence => "robust_independence",
        })
    }
}

/// 4x4 symmetric PSD covariance of the coefficients on the link scale.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceMatrix {
    pub flavor: CovarianceFlavor,
    entries: [[f64; 4]; 4],
}

impl CovarianceMatrix {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i][j]
    }

    /// Variance of coefficient `j` (diagonal entry).
    pub fn variance(&self, j: usize) -> f64 {
        self.entries[j][j]
    }

    /// Variance of the linear combination `w . beta`.
    pub fn contrast_variance(&self, w: &[f64; 4]) -> f64 {
        let mut v = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                v += w[i] * self.entries[i][j] * w[j];
            }
        }
        v
    }

    pub fn rows(&self) -> &[[f64; 4]; 4] {
        &self.entries
    }
}

/// Rows of the inverse cell design (cells in canonical order -> beta).
const CELL_TO_BETA: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [-1.0, 1.0, 0.0, 0.0],
    [-1.0, 0.0, 1.0, 0.0],
    [1.0, -1.0, -1.0, 1.0],
];

/// Covariance of beta when the cell-level statistics are independent with
/// variances `d`: `R diag(d) R'` for the design-inverse `R`. Symmetric and
/// PSD by construction.
fn cov_from_cell_variances(d: [f64; 4], flavor: CovarianceFlavor) -> CovarianceMatrix {
    let mut entries = [[0.0; 4]; 4];
    for j in 0..4 {
        for k in j..4 {
            let mut s = 0.0;
            for i in 0..4 {
                s += CELL_TO_BETA[j][i] * CELL_TO_BETA[k][i] * d[i];
            }
            entries[j][k] = s;
            entries[k][j] = s;
        }
    }
    CovarianceMatrix { flavor, entries }
}

/// Per-cell squared raw residual sum at fitted mean `mu`:
/// events contribute `(1-mu)^2` each, non-events `mu^2` each. This equals
/// the record-level sum exactly, so aggregated and record-level sandwiches
/// coincide.
fn residual_square_sum(obs: &Observations, i: usize, mu: f64) -> f64 {
    let (e, m) = (obs.events()[i], obs.totals()[i]);
    e * (1.0 - mu) * (1.0 - mu) + (m - e) * mu * mu
}

pub(crate) fn model_covariance_core(
    obs: &Observations,
    spec: &ModelSpec,
    core: &FitCore,
) -> CovarianceMatrix {
    let d: [f64; 4] = std::array::from_fn(|i| match spec.estimation {
        Estimation::MleIrls => {
            let mu = core.mu_work[i];
            let g = spec.link.derivative(mu);
            spec.distribution.variance(mu) * g * g / obs.totals()[i]
        }
        Estimation::Ols => {
            // classical OLS covariance: sigma^2 (X'X)^-1 on individual records
            let n = obs.total_weight();
            let dof = n - 4.0;
            let sigma2 = if dof > 0.0 { core.deviance / dof } else { 0.0 };
            sigma2 / obs.totals()[i]
        }
    });
    cov_from_cell_variances(d, CovarianceFlavor::ModelBased)
}

pub(crate) fn robust_covariance_core(
    obs: &Observations,
    spec: &ModelSpec,
    core: &FitCore,
) -> CovarianceMatrix {
    let d: [f64; 4] = std::array::from_fn(|i| {
        let mu = core.mu_work[i];
        let ssq = residual_square_sum(obs, i, mu);
        match spec.estimation {
            Estimation::MleIrls => {
                let g = spec.link.derivative(mu);
                ssq * g * g / (obs.totals()[i] * obs.totals()[i])
            }
            Estimation::Ols => ssq / (obs.totals()[i] * obs.totals()[i]),
        }
    });
    cov_from_cell_variances(d, CovarianceFlavor::RobustIndependence)
}

fn core_from_fit(fit: &FitResult) -> FitCore {
    let eta = cells_from_beta(fit.beta);
    let mu_work = match fit.spec.estimation {
        Estimation::Ols => eta,
        Estimation::MleIrls => {
            eta.map(|e| fit.spec.distribution.clamp_working(fit.spec.link.inverse(e)))
        }
    };
    FitCore {
        beta: fit.beta,
        mu_work,
        deviance: fit.deviance,
        iterations: fit.iterations,
        boundary: fit.boundary,
    }
}

fn check_information(obs: &Observations, cov: CovarianceMatrix) -> Result<CovarianceMatrix> {
    if cov.rows().iter().flatten().all(|v| v.is_finite()) {
        return Ok(cov);
    }
    // name the cell contributing least information
    let idx = (0..4)
        .min_by(|&a, &b| obs.totals()[a].total_cmp(&obs.totals()[b]))
        .unwrap();
    let (x, z) = CELL_ORDER[idx];
    Err(Error::SingularInformation { x, z })
}

/// Inverse expected Fisher information at the fitted coefficients
/// (classical covariance for OLS fits).
pub fn model_covariance(fit: &FitResult, obs: &Observations) -> Result<CovarianceMatrix> {
    let cov = model_covariance_core(obs, &fit.spec, &core_from_fit(fit));
    check_information(obs, cov)
}

/// Independence-working sandwich `A^-1 B A^-1` with expected-information
/// bread and empirical-residual meat.
pub fn robust_covariance(fit: &FitResult, obs: &Observations) -> Result<CovarianceMatrix> {
    let cov = robust_covariance_core(obs, &fit.spec, &core_from_fit(fit));
    check_information(obs, cov)
}

/// A Wald estimate with its normal-reference test and interval.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WaldResult {
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_two_sided: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    /// Set when the variance is exactly zero.
    pub degenerate: bool,
}

/// Two-sided tail probability of |z| under the standard normal.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// The two-sided critical value `z` with `P(|Z| <= z) = level`
/// (1.959964 at the default 0.95).
pub fn normal_quantile_two_sided(level: f64) -> f64 {
    let target = 0.5 + level / 2.0;
    let mut x = Normal::standard().inverse_cdf(target);
    // polish to full double precision
    for _ in 0..2 {
        let cdf = 0.5 * erfc(-x / std::f64::consts::SQRT_2);
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        x -= (cdf - target) / pdf;
    }
    x
}

/// Wald test and confidence interval for an estimate with known variance.
pub fn wald(estimate: f64, variance: f64, level: f64) -> Result<WaldResult> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidData(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    if variance < 0.0 || !variance.is_finite() {
        return Err(Error::InvalidData(format!(
            "variance must be finite and non-negative, got {variance}"
        )));
    }
    let se = variance.sqrt();
    if se == 0.0 {
        let (z, p) = if estimate == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY * estimate.signum(), 0.0)
        };
        return Ok(WaldResult {
            estimate,
            se,
            z,
            p_two_sided: p,
            ci_low: estimate,
            ci_high: estimate,
            level,
            degenerate: true,
        });
    }
    let z = estimate / se;
    let margin = normal_quantile_two_sided(level) * se;
    Ok(WaldResult {
        estimate,
        se,
        z,
        p_two_sided: two_sided_p(z),
        ci_low: estimate - margin,
        ci_high: estimate + margin,
        level,
        degenerate: false,
    })
}
