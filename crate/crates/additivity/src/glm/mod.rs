//! Estimation strategies for the saturated two-factor design with
//! interaction: binomial IRLS under identity/log/logit links, the
//! identity-link Poisson variant, and ordinary least squares.
//!
//! All strategies share the linear predictor
//! `eta = b0 + b1*x + b2*z + b3*x*z`. Because every observation falls in one
//! of the four exposure cells, fits collapse to the four cell aggregates;
//! record-level input is tallied first, which makes table and record fits
//! agree exactly.

mod link;

pub use link::{Distribution, Link, WORKING_MEAN_EPS};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::table::{ExposureTable, IndividualRecord, CELL_ORDER};
use crate::variance::{self, CovarianceFlavor, CovarianceMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimation {
    MleIrls,
    Ols,
}

impl std::fmt::Display for Estimation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimation::MleIrls => "mle_irls",
            Estimation::Ols => "ols",
        })
    }
}

/// Which model to fit and how hard to try.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ModelSpec {
    pub link: Link,
    pub distribution: Distribution,
    pub estimation: Estimation,
    pub max_iterations: usize,
    /// Relative deviance-change threshold: stop when
    /// `|dev_new - dev_old| / (|dev_new| + 0.1) < tolerance`.
    pub tolerance: f64,
    /// Step halvings allowed per iteration before the fit is declared
    /// stalled at the feasibility boundary. 0 disables halving.
    pub step_halving_max: usize,
}

impl ModelSpec {
    pub fn new(link: Link, distribution: Distribution, estimation: Estimation) -> Self {
        ModelSpec {
            link,
            distribution,
            estimation,
            max_iterations: 100,
            tolerance: 1e-10,
            step_halving_max: 30,
        }
    }

    /// The linear binomial model: risks and risk differences.
    pub fn identity_binomial() -> Self {
        Self::new(Link::Identity, Distribution::Binomial, Estimation::MleIrls)
    }

    /// The log binomial model: relative risks.
    pub fn log_binomial() -> Self {
        Self::new(Link::Log, Distribution::Binomial, Estimation::MleIrls)
    }

    /// Logistic regression: odds ratios.
    pub fn logit_binomial() -> Self {
        Self::new(Link::Logit, Distribution::Binomial, Estimation::MleIrls)
    }

    /// The modified Poisson strategy: identity link, Poisson working
    /// distribution, robust standard errors.
    pub fn identity_poisson() -> Self {
        Self::new(Link::Identity, Distribution::Poisson, Estimation::MleIrls)
    }

    /// Modified least squares: OLS on the binary outcome, robust errors.
    pub fn mls_ols() -> Self {
        Self::new(Link::Identity, Distribution::Binomial, Estimation::Ols)
    }

    pub fn validate(&self) -> Result<()> {
        if self.estimation == Estimation::Ols && self.link != Link::Identity {
            return Err(Error::InvalidSpec(
                "ols estimation requires the identity link".into(),
            ));
        }
        if self.link == Link::Logit && self.distribution != Distribution::Binomial {
            return Err(Error::InvalidSpec(
                "the logit link requires a binomial distribution".into(),
            ));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidSpec("max_iterations must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidSpec("tolerance must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::identity_binomial()
    }
}

/// The convergence knobs of [`ModelSpec`], separable so callers that fit
/// several models can apply one set of controls to all of them.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConvergenceControls {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub step_halving_max: usize,
}

impl Default for ConvergenceControls {
    fn default() -> Self {
        let spec = ModelSpec::identity_binomial();
        ConvergenceControls {
            max_iterations: spec.max_iterations,
            tolerance: spec.tolerance,
            step_halving_max: spec.step_halving_max,
        }
    }
}

impl ModelSpec {
    pub fn with_controls(mut self, controls: &ConvergenceControls) -> Self {
        self.max_iterations = controls.max_iterations;
        self.tolerance = controls.tolerance;
        self.step_halving_max = controls.step_halving_max;
        self
    }
}

/// Per-cell aggregates the fits run on. Both constructors produce the same
/// cell totals for equivalent data, so table and record fits agree exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    totals: [f64; 4],
    events: [f64; 4],
}

impl Observations {
    pub fn from_table(table: &ExposureTable) -> Self {
        let mut totals = [0.0; 4];
        let mut events = [0.0; 4];
        for (i, c) in table.cells().iter().enumerate() {
            totals[i] = c.total as f64;
            events[i] = c.events as f64;
        }
        Observations { totals, events }
    }

    pub fn from_records(records: &[IndividualRecord]) -> Self {
        let mut totals = [0u64; 4];
        let mut events = [0u64; 4];
        for r in records {
            let i = (2 * r.z + r.x) as usize;
            totals[i] += r.weight;
            if r.y == 1 {
                events[i] += r.weight;
            }
        }
        Observations {
            totals: totals.map(|t| t as f64),
            events: events.map(|e| e as f64),
        }
    }

    pub fn totals(&self) -> &[f64; 4] {
        &self.totals
    }

    pub fn events(&self) -> &[f64; 4] {
        &self.events
    }

    pub fn proportions(&self) -> [f64; 4] {
        [
            self.events[0] / self.totals[0],
            self.events[1] / self.totals[1],
            self.events[2] / self.totals[2],
            self.events[3] / self.totals[3],
        ]
    }

    pub fn total_weight(&self) -> f64 {
        self.totals.iter().sum()
    }

    fn check_patterns(&self) -> Result<()> {
        for (i, &(x, z)) in CELL_ORDER.iter().enumerate() {
            if self.totals[i] <= 0.0 {
                return Err(Error::SingularDesign { x, z });
            }
        }
        Ok(())
    }
}

/// Map per-cell values (canonical order) to coefficients of the saturated
/// design; the design matrix is square and invertible, so this is exact.
pub(crate) fn beta_from_cells(v: [f64; 4]) -> [f64; 4] {
    [v[0], v[1] - v[0], v[2] - v[0], v[3] - v[1] - v[2] + v[0]]
}

/// Inverse of [`beta_from_cells`]: linear predictor per cell.
pub(crate) fn cells_from_beta(beta: [f64; 4]) -> [f64; 4] {
    [
        beta[0],
        beta[0] + beta[1],
        beta[0] + beta[2],
        beta[0] + beta[1] + beta[2] + beta[3],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    MaxIterations,
    SingularWeights,
    BoundaryStall,
    Separation,
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FailureReason::MaxIterations => "max_iterations",
            FailureReason::SingularWeights => "singular_weights",
            FailureReason::BoundaryStall => "boundary_stall",
            FailureReason::Separation => "separation",
        })
    }
}

/// A fit that could not be completed, with the last iterate for diagnosis.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceFailure {
    pub reason: FailureReason,
    pub last_beta: [f64; 4],
    pub last_deviance: f64,
}

impl std::fmt::Display for ConvergenceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "reason={}, last deviance {:.6e}",
            self.reason, self.last_deviance
        )
    }
}

impl std::error::Error for ConvergenceFailure {}

/// A converged fit of the saturated design.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub spec: ModelSpec,
    /// (b0, b1, b2, b3) on the link scale.
    pub beta: [f64; 4],
    pub cov_model: CovarianceMatrix,
    pub cov_robust: CovarianceMatrix,
    pub converged: bool,
    pub iterations: usize,
    /// Grouped model deviance (residual sum of squares for OLS).
    pub deviance: f64,
    /// Whether any fitted mean was clamped to the working range during
    /// iteration (observed boundary cells).
    pub boundary: bool,
}

impl FitResult {
    pub fn covariance(&self, flavor: CovarianceFlavor) -> &CovarianceMatrix {
        match flavor {
            CovarianceFlavor::ModelBased => &self.cov_model,
            CovarianceFlavor::RobustIndependence => &self.cov_robust,
        }
    }

    /// Standard error of coefficient `j` under the chosen flavor.
    pub fn se(&self, j: usize, flavor: CovarianceFlavor) -> f64 {
        self.covariance(flavor).variance(j).sqrt()
    }
}

/// Cell means on both scales, canonical cell order.
#[derive(Debug, Clone, Copy)]
pub struct CellPredictions {
    pub link_scale: [f64; 4],
    pub response: [f64; 4],
}

/// Response-scale means for the four cells, obtained by applying the inverse
/// link to the coefficient combinations.
pub fn predict_cells(fit: &FitResult) -> CellPredictions {
    let link_scale = cells_from_beta(fit.beta);
    let response = match fit.spec.estimation {
        Estimation::Ols => link_scale,
        Estimation::MleIrls => link_scale.map(|eta| fit.spec.link.inverse(eta)),
    };
    CellPredictions { link_scale, response }
}

/// Grouped model deviance of a fit on the given data (RSS for OLS fits).
pub fn deviance(fit: &FitResult, obs: &Observations) -> f64 {
    let eta = cells_from_beta(fit.beta);
    match fit.spec.estimation {
        Estimation::Ols => ols_rss(obs, eta),
        Estimation::MleIrls => {
            let mut dev = 0.0;
            for i in 0..4 {
                let mu = fit.spec.distribution.clamp_working(fit.spec.link.inverse(eta[i]));
                let y = obs.events[i] / obs.totals[i];
                dev += obs.totals[i] * fit.spec.distribution.deviance_term(y, mu);
            }
            dev
        }
    }
}

/// Score (log-likelihood gradient) at `beta`; zero at an interior optimum.
#[cfg(test)]
pub(crate) fn score(spec: &ModelSpec, obs: &Observations, beta: [f64; 4]) -> [f64; 4] {
    let eta = cells_from_beta(beta);
    let mut u = [0.0; 4];
    for i in 0..4 {
        let mu = spec.distribution.clamp_working(spec.link.inverse(eta[i]));
        let y = obs.events[i] / obs.totals[i];
        let factor = obs.totals[i] * (y - mu)
            / (spec.distribution.variance(mu) * spec.link.derivative(mu));
        let (x, z) = (CELL_ORDER[i].0 as f64, CELL_ORDER[i].1 as f64);
        u[0] += factor;
        u[1] += factor * x;
        u[2] += factor * z;
        u[3] += factor * x * z;
    }
    u
}

/// Internal converged state shared by the covariance builders.
#[derive(Debug, Clone)]
pub(crate) struct FitCore {
    pub beta: [f64; 4],
    /// Working (clamped) cell means for IRLS; fitted values for OLS.
    pub mu_work: [f64; 4],
    pub deviance: f64,
    pub iterations: usize,
    pub boundary: bool,
}

/// Fit the model described by `spec`. Returns a typed
/// [`ConvergenceFailure`] (wrapped in [`Error::Convergence`]) when iteration
/// fails; a cell with no observations is rejected before iteration.
pub fn fit(obs: &Observations, spec: &ModelSpec) -> Result<FitResult> {
    spec.validate()?;
    obs.check_patterns()?;

    let core = match spec.estimation {
        Estimation::Ols => fit_ols_core(obs),
        Estimation::MleIrls => irls_saturated(obs, spec)?,
    };
    let cov_model = variance::model_covariance_core(obs, spec, &core);
    let cov_robust = variance::robust_covariance_core(obs, spec, &core);
    Ok(FitResult {
        spec: *spec,
        beta: core.beta,
        cov_model,
        cov_robust,
        converged: true,
        iterations: core.iterations,
        deviance: core.deviance,
        boundary: core.boundary,
    })
}

/// Convenience wrapper for aggregated tables.
pub fn fit_table(table: &ExposureTable, spec: &ModelSpec) -> Result<FitResult> {
    fit(&Observations::from_table(table), spec)
}

/// Convenience wrapper for individual records.
pub fn fit_records(records: &[IndividualRecord], spec: &ModelSpec) -> Result<FitResult> {
    fit(&Observations::from_records(records), spec)
}

fn starting_means(obs: &Observations, spec: &ModelSpec) -> [f64; 4] {
    let p = obs.proportions();
    let mut mu = [0.0; 4];
    for i in 0..4 {
        let start = match spec.link {
            // observed proportions are feasible for the saturated design
            Link::Identity => p[i],
            // proportions floored at 0.5/total
            Link::Log => p[i].max(0.5 / obs.totals[i]),
            // empirical logits with Haldane correction, start only
            Link::Logit => {
                let eta = ((obs.events[i] + 0.5) / (obs.totals[i] - obs.events[i] + 0.5)).ln();
                Link::Logit.inverse(eta)
            }
        };
        mu[i] = spec.distribution.clamp_working(start);
    }
    mu
}

fn grouped_deviance(obs: &Observations, spec: &ModelSpec, mu_work: &[f64; 4]) -> f64 {
    let mut dev = 0.0;
    for i in 0..4 {
        let y = obs.events[i] / obs.totals[i];
        dev += obs.totals[i] * spec.distribution.deviance_term(y, mu_work[i]);
    }
    dev
}

fn irls_saturated(obs: &Observations, spec: &ModelSpec) -> Result<FitCore> {
    let y = obs.proportions();

    // The log-link MLE sits at -infinity when a cell has no events.
    if spec.link == Link::Log && obs.events.iter().any(|&e| e == 0.0) {
        let mu0 = starting_means(obs, spec);
        let beta0 = beta_from_cells(mu0.map(|m| spec.link.apply(m)));
        return Err(Error::Convergence(ConvergenceFailure {
            reason: FailureReason::Separation,
            last_beta: beta0,
            last_deviance: grouped_deviance(obs, spec, &mu0),
        }));
    }

    let mut mu_work = starting_means(obs, spec);
    let mut beta = beta_from_cells(mu_work.map(|m| spec.link.apply(m)));
    let mut dev = grouped_deviance(obs, spec, &mu_work);
    let mut boundary = false;

    for iteration in 1..=spec.max_iterations {
        let eta = cells_from_beta(beta);
        let mut working = [0.0; 4];
        for i in 0..4 {
            let d = spec.link.derivative(mu_work[i]);
            working[i] = eta[i] + (y[i] - mu_work[i]) * d;
        }
        // The saturated design is square and invertible, so the weighted
        // least-squares update is the working response mapped through the
        // design inverse, independent of the weights.
        let proposal = beta_from_cells(working);

        let mut step = 1.0;
        let mut halvings = 0usize;
        let (beta_new, mu_new, clamped, dev_new) = loop {
            let cand: [f64; 4] =
                std::array::from_fn(|j| beta[j] + step * (proposal[j] - beta[j]));
            let mu_cand = cells_from_beta(cand).map(|eta| spec.link.inverse(eta));
            if mu_cand.iter().all(|&m| spec.distribution.feasible(m)) {
                let mut clamped = false;
                let mu_c: [f64; 4] = std::array::from_fn(|i| {
                    let c = spec.distribution.clamp_working(mu_cand[i]);
                    if c != mu_cand[i] {
                        clamped = true;
                    }
                    c
                });
                let dev_cand = grouped_deviance(obs, spec, &mu_c);
                if dev_cand <= dev + 1e-13 * (dev.abs() + 0.1) {
                    break (cand, mu_c, clamped, dev_cand);
                }
            }
            halvings += 1;
            if halvings > spec.step_halving_max {
                return Err(Error::Convergence(ConvergenceFailure {
                    reason: FailureReason::BoundaryStall,
                    last_beta: beta,
                    last_deviance: dev,
                }));
            }
            step *= 0.5;
        };

        beta = beta_new;
        mu_work = mu_new;
        boundary |= clamped;
        let rel_change = (dev - dev_new).abs() / (dev_new.abs() + 0.1);
        dev = dev_new;
        if rel_change < spec.tolerance {
            return Ok(FitCore {
                beta,
                mu_work,
                deviance: dev,
                iterations: iteration,
                boundary,
            });
        }
    }

    Err(Error::Convergence(ConvergenceFailure {
        reason: FailureReason::MaxIterations,
        last_beta: beta,
        last_deviance: dev,
    }))
}

/// Record-level residual sum of squares of cell fits `eta`.
pub(crate) fn ols_rss(obs: &Observations, fitted: [f64; 4]) -> f64 {
    let mut rss = 0.0;
    for i in 0..4 {
        let (e, m) = (obs.events[i], obs.totals[i]);
        let f = fitted[i];
        rss += e * (1.0 - f) * (1.0 - f) + (m - e) * f * f;
    }
    rss
}

fn fit_ols_core(obs: &Observations) -> FitCore {
    // OLS on the saturated dummy design reproduces the cell means.
    let p = obs.proportions();
    let beta = beta_from_cells(p);
    let fitted = cells_from_beta(beta);
    FitCore {
        beta,
        mu_work: fitted,
        deviance: ols_rss(obs, fitted),
        iterations: 0,
        boundary: fitted.iter().any(|&f| !(0.0..=1.0).contains(&f)),
    }
}

/// IRLS fit of the no-interaction design `[1, x, z]`, used to compare the
/// interaction Wald test with the deviance it removes. Returns
/// `(beta, deviance, iterations)`.
pub(crate) fn fit_no_interaction(
    obs: &Observations,
    spec: &ModelSpec,
) -> Result<([f64; 3], f64, usize)> {
    use nalgebra::{DMatrix, DVector};

    spec.validate()?;
    obs.check_patterns()?;
    let y = obs.proportions();
    let rows: [[f64; 3]; 4] = std::array::from_fn(|i| {
        let (x, z) = CELL_ORDER[i];
        [1.0, x as f64, z as f64]
    });
    let cells = |b: &[f64; 3]| -> [f64; 4] {
        std::array::from_fn(|i| b[0] + b[1] * rows[i][1] + b[2] * rows[i][2])
    };

    // least-squares projection of the saturated start onto the reduced design
    let mu0 = starting_means(obs, spec);
    let eta0 = mu0.map(|m| spec.link.apply(m));
    let d = DMatrix::from_fn(4, 3, |i, j| rows[i][j]);
    let ls = (d.transpose() * &d)
        .lu()
        .solve(&(d.transpose() * DVector::from_row_slice(&eta0)))
        .expect("reduced design has full rank");
    let mut beta = [ls[0], ls[1], ls[2]];
    let mut mu_work: [f64; 4] =
        std::array::from_fn(|i| spec.distribution.clamp_working(spec.link.inverse(cells(&beta)[i])));
    let mut dev = grouped_deviance(obs, spec, &mu_work);

    for iteration in 1..=spec.max_iterations {
        let eta = cells(&beta);
        let mut a = DMatrix::<f64>::zeros(3, 3);
        let mut rhs = DVector::<f64>::zeros(3);
        for i in 0..4 {
            let g = spec.link.derivative(mu_work[i]);
            let w = obs.totals[i] / (spec.distribution.variance(mu_work[i]) * g * g);
            let z = eta[i] + (y[i] - mu_work[i]) * g;
            for r in 0..3 {
                rhs[r] += w * rows[i][r] * z;
                for c in 0..3 {
                    a[(r, c)] += w * rows[i][r] * rows[i][c];
                }
            }
        }
        let proposal = match a.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => a.lu().solve(&rhs).ok_or_else(|| {
                Error::Convergence(ConvergenceFailure {
                    reason: FailureReason::SingularWeights,
                    last_beta: [beta[0], beta[1], beta[2], 0.0],
                    last_deviance: dev,
                })
            })?,
        };

        let mut step = 1.0;
        let mut halvings = 0usize;
        let (beta_new, mu_new, dev_new) = loop {
            let cand = [
                beta[0] + step * (proposal[0] - beta[0]),
                beta[1] + step * (proposal[1] - beta[1]),
                beta[2] + step * (proposal[2] - beta[2]),
            ];
            let mu_cand = cells(&cand).map(|eta| spec.link.inverse(eta));
            if mu_cand.iter().all(|&m| spec.distribution.feasible(m)) {
                let mu_c = mu_cand.map(|m| spec.distribution.clamp_working(m));
                let dev_cand = grouped_deviance(obs, spec, &mu_c);
                if dev_cand <= dev + 1e-13 * (dev.abs() + 0.1) {
                    break (cand, mu_c, dev_cand);
                }
            }
            halvings += 1;
            if halvings > spec.step_halving_max {
                return Err(Error::Convergence(ConvergenceFailure {
                    reason: FailureReason::BoundaryStall,
                    last_beta: [beta[0], beta[1], beta[2], 0.0],
                    last_deviance: dev,
                }));
            }
            step *= 0.5;
        };

        beta = beta_new;
        mu_work = mu_new;
        let rel_change = (dev - dev_new).abs() / (dev_new.abs() + 0.1);
        dev = dev_new;
        if rel_change < spec.tolerance {
            return Ok((beta, dev, iteration));
        }
    }
    Err(Error::Convergence(ConvergenceFailure {
        reason: FailureReason::MaxIterations,
        last_beta: [beta[0], beta[1], beta[2], 0.0],
        last_deviance: dev,
    }))
}
