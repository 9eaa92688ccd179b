//! Interaction measures: the interaction contrast (IC) on the probability
//! scale, the Relative Excess Risk due to Interaction (RERI) on the
//! relative-risk scale, multiplicativity tests, and the combined effect
//! report.
//!
//! The IC is defined only on the response scale, so it is computed from
//! identity-link fits; asking for it on a log or logit fit is an error
//! rather than a silent back-transformation. The RERI's default source is
//! the log binomial fit (it is defined through relative risks); a
//! logit-sourced RERI is available but flagged as an odds-ratio
//! approximation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::glm::{
    fit, predict_cells, ConvergenceControls, Estimation, FitResult, Link, ModelSpec, Observations,
};
use crate::table::{ExposureTable, CELL_ORDER};
use crate::variance::{wald, CovarianceFlavor, WaldResult};

/// Coefficients over the four cells in canonical order
/// `(p00, p10, p01, p11)`. The default `(1, -1, -1, 1)` is the interaction
/// contrast.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ContrastSpec {
    pub coefficients: [f64; 4],
}

impl Default for ContrastSpec {
    fn default() -> Self {
        ContrastSpec { coefficients: [1.0, -1.0, -1.0, 1.0] }
    }
}

fn require_identity(fit: &FitResult, operation: &'static str) -> Result<()> {
    if fit.spec.link != Link::Identity {
        return Err(Error::WrongLink {
            operation,
            required: "identity-link",
            actual: fit.spec.link.name(),
        });
    }
    Ok(())
}

/// Wald inference for a linear contrast of the predicted cell risks on an
/// identity-link fit. The contrast is pulled back through the design, so the
/// default contrast is exactly the interaction coefficient.
pub fn contrast_wald(
    fit: &FitResult,
    contrast: &ContrastSpec,
    flavor: CovarianceFlavor,
    level: f64,
) -> Result<WaldResult> {
    require_identity(fit, "cell-risk contrast")?;
    let c = contrast.coefficients;
    // pull the cell contrast back to coefficient space: w = M' c for the
    // cell design M; small-integer arithmetic, so exact
    let w = [
        c[0] + c[1] + c[2] + c[3],
        c[1] + c[3],
        c[2] + c[3],
        c[3],
    ];
    let estimate = w[0] * fit.beta[0] + w[1] * fit.beta[1] + w[2] * fit.beta[2] + w[3] * fit.beta[3];
    let variance = fit.covariance(flavor).contrast_variance(&w);
    wald(estimate, variance, level)
}

/// The interaction contrast `p11 - p10 - p01 + p00`, which the saturated
/// identity-link model estimates as its interaction coefficient.
pub fn compute_ic(fit: &FitResult, flavor: CovarianceFlavor, level: f64) -> Result<WaldResult> {
    require_identity(fit, "interaction contrast")?;
    wald(fit.beta[3], fit.covariance(flavor).variance(3), level)
}

/// Where a RERI estimate's ratio terms come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReriSource {
    /// Relative risks from the log binomial fit.
    LogBinomial,
    /// Odds ratios from the logistic fit, used as RR approximations.
    LogisticApproximation,
}

/// RERI point estimate with its delta-method Wald inference.
#[derive(Debug, Clone, Serialize)]
pub struct Reri {
    #[serde(flatten)]
    pub wald: WaldResult,
    pub source_model: ReriSource,
    /// True when the ratios are odds ratios standing in for relative risks.
    pub approximate: bool,
}

impl Reri {
    pub fn estimate(&self) -> f64 {
        self.wald.estimate
    }
}

/// RERI as a function of the link-scale coefficients:
/// `exp(b1+b2+b3) - exp(b1) - exp(b2) + 1`.
pub fn reri_point(beta: &[f64; 4]) -> f64 {
    (beta[1] + beta[2] + beta[3]).exp() - beta[1].exp() - beta[2].exp() + 1.0
}

/// Gradient of [`reri_point`] with respect to all four coefficients.
pub fn reri_gradient(beta: &[f64; 4]) -> [f64; 4] {
    let joint = (beta[1] + beta[2] + beta[3]).exp();
    [0.0, joint - beta[1].exp(), joint - beta[2].exp(), joint]
}

/// RERI with a delta-method standard error from a log or logit fit.
pub fn compute_reri(fit: &FitResult, flavor: CovarianceFlavor, level: f64) -> Result<Reri> {
    let source = match fit.spec.link {
        Link::Log => ReriSource::LogBinomial,
        Link::Logit => ReriSource::LogisticApproximation,
        Link::Identity => {
            return Err(Error::WrongLink {
                operation: "RERI",
                required: "log- or logit-link",
                actual: "identity",
            })
        }
    };
    let estimate = reri_point(&fit.beta);
    let g = reri_gradient(&fit.beta);
    let variance = fit.covariance(flavor).contrast_variance(&g);
    Ok(Reri {
        wald: wald(estimate, variance, level)?,
        source_model: source,
        approximate: source == ReriSource::LogisticApproximation,
    })
}

/// Plug-in RERI from raw cell proportions.
pub fn reri_from_table(table: &ExposureTable) -> Result<f64> {
    let p = table.proportions();
    if p[0] == 0.0 {
        return Err(Error::ReferenceRiskZero);
    }
    Ok(p[3] / p[0] - p[2] / p[0] - p[1] / p[0] + 1.0)
}

/// Wald test of the interaction coefficient on the link scale, with
/// `exp(b3)` reported as the ratio of ratios (RR or OR scale).
#[derive(Debug, Clone, Serialize)]
pub struct MultiplicativityTest {
    #[serde(flatten)]
    pub wald: WaldResult,
    pub ratio_of_ratios: f64,
}

/// Departure from multiplicativity: the interaction coefficient of a log or
/// logit fit.
pub fn multiplicativity_test(
    fit: &FitResult,
    flavor: CovarianceFlavor,
    level: f64,
) -> Result<MultiplicativityTest> {
    if fit.spec.link == Link::Identity {
        return Err(Error::WrongLink {
            operation: "multiplicativity test",
            required: "log- or logit-link",
            actual: "identity",
        });
    }
    let w = wald(fit.beta[3], fit.covariance(flavor).variance(3), level)?;
    Ok(MultiplicativityTest { ratio_of_ratios: fit.beta[3].exp(), wald: w })
}

/// Which identity-scale strategy produced the effect estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityStrategy {
    BinomialIdentity,
    PoissonRobust,
    OlsRobust,
}

impl std::fmt::Display for IdentityStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IdentityStrategy::BinomialIdentity => "binomial_identity",
            IdentityStrategy::PoissonRobust => "poisson_robust",
            IdentityStrategy::OlsRobust => "ols_robust",
        })
    }
}

/// Fit the identity-scale model, optionally falling back when the binomial
/// fit does not converge: binomial -> Poisson + robust SEs -> OLS + robust
/// SEs. Returns the fit, the strategy tag, and the covariance flavor the
/// strategy calls for.
pub fn fit_identity_ladder(
    obs: &Observations,
    controls: &ConvergenceControls,
    fallback: bool,
) -> Result<(FitResult, IdentityStrategy, CovarianceFlavor)> {
    let binomial = ModelSpec::identity_binomial().with_controls(controls);
    match fit(obs, &binomial) {
        Ok(f) => return Ok((f, IdentityStrategy::BinomialIdentity, CovarianceFlavor::ModelBased)),
        Err(e @ Error::Convergence(_)) if fallback => {
            let _ = e; // try the next rung
        }
        Err(e) => return Err(e),
    }
    let poisson = ModelSpec::identity_poisson().with_controls(controls);
    match fit(obs, &poisson) {
        Ok(f) => {
            return Ok((f, IdentityStrategy::PoissonRobust, CovarianceFlavor::RobustIndependence))
        }
        Err(Error::Convergence(_)) => {}
        Err(e) => return Err(e),
    }
    let ols = ModelSpec::mls_ols().with_controls(controls);
    let f = fit(obs, &ols)?;
    Ok((f, IdentityStrategy::OlsRobust, CovarianceFlavor::RobustIndependence))
}

/// Response-scale Wald results for the four cells.
#[derive(Debug, Clone, Serialize)]
pub struct CellRisks {
    pub p00: WaldResult,
    pub p10: WaldResult,
    pub p01: WaldResult,
    pub p11: WaldResult,
}

/// The two main-effect risk differences from the identity-scale fit.
#[derive(Debug, Clone, Serialize)]
pub struct RiskDifferences {
    /// Effect of x alone (b1): risk difference at z = 0.
    pub x: WaldResult,
    /// Effect of z alone (b2): risk difference at x = 0.
    pub z: WaldResult,
}

/// Multiplicativity verdict inputs per ratio model; a model that failed to
/// converge reports the failure text instead.
#[derive(Debug, Clone, Serialize)]
pub struct Multiplicativity {
    pub log_binomial: Option<MultiplicativityTest>,
    pub log_binomial_error: Option<String>,
    pub logistic: Option<MultiplicativityTest>,
    pub logistic_error: Option<String>,
}

/// Everything the effects command reports, on the probability scale with the
/// display multiplier carried alongside (`scale`, per-100k by default).
#[derive(Debug, Clone, Serialize)]
pub struct EffectReport {
    pub schema_version: u32,
    pub scale: f64,
    pub level: f64,
    pub strategy: IdentityStrategy,
    pub covariance_flavor: CovarianceFlavor,
    pub cell_risks: CellRisks,
    pub risk_differences: RiskDifferences,
    pub ic: WaldResult,
    pub reri: Option<Reri>,
    pub reri_error: Option<String>,
    pub multiplicativity: Multiplicativity,
}

/// Options for [`effect_report`].
#[derive(Debug, Clone)]
pub struct EffectOptions {
    /// Display multiplier for risks and risk differences (default 100,000).
    pub scale: f64,
    pub level: f64,
    /// Enable the Poisson/OLS fallback ladder for the identity fit.
    pub fallback: bool,
    /// Source the RERI from the logistic fit instead of the log binomial.
    pub reri_from_logit: bool,
    pub controls: ConvergenceControls,
}

impl Default for EffectOptions {
    fn default() -> Self {
        EffectOptions {
            scale: 100_000.0,
            level: 0.95,
            fallback: false,
            reri_from_logit: false,
            controls: ConvergenceControls::default(),
        }
    }
}

/// Fit all three models to the table and assemble the effect report.
pub fn effect_report(table: &ExposureTable, opts: &EffectOptions) -> Result<EffectReport> {
    let obs = Observations::from_table(table);
    let (identity_fit, strategy, flavor) =
        fit_identity_ladder(&obs, &opts.controls, opts.fallback)?;

    let cells = predict_cells(&identity_fit).response;
    let cov = identity_fit.covariance(flavor);
    let cell_wald = |i: usize| -> Result<WaldResult> {
        let (x, z) = CELL_ORDER[i];
        let row = [1.0, x as f64, z as f64, (x * z) as f64];
        wald(cells[i], cov.contrast_variance(&row), opts.level)
    };
    let cell_risks = CellRisks {
        p00: cell_wald(0)?,
        p10: cell_wald(1)?,
        p01: cell_wald(2)?,
        p11: cell_wald(3)?,
    };
    let risk_differences = RiskDifferences {
        x: wald(identity_fit.beta[1], cov.variance(1), opts.level)?,
        z: wald(identity_fit.beta[2], cov.variance(2), opts.level)?,
    };
    let ic = compute_ic(&identity_fit, flavor, opts.level)?;

    let log_fit = fit(&obs, &ModelSpec::log_binomial().with_controls(&opts.controls));
    let logit_fit = fit(&obs, &ModelSpec::logit_binomial().with_controls(&opts.controls));

    let (reri, reri_error) = {
        let source = if opts.reri_from_logit { &logit_fit } else { &log_fit };
        match source {
            Ok(f) => (
                Some(compute_reri(f, CovarianceFlavor::ModelBased, opts.level)?),
                None,
            ),
            Err(e) => (None, Some(e.to_string())),
        }
    };

    let mut multiplicativity = Multiplicativity {
        log_binomial: None,
        log_binomial_error: None,
        logistic: None,
        logistic_error: None,
    };
    match &log_fit {
        Ok(f) => {
            multiplicativity.log_binomial =
                Some(multiplicativity_test(f, CovarianceFlavor::ModelBased, opts.level)?)
        }
        Err(e) => multiplicativity.log_binomial_error = Some(e.to_string()),
    }
    match &logit_fit {
        Ok(f) => {
            multiplicativity.logistic =
                Some(multiplicativity_test(f, CovarianceFlavor::ModelBased, opts.level)?)
        }
        Err(e) => multiplicativity.logistic_error = Some(e.to_string()),
    }

    Ok(EffectReport {
        schema_version: crate::report::SCHEMA_VERSION,
        scale: opts.scale,
        level: opts.level,
        strategy,
        covariance_flavor: flavor,
        cell_risks,
        risk_differences,
        ic,
        reri,
        reri_error,
        multiplicativity,
    })
}

/// Machine-readable additivity/multiplicativity verdict at level `alpha`.
#[derive(Debug, Clone, Serialize)]
pub struct AdditivityVerdict {
    pub alpha: f64,
    /// IC Wald p below alpha.
    pub departure_from_additivity: bool,
    /// Interaction p below alpha in the log binomial model, when it fit.
    pub departure_from_multiplicativity_log_binomial: Option<bool>,
    /// Interaction p below alpha in the logistic model, when it fit.
    pub departure_from_multiplicativity_logistic: Option<bool>,
}

pub fn additivity_verdict(report: &EffectReport, alpha: f64) -> AdditivityVerdict {
    AdditivityVerdict {
        alpha,
        departure_from_additivity: report.ic.p_two_sided < alpha,
        departure_from_multiplicativity_log_binomial: report
            .multiplicativity
            .log_binomial
            .as_ref()
            .map(|t| t.wald.p_two_sided < alpha),
        departure_from_multiplicativity_logistic: report
            .multiplicativity
            .logistic
            .as_ref()
            .map(|t| t.wald.p_two_sided < alpha),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::fit_table;
    use crate::table::{generate_hammond_dataset, GeneratorInput};

    fn hammond() -> ExposureTable {
        generate_hammond_dataset(&GeneratorInput::hammond()).unwrap()
    }

    #[test]
    fn ic_is_exactly_the_interaction_coefficient() {
        let fit = fit_table(&hammond(), &ModelSpec::identity_binomial()).unwrap();
        let ic = compute_ic(&fit, CovarianceFlavor::ModelBased, 0.95).unwrap();
        assert_eq!(ic.estimate, fit.beta[3]);
        let via_contrast =
            contrast_wald(&fit, &ContrastSpec::default(), CovarianceFlavor::ModelBased, 0.95)
                .unwrap();
        assert_eq!(via_contrast.estimate, ic.estimate);
        assert_eq!(via_contrast.p_two_sided, ic.p_two_sided);
        assert_eq!(via_contrast.se, ic.se);
    }

    #[test]
    fn ic_rejected_on_ratio_scale_fits() {
        let fit = fit_table(&hammond(), &ModelSpec::log_binomial()).unwrap();
        assert!(matches!(
            compute_ic(&fit, CovarianceFlavor::ModelBased, 0.95),
            Err(Error::WrongLink { .. })
        ));
    }

    #[test]
    fn exactly_additive_table_has_zero_ic() {
        let t = ExposureTable::from_counts([(100, 1000), (200, 1000), (300, 1000), (400, 1000)])
            .unwrap();
        let fit = fit_table(&t, &ModelSpec::identity_binomial()).unwrap();
        let ic = compute_ic(&fit, CovarianceFlavor::ModelBased, 0.95).unwrap();
        assert!(ic.estimate.abs() < 1e-10);
    }

    #[test]
    fn ic_matches_both_homogeneity_forms() {
        let t = ExposureTable::from_counts([(13, 210), (29, 190), (11, 330), (47, 260)]).unwrap();
        let fit = fit_table(&t, &ModelSpec::identity_binomial()).unwrap();
        let p = predict_cells(&fit).response;
        let ic = compute_ic(&fit, CovarianceFlavor::ModelBased, 0.95).unwrap().estimate;
        let form_a = (p[3] - p[2]) - (p[1] - p[0]);
        let form_b = (p[3] - p[1]) - (p[2] - p[0]);
        assert!((ic - form_a).abs() < 1e-12);
        assert!((ic - form_b).abs() < 1e-12);
    }

    #[test]
    fn reri_is_zero_when_relative_risks_add() {
        // RR10 = 2, RR01 = 3, RR11 = 4: joint RR equals sum of separate
        // excesses, so the RERI vanishes
        let t = ExposureTable::from_counts([(100, 1000), (200, 1000), (300, 1000), (400, 1000)])
            .unwrap();
        let fit = fit_table(&t, &ModelSpec::log_binomial()).unwrap();
        let reri = compute_reri(&fit, CovarianceFlavor::ModelBased, 0.95).unwrap();
        assert!(reri.estimate().abs() < 1e-10);
        assert!(!reri.approximate);
        assert!((reri_from_table(&t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn reri_from_table_matches_published_value() {
        let r = reri_from_table(&hammond()).unwrap();
        assert!((r - 38.73).abs() < 0.005, "got {r}");
    }

    #[test]
    fn reri_needs_nonzero_reference_risk() {
        let t = ExposureTable::from_counts([(0, 100), (5, 100), (5, 100), (10, 100)]).unwrap();
        assert!(matches!(reri_from_table(&t), Err(Error::ReferenceRiskZero)));
    }

    #[test]
    fn reri_equals_ic_over_reference_risk() {
        let t = ExposureTable::from_counts([(13, 210), (29, 190), (11, 330), (47, 260)]).unwrap();
        let p = t.proportions();
        let ic_raw = p[3] - p[2] - p[1] + p[0];
        let reri = reri_from_table(&t).unwrap();
        assert!((reri - ic_raw / p[0]).abs() < 1e-10);
    }

    #[test]
    fn plug_in_and_model_reri_agree_on_saturated_fits() {
        let t = hammond();
        let fit = fit_table(&t, &ModelSpec::log_binomial()).unwrap();
        let model = compute_reri(&fit, CovarianceFlavor::ModelBased, 0.95).unwrap();
        let plug = reri_from_table(&t).unwrap();
        assert!((model.estimate() - plug).abs() / plug.abs() < 1e-8);
    }

    #[test]
    fn exactly_multiplicative_table_has_unit_ratio_of_ratios() {
        // RRs 2, 3, 6: p = 0.05, 0.10, 0.15, 0.30
        let t = ExposureTable::from_counts([(100, 2000), (200, 2000), (300, 2000), (600, 2000)])
            .unwrap();
        let fit = fit_table(&t, &ModelSpec::log_binomial()).unwrap();
        let m = multiplicativity_test(&fit, CovarianceFlavor::ModelBased, 0.95).unwrap();
        assert!(m.wald.estimate.abs() < 1e-10);
        assert!((m.ratio_of_ratios - 1.0).abs() < 1e-10);
        assert!(m.wald.p_two_sided > 1.0 - 1e-8);
    }

    #[test]
    fn delta_gradient_matches_finite_differences() {
        let fit = fit_table(&hammond(), &ModelSpec::log_binomial()).unwrap();
        let g = reri_gradient(&fit.beta);
        let h = 1e-5;
        for j in 1..4 {
            let mut up = fit.beta;
            let mut dn = fit.beta;
            up[j] += h;
            dn[j] -= h;
            let fd = (reri_point(&up) - reri_point(&dn)) / (2.0 * h);
            assert!(
                (fd - g[j]).abs() / g[j].abs().max(1e-12) < 1e-6,
                "component {j}: fd {fd} vs analytic {}",
                g[j]
            );
        }
    }

    #[test]
    fn swapping_factor_roles_preserves_ic_and_reri() {
        let t = ExposureTable::from_counts([(13, 210), (29, 190), (11, 330), (47, 260)]).unwrap();
        let s = t.swap_factors();
        let ic = |t: &ExposureTable| {
            let f = fit_table(t, &ModelSpec::identity_binomial()).unwrap();
            compute_ic(&f, CovarianceFlavor::ModelBased, 0.95).unwrap().estimate
        };
        assert!((ic(&t) - ic(&s)).abs() < 1e-12);
        assert!((reri_from_table(&t).unwrap() - reri_from_table(&s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn hammond_verdict_separates_the_scales() {
        let report = effect_report(&hammond(), &EffectOptions::default()).unwrap();
        let v = additivity_verdict(&report, 0.05);
        assert!(v.departure_from_additivity);
        assert_eq!(v.departure_from_multiplicativity_log_binomial, Some(false));
        assert_eq!(v.departure_from_multiplicativity_logistic, Some(false));
        // IC equals the contrast of the reported cell risks
        let c = &report.cell_risks;
        let ic_from_cells =
            c.p11.estimate - c.p10.estimate - c.p01.estimate + c.p00.estimate;
        assert!((report.ic.estimate - ic_from_cells).abs() < 1e-12);
    }

    #[test]
    fn homogeneous_table_has_no_departures() {
        let t = ExposureTable::from_counts([(30, 100), (30, 100), (30, 100), (30, 100)]).unwrap();
        let report = effect_report(&t, &EffectOptions::default()).unwrap();
        let v = additivity_verdict(&report, 0.05);
        assert!(!v.departure_from_additivity);
        assert_eq!(v.departure_from_multiplicativity_log_binomial, Some(false));
        assert!(report.ic.estimate.abs() < 1e-10);
        assert!(report.reri.as_ref().unwrap().estimate().abs() < 1e-8);
    }

    #[test]
    fn multiplicative_risks_depart_from_additivity_at_scale() {
        // RRs 2, 3, 6 with large cells: IC = 2 * p00 > 0 and well-powered
        let t = ExposureTable::from_counts([
            (1000, 20000),
            (2000, 20000),
            (3000, 20000),
            (6000, 20000),
        ])
        .unwrap();
        let report = effect_report(&t, &EffectOptions::default()).unwrap();
        let v = additivity_verdict(&report, 0.05);
        assert!(v.departure_from_additivity);
        assert_eq!(v.departure_from_multiplicativity_log_binomial, Some(false));
        let ic = report.ic.estimate;
        assert!((ic - 2.0 * 0.05).abs() < 1e-10);
    }
}
