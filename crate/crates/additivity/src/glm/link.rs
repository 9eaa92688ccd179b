//! Link functions and outcome distributions for the binomial-family fits.

use serde::Serialize;

/// Fitted means are kept inside this margin of the feasible region when
/// evaluating weights and deviances, so boundary cells (observed risk 0 or 1)
/// cannot produce infinite working weights.
pub const WORKING_MEAN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Log,
    Logit,
}

impl Link {
    /// eta = g(mu)
    pub fn apply(self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Log => mu.ln(),
            Link::Logit => (mu / (1.0 - mu)).ln(),
        }
    }

    /// mu = g^-1(eta)
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
        }
    }

    /// d eta / d mu
    pub fn derivative(self, mu: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Log => 1.0 / mu,
            Link::Logit => 1.0 / (mu * (1.0 - mu)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
            Link::Logit => "logit",
        }
    }
}

impl std::fmt::Display for Link {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Binomial,
    Poisson,
}

impl Distribution {
    /// Variance function V(mu).
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Distribution::Binomial => mu * (1.0 - mu),
            Distribution::Poisson => mu,
        }
    }

    /// Whether a candidate mean is strictly inside the feasible region.
    pub fn feasible(self, mu: f64) -> bool {
        match self {
            Distribution::Binomial => mu > 0.0 && mu < 1.0,
            Distribution::Poisson => mu > 0.0,
        }
    }

    /// Pull a mean into the numerically safe working range.
    pub fn clamp_working(self, mu: f64) -> f64 {
        match self {
            Distribution::Binomial => mu.clamp(WORKING_MEAN_EPS, 1.0 - WORKING_MEAN_EPS),
            Distribution::Poisson => mu.max(WORKING_MEAN_EPS),
        }
    }

    /// Unit deviance d(y, mu); the grouped model deviance is
    /// `sum_i m_i * d(y_i, mu_i)` over the exposure cells.
    pub fn deviance_term(self, y: f64, mu: f64) -> f64 {
        fn xlny_ratio(a: f64, b: f64) -> f64 {
            if a == 0.0 {
                0.0
            } else {
                a * (a / b).ln()
            }
        }
        match self {
            Distribution::Binomial => {
                2.0 * (xlny_ratio(y, mu) + xlny_ratio(1.0 - y, 1.0 - mu))
            }
            Distribution::Poisson => 2.0 * (xlny_ratio(y, mu) - (y - mu)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Distribution::Binomial => "binomial",
            Distribution::Poisson => "poisson",
        }
    }
}

impl std::fmt::Display for Distribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn links_invert() {
        for link in [Link::Identity, Link::Log, Link::Logit] {
            for mu in [0.001, 0.1, 0.5, 0.9, 0.999] {
                let eta = link.apply(mu);
                assert!((link.inverse(eta) - mu).abs() < 1e-12, "{link} at {mu}");
            }
        }
    }

    #[test]
    fn deviance_terms_vanish_at_observed() {
        for d in [Distribution::Binomial, Distribution::Poisson] {
            for y in [0.0, 0.25, 1.0] {
                if y == 1.0 && d == Distribution::Poisson {
                    continue; // poisson term at y = mu = 1 is exactly 0 too
                }
                let mu = if y == 0.0 { WORKING_MEAN_EPS } else { y };
                assert!(d.deviance_term(y, mu).abs() < 1e-10);
            }
        }
        assert!(Distribution::Poisson.deviance_term(1.0, 1.0).abs() < 1e-15);
    }

    #[test]
    fn deviance_terms_positive_away_from_observed() {
        assert!(Distribution::Binomial.deviance_term(0.3, 0.5) > 0.0);
        assert!(Distribution::Poisson.deviance_term(0.3, 0.5) > 0.0);
    }
}
