//! Inverse link functions `G(η)` of the cumulative model, their first two
//! derivatives, and the per-observation ratios that drive the Laplace score.
//!
//! Everything here works with the inverse link (the CDF that maps the linear
//! predictor to a cumulative probability). `η = ±∞` stand for the boundary
//! classes, where `G(-∞) = 0`, `G(+∞) = 1` and all derivatives vanish.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs or dividing.
pub const PROB_FLOOR: f64 = 1e-300;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Probit,
    /// `G(η) = exp(-exp(-η))`.
    LogLog,
    /// `G(η) = 1 - exp(-exp(η))`.
    CLogLog,
}

impl Link {
    pub const ALL: [Link; 4] = [Link::Logit, Link::Probit, Link::LogLog, Link::CLogLog];

    pub fn name(self) -> &'static str {
        match self {
            Link::Logit => "logit",
            Link::Probit => "probit",
            Link::LogLog => "loglog",
            Link::CLogLog => "cloglog",
        }
    }

    /// `G(η)`.
    pub fn cdf(self, eta: f64) -> f64 {
        if eta == f64::NEG_INFINITY {
            return 0.0;
        }
        if eta == f64::INFINITY {
            return 1.0;
        }
        match self {
            Link::Logit => logistic(eta),
            Link::Probit => 0.5 * erfc(-eta / std::f64::consts::SQRT_2),
            Link::LogLog => (-(-eta).exp()).exp(),
            Link::CLogLog => -(-eta.exp()).exp_m1(),
        }
    }

    /// `1 - G(η)`, computed without cancellation.
    pub fn sf(self, eta: f64) -> f64 {
        if eta == f64::NEG_INFINITY {
            return 1.0;
        }
        if eta == f64::INFINITY {
            return 0.0;
        }
        match self {
            Link::Logit => logistic(-eta),
            Link::Probit => 0.5 * erfc(eta / std::f64::consts::SQRT_2),
            Link::LogLog => -(-(-eta).exp()).exp_m1(),
            Link::CLogLog => (-eta.exp()).exp(),
        }
    }

    /// `G'(η)`.
    pub fn d1(self, eta: f64) -> f64 {
        if eta.is_infinite() {
            return 0.0;
        }
        match self {
            Link::Logit => logistic(eta) * logistic(-eta),
            Link::Probit => FRAC_1_SQRT_2PI * (-0.5 * eta * eta).exp(),
            Link::LogLog => (-eta - (-eta).exp()).exp(),
            Link::CLogLog => (eta - eta.exp()).exp(),
        }
    }

    /// `G''(η)`.
    pub fn d2(self, eta: f64) -> f64 {
        if eta.is_infinite() {
            return 0.0;
        }
        let d1 = self.d1(eta);
        if d1 == 0.0 {
            return 0.0;
        }
        match self {
            Link::Logit => d1 * (logistic(-eta) - logistic(eta)),
            Link::Probit => -eta * d1,
            Link::LogLog => d1 * ((-eta).exp() - 1.0),
            Link::CLogLog => d1 * (1.0 - eta.exp()),
        }
    }

    /// `G⁻¹(p)`: the link function proper.
    pub fn quantile(self, p: f64) -> f64 {
        match self {
            Link::Logit => (p / (1.0 - p)).ln(),
            Link::Probit => {
                let q = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
                let d = self.d1(q);
                if d > 0.0 {
                    q - (self.cdf(q) - p) / d
                } else {
                    q
                }
            }
            Link::LogLog => -(-p.ln()).ln(),
            Link::CLogLog => (-(-p).ln_1p()).ln(),
        }
    }

    /// `G(hi) - G(lo)` for `lo < hi`, using the upper-tail form when both
    /// ends sit above the median.
    pub fn interval(self, lo: f64, hi: f64) -> f64 {
        let c = self.cdf(lo);
        if c > 0.5 {
            self.sf(lo) - self.sf(hi)
        } else {
            self.cdf(hi) - c
        }
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "logit" => Ok(Link::Logit),
            "probit" => Ok(Link::Probit),
            "loglog" | "log-log" => Ok(Link::LogLog),
            "cloglog" | "c-log-log" => Ok(Link::CLogLog),
            _ => Err(Error::Config(format!("unknown link {s:?}"))),
        }
    }
}

fn finite(eta: f64) -> Result<f64> {
    if eta.is_finite() {
        Ok(eta)
    } else {
        Err(Error::Domain(format!("linear predictor {eta} is not finite")))
    }
}

pub fn inv_link(link: Link, eta: f64) -> Result<f64> {
    Ok(link.cdf(finite(eta)?))
}

pub fn inv_link_d1(link: Link, eta: f64) -> Result<f64> {
    Ok(link.d1(finite(eta)?))
}

pub fn inv_link_d2(link: Link, eta: f64) -> Result<f64> {
    Ok(link.d2(finite(eta)?))
}

/// Per-observation quantities for an outcome in the class bounded by the
/// linear predictors `lower < upper`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BTerms {
    /// Class probability, floored at [`PROB_FLOOR`].
    pub prob: f64,
    /// `b'`: derivative of `log(prob)` in the latent effect.
    pub b1: f64,
    /// `b''`: `(G''(upper) - G''(lower)) / prob`.
    pub b2: f64,
    /// `∂b'/∂upper`.
    pub db1_upper: f64,
    /// `∂b'/∂lower`.
    pub db1_lower: f64,
}

impl BTerms {
    /// Second derivative of `log(prob)` in the latent effect, `b'' - b'²`.
    pub fn psi2(&self) -> f64 {
        self.b2 - self.b1 * self.b1
    }
}

/// The three-case ratios for an outcome whose class lies between `lower`
/// (`-∞` for the first class) and `upper` (`+∞` for the last).
pub fn b_terms(link: Link, upper: f64, lower: f64) -> Result<BTerms> {
    if lower.is_nan() || upper.is_nan() || lower >= upper {
        return Err(Error::Ordering(format!(
            "lower predictor {lower} must be below upper {upper}"
        )));
    }
    Ok(b_terms_unchecked(link, upper, lower))
}

pub(crate) fn b_terms_unchecked(link: Link, upper: f64, lower: f64) -> BTerms {
    let prob = link.interval(lower, upper).max(PROB_FLOOR);
    let (g1u, g1l) = (link.d1(upper), link.d1(lower));
    let (g2u, g2l) = (link.d2(upper), link.d2(lower));
    let b1 = (g1u - g1l) / prob;
    let b2 = (g2u - g2l) / prob;
    BTerms {
        prob,
        b1,
        b2,
        db1_upper: (g2u - b1 * g1u) / prob,
        db1_lower: (b1 * g1l - g2l) / prob,
    }
}
