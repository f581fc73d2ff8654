//! Confidence intervals that remain honest after data-driven model selection.
//!
//! A fitted submodel chosen by AIC, BIC, the LASSO or a t-test no longer
//! supports the usual `estimate ± quantile × standard error` interval at its
//! nominal level. This crate provides the pieces needed to quantify and
//! repair that failure for Gaussian linear regression:
//!
//! * [`design`]: fixed design matrices, submodel least-squares fits and the
//!   projection targets they estimate.
//! * [`selectors`]: t-test, stepwise, cross-validated LASSO and
//!   largest-ratio model selectors, all keeping a protected regressor.
//! * [`constants`]: interval half-width multipliers: naive quantiles,
//!   Scheffé, and simultaneous max-|t| constants over model universes.
//! * [`nested`]: exact coverage probabilities for the two nested model
//!   problem, minimal coverage over the parameter, and the smallest valid
//!   constant for the t-test selector.
//! * [`mc`]: Monte Carlo search for the minimal coverage of a given
//!   (selector, constant) pair over the mean parameter.
//! * [`zero_restriction`]: intervals that collapse to {0} when the
//!   protected regressor is dropped, valid for any selection rule.
//! * [`cli`], [`config`], [`report`]: a reproducible command line driver
//!   that writes self-describing CSV reports.
//!
//! All randomized routines take explicit seeds and derive counter-addressed
//! substreams, so results are identical across thread counts.

pub mod cli;
pub mod config;
pub mod constants;
pub mod design;
pub mod error;
pub mod mc;
pub mod nested;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod selectors;
pub mod special;
pub mod zero_restriction;

pub use error::{Error, Result};

/// Which quantity an interval for the protected coordinate is asked to cover.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CoverageTarget {
    /// The projection coefficient of the selected model, a moving target.
    #[serde(rename = "selected")]
    SelectedModel,
    /// The protected coefficient of the full (true) model.
    #[serde(rename = "full")]
    FullParameter,
}

impl std::fmt::Display for CoverageTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CoverageTarget::SelectedModel => write!(f, "selected"),
            CoverageTarget::FullParameter => write!(f, "full"),
        }
    }
}

impl std::str::FromStr for CoverageTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selected" => Ok(CoverageTarget::SelectedModel),
            "full" => Ok(CoverageTarget::FullParameter),
            other => Err(Error::Parse(format!(
                "unknown coverage target '{other}' (expected 'selected' or 'full')"
            ))),
        }
    }
}
