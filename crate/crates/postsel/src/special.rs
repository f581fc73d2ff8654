//! Distribution functions shared by every other module.
//!
//! CDFs come from `statrs` (rational erf approximations, regularized
//! incomplete gamma and beta functions). Quantiles start from the `statrs`
//! inverse and are then polished with Newton steps against the CDF, which
//! pins the absolute error well below 1e-10 across the ranges used here.

use serde::de::Error as _;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, FisherSnedecor, Normal, StudentsT};

use crate::error::{Error, Result};

/// Degrees of freedom of the variance estimator. `Infinite` means the noise
/// scale is known exactly and normal rather than t quantiles apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dof {
    Finite(u32),
    Infinite,
}

impl Dof {
    pub fn finite(self) -> Option<u32> {
        match self {
            Dof::Finite(r) => Some(r),
            Dof::Infinite => None,
        }
    }

    pub fn validate(self) -> Result<Self> {
        if let Dof::Finite(r) = self {
            if r == 0 {
                return Err(Error::InvalidArgument(
                    "degrees of freedom must be at least 1".into(),
                ));
            }
        }
        Ok(self)
    }
}

impl std::fmt::Display for Dof {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dof::Finite(r) => write!(f, "{r}"),
            Dof::Infinite => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for Dof {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinite") {
            return Ok(Dof::Infinite);
        }
        let r: u32 = t
            .parse()
            .map_err(|_| Error::Parse(format!("bad degrees of freedom: {s:?}")))?;
        Dof::Finite(r).validate()
    }
}

// Serialized as the integer itself, or the string "inf".
impl serde::Serialize for Dof {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Dof::Finite(r) => ser.serialize_u32(*r),
            Dof::Infinite => ser.serialize_str("inf"),
        }
    }
}

impl<'de> serde::Deserialize<'de> for Dof {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(r) => {
                if r == 0 {
                    return Err(D::Error::custom("degrees of freedom must be at least 1"));
                }
                Ok(Dof::Finite(r))
            }
            Raw::Text(s) => s.parse().map_err(D::Error::custom),
        }
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Standard normal density.
#[inline]
pub fn phi(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
///
/// Built on libm's erfc (correctly rounded to ~1 ulp); the statrs erf is
/// only ~1e-12 absolute, which is not enough for the quantile polish.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn check_prob(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "probability must lie strictly in (0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Newton refinement of a quantile guess; CDF and density are assumed exact
/// to near machine precision, so two or three steps reach the fixed point.
fn polish(cdf: impl Fn(f64) -> f64, pdf: impl Fn(f64) -> f64, p: f64, start: f64) -> f64 {
    let mut x = start;
    for _ in 0..4 {
        let d = pdf(x);
        if !(d > 0.0) || !d.is_finite() {
            break;
        }
        let step = (cdf(x) - p) / d;
        if !step.is_finite() {
            break;
        }
        x -= step;
        if step.abs() <= 1e-14 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> Result<f64> {
    check_prob(p)?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let start = normal.inverse_cdf(p);
    Ok(polish(norm_cdf, phi, p, start))
}

/// CDF of Student's t with `r` degrees of freedom; the normal CDF when
/// `r` is infinite.
pub fn t_cdf(x: f64, r: Dof) -> f64 {
    match r {
        Dof::Infinite => norm_cdf(x),
        Dof::Finite(r) => StudentsT::new(0.0, 1.0, f64::from(r))
            .expect("valid t")
            .cdf(x),
    }
}

/// Quantile of Student's t with `r` degrees of freedom.
pub fn t_quantile(p: f64, r: Dof) -> Result<f64> {
    check_prob(p)?;
    r.validate()?;
    match r {
        Dof::Infinite => norm_quantile(p),
        Dof::Finite(r) => {
            let dist = StudentsT::new(0.0, 1.0, f64::from(r)).expect("valid t");
            let start = dist.inverse_cdf(p);
            Ok(polish(|x| dist.cdf(x), |x| dist.pdf(x), p, start))
        }
    }
}

/// Chi-square density with `r` degrees of freedom.
pub fn chi2_pdf(x: f64, r: u32) -> f64 {
    ChiSquared::new(f64::from(r)).expect("valid chi2").pdf(x)
}

/// Chi-square CDF with `r` degrees of freedom.
pub fn chi2_cdf(x: f64, r: u32) -> f64 {
    ChiSquared::new(f64::from(r)).expect("valid chi2").cdf(x)
}

/// Chi-square quantile with `r` degrees of freedom.
pub fn chi2_quantile(p: f64, r: u32) -> Result<f64> {
    check_prob(p)?;
    if r == 0 {
        return Err(Error::InvalidArgument("chi-square needs r >= 1".into()));
    }
    let dist = ChiSquared::new(f64::from(r)).expect("valid chi2");
    let start = dist.inverse_cdf(p).max(f64::MIN_POSITIVE);
    let x = polish(|x| dist.cdf(x), |x| dist.pdf(x), p, start);
    Ok(x.max(0.0))
}

/// F quantile with `d1` and `d2` degrees of freedom.
pub fn f_quantile(p: f64, d1: u32, d2: u32) -> Result<f64> {
    check_prob(p)?;
    if d1 == 0 || d2 == 0 {
        return Err(Error::InvalidArgument("F needs d1, d2 >= 1".into()));
    }
    let dist = FisherSnedecor::new(f64::from(d1), f64::from(d2)).expect("valid F");
    let start = dist.inverse_cdf(p).max(f64::MIN_POSITIVE);
    let x = polish(|x| dist.cdf(x), |x| dist.pdf(x), p, start);
    Ok(x.max(0.0))
}
