//! Job descriptions: what to compute, on which design, at which settings.
//!
//! A job is a TOML document (or the equivalent command line flags). The
//! same document is embedded verbatim in every output file's header, so a
//! result always names the configuration that produced it and can be
//! reproduced from the file alone. Output and thread-count options live
//! outside the config on purpose: they must not influence results, and
//! keeping them out of the header keeps outputs byte-identical across
//! machines with different core counts.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::constants::{KKind, DEFAULT_DRAWS};
use crate::design::{
    build_design_from_gram, equicorrelated_design, exchangeable_design, load_design_csv, Design,
};
use crate::error::{Error, Result};
use crate::mc::{SearchPlan, SearchStage};
use crate::selectors::SelectorSpec;
use crate::special::Dof;
use crate::CoverageTarget;

/// Threshold for the nested t-test selector. The symbolic forms keep
/// their exact value and round-trip through configs by name; sqrt2 is the
/// threshold induced by a penalty of 2 per parameter, sqrtlog-n by a
/// penalty of ln n.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CThreshold {
    Sqrt2,
    SqrtLog10,
    SqrtLog100,
    SqrtLog1000,
    Value(f64),
}

impl CThreshold {
    pub fn value(self) -> f64 {
        match self {
            CThreshold::Sqrt2 => std::f64::consts::SQRT_2,
            CThreshold::SqrtLog10 => 10.0f64.ln().sqrt(),
            CThreshold::SqrtLog100 => 100.0f64.ln().sqrt(),
            CThreshold::SqrtLog1000 => 1000.0f64.ln().sqrt(),
            CThreshold::Value(v) => v,
        }
    }

    /// The four thresholds the reports sweep by default.
    pub fn standard_set() -> [CThreshold; 4] {
        [
            CThreshold::Sqrt2,
            CThreshold::SqrtLog10,
            CThreshold::SqrtLog100,
            CThreshold::SqrtLog1000,
        ]
    }
}

impl fmt::Display for CThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CThreshold::Sqrt2 => f.write_str("sqrt2"),
            CThreshold::SqrtLog10 => f.write_str("sqrtlog10"),
            CThreshold::SqrtLog100 => f.write_str("sqrtlog100"),
            CThreshold::SqrtLog1000 => f.write_str("sqrtlog1000"),
            CThreshold::Value(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for CThreshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sqrt2" => CThreshold::Sqrt2,
            "sqrtlog10" => CThreshold::SqrtLog10,
            "sqrtlog100" => CThreshold::SqrtLog100,
            "sqrtlog1000" => CThreshold::SqrtLog1000,
            other => {
                let v: f64 = other.parse().map_err(|_| {
                    Error::Parse(format!(
                        "threshold must be sqrt2, sqrtlog10, sqrtlog100, sqrtlog1000, \
                         or a positive number, got '{other}'"
                    ))
                })?;
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Parse(format!(
                        "threshold must be positive and finite, got {v}"
                    )));
                }
                CThreshold::Value(v)
            }
        })
    }
}

impl Serialize for CThreshold {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CThreshold::Value(v) => ser.serialize_f64(*v),
            sym => ser.serialize_str(&sym.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for CThreshold {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(D::Error::custom(format!(
                        "threshold must be positive and finite, got {v}"
                    )));
                }
                Ok(CThreshold::Value(v))
            }
            Raw::Text(s) => s.parse().map_err(D::Error::custom),
        }
    }
}

/// Where the design matrix comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", rename_all_fields = "kebab-case")]
pub enum DesignConfig {
    /// Columns e_j + a 1 in coefficient space, embedded in n rows.
    Exchangeable {
        p: usize,
        /// The off-axis loading a. Required.
        #[serde(skip_serializing_if = "Option::is_none")]
        param: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        n: Option<usize>,
        #[serde(default)]
        protected: usize,
    },
    /// Protected column correlated c with each other column; the other
    /// columns are mutually orthonormal.
    Equicorrelated {
        p: usize,
        /// The protected column's correlation c; defaults to
        /// sqrt(0.8 / (p - 1)), keeping the Gram positive definite.
        #[serde(skip_serializing_if = "Option::is_none")]
        param: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        n: Option<usize>,
        #[serde(default)]
        protected: usize,
    },
    /// Two standardized columns with inner product rho; the first column
    /// is protected.
    TwoColumn {
        rho: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        n: Option<usize>,
    },
    /// Numeric matrix from a headerless CSV file, one observation per row.
    Csv {
        path: PathBuf,
        #[serde(default)]
        protected: usize,
    },
    /// Explicit Gram matrix, given row by row.
    Gram {
        rows: Vec<Vec<f64>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        n: Option<usize>,
        #[serde(default)]
        protected: usize,
    },
}

impl DesignConfig {
    /// Materializes the design. When `n` is omitted it is chosen so that
    /// the residual degrees of freedom match a finite `r` (estimated
    /// variance needs exactly that), or as 2p for known variance where n
    /// only has to exceed p.
    pub fn build(&self, r: Dof) -> Result<Design> {
        let default_n = |p: usize| match r {
            Dof::Finite(rd) => p + rd as usize,
            Dof::Infinite => 2 * p,
        };
        match self {
            DesignConfig::Exchangeable { p, param, n, protected } => {
                let a = param.ok_or_else(|| {
                    Error::Config("exchangeable design needs param, the off-axis loading".into())
                })?;
                exchangeable_design(*p, a, n.unwrap_or(default_n(*p)), *protected)
            }
            DesignConfig::Equicorrelated { p, param, n, protected } => {
                if *p < 2 {
                    return Err(Error::Config("equicorrelated design needs p >= 2".into()));
                }
                let c = param.unwrap_or_else(|| (0.8 / (*p as f64 - 1.0)).sqrt());
                equicorrelated_design(*p, c, n.unwrap_or(default_n(*p)), *protected)
            }
            DesignConfig::TwoColumn { rho, n } => {
                if !(rho.abs() < 1.0) {
                    return Err(Error::Config(format!(
                        "two-column correlation must lie in (-1, 1), got {rho}"
                    )));
                }
                let gram = DMatrix::from_row_slice(2, 2, &[1.0, *rho, *rho, 1.0]);
                build_design_from_gram(&gram, n.unwrap_or(default_n(2)), 0)
            }
            DesignConfig::Csv { path, protected } => load_design_csv(path, *protected),
            DesignConfig::Gram { rows, n, protected } => {
                let p = rows.len();
                if p == 0 || rows.iter().any(|row| row.len() != p) {
                    return Err(Error::Config(format!(
                        "gram rows must form a nonempty square matrix, got {p} rows"
                    )));
                }
                let gram = DMatrix::from_fn(p, p, |i, j| rows[i][j]);
                build_design_from_gram(&gram, n.unwrap_or(default_n(p)), *protected)
            }
        }
    }

    /// Short label identifying the design in report rows.
    pub fn label(&self) -> String {
        match self {
            DesignConfig::Exchangeable { p, .. } => format!("exchangeable-p{p}"),
            DesignConfig::Equicorrelated { p, .. } => format!("equicorrelated-p{p}"),
            DesignConfig::TwoColumn { rho, .. } => format!("two-column-rho{rho}"),
            DesignConfig::Csv { path, .. } => format!(
                "csv-{}",
                path.file_stem().map_or_else(
                    || "design".to_string(),
                    |s| s.to_string_lossy().into_owned()
                )
            ),
            DesignConfig::Gram { rows, .. } => format!("gram-p{}", rows.len()),
        }
    }
}

/// Search funnel: a named builtin or explicit stages. Accepts the strings
/// "standard" and "desk", a compact "1000x100,100x1000,1x100000" form, or
/// an explicit list of {candidates, replications} tables.
#[derive(Clone, Debug, PartialEq)]
pub enum PlanConfig {
    Standard,
    Desk,
    Custom(Vec<SearchStage>),
}

impl PlanConfig {
    pub fn to_plan(&self, seed: u64) -> Result<SearchPlan> {
        match self {
            PlanConfig::Standard => Ok(SearchPlan::standard(seed)),
            PlanConfig::Desk => Ok(SearchPlan::desk(seed)),
            PlanConfig::Custom(stages) => SearchPlan::new(stages.clone(), seed),
        }
    }
}

impl fmt::Display for PlanConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanConfig::Standard => f.write_str("standard"),
            PlanConfig::Desk => f.write_str("desk"),
            PlanConfig::Custom(stages) => {
                for (i, s) in stages.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{}x{}", s.candidates, s.replications)?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for PlanConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(PlanConfig::Standard),
            "desk" => Ok(PlanConfig::Desk),
            other => {
                let mut stages = Vec::new();
                for part in other.split(',') {
                    let Some((c, r)) = part.split_once('x') else {
                        return Err(Error::Parse(format!(
                            "plan must be 'standard', 'desk', or a list like \
                             '1000x100,100x1000,1x100000'; got '{other}'"
                        )));
                    };
                    let candidates = c.trim().parse().map_err(|_| {
                        Error::Parse(format!("bad candidate count '{c}' in plan"))
                    })?;
                    let replications = r.trim().parse().map_err(|_| {
                        Error::Parse(format!("bad replication count '{r}' in plan"))
                    })?;
                    stages.push(SearchStage { candidates, replications });
                }
                Ok(PlanConfig::Custom(stages))
            }
        }
    }
}

impl Serialize for PlanConfig {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PlanConfig::Custom(stages) => stages.serialize(ser),
            named => ser.serialize_str(&named.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for PlanConfig {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Stages(Vec<SearchStage>),
        }
        match Raw::deserialize(de)? {
            Raw::Text(s) => s.parse().map_err(D::Error::custom),
            Raw::Stages(stages) => Ok(PlanConfig::Custom(stages)),
        }
    }
}

fn default_r() -> Dof {
    Dof::Infinite
}

fn default_draws() -> usize {
    DEFAULT_DRAWS
}

fn default_plan() -> PlanConfig {
    PlanConfig::Standard
}

fn default_rules() -> usize {
    50
}

fn default_points() -> usize {
    10
}

fn default_replications() -> usize {
    100_000
}

fn default_zeta_max() -> f64 {
    6.0
}

fn default_zeta_points() -> usize {
    121
}

fn default_rho_points() -> usize {
    21
}

/// What a run computes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", rename_all_fields = "kebab-case")]
pub enum JobConfig {
    /// The table of interval constants for one design.
    Constants {
        design: DesignConfig,
        #[serde(default = "default_r")]
        r: Dof,
        #[serde(default = "default_draws")]
        draws: usize,
        /// With a two-column design, also report the smallest constant
        /// that keeps the t-test selector at this threshold honest.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<CThreshold>,
    },
    /// Exact two-model reports: figure 1 is coverage against the
    /// standardized second coefficient, figure 2 minimal coverage against
    /// correlation and threshold, figure 3 the constants against
    /// correlation.
    Exact {
        figure: u8,
        /// Correlations; empty means a builtin grid for figures 2 and 3.
        #[serde(default)]
        rho: Vec<f64>,
        /// Selector thresholds; empty means sqrt2 (figures 1 and 3) or
        /// the standard four-threshold sweep (figure 2).
        #[serde(default)]
        c: Vec<CThreshold>,
        /// Coverage targets; empty means both for figure 1 and the
        /// selected-model target for figure 2.
        #[serde(default)]
        target: Vec<CoverageTarget>,
        #[serde(default = "default_r")]
        r: Dof,
        #[serde(default = "default_draws")]
        draws: usize,
        #[serde(default = "default_zeta_max")]
        zeta_max: f64,
        #[serde(default = "default_zeta_points")]
        zeta_points: usize,
        #[serde(default = "default_rho_points")]
        rho_points: usize,
    },
    /// Stochastic minimal-coverage search over selector and constant
    /// combinations.
    Search {
        design: DesignConfig,
        selectors: Vec<SelectorSpec>,
        ks: Vec<KKind>,
        /// Empty means both targets.
        #[serde(default)]
        targets: Vec<CoverageTarget>,
        #[serde(default = "default_r")]
        r: Dof,
        #[serde(default = "default_draws")]
        draws: usize,
        #[serde(default = "default_plan")]
        plan: PlanConfig,
    },
    /// Validity sweep of the zero-restriction construction under seeded
    /// data-dependent two-model selectors.
    ValidateAppendix {
        design: DesignConfig,
        #[serde(default = "default_rules")]
        rules: usize,
        #[serde(default = "default_points")]
        points: usize,
        #[serde(default = "default_replications")]
        replications: usize,
    },
}

impl JobConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            JobConfig::Constants { draws, .. } => {
                if *draws == 0 {
                    return Err(Error::Config("draws must be positive".into()));
                }
            }
            JobConfig::Exact {
                figure,
                rho,
                zeta_points,
                rho_points,
                draws,
                zeta_max,
                ..
            } => {
                if !(1..=3).contains(figure) {
                    return Err(Error::Config(format!(
                        "figure must be 1, 2, or 3, got {figure}"
                    )));
                }
                if let Some(bad) = rho.iter().find(|r| !(r.abs() < 1.0)) {
                    return Err(Error::Config(format!(
                        "correlations must lie in (-1, 1), got {bad}"
                    )));
                }
                if *figure == 1 && rho.len() != 1 {
                    return Err(Error::Config(
                        "figure 1 needs exactly one correlation".into(),
                    ));
                }
                if *zeta_points < 2 || *rho_points < 2 {
                    return Err(Error::Config("grids need at least two points".into()));
                }
                if !(*zeta_max > 0.0) || !zeta_max.is_finite() {
                    return Err(Error::Config(format!(
                        "zeta range must be positive and finite, got {zeta_max}"
                    )));
                }
                if *draws == 0 {
                    return Err(Error::Config("draws must be positive".into()));
                }
            }
            JobConfig::Search { selectors, ks, draws, .. } => {
                if selectors.is_empty() {
                    return Err(Error::Config("search needs at least one selector".into()));
                }
                if ks.is_empty() {
                    return Err(Error::Config("search needs at least one constant kind".into()));
                }
                if *draws == 0 {
                    return Err(Error::Config("draws must be positive".into()));
                }
            }
            JobConfig::ValidateAppendix { rules, points, replications, .. } => {
                if *rules == 0 || *points == 0 || *replications == 0 {
                    return Err(Error::Config(
                        "rules, points, and replications must all be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Subcommand name, also the default output file stem.
    pub fn command_name(&self) -> &'static str {
        match self {
            JobConfig::Constants { .. } => "constants",
            JobConfig::Exact { .. } => "exact",
            JobConfig::Search { .. } => "search",
            JobConfig::ValidateAppendix { .. } => "validate-appendix",
        }
    }
}

fn default_alpha() -> f64 {
    0.05
}

/// A complete, reproducible job description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub job: JobConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        self.job.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}
