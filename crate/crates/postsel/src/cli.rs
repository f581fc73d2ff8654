//! Command line driver.
//!
//! Jobs come from a TOML file (`--config`), from flags, or both; flags win
//! field by field. Every run builds its own rayon pool sized by
//! `--threads`, and all randomness is derived from the single `--seed`, so
//! the written CSV is byte-identical across thread counts and machines.
//! Timing goes to stderr, never into the output file.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{CThreshold, DesignConfig, JobConfig, PlanConfig, RunConfig};
use crate::constants::{
    k_naive, k_posi, k_posi1, k_posi_all_subsets, k_scheffe, KConstant, KKind, DEFAULT_DRAWS,
};
use crate::design::{coordinate1_universe, rho_two_model, ModelId, NestedScenario};
use crate::error::{Error, Result};
use crate::mc::staged_min_search;
use crate::nested::{coverage_full, coverage_selected, k_star_nested, min_coverage};
use crate::report::{fmt_g10, CsvReport};
use crate::rng::{derive_seed, derive_seed2, substream};
use crate::selectors::{Selector, SelectorSpec};
use crate::special::Dof;
use crate::zero_restriction::{seeded_threshold_rules, validate_zero_restriction};
use crate::CoverageTarget;

#[derive(Parser, Debug)]
#[command(
    name = "postsel",
    version,
    about = "Confidence intervals that stay honest after model selection",
    subcommand_negates_reqs = true
)]
struct Cli {
    /// TOML job file; command line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for every random quantity in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Nominal miscoverage level.
    #[arg(long, global = true)]
    alpha: Option<f64>,

    /// Worker threads; results do not depend on this. Default: all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output CSV path. Default: <command>.csv in the working directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<CommandArgs>,
}

#[derive(Subcommand, Debug)]
enum CommandArgs {
    /// Interval half-width constants for one design.
    Constants(ConstantsArgs),
    /// Exact two-model coverage reports.
    Exact(ExactArgs),
    /// Stochastic minimal-coverage search.
    Search(SearchArgs),
    /// Validity sweep of the zero-restriction construction.
    ValidateAppendix(ValidateArgs),
}

#[derive(Args, Debug, Default)]
struct DesignArgs {
    /// Builtin family: exchangeable, equicorrelated, or two-column.
    #[arg(long)]
    design: Option<String>,

    /// Number of columns for the builtin families.
    #[arg(long)]
    p: Option<usize>,

    /// Family parameter: the off-axis loading a (exchangeable) or the
    /// protected column's correlation c with each other column
    /// (equicorrelated, default sqrt(0.8/(p-1))).
    #[arg(long)]
    param: Option<f64>,

    /// Column inner product for the two-column family.
    #[arg(long)]
    rho: Option<f64>,

    /// Observations; defaults to p + r (estimated variance) or 2p.
    #[arg(long)]
    n: Option<usize>,

    /// Protected column index (default 0).
    #[arg(long)]
    protected: Option<usize>,

    /// Design matrix from a headerless CSV file instead of a builtin.
    #[arg(long)]
    design_csv: Option<PathBuf>,

    /// Gram matrix literal: rows separated by ';', entries by ','.
    #[arg(long)]
    gram: Option<String>,
}

impl DesignArgs {
    fn to_config(&self) -> Result<Option<DesignConfig>> {
        let sources = usize::from(self.design.is_some())
            + usize::from(self.design_csv.is_some())
            + usize::from(self.gram.is_some());
        if sources == 0 {
            if self.p.is_some()
                || self.param.is_some()
                || self.rho.is_some()
                || self.n.is_some()
                || self.protected.is_some()
            {
                return Err(Error::Parse(
                    "design parameters given without --design, --design-csv, or --gram".into(),
                ));
            }
            return Ok(None);
        }
        if sources > 1 {
            return Err(Error::Parse(
                "give exactly one of --design, --design-csv, --gram".into(),
            ));
        }
        if let Some(path) = &self.design_csv {
            return Ok(Some(DesignConfig::Csv {
                path: path.clone(),
                protected: self.protected.unwrap_or(0),
            }));
        }
        if let Some(gram) = &self.gram {
            return Ok(Some(DesignConfig::Gram {
                rows: parse_gram(gram)?,
                n: self.n,
                protected: self.protected.unwrap_or(0),
            }));
        }
        let family = self.design.as_deref().expect("one source present");
        let config = match family {
            "exchangeable" | "equicorrelated" => {
                let p = self.p.ok_or_else(|| {
                    Error::Parse(format!("--design {family} needs --p"))
                })?;
                if self.rho.is_some() {
                    return Err(Error::Parse(
                        "--rho belongs to the two-column family; use --param here".into(),
                    ));
                }
                let (param, n, protected) = (self.param, self.n, self.protected.unwrap_or(0));
                if family == "exchangeable" {
                    DesignConfig::Exchangeable { p, param, n, protected }
                } else {
                    DesignConfig::Equicorrelated { p, param, n, protected }
                }
            }
            "two-column" => {
                let rho = self.rho.ok_or_else(|| {
                    Error::Parse("--design two-column needs --rho".into())
                })?;
                if self.p.is_some() || self.param.is_some() {
                    return Err(Error::Parse(
                        "two-column takes only --rho and --n".into(),
                    ));
                }
                if self.protected.is_some_and(|j| j != 0) {
                    return Err(Error::Parse(
                        "the two-column family always protects column 0".into(),
                    ));
                }
                DesignConfig::TwoColumn { rho, n: self.n }
            }
            other => {
                return Err(Error::Parse(format!(
                    "unknown design family '{other}' (expected exchangeable, \
                     equicorrelated, or two-column)"
                )))
            }
        };
        Ok(Some(config))
    }
}

fn parse_gram(s: &str) -> Result<Vec<Vec<f64>>> {
    s.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad gram entry '{}'", v.trim())))
                })
                .collect()
        })
        .collect()
}

fn parse_selector(s: &str) -> Result<SelectorSpec> {
    let (name, val) = match s.split_once('=') {
        Some((n, v)) => (n, Some(v)),
        None => (s, None),
    };
    let need = |what: &str| {
        Error::Parse(format!("selector '{name}' needs a value: {name}={what}"))
    };
    match name {
        "nested-t" => {
            let v = val.ok_or_else(|| need("<threshold>"))?;
            Ok(SelectorSpec::NestedTTest {
                c_threshold: v.parse::<CThreshold>()?.value(),
            })
        }
        "stepwise" => {
            let v = val.ok_or_else(|| need("<penalty>"))?;
            let penalty: f64 = v
                .parse()
                .map_err(|_| Error::Parse(format!("bad stepwise penalty '{v}'")))?;
            Ok(SelectorSpec::Stepwise { penalty })
        }
        "lasso-cv" => {
            let v = val.ok_or_else(|| need("<folds>"))?;
            let folds: usize = v
                .parse()
                .map_err(|_| Error::Parse(format!("bad fold count '{v}'")))?;
            Ok(SelectorSpec::LassoCv { folds })
        }
        "spar-variant" => {
            if val.is_some() {
                return Err(Error::Parse("spar-variant takes no value".into()));
            }
            Ok(SelectorSpec::SparVariant)
        }
        "fixed" => {
            let v = val.ok_or_else(|| need("<members, e.g. fixed=0,2>"))?;
            let members: Vec<usize> = v
                .split(',')
                .map(|m| {
                    m.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Parse(format!("bad model member '{}'", m.trim())))
                })
                .collect::<Result<_>>()?;
            Ok(SelectorSpec::FixedModel { model: ModelId::new(members)? })
        }
        other => Err(Error::Parse(format!(
            "unknown selector '{other}' (expected nested-t=<c>, stepwise=<penalty>, \
             lasso-cv=<folds>, spar-variant, or fixed=<members>)"
        ))),
    }
}

#[derive(Args, Debug)]
struct ConstantsArgs {
    #[command(flatten)]
    design: DesignArgs,

    /// Variance degrees of freedom: an integer or 'inf'.
    #[arg(long)]
    r: Option<String>,

    /// Monte Carlo draws behind the simultaneous constants.
    #[arg(long)]
    draws: Option<usize>,

    /// Selector threshold; with a two-column design this adds the
    /// optimal-nested constant row. Accepts sqrt2, sqrtlog10, sqrtlog100,
    /// sqrtlog1000, or a number.
    #[arg(long)]
    c: Option<String>,
}

#[derive(Args, Debug)]
struct ExactArgs {
    /// 1 coverage against zeta; 2 minimal coverage; 3 constants against
    /// correlation.
    #[arg(long)]
    figure: Option<u8>,

    /// Correlation(s); repeatable. Figure 1 takes exactly one; figures 2
    /// and 3 default to a grid on [0, 0.99].
    #[arg(long)]
    rho: Vec<f64>,

    /// Selector threshold(s); repeatable. See `constants --c` for forms.
    #[arg(long)]
    c: Vec<String>,

    /// Coverage target(s): selected or full; repeatable.
    #[arg(long)]
    target: Vec<String>,

    /// Variance degrees of freedom: an integer or 'inf'.
    #[arg(long)]
    r: Option<String>,

    /// Monte Carlo draws behind the simultaneous constants.
    #[arg(long)]
    draws: Option<usize>,

    /// Figure 1: upper end of the zeta grid.
    #[arg(long)]
    zeta_max: Option<f64>,

    /// Figure 1: number of zeta grid points.
    #[arg(long)]
    zeta_points: Option<usize>,

    /// Figures 2 and 3: number of correlation grid points.
    #[arg(long)]
    rho_points: Option<usize>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    design: DesignArgs,

    /// Selector spec; repeatable. Forms: nested-t=<c>, stepwise=<penalty>,
    /// lasso-cv=<folds>, spar-variant, fixed=<members>.
    #[arg(long = "selector")]
    selectors: Vec<String>,

    /// Constant kind; repeatable: naive, posi1, posi, posi-all-subsets,
    /// scheffe.
    #[arg(long = "k")]
    ks: Vec<String>,

    /// Coverage target(s): selected or full; repeatable. Default both.
    #[arg(long)]
    target: Vec<String>,

    /// Variance degrees of freedom: an integer or 'inf'.
    #[arg(long)]
    r: Option<String>,

    /// Monte Carlo draws behind the simultaneous constants.
    #[arg(long)]
    draws: Option<usize>,

    /// Funnel plan: standard, desk, or e.g. 1000x100,100x1000,1x100000.
    #[arg(long)]
    plan: Option<String>,

    /// Directory for per-row checkpoint files; absent means no
    /// checkpointing. Results are identical either way.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    design: DesignArgs,

    /// Number of seeded threshold selectors to test.
    #[arg(long)]
    rules: Option<usize>,

    /// Number of random parameter points per selector.
    #[arg(long)]
    points: Option<usize>,

    /// Monte Carlo replications per (selector, point).
    #[arg(long)]
    replications: Option<usize>,
}

struct Invocation {
    config: RunConfig,
    out: PathBuf,
    threads: usize,
    checkpoint: Option<PathBuf>,
}

fn parse_dof(s: Option<&str>, fallback: Dof) -> Result<Dof> {
    match s {
        Some(text) => text.parse(),
        None => Ok(fallback),
    }
}

fn parse_targets(ss: &[String], fallback: Vec<CoverageTarget>) -> Result<Vec<CoverageTarget>> {
    if ss.is_empty() {
        return Ok(fallback);
    }
    ss.iter().map(|s| s.parse()).collect()
}

fn wrong_command(file_job: &JobConfig, wanted: &str) -> Error {
    Error::Config(format!(
        "config file describes a '{}' job but the command line says '{wanted}'",
        file_job.command_name()
    ))
}

fn merge_command(cmd: CommandArgs, file_job: Option<JobConfig>) -> Result<(JobConfig, Option<PathBuf>)> {
    let mut checkpoint = None;
    let job = match cmd {
        CommandArgs::Constants(a) => {
            let base = match file_job {
                None => None,
                Some(JobConfig::Constants { design, r, draws, c }) => Some((design, r, draws, c)),
                Some(other) => return Err(wrong_command(&other, "constants")),
            };
            let (bd, br, bdraws, bc) = match base {
                Some((d, r, w, c)) => (Some(d), Some(r), Some(w), c),
                None => (None, None, None, None),
            };
            let design = a.design.to_config()?.or(bd).ok_or_else(|| {
                Error::Parse("constants needs --design, --design-csv, or --gram".into())
            })?;
            JobConfig::Constants {
                design,
                r: parse_dof(a.r.as_deref(), br.unwrap_or(Dof::Infinite))?,
                draws: a.draws.or(bdraws).unwrap_or(DEFAULT_DRAWS),
                c: match a.c.as_deref() {
                    Some(s) => Some(s.parse()?),
                    None => bc,
                },
            }
        }
        CommandArgs::Exact(a) => {
            let base = match file_job {
                None => None,
                Some(JobConfig::Exact {
                    figure,
                    rho,
                    c,
                    target,
                    r,
                    draws,
                    zeta_max,
                    zeta_points,
                    rho_points,
                }) => Some((figure, rho, c, target, r, draws, zeta_max, zeta_points, rho_points)),
                Some(other) => return Err(wrong_command(&other, "exact")),
            };
            let (bfig, brho, bc, btarget, br, bdraws, bzmax, bzpts, brpts) = match base {
                Some(v) => (
                    Some(v.0),
                    v.1,
                    v.2,
                    v.3,
                    Some(v.4),
                    Some(v.5),
                    Some(v.6),
                    Some(v.7),
                    Some(v.8),
                ),
                None => (None, vec![], vec![], vec![], None, None, None, None, None),
            };
            let figure = a.figure.or(bfig).ok_or_else(|| {
                Error::Parse("exact needs --figure 1, 2, or 3".into())
            })?;
            let c = if a.c.is_empty() {
                bc
            } else {
                a.c.iter().map(|s| s.parse()).collect::<Result<_>>()?
            };
            JobConfig::Exact {
                figure,
                rho: if a.rho.is_empty() { brho } else { a.rho },
                c,
                target: parse_targets(&a.target, btarget)?,
                r: parse_dof(a.r.as_deref(), br.unwrap_or(Dof::Infinite))?,
                draws: a.draws.or(bdraws).unwrap_or(DEFAULT_DRAWS),
                zeta_max: a.zeta_max.or(bzmax).unwrap_or(6.0),
                zeta_points: a.zeta_points.or(bzpts).unwrap_or(121),
                rho_points: a.rho_points.or(brpts).unwrap_or(21),
            }
        }
        CommandArgs::Search(a) => {
            let base = match file_job {
                None => None,
                Some(JobConfig::Search { design, selectors, ks, targets, r, draws, plan }) => {
                    Some((design, selectors, ks, targets, r, draws, plan))
                }
                Some(other) => return Err(wrong_command(&other, "search")),
            };
            let (bd, bsel, bks, btargets, br, bdraws, bplan) = match base {
                Some(v) => (Some(v.0), v.1, v.2, v.3, Some(v.4), Some(v.5), Some(v.6)),
                None => (None, vec![], vec![], vec![], None, None, None),
            };
            let design = a.design.to_config()?.or(bd).ok_or_else(|| {
                Error::Parse("search needs --design, --design-csv, or --gram".into())
            })?;
            let selectors = if a.selectors.is_empty() {
                bsel
            } else {
                a.selectors
                    .iter()
                    .map(|s| parse_selector(s))
                    .collect::<Result<_>>()?
            };
            let ks = if a.ks.is_empty() {
                bks
            } else {
                a.ks.iter().map(|s| s.parse()).collect::<Result<_>>()?
            };
            checkpoint = a.checkpoint;
            JobConfig::Search {
                design,
                selectors,
                ks,
                targets: parse_targets(&a.target, btargets)?,
                r: parse_dof(a.r.as_deref(), br.unwrap_or(Dof::Infinite))?,
                draws: a.draws.or(bdraws).unwrap_or(DEFAULT_DRAWS),
                plan: match a.plan.as_deref() {
                    Some(s) => s.parse()?,
                    None => bplan.unwrap_or(PlanConfig::Standard),
                },
            }
        }
        CommandArgs::ValidateAppendix(a) => {
            let base = match file_job {
                None => None,
                Some(JobConfig::ValidateAppendix { design, rules, points, replications }) => {
                    Some((design, rules, points, replications))
                }
                Some(other) => return Err(wrong_command(&other, "validate-appendix")),
            };
            let (bd, brules, bpoints, breps) = match base {
                Some(v) => (Some(v.0), Some(v.1), Some(v.2), Some(v.3)),
                None => (None, None, None, None),
            };
            let design = a.design.to_config()?.or(bd).ok_or_else(|| {
                Error::Parse("validate-appendix needs --design, --design-csv, or --gram".into())
            })?;
            JobConfig::ValidateAppendix {
                design,
                rules: a.rules.or(brules).unwrap_or(50),
                points: a.points.or(bpoints).unwrap_or(10),
                replications: a.replications.or(breps).unwrap_or(100_000),
            }
        }
    };
    Ok((job, checkpoint))
}

fn build_invocation(cli: Cli) -> Result<Invocation> {
    let file_config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Some(RunConfig::from_toml(&text)?)
        }
        None => None,
    };
    let (job, checkpoint) = match (cli.command, file_config.as_ref()) {
        (None, Some(fc)) => (fc.job.clone(), None),
        (None, None) => {
            return Err(Error::Parse(
                "give a subcommand or --config <file> (try --help)".into(),
            ))
        }
        (Some(cmd), fc) => merge_command(cmd, fc.map(|c| c.job.clone()))?,
    };
    let config = RunConfig {
        seed: cli.seed.or(file_config.as_ref().map(|c| c.seed)).unwrap_or(0),
        alpha: cli
            .alpha
            .or(file_config.as_ref().map(|c| c.alpha))
            .unwrap_or(0.05),
        job,
    };
    config.validate()?;
    let threads = match cli.threads {
        Some(0) => return Err(Error::Config("threads must be at least 1".into())),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let out = cli
        .out
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", config.job.command_name())));
    Ok(Invocation { config, out, threads, checkpoint })
}

/// Executes a validated job and writes its report atomically to `out`.
pub fn run(config: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    config.validate()?;
    let report = match &config.job {
        JobConfig::Constants { design, r, draws, c } => {
            run_constants(config.seed, config.alpha, design, *r, *draws, *c)?
        }
        JobConfig::Exact {
            figure,
            rho,
            c,
            target,
            r,
            draws,
            zeta_max,
            zeta_points,
            rho_points,
        } => run_exact(
            config.seed,
            config.alpha,
            *figure,
            rho,
            c,
            target,
            *r,
            *draws,
            *zeta_max,
            *zeta_points,
            *rho_points,
        )?,
        JobConfig::Search { design, selectors, ks, targets, r, draws, plan } => run_search(
            config.seed,
            config.alpha,
            design,
            selectors,
            ks,
            targets,
            *r,
            *draws,
            plan,
            checkpoint,
        )?,
        JobConfig::ValidateAppendix { design, rules, points, replications } => {
            run_validate(config.seed, config.alpha, design, *rules, *points, *replications)?
        }
    };
    report.write(config, out)
}

/// Constants for the standardized two-column design, sized for nested
/// model comparisons: naive, posi1, posi, scheffe.
fn two_column_constants(
    rho: f64,
    alpha: f64,
    r: Dof,
    draws: usize,
    seed: u64,
) -> Result<Vec<KConstant>> {
    let design = DesignConfig::TwoColumn { rho, n: None }.build(r)?;
    let models = coordinate1_universe(2, 0)?;
    Ok(vec![
        k_naive(alpha, r)?,
        k_posi1(&design, &models, alpha, r, draws, derive_seed(seed, 1))?,
        k_posi(&design, &models, alpha, r, draws, derive_seed(seed, 2))?,
        k_scheffe(alpha, 2, r)?,
    ])
}

fn run_constants(
    seed: u64,
    alpha: f64,
    design_config: &DesignConfig,
    r: Dof,
    draws: usize,
    c: Option<CThreshold>,
) -> Result<CsvReport> {
    let design = design_config.build(r)?;
    let models = coordinate1_universe(design.p(), design.protected())?;
    let mut constants = vec![
        k_naive(alpha, r)?,
        k_posi1(&design, &models, alpha, r, draws, derive_seed(seed, 1))?,
        k_posi(&design, &models, alpha, r, draws, derive_seed(seed, 2))?,
        k_posi_all_subsets(&design, alpha, r, draws, derive_seed(seed, 3))?,
        k_scheffe(alpha, design.p() as u32, r)?,
    ];
    if let Some(c) = c {
        if design.p() != 2 {
            return Err(Error::Config(format!(
                "the optimal-nested constant is defined for two-column designs, \
                 this one has p = {}",
                design.p()
            )));
        }
        constants.push(k_star_nested(rho_two_model(&design)?, c.value(), alpha, r)?);
    }
    let mut report = CsvReport::new(["k_kind", "k_value", "mc_se", "alpha", "r"]);
    for k in &constants {
        report.push_row(vec![
            k.kind.to_string(),
            fmt_g10(k.value),
            fmt_g10(k.mc_se),
            fmt_g10(k.alpha),
            k.r.to_string(),
        ]);
    }
    Ok(report)
}

fn zeta_grid(zeta_max: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| zeta_max * i as f64 / (points - 1) as f64)
        .collect()
}

fn rho_grid(points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| 0.99 * i as f64 / (points - 1) as f64)
        .collect()
}

const EXACT_COLUMNS: [&str; 8] = [
    "figure",
    "target",
    "rho",
    "zeta",
    "c_threshold",
    "k_kind",
    "k_value",
    "coverage",
];

#[allow(clippy::too_many_arguments)]
fn run_exact(
    seed: u64,
    alpha: f64,
    figure: u8,
    rhos: &[f64],
    cs: &[CThreshold],
    targets: &[CoverageTarget],
    r: Dof,
    draws: usize,
    zeta_max: f64,
    zeta_points: usize,
    rho_points: usize,
) -> Result<CsvReport> {
    let mut report = CsvReport::new(EXACT_COLUMNS);
    match figure {
        1 => {
            let rho = rhos[0];
            let cs = if cs.is_empty() { vec![CThreshold::Sqrt2] } else { cs.to_vec() };
            let targets = if targets.is_empty() {
                vec![CoverageTarget::SelectedModel, CoverageTarget::FullParameter]
            } else {
                targets.to_vec()
            };
            let constants = two_column_constants(rho, alpha, r, draws, derive_seed(seed, 0))?;
            let zetas = zeta_grid(zeta_max, zeta_points);
            let mut specs = Vec::new();
            for target in &targets {
                for c in &cs {
                    for k in &constants {
                        for &zeta in &zetas {
                            specs.push((*target, *c, *k, zeta));
                        }
                    }
                }
            }
            let values: Vec<f64> = specs
                .par_iter()
                .map(|(target, c, k, zeta)| -> Result<f64> {
                    let scenario = NestedScenario::new(rho, *zeta, c.value(), r)?;
                    let cv = match target {
                        CoverageTarget::SelectedModel => coverage_selected(&scenario, k.value)?,
                        CoverageTarget::FullParameter => coverage_full(&scenario, k.value)?,
                    };
                    Ok(cv.value)
                })
                .collect::<Result<_>>()?;
            for ((target, c, k, zeta), value) in specs.iter().zip(&values) {
                report.push_row(vec![
                    "1".into(),
                    target.to_string(),
                    fmt_g10(rho),
                    fmt_g10(*zeta),
                    fmt_g10(c.value()),
                    k.kind.to_string(),
                    fmt_g10(k.value),
                    fmt_g10(*value),
                ]);
            }
        }
        2 => {
            let cs = if cs.is_empty() {
                CThreshold::standard_set().to_vec()
            } else {
                cs.to_vec()
            };
            let targets = if targets.is_empty() {
                vec![CoverageTarget::SelectedModel]
            } else {
                targets.to_vec()
            };
            let rhos = if rhos.is_empty() { rho_grid(rho_points) } else { rhos.to_vec() };
            let per_rho: Vec<Vec<KConstant>> = rhos
                .par_iter()
                .enumerate()
                .map(|(i, &rho)| {
                    two_column_constants(rho, alpha, r, draws, derive_seed2(seed, 2, i as u64))
                })
                .collect::<Result<_>>()?;
            let mut specs = Vec::new();
            for target in &targets {
                for c in &cs {
                    for (ri, &rho) in rhos.iter().enumerate() {
                        specs.push((*target, *c, ri, rho, Some(KKind::OptimalNested)));
                        specs.push((*target, *c, ri, rho, None));
                    }
                }
            }
            // Each spec expands to rows (kind, k value, zeta*, min coverage).
            let evaluated: Vec<Vec<(KKind, f64, f64, f64)>> = specs
                .par_iter()
                .map(|(target, c, ri, rho, special)| -> Result<Vec<(KKind, f64, f64, f64)>> {
                    match special {
                        Some(KKind::OptimalNested) => {
                            let k = k_star_nested(*rho, c.value(), alpha, r)?;
                            let (zeta_star, cv) =
                                min_coverage(*rho, c.value(), k.value, r, *target)?;
                            Ok(vec![(KKind::OptimalNested, k.value, zeta_star, cv.value)])
                        }
                        _ => per_rho[*ri]
                            .iter()
                            .map(|k| {
                                let (zeta_star, cv) =
                                    min_coverage(*rho, c.value(), k.value, r, *target)?;
                                Ok((k.kind, k.value, zeta_star, cv.value))
                            })
                            .collect(),
                    }
                })
                .collect::<Result<_>>()?;
            for ((target, c, _, rho, _), rows) in specs.iter().zip(&evaluated) {
                for (kind, k_value, zeta_star, value) in rows {
                    report.push_row(vec![
                        "2".into(),
                        target.to_string(),
                        fmt_g10(*rho),
                        fmt_g10(*zeta_star),
                        fmt_g10(c.value()),
                        kind.to_string(),
                        fmt_g10(*k_value),
                        fmt_g10(*value),
                    ]);
                }
            }
        }
        3 => {
            let c = cs.first().copied().unwrap_or(CThreshold::Sqrt2);
            let rhos = if rhos.is_empty() { rho_grid(rho_points) } else { rhos.to_vec() };
            let evaluated: Vec<Vec<(KKind, f64, bool)>> = rhos
                .par_iter()
                .enumerate()
                .map(|(i, &rho)| -> Result<Vec<(KKind, f64, bool)>> {
                    let base =
                        two_column_constants(rho, alpha, r, draws, derive_seed2(seed, 3, i as u64))?;
                    let star = k_star_nested(rho, c.value(), alpha, r)?;
                    Ok(vec![
                        (base[0].kind, base[0].value, false),
                        (star.kind, star.value, true),
                        (base[1].kind, base[1].value, false),
                        (base[2].kind, base[2].value, false),
                        (base[3].kind, base[3].value, false),
                    ])
                })
                .collect::<Result<_>>()?;
            for (&rho, rows) in rhos.iter().zip(&evaluated) {
                for (kind, value, uses_c) in rows {
                    report.push_row(vec![
                        "3".into(),
                        String::new(),
                        fmt_g10(rho),
                        String::new(),
                        if *uses_c { fmt_g10(c.value()) } else { String::new() },
                        kind.to_string(),
                        fmt_g10(*value),
                        String::new(),
                    ]);
                }
            }
        }
        _ => unreachable!("validated by the config"),
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_search(
    seed: u64,
    alpha: f64,
    design_config: &DesignConfig,
    selectors: &[SelectorSpec],
    ks: &[KKind],
    targets: &[CoverageTarget],
    r: Dof,
    draws: usize,
    plan_config: &PlanConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<CsvReport> {
    let design = design_config.build(r)?;
    let label = design_config.label();
    let models = coordinate1_universe(design.p(), design.protected())?;
    let mut resolved = Vec::with_capacity(ks.len());
    for (i, kind) in ks.iter().enumerate() {
        let k_seed = derive_seed2(seed, 0xc0, i as u64);
        let k = match kind {
            KKind::Naive => k_naive(alpha, r)?,
            KKind::Scheffe => k_scheffe(alpha, design.p() as u32, r)?,
            KKind::Posi1 => k_posi1(&design, &models, alpha, r, draws, k_seed)?,
            KKind::Posi => k_posi(&design, &models, alpha, r, draws, k_seed)?,
            KKind::PosiAllSubsets => k_posi_all_subsets(&design, alpha, r, draws, k_seed)?,
            KKind::OptimalNested => {
                return Err(Error::Config(
                    "the search does not take optimal-nested; that constant is tied \
                     to the two-column t-test problem (see the constants command)"
                        .into(),
                ))
            }
        };
        resolved.push(k);
    }
    let targets = if targets.is_empty() {
        vec![CoverageTarget::SelectedModel, CoverageTarget::FullParameter]
    } else {
        targets.to_vec()
    };
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut report = CsvReport::new([
        "design",
        "selector",
        "target",
        "k_kind",
        "k_value",
        "rate",
        "se",
        "replications",
        "beta_min",
    ]);
    let mut row_idx = 0u64;
    for spec in selectors {
        for k in &resolved {
            for target in &targets {
                let plan = plan_config.to_plan(derive_seed2(seed, 0x5ea, row_idx))?;
                let checkpoint = checkpoint_dir
                    .map(|d| d.join(format!("search-row{row_idx}.checkpoint.json")));
                let started = Instant::now();
                let outcome = staged_min_search(
                    &design,
                    spec,
                    k,
                    *target,
                    &plan,
                    checkpoint.as_deref(),
                )?;
                eprintln!(
                    "search {} / {} / {}: rate {:.4} ({:.1}s)",
                    spec.name(),
                    k.kind,
                    target,
                    outcome.estimate.rate,
                    started.elapsed().as_secs_f64(),
                );
                let beta = outcome
                    .beta_min
                    .iter()
                    .map(|b| fmt_g10(*b))
                    .collect::<Vec<_>>()
                    .join(" ");
                report.push_row(vec![
                    label.clone(),
                    spec.name(),
                    target.to_string(),
                    k.kind.to_string(),
                    fmt_g10(k.value),
                    fmt_g10(outcome.estimate.rate),
                    fmt_g10(outcome.estimate.se),
                    outcome.estimate.replications.to_string(),
                    beta,
                ]);
                row_idx += 1;
            }
        }
    }
    Ok(report)
}

fn run_validate(
    seed: u64,
    alpha: f64,
    design_config: &DesignConfig,
    rules: usize,
    points: usize,
    replications: usize,
) -> Result<CsvReport> {
    let design = design_config.build(Dof::Infinite)?;
    if design.residual_dof() == 0 {
        return Err(Error::Config(
            "the validity sweep estimates the scale; it needs n > p".into(),
        ));
    }
    let prot = design.protected();
    let m1 = design.full_model();
    let m0 = ModelId::new(
        m1.members().iter().copied().filter(|&j| j != prot).collect(),
    )?;
    let specs = seeded_threshold_rules(rules, derive_seed(seed, 0x7e57));
    let mut point_rng = substream(derive_seed(seed, 0x9017), 0);
    let parameter_points: Vec<(DVector<f64>, f64)> = (0..points)
        .map(|_| {
            let beta = DVector::from_fn(design.p(), |_, _| {
                2.0 * point_rng.sample::<f64, _>(StandardNormal)
            });
            let sigma = 0.5 + point_rng.sample::<f64, _>(StandardNormal).abs();
            (beta, sigma)
        })
        .collect();
    let mut report = CsvReport::new([
        "selector_id",
        "v_seed",
        "threshold",
        "point",
        "rate",
        "se",
        "pass",
    ]);
    let eval_seed = derive_seed(seed, 0xe57);
    for (i, spec) in specs.iter().enumerate() {
        let SelectorSpec::ThresholdRule { v_seed, threshold } = spec else {
            unreachable!("the battery contains only threshold rules");
        };
        let selector = Selector::new_two_model(spec.clone(), &design, m0.clone(), m1.clone())?;
        for (j, (beta, sigma)) in parameter_points.iter().enumerate() {
            let est = validate_zero_restriction(
                &design,
                &selector,
                beta,
                *sigma,
                alpha,
                replications,
                derive_seed2(eval_seed, i as u64, j as u64),
            )?;
            let pass = est.rate >= 1.0 - alpha - 3.0 * est.se;
            report.push_row(vec![
                i.to_string(),
                v_seed.to_string(),
                fmt_g10(*threshold),
                j.to_string(),
                fmt_g10(est.rate),
                fmt_g10(est.se),
                if pass { "pass".into() } else { "fail".into() },
            ]);
        }
    }
    Ok(report)
}

/// Entry point: parses arguments, runs the job on a pool of the requested
/// size, and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here by design and exit cleanly.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let invocation = build_invocation(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(invocation.threads)
        .build()
        .map_err(|e| Error::Config(format!("could not build the thread pool: {e}")))?;
    let started = Instant::now();
    pool.install(|| {
        run(
            &invocation.config,
            &invocation.out,
            invocation.checkpoint.as_deref(),
        )
    })?;
    eprintln!(
        "{}: wrote {} ({:.1}s)",
        invocation.config.job.command_name(),
        invocation.out.display(),
        started.elapsed().as_secs_f64(),
    );
    Ok(())
}
