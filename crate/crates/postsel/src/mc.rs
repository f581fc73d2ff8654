//! Monte Carlo coverage estimation and the staged search for
//! least-favorable parameters.
//!
//! Every replication is addressed by (chunk, offset) under a counter-based
//! substream, and every (stage, candidate) pair derives its own seed, so
//! estimates are bitwise reproducible regardless of thread count or
//! scheduling. The search fixes sigma during candidate generation because
//! coverage is invariant under jointly scaling (beta, sigma); with matched
//! seeds the per-replication cover events are bit-identical under
//! power-of-two scalings, which the tests exercise.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::KConstant;
use crate::design::{Design, ModelCache};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_seed2, substream, CHUNK};
use crate::selectors::{Selector, SelectorSpec};
use crate::special::Dof;
use crate::CoverageTarget;

/// An estimated coverage probability with its provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverageEstimate {
    pub rate: f64,
    pub se: f64,
    pub replications: usize,
    /// Parameter vector the rate was estimated at.
    pub beta: Vec<f64>,
    pub target: CoverageTarget,
}

fn binomial_se(rate: f64, replications: usize) -> f64 {
    (rate * (1.0 - rate) / replications as f64).sqrt()
}

fn validate_k_dof(design: &Design, r: Dof) -> Result<()> {
    if let Dof::Finite(rd) = r {
        let expect = design.residual_dof();
        if rd as usize != expect {
            return Err(Error::InvalidArgument(format!(
                "variance dof {rd} must equal n - p = {expect} of the design; \
                 the scale estimate comes from the full-model residuals"
            )));
        }
        if expect == 0 {
            return Err(Error::InvalidArgument(
                "saturated design leaves no residual degrees of freedom".into(),
            ));
        }
    }
    Ok(())
}

/// Per-replication cover events for the interval `estimate +- K se` on the
/// protected coefficient of the selected model.
fn coverage_events(
    design: &Design,
    selector: &Selector,
    k: &KConstant,
    beta: &DVector<f64>,
    sigma: f64,
    target: CoverageTarget,
    replications: usize,
    seed: u64,
) -> Result<Vec<u8>> {
    let n = design.n();
    let p = design.p();
    if beta.len() != p {
        return Err(Error::InvalidArgument(format!(
            "beta has {} entries, design has {p} columns",
            beta.len()
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    if replications == 0 {
        return Err(Error::InvalidArgument("replications must be positive".into()));
    }
    if !(k.value >= 0.0) || !k.value.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "interval constant must be finite and nonnegative, got {}",
            k.value
        )));
    }
    validate_k_dof(design, k.r)?;

    let mu = design.x() * beta;
    let full_factor = design.factor(&design.full_model())?;
    let rdof = design.residual_dof() as f64;
    let fits = ModelCache::coordinate1(design)?;
    let prot = design.protected();
    let beta_prot = beta[prot];
    let sel_seed = derive_seed(seed, 0x5e1);
    let n_chunks = replications.div_ceil(CHUNK);

    let chunks: Vec<Vec<u8>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| -> Result<Vec<u8>> {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(replications);
            let mut rng = substream(seed, ci as u64);
            let mut y = DVector::<f64>::zeros(n);
            let mut events = vec![0u8; hi - lo];
            // Selected-model targets depend only on the model; memoize per
            // chunk so repeated selections are free.
            let mut targets: HashMap<u64, Option<f64>> = HashMap::new();
            for (off, slot) in events.iter_mut().enumerate() {
                let gi = lo + off;
                for i in 0..n {
                    y[i] = mu[i] + sigma * rng.sample::<f64, _>(StandardNormal);
                }
                let sigma_hat = match k.r {
                    Dof::Infinite => sigma,
                    Dof::Finite(_) => (full_factor.rss(&y) / rdof).sqrt(),
                };
                let m = selector.select(&y, sigma_hat, derive_seed(sel_seed, gi as u64))?;
                let pos = m.position(prot).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "selected model {m} omits the protected column {prot} \
                         (replication {gi})"
                    ))
                })?;
                let f = fits.factor(&m)?;
                let estimate = f.coef(&y)[pos];
                let halfwidth = k.value * sigma_hat * f.se_scale[pos];
                let tgt = match target {
                    CoverageTarget::FullParameter => beta_prot,
                    CoverageTarget::SelectedModel => {
                        let entry = targets.entry(m.mask()).or_insert_with(|| {
                            fits.factor(&m).ok().map(|f| f.coef(&mu)[pos])
                        });
                        entry.ok_or_else(|| {
                            Error::Numerical(format!("target projection failed for {m}"))
                        })?
                    }
                };
                *slot = u8::from((estimate - tgt).abs() <= halfwidth);
            }
            Ok(events)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(chunks.concat())
}

/// Estimates the coverage of `spec`'s selected model intervals at one
/// parameter point. Known variance (`k.r` infinite) plugs in `sigma`;
/// estimated variance takes sigma-hat from the full-model residuals, which
/// requires `k.r` to equal the design's residual degrees of freedom.
#[allow(clippy::too_many_arguments)]
pub fn estimate_coverage(
    design: &Design,
    spec: &SelectorSpec,
    k: &KConstant,
    beta: &DVector<f64>,
    sigma: f64,
    target: CoverageTarget,
    replications: usize,
    seed: u64,
) -> Result<CoverageEstimate> {
    let selector = Selector::new(spec.clone(), design)?;
    estimate_coverage_with(design, &selector, k, beta, sigma, target, replications, seed)
}

/// [`estimate_coverage`] with a prebuilt selector, for callers that sweep
/// many parameter points under one rule.
#[allow(clippy::too_many_arguments)]
pub fn estimate_coverage_with(
    design: &Design,
    selector: &Selector,
    k: &KConstant,
    beta: &DVector<f64>,
    sigma: f64,
    target: CoverageTarget,
    replications: usize,
    seed: u64,
) -> Result<CoverageEstimate> {
    let events = coverage_events(design, selector, k, beta, sigma, target, replications, seed)?;
    let covered: usize = events.iter().map(|&e| e as usize).sum();
    let rate = covered as f64 / replications as f64;
    Ok(CoverageEstimate {
        rate,
        se: binomial_se(rate, replications),
        replications,
        beta: beta.iter().copied().collect(),
        target,
    })
}

/// Random coefficient vectors whose mean vectors X beta are standard
/// Gaussian within the column space of the design: beta solves R beta = z
/// against the design's triangular factor, giving X beta = Q z.
pub fn draw_beta_candidates(
    design: &Design,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if count == 0 {
        return Err(Error::InvalidArgument("candidate count must be positive".into()));
    }
    let p = design.p();
    let r = design.r();
    let mut rng = substream(seed, 0);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let beta = r
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Design("triangular factor is singular".into()))?;
        out.push(beta);
    }
    Ok(out)
}

/// One stage of the search: evaluate `candidates` parameter vectors at
/// `replications` each, keep the worst for the next stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStage {
    pub candidates: usize,
    pub replications: usize,
}

/// Funnel plan for the minimal-coverage search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchPlan {
    pub stages: Vec<SearchStage>,
    pub seed: u64,
    /// Noise scale during the search. Coverage is scale equivariant, so 1
    /// loses nothing.
    pub sigma: f64,
}

impl SearchPlan {
    pub fn new(stages: Vec<SearchStage>, seed: u64) -> Result<Self> {
        let plan = SearchPlan {
            stages,
            seed,
            sigma: 1.0,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Full-scale funnel: 10000 candidates at 100 replications, the worst
    /// 1000 at 1000, the single worst at 500000.
    pub fn standard(seed: u64) -> Self {
        SearchPlan::new(
            vec![
                SearchStage { candidates: 10_000, replications: 100 },
                SearchStage { candidates: 1_000, replications: 1_000 },
                SearchStage { candidates: 1, replications: 500_000 },
            ],
            seed,
        )
        .expect("static plan is valid")
    }

    /// Reduced funnel for desk-scale runs.
    pub fn desk(seed: u64) -> Self {
        SearchPlan::new(
            vec![
                SearchStage { candidates: 1_000, replications: 100 },
                SearchStage { candidates: 100, replications: 1_000 },
                SearchStage { candidates: 1, replications: 100_000 },
            ],
            seed,
        )
        .expect("static plan is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("search plan has no stages".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive and finite, got {}",
                self.sigma
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.candidates == 0 || s.replications == 0 {
                return Err(Error::InvalidArgument(format!(
                    "stage {i} has zero candidates or replications"
                )));
            }
            if i > 0 {
                if s.candidates >= self.stages[i - 1].candidates {
                    return Err(Error::InvalidArgument(
                        "candidate counts must be strictly decreasing".into(),
                    ));
                }
                if s.replications <= self.stages[i - 1].replications {
                    return Err(Error::InvalidArgument(
                        "replication counts must be strictly increasing".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Result of one completed stage, as stored in checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct StageRecord {
    stage: usize,
    replications: usize,
    /// Global candidate indices evaluated, in evaluation order.
    indices: Vec<usize>,
    rates: Vec<f64>,
    ses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config_hash: u64,
    records: Vec<StageRecord>,
}

/// Digest of everything that determines search results; a checkpoint is
/// reused only when it matches.
fn config_hash(
    design: &Design,
    spec: &SelectorSpec,
    k: &KConstant,
    target: CoverageTarget,
    plan: &SearchPlan,
) -> u64 {
    let ident = format!(
        "{:x}|{}|{}|{:x}|{:x}|{}|{}|{}",
        design.fingerprint(),
        serde_json::to_string(spec).expect("spec serializes"),
        k.kind,
        k.value.to_bits(),
        k.alpha.to_bits(),
        k.r,
        target,
        serde_json::to_string(plan).expect("plan serializes"),
    );
    // FNV-1a, stable across builds so checkpoints survive recompilation.
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for b in ident.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Summary of one search stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub candidates: usize,
    pub replications: usize,
    pub worst_rate: f64,
    pub worst_index: usize,
}

/// Search result: the least-favorable parameter found and its
/// high-replication estimate. An approximate upper bound on the true
/// minimal coverage, not a certified minimum.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub beta_min: Vec<f64>,
    pub estimate: CoverageEstimate,
    pub stages: Vec<StageSummary>,
}

fn write_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(serde_json::to_string_pretty(cp).expect("serializable").as_bytes())?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_checkpoint(path: &Path, hash: u64) -> Vec<StageRecord> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    match serde_json::from_str::<Checkpoint>(&text) {
        Ok(cp) if cp.config_hash == hash => cp.records,
        // Stale or foreign checkpoints are ignored, not errors: the search
        // simply starts over.
        _ => Vec::new(),
    }
}

/// Rank candidates worst-first: ascending rate, index breaking ties.
fn ranked(record: &StageRecord) -> Vec<usize> {
    let mut order: Vec<usize> = (0..record.indices.len()).collect();
    order.sort_by(|&a, &b| {
        record.rates[a]
            .partial_cmp(&record.rates[b])
            .expect("rates are finite")
            .then(record.indices[a].cmp(&record.indices[b]))
    });
    order.into_iter().map(|i| record.indices[i]).collect()
}

/// Three-stage (in general, multi-stage) stochastic search for the
/// parameter with the lowest coverage: evaluate a pool of random
/// candidates cheaply, re-estimate the worst survivors at increasing
/// replication counts, and report the final survivor's estimate.
pub fn staged_min_search(
    design: &Design,
    spec: &SelectorSpec,
    k: &KConstant,
    target: CoverageTarget,
    plan: &SearchPlan,
    checkpoint: Option<&Path>,
) -> Result<SearchOutcome> {
    plan.validate()?;
    validate_k_dof(design, k.r)?;
    let pool = plan.stages[0].candidates;
    let betas = draw_beta_candidates(design, pool, derive_seed(plan.seed, 0xbe7a))?;
    let selector = Selector::new(spec.clone(), design)?;
    let hash = config_hash(design, spec, k, target, plan);

    let mut records: Vec<StageRecord> = checkpoint
        .map(|p| load_checkpoint(p, hash))
        .unwrap_or_default();

    let mut survivors: Vec<usize> = (0..pool).collect();
    let mut summaries = Vec::with_capacity(plan.stages.len());
    for (si, stage) in plan.stages.iter().enumerate() {
        survivors.truncate(stage.candidates);
        if survivors.len() < stage.candidates {
            return Err(Error::InvalidArgument(format!(
                "stage {si} wants {} candidates but only {} survive",
                stage.candidates,
                survivors.len()
            )));
        }

        let reusable = records.get(si).is_some_and(|rec| {
            rec.stage == si
                && rec.replications == stage.replications
                && rec.indices == survivors
                && rec.rates.len() == survivors.len()
                && rec.ses.len() == survivors.len()
                && rec.rates.iter().all(|r| r.is_finite())
        });
        if !reusable {
            records.truncate(si);
            let evals: Vec<(f64, f64)> = survivors
                .par_iter()
                .map(|&idx| -> Result<(f64, f64)> {
                    let est = estimate_coverage_with(
                        design,
                        &selector,
                        k,
                        &betas[idx],
                        plan.sigma,
                        target,
                        stage.replications,
                        derive_seed2(plan.seed, si as u64, idx as u64),
                    )?;
                    Ok((est.rate, est.se))
                })
                .collect::<Result<Vec<_>>>()?;
            records.push(StageRecord {
                stage: si,
                replications: stage.replications,
                indices: survivors.clone(),
                rates: evals.iter().map(|e| e.0).collect(),
                ses: evals.iter().map(|e| e.1).collect(),
            });
            if let Some(path) = checkpoint {
                write_checkpoint(
                    path,
                    &Checkpoint {
                        config_hash: hash,
                        records: records.clone(),
                    },
                )?;
            }
        }

        let rec = &records[si];
        let order = ranked(rec);
        let worst = order[0];
        let worst_pos = rec.indices.iter().position(|&i| i == worst).expect("ranked");
        summaries.push(StageSummary {
            stage: si,
            candidates: stage.candidates,
            replications: stage.replications,
            worst_rate: rec.rates[worst_pos],
            worst_index: worst,
        });
        survivors = order;
    }

    let last = records.last().expect("at least one stage");
    let order = ranked(last);
    let winner = order[0];
    let pos = last.indices.iter().position(|&i| i == winner).expect("ranked");
    Ok(SearchOutcome {
        beta_min: betas[winner].iter().copied().collect(),
        estimate: CoverageEstimate {
            rate: last.rates[pos],
            se: last.ses[pos],
            replications: last.replications,
            beta: betas[winner].iter().copied().collect(),
            target,
        },
        stages: summaries,
    })
}
