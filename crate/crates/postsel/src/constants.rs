//! Interval half-width constants, from the naive quantile up to the
//! simultaneous-over-a-universe constant.
//!
//! The simultaneous constants are quantiles of
//!
//! ```text
//! max over (j, M) of |t_{j,M}|,   t_{j,M} = (coef_jM - target_jM) / stderr_jM
//! ```
//!
//! with the max running over every coefficient of every model in the
//! universe. Each |t| equals |d' z| / t for a unit vector d depending only
//! on the design (z standard normal in the column space, t the shared
//! variance ratio), so the quantile is estimated by Monte Carlo on the
//! reduced p-dimensional problem. Draws are generated in fixed chunks with
//! one counter-seeded stream per chunk: results are bitwise reproducible
//! for a given seed no matter how many threads run the chunks, and two
//! universes sampled under the same seed share their (z, t) sequence
//! exactly, which makes the constants comparable draw for draw.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};
use rayon::prelude::*;

use crate::design::{all_subsets_universe, Design, ModelId};
use crate::error::{Error, Result};
use crate::rng::{substream, CHUNK};
use crate::special::{chi2_quantile, f_quantile, t_quantile, Dof};

/// Hard cap on the number of directions a universe may induce.
pub const DIRECTION_BUDGET: u128 = 1 << 20;

/// Default Monte Carlo sample size for the simultaneous constants.
pub const DEFAULT_DRAWS: usize = 200_000;

/// Which construction produced a constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KKind {
    Naive,
    Scheffe,
    Posi1,
    Posi,
    PosiAllSubsets,
    OptimalNested,
}

impl std::fmt::Display for KKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            KKind::Naive => "naive",
            KKind::Scheffe => "scheffe",
            KKind::Posi1 => "posi1",
            KKind::Posi => "posi",
            KKind::PosiAllSubsets => "posi-all-subsets",
            KKind::OptimalNested => "optimal-nested",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for KKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "naive" => KKind::Naive,
            "scheffe" => KKind::Scheffe,
            "posi1" => KKind::Posi1,
            "posi" => KKind::Posi,
            "posi-all-subsets" => KKind::PosiAllSubsets,
            "optimal-nested" => KKind::OptimalNested,
            other => {
                return Err(Error::Parse(format!(
                    "unknown constant kind '{other}' (expected naive, scheffe, posi1, \
                     posi, posi-all-subsets, or optimal-nested)"
                )))
            }
        })
    }
}

/// An interval half-width constant together with how it was obtained.
/// `mc_se` is zero for the closed-form kinds.
#[derive(Clone, Copy, Debug)]
pub struct KConstant {
    pub kind: KKind,
    pub value: f64,
    pub alpha: f64,
    pub r: Dof,
    pub mc_se: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Two-sided t (or normal) quantile: the constant that is only valid when
/// the model was fixed in advance.
pub fn k_naive(alpha: f64, r: Dof) -> Result<KConstant> {
    check_alpha(alpha)?;
    Ok(KConstant {
        kind: KKind::Naive,
        value: t_quantile(1.0 - alpha / 2.0, r)?,
        alpha,
        r,
        mc_se: 0.0,
    })
}

/// Projection-bound constant for an `s`-dimensional column space:
/// sqrt of the chi-square quantile (known variance) or of s times the
/// F quantile (estimated variance). Valid for any selector but the most
/// conservative constant here.
pub fn k_scheffe(alpha: f64, s: u32, r: Dof) -> Result<KConstant> {
    check_alpha(alpha)?;
    if s == 0 {
        return Err(Error::InvalidArgument(
            "column-space dimension must be at least 1".into(),
        ));
    }
    let value = match r {
        Dof::Infinite => chi2_quantile(1.0 - alpha, s)?.sqrt(),
        Dof::Finite(r_dof) => (f64::from(s) * f_quantile(1.0 - alpha, s, r_dof)?).sqrt(),
    };
    Ok(KConstant {
        kind: KKind::Scheffe,
        value,
        alpha,
        r,
        mc_se: 0.0,
    })
}

/// Which coefficients of each model contribute directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordScope {
    /// Every coefficient of every model.
    All,
    /// Only the protected coordinate, in models that contain it.
    ProtectedOnly,
}

/// The unit vectors d with max |t| = max |d'z| / t over a universe.
pub struct DirectionFamily {
    dim: usize,
    dirs: Vec<DVector<f64>>,
}

impl DirectionFamily {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn directions(&self) -> &[DVector<f64>] {
        &self.dirs
    }
}

/// Builds the direction family of a universe, deduplicated up to sign.
///
/// For coefficient j of model M the direction is Q_B w / |w| where
/// B = Q' X_M = Q_B R_B and R_B' w = e_j: the vector satisfying
/// t_{j,M} = d'(Q'eps) / (|w| ... ) after standardization. Directions whose
/// coordinates agree within 1e-12 after sign canonicalization are merged;
/// the first occurrence in universe order is kept.
pub fn direction_family(
    design: &Design,
    models: &[ModelId],
    scope: CoordScope,
) -> Result<DirectionFamily> {
    if models.is_empty() {
        return Err(Error::InvalidArgument(
            "direction family needs at least one model".into(),
        ));
    }
    let mut count: u128 = 0;
    for m in models {
        if m.is_empty() {
            return Err(Error::InvalidArgument(
                "universe contains an empty model".into(),
            ));
        }
        count += match scope {
            CoordScope::All => m.len() as u128,
            CoordScope::ProtectedOnly => 1,
        };
    }
    if count > DIRECTION_BUDGET {
        return Err(Error::Budget(format!(
            "universe induces {count} directions, budget is {DIRECTION_BUDGET}"
        )));
    }

    let p = design.p();
    let mut dirs: Vec<DVector<f64>> = Vec::with_capacity(count as usize);
    for m in models {
        let xm = design.columns(m)?;
        let b = design.q().transpose() * xm;
        let qr = b.qr();
        let qb = qr.q();
        let rb = qr.r();
        let min_diag = (0..m.len()).map(|i| rb[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        let max_diag = (0..m.len()).map(|i| rb[(i, i)].abs()).fold(0.0, f64::max);
        if min_diag <= 1e-10 * max_diag {
            return Err(Error::Design(format!(
                "submodel {m} is numerically rank deficient"
            )));
        }
        let positions: Vec<usize> = match scope {
            CoordScope::All => (0..m.len()).collect(),
            CoordScope::ProtectedOnly => {
                let pos = m.position(design.protected()).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "model {m} omits the protected column {}",
                        design.protected()
                    ))
                })?;
                vec![pos]
            }
        };
        for j in positions {
            let mut e = DVector::zeros(m.len());
            e[j] = 1.0;
            let w = rb
                .transpose()
                .solve_lower_triangular(&e)
                .ok_or_else(|| Error::Design(format!("triangular solve failed for {m}")))?;
            let mut d = &qb * &w;
            let norm = d.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Design(format!("degenerate direction in {m}")));
            }
            d /= norm;
            // Canonical sign: largest-magnitude coordinate positive.
            if d[d.iamax()] < 0.0 {
                d = -d;
            }
            dirs.push(d);
        }
    }

    let dirs = dedup_directions(dirs);
    Ok(DirectionFamily { dim: p, dirs })
}

/// Drops later directions within 1e-12 (sup norm) of an earlier one.
/// Sorting by first coordinate keeps this near-linear; candidates compare
/// only against neighbors whose first coordinates are within tolerance.
fn dedup_directions(dirs: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    const TOL: f64 = 1e-12;
    let n = dirs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dirs[a][0].partial_cmp(&dirs[b][0]).unwrap());
    let mut keep = vec![true; n];
    for i in 0..n {
        let a = order[i];
        if !keep[a] {
            continue;
        }
        for &b in order.iter().skip(i + 1) {
            if dirs[b][0] - dirs[a][0] > 2.0 * TOL {
                break;
            }
            if !keep[b] {
                continue;
            }
            let close = dirs[a]
                .iter()
                .zip(dirs[b].iter())
                .all(|(x, y)| (x - y).abs() <= TOL);
            if close {
                // Keep whichever came first in universe order.
                if b < a {
                    keep[a] = false;
                    break;
                }
                keep[b] = false;
            }
        }
    }
    dirs.into_iter()
        .enumerate()
        .filter_map(|(i, d)| if keep[i] { Some(d) } else { None })
        .collect()
}

/// Monte Carlo draws of max |d'z| / t over the family. Chunked and
/// counter-seeded: draw i always sees the same (z, t) pair for a given
/// seed, independent of thread count and of the family itself.
pub fn max_t_draws(family: &DirectionFamily, r: Dof, draws: usize, seed: u64) -> Result<Vec<f64>> {
    if family.is_empty() {
        return Err(Error::InvalidArgument("empty direction family".into()));
    }
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be positive".into()));
    }
    r.validate()?;
    let d = family.len();
    let p = family.dim;
    let dmat = DMatrix::from_fn(d, p, |i, j| family.dirs[i][j]);
    let chi2 = match r {
        Dof::Finite(r_dof) => Some(
            ChiSquared::new(f64::from(r_dof))
                .map_err(|e| Error::InvalidArgument(format!("bad variance dof: {e}")))?,
        ),
        Dof::Infinite => None,
    };

    let mut out = vec![0.0_f64; draws];
    out.par_chunks_mut(CHUNK)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let mut rng = substream(seed, ci as u64);
            let mut z = DVector::<f64>::zeros(p);
            let mut tz = DVector::<f64>::zeros(d);
            for slot in chunk.iter_mut() {
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                tz.gemv(1.0, &dmat, &z, 0.0);
                let mut m = tz.amax();
                if let (Some(dist), Dof::Finite(r_dof)) = (&chi2, r) {
                    let c: f64 = rng.sample(dist);
                    m /= (c / f64::from(r_dof)).sqrt();
                }
                *slot = m;
            }
        });
    Ok(out)
}

/// Upper empirical quantile by order statistic, with a half-spread
/// standard error read off the order statistics one binomial standard
/// deviation to each side. Sorts in place.
pub fn empirical_upper_quantile(sample: &mut [f64], alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    let n = sample.len();
    if (n as f64) * alpha < 10.0 || n < 100 {
        return Err(Error::InvalidArgument(format!(
            "{n} draws are too few to estimate the {:.4} upper quantile",
            1.0 - alpha
        )));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite draw in quantile input".into()));
    }
    sample.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let nn = n as f64;
    let target = nn * (1.0 - alpha);
    let rank = (target.ceil().max(1.0) as usize).min(n);
    let spread = (nn * alpha * (1.0 - alpha)).sqrt();
    let lo_rank = ((target - spread).ceil().max(1.0) as usize).min(n);
    let hi_rank = ((target + spread).ceil().max(1.0) as usize).min(n);
    let se = 0.5 * (sample[hi_rank - 1] - sample[lo_rank - 1]);
    Ok((sample[rank - 1], se))
}

fn k_from_universe(
    kind: KKind,
    design: &Design,
    models: &[ModelId],
    scope: CoordScope,
    alpha: f64,
    r: Dof,
    draws: usize,
    seed: u64,
) -> Result<KConstant> {
    check_alpha(alpha)?;
    let family = direction_family(design, models, scope)?;
    let mut sample = max_t_draws(&family, r, draws, seed)?;
    let (value, mc_se) = empirical_upper_quantile(&mut sample, alpha)?;
    Ok(KConstant {
        kind,
        value,
        alpha,
        r,
        mc_se,
    })
}

/// Simultaneous constant over every coefficient of every model in the
/// universe: valid for the selected-model target under any selector that
/// picks models from this universe.
pub fn k_posi(
    design: &Design,
    models: &[ModelId],
    alpha: f64,
    r: Dof,
    draws: usize,
    seed: u64,
) -> Result<KConstant> {
    k_from_universe(KKind::Posi, design, models, CoordScope::All, alpha, r, draws, seed)
}

/// Like [`k_posi`] but only the protected coordinate contributes, so the
/// guarantee is for intervals on that single coordinate. Never larger than
/// the all-coordinates constant on the same universe and seed.
pub fn k_posi1(
    design: &Design,
    models: &[ModelId],
    alpha: f64,
    r: Dof,
    draws: usize,
    seed: u64,
) -> Result<KConstant> {
    k_from_universe(
        KKind::Posi1,
        design,
        models,
        CoordScope::ProtectedOnly,
        alpha,
        r,
        draws,
        seed,
    )
}

/// Simultaneous constant over all nonempty submodels, coordinates included.
/// The direction count p * 2^(p-1) is checked against the budget before
/// anything is enumerated.
pub fn k_posi_all_subsets(
    design: &Design,
    alpha: f64,
    r: Dof,
    draws: usize,
    seed: u64,
) -> Result<KConstant> {
    let p = design.p();
    if p >= 64 {
        return Err(Error::Budget(format!("p = {p} is far beyond the budget")));
    }
    let count = (p as u128) << (p - 1);
    if count > DIRECTION_BUDGET {
        return Err(Error::Budget(format!(
            "all subsets of p = {p} columns induce {count} directions, budget is {DIRECTION_BUDGET}"
        )));
    }
    let models = all_subsets_universe(p)?;
    k_from_universe(
        KKind::PosiAllSubsets,
        design,
        &models,
        CoordScope::All,
        alpha,
        r,
        draws,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design_from_gram, coordinate1_universe, exchangeable_design};
    use approx::assert_abs_diff_eq;

    const KN: f64 = 1.959963984540054;

    #[test]
    fn naive_constant_is_the_t_quantile() {
        assert_abs_diff_eq!(
            k_naive(0.05, Dof::Infinite).unwrap().value,
            KN,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            k_naive(0.05, Dof::Finite(20)).unwrap().value,
            2.0859634472658364,
            epsilon = 1e-10
        );
        assert!(k_naive(0.0, Dof::Infinite).is_err());
        assert!(k_naive(1.0, Dof::Infinite).is_err());
    }

    #[test]
    fn scheffe_matches_frozen_quantiles_and_collapses_at_s_one() {
        assert_abs_diff_eq!(
            k_scheffe(0.05, 2, Dof::Infinite).unwrap().value,
            2.447746830680816,
            epsilon = 1e-10
        );
        // sqrt(10 * F_{10,20}(0.95))
        assert_abs_diff_eq!(
            k_scheffe(0.05, 10, Dof::Finite(20)).unwrap().value,
            (10.0 * 2.3478775669983114f64).sqrt(),
            epsilon = 1e-9
        );
        for &r in &[Dof::Infinite, Dof::Finite(7)] {
            assert_abs_diff_eq!(
                k_scheffe(0.05, 1, r).unwrap().value,
                k_naive(0.05, r).unwrap().value,
                epsilon = 1e-9
            );
        }
    }

    fn orthogonal_design(p: usize) -> Design {
        exchangeable_design(p, 0.0, p + 30, 0).unwrap()
    }

    #[test]
    fn family_on_orthogonal_design_is_the_coordinate_axes() {
        let design = orthogonal_design(3);
        let models = coordinate1_universe(3, 0).unwrap();
        let fam = direction_family(&design, &models, CoordScope::All).unwrap();
        // Coordinates of any submodel of an orthogonal design project onto
        // the same axes, so only p distinct directions survive dedup.
        assert_eq!(fam.len(), 3);
        for d in fam.directions() {
            let mut sorted: Vec<f64> = d.iter().map(|v| v.abs()).collect();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_abs_diff_eq!(sorted[2], 1.0, epsilon = 1e-10);
            assert!(sorted[1] < 1e-10);
        }
        let one = direction_family(&design, &models, CoordScope::ProtectedOnly).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn duplicate_models_do_not_change_the_family_or_the_draws() {
        let design = exchangeable_design(4, 0.3, 30, 0).unwrap();
        let models = coordinate1_universe(4, 0).unwrap();
        let mut doubled = models.clone();
        doubled.extend(models.iter().cloned());
        let fam = direction_family(&design, &models, CoordScope::All).unwrap();
        let fam2 = direction_family(&design, &doubled, CoordScope::All).unwrap();
        assert_eq!(fam.len(), fam2.len());
        let a = max_t_draws(&fam, Dof::Infinite, 4096, 7).unwrap();
        let b = max_t_draws(&fam2, Dof::Infinite, 4096, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_direction_reproduces_the_naive_constant() {
        let design = orthogonal_design(2);
        let models = vec![ModelId::new(vec![0]).unwrap()];
        let k = k_posi(&design, &models, 0.05, Dof::Infinite, 400_000, 11).unwrap();
        assert!(k.mc_se < 0.01);
        assert_abs_diff_eq!(k.value, KN, epsilon = 3.0 * k.mc_se.max(1e-3));
        // Estimated variance: the same family must give the t quantile.
        let k = k_posi(&design, &models, 0.05, Dof::Finite(20), 400_000, 11).unwrap();
        assert_abs_diff_eq!(
            k.value,
            2.0859634472658364,
            epsilon = 3.0 * k.mc_se.max(1e-3)
        );
    }

    #[test]
    fn two_orthogonal_directions_match_the_bonferroni_like_exact_value() {
        // max(|Z1|, |Z2|) quantile: Phi-inverse at (1 + sqrt(0.95)) / 2.
        let design = orthogonal_design(2);
        let models = vec![ModelId::full(2)];
        let k = k_posi(&design, &models, 0.05, Dof::Infinite, 400_000, 3).unwrap();
        assert_abs_diff_eq!(k.value, 2.2364766445577923, epsilon = 3.0 * k.mc_se.max(1e-3));
    }

    #[test]
    fn correlated_two_column_universe_matches_the_frozen_constant() {
        let gram = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let design = build_design_from_gram(&gram, 30, 0).unwrap();
        let models = coordinate1_universe(2, 0).unwrap();
        let k = k_posi(&design, &models, 0.05, Dof::Infinite, 400_000, 2).unwrap();
        assert!(k.mc_se < 0.012, "mc se too large: {}", k.mc_se);
        assert_abs_diff_eq!(k.value, 2.3015133735399504, epsilon = 3.5 * k.mc_se);
    }

    #[test]
    fn constants_are_ordered_on_a_shared_seed() {
        let design = exchangeable_design(5, 0.5, 40, 0).unwrap();
        let models = coordinate1_universe(5, 0).unwrap();
        for &r in &[Dof::Infinite, Dof::Finite(35)] {
            let seed = 99;
            let draws = 60_000;
            let k1 = k_posi1(&design, &models, 0.05, r, draws, seed).unwrap();
            let kp = k_posi(&design, &models, 0.05, r, draws, seed).unwrap();
            let ka = k_posi_all_subsets(&design, 0.05, r, draws, seed).unwrap();
            let ks = k_scheffe(0.05, 5, r).unwrap();
            let kn = k_naive(0.05, r).unwrap();
            // Same (z, t) sequence and nested direction families: the
            // orderings hold draw by draw, hence exactly for the quantiles.
            assert!(kn.value <= k1.value);
            assert!(k1.value <= kp.value);
            assert!(kp.value <= ka.value);
            assert!(ka.value <= ks.value + 3.0 * ka.mc_se);
        }
    }

    #[test]
    fn draws_are_reproducible_and_chunk_aligned() {
        let design = exchangeable_design(3, 0.4, 20, 0).unwrap();
        let models = coordinate1_universe(3, 0).unwrap();
        let fam = direction_family(&design, &models, CoordScope::All).unwrap();
        let a = max_t_draws(&fam, Dof::Finite(17), 10_000, 5).unwrap();
        let b = max_t_draws(&fam, Dof::Finite(17), 10_000, 5).unwrap();
        assert_eq!(a, b);
        // A prefix extension leaves earlier chunks untouched.
        let c = max_t_draws(&fam, Dof::Finite(17), 4096, 5).unwrap();
        assert_eq!(&a[..4096], &c[..]);
        let d = max_t_draws(&fam, Dof::Finite(17), 10_000, 6).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn column_rescaling_leaves_the_constant_alone() {
        let base = exchangeable_design(3, 0.4, 25, 0).unwrap();
        let mut x = base.x().clone();
        for i in 0..x.nrows() {
            x[(i, 1)] *= 3.75;
        }
        let scaled = Design::from_matrix(x, 0).unwrap();
        let models = coordinate1_universe(3, 0).unwrap();
        let ka = k_posi(&base, &models, 0.1, Dof::Infinite, 50_000, 21).unwrap();
        let kb = k_posi(&scaled, &models, 0.1, Dof::Infinite, 50_000, 21).unwrap();
        // t-statistics are invariant to column scale, so the directions and
        // hence every draw agree to rounding.
        assert_abs_diff_eq!(ka.value, kb.value, epsilon = 1e-9);
    }

    #[test]
    fn budget_violations_are_rejected_before_any_work() {
        let design = exchangeable_design(2, 0.0, 25, 0).unwrap();
        let err = k_posi_all_subsets(&design, 0.05, Dof::Infinite, 50, 1);
        assert!(err.is_err()); // too few draws for a quantile
        let design21 = exchangeable_design(21, 0.0, 40, 0).unwrap();
        match k_posi_all_subsets(&design21, 0.05, Dof::Infinite, 200_000, 1) {
            Err(Error::Budget(_)) => {}
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn quantile_and_spread_on_a_known_sample() {
        // 0, 1, ..., 999: the 95th percentile order statistic is 950 and
        // the one-sigma ranks straddle it by ~6.9.
        let mut v: Vec<f64> = (0..1000).map(f64::from).collect();
        let (q, se) = empirical_upper_quantile(&mut v, 0.05).unwrap();
        assert_abs_diff_eq!(q, 949.0, epsilon = 1e-12);
        assert!(se > 5.0 && se < 9.0, "se = {se}");
        let mut tiny = vec![1.0; 50];
        assert!(empirical_upper_quantile(&mut tiny, 0.05).is_err());
    }
}
