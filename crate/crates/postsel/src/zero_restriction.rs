//! Degenerate-interval construction over a two-model universe.
//!
//! The universe holds exactly two models: M0 without the protected column
//! and M1 with it. After selection the report is the usual t interval for
//! the protected coefficient when M1 was chosen, and the single point {0}
//! when M0 was chosen. The point interval always covers its own target
//! (the zero coefficient M0 imposes), so the construction is valid at
//! level 1 - alpha no matter how the winner was picked: the cover event
//! contains the event that the M1 interval covers, whose probability the
//! t distribution fixes, plus all of the event that M0 was chosen.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{k_naive, KConstant};
use crate::design::{Design, ModelId, SubmodelFit};
use crate::error::{Error, Result};
use crate::mc::CoverageEstimate;
use crate::rng::{derive_seed, substream, CHUNK};
use crate::selectors::{Selector, SelectorSpec};
use crate::special::Dof;
use crate::CoverageTarget;

/// The two admissible models: M0 omits the protected column, M1 contains
/// it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TwoModelUniverse {
    m0: ModelId,
    m1: ModelId,
    /// Position of the protected column inside M1's coefficient vector.
    pos: usize,
}

impl TwoModelUniverse {
    pub fn new(design: &Design, m0: ModelId, m1: ModelId) -> Result<Self> {
        let prot = design.protected();
        if m0.contains(prot) {
            return Err(Error::InvalidArgument(format!(
                "M0 = {m0} must omit the protected column {prot}"
            )));
        }
        let Some(pos) = m1.position(prot) else {
            return Err(Error::InvalidArgument(format!(
                "M1 = {m1} must contain the protected column {prot}"
            )));
        };
        design.factor(&m0)?;
        design.factor(&m1)?;
        Ok(TwoModelUniverse { m0, m1, pos })
    }

    pub fn m0(&self) -> &ModelId {
        &self.m0
    }

    pub fn m1(&self) -> &ModelId {
        &self.m1
    }

    /// Index of the protected coefficient within M1.
    pub fn protected_position(&self) -> usize {
        self.pos
    }
}

/// Post-selection report: a standard interval when the larger model won,
/// the single point {0} when the smaller one did.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ZeroRestrictedInterval {
    Standard { center: f64, halfwidth: f64 },
    PointZero,
}

impl ZeroRestrictedInterval {
    /// Whether the interval contains `v`. The point interval contains
    /// exactly zero.
    pub fn covers(&self, v: f64) -> bool {
        match self {
            ZeroRestrictedInterval::Standard { center, halfwidth } => {
                (v - center).abs() <= *halfwidth
            }
            ZeroRestrictedInterval::PointZero => v == 0.0,
        }
    }
}

/// Builds the reported interval from the M1 fit and the selected model.
pub fn zero_restriction_interval(
    universe: &TwoModelUniverse,
    fit1: &SubmodelFit,
    selected: &ModelId,
    k_n: &KConstant,
) -> Result<ZeroRestrictedInterval> {
    if fit1.model != universe.m1 {
        return Err(Error::InvalidArgument(format!(
            "fit is for {} but the universe's larger model is {}",
            fit1.model, universe.m1
        )));
    }
    if !(k_n.value > 0.0) || !k_n.value.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "interval constant must be positive and finite, got {}",
            k_n.value
        )));
    }
    if selected == &universe.m1 {
        Ok(ZeroRestrictedInterval::Standard {
            center: fit1.coef[universe.pos],
            halfwidth: k_n.value * fit1.sigma_hat_j[universe.pos],
        })
    } else if selected == &universe.m0 {
        Ok(ZeroRestrictedInterval::PointZero)
    } else {
        Err(Error::InvalidArgument(format!(
            "selected model {selected} is outside the universe {{{}, {}}}",
            universe.m0, universe.m1
        )))
    }
}

/// Estimates the probability that the reported interval covers the
/// selected model's own protected coefficient (zero under M0, the M1
/// projection coefficient under M1). The scale estimate comes from the
/// full-model residuals, so the naive constant uses n - p degrees of
/// freedom. Valid at level 1 - alpha for every selection rule on the
/// universe.
pub fn validate_zero_restriction(
    design: &Design,
    selector: &Selector,
    beta: &DVector<f64>,
    sigma: f64,
    alpha: f64,
    replications: usize,
    seed: u64,
) -> Result<CoverageEstimate> {
    let Some((m0, m1)) = selector.two_model() else {
        return Err(Error::InvalidArgument(
            "the validity check needs a selector bound to a two-model universe".into(),
        ));
    };
    if selector.design().fingerprint() != design.fingerprint() {
        return Err(Error::InvalidArgument(
            "selector was built for a different design".into(),
        ));
    }
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
    let rdof = design.residual_dof();
    if rdof == 0 {
        return Err(Error::InvalidArgument(
            "saturated design leaves no residual degrees of freedom".into(),
        ));
    }
    let k = k_naive(alpha, Dof::Finite(rdof as u32))?;
    let universe = TwoModelUniverse::new(design, m0.clone(), m1.clone())?;

    let mu = design.x() * beta;
    let full_factor = design.factor(&design.full_model())?;
    let f1 = design.factor(&universe.m1)?;
    let target1 = f1.coef(&mu)[universe.pos];
    let sel_seed = derive_seed(seed, 0x5e1);
    let n_chunks = replications.div_ceil(CHUNK);

    let covered: usize = (0..n_chunks)
        .into_par_iter()
        .map(|ci| -> Result<usize> {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(replications);
            let mut rng = substream(seed, ci as u64);
            let mut y = DVector::<f64>::zeros(n);
            let mut count = 0usize;
            for gi in lo..hi {
                for i in 0..n {
                    y[i] = mu[i] + sigma * rng.sample::<f64, _>(StandardNormal);
                }
                let sigma_hat = (full_factor.rss(&y) / rdof as f64).sqrt();
                let m = selector.select(&y, sigma_hat, derive_seed(sel_seed, gi as u64))?;
                let fit1 = f1.fit(&y, sigma_hat);
                let interval = zero_restriction_interval(&universe, &fit1, &m, &k)?;
                let target = if &m == universe.m1() { target1 } else { 0.0 };
                count += usize::from(interval.covers(target));
            }
            Ok(count)
        })
        .sum::<Result<usize>>()?;

    let rate = covered as f64 / replications as f64;
    Ok(CoverageEstimate {
        rate,
        se: (rate * (1.0 - rate) / replications as f64).sqrt(),
        replications,
        beta: beta.iter().copied().collect(),
        target: CoverageTarget::SelectedModel,
    })
}

/// A battery of seeded data-dependent selection rules, each thresholding
/// |v'y| for its own random unit vector v and its own random cutoff.
pub fn seeded_threshold_rules(count: usize, master_seed: u64) -> Vec<SelectorSpec> {
    let mut rng = substream(derive_seed(master_seed, 0x7a0), 0);
    (0..count)
        .map(|i| SelectorSpec::ThresholdRule {
            v_seed: derive_seed(master_seed, i as u64),
            threshold: 2.0 * rng.sample::<f64, _>(StandardNormal).abs(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{equicorrelated_design, fit_submodel};
    use crate::special::t_cdf;

    fn setup() -> (Design, TwoModelUniverse) {
        let design = equicorrelated_design(3, 0.4, 15, 0).unwrap();
        let m0 = ModelId::new(vec![1, 2]).unwrap();
        let m1 = ModelId::new(vec![0, 2]).unwrap();
        let uni = TwoModelUniverse::new(&design, m0, m1).unwrap();
        (design, uni)
    }

    #[test]
    fn universe_checks_the_protected_column() {
        let design = equicorrelated_design(3, 0.4, 15, 0).unwrap();
        let with = ModelId::new(vec![0, 1]).unwrap();
        let without = ModelId::new(vec![2]).unwrap();
        assert!(TwoModelUniverse::new(&design, without.clone(), with.clone()).is_ok());
        assert!(TwoModelUniverse::new(&design, with.clone(), with.clone()).is_err());
        assert!(TwoModelUniverse::new(&design, without.clone(), without).is_err());
        let uni = TwoModelUniverse::new(&design, ModelId::new(vec![1]).unwrap(), with).unwrap();
        assert_eq!(uni.protected_position(), 0);
    }

    #[test]
    fn interval_follows_the_selected_model() {
        let (design, uni) = setup();
        let mut rng = substream(4, 0);
        let y = DVector::from_fn(design.n(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let sigma_hat = 1.7;
        let fit1 = fit_submodel(&design, &y, uni.m1(), sigma_hat).unwrap();
        let k = k_naive(0.05, Dof::Finite(12)).unwrap();

        let iv = zero_restriction_interval(&uni, &fit1, uni.m1(), &k).unwrap();
        let ZeroRestrictedInterval::Standard { center, halfwidth } = iv else {
            panic!("larger model selected, interval should be standard");
        };
        assert_eq!(center, fit1.coef[0]);
        assert_eq!(halfwidth, k.value * fit1.sigma_hat_j[0]);
        assert!(iv.covers(center));
        assert!(iv.covers(center + halfwidth));
        assert!(!iv.covers(center + 1.0001 * halfwidth));

        let iv = zero_restriction_interval(&uni, &fit1, uni.m0(), &k).unwrap();
        assert_eq!(iv, ZeroRestrictedInterval::PointZero);
        assert!(iv.covers(0.0));
        assert!(!iv.covers(1e-300));
        assert!(!iv.covers(-1e-12));

        // Outside the universe, or a fit of the wrong model.
        let stray = ModelId::new(vec![0, 1, 2]).unwrap();
        assert!(zero_restriction_interval(&uni, &fit1, &stray, &k).is_err());
        let fit0 = fit_submodel(&design, &y, uni.m0(), sigma_hat).unwrap();
        assert!(zero_restriction_interval(&uni, &fit0, uni.m1(), &k).is_err());
    }

    #[test]
    fn constant_selectors_hit_the_boundary_cases() {
        let (design, uni) = setup();
        let beta = DVector::from_vec(vec![0.4, -1.0, 0.8]);

        let always0 = Selector::new_two_model(
            SelectorSpec::FixedModel { model: uni.m0().clone() },
            &design,
            uni.m0().clone(),
            uni.m1().clone(),
        )
        .unwrap();
        let est =
            validate_zero_restriction(&design, &always0, &beta, 1.2, 0.05, 5_000, 11).unwrap();
        assert_eq!(est.rate, 1.0);

        let always1 = Selector::new_two_model(
            SelectorSpec::FixedModel { model: uni.m1().clone() },
            &design,
            uni.m0().clone(),
            uni.m1().clone(),
        )
        .unwrap();
        let est =
            validate_zero_restriction(&design, &always1, &beta, 1.2, 0.05, 120_000, 11).unwrap();
        assert!(
            (est.rate - 0.95).abs() <= 3.0 * est.se,
            "rate {} se {}",
            est.rate,
            est.se
        );
    }

    #[test]
    fn data_dependent_rules_stay_valid() {
        let (design, uni) = setup();
        // The t-test rule keeps M1 when the protected t statistic clears 3.
        let ttest = Selector::new_two_model(
            SelectorSpec::NestedTTest { c_threshold: 3.0 },
            &design,
            uni.m0().clone(),
            uni.m1().clone(),
        )
        .unwrap();
        let mut rng = substream(21, 0);
        for point in 0..4 {
            let beta = DVector::from_fn(3, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
            let sigma = 0.5 * (point + 1) as f64;
            let est = validate_zero_restriction(
                &design, &ttest, &beta, sigma, 0.05, 40_000, point as u64,
            )
            .unwrap();
            assert!(
                est.rate >= 0.95 - 3.0 * est.se,
                "point {point}: rate {} se {}",
                est.rate,
                est.se
            );
        }
    }

    #[test]
    fn seeded_rule_battery_stays_valid() {
        let (design, uni) = setup();
        let rules = seeded_threshold_rules(5, 99);
        assert_eq!(rules.len(), 5);
        let distinct: std::collections::HashSet<String> =
            rules.iter().map(|r| r.name()).collect();
        assert_eq!(distinct.len(), 5);
        let beta = DVector::from_vec(vec![1.0, 0.3, -0.6]);
        for (i, rule) in rules.iter().enumerate() {
            let sel = Selector::new_two_model(
                rule.clone(),
                &design,
                uni.m0().clone(),
                uni.m1().clone(),
            )
            .unwrap();
            let est =
                validate_zero_restriction(&design, &sel, &beta, 0.9, 0.05, 30_000, i as u64)
                    .unwrap();
            assert!(
                est.rate >= 0.95 - 3.0 * est.se,
                "rule {i}: rate {} se {}",
                est.rate,
                est.se
            );
        }
    }

    #[test]
    fn cover_event_decomposes_exactly() {
        // Per replication the cover indicator equals: the M1 interval
        // covers the M1 coefficient, OR the selected model is not M1.
        let (design, uni) = setup();
        let sel = Selector::new_two_model(
            SelectorSpec::ThresholdRule { v_seed: 3, threshold: 0.9 },
            &design,
            uni.m0().clone(),
            uni.m1().clone(),
        )
        .unwrap();
        let beta = DVector::from_vec(vec![0.7, -0.2, 0.4]);
        let sigma = 1.1;
        let mu = design.x() * &beta;
        let f1 = design.factor(uni.m1()).unwrap();
        let full = design.factor(&design.full_model()).unwrap();
        let rdof = design.residual_dof() as f64;
        let target1 = f1.coef(&mu)[uni.protected_position()];
        let k = k_naive(0.05, Dof::Finite(design.residual_dof() as u32)).unwrap();
        let mut rng = substream(8, 0);
        let mut saw_both = [false, false];
        for _ in 0..500 {
            let y = mu.map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal));
            let sigma_hat = (full.rss(&y) / rdof).sqrt();
            let m = sel.select(&y, sigma_hat, 0).unwrap();
            let fit1 = f1.fit(&y, sigma_hat);
            let interval = zero_restriction_interval(&uni, &fit1, &m, &k).unwrap();
            let covers = interval.covers(if &m == uni.m1() { target1 } else { 0.0 });
            let m1_interval = ZeroRestrictedInterval::Standard {
                center: fit1.coef[uni.protected_position()],
                halfwidth: k.value * fit1.sigma_hat_j[uni.protected_position()],
            };
            let rhs = m1_interval.covers(target1) || &m != uni.m1();
            assert_eq!(covers, rhs);
            saw_both[usize::from(&m == uni.m1())] = true;
        }
        assert_eq!(saw_both, [true, true], "rule never exercised one branch");
    }

    #[test]
    fn naive_constant_matches_the_t_distribution() {
        let k = k_naive(0.05, Dof::Finite(12)).unwrap();
        let mass = 2.0 * t_cdf(k.value, Dof::Finite(12)) - 1.0;
        assert!((mass - 0.95).abs() < 1e-12);
    }
}
