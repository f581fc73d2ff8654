//! Exact coverage for the two nested model problem.
//!
//! Setting: two columns, the second kept only when its |t|-statistic
//! exceeds `c_threshold`, and an interval `estimate +- K * stderr` reported
//! for the first coefficient of whichever model was kept. Conditional on
//! t = sigma-hat/sigma the coverage of the selected-model target is
//!
//! ```text
//! delta(0, tK) delta(zeta, tC)
//!   + Int_{-tK}^{tK} [1 - delta((zeta + rho z)/sqrt(1-rho^2),
//!                               tC/sqrt(1-rho^2))] phi(z) dz
//! ```
//!
//! and the full-model target adds
//! `[delta(rho zeta/sqrt(1-rho^2), tK) - delta(0, tK)] delta(zeta, tC)`,
//! a correction that is zero iff rho*zeta = 0 and negative otherwise.
//! For finite variance dof the expectation over t is a second quadrature
//! against the chi-square density. Both probabilities are even in zeta for
//! fixed rho and invariant under the joint flip (rho, zeta) -> (-rho, -zeta):
//! delta is even in its first argument and the z-integral runs over a
//! symmetric interval, so substituting z -> -z absorbs either sign change.

use crate::constants::{k_scheffe, KConstant, KKind};
use crate::design::NestedScenario;
use crate::error::{Error, Result};
use crate::quadrature::{gl_rule, GlRule};
use crate::special::{chi2_pdf, chi2_quantile, norm_cdf, phi, Dof};
use crate::CoverageTarget;

/// A probability with a quadrature error bound from order doubling.
#[derive(Clone, Copy, Debug)]
pub struct CoverageValue {
    pub value: f64,
    pub abs_err: f64,
}

/// Probability that a N(x, 1) variable lands within `halfwidth` of zero.
#[inline]
pub fn delta(x: f64, halfwidth: f64) -> f64 {
    norm_cdf(x + halfwidth) - norm_cdf(x - halfwidth)
}

const INNER_NODES: usize = 201;
const OUTER_NODES: usize = 200;
/// Mass left outside the truncated chi-square integration range.
const OUTER_TAIL: f64 = 1e-12;

/// Inner-integral evaluator for fixed (rho, c, k, t); reusable across zeta.
struct TKernel {
    rho: f64,
    sr: f64,
    tk: f64,
    tc: f64,
    cs: f64,
    delta0_tk: f64,
    /// Quadrature nodes on [-tk, tk] with weights premultiplied by phi.
    zs: Vec<f64>,
    wphi: Vec<f64>,
}

impl TKernel {
    fn new(rho: f64, c: f64, k: f64, t: f64, rule: &GlRule) -> Self {
        let sr = (1.0 - rho * rho).sqrt();
        let tk = t * k;
        let tc = t * c;
        let half = tk;
        let m = rule.nodes.len();
        let mut zs = Vec::with_capacity(m);
        let mut wphi = Vec::with_capacity(m);
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            let z = half * x;
            zs.push(z);
            wphi.push(w * half * phi(z));
        }
        TKernel {
            rho,
            sr,
            tk,
            tc,
            cs: tc / sr,
            delta0_tk: delta(0.0, tk),
            zs,
            wphi,
        }
    }

    fn selected(&self, zeta: f64) -> f64 {
        let mut integral = 0.0;
        for (z, w) in self.zs.iter().zip(&self.wphi) {
            integral += w * (1.0 - delta((zeta + self.rho * z) / self.sr, self.cs));
        }
        self.delta0_tk * delta(zeta, self.tc) + integral
    }

    fn full(&self, zeta: f64) -> f64 {
        let correction =
            (delta(self.rho * zeta / self.sr, self.tk) - self.delta0_tk) * delta(zeta, self.tc);
        self.selected(zeta) + correction
    }

    fn eval(&self, zeta: f64, target: CoverageTarget) -> f64 {
        match target {
            CoverageTarget::SelectedModel => self.selected(zeta),
            CoverageTarget::FullParameter => self.full(zeta),
        }
    }
}

/// Weighted kernels over the variance-ratio distribution; a single kernel at
/// t = 1 when the variance is known.
struct Evaluator {
    kernels: Vec<(f64, TKernel)>,
}

impl Evaluator {
    fn new(rho: f64, c: f64, k: f64, r: Dof, inner: usize, outer: usize) -> Result<Self> {
        let inner_rule = gl_rule(inner);
        let kernels = match r {
            Dof::Infinite => vec![(1.0, TKernel::new(rho, c, k, 1.0, &inner_rule))],
            Dof::Finite(r_dof) => {
                let lo = chi2_quantile(OUTER_TAIL / 2.0, r_dof)?;
                let hi = chi2_quantile(1.0 - OUTER_TAIL / 2.0, r_dof)?;
                let outer_rule = gl_rule(outer);
                let half = 0.5 * (hi - lo);
                let mid = 0.5 * (hi + lo);
                outer_rule
                    .nodes
                    .iter()
                    .zip(&outer_rule.weights)
                    .map(|(x, w)| {
                        let wdof = mid + half * x;
                        let weight = w * half * chi2_pdf(wdof, r_dof);
                        let t = (wdof / f64::from(r_dof)).sqrt();
                        (weight, TKernel::new(rho, c, k, t, &inner_rule))
                    })
                    .collect()
            }
        };
        Ok(Evaluator { kernels })
    }

    fn eval(&self, zeta: f64, target: CoverageTarget) -> f64 {
        self.kernels
            .iter()
            .map(|(w, kern)| w * kern.eval(zeta, target))
            .sum()
    }
}

fn validate_halfwidth(k: f64) -> Result<()> {
    if !(k >= 0.0) || !k.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "interval half-width constant must be finite and nonnegative, got {k}"
        )));
    }
    Ok(())
}

fn coverage(s: &NestedScenario, k: f64, target: CoverageTarget) -> Result<CoverageValue> {
    validate_halfwidth(k)?;
    let coarse = Evaluator::new(s.rho, s.c_threshold, k, s.r, INNER_NODES, OUTER_NODES)?
        .eval(s.zeta, target);
    let fine = Evaluator::new(s.rho, s.c_threshold, k, s.r, 2 * INNER_NODES, 2 * OUTER_NODES)?
        .eval(s.zeta, target);
    let abs_err = ((fine - coarse).abs() + OUTER_TAIL).max(1e-12);
    Ok(CoverageValue {
        value: fine,
        abs_err,
    })
}

/// Probability that the reported interval covers the coefficient the
/// selected model actually estimates.
pub fn coverage_selected(s: &NestedScenario, k: f64) -> Result<CoverageValue> {
    coverage(s, k, CoverageTarget::SelectedModel)
}

/// Probability that the reported interval covers the first coefficient of
/// the full model. Never above [`coverage_selected`]; equal iff rho*zeta = 0.
pub fn coverage_full(s: &NestedScenario, k: f64) -> Result<CoverageValue> {
    coverage(s, k, CoverageTarget::FullParameter)
}

/// Coverage minimized over the unknown zeta, reported as (zeta_star, value).
///
/// Scans a 2001-point grid on [0, c + k + 8] (evenness in zeta makes the
/// negative axis redundant) and then tightens around the best grid point by
/// golden-section search.
pub fn min_coverage(
    rho: f64,
    c_threshold: f64,
    k: f64,
    r: Dof,
    target: CoverageTarget,
) -> Result<(f64, CoverageValue)> {
    NestedScenario::new(rho, 0.0, c_threshold, r)?;
    validate_halfwidth(k)?;
    let eval = Evaluator::new(rho, c_threshold, k, r, INNER_NODES, OUTER_NODES)?;
    let f = |zeta: f64| eval.eval(zeta, target);

    let bound = c_threshold + k + 8.0;
    let grid_n = 2001;
    let step = bound / (grid_n - 1) as f64;
    let mut best_i = 0;
    let mut best_v = f64::INFINITY;
    for i in 0..grid_n {
        let v = f(i as f64 * step);
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let lo = (best_i as f64 * step - step).max(0.0);
    let hi = (best_i as f64 * step + step).min(bound);
    let (mut zeta_star, refined) = golden_min(&f, lo, hi);
    if best_v < refined {
        zeta_star = best_i as f64 * step;
    }

    let value = coverage(&NestedScenario::new(rho, zeta_star, c_threshold, r)?, k, target)?;
    Ok((zeta_star, value))
}

fn golden_min(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618033988749895;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..70 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        if (b - a).abs() < 1e-11 {
            break;
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Smallest K whose minimal selected-target coverage reaches 1 - alpha for
/// the given threshold rule: the cheapest constant any valid interval can
/// use against this particular selector. Monotonicity of coverage in K makes
/// bisection on [0, scheffe] exact; the returned K satisfies
/// `min_coverage(K).value = 1 - alpha` within 1e-5.
pub fn k_star_nested(rho: f64, c_threshold: f64, alpha: f64, r: Dof) -> Result<KConstant> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    // Validates rho, c, r.
    NestedScenario::new(rho, 0.0, c_threshold, r)?;
    let target = CoverageTarget::SelectedModel;
    let goal = 1.0 - alpha;
    let mut hi = k_scheffe(alpha, 2, r)?.value;
    let mut lo = 0.0;
    let (_, top) = min_coverage(rho, c_threshold, hi, r, target)?;
    if top.value < goal - 1e-7 {
        return Err(Error::Numerical(format!(
            "bracketing failed: coverage {} at the scheffe constant {hi}",
            top.value
        )));
    }
    while hi - lo > 1e-7 {
        let mid = 0.5 * (lo + hi);
        let (_, cov) = min_coverage(rho, c_threshold, mid, r, target)?;
        if cov.value < goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(KConstant {
        kind: KKind::OptimalNested,
        value: hi,
        alpha,
        r,
        mc_se: 0.0,
    })
}
