//! Model selection rules, all deterministic functions of (y, seed).
//!
//! Every rule returns a model containing the protected column, except in
//! the explicit two-model mode where one of the two candidate models omits
//! it by construction.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{coordinate1_universe, Design, ModelCache, ModelId};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, substream};

/// Keep-or-drop t-test between the two nested models of a two-column
/// design: the full model is chosen iff |coef_2| / (sigma_hat * se_2)
/// exceeds `c_threshold` in the full fit.
pub fn select_nested(
    design: &Design,
    y: &DVector<f64>,
    sigma_hat: f64,
    c_threshold: f64,
) -> Result<ModelId> {
    if design.p() != 2 {
        return Err(Error::InvalidArgument(format!(
            "the nested t-test rule needs exactly two columns, design has {}",
            design.p()
        )));
    }
    if !(sigma_hat > 0.0) || !sigma_hat.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scale estimate must be positive and finite, got {sigma_hat}"
        )));
    }
    if !(c_threshold >= 0.0) || !c_threshold.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "selection threshold must be finite and nonnegative, got {c_threshold}"
        )));
    }
    let other = 1 - design.protected();
    let full = design.full_model();
    let f = design.factor(&full)?;
    let coef = f.coef(y);
    let pos = full.position(other).expect("full model contains both");
    let stat = coef[pos].abs() / (sigma_hat * f.se_scale[pos]);
    if stat > c_threshold {
        Ok(full)
    } else {
        ModelId::new(vec![design.protected()])
    }
}

/// Candidate comparison used by the greedy and ratio rules: smaller
/// objective first, ties broken toward smaller then lexicographically
/// earlier models.
fn better(obj_a: f64, a: &ModelId, obj_b: f64, b: &ModelId) -> bool {
    match obj_a.partial_cmp(&obj_b) {
        Some(std::cmp::Ordering::Less) => true,
        Some(std::cmp::Ordering::Greater) => false,
        _ => (a.len(), a.members()) < (b.len(), b.members()),
    }
}

/// Greedy bidirectional search on the penalized log-likelihood score
/// n ln(rss) + penalty * size, starting from the full model. Only strictly
/// improving single-column moves are taken; the protected column is never
/// dropped. Moves are scored through the rss ratio, so rescaling y by a
/// power of two changes no comparison.
pub fn select_stepwise(cache: &ModelCache, y: &DVector<f64>, penalty: f64) -> Result<ModelId> {
    if !(penalty >= 0.0) || !penalty.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "penalty must be finite and nonnegative, got {penalty}"
        )));
    }
    let design = cache.design();
    let n = design.n() as f64;
    let p = design.p();
    let mut cur = design.full_model();
    let mut cur_rss = cache.factor(&cur)?.rss(y);

    let score = |rss_cand: f64, rss_cur: f64, dsize: f64| -> f64 {
        let fit = if rss_cand == rss_cur {
            0.0
        } else if rss_cand <= 0.0 {
            f64::NEG_INFINITY
        } else if rss_cur <= 0.0 {
            f64::INFINITY
        } else {
            n * (rss_cand / rss_cur).ln()
        };
        fit + penalty * dsize
    };

    for _ in 0..1000 * p.max(1) {
        let mut best: Option<(f64, ModelId, f64)> = None;
        let mut consider = |cand: ModelId, rss: f64, delta: f64| {
            let replace = match &best {
                None => delta < 0.0,
                Some((bd, bm, _)) => delta < 0.0 && better(delta, &cand, *bd, bm),
            };
            if replace {
                best = Some((delta, cand, rss));
            }
        };
        for &j in cur.members() {
            if j == design.protected() || cur.len() == 1 {
                continue;
            }
            let cand = cur.without(j)?;
            let rss = cache.factor(&cand)?.rss(y);
            consider(cand, rss, score(rss, cur_rss, -1.0));
        }
        for j in 0..p {
            if cur.contains(j) {
                continue;
            }
            let cand = cur.with(j);
            let rss = cache.factor(&cand)?.rss(y);
            consider(cand, rss, score(rss, cur_rss, 1.0));
        }
        match best {
            Some((_, cand, rss)) => {
                cur = cand;
                cur_rss = rss;
            }
            None => return Ok(cur),
        }
    }
    Err(Error::Numerical(
        "stepwise search failed to terminate".into(),
    ))
}

/// Picks the model maximizing the protected coefficient's |t|-ratio
/// |coef| / se over the universe; the scale estimate is a common factor
/// and drops out of the ranking. Ties go to the smaller, earlier model.
pub fn select_spar_variant(
    cache: &ModelCache,
    universe: &[ModelId],
    y: &DVector<f64>,
) -> Result<ModelId> {
    let design = cache.design();
    if universe.is_empty() {
        return Err(Error::InvalidArgument("empty model universe".into()));
    }
    let mut best: Option<(f64, ModelId)> = None;
    for m in universe {
        let pos = m.position(design.protected()).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "model {m} omits the protected column {}",
                design.protected()
            ))
        })?;
        let f = cache.factor(m)?;
        let ratio = f.coef(y)[pos].abs() / f.se_scale[pos];
        // Negated ratio: largest ratio = smallest objective.
        let replace = match &best {
            None => true,
            Some((bo, bm)) => better(-ratio, m, *bo, bm),
        };
        if replace {
            best = Some((-ratio, m.clone()));
        }
    }
    Ok(best.expect("nonempty universe").1)
}

// ---------------------------------------------------------------------
// Lasso path and cross-validated selection.

/// Coordinate-descent solve of the lasso
/// `min_b  |y - X b|^2 / (2n) + lambda * |b|_1`
/// along a decreasing lambda grid with warm starts. Columns are
/// standardized to mean-free... no: columns are used as given but scaled
/// internally to squared norm n; coefficients are returned on the original
/// scale, one column of the result per lambda. Convergence tolerances are
/// relative to `lambdas[0]`, so rescaling y and the grid together rescales
/// the path exactly.
pub fn lasso_path(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambdas: &[f64],
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let p = x.ncols();
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument("empty matrix in lasso".into()));
    }
    if y.len() != n {
        return Err(Error::InvalidArgument(format!(
            "response length {} does not match {n} rows",
            y.len()
        )));
    }
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    if lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::InvalidArgument(
            "lambda grid must be positive and finite".into(),
        ));
    }
    if lambdas.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidArgument(
            "lambda grid must be nonincreasing".into(),
        ));
    }

    let nf = n as f64;
    // Scale columns to squared norm n; zero columns stay zero with scale 1.
    let scales: Vec<f64> = (0..p)
        .map(|j| {
            let s = (x.column(j).norm_squared() / nf).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let xs = DMatrix::from_fn(n, p, |i, j| x[(i, j)] / scales[j]);

    let kkt_tol = 1e-7 * lambdas[0];
    let move_tol = 1e-11 * lambdas[0];
    const MAX_SWEEPS: usize = 50_000;

    let mut beta = DVector::<f64>::zeros(p);
    let mut resid = y.clone();
    let mut out = DMatrix::<f64>::zeros(p, lambdas.len());

    for (li, &lambda) in lambdas.iter().enumerate() {
        let mut converged = false;
        for _ in 0..MAX_SWEEPS {
            let mut max_move = 0.0_f64;
            for j in 0..p {
                let xj = xs.column(j);
                let old = beta[j];
                // Partial residual correlation; columns have norm^2 = n.
                let rho = xj.dot(&resid) / nf + old;
                let new = soft_threshold(rho, lambda);
                if new != old {
                    resid.axpy(old - new, &xj, 1.0);
                    beta[j] = new;
                    max_move = max_move.max((new - old).abs());
                }
            }
            if max_move <= move_tol {
                if kkt_ok(&xs, &resid, &beta, lambda, kkt_tol) {
                    converged = true;
                    break;
                }
            }
        }
        if !converged {
            return Err(Error::LassoNoConvergence { lambda_index: li });
        }
        for j in 0..p {
            out[(j, li)] = beta[j] / scales[j];
        }
    }
    Ok(out)
}

#[inline]
fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Stationarity check: |x_j' r / n| <= lambda + tol off the support and
/// x_j' r / n = lambda * sign(b_j) +- tol on it.
fn kkt_ok(
    xs: &DMatrix<f64>,
    resid: &DVector<f64>,
    beta: &DVector<f64>,
    lambda: f64,
    tol: f64,
) -> bool {
    let nf = xs.nrows() as f64;
    for j in 0..xs.ncols() {
        let g = xs.column(j).dot(resid) / nf;
        let ok = if beta[j] == 0.0 {
            g.abs() <= lambda + tol
        } else {
            (g - lambda * beta[j].signum()).abs() <= tol
        };
        if !ok {
            return false;
        }
    }
    true
}

/// Standard decreasing grid: `len` log-spaced values from lambda_max down
/// to lambda_max / 1000.
pub fn lambda_grid(lambda_max: f64, len: usize) -> Result<Vec<f64>> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda_max must be positive and finite, got {lambda_max}"
        )));
    }
    if len < 2 {
        return Err(Error::InvalidArgument("grid needs at least two points".into()));
    }
    let lo_ratio: f64 = 1e-3;
    Ok((0..len)
        .map(|i| lambda_max * lo_ratio.powf(i as f64 / (len - 1) as f64))
        .collect())
}

/// Smallest penalty that zeroes every coefficient, on the internally
/// rescaled columns.
fn lambda_max_for(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let n = x.nrows() as f64;
    let mut best = 0.0_f64;
    for j in 0..x.ncols() {
        let s = (x.column(j).norm_squared() / n).sqrt();
        if s > 0.0 {
            best = best.max((x.column(j).dot(y) / (n * s)).abs());
        }
    }
    best
}

/// Lasso selection with the protected column always kept: its contribution
/// is projected out first, the remaining columns compete under a 10-fold
/// (or `folds`-fold) cross-validated penalty, and the reported model is the
/// refitted support plus the protected column. Fold assignment is a seeded
/// permutation dealt round-robin, so the rule is a deterministic function
/// of (y, seed).
pub fn select_lasso_cv(
    design: &Design,
    y: &DVector<f64>,
    folds: usize,
    seed: u64,
) -> Result<ModelId> {
    let n = design.n();
    let p = design.p();
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!(
            "folds must lie in [2, n]; got {folds} with n = {n}"
        )));
    }
    let prot = design.protected();
    if p == 1 {
        return ModelId::new(vec![prot]);
    }

    // Residualize y and the free columns on the protected column.
    let xp = design.x().column(prot);
    let xp_nsq = xp.norm_squared();
    let mut yr = y.clone();
    yr.axpy(-(xp.dot(y) / xp_nsq), &xp, 1.0);
    let free: Vec<usize> = (0..p).filter(|&j| j != prot).collect();
    let mut xt = DMatrix::<f64>::zeros(n, free.len());
    for (jt, &j) in free.iter().enumerate() {
        let xj = design.x().column(j);
        let coef = xp.dot(&xj) / xp_nsq;
        for i in 0..n {
            xt[(i, jt)] = xj[i] - coef * xp[i];
        }
    }

    let lmax = lambda_max_for(&xt, &yr);
    if lmax <= 0.0 {
        // Nothing correlates with the residualized response.
        return ModelId::new(vec![prot]);
    }
    let grid = lambda_grid(lmax, 100)?;

    // Seeded fold assignment: permute rows, deal round-robin.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut substream(seed, 0));
    let mut fold_of = vec![0usize; n];
    for (pos, &row) in perm.iter().enumerate() {
        fold_of[row] = pos % folds;
    }

    let mut sse = vec![0.0_f64; grid.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "fold {f} is degenerate with n = {n} and {folds} folds"
            )));
        }
        let xtr = xt.select_rows(&train);
        let ytr = yr.select_rows(&train);
        let path = lasso_path(&xtr, &ytr, &grid)?;
        for (li, s) in sse.iter_mut().enumerate() {
            let b = path.column(li);
            for &i in &test {
                let mut pred = 0.0;
                for jt in 0..free.len() {
                    pred += xt[(i, jt)] * b[jt];
                }
                let e = yr[i] - pred;
                *s += e * e;
            }
        }
    }

    // Smallest pooled error; ties resolve to the larger penalty.
    let mut best_li = 0;
    for li in 1..grid.len() {
        if sse[li] < sse[best_li] {
            best_li = li;
        }
    }

    let path = lasso_path(&xt, &yr, &grid)?;
    let mut members = vec![prot];
    for (jt, &j) in free.iter().enumerate() {
        if path[(jt, best_li)] != 0.0 {
            members.push(j);
        }
    }
    ModelId::new(members)
}

// ---------------------------------------------------------------------
// Uniform front end over the rules.

/// Serializable description of a selection rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", rename_all_fields = "kebab-case")]
pub enum SelectorSpec {
    NestedTTest { c_threshold: f64 },
    Stepwise { penalty: f64 },
    LassoCv { folds: usize },
    SparVariant,
    FixedModel { model: ModelId },
    ThresholdRule { v_seed: u64, threshold: f64 },
}

impl SelectorSpec {
    /// Stable label used in report tables.
    pub fn name(&self) -> String {
        match self {
            SelectorSpec::NestedTTest { c_threshold } => format!("nested-t(c={c_threshold})"),
            SelectorSpec::Stepwise { penalty } => format!("stepwise(penalty={penalty})"),
            SelectorSpec::LassoCv { folds } => format!("lasso-cv(folds={folds})"),
            SelectorSpec::SparVariant => "spar-variant".into(),
            SelectorSpec::FixedModel { model } => format!("fixed{model}"),
            SelectorSpec::ThresholdRule { v_seed, threshold } => {
                format!("threshold(seed={v_seed},tau={threshold})")
            }
        }
    }
}

/// A selection rule bound to a design, ready to apply to responses.
///
/// The standard mode serves rules whose candidates all contain the
/// protected column. [`Selector::new_two_model`] instead fixes an explicit
/// pair (M0 without the protected column, M1 with it) and admits only the
/// rules that make sense there: a fixed choice, or a seeded threshold rule
/// |v'y| > tau deciding between the two.
pub struct Selector<'a> {
    design: &'a Design,
    spec: SelectorSpec,
    cache: ModelCache<'a>,
    universe: Vec<ModelId>,
    threshold_v: Option<DVector<f64>>,
    two_model: Option<(ModelId, ModelId)>,
}

impl<'a> Selector<'a> {
    pub fn new(spec: SelectorSpec, design: &'a Design) -> Result<Self> {
        match &spec {
            SelectorSpec::NestedTTest { c_threshold } => {
                if design.p() != 2 {
                    return Err(Error::InvalidArgument(
                        "the nested t-test rule needs exactly two columns".into(),
                    ));
                }
                if !(c_threshold >= &0.0) || !c_threshold.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "selection threshold must be finite and nonnegative, got {c_threshold}"
                    )));
                }
            }
            SelectorSpec::Stepwise { penalty } => {
                if !(penalty >= &0.0) || !penalty.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "penalty must be finite and nonnegative, got {penalty}"
                    )));
                }
            }
            SelectorSpec::LassoCv { folds } => {
                if *folds < 2 || *folds > design.n() {
                    return Err(Error::InvalidArgument(format!(
                        "folds must lie in [2, n]; got {folds}"
                    )));
                }
            }
            SelectorSpec::SparVariant => {}
            SelectorSpec::FixedModel { model } => {
                if !model.contains(design.protected()) {
                    return Err(Error::InvalidArgument(format!(
                        "fixed model {model} omits the protected column {}",
                        design.protected()
                    )));
                }
                design.factor(model)?;
            }
            SelectorSpec::ThresholdRule { .. } => {
                return Err(Error::InvalidArgument(
                    "threshold rules need an explicit two-model universe".into(),
                ));
            }
        }
        let universe = match &spec {
            SelectorSpec::SparVariant => {
                coordinate1_universe(design.p(), design.protected())?
            }
            _ => Vec::new(),
        };
        let cache = match &spec {
            SelectorSpec::Stepwise { .. } | SelectorSpec::SparVariant => {
                ModelCache::coordinate1(design)?
            }
            _ => ModelCache::new(design),
        };
        Ok(Selector {
            design,
            spec,
            cache,
            universe,
            threshold_v: None,
            two_model: None,
        })
    }

    /// Binds a rule to an explicit pair of models, M0 without the protected
    /// column and M1 with it.
    pub fn new_two_model(
        spec: SelectorSpec,
        design: &'a Design,
        m0: ModelId,
        m1: ModelId,
    ) -> Result<Self> {
        if m0.contains(design.protected()) {
            return Err(Error::InvalidArgument(format!(
                "M0 = {m0} must omit the protected column {}",
                design.protected()
            )));
        }
        if !m1.contains(design.protected()) {
            return Err(Error::InvalidArgument(format!(
                "M1 = {m1} must contain the protected column {}",
                design.protected()
            )));
        }
        design.factor(&m0)?;
        design.factor(&m1)?;
        let threshold_v = match &spec {
            SelectorSpec::FixedModel { model } => {
                if model != &m0 && model != &m1 {
                    return Err(Error::InvalidArgument(format!(
                        "fixed model {model} is neither {m0} nor {m1}"
                    )));
                }
                None
            }
            SelectorSpec::NestedTTest { c_threshold } => {
                if !(c_threshold >= &0.0) || !c_threshold.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "selection threshold must be finite and nonnegative, got {c_threshold}"
                    )));
                }
                None
            }
            SelectorSpec::ThresholdRule { v_seed, threshold } => {
                if !(threshold >= &0.0) || !threshold.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "threshold must be finite and nonnegative, got {threshold}"
                    )));
                }
                let mut rng = substream(*v_seed, 0);
                let mut v = DVector::<f64>::zeros(design.n());
                for vi in v.iter_mut() {
                    *vi = rng.sample(StandardNormal);
                }
                let norm = v.norm();
                if !(norm > 0.0) {
                    return Err(Error::Numerical("degenerate threshold direction".into()));
                }
                v /= norm;
                Some(v)
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "rule {} cannot run on an explicit two-model universe",
                    other.name()
                )));
            }
        };
        Ok(Selector {
            design,
            spec,
            cache: ModelCache::new(design),
            universe: Vec::new(),
            threshold_v,
            two_model: Some((m0, m1)),
        })
    }

    pub fn spec(&self) -> &SelectorSpec {
        &self.spec
    }

    pub fn design(&self) -> &'a Design {
        self.design
    }

    /// The two candidate models when bound in two-model mode.
    pub fn two_model(&self) -> Option<(&ModelId, &ModelId)> {
        self.two_model.as_ref().map(|(a, b)| (a, b))
    }

    /// Applies the rule. `sigma_hat` feeds rules that need a scale
    /// estimate; `seed` feeds rules with internal randomization (fold
    /// assignment); both are ignored by rules that use neither.
    pub fn select(&self, y: &DVector<f64>, sigma_hat: f64, seed: u64) -> Result<ModelId> {
        if let Some((m0, m1)) = &self.two_model {
            return match &self.spec {
                SelectorSpec::FixedModel { model } => Ok(model.clone()),
                SelectorSpec::ThresholdRule { threshold, .. } => {
                    let v = self.threshold_v.as_ref().expect("built with the rule");
                    if v.dot(y).abs() > *threshold {
                        Ok(m1.clone())
                    } else {
                        Ok(m0.clone())
                    }
                }
                SelectorSpec::NestedTTest { c_threshold } => {
                    // Keep the larger model when the protected coefficient's
                    // t statistic inside it clears the threshold.
                    if !(sigma_hat > 0.0) || !sigma_hat.is_finite() {
                        return Err(Error::InvalidArgument(format!(
                            "scale estimate must be positive and finite, got {sigma_hat}"
                        )));
                    }
                    let f = self.cache.factor(m1)?;
                    let pos = m1
                        .position(self.design.protected())
                        .expect("checked at construction");
                    let stat = f.coef(y)[pos].abs() / (sigma_hat * f.se_scale[pos]);
                    if stat > *c_threshold {
                        Ok(m1.clone())
                    } else {
                        Ok(m0.clone())
                    }
                }
                _ => unreachable!("two-model mode admits fixed, threshold, and t-test rules"),
            };
        }
        match &self.spec {
            SelectorSpec::NestedTTest { c_threshold } => {
                select_nested(self.design, y, sigma_hat, *c_threshold)
            }
            SelectorSpec::Stepwise { penalty } => select_stepwise(&self.cache, y, *penalty),
            SelectorSpec::LassoCv { folds } => {
                select_lasso_cv(self.design, y, *folds, derive_seed(seed, 0x6c61))
            }
            SelectorSpec::SparVariant => select_spar_variant(&self.cache, &self.universe, y),
            SelectorSpec::FixedModel { model } => Ok(model.clone()),
            SelectorSpec::ThresholdRule { .. } => {
                unreachable!("rejected in the constructor")
            }
        }
    }
}
