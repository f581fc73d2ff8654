//! Fixed Gaussian-regression designs and submodel least-squares machinery.
//!
//! A design is an n x p matrix of full column rank together with one
//! protected column index that every reported interval refers to. Submodels
//! are subsets of columns; fitting a submodel M to a response y gives the
//! least-squares coefficients in M's own indexing, and fitting it to a mean
//! vector mu gives the projection target those coefficients estimate. Every
//! distributional quantity downstream depends on the design only through its
//! Gram matrix x'x.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::special::Dof;

/// Relative threshold on the QR diagonal below which a column set is
/// declared rank deficient.
const RANK_TOL: f64 = 1e-10;

/// A submodel: sorted, duplicate-free set of 0-based column indices.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct ModelId(Vec<usize>);

impl ModelId {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("a model needs at least one column".into()));
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(ModelId(indices))
    }

    /// All p columns.
    pub fn full(p: usize) -> Self {
        ModelId((0..p).collect())
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    /// Position of column `j` inside the model's own indexing.
    pub fn position(&self, j: usize) -> Option<usize> {
        self.0.binary_search(&j).ok()
    }

    pub fn with(&self, j: usize) -> Self {
        if self.contains(j) {
            return self.clone();
        }
        let mut v = self.0.clone();
        v.push(j);
        v.sort_unstable();
        ModelId(v)
    }

    pub fn without(&self, j: usize) -> Result<Self> {
        let v: Vec<usize> = self.0.iter().copied().filter(|&k| k != j).collect();
        ModelId::new(v)
    }

    /// Bitmask form; only valid for column indices below 64.
    pub fn mask(&self) -> u64 {
        self.0.iter().fold(0u64, |m, &j| m | (1u64 << j))
    }

    pub fn from_mask(mut mask: u64) -> Result<Self> {
        let mut v = Vec::new();
        while mask != 0 {
            let j = mask.trailing_zeros() as usize;
            v.push(j);
            mask &= mask - 1;
        }
        ModelId::new(v)
    }
}

impl fmt::Debug for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, j) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{j}")?;
        }
        write!(f, "}}")
    }
}

/// Column-subset factorization, independent of any response vector.
pub struct SubmodelFactor {
    pub model: ModelId,
    /// Orthonormal basis of the submodel's column span, n x m.
    q: DMatrix<f64>,
    /// Upper-triangular factor with positive diagonal, m x m.
    r: DMatrix<f64>,
    /// sqrt of the diagonal of (X_M' X_M)^{-1}; standard errors are
    /// sigma-hat times these.
    pub se_scale: DVector<f64>,
}

impl SubmodelFactor {
    /// Least-squares coefficients of `y` on the submodel columns.
    pub fn coef(&self, y: &DVector<f64>) -> DVector<f64> {
        let qty = self.q.transpose() * y;
        self.r
            .solve_upper_triangular(&qty)
            .expect("positive diagonal by construction")
    }

    /// Squared residual norm of `y` after projecting on the submodel.
    pub fn rss(&self, y: &DVector<f64>) -> f64 {
        let qty = self.q.transpose() * y;
        let resid = y - &self.q * qty;
        resid.norm_squared()
    }

    /// Full fit summary; `sigma_hat` scales the per-coefficient standard
    /// errors and must be positive.
    pub fn fit(&self, y: &DVector<f64>, sigma_hat: f64) -> SubmodelFit {
        debug_assert!(sigma_hat > 0.0);
        SubmodelFit {
            model: self.model.clone(),
            coef: self.coef(y),
            rss: self.rss(y),
            sigma_hat_j: &self.se_scale * sigma_hat,
        }
    }
}

/// A least-squares fit of one submodel to one response.
#[derive(Clone, Debug)]
pub struct SubmodelFit {
    pub model: ModelId,
    /// Coefficients in the submodel's own indexing.
    pub coef: DVector<f64>,
    pub rss: f64,
    /// Standard errors of `coef`, same layout: sigma-hat times the sqrt
    /// diagonal of (X_M' X_M)^{-1}.
    pub sigma_hat_j: DVector<f64>,
}

/// Fixed design with cached full-model factorization.
#[derive(Debug)]
pub struct Design {
    x: DMatrix<f64>,
    gram: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    protected: usize,
    names: Option<Vec<String>>,
}

/// QR with the sign convention that makes the R diagonal positive; errors
/// when a diagonal entry falls below `RANK_TOL` times the largest.
fn thin_qr(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let k = r.nrows().min(r.ncols());
    for i in 0..k {
        if r[(i, i)] < 0.0 {
            for j in 0..r.ncols() {
                r[(i, j)] = -r[(i, j)];
            }
            for row in 0..q.nrows() {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }
    let largest = (0..k).map(|i| r[(i, i)]).fold(0.0f64, f64::max);
    let smallest = (0..k).map(|i| r[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(largest > 0.0) || smallest < RANK_TOL * largest {
        return Err(Error::Design(
            "column set is rank deficient (or numerically so)".into(),
        ));
    }
    Ok((q, r))
}

impl Design {
    pub fn from_matrix(x: DMatrix<f64>, protected: usize) -> Result<Self> {
        Self::from_matrix_named(x, protected, None)
    }

    fn from_matrix_named(
        x: DMatrix<f64>,
        protected: usize,
        names: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(Error::Design("design must have rows and columns".into()));
        }
        if n < p {
            return Err(Error::Design(format!(
                "full column rank requires n >= p, got n={n}, p={p}"
            )));
        }
        if protected >= p {
            return Err(Error::InvalidArgument(format!(
                "protected column {protected} out of range for p={p}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Design("design entries must be finite".into()));
        }
        let (q, r) = thin_qr(&x).map_err(|_| {
            Error::Design("full model is rank deficient; remove redundant columns".into())
        })?;
        let gram = x.transpose() * &x;
        Ok(Design {
            x,
            gram,
            q,
            r,
            protected,
            names,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn protected(&self) -> usize {
        self.protected
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Orthonormal basis of the full column span, n x p.
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Upper-triangular factor of the full model, p x p.
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn full_model(&self) -> ModelId {
        ModelId::full(self.p())
    }

    /// Number of degrees of freedom of the full-model residual variance.
    pub fn residual_dof(&self) -> usize {
        self.n() - self.p()
    }

    pub(crate) fn columns(&self, m: &ModelId) -> Result<DMatrix<f64>> {
        let p = self.p();
        if let Some(&bad) = m.members().iter().find(|&&j| j >= p) {
            return Err(Error::InvalidArgument(format!(
                "model column {bad} out of range for p={p}"
            )));
        }
        let cols: Vec<usize> = m.members().to_vec();
        Ok(self.x.select_columns(&cols))
    }

    /// Factorize a submodel. Every subset of a full-rank design stays full
    /// rank; the check still runs to catch numerical degeneracy.
    pub fn factor(&self, m: &ModelId) -> Result<SubmodelFactor> {
        let xm = self.columns(m)?;
        let (q, r) = thin_qr(&xm)?;
        let k = m.len();
        let mut se = DVector::zeros(k);
        let rt = r.transpose();
        for j in 0..k {
            let mut e = DVector::zeros(k);
            e[j] = 1.0;
            let w = rt
                .solve_lower_triangular(&e)
                .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
            se[j] = w.norm();
        }
        Ok(SubmodelFactor {
            model: m.clone(),
            q,
            r,
            se_scale: se,
        })
    }

    /// Hash of (gram, n, protected); two designs with equal fingerprints
    /// produce the same distributional results.
    pub fn fingerprint(&self) -> u64 {
        let mut h = derive_seed(0x9E3779B97F4A7C15, self.n() as u64);
        h = derive_seed(h, self.p() as u64);
        h = derive_seed(h, self.protected as u64);
        for v in self.gram.iter() {
            h = derive_seed(h, v.to_bits());
        }
        h
    }
}

/// Fit submodel `m` to the response `y`, with standard errors scaled by
/// the scale estimate `sigma_hat`.
pub fn fit_submodel(
    design: &Design,
    y: &DVector<f64>,
    m: &ModelId,
    sigma_hat: f64,
) -> Result<SubmodelFit> {
    if y.len() != design.n() {
        return Err(Error::InvalidArgument(format!(
            "response length {} does not match n={}",
            y.len(),
            design.n()
        )));
    }
    if !(sigma_hat > 0.0) || !sigma_hat.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scale estimate must be positive and finite, got {sigma_hat}"
        )));
    }
    Ok(design.factor(m)?.fit(y, sigma_hat))
}

/// Projection coefficients of the mean vector `mu` onto submodel `m`: the
/// quantity the submodel's least-squares estimator is unbiased for.
pub fn target_coefficients(design: &Design, mu: &DVector<f64>, m: &ModelId) -> Result<DVector<f64>> {
    if mu.len() != design.n() {
        return Err(Error::InvalidArgument(format!(
            "mean length {} does not match n={}",
            mu.len(),
            design.n()
        )));
    }
    Ok(design.factor(m)?.coef(mu))
}

/// Build an n x p design whose Gram matrix equals `gram` (positive definite,
/// symmetric), via the Cholesky factor padded with zero rows.
pub fn build_design_from_gram(gram: &DMatrix<f64>, n: usize, protected: usize) -> Result<Design> {
    let p = gram.nrows();
    if p == 0 || gram.ncols() != p {
        return Err(Error::InvalidArgument("gram matrix must be square and nonempty".into()));
    }
    if n < p {
        return Err(Error::InvalidArgument(format!(
            "need n >= p, got n={n}, p={p}"
        )));
    }
    let scale = gram.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..p {
        for j in 0..p {
            if (gram[(i, j)] - gram[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::InvalidArgument("gram matrix must be symmetric".into()));
            }
        }
    }
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("gram matrix must be positive definite".into()))?;
    let lt = chol.l().transpose();
    let mut x = DMatrix::zeros(n, p);
    x.view_mut((0, 0), (p, p)).copy_from(&lt);
    Design::from_matrix(x, protected)
}

/// Exchangeable family: column j is e_j + a * 1 in p-space, embedded in
/// n-space by zero padding. All pairwise column angles are equal; a = 0
/// gives orthogonal columns and large `a` drives the correlations toward 1.
pub fn exchangeable_design(p: usize, a: f64, n: usize, protected: usize) -> Result<Design> {
    if !a.is_finite() {
        return Err(Error::InvalidArgument("exchangeable parameter must be finite".into()));
    }
    if p == 0 || n < p {
        return Err(Error::InvalidArgument(format!(
            "need n >= p >= 1, got n={n}, p={p}"
        )));
    }
    let mut x = DMatrix::zeros(n, p);
    for j in 0..p {
        for i in 0..p {
            x[(i, j)] = a + if i == j { 1.0 } else { 0.0 };
        }
    }
    Design::from_matrix(x, protected)
}

/// Equicorrelated family: the protected column has correlation c with each
/// of the other p-1 columns, which are mutually orthonormal. Positive
/// definite for |c| < 1/sqrt(p-1), so c = sqrt(d/(p-1)) with d < 1 stays
/// valid at every p. Dropping nuisance columns shifts the protected
/// coefficient by c times their summed signal, which is what makes this
/// family the stress case for full-parameter coverage.
pub fn equicorrelated_design(p: usize, c: f64, n: usize, protected: usize) -> Result<Design> {
    if p == 0 || n < p {
        return Err(Error::InvalidArgument(format!(
            "need n >= p >= 1, got n={n}, p={p}"
        )));
    }
    if protected >= p {
        return Err(Error::InvalidArgument(format!(
            "protected index {protected} out of range for p={p}"
        )));
    }
    if p >= 2 {
        let hi = 1.0 / (p as f64 - 1.0).sqrt();
        if !(c.abs() < hi) {
            return Err(Error::InvalidArgument(format!(
                "equicorrelation {c} outside the positive-definite range (-{hi}, {hi})"
            )));
        }
    }
    let gram = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else if i == protected || j == protected {
            c
        } else {
            0.0
        }
    });
    build_design_from_gram(&gram, n, protected)
}

/// Read a numeric CSV into a design. An optional first line of column names
/// is detected by failing to parse as numbers; '#' lines are skipped.
pub fn load_design_csv(path: &Path, protected: usize) -> Result<Design> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut names: Option<Vec<String>> = None;
    let mut width: Option<usize> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> =
            fields.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(vals) => {
                if let Some(w) = width {
                    if vals.len() != w {
                        return Err(Error::Parse(format!(
                            "line {}: expected {} fields, found {}",
                            lineno + 1,
                            w,
                            vals.len()
                        )));
                    }
                } else {
                    width = Some(vals.len());
                }
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Parse(format!(
                        "line {}: non-finite value",
                        lineno + 1
                    )));
                }
                rows.push(vals);
            }
            Err(_) => {
                if rows.is_empty() && names.is_none() {
                    names = Some(fields.iter().map(|s| s.to_string()).collect());
                    width = Some(fields.len());
                } else {
                    return Err(Error::Parse(format!(
                        "line {}: non-numeric field in data row",
                        lineno + 1
                    )));
                }
            }
        }
    }
    let n = rows.len();
    let p = width.ok_or_else(|| Error::Parse("file holds no data rows".into()))?;
    if n == 0 {
        return Err(Error::Parse("file holds no data rows".into()));
    }
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    Design::from_matrix_named(x, protected, names)
}

/// Correlation parameter of a two-column design as used by the exact
/// two-model formulas: minus the correlation of the two least-squares
/// coefficient estimators, computed from the inverse Gram matrix.
pub fn rho_two_model(design: &Design) -> Result<f64> {
    if design.p() != 2 {
        return Err(Error::InvalidArgument(format!(
            "needs exactly two columns, got p={}",
            design.p()
        )));
    }
    let g = design.gram();
    let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    if !(det > 0.0) {
        return Err(Error::Design("two-column gram is singular".into()));
    }
    let inv00 = g[(1, 1)] / det;
    let inv11 = g[(0, 0)] / det;
    let inv01 = -g[(0, 1)] / det;
    Ok(-inv01 / (inv00 * inv11).sqrt())
}

/// Inputs of the exact two-nested-model coverage formulas.
///
/// `rho` is the value of [`rho_two_model`]; `zeta` is the standardized
/// second coefficient, beta_2 divided by the standard deviation of its
/// full-model estimator; `c_threshold` is the selection cutoff on the
/// |t|-statistic of coefficient 2; `r` the variance dof. |zeta| = 40 is a
/// practical stand-in for infinity: every zeta-dependent term is below
/// 1e-300 there.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NestedScenario {
    pub rho: f64,
    pub zeta: f64,
    pub c_threshold: f64,
    pub r: Dof,
}

impl NestedScenario {
    pub fn new(rho: f64, zeta: f64, c_threshold: f64, r: Dof) -> Result<Self> {
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rho must lie strictly in (-1, 1), got {rho}"
            )));
        }
        if !zeta.is_finite() {
            return Err(Error::InvalidArgument("zeta must be finite".into()));
        }
        if !(c_threshold >= 0.0) || !c_threshold.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "selection threshold must be finite and nonnegative, got {c_threshold}"
            )));
        }
        r.validate()?;
        Ok(NestedScenario {
            rho,
            zeta,
            c_threshold,
            r,
        })
    }

    /// Scenario induced by a two-column design with second coefficient
    /// `beta2` and noise scale `sigma`.
    pub fn from_design(
        design: &Design,
        beta2: f64,
        sigma: f64,
        c_threshold: f64,
        r: Dof,
    ) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        let rho = rho_two_model(design)?;
        let full = design.factor(&design.full_model())?;
        let zeta = beta2 / (sigma * full.se_scale[1]);
        NestedScenario::new(rho, zeta, c_threshold, r)
    }
}

/// All submodels that contain the protected column, in ascending bitmask
/// order. 2^(p-1) models; refuse p beyond 20 outright.
pub fn coordinate1_universe(p: usize, protected: usize) -> Result<Vec<ModelId>> {
    enumerate_universe(p, Some(protected))
}

/// All nonempty submodels, in ascending bitmask order.
pub fn all_subsets_universe(p: usize) -> Result<Vec<ModelId>> {
    enumerate_universe(p, None)
}

fn enumerate_universe(p: usize, must_contain: Option<usize>) -> Result<Vec<ModelId>> {
    if p == 0 {
        return Err(Error::InvalidArgument("need p >= 1".into()));
    }
    if p > 20 {
        return Err(Error::Budget(format!(
            "enumerating submodels of a p={p} design is not supported (p <= 20)"
        )));
    }
    if let Some(j) = must_contain {
        if j >= p {
            return Err(Error::InvalidArgument(format!(
                "protected column {j} out of range for p={p}"
            )));
        }
    }
    let mut out = Vec::new();
    for mask in 1u64..(1u64 << p) {
        if let Some(j) = must_contain {
            if mask & (1 << j) == 0 {
                continue;
            }
        }
        out.push(ModelId::from_mask(mask)?);
    }
    Ok(out)
}

/// Read-through cache of submodel factorizations. When the coordinate
/// family is small it is prebuilt in full, making later lookups lock-free;
/// misses are recomputed on the fly and never stored, so sharing across
/// threads stays cheap and deterministic.
pub struct ModelCache<'a> {
    design: &'a Design,
    table: HashMap<u64, Arc<SubmodelFactor>>,
}

/// Prebuild everything up to this family size (2^11 factors at p = 12).
const PREBUILD_MAX_P: usize = 12;

impl<'a> ModelCache<'a> {
    /// Empty cache; every lookup factorizes on the fly.
    pub fn new(design: &'a Design) -> Self {
        ModelCache {
            design,
            table: HashMap::new(),
        }
    }

    /// Cache holding every model that contains the protected column, when
    /// the design is small enough to enumerate them all.
    pub fn coordinate1(design: &'a Design) -> Result<Self> {
        let mut cache = ModelCache::new(design);
        if design.p() <= PREBUILD_MAX_P {
            for m in coordinate1_universe(design.p(), design.protected())? {
                let f = design.factor(&m)?;
                cache.table.insert(m.mask(), Arc::new(f));
            }
        }
        Ok(cache)
    }

    pub fn design(&self) -> &'a Design {
        self.design
    }

    pub fn factor(&self, m: &ModelId) -> Result<Arc<SubmodelFactor>> {
        if let Some(f) = self.table.get(&m.mask()) {
            return Ok(f.clone());
        }
        Ok(Arc::new(self.design.factor(m)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_design(n: usize, p: usize, seed: u64) -> Design {
        let mut rng = crate::rng::substream(seed, 0);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        Design::from_matrix(x, 0).unwrap()
    }

    #[test]
    fn model_id_sorts_and_dedups() {
        let m = ModelId::new(vec![3, 0, 3, 1]).unwrap();
        assert_eq!(m.members(), &[0, 1, 3]);
        assert_eq!(m.position(3), Some(2));
        assert!(ModelId::new(vec![]).is_err());
        assert_eq!(ModelId::from_mask(0b1011).unwrap(), m);
        assert_eq!(m.mask(), 0b1011);
        assert_eq!(m.to_string(), "{0,1,3}");
    }

    #[test]
    fn gram_construction_round_trips() {
        let gram = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let d = build_design_from_gram(&gram, 30, 0).unwrap();
        assert_eq!(d.n(), 30);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(d.gram()[(i, j)], gram[(i, j)], epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(rho_two_model(&d).unwrap(), 0.9, epsilon = 1e-10);

        let ident = DMatrix::identity(2, 2);
        let d = build_design_from_gram(&ident, 2, 0).unwrap();
        assert_abs_diff_eq!(rho_two_model(&d).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gram_construction_rejects_bad_input() {
        let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(build_design_from_gram(&not_pd, 10, 0).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0]);
        assert!(build_design_from_gram(&asym, 10, 0).is_err());
        let ok = DMatrix::identity(3, 3);
        assert!(build_design_from_gram(&ok, 2, 0).is_err(), "n < p");
    }

    #[test]
    fn exchangeable_angles_are_constant() {
        let d = exchangeable_design(10, 10.0, 30, 0).unwrap();
        let g = d.gram();
        // Diagonal 1 + 2a + a^2 p, off-diagonal 2a + a^2 p.
        let diag = 1.0 + 20.0 + 1000.0;
        let off = 20.0 + 1000.0;
        for i in 0..10 {
            assert_abs_diff_eq!(g[(i, i)], diag, epsilon = 1e-9);
            for j in 0..10 {
                if i != j {
                    assert_abs_diff_eq!(g[(i, j)], off, epsilon = 1e-9);
                }
            }
        }
        // a = 0 gives orthogonal columns.
        let d0 = exchangeable_design(4, 0.0, 8, 0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(d0.gram()[(i, j)], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn equicorrelated_gram_and_range() {
        let c = (0.8f64 / 9.0).sqrt();
        let d = equicorrelated_design(10, c, 30, 2).unwrap();
        for i in 0..10 {
            assert_abs_diff_eq!(d.gram()[(i, i)], 1.0, epsilon = 1e-10);
            for j in 0..10 {
                if i != j {
                    let want = if i == 2 || j == 2 { c } else { 0.0 };
                    assert_abs_diff_eq!(d.gram()[(i, j)], want, epsilon = 1e-10);
                }
            }
        }
        // PD boundary is 1/sqrt(p-1); d = (p-1)c^2 must stay below 1.
        let hi = 1.0 / 9.0f64.sqrt();
        assert!(equicorrelated_design(10, hi, 30, 0).is_err());
        assert!(equicorrelated_design(10, -hi, 30, 0).is_err());
        assert!(equicorrelated_design(10, hi - 1e-6, 30, 0).is_ok());
        assert!(equicorrelated_design(10, -0.2, 30, 0).is_ok());
        assert!(equicorrelated_design(10, c, 30, 10).is_err());
    }

    #[test]
    fn fit_recovers_exact_coefficients_on_orthonormal_design() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let d = Design::from_matrix(x, 0).unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0, 0.0, 0.0]);
        let fit = fit_submodel(&d, &y, &d.full_model(), 2.0).unwrap();
        assert_abs_diff_eq!(fit.coef[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.coef[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.rss, 0.0, epsilon = 1e-12);
        // Orthonormal columns: the SE is sigma-hat itself.
        assert_abs_diff_eq!(fit.sigma_hat_j[0], 2.0, epsilon = 1e-12);
        assert!(fit_submodel(&d, &y, &d.full_model(), 0.0).is_err());
    }

    #[test]
    fn fit_matches_normal_equations_on_random_design() {
        let d = random_design(5, 3, 11);
        let mut rng = crate::rng::substream(11, 1);
        let y = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = ModelId::new(vec![0, 2]).unwrap();
        let fit = fit_submodel(&d, &y, &m, 1.0).unwrap();

        // Independent route: solve the 2x2 normal equations by elimination.
        let xm = d.x().select_columns(&[0usize, 2]);
        let a = xm.transpose() * &xm;
        let b = xm.transpose() * &y;
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        let c0 = (b[0] * a[(1, 1)] - b[1] * a[(0, 1)]) / det;
        let c1 = (a[(0, 0)] * b[1] - a[(1, 0)] * b[0]) / det;
        assert_abs_diff_eq!(fit.coef[0], c0, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.coef[1], c1, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.sigma_hat_j[0], (a[(1, 1)] / det).sqrt(), epsilon = 1e-9);

        // Residual orthogonality to the selected columns.
        let resid = &y - &xm * &fit.coef;
        let grad = xm.transpose() * &resid;
        assert!(grad.amax() < 1e-9, "residual not orthogonal: {grad}");
        assert_abs_diff_eq!(fit.rss, resid.norm_squared(), epsilon = 1e-9);
    }

    #[test]
    fn targets_follow_projection_identities() {
        let d = random_design(8, 4, 3);
        // mu inside the span of the model reproduces its coefficients.
        let m = ModelId::new(vec![1, 3]).unwrap();
        let xm = d.x().select_columns(&[1usize, 3]);
        let mu = &xm * DVector::from_vec(vec![2.0, -1.0]);
        let t = target_coefficients(&d, &mu, &m).unwrap();
        assert_abs_diff_eq!(t[0], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(t[1], -1.0, epsilon = 1e-10);

        // mu orthogonal to the span gives zero targets.
        let f = d.factor(&m).unwrap();
        let mu_perp = &mu - &f.q * (f.q.transpose() * &mu);
        let t = target_coefficients(&d, &mu_perp, &m).unwrap();
        assert!(t.amax() < 1e-10);

        // full-model target of mu = X beta is beta itself.
        let beta = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let mu = d.x() * &beta;
        let t = target_coefficients(&d, &mu, &d.full_model()).unwrap();
        assert!((t - beta).amax() < 1e-9);
    }

    #[test]
    fn estimator_is_unbiased_for_its_target_even_under_misspecification() {
        let d = random_design(12, 4, 21);
        let beta = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.7]);
        let mu = d.x() * &beta;
        let m = ModelId::new(vec![0, 1]).unwrap(); // wrong model on purpose
        let target = target_coefficients(&d, &mu, &m).unwrap();
        let f = d.factor(&m).unwrap();
        let reps = 100_000;
        let mut mean = DVector::zeros(2);
        let mut rng = crate::rng::substream(77, 0);
        for _ in 0..reps {
            let u = DVector::from_fn(12, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &mu + u;
            mean += f.coef(&y);
        }
        mean /= reps as f64;
        // SD of each mean component is se_scale/sqrt(reps); allow 4 of them.
        for j in 0..2 {
            let tol = 4.0 * f.se_scale[j] / (reps as f64).sqrt();
            assert!(
                (mean[j] - target[j]).abs() < tol,
                "component {j}: {} vs {} (tol {tol})",
                mean[j],
                target[j]
            );
        }
    }

    #[test]
    fn rho_two_model_reports_half_on_half_correlated_gram() {
        let gram = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let d = build_design_from_gram(&gram, 6, 0).unwrap();
        // By the 2x2 inverse, this equals +0.5 under the sign convention
        // used by the two-model formulas.
        assert_abs_diff_eq!(rho_two_model(&d).unwrap(), 0.5, epsilon = 1e-12);
        let d3 = random_design(6, 3, 5);
        assert!(rho_two_model(&d3).is_err());
    }

    #[test]
    fn rho_sign_matches_estimator_correlation() {
        // Sample correlation of the two coefficient estimators should be
        // close to minus rho_two_model.
        let gram = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
        let d = build_design_from_gram(&gram, 8, 0).unwrap();
        let rho = rho_two_model(&d).unwrap();
        let f = d.factor(&d.full_model()).unwrap();
        let reps = 200_000;
        let (mut s1, mut s2, mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut rng = crate::rng::substream(123, 0);
        for _ in 0..reps {
            let u = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
            let b = f.coef(&u);
            s1 += b[0];
            s2 += b[1];
            s11 += b[0] * b[0];
            s22 += b[1] * b[1];
            s12 += b[0] * b[1];
        }
        let nf = reps as f64;
        let cov = s12 / nf - (s1 / nf) * (s2 / nf);
        let v1 = s11 / nf - (s1 / nf).powi(2);
        let v2 = s22 / nf - (s2 / nf).powi(2);
        let corr = cov / (v1 * v2).sqrt();
        assert!(
            (corr + rho).abs() < 0.01,
            "sample corr {corr} should be near {}",
            -rho
        );
    }

    #[test]
    fn coverage_inputs_depend_on_design_only_through_gram() {
        // Rotating the rows by an orthonormal matrix leaves the gram, and
        // with it rho and the standard-error scales, unchanged.
        let d = random_design(9, 2, 31);
        let mut rng = crate::rng::substream(31, 9);
        let raw = DMatrix::from_fn(9, 9, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q_rot = raw.qr().q();
        let rotated = Design::from_matrix(&q_rot * d.x(), 0).unwrap();
        assert_abs_diff_eq!(
            rho_two_model(&d).unwrap(),
            rho_two_model(&rotated).unwrap(),
            epsilon = 1e-9
        );
        let f1 = d.factor(&d.full_model()).unwrap();
        let f2 = rotated.factor(&rotated.full_model()).unwrap();
        assert_abs_diff_eq!(f1.se_scale[0], f2.se_scale[0], epsilon = 1e-9);
        assert_abs_diff_eq!(f1.se_scale[1], f2.se_scale[1], epsilon = 1e-9);
    }

    #[test]
    fn universes_enumerate_in_mask_order() {
        let u = coordinate1_universe(3, 0).unwrap();
        let want: Vec<ModelId> = [0b001u64, 0b011, 0b101, 0b111]
            .iter()
            .map(|&m| ModelId::from_mask(m).unwrap())
            .collect();
        assert_eq!(u, want);
        let all = all_subsets_universe(3).unwrap();
        assert_eq!(all.len(), 7);
        assert!(coordinate1_universe(25, 0).is_err());
    }

    #[test]
    fn design_permutation_symmetry_for_builtin_families() {
        // Both built-in families are exchangeable across columns: permuting
        // column labels permutes the gram the same way.
        let d = exchangeable_design(5, 2.0, 9, 0).unwrap();
        let perm = [3usize, 1, 4, 0, 2];
        let xp = d.x().select_columns(&perm);
        let dp = Design::from_matrix(xp, 0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_abs_diff_eq!(
                    dp.gram()[(i, j)],
                    d.gram()[(perm[i], perm[j])],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn csv_round_trip_and_failure_modes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("design.csv");
        let d = random_design(30, 10, 99);
        let mut text = String::new();
        for i in 0..30 {
            let row: Vec<String> = (0..10).map(|j| format!("{:.17e}", d.x()[(i, j)])).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        std::fs::write(&path, &text).unwrap();
        let loaded = load_design_csv(&path, 0).unwrap();
        assert_eq!(loaded.n(), 30);
        assert_eq!(loaded.p(), 10);
        assert!((loaded.x() - d.x()).amax() < 1e-12);

        // Header line with names is preserved.
        let with_header = format!("{}\n{}", (0..10).map(|j| format!("col{j}")).collect::<Vec<_>>().join(","), text);
        std::fs::write(&path, &with_header).unwrap();
        let loaded = load_design_csv(&path, 0).unwrap();
        assert_eq!(loaded.column_names().unwrap()[3], "col3");

        // Duplicated column: rank deficient.
        let mut dup = String::new();
        for i in 0..6 {
            dup.push_str(&format!("{},{},{}\n", i as f64 + 0.5, 2.0 * (i as f64 + 0.5), i as f64 * i as f64));
        }
        std::fs::write(&path, &dup).unwrap();
        let err = load_design_csv(&path, 0).unwrap_err();
        assert!(err.to_string().contains("rank"), "got: {err}");

        // Ragged row.
        std::fs::write(&path, "1.0,2.0\n3.0\n").unwrap();
        assert!(load_design_csv(&path, 0).is_err());

        // Non-numeric data row.
        std::fs::write(&path, "1.0,2.0\n3.0,apple\n").unwrap();
        assert!(load_design_csv(&path, 0).is_err());
    }

    #[test]
    fn cache_prebuilds_small_coordinate_families() {
        let d = random_design(12, 4, 55);
        let cache = ModelCache::coordinate1(&d).unwrap();
        let m = ModelId::new(vec![0, 2]).unwrap();
        let f1 = cache.factor(&m).unwrap();
        let f2 = cache.factor(&m).unwrap();
        assert!(Arc::ptr_eq(&f1, &f2), "prebuilt factors are shared");
        // A model outside the table still factorizes.
        let outside = ModelId::new(vec![1]).unwrap();
        assert!(cache.factor(&outside).is_ok());
    }

    #[test]
    fn nested_scenario_validates_inputs() {
        assert!(NestedScenario::new(0.5, 1.0, 1.4, Dof::Infinite).is_ok());
        assert!(NestedScenario::new(1.0, 0.0, 1.0, Dof::Infinite).is_err());
        assert!(NestedScenario::new(0.0, f64::INFINITY, 1.0, Dof::Infinite).is_err());
        assert!(NestedScenario::new(0.0, 0.0, -0.5, Dof::Infinite).is_err());
        assert!(NestedScenario::new(0.0, 0.0, 1.0, Dof::Finite(0)).is_err());

        let gram = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let d = build_design_from_gram(&gram, 30, 0).unwrap();
        let s = NestedScenario::from_design(&d, 0.7, 2.0, 1.5, Dof::Finite(20)).unwrap();
        assert_abs_diff_eq!(s.rho, 0.9, epsilon = 1e-10);
        // zeta = beta2 / (sigma * sqrt([(X'X)^{-1}]_22))
        let inv11 = 1.0 / (1.0 - 0.81_f64);
        assert_abs_diff_eq!(s.zeta, 0.7 / (2.0 * inv11.sqrt()), epsilon = 1e-10);
    }
}
