//! Gauss-Legendre rules with a process-wide cache keyed by node count.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use once_cell::sync::Lazy;

/// Nodes and weights on the reference interval [-1, 1], nodes ascending.
pub struct GlRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GlRule {
    /// Newton iteration on the Legendre recurrence; accurate to roughly
    /// machine precision for the node counts used here (n <= 1000).
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Chebyshev-like initial guess for the i-th positive root.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let step = p / d;
                x -= step;
                if step.abs() <= 1e-15 {
                    let (p2, d2) = legendre_with_derivative(n, x);
                    dp = d2;
                    x -= p2 / d2;
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GlRule { nodes, weights }
    }

    /// Integral of `f` over [a, b].
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

static CACHE: Lazy<Mutex<HashMap<usize, Arc<GlRule>>>> = Lazy::new(|| Mutex::new(HashMap::new()));

/// Cached rule lookup; rules are immutable once built.
pub fn gl_rule(n: usize) -> Arc<GlRule> {
    let mut cache = CACHE.lock().expect("quadrature cache");
    cache
        .entry(n)
        .or_insert_with(|| Arc::new(GlRule::new(n)))
        .clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn integrates_polynomials_exactly() {
        // An n-point rule is exact through degree 2n-1.
        let rule = GlRule::new(5);
        let val = rule.integrate(-1.0, 1.0, |x| x.powi(8));
        assert_abs_diff_eq!(val, 2.0 / 9.0, epsilon = 1e-14);
        let val = rule.integrate(0.0, 2.0, |x| 3.0 * x * x);
        assert_abs_diff_eq!(val, 8.0, epsilon = 1e-13);
    }

    #[test]
    fn gaussian_mass_on_wide_interval() {
        let rule = GlRule::new(201);
        let val = rule.integrate(-10.0, 10.0, crate::special::phi);
        assert_abs_diff_eq!(val, 1.0, epsilon = 1e-13);
    }

    #[test]
    fn weights_sum_to_interval_length() {
        for n in [1, 2, 3, 10, 200, 201, 402] {
            let rule = GlRule::new(n);
            let total: f64 = rule.weights.iter().sum();
            assert_abs_diff_eq!(total, 2.0, epsilon = 1e-12);
            for w in &rule.weights {
                assert!(*w > 0.0);
            }
            let mut sorted = rule.nodes.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(sorted, rule.nodes, "nodes ascending for n={n}");
        }
    }

    #[test]
    fn cache_returns_shared_rule() {
        let a = gl_rule(33);
        let b = gl_rule(33);
        assert!(Arc::ptr_eq(&a, &b));
    }
}
