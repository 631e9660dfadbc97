//! Quadrature rules (nodes and weights come from `gauss-quad`).

use gauss_quad::hermite::GaussHermite;
use gauss_quad::laguerre::GaussLaguerre;
use gauss_quad::legendre::GaussLegendre;

/// A fixed set of nodes and weights on a finite interval.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    /// Composite Gauss-Legendre rule: `panels` equal panels of `per_panel` nodes on `[a, b]`.
    pub fn composite_legendre(a: f64, b: f64, panels: usize, per_panel: usize) -> Rule {
        let base = GaussLegendre::new(per_panel.max(1).try_into().unwrap());
        let h = (b - a) / panels as f64;
        let mut nodes = Vec::with_capacity(panels * per_panel);
        let mut weights = Vec::with_capacity(panels * per_panel);
        for p in 0..panels {
            let lo = a + p as f64 * h;
            let hi = lo + h;
            let mut pairs: Vec<(f64, f64)> = base.iter().map(|(x, w)| (*x, *w)).collect();
            pairs.sort_by(|l, r| l.0.total_cmp(&r.0));
            for (x, w) in pairs {
                nodes.push(0.5 * (hi - lo) * x + 0.5 * (hi + lo));
                weights.push(0.5 * (hi - lo) * w);
            }
        }
        Rule { nodes, weights }
    }

    /// Gauss-Laguerre rule for `int_0^inf e^{-u} f(u) du`.
    ///
    /// Nodes are polished by Newton steps and weights recomputed as
    /// `x / ((n+1)^2 L_{n+1}(x)^2)`, which keeps the tiny weights of the
    /// outer nodes accurate to relative precision.
    pub fn laguerre(degree: usize) -> Rule {
        let n = degree.max(1);
        let rule = GaussLaguerre::new(n.try_into().unwrap(), 0.0.try_into().unwrap());
        let mut nodes: Vec<f64> = rule.iter().map(|(x, _)| *x).collect();
        nodes.sort_by(|l, r| l.total_cmp(r));
        let mut weights = Vec::with_capacity(n);
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                let (ln, lm1, _) = scaled_laguerre(n, *x);
                // L_n' = n (L_n - L_{n-1}) / x, both in the same scale
                let step = ln * *x / (n as f64 * (ln - lm1));
                if step.is_finite() {
                    *x -= step;
                }
            }
            let (_, _, log_next) = scaled_laguerre(n, *x);
            weights.push((x.ln() - 2.0 * log_next).exp() / ((n + 1) as f64).powi(2));
        }
        Rule { nodes, weights }
    }

    /// Gauss-Hermite rule for `int e^{-t^2} f(t) dt`.
    pub fn hermite(degree: usize) -> Rule {
        let rule = GaussHermite::new(degree.max(1).try_into().unwrap());
        let mut pairs: Vec<(f64, f64)> = rule.iter().map(|(x, w)| (*x, *w)).collect();
        pairs.sort_by(|l, r| l.0.total_cmp(&r.0));
        let (nodes, weights) = pairs.into_iter().unzip();
        Rule { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// `(L_n(x), L_{n-1}(x))` divided by a common positive scale, and
/// `ln |L_{n+1}(x)|`. Requires `n >= 1`.
fn scaled_laguerre(n: usize, x: f64) -> (f64, f64, f64) {
    // p0 = L_{k-1} / S, p1 = L_k / S with S = e^{log_scale}
    let (mut p0, mut p1) = (1.0, 1.0 - x);
    let mut log_scale = 0.0;
    let mut at_n = (p1, p0);
    for k in 1..=n {
        if k == n {
            at_n = (p1, p0);
        }
        let p2 = (((2 * k + 1) as f64 - x) * p1 - k as f64 * p0) / (k + 1) as f64;
        p0 = p1;
        p1 = p2;
        let big = p0.abs().max(p1.abs());
        if big > 1e100 {
            p0 /= big;
            p1 /= big;
            log_scale += big.ln();
        }
    }
    (at_n.0, at_n.1, log_scale + p1.abs().ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn composite_legendre_integrates_gaussian_moment() {
        let rule = Rule::composite_legendre(0.0, 30.0, 16, 64);
        // int_0^inf k e^{-k^2/8} dk = 4
        assert_abs_diff_eq!(rule.integrate(|k| k * (-k * k / 8.0).exp()), 4.0, epsilon = 1e-13);
        assert!(rule.nodes.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn laguerre_and_hermite_moments() {
        let lag = Rule::laguerre(40);
        // int_0^inf e^{-u} u^5 du = 120
        assert_abs_diff_eq!(lag.integrate(|u| u.powi(5)), 120.0, epsilon = 1e-9);
        let big = Rule::laguerre(200);
        assert_abs_diff_eq!(big.integrate(|u| u.powi(10)), 3628800.0, epsilon = 1e-6);
        // outer weights keep relative accuracy: int e^{-u} e^{u/2} du = 2
        assert_abs_diff_eq!(big.integrate(|u| (0.5 * u).exp()), 2.0, epsilon = 1e-10);
        let her = Rule::hermite(30);
        assert_abs_diff_eq!(her.integrate(|t| t * t), std::f64::consts::PI.sqrt() / 2.0, epsilon = 1e-13);
    }
}
