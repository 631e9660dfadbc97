//! Analytic model of the twin-beam state produced by parametric fluorescence.
//!
//! The state is `sqrt(1 - tau^2) sum_n tau^n |n, n>` with `tau = tanh r`. Both
//! detectors share one quantum efficiency `eta`, which acts on the rescaled
//! photocurrents as a Gaussian convolution of variance `(1 - eta) / (4 eta)`.
//!
//! Phase arguments of [`gain`] and [`weight_fn`] are the physical sum of the
//! two input local-oscillator phases (not the half-sum).

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::fockmath::{hermite_functions, log_factorial, FockIndex};
use crate::{Error, Result};

/// Physical configuration of the amplifier output and detectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinBeamParams {
    /// `tanh r`, in `[0, 1)`.
    pub tau: f64,
    /// Mean photon number per mode, `tau^2 / (1 - tau^2)`.
    pub nbar: f64,
    /// Quantum efficiency of both photodetectors, in `(0, 1]`.
    pub eta: f64,
}

impl TwinBeamParams {
    pub fn from_nbar(nbar: f64, eta: f64) -> Result<Self> {
        if !(nbar.is_finite() && nbar >= 0.0) {
            return Err(Error::InvalidParameter(format!("nbar must be finite and >= 0, got {nbar}")));
        }
        check_eta(eta)?;
        Ok(TwinBeamParams { tau: (nbar / (nbar + 1.0)).sqrt(), nbar, eta })
    }

    pub fn from_tau(tau: f64, eta: f64) -> Result<Self> {
        if !(tau.is_finite() && (0.0..1.0).contains(&tau)) {
            return Err(Error::InvalidParameter(format!("tau must lie in [0, 1), got {tau}")));
        }
        check_eta(eta)?;
        Ok(TwinBeamParams { tau, nbar: tau * tau / (1.0 - tau * tau), eta })
    }

    pub fn with_eta(self, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        Ok(TwinBeamParams { eta, ..self })
    }

    /// `cosh r`.
    pub fn mu(&self) -> f64 {
        1.0 / (1.0 - self.tau * self.tau).sqrt()
    }

    /// `sinh r`.
    pub fn nu(&self) -> f64 {
        self.tau * self.mu()
    }

    /// Squeezing parameter `r`.
    pub fn squeezing(&self) -> f64 {
        self.tau.atanh()
    }

    /// Added Gaussian variance `(1 - eta) / (4 eta)` of each rescaled photocurrent.
    pub fn delta2_eta(&self) -> f64 {
        delta2_eta(self.eta)
    }

    /// Variance of a single rescaled photocurrent, `(nbar + 1/2)/2 + Delta^2_eta`.
    pub fn single_variance(&self) -> f64 {
        0.5 * (self.nbar + 0.5) + self.delta2_eta()
    }

    /// `tau^2`, the geometric ratio of the photon-number distribution.
    pub fn ratio(&self) -> f64 {
        self.tau * self.tau
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta.is_finite() && eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidParameter(format!("eta must lie in (0, 1], got {eta}")));
    }
    Ok(())
}

pub fn delta2_eta(eta: f64) -> f64 {
    (1.0 - eta) / (4.0 * eta)
}

/// Ideal-detector parameters for a given mean photon number.
pub fn params_from_nbar(nbar: f64) -> Result<TwinBeamParams> {
    TwinBeamParams::from_nbar(nbar, 1.0)
}

/// `p(n, m) = delta_nm (1 - tau^2) tau^{2n}`.
pub fn joint_photon_pdf(p: &TwinBeamParams, n: FockIndex, m: FockIndex) -> f64 {
    if n != m {
        return 0.0;
    }
    geometric(p.ratio(), n)
}

/// Thermal photon-number distribution of either mode alone.
pub fn marginal_thermal_pdf(p: &TwinBeamParams, n: FockIndex) -> f64 {
    (1.0 / (p.nbar + 1.0)) * (p.nbar / (p.nbar + 1.0)).powi(n as i32)
}

/// Joint photon-number distribution of the `+-45 deg` polarised outputs.
pub fn diag45_photon_pdf(p: &TwinBeamParams, n: FockIndex, m: FockIndex) -> f64 {
    if n % 2 == 1 || m % 2 == 1 {
        return 0.0;
    }
    let (k, l) = ((n / 2) as u64, (m / 2) as u64);
    // (2k-1)!! / (2^k k!) = (2k)! / (4^k (k!)^2)
    let ln_coeff = |j: u64| log_factorial(2 * j) - 2.0 * log_factorial(j) - j as f64 * 4f64.ln();
    let q = p.nbar / (p.nbar + 1.0);
    let ln_geo = if k + l == 0 { 0.0 } else { (k + l) as f64 * q.ln() };
    (ln_coeff(k) + ln_coeff(l) + ln_geo).exp() / (p.nbar + 1.0)
}

/// Total photon-number distribution `s(n)`: `(1 - tau^2) tau^n` for even `n`, else 0.
///
/// Only the diagonal term `l = n/2` of `sum_l p(l, n-l)` survives, so this is
/// `p(n/2, n/2)` bit for bit.
pub fn total_photon_pdf_theory(p: &TwinBeamParams, n: FockIndex) -> f64 {
    if n % 2 == 1 {
        return 0.0;
    }
    joint_photon_pdf(p, n / 2, n / 2)
}

/// Photon-number difference correlation `d_N(n) = delta_{n0} (1 - tau^{2(N+1)})`.
pub fn correlation_theory(p: &TwinBeamParams, big_n: usize, n: i64) -> f64 {
    if n != 0 {
        return 0.0;
    }
    1.0 - p.ratio().powi(big_n as i32 + 1)
}

/// `d_N(n)` for two independent coherent states of mean photon number `nbar` each.
pub fn coherent_correlation(nbar: f64, big_n: usize, n: i64) -> f64 {
    let poisson = |k: i64| {
        if nbar == 0.0 {
            return if k == 0 { 1.0 } else { 0.0 };
        }
        (-nbar + k as f64 * nbar.ln() - log_factorial(k as u64)).exp()
    };
    let start = (-n).max(0);
    (start..=big_n as i64).map(|l| poisson(l) * poisson(n + l)).sum()
}

fn geometric(ratio: f64, n: usize) -> f64 {
    (1.0 - ratio) * ratio.powi(n as i32)
}

/// Coefficients of the joint quadrature distribution at fixed LO phases.
///
/// `d2_plus` and `d2_minus` are the noise-free widths `d^2_{+-kappa}`; the
/// efficiency enters `a2`, `b2`, `c` through `delta2_eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadPdfCoeffs {
    pub kappa: Complex64,
    pub d2_plus: f64,
    pub d2_minus: f64,
    pub a2: f64,
    pub b2: f64,
    pub c: f64,
    pub delta2_eta: f64,
}

impl QuadPdfCoeffs {
    /// `d^2_kappa + 4 Delta^2_eta`, the variance scale of `x + x'`.
    pub fn sum_width(&self) -> f64 {
        self.d2_plus + 4.0 * self.delta2_eta
    }

    /// `d^2_{-kappa} + 4 Delta^2_eta`, the variance scale of `x - x'`.
    pub fn diff_width(&self) -> f64 {
        self.d2_minus + 4.0 * self.delta2_eta
    }
}

pub fn quad_pdf_coeffs(p: &TwinBeamParams, phi: f64, psi: f64) -> QuadPdfCoeffs {
    coeffs_for_sum(p, phi + psi)
}

/// Coefficients depend on the LO phases only through `phi + psi`.
pub fn coeffs_for_sum(p: &TwinBeamParams, phase_sum: f64) -> QuadPdfCoeffs {
    let kappa = Complex64::from_polar(p.tau, -phase_sum);
    let norm = 1.0 - p.ratio();
    let d2_plus = (Complex64::new(1.0, 0.0) + kappa).norm_sqr() / norm;
    let d2_minus = (Complex64::new(1.0, 0.0) - kappa).norm_sqr() / norm;
    let delta2 = p.delta2_eta();
    let dp = d2_plus + 4.0 * delta2;
    let dm = d2_minus + 4.0 * delta2;
    let a2 = (d2_plus + d2_minus + 8.0 * delta2) / (dp * dm);
    let c = (d2_plus - d2_minus) / (d2_plus + d2_minus + 8.0 * delta2);
    let b2 = a2 * (1.0 - c * c);
    QuadPdfCoeffs { kappa, d2_plus, d2_minus, a2, b2, c, delta2_eta: delta2 }
}

/// Joint density of the two rescaled photocurrents, sum/difference form.
pub fn joint_quad_pdf(p: &TwinBeamParams, x: f64, xp: f64, phi: f64, psi: f64) -> f64 {
    let k = quad_pdf_coeffs(p, phi, psi);
    let (dp, dm) = (k.sum_width(), k.diff_width());
    2.0 / (PI * (dp * dm).sqrt()) * (-(x + xp).powi(2) / dp - (x - xp).powi(2) / dm).exp()
}

/// Same density in the conditional form `(ab/pi) exp[-a^2 (x - c x')^2 - b^2 x'^2]`.
pub fn joint_quad_pdf_conditional(p: &TwinBeamParams, x: f64, xp: f64, phi: f64, psi: f64) -> f64 {
    let k = quad_pdf_coeffs(p, phi, psi);
    (k.a2 * k.b2).sqrt() / PI * (-k.a2 * (x - k.c * xp).powi(2) - k.b2 * xp * xp).exp()
}

/// Density of one photocurrent alone: zero-mean Gaussian.
pub fn single_quad_pdf(p: &TwinBeamParams, x: f64) -> f64 {
    let var = p.single_variance();
    (-x * x / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

/// Phase-sensitive gain of the central-frequency component,
/// `mu^2 |1 + tau e^{-i s}|^2` at input-phase sum `s`.
pub fn gain(p: &TwinBeamParams, sum_phase: f64) -> f64 {
    let mu2 = 1.0 / (1.0 - p.ratio());
    mu2 * (1.0 + p.ratio() + 2.0 * p.tau * sum_phase.cos())
}

/// Phase weighting function `1 / (2 pi g)`; integrates to one over a period.
pub fn weight_fn(p: &TwinBeamParams, sum_phase: f64) -> f64 {
    1.0 / (2.0 * PI * gain(p, sum_phase))
}

/// Number of Fock terms needed for `tau^{2n} < tail`.
pub fn fock_truncation(p: &TwinBeamParams, tail: f64) -> usize {
    if p.tau == 0.0 {
        return 0;
    }
    (tail.ln() / p.ratio().ln()).ceil() as usize + 1
}

/// Joint quadrature density evaluated from the Fock expansion of the state,
/// `|sum_n sqrt(1-tau^2) tau^n e^{-in(phi+psi)} <x|n><x'|n>|^2`, on a uniform
/// square grid of `points x points` nodes spanning `[lo, hi]` in both `x` and
/// `x'`. For `eta < 1` the ideal density is convolved with the detector
/// Gaussians by a trapezoid sum on a lattice commensurate with the grid.
///
/// Returns row-major values indexed `[i_x * points + i_xp]`.
pub fn fock_series_pdf_grid(p: &TwinBeamParams, phase_sum: f64, lo: f64, hi: f64, points: usize) -> Vec<f64> {
    // amplitude tail tau^n must sit well below the 1e-8 comparison level
    let nterms = fock_truncation(p, 1e-24);
    let amp0 = (1.0 - p.ratio()).sqrt();
    let coeffs: Vec<Complex64> = (0..=nterms)
        .map(|n| Complex64::from_polar(amp0 * p.tau.powi(n as i32), -(n as f64) * phase_sum))
        .collect();
    let grid_step = if points > 1 { (hi - lo) / (points - 1) as f64 } else { 1.0 };
    let delta2 = p.delta2_eta();

    if delta2 == 0.0 {
        let psis: Vec<Vec<f64>> =
            (0..points).map(|i| hermite_functions(nterms, lo + i as f64 * grid_step)).collect();
        let mut out = Vec::with_capacity(points * points);
        for a in &psis {
            for b in &psis {
                let amp: Complex64 = coeffs.iter().zip(a.iter().zip(b)).map(|(c, (u, v))| c * (u * v)).sum();
                out.push(amp.norm_sqr());
            }
        }
        return out;
    }

    // lattice step h divides the grid step
    let sub = (grid_step / 0.02).ceil().max(1.0) as usize;
    let h = grid_step / sub as f64;
    let sd = delta2.sqrt();
    let half = (8.5 * sd / h).ceil() as usize;
    let lattice_lo = lo - half as f64 * h;
    let lattice_len = (points - 1) * sub + 2 * half + 1;
    let psis: Vec<Vec<f64>> =
        (0..lattice_len).map(|i| hermite_functions(nterms, lattice_lo + i as f64 * h)).collect();
    let mut ideal = vec![0.0; lattice_len * lattice_len];
    for (i, a) in psis.iter().enumerate() {
        let scaled: Vec<Complex64> = coeffs.iter().zip(a).map(|(c, u)| c * u).collect();
        for (j, b) in psis.iter().enumerate().skip(i) {
            let amp: Complex64 = scaled.iter().zip(b).map(|(c, v)| c * v).sum();
            let v = amp.norm_sqr();
            ideal[i * lattice_len + j] = v;
            ideal[j * lattice_len + i] = v;
        }
    }
    let gauss: Vec<f64> = (0..=2 * half)
        .map(|k| {
            let u = (k as f64 - half as f64) * h;
            h * (-u * u / (2.0 * delta2)).exp() / (2.0 * PI * delta2).sqrt()
        })
        .collect();
    let mut out = Vec::with_capacity(points * points);
    for ix in 0..points {
        for ixp in 0..points {
            let (cx, cxp) = (ix * sub + half, ixp * sub + half);
            let mut acc = 0.0;
            for (du, gu) in gauss.iter().enumerate() {
                let row = (cx + half - du) * lattice_len;
                let mut inner = 0.0;
                for (dv, gv) in gauss.iter().enumerate() {
                    inner += gv * ideal[row + cxp + half - dv];
                }
                acc += gu * inner;
            }
            out.push(acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::Rule;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn nbar10() -> TwinBeamParams {
        TwinBeamParams::from_nbar(10.0, 1.0).unwrap()
    }

    #[test]
    fn params_construction() {
        assert_eq!(params_from_nbar(0.0).unwrap().tau, 0.0);
        assert_abs_diff_eq!(params_from_nbar(10.0).unwrap().ratio(), 10.0 / 11.0, epsilon = 1e-15);
        assert_abs_diff_eq!(params_from_nbar(4.0).unwrap().ratio(), 0.8, epsilon = 1e-15);
        assert!(params_from_nbar(-1.0).is_err());
        assert!(TwinBeamParams::from_nbar(1.0, 0.0).is_err());
        assert!(TwinBeamParams::from_nbar(1.0, 1.2).is_err());
        assert!(TwinBeamParams::from_tau(1.0, 1.0).is_err());
        let p = TwinBeamParams::from_tau(0.7, 0.9).unwrap();
        assert_abs_diff_eq!(p.nbar, 0.49 / 0.51, epsilon = 1e-14);
        assert_abs_diff_eq!(p.nu() * p.nu(), p.nbar, epsilon = 1e-12);
        assert_abs_diff_eq!(p.mu() * p.mu() - p.nu() * p.nu(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.squeezing().tanh(), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn photon_statistics_values() {
        let p = nbar10();
        assert_abs_diff_eq!(joint_photon_pdf(&p, 0, 0), 1.0 / 11.0, epsilon = 1e-15);
        assert_eq!(joint_photon_pdf(&p, 3, 5), 0.0);
        assert_abs_diff_eq!(joint_photon_pdf(&p, 10, 10), (1.0 / 11.0) * (10.0f64 / 11.0).powi(10), epsilon = 1e-15);
        assert_abs_diff_eq!(joint_photon_pdf(&p, 10, 10), 0.035049, epsilon = 1e-6);

        assert_eq!(marginal_thermal_pdf(&params_from_nbar(0.0).unwrap(), 0), 1.0);
        assert_abs_diff_eq!(marginal_thermal_pdf(&p, 0), 1.0 / 11.0, epsilon = 1e-15);
        let total: f64 = (0..2000).map(|n| marginal_thermal_pdf(&p, n)).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);

        assert_eq!(diag45_photon_pdf(&p, 1, 0), 0.0);
        assert_abs_diff_eq!(diag45_photon_pdf(&p, 0, 0), 1.0 / 11.0, epsilon = 1e-15);
        assert_abs_diff_eq!(diag45_photon_pdf(&p, 2, 0), 0.5 / 11.0 * (10.0 / 11.0), epsilon = 1e-15);
        assert_abs_diff_eq!(diag45_photon_pdf(&p, 2, 0), 0.041322, epsilon = 1e-6);

        assert_eq!(total_photon_pdf_theory(&p, 1), 0.0);
        assert_abs_diff_eq!(total_photon_pdf_theory(&p, 0), 1.0 / 11.0, epsilon = 1e-15);
        assert_abs_diff_eq!(total_photon_pdf_theory(&p, 2), 10.0 / 121.0, epsilon = 1e-15);

        assert_eq!(correlation_theory(&p, 10, 3), 0.0);
        assert_abs_diff_eq!(correlation_theory(&p, 10, 0), 1.0 - (10.0f64 / 11.0).powi(11), epsilon = 1e-15);
        assert_abs_diff_eq!(correlation_theory(&p, 10, 0), 0.6495, epsilon = 1e-4);
        assert_eq!(correlation_theory(&params_from_nbar(0.0).unwrap(), 0, 0), 1.0);
    }

    #[test]
    fn diag45_sums_to_one() {
        let p = TwinBeamParams::from_nbar(2.0, 1.0).unwrap();
        let mut total = 0.0;
        for n in 0..400 {
            for m in 0..400 {
                total += diag45_photon_pdf(&p, n, m);
            }
        }
        // the tail decays like q^{k} / sqrt(k); 200 terms leave < 1e-30
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn total_is_sum_of_joint() {
        let p = TwinBeamParams::from_nbar(3.0, 1.0).unwrap();
        for n in 0..30 {
            let sum: f64 = (0..=n).map(|l| joint_photon_pdf(&p, l, n - l)).sum();
            assert_eq!(sum, total_photon_pdf_theory(&p, n));
        }
    }

    #[test]
    fn coefficient_values() {
        let vac = params_from_nbar(0.0).unwrap();
        let k = quad_pdf_coeffs(&vac, 0.4, 1.9);
        assert_abs_diff_eq!(k.d2_plus, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(k.d2_minus, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(k.a2, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(k.c, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(k.b2, 2.0, epsilon = 1e-15);

        let p = nbar10();
        let tau = (10.0f64 / 11.0).sqrt();
        let k = quad_pdf_coeffs(&p, 0.3, -0.3);
        assert_abs_diff_eq!(k.d2_plus, (1.0 + tau) / (1.0 - tau), epsilon = 1e-11);
        assert_abs_diff_eq!(k.d2_plus, 41.976, epsilon = 1e-3);
        assert_abs_diff_eq!(k.d2_minus, 0.023823, epsilon = 1e-6);
        assert_abs_diff_eq!(k.a2, 42.0, epsilon = 1e-3);
        assert_abs_diff_eq!(k.c, 0.998866, epsilon = 1e-6);
        assert_abs_diff_eq!(k.d2_plus * k.d2_minus, 1.0, epsilon = 1e-12);

        let lossy = TwinBeamParams::from_nbar(10.0, 0.8).unwrap();
        assert_abs_diff_eq!(lossy.delta2_eta(), 0.0625, epsilon = 1e-15);
        let k = quad_pdf_coeffs(&lossy, 1.0, 0.2);
        assert_abs_diff_eq!(k.sum_width() - k.d2_plus, 0.25, epsilon = 1e-14);
    }

    #[test]
    fn pdf_forms_agree_and_normalise() {
        let vac = params_from_nbar(0.0).unwrap();
        for &(x, xp) in &[(0.0f64, 0.0f64), (0.3, -0.8), (1.2, 0.5)] {
            let want = 2.0 / PI * (-2.0 * x * x - 2.0 * xp * xp).exp();
            assert_abs_diff_eq!(joint_quad_pdf(&vac, x, xp, 0.2, 2.0), want, epsilon = 1e-15);
        }
        for p in [nbar10(), TwinBeamParams::from_nbar(3.0, 0.8).unwrap()] {
            for &(x, xp, phi, psi) in &[(0.4, 0.5, 0.0, 0.0), (-1.0, 2.0, 1.0, 2.5), (3.0, -2.5, 4.0, 0.1)] {
                let a = joint_quad_pdf(&p, x, xp, phi, psi);
                let b = joint_quad_pdf_conditional(&p, x, xp, phi, psi);
                assert!((a - b).abs() <= 1e-12 * a.max(1e-300) + 1e-300, "{a} vs {b}");
            }
            // 2-D normalisation
            let rule = Rule::composite_legendre(-25.0, 25.0, 200, 20);
            for &s in &[0.0, 1.0, PI] {
                let total = rule.integrate(|x| rule.integrate(|xp| joint_quad_pdf(&p, x, xp, s, 0.0)));
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn marginal_is_thermal_gaussian() {
        let rule = Rule::composite_legendre(-30.0, 30.0, 300, 20);
        for p in [nbar10(), TwinBeamParams::from_nbar(10.0, 0.8).unwrap(), TwinBeamParams::from_nbar(0.5, 0.6).unwrap()] {
            let var = (2.0 * p.nbar + 1.0) / 4.0 + p.delta2_eta();
            assert_abs_diff_eq!(var, p.single_variance(), epsilon = 1e-14);
            for &s in &[0.0, 0.9, PI, 4.0] {
                for &x in &[0.0, 0.7, -2.2, 4.1] {
                    let marg = rule.integrate(|xp| joint_quad_pdf(&p, x, xp, s, 0.0));
                    assert_abs_diff_eq!(marg, single_quad_pdf(&p, x), epsilon = 1e-8);
                }
            }
        }
        assert_abs_diff_eq!(nbar10().single_variance(), 5.25, epsilon = 1e-14);
        assert_abs_diff_eq!(params_from_nbar(0.0).unwrap().single_variance(), 0.25, epsilon = 1e-15);
        let total = rule.integrate(|x| single_quad_pdf(&nbar10(), x));
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gain_and_weight() {
        let vac = params_from_nbar(0.0).unwrap();
        assert_eq!(gain(&vac, 1.234), 1.0);
        assert_abs_diff_eq!(weight_fn(&vac, 0.3), 1.0 / (2.0 * PI), epsilon = 1e-15);
        let p = nbar10();
        let tau = p.tau;
        assert_abs_diff_eq!(gain(&p, 0.0), 11.0 * (1.0 + tau).powi(2), epsilon = 1e-12);
        assert_abs_diff_eq!(gain(&p, 0.0), 41.976, epsilon = 1e-3);
        assert_abs_diff_eq!(weight_fn(&p, 0.0), 0.003791, epsilon = 1e-6);
        // weighting function is sharply peaked near s = pi; 4096 points make the
        // periodic trapezoid rule exact to rounding
        let n = 4096;
        let integral: f64 = (0..n).map(|i| weight_fn(&p, 2.0 * PI * i as f64 / n as f64)).sum::<f64>() * 2.0 * PI / n as f64;
        assert_abs_diff_eq!(integral, 1.0, epsilon = 1e-12);
        let mean_inv_gain: f64 = (0..n).map(|i| 1.0 / gain(&p, 2.0 * PI * i as f64 / n as f64)).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(mean_inv_gain, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn coherent_baseline_is_broad() {
        let total: f64 = (-40..=40).map(|n| coherent_correlation(10.0, 60, n)).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        assert!(coherent_correlation(10.0, 10, 0) < 0.2);
        assert!(coherent_correlation(10.0, 10, 3) > 0.01);
    }

    #[test]
    fn fock_series_matches_closed_form_small() {
        let p = TwinBeamParams::from_nbar(1.0, 1.0).unwrap();
        let grid = fock_series_pdf_grid(&p, 0.7, -2.0, 2.0, 5);
        for i in 0..5 {
            for j in 0..5 {
                let (x, xp) = (-2.0 + i as f64, -2.0 + j as f64);
                assert_abs_diff_eq!(grid[i * 5 + j], joint_quad_pdf(&p, x, xp, 0.7, 0.0), epsilon = 1e-8);
            }
        }
        let lossy = TwinBeamParams::from_nbar(1.0, 0.8).unwrap();
        let grid = fock_series_pdf_grid(&lossy, 2.0, -2.0, 2.0, 5);
        for i in 0..5 {
            for j in 0..5 {
                let (x, xp) = (-2.0 + i as f64, -2.0 + j as f64);
                assert_abs_diff_eq!(grid[i * 5 + j], joint_quad_pdf(&lossy, x, xp, 2.0, 0.0), epsilon = 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn pdf_depends_on_phase_sum_only(x in -3.0f64..3.0, xp in -3.0f64..3.0, phi in 0.0f64..6.3, psi in 0.0f64..6.3, shift in -3.0f64..3.0) {
            let p = TwinBeamParams::from_nbar(2.5, 0.9).unwrap();
            let a = joint_quad_pdf(&p, x, xp, phi, psi);
            let b = joint_quad_pdf(&p, x, xp, phi + shift, psi - shift);
            prop_assert!((a - b).abs() <= 1e-14 * a.max(1.0));
        }
    }
}
