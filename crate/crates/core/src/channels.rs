//! Fock-basis dressing channels: additive Gaussian noise `Gamma_eta` and
//! photon loss `Lambda_eta`.
//!
//! `Gamma_eta(rho) = 1/(pi mbar) int d^2w e^{-|w|^2/mbar} D(w) rho D(w)^dag`
//! with `mbar = (1 - eta) / (2 eta)`. The angular integral is done exactly
//! (only elements with `a - b = c - d` couple), the radial one by
//! Gauss-Laguerre, which is exact for the polynomial integrand.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::fockmath::{laguerre_assoc_all, log_factorial, FockIndex};
use crate::nopa::TwinBeamParams;
use crate::quadrature::Rule;
use crate::{Error, Result};

/// Extra Fock levels carried internally by [`gaussian_dress`].
pub const INFLATION: usize = 16;
/// Allowed deviation of the trace-renormalisation factor from 1.
pub const RENORM_TOLERANCE: f64 = 1e-6;

const LOSS_TERM_TOLERANCE: f64 = 1e-14;

/// A one- or two-mode density matrix truncated at `nmax` photons per mode.
///
/// Two-mode elements `<n1, n2|R|m1, m2>` sit at row `n1 * dim + n2`, column
/// `m1 * dim + m2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FockDensityMatrix {
    arity: u8,
    nmax: FockIndex,
    elements: Vec<Complex64>,
}

impl FockDensityMatrix {
    /// Row-major elements; length `side()^2`.
    pub fn from_elements(arity: u8, nmax: FockIndex, elements: Vec<Complex64>) -> Result<Self> {
        if arity != 1 && arity != 2 {
            return Err(Error::InvalidParameter(format!("arity must be 1 or 2, got {arity}")));
        }
        let side = (nmax + 1).pow(arity as u32);
        if elements.len() != side * side {
            return Err(Error::InvalidParameter(format!("expected {} elements, got {}", side * side, elements.len())));
        }
        Ok(FockDensityMatrix { arity, nmax, elements })
    }

    fn zeros(arity: u8, nmax: FockIndex) -> Self {
        let side = (nmax + 1).pow(arity as u32);
        FockDensityMatrix { arity, nmax, elements: vec![Complex64::new(0.0, 0.0); side * side] }
    }

    pub fn vacuum(nmax: FockIndex) -> Self {
        Self::fock(0, nmax).expect("0 <= nmax")
    }

    pub fn fock(n: FockIndex, nmax: FockIndex) -> Result<Self> {
        if n > nmax {
            return Err(Error::OutOfRange(format!("Fock state {n} beyond nmax = {nmax}")));
        }
        let mut rho = Self::zeros(1, nmax);
        rho.set(n, n, Complex64::new(1.0, 0.0));
        Ok(rho)
    }

    /// Thermal state `nbar^n / (nbar + 1)^{n+1}`, truncated (not renormalised).
    pub fn thermal(nbar: f64, nmax: FockIndex) -> Result<Self> {
        if !(nbar.is_finite() && nbar >= 0.0) {
            return Err(Error::InvalidParameter(format!("nbar must be >= 0, got {nbar}")));
        }
        let mut rho = Self::zeros(1, nmax);
        let q = nbar / (nbar + 1.0);
        for n in 0..=nmax {
            rho.set(n, n, Complex64::new(q.powi(n as i32) / (nbar + 1.0), 0.0));
        }
        Ok(rho)
    }

    /// Coherent state `|alpha>`, truncated.
    pub fn coherent(alpha: Complex64, nmax: FockIndex) -> Self {
        let amp: Vec<Complex64> = (0..=nmax)
            .map(|n| {
                let mag = (-0.5 * alpha.norm_sqr() - 0.5 * log_factorial(n as u64)).exp();
                alpha.powu(n as u32) * mag
            })
            .collect();
        let mut rho = Self::zeros(1, nmax);
        for n in 0..=nmax {
            for m in 0..=nmax {
                rho.set(n, m, amp[n] * amp[m].conj());
            }
        }
        rho
    }

    /// Truncated twin-beam state `sqrt(1 - tau^2) sum_n tau^n |n, n>`.
    pub fn twin_beam(params: &TwinBeamParams, nmax: FockIndex) -> Self {
        let dim = nmax + 1;
        let mut rho = Self::zeros(2, nmax);
        let amp: Vec<f64> = (0..dim).map(|n| (1.0 - params.ratio()).sqrt() * params.tau.powi(n as i32)).collect();
        for k in 0..dim {
            for l in 0..dim {
                rho.set2(k, k, l, l, Complex64::new(amp[k] * amp[l], 0.0));
            }
        }
        rho
    }

    pub fn arity(&self) -> u8 {
        self.arity
    }

    pub fn nmax(&self) -> FockIndex {
        self.nmax
    }

    pub fn dim(&self) -> usize {
        self.nmax + 1
    }

    /// Matrix side, `dim^arity`.
    pub fn side(&self) -> usize {
        self.dim().pow(self.arity as u32)
    }

    pub fn elements(&self) -> &[Complex64] {
        &self.elements
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.elements[row * self.side() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: Complex64) {
        let side = self.side();
        self.elements[row * side + col] = v;
    }

    /// `<n1, n2|R|m1, m2>`.
    pub fn get2(&self, n1: FockIndex, n2: FockIndex, m1: FockIndex, m2: FockIndex) -> Complex64 {
        let d = self.dim();
        self.get(n1 * d + n2, m1 * d + m2)
    }

    pub fn set2(&mut self, n1: FockIndex, n2: FockIndex, m1: FockIndex, m2: FockIndex, v: Complex64) {
        let d = self.dim();
        self.set(n1 * d + n2, m1 * d + m2, v);
    }

    pub fn trace(&self) -> f64 {
        (0..self.side()).map(|i| self.get(i, i).re).sum()
    }

    /// Largest `|R_ij - conj(R_ji)|`.
    pub fn hermiticity_defect(&self) -> f64 {
        let s = self.side();
        let mut worst: f64 = 0.0;
        for i in 0..s {
            for j in i..s {
                worst = worst.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let s = self.side();
        let m = DMatrix::from_fn(s, s, |i, j| 0.5 * (self.get(i, j) + self.get(j, i).conj()));
        m.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Photon-number distribution: `rho_nn` (arity 1) or `p(n, m) = <n, m|R|n, m>`
    /// row-major over `(n, m)` (arity 2).
    pub fn number_distribution(&self) -> Vec<f64> {
        (0..self.side()).map(|i| self.get(i, i).re).collect()
    }

    /// Embed into or crop to a new truncation.
    pub fn resized(&self, nmax: FockIndex) -> Self {
        let mut out = Self::zeros(self.arity, nmax);
        let keep = self.nmax.min(nmax) + 1;
        match self.arity {
            1 => {
                for n in 0..keep {
                    for m in 0..keep {
                        out.set(n, m, self.get(n, m));
                    }
                }
            }
            _ => {
                for n1 in 0..keep {
                    for n2 in 0..keep {
                        for m1 in 0..keep {
                            for m2 in 0..keep {
                                out.set2(n1, n2, m1, m2, self.get2(n1, n2, m1, m2));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Quadrature density `<x_phi|rho|x_phi> = sum rho_nm e^{-i (n - m) phi} psi_n psi_m`
    /// of a single-mode matrix.
    pub fn quadrature_pdf(&self, x: f64, phi: f64) -> f64 {
        debug_assert_eq!(self.arity, 1);
        let psi = crate::fockmath::hermite_functions(self.nmax, x);
        let mut acc = 0.0;
        for n in 0..self.dim() {
            acc += self.get(n, n).re * psi[n] * psi[n];
            for m in 0..n {
                let rot = Complex64::from_polar(1.0, -((n - m) as f64) * phi);
                acc += 2.0 * (self.get(n, m) * rot).re * psi[n] * psi[m];
            }
        }
        acc
    }

    /// Apply a linear single-mode map to every mode-A slice (`mode == 0`) or
    /// mode-B slice (`mode == 1`) of a two-mode matrix.
    fn map_mode(&self, mode: usize, f: &dyn Fn(&[Complex64]) -> Vec<Complex64>) -> Self {
        let d = self.dim();
        let mut out = Self::zeros(2, self.nmax);
        let mut slice = vec![Complex64::new(0.0, 0.0); d * d];
        for s in 0..d {
            for t in 0..d {
                // spectator indices (s, t); active indices (a, b)
                for a in 0..d {
                    for b in 0..d {
                        slice[a * d + b] = if mode == 0 { self.get2(a, s, b, t) } else { self.get2(s, a, t, b) };
                    }
                }
                let mapped = f(&slice);
                for a in 0..d {
                    for b in 0..d {
                        let v = mapped[a * d + b];
                        if mode == 0 {
                            out.set2(a, s, b, t, v);
                        } else {
                            out.set2(s, a, t, b, v);
                        }
                    }
                }
            }
        }
        out
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta.is_finite() && eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidParameter(format!("channel efficiency must lie in (0, 1], got {eta}")));
    }
    Ok(())
}

/// Noise-equivalent thermal photon number `(1 - eta) / (2 eta)`.
pub fn noise_photons(eta: f64) -> f64 {
    (1.0 - eta) / (2.0 * eta)
}

/// Superoperator of `Gamma_eta` on a `dim`-level space: coefficient
/// `t[(s + dim - 1) * dim^2 + a * dim + c]` couples `rho_{c, c+s}` to
/// `out_{a, a+s}`.
struct GaussianSuperop {
    dim: usize,
    t: Vec<f64>,
}

impl GaussianSuperop {
    fn new(dim: usize, eta: f64) -> Self {
        let mbar = noise_photons(eta);
        let rule = Rule::laguerre(2 * dim + 10);
        let scale = mbar / (1.0 + mbar);
        let mut t = vec![0.0; (2 * dim - 1) * dim * dim];
        for (&v, &w) in rule.nodes.iter().zip(&rule.weights) {
            let p = stripped_displacement(dim, v * scale);
            let w = w / (1.0 + mbar);
            for s in -(dim as isize - 1)..dim as isize {
                let base = (s + dim as isize - 1) as usize * dim * dim;
                for a in 0..dim {
                    let b = a as isize + s;
                    if b < 0 || b >= dim as isize {
                        continue;
                    }
                    let b = b as usize;
                    for c in 0..dim {
                        let d = c as isize + s;
                        if d < 0 || d >= dim as isize {
                            continue;
                        }
                        t[base + a * dim + c] += w * p[a * dim + c] * p[b * dim + d as usize];
                    }
                }
            }
        }
        GaussianSuperop { dim, t }
    }

    fn apply(&self, rho: &[Complex64]) -> Vec<Complex64> {
        let dim = self.dim;
        let mut out = vec![Complex64::new(0.0, 0.0); dim * dim];
        for s in -(dim as isize - 1)..dim as isize {
            let base = (s + dim as isize - 1) as usize * dim * dim;
            let (lo, hi) = if s >= 0 { (0, dim - s as usize) } else { ((-s) as usize, dim) };
            for a in lo..hi {
                let b = (a as isize + s) as usize;
                let mut acc = Complex64::new(0.0, 0.0);
                for c in lo..hi {
                    acc += rho[c * dim + (c as isize + s) as usize] * self.t[base + a * dim + c];
                }
                out[a * dim + b] = acc;
            }
        }
        out
    }
}

/// `<a|D(r)|c> e^{r^2/2}` for real `r = sqrt(u)`, row-major.
fn stripped_displacement(dim: usize, u: f64) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    let ln_r = 0.5 * u.ln();
    for d in 0..dim {
        let lags = laguerre_assoc_all(dim - 1 - d, d, u);
        for (m, lag) in lags.iter().enumerate() {
            let n = m + d;
            let val = if d == 0 {
                *lag
            } else if u == 0.0 {
                0.0
            } else {
                (0.5 * (log_factorial(m as u64) - log_factorial(n as u64)) + d as f64 * ln_r).exp() * lag
            };
            out[n * dim + m] = val;
            out[m * dim + n] = if d % 2 == 1 { -val } else { val };
        }
    }
    out
}

/// `Gamma_eta(rho)` for a single-mode matrix, with the trace-renormalisation
/// factor applied to the internal result.
///
/// The map is evaluated on `nmax + INFLATION` levels and cropped.
pub fn gaussian_dress(rho: &FockDensityMatrix, eta: f64) -> Result<(FockDensityMatrix, f64)> {
    check_eta(eta)?;
    if rho.arity != 1 {
        return Err(Error::ArityMismatch { expected: 1, found: rho.arity });
    }
    if eta == 1.0 {
        return Ok((rho.clone(), 1.0));
    }
    let big = rho.resized(rho.nmax + INFLATION);
    let op = GaussianSuperop::new(big.dim(), eta);
    let out = FockDensityMatrix { arity: 1, nmax: big.nmax, elements: op.apply(&big.elements) };
    let factor = renormalisation(big.trace(), out.trace())?;
    let mut cropped = out.resized(rho.nmax);
    cropped.elements.iter_mut().for_each(|v| *v *= factor);
    Ok((cropped, factor))
}

fn renormalisation(before: f64, after: f64) -> Result<f64> {
    if before == 0.0 {
        return Ok(1.0);
    }
    let factor = before / after;
    if !((factor - 1.0).abs() <= RENORM_TOLERANCE) {
        return Err(Error::Numerical(format!("dressing renormalisation factor {factor} is not within 1e-6 of 1")));
    }
    Ok(factor)
}

/// `Lambda_eta(rho)_{ab} = sum_k sqrt(C(a+k, k) C(b+k, k)) eta^{(a+b)/2} (1-eta)^k rho_{a+k, b+k}`.
pub fn loss_dress(rho: &FockDensityMatrix, eta: f64) -> Result<FockDensityMatrix> {
    check_eta(eta)?;
    if rho.arity != 1 {
        return Err(Error::ArityMismatch { expected: 1, found: rho.arity });
    }
    Ok(FockDensityMatrix { arity: 1, nmax: rho.nmax, elements: loss_map(rho.dim(), &rho.elements, eta) })
}

fn loss_map(dim: usize, rho: &[Complex64], eta: f64) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); dim * dim];
    if eta == 1.0 {
        out.copy_from_slice(rho);
        return out;
    }
    let ln_eta = eta.ln();
    let ln_loss = (1.0 - eta).ln();
    // mass still to be moved by higher terms bounds their contribution
    let mut tail: f64 = (0..dim).map(|n| rho[n * dim + n].norm()).sum();
    for k in 0..dim {
        let mut norm2 = 0.0;
        for a in 0..dim - k {
            for b in 0..dim - k {
                let ln_c = 0.5
                    * (log_factorial((a + k) as u64) - log_factorial(a as u64) + log_factorial((b + k) as u64)
                        - log_factorial(b as u64))
                    - log_factorial(k as u64);
                let ln_w = ln_c + 0.5 * (a + b) as f64 * ln_eta + k as f64 * ln_loss;
                let term = rho[(a + k) * dim + b + k] * ln_w.exp();
                norm2 += term.norm_sqr();
                out[a * dim + b] += term;
            }
        }
        tail -= rho[k * dim + k].norm();
        if norm2.sqrt() < LOSS_TERM_TOLERANCE && tail < LOSS_TERM_TOLERANCE {
            break;
        }
    }
    out
}

/// The two dressing channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    GaussianNoise,
    Loss,
}

/// Apply `channel` to each mode of a two-mode matrix. Returns the product of
/// the per-mode renormalisation factors (1 for loss).
pub fn apply_per_mode(r: &FockDensityMatrix, channel: Channel, eta: f64) -> Result<(FockDensityMatrix, f64)> {
    check_eta(eta)?;
    if r.arity != 2 {
        return Err(Error::ArityMismatch { expected: 2, found: r.arity });
    }
    if eta == 1.0 {
        return Ok((r.clone(), 1.0));
    }
    match channel {
        Channel::Loss => {
            let d = r.dim();
            let f = |s: &[Complex64]| loss_map(d, s, eta);
            Ok((r.map_mode(0, &f).map_mode(1, &f), 1.0))
        }
        Channel::GaussianNoise => {
            let big = r.resized(r.nmax + INFLATION);
            let op = GaussianSuperop::new(big.dim(), eta);
            let f = |s: &[Complex64]| op.apply(s);
            let out = big.map_mode(0, &f).map_mode(1, &f);
            let factor = renormalisation(big.trace(), out.trace())?;
            let mut cropped = out.resized(r.nmax);
            cropped.elements.iter_mut().for_each(|v| *v *= factor);
            Ok((cropped, factor))
        }
    }
}

/// `T[n * (kmax + 1) + k] = <n|channel(|k><k|)|n>` for `n <= nmax`, `k <= kmax`.
///
/// Phase-insensitive channels map diagonal inputs to diagonal outputs, so
/// this matrix is all a photon-number oracle needs.
pub fn diagonal_transfer(channel: Channel, eta: f64, nmax: FockIndex, kmax: FockIndex) -> Result<Vec<f64>> {
    check_eta(eta)?;
    let kd = kmax + 1;
    let mut t = vec![0.0; (nmax + 1) * kd];
    if eta == 1.0 {
        for n in 0..=nmax.min(kmax) {
            t[n * kd + n] = 1.0;
        }
        return Ok(t);
    }
    match channel {
        Channel::Loss => {
            for n in 0..=nmax.min(kmax) {
                for k in n..=kmax {
                    let ln_c = log_factorial(k as u64) - log_factorial(n as u64) - log_factorial((k - n) as u64);
                    t[n * kd + k] = (ln_c + n as f64 * eta.ln() + (k - n) as f64 * (1.0 - eta).ln()).exp();
                }
            }
        }
        Channel::GaussianNoise => {
            let dim = nmax.max(kmax) + 1;
            let mbar = noise_photons(eta);
            let rule = Rule::laguerre(dim + 10);
            let scale = mbar / (1.0 + mbar);
            for (&v, &w) in rule.nodes.iter().zip(&rule.weights) {
                let p = stripped_displacement(dim, v * scale);
                for n in 0..=nmax {
                    for k in 0..=kmax {
                        let e = p[n * dim + k];
                        t[n * kd + k] += w / (1.0 + mbar) * e * e;
                    }
                }
            }
        }
    }
    Ok(t)
}

/// Joint photon-number distribution `p(n, m)`, `n, m <= nmax`, of the twin
/// beam after `channel` on both modes. The input is truncated where
/// `tau^{2k} < 1e-16`.
pub fn dressed_twin_beam_joint(params: &TwinBeamParams, channel: Channel, eta: f64, nmax: FockIndex) -> Result<Vec<f64>> {
    let kmax = crate::nopa::fock_truncation(params, 1e-16).max(nmax);
    let t = diagonal_transfer(channel, eta, nmax, kmax)?;
    let kd = kmax + 1;
    let dim = nmax + 1;
    let mut p = vec![0.0; dim * dim];
    for k in 0..kd {
        let weight = crate::nopa::joint_photon_pdf(params, k, k);
        if weight == 0.0 {
            continue;
        }
        for n in 0..dim {
            let tn = t[n * kd + k];
            for m in 0..dim {
                p[n * dim + m] += weight * tn * t[m * kd + k];
            }
        }
    }
    Ok(p)
}
