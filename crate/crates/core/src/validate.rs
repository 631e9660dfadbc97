//! Built-in deterministic oracle checks.
//!
//! None of these draw random numbers. Each compares two independent routes
//! to the same quantity and reports the largest deviation against a fixed
//! tolerance.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{gaussian_dress, loss_dress, noise_photons, FockDensityMatrix};
use crate::fockmath::{hermite_functions, FockIndex};
use crate::kernel::{KernelQuadrature, KernelSpec, KernelTable, PairSet, XGrid};
use crate::nopa::{fock_series_pdf_grid, joint_quad_pdf, TwinBeamParams};
use crate::quadrature::Rule;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, max_error: f64, tolerance: f64) -> Self {
        CheckResult { name: name.into(), max_error, tolerance, passed: max_error <= tolerance }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Kernel orders checked by the completeness suite.
pub const COMPLETENESS_NMAX: FockIndex = 8;
pub const COMPLETENESS_ETAS: [f64; 3] = [1.0, 0.9, 0.8];

/// Tolerance of the completeness identity at efficiency `eta`.
pub fn completeness_tolerance(eta: f64) -> f64 {
    if eta == 1.0 {
        1e-5
    } else {
        1e-4
    }
}

/// Closed-form joint density against the squared Fock series, on a 21x21
/// grid over `[-3, 3]^2`, for `nbar` in {1, 10} and `eta` in {1, 0.8}.
pub fn fock_series_oracle() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for nbar in [1.0, 10.0] {
        for eta in [1.0, 0.8] {
            let p = TwinBeamParams::from_nbar(nbar, eta)?;
            let mut worst: f64 = 0.0;
            for phase_sum in [0.0, 1.1, PI] {
                let (lo, hi, pts) = (-3.0, 3.0, 21);
                let grid = fock_series_pdf_grid(&p, phase_sum, lo, hi, pts);
                let step = (hi - lo) / (pts - 1) as f64;
                for i in 0..pts {
                    for j in 0..pts {
                        let (x, xp) = (lo + i as f64 * step, lo + j as f64 * step);
                        worst = worst.max((grid[i * pts + j] - joint_quad_pdf(&p, x, xp, phase_sum, 0.0)).abs());
                    }
                }
            }
            out.push(CheckResult::new(format!("joint pdf vs Fock series (nbar={nbar}, eta={eta})"), worst, 1e-8));
        }
    }
    Ok(out)
}

/// Nonzero entries `(n, m, rho_nm)` with `n >= m`.
fn entries(rho: &FockDensityMatrix) -> Vec<(usize, usize, Complex64)> {
    let mut out = Vec::new();
    for n in 0..rho.dim() {
        for m in 0..=n {
            let v = rho.get(n, m);
            if v.norm() > 0.0 {
                out.push((n, m, v));
            }
        }
    }
    out
}

fn pdf_from_entries(entries: &[(usize, usize, Complex64)], psi: &[f64], phi: f64) -> f64 {
    let mut acc = 0.0;
    for &(n, m, v) in entries {
        let t = psi[n] * psi[m];
        if n == m {
            acc += v.re * t;
        } else {
            acc += 2.0 * (v * Complex64::from_polar(1.0, -((n - m) as f64) * phi)).re * t;
        }
    }
    acc
}

/// Average the efficiency-`eta` kernels against the exact, detector-smeared
/// quadrature density of `rho`, by deterministic quadrature, and return the
/// reconstructed `rho_nm` for `n, m <= nmax`, row-major.
///
/// Phases use an exact trapezoid rule; `x` uses composite Gauss-Legendre on
/// `[-12, 12]`; the detector Gaussian is applied by Gauss-Hermite convolution.
pub fn kernel_average(rho: &FockDensityMatrix, eta: f64, nmax: FockIndex) -> Result<Vec<Complex64>> {
    if rho.arity() != 1 {
        return Err(Error::ArityMismatch { expected: 1, found: rho.arity() });
    }
    let spec = KernelSpec::new(eta, nmax)?;
    let quad = KernelQuadrature::new(spec, PairSet::All)?;
    let ent = entries(rho);
    let band = ent.iter().map(|&(n, m, _)| n - m).max().unwrap_or(0);
    let n_phi = 2 * (nmax + band) + 2;
    let phis: Vec<f64> = (0..n_phi).map(|j| 2.0 * PI * j as f64 / n_phi as f64).collect();
    let xs = Rule::composite_legendre(-12.0, 12.0, 60, 24);
    let smear = if eta < 1.0 { Some(Rule::hermite(48)) } else { None };
    let sd = (2.0 * crate::nopa::delta2_eta(eta)).sqrt();

    let dim = nmax + 1;
    let partial: Vec<Vec<Complex64>> = xs
        .nodes
        .par_iter()
        .zip(&xs.weights)
        .map(|(&x, &wx)| {
            // density at (x, phi) for every phi
            let mut dens = vec![0.0; n_phi];
            match &smear {
                None => {
                    let psi = hermite_functions(rho.nmax(), x);
                    for (d, &phi) in dens.iter_mut().zip(&phis) {
                        *d = pdf_from_entries(&ent, &psi, phi);
                    }
                }
                Some(gh) => {
                    for (&t, &wt) in gh.nodes.iter().zip(&gh.weights) {
                        let psi = hermite_functions(rho.nmax(), x - sd * t);
                        for (d, &phi) in dens.iter_mut().zip(&phis) {
                            *d += wt / PI.sqrt() * pdf_from_entries(&ent, &psi, phi);
                        }
                    }
                }
            }
            let mut base = vec![0.0; quad.pairs().len()];
            quad.eval(x, &mut base, None);
            let mut out = vec![Complex64::new(0.0, 0.0); dim * dim];
            for (p, &(n, m)) in quad.pairs().iter().enumerate() {
                // phase average of e^{i(n-m)phi} p(x, phi)
                let d = (n - m) as f64;
                let avg: Complex64 = dens
                    .iter()
                    .zip(&phis)
                    .map(|(&v, &phi)| Complex64::from_polar(v, d * phi))
                    .sum::<Complex64>()
                    / n_phi as f64;
                let v = avg * (wx * base[p]);
                out[n * dim + m] = v;
                if n != m {
                    // K(m, n) = e^{-i(n-m)phi} base, averaged against a real density
                    out[m * dim + n] = v.conj();
                }
            }
            out
        })
        .collect();
    let mut total = vec![Complex64::new(0.0, 0.0); dim * dim];
    for p in &partial {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    Ok(total)
}

/// Largest `|kernel_average - rho|` over `n, m <= nmax`.
pub fn completeness_error(rho: &FockDensityMatrix, eta: f64, nmax: FockIndex) -> Result<f64> {
    let got = kernel_average(rho, eta, nmax)?;
    let dim = nmax + 1;
    let mut worst: f64 = 0.0;
    for n in 0..dim {
        for m in 0..dim {
            worst = worst.max((got[n * dim + m] - rho.get(n, m)).norm());
        }
    }
    Ok(worst)
}

/// Test states of the completeness suite: vacuum, `|1>` and thermal(3),
/// each truncated with trace defect below 1e-12.
pub fn completeness_states() -> Result<Vec<(String, FockDensityMatrix)>> {
    Ok(vec![
        ("vacuum".into(), FockDensityMatrix::vacuum(COMPLETENESS_NMAX)),
        ("fock1".into(), FockDensityMatrix::fock(1, COMPLETENESS_NMAX)?),
        ("thermal3".into(), FockDensityMatrix::thermal(3.0, 100)?),
    ])
}

pub fn kernel_completeness(etas: &[f64]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &eta in etas {
        for (name, rho) in completeness_states()? {
            let err = completeness_error(&rho, eta, COMPLETENESS_NMAX)?;
            out.push(CheckResult::new(format!("kernel completeness {name} (eta={eta})"), err, completeness_tolerance(eta)));
        }
    }
    Ok(out)
}

/// Phase convention: a coherent state with complex amplitude must come back
/// with the right off-diagonal phases.
pub fn coherent_phase_sign() -> Result<CheckResult> {
    let rho = FockDensityMatrix::coherent(Complex64::from_polar(0.9, 0.7), 40);
    let err = completeness_error(&rho, 1.0, 6)?;
    Ok(CheckResult::new("coherent-state phase convention (eta=1)", err, 1e-5))
}

/// Deterministic two-mode estimator: average `K(n1, n2, x, phi) K(m1, m2, x', psi)`
/// against the exact joint density of the twin beam (unit efficiency) and
/// return the largest deviation from the analytic matrix over indices
/// `<= nmax`.
///
/// The density depends on the phases only through `s = phi + psi`, so the
/// average over the phase difference selects `n1 - n2 = m1 - m2` and the
/// remaining `s` integral is a trapezoid sum.
pub fn twin_beam_kernel_average(nbar: f64, nmax: FockIndex) -> Result<f64> {
    let p = TwinBeamParams::from_nbar(nbar, 1.0)?;
    let spec = KernelSpec::new(1.0, nmax)?;
    let quad = KernelQuadrature::new(spec, PairSet::All)?;
    let pairs = quad.pairs().to_vec();
    let np = pairs.len();
    let half = 3.0 * (1.0 + 2.0 * nbar).sqrt() + 4.0;
    let xs = Rule::composite_legendre(-half, half, 16, 24);
    let nx = xs.len();
    // weighted base values, [node * np + pair]
    let mut bw = vec![0.0; nx * np];
    let mut vals = vec![0.0; np];
    for (i, (&x, &w)) in xs.nodes.iter().zip(&xs.weights).enumerate() {
        quad.eval(x, &mut vals, None);
        for (j, v) in vals.iter().enumerate() {
            bw[i * np + j] = w * v;
        }
    }
    let n_s = 160;
    // G[s][p1][p2] = sum_{x, x'} p(x, x'; s) b_p1(x) b_p2(x')
    let gs: Vec<Vec<f64>> = (0..n_s)
        .into_par_iter()
        .map(|k| {
            let s = 2.0 * PI * k as f64 / n_s as f64;
            let mut tmp = vec![0.0; nx * np];
            for i in 0..nx {
                for j in 0..nx {
                    let d = joint_quad_pdf(&p, xs.nodes[i], xs.nodes[j], s, 0.0);
                    let row = &bw[j * np..(j + 1) * np];
                    let t = &mut tmp[i * np..(i + 1) * np];
                    for (a, b) in t.iter_mut().zip(row) {
                        *a += d * b;
                    }
                }
            }
            let mut g = vec![0.0; np * np];
            for i in 0..nx {
                for p1 in 0..np {
                    let b1 = bw[i * np + p1];
                    for p2 in 0..np {
                        g[p1 * np + p2] += b1 * tmp[i * np + p2];
                    }
                }
            }
            g
        })
        .collect();
    let index = |n: usize, m: usize| pairs.iter().position(|&(a, b)| a == n.max(m) && b == n.min(m)).expect("pair");
    let dim = nmax + 1;
    let mut worst: f64 = 0.0;
    for n1 in 0..dim {
        for m1 in 0..dim {
            for n2 in 0..dim {
                for m2 in 0..dim {
                    let a = n1 as i64 - n2 as i64;
                    let exact = if n1 == m1 && n2 == m2 { (1.0 - p.ratio()) * p.tau.powi((n1 + n2) as i32) } else { 0.0 };
                    let got = if a != m1 as i64 - m2 as i64 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        let (p1, p2) = (index(n1, n2), index(m1, m2));
                        gs.iter()
                            .enumerate()
                            .map(|(k, g)| Complex64::from_polar(g[p1 * np + p2], a as f64 * 2.0 * PI * k as f64 / n_s as f64))
                            .sum::<Complex64>()
                            / n_s as f64
                    };
                    worst = worst.max((got - exact).norm());
                }
            }
        }
    }
    Ok(worst)
}

fn max_diff(a: &FockDensityMatrix, b: &FockDensityMatrix) -> f64 {
    a.elements().iter().zip(b.elements()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn channel_identities() -> Result<Vec<CheckResult>> {
    let nmax = 30;
    let mut out = Vec::new();

    let thermal = FockDensityMatrix::thermal(2.0, nmax)?;
    let (dressed, factor) = gaussian_dress(&thermal, 0.8)?;
    let expect = FockDensityMatrix::thermal(2.0 + noise_photons(0.8), nmax)?;
    out.push(CheckResult::new("gaussian noise: thermal(2) -> thermal(2 + m)", max_diff(&dressed, &expect), 1e-6));
    out.push(CheckResult::new("gaussian noise: renormalisation factor", (factor - 1.0).abs(), 1e-6));

    // loss pulls mass down from above the cutoff, so start from a longer tail
    let lost = loss_dress(&FockDensityMatrix::thermal(2.0, 120)?, 0.7)?.resized(nmax);
    let expect = FockDensityMatrix::thermal(1.4, nmax)?;
    out.push(CheckResult::new("loss: thermal(2) -> thermal(1.4)", max_diff(&lost, &expect), 1e-8));

    let coh = FockDensityMatrix::coherent(Complex64::new(0.6, -0.8), nmax);
    let twice = loss_dress(&loss_dress(&coh, 0.9)?, 0.6)?;
    let once = loss_dress(&coh, 0.54)?;
    out.push(CheckResult::new("loss: composition", max_diff(&twice, &once), 1e-8));

    let fock1 = FockDensityMatrix::fock(1, nmax)?;
    let (g1, _) = gaussian_dress(&fock1, 0.85)?;
    let l1 = loss_dress(&fock1, 0.85)?;
    let trace_err = (g1.trace() - 1.0).abs().max((l1.trace() - 1.0).abs());
    out.push(CheckResult::new("channels preserve trace", trace_err, 1e-8));
    let herm = g1.hermiticity_defect().max(l1.hermiticity_defect());
    out.push(CheckResult::new("channels preserve hermiticity", herm, 0.0));
    let neg = (-g1.min_eigenvalue()).max(-l1.min_eigenvalue()).max(0.0);
    out.push(CheckResult::new("channels preserve positivity", neg, 1e-9));
    Ok(out)
}

/// The kernel must refuse efficiencies at or below one half.
pub fn eta_guard(eta: f64) -> CheckResult {
    let rejected = matches!(KernelSpec::new(eta, 4), Err(Error::EtaBelowBound { .. }));
    CheckResult::new(format!("eta={eta} rejected by the kernel bound"), if rejected { 0.0 } else { 1.0 }, 0.0)
}

/// Build (or load) a cached kernel table and compare it with direct evaluation.
pub fn kernel_table_check(cache_dir: Option<&Path>) -> Result<CheckResult> {
    let spec = KernelSpec::new(0.9, 8)?;
    let table = KernelTable::build_cached(spec, PairSet::All, XGrid::covering(-4.0, 4.0, 0.004)?, cache_dir)?;
    let n = table.pairs().len();
    let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
    let mut worst: f64 = 0.0;
    for i in 0..97 {
        let x = -3.9 + 0.0813 * i as f64;
        table.eval_into(x, &mut a);
        table.eval_direct(x, &mut b);
        worst = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(worst, f64::max);
    }
    Ok(CheckResult::new("kernel table vs direct evaluation", worst, 1e-6))
}

/// Everything `validate` runs, in report order.
pub fn run_all(kernel_etas: &[f64], cache_dir: Option<&Path>) -> Result<ValidationReport> {
    for &eta in kernel_etas {
        KernelSpec::new(eta, COMPLETENESS_NMAX)?;
    }
    let mut checks = fock_series_oracle()?;
    checks.extend(kernel_completeness(kernel_etas)?);
    checks.push(coherent_phase_sign()?);
    checks.push(CheckResult::new("twin-beam kernel average (nbar=1, n,m<=6)", twin_beam_kernel_average(1.0, 6)?, 1e-5));
    checks.extend(channel_identities()?);
    checks.push(eta_guard(0.4));
    checks.push(eta_guard(0.5));
    checks.push(kernel_table_check(cache_dir)?);
    Ok(ValidationReport { checks })
}
