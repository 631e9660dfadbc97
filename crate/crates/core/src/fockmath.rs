//! Special functions and Fock-space operator matrix elements.
//!
//! All factorial ratios are evaluated in log space so that photon numbers up
//! to a few hundred stay finite. Hermite functions and Laguerre polynomials
//! use upward three-term recurrences.

use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;

/// Complex amplitude `w` of a displacement `D(w) = exp(w a^dag - w* a)`.
pub type ComplexAmplitude = Complex64;

/// Photon number.
pub type FockIndex = usize;

const LOG_FACTORIAL_TABLE: usize = 10_001;

fn log_factorial_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = Vec::with_capacity(LOG_FACTORIAL_TABLE);
        let mut acc = 0.0_f64;
        table.push(0.0);
        for k in 1..LOG_FACTORIAL_TABLE {
            acc += (k as f64).ln();
            table.push(acc);
        }
        table
    })
}

/// `ln(n!)`.
///
/// Tabulated by direct summation up to 10^4, Stirling series beyond.
pub fn log_factorial(n: u64) -> f64 {
    let table = log_factorial_table();
    if (n as usize) < table.len() {
        return table[n as usize];
    }
    let x = n as f64 + 1.0;
    // ln Gamma(x) for large x
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)))
}

/// Associated Laguerre polynomial `L_degree^(order)(x)`.
pub fn laguerre_assoc(degree: usize, order: usize, x: f64) -> f64 {
    let alpha = order as f64;
    let mut prev = 1.0;
    if degree == 0 {
        return prev;
    }
    let mut cur = 1.0 + alpha - x;
    for k in 1..degree {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0 + alpha - x) * cur - (kf + alpha) * prev) / (kf + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// `L_k^(order)(x)` for every `k` in `0..=max_degree`.
pub fn laguerre_assoc_all(max_degree: usize, order: usize, x: f64) -> Vec<f64> {
    let alpha = order as f64;
    let mut out = Vec::with_capacity(max_degree + 1);
    out.push(1.0);
    if max_degree == 0 {
        return out;
    }
    out.push(1.0 + alpha - x);
    for k in 1..max_degree {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0 + alpha - x) * out[k] - (kf + alpha) * out[k - 1]) / (kf + 1.0);
        out.push(next);
    }
    out
}

/// `<n|D(w)|m>`.
///
/// For `n >= m` this is `sqrt(m!/n!) w^(n-m) e^{-|w|^2/2} L_m^(n-m)(|w|^2)`;
/// the other triangle follows from `<n|D(w)|m> = conj(<m|D(-w)|n>)`.
pub fn displacement_matrix_element(n: FockIndex, m: FockIndex, w: ComplexAmplitude) -> ComplexAmplitude {
    if n >= m {
        displacement_lower(n, m, w)
    } else {
        displacement_lower(m, n, -w).conj()
    }
}

fn displacement_lower(n: usize, m: usize, w: Complex64) -> Complex64 {
    let r2 = w.norm_sqr();
    let d = n - m;
    let lag = laguerre_assoc(m, d, r2);
    if d == 0 {
        return Complex64::new((-0.5 * r2).exp() * lag, 0.0);
    }
    if r2 == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let log_mag = 0.5 * (log_factorial(m as u64) - log_factorial(n as u64)) + 0.5 * d as f64 * r2.ln() - 0.5 * r2;
    Complex64::from_polar(log_mag.exp() * lag, d as f64 * w.arg())
}

/// `<n|D(r)|m>` for real `r`, all `n, m <= nmax`, as a row-major real matrix.
pub fn displacement_matrix_real(nmax: usize, r: f64) -> Vec<f64> {
    let dim = nmax + 1;
    let mut out = vec![0.0; dim * dim];
    let r2 = r * r;
    let gauss = (-0.5 * r2).exp();
    for d in 0..dim {
        let lags = laguerre_assoc_all(nmax - d, d, r2);
        for (m, lag) in lags.iter().enumerate() {
            let n = m + d;
            let val = if d == 0 {
                gauss * lag
            } else if r == 0.0 {
                0.0
            } else {
                let log_mag = 0.5 * (log_factorial(m as u64) - log_factorial(n as u64))
                    + d as f64 * r.abs().ln()
                    - 0.5 * r2;
                let sign = if r < 0.0 && d % 2 == 1 { -1.0 } else { 1.0 };
                sign * log_mag.exp() * lag
            };
            out[n * dim + m] = val;
            // <m|D(r)|n> = conj(<n|D(-r)|m>) = (-1)^d <n|D(r)|m> for real r
            out[m * dim + n] = if d % 2 == 1 { -val } else { val };
        }
    }
    out
}

/// `<n|exp(-i k X_phi)|m>`, i.e. the displacement element at `w = -(i k / 2) e^{i phi}`.
pub fn quad_char_element(n: FockIndex, m: FockIndex, k: f64, phi: f64) -> ComplexAmplitude {
    let w = Complex64::new(0.0, -0.5 * k) * Complex64::from_polar(1.0, phi);
    displacement_matrix_element(n, m, w)
}

/// Position-space Fock wavefunction `<x|n>` with vacuum quadrature variance 1/4.
pub fn quad_wavefunction(n: FockIndex, x: f64) -> f64 {
    hermite_functions(n, x)[n]
}

/// `<x|k>` for every `k` in `0..=nmax`.
///
/// Uses `psi_{k+1} = (2 x psi_k - sqrt(k) psi_{k-1}) / sqrt(k+1)`.
pub fn hermite_functions(nmax: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(nmax + 1);
    out.push((2.0 / PI).powf(0.25) * (-x * x).exp());
    if nmax == 0 {
        return out;
    }
    out.push(2.0 * x * out[0]);
    for k in 1..nmax {
        let next = (2.0 * x * out[k] - (k as f64).sqrt() * out[k - 1]) / ((k + 1) as f64).sqrt();
        out.push(next);
    }
    out
}
