//! Pattern-function kernels `<n|K_eta(x - X_phi)|m>` for `eta > 1/2`.
//!
//! The kernel is evaluated by direct quadrature of
//!
//! ```text
//! base(n, m, x) = 1/2 int_0^K dk k e^{-k^2 (2 eta - 1) / (8 eta)} R_nm(k) trig_d(k x)
//! ```
//!
//! where `d = |n - m|`, `R_nm(k)` is the real displacement element
//! `<n|D(k/2)|m>` stripped of its Gaussian, and `trig_d` cycles through
//! `cos, sin, -cos, -sin` with `d mod 4`. The base is real and symmetric in
//! `(n, m)`; the full element carries the phase `e^{i (n - m) phi}`.
//!
//! [`KernelTable`] tabulates base values and their exact first and second `x`
//! derivatives on a uniform grid and interpolates with quintic Hermite
//! polynomials.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fockmath::{laguerre_assoc_all, log_factorial, ComplexAmplitude, FockIndex};
use crate::quadrature::Rule;
use crate::{Error, Result};

/// Gauss-Legendre panels on `[0, k_cutoff]`.
pub const PANELS: usize = 16;
/// Default total number of Gauss-Legendre nodes.
pub const DEFAULT_NODES: usize = 4096;
/// Default tabulation step in `x`.
pub const DEFAULT_GRID_STEP: f64 = 0.004;
/// Environment variable naming the kernel-table cache directory.
pub const CACHE_DIR_ENV: &str = "TWINBEAM_CACHE_DIR";

const TAIL_TOLERANCE: f64 = 1e-14;
const CACHE_MAGIC: &[u8; 8] = b"TBKTAB\0\0";
const CACHE_VERSION: u32 = 1;

/// Parameters of the kernel quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub eta: f64,
    pub nmax: FockIndex,
    pub k_cutoff: f64,
    pub quadrature_nodes: usize,
}

impl KernelSpec {
    /// Spec with the default cutoff and node count.
    pub fn new(eta: f64, nmax: FockIndex) -> Result<Self> {
        check_eta(eta)?;
        let spec = KernelSpec { eta, nmax, k_cutoff: default_k_cutoff(eta, nmax), quadrature_nodes: DEFAULT_NODES };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_quadrature(self, k_cutoff: f64, quadrature_nodes: usize) -> Result<Self> {
        let spec = KernelSpec { k_cutoff, quadrature_nodes, ..self };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_eta(self.eta)?;
        if !(self.k_cutoff.is_finite() && self.k_cutoff > 0.0) {
            return Err(Error::InvalidParameter(format!("k_cutoff must be positive, got {}", self.k_cutoff)));
        }
        if self.quadrature_nodes == 0 || self.quadrature_nodes % PANELS != 0 {
            return Err(Error::InvalidParameter(format!(
                "quadrature_nodes must be a positive multiple of {PANELS}, got {}",
                self.quadrature_nodes
            )));
        }
        if tail_bound(gauss_rate(self.eta), 2 * self.nmax + 1, self.k_cutoff) > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "k_cutoff {} leaves a Gaussian tail above 1e-12 for eta = {}, nmax = {}",
                self.k_cutoff, self.eta, self.nmax
            )));
        }
        Ok(())
    }

    fn rule(&self) -> Rule {
        Rule::composite_legendre(0.0, self.k_cutoff, PANELS, self.quadrature_nodes / PANELS)
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !eta.is_finite() || eta > 1.0 {
        return Err(Error::InvalidParameter(format!("eta must lie in (0.5, 1], got {eta}")));
    }
    if eta <= 0.5 {
        return Err(Error::EtaBelowBound { eta });
    }
    Ok(())
}

/// `(2 eta - 1) / (8 eta)`, the net Gaussian rate of the kernel integrand.
fn gauss_rate(eta: f64) -> f64 {
    (2.0 * eta - 1.0) / (8.0 * eta)
}

/// Upper bound on `int_K^inf k^p e^{-a k^2} dk`, valid once `2 a K^2 > p`.
fn tail_bound(a: f64, p: usize, k: f64) -> f64 {
    let p = p as f64;
    let slope = 2.0 * a * k - p / k;
    if slope <= 0.0 {
        return f64::INFINITY;
    }
    (p * k.ln() - a * k * k).exp() / slope
}

/// Smallest cutoff (on a 0.1 lattice) whose tail bound with the polynomial
/// degree `2 nmax + 1` is below 1e-14.
pub fn default_k_cutoff(eta: f64, nmax: FockIndex) -> f64 {
    let a = gauss_rate(eta);
    let p = 2 * nmax + 1;
    let mut k = ((p as f64) / (2.0 * a)).sqrt().max(1.0);
    while tail_bound(a, p, k) > TAIL_TOLERANCE {
        k += 0.1;
    }
    (k * 10.0).ceil() / 10.0
}

/// Which `(n, m)` pairs a table carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSet {
    /// `(n, n)` only.
    Diagonal,
    /// Every `n >= m`; the upper triangle follows by symmetry.
    All,
}

impl PairSet {
    pub fn pairs(self, nmax: FockIndex) -> Vec<(FockIndex, FockIndex)> {
        match self {
            PairSet::Diagonal => (0..=nmax).map(|n| (n, n)).collect(),
            PairSet::All => (0..=nmax).flat_map(|n| (0..=n).map(move |m| (n, m))).collect(),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            PairSet::Diagonal => "diagonal",
            PairSet::All => "all",
        }
    }
}

/// Precomputed quadrature coefficients for a set of pairs.
#[derive(Debug, Clone)]
pub struct KernelQuadrature {
    spec: KernelSpec,
    pair_set: PairSet,
    pairs: Vec<(FockIndex, FockIndex)>,
    k: Vec<f64>,
    /// `[pair * nk + j]`: weight times integrand amplitude.
    coef: Vec<f64>,
    /// `coef * k`, for the first `x` derivative.
    coef_k: Vec<f64>,
    /// `coef * k^2`, for the second `x` derivative.
    coef_kk: Vec<f64>,
}

impl KernelQuadrature {
    pub fn new(spec: KernelSpec, pair_set: PairSet) -> Result<Self> {
        spec.validate()?;
        let rule = spec.rule();
        let nk = rule.len();
        let pairs = pair_set.pairs(spec.nmax);
        let dim = spec.nmax + 1;
        let a = gauss_rate(spec.eta);
        // amplitudes for every n >= m, laid out [(n * dim + m) * nk + j]
        let mut full = vec![0.0; dim * dim * nk];
        let wanted: Vec<bool> = {
            let mut w = vec![false; dim];
            for &(n, m) in &pairs {
                w[n - m] = true;
            }
            w
        };
        for (j, (&k, &wk)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
            let r2 = 0.25 * k * k;
            let ln_half_k = (0.5 * k).ln();
            for d in (0..dim).filter(|&d| wanted[d]) {
                let lags = laguerre_assoc_all(spec.nmax - d, d, r2);
                for (m, lag) in lags.iter().enumerate() {
                    let n = m + d;
                    let log_mag = 0.5 * (log_factorial(m as u64) - log_factorial(n as u64))
                        + d as f64 * ln_half_k
                        - a * k * k;
                    let v = 0.5 * wk * k * log_mag.exp() * lag;
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!("kernel amplitude overflow at k = {k}, n = {n}, m = {m}")));
                    }
                    full[(n * dim + m) * nk + j] = v;
                }
            }
        }
        let mut coef = Vec::with_capacity(pairs.len() * nk);
        for &(n, m) in &pairs {
            coef.extend_from_slice(&full[(n * dim + m) * nk..(n * dim + m + 1) * nk]);
        }
        let scaled = |c: &[f64]| -> Vec<f64> {
            c.chunks(nk).flat_map(|c| c.iter().zip(&rule.nodes).map(|(v, k)| v * k)).collect()
        };
        let coef_k = scaled(&coef);
        let coef_kk = scaled(&coef_k);
        Ok(KernelQuadrature { spec, pair_set, pairs, k: rule.nodes, coef, coef_k, coef_kk })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn pair_set(&self) -> PairSet {
        self.pair_set
    }

    /// Pairs in storage order, each with `n >= m`.
    pub fn pairs(&self) -> &[(FockIndex, FockIndex)] {
        &self.pairs
    }

    /// Base values of every pair at `x`, optionally with the first and second
    /// `x` derivatives.
    pub fn eval(&self, x: f64, vals: &mut [f64], ders: Option<(&mut [f64], &mut [f64])>) {
        let nk = self.k.len();
        let (cos, sin): (Vec<f64>, Vec<f64>) = self.k.iter().map(|k| (k * x).sin_cos()).map(|(s, c)| (c, s)).unzip();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        for (p, &(n, m)) in self.pairs.iter().enumerate() {
            let d = n - m;
            let c = &self.coef[p * nk..(p + 1) * nk];
            vals[p] = if d % 2 == 0 { trig(d, dot(c, &cos), 0.0) } else { trig(d, 0.0, dot(c, &sin)) };
        }
        if let Some((d1, d2)) = ders {
            for (p, &(n, m)) in self.pairs.iter().enumerate() {
                let d = n - m;
                let ck = &self.coef_k[p * nk..(p + 1) * nk];
                let ckk = &self.coef_kk[p * nk..(p + 1) * nk];
                // d/dx trig_d(k x) = k trig_{d+3}(k x)
                if d % 2 == 0 {
                    d1[p] = trig(d + 3, 0.0, dot(ck, &sin));
                    d2[p] = trig(d + 2, dot(ckk, &cos), 0.0);
                } else {
                    d1[p] = trig(d + 3, dot(ck, &cos), 0.0);
                    d2[p] = trig(d + 2, 0.0, dot(ckk, &sin));
                }
            }
        }
    }
}

fn trig(d: usize, c: f64, s: f64) -> f64 {
    match d % 4 {
        0 => c,
        1 => s,
        2 => -c,
        _ => -s,
    }
}

/// Real, symmetric base value of the kernel at `phi = 0`, returned as a
/// complex amplitude with zero imaginary part.
pub fn kernel_element_base(n: FockIndex, m: FockIndex, x: f64, spec: &KernelSpec) -> Result<ComplexAmplitude> {
    let (hi, lo) = if n >= m { (n, m) } else { (m, n) };
    if hi > spec.nmax {
        return Err(Error::OutOfRange(format!("({n}, {m}) exceeds nmax = {}", spec.nmax)));
    }
    let single = KernelSpec { nmax: hi, ..*spec };
    let quad = KernelQuadrature::new(single, PairSet::All)?;
    let idx = quad.pairs.iter().position(|&p| p == (hi, lo)).expect("pair present");
    let mut vals = vec![0.0; quad.pairs.len()];
    quad.eval(x, &mut vals, None);
    Ok(Complex64::new(vals[idx], 0.0))
}

/// `<n|K_eta(x - X_phi)|m> = e^{i (n - m) phi} base(n, m, x)`.
pub fn kernel_element(n: FockIndex, m: FockIndex, x: f64, phi: f64, spec: &KernelSpec) -> Result<ComplexAmplitude> {
    let base = kernel_element_base(n, m, x, spec)?;
    Ok(phase(n, m, phi) * base.re)
}

/// `e^{i (n - m) phi}`.
pub fn phase(n: FockIndex, m: FockIndex, phi: f64) -> Complex64 {
    Complex64::from_polar(1.0, (n as f64 - m as f64) * phi)
}

/// Uniform tabulation grid `lo, lo + step, ..., lo + (len - 1) step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XGrid {
    pub lo: f64,
    pub step: f64,
    pub len: usize,
}

impl XGrid {
    pub fn empty() -> Self {
        XGrid { lo: 0.0, step: DEFAULT_GRID_STEP, len: 0 }
    }

    /// Grid spanning `[lo, hi]` with spacing at most `step`.
    pub fn covering(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && step > 0.0 && hi >= lo) {
            return Err(Error::InvalidParameter(format!("bad grid [{lo}, {hi}] step {step}")));
        }
        let intervals = ((hi - lo) / step).ceil().max(1.0) as usize;
        Ok(XGrid { lo, step: (hi - lo).max(step) / intervals as f64, len: intervals + 1 })
    }

    /// Grid over data spanning `[min, max]`, padded by five vacuum standard
    /// deviations on each side.
    pub fn for_data(min: f64, max: f64) -> Result<Self> {
        const PAD: f64 = 5.0 * 0.5;
        XGrid::covering(min - PAD, max + PAD, DEFAULT_GRID_STEP)
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.step * self.len.saturating_sub(1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step
    }
}

/// Tabulated kernel base values with quintic Hermite interpolation.
///
/// Immutable after construction; evaluation is `&self` and thread-safe.
#[derive(Debug, Clone)]
pub struct KernelTable {
    quad: KernelQuadrature,
    grid: XGrid,
    /// `[node * npairs + pair]`.
    vals: Vec<f64>,
    /// First derivatives times the grid step.
    ders: Vec<f64>,
    /// Second derivatives times the squared grid step.
    ders2: Vec<f64>,
    pair_index: Vec<Option<usize>>,
}

impl KernelTable {
    pub fn build(spec: KernelSpec, pair_set: PairSet, grid: XGrid) -> Result<Self> {
        let quad = KernelQuadrature::new(spec, pair_set)?;
        let np = quad.pairs.len();
        let mut vals = vec![0.0; grid.len * np];
        let mut ders = vec![0.0; grid.len * np];
        let mut ders2 = vec![0.0; grid.len * np];
        let h = grid.step;
        vals.par_chunks_mut(np.max(1))
            .zip(ders.par_chunks_mut(np.max(1)))
            .zip(ders2.par_chunks_mut(np.max(1)))
            .enumerate()
            .for_each(|(i, ((v, d1), d2))| {
                quad.eval(grid.node(i), v, Some((&mut *d1, &mut *d2)));
                d1.iter_mut().for_each(|x| *x *= h);
                d2.iter_mut().for_each(|x| *x *= h * h);
            });
        Ok(Self::assemble(quad, grid, [vals, ders, ders2]))
    }

    /// As [`KernelTable::build`], reusing a cached table under `dir` when its
    /// key matches and writing one otherwise.
    pub fn build_cached(spec: KernelSpec, pair_set: PairSet, grid: XGrid, dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Self::build(spec, pair_set, grid);
        };
        let key = cache_key(&spec, pair_set, &grid);
        let path = cache_path(dir, &key);
        if let Ok(Some(data)) = read_cache(&path, &key, pair_set.pairs(spec.nmax).len() * grid.len) {
            let quad = KernelQuadrature::new(spec, pair_set)?;
            return Ok(Self::assemble(quad, grid, data));
        }
        let table = Self::build(spec, pair_set, grid)?;
        fs::create_dir_all(dir)?;
        write_cache(&path, &key, [&table.vals, &table.ders, &table.ders2])?;
        Ok(table)
    }

    /// Cache directory from the environment, if set.
    pub fn cache_dir_from_env() -> Option<PathBuf> {
        std::env::var_os(CACHE_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    fn assemble(quad: KernelQuadrature, grid: XGrid, data: TableData) -> Self {
        let [vals, ders, ders2] = data;
        let dim = quad.spec.nmax + 1;
        let mut pair_index = vec![None; dim * dim];
        for (p, &(n, m)) in quad.pairs.iter().enumerate() {
            pair_index[n * dim + m] = Some(p);
            pair_index[m * dim + n] = Some(p);
        }
        KernelTable { quad, grid, vals, ders, ders2, pair_index }
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.quad.spec
    }

    pub fn grid(&self) -> &XGrid {
        &self.grid
    }

    pub fn pair_set(&self) -> PairSet {
        self.quad.pair_set
    }

    pub fn pairs(&self) -> &[(FockIndex, FockIndex)] {
        &self.quad.pairs
    }

    /// Storage index of `(n, m)` or `(m, n)`.
    pub fn pair_index(&self, n: FockIndex, m: FockIndex) -> Option<usize> {
        let dim = self.quad.spec.nmax + 1;
        if n >= dim || m >= dim {
            return None;
        }
        self.pair_index[n * dim + m]
    }

    /// Base values of every stored pair at `x`; `out.len()` must equal the
    /// number of pairs.
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        let g = &self.grid;
        let np = self.quad.pairs.len();
        if g.len < 2 || !(x >= g.lo && x <= g.hi()) {
            self.quad.eval(x, out, None);
            return;
        }
        let pos = (x - g.lo) / g.step;
        let i = (pos.floor() as usize).min(g.len - 2);
        let t = pos - i as f64;
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        let t5 = t4 * t;
        let h1 = -10.0 * t3 + 15.0 * t4 - 6.0 * t5;
        let h0 = 1.0 + h1;
        let g0 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
        let g1 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
        let c0 = 0.5 * (t2 - 3.0 * t3 + 3.0 * t4 - t5);
        let c1 = 0.5 * (t3 - 2.0 * t4 + t5);
        let (v0, v1) = self.vals[i * np..(i + 2) * np].split_at(np);
        let (d0, d1) = self.ders[i * np..(i + 2) * np].split_at(np);
        let (e0, e1) = self.ders2[i * np..(i + 2) * np].split_at(np);
        for p in 0..np {
            out[p] = h0 * v0[p] - h1 * v1[p] + g0 * d0[p] + g1 * d1[p] + c0 * e0[p] + c1 * e1[p];
        }
    }

    /// Direct quadrature at `x`, bypassing the table.
    pub fn eval_direct(&self, x: f64, out: &mut [f64]) {
        self.quad.eval(x, out, None);
    }
}

fn cache_key(spec: &KernelSpec, pair_set: PairSet, grid: &XGrid) -> [u8; 32] {
    let text = format!(
        "{}|{:016x}|{}|{:016x}|{}|{}|{:016x}|{:016x}|{}|{}",
        crate::CODE_VERSION,
        spec.eta.to_bits(),
        spec.nmax,
        spec.k_cutoff.to_bits(),
        spec.quadrature_nodes,
        pair_set.tag(),
        grid.lo.to_bits(),
        grid.step.to_bits(),
        grid.len,
        CACHE_VERSION
    );
    Sha256::digest(text.as_bytes()).into()
}

fn cache_path(dir: &Path, key: &[u8; 32]) -> PathBuf {
    let hex: String = key[..8].iter().map(|b| format!("{b:02x}")).collect();
    dir.join(format!("kernel-{hex}.tbk"))
}

fn write_cache(path: &Path, key: &[u8; 32], data: [&[f64]; 3]) -> Result<()> {
    let mut body = Vec::with_capacity(8 * 3 * data[0].len());
    for v in data.iter().flat_map(|d| d.iter()) {
        body.extend_from_slice(&v.to_le_bytes());
    }
    let checksum: [u8; 32] = Sha256::digest(&body).into();
    let tmp = path.with_extension("tbk.partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(CACHE_MAGIC)?;
        f.write_all(&CACHE_VERSION.to_le_bytes())?;
        f.write_all(key)?;
        f.write_all(&(data[0].len() as u64).to_le_bytes())?;
        f.write_all(&body)?;
        f.write_all(&checksum)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Values, scaled first derivatives, scaled second derivatives.
type TableData = [Vec<f64>; 3];

/// `Ok(None)` for a missing, stale or corrupt cache file.
fn read_cache(path: &Path, key: &[u8; 32], n: usize) -> Result<Option<TableData>> {
    let Ok(bytes) = fs::read(path) else {
        return Ok(None);
    };
    let header = 8 + 4 + 32 + 8;
    let body_len = 24 * n;
    if bytes.len() != header + body_len + 32
        || &bytes[..8] != CACHE_MAGIC
        || bytes[8..12] != CACHE_VERSION.to_le_bytes()
        || bytes[12..44] != key[..]
        || bytes[44..52] != (n as u64).to_le_bytes()
    {
        return Ok(None);
    }
    let body = &bytes[header..header + body_len];
    let checksum: [u8; 32] = Sha256::digest(body).into();
    if bytes[header + body_len..] != checksum[..] {
        return Ok(None);
    }
    let floats: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Some([floats[..n].to_vec(), floats[n..2 * n].to_vec(), floats[2 * n..].to_vec()]))
}
