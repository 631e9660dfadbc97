//! Density-matrix reconstruction by averaging pattern-function kernels over
//! homodyne records, and the derived photon-number statistics.
//!
//! Every element is a self-normalised weighted mean
//! `mu = sum w v / sum w` with standard error
//! `sqrt(sum w^2 |v - mu|^2) / sum w`, which reduces to the sample standard
//! deviation over `sqrt(N)` for unit weights. Records are processed in
//! chunks of [`CHUNK_SIZE`]; per-chunk moments are combined by a fixed
//! pairwise tree, so results depend only on the record order, not on the
//! number of threads.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::FockDensityMatrix;
use crate::fockmath::FockIndex;
use crate::kernel::{KernelSpec, KernelTable, PairSet, XGrid};
use crate::sampler::{HomodyneRecord, SingleModeRecord, CHUNK_SIZE};
use crate::{Error, Result};

/// How the kernel is matched to the detector efficiency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnalysisMode {
    /// Kernels at the true efficiency: recovers the state before detection.
    Bare { eta: f64 },
    /// Unit-efficiency kernels on the raw records: the state smeared by
    /// additive Gaussian noise.
    DressedGaussian,
    /// Unit-efficiency kernels on records rescaled by `sqrt(eta)`: the state
    /// after photon loss.
    DressedLoss { eta: f64 },
}

impl AnalysisMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AnalysisMode::Bare { eta } if eta <= 0.5 => Err(Error::EtaBelowBound { eta }),
            AnalysisMode::Bare { eta } | AnalysisMode::DressedLoss { eta } if !(eta > 0.0 && eta <= 1.0) => {
                Err(Error::InvalidParameter(format!("eta must lie in (0, 1], got {eta}")))
            }
            _ => Ok(()),
        }
    }

    /// Efficiency the kernel must be built for.
    pub fn kernel_eta(&self) -> f64 {
        match *self {
            AnalysisMode::Bare { eta } => eta,
            _ => 1.0,
        }
    }

    /// Factor applied to each outcome before the kernel is evaluated.
    pub fn rescale(&self) -> f64 {
        match *self {
            AnalysisMode::DressedLoss { eta } => eta.sqrt(),
            _ => 1.0,
        }
    }

    /// Default kernel spec for this mode.
    pub fn kernel_spec(&self, nmax: FockIndex) -> Result<KernelSpec> {
        self.validate()?;
        KernelSpec::new(self.kernel_eta(), nmax)
    }
}

/// Which elements an estimate carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Photon-number distribution only: `rho_nn`, or `p(n, m) = <n, m|R|n, m>`.
    Diagonal,
    /// Every matrix element.
    Full,
}

impl Layout {
    fn pair_set(self) -> PairSet {
        match self {
            Layout::Diagonal => PairSet::Diagonal,
            Layout::Full => PairSet::All,
        }
    }

    /// Number of estimated elements for `arity` modes of dimension `dim`.
    pub fn len(self, arity: u8, dim: usize) -> usize {
        match (arity, self) {
            (1, Layout::Diagonal) => dim,
            (1, Layout::Full) | (_, Layout::Diagonal) => dim * dim,
            (_, Layout::Full) => dim.pow(4),
        }
    }

    fn is_real(self) -> bool {
        self == Layout::Diagonal
    }
}

/// Reconstructed density matrix with per-element standard errors.
///
/// Element order:
/// * one mode, diagonal: `rho_nn` at `n`;
/// * one mode, full: `rho_nm` at `n * dim + m`;
/// * two modes, diagonal: `p(n, m)` at `n * dim + m`;
/// * two modes, full: `<n1, m1|R|n2, m2>` at `(n1 * dim + m1) * dim^2 + n2 * dim + m2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMatrixEstimate {
    pub arity: u8,
    pub nmax: FockIndex,
    pub layout: Layout,
    pub elements: Vec<Complex64>,
    pub stderr: Vec<f64>,
    pub n_records: u64,
    pub mode: AnalysisMode,
    pub kernel: Option<KernelSpec>,
    /// Mean record weight and its standard error; the estimate divides by
    /// the weight sum (self-normalised) rather than assuming a unit mean.
    pub weight_mean: f64,
    pub weight_stderr: f64,
    /// Photon-number sums accumulated record by record, so their errors keep
    /// the correlation between elements. Absent for exact estimates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sums: Option<NumberSums>,
}

/// Two-mode sums of `p(n, m)` estimated per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumberSums {
    /// `s(n)`, `n = 0..=nmax`.
    pub total: Vec<StatPoint>,
    /// `correlation[N]` holds `d_N(n)`, `n = -N..=N`, for `2N <= nmax`.
    pub correlation: Vec<Vec<StatPoint>>,
    pub normalisation: StatPoint,
}

/// Per-record values of every [`NumberSums`] entry: `s`, then `d_N` blocks
/// at offset `N^2`, then the normalisation.
fn number_sums_len(nmax: FockIndex) -> usize {
    let h = nmax / 2;
    nmax + 1 + (h + 1) * (h + 1) + 1
}

fn number_sums_fill(a: &[f64], b: &[f64], out: &mut [f64]) {
    let dim = a.len();
    let h = (dim - 1) / 2;
    for n in 0..dim {
        out[n] = (0..=n).map(|l| a[l] * b[n - l]).sum();
    }
    let d = &mut out[dim..dim + (h + 1) * (h + 1)];
    let hi = h as i64;
    for k in -hi..=hi {
        // running sum over l; d_N(k) is its value at l = N
        let mut c = 0.0;
        for l in (-k).max(0)..=hi {
            c += a[l as usize] * b[(l + k) as usize];
            if l >= k.abs() {
                d[(l * l + k + l) as usize] = c;
            }
        }
    }
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    out[dim + (h + 1) * (h + 1)] = sa * sb;
}

impl DensityMatrixEstimate {
    pub fn dim(&self) -> usize {
        self.nmax + 1
    }

    /// Exact estimate (zero error) from a known density matrix.
    pub fn exact(rho: &FockDensityMatrix, layout: Layout) -> Self {
        let dim = rho.dim();
        let elements: Vec<Complex64> = match (rho.arity(), layout) {
            (1, Layout::Diagonal) => (0..dim).map(|n| rho.get(n, n)).collect(),
            (1, Layout::Full) => rho.elements().to_vec(),
            (_, Layout::Diagonal) => {
                (0..dim * dim).map(|i| rho.get2(i / dim, i % dim, i / dim, i % dim)).collect()
            }
            (_, Layout::Full) => {
                let mut v = Vec::with_capacity(dim.pow(4));
                for n1 in 0..dim {
                    for m1 in 0..dim {
                        for n2 in 0..dim {
                            for m2 in 0..dim {
                                v.push(rho.get2(n1, m1, n2, m2));
                            }
                        }
                    }
                }
                v
            }
        };
        let len = elements.len();
        DensityMatrixEstimate {
            arity: rho.arity(),
            nmax: rho.nmax(),
            layout,
            elements,
            stderr: vec![0.0; len],
            n_records: 0,
            mode: AnalysisMode::Bare { eta: 1.0 },
            kernel: None,
            weight_mean: 1.0,
            weight_stderr: 0.0,
            sums: None,
        }
    }

    fn check_index(&self, idx: &[FockIndex]) -> Result<()> {
        if idx.iter().any(|&i| i > self.nmax) {
            return Err(Error::OutOfRange(format!("index {idx:?} beyond nmax = {}", self.nmax)));
        }
        Ok(())
    }

    fn index(&self, n1: FockIndex, m1: FockIndex, n2: FockIndex, m2: FockIndex) -> Result<usize> {
        let d = self.dim();
        match (self.arity, self.layout) {
            (2, Layout::Full) => Ok((n1 * d + m1) * d * d + n2 * d + m2),
            (2, Layout::Diagonal) if n1 == n2 && m1 == m2 => Ok(n1 * d + m1),
            _ => Err(Error::OutOfRange(format!(
                "element ({n1}, {m1}; {n2}, {m2}) is not carried by a {:?} estimate",
                self.layout
            ))),
        }
    }

    /// Single-mode `(rho_nm, stderr)`.
    pub fn get(&self, n: FockIndex, m: FockIndex) -> Result<(Complex64, f64)> {
        self.check_index(&[n, m])?;
        if self.arity != 1 {
            return Err(Error::ArityMismatch { expected: 1, found: self.arity });
        }
        let i = match self.layout {
            Layout::Full => n * self.dim() + m,
            Layout::Diagonal if n == m => n,
            Layout::Diagonal => {
                return Err(Error::OutOfRange(format!("({n}, {m}) is not carried by a diagonal estimate")))
            }
        };
        Ok((self.elements[i], self.stderr[i]))
    }

    /// Two-mode `(<n1, m1|R|n2, m2>, stderr)`.
    pub fn get2(&self, n1: FockIndex, m1: FockIndex, n2: FockIndex, m2: FockIndex) -> Result<(Complex64, f64)> {
        self.check_index(&[n1, m1, n2, m2])?;
        if self.arity != 2 {
            return Err(Error::ArityMismatch { expected: 2, found: self.arity });
        }
        let i = self.index(n1, m1, n2, m2)?;
        Ok((self.elements[i], self.stderr[i]))
    }

    /// Photon-number probability `rho_nn` (one mode) with its stderr.
    pub fn diag(&self, n: FockIndex) -> Result<StatPoint> {
        let (v, e) = self.get(n, n)?;
        Ok(StatPoint { n: n as i64, value: v.re, stderr: e })
    }

    /// Joint photon-number probability `p(n, m)` with its stderr.
    pub fn p(&self, n: FockIndex, m: FockIndex) -> Result<StatPoint> {
        let (v, e) = self.get2(n, m, n, m)?;
        Ok(StatPoint { n: 0, value: v.re, stderr: e })
    }

    /// Largest `|E_ij - conj(E_ji)|` divided by the combined stderr, over the
    /// full layouts; 0 for diagonal layouts.
    pub fn hermiticity_score(&self) -> f64 {
        if self.layout == Layout::Diagonal {
            return self.elements.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
        }
        let side = self.dim().pow(self.arity as u32);
        let mut worst: f64 = 0.0;
        for i in 0..side {
            for j in i..side {
                let (a, b) = (i * side + j, j * side + i);
                let diff = (self.elements[a] - self.elements[b].conj()).norm();
                let scale = (self.stderr[a].powi(2) + self.stderr[b].powi(2)).sqrt();
                worst = worst.max(if scale > 0.0 { diff / scale } else if diff > 0.0 { f64::INFINITY } else { 0.0 });
            }
        }
        worst
    }
}

/// Value with standard error at integer abscissa `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatPoint {
    pub n: i64,
    pub value: f64,
    pub stderr: f64,
}

/// Photon-number statistics derived from a two-mode estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedStats {
    /// Total photon number `s(n)`, `n = 0..=nmax`.
    pub s: Vec<StatPoint>,
    /// Difference correlation `d_N(n)`, `n = -N..=N`.
    pub d: Vec<StatPoint>,
    pub big_n: usize,
    /// `p(n, n)`.
    pub p_diag: Vec<StatPoint>,
}

/// Running weighted moments of every element.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    n: u64,
    sum_w: f64,
    sum_w2: f64,
    wv_re: Vec<f64>,
    wv_im: Vec<f64>,
    w2v_re: Vec<f64>,
    w2v_im: Vec<f64>,
    w2v2: Vec<f64>,
    // real per-record sums riding along with the elements
    ex_wv: Vec<f64>,
    ex_w2v: Vec<f64>,
    ex_w2v2: Vec<f64>,
}

impl Moments {
    fn new(len: usize, complex: bool) -> Self {
        let c = if complex { len } else { 0 };
        Moments {
            n: 0,
            sum_w: 0.0,
            sum_w2: 0.0,
            wv_re: vec![0.0; len],
            wv_im: vec![0.0; c],
            w2v_re: vec![0.0; len],
            w2v_im: vec![0.0; c],
            w2v2: vec![0.0; len],
            ex_wv: Vec::new(),
            ex_w2v: Vec::new(),
            ex_w2v2: Vec::new(),
        }
    }

    fn with_extra(mut self, len: usize) -> Self {
        self.ex_wv = vec![0.0; len];
        self.ex_w2v = vec![0.0; len];
        self.ex_w2v2 = vec![0.0; len];
        self
    }

    /// Extra values for the record most recently passed to `add`.
    fn add_extra(&mut self, w: f64, v: &[f64]) {
        let w2 = w * w;
        for i in 0..v.len() {
            self.ex_wv[i] += w * v[i];
            self.ex_w2v[i] += w2 * v[i];
            self.ex_w2v2[i] += w2 * v[i] * v[i];
        }
    }

    pub fn n_records(&self) -> u64 {
        self.n
    }

    fn add(&mut self, w: f64, re: &[f64], im: Option<&[f64]>) {
        self.n += 1;
        self.sum_w += w;
        let w2 = w * w;
        self.sum_w2 += w2;
        match im {
            None => {
                for i in 0..re.len() {
                    let v = re[i];
                    self.wv_re[i] += w * v;
                    self.w2v_re[i] += w2 * v;
                    self.w2v2[i] += w2 * v * v;
                }
            }
            Some(im) => {
                for i in 0..re.len() {
                    let (a, b) = (re[i], im[i]);
                    self.wv_re[i] += w * a;
                    self.wv_im[i] += w * b;
                    self.w2v_re[i] += w2 * a;
                    self.w2v_im[i] += w2 * b;
                    self.w2v2[i] += w2 * (a * a + b * b);
                }
            }
        }
    }

    pub fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        self.sum_w += other.sum_w;
        self.sum_w2 += other.sum_w2;
        for (dst, src) in [
            (&mut self.wv_re, &other.wv_re),
            (&mut self.wv_im, &other.wv_im),
            (&mut self.w2v_re, &other.w2v_re),
            (&mut self.w2v_im, &other.w2v_im),
            (&mut self.w2v2, &other.w2v2),
            (&mut self.ex_wv, &other.ex_wv),
            (&mut self.ex_w2v, &other.ex_w2v),
            (&mut self.ex_w2v2, &other.ex_w2v2),
        ] {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }

    /// Means and standard errors.
    fn finish(&self) -> (Vec<Complex64>, Vec<f64>) {
        let len = self.wv_re.len();
        let complex = !self.wv_im.is_empty();
        let mut mean = Vec::with_capacity(len);
        let mut err = Vec::with_capacity(len);
        for i in 0..len {
            let mu = Complex64::new(self.wv_re[i], if complex { self.wv_im[i] } else { 0.0 }) / self.sum_w;
            let w2v = Complex64::new(self.w2v_re[i], if complex { self.w2v_im[i] } else { 0.0 });
            // sum w^2 |v - mu|^2 expanded in the accumulated moments
            let ss = self.w2v2[i] - 2.0 * (mu.conj() * w2v).re + mu.norm_sqr() * self.sum_w2;
            mean.push(mu);
            err.push(ss.max(0.0).sqrt() / self.sum_w);
        }
        (mean, err)
    }

    fn finish_extra(&self) -> Vec<(f64, f64)> {
        (0..self.ex_wv.len())
            .map(|i| {
                let mu = self.ex_wv[i] / self.sum_w;
                let ss = self.ex_w2v2[i] - 2.0 * mu * self.ex_w2v[i] + mu * mu * self.sum_w2;
                (mu, ss.max(0.0).sqrt() / self.sum_w)
            })
            .collect()
    }
}

/// Binary-counter merge of per-chunk moments: chunk `k` always meets the same
/// partners, so the result depends only on the chunking.
#[derive(Debug, Default)]
pub struct MomentTree {
    stack: Vec<(u32, Moments)>,
}

impl MomentTree {
    pub fn new() -> Self {
        MomentTree { stack: Vec::new() }
    }

    pub fn push(&mut self, m: Moments) {
        let mut cur = (0u32, m);
        while let Some((level, _)) = self.stack.last() {
            if *level != cur.0 {
                break;
            }
            let (level, mut left) = self.stack.pop().expect("non-empty");
            left.merge(&cur.1);
            cur = (level + 1, left);
        }
        self.stack.push(cur);
    }

    pub fn finish(mut self) -> Option<Moments> {
        let mut acc = self.stack.pop()?.1;
        while let Some((_, mut left)) = self.stack.pop() {
            left.merge(&acc);
            acc = left;
        }
        Some(acc)
    }
}

/// Kernel table plus layout: turns chunks of records into [`Moments`].
#[derive(Debug, Clone)]
pub struct Reconstructor {
    arity: u8,
    layout: Layout,
    mode: AnalysisMode,
    nmax: FockIndex,
    table: KernelTable,
}

impl Reconstructor {
    /// `x_range` spans the rescaled outcomes the table should cover;
    /// outcomes outside it are evaluated directly.
    pub fn new(
        arity: u8,
        layout: Layout,
        mode: AnalysisMode,
        spec: KernelSpec,
        x_range: Option<(f64, f64)>,
    ) -> Result<Self> {
        mode.validate()?;
        spec.validate()?;
        if arity != 1 && arity != 2 {
            return Err(Error::InvalidParameter(format!("arity must be 1 or 2, got {arity}")));
        }
        if (spec.eta - mode.kernel_eta()).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "kernel eta {} does not match analysis mode {mode:?}",
                spec.eta
            )));
        }
        let grid = match x_range {
            Some((lo, hi)) => XGrid::for_data(lo * mode.rescale(), hi * mode.rescale())?,
            None => XGrid::empty(),
        };
        let table = KernelTable::build_cached(spec, layout.pair_set(), grid, KernelTable::cache_dir_from_env().as_deref())?;
        Ok(Reconstructor { arity, layout, mode, nmax: spec.nmax, table })
    }

    pub fn table(&self) -> &KernelTable {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.layout.len(self.arity, self.nmax + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn new_moments(&self) -> Moments {
        let m = Moments::new(self.len(), !self.layout.is_real());
        if self.arity == 2 {
            m.with_extra(number_sums_len(self.nmax))
        } else {
            m
        }
    }

    /// Complex `K(n, m, x, phi)` for all `n, m`, row-major.
    fn full_kernel(&self, base: &[f64], x_phase: f64, re: &mut [f64], im: &mut [f64]) {
        let dim = self.nmax + 1;
        for n in 0..dim {
            for m in 0..dim {
                let p = self.table.pair_index(n, m).expect("full table");
                let (s, c) = ((n as f64 - m as f64) * x_phase).sin_cos();
                re[n * dim + m] = c * base[p];
                im[n * dim + m] = s * base[p];
            }
        }
    }

    pub fn accumulate_single(&self, records: &[SingleModeRecord]) -> Result<Moments> {
        if self.arity != 1 {
            return Err(Error::ArityMismatch { expected: self.arity, found: 1 });
        }
        let dim = self.nmax + 1;
        let scale = self.mode.rescale();
        let mut acc = self.new_moments();
        let mut base = vec![0.0; self.table.pairs().len()];
        let mut re = vec![0.0; self.len()];
        let mut im = vec![0.0; self.len()];
        for r in records {
            self.table.eval_into(r.x * scale, &mut base);
            match self.layout {
                Layout::Diagonal => acc.add(r.weight, &base, None),
                Layout::Full => {
                    self.full_kernel(&base, r.phi, &mut re, &mut im);
                    acc.add(r.weight, &re, Some(&im));
                }
            }
        }
        debug_assert_eq!(re.len(), self.layout.len(1, dim));
        Ok(acc)
    }

    pub fn accumulate_joint(&self, records: &[HomodyneRecord]) -> Result<Moments> {
        if self.arity != 2 {
            return Err(Error::ArityMismatch { expected: self.arity, found: 2 });
        }
        let dim = self.nmax + 1;
        let scale = self.mode.rescale();
        let np = self.table.pairs().len();
        let mut acc = self.new_moments();
        let (mut ba, mut bb) = (vec![0.0; np], vec![0.0; np]);
        let mut re = vec![0.0; self.len()];
        let mut im = vec![0.0; self.len()];
        let (mut ar, mut ai) = (vec![0.0; dim * dim], vec![0.0; dim * dim]);
        let (mut br, mut bi) = (vec![0.0; dim * dim], vec![0.0; dim * dim]);
        let diag: Vec<usize> =
            (0..dim).map(|n| self.table.pair_index(n, n).expect("diagonal pairs are always stored")).collect();
        let (mut da, mut db) = (vec![0.0; dim], vec![0.0; dim]);
        let mut sums = vec![0.0; number_sums_len(self.nmax)];
        for r in records {
            self.table.eval_into(r.x * scale, &mut ba);
            self.table.eval_into(r.xp * scale, &mut bb);
            for n in 0..dim {
                da[n] = ba[diag[n]];
                db[n] = bb[diag[n]];
            }
            number_sums_fill(&da, &db, &mut sums);
            acc.add_extra(r.weight, &sums);
            match self.layout {
                Layout::Diagonal => {
                    for n in 0..dim {
                        let a = ba[n];
                        for m in 0..dim {
                            re[n * dim + m] = a * bb[m];
                        }
                    }
                    acc.add(r.weight, &re, None);
                }
                Layout::Full => {
                    self.full_kernel(&ba, r.phi, &mut ar, &mut ai);
                    self.full_kernel(&bb, r.psi, &mut br, &mut bi);
                    let d2 = dim * dim;
                    for n1 in 0..dim {
                        for m1 in 0..dim {
                            let row = (n1 * dim + m1) * d2;
                            for n2 in 0..dim {
                                let (xr, xi) = (ar[n1 * dim + n2], ai[n1 * dim + n2]);
                                for m2 in 0..dim {
                                    let (yr, yi) = (br[m1 * dim + m2], bi[m1 * dim + m2]);
                                    re[row + n2 * dim + m2] = xr * yr - xi * yi;
                                    im[row + n2 * dim + m2] = xr * yi + xi * yr;
                                }
                            }
                        }
                    }
                    acc.add(r.weight, &re, Some(&im));
                }
            }
        }
        Ok(acc)
    }

    pub fn finish(&self, moments: &Moments) -> Result<DensityMatrixEstimate> {
        if moments.n == 0 {
            return Err(Error::EmptyDataset);
        }
        if !(moments.sum_w > 0.0) {
            return Err(Error::Numerical("record weights sum to zero".into()));
        }
        let (elements, stderr) = moments.finish();
        let sums = (self.arity == 2).then(|| {
            let ex = moments.finish_extra();
            let dim = self.nmax + 1;
            let point = |n: i64, (value, stderr): (f64, f64)| StatPoint { n, value, stderr };
            let total = (0..dim).map(|n| point(n as i64, ex[n])).collect();
            let correlation = (0..=self.nmax / 2)
                .map(|big| {
                    let b = big as i64;
                    (-b..=b).map(|k| point(k, ex[dim + (b * b + k + b) as usize])).collect()
                })
                .collect();
            let h = self.nmax / 2;
            NumberSums { total, correlation, normalisation: point(0, ex[dim + (h + 1) * (h + 1)]) }
        });
        let n = moments.n as f64;
        let weight_mean = moments.sum_w / n;
        let weight_var = (moments.sum_w2 / n - weight_mean * weight_mean).max(0.0);
        Ok(DensityMatrixEstimate {
            arity: self.arity,
            nmax: self.nmax,
            layout: self.layout,
            elements,
            stderr,
            n_records: moments.n,
            mode: self.mode,
            kernel: Some(*self.table.spec()),
            weight_mean,
            weight_stderr: (weight_var / n).sqrt(),
            sums,
        })
    }
}

/// `(min, max)` of the outcomes of both modes.
pub fn joint_range(records: &[HomodyneRecord]) -> Option<(f64, f64)> {
    records.iter().flat_map(|r| [r.x, r.xp]).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

pub fn single_range(records: &[SingleModeRecord]) -> Option<(f64, f64)> {
    records.iter().map(|r| r.x).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// Reconstruct a single-mode state from in-memory records.
pub fn reconstruct_single(
    records: &[SingleModeRecord],
    mode: AnalysisMode,
    spec: KernelSpec,
    layout: Layout,
) -> Result<DensityMatrixEstimate> {
    let range = single_range(records).ok_or(Error::EmptyDataset)?;
    let rec = Reconstructor::new(1, layout, mode, spec, Some(range))?;
    let chunks: Vec<Result<Moments>> = records.par_chunks(CHUNK_SIZE).map(|c| rec.accumulate_single(c)).collect();
    let mut tree = MomentTree::new();
    for c in chunks {
        tree.push(c?);
    }
    rec.finish(&tree.finish().ok_or(Error::EmptyDataset)?)
}

/// Reconstruct the two-mode state from in-memory records.
pub fn reconstruct_joint(
    records: &[HomodyneRecord],
    mode: AnalysisMode,
    spec: KernelSpec,
    layout: Layout,
) -> Result<DensityMatrixEstimate> {
    let range = joint_range(records).ok_or(Error::EmptyDataset)?;
    let rec = Reconstructor::new(2, layout, mode, spec, Some(range))?;
    let chunks: Vec<Result<Moments>> = records.par_chunks(CHUNK_SIZE).map(|c| rec.accumulate_joint(c)).collect();
    let mut tree = MomentTree::new();
    for c in chunks {
        tree.push(c?);
    }
    rec.finish(&tree.finish().ok_or(Error::EmptyDataset)?)
}

fn require_two_mode(est: &DensityMatrixEstimate) -> Result<()> {
    if est.arity != 2 {
        return Err(Error::ArityMismatch { expected: 2, found: est.arity });
    }
    Ok(())
}

/// `s(n) = sum_l p(l, n - l)` for `n = 0..=nmax`. Errors come from the
/// per-record sums when present, else from the element errors in quadrature.
pub fn total_number_dist(est: &DensityMatrixEstimate) -> Result<Vec<StatPoint>> {
    require_two_mode(est)?;
    if let Some(sums) = &est.sums {
        return Ok(sums.total.clone());
    }
    (0..=est.nmax)
        .map(|n| {
            let (mut v, mut e2) = (0.0, 0.0);
            for l in 0..=n {
                let p = est.p(l, n - l)?;
                v += p.value;
                e2 += p.stderr * p.stderr;
            }
            Ok(StatPoint { n: n as i64, value: v, stderr: e2.sqrt() })
        })
        .collect()
}

/// `d_N(n) = sum_{l = max(-n, 0)}^{N} p(l, n + l)` for `n = -N..=N`.
///
/// The largest index touched is `2N`, so `2N <= nmax` is required.
pub fn number_correlation(est: &DensityMatrixEstimate, big_n: usize) -> Result<Vec<StatPoint>> {
    require_two_mode(est)?;
    if 2 * big_n > est.nmax {
        return Err(Error::OutOfRange(format!(
            "d_N needs p(l, n + l) up to index 2N = {}, beyond nmax = {}",
            2 * big_n,
            est.nmax
        )));
    }
    if let Some(sums) = &est.sums {
        return Ok(sums.correlation[big_n].clone());
    }
    let n_big = big_n as i64;
    (-n_big..=n_big)
        .map(|n| {
            let (mut v, mut e2) = (0.0, 0.0);
            for l in (-n).max(0)..=n_big {
                let p = est.p(l as usize, (n + l) as usize)?;
                v += p.value;
                e2 += p.stderr * p.stderr;
            }
            Ok(StatPoint { n, value: v, stderr: e2.sqrt() })
        })
        .collect()
}

pub fn derived_stats(est: &DensityMatrixEstimate, big_n: usize) -> Result<DerivedStats> {
    let p_diag = (0..=est.nmax)
        .map(|n| est.p(n, n).map(|p| StatPoint { n: n as i64, ..p }))
        .collect::<Result<Vec<_>>>()?;
    Ok(DerivedStats { s: total_number_dist(est)?, d: number_correlation(est, big_n)?, big_n, p_diag })
}

/// `sqrt(N) stderr(rho_nn)` for every `n` of a unit-efficiency single-mode
/// estimate.
pub fn stderr_saturation_probe(est: &DensityMatrixEstimate) -> Result<Vec<f64>> {
    if est.arity != 1 {
        return Err(Error::ArityMismatch { expected: 1, found: est.arity });
    }
    if est.mode.kernel_eta() != 1.0 {
        return Err(Error::InvalidParameter("saturation probe needs unit-efficiency kernels".into()));
    }
    let root_n = (est.n_records as f64).sqrt();
    (0..=est.nmax).map(|n| est.diag(n).map(|p| p.stderr * root_n)).collect()
}

/// `sum p(n, m)` over the estimate.
pub fn normalisation(est: &DensityMatrixEstimate) -> Result<StatPoint> {
    require_two_mode(est)?;
    if let Some(sums) = &est.sums {
        return Ok(sums.normalisation);
    }
    let dim = est.dim();
    let (mut v, mut e2) = (0.0, 0.0);
    for n in 0..dim {
        for m in 0..dim {
            let p = est.p(n, m)?;
            v += p.value;
            e2 += p.stderr * p.stderr;
        }
    }
    Ok(StatPoint { n: 0, value: v, stderr: e2.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nopa::TwinBeamParams;
    use crate::sampler::{generate_single_mode, generate_two_mode, PhaseModel};
    use approx::assert_abs_diff_eq;

    fn moments_with(values: &[(f64, f64)]) -> Moments {
        let mut m = Moments::new(1, false);
        for &(w, v) in values {
            m.add(w, &[v], None);
        }
        m
    }

    #[test]
    fn weighted_moments_match_direct_formula() {
        let data = [(1.0, 2.0), (0.5, -1.0), (2.0, 0.25), (1.5, 3.0)];
        let (mean, err) = moments_with(&data).finish();
        let sw: f64 = data.iter().map(|d| d.0).sum();
        let mu: f64 = data.iter().map(|d| d.0 * d.1).sum::<f64>() / sw;
        let ss: f64 = data.iter().map(|d| d.0 * d.0 * (d.1 - mu).powi(2)).sum();
        assert_abs_diff_eq!(mean[0].re, mu, epsilon = 1e-14);
        assert_abs_diff_eq!(err[0], ss.sqrt() / sw, epsilon = 1e-14);
        // unit weights: population standard deviation over sqrt(N)
        let unit = [(1.0, 1.0), (1.0, 3.0)];
        let (_, err) = moments_with(&unit).finish();
        assert_abs_diff_eq!(err[0], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn tree_merge_is_fixed_by_chunking() {
        let parts: Vec<Moments> = (0..7).map(|k| moments_with(&[(1.0, k as f64 * 0.1), (0.3, 1.0 / (k + 1) as f64)])).collect();
        let run = || {
            let mut t = MomentTree::new();
            for p in &parts {
                t.push(p.clone());
            }
            t.finish().unwrap()
        };
        assert_eq!(run(), run());
        let mut linear = parts[0].clone();
        for p in &parts[1..] {
            linear.merge(p);
        }
        let tree = run();
        assert_eq!(tree.n, 14);
        assert_abs_diff_eq!(tree.wv_re[0], linear.wv_re[0], epsilon = 1e-14);
        assert!(MomentTree::new().finish().is_none());
    }

    #[test]
    fn mode_validation() {
        assert!(matches!(AnalysisMode::Bare { eta: 0.5 }.validate(), Err(Error::EtaBelowBound { .. })));
        assert!(AnalysisMode::DressedLoss { eta: 0.4 }.validate().is_ok());
        assert!(AnalysisMode::DressedLoss { eta: 1.4 }.validate().is_err());
        assert_eq!(AnalysisMode::DressedLoss { eta: 0.64 }.rescale(), 0.8);
        let spec = KernelSpec::new(0.9, 4).unwrap();
        assert!(Reconstructor::new(1, Layout::Diagonal, AnalysisMode::DressedGaussian, spec, None).is_err());
        let json = serde_json::to_string(&AnalysisMode::Bare { eta: 0.9 }).unwrap();
        assert_eq!(json, r#"{"kind":"bare","eta":0.9}"#);
    }

    #[test]
    fn empty_and_mismatched_datasets() {
        let spec = KernelSpec::new(1.0, 3).unwrap();
        assert!(matches!(
            reconstruct_single(&[], AnalysisMode::DressedGaussian, spec, Layout::Diagonal),
            Err(Error::EmptyDataset)
        ));
        let rec = Reconstructor::new(1, Layout::Diagonal, AnalysisMode::DressedGaussian, spec, None).unwrap();
        assert!(matches!(rec.accumulate_joint(&[]), Err(Error::ArityMismatch { .. })));
    }

    #[test]
    fn vacuum_tomography() {
        let vac = TwinBeamParams::from_nbar(0.0, 1.0).unwrap();
        let recs = generate_single_mode(&vac, 100_000, 3);
        let spec = KernelSpec::new(1.0, 6).unwrap();
        let est = reconstruct_single(&recs, AnalysisMode::Bare { eta: 1.0 }, spec, Layout::Full).unwrap();
        for n in 0..=6 {
            for m in 0..=6 {
                let (v, e) = est.get(n, m).unwrap();
                let want = if n == 0 && m == 0 { 1.0 } else { 0.0 };
                assert!((v - Complex64::new(want, 0.0)).norm() < 3.0 * e * 2f64.sqrt() + 1e-12, "({n},{m}) {v} {e}");
            }
        }
        assert!(est.hermiticity_score() < 1e-9);
    }

    #[test]
    fn thermal_single_mode() {
        let p = TwinBeamParams::from_nbar(3.0, 1.0).unwrap();
        let recs = generate_single_mode(&p, 200_000, 11);
        let spec = KernelSpec::new(1.0, 10).unwrap();
        let est = reconstruct_single(&recs, AnalysisMode::Bare { eta: 1.0 }, spec, Layout::Diagonal).unwrap();
        for n in 0..=10 {
            let d = est.diag(n).unwrap();
            let want = 0.25 * 0.75f64.powi(n as i32);
            assert!((d.value - want).abs() < 3.5 * d.stderr, "n {n}: {} vs {want} +- {}", d.value, d.stderr);
        }
        assert_eq!(est.n_records, 200_000);
        assert_eq!(est.weight_mean, 1.0);
    }

    #[test]
    fn joint_layouts_agree_and_derived_stats() {
        let p = TwinBeamParams::from_nbar(1.0, 1.0).unwrap();
        let recs = generate_two_mode(&p, PhaseModel::IdealUniform, 40_000, 5);
        let spec = KernelSpec::new(1.0, 4).unwrap();
        let diag = reconstruct_joint(&recs, AnalysisMode::DressedGaussian, spec, Layout::Diagonal).unwrap();
        let full = reconstruct_joint(&recs, AnalysisMode::DressedGaussian, spec, Layout::Full).unwrap();
        for n in 0..=4 {
            for m in 0..=4 {
                let a = diag.p(n, m).unwrap();
                let b = full.p(n, m).unwrap();
                assert!((a.value - b.value).abs() < 1e-9 * (1.0 + a.value.abs()));
                assert!((a.stderr - b.stderr).abs() < 1e-9 * (1.0 + a.stderr));
            }
        }
        assert!(full.hermiticity_score() < 1e-9);
        assert!(diag.p(1, 2).is_ok() && diag.get2(1, 2, 2, 1).is_err());
        let s = total_number_dist(&diag).unwrap();
        assert_eq!(s.len(), 5);
        let d = number_correlation(&diag, 2).unwrap();
        assert_eq!(d.iter().map(|p| p.n).collect::<Vec<_>>(), vec![-2, -1, 0, 1, 2]);
        assert!(number_correlation(&diag, 3).is_err());
        let norm = normalisation(&diag).unwrap();
        assert!(norm.value > 1.0 - 0.5f64.powi(5) - 5.0 * norm.stderr && norm.value < 1.0 + 5.0 * norm.stderr);
    }

    #[test]
    fn derived_stats_from_exact_state() {
        let p = TwinBeamParams::from_nbar(10.0, 1.0).unwrap();
        let exact = DensityMatrixEstimate::exact(&FockDensityMatrix::twin_beam(&p, 20), Layout::Diagonal);
        let s = total_number_dist(&exact).unwrap();
        assert_eq!(s[1].value, 0.0);
        for n in 0..=20 {
            assert_abs_diff_eq!(s[n].value, crate::nopa::total_photon_pdf_theory(&p, n), epsilon = 1e-15);
        }
        let d = number_correlation(&exact, 10).unwrap();
        assert_abs_diff_eq!(d[10].value, 1.0 - (10.0f64 / 11.0).powi(11), epsilon = 1e-12);
        assert!(d.iter().filter(|x| x.n != 0).all(|x| x.value == 0.0));
        let stats = derived_stats(&exact, 10).unwrap();
        assert_eq!(stats.p_diag.len(), 21);
        assert!(stderr_saturation_probe(&exact).is_err());
    }

    #[test]
    fn chunk_results_are_thread_independent() {
        let p = TwinBeamParams::from_nbar(2.0, 1.0).unwrap();
        let recs = generate_two_mode(&p, PhaseModel::SelfHomodyne, 3 * CHUNK_SIZE + 17, 9);
        let spec = KernelSpec::new(1.0, 5).unwrap();
        let a = reconstruct_joint(&recs, AnalysisMode::DressedGaussian, spec, Layout::Diagonal).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| reconstruct_joint(&recs, AnalysisMode::DressedGaussian, spec, Layout::Diagonal).unwrap());
        assert_eq!(a, b);
        assert!((a.weight_mean - 1.0).abs() < 4.0 * a.weight_stderr);
    }
    #[test]
    fn number_sums_match_per_record_combinations() {
        let p = TwinBeamParams::from_nbar(1.5, 1.0).unwrap();
        let recs = generate_two_mode(&p, PhaseModel::SelfHomodyne, 3000, 21);
        let spec = KernelSpec::new(1.0, 5).unwrap();
        for layout in [Layout::Diagonal, Layout::Full] {
            let est = reconstruct_joint(&recs, AnalysisMode::DressedGaussian, spec, layout).unwrap();
            let rec = Reconstructor::new(2, layout, AnalysisMode::DressedGaussian, spec, joint_range(&recs)).unwrap();
            // one estimate per record gives that record's p(n, m)
            let per: Vec<DensityMatrixEstimate> =
                recs.iter().map(|r| rec.finish(&rec.accumulate_joint(std::slice::from_ref(r)).unwrap()).unwrap()).collect();
            let stat = |f: &dyn Fn(&DensityMatrixEstimate) -> f64| {
                let sw: f64 = recs.iter().map(|r| r.weight).sum();
                let mean = recs.iter().zip(&per).map(|(r, e)| r.weight * f(e)).sum::<f64>() / sw;
                let ss: f64 = recs.iter().zip(&per).map(|(r, e)| (r.weight * (f(e) - mean)).powi(2)).sum();
                (mean, ss.sqrt() / sw)
            };
            let s = total_number_dist(&est).unwrap();
            for n in 0..=5usize {
                let (v, e) = stat(&|x| (0..=n).map(|l| x.p(l, n - l).unwrap().value).sum());
                assert!((s[n].value - v).abs() < 1e-10 && (s[n].stderr - e).abs() < 1e-10, "s({n})");
            }
            for big in 0..=2i64 {
                let d = number_correlation(&est, big as usize).unwrap();
                for k in -big..=big {
                    let (v, e) = stat(&|x| {
                        ((-k).max(0)..=big).map(|l| x.p(l as usize, (l + k) as usize).unwrap().value).sum()
                    });
                    let got = d[(k + big) as usize];
                    assert!((got.value - v).abs() < 1e-10 && (got.stderr - e).abs() < 1e-10, "d_{big}({k})");
                }
            }
            let (v, e) = stat(&|x| (0..36).map(|i| x.p(i / 6, i % 6).unwrap().value).sum());
            let norm = normalisation(&est).unwrap();
            assert!((norm.value - v).abs() < 1e-10 && (norm.stderr - e).abs() < 1e-10);
        }
    }
}
