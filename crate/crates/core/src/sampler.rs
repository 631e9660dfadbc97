//! Seeded Monte-Carlo generation of self-homodyne records.
//!
//! Records are produced in fixed chunks of [`CHUNK_SIZE`]. Chunk `c` draws from
//! a ChaCha8 stream keyed by `(seed, c)`, so chunks can be generated on any
//! number of workers and still concatenate to the same ordered stream.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nopa::{coeffs_for_sum, gain, TwinBeamParams};
use crate::{Error, Result};

pub const CHUNK_SIZE: usize = 1 << 16;
pub const FORMAT_VERSION: u32 = 1;

/// How the quadrature phases of the two modes are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseModel {
    /// `phi` and `psi` independent and uniform.
    IdealUniform,
    /// Input LO phases uniform; measured quadrature phases correlated through
    /// the amplifier gain, compensated by an importance weight `1/g`.
    SelfHomodyne,
}

/// One joint measurement of both modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomodyneRecord {
    pub x: f64,
    pub xp: f64,
    pub phi: f64,
    pub psi: f64,
    pub weight: f64,
    /// Sum of the two input LO phases (self-homodyne model only).
    pub sum_phase: Option<f64>,
}

/// One measurement of a single mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleModeRecord {
    pub x: f64,
    pub phi: f64,
    pub weight: f64,
}

impl From<&HomodyneRecord> for SingleModeRecord {
    fn from(r: &HomodyneRecord) -> Self {
        SingleModeRecord { x: r.x, phi: r.phi, weight: r.weight }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub params: TwinBeamParams,
    /// `None` for single-mode datasets.
    pub phase_model: Option<PhaseModel>,
    pub modes: u8,
    pub n_records: u64,
    pub seed: u64,
    pub format_version: u32,
    pub chunk_size: usize,
    pub threads: usize,
}

/// Receives generated records in stream order.
pub trait RecordSink {
    fn write_two_mode(&mut self, records: &[HomodyneRecord]) -> Result<()>;
    fn write_single_mode(&mut self, records: &[SingleModeRecord]) -> Result<()>;
}

impl RecordSink for Vec<HomodyneRecord> {
    fn write_two_mode(&mut self, records: &[HomodyneRecord]) -> Result<()> {
        self.extend_from_slice(records);
        Ok(())
    }

    fn write_single_mode(&mut self, _records: &[SingleModeRecord]) -> Result<()> {
        Err(Error::ArityMismatch { expected: 2, found: 1 })
    }
}

fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Quadrature phases `(phi, psi)` seen by the two modes, and the input-phase
/// sum when the self-homodyne model is active.
pub fn draw_phases<R: Rng + ?Sized>(params: &TwinBeamParams, model: PhaseModel, rng: &mut R) -> (f64, f64, Option<f64>) {
    match model {
        PhaseModel::IdealUniform => {
            let phi = rng.random::<f64>() * TAU;
            let psi = rng.random::<f64>() * TAU;
            (phi, psi, None)
        }
        PhaseModel::SelfHomodyne => {
            let lo_v = rng.random::<f64>() * TAU;
            let lo_h = rng.random::<f64>() * TAU;
            let (phi, psi) = self_homodyne_phases(params.tau, lo_v, lo_h);
            (phi, psi, Some(lo_v + lo_h))
        }
    }
}

/// Map input LO phases to the detected quadrature phases:
/// `phi = delta + theta`, `psi = -delta + theta` with
/// `theta = arg(e^{i sigma} + tau e^{-i sigma})`, `sigma`/`delta` the half-sum/half-difference.
pub fn self_homodyne_phases(tau: f64, lo_v: f64, lo_h: f64) -> (f64, f64) {
    let sigma = 0.5 * (lo_v + lo_h);
    let delta = 0.5 * (lo_v - lo_h);
    let theta = (Complex64::from_polar(1.0, sigma) + Complex64::from_polar(tau, -sigma)).arg();
    (delta + theta, -delta + theta)
}

pub fn draw_two_mode<R: Rng + ?Sized>(params: &TwinBeamParams, model: PhaseModel, rng: &mut R) -> HomodyneRecord {
    let (phi, psi, sum_phase) = draw_phases(params, model, rng);
    let k = coeffs_for_sum(params, phi + psi);
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let xp = z1 / (2.0 * k.b2).sqrt();
    let x = k.c * xp + z2 / (2.0 * k.a2).sqrt();
    let weight = match sum_phase {
        Some(s) => 1.0 / gain(params, s),
        None => 1.0,
    };
    HomodyneRecord { x, xp, phi, psi, weight, sum_phase }
}

pub fn draw_single_mode<R: Rng + ?Sized>(params: &TwinBeamParams, rng: &mut R) -> SingleModeRecord {
    let phi = rng.random::<f64>() * TAU;
    let z: f64 = rng.sample(StandardNormal);
    SingleModeRecord { x: z * params.single_variance().sqrt(), phi, weight: 1.0 }
}

fn chunk_len(n_records: usize, chunk: usize) -> usize {
    CHUNK_SIZE.min(n_records - chunk * CHUNK_SIZE)
}

fn chunk_count(n_records: usize) -> usize {
    n_records.div_ceil(CHUNK_SIZE)
}

/// Records of chunk `chunk` of a stream of `n_records`.
pub fn two_mode_chunk(params: &TwinBeamParams, model: PhaseModel, seed: u64, n_records: usize, chunk: usize) -> Vec<HomodyneRecord> {
    let mut rng = chunk_rng(seed, chunk as u64);
    (0..chunk_len(n_records, chunk)).map(|_| draw_two_mode(params, model, &mut rng)).collect()
}

pub fn single_mode_chunk(params: &TwinBeamParams, seed: u64, n_records: usize, chunk: usize) -> Vec<SingleModeRecord> {
    let mut rng = chunk_rng(seed, chunk as u64);
    (0..chunk_len(n_records, chunk)).map(|_| draw_single_mode(params, &mut rng)).collect()
}

/// Generate the two-mode stream chunk by chunk, handing each chunk to `f` in order.
///
/// Chunks are produced in parallel batches; at most one batch is held in memory.
pub fn for_each_two_mode_chunk<F>(params: &TwinBeamParams, model: PhaseModel, n_records: usize, seed: u64, mut f: F) -> Result<()>
where
    F: FnMut(usize, &[HomodyneRecord]) -> Result<()>,
{
    let chunks = chunk_count(n_records);
    let batch = rayon::current_num_threads().max(1) * 2;
    for start in (0..chunks).step_by(batch) {
        let end = (start + batch).min(chunks);
        let generated: Vec<Vec<HomodyneRecord>> =
            (start..end).into_par_iter().map(|c| two_mode_chunk(params, model, seed, n_records, c)).collect();
        for (offset, records) in generated.iter().enumerate() {
            f(start + offset, records)?;
        }
    }
    Ok(())
}

pub fn for_each_single_mode_chunk<F>(params: &TwinBeamParams, n_records: usize, seed: u64, mut f: F) -> Result<()>
where
    F: FnMut(usize, &[SingleModeRecord]) -> Result<()>,
{
    let chunks = chunk_count(n_records);
    let batch = rayon::current_num_threads().max(1) * 2;
    for start in (0..chunks).step_by(batch) {
        let end = (start + batch).min(chunks);
        let generated: Vec<Vec<SingleModeRecord>> =
            (start..end).into_par_iter().map(|c| single_mode_chunk(params, seed, n_records, c)).collect();
        for (offset, records) in generated.iter().enumerate() {
            f(start + offset, records)?;
        }
    }
    Ok(())
}

/// Whole two-mode stream in memory.
pub fn generate_two_mode(params: &TwinBeamParams, model: PhaseModel, n_records: usize, seed: u64) -> Vec<HomodyneRecord> {
    (0..chunk_count(n_records))
        .into_par_iter()
        .flat_map_iter(|c| two_mode_chunk(params, model, seed, n_records, c))
        .collect()
}

pub fn generate_single_mode(params: &TwinBeamParams, n_records: usize, seed: u64) -> Vec<SingleModeRecord> {
    (0..chunk_count(n_records))
        .into_par_iter()
        .flat_map_iter(|c| single_mode_chunk(params, seed, n_records, c))
        .collect()
}

/// Stream a two-mode dataset (`Some(model)`) or single-mode dataset (`None`) into `sink`.
pub fn generate_dataset<S: RecordSink>(
    params: &TwinBeamParams,
    model: Option<PhaseModel>,
    n_records: usize,
    seed: u64,
    sink: &mut S,
) -> Result<DatasetMeta> {
    if n_records == 0 {
        return Err(Error::InvalidParameter("n_records must be at least 1".into()));
    }
    match model {
        Some(model) => for_each_two_mode_chunk(params, model, n_records, seed, |_, recs| sink.write_two_mode(recs))?,
        None => for_each_single_mode_chunk(params, n_records, seed, |_, recs| sink.write_single_mode(recs))?,
    }
    Ok(DatasetMeta {
        params: *params,
        phase_model: model,
        modes: if model.is_some() { 2 } else { 1 },
        n_records: n_records as u64,
        seed,
        format_version: FORMAT_VERSION,
        chunk_size: CHUNK_SIZE,
        threads: rayon::current_num_threads(),
    })
}
