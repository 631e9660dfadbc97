//! On-disk formats: record CSVs with JSON sidecars, estimate JSON and
//! statistics CSVs.
//!
//! Every file is written to `<path>.partial` and renamed into place once
//! complete, so an interrupted run never leaves a file that looks finished.
//! Outputs carry a [`Provenance`] block and no timestamps; identical inputs
//! give byte-identical files.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::estimator::{joint_range, single_range, AnalysisMode, DensityMatrixEstimate, Layout, MomentTree, Moments, Reconstructor, StatPoint};
use crate::kernel::KernelSpec;
use crate::nopa::{gain, TwinBeamParams};
use crate::sampler::{DatasetMeta, HomodyneRecord, RecordSink, SingleModeRecord, CHUNK_SIZE};
use crate::{Error, Result, CODE_VERSION};

pub const TWO_MODE_COLUMNS: [&str; 5] = ["x", "xp", "phi", "psi", "weight"];
pub const SUM_PHASE_COLUMN: &str = "sumphase";
pub const SINGLE_MODE_COLUMNS: [&str; 3] = ["x", "phi", "weight"];
pub const ESTIMATE_FORMAT_VERSION: u32 = 1;

/// Where an output came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub code_version: String,
    pub command: String,
    /// Effective configuration, verbatim.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputHash>,
    pub threads: usize,
}

impl Provenance {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>, threads: usize) -> Self {
        Provenance { code_version: CODE_VERSION.to_string(), command: command.to_string(), config, seed, inputs: Vec::new(), threads }
    }

    /// Record an input file by base name and content hash.
    pub fn with_input(mut self, path: &Path) -> Result<Self> {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.inputs.push(InputHash { name, sha256: file_sha256(path)? });
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub name: String,
    pub sha256: String,
}

/// JSON sidecar stored next to a record CSV as `<csv>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub meta: DatasetMeta,
    pub columns: Vec<String>,
    pub sha256: String,
    pub bytes: u64,
    pub complete: bool,
    pub provenance: Provenance,
}

/// Estimate JSON written by `reconstruct`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateFile {
    pub format_version: u32,
    pub provenance: Provenance,
    pub estimate: DensityMatrixEstimate,
}

/// JSON sidecar of a statistics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSidecar {
    pub statistic: String,
    pub sha256: String,
    pub provenance: Provenance,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(to_hex(&hasher.finalize()))
}

/// Write `bytes` to `path` via a `.partial` file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = partial_path(path);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::InvalidFile { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn read_estimate(path: &Path) -> Result<EstimateFile> {
    let file: EstimateFile = read_json(path)?;
    if file.format_version != ESTIMATE_FORMAT_VERSION {
        return Err(Error::InvalidFile {
            path: path.to_path_buf(),
            reason: format!("unsupported estimate format version {}", file.format_version),
        });
    }
    Ok(file)
}

/// Write `n,value,stderr` rows plus a `<path>.meta.json` sidecar.
pub fn write_stats_csv(path: &Path, statistic: &str, points: &[StatPoint], provenance: &Provenance) -> Result<()> {
    let mut body = String::from("n,value,stderr\n");
    for p in points {
        body.push_str(&format!("{},{},{}\n", p.n, p.value, p.stderr));
    }
    write_atomic(path, body.as_bytes())?;
    let sidecar = StatsSidecar {
        statistic: statistic.to_string(),
        sha256: to_hex(&Sha256::digest(body.as_bytes())),
        provenance: provenance.clone(),
    };
    write_json(&sidecar_path(path), &sidecar)
}

pub fn read_stats_csv(path: &Path) -> Result<Vec<StatPoint>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let (n, value, stderr): (i64, f64, f64) = row?;
        out.push(StatPoint { n, value, stderr });
    }
    Ok(out)
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
    bytes: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Streaming record CSV writer.
///
/// Floats use Rust's shortest round-trip formatting, so reading a file back
/// reproduces the generated records bit for bit.
pub struct CsvRecordWriter {
    path: PathBuf,
    out: HashingWriter<BufWriter<File>>,
    arity: u8,
    sum_phase: bool,
    written: u64,
    line: String,
}

impl CsvRecordWriter {
    /// `sum_phase` adds the input-phase-sum column (two-mode, self-homodyne only).
    pub fn create(path: &Path, arity: u8, sum_phase: bool) -> Result<Self> {
        if arity != 1 && arity != 2 {
            return Err(Error::InvalidParameter(format!("arity must be 1 or 2, got {arity}")));
        }
        if arity == 1 && sum_phase {
            return Err(Error::InvalidParameter("single-mode records carry no phase sum".into()));
        }
        let file = File::create(partial_path(path))?;
        let mut w = CsvRecordWriter {
            path: path.to_path_buf(),
            out: HashingWriter { inner: BufWriter::with_capacity(1 << 20, file), hasher: Sha256::new(), bytes: 0 },
            arity,
            sum_phase,
            written: 0,
            line: String::with_capacity(128),
        };
        let header = w.columns().join(",");
        writeln!(w.out, "{header}")?;
        Ok(w)
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<&str> = if self.arity == 2 { TWO_MODE_COLUMNS.to_vec() } else { SINGLE_MODE_COLUMNS.to_vec() };
        if self.sum_phase {
            cols.push(SUM_PHASE_COLUMN);
        }
        cols.into_iter().map(String::from).collect()
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    /// Flush, rename into place and write the sidecar.
    pub fn finish(mut self, meta: DatasetMeta, provenance: Provenance) -> Result<DatasetSidecar> {
        if meta.n_records != self.written {
            return Err(Error::Numerical(format!("metadata claims {} records, {} written", meta.n_records, self.written)));
        }
        self.out.flush()?;
        let columns = self.columns();
        let HashingWriter { inner, hasher, bytes } = self.out;
        let file = inner.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        file.sync_all()?;
        drop(file);
        fs::rename(partial_path(&self.path), &self.path)?;
        let sidecar = DatasetSidecar {
            meta,
            columns,
            sha256: to_hex(&hasher.finalize()),
            bytes,
            complete: true,
            provenance,
        };
        write_json(&sidecar_path(&self.path), &sidecar)?;
        Ok(sidecar)
    }
}

impl RecordSink for CsvRecordWriter {
    fn write_two_mode(&mut self, records: &[HomodyneRecord]) -> Result<()> {
        if self.arity != 2 {
            return Err(Error::ArityMismatch { expected: self.arity, found: 2 });
        }
        use std::fmt::Write as _;
        for r in records {
            self.line.clear();
            let _ = write!(self.line, "{},{},{},{},{}", r.x, r.xp, r.phi, r.psi, r.weight);
            if self.sum_phase {
                let s = r.sum_phase.ok_or_else(|| Error::InvalidParameter("record lacks the phase sum".into()))?;
                let _ = write!(self.line, ",{s}");
            }
            self.line.push('\n');
            self.out.write_all(self.line.as_bytes())?;
        }
        self.written += records.len() as u64;
        Ok(())
    }

    fn write_single_mode(&mut self, records: &[SingleModeRecord]) -> Result<()> {
        if self.arity != 1 {
            return Err(Error::ArityMismatch { expected: self.arity, found: 1 });
        }
        use std::fmt::Write as _;
        for r in records {
            self.line.clear();
            let _ = writeln!(self.line, "{},{},{}", r.x, r.phi, r.weight);
            self.out.write_all(self.line.as_bytes())?;
        }
        self.written += records.len() as u64;
        Ok(())
    }
}

pub fn read_sidecar(path: &Path) -> Result<Option<DatasetSidecar>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    read_json(&side).map(Some)
}

/// Chunked reader over a record CSV; the arity is taken from the header.
pub struct RecordReader {
    path: PathBuf,
    rdr: csv::Reader<BufReader<File>>,
    arity: u8,
    sum_phase: bool,
    row: csv::ByteRecord,
    read: u64,
}

impl RecordReader {
    pub fn open(path: &Path) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidFile { path: path.to_path_buf(), reason };
        let file = File::open(path)?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::with_capacity(1 << 20, file));
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let (arity, sum_phase) = if header == SINGLE_MODE_COLUMNS {
            (1, false)
        } else if header == TWO_MODE_COLUMNS {
            (2, false)
        } else if header.len() == 6 && header[..5] == TWO_MODE_COLUMNS && header[5] == SUM_PHASE_COLUMN {
            (2, true)
        } else if header.iter().all(|h| h.is_empty()) {
            return Err(invalid("file has no header".into()));
        } else {
            return Err(invalid(format!("unrecognised header {}", header.join(","))));
        };
        if let Some(side) = read_sidecar(path)? {
            if !side.complete {
                return Err(invalid("sidecar marks the dataset incomplete".into()));
            }
            if side.meta.modes != arity {
                return Err(invalid(format!("sidecar declares {} modes, header has {arity}", side.meta.modes)));
            }
        }
        Ok(RecordReader { path: path.to_path_buf(), rdr, arity, sum_phase, row: csv::ByteRecord::new(), read: 0 })
    }

    pub fn arity(&self) -> u8 {
        self.arity
    }

    pub fn has_sum_phase(&self) -> bool {
        self.sum_phase
    }

    pub fn records_read(&self) -> u64 {
        self.read
    }

    fn field(&self, i: usize) -> Result<f64> {
        let raw = self.row.get(i).unwrap_or(b"");
        let v = std::str::from_utf8(raw).ok().and_then(|s| s.trim().parse::<f64>().ok()).filter(|v| v.is_finite());
        v.ok_or_else(|| Error::InvalidFile {
            path: self.path.clone(),
            reason: format!("record {}: field {} is not a finite number", self.read + 1, i + 1),
        })
    }

    fn weight(&self, i: usize) -> Result<f64> {
        let w = self.field(i)?;
        if w <= 0.0 {
            return Err(Error::InvalidFile { path: self.path.clone(), reason: format!("record {}: non-positive weight", self.read + 1) });
        }
        Ok(w)
    }

    /// Replace `buf` with up to `max` records; returns how many were read.
    pub fn next_two_mode(&mut self, max: usize, buf: &mut Vec<HomodyneRecord>) -> Result<usize> {
        if self.arity != 2 {
            return Err(Error::ArityMismatch { expected: 2, found: self.arity });
        }
        buf.clear();
        while buf.len() < max && self.rdr.read_byte_record(&mut self.row)? {
            let rec = HomodyneRecord {
                x: self.field(0)?,
                xp: self.field(1)?,
                phi: self.field(2)?,
                psi: self.field(3)?,
                weight: self.weight(4)?,
                sum_phase: if self.sum_phase { Some(self.field(5)?) } else { None },
            };
            buf.push(rec);
            self.read += 1;
        }
        Ok(buf.len())
    }

    pub fn next_single_mode(&mut self, max: usize, buf: &mut Vec<SingleModeRecord>) -> Result<usize> {
        if self.arity != 1 {
            return Err(Error::ArityMismatch { expected: 1, found: self.arity });
        }
        buf.clear();
        while buf.len() < max && self.rdr.read_byte_record(&mut self.row)? {
            buf.push(SingleModeRecord { x: self.field(0)?, phi: self.field(1)?, weight: self.weight(2)? });
            self.read += 1;
        }
        Ok(buf.len())
    }
}

pub fn read_two_mode(path: &Path) -> Result<Vec<HomodyneRecord>> {
    let mut r = RecordReader::open(path)?;
    let mut all = Vec::new();
    let mut buf = Vec::new();
    while r.next_two_mode(1 << 16, &mut buf)? > 0 {
        all.extend_from_slice(&buf);
    }
    Ok(all)
}

pub fn read_single_mode(path: &Path) -> Result<Vec<SingleModeRecord>> {
    let mut r = RecordReader::open(path)?;
    let mut all = Vec::new();
    let mut buf = Vec::new();
    while r.next_single_mode(1 << 16, &mut buf)? > 0 {
        all.extend_from_slice(&buf);
    }
    Ok(all)
}

/// Check a dataset against its sidecar: content hash and record count.
pub fn verify_dataset(path: &Path) -> Result<DatasetSidecar> {
    let invalid = |reason: String| Error::InvalidFile { path: path.to_path_buf(), reason };
    let side = read_sidecar(path)?.ok_or_else(|| invalid("missing metadata sidecar".into()))?;
    if !side.complete {
        return Err(invalid("dataset marked incomplete".into()));
    }
    let hash = file_sha256(path)?;
    if hash != side.sha256 {
        return Err(invalid(format!("content hash {hash} does not match sidecar {}", side.sha256)));
    }
    Ok(side)
}

fn widen(acc: Option<(f64, f64)>, r: Option<(f64, f64)>) -> Option<(f64, f64)> {
    match (acc, r) {
        (Some((a, b)), Some((c, d))) => Some((a.min(c), b.max(d))),
        (a, b) => a.or(b),
    }
}

/// Read `CHUNK_SIZE` chunks in batches and fold them through a [`MomentTree`],
/// so the result matches the in-memory reconstruction bit for bit.
fn stream_moments<T: Send + Sync>(
    reader: &mut RecordReader,
    read: impl Fn(&mut RecordReader, &mut Vec<T>) -> Result<usize>,
    accumulate: impl Fn(&[T]) -> Result<Moments> + Sync,
) -> Result<Option<Moments>> {
    let batch = rayon::current_num_threads().max(1) * 2;
    let mut tree = MomentTree::new();
    loop {
        let mut chunks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut buf = Vec::with_capacity(CHUNK_SIZE);
            if read(reader, &mut buf)? == 0 {
                break;
            }
            chunks.push(buf);
        }
        if chunks.is_empty() {
            break;
        }
        let moments: Vec<Result<Moments>> = chunks.par_iter().map(|c| accumulate(c)).collect();
        for m in moments {
            tree.push(m?);
        }
    }
    Ok(tree.finish())
}

/// Reconstruct straight from a record CSV in two streaming passes (outcome
/// range, then kernel averages).
///
/// With `weight_params`, stored importance weights are checked against
/// `1/g` recomputed from the phase-sum column, where present.
pub fn reconstruct_file(
    path: &Path,
    mode: AnalysisMode,
    spec: KernelSpec,
    layout: Layout,
    weight_params: Option<&TwinBeamParams>,
) -> Result<DensityMatrixEstimate> {
    let mut reader = RecordReader::open(path)?;
    let arity = reader.arity();
    let mut range = None;
    if arity == 2 {
        let mut buf = Vec::new();
        while reader.next_two_mode(CHUNK_SIZE, &mut buf)? > 0 {
            range = widen(range, joint_range(&buf));
            if let Some(p) = weight_params {
                check_weights(path, p, &buf)?;
            }
        }
    } else {
        let mut buf = Vec::new();
        while reader.next_single_mode(CHUNK_SIZE, &mut buf)? > 0 {
            range = widen(range, single_range(&buf));
        }
    }
    let range = range.ok_or(Error::EmptyDataset)?;
    let rec = Reconstructor::new(arity, layout, mode, spec, Some(range))?;
    let mut reader = RecordReader::open(path)?;
    let moments = if arity == 2 {
        stream_moments(&mut reader, |r, b| r.next_two_mode(CHUNK_SIZE, b), |c| rec.accumulate_joint(c))?
    } else {
        stream_moments(&mut reader, |r, b| r.next_single_mode(CHUNK_SIZE, b), |c| rec.accumulate_single(c))?
    };
    rec.finish(&moments.ok_or(Error::EmptyDataset)?)
}

/// Relative agreement required between stored and recomputed weights.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

fn check_weights(path: &Path, params: &TwinBeamParams, records: &[HomodyneRecord]) -> Result<()> {
    for r in records {
        if let Some(s) = r.sum_phase {
            let expect = 1.0 / gain(params, s);
            if (r.weight - expect).abs() > WEIGHT_TOLERANCE * expect {
                return Err(Error::InvalidFile {
                    path: path.to_path_buf(),
                    reason: format!("stored weight {} disagrees with 1/g = {expect}", r.weight),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nopa::TwinBeamParams;
    use crate::sampler::{generate_dataset, generate_two_mode, PhaseModel};

    fn write(dir: &Path, model: Option<PhaseModel>, n: usize) -> (PathBuf, DatasetSidecar) {
        let p = TwinBeamParams::from_nbar(3.0, 0.9).unwrap();
        let path = dir.join("d.csv");
        let arity = if model.is_some() { 2 } else { 1 };
        let mut w = CsvRecordWriter::create(&path, arity, model == Some(PhaseModel::SelfHomodyne)).unwrap();
        let meta = generate_dataset(&p, model, n, 5, &mut w).unwrap();
        let side = w.finish(meta, Provenance::new("simulate", serde_json::json!({}), Some(5), 1)).unwrap();
        (path, side)
    }

    #[test]
    fn two_mode_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (path, side) = write(dir.path(), Some(PhaseModel::SelfHomodyne), 70_000);
        assert!(!partial_path(&path).exists());
        assert_eq!(side.columns.last().unwrap(), SUM_PHASE_COLUMN);
        let back = read_two_mode(&path).unwrap();
        let p = TwinBeamParams::from_nbar(3.0, 0.9).unwrap();
        assert_eq!(back, generate_two_mode(&p, PhaseModel::SelfHomodyne, 70_000, 5));
        assert_eq!(verify_dataset(&path).unwrap().meta.n_records, 70_000);
    }

    #[test]
    fn single_mode_round_trip_and_arity() {
        let dir = tempfile::tempdir().unwrap();
        let (path, _) = write(dir.path(), None, 1000);
        let mut r = RecordReader::open(&path).unwrap();
        assert_eq!(r.arity(), 1);
        let mut buf = Vec::new();
        assert!(matches!(r.next_two_mode(10, &mut buf), Err(Error::ArityMismatch { .. })));
        assert_eq!(read_single_mode(&path).unwrap().len(), 1000);
    }

    #[test]
    fn tampered_and_malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (path, _) = write(dir.path(), Some(PhaseModel::IdealUniform), 100);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("1,2,3,4,1\n");
        fs::write(&path, &text).unwrap();
        assert!(matches!(verify_dataset(&path), Err(Error::InvalidFile { .. })));

        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "a,b\n1,2\n").unwrap();
        assert!(RecordReader::open(&bad).is_err());
        fs::write(&bad, "x,phi,weight\n1,nan,1\n").unwrap();
        assert!(read_single_mode(&bad).is_err());
        fs::write(&bad, "x,phi,weight\n1,0.5,0\n").unwrap();
        assert!(read_single_mode(&bad).is_err());
        fs::write(&bad, "").unwrap();
        assert!(RecordReader::open(&bad).is_err());
    }

    #[test]
    fn file_reconstruction_matches_in_memory() {
        use crate::estimator::reconstruct_joint;
        let dir = tempfile::tempdir().unwrap();
        let (path, side) = write(dir.path(), Some(PhaseModel::SelfHomodyne), 140_000);
        let mode = AnalysisMode::Bare { eta: 0.9 };
        let spec = KernelSpec::new(0.9, 4).unwrap();
        let from_file = reconstruct_file(&path, mode, spec, Layout::Diagonal, Some(&side.meta.params)).unwrap();
        let recs = read_two_mode(&path).unwrap();
        assert_eq!(from_file, reconstruct_joint(&recs, mode, spec, Layout::Diagonal).unwrap());

        let wrong = TwinBeamParams::from_nbar(5.0, 0.9).unwrap();
        assert!(reconstruct_file(&path, mode, spec, Layout::Diagonal, Some(&wrong)).is_err());
        let empty = dir.path().join("e.csv");
        fs::write(&empty, "x,phi,weight\n").unwrap();
        assert!(matches!(reconstruct_file(&empty, mode, spec, Layout::Diagonal, None), Err(Error::EmptyDataset)));
    }

    #[test]
    fn stats_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let pts = vec![StatPoint { n: -1, value: 0.1, stderr: 1e-7 }, StatPoint { n: 0, value: 1.0 / 3.0, stderr: 0.0 }];
        write_stats_csv(&path, "total", &pts, &Provenance::new("analyze", serde_json::json!({"k": 1}), None, 1)).unwrap();
        assert_eq!(read_stats_csv(&path).unwrap(), pts);
        let side: StatsSidecar = read_json(&sidecar_path(&path)).unwrap();
        assert_eq!(side.sha256, file_sha256(&path).unwrap());
    }
}
