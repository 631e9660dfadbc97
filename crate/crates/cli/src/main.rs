//! `twinbeam`: simulate, reconstruct, analyze, theory, validate.
//!
//! Exit codes: 0 success, 1 validation failure, 2 invalid configuration or
//! I/O error, 3 efficiency at or below the tomographic bound.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use twinbeam::estimator::{
    number_correlation, stderr_saturation_probe, total_number_dist, AnalysisMode, Layout, StatPoint,
};
use twinbeam::kernel::{KernelSpec, KernelTable};
use twinbeam::nopa::{
    correlation_theory, diag45_photon_pdf, joint_photon_pdf, marginal_thermal_pdf, total_photon_pdf_theory,
    TwinBeamParams,
};
use twinbeam::records::{
    read_estimate, read_sidecar, reconstruct_file, sidecar_path, to_json_bytes, verify_dataset, write_atomic,
    write_json, write_stats_csv, CsvRecordWriter, EstimateFile, Provenance, ESTIMATE_FORMAT_VERSION,
};
use twinbeam::sampler::{generate_dataset, PhaseModel};
use twinbeam::validate::{self, COMPLETENESS_ETAS};

#[derive(Parser)]
#[command(name = "twinbeam", version, about = "Self-homodyne tomography of twin beams")]
struct Cli {
    /// Worker threads (recorded in every output).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a record CSV with a JSON metadata sidecar.
    Simulate(SimulateArgs),
    /// Reconstruct a density matrix from a record CSV.
    Reconstruct(ReconstructArgs),
    /// Derive photon-number statistics from an estimate.
    Analyze(AnalyzeArgs),
    /// Write exact photon-number distributions.
    Theory(TheoryArgs),
    /// Run the built-in oracle checks.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum PhaseModelArg {
    Ideal,
    SelfHomodyne,
}

impl From<PhaseModelArg> for PhaseModel {
    fn from(p: PhaseModelArg) -> Self {
        match p {
            PhaseModelArg::Ideal => PhaseModel::IdealUniform,
            PhaseModelArg::SelfHomodyne => PhaseModel::SelfHomodyne,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    Bare,
    DressedGaussian,
    DressedLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum LayoutArg {
    Diagonal,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum StatArg {
    Total,
    Correlation,
    Diag,
    Saturation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum DistArg {
    Joint,
    Marginal,
    Total,
    Corr,
    Diag45,
}

/// Every setting a command can take; a `--config` JSON file uses the same
/// keys (snake_case) and command-line flags override it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    nbar: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phase_model: Option<PhaseModelArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    modes: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    samples: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nmax: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<ModeArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layout: Option<LayoutArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k_cutoff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    quadrature_nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimate: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stat: Option<StatArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    big_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dist: Option<DistArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

impl ExperimentConfig {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mean photon number per mode.
    #[arg(long)]
    nbar: Option<f64>,
    /// Detector quantum efficiency in (0, 1].
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    samples: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    phase_model: Option<PhaseModelArg>,
    /// 2 for joint records, 1 for one mode alone.
    #[arg(long)]
    modes: Option<u8>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct ReconstructArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Efficiency for bare and loss-dressed analysis; defaults to the dataset's.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    nmax: Option<usize>,
    #[arg(long, value_enum)]
    layout: Option<LayoutArg>,
    #[arg(long)]
    k_cutoff: Option<f64>,
    #[arg(long)]
    quadrature_nodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    estimate: Option<PathBuf>,
    #[arg(long, value_enum)]
    stat: Option<StatArg>,
    /// Upper summation index of the correlation statistic.
    #[arg(long = "big-n")]
    big_n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct TheoryArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "tau")]
    nbar: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    dist: Option<DistArg>,
    #[arg(long)]
    nmax: Option<usize>,
    #[arg(long = "big-n")]
    big_n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct ValidateArgs {
    /// Efficiencies for the kernel completeness suite (repeatable).
    #[arg(long = "kernel-eta")]
    kernel_eta: Vec<f64>,
    /// Also write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// A failed validation run, distinct from configuration errors.
#[derive(Debug)]
struct ValidationFailed(usize);

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} validation check(s) failed", self.0)
    }
}

impl std::error::Error for ValidationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ValidationFailed>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(twinbeam::Error::EtaBelowBound { .. }) = cause.downcast_ref::<twinbeam::Error>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Analyze(a) => analyze(a),
        Command::Theory(a) => theory(a),
        Command::Validate(a) => validate_cmd(a),
    }
}

fn threads() -> usize {
    rayon::current_num_threads()
}

fn required<T>(v: Option<T>, flag: &str) -> anyhow::Result<T> {
    v.ok_or_else(|| anyhow!("missing required setting --{flag}"))
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let base = ExperimentConfig::load(a.config.as_deref())?;
    let modes = a.modes.or(base.modes).unwrap_or(2);
    if modes != 1 && modes != 2 {
        bail!("--modes must be 1 or 2, got {modes}");
    }
    let cfg = ExperimentConfig {
        nbar: Some(required(a.nbar.or(base.nbar), "nbar")?),
        eta: Some(a.eta.or(base.eta).unwrap_or(1.0)),
        samples: Some(required(a.samples.or(base.samples), "samples")?),
        seed: Some(a.seed.or(base.seed).unwrap_or(0)),
        phase_model: if modes == 2 { Some(a.phase_model.or(base.phase_model).unwrap_or(PhaseModelArg::Ideal)) } else { None },
        modes: Some(modes),
        out: Some(required(a.out.or(base.out), "out")?),
        ..Default::default()
    };
    let params = TwinBeamParams::from_nbar(cfg.nbar.unwrap(), cfg.eta.unwrap())?;
    let n = usize::try_from(cfg.samples.unwrap())?;
    let out = cfg.out.clone().unwrap();
    let model = cfg.phase_model.map(PhaseModel::from);
    let mut writer = CsvRecordWriter::create(&out, modes, model == Some(PhaseModel::SelfHomodyne))
        .with_context(|| format!("creating {}", out.display()))?;
    let meta = generate_dataset(&params, model, n, cfg.seed.unwrap(), &mut writer)?;
    let provenance = Provenance::new("simulate", serde_json::to_value(&cfg)?, cfg.seed, threads());
    let side = writer.finish(meta, provenance)?;
    println!("wrote {} records to {} (sha256 {})", side.meta.n_records, out.display(), side.sha256);
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> anyhow::Result<()> {
    let base = ExperimentConfig::load(a.config.as_deref())?;
    let dataset = required(a.dataset.or(base.dataset), "dataset")?;
    let out = required(a.out.or(base.out), "out")?;
    let mode_arg = required(a.mode.or(base.mode), "mode")?;
    let layout_arg = a.layout.or(base.layout).unwrap_or(LayoutArg::Diagonal);
    let nmax = a.nmax.or(base.nmax).unwrap_or(20);

    let sidecar = if read_sidecar(&dataset)?.is_some() { Some(verify_dataset(&dataset)?) } else { None };
    let data_eta = sidecar.as_ref().map(|s| s.meta.params.eta);
    let eta = a.eta.or(base.eta);
    let mode = match mode_arg {
        ModeArg::DressedGaussian => AnalysisMode::DressedGaussian,
        ModeArg::Bare => AnalysisMode::Bare { eta: required(eta.or(data_eta), "eta")? },
        ModeArg::DressedLoss => AnalysisMode::DressedLoss { eta: required(eta.or(data_eta), "eta")? },
    };
    mode.validate()?;
    if let (AnalysisMode::Bare { eta }, Some(d)) = (mode, data_eta) {
        if (eta - d).abs() > 1e-12 {
            bail!("bare analysis at eta = {eta} does not match the dataset efficiency {d}");
        }
    }
    let mut spec = mode.kernel_spec(nmax)?;
    let k_cutoff = a.k_cutoff.or(base.k_cutoff);
    let nodes = a.quadrature_nodes.or(base.quadrature_nodes);
    if k_cutoff.is_some() || nodes.is_some() {
        spec = spec.with_quadrature(k_cutoff.unwrap_or(spec.k_cutoff), nodes.unwrap_or(spec.quadrature_nodes))?;
    }
    let layout = match layout_arg {
        LayoutArg::Diagonal => Layout::Diagonal,
        LayoutArg::Full => Layout::Full,
    };
    let estimate = reconstruct_file(&dataset, mode, spec, layout, sidecar.as_ref().map(|s| &s.meta.params))
        .with_context(|| format!("reconstructing from {}", dataset.display()))?;

    let cfg = ExperimentConfig {
        eta: match mode {
            AnalysisMode::Bare { eta } | AnalysisMode::DressedLoss { eta } => Some(eta),
            AnalysisMode::DressedGaussian => None,
        },
        nmax: Some(nmax),
        mode: Some(mode_arg),
        layout: Some(layout_arg),
        k_cutoff: Some(spec.k_cutoff),
        quadrature_nodes: Some(spec.quadrature_nodes),
        dataset: Some(dataset.clone()),
        out: Some(out.clone()),
        ..Default::default()
    };
    let seed = sidecar.as_ref().map(|s| s.meta.seed);
    let provenance = Provenance::new("reconstruct", serde_json::to_value(&cfg)?, seed, threads()).with_input(&dataset)?;
    let file = EstimateFile { format_version: ESTIMATE_FORMAT_VERSION, provenance, estimate };
    write_json(&out, &file)?;
    println!(
        "reconstructed {} elements from {} records into {}",
        file.estimate.elements.len(),
        file.estimate.n_records,
        out.display()
    );
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    let base = ExperimentConfig::load(a.config.as_deref())?;
    let path = required(a.estimate.or(base.estimate), "estimate")?;
    let stat = required(a.stat.or(base.stat), "stat")?;
    let out = required(a.out.or(base.out), "out")?;
    let big_n = a.big_n.or(base.big_n);
    let file = read_estimate(&path)?;
    let est = &file.estimate;
    let (name, points): (&str, Vec<StatPoint>) = match stat {
        StatArg::Total => ("total", total_number_dist(est)?),
        StatArg::Correlation => ("correlation", number_correlation(est, required(big_n, "big-n")?)?),
        StatArg::Diag => (
            "diag",
            (0..=est.nmax)
                .map(|n| if est.arity == 2 { est.p(n, n) } else { est.diag(n) })
                .collect::<twinbeam::Result<Vec<_>>>()?,
        ),
        // value is sqrt(N) stderr(rho_nn); no uncertainty is attached
        StatArg::Saturation => (
            "saturation",
            stderr_saturation_probe(est)?
                .into_iter()
                .enumerate()
                .map(|(n, v)| StatPoint { n: n as i64, value: v, stderr: 0.0 })
                .collect(),
        ),
    };
    let cfg = ExperimentConfig {
        estimate: Some(path.clone()),
        stat: Some(stat),
        big_n: if stat == StatArg::Correlation { big_n } else { None },
        out: Some(out.clone()),
        ..Default::default()
    };
    let provenance =
        Provenance::new("analyze", serde_json::to_value(&cfg)?, file.provenance.seed, threads()).with_input(&path)?;
    write_stats_csv(&out, name, &points, &provenance)?;
    println!("wrote {} {name} rows to {}", points.len(), out.display());
    Ok(())
}

fn theory(a: TheoryArgs) -> anyhow::Result<()> {
    let base = ExperimentConfig::load(a.config.as_deref())?;
    let dist = required(a.dist.or(base.dist), "dist")?;
    let out = required(a.out.or(base.out), "out")?;
    let nmax = a.nmax.or(base.nmax).unwrap_or(20);
    let big_n = a.big_n.or(base.big_n).unwrap_or(10);
    let (nbar, tau) = (a.nbar.or(base.nbar), a.tau.or(base.tau));
    let params = match (nbar, tau) {
        (Some(nbar), None) => TwinBeamParams::from_nbar(nbar, 1.0)?,
        (None, Some(tau)) => TwinBeamParams::from_tau(tau, 1.0)?,
        (None, None) => bail!("one of --nbar or --tau is required"),
        (Some(_), Some(_)) => bail!("--nbar and --tau are mutually exclusive"),
    };
    let mut body = String::new();
    match dist {
        DistArg::Joint | DistArg::Diag45 => {
            body.push_str("n,m,value\n");
            for n in 0..=nmax {
                for m in 0..=nmax {
                    let v = if dist == DistArg::Joint { joint_photon_pdf(&params, n, m) } else { diag45_photon_pdf(&params, n, m) };
                    body.push_str(&format!("{n},{m},{v}\n"));
                }
            }
        }
        DistArg::Marginal | DistArg::Total => {
            body.push_str("n,value\n");
            for n in 0..=nmax {
                let v = if dist == DistArg::Marginal { marginal_thermal_pdf(&params, n) } else { total_photon_pdf_theory(&params, n) };
                body.push_str(&format!("{n},{v}\n"));
            }
        }
        DistArg::Corr => {
            body.push_str("n,value\n");
            let b = big_n as i64;
            for n in -b..=b {
                body.push_str(&format!("{n},{}\n", correlation_theory(&params, big_n, n)));
            }
        }
    }
    let cfg = ExperimentConfig {
        nbar,
        tau,
        dist: Some(dist),
        nmax: if dist == DistArg::Corr { None } else { Some(nmax) },
        big_n: if dist == DistArg::Corr { Some(big_n) } else { None },
        out: Some(out.clone()),
        ..Default::default()
    };
    write_atomic(&out, body.as_bytes())?;
    let provenance = Provenance::new("theory", serde_json::to_value(&cfg)?, None, threads());
    write_atomic(&sidecar_path(&out), &to_json_bytes(&provenance)?)?;
    println!("wrote {dist:?} distribution to {}", out.display());
    Ok(())
}

fn validate_cmd(a: ValidateArgs) -> anyhow::Result<()> {
    let etas = if a.kernel_eta.is_empty() { COMPLETENESS_ETAS.to_vec() } else { a.kernel_eta.clone() };
    for &eta in &etas {
        KernelSpec::new(eta, validate::COMPLETENESS_NMAX).with_context(|| format!("kernel check at eta = {eta}"))?;
    }
    let cache = KernelTable::cache_dir_from_env();
    let report = validate::run_all(&etas, cache.as_deref())?;
    for c in &report.checks {
        println!(
            "{} {:<55} max error {:.3e} (tolerance {:.0e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_error,
            c.tolerance
        );
    }
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(ValidationFailed(failed).into());
    }
    println!("all {} checks passed", report.checks.len());
    Ok(())
}
