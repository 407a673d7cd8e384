//! Command implementations behind the `qtele` binary.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use qtele_core::experiment::{export_stats, oracle_agreement, run_trajectories, CrossCheck, EnsembleStats};
use qtele_core::EnsembleConfig;
use serde::Serialize;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }

    /// One-line JSON object for standard error.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.message(), "exit_code": self.exit_code() }).to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl From<qtele_core::Error> for CliError {
    fn from(e: qtele_core::Error) -> Self {
        match e {
            qtele_core::Error::InvalidParams(_) | qtele_core::Error::Config(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub trace: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
    }
}

fn ensemble_config(cfg: &RunConfig) -> Result<EnsembleConfig, CliError> {
    let mut e = EnsembleConfig::new(cfg.protocol()?, cfg.trajectory_count, cfg.master_seed);
    e.threads = cfg.threads;
    Ok(e)
}

fn announce_units(cfg: &RunConfig, log: &mut dyn Write) -> std::io::Result<()> {
    let p = &cfg.params;
    writeln!(
        log,
        "params (MHz) Δ={} Ω={} Ω′={} g={} γ={} κ={}, converted to angular frequency (×2π)",
        p.delta, p.omega, p.omega_prime, p.g, p.gamma, p.kappa
    )?;
    if cfg.backend == config::BackendName::FullNumeric && cfg.profile == config::Profile::Paper {
        writeln!(
            log,
            "warning: the full model at paper parameters integrates multi-second protocols at GHz detunings; expect impractical run times"
        )?;
    }
    Ok(())
}

pub struct RunOutput {
    pub stats: EnsembleStats,
    pub files: Vec<PathBuf>,
}

fn simulate(cfg: &RunConfig, trace: bool, log: &mut dyn Write) -> Result<(EnsembleStats, Vec<PathBuf>), CliError> {
    announce_units(cfg, log)?;
    let ens = ensemble_config(cfg)?;
    let (results, warnings) = run_trajectories(&ens)?;
    for w in warnings {
        writeln!(log, "warning: {w}")?;
    }
    let stats = EnsembleStats::from_results(cfg.max_reps, cfg.master_seed, &results);
    let mut files = Vec::new();
    if trace {
        std::fs::create_dir_all(&cfg.output_dir)?;
        let path = cfg.output_dir.join("trace.jsonl");
        let mut out = BufWriter::new(File::create(&path)?);
        for r in &results {
            writeln!(out, "{}", serde_json::json!({ "trajectory": r.index, "input": [[r.input.a.re, r.input.a.im], [r.input.b.re, r.input.b.im]] }))?;
            r.record.write_json_lines(&mut out)?;
        }
        out.flush()?;
        files.push(path);
    }
    Ok((stats, files))
}

/// Runs the ensemble and writes `<output_dir>/ensemble.{csv,json}` and,
/// when tracing, `<output_dir>/trace.jsonl`.
pub fn cmd_run(cfg: &RunConfig, trace: bool, out: &mut dyn Write, log: &mut dyn Write) -> Result<RunOutput, CliError> {
    let (stats, mut files) = simulate(cfg, trace, log)?;
    let paths = export_stats(&stats, &cfg.protocol()?, &cfg.output_dir, "ensemble")?;
    files.extend([paths.csv, paths.json]);
    writeln!(out, "trajectories {} (valid {}), seed {}", stats.trajectory_count, stats.valid_count, stats.master_seed)?;
    writeln!(out, "P({}) = {:.4} ± {:.4}", cfg.max_reps, stats.success_probability(), stats.p_stderr.last().copied().unwrap_or(0.0))?;
    match stats.mean_fidelity() {
        Some(f) => writeln!(out, "F = {f:.6}")?,
        None => writeln!(out, "F = n/a (no successes)")?,
    }
    for (name, count) in &stats.counts {
        writeln!(out, "  {name}: {count}")?;
    }
    for inv in &stats.invalid {
        writeln!(out, "  invalid trajectory {}: {}", inv.index, inv.reason)?;
    }
    for f in &files {
        writeln!(out, "wrote {}", f.display())?;
    }
    Ok(RunOutput { stats, files })
}

#[derive(Serialize)]
struct Fig3Row {
    #[serde(rename = "N")]
    n: u32,
    #[serde(rename = "P")]
    p: f64,
    #[serde(rename = "P_stderr")]
    p_stderr: f64,
}

#[derive(Serialize)]
struct Fig4Row {
    #[serde(rename = "N")]
    n: u32,
    #[serde(rename = "F")]
    f: Option<f64>,
    #[serde(rename = "F_stderr")]
    f_stderr: Option<f64>,
}

#[derive(Serialize)]
struct Fig5Row {
    #[serde(rename = "N")]
    n: u32,
    #[serde(rename = "P")]
    p: f64,
    #[serde(rename = "F")]
    f: Option<f64>,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes fig3.csv (P vs 𝒩), fig4.csv (F vs 𝒩) and fig5.csv (F vs P).
pub fn cmd_figures(cfg: &RunConfig, trace: bool, out: &mut dyn Write, log: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let (stats, mut files) = simulate(cfg, trace, log)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let curve = stats.curve();
    let fig3 = cfg.output_dir.join("fig3.csv");
    let fig4 = cfg.output_dir.join("fig4.csv");
    let fig5 = cfg.output_dir.join("fig5.csv");
    write_rows(&fig3, curve.iter().map(|c| Fig3Row { n: c.n, p: c.p, p_stderr: c.p_stderr }))?;
    write_rows(&fig4, curve.iter().map(|c| Fig4Row { n: c.n, f: c.f, f_stderr: c.f_stderr }))?;
    write_rows(&fig5, curve.iter().map(|c| Fig5Row { n: c.n, p: c.p, f: c.f }))?;
    files.extend([fig3, fig4, fig5]);
    for f in &files {
        writeln!(out, "wrote {}", f.display())?;
    }
    Ok(files)
}

/// Trajectories used by the master-equation cross-check.
pub const CHECK_TRAJECTORIES: usize = 1000;
/// Trace-distance bound of the cross-check.
pub const CHECK_TRACE_DISTANCE: f64 = 0.02;

/// Validity ratios, analytic-vs-numeric pulse agreement and the
/// master-equation cross-check. Returns the names of failed checks.
pub fn cmd_check(cfg: &RunConfig, out: &mut dyn Write, log: &mut dyn Write) -> Result<Vec<String>, CliError> {
    announce_units(cfg, log)?;
    let params = cfg.physical()?;
    let mut failed = Vec::new();
    writeln!(out, "validity conditions (ratio, ≥ {} passes)", qtele_core::dynamics::params::MUCH_GREATER)?;
    for c in params.validity().checks {
        let status = if c.pass { "pass" } else { "warn" };
        writeln!(out, "  {status:4} {:14} {:.3e}", c.name, c.ratio)?;
        if !c.pass {
            failed.push(c.name.to_string());
        }
    }
    if cfg.backend == config::BackendName::FullNumeric {
        writeln!(log, "note: pulse agreement is checked for the effective model")?;
    }
    writeln!(out, "analytic pulses vs effective model (modulus, phase)")?;
    for r in oracle_agreement(&params, 10, cfg.master_seed)? {
        let status = if r.pass { "pass" } else { "FAIL" };
        writeln!(out, "  {status:4} {:32} {:.3e} {:.3e}", r.name, r.modulus, r.phase)?;
        if !r.pass {
            failed.push(r.name);
        }
    }
    let check = CrossCheck::reduced()?;
    let distances = check.run(CHECK_TRAJECTORIES, cfg.master_seed)?;
    let worst = distances.iter().copied().fold(0.0, f64::max);
    let pass = worst < CHECK_TRACE_DISTANCE;
    writeln!(
        out,
        "  {:4} master equation vs {CHECK_TRAJECTORIES} trajectories, max trace distance {worst:.4}",
        if pass { "pass" } else { "FAIL" }
    )?;
    if !pass {
        failed.push("master-equation cross-check".into());
    }
    Ok(failed)
}
