//! Ensembles of protocol runs and their statistics, plus the master-equation
//! reference used to cross-check the trajectory method.
//!
//! Every trajectory gets its own ChaCha stream derived from the master seed
//! and its index, so results do not depend on the thread count. Per-run
//! results are collected in index order and folded sequentially, which keeps
//! floating-point sums bit-identical between runs.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use ode_solvers::{Dopri5, OutputType, System};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    build_effective_hamiltonian, build_full_hamiltonian, build_jump_channels, ChannelMode, Drive, Evolver,
    LaserConfig, Model, NumericEvolver, PhysicalParams, Propagator, Trajectory,
};
use crate::error::{Error, Result};
use crate::hilbert::{build_space, Site, Space, SpaceDescriptor, StateVector, ALICE, BOB, C64};
use crate::protocol::{
    bob_target, Backend, InputState, Outcome, Protocol, ProtocolConfig, ProtocolRecord, NUMERIC_FOCK_CUTOFF,
};
use crate::pulses::{
    apply_beta_rotation, apply_two_laser, apply_wait, solve_pulse_times, wait_diagonal, DEFAULT_T_D_MULTIPLIER,
};

/// Haar-random a|10⟩ + b|01⟩.
pub fn sample_input(rng: &mut impl Rng) -> InputState {
    let cos_chi: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..TAU);
    let a = ((1.0 + cos_chi) / 2.0).max(0.0).sqrt();
    let b = ((1.0 - cos_chi) / 2.0).max(0.0).sqrt();
    InputState {
        a: C64::new(a, 0.0),
        b: C64::from_polar(b, phi),
    }
}

/// ⟨τ|ρ_B|τ⟩ for the target τ = a|10;0⟩ + b|01;0⟩. Population outside that
/// span counts against the fidelity.
pub fn fidelity(space: &Space, bob: &DMatrix<C64>, input: InputState) -> Result<f64> {
    let d = space.site_dim(BOB);
    if bob.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bob.nrows(),
        });
    }
    let t = DVector::from_column_slice(bob_target(space, input)?.amps());
    let f = (t.adjoint() * bob * &t)[(0, 0)].re;
    Ok(f.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSampling {
    HaarUniform,
    /// Trajectory `i` uses entry `i mod len`.
    FixedList(Vec<InputState>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub trajectory_count: usize,
    pub master_seed: u64,
    pub protocol: ProtocolConfig,
    pub input_sampling: InputSampling,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl EnsembleConfig {
    pub fn new(protocol: ProtocolConfig, trajectory_count: usize, master_seed: u64) -> Self {
        Self {
            trajectory_count,
            master_seed,
            protocol,
            input_sampling: InputSampling::HaarUniform,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectory_count == 0 {
            return Err(Error::Config("trajectory_count must be at least 1".into()));
        }
        if let InputSampling::FixedList(list) = &self.input_sampling {
            if list.is_empty() {
                return Err(Error::Config("fixed input list is empty".into()));
            }
            for s in list {
                InputState::new(s.a, s.b)?;
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    fn input_for(&self, index: u64, rng: &mut ChaCha8Rng) -> InputState {
        match &self.input_sampling {
            InputSampling::HaarUniform => sample_input(rng),
            InputSampling::FixedList(list) => list[(index % list.len() as u64) as usize],
        }
    }
}

/// Independent stream `index` of the master seed.
pub fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug)]
pub struct TrajectoryResult {
    pub index: u64,
    pub input: InputState,
    pub outcome: Outcome,
    pub repetitions: u32,
    pub fidelity: Option<f64>,
    pub record: ProtocolRecord,
}

fn in_pool<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

/// All runs of the ensemble, in index order, with the protocol's warnings.
pub fn run_trajectories(config: &EnsembleConfig) -> Result<(Vec<TrajectoryResult>, Vec<String>)> {
    config.validate()?;
    let protocol = Protocol::new(config.protocol.clone())?;
    let results = in_pool(config.threads, || {
        (0..config.trajectory_count as u64)
            .into_par_iter()
            .map(|index| {
                let mut rng = trajectory_rng(config.master_seed, index);
                let input = config.input_for(index, &mut rng);
                let run = protocol.run(input, rng)?;
                let fidelity = match &run.bob {
                    Some(rho) => Some(fidelity(protocol.space(), rho, input)?),
                    None => None,
                };
                Ok(TrajectoryResult {
                    index,
                    input,
                    outcome: run.outcome,
                    repetitions: run.record.repetitions,
                    fidelity,
                    record: run.record,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok((results, protocol.warnings().to_vec()))
}

pub fn run_ensemble(config: &EnsembleConfig) -> Result<EnsembleStats> {
    let (results, _) = run_trajectories(config)?;
    Ok(EnsembleStats::from_results(config.protocol.max_reps, config.master_seed, &results))
}

/// Additive summary of a batch of runs. `merge` is associative and
/// commutative up to floating-point rounding of the fidelity sums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tally {
    pub counts: BTreeMap<&'static str, u64>,
    /// Successes indexed by repetition count.
    pub successes: Vec<u64>,
    pub fidelity_sum: Vec<f64>,
    pub fidelity_sq_sum: Vec<f64>,
    pub invalid: Vec<InvalidTrajectory>,
}

impl Tally {
    pub fn new(max_reps: u32) -> Self {
        let n = max_reps as usize + 1;
        Self {
            counts: Outcome::ALL.iter().map(|o| (o.name(), 0)).collect(),
            successes: vec![0; n],
            fidelity_sum: vec![0.0; n],
            fidelity_sq_sum: vec![0.0; n],
            invalid: Vec::new(),
        }
    }

    pub fn push(&mut self, r: &TrajectoryResult) {
        *self.counts.entry(r.outcome.name()).or_default() += 1;
        if r.outcome == Outcome::Invalid {
            self.invalid.push(InvalidTrajectory {
                index: r.index,
                reason: r.record.invalid_reason.clone().unwrap_or_default(),
            });
        }
        if let (true, Some(f)) = (r.outcome.is_success(), r.fidelity) {
            let k = r.repetitions as usize;
            if k >= self.successes.len() {
                self.successes.resize(k + 1, 0);
                self.fidelity_sum.resize(k + 1, 0.0);
                self.fidelity_sq_sum.resize(k + 1, 0.0);
            }
            self.successes[k] += 1;
            self.fidelity_sum[k] += f;
            self.fidelity_sq_sum[k] += f * f;
        }
    }

    pub fn merge(mut self, other: Tally) -> Tally {
        for (k, v) in other.counts {
            *self.counts.entry(k).or_default() += v;
        }
        let n = self.successes.len().max(other.successes.len());
        self.successes.resize(n, 0);
        self.fidelity_sum.resize(n, 0.0);
        self.fidelity_sq_sum.resize(n, 0.0);
        for k in 0..other.successes.len() {
            self.successes[k] += other.successes[k];
            self.fidelity_sum[k] += other.fidelity_sum[k];
            self.fidelity_sq_sum[k] += other.fidelity_sq_sum[k];
        }
        self.invalid.extend(other.invalid);
        self.invalid.sort_by_key(|t| t.index);
        self
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidTrajectory {
    pub index: u64,
    pub reason: String,
}

/// One row of the P(𝒩), F(𝒩) table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(rename = "N")]
    pub n: u32,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "P_stderr")]
    pub p_stderr: f64,
    #[serde(rename = "F")]
    pub f: Option<f64>,
    #[serde(rename = "F_stderr")]
    pub f_stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub master_seed: u64,
    pub trajectory_count: u64,
    /// Runs that ended in a classified outcome other than `Invalid`; the
    /// denominator of P(𝒩).
    pub valid_count: u64,
    pub max_reps: u32,
    pub counts: BTreeMap<String, u64>,
    pub invalid: Vec<InvalidTrajectory>,
    /// Cumulative success probability, index 𝒩 = 0..=max_reps.
    pub p_of_n: Vec<f64>,
    pub p_stderr: Vec<f64>,
    /// Mean fidelity of successes with at most 𝒩 repetitions.
    pub f_of_n: Vec<Option<f64>>,
    pub f_stderr: Vec<Option<f64>>,
}

impl EnsembleStats {
    pub fn from_results(max_reps: u32, master_seed: u64, results: &[TrajectoryResult]) -> Self {
        let tally = results.iter().fold(Tally::new(max_reps), |mut t, r| {
            t.push(r);
            t
        });
        Self::from_tally(max_reps, master_seed, &tally)
    }

    pub fn from_tally(max_reps: u32, master_seed: u64, tally: &Tally) -> Self {
        let total = tally.total();
        let invalid = tally.counts.get(Outcome::Invalid.name()).copied().unwrap_or(0);
        let valid = total - invalid;
        let n_points = max_reps as usize + 1;
        let (mut p_of_n, mut p_stderr, mut f_of_n, mut f_stderr) = (vec![], vec![], vec![], vec![]);
        let (mut k, mut s, mut s2) = (0u64, 0.0, 0.0);
        for n in 0..n_points {
            if n < tally.successes.len() {
                k += tally.successes[n];
                s += tally.fidelity_sum[n];
                s2 += tally.fidelity_sq_sum[n];
            }
            let p = if valid > 0 { k as f64 / valid as f64 } else { 0.0 };
            p_of_n.push(p);
            p_stderr.push(if valid > 0 { (p * (1.0 - p) / valid as f64).sqrt() } else { 0.0 });
            let mean = (k > 0).then(|| s / k as f64);
            f_of_n.push(mean);
            f_stderr.push(mean.filter(|_| k > 1).map(|m| {
                let var = ((s2 - k as f64 * m * m) / (k - 1) as f64).max(0.0);
                (var / k as f64).sqrt()
            }));
        }
        Self {
            master_seed,
            trajectory_count: total,
            valid_count: valid,
            max_reps,
            counts: tally.counts.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            invalid: tally.invalid.clone(),
            p_of_n,
            p_stderr,
            f_of_n,
            f_stderr,
        }
    }

    pub fn curve(&self) -> Vec<CurvePoint> {
        (0..self.p_of_n.len())
            .map(|n| CurvePoint {
                n: n as u32,
                p: self.p_of_n[n],
                p_stderr: self.p_stderr[n],
                f: self.f_of_n[n],
                f_stderr: self.f_stderr[n],
            })
            .collect()
    }

    /// (P(𝒩), F(𝒩)) pairs for every 𝒩 with at least one success.
    pub fn f_vs_p(&self) -> Vec<(f64, f64)> {
        self.p_of_n
            .iter()
            .zip(&self.f_of_n)
            .filter_map(|(p, f)| f.map(|f| (*p, f)))
            .collect()
    }

    pub fn success_probability(&self) -> f64 {
        self.p_of_n.last().copied().unwrap_or(0.0)
    }

    pub fn mean_fidelity(&self) -> Option<f64> {
        self.f_of_n.last().copied().flatten()
    }

    pub fn count(&self, outcome: Outcome) -> u64 {
        self.counts.get(outcome.name()).copied().unwrap_or(0)
    }
}

pub const CSV_HEADER: [&str; 5] = ["N", "P", "P_stderr", "F", "F_stderr"];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// P(𝒩)/F(𝒩) table; an empty curve gives a header-only file.
pub fn write_curve_csv(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for p in points {
        w.write_record([p.n.to_string(), p.p.to_string(), p.p_stderr.to_string(), opt(p.f), opt(p.f_stderr)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Config(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub master_seed: u64,
    pub trajectory_count: u64,
    pub backend: Backend,
    pub params: PhysicalParams,
    pub fock_cutoff: usize,
    pub max_reps: u32,
    pub t_d_multiplier: f64,
    pub counts: BTreeMap<String, u64>,
    pub invalid: Vec<InvalidTrajectory>,
    pub success_probability: f64,
    pub mean_fidelity: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

impl EnsembleSummary {
    pub fn new(stats: &EnsembleStats, protocol: &ProtocolConfig) -> Self {
        Self {
            master_seed: stats.master_seed,
            trajectory_count: stats.trajectory_count,
            backend: protocol.backend,
            params: protocol.params,
            fock_cutoff: protocol.fock_cutoff,
            max_reps: stats.max_reps,
            t_d_multiplier: protocol.t_d_multiplier,
            counts: stats.counts.clone(),
            invalid: stats.invalid.clone(),
            success_probability: stats.success_probability(),
            mean_fidelity: stats.mean_fidelity(),
            curve: stats.curve(),
        }
    }
}

/// Paths written by [`export_stats`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportPaths {
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Writes `<dir>/<stem>.csv` and `<dir>/<stem>.json`.
pub fn export_stats(stats: &EnsembleStats, protocol: &ProtocolConfig, dir: &Path, stem: &str) -> Result<ExportPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = ExportPaths {
        csv: dir.join(format!("{stem}.csv")),
        json: dir.join(format!("{stem}.json")),
    };
    write_curve_csv(&stats.curve(), &paths.csv)?;
    let out = BufWriter::new(File::create(&paths.json)?);
    serde_json::to_writer_pretty(out, &EnsembleSummary::new(stats, protocol))?;
    Ok(paths)
}

/// Largest Hilbert dimension accepted by [`master_equation_reference`].
pub const MASTER_EQUATION_MAX_DIM: usize = 64;
pub const MASTER_EQUATION_TOLERANCE: f64 = 1e-8;

struct Lindblad {
    h: DMatrix<C64>,
    jumps: Vec<DMatrix<C64>>,
    n: usize,
}

impl Lindblad {
    fn unpack(&self, y: &DVector<f64>) -> DMatrix<C64> {
        let n2 = self.n * self.n;
        DMatrix::from_fn(self.n, self.n, |r, c| {
            let i = c * self.n + r;
            C64::new(y[i], y[n2 + i])
        })
    }

    fn pack(&self, rho: &DMatrix<C64>, y: &mut DVector<f64>) {
        let n2 = self.n * self.n;
        for (i, z) in rho.iter().enumerate() {
            y[i] = z.re;
            y[n2 + i] = z.im;
        }
    }
}

impl System<f64, DVector<f64>> for &Lindblad {
    fn system(&self, _t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
        let rho = self.unpack(y);
        let h_rho = &self.h * &rho;
        let mut d = (h_rho - &rho * self.h.adjoint()) * C64::new(0.0, -1.0);
        for c in &self.jumps {
            d += c * &rho * c.adjoint();
        }
        self.pack(&d, dy);
    }
}

/// Integrates dρ/dt = −i(Hρ − ρH†) + Σ CρC† with adaptive Dormand–Prince
/// steps and returns ρ at each checkpoint (non-decreasing times from 0).
pub fn master_equation_reference(
    space: &Space,
    params: &PhysicalParams,
    model: Model,
    laser: &LaserConfig,
    rho0: &DMatrix<C64>,
    checkpoints: &[f64],
) -> Result<Vec<DMatrix<C64>>> {
    let n = space.dim();
    if n > MASTER_EQUATION_MAX_DIM {
        return Err(Error::InvalidSpace(format!(
            "dimension {n} exceeds {MASTER_EQUATION_MAX_DIM} for dense master-equation integration"
        )));
    }
    if rho0.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: rho0.nrows(),
        });
    }
    let h = match model {
        Model::Full => build_full_hamiltonian(params, laser, space)?,
        Model::Effective => build_effective_hamiltonian(params, laser, space)?,
    };
    let mode = match model {
        Model::Full => ChannelMode::Full,
        Model::Effective => ChannelMode::Effective,
    };
    let jumps = build_jump_channels(params, space, mode)?
        .into_iter()
        .map(|c| c.op.to_dense())
        .collect();
    let sys = Lindblad {
        h: h.to_dense(),
        jumps,
        n,
    };
    let mut y = DVector::zeros(2 * n * n);
    sys.pack(rho0, &mut y);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(checkpoints.len());
    for &tc in checkpoints {
        if !(tc.is_finite() && tc >= t) {
            return Err(Error::Config(format!("checkpoints must be finite and non-decreasing, got {tc} after {t}")));
        }
        if tc > t {
            let mut solver = Dopri5::new(
                &sys,
                t,
                tc,
                tc - t,
                y.clone(),
                MASTER_EQUATION_TOLERANCE,
                MASTER_EQUATION_TOLERANCE,
            );
            solver.set_output(OutputType::Sparse);
            solver
                .integrate()
                .map_err(|e| Error::Numerical(format!("master equation: {e}")))?;
            y = solver
                .y_out()
                .last()
                .cloned()
                .ok_or_else(|| Error::Numerical("master equation produced no output".into()))?;
            t = tc;
        }
        out.push(sys.unpack(&y));
    }
    Ok(out)
}

/// Mean of |ψ⟩⟨ψ| over `count` normalized trajectories at each checkpoint.
pub fn trajectory_average(
    evolver: &dyn Evolver,
    laser: &LaserConfig,
    psi0: &StateVector,
    checkpoints: &[f64],
    count: usize,
    master_seed: u64,
) -> Result<Vec<DMatrix<C64>>> {
    let n = evolver.space().dim();
    let per_run: Vec<Vec<DMatrix<C64>>> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut traj = Trajectory::new(evolver, psi0.clone(), trajectory_rng(master_seed, i))?;
            let mut t = 0.0;
            let mut snaps = Vec::with_capacity(checkpoints.len());
            for &tc in checkpoints {
                traj.run(laser, tc - t, 10_000)?;
                t = tc;
                let v = DVector::from_column_slice(traj.normalized_state()?.amps());
                snaps.push(&v * v.adjoint());
            }
            Ok(snaps)
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![DMatrix::zeros(n, n); checkpoints.len()];
    for snaps in per_run {
        for (a, s) in acc.iter_mut().zip(snaps) {
            *a += s;
        }
    }
    let scale = C64::new(1.0 / count.max(1) as f64, 0.0);
    Ok(acc.into_iter().map(|a| a * scale).collect())
}

/// Largest allowed modulus difference between an analytic map and the effective model.
pub const ORACLE_MODULUS_TOLERANCE: f64 = 2e-2;
/// Largest allowed relative-phase difference, in radians.
pub const ORACLE_PHASE_TOLERANCE: f64 = 5e-2;

/// Agreement of one analytic map with the effective-model propagator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleAgreement {
    pub name: String,
    pub modulus: f64,
    pub phase: f64,
    pub pass: bool,
}

/// Modulus and relative-phase disagreement once the global phase is removed.
/// Phases are compared only where the expected modulus exceeds 0.1.
pub fn oracle_distance(numeric: &StateVector, oracle: &StateVector) -> Result<(f64, f64)> {
    let overlap = numeric.inner(oracle)?;
    let align = if overlap.norm() > 0.0 {
        overlap / overlap.norm()
    } else {
        C64::new(1.0, 0.0)
    };
    let mut modulus: f64 = 0.0;
    let mut phase: f64 = 0.0;
    for (n, o) in numeric.amps().iter().zip(oracle.amps()) {
        let n = n * align;
        modulus = modulus.max((n.norm() - o.norm()).abs());
        if o.norm() > 0.1 && n.norm() > 0.0 {
            phase = phase.max((n / o).arg().abs());
        }
    }
    Ok((modulus, phase))
}

fn random_superposition(space: &Space, support: &[usize], rng: &mut impl Rng) -> Result<StateVector> {
    let mut psi = StateVector::zeros(space.dim());
    for &i in support {
        psi.amps_mut()[i] = C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
    }
    psi.normalize()?;
    Ok(psi)
}

/// Compare every analytic map the protocol uses with exact propagation of the
/// effective Hamiltonian: dark waits, single-laser rotations at t₁, t₁/2, t₂
/// and t₃ on β ≤ 2 inputs, and the two-laser flip on empty-cavity inputs.
/// Inputs are all basis kets of the domain plus `superpositions` random
/// superpositions of them.
pub fn oracle_agreement(params: &PhysicalParams, superpositions: usize, seed: u64) -> Result<Vec<OracleAgreement>> {
    let times = solve_pulse_times(params, DEFAULT_T_D_MULTIPLIER)?;
    let space = crate::hilbert::build_protocol_space(2, NUMERIC_FOCK_CUTOFF)?;
    let numeric = Propagator::new(space.clone(), *params, Model::Effective)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let photons = |i: usize, s: usize| space.photons_local(s, space.local_index(i, s));
    let kets: Vec<usize> = (0..space.dim()).filter(|&i| photons(i, ALICE) <= 2 && photons(i, BOB) <= 2).collect();

    let mut rows = Vec::new();
    let mut compare = |name: String,
                       domain: &[usize],
                       oracle: &dyn Fn(&StateVector) -> Result<StateVector>,
                       lasers: &LaserConfig,
                       t: f64|
     -> Result<()> {
        let mut inputs: Vec<StateVector> = domain.iter().map(|&i| StateVector::basis(space.dim(), i)).collect();
        for _ in 0..superpositions {
            inputs.push(random_superposition(&space, domain, &mut rng)?);
        }
        let (mut modulus, mut phase) = (0.0f64, 0.0f64);
        for psi in &inputs {
            let expect = oracle(psi)?;
            let mut got = psi.clone();
            numeric.propagate(&mut got, lasers, t)?;
            let (m, p) = oracle_distance(&got, &expect)?;
            modulus = modulus.max(m);
            phase = phase.max(p);
        }
        rows.push(OracleAgreement {
            name,
            modulus,
            phase,
            pass: modulus <= ORACLE_MODULUS_TOLERANCE && phase <= ORACLE_PHASE_TOLERANCE,
        });
        Ok(())
    };

    let dark = LaserConfig::dark(&space);
    for (label, t) in [("t1", times.t1), ("t2", times.t2), ("tD", times.t_d)] {
        compare(format!("wait {label}"), &kets, &|psi| apply_wait(&space, params, psi, t, true), &dark, t)?;
    }

    // The analytic maps leave the other site alone; numerically it keeps evolving in the dark.
    let other_waits = |mut psi: StateVector, site: usize, t: f64| {
        let other = 1 - site;
        space.apply_local_diagonal(other, &wait_diagonal(&space, params, other, t, true), &mut psi);
        psi
    };
    let rotations = [("t1", times.t1), ("t1/2", times.t1 / 2.0), ("t2", times.t2), ("t3", times.t3)];
    for site in [ALICE, BOB] {
        for k in 0..space.site(site).atom_count {
            let beta = |i: usize| {
                let l = space.local_index(i, site);
                space.atom_level_local(site, l, k) as usize + space.photons_local(site, l)
            };
            let low_beta: Vec<usize> = kets.iter().copied().filter(|&i| beta(i) <= 2).collect();
            let lit = LaserConfig::dark(&space).with(site, k, Drive::L)?;
            for (label, t) in rotations {
                compare(
                    format!("rotation {label} site {site} atom {k}"),
                    &low_beta,
                    &|psi| Ok(other_waits(apply_beta_rotation(&space, params, psi, site, k, t)?, site, t)),
                    &lit,
                    t,
                )?;
            }
            let empty: Vec<usize> = kets.iter().copied().filter(|&i| photons(i, site) == 0).collect();
            let both = LaserConfig::dark(&space).with(site, k, Drive::BOTH)?;
            compare(
                format!("two-laser site {site} atom {k}"),
                &empty,
                &|psi| Ok(other_waits(apply_two_laser(&space, params, psi, site, k, times.t5)?, site, times.t5)),
                &both,
                times.t5,
            )?;
        }
    }
    Ok(rows)
}

/// ½‖ρ − σ‖₁ of the Hermitian part of the difference, as half the sum of
/// its singular values.
pub fn trace_distance(rho: &DMatrix<C64>, sigma: &DMatrix<C64>) -> f64 {
    let d = rho - sigma;
    let herm = (&d + d.adjoint()) * C64::new(0.5, 0.0);
    herm.singular_values().sum() / 2.0
}

/// One atom and a cavity mode (cutoff 2) per site. Alice's atom starts in
/// (|0⟩ + |1⟩)/√2 under L, so the check covers the no-jump decay, the jump
/// statistics and the decay of the ground/excited coherence; Bob's site
/// idles in |1;0⟩.
#[derive(Clone, Debug)]
pub struct CrossCheck {
    pub space: Space,
    pub params: PhysicalParams,
    pub laser: LaserConfig,
    pub psi0: StateVector,
    pub checkpoints: Vec<f64>,
}

impl CrossCheck {
    pub fn reduced() -> Result<Self> {
        let space = build_space(SpaceDescriptor {
            sites: vec![Site::new(1, 2, 2), Site::new(1, 2, 2)],
        })?;
        let params = PhysicalParams::from_mhz(2000.0, 10.0, 0.84, 0.07, 0.0, 5.0e-4)?;
        let laser = LaserConfig::dark(&space).with(ALICE, 0, Drive::L)?;
        let mut psi0 = space.ket("00;10")?;
        psi0.add_scaled(C64::new(1.0, 0.0), &space.ket("10;10")?);
        psi0.normalize()?;
        let period = 1.0 / params.delta5();
        let checkpoints = (1..=5).map(|k| k as f64 * period).collect();
        Ok(Self {
            space,
            params,
            laser,
            psi0,
            checkpoints,
        })
    }

    pub fn reference(&self) -> Result<Vec<DMatrix<C64>>> {
        let v = DVector::from_column_slice(self.psi0.amps());
        master_equation_reference(
            &self.space,
            &self.params,
            Model::Effective,
            &self.laser,
            &(&v * v.adjoint()),
            &self.checkpoints,
        )
    }

    /// Trace distance between the trajectory mean and the reference at each checkpoint.
    pub fn run(&self, trajectories: usize, master_seed: u64) -> Result<Vec<f64>> {
        let evolver = NumericEvolver::new(self.space.clone(), self.params, Model::Effective)?;
        let mean = trajectory_average(
            &evolver,
            &self.laser,
            &self.psi0,
            &self.checkpoints,
            trajectories,
            master_seed,
        )?;
        let reference = self.reference()?;
        Ok(mean.iter().zip(&reference).map(|(a, b)| trace_distance(a, b)).collect())
    }
}
