//! The five-stage teleportation protocol with redundant encoding and the
//! repetition loop.
//!
//! Alice's three atoms play the roles `d1`, `d2` (the data pair) and `anc`
//! (the ancilla shared with Bob's first atom). After a failed first
//! detection the information sits in two of Alice's atoms; the roles are
//! rotated so that the freshly reset atom becomes the new ancilla and the
//! same stage sequence runs again.
//!
//! All kets are carried unnormalized by the trajectory; the global phase is
//! never tracked, only the ratio of the two input branches.

use std::f64::consts::TAU;
use std::io::Write;
use std::ops::ControlFlow;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    Drive, Evolver, JumpEvent, LaserConfig, Model, NumericEvolver, PhysicalParams, Trajectory,
};
use crate::error::{Error, Result};
use crate::hilbert::{build_protocol_space, BasisLabel, SiteLabel, Space, StateVector, ALICE, BOB, C64};
use crate::pulses::{
    compose_schedule, solve_pulse_times, IdealEvolver, Illumination, PhaseFactor, PulseTimes, Schedule,
    DEFAULT_T_D_MULTIPLIER,
};

/// Input a|10⟩ + b|01⟩ of Alice's data pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputState {
    pub a: C64,
    pub b: C64,
}

impl InputState {
    pub fn new(a: C64, b: C64) -> Result<Self> {
        let n2 = a.norm_sqr() + b.norm_sqr();
        if !((n2 - 1.0).abs() < 1e-9) {
            return Err(Error::InvalidParams(format!("|a|² + |b|² = {n2}, expected 1")));
        }
        Ok(Self { a, b })
    }

    /// Rescale (a, b) onto the unit sphere.
    pub fn normalized(a: C64, b: C64) -> Result<Self> {
        let n = (a.norm_sqr() + b.norm_sqr()).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::InvalidParams("input amplitudes vanish".into()));
        }
        Ok(Self { a: a / n, b: b / n })
    }

    pub fn real(a: f64, b: f64) -> Result<Self> {
        Self::new(C64::new(a, 0.0), C64::new(b, 0.0))
    }
}

/// Physical Alice atom holding each role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub d1: usize,
    pub d2: usize,
    pub anc: usize,
}

impl Default for Roles {
    fn default() -> Self {
        Self { d1: 0, d2: 1, anc: 2 }
    }
}

impl Roles {
    /// After a zero-click reset the old `d1` is the only atom in |1⟩ in both
    /// branches, so it becomes the ancilla.
    pub fn after_zero_click(self) -> Self {
        Self {
            d1: self.anc,
            d2: self.d2,
            anc: self.d1,
        }
    }

    pub fn after_two_click(self) -> Self {
        Self {
            d1: self.d2,
            d2: self.anc,
            anc: self.d1,
        }
    }

    /// Alice's atom levels for the given role values.
    pub fn atoms(self, d1: u8, d2: u8, anc: u8) -> Vec<u8> {
        let mut v = vec![0u8; 3];
        v[self.d1] = d1;
        v[self.d2] = d2;
        v[self.anc] = anc;
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backend {
    /// Closed-form maps with ideal detection windows.
    Ideal,
    EffectiveNumeric,
    FullNumeric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Preparation,
    Encoding,
    DetectionI,
    Reset,
    DetectionII,
    Recovery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    SuccessOneClickStageIV,
    SuccessZeroClickStageIV,
    AbortedSpontaneousEmission,
    AbortedBadClick,
    /// Stage III still failing after `max_reps` repetitions.
    ExhaustedRepetitions,
    Invalid,
}

impl Outcome {
    pub const ALL: [Outcome; 6] = [
        Outcome::SuccessOneClickStageIV,
        Outcome::SuccessZeroClickStageIV,
        Outcome::AbortedSpontaneousEmission,
        Outcome::AbortedBadClick,
        Outcome::ExhaustedRepetitions,
        Outcome::Invalid,
    ];

    pub fn is_success(self) -> bool {
        matches!(self, Outcome::SuccessOneClickStageIV | Outcome::SuccessZeroClickStageIV)
    }

    pub fn name(self) -> &'static str {
        match self {
            Outcome::SuccessOneClickStageIV => "success_one_click",
            Outcome::SuccessZeroClickStageIV => "success_zero_click",
            Outcome::AbortedSpontaneousEmission => "aborted_spontaneous_emission",
            Outcome::AbortedBadClick => "aborted_bad_click",
            Outcome::ExhaustedRepetitions => "exhausted_repetitions",
            Outcome::Invalid => "invalid",
        }
    }
}

/// Result of the first detection window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Detect1 {
    OneClick { t_j: f64, epsilon1: i8 },
    ZeroClick,
    TwoClick,
}

/// Result of the second detection window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Detect2 {
    OneClick,
    ZeroClick,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub stage: Stage,
    pub repetition: u32,
    /// Time since the start of the stage's detection window.
    pub time: f64,
    pub sign: i8,
}

/// One stage transition, written as a JSON line when tracing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: Stage,
    pub repetition: u32,
    pub start: f64,
    pub end: f64,
    pub roles: Roles,
    pub detail: String,
}

/// θ, φ and the per-failure factors, with the recovery waits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseBook {
    pub theta: PhaseFactor,
    pub phi: PhaseFactor,
    pub mu0: PhaseFactor,
    pub mu2: PhaseFactor,
    pub t_theta: f64,
    pub t_phi: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRecord {
    pub stages: Vec<StageEntry>,
    pub clicks: Vec<ClickEvent>,
    /// Sign of the preparation click of the latest round.
    pub epsilon: Option<i8>,
    /// Sign of the single stage-III click.
    pub epsilon1: Option<i8>,
    pub t_j: Option<f64>,
    pub repetitions: u32,
    pub zero_click_failures: u32,
    pub two_click_failures: u32,
    pub preparation_retries: u32,
    pub stage3: Vec<Detect1>,
    pub stage4: Option<Detect2>,
    pub outcome: Option<Outcome>,
    pub invalid_reason: Option<String>,
    pub phase_book: Option<PhaseBook>,
}

impl ProtocolRecord {
    /// One JSON object per stage transition.
    pub fn write_json_lines(&self, mut out: impl Write) -> Result<()> {
        for entry in &self.stages {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        let summary = serde_json::json!({
            "outcome": self.outcome,
            "repetitions": self.repetitions,
            "zero_click_failures": self.zero_click_failures,
            "two_click_failures": self.two_click_failures,
            "epsilon": self.epsilon,
            "epsilon1": self.epsilon1,
            "t_j": self.t_j,
            "clicks": self.clicks,
            "invalid_reason": self.invalid_reason,
        });
        serde_json::to_writer(&mut out, &summary)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

pub fn mu0(params: &PhysicalParams, times: &PulseTimes) -> PhaseFactor {
    PhaseFactor::from_angle(1.5 * params.delta3() * (times.t1 + times.t2)) * -1.0
}

pub fn mu2(params: &PhysicalParams, times: &PulseTimes) -> PhaseFactor {
    PhaseFactor::alpha(params, times.t3).conj()
        * PhaseFactor::from_angle(params.delta3() * (times.t1 + 3.0 * times.t2 - 3.0 * times.t3))
}

/// Factor a round's failure multiplies the a-branch by, relative to b.
pub fn failure_factor(params: &PhysicalParams, times: &PulseTimes, outcome: Detect1) -> Option<PhaseFactor> {
    let base = PhaseFactor::alpha(params, times.t1) * PhaseFactor::alpha(params, times.t2);
    match outcome {
        Detect1::ZeroClick => Some(base * mu0(params, times)),
        Detect1::TwoClick => Some(base * mu2(params, times)),
        Detect1::OneClick { .. } => None,
    }
}

/// Relative rate of the two Bob branches while waiting during recovery.
fn recovery_rate(params: &PhysicalParams) -> f64 {
    params.delta_r() + 2.0 * params.delta3()
}

/// Smallest t ≥ 0 with z·e^{i r t} = 1.
fn phase_wait(z: PhaseFactor, rate: f64) -> f64 {
    (-z.arg()).rem_euclid(TAU) / rate
}

struct RecordSummary {
    sign: f64,
    t_j: f64,
    n: i32,
    n0: i32,
    n2: i32,
}

fn summarize(record: &ProtocolRecord) -> Result<RecordSummary> {
    let (Some(e), Some(e1), Some(t_j)) = (record.epsilon, record.epsilon1, record.t_j) else {
        return Err(Error::InvalidParams("record lacks ε, ε₁ or t_j".into()));
    };
    Ok(RecordSummary {
        sign: f64::from(e * e1),
        t_j,
        n: record.repetitions as i32,
        n0: record.zero_click_failures as i32,
        n2: record.two_click_failures as i32,
    })
}

fn mu_powers(params: &PhysicalParams, times: &PulseTimes, s: &RecordSummary) -> PhaseFactor {
    mu0(params, times).powi(s.n0) * mu2(params, times).powi(s.n2)
}

/// θ and the wait t_θ of the one-click recovery.
pub fn compute_theta(record: &ProtocolRecord, params: &PhysicalParams, times: &PulseTimes) -> Result<(PhaseFactor, f64)> {
    let s = summarize(record)?;
    let (a1, a2, a3) = (
        PhaseFactor::alpha(params, times.t1),
        PhaseFactor::alpha(params, times.t2),
        PhaseFactor::alpha(params, times.t3),
    );
    let d3 = params.delta3();
    let theta = a1.powi(s.n + 1)
        * a2.powi(s.n)
        * a3.powi(-3)
        * PhaseFactor::from_angle(0.5 * d3 * (1.5 * times.t1 + times.t2 - 13.0 * times.t3 - 2.0 * s.t_j))
        * mu_powers(params, times, &s)
        * s.sign;
    let z = theta * a1.powi(2) * PhaseFactor::from_angle(2.0 * d3 * times.t1) * -1.0;
    Ok((theta, phase_wait(z, recovery_rate(params))))
}

/// φ and the wait t_φ of the zero-click recovery.
pub fn compute_phi(record: &ProtocolRecord, params: &PhysicalParams, times: &PulseTimes) -> Result<(PhaseFactor, f64)> {
    let s = summarize(record)?;
    let (a1, a2, a3) = (
        PhaseFactor::alpha(params, times.t1),
        PhaseFactor::alpha(params, times.t2),
        PhaseFactor::alpha(params, times.t3),
    );
    let d3 = params.delta3();
    let phi = a1.powi(s.n + 1)
        * a2.powi(s.n + 2)
        * a3.powi(2)
        * PhaseFactor::from_angle(0.5 * d3 * (3.5 * times.t1 + 8.0 * times.t2 + 7.0 * times.t3 + 2.0 * s.t_j))
        * mu_powers(params, times, &s)
        * -s.sign;
    Ok((phi, phase_wait(phi, recovery_rate(params))))
}

pub fn compute_phase_book(record: &ProtocolRecord, params: &PhysicalParams, times: &PulseTimes) -> Result<PhaseBook> {
    let (theta, t_theta) = compute_theta(record, params, times)?;
    let (phi, t_phi) = compute_phi(record, params, times)?;
    Ok(PhaseBook {
        theta,
        phi,
        mu0: mu0(params, times),
        mu2: mu2(params, times),
        t_theta,
        t_phi,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub params: PhysicalParams,
    pub backend: Backend,
    pub fock_cutoff: usize,
    pub t_d_multiplier: f64,
    pub max_reps: u32,
    /// Zero-click preparation attempts tolerated per round.
    pub preparation_retry_cap: u32,
    /// Dark delay between the preparation click and the mapping pulses.
    pub latency: f64,
    /// Largest population allowed at the top Fock level.
    pub cutoff_tolerance: f64,
    /// Detector clicks per window beyond which a run is declared invalid.
    pub max_window_clicks: usize,
}

/// Fock cutoff for the numeric backends. The two-laser resets leave a
/// multiphoton tail in the cavities that reaches ~1e-6 at four photons, so
/// two guard levels above the protocol's two photons are needed to keep the
/// top-level population negligible.
pub const NUMERIC_FOCK_CUTOFF: usize = 5;

impl ProtocolConfig {
    pub fn new(params: PhysicalParams, backend: Backend) -> Self {
        Self {
            params,
            backend,
            fock_cutoff: match backend {
                Backend::Ideal => crate::hilbert::DEFAULT_FOCK_CUTOFF,
                Backend::EffectiveNumeric | Backend::FullNumeric => NUMERIC_FOCK_CUTOFF,
            },
            t_d_multiplier: DEFAULT_T_D_MULTIPLIER,
            max_reps: 6,
            preparation_retry_cap: 3,
            latency: 0.0,
            cutoff_tolerance: 1e-6,
            max_window_clicks: 8,
        }
    }
}

/// Result of one protocol run.
#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub input: InputState,
    pub outcome: Outcome,
    pub record: ProtocolRecord,
    /// Bob's reduced density matrix at the end of a successful run.
    pub bob: Option<DMatrix<C64>>,
}

/// Configured protocol: space, backend and pulse times, shared across runs.
pub struct Protocol {
    config: ProtocolConfig,
    times: PulseTimes,
    evolver: BackendEvolver,
    warnings: Vec<String>,
}

enum BackendEvolver {
    Ideal(IdealEvolver),
    Numeric(NumericEvolver),
}

impl std::fmt::Debug for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Protocol").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Protocol {
    pub fn new(config: ProtocolConfig) -> Result<Self> {
        config.params.validate()?;
        if config.fock_cutoff < 2 {
            return Err(Error::Config("the protocol needs a Fock cutoff of at least 2".into()));
        }
        let times = solve_pulse_times(&config.params, config.t_d_multiplier)?;
        if times.t4 < times.t1 / 2.0 {
            return Err(Error::Schedule("t₄ < t₁/2 leaves Bob a negative wait".into()));
        }
        if !times.t_d.is_finite() {
            return Err(Error::Config("κ = 0 gives an infinite detection window".into()));
        }
        if !(config.latency >= 0.0 && config.latency.is_finite()) {
            return Err(Error::Config("latency must be finite and non-negative".into()));
        }
        let mut warnings: Vec<String> = config
            .params
            .validity()
            .failures()
            .map(|c| format!("validity condition {} holds only by a factor {:.3}", c.name, c.ratio))
            .collect();
        let evolver = match config.backend {
            Backend::Ideal => BackendEvolver::Ideal(IdealEvolver::new(build_protocol_space(2, config.fock_cutoff)?, config.params)?),
            Backend::EffectiveNumeric => BackendEvolver::Numeric(NumericEvolver::new(
                build_protocol_space(2, config.fock_cutoff)?,
                config.params,
                Model::Effective,
            )?),
            Backend::FullNumeric => {
                let span = config.params.delta * times.t_d;
                if span > 1e6 {
                    warnings.push(format!(
                        "full-Hamiltonian propagation spans Δ·t_D = {span:.2e} rad per window; expect loss of precision"
                    ));
                }
                BackendEvolver::Numeric(NumericEvolver::new(build_protocol_space(3, config.fock_cutoff)?, config.params, Model::Full)?)
            }
        };
        Ok(Self {
            config,
            times,
            evolver,
            warnings,
        })
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn times(&self) -> &PulseTimes {
        &self.times
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.config.params
    }

    pub fn space(&self) -> &Space {
        self.evolver().space()
    }

    pub fn evolver(&self) -> &dyn Evolver {
        match &self.evolver {
            BackendEvolver::Ideal(e) => e,
            BackendEvolver::Numeric(e) => e,
        }
    }

    fn ideal(&self) -> Option<&IdealEvolver> {
        match &self.evolver {
            BackendEvolver::Ideal(e) => Some(e),
            BackendEvolver::Numeric(_) => None,
        }
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn session(&self, input: InputState, rng: ChaCha8Rng) -> Result<Session<'_>> {
        Session::new(self, input, rng)
    }

    /// Run all stages with the repetition loop. Backend failures end the run
    /// as `Invalid`; only configuration problems are returned as errors.
    pub fn run(&self, input: InputState, rng: ChaCha8Rng) -> Result<ProtocolRun> {
        let mut session = self.session(input, rng)?;
        let outcome = match session.run_to_end() {
            Ok(o) => o,
            Err(e @ (Error::Config(_) | Error::Schedule(_) | Error::InvalidParams(_))) => return Err(e),
            Err(e) => {
                session.record.invalid_reason = Some(e.to_string());
                Outcome::Invalid
            }
        };
        session.record.outcome = Some(outcome);
        let bob = if outcome.is_success() {
            Some(session.bob_density()?)
        } else {
            None
        };
        Ok(ProtocolRun {
            input,
            outcome,
            record: session.record,
            bob,
        })
    }
}

pub type Flow<T = ()> = Result<ControlFlow<Outcome, T>>;

macro_rules! proceed {
    ($e:expr) => {
        match $e? {
            ControlFlow::Continue(v) => v,
            ControlFlow::Break(o) => return Ok(ControlFlow::Break(o)),
        }
    };
}

/// What happened inside one evolved schedule.
struct Window {
    clicks: Vec<JumpEvent>,
}

/// One protocol run in progress; the stages can be driven one at a time.
pub struct Session<'p> {
    protocol: &'p Protocol,
    traj: Trajectory<'p, dyn Evolver + 'p, ChaCha8Rng>,
    input: InputState,
    roles: Roles,
    clock: f64,
    /// Accumulated a-branch factor relative to the b-branch from failed rounds.
    carried: PhaseFactor,
    pub record: ProtocolRecord,
}

impl<'p> Session<'p> {
    pub fn new(protocol: &'p Protocol, input: InputState, rng: ChaCha8Rng) -> Result<Self> {
        let space = protocol.space();
        let roles = Roles::default();
        let mut psi = StateVector::zeros(space.dim());
        psi.amps_mut()[Self::index_for(space, roles, [1, 0, 1], 0, [1, 1], 0)?] = input.a;
        psi.amps_mut()[Self::index_for(space, roles, [0, 1, 1], 0, [1, 1], 0)?] = input.b;
        Ok(Self {
            protocol,
            traj: Trajectory::new(protocol.evolver(), psi, rng)?,
            input,
            roles,
            clock: 0.0,
            carried: PhaseFactor::ONE,
            record: ProtocolRecord::default(),
        })
    }

    fn index_for(space: &Space, roles: Roles, alice: [u8; 3], y_a: usize, bob: [u8; 2], y_b: usize) -> Result<usize> {
        space.index(&BasisLabel {
            sites: vec![
                SiteLabel {
                    atoms: roles.atoms(alice[0], alice[1], alice[2]),
                    photons: y_a,
                },
                SiteLabel {
                    atoms: bob.to_vec(),
                    photons: y_b,
                },
            ],
        })
    }

    /// Flat index of |Alice (d1, d2, anc), y_A; Bob atoms, y_B⟩ under the current roles.
    pub fn index(&self, alice: [u8; 3], y_a: usize, bob: [u8; 2], y_b: usize) -> Result<usize> {
        Self::index_for(self.space(), self.roles, alice, y_a, bob, y_b)
    }

    pub fn space(&self) -> &'p Space {
        self.protocol.space()
    }

    pub fn roles(&self) -> Roles {
        self.roles
    }

    pub fn input(&self) -> InputState {
        self.input
    }

    pub fn times(&self) -> &'p PulseTimes {
        &self.protocol.times
    }

    /// a-branch factor accumulated by failed rounds (relative to b).
    pub fn carried_factor(&self) -> PhaseFactor {
        self.carried
    }

    pub fn state(&self) -> Result<StateVector> {
        self.traj.normalized_state()
    }

    fn lasers(&self) -> LaserConfig {
        LaserConfig::dark(self.space())
    }

    fn schedule(&self, steps: &[Illumination], total: Option<f64>) -> Result<Schedule> {
        compose_schedule(self.space(), steps, total)
    }

    fn log(&mut self, stage: Stage, start: f64, detail: impl Into<String>) {
        self.record.stages.push(StageEntry {
            stage,
            repetition: self.record.repetitions,
            start,
            end: self.clock,
            roles: self.roles,
            detail: detail.into(),
        });
    }

    /// Evolve through `schedule`. Clicks are only legal when `window` is set;
    /// with `stop_at_first` evolution halts right after the first click.
    fn evolve(&mut self, schedule: &Schedule, stage: Stage, window: bool, stop_at_first: bool) -> Flow<Window> {
        let mut clicks = Vec::new();
        let mut elapsed = 0.0;
        for seg in &schedule.segments {
            let mut done = 0.0;
            while let Some(ev) = self.traj.advance(&seg.lasers, seg.duration - done)? {
                done += ev.time;
                let t = elapsed + done;
                let Some(sign) = ev.channel.detector_sign() else {
                    self.clock += t;
                    return Ok(ControlFlow::Break(Outcome::AbortedSpontaneousEmission));
                };
                self.record.clicks.push(ClickEvent {
                    stage,
                    repetition: self.record.repetitions,
                    time: t,
                    sign,
                });
                if !window {
                    self.clock += t;
                    return Ok(ControlFlow::Break(Outcome::AbortedBadClick));
                }
                clicks.push(JumpEvent {
                    time: t,
                    channel: ev.channel,
                });
                if clicks.len() > self.protocol.config.max_window_clicks {
                    return Err(Error::Numerical(format!("more than {} clicks in one window", clicks.len() - 1)));
                }
                if stop_at_first {
                    self.clock += t;
                    return Ok(ControlFlow::Continue(Window { clicks }));
                }
            }
            elapsed += seg.duration;
        }
        self.clock += elapsed;
        Ok(ControlFlow::Continue(Window { clicks }))
    }

    fn pulses(&mut self, steps: &[Illumination], stage: Stage) -> Flow {
        let schedule = self.schedule(steps, None)?;
        if let Some(ideal) = self.protocol.ideal() {
            self.traj.map_state(|psi| ideal.apply_illuminations(psi, steps, None))?;
            if self.traj.state().norm2() <= self.traj.threshold() {
                return Err(Error::Numerical(format!("photon emitted during an analytic pulse in {stage:?}")));
            }
            self.clock += schedule.duration();
            return Ok(ControlFlow::Continue(()));
        }
        proceed!(self.evolve(&schedule, stage, false, false));
        Ok(ControlFlow::Continue(()))
    }

    fn dark_window(&mut self, duration: f64, stage: Stage, stop_at_first: bool) -> Flow<Window> {
        let schedule = Schedule {
            segments: vec![crate::dynamics::PulseSegment::new(duration, self.lasers())],
        };
        self.evolve(&schedule, stage, true, stop_at_first)
    }

    /// The ideal backend treats detection windows as infinitely long: any
    /// photon amplitude still left when the window closes is dropped.
    fn close_window(&mut self) -> Result<()> {
        if self.protocol.config.backend != Backend::Ideal {
            return Ok(());
        }
        let space = self.space();
        self.traj.map_state(|psi| {
            for (i, a) in psi.amps_mut().iter_mut().enumerate() {
                if (0..space.num_sites()).any(|s| space.photons_local(s, space.local_index(i, s)) > 0) {
                    *a = C64::new(0.0, 0.0);
                }
            }
            Ok(())
        })?;
        self.traj.renormalize()
    }

    fn check_cutoff(&self) -> Result<()> {
        let p = self.space().cutoff_population(&self.traj.normalized_state()?);
        if p > self.protocol.config.cutoff_tolerance {
            return Err(Error::Numerical(format!("population {p:.3e} at the Fock cutoff")));
        }
        Ok(())
    }

    /// Stage (i): entangle Alice's ancilla with Bob's first atom.
    pub fn prepare(&mut self) -> Flow {
        let t = *self.times();
        let cap = self.protocol.config.preparation_retry_cap;
        let mut attempts = 0;
        loop {
            let start = self.clock;
            let anc = self.roles.anc;
            let map = [
                Illumination::new(ALICE, anc, Drive::L, 0.0, t.t1),
                Illumination::new(BOB, 0, Drive::L, 0.0, t.t1),
            ];
            proceed!(self.pulses(&map, Stage::Preparation));
            let w = proceed!(self.dark_window(t.t_d, Stage::Preparation, true));
            if let Some(first) = w.clicks.first() {
                self.record.epsilon = first.channel.detector_sign();
                let latency = self.protocol.config.latency;
                if latency > 0.0 {
                    let delay = Schedule {
                        segments: vec![crate::dynamics::PulseSegment::new(latency, self.lasers())],
                    };
                    proceed!(self.evolve(&delay, Stage::Preparation, false, false));
                }
                proceed!(self.pulses(&map, Stage::Preparation));
                self.check_cutoff()?;
                let detail = format!("click ε = {:+}", first.channel.detector_sign().unwrap_or(0));
                self.log(Stage::Preparation, start, detail);
                return Ok(ControlFlow::Continue(()));
            }
            self.close_window()?;
            attempts += 1;
            self.record.preparation_retries += 1;
            self.log(Stage::Preparation, start, "no click, ancillas reset");
            if attempts >= cap {
                return Err(Error::Numerical(format!("{attempts} preparation attempts without a click")));
            }
            let reset = [
                Illumination::new(ALICE, anc, Drive::BOTH, 0.0, t.t5),
                Illumination::new(BOB, 0, Drive::BOTH, 0.0, t.t5),
            ];
            proceed!(self.pulses(&reset, Stage::Preparation));
        }
    }

    /// Stage (ii): spread the data pair over four atoms and the cavity.
    pub fn encode(&mut self) -> Flow {
        let t = *self.times();
        let start = self.clock;
        let r = self.roles;
        proceed!(self.pulses(&[Illumination::new(ALICE, r.d1, Drive::L, 0.0, t.t1)], Stage::Encoding));
        proceed!(self.pulses(&[Illumination::new(ALICE, r.anc, Drive::L, 0.0, t.t2)], Stage::Encoding));
        proceed!(self.pulses(&[Illumination::new(ALICE, r.d2, Drive::L, 0.0, t.t3)], Stage::Encoding));
        let half = t.t1 / 2.0;
        proceed!(self.pulses(
            &[
                Illumination::new(ALICE, r.anc, Drive::L, 0.0, t.t4),
                Illumination::new(BOB, 1, Drive::L, t.t4 - half, half),
            ],
            Stage::Encoding,
        ));
        self.check_cutoff()?;
        self.log(Stage::Encoding, start, "");
        Ok(ControlFlow::Continue(()))
    }

    /// Stage (iii): count clicks over one detection window.
    pub fn detect1(&mut self) -> Flow<Detect1> {
        let start = self.clock;
        let w = proceed!(self.dark_window(self.times().t_d, Stage::DetectionI, false));
        self.close_window()?;
        let result = match w.clicks.as_slice() {
            [] => Detect1::ZeroClick,
            [only] => Detect1::OneClick {
                t_j: only.time,
                epsilon1: only.channel.detector_sign().unwrap_or(0),
            },
            [_, _] => Detect1::TwoClick,
            more => return Err(Error::Numerical(format!("{} clicks in detection stage I", more.len()))),
        };
        if let Detect1::OneClick { t_j, epsilon1 } = result {
            self.record.t_j = Some(t_j);
            self.record.epsilon1 = Some(epsilon1);
        }
        self.record.stage3.push(result);
        self.check_cutoff()?;
        self.log(Stage::DetectionI, start, format!("{result:?}"));
        Ok(ControlFlow::Continue(result))
    }

    /// Reset after a failed stage III and rotate the roles.
    pub fn reset(&mut self, outcome: Detect1) -> Flow {
        let t = *self.times();
        let start = self.clock;
        let r = self.roles;
        let factor = failure_factor(self.protocol.params(), &t, outcome)
            .ok_or_else(|| Error::InvalidParams("a one-click round needs no reset".into()))?;
        match outcome {
            Detect1::ZeroClick => {
                proceed!(self.pulses(&[Illumination::new(ALICE, r.d1, Drive::BOTH, 0.0, t.t5)], Stage::Reset));
                self.roles = r.after_zero_click();
                self.record.zero_click_failures += 1;
            }
            Detect1::TwoClick => {
                proceed!(self.pulses(
                    &[
                        Illumination::new(ALICE, r.d1, Drive::BOTH, 0.0, t.t5),
                        Illumination::new(BOB, 0, Drive::BOTH, 0.0, t.t5),
                        Illumination::new(BOB, 1, Drive::BOTH, t.t5, t.t5),
                    ],
                    Stage::Reset,
                ));
                self.roles = r.after_two_click();
                self.record.two_click_failures += 1;
            }
            Detect1::OneClick { .. } => unreachable!("handled above"),
        }
        self.carried = self.carried * factor;
        self.record.repetitions += 1;
        self.check_cutoff()?;
        self.log(Stage::Reset, start, format!("{outcome:?}"));
        Ok(ControlFlow::Continue(()))
    }

    /// Stage (iv): read out the ancilla through the cavity.
    pub fn detect2(&mut self) -> Flow<Detect2> {
        let t = *self.times();
        let start = self.clock;
        proceed!(self.pulses(&[Illumination::new(ALICE, self.roles.anc, Drive::L, 0.0, t.t1)], Stage::DetectionII));
        let w = proceed!(self.dark_window(t.t_d, Stage::DetectionII, false));
        self.close_window()?;
        let result = match w.clicks.len() {
            0 => Detect2::ZeroClick,
            1 => Detect2::OneClick,
            n => return Err(Error::Numerical(format!("{n} clicks in detection stage II"))),
        };
        self.record.stage4 = Some(result);
        self.record.phase_book = Some(compute_phase_book(&self.record, self.protocol.params(), &t)?);
        self.check_cutoff()?;
        self.log(Stage::DetectionII, start, format!("{result:?}"));
        Ok(ControlFlow::Continue(result))
    }

    /// Stage (v): Bob removes θ or φ.
    pub fn recover(&mut self, outcome: Detect2) -> Flow<Outcome> {
        let t = *self.times();
        let start = self.clock;
        let book = self
            .record
            .phase_book
            .ok_or_else(|| Error::InvalidParams("recovery before detection stage II".into()))?;
        let steps: Vec<Illumination> = match outcome {
            Detect2::OneClick => vec![
                Illumination::new(BOB, 0, Drive::L, 0.0, t.t1),
                Illumination::new(BOB, 0, Drive::L, t.t1 + book.t_theta, t.t1),
            ],
            Detect2::ZeroClick => vec![
                Illumination::new(BOB, 0, Drive::L, 0.0, t.t1),
                Illumination::new(BOB, 1, Drive::L, t.t1, t.t1),
                Illumination::new(BOB, 0, Drive::L, 2.0 * t.t1 + book.t_phi, t.t1),
            ],
        };
        proceed!(self.pulses(&steps, Stage::Recovery));
        self.log(Stage::Recovery, start, format!("{outcome:?}"));
        Ok(ControlFlow::Continue(match outcome {
            Detect2::OneClick => Outcome::SuccessOneClickStageIV,
            Detect2::ZeroClick => Outcome::SuccessZeroClickStageIV,
        }))
    }

    pub fn run_to_end(&mut self) -> Result<Outcome> {
        match self.run_flow()? {
            ControlFlow::Break(o) | ControlFlow::Continue(o) => Ok(o),
        }
    }

    fn run_flow(&mut self) -> Flow<Outcome> {
        let d2 = proceed!(self.run_to_detect2());
        self.recover(d2)
    }

    /// Stages (i) to (iv) with the repetition loop, stopping before recovery.
    pub fn run_to_detect2(&mut self) -> Flow<Detect2> {
        loop {
            proceed!(self.prepare());
            proceed!(self.encode());
            match proceed!(self.detect1()) {
                Detect1::OneClick { .. } => break,
                failed => {
                    if self.record.repetitions >= self.protocol.config.max_reps {
                        return Ok(ControlFlow::Break(Outcome::ExhaustedRepetitions));
                    }
                    proceed!(self.reset(failed));
                }
            }
        }
        self.detect2()
    }

    /// Bob's reduced density matrix of the current state.
    pub fn bob_density(&self) -> Result<DMatrix<C64>> {
        Ok(self.space().reduced_density(BOB, &self.traj.normalized_state()?))
    }

    /// Bob's normalized local vector conditioned on Alice's site being in `alice`.
    pub fn bob_conditional(&self, alice: &SiteLabel) -> Result<StateVector> {
        let space = self.space();
        let psi = self.traj.state();
        let a_local = space.local_index_of(ALICE, alice)?;
        let mut v = StateVector::zeros(space.site_dim(BOB));
        for (i, amp) in psi.amps().iter().enumerate() {
            if space.local_index(i, ALICE) == a_local {
                v.amps_mut()[space.local_index(i, BOB)] += *amp;
            }
        }
        v.normalize()?;
        Ok(v)
    }

    /// Alice's configuration expected after stage IV for the given outcome.
    pub fn alice_after_detect2(&self, outcome: Detect2) -> SiteLabel {
        let d2 = match outcome {
            Detect2::OneClick => 0,
            Detect2::ZeroClick => 1,
        };
        SiteLabel {
            atoms: self.roles.atoms(0, d2, 0),
            photons: 0,
        }
    }

    /// Bob's local vector predicted by the phase book before recovery.
    pub fn predicted_bob(&self, outcome: Detect2) -> Result<StateVector> {
        let book = self
            .record
            .phase_book
            .ok_or_else(|| Error::InvalidParams("no phase book before detection stage II".into()))?;
        let (a, b) = (self.input.a, self.input.b);
        let (x10, x01) = (bob_local(self.space(), [1, 0])?, bob_local(self.space(), [0, 1])?);
        let mut v = StateVector::zeros(self.space().site_dim(BOB));
        match outcome {
            Detect2::OneClick => {
                v.amps_mut()[x10] = a * book.theta.value();
                v.amps_mut()[x01] = b;
            }
            Detect2::ZeroClick => {
                v.amps_mut()[x01] = a * book.phi.value();
                v.amps_mut()[x10] = b;
            }
        }
        Ok(v)
    }

    /// State expected right after a reset: a'|1,0,1;110⟩ + b'|0,1,1;110⟩ in the new roles.
    pub fn predicted_after_reset(&self) -> Result<StateVector> {
        let mut v = StateVector::zeros(self.space().dim());
        v.amps_mut()[self.index([1, 0, 1], 0, [1, 1], 0)?] = self.input.a * self.carried.value();
        v.amps_mut()[self.index([0, 1, 1], 0, [1, 1], 0)?] = self.input.b;
        Ok(v)
    }

    /// Fidelity of the reduced (d1, d2) state with a'|10⟩ + b|01⟩, where a' carries the failure phases.
    pub fn data_overlap(&self) -> Result<f64> {
        let space = self.space();
        let psi = self.traj.state();
        let norm2 = psi.norm2();
        if norm2 <= 0.0 {
            return Err(Error::Numerical("zero state".into()));
        }
        let (a, b) = (self.input.a * self.carried.value(), self.input.b);
        let s = (a.norm_sqr() + b.norm_sqr()).sqrt();
        let (ta, tb) = ((a / s).conj(), (b / s).conj());
        let (d1, d2) = (self.roles.d1, self.roles.d2);
        let mut f = 0.0;
        for (i, amp) in psi.amps().iter().enumerate() {
            let mut label = space.label(i);
            let atoms = &mut label.sites[ALICE].atoms;
            if (atoms[d1], atoms[d2]) != (1, 0) {
                continue;
            }
            atoms[d1] = 0;
            atoms[d2] = 1;
            let partner = psi.amps()[space.index(&label)?];
            f += (ta * amp + tb * partner).norm_sqr();
        }
        Ok(f / norm2)
    }
}

fn bob_local(space: &Space, atoms: [u8; 2]) -> Result<usize> {
    space.local_index_of(
        BOB,
        &SiteLabel {
            atoms: atoms.to_vec(),
            photons: 0,
        },
    )
}

/// Bob's target a|10;0⟩ + b|01;0⟩ as a local vector.
pub fn bob_target(space: &Space, input: InputState) -> Result<StateVector> {
    let mut v = StateVector::zeros(space.site_dim(BOB));
    v.amps_mut()[bob_local(space, [1, 0])?] = input.a;
    v.amps_mut()[bob_local(space, [0, 1])?] = input.b;
    Ok(v)
}

/// Largest component difference after removing the global phase of `actual` relative to `expected`.
pub fn aligned_max_error(actual: &StateVector, expected: &StateVector) -> Result<f64> {
    let overlap = actual.inner(expected)?;
    let phase = if overlap.norm() > 0.0 {
        overlap / overlap.norm()
    } else {
        C64::new(1.0, 0.0)
    };
    Ok(actual
        .amps()
        .iter()
        .zip(expected.amps())
        .map(|(x, y)| (x * phase - y).norm())
        .fold(0.0, f64::max))
}

/// Convenience wrapper: one run of a configured protocol.
pub fn run_protocol(protocol: &Protocol, input: InputState, rng: ChaCha8Rng) -> Result<ProtocolRun> {
    protocol.run(input, rng)
}
