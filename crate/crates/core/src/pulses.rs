//! Closed-form local operations of the effective model, the pulse-time
//! solver and schedule composition.
//!
//! The analytic maps act on basis-resolved amplitudes site by site. For an
//! atom `k` lit by `L` alone, each component with `β = x_k + y > 0` rotates
//! inside its two-state block at `ξ = √β δ₅` with common prefactor
//! `f_{N₀,β}(t)`; `β = 0` components only pick up `α^{N₀+1}(t)`. With `L` and
//! `L′` together the atom flips between |0⟩ and |1⟩ at `δ₄` when the cavity
//! is empty. Dark sites follow the diagonal waiting evolution.
//!
//! [`IdealEvolver`] runs the protocol through these maps. It rounds rotation
//! angles within [`SNAP_TOLERANCE`] of a multiple of π/4 to that multiple,
//! which removes the small congruence residuals of the encoding pulses.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, SQRT_2};
use std::ops::Mul;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    build_jump_channels, ChannelMode, Drive, Evolver, JumpChannel, LaserConfig, PhysicalParams, PulseSegment,
};
use crate::error::{Error, Result};
use crate::hilbert::{Space, StateVector, C64};

/// Unit-modulus complex factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseFactor(pub C64);

impl PhaseFactor {
    pub const ONE: PhaseFactor = PhaseFactor(C64::new(1.0, 0.0));

    pub fn from_angle(phi: f64) -> Self {
        Self(C64::from_polar(1.0, phi))
    }

    /// α(t) = e^{iΔ_r t}.
    pub fn alpha(params: &PhysicalParams, t: f64) -> Self {
        Self::from_angle(params.delta_r() * t)
    }

    /// f_{N₀,β}(t) = α^{N₀+1}(t) exp{iδ₃[β(2N₀+1) − N₀]t/2}.
    pub fn f(params: &PhysicalParams, n0: usize, beta: usize, t: f64) -> Self {
        let (n0, beta) = (n0 as f64, beta as f64);
        Self::from_angle((n0 + 1.0) * params.delta_r() * t + params.delta3() * (beta * (2.0 * n0 + 1.0) - n0) * t / 2.0)
    }

    pub fn value(self) -> C64 {
        self.0
    }

    pub fn powi(self, n: i32) -> Self {
        Self(self.0.powi(n))
    }

    pub fn conj(self) -> Self {
        Self(self.0.conj())
    }

    /// Argument in (−π, π].
    pub fn arg(self) -> f64 {
        self.0.arg()
    }
}

impl Mul for PhaseFactor {
    type Output = PhaseFactor;
    fn mul(self, rhs: PhaseFactor) -> PhaseFactor {
        PhaseFactor(self.0 * rhs.0)
    }
}

impl Mul<f64> for PhaseFactor {
    type Output = PhaseFactor;
    fn mul(self, rhs: f64) -> PhaseFactor {
        PhaseFactor(self.0 * rhs)
    }
}

pub fn alpha(params: &PhysicalParams, t: f64) -> C64 {
    PhaseFactor::alpha(params, t).value()
}

pub fn f_factor(params: &PhysicalParams, n0: usize, beta: usize, t: f64) -> C64 {
    PhaseFactor::f(params, n0, beta, t).value()
}

/// Parameters of one β-block: dark atoms in |0⟩ at the acting site and β.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyticContext {
    pub n0: usize,
    pub beta: usize,
    pub params: PhysicalParams,
}

impl AnalyticContext {
    pub fn f(&self, t: f64) -> PhaseFactor {
        PhaseFactor::f(&self.params, self.n0, self.beta, t)
    }

    pub fn xi(&self) -> f64 {
        (self.beta as f64).sqrt() * self.params.delta5()
    }
}

/// Angles this close to a multiple of π/4 are rounded onto it by the ideal backend.
pub const SNAP_TOLERANCE: f64 = 0.1;

fn snap(angle: f64) -> f64 {
    let m = (angle / FRAC_PI_4).round();
    if (angle - m * FRAC_PI_4).abs() < SNAP_TOLERANCE {
        m * FRAC_PI_4
    } else {
        angle
    }
}

/// (cos θ, sin θ) with exact values on multiples of π/4 after snapping.
fn cos_sin(angle: f64, snapped: bool) -> (f64, f64) {
    if !snapped {
        return (angle.cos(), angle.sin());
    }
    let a = snap(angle);
    let m = a / FRAC_PI_4;
    if m.fract() == 0.0 {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let table = [(1.0, 0.0), (h, h), (0.0, 1.0), (-h, h), (-1.0, 0.0), (-h, -h), (0.0, -1.0), (h, -h)];
        table[(m as i64).rem_euclid(8) as usize]
    } else {
        (a.cos(), a.sin())
    }
}

/// Site-local analytic map plus the local columns it does not cover.
pub struct LocalMap {
    pub matrix: DMatrix<C64>,
    pub invalid_columns: Vec<usize>,
}

impl LocalMap {
    fn check(&self, space: &Space, site: usize, psi: &StateVector, what: &str) -> Result<()> {
        if self.invalid_columns.is_empty() {
            return Ok(());
        }
        let norm2 = psi.norm2().max(f64::MIN_POSITIVE);
        let mass: f64 = psi
            .amps()
            .iter()
            .enumerate()
            .filter(|(i, _)| self.invalid_columns.contains(&space.local_index(*i, site)))
            .map(|(_, a)| a.norm_sqr())
            .sum();
        if mass > 1e-20 * norm2 {
            return Err(Error::AnalyticDomain(format!(
                "{what} on site {site}: population {mass:.3e} outside the map's validity"
            )));
        }
        Ok(())
    }
}

fn check_two_level(space: &Space, site: usize, atom: usize) -> Result<()> {
    if site >= space.num_sites() || atom >= space.site(site).atom_count {
        return Err(Error::IndexOutOfRange(format!("atom {atom} on site {site}")));
    }
    if space.site(site).levels_per_atom != 2 {
        return Err(Error::WrongModel("analytic maps act on two-level atoms".into()));
    }
    Ok(())
}

/// Single-laser (`L`) illumination of atom `k` for time `t`.
pub fn beta_rotation_map(
    space: &Space,
    params: &PhysicalParams,
    site: usize,
    k: usize,
    t: f64,
    snapped: bool,
) -> Result<LocalMap> {
    check_two_level(space, site, k)?;
    let d = space.site_dim(site);
    let cutoff = space.site(site).fock_cutoff;
    let mut m = DMatrix::<C64>::zeros(d, d);
    let mut invalid = Vec::new();
    let alpha = PhaseFactor::alpha(params, t);
    for c in 0..d {
        let x = space.atom_level_local(site, c, k) as usize;
        let y = space.photons_local(site, c);
        let n0 = space.count_level_local(site, c, 0, Some(k));
        let beta = x + y;
        if beta == 0 {
            m[(c, c)] = alpha.powi(n0 as i32 + 1).value();
            continue;
        }
        let f = PhaseFactor::f(params, n0, beta, t).value();
        let (cos, sin) = cos_sin((beta as f64).sqrt() * params.delta5() * t, snapped);
        let (x2, y2) = if x == 1 { (0u8, y + 1) } else { (1u8, y - 1) };
        m[(c, c)] = f * cos;
        if y2 > cutoff {
            invalid.push(c);
            continue;
        }
        let partner = space.set_atom_and_photons_local(site, c, k, x2, y2);
        m[(partner, c)] = f * C64::new(0.0, sin);
    }
    Ok(LocalMap {
        matrix: m,
        invalid_columns: invalid,
    })
}

/// Two-laser (`L` and `L′`) illumination of atom `k` for time `t`.
pub fn two_laser_map(
    space: &Space,
    params: &PhysicalParams,
    site: usize,
    k: usize,
    t: f64,
    snapped: bool,
) -> Result<LocalMap> {
    check_two_level(space, site, k)?;
    let d = space.site_dim(site);
    let mut m = DMatrix::<C64>::zeros(d, d);
    let mut invalid = Vec::new();
    let alpha = PhaseFactor::alpha(params, t);
    let (cos, sin) = cos_sin(params.delta4() * t, snapped);
    for c in 0..d {
        let y = space.photons_local(site, c);
        let n0 = space.count_level_local(site, c, 0, Some(k));
        let pre = alpha.powi(n0 as i32 + 1).value();
        if y > 0 {
            invalid.push(c);
            m[(c, c)] = pre;
            continue;
        }
        let x = space.atom_level_local(site, c, k);
        let partner = space.set_atom_and_photons_local(site, c, k, 1 - x, 0);
        m[(c, c)] = pre * cos;
        m[(partner, c)] = pre * C64::new(0.0, sin);
    }
    Ok(LocalMap {
        matrix: m,
        invalid_columns: invalid,
    })
}

/// Diagonal of the dark evolution on one site: e^{iN₀(Δ_r + yδ₃)t} e^{−yκt},
/// or α^{N₀}(t) alone without damping.
pub fn wait_diagonal(space: &Space, params: &PhysicalParams, site: usize, t: f64, damping: bool) -> Vec<C64> {
    (0..space.site_dim(site))
        .map(|l| {
            let n0 = space.count_level_local(site, l, 0, None) as f64;
            let y = space.photons_local(site, l) as f64;
            if damping {
                C64::from_polar((-y * params.kappa * t).exp(), n0 * (params.delta_r() + y * params.delta3()) * t)
            } else {
                C64::from_polar(1.0, n0 * params.delta_r() * t)
            }
        })
        .collect()
}

/// Both sites wait for `t` with all lasers off.
pub fn apply_wait(space: &Space, params: &PhysicalParams, state: &StateVector, t: f64, damping: bool) -> Result<StateVector> {
    space.check_dim(state)?;
    let mut out = state.clone();
    for s in 0..space.num_sites() {
        space.apply_local_diagonal(s, &wait_diagonal(space, params, s, t, damping), &mut out);
    }
    Ok(out)
}

/// Illuminate atom `k` of `site` with `L` for `t`; other site untouched.
pub fn apply_beta_rotation(
    space: &Space,
    params: &PhysicalParams,
    state: &StateVector,
    site: usize,
    k: usize,
    t: f64,
) -> Result<StateVector> {
    space.check_dim(state)?;
    let map = beta_rotation_map(space, params, site, k, t, false)?;
    map.check(space, site, state, "single-laser rotation")?;
    let mut out = state.clone();
    space.apply_local_dense(site, &map.matrix, &mut out);
    Ok(out)
}

/// Illuminate atom `k` of `site` with `L` and `L′` for `t`; other site untouched.
pub fn apply_two_laser(
    space: &Space,
    params: &PhysicalParams,
    state: &StateVector,
    site: usize,
    k: usize,
    t: f64,
) -> Result<StateVector> {
    space.check_dim(state)?;
    let map = two_laser_map(space, params, site, k, t, false)?;
    map.check(space, site, state, "two-laser flip")?;
    let mut out = state.clone();
    space.apply_local_dense(site, &map.matrix, &mut out);
    Ok(out)
}

/// Integer pair (n, m) of a two-condition pulse time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CongruencePair {
    pub n: u32,
    pub m: u32,
    /// √2·(δ₅-angle target) − (√2δ₅-angle target), in radians.
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseTimes {
    /// Atom → cavity map, π/(2δ₅).
    pub t1: f64,
    /// β = 1 map and β = 2 map at once.
    pub t2: f64,
    /// β = 1 phase-only and β = 2 map at once.
    pub t3: f64,
    pub t4: f64,
    /// Two-laser flip, π/(2δ₄).
    pub t5: f64,
    pub t7: f64,
    /// Detection window.
    pub t_d: f64,
    pub t2_pair: CongruencePair,
    pub t3_pair: CongruencePair,
    /// Best pairs found by the exhaustive search.
    pub t2_search: CongruencePair,
    pub t3_search: CongruencePair,
}

/// Largest n tried by the exhaustive search.
pub const CONGRUENCE_SEARCH_LIMIT: u32 = 20;
/// Default detection window in units of 1/κ.
pub const DEFAULT_T_D_MULTIPLIER: f64 = 10.0;

/// Pairs stated for the encoding pulses; the search result is reported alongside.
const T2_PAIR: (u32, u32) = (7, 10);
const T3_PAIR: (u32, u32) = (3, 4);

fn pair(a: f64, b: f64, n: u32, m: u32) -> CongruencePair {
    CongruencePair {
        n,
        m,
        residual: SQRT_2 * a - b,
    }
}

/// Minimize |√2·A(n) − (π/2 + 2mπ)| over n ≤ limit with m chosen optimally.
fn search(target_a: impl Fn(u32) -> f64, n_min: u32) -> CongruencePair {
    let mut best: Option<CongruencePair> = None;
    for n in n_min..=CONGRUENCE_SEARCH_LIMIT {
        let a = target_a(n);
        let m = ((SQRT_2 * a - FRAC_PI_2) / (2.0 * PI)).round().max(0.0) as u32;
        let p = pair(a, FRAC_PI_2 + 2.0 * PI * m as f64, n, m);
        if best.map_or(true, |b| p.residual.abs() < b.residual.abs()) {
            best = Some(p);
        }
    }
    best.expect("search range is non-empty")
}

/// Least-squares time for `tδ₅ ≈ a`, `t√2δ₅ ≈ b`.
fn compromise(a: f64, b: f64, delta5: f64) -> f64 {
    (a + SQRT_2 * b) / (3.0 * delta5)
}

pub fn solve_pulse_times(params: &PhysicalParams, t_d_multiplier: f64) -> Result<PulseTimes> {
    let (d4, d5) = (params.delta4(), params.delta5());
    if !(d4 > 0.0 && d5 > 0.0) {
        return Err(Error::InvalidParams("δ₄ and δ₅ must be positive".into()));
    }
    if !(t_d_multiplier > 0.0) {
        return Err(Error::InvalidParams("detection window multiplier must be positive".into()));
    }
    let a2 = |n: u32| FRAC_PI_2 + 2.0 * PI * n as f64;
    let a3 = |n: u32| 2.0 * PI * n as f64;
    let b = |m: u32| FRAC_PI_2 + 2.0 * PI * m as f64;
    let t2_pair = pair(a2(T2_PAIR.0), b(T2_PAIR.1), T2_PAIR.0, T2_PAIR.1);
    let t3_pair = pair(a3(T3_PAIR.0), b(T3_PAIR.1), T3_PAIR.0, T3_PAIR.1);
    let t3 = compromise(a3(T3_PAIR.0), b(T3_PAIR.1), d5);
    let t_d = if params.kappa > 0.0 {
        t_d_multiplier / params.kappa
    } else {
        f64::INFINITY
    };
    Ok(PulseTimes {
        t1: FRAC_PI_2 / d5,
        t2: compromise(a2(T2_PAIR.0), b(T2_PAIR.1), d5),
        t3,
        t4: t3,
        t5: FRAC_PI_2 / d4,
        t7: FRAC_PI_2 / d4,
        t_d,
        t2_pair,
        t3_pair,
        t2_search: search(a2, 0),
        t3_search: search(a3, 1),
    })
}

/// One laser step: `site`/`atom` lit with `drive` during `[start, start + duration)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Illumination {
    pub site: usize,
    pub atom: usize,
    pub drive: Drive,
    pub start: f64,
    pub duration: f64,
}

impl Illumination {
    pub fn new(site: usize, atom: usize, drive: Drive, start: f64, duration: f64) -> Self {
        Self {
            site,
            atom,
            drive,
            start,
            duration,
        }
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Piecewise-constant laser timeline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub segments: Vec<PulseSegment>,
}

impl Schedule {
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Merge illuminations into segments. Lasers are off wherever no step is
/// active; the schedule runs until `total` or the last step's end, whichever
/// is later. Two steps overlapping at one site are rejected.
pub fn compose_schedule(space: &Space, steps: &[Illumination], total: Option<f64>) -> Result<Schedule> {
    for s in steps {
        if !(s.start >= 0.0 && s.duration >= 0.0 && s.end().is_finite()) {
            return Err(Error::Schedule(format!("step {s:?} has a negative or non-finite time")));
        }
        if s.site >= space.num_sites() || s.atom >= space.site(s.site).atom_count {
            return Err(Error::IndexOutOfRange(format!("atom {} on site {}", s.atom, s.site)));
        }
    }
    for (i, a) in steps.iter().enumerate() {
        for b in &steps[i + 1..] {
            if a.site == b.site && a.start < b.end() && b.start < a.end() && a.duration > 0.0 && b.duration > 0.0 {
                return Err(Error::Schedule(format!(
                    "illuminations of atoms {} and {} overlap at site {}",
                    a.atom, b.atom, a.site
                )));
            }
        }
    }
    let end = steps.iter().map(Illumination::end).fold(total.unwrap_or(0.0), f64::max);
    let mut cuts: Vec<f64> = steps.iter().flat_map(|s| [s.start, s.end()]).chain([0.0, end]).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut segments: Vec<PulseSegment> = Vec::new();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo || lo >= end {
            continue;
        }
        let mut lasers = LaserConfig::dark(space);
        for s in steps.iter().filter(|s| s.start <= lo && hi <= s.end()) {
            lasers.set(s.site, s.atom, s.drive)?;
        }
        match segments.last_mut() {
            Some(prev) if prev.lasers == lasers => prev.duration += hi - lo,
            _ => segments.push(PulseSegment::new(hi - lo, lasers)),
        }
    }
    Ok(Schedule { segments })
}

/// Evolution by the analytic maps, used as the ideal backend.
pub struct IdealEvolver {
    space: Space,
    params: PhysicalParams,
    channels: Vec<JumpChannel>,
}

impl IdealEvolver {
    pub fn new(space: Space, params: PhysicalParams) -> Result<Self> {
        for s in 0..space.num_sites() {
            if space.site(s).levels_per_atom != 2 {
                return Err(Error::WrongModel("the ideal backend needs two-level atoms".into()));
            }
        }
        params.validate()?;
        let channels = build_jump_channels(&params, &space, ChannelMode::Effective)?;
        Ok(Self { space, params, channels })
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.params
    }
}

impl Evolver for IdealEvolver {
    fn space(&self) -> &Space {
        &self.space
    }

    fn channels(&self) -> &[JumpChannel] {
        &self.channels
    }

    fn evolve(&self, psi: &mut StateVector, lasers: &LaserConfig, t: f64) -> Result<()> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::Numerical(format!("segment duration {t} is not a finite non-negative time")));
        }
        self.space.check_dim(psi)?;
        lasers.check_shape(&self.space)?;
        for (site, l) in lasers.sites.iter().enumerate() {
            self.apply_site(psi, site, l.single()?, t)?;
        }
        Ok(())
    }
}

impl IdealEvolver {
    fn apply_site(&self, psi: &mut StateVector, site: usize, lit: Option<(usize, Drive)>, t: f64) -> Result<()> {
        let Some((k, drive)) = lit else {
            let d = wait_diagonal(&self.space, &self.params, site, t, true);
            self.space.apply_local_diagonal(site, &d, psi);
            return Ok(());
        };
        let (map, what) = match (drive.l, drive.l_prime) {
            (true, false) => (beta_rotation_map(&self.space, &self.params, site, k, t, true)?, "single-laser rotation"),
            (true, true) => (two_laser_map(&self.space, &self.params, site, k, t, true)?, "two-laser flip"),
            _ => return Err(Error::AnalyticDomain("L′ alone has no closed form".into())),
        };
        map.check(&self.space, site, psi, what)?;
        self.space.apply_local_dense(site, &map.matrix, psi);
        Ok(())
    }

    /// Apply a set of illuminations pulse by pulse. The sites evolve
    /// independently, so each site runs through its own pulses and dark gaps
    /// in order; every pulse is one closed-form map over its whole duration,
    /// which keeps angle rounding per pulse rather than per segment.
    /// No jumps are sampled: dark gaps are applied as no-jump evolution.
    pub fn apply_illuminations(&self, psi: &mut StateVector, steps: &[Illumination], total: Option<f64>) -> Result<()> {
        let schedule = compose_schedule(&self.space, steps, total)?;
        let end = schedule.duration();
        for site in 0..self.space.num_sites() {
            let mut own: Vec<&Illumination> = steps.iter().filter(|s| s.site == site && s.duration > 0.0).collect();
            own.sort_by(|a, b| a.start.total_cmp(&b.start));
            let mut t = 0.0;
            for step in own {
                if step.start > t {
                    self.apply_site(psi, site, None, step.start - t)?;
                }
                self.apply_site(psi, site, Some((step.atom, step.drive)), step.duration)?;
                t = step.end();
            }
            if end > t {
                self.apply_site(psi, site, None, end - t)?;
            }
        }
        if !psi.is_finite() {
            return Err(Error::Numerical("non-finite amplitudes after analytic pulses".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{build_protocol_space, ALICE, BOB};
    use proptest::prelude::*;

    fn setup() -> (Space, PhysicalParams, PulseTimes) {
        let p = PhysicalParams::paper();
        (build_protocol_space(2, 3).unwrap(), p, solve_pulse_times(&p, DEFAULT_T_D_MULTIPLIER).unwrap())
    }

    fn assert_close(a: &StateVector, b: &StateVector, tol: f64) {
        for (i, (x, y)) in a.amps().iter().zip(b.amps()).enumerate() {
            assert!((x - y).norm() < tol, "component {i}: {x} vs {y}");
        }
    }

    fn scaled(sp: &Space, ket: &str, c: C64) -> StateVector {
        let mut v = sp.ket(ket).unwrap();
        v.scale(c);
        v
    }

    #[test]
    fn congruence_pairs() {
        let (_, _, times) = setup();
        assert_eq!((times.t2_pair.n, times.t2_pair.m), (7, 10));
        assert_eq!((times.t3_pair.n, times.t3_pair.m), (3, 4));
        assert_eq!((times.t2_search.n, times.t2_search.m), (7, 10));
        assert_eq!((times.t3_search.n, times.t3_search.m), (3, 4));
        // √2(π/2 + 14π) − (π/2 + 20π).
        let expect = SQRT_2 * (FRAC_PI_2 + 14.0 * PI) - (FRAC_PI_2 + 20.0 * PI);
        assert!((times.t2_pair.residual - expect).abs() < 1e-12);
        assert!((times.t2_pair.residual - 0.018).abs() < 2e-3);
        assert!((times.t3_pair.residual - (SQRT_2 * 6.0 * PI - 8.5 * PI)).abs() < 1e-12);
    }

    #[test]
    fn pulse_times_hit_their_targets() {
        let (_, p, times) = setup();
        let d5 = p.delta5();
        assert!((times.t1 * d5 - FRAC_PI_2).abs() < 1e-12);
        assert!((times.t5 * p.delta4() - FRAC_PI_2).abs() < 1e-12);
        assert_eq!(times.t4, times.t3);
        assert!((times.t2 * d5 - 14.5 * PI).abs() < 0.02);
        assert!((times.t2 * SQRT_2 * d5 - 20.5 * PI).abs() < 0.02);
        assert!((times.t3 * d5 - 6.0 * PI).abs() < 0.05);
        assert!((times.t3 * SQRT_2 * d5 - 8.5 * PI).abs() < 0.05);
        assert!((times.t_d * p.kappa - 10.0).abs() < 1e-9);
    }

    #[test]
    fn wait_examples() {
        let (sp, p, _) = setup();
        let t = 37.0;
        let inert = apply_wait(&sp, &p, &sp.ket("1110;110").unwrap(), t, true).unwrap();
        assert_close(&inert, &sp.ket("1110;110").unwrap(), 1e-15);
        // Alice N₀ = 1 and Bob N₀ = 1, both cavities empty.
        let out = apply_wait(&sp, &p, &sp.ket("0110;010").unwrap(), t, true).unwrap();
        let a = alpha(&p, t);
        assert_close(&out, &scaled(&sp, "0110;010", a * a), 1e-14);
        // A full revolution with δ₃ = κ = 0 is the identity.
        let mut q = p;
        q.g = 1e-300;
        q.kappa = 0.0;
        let psi = {
            let mut v = sp.ket("0003;002").unwrap();
            v.add_scaled(C64::new(0.0, 1.0), &sp.ket("1010;000").unwrap());
            v
        };
        let back = apply_wait(&sp, &q, &psi, 2.0 * PI / q.delta_r(), true).unwrap();
        assert_close(&back, &psi, 1e-12);
    }

    #[test]
    fn damping_follows_photons() {
        let (sp, p, _) = setup();
        let t = 1e6;
        let out = apply_wait(&sp, &p, &sp.ket("0012;010").unwrap(), t, true).unwrap();
        assert!((out.norm2() - (-4.0 * p.kappa * t).exp()).abs() < 1e-12);
        let undamped = apply_wait(&sp, &p, &sp.ket("0012;010").unwrap(), t, false).unwrap();
        assert!((undamped.norm2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paper_single_laser_examples() {
        let (sp, p, times) = setup();
        // Alice atom 3 lit; atoms 1, 2 in |0⟩, |1⟩ so N₀ = 1.
        let f1 = |t| f_factor(&p, 1, 1, t);
        let out = apply_beta_rotation(&sp, &p, &sp.ket("0110;110").unwrap(), ALICE, 2, times.t1).unwrap();
        assert_close(&out, &scaled(&sp, "0101;110", C64::new(0.0, 1.0) * f1(times.t1)), 1e-12);

        let t2 = PI / (4.0 * p.delta5());
        let out = apply_beta_rotation(&sp, &p, &sp.ket("0110;110").unwrap(), ALICE, 2, t2).unwrap();
        let mut expect = scaled(&sp, "0101;110", C64::new(0.0, 1.0) * f1(t2) / SQRT_2);
        expect.add_scaled(f1(t2) / SQRT_2, &sp.ket("0110;110").unwrap());
        assert_close(&out, &expect, 1e-12);

        let t3 = 2.0 * PI * 3.0 / p.delta5();
        let out = apply_beta_rotation(&sp, &p, &sp.ket("0110;110").unwrap(), ALICE, 2, t3).unwrap();
        assert_close(&out, &scaled(&sp, "0110;110", f1(t3)), 1e-12);

        let t4 = PI / (2.0 * SQRT_2 * p.delta5());
        let out = apply_beta_rotation(&sp, &p, &sp.ket("0111;110").unwrap(), ALICE, 2, t4).unwrap();
        assert_close(&out, &scaled(&sp, "0102;110", C64::new(0.0, 1.0) * f_factor(&p, 1, 2, t4)), 1e-12);
    }

    #[test]
    fn beta_zero_only_gains_phase() {
        let (sp, p, times) = setup();
        let out = apply_beta_rotation(&sp, &p, &sp.ket("0100;110").unwrap(), ALICE, 2, times.t2).unwrap();
        // Dark atoms: atom 1 in |0⟩, so N₀ = 1.
        assert_close(&out, &scaled(&sp, "0100;110", alpha(&p, times.t2).powi(2)), 1e-12);
    }

    #[test]
    fn beta_above_cutoff_is_rejected() {
        let (sp, p, times) = setup();
        assert!(matches!(
            apply_beta_rotation(&sp, &p, &sp.ket("0013;110").unwrap(), ALICE, 2, times.t1),
            Err(Error::AnalyticDomain(_))
        ));
    }

    #[test]
    fn two_laser_examples() {
        let (sp, p, times) = setup();
        let psi = sp.ket("0010;110").unwrap();
        let once = apply_two_laser(&sp, &p, &psi, ALICE, 0, times.t7).unwrap();
        // Dark atoms of Alice: atom 2 in |0⟩, so N₀ = 1.
        let pre = alpha(&p, times.t7).powi(2);
        assert_close(&once, &scaled(&sp, "1010;110", C64::new(0.0, 1.0) * pre), 1e-12);
        let twice = apply_two_laser(&sp, &p, &once, ALICE, 0, times.t7).unwrap();
        assert_close(&twice, &scaled(&sp, "0010;110", -pre * pre), 1e-12);
        assert_close(&apply_two_laser(&sp, &p, &psi, ALICE, 0, 0.0).unwrap(), &psi, 1e-15);
        assert!(matches!(
            apply_two_laser(&sp, &p, &sp.ket("0011;110").unwrap(), ALICE, 0, times.t7),
            Err(Error::AnalyticDomain(_))
        ));
    }

    #[test]
    fn schedule_composition() {
        let (sp, _, times) = setup();
        assert!(compose_schedule(&sp, &[], None).unwrap().is_empty());
        let prep = compose_schedule(
            &sp,
            &[
                Illumination::new(ALICE, 2, Drive::L, 0.0, times.t1),
                Illumination::new(BOB, 0, Drive::L, 0.0, times.t1),
            ],
            None,
        )
        .unwrap();
        assert_eq!(prep.segments.len(), 1);
        assert_eq!(prep.segments[0].lasers.sites[ALICE].single().unwrap(), Some((2, Drive::L)));
        assert_eq!(prep.segments[0].lasers.sites[BOB].single().unwrap(), Some((0, Drive::L)));
        // Encoding step (d): Bob's half pulse ends with Alice's.
        let bob_start = times.t4 - times.t1 / 2.0;
        let d = compose_schedule(
            &sp,
            &[
                Illumination::new(ALICE, 2, Drive::L, 0.0, times.t4),
                Illumination::new(BOB, 1, Drive::L, bob_start, times.t1 / 2.0),
            ],
            None,
        )
        .unwrap();
        assert_eq!(d.segments.len(), 2);
        assert!((d.duration() - times.t4).abs() < 1e-9);
        assert!(d.segments[0].lasers.sites[BOB].is_dark());
        let clash = compose_schedule(
            &sp,
            &[
                Illumination::new(ALICE, 0, Drive::L, 0.0, 10.0),
                Illumination::new(ALICE, 1, Drive::L, 5.0, 10.0),
            ],
            None,
        );
        assert!(matches!(clash, Err(Error::Schedule(_))));
        let padded = compose_schedule(&sp, &[Illumination::new(BOB, 1, Drive::BOTH, 1.0, 2.0)], Some(10.0)).unwrap();
        assert_eq!(padded.segments.len(), 3);
        assert!((padded.duration() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn snapping_removes_congruence_residuals() {
        let (sp, p, times) = setup();
        let ideal = IdealEvolver::new(sp.clone(), p).unwrap();
        let mut psi = sp.ket("0011;010").unwrap();
        psi.add_scaled(C64::new(1.0, 0.0), &sp.ket("0001;110").unwrap());
        let lasers = LaserConfig::dark(&sp).with(ALICE, 2, Drive::L).unwrap();
        ideal.evolve(&mut psi, &lasers, times.t2).unwrap();
        // β = 1 → mapped, β = 2 → mapped, nothing left behind.
        assert_eq!(psi.support(1e-14).len(), 2);
        assert!(psi.amps()[sp.ket_index("0002;010").unwrap()].norm() > 0.7);
        assert!(psi.amps()[sp.ket_index("0010;110").unwrap()].norm() > 0.7);
    }

    proptest! {
        #[test]
        fn analytic_maps_are_unitary(t in 0.0f64..5e4, k in 0usize..3, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let (sp, p, _) = setup();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // Random state with Alice's cavity capped at two photons.
            let mut psi = StateVector::new((0..sp.dim()).map(|i| {
                if sp.photons_local(ALICE, sp.local_index(i, ALICE)) == 3 {
                    C64::new(0.0, 0.0)
                } else {
                    C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
                }
            }).collect());
            psi.normalize().unwrap();
            let out = apply_beta_rotation(&sp, &p, &psi, ALICE, k, t).unwrap();
            prop_assert!((out.norm2() - 1.0).abs() < 1e-12);
            let waited = apply_wait(&sp, &p, &psi, t, false).unwrap();
            prop_assert!((waited.norm2() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn t1_rotation_is_an_involution_up_to_phase(k in 0usize..3, x in 0u8..2, y in 0usize..2) {
            let (sp, p, times) = setup();
            prop_assume!(x as usize + y == 1);
            let mut label = sp.parse_label("0000;000").unwrap();
            label.sites[ALICE].atoms[k] = x;
            label.sites[ALICE].photons = y;
            let start = StateVector::basis(sp.dim(), sp.index(&label).unwrap());
            let once = apply_beta_rotation(&sp, &p, &start, ALICE, k, times.t1).unwrap();
            let twice = apply_beta_rotation(&sp, &p, &once, ALICE, k, times.t1).unwrap();
            let ratio = start.inner(&twice).unwrap();
            prop_assert!((ratio.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn beta_zero_population_is_inert(k in 0usize..3, t in 0.0f64..1e5, others in 0usize..4) {
            let (sp, p, _) = setup();
            let mut label = sp.parse_label("0000;110").unwrap();
            let mut slots = (0..3).filter(|&j| j != k);
            label.sites[ALICE].atoms[slots.next().unwrap()] = (others & 1) as u8;
            label.sites[ALICE].atoms[slots.next().unwrap()] = (others >> 1) as u8;
            let start = StateVector::basis(sp.dim(), sp.index(&label).unwrap());
            let out = apply_beta_rotation(&sp, &p, &start, ALICE, k, t).unwrap();
            prop_assert!((out.inner(&start).unwrap().norm() - 1.0).abs() < 1e-12);
        }
    }
}
