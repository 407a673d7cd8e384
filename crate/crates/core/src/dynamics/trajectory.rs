//! Monte-Carlo wave-function trajectories.
//!
//! The state is carried unnormalized. A uniform threshold `u` is drawn after
//! every jump; a jump happens once ‖ψ‖² falls to `u`. Inside a segment the
//! crossing is located by a binary search over dyadic fractions of the
//! segment, so only durations `T/2^k` are ever propagated.

use rand::Rng;

use super::channels::{build_jump_channels, ChannelLabel, ChannelMode, JumpChannel};
use super::hamiltonian::{LaserConfig, Model};
use super::params::PhysicalParams;
use super::propagate::{Propagator, PulseSegment};
use crate::error::{Error, Result};
use crate::hilbert::{Space, StateVector};

/// Dyadic refinement depth of the jump-time search (2⁻³² ≈ 2.3e-10 relative).
pub const JUMP_SEARCH_LEVELS: i32 = 32;

/// No-jump evolution plus the jump operators that go with it.
pub trait Evolver: Send + Sync {
    fn space(&self) -> &Space;
    fn channels(&self) -> &[JumpChannel];
    fn evolve(&self, psi: &mut StateVector, lasers: &LaserConfig, t: f64) -> Result<()>;
}

/// Exact propagation of the full or effective Hamiltonian.
#[derive(Debug)]
pub struct NumericEvolver {
    prop: Propagator,
    channels: Vec<JumpChannel>,
}

impl NumericEvolver {
    pub fn new(space: Space, params: PhysicalParams, model: Model) -> Result<Self> {
        let mode = match model {
            Model::Full => ChannelMode::Full,
            Model::Effective => ChannelMode::Effective,
        };
        let channels = build_jump_channels(&params, &space, mode)?;
        Ok(Self {
            prop: Propagator::new(space, params, model)?,
            channels,
        })
    }

    pub fn propagator(&self) -> &Propagator {
        &self.prop
    }
}

impl Evolver for NumericEvolver {
    fn space(&self) -> &Space {
        self.prop.space()
    }

    fn channels(&self) -> &[JumpChannel] {
        &self.channels
    }

    fn evolve(&self, psi: &mut StateVector, lasers: &LaserConfig, t: f64) -> Result<()> {
        self.prop.propagate(psi, lasers, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpEvent {
    /// Time since the start of the call that produced it.
    pub time: f64,
    pub channel: ChannelLabel,
}

pub struct Trajectory<'e, E: Evolver + ?Sized, R: Rng> {
    evolver: &'e E,
    psi: StateVector,
    threshold: f64,
    rng: R,
}

impl<'e, E: Evolver + ?Sized, R: Rng> Trajectory<'e, E, R> {
    pub fn new(evolver: &'e E, psi: StateVector, mut rng: R) -> Result<Self> {
        evolver.space().check_dim(&psi)?;
        let psi = psi.normalized()?;
        let threshold = rng.gen::<f64>();
        Ok(Self {
            evolver,
            psi,
            threshold,
            rng,
        })
    }

    pub fn evolver(&self) -> &'e E {
        self.evolver
    }

    /// Current unnormalized state.
    pub fn state(&self) -> &StateVector {
        &self.psi
    }

    pub fn normalized_state(&self) -> Result<StateVector> {
        self.psi.normalized()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }

    /// Normalize the state and rescale the threshold accordingly, which
    /// leaves the jump statistics unchanged.
    pub fn renormalize(&mut self) -> Result<()> {
        let n2 = self.psi.normalize()?;
        self.threshold /= n2;
        Ok(())
    }

    /// Replace the state by a non-increasing map of it (a projection, say).
    pub fn map_state(&mut self, f: impl FnOnce(&mut StateVector) -> Result<()>) -> Result<()> {
        f(&mut self.psi)?;
        if !self.psi.is_finite() {
            return Err(Error::Numerical("state map produced non-finite amplitudes".into()));
        }
        Ok(())
    }

    /// Evolve for up to `duration`, stopping right after the first jump.
    pub fn advance(&mut self, lasers: &LaserConfig, duration: f64) -> Result<Option<JumpEvent>> {
        if duration == 0.0 {
            return Ok(None);
        }
        let mut end = self.psi.clone();
        self.evolver.evolve(&mut end, lasers, duration)?;
        if end.norm2() > self.threshold {
            self.psi = end;
            return Ok(None);
        }
        let mut cur = self.psi.clone();
        let mut t = 0.0;
        for k in 1..=JUMP_SEARCH_LEVELS {
            let h = duration * 2f64.powi(-k);
            let mut trial = cur.clone();
            self.evolver.evolve(&mut trial, lasers, h)?;
            if trial.norm2() > self.threshold {
                cur = trial;
                t += h;
            }
        }
        let channel = self.jump(cur)?;
        Ok(Some(JumpEvent { time: t, channel }))
    }

    /// Evolve for exactly `duration`, collecting every jump. Stops early with
    /// an error after `max_jumps` jumps.
    pub fn run(&mut self, lasers: &LaserConfig, duration: f64, max_jumps: usize) -> Result<Vec<JumpEvent>> {
        let mut events = Vec::new();
        let mut elapsed = 0.0;
        while let Some(ev) = self.advance(lasers, duration - elapsed)? {
            elapsed += ev.time;
            events.push(JumpEvent {
                time: elapsed,
                channel: ev.channel,
            });
            if events.len() > max_jumps {
                return Err(Error::Numerical(format!("more than {max_jumps} jumps in one segment")));
            }
        }
        Ok(events)
    }

    pub fn run_segment(&mut self, segment: &PulseSegment, max_jumps: usize) -> Result<Vec<JumpEvent>> {
        self.run(&segment.lasers, segment.duration, max_jumps)
    }

    fn jump(&mut self, psi: StateVector) -> Result<ChannelLabel> {
        let candidates: Vec<(ChannelLabel, StateVector)> = self
            .evolver
            .channels()
            .iter()
            .map(|c| Ok((c.label, c.op.apply(&psi)?)))
            .collect::<Result<_>>()?;
        let total: f64 = candidates.iter().map(|(_, v)| v.norm2()).sum();
        if !(total > 0.0) {
            return Err(Error::Numerical(
                "norm decayed but every jump channel vanishes on the state".into(),
            ));
        }
        let mut r = self.rng.gen::<f64>() * total;
        let mut chosen = candidates.len() - 1;
        for (i, (_, v)) in candidates.iter().enumerate() {
            let w = v.norm2();
            if r < w && w > 0.0 {
                chosen = i;
                break;
            }
            r -= w;
        }
        let (label, mut next) = candidates.into_iter().nth(chosen).expect("chosen index is in range");
        next.normalize()?;
        self.psi = next;
        self.threshold = self.rng.gen::<f64>();
        Ok(label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum JumpSample {
    /// Absolute time since the start of the schedule.
    Jump {
        time: f64,
        channel: ChannelLabel,
        state: StateVector,
    },
    NoJump(StateVector),
}

/// Run `schedule` from `state` until the first jump.
pub fn sample_jump<E: Evolver + ?Sized, R: Rng>(
    evolver: &E,
    state: &StateVector,
    schedule: &[PulseSegment],
    rng: R,
) -> Result<JumpSample> {
    let mut traj = Trajectory::new(evolver, state.clone(), rng)?;
    let mut clock = 0.0;
    for seg in schedule {
        if let Some(ev) = traj.advance(&seg.lasers, seg.duration)? {
            return Ok(JumpSample::Jump {
                time: clock + ev.time,
                channel: ev.channel,
                state: traj.psi,
            });
        }
        clock += seg.duration;
    }
    Ok(JumpSample::NoJump(traj.psi))
}
