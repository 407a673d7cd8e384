//! Quantum-trajectory simulation of cavity-QED teleportation with local
//! redundant encoding.

pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod hilbert;
pub mod protocol;
pub mod pulses;

pub use dynamics::{Drive, LaserConfig, Model, PhysicalParams};
pub use error::{Error, Result};
pub use experiment::{run_ensemble, run_trajectories, EnsembleConfig, EnsembleStats, InputSampling, TrajectoryResult};
pub use hilbert::{
    build_protocol_space, build_space, BasisLabel, LeakageCounter, Site, SiteLabel, Space,
    SpaceDescriptor, SparseOperator, StateVector, ALICE, BOB, C64,
};
pub use protocol::{Backend, InputState, Outcome, Protocol, ProtocolConfig, ProtocolRecord, ProtocolRun};
pub use pulses::{solve_pulse_times, PulseTimes};
