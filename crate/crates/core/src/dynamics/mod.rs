//! Hamiltonians, jump channels and trajectory propagation.

pub mod channels;
pub mod hamiltonian;
pub mod params;
pub mod propagate;
pub mod trajectory;

pub use channels::{build_jump_channels, decay_operator, ChannelLabel, ChannelMode, JumpChannel};
pub use hamiltonian::{
    build_effective_hamiltonian, build_full_hamiltonian, build_waiting_hamiltonian, site_hamiltonian,
    waiting_diagonal, Drive, LaserConfig, Model, SiteLasers,
};
pub use params::{DecayConvention, DerivedRates, EmissionModel, PhysicalParams, ValidityCheck, ValidityReport};
pub use propagate::{expm_evolution, propagate_nojump, Propagator, PulseSegment};
pub use trajectory::{sample_jump, Evolver, JumpEvent, JumpSample, NumericEvolver, Trajectory, JUMP_SEARCH_LEVELS};
