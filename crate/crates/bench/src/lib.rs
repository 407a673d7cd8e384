//! Shared fixtures for the benchmarks.

use qtele_core::protocol::{Backend, Protocol, ProtocolConfig};
use qtele_core::{build_protocol_space, PhysicalParams, Space};

/// Two-level protocol space at the numeric Fock cutoff.
pub fn effective_space() -> Space {
    build_protocol_space(2, qtele_core::protocol::NUMERIC_FOCK_CUTOFF).expect("protocol space")
}

pub fn protocol(backend: Backend) -> Protocol {
    let params = match backend {
        Backend::Ideal => PhysicalParams::paper(),
        _ => PhysicalParams::desk(),
    };
    Protocol::new(ProtocolConfig::new(params, backend)).expect("protocol")
}
