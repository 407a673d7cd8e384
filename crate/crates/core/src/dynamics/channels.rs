//! Quantum-jump channels: the two beam-splitter detectors and, for the full
//! model, spontaneous emission out of |2⟩.

use serde::{Deserialize, Serialize};

use super::params::PhysicalParams;
use crate::error::Result;
use crate::hilbert::{Space, SparseOperator, ALICE, BOB, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelLabel {
    DetectorPlus,
    DetectorMinus,
    /// |2⟩ → |to⟩ on one atom.
    Spontaneous { site: usize, atom: usize, to: u8 },
}

impl ChannelLabel {
    /// ε = ±1 for a detector click.
    pub fn detector_sign(&self) -> Option<i8> {
        match self {
            ChannelLabel::DetectorPlus => Some(1),
            ChannelLabel::DetectorMinus => Some(-1),
            ChannelLabel::Spontaneous { .. } => None,
        }
    }

    pub fn is_detector(&self) -> bool {
        self.detector_sign().is_some()
    }
}

#[derive(Clone, Debug)]
pub struct JumpChannel {
    pub label: ChannelLabel,
    pub op: SparseOperator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelMode {
    /// Detectors only.
    Effective,
    /// Detectors plus spontaneous emission.
    Full,
}

/// `C± = √κ (a_A ± a_B)`, so that Σ C†C = 2κ(n_A + n_B) balances the
/// `−iκ a†a` term of each cavity. With a single site the one detector is
/// `√(2κ) a`.
pub fn build_jump_channels(params: &PhysicalParams, space: &Space, mode: ChannelMode) -> Result<Vec<JumpChannel>> {
    let mut channels = Vec::new();
    let amp = C64::new(params.kappa.sqrt(), 0.0);
    if space.num_sites() >= 2 {
        let a = space.annihilator(ALICE)?;
        let b = space.annihilator(BOB)?;
        channels.push(JumpChannel {
            label: ChannelLabel::DetectorPlus,
            op: (&a + &b).scale(amp),
        });
        channels.push(JumpChannel {
            label: ChannelLabel::DetectorMinus,
            op: (&a - &b).scale(amp),
        });
    } else {
        channels.push(JumpChannel {
            label: ChannelLabel::DetectorPlus,
            op: space.annihilator(0)?.scale(C64::new((2.0 * params.kappa).sqrt(), 0.0)),
        });
    }
    if mode == ChannelMode::Full {
        let (r0, r1) = params.emission_rates();
        for site in 0..space.num_sites() {
            if space.site(site).levels_per_atom < 3 {
                continue;
            }
            for atom in 0..space.site(site).atom_count {
                for (to, rate) in [(0u8, r0), (1u8, r1)] {
                    if rate > 0.0 {
                        channels.push(JumpChannel {
                            label: ChannelLabel::Spontaneous { site, atom, to },
                            op: space.sigma(site, atom, to, 2)?.scale(C64::new(rate.sqrt(), 0.0)),
                        });
                    }
                }
            }
        }
    }
    Ok(channels)
}

/// Σ C†C over `channels`.
pub fn decay_operator(channels: &[JumpChannel], dim: usize) -> SparseOperator {
    channels
        .iter()
        .fold(SparseOperator::zero(dim), |acc, c| &acc + &(&c.op.adjoint() * &c.op))
}
