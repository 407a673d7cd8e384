//! Exact propagation over piecewise-constant segments.
//!
//! The joint Hamiltonian is a sum of site-local terms, so the propagator
//! factorises into one small matrix per site. Diagonal site Hamiltonians
//! (the dark effective model) are exponentiated entrywise; everything else
//! goes through a dense matrix exponential cached per (site, lasers,
//! duration).

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::hamiltonian::{site_hamiltonian, LaserConfig, Model, SiteLasers};
use super::params::PhysicalParams;
use crate::error::{Error, Result};
use crate::hilbert::{Space, StateVector, C64};

/// Constant laser configuration held for `duration`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSegment {
    pub duration: f64,
    pub lasers: LaserConfig,
}

impl PulseSegment {
    pub fn new(duration: f64, lasers: LaserConfig) -> Self {
        Self { duration, lasers }
    }

    pub fn dark(space: &Space, duration: f64) -> Self {
        Self::new(duration, LaserConfig::dark(space))
    }
}

/// Dense exponential `exp(−iHt)` of a site Hamiltonian.
pub fn expm_evolution(h: &DMatrix<C64>, t: f64) -> DMatrix<C64> {
    (h * C64::new(0.0, -t)).exp()
}

enum Generator {
    Diagonal(Vec<C64>),
    Dense(DMatrix<C64>),
}

/// Budget for cached site propagators, in matrix entries.
const CACHE_ENTRIES: usize = 1 << 23;

type UnitaryKey = (usize, SiteLasers, u64);

#[derive(Default)]
struct UnitaryCache {
    map: HashMap<UnitaryKey, Arc<DMatrix<C64>>>,
    entries: usize,
}

pub struct Propagator {
    space: Space,
    params: PhysicalParams,
    model: Model,
    generators: RwLock<HashMap<(usize, SiteLasers), Arc<Generator>>>,
    unitaries: RwLock<UnitaryCache>,
}

impl std::fmt::Debug for Propagator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Propagator").field("model", &self.model).finish_non_exhaustive()
    }
}

impl Propagator {
    pub fn new(space: Space, params: PhysicalParams, model: Model) -> Result<Self> {
        model.check_space(&space)?;
        params.validate()?;
        Ok(Self {
            space,
            params,
            model,
            generators: RwLock::default(),
            unitaries: RwLock::default(),
        })
    }

    pub fn space(&self) -> &Space {
        &self.space
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.params
    }

    pub fn model(&self) -> Model {
        self.model
    }

    fn generator(&self, site: usize, lasers: &SiteLasers) -> Result<Arc<Generator>> {
        let key = (site, lasers.clone());
        if let Some(g) = self.generators.read().unwrap().get(&key) {
            return Ok(g.clone());
        }
        let h = site_hamiltonian(&self.space, &self.params, self.model, site, lasers)?;
        let g = Arc::new(if h.is_diagonal() {
            Generator::Diagonal(h.diagonal())
        } else {
            Generator::Dense(h.to_dense())
        });
        Ok(self.generators.write().unwrap().entry(key).or_insert(g).clone())
    }

    /// Site propagator as a dense matrix (diagonal generators are expanded).
    pub fn site_unitary(&self, site: usize, lasers: &SiteLasers, t: f64) -> Result<DMatrix<C64>> {
        Ok(match &*self.generator(site, lasers)? {
            Generator::Diagonal(d) => DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                d.len(),
                d.iter().map(|h| (h * C64::new(0.0, -t)).exp()),
            )),
            Generator::Dense(_) => (*self.dense_unitary(site, lasers, t)?).clone(),
        })
    }

    fn dense_unitary(&self, site: usize, lasers: &SiteLasers, t: f64) -> Result<Arc<DMatrix<C64>>> {
        let key = (site, lasers.clone(), t.to_bits());
        if let Some(u) = self.unitaries.read().unwrap().map.get(&key) {
            return Ok(u.clone());
        }
        let Generator::Dense(h) = &*self.generator(site, lasers)? else {
            unreachable!("dense_unitary called on a diagonal generator")
        };
        let u = Arc::new(expm_evolution(h, t));
        if !u.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::Numerical(format!(
                "matrix exponential overflowed at site {site}, t = {t}"
            )));
        }
        let mut cache = self.unitaries.write().unwrap();
        if cache.entries + u.len() <= CACHE_ENTRIES {
            cache.entries += u.len();
            cache.map.insert(key, u.clone());
        }
        Ok(u)
    }

    /// ψ ← exp(−iHt) ψ for the given lasers.
    pub fn propagate(&self, psi: &mut StateVector, lasers: &LaserConfig, t: f64) -> Result<()> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::Numerical(format!("segment duration {t} is not a finite non-negative time")));
        }
        self.space.check_dim(psi)?;
        lasers.check_shape(&self.space)?;
        if t == 0.0 {
            return Ok(());
        }
        for (site, l) in lasers.sites.iter().enumerate() {
            match &*self.generator(site, l)? {
                Generator::Diagonal(d) => {
                    let phases: Vec<C64> = d.iter().map(|h| (h * C64::new(0.0, -t)).exp()).collect();
                    self.space.apply_local_diagonal(site, &phases, psi);
                }
                Generator::Dense(_) => {
                    let u = self.dense_unitary(site, l, t)?;
                    self.space.apply_local_dense(site, &u, psi);
                }
            }
        }
        if !psi.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite amplitudes after propagating {t} µs with {lasers:?}"
            )));
        }
        Ok(())
    }
}

/// Unnormalized no-jump evolution through one segment.
pub fn propagate_nojump(prop: &Propagator, state: &StateVector, segment: &PulseSegment) -> Result<StateVector> {
    let mut out = state.clone();
    prop.propagate(&mut out, &segment.lasers, segment.duration)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::hamiltonian::{build_effective_hamiltonian, Drive};
    use crate::hilbert::{build_protocol_space, ALICE, BOB};
    use rand::{Rng, SeedableRng};

    fn random_state(dim: usize, seed: u64) -> StateVector {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = StateVector::new((0..dim).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect());
        v.normalize().unwrap();
        v
    }

    fn effective() -> Propagator {
        Propagator::new(build_protocol_space(2, 3).unwrap(), PhysicalParams::paper(), Model::Effective).unwrap()
    }

    #[test]
    fn waiting_phases_are_exact() {
        let prop = effective();
        let p = *prop.params();
        let sp = prop.space().clone();
        let t = 1234.5;
        let psi = sp.ket("0012;010").unwrap();
        let out = propagate_nojump(&prop, &psi, &PulseSegment::dark(&sp, t)).unwrap();
        // Alice N₀ = 2, y = 2; Bob N₀ = 1, y = 0.
        let phase = 2.0 * (p.delta_r() + 2.0 * p.delta3()) * t + p.delta_r() * t;
        let expect = C64::from_polar((-2.0 * p.kappa * t).exp(), phase);
        let i = sp.ket_index("0012;010").unwrap();
        assert!((out.amps()[i] - expect).norm() < 1e-12);
    }

    #[test]
    fn zero_time_is_identity() {
        let prop = effective();
        let psi = random_state(prop.space().dim(), 1);
        let lasers = LaserConfig::dark(prop.space()).with(ALICE, 1, Drive::L).unwrap();
        assert_eq!(propagate_nojump(&prop, &psi, &PulseSegment::new(0.0, lasers)).unwrap(), psi);
    }

    #[test]
    fn factorised_matches_joint_exponential() {
        let prop = effective();
        let sp = prop.space().clone();
        let lasers = LaserConfig::dark(&sp)
            .with(ALICE, 2, Drive::L)
            .unwrap()
            .with(BOB, 0, Drive::BOTH)
            .unwrap();
        let t = 321.0;
        let h = build_effective_hamiltonian(prop.params(), &lasers, &sp).unwrap().to_dense();
        let u = expm_evolution(&h, t);
        let psi = random_state(sp.dim(), 2);
        let expect = &u * nalgebra::DVector::from_column_slice(psi.amps());
        let out = propagate_nojump(&prop, &psi, &PulseSegment::new(t, lasers)).unwrap();
        for (a, b) in out.amps().iter().zip(expect.iter()) {
            assert!((a - b).norm() < 1e-11);
        }
    }

    #[test]
    fn semigroup_and_norm_decay() {
        let params = PhysicalParams::new(60.0, 4.0, 0.5, 0.3, 0.0, 0.01).unwrap();
        let prop = Propagator::new(build_protocol_space(2, 3).unwrap(), params, Model::Effective).unwrap();
        let sp = prop.space().clone();
        let lasers = LaserConfig::dark(&sp).with(ALICE, 0, Drive::L).unwrap();
        let psi = random_state(sp.dim(), 3);
        let whole = propagate_nojump(&prop, &psi, &PulseSegment::new(50.0, lasers.clone())).unwrap();
        let half = PulseSegment::new(25.0, lasers);
        let twice = propagate_nojump(&prop, &propagate_nojump(&prop, &psi, &half).unwrap(), &half).unwrap();
        for (a, b) in whole.amps().iter().zip(twice.amps()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(whole.norm2() <= psi.norm2());
    }

    #[test]
    fn rejects_bad_durations() {
        let prop = effective();
        let mut psi = random_state(prop.space().dim(), 4);
        let lasers = LaserConfig::dark(prop.space());
        assert!(prop.propagate(&mut psi, &lasers, f64::NAN).is_err());
        assert!(prop.propagate(&mut psi, &lasers, -1.0).is_err());
    }
}
