//! Site-local and joint Hamiltonians for the full three-level model, the
//! adiabatically eliminated two-level model and the dark (waiting) limit.

use serde::{Deserialize, Serialize};

use super::params::PhysicalParams;
use crate::error::{Error, Result};
use crate::hilbert::{Space, SparseOperator, C64};

/// Which classical lasers illuminate one atom. `l` drives |1⟩↔|2⟩ with Ω,
/// `l_prime` drives |0⟩↔|2⟩ with Ω′.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Drive {
    pub l: bool,
    pub l_prime: bool,
}

impl Drive {
    pub const OFF: Drive = Drive { l: false, l_prime: false };
    pub const L: Drive = Drive { l: true, l_prime: false };
    pub const L_PRIME: Drive = Drive { l: false, l_prime: true };
    pub const BOTH: Drive = Drive { l: true, l_prime: true };

    pub fn is_on(&self) -> bool {
        self.l || self.l_prime
    }

    fn merge(self, other: Drive) -> Drive {
        Drive {
            l: self.l || other.l,
            l_prime: self.l_prime || other.l_prime,
        }
    }
}

/// Per-atom drives of one site.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SiteLasers {
    pub drives: Vec<Drive>,
}

impl SiteLasers {
    pub fn dark(atoms: usize) -> Self {
        Self {
            drives: vec![Drive::OFF; atoms],
        }
    }

    pub fn is_dark(&self) -> bool {
        self.drives.iter().all(|d| !d.is_on())
    }

    pub fn lit(&self) -> impl Iterator<Item = (usize, Drive)> + '_ {
        self.drives.iter().copied().enumerate().filter(|(_, d)| d.is_on())
    }

    /// The single illuminated atom, `None` if dark, an error if several are lit.
    pub fn single(&self) -> Result<Option<(usize, Drive)>> {
        let mut lit = self.lit();
        let first = lit.next();
        if lit.next().is_some() {
            return Err(Error::Schedule("more than one atom illuminated at a site".into()));
        }
        Ok(first)
    }
}

/// Laser state of every atom of every site.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LaserConfig {
    pub sites: Vec<SiteLasers>,
}

impl LaserConfig {
    pub fn dark(space: &Space) -> Self {
        Self {
            sites: space
                .descriptor()
                .sites
                .iter()
                .map(|s| SiteLasers::dark(s.atom_count))
                .collect(),
        }
    }

    /// Turn on `drive` for one atom, keeping whatever is already on.
    pub fn set(&mut self, site: usize, atom: usize, drive: Drive) -> Result<()> {
        let slot = self
            .sites
            .get_mut(site)
            .and_then(|s| s.drives.get_mut(atom))
            .ok_or_else(|| Error::IndexOutOfRange(format!("atom {atom} on site {site}")))?;
        *slot = slot.merge(drive);
        Ok(())
    }

    pub fn with(mut self, site: usize, atom: usize, drive: Drive) -> Result<Self> {
        self.set(site, atom, drive)?;
        Ok(self)
    }

    pub fn is_dark(&self) -> bool {
        self.sites.iter().all(SiteLasers::is_dark)
    }

    /// At most one illuminated atom per site.
    pub fn check_single_atom(&self) -> Result<()> {
        for s in &self.sites {
            s.single()?;
        }
        Ok(())
    }

    pub fn check_shape(&self, space: &Space) -> Result<()> {
        let ok = self.sites.len() == space.num_sites()
            && self
                .sites
                .iter()
                .enumerate()
                .all(|(s, l)| l.drives.len() == space.site(s).atom_count);
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: space.num_sites(),
                found: self.sites.len(),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    /// Three-level atoms with the excited state kept.
    Full,
    /// Two-level atoms after adiabatic elimination.
    Effective,
}

impl Model {
    pub fn levels(self) -> usize {
        match self {
            Model::Full => 3,
            Model::Effective => 2,
        }
    }

    pub fn check_space(self, space: &Space) -> Result<()> {
        for s in 0..space.num_sites() {
            let levels = space.site(s).levels_per_atom;
            if levels != self.levels() {
                return Err(Error::WrongModel(format!(
                    "{self:?} model needs {}-level atoms, site {s} has {levels}",
                    self.levels()
                )));
            }
        }
        Ok(())
    }
}

fn re(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// Hamiltonian of one site in its local basis.
pub fn site_hamiltonian(
    space: &Space,
    params: &PhysicalParams,
    model: Model,
    site: usize,
    lasers: &SiteLasers,
) -> Result<SparseOperator> {
    model.check_space(space)?;
    let atoms = space.site(site).atom_count;
    if lasers.drives.len() != atoms {
        return Err(Error::DimensionMismatch {
            expected: atoms,
            found: lasers.drives.len(),
        });
    }
    let a = space.local_annihilator(site)?;
    let ad = a.adjoint();
    let n = space.local_number(site)?;
    let mut h = n.scale(C64::new(0.0, -params.kappa));
    let sig = |k, i, j| space.local_sigma(site, k, i, j);
    match model {
        Model::Full => {
            let excited = C64::new(params.delta, -params.excited_decay());
            for (k, drive) in lasers.drives.iter().enumerate() {
                let coupling = &(&a * &sig(k, 2, 0)?) + &(&ad * &sig(k, 0, 2)?);
                h = &h + &sig(k, 2, 2)?.scale(excited);
                h = &h + &sig(k, 0, 0)?.scale(re(-params.delta_r()));
                h = &h + &coupling.scale(re(params.g));
                if drive.l {
                    h = &h + &(&sig(k, 2, 1)? + &sig(k, 1, 2)?).scale(re(params.omega));
                }
                if drive.l_prime {
                    h = &h + &(&sig(k, 2, 0)? + &sig(k, 0, 2)?).scale(re(params.omega_prime));
                }
            }
        }
        Model::Effective => {
            let d = params.derived();
            for (k, drive) in lasers.drives.iter().enumerate() {
                let s00 = sig(k, 0, 0)?;
                h = &h + &s00.scale(re(-d.delta_r));
                h = &h + &(&n * &s00).scale(re(-d.delta3));
                if drive.l {
                    h = &h + &sig(k, 1, 1)?.scale(re(-d.delta1));
                    let hop = &(&a * &sig(k, 1, 0)?) + &(&ad * &sig(k, 0, 1)?);
                    h = &h + &hop.scale(re(-d.delta5));
                }
                if drive.l_prime {
                    h = &h + &s00.scale(re(-d.delta2));
                    let hop = &(&a * &s00) + &(&ad * &s00);
                    h = &h + &hop.scale(re(-d.delta6));
                }
                if drive.l && drive.l_prime {
                    h = &h + &(&sig(k, 1, 0)? + &sig(k, 0, 1)?).scale(re(-d.delta4));
                }
            }
        }
    }
    Ok(h)
}

fn joint(space: &Space, params: &PhysicalParams, model: Model, laser: &LaserConfig) -> Result<SparseOperator> {
    laser.check_shape(space)?;
    let mut h = SparseOperator::zero(space.dim());
    for (s, l) in laser.sites.iter().enumerate() {
        h = &h + &space.embed(s, &site_hamiltonian(space, params, model, s, l)?)?;
    }
    Ok(h)
}

pub fn build_full_hamiltonian(params: &PhysicalParams, laser: &LaserConfig, space: &Space) -> Result<SparseOperator> {
    joint(space, params, Model::Full, laser)
}

pub fn build_effective_hamiltonian(
    params: &PhysicalParams,
    laser: &LaserConfig,
    space: &Space,
) -> Result<SparseOperator> {
    joint(space, params, Model::Effective, laser)
}

/// Local diagonal of the dark Hamiltonian: −N₀(Δ_r + yδ₃) − iκy.
pub fn waiting_diagonal(space: &Space, params: &PhysicalParams, site: usize) -> Vec<C64> {
    let (dr, d3) = (params.delta_r(), params.delta3());
    (0..space.site_dim(site))
        .map(|l| {
            let n0 = space.count_level_local(site, l, 0, None) as f64;
            let y = space.photons_local(site, l) as f64;
            C64::new(-n0 * (dr + y * d3), -params.kappa * y)
        })
        .collect()
}

/// Joint dark Hamiltonian; diagonal in the computational basis.
pub fn build_waiting_hamiltonian(params: &PhysicalParams, space: &Space) -> Result<SparseOperator> {
    let mut h = SparseOperator::zero(space.dim());
    for s in 0..space.num_sites() {
        let diag = waiting_diagonal(space, params, s);
        let local = SparseOperator::from_triplets(diag.len(), diag.into_iter().enumerate().map(|(i, v)| (i, i, v)).collect());
        h = &h + &space.embed(s, &local)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{build_protocol_space, build_space, Site, SpaceDescriptor, StateVector, ALICE, BOB};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn one_atom_space(levels: usize) -> Space {
        build_space(SpaceDescriptor {
            sites: vec![Site::new(1, levels, 2)],
        })
        .unwrap()
    }

    fn random_state(dim: usize, seed: u64) -> StateVector {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = StateVector::new((0..dim).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect());
        v.normalize().unwrap();
        v
    }

    #[test]
    fn excited_atom_sits_at_delta() {
        let sp = one_atom_space(3);
        let p = PhysicalParams::new(7.0, 1.0, 0.5, 0.2, 0.0, 0.0).unwrap();
        let h = build_full_hamiltonian(&p, &LaserConfig::dark(&sp), &sp).unwrap();
        let i = sp.ket_index("20").unwrap();
        assert_eq!(h.get(i, i), C64::new(7.0, 0.0));
    }

    #[test]
    fn resonant_rabi_flip() {
        // Δ = 0 and only Ω: the {|1⟩, |2⟩} block is Ω σx.
        let sp = one_atom_space(3);
        let mut p = PhysicalParams::new(1.0, 2.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        p.delta = 0.0;
        p.g = 0.0;
        let lasers = LaserConfig::dark(&sp).with(0, 0, Drive::L).unwrap();
        let h = build_full_hamiltonian(&p, &lasers, &sp).unwrap();
        // Δ_r = Ω²/Δ diverges at Δ = 0, but only on |0⟩; restrict to {|1,0⟩, |2,0⟩}.
        let (i1, i2) = (sp.ket_index("10").unwrap(), sp.ket_index("20").unwrap());
        let block = DMatrix::from_fn(2, 2, |r, c| h.get([i1, i2][r], [i1, i2][c]));
        let t = std::f64::consts::PI / (2.0 * p.omega);
        let u = (block * C64::new(0.0, -t)).exp();
        assert!((u[(1, 0)] - C64::new(0.0, -1.0)).norm() < 1e-12);
        assert!(u[(0, 0)].norm() < 1e-12);
    }

    #[test]
    fn anti_hermitian_part_counts_decay() {
        let sp = build_protocol_space(3, 2).unwrap();
        let p = PhysicalParams::new(50.0, 3.0, 0.4, 0.1, 0.03, 0.02).unwrap();
        let lasers = LaserConfig::dark(&sp).with(ALICE, 1, Drive::BOTH).unwrap().with(BOB, 0, Drive::L).unwrap();
        let h = build_full_hamiltonian(&p, &lasers, &sp).unwrap();
        let anti = (&h - &h.adjoint()).scale(C64::new(0.0, 0.5));
        let psi = random_state(sp.dim(), 3);
        let lhs = anti.expectation(&psi);
        let mut rhs = 0.0;
        for s in 0..2 {
            for k in 0..sp.site(s).atom_count {
                rhs += p.gamma * sp.sigma(s, k, 2, 2).unwrap().expectation(&psi).re;
            }
            rhs += p.kappa * sp.number(s).unwrap().expectation(&psi).re;
        }
        assert!((lhs.re - rhs).abs() < 1e-12 && lhs.im.abs() < 1e-12);
    }

    #[test]
    fn model_and_space_must_agree() {
        let two = build_protocol_space(2, 3).unwrap();
        let three = build_protocol_space(3, 3).unwrap();
        let p = PhysicalParams::paper();
        assert!(matches!(build_full_hamiltonian(&p, &LaserConfig::dark(&two), &two), Err(Error::WrongModel(_))));
        assert!(matches!(build_effective_hamiltonian(&p, &LaserConfig::dark(&three), &three), Err(Error::WrongModel(_))));
    }

    #[test]
    fn dark_effective_is_the_waiting_hamiltonian() {
        let sp = build_protocol_space(2, 3).unwrap();
        let p = PhysicalParams::paper();
        let eff = build_effective_hamiltonian(&p, &LaserConfig::dark(&sp), &sp).unwrap();
        let wait = build_waiting_hamiltonian(&p, &sp).unwrap();
        assert!(eff.max_abs_diff(&wait) < 1e-15);
        assert!(wait.is_diagonal());
        // Eigenvalue −N₀(Δ_r + yδ₃) − iκy read off per site.
        let i = sp.ket_index("0012;010").unwrap();
        let expect = C64::new(-2.0 * (p.delta_r() + 2.0 * p.delta3()) - p.delta_r(), -2.0 * p.kappa);
        assert!((wait.get(i, i) - expect).norm() < 1e-15);
        let j = sp.ket_index("1110;110").unwrap();
        assert_eq!(wait.get(j, j), C64::new(0.0, 0.0));
    }

    #[test]
    fn hermitian_without_decay() {
        let sp = build_protocol_space(2, 3).unwrap();
        let mut p = PhysicalParams::paper();
        p.kappa = 0.0;
        let lasers = LaserConfig::dark(&sp).with(ALICE, 2, Drive::BOTH).unwrap();
        let h = build_effective_hamiltonian(&p, &lasers, &sp).unwrap();
        assert!(h.max_abs_diff(&h.adjoint()) < 1e-18);
        let dark = build_effective_hamiltonian(&p, &LaserConfig::dark(&sp), &sp).unwrap();
        assert!(dark.is_diagonal());
    }

    #[test]
    fn effective_terms_follow_their_lasers() {
        let sp = build_space(SpaceDescriptor {
            sites: vec![Site::new(1, 2, 2)],
        })
        .unwrap();
        let p = PhysicalParams::paper();
        let d = p.derived();
        let h = |drive| {
            site_hamiltonian(&sp, &p, Model::Effective, 0, &SiteLasers { drives: vec![drive] })
                .unwrap()
                .to_dense()
        };
        let idx = |s: &str| sp.ket_index(s).unwrap();
        let (h_off, h_l, h_lp, h_both) = (h(Drive::OFF), h(Drive::L), h(Drive::L_PRIME), h(Drive::BOTH));
        // δ₅ couples |1,y⟩ to |0,y+1⟩ only under L.
        assert_eq!(h_off[(idx("01"), idx("10"))], C64::new(0.0, 0.0));
        assert!((h_l[(idx("01"), idx("10"))] + re(d.delta5)).norm() < 1e-18);
        assert_eq!(h_lp[(idx("01"), idx("10"))], C64::new(0.0, 0.0));
        // δ₁ shifts |1⟩ under L.
        assert!((h_l[(idx("10"), idx("10"))] + re(d.delta1)).norm() < 1e-18);
        // δ₆ adds a photon to |0⟩ under L′.
        assert!((h_lp[(idx("01"), idx("00"))] + re(d.delta6)).norm() < 1e-18);
        assert_eq!(h_l[(idx("01"), idx("00"))], C64::new(0.0, 0.0));
        // δ₄ needs both.
        assert!((h_both[(idx("10"), idx("00"))] + re(d.delta4)).norm() < 1e-18);
        assert_eq!(h_l[(idx("10"), idx("00"))], C64::new(0.0, 0.0));
        assert_eq!(h_lp[(idx("10"), idx("00"))], C64::new(0.0, 0.0));
    }

    proptest! {
        #[test]
        fn waiting_diagonal_formula(i in 0usize..512) {
            let sp = build_protocol_space(2, 3).unwrap();
            let p = PhysicalParams::paper();
            let wait = build_waiting_hamiltonian(&p, &sp).unwrap();
            let label = sp.label(i);
            let mut expect = C64::new(0.0, 0.0);
            for site in &label.sites {
                let n0 = site.atoms.iter().filter(|&&x| x == 0).count() as f64;
                let y = site.photons as f64;
                expect += C64::new(-n0 * (p.delta_r() + y * p.delta3()), -p.kappa * y);
            }
            prop_assert!((wait.get(i, i) - expect).norm() < 1e-14);
        }
    }
}
