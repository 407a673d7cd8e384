//! Joint state space of the two cavity sites.
//!
//! Each site holds a few identical atoms (two or three levels each) and one
//! Fock-truncated cavity mode. The flat basis index is a mixed-radix number
//! whose digits are, from most to least significant,
//! `x1 x2 x3 y ; x1 x2 y`: Alice's atoms left to right and her photon
//! number, then Bob's atoms and photon number. Kets can be written in that
//! notation with [`Space::ket`], e.g. `space.ket("1010;110")`.

use std::fmt;
use std::ops;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Site index of the sender's cavity.
pub const ALICE: usize = 0;
/// Site index of the receiver's cavity.
pub const BOB: usize = 1;

/// Default Fock cutoff: two photons plus one guard level.
pub const DEFAULT_FOCK_CUTOFF: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Site {
    pub atom_count: usize,
    pub levels_per_atom: usize,
    pub fock_cutoff: usize,
}

impl Site {
    pub fn new(atom_count: usize, levels_per_atom: usize, fock_cutoff: usize) -> Self {
        Self {
            atom_count,
            levels_per_atom,
            fock_cutoff,
        }
    }

    pub fn atom_dim(&self) -> Option<usize> {
        self.levels_per_atom
            .checked_pow(u32::try_from(self.atom_count).ok()?)
    }

    pub fn field_dim(&self) -> usize {
        self.fock_cutoff + 1
    }

    pub fn dim(&self) -> Option<usize> {
        self.atom_dim()?.checked_mul(self.fock_cutoff.checked_add(1)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceDescriptor {
    pub sites: Vec<Site>,
}

impl SpaceDescriptor {
    /// Alice with three atoms, Bob with two, all with the same level count.
    pub fn protocol(levels_per_atom: usize, fock_cutoff: usize) -> Self {
        Self {
            sites: vec![
                Site::new(3, levels_per_atom, fock_cutoff),
                Site::new(2, levels_per_atom, fock_cutoff),
            ],
        }
    }
}

/// Per-site occupation of one basis ket.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SiteLabel {
    pub atoms: Vec<u8>,
    pub photons: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BasisLabel {
    pub sites: Vec<SiteLabel>,
}

impl fmt::Display for BasisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "|")?;
        for (s, site) in self.sites.iter().enumerate() {
            if s > 0 {
                write!(f, ";")?;
            }
            for x in &site.atoms {
                write!(f, "{x}")?;
            }
            write!(f, "{}", site.photons)?;
        }
        write!(f, "⟩")
    }
}

/// Counts creation operations that would have pushed amplitude past the
/// Fock cutoff.
#[derive(Debug, Default)]
pub struct LeakageCounter {
    events: AtomicU64,
}

impl LeakageCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> u64 {
        self.events.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.events.fetch_add(1, Ordering::Relaxed);
    }
}

/// A validated [`SpaceDescriptor`] with its index maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Space {
    desc: SpaceDescriptor,
    site_dims: Vec<usize>,
    strides: Vec<usize>,
    dim: usize,
}

pub fn build_space(desc: SpaceDescriptor) -> Result<Space> {
    if desc.sites.is_empty() {
        return Err(Error::InvalidSpace("no sites".into()));
    }
    let mut site_dims = Vec::with_capacity(desc.sites.len());
    for (s, site) in desc.sites.iter().enumerate() {
        if site.atom_count == 0 {
            return Err(Error::InvalidSpace(format!("site {s} has no atoms")));
        }
        if !(2..=3).contains(&site.levels_per_atom) {
            return Err(Error::InvalidSpace(format!(
                "site {s}: levels_per_atom must be 2 or 3, got {}",
                site.levels_per_atom
            )));
        }
        let d = site
            .dim()
            .ok_or_else(|| Error::InvalidSpace(format!("site {s}: dimension overflows")))?;
        site_dims.push(d);
    }
    let mut dim = 1usize;
    for d in &site_dims {
        dim = dim
            .checked_mul(*d)
            .ok_or_else(|| Error::InvalidSpace("total dimension overflows".into()))?;
    }
    let mut strides = vec![1usize; site_dims.len()];
    for s in (0..site_dims.len().saturating_sub(1)).rev() {
        strides[s] = strides[s + 1] * site_dims[s + 1];
    }
    Ok(Space {
        desc,
        site_dims,
        strides,
        dim,
    })
}

/// The Alice(3 atoms) ⊗ Bob(2 atoms) space used by the protocol. The protocol
/// puts up to two photons into one cavity, so the cutoff must be at least 2.
pub fn build_protocol_space(levels_per_atom: usize, fock_cutoff: usize) -> Result<Space> {
    if fock_cutoff < 2 {
        return Err(Error::InvalidSpace(format!(
            "fock cutoff {fock_cutoff} cannot hold the two-photon states the protocol reaches"
        )));
    }
    build_space(SpaceDescriptor::protocol(levels_per_atom, fock_cutoff))
}

impl Space {
    pub fn descriptor(&self) -> &SpaceDescriptor {
        &self.desc
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_sites(&self) -> usize {
        self.site_dims.len()
    }

    pub fn site(&self, s: usize) -> &Site {
        &self.desc.sites[s]
    }

    pub fn site_dim(&self, s: usize) -> usize {
        self.site_dims[s]
    }

    fn check_site(&self, s: usize) -> Result<&Site> {
        self.desc
            .sites
            .get(s)
            .ok_or_else(|| Error::IndexOutOfRange(format!("site {s}")))
    }

    /// Local (single-site) index of `flat` on site `s`.
    #[inline]
    pub fn local_index(&self, flat: usize, s: usize) -> usize {
        (flat / self.strides[s]) % self.site_dims[s]
    }

    /// Replace the site-`s` digit of `flat` by `local`.
    #[inline]
    pub fn with_local(&self, flat: usize, s: usize, local: usize) -> usize {
        flat - self.local_index(flat, s) * self.strides[s] + local * self.strides[s]
    }

    #[inline]
    pub fn photons_local(&self, s: usize, local: usize) -> usize {
        local % self.desc.sites[s].field_dim()
    }

    /// Level of atom `k` of site `s` in the local index `local`.
    #[inline]
    pub fn atom_level_local(&self, s: usize, local: usize, k: usize) -> u8 {
        let site = &self.desc.sites[s];
        let mut rest = local / site.field_dim();
        for _ in (k + 1)..site.atom_count {
            rest /= site.levels_per_atom;
        }
        (rest % site.levels_per_atom) as u8
    }

    /// Number of atoms of site `s` in level `level`, optionally skipping one atom.
    pub fn count_level_local(&self, s: usize, local: usize, level: u8, skip: Option<usize>) -> usize {
        let site = &self.desc.sites[s];
        let mut rest = local / site.field_dim();
        let mut count = 0;
        for k in (0..site.atom_count).rev() {
            let x = (rest % site.levels_per_atom) as u8;
            rest /= site.levels_per_atom;
            if x == level && skip != Some(k) {
                count += 1;
            }
        }
        count
    }

    /// Local index with atom `k` set to `level` and the photon number set to `photons`.
    pub fn set_atom_and_photons_local(
        &self,
        s: usize,
        local: usize,
        k: usize,
        level: u8,
        photons: usize,
    ) -> usize {
        let site = &self.desc.sites[s];
        let fd = site.field_dim();
        let atoms = local / fd;
        let weight = site.levels_per_atom.pow((site.atom_count - 1 - k) as u32);
        let old = (atoms / weight) % site.levels_per_atom;
        let atoms = atoms - old * weight + level as usize * weight;
        atoms * fd + photons
    }

    pub fn local_label(&self, s: usize, local: usize) -> SiteLabel {
        let site = &self.desc.sites[s];
        let photons = local % site.field_dim();
        let mut rest = local / site.field_dim();
        let mut atoms = vec![0u8; site.atom_count];
        for k in (0..site.atom_count).rev() {
            atoms[k] = (rest % site.levels_per_atom) as u8;
            rest /= site.levels_per_atom;
        }
        SiteLabel { atoms, photons }
    }

    pub fn local_index_of(&self, s: usize, label: &SiteLabel) -> Result<usize> {
        let site = self.check_site(s)?;
        if label.atoms.len() != site.atom_count {
            return Err(Error::IndexOutOfRange(format!(
                "site {s} has {} atoms, label has {}",
                site.atom_count,
                label.atoms.len()
            )));
        }
        if label.photons > site.fock_cutoff {
            return Err(Error::IndexOutOfRange(format!(
                "photon number {} above cutoff {}",
                label.photons, site.fock_cutoff
            )));
        }
        let mut idx = 0usize;
        for &x in &label.atoms {
            if x as usize >= site.levels_per_atom {
                return Err(Error::IndexOutOfRange(format!("atomic level {x}")));
            }
            idx = idx * site.levels_per_atom + x as usize;
        }
        Ok(idx * site.field_dim() + label.photons)
    }

    pub fn label(&self, flat: usize) -> BasisLabel {
        BasisLabel {
            sites: (0..self.num_sites())
                .map(|s| self.local_label(s, self.local_index(flat, s)))
                .collect(),
        }
    }

    pub fn index(&self, label: &BasisLabel) -> Result<usize> {
        if label.sites.len() != self.num_sites() {
            return Err(Error::IndexOutOfRange(format!(
                "label has {} sites, space has {}",
                label.sites.len(),
                self.num_sites()
            )));
        }
        let mut flat = 0;
        for (s, l) in label.sites.iter().enumerate() {
            flat += self.local_index_of(s, l)? * self.strides[s];
        }
        Ok(flat)
    }

    /// Parse the ket notation `x1x2x3y;x1x2y` (digits only, `;` between sites).
    pub fn parse_label(&self, text: &str) -> Result<BasisLabel> {
        let parts: Vec<&str> = text.trim().trim_start_matches('|').trim_end_matches('⟩').split(';').collect();
        if parts.len() != self.num_sites() {
            return Err(Error::IndexOutOfRange(format!("ket {text:?}: wrong number of sites")));
        }
        let mut sites = Vec::with_capacity(parts.len());
        for part in parts {
            let digits: Vec<u8> = part
                .chars()
                .map(|c| {
                    c.to_digit(10)
                        .map(|d| d as u8)
                        .ok_or_else(|| Error::IndexOutOfRange(format!("ket {text:?}: bad digit {c:?}")))
                })
                .collect::<Result<_>>()?;
            let (photons, atoms) = digits
                .split_last()
                .ok_or_else(|| Error::IndexOutOfRange(format!("ket {text:?}: empty site")))?;
            sites.push(SiteLabel {
                atoms: atoms.to_vec(),
                photons: *photons as usize,
            });
        }
        Ok(BasisLabel { sites })
    }

    pub fn ket_index(&self, text: &str) -> Result<usize> {
        self.index(&self.parse_label(text)?)
    }

    /// Normalized basis ket from its label, e.g. `ket("1010;110")`.
    pub fn ket(&self, text: &str) -> Result<StateVector> {
        Ok(StateVector::basis(self.dim, self.ket_index(text)?))
    }

    pub fn local_identity(&self, s: usize) -> SparseOperator {
        SparseOperator::identity(self.site_dims[s])
    }

    /// |i⟩⟨j| on atom `k` of site `s`, as an operator on that site alone.
    pub fn local_sigma(&self, s: usize, k: usize, i: u8, j: u8) -> Result<SparseOperator> {
        let site = *self.check_site(s)?;
        if k >= site.atom_count {
            return Err(Error::IndexOutOfRange(format!("atom {k} on site {s}")));
        }
        if i as usize >= site.levels_per_atom || j as usize >= site.levels_per_atom {
            return Err(Error::IndexOutOfRange(format!("sigma_{i}{j} on a {}-level atom", site.levels_per_atom)));
        }
        let d = self.site_dims[s];
        let mut triplets = Vec::new();
        for col in 0..d {
            if self.atom_level_local(s, col, k) == j {
                let y = self.photons_local(s, col);
                let row = self.set_atom_and_photons_local(s, col, k, i, y);
                triplets.push((row, col, C64::new(1.0, 0.0)));
            }
        }
        Ok(SparseOperator::from_triplets(d, triplets))
    }

    pub fn local_annihilator(&self, s: usize) -> Result<SparseOperator> {
        self.check_site(s)?;
        let d = self.site_dims[s];
        let fd = self.desc.sites[s].field_dim();
        let triplets = (0..d)
            .filter(|col| col % fd > 0)
            .map(|col| (col - 1, col, C64::new(((col % fd) as f64).sqrt(), 0.0)))
            .collect();
        Ok(SparseOperator::from_triplets(d, triplets))
    }

    pub fn local_number(&self, s: usize) -> Result<SparseOperator> {
        self.check_site(s)?;
        let d = self.site_dims[s];
        let fd = self.desc.sites[s].field_dim();
        let triplets = (0..d)
            .filter(|i| i % fd > 0)
            .map(|i| (i, i, C64::new((i % fd) as f64, 0.0)))
            .collect();
        Ok(SparseOperator::from_triplets(d, triplets))
    }

    /// Lift a site-local operator to the joint space (identity on other sites).
    pub fn embed(&self, s: usize, local: &SparseOperator) -> Result<SparseOperator> {
        self.check_site(s)?;
        let d = self.site_dims[s];
        if local.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: local.dim(),
            });
        }
        let inner = self.strides[s];
        let outer = self.dim / (d * inner);
        let mut triplets = Vec::with_capacity(local.nnz() * inner * outer);
        for o in 0..outer {
            for (r, c, v) in local.triplets() {
                for i in 0..inner {
                    triplets.push(((o * d + r) * inner + i, (o * d + c) * inner + i, v));
                }
            }
        }
        Ok(SparseOperator::from_triplets(self.dim, triplets))
    }

    pub fn sigma(&self, s: usize, k: usize, i: u8, j: u8) -> Result<SparseOperator> {
        self.embed(s, &self.local_sigma(s, k, i, j)?)
    }

    pub fn annihilator(&self, s: usize) -> Result<SparseOperator> {
        self.embed(s, &self.local_annihilator(s)?)
    }

    /// a† on site `s`. Amplitude at the cutoff is mapped to zero.
    pub fn creator(&self, s: usize) -> Result<SparseOperator> {
        Ok(self.annihilator(s)?.adjoint())
    }

    pub fn number(&self, s: usize) -> Result<SparseOperator> {
        self.embed(s, &self.local_number(s)?)
    }

    /// Apply a† on site `s`, bumping `leakage` if any amplitude sat at the cutoff.
    pub fn raise_photon(&self, s: usize, psi: &StateVector, leakage: &LeakageCounter) -> Result<StateVector> {
        self.check_dim(psi)?;
        let cutoff = self.check_site(s)?.fock_cutoff;
        let truncated = psi
            .amps()
            .iter()
            .enumerate()
            .any(|(i, a)| a.norm_sqr() > 0.0 && self.photons_local(s, self.local_index(i, s)) == cutoff);
        if truncated {
            leakage.bump();
        }
        self.creator(s)?.apply(psi)
    }

    /// Population with any cavity at its cutoff (the guard level).
    pub fn cutoff_population(&self, psi: &StateVector) -> f64 {
        psi.amps()
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                (0..self.num_sites()).any(|s| {
                    self.photons_local(s, self.local_index(*i, s)) == self.desc.sites[s].fock_cutoff
                })
            })
            .map(|(_, a)| a.norm_sqr())
            .sum()
    }

    pub fn check_dim(&self, psi: &StateVector) -> Result<()> {
        if psi.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: psi.dim(),
            });
        }
        Ok(())
    }

    /// Apply a dense site-local matrix `u` to site `s` of `psi` in place.
    pub fn apply_local_dense(&self, s: usize, u: &DMatrix<C64>, psi: &mut StateVector) {
        let d = self.site_dims[s];
        assert_eq!(u.nrows(), d, "local matrix has wrong size");
        let inner = self.strides[s];
        let block = d * inner;
        let mut scratch = DMatrix::<C64>::zeros(inner, d);
        for chunk in psi.amps.chunks_mut(block) {
            // Column-major inner×d view: X[i, l] = chunk[l * inner + i].
            let x = DMatrixView::from_slice(chunk, inner, d);
            x.mul_to(&u.transpose(), &mut scratch);
            let mut out = DMatrixViewMut::from_slice(chunk, inner, d);
            out.copy_from(&scratch);
        }
    }

    /// Multiply site `s` of `psi` by a site-local diagonal.
    pub fn apply_local_diagonal(&self, s: usize, diag: &[C64], psi: &mut StateVector) {
        let d = self.site_dims[s];
        assert_eq!(diag.len(), d, "local diagonal has wrong size");
        let inner = self.strides[s];
        for (i, a) in psi.amps.iter_mut().enumerate() {
            *a *= diag[(i / inner) % d];
        }
    }

    /// Reduced density matrix of site `s`.
    pub fn reduced_density(&self, s: usize, psi: &StateVector) -> DMatrix<C64> {
        let d = self.site_dims[s];
        let inner = self.strides[s];
        let outer = self.dim / (d * inner);
        let mut rho = DMatrix::<C64>::zeros(d, d);
        for o in 0..outer {
            for i in 0..inner {
                for r in 0..d {
                    let ar = psi.amps[(o * d + r) * inner + i];
                    if ar == C64::new(0.0, 0.0) {
                        continue;
                    }
                    for c in 0..d {
                        rho[(r, c)] += ar * psi.amps[(o * d + c) * inner + i].conj();
                    }
                }
            }
        }
        rho
    }
}

/// Square sparse matrix in compressed-row form. Entries within a row are
/// sorted by column, so construction from the same triplets is bit-for-bit
/// reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseOperator {
    /// Build from `(row, col, value)` triplets; duplicates are summed and
    /// exact zeros dropped.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, C64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut rows = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            assert!(r < dim && c < dim, "triplet ({r}, {c}) outside dimension {dim}");
            if rows.last() == Some(&r) && cols.last() == Some(&c) {
                *vals.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                cols.push(c);
                vals.push(v);
            }
        }
        let keep: Vec<bool> = vals.iter().map(|v| *v != C64::new(0.0, 0.0)).collect();
        let mut k = 0;
        let (mut cols2, mut vals2) = (Vec::with_capacity(cols.len()), Vec::with_capacity(vals.len()));
        for idx in 0..rows.len() {
            if keep[idx] {
                row_ptr[rows[idx] + 1] += 1;
                cols2.push(cols[idx]);
                vals2.push(vals[idx]);
                k += 1;
            }
        }
        debug_assert_eq!(k, cols2.len());
        for r in 0..dim {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            dim,
            row_ptr,
            cols: cols2,
            vals: vals2,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::from_triplets(dim, Vec::new())
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_triplets(dim, (0..dim).map(|i| (i, i, C64::new(1.0, 0.0))).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.vals[k]))
        })
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[range.clone()].binary_search(&c) {
            Ok(pos) => self.vals[range.start + pos],
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    pub fn adjoint(&self) -> Self {
        Self::from_triplets(self.dim, self.triplets().map(|(r, c, v)| (c, r, v.conj())).collect())
    }

    pub fn scale(&self, s: C64) -> Self {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn is_diagonal(&self) -> bool {
        self.triplets().all(|(r, c, _)| r == c)
    }

    pub fn diagonal(&self) -> Vec<C64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    /// y ← A x on raw amplitude slices.
    pub fn apply_into(&self, x: &[C64], y: &mut [C64]) {
        for r in 0..self.dim {
            let mut acc = C64::new(0.0, 0.0);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[r] = acc;
        }
    }

    pub fn apply(&self, psi: &StateVector) -> Result<StateVector> {
        if psi.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: psi.dim(),
            });
        }
        let mut out = vec![C64::new(0.0, 0.0); self.dim];
        self.apply_into(psi.amps(), &mut out);
        Ok(StateVector::new(out))
    }

    /// ⟨ψ|A|ψ⟩ without allocating.
    pub fn expectation(&self, psi: &StateVector) -> C64 {
        let x = psi.amps();
        let mut acc = C64::new(0.0, 0.0);
        for r in 0..self.dim {
            let mut row = C64::new(0.0, 0.0);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                row += self.vals[k] * x[self.cols[k]];
            }
            acc += x[r].conj() * row;
        }
        acc
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim, "operator dimensions differ");
        let mut triplets = Vec::new();
        for r in 0..self.dim {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let mid = self.cols[k];
                for k2 in other.row_ptr[mid]..other.row_ptr[mid + 1] {
                    triplets.push((r, other.cols[k2], self.vals[k] * other.vals[k2]));
                }
            }
        }
        Self::from_triplets(self.dim, triplets)
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::<C64>::zeros(self.dim, self.dim);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    /// Largest entrywise difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (self - other).vals.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

impl ops::Add for &SparseOperator {
    type Output = SparseOperator;
    fn add(self, rhs: &SparseOperator) -> SparseOperator {
        assert_eq!(self.dim, rhs.dim, "operator dimensions differ");
        SparseOperator::from_triplets(self.dim, self.triplets().chain(rhs.triplets()).collect())
    }
}

impl ops::Sub for &SparseOperator {
    type Output = SparseOperator;
    fn sub(self, rhs: &SparseOperator) -> SparseOperator {
        self + &rhs.scale(C64::new(-1.0, 0.0))
    }
}

impl ops::Mul for &SparseOperator {
    type Output = SparseOperator;
    fn mul(self, rhs: &SparseOperator) -> SparseOperator {
        self.matmul(rhs)
    }
}

/// Complex amplitude vector over a [`Space`]. Not necessarily normalized:
/// the no-jump evolution lets the norm decay.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    amps: Vec<C64>,
}

impl StateVector {
    pub fn new(amps: Vec<C64>) -> Self {
        Self { amps }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            amps: vec![C64::new(0.0, 0.0); dim],
        }
    }

    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.amps[index] = C64::new(1.0, 0.0);
        v
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amps(&self) -> &[C64] {
        &self.amps
    }

    pub fn amps_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn into_inner(self) -> Vec<C64> {
        self.amps
    }

    pub fn norm2(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// ⟨self|other⟩.
    pub fn inner(&self, other: &Self) -> Result<C64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(self
            .amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    /// Scale to unit norm, returning the previous squared norm.
    pub fn normalize(&mut self) -> Result<f64> {
        let n2 = self.norm2();
        if !(n2 > 0.0) || !n2.is_finite() {
            return Err(Error::Numerical(format!("cannot normalize a state of squared norm {n2}")));
        }
        let s = 1.0 / n2.sqrt();
        self.amps.iter_mut().for_each(|a| *a *= s);
        Ok(n2)
    }

    pub fn normalized(&self) -> Result<Self> {
        let mut out = self.clone();
        out.normalize()?;
        Ok(out)
    }

    pub fn scale(&mut self, s: C64) {
        self.amps.iter_mut().for_each(|a| *a *= s);
    }

    /// self ← self + s·other.
    pub fn add_scaled(&mut self, s: C64, other: &Self) {
        assert_eq!(self.dim(), other.dim(), "state dimensions differ");
        for (a, b) in self.amps.iter_mut().zip(&other.amps) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.amps.iter().all(|a| a.re.is_finite() && a.im.is_finite())
    }

    /// Nonzero components as `(index, amplitude)`, largest modulus first.
    pub fn support(&self, threshold: f64) -> Vec<(usize, C64)> {
        let mut out: Vec<(usize, C64)> = self
            .amps
            .iter()
            .enumerate()
            .filter(|(_, a)| a.norm() > threshold)
            .map(|(i, a)| (i, *a))
            .collect();
        out.sort_by(|a, b| b.1.norm().total_cmp(&a.1.norm()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn two_level_space() -> Space {
        build_protocol_space(2, 3).unwrap()
    }

    #[test]
    fn protocol_dimensions() {
        assert_eq!(build_protocol_space(2, 3).unwrap().dim(), 8 * 4 * 4 * 4);
        assert_eq!(build_protocol_space(3, 3).unwrap().dim(), 27 * 4 * 9 * 4);
        let single = build_space(SpaceDescriptor {
            sites: vec![Site::new(1, 2, 0)],
        })
        .unwrap();
        assert_eq!(single.dim(), 2);
    }

    #[test]
    fn rejects_bad_spaces() {
        assert!(matches!(build_protocol_space(2, 1), Err(Error::InvalidSpace(_))));
        let huge = SpaceDescriptor {
            sites: vec![Site::new(200, 3, 3)],
        };
        assert!(matches!(build_space(huge), Err(Error::InvalidSpace(_))));
        let many = SpaceDescriptor {
            sites: vec![Site::new(30, 3, 3); 3],
        };
        assert!(matches!(build_space(many), Err(Error::InvalidSpace(_))));
        let four_levels = SpaceDescriptor {
            sites: vec![Site::new(1, 4, 3)],
        };
        assert!(build_space(four_levels).is_err());
    }

    #[test]
    fn ket_notation_matches_ordering() {
        let sp = two_level_space();
        // Alice digits are most significant; Bob's photon is the last digit.
        assert_eq!(sp.ket_index("0000;000").unwrap(), 0);
        assert_eq!(sp.ket_index("0000;001").unwrap(), 1);
        assert_eq!(sp.ket_index("0000;010").unwrap(), 4);
        assert_eq!(sp.ket_index("0001;000").unwrap(), 16);
        assert_eq!(sp.ket_index("1000;000").unwrap(), 16 * 16);
        let label = sp.parse_label("1010;110").unwrap();
        assert_eq!(label.to_string(), "|1010;110⟩");
        assert!(sp.ket("1010;1100").is_err());
        assert!(sp.ket("2010;110").is_err());
    }

    #[test]
    fn sigma_raises_and_projects() {
        let sp = two_level_space();
        let s10 = sp.sigma(ALICE, 0, 1, 0).unwrap();
        let out = s10.apply(&sp.ket("0000;110").unwrap()).unwrap();
        assert_eq!(out, sp.ket("1000;110").unwrap());

        let sp3 = build_protocol_space(3, 3).unwrap();
        let s22 = sp3.sigma(BOB, 1, 2, 2).unwrap();
        let mut psi = sp3.ket("1010;110").unwrap();
        psi.add_scaled(c(0.5), &sp3.ket("0101;010").unwrap());
        assert_eq!(s22.apply(&psi).unwrap().norm2(), 0.0);

        let s01 = sp.sigma(BOB, 0, 0, 1).unwrap();
        let s00 = sp.sigma(BOB, 0, 0, 0).unwrap();
        assert_eq!(&s01 * &sp.sigma(BOB, 0, 1, 0).unwrap(), s00);
        assert_eq!(s01.adjoint(), sp.sigma(BOB, 0, 1, 0).unwrap());
        assert!(sp.sigma(BOB, 2, 0, 0).is_err());
        assert!(sp.sigma(ALICE, 0, 2, 0).is_err());
    }

    #[test]
    fn ladder_operators() {
        let sp = two_level_space();
        let a_a = sp.annihilator(ALICE).unwrap();
        // |1010;110⟩ holds no photon, so a_A annihilates it.
        assert_eq!(a_a.apply(&sp.ket("1010;110").unwrap()).unwrap().norm2(), 0.0);
        assert_eq!(a_a.apply(&sp.ket("1011;110").unwrap()).unwrap(), sp.ket("1010;110").unwrap());
        let out = a_a.apply(&sp.ket("0002;010").unwrap()).unwrap();
        let mut expect = sp.ket("0001;010").unwrap();
        expect.scale(c(2f64.sqrt()));
        assert!((out.inner(&expect).unwrap().re - 2.0).abs() < 1e-14);
        let a_b = sp.annihilator(BOB).unwrap();
        assert_eq!(a_b.apply(&sp.ket("1010;110").unwrap()).unwrap().norm2(), 0.0);

        // a†a diagonal with photon numbers; [a, a†] = 1 below the cutoff.
        let n = sp.number(ALICE).unwrap();
        assert!(n.is_diagonal());
        assert_eq!(n.get(16 * 2, 16 * 2), c(2.0));
        let ad = sp.creator(ALICE).unwrap();
        let comm = &(&a_a * &ad) - &(&ad * &a_a);
        for i in 0..sp.dim() {
            let y = sp.photons_local(ALICE, sp.local_index(i, ALICE));
            let expect = if y < 3 { 1.0 } else { -3.0 };
            assert!((comm.get(i, i).re - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn creator_at_cutoff_counts_leakage() {
        let sp = two_level_space();
        let leak = LeakageCounter::new();
        let out = sp.raise_photon(BOB, &sp.ket("0000;002").unwrap(), &leak).unwrap();
        assert_eq!(leak.events(), 0);
        assert!((out.norm2() - 3.0).abs() < 1e-12);
        let out = sp.raise_photon(BOB, &sp.ket("0000;003").unwrap(), &leak).unwrap();
        assert_eq!(out.norm2(), 0.0);
        assert_eq!(leak.events(), 1);
        assert_eq!(sp.cutoff_population(&sp.ket("0003;000").unwrap()), 1.0);
    }

    #[test]
    fn basics_of_state_algebra() {
        let sp = two_level_space();
        let k = sp.ket("0110;110").unwrap();
        assert_eq!(k.norm2(), 1.0);
        assert_eq!(SparseOperator::identity(sp.dim()).apply(&k).unwrap(), k);
        assert!(SparseOperator::identity(4).apply(&k).is_err());
        assert!(k.inner(&StateVector::zeros(3)).is_err());
    }

    #[test]
    fn local_dense_matches_embedding() {
        let sp = two_level_space();
        let local = sp.local_annihilator(BOB).unwrap();
        let dense = local.to_dense();
        let mut psi = StateVector::new((0..sp.dim()).map(|i| C64::new(i as f64, 1.0 / (1.0 + i as f64))).collect());
        let expect = sp.annihilator(BOB).unwrap().apply(&psi).unwrap();
        sp.apply_local_dense(BOB, &dense, &mut psi);
        for (a, b) in psi.amps().iter().zip(expect.amps()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    fn random_state(dim: usize, seed: &[f64]) -> StateVector {
        StateVector::new(
            (0..dim)
                .map(|i| C64::new(seed[i % seed.len()] * (i as f64 * 0.37).sin(), seed[(i + 1) % seed.len()] * (i as f64 * 0.11).cos()))
                .collect(),
        )
    }

    proptest! {
        #[test]
        fn index_bijection(i in 0usize..3888) {
            let sp = build_protocol_space(3, 3).unwrap();
            prop_assert_eq!(sp.index(&sp.label(i)).unwrap(), i);
        }

        #[test]
        fn adjoint_identity(seed in proptest::collection::vec(-1.0f64..1.0, 4..9), k in 0usize..3, i in 0u8..2, j in 0u8..2) {
            let sp = two_level_space();
            let op = &sp.sigma(ALICE, k, i, j).unwrap() + &sp.annihilator(ALICE).unwrap().scale(C64::new(0.3, -0.7));
            let s = random_state(sp.dim(), &seed);
            let t = random_state(sp.dim(), &seed.iter().rev().cloned().collect::<Vec<_>>());
            let lhs = s.inner(&op.adjoint().apply(&t).unwrap()).unwrap();
            let rhs = t.inner(&op.apply(&s).unwrap()).unwrap().conj();
            prop_assert!((lhs - rhs).norm() < 1e-9 * (1.0 + lhs.norm()));
        }

        #[test]
        fn disjoint_targets_commute(k1 in 0usize..3, k2 in 0usize..2, i in 0u8..3, j in 0u8..3) {
            let sp = build_protocol_space(3, 3).unwrap();
            let a = sp.sigma(ALICE, k1, i, j).unwrap();
            let b = sp.sigma(BOB, k2, j, i).unwrap();
            prop_assert_eq!(&a * &b, &b * &a);
            let other = (k1 + 1) % 3;
            let c2 = sp.sigma(ALICE, other, j, i).unwrap();
            prop_assert_eq!(&a * &c2, &c2 * &a);
            let cav = sp.annihilator(BOB).unwrap();
            prop_assert_eq!(&a * &cav, &cav * &a);
        }
    }
}
