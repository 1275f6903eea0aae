//! Tilted Fermi-Hubbard Hamiltonian on a ring, in units of the hopping `J`.
//!
//! The Hamiltonian splits into one hopping matrix per spin sector, acting from
//! the left (up) or right (down) on the amplitude matrix, and a diagonal
//! potential applied element-wise:
//!
//! `i dM/dt = H_up M + M H_down + V ∘ M`,
//! `V[a, b] = Δ (Σ sites(a) + Σ sites(b)) + U |a ∩ b|`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{FockBasis, Spin};

/// Sign convention for the bond crossing the periodic boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundarySign {
    /// Exact fermionic reordering sign, `(-1)^(n_sigma - 1)` on the wrap bond.
    #[default]
    Fermionic,
    /// Every hop carries `-J`, as in sign-free reference codes.
    None,
}

impl FromStr for BoundarySign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fermionic" => Ok(BoundarySign::Fermionic),
            "none" => Ok(BoundarySign::None),
            other => Err(Error::config(
                "boundary_sign",
                format!("expected `fermionic` or `none`, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for BoundarySign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundarySign::Fermionic => "fermionic",
            BoundarySign::None => "none",
        })
    }
}

/// Tilt `Δ` and on-site interaction `U` held over one control interval,
/// both in units of `J`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlAction {
    pub delta: f64,
    pub u: f64,
}

impl ControlAction {
    pub fn new(delta: f64, u: f64) -> Self {
        ControlAction { delta, u }
    }

    pub fn clipped(self, low: f64, high: f64) -> Self {
        ControlAction {
            delta: self.delta.clamp(low, high),
            u: self.u.clamp(low, high),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.delta.is_finite() && self.u.is_finite()
    }
}

/// Nearest-neighbour bonds of the ring as unordered site pairs (1-based).
/// For `N = 2` the wrap bond coincides with the single interior bond and is
/// listed once.
pub fn ring_bonds(n_sites: usize) -> Vec<(usize, usize)> {
    let mut bonds: Vec<(usize, usize)> = (1..=n_sites)
        .map(|j| {
            let k = j % n_sites + 1;
            (j.min(k), j.max(k))
        })
        .filter(|(a, b)| a != b)
        .collect();
    bonds.sort_unstable();
    bonds.dedup();
    bonds
}

/// Real symmetric hopping matrix of one spin sector in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct HoppingMatrix {
    spin: Spin,
    dim: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl HoppingMatrix {
    pub fn build(basis: &FockBasis, spin: Spin, boundary: BoundarySign) -> Self {
        let n = basis.lattice_size();
        let sector = basis.sector(spin);
        let bonds = ring_bonds(n);
        let mut row_start = Vec::with_capacity(sector.dim() + 1);
        let mut cols = Vec::new();
        let mut values = Vec::new();
        row_start.push(0);
        for &mask in sector.masks() {
            let mut row: Vec<(usize, f64)> = Vec::new();
            for &(lo, hi) in &bonds {
                let (lo_bit, hi_bit) = (1u32 << (lo - 1), 1u32 << (hi - 1));
                let occupied = (mask & lo_bit != 0, mask & hi_bit != 0);
                if occupied.0 == occupied.1 {
                    continue;
                }
                let target = mask ^ lo_bit ^ hi_bit;
                let between = (hi_bit - 1) & !((lo_bit << 1) - 1);
                let wraps = hi - lo > 1;
                let sign = if (wraps && boundary == BoundarySign::None) || (mask & between).count_ones() % 2 == 0 {
                    1.0
                } else {
                    -1.0
                };
                let col = sector.index_of_mask(target).expect("hopping conserves particle number");
                row.push((col, -sign));
            }
            row.sort_unstable_by_key(|&(c, _)| c);
            for (c, v) in row {
                // Merge duplicates (not expected on a ring with N > 2).
                if cols.len() > *row_start.last().unwrap() && *cols.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    values.push(v);
                }
            }
            row_start.push(cols.len());
        }
        HoppingMatrix {
            spin,
            dim: sector.dim(),
            row_start,
            cols,
            values,
        }
    }

    pub fn spin(&self) -> Spin {
        self.spin
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzeros of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_start[i]..self.row_start[i + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut dense = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                dense[(i, j)] = v;
            }
        }
        dense
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.dim).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }

    /// Writes `row,col,value` triplets with a header line.
    pub fn write_triplets<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["row", "col", "value"])?;
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                out.write_record([i.to_string(), j.to_string(), v.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Occupation-dependent pieces of the diagonal potential. `V` for any
/// `(Δ, U)` is `Δ * tilt + U * doublons`, so rebuilding it per control
/// interval is a single element-wise pass.
#[derive(Clone, Debug)]
pub struct DiagonalTerms {
    tilt: DMatrix<f64>,
    doublons: DMatrix<f64>,
}

impl DiagonalTerms {
    pub fn new(basis: &FockBasis) -> Self {
        let up = basis.sector(Spin::Up);
        let down = basis.sector(Spin::Down);
        let site_sum = |mask: u32| -> f64 { (0..32).filter(|j| mask >> j & 1 == 1).map(|j| (j + 1) as f64).sum() };
        let up_sums: Vec<f64> = up.masks().iter().map(|&m| site_sum(m)).collect();
        let down_sums: Vec<f64> = down.masks().iter().map(|&m| site_sum(m)).collect();
        let tilt = DMatrix::from_fn(up.dim(), down.dim(), |a, b| up_sums[a] + down_sums[b]);
        let doublons = DMatrix::from_fn(up.dim(), down.dim(), |a, b| {
            (up.mask(a) & down.mask(b)).count_ones() as f64
        });
        DiagonalTerms { tilt, doublons }
    }

    pub fn tilt(&self) -> &DMatrix<f64> {
        &self.tilt
    }

    pub fn doublons(&self) -> &DMatrix<f64> {
        &self.doublons
    }

    pub fn potential(&self, action: ControlAction) -> DiagonalPotential {
        let mut v = DMatrix::zeros(self.tilt.nrows(), self.tilt.ncols());
        self.fill(action, &mut v);
        DiagonalPotential {
            delta: action.delta,
            u: action.u,
            v,
        }
    }

    pub(crate) fn fill(&self, action: ControlAction, v: &mut DMatrix<f64>) {
        for ((out, &t), &d) in v.iter_mut().zip(self.tilt.iter()).zip(self.doublons.iter()) {
            *out = action.delta * t + action.u * d;
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiagonalPotential {
    pub delta: f64,
    pub u: f64,
    pub v: DMatrix<f64>,
}

impl DiagonalPotential {
    pub fn build(basis: &FockBasis, delta: f64, u: f64) -> Self {
        DiagonalTerms::new(basis).potential(ControlAction::new(delta, u))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.v.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;

    #[test]
    fn two_site_single_bond() {
        let basis = FockBasis::new(2, 1, 1).unwrap();
        let h = HoppingMatrix::build(&basis, Spin::Up, BoundarySign::Fermionic);
        assert_eq!(h.to_dense(), DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]));
    }

    #[test]
    fn interior_hop_has_plus_sign() {
        let basis = FockBasis::new(4, 2, 2).unwrap();
        let h = HoppingMatrix::build(&basis, Spin::Up, BoundarySign::Fermionic);
        let from = basis.tuple_index(Spin::Up, &[1, 2]).unwrap();
        let to = basis.tuple_index(Spin::Up, &[1, 3]).unwrap();
        assert_eq!(h.get(to, from), -1.0);
    }

    #[test]
    fn wrap_hop_sign_follows_particle_parity() {
        // Moving the particle on site 4 to site 1 passes the other n-1 particles.
        for (n_particles, expected) in [(1usize, -1.0), (2, 1.0), (3, -1.0)] {
            let basis = FockBasis::new(4, n_particles, 1).unwrap();
            let h = HoppingMatrix::build(&basis, Spin::Up, BoundarySign::Fermionic);
            let mut from: Vec<usize> = (2..=n_particles).collect();
            from.push(4);
            let mut to = vec![1];
            to.extend(2..=n_particles);
            let (i, j) = (
                basis.tuple_index(Spin::Up, &to).unwrap(),
                basis.tuple_index(Spin::Up, &from).unwrap(),
            );
            assert_eq!(h.get(i, j), expected, "n = {n_particles}");
            let plain = HoppingMatrix::build(&basis, Spin::Up, BoundarySign::None);
            assert_eq!(plain.get(i, j), -1.0);
        }
    }

    #[test]
    fn symmetric_sparse_and_bounded() {
        for n in [4, 6, 8] {
            let basis = FockBasis::half_filled(n).unwrap();
            for boundary in [BoundarySign::Fermionic, BoundarySign::None] {
                let h = HoppingMatrix::build(&basis, Spin::Down, boundary);
                assert!(h.is_symmetric());
                let dense = h.to_dense();
                assert_eq!(dense, dense.transpose());
                for i in 0..h.dim() {
                    assert!(h.row(i).count() <= 2 * n);
                    assert_eq!(h.get(i, i), 0.0);
                }
                let eig = SymmetricEigen::new(dense);
                let bound = 2.0 * (n / 2) as f64 + 1e-9;
                assert!(eig.eigenvalues.iter().all(|e| e.abs() <= bound));
            }
        }
    }

    fn translation_operator(basis: &FockBasis, spin: Spin) -> DMatrix<f64> {
        let n = basis.lattice_size();
        let sector = basis.sector(spin);
        let mut t = DMatrix::zeros(sector.dim(), sector.dim());
        for (i, &mask) in sector.masks().iter().enumerate() {
            let wraps = mask >> (n - 1) & 1 == 1;
            let shifted = ((mask << 1) | (mask >> (n - 1))) & ((1 << n) - 1);
            let sign = if wraps && sector.n_particles().is_multiple_of(2) {
                -1.0
            } else {
                1.0
            };
            t[(sector.index_of_mask(shifted).unwrap(), i)] = sign;
        }
        t
    }

    #[test]
    fn commutes_with_fermionic_translation() {
        for n in [3, 4, 5, 6, 7, 8] {
            for n_up in 1..n {
                let basis = FockBasis::new(n, n_up, 1).unwrap();
                let h = HoppingMatrix::build(&basis, Spin::Up, BoundarySign::Fermionic).to_dense();
                let t = translation_operator(&basis, Spin::Up);
                assert!(
                    (&t * &h * t.transpose() - &h).abs().max() < 1e-14,
                    "N = {n}, n = {n_up}"
                );
            }
        }
    }

    /// Many-body levels are sums of distinct single-particle ring energies
    /// `-2 cos(2π(k + φ)/N)`, with twist `φ = 1/2` for the sign-free boundary at
    /// even particle number.
    fn free_fermion_levels(n: usize, particles: usize, twist: f64) -> Vec<f64> {
        use itertools::Itertools;
        let eps: Vec<f64> = (0..n)
            .map(|k| -2.0 * (2.0 * std::f64::consts::PI * (k as f64 + twist) / n as f64).cos())
            .collect();
        let mut levels: Vec<f64> = (0..n)
            .combinations(particles)
            .map(|ks| ks.iter().map(|&k| eps[k]).sum())
            .collect();
        levels.sort_by(f64::total_cmp);
        levels
    }

    #[test]
    fn spectrum_matches_free_fermions() {
        for n in [4, 6, 8] {
            for particles in 1..n {
                let basis = FockBasis::new(n, particles, 1).unwrap();
                for boundary in [BoundarySign::Fermionic, BoundarySign::None] {
                    let twist = if boundary == BoundarySign::None && particles % 2 == 0 {
                        0.5
                    } else {
                        0.0
                    };
                    let h = HoppingMatrix::build(&basis, Spin::Up, boundary).to_dense();
                    let mut got: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
                    got.sort_by(f64::total_cmp);
                    let want = free_fermion_levels(n, particles, twist);
                    for (g, w) in got.iter().zip(&want) {
                        assert!((g - w).abs() < 1e-10, "N = {n}, n = {particles}, {boundary}");
                    }
                }
            }
        }
    }

    #[test]
    fn diagonal_formula() {
        let basis = FockBasis::new(4, 2, 2).unwrap();
        let a = basis.tuple_index(Spin::Up, &[1, 2]).unwrap();
        let b = basis.tuple_index(Spin::Down, &[2, 3]).unwrap();
        let v = DiagonalPotential::build(&basis, 1.0, 1.0);
        assert_eq!(v.v[(a, b)], 9.0);

        let basis = FockBasis::half_filled(8).unwrap();
        let full = basis.tuple_index(Spin::Up, &[1, 2, 3, 4]).unwrap();
        let v = DiagonalPotential::build(&basis, 0.0, 2.5);
        assert_eq!(v.v[(full, full)], 4.0 * 2.5);
    }

    #[test]
    fn no_interaction_means_only_site_sums_matter() {
        let basis = FockBasis::half_filled(6).unwrap();
        let terms = DiagonalTerms::new(&basis);
        let v = terms.potential(ControlAction::new(0.7, 0.0));
        for a in 0..basis.dim_up() {
            for b in 0..basis.dim_down() {
                assert!((v.v[(a, b)] - 0.7 * terms.tilt()[(a, b)]).abs() < 1e-12);
            }
        }
        let up = basis.sector(Spin::Up);
        let down = basis.sector(Spin::Down);
        for a in 0..up.dim() {
            for b in 0..down.dim() {
                let shared = up.tuple(a).iter().filter(|s| down.tuple(b).contains(s)).count();
                assert_eq!(terms.doublons()[(a, b)], shared as f64);
            }
        }
    }

    #[test]
    fn triplet_dump() {
        let basis = FockBasis::new(2, 1, 1).unwrap();
        let h = HoppingMatrix::build(&basis, Spin::Up, BoundarySign::Fermionic);
        let mut buf = Vec::new();
        h.write_triplets(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "row,col,value\n0,1,-1\n1,0,-1\n");
    }

    #[test]
    fn clipping() {
        let a = ControlAction::new(12.0, -30.0).clipped(-10.0, 10.0);
        assert_eq!(a, ControlAction::new(10.0, -10.0));
    }
}
