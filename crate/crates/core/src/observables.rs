//! Nonergodic metrics: full-chain fidelity, odd/even imbalance, reduced
//! density matrices of a left sub-chain, half-chain entanglement entropy and
//! sub-chain (Uhlmann) fidelity.
//!
//! For bipartite quantities the state is re-expressed on the product basis of
//! four local states per site, `|l⟩ ⊗ |r⟩` with `l` covering sites
//! `1..=n_left`. Local states are base-4 digits (`0` empty, `1` up, `2` down,
//! `3` doublon), leftmost site most significant. Because the global state has
//! fixed particle numbers, `ψ_{l,r}` is block diagonal in the left-sector
//! counts `(n_up_left, n_down_left)`; [`SiteTensorState`] stores only those
//! blocks. Fermionic reordering signs between the mode order of the Fock basis
//! and the site order are constant within a block (left-block signs amount to a
//! diagonal unitary on the left space), so none of the metrics here depend on
//! them.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{FockBasis, SiteState, Spin, StateMatrix, C64};

/// Squared singular values (Schmidt weights) below this are dropped from the
/// entropy sum.
pub const SCHMIDT_CUTOFF: f64 = 1e-14;

/// `|Σ conj(M0) ∘ Mt|²`.
pub fn full_fidelity(m0: &StateMatrix, mt: &StateMatrix) -> Result<f64> {
    m0.check_same_basis(mt)?;
    let overlap: C64 = m0
        .amplitudes()
        .iter()
        .zip(mt.amplitudes().iter())
        .map(|(a, b)| a.conj() * b)
        .sum();
    Ok(overlap.norm_sqr())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Imbalance {
    pub total: f64,
    pub up: f64,
    pub down: f64,
}

/// Per-tuple `N_odd - N_even` counts, reused across time steps.
#[derive(Clone, Debug)]
pub struct ImbalanceWeights {
    up: Vec<f64>,
    down: Vec<f64>,
    n_up: f64,
    n_down: f64,
}

impl ImbalanceWeights {
    pub fn new(basis: &FockBasis) -> Self {
        // Site j (1-based) is bit j-1; odd sites are the even bit positions.
        let odd_bits = (0..32).step_by(2).fold(0u32, |m, b| m | 1 << b);
        let weight =
            |mask: u32| -> f64 { (mask & odd_bits).count_ones() as f64 - (mask & !odd_bits).count_ones() as f64 };
        ImbalanceWeights {
            up: basis.sector(Spin::Up).masks().iter().map(|&m| weight(m)).collect(),
            down: basis.sector(Spin::Down).masks().iter().map(|&m| weight(m)).collect(),
            n_up: basis.n_up() as f64,
            n_down: basis.n_down() as f64,
        }
    }

    pub fn evaluate(&self, m: &StateMatrix) -> Imbalance {
        let amps = m.amplitudes();
        let mut up = 0.0;
        let mut down = 0.0;
        for b in 0..amps.ncols() {
            for (a, z) in amps.column(b).iter().enumerate() {
                let p = z.norm_sqr();
                up += p * self.up[a];
                down += p * self.down[b];
            }
        }
        Imbalance {
            total: (up + down) / (self.n_up + self.n_down),
            up: up / self.n_up,
            down: down / self.n_down,
        }
    }
}

/// Expected total and spin-resolved imbalance `Σ |M_ab|² I_ab`.
pub fn imbalance(m: &StateMatrix) -> Imbalance {
    ImbalanceWeights::new(m.basis()).evaluate(m)
}

/// Which side of the cut a reduced density matrix describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Index bookkeeping for scattering amplitude matrices onto the product basis
/// at a fixed cut. Built once per `(basis, n_left)`.
#[derive(Clone, Debug)]
pub struct Bipartition {
    lattice_size: usize,
    n_left: usize,
    sectors: Vec<(usize, usize)>,
    left_codes: Vec<Vec<usize>>,
    right_codes: Vec<Vec<usize>>,
    /// For each `(a, b)` (column-major, `a + b * d_up`): block, row, column.
    targets: Vec<(usize, usize, usize)>,
}

impl Bipartition {
    pub fn new(basis: &FockBasis, n_left: usize) -> Result<Self> {
        let n = basis.lattice_size();
        if n_left == 0 || n_left >= n {
            return Err(Error::config(
                "n_left",
                format!("sub-chain must have 1..{n} sites, got {n_left}"),
            ));
        }
        let left_mask = (1u32 << n_left) - 1;
        let code = |up: u32, down: u32, sites: std::ops::Range<usize>| -> usize {
            sites.fold(0usize, |acc, j| {
                let s = SiteState::from_bits(up >> j & 1 == 1, down >> j & 1 == 1);
                acc * 4 + s.digit()
            })
        };

        let up = basis.sector(Spin::Up);
        let down = basis.sector(Spin::Down);
        let mut raw = Vec::with_capacity(basis.dimension());
        let mut by_sector: BTreeMap<(usize, usize), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for b in 0..down.dim() {
            for a in 0..up.dim() {
                let (mu, md) = (up.mask(a), down.mask(b));
                let sector = (
                    (mu & left_mask).count_ones() as usize,
                    (md & left_mask).count_ones() as usize,
                );
                let l = code(mu, md, 0..n_left);
                let r = code(mu, md, n_left..n);
                let entry = by_sector.entry(sector).or_default();
                entry.0.push(l);
                entry.1.push(r);
                raw.push((sector, l, r));
            }
        }

        let mut sectors = Vec::new();
        let mut left_codes = Vec::new();
        let mut right_codes = Vec::new();
        for (sector, (mut ls, mut rs)) in by_sector {
            ls.sort_unstable();
            ls.dedup();
            rs.sort_unstable();
            rs.dedup();
            sectors.push(sector);
            left_codes.push(ls);
            right_codes.push(rs);
        }
        let targets = raw
            .into_iter()
            .map(|(sector, l, r)| {
                let k = sectors.binary_search(&sector).unwrap();
                let row = left_codes[k].binary_search(&l).unwrap();
                let col = right_codes[k].binary_search(&r).unwrap();
                (k, row, col)
            })
            .collect();
        Ok(Bipartition {
            lattice_size: n,
            n_left,
            sectors,
            left_codes,
            right_codes,
            targets,
        })
    }

    pub fn n_left(&self) -> usize {
        self.n_left
    }

    pub fn scatter(&self, m: &StateMatrix) -> SiteTensorState {
        let mut blocks: Vec<TensorBlock> = self
            .sectors
            .iter()
            .zip(self.left_codes.iter().zip(&self.right_codes))
            .map(|(&sector, (ls, rs))| TensorBlock {
                sector,
                left_codes: ls.clone(),
                right_codes: rs.clone(),
                psi: DMatrix::zeros(ls.len(), rs.len()),
            })
            .collect();
        for (z, &(k, row, col)) in m.amplitudes().iter().zip(&self.targets) {
            blocks[k].psi[(row, col)] = *z;
        }
        SiteTensorState {
            n_left: self.n_left,
            n_right: self.lattice_size - self.n_left,
            blocks,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorBlock {
    /// `(n_up, n_down)` on the left sub-chain.
    pub sector: (usize, usize),
    pub left_codes: Vec<usize>,
    pub right_codes: Vec<usize>,
    pub psi: DMatrix<C64>,
}

/// `ψ_{l,r}` on the `4^n_left x 4^n_right` product basis, stored by sector.
#[derive(Clone, Debug)]
pub struct SiteTensorState {
    n_left: usize,
    n_right: usize,
    blocks: Vec<TensorBlock>,
}

impl SiteTensorState {
    pub fn n_left(&self) -> usize {
        self.n_left
    }

    pub fn n_right(&self) -> usize {
        self.n_right
    }

    pub fn left_dim(&self) -> usize {
        1 << (2 * self.n_left)
    }

    pub fn right_dim(&self) -> usize {
        1 << (2 * self.n_right)
    }

    pub fn blocks(&self) -> &[TensorBlock] {
        &self.blocks
    }

    pub fn norm_sqr(&self) -> f64 {
        self.blocks.iter().map(|b| b.psi.norm_squared()).sum()
    }

    /// The full `d_l x d_r` matrix. Memory grows as `4^N`.
    pub fn dense(&self) -> DMatrix<C64> {
        let mut out = DMatrix::zeros(self.left_dim(), self.right_dim());
        for block in &self.blocks {
            for (i, &l) in block.left_codes.iter().enumerate() {
                for (j, &r) in block.right_codes.iter().enumerate() {
                    out[(l, r)] = block.psi[(i, j)];
                }
            }
        }
        out
    }

    /// The same state with the roles of the two sub-chains swapped.
    pub fn transposed(&self) -> SiteTensorState {
        let blocks = self
            .blocks
            .iter()
            .map(|b| TensorBlock {
                sector: b.sector,
                left_codes: b.right_codes.clone(),
                right_codes: b.left_codes.clone(),
                psi: b.psi.transpose(),
            })
            .collect();
        SiteTensorState {
            n_left: self.n_right,
            n_right: self.n_left,
            blocks,
        }
    }
}

pub fn to_site_tensor(m: &StateMatrix, n_left: usize) -> Result<SiteTensorState> {
    Ok(Bipartition::new(m.basis(), n_left)?.scatter(m))
}

#[derive(Clone, Debug)]
pub struct DensityBlock {
    pub codes: Vec<usize>,
    pub rho: DMatrix<C64>,
}

/// Block-diagonal Hermitian density matrix on `4^n_sites` local states.
#[derive(Clone, Debug)]
pub struct ReducedDensity {
    dim: usize,
    blocks: Vec<DensityBlock>,
}

impl ReducedDensity {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[DensityBlock] {
        &self.blocks
    }

    pub fn trace(&self) -> f64 {
        self.blocks.iter().map(|b| b.rho.trace().re).sum()
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for block in &self.blocks {
            for (i, &p) in block.codes.iter().enumerate() {
                for (j, &q) in block.codes.iter().enumerate() {
                    out[(p, q)] += block.rho[(i, j)];
                }
            }
        }
        out
    }

    /// All eigenvalues, block by block.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| {
                SymmetricEigen::new(b.rho.clone())
                    .eigenvalues
                    .iter()
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Builds a density matrix from a dense Hermitian matrix, one block.
    pub fn from_dense(rho: DMatrix<C64>) -> Result<Self> {
        if !rho.is_square() {
            return Err(Error::Shape(format!("density matrix is {:?}", rho.shape())));
        }
        let dim = rho.nrows();
        Ok(ReducedDensity {
            dim,
            blocks: vec![DensityBlock {
                codes: (0..dim).collect(),
                rho,
            }],
        })
    }
}

/// `ρ_l = ψ ψ†` or `ρ_r = (ψ† ψ)^T`.
pub fn reduced_density(psi: &SiteTensorState, side: Side) -> ReducedDensity {
    let (dim, blocks) = match side {
        Side::Left => (
            psi.left_dim(),
            psi.blocks
                .iter()
                .map(|b| DensityBlock {
                    codes: b.left_codes.clone(),
                    rho: &b.psi * b.psi.adjoint(),
                })
                .collect(),
        ),
        Side::Right => (
            psi.right_dim(),
            psi.blocks
                .iter()
                .map(|b| DensityBlock {
                    codes: b.right_codes.clone(),
                    rho: (b.psi.adjoint() * &b.psi).transpose(),
                })
                .collect(),
        ),
    };
    ReducedDensity { dim, blocks }
}

fn entropy_of_weights(weights: impl IntoIterator<Item = f64>) -> f64 {
    weights
        .into_iter()
        .filter(|&p| p >= SCHMIDT_CUTOFF)
        .map(|p| -p * p.ln())
        .sum()
}

/// Von Neumann entropy (natural log) across the cut of `psi`, from singular
/// values of each sector block.
pub fn entanglement_entropy(psi: &SiteTensorState) -> f64 {
    entropy_of_weights(psi.blocks.iter().flat_map(|b| {
        b.psi
            .clone()
            .singular_values()
            .iter()
            .map(|s| s * s)
            .collect::<Vec<_>>()
    }))
}

/// Entropy of the left half of the chain.
pub fn half_chain_entropy(psi: &SiteTensorState) -> Result<f64> {
    if psi.n_left != psi.n_right {
        return Err(Error::Validation(format!(
            "half-chain cut needs n_left = n_right, got {} / {}",
            psi.n_left, psi.n_right
        )));
    }
    Ok(entanglement_entropy(psi))
}

/// `-Tr ρ ln ρ` by diagonalisation.
pub fn von_neumann_entropy(rho: &ReducedDensity) -> f64 {
    entropy_of_weights(rho.eigenvalues())
}

fn hermitian_sqrt(rho: &DMatrix<C64>) -> DMatrix<C64> {
    let eig = SymmetricEigen::new(rho.clone());
    let roots = eig.eigenvalues.map(|l| C64::new(l.max(0.0).sqrt(), 0.0));
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&roots) * q.adjoint()
}

fn trace_sqrt_psd(m: &DMatrix<C64>) -> f64 {
    // Symmetrise against round-off before diagonalising.
    let h = (m + m.adjoint()).unscale(2.0);
    SymmetricEigen::new(h)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum()
}

/// Uhlmann fidelity `(Tr √(√ρt ρ0 √ρt))²`.
pub fn sub_chain_fidelity(rho0: &ReducedDensity, rho_t: &ReducedDensity) -> Result<f64> {
    if rho0.dim != rho_t.dim {
        return Err(Error::Shape(format!(
            "density matrices have dimensions {} and {}",
            rho0.dim, rho_t.dim
        )));
    }
    let same_blocks = rho0.blocks.len() == rho_t.blocks.len()
        && rho0.blocks.iter().zip(&rho_t.blocks).all(|(a, b)| a.codes == b.codes);
    let root = if same_blocks {
        rho0.blocks
            .iter()
            .zip(&rho_t.blocks)
            .map(|(b0, bt)| {
                let s = hermitian_sqrt(&bt.rho);
                trace_sqrt_psd(&(&s * &b0.rho * &s))
            })
            .sum::<f64>()
    } else {
        let s = hermitian_sqrt(&rho_t.to_dense());
        trace_sqrt_psd(&(&s * rho0.to_dense() * &s))
    };
    Ok((root * root).min(1.0))
}

/// A scalar metric sampled along a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FullFidelity,
    Imbalance,
    ImbalanceUp,
    ImbalanceDown,
    SubFidelity { n_left: usize },
    HalfChainEntropy,
}

impl Metric {
    /// Full-chain fidelity, the three imbalances and half-chain entropy.
    pub const PROTOCOL_SET: [Metric; 5] = [
        Metric::FullFidelity,
        Metric::Imbalance,
        Metric::ImbalanceUp,
        Metric::ImbalanceDown,
        Metric::HalfChainEntropy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::FullFidelity => "full_fidelity",
            Metric::Imbalance => "imbalance",
            Metric::ImbalanceUp => "imbalance_up",
            Metric::ImbalanceDown => "imbalance_down",
            Metric::SubFidelity { .. } => "sub_fidelity",
            Metric::HalfChainEntropy => "half_chain_entropy",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Evaluates a fixed set of metrics against a reference initial state,
/// caching everything that does not depend on the evolved state.
#[derive(Clone, Debug)]
pub struct Observer {
    initial: StateMatrix,
    metrics: Vec<Metric>,
    weights: ImbalanceWeights,
    cuts: Vec<(Bipartition, ReducedDensity)>,
    half: Option<Bipartition>,
}

impl Observer {
    pub fn new(initial: StateMatrix, metrics: &[Metric]) -> Result<Self> {
        let basis = initial.basis().clone();
        let mut cuts: Vec<(Bipartition, ReducedDensity)> = Vec::new();
        let mut half = None;
        for metric in metrics {
            match *metric {
                Metric::SubFidelity { n_left } if !cuts.iter().any(|c| c.0.n_left == n_left) => {
                    let cut = Bipartition::new(&basis, n_left)?;
                    let rho0 = reduced_density(&cut.scatter(&initial), Side::Left);
                    cuts.push((cut, rho0));
                }
                Metric::HalfChainEntropy if half.is_none() => {
                    let n = basis.lattice_size();
                    if !n.is_multiple_of(2) {
                        return Err(Error::config("lattice_size", "half-chain entropy needs an even chain"));
                    }
                    half = Some(Bipartition::new(&basis, n / 2)?);
                }
                _ => {}
            }
        }
        Ok(Observer {
            weights: ImbalanceWeights::new(&basis),
            initial,
            metrics: metrics.to_vec(),
            cuts,
            half,
        })
    }

    pub fn metrics(&self) -> &[Metric] {
        &self.metrics
    }

    pub fn initial(&self) -> &StateMatrix {
        &self.initial
    }

    pub fn observe(&self, m: &StateMatrix) -> Result<Vec<f64>> {
        let mut imbalance = None;
        let mut values = Vec::with_capacity(self.metrics.len());
        for metric in &self.metrics {
            let mut imb = || *imbalance.get_or_insert_with(|| self.weights.evaluate(m));
            let value = match *metric {
                Metric::FullFidelity => full_fidelity(&self.initial, m)?,
                Metric::Imbalance => imb().total,
                Metric::ImbalanceUp => imb().up,
                Metric::ImbalanceDown => imb().down,
                Metric::SubFidelity { n_left } => {
                    let (cut, rho0) = self.cuts.iter().find(|c| c.0.n_left == n_left).unwrap();
                    let rho_t = reduced_density(&cut.scatter(m), Side::Left);
                    sub_chain_fidelity(rho0, &rho_t)?
                }
                Metric::HalfChainEntropy => entanglement_entropy(&self.half.as_ref().unwrap().scatter(m)),
            };
            values.push(value);
        }
        Ok(values)
    }
}
