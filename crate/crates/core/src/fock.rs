//! Particle-number-conserving Fock basis of the spinful chain.
//!
//! Each spin sector is enumerated as the strictly increasing tuples of occupied
//! sites (sites are numbered `1..=N`), in lexicographic order. A tuple is stored
//! as a bitmask with bit `j - 1` set when site `j` is occupied, which keeps
//! hopping and overlap computations to a few bit operations.
//!
//! A many-body state is the `d_up x d_down` amplitude matrix `M`, where
//! `M[(a, b)]` multiplies the basis state built from up-tuple `a` and
//! down-tuple `b`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use itertools::Itertools;
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Largest chain this crate enumerates; masks are `u32` and the site-tensor
/// encoding uses base 4 digits packed into `usize`.
pub const MAX_SITES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Spin {
    Up,
    Down,
}

impl Spin {
    pub const BOTH: [Spin; 2] = [Spin::Up, Spin::Down];
}

impl fmt::Display for Spin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Spin::Up => f.write_str("up"),
            Spin::Down => f.write_str("down"),
        }
    }
}

/// The ordered tuples of one spin species.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpinSector {
    n_sites: usize,
    n_particles: usize,
    masks: Vec<u32>,
    index: HashMap<u32, usize>,
}

impl SpinSector {
    fn enumerate(n_sites: usize, n_particles: usize) -> Self {
        let masks: Vec<u32> = (1..=n_sites)
            .combinations(n_particles)
            .map(|sites| sites_to_mask(&sites))
            .collect();
        let index = masks.iter().enumerate().map(|(i, &m)| (m, i)).collect();
        SpinSector {
            n_sites,
            n_particles,
            masks,
            index,
        }
    }

    pub fn dim(&self) -> usize {
        self.masks.len()
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn masks(&self) -> &[u32] {
        &self.masks
    }

    pub fn mask(&self, index: usize) -> u32 {
        self.masks[index]
    }

    /// Occupied sites (1-based) of tuple `index`.
    pub fn tuple(&self, index: usize) -> Vec<usize> {
        mask_to_sites(self.masks[index])
    }

    pub fn index_of_mask(&self, mask: u32) -> Option<usize> {
        self.index.get(&mask).copied()
    }

    pub fn tuple_index(&self, sites: &[usize]) -> Result<usize> {
        let strictly_increasing = sites.windows(2).all(|w| w[0] < w[1]);
        let in_range = sites.iter().all(|&s| (1..=self.n_sites).contains(&s));
        let found = (strictly_increasing && in_range)
            .then(|| self.index_of_mask(sites_to_mask(sites)))
            .flatten();
        found.ok_or_else(|| {
            Error::Lookup(format!(
                "tuple {sites:?} is not a basis tuple for {} particles on {} sites",
                self.n_particles, self.n_sites
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FockBasis {
    lattice_size: usize,
    up: SpinSector,
    down: SpinSector,
}

impl FockBasis {
    /// Enumerates every `(up-tuple, down-tuple)` pair for the given particle
    /// numbers.
    pub fn new(lattice_size: usize, n_up: usize, n_down: usize) -> Result<Self> {
        if lattice_size == 0 || lattice_size > MAX_SITES {
            return Err(Error::config(
                "lattice_size",
                format!("must be in 1..={MAX_SITES}, got {lattice_size}"),
            ));
        }
        for (field, n) in [("n_up", n_up), ("n_down", n_down)] {
            if n == 0 || n > lattice_size {
                return Err(Error::config(field, format!("must be in 1..={lattice_size}, got {n}")));
            }
        }
        Ok(FockBasis {
            lattice_size,
            up: SpinSector::enumerate(lattice_size, n_up),
            down: SpinSector::enumerate(lattice_size, n_down),
        })
    }

    /// Half filling per spin, `n_up = n_down = N / 2`.
    pub fn half_filled(lattice_size: usize) -> Result<Self> {
        if !lattice_size.is_multiple_of(2) {
            return Err(Error::config(
                "lattice_size",
                format!("half filling needs an even chain, got {lattice_size}"),
            ));
        }
        Self::new(lattice_size, lattice_size / 2, lattice_size / 2)
    }

    pub fn lattice_size(&self) -> usize {
        self.lattice_size
    }

    pub fn sector(&self, spin: Spin) -> &SpinSector {
        match spin {
            Spin::Up => &self.up,
            Spin::Down => &self.down,
        }
    }

    pub fn n_up(&self) -> usize {
        self.up.n_particles
    }

    pub fn n_down(&self) -> usize {
        self.down.n_particles
    }

    pub fn dim_up(&self) -> usize {
        self.up.dim()
    }

    pub fn dim_down(&self) -> usize {
        self.down.dim()
    }

    /// Hilbert-space dimension `d_up * d_down`.
    pub fn dimension(&self) -> usize {
        self.up.dim() * self.down.dim()
    }

    pub fn tuple_index(&self, spin: Spin, sites: &[usize]) -> Result<usize> {
        self.sector(spin).tuple_index(sites)
    }

    /// Occupation pattern of basis pair `(a, b)`.
    pub fn pattern_of(&self, a: usize, b: usize) -> SpinPattern {
        let (up, down) = (self.up.mask(a), self.down.mask(b));
        let sites = (0..self.lattice_size)
            .map(|j| SiteState::from_bits(up >> j & 1 == 1, down >> j & 1 == 1))
            .collect();
        SpinPattern { sites }
    }

    /// Canonical text listing of both sectors, one tuple per line.
    pub fn serialize_tuples(&self) -> String {
        let mut out = format!(
            "lattice_size={} n_up={} n_down={}\n",
            self.lattice_size,
            self.n_up(),
            self.n_down()
        );
        for spin in Spin::BOTH {
            let sector = self.sector(spin);
            for i in 0..sector.dim() {
                let sites = sector.tuple(i).iter().join(" ");
                out.push_str(&format!("{spin},{i},{sites}\n"));
            }
        }
        out
    }
}

pub fn sites_to_mask(sites: &[usize]) -> u32 {
    sites.iter().fold(0, |m, &s| m | 1 << (s - 1))
}

pub fn mask_to_sites(mask: u32) -> Vec<usize> {
    (0..32).filter(|j| mask >> j & 1 == 1).map(|j| j + 1).collect()
}

/// One of the four local states of a site. The discriminant is the base-4
/// digit used by the site-tensor encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SiteState {
    Empty = 0,
    Up = 1,
    Down = 2,
    Doublon = 3,
}

impl SiteState {
    pub fn from_bits(up: bool, down: bool) -> Self {
        match (up, down) {
            (false, false) => SiteState::Empty,
            (true, false) => SiteState::Up,
            (false, true) => SiteState::Down,
            (true, true) => SiteState::Doublon,
        }
    }

    pub fn digit(self) -> usize {
        self as usize
    }

    pub fn has_up(self) -> bool {
        matches!(self, SiteState::Up | SiteState::Doublon)
    }

    pub fn has_down(self) -> bool {
        matches!(self, SiteState::Down | SiteState::Doublon)
    }

    fn token(self) -> &'static str {
        match self {
            SiteState::Empty => "0",
            SiteState::Up => "u",
            SiteState::Down => "d",
            SiteState::Doublon => "ud",
        }
    }
}

/// A product occupation pattern, e.g. `|↓↑↑↓⟩`.
///
/// Text form: `u`, `d`, `0` for single sites, `-` for the block `d u` and
/// `+` for the block `u d`. Tokens may be separated by whitespace or commas;
/// the two-letter doublon token `ud` is only recognised in separated form,
/// since `ud` in a run of letters reads as an up site followed by a down site.
/// Ket decorations (`|`, `>`, `⟩`) and the arrows `↑ ↓ ↕` are accepted.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpinPattern {
    sites: Vec<SiteState>,
}

impl SpinPattern {
    pub fn new(sites: Vec<SiteState>) -> Self {
        SpinPattern { sites }
    }

    /// `|-+-+...⟩` truncated to `n_sites` (which must be even).
    pub fn minus_plus(n_sites: usize) -> Self {
        let blocks = "-+".chars().cycle().take(n_sites / 2).collect::<String>();
        blocks.parse().expect("macro pattern parses")
    }

    /// `|↑↓↑↓...⟩`.
    pub fn neel(n_sites: usize) -> Self {
        let sites = (0..n_sites)
            .map(|j| if j % 2 == 0 { SiteState::Up } else { SiteState::Down })
            .collect();
        SpinPattern { sites }
    }

    pub fn sites(&self) -> &[SiteState] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn n_up(&self) -> usize {
        self.sites.iter().filter(|s| s.has_up()).count()
    }

    pub fn n_down(&self) -> usize {
        self.sites.iter().filter(|s| s.has_down()).count()
    }

    /// Occupied up sites (1-based).
    pub fn up_sites(&self) -> Vec<usize> {
        (1..=self.len()).filter(|&j| self.sites[j - 1].has_up()).collect()
    }

    /// Occupied down sites (1-based).
    pub fn down_sites(&self) -> Vec<usize> {
        (1..=self.len()).filter(|&j| self.sites[j - 1].has_down()).collect()
    }
}

impl fmt::Display for SpinPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let separated = self.sites.contains(&SiteState::Doublon);
        let sep = if separated { " " } else { "" };
        write!(f, "{}", self.sites.iter().map(|s| s.token()).join(sep))
    }
}

impl FromStr for SpinPattern {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let cleaned: String = text.chars().filter(|c| !matches!(c, '|' | '>' | '⟩')).collect();
        let separated = cleaned.contains(|c: char| c.is_whitespace() || c == ',');
        let tokens: Vec<String> = if separated {
            cleaned
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(str::to_owned)
                .collect()
        } else {
            cleaned.chars().map(String::from).collect()
        };

        let mut sites = Vec::new();
        for token in &tokens {
            match token.as_str() {
                "u" | "↑" => sites.push(SiteState::Up),
                "d" | "↓" => sites.push(SiteState::Down),
                "0" => sites.push(SiteState::Empty),
                "ud" | "du" | "↕" => sites.push(SiteState::Doublon),
                "-" => sites.extend([SiteState::Down, SiteState::Up]),
                "+" => sites.extend([SiteState::Up, SiteState::Down]),
                // Inside a separated list, a token may itself be a run of
                // single-site symbols such as `-+` or `udu0`.
                run if separated && run.chars().count() > 1 => {
                    let inner: SpinPattern = run.parse()?;
                    sites.extend(inner.sites);
                }
                other => {
                    return Err(Error::config(
                        "pattern",
                        format!("unknown site token `{other}` in `{text}`"),
                    ))
                }
            }
        }
        if sites.is_empty() {
            return Err(Error::config("pattern", "empty pattern"));
        }
        Ok(SpinPattern { sites })
    }
}

/// Amplitude matrix of a many-body state in a [`FockBasis`].
#[derive(Clone, Debug)]
pub struct StateMatrix {
    basis: Arc<FockBasis>,
    amplitudes: DMatrix<C64>,
}

impl StateMatrix {
    pub fn from_amplitudes(basis: Arc<FockBasis>, amplitudes: DMatrix<C64>) -> Result<Self> {
        if amplitudes.shape() != (basis.dim_up(), basis.dim_down()) {
            return Err(Error::Shape(format!(
                "amplitudes are {:?}, basis needs {:?}",
                amplitudes.shape(),
                (basis.dim_up(), basis.dim_down())
            )));
        }
        Ok(StateMatrix { basis, amplitudes })
    }

    /// The product state of `pattern`: a single unit amplitude.
    pub fn from_pattern(basis: Arc<FockBasis>, pattern: &SpinPattern) -> Result<Self> {
        if pattern.len() != basis.lattice_size() {
            return Err(Error::config(
                "pattern",
                format!(
                    "pattern `{pattern}` has {} sites, lattice has {}",
                    pattern.len(),
                    basis.lattice_size()
                ),
            ));
        }
        if pattern.n_up() != basis.n_up() || pattern.n_down() != basis.n_down() {
            return Err(Error::config(
                "pattern",
                format!(
                    "pattern `{pattern}` holds {} up / {} down particles, basis needs {} / {}",
                    pattern.n_up(),
                    pattern.n_down(),
                    basis.n_up(),
                    basis.n_down()
                ),
            ));
        }
        let a = basis.tuple_index(Spin::Up, &pattern.up_sites())?;
        let b = basis.tuple_index(Spin::Down, &pattern.down_sites())?;
        let mut amplitudes = DMatrix::zeros(basis.dim_up(), basis.dim_down());
        amplitudes[(a, b)] = C64::new(1.0, 0.0);
        Ok(StateMatrix { basis, amplitudes })
    }

    pub fn basis(&self) -> &Arc<FockBasis> {
        &self.basis
    }

    pub fn amplitudes(&self) -> &DMatrix<C64> {
        &self.amplitudes
    }

    pub fn amplitudes_mut(&mut self) -> &mut DMatrix<C64> {
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> DMatrix<C64> {
        self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn normalized(mut self) -> Self {
        let norm = self.norm_sqr().sqrt();
        if norm > 0.0 {
            self.amplitudes.unscale_mut(norm);
        }
        self
    }

    pub fn same_basis(&self, other: &StateMatrix) -> bool {
        Arc::ptr_eq(&self.basis, &other.basis) || *self.basis == *other.basis
    }

    pub(crate) fn check_same_basis(&self, other: &StateMatrix) -> Result<()> {
        if self.same_basis(other) {
            Ok(())
        } else {
            Err(Error::Validation("states live in different Fock bases".to_owned()))
        }
    }
}
