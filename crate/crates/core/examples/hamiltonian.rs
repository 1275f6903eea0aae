//! Hopping matrices and diagonal terms of the tilted ring.

use nonergodic::fock::{FockBasis, Spin, SpinPattern, StateMatrix};
use nonergodic::hamiltonian::{BoundarySign, ControlAction, HoppingMatrix};
use nonergodic::propagator::Chain;
use std::sync::Arc;

fn main() -> nonergodic::Result<()> {
    let basis = Arc::new(FockBasis::half_filled(6)?);
    for boundary in [BoundarySign::Fermionic, BoundarySign::None] {
        let h = HoppingMatrix::build(&basis, Spin::Up, boundary);
        let dense = h.to_dense();
        let eig = dense.symmetric_eigenvalues();
        let (lo, hi) = eig
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &e| (l.min(e), u.max(e)));
        println!(
            "{boundary:>9} boundary: {}x{} hopping, {} nonzeros, symmetric {}, spectrum [{lo:.4}, {hi:.4}]",
            h.dim(),
            h.dim(),
            h.nnz(),
            h.is_symmetric()
        );
    }

    let chain = Chain::new(basis.clone(), BoundarySign::Fermionic);
    let state = StateMatrix::from_pattern(basis, &"-+-".parse::<SpinPattern>()?)?;
    for (delta, u) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)] {
        let e = chain.energy(&state, ControlAction::new(delta, u));
        println!("<H>(delta = {delta:>4}, U = {u:>4}) = {e:.4}");
    }

    let mut triplets = Vec::new();
    chain.hopping(Spin::Down).write_triplets(&mut triplets)?;
    let text = String::from_utf8_lossy(&triplets);
    println!(
        "first hopping triplets:\n{}",
        text.lines().take(4).collect::<Vec<_>>().join("\n")
    );
    Ok(())
}
