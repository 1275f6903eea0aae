//! Split-operator evolution under a constant drive, checked against RK4.

use nonergodic::fock::{FockBasis, SpinPattern, StateMatrix};
use nonergodic::hamiltonian::{BoundarySign, ControlAction};
use nonergodic::observables::Metric;
use nonergodic::propagator::{evolve, lp_error, rk4_evolve, Chain, DriveSchedule, Norm, DEFAULT_DT};
use std::sync::Arc;

fn main() -> nonergodic::Result<()> {
    let basis = Arc::new(FockBasis::half_filled(6)?);
    let initial = StateMatrix::from_pattern(basis.clone(), &SpinPattern::minus_plus(6))?;
    let chain = Arc::new(Chain::new(basis, BoundarySign::Fermionic));
    let stepper = Arc::new(chain.stepper(DEFAULT_DT)?);

    let drive = DriveSchedule::constant(ControlAction::new(10.0, 10.0), 2.0, 1, DEFAULT_DT)?;
    let metrics = [Metric::FullFidelity, Metric::Imbalance, Metric::HalfChainEntropy];
    let trotter = evolve(&initial, &chain, &stepper, &drive, &metrics)?;
    let rk4 = rk4_evolve(&initial, &chain, &drive, 1e-4, &metrics)?;

    for (a, b) in trotter.series.iter().zip(&rk4.series) {
        println!(
            "{:>20}: end {:+.5} (rk4 {:+.5}), L2 gap {:.2e}",
            a.name(),
            a.values.last().unwrap(),
            b.values.last().unwrap(),
            lp_error(a, b, Norm::L(2.0))?
        );
    }
    let f = trotter.get(Metric::FullFidelity).unwrap();
    let mut out = Vec::new();
    f.write_csv(&mut out)?;
    println!(
        "{}",
        String::from_utf8_lossy(&out)
            .lines()
            .take(5)
            .collect::<Vec<_>>()
            .join("\n")
    );
    Ok(())
}
