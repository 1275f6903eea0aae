//! Fidelity, imbalance, entanglement and sub-chain fidelity of an evolved
//! state.

use nonergodic::fock::{FockBasis, SpinPattern, StateMatrix};
use nonergodic::hamiltonian::{BoundarySign, ControlAction};
use nonergodic::observables::{
    full_fidelity, half_chain_entropy, imbalance, reduced_density, sub_chain_fidelity, to_site_tensor, Side,
};
use nonergodic::propagator::{Chain, Evolution, DEFAULT_DT};
use std::sync::Arc;

fn main() -> nonergodic::Result<()> {
    let basis = Arc::new(FockBasis::half_filled(8)?);
    let initial = StateMatrix::from_pattern(basis.clone(), &SpinPattern::minus_plus(8))?;
    let chain = Arc::new(Chain::new(basis, BoundarySign::Fermionic));
    let mut evo = Evolution::new(chain.clone(), Arc::new(chain.stepper(DEFAULT_DT)?), &initial)?;

    let rho0 = reduced_density(&to_site_tensor(&initial, 1)?, Side::Left);
    println!("   t      F    I_up  I_down      S   F_sub(1)");
    for _ in 0..=10 {
        let state = evo.state();
        let i = imbalance(&state);
        let rho = reduced_density(&to_site_tensor(&state, 1)?, Side::Left);
        println!(
            "{:4.1} {:6.4} {:+7.4} {:+7.4} {:6.4} {:10.4}",
            evo.elapsed(),
            full_fidelity(&initial, &state)?,
            i.up,
            i.down,
            half_chain_entropy(&to_site_tensor(&state, 4)?)?,
            sub_chain_fidelity(&rho0, &rho)?
        );
        evo.advance(ControlAction::new(1.0, 2.0), 100)?;
    }
    Ok(())
}
