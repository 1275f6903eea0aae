//! Coarse phase diagram of one action family, averaged over random drives.

use nonergodic::env::{EnvConfig, ObservationKind};
use nonergodic::fock::SpinPattern;
use nonergodic::protocols::{linspace_step, phase_diagram, Family};

fn main() -> nonergodic::Result<()> {
    let family: Family = std::env::args()
        .nth(1)
        .as_deref()
        .unwrap_or("delta_onsite_random")
        .parse()?;
    let env = EnvConfig::new(SpinPattern::minus_plus(6), 5.0, ObservationKind::FullFidelity);
    let axis1 = linspace_step(0.0, 10.0, 2.5)?;
    let axis2 = linspace_step(0.0, 10.0, 5.0)?;
    let grid = phase_diagram(family, &axis1, &axis2, 4, &env, 0)?;

    let (n1, n2) = family.axis_names();
    println!("{family}: rows {n1}, columns {n2}");
    print!("{:>8}", "");
    for a2 in &axis2 {
        print!("{a2:>14.1}");
    }
    println!();
    for a1 in &axis1 {
        print!("{a1:>8.1}");
        for a2 in &axis2 {
            let c = grid.cell(*a1, *a2).unwrap();
            print!("  {:.3}±{:.3}", c.mean_fidelity, c.std_fidelity);
        }
        println!();
    }
    Ok(())
}
