//! Power spectrum of a random control trace.

use nonergodic::env::{EnvConfig, ObservationKind};
use nonergodic::fock::SpinPattern;
use nonergodic::protocols::{action_spectrum, ProtocolKind, ProtocolSpec, DELTA_0};

fn main() -> nonergodic::Result<()> {
    let env = EnvConfig::new(SpinPattern::minus_plus(6), 5.0, ObservationKind::FullFidelity);
    let kind = ProtocolKind::TiltPerturbedOnsiteRandom {
        delta0: DELTA_0,
        h: 4.0,
        u: 6.0,
    };
    let schedule = ProtocolSpec::new(kind, 5.0, 2).schedule(&env)?;
    let spectrum = action_spectrum(&schedule)?;
    for (name, c) in [("delta", &spectrum.delta), ("u", &spectrum.u)] {
        let peak = (1..c.power.len())
            .max_by(|&a, &b| c.power[a].total_cmp(&c.power[b]))
            .unwrap();
        println!(
            "{name:>5}: dc fraction {:.3}, dominance {:.2}, strongest frequency {:.2} / tau",
            c.dc_fraction, c.dominance, c.frequencies[peak]
        );
    }
    Ok(())
}
