//! The benchmark protocols from the same initial state.

use nonergodic::env::{EnvConfig, ObservationKind};
use nonergodic::fock::SpinPattern;
use nonergodic::observables::Metric;
use nonergodic::protocols::{run_protocol, ProtocolKind, ProtocolSpec, DELTA_0};

fn main() -> nonergodic::Result<()> {
    let horizon = 10.0;
    let env = EnvConfig::new(SpinPattern::minus_plus(8), horizon, ObservationKind::FullFidelity);
    let kinds = [
        ("Wannier-Stark", ProtocolKind::Constant { delta: 10.0, u: 0.0 }),
        ("scar regime", ProtocolKind::Constant { delta: 10.0, u: 10.0 }),
        ("thermal", ProtocolKind::Constant { delta: 1.0, u: 2.0 }),
        ("random onsite", ProtocolKind::OnsiteRandom { delta: 10.0, u: 10.0 }),
        (
            "random tilt",
            ProtocolKind::TiltPerturbed {
                delta0: DELTA_0,
                h: 5.0,
                u: 0.0,
            },
        ),
        (
            "random tilt and onsite",
            ProtocolKind::TiltPerturbedOnsiteRandom {
                delta0: DELTA_0,
                h: 5.0,
                u: 10.0,
            },
        ),
    ];
    println!("{:>24} {:>8} {:>8} {:>8}", "protocol", "<F>", "<I>", "S(end)");
    for (label, kind) in kinds {
        let run = run_protocol(&ProtocolSpec::new(kind, horizon, 1), &env)?;
        let f = run.get(Metric::FullFidelity).unwrap().time_average();
        let i = run.get(Metric::Imbalance).unwrap().time_average();
        let s = *run.get(Metric::HalfChainEntropy).unwrap().values.last().unwrap();
        println!("{label:>24} {f:8.4} {i:+8.4} {s:8.4}");
    }
    Ok(())
}
