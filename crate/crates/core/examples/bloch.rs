//! Bloch period and envelope of the Wannier-Stark fidelity signal.

use nonergodic::env::{EnvConfig, ObservationKind};
use nonergodic::fock::SpinPattern;
use nonergodic::observables::Metric;
use nonergodic::protocols::{bloch_analysis, revivals, run_protocol_with, ProtocolKind, ProtocolSpec};

fn main() -> nonergodic::Result<()> {
    for delta in [5.0, 10.0, 20.0] {
        // The envelope period grows like Δ/J², so the span does too.
        let horizon = 6.0 * delta;
        let env = EnvConfig::new(SpinPattern::minus_plus(6), horizon, ObservationKind::FullFidelity);
        let spec = ProtocolSpec::new(ProtocolKind::Constant { delta, u: 0.0 }, horizon, 0);
        let run = run_protocol_with(&spec, &env, &[Metric::FullFidelity])?;
        let est = bloch_analysis(run.get(Metric::FullFidelity).unwrap(), delta)?;
        println!(
            "delta {delta:>4}: period {:.5} (2pi/delta {:.5}, error {:.2}%), envelope {}",
            est.bloch_period,
            est.expected_period,
            100.0 * est.relative_error(),
            est.envelope_period.map_or("none".into(), |p| format!("{p:.3}"))
        );
    }

    let horizon = 20.0;
    let env = EnvConfig::new(SpinPattern::minus_plus(8), horizon, ObservationKind::FullFidelity);
    let spec = ProtocolSpec::new(ProtocolKind::Constant { delta: 10.0, u: 10.0 }, horizon, 0);
    let run = run_protocol_with(&spec, &env, &[Metric::FullFidelity])?;
    for (t, f) in revivals(run.get(Metric::FullFidelity).unwrap(), 0.1) {
        println!("revival at t = {t:.3}: F = {f:.3}");
    }
    Ok(())
}
