//! Convergence of the split-operator step against RK4 on a small ring.

use nonergodic::protocols::{trotter_check, CheckDrive, TrotterCheckConfig};

fn main() -> nonergodic::Result<()> {
    let config = TrotterCheckConfig {
        sizes: vec![4, 6],
        drives: CheckDrive::ALL.to_vec(),
        horizon: 2.0,
        ..TrotterCheckConfig::default()
    };
    let report = trotter_check(&config)?;
    for r in report.rows.iter().filter(|r| r.p == "2") {
        println!(
            "N={} {:<24} {:<14} n200 {:.3e}  n400 {:.3e}  ratio {:.3}  drift {:.1e}",
            r.n,
            r.protocol,
            r.metric,
            r.norm_trotter_vs_rk4_n200,
            r.norm_trotter_vs_rk4_n400,
            r.ratio,
            r.max_step_norm_drift
        );
    }
    report.write_csv(std::io::stdout().lock())?;
    Ok(())
}
