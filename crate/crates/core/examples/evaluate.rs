//! Evaluating a policy beyond its training horizon, against the random
//! baseline.

use nonergodic::env::{EnvConfig, ObservationKind};
use nonergodic::fock::SpinPattern;
use nonergodic::ppo::{evaluate_policy, random_baseline, train, ActionMode, NetConfig, PpoConfig};

fn main() -> nonergodic::Result<()> {
    let env = EnvConfig::new(SpinPattern::minus_plus(6), 0.5, ObservationKind::FullFidelity);
    let ppo = PpoConfig {
        episodes: 30,
        ..PpoConfig::default()
    };
    let (checkpoint, _) = train(env.clone(), ppo, &NetConfig::config_b(), 3)?;

    let longer = EnvConfig { horizon: 2.0, ..env };
    let greedy = evaluate_policy(&checkpoint.agent, &longer, 1, ActionMode::Mean, 0)?;
    let sampled = evaluate_policy(&checkpoint.agent, &longer, 10, ActionMode::Sample, 0)?;
    let base = random_baseline(&longer, 10, 0)?;
    let base_f = base.iter().map(|e| e.mean_full_fidelity).sum::<f64>() / base.len() as f64;
    println!("mean action  <F> {:.4}", greedy.mean_full_fidelity());
    println!("sampled      <F> {:.4}", sampled.mean_full_fidelity());
    println!("random       <F> {base_f:.4}");

    let mut csv = Vec::new();
    sampled.write_csv(&mut csv)?;
    let text = String::from_utf8_lossy(&csv);
    println!("{}", text.lines().next().unwrap());
    Ok(())
}
