//! Short PPO training run with periodic checkpoints.
//!
//! `cargo run --release --example train -- 200` trains for 200 episodes.

use nonergodic::env::{EnvConfig, ObservationKind};
use nonergodic::fock::SpinPattern;
use nonergodic::ppo::{random_baseline, NetConfig, PpoConfig, Trainer};

fn main() -> nonergodic::Result<()> {
    let episodes: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(40);
    let env = EnvConfig::new(SpinPattern::minus_plus(6), 1.0, ObservationKind::FullFidelity);
    let ppo = PpoConfig {
        episodes,
        checkpoint_interval: Some(20),
        ..PpoConfig::default()
    };
    let out = std::env::temp_dir().join("nonergodic-train-example");
    std::fs::create_dir_all(&out)?;

    let base = random_baseline(&env, 20, 0)?;
    let baseline = base.iter().map(|e| e.mean_full_fidelity).sum::<f64>() / base.len() as f64;
    let mut trainer = Trainer::new(env, ppo, &NetConfig::config_b(), 0)?;
    trainer.train(|ckpt| ckpt.save(&out.join(format!("checkpoint_ep{:06}.bin", ckpt.episode))))?;

    for row in trainer.report().rows.iter().step_by(10) {
        println!(
            "episode {:>4}: <F> {:.4}, reward {:+.4}, policy std {:.2}",
            row.episode, row.mean_full_fidelity, row.mean_reward, row.policy_std
        );
    }
    let last = trainer.report().tail_mean(10, |r| r.mean_full_fidelity);
    println!("last 10 episodes <F> {last:.4}, random policy {baseline:.4}");
    trainer.checkpoint().save(&out.join("checkpoint.bin"))?;
    trainer
        .report()
        .write_csv(std::fs::File::create(out.join("report.csv"))?)?;
    println!("wrote {}", out.display());
    Ok(())
}
