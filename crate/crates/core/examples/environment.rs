//! Stepping the control environment by hand with a fixed action.

use nonergodic::env::{episode_metrics, Env, EnvConfig, ObservationKind, Trajectory};
use nonergodic::fock::SpinPattern;
use nonergodic::hamiltonian::ControlAction;

fn main() -> nonergodic::Result<()> {
    let config = EnvConfig::new(
        SpinPattern::minus_plus(6),
        1.0,
        ObservationKind::SubFidelity { n_left: 1 },
    );
    let mut env = Env::new(config.clone())?;
    println!(
        "{} steps per episode, observation {:?}",
        env.episode_len(),
        config.obs_names()
    );

    for action in [
        ControlAction::new(10.0, 0.0),
        ControlAction::new(0.0, 0.0),
        ControlAction::new(25.0, -3.0),
    ] {
        let mut obs = env.reset()?;
        let mut trajectory = Trajectory::default();
        loop {
            let outcome = env.step(action)?;
            trajectory.push(obs, &outcome);
            obs = outcome.observation.clone();
            if outcome.done {
                println!("applied {:?}", outcome.applied);
                break;
            }
        }
        let m = episode_metrics(&trajectory, &config)?;
        println!(
            "  mean F_sub {:.4}, mean F {:.4}, return {:.3}",
            m.mean_metric, m.mean_full_fidelity, m.total_reward
        );
    }
    Ok(())
}
