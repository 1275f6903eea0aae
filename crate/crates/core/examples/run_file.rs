//! Resolving a run file the way the command line does.

use nonergodic::cli::{RunFile, Task};

const RUN: &str = r#"
[model]
pattern = "-+-+"

[env]
observation = "sub_fidelity"
n_sub = 4
horizon_over_tau = 10.0

[agent]
config = "A"
seed = 3
"#;

fn main() -> nonergodic::Result<()> {
    let run = RunFile::parse_with_overrides(RUN, &["agent.episodes=2000".into()])?.resolve(Task::Train)?;
    println!("{}", run.to_toml());
    let env = run.env_config()?;
    let ppo = run.ppo_config()?;
    println!(
        "N = {}, {} steps per episode, observation {}, {} episodes, hidden {:?}",
        env.lattice_size(),
        env.episode_len()?,
        env.observation,
        ppo.episodes,
        run.net_config()?.hidden
    );
    match RunFile::parse("[env]\nhorizon_over_tau = 1.0\n")?.resolve(Task::Protocol) {
        Err(e) => println!("missing pattern: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
