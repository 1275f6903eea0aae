//! Episodic control environment: each episode starts from a fixed occupation
//! pattern, each decision step holds one clipped `(Δ, U)` action for
//! `interval_steps` product steps, and the reward penalises drift of the
//! observed metric away from its initial value.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{FockBasis, SpinPattern, StateMatrix};
use crate::hamiltonian::{BoundarySign, ControlAction};
use crate::observables::{Metric, Observer};
use crate::propagator::{intervals_in, Chain, Evolution, TrotterStepper, DEFAULT_DT};

/// What the agent sees after each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ObservationKind {
    /// `[I_up, I_down]`.
    ImbalancePair,
    /// `[F_sub]` on sites `1..=n_left`.
    SubFidelity { n_left: usize },
    /// `[F]` of the whole chain.
    FullFidelity,
}

impl ObservationKind {
    pub fn metrics(&self) -> Vec<Metric> {
        match *self {
            ObservationKind::ImbalancePair => vec![Metric::ImbalanceUp, Metric::ImbalanceDown],
            ObservationKind::SubFidelity { n_left } => vec![Metric::SubFidelity { n_left }],
            ObservationKind::FullFidelity => vec![Metric::FullFidelity],
        }
    }

    pub fn is_fidelity(&self) -> bool {
        !matches!(self, ObservationKind::ImbalancePair)
    }

    pub fn bounds(&self) -> (f64, f64) {
        if self.is_fidelity() {
            (0.0, 1.0)
        } else {
            (-1.0, 1.0)
        }
    }
}

impl fmt::Display for ObservationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObservationKind::ImbalancePair => f.write_str("imbalance_pair"),
            ObservationKind::SubFidelity { n_left } => write!(f, "sub_fidelity({n_left})"),
            ObservationKind::FullFidelity => f.write_str("full_fidelity"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub pattern: SpinPattern,
    /// Product step in τ.
    pub dt: f64,
    /// Episode length in τ.
    pub horizon: f64,
    pub observation: ObservationKind,
    pub action_low: f64,
    pub action_high: f64,
    pub interval_steps: usize,
    pub boundary: BoundarySign,
    /// Append `t / horizon` to the observation vector.
    pub append_time: bool,
}

impl EnvConfig {
    pub fn new(pattern: SpinPattern, horizon: f64, observation: ObservationKind) -> Self {
        EnvConfig {
            pattern,
            dt: DEFAULT_DT,
            horizon,
            observation,
            action_low: -10.0,
            action_high: 10.0,
            interval_steps: 1,
            boundary: BoundarySign::Fermionic,
            append_time: false,
        }
    }

    pub fn lattice_size(&self) -> usize {
        self.pattern.len()
    }

    /// Decision steps per episode.
    pub fn episode_len(&self) -> Result<usize> {
        if self.interval_steps == 0 {
            return Err(Error::config("env.interval_steps", "must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config(
                "model.dt_over_tau",
                format!("must be positive, got {}", self.dt),
            ));
        }
        let n = intervals_in(self.horizon, self.dt * self.interval_steps as f64)?;
        if n == 0 {
            return Err(Error::config("env.horizon_over_tau", "episode has no decision steps"));
        }
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.action_low < self.action_high) || !self.action_low.is_finite() || !self.action_high.is_finite() {
            return Err(Error::config(
                "env.action_low",
                format!(
                    "need action_low < action_high, got [{}, {}]",
                    self.action_low, self.action_high
                ),
            ));
        }
        if let ObservationKind::SubFidelity { n_left } = self.observation {
            if n_left == 0 || n_left >= self.lattice_size() {
                return Err(Error::config(
                    "env.n_sub",
                    format!("must lie in 1..{}, got {n_left}", self.lattice_size()),
                ));
            }
        }
        self.episode_len()?;
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.observation.metrics().len() + self.append_time as usize
    }

    /// Column names of the observation vector.
    pub fn obs_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .observation
            .metrics()
            .iter()
            .map(|m| m.name().to_string())
            .collect();
        if self.append_time {
            names.push("time_fraction".into());
        }
        names
    }

    pub fn action_scale(&self) -> f64 {
        0.5 * (self.action_high - self.action_low)
    }

    pub fn action_center(&self) -> f64 {
        0.5 * (self.action_high + self.action_low)
    }
}

/// Outcome of one decision step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// The action after clipping.
    pub applied: ControlAction,
    /// Full-chain fidelity after the step, whatever is observed.
    pub full_fidelity: f64,
}

/// `-|√F - 1|`.
pub fn fidelity_reward(f: f64) -> f64 {
    -(f.max(0.0).sqrt() - 1.0).abs()
}

/// `-|I_down(t) - I_down(0)| - |I_up(t) - I_up(0)|`.
pub fn imbalance_reward(now: [f64; 2], initial: [f64; 2]) -> f64 {
    -(now[1] - initial[1]).abs() - (now[0] - initial[0]).abs()
}

pub struct Env {
    config: EnvConfig,
    episode_len: usize,
    initial: StateMatrix,
    evolution: Evolution,
    observer: Observer,
    fidelity_observer: Observer,
    initial_obs: Vec<f64>,
    steps: usize,
    needs_reset: bool,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let n = config.lattice_size();
        let basis = Arc::new(FockBasis::new(n, config.pattern.n_up(), config.pattern.n_down())?);
        let chain = Arc::new(Chain::new(basis, config.boundary));
        let stepper = Arc::new(chain.stepper(config.dt)?);
        Self::with_shared(config, chain, stepper)
    }

    /// Builds an environment on an existing chain and stepper, e.g. one of
    /// several parallel evaluation instances.
    pub fn with_shared(config: EnvConfig, chain: Arc<Chain>, stepper: Arc<TrotterStepper>) -> Result<Self> {
        config.validate()?;
        if chain.boundary() != config.boundary || (stepper.dt() - config.dt).abs() > 1e-15 {
            return Err(Error::Validation(
                "shared chain or stepper does not match the config".into(),
            ));
        }
        let initial = StateMatrix::from_pattern(chain.basis().clone(), &config.pattern)?;
        let observer = Observer::new(initial.clone(), &config.observation.metrics())?;
        let fidelity_observer = Observer::new(initial.clone(), &[Metric::FullFidelity])?;
        let initial_obs = observer.observe(&initial)?;
        let evolution = Evolution::new(chain, stepper, &initial)?;
        Ok(Env {
            episode_len: config.episode_len()?,
            config,
            initial,
            evolution,
            observer,
            fidelity_observer,
            initial_obs,
            steps: 0,
            needs_reset: true,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn chain(&self) -> &Arc<Chain> {
        self.evolution.chain()
    }

    pub fn episode_len(&self) -> usize {
        self.episode_len
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn state(&self) -> StateMatrix {
        self.evolution.state()
    }

    fn with_time(&self, mut obs: Vec<f64>) -> Vec<f64> {
        if self.config.append_time {
            obs.push(self.steps as f64 / self.episode_len as f64);
        }
        obs
    }

    /// Restores the initial pattern and returns the initial observation.
    pub fn reset(&mut self) -> Result<Vec<f64>> {
        self.evolution.reset(&self.initial)?;
        self.steps = 0;
        self.needs_reset = false;
        Ok(self.with_time(self.initial_obs.clone()))
    }

    pub fn step(&mut self, action: ControlAction) -> Result<StepOutcome> {
        if self.needs_reset {
            return Err(Error::Usage(if self.steps == 0 {
                "step before reset".into()
            } else {
                "step after the episode ended".into()
            }));
        }
        if !action.is_finite() {
            return Err(Error::Numerical(format!(
                "policy produced non-finite action {action:?}"
            )));
        }
        let applied = action.clipped(self.config.action_low, self.config.action_high);
        self.evolution.advance(applied, self.config.interval_steps)?;
        self.steps += 1;
        let state = self.evolution.state();
        let metrics = self.observer.observe(&state)?;
        let full_fidelity = match self.config.observation {
            ObservationKind::FullFidelity => metrics[0],
            _ => self.fidelity_observer.observe(&state)?[0],
        };
        let reward = if self.config.observation.is_fidelity() {
            fidelity_reward(metrics[0])
        } else {
            imbalance_reward([metrics[0], metrics[1]], [self.initial_obs[0], self.initial_obs[1]])
        };
        let done = self.steps == self.episode_len;
        self.needs_reset = done;
        Ok(StepOutcome {
            observation: self.with_time(metrics),
            reward,
            done,
            applied,
            full_fidelity,
        })
    }
}

/// One completed (or partial) episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    /// Observation before each step.
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<ControlAction>,
    pub rewards: Vec<f64>,
    /// Observed metric values after each step.
    pub next_observations: Vec<Vec<f64>>,
    pub full_fidelity: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, obs: Vec<f64>, outcome: &StepOutcome) {
        self.observations.push(obs);
        self.actions.push(outcome.applied);
        self.rewards.push(outcome.reward);
        self.next_observations.push(outcome.observation.clone());
        self.full_fidelity.push(outcome.full_fidelity);
    }

    /// Writes `step,<obs...>,action_delta,action_u,reward`, one row per step
    /// with the observation the action was chosen from.
    pub fn write_csv<W: Write>(&self, obs_names: &[String], writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["step".to_string()];
        header.extend(obs_names.iter().cloned());
        header.extend(["action_delta", "action_u", "reward"].map(String::from));
        out.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![k.to_string()];
            row.extend(self.observations[k].iter().map(|v| format!("{v:.11e}")));
            row.push(format!("{:.11e}", self.actions[k].delta));
            row.push(format!("{:.11e}", self.actions[k].u));
            row.push(format!("{:.11e}", self.rewards[k]));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Means over the decision steps of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    /// Mean of the observed metric: fidelity, or total imbalance for the
    /// imbalance pair.
    pub mean_metric: f64,
    /// Per-spin means `(up, down)` for imbalance tasks.
    pub mean_imbalance: Option<(f64, f64)>,
    pub mean_full_fidelity: f64,
    pub mean_reward: f64,
    pub total_reward: f64,
}

/// Averages over the post-step samples of a completed episode.
pub fn episode_metrics(trajectory: &Trajectory, config: &EnvConfig) -> Result<EpisodeMetrics> {
    let expected = config.episode_len()?;
    if trajectory.len() != expected {
        return Err(Error::Validation(format!(
            "incomplete trajectory: {} of {expected} steps",
            trajectory.len()
        )));
    }
    let n = expected as f64;
    let column_mean = |k: usize| trajectory.next_observations.iter().map(|o| o[k]).sum::<f64>() / n;
    let (mean_metric, mean_imbalance) = match config.observation {
        ObservationKind::ImbalancePair => {
            let (up, down) = (column_mean(0), column_mean(1));
            let (nu, nd) = (config.pattern.n_up() as f64, config.pattern.n_down() as f64);
            ((nu * up + nd * down) / (nu + nd), Some((up, down)))
        }
        _ => (column_mean(0), None),
    };
    let total_reward: f64 = trajectory.rewards.iter().sum();
    Ok(EpisodeMetrics {
        mean_metric,
        mean_imbalance,
        mean_full_fidelity: trajectory.full_fidelity.iter().sum::<f64>() / n,
        mean_reward: total_reward / n,
        total_reward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(n: usize, horizon: f64, observation: ObservationKind) -> EnvConfig {
        EnvConfig::new(SpinPattern::minus_plus(n), horizon, observation)
    }

    fn run_random(env: &mut Env, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut traj = Trajectory::default();
        let mut obs = env.reset().unwrap();
        loop {
            let a = ControlAction::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0));
            let out = env.step(a).unwrap();
            traj.push(obs, &out);
            obs = out.observation.clone();
            if out.done {
                return traj;
            }
        }
    }

    #[test]
    fn initial_observations() {
        let mut env = Env::new(EnvConfig::new(
            "-+-".parse().unwrap(),
            0.01,
            ObservationKind::ImbalancePair,
        ))
        .unwrap();
        let obs = env.reset().unwrap();
        assert!((obs[0] + 1.0 / 3.0).abs() < 1e-15 && (obs[1] - 1.0 / 3.0).abs() < 1e-15);

        for kind in [
            ObservationKind::FullFidelity,
            ObservationKind::SubFidelity { n_left: 1 },
            ObservationKind::SubFidelity { n_left: 3 },
        ] {
            let mut env = Env::new(config(6, 0.01, kind)).unwrap();
            let obs = env.reset().unwrap();
            assert!((obs[0] - 1.0).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn reward_formulas() {
        assert_eq!(fidelity_reward(1.0), 0.0);
        assert!((fidelity_reward(0.81) + 0.1).abs() < 1e-15);
        assert!((imbalance_reward([0.3, -0.5], [0.1, -0.5]) + 0.2).abs() < 1e-15);
        assert_eq!(imbalance_reward([0.1, 0.2], [0.1, 0.2]), 0.0);
    }

    #[test]
    fn episode_length_and_lifecycle() {
        let mut cfg = config(6, 0.1, ObservationKind::FullFidelity);
        cfg.interval_steps = 2;
        let mut env = Env::new(cfg.clone()).unwrap();
        assert_eq!(env.episode_len(), 10);
        assert!(matches!(env.step(ControlAction::default()), Err(Error::Usage(_))));
        for _ in 0..2 {
            let traj = run_random(&mut env, 1);
            assert_eq!(traj.len(), 10);
            assert!(matches!(env.step(ControlAction::default()), Err(Error::Usage(_))));
        }
        let mut bad = cfg.clone();
        bad.horizon = 0.0123;
        assert!(Env::new(bad).is_err());
        let mut bad = cfg.clone();
        bad.action_low = 10.0;
        assert!(Env::new(bad).is_err());
        let mut bad = cfg;
        bad.observation = ObservationKind::SubFidelity { n_left: 6 };
        assert!(matches!(Env::new(bad), Err(Error::Config { .. })));
    }

    #[test]
    fn actions_are_clipped() {
        let mut env = Env::new(config(4, 0.01, ObservationKind::FullFidelity)).unwrap();
        env.reset().unwrap();
        let out = env.step(ControlAction::new(40.0, -11.0)).unwrap();
        assert_eq!(out.applied, ControlAction::new(10.0, -10.0));
        assert!(matches!(
            env.step(ControlAction::new(f64::NAN, 0.0)),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn zero_drive_reward_is_zero_only_at_start() {
        let mut env = Env::new(config(4, 0.05, ObservationKind::FullFidelity)).unwrap();
        env.reset().unwrap();
        let out = env.step(ControlAction::new(0.0, 0.0)).unwrap();
        assert!(out.reward < 0.0);
        assert!((out.reward - fidelity_reward(out.observation[0])).abs() < 1e-15);
    }

    #[test]
    fn identical_actions_give_identical_trajectories() {
        let cfg = config(6, 0.2, ObservationKind::ImbalancePair);
        let a = run_random(&mut Env::new(cfg.clone()).unwrap(), 7);
        let b = run_random(&mut Env::new(cfg).unwrap(), 7);
        assert_eq!(a, b);
    }

    #[test]
    fn time_feature() {
        let mut cfg = config(4, 0.02, ObservationKind::FullFidelity);
        cfg.append_time = true;
        let mut env = Env::new(cfg.clone()).unwrap();
        assert_eq!(env.reset().unwrap(), vec![1.0, 0.0]);
        let out = env.step(ControlAction::default()).unwrap();
        assert_eq!(out.observation[1], 0.25);
        assert_eq!(cfg.obs_names(), vec!["full_fidelity", "time_fraction"]);
    }

    #[test]
    fn episode_means() {
        let cfg = config(4, 0.02, ObservationKind::FullFidelity);
        let make = |values: &[f64]| Trajectory {
            observations: vec![vec![1.0]; values.len()],
            actions: vec![ControlAction::default(); values.len()],
            rewards: values.iter().map(|&f| fidelity_reward(f)).collect(),
            next_observations: values.iter().map(|&f| vec![f]).collect(),
            full_fidelity: values.to_vec(),
        };
        assert_eq!(episode_metrics(&make(&[1.0; 4]), &cfg).unwrap().mean_metric, 1.0);
        assert_eq!(episode_metrics(&make(&[0.5; 4]), &cfg).unwrap().mean_metric, 0.5);
        assert_eq!(
            episode_metrics(&make(&[1.0, 0.0, 1.0, 0.0]), &cfg).unwrap().mean_metric,
            0.5
        );
        assert!(episode_metrics(&make(&[1.0; 3]), &cfg).is_err());
    }

    #[test]
    fn trajectory_csv_header() {
        let cfg = config(4, 0.01, ObservationKind::ImbalancePair);
        let traj = run_random(&mut Env::new(cfg.clone()).unwrap(), 3);
        let mut buf = Vec::new();
        traj.write_csv(&cfg.obs_names(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,imbalance_up,imbalance_down,action_delta,action_u,reward\n0,"));
        assert_eq!(text.lines().count(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn observations_stay_in_bounds(seed in 0u64..10_000, kind in 0usize..3) {
            let observation = [
                ObservationKind::ImbalancePair,
                ObservationKind::SubFidelity { n_left: 2 },
                ObservationKind::FullFidelity,
            ][kind];
            let mut env = Env::new(config(6, 0.25, observation)).unwrap();
            let traj = run_random(&mut env, seed);
            let (lo, hi) = observation.bounds();
            for obs in &traj.next_observations {
                for &v in obs {
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
            for &r in &traj.rewards {
                prop_assert!(r <= 0.0);
            }
        }
    }
}
