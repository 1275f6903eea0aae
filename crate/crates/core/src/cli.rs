//! Run files and the command-line front end.
//!
//! A run file is TOML with sections `model`, `env`, `agent`, `task` and one
//! block per task. Every physical quantity carries its unit in the key name.
//! Resolution fills all defaults for the sections a task uses; the resolved
//! file is written next to the outputs and re-parses to the same run.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, ObservationKind};
use crate::error::{Error, Result};
use crate::fock::{FockBasis, Spin, SpinPattern};
use crate::hamiltonian::{BoundarySign, HoppingMatrix};
use crate::observables::Metric;
use crate::ppo::{self, ActionMode, Checkpoint, NetConfig, PpoConfig, Trainer};
use crate::propagator::DEFAULT_DT;
use crate::protocols::{self, CheckDrive, Family, ProtocolKind, ProtocolSpec, TrotterCheckConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Train,
    Evaluate,
    Protocol,
    Sweep,
    TrotterCheck,
    Spectrum,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Evaluate => "evaluate",
            Task::Protocol => "protocol",
            Task::Sweep => "sweep",
            Task::TrotterCheck => "trotter-check",
            Task::Spectrum => "spectrum",
        }
    }

    fn uses_model(self) -> bool {
        self != Task::TrotterCheck
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_sites: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_over_tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boundary_sign: Option<BoundarySign>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    /// `full_fidelity`, `sub_fidelity` or `imbalance`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
    /// Sites in the observed sub-chain for `sub_fidelity`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_sub: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon_over_tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interval_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action_low_over_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action_high_over_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub append_time: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    /// `A`, `B` or `custom`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actor_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minibatches: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_coeff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize_advantages: Option<bool>,
    /// Global gradient-norm clip; `0` disables it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    /// Episodes between intermediate checkpoints; `0` disables them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_interval: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deterministic: Option<bool>,
    /// Overrides `env.horizon_over_tau` for testing beyond the training horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon_over_tau: Option<f64>,
    /// Episodes of the uniform random baseline; `0` skips it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_episodes: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    /// `constant`, `tilt_perturbed`, `onsite_random`,
    /// `tilt_perturbed_onsite_random` or `checkpoint_policy`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_over_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_over_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta0_over_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_over_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon_over_tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// An explicit list or an inclusive `start..=stop` range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Axis {
    Values(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

impl Axis {
    fn values(&self, field: &str) -> Result<Vec<f64>> {
        let v = match self {
            Axis::Values(v) => v.clone(),
            Axis::Range { start, stop, step } => {
                protocols::linspace_step(*start, *stop, *step).map_err(|e| Error::config(field, e.to_string()))?
            }
        };
        if v.is_empty() {
            return Err(Error::config(field, "axis is empty"));
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis1: Option<Axis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis2: Option<Axis>,
    /// Realizations per cell.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrotterCheckSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drives: Option<Vec<CheckDrive>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon_over_tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interval_over_tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rk4_dt_over_tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<ProtocolSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trotter_check: Option<TrotterCheckSection>,
}

fn required<T: Clone>(value: &Option<T>, field: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Error::config(field, "missing required key"))
}

fn parse_observation(name: &str, n_sub: Option<usize>) -> Result<ObservationKind> {
    match name {
        "full_fidelity" => Ok(ObservationKind::FullFidelity),
        "imbalance" => Ok(ObservationKind::ImbalancePair),
        "sub_fidelity" => Ok(ObservationKind::SubFidelity {
            n_left: n_sub.ok_or_else(|| Error::config("env.n_sub", "required for `sub_fidelity`"))?,
        }),
        other => Err(Error::config(
            "env.observation",
            format!("expected `full_fidelity`, `sub_fidelity` or `imbalance`, got `{other}`"),
        )),
    }
}

impl RunFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("run file", e.to_string()))
    }

    /// Parses `text` after applying `section.key=value` overrides. Values are
    /// read as TOML, falling back to a bare string.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("run file", e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{item}` is not of the form section.key=value")))?;
            let value = match format!("v = {raw}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").unwrap(),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let leaf = parts
                .pop()
                .filter(|l| !l.is_empty())
                .ok_or_else(|| Error::Usage(format!("empty key in `{item}`")))?;
            let mut node = &mut table;
            for part in parts {
                node = node
                    .entry(part)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::config(key, "is not a section"))?;
            }
            node.insert(leaf.to_string(), value);
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("run file", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run files always serialise")
    }

    /// Fills every default used by `task`.
    pub fn resolve(&self, task: Task) -> Result<RunFile> {
        let mut r = RunFile {
            task: Some(TaskSection {
                kind: Some(task.name().into()),
            }),
            ..RunFile::default()
        };
        if let Some(kind) = self.task.as_ref().and_then(|t| t.kind.as_deref()) {
            if kind != task.name() {
                return Err(Error::config(
                    "task.kind",
                    format!("run file is for `{kind}`, command is `{}`", task.name()),
                ));
            }
        }
        if task.uses_model() {
            let m = self.model.clone().unwrap_or_default();
            let pattern: SpinPattern = required(&m.pattern, "model.pattern")?
                .parse()
                .map_err(|e: Error| Error::config("model.pattern", e.to_string()))?;
            if let Some(n) = m.n_sites {
                if n != pattern.len() {
                    return Err(Error::config(
                        "model.n_sites",
                        format!("{n} sites but the pattern has {}", pattern.len()),
                    ));
                }
            }
            r.model = Some(ModelSection {
                n_sites: Some(pattern.len()),
                pattern: m.pattern,
                dt_over_tau: Some(m.dt_over_tau.unwrap_or(DEFAULT_DT)),
                boundary_sign: Some(m.boundary_sign.unwrap_or_default()),
            });
            let e = self.env.clone().unwrap_or_default();
            let observation = e.observation.unwrap_or_else(|| "full_fidelity".into());
            r.env = Some(EnvSection {
                n_sub: if observation == "sub_fidelity" {
                    Some(e.n_sub.unwrap_or(1))
                } else {
                    e.n_sub
                },
                observation: Some(observation),
                horizon_over_tau: Some(e.horizon_over_tau.unwrap_or(5.0)),
                interval_steps: Some(e.interval_steps.unwrap_or(1)),
                action_low_over_j: Some(e.action_low_over_j.unwrap_or(-10.0)),
                action_high_over_j: Some(e.action_high_over_j.unwrap_or(10.0)),
                append_time: Some(e.append_time.unwrap_or(false)),
            });
            r.env_config()?.validate()?;
        }
        if matches!(task, Task::Train | Task::Evaluate) {
            let a = self.agent.clone().unwrap_or_default();
            let preset = a.config.clone().unwrap_or_else(|| "B".into());
            let defaults = PpoConfig::default();
            let (hidden, lr) = match preset.as_str() {
                "A" => (NetConfig::config_a().hidden, ppo::preset_learning_rate("A").unwrap()),
                "B" => (NetConfig::config_b().hidden, ppo::preset_learning_rate("B").unwrap()),
                "custom" => (
                    required(&a.hidden, "agent.hidden")?,
                    a.actor_lr
                        .ok_or_else(|| Error::config("agent.actor_lr", "required for a custom network"))?,
                ),
                other => {
                    return Err(Error::config(
                        "agent.config",
                        format!("expected `A`, `B` or `custom`, got `{other}`"),
                    ))
                }
            };
            if preset != "custom" && a.hidden.as_ref().is_some_and(|h| *h != hidden) {
                return Err(Error::config(
                    "agent.hidden",
                    format!("preset {preset} fixes the layers to {hidden:?}; use config = \"custom\""),
                ));
            }
            let actor_lr = a.actor_lr.unwrap_or(lr);
            r.agent = Some(AgentSection {
                config: Some(preset),
                hidden: Some(hidden),
                actor_lr: Some(actor_lr),
                critic_lr: Some(a.critic_lr.unwrap_or(actor_lr)),
                gamma: Some(a.gamma.unwrap_or(defaults.gamma)),
                lambda: Some(a.lambda.unwrap_or(defaults.lambda)),
                clip_epsilon: Some(a.clip_epsilon.unwrap_or(defaults.clip_epsilon)),
                epochs: Some(a.epochs.unwrap_or(defaults.epochs)),
                minibatches: Some(a.minibatches.unwrap_or(defaults.minibatches)),
                episodes: Some(a.episodes.unwrap_or(defaults.episodes)),
                entropy_coeff: Some(a.entropy_coeff.unwrap_or(defaults.entropy_coeff)),
                normalize_advantages: Some(a.normalize_advantages.unwrap_or(defaults.normalize_advantages)),
                max_grad_norm: Some(a.max_grad_norm.unwrap_or(0.5)),
                checkpoint_interval: Some(a.checkpoint_interval.unwrap_or(0)),
                seed: Some(a.seed.unwrap_or(0)),
            });
        }
        match task {
            Task::Evaluate => {
                let e = self.evaluate.clone().unwrap_or_default();
                r.evaluate = Some(EvaluateSection {
                    checkpoint: Some(required(&e.checkpoint, "evaluate.checkpoint")?),
                    episodes: Some(e.episodes.unwrap_or(100)),
                    deterministic: Some(e.deterministic.unwrap_or(false)),
                    horizon_over_tau: Some(
                        e.horizon_over_tau
                            .unwrap_or(r.env.as_ref().unwrap().horizon_over_tau.unwrap()),
                    ),
                    baseline_episodes: Some(e.baseline_episodes.unwrap_or(0)),
                });
            }
            Task::Protocol | Task::Spectrum => {
                let p = self.protocol.clone().unwrap_or_default();
                let kind = required(&p.kind, "protocol.kind")?;
                let mut out = ProtocolSection {
                    kind: Some(kind.clone()),
                    horizon_over_tau: Some(
                        p.horizon_over_tau
                            .unwrap_or(r.env.as_ref().unwrap().horizon_over_tau.unwrap()),
                    ),
                    seed: Some(p.seed.unwrap_or(0)),
                    ..ProtocolSection::default()
                };
                match kind.as_str() {
                    "constant" | "onsite_random" => {
                        out.delta_over_j = Some(required(&p.delta_over_j, "protocol.delta_over_j")?);
                        out.u_over_j = Some(required(&p.u_over_j, "protocol.u_over_j")?);
                    }
                    "tilt_perturbed" | "tilt_perturbed_onsite_random" => {
                        out.delta0_over_j = Some(p.delta0_over_j.unwrap_or(protocols::DELTA_0));
                        out.h_over_j = Some(required(&p.h_over_j, "protocol.h_over_j")?);
                        out.u_over_j = Some(required(&p.u_over_j, "protocol.u_over_j")?);
                    }
                    "checkpoint_policy" => out.checkpoint = Some(required(&p.checkpoint, "protocol.checkpoint")?),
                    other => return Err(Error::config("protocol.kind", format!("unknown protocol `{other}`"))),
                }
                r.protocol = Some(out);
            }
            Task::Sweep => {
                let s = self.sweep.clone().unwrap_or_default();
                let family: Family = required(&s.family, "sweep.family")?.parse()?;
                let axis1 = required(&s.axis1, "sweep.axis1")?;
                let axis2 = required(&s.axis2, "sweep.axis2")?;
                axis1.values("sweep.axis1")?;
                axis2.values("sweep.axis2")?;
                r.sweep = Some(SweepSection {
                    family: Some(family.name().into()),
                    axis1: Some(axis1),
                    axis2: Some(axis2),
                    z: Some(s.z.unwrap_or(if family.is_random() { 100 } else { 1 })),
                    seed: Some(s.seed.unwrap_or(0)),
                });
            }
            Task::TrotterCheck => {
                let t = self.trotter_check.clone().unwrap_or_default();
                let d = TrotterCheckConfig::default();
                r.trotter_check = Some(TrotterCheckSection {
                    sizes: Some(t.sizes.unwrap_or(d.sizes)),
                    drives: Some(t.drives.unwrap_or(d.drives)),
                    horizon_over_tau: Some(t.horizon_over_tau.unwrap_or(d.horizon)),
                    interval_over_tau: Some(t.interval_over_tau.unwrap_or(d.interval)),
                    rk4_dt_over_tau: Some(t.rk4_dt_over_tau.unwrap_or(d.rk4_dt)),
                    seed: Some(t.seed.unwrap_or(d.seed)),
                });
            }
            Task::Train => {}
        }
        r.validate(task)?;
        Ok(r)
    }

    fn validate(&self, task: Task) -> Result<()> {
        if task == Task::Train {
            self.ppo_config()?.validate()?;
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        let pick = [
            self.agent.as_ref().and_then(|a| a.seed),
            self.sweep.as_ref().and_then(|s| s.seed),
            self.protocol.as_ref().and_then(|p| p.seed),
            self.trotter_check.as_ref().and_then(|t| t.seed),
        ];
        pick.into_iter().flatten().next().unwrap_or(0)
    }

    /// Environment of a resolved run file.
    pub fn env_config(&self) -> Result<EnvConfig> {
        let m = self
            .model
            .as_ref()
            .ok_or_else(|| Error::config("model", "missing section"))?;
        let e = self
            .env
            .as_ref()
            .ok_or_else(|| Error::config("env", "missing section"))?;
        let pattern: SpinPattern = required(&m.pattern, "model.pattern")?.parse()?;
        Ok(EnvConfig {
            pattern,
            dt: required(&m.dt_over_tau, "model.dt_over_tau")?,
            horizon: required(&e.horizon_over_tau, "env.horizon_over_tau")?,
            observation: parse_observation(&required(&e.observation, "env.observation")?, e.n_sub)?,
            action_low: required(&e.action_low_over_j, "env.action_low_over_j")?,
            action_high: required(&e.action_high_over_j, "env.action_high_over_j")?,
            interval_steps: required(&e.interval_steps, "env.interval_steps")?,
            boundary: required(&m.boundary_sign, "model.boundary_sign")?,
            append_time: required(&e.append_time, "env.append_time")?,
        })
    }

    pub fn ppo_config(&self) -> Result<PpoConfig> {
        let a = self
            .agent
            .as_ref()
            .ok_or_else(|| Error::config("agent", "missing section"))?;
        let clip = required(&a.max_grad_norm, "agent.max_grad_norm")?;
        let every = required(&a.checkpoint_interval, "agent.checkpoint_interval")?;
        Ok(PpoConfig {
            gamma: required(&a.gamma, "agent.gamma")?,
            lambda: required(&a.lambda, "agent.lambda")?,
            clip_epsilon: required(&a.clip_epsilon, "agent.clip_epsilon")?,
            epochs: required(&a.epochs, "agent.epochs")?,
            minibatches: required(&a.minibatches, "agent.minibatches")?,
            actor_lr: required(&a.actor_lr, "agent.actor_lr")?,
            critic_lr: required(&a.critic_lr, "agent.critic_lr")?,
            episodes: required(&a.episodes, "agent.episodes")?,
            entropy_coeff: required(&a.entropy_coeff, "agent.entropy_coeff")?,
            normalize_advantages: required(&a.normalize_advantages, "agent.normalize_advantages")?,
            max_grad_norm: (clip > 0.0).then_some(clip),
            checkpoint_interval: (every > 0).then_some(every),
        })
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let a = self
            .agent
            .as_ref()
            .ok_or_else(|| Error::config("agent", "missing section"))?;
        Ok(NetConfig {
            hidden: required(&a.hidden, "agent.hidden")?,
        })
    }

    pub fn protocol_spec(&self) -> Result<ProtocolSpec> {
        let p = self
            .protocol
            .as_ref()
            .ok_or_else(|| Error::config("protocol", "missing section"))?;
        let kind = match required(&p.kind, "protocol.kind")?.as_str() {
            "constant" => ProtocolKind::Constant {
                delta: required(&p.delta_over_j, "protocol.delta_over_j")?,
                u: required(&p.u_over_j, "protocol.u_over_j")?,
            },
            "onsite_random" => ProtocolKind::OnsiteRandom {
                delta: required(&p.delta_over_j, "protocol.delta_over_j")?,
                u: required(&p.u_over_j, "protocol.u_over_j")?,
            },
            "tilt_perturbed" => ProtocolKind::TiltPerturbed {
                delta0: required(&p.delta0_over_j, "protocol.delta0_over_j")?,
                h: required(&p.h_over_j, "protocol.h_over_j")?,
                u: required(&p.u_over_j, "protocol.u_over_j")?,
            },
            "tilt_perturbed_onsite_random" => ProtocolKind::TiltPerturbedOnsiteRandom {
                delta0: required(&p.delta0_over_j, "protocol.delta0_over_j")?,
                h: required(&p.h_over_j, "protocol.h_over_j")?,
                u: required(&p.u_over_j, "protocol.u_over_j")?,
            },
            "checkpoint_policy" => ProtocolKind::CheckpointPolicy {
                path: required(&p.checkpoint, "protocol.checkpoint")?,
            },
            other => return Err(Error::config("protocol.kind", format!("unknown protocol `{other}`"))),
        };
        Ok(ProtocolSpec::new(
            kind,
            required(&p.horizon_over_tau, "protocol.horizon_over_tau")?,
            required(&p.seed, "protocol.seed")?,
        ))
    }
}

/// One-based line of `section.key` in `source`, if it appears there.
pub fn locate(source: &str, dotted: &str) -> Option<usize> {
    let (section, key) = dotted.rsplit_once('.').unwrap_or(("", dotted));
    let mut current = String::new();
    for (k, line) in source.lines().enumerate() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            if current == dotted {
                return Some(k + 1);
            }
            continue;
        }
        if current == section {
            if let Some((lhs, _)) = line.split_once('=') {
                if lhs.trim() == key {
                    return Some(k + 1);
                }
            }
        }
    }
    None
}

#[derive(Parser, Debug)]
#[command(
    name = "nonergodic",
    version,
    about = "Simulate and control the tilted Fermi-Hubbard ring"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a PPO agent.
    Train(RunArgs),
    /// Evaluate a checkpoint over independent episodes.
    Evaluate(RunArgs),
    /// Run one benchmark protocol.
    Protocol(RunArgs),
    /// Phase-diagram sweep over one action family.
    Sweep(RunArgs),
    /// Measure splitting errors against the RK4 reference.
    TrotterCheck(RunArgs),
    /// Fourier spectrum of a protocol's control trace.
    Spectrum(RunArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Run file (TOML).
    pub run_file: PathBuf,
    /// Override a key, e.g. `--set env.horizon_over_tau=10`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; defaults to `runs/<timestamp>-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the basis and hopping matrices.
    #[arg(long)]
    pub dump_matrices: bool,
    /// Suppress progress output.
    #[arg(long, short)]
    pub quiet: bool,
}

impl Command {
    fn split(&self) -> (Task, &RunArgs) {
        match self {
            Command::Train(a) => (Task::Train, a),
            Command::Evaluate(a) => (Task::Evaluate, a),
            Command::Protocol(a) => (Task::Protocol, a),
            Command::Sweep(a) => (Task::Sweep, a),
            Command::TrotterCheck(a) => (Task::TrotterCheck, a),
            Command::Spectrum(a) => (Task::Spectrum, a),
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Usage(_) | Error::Validation(_) | Error::Lookup(_) | Error::Shape(_) => 2,
        Error::MissingArtifact { .. } | Error::Checkpoint(_) => 3,
        Error::Numerical(_) => 4,
        Error::Io(_) | Error::Csv(_) => 1,
    }
}

fn describe(err: &Error, path: &Path, source: &str) -> String {
    match err {
        Error::Config { field, message } => match locate(source, field) {
            Some(line) => format!("{}:{line}: {field}: {message}", path.display()),
            None => format!("{}: {field}: {message}", path.display()),
        },
        other => other.to_string(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_matrices(env: &EnvConfig, out: &Path) -> Result<()> {
    let basis = FockBasis::new(env.lattice_size(), env.pattern.n_up(), env.pattern.n_down())?;
    fs::write(out.join("basis.txt"), basis.serialize_tuples())?;
    for (spin, name) in [(Spin::Up, "hopping_up.csv"), (Spin::Down, "hopping_down.csv")] {
        let h = HoppingMatrix::build(&basis, spin, env.boundary);
        let mut w = create(&out.join(name))?;
        h.write_triplets(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn log(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

/// Runs a resolved command into `out`.
pub fn execute(task: Task, run: &RunFile, out: &Path, quiet: bool) -> Result<()> {
    match task {
        Task::Train => {
            let env = run.env_config()?;
            let ppo = run.ppo_config()?;
            let episodes = ppo.episodes;
            let mut trainer = Trainer::new(env, ppo, &run.net_config()?, run.seed())?;
            trainer.train(|ckpt| {
                log(quiet, format!("episode {}: checkpoint", ckpt.episode));
                ckpt.save(&out.join(format!("checkpoint_ep{:06}.bin", ckpt.episode)))
            })?;
            let report = trainer.report();
            if let Some(last) = report.rows.last() {
                log(
                    quiet,
                    format!(
                        "{episodes} episodes, {} env steps; last-10 mean metric {:.4}",
                        last.env_steps,
                        report.tail_mean(10, |r| r.mean_metric)
                    ),
                );
            }
            report.write_csv(create(&out.join("report.csv"))?)?;
            trainer.checkpoint().save(&out.join("checkpoint.bin"))?;
        }
        Task::Evaluate => {
            let e = run.evaluate.as_ref().unwrap();
            let env = EnvConfig {
                horizon: e.horizon_over_tau.unwrap(),
                ..run.env_config()?
            };
            let ckpt = Checkpoint::load(e.checkpoint.as_ref().unwrap())?;
            let mode = if e.deterministic.unwrap() {
                ActionMode::Mean
            } else {
                ActionMode::Sample
            };
            let eval = ppo::evaluate_policy(&ckpt.agent, &env, e.episodes.unwrap(), mode, run.seed())?;
            eval.write_csv(create(&out.join("evaluation.csv"))?)?;
            write_episodes(&out.join("episodes.csv"), &eval.episodes)?;
            log(
                quiet,
                format!(
                    "mean metric {:.4}, mean full fidelity {:.4}, mean reward {:.4}",
                    eval.mean_metric(),
                    eval.mean_full_fidelity(),
                    eval.mean_reward()
                ),
            );
            let baseline = e.baseline_episodes.unwrap();
            if baseline > 0 {
                let base = ppo::random_baseline(&env, baseline, run.seed())?;
                write_episodes(&out.join("baseline.csv"), &base)?;
            }
        }
        Task::Protocol => {
            let protocol = protocols::run_protocol(&run.protocol_spec()?, &run.env_config()?)?;
            for s in &protocol.series {
                s.save(&out.join(format!("{}.csv", s.name())))?;
            }
            write_drive(&out.join("drive.csv"), &protocol.schedule)?;
            for s in &protocol.series {
                log(quiet, format!("{:>20}: time average {:.5}", s.name(), s.time_average()));
            }
        }
        Task::Spectrum => {
            let protocol =
                protocols::run_protocol_with(&run.protocol_spec()?, &run.env_config()?, &[Metric::FullFidelity])?;
            let spectrum = protocols::action_spectrum(&protocol.schedule)?;
            spectrum.write_csv(create(&out.join("spectrum.csv"))?)?;
            let mut w = csv::Writer::from_writer(create(&out.join("spectrum_summary.csv"))?);
            w.write_record(["channel", "dominance", "dc_fraction"])?;
            for (name, c) in [("delta", &spectrum.delta), ("u", &spectrum.u)] {
                w.write_record([
                    name.to_string(),
                    format!("{:.6e}", c.dominance),
                    format!("{:.6e}", c.dc_fraction),
                ])?;
                log(
                    quiet,
                    format!("{name}: dominance {:.3}, dc fraction {:.3}", c.dominance, c.dc_fraction),
                );
            }
            w.flush()?;
        }
        Task::Sweep => {
            let s = run.sweep.as_ref().unwrap();
            let family: Family = s.family.as_ref().unwrap().parse()?;
            let grid = protocols::phase_diagram(
                family,
                &s.axis1.as_ref().unwrap().values("sweep.axis1")?,
                &s.axis2.as_ref().unwrap().values("sweep.axis2")?,
                s.z.unwrap(),
                &run.env_config()?,
                s.seed.unwrap(),
            )?;
            grid.write_csv(create(&out.join("grid.csv"))?)?;
            log(quiet, format!("{} cells written", grid.cells.len()));
        }
        Task::TrotterCheck => {
            let t = run.trotter_check.as_ref().unwrap();
            let config = TrotterCheckConfig {
                sizes: t.sizes.clone().unwrap(),
                drives: t.drives.clone().unwrap(),
                horizon: t.horizon_over_tau.unwrap(),
                interval: t.interval_over_tau.unwrap(),
                rk4_dt: t.rk4_dt_over_tau.unwrap(),
                seed: t.seed.unwrap(),
            };
            let report = protocols::trotter_check(&config)?;
            report.write_csv(create(&out.join("trotter_check.csv"))?)?;
            for r in report.rows.iter().filter(|r| r.p == "L2") {
                log(
                    quiet,
                    format!(
                        "N={} {:<24} {:<14} L2 n200 {:.3e} n400 {:.3e} ratio {:.3}",
                        r.n, r.protocol, r.metric, r.norm_trotter_vs_rk4_n200, r.norm_trotter_vs_rk4_n400, r.ratio
                    ),
                );
            }
        }
    }
    Ok(())
}

fn write_episodes(path: &Path, episodes: &[crate::env::EpisodeMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["episode", "mean_metric", "mean_full_fidelity", "mean_reward"])?;
    for (k, e) in episodes.iter().enumerate() {
        w.write_record([
            k.to_string(),
            format!("{:.11e}", e.mean_metric),
            format!("{:.11e}", e.mean_full_fidelity),
            format!("{:.11e}", e.mean_reward),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_drive(path: &Path, schedule: &crate::propagator::DriveSchedule) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["t", "delta_over_j", "u_over_j"])?;
    for (k, a) in schedule.samples().iter().enumerate() {
        w.write_record([
            format!("{:.11e}", k as f64 * schedule.interval()),
            format!("{:.11e}", a.delta),
            format!("{:.11e}", a.u),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses, resolves, echoes and executes one command. Returns the output
/// directory.
pub fn run_command(command: &Command) -> std::result::Result<PathBuf, (i32, String)> {
    let (task, args) = command.split();
    let fail = |e: Error, source: &str| (exit_code(&e), describe(&e, &args.run_file, source));
    let source = fs::read_to_string(&args.run_file).map_err(|e| {
        let err = Error::MissingArtifact {
            path: args.run_file.clone(),
            message: e.to_string(),
        };
        (exit_code(&err), err.to_string())
    })?;
    let resolved = RunFile::parse_with_overrides(&source, &args.set)
        .and_then(|r| r.resolve(task))
        .map_err(|e| fail(e, &source))?;
    let echo = resolved.to_toml();
    let out = args.out.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "{}-seed{}",
            chrono::Local::now().format("%Y%m%d-%H%M%S"),
            resolved.seed()
        ))
    });
    let io = |e: std::io::Error| fail(e.into(), &source);
    fs::create_dir_all(&out).map_err(io)?;
    fs::write(out.join("resolved.toml"), &echo).map_err(io)?;
    if !args.quiet {
        println!("# {} -> {}\n{echo}", task.name(), out.display());
    }
    if args.dump_matrices && task.uses_model() {
        write_matrices(&resolved.env_config().map_err(|e| fail(e, &source))?, &out).map_err(|e| fail(e, &source))?;
    }
    execute(task, &resolved, &out, args.quiet).map_err(|e| fail(e, &source))?;
    Ok(out)
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_command(&cli.command) {
        Ok(_) => 0,
        Err((code, message)) => {
            eprintln!("error: {message}");
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRAIN: &str = r#"
[model]
pattern = "-+-"

[env]
horizon_over_tau = 0.05

[agent]
config = "B"
episodes = 2
"#;

    #[test]
    fn presets_expand() {
        let b = RunFile::parse(TRAIN).unwrap().resolve(Task::Train).unwrap();
        let agent = b.agent.as_ref().unwrap();
        assert_eq!(agent.hidden.as_deref(), Some(&[128, 64, 32][..]));
        assert_eq!(agent.actor_lr, Some(5e-4));
        let a = RunFile::parse_with_overrides(TRAIN, &["agent.config=\"A\"".into()])
            .unwrap()
            .resolve(Task::Train)
            .unwrap();
        assert_eq!(a.agent.as_ref().unwrap().hidden.as_deref(), Some(&[256, 128, 64][..]));
        assert_eq!(a.agent.as_ref().unwrap().actor_lr, Some(1e-4));
    }

    #[test]
    fn echo_reparses_identically() {
        let r = RunFile::parse(TRAIN).unwrap().resolve(Task::Train).unwrap();
        let again = RunFile::parse(&r.to_toml()).unwrap();
        assert_eq!(again, r);
        assert_eq!(again.resolve(Task::Train).unwrap(), r);
        assert_eq!(r.env_config().unwrap().lattice_size(), 6);
    }

    #[test]
    fn missing_pattern_is_a_config_error() {
        let err = RunFile::parse("[env]\nhorizon_over_tau = 1.0\n")
            .unwrap()
            .resolve(Task::Protocol)
            .unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("model.pattern"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunFile::parse("[model]\npattern = \"-+\"\ndelta = 3\n").unwrap_err();
        assert!(err.to_string().contains("delta"), "{err}");
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(RunFile::parse("[bogus]\nx = 1\n").is_err());
    }

    #[test]
    fn errors_point_at_lines() {
        let src = "[model]\npattern = \"-+\"\n\n[env]\nhorizon_over_tau = 0.0123\n";
        let err = RunFile::parse(src).unwrap().resolve(Task::Protocol).unwrap_err();
        let msg = describe(&err, Path::new("run.toml"), src);
        assert!(msg.starts_with("run.toml:5: env.horizon_over_tau"), "{msg}");
        assert_eq!(locate(src, "model.pattern"), Some(2));
        assert_eq!(locate(src, "env"), Some(4));
    }

    #[test]
    fn overrides_and_task_mismatch() {
        let r = RunFile::parse_with_overrides(
            TRAIN,
            &["env.horizon_over_tau=0.1".into(), "model.boundary_sign=none".into()],
        )
        .unwrap()
        .resolve(Task::Train)
        .unwrap();
        assert_eq!(r.env.as_ref().unwrap().horizon_over_tau, Some(0.1));
        assert_eq!(r.model.as_ref().unwrap().boundary_sign, Some(BoundarySign::None));
        assert!(RunFile::parse_with_overrides(TRAIN, &["nokey".into()]).is_err());
        let mismatch = RunFile::parse_with_overrides(TRAIN, &["task.kind=\"sweep\"".into()]).unwrap();
        assert!(mismatch.resolve(Task::Train).is_err());
    }

    #[test]
    fn sweep_axes() {
        let src = "[model]\npattern = \"-+\"\n[sweep]\nfamily = \"delta_u\"\naxis1 = { start = 0.0, stop = 10.0, step = 0.5 }\naxis2 = [0.0, 10.0]\n";
        let r = RunFile::parse(src).unwrap().resolve(Task::Sweep).unwrap();
        let s = r.sweep.as_ref().unwrap();
        assert_eq!(s.axis1.as_ref().unwrap().values("a").unwrap().len(), 21);
        assert_eq!(s.z, Some(1));
        let empty = src.replace("[0.0, 10.0]", "[]");
        let err = RunFile::parse(&empty).unwrap().resolve(Task::Sweep).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Numerical("nan".into())), 4);
        assert_eq!(
            exit_code(&Error::MissingArtifact {
                path: "x".into(),
                message: "gone".into()
            }),
            3
        );
        assert_eq!(main_with_args(["nonergodic", "frobnicate"]), 2);
    }
}
