//! Benchmark drive protocols and their analyses.
//!
//! Constant drives reproduce the Wannier-Stark, scar and thermal regimes.
//! Randomised drives redraw `w(t) ∈ [-1, 0]` and `w'(t) ∈ [-1, 1]` every
//! control interval and give `Δ(t) = Δ₀ + h w(t)` and `U(t) = U w'(t)`.
//! Phase-diagram sweeps average `⟨𝓕⟩_𝒯` over random realizations, each with
//! its own seed, so grids do not depend on scheduling. The spectral tools
//! extract Bloch and envelope periods from metric series and Fourier
//! dominance from control traces.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::fock::StateMatrix;
use crate::hamiltonian::ControlAction;
use crate::observables::Metric;
use crate::ppo::{collect_rollout, sub_seed, ActionMode, Checkpoint};
use crate::propagator::{evolve, lp_error, rk4_evolve, Chain, DriveSchedule, Evolution, MetricSeries, Norm};

/// Tilt around which the perturbed families are centred.
pub const DELTA_0: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolKind {
    Constant {
        delta: f64,
        u: f64,
    },
    /// `Δ(t) = Δ₀ + h w(t)`, constant `U`.
    TiltPerturbed {
        delta0: f64,
        h: f64,
        u: f64,
    },
    /// Constant `Δ`, `U(t) = U w'(t)`.
    OnsiteRandom {
        delta: f64,
        u: f64,
    },
    /// `Δ(t) = Δ₀ + h w(t)`, `U(t) = U w'(t)`.
    TiltPerturbedOnsiteRandom {
        delta0: f64,
        h: f64,
        u: f64,
    },
    /// Replays the mean action of a trained policy.
    CheckpointPolicy {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub horizon: f64,
    pub seed: u64,
}

impl ProtocolSpec {
    pub fn new(kind: ProtocolKind, horizon: f64, seed: u64) -> Self {
        ProtocolSpec { kind, horizon, seed }
    }

    /// Drive for a non-policy protocol. Random draws come from `seed`, one
    /// `w` then one `w'` per interval; random drives are clipped to the
    /// action bounds of `env`.
    pub fn schedule(&self, env: &EnvConfig) -> Result<DriveSchedule> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = (env.action_low, env.action_high);
        let mut draw = move |tilt: Option<(f64, f64)>, onsite: Option<f64>| {
            let w: f64 = rng.random_range(-1.0..=0.0);
            let w2: f64 = rng.random_range(-1.0..=1.0);
            (tilt.map(|(d0, h)| d0 + h * w), onsite.map(|u| u * w2))
        };
        let drive = |delta: f64, u: f64| ControlAction::new(delta, u).clipped(lo, hi);
        let (n, dt) = (env.interval_steps, env.dt);
        match self.kind {
            ProtocolKind::Constant { delta, u } => {
                DriveSchedule::constant(ControlAction::new(delta, u), self.horizon, n, dt)
            }
            ProtocolKind::TiltPerturbed { delta0, h, u } => DriveSchedule::sampled(self.horizon, n, dt, |_, _| {
                drive(draw(Some((delta0, h)), None).0.unwrap(), u)
            }),
            ProtocolKind::OnsiteRandom { delta, u } => {
                DriveSchedule::sampled(self.horizon, n, dt, |_, _| drive(delta, draw(None, Some(u)).1.unwrap()))
            }
            ProtocolKind::TiltPerturbedOnsiteRandom { delta0, h, u } => {
                DriveSchedule::sampled(self.horizon, n, dt, |_, _| {
                    let (d, v) = draw(Some((delta0, h)), Some(u));
                    drive(d.unwrap(), v.unwrap())
                })
            }
            ProtocolKind::CheckpointPolicy { .. } => Err(Error::Usage(
                "a checkpoint protocol has no fixed schedule; use run_protocol".into(),
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub schedule: DriveSchedule,
    pub series: Vec<MetricSeries>,
}

impl ProtocolRun {
    pub fn get(&self, metric: Metric) -> Option<&MetricSeries> {
        self.series.iter().find(|s| s.metric == metric)
    }
}

fn initial_state(chain: &Chain, env: &EnvConfig) -> Result<StateMatrix> {
    StateMatrix::from_pattern(chain.basis().clone(), &env.pattern)
}

/// Evolves the protocol on the chain of `env` and records fidelity,
/// imbalance (total and per spin) and half-chain entropy.
pub fn run_protocol(spec: &ProtocolSpec, env: &EnvConfig) -> Result<ProtocolRun> {
    run_protocol_with(spec, env, &Metric::PROTOCOL_SET)
}

pub fn run_protocol_with(spec: &ProtocolSpec, env: &EnvConfig, metrics: &[Metric]) -> Result<ProtocolRun> {
    let config = EnvConfig {
        horizon: spec.horizon,
        ..env.clone()
    };
    let mut environment = Env::new(config.clone())?;
    let schedule = match &spec.kind {
        ProtocolKind::CheckpointPolicy { path } => {
            let ckpt = Checkpoint::load(path)?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let rollout = collect_rollout(&mut environment, &ckpt.agent, ActionMode::Mean, &mut rng)?;
            DriveSchedule::new(rollout.trajectory.actions, config.interval_steps, config.dt)?
        }
        _ => spec.schedule(&config)?,
    };
    let chain = environment.chain().clone();
    let stepper = Arc::new(chain.stepper(config.dt)?);
    let initial = initial_state(&chain, &config)?;
    let evolved = evolve(&initial, &chain, &stepper, &schedule, metrics)?;
    Ok(ProtocolRun {
        schedule,
        series: evolved.series,
    })
}

/// The four action pairs of the phase diagram.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `(Δ, U w'(t))`; axes `Δ`, `U`.
    DeltaOnsiteRandom,
    /// `(Δ, U)`; axes `Δ`, `U`.
    DeltaU,
    /// `(Δ₀ + h w(t), U)`; axes `h`, `U`.
    TiltPerturbedU,
    /// `(Δ₀ + h w(t), U w'(t))`; axes `h`, `U`.
    TiltPerturbedOnsiteRandom,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::DeltaOnsiteRandom,
        Family::DeltaU,
        Family::TiltPerturbedU,
        Family::TiltPerturbedOnsiteRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::DeltaOnsiteRandom => "delta_onsite_random",
            Family::DeltaU => "delta_u",
            Family::TiltPerturbedU => "tilt_perturbed_u",
            Family::TiltPerturbedOnsiteRandom => "tilt_perturbed_onsite_random",
        }
    }

    pub fn is_random(self) -> bool {
        self != Family::DeltaU
    }

    pub fn axis_names(self) -> (&'static str, &'static str) {
        match self {
            Family::DeltaOnsiteRandom | Family::DeltaU => ("delta_over_j", "u_over_j"),
            _ => ("h_over_j", "u_over_j"),
        }
    }

    pub fn protocol(self, a1: f64, a2: f64) -> ProtocolKind {
        match self {
            Family::DeltaOnsiteRandom => ProtocolKind::OnsiteRandom { delta: a1, u: a2 },
            Family::DeltaU => ProtocolKind::Constant { delta: a1, u: a2 },
            Family::TiltPerturbedU => ProtocolKind::TiltPerturbed {
                delta0: DELTA_0,
                h: a1,
                u: a2,
            },
            Family::TiltPerturbedOnsiteRandom => ProtocolKind::TiltPerturbedOnsiteRandom {
                delta0: DELTA_0,
                h: a1,
                u: a2,
            },
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !"() ".contains(*c))
            .collect::<String>()
            .to_lowercase();
        match key.as_str() {
            "delta_onsite_random" | "delta,uw'" | "delta,u_w" => Ok(Family::DeltaOnsiteRandom),
            "delta_u" | "delta,u" => Ok(Family::DeltaU),
            "tilt_perturbed_u" | "delta0+hw,u" => Ok(Family::TiltPerturbedU),
            "tilt_perturbed_onsite_random" | "delta0+hw,uw'" => Ok(Family::TiltPerturbedOnsiteRandom),
            _ => Err(Error::config(
                "sweep.family",
                format!("unknown family `{s}`; expected one of delta_onsite_random, delta_u, tilt_perturbed_u, tilt_perturbed_onsite_random"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub axis1: f64,
    pub axis2: f64,
    pub mean_fidelity: f64,
    pub std_fidelity: f64,
    #[serde(rename = "Z")]
    pub z: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseDiagramGrid {
    pub family: Family,
    pub axis1: Vec<f64>,
    pub axis2: Vec<f64>,
    /// Row-major over `axis1`, then `axis2`.
    pub cells: Vec<GridCell>,
}

impl PhaseDiagramGrid {
    pub fn cell(&self, a1: f64, a2: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.axis1 == a1 && c.axis2 == a2)
    }

    /// `axis1,axis2,mean_fidelity,std_fidelity,Z`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["axis1", "axis2", "mean_fidelity", "std_fidelity", "Z"])?;
        for c in &self.cells {
            out.write_record([
                format!("{}", c.axis1),
                format!("{}", c.axis2),
                format!("{:.11e}", c.mean_fidelity),
                format!("{:.11e}", c.std_fidelity),
                c.z.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `⟨𝓕⟩_𝒯` for every cell, averaged over `z` realizations for random
/// families (deterministic families use one). Realization `r` of cell `c`
/// draws from `sub_seed(seed, c, r)`.
pub fn phase_diagram(
    family: Family,
    axis1: &[f64],
    axis2: &[f64],
    z: usize,
    env: &EnvConfig,
    seed: u64,
) -> Result<PhaseDiagramGrid> {
    if axis1.is_empty() || axis2.is_empty() {
        return Err(Error::config("sweep.axis1", "axes must be nonempty"));
    }
    if z == 0 {
        return Err(Error::config("sweep.z", "must be at least 1"));
    }
    env.episode_len()?;
    let z = if family.is_random() { z } else { 1 };
    let probe = Env::new(env.clone())?;
    let chain = probe.chain().clone();
    let stepper = Arc::new(chain.stepper(env.dt)?);
    let initial = initial_state(&chain, env)?;
    let cells: Vec<(f64, f64)> = axis1.iter().flat_map(|&a| axis2.iter().map(move |&b| (a, b))).collect();
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..z).map(move |r| (c, r))).collect();
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let (a1, a2) = cells[c];
            let spec = ProtocolSpec::new(family.protocol(a1, a2), env.horizon, sub_seed(seed, c as u64, r as u64));
            let schedule = spec.schedule(env)?;
            let run = evolve(&initial, &chain, &stepper, &schedule, &[Metric::FullFidelity])?;
            Ok(run.series[0].time_average())
        })
        .collect::<Result<_>>()?;
    let cells = cells
        .iter()
        .enumerate()
        .map(|(c, &(a1, a2))| {
            let v = &values[c * z..(c + 1) * z];
            let mean = v.iter().sum::<f64>() / z as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / z as f64;
            GridCell {
                axis1: a1,
                axis2: a2,
                mean_fidelity: mean,
                std_fidelity: var.sqrt(),
                z,
            }
        })
        .collect();
    Ok(PhaseDiagramGrid {
        family,
        axis1: axis1.to_vec(),
        axis2: axis2.to_vec(),
        cells,
    })
}

/// Inclusive arithmetic range, as used for sweep axes.
pub fn linspace_step(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || stop < start {
        return Err(Error::config(
            "sweep.axis1",
            format!("bad range {start}..{stop} step {step}"),
        ));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| start + k as f64 * step).collect())
}

fn power_spectrum(signal: &[f64], padded: usize) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    buf.resize(padded, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(padded).process(&mut buf);
    buf[..padded / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// Frequency of the largest bin in `[lo, hi)` with parabolic refinement.
fn peak_frequency(power: &[f64], df: f64, lo: usize, hi: usize) -> Option<f64> {
    let hi = hi.min(power.len());
    if lo >= hi {
        return None;
    }
    let k = (lo..hi).max_by(|&a, &b| power[a].total_cmp(&power[b]))?;
    if power[k] <= 0.0 {
        return None;
    }
    let mut offset = 0.0;
    if k > 0 && k + 1 < power.len() {
        let (a, b, c) = (power[k - 1].ln(), power[k].ln(), power[k + 1].ln());
        let denom = a - 2.0 * b + c;
        if denom.is_finite() && denom.abs() > 0.0 {
            offset = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
        }
    }
    Some((k as f64 + offset) * df)
}

/// Magnitude of the analytic signal, from discarding negative frequencies.
pub fn analytic_envelope(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let weight = if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
            1.0
        } else if k < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *c *= weight;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.norm() / n as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlochEstimate {
    /// `2π / Δ`.
    pub expected_period: f64,
    /// Period of the dominant oscillation.
    pub bloch_period: f64,
    /// Period of the strongest modulation of the envelope, if any.
    pub envelope_period: Option<f64>,
}

impl BlochEstimate {
    pub fn relative_error(&self) -> f64 {
        (self.bloch_period - self.expected_period).abs() / self.expected_period
    }
}

const PAD_FACTOR: usize = 16;

/// Dominant period of `series` and of its envelope. The carrier search
/// skips frequencies below three cycles per series. The envelope peak is
/// searched between one cycle per series and half the carrier frequency, so
/// the series must cover a full envelope period for it to be meaningful.
pub fn bloch_analysis(series: &MetricSeries, delta: f64) -> Result<BlochEstimate> {
    let expected = 2.0 * std::f64::consts::PI / delta.abs();
    let spacing = series
        .spacing()
        .ok_or_else(|| Error::Validation("series has fewer than two samples".into()))?;
    let span = series.horizon() - series.times[0];
    if !(span >= 3.0 * expected) {
        return Err(Error::Validation(format!(
            "series spans {span:.4}τ, fewer than three Bloch periods of {expected:.4}τ"
        )));
    }
    let mean = series.mean();
    let centred: Vec<f64> = series.values.iter().map(|v| v - mean).collect();
    let padded = (centred.len() * PAD_FACTOR).next_power_of_two();
    let df = 1.0 / (padded as f64 * spacing);
    let power = power_spectrum(&centred, padded);
    let lo = (3.0 / span / df).ceil() as usize;
    let f_bloch = peak_frequency(&power, df, lo, power.len())
        .ok_or_else(|| Error::Numerical("series has no oscillating component".into()))?;

    let envelope = analytic_envelope(&centred);
    let env_mean = envelope.iter().sum::<f64>() / envelope.len() as f64;
    let env_centred: Vec<f64> = envelope.iter().map(|v| v - env_mean).collect();
    let env_power = power_spectrum(&env_centred, padded);
    let env_lo = (1.0 / span / df).ceil() as usize;
    let env_hi = (0.5 * f_bloch / df).floor() as usize;
    let envelope_period = peak_frequency(&env_power, df, env_lo, env_hi).map(|f| 1.0 / f);
    Ok(BlochEstimate {
        expected_period: expected,
        bloch_period: 1.0 / f_bloch,
        envelope_period,
    })
}

/// Power spectrum of one control channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSpectrum {
    pub frequencies: Vec<f64>,
    pub power: Vec<f64>,
    /// Largest over median power of the nonzero frequencies; zero when they
    /// carry no power.
    pub dominance: f64,
    pub dc_fraction: f64,
}

impl ChannelSpectrum {
    fn from_signal(signal: &[f64], dt: f64) -> Self {
        let n = signal.len();
        let power = power_spectrum(signal, n);
        let frequencies = (0..power.len()).map(|k| k as f64 / (n as f64 * dt)).collect();
        let total: f64 = power.iter().sum();
        let ac = &power[1..];
        let peak = ac.iter().copied().fold(0.0, f64::max);
        let mut sorted = ac.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if sorted.is_empty() {
            0.0
        } else if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        let tiny = 1e-20 * total.max(f64::MIN_POSITIVE);
        let dominance = if peak <= tiny { 0.0 } else { peak / median.max(tiny) };
        let dc_fraction = if total > 0.0 { power[0] / total } else { 1.0 };
        ChannelSpectrum {
            frequencies,
            power,
            dominance,
            dc_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpectrum {
    pub delta: ChannelSpectrum,
    pub u: ChannelSpectrum,
}

impl ActionSpectrum {
    /// `frequency,power_delta,power_u`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["frequency", "power_delta", "power_u"])?;
        for k in 0..self.delta.power.len() {
            out.write_record([
                format!("{:.11e}", self.delta.frequencies[k]),
                format!("{:.11e}", self.delta.power[k]),
                format!("{:.11e}", self.u.power[k]),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn action_spectrum(schedule: &DriveSchedule) -> Result<ActionSpectrum> {
    if schedule.is_empty() {
        return Err(Error::Validation("empty control trace".into()));
    }
    let dt = schedule.interval();
    Ok(ActionSpectrum {
        delta: ChannelSpectrum::from_signal(&schedule.channel(|a| a.delta), dt),
        u: ChannelSpectrum::from_signal(&schedule.channel(|a| a.u), dt),
    })
}

/// Local maxima above `threshold` after the series first drops below it.
pub fn revivals(series: &MetricSeries, threshold: f64) -> Vec<(f64, f64)> {
    let v = &series.values;
    let Some(first_low) = v.iter().position(|&x| x < threshold) else {
        return Vec::new();
    };
    (first_low.max(1)..v.len().saturating_sub(1))
        .filter(|&k| v[k] > threshold && v[k] > v[k - 1] && v[k] >= v[k + 1])
        .map(|k| (series.times[k], v[k]))
        .collect()
}

/// The three drives of the splitting-error check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckDrive {
    /// `Δ = 10 sin 2πt`, `U = 10 cos 2πt`.
    Periodic,
    /// `Δ` and `U` uniform in `[-10, 10]`.
    Random,
    /// `Δ = -10`, `U` uniform in `[-10, 10]`.
    ConstantTiltRandomU,
}

impl CheckDrive {
    pub const ALL: [CheckDrive; 3] = [
        CheckDrive::Periodic,
        CheckDrive::Random,
        CheckDrive::ConstantTiltRandomU,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckDrive::Periodic => "periodic",
            CheckDrive::Random => "random",
            CheckDrive::ConstantTiltRandomU => "constant_tilt_random_u",
        }
    }

    /// Piecewise-constant drive on intervals of `interval`, one product
    /// step each.
    pub fn schedule(self, horizon: f64, interval: f64, seed: u64) -> Result<DriveSchedule> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = 2.0 * std::f64::consts::PI;
        DriveSchedule::sampled(horizon, 1, interval, |_, t| match self {
            CheckDrive::Periodic => ControlAction::new(10.0 * (tau * t).sin(), 10.0 * (tau * t).cos()),
            CheckDrive::Random => ControlAction::new(rng.random_range(-10.0..=10.0), rng.random_range(-10.0..=10.0)),
            CheckDrive::ConstantTiltRandomU => ControlAction::new(-10.0, rng.random_range(-10.0..=10.0)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrotterCheckConfig {
    pub sizes: Vec<usize>,
    pub drives: Vec<CheckDrive>,
    pub horizon: f64,
    /// Control interval of the drive; also the coarse product step.
    pub interval: f64,
    pub rk4_dt: f64,
    pub seed: u64,
}

impl Default for TrotterCheckConfig {
    fn default() -> Self {
        TrotterCheckConfig {
            sizes: vec![6, 8],
            drives: CheckDrive::ALL.to_vec(),
            horizon: 10.0,
            interval: 0.005,
            rk4_dt: 1e-4,
            seed: 0,
        }
    }
}

/// One norm for one metric of one drive.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrotterRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub protocol: &'static str,
    pub metric: &'static str,
    pub p: String,
    pub norm_trotter_vs_rk4_n200: f64,
    pub norm_trotter_vs_rk4_n400: f64,
    pub ratio: f64,
    /// Largest change of `‖ψ‖²` over one product step, either resolution.
    pub max_step_norm_drift: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrotterReport {
    pub rows: Vec<TrotterRow>,
}

impl TrotterReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record([
            "N",
            "protocol",
            "metric",
            "p",
            "norm_trotter_vs_rk4_n200",
            "norm_trotter_vs_rk4_n400",
            "ratio",
            "max_step_norm_drift",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.n.to_string(),
                r.protocol.to_string(),
                r.metric.to_string(),
                r.p.clone(),
                format!("{:.11e}", r.norm_trotter_vs_rk4_n200),
                format!("{:.11e}", r.norm_trotter_vs_rk4_n400),
                format!("{:.11e}", r.ratio),
                format!("{:.3e}", r.max_step_norm_drift),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn find(&self, n: usize, drive: CheckDrive, metric: Metric, norm: Norm) -> Option<&TrotterRow> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.protocol == drive.name() && r.metric == metric.name() && r.p == norm.label())
    }
}

/// Trotter evolution sampled every interval, tracking the per-step norm.
fn trotter_with_drift(
    initial: &StateMatrix,
    chain: &Arc<Chain>,
    schedule: &DriveSchedule,
    metrics: &[Metric],
) -> Result<(Vec<MetricSeries>, f64)> {
    let stepper = Arc::new(chain.stepper(schedule.step_dt())?);
    let observer = crate::observables::Observer::new(initial.clone(), metrics)?;
    let mut series: Vec<MetricSeries> = metrics.iter().map(|&m| MetricSeries::new(m)).collect();
    let mut record = |t: f64, state: &StateMatrix| -> Result<()> {
        for (s, v) in series.iter_mut().zip(observer.observe(state)?) {
            s.times.push(t);
            s.values.push(v);
        }
        Ok(())
    };
    record(0.0, initial)?;
    let mut evolution = Evolution::new(chain.clone(), stepper, initial)?;
    let mut last = evolution.norm_sqr();
    let mut drift = 0.0f64;
    for (k, &action) in schedule.samples().iter().enumerate() {
        for _ in 0..schedule.interval_steps() {
            evolution.advance(action, 1)?;
            let now = evolution.norm_sqr();
            drift = drift.max((now - last).abs());
            last = now;
        }
        record((k + 1) as f64 * schedule.interval(), &evolution.state())?;
    }
    Ok((series, drift))
}

/// Splitting error against RK4 at `n = 1/interval` and `2/interval` product
/// steps per τ, for fidelity and imbalance.
pub fn trotter_check(config: &TrotterCheckConfig) -> Result<TrotterReport> {
    let metrics = [Metric::FullFidelity, Metric::Imbalance];
    let jobs: Vec<(usize, CheckDrive)> = config
        .sizes
        .iter()
        .flat_map(|&n| config.drives.iter().map(move |&d| (n, d)))
        .collect();
    let results: Vec<Vec<TrotterRow>> = jobs
        .par_iter()
        .map(|&(n, drive)| {
            let basis = Arc::new(crate::fock::FockBasis::half_filled(n)?);
            let chain = Arc::new(Chain::new(basis.clone(), crate::hamiltonian::BoundarySign::Fermionic));
            let initial = StateMatrix::from_pattern(basis, &crate::fock::SpinPattern::minus_plus(n))?;
            let coarse = drive.schedule(config.horizon, config.interval, config.seed)?;
            let fine = coarse.refined(2)?;
            let oracle = rk4_evolve(&initial, &chain, &coarse, config.rk4_dt, &metrics)?;
            let (s200, d200) = trotter_with_drift(&initial, &chain, &coarse, &metrics)?;
            let (s400, d400) = trotter_with_drift(&initial, &chain, &fine, &metrics)?;
            let mut rows = Vec::new();
            for (k, metric) in metrics.iter().enumerate() {
                for norm in Norm::STANDARD {
                    let e200 = lp_error(&s200[k], &oracle.series[k], norm)?;
                    let e400 = lp_error(&s400[k], &oracle.series[k], norm)?;
                    rows.push(TrotterRow {
                        n,
                        protocol: drive.name(),
                        metric: metric.name(),
                        p: norm.label(),
                        norm_trotter_vs_rk4_n200: e200,
                        norm_trotter_vs_rk4_n400: e400,
                        ratio: e200 / e400,
                        max_step_norm_drift: d200.max(d400),
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(TrotterReport {
        rows: results.into_iter().flatten().collect(),
    })
}
