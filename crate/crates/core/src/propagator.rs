//! Time evolution under piecewise-constant `(Δ(t), U(t))`.
//!
//! The production integrator is the first-order product step
//! `M ← e^{-iδtV} ∘ (e^{-iδtH_up} M e^{-iδtH_down})`. Hopping propagators are
//! time independent and are diagonalised once per `(basis, dt)`; each is kept
//! as real matrices `C - iS`, and the state is carried as separate real and
//! imaginary parts, so a step is eight real matrix products. A classical RK4
//! integrator on the same matrix equation is the reference oracle.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::fock::{FockBasis, Spin, StateMatrix, C64};
use crate::hamiltonian::{BoundarySign, ControlAction, DiagonalPotential, DiagonalTerms, HoppingMatrix};
use crate::observables::{Metric, Observer};

pub const DEFAULT_DT: f64 = 0.005;
pub const MAX_DT: f64 = 0.1;

/// `e^{-i dt H} = cos - i·sin` for a real symmetric `H`.
#[derive(Clone, Debug)]
struct SplitUnitary {
    cos: DMatrix<f64>,
    sin: DMatrix<f64>,
}

impl SplitUnitary {
    fn new(h: &DMatrix<f64>, dt: f64) -> Self {
        let eig = SymmetricEigen::new(h.clone());
        let q = &eig.eigenvectors;
        let scaled = |f: fn(f64) -> f64| {
            let mut qd = q.clone();
            for (mut col, &l) in qd.column_iter_mut().zip(eig.eigenvalues.iter()) {
                col *= f(dt * l);
            }
            &qd * q.transpose()
        };
        SplitUnitary {
            cos: scaled(f64::cos),
            sin: scaled(f64::sin),
        }
    }

    fn to_complex(&self) -> DMatrix<C64> {
        self.cos.zip_map(&self.sin, |c, s| C64::new(c, -s))
    }
}

fn check_symmetric(h: &DMatrix<f64>, what: &str) -> Result<()> {
    if !h.is_square() {
        return Err(Error::Validation(format!("{what} hopping matrix is {:?}", h.shape())));
    }
    let asym = (h - h.transpose()).abs().max();
    if asym > 1e-12 {
        return Err(Error::Validation(format!(
            "{what} hopping matrix is not symmetric (max |H - Hᵀ| = {asym:e})"
        )));
    }
    Ok(())
}

/// Precomputed hopping propagators for one step size.
#[derive(Clone, Debug)]
pub struct TrotterStepper {
    dt: f64,
    up: SplitUnitary,
    down: SplitUnitary,
}

impl TrotterStepper {
    pub fn new(hop_up: &HoppingMatrix, hop_down: &HoppingMatrix, dt: f64) -> Result<Self> {
        if hop_up.spin() != Spin::Up || hop_down.spin() != Spin::Down {
            return Err(Error::Validation("hopping matrices passed in the wrong order".into()));
        }
        Self::from_dense(&hop_up.to_dense(), &hop_down.to_dense(), dt)
    }

    /// Builds a stepper from arbitrary real symmetric sector Hamiltonians.
    pub fn from_dense(h_up: &DMatrix<f64>, h_down: &DMatrix<f64>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(Error::config(
                "model.dt_over_tau",
                format!("must lie in (0, {MAX_DT}], got {dt}"),
            ));
        }
        check_symmetric(h_up, "up")?;
        check_symmetric(h_down, "down")?;
        Ok(TrotterStepper {
            dt,
            up: SplitUnitary::new(h_up, dt),
            down: SplitUnitary::new(h_down, dt),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.up.cos.nrows(), self.down.cos.nrows())
    }

    /// `e^{-i dt H_σ}` as a complex matrix.
    pub fn exp_hopping(&self, spin: Spin) -> DMatrix<C64> {
        match spin {
            Spin::Up => self.up.to_complex(),
            Spin::Down => self.down.to_complex(),
        }
    }

    /// One product step with the potential `v`.
    pub fn step(&self, m: &StateMatrix, v: &DiagonalPotential) -> Result<StateMatrix> {
        let shape = m.amplitudes().shape();
        if shape != self.dims() || v.shape() != shape {
            return Err(Error::Shape(format!(
                "state {shape:?}, potential {:?}, stepper {:?}",
                v.shape(),
                self.dims()
            )));
        }
        let mut state = SplitState::from_complex(m.amplitudes());
        let phases = Phases {
            cos: v.v.map(|x| (self.dt * x).cos()),
            sin: v.v.map(|x| (self.dt * x).sin()),
        };
        let mut scratch = Scratch::new(shape);
        self.apply(&mut state, &phases, &mut scratch);
        StateMatrix::from_amplitudes(m.basis().clone(), state.to_complex())
    }

    fn apply(&self, s: &mut SplitState, phases: &Phases, w: &mut Scratch) {
        let (up, down) = (&self.up, &self.down);
        // X = e^{-i dt H_up} M
        w.xr.gemm(1.0, &up.cos, &s.re, 0.0);
        w.xr.gemm(1.0, &up.sin, &s.im, 1.0);
        w.xi.gemm(1.0, &up.cos, &s.im, 0.0);
        w.xi.gemm(-1.0, &up.sin, &s.re, 1.0);
        // Y = X e^{-i dt H_down}
        s.re.gemm(1.0, &w.xr, &down.cos, 0.0);
        s.re.gemm(1.0, &w.xi, &down.sin, 1.0);
        s.im.gemm(1.0, &w.xi, &down.cos, 0.0);
        s.im.gemm(-1.0, &w.xr, &down.sin, 1.0);
        // M = e^{-i dt V} ∘ Y
        for (((re, im), &c), &sn) in
            s.re.iter_mut()
                .zip(s.im.iter_mut())
                .zip(phases.cos.iter())
                .zip(phases.sin.iter())
        {
            let (a, b) = (*re, *im);
            *re = a * c + b * sn;
            *im = b * c - a * sn;
        }
    }
}

#[derive(Clone, Debug)]
struct SplitState {
    re: DMatrix<f64>,
    im: DMatrix<f64>,
}

impl SplitState {
    fn from_complex(m: &DMatrix<C64>) -> Self {
        SplitState {
            re: m.map(|z| z.re),
            im: m.map(|z| z.im),
        }
    }

    fn to_complex(&self) -> DMatrix<C64> {
        self.re.zip_map(&self.im, C64::new)
    }

    fn norm_sqr(&self) -> f64 {
        self.re.norm_squared() + self.im.norm_squared()
    }
}

/// `e^{-i dt V} = cos - i·sin`, element-wise.
#[derive(Clone, Debug)]
struct Phases {
    cos: DMatrix<f64>,
    sin: DMatrix<f64>,
}

#[derive(Clone, Debug)]
struct Scratch {
    xr: DMatrix<f64>,
    xi: DMatrix<f64>,
}

impl Scratch {
    fn new((rows, cols): (usize, usize)) -> Self {
        Scratch {
            xr: DMatrix::zeros(rows, cols),
            xi: DMatrix::zeros(rows, cols),
        }
    }
}

/// The dt-independent data of one ring: basis, both hopping matrices and the
/// diagonal terms. Shared read-only between trajectories.
#[derive(Clone, Debug)]
pub struct Chain {
    basis: Arc<FockBasis>,
    boundary: BoundarySign,
    hop_up: HoppingMatrix,
    hop_down: HoppingMatrix,
    terms: DiagonalTerms,
    /// Site sums and doublon counts are small integers, so `e^{-i dt V}` is a
    /// lookup into a table over `(tilt, doublons)` pairs.
    level_index: Vec<u32>,
    tilt_min: f64,
    n_tilt: usize,
    n_doublon: usize,
}

impl Chain {
    pub fn new(basis: Arc<FockBasis>, boundary: BoundarySign) -> Self {
        let hop_up = HoppingMatrix::build(&basis, Spin::Up, boundary);
        let hop_down = HoppingMatrix::build(&basis, Spin::Down, boundary);
        let terms = DiagonalTerms::new(&basis);
        let tilt_min = terms.tilt().min();
        let n_tilt = (terms.tilt().max() - tilt_min) as usize + 1;
        let n_doublon = terms.doublons().max() as usize + 1;
        let level_index = terms
            .tilt()
            .iter()
            .zip(terms.doublons().iter())
            .map(|(&t, &d)| ((t - tilt_min) as usize * n_doublon + d as usize) as u32)
            .collect();
        Chain {
            basis,
            boundary,
            hop_up,
            hop_down,
            terms,
            level_index,
            tilt_min,
            n_tilt,
            n_doublon,
        }
    }

    pub fn basis(&self) -> &Arc<FockBasis> {
        &self.basis
    }

    pub fn boundary(&self) -> BoundarySign {
        self.boundary
    }

    pub fn hopping(&self, spin: Spin) -> &HoppingMatrix {
        match spin {
            Spin::Up => &self.hop_up,
            Spin::Down => &self.hop_down,
        }
    }

    pub fn terms(&self) -> &DiagonalTerms {
        &self.terms
    }

    pub fn potential(&self, action: ControlAction) -> DiagonalPotential {
        self.terms.potential(action)
    }

    pub fn stepper(&self, dt: f64) -> Result<TrotterStepper> {
        TrotterStepper::new(&self.hop_up, &self.hop_down, dt)
    }

    fn fill_phases(&self, action: ControlAction, dt: f64, out: &mut Phases) {
        let mut table = Vec::with_capacity(self.n_tilt * self.n_doublon);
        for t in 0..self.n_tilt {
            for d in 0..self.n_doublon {
                let v = action.delta * (self.tilt_min + t as f64) + action.u * d as f64;
                table.push((dt * v).sin_cos());
            }
        }
        for ((c, s), &k) in out.cos.iter_mut().zip(out.sin.iter_mut()).zip(&self.level_index) {
            let (sin, cos) = table[k as usize];
            *c = cos;
            *s = sin;
        }
    }

    /// `⟨H⟩ = Re Σ conj(M) ∘ (H_up M + M H_down + V ∘ M)` (unnormalised).
    pub fn energy(&self, m: &StateMatrix, action: ControlAction) -> f64 {
        let a = m.amplitudes();
        let v = self.potential(action).v;
        let mut e = 0.0;
        for col in 0..a.ncols() {
            for row in 0..a.nrows() {
                let mut hz = a[(row, col)] * v[(row, col)];
                for (k, h) in self.hop_up.row(row) {
                    hz += a[(k, col)] * h;
                }
                for (k, h) in self.hop_down.row(col) {
                    hz += a[(row, k)] * h;
                }
                e += (a[(row, col)].conj() * hz).re;
            }
        }
        e
    }

    fn check_state(&self, m: &StateMatrix) -> Result<()> {
        if m.amplitudes().shape() != (self.basis.dim_up(), self.basis.dim_down())
            || m.basis().lattice_size() != self.basis.lattice_size()
        {
            return Err(Error::Shape(format!(
                "state of shape {:?} does not belong to a {}-site chain with sectors {}x{}",
                m.amplitudes().shape(),
                self.basis.lattice_size(),
                self.basis.dim_up(),
                self.basis.dim_down()
            )));
        }
        Ok(())
    }
}

/// A trajectory in progress: owns its state and scratch buffers and shares
/// the chain and stepper.
#[derive(Clone, Debug)]
pub struct Evolution {
    chain: Arc<Chain>,
    stepper: Arc<TrotterStepper>,
    state: SplitState,
    phases: Phases,
    scratch: Scratch,
    elapsed: f64,
}

impl Evolution {
    pub fn new(chain: Arc<Chain>, stepper: Arc<TrotterStepper>, initial: &StateMatrix) -> Result<Self> {
        chain.check_state(initial)?;
        if stepper.dims() != initial.amplitudes().shape() {
            return Err(Error::Shape("stepper does not match the chain".into()));
        }
        let shape = initial.amplitudes().shape();
        Ok(Evolution {
            state: SplitState::from_complex(initial.amplitudes()),
            phases: Phases {
                cos: DMatrix::zeros(shape.0, shape.1),
                sin: DMatrix::zeros(shape.0, shape.1),
            },
            scratch: Scratch::new(shape),
            chain,
            stepper,
            elapsed: 0.0,
        })
    }

    pub fn reset(&mut self, initial: &StateMatrix) -> Result<()> {
        self.chain.check_state(initial)?;
        self.state = SplitState::from_complex(initial.amplitudes());
        self.elapsed = 0.0;
        Ok(())
    }

    pub fn chain(&self) -> &Arc<Chain> {
        &self.chain
    }

    pub fn dt(&self) -> f64 {
        self.stepper.dt
    }

    /// Time evolved so far, in units of τ.
    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }

    /// Holds `action` for `steps` product steps.
    pub fn advance(&mut self, action: ControlAction, steps: usize) -> Result<()> {
        if !action.is_finite() {
            return Err(Error::Numerical(format!("non-finite control {action:?}")));
        }
        self.chain.fill_phases(action, self.stepper.dt, &mut self.phases);
        for _ in 0..steps {
            self.stepper.apply(&mut self.state, &self.phases, &mut self.scratch);
        }
        self.elapsed += steps as f64 * self.stepper.dt;
        let norm = self.state.norm_sqr();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "state norm became {norm} at t = {}",
                self.elapsed
            )));
        }
        Ok(())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.state.norm_sqr()
    }

    pub fn state(&self) -> StateMatrix {
        StateMatrix::from_amplitudes(self.chain.basis.clone(), self.state.to_complex())
            .expect("shape checked on construction")
    }
}

/// One `(Δ, U)` pair per control interval, each held for `interval_steps`
/// product steps of size `step_dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriveSchedule {
    samples: Vec<ControlAction>,
    interval_steps: usize,
    step_dt: f64,
}

impl DriveSchedule {
    pub fn new(samples: Vec<ControlAction>, interval_steps: usize, step_dt: f64) -> Result<Self> {
        if interval_steps == 0 {
            return Err(Error::config("env.interval_steps", "must be at least 1"));
        }
        if !(step_dt > 0.0 && step_dt.is_finite()) {
            return Err(Error::config(
                "model.dt_over_tau",
                format!("must be positive, got {step_dt}"),
            ));
        }
        if let Some(k) = samples.iter().position(|a| !a.is_finite()) {
            return Err(Error::Validation(format!(
                "drive sample {k} is not finite: {:?}",
                samples[k]
            )));
        }
        Ok(DriveSchedule {
            samples,
            interval_steps,
            step_dt,
        })
    }

    /// Samples `drive(t)` at the start of each interval covering `horizon`.
    pub fn sampled(
        horizon: f64,
        interval_steps: usize,
        step_dt: f64,
        mut drive: impl FnMut(usize, f64) -> ControlAction,
    ) -> Result<Self> {
        let interval = interval_steps as f64 * step_dt;
        let n = intervals_in(horizon, interval)?;
        let samples = (0..n).map(|k| drive(k, k as f64 * interval)).collect();
        Self::new(samples, interval_steps, step_dt)
    }

    pub fn constant(action: ControlAction, horizon: f64, interval_steps: usize, step_dt: f64) -> Result<Self> {
        Self::sampled(horizon, interval_steps, step_dt, |_, _| action)
    }

    pub fn samples(&self) -> &[ControlAction] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn interval_steps(&self) -> usize {
        self.interval_steps
    }

    pub fn step_dt(&self) -> f64 {
        self.step_dt
    }

    /// Duration of one control interval in τ.
    pub fn interval(&self) -> f64 {
        self.interval_steps as f64 * self.step_dt
    }

    pub fn horizon(&self) -> f64 {
        self.samples.len() as f64 * self.interval()
    }

    /// The same drive refined to `factor` times as many steps per interval.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(
            self.samples.clone(),
            self.interval_steps * factor,
            self.step_dt / factor as f64,
        )
    }

    pub fn channel(&self, pick: impl Fn(&ControlAction) -> f64) -> Vec<f64> {
        self.samples.iter().map(pick).collect()
    }
}

/// Number of intervals of length `interval` in `horizon`; must be integral.
pub fn intervals_in(horizon: f64, interval: f64) -> Result<usize> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::config(
            "env.horizon_over_tau",
            format!("must be non-negative, got {horizon}"),
        ));
    }
    let n = (horizon / interval).round();
    if (n * interval - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::config(
            "env.horizon_over_tau",
            format!("{horizon} is not a multiple of the control interval {interval}"),
        ));
    }
    Ok(n as usize)
}

/// A metric sampled on a uniform time grid starting at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSeries {
    pub metric: Metric,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn new(metric: Metric) -> Self {
        MetricSeries {
            metric,
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn name(&self) -> &'static str {
        self.metric.name()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn spacing(&self) -> Option<f64> {
        (self.times.len() > 1).then(|| self.times[1] - self.times[0])
    }

    pub fn horizon(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Mean over the samples after `t = 0`, the `⟨·⟩_𝒯` of an episode.
    pub fn time_average(&self) -> f64 {
        let tail = &self.values[1.min(self.values.len())..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,{}", self.name())?;
        for (t, v) in self.times.iter().zip(&self.values) {
            writeln!(out, "{t:.11e},{v:.11e}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }

    /// Reads a two-column series written by [`MetricSeries::write_csv`].
    pub fn read_csv<R: BufRead>(input: R, metric: Metric) -> Result<Self> {
        let mut series = MetricSeries::new(metric);
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != format!("t,{}", metric.name()) {
            return Err(Error::Validation(format!("unexpected series header `{header}`")));
        }
        for (k, line) in lines.enumerate() {
            let line = line?;
            let parsed = line
                .split_once(',')
                .and_then(|(t, v)| Some((t.parse().ok()?, v.parse().ok()?)));
            let (t, v) = parsed.ok_or_else(|| Error::Validation(format!("bad series row {}: `{line}`", k + 2)))?;
            series.times.push(t);
            series.values.push(v);
        }
        Ok(series)
    }

    pub fn load(path: &Path, metric: Metric) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::MissingArtifact {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        Self::read_csv(BufReader::new(file), metric)
    }
}

/// Result of an evolution run.
#[derive(Clone, Debug)]
pub struct Evolved {
    pub final_state: StateMatrix,
    pub series: Vec<MetricSeries>,
}

impl Evolved {
    pub fn get(&self, metric: Metric) -> Option<&MetricSeries> {
        self.series.iter().find(|s| s.metric == metric)
    }
}

struct Recorder {
    observer: Observer,
    series: Vec<MetricSeries>,
}

impl Recorder {
    fn new(initial: &StateMatrix, metrics: &[Metric]) -> Result<Self> {
        Ok(Recorder {
            observer: Observer::new(initial.clone(), metrics)?,
            series: metrics.iter().map(|&m| MetricSeries::new(m)).collect(),
        })
    }

    fn record(&mut self, t: f64, state: &StateMatrix) -> Result<()> {
        for (s, v) in self.series.iter_mut().zip(self.observer.observe(state)?) {
            s.times.push(t);
            s.values.push(v);
        }
        Ok(())
    }
}

/// Trotter evolution of `initial` under `schedule`, sampling `metrics` at
/// `t = 0` and after every control interval.
pub fn evolve(
    initial: &StateMatrix,
    chain: &Arc<Chain>,
    stepper: &Arc<TrotterStepper>,
    schedule: &DriveSchedule,
    metrics: &[Metric],
) -> Result<Evolved> {
    if (stepper.dt - schedule.step_dt).abs() > 1e-12 * schedule.step_dt {
        return Err(Error::Validation(format!(
            "schedule step {} differs from stepper step {}",
            schedule.step_dt, stepper.dt
        )));
    }
    let mut evolution = Evolution::new(chain.clone(), stepper.clone(), initial)?;
    let mut recorder = Recorder::new(initial, metrics)?;
    recorder.record(0.0, initial)?;
    let interval = schedule.interval();
    for (k, &action) in schedule.samples.iter().enumerate() {
        evolution.advance(action, schedule.interval_steps)?;
        recorder.record((k + 1) as f64 * interval, &evolution.state())?;
    }
    Ok(Evolved {
        final_state: evolution.state(),
        series: recorder.series,
    })
}

/// Classical fourth-order Runge-Kutta on `i dM/dt = H_up M + M H_down + V ∘ M`
/// with step `dt`, over the same piecewise-constant drive.
///
/// Within each interval `V` is shifted by the midpoint of its range, which
/// removes a global phase rate and halves the stiffness; the phase is restored
/// on the returned final state. Metrics are phase independent. The carried
/// state is never renormalised.
pub fn rk4_evolve(
    initial: &StateMatrix,
    chain: &Chain,
    schedule: &DriveSchedule,
    dt: f64,
    metrics: &[Metric],
) -> Result<Evolved> {
    let h_up = chain.hop_up.to_dense();
    let h_down = chain.hop_down.to_dense();
    rk4_with_hopping(initial, chain, &h_up, &h_down, schedule, dt, metrics)
}

fn rk4_with_hopping(
    initial: &StateMatrix,
    chain: &Chain,
    h_up: &DMatrix<f64>,
    h_down: &DMatrix<f64>,
    schedule: &DriveSchedule,
    dt: f64,
    metrics: &[Metric],
) -> Result<Evolved> {
    chain.check_state(initial)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::config(
            "trotter_check.rk4_dt_over_tau",
            format!("must be positive, got {dt}"),
        ));
    }
    let interval = schedule.interval();
    let substeps = (interval / dt).round() as usize;
    if substeps == 0 || (substeps as f64 * dt - interval).abs() > 1e-9 * interval {
        return Err(Error::Validation(format!(
            "RK4 step {dt} does not divide the control interval {interval}"
        )));
    }
    let mut recorder = Recorder::new(initial, metrics)?;
    recorder.record(0.0, initial)?;

    let mut y = SplitState::from_complex(initial.amplitudes());
    let shape = initial.amplitudes().shape();
    let zeros = || DMatrix::<f64>::zeros(shape.0, shape.1);
    let (mut k, mut tmp, mut acc) = (
        SplitState {
            re: zeros(),
            im: zeros(),
        },
        SplitState {
            re: zeros(),
            im: zeros(),
        },
        SplitState {
            re: zeros(),
            im: zeros(),
        },
    );
    let mut phase = 0.0;

    // k = -i L(x), where L(x) = H_up x + x H_down + W ∘ x is real linear.
    let derivative = |x: &SplitState, w: &DMatrix<f64>, out: &mut SplitState| {
        let apply = |src: &DMatrix<f64>, dst: &mut DMatrix<f64>, sign: f64| {
            dst.gemm(sign, h_up, src, 0.0);
            dst.gemm(sign, src, h_down, 1.0);
            dst.zip_zip_apply(src, w, |d, s, wv| *d += sign * wv * s);
        };
        apply(&x.im, &mut out.re, 1.0);
        apply(&x.re, &mut out.im, -1.0);
    };
    let axpy = |dst: &mut SplitState, a: f64, x: &SplitState, b: &SplitState| {
        dst.re.zip_zip_apply(&x.re, &b.re, |d, xv, bv| *d = xv + a * bv);
        dst.im.zip_zip_apply(&x.im, &b.im, |d, xv, bv| *d = xv + a * bv);
    };
    let accumulate = |dst: &mut SplitState, a: f64, x: &SplitState| {
        dst.re.zip_apply(&x.re, |d, xv| *d += a * xv);
        dst.im.zip_apply(&x.im, |d, xv| *d += a * xv);
    };

    for (interval_index, &action) in schedule.samples.iter().enumerate() {
        if !action.is_finite() {
            return Err(Error::Numerical(format!("non-finite control {action:?}")));
        }
        let mut w = chain.potential(action).v;
        let shift = 0.5 * (w.min() + w.max());
        w.add_scalar_mut(-shift);
        phase += shift * interval;
        for _ in 0..substeps {
            acc.re.copy_from(&y.re);
            acc.im.copy_from(&y.im);
            derivative(&y, &w, &mut k);
            accumulate(&mut acc, dt / 6.0, &k);
            axpy(&mut tmp, dt / 2.0, &y, &k);
            derivative(&tmp, &w, &mut k);
            accumulate(&mut acc, dt / 3.0, &k);
            axpy(&mut tmp, dt / 2.0, &y, &k);
            derivative(&tmp, &w, &mut k);
            accumulate(&mut acc, dt / 3.0, &k);
            axpy(&mut tmp, dt, &y, &k);
            derivative(&tmp, &w, &mut k);
            accumulate(&mut acc, dt / 6.0, &k);
            std::mem::swap(&mut y, &mut acc);
        }
        let norm = y.norm_sqr();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("RK4 state norm became {norm}")));
        }
        let state = StateMatrix::from_amplitudes(chain.basis.clone(), y.to_complex())?;
        let observed = StateMatrix::from_amplitudes(chain.basis.clone(), state.amplitudes().unscale(norm.sqrt()))?;
        recorder.record((interval_index + 1) as f64 * interval, &observed)?;
    }
    let final_state = StateMatrix::from_amplitudes(chain.basis.clone(), y.to_complex() * C64::from_polar(1.0, -phase))?;
    Ok(Evolved {
        final_state,
        series: recorder.series,
    })
}

/// Order of an [`lp_error`] norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Norm {
    L(f64),
    Max,
}

impl Norm {
    pub const STANDARD: [Norm; 3] = [Norm::L(1.0), Norm::L(2.0), Norm::Max];

    pub fn label(&self) -> String {
        match self {
            Norm::L(p) => format!("{p}"),
            Norm::Max => "inf".to_string(),
        }
    }
}

/// `(∫|a - b|^p dt)^{1/p}` by the trapezoid rule, or `max |a - b|`.
///
/// When one grid is an integer refinement of the other, the finer series is
/// sampled at the coarse times.
pub fn lp_error(a: &MetricSeries, b: &MetricSeries, norm: Norm) -> Result<f64> {
    let (coarse, fine) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if coarse.is_empty() {
        return Err(Error::Validation("empty series".into()));
    }
    let stride = if coarse.len() == 1 {
        if fine.len() != 1 {
            return Err(Error::Validation("series lengths are not commensurate".into()));
        }
        1
    } else {
        let ratio = (fine.len() - 1) / (coarse.len() - 1);
        if ratio * (coarse.len() - 1) != fine.len() - 1 {
            return Err(Error::Validation(format!(
                "series of {} and {} samples are not commensurate",
                coarse.len(),
                fine.len()
            )));
        }
        ratio
    };
    let tol = 1e-9 * coarse.horizon().max(1.0);
    if (coarse.horizon() - fine.horizon()).abs() > tol || (coarse.times[0] - fine.times[0]).abs() > tol {
        return Err(Error::Validation("series cover different time ranges".into()));
    }
    let diffs: Vec<f64> = (0..coarse.len())
        .map(|k| (coarse.values[k] - fine.values[k * stride]).abs())
        .collect();
    match norm {
        Norm::Max => Ok(diffs.iter().copied().fold(0.0, f64::max)),
        Norm::L(p) => {
            if !(p >= 1.0) {
                return Err(Error::Validation(format!("norm order must be ≥ 1, got {p}")));
            }
            let integral: f64 = coarse
                .times
                .windows(2)
                .zip(diffs.windows(2))
                .map(|(t, d)| 0.5 * (t[1] - t[0]) * (d[0].powf(p) + d[1].powf(p)))
                .sum();
            Ok(integral.powf(1.0 / p))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::SpinPattern;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs(m: &DMatrix<C64>) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    fn chain(n: usize) -> Arc<Chain> {
        Arc::new(Chain::new(
            Arc::new(FockBasis::half_filled(n).unwrap()),
            BoundarySign::Fermionic,
        ))
    }

    fn pattern_state(chain: &Chain, p: &str) -> StateMatrix {
        StateMatrix::from_pattern(chain.basis().clone(), &p.parse::<SpinPattern>().unwrap()).unwrap()
    }

    fn random_schedule(len: usize, seed: u64, dt: f64) -> DriveSchedule {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..len)
            .map(|_| ControlAction::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)))
            .collect();
        DriveSchedule::new(samples, 1, dt).unwrap()
    }

    #[test]
    fn two_site_propagator_is_analytic() {
        let basis = FockBasis::new(2, 1, 1).unwrap();
        let h = HoppingMatrix::build(&basis, Spin::Up, BoundarySign::Fermionic);
        let hd = HoppingMatrix::build(&basis, Spin::Down, BoundarySign::Fermionic);
        let s = TrotterStepper::new(&h, &hd, 0.005).unwrap();
        let (c, sn) = (0.005f64.cos(), 0.005f64.sin());
        let want = DMatrix::from_row_slice(
            2,
            2,
            &[C64::new(c, 0.0), C64::new(0.0, sn), C64::new(0.0, sn), C64::new(c, 0.0)],
        );
        assert!((s.exp_hopping(Spin::Up) - want).norm() < 1e-15);
    }

    #[test]
    fn propagators_are_unitary_and_tend_to_identity() {
        let ch = chain(8);
        let s = ch.stepper(0.005).unwrap();
        for spin in Spin::BOTH {
            let u = s.exp_hopping(spin);
            let residual = max_abs(&(u.adjoint() * &u - DMatrix::identity(u.nrows(), u.ncols())));
            assert!(residual < 1e-10, "{residual}");
        }
        let h = ch.hopping(Spin::Up).to_dense();
        let h_norm = SymmetricEigen::new(h).eigenvalues.abs().max();
        for dt in [1e-2, 1e-3, 1e-4] {
            let u = ch.stepper(dt).unwrap().exp_hopping(Spin::Up);
            let dist = (u - DMatrix::identity(70, 70)).norm();
            assert!(dist <= 2.0 * dt * h_norm * 70f64.sqrt());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let ch = chain(4);
        assert!(ch.stepper(0.0).is_err());
        assert!(ch.stepper(0.2).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.0]);
        assert!(matches!(
            TrotterStepper::from_dense(&asym, &asym, 0.01),
            Err(Error::Validation(_))
        ));
        let s = ch.stepper(0.01).unwrap();
        let m = pattern_state(&ch, "-+");
        let wrong = DiagonalPotential::build(&FockBasis::half_filled(6).unwrap(), 1.0, 1.0);
        assert!(matches!(s.step(&m, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn two_site_rabi_oscillation() {
        // One particle per spin, no potential: each spin oscillates
        // independently, P(stay) = cos²(t) per spin.
        let basis = Arc::new(FockBasis::new(2, 1, 1).unwrap());
        let ch = Chain::new(basis.clone(), BoundarySign::Fermionic);
        let dt = 0.005;
        let s = ch.stepper(dt).unwrap();
        let v = ch.potential(ControlAction::default());
        let mut m = StateMatrix::from_pattern(basis, &"ud".parse().unwrap()).unwrap();
        for k in 1..=400 {
            m = s.step(&m, &v).unwrap();
            let t = k as f64 * dt;
            let stay = m.amplitudes()[(0, 1)].norm_sqr();
            assert!((stay - t.cos().powi(4)).abs() < 1e-12);
        }
    }

    #[test]
    fn potential_only_gives_pure_phases() {
        let ch = chain(6);
        let (du, dd) = (ch.basis().dim_up(), ch.basis().dim_down());
        let s = TrotterStepper::from_dense(&DMatrix::zeros(du, du), &DMatrix::zeros(dd, dd), 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m0 = StateMatrix::from_amplitudes(
            ch.basis().clone(),
            DMatrix::from_fn(du, dd, |_, _| C64::new(rng.random(), rng.random())),
        )
        .unwrap()
        .normalized();
        let v = ch.potential(ControlAction::new(3.3, -7.1));
        let mut m = m0.clone();
        for _ in 0..100 {
            m = s.step(&m, &v).unwrap();
        }
        let want = m0.amplitudes().zip_map(&v.v, |z, x| z * C64::from_polar(1.0, -x));
        assert!(max_abs(&(m.amplitudes() - want)) < 1e-12);
    }

    #[test]
    fn fast_phase_table_matches_direct_step() {
        let ch = chain(6);
        let s = Arc::new(ch.stepper(0.005).unwrap());
        let m0 = pattern_state(&ch, "-+-");
        let action = ControlAction::new(-4.25, 9.5);
        let direct = s.step(&m0, &ch.potential(action)).unwrap();
        let mut ev = Evolution::new(ch.clone(), s, &m0).unwrap();
        ev.advance(action, 1).unwrap();
        assert!(max_abs(&(ev.state().amplitudes() - direct.amplitudes())) < 1e-14);
    }

    #[test]
    fn norm_drift_under_random_drive() {
        let ch = chain(8);
        let s = Arc::new(ch.stepper(0.005).unwrap());
        let mut ev = Evolution::new(ch.clone(), s, &pattern_state(&ch, "-+-+")).unwrap();
        let schedule = random_schedule(10_000, 11, 0.005);
        let mut worst_step = 0.0f64;
        let mut last = 1.0;
        for &a in schedule.samples() {
            ev.advance(a, 1).unwrap();
            let norm = ev.norm_sqr().sqrt();
            worst_step = worst_step.max((norm - last).abs());
            last = norm;
        }
        assert!(worst_step <= 1e-12, "{worst_step}");
        assert!((last - 1.0).abs() <= 1e-8, "{}", last - 1.0);
    }

    #[test]
    fn empty_schedule_returns_initial_samples() {
        let ch = chain(6);
        let s = Arc::new(ch.stepper(0.005).unwrap());
        let m0 = pattern_state(&ch, "-+-");
        let schedule = DriveSchedule::new(vec![], 1, 0.005).unwrap();
        let out = evolve(&m0, &ch, &s, &schedule, &[Metric::FullFidelity, Metric::Imbalance]).unwrap();
        assert_eq!(out.final_state.amplitudes(), m0.amplitudes());
        for series in &out.series {
            assert_eq!(series.times, vec![0.0]);
        }
        assert_eq!(out.series[0].values, vec![1.0]);
    }

    #[test]
    fn schedule_validation() {
        assert!(DriveSchedule::new(vec![ControlAction::new(f64::NAN, 0.0)], 1, 0.005).is_err());
        assert!(DriveSchedule::new(vec![], 0, 0.005).is_err());
        let s = DriveSchedule::constant(ControlAction::new(1.0, 2.0), 5.0, 2, 0.005).unwrap();
        assert_eq!(s.len(), 500);
        assert!((s.horizon() - 5.0).abs() < 1e-12);
        assert!(DriveSchedule::constant(ControlAction::default(), 0.0123, 1, 0.005).is_err());
        let ch = chain(4);
        let stepper = Arc::new(ch.stepper(0.01).unwrap());
        let m0 = pattern_state(&ch, "-+");
        assert!(evolve(&m0, &ch, &stepper, &s, &[]).is_err());
    }

    #[test]
    fn series_grid_is_uniform() {
        let ch = chain(6);
        let s = Arc::new(ch.stepper(0.005).unwrap());
        let schedule = random_schedule(40, 5, 0.005).refined(2).unwrap();
        let stepper2 = Arc::new(ch.stepper(0.0025).unwrap());
        let out = evolve(
            &pattern_state(&ch, "-+-"),
            &ch,
            &stepper2,
            &schedule,
            &[Metric::FullFidelity],
        )
        .unwrap();
        let t = &out.series[0].times;
        assert_eq!(t.len(), 41);
        for w in t.windows(2) {
            assert!((w[1] - w[0] - 0.005).abs() < 1e-15);
        }
        let _ = s;
    }

    #[test]
    fn rk4_potential_only_matches_phases() {
        let ch = chain(6);
        let (du, dd) = (ch.basis().dim_up(), ch.basis().dim_down());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m0 = StateMatrix::from_amplitudes(
            ch.basis().clone(),
            DMatrix::from_fn(du, dd, |_, _| C64::new(rng.random(), rng.random())),
        )
        .unwrap()
        .normalized();
        let schedule = random_schedule(100, 6, 0.005);
        let out = rk4_with_hopping(
            &m0,
            &ch,
            &DMatrix::zeros(du, du),
            &DMatrix::zeros(dd, dd),
            &schedule,
            1e-4,
            &[],
        )
        .unwrap();
        let mut want = m0.amplitudes().clone();
        for &a in schedule.samples() {
            let v = ch.potential(a).v;
            want.zip_apply(&v, |z, x| *z *= C64::from_polar(1.0, -x * 0.005));
        }
        assert!(max_abs(&(out.final_state.amplitudes() - want)) < 1e-10);
    }

    #[test]
    fn rk4_phase_is_restored_on_final_state() {
        let ch = chain(4);
        let du = ch.basis().dim_up();
        let dd = ch.basis().dim_down();
        // Compare RK4 with exact exponentiation of the full Hamiltonian.
        let action = ControlAction::new(2.5, 4.0);
        let schedule = DriveSchedule::constant(action, 1.0, 1, 0.005).unwrap();
        let m0 = pattern_state(&ch, "-+");
        let out = rk4_evolve(&m0, &ch, &schedule, 1e-4, &[]).unwrap();

        let v = ch.potential(action).v;
        let hu = ch.hopping(Spin::Up).to_dense();
        let hd = ch.hopping(Spin::Down).to_dense();
        let dim = du * dd;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let idx = |a: usize, b: usize| a + b * du;
        for b in 0..dd {
            for a in 0..du {
                h[(idx(a, b), idx(a, b))] += v[(a, b)];
                for k in 0..du {
                    h[(idx(k, b), idx(a, b))] += hu[(k, a)];
                }
                for k in 0..dd {
                    h[(idx(a, k), idx(a, b))] += hd[(b, k)];
                }
            }
        }
        let eig = SymmetricEigen::new(h);
        let q = eig.eigenvectors.map(|x| C64::new(x, 0.0));
        let phases = eig.eigenvalues.map(|l| C64::from_polar(1.0, -l));
        let psi0 = DMatrix::from_iterator(dim, 1, m0.amplitudes().iter().copied());
        let psi = &q * DMatrix::from_diagonal(&phases) * q.adjoint() * psi0;
        let got = DMatrix::from_iterator(dim, 1, out.final_state.amplitudes().iter().copied());
        assert!(max_abs(&(got - psi)) < 1e-10);
    }

    #[test]
    fn rk4_norm_is_preserved() {
        let ch = chain(6);
        let schedule = random_schedule(400, 8, 0.005);
        let out = rk4_evolve(&pattern_state(&ch, "-+-"), &ch, &schedule, 1e-4, &[]).unwrap();
        assert!((out.final_state.norm_sqr() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn trotter_agrees_with_rk4_at_first_order() {
        let ch = chain(6);
        let m0 = pattern_state(&ch, "-+-");
        let schedule = DriveSchedule::sampled(2.0, 1, 0.005, |_, t| {
            ControlAction::new(
                10.0 * (2.0 * std::f64::consts::PI * t).sin(),
                10.0 * (2.0 * std::f64::consts::PI * t).cos(),
            )
        })
        .unwrap();
        let metrics = [Metric::FullFidelity];
        let reference = rk4_evolve(&m0, &ch, &schedule, 1e-4, &metrics).unwrap();
        let mut errors = Vec::new();
        for factor in [1, 2] {
            let refined = schedule.refined(factor).unwrap();
            let stepper = Arc::new(ch.stepper(refined.step_dt()).unwrap());
            let out = evolve(&m0, &ch, &stepper, &refined, &metrics).unwrap();
            errors.push(lp_error(&out.series[0], &reference.series[0], Norm::L(2.0)).unwrap());
        }
        assert!(errors[0] > 0.0 && errors[0] < 0.05, "{errors:?}");
        let ratio = errors[0] / errors[1];
        assert!((1.6..=2.6).contains(&ratio), "{errors:?}");
    }

    #[test]
    fn energy_is_conserved_at_first_order_under_constant_drive() {
        let ch = chain(6);
        let m0 = pattern_state(&ch, "-+-");
        let action = ControlAction::new(1.0, 2.0);
        let e0 = ch.energy(&m0, action);
        let mut deviations = Vec::new();
        for dt in [0.005, 0.0025] {
            let stepper = Arc::new(ch.stepper(dt).unwrap());
            let mut ev = Evolution::new(ch.clone(), stepper, &m0).unwrap();
            let steps = (10.0 / dt).round() as usize;
            let mut worst = 0.0f64;
            for _ in 0..steps {
                ev.advance(action, 1).unwrap();
                worst = worst.max((ch.energy(&ev.state(), action) - e0).abs());
            }
            deviations.push(worst);
        }
        // The product step conserves a modified energy H + O(dt); the
        // deviation of ⟨H⟩ is bounded and halves with dt.
        assert!(deviations[0] < 0.02, "{deviations:?}");
        let ratio = deviations[0] / deviations[1];
        assert!((1.6..=2.6).contains(&ratio), "{deviations:?}");
    }

    #[test]
    fn determinism() {
        let ch = chain(6);
        let s = Arc::new(ch.stepper(0.005).unwrap());
        let schedule = random_schedule(200, 2, 0.005);
        let run = || {
            let out = evolve(&pattern_state(&ch, "-+-"), &ch, &s, &schedule, &Metric::PROTOCOL_SET).unwrap();
            let mut buf = Vec::new();
            for series in &out.series {
                series.write_csv(&mut buf).unwrap();
            }
            buf
        };
        assert_eq!(run(), run());
    }

    fn series(values: &[f64], dt: f64) -> MetricSeries {
        MetricSeries {
            metric: Metric::FullFidelity,
            times: (0..values.len()).map(|k| k as f64 * dt).collect(),
            values: values.to_vec(),
        }
    }

    #[test]
    fn lp_norm_cases() {
        let a = series(&[0.1, 0.4, 0.3, 0.9], 0.5);
        for norm in [Norm::L(1.0), Norm::L(2.0), Norm::L(3.5), Norm::Max] {
            assert_eq!(lp_error(&a, &a, norm).unwrap(), 0.0);
        }
        let b = series(&[0.35, 0.65, 0.55, 1.15], 0.5);
        assert!((lp_error(&a, &b, Norm::L(1.0)).unwrap() - 0.25 * 1.5).abs() < 1e-12);
        let z = series(&[0.0, 0.0, 0.0], 1.0);
        let d = series(&[0.0, 0.5, 0.2], 1.0);
        assert_eq!(lp_error(&z, &d, Norm::Max).unwrap(), 0.5);
        let fine = series(&[0.1, 0.0, 0.4, 0.0, 0.3, 0.0, 0.9], 0.25);
        assert_eq!(lp_error(&a, &fine, Norm::L(2.0)).unwrap(), 0.0);
        let odd = series(&[0.0; 6], 0.3);
        assert!(lp_error(&a, &odd, Norm::L(2.0)).is_err());
    }

    #[test]
    fn series_csv_round_trip() {
        let s = series(&[1.0, 0.987654321012345, 1.0 / 3.0], 0.005);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,full_fidelity\n0.00000000000e0,1.00000000000e0\n"));
        let back = MetricSeries::read_csv(&buf[..], Metric::FullFidelity).unwrap();
        assert!((back.values[2] - 1.0 / 3.0).abs() < 1e-11);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn each_step_preserves_norm(delta in -10.0f64..10.0, u in -10.0f64..10.0, seed in 0u64..1000) {
            let ch = chain(6);
            let s = ch.stepper(0.005).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (du, dd) = (ch.basis().dim_up(), ch.basis().dim_down());
            let m = StateMatrix::from_amplitudes(
                ch.basis().clone(),
                DMatrix::from_fn(du, dd, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)),
            ).unwrap().normalized();
            let next = s.step(&m, &ch.potential(ControlAction::new(delta, u))).unwrap();
            prop_assert!((next.norm_sqr().sqrt() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn constant_offsets_give_closed_form(c in -1.0f64..1.0, n in 2usize..40, dt in 0.001f64..0.1) {
            let zeros = vec![0.0; n];
            let shifted: Vec<f64> = zeros.iter().map(|x| x + c).collect();
            let a = series(&zeros, dt);
            let b = series(&shifted, dt);
            let horizon = (n - 1) as f64 * dt;
            prop_assert!((lp_error(&a, &b, Norm::L(1.0)).unwrap() - c.abs() * horizon).abs() < 1e-12);
            prop_assert!((lp_error(&a, &b, Norm::L(2.0)).unwrap() - c.abs() * horizon.sqrt()).abs() < 1e-12);
        }
    }
}
