//! Dense feed-forward networks with hand-written backpropagation, Adam, and
//! a diagonal Gaussian policy head.
//!
//! Batches are column-major: a batch of `B` inputs of width `n` is an
//! `n x B` matrix, so each layer is one matrix product.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

/// Random matrix with orthonormal rows or columns, whichever are fewer,
/// scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> DMatrix<f64> {
    let (tall_rows, tall_cols) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall_rows, tall_cols, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    q * gain
}

/// Activations of every layer for one batch, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `activations[0]` is the input; the last entry is the network output.
    pub activations: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().unwrap()
    }
}

/// Feed-forward net: tanh on hidden layers, linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config("agent.hidden", format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Mlp {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    /// Orthogonal weights with gain 1 on hidden layers and `output_gain` on
    /// the last layer; zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output_gain: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let last = net.layers.len() - 1;
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let gain = if k == last { output_gain } else { 1.0 };
            layer.weight = orthogonal(layer.outputs(), layer.inputs(), gain, rng);
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (k, w) in layers.windows(2).enumerate() {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer {k} outputs {} but layer {} takes {}",
                    w[0].outputs(),
                    k + 1,
                    w[1].inputs()
                )));
            }
        }
        if let Some(k) = layers.iter().position(|l| l.bias.len() != l.outputs()) {
            return Err(Error::Shape(format!("layer {k} bias has the wrong length")));
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].inputs()];
        sizes.extend(self.layers.iter().map(Dense::outputs));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.forward_batch(&x)?.output().as_slice().to_vec())
    }

    pub fn forward_batch(&self, input: &DMatrix<f64>) -> Result<ForwardCache> {
        if input.nrows() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network takes {} inputs, got {}",
                self.input_dim(),
                input.nrows()
            )));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * activations.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if k != last {
                z.apply(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Gradients of `Σ grad_output ∘ output` with respect to every weight and
    /// bias, summed over the batch.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &DMatrix<f64>) -> Result<Vec<Dense>> {
        if grad_output.shape() != cache.output().shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                grad_output.shape(),
                cache.output().shape()
            )));
        }
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_output.clone();
        for k in (0..self.layers.len()).rev() {
            let input = &cache.activations[k];
            let weight = delta.clone() * input.transpose();
            let bias = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            if k > 0 {
                let mut back = self.layers[k].weight.transpose() * &delta;
                back.zip_apply(input, |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        Ok(grads)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_lengths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect()
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let sizes = self.sizes();
        out.write_u32::<LittleEndian>(sizes.len() as u32)?;
        for &s in &sizes {
            out.write_u32::<LittleEndian>(s as u32)?;
        }
        for layer in &self.layers {
            // Row-major weights.
            for row in layer.weight.row_iter() {
                for &v in row.iter() {
                    out.write_f64::<LittleEndian>(v)?;
                }
            }
            write_f64s(out, layer.bias.as_slice())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let n = input.read_u32::<LittleEndian>()? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        let sizes = (0..n)
            .map(|_| input.read_u32::<LittleEndian>().map(|s| s as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        if sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
            return Err(Error::Checkpoint(format!("implausible layer sizes {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(n - 1);
        for w in sizes.windows(2) {
            let values = read_f64s(input, w[0] * w[1])?;
            let weight = DMatrix::from_row_slice(w[1], w[0], &values);
            let bias = DVector::from_vec(read_f64s(input, w[1])?);
            layers.push(Dense { weight, bias });
        }
        Mlp::from_layers(layers)
    }
}

pub(crate) fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut values = vec![0.0; n];
    input.read_f64_into::<LittleEndian>(&mut values)?;
    Ok(values)
}

/// Bias-corrected Adam over a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, lengths: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second: lengths.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.first.iter().map(Vec::len).collect()
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let shapes_match = params.len() == self.first.len()
            && grads.len() == self.first.len()
            && params
                .iter()
                .zip(grads)
                .zip(&self.first)
                .all(|((p, g), m)| p.len() == m.len() && g.len() == m.len());
        if !shapes_match {
            return Err(Error::Shape(
                "Adam parameter and gradient shapes differ from its moments".into(),
            ));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        for v in [self.lr, self.beta1, self.beta2, self.eps] {
            out.write_f64::<LittleEndian>(v)?;
        }
        out.write_u64::<LittleEndian>(self.steps)?;
        out.write_u32::<LittleEndian>(self.first.len() as u32)?;
        for (m, v) in self.first.iter().zip(&self.second) {
            out.write_u32::<LittleEndian>(m.len() as u32)?;
            write_f64s(out, m)?;
            write_f64s(out, v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut header = [0.0; 4];
        input.read_f64_into::<LittleEndian>(&mut header)?;
        let steps = input.read_u64::<LittleEndian>()?;
        let n = input.read_u32::<LittleEndian>()? as usize;
        if n > 1024 {
            return Err(Error::Checkpoint(format!("implausible tensor count {n}")));
        }
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for _ in 0..n {
            let len = input.read_u32::<LittleEndian>()? as usize;
            if len > 1 << 28 {
                return Err(Error::Checkpoint(format!("implausible tensor length {len}")));
            }
            first.push(read_f64s(input, len)?);
            second.push(read_f64s(input, len)?);
        }
        Ok(Adam {
            lr: header[0],
            beta1: header[1],
            beta2: header[2],
            eps: header[3],
            steps,
            first,
            second,
        })
    }
}

/// `log N(x; mean, diag(exp(log_std)²))`.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&x, &m), &ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - half_ln_2pi
        })
        .sum()
}

/// Diagonal Gaussian policy whose mean comes from an actor network and whose
/// log standard deviation is a free, state-independent parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub actor: Mlp,
    log_std: DVector<f64>,
}

impl GaussianPolicy {
    pub fn new(actor: Mlp) -> Self {
        let dim = actor.output_dim();
        GaussianPolicy {
            actor,
            log_std: DVector::zeros(dim),
        }
    }

    pub fn with_log_std(actor: Mlp, log_std: Vec<f64>) -> Result<Self> {
        if log_std.len() != actor.output_dim() {
            return Err(Error::Shape(format!(
                "{} log-std entries for {} actions",
                log_std.len(),
                actor.output_dim()
            )));
        }
        let mut p = GaussianPolicy {
            actor,
            log_std: DVector::from_vec(log_std),
        };
        p.clamp_log_std();
        Ok(p)
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn log_std(&self) -> &[f64] {
        self.log_std.as_slice()
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        self.log_std.as_mut_slice()
    }

    /// Actor parameters followed by the log-std vector.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut params = self.actor.param_slices_mut();
        params.push(self.log_std.as_mut_slice());
        params
    }

    pub fn clamp_log_std(&mut self) {
        self.log_std.apply(|v| *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.actor.forward(obs)
    }

    /// Means for a batch (one column per observation) with the actor cache
    /// needed for backpropagation.
    pub fn mean_batch(&self, obs: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        let cache = self.actor.forward_batch(obs)?;
        Ok((cache.output().clone(), cache))
    }

    /// Actor gradients from gradients with respect to the means returned by
    /// [`GaussianPolicy::mean_batch`].
    pub fn backward_mean(&self, cache: &ForwardCache, grad_mean: &DMatrix<f64>) -> Result<Vec<Dense>> {
        self.actor.backward(cache, grad_mean)
    }

    /// Draws an unclipped action and its log-density.
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let mean = self.mean(obs)?;
        let action: Vec<f64> = mean
            .iter()
            .zip(self.log_std.iter())
            .map(|(&m, &ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let log_prob = gaussian_log_prob(&action, &mean, self.log_std.as_slice());
        Ok((action, log_prob))
    }

    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        Ok(gaussian_log_prob(action, &self.mean(obs)?, self.log_std.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_and_constant_maps() {
        let layer = Dense {
            weight: DMatrix::identity(3, 3),
            bias: DVector::zeros(3),
        };
        let net = Mlp::from_layers(vec![layer]).unwrap();
        assert_eq!(net.forward(&[0.5, -2.0, 7.0]).unwrap(), vec![0.5, -2.0, 7.0]);

        let mut net = Mlp::zeros(&[3, 4, 2]).unwrap();
        net.layers_mut()[1].bias = DVector::from_vec(vec![0.25, -1.5]);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.25, -1.5]);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn hidden_activations_are_bounded() {
        let net = Mlp::new(&[2, 16, 1], 1.0, &mut rng(1)).unwrap();
        let cache = net
            .forward_batch(&DMatrix::from_column_slice(2, 1, &[1e6, -1e6]))
            .unwrap();
        assert!(cache.activations[1].iter().all(|a| a.abs() <= 1.0));
        assert!(cache.output().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn parameter_count() {
        let net = Mlp::zeros(&[1, 256, 128, 64, 2]).unwrap();
        let expected = 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 * 2 + 2;
        assert_eq!(net.param_count(), expected);
        assert_eq!(net.sizes(), vec![1, 256, 128, 64, 2]);
    }

    #[test]
    fn orthogonal_init() {
        for (r, c) in [(8, 3), (3, 8), (5, 5)] {
            let w = orthogonal(r, c, 1.0, &mut rng(r as u64));
            let gram = if r >= c { w.transpose() * &w } else { &w * w.transpose() };
            let k = r.min(c);
            assert!((gram - DMatrix::<f64>::identity(k, k)).abs().max() < 1e-12);
        }
        let w = orthogonal(4, 4, 0.01, &mut rng(3));
        assert!(((w.transpose() * &w)[(0, 0)] - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let layer = Dense {
            weight: DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]),
            bias: DVector::from_vec(vec![0.0, 1.0]),
        };
        let net = Mlp::from_layers(vec![layer]).unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let g = DMatrix::from_column_slice(2, 1, &[0.7, -1.1]);
        let grads = net.backward(&net.forward_batch(&x).unwrap(), &g).unwrap();
        assert_eq!(grads[0].weight, &g * x.transpose());
        assert_eq!(grads[0].bias.as_slice(), g.as_slice());

        let zero = net
            .backward(&net.forward_batch(&x).unwrap(), &DMatrix::zeros(2, 1))
            .unwrap();
        assert!(zero.iter().all(|d| d.weight.iter().all(|&v| v == 0.0)));
    }

    /// Central differences of `L = Σ c ∘ net(x)` along random directions.
    pub(crate) fn directional_check(net: &Mlp, seed: u64) -> f64 {
        let mut r = rng(seed);
        let batch = 4;
        let x = DMatrix::from_fn(net.input_dim(), batch, |_, _| r.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(net.output_dim(), batch, |_, _| r.random_range(-1.0..1.0));
        let loss = |n: &Mlp| n.forward_batch(&x).unwrap().output().component_mul(&c).sum();
        let grads = net.backward(&net.forward_batch(&x).unwrap(), &c).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let dir: Vec<f64> = (0..net.param_count()).map(|_| r.sample(StandardNormal)).collect();
            let shifted = |sign: f64| {
                let mut n = net.clone();
                let mut k = 0;
                for slice in n.param_slices_mut() {
                    for v in slice.iter_mut() {
                        *v += sign * h * dir[k];
                        k += 1;
                    }
                }
                loss(&n)
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            // Parameter order of `param_slices_mut`: weight (column-major), bias.
            let mut analytic = 0.0;
            let mut k = 0;
            for d in &grads {
                for &g in d.weight.iter().chain(d.bias.iter()) {
                    analytic += g * dir[k];
                    k += 1;
                }
            }
            worst = worst.max((numeric - analytic).abs() / analytic.abs().max(1e-8));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, sizes) in [(1, vec![3, 8, 6, 2]), (2, vec![1, 16, 8, 4, 1]), (3, vec![2, 5, 2])] {
            let net = Mlp::new(&sizes, 1.0, &mut rng(seed)).unwrap();
            let err = directional_check(&net, seed + 10);
            assert!(err < 1e-5, "{sizes:?}: {err}");
        }
    }

    #[test]
    fn adam_first_step_and_fixed_point() {
        let mut p = [1.0, -2.0, 0.5];
        let mut adam = Adam::new(0.01, &[3]);
        adam.update(&mut [&mut p[..]], &[&[0.3, -4.0, 0.0][..]]).unwrap();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
        assert_eq!(adam.steps(), 1);

        let mut q = vec![3.0; 4];
        let mut adam = Adam::new(0.1, &[4]);
        for _ in 0..100 {
            adam.update(&mut [&mut q[..]], &[&[0.0; 4][..]]).unwrap();
        }
        assert_eq!(q, vec![3.0; 4]);
        assert!(adam.update(&mut [&mut q[..]], &[&[0.0; 3][..]]).is_err());
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut p = [0.0];
        let mut adam = Adam::new(1e-3, &[1]);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            adam.update(&mut [&mut p[..]], &[&[2.5][..]]).unwrap();
            last = before - p[0];
        }
        assert!((last - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn gaussian_density() {
        let lp = gaussian_log_prob(&[0.3, -0.2], &[0.3, -0.2], &[0.0, 0.0]);
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!((lp + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn sampling_statistics_and_degenerate_limit() {
        let mut net = Mlp::zeros(&[1, 4, 2]).unwrap();
        net.layers_mut()[1].bias = DVector::from_vec(vec![0.5, -0.25]);
        let policy = GaussianPolicy::with_log_std(net.clone(), vec![-0.5, 0.3]).unwrap();
        let mut r = rng(9);
        let n = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let (a, lp) = policy.sample(&[0.0], &mut r).unwrap();
            sums[0] += a[0];
            sums[1] += a[1];
            assert!((lp - policy.log_prob(&[0.0], &a).unwrap()).abs() < 1e-12);
        }
        let std = policy.std();
        assert!((sums[0] / n as f64 - 0.5).abs() < 3.0 * std[0] / (n as f64).sqrt());
        assert!((sums[1] / n as f64 + 0.25).abs() < 3.0 * std[1] / (n as f64).sqrt());

        let tight = GaussianPolicy::with_log_std(net, vec![-50.0, -50.0]).unwrap();
        assert_eq!(tight.log_std(), &[LOG_STD_MIN, LOG_STD_MIN]);
        let (a, _) = tight.sample(&[0.0], &mut r).unwrap();
        assert!((a[0] - 0.5).abs() < 0.05 && (a[1] + 0.25).abs() < 0.05);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let policy = GaussianPolicy::new(Mlp::new(&[2, 8, 2], 0.01, &mut rng(4)).unwrap());
        let draw = || {
            let mut r = rng(77);
            (0..20)
                .map(|_| policy.sample(&[0.1, 0.2], &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn serialisation_is_bit_exact() {
        let net = Mlp::new(&[3, 7, 5, 2], 0.01, &mut rng(5)).unwrap();
        let mut adam = Adam::new(5e-4, &net.param_lengths());
        let mut n2 = net.clone();
        let grads: Vec<Vec<f64>> = net.param_lengths().iter().map(|&l| vec![0.1; l]).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam.update(&mut n2.param_slices_mut(), &grad_refs).unwrap();

        let mut buf = Vec::new();
        n2.write_to(&mut buf).unwrap();
        adam.write_to(&mut buf).unwrap();
        let mut cursor = &buf[..];
        let back = Mlp::read_from(&mut cursor).unwrap();
        let adam_back = Adam::read_from(&mut cursor).unwrap();
        assert!(cursor.is_empty());
        assert_eq!(back, n2);
        assert_eq!(adam_back, adam);
        assert!(Mlp::read_from(&mut &buf[..5]).is_err());
    }
}
