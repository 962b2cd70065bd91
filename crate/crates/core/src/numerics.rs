//! Dense tanh networks with manual backpropagation, Adam, and finite-difference
//! gradient verification.
//!
//! Parameters are stored per layer: weights row-major as `out x in`, then the
//! bias vector. The flat parameter order used by checkpoints, gradient checks
//! and [`GradientSet::flat`] is `W0, b0, W1, b1, ...`.

use rand::Rng;

use crate::error::{dim_check, Error, Result};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet<T> {
    dims: Vec<usize>,
    weights: Vec<Vec<T>>,
    biases: Vec<Vec<T>>,
}

/// Gradient with respect to every parameter of a [`DenseNet`], shape-matched.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Contract(format!(
            "a network needs at least 2 layer dims, got {}",
            dims.len()
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Contract(format!("layer dims must be positive: {dims:?}")));
    }
    Ok(())
}

impl<T: Scalar> DenseNet<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        let weights = dims.windows(2).map(|w| vec![T::zero(); w[0] * w[1]]).collect();
        let biases = dims[1..].iter().map(|&d| vec![T::zero(); d]).collect();
        Ok(DenseNet {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        for (l, w) in net.weights.iter_mut().enumerate() {
            let limit = (6.0 / (dims[l] + dims[l + 1]) as f64).sqrt();
            for x in w.iter_mut() {
                *x = T::lit(rng.random_range(-limit..=limit));
            }
        }
        Ok(net)
    }

    /// Single linear layer computing the identity map on `n` inputs.
    pub fn identity(n: usize) -> Result<Self> {
        let mut net = Self::zeros(&[n, n])?;
        for i in 0..n {
            net.weights[0][i * n + i] = T::one();
        }
        Ok(net)
    }

    pub fn from_parts(dims: &[usize], weights: Vec<Vec<T>>, biases: Vec<Vec<T>>) -> Result<Self> {
        validate_dims(dims)?;
        dim_check("weight layer count", dims.len() - 1, weights.len())?;
        dim_check("bias layer count", dims.len() - 1, biases.len())?;
        for l in 0..dims.len() - 1 {
            dim_check("weight matrix size", dims[l] * dims[l + 1], weights[l].len())?;
            dim_check("bias vector size", dims[l + 1], biases[l].len())?;
        }
        let net = DenseNet {
            dims: dims.to_vec(),
            weights,
            biases,
        };
        if !net.is_finite() {
            return Err(Error::Contract("network parameters must be finite".into()));
        }
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [T] {
        &mut self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[T] {
        &self.biases[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [T] {
        &mut self.biases[layer]
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|x| x.is_finite())
    }

    /// Parameters in flat order.
    pub fn params(&self) -> impl Iterator<Item = &T> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    /// Mutable parameter slices in flat order, one per weight matrix and bias.
    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.len(), b.len()])
            .collect()
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut T {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if index < w.len() {
                return &mut w[index];
            }
            index -= w.len();
            if index < b.len() {
                return &mut b[index];
            }
            index -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// Copies every parameter from `other`, which must have identical dims.
    pub fn copy_from(&mut self, other: &DenseNet<T>) {
        assert_eq!(self.dims, other.dims, "copy_from requires identical shapes");
        for (dst, src) in self.weights.iter_mut().zip(&other.weights) {
            dst.copy_from_slice(src);
        }
        for (dst, src) in self.biases.iter_mut().zip(&other.biases) {
            dst.copy_from_slice(src);
        }
    }

    fn affine(&self, layer: usize, input: &[T], out: &mut Vec<T>) {
        let n_in = self.dims[layer];
        let w = &self.weights[layer];
        out.clear();
        out.extend(self.biases[layer].iter().enumerate().map(|(o, &b)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            row.iter().zip(input).fold(b, |acc, (&wi, &xi)| acc + wi * xi)
        }));
    }

    /// Activations of every layer, starting with the input itself.
    fn trace(&self, input: &[T]) -> Vec<Vec<T>> {
        let last = self.num_layers() - 1;
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(input.to_vec());
        for l in 0..=last {
            let mut z = Vec::with_capacity(self.dims[l + 1]);
            self.affine(l, &acts[l], &mut z);
            if l < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        dim_check("forward input", self.input_dim(), input.len())?;
        Ok(self.trace(input).pop().unwrap())
    }

    /// Penultimate activation (the input of the output layer).
    pub fn penultimate(&self, input: &[T]) -> Result<Vec<T>> {
        dim_check("forward input", self.input_dim(), input.len())?;
        let mut acts = self.trace_hidden(input);
        Ok(acts.pop().unwrap())
    }

    fn trace_hidden(&self, input: &[T]) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(self.dims.len() - 1);
        acts.push(input.to_vec());
        for l in 0..self.num_layers() - 1 {
            let mut z = Vec::with_capacity(self.dims[l + 1]);
            self.affine(l, &acts[l], &mut z);
            z.iter_mut().for_each(|v| *v = v.tanh());
            acts.push(z);
        }
        acts
    }

    /// A single output unit; the output layer is evaluated for that row only.
    pub fn forward_unit(&self, input: &[T], unit: usize) -> Result<T> {
        dim_check("forward input", self.input_dim(), input.len())?;
        self.check_unit(unit)?;
        let acts = self.trace_hidden(input);
        Ok(self.output_unit(acts.last().unwrap(), unit))
    }

    fn output_unit(&self, h: &[T], unit: usize) -> T {
        let l = self.num_layers() - 1;
        let n_in = self.dims[l];
        let row = &self.weights[l][unit * n_in..(unit + 1) * n_in];
        row.iter().zip(h).fold(self.biases[l][unit], |acc, (&w, &x)| acc + w * x)
    }

    fn check_unit(&self, unit: usize) -> Result<()> {
        if unit >= self.output_dim() {
            return Err(Error::Contract(format!(
                "output unit {unit} out of range for output dim {}",
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Gradient of `output . output_grad` with respect to every parameter.
    pub fn backward(&self, input: &[T], output_grad: &[T]) -> Result<GradientSet<T>> {
        let mut grads = GradientSet::zeros_like(self);
        self.accumulate_backward(input, output_grad, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradient of `output . output_grad` into `grads` and
    /// returns the gradient with respect to `input`.
    pub fn accumulate_backward(
        &self,
        input: &[T],
        output_grad: &[T],
        grads: &mut GradientSet<T>,
    ) -> Result<Vec<T>> {
        dim_check("backward input", self.input_dim(), input.len())?;
        dim_check("backward output grad", self.output_dim(), output_grad.len())?;
        let acts = self.trace(input);
        let last = self.num_layers() - 1;
        let upstream = self.layer_backward(last, &acts[last], output_grad, grads);
        Ok(self.backprop_hidden(&acts, upstream, grads))
    }

    /// Like [`accumulate_backward`](Self::accumulate_backward) with an output
    /// gradient that is `grad` on `unit` and zero elsewhere.
    pub fn accumulate_backward_unit(
        &self,
        input: &[T],
        unit: usize,
        grad: T,
        grads: &mut GradientSet<T>,
    ) -> Result<Vec<T>> {
        dim_check("backward input", self.input_dim(), input.len())?;
        self.check_unit(unit)?;
        let acts = self.trace_hidden(input);
        let last = self.num_layers() - 1;
        let h = &acts[last];
        let n_in = self.dims[last];
        let row = &self.weights[last][unit * n_in..(unit + 1) * n_in];
        let grow = &mut grads.weights[last][unit * n_in..(unit + 1) * n_in];
        let mut upstream = vec![T::zero(); n_in];
        for i in 0..n_in {
            grow[i] += grad * h[i];
            upstream[i] = grad * row[i];
        }
        grads.biases[last][unit] += grad;
        Ok(self.backprop_hidden(&acts, upstream, grads))
    }

    fn backprop_hidden(&self, acts: &[Vec<T>], mut upstream: Vec<T>, grads: &mut GradientSet<T>) -> Vec<T> {
        for l in (0..self.num_layers() - 1).rev() {
            let delta: Vec<T> = upstream
                .iter()
                .zip(&acts[l + 1])
                .map(|(&g, &a)| g * (T::one() - a * a))
                .collect();
            upstream = self.layer_backward(l, &acts[l], &delta, grads);
        }
        upstream
    }

    fn layer_backward(&self, layer: usize, input: &[T], delta: &[T], grads: &mut GradientSet<T>) -> Vec<T> {
        let n_in = self.dims[layer];
        let w = &self.weights[layer];
        let gw = &mut grads.weights[layer];
        let gb = &mut grads.biases[layer];
        let mut gin = vec![T::zero(); n_in];
        for (o, &d) in delta.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            gb[o] += d;
            let row = &w[o * n_in..(o + 1) * n_in];
            let grow = &mut gw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                grow[i] += d * input[i];
                gin[i] += d * row[i];
            }
        }
        gin
    }
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(net: &DenseNet<T>) -> Self {
        GradientSet {
            weights: net.weights.iter().map(|w| vec![T::zero(); w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    pub fn flat(&self) -> impl Iterator<Item = &T> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn blocks(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn scale(&mut self, c: T) {
        self.flat_mut().for_each(|g| *g *= c);
    }

    pub fn add_assign(&mut self, other: &GradientSet<T>) {
        for (a, b) in self.flat_mut().zip(other.flat()) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat().all(|g| g.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.flat().all(|g| *g == T::zero())
    }

    pub fn norm(&self) -> T {
        self.flat().map(|&g| g * g).sum::<T>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        AdamConfig {
            lr: T::lit(1e-3),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

/// Adam moments for a list of parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig<T>,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(block_sizes: &[usize], config: AdamConfig<T>) -> Self {
        AdamState {
            config,
            step: 0,
            m: block_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: block_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_net(net: &DenseNet<T>, config: AdamConfig<T>) -> Self {
        Self::new(&net.block_sizes(), config)
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<T>] {
        &self.v
    }

    /// One Adam update over matching parameter and gradient blocks. Nothing is
    /// modified when any gradient entry is non-finite.
    pub fn apply(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        dim_check("adam block count", self.m.len(), params.len())?;
        dim_check("adam gradient block count", self.m.len(), grads.len())?;
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            dim_check("adam parameter block", m.len(), p.len())?;
            dim_check("adam gradient block", m.len(), g.len())?;
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence("non-finite gradient entry".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step.min(i32::MAX as u64) as i32;
        let c1 = T::one() - beta1.powi(t);
        let c2 = T::one() - beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (T::one() - beta1) * gi;
                v[i] = beta2 * v[i] + (T::one() - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step<T: Scalar>(net: &mut DenseNet<T>, grads: &GradientSet<T>, state: &mut AdamState<T>) -> Result<()> {
    let g = grads.blocks();
    let mut p = net.blocks_mut();
    state.apply(&mut p, &g)
}

/// Central-difference step used by the gradient checks (double precision).
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so exact zeros compare absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compares `analytic` against central differences of `perturbed_loss(i, d)`,
/// which must return the loss with parameter `i` shifted by `d`.
pub fn check_gradient<T, F>(analytic: &[T], step: T, tol: f64, mut perturbed_loss: F) -> GradCheckReport
where
    T: Scalar,
    F: FnMut(usize, T) -> T,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: analytic.len(),
        tol,
    };
    let two = T::lit(2.0);
    for (i, &a) in analytic.iter().enumerate() {
        let plus = perturbed_loss(i, step);
        let minus = perturbed_loss(i, -step);
        let numeric = (plus - minus) / (two * step);
        let err = relative_error(a.as_f64(), numeric.as_f64());
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_index = Some(i);
        }
    }
    report
}

/// Gradient check of `backward` for a scalar loss of the network output.
/// `loss` returns the loss value and its gradient with respect to the output.
pub fn finite_diff_check<T, L>(net: &DenseNet<T>, input: &[T], loss: L, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    L: Fn(&[T]) -> (T, Vec<T>),
{
    let out = net.forward(input)?;
    let (_, out_grad) = loss(&out);
    let grads = net.backward(input, &out_grad)?;
    let analytic: Vec<T> = grads.flat().copied().collect();
    check_gradient_of_net(net, input, &analytic, loss, tol)
}

/// Gradient check against an externally supplied gradient (negative controls).
pub fn check_gradient_of_net<T, L>(
    net: &DenseNet<T>,
    input: &[T],
    analytic: &[T],
    loss: L,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    L: Fn(&[T]) -> (T, Vec<T>),
{
    dim_check("analytic gradient length", net.num_params(), analytic.len())?;
    let mut work = net.clone();
    let mut failure = None;
    let report = check_gradient(analytic, T::lit(FD_STEP), tol, |i, d| {
        let saved = *work.param_mut(i);
        *work.param_mut(i) = saved + d;
        let value = match work.forward(input) {
            Ok(out) => loss(&out).0,
            Err(e) => {
                failure = Some(e);
                T::nan()
            }
        };
        *work.param_mut(i) = saved;
        value
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_net(rng: &mut impl Rng, dims: &[usize]) -> DenseNet<f64> {
        let mut net = DenseNet::glorot(dims, rng).unwrap();
        for l in 0..net.num_layers() {
            for b in net.biases_mut(l) {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        net
    }

    /// Independent evaluation: explicit nested loops over (out, in).
    fn oracle_forward(net: &DenseNet<f64>, x: &[f64]) -> Vec<f64> {
        let dims = net.layer_dims();
        let mut a = x.to_vec();
        for l in 0..dims.len() - 1 {
            let mut z = vec![0.0; dims[l + 1]];
            for o in 0..dims[l + 1] {
                let mut s = net.biases(l)[o];
                for i in 0..dims[l] {
                    s += net.weights(l)[o * dims[l] + i] * a[i];
                }
                z[o] = if l + 2 < dims.len() { s.tanh() } else { s };
            }
            a = z;
        }
        a
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::<f64>::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = DenseNet::<f64>::identity(4).unwrap();
        let v = [0.5, -1.5, 2.0, 7.0];
        assert_eq!(net.forward(&v).unwrap(), v.to_vec());
    }

    #[test]
    fn forward_matches_hand_rolled_evaluation() {
        let mut rng = rng_from(11);
        for _ in 0..20 {
            let net = random_net(&mut rng, &[3, 4, 2]);
            let x = random_vec(&mut rng, 3);
            let got = net.forward(&x).unwrap();
            let want = oracle_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-14, "{g} vs {w}");
            }
            for u in 0..2 {
                assert!((net.forward_unit(&x, u).unwrap() - want[u]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = DenseNet::<f64>::zeros(&[3, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Contract(_))));
        assert!(matches!(net.backward(&[1.0, 2.0, 3.0], &[1.0]), Err(Error::Contract(_))));
        assert!(DenseNet::<f64>::zeros(&[3]).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = rng_from(2);
        let net = random_net(&mut rng, &[3, 4, 2]);
        let g = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut rng = rng_from(3);
        let net = random_net(&mut rng, &[3, 2]);
        let x = [0.5, -1.0, 2.0];
        let g = [3.0, -0.25];
        let grads = net.backward(&x, &g).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(grads.weights[0][o * 3 + i], g[o] * x[i]);
            }
        }
        assert_eq!(grads.biases[0], g.to_vec());
    }

    #[test]
    fn unit_backward_equals_one_hot_dense_backward() {
        let mut rng = rng_from(4);
        let net = random_net(&mut rng, &[5, 6, 4]);
        let x = random_vec(&mut rng, 5);
        let mut dense = GradientSet::zeros_like(&net);
        let gin_dense = net.accumulate_backward(&x, &[0.0, 0.0, 1.7, 0.0], &mut dense).unwrap();
        let mut unit = GradientSet::zeros_like(&net);
        let gin_unit = net.accumulate_backward_unit(&x, 2, 1.7, &mut unit).unwrap();
        assert_eq!(dense, unit);
        assert_eq!(gin_dense, gin_unit);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from(5);
        for _ in 0..10 {
            let net = random_net(&mut rng, &[4, 7, 5, 3]);
            let x = random_vec(&mut rng, 4);
            let target = random_vec(&mut rng, 3);
            let loss = |y: &[f64]| {
                let d: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
                (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
            };
            let report = finite_diff_check(&net, &x, loss, 1e-4).unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = rng_from(6);
        let net = random_net(&mut rng, &[4, 6, 3]);
        let x = random_vec(&mut rng, 4);
        let w = random_vec(&mut rng, 3);
        let mut grads = GradientSet::zeros_like(&net);
        let gin = net.accumulate_backward(&x, &w, &mut grads).unwrap();
        let report = check_gradient(&gin, FD_STEP, 1e-4, |i, d| {
            let mut xp = x.clone();
            xp[i] += d;
            net.forward(&xp).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
        });
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn quadratic_loss_on_zero_net_is_exact() {
        let net = DenseNet::<f64>::zeros(&[2, 3, 2]).unwrap();
        let loss = |y: &[f64]| {
            let d = vec![y[0] - 1.0, y[1] + 0.5];
            (0.5 * (d[0] * d[0] + d[1] * d[1]), d)
        };
        let report = finite_diff_check(&net, &[0.3, 0.7], loss, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let mut rng = rng_from(7);
        let net = random_net(&mut rng, &[3, 4, 2]);
        let x = random_vec(&mut rng, 3);
        let loss = |y: &[f64]| (y[0] * y[0] + y[1], vec![2.0 * y[0], 1.0]);
        let out = net.forward(&x).unwrap();
        let mut analytic: Vec<f64> = net.backward(&x, &loss(&out).1).unwrap().flat().copied().collect();
        analytic[5] += 0.1;
        let report = check_gradient_of_net(&net, &x, &analytic, loss, 1e-4).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst_index, Some(5));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut rng = rng_from(8);
        let mut net = random_net(&mut rng, &[3, 4, 2]);
        let before = net.clone();
        let mut state = AdamState::for_net(&net, AdamConfig::default());
        let zero = GradientSet::zeros_like(&net);
        for _ in 0..5 {
            adam_step(&mut net, &zero, &mut state).unwrap();
        }
        assert_eq!(net, before);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut net = DenseNet::<f64>::zeros(&[2, 2]).unwrap();
        let mut grads = GradientSet::zeros_like(&net);
        for (i, g) in grads.flat_mut().enumerate() {
            *g = if i % 2 == 0 { 0.3 } else { -4.0 };
        }
        let cfg = AdamConfig::default();
        let mut state = AdamState::for_net(&net, cfg);
        adam_step(&mut net, &grads, &mut state).unwrap();
        for (p, g) in net.params().zip(grads.flat()) {
            assert!((p + cfg.lr * g.signum()).abs() < 1e-9, "{p}");
        }
    }

    #[test]
    fn adam_two_steps_match_moment_recursion() {
        let cfg = AdamConfig { lr: 0.01, beta1: 0.8, beta2: 0.95, eps: 1e-6 };
        let mut net = DenseNet::<f64>::zeros(&[1, 1]).unwrap();
        *net.param_mut(0) = 0.5;
        let mut state = AdamState::for_net(&net, cfg);
        let gs = [0.2, -0.6];
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            let mut grads = GradientSet::zeros_like(&net);
            grads.weights[0][0] = g;
            adam_step(&mut net, &grads, &mut state).unwrap();
            // scripted recurrence
            m = 0.8 * m + 0.2 * g;
            v = 0.95 * v + 0.05 * g * g;
            let k = (t + 1) as i32;
            let mh = m / (1.0 - 0.8f64.powi(k));
            let vh = v / (1.0 - 0.95f64.powi(k));
            p -= 0.01 * mh / (vh.sqrt() + 1e-6);
        }
        assert!((net.weights(0)[0] - p).abs() < 1e-15);
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut net = DenseNet::<f64>::zeros(&[2, 1]).unwrap();
        let before = net.clone();
        let mut grads = GradientSet::zeros_like(&net);
        grads.weights[0][1] = f64::NAN;
        let mut state = AdamState::for_net(&net, AdamConfig::default());
        assert!(matches!(adam_step(&mut net, &grads, &mut state), Err(Error::Divergence(_))));
        assert_eq!(net, before);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn glorot_respects_bounds_and_zero_biases() {
        let mut rng = rng_from(9);
        let net = DenseNet::<f64>::glorot(&[10, 6], &mut rng).unwrap();
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(net.weights(0).iter().all(|w| w.abs() <= limit));
        assert!(net.biases(0).iter().all(|&b| b == 0.0));
    }

    #[test]
    fn works_in_single_precision() {
        let net = DenseNet::<f32>::identity(3).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0f32, 2.0, 3.0]);
    }

    proptest! {
        #[test]
        fn forward_is_bitwise_deterministic(seed in any::<u64>(), xs in prop::collection::vec(-3.0f64..3.0, 4)) {
            let mut rng = rng_from(seed);
            let net = random_net(&mut rng, &[4, 5, 3]);
            let copy = net.clone();
            let a = net.forward(&xs).unwrap();
            let b = copy.forward(&xs).unwrap();
            prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
