//! Q-ensemble with frozen targets, random ensemble mixtures, and penalized
//! bootstrap targets.
//!
//! Heads map state features to one value per action. Actions here are 0-based
//! output indices; the agent maps item id `i` to index `i - 1`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{dim_check, Error, Result};
use crate::numerics::{DenseNet, GradientSet};
use crate::Scalar;

/// `K x A` matrix of per-head action values, row-major by head.
#[derive(Clone, Debug, PartialEq)]
pub struct QMatrix<T> {
    heads: usize,
    actions: usize,
    data: Vec<T>,
}

impl<T: Scalar> QMatrix<T> {
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let heads = rows.len();
        if heads == 0 {
            return Err(Error::Contract("q-matrix needs at least one head".into()));
        }
        let actions = rows[0].len();
        let mut data = Vec::with_capacity(heads * actions);
        for r in &rows {
            dim_check("q-matrix row", actions, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(QMatrix { heads, actions, data })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.data[k * self.actions..(k + 1) * self.actions]
    }

    pub fn get(&self, k: usize, a: usize) -> T {
        self.data[k * self.actions + a]
    }
}

/// Convex combination weights over the ensemble heads.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureWeights<T>(Vec<T>);

impl<T: Scalar> MixtureWeights<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&w| !(w >= T::zero()) || !w.is_finite()) {
            return Err(Error::Contract(format!("mixture weights must be non-negative: {weights:?}")));
        }
        let sum: T = weights.iter().copied().sum();
        if (sum - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::Contract(format!("mixture weights must sum to 1, got {sum}")));
        }
        Ok(MixtureWeights(weights))
    }

    pub fn uniform(k: usize) -> Self {
        MixtureWeights(vec![T::one() / T::lit(k as f64); k])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Draws `K` variates from uniform(0, 1] and normalizes them by their sum.
pub fn sample_mixture<T: Scalar, R: Rng + ?Sized>(k: usize, rng: &mut R) -> MixtureWeights<T> {
    assert!(k >= 1, "mixture needs at least one head");
    let raw: Vec<T> = (0..k).map(|_| T::lit(1.0 - rng.random::<f64>())).collect();
    let sum: T = raw.iter().copied().sum();
    MixtureWeights(raw.into_iter().map(|u| u / sum).collect())
}

/// Per-action convex combination of the head rows.
pub fn mixture_mean<T: Scalar>(qmat: &QMatrix<T>, alpha: &MixtureWeights<T>) -> Result<Vec<T>> {
    dim_check("mixture weights", qmat.heads(), alpha.len())?;
    let mut mean = vec![T::zero(); qmat.actions()];
    for (k, &w) in alpha.as_slice().iter().enumerate() {
        for (m, &q) in mean.iter_mut().zip(qmat.row(k)) {
            *m += w * q;
        }
    }
    Ok(mean)
}

/// Per-action sample standard deviation across heads (divisor `K - 1`).
pub fn uncertainty<T: Scalar>(qmat: &QMatrix<T>) -> Result<Vec<T>> {
    let k = qmat.heads();
    if k < 2 {
        return Err(Error::Config(format!("uncertainty needs at least 2 heads, got {k}")));
    }
    let inv_k = T::one() / T::lit(k as f64);
    let inv_dof = T::one() / T::lit((k - 1) as f64);
    Ok((0..qmat.actions())
        .map(|a| {
            let mean = (0..k).map(|h| qmat.get(h, a)).sum::<T>() * inv_k;
            let ss = (0..k)
                .map(|h| {
                    let d = qmat.get(h, a) - mean;
                    d * d
                })
                .sum::<T>();
            (ss * inv_dof).sqrt()
        })
        .collect())
}

/// `1 / (1 + lambda * sigma)`.
#[inline]
pub fn penalty_weight<T: Scalar>(sigma: T, lambda: T) -> T {
    T::one() / (T::one() + lambda * sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PenaltyMode {
    /// Plain random-ensemble-mixture target.
    None,
    /// Subtract `lambda * sigma` from each action value.
    PSub,
    /// Multiply each action value by `1 / (1 + lambda * sigma)`.
    PMul,
}

impl fmt::Display for PenaltyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyMode::None => "none",
            PenaltyMode::PSub => "p_sub",
            PenaltyMode::PMul => "p_mul",
        })
    }
}

impl FromStr for PenaltyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PenaltyMode::None),
            "p_sub" | "p-sub" => Ok(PenaltyMode::PSub),
            "p_mul" | "p-mul" => Ok(PenaltyMode::PMul),
            _ => Err(Error::Config(format!("unknown penalty mode {s:?} (none, p_sub, p_mul)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyConfig<T> {
    pub mode: PenaltyMode,
    pub lambda: T,
    pub gamma: T,
}

impl<T: Scalar> PenaltyConfig<T> {
    pub fn new(mode: PenaltyMode, lambda: T, gamma: T) -> Result<Self> {
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be a finite non-negative number, got {lambda}")));
        }
        if !(gamma >= T::zero() && gamma < T::one()) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        Ok(PenaltyConfig { mode, lambda, gamma })
    }
}

/// Bootstrap targets with diagnostics at the maximizing action.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch<T> {
    pub y: Vec<T>,
    pub argmax: Vec<usize>,
    pub sigma_at_max: Vec<T>,
    pub weight_at_max: Vec<T>,
}

impl<T: Scalar> TargetBatch<T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn mean_sigma(&self) -> T {
        mean(&self.sigma_at_max)
    }

    pub fn mean_weight(&self) -> T {
        mean(&self.weight_at_max)
    }
}

fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        T::zero()
    } else {
        xs.iter().copied().sum::<T>() / T::lit(xs.len() as f64)
    }
}

/// One transition's inputs to the target computation.
#[derive(Clone, Copy, Debug)]
pub struct BootstrapSample<'a, T> {
    pub reward: T,
    pub terminal: bool,
    /// Target-head values at the successor state.
    pub next_q: &'a QMatrix<T>,
}

/// Index of the first maximum.
fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Penalized bootstrap targets for one mixture draw.
///
/// `none`: `y = r + gamma * max_a mu(a)`; `p_sub`: `max_a (mu - lambda * sigma)`;
/// `p_mul`: `max_a mu * W`. Terminal transitions use `y = r`. The max runs over
/// every action the heads emit.
pub fn penalized_target<T: Scalar>(
    samples: &[BootstrapSample<'_, T>],
    cfg: &PenaltyConfig<T>,
    alpha: &MixtureWeights<T>,
) -> Result<TargetBatch<T>> {
    if samples.is_empty() {
        return Err(Error::Contract("target batch must be nonempty".into()));
    }
    let mut out = TargetBatch {
        y: Vec::with_capacity(samples.len()),
        argmax: Vec::with_capacity(samples.len()),
        sigma_at_max: Vec::with_capacity(samples.len()),
        weight_at_max: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let mu = mixture_mean(s.next_q, alpha)?;
        let sigma = if s.next_q.heads() >= 2 {
            uncertainty(s.next_q)?
        } else if cfg.mode == PenaltyMode::None {
            vec![T::zero(); mu.len()]
        } else {
            return Err(Error::Config(format!("{} needs at least 2 heads", cfg.mode)));
        };
        let values: Vec<T> = match cfg.mode {
            PenaltyMode::None => mu,
            PenaltyMode::PSub => mu.iter().zip(&sigma).map(|(&m, &sd)| m - cfg.lambda * sd).collect(),
            PenaltyMode::PMul => mu
                .iter()
                .zip(&sigma)
                .map(|(&m, &sd)| m * penalty_weight(sd, cfg.lambda))
                .collect(),
        };
        let best = argmax(&values);
        let y = if s.terminal {
            s.reward
        } else {
            s.reward + cfg.gamma * values[best]
        };
        if !y.is_finite() {
            return Err(Error::Divergence(format!("non-finite bootstrap target {y}")));
        }
        let w = match cfg.mode {
            PenaltyMode::None => T::one(),
            _ => penalty_weight(sigma[best], cfg.lambda),
        };
        out.y.push(y);
        out.argmax.push(best);
        out.sigma_at_max.push(sigma[best]);
        out.weight_at_max.push(w);
    }
    Ok(out)
}

/// K online Q-heads and their frozen target copies.
#[derive(Clone, Debug, PartialEq)]
pub struct QEnsemble<T> {
    heads: Vec<DenseNet<T>>,
    targets: Vec<DenseNet<T>>,
    updates_since_sync: u64,
}

impl<T: Scalar> QEnsemble<T> {
    /// `k` heads with the given layer dims, Glorot-initialized, targets synced.
    pub fn new<R: Rng + ?Sized>(k: usize, dims: &[usize], rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("ensemble needs at least one head".into()));
        }
        let heads = (0..k).map(|_| DenseNet::glorot(dims, rng)).collect::<Result<Vec<_>>>()?;
        Self::from_heads(heads)
    }

    pub fn from_heads(heads: Vec<DenseNet<T>>) -> Result<Self> {
        let targets = heads.clone();
        Self::from_parts(heads, targets)
    }

    pub fn from_parts(heads: Vec<DenseNet<T>>, targets: Vec<DenseNet<T>>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::Config("ensemble needs at least one head".into()));
        }
        dim_check("target head count", heads.len(), targets.len())?;
        let dims = heads[0].layer_dims().to_vec();
        for net in heads.iter().chain(&targets) {
            if net.layer_dims() != dims.as_slice() {
                return Err(Error::Contract("all heads and targets must share one shape".into()));
            }
        }
        Ok(QEnsemble {
            heads,
            targets,
            updates_since_sync: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn n_actions(&self) -> usize {
        self.heads[0].output_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.heads[0].input_dim()
    }

    pub fn heads(&self) -> &[DenseNet<T>] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [DenseNet<T>] {
        &mut self.heads
    }

    pub fn targets(&self) -> &[DenseNet<T>] {
        &self.targets
    }

    pub fn updates_since_sync(&self) -> u64 {
        self.updates_since_sync
    }

    pub fn record_update(&mut self) {
        self.updates_since_sync += 1;
    }

    pub fn set_updates_since_sync(&mut self, n: u64) {
        self.updates_since_sync = n;
    }

    /// Hard copy of every online head into its target.
    pub fn target_sync(&mut self) {
        for (t, h) in self.targets.iter_mut().zip(&self.heads) {
            t.copy_from(h);
        }
        self.updates_since_sync = 0;
    }

    fn check_features(&self, s: &[T]) -> Result<()> {
        dim_check("state features", self.state_dim(), s.len())?;
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence("non-finite state features".into()));
        }
        Ok(())
    }

    pub fn target_q_matrix(&self, s_next: &[T]) -> Result<QMatrix<T>> {
        self.check_features(s_next)?;
        QMatrix::from_rows(self.targets.iter().map(|t| t.forward(s_next)).collect::<Result<_>>()?)
    }

    pub fn online_q_matrix(&self, s: &[T]) -> Result<QMatrix<T>> {
        self.check_features(s)?;
        QMatrix::from_rows(self.heads.iter().map(|h| h.forward(s)).collect::<Result<_>>()?)
    }

    /// Equal-weight mean of the online heads for every action.
    pub fn mean_q(&self, s: &[T]) -> Result<Vec<T>> {
        let q = self.online_q_matrix(s)?;
        mixture_mean(&q, &MixtureWeights::uniform(self.k()))
    }

    /// Equal-weight mean of the online heads for one action.
    pub fn mean_q_action(&self, s: &[T], action: usize) -> Result<T> {
        self.check_features(s)?;
        let mut acc = T::zero();
        for h in &self.heads {
            acc += h.forward_unit(s, action)?;
        }
        Ok(acc / T::lit(self.k() as f64))
    }

    /// `sum_k alpha_k Q_k(s, action)`.
    pub fn mixture_prediction(&self, s: &[T], action: usize, alpha: &MixtureWeights<T>) -> Result<T> {
        dim_check("mixture weights", self.k(), alpha.len())?;
        self.check_features(s)?;
        let mut acc = T::zero();
        for (h, &w) in self.heads.iter().zip(alpha.as_slice()) {
            acc += w * h.forward_unit(s, action)?;
        }
        Ok(acc)
    }
}

/// Loss and gradients of `mean_b 1/2 (y_b - sum_k alpha_k Q_k(s_b, a_b))^2`
/// with the targets held constant.
#[derive(Clone, Debug)]
pub struct TdGradients<T> {
    pub loss: T,
    /// One gradient set per online head.
    pub heads: Vec<GradientSet<T>>,
    /// Gradient with respect to each sample's state features.
    pub features: Vec<Vec<T>>,
}

pub fn td_loss_and_grads<T: Scalar>(
    ens: &QEnsemble<T>,
    features: &[Vec<T>],
    actions: &[usize],
    alpha: &MixtureWeights<T>,
    targets: &[T],
) -> Result<TdGradients<T>> {
    let b = features.len();
    if b == 0 {
        return Err(Error::Contract("td batch must be nonempty".into()));
    }
    dim_check("td actions", b, actions.len())?;
    dim_check("td targets", b, targets.len())?;
    let inv_b = T::one() / T::lit(b as f64);
    let half = T::lit(0.5);
    let mut grads = TdGradients {
        loss: T::zero(),
        heads: ens.heads.iter().map(GradientSet::zeros_like).collect(),
        features: Vec::with_capacity(b),
    };
    for ((s, &a), &y) in features.iter().zip(actions).zip(targets) {
        let pred = ens.mixture_prediction(s, a, alpha)?;
        let err = y - pred;
        grads.loss += half * err * err * inv_b;
        let dpred = -err * inv_b;
        let mut fgrad = vec![T::zero(); s.len()];
        for ((h, g), &w) in ens.heads.iter().zip(grads.heads.iter_mut()).zip(alpha.as_slice()) {
            let gin = h.accumulate_backward_unit(s, a, w * dpred, g)?;
            for (f, x) in fgrad.iter_mut().zip(gin) {
                *f += x;
            }
        }
        grads.features.push(fgrad);
    }
    if !grads.loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite td loss {}", grads.loss)));
    }
    Ok(grads)
}
