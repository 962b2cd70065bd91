//! Ground-truth environments: a latent-factor session simulator and an
//! enumerable micro-MDP with exact value iteration.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Behavior, SessionRecord};
use crate::encoder::{ItemId, StateWindow, PADDING};
use crate::error::{Error, Result};
use crate::seed::{indexed_seed, rng_from};

/// A serving policy: picks the next item from the current window.
pub trait Policy {
    fn act(&self, window: &StateWindow) -> Result<ItemId>;
}

impl<F: Fn(&StateWindow) -> Result<ItemId>> Policy for F {
    fn act(&self, window: &StateWindow) -> Result<ItemId> {
        self(window)
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, std_err, n }
    }
}

pub fn behavior_for_reward(r: f64) -> Behavior {
    if r >= 1.0 {
        Behavior::Purchase
    } else if r > 0.0 {
        Behavior::Click
    } else {
        Behavior::Skip
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn unit_gaussian<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub n_items: usize,
    pub d_latent: usize,
    pub theta_click: f64,
    pub theta_purchase: f64,
    pub drift: f64,
    pub p_end: f64,
    /// Pull of user latents toward the population center.
    pub user_concentration: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_items: 200,
            d_latent: 8,
            theta_click: 0.3,
            theta_purchase: 0.75,
            drift: 0.1,
            p_end: 0.05,
            user_concentration: 0.5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_items == 0 || self.n_items > u32::MAX as usize {
            return bad(format!("n_items must be in 1..2^32, got {}", self.n_items));
        }
        if self.d_latent == 0 {
            return bad("d_latent must be positive".into());
        }
        if !(self.theta_purchase > self.theta_click) {
            return bad(format!(
                "purchase threshold {} must exceed click threshold {}",
                self.theta_purchase, self.theta_click
            ));
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return bad(format!("drift must lie in [0, 1], got {}", self.drift));
        }
        if !(self.p_end > 0.0 && self.p_end <= 1.0) {
            return bad(format!("p_end must lie in (0, 1], got {}", self.p_end));
        }
        if !(self.user_concentration >= 0.0) {
            return bad("user_concentration must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserState {
    pub latent: Vec<f64>,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub event: Behavior,
    pub user: UserState,
    pub ended: bool,
}

/// Unit item latents, a population center, and threshold rewards on affinity.
#[derive(Clone, Debug, PartialEq)]
pub struct SimWorld {
    pub config: SimConfig,
    items: Vec<Vec<f64>>,
    center: Vec<f64>,
}

impl SimWorld {
    pub fn new<R: Rng + ?Sized>(config: SimConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let center = unit_gaussian(config.d_latent, rng);
        let items = (0..config.n_items).map(|_| unit_gaussian(config.d_latent, rng)).collect();
        Ok(SimWorld { config, items, center })
    }

    /// Latents are normalized on the way in.
    pub fn from_parts(config: SimConfig, mut items: Vec<Vec<f64>>, mut center: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if items.len() != config.n_items || center.len() != config.d_latent {
            return Err(Error::Config("latent shapes disagree with the config".into()));
        }
        for v in items.iter_mut() {
            if v.len() != config.d_latent {
                return Err(Error::Config("item latent dimension mismatch".into()));
            }
            normalize(v);
        }
        normalize(&mut center);
        Ok(SimWorld { config, items, center })
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn item(&self, id: ItemId) -> &[f64] {
        &self.items[id as usize - 1]
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// `normalize(concentration * center + z / sqrt(d))`, `z` standard normal.
    pub fn sample_user<R: Rng + ?Sized>(&self, rng: &mut R) -> UserState {
        let d = self.config.d_latent;
        let scale = 1.0 / (d as f64).sqrt();
        let mut latent: Vec<f64> = self
            .center
            .iter()
            .map(|&c| {
                let z: f64 = StandardNormal.sample(rng);
                self.config.user_concentration * c + z * scale
            })
            .collect();
        normalize(&mut latent);
        UserState { latent, steps: 0 }
    }

    pub fn affinity(&self, user: &UserState, item: ItemId) -> f64 {
        dot(&user.latent, self.item(item))
    }

    /// Highest-affinity item outside `exclude` (the whole catalog if everything is excluded).
    pub fn best_item(&self, user: &UserState, exclude: &[ItemId]) -> ItemId {
        let mut best = None;
        let mut best_a = f64::NEG_INFINITY;
        for id in 1..=self.n_items() as ItemId {
            if exclude.contains(&id) {
                continue;
            }
            let a = self.affinity(user, id);
            if a > best_a {
                best_a = a;
                best = Some(id);
            }
        }
        best.unwrap_or_else(|| self.best_item(user, &[]))
    }

    pub fn check_action(&self, action: ItemId) -> Result<()> {
        if action == PADDING || action as usize > self.n_items() {
            return Err(Error::Contract(format!("action {action} outside 1..={}", self.n_items())));
        }
        Ok(())
    }

    pub fn reward_for(&self, user: &UserState, action: ItemId) -> f64 {
        let a = self.affinity(user, action);
        if a >= self.config.theta_purchase {
            1.0
        } else if a >= self.config.theta_click {
            0.2
        } else {
            0.0
        }
    }

    /// Runs `n_episodes` sessions under `policy`, maintaining a window of every
    /// served item, and averages the discounted returns.
    pub fn true_return(
        &self,
        policy: &impl Policy,
        window_len: usize,
        n_episodes: usize,
        gamma: f64,
        seed: u64,
    ) -> Result<Estimate> {
        if n_episodes == 0 {
            return Err(Error::Config("n_episodes must be at least 1".into()));
        }
        let mut returns = Vec::with_capacity(n_episodes);
        for ep in 0..n_episodes {
            let mut rng = rng_from(indexed_seed(seed, ep as u64));
            let mut user = self.sample_user(&mut rng);
            let mut window = StateWindow::empty(window_len);
            let (mut g, mut disc) = (0.0, 1.0);
            loop {
                let a = policy.act(&window)?;
                let out = env_step(self, &user, a, &mut rng)?;
                g += disc * out.reward;
                disc *= gamma;
                if out.ended {
                    break;
                }
                window = window.push_item(a)?;
                user = out.user;
            }
            returns.push(g);
        }
        Ok(Estimate::from_samples(&returns))
    }
}

pub fn env_step<R: Rng + ?Sized>(world: &SimWorld, user: &UserState, action: ItemId, rng: &mut R) -> Result<StepOutcome> {
    world.check_action(action)?;
    let reward = world.reward_for(user, action);
    let mut next = user.clone();
    next.steps += 1;
    let d = world.config.drift;
    if reward > 0.0 && d > 0.0 {
        let v = world.item(action);
        for (u, &x) in next.latent.iter_mut().zip(v) {
            *u = (1.0 - d) * *u + d * x;
        }
        normalize(&mut next.latent);
    }
    let ended = rng.random::<f64>() < world.config.p_end;
    Ok(StepOutcome {
        reward,
        event: behavior_for_reward(reward),
        user: next,
        ended,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BehaviorPolicy {
    /// Softmax over item alignment with the population center.
    Popularity { temperature: f64 },
    /// With probability `1 - epsilon` the best item for the current user that
    /// is not in the recent window, else uniform.
    EpsilonOracle { epsilon: f64 },
    Uniform,
}

impl Default for BehaviorPolicy {
    fn default() -> Self {
        BehaviorPolicy::EpsilonOracle { epsilon: 0.5 }
    }
}

impl BehaviorPolicy {
    pub fn parse(kind: &str, param: f64) -> Result<Self> {
        let p = match kind {
            "popularity" => BehaviorPolicy::Popularity { temperature: param },
            "epsilon_oracle" => BehaviorPolicy::EpsilonOracle { epsilon: param },
            "uniform" => BehaviorPolicy::Uniform,
            _ => return Err(Error::Config(format!("unknown behavior policy {kind:?}"))),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BehaviorPolicy::Popularity { temperature } if !(temperature > 0.0) => {
                Err(Error::Config("popularity temperature must be positive".into()))
            }
            BehaviorPolicy::EpsilonOracle { epsilon } if !(0.0..=1.0).contains(&epsilon) => {
                Err(Error::Config("epsilon must lie in [0, 1]".into()))
            }
            _ => Ok(()),
        }
    }

    /// Action probabilities given the recent window; entry `i` is item `i + 1`.
    pub fn distribution(&self, world: &SimWorld, user: &UserState, recent: &[ItemId]) -> Vec<f64> {
        let n = world.n_items();
        match *self {
            BehaviorPolicy::Uniform => vec![1.0 / n as f64; n],
            BehaviorPolicy::EpsilonOracle { epsilon } => {
                let mut p = vec![epsilon / n as f64; n];
                p[world.best_item(user, recent) as usize - 1] += 1.0 - epsilon;
                p
            }
            BehaviorPolicy::Popularity { temperature } => {
                let logits: Vec<f64> = world.items.iter().map(|v| dot(v, &world.center) / temperature).collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, world: &SimWorld, user: &UserState, recent: &[ItemId], rng: &mut R) -> ItemId {
        let n = world.n_items() as ItemId;
        match *self {
            BehaviorPolicy::Uniform => rng.random_range(1..=n),
            BehaviorPolicy::EpsilonOracle { epsilon } => {
                if rng.random::<f64>() < epsilon {
                    rng.random_range(1..=n)
                } else {
                    world.best_item(user, recent)
                }
            }
            BehaviorPolicy::Popularity { .. } => {
                let p = self.distribution(world, user, recent);
                let mut u = rng.random::<f64>();
                for (i, &pi) in p.iter().enumerate() {
                    if u < pi {
                        return i as ItemId + 1;
                    }
                    u -= pi;
                }
                n
            }
        }
    }
}

/// Logs `n_sessions` sessions; session `i` draws from its own stream
/// `indexed_seed(seed, i)`. Timestamps are step indices within the session.
/// The policy sees the last `window_len` logged items.
pub fn generate_dataset(
    world: &SimWorld,
    policy: &BehaviorPolicy,
    n_sessions: usize,
    window_len: usize,
    seed: u64,
) -> Result<Vec<SessionRecord>> {
    if n_sessions == 0 {
        return Err(Error::Config("n_sessions must be at least 1".into()));
    }
    if window_len == 0 {
        return Err(Error::Config("window_len must be at least 1".into()));
    }
    policy.validate()?;
    let mut out = Vec::new();
    for s in 0..n_sessions {
        let mut rng = rng_from(indexed_seed(seed, s as u64));
        let mut user = world.sample_user(&mut rng);
        let mut window = StateWindow::empty(window_len);
        for t in 0.. {
            let a = policy.sample(world, &user, window.interacted(), &mut rng);
            window = window.push_item(a)?;
            let step = env_step(world, &user, a, &mut rng)?;
            out.push(SessionRecord {
                session_id: s.to_string(),
                timestamp: t,
                item_id: a as u64,
                behavior: step.event,
            });
            if step.ended {
                break;
            }
            user = step.user;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MicroConfig {
    pub n_items: usize,
    /// Fraction of actions logged per state.
    pub coverage: f64,
    pub p_end_min: f64,
    pub p_end_max: f64,
    /// Probabilities of rewards 0, 0.2 and 1.0.
    pub reward_probs: [f64; 3],
}

impl Default for MicroConfig {
    fn default() -> Self {
        MicroConfig {
            n_items: 8,
            coverage: 0.3,
            p_end_min: 0.05,
            p_end_max: 0.3,
            reward_probs: [0.5, 0.3, 0.2],
        }
    }
}

pub const MICRO_WINDOW: usize = 2;
pub const MAX_MICRO_ITEMS: usize = 8;

/// Window-of-two MDP with deterministic window dynamics, per-pair
/// termination probabilities, and a fixed reward table. Episodes start from
/// the empty window. States are indexed `(0,0) -> 0`, `(0,y) -> y`,
/// `(x,y) -> n + (x-1) n + y`.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroMdp {
    n_items: usize,
    reward: Vec<f64>,
    p_end: Vec<f64>,
    covered: Vec<Vec<ItemId>>,
}

impl MicroMdp {
    pub fn random<R: Rng + ?Sized>(cfg: &MicroConfig, rng: &mut R) -> Result<Self> {
        let n = cfg.n_items;
        if n == 0 || n > MAX_MICRO_ITEMS {
            return Err(Error::Config(format!("micro MDP needs 1..={MAX_MICRO_ITEMS} items, got {n}")));
        }
        if !(cfg.coverage > 0.0 && cfg.coverage <= 1.0) {
            return Err(Error::Config("coverage must lie in (0, 1]".into()));
        }
        if !(0.0 <= cfg.p_end_min && cfg.p_end_min <= cfg.p_end_max && cfg.p_end_max <= 1.0) {
            return Err(Error::Config("need 0 <= p_end_min <= p_end_max <= 1".into()));
        }
        let ns = Self::state_count(n);
        let total: f64 = cfg.reward_probs.iter().sum();
        let mut reward = Vec::with_capacity(ns * n);
        let mut p_end = Vec::with_capacity(ns * n);
        for _ in 0..ns * n {
            let u = rng.random::<f64>() * total;
            reward.push(if u < cfg.reward_probs[0] {
                0.0
            } else if u < cfg.reward_probs[0] + cfg.reward_probs[1] {
                0.2
            } else {
                1.0
            });
            p_end.push(cfg.p_end_min + (cfg.p_end_max - cfg.p_end_min) * rng.random::<f64>());
        }
        let k = ((cfg.coverage * n as f64).round() as usize).max(1);
        let covered = (0..ns)
            .map(|_| {
                let mut items: Vec<ItemId> = (1..=n as ItemId).collect();
                for i in 0..k {
                    let j = rng.random_range(i..n);
                    items.swap(i, j);
                }
                let mut c = items[..k].to_vec();
                c.sort_unstable();
                c
            })
            .collect();
        Ok(MicroMdp { n_items: n, reward, p_end, covered })
    }

    /// Explicit tables indexed `state * n_items + (action - 1)`; every action is covered.
    pub fn from_tables(n_items: usize, reward: Vec<f64>, p_end: Vec<f64>) -> Result<Self> {
        if n_items == 0 || n_items > MAX_MICRO_ITEMS {
            return Err(Error::Config(format!("micro MDP needs 1..={MAX_MICRO_ITEMS} items")));
        }
        let len = Self::state_count(n_items) * n_items;
        if reward.len() != len || p_end.len() != len {
            return Err(Error::Config(format!("tables must have {len} entries")));
        }
        if reward.iter().any(|r| ![0.0, 0.2, 1.0].contains(r)) {
            return Err(Error::Config("rewards must be 0, 0.2 or 1.0".into()));
        }
        if p_end.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("termination probabilities must lie in [0, 1]".into()));
        }
        let all: Vec<ItemId> = (1..=n_items as ItemId).collect();
        Ok(MicroMdp {
            n_items,
            reward,
            p_end,
            covered: vec![all; Self::state_count(n_items)],
        })
    }

    fn state_count(n: usize) -> usize {
        1 + n + n * n
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_states(&self) -> usize {
        Self::state_count(self.n_items)
    }

    pub fn initial_state(&self) -> usize {
        0
    }

    pub fn state_index(&self, w: &StateWindow) -> Result<usize> {
        let n = self.n_items;
        match *w.items() {
            [0, 0] => Ok(0),
            [0, y] if y as usize <= n => Ok(y as usize),
            [x, y] if x != 0 && y != 0 && x as usize <= n && y as usize <= n => {
                Ok(n + (x as usize - 1) * n + y as usize)
            }
            _ => Err(Error::Config(format!("window {w} is not a state of this MDP"))),
        }
    }

    pub fn state_window(&self, s: usize) -> StateWindow {
        let n = self.n_items;
        let items = if s == 0 {
            vec![0, 0]
        } else if s <= n {
            vec![0, s as ItemId]
        } else {
            let r = s - n - 1;
            vec![(r / n + 1) as ItemId, (r % n + 1) as ItemId]
        };
        StateWindow::from_items(items).expect("enumerated windows are valid")
    }

    pub fn next_state(&self, s: usize, a: ItemId) -> usize {
        let n = self.n_items;
        let last = if s == 0 {
            0
        } else if s <= n {
            s
        } else {
            (s - n - 1) % n + 1
        };
        if last == 0 {
            a as usize
        } else {
            n + (last - 1) * n + a as usize
        }
    }

    fn idx(&self, s: usize, a: ItemId) -> usize {
        s * self.n_items + a as usize - 1
    }

    pub fn reward(&self, s: usize, a: ItemId) -> f64 {
        self.reward[self.idx(s, a)]
    }

    pub fn p_end(&self, s: usize, a: ItemId) -> f64 {
        self.p_end[self.idx(s, a)]
    }

    /// Actions the logging policy takes in state `s`.
    pub fn covered(&self, s: usize) -> &[ItemId] {
        &self.covered[s]
    }

    /// Successor distribution; `None` is episode termination.
    pub fn transition_row(&self, s: usize, a: ItemId) -> Vec<(Option<usize>, f64)> {
        let p = self.p_end(s, a);
        vec![(Some(self.next_state(s, a)), 1.0 - p), (None, p)]
    }

    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: ItemId, rng: &mut R) -> (f64, Option<usize>) {
        let ended = rng.random::<f64>() < self.p_end(s, a);
        (self.reward(s, a), if ended { None } else { Some(self.next_state(s, a)) })
    }

    /// Episodes under the uniform-over-covered logging policy.
    pub fn generate_dataset(&self, n_sessions: usize, seed: u64) -> Result<Vec<SessionRecord>> {
        if n_sessions == 0 {
            return Err(Error::Config("n_sessions must be at least 1".into()));
        }
        let mut out = Vec::new();
        for e in 0..n_sessions {
            let mut rng = rng_from(indexed_seed(seed, e as u64));
            let mut s = self.initial_state();
            for t in 0.. {
                let cov = self.covered(s);
                let a = cov[rng.random_range(0..cov.len())];
                let (r, next) = self.step(s, a, &mut rng);
                out.push(SessionRecord {
                    session_id: e.to_string(),
                    timestamp: t,
                    item_id: a as u64,
                    behavior: behavior_for_reward(r),
                });
                match next {
                    Some(n) => s = n,
                    None => break,
                }
            }
        }
        Ok(out)
    }

    pub fn true_return(&self, policy: &impl Policy, n_episodes: usize, gamma: f64, seed: u64) -> Result<Estimate> {
        if n_episodes == 0 {
            return Err(Error::Config("n_episodes must be at least 1".into()));
        }
        let mut returns = Vec::with_capacity(n_episodes);
        for e in 0..n_episodes {
            let mut rng = rng_from(indexed_seed(seed, e as u64));
            let mut s = self.initial_state();
            let (mut g, mut disc) = (0.0, 1.0);
            loop {
                let a = policy.act(&self.state_window(s))?;
                if a == PADDING || a as usize > self.n_items {
                    return Err(Error::Contract(format!("policy chose invalid action {a}")));
                }
                let (r, next) = self.step(s, a, &mut rng);
                g += disc * r;
                disc *= gamma;
                match next {
                    Some(n) => s = n,
                    None => break,
                }
            }
            returns.push(g);
        }
        Ok(Estimate::from_samples(&returns))
    }
}

/// Action values over every state of a [`MicroMdp`]; action `a` is column `a - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    n_actions: usize,
    data: Vec<f64>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_states * n_actions {
            return Err(Error::Config("q-table size mismatch".into()));
        }
        Ok(QTable { n_actions, data })
    }

    pub fn n_states(&self) -> usize {
        self.data.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: ItemId) -> f64 {
        self.data[s * self.n_actions + a as usize - 1]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn max(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// First maximizing action.
    pub fn argmax(&self, s: usize) -> ItemId {
        let row = self.row(s);
        let mut best = 0;
        for (i, &q) in row.iter().enumerate() {
            if q > row[best] {
                best = i;
            }
        }
        best as ItemId + 1
    }
}

fn check_gamma_tol(gamma: f64, tol: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tol must be positive, got {tol}")));
    }
    Ok(())
}

fn bellman_sweep(mdp: &MicroMdp, q: &QTable, gamma: f64, next_value: impl Fn(usize) -> f64) -> Vec<f64> {
    let n = mdp.n_items;
    let mut out = Vec::with_capacity(q.data.len());
    for s in 0..mdp.n_states() {
        for a in 1..=n as ItemId {
            let cont = 1.0 - mdp.p_end(s, a);
            out.push(mdp.reward(s, a) + gamma * cont * next_value(mdp.next_state(s, a)));
        }
    }
    out
}

/// Sup-norm of `Q - T Q` under the optimality operator.
pub fn bellman_residual(mdp: &MicroMdp, q: &QTable, gamma: f64) -> f64 {
    bellman_sweep(mdp, q, gamma, |s| q.max(s))
        .iter()
        .zip(&q.data)
        .map(|(t, x)| (t - x).abs())
        .fold(0.0, f64::max)
}

/// Iterates the optimality operator until the residual is below
/// `tol (1 - gamma) / gamma`, so the result is within `tol` of `Q*`.
pub fn value_iteration(mdp: &MicroMdp, gamma: f64, tol: f64) -> Result<QTable> {
    check_gamma_tol(gamma, tol)?;
    let mut q = QTable {
        n_actions: mdp.n_items,
        data: vec![0.0; mdp.n_states() * mdp.n_items],
    };
    let stop = if gamma > 0.0 { tol * (1.0 - gamma) / gamma } else { f64::INFINITY };
    loop {
        let next = bellman_sweep(mdp, &q, gamma, |s| q.max(s));
        let res = next.iter().zip(&q.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q.data = next;
        if res < stop || gamma == 0.0 {
            return Ok(q);
        }
    }
}

/// `Q^pi` for a deterministic policy given per state.
pub fn policy_evaluation(mdp: &MicroMdp, policy: &[ItemId], gamma: f64, tol: f64) -> Result<QTable> {
    check_gamma_tol(gamma, tol)?;
    if policy.len() != mdp.n_states() {
        return Err(Error::Config("policy must give one action per state".into()));
    }
    let mut q = QTable {
        n_actions: mdp.n_items,
        data: vec![0.0; mdp.n_states() * mdp.n_items],
    };
    let stop = if gamma > 0.0 { tol * (1.0 - gamma) / gamma } else { f64::INFINITY };
    loop {
        let next = bellman_sweep(mdp, &q, gamma, |s| q.get(s, policy[s]));
        let res = next.iter().zip(&q.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q.data = next;
        if res < stop || gamma == 0.0 {
            return Ok(q);
        }
    }
}
