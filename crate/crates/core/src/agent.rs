//! The trainable agent (shared encoder, Q-ensemble, CE head) and the
//! offline training loop.

use std::fmt::Write as _;

use rand::Rng;

use crate::critic::{
    ce_loss_reweighted, q_weight_for_ce, recommend_greedy_q, recommend_topk, recommend_topk_excluding, AblationMode,
    RecommendationList,
};
use crate::data::{sample_minibatch, Transition, TransitionStore};
use crate::encoder::{Encoder, EncoderGrads, ItemId, StateWindow};
use crate::ensemble::{penalized_target, sample_mixture, td_loss_and_grads, BootstrapSample, PenaltyConfig, QEnsemble, QMatrix};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, DenseNet, GradientSet};
use crate::seed::{self, stream_rng};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentDims {
    pub catalog_size: usize,
    pub window_len: usize,
    pub d_embed: usize,
    pub d_state: usize,
    pub heads: usize,
}

impl AgentDims {
    pub fn validate(&self) -> Result<()> {
        if self.catalog_size == 0 || self.window_len == 0 || self.d_embed == 0 || self.d_state == 0 {
            return Err(Error::Config(format!("agent dimensions must be positive: {self:?}")));
        }
        if self.heads == 0 {
            return Err(Error::Config("the ensemble needs at least one head".into()));
        }
        Ok(())
    }
}

/// Shared encoder with a frozen target copy, K linear Q-heads over the
/// catalog, and a linear CE head.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent<T> {
    pub dims: AgentDims,
    pub encoder: Encoder<T>,
    pub target_encoder: Encoder<T>,
    pub ensemble: QEnsemble<T>,
    pub ce_head: DenseNet<T>,
}

impl<T: Scalar> Agent<T> {
    pub fn new<R: Rng + ?Sized>(dims: AgentDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let encoder = Encoder::new(dims.catalog_size, dims.d_embed, dims.d_state, rng)?;
        let ensemble = QEnsemble::new(dims.heads, &[dims.d_state, dims.catalog_size], rng)?;
        let ce_head = DenseNet::glorot(&[dims.d_state, dims.catalog_size], rng)?;
        Ok(Agent {
            dims,
            target_encoder: encoder.clone(),
            encoder,
            ensemble,
            ce_head,
        })
    }

    fn check_window(&self, w: &StateWindow) -> Result<()> {
        if w.len() != self.dims.window_len {
            return Err(Error::Contract(format!(
                "window length {} differs from the agent's {}",
                w.len(),
                self.dims.window_len
            )));
        }
        Ok(())
    }

    pub fn features(&self, w: &StateWindow) -> Result<Vec<T>> {
        self.check_window(w)?;
        self.encoder.encode(w)
    }

    pub fn target_features(&self, w: &StateWindow) -> Result<Vec<T>> {
        self.check_window(w)?;
        self.target_encoder.encode(w)
    }

    pub fn ce_logits(&self, w: &StateWindow) -> Result<Vec<T>> {
        self.ce_head.forward(&self.features(w)?)
    }

    /// Equal-weight ensemble mean over all actions.
    pub fn q_values(&self, w: &StateWindow) -> Result<Vec<T>> {
        self.ensemble.mean_q(&self.features(w)?)
    }

    /// Top-`k` from the CE head, or from the Q-ensemble when `serve_q`.
    pub fn recommend(&self, w: &StateWindow, k: usize, serve_q: bool) -> Result<RecommendationList<T>> {
        if serve_q {
            recommend_greedy_q(&self.ensemble, &self.features(w)?, k)
        } else {
            recommend_topk(&self.ce_logits(w)?, k)
        }
    }

    /// Top-1 serving decision: the best-scored item not already in the window.
    pub fn serve(&self, w: &StateWindow, serve_q: bool) -> Result<ItemId> {
        let scores = if serve_q { self.q_values(w)? } else { self.ce_logits(w)? };
        Ok(recommend_topk_excluding(&scores, 1, w.interacted())?.top())
    }

    /// Copies the online heads and encoder into their targets.
    pub fn sync_targets(&mut self) {
        self.ensemble.target_sync();
        self.target_encoder.copy_from(&self.encoder);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig<T> {
    pub penalty: PenaltyConfig<T>,
    pub ablation: AblationMode,
    pub batch_size: usize,
    /// Online-to-target copy period, in updates.
    pub sync_period: u64,
    pub adam: AdamConfig<T>,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.sync_period == 0 {
            return Err(Error::Config("sync_period must be at least 1".into()));
        }
        if !(self.adam.lr > T::zero()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log. Losses that a mode does not train are `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog<T> {
    pub step: u64,
    pub td_loss: Option<T>,
    pub ce_loss: Option<T>,
    /// Mean target-ensemble SD at the bootstrap action.
    pub mean_sigma: Option<T>,
    /// Mean penalty weight at the bootstrap action.
    pub mean_w: Option<T>,
}

pub const TRAIN_LOG_HEADER: &str = "step,td_loss,ce_loss,mean_sigma,mean_w";

pub fn train_log_csv<T: Scalar>(rows: &[StepLog<T>]) -> String {
    let mut s = String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    let opt = |x: Option<T>| x.map_or(String::new(), |v| v.to_string());
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, opt(r.td_loss), opt(r.ce_loss), opt(r.mean_sigma), opt(r.mean_w));
    }
    s
}

struct Grads<T> {
    encoder: EncoderGrads<T>,
    heads: Option<Vec<GradientSet<T>>>,
    ce: Option<GradientSet<T>>,
}

/// Optimizer state and random streams around an [`Agent`].
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub agent: Agent<T>,
    pub config: TrainConfig<T>,
    encoder_adam: AdamState<T>,
    head_adam: Vec<AdamState<T>>,
    ce_adam: AdamState<T>,
    step: u64,
    rem_rng: seed::Rng,
    batch_rng: seed::Rng,
}

fn encoder_blocks<T: Scalar>(enc: &Encoder<T>) -> Vec<usize> {
    let mut b = vec![enc.table.data().len()];
    b.extend(enc.head.block_sizes());
    b
}

impl<T: Scalar> Trainer<T> {
    /// The agent is initialized from the `init` stream of `seed`; mixtures and
    /// minibatches draw from the `rem` and `batch` streams.
    pub fn new(dims: AgentDims, config: TrainConfig<T>, seed: u64) -> Result<Self> {
        let agent = Agent::new(dims, &mut stream_rng(seed, seed::INIT))?;
        Self::with_agent(agent, config, seed)
    }

    pub fn with_agent(agent: Agent<T>, config: TrainConfig<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.penalty.mode != crate::ensemble::PenaltyMode::None && agent.ensemble.k() < 2 {
            return Err(Error::Config(format!("penalty mode {} needs at least 2 heads", config.penalty.mode)));
        }
        Ok(Trainer {
            encoder_adam: AdamState::new(&encoder_blocks(&agent.encoder), config.adam),
            head_adam: agent.ensemble.heads().iter().map(|h| AdamState::for_net(h, config.adam)).collect(),
            ce_adam: AdamState::for_net(&agent.ce_head, config.adam),
            agent,
            config,
            step: 0,
            rem_rng: stream_rng(seed, seed::REM),
            batch_rng: stream_rng(seed, seed::BATCH),
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    fn check_store(&self, store: &TransitionStore) -> Result<()> {
        if store.catalog_size() != self.agent.dims.catalog_size || store.window_len() != self.agent.dims.window_len {
            return Err(Error::Config(format!(
                "dataset (catalog {}, window {}) does not match the agent (catalog {}, window {})",
                store.catalog_size(),
                store.window_len(),
                self.agent.dims.catalog_size,
                self.agent.dims.window_len
            )));
        }
        Ok(())
    }

    /// One minibatch update: TD on the ensemble and CE on the critic head as
    /// the ablation mode dictates, with a single Adam step per parameter group.
    pub fn train_step(&mut self, store: &TransitionStore) -> Result<StepLog<T>> {
        self.check_store(store)?;
        let batch = sample_minibatch(store, self.config.batch_size, &mut self.batch_rng)?;
        let mode = self.config.ablation;
        self.update(&batch, mode.trains_q(), mode.trains_ce())
    }

    /// CE-only update on a given batch; the Q-heads and targets are untouched.
    pub fn ce_update(&mut self, batch: &[&Transition]) -> Result<StepLog<T>> {
        self.update(batch, false, true)
    }

    pub fn train(&mut self, store: &TransitionStore, steps: u64) -> Result<Vec<StepLog<T>>> {
        (0..steps).map(|_| self.train_step(store)).collect()
    }

    fn update(&mut self, batch: &[&Transition], td: bool, ce: bool) -> Result<StepLog<T>> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let feats = batch.iter().map(|t| self.agent.features(&t.state)).collect::<Result<Vec<_>>>()?;
        let mut grads = Grads {
            encoder: EncoderGrads::zeros_like(&self.agent.encoder),
            heads: None,
            ce: None,
        };
        let mut log = StepLog {
            step: self.step + 1,
            td_loss: None,
            ce_loss: None,
            mean_sigma: None,
            mean_w: None,
        };
        if td {
            self.td_grads(batch, &feats, &mut grads, &mut log)?;
        }
        if ce {
            self.ce_grads(batch, &feats, &mut grads, &mut log)?;
        }
        let enc = &mut self.agent.encoder;
        let mut p: Vec<&mut [T]> = vec![enc.table.data_mut()];
        p.extend(enc.head.blocks_mut());
        let mut g: Vec<&[T]> = vec![&grads.encoder.table];
        g.extend(grads.encoder.head.blocks());
        self.encoder_adam.apply(&mut p, &g)?;
        if let Some(hg) = &grads.heads {
            for ((h, g), st) in self.agent.ensemble.heads_mut().iter_mut().zip(hg).zip(&mut self.head_adam) {
                adam_step(h, g, st)?;
            }
        }
        if let Some(cg) = &grads.ce {
            adam_step(&mut self.agent.ce_head, cg, &mut self.ce_adam)?;
        }
        self.step += 1;
        if td {
            self.agent.ensemble.record_update();
            if self.agent.ensemble.updates_since_sync() >= self.config.sync_period {
                self.agent.sync_targets();
            }
        }
        Ok(log)
    }

    fn td_grads(&mut self, batch: &[&Transition], feats: &[Vec<T>], grads: &mut Grads<T>, log: &mut StepLog<T>) -> Result<()> {
        let agent = &self.agent;
        let alpha = sample_mixture(agent.ensemble.k(), &mut self.rem_rng);
        let next_q = batch
            .iter()
            .map(|t| agent.ensemble.target_q_matrix(&agent.target_features(&t.next_state)?))
            .collect::<Result<Vec<QMatrix<T>>>>()?;
        let samples: Vec<BootstrapSample<'_, T>> = batch
            .iter()
            .zip(&next_q)
            .map(|(t, q)| BootstrapSample {
                reward: T::lit(t.reward),
                terminal: t.terminal,
                next_q: q,
            })
            .collect();
        let targets = penalized_target(&samples, &self.config.penalty, &alpha)?;
        let actions: Vec<usize> = batch.iter().map(|t| t.action as usize - 1).collect();
        let td = td_loss_and_grads(&agent.ensemble, feats, &actions, &alpha, &targets.y)?;
        for (t, fg) in batch.iter().zip(&td.features) {
            agent.encoder.accumulate_backward(&t.state, fg, &mut grads.encoder)?;
        }
        log.td_loss = Some(td.loss);
        log.mean_sigma = Some(targets.mean_sigma());
        log.mean_w = Some(targets.mean_weight());
        grads.heads = Some(td.heads);
        Ok(())
    }

    fn ce_grads(&self, batch: &[&Transition], feats: &[Vec<T>], grads: &mut Grads<T>, log: &mut StepLog<T>) -> Result<()> {
        let agent = &self.agent;
        let inv_b = T::one() / T::lit(batch.len() as f64);
        let mut ce = GradientSet::zeros_like(&agent.ce_head);
        let mut loss = T::zero();
        for (t, f) in batch.iter().zip(feats) {
            let q = match self.config.ablation {
                AblationMode::QCritic => q_weight_for_ce(&agent.ensemble, f, t.action)?,
                _ => T::one(),
            };
            let logits = agent.ce_head.forward(f)?;
            let (l, mut g) = ce_loss_reweighted(&logits, t.action, q)?;
            loss += l * inv_b;
            g.iter_mut().for_each(|x| *x *= inv_b);
            let fg = agent.ce_head.accumulate_backward(f, &g, &mut ce)?;
            agent.encoder.accumulate_backward(&t.state, &fg, &mut grads.encoder)?;
        }
        log.ce_loss = Some(loss);
        grads.ce = Some(ce);
        Ok(())
    }
}

/// Serving policy over an agent, using the head the ablation mode serves.
pub fn serve_top1<T: Scalar>(agent: &Agent<T>, mode: AblationMode) -> impl Fn(&StateWindow) -> Result<ItemId> + '_ {
    move |w: &StateWindow| agent.serve(w, mode.serves_q())
}
