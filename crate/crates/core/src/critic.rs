//! Cross-entropy recommendation head with Q-reweighted loss, and top-k
//! recommendation lists.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::encoder::{ItemId, PADDING};
use crate::ensemble::QEnsemble;
use crate::error::{Error, Result};
use crate::Scalar;

/// How the learned Q-function is used during training and serving.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    /// TD training only; recommendations by greedy ensemble-mean Q.
    QOnly,
    /// Plain cross-entropy; no Q losses.
    Ce,
    /// TD and cross-entropy on a shared encoder, CE weight fixed at 1.
    QAux,
    /// TD and cross-entropy weighted by the detached Q-value.
    QCritic,
}

impl AblationMode {
    pub fn trains_q(self) -> bool {
        self != AblationMode::Ce
    }

    pub fn trains_ce(self) -> bool {
        self != AblationMode::QOnly
    }

    pub fn serves_q(self) -> bool {
        self == AblationMode::QOnly
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::QOnly => "q_only",
            AblationMode::Ce => "ce",
            AblationMode::QAux => "q_aux",
            AblationMode::QCritic => "q_critic",
        })
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q_only" | "q-only" => Ok(AblationMode::QOnly),
            "ce" => Ok(AblationMode::Ce),
            "q_aux" | "q-aux" => Ok(AblationMode::QAux),
            "q_critic" | "q-critic" => Ok(AblationMode::QCritic),
            _ => Err(Error::Config(format!("unknown ablation mode {s:?} (q_only, ce, q_aux, q_critic)"))),
        }
    }
}

fn action_index(action: ItemId, n: usize) -> Result<usize> {
    if action == PADDING || action as usize > n {
        return Err(Error::Contract(format!("action {action} is not an item in 1..={n}")));
    }
    Ok(action as usize - 1)
}

/// `-log softmax(logits)[action] * q_value` and its gradient with respect to
/// the logits. Logit `i` scores item `i + 1`.
pub fn ce_loss_reweighted<T: Scalar>(logits: &[T], action: ItemId, q_value: T) -> Result<(T, Vec<T>)> {
    let a = action_index(action, logits.len())?;
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let log_z = max + sum.ln();
    let loss = (log_z - logits[a]) * q_value;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite cross-entropy loss {loss}")));
    }
    let mut grad: Vec<T> = exps.into_iter().map(|e| e / sum * q_value).collect();
    grad[a] -= q_value;
    Ok((loss, grad))
}

/// `max(0, mean_k Q_k(s, action))` from the online heads; used as a constant.
pub fn q_weight_for_ce<T: Scalar>(ens: &QEnsemble<T>, s: &[T], action: ItemId) -> Result<T> {
    let a = action_index(action, ens.n_actions())?;
    Ok(ens.mean_q_action(s, a)?.max(T::zero()))
}

/// Distinct items ordered by score descending, then item id ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct RecommendationList<T> {
    items: Vec<ItemId>,
    scores: Vec<T>,
}

impl<T: Scalar> RecommendationList<T> {
    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn top(&self) -> ItemId {
        self.items[0]
    }

    /// 1-indexed rank of `item`, if listed.
    pub fn rank_of(&self, item: ItemId) -> Option<usize> {
        self.items.iter().position(|&i| i == item).map(|p| p + 1)
    }
}

fn rank_order<T: Scalar>(scores: &[T], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Top-`k` items by score; score `i` belongs to item `i + 1`.
pub fn recommend_topk<T: Scalar>(scores: &[T], k: usize) -> Result<RecommendationList<T>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Divergence("NaN score in recommendation".into()));
    }
    let k = k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    Ok(RecommendationList {
        items: idx.iter().map(|&i| (i + 1) as ItemId).collect(),
        scores: idx.iter().map(|&i| scores[i]).collect(),
    })
}

/// Top-`k` with the `exclude` items ranked last.
pub fn recommend_topk_excluding<T: Scalar>(scores: &[T], k: usize, exclude: &[ItemId]) -> Result<RecommendationList<T>> {
    let mut masked = scores.to_vec();
    for &i in exclude {
        if i != PADDING && (i as usize) <= masked.len() {
            masked[i as usize - 1] = T::neg_infinity();
        }
    }
    recommend_topk(&masked, k)
}

/// Top-`k` items by equal-weight ensemble-mean Q.
pub fn recommend_greedy_q<T: Scalar>(ens: &QEnsemble<T>, s: &[T], k: usize) -> Result<RecommendationList<T>> {
    recommend_topk(&ens.mean_q(s)?, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, DenseNet, FD_STEP};
    use crate::seed::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn unit_weight_is_standard_cross_entropy() {
        let logits = [0.5, -1.0, 2.0];
        let (loss, grad) = ce_loss_reweighted(&logits, 3, 1.0f64).unwrap();
        let z: f64 = logits.iter().map(|x: &f64| x.exp()).sum();
        assert!((loss - (z.ln() - 2.0)).abs() < 1e-14);
        for (i, g) in grad.iter().enumerate() {
            let p = logits[i].exp() / z;
            let want = if i == 2 { p - 1.0 } else { p };
            assert!((g - want).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_and_doubled_weight() {
        let logits = [0.1, 0.7, -0.3, 1.2];
        let (l0, g0) = ce_loss_reweighted(&logits, 2, 0.0f64).unwrap();
        assert_eq!(l0, 0.0);
        assert!(g0.iter().all(|&g| g == 0.0));
        let (l1, g1) = ce_loss_reweighted(&logits, 2, 1.0f64).unwrap();
        let (l2, g2) = ce_loss_reweighted(&logits, 2, 2.0f64).unwrap();
        assert_eq!(l2, 2.0 * l1);
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn padding_or_out_of_range_action_rejected() {
        assert!(matches!(ce_loss_reweighted(&[0.0f64, 1.0], PADDING, 1.0), Err(Error::Contract(_))));
        assert!(matches!(ce_loss_reweighted(&[0.0f64, 1.0], 3, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn large_logits_stay_finite() {
        let (loss, grad) = ce_loss_reweighted(&[1000.0f64, 0.0, -1000.0], 1, 1.0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = rng_from(11);
        for _ in 0..10 {
            let logits: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = rng.random_range(1..=7u32);
            let q = rng.random_range(0.0..3.0);
            let (_, grad) = ce_loss_reweighted(&logits, a, q).unwrap();
            let report = check_gradient(&grad, FD_STEP, 1e-6, |i, d| {
                let mut l = logits.clone();
                l[i] += d;
                ce_loss_reweighted(&l, a, q).unwrap().0
            });
            assert!(report.passed(), "{report:?}");
        }
    }

    fn ensemble_with_action_values(values: &[f64], n_actions: usize, action: usize) -> QEnsemble<f64> {
        let heads = values
            .iter()
            .map(|&v| {
                let mut h = DenseNet::zeros(&[2, n_actions]).unwrap();
                h.biases_mut(0)[action] = v;
                h
            })
            .collect();
        QEnsemble::from_heads(heads).unwrap()
    }

    #[test]
    fn q_weight_examples() {
        let s = [0.3, -0.4];
        assert_eq!(q_weight_for_ce(&ensemble_with_action_values(&[0.0, 0.0], 3, 1), &s, 2).unwrap(), 0.0);
        assert_eq!(q_weight_for_ce(&ensemble_with_action_values(&[1.0, 3.0], 3, 1), &s, 2).unwrap(), 2.0);
        assert_eq!(q_weight_for_ce(&ensemble_with_action_values(&[-2.0, -4.0], 3, 1), &s, 2).unwrap(), 0.0);
    }

    #[test]
    fn topk_examples() {
        let r = recommend_topk(&[0.0f64; 6], 3).unwrap();
        assert_eq!(r.items(), &[1, 2, 3]);
        let mut one_hot = vec![0.0f64; 9];
        one_hot[6] = 1.0;
        assert_eq!(recommend_topk(&one_hot, 1).unwrap().items(), &[7]);
        assert_eq!(recommend_topk(&[1.0f64, 2.0], 5).unwrap().items(), &[2, 1]);
        assert!(matches!(recommend_topk(&[1.0f64], 0), Err(Error::Config(_))));
    }

    #[test]
    fn excluded_items_rank_last() {
        let r = recommend_topk_excluding(&[3.0f64, 2.0, 1.0], 2, &[1, PADDING]).unwrap();
        assert_eq!(r.items(), &[2, 3]);
        let r = recommend_topk_excluding(&[3.0f64, 2.0], 1, &[1, 2]).unwrap();
        assert_eq!(r.items(), &[1]);
    }

    #[test]
    fn greedy_q_examples() {
        let s = [0.1, 0.2];
        let flat = QEnsemble::from_heads(vec![DenseNet::<f64>::zeros(&[2, 5]).unwrap(); 3]).unwrap();
        assert_eq!(recommend_greedy_q(&flat, &s, 4).unwrap().items(), &[1, 2, 3, 4]);
        let dom = ensemble_with_action_values(&[5.0, 4.0], 5, 3);
        assert_eq!(recommend_greedy_q(&dom, &s, 1).unwrap().items(), &[4]);
    }

    #[test]
    fn greedy_q_matches_exhaustive_scoring() {
        let mut rng = rng_from(12);
        let ens = QEnsemble::<f64>::new(3, &[4, 12], &mut rng).unwrap();
        let s: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = recommend_greedy_q(&ens, &s, 5).unwrap();
        let mut scored: Vec<(f64, u32)> = (0..12)
            .map(|a| {
                let q: f64 = ens.heads().iter().map(|h| h.forward(&s).unwrap()[a]).sum::<f64>() / 3.0;
                (q, a as u32 + 1)
            })
            .collect();
        scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        let want: Vec<u32> = scored[..5].iter().map(|x| x.1).collect();
        assert_eq!(got.items(), want.as_slice());
    }

    #[test]
    fn ablation_modes_parse() {
        for m in [AblationMode::QOnly, AblationMode::Ce, AblationMode::QAux, AblationMode::QCritic] {
            assert_eq!(m.to_string().parse::<AblationMode>().unwrap(), m);
        }
        assert!(AblationMode::QOnly.serves_q() && !AblationMode::QOnly.trains_ce());
        assert!(!AblationMode::Ce.trains_q());
    }

    proptest! {
        #[test]
        fn topk_matches_full_sort_oracle(scores in prop::collection::vec(-3i32..3, 1..40), k in 1usize..50) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let got = recommend_topk(&scores, k).unwrap();
            let mut all: Vec<(f64, u32)> = scores.iter().enumerate().map(|(i, &s)| (s, i as u32 + 1)).collect();
            all.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            let want: Vec<u32> = all.iter().take(k).map(|x| x.1).collect();
            prop_assert_eq!(got.items(), want.as_slice());
            prop_assert_eq!(got.len(), k.min(scores.len()));
            prop_assert!(!got.items().contains(&PADDING));
        }

        #[test]
        fn topk_shift_invariant(scores in prop::collection::vec(-50i32..50, 1..30), c in -1000i32..1000, k in 1usize..10) {
            let base: Vec<f64> = scores.iter().map(|&s| f64::from(s) / 4.0).collect();
            let shifted: Vec<f64> = base.iter().map(|s| s + f64::from(c)).collect();
            let a = recommend_topk(&base, k).unwrap();
            let b = recommend_topk(&shifted, k).unwrap();
            prop_assert_eq!(a.items(), b.items());
        }

        #[test]
        fn doubling_weight_doubles_gradient_norm(logits in prop::collection::vec(-4.0f64..4.0, 2..12), q in 0.0f64..5.0) {
            let (_, g1) = ce_loss_reweighted(&logits, 1, q).unwrap();
            let (_, g2) = ce_loss_reweighted(&logits, 1, 2.0 * q).unwrap();
            let n1: f64 = g1.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n2: f64 = g2.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n2 - 2.0 * n1).abs() <= 1e-12 * n1.max(1.0));
        }
    }
}
