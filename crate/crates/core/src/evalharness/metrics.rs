//! HR@k and NDCG@k with a single relevant item per event.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{Behavior, TransitionStore};
use crate::encoder::{ItemId, StateWindow};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub item: ItemId,
    pub event: Behavior,
}

fn check(lists: &[Vec<ItemId>], truths: &[GroundTruth], k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if lists.len() != truths.len() {
        return Err(Error::Contract(format!("{} ranked lists for {} ground truths", lists.len(), truths.len())));
    }
    Ok(())
}

fn mean_over<F: Fn(&[ItemId], ItemId) -> f64>(
    lists: &[Vec<ItemId>],
    truths: &[GroundTruth],
    k: usize,
    event: Behavior,
    score: F,
) -> Result<Option<f64>> {
    check(lists, truths, k)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (l, t) in lists.iter().zip(truths) {
        if t.event == event {
            sum += score(&l[..k.min(l.len())], t.item);
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Fraction of `event` events whose item is in the top `k`; `None` when there
/// are no such events.
pub fn hr_at_k(lists: &[Vec<ItemId>], truths: &[GroundTruth], k: usize, event: Behavior) -> Result<Option<f64>> {
    mean_over(lists, truths, k, event, |top, item| if top.contains(&item) { 1.0 } else { 0.0 })
}

/// Mean of `1 / log2(1 + rank)` over `event` events, 0 outside the top `k`.
pub fn ndcg_at_k(lists: &[Vec<ItemId>], truths: &[GroundTruth], k: usize, event: Behavior) -> Result<Option<f64>> {
    mean_over(lists, truths, k, event, |top, item| match top.iter().position(|&i| i == item) {
        Some(p) => 1.0 / ((p + 2) as f64).log2(),
        None => 0.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub event: Behavior,
    pub k: usize,
    pub value: Option<f64>,
    pub count: usize,
}

/// HR and NDCG per event type (click, purchase) and cutoff.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

pub const METRICS_HEADER: &str = "metric,event_type,k,value,count";

impl MetricsReport {
    pub fn compute(lists: &[Vec<ItemId>], truths: &[GroundTruth], k_list: &[usize]) -> Result<Self> {
        let mut rows = Vec::new();
        for event in [Behavior::Click, Behavior::Purchase] {
            let count = truths.iter().filter(|t| t.event == event).count();
            for &k in k_list {
                rows.push(MetricRow { metric: "hr", event, k, value: hr_at_k(lists, truths, k, event)?, count });
                rows.push(MetricRow { metric: "ndcg", event, k, value: ndcg_at_k(lists, truths, k, event)?, count });
            }
        }
        Ok(MetricsReport { rows })
    }

    pub fn get(&self, metric: &str, event: Behavior, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.event == event && r.k == k)
            .and_then(|r| r.value)
    }

    /// Machine-readable CSV; absent values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let v = r.value.map_or("NA".to_string(), |v| format!("{v}"));
            let _ = writeln!(s, "{},{},{},{},{}", r.metric, r.event, r.k, v, r.count);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<6} {:<9} {:>4} {:>8} {:>7}\n", "metric", "event", "k", "value", "count");
        for r in &self.rows {
            let v = r.value.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{:<6} {:<9} {:>4} {:>8} {:>7}", r.metric, r.event.to_string(), r.k, v, r.count);
        }
        s
    }
}

/// Produces a ranked list for a window.
pub trait Ranker {
    fn rank(&self, window: &StateWindow, k: usize) -> Result<Vec<ItemId>>;
}

impl<F: Fn(&StateWindow, usize) -> Result<Vec<ItemId>>> Ranker for F {
    fn rank(&self, window: &StateWindow, k: usize) -> Result<Vec<ItemId>> {
        self(window, k)
    }
}

/// One line of the ranked-list JSONL output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedRecord {
    pub window: Vec<ItemId>,
    pub truth_item: ItemId,
    pub truth_type: String,
    pub topk: Vec<ItemId>,
}

/// Ranks every non-skip transition's state and scores the logged action.
pub fn evaluate_ranking(
    ranker: &impl Ranker,
    test: &TransitionStore,
    k_list: &[usize],
) -> Result<(MetricsReport, Vec<RankedRecord>)> {
    let k_max = k_list.iter().copied().max().ok_or_else(|| Error::Config("k list is empty".into()))?;
    if k_list.contains(&0) {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut lists = Vec::new();
    let mut truths = Vec::new();
    let mut records = Vec::new();
    for t in test.transitions().iter().filter(|t| t.event != Behavior::Skip) {
        let list = ranker.rank(&t.state, k_max)?;
        records.push(RankedRecord {
            window: t.state.items().to_vec(),
            truth_item: t.action,
            truth_type: t.event.to_string(),
            topk: list.clone(),
        });
        lists.push(list);
        truths.push(GroundTruth { item: t.action, event: t.event });
    }
    Ok((MetricsReport::compute(&lists, &truths, k_list)?, records))
}

pub fn ranked_jsonl(records: &[RankedRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("plain records serialize"));
        s.push('\n');
    }
    s
}
