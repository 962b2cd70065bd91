//! Overestimation of learned values against the exact optimum of a MicroMDP.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::TransitionStore;
use crate::encoder::StateWindow;
use crate::error::{Error, Result};
use crate::simenv::{Estimate, MicroMdp, QTable};

/// Distinct logged states, ordered by their item windows.
pub fn dataset_states(store: &TransitionStore) -> Vec<StateWindow> {
    let map: BTreeMap<&[u32], &StateWindow> = store.transitions().iter().map(|t| (t.state.items(), &t.state)).collect();
    map.into_values().cloned().collect()
}

/// Mean over `states` of `max_a Q(s,a) - max_a Q*(s,a)`.
pub fn overestimation_gap(
    mdp: &MicroMdp,
    q: impl Fn(&StateWindow) -> Result<Vec<f64>>,
    q_star: &QTable,
    states: &[StateWindow],
) -> Result<f64> {
    if q_star.n_states() != mdp.n_states() || q_star.n_actions() != mdp.n_items() {
        return Err(Error::Config("optimal table does not match the MDP".into()));
    }
    if states.is_empty() {
        return Err(Error::Config("no states to evaluate".into()));
    }
    let mut sum = 0.0;
    for w in states {
        let s = mdp.state_index(w)?;
        let row = q(w)?;
        if row.len() != mdp.n_items() {
            return Err(Error::Config(format!("{} action values for {} actions", row.len(), mdp.n_items())));
        }
        sum += row.iter().copied().fold(f64::NEG_INFINITY, f64::max) - q_star.max(s);
    }
    Ok(sum / states.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverestimationRow {
    pub label: String,
    pub gap: f64,
    pub true_return: Option<Estimate>,
}

/// Gaps for several trained models over one fixed state set.
#[derive(Clone, Debug)]
pub struct OverestimationReport {
    pub states: Vec<StateWindow>,
    pub rows: Vec<OverestimationRow>,
}

pub const OVERESTIMATION_HEADER: &str = "label,gap,true_return,true_return_se";

impl OverestimationReport {
    pub fn new(states: Vec<StateWindow>) -> Self {
        OverestimationReport { states, rows: Vec::new() }
    }

    pub fn add(
        &mut self,
        label: impl Into<String>,
        mdp: &MicroMdp,
        q: impl Fn(&StateWindow) -> Result<Vec<f64>>,
        q_star: &QTable,
        true_return: Option<Estimate>,
    ) -> Result<f64> {
        let gap = overestimation_gap(mdp, q, q_star, &self.states)?;
        self.rows.push(OverestimationRow { label: label.into(), gap, true_return });
        Ok(gap)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{OVERESTIMATION_HEADER}\n");
        for r in &self.rows {
            let (m, se) = r.true_return.map_or(("NA".into(), "NA".into()), |e| (e.mean.to_string(), e.std_err.to_string()));
            let _ = writeln!(s, "{},{},{},{}", r.label, r.gap, m, se);
        }
        s
    }
}
