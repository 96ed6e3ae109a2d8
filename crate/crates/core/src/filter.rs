//! Out-of-distribution filter over model-generated transitions.
//!
//! A candidate is kept iff the distance from its key to the nearest key of
//! the real data is strictly below the reject level `eps_k`.

use serde::{Deserialize, Serialize};

use crate::data::{state_action_key, Transition};
use crate::error::{Error, Result};
use crate::index::NnIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    StateOnly,
    StateAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Static { epsilon: f64 },
    Dynamic { total_episodes: usize, rollout_length: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectSchedule {
    pub kind: ScheduleKind,
    pub key_mode: KeyMode,
    /// Scale of the one-hot action block in `StateAction` keys.
    pub action_weight: f64,
}

impl RejectSchedule {
    pub fn new(kind: ScheduleKind, key_mode: KeyMode) -> Result<Self> {
        match kind {
            ScheduleKind::Static { epsilon } if !(epsilon >= 0.0) => {
                return Err(Error::Schedule(format!("static epsilon must be >= 0, got {epsilon}")))
            }
            ScheduleKind::Dynamic { total_episodes, rollout_length } if total_episodes < 2 || rollout_length < 1 => {
                return Err(Error::Schedule(format!(
                    "dynamic schedule needs K >= 2 and L >= 1, got K={total_episodes} L={rollout_length}"
                )))
            }
            _ => {}
        }
        Ok(RejectSchedule {
            kind,
            key_mode,
            action_weight: 1.0,
        })
    }

    pub fn key(&self, t: &Transition, n_actions: usize) -> Vec<f64> {
        key_for(self.key_mode, t, n_actions, self.action_weight)
    }
}

pub fn key_for(mode: KeyMode, t: &Transition, n_actions: usize, action_weight: f64) -> Vec<f64> {
    match mode {
        KeyMode::StateOnly => t.s.to_vec(),
        KeyMode::StateAction => state_action_key(&t.s, t.a, n_actions, action_weight),
    }
}

/// A simulated transition tagged with its rollout step (1 = first step).
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub t: Transition,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub rejected: usize,
    pub kept_per_step: Vec<usize>,
    pub dist_min: f64,
    pub dist_median: f64,
    pub dist_max: f64,
    pub eps: f64,
}

impl FilterReport {
    fn build(batch: &[Candidate], mask: &[bool], dists: &[f64], eps: f64, rollout_length: usize) -> Self {
        let steps = rollout_length.max(batch.iter().map(|c| c.step).max().unwrap_or(0));
        let mut kept_per_step = vec![0; steps];
        for (c, &k) in batch.iter().zip(mask) {
            if k {
                kept_per_step[c.step - 1] += 1;
            }
        }
        let kept = mask.iter().filter(|k| **k).count();
        let mut sorted = dists.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let (dist_min, dist_median, dist_max) = if sorted.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            (sorted[0], sorted[sorted.len() / 2], sorted[sorted.len() - 1])
        };
        FilterReport {
            kept,
            rejected: batch.len() - kept,
            kept_per_step,
            dist_min,
            dist_median,
            dist_max,
            eps,
        }
    }
}

/// Nearest-neighbour distance of each candidate's key to the real data.
pub fn nn_distances<I: NnIndex + ?Sized>(
    index: &I,
    batch: &[Candidate],
    key_mode: KeyMode,
    n_actions: usize,
    action_weight: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    batch
        .iter()
        .map(|c| index.nn_distance(&key_for(key_mode, &c.t, n_actions, action_weight)).map(|(d, _)| d))
        .collect()
}

fn apply(batch: Vec<Candidate>, mask: &[bool]) -> Vec<Candidate> {
    batch.into_iter().zip(mask).filter(|(_, k)| **k).map(|(c, _)| c).collect()
}

/// Keep every candidate with distance `< eps`, in input order.
pub fn filter_ood<I: NnIndex + ?Sized>(
    index: &I,
    batch: Vec<Candidate>,
    eps: f64,
    key_mode: KeyMode,
    n_actions: usize,
    action_weight: f64,
    rollout_length: usize,
) -> Result<(Vec<Candidate>, FilterReport)> {
    if !(eps >= 0.0) {
        return Err(Error::Schedule(format!("reject level must be >= 0, got {eps}")));
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let dists = nn_distances(index, &batch, key_mode, n_actions, action_weight)?;
    let mask: Vec<bool> = dists.iter().map(|d| *d < eps).collect();
    let report = FilterReport::build(&batch, &mask, &dists, eps, rollout_length);
    Ok((apply(batch, &mask), report))
}

/// Dynamic elimination fraction `f(k) = (L-1)/L * (K-k)/(K-1)`.
pub fn elimination_fraction(total_episodes: usize, rollout_length: usize, k: usize) -> Result<f64> {
    if total_episodes < 2 || rollout_length < 1 {
        return Err(Error::Schedule(format!(
            "dynamic schedule needs K >= 2 and L >= 1, got K={total_episodes} L={rollout_length}"
        )));
    }
    if k < 1 || k > total_episodes {
        return Err(Error::Schedule(format!("episode {k} outside 1..={total_episodes}")));
    }
    let l = rollout_length as f64;
    Ok((l - 1.0) / l * (total_episodes - k) as f64 / (total_episodes - 1) as f64)
}

/// Number of candidates eliminated out of `n` at fraction `f`. A relative
/// guard absorbs round-off in `f * n` so exact products do not round up.
pub fn eliminated_count(f: f64, n: usize) -> usize {
    let x = f * n as f64;
    let c = (x - 1e-9 * x.max(1.0)).ceil().max(0.0) as usize;
    c.min(n)
}

/// Keep mask for the dynamic rule: drop the `ceil(f n)` farthest candidates,
/// ties dropping later-indexed ones first. Returns the mask and the boundary
/// distance (`inf` when nothing is dropped).
pub fn dynamic_keep_mask(dists: &[f64], f: f64) -> (Vec<bool>, f64) {
    let n = dists.len();
    let drop = eliminated_count(f, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(b.cmp(&a)));
    let mut mask = vec![true; n];
    for &i in &order[..drop] {
        mask[i] = false;
    }
    let eps = if drop == 0 { f64::INFINITY } else { dists[order[drop - 1]] };
    (mask, eps)
}

/// Reject level for episode `k` (1-based).
pub fn schedule_eps(sch: &RejectSchedule, k: usize, dists: &[f64]) -> Result<f64> {
    match sch.kind {
        ScheduleKind::Static { epsilon } => Ok(epsilon),
        ScheduleKind::Dynamic {
            total_episodes,
            rollout_length,
        } => {
            let f = elimination_fraction(total_episodes, rollout_length, k)?;
            Ok(dynamic_keep_mask(dists, f).1)
        }
    }
}

/// Filter one batch under a schedule at episode `k`.
pub fn apply_schedule<I: NnIndex + ?Sized>(
    index: &I,
    batch: Vec<Candidate>,
    sch: &RejectSchedule,
    k: usize,
    n_actions: usize,
    rollout_length: usize,
) -> Result<(Vec<Candidate>, FilterReport)> {
    match sch.kind {
        ScheduleKind::Static { epsilon } => filter_ood(
            index,
            batch,
            epsilon,
            sch.key_mode,
            n_actions,
            sch.action_weight,
            rollout_length,
        ),
        ScheduleKind::Dynamic {
            total_episodes,
            rollout_length: l,
        } => {
            let f = elimination_fraction(total_episodes, l, k)?;
            if index.is_empty() {
                return Err(Error::EmptyIndex);
            }
            let dists = nn_distances(index, &batch, sch.key_mode, n_actions, sch.action_weight)?;
            let (mask, eps) = dynamic_keep_mask(&dists, f);
            let report = FilterReport::build(&batch, &mask, &dists, eps, rollout_length);
            Ok((apply(batch, &mask), report))
        }
    }
}

/// True iff every first-step candidate's state is at distance exactly 0 from
/// the (state-keyed) index, so it survives any `eps > 0`.
pub fn filter_first_step_guarantee_check<I: NnIndex + ?Sized>(index: &I, batch: &[Candidate]) -> Result<bool> {
    for c in batch.iter().filter(|c| c.step == 1) {
        let (d, _) = index.nn_distance(&c.t.s)?;
        if d != 0.0 {
            return Ok(false);
        }
    }
    Ok(true)
}
