//! Ranking evaluation: the ground-truth POI against up to 200 unvisited POIs
//! of its region, scored by HR@k and NDCG@k.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{PoiIdx, RegionMap, SplitCorpus};
use crate::recmodel::{LocalModel, SeqInput, TargetVocab};
use crate::seed;
use crate::Result;

pub const DEFAULT_NEGATIVES: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankTask {
    pub user: usize,
    pub context: Vec<PoiIdx>,
    pub truth: PoiIdx,
    /// Ground truth plus negatives, in seeded random order.
    pub candidates: Vec<PoiIdx>,
    /// Negatives actually drawn (fewer than requested on shortage).
    pub negatives: usize,
}

impl RankTask {
    pub fn truth_index(&self) -> usize {
        self.candidates
            .iter()
            .position(|&c| c == self.truth)
            .expect("ground truth among candidates")
    }
}

/// `None` when the user is not evaluable or the region has no unvisited POI.
pub fn build_rank_task(
    split: &SplitCorpus,
    user: usize,
    regions: &RegionMap,
    num_negatives: usize,
    seed: u64,
) -> Option<RankTask> {
    let u = &split.users[user];
    let truth = u.test?.poi;
    let visited: HashSet<PoiIdx> = u.all_events().iter().map(|e| e.poi).collect();
    let pool: Vec<PoiIdx> = regions
        .members(regions.region_of(truth))
        .iter()
        .copied()
        .filter(|p| !visited.contains(p))
        .collect();
    if pool.is_empty() {
        return None;
    }
    let mut rng = seed::rng_for(seed, "rank-task", user as u64);
    let mut candidates: Vec<PoiIdx> = pool.choose_multiple(&mut rng, num_negatives).copied().collect();
    let negatives = candidates.len();
    candidates.push(truth);
    candidates.shuffle(&mut rng);
    Some(RankTask {
        user,
        context: u.test_context(),
        truth,
        candidates,
        negatives,
    })
}

/// 1-based rank of candidate `t`; equal scores are ordered by candidate index.
pub fn rank_of(scores: &[f64], t: usize) -> usize {
    let st = scores[t];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > st || (s == st && j < t))
        .count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Scores candidate POIs for a user given the user's history.
pub trait Scorer: Sync {
    fn score_candidates(&self, user: usize, context: &[PoiIdx], candidates: &[PoiIdx]) -> Result<Vec<f64>>;
}

/// Scores with each user's own model over the ground truth's region.
pub struct FleetScorer<'a, M: LocalModel> {
    pub models: &'a [M],
    pub regions: &'a RegionMap,
}

impl<M: LocalModel> Scorer for FleetScorer<'_, M> {
    fn score_candidates(&self, user: usize, context: &[PoiIdx], candidates: &[PoiIdx]) -> Result<Vec<f64>> {
        let r = self.regions.region_of(candidates[0]);
        let all = self.models[user].scores_with(self.models[user].params(), SeqInput::Pois(context), TargetVocab::Region(r))?;
        Ok(candidates.iter().map(|&c| all[self.regions.position(c)]).collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl Metrics {
    pub fn from_rank(rank: usize) -> Self {
        Self {
            hr5: hr_at_k(rank, 5),
            hr10: hr_at_k(rank, 10),
            ndcg5: ndcg_at_k(rank, 5),
            ndcg10: ndcg_at_k(rank, 10),
        }
    }

    pub fn mean(items: impl IntoIterator<Item = Metrics>) -> Metrics {
        let mut sum = Metrics::default();
        let mut n = 0usize;
        for m in items {
            sum.hr5 += m.hr5;
            sum.hr10 += m.hr10;
            sum.ndcg5 += m.ndcg5;
            sum.ndcg10 += m.ndcg10;
            n += 1;
        }
        if n > 0 {
            let inv = 1.0 / n as f64;
            sum.hr5 *= inv;
            sum.hr10 *= inv;
            sum.ndcg5 *= inv;
            sum.ndcg10 *= inv;
        }
        sum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub negatives: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            negatives: DEFAULT_NEGATIVES,
            repeats: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub metrics: Metrics,
    /// Negatives drawn in the first repeat.
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetMetrics {
    pub per_user: Vec<UserMetrics>,
    pub mean: Metrics,
    /// Evaluable users whose region had no unvisited POI.
    pub skipped: Vec<usize>,
}

/// Unweighted user means, each user's metrics averaged over `repeats`
/// independently drawn candidate sets.
pub fn evaluate_fleet(scorer: &dyn Scorer, split: &SplitCorpus, regions: &RegionMap, cfg: &EvalConfig) -> Result<FleetMetrics> {
    let users: Vec<usize> = split.evaluable().map(|(i, _)| i).collect();
    let repeats = cfg.repeats.max(1);
    let results: Vec<Result<Option<UserMetrics>>> = users
        .par_iter()
        .map(|&u| {
            let mut per_repeat = Vec::with_capacity(repeats);
            let mut negatives = 0;
            for rep in 0..repeats {
                let Some(task) = build_rank_task(split, u, regions, cfg.negatives, seed::derive(cfg.seed, &[rep as u64])) else {
                    return Ok(None);
                };
                if rep == 0 {
                    negatives = task.negatives;
                }
                let scores = scorer.score_candidates(u, &task.context, &task.candidates)?;
                per_repeat.push(Metrics::from_rank(rank_of(&scores, task.truth_index())));
            }
            Ok(Some(UserMetrics {
                user: u,
                metrics: Metrics::mean(per_repeat),
                negatives,
            }))
        })
        .collect();
    let mut per_user = Vec::new();
    let mut skipped = Vec::new();
    for (u, r) in users.iter().zip(results) {
        match r? {
            Some(m) => per_user.push(m),
            None => skipped.push(*u),
        }
    }
    let mean = Metrics::mean(per_user.iter().map(|m| m.metrics));
    Ok(FleetMetrics { per_user, mean, skipped })
}
