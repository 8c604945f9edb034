//! End-to-end simulation of a device fleet: server initialization, then per
//! device (a) collaborative training with loss tracking, (b) influence-based
//! selection, (c) retraining on the selected reference set.

mod server;

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collab::{self, train_fleet, CollabConfig, Device, EpochLog, TrackedPool, TrainOptions};
use crate::corpus::{self, CheckInCorpus, RegionMap, SplitCorpus};
use crate::eval::{evaluate_fleet, EvalConfig, FleetScorer, Metrics};
use crate::influence::{model_influence, select_adaptive, InfluenceConfig, InfluenceReport};
use crate::recmodel::{EmbedMeanConfig, EmbedMeanModel, LossTerm, SeqInput, TargetVocab};
use crate::refgen::{InstanceId, InstanceKind, PoolConfig, ReferencePool};
use crate::seed;
use crate::{Error, Result};

pub use server::{server_init, Deployment, Initialized, Server};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    /// Iterative per-user/per-POI interaction floor; 0 disables filtering.
    pub min_interactions: usize,
    pub max_len: usize,
    pub regions: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            min_interactions: 10,
            max_len: 200,
            regions: 8,
        }
    }
}

/// A corpus ready for simulation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: CheckInCorpus,
    pub split: SplitCorpus,
    pub regions: Arc<RegionMap>,
}

/// Filters, truncates, clusters into regions and splits.
pub fn prepare(corpus: &CheckInCorpus, cfg: &PrepConfig, seed: u64) -> Result<Prepared> {
    let filtered = if cfg.min_interactions > 0 {
        corpus::filter_min_interactions(corpus, cfg.min_interactions)?
    } else {
        corpus.clone()
    };
    let corpus = corpus::truncate_sequences(&filtered, cfg.max_len)?;
    if corpus.num_users() == 0 {
        return Err(Error::Init("corpus has no users after filtering".into()));
    }
    let regions = corpus::cluster_regions(&corpus.pois, cfg.regions, seed::derive(seed, &[seed::label("regions")]))?;
    let split = corpus::split_leave_last_out(&corpus);
    Ok(Prepared {
        corpus,
        split,
        regions: Arc::new(regions),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// The whole pool slice, no selection.
    Original,
    /// Uniform sample matching the adaptive set's size per instance kind.
    Random,
    /// Sample weighted by POI (or category) visit frequency, same budget.
    Popular,
    Adaptive,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Original, Strategy::Random, Strategy::Popular, Strategy::Adaptive];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Original => "original",
            Strategy::Random => "random",
            Strategy::Popular => "popular",
            Strategy::Adaptive => "adaptive",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// How stage (c) starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retrain {
    /// Fresh initialization from the device seed.
    Reinit,
    /// Continue from the stage-(a) parameters.
    Resume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub collab: CollabConfig,
    pub influence: InfluenceConfig,
    pub pool: PoolConfig,
    pub model: EmbedMeanConfig,
    pub eval: EvalConfig,
    pub strategy: Strategy,
    pub pool_fraction: f64,
    pub donor_fraction: f64,
    pub neighbors: usize,
    /// Loss tracking in stage (a); off gives `D′ = D`.
    pub loss_tracking: bool,
    /// Influence selection in stage (b); off gives `D̂ = D′`.
    pub influence_selection: bool,
    pub retrain: Retrain,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            collab: CollabConfig::default(),
            influence: InfluenceConfig::default(),
            pool: PoolConfig::default(),
            model: EmbedMeanConfig::default(),
            eval: EvalConfig::default(),
            strategy: Strategy::Adaptive,
            pool_fraction: 0.8,
            donor_fraction: 0.05,
            neighbors: crate::topology::DEFAULT_NEIGHBORS,
            loss_tracking: true,
            influence_selection: true,
            retrain: Retrain::Reinit,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.collab.validate()?;
        for (name, v) in [("pool_fraction", self.pool_fraction), ("donor_fraction", self.donor_fraction)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Param(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if self.influence.damping < 0.0 {
            return Err(Error::Param("damping must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user: String,
    /// `[|D|, |D′|, |D̂|]`.
    pub stage_sizes: [usize; 3],
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunResult {
    pub strategy: Option<Strategy>,
    /// Evaluated users in user order.
    pub users: Vec<UserResult>,
    pub aggregate: Metrics,
    pub server_accesses: usize,
    pub messages: usize,
    pub logs: Vec<EpochLog>,
    pub tracked: Vec<TrackedPool>,
    pub reports: Vec<InfluenceReport>,
}

impl RunResult {
    /// One line per evaluated user, then one aggregate line.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for u in &self.users {
            serde_json::to_writer(&mut out, u)?;
            out.write_all(b"\n")?;
        }
        #[derive(Serialize)]
        struct Aggregate<'a> {
            aggregate: bool,
            strategy: Option<&'a str>,
            users: usize,
            hr5: f64,
            hr10: f64,
            ndcg5: f64,
            ndcg10: f64,
            server_accesses: usize,
        }
        serde_json::to_writer(
            &mut out,
            &Aggregate {
                aggregate: true,
                strategy: self.strategy.map(Strategy::name),
                users: self.users.len(),
                hr5: self.aggregate.hr5,
                hr10: self.aggregate.hr10,
                ndcg5: self.aggregate.ndcg5,
                ndcg10: self.aggregate.ndcg10,
                server_accesses: self.server_accesses,
            },
        )?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

/// Stage (a) and (b) outcome per device.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub d_prime: Vec<Vec<InstanceId>>,
    pub d_hat: Vec<Vec<InstanceId>>,
    pub tracked: Vec<TrackedPool>,
    pub reports: Vec<InfluenceReport>,
    pub logs: Vec<EpochLog>,
    pub messages: usize,
    /// Stage-(a) models, kept for resumed retraining.
    pub models: Vec<EmbedMeanModel>,
}

impl Selection {
    /// The same selection re-thresholded at `alpha`; stage (b) scores are reused.
    pub fn with_alpha(&self, alpha: f64) -> Result<Selection> {
        if self.reports.is_empty() {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        for (k, report) in out.reports.iter_mut().enumerate() {
            report.alpha = alpha;
            for e in &mut report.entries {
                e.harmful = e.psi > alpha;
            }
            out.d_hat[k] = select_adaptive(report, &self.d_prime[k])?;
        }
        Ok(out)
    }
}

fn device_init_seed(dev_seed: u64) -> u64 {
    seed::derive(dev_seed, &[seed::label("init")])
}

/// Devices with freshly initialized models and their initial reference sets `D(u)`.
pub fn build_devices(prep: &Prepared, init: &Initialized, cfg: &RunConfig) -> Result<Vec<Device<EmbedMeanModel>>> {
    let poi_cats = Arc::new(prep.corpus.pois.iter().map(|p| p.category_id).collect::<Vec<_>>());
    init.deployments
        .iter()
        .map(|d| {
            let mut model = EmbedMeanModel::new(
                cfg.model,
                Arc::clone(&prep.regions),
                Arc::clone(&poi_cats),
                prep.corpus.num_categories as usize,
                &d.local_regions,
            )?;
            model.init_random(device_init_seed(d.seed));
            Ok(Device {
                user: d.user,
                user_id: d.user_id.clone(),
                model,
                train: prep.split.users[d.user].train_pois(),
                reference: d.reference.clone(),
                geo_neighbors: d.geo_neighbors.clone(),
                sem_neighbors: d.sem_neighbors.clone(),
                seed: d.seed,
            })
        })
        .collect()
}

/// Stages (a) and (b): train with loss tracking to get `D′`, then discard
/// instances whose influence on the validation loss exceeds `α`.
pub fn select_references(prep: &Prepared, init: &Initialized, cfg: &RunConfig) -> Result<Selection> {
    cfg.validate()?;
    let mut devices = build_devices(prep, init, cfg)?;
    let pool = &*init.pool;
    let regions = &*prep.regions;
    let training = train_fleet(
        &mut devices,
        pool,
        regions,
        &cfg.collab,
        &TrainOptions {
            track: cfg.loss_tracking,
            corruption: None,
            stage: "select",
        },
    )?;
    let d_prime: Vec<Vec<InstanceId>> = training.tracked.iter().map(|t| t.kept.clone()).collect();
    for (dev, kept) in devices.iter_mut().zip(&d_prime) {
        dev.reference = kept.clone();
    }
    let mut messages = training.messages;

    let (d_hat, reports) = if cfg.influence_selection {
        let collaborate = cfg.collab.gamma > 0.0 || cfg.collab.mu > 0.0;
        let inboxes = if collaborate {
            let inboxes = collab::exchange_decisions(&devices, pool, cfg.collab.epochs)?;
            messages += inboxes.iter().map(Vec::len).sum::<usize>();
            inboxes
        } else {
            devices.iter().map(|_| Vec::new()).collect()
        };
        let results: Vec<Result<(Vec<InstanceId>, InfluenceReport)>> = devices
            .par_iter()
            .zip(inboxes.into_par_iter())
            .map(|(dev, inbox)| {
                let targets = collab::build_targets(dev, &inbox, pool, None, cfg.collab.epochs);
                device_selection(dev, &targets, prep, pool, cfg).map_err(|e| e.for_user(dev.user_id.clone()))
            })
            .collect();
        let mut d_hat = Vec::with_capacity(devices.len());
        let mut reports = Vec::with_capacity(devices.len());
        for r in results {
            let (keep, report) = r?;
            d_hat.push(keep);
            reports.push(report);
        }
        (d_hat, reports)
    } else {
        (d_prime.clone(), Vec::new())
    };

    Ok(Selection {
        d_prime,
        d_hat,
        tracked: training.tracked,
        reports,
        logs: training.logs,
        messages,
        models: devices.into_iter().map(|d| d.model).collect(),
    })
}

/// Influence scores of one device's `D′` against its validation check-in.
fn device_selection(
    dev: &Device<EmbedMeanModel>,
    targets: &[collab::InstanceTarget],
    prep: &Prepared,
    pool: &ReferencePool,
    cfg: &RunConfig,
) -> Result<(Vec<InstanceId>, InfluenceReport)> {
    let user = &prep.split.users[dev.user];
    let by_id: HashMap<InstanceId, &collab::InstanceTarget> = targets.iter().map(|t| (t.id, t)).collect();
    let g = dev.geo_neighbors.len().max(1) as f64;
    let s = dev.sem_neighbors.len().max(1) as f64;
    let train: Vec<Vec<LossTerm>> = dev
        .reference
        .iter()
        .map(|id| match by_id.get(id) {
            Some(t) => {
                let weight = match t.kind {
                    InstanceKind::Geo => cfg.collab.gamma / g,
                    InstanceKind::Sem => cfg.collab.mu / s,
                };
                let (input, vocab) = collab::instance_io(pool.instance(*id));
                vec![LossTerm::Distill {
                    input,
                    vocab,
                    target: &t.target,
                    weight,
                }]
            }
            None => Vec::new(),
        })
        .collect();
    let psi = match user.val {
        Some(v) if !dev.reference.is_empty() => {
            let val = vec![vec![LossTerm::NextItem {
                context: SeqInput::Pois(&dev.train),
                vocab: TargetVocab::Region(prep.regions.region_of(v.poi)),
                target: v.poi,
                weight: 1.0,
            }]];
            model_influence(&dev.model, &train, &val, &cfg.influence)?
        }
        _ => vec![0.0; dev.reference.len()],
    };
    let report = InfluenceReport::new(dev.user_id.clone(), &dev.reference, &psi, &cfg.influence);
    let keep = select_adaptive(&report, &dev.reference)?;
    Ok((keep, report))
}

/// Budget-matched sample of `full` with `budget[kind]` instances per kind.
fn sample_budget(
    full: &[InstanceId],
    popularity: &[f64],
    pool: &ReferencePool,
    budget: [usize; 2],
    weighted: bool,
    seed: u64,
) -> Result<Vec<InstanceId>> {
    let mut out = Vec::new();
    for (slot, kind) in [InstanceKind::Geo, InstanceKind::Sem].into_iter().enumerate() {
        let items: Vec<(InstanceId, f64)> = full
            .iter()
            .zip(popularity)
            .filter(|(id, _)| pool.instance(**id).kind == kind)
            .map(|(&id, &w)| (id, w))
            .collect();
        let n = budget[slot].min(items.len());
        let mut rng = seed::rng(seed, &[slot as u64]);
        if weighted {
            let picked = items
                .choose_multiple_weighted(&mut rng, n, |x| x.1 + POPULARITY_FLOOR)
                .map_err(|e| Error::Param(format!("popularity weights: {e}")))?;
            out.extend(picked.map(|x| x.0));
        } else {
            out.extend(items.choose_multiple(&mut rng, n).map(|x| x.0));
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Keeps never-visited items drawable.
const POPULARITY_FLOOR: f64 = 1e-6;

fn kind_counts(ids: &[InstanceId], pool: &ReferencePool) -> [usize; 2] {
    let geo = ids.iter().filter(|&&x| pool.instance(x).kind == InstanceKind::Geo).count();
    [geo, ids.len() - geo]
}

/// Reference sets for `strategy` given a completed selection.
pub fn strategy_references(init: &Initialized, sel: &Selection, strategy: Strategy) -> Result<Vec<Vec<InstanceId>>> {
    init.deployments
        .iter()
        .enumerate()
        .map(|(u, d)| match strategy {
            Strategy::Original => Ok(d.reference.clone()),
            Strategy::Adaptive => Ok(sel.d_hat[u].clone()),
            Strategy::Random | Strategy::Popular => sample_budget(
                &d.reference,
                &d.popularity,
                &init.pool,
                kind_counts(&sel.d_hat[u], &init.pool),
                strategy == Strategy::Popular,
                seed::derive(d.seed, &[seed::label(strategy.name())]),
            ),
        })
        .collect()
}

/// Stage (c): train on `references` and evaluate every user.
pub fn train_and_evaluate(
    prep: &Prepared,
    init: &Initialized,
    cfg: &RunConfig,
    references: Vec<Vec<InstanceId>>,
    resume_from: Option<&[EmbedMeanModel]>,
) -> Result<(Vec<EmbedMeanModel>, RunResult)> {
    let mut devices = build_devices(prep, init, cfg)?;
    for (dev, refs) in devices.iter_mut().zip(references) {
        dev.reference = refs;
    }
    if let Some(models) = resume_from {
        for (dev, m) in devices.iter_mut().zip(models) {
            dev.model = m.clone();
        }
    }
    let training = train_fleet(
        &mut devices,
        &init.pool,
        &prep.regions,
        &cfg.collab,
        &TrainOptions {
            track: false,
            corruption: None,
            stage: "final",
        },
    )?;
    let models: Vec<EmbedMeanModel> = devices.into_iter().map(|d| d.model).collect();
    let eval_cfg = EvalConfig {
        seed: seed::derive(cfg.seed, &[seed::label("eval"), cfg.eval.seed]),
        ..cfg.eval
    };
    let fleet = evaluate_fleet(
        &FleetScorer {
            models: &models,
            regions: &prep.regions,
        },
        &prep.split,
        &prep.regions,
        &eval_cfg,
    )?;
    let users = fleet
        .per_user
        .iter()
        .map(|m| UserResult {
            user: prep.split.users[m.user].user_id.clone(),
            stage_sizes: [0; 3],
            hr5: m.metrics.hr5,
            hr10: m.metrics.hr10,
            ndcg5: m.metrics.ndcg5,
            ndcg10: m.metrics.ndcg10,
        })
        .collect();
    let result = RunResult {
        strategy: None,
        users,
        aggregate: fleet.mean,
        server_accesses: init.server.accesses(),
        messages: training.messages,
        logs: training.logs,
        tracked: Vec::new(),
        reports: Vec::new(),
    };
    Ok((models, result))
}

/// Stage (c) for `strategy` on top of an optional completed selection
/// (`None` trains on `D`).
pub fn complete_run(
    prep: &Prepared,
    init: &Initialized,
    cfg: &RunConfig,
    strategy: Strategy,
    sel: Option<&Selection>,
) -> Result<RunResult> {
    let refs = match sel {
        Some(sel) => strategy_references(init, sel, strategy)?,
        None => init.deployments.iter().map(|d| d.reference.clone()).collect(),
    };
    let sizes: Vec<[usize; 3]> = init
        .deployments
        .iter()
        .enumerate()
        .map(|(u, d)| {
            let prime = sel.map_or(d.reference.len(), |s| s.d_prime[u].len());
            [d.reference.len(), prime, refs[u].len()]
        })
        .collect();
    let resume = match (cfg.retrain, sel) {
        (Retrain::Resume, Some(sel)) => Some(sel.models.as_slice()),
        _ => None,
    };
    let (_, mut result) = train_and_evaluate(prep, init, cfg, refs, resume)?;
    let index: HashMap<&str, usize> = prep.split.users.iter().enumerate().map(|(i, u)| (u.user_id.as_str(), i)).collect();
    for u in &mut result.users {
        u.stage_sizes = sizes[index[u.user.as_str()]];
    }
    result.strategy = Some(strategy);
    if let Some(sel) = sel {
        result.messages += sel.messages;
        let mut logs = sel.logs.clone();
        logs.append(&mut result.logs);
        result.logs = logs;
        result.tracked = sel.tracked.clone();
        result.reports = sel.reports.clone();
    }
    result.server_accesses = init.server.accesses();
    Ok(result)
}

/// The full pipeline for `cfg.strategy`. The original strategy trains once on
/// `D`; the sampling baselines run selection only to fix their budgets.
pub fn run_dard(prep: &Prepared, init: &Initialized, cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    if cfg.strategy == Strategy::Original {
        return complete_run(prep, init, cfg, Strategy::Original, None);
    }
    let sel = select_references(prep, init, cfg)?;
    complete_run(prep, init, cfg, cfg.strategy, Some(&sel))
}

/// All four strategies sharing one selection run.
pub fn run_strategy_baselines(prep: &Prepared, init: &Initialized, cfg: &RunConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let sel = select_references(prep, init, cfg)?;
    Strategy::ALL
        .into_iter()
        .map(|s| match s {
            Strategy::Original => complete_run(prep, init, cfg, s, None),
            _ => complete_run(prep, init, cfg, s, Some(&sel)),
        })
        .collect()
}

#[cfg(test)]
mod tests;
