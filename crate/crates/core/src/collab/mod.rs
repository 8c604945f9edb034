//! Collaborative training. Devices learn from their own check-ins and from
//! the soft decisions their geographical and semantic neighbors publish on
//! the joint reference set, while tracking per-instance distillation losses
//! to flag noisy reference instances.

mod exchange;

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PoiIdx;
use crate::linalg;
use crate::recmodel::{LocalModel, LossTerm, SeqInput, TargetVocab};
use crate::refgen::{InstanceId, InstanceKind, RefInstance, ReferencePool};
use crate::seed;
use crate::{Error, Result};

pub use exchange::{build_targets, exchange_decisions, Corruption, InstanceTarget, SoftDecisionMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisyPolicy {
    /// An instance is noisy if the most recent batch it appeared in removed it.
    LastEpoch,
    /// An instance is noisy if any batch removed it.
    AllEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollabConfig {
    pub gamma: f64,
    pub mu: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rho: f64,
    pub accumulate_noisy: NoisyPolicy,
}

impl Default for CollabConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            mu: 0.7,
            eta: 0.002,
            batch_size: 16,
            epochs: 50,
            rho: 0.8,
            accumulate_noisy: NoisyPolicy::LastEpoch,
        }
    }
}

impl CollabConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.mu >= 0.0) {
            return Err(Error::Param("gamma and mu must be non-negative".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Param(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) || self.batch_size == 0 {
            return Err(Error::Param("eta and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// The loss components of `L_total = L_loc + γ·L_geo + μ·L_sem`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub local: f64,
    pub geo: f64,
    pub sem: f64,
    pub total: f64,
}

impl LossParts {
    pub fn combine(local: f64, geo: f64, sem: f64, cfg: &CollabConfig) -> Self {
        Self {
            local,
            geo,
            sem,
            total: local + cfg.gamma * geo + cfg.mu * sem,
        }
    }
}

/// One simulated device.
#[derive(Debug, Clone)]
pub struct Device<M> {
    pub user: usize,
    pub user_id: String,
    pub model: M,
    pub train: Vec<PoiIdx>,
    /// The working reference set, ascending pool ids.
    pub reference: Vec<InstanceId>,
    pub geo_neighbors: Vec<usize>,
    pub sem_neighbors: Vec<usize>,
    pub seed: u64,
}

pub(crate) fn instance_io(inst: &RefInstance) -> (SeqInput<'_>, TargetVocab) {
    match inst.kind {
        InstanceKind::Geo => (
            SeqInput::Pois(&inst.items),
            TargetVocab::Region(inst.region.expect("geo instance has a region")),
        ),
        InstanceKind::Sem => (SeqInput::Cats(&inst.items), TargetVocab::Categories),
    }
}

/// Next-POI terms over `positions` of `train`, each weighted `scale/|positions|`.
fn local_terms<'a>(
    train: &'a [PoiIdx],
    positions: &[usize],
    regions: &crate::corpus::RegionMap,
    scale: f64,
) -> Vec<LossTerm<'a>> {
    let w = scale / positions.len().max(1) as f64;
    positions
        .iter()
        .map(|&t| LossTerm::NextItem {
            context: SeqInput::Pois(&train[..t]),
            vocab: TargetVocab::Region(regions.region_of(train[t])),
            target: train[t],
            weight: w,
        })
        .collect()
}

fn distill_terms<'a>(pool: &'a ReferencePool, targets: &'a [InstanceTarget], weight_of: impl Fn(&InstanceTarget) -> f64) -> Vec<LossTerm<'a>> {
    targets
        .iter()
        .filter_map(|t| {
            let w = weight_of(t);
            (w != 0.0).then(|| {
                let (input, vocab) = instance_io(pool.instance(t.id));
                LossTerm::Distill {
                    input,
                    vocab,
                    target: &t.target,
                    weight: w,
                }
            })
        })
        .collect()
}

/// Full-data `L_total` for one device: mean next-POI cross-entropy over its
/// training sequence plus neighbor-averaged distillation over `targets`.
pub fn total_loss<M: LocalModel>(
    device: &Device<M>,
    targets: &[InstanceTarget],
    pool: &ReferencePool,
    regions: &crate::corpus::RegionMap,
    cfg: &CollabConfig,
) -> Result<LossParts> {
    let positions: Vec<usize> = (1..device.train.len()).collect();
    let local = if positions.is_empty() {
        0.0
    } else {
        device.model.objective(&local_terms(&device.train, &positions, regions, 1.0))?
    };
    let g = device.geo_neighbors.len().max(1) as f64;
    let s = device.sem_neighbors.len().max(1) as f64;
    let geo = device.model.objective(&distill_terms(pool, targets, |t| match t.kind {
        InstanceKind::Geo => 1.0 / g,
        InstanceKind::Sem => 0.0,
    }))?;
    let sem = device.model.objective(&distill_terms(pool, targets, |t| match t.kind {
        InstanceKind::Geo => 0.0,
        InstanceKind::Sem => 1.0 / s,
    }))?;
    Ok(LossParts::combine(local, geo, sem, cfg))
}

/// Keeps the `⌈ρ·|batch|⌉` smallest-loss instances, ties by pool id.
pub fn select_clean_batch(batch: &[InstanceId], losses: &[f64], rho: f64) -> Result<(Vec<InstanceId>, Vec<InstanceId>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if batch.len() != losses.len() {
        return Err(Error::Contract(format!("{} instances but {} losses", batch.len(), losses.len())));
    }
    let keep = ((rho * batch.len() as f64).ceil() as usize).clamp(1, batch.len());
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(batch[a].cmp(&batch[b])));
    let kept = order[..keep].iter().map(|&i| batch[i]).collect();
    let removed = order[keep..].iter().map(|&i| batch[i]).collect();
    Ok((kept, removed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub instance: InstanceId,
    pub epoch: usize,
    pub step: usize,
}

/// The outcome of loss tracking: `kept ∪ removed = D`, disjoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackedPool {
    pub kept: Vec<InstanceId>,
    pub removed: Vec<Removal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub user: String,
    pub epoch: usize,
    /// Mean over the epoch's steps of the batch losses.
    pub local_loss: f64,
    pub geo_loss: f64,
    pub sem_loss: f64,
    pub total_loss: f64,
    pub removed: usize,
    pub param_norm: f64,
}

pub fn write_logs(logs: &[EpochLog], mut out: impl Write) -> Result<()> {
    for l in logs {
        serde_json::to_writer(&mut out, l)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Apply loss tracking; otherwise every reference instance is kept.
    pub track: bool,
    pub corruption: Option<&'a Corruption>,
    /// Distinguishes the seeds of separate training stages.
    pub stage: &'a str,
}

#[derive(Debug, Clone, Default)]
pub struct FleetTraining {
    pub tracked: Vec<TrackedPool>,
    pub logs: Vec<EpochLog>,
    pub messages: usize,
}

struct TrackState {
    // per own reference instance (index into device.reference): latest outcome
    last: Vec<Option<(bool, usize, usize)>>,
    ever: Vec<Option<(usize, usize)>>,
    cursor: usize,
    order: Vec<usize>,
    pass: u64,
}

/// Trains every device for `cfg.epochs` epochs. Each epoch starts with a
/// decision exchange (one message per neighbor relation), then runs
/// `⌈(|train|−1)/M⌉` steps; a step combines a mini-batch of the device's own
/// check-in positions with the next `M` instances of its joint reference set.
pub fn train_fleet<M: LocalModel>(
    devices: &mut [Device<M>],
    pool: &ReferencePool,
    regions: &crate::corpus::RegionMap,
    cfg: &CollabConfig,
    opts: &TrainOptions,
) -> Result<FleetTraining> {
    cfg.validate()?;
    let collaborate = cfg.gamma > 0.0 || cfg.mu > 0.0;
    let mut states: Vec<TrackState> = devices
        .iter()
        .map(|d| TrackState {
            last: vec![None; d.reference.len()],
            ever: vec![None; d.reference.len()],
            cursor: 0,
            order: Vec::new(),
            pass: 0,
        })
        .collect();
    let mut logs = Vec::with_capacity(devices.len() * cfg.epochs);
    let mut messages = 0;
    for epoch in 0..cfg.epochs {
        let inboxes = if collaborate {
            let inboxes = exchange_decisions(devices, pool, epoch)?;
            messages += inboxes.iter().map(Vec::len).sum::<usize>();
            inboxes
        } else {
            devices.iter().map(|_| Vec::new()).collect()
        };
        let results: Vec<Result<EpochLog>> = devices
            .par_iter_mut()
            .zip(states.par_iter_mut())
            .zip(inboxes.into_par_iter())
            .map(|((dev, st), inbox)| {
                let targets = build_targets(dev, &inbox, pool, opts.corruption, epoch);
                run_epoch(dev, st, &targets, pool, regions, cfg, opts, epoch).map_err(|e| e.for_user(dev.user_id.clone()))
            })
            .collect();
        for r in results {
            logs.push(r?);
        }
    }
    let tracked = devices
        .iter()
        .zip(&states)
        .map(|(dev, st)| {
            let mut tp = TrackedPool::default();
            for (k, &id) in dev.reference.iter().enumerate() {
                let hit = match cfg.accumulate_noisy {
                    NoisyPolicy::LastEpoch => st.last[k].filter(|s| s.0).map(|s| (s.1, s.2)),
                    NoisyPolicy::AllEpochs => st.ever[k],
                };
                match hit {
                    Some((epoch, step)) => tp.removed.push(Removal { instance: id, epoch, step }),
                    None => tp.kept.push(id),
                }
            }
            tp
        })
        .collect();
    Ok(FleetTraining { tracked, logs, messages })
}

#[allow(clippy::too_many_arguments)]
fn run_epoch<M: LocalModel>(
    dev: &mut Device<M>,
    st: &mut TrackState,
    targets: &[InstanceTarget],
    pool: &ReferencePool,
    regions: &crate::corpus::RegionMap,
    cfg: &CollabConfig,
    opts: &TrainOptions,
    epoch: usize,
) -> Result<EpochLog> {
    let m = cfg.batch_size;
    let mut rng = seed::rng(dev.seed, &[seed::label(opts.stage), seed::label("local-order"), epoch as u64]);
    let mut positions: Vec<usize> = (1..dev.train.len()).collect();
    positions.shuffle(&mut rng);
    let steps = positions.len().div_ceil(m).max(1);
    let g = dev.geo_neighbors.len().max(1) as f64;
    let s = dev.sem_neighbors.len().max(1) as f64;
    let weight = |t: &InstanceTarget| match t.kind {
        InstanceKind::Geo => cfg.gamma / g,
        InstanceKind::Sem => cfg.mu / s,
    };
    let mut sums = [0.0f64; 3];
    let mut removed_now = 0;
    let mut grad = vec![0.0; dev.model.num_params()];
    for step in 0..steps {
        let local_batch = &positions[(step * m).min(positions.len())..((step + 1) * m).min(positions.len())];
        let terms = local_terms(&dev.train, local_batch, regions, 1.0);

        // next M reference instances, cycling through seeded passes
        let mut batch: Vec<&InstanceTarget> = Vec::new();
        if !targets.is_empty() {
            while batch.len() < m.min(targets.len()) {
                if st.cursor >= st.order.len() {
                    st.order = (0..targets.len()).collect();
                    let mut prng = seed::rng(dev.seed, &[seed::label(opts.stage), seed::label("ref-order"), st.pass]);
                    st.order.shuffle(&mut prng);
                    st.pass += 1;
                    st.cursor = 0;
                }
                batch.push(&targets[st.order[st.cursor]]);
                st.cursor += 1;
            }
        }

        // foreign instances take part in the selection but only own ones are recorded
        let mut kept: Vec<&InstanceTarget> = batch.clone();
        if opts.track && !batch.is_empty() {
            let mut losses = Vec::with_capacity(batch.len());
            for t in &batch {
                let (input, vocab) = instance_io(pool.instance(t.id));
                let p = dev.model.forward(input, vocab)?;
                losses.push(t.target.value(&p.probs) / t.target.count);
            }
            let ids: Vec<InstanceId> = batch.iter().map(|t| t.id).collect();
            let (keep_ids, _) = select_clean_batch(&ids, &losses, cfg.rho)?;
            kept.retain(|t| keep_ids.contains(&t.id));
            for t in batch.iter().filter(|t| t.own) {
                let k = dev.reference.binary_search(&t.id).expect("own instance in reference set");
                let dropped = !keep_ids.contains(&t.id);
                st.last[k] = Some((dropped, epoch, step));
                if dropped {
                    removed_now += 1;
                    st.ever[k].get_or_insert((epoch, step));
                }
            }
        }

        let mut geo_terms = Vec::new();
        let mut sem_terms = Vec::new();
        for t in &kept {
            let w = weight(t);
            if w == 0.0 {
                continue;
            }
            let (input, vocab) = instance_io(pool.instance(t.id));
            let term = LossTerm::Distill {
                input,
                vocab,
                target: &t.target,
                weight: w,
            };
            match t.kind {
                InstanceKind::Geo => geo_terms.push(term),
                InstanceKind::Sem => sem_terms.push(term),
            }
        }
        if terms.is_empty() && geo_terms.is_empty() && sem_terms.is_empty() {
            continue;
        }
        grad.fill(0.0);
        let theta = dev.model.params();
        let local = dev.model.objective_with(theta, &terms, Some(&mut grad))?;
        let geo = dev.model.objective_with(theta, &geo_terms, Some(&mut grad))?;
        let sem = dev.model.objective_with(theta, &sem_terms, Some(&mut grad))?;
        let value = local + geo + sem;
        if !value.is_finite() || grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::Training { epoch, batch: step, loss: value });
        }
        sums[0] += local;
        if cfg.gamma > 0.0 {
            sums[1] += geo / cfg.gamma;
        }
        if cfg.mu > 0.0 {
            sums[2] += sem / cfg.mu;
        }
        linalg::axpy(-cfg.eta, &grad, dev.model.params_mut());
    }
    let inv = 1.0 / steps as f64;
    Ok(EpochLog {
        user: dev.user_id.clone(),
        epoch,
        local_loss: sums[0] * inv,
        geo_loss: sums[1] * inv,
        sem_loss: sums[2] * inv,
        total_loss: (sums[0] + cfg.gamma * sums[1] + cfg.mu * sums[2]) * inv,
        removed: removed_now,
        param_norm: linalg::norm(dev.model.params()),
    })
}

#[cfg(test)]
mod tests;
