//! Epoch-scoped decision exchange. Every neighbor relation carries exactly one
//! message per epoch: the sender's soft decisions on the joint reference set
//! of sender and recipient, restricted to instances both models can score.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::Exp1;
use rayon::prelude::*;

use super::{instance_io, Device};
use crate::recmodel::{DistillTarget, LocalModel, SoftDecision};
use crate::refgen::{InstanceId, InstanceKind, ReferencePool};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SoftDecisionMessage {
    pub sender: usize,
    pub recipient: usize,
    pub round: usize,
    pub kind: InstanceKind,
    pub payload: Vec<(InstanceId, Arc<SoftDecision>)>,
}

/// Distillation target of one reference instance as seen by one device.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    pub id: InstanceId,
    pub kind: InstanceKind,
    /// Whether the instance is in the device's own reference set (only those
    /// are subject to loss tracking).
    pub own: bool,
    pub target: DistillTarget,
}

/// Replaces every received decision on `instances` with a fresh draw from the
/// uniform distribution over the probability simplex.
#[derive(Debug, Clone, Default)]
pub struct Corruption {
    pub instances: HashSet<InstanceId>,
    pub seed: u64,
}

impl Corruption {
    fn noise(&self, len: usize, parts: &[u64]) -> Vec<f64> {
        let mut rng = seed::rng(self.seed, parts);
        let mut q: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let s: f64 = q.iter().sum();
        q.iter_mut().for_each(|x| *x /= s);
        q
    }
}

struct Coverage {
    regions: Vec<bool>,
    sem: bool,
}

impl Coverage {
    fn of<M: LocalModel>(model: &M, k: usize) -> Self {
        Self {
            regions: (0..k as u32)
                .map(|r| model.vocab_size(crate::recmodel::TargetVocab::Region(r)).is_ok())
                .collect(),
            sem: model.vocab_size(crate::recmodel::TargetVocab::Categories).is_ok(),
        }
    }

    fn covers(&self, pool: &ReferencePool, id: InstanceId) -> bool {
        let inst = pool.instance(id);
        match inst.kind {
            InstanceKind::Geo => self.regions[inst.region.expect("geo region") as usize],
            InstanceKind::Sem => self.sem,
        }
    }
}

/// Ascending union of two ascending id lists, keeping ids of `kind` only.
fn joint(a: &[InstanceId], b: &[InstanceId], pool: &ReferencePool, kind: InstanceKind) -> Vec<InstanceId> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) if x == y => {
                i += 1;
                j += 1;
                x
            }
            (Some(&x), Some(&y)) if x < y => {
                i += 1;
                x
            }
            (Some(_), Some(&y)) => {
                j += 1;
                y
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (None, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        if pool.instance(next).kind == kind {
            out.push(next);
        }
    }
    out
}

/// Runs one exchange round and returns each device's inbox, ordered by
/// (geo neighbors, then semantic neighbors) in neighbor-list order.
pub fn exchange_decisions<M: LocalModel>(devices: &[Device<M>], pool: &ReferencePool, round: usize) -> Result<Vec<Vec<SoftDecisionMessage>>> {
    for (k, d) in devices.iter().enumerate() {
        if d.user != k {
            return Err(Error::Protocol(format!("device at position {k} belongs to user {}", d.user)));
        }
        if let Some(&j) = d.geo_neighbors.iter().chain(&d.sem_neighbors).find(|&&j| j >= devices.len() || j == k) {
            return Err(Error::Protocol(format!("user {k} lists invalid neighbor {j}")));
        }
    }
    let cover: Vec<Coverage> = devices.iter().map(|d| Coverage::of(&d.model, pool.num_regions)).collect();

    let mut needed = vec![vec![false; pool.len()]; devices.len()];
    for (i, d) in devices.iter().enumerate() {
        for (list, kind) in [(&d.geo_neighbors, InstanceKind::Geo), (&d.sem_neighbors, InstanceKind::Sem)] {
            for &j in list {
                for &x in d.reference.iter().chain(&devices[j].reference) {
                    if pool.instance(x).kind == kind && cover[i].covers(pool, x) {
                        needed[j][x] = true;
                    }
                }
            }
        }
    }

    let decisions: Vec<Vec<Option<Arc<SoftDecision>>>> = devices
        .par_iter()
        .zip(needed.par_iter())
        .zip(cover.par_iter())
        .map(|((d, need), cov)| {
            need.iter()
                .enumerate()
                .map(|(x, &n)| {
                    if !n || !cov.covers(pool, x) {
                        return Ok(None);
                    }
                    let (input, vocab) = instance_io(pool.instance(x));
                    Ok(Some(Arc::new(d.model.forward(input, vocab)?)))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.for_user(d.user_id.clone()))
        })
        .collect::<Result<_>>()?;

    Ok(devices
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut inbox = Vec::with_capacity(d.geo_neighbors.len() + d.sem_neighbors.len());
            for (list, kind) in [(&d.geo_neighbors, InstanceKind::Geo), (&d.sem_neighbors, InstanceKind::Sem)] {
                for &j in list {
                    let payload = joint(&d.reference, &devices[j].reference, pool, kind)
                        .into_iter()
                        .filter_map(|x| decisions[j][x].as_ref().filter(|_| cover[i].covers(pool, x)).map(|q| (x, Arc::clone(q))))
                        .collect();
                    inbox.push(SoftDecisionMessage {
                        sender: j,
                        recipient: i,
                        round,
                        kind,
                        payload,
                    });
                }
            }
            inbox
        })
        .collect())
}

/// Aggregates an inbox into one distillation target per instance, ascending ids.
pub fn build_targets<M>(
    device: &Device<M>,
    inbox: &[SoftDecisionMessage],
    pool: &ReferencePool,
    corruption: Option<&Corruption>,
    round: usize,
) -> Vec<InstanceTarget> {
    let mut grouped: BTreeMap<InstanceId, Vec<Vec<f64>>> = BTreeMap::new();
    for msg in inbox {
        for (x, q) in &msg.payload {
            let q = match corruption {
                Some(c) if c.instances.contains(x) => c.noise(
                    q.probs.len(),
                    &[device.user as u64, *x as u64, msg.sender as u64, round as u64],
                ),
                _ => q.probs.clone(),
            };
            grouped.entry(*x).or_default().push(q);
        }
    }
    grouped
        .into_iter()
        .filter_map(|(id, qs)| {
            let target = DistillTarget::from_decisions(qs.iter().map(Vec::as_slice))?;
            Some(InstanceTarget {
                id,
                kind: pool.instance(id).kind,
                own: device.reference.binary_search(&id).is_ok(),
                target,
            })
        })
        .collect()
}
