//! Reference pool generation. Geographical reference sequences come from
//! exchanging suffixes of donor check-in sequences at a shared POI; semantic
//! ones are Markov walks over the category transition matrix, each optionally
//! realized as a POI sequence inside a region.

mod markov;
mod realize;
mod transform;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{CatId, CategorySequence, CheckInCorpus, Poi, PoiIdx, RegionMap, SplitCorpus};
use crate::seed;
use crate::{Error, Result};

pub use markov::{build_transition_matrix, prob_generate, uniform_generate, TransitionMatrix};
pub use realize::{realize_poi_sequence, RealizeIndex, MAX_HOP_KM};
pub use transform::{
    exchange_suffixes, random_replace_generate, region_pure, transform_generate, transform_pool,
    MIN_REFERENCE_LEN,
};

pub type InstanceId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Geo,
    Sem,
}

/// One reference sequence as the models see it: POIs of one region, or
/// categories.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RefInstance {
    pub kind: InstanceKind,
    /// Set for geographical instances.
    pub region: Option<u32>,
    pub items: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeoSequence {
    pub region: u32,
    pub pois: Vec<PoiIdx>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemSequence {
    pub cats: Vec<CatId>,
    pub realizations: BTreeMap<u32, Vec<PoiIdx>>,
}

/// The candidate pool D. Instances are numbered: transformation outputs first,
/// then category walks, then realizations (walk order, region ascending).
/// Realizations count as geographical instances.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePool {
    pub num_regions: usize,
    pub geo: Vec<GeoSequence>,
    pub sem: Vec<SemSequence>,
    instances: Vec<RefInstance>,
    by_region: Vec<Vec<InstanceId>>,
    sem_ids: Vec<InstanceId>,
}

impl ReferencePool {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance(&self, id: InstanceId) -> &RefInstance {
        &self.instances[id]
    }

    pub fn instances(&self) -> &[RefInstance] {
        &self.instances
    }

    /// Geographical instances labeled with region `r`, ascending ids.
    pub fn geo_in_region(&self, r: u32) -> &[InstanceId] {
        &self.by_region[r as usize]
    }

    pub fn sem_ids(&self) -> &[InstanceId] {
        &self.sem_ids
    }

    pub fn num_geo(&self) -> usize {
        self.by_region.iter().map(Vec::len).sum()
    }

    pub fn num_sem(&self) -> usize {
        self.sem_ids.len()
    }

    pub fn write_jsonl(&self, catalog: &[Poi], mut out: impl Write) -> Result<()> {
        let ids = |pois: &[PoiIdx]| -> Vec<String> { pois.iter().map(|&p| catalog[p as usize].poi_id.clone()).collect() };
        for g in &self.geo {
            let rec = PoolRecord::Geo {
                region: g.region,
                pois: ids(&g.pois),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        for s in &self.sem {
            let rec = PoolRecord::Sem {
                cats: s.cats.clone(),
                realizations: s.realizations.iter().map(|(r, p)| (r.to_string(), ids(p))).collect(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum PoolRecord {
    Geo {
        region: u32,
        pois: Vec<String>,
    },
    Sem {
        cats: Vec<CatId>,
        realizations: BTreeMap<String, Vec<String>>,
    },
}

/// Reads a pool file against the catalog it was written with.
pub fn read_pool_jsonl(reader: impl BufRead, catalog: &[Poi], num_regions: usize) -> Result<ReferencePool> {
    let index: HashMap<&str, PoiIdx> = catalog
        .iter()
        .enumerate()
        .map(|(i, p)| (p.poi_id.as_str(), i as PoiIdx))
        .collect();
    let resolve = |ids: Vec<String>, line: usize| -> Result<Vec<PoiIdx>> {
        ids.into_iter()
            .map(|id| {
                index.get(id.as_str()).copied().ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("unknown poi_id {id:?}"),
                })
            })
            .collect()
    };
    let mut geo = Vec::new();
    let mut sem = Vec::new();
    let mut realizations = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoolRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        match rec {
            PoolRecord::Geo { region, pois } => geo.push((region, resolve(pois, i + 1)?)),
            PoolRecord::Sem { cats, realizations: reals } => {
                let mut map = BTreeMap::new();
                for (r, pois) in reals {
                    let r: u32 = r.parse().map_err(|_| Error::Parse {
                        line: i + 1,
                        msg: format!("bad region key {r:?}"),
                    })?;
                    map.insert(r, resolve(pois, i + 1)?);
                }
                sem.push(CategorySequence {
                    user_id: None,
                    categories: cats,
                });
                realizations.push(map);
            }
        }
    }
    if let Some(r) = geo
        .iter()
        .map(|g| g.0)
        .chain(realizations.iter().flat_map(|m| m.keys().copied()))
        .find(|&r| r as usize >= num_regions)
    {
        return Err(Error::Integrity(format!("pool region {r} >= {num_regions}")));
    }
    Ok(assemble_pool(num_regions, geo, sem, realizations))
}

/// Deduplicates and indexes generated sequences. `realizations[i]` belongs to
/// `sem_seqs[i]`; a missing entry means no realization. Duplicate category
/// walks merge their realizations, first one wins per region.
pub fn assemble_pool(
    num_regions: usize,
    geo_seqs: Vec<(u32, Vec<PoiIdx>)>,
    sem_seqs: Vec<CategorySequence>,
    realizations: Vec<BTreeMap<u32, Vec<PoiIdx>>>,
) -> ReferencePool {
    let mut seen = HashSet::new();
    let geo: Vec<GeoSequence> = geo_seqs
        .into_iter()
        .filter(|g| seen.insert(g.clone()))
        .map(|(region, pois)| GeoSequence { region, pois })
        .collect();

    let mut sem: Vec<SemSequence> = Vec::new();
    let mut sem_pos: HashMap<Vec<CatId>, usize> = HashMap::new();
    let mut reals = realizations.into_iter();
    for s in sem_seqs {
        let real = reals.next().unwrap_or_default();
        match sem_pos.get(&s.categories) {
            Some(&i) => {
                for (r, pois) in real {
                    sem[i].realizations.entry(r).or_insert(pois);
                }
            }
            None => {
                sem_pos.insert(s.categories.clone(), sem.len());
                sem.push(SemSequence {
                    cats: s.categories,
                    realizations: real,
                });
            }
        }
    }

    let mut instances = Vec::new();
    let mut by_region = vec![Vec::new(); num_regions];
    let mut sem_ids = Vec::new();
    for g in &geo {
        by_region[g.region as usize].push(instances.len());
        instances.push(RefInstance {
            kind: InstanceKind::Geo,
            region: Some(g.region),
            items: g.pois.clone(),
        });
    }
    for s in &sem {
        sem_ids.push(instances.len());
        instances.push(RefInstance {
            kind: InstanceKind::Sem,
            region: None,
            items: s.cats.clone(),
        });
    }
    let mut seen_real: HashSet<(u32, Vec<PoiIdx>)> = geo.iter().map(|g| (g.region, g.pois.clone())).collect();
    for s in &sem {
        for (&r, pois) in &s.realizations {
            if seen_real.insert((r, pois.clone())) {
                by_region[r as usize].push(instances.len());
                instances.push(RefInstance {
                    kind: InstanceKind::Geo,
                    region: Some(r),
                    items: pois.clone(),
                });
            }
        }
    }
    ReferencePool {
        num_regions,
        geo,
        sem,
        instances,
        by_region,
        sem_ids,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Target number of transformation outputs (V).
    pub geo_target: usize,
    /// Number of category walks (Z).
    pub sem_target: usize,
    pub seq_len: usize,
    /// Cap on realizations per region.
    pub realizations_per_region: usize,
    /// `false` replaces suffix exchange by random in-region item replacement.
    pub transform: bool,
    /// `false` replaces Markov walks by uniform category draws.
    pub markov: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            geo_target: 200,
            sem_target: 200,
            seq_len: 20,
            realizations_per_region: 25,
            transform: true,
            markov: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub donor_windows: usize,
    pub geo_generated: usize,
    pub sem_generated: usize,
    pub realization_attempts: usize,
    pub realization_failures: usize,
}

const TRANSFORM_ROUNDS: usize = 64;
const REPLACE_RATE: f64 = 0.5;

/// Overlapping windows of the donors' training sequences; the raw material
/// for suffix exchange.
pub fn donor_windows(split: &SplitCorpus, donors: &[usize], len: usize) -> Vec<Vec<PoiIdx>> {
    let stride = (len / 4).max(1);
    let mut out = Vec::new();
    for &d in donors {
        let pois = split.users[d].train_pois();
        if pois.len() <= len {
            if !pois.is_empty() {
                out.push(pois);
            }
            continue;
        }
        let mut start = 0;
        loop {
            out.push(pois[start..start + len].to_vec());
            if start + len == pois.len() {
                break;
            }
            start = (start + stride).min(pois.len() - len);
        }
    }
    out
}

/// Full pool generation from the donors' training data and the category
/// transitions of every user's training data.
pub fn build_pool(
    corpus: &CheckInCorpus,
    split: &SplitCorpus,
    regions: &RegionMap,
    donors: &[usize],
    cfg: &PoolConfig,
    seed: u64,
) -> Result<(ReferencePool, PoolStats)> {
    if cfg.seq_len < MIN_REFERENCE_LEN {
        return Err(Error::Param(format!("pool seq_len must be at least {MIN_REFERENCE_LEN}")));
    }
    let mut stats = PoolStats::default();
    let windows = donor_windows(split, donors, cfg.seq_len);
    stats.donor_windows = windows.len();
    let geo_seed = seed::derive(seed, &[seed::label("pool-geo")]);
    let geo = if cfg.transform {
        transform_pool(&windows, regions, cfg.geo_target, TRANSFORM_ROUNDS, geo_seed)?
    } else {
        random_replace_generate(&windows, regions, cfg.geo_target, REPLACE_RATE, geo_seed)?
    };
    stats.geo_generated = geo.len();

    let sem_seed = seed::derive(seed, &[seed::label("pool-sem")]);
    let num_categories = corpus.num_categories as usize;
    let sem = if cfg.markov {
        let cat_seqs: Vec<CategorySequence> = split
            .users
            .iter()
            .map(|u| CategorySequence {
                user_id: Some(u.user_id.clone()),
                categories: corpus.categories_of(&u.train_pois()),
            })
            .collect();
        let tm = build_transition_matrix(&cat_seqs, num_categories)?;
        prob_generate(&tm, cfg.seq_len, cfg.sem_target, sem_seed)?
    } else {
        uniform_generate(num_categories, cfg.seq_len, cfg.sem_target, sem_seed)?
    };
    stats.sem_generated = sem.len();

    let index = RealizeIndex::new(&corpus.pois, regions);
    let mut per_region = vec![0usize; regions.k];
    let mut realizations = Vec::with_capacity(sem.len());
    for (i, s) in sem.iter().enumerate() {
        let mut map = BTreeMap::new();
        for r in 0..regions.k {
            if per_region[r] >= cfg.realizations_per_region {
                continue;
            }
            stats.realization_attempts += 1;
            let mut rng = seed::rng(seed, &[seed::label("realize"), i as u64, r as u64]);
            match index.realize(&s.categories, r as u32, &mut rng) {
                Some(pois) => {
                    per_region[r] += 1;
                    map.insert(r as u32, pois);
                }
                None => stats.realization_failures += 1,
            }
        }
        realizations.push(map);
    }
    Ok((assemble_pool(regions.k, geo, sem, realizations), stats))
}
