//! The server's one-off role: sample donors, build the pool, pick neighbors,
//! and hand each device its deployment. Afterwards the server state is sealed
//! and every read is counted.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;

use super::{Prepared, RunConfig};
use crate::corpus::PoiIdx;
use crate::refgen::{build_pool, InstanceId, InstanceKind, PoolStats, ReferencePool};
use crate::seed;
use crate::topology::{self, NeighborSets, RegionProfile};
use crate::{Error, Result};

/// What a device receives at initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub user: usize,
    pub user_id: String,
    /// Regions the device's model covers: every region the user visited.
    pub local_regions: Vec<u32>,
    /// `D(u)`, ascending pool ids.
    pub reference: Vec<InstanceId>,
    /// Visit-frequency weight of each entry of `reference`.
    pub popularity: Vec<f64>,
    pub geo_neighbors: Vec<usize>,
    pub sem_neighbors: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug)]
struct ServerState {
    donors: Vec<usize>,
    profiles: Vec<RegionProfile>,
    neighbors: NeighborSets,
}

/// Server-held state. Reads after [`Server::seal`] increment the access counter.
#[derive(Debug)]
pub struct Server {
    state: ServerState,
    sealed: bool,
    accesses: AtomicUsize,
}

impl Server {
    fn read(&self) -> &ServerState {
        if self.sealed {
            self.accesses.fetch_add(1, Ordering::Relaxed);
        }
        &self.state
    }

    fn seal(&mut self) {
        self.sealed = true;
    }

    /// Reads of server state since initialization finished.
    pub fn accesses(&self) -> usize {
        self.accesses.load(Ordering::Relaxed)
    }

    pub fn donors(&self) -> &[usize] {
        &self.read().donors
    }

    pub fn profiles(&self) -> &[RegionProfile] {
        &self.read().profiles
    }

    pub fn neighbors(&self) -> &NeighborSets {
        &self.read().neighbors
    }
}

/// Everything produced by initialization. The pool is public data shared by
/// all devices; the server is kept only so its quiescence can be checked.
#[derive(Debug)]
pub struct Initialized {
    pub pool: Arc<ReferencePool>,
    pub pool_stats: PoolStats,
    pub server: Server,
    pub deployments: Vec<Deployment>,
}

fn mean_of(items: &[u32], counts: &[f64]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    items.iter().map(|&x| counts[x as usize]).sum::<f64>() / items.len() as f64
}

pub fn server_init(prep: &Prepared, cfg: &RunConfig) -> Result<Initialized> {
    cfg.validate()?;
    let split = &prep.split;
    let regions = &*prep.regions;
    let n = split.users.len();

    let num_donors = ((cfg.donor_fraction * n as f64).ceil() as usize).min(n);
    if num_donors == 0 {
        return Err(Error::Init("no donor users".into()));
    }
    let mut donors: Vec<usize> = (0..n).collect();
    donors.shuffle(&mut seed::rng(cfg.seed, &[seed::label("donors")]));
    donors.truncate(num_donors);
    donors.sort_unstable();

    let (pool, pool_stats) = build_pool(
        &prep.corpus,
        split,
        regions,
        &donors,
        &cfg.pool,
        seed::derive(cfg.seed, &[seed::label("pool")]),
    )?;

    let train: Vec<Vec<PoiIdx>> = split.users.iter().map(|u| u.train_pois()).collect();
    let profiles = topology::assign_user_regions(&train, regions);
    let cats: Vec<Vec<u32>> = train.iter().map(|p| prep.corpus.categories_of(p)).collect();
    let histograms = topology::category_histograms(&cats, prep.corpus.num_categories as usize);
    let neighbors = NeighborSets {
        geo: topology::geo_neighbors(&profiles, cfg.neighbors),
        sem: topology::sem_neighbors(&histograms, cfg.neighbors),
    };

    let mut poi_counts = vec![0.0; prep.corpus.num_pois()];
    let mut cat_counts = vec![0.0; prep.corpus.num_categories as usize];
    for (pois, cs) in train.iter().zip(&cats) {
        pois.iter().for_each(|&p| poi_counts[p as usize] += 1.0);
        cs.iter().for_each(|&c| cat_counts[c as usize] += 1.0);
    }

    let mut server = Server {
        state: ServerState {
            donors,
            profiles,
            neighbors,
        },
        sealed: false,
        accesses: AtomicUsize::new(0),
    };

    let mut deployments = Vec::with_capacity(n);
    for (u, user) in split.users.iter().enumerate() {
        let mut local_regions: Vec<u32> = user.all_events().iter().map(|e| regions.region_of(e.poi)).collect();
        local_regions.sort_unstable();
        local_regions.dedup();
        let mut slice: Vec<InstanceId> = local_regions.iter().flat_map(|&r| pool.geo_in_region(r).iter().copied()).collect();
        slice.extend_from_slice(pool.sem_ids());
        slice.sort_unstable();
        let dev_seed = seed::derive(cfg.seed, &[seed::label("device"), seed::label(&user.user_id)]);
        let keep = ((cfg.pool_fraction * slice.len() as f64).round() as usize).clamp(slice.len().min(1), slice.len());
        let mut reference: Vec<InstanceId> = slice
            .choose_multiple(&mut seed::rng(dev_seed, &[seed::label("pool-fraction")]), keep)
            .copied()
            .collect();
        reference.sort_unstable();
        let popularity = reference
            .iter()
            .map(|&id| {
                let inst = pool.instance(id);
                match inst.kind {
                    InstanceKind::Geo => mean_of(&inst.items, &poi_counts),
                    InstanceKind::Sem => mean_of(&inst.items, &cat_counts),
                }
            })
            .collect();
        let state = server.read();
        deployments.push(Deployment {
            user: u,
            user_id: user.user_id.clone(),
            local_regions,
            reference,
            popularity,
            geo_neighbors: state.neighbors.geo[u].clone(),
            sem_neighbors: state.neighbors.sem[u].clone(),
            seed: dev_seed,
        });
    }
    server.seal();
    Ok(Initialized {
        pool: Arc::new(pool),
        pool_stats,
        server,
        deployments,
    })
}
