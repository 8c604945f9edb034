//! Desk-scale synthetic check-in corpora.
//!
//! POIs sit around a handful of geographic cluster centres. Each user gets a
//! home cluster and a Dirichlet category preference, then walks a first-order
//! Markov chain whose transition weights combine POI popularity, the user's
//! category preference, a shared category-to-category transition table, a
//! distance decay from the current POI and a strong home-cluster bias.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::geo::haversine_km;
use super::{CheckIn, CheckInCorpus, CheckInSequence, Poi};
use crate::seed;
use crate::{Error, Result};

const CENTER: (f64, f64) = (40.75, -73.98);
const CLUSTER_RING_KM: f64 = 15.0;
const POI_SPREAD_KM: f64 = 1.2;
const DISTANCE_DECAY_KM: f64 = 3.0;
const AWAY_FROM_HOME: f64 = 0.02;
const KM_PER_DEG: f64 = 111.32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub pois: usize,
    pub categories: usize,
    pub geo_clusters: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// Dirichlet concentration of each user's category preference. Small is peaked.
    pub pref_concentration: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 50,
            pois: 400,
            categories: 20,
            geo_clusters: 4,
            seq_len_min: 30,
            seq_len_max: 60,
            pref_concentration: 0.5,
        }
    }
}

impl SynthConfig {
    pub const KEYS: [&'static str; 7] = [
        "users",
        "pois",
        "categories",
        "geo_clusters",
        "seq_len_min",
        "seq_len_max",
        "pref_concentration",
    ];

    /// Parses a `key=value` file. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|msg| Error::Parse { line: i + 1, msg })?;
        }
        Ok(cfg)
    }

    /// Sets one key; the error is a human-readable message.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
        }
        match key {
            "users" => self.users = num(key, value)?,
            "pois" => self.pois = num(key, value)?,
            "categories" => self.categories = num(key, value)?,
            "geo_clusters" => self.geo_clusters = num(key, value)?,
            "seq_len_min" => self.seq_len_min = num(key, value)?,
            "seq_len_max" => self.seq_len_max = num(key, value)?,
            "pref_concentration" => self.pref_concentration = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.users == 0 || self.pois == 0 || self.categories == 0 || self.geo_clusters == 0 {
            return bad("users, pois, categories and geo_clusters must be positive".into());
        }
        if self.geo_clusters > self.pois {
            return bad(format!(
                "{} geo clusters cannot be populated by {} POIs",
                self.geo_clusters, self.pois
            ));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return bad(format!(
                "sequence length range {}..{} is empty",
                self.seq_len_min, self.seq_len_max
            ));
        }
        if !(self.pref_concentration > 0.0) || !self.pref_concentration.is_finite() {
            return bad("pref_concentration must be positive".into());
        }
        Ok(())
    }
}

/// A generated corpus plus the latent variables that produced it.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: CheckInCorpus,
    pub home_cluster: Vec<usize>,
    pub preferences: Vec<Vec<f64>>,
    pub poi_cluster: Vec<usize>,
}

pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<CheckInCorpus> {
    synth_corpus_with_truth(cfg, seed).map(|s| s.corpus)
}

fn dirichlet(rng: &mut seed::Rng, alpha: f64, n: usize) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive shape");
    let mut v: Vec<f64> = (0..n).map(|_| g.sample(rng).max(1e-300)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn sample_weighted(rng: &mut seed::Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if pick < w {
            return i;
        }
        pick -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

pub fn synth_corpus_with_truth(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = seed::rng_for(seed, "synth", 0);
    let km_lon = KM_PER_DEG * CENTER.0.to_radians().cos();

    let centers: Vec<(f64, f64)> = (0..cfg.geo_clusters)
        .map(|c| {
            if cfg.geo_clusters == 1 {
                return CENTER;
            }
            let angle = std::f64::consts::TAU * c as f64 / cfg.geo_clusters as f64;
            (
                CENTER.0 + CLUSTER_RING_KM * angle.sin() / KM_PER_DEG,
                CENTER.1 + CLUSTER_RING_KM * angle.cos() / km_lon,
            )
        })
        .collect();

    let spread = Normal::new(0.0, POI_SPREAD_KM).expect("valid sd");
    let popularity_dist = LogNormal::new(0.0, 1.0).expect("valid sd");
    let mut pois = Vec::with_capacity(cfg.pois);
    let mut poi_cluster = Vec::with_capacity(cfg.pois);
    let mut popularity = Vec::with_capacity(cfg.pois);
    for i in 0..cfg.pois {
        let c = i % cfg.geo_clusters;
        let (clat, clon) = centers[c];
        pois.push(Poi {
            poi_id: format!("p{i:04}"),
            lat: clat + spread.sample(&mut rng) / KM_PER_DEG,
            lon: clon + spread.sample(&mut rng) / km_lon,
            category_id: rng.gen_range(0..cfg.categories) as u32,
        });
        poi_cluster.push(c);
        popularity.push(popularity_dist.sample(&mut rng));
    }

    // Shared category dynamics, with a floor so no transition is impossible.
    let transitions: Vec<Vec<f64>> = (0..cfg.categories)
        .map(|_| {
            dirichlet(&mut rng, 0.3, cfg.categories)
                .into_iter()
                .map(|p| p + 0.01)
                .collect()
        })
        .collect();

    let mut home_cluster = Vec::with_capacity(cfg.users);
    let mut preferences = Vec::with_capacity(cfg.users);
    let mut sequences = Vec::with_capacity(cfg.users);
    let mut weights = vec![0.0; cfg.pois];
    for u in 0..cfg.users {
        let home = rng.gen_range(0..cfg.geo_clusters);
        let pref = dirichlet(&mut rng, cfg.pref_concentration, cfg.categories);
        let len = rng.gen_range(cfg.seq_len_min..=cfg.seq_len_max);
        let base = |p: usize| {
            let h = if poi_cluster[p] == home { 1.0 } else { AWAY_FROM_HOME };
            popularity[p] * pref[pois[p].category_id as usize] * h
        };

        let mut ts: i64 = 1_500_000_000 + rng.gen_range(0..86_400 * 30);
        let mut events = Vec::with_capacity(len);
        for (p, w) in weights.iter_mut().enumerate() {
            *w = base(p);
        }
        let mut cur = sample_weighted(&mut rng, &weights);
        events.push(CheckIn { poi: cur as u32, ts });
        for _ in 1..len {
            let cur_poi = &pois[cur];
            let row = &transitions[cur_poi.category_id as usize];
            for (p, w) in weights.iter_mut().enumerate() {
                let d = haversine_km(cur_poi.lat, cur_poi.lon, pois[p].lat, pois[p].lon);
                *w = base(p) * row[pois[p].category_id as usize] * (-d / DISTANCE_DECAY_KM).exp();
            }
            cur = sample_weighted(&mut rng, &weights);
            ts += rng.gen_range(1_800..86_400);
            events.push(CheckIn { poi: cur as u32, ts });
        }
        home_cluster.push(home);
        preferences.push(pref);
        sequences.push(CheckInSequence {
            user_id: format!("u{u:03}"),
            events,
        });
    }

    Ok(SynthCorpus {
        corpus: CheckInCorpus {
            pois,
            num_categories: cfg.categories as u32,
            sequences,
        },
        home_cluster,
        preferences,
        poi_cluster,
    })
}
