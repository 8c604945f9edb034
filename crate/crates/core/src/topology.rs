//! Server-side neighbor selection: cosine similarity of region-visit and
//! category-visit count vectors, top `k_n` per user.

use std::io::Write;

use serde::Serialize;

use crate::corpus::{CatId, PoiIdx, RegionMap};
use crate::linalg::{dot, norm};
use crate::Result;

pub const DEFAULT_NEIGHBORS: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionProfile {
    /// Visits per region.
    pub counts: Vec<u64>,
    /// Most visited region; ties go to the lowest index.
    pub primary: u32,
}

impl RegionProfile {
    /// Regions with at least one visit.
    pub fn visited(&self) -> Vec<u32> {
        (0..self.counts.len() as u32).filter(|&r| self.counts[r as usize] > 0).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NeighborSets {
    pub geo: Vec<Vec<usize>>,
    pub sem: Vec<Vec<usize>>,
}

impl NeighborSets {
    pub fn write_jsonl(&self, user_ids: &[String], mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Rec<'a> {
            user: &'a str,
            geo: Vec<&'a str>,
            sem: Vec<&'a str>,
        }
        for (u, id) in user_ids.iter().enumerate() {
            let ids = |v: &[usize]| v.iter().map(|&j| user_ids[j].as_str()).collect();
            let rec = Rec {
                user: id,
                geo: ids(&self.geo[u]),
                sem: ids(&self.sem[u]),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn assign_user_regions(user_pois: &[Vec<PoiIdx>], regions: &RegionMap) -> Vec<RegionProfile> {
    user_pois
        .iter()
        .map(|pois| {
            let mut counts = vec![0u64; regions.k];
            for &p in pois {
                counts[regions.region_of(p) as usize] += 1;
            }
            let mut primary = 0;
            for r in 1..counts.len() {
                if counts[r] > counts[primary] {
                    primary = r;
                }
            }
            RegionProfile {
                counts,
                primary: primary as u32,
            }
        })
        .collect()
}

pub fn category_histograms(user_cats: &[Vec<CatId>], num_categories: usize) -> Vec<Vec<f64>> {
    user_cats
        .iter()
        .map(|cats| {
            let mut h = vec![0.0; num_categories];
            for &c in cats {
                h[c as usize] += 1.0;
            }
            h
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// For each row, the `k` other rows of highest cosine similarity; ties by index.
pub fn top_k_cosine(vectors: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..vectors.len())
        .map(|i| {
            let mut sims: Vec<(f64, usize)> = (0..vectors.len())
                .filter(|&j| j != i)
                .map(|j| (cosine(&vectors[i], &vectors[j]), j))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            sims.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

pub fn geo_neighbors(profiles: &[RegionProfile], k: usize) -> Vec<Vec<usize>> {
    let v: Vec<Vec<f64>> = profiles
        .iter()
        .map(|p| p.counts.iter().map(|&c| c as f64).collect())
        .collect();
    top_k_cosine(&v, k)
}

pub fn sem_neighbors(histograms: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    top_k_cosine(histograms, k)
}
