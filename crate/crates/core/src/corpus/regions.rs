//! Geographic regions: hard k-means over POI coordinates.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::geo::Equirect;
use super::{Poi, PoiIdx};
use crate::seed;
use crate::{Error, Result};

pub const DEFAULT_REGIONS: usize = 8;
const MAX_LLOYD_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub k: usize,
    /// (lat, lon) per region.
    pub centroids: Vec<(f64, f64)>,
    /// Region index per POI.
    pub assignment: Vec<u32>,
    #[serde(skip)]
    members: Vec<Vec<PoiIdx>>,
    #[serde(skip)]
    position: Vec<u32>,
}

impl RegionMap {
    pub fn new(centroids: Vec<(f64, f64)>, assignment: Vec<u32>) -> Result<Self> {
        let k = centroids.len();
        let mut members = vec![Vec::new(); k];
        let mut position = vec![0u32; assignment.len()];
        for (poi, &r) in assignment.iter().enumerate() {
            let r = r as usize;
            if r >= k {
                return Err(Error::Integrity(format!("poi {poi} assigned to region {r} >= {k}")));
            }
            position[poi] = members[r].len() as u32;
            members[r].push(poi as PoiIdx);
        }
        if let Some(r) = members.iter().position(|m| m.is_empty()) {
            return Err(Error::Integrity(format!("region {r} is empty")));
        }
        Ok(Self {
            k,
            centroids,
            assignment,
            members,
            position,
        })
    }

    pub fn region_of(&self, poi: PoiIdx) -> u32 {
        self.assignment[poi as usize]
    }

    /// POIs of region `r`, ascending. This ordering is the region's vocabulary.
    pub fn members(&self, r: u32) -> &[PoiIdx] {
        &self.members[r as usize]
    }

    /// Position of `poi` within its region's vocabulary.
    pub fn position(&self, poi: PoiIdx) -> usize {
        self.position[poi as usize] as usize
    }

    pub fn num_pois(&self) -> usize {
        self.assignment.len()
    }

    /// Region with the most hits among `pois`; ties go to the lowest index.
    pub fn majority_region(&self, pois: &[PoiIdx]) -> Option<u32> {
        if pois.is_empty() {
            return None;
        }
        let mut counts = vec![0usize; self.k];
        for &p in pois {
            counts[self.region_of(p) as usize] += 1;
        }
        let mut best = 0;
        for r in 1..self.k {
            if counts[r] > counts[best] {
                best = r;
            }
        }
        Some(best as u32)
    }
}

pub fn cluster_regions(catalog: &[Poi], k: usize, seed: u64) -> Result<RegionMap> {
    cluster_regions_traced(catalog, k, seed, MAX_LLOYD_ITERS).map(|(m, _)| m)
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// k-means returning, alongside the map, the within-cluster sum of squares
/// measured after every assignment step.
pub fn cluster_regions_traced(
    catalog: &[Poi],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(RegionMap, Vec<f64>)> {
    if k == 0 {
        return Err(Error::Param("region count k must be at least 1".into()));
    }
    let mut distinct: Vec<(u64, u64)> = catalog
        .iter()
        .map(|p| (p.lat.to_bits(), p.lon.to_bits()))
        .collect();
    distinct.sort_unstable();
    distinct.dedup();
    if k > distinct.len() {
        return Err(Error::Param(format!(
            "k = {k} exceeds the {} distinct POI coordinates",
            distinct.len()
        )));
    }

    let n = catalog.len() as f64;
    let lat0 = catalog.iter().map(|p| p.lat).sum::<f64>() / n;
    let lon0 = catalog.iter().map(|p| p.lon).sum::<f64>() / n;
    let proj = Equirect::around(lat0, lon0);
    let points: Vec<[f64; 2]> = catalog.iter().map(|p| proj.project(p.lat, p.lon)).collect();
    let seeds: Vec<[f64; 2]> = distinct
        .iter()
        .map(|&(la, lo)| proj.project(f64::from_bits(la), f64::from_bits(lo)))
        .collect();

    // k-means++ over distinct coordinates
    let mut rng = seed::rng_for(seed, "kmeans++", 0);
    let mut centroids = vec![seeds[rng.gen_range(0..seeds.len())]];
    let mut d2: Vec<f64> = seeds.iter().map(|&s| dist2(s, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = d2.iter().rposition(|&d| d > 0.0).expect("positive mass remains");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && pick < d {
                chosen = i;
                break;
            }
            pick -= d;
        }
        let c = seeds[chosen];
        centroids.push(c);
        for (d, &s) in d2.iter_mut().zip(&seeds) {
            *d = d.min(dist2(s, c));
        }
    }

    let mut assignment = vec![u32::MAX; points.len()];
    let mut sse_trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, &p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &ctr) in centroids.iter().enumerate() {
                let d = dist2(p, ctr);
                if d < best_d {
                    best_d = d;
                    best = c as u32;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        changed |= reseed_empty(&points, &mut centroids, &mut assignment);
        sse_trace.push(sse(&points, &centroids, &assignment));
        if !changed {
            break;
        }
        update_centroids(&points, &mut centroids, &assignment);
    }

    let centroids_ll = centroids.iter().map(|&c| proj.unproject(c)).collect();
    let map = RegionMap::new(centroids_ll, assignment)?;
    Ok((map, sse_trace))
}

/// Moves the point farthest from its centroid into each empty cluster.
fn reseed_empty(points: &[[f64; 2]], centroids: &mut [[f64; 2]], assignment: &mut [u32]) -> bool {
    let k = centroids.len();
    let mut changed = false;
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a as usize] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return changed;
        };
        let far = (0..points.len())
            .filter(|&i| sizes[assignment[i] as usize] > 1)
            .max_by(|&a, &b| {
                let da = dist2(points[a], centroids[assignment[a] as usize]);
                let db = dist2(points[b], centroids[assignment[b] as usize]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= distinct points leaves a splittable cluster");
        assignment[far] = empty as u32;
        centroids[empty] = points[far];
        changed = true;
    }
}

fn update_centroids(points: &[[f64; 2]], centroids: &mut [[f64; 2]], assignment: &[u32]) {
    let k = centroids.len();
    let mut sums = vec![[0.0f64; 2]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        sums[a as usize][0] += p[0];
        sums[a as usize][1] += p[1];
        counts[a as usize] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            centroids[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
        }
    }
}

fn sse(points: &[[f64; 2]], centroids: &[[f64; 2]], assignment: &[u32]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(&p, &a)| dist2(p, centroids[a as usize]))
        .sum()
}
