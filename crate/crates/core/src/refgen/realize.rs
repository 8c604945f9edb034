//! Turning category walks into POI sequences inside one region, with every
//! consecutive hop at most 5 km.

use rand::Rng as _;

use crate::corpus::{haversine_km, CatId, Poi, PoiIdx, RegionMap};
use crate::seed;

pub const MAX_HOP_KM: f64 = 5.0;

/// POIs grouped by (region, category) for repeated realization.
#[derive(Debug, Clone)]
pub struct RealizeIndex<'a> {
    catalog: &'a [Poi],
    num_categories: usize,
    by_region_cat: Vec<Vec<PoiIdx>>,
}

impl<'a> RealizeIndex<'a> {
    pub fn new(catalog: &'a [Poi], regions: &RegionMap) -> Self {
        let num_categories = catalog.iter().map(|p| p.category_id as usize + 1).max().unwrap_or(0);
        let mut by_region_cat = vec![Vec::new(); regions.k * num_categories];
        for (i, p) in catalog.iter().enumerate() {
            let r = regions.region_of(i as PoiIdx) as usize;
            by_region_cat[r * num_categories + p.category_id as usize].push(i as PoiIdx);
        }
        Self {
            catalog,
            num_categories,
            by_region_cat,
        }
    }

    fn candidates(&self, region: u32, cat: CatId) -> &[PoiIdx] {
        if cat as usize >= self.num_categories {
            return &[];
        }
        &self.by_region_cat[region as usize * self.num_categories + cat as usize]
    }

    fn within_hop(&self, a: PoiIdx, b: PoiIdx) -> bool {
        let (pa, pb) = (&self.catalog[a as usize], &self.catalog[b as usize]);
        haversine_km(pa.lat, pa.lon, pb.lat, pb.lon) <= MAX_HOP_KM
    }

    /// Uniform choice among feasible POIs at each step; `None` as soon as a
    /// step has no feasible POI.
    pub fn realize(&self, cats: &[CatId], region: u32, rng: &mut seed::Rng) -> Option<Vec<PoiIdx>> {
        let mut out: Vec<PoiIdx> = Vec::with_capacity(cats.len());
        let mut feasible = Vec::new();
        for &c in cats {
            feasible.clear();
            match out.last() {
                None => feasible.extend_from_slice(self.candidates(region, c)),
                Some(&prev) => feasible.extend(
                    self.candidates(region, c)
                        .iter()
                        .copied()
                        .filter(|&p| self.within_hop(prev, p)),
                ),
            }
            if feasible.is_empty() {
                return None;
            }
            out.push(feasible[rng.gen_range(0..feasible.len())]);
        }
        Some(out)
    }
}

pub fn realize_poi_sequence(
    cats: &[CatId],
    region: u32,
    regions: &RegionMap,
    catalog: &[Poi],
    seed: u64,
) -> Option<Vec<PoiIdx>> {
    let mut rng = seed::rng_for(seed, "realize", region as u64);
    RealizeIndex::new(catalog, regions).realize(cats, region, &mut rng)
}
