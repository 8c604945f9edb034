//! Transformation generation: two donor sequences that visit a common POI
//! exchange everything after it.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{PoiIdx, RegionMap};
use crate::seed;
use crate::{Error, Result};

/// Shortest sequence worth keeping as reference data.
pub const MIN_REFERENCE_LEN: usize = 3;

/// Swaps the suffixes of `a` and `b` after their first shared POI (the first
/// element of `a` that also occurs in `b`). `None` when they share nothing.
pub fn exchange_suffixes(a: &[PoiIdx], b: &[PoiIdx]) -> Option<(Vec<PoiIdx>, Vec<PoiIdx>)> {
    let in_b: HashSet<PoiIdx> = b.iter().copied().collect();
    let i = a.iter().position(|p| in_b.contains(p))?;
    let j = b.iter().position(|&p| p == a[i])?;
    let mut first = a[..=i].to_vec();
    first.extend_from_slice(&b[j + 1..]);
    let mut second = b[..=j].to_vec();
    second.extend_from_slice(&a[i + 1..]);
    Some((first, second))
}

/// Labels `pois` with its majority region and drops POIs outside it.
pub fn region_pure(pois: &[PoiIdx], regions: &RegionMap) -> Option<(u32, Vec<PoiIdx>)> {
    let r = regions.majority_region(pois)?;
    let kept: Vec<PoiIdx> = pois.iter().copied().filter(|&p| regions.region_of(p) == r).collect();
    (kept.len() >= MIN_REFERENCE_LEN).then_some((r, kept))
}

/// One round of transformation generation. Donor sequences are grouped by
/// majority region, shuffled, and paired off; each pair sharing a POI yields
/// two region-pure outputs.
pub fn transform_generate(
    donor_seqs: &[Vec<PoiIdx>],
    regions: &RegionMap,
    seed: u64,
) -> Result<Vec<(u32, Vec<PoiIdx>)>> {
    if donor_seqs.len() < 2 {
        return Err(Error::Generation(format!(
            "transformation needs at least two donor sequences, got {}",
            donor_seqs.len()
        )));
    }
    let mut rng = seed::rng_for(seed, "transform", 0);
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in donor_seqs.iter().enumerate() {
        if let Some(r) = regions.majority_region(s) {
            groups.entry(r).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        for pair in members.chunks_exact(2) {
            let (a, b) = (&donor_seqs[pair[0]], &donor_seqs[pair[1]]);
            if let Some((x, y)) = exchange_suffixes(a, b) {
                out.extend(region_pure(&x, regions));
                out.extend(region_pure(&y, regions));
            }
        }
    }
    Ok(out)
}

/// Repeats [`transform_generate`] with fresh pairings until `target` distinct
/// outputs exist or `max_rounds` pass.
pub fn transform_pool(
    donor_seqs: &[Vec<PoiIdx>],
    regions: &RegionMap,
    target: usize,
    max_rounds: usize,
    seed: u64,
) -> Result<Vec<(u32, Vec<PoiIdx>)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for round in 0..max_rounds {
        for item in transform_generate(donor_seqs, regions, seed::derive(seed, &[round as u64]))? {
            if out.len() >= target {
                return Ok(out);
            }
            if seen.insert(item.clone()) {
                out.push(item);
            }
        }
    }
    Ok(out)
}

/// Ablation stand-in for transformation: every item is replaced, with
/// probability `rate`, by a uniformly drawn POI of the same region.
pub fn random_replace_generate(
    donor_seqs: &[Vec<PoiIdx>],
    regions: &RegionMap,
    target: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<(u32, Vec<PoiIdx>)>> {
    if donor_seqs.is_empty() {
        return Err(Error::Generation("no donor sequences".into()));
    }
    let mut rng = seed::rng_for(seed, "random-replace", 0);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let max_attempts = target.saturating_mul(20).max(donor_seqs.len());
    for attempt in 0..max_attempts {
        if out.len() >= target {
            break;
        }
        let src = &donor_seqs[attempt % donor_seqs.len()];
        let noisy: Vec<PoiIdx> = src
            .iter()
            .map(|&p| {
                if rng.gen::<f64>() < rate {
                    let members = regions.members(regions.region_of(p));
                    members[rng.gen_range(0..members.len())]
                } else {
                    p
                }
            })
            .collect();
        if let Some(item) = region_pure(&noisy, regions) {
            if seen.insert(item.clone()) {
                out.push(item);
            }
        }
    }
    Ok(out)
}
