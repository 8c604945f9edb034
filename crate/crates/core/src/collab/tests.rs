use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

use super::*;
use crate::corpus::{CategorySequence, RegionMap};
use crate::recmodel::{EmbedMeanConfig, EmbedMeanModel};
use crate::refgen::assemble_pool;

struct Fixture {
    regions: Arc<RegionMap>,
    pool: ReferencePool,
    devices: Vec<Device<EmbedMeanModel>>,
}

// 2 regions of 6 POIs, 3 categories, `n` users
fn fixture(n: usize, seed: u64) -> Fixture {
    let regions = Arc::new(RegionMap::new(vec![(0.0, 0.0); 2], (0..12).map(|p| p / 6).collect()).unwrap());
    let cats = Arc::new((0..12).map(|p| p % 3).collect::<Vec<u32>>());
    let mut rng = seed::Rng::seed_from_u64(seed);
    let geo: Vec<(u32, Vec<u32>)> = (0..10)
        .map(|i| {
            let r = (i % 2) as u32;
            (r, (0..5).map(|_| r * 6 + rng.gen_range(0..6)).collect())
        })
        .collect();
    let sem: Vec<CategorySequence> = (0..8)
        .map(|_| CategorySequence {
            user_id: None,
            categories: (0..5).map(|_| rng.gen_range(0..3)).collect(),
        })
        .collect();
    let pool = assemble_pool(2, geo, sem, vec![]);
    let devices = (0..n)
        .map(|u| {
            let home = (u % 2) as u32;
            let mut model = EmbedMeanModel::new(
                EmbedMeanConfig { dim: 4, window: 3, init_scale: 0.1 },
                regions.clone(),
                cats.clone(),
                3,
                &[0, 1],
            )
            .unwrap();
            model.init_random(100 + u as u64);
            let mut reference: Vec<usize> = pool.geo_in_region(home).to_vec();
            reference.extend_from_slice(pool.sem_ids());
            reference.sort_unstable();
            Device {
                user: u,
                user_id: format!("u{u}"),
                model,
                train: (0..12).map(|_| home * 6 + rng.gen_range(0..6)).collect(),
                reference,
                geo_neighbors: (0..n).filter(|&j| j != u).collect(),
                sem_neighbors: (0..n).filter(|&j| j != u && j % 2 == 0).collect(),
                seed: 7 + u as u64,
            }
        })
        .collect();
    Fixture { regions, pool, devices }
}

fn cfg() -> CollabConfig {
    CollabConfig {
        eta: 0.1,
        batch_size: 4,
        epochs: 3,
        ..CollabConfig::default()
    }
}

#[test]
fn clean_batch_examples() {
    let (kept, removed) = select_clean_batch(&[0, 1, 2, 3], &[0.1, 0.9, 0.2, 0.8], 0.5).unwrap();
    assert_eq!(kept, vec![0, 2]);
    assert_eq!(removed, vec![3, 1]);
    let (_, removed) = select_clean_batch(&[5, 6], &[3.0, 1.0], 1.0).unwrap();
    assert!(removed.is_empty());
    let ids: Vec<usize> = (0..16).collect();
    let (kept, _) = select_clean_batch(&ids, &vec![0.5; 16], 0.8).unwrap();
    assert_eq!(kept.len(), 13);
    assert_eq!(kept, (0..13).collect::<Vec<_>>());
    assert!(matches!(select_clean_batch(&[], &[], 0.5), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn clean_batch_properties(losses in prop::collection::vec(0.0f64..1.0, 1..30), r1 in 0.05f64..1.0, r2 in 0.05f64..1.0) {
        let ids: Vec<usize> = (0..losses.len()).map(|i| i * 3).collect();
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let (k_lo, _) = select_clean_batch(&ids, &losses, lo).unwrap();
        let (k_hi, _) = select_clean_batch(&ids, &losses, hi).unwrap();
        prop_assert!(k_lo.iter().all(|x| k_hi.contains(x)));
        // idempotent on the kept output
        let kept_losses: Vec<f64> = k_hi.iter().map(|&x| losses[x / 3]).collect();
        let (again, _) = select_clean_batch(&k_hi, &kept_losses, 1.0).unwrap();
        prop_assert_eq!(again.len(), k_hi.len());
    }
}

#[test]
fn loss_combination() {
    let c = CollabConfig::default();
    assert!((LossParts::combine(1.0, 1.0, 1.0, &c).total - 2.2).abs() < 1e-12);
    let zero = CollabConfig { gamma: 0.0, mu: 0.0, ..c };
    assert_eq!(LossParts::combine(1.3, 5.0, 7.0, &zero).total, 1.3);
}

#[test]
fn own_decisions_give_zero_distillation() {
    let f = fixture(3, 1);
    let dev = &f.devices[0];
    // neighbors that hold the same parameters
    let mut clones = f.devices.clone();
    for d in clones.iter_mut() {
        d.model = dev.model.clone();
    }
    let inboxes = exchange_decisions(&clones, &f.pool, 0).unwrap();
    let targets = build_targets(dev, &inboxes[0], &f.pool, None, 0);
    assert!(!targets.is_empty());
    let parts = total_loss(dev, &targets, &f.pool, &f.regions, &CollabConfig::default()).unwrap();
    assert!(parts.geo.abs() < 1e-15 && parts.sem.abs() < 1e-15);
    assert_eq!(parts.total, parts.local);
}

#[test]
fn message_conservation_and_joint_sets() {
    let mut f = fixture(4, 2);
    let inboxes = exchange_decisions(&f.devices, &f.pool, 0).unwrap();
    let expected: usize = f.devices.iter().map(|d| d.geo_neighbors.len() + d.sem_neighbors.len()).sum();
    assert_eq!(inboxes.iter().map(Vec::len).sum::<usize>(), expected);
    // users 0 and 1 live in different regions: their geo message covers both regions' instances
    let msg = inboxes[0].iter().find(|m| m.sender == 1 && m.kind == InstanceKind::Geo).unwrap();
    let ids: Vec<usize> = msg.payload.iter().map(|p| p.0).collect();
    let mut want: Vec<usize> = f.pool.geo_in_region(0).iter().chain(f.pool.geo_in_region(1)).copied().collect();
    want.sort_unstable();
    assert_eq!(ids, want);

    let out = train_fleet(&mut f.devices, &f.pool, &f.regions, &cfg(), &TrainOptions { track: true, ..Default::default() }).unwrap();
    assert_eq!(out.messages, 3 * expected);
    assert_eq!(out.logs.len(), 3 * 4);
}

#[test]
fn zero_epochs_is_a_no_op() {
    let mut f = fixture(3, 3);
    let before: Vec<Vec<f64>> = f.devices.iter().map(|d| d.model.params().to_vec()).collect();
    let c = CollabConfig { epochs: 0, ..cfg() };
    let out = train_fleet(&mut f.devices, &f.pool, &f.regions, &c, &TrainOptions { track: true, ..Default::default() }).unwrap();
    for (d, b) in f.devices.iter().zip(&before) {
        assert_eq!(d.model.params(), b.as_slice());
    }
    for (d, t) in f.devices.iter().zip(&out.tracked) {
        assert_eq!(t.kept, d.reference);
        assert!(t.removed.is_empty());
    }
}

#[test]
fn zero_weights_match_local_training_bitwise() {
    let mut collab = fixture(3, 4);
    let mut local = fixture(3, 4);
    for d in local.devices.iter_mut() {
        d.geo_neighbors.clear();
        d.sem_neighbors.clear();
    }
    let c = CollabConfig { gamma: 0.0, mu: 0.0, rho: 1.0, ..cfg() };
    let opts = TrainOptions { track: true, ..Default::default() };
    let a = train_fleet(&mut collab.devices, &collab.pool, &collab.regions, &c, &opts).unwrap();
    train_fleet(&mut local.devices, &local.pool, &local.regions, &c, &opts).unwrap();
    for (x, y) in collab.devices.iter().zip(&local.devices) {
        assert_eq!(x.model.params(), y.model.params());
    }
    for (d, t) in collab.devices.iter().zip(&a.tracked) {
        assert_eq!(t.kept, d.reference);
    }
}

#[test]
fn tracking_partitions_reference_set_and_is_deterministic() {
    let run = || {
        let mut f = fixture(4, 5);
        let c = CollabConfig { batch_size: 8, ..cfg() };
        let out = train_fleet(&mut f.devices, &f.pool, &f.regions, &c, &TrainOptions { track: true, ..Default::default() }).unwrap();
        (f, out)
    };
    let (f, a) = run();
    let (_, b) = run();
    assert_eq!(a.tracked, b.tracked);
    for (d, t) in f.devices.iter().zip(&a.tracked) {
        let mut all: Vec<usize> = t.kept.iter().copied().chain(t.removed.iter().map(|r| r.instance)).collect();
        all.sort_unstable();
        assert_eq!(all, d.reference);
    }
    assert!(a.tracked.iter().any(|t| !t.removed.is_empty()));
    let logs: Vec<u8> = {
        let mut buf = Vec::new();
        write_logs(&a.logs, &mut buf).unwrap();
        buf
    };
    assert!(String::from_utf8(logs).unwrap().lines().all(|l| l.contains("\"param_norm\"")));
}

#[test]
fn corrupted_instances_are_removed_more_often() {
    let mut f = fixture(6, 6);
    let corrupted: HashSet<usize> = (0..f.pool.len()).filter(|x| x % 5 == 0).collect();
    let corruption = Corruption { instances: corrupted.clone(), seed: 99 };
    let c = CollabConfig { epochs: 6, batch_size: 10, ..cfg() };
    let out = train_fleet(&mut f.devices, &f.pool, &f.regions, &c, &TrainOptions { track: true, corruption: Some(&corruption), stage: "t" }).unwrap();
    let (mut bad, mut bad_rm, mut good, mut good_rm) = (0, 0, 0, 0);
    for (d, t) in f.devices.iter().zip(&out.tracked) {
        for &x in &d.reference {
            let rm = t.removed.iter().any(|r| r.instance == x);
            if corrupted.contains(&x) {
                bad += 1;
                bad_rm += rm as usize;
            } else {
                good += 1;
                good_rm += rm as usize;
            }
        }
    }
    let (rb, rg) = (bad_rm as f64 / bad as f64, good_rm as f64 / good as f64);
    assert!(rb > 0.0 && rb >= 2.0 * rg, "corrupted {rb}, clean {rg}");
}

use std::collections::HashSet;
