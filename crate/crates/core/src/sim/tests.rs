use super::*;
use crate::corpus::{synth_corpus, SynthConfig};

fn small_prep(seed: u64) -> Prepared {
    let cfg = SynthConfig {
        users: 12,
        pois: 80,
        categories: 6,
        geo_clusters: 3,
        seq_len_min: 12,
        seq_len_max: 18,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&cfg, seed).unwrap();
    prepare(
        &corpus,
        &PrepConfig {
            min_interactions: 0,
            regions: 3,
            ..PrepConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn small_cfg() -> RunConfig {
    RunConfig {
        collab: CollabConfig {
            epochs: 3,
            batch_size: 8,
            eta: 0.05,
            ..CollabConfig::default()
        },
        pool: PoolConfig {
            geo_target: 30,
            sem_target: 20,
            seq_len: 8,
            realizations_per_region: 5,
            ..PoolConfig::default()
        },
        model: EmbedMeanConfig {
            dim: 8,
            ..EmbedMeanConfig::default()
        },
        donor_fraction: 0.25,
        neighbors: 4,
        seed: 5,
        ..RunConfig::default()
    }
}

#[test]
fn donors_follow_fraction() {
    let prep = small_prep(1);
    let init = server_init(&prep, &small_cfg()).unwrap();
    assert_eq!(init.server.donors().len(), 3);
}

#[test]
fn deployments_are_deterministic_and_respect_fraction() {
    let prep = small_prep(2);
    let mut cfg = small_cfg();
    let a = server_init(&prep, &cfg).unwrap();
    let b = server_init(&prep, &cfg).unwrap();
    assert_eq!(a.deployments, b.deployments);
    cfg.pool_fraction = 0.3;
    let c = server_init(&prep, &cfg).unwrap();
    for (full, part) in a.deployments.iter().zip(&c.deployments) {
        let slice = (full.reference.len() as f64 / 0.8).round();
        assert!((part.reference.len() as f64 - 0.3 * slice).abs() <= 1.5, "{} of {slice}", part.reference.len());
        assert!(part.reference.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn device_slices_cover_own_regions_only() {
    let prep = small_prep(3);
    let init = server_init(&prep, &small_cfg()).unwrap();
    for d in &init.deployments {
        for &id in &d.reference {
            let inst = init.pool.instance(id);
            if let Some(r) = inst.region {
                assert!(d.local_regions.contains(&r));
            }
        }
    }
}

#[test]
fn pipeline_shrinks_reference_sets_and_never_touches_server() {
    let prep = small_prep(4);
    let cfg = small_cfg();
    let init = server_init(&prep, &cfg).unwrap();
    let result = run_dard(&prep, &init, &cfg).unwrap();
    assert_eq!(result.server_accesses, 0);
    assert!(!result.users.is_empty());
    for u in &result.users {
        let [d, dp, dh] = u.stage_sizes;
        assert!(dh <= dp && dp <= d, "{:?}", u.stage_sizes);
        assert!((0.0..=1.0).contains(&u.hr10) && u.ndcg10 <= u.hr10);
    }
}

#[test]
fn identical_runs_write_identical_bytes() {
    let prep = small_prep(5);
    let cfg = small_cfg();
    let write = || {
        let init = server_init(&prep, &cfg).unwrap();
        let mut buf = Vec::new();
        run_dard(&prep, &init, &cfg).unwrap().write_jsonl(&mut buf).unwrap();
        buf
    };
    let a = write();
    assert_eq!(a, write());
    let text = String::from_utf8(a).unwrap();
    assert!(text.lines().last().unwrap().contains("\"aggregate\":true"));
}

#[test]
fn no_selection_reduces_to_original() {
    let prep = small_prep(6);
    let mut cfg = small_cfg();
    cfg.influence.alpha = f64::INFINITY;
    cfg.collab.rho = 1.0;
    let init = server_init(&prep, &cfg).unwrap();
    let adaptive = run_dard(&prep, &init, &cfg).unwrap();
    cfg.strategy = Strategy::Original;
    let original = run_dard(&prep, &init, &cfg).unwrap();
    assert_eq!(adaptive.users.len(), original.users.len());
    for (a, o) in adaptive.users.iter().zip(&original.users) {
        assert_eq!(a.stage_sizes, o.stage_sizes);
        assert_eq!(a.hr10, o.hr10);
        assert_eq!(a.ndcg10, o.ndcg10);
    }
}

#[test]
fn baselines_match_adaptive_budgets() {
    let prep = small_prep(7);
    let mut cfg = small_cfg();
    cfg.influence.alpha = 0.0;
    let init = server_init(&prep, &cfg).unwrap();
    let runs = run_strategy_baselines(&prep, &init, &cfg).unwrap();
    assert_eq!(runs.len(), 4);
    let by = |s: Strategy| runs.iter().find(|r| r.strategy == Some(s)).unwrap();
    for ((r, p), a) in by(Strategy::Random).users.iter().zip(&by(Strategy::Popular).users).zip(&by(Strategy::Adaptive).users) {
        assert_eq!(r.stage_sizes[2], a.stage_sizes[2]);
        assert_eq!(p.stage_sizes[2], a.stage_sizes[2]);
    }
    for u in &by(Strategy::Original).users {
        assert!(u.stage_sizes.iter().all(|&s| s == u.stage_sizes[0]));
    }
}

#[test]
fn popular_sampling_prefers_frequent_items() {
    let prep = small_prep(8);
    let init = server_init(&prep, &small_cfg()).unwrap();
    let d = &init.deployments[0];
    let mut hits_pop = 0.0;
    let mut hits_uni = 0.0;
    let half = d.reference.len() / 4;
    let budget = kind_counts(&d.reference[..half], &init.pool);
    let mean_pop = |ids: &[InstanceId]| {
        ids.iter()
            .map(|id| d.popularity[d.reference.binary_search(id).unwrap()])
            .sum::<f64>()
    };
    for s in 0..20 {
        hits_pop += mean_pop(&sample_budget(&d.reference, &d.popularity, &init.pool, budget, true, s).unwrap());
        hits_uni += mean_pop(&sample_budget(&d.reference, &d.popularity, &init.pool, budget, false, s).unwrap());
    }
    assert!(hits_pop > hits_uni, "{hits_pop} vs {hits_uni}");
}

#[test]
fn resumed_retraining_runs() {
    let prep = small_prep(9);
    let mut cfg = small_cfg();
    cfg.retrain = Retrain::Resume;
    let init = server_init(&prep, &cfg).unwrap();
    assert!(run_dard(&prep, &init, &cfg).is_ok());
}

#[test]
fn invalid_fractions_rejected() {
    let mut cfg = small_cfg();
    cfg.pool_fraction = 0.0;
    assert!(matches!(cfg.validate(), Err(Error::Param(_))));
    cfg.pool_fraction = 1.0;
    cfg.donor_fraction = 1.5;
    assert!(matches!(cfg.validate(), Err(Error::Param(_))));
}

#[test]
fn rethresholding_matches_a_fresh_selection() {
    let prep = small_prep(10);
    let mut cfg = small_cfg();
    let init = server_init(&prep, &cfg).unwrap();
    let sel = select_references(&prep, &init, &cfg).unwrap();
    cfg.influence.alpha = 0.0;
    let fresh = select_references(&prep, &init, &cfg).unwrap();
    assert_eq!(sel.with_alpha(0.0).unwrap().d_hat, fresh.d_hat);
    let all = sel.with_alpha(f64::INFINITY).unwrap();
    assert_eq!(all.d_hat, sel.d_prime);
}
