//! Subcommand bodies. Each writes its artifacts into the output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use dard::collab::write_logs;
use dard::corpus::{load_corpus, synth_corpus, CheckInCorpus, Format};
use dard::influence::{predicted_discard_delta, spearman, ConvexTestbed, TestbedConfig};
use dard::seed;
use dard::sim::{self, Initialized, Prepared, RunResult};
use dard::topology::NeighborSets;

use crate::config::{ExperimentConfig, Source, ALPHA_GRID};

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load(cfg: &ExperimentConfig) -> Result<CheckInCorpus> {
    Ok(match &cfg.source {
        Source::File(p) => load_corpus(p, Format::Jsonl).with_context(|| format!("loading {}", p.display()))?,
        Source::Synth(s) => synth_corpus(s, cfg.run.seed)?,
    })
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    Ok(sim::prepare(&load(cfg)?, &cfg.prep(), cfg.run.seed)?)
}

fn check_quiescent(result: &RunResult) -> Result<()> {
    if result.server_accesses != 0 {
        bail!("server state was read {} times after initialization", result.server_accesses);
    }
    Ok(())
}

fn write_run(dir: &Path, result: &RunResult) -> Result<()> {
    let name = result.strategy.map_or("run", |s| s.name());
    let mut out = create(dir, &format!("result_{name}.jsonl"))?;
    result.write_jsonl(&mut out)?;
    out.flush()?;
    Ok(())
}

fn write_summary(dir: &Path, runs: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(dir, "summary.csv")?);
    w.write_record(["strategy", "hr5", "ndcg5", "hr10", "ndcg10"])?;
    for r in runs {
        let m = r.aggregate;
        w.write_record([
            r.strategy.map_or("run", |s| s.name()).to_string(),
            m.hr5.to_string(),
            m.ndcg5.to_string(),
            m.hr10.to_string(),
            m.ndcg10.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let Source::Synth(s) = &cfg.source else {
        bail!("synth needs a synthetic corpus section without `path`");
    };
    let corpus = synth_corpus(s, cfg.run.seed)?;
    let mut w = create(out, "corpus.jsonl")?;
    corpus.write_jsonl(&mut w)?;
    w.flush()?;
    println!("wrote {} users, {} POIs, {} check-ins", corpus.num_users(), corpus.num_pois(), corpus.num_checkins());
    Ok(())
}

fn init(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Initialized> {
    Ok(sim::server_init(prep, &cfg.run)?)
}

pub fn pool(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = prepare(cfg)?;
    let init = init(cfg, &prep)?;
    let mut w = create(out, "pool.jsonl")?;
    init.pool.write_jsonl(&prep.corpus.pois, &mut w)?;
    w.flush()?;
    let neighbors = NeighborSets {
        geo: init.deployments.iter().map(|d| d.geo_neighbors.clone()).collect(),
        sem: init.deployments.iter().map(|d| d.sem_neighbors.clone()).collect(),
    };
    let ids: Vec<String> = init.deployments.iter().map(|d| d.user_id.clone()).collect();
    let mut w = create(out, "neighbors.jsonl")?;
    neighbors.write_jsonl(&ids, &mut w)?;
    w.flush()?;
    let mut w = create(out, "pool_stats.json")?;
    serde_json::to_writer_pretty(&mut w, &init.pool_stats)?;
    w.write_all(b"\n")?;
    w.flush()?;
    println!(
        "pool: {} geographical, {} semantic instances",
        init.pool.num_geo(),
        init.pool.num_sem()
    );
    Ok(())
}

#[derive(Serialize)]
struct RemovalRecord<'a> {
    user: &'a str,
    instance: usize,
    epoch: usize,
    step: usize,
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = prepare(cfg)?;
    let init = init(cfg, &prep)?;
    let result = sim::run_dard(&prep, &init, &cfg.run)?;
    check_quiescent(&result)?;
    write_run(out, &result)?;
    let mut w = create(out, "train_log.jsonl")?;
    write_logs(&result.logs, &mut w)?;
    w.flush()?;
    if !result.reports.is_empty() {
        let mut w = create(out, "influence.jsonl")?;
        for r in &result.reports {
            r.write_jsonl(&mut w)?;
        }
        w.flush()?;
    }
    if !result.tracked.is_empty() {
        let mut w = create(out, "removals.jsonl")?;
        for (d, t) in init.deployments.iter().zip(&result.tracked) {
            for r in &t.removed {
                serde_json::to_writer(
                    &mut w,
                    &RemovalRecord {
                        user: &d.user_id,
                        instance: r.instance,
                        epoch: r.epoch,
                        step: r.step,
                    },
                )?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
    }
    let m = result.aggregate;
    println!(
        "{}: HR@5 {:.4} NDCG@5 {:.4} HR@10 {:.4} NDCG@10 {:.4}",
        cfg.run.strategy.name(),
        m.hr5,
        m.ndcg5,
        m.hr10,
        m.ndcg10
    );
    Ok(())
}

pub fn baselines(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = prepare(cfg)?;
    let init = init(cfg, &prep)?;
    let runs = sim::run_strategy_baselines(&prep, &init, &cfg.run)?;
    for r in &runs {
        check_quiescent(r)?;
        write_run(out, r)?;
        let m = r.aggregate;
        println!("{:<9} HR@5 {:.4} HR@10 {:.4}", r.strategy.map_or("", |s| s.name()), m.hr5, m.hr10);
    }
    write_summary(out, &runs)
}

#[derive(Serialize)]
struct OracleRecord {
    seed: u64,
    instance: usize,
    psi: f64,
    predicted: f64,
    realized: f64,
}

/// Convex-model calibration of influence estimates against leave-one-out retraining.
pub fn oracle(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut w = create(out, "oracle.jsonl")?;
    let mut summary = csv::Writer::from_writer(create(out, "oracle_summary.csv")?);
    summary.write_record(["seed", "spearman", "sign_agreement"])?;
    let tb_cfg = TestbedConfig {
        l2: cfg.run.influence.damping.max(1e-6),
        ..TestbedConfig::default()
    };
    let (mut rho_sum, mut sign_sum) = (0.0, 0.0);
    for k in 0..cfg.oracle_seeds as u64 {
        let s = seed::derive(cfg.run.seed, &[seed::label("oracle"), k]);
        let tb = ConvexTestbed::generate(tb_cfg, s);
        let theta = tb.fit_all()?;
        let psi = tb.influence(&theta, cfg.run.influence.solver)?;
        let m = tb.train.len();
        let predicted: Vec<f64> = psi.iter().map(|&p| predicted_discard_delta(p, m)).collect();
        let realized = (0..m).map(|j| tb.loo_oracle(&theta, j)).collect::<dard::Result<Vec<f64>>>()?;
        for j in 0..m {
            serde_json::to_writer(
                &mut w,
                &OracleRecord {
                    seed: s,
                    instance: j,
                    psi: psi[j],
                    predicted: predicted[j],
                    realized: realized[j],
                },
            )?;
            w.write_all(b"\n")?;
        }
        let rho = spearman(&predicted, &realized);
        let signs = predicted.iter().zip(&realized).filter(|(p, r)| p.signum() == r.signum()).count() as f64 / m as f64;
        summary.write_record([s.to_string(), rho.to_string(), signs.to_string()])?;
        println!("seed {s}: spearman {rho:.4}, sign agreement {signs:.3}");
        rho_sum += rho;
        sign_sum += signs;
    }
    w.flush()?;
    summary.flush()?;
    let n = cfg.oracle_seeds.max(1) as f64;
    println!("mean: spearman {:.4}, sign agreement {:.3}", rho_sum / n, sign_sum / n);
    Ok(())
}

pub const SWEEP_FILE: &str = "sweep.csv";
pub const PLOT_FILE: &str = "alpha_hr10.csv";

/// Grid over the influence threshold (and the keep fraction); one row per pair.
pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = prepare(cfg)?;
    let init = init(cfg, &prep)?;
    let mut w = csv::Writer::from_writer(create(out, SWEEP_FILE)?);
    w.write_record(["rho", "alpha", "hr5", "ndcg5", "hr10", "ndcg10"])?;
    for rho in cfg.rhos() {
        let mut run = cfg.run.clone();
        run.collab.rho = rho;
        run.strategy = sim::Strategy::Adaptive;
        let sel = sim::select_references(&prep, &init, &run)?;
        for alpha in ALPHA_GRID {
            run.influence.alpha = alpha;
            let result = sim::complete_run(&prep, &init, &run, sim::Strategy::Adaptive, Some(&sel.with_alpha(alpha)?))?;
            check_quiescent(&result)?;
            let m = result.aggregate;
            w.write_record([rho, alpha, m.hr5, m.ndcg5, m.hr10, m.ndcg10].map(|x| x.to_string()))?;
            println!("rho {rho} alpha {alpha}: HR@10 {:.4}", m.hr10);
        }
    }
    w.flush()?;
    Ok(())
}

/// Reshapes a sweep into `(alpha, hr10)` rows sorted by alpha. With several
/// keep fractions, only rows of `collab.rho` (or the first swept one) are used.
pub fn plotdata(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let input: PathBuf = out.join(SWEEP_FILE);
    let mut r = csv::Reader::from_path(&input).with_context(|| format!("cannot read {}", input.display()))?;
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|x| x.parse().ok())
                .with_context(|| format!("malformed row in {}", input.display()))
        };
        rows.push((get(0)?, get(1)?, get(4)?));
    }
    let rhos = cfg.rhos();
    let want = if rhos.contains(&cfg.run.collab.rho) { cfg.run.collab.rho } else { rhos[0] };
    let mut pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.0 == want).map(|r| (r.1, r.2)).collect();
    if pts.is_empty() {
        bail!("{} has no rows for rho = {want}", input.display());
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut w = csv::Writer::from_writer(create(out, PLOT_FILE)?);
    w.write_record(["alpha", "hr10"])?;
    for (a, h) in pts {
        w.write_record([a.to_string(), h.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))
}
