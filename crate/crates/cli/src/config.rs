//! Sectioned `key=value` experiment configuration.
//!
//! ```text
//! [corpus]
//! users = 50
//! [collab]
//! eta = 0.3
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown sections and keys are
//! errors. Without `corpus.path` the corpus is synthesized from the
//! synthetic-corpus keys of the `[corpus]` section.

use std::path::PathBuf;

use dard::collab::NoisyPolicy;
use dard::corpus::SynthConfig;
use dard::influence::Solver;
use dard::recmodel::ParamScope;
use dard::sim::{PrepConfig, Retrain, RunConfig};

pub const SECTIONS: [&str; 6] = ["corpus", "pool", "collab", "influence", "sim", "eval"];

/// The influence-threshold grid of the sweep command.
pub const ALPHA_GRID: [f64; 5] = [0.01, 0.005, 0.001, 0.0005, 0.0001];

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    File(PathBuf),
    Synth(SynthConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: Source,
    pub synth: SynthConfig,
    /// `None` picks 10 for loaded corpora and 0 (no filtering) for synthetic ones.
    pub min_interactions: Option<usize>,
    pub max_len: usize,
    pub regions: usize,
    pub run: RunConfig,
    /// Keep fractions swept by the sweep command; defaults to `collab.rho`.
    pub rho_grid: Vec<f64>,
    /// Seeds of the oracle calibration.
    pub oracle_seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: Source::Synth(SynthConfig::default()),
            synth: SynthConfig::default(),
            min_interactions: None,
            max_len: PrepConfig::default().max_len,
            regions: PrepConfig::default().regions,
            run: RunConfig::default(),
            rho_grid: Vec::new(),
            oracle_seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "config line {l}: {}", self.msg),
            None => write!(f, "config: {}", self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
}

fn flag(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("invalid value `{v}` for `{key}`; expected true or false")),
    }
}

fn float_list(key: &str, v: &str) -> Result<Vec<f64>, String> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

impl ExperimentConfig {
    pub fn prep(&self) -> PrepConfig {
        let synthetic = matches!(self.source, Source::Synth(_));
        PrepConfig {
            min_interactions: self.min_interactions.unwrap_or(if synthetic { 0 } else { 10 }),
            max_len: self.max_len,
            regions: self.regions,
        }
    }

    pub fn rhos(&self) -> Vec<f64> {
        if self.rho_grid.is_empty() {
            vec![self.run.collab.rho]
        } else {
            self.rho_grid.clone()
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut path = None;
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = Some(i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(SECTIONS.iter().copied().find(|s| *s == name).ok_or_else(|| ConfigError {
                    line: line_no,
                    msg: format!("unknown section `[{name}]`"),
                })?);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
                line: line_no,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.ok_or_else(|| ConfigError {
                line: line_no,
                msg: format!("key `{key}` appears before any section"),
            })?;
            let res = if sec == "corpus" && key == "path" {
                path = Some(PathBuf::from(value));
                Ok(())
            } else {
                cfg.set(sec, key, value)
            };
            res.map_err(|msg| ConfigError { line: line_no, msg })?;
        }
        cfg.source = match path {
            Some(p) => Source::File(p),
            None => Source::Synth(cfg.synth.clone()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let run = &mut self.run;
        match (section, key) {
            ("corpus", "min_interactions") => self.min_interactions = Some(parse(key, v)?),
            ("corpus", "max_len") => self.max_len = parse(key, v)?,
            ("corpus", "regions") => self.regions = parse(key, v)?,
            ("corpus", _) => self.synth.set(key, v).map_err(|e| format!("[corpus] {e}"))?,

            ("pool", "geo_target") => run.pool.geo_target = parse(key, v)?,
            ("pool", "sem_target") => run.pool.sem_target = parse(key, v)?,
            ("pool", "seq_len") => run.pool.seq_len = parse(key, v)?,
            ("pool", "realizations_per_region") => run.pool.realizations_per_region = parse(key, v)?,
            ("pool", "transform") => run.pool.transform = flag(key, v)?,
            ("pool", "markov") => run.pool.markov = flag(key, v)?,
            ("pool", "donor_fraction") => run.donor_fraction = parse(key, v)?,
            ("pool", "pool_fraction") => run.pool_fraction = parse(key, v)?,

            ("collab", "gamma") => run.collab.gamma = parse(key, v)?,
            ("collab", "mu") => run.collab.mu = parse(key, v)?,
            ("collab", "eta") => run.collab.eta = parse(key, v)?,
            ("collab", "batch_size") => run.collab.batch_size = parse(key, v)?,
            ("collab", "epochs") => run.collab.epochs = parse(key, v)?,
            ("collab", "rho") => run.collab.rho = parse(key, v)?,
            ("collab", "accumulate_noisy") => {
                run.collab.accumulate_noisy = match v {
                    "last_epoch" => NoisyPolicy::LastEpoch,
                    "all_epochs" => NoisyPolicy::AllEpochs,
                    _ => return Err(format!("invalid value `{v}` for `{key}`; expected last_epoch or all_epochs")),
                }
            }
            ("collab", "neighbors") => run.neighbors = parse(key, v)?,
            ("collab", "loss_tracking") => run.loss_tracking = flag(key, v)?,
            ("collab", "dim") => run.model.dim = parse(key, v)?,
            ("collab", "window") => run.model.window = parse(key, v)?,
            ("collab", "init_scale") => run.model.init_scale = parse(key, v)?,

            ("influence", "alpha") => run.influence.alpha = parse(key, v)?,
            ("influence", "damping") => run.influence.damping = parse(key, v)?,
            ("influence", "solver") => {
                run.influence.solver = match v {
                    "dense" => Solver::DenseInverse,
                    "cg" => Solver::ConjugateGradient,
                    _ => return Err(format!("invalid value `{v}` for `{key}`; expected dense or cg")),
                }
            }
            ("influence", "scope") => {
                run.influence.scope = match v {
                    "output_head" => ParamScope::OutputHead,
                    "full" => ParamScope::Full,
                    _ => return Err(format!("invalid value `{v}` for `{key}`; expected output_head or full")),
                }
            }
            ("influence", "cap") => run.influence.cap = parse(key, v)?,
            ("influence", "enabled") => run.influence_selection = flag(key, v)?,

            ("sim", "strategy") => run.strategy = v.parse()?,
            ("sim", "retrain") => {
                run.retrain = match v {
                    "reinit" => Retrain::Reinit,
                    "resume" => Retrain::Resume,
                    _ => return Err(format!("invalid value `{v}` for `{key}`; expected reinit or resume")),
                }
            }
            ("sim", "seed") => run.seed = parse(key, v)?,
            ("sim", "rho_grid") => self.rho_grid = float_list(key, v)?,
            ("sim", "oracle_seeds") => self.oracle_seeds = parse(key, v)?,

            ("eval", "negatives") => run.eval.negatives = parse(key, v)?,
            ("eval", "repeats") => run.eval.repeats = parse(key, v)?,
            ("eval", "seed") => run.eval.seed = parse(key, v)?,

            _ => return Err(format!("unknown key `{key}` in [{section}]")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let err = |msg: String| ConfigError { line: None, msg };
        self.run.validate().map_err(|e| err(e.to_string()))?;
        if let Source::Synth(s) = &self.source {
            s.validate().map_err(|e| err(e.to_string()))?;
        }
        if self.max_len < 3 {
            return Err(err("max_len must be at least 3".into()));
        }
        if self.regions == 0 {
            return Err(err("regions must be positive".into()));
        }
        if let Some(r) = self.rho_grid.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(err(format!("rho_grid entry {r} outside (0, 1]")));
        }
        Ok(())
    }
}
