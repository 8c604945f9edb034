//! Influence estimates for reference instances at a trained model.
//!
//! With `H` the mean Hessian of the per-instance losses `l_j` over `D′`, the
//! parameter shift from upweighting `X_j` is `ψ_j = −(H + λI)⁻¹ ∇l_j`, its
//! effect on a validation loss is `∇l_kᵀ ψ_j`, and `Ψ_j` sums that over the
//! validation set. Discarding `X_j` (weight change `−1/|D′|`) is predicted to
//! change validation risk by `−Ψ_j/|D′|`, so instances with `Ψ_j > α` are
//! treated as harmful.

mod testbed;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, CgOptions};
use crate::recmodel::{hessian_explicit, hvp, LocalModel, LossTerm, ModelObjective, Objective, ParamScope, HESSIAN_CAP};
use crate::refgen::InstanceId;
use crate::{Error, Result};

pub use testbed::{spearman, ConvexTestbed, TestbedConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    DenseInverse,
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceConfig {
    pub alpha: f64,
    pub damping: f64,
    pub solver: Solver,
    pub scope: ParamScope,
    /// Largest dimension for which a dense Hessian is built.
    pub cap: usize,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            damping: 0.01,
            solver: Solver::DenseInverse,
            scope: ParamScope::OutputHead,
            cap: HESSIAN_CAP,
        }
    }
}

enum System<'a> {
    Dense(DMatrix<f64>),
    Iterative { obj: &'a dyn Objective, x: Vec<f64> },
}

/// `H + λI` at a fixed point, where `H` is the Hessian of the mean loss over
/// `D′`; either materialized or applied through Hessian-vector products.
pub struct DampedSystem<'a> {
    system: System<'a>,
    damping: f64,
    dim: usize,
}

impl<'a> DampedSystem<'a> {
    pub fn new(mean_loss: &'a dyn Objective, x: &[f64], cfg: &InfluenceConfig) -> Result<Self> {
        if cfg.damping < 0.0 {
            return Err(Error::Param("damping must be non-negative".into()));
        }
        let dim = mean_loss.dim();
        let system = match cfg.solver {
            Solver::DenseInverse => {
                if dim > cfg.cap {
                    return Err(Error::Size(format!(
                        "{dim} parameters exceed the dense cap of {}; use the conjugate-gradient solver",
                        cfg.cap
                    )));
                }
                let mut h = match mean_loss.hessian(x) {
                    Some(h) => h?,
                    None => hessian_explicit(mean_loss, x, cfg.cap)?,
                };
                for i in 0..dim {
                    h[(i, i)] += cfg.damping;
                }
                System::Dense(h)
            }
            Solver::ConjugateGradient => System::Iterative { obj: mean_loss, x: x.to_vec() },
        };
        Ok(Self {
            system,
            damping: cfg.damping,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(H + λI) v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.system {
            System::Dense(h) => Ok((h * DVector::from_column_slice(v)).as_slice().to_vec()),
            System::Iterative { obj, x } => {
                let mut out = hvp(*obj, x, v)?;
                linalg::axpy(self.damping, v, &mut out);
                Ok(out)
            }
        }
    }

    /// `(H + λI)⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(Error::Contract(format!("right-hand side has {} entries, system has {}", b.len(), self.dim)));
        }
        let out = match &self.system {
            System::Dense(h) => linalg::solve_dense(h, b),
            System::Iterative { .. } => {
                let opts = CgOptions {
                    rel_tol: 1e-10,
                    max_iter: 10 * self.dim.max(10),
                };
                linalg::conjugate_gradient(|v| self.apply(v), b, opts).map(|s| s.x)
            }
        };
        out.map_err(|e| match e {
            Error::Numerical(msg) if self.damping == 0.0 => Error::Numerical(format!("{msg} (damping is 0; use λ > 0)")),
            e => e,
        })
    }

    /// `ψ_j = −(H + λI)⁻¹ ∇l_j`.
    pub fn param_shift(&self, grad_j: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.solve(grad_j)?;
        x.iter_mut().for_each(|v| *v = -*v);
        Ok(x)
    }

    /// `Ψ(X_j, X_k) = −∇l_kᵀ (H + λI)⁻¹ ∇l_j`.
    pub fn influence_on_val(&self, grad_j: &[f64], grad_k: &[f64]) -> Result<f64> {
        Ok(linalg::dot(grad_k, &self.param_shift(grad_j)?))
    }

    /// `Ψ_j = Σ_k Ψ(X_j, X_k)` for every `j`, with a single solve against the
    /// summed validation gradient.
    pub fn influence_on_risk(&self, grads_j: &[Vec<f64>], grads_q: &[Vec<f64>]) -> Result<Vec<f64>> {
        if grads_q.is_empty() {
            return Err(Error::Contract("empty validation set".into()));
        }
        let mut gq = vec![0.0; self.dim];
        for g in grads_q {
            linalg::axpy(1.0, g, &mut gq);
        }
        let s = self.solve(&gq)?;
        Ok(grads_j.iter().map(|g| -linalg::dot(&s, g)).collect())
    }
}

/// Scales every term's weight by `s`.
pub fn scaled_terms<'a>(terms: &[LossTerm<'a>], s: f64) -> Vec<LossTerm<'a>> {
    terms
        .iter()
        .map(|t| match *t {
            LossTerm::NextItem { context, vocab, target, weight } => LossTerm::NextItem {
                context,
                vocab,
                target,
                weight: weight * s,
            },
            LossTerm::Distill { input, vocab, target, weight } => LossTerm::Distill {
                input,
                vocab,
                target,
                weight: weight * s,
            },
        })
        .collect()
}

/// Gradient of each group of terms over `scope` at the model's parameters.
pub fn scoped_grads(model: &dyn LocalModel, scope: ParamScope, groups: &[Vec<LossTerm>]) -> Result<Vec<Vec<f64>>> {
    groups
        .iter()
        .map(|terms| {
            let obj = ModelObjective { model, terms, scope };
            let mut g = vec![0.0; obj.dim()];
            obj.value_grad(&obj.point(), &mut g)?;
            Ok(g)
        })
        .collect()
}

/// `Ψ_j` for each instance of `D′` (given as its loss terms `train[j]`)
/// against the validation losses `val`, at the model's current parameters.
pub fn model_influence(model: &dyn LocalModel, train: &[Vec<LossTerm>], val: &[Vec<LossTerm>], cfg: &InfluenceConfig) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Ok(Vec::new());
    }
    let inv = 1.0 / train.len() as f64;
    let mean_terms: Vec<LossTerm> = train.iter().flat_map(|t| scaled_terms(t, inv)).collect();
    let mean = ModelObjective {
        model,
        terms: &mean_terms,
        scope: cfg.scope,
    };
    let sys = DampedSystem::new(&mean, &mean.point(), cfg)?;
    sys.influence_on_risk(&scoped_grads(model, cfg.scope, train)?, &scoped_grads(model, cfg.scope, val)?)
}

/// Predicted validation-risk change from discarding an instance with
/// influence `psi` out of `m`.
pub fn predicted_discard_delta(psi: f64, m: usize) -> f64 {
    -psi / m as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub instance: InstanceId,
    pub psi: f64,
    pub harmful: bool,
    pub oracle_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub user: String,
    pub alpha: f64,
    pub damping: f64,
    /// `−1/|D′|`.
    pub epsilon: f64,
    pub entries: Vec<InfluenceEntry>,
}

impl InfluenceReport {
    pub fn new(user: impl Into<String>, instances: &[InstanceId], psi: &[f64], cfg: &InfluenceConfig) -> Self {
        Self {
            user: user.into(),
            alpha: cfg.alpha,
            damping: cfg.damping,
            epsilon: -1.0 / instances.len().max(1) as f64,
            entries: instances
                .iter()
                .zip(psi)
                .map(|(&instance, &psi)| InfluenceEntry {
                    instance,
                    psi,
                    harmful: psi > cfg.alpha,
                    oracle_delta: None,
                })
                .collect(),
        }
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Rec<'a> {
            user: &'a str,
            instance: InstanceId,
            psi: f64,
            harmful: bool,
            oracle_delta: Option<f64>,
        }
        for e in &self.entries {
            serde_json::to_writer(
                &mut out,
                &Rec {
                    user: &self.user,
                    instance: e.instance,
                    psi: e.psi,
                    harmful: e.harmful,
                    oracle_delta: e.oracle_delta,
                },
            )?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// `D̂ = D′ \ {X_j : Ψ_j > α}`, in `D′` order.
pub fn select_adaptive(report: &InfluenceReport, d_prime: &[InstanceId]) -> Result<Vec<InstanceId>> {
    let harmful: std::collections::HashSet<InstanceId> = report.entries.iter().filter(|e| e.harmful).map(|e| e.instance).collect();
    if let Some(x) = d_prime.iter().find(|x| !report.entries.iter().any(|e| e.instance == **x)) {
        return Err(Error::Contract(format!("instance {x} has no influence score")));
    }
    Ok(d_prime.iter().copied().filter(|x| !harmful.contains(x)).collect())
}
