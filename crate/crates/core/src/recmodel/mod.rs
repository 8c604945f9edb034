//! Local recommenders. A model maps an input sequence to a next-item
//! distribution (a soft decision) over either one region's POIs or the global
//! category vocabulary, and reports exact gradients of weighted sums of
//! cross-entropy and distillation terms at any parameter vector.

mod checkpoint;
mod embed_mean;
mod softmax_reg;

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corpus::{PoiIdx, RegionMap};
use crate::linalg;
use crate::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
pub use embed_mean::{EmbedMeanConfig, EmbedMeanModel};
pub use softmax_reg::SoftmaxRegModel;

/// Default cap on the dimension of explicitly materialized Hessians.
pub const HESSIAN_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqInput<'a> {
    Pois(&'a [PoiIdx]),
    Cats(&'a [u32]),
}

impl SeqInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            SeqInput::Pois(s) | SeqInput::Cats(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetVocab {
    /// POIs of one region, in region-member order.
    Region(u32),
    Categories,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftDecision {
    pub over: TargetVocab,
    pub probs: Vec<f64>,
}

/// Neighbor decisions on one instance, summarized so that
/// `Σ_j ‖p − q_j‖² = count·‖p − mean‖² + spread` for any `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTarget {
    pub mean: Vec<f64>,
    pub count: f64,
    pub spread: f64,
}

impl DistillTarget {
    pub fn single(q: &[f64]) -> Self {
        Self {
            mean: q.to_vec(),
            count: 1.0,
            spread: 0.0,
        }
    }

    pub fn from_decisions<'a>(qs: impl IntoIterator<Item = &'a [f64]>) -> Option<Self> {
        let qs: Vec<&[f64]> = qs.into_iter().collect();
        let first = qs.first()?;
        let n = qs.len() as f64;
        let mut mean = vec![0.0; first.len()];
        for q in &qs {
            linalg::axpy(1.0 / n, q, &mut mean);
        }
        let spread = qs
            .iter()
            .map(|q| q.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        Some(Self {
            mean,
            count: n,
            spread,
        })
    }

    /// `Σ_j ‖p − q_j‖²`.
    pub fn value(&self, p: &[f64]) -> f64 {
        let d: f64 = p.iter().zip(&self.mean).map(|(a, b)| (a - b) * (a - b)).sum();
        self.count * d + self.spread
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LossTerm<'a> {
    /// `weight · −ln p(target)`; `target` is a global POI or category id.
    NextItem {
        context: SeqInput<'a>,
        vocab: TargetVocab,
        target: u32,
        weight: f64,
    },
    /// `weight · Σ_j ‖p − q_j‖²` with the neighbor decisions held constant.
    Distill {
        input: SeqInput<'a>,
        vocab: TargetVocab,
        target: &'a DistillTarget,
        weight: f64,
    },
}

impl LossTerm<'_> {
    pub fn weight(&self) -> f64 {
        match *self {
            LossTerm::NextItem { weight, .. } | LossTerm::Distill { weight, .. } => weight,
        }
    }
}

/// A device's differentiable recommender. Everything is evaluated at an
/// explicit parameter vector so callers can probe perturbed parameters
/// without cloning the model.
pub trait LocalModel: Send + Sync {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Size of `vocab`, or a vocabulary error if the model cannot emit it.
    fn vocab_size(&self, vocab: TargetVocab) -> Result<usize>;

    /// Raw scores over `vocab`.
    fn scores_with(&self, theta: &[f64], input: SeqInput, vocab: TargetVocab) -> Result<Vec<f64>>;

    /// Weighted sum of `terms` at `theta`; adds the gradient into `grad` when given.
    fn objective_with(&self, theta: &[f64], terms: &[LossTerm], grad: Option<&mut [f64]>) -> Result<f64>;

    /// Parameters treated as the output layer for influence computations.
    fn head_range(&self) -> Range<usize> {
        0..self.num_params()
    }

    /// Exact Hessian of `terms` restricted to `head_range`, when the model
    /// has a closed form for it.
    fn head_hessian_with(&self, _theta: &[f64], _terms: &[LossTerm]) -> Option<Result<DMatrix<f64>>> {
        None
    }

    fn forward_with(&self, theta: &[f64], input: SeqInput, vocab: TargetVocab) -> Result<SoftDecision> {
        let mut probs = self.scores_with(theta, input, vocab)?;
        linalg::softmax_in_place(&mut probs);
        Ok(SoftDecision { over: vocab, probs })
    }

    fn forward(&self, input: SeqInput, vocab: TargetVocab) -> Result<SoftDecision> {
        self.forward_with(self.params(), input, vocab)
    }

    fn objective(&self, terms: &[LossTerm]) -> Result<f64> {
        self.objective_with(self.params(), terms, None)
    }
}

/// Next-POI terms for every position of `seq`, each weighted `1/(len−1)`, so
/// the objective is the mean cross-entropy. Each target is scored within its
/// own region.
pub fn next_item_terms<'a>(seq: &'a [PoiIdx], regions: &RegionMap, scale: f64) -> Result<Vec<LossTerm<'a>>> {
    if seq.len() < 2 {
        return Err(Error::Contract(format!(
            "local loss needs at least two check-ins, got {}",
            seq.len()
        )));
    }
    let w = scale / (seq.len() - 1) as f64;
    Ok((1..seq.len())
        .map(|t| LossTerm::NextItem {
            context: SeqInput::Pois(&seq[..t]),
            vocab: TargetVocab::Region(regions.region_of(seq[t])),
            target: seq[t],
            weight: w,
        })
        .collect())
}

/// Mean next-item cross-entropy over the positions of `seq`.
pub fn local_loss(model: &dyn LocalModel, seq: &[PoiIdx], regions: &RegionMap) -> Result<f64> {
    model.objective(&next_item_terms(seq, regions, 1.0)?)
}

/// `‖p_i − q_j‖²` for the model's decision on `input` against `decision_j`.
pub fn distill_pair_loss(model: &dyn LocalModel, decision_j: &SoftDecision, input: SeqInput) -> Result<f64> {
    let n = model.vocab_size(decision_j.over)?;
    if n != decision_j.probs.len() {
        return Err(Error::Contract(format!(
            "neighbor decision has {} entries, vocabulary has {n}",
            decision_j.probs.len()
        )));
    }
    let target = DistillTarget::single(&decision_j.probs);
    model.objective(&[LossTerm::Distill {
        input,
        vocab: decision_j.over,
        target: &target,
        weight: 1.0,
    }])
}

pub fn grad(model: &dyn LocalModel, terms: &[LossTerm]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; model.num_params()];
    model.objective_with(model.params(), terms, Some(&mut g))?;
    Ok(g)
}

/// A differentiable scalar function of a flat vector.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Value at `x`; overwrites `grad` with the gradient.
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Exact Hessian at `x` when a closed form exists.
    fn hessian(&self, _x: &[f64]) -> Option<Result<DMatrix<f64>>> {
        None
    }
}

/// Which parameters an objective over a model varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    Full,
    OutputHead,
}

/// A model's loss terms as a function of all parameters or of the output
/// head alone (the rest fixed at the model's current values).
pub struct ModelObjective<'a> {
    pub model: &'a dyn LocalModel,
    pub terms: &'a [LossTerm<'a>],
    pub scope: ParamScope,
}

impl ModelObjective<'_> {
    pub fn range(&self) -> Range<usize> {
        match self.scope {
            ParamScope::Full => 0..self.model.num_params(),
            ParamScope::OutputHead => self.model.head_range(),
        }
    }

    /// The current parameters restricted to the scope.
    pub fn point(&self) -> Vec<f64> {
        self.model.params()[self.range()].to_vec()
    }

    /// Exact Hessian at the model's parameters when available.
    pub fn analytic_hessian(&self) -> Option<Result<DMatrix<f64>>> {
        self.hessian(&self.point())
    }

    fn embed(&self, x: &[f64]) -> Vec<f64> {
        let mut theta = self.model.params().to_vec();
        theta[self.range()].copy_from_slice(x);
        theta
    }
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.range().len()
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let range = self.range();
        if range == (0..self.model.num_params()) {
            grad.fill(0.0);
            return self.model.objective_with(x, self.terms, Some(grad));
        }
        let theta = self.embed(x);
        let mut full = vec![0.0; theta.len()];
        let v = self.model.objective_with(&theta, self.terms, Some(&mut full))?;
        grad.copy_from_slice(&full[range]);
        Ok(v)
    }

    fn hessian(&self, x: &[f64]) -> Option<Result<DMatrix<f64>>> {
        if self.model.head_range() != self.range() {
            return None;
        }
        self.model.head_hessian_with(&self.embed(x), self.terms)
    }
}

const HVP_STEP: f64 = 1e-5;

/// Hessian-vector product by central differences of exact gradients.
pub fn hvp(obj: &dyn Objective, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let n = obj.dim();
    if x.len() != n || v.len() != n {
        return Err(Error::Contract(format!(
            "hvp dimension mismatch: objective {n}, point {}, vector {}",
            x.len(),
            v.len()
        )));
    }
    let nv = linalg::norm(v);
    if nv == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let h = HVP_STEP / nv;
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    linalg::axpy(h, v, &mut plus);
    linalg::axpy(-h, v, &mut minus);
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    obj.value_grad(&plus, &mut gp)?;
    obj.value_grad(&minus, &mut gm)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// Dense Hessian assembled column by column from [`hvp`] and symmetrized.
pub fn hessian_explicit(obj: &dyn Objective, x: &[f64], cap: usize) -> Result<DMatrix<f64>> {
    let n = obj.dim();
    if n > cap {
        return Err(Error::Size(format!(
            "{n} parameters exceed the dense Hessian cap of {cap}; use Hessian-vector products instead"
        )));
    }
    let mut h = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = hvp(obj, x, &e)?;
        e[j] = 0.0;
        h.set_column(j, &nalgebra::DVector::from_vec(col));
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Gradient of the cross-entropy / distillation term w.r.t. the scores, given
/// the softmax output `p`. Returns the term's unweighted value.
pub(crate) fn score_grad(term: &LossTerm, p: &[f64], target_pos: Option<usize>, g: &mut [f64]) -> f64 {
    match term {
        LossTerm::NextItem { .. } => {
            let t = target_pos.expect("next-item target position");
            g.copy_from_slice(p);
            g[t] -= 1.0;
            -p[t].max(f64::MIN_POSITIVE).ln()
        }
        LossTerm::Distill { target, .. } => {
            let n = target.count;
            // a = 2n(p − q̄); g = p∘a − p(p·a)
            let mut pa = 0.0;
            for i in 0..p.len() {
                let a = 2.0 * n * (p[i] - target.mean[i]);
                g[i] = a;
                pa += p[i] * a;
            }
            for i in 0..p.len() {
                g[i] = p[i] * (g[i] - pa);
            }
            target.value(p)
        }
    }
}

/// Hessian of a term w.r.t. its scores (unweighted), row-major |V|×|V|.
pub(crate) fn score_hessian(term: &LossTerm, p: &[f64], out: &mut Vec<f64>) {
    let v = p.len();
    out.clear();
    out.resize(v * v, 0.0);
    match term {
        LossTerm::NextItem { .. } => {
            for a in 0..v {
                for b in 0..v {
                    out[a * v + b] = -p[a] * p[b];
                }
                out[a * v + a] += p[a];
            }
        }
        LossTerm::Distill { target, .. } => {
            // with g = p − q̄, u = p·g, t = p∘(g + p):
            // H/2n = diag(t − u p) − t pᵀ − p tᵀ + (2u + |p|²) p pᵀ
            let n2 = 2.0 * target.count;
            let g: Vec<f64> = p.iter().zip(&target.mean).map(|(a, b)| a - b).collect();
            let u = linalg::dot(p, &g);
            let pp = linalg::dot(p, p);
            let t: Vec<f64> = (0..v).map(|i| p[i] * (g[i] + p[i])).collect();
            let c = 2.0 * u + pp;
            for a in 0..v {
                for b in 0..v {
                    out[a * v + b] = n2 * (-t[a] * p[b] - p[a] * t[b] + c * p[a] * p[b]);
                }
                out[a * v + a] += n2 * (t[a] - u * p[a]);
            }
        }
    }
}
