//! A convex calibration setting where leave-one-out retraining is cheap:
//! L2-regularized softmax regression on bag-of-items features with noisy
//! training labels and clean validation labels.

use rand::Rng as _;

use super::{model_influence, InfluenceConfig, Solver};
use crate::linalg;
use crate::recmodel::{LocalModel, LossTerm, ParamScope, SeqInput, SoftmaxRegModel, TargetVocab};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestbedConfig {
    pub features: usize,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub seq_len: usize,
    /// Probability that a training label is replaced by a uniform draw.
    pub label_noise: f64,
    /// Scale of the ground-truth weights.
    pub signal: f64,
    /// L2 strength; also the damping of the influence system.
    pub l2: f64,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        Self {
            features: 16,
            classes: 4,
            train: 100,
            val: 50,
            seq_len: 5,
            label_noise: 0.2,
            signal: 3.0,
            l2: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvexTestbed {
    pub cfg: TestbedConfig,
    pub train: Vec<(Vec<u32>, u32)>,
    pub val: Vec<(Vec<u32>, u32)>,
    model: SoftmaxRegModel,
}

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 100;

impl ConvexTestbed {
    pub fn generate(cfg: TestbedConfig, seed: u64) -> Self {
        let mut rng = seed::rng_for(seed, "testbed", 0);
        let truth: Vec<f64> = (0..cfg.features * cfg.classes)
            .map(|_| rng.gen_range(-cfg.signal..=cfg.signal))
            .collect();
        let oracle = {
            let mut m = SoftmaxRegModel::new(cfg.features, cfg.classes);
            m.params_mut().copy_from_slice(&truth);
            m
        };
        let mut draw = |noise: f64| {
            let x: Vec<u32> = (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.features as u32)).collect();
            let p = oracle.forward(SeqInput::Cats(&x), TargetVocab::Categories).expect("valid input").probs;
            let mut u = rng.gen::<f64>();
            let mut y = cfg.classes - 1;
            for (k, &pk) in p.iter().enumerate() {
                if u < pk {
                    y = k;
                    break;
                }
                u -= pk;
            }
            if rng.gen::<f64>() < noise {
                y = rng.gen_range(0..cfg.classes);
            }
            (x, y as u32)
        };
        let train = (0..cfg.train).map(|_| draw(cfg.label_noise)).collect();
        let val = (0..cfg.val).map(|_| draw(0.0)).collect();
        Self {
            cfg,
            train,
            val,
            model: SoftmaxRegModel::new(cfg.features, cfg.classes),
        }
    }

    fn terms<'a>(set: &'a [(Vec<u32>, u32)], weights: Option<&[f64]>, scale: f64) -> Vec<LossTerm<'a>> {
        set.iter()
            .enumerate()
            .map(|(i, (x, y))| LossTerm::NextItem {
                context: SeqInput::Cats(x),
                vocab: TargetVocab::Categories,
                target: *y,
                weight: scale * weights.map_or(1.0, |w| w[i]),
            })
            .collect()
    }

    /// `(1/m) Σ_j w_j l_j(θ) + (λ/2)‖θ‖²`, value and gradient.
    fn objective(&self, theta: &[f64], terms: &[LossTerm], grad: &mut [f64]) -> Result<f64> {
        grad.fill(0.0);
        let v = self.model.objective_with(theta, terms, Some(grad))?;
        linalg::axpy(self.cfg.l2, theta, grad);
        Ok(v + 0.5 * self.cfg.l2 * linalg::dot(theta, theta))
    }

    /// Newton's method from zero with per-instance weights (1 = present,
    /// 0 = removed), always normalized by the full training size.
    pub fn fit(&self, weights: &[f64]) -> Result<Vec<f64>> {
        let inv = 1.0 / self.train.len() as f64;
        let terms = Self::terms(&self.train, Some(weights), inv);
        let n = self.model.num_params();
        let mut theta = vec![0.0; n];
        let mut grad = vec![0.0; n];
        let mut value = self.objective(&theta, &terms, &mut grad)?;
        for _ in 0..NEWTON_MAX_ITER {
            if linalg::norm(&grad) < NEWTON_TOL {
                return Ok(theta);
            }
            let mut h = self
                .model
                .head_hessian_with(&theta, &terms)
                .expect("softmax regression has an exact Hessian")?;
            for i in 0..n {
                h[(i, i)] += self.cfg.l2;
            }
            let step = linalg::solve_dense(&h, &grad)?;
            let slope = linalg::dot(&grad, &step);
            let mut t = 1.0;
            let mut trial = vec![0.0; n];
            let mut trial_grad = vec![0.0; n];
            loop {
                for i in 0..n {
                    trial[i] = theta[i] - t * step[i];
                }
                let v = self.objective(&trial, &terms, &mut trial_grad)?;
                if v <= value - 1e-4 * t * slope || t < 1e-10 {
                    theta.copy_from_slice(&trial);
                    grad.copy_from_slice(&trial_grad);
                    value = v;
                    break;
                }
                t *= 0.5;
            }
        }
        if linalg::norm(&grad) < 1e-8 {
            Ok(theta)
        } else {
            Err(Error::Oracle(format!(
                "Newton did not converge: gradient norm {:e}",
                linalg::norm(&grad)
            )))
        }
    }

    pub fn fit_all(&self) -> Result<Vec<f64>> {
        self.fit(&vec![1.0; self.train.len()])
    }

    /// Validation risk `Σ_k l_k(θ)`.
    pub fn risk(&self, theta: &[f64]) -> Result<f64> {
        self.model.objective_with(theta, &Self::terms(&self.val, None, 1.0), None)
    }

    /// `Ψ_j` for every training instance at `theta_hat`.
    pub fn influence(&self, theta_hat: &[f64], solver: Solver) -> Result<Vec<f64>> {
        let mut model = self.model.clone();
        model.params_mut().copy_from_slice(theta_hat);
        let train: Vec<Vec<LossTerm>> = self.train.iter().map(|s| Self::terms(std::slice::from_ref(s), None, 1.0)).collect();
        let val: Vec<Vec<LossTerm>> = self.val.iter().map(|s| Self::terms(std::slice::from_ref(s), None, 1.0)).collect();
        let cfg = InfluenceConfig {
            damping: self.cfg.l2,
            solver,
            scope: ParamScope::Full,
            ..InfluenceConfig::default()
        };
        model_influence(&model, &train, &val, &cfg)
    }

    /// Realized risk change from retraining without instance `j`.
    pub fn loo_oracle(&self, theta_hat: &[f64], j: usize) -> Result<f64> {
        let mut w = vec![1.0; self.train.len()];
        w[j] = 0.0;
        Ok(self.risk(&self.fit(&w)?)? - self.risk(theta_hat)?)
    }

    /// (predicted, realized) risk change from removing every instance with
    /// `Ψ > alpha` at once.
    pub fn lemma1_check(&self, alpha: f64) -> Result<(f64, f64)> {
        let theta = self.fit_all()?;
        let psi = self.influence(&theta, Solver::DenseInverse)?;
        let m = self.train.len();
        let harmful: Vec<usize> = (0..m).filter(|&j| psi[j] > alpha).collect();
        let predicted: f64 = harmful.iter().map(|&j| super::predicted_discard_delta(psi[j], m)).sum();
        if harmful.is_empty() {
            return Ok((predicted, 0.0));
        }
        let mut w = vec![1.0; m];
        for &j in &harmful {
            w[j] = 0.0;
        }
        let realized = self.risk(&self.fit(&w)?)? - self.risk(&theta)?;
        Ok((predicted, realized))
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        let (x, y) = (ra[i] - ma, rb[i] - mb);
        cov += x * y;
        va += x * x;
        vb += y * y;
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
