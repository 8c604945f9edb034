//! Multinomial logistic regression on bag-of-items features. Cross-entropy
//! terms are convex in the weights, which makes this model the calibration
//! target for influence estimates.

use nalgebra::DMatrix;
use rand::Rng as _;

use super::{score_grad, score_hessian, LocalModel, LossTerm, SeqInput, TargetVocab};
use crate::linalg::dot;
use crate::seed;
use crate::{Error, Result};

/// Scores `W f(x)` over `classes` outputs, where `f(x)` is the normalized item
/// histogram of the input over `features` items. Only the category
/// vocabulary is supported as output.
#[derive(Debug, Clone)]
pub struct SoftmaxRegModel {
    features: usize,
    classes: usize,
    theta: Vec<f64>,
}

impl SoftmaxRegModel {
    pub fn new(features: usize, classes: usize) -> Self {
        Self {
            features,
            classes,
            theta: vec![0.0; features * classes],
        }
    }

    pub fn init_random(&mut self, scale: f64, seed: u64) {
        let mut rng = seed::rng_for(seed, "softmax-init", 0);
        for x in &mut self.theta {
            *x = rng.gen_range(-scale..=scale);
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn featurize(&self, input: SeqInput) -> Result<Vec<f64>> {
        let (SeqInput::Pois(s) | SeqInput::Cats(s)) = input;
        if s.is_empty() {
            return Err(Error::Contract("empty input sequence".into()));
        }
        let mut f = vec![0.0; self.features];
        let inv = 1.0 / s.len() as f64;
        for &i in s {
            if i as usize >= self.features {
                return Err(Error::Vocab { kind: "item", item: i });
            }
            f[i as usize] += inv;
        }
        Ok(f)
    }

    fn check_vocab(&self, vocab: TargetVocab) -> Result<()> {
        match vocab {
            TargetVocab::Categories => Ok(()),
            TargetVocab::Region(r) => Err(Error::Vocab { kind: "region", item: r }),
        }
    }

    fn probs(&self, theta: &[f64], f: &[f64]) -> Vec<f64> {
        let mut s: Vec<f64> = (0..self.classes)
            .map(|k| dot(&theta[k * self.features..(k + 1) * self.features], f))
            .collect();
        crate::linalg::softmax_in_place(&mut s);
        s
    }

    fn unpack<'a>(&self, term: &LossTerm<'a>) -> Result<(SeqInput<'a>, Option<usize>)> {
        match *term {
            LossTerm::NextItem { context, vocab, target, .. } => {
                self.check_vocab(vocab)?;
                if target as usize >= self.classes {
                    return Err(Error::Vocab { kind: "category", item: target });
                }
                Ok((context, Some(target as usize)))
            }
            LossTerm::Distill { input, vocab, target, .. } => {
                self.check_vocab(vocab)?;
                if target.mean.len() != self.classes {
                    return Err(Error::Contract(format!(
                        "distillation target has {} entries, vocabulary has {}",
                        target.mean.len(),
                        self.classes
                    )));
                }
                Ok((input, None))
            }
        }
    }
}

impl LocalModel for SoftmaxRegModel {
    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn vocab_size(&self, vocab: TargetVocab) -> Result<usize> {
        self.check_vocab(vocab)?;
        Ok(self.classes)
    }

    fn scores_with(&self, theta: &[f64], input: SeqInput, vocab: TargetVocab) -> Result<Vec<f64>> {
        self.check_vocab(vocab)?;
        let f = self.featurize(input)?;
        Ok((0..self.classes)
            .map(|k| dot(&theta[k * self.features..(k + 1) * self.features], &f))
            .collect())
    }

    fn objective_with(&self, theta: &[f64], terms: &[LossTerm], mut grad: Option<&mut [f64]>) -> Result<f64> {
        let mut total = 0.0;
        let mut gs = vec![0.0; self.classes];
        for term in terms {
            let (input, tpos) = self.unpack(term)?;
            let f = self.featurize(input)?;
            let p = self.probs(theta, &f);
            let w = term.weight();
            total += w * score_grad(term, &p, tpos, &mut gs);
            if let Some(g) = grad.as_deref_mut() {
                for k in 0..self.classes {
                    crate::linalg::axpy(w * gs[k], &f, &mut g[k * self.features..(k + 1) * self.features]);
                }
            }
        }
        Ok(total)
    }

    fn head_hessian_with(&self, theta: &[f64], terms: &[LossTerm]) -> Option<Result<DMatrix<f64>>> {
        let run = || -> Result<DMatrix<f64>> {
            let (nf, nk) = (self.features, self.classes);
            let mut out = DMatrix::zeros(nf * nk, nf * nk);
            let mut hs = Vec::new();
            for term in terms {
                let (input, _) = self.unpack(term)?;
                let f = self.featurize(input)?;
                let p = self.probs(theta, &f);
                score_hessian(term, &p, &mut hs);
                let w = term.weight();
                let nz: Vec<usize> = (0..nf).filter(|&i| f[i] != 0.0).collect();
                for k in 0..nk {
                    for l in 0..nk {
                        let x = w * hs[k * nk + l];
                        for &i in &nz {
                            for &j in &nz {
                                out[(k * nf + i, l * nf + j)] += x * f[i] * f[j];
                            }
                        }
                    }
                }
            }
            Ok(out)
        };
        Some(run())
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{fd_grad, fd_hessian, rel_err};
    use super::super::{grad, hessian_explicit, ModelObjective, ParamScope, HESSIAN_CAP};
    use super::*;
    use rand::SeedableRng;

    fn random_case(rng: &mut seed::Rng) -> (Vec<Vec<u32>>, Vec<u32>) {
        let seqs: Vec<Vec<u32>> = (0..6)
            .map(|_| (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..5)).collect())
            .collect();
        let labels = (0..6).map(|_| rng.gen_range(0..3)).collect();
        (seqs, labels)
    }

    fn ce_terms<'a>(seqs: &'a [Vec<u32>], labels: &[u32]) -> Vec<LossTerm<'a>> {
        seqs.iter()
            .zip(labels)
            .map(|(s, &y)| LossTerm::NextItem {
                context: SeqInput::Cats(s),
                vocab: TargetVocab::Categories,
                target: y,
                weight: 1.0 / seqs.len() as f64,
            })
            .collect()
    }

    #[test]
    fn gradient_and_hessian_oracles() {
        let mut rng = seed::Rng::seed_from_u64(5);
        for case in 0..10 {
            let mut m = SoftmaxRegModel::new(5, 3);
            m.init_random(1.0, case);
            let (seqs, labels) = random_case(&mut rng);
            let terms = ce_terms(&seqs, &labels);
            let f = |x: &[f64]| m.objective_with(x, &terms, None).unwrap();
            assert!(rel_err(&grad(&m, &terms).unwrap(), &fd_grad(&f, m.params(), 1e-5)) < 1e-4);
            let obj = ModelObjective { model: &m, terms: &terms, scope: ParamScope::Full };
            let exact = obj.analytic_hessian().unwrap().unwrap();
            let oracle = fd_hessian(&f, m.params(), 1e-4);
            assert!((&exact - &oracle).abs().max() < 1e-5 * oracle.abs().max().max(1.0));
            let cols = hessian_explicit(&obj, m.params(), HESSIAN_CAP).unwrap();
            assert!((&exact - &cols).abs().max() < 1e-6);
        }
    }

    #[test]
    fn hessian_is_psd() {
        let mut rng = seed::Rng::seed_from_u64(8);
        let mut m = SoftmaxRegModel::new(5, 3);
        m.init_random(2.0, 1);
        let (seqs, labels) = random_case(&mut rng);
        let terms = ce_terms(&seqs, &labels);
        let h = m.head_hessian_with(m.params(), &terms).unwrap().unwrap();
        let min = h.symmetric_eigen().eigenvalues.min();
        assert!(min >= -1e-8, "min eigenvalue {min}");
    }

    #[test]
    fn midpoint_convexity() {
        let mut rng = seed::Rng::seed_from_u64(11);
        let m = SoftmaxRegModel::new(5, 3);
        for _ in 0..200 {
            let (seqs, labels) = random_case(&mut rng);
            let terms = ce_terms(&seqs, &labels);
            let a: Vec<f64> = (0..15).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let f = |x: &[f64]| m.objective_with(x, &terms, None).unwrap();
            assert!(f(&mid) <= 0.5 * (f(&a) + f(&b)) + 1e-9);
        }
    }

    #[test]
    fn region_vocab_unsupported() {
        let m = SoftmaxRegModel::new(3, 2);
        assert!(m.forward(SeqInput::Cats(&[0]), TargetVocab::Region(0)).is_err());
        let d = m.forward(SeqInput::Cats(&[0, 2]), TargetVocab::Categories).unwrap();
        assert_eq!(d.probs, vec![0.5, 0.5]);
        assert_eq!(SoftmaxRegModel::new(3, 1).forward(SeqInput::Cats(&[1]), TargetVocab::Categories).unwrap().probs, vec![1.0]);
    }
}
