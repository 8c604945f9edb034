//! Category transition statistics and Markov walks over them.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{CatId, CategorySequence};
use crate::seed;
use crate::{Error, Result};

const MAX_RESTARTS: usize = 10_000;

/// Row `c` holds the distribution of the category that follows `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub probs: Vec<Vec<f64>>,
    /// Rows without any outgoing transition.
    pub absorbing: Vec<bool>,
}

impl TransitionMatrix {
    pub fn num_categories(&self) -> usize {
        self.probs.len()
    }

    pub fn populated_rows(&self) -> Vec<CatId> {
        (0..self.num_categories())
            .filter(|&c| !self.absorbing[c])
            .map(|c| c as CatId)
            .collect()
    }
}

pub fn build_transition_matrix(cat_seqs: &[CategorySequence], num_categories: usize) -> Result<TransitionMatrix> {
    let mut counts = vec![vec![0u64; num_categories]; num_categories];
    let mut pairs = 0u64;
    for seq in cat_seqs {
        for w in seq.categories.windows(2) {
            let (a, b) = (w[0] as usize, w[1] as usize);
            if a >= num_categories || b >= num_categories {
                return Err(Error::Generation(format!(
                    "category {} outside vocabulary of {num_categories}",
                    a.max(b)
                )));
            }
            counts[a][b] += 1;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Generation(
            "no category sequence has two or more entries".into(),
        ));
    }
    let mut absorbing = vec![false; num_categories];
    let probs = counts
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                absorbing[c] = true;
                vec![0.0; num_categories]
            } else {
                row.iter().map(|&n| n as f64 / total as f64).collect()
            }
        })
        .collect();
    Ok(TransitionMatrix {
        counts,
        probs,
        absorbing,
    })
}

fn draw(rng: &mut seed::Rng, row: &[f64]) -> usize {
    let mut pick = rng.gen::<f64>();
    for (i, &p) in row.iter().enumerate() {
        if pick < p {
            return i;
        }
        pick -= p;
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Generates `n` category walks of exactly `length` steps. Each walk starts at a
/// category drawn uniformly from the populated rows; hitting an absorbing
/// category restarts that walk from a fresh initiator.
pub fn prob_generate(tm: &TransitionMatrix, length: usize, n: usize, seed: u64) -> Result<Vec<CategorySequence>> {
    let starts = tm.populated_rows();
    if starts.is_empty() {
        return Err(Error::Generation("transition matrix has no populated row".into()));
    }
    if length == 0 {
        return Err(Error::Param("generated sequence length must be positive".into()));
    }
    let mut rng = seed::rng_for(seed, "prob-generate", 0);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut restarts = 0;
        let cats = 'walk: loop {
            let mut cats = vec![starts[rng.gen_range(0..starts.len())]];
            while cats.len() < length {
                let cur = *cats.last().expect("non-empty") as usize;
                if tm.absorbing[cur] {
                    restarts += 1;
                    if restarts > MAX_RESTARTS {
                        return Err(Error::Generation(format!(
                            "no walk of length {length} avoids absorbing categories"
                        )));
                    }
                    continue 'walk;
                }
                cats.push(draw(&mut rng, &tm.probs[cur]) as CatId);
            }
            break cats;
        };
        out.push(CategorySequence {
            user_id: None,
            categories: cats,
        });
    }
    Ok(out)
}

/// Ablation stand-in for probability generation: i.i.d. uniform categories.
pub fn uniform_generate(num_categories: usize, length: usize, n: usize, seed: u64) -> Result<Vec<CategorySequence>> {
    if num_categories == 0 {
        return Err(Error::Generation("empty category vocabulary".into()));
    }
    let mut rng = seed::rng_for(seed, "uniform-generate", 0);
    Ok((0..n)
        .map(|_| CategorySequence {
            user_id: None,
            categories: (0..length).map(|_| rng.gen_range(0..num_categories) as CatId).collect(),
        })
        .collect())
}
