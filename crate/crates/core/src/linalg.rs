//! Small dense kernels and a conjugate-gradient solver.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..n {
        s += a[k] * b[k];
    }
    s
}

/// y += alpha * x
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        z += *s;
    }
    for s in scores.iter_mut() {
        *s /= z;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Solves `A x = b` for a symmetric positive definite operator `A` given as a
/// matrix-free product.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], opts: CgOptions) -> Result<CgSolution>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let b_norm = norm(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual_norm: 0.0,
        });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs_old = dot(&r, &r);
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if rs_old.sqrt() <= opts.rel_tol * b_norm {
            break;
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Numerical(format!(
                "conjugate gradient met non-positive curvature {pap:e}; increase damping"
            )));
        }
        let step = rs_old / pap;
        axpy(step, &p, &mut x);
        axpy(-step, &ap, &mut r);
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs_old;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs_old = rs_new;
        iterations += 1;
    }
    // Report the true residual rather than the recursively updated one.
    let ax = apply(&x)?;
    let residual_norm = ax
        .iter()
        .zip(b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(CgSolution {
        x,
        iterations,
        residual_norm,
    })
}

/// Solves a dense symmetric system, Cholesky first and LU as a fallback.
pub fn solve_dense(a: &DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let rhs = DVector::from_column_slice(b);
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&rhs).as_slice().to_vec());
    }
    a.clone()
        .lu()
        .solve(&rhs)
        .map(|x| x.as_slice().to_vec())
        .ok_or_else(|| {
            Error::Numerical("singular Hessian system; use a positive damping term".into())
        })
}

/// Dense solve for several right-hand sides sharing one factorization.
pub fn solve_dense_many(a: &DMatrix<f64>, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.nrows();
    let b = DMatrix::from_fn(n, rhs.len(), |i, j| rhs[j][i]);
    let x = if let Some(ch) = a.clone().cholesky() {
        ch.solve(&b)
    } else {
        a.clone().lu().solve(&b).ok_or_else(|| {
            Error::Numerical("singular Hessian system; use a positive damping term".into())
        })?
    };
    Ok((0..rhs.len())
        .map(|j| x.column(j).iter().cloned().collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_on_odd_lengths() {
        let a: Vec<f64> = (0..13).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..13).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn cg_solves_diagonal_system() {
        let diag = [2.0, 3.0, 4.0];
        let sol = conjugate_gradient(
            |v| Ok(v.iter().zip(&diag).map(|(x, d)| x * d).collect()),
            &[2.0, 6.0, 12.0],
            CgOptions::default(),
        )
        .unwrap();
        for (x, e) in sol.x.iter().zip([1.0, 2.0, 3.0]) {
            assert!((x - e).abs() < 1e-9);
        }
    }

    #[test]
    fn cg_rejects_indefinite_operator() {
        let r = conjugate_gradient(|v| Ok(v.iter().map(|x| -x).collect()), &[1.0], CgOptions::default());
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn dense_solve_reports_singularity() {
        let a = DMatrix::<f64>::zeros(2, 2);
        assert!(solve_dense(&a, &[1.0, 1.0]).is_err());
    }
}
