//! Thin wrappers around the dense factorizations used by the solvers.

use faer::linalg::solvers::{PartialPivLu, SelfAdjointEigen, Svd};
use faer::prelude::*;
use faer::Side;

/// Dense solve via partially pivoted LU.
pub fn solve(a: Mat<f64>, b: &[f64]) -> Result<Vec<f64>, String> {
    let n = a.nrows();
    assert_eq!(b.len(), n);
    let lu = PartialPivLu::new(a.as_ref());
    let rhs = Mat::from_fn(n, 1, |i, _| b[i]);
    let x = lu.solve(&rhs);
    let out: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err("non-finite solution".into())
    }
}

/// A reusable LU factorization.
pub struct Factorized {
    lu: PartialPivLu<f64>,
    n: usize,
}

impl Factorized {
    pub fn new(a: Mat<f64>) -> Self {
        let n = a.nrows();
        Factorized {
            lu: PartialPivLu::new(a.as_ref()),
            n,
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }
}

/// Least squares via column-pivoted QR; returns the coefficient vector.
pub fn lstsq(a: &Mat<f64>, b: &Mat<f64>) -> Vec<f64> {
    let qr = a.col_piv_qr();
    let x = qr.solve_lstsq(b);
    (0..a.ncols()).map(|i| x[(i, 0)]).collect()
}

/// All singular values, ascending.
pub fn singular_values(a: &Mat<f64>) -> Vec<f64> {
    let svd = Svd::new(a.as_ref()).expect("svd failed");
    let s = svd.S();
    let mut out: Vec<f64> = (0..s.dim()).map(|i| s[i]).collect();
    out.sort_by(|x, y| x.partial_cmp(y).unwrap());
    out
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &Mat<f64>) -> Vec<f64> {
    let e = SelfAdjointEigen::new(a.as_ref(), Side::Lower).expect("eigen failed");
    let s = e.S();
    let mut out: Vec<f64> = (0..s.dim()).map(|i| s[i]).collect();
    out.sort_by(|x, y| x.partial_cmp(y).unwrap());
    out
}

/// Smallest singular values (|eigenvalues| of the symmetrized operator) via
/// shift-invert Lanczos, plus a power-iteration estimate of the largest.
/// Intended for operators too large for a dense sweep.
pub fn lanczos_extremes(a: &Mat<f64>, want: usize, seed: u64) -> (Vec<f64>, f64) {
    let n = a.nrows();
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    // crude scale from a few matvec norms
    let mut v: Vec<f64> = (0..n).map(|i| rng(seed + i as u64)).collect();
    normalize(&mut v);
    let mut top = 0.0f64;
    for _ in 0..30 {
        let w = matvec(&sym, &v);
        top = norm(&w);
        v = w;
        normalize(&mut v);
    }
    let shift = -1e-8 * top.max(1.0);
    let shifted = Mat::from_fn(n, n, |i, j| sym[(i, j)] - if i == j { shift } else { 0.0 });
    let lu = Factorized::new(shifted);
    // Lanczos on (B - shift)^{-1} with full reorthogonalization
    let steps = (6 * want + 30).min(n);
    let mut qs: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut q: Vec<f64> = (0..n).map(|i| rng(seed ^ 0x9e37 + i as u64)).collect();
    normalize(&mut q);
    let mut q_prev = vec![0.0; n];
    let mut beta_prev = 0.0;
    for k in 0..steps {
        let mut w = lu.solve(&q);
        let alpha = dot(&w, &q);
        for i in 0..n {
            w[i] -= alpha * q[i] + beta_prev * q_prev[i];
        }
        // full reorthogonalization
        for qq in &qs {
            let c = dot(&w, qq);
            for i in 0..n {
                w[i] -= c * qq[i];
            }
        }
        qs.push(q.clone());
        alphas.push(alpha);
        let beta = norm(&w);
        if k + 1 < steps {
            betas.push(beta);
            if beta < 1e-14 {
                break;
            }
            q_prev = q;
            q = w.iter().map(|x| x / beta).collect();
            beta_prev = beta;
        }
    }
    let k = alphas.len();
    let mut tri = Mat::<f64>::zeros(k, k);
    for i in 0..k {
        tri[(i, i)] = alphas[i];
        if i + 1 < k {
            tri[(i, i + 1)] = betas[i];
            tri[(i + 1, i)] = betas[i];
        }
    }
    let theta = sym_eigenvalues(&tri);
    // eigenvalues of B: shift + 1/theta; extremal theta ↔ eigenvalues near shift
    let mut eigs: Vec<f64> = theta
        .iter()
        .filter(|t| t.abs() > 1e-300)
        .map(|t| (shift + 1.0 / t).abs())
        .collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eigs.truncate(want);
    (eigs, top)
}

fn matvec(a: &Mat<f64>, v: &[f64]) -> Vec<f64> {
    let n = a.nrows();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += a[(i, j)] * v[j];
        }
        out[i] = acc;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: &mut [f64]) {
    let n = norm(a);
    if n > 0.0 {
        for x in a.iter_mut() {
            *x /= n;
        }
    }
}

fn rng(seed: u64) -> f64 {
    // splitmix64 to a uniform in (-1, 1)
    let mut z = seed.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    (z as f64 / u64::MAX as f64) * 2.0 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_small() {
        let a = Mat::from_fn(2, 2, |i, j| [[2.0, 1.0], [1.0, 3.0]][i][j]);
        let x = solve(a, &[3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12);
        assert!((x[1] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn lanczos_finds_small_eigens() {
        let n = 60;
        // diag(0, 1e-9, 0.5, 1.5, 2.5, ...) in a random orthogonal-ish basis:
        // use the diagonal directly; Lanczos must report the two near-zeros
        let mut a = Mat::<f64>::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = match i {
                0 => 0.0,
                1 => 1e-9,
                _ => 0.5 + i as f64,
            };
        }
        let (small, top) = lanczos_extremes(&a, 4, 7);
        assert!(small[0] < 1e-7, "{small:?}");
        assert!(small[1] < 1e-7, "{small:?}");
        assert!(small[2] > 1.0, "{small:?}");
        assert!(top > 50.0);
    }
}
