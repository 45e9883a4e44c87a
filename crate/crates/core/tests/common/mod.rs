//! Independent reference implementations used as test oracles.
//!
//! None of these share code with the library: the transport oracles are
//! Newton-type minimizers of the primal objective written out from its
//! definition, and the eigen oracle is a cyclic Jacobi sweep.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut impl Rng, n: usize, m: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| rng.random_range(lo..hi))
}

pub fn gaussian_matrix(rng: &mut impl Rng, n: usize, m: usize) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_fn((n, m), |_| StandardNormal.sample(rng))
}

/// Primal objective `<C, pi> + eps * sum pi (ln pi - 1)`.
fn primal_objective(c: &[f64], p: &[f64], eps: f64) -> f64 {
    c.iter()
        .zip(p)
        .map(|(c, p)| c * p + eps * if *p > 0.0 { p * (p.ln() - 1.0) } else { 0.0 })
        .sum()
}

/// Minimizes `<C, pi> - eps H(pi)` over the transport polytope with uniform
/// marginals by feasible-direction Newton steps: each step is the Newton
/// direction projected onto the null space of the marginal constraints,
/// followed by a positivity-preserving backtracking line search.
pub fn entropic_ot_oracle(cost: &Array2<f64>, eps: f64) -> Array2<f64> {
    let b = cost.nrows();
    let nvar = b * b;
    // Row constraints for every row, column constraints for all but the
    // last column (the dropped one is implied).
    let ncons = 2 * b - 1;
    let mut a = DMatrix::<f64>::zeros(ncons, nvar);
    for i in 0..b {
        for j in 0..b {
            a[(i, i * b + j)] = 1.0;
            if j < b - 1 {
                a[(b + j, i * b + j)] = 1.0;
            }
        }
    }
    let c: Vec<f64> = cost.iter().cloned().collect();
    let mut p = vec![1.0 / (b * b) as f64; nvar];
    for _ in 0..500 {
        let grad: Vec<f64> = c.iter().zip(&p).map(|(c, p)| c + eps * p.ln()).collect();
        let hinv: Vec<f64> = p.iter().map(|p| p / eps).collect();
        // (A H^-1 A^T) w = -A H^-1 grad
        let mut s = DMatrix::<f64>::zeros(ncons, ncons);
        for r in 0..ncons {
            for q in 0..ncons {
                let mut acc = 0.0;
                for k in 0..nvar {
                    acc += a[(r, k)] * hinv[k] * a[(q, k)];
                }
                s[(r, q)] = acc;
            }
        }
        let mut rhs = DVector::<f64>::zeros(ncons);
        for r in 0..ncons {
            rhs[r] = -(0..nvar).map(|k| a[(r, k)] * hinv[k] * grad[k]).sum::<f64>();
        }
        let w = s.lu().solve(&rhs).expect("oracle KKT solve");
        let d: Vec<f64> = (0..nvar)
            .map(|k| {
                let atw: f64 = (0..ncons).map(|r| a[(r, k)] * w[r]).sum();
                -hinv[k] * (grad[k] + atw)
            })
            .collect();
        let decrement: f64 = d.iter().zip(&grad).map(|(d, g)| -d * g).sum();
        if decrement < 1e-30 {
            break;
        }
        let mut t: f64 = 1.0;
        for (pk, dk) in p.iter().zip(&d) {
            if *dk < 0.0 {
                t = t.min(-0.95 * pk / dk);
            }
        }
        let f0 = primal_objective(&c, &p, eps);
        loop {
            let trial: Vec<f64> = p.iter().zip(&d).map(|(p, d)| p + t * d).collect();
            if trial.iter().all(|v| *v > 0.0)
                && primal_objective(&c, &trial, eps) <= f0 - 0.25 * t * decrement
            {
                p = trial;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return Array2::from_shape_vec((b, b), p).unwrap();
            }
        }
    }
    Array2::from_shape_vec((b, b), p).unwrap()
}

/// Minimizes `<C, pi> - eps H(pi)` over
/// `{pi >= 0, pi 1 <= 1/b, pi^T 1 <= 1/b, sum pi = s}` for `s < 1` by
/// enumerating which row and column caps are active. For each active set
/// the equality-constrained problem is solved by Newton's method on its
/// dual; the first candidate satisfying every KKT condition (feasibility of
/// inactive caps, sign of active multipliers) is the unique optimum.
pub fn entropic_partial_ot_oracle(cost: &Array2<f64>, eps: f64, mass: f64) -> Array2<f64> {
    assert!(mass < 1.0);
    let b = cost.nrows();
    let cap = 1.0 / b as f64;
    let mut best: Option<(f64, Array2<f64>)> = None;
    for rmask in 0u32..(1 << b) {
        let rows: Vec<usize> = (0..b).filter(|i| rmask & (1 << i) != 0).collect();
        if rows.len() as f64 * cap >= mass - 1e-12 {
            continue;
        }
        for cmask in 0u32..(1 << b) {
            let cols: Vec<usize> = (0..b).filter(|j| cmask & (1 << j) != 0).collect();
            if cols.len() as f64 * cap >= mass - 1e-12 {
                continue;
            }
            let Some((alpha, beta, lam)) = active_set_dual(cost, eps, mass, &rows, &cols) else {
                continue;
            };
            let plan = Array2::from_shape_fn((b, b), |(i, j)| {
                ((alpha[i] + beta[j] + lam - cost[[i, j]]) / eps).exp()
            });
            let tol = 1e-10;
            let row_ok = (0..b).all(|i| plan.row(i).sum() <= cap + tol);
            let col_ok = (0..b).all(|j| plan.column(j).sum() <= cap + tol);
            let sign_ok = alpha.iter().chain(beta.iter()).all(|v| *v <= tol);
            if row_ok && col_ok && sign_ok {
                let c: Vec<f64> = cost.iter().cloned().collect();
                let p: Vec<f64> = plan.iter().cloned().collect();
                let obj = primal_objective(&c, &p, eps);
                if best.as_ref().map_or(true, |(o, _)| obj < *o) {
                    best = Some((obj, plan));
                }
            }
        }
    }
    best.unwrap_or_else(|| panic!("no KKT point found b={b} eps={eps} s={mass} cost={:?}", cost.as_slice())).1
}

fn active_set_dual(
    cost: &Array2<f64>,
    eps: f64,
    mass: f64,
    rows: &[usize],
    cols: &[usize],
) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let b = cost.nrows();
    let cap = 1.0 / b as f64;
    let nr = rows.len();
    let nc = cols.len();
    let n = nr + nc + 1;
    let unpack = |x: &DVector<f64>| {
        let mut alpha = vec![0.0; b];
        let mut beta = vec![0.0; b];
        for (k, &i) in rows.iter().enumerate() {
            alpha[i] = x[k];
        }
        for (k, &j) in cols.iter().enumerate() {
            beta[j] = x[nr + k];
        }
        (alpha, beta, x[n - 1])
    };
    let dual = |x: &DVector<f64>| -> f64 {
        let (alpha, beta, lam) = unpack(x);
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..b {
                total += ((alpha[i] + beta[j] + lam - cost[[i, j]]) / eps).exp();
            }
        }
        let lin: f64 = rows.iter().map(|&i| cap * alpha[i]).sum::<f64>()
            + cols.iter().map(|&j| cap * beta[j]).sum::<f64>()
            + mass * lam;
        lin - eps * total
    };
    let mut x = DVector::<f64>::zeros(n);
    // Start with the mass constraint satisfied.
    let total0: f64 = cost.iter().map(|c| (-c / eps).exp()).sum();
    x[n - 1] = eps * (mass / total0).ln();
    for _ in 0..1000 {
        let (alpha, beta, lam) = unpack(&x);
        let plan = Array2::from_shape_fn((b, b), |(i, j)| {
            ((alpha[i] + beta[j] + lam - cost[[i, j]]) / eps).exp()
        });
        let r: Vec<f64> = (0..b).map(|i| plan.row(i).sum()).collect();
        let c: Vec<f64> = (0..b).map(|j| plan.column(j).sum()).collect();
        let total: f64 = r.iter().sum();
        let mut grad = DVector::<f64>::zeros(n);
        for (k, &i) in rows.iter().enumerate() {
            grad[k] = cap - r[i];
        }
        for (k, &j) in cols.iter().enumerate() {
            grad[nr + k] = cap - c[j];
        }
        grad[n - 1] = mass - total;
        if grad.amax() < 1e-13 {
            return Some(unpack(&x));
        }
        // Negative Hessian, scaled by eps.
        let mut h = DMatrix::<f64>::zeros(n, n);
        for (k, &i) in rows.iter().enumerate() {
            h[(k, k)] = r[i];
            for (l, &j) in cols.iter().enumerate() {
                h[(k, nr + l)] = plan[[i, j]];
                h[(nr + l, k)] = plan[[i, j]];
            }
            h[(k, n - 1)] = r[i];
            h[(n - 1, k)] = r[i];
        }
        for (l, &j) in cols.iter().enumerate() {
            h[(nr + l, nr + l)] = c[j];
            h[(nr + l, n - 1)] = c[j];
            h[(n - 1, nr + l)] = c[j];
        }
        h[(n - 1, n - 1)] = total;
        let step = h.lu().solve(&(grad.clone() * eps))?;
        let d0 = dual(&x);
        let slope = grad.dot(&step);
        if slope < 1e-14 {
            // Inside the quadratic region the dual change is below roundoff,
            // so Armijo cannot discriminate; take the pure Newton step.
            x += &step;
            continue;
        }
        let mut t = 1.0;
        loop {
            let trial = &x + &step * t;
            let d1 = dual(&trial);
            if d1.is_finite() && d1 >= d0 + 0.25 * t * slope {
                x = trial;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return (grad.amax() < 1e-11).then(|| unpack(&x));
            }
        }
    }
    None
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors as columns)`.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[[i, i]]).collect(), v)
}

/// Nearest PSD matrix with eigenvalue floor, via the Jacobi decomposition
/// of the symmetric part.
pub fn eigen_clip_oracle(raw: &Array2<f64>, floor: f64) -> Array2<f64> {
    let sym = (raw + &raw.t()) * 0.5;
    let (vals, vecs) = jacobi_eigen(&sym);
    let n = raw.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        (0..n).map(|k| vecs[[i, k]] * vals[k].max(floor) * vecs[[j, k]]).sum()
    })
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
