//! Log-sum-exp reductions shared by the solvers and the gradient tape.
//!
//! Both code paths call these exact functions so that a plan recorded on
//! the tape is bit-identical to the one the solver returns.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Reduce over columns, producing one value per row.
    Rows,
    /// Reduce over rows, producing one value per column.
    Cols,
}

/// `out_k = offset - eps * ln sum_l exp((p_l + shift - C_kl) / eps)` along `axis`,
/// optionally clipped to `min(0, out_k)`.
pub fn dual_update(
    cost: ArrayView2<'_, f64>,
    potential: ArrayView1<'_, f64>,
    shift: f64,
    eps: f64,
    offset: f64,
    axis: Reduce,
    clip: bool,
) -> Array1<f64> {
    let mut out = neg_lse(cost, potential, shift, eps, axis);
    out.mapv_inplace(|v| {
        let x = offset + eps * v;
        if clip {
            x.min(0.0)
        } else {
            x
        }
    });
    out
}

/// `-ln sum_l exp((p_l + shift - C_kl) / eps)`.
fn neg_lse(
    cost: ArrayView2<'_, f64>,
    potential: ArrayView1<'_, f64>,
    shift: f64,
    eps: f64,
    axis: Reduce,
) -> Array1<f64> {
    let inv = 1.0 / eps;
    let m = cost.ncols();
    match axis {
        Reduce::Rows => {
            let mut out = Array1::zeros(cost.nrows());
            for (i, row) in cost.outer_iter().enumerate() {
                let mut mx = f64::NEG_INFINITY;
                for (c, p) in row.iter().zip(potential.iter()) {
                    mx = mx.max((p + shift - c) * inv);
                }
                let mut s = 0.0;
                for (c, p) in row.iter().zip(potential.iter()) {
                    s += ((p + shift - c) * inv - mx).exp();
                }
                out[i] = -(mx + s.ln());
            }
            out
        }
        Reduce::Cols => {
            let mut mx = Array1::from_elem(m, f64::NEG_INFINITY);
            for (row, p) in cost.outer_iter().zip(potential.iter()) {
                for (mj, c) in mx.iter_mut().zip(row.iter()) {
                    *mj = mj.max((p + shift - c) * inv);
                }
            }
            let mut s = Array1::<f64>::zeros(m);
            for (row, p) in cost.outer_iter().zip(potential.iter()) {
                for ((sj, c), mj) in s.iter_mut().zip(row.iter()).zip(mx.iter()) {
                    *sj += ((p + shift - c) * inv - mj).exp();
                }
            }
            Array1::from_iter(mx.iter().zip(s.iter()).map(|(mj, sj)| -(mj + sj.ln())))
        }
    }
}

/// `offset - eps * ln sum_ij exp((f_i + g_j - C_ij) / eps)`.
pub fn mass_update(
    cost: ArrayView2<'_, f64>,
    f: ArrayView1<'_, f64>,
    g: ArrayView1<'_, f64>,
    eps: f64,
    offset: f64,
) -> f64 {
    offset - eps * log_total(cost, f, g, eps)
}

/// `ln sum_ij exp((f_i + g_j - C_ij) / eps)`.
pub fn log_total(
    cost: ArrayView2<'_, f64>,
    f: ArrayView1<'_, f64>,
    g: ArrayView1<'_, f64>,
    eps: f64,
) -> f64 {
    let inv = 1.0 / eps;
    let mut mx = f64::NEG_INFINITY;
    for (row, fi) in cost.outer_iter().zip(f.iter()) {
        for (c, gj) in row.iter().zip(g.iter()) {
            mx = mx.max((fi + gj - c) * inv);
        }
    }
    let mut s = 0.0;
    for (row, fi) in cost.outer_iter().zip(f.iter()) {
        for (c, gj) in row.iter().zip(g.iter()) {
            s += ((fi + gj - c) * inv - mx).exp();
        }
    }
    mx + s.ln()
}

/// `(1 - omega) prev + omega next`.
pub fn relax(prev: ArrayView1<'_, f64>, next: ArrayView1<'_, f64>, omega: f64) -> Array1<f64> {
    let keep = 1.0 - omega;
    Array1::from_iter(prev.iter().zip(next.iter()).map(|(p, n)| keep * p + omega * n))
}

/// `exp((f_i + g_j + shift - C_ij) / eps)`.
pub fn plan_from_potentials(
    cost: ArrayView2<'_, f64>,
    f: ArrayView1<'_, f64>,
    g: ArrayView1<'_, f64>,
    shift: f64,
    eps: f64,
) -> Array2<f64> {
    let mut out = Array2::zeros(cost.dim());
    for ((i, j), c) in cost.indexed_iter() {
        out[[i, j]] = log_plan_entry(f[i], g[j], shift, *c, eps).exp();
    }
    out
}

#[inline]
pub fn log_plan_entry(f: f64, g: f64, shift: f64, cost: f64, eps: f64) -> f64 {
    (f + g + shift - cost) / eps
}
