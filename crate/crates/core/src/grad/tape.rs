//! A small reverse-mode tape over dense matrices.
//!
//! Every value is an `Array2<f64>`; vectors are stored as `n x 1` columns and
//! scalars as `1 x 1`. Ops are appended in evaluation order, so the node
//! index is a topological order and [`Tape::backward`] is a single reverse
//! sweep.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::metric::{self, NORM_FLOOR};
use crate::ot::kernel::{self, Reduce};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `x W^T + 1 b^T`, with `b` stored as `1 x out`.
    Affine { x: Var, w: Var, b: Var },
    Tanh(Var),
    Relu(Var),
    /// `clamp(scale * x + shift, lo, hi)`.
    ScaleShift { x: Var, scale: f64, lo: f64, hi: f64 },
    SqDistances { a: Var, b: Var, m: Option<Var> },
    /// `sqrt(max(x, floor))`; the derivative is zero where `x <= floor`.
    Sqrt { x: Var, floor: f64 },
    CosineSimilarity { a: Var, b: Var },
    DualUpdate {
        cost: Var,
        potential: Var,
        shift: Option<Var>,
        axis: Reduce,
        eps: f64,
        offset: f64,
        clip: bool,
    },
    MassUpdate { cost: Var, f: Var, g: Var, eps: f64 },
    /// `(1 - omega) prev + omega next`.
    Relax { prev: Var, next: Var, omega: f64 },
    DiagLogPlan { cost: Var, f: Var, g: Var, shift: Option<Var>, eps: f64 },
    DiagKl { log_diag: Var, weight: f64, log_floor: f64 },
    InfoNce { sim: Var, tau: f64 },
    HardestNegativeHinge { sim: Var, margin: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adj: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.adj[v.0].as_ref()
    }

    /// The adjoint of `v`, or zeros if nothing downstream depended on it.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        self.adj[v.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

fn col(v: Array1<f64>) -> Array2<f64> {
    let n = v.len();
    v.into_shape_with_order((n, 1)).expect("column reshape")
}

fn scalar(x: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn vector(&self, v: Var) -> ArrayView1<'_, f64> {
        self.nodes[v.0].value.column(0)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_vector(&mut self, value: Array1<f64>) -> Var {
        self.push(col(value), Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.push(scalar(value), Op::Leaf)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ncols() != wv.ncols() || bv.dim() != (1, wv.nrows()) {
            return Err(Error::DimensionMismatch(format!(
                "affine: input {:?}, weight {:?}, bias {:?}",
                xv.dim(),
                wv.dim(),
                bv.dim()
            )));
        }
        let out = xv.dot(&wv.t()) + bv;
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64, lo: f64, hi: f64) -> Var {
        let out = self.value(x).mapv(|v| (scale * v + shift).clamp(lo, hi));
        self.push(out, Op::ScaleShift { x, scale, lo, hi })
    }

    /// Squared (Mahalanobis if `m` is given) distances between all row pairs.
    /// Fails with [`Error::NonPsd`] if a quadratic form is below `-1e-6`.
    pub fn sq_distances(&mut self, a: Var, b: Var, m: Option<Var>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "embedding dims {} and {}",
                av.ncols(),
                bv.ncols()
            )));
        }
        let mv = match m {
            Some(m) => {
                let mv = self.value(m);
                if mv.dim() != (av.ncols(), av.ncols()) {
                    return Err(Error::DimensionMismatch(format!(
                        "interaction matrix {:?} for dim {}",
                        mv.dim(),
                        av.ncols()
                    )));
                }
                Some(mv.view())
            }
            None => None,
        };
        let q = metric::squared_distances(av.view(), bv.view(), mv);
        if mv.is_some() {
            if let Some(bad) = q.iter().find(|v| **v < -1e-6) {
                return Err(Error::NonPsd(*bad));
            }
        }
        Ok(self.push(q, Op::SqDistances { a, b, m }))
    }

    pub fn sqrt(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).mapv(|v| v.max(floor).sqrt());
        self.push(out, Op::Sqrt { x, floor })
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "embedding dims {} and {}",
                av.ncols(),
                bv.ncols()
            )));
        }
        let s = metric::cosine_similarities(av.view(), bv.view());
        Ok(self.push(s, Op::CosineSimilarity { a, b }))
    }

    /// Records a dual potential update; see [`kernel::dual_update`].
    #[allow(clippy::too_many_arguments)]
    pub fn dual_update(
        &mut self,
        cost: Var,
        potential: Var,
        shift: Option<Var>,
        axis: Reduce,
        eps: f64,
        offset: f64,
        clip: bool,
    ) -> Var {
        let s = shift.map_or(0.0, |s| self.scalar(s));
        let out = kernel::dual_update(
            self.value(cost).view(),
            self.vector(potential),
            s,
            eps,
            offset,
            axis,
            clip,
        );
        self.dual_update_with(cost, potential, shift, axis, eps, offset, clip, out)
    }

    /// As [`Tape::dual_update`] but with a value already computed by the
    /// solver, so the forward pass is not repeated.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn dual_update_with(
        &mut self,
        cost: Var,
        potential: Var,
        shift: Option<Var>,
        axis: Reduce,
        eps: f64,
        offset: f64,
        clip: bool,
        value: Array1<f64>,
    ) -> Var {
        let op = Op::DualUpdate { cost, potential, shift, axis, eps, offset, clip };
        self.push(col(value), op)
    }

    pub fn mass_update(&mut self, cost: Var, f: Var, g: Var, eps: f64, offset: f64) -> Var {
        let v = kernel::mass_update(self.value(cost).view(), self.vector(f), self.vector(g), eps, offset);
        self.mass_update_with(cost, f, g, eps, v)
    }

    pub(crate) fn mass_update_with(&mut self, cost: Var, f: Var, g: Var, eps: f64, value: f64) -> Var {
        self.push(scalar(value), Op::MassUpdate { cost, f, g, eps })
    }

    /// Over-relaxed potential; see [`kernel::relax`].
    pub fn relax(&mut self, prev: Var, next: Var, omega: f64) -> Var {
        let v = kernel::relax(self.vector(prev), self.vector(next), omega);
        self.relax_with(prev, next, omega, v)
    }

    pub(crate) fn relax_with(&mut self, prev: Var, next: Var, omega: f64, value: Array1<f64>) -> Var {
        self.push(col(value), Op::Relax { prev, next, omega })
    }

    /// `ln pi_ii` for the plan defined by the potentials.
    pub fn diag_log_plan(&mut self, cost: Var, f: Var, g: Var, shift: Option<Var>, eps: f64) -> Var {
        let c = self.value(cost);
        let (fv, gv) = (self.vector(f), self.vector(g));
        let s = shift.map_or(0.0, |s| self.scalar(s));
        let out = Array1::from_iter(
            (0..c.nrows()).map(|i| kernel::log_plan_entry(fv[i], gv[i], s, c[[i, i]], eps)),
        );
        self.push(col(out), Op::DiagLogPlan { cost, f, g, shift, eps })
    }

    /// `sum_i w (ln w - max(l_i, log_floor))`: KL from a diagonal target
    /// with mass `w` per pair.
    pub fn diag_kl(&mut self, log_diag: Var, weight: f64, log_floor: f64) -> Var {
        let lw = weight.ln();
        let v: f64 = self
            .vector(log_diag)
            .iter()
            .map(|l| weight * (lw - l.max(log_floor)))
            .sum();
        self.push(scalar(v), Op::DiagKl { log_diag, weight, log_floor })
    }

    /// Symmetric InfoNCE over a similarity matrix whose diagonal holds the
    /// positives: `(1/b) sum_i (CE_row_i + CE_col_i)` on logits `S / tau`.
    pub fn info_nce(&mut self, sim: Var, tau: f64) -> Var {
        let s = self.value(sim);
        let v = info_nce_value(s.view(), tau);
        self.push(scalar(v), Op::InfoNce { sim, tau })
    }

    /// `(1/b) sum_i [max(0, m - S_ii + max_{j!=i} S_ij) + max(0, m - S_ii + max_{j!=i} S_ji)]`.
    pub fn hardest_negative_hinge(&mut self, sim: Var, margin: f64) -> Var {
        let s = self.value(sim);
        let (v, _) = hinge_terms(s.view(), margin);
        self.push(scalar(v), Op::HardestNegativeHinge { sim, margin })
    }

    /// Reverse sweep from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; n];
        adj[out.0] = Some(Array2::ones(self.nodes[out.0].value.dim()));
        for k in (0..=out.0).rev() {
            let Some(g) = adj[k].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("adjoint of node {k}")));
            }
            self.propagate(k, &g, &mut adj);
            adj[k] = Some(g);
        }
        Ok(Gradients {
            adj,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        })
    }

    fn propagate(&self, k: usize, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[k];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Array2<f64>| match &mut adj[v.0] {
            Some(a) => *a += &d,
            slot @ None => *slot = Some(d),
        };
        match node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                acc(x, g.dot(val(w)));
                acc(w, g.t().dot(val(x)));
                acc(b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Tanh(x) => {
                acc(x, g * &node.value.mapv(|t| 1.0 - t * t));
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                d.zip_mut_with(val(x), |d, x| {
                    if *x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(x, d);
            }
            Op::ScaleShift { x, scale, lo, hi } => {
                let mut d = g * scale;
                d.zip_mut_with(&node.value, |d, y| {
                    if *y <= lo || *y >= hi {
                        *d = 0.0
                    }
                });
                acc(x, d);
            }
            Op::SqDistances { a, b, m } => {
                let (av, bv) = (val(a), val(b));
                let rs = g.sum_axis(Axis(1));
                let cs = g.sum_axis(Axis(0));
                // Row-wise sums sum_j G_ij (a_i - b_j) and sum_i G_ij (b_j - a_i).
                let da = av * &rs.view().insert_axis(Axis(1)) - g.dot(bv);
                let db = bv * &cs.view().insert_axis(Axis(1)) - g.t().dot(av);
                match m {
                    None => {
                        acc(a, da * 2.0);
                        acc(b, db * 2.0);
                    }
                    Some(m) => {
                        let mv = val(m);
                        let ms = mv + &mv.t();
                        acc(a, da.dot(&ms.t()));
                        acc(b, db.dot(&ms.t()));
                        // sum_ij G_ij (a_i - b_j)(a_i - b_j)^T
                        let ga = av * &rs.view().insert_axis(Axis(1));
                        let gb = bv * &cs.view().insert_axis(Axis(1));
                        let cross = av.t().dot(&g.dot(bv));
                        let dm = av.t().dot(&ga) + bv.t().dot(&gb) - &cross - cross.t();
                        acc(m, dm);
                    }
                }
            }
            Op::Sqrt { x, floor } => {
                let mut d = g.clone();
                d.zip_mut_with(val(x), |d, q| {
                    *d = if *q > floor { *d / (2.0 * q.sqrt()) } else { 0.0 };
                });
                acc(x, d);
            }
            Op::CosineSimilarity { a, b } => {
                let (av, bv) = (val(a), val(b));
                let s = &node.value;
                let na = metric::row_norms(av.view());
                let nb = metric::row_norms(bv.view());
                let ah = unit_rows(av.view(), &na);
                let bh = unit_rows(bv.view(), &nb);
                let gs = (g * s).sum_axis(Axis(1));
                let gts = (g * s).sum_axis(Axis(0));
                let mut da = g.dot(&bh) - &ah * &gs.view().insert_axis(Axis(1));
                let mut db = g.t().dot(&ah) - &bh * &gts.view().insert_axis(Axis(1));
                for (mut r, n) in da.outer_iter_mut().zip(na.iter()) {
                    r /= *n;
                }
                for (mut r, n) in db.outer_iter_mut().zip(nb.iter()) {
                    r /= *n;
                }
                acc(a, da);
                acc(b, db);
            }
            Op::DualUpdate { cost, potential, shift, axis, eps, offset, clip } => {
                let c = val(cost);
                let p = val(potential).column(0);
                let sh = shift.map_or(0.0, |s| val(s)[[0, 0]]);
                let out = node.value.column(0);
                let inv = 1.0 / eps;
                let mut dc = Array2::<f64>::zeros(c.dim());
                let mut dp = Array1::<f64>::zeros(p.len());
                let mut dshift = 0.0;
                // Softmax weights rebuilt from the stored output:
                // w = exp((p + shift - C + out - offset) / eps).
                let active = |k: usize| !clip || out[k] < 0.0;
                for ((i, j), cij) in c.indexed_iter() {
                    let (k, l) = match axis {
                        Reduce::Rows => (i, j),
                        Reduce::Cols => (j, i),
                    };
                    if !active(k) {
                        continue;
                    }
                    let w = ((p[l] + sh - cij + out[k] - offset) * inv).exp();
                    let gw = g[[k, 0]] * w;
                    dc[[i, j]] = gw;
                    dp[l] -= gw;
                }
                for k in 0..out.len() {
                    if active(k) {
                        dshift -= g[[k, 0]];
                    }
                }
                acc(cost, dc);
                acc(potential, col(dp));
                if let Some(s) = shift {
                    acc(s, scalar(dshift));
                }
            }
            Op::Relax { prev, next, omega } => {
                acc(prev, g * (1.0 - omega));
                acc(next, g * omega);
            }
            Op::MassUpdate { cost, f, g: gv, eps } => {
                let c = val(cost);
                let (fv, gvv) = (val(f).column(0), val(gv).column(0));
                let lt = kernel::log_total(c.view(), fv, gvv, eps);
                let w = kernel::plan_from_potentials(c.view(), fv, gvv, -eps * lt, eps);
                let gl = g[[0, 0]];
                acc(f, col(w.sum_axis(Axis(1)) * -gl));
                acc(gv, col(w.sum_axis(Axis(0)) * -gl));
                acc(cost, w * gl);
            }
            Op::DiagLogPlan { cost, f, g: gv, shift, eps } => {
                let gd = g.column(0).mapv(|v| v / eps);
                let b = gd.len();
                let mut dc = Array2::zeros((b, b));
                for i in 0..b {
                    dc[[i, i]] = -gd[i];
                }
                acc(cost, dc);
                acc(f, col(gd.clone()));
                acc(gv, col(gd.clone()));
                if let Some(s) = shift {
                    acc(s, scalar(gd.sum()));
                }
            }
            Op::DiagKl { log_diag, weight, log_floor } => {
                let gl = g[[0, 0]];
                let d = val(log_diag).mapv(|l| if l > log_floor { -weight * gl } else { 0.0 });
                acc(log_diag, d);
            }
            Op::InfoNce { sim, tau } => {
                let s = val(sim);
                let b = s.nrows() as f64;
                let (r, c) = softmaxes(s.view(), tau);
                let mut d = r + c;
                for i in 0..s.nrows() {
                    d[[i, i]] -= 2.0;
                }
                acc(sim, d * (g[[0, 0]] / (b * tau)));
            }
            Op::HardestNegativeHinge { sim, margin } => {
                let s = val(sim);
                let (_, d) = hinge_terms(s.view(), margin);
                acc(sim, d * g[[0, 0]]);
            }
        }
    }
}

fn unit_rows(a: ArrayView2<'_, f64>, norms: &[f64]) -> Array2<f64> {
    let mut out = a.to_owned();
    for (mut r, n) in out.outer_iter_mut().zip(norms.iter()) {
        r /= n.max(NORM_FLOOR);
    }
    out
}

/// Row-wise and column-wise softmax of `S / tau`.
fn softmaxes(s: ArrayView2<'_, f64>, tau: f64) -> (Array2<f64>, Array2<f64>) {
    let mut r = s.mapv(|v| v / tau);
    let mut c = r.clone();
    for mut row in r.outer_iter_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row /= z;
    }
    for mut column in c.axis_iter_mut(Axis(1)) {
        let mx = column.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        column.mapv_inplace(|v| (v - mx).exp());
        let z = column.sum();
        column /= z;
    }
    (r, c)
}

fn lse(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = it.clone().fold(f64::NEG_INFINITY, f64::max);
    mx + it.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub(crate) fn info_nce_value(s: ArrayView2<'_, f64>, tau: f64) -> f64 {
    let b = s.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let row = lse((0..b).map(|j| s[[i, j]] / tau));
        let col = lse((0..b).map(|j| s[[j, i]] / tau));
        total += row + col - 2.0 * s[[i, i]] / tau;
    }
    total / b as f64
}

/// Hinge value and its (sub)gradient with respect to `S`. The hardest
/// negative is the first maximizer.
pub(crate) fn hinge_terms(s: ArrayView2<'_, f64>, margin: f64) -> (f64, Array2<f64>) {
    let b = s.nrows();
    let mut d = Array2::zeros((b, b));
    let mut total = 0.0;
    let inv = 1.0 / b as f64;
    for i in 0..b {
        for transpose in [false, true] {
            let at = |j: usize| if transpose { s[[j, i]] } else { s[[i, j]] };
            let hardest = (0..b)
                .filter(|&j| j != i)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(k) if at(k) >= at(j) => Some(k),
                    _ => Some(j),
                });
            let Some(j) = hardest else { continue };
            let h = margin - s[[i, i]] + at(j);
            if h > 0.0 {
                total += h;
                d[[i, i]] -= inv;
                if transpose {
                    d[[j, i]] += inv;
                } else {
                    d[[i, j]] += inv;
                }
            }
        }
    }
    (total * inv, d)
}
