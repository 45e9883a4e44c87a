//! Entropic optimal transport between two uniform minibatch measures.
//!
//! Everything runs on dual potentials `f`, `g` (and a mass multiplier for
//! the partial problem), so `exp(-C / eps)` is never formed explicitly.
//! A plan entry is `exp((f_i + g_j + shift - C_ij) / eps)`.

pub(crate) mod kernel;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::{Error, Result};
use kernel::Reduce;

/// Square matrix of nonnegative ground costs between two minibatches.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, m) = values.dim();
        if n != m {
            return Err(Error::DimensionMismatch(format!(
                "cost matrix must be square, got {n}x{m}"
            )));
        }
        if n < 2 {
            return Err(Error::DimensionMismatch(format!(
                "minibatch size must be at least 2, got {n}"
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cost matrix entry {v}")));
        }
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidConfig(format!("negative cost entry {v}")));
        }
        Ok(Self { values })
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// Over-relaxation of the full Sinkhorn updates,
/// `f <- (1 - w) f + w R(g)`, `g <- (1 - w) g + w C(f)`.
///
/// Nearly hard assignments (small eps, well separated costs) make plain
/// Sinkhorn contract at a rate close to 1. `Adaptive` measures the decay
/// rate of the marginal violation every few iterations, infers the plain
/// rate `r` from it (Young's relation for two-block iterations) and uses
/// `w = 2 / (1 + sqrt(1 - r))`. The factors actually used are recorded in
/// [`TransportPlan::omegas`]. The partial solver ignores relaxation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    Adaptive,
    Plain,
}

const PROBE_EVERY: usize = 20;
const RATE_WINDOW: usize = 10;
const MIN_RATE: f64 = 0.6;
const MAX_OMEGA: f64 = 1.995;
const BLOWUP: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the largest marginal violation drops below this.
    pub tolerance: f64,
    pub relaxation: Relaxation,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 2000,
            tolerance: 1e-6,
            relaxation: Relaxation::Adaptive,
        }
    }
}

impl SinkhornConfig {
    pub fn new(epsilon: f64, max_iters: usize, tolerance: f64) -> Result<Self> {
        let cfg = Self {
            epsilon,
            max_iters,
            tolerance,
            relaxation: Relaxation::Adaptive,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_relaxation(self, relaxation: Relaxation) -> Self {
        Self { relaxation, ..self }
    }

    pub fn with_epsilon(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, Self::default().max_iters, Self::default().tolerance)
    }

    /// A configuration that always runs exactly `iters` plain iterations.
    pub fn fixed_iterations(epsilon: f64, iters: usize) -> Result<Self> {
        Ok(Self::new(epsilon, iters, f64::MIN_POSITIVE)?.with_relaxation(Relaxation::Plain))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlanKind {
    Full,
    Partial { mass: f64 },
}

/// A coupling together with the dual potentials that produced it.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    values: Array2<f64>,
    total_mass: f64,
    f: Array1<f64>,
    g: Array1<f64>,
    shift: f64,
    epsilon: f64,
    kind: PlanKind,
    log_diagonal: Array1<f64>,
    pub iterations_used: usize,
    /// Relaxation factor of every iteration; empty when all were plain.
    pub omegas: Vec<f64>,
    /// Marginal violation reached when the solver stopped.
    pub violation: f64,
    pub converged: bool,
}

impl TransportPlan {
    fn from_potentials(
        cost: &CostMatrix,
        f: Array1<f64>,
        g: Array1<f64>,
        shift: f64,
        config: &SinkhornConfig,
        kind: PlanKind,
        iterations_used: usize,
        omegas: Vec<f64>,
    ) -> Result<Self> {
        let values = kernel::plan_from_potentials(cost.view(), f.view(), g.view(), shift, config.epsilon);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transport plan".into()));
        }
        let eps = config.epsilon;
        let log_diagonal = Array1::from_iter(
            (0..cost.size()).map(|i| kernel::log_plan_entry(f[i], g[i], shift, cost.view()[[i, i]], eps)),
        );
        let mut plan = Self {
            total_mass: values.sum(),
            log_diagonal,
            values,
            f,
            g,
            shift,
            epsilon: config.epsilon,
            kind,
            iterations_used,
            omegas,
            violation: 0.0,
            converged: false,
        };
        plan.violation = plan_marginal_violation(&plan);
        plan.converged = plan.violation < config.tolerance;
        Ok(plan)
    }

    /// Wraps an explicit coupling, e.g. a hand-built or oracle plan.
    pub fn from_matrix(values: Array2<f64>, kind: PlanKind) -> Result<Self> {
        let b = values.nrows();
        if b != values.ncols() || b == 0 {
            return Err(Error::DimensionMismatch(format!(
                "plan must be square, got {:?}",
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("plan entries must be finite and >= 0".into()));
        }
        let log_diagonal = values.diag().mapv(f64::ln);
        let mut plan = Self {
            total_mass: values.sum(),
            values,
            f: Array1::zeros(b),
            g: Array1::zeros(b),
            shift: 0.0,
            epsilon: f64::NAN,
            kind,
            log_diagonal,
            iterations_used: 0,
            omegas: Vec::new(),
            violation: 0.0,
            converged: true,
        };
        plan.violation = plan_marginal_violation(&plan);
        Ok(plan)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn kind(&self) -> PlanKind {
        self.kind
    }

    /// Row potential `f` (cost units).
    pub fn row_potential(&self) -> &Array1<f64> {
        &self.f
    }

    pub fn col_potential(&self) -> &Array1<f64> {
        &self.g
    }

    /// Mass multiplier of the partial problem; zero for full plans.
    pub fn mass_shift(&self) -> f64 {
        self.shift
    }

    /// `ln u` with the plan written as `diag(u) K diag(v)`.
    pub fn log_scaling_u(&self) -> Array1<f64> {
        self.f.mapv(|f| (f + self.shift) / self.epsilon)
    }

    pub fn log_scaling_v(&self) -> Array1<f64> {
        self.g.mapv(|g| g / self.epsilon)
    }

    /// `ln pi_ii`, taken from the potentials for solver output so that it
    /// stays finite where `pi_ii` itself underflows.
    pub fn log_diagonal(&self) -> &Array1<f64> {
        &self.log_diagonal
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.values.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.values.sum_axis(Axis(0))
    }

    /// Shannon entropy `-sum pi ln pi`, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .values
            .iter()
            .filter(|v| **v > 0.0)
            .map(|v| v * v.ln())
            .sum::<f64>()
    }
}

/// Ground-truth pairing plan: `mass_per_pair` on the diagonal, zero elsewhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetPlan {
    pub size: usize,
    pub mass_per_pair: f64,
}

impl TargetPlan {
    pub fn full(size: usize) -> Self {
        Self {
            size,
            mass_per_pair: 1.0 / size as f64,
        }
    }

    pub fn partial(size: usize, mass: f64) -> Result<Self> {
        check_mass(mass)?;
        Ok(Self {
            size,
            mass_per_pair: mass / size as f64,
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.mass_per_pair * self.size as f64
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_diag_elem(self.size, self.mass_per_pair)
    }
}

pub(crate) fn check_mass(mass: f64) -> Result<()> {
    if mass > 0.0 && mass <= 1.0 {
        Ok(())
    } else {
        Err(Error::MassOutOfRange(mass))
    }
}

fn check_finite(v: &Array1<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Entropic OT with uniform marginals `1/b`, in log domain.
///
/// Hitting `max_iters` is not an error; the returned plan records its
/// violation and `converged = false`.
pub fn sinkhorn(cost: &CostMatrix, config: &SinkhornConfig) -> Result<TransportPlan> {
    sinkhorn_traced(cost, config, None, None)
}

/// Iterates of a solver run, in the order they were produced.
///
/// Full: with `f_0 = g_0 = 0` and `w_t = omegas[t-1]`,
/// `f_t = (1 - w_t) f_{t-1} + w_t R(g_{t-1})`,
/// `g_t = (1 - w_t) g_{t-1} + w_t C(f_t)`.
/// Partial: additionally `shifts[0]` is the initial multiplier and
/// `f_t = R(g_{t-1}, shifts[t-1])`, `g_t = C(f_t, shifts[t-1])`,
/// `shifts[t] = M(f_t, g_t)`.
#[derive(Debug, Default)]
pub(crate) struct Trace {
    pub fs: Vec<Array1<f64>>,
    pub gs: Vec<Array1<f64>>,
    pub shifts: Vec<f64>,
    pub omegas: Vec<f64>,
}

/// `max_k |w exp((p_k - q_k) / eps) - w|`: marginal violation of a side
/// whose potential is `p` when the exact update would give `q`.
fn side_violation(p: &Array1<f64>, q: &Array1<f64>, eps: f64, w: f64) -> f64 {
    p.iter()
        .zip(q.iter())
        .map(|(a, n)| (((a - n) / eps).exp() * w - w).abs())
        .fold(0.0, f64::max)
}

/// Chooses relaxation factors for an `Adaptive` run from the violation history.
#[derive(Default)]
struct Adapter {
    history: Vec<f64>,
    best: f64,
    omega: f64,
    gave_up: bool,
}

impl Adapter {
    fn new() -> Self {
        Self { best: f64::INFINITY, omega: 1.0, ..Default::default() }
    }

    /// Records the violation after iteration `iters` and returns the
    /// factor for the next one.
    fn observe(&mut self, iters: usize, violation: f64) -> f64 {
        self.history.push(violation);
        self.best = self.best.min(violation);
        if self.gave_up || !(violation <= BLOWUP * self.best) {
            self.gave_up = true;
            return 1.0;
        }
        if iters % PROBE_EVERY == 0 && iters > RATE_WINDOW {
            let before = self.history[iters - 1 - RATE_WINDOW];
            let observed = (violation / before).powf(1.0 / RATE_WINDOW as f64);
            if observed.is_finite() && observed < 1.0 {
                let w = self.omega;
                let mu = (observed + w - 1.0) / (w * observed.sqrt());
                let plain_rate = (mu * mu).min(1.0 - 1e-12);
                if plain_rate > MIN_RATE || w > 1.0 {
                    let best = (2.0 / (1.0 + (1.0 - plain_rate).sqrt())).min(MAX_OMEGA);
                    self.omega = self.omega.max(best);
                }
            }
        }
        self.omega
    }
}

fn relax(prev: &Array1<f64>, next: Array1<f64>, omega: f64) -> Array1<f64> {
    if omega == 1.0 {
        next
    } else {
        kernel::relax(prev.view(), next.view(), omega)
    }
}

/// Full solve; with `replay`, iteration `t` uses factor `replay[t]` (1
/// past its end) instead of adapting.
pub(crate) fn sinkhorn_traced(
    cost: &CostMatrix,
    config: &SinkhornConfig,
    mut trace: Option<&mut Trace>,
    replay: Option<&[f64]>,
) -> Result<TransportPlan> {
    config.validate()?;
    let b = cost.size();
    let eps = config.epsilon;
    let weight = 1.0 / b as f64;
    let offset = eps * weight.ln();
    let c = cost.view();

    let mut adapter = (replay.is_none() && config.relaxation == Relaxation::Adaptive).then(Adapter::new);
    let mut omegas = Vec::new();
    let mut omega = 1.0;
    let mut f = Array1::zeros(b);
    let mut g = Array1::zeros(b);
    let mut next_f = kernel::dual_update(c, g.view(), 0.0, eps, offset, Reduce::Rows, false);
    let mut iters = 0;
    while iters < config.max_iters {
        if let Some(r) = replay {
            omega = r.get(iters).copied().unwrap_or(1.0);
        }
        f = relax(&f, next_f, omega);
        let exact_g = kernel::dual_update(c, f.view(), 0.0, eps, offset, Reduce::Cols, false);
        check_finite(&exact_g, "sinkhorn column potential")?;
        g = relax(&g, exact_g.clone(), omega);
        iters += 1;
        omegas.push(omega);
        if let Some(t) = trace.as_deref_mut() {
            t.fs.push(f.clone());
            t.gs.push(g.clone());
            t.omegas.push(omega);
        }
        // The next row update already contains the current row sums.
        next_f = kernel::dual_update(c, g.view(), 0.0, eps, offset, Reduce::Rows, false);
        check_finite(&next_f, "sinkhorn row potential")?;
        // Plain updates leave the columns exact.
        let col_violation = if omega == 1.0 { 0.0 } else { side_violation(&g, &exact_g, eps, weight) };
        let violation = side_violation(&f, &next_f, eps, weight).max(col_violation);
        if violation < config.tolerance {
            break;
        }
        if let Some(a) = adapter.as_mut() {
            omega = a.observe(iters, violation);
        }
    }
    if omegas.iter().all(|&w| w == 1.0) {
        omegas.clear();
    }
    TransportPlan::from_potentials(cost, f, g, 0.0, config, PlanKind::Full, iters, omegas)
}

/// Entropic partial OT: transport total mass `s` with row and column sums
/// capped at `1/b`, minimizing `<C, pi> - eps H(pi)`.
///
/// Solved by block coordinate ascent on the dual, where each block has a
/// closed form: `f = min(0, .)`, `g = min(0, .)` for the capped marginals
/// and a scalar multiplier for the mass constraint. With `s = 1` every cap
/// binds and the problem is plain [`sinkhorn`], which is used directly.
pub fn partial_sinkhorn(
    cost: &CostMatrix,
    mass: f64,
    config: &SinkhornConfig,
) -> Result<TransportPlan> {
    partial_sinkhorn_traced(cost, mass, config, None, None)
}

pub(crate) fn partial_sinkhorn_traced(
    cost: &CostMatrix,
    mass: f64,
    config: &SinkhornConfig,
    mut trace: Option<&mut Trace>,
    replay: Option<&[f64]>,
) -> Result<TransportPlan> {
    check_mass(mass)?;
    config.validate()?;
    if mass == 1.0 {
        return sinkhorn_traced(cost, config, trace, replay);
    }
    let b = cost.size();
    let eps = config.epsilon;
    let weight = 1.0 / b as f64;
    let offset = eps * weight.ln();
    let mass_offset = eps * mass.ln();
    let c = cost.view();

    let mut f = Array1::zeros(b);
    let mut g = Array1::zeros(b);
    let mut shift = kernel::mass_update(c, f.view(), g.view(), eps, mass_offset);
    if let Some(t) = trace.as_deref_mut() {
        t.shifts.push(shift);
    }
    let mut iters = 0;
    while iters < config.max_iters {
        f = kernel::dual_update(c, g.view(), shift, eps, offset, Reduce::Rows, true);
        g = kernel::dual_update(c, f.view(), shift, eps, offset, Reduce::Cols, true);
        shift = kernel::mass_update(c, f.view(), g.view(), eps, mass_offset);
        iters += 1;
        check_finite(&f, "partial row potential")?;
        check_finite(&g, "partial column potential")?;
        if !shift.is_finite() {
            return Err(Error::NonFinite("partial mass multiplier".into()));
        }
        if let Some(t) = trace.as_deref_mut() {
            t.fs.push(f.clone());
            t.gs.push(g.clone());
            t.shifts.push(shift);
        }
        if partial_kkt_residual(c, &f, &g, shift, eps, weight) < config.tolerance {
            break;
        }
    }
    TransportPlan::from_potentials(
        cost,
        f,
        g,
        shift,
        config,
        PlanKind::Partial { mass },
        iters,
        Vec::new(),
    )
}

/// Marginal residual including complementary slackness: a row whose cap is
/// active (`f_i < 0`) must sum to exactly `1/b`.
fn partial_kkt_residual(
    c: ArrayView2<'_, f64>,
    f: &Array1<f64>,
    g: &Array1<f64>,
    shift: f64,
    eps: f64,
    weight: f64,
) -> f64 {
    let plan = kernel::plan_from_potentials(c, f.view(), g.view(), shift, eps);
    let rows = plan.sum_axis(Axis(1));
    let cols = plan.sum_axis(Axis(0));
    let side = |sums: &Array1<f64>, pot: &Array1<f64>| {
        sums.iter()
            .zip(pot.iter())
            .map(|(s, p)| {
                if *p < 0.0 {
                    (s - weight).abs()
                } else {
                    (s - weight).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    };
    side(&rows, f).max(side(&cols, g))
}

/// Largest deviation of the plan's marginals from what its kind requires.
///
/// Full plans: `max |marginal - 1/b|`. Partial plans count only cap
/// excess on rows and columns, plus `|total - s|`.
pub fn plan_marginal_violation(plan: &TransportPlan) -> f64 {
    let w = 1.0 / plan.size() as f64;
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    let all = rows.iter().chain(cols.iter());
    match plan.kind {
        PlanKind::Full => all.map(|s| (s - w).abs()).fold(0.0, f64::max),
        PlanKind::Partial { mass } => all
            .map(|s| (s - w).max(0.0))
            .fold((plan.total_mass - mass).abs(), f64::max),
    }
}
