//! Exact gradients of the batch losses with respect to encoder parameters
//! and the interaction matrix.
//!
//! Sinkhorn is differentiated by unrolling: the solver runs once, its
//! iterates are replayed onto the [`Tape`] as recorded nodes, and the
//! reverse sweep walks back through every iteration. The gradient is that
//! of the loss computed with exactly `iterations_used` solver steps under
//! the same relaxation schedule, which is what [`Objective::frozen`]
//! evaluates for finite differences.

pub mod tape;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::loss::{LossConfig, LossKind, PLAN_FLOOR};
use crate::metric::{EmbeddingSet, GroundMetric, MetricKind, SQRT_FLOOR};
use crate::model::{Activation, EncoderPair, Mlp};
use crate::ot::kernel::Reduce;
use crate::ot::{self, CostMatrix, SinkhornConfig, Trace};
use crate::{Error, Result};

pub use tape::{Gradients, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients for every trainable parameter, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub theta: Vec<LayerGrad>,
    pub phi: Vec<LayerGrad>,
    /// Present only for the Mahalanobis metric.
    pub m: Option<Array2<f64>>,
}

impl GradBundle {
    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// Layout matches [`Params::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.theta.iter().chain(self.phi.iter()) {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        if let Some(m) = &self.m {
            out.extend(m.iter());
        }
        out
    }

    /// `self += other * scale`, for averaging over several minibatches.
    pub fn add_scaled(&mut self, other: &GradBundle, scale: f64) {
        for (a, b) in self.theta.iter_mut().chain(self.phi.iter_mut()).zip(other.theta.iter().chain(other.phi.iter())) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
        if let (Some(a), Some(b)) = (&mut self.m, &other.m) {
            a.scaled_add(scale, b);
        }
    }
}

/// Gradients of a loss with respect to the embeddings themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrads {
    pub za: Array2<f64>,
    pub zb: Array2<f64>,
    pub m: Option<Array2<f64>>,
}

/// Encoders plus the raw interaction matrix, which need not be PSD or even
/// symmetric here: finite differences perturb single entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub encoders: EncoderPair,
    pub m: Option<Array2<f64>>,
}

impl Params {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.encoders.theta.layers().iter().chain(self.encoders.phi.layers()) {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        if let Some(m) = &self.m {
            out.extend(m.iter());
        }
        out
    }

    /// Inverse of [`Params::flatten`], keeping shapes and activations.
    pub fn with_flat(&self, flat: &[f64]) -> Params {
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        {
            let (theta, phi) = (&mut out.encoders.theta, &mut out.encoders.phi);
            for l in theta.layers_mut().iter_mut().chain(phi.layers_mut().iter_mut()) {
                l.weight.iter_mut().for_each(|v| *v = it.next().expect("flat length"));
                l.bias.iter_mut().for_each(|v| *v = it.next().expect("flat length"));
            }
        }
        if let Some(m) = &mut out.m {
            m.iter_mut().for_each(|v| *v = it.next().expect("flat length"));
        }
        assert!(it.next().is_none(), "flat vector longer than parameters");
        out
    }
}

struct RecordedMlp {
    layers: Vec<(Var, Var)>,
    out: Var,
}

fn record_mlp(tape: &mut Tape, mlp: &Mlp, input: ArrayView2<'_, f64>) -> Result<RecordedMlp> {
    if input.ncols() != mlp.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "encoder expects {} input features, got {}",
            mlp.input_dim(),
            input.ncols()
        )));
    }
    let mut h = tape.leaf(input.to_owned());
    let mut layers = Vec::with_capacity(mlp.layers().len());
    for l in mlp.layers() {
        let w = tape.leaf(l.weight.clone());
        let b = tape.leaf(l.bias.clone().insert_axis(Axis(0)));
        h = tape.affine(h, w, b)?;
        h = match l.activation {
            Activation::Identity => h,
            Activation::Tanh => tape.tanh(h),
            Activation::Relu => tape.relu(h),
        };
        layers.push((w, b));
    }
    Ok(RecordedMlp { layers, out: h })
}

fn layer_grads(grads: &Gradients, rec: &RecordedMlp) -> Vec<LayerGrad> {
    rec.layers
        .iter()
        .map(|&(w, b)| LayerGrad {
            weight: grads.wrt(w),
            bias: grads.wrt(b).remove_axis(Axis(0)),
        })
        .collect()
}

/// Records the ground cost between the rows of `za` and `zb`.
pub fn record_cost(tape: &mut Tape, za: Var, zb: Var, metric: MetricKind, m: Option<Var>) -> Result<Var> {
    match (metric, m) {
        (MetricKind::Euclidean, _) => {
            let q = tape.sq_distances(za, zb, None)?;
            Ok(tape.sqrt(q, 0.0))
        }
        (MetricKind::Cosine, _) => {
            let s = tape.cosine_similarity(za, zb)?;
            Ok(tape.scale_shift(s, -1.0, 1.0, 0.0, 2.0))
        }
        (MetricKind::Mahalanobis, Some(m)) => {
            let q = tape.sq_distances(za, zb, Some(m))?;
            Ok(tape.sqrt(q, SQRT_FLOOR))
        }
        (MetricKind::Mahalanobis, None) => Err(Error::InvalidConfig(
            "Mahalanobis metric needs an interaction matrix".into(),
        )),
    }
}

/// Solves on the recorded cost and replays the iterates onto the tape.
/// Returns the KL loss node and what the solver ran. `relaxation`, if
/// given, pins the per-iteration relaxation factors (see [`SolveStats`]).
pub fn record_transport_kl(
    tape: &mut Tape,
    cost: Var,
    config: &SinkhornConfig,
    mass: f64,
    relaxation: Option<&[f64]>,
) -> Result<(Var, SolveStats)> {
    let cm = CostMatrix::new(tape.value(cost).clone())?;
    let b = cm.size();
    let eps = config.epsilon;
    let weight = 1.0 / b as f64;
    let offset = eps * weight.ln();
    let mut trace = Trace::default();
    let plan = ot::partial_sinkhorn_traced(&cm, mass, config, Some(&mut trace), relaxation)?;
    let partial = mass < 1.0;
    let zeros = || Array1::<f64>::zeros(b);

    let (f, g, shift) = if partial {
        let f0 = tape.leaf_vector(zeros());
        let g0 = tape.leaf_vector(zeros());
        let mut shift = tape.mass_update_with(cost, f0, g0, eps, trace.shifts[0]);
        let mut g = g0;
        let mut f = f0;
        for (t, (fv, gv)) in trace.fs.into_iter().zip(trace.gs).enumerate() {
            f = tape.dual_update_with(cost, g, Some(shift), Reduce::Rows, eps, offset, true, fv);
            g = tape.dual_update_with(cost, f, Some(shift), Reduce::Cols, eps, offset, true, gv);
            shift = tape.mass_update_with(cost, f, g, eps, trace.shifts[t + 1]);
        }
        (f, g, Some(shift))
    } else {
        let mut g = tape.leaf_vector(zeros());
        let mut f = g;
        for ((fv, gv), omega) in trace.fs.into_iter().zip(trace.gs).zip(trace.omegas) {
            if omega == 1.0 {
                f = tape.dual_update_with(cost, g, None, Reduce::Rows, eps, offset, false, fv);
                g = tape.dual_update_with(cost, f, None, Reduce::Cols, eps, offset, false, gv);
            } else {
                let r = tape.dual_update(cost, g, None, Reduce::Rows, eps, offset, false);
                f = tape.relax_with(f, r, omega, fv);
                let c = tape.dual_update(cost, f, None, Reduce::Cols, eps, offset, false);
                g = tape.relax_with(g, c, omega, gv);
            }
        }
        (f, g, None)
    };
    let log_diag = tape.diag_log_plan(cost, f, g, shift, eps);
    let loss = tape.diag_kl(log_diag, mass / b as f64, PLAN_FLOOR.ln());
    Ok((loss, SolveStats { iterations: plan.iterations_used, omegas: plan.omegas }))
}

/// Records the configured loss on two embedding nodes.
pub fn record_loss(
    tape: &mut Tape,
    za: Var,
    zb: Var,
    metric: MetricKind,
    m: Option<Var>,
    loss: &LossConfig,
    sinkhorn: &SinkhornConfig,
    relaxation: Option<&[f64]>,
) -> Result<(Var, SolveStats)> {
    loss.validate()?;
    let (ra, rb) = (tape.value(za).dim(), tape.value(zb).dim());
    if ra != rb {
        return Err(Error::DimensionMismatch(format!("batches of shape {ra:?} and {rb:?}")));
    }
    match loss.kind {
        LossKind::Mltm | LossKind::MltmPot => {
            let cost = record_cost(tape, za, zb, metric, m)?;
            let config = SinkhornConfig { epsilon: loss.epsilon, ..*sinkhorn };
            record_transport_kl(tape, cost, &config, loss.effective_mass(), relaxation)
        }
        LossKind::Contrastive => {
            let s = tape.cosine_similarity(za, zb)?;
            Ok((tape.info_nce(s, loss.temperature), SolveStats::default()))
        }
        LossKind::Triplet => {
            let s = tape.cosine_similarity(za, zb)?;
            Ok((tape.hardest_negative_hinge(s, loss.margin), SolveStats::default()))
        }
    }
}

/// m-LTM loss on fixed embeddings (`mass < 1` selects the partial variant)
/// and its gradients with respect to both embedding sets and `M`.
pub fn backward_mltm(
    za: &EmbeddingSet,
    zb: &EmbeddingSet,
    metric: &GroundMetric,
    config: &SinkhornConfig,
    mass: f64,
) -> Result<(f64, EmbeddingGrads)> {
    ot::check_mass(mass)?;
    let mut tape = Tape::new();
    let a = tape.leaf(za.view().to_owned());
    let b = tape.leaf(zb.view().to_owned());
    let m = metric.interaction().map(|m| tape.leaf(m.view().to_owned()));
    let cost = record_cost(&mut tape, a, b, metric.kind(), m)?;
    let (loss, _) = record_transport_kl(&mut tape, cost, config, mass, None)?;
    let grads = tape.backward(loss)?;
    Ok((
        tape.scalar(loss),
        EmbeddingGrads {
            za: grads.wrt(a),
            zb: grads.wrt(b),
            m: m.map(|m| grads.wrt(m)),
        },
    ))
}

/// What the transport solve behind a loss ran: its iteration count and
/// relaxation factors (empty when every iteration was plain).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub omegas: Vec<f64>,
}

/// Loss value, gradients and solver iterations for one minibatch.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub grads: GradBundle,
    pub iterations: usize,
    pub omegas: Vec<f64>,
}

/// One minibatch objective: inputs of both modalities and the loss setup.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView2<'a, f64>,
    pub metric: MetricKind,
    pub loss: LossConfig,
    pub sinkhorn: SinkhornConfig,
}

impl<'a> Objective<'a> {
    fn record(
        &self,
        tape: &mut Tape,
        params: &Params,
        relaxation: Option<&[f64]>,
    ) -> Result<(Var, SolveStats, RecordedMlp, RecordedMlp, Option<Var>)> {
        let ra = record_mlp(tape, &params.encoders.theta, self.x)?;
        let rb = record_mlp(tape, &params.encoders.phi, self.y)?;
        let m = match (self.metric, &params.m) {
            (MetricKind::Mahalanobis, Some(m)) => Some(tape.leaf(m.clone())),
            _ => None,
        };
        let (loss, stats) = record_loss(tape, ra.out, rb.out, self.metric, m, &self.loss, &self.sinkhorn, relaxation)?;
        Ok((loss, stats, ra, rb, m))
    }

    pub fn value(&self, params: &Params) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, ..) = self.record(&mut tape, params, None)?;
        Ok(tape.scalar(loss))
    }

    pub fn evaluate(&self, params: &Params) -> Result<Evaluation> {
        let mut tape = Tape::new();
        let (loss, stats, ra, rb, m) = self.record(&mut tape, params, None)?;
        let grads = tape.backward(loss)?;
        let bundle = GradBundle {
            theta: layer_grads(&grads, &ra),
            phi: layer_grads(&grads, &rb),
            m: m.map(|m| grads.wrt(m)),
        };
        if !bundle.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(Evaluation {
            loss: tape.scalar(loss),
            grads: bundle,
            iterations: stats.iterations,
            omegas: stats.omegas,
        })
    }

    /// The objective as a function of the parameters with the solver
    /// pinned to what it ran in `eval`: the same iteration count and the
    /// same relaxation factors. Its exact gradient is the tape gradient.
    pub fn frozen<'e>(&self, eval: &'e Evaluation) -> Result<FrozenObjective<'a, 'e>> {
        let eps = match self.loss.kind {
            LossKind::Mltm | LossKind::MltmPot => self.loss.epsilon,
            _ => self.sinkhorn.epsilon,
        };
        Ok(FrozenObjective {
            objective: Objective {
                sinkhorn: SinkhornConfig::fixed_iterations(eps, eval.iterations.max(1))?,
                ..*self
            },
            omegas: &eval.omegas,
        })
    }
}

/// See [`Objective::frozen`].
#[derive(Clone, Copy, Debug)]
pub struct FrozenObjective<'a, 'e> {
    pub objective: Objective<'a>,
    pub omegas: &'e [f64],
}

impl FrozenObjective<'_, '_> {
    pub fn value(&self, params: &Params) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, ..) = self.objective.record(&mut tape, params, Some(self.omegas))?;
        Ok(tape.scalar(loss))
    }
}

/// Largest relative error between `gradient` and central differences of `f`
/// over `direction_count` coordinates drawn without replacement (all of
/// them if there are fewer). Relative error is
/// `|g - g_fd| / max(|g_fd|, 1e-8)`.
pub fn finite_diff_check<F>(
    point: &[f64],
    gradient: &[f64],
    mut f: F,
    direction_count: usize,
    h: f64,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if point.len() != gradient.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters, {} gradient entries",
            point.len(),
            gradient.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = index::sample(&mut rng, point.len(), direction_count.min(point.len()));
    let mut worst: f64 = 0.0;
    let mut p = point.to_vec();
    for k in coords.iter() {
        let x = p[k];
        p[k] = x + h;
        let up = f(&p)?;
        p[k] = x - h;
        let down = f(&p)?;
        p[k] = x;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((gradient[k] - fd).abs() / fd.abs().max(1e-8));
    }
    Ok(worst)
}

/// Gradient check of a full minibatch objective at `params`. The tape
/// gradient is compared against finite differences of the objective frozen
/// at the forward pass's iteration count.
pub fn check_objective(
    objective: &Objective<'_>,
    params: &Params,
    direction_count: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let eval = objective.evaluate(params)?;
    let frozen = objective.frozen(&eval)?;
    let flat = params.flatten();
    finite_diff_check(
        &flat,
        &eval.grads.flatten(),
        |p| frozen.value(&params.with_flat(p)),
        direction_count,
        h,
        seed,
    )
}
