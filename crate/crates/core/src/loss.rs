//! Batch losses over paired embeddings: row `i` of `za` is matched with row
//! `i` of `zb`.

use crate::grad::tape;
use crate::metric::{cosine_similarities, pairwise_cost, EmbeddingSet, GroundMetric};
use crate::ot::{self, partial_sinkhorn, sinkhorn, SinkhornConfig, TargetPlan, TransportPlan};
use crate::{Error, Result};

/// Floor under `pi_ii` inside the logarithm.
pub const PLAN_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mltm,
    MltmPot,
    Contrastive,
    Triplet,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mltm => "mltm",
            LossKind::MltmPot => "mltm-pot",
            LossKind::Contrastive => "contrastive",
            LossKind::Triplet => "triplet",
        }
    }

    /// Whether the loss solves a transport problem on the ground cost.
    pub fn uses_transport(self) -> bool {
        matches!(self, LossKind::Mltm | LossKind::MltmPot)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mltm" => Ok(LossKind::Mltm),
            "mltm-pot" => Ok(LossKind::MltmPot),
            "contrastive" => Ok(LossKind::Contrastive),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}

/// Only the fields used by `kind` are validated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub epsilon: f64,
    pub mass: f64,
    pub temperature: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Mltm,
            epsilon: 0.05,
            mass: 1.0,
            temperature: 0.07,
            margin: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidConfig(format!("{what} must be > 0, got {v}")));
        // Every field is checked, used or not, so a config stays valid when
        // only its loss kind changes.
        for (what, v) in [("epsilon", self.epsilon), ("temperature", self.temperature), ("margin", self.margin)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(what, v);
            }
        }
        ot::check_mass(self.mass)?;
        Ok(())
    }

    /// Transported mass actually used: `mass` for the partial loss, 1 otherwise.
    pub fn effective_mass(&self) -> f64 {
        match self.kind {
            LossKind::MltmPot => self.mass,
            _ => 1.0,
        }
    }
}

/// `KL(target || plan)` over the target's diagonal support.
pub fn kl_divergence(target: &TargetPlan, plan: &TransportPlan) -> Result<f64> {
    if target.size != plan.size() {
        return Err(Error::DimensionMismatch(format!(
            "target of size {}, plan of size {}",
            target.size,
            plan.size()
        )));
    }
    let w = target.mass_per_pair;
    let floor = PLAN_FLOOR.ln();
    let kl: f64 = plan
        .log_diagonal()
        .iter()
        .map(|l| w * (w.ln() - l.max(floor)))
        .sum();
    // Nonnegative by Jensen (the diagonal holds at most the target mass);
    // an exact match can still round to -1e-16.
    Ok(kl.max(0.0))
}

fn check_batch(za: &EmbeddingSet, zb: &EmbeddingSet) -> Result<()> {
    if za.len() != zb.len() || za.dim() != zb.dim() {
        return Err(Error::DimensionMismatch(format!(
            "batches of shape {}x{} and {}x{}",
            za.len(),
            za.dim(),
            zb.len(),
            zb.dim()
        )));
    }
    Ok(())
}

/// `-(1/b) sum_i ln pi_ii - ln b` for the entropic plan of the batch.
pub fn mltm_loss(za: &EmbeddingSet, zb: &EmbeddingSet, metric: &GroundMetric, epsilon: f64) -> Result<f64> {
    mltm_loss_with(za, zb, metric, &SinkhornConfig::with_epsilon(epsilon)?)
}

pub fn mltm_loss_with(
    za: &EmbeddingSet,
    zb: &EmbeddingSet,
    metric: &GroundMetric,
    config: &SinkhornConfig,
) -> Result<f64> {
    check_batch(za, zb)?;
    let cost = pairwise_cost(za, zb, metric)?;
    let plan = sinkhorn(&cost, config)?;
    kl_divergence(&TargetPlan::full(cost.size()), &plan)
}

/// `sum_i (s/b) ln((s/b) / pi_ii)` for the partial plan of mass `s`.
pub fn mltm_pot_loss(
    za: &EmbeddingSet,
    zb: &EmbeddingSet,
    metric: &GroundMetric,
    epsilon: f64,
    mass: f64,
) -> Result<f64> {
    mltm_pot_loss_with(za, zb, metric, &SinkhornConfig::with_epsilon(epsilon)?, mass)
}

pub fn mltm_pot_loss_with(
    za: &EmbeddingSet,
    zb: &EmbeddingSet,
    metric: &GroundMetric,
    config: &SinkhornConfig,
    mass: f64,
) -> Result<f64> {
    ot::check_mass(mass)?;
    check_batch(za, zb)?;
    let cost = pairwise_cost(za, zb, metric)?;
    let plan = partial_sinkhorn(&cost, mass, config)?;
    kl_divergence(&TargetPlan::partial(cost.size(), mass)?, &plan)
}

/// Symmetric InfoNCE on cosine similarities: the mean over the batch of the
/// audio-to-text plus text-to-audio cross-entropies of `S / tau`.
pub fn contrastive_loss(za: &EmbeddingSet, zb: &EmbeddingSet, temperature: f64) -> Result<f64> {
    check_batch(za, zb)?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be > 0, got {temperature}")));
    }
    let s = cosine_similarities(za.view(), zb.view());
    Ok(tape::info_nce_value(s.view(), temperature))
}

/// Hardest in-batch negative hinge on cosine similarity, both directions.
pub fn triplet_loss(za: &EmbeddingSet, zb: &EmbeddingSet, margin: f64) -> Result<f64> {
    check_batch(za, zb)?;
    if !(margin > 0.0) {
        return Err(Error::InvalidConfig(format!("margin must be > 0, got {margin}")));
    }
    let s = cosine_similarities(za.view(), zb.view());
    Ok(tape::hinge_terms(s.view(), margin).0)
}

/// Dispatches on `config.kind`. Baselines ignore `metric` and `sinkhorn`.
pub fn batch_loss(
    za: &EmbeddingSet,
    zb: &EmbeddingSet,
    metric: &GroundMetric,
    config: &LossConfig,
    sinkhorn: &SinkhornConfig,
) -> Result<f64> {
    config.validate()?;
    let sk = SinkhornConfig { epsilon: config.epsilon, ..*sinkhorn };
    match config.kind {
        LossKind::Mltm => mltm_loss_with(za, zb, metric, &sk),
        LossKind::MltmPot => mltm_pot_loss_with(za, zb, metric, &sk, config.mass),
        LossKind::Contrastive => contrastive_loss(za, zb, config.temperature),
        LossKind::Triplet => triplet_loss(za, zb, config.margin),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::PlanKind;
    use ndarray::{array, Array2};

    #[test]
    fn exact_target_plan_has_zero_loss() {
        let b = 4;
        let plan = TransportPlan::from_matrix(Array2::eye(b) / b as f64, PlanKind::Full).unwrap();
        assert_eq!(kl_divergence(&TargetPlan::full(b), &plan).unwrap(), 0.0);
        let s = 0.5;
        let plan = TransportPlan::from_matrix(Array2::eye(b) * (s / b as f64), PlanKind::Partial { mass: s })
            .unwrap();
        assert!(kl_divergence(&TargetPlan::partial(b, s).unwrap(), &plan).unwrap().abs() < 1e-15);
    }

    #[test]
    fn separated_pair_is_nearly_lossless() {
        let za = EmbeddingSet::new(array![[0.0], [10.0]]).unwrap();
        let zb = za.clone();
        let loss = mltm_loss(&za, &zb, &GroundMetric::Euclidean, 0.05).unwrap();
        assert!(loss >= 0.0 && loss < 1e-6, "{loss}");
    }

    #[test]
    fn zero_plan_entry_is_floored() {
        let plan = TransportPlan::from_matrix(array![[0.0, 0.5], [0.5, 0.0]], PlanKind::Full).unwrap();
        let loss = kl_divergence(&TargetPlan::full(2), &plan).unwrap();
        assert!((loss - (0.5f64.ln() - PLAN_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn single_item_contrastive_is_zero() {
        let z = EmbeddingSet::new(array![[0.3, -1.2]]).unwrap();
        assert_eq!(contrastive_loss(&z, &z, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pair_contrastive_closed_form() {
        let z = EmbeddingSet::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let loss = contrastive_loss(&z, &z, 1.0).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-14);
    }

    #[test]
    fn triplet_closed_forms() {
        let sep_a = EmbeddingSet::new(array![[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(triplet_loss(&sep_a, &sep_a, 0.2).unwrap(), 0.0);
        let same = EmbeddingSet::new(array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!((triplet_loss(&same, &same, 0.2).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batches_are_finite() {
        let z = EmbeddingSet::new(Array2::from_elem((5, 3), 0.7)).unwrap();
        for metric in [GroundMetric::Euclidean, GroundMetric::CosineDistance] {
            assert!(mltm_loss(&z, &z, &metric, 0.05).unwrap().is_finite());
            assert!(mltm_pot_loss(&z, &z, &metric, 0.05, 0.5).unwrap().is_finite());
        }
        assert!(contrastive_loss(&z, &z, 0.07).unwrap().is_finite());
        assert!(triplet_loss(&z, &z, 0.2).unwrap().is_finite());
    }

    #[test]
    fn config_rejects_bad_fields_of_any_kind() {
        let mut c = LossConfig { epsilon: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        c.kind = LossKind::Contrastive;
        assert!(c.validate().is_err());
        c = LossConfig { mass: 1.5, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::MassOutOfRange(_))));
        c.kind = LossKind::MltmPot;
        assert!(matches!(c.validate(), Err(Error::MassOutOfRange(_))));
    }
}
