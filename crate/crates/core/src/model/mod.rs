//! Dual MLP encoders and the minibatch training loop.

mod checkpoint;
mod encoder;
mod optim;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::PairedDataset;
use crate::eval::{evaluate_encoders, Scoring};
use crate::grad::{GradBundle, Objective, Params};
use crate::loss::LossConfig;
use crate::metric::{init_interaction, project_psd, GroundMetric, InteractionMatrix, MetricKind};
use crate::ot::SinkhornConfig;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use encoder::{forward_encode, Activation, EncoderPair, Layer, Mlp};
pub use optim::{AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    /// Ground metric for the transport losses; baselines always use cosine.
    pub metric: MetricKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Multiplies the Xavier-initialized output layer of both encoders.
    /// Small values start training with costs of the order of epsilon,
    /// where the entropic plan is still soft.
    pub output_gain: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tolerance: f64,
    /// Minibatches averaged into one gradient step.
    pub minibatches_per_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sk = SinkhornConfig::default();
        Self {
            loss: LossConfig::default(),
            metric: MetricKind::Mahalanobis,
            batch_size: 256,
            epochs: 30,
            learning_rate: 1e-4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            embedding_dim: 32,
            hidden: vec![64],
            activation: Activation::Tanh,
            output_gain: 0.02,
            sinkhorn_max_iters: sk.max_iters,
            sinkhorn_tolerance: sk.tolerance,
            minibatches_per_step: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "loss",
        "metric",
        "epsilon",
        "mass",
        "temperature",
        "margin",
        "batch_size",
        "epochs",
        "learning_rate",
        "seed",
        "beta1",
        "beta2",
        "adam_eps",
        "embedding_dim",
        "hidden",
        "activation",
        "output_gain",
        "sinkhorn_max_iters",
        "sinkhorn_tolerance",
        "minibatches_per_step",
    ];

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.sinkhorn()?;
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("adam betas must be in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return fail("layer sizes must be >= 1".into());
        }
        if !(self.output_gain > 0.0 && self.output_gain.is_finite()) {
            return fail(format!("output_gain must be > 0, got {}", self.output_gain));
        }
        if self.minibatches_per_step == 0 {
            return fail("minibatches_per_step must be >= 1".into());
        }
        Ok(())
    }

    pub fn sinkhorn(&self) -> Result<SinkhornConfig> {
        SinkhornConfig::new(self.loss.epsilon, self.sinkhorn_max_iters, self.sinkhorn_tolerance)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Sets one field from its `key=value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "loss" => self.loss.kind = parse(key, value)?,
            "metric" => self.metric = parse(key, value)?,
            "epsilon" => self.loss.epsilon = parse(key, value)?,
            "mass" => self.loss.mass = parse(key, value)?,
            "temperature" => self.loss.temperature = parse(key, value)?,
            "margin" => self.loss.margin = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "hidden" => {
                self.hidden = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse(key, v)).collect::<Result<_>>()?
                }
            }
            "activation" => {
                self.activation = match value.trim() {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    other => return Err(Error::InvalidConfig(format!("unknown activation {other:?}"))),
                }
            }
            "output_gain" => self.output_gain = parse(key, value)?,
            "sinkhorn_max_iters" => self.sinkhorn_max_iters = parse(key, value)?,
            "sinkhorn_tolerance" => self.sinkhorn_tolerance = parse(key, value)?,
            "minibatches_per_step" => self.minibatches_per_step = parse(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown training key {other:?}"))),
        }
        Ok(())
    }

    /// All fields as `(key, value)` in [`TrainConfig::KEYS`] order; floats
    /// use the shortest representation that parses back exactly.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let act = match self.activation {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        };
        let hidden = self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
        let values = [
            self.loss.kind.to_string(),
            self.metric.to_string(),
            self.loss.epsilon.to_string(),
            self.loss.mass.to_string(),
            self.loss.temperature.to_string(),
            self.loss.margin.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.learning_rate.to_string(),
            self.seed.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.adam_eps.to_string(),
            self.embedding_dim.to_string(),
            hidden,
            act.to_string(),
            self.output_gain.to_string(),
            self.sinkhorn_max_iters.to_string(),
            self.sinkhorn_tolerance.to_string(),
            self.minibatches_per_step.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    pub fn render(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {line:?}")))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoders: EncoderPair,
    /// Carried for every metric; only updated when the metric is Mahalanobis.
    pub interaction: InteractionMatrix,
    pub encoder_moments: AdamState,
    pub interaction_moments: AdamState,
    pub epoch: u64,
    pub config: TrainConfig,
}

impl Checkpoint {
    /// Fresh parameters for `config`, deterministic in `config.seed`.
    pub fn init(x_dim: usize, y_dim: usize, config: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embedding_dim;
        let mut theta = Mlp::xavier(x_dim, &config.hidden, d, config.activation, &mut rng)?;
        let mut phi = Mlp::xavier(y_dim, &config.hidden, d, config.activation, &mut rng)?;
        for mlp in [&mut theta, &mut phi] {
            let out = mlp.layers_mut().last_mut().expect("at least one layer");
            out.weight.mapv_inplace(|w| w * config.output_gain);
        }
        let encoders = EncoderPair::new(theta, phi)?;
        let n = encoders.theta.param_count() + encoders.phi.param_count();
        Ok(Self {
            encoders,
            interaction: init_interaction(d, config.seed),
            encoder_moments: AdamState::new(n),
            interaction_moments: AdamState::new(d * d),
            epoch: 0,
            config: config.clone(),
        })
    }

    pub fn ground_metric(&self) -> GroundMetric {
        match self.config.metric {
            MetricKind::Euclidean => GroundMetric::Euclidean,
            MetricKind::Cosine => GroundMetric::CosineDistance,
            MetricKind::Mahalanobis => GroundMetric::Mahalanobis(self.interaction.clone()),
        }
    }

    /// Negated learned cost for transport-trained models, cosine otherwise.
    pub fn scoring(&self) -> Scoring {
        if self.config.loss.kind.uses_transport() {
            Scoring::NegatedCost(self.ground_metric())
        } else {
            Scoring::Cosine
        }
    }

    fn learns_interaction(&self) -> bool {
        self.config.loss.kind.uses_transport() && self.config.metric == MetricKind::Mahalanobis
    }

    fn params(&self) -> Params {
        Params {
            encoders: self.encoders.clone(),
            m: self.learns_interaction().then(|| self.interaction.view().to_owned()),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_r1_t2a: Option<f64>,
    pub val_r1_a2t: Option<f64>,
    pub modality_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct History {
    /// Mean loss over the first epoch's batches at initialization.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Minibatch index lists for one epoch; a trailing batch smaller than 2 is dropped.
fn epoch_batches(n: usize, b: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(b)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Trains from a fresh initialization. `validation`, if given, is ranked in
/// full after every epoch.
pub fn train(
    dataset: &PairedDataset,
    config: &TrainConfig,
    validation: Option<&PairedDataset>,
) -> Result<(Checkpoint, History)> {
    config.validate()?;
    let ckpt = Checkpoint::init(dataset.x_dim(), dataset.y_dim(), config)?;
    train_from(ckpt, dataset, validation)
}

/// Continues training `ckpt` until `ckpt.config.epochs` epochs are done.
pub fn train_from(
    mut ckpt: Checkpoint,
    dataset: &PairedDataset,
    validation: Option<&PairedDataset>,
) -> Result<(Checkpoint, History)> {
    let config = ckpt.config.clone();
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::InvalidConfig("training needs at least 2 pairs".into()));
    }
    let b = config.batch_size.min(dataset.len());
    let sinkhorn = config.sinkhorn()?;
    let adam = config.adam();
    let learns_m = ckpt.learns_interaction();
    // The shuffling stream is separate from the initialization stream.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    for _ in 0..ckpt.epoch {
        epoch_batches(dataset.len(), b, &mut rng);
    }

    fn objective<'a>(x: &'a Array2<f64>, y: &'a Array2<f64>, config: &TrainConfig, sinkhorn: SinkhornConfig) -> Objective<'a> {
        Objective {
            x: x.view(),
            y: y.view(),
            metric: config.metric,
            loss: config.loss,
            sinkhorn,
        }
    }
    let mut step = (ckpt.encoder_moments.step) as usize;
    let mut history = History { initial_train_loss: f64::NAN, epochs: Vec::new() };
    {
        let mut probe = rng.clone();
        let batches = epoch_batches(dataset.len(), b, &mut probe);
        let params = ckpt.params();
        let mut total = 0.0;
        for idx in &batches {
            let (x, y) = dataset.batch(idx);
            total += objective(&x, &y, &config, sinkhorn).value(&params).map_err(|e| training_error(step, e))?;
        }
        history.initial_train_loss = total / batches.len() as f64;
    }

    while (ckpt.epoch as usize) < config.epochs {
        let batches = epoch_batches(dataset.len(), b, &mut rng);
        let mut epoch_loss = 0.0;
        for group in batches.chunks(config.minibatches_per_step) {
            let params = ckpt.params();
            let mut grads: Option<GradBundle> = None;
            let scale = 1.0 / group.len() as f64;
            for idx in group {
                let (x, y) = dataset.batch(idx);
                let ev = objective(&x, &y, &config, sinkhorn).evaluate(&params).map_err(|e| training_error(step, e))?;
                epoch_loss += ev.loss;
                match &mut grads {
                    Some(g) => g.add_scaled(&ev.grads, scale),
                    None => {
                        let mut g = ev.grads.clone();
                        g.add_scaled(&ev.grads, scale - 1.0);
                        grads = Some(g);
                    }
                }
            }
            let grads = grads.expect("non-empty group");
            apply_update(&mut ckpt, &grads, &adam, learns_m).map_err(|e| training_error(step, e))?;
            step += 1;
        }
        ckpt.epoch += 1;
        let mut record = EpochRecord {
            epoch: ckpt.epoch as usize,
            train_loss: epoch_loss / batches.len() as f64,
            val_r1_t2a: None,
            val_r1_a2t: None,
            modality_gap: None,
        };
        if let Some(val) = validation {
            let report = evaluate_encoders(&ckpt.encoders, &ckpt.scoring(), val)?;
            record.val_r1_t2a = Some(report.text_to_audio.r1);
            record.val_r1_a2t = Some(report.audio_to_text.r1);
            record.modality_gap = Some(report.modality_gap);
        }
        history.epochs.push(record);
    }
    Ok((ckpt, history))
}

fn training_error(step: usize, e: Error) -> Error {
    Error::Training { step, source: Box::new(e) }
}

fn apply_update(ckpt: &mut Checkpoint, grads: &GradBundle, adam: &AdamConfig, learns_m: bool) -> Result<()> {
    let enc = Params { encoders: ckpt.encoders.clone(), m: None };
    let mut flat = enc.flatten();
    let g = GradBundle { m: None, ..grads.clone() }.flatten();
    ckpt.encoder_moments.step(adam, &mut flat, &g);
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder parameters".into()));
    }
    ckpt.encoders = enc.with_flat(&flat).encoders;
    if learns_m {
        let gm = grads.m.as_ref().expect("Mahalanobis gradient");
        let d = ckpt.interaction.dim();
        let mut m: Vec<f64> = ckpt.interaction.view().iter().copied().collect();
        ckpt.interaction_moments.step(adam, &mut m, gm.as_slice().expect("contiguous gradient"));
        let raw = Array2::from_shape_vec((d, d), m).expect("square");
        ckpt.interaction = project_psd(raw.view())?;
        debug_assert!(InteractionMatrix::new(ckpt.interaction.view().to_owned()).is_ok());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossKind;

    #[test]
    fn config_round_trips_through_text() {
        let mut c = TrainConfig::default();
        c.loss.kind = LossKind::MltmPot;
        c.loss.mass = 0.7;
        c.learning_rate = 3e-3;
        c.hidden = vec![16, 8];
        c.activation = Activation::Relu;
        let back = TrainConfig::parse_text(&c.render()).unwrap();
        assert_eq!(back, c);
        for (k, _) in c.to_pairs() {
            assert!(TrainConfig::KEYS.contains(&k));
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let mut c = TrainConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("epochs", "many").is_err());
        c.batch_size = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn final_small_batch_is_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(9, 4, &mut rng);
        assert_eq!(b.len(), 2);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn every_epoch_is_a_fresh_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let first: Vec<usize> = epoch_batches(50, 8, &mut rng).concat();
        let second: Vec<usize> = epoch_batches(50, 8, &mut rng).concat();
        for order in [&first, &second] {
            let mut sorted = order.to_vec();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        }
        assert_ne!(first, second);
    }
}
