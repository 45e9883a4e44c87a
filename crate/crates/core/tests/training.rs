use std::time::Instant;

use otmatch::data::{generate_synthetic, PairedDataset, SynthSpec};
use otmatch::loss::LossKind;
use otmatch::metric::MetricKind;
use otmatch::model::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, FORMAT_VERSION};
use otmatch::Error;

fn small_data() -> PairedDataset {
    let spec = SynthSpec { n: 96, latent_dim: 4, dx: 10, dy: 12, ..SynthSpec::default() };
    generate_synthetic(&spec).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        epochs: 2,
        embedding_dim: 6,
        hidden: vec![8],
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let data = small_data();
    let config = TrainConfig { epochs: 0, ..small_config() };
    let (ckpt, history) = train(&data, &config, None).unwrap();
    assert_eq!(ckpt, Checkpoint::init(data.x_dim(), data.y_dim(), &config).unwrap());
    assert!(history.epochs.is_empty());
    assert!(history.initial_train_loss.is_finite());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = small_data();
    let config = TrainConfig { learning_rate: 0.0, ..small_config() };
    let init = Checkpoint::init(data.x_dim(), data.y_dim(), &config).unwrap();
    let (ckpt, _) = train(&data, &config, None).unwrap();
    assert_eq!(ckpt.encoders, init.encoders);
    // M is re-projected each step; a PSD input only moves by rounding.
    let diff = (&ckpt.interaction.view() - &init.interaction.view()).mapv(f64::abs);
    assert!(diff.iter().all(|d| *d < 1e-12), "{diff}");
}

#[test]
fn euclidean_runs_never_touch_the_interaction_matrix() {
    let data = small_data();
    let config = TrainConfig { metric: MetricKind::Euclidean, ..small_config() };
    let init = Checkpoint::init(data.x_dim(), data.y_dim(), &config).unwrap();
    let (ckpt, _) = train(&data, &config, None).unwrap();
    assert_eq!(ckpt.interaction, init.interaction);
    assert_ne!(ckpt.encoders, init.encoders);
}

#[test]
fn same_seed_same_run() {
    let data = small_data();
    for kind in [LossKind::Mltm, LossKind::MltmPot, LossKind::Contrastive, LossKind::Triplet] {
        let mut config = small_config();
        config.loss.kind = kind;
        if kind == LossKind::MltmPot {
            config.loss.mass = 0.7;
        }
        let (a, ha) = train(&data, &config, None).unwrap();
        let (b, hb) = train(&data, &config, None).unwrap();
        assert_eq!(a, b, "{kind:?}");
        assert_eq!(ha, hb, "{kind:?}");
        let c = train(&data, &TrainConfig { seed: 1, ..config }, None).unwrap().0;
        assert_ne!(a.encoders, c.encoders, "{kind:?}");
    }
}

#[test]
fn training_reduces_the_loss() {
    let data = generate_synthetic(&SynthSpec { n: 256, ..SynthSpec::default() }).unwrap();
    let config = TrainConfig { batch_size: 64, epochs: 30, learning_rate: 1e-3, ..TrainConfig::default() };
    let start = Instant::now();
    let (_, history) = train(&data, &config, None).unwrap();
    let last = history.epochs.last().unwrap().train_loss;
    assert!(
        last * 10.0 <= history.initial_train_loss,
        "initial {} final {last} after {:?}",
        history.initial_train_loss,
        start.elapsed()
    );
}

#[test]
fn checkpoint_round_trip_is_exact_and_corruption_is_detected() {
    let data = small_data();
    let mut config = small_config();
    config.loss.kind = LossKind::MltmPot;
    config.loss.mass = 0.6;
    let (ckpt, _) = train(&data, &config, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mltm");
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.mltm");
    std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::CorruptChecksum)));

    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    std::fs::write(&cut, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::CorruptChecksum)));

    let mut versioned = bytes;
    versioned[4..6].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    std::fs::write(&cut, &versioned).unwrap();
    assert!(matches!(
        load_checkpoint(&cut),
        Err(Error::VersionMismatch { found, expected }) if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION
    ));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = small_data();
    let config = TrainConfig { epochs: 3, ..small_config() };
    let (full, _) = train(&data, &config, None).unwrap();
    let (mut part, _) = train(&data, &TrainConfig { epochs: 1, ..config.clone() }, None).unwrap();
    part.config.epochs = 3;
    let (resumed, _) = otmatch::model::train_from(part, &data, None).unwrap();
    assert_eq!(resumed.encoders, full.encoders);
    assert_eq!(resumed.interaction, full.interaction);
}
