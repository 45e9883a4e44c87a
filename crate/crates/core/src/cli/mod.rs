//! The `otmatch` command line: `gen-data`, `train`, `eval`, `gradcheck` and
//! `sweep`.
//!
//! Every command resolves an [`ExperimentConfig`] from defaults, then an
//! optional `--config` file, then typed flags, then `--set key=value`
//! overrides, in that order. Runs write one directory each:
//!
//! ```text
//! <out>/config.txt      fully resolved config; feed back with --config
//! <out>/checkpoint.mltm
//! <out>/metrics.jsonl   one record per epoch
//! <out>/report.json     losses and, with a test split, retrieval metrics
//! ```
//!
//! Exit status is 0 on success, 1 on runtime failures (including a failed
//! gradient check) and 2 on usage or configuration errors.

mod config;

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use config::ExperimentConfig;

use crate::data::{load_dataset, write_dataset, write_emb, Manifest, Split};
use crate::data::{generate_split, inject_noise, PairedDataset};
use crate::eval::{evaluate, RetrievalReport};
use crate::grad::{check_objective, Objective, Params};
use crate::loss::{LossConfig, LossKind};
use crate::metric::{init_interaction, MetricKind};
use crate::model::{load_checkpoint, save_checkpoint, train, Activation, EncoderPair, Mlp};
use crate::ot::SinkhornConfig;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const CHECKPOINT: &str = "checkpoint.mltm";
pub const METRICS: &str = "metrics.jsonl";
pub const REPORT: &str = "report.json";
pub const CONFIG_ECHO: &str = "config.txt";
pub const SWEEP_CSV: &str = "sweep.csv";

/// Relative error bound a gradient check must meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "otmatch", version, about = "Learning cross-modal ground metrics with entropic optimal transport")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    GenData(GenDataArgs),
    /// Train encoders (and M) on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a dataset directory.
    Eval(EvalArgs),
    /// Finite-difference check of the loss gradients.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate one run per value of a hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// key=value file applied over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra override, applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub latent: Option<usize>,
    #[arg(long)]
    pub dx: Option<usize>,
    #[arg(long)]
    pub dy: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Size of the test split (0 for none).
    #[arg(long)]
    pub n_test: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, value_parser = ["mltm", "mltm-pot", "contrastive", "triplet"])]
    pub loss: Option<String>,
    #[arg(long, value_parser = ["euclidean", "cosine", "mahalanobis"])]
    pub metric: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub mass: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Training seed (initialization and shuffling).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_ratio: Option<f64>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory; created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory with a test split.
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Append a row to this CSV (header written when the file is new).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Value of the CSV `value` column; defaults to the checkpoint path.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Sampled coordinates per configuration.
    #[arg(long, default_value_t = 50)]
    pub coords: usize,
    #[arg(long, value_delimiter = ',', default_value = "euclidean,mahalanobis",
          value_parser = ["euclidean", "cosine", "mahalanobis"])]
    pub metrics: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Epsilon,
    Mass,
    NoiseRatio,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Mass => "mass",
            SweepAxis::NoiseRatio => "noise_ratio",
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Concurrent runs.
    #[arg(long, env = "OTMATCH_JOBS", default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sweep directory: one run directory per value plus sweep.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::MassOutOfRange(_) | Error::RatioOutOfRange(_) => 2,
        _ => 1,
    }
}

/// Runs a parsed command. `Ok(false)` means it ran but reported failure.
pub fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = resolve_gen_data(&a)?;
            let manifest = gen_data(&cfg, &a.out)?;
            println!("wrote {}", manifest.base.join(MANIFEST).display());
            Ok(true)
        }
        Command::Train(a) => {
            let cfg = resolve_train(&a.config, &a.flags, a.data.as_deref(), a.out.as_deref())?;
            let out = cfg.out_dir.clone().ok_or_else(|| usage("train needs --out or out_dir"))?;
            let summary = train_run(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("report serializes"));
            Ok(true)
        }
        Command::Eval(a) => {
            let report = eval_checkpoint(&a.checkpoint, &a.data)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{json}");
            if let Some(p) = &a.out {
                fs::write(p, json + "\n").map_err(|e| Error::io(p, e))?;
            }
            if let Some(p) = &a.csv {
                let label = a.label.clone().unwrap_or_else(|| a.checkpoint.display().to_string());
                append_csv(p, &[csv_row(&label, Ok(&report))])?;
            }
            Ok(true)
        }
        Command::Gradcheck(a) => {
            let metrics = a
                .metrics
                .iter()
                .map(|m| m.parse::<MetricKind>())
                .collect::<Result<Vec<_>>>()?;
            if !(1e-7..=1e-3).contains(&a.h) {
                eprintln!("warning: h = {:e} is outside [1e-7, 1e-3]; truncation or roundoff will dominate", a.h);
            }
            let cases = gradcheck(&metrics, a.h, a.coords, a.seed)?;
            let mut ok = true;
            for c in &cases {
                println!("{c}");
                ok &= c.passed();
            }
            let passed = cases.iter().filter(|c| c.passed()).count();
            println!("{passed}/{} configurations below {GRADCHECK_TOLERANCE:e}", cases.len());
            Ok(ok)
        }
        Command::Sweep(a) => {
            let cfg = resolve_train(&a.config, &a.flags, a.data.as_deref(), a.out.as_deref())?;
            let out = cfg.out_dir.clone().ok_or_else(|| usage("sweep needs --out or out_dir"))?;
            let rows = sweep(&cfg, a.axis, &a.values, a.jobs, &out)?;
            for r in &rows {
                println!("{}", r.join(","));
            }
            Ok(true)
        }
    }
}

fn usage(msg: &str) -> Error {
    Error::InvalidConfig(msg.into())
}

fn apply_common(cfg: &mut ExperimentConfig, args: &ConfigArgs) -> Result<()> {
    if let Some(p) = &args.config {
        cfg.apply_file(p)?;
    }
    Ok(())
}

fn apply_sets(cfg: &mut ExperimentConfig, args: &ConfigArgs) -> Result<()> {
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(&format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn apply_flags(cfg: &mut ExperimentConfig, pairs: &[(&str, Option<String>)]) -> Result<()> {
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(())
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn resolve_gen_data(a: &GenDataArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    apply_common(&mut cfg, &a.config)?;
    apply_flags(
        &mut cfg,
        &[
            ("n", opt(&a.n)),
            ("latent_dim", opt(&a.latent)),
            ("dx", opt(&a.dx)),
            ("dy", opt(&a.dy)),
            ("noise_sigma", opt(&a.sigma)),
            ("data_seed", opt(&a.seed)),
            ("n_test", opt(&a.n_test)),
        ],
    )?;
    apply_sets(&mut cfg, &a.config)?;
    cfg.synth.validate()?;
    Ok(cfg)
}

fn resolve_train(
    args: &ConfigArgs,
    f: &TrainFlags,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    apply_common(&mut cfg, args)?;
    apply_flags(
        &mut cfg,
        &[
            ("loss", f.loss.clone()),
            ("metric", f.metric.clone()),
            ("epsilon", opt(&f.epsilon)),
            ("mass", opt(&f.mass)),
            ("temperature", opt(&f.temperature)),
            ("margin", opt(&f.margin)),
            ("batch_size", opt(&f.batch_size)),
            ("epochs", opt(&f.epochs)),
            ("learning_rate", opt(&f.learning_rate)),
            ("embedding_dim", opt(&f.embedding_dim)),
            ("seed", opt(&f.seed)),
            ("noise_ratio", opt(&f.noise_ratio)),
            ("noise_seed", opt(&f.noise_seed)),
        ],
    )?;
    if let Some(d) = data {
        cfg.data_dir = Some(d.to_path_buf());
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o.to_path_buf());
    }
    apply_sets(&mut cfg, args)?;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the train and (if `n_test > 0`) test splits, the latent maps and
/// the manifest into `out`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    cfg.synth.validate()?;
    create_dir(out)?;
    let split = generate_split(&cfg.synth, cfg.n_test)?;
    let mut manifest = Manifest::new(out);
    write_dataset(out, Split::Train, &split.train, &mut manifest)?;
    if cfg.n_test > 0 {
        write_dataset(out, Split::Test, &split.test, &mut manifest)?;
    }
    write_emb(&out.join("maps.x.emb"), &split.maps.a_x)?;
    write_emb(&out.join("maps.y.emb"), &split.maps.a_y)?;
    manifest.set("maps.x", "maps.x.emb");
    manifest.set("maps.y", "maps.y.emb");
    manifest.write(&out.join(MANIFEST))?;
    Ok(manifest)
}

/// Train and test splits of a dataset directory; the test split is `None`
/// when the manifest lists none.
pub fn load_data_dir(dir: &Path) -> Result<(PairedDataset, Option<PairedDataset>)> {
    let manifest = Manifest::read(&dir.join(MANIFEST))?;
    let train = load_dataset(&manifest, Split::Train)?;
    let test = match manifest.get("test.x") {
        Some(_) => Some(load_dataset(&manifest, Split::Test)?),
        None => None,
    };
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub epochs: usize,
    pub corrupted_pairs: usize,
    pub retrieval: Option<RetrievalReport>,
}

/// One training run: loads data, injects noise, trains, evaluates and
/// writes the run directory.
pub fn train_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let data_dir = cfg.data_dir.as_deref().ok_or_else(|| usage("no dataset: pass --data or set data_dir"))?;
    let (clean, test) = load_data_dir(data_dir)?;
    let train_set = inject_noise(&clean, cfg.noise_ratio, cfg.noise_seed)?;
    create_dir(out)?;
    let echo = ExperimentConfig { out_dir: Some(out.to_path_buf()), ..cfg.clone() };
    let echo_path = out.join(CONFIG_ECHO);
    fs::write(&echo_path, echo.render()).map_err(|e| Error::io(&echo_path, e))?;

    let (ckpt, history) = train(&train_set, &cfg.train, test.as_ref())?;
    save_checkpoint(&ckpt, &out.join(CHECKPOINT))?;
    let metrics = out.join(METRICS);
    fs::write(&metrics, history.to_jsonl()).map_err(|e| Error::io(&metrics, e))?;
    let summary = RunSummary {
        initial_train_loss: history.initial_train_loss,
        final_train_loss: history.epochs.last().map_or(history.initial_train_loss, |r| r.train_loss),
        epochs: history.epochs.len(),
        corrupted_pairs: train_set.corrupted_count(),
        retrieval: test.as_ref().map(|t| evaluate(&ckpt, t)).transpose()?,
    };
    let report = out.join(REPORT);
    let json = serde_json::to_string_pretty(&summary).expect("report serializes");
    fs::write(&report, json + "\n").map_err(|e| Error::io(&report, e))?;
    Ok(summary)
}

pub fn eval_checkpoint(checkpoint: &Path, data: &Path) -> Result<RetrievalReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (_, test) = load_data_dir(data)?;
    let test = test.ok_or_else(|| usage(&format!("{} has no test split", data.display())))?;
    evaluate(&ckpt, &test)
}

/// One configuration of the gradient-check matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub metric: MetricKind,
    pub loss: LossKind,
    pub mass: f64,
    pub epsilon: f64,
    pub batch: usize,
    pub max_rel_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

impl std::fmt::Display for GradCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<12} {:<9} s={:<4} eps={:<5} b={} max_rel_err={:.3e} {}",
            self.metric.as_str(),
            self.loss.as_str(),
            self.mass,
            self.epsilon,
            self.batch,
            self.max_rel_error,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Finite-difference check over `metrics` x {m-LTM, m-LTM-POT at s = 0.5}
/// x eps in {0.05, 0.1, 0.5} x b in {2, 4, 8}, on random inputs and small
/// tanh encoders into `d = 3`.
pub fn gradcheck(metrics: &[MetricKind], h: f64, coords: usize, seed: u64) -> Result<Vec<GradCase>> {
    let (dx, dy, d) = (4, 3, 3);
    let mut cases = Vec::new();
    let mut k = 0;
    for &metric in metrics {
        for (loss, mass) in [(LossKind::Mltm, 1.0), (LossKind::MltmPot, 0.5)] {
            for epsilon in [0.05, 0.1, 0.5] {
                for batch in [2, 4, 8] {
                    let case_seed = seed.wrapping_add(k);
                    k += 1;
                    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
                    let normal = |rng: &mut ChaCha8Rng, r, c| {
                        use rand_distr::Distribution;
                        ndarray::Array2::from_shape_fn((r, c), |_| rand_distr::StandardNormal.sample(rng))
                    };
                    let x = normal(&mut rng, batch, dx);
                    let y = normal(&mut rng, batch, dy);
                    let theta = Mlp::xavier(dx, &[6], d, Activation::Tanh, &mut rng)?;
                    let phi = Mlp::xavier(dy, &[5], d, Activation::Tanh, &mut rng)?;
                    let params = Params {
                        encoders: EncoderPair::new(theta, phi)?,
                        m: (metric == MetricKind::Mahalanobis).then(|| init_interaction(d, case_seed).into_inner()),
                    };
                    let objective = Objective {
                        x: x.view(),
                        y: y.view(),
                        metric,
                        loss: LossConfig { kind: loss, epsilon, mass, ..Default::default() },
                        sinkhorn: SinkhornConfig::with_epsilon(epsilon)?,
                    };
                    let max_rel_error = check_objective(&objective, &params, coords, h, case_seed)?;
                    cases.push(GradCase { metric, loss, mass, epsilon, batch, max_rel_error });
                }
            }
        }
    }
    Ok(cases)
}

const CSV_HEADER: [&str; 6] = ["value", "r1_t2a", "r1_a2t", "avg_r1", "modality_gap", "status"];

fn csv_row(value: &str, report: std::result::Result<&RetrievalReport, &Error>) -> Vec<String> {
    match report {
        Ok(r) => vec![
            value.to_string(),
            r.text_to_audio.r1.to_string(),
            r.audio_to_text.r1.to_string(),
            r.avg_r1().to_string(),
            r.modality_gap.to_string(),
            "ok".into(),
        ],
        Err(e) => {
            let mut row = vec![value.to_string()];
            row.extend(std::iter::repeat_n("NaN".to_string(), 4));
            row.push(format!("error: {e}"));
            row
        }
    }
}

fn append_csv(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    if fresh {
        w.write_record(CSV_HEADER).map_err(csv_err)?;
    }
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs one training per value of `axis` into `<out>/<key>-<value>/` on a
/// pool of `jobs` threads and writes `<out>/sweep.csv`. A failed run is
/// recorded in its row's `status` column; the others still run. Returns the
/// CSV rows (without header) in the order of `values`.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    jobs: usize,
    out: &Path,
) -> Result<Vec<Vec<String>>> {
    if values.is_empty() {
        return Err(usage("sweep needs at least one value"));
    }
    if axis == SweepAxis::Mass && base.train.loss.kind != LossKind::MltmPot {
        return Err(usage("a mass sweep needs --loss mltm-pot"));
    }
    let data_dir = base.data_dir.as_deref().ok_or_else(|| usage("no dataset: pass --data or set data_dir"))?;
    if load_data_dir(data_dir)?.1.is_none() {
        return Err(usage(&format!("{} has no test split to evaluate on", data_dir.display())));
    }
    create_dir(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| usage(&format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<(String, Result<RetrievalReport>)> = pool.install(|| {
        values
            .par_iter()
            .map(|&v| {
                let label = v.to_string();
                let run = || -> Result<RetrievalReport> {
                    let mut cfg = base.clone();
                    cfg.set(axis.key(), &label)?;
                    let dir = out.join(format!("{}-{label}", axis.key()));
                    cfg.out_dir = Some(dir.clone());
                    let summary = train_run(&cfg, &dir)?;
                    Ok(summary.retrieval.expect("test split checked above"))
                };
                let result = run();
                (label, result)
            })
            .collect()
    });
    let rows: Vec<Vec<String>> = results.iter().map(|(v, r)| csv_row(v, r.as_ref())).collect();
    let csv = out.join(SWEEP_CSV);
    if csv.exists() {
        fs::remove_file(&csv).map_err(|e| Error::io(&csv, e))?;
    }
    append_csv(&csv, &rows)?;
    Ok(rows)
}
