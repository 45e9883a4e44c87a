//! Paired datasets: synthetic generation, correspondence noise and EMB1
//! embedding files.

mod io;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

pub use io::{
    load_dataset, load_embeddings, read_alignment, read_emb, write_alignment, write_dataset, write_emb,
    Manifest, Split,
};

/// Aligned pairs, with a record of which pairings are wrong.
///
/// `alignment[i]` is the row of `ys` holding the true partner of `xs` row
/// `i`; the training pairs are always `(xs[i], ys[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    xs: Array2<f64>,
    ys: Array2<f64>,
    alignment: Vec<usize>,
    corrupted: Vec<bool>,
}

impl PairedDataset {
    /// Clean pairs: `alignment` is the identity.
    pub fn new(xs: Array2<f64>, ys: Array2<f64>) -> Result<Self> {
        let n = xs.nrows();
        Self::with_alignment(xs, ys, (0..n).collect())
    }

    pub fn with_alignment(xs: Array2<f64>, ys: Array2<f64>, alignment: Vec<usize>) -> Result<Self> {
        if xs.nrows() != ys.nrows() {
            return Err(Error::LengthMismatch { x: xs.nrows(), y: ys.nrows() });
        }
        if alignment.len() != xs.nrows() {
            return Err(Error::LengthMismatch { x: xs.nrows(), y: alignment.len() });
        }
        if xs.nrows() == 0 || xs.ncols() == 0 || ys.ncols() == 0 {
            return Err(Error::InvalidConfig("dataset must have rows and columns".into()));
        }
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        let mut seen = vec![false; alignment.len()];
        for &a in &alignment {
            if a >= seen.len() || seen[a] {
                return Err(Error::InvalidConfig("alignment is not a permutation".into()));
            }
            seen[a] = true;
        }
        let corrupted = alignment.iter().enumerate().map(|(i, a)| *a != i).collect();
        Ok(Self { xs, ys, alignment, corrupted })
    }

    pub fn len(&self) -> usize {
        self.xs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.nrows() == 0
    }

    pub fn xs(&self) -> ArrayView2<'_, f64> {
        self.xs.view()
    }

    pub fn ys(&self) -> ArrayView2<'_, f64> {
        self.ys.view()
    }

    pub fn x_dim(&self) -> usize {
        self.xs.ncols()
    }

    pub fn y_dim(&self) -> usize {
        self.ys.ncols()
    }

    pub fn alignment(&self) -> &[usize] {
        &self.alignment
    }

    pub fn corrupted_flags(&self) -> &[bool] {
        &self.corrupted
    }

    pub fn corrupted_count(&self) -> usize {
        self.corrupted.iter().filter(|c| **c).count()
    }

    /// Rows `idx` of both modalities, kept as training pairs.
    pub fn batch(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.xs.select(Axis(0), idx), self.ys.select(Axis(0), idx))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub latent_dim: usize,
    pub dx: usize,
    pub dy: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 2048,
            latent_dim: 8,
            dx: 32,
            dy: 48,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::InvalidConfig(format!("n must be >= 4, got {}", self.n)));
        }
        if self.latent_dim == 0 || self.dx == 0 || self.dy == 0 {
            return Err(Error::InvalidConfig("dimensions must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// The linear maps from the latent space to each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMaps {
    /// `dx x latent`
    pub a_x: Array2<f64>,
    /// `dy x latent`
    pub a_y: Array2<f64>,
}

impl LatentMaps {
    /// Gaussian maps with entries `N(0, 1/latent)`, which have full column
    /// rank with probability one when `dx, dy >= latent`.
    pub fn random(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scale = 1.0 / (spec.latent_dim as f64).sqrt();
        let mut draw = |r, c| Array2::from_shape_fn((r, c), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            scale * v
        });
        let a_x = draw(spec.dx, spec.latent_dim);
        let a_y = draw(spec.dy, spec.latent_dim);
        Self { a_x, a_y }
    }

    pub fn identity(d: usize) -> Self {
        Self { a_x: Array2::eye(d), a_y: Array2::eye(d) }
    }
}

/// A training split and a held-out split drawn through the same maps.
#[derive(Clone, Debug)]
pub struct SyntheticSplit {
    pub train: PairedDataset,
    pub test: PairedDataset,
    pub maps: LatentMaps,
}

/// Stream ids for the per-split random draws, so that the training split
/// does not depend on the test size.
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// `x_i = A_x z_i + sigma e`, `y_i = A_y z_i + sigma e'` with `z_i ~ N(0, I)`.
///
/// Values are rounded to `f32` so that a dataset survives an EMB1 round trip
/// bit-exactly.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<PairedDataset> {
    spec.validate()?;
    generate_with_maps(spec, &LatentMaps::random(spec), TRAIN_STREAM)
}

/// Training split of `spec.n` pairs plus a test split of `n_test` pairs.
pub fn generate_split(spec: &SynthSpec, n_test: usize) -> Result<SyntheticSplit> {
    spec.validate()?;
    let maps = LatentMaps::random(spec);
    let train = generate_with_maps(spec, &maps, TRAIN_STREAM)?;
    let test_spec = SynthSpec { n: n_test, ..*spec };
    let test = generate_with_maps(&test_spec, &maps, TEST_STREAM)?;
    Ok(SyntheticSplit { train, test, maps })
}

pub fn generate_with_maps(spec: &SynthSpec, maps: &LatentMaps, stream: u64) -> Result<PairedDataset> {
    let l = spec.latent_dim;
    if maps.a_x.dim() != (spec.dx, l) || maps.a_y.dim() != (spec.dy, l) {
        return Err(Error::DimensionMismatch(format!(
            "maps {:?} and {:?} for dx={}, dy={}, latent={l}",
            maps.a_x.dim(),
            maps.a_y.dim(),
            spec.dx,
            spec.dy
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut normal = |r, c| Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng));
    let z: Array2<f64> = normal(spec.n, l);
    let ex: Array2<f64> = normal(spec.n, spec.dx);
    let ey: Array2<f64> = normal(spec.n, spec.dy);
    let round = |v: f64| v as f32 as f64;
    let xs = (z.dot(&maps.a_x.t()) + ex * spec.noise_sigma).mapv(round);
    let ys = (z.dot(&maps.a_y.t()) + ey * spec.noise_sigma).mapv(round);
    PairedDataset::new(xs, ys)
}

/// Corrupts `floor(ratio * n)` pairs by a derangement of their `y` partners:
/// every selected `x` ends up paired with another selected item's `y`.
pub fn inject_noise(ds: &PairedDataset, ratio: f64, seed: u64) -> Result<PairedDataset> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::RatioOutOfRange(format!("{ratio} is outside [0, 1)")));
    }
    let n = ds.len();
    let k = (ratio * n as f64).floor() as usize;
    if k == 1 {
        return Err(Error::RatioOutOfRange(format!(
            "{ratio} selects a single pair of {n}, which cannot be deranged"
        )));
    }
    if k == 0 {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = index::sample(&mut rng, n, k).into_vec();
    selected.sort_unstable();
    let perm = random_derangement(k, &mut rng);
    // sigma maps a selected slot to the slot whose y it receives.
    let mut sigma: Vec<usize> = (0..n).collect();
    for (a, &p) in perm.iter().enumerate() {
        sigma[selected[a]] = selected[p];
    }
    let mut inverse = vec![0; n];
    for (i, &s) in sigma.iter().enumerate() {
        inverse[s] = i;
    }
    let ys = ds.ys.select(Axis(0), &sigma);
    let alignment = ds.alignment.iter().map(|&a| inverse[a]).collect();
    PairedDataset::with_alignment(ds.xs.clone(), ys, alignment)
}

/// Uniform derangement of `0..k` (`k >= 2`) by rejection.
fn random_derangement(k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, v)| i != *v) {
            return p;
        }
    }
}
