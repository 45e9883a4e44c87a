//! Ground costs between two embedding sets.
//!
//! The Mahalanobis variant carries a learned interaction matrix `M`, kept on
//! the PSD cone by [`project_psd`].

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ot::CostMatrix;
use crate::{Error, Result};

/// Floor under the Mahalanobis quadratic form before the square root.
pub const SQRT_FLOOR: f64 = 1e-12;
/// Smallest eigenvalue kept by [`project_psd`].
pub const EIGEN_FLOOR: f64 = 1e-8;
pub(crate) const NORM_FLOOR: f64 = 1e-12;

/// `b x d` embedding vectors, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    vectors: Array2<f64>,
}

impl EmbeddingSet {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        let (b, d) = vectors.dim();
        if b == 0 || d == 0 {
            return Err(Error::DimensionMismatch(format!(
                "embedding set must be non-empty, got {b}x{d}"
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding set".into()));
        }
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.vectors
    }
}

/// Symmetric positive semidefinite `d x d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix {
    m: Array2<f64>,
}

impl InteractionMatrix {
    pub fn new(m: Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c || r == 0 {
            return Err(Error::DimensionMismatch(format!(
                "interaction matrix must be square, got {r}x{c}"
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("interaction matrix".into()));
        }
        let asym = asymmetry(m.view());
        if asym > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "interaction matrix asymmetric by {asym:e}"
            )));
        }
        let lo = min_eigenvalue(m.view());
        if lo < -1e-10 {
            return Err(Error::NonPsd(lo));
        }
        Ok(Self { m })
    }

    /// Skips validation for matrices that were valid when written out.
    pub(crate) fn from_trusted(m: Array2<f64>) -> Self {
        Self { m }
    }

    pub fn identity(d: usize) -> Self {
        Self { m: Array2::eye(d) }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.m.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GroundMetric {
    Euclidean,
    /// `1 - cos(a, b)`, in `[0, 2]`.
    CosineDistance,
    Mahalanobis(InteractionMatrix),
}

impl GroundMetric {
    pub fn interaction(&self) -> Option<&InteractionMatrix> {
        match self {
            GroundMetric::Mahalanobis(m) => Some(m),
            _ => None,
        }
    }

    pub fn kind(&self) -> MetricKind {
        match self {
            GroundMetric::Euclidean => MetricKind::Euclidean,
            GroundMetric::CosineDistance => MetricKind::Cosine,
            GroundMetric::Mahalanobis(_) => MetricKind::Mahalanobis,
        }
    }
}

/// A [`GroundMetric`] without its parameters, as chosen in a config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Euclidean,
    Cosine,
    Mahalanobis,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Euclidean => "euclidean",
            MetricKind::Cosine => "cosine",
            MetricKind::Mahalanobis => "mahalanobis",
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(MetricKind::Euclidean),
            "cosine" => Ok(MetricKind::Cosine),
            "mahalanobis" => Ok(MetricKind::Mahalanobis),
            other => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
        }
    }
}

pub(crate) fn asymmetry(m: ArrayView2<'_, f64>) -> f64 {
    m.indexed_iter()
        .map(|((i, j), v)| (v - m[[j, i]]).abs())
        .fold(0.0, f64::max)
}

fn to_nalgebra(m: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: ArrayView2<'_, f64>) -> f64 {
    let sym = to_nalgebra(m);
    let sym = (&sym + sym.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// `q_ij = (a_i - b_j)^T M (a_i - b_j)`, or the squared Euclidean distance
/// when `m` is `None`. Computed from differences so coincident points give
/// exactly zero.
pub(crate) fn squared_distances(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    m: Option<ArrayView2<'_, f64>>,
) -> Array2<f64> {
    let (n, d) = a.dim();
    let k = b.nrows();
    let mut q = Array2::zeros((n, k));
    match m {
        None => {
            for i in 0..n {
                let ai = a.row(i);
                for j in 0..k {
                    let bj = b.row(j);
                    q[[i, j]] = ai.iter().zip(bj.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                }
            }
        }
        Some(m) => {
            // (M d)_k = sum_l M_kl d_l, so the images of the rows are A M^T.
            let am = a.dot(&m.t());
            let bm = b.dot(&m.t());
            for i in 0..n {
                for j in 0..k {
                    let mut s = 0.0;
                    for l in 0..d {
                        s += (a[[i, l]] - b[[j, l]]) * (am[[i, l]] - bm[[j, l]]);
                    }
                    q[[i, j]] = s;
                }
            }
        }
    }
    q
}

/// Row norms floored at 1e-12.
pub(crate) fn row_norms(a: ArrayView2<'_, f64>) -> Vec<f64> {
    a.outer_iter()
        .map(|r| r.dot(&r).sqrt().max(NORM_FLOOR))
        .collect()
}

/// `S_ij = cos(a_i, b_j)`.
pub(crate) fn cosine_similarities(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let na = row_norms(a);
    let nb = row_norms(b);
    let mut s = a.dot(&b.t());
    for ((i, j), v) in s.indexed_iter_mut() {
        *v /= na[i] * nb[j];
    }
    s
}

/// Rectangular matrix of metric distances between every `za_i` and `zb_j`.
pub fn pairwise_distances(
    za: &EmbeddingSet,
    zb: &EmbeddingSet,
    metric: &GroundMetric,
) -> Result<Array2<f64>> {
    if za.dim() != zb.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedding dims {} and {}",
            za.dim(),
            zb.dim()
        )));
    }
    match metric {
        GroundMetric::Euclidean => {
            Ok(squared_distances(za.view(), zb.view(), None).mapv(|q| q.max(0.0).sqrt()))
        }
        GroundMetric::CosineDistance => {
            Ok(cosine_similarities(za.view(), zb.view()).mapv(|s| (1.0 - s).clamp(0.0, 2.0)))
        }
        GroundMetric::Mahalanobis(m) => {
            if m.dim() != za.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "interaction matrix is {0}x{0}, embeddings have dim {1}",
                    m.dim(),
                    za.dim()
                )));
            }
            let q = squared_distances(za.view(), zb.view(), Some(m.view()));
            if let Some(bad) = q.iter().find(|v| **v < -1e-6) {
                return Err(Error::NonPsd(*bad));
            }
            Ok(q.mapv(|q| q.max(SQRT_FLOOR).sqrt()))
        }
    }
}

/// [`pairwise_distances`] for two minibatches of equal size.
pub fn pairwise_cost(za: &EmbeddingSet, zb: &EmbeddingSet, metric: &GroundMetric) -> Result<CostMatrix> {
    CostMatrix::new(pairwise_distances(za, zb, metric)?)
}

/// Nearest PSD matrix (Frobenius) to the symmetric part of `raw`, with
/// eigenvalues clipped below at [`EIGEN_FLOOR`].
pub fn project_psd(raw: ArrayView2<'_, f64>) -> Result<InteractionMatrix> {
    let (r, c) = raw.dim();
    if r != c || r == 0 {
        return Err(Error::DimensionMismatch(format!(
            "projection needs a square matrix, got {r}x{c}"
        )));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix to project".into()));
    }
    let a = to_nalgebra(raw);
    let sym = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    let m = Array2::from_shape_fn((r, r), |(i, j)| 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]));
    Ok(InteractionMatrix { m })
}

/// `Proj(A/2 + A^T/2 + I)` with `A_ij ~ N(0, 0.01)`, deterministic in `seed`.
pub fn init_interaction(d: usize, seed: u64) -> InteractionMatrix {
    assert!(d >= 1, "interaction matrix dimension must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let a = Array2::from_shape_fn((d, d), |_| normal.sample(&mut rng));
    let m = (&a + &a.t()) * 0.5 + Array2::<f64>::eye(d);
    project_psd(m.view()).expect("finite init")
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    use super::*;

    fn set(v: Array2<f64>) -> EmbeddingSet {
        EmbeddingSet::new(v).unwrap()
    }

    fn random(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_mahalanobis_is_euclidean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = set(random(&mut rng, 5, 4));
        let b = set(random(&mut rng, 5, 4));
        let e = pairwise_distances(&a, &b, &GroundMetric::Euclidean).unwrap();
        let m = pairwise_distances(&a, &b, &GroundMetric::Mahalanobis(InteractionMatrix::identity(4))).unwrap();
        for (x, y) in e.iter().zip(m.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn self_distance_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = set(random(&mut rng, 6, 3));
        let c = pairwise_cost(&a, &a, &GroundMetric::Euclidean).unwrap();
        for i in 0..6 {
            assert_eq!(c.view()[[i, i]], 0.0);
            for j in 0..6 {
                assert_eq!(c.view()[[i, j]], c.view()[[j, i]]);
            }
        }
    }

    #[test]
    fn cosine_distance_range() {
        let a = set(array![[1.0, 0.0], [0.0, 2.0]]);
        let b = set(array![[-3.0, 0.0], [1.0, 0.0]]);
        let c = pairwise_distances(&a, &b, &GroundMetric::CosineDistance).unwrap();
        assert_abs_diff_eq!(c[[0, 0]], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c[[0, 1]], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c[[1, 1]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dimension_errors() {
        let a = set(Array2::zeros((2, 3)));
        let b = set(Array2::zeros((2, 4)));
        assert!(matches!(
            pairwise_distances(&a, &b, &GroundMetric::Euclidean),
            Err(Error::DimensionMismatch(_))
        ));
        let m = GroundMetric::Mahalanobis(InteractionMatrix::identity(2));
        assert!(matches!(pairwise_distances(&a, &a, &m), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn corrupted_interaction_is_rejected() {
        assert!(matches!(
            InteractionMatrix::new(array![[1.0, 0.0], [0.0, -1.0]]),
            Err(Error::NonPsd(_))
        ));
        assert!(InteractionMatrix::new(array![[1.0, 0.5], [0.0, 1.0]]).is_err());
        // Bypass validation to reach the quadratic-form guard.
        let bad = GroundMetric::Mahalanobis(InteractionMatrix { m: array![[1.0, 0.0], [0.0, -1.0]] });
        let a = set(array![[0.0, 0.0]]);
        let b = set(array![[0.0, 1.0]]);
        assert!(matches!(pairwise_distances(&a, &b, &bad), Err(Error::NonPsd(_))));
    }

    #[test]
    fn projection_of_identity_and_diagonal() {
        let p = project_psd(Array2::<f64>::eye(3).view()).unwrap();
        for ((i, j), v) in p.view().indexed_iter() {
            assert_abs_diff_eq!(*v, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-12);
        }
        let p = project_psd(array![[2.0, 0.0], [0.0, -3.0]].view()).unwrap();
        assert_abs_diff_eq!(p.view()[[0, 0]], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.view()[[1, 1]], 1e-8, epsilon = 1e-15);
        assert_abs_diff_eq!(p.view()[[0, 1]], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn projection_rejects_non_finite() {
        assert!(matches!(
            project_psd(array![[f64::NAN, 0.0], [0.0, 1.0]].view()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = random(&mut rng, 8, 8) * 3.0;
            let p = project_psd(a.view()).unwrap();
            let pp = project_psd(p.view()).unwrap();
            let diff = p.view().iter().zip(pp.view().iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-8);
        }
    }

    #[test]
    fn init_is_near_identity_and_deterministic() {
        let m = init_interaction(1, 5);
        assert!((m.view()[[0, 0]] - 1.0).abs() < 0.3);
        let a = init_interaction(16, 42);
        let b = init_interaction(16, 42);
        assert_eq!(a, b);
        assert_ne!(a, init_interaction(16, 43));
        assert!(min_eigenvalue(a.view()) > 0.0);
    }

    #[test]
    #[ignore = "1024x1024 eigendecomposition; run with --ignored"]
    fn init_full_size() {
        let m = init_interaction(1024, 7);
        assert!(asymmetry(m.view()) < 1e-9);
        assert!(min_eigenvalue(m.view()) > 0.0);
    }

    #[test]
    fn scaled_identity_scales_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = set(random(&mut rng, 4, 3));
        let b = set(random(&mut rng, 4, 3));
        let base = pairwise_distances(&a, &b, &GroundMetric::Euclidean).unwrap();
        for c in [0.25, 4.0] {
            let m = InteractionMatrix::new(Array2::<f64>::eye(3) * c).unwrap();
            let scaled = pairwise_distances(&a, &b, &GroundMetric::Mahalanobis(m)).unwrap();
            for (s, e) in scaled.iter().zip(base.iter()) {
                assert_abs_diff_eq!(*s, c.sqrt() * e, epsilon = 1e-9);
            }
        }
    }
}
