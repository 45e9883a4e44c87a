//! Retrieval ranking, recall@k and the modality gap.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::metric::{cosine_similarities, pairwise_distances, EmbeddingSet, GroundMetric, NORM_FLOOR};
use crate::model::{Checkpoint, EncoderPair};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Rows are first-modality queries, columns second-modality candidates.
    AudioToText,
    TextToAudio,
}

/// What a score means.
#[derive(Clone, Debug, PartialEq)]
pub enum Scoring {
    /// Negated ground cost under the learned metric.
    NegatedCost(GroundMetric),
    Cosine,
}

/// `scores[q][c]`: higher is a better match of candidate `c` for query `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingMatrix {
    scores: Array2<f64>,
    pub scoring: Scoring,
    pub direction: Direction,
}

impl RankingMatrix {
    pub fn new(scores: Array2<f64>, scoring: Scoring, direction: Direction) -> Result<Self> {
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ranking scores".into()));
        }
        Ok(Self { scores, scoring, direction })
    }

    pub fn scores(&self) -> ArrayView2<'_, f64> {
        self.scores.view()
    }

    /// The same scores seen from the other modality.
    pub fn transposed(&self) -> Self {
        let direction = match self.direction {
            Direction::AudioToText => Direction::TextToAudio,
            Direction::TextToAudio => Direction::AudioToText,
        };
        Self {
            scores: self.scores.t().to_owned(),
            scoring: self.scoring.clone(),
            direction,
        }
    }

    /// Best candidate per query, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.scores
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Scores between already-encoded embeddings.
pub fn score_embeddings(za: &EmbeddingSet, zb: &EmbeddingSet, scoring: &Scoring) -> Result<RankingMatrix> {
    let scores = match scoring {
        Scoring::NegatedCost(metric) => pairwise_distances(za, zb, metric)?.mapv(|c| -c),
        Scoring::Cosine => {
            if za.dim() != zb.dim() {
                return Err(Error::DimensionMismatch(format!("embedding dims {} and {}", za.dim(), zb.dim())));
            }
            cosine_similarities(za.view(), zb.view())
        }
    };
    RankingMatrix::new(scores, scoring.clone(), Direction::AudioToText)
}

pub fn encode(
    encoders: &EncoderPair,
    xs: ArrayView2<'_, f64>,
    ys: ArrayView2<'_, f64>,
) -> Result<(EmbeddingSet, EmbeddingSet)> {
    Ok((
        EmbeddingSet::new(encoders.theta.forward(xs)?)?,
        EmbeddingSet::new(encoders.phi.forward(ys)?)?,
    ))
}

/// Encodes both test sets and scores every first-modality query against
/// every second-modality candidate.
pub fn rank(ckpt: &Checkpoint, xs: ArrayView2<'_, f64>, ys: ArrayView2<'_, f64>) -> Result<RankingMatrix> {
    let (za, zb) = encode(&ckpt.encoders, xs, ys)?;
    score_embeddings(&za, &zb, &ckpt.scoring())
}

/// `ks` paired with the percentage of queries whose true candidate
/// `ground_truth[q]` ranks in the top `k`. A candidate outranks the true one
/// if its score is higher, or equal with a lower index.
pub fn recall_at_k(ranking: &RankingMatrix, ground_truth: &[usize], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    let (nq, nc) = ranking.scores.dim();
    if ground_truth.len() != nq {
        return Err(Error::LengthMismatch { x: nq, y: ground_truth.len() });
    }
    if let Some(bad) = ground_truth.iter().find(|t| **t >= nc) {
        return Err(Error::InvalidConfig(format!("ground truth index {bad} with {nc} candidates")));
    }
    let positions: Vec<usize> = ranking
        .scores
        .outer_iter()
        .zip(ground_truth)
        .map(|(row, &t)| {
            let s = row[t];
            row.iter()
                .enumerate()
                .filter(|&(j, v)| *v > s || (*v == s && j < t))
                .count()
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = positions.iter().filter(|p| **p < k).count();
            (k, 100.0 * hits as f64 / nq.max(1) as f64)
        })
        .collect())
}

/// `|| mean(a / |a|) - mean(b / |b|) ||_2`.
pub fn modality_gap(za: &EmbeddingSet, zb: &EmbeddingSet) -> Result<f64> {
    if za.dim() != zb.dim() {
        return Err(Error::DimensionMismatch(format!("embedding dims {} and {}", za.dim(), zb.dim())));
    }
    let centroid = |z: &EmbeddingSet| -> Result<Vec<f64>> {
        let mut c = vec![0.0; z.dim()];
        for (i, row) in z.view().outer_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if n < NORM_FLOOR {
                return Err(Error::ZeroVector(i));
            }
            for (ck, v) in c.iter_mut().zip(row.iter()) {
                *ck += v / n;
            }
        }
        let len = z.len() as f64;
        Ok(c.into_iter().map(|v| v / len).collect())
    };
    let (ca, cb) = (centroid(za)?, centroid(zb)?);
    Ok(ca.iter().zip(&cb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recalls {
    fn from_pairs(pairs: &[(usize, f64)]) -> Self {
        let get = |k| pairs.iter().find(|(kk, _)| *kk == k).map(|p| p.1).unwrap_or(f64::NAN);
        Self { r1: get(1), r5: get(5), r10: get(10) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub text_to_audio: Recalls,
    pub audio_to_text: Recalls,
    pub modality_gap: f64,
}

impl RetrievalReport {
    pub fn avg_r1(&self) -> f64 {
        0.5 * (self.text_to_audio.r1 + self.audio_to_text.r1)
    }
}

/// Full-split retrieval report for encoders under `scoring`.
pub fn evaluate_encoders(encoders: &EncoderPair, scoring: &Scoring, test: &PairedDataset) -> Result<RetrievalReport> {
    let (za, zb) = encode(encoders, test.xs(), test.ys())?;
    let a2t = score_embeddings(&za, &zb, scoring)?;
    let t2a = a2t.transposed();
    let truth = test.alignment();
    let mut inverse = vec![0; truth.len()];
    for (i, &t) in truth.iter().enumerate() {
        inverse[t] = i;
    }
    let ks = [1, 5, 10];
    Ok(RetrievalReport {
        audio_to_text: Recalls::from_pairs(&recall_at_k(&a2t, truth, &ks)?),
        text_to_audio: Recalls::from_pairs(&recall_at_k(&t2a, &inverse, &ks)?),
        modality_gap: modality_gap(&za, &zb)?,
    })
}

pub fn evaluate(ckpt: &Checkpoint, test: &PairedDataset) -> Result<RetrievalReport> {
    evaluate_encoders(&ckpt.encoders, &ckpt.scoring(), test)
}
