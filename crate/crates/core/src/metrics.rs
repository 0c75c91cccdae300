//! Distances, distance matrices, aggregation, tuple statistics and MRR.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Distance used between two embedding rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `1 - cos(u, v)`, in `[0, 2]`.
    CosineMetric,
    #[default]
    Euclidean,
}

impl Metric {
    pub fn eval<T: Scalar>(self, u: &[T], v: &[T]) -> Result<T> {
        match self {
            Metric::CosineMetric => cosine_metric(u, v),
            Metric::Euclidean => euclidean(u, v),
        }
    }

    /// Partial derivatives `(∂d/∂u, ∂d/∂v)` given the already computed
    /// distance `value`. Euclidean uses the zero subgradient at `u == v`.
    pub fn grad<T: Scalar>(self, u: &[T], v: &[T], value: T) -> (Vec<T>, Vec<T>) {
        match self {
            Metric::Euclidean => {
                if value == T::zero() {
                    return (vec![T::zero(); u.len()], vec![T::zero(); v.len()]);
                }
                let gu: Vec<T> = u.iter().zip(v).map(|(&a, &b)| (a - b) / value).collect();
                let gv = gu.iter().map(|&x| -x).collect();
                (gu, gv)
            }
            Metric::CosineMetric => {
                let nu = norm(u);
                let nv = norm(v);
                let dot = dot(u, v);
                let inv = T::one() / (nu * nv);
                let gu = u
                    .iter()
                    .zip(v)
                    .map(|(&a, &b)| -(b * inv - dot * a * inv / (nu * nu)))
                    .collect();
                let gv = u
                    .iter()
                    .zip(v)
                    .map(|(&a, &b)| -(a * inv - dot * b * inv / (nv * nv)))
                    .collect();
                (gu, gv)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::CosineMetric => "cosine_metric",
            Metric::Euclidean => "euclidean",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cosine_metric" | "cosine" => Ok(Metric::CosineMetric),
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).map(|(&a, &b)| a * b).sum()
}

fn norm<T: Scalar>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

fn check_dims<T>(u: &[T], v: &[T]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    Ok(())
}

/// One plus the negated cosine similarity.
pub fn cosine_metric<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    check_dims(u, v)?;
    let nu = norm(u);
    let nv = norm(v);
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::ZeroVector);
    }
    let sim = (dot(u, v) / (nu * nv)).max(-T::one()).min(T::one());
    Ok(T::one() - sim)
}

pub fn euclidean<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    check_dims(u, v)?;
    Ok(u
        .iter()
        .zip(v)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        .sqrt())
}

/// Distances between every visual row and every text row.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> DistanceMatrix<T> {
    /// Builds a matrix from raw entries; entries must be non-negative.
    pub fn from_values(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if rows * cols != values.len() || values.is_empty() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|&v| v < T::zero() || !v.is_finite()) {
            return Err(Error::Shape("distance entries must be finite and >= 0".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, m: usize, n: usize) -> T {
        self.values[m * self.cols + n]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }
}

fn check_arity(n: usize, side: &str) -> Result<()> {
    if n == 1 || n == 3 {
        Ok(())
    } else {
        Err(Error::Shape(format!("{side} arity must be 1 or 3, got {n}")))
    }
}

/// Entry `(m, n)` is `metric(visual[m], text[n])`.
pub fn distance_matrix<T: Scalar, R: AsRef<[T]>>(
    visual: &[R],
    text: &[R],
    metric: Metric,
) -> Result<DistanceMatrix<T>> {
    check_arity(visual.len(), "visual")?;
    check_arity(text.len(), "text")?;
    let mut values = Vec::with_capacity(visual.len() * text.len());
    for v in visual {
        for t in text {
            values.push(metric.eval(v.as_ref(), t.as_ref())?);
        }
    }
    Ok(DistanceMatrix {
        rows: visual.len(),
        cols: text.len(),
        values,
    })
}

/// Reduction applied to a distance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Min,
    Mean,
}

pub fn aggregate<T: Scalar>(d: &DistanceMatrix<T>, mode: Aggregation) -> T {
    match mode {
        Aggregation::Min => d.values.iter().copied().fold(T::infinity(), T::min),
        Aggregation::Mean => {
            d.values.iter().copied().sum::<T>() / lit::<T>(d.values.len() as f64)
        }
    }
}

/// Within-triplet and across-track caption distance statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntraInterReport {
    pub d_intra_mean: f64,
    pub d_intra_var: f64,
    pub d_inter_mean: f64,
    pub d_inter_var: f64,
    pub metric: Metric,
}

#[derive(Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn population_var(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).max(0.0)
        }
    }
}

/// Intra statistics run over the 3 unordered pairs of each track; inter
/// statistics over all 9 cross pairs of every unordered track pair.
/// Variances are population variances.
pub fn intra_inter_report<T: Scalar, R: AsRef<[T]>>(
    tracks: &[[R; 3]],
    metric: Metric,
) -> Result<IntraInterReport> {
    if tracks.len() < 2 {
        return Err(Error::TooFewTracks {
            needed: 2,
            got: tracks.len(),
        });
    }
    let mut intra = Welford::default();
    for t in tracks {
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            intra.push(metric.eval(t[a].as_ref(), t[b].as_ref())?.as_f64());
        }
    }
    let mut inter = Welford::default();
    for i in 0..tracks.len() {
        for j in i + 1..tracks.len() {
            for a in &tracks[i] {
                for b in &tracks[j] {
                    inter.push(metric.eval(a.as_ref(), b.as_ref())?.as_f64());
                }
            }
        }
    }
    Ok(IntraInterReport {
        d_intra_mean: intra.mean,
        d_intra_var: intra.population_var(),
        d_inter_mean: inter.mean,
        d_inter_var: inter.population_var(),
        metric,
    })
}

/// Candidate ordering for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub query: String,
    /// Best first.
    pub candidates: Vec<String>,
    /// 1-based rank of the ground-truth candidate, if present.
    pub rank_of_truth: Option<usize>,
}

impl Ranking {
    pub fn new(query: impl Into<String>, candidates: Vec<String>, truth: &str) -> Self {
        let rank_of_truth = candidates.iter().position(|c| c == truth).map(|p| p + 1);
        Self {
            query: query.into(),
            candidates,
            rank_of_truth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RankingTable {
    pub rankings: Vec<Ranking>,
}

impl RankingTable {
    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    pub fn ranks(&self) -> Result<Vec<usize>> {
        self.rankings
            .iter()
            .map(|r| r.rank_of_truth.ok_or_else(|| Error::MissingTruth(r.query.clone())))
            .collect()
    }
}

/// Mean over queries of `1 / rank_of_truth`.
pub fn mrr(table: &RankingTable) -> Result<f64> {
    let ranks = table.ranks()?;
    if ranks.is_empty() {
        return Err(Error::EmptyStore);
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Expected MRR of uniformly random rankings over `n` candidates: `H(n) / n`.
pub fn random_mrr_expectation(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64
}
