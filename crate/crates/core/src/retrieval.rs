//! Batch inference and evaluation: embedding stores, rankings in both
//! directions, submission files and MRR reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::assets::TrackAssets;
use crate::data::records::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, distance_matrix, mrr, Aggregation, Metric, Ranking, RankingTable};
use crate::scalar::Scalar;
use crate::text::{encode_text, ProjectionHead, SentenceEncoder};
use crate::training::ModelVariant;
use crate::visual::VisualModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Captions query tracks (submission direction).
    #[default]
    TextToVisual,
    VisualToText,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::TextToVisual => "text_to_visual",
            Direction::VisualToText => "visual_to_text",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "text_to_visual" => Ok(Direction::TextToVisual),
            "visual_to_text" => Ok(Direction::VisualToText),
            _ => Err(Error::Config(format!(
                "unknown direction `{s}` (text_to_visual or visual_to_text)"
            ))),
        }
    }
}

/// Candidate order by aggregate distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankOrder {
    /// Nearest first.
    #[default]
    Asc,
    /// Farthest first.
    Desc,
}

impl FromStr for RankOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asc" => Ok(RankOrder::Asc),
            "desc" => Ok(RankOrder::Desc),
            _ => Err(Error::Config(format!("unknown rank order `{s}` (asc or desc)"))),
        }
    }
}

/// What counts as one query when captions search tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// All caption rows of a track form one query (min over the matrix).
    #[default]
    Track,
    /// Every caption row is its own query.
    Sentence,
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryMode::Track => "track",
            QueryMode::Sentence => "sentence",
        })
    }
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "track" => Ok(QueryMode::Track),
            "sentence" => Ok(QueryMode::Sentence),
            _ => Err(Error::Config(format!("unknown query mode `{s}` (track or sentence)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub id: String,
    pub visual: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
}

/// Visual and caption embeddings of every track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStore {
    pub variant: ModelVariant,
    pub seed: u64,
    pub entries: Vec<StoreEntry>,
}

pub const STORE_FILE: &str = "embeddings.json";

impl EmbeddingStore {
    pub fn new(variant: ModelVariant, seed: u64, entries: Vec<StoreEntry>) -> Result<Self> {
        let s = Self {
            variant,
            seed,
            entries,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (va, ta) = (self.variant.visual_arity(), self.variant.text_arity());
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Config(format!("duplicate id `{}` in store", e.id)));
            }
            if e.visual.len() != va || e.text.len() != ta {
                return Err(Error::Shape(format!(
                    "entry `{}` has arities {}/{}, variant {} needs {va}/{ta}",
                    e.id,
                    e.visual.len(),
                    e.text.len(),
                    self.variant
                )));
            }
        }
        Ok(())
    }

    /// Writes `embeddings.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(STORE_FILE), serde_json::to_string(self)?.as_bytes())
    }

    /// Reads a store from a directory (or a file path directly).
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(STORE_FILE)
        } else {
            path.to_path_buf()
        };
        if !file.exists() {
            return Err(Error::MissingFile(file));
        }
        let s: Self = serde_json::from_str(&fs::read_to_string(file)?)?;
        s.validate()?;
        Ok(s)
    }
}

fn to_f64_rows<T: Scalar>(t: &crate::tensor::Tensor<T>) -> Vec<Vec<f64>> {
    t.to_rows()
        .into_iter()
        .map(|r| r.into_iter().map(Scalar::as_f64).collect())
        .collect()
}

/// Eval-mode embeddings of every track. Subsampling is seeded by
/// `(seed, track id)`, so results do not depend on `jobs`.
#[allow(clippy::too_many_arguments)]
pub fn embed_all<T: Scalar, E: SentenceEncoder<T> + ?Sized>(
    model: &VisualModel<T>,
    enc: &E,
    head: &ProjectionHead<T>,
    variant: ModelVariant,
    d: &Dataset,
    assets: &dyn TrackAssets,
    seed: u64,
    jobs: usize,
) -> Result<EmbeddingStore> {
    if model.mode() != variant.visual_mode() {
        return Err(Error::Config(format!("model head {} does not match {variant}", model.mode())));
    }
    let work = || -> Result<Vec<StoreEntry>> {
        d.tracks
            .par_iter()
            .map(|t| {
                let v = model.embed(t, assets, d.frame_size, seed)?;
                let x = encode_text(&t.captions, variant.text_mode(), enc, head)?;
                Ok(StoreEntry {
                    id: t.id.clone(),
                    visual: to_f64_rows(&v.rows),
                    text: to_f64_rows(&x.rows),
                })
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let entries = pool.install(work)?;
    EmbeddingStore::new(variant, seed, entries)
}

/// `min` over the distance matrix between the two sides of the pair.
pub fn pair_distance(visual: &[Vec<f64>], text: &[Vec<f64>], metric: Metric) -> Result<f64> {
    Ok(aggregate(&distance_matrix(visual, text, metric)?, Aggregation::Min))
}

/// One ranking per query over all candidates; ties resolve by ascending id.
pub fn rank(store: &EmbeddingStore, direction: Direction, metric: Metric, order: RankOrder) -> Result<RankingTable> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    let mut rankings = Vec::with_capacity(store.len());
    for q in &store.entries {
        let mut scored = store
            .entries
            .iter()
            .map(|c| {
                let d = match direction {
                    Direction::TextToVisual => pair_distance(&c.visual, &q.text, metric)?,
                    Direction::VisualToText => pair_distance(&q.visual, &c.text, metric)?,
                };
                Ok((d, c.id.as_str()))
            })
            .collect::<Result<Vec<_>>>()?;
        sort_scored(&mut scored, order);
        let candidates = scored.into_iter().map(|(_, id)| id.to_string()).collect();
        rankings.push(Ranking::new(q.id.clone(), candidates, &q.id));
    }
    Ok(RankingTable { rankings })
}

fn sort_scored(scored: &mut [(f64, &str)], order: RankOrder) {
    scored.sort_by(|a, b| {
        let by_dist = match order {
            RankOrder::Asc => a.0.total_cmp(&b.0),
            RankOrder::Desc => b.0.total_cmp(&a.0),
        };
        by_dist.then_with(|| a.1.cmp(b.1))
    });
}

/// Text-to-visual rankings with one query per caption row, named
/// `<id>#<row>`; the truth is the track the caption belongs to.
pub fn rank_sentences(store: &EmbeddingStore, metric: Metric, order: RankOrder) -> Result<RankingTable> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    let mut rankings = Vec::new();
    for q in &store.entries {
        for (k, row) in q.text.iter().enumerate() {
            let query = std::slice::from_ref(row);
            let mut scored = store
                .entries
                .iter()
                .map(|c| Ok((pair_distance(&c.visual, query, metric)?, c.id.as_str())))
                .collect::<Result<Vec<_>>>()?;
            sort_scored(&mut scored, order);
            let candidates = scored.into_iter().map(|(_, id)| id.to_string()).collect();
            rankings.push(Ranking::new(format!("{}#{k}", q.id), candidates, &q.id));
        }
    }
    Ok(RankingTable { rankings })
}

/// [`rank`] or [`rank_sentences`]; sentence queries only exist text-to-visual.
pub fn rank_queries(
    store: &EmbeddingStore,
    direction: Direction,
    metric: Metric,
    order: RankOrder,
    queries: QueryMode,
) -> Result<RankingTable> {
    match (queries, direction) {
        (QueryMode::Track, _) => rank(store, direction, metric, order),
        (QueryMode::Sentence, Direction::TextToVisual) => rank_sentences(store, metric, order),
        (QueryMode::Sentence, Direction::VisualToText) => {
            Err(Error::Config("sentence queries need the text_to_visual direction".into()))
        }
    }
}

/// Query id to candidate ids, best first; keys sorted.
pub type Submission = BTreeMap<String, Vec<String>>;

pub fn submission(table: &RankingTable) -> Submission {
    table
        .rankings
        .iter()
        .map(|r| (r.query.clone(), r.candidates.clone()))
        .collect()
}

pub fn write_submission(table: &RankingTable, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&submission(table))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_submission(path: &Path) -> Result<Submission> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mrr: f64,
    pub top10: f64,
    /// Rank of the true match to number of queries at that rank.
    pub ranks: BTreeMap<usize, usize>,
    pub seed: u64,
    pub direction: Direction,
    pub metric: Metric,
}

pub fn report_from_table(table: &RankingTable, seed: u64, direction: Direction, metric: Metric) -> Result<Report> {
    let ranks = table.ranks()?;
    let mut hist = BTreeMap::new();
    for &r in &ranks {
        *hist.entry(r).or_insert(0) += 1;
    }
    let top10 = ranks.iter().filter(|&&r| r <= 10).count() as f64 / ranks.len().max(1) as f64;
    Ok(Report {
        mrr: mrr(table)?,
        top10,
        ranks: hist,
        seed,
        direction,
        metric,
    })
}

pub fn evaluate(store: &EmbeddingStore, direction: Direction, metric: Metric, order: RankOrder) -> Result<Report> {
    evaluate_queries(store, direction, metric, order, QueryMode::Track)
}

pub fn evaluate_queries(
    store: &EmbeddingStore,
    direction: Direction,
    metric: Metric,
    order: RankOrder,
    queries: QueryMode,
) -> Result<Report> {
    let table = rank_queries(store, direction, metric, order, queries)?;
    report_from_table(&table, store.seed, direction, metric)
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
