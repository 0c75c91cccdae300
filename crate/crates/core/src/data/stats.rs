use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::records::{Attributes, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            n += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        (n > 0).then(|| Self {
            mean: sum / n as f64,
            min,
            max,
        })
    }
}

/// Mean number of distinct attribute values per caption triplet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeStats {
    pub types: f64,
    pub colors: f64,
    pub actions: f64,
    pub triplets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_tracks: usize,
    pub frames: Summary,
    pub caption_words: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attributes: Option<AttributeStats>,
}

pub fn word_count(caption: &str) -> usize {
    caption.split_whitespace().count()
}

/// Distinct values in one attribute slot, compared case-insensitively.
pub fn distinct_count<'a>(values: impl IntoIterator<Item = &'a str>) -> usize {
    values
        .into_iter()
        .map(|v| v.trim().to_lowercase())
        .collect::<HashSet<_>>()
        .len()
}

pub fn triplet_attribute_stats<'a>(
    triplets: impl IntoIterator<Item = &'a [Attributes; 3]>,
) -> Option<AttributeStats> {
    let (mut types, mut colors, mut actions, mut n) = (0usize, 0usize, 0usize, 0usize);
    for t in triplets {
        types += distinct_count(t.iter().map(|a| a.vehicle_type.as_str()));
        colors += distinct_count(t.iter().map(|a| a.color.as_str()));
        actions += distinct_count(t.iter().map(|a| a.action.as_str()));
        n += 1;
    }
    (n > 0).then(|| AttributeStats {
        types: types as f64 / n as f64,
        colors: colors as f64 / n as f64,
        actions: actions as f64 / n as f64,
        triplets: n,
    })
}

/// Corpus statistics; attribute means come from per-caption labels when the
/// dataset carries them.
pub fn compute_stats(d: &Dataset) -> Result<DatasetStats> {
    compute_stats_with(d, None)
}

/// Like [`compute_stats`], with per-caption labels supplied externally
/// (keyed by track id), which take precedence over embedded ones.
pub fn compute_stats_with(
    d: &Dataset,
    external: Option<&HashMap<String, [Attributes; 3]>>,
) -> Result<DatasetStats> {
    if d.tracks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let frames = Summary::of(d.tracks.iter().map(|t| t.n_frames() as f64)).expect("non-empty");
    let caption_words = Summary::of(
        d.tracks
            .iter()
            .flat_map(|t| t.captions.iter().map(|c| word_count(c) as f64)),
    )
    .expect("non-empty");
    let attributes = triplet_attribute_stats(d.tracks.iter().filter_map(|t| {
        external
            .and_then(|m| m.get(&t.id))
            .or(t.caption_attributes.as_ref())
    }));
    Ok(DatasetStats {
        n_tracks: d.n(),
        frames,
        caption_words,
        attributes,
    })
}
