//! Deterministic synthetic corpus: tracks with trajectories, templated
//! caption triplets, distractor detections and procedurally drawn crops.
//!
//! Every random draw comes from a stream derived from `(seed, track, frame)`,
//! so any part of the corpus can be regenerated on demand without
//! materializing the rest.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::assets::TrackAssets;
use crate::data::records::{
    save_dataset, Attributes, Dataset, FrameDetections, FrameRef, ObjectRecord, RawDetection,
    TrackRecord, FEATURE_DIM,
};
use crate::data::sampling::{filter_detections, DEFAULT_SCORE_THRESHOLD};
use crate::error::{Error, Result};
use crate::seed::stream;

const STREAM_TRACK: u64 = 1;
const STREAM_DET: u64 = 2;
const STREAM_CROP: u64 = 3;
const STREAM_PROTO: u64 = 4;

/// Paper-reported mean distinct values per caption triplet (type, color, action).
pub const TARGET_DISTINCT_TYPES: f64 = 2.07;
pub const TARGET_DISTINCT_COLORS: f64 = 1.85;
pub const TARGET_DISTINCT_ACTIONS: f64 = 2.63;

/// Named colors the renderer can draw.
pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [200, 30, 30]),
    ("blue", [30, 70, 210]),
    ("green", [40, 160, 60]),
    ("yellow", [235, 210, 40]),
    ("white", [240, 240, 240]),
    ("black", [25, 25, 25]),
    ("gray", [135, 135, 135]),
    ("orange", [240, 135, 25]),
];

pub const VEHICLE_TYPES: [&str; 6] = ["sedan", "suv", "pickup truck", "van", "bus", "box truck"];

pub const ACTIONS: [&str; 8] = [
    "goes straight",
    "turns left",
    "turns right",
    "stops",
    "makes a u-turn",
    "changes to the left lane",
    "changes to the right lane",
    "slows down",
];

pub const DEFAULT_TEMPLATES: [&str; 5] = [
    "a {color} {type} {action}.",
    "{color} {type} {action} at the intersection.",
    "the {color} {type} {action} on the road.",
    "a {type} in {color} {action}.",
    "there is a {color} {type} that {action}.",
];

/// Detector classes that may appear in the synthetic sidecar
/// (COCO-style: person, bicycle, car, motorcycle, bus, truck, light, stop sign).
pub const DETECTOR_CLASSES: [u32; 8] = [0, 1, 2, 3, 5, 7, 9, 11];
/// Classes the synthetic detector emits but the filter rejects.
const IRRELEVANT_CLASSES: [u32; 2] = [13, 56];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameLengthDist {
    Uniform {
        min: usize,
        max: usize,
    },
    /// Log-normal with the given arithmetic mean, clamped to `[min, max]`.
    LogNormal {
        mean: f64,
        sigma: f64,
        min: usize,
        max: usize,
    },
}

impl FrameLengthDist {
    fn validate(&self) -> Result<()> {
        let (min, max) = match *self {
            FrameLengthDist::Uniform { min, max } => (min, max),
            FrameLengthDist::LogNormal {
                mean,
                sigma,
                min,
                max,
            } => {
                if !(mean > 0.0 && sigma >= 0.0 && mean.is_finite() && sigma.is_finite()) {
                    return Err(Error::Spec("log-normal needs mean > 0, sigma >= 0".into()));
                }
                (min, max)
            }
        };
        if min == 0 || min > max {
            return Err(Error::Spec(format!("frame length range [{min}, {max}] invalid")));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match *self {
            FrameLengthDist::Uniform { min, max } => rng.random_range(min..=max),
            FrameLengthDist::LogNormal {
                mean,
                sigma,
                min,
                max,
            } => {
                let mu = mean.ln() - sigma * sigma / 2.0;
                let d = LogNormal::new(mu, sigma).expect("validated");
                (d.sample(rng).round() as usize).clamp(min, max)
            }
        }
    }
}

/// Probability that a caption mentions a different value than the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyProbs {
    pub color: f64,
    pub vehicle_type: f64,
    pub action: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    /// Poisson mean of raw detections per frame.
    pub mean: f64,
    pub max: usize,
    /// Probability the detector also reports the tracked vehicle itself.
    pub tracked_duplicate_prob: f64,
    /// Probability a raw detection falls below the score threshold.
    pub low_score_prob: f64,
}

/// Generator settings; fields missing from a spec file take the
/// [`SyntheticSpec::desk`] values for 32 tracks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_tracks: usize,
    pub frame_length: FrameLengthDist,
    /// Scene `(width, height)` in pixels.
    pub frame_size: [u32; 2],
    /// Rendered crop `(width, height)`.
    pub crop_size: [u32; 2],
    pub colors: Vec<String>,
    pub types: Vec<String>,
    pub actions: Vec<String>,
    /// Caption templates with `{color}`, `{type}` and `{action}` slots.
    pub templates: Vec<String>,
    pub inconsistency: InconsistencyProbs,
    pub distractors: DistractorSpec,
    pub allowed_classes: Vec<u32>,
    pub score_threshold: f32,
}

/// Expected distinct values in a triplet where each caption independently
/// keeps the true value with probability `1 - p` and otherwise picks one of
/// the `k - 1` others uniformly.
pub fn expected_distinct(p: f64, k: usize) -> f64 {
    if k <= 1 {
        return 1.0;
    }
    let others = (k - 1) as f64;
    1.0 - p.powi(3) + others * (1.0 - (1.0 - p / others).powi(3))
}

/// Swap probability whose [`expected_distinct`] hits `target` (bisection on
/// the increasing branch `[0, (k-1)/k]`); clamps to the reachable range.
pub fn calibrate_probability(target: f64, k: usize) -> f64 {
    if k <= 1 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, (k - 1) as f64 / k as f64);
    if target >= expected_distinct(hi, k) {
        return hi;
    }
    if target <= 1.0 {
        return 0.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected_distinct(mid, k) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::desk(32)
    }
}

impl SyntheticSpec {
    /// Small, attribute-consistent corpus of short tracks for desk-scale runs.
    pub fn desk(n_tracks: usize) -> Self {
        Self {
            n_tracks,
            frame_length: FrameLengthDist::Uniform { min: 8, max: 20 },
            frame_size: [1280, 720],
            crop_size: [32, 24],
            colors: PALETTE.iter().map(|(n, _)| n.to_string()).collect(),
            types: names(&VEHICLE_TYPES),
            actions: names(&ACTIONS),
            templates: names(&DEFAULT_TEMPLATES),
            inconsistency: InconsistencyProbs {
                color: 0.0,
                vehicle_type: 0.0,
                action: 0.0,
            },
            distractors: DistractorSpec {
                mean: 2.0,
                max: 4,
                tracked_duplicate_prob: 0.3,
                low_score_prob: 0.25,
            },
            allowed_classes: DETECTOR_CLASSES.to_vec(),
            score_threshold: DEFAULT_SCORE_THRESHOLD,
        }
    }

    /// Frame lengths (mean 81, range 1..3620) and caption disagreement rates
    /// matching the reported corpus statistics.
    pub fn paper_calibrated(n_tracks: usize) -> Self {
        let mut s = Self::desk(n_tracks);
        s.frame_length = FrameLengthDist::LogNormal {
            mean: 81.0,
            sigma: 0.9,
            min: 1,
            max: 3620,
        };
        s.crop_size = [110, 90];
        s.frame_size = [1920, 1080];
        s.inconsistency = InconsistencyProbs {
            color: calibrate_probability(TARGET_DISTINCT_COLORS, s.colors.len()),
            vehicle_type: calibrate_probability(TARGET_DISTINCT_TYPES, s.types.len()),
            action: calibrate_probability(TARGET_DISTINCT_ACTIONS, s.actions.len()),
        };
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tracks == 0 {
            return Err(Error::Spec("n_tracks must be >= 1".into()));
        }
        self.frame_length.validate()?;
        let probs = [
            ("inconsistency.color", self.inconsistency.color),
            ("inconsistency.vehicle_type", self.inconsistency.vehicle_type),
            ("inconsistency.action", self.inconsistency.action),
            ("distractors.tracked_duplicate_prob", self.distractors.tracked_duplicate_prob),
            ("distractors.low_score_prob", self.distractors.low_score_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Spec(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.distractors.mean >= 0.0 && self.distractors.mean.is_finite()) {
            return Err(Error::Spec("distractors.mean must be >= 0".into()));
        }
        if self.frame_size.iter().any(|&v| v < 64) || self.crop_size.iter().any(|&v| v < 8) {
            return Err(Error::Spec("frame_size >= 64 and crop_size >= 8 required".into()));
        }
        for c in &self.colors {
            if color_rgb(c).is_none() {
                return Err(Error::Spec(format!("unknown color `{c}`")));
            }
        }
        for t in &self.types {
            if !VEHICLE_TYPES.contains(&t.as_str()) {
                return Err(Error::Spec(format!("unknown vehicle type `{t}`")));
            }
        }
        for a in &self.actions {
            if !ACTIONS.contains(&a.as_str()) {
                return Err(Error::Spec(format!("unknown action `{a}`")));
            }
        }
        if self.colors.is_empty() || self.types.is_empty() || self.actions.is_empty() {
            return Err(Error::Spec("attribute vocabularies must be non-empty".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Spec("at least one caption template required".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Spec("score_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Sentinel class of the tracked vehicle: one past the largest allowed class.
    pub fn tracked_class(&self) -> u32 {
        self.allowed_classes.iter().copied().max().map_or(0, |m| m + 1)
    }
}

pub fn color_rgb(name: &str) -> Option<[u8; 3]> {
    PALETTE
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, c)| *c)
}

pub fn render_caption(template: &str, a: &Attributes) -> String {
    template
        .replace("{color}", &a.color)
        .replace("{type}", &a.vehicle_type)
        .replace("{action}", &a.action)
}

/// Generated corpus; detections and crops are rendered on demand.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub dataset: Dataset,
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let tracks = (0..spec.n_tracks)
        .map(|i| generate_track(spec, seed, i))
        .collect();
    let frame_size = [spec.frame_size[0] as f64, spec.frame_size[1] as f64];
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        seed,
        dataset: Dataset::new(frame_size, tracks)?,
    })
}

fn pick_slot<'a, R: Rng>(rng: &mut R, truth: &'a str, vocab: &'a [String], p: f64) -> &'a str {
    if vocab.len() > 1 && rng.random::<f64>() < p {
        let others: Vec<&String> = vocab.iter().filter(|v| v.as_str() != truth).collect();
        others.choose(rng).expect("vocab has others").as_str()
    } else {
        truth
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn type_box_size(vehicle_type: &str) -> [f64; 2] {
    match vehicle_type {
        "sedan" => [110.0, 70.0],
        "suv" => [110.0, 85.0],
        "pickup truck" => [125.0, 80.0],
        "van" => [110.0, 95.0],
        "bus" => [200.0, 110.0],
        _ => [170.0, 110.0],
    }
}

/// Pixel boxes for a trajectory of `n` frames.
fn trajectory<R: Rng>(rng: &mut R, action: &str, vehicle_type: &str, n: usize, frame: [f64; 2]) -> Vec<[f64; 4]> {
    let scale = frame[0] / 1280.0;
    let base = type_box_size(vehicle_type);
    let jitter = rng.random_range(0.9..1.1);
    let (bw, bh) = (base[0] * scale * jitter, base[1] * scale * jitter);
    let mut cx = rng.random_range(0.3..0.7) * frame[0];
    let mut cy = rng.random_range(0.3..0.7) * frame[1];
    let heading0 = rng.random_range(0.0..2.0 * PI);
    let travel = rng.random_range(0.25..0.4) * frame[0];
    let lateral = 0.08 * frame[0];
    let steps = (n.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(n);
    let mut prev_lat = 0.0;
    for k in 0..n {
        let t = k as f64 / steps;
        let x = cx.clamp(bw / 2.0, frame[0] - bw / 2.0);
        let y = cy.clamp(bh / 2.0, frame[1] - bh / 2.0);
        out.push([x - bw / 2.0, y - bh / 2.0, bw, bh]);
        let (heading, speed, lat) = match action {
            "turns left" => (heading0 - PI / 2.0 * smoothstep((t - 0.3) / 0.4), 1.0, 0.0),
            "turns right" => (heading0 + PI / 2.0 * smoothstep((t - 0.3) / 0.4), 1.0, 0.0),
            "makes a u-turn" => (heading0 + PI * smoothstep((t - 0.25) / 0.5), 1.0, 0.0),
            "stops" => (heading0, (1.0 - t / 0.6).max(0.0), 0.0),
            "slows down" => (heading0, 1.0 - 0.7 * t, 0.0),
            "changes to the left lane" => (heading0, 1.0, -smoothstep((t - 0.3) / 0.4)),
            "changes to the right lane" => (heading0, 1.0, smoothstep((t - 0.3) / 0.4)),
            _ => (heading0, 1.0, 0.0),
        };
        let step = travel / steps * speed;
        let dlat = (lat - prev_lat) * lateral;
        prev_lat = lat;
        cx += step * heading.cos() - dlat * heading0.sin();
        cy += step * heading.sin() + dlat * heading0.cos();
    }
    out
}

fn generate_track(spec: &SyntheticSpec, seed: u64, index: usize) -> TrackRecord {
    let mut rng = stream(seed, &[STREAM_TRACK, index as u64]);
    let truth = Attributes {
        color: spec.colors.choose(&mut rng).expect("non-empty").clone(),
        vehicle_type: spec.types.choose(&mut rng).expect("non-empty").clone(),
        action: spec.actions.choose(&mut rng).expect("non-empty").clone(),
    };
    let n = spec.frame_length.sample(&mut rng);
    let frame = [spec.frame_size[0] as f64, spec.frame_size[1] as f64];
    let boxes = trajectory(&mut rng, &truth.action, &truth.vehicle_type, n, frame);
    let mut caption_attrs = Vec::with_capacity(3);
    let mut captions = Vec::with_capacity(3);
    for _ in 0..3 {
        let a = Attributes {
            color: pick_slot(&mut rng, &truth.color, &spec.colors, spec.inconsistency.color).to_string(),
            vehicle_type: pick_slot(&mut rng, &truth.vehicle_type, &spec.types, spec.inconsistency.vehicle_type)
                .to_string(),
            action: pick_slot(&mut rng, &truth.action, &spec.actions, spec.inconsistency.action).to_string(),
        };
        let template = spec.templates.choose(&mut rng).expect("non-empty");
        captions.push(render_caption(template, &a));
        caption_attrs.push(a);
    }
    let caption_attributes: [Attributes; 3] = caption_attrs.try_into().expect("three captions");
    TrackRecord {
        id: format!("track-{index:05}"),
        frame_refs: (0..n as u64).map(FrameRef::Index).collect(),
        boxes,
        captions: captions.try_into().expect("three captions"),
        attributes: Some(truth),
        caption_attributes: Some(caption_attributes),
    }
}

fn class_prototype(seed: u64, cls: u32) -> Vec<f32> {
    let mut rng = stream(seed, &[STREAM_PROTO, cls as u64]);
    let n = Normal::new(0.0f32, 1.0).expect("valid normal");
    (0..FEATURE_DIM).map(|_| n.sample(&mut rng)).collect()
}

fn shapes_for(vehicle_type: &str) -> (Vec<[f64; 4]>, Vec<[f64; 4]>) {
    // (body rects, window rects) in normalized crop coordinates
    match vehicle_type {
        "sedan" => (
            vec![[0.08, 0.45, 0.92, 0.78], [0.28, 0.25, 0.72, 0.47]],
            vec![[0.33, 0.29, 0.67, 0.44]],
        ),
        "suv" => (vec![[0.08, 0.25, 0.92, 0.8]], vec![[0.15, 0.3, 0.85, 0.45]]),
        "pickup truck" => (
            vec![[0.08, 0.25, 0.45, 0.8], [0.45, 0.5, 0.92, 0.8]],
            vec![[0.14, 0.3, 0.4, 0.45]],
        ),
        "van" => (vec![[0.12, 0.12, 0.88, 0.82]], vec![[0.18, 0.18, 0.45, 0.38]]),
        "bus" => (vec![[0.03, 0.15, 0.97, 0.82]], vec![[0.06, 0.22, 0.94, 0.38]]),
        _ => (
            vec![[0.05, 0.4, 0.3, 0.82], [0.3, 0.1, 0.97, 0.82]],
            vec![[0.08, 0.45, 0.26, 0.58]],
        ),
    }
}

impl SyntheticCorpus {
    pub fn track(&self, index: usize) -> &TrackRecord {
        &self.dataset.tracks[index]
    }

    fn track_index(&self, track: &TrackRecord) -> Result<usize> {
        self.dataset
            .index_of(&track.id)
            .ok_or_else(|| Error::Schema {
                track: track.id.clone(),
                field: "id".into(),
                message: "track is not part of this synthetic corpus".into(),
            })
    }

    /// Raw detector output for one frame, before filtering.
    pub fn raw_detections(&self, index: usize, frame: usize) -> Vec<RawDetection> {
        let spec = &self.spec;
        let track = self.track(index);
        let mut rng = stream(self.seed, &[STREAM_DET, index as u64, frame as u64]);
        let count = if spec.distractors.mean > 0.0 {
            let p = Poisson::new(spec.distractors.mean).expect("validated");
            (p.sample(&mut rng) as usize).min(spec.distractors.max)
        } else {
            0
        };
        let noise = Normal::new(0.0f32, 0.3).expect("valid normal");
        let mut classes: Vec<u32> = spec.allowed_classes.clone();
        classes.extend_from_slice(&IRRELEVANT_CLASSES);
        let mut out = Vec::with_capacity(count + 1);
        let fs = self.dataset.frame_size;
        if rng.random::<f64>() < spec.distractors.tracked_duplicate_prob {
            let b = track.boxes[frame];
            let j = |v: f64, s: f64| (v / s) as f32;
            let bbox = [j(b[0], fs[0]), j(b[1], fs[1]), j(b[2], fs[0]), j(b[3], fs[1])];
            let cls = if track.attributes.as_ref().is_some_and(|a| a.vehicle_type == "bus") {
                5
            } else {
                2
            };
            let feat = class_prototype(self.seed, cls)
                .into_iter()
                .map(|v| v + noise.sample(&mut rng))
                .collect();
            out.push(RawDetection {
                cls,
                score: rng.random_range(0.9..1.0),
                bbox,
                feat,
            });
        }
        for _ in 0..count {
            let cls = *classes.choose(&mut rng).expect("non-empty");
            let w = rng.random_range(0.03f32..0.15);
            let h = rng.random_range(0.03f32..0.15);
            let x = rng.random_range(0.0..1.0 - w);
            let y = rng.random_range(0.0..1.0 - h);
            let score = if rng.random::<f64>() < spec.distractors.low_score_prob {
                rng.random_range(0.3f32..0.85)
            } else {
                rng.random_range(0.85f32..=1.0)
            };
            let feat = class_prototype(self.seed, cls)
                .into_iter()
                .map(|v| v + noise.sample(&mut rng))
                .collect();
            out.push(RawDetection {
                cls,
                score,
                bbox: [x, y, w, h],
                feat,
            });
        }
        out
    }

    pub fn detections(&self, index: usize, frame: usize) -> Result<Vec<ObjectRecord>> {
        let allowed: BTreeSet<u32> = self.spec.allowed_classes.iter().copied().collect();
        filter_detections(
            &self.raw_detections(index, frame),
            &allowed,
            self.spec.score_threshold,
        )
    }

    /// Sidecar records for every frame of every track, in track order.
    pub fn detection_records(&self) -> Result<Vec<FrameDetections>> {
        let mut out = Vec::new();
        for (i, t) in self.dataset.tracks.iter().enumerate() {
            for f in 0..t.n_frames() {
                out.push(FrameDetections {
                    track_id: t.id.clone(),
                    frame: f,
                    objects: self.detections(i, f)?,
                });
            }
        }
        Ok(out)
    }

    /// Crop of the tracked vehicle: a colored, type-shaped glyph over a
    /// textured background with per-frame lighting and placement jitter.
    pub fn render_crop(&self, index: usize, frame: usize) -> RgbImage {
        let [w, h] = self.spec.crop_size;
        let track = self.track(index);
        let attrs = track.attributes.as_ref().expect("synthetic tracks carry attributes");
        let mut rng = stream(self.seed, &[STREAM_CROP, index as u64, frame as u64]);
        let color = color_rgb(&attrs.color).unwrap_or([128, 128, 128]);
        let light: f64 = rng.random_range(0.85..1.1);
        let dx: f64 = rng.random_range(-0.05..0.05);
        let dy: f64 = rng.random_range(-0.05..0.05);
        let s: f64 = rng.random_range(0.92..1.05);
        let base: f64 = rng.random_range(70.0..110.0);
        let mut img = RgbImage::new(w, h);
        for px in img.pixels_mut() {
            let v = (base + rng.random_range(-25.0..25.0)).clamp(0.0, 255.0) as u8;
            *px = Rgb([v, v, v.saturating_add(5)]);
        }
        let (bodies, windows) = shapes_for(&attrs.vehicle_type);
        let wheels = [[0.15, 0.76, 0.3, 0.92], [0.7, 0.76, 0.85, 0.92]];
        let lit = |c: [u8; 3]| -> Rgb<u8> {
            Rgb(c.map(|v| (v as f64 * light).clamp(0.0, 255.0) as u8))
        };
        let mut fill = |r: &[f64; 4], c: Rgb<u8>| {
            let tx = |u: f64| ((0.5 + (u - 0.5) * s + dx) * w as f64).round() as i64;
            let ty = |v: f64| ((0.5 + (v - 0.5) * s + dy) * h as f64).round() as i64;
            for y in ty(r[1]).max(0)..ty(r[3]).min(h as i64) {
                for x in tx(r[0]).max(0)..tx(r[2]).min(w as i64) {
                    img.put_pixel(x as u32, y as u32, c);
                }
            }
        };
        for r in &bodies {
            fill(r, lit(color));
        }
        for r in &windows {
            fill(r, lit([60, 70, 90]));
        }
        for r in &wheels {
            fill(r, lit([35, 35, 35]));
        }
        img
    }

    /// Writes `dataset.json`, `detections.jsonl`, `spec.json` and
    /// `crops/<track_id>/<frame>.png` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_dataset(&self.dataset, &dir.join("dataset.json"))?;
        fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        {
            let mut det = BufWriter::new(fs::File::create(dir.join("detections.jsonl"))?);
            for (i, t) in self.dataset.tracks.iter().enumerate() {
                for f in 0..t.n_frames() {
                    let fd = FrameDetections {
                        track_id: t.id.clone(),
                        frame: f,
                        objects: self.detections(i, f)?,
                    };
                    serde_json::to_writer(&mut det, &fd)?;
                    det.write_all(b"\n")?;
                }
            }
            det.flush()?;
        }
        for (i, t) in self.dataset.tracks.iter().enumerate() {
            let tdir = dir.join("crops").join(&t.id);
            fs::create_dir_all(&tdir)?;
            for f in 0..t.n_frames() {
                self.render_crop(i, f).save(tdir.join(format!("{f}.png")))?;
            }
        }
        Ok(())
    }
}

impl TrackAssets for SyntheticCorpus {
    fn objects(&self, track: &TrackRecord, frame: usize) -> Result<Vec<ObjectRecord>> {
        self.detections(self.track_index(track)?, frame)
    }

    fn crop(&self, track: &TrackRecord, frame: usize) -> Result<RgbImage> {
        Ok(self.render_crop(self.track_index(track)?, frame))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expected_distinct_endpoints() {
        assert_eq!(expected_distinct(0.0, 6), 1.0);
        let k = 8;
        let uniform = k as f64 * (1.0 - ((k - 1) as f64 / k as f64).powi(3));
        assert!((expected_distinct(7.0 / 8.0, k) - uniform).abs() < 1e-12);
    }

    #[test]
    fn calibration_inverts_expectation() {
        for (target, k) in [(2.07, 6), (1.85, 8), (2.63, 8)] {
            let p = calibrate_probability(target, k);
            assert!((expected_distinct(p, k) - target).abs() < 1e-9, "{target} {k}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SyntheticSpec::desk(4);
        s.inconsistency.color = 1.5;
        assert!(matches!(generate_synthetic(&s, 0), Err(Error::Spec(_))));
        let mut s = SyntheticSpec::desk(4);
        s.frame_length = FrameLengthDist::Uniform { min: 5, max: 2 };
        assert!(generate_synthetic(&s, 0).is_err());
        let mut s = SyntheticSpec::desk(0);
        assert!(generate_synthetic(&s, 0).is_err());
        s.n_tracks = 2;
        s.colors.push("mauve".into());
        assert!(generate_synthetic(&s, 0).is_err());
    }

    #[test]
    fn boxes_stay_inside_the_scene() {
        let c = generate_synthetic(&SyntheticSpec::desk(40), 11).unwrap();
        let [fw, fh] = c.dataset.frame_size;
        for t in &c.dataset.tracks {
            for b in &t.boxes {
                assert!(b[0] >= -1e-9 && b[1] >= -1e-9);
                assert!(b[0] + b[2] <= fw + 1e-9 && b[1] + b[3] <= fh + 1e-9);
            }
        }
    }

    #[test]
    fn crops_have_requested_size() {
        let c = generate_synthetic(&SyntheticSpec::desk(2), 3).unwrap();
        let img = c.render_crop(1, 0);
        assert_eq!(img.dimensions(), (32, 24));
    }

    #[test]
    fn tracked_class_is_one_past_max() {
        assert_eq!(SyntheticSpec::desk(1).tracked_class(), 12);
    }
}
