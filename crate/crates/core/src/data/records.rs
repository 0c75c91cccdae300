//! Track, caption and detection records with their JSON / JSONL encodings.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Width of a detector feature vector.
pub const FEATURE_DIM: usize = 256;
/// Flattened width of one object slot: class, box, features.
pub const OBJECT_WIDTH: usize = 1 + 4 + FEATURE_DIM;
/// Scene size assumed when a dataset file omits `frame_size`.
pub const DEFAULT_FRAME_SIZE: [f64; 2] = [1920.0, 1080.0];

/// Image path or synthetic frame index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrameRef {
    Index(u64),
    Path(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub color: String,
    #[serde(rename = "type")]
    pub vehicle_type: String,
    pub action: String,
}

/// One single-vehicle tracking sequence and its caption triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub id: String,
    #[serde(rename = "frames")]
    pub frame_refs: Vec<FrameRef>,
    /// Pixel `(x, y, w, h)` with `(x, y)` the top-left corner.
    pub boxes: Vec<[f64; 4]>,
    #[serde(rename = "nl")]
    pub captions: [String; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Attributes>,
    /// Attribute values each caption actually mentions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_attributes: Option<[Attributes; 3]>,
}

impl TrackRecord {
    pub fn n_frames(&self) -> usize {
        self.boxes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Scene `(width, height)` used to normalize boxes.
    #[serde(default = "default_frame_size")]
    pub frame_size: [f64; 2],
    pub tracks: Vec<TrackRecord>,
}

fn default_frame_size() -> [f64; 2] {
    DEFAULT_FRAME_SIZE
}

impl Dataset {
    pub fn new(frame_size: [f64; 2], tracks: Vec<TrackRecord>) -> Result<Self> {
        let d = Self { frame_size, tracks };
        d.validate()?;
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.tracks.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.tracks.iter().position(|t| t.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_size[0] > 0.0 && self.frame_size[1] > 0.0) {
            return Err(schema("<root>", "frame_size", "must be positive"));
        }
        let mut seen = HashSet::new();
        for t in &self.tracks {
            if !seen.insert(t.id.as_str()) {
                return Err(schema(&t.id, "id", "duplicate track id"));
            }
            validate_track(t)?;
        }
        Ok(())
    }
}

fn schema(track: &str, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        track: track.to_string(),
        field: field.to_string(),
        message: message.into(),
    }
}

fn validate_track(t: &TrackRecord) -> Result<()> {
    if t.boxes.is_empty() {
        return Err(schema(&t.id, "boxes", "a track needs at least one frame"));
    }
    if t.boxes.len() != t.frame_refs.len() {
        return Err(schema(
            &t.id,
            "boxes",
            format!("{} boxes for {} frames", t.boxes.len(), t.frame_refs.len()),
        ));
    }
    for (i, b) in t.boxes.iter().enumerate() {
        if !b.iter().all(|v| v.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
            return Err(schema(&t.id, "boxes", format!("box {i} needs w > 0 and h > 0")));
        }
    }
    for (i, c) in t.captions.iter().enumerate() {
        if c.trim().is_empty() {
            return Err(schema(&t.id, "nl", format!("caption {i} is empty")));
        }
    }
    Ok(())
}

/// Reads and validates `dataset.json`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    parse_dataset(&text)
}

/// Parses dataset JSON, reporting the offending track and field on failure.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let root: Value = serde_json::from_str(text)?;
    let obj = root
        .as_object()
        .ok_or_else(|| schema("<root>", "<root>", "expected a JSON object"))?;
    let frame_size = match obj.get("frame_size") {
        None => DEFAULT_FRAME_SIZE,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| schema("<root>", "frame_size", e.to_string()))?,
    };
    let tracks = obj
        .get("tracks")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("<root>", "tracks", "missing `tracks` array"))?;
    let mut out = Vec::with_capacity(tracks.len());
    for (i, tv) in tracks.iter().enumerate() {
        out.push(parse_track(i, tv)?);
    }
    Dataset::new(frame_size, out)
}

fn parse_track(index: usize, v: &Value) -> Result<TrackRecord> {
    let id = v
        .get("id")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| schema(&format!("#{index}"), "id", "missing string id"))?;
    for field in ["frames", "boxes", "nl"] {
        if !v.get(field).is_some_and(Value::is_array) {
            return Err(schema(&id, field, "missing array"));
        }
    }
    let nl = v["nl"].as_array().expect("checked above");
    if nl.len() != 3 {
        return Err(Error::CaptionCount {
            track: id,
            count: nl.len(),
        });
    }
    if let Some(bad) = nl.iter().position(|c| !c.is_string()) {
        return Err(schema(&id, "nl", format!("caption {bad} is not a string")));
    }
    let frame_refs: Vec<FrameRef> = serde_json::from_value(v["frames"].clone())
        .map_err(|e| schema(&id, "frames", e.to_string()))?;
    let boxes: Vec<[f64; 4]> = serde_json::from_value(v["boxes"].clone())
        .map_err(|e| schema(&id, "boxes", e.to_string()))?;
    let captions: [String; 3] = serde_json::from_value(v["nl"].clone())
        .map_err(|e| schema(&id, "nl", e.to_string()))?;
    let attributes = match v.get("attributes") {
        None | Some(Value::Null) => None,
        Some(a) => Some(
            serde_json::from_value(a.clone()).map_err(|e| schema(&id, "attributes", e.to_string()))?,
        ),
    };
    let caption_attributes = match v.get("caption_attributes") {
        None | Some(Value::Null) => None,
        Some(a) => Some(
            serde_json::from_value(a.clone())
                .map_err(|e| schema(&id, "caption_attributes", e.to_string()))?,
        ),
    };
    let t = TrackRecord {
        id,
        frame_refs,
        boxes,
        captions,
        attributes,
        caption_attributes,
    };
    validate_track(&t)?;
    Ok(t)
}

pub fn dataset_to_json(d: &Dataset) -> Result<String> {
    Ok(serde_json::to_string_pretty(d)?)
}

/// Writes `dataset.json` atomically.
pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, dataset_to_json(d)?.as_bytes())
}

/// Writes to a sibling temp file then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One detected object: class, normalized `(x, y, w, h)` box, features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub cls: u32,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub feat: Vec<f32>,
}

impl ObjectRecord {
    pub fn validate(&self) -> Result<()> {
        if self.feat.len() != FEATURE_DIM {
            return Err(Error::FeatureWidth {
                got: self.feat.len(),
                expected: FEATURE_DIM,
            });
        }
        if !self.bbox.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::BoxOutOfImage(format!("{:?}", self.bbox)));
        }
        Ok(())
    }

    /// `[cls, x, y, w, h, feat...]`, exactly [`OBJECT_WIDTH`] wide.
    pub fn flatten(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(OBJECT_WIDTH);
        v.push(self.cls as f32);
        v.extend_from_slice(&self.bbox);
        v.extend_from_slice(&self.feat);
        v
    }
}

/// Detector output before confidence/class filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub cls: u32,
    pub score: f32,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub feat: Vec<f32>,
}

/// One line of `detections.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub track_id: String,
    /// 0-based position within the track's frame list.
    pub frame: usize,
    pub objects: Vec<ObjectRecord>,
}

/// Detection sidecar keyed by `(track id, frame position)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionStore {
    frames: BTreeMap<(String, usize), Vec<ObjectRecord>>,
}

impl DetectionStore {
    pub fn insert(&mut self, fd: FrameDetections) {
        self.frames.insert((fd.track_id, fd.frame), fd.objects);
    }

    pub fn get(&self, track_id: &str, frame: usize) -> &[ObjectRecord] {
        self.frames
            .get(&(track_id.to_string(), frame))
            .map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = FrameDetections> + '_ {
        self.frames.iter().map(|((id, f), objs)| FrameDetections {
            track_id: id.clone(),
            frame: *f,
            objects: objs.clone(),
        })
    }
}

pub fn load_detections(path: &Path) -> Result<DetectionStore> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut store = DetectionStore::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fd: FrameDetections = serde_json::from_str(&line)?;
        for o in &fd.objects {
            o.validate()?;
        }
        store.insert(fd);
    }
    Ok(store)
}

/// Serializes frame records as JSON lines.
pub fn detections_to_jsonl<'a>(
    frames: impl IntoIterator<Item = &'a FrameDetections>,
) -> Result<String> {
    let mut out = String::new();
    for fd in frames {
        out.push_str(&serde_json::to_string(fd)?);
        out.push('\n');
    }
    Ok(out)
}
