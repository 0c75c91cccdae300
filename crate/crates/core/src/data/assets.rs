//! Per-frame inputs of the visual branch: tracked-vehicle crops and
//! precomputed detections.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use image::RgbImage;

use crate::data::records::{load_detections, DetectionStore, FrameRef, ObjectRecord, TrackRecord};
use crate::error::{Error, Result};

/// Source of crops and detections for frame positions of a track.
pub trait TrackAssets: Sync {
    fn objects(&self, track: &TrackRecord, frame: usize) -> Result<Vec<ObjectRecord>>;

    /// Image region of the tracked vehicle at `frame`.
    fn crop(&self, track: &TrackRecord, frame: usize) -> Result<RgbImage>;
}

/// Assets read from a dataset directory:
/// `detections.jsonl` plus `crops/<track_id>/<frame>.png`.
pub struct DiskAssets {
    detections: DetectionStore,
    crops_dir: PathBuf,
    frames_root: PathBuf,
    cache: RwLock<HashMap<(String, usize), RgbImage>>,
}

impl DiskAssets {
    pub fn open(data_dir: &Path) -> Result<Self> {
        let det_path = data_dir.join("detections.jsonl");
        let detections = if det_path.exists() {
            load_detections(&det_path)?
        } else {
            DetectionStore::default()
        };
        Ok(Self {
            detections,
            crops_dir: data_dir.join("crops"),
            frames_root: data_dir.to_path_buf(),
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn with_store(detections: DetectionStore, crops_dir: PathBuf) -> Self {
        let frames_root = crops_dir.parent().map(Path::to_path_buf).unwrap_or_default();
        Self {
            detections,
            crops_dir,
            frames_root,
            cache: RwLock::new(HashMap::new()),
        }
    }

    fn load_crop(&self, track: &TrackRecord, frame: usize) -> Result<RgbImage> {
        let path = self
            .crops_dir
            .join(&track.id)
            .join(format!("{frame}.png"));
        if path.exists() {
            return Ok(image::open(&path)?.to_rgb8());
        }
        // Fall back to cutting the tracking box out of a full frame image.
        match track.frame_refs.get(frame) {
            Some(FrameRef::Path(p)) => {
                let full = self.frames_root.join(p);
                if !full.exists() {
                    return Err(Error::MissingFile(full));
                }
                let img = image::open(&full)?.to_rgb8();
                let b = track.boxes[frame];
                let x = b[0].max(0.0) as u32;
                let y = b[1].max(0.0) as u32;
                if x >= img.width() || y >= img.height() {
                    return Err(Error::BoxOutOfImage(format!("{b:?} in {}", full.display())));
                }
                let w = (b[2] as u32).clamp(1, img.width() - x);
                let h = (b[3] as u32).clamp(1, img.height() - y);
                Ok(image::imageops::crop_imm(&img, x, y, w, h).to_image())
            }
            _ => Err(Error::MissingFile(path)),
        }
    }
}

impl TrackAssets for DiskAssets {
    fn objects(&self, track: &TrackRecord, frame: usize) -> Result<Vec<ObjectRecord>> {
        Ok(self.detections.get(&track.id, frame).to_vec())
    }

    fn crop(&self, track: &TrackRecord, frame: usize) -> Result<RgbImage> {
        let key = (track.id.clone(), frame);
        if let Some(img) = self.cache.read().expect("crop cache poisoned").get(&key) {
            return Ok(img.clone());
        }
        let img = self.load_crop(track, frame)?;
        self.cache
            .write()
            .expect("crop cache poisoned")
            .insert(key, img.clone());
        Ok(img)
    }
}
