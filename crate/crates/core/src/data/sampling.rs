use std::collections::BTreeSet;

use rand::Rng;

use crate::data::records::{ObjectRecord, RawDetection, FEATURE_DIM};
use crate::error::{Error, Result};

/// Maximum number of frames fed to the visual branch.
pub const DEFAULT_FRAME_CAP: usize = 80;
/// Detector confidence below which detections are discarded.
pub const DEFAULT_SCORE_THRESHOLD: f32 = 0.85;

/// All frame positions when `n_frames <= cap`, otherwise `cap` distinct
/// positions drawn uniformly without replacement. Always sorted ascending.
pub fn subsample_frames<R: Rng + ?Sized>(n_frames: usize, cap: usize, rng: &mut R) -> Vec<usize> {
    if n_frames <= cap {
        return (0..n_frames).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n_frames, cap).into_vec();
    idx.sort_unstable();
    idx
}

/// Keeps detections with `score >= threshold` whose class is allowed, in order.
pub fn filter_detections(
    records: &[RawDetection],
    allowed_classes: &BTreeSet<u32>,
    threshold: f32,
) -> Result<Vec<ObjectRecord>> {
    let mut out = Vec::new();
    for r in records {
        if r.feat.len() != FEATURE_DIM {
            return Err(Error::FeatureWidth {
                got: r.feat.len(),
                expected: FEATURE_DIM,
            });
        }
        if r.score >= threshold && allowed_classes.contains(&r.cls) {
            out.push(ObjectRecord {
                cls: r.cls,
                bbox: r.bbox,
                feat: r.feat.clone(),
            });
        }
    }
    Ok(out)
}

/// Intersection over union of two `(x, y, w, h)` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let x1 = a[0].max(b[0]);
    let y1 = a[1].max(b[1]);
    let x2 = (a[0] + a[2]).min(b[0] + b[2]);
    let y2 = (a[1] + a[3]).min(b[1] + b[3]);
    let inter = (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
