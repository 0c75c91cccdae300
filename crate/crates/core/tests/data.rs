use std::collections::{BTreeSet, HashSet};

use ayce_core::data::synthetic::{generate_synthetic, InconsistencyProbs, SyntheticSpec};
use ayce_core::data::{
    compute_stats, filter_detections, load_dataset, save_dataset, subsample_frames, DiskAssets, RawDetection,
    TrackAssets, FEATURE_DIM,
};
use ayce_core::seed::stream;
use rand::Rng;

fn raw(cls: u32, score: f32) -> RawDetection {
    RawDetection {
        cls,
        score,
        bbox: [0.1, 0.1, 0.2, 0.2],
        feat: vec![0.5; FEATURE_DIM],
    }
}

#[test]
fn filter_keeps_scores_at_or_above_threshold() {
    let allowed: BTreeSet<u32> = [0, 2].into();
    let low: Vec<_> = (0..5).map(|_| raw(0, 0.84)).collect();
    assert!(filter_detections(&low, &allowed, 0.85).unwrap().is_empty());
    let mixed = [raw(0, 0.9), raw(2, 0.85), raw(0, 0.5)];
    let kept = filter_detections(&mixed, &allowed, 0.85).unwrap();
    assert_eq!(kept.len(), 2);
    assert_eq!((kept[0].cls, kept[1].cls), (0, 2));
}

#[test]
fn filter_matches_naive_oracle() {
    let mut rng = stream(20, &[]);
    let allowed: BTreeSet<u32> = [0, 1, 2, 3, 5, 7].into();
    for _ in 0..200 {
        let n = rng.random_range(0..30);
        let recs: Vec<RawDetection> = (0..n)
            .map(|_| raw(rng.random_range(0..10), rng.random_range(0.0..1.0)))
            .collect();
        let got = filter_detections(&recs, &allowed, 0.85).unwrap();
        let mut want = Vec::new();
        for r in &recs {
            let mut class_ok = false;
            for &c in &allowed {
                if c == r.cls {
                    class_ok = true;
                }
            }
            if class_ok && r.score >= 0.85 {
                want.push(r.cls);
            }
        }
        assert_eq!(got.iter().map(|o| o.cls).collect::<Vec<_>>(), want);
    }
}

#[test]
fn subsampling_is_uniform() {
    let mut rng = stream(21, &[]);
    let (n, cap, draws) = (200usize, 80usize, 100_000usize);
    let mut counts = vec![0u64; n];
    for _ in 0..draws {
        let s = subsample_frames(n, cap, &mut rng);
        assert_eq!(s.len(), cap);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        for i in s {
            counts[i] += 1;
        }
    }
    let expected = (draws * cap) as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99th percentile of chi-square with 199 degrees of freedom.
    assert!(chi2 < 248.33, "chi-square {chi2}");
}

#[test]
fn long_track_subsample_is_capped() {
    let mut rng = stream(22, &[]);
    let s = subsample_frames(3620, 80, &mut rng);
    assert_eq!(s.len(), 80);
    assert!(s.windows(2).all(|w| w[0] < w[1]) && *s.last().unwrap() < 3620);
    assert_eq!(subsample_frames(50, 80, &mut rng), (0..50).collect::<Vec<_>>());
}

#[test]
fn generation_is_deterministic() {
    let spec = SyntheticSpec::desk(6);
    let a = generate_synthetic(&spec, 3).unwrap();
    let b = generate_synthetic(&spec, 3).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.detection_records().unwrap(), b.detection_records().unwrap());
    for i in 0..6 {
        assert_eq!(a.render_crop(i, 0), b.render_crop(i, 0));
    }
    let c = generate_synthetic(&spec, 4).unwrap();
    assert_ne!(a.dataset, c.dataset);
}

#[test]
fn consistent_spec_gives_one_value_per_slot() {
    let mut spec = SyntheticSpec::desk(50);
    spec.inconsistency = InconsistencyProbs {
        color: 0.0,
        vehicle_type: 0.0,
        action: 0.0,
    };
    let c = generate_synthetic(&spec, 5).unwrap();
    for t in &c.dataset.tracks {
        let attrs = t.caption_attributes.as_ref().unwrap();
        assert_eq!(attrs.iter().map(|a| &a.color).collect::<HashSet<_>>().len(), 1);
        assert_eq!(attrs.iter().map(|a| &a.vehicle_type).collect::<HashSet<_>>().len(), 1);
        assert_eq!(attrs.iter().map(|a| &a.action).collect::<HashSet<_>>().len(), 1);
    }
    let stats = compute_stats(&c.dataset).unwrap().attributes.unwrap();
    assert_eq!((stats.types, stats.colors, stats.actions), (1.0, 1.0, 1.0));
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_synthetic(&SyntheticSpec::desk(5), 6).unwrap();
    let path = dir.path().join("dataset.json");
    save_dataset(&c.dataset, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, c.dataset);
    save_dataset(&back, &dir.path().join("again.json")).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("again.json")).unwrap()
    );
}

#[test]
fn written_corpus_reads_back_through_disk_assets() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_synthetic(&SyntheticSpec::desk(3), 7).unwrap();
    c.write(dir.path()).unwrap();
    let d = load_dataset(&dir.path().join("dataset.json")).unwrap();
    assert_eq!(d, c.dataset);
    let disk = DiskAssets::open(dir.path()).unwrap();
    for t in &d.tracks {
        for f in [0, t.n_frames() - 1] {
            assert_eq!(disk.objects(t, f).unwrap(), c.objects(t, f).unwrap());
            assert_eq!(disk.crop(t, f).unwrap(), c.crop(t, f).unwrap());
        }
    }
}

#[test]
fn stats_match_an_independent_scan_of_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_synthetic(&SyntheticSpec::desk(12), 8).unwrap();
    let path = dir.path().join("dataset.json");
    save_dataset(&c.dataset, &path).unwrap();
    let stats = compute_stats(&load_dataset(&path).unwrap()).unwrap();

    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let tracks = v["tracks"].as_array().unwrap();
    let frames: Vec<f64> = tracks.iter().map(|t| t["boxes"].as_array().unwrap().len() as f64).collect();
    let words: Vec<f64> = tracks
        .iter()
        .flat_map(|t| t["nl"].as_array().unwrap().iter())
        .map(|s| s.as_str().unwrap().split_whitespace().count() as f64)
        .collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    assert_eq!(stats.n_tracks, tracks.len());
    assert!((stats.frames.mean - mean(&frames)).abs() < 1e-12);
    assert_eq!(stats.frames.min, frames.iter().cloned().fold(f64::INFINITY, f64::min));
    assert_eq!(stats.frames.max, frames.iter().cloned().fold(0.0, f64::max));
    assert!((stats.caption_words.mean - mean(&words)).abs() < 1e-12);
}

#[test]
fn calibrated_frame_lengths_respect_bounds() {
    let c = generate_synthetic(&SyntheticSpec::paper_calibrated(400), 9).unwrap();
    let s = compute_stats(&c.dataset).unwrap();
    assert!(s.frames.min >= 1.0 && s.frames.max <= 3620.0);
    assert!(s.frames.min <= s.frames.mean && s.frames.mean <= s.frames.max);
}
