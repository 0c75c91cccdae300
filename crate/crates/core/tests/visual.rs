use ayce_core::data::synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
use ayce_core::data::{iou, ObjectRecord, TrackAssets, FEATURE_DIM, OBJECT_WIDTH};
use ayce_core::graph::Graph;
use ayce_core::nn::Session;
use ayce_core::text::EMBED_DIM;
use ayce_core::visual::{
    assemble_visual_input, crop_batch, normalize_box, sampling_aware_pe, VisualConfig, VisualMode, VisualModel,
};
use ayce_core::{Error, Tensor};

fn corpus(n: usize) -> SyntheticCorpus {
    generate_synthetic(&SyntheticSpec::desk(n), 50).unwrap()
}

fn model(mode: VisualMode) -> VisualModel<f64> {
    VisualModel::new(VisualConfig { mode, ..VisualConfig::desk() }, 9).unwrap()
}

fn object(cls: u32, bbox: [f32; 4], fill: f32) -> ObjectRecord {
    ObjectRecord {
        cls,
        bbox,
        feat: vec![fill; FEATURE_DIM],
    }
}

#[test]
fn object_rows_are_261_wide() {
    assert_eq!(OBJECT_WIDTH, 1 + 4 + FEATURE_DIM);
    assert_eq!(OBJECT_WIDTH, 261);
    assert_eq!(object(3, [0.1, 0.2, 0.3, 0.4], 0.5).flatten().len(), 261);
}

#[test]
fn frames_without_detections_hold_only_the_tracked_vehicle() {
    let c = corpus(2);
    let d = &c.dataset;
    let t = &d.tracks[0];
    let cfg = VisualConfig::desk();
    let sampled = vec![0, 2, 4];
    let input = assemble_visual_input::<f64>(t, &sampled, &vec![Vec::new(); 3], d.frame_size, &cfg).unwrap();
    assert_eq!(input.data.shape(), &[3, 1, OBJECT_WIDTH]);
    assert_eq!(input.obj_mask, vec![true; 3]);
    for (k, &f) in sampled.iter().enumerate() {
        let row = input.data.row(k);
        assert_eq!(row[0], 12.0);
        let nb = normalize_box(t.boxes[f], d.frame_size).unwrap();
        assert_eq!(&row[1..5], &nb);
        assert!(row[5..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn detections_overlapping_the_tracked_box_are_dropped() {
    let c = corpus(2);
    let d = &c.dataset;
    let t = &d.tracks[0];
    let nb = normalize_box(t.boxes[0], d.frame_size).unwrap();
    let same = nb.map(|v| v as f32);
    // Shrinking the box slightly keeps IoU around 0.9.
    let near = [same[0] + 0.025 * same[2], same[1] + 0.025 * same[3], 0.95 * same[2], 0.95 * same[3]];
    assert!(iou(near.map(f64::from), nb) > 0.85);
    let far = object(2, [0.0, 0.0, 0.01, 0.01], 0.7);
    assert!(iou(far.bbox.map(f64::from), nb) < 0.5);
    let dets = vec![vec![object(2, near, 0.1), far.clone(), object(7, same, 0.2)]];
    let input = assemble_visual_input::<f64>(t, &[0], &dets, d.frame_size, &VisualConfig::desk()).unwrap();
    assert_eq!(input.data.shape(), &[1, 2, OBJECT_WIDTH]);
    let row: Vec<f32> = input.data.row(1).iter().map(|&v| v as f32).collect();
    assert_eq!(row, far.flatten());
}

#[test]
fn object_cap_limits_slots_and_ragged_frames_are_masked() {
    let c = corpus(2);
    let d = &c.dataset;
    let t = &d.tracks[0];
    let far = |k: f32| object(1, [0.0, 0.0, 0.01 + 0.001 * k, 0.01], k);
    let dets = vec![(0..20).map(|k| far(k as f32)).collect(), vec![far(1.0)]];
    let input = assemble_visual_input::<f64>(t, &[0, 1], &dets, d.frame_size, &VisualConfig::desk()).unwrap();
    assert_eq!(input.slots(), 9);
    assert_eq!(input.obj_mask[..9], [true; 9]);
    assert_eq!(input.obj_mask[9..], [true, true, false, false, false, false, false, false, false]);
    let bad = vec![vec![object(1, [0.0, 0.0, 0.1, 0.1], 0.0)]; 1];
    let mut short = bad.clone();
    short[0][0].feat.pop();
    assert!(assemble_visual_input::<f64>(t, &[0], &short, d.frame_size, &VisualConfig::desk()).is_err());
    assert!(assemble_visual_input::<f64>(t, &[0, 1], &bad, d.frame_size, &VisualConfig::desk()).is_err());
}

fn crops_of(c: &SyntheticCorpus, track: usize, frames: &[usize], size: [u32; 2]) -> Tensor<f64> {
    let t = &c.dataset.tracks[track];
    let imgs: Vec<_> = frames.iter().map(|&f| c.crop(t, f).unwrap()).collect();
    crop_batch(&imgs, size)
}

#[test]
fn crop_encoder_is_row_independent() {
    let c = corpus(3);
    let m = model(VisualMode::Vso);
    let size = m.config.crop_size;
    let batch = crops_of(&c, 0, &[0, 1, 1, 3], size);
    let g = Graph::new();
    let s = Session::eval(&g);
    let p = m.params.bind(&g);
    let out = g.value(m.crop_features(&s, &p, &batch));
    assert_eq!(out.shape(), &[4, FEATURE_DIM]);
    for (a, b) in out.row(1).iter().zip(out.row(2)) {
        assert!((a - b).abs() < 1e-12);
    }
    for (k, f) in [0, 1, 1, 3].into_iter().enumerate() {
        let single = crops_of(&c, 0, &[f], size);
        let g1 = Graph::new();
        let s1 = Session::eval(&g1);
        let p1 = m.params.bind(&g1);
        let one = g1.value(m.crop_features(&s1, &p1, &single));
        for (a, b) in out.row(k).iter().zip(one.row(0)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn input_projection_is_affine() {
    let m = model(VisualMode::Vso);
    let g = Graph::new();
    let s = Session::eval(&g);
    let p = m.params.bind(&g);
    let x: Vec<f64> = (0..OBJECT_WIDTH).map(|i| (i as f64 * 0.37).sin()).collect();
    let y: Vec<f64> = (0..OBJECT_WIDTH).map(|i| (i as f64 * 0.11).cos()).collect();
    let a = 0.3;
    let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + (1.0 - a) * v).collect();
    let rows = g.constant(Tensor::new(&[3, OBJECT_WIDTH], [x, y, mix].concat()));
    let out = g.value(m.input_proj.forward(&s, &p, rows));
    for k in 0..out.shape()[1] {
        let want = a * out.row(0)[k] + (1.0 - a) * out.row(1)[k];
        assert!((out.row(2)[k] - want).abs() < 1e-12);
    }
}

#[test]
fn output_shapes_follow_the_mode() {
    let c = corpus(3);
    let d = &c.dataset;
    for (mode, arity) in [(VisualMode::Vso, 1), (VisualMode::Vto, 3)] {
        let m = model(mode);
        for t in &d.tracks {
            let e = m.embed(t, &c, d.frame_size, 1).unwrap();
            assert_eq!(e.rows.shape(), &[arity, EMBED_DIM]);
            assert!(e.rows.data().iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn single_frame_tracks_embed() {
    let c = corpus(2);
    let d = &c.dataset;
    for mode in [VisualMode::Vso, VisualMode::Vto] {
        let m = model(mode);
        let prep = m.prepare_frames(&d.tracks[0], &c, d.frame_size, &[2]).unwrap();
        assert_eq!(prep.input.frames(), 1);
        let e = m.embed_prepared(&prep).unwrap();
        assert_eq!(e.rows.shape(), &[mode.arity(), EMBED_DIM]);
        assert!(matches!(
            m.prepare_frames(&d.tracks[0], &c, d.frame_size, &[]),
            Err(Error::AllMasked)
        ));
    }
}

#[test]
fn spatial_pass_does_not_mix_frames() {
    let c = corpus(2);
    let d = &c.dataset;
    let m = model(VisualMode::Vso);
    let prep = m.prepare_frames(&d.tracks[0], &c, d.frame_size, &[0, 1, 2]).unwrap();
    let mut other = prep.input.clone();
    let o = other.slots();
    // Perturb every slot of frame 2 only.
    for v in &mut other.data.data_mut()[2 * o * OBJECT_WIDTH..] {
        *v += 0.25;
    }
    let spatial = |input: &ayce_core::visual::VisualInput<f64>| {
        let g = Graph::new();
        let s = Session::eval(&g);
        let p = m.params.bind(&g);
        let feats = m.crop_features(&s, &p, &prep.crops);
        let x = m.embed_objects(&s, &p, input, feats).unwrap();
        let h = m.spatial_encode(&s, &p, x, input, &mut Vec::new()).unwrap();
        (*g.value(h)).clone()
    };
    let (a, b) = (spatial(&prep.input), spatial(&other));
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn object_order_does_not_matter() {
    let c = corpus(2);
    let d = &c.dataset;
    let t = &d.tracks[1];
    let far = |k: f32| object(k as u32, [0.0, 0.0, 0.01, 0.01 + 0.001 * k], 0.1 * k);
    let dets = vec![vec![far(1.0), far(2.0), far(3.0)]; 2];
    for mode in [VisualMode::Vso, VisualMode::Vto] {
        let m = model(mode);
        let mut prep = m.prepare_frames(t, &c, d.frame_size, &[0, 3]).unwrap();
        prep.input = assemble_visual_input(t, &[0, 3], &dets, d.frame_size, &m.config).unwrap();
        let base = m.embed_prepared(&prep).unwrap();
        prep.input = prep.input.swap_objects(1, 3);
        let swapped = m.embed_prepared(&prep).unwrap();
        let worst = base
            .rows
            .data()
            .iter()
            .zip(swapped.rows.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "{mode}: {worst}");
    }
}

#[test]
fn frame_positions_reach_the_output() {
    let c = corpus(2);
    let d = &c.dataset;
    let m = model(VisualMode::Vto);
    let mut prep = m.prepare_frames(&d.tracks[0], &c, d.frame_size, &[0, 1]).unwrap();
    let a = m.embed_prepared(&prep).unwrap();
    prep.input.frame_indices = vec![0, 7];
    let b = m.embed_prepared(&prep).unwrap();
    assert_ne!(a, b);
    prep.input.frame_indices = vec![7, 0];
    assert!(matches!(m.embed_prepared(&prep), Err(Error::NonMonotoneIndices)));
    assert!(matches!(sampling_aware_pe::<f64>(&[5, 3], 8), Err(Error::NonMonotoneIndices)));
}

#[test]
fn embedding_is_deterministic_in_eval_mode() {
    let c = corpus(2);
    let d = &c.dataset;
    let m = model(VisualMode::Vto);
    let t = &d.tracks[0];
    assert_eq!(m.embed(t, &c, d.frame_size, 5).unwrap(), m.embed(t, &c, d.frame_size, 5).unwrap());
    let again = model(VisualMode::Vto);
    assert!(again.params.same_values(&m.params));
}

#[test]
fn checkpoint_round_trip_preserves_embeddings() {
    let c = corpus(2);
    let d = &c.dataset;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let m = model(VisualMode::Vso);
    m.save(&path, "note = 1").unwrap();
    let (back, run) = VisualModel::<f64>::load(&path).unwrap();
    assert_eq!(run, "note = 1");
    assert_eq!(back.config, m.config);
    assert!(back.params.same_values(&m.params));
    let t = &d.tracks[1];
    assert_eq!(back.embed(t, &c, d.frame_size, 2).unwrap(), m.embed(t, &c, d.frame_size, 2).unwrap());
}
