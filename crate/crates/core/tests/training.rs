use ayce_core::data::synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
use ayce_core::graph::Graph;
use ayce_core::metrics::euclidean;
use ayce_core::seed::stream;
use ayce_core::text::{encode_dataset, triplet_margin_loss, ProjectionHead, TextEmbedding, ToyEncoder, ToyEncoderConfig};
use ayce_core::training::{
    composite_loss, composite_loss_graph, lr_at, mine_hard_negatives, neg_distance, phi, train_visual, LossConfig,
    Mining, ModelVariant, RunConfig, TrainConfig, TrainOutputs, TripletBatch, HISTORY_HEADER,
};
use ayce_core::visual::VisualModel;
use ayce_core::{Aggregation, Error, Metric, Tensor};
use rand::Rng;

fn t(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::new(&[rows.len(), rows[0].len()], rows.concat())
}

fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn zero_beta_single_rows_reduce_to_the_plain_triplet_loss() {
    let mut rng = stream(60, &[]);
    let cfg = LossConfig {
        beta: 0.0,
        ..Default::default()
    };
    let b = 6;
    let batch = TripletBatch {
        anchors: (0..b).map(|_| random_tensor(1, 8, &mut rng)).collect(),
        positives: (0..b).map(|_| random_tensor(1, 8, &mut rng)).collect(),
        negatives: (0..b).map(|_| random_tensor(1, 8, &mut rng)).collect(),
    };
    let dist = |x: &Tensor<f64>, y: &Tensor<f64>| euclidean(x.data(), y.data()).unwrap();
    let dap: Vec<f64> = (0..b).map(|i| dist(&batch.anchors[i], &batch.positives[i])).collect();
    let dan: Vec<f64> = (0..b).map(|i| dist(&batch.anchors[i], &batch.negatives[i])).collect();
    let want = triplet_margin_loss(&dap, &dan, 1.0).unwrap();
    assert!((composite_loss(&batch, &cfg).unwrap() - want).abs() < 1e-14);
}

#[test]
fn beta_adds_the_positive_distance() {
    let a = t(&[&[0.0, 0.0]]);
    let p = t(&[&[3.0, 4.0]]);
    let n = t(&[&[0.0, 1.0]]);
    let cfg = LossConfig {
        beta: 0.5,
        margin: 1.0,
        ..Default::default()
    };
    let batch = TripletBatch {
        anchors: vec![a],
        positives: vec![p],
        negatives: vec![n],
    };
    // hinge = 5 - 1 + 1, plus 0.5 * 5.
    assert!((composite_loss(&batch, &cfg).unwrap() - 7.5).abs() < 1e-14);
}

#[test]
fn phi_is_zero_when_any_pair_coincides() {
    let a = t(&[&[1.0, 2.0], &[5.0, 5.0], &[-1.0, 0.0]]);
    let p = t(&[&[9.0, 9.0], &[7.0, 1.0], &[5.0, 5.0]]);
    assert_eq!(phi(&a, &p, &LossConfig::default()).unwrap(), 0.0);
}

#[test]
fn negative_distance_is_the_mean_of_all_nine_pairs() {
    // Distances from anchors {0, 3, 6} to negatives {-1, -2, -3} are 1..=9.
    let a = t(&[&[0.0], &[3.0], &[6.0]]);
    let n = t(&[&[-1.0], &[-2.0], &[-3.0]]);
    assert!((neg_distance(&a, &n, &LossConfig::default()).unwrap() - 5.0).abs() < 1e-14);
    let min = LossConfig {
        negative: Aggregation::Min,
        ..Default::default()
    };
    assert_eq!(neg_distance(&a, &n, &min).unwrap(), 1.0);
}

#[test]
fn mining_picks_by_negative_distance_excluding_self() {
    let cfg = LossConfig::default();
    let anchors = vec![t(&[&[0.0]]), t(&[&[5.0]]), t(&[&[9.0]])];
    let texts = vec![t(&[&[0.1]]), t(&[&[0.9]]), t(&[&[0.4]])];
    let far = mine_hard_negatives(&anchors, &texts, &cfg, Mining::Farthest).unwrap();
    let near = mine_hard_negatives(&anchors, &texts, &cfg, Mining::Closest).unwrap();
    assert_eq!(far[0], 1);
    assert_eq!(near[0], 2);
    let pair = mine_hard_negatives(&anchors[..2], &texts[..2], &cfg, Mining::Farthest).unwrap();
    assert_eq!(pair, vec![1, 0]);
    assert!(mine_hard_negatives(&anchors[..1], &texts[..1], &cfg, Mining::Farthest).is_err());
}

#[test]
fn schedules_never_increase() {
    for c in [TrainConfig::desk(), TrainConfig::paper_2021()] {
        let lrs: Vec<f64> = (0..c.epochs + 50).map(|e| lr_at(e, &c)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
    let p = TrainConfig::paper_2021();
    assert_eq!((lr_at(649, &p), lr_at(650, &p)), (2.5e-5, 1.5e-5));
    let d = TrainConfig::desk();
    assert_eq!(lr_at(131, &d), 1e-3);
    assert!((lr_at(132, &d) - 1e-3 * 2.5 / 3.5).abs() < 1e-18);
    assert!(TrainConfig::preset("nope").is_err());
}

#[test]
fn graph_loss_matches_value_and_finite_differences() {
    let mut rng = stream(61, &[]);
    for metric in [Metric::Euclidean, Metric::CosineMetric] {
        let cfg = LossConfig {
            metric,
            margin: 5.0,
            beta: 0.3,
            ..Default::default()
        };
        let anchors: Vec<_> = (0..3).map(|_| random_tensor(3, 5, &mut rng)).collect();
        let pos: Vec<_> = (0..3).map(|_| random_tensor(3, 5, &mut rng)).collect();
        let neg: Vec<_> = (0..3).map(|_| random_tensor(3, 5, &mut rng)).collect();
        let value = |anchors: &[Tensor<f64>]| {
            composite_loss(
                &TripletBatch {
                    anchors: anchors.to_vec(),
                    positives: pos.clone(),
                    negatives: neg.clone(),
                },
                &cfg,
            )
            .unwrap()
        };
        let g = Graph::new();
        let av: Vec<_> = anchors.iter().map(|x| g.leaf_shared(std::sync::Arc::new(x.clone()))).collect();
        let pv: Vec<_> = pos.iter().map(|x| g.constant(x.clone())).collect();
        let nv: Vec<_> = neg.iter().map(|x| g.constant(x.clone())).collect();
        let loss = composite_loss_graph(&g, &av, &pv, &nv, &cfg).unwrap();
        let got = g.value(loss).data()[0];
        assert!((got - value(&anchors)).abs() < 1e-12);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (i, var) in av.iter().enumerate() {
            let ga = grads.get(*var).unwrap();
            for k in 0..15 {
                let mut up = anchors.clone();
                up[i].data_mut()[k] += h;
                let mut down = anchors.clone();
                down[i].data_mut()[k] -= h;
                let num = (value(&up) - value(&down)) / (2.0 * h);
                let ana = ga[k];
                assert!((num - ana).abs() <= 1e-6 * (num.abs() + ana.abs()) + 1e-8, "{metric}: {num} vs {ana}");
            }
        }
    }
}

struct Fixture {
    corpus: SyntheticCorpus,
    texts: Vec<TextEmbedding<f64>>,
    cfg: RunConfig,
}

fn fixture(variant: ModelVariant, epochs: usize) -> Fixture {
    let corpus = generate_synthetic(&SyntheticSpec::desk(6), 62).unwrap();
    let enc = ToyEncoder::<f64>::for_dataset(&corpus.dataset, ToyEncoderConfig::default(), 2);
    let head = ProjectionHead::new(enc.config.width, 2);
    let texts = encode_dataset(&corpus.dataset, variant.text_mode(), &enc, &head).unwrap();
    let mut cfg = RunConfig::default();
    cfg.model.variant = variant;
    cfg.resolve();
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 3;
    cfg.train.seed = 4;
    Fixture { corpus, texts, cfg }
}

fn run(f: &Fixture, outputs: Option<&TrainOutputs>) -> (VisualModel<f64>, Vec<f64>) {
    let mut model = VisualModel::new(f.cfg.model.visual.clone(), 5).unwrap();
    let hist = train_visual(&f.corpus.dataset, &f.corpus, &f.texts, &mut model, &f.cfg, outputs, None).unwrap();
    (model, hist.iter().map(|r| r.loss).collect())
}

#[test]
fn zero_epochs_write_outputs_and_keep_weights() {
    let f = fixture(ModelVariant::VsLt, 0);
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs {
        dir: dir.path().join("run"),
    };
    let (model, losses) = run(&f, Some(&out));
    assert!(losses.is_empty());
    let fresh = VisualModel::<f64>::new(f.cfg.model.visual.clone(), 5).unwrap();
    assert!(model.params.same_values(&fresh.params));
    assert_eq!(std::fs::read_to_string(out.history()).unwrap(), format!("{HISTORY_HEADER}\n"));
    assert_eq!(RunConfig::load(&out.config()).unwrap(), f.cfg);
    let (saved, _) = VisualModel::<f64>::load(&out.checkpoint()).unwrap();
    assert!(saved.params.same_values(&fresh.params));
}

#[test]
fn training_lowers_the_loss_and_leaves_texts_alone() {
    let f = fixture(ModelVariant::VtLt, 12);
    let before = f.texts.clone();
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs {
        dir: dir.path().to_path_buf(),
    };
    let (model, losses) = run(&f, Some(&out));
    assert_eq!(f.texts, before);
    assert_eq!(losses.len(), 12);
    let head: f64 = losses[..3].iter().sum();
    let tail: f64 = losses[9..].iter().sum();
    assert!(tail < head, "{losses:?}");
    let history = std::fs::read_to_string(out.history()).unwrap();
    assert_eq!(history.lines().count(), 13);
    let (saved, run_text) = VisualModel::<f64>::load(&out.checkpoint()).unwrap();
    assert!(saved.params.same_values(&model.params));
    assert_eq!(RunConfig::from_toml(&run_text).unwrap(), f.cfg);
}

#[test]
fn training_is_reproducible() {
    let f = fixture(ModelVariant::VsLs, 2);
    let (a, la) = run(&f, None);
    let (b, lb) = run(&f, None);
    assert_eq!(la, lb);
    assert!(a.params.same_values(&b.params));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let f = fixture(ModelVariant::VtLt, 1);
    let mut cfg = f.cfg.clone();
    cfg.model.variant = ModelVariant::VsLs;
    cfg.resolve();
    let mut model = VisualModel::<f64>::new(cfg.model.visual.clone(), 5).unwrap();
    let err = train_visual(&f.corpus.dataset, &f.corpus, &f.texts, &mut model, &cfg, None, None).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
    let mut model = VisualModel::<f64>::new(f.cfg.model.visual.clone(), 5).unwrap();
    let err = train_visual(&f.corpus.dataset, &f.corpus, &f.texts[..3], &mut model, &f.cfg, None, None).unwrap_err();
    assert!(matches!(err, Error::LengthMismatch { .. }));
}
