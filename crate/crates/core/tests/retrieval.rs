use ayce_core::data::synthetic::{generate_synthetic, SyntheticSpec};
use ayce_core::metrics::mrr;
use ayce_core::retrieval::{
    embed_all, evaluate, evaluate_queries, load_submission, rank, rank_sentences, report_from_table, submission,
    write_submission, Direction, EmbeddingStore, QueryMode, RankOrder, StoreEntry,
};
use ayce_core::seed::stream;
use ayce_core::text::{ProjectionHead, ToyEncoder, ToyEncoderConfig};
use ayce_core::training::ModelVariant;
use ayce_core::visual::{VisualConfig, VisualModel};
use ayce_core::{Metric, Ranking, RankingTable};
use rand::Rng;

fn rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn random_store(variant: ModelVariant, n: usize, seed: u64) -> EmbeddingStore {
    let mut rng = stream(seed, &[]);
    let entries = (0..n)
        .map(|i| StoreEntry {
            id: format!("t{i:02}"),
            visual: rows(variant.visual_arity(), 4, &mut rng),
            text: rows(variant.text_arity(), 4, &mut rng),
        })
        .collect();
    EmbeddingStore::new(variant, seed, entries).unwrap()
}

fn min_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for x in a {
        for y in b {
            let d = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

#[test]
fn rankings_match_a_brute_force_sort() {
    let store = random_store(ModelVariant::VtLt, 9, 70);
    for dir in [Direction::TextToVisual, Direction::VisualToText] {
        let table = rank(&store, dir, Metric::Euclidean, RankOrder::Asc).unwrap();
        for (q, r) in store.entries.iter().zip(&table.rankings) {
            let mut scored: Vec<(f64, &str)> = store
                .entries
                .iter()
                .map(|c| {
                    let d = match dir {
                        Direction::TextToVisual => min_dist(&q.text, &c.visual),
                        Direction::VisualToText => min_dist(&q.visual, &c.text),
                    };
                    (d, c.id.as_str())
                })
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
            let want: Vec<&str> = scored.iter().map(|s| s.1).collect();
            assert_eq!(r.query, q.id);
            assert_eq!(r.candidates, want);
        }
    }
}

#[test]
fn symmetric_store_ranks_the_same_both_ways() {
    let mut store = random_store(ModelVariant::VsLs, 12, 71);
    for e in &mut store.entries {
        e.text = e.visual.clone();
    }
    let tv = evaluate(&store, Direction::TextToVisual, Metric::CosineMetric, RankOrder::Asc).unwrap();
    let vt = evaluate(&store, Direction::VisualToText, Metric::CosineMetric, RankOrder::Asc).unwrap();
    assert_eq!(tv.mrr, vt.mrr);
    assert_eq!(tv.mrr, 1.0);
}

#[test]
fn uniform_scaling_keeps_euclidean_rankings() {
    let store = random_store(ModelVariant::VsLt, 10, 72);
    let mut scaled = store.clone();
    for e in &mut scaled.entries {
        for r in e.visual.iter_mut().chain(e.text.iter_mut()) {
            r.iter_mut().for_each(|v| *v *= 4.0);
        }
    }
    let a = rank(&store, Direction::TextToVisual, Metric::Euclidean, RankOrder::Asc).unwrap();
    let b = rank(&scaled, Direction::TextToVisual, Metric::Euclidean, RankOrder::Asc).unwrap();
    assert_eq!(a, b);
}

#[test]
fn better_ranks_never_lower_mrr() {
    let cands: Vec<String> = (0..30).map(|i| i.to_string()).collect();
    let mut rng = stream(73, &[]);
    let mut truth: Vec<usize> = (0..15).map(|_| rng.random_range(0..30)).collect();
    let table = |truth: &[usize]| RankingTable {
        rankings: truth
            .iter()
            .enumerate()
            .map(|(q, &t)| Ranking::new(q.to_string(), cands.clone(), &cands[t]))
            .collect(),
    };
    let mut last = mrr(&table(&truth)).unwrap();
    for q in 0..truth.len() {
        if truth[q] > 0 {
            truth[q] -= 1;
        }
        let now = mrr(&table(&truth)).unwrap();
        assert!(now >= last);
        last = now;
    }
}

#[test]
fn rank_eleven_everywhere() {
    let cands: Vec<String> = (0..25).map(|i| format!("c{i}")).collect();
    let table = RankingTable {
        rankings: (0..5).map(|q| Ranking::new(format!("q{q}"), cands.clone(), "c10")).collect(),
    };
    let r = report_from_table(&table, 0, Direction::TextToVisual, Metric::Euclidean).unwrap();
    assert_eq!(r.top10, 0.0);
    assert!((r.mrr - 1.0 / 11.0).abs() < 1e-15);
    assert_eq!(r.ranks.get(&11), Some(&5));
}

#[test]
fn submission_round_trips_with_sorted_keys() {
    let mut store = random_store(ModelVariant::VsLs, 6, 74);
    store.entries.reverse();
    let table = rank(&store, Direction::TextToVisual, Metric::Euclidean, RankOrder::Asc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("submission.json");
    write_submission(&table, &path).unwrap();
    let back = load_submission(&path).unwrap();
    assert_eq!(back, submission(&table));
    let text = std::fs::read_to_string(&path).unwrap();
    let positions: Vec<usize> = (0..6).map(|i| text.find(&format!("\"t{i:02}\": [")).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
    for (q, list) in &back {
        assert_eq!(list.len(), 6, "{q}");
    }
}

#[test]
fn store_round_trips_exactly() {
    let store = random_store(ModelVariant::VtLt, 4, 75);
    let dir = tempfile::tempdir().unwrap();
    store.save(dir.path()).unwrap();
    assert_eq!(EmbeddingStore::load(dir.path()).unwrap(), store);
    assert!(EmbeddingStore::load(&dir.path().join("missing")).is_err());
}

#[test]
fn embed_all_covers_every_track_regardless_of_jobs() {
    let c = generate_synthetic(&SyntheticSpec::desk(5), 76).unwrap();
    let d = &c.dataset;
    let variant = ModelVariant::VtLt;
    let model = VisualModel::<f64>::new(
        VisualConfig {
            mode: variant.visual_mode(),
            ..VisualConfig::desk()
        },
        3,
    )
    .unwrap();
    let enc = ToyEncoder::for_dataset(d, ToyEncoderConfig::default(), 3);
    let head = ProjectionHead::new(enc.config.width, 3);
    let one = embed_all(&model, &enc, &head, variant, d, &c, 8, 1).unwrap();
    let three = embed_all(&model, &enc, &head, variant, d, &c, 8, 3).unwrap();
    assert_eq!(one, three);
    assert_eq!(one.len(), d.n());
    let ids: Vec<&str> = one.entries.iter().map(|e| e.id.as_str()).collect();
    let want: Vec<&str> = d.tracks.iter().map(|t| t.id.as_str()).collect();
    assert_eq!(ids, want);
    assert!(one.entries.iter().all(|e| e.visual.len() == 3 && e.text.len() == 3 && e.visual[0].len() == 256));
    assert!(embed_all(&model, &enc, &head, ModelVariant::VsLs, d, &c, 8, 1).is_err());
}

#[test]
fn sentence_queries_rank_each_caption_alone() {
    let store = random_store(ModelVariant::VtLt, 7, 77);
    let table = rank_sentences(&store, Metric::Euclidean, RankOrder::Asc).unwrap();
    assert_eq!(table.len(), 21);
    for (n, r) in table.rankings.iter().enumerate() {
        let (q, k) = (&store.entries[n / 3], n % 3);
        assert_eq!(r.query, format!("{}#{k}", q.id));
        let mut scored: Vec<(f64, &str)> = store
            .entries
            .iter()
            .map(|c| (min_dist(std::slice::from_ref(&q.text[k]), &c.visual), c.id.as_str()))
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
        assert_eq!(r.candidates, scored.iter().map(|s| s.1).collect::<Vec<_>>());
    }
}

#[test]
fn one_stray_caption_only_hurts_sentence_queries() {
    let entries = (0..4)
        .map(|i| {
            let x = 10.0 * i as f64;
            StoreEntry {
                id: format!("t{i}"),
                visual: vec![vec![x, 0.0]; 3],
                text: vec![vec![x, 0.0], vec![x, 0.5], vec![if i == 0 { 6.0 } else { x }, 0.0]],
            }
        })
        .collect();
    let store = EmbeddingStore::new(ModelVariant::VtLt, 0, entries).unwrap();
    let q = |mode| evaluate_queries(&store, Direction::TextToVisual, Metric::Euclidean, RankOrder::Asc, mode).unwrap();
    assert_eq!(q(QueryMode::Track).mrr, 1.0);
    let sentence = q(QueryMode::Sentence);
    // Eleven captions rank first; the stray one ranks its track second.
    assert!((sentence.mrr - (11.0 + 0.5) / 12.0).abs() < 1e-15);
    assert!(evaluate_queries(&store, Direction::VisualToText, Metric::Euclidean, RankOrder::Asc, QueryMode::Sentence)
        .is_err());
    assert_eq!("Sentence".parse::<QueryMode>().unwrap(), QueryMode::Sentence);
}
