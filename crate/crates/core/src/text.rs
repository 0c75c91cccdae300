//! Language branch: sentence encoders, the projection into the shared
//! 256-d space, caption-triplet sampling and triplet fine-tuning.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointReader, CheckpointWriter};
use crate::data::records::{Dataset, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::graph::{ensure_finite, scalar_value, Graph, Var};
use crate::metrics::{intra_inter_report, IntraInterReport, Metric};
use crate::nn::{init_rng, uniform_fan_in, Bound, Linear, ParamId, ParamSet, Session};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::{lit, Scalar};
use crate::seed::{derive_seed, stream};
use crate::tensor::Tensor;

/// Width of the shared embedding space.
pub const EMBED_DIM: usize = FEATURE_DIM;

const TXT_MAGIC: &[u8; 8] = b"AYCE-TXT";
const TXT_VERSION: u32 = 1;

/// Whether the three captions are embedded separately or as one string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TextMode {
    #[default]
    #[serde(rename = "LTO")]
    Lto,
    #[serde(rename = "LSO")]
    Lso,
}

impl TextMode {
    pub fn arity(self) -> usize {
        match self {
            TextMode::Lto => 3,
            TextMode::Lso => 1,
        }
    }
}

impl fmt::Display for TextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextMode::Lto => "LTO",
            TextMode::Lso => "LSO",
        })
    }
}

impl FromStr for TextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lto" => Ok(TextMode::Lto),
            "lso" => Ok(TextMode::Lso),
            _ => Err(Error::Config(format!("unknown text mode `{s}` (expected LTO or LSO)"))),
        }
    }
}

/// Maps sentences to raw vectors of a fixed width.
pub trait SentenceEncoder<T: Scalar>: Send + Sync {
    fn width(&self) -> usize;

    fn params(&self) -> &ParamSet<T>;

    fn params_mut(&mut self) -> &mut ParamSet<T>;

    fn is_training(&self) -> bool;

    fn set_training(&mut self, train: bool);

    /// Records the encoding of `sentences` on the session graph as `[n, width]`.
    fn forward(&self, s: &Session<'_, T>, p: &Bound, sentences: &[&str]) -> Result<Var>;

    /// Dropout probability used when training.
    fn dropout_p(&self) -> f64 {
        0.0
    }

    fn encode(&self, sentence: &str) -> Result<Vec<T>> {
        let g = Graph::new();
        let s = Session::new(&g, self.is_training(), self.dropout_p(), 0);
        let p = self.params().bind(&g);
        let v = self.forward(&s, &p, &[sentence])?;
        Ok(g.value(v).data().to_vec())
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub const UNK: &str = "<unk>";

/// Sorted token list; index 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = sentences.into_iter().flat_map(tokenize).collect();
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(set.into_iter().filter(|t| t != UNK));
        Self { tokens }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Checkpoint("vocabulary must start with <unk>".into()));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens[1..]
            .binary_search_by(|t| t.as_str().cmp(token))
            .map_or(0, |i| i + 1)
    }

    /// Token ids of a sentence; errors when it has no tokens at all.
    pub fn ids(&self, sentence: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = tokenize(sentence).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            return Err(Error::EmptyCaption);
        }
        Ok(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub embed_dim: usize,
    pub width: usize,
    pub dropout_p: f64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            width: 64,
            dropout_p: 0.1,
        }
    }
}

/// Token-embedding table, mean pooling, one `tanh` layer.
#[derive(Debug, Clone)]
pub struct ToyEncoder<T> {
    pub config: ToyEncoderConfig,
    pub vocab: Vocabulary,
    params: ParamSet<T>,
    table: ParamId,
    hidden: Linear,
    training: bool,
}

impl<T: Scalar> ToyEncoder<T> {
    pub fn new(vocab: Vocabulary, config: ToyEncoderConfig, seed: u64) -> Self {
        let mut rng = init_rng(derive_seed(seed, &[0x7e7]));
        let mut params = ParamSet::new();
        let table = params.add(
            "tok.embed",
            uniform_fan_in(&mut rng, &[vocab.len(), config.embed_dim], 1),
        );
        let hidden = Linear::new(&mut params, &mut rng, "tok.hidden", config.embed_dim, config.width);
        Self {
            config,
            vocab,
            params,
            table,
            hidden,
            training: false,
        }
    }

    /// Vocabulary taken from every caption of `d`.
    pub fn for_dataset(d: &Dataset, config: ToyEncoderConfig, seed: u64) -> Self {
        let vocab = Vocabulary::build(d.tracks.iter().flat_map(|t| t.captions.iter().map(String::as_str)));
        Self::new(vocab, config, seed)
    }
}

impl<T: Scalar> SentenceEncoder<T> for ToyEncoder<T> {
    fn width(&self) -> usize {
        self.config.width
    }

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn is_training(&self) -> bool {
        self.training
    }

    fn set_training(&mut self, train: bool) {
        self.training = train;
    }

    fn dropout_p(&self) -> f64 {
        self.config.dropout_p
    }

    fn forward(&self, s: &Session<'_, T>, p: &Bound, sentences: &[&str]) -> Result<Var> {
        let ids = sentences
            .iter()
            .map(|t| self.vocab.ids(t))
            .collect::<Result<Vec<_>>>()?;
        let len = ids.iter().map(Vec::len).max().unwrap_or(0);
        let mut flat = Vec::with_capacity(ids.len() * len);
        let mut mask = Vec::with_capacity(ids.len() * len);
        for row in &ids {
            for k in 0..len {
                flat.push(row.get(k).copied().unwrap_or(0));
                mask.push(k < row.len());
            }
        }
        let g = s.graph;
        let tokens = g.gather_rows(p.var(self.table), &flat);
        let pooled = s.dropout(g.masked_mean(tokens, ids.len(), &mask));
        Ok(g.tanh(self.hidden.forward(s, p, pooled)))
    }
}

/// Affine map from encoder width to [`EMBED_DIM`].
#[derive(Debug, Clone)]
pub struct ProjectionHead<T> {
    pub params: ParamSet<T>,
    pub linear: Linear,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = init_rng(derive_seed(seed, &[0x4ead]));
        let mut params = ParamSet::new();
        let linear = Linear::new(&mut params, &mut rng, "head", width, EMBED_DIM);
        Self { params, linear }
    }

    pub fn forward(&self, s: &Session<'_, T>, p: &Bound, x: Var) -> Var {
        self.linear.forward(s, p, x)
    }

    /// Applies the head to one raw encoder vector.
    pub fn apply(&self, raw: &[T]) -> Vec<T> {
        let g = Graph::new();
        let s = Session::eval(&g);
        let p = self.params.bind(&g);
        let x = g.constant(Tensor::new(&[1, raw.len()], raw.to_vec()));
        g.value(self.forward(&s, &p, x)).data().to_vec()
    }
}

/// `[arity, 256]` caption embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding<T> {
    pub mode: TextMode,
    pub rows: Tensor<T>,
}

impl<T: Scalar> TextEmbedding<T> {
    pub fn row(&self, i: usize) -> &[T] {
        self.rows.row(i)
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        self.rows.to_rows()
    }
}

fn check_captions(captions: &[String; 3]) -> Result<()> {
    if captions.iter().any(|c| tokenize(c).is_empty()) {
        return Err(Error::EmptyCaption);
    }
    Ok(())
}

/// Embeds sentences through encoder and head in one pass: `[n, 256]`.
pub fn embed_sentences<T: Scalar, E: SentenceEncoder<T> + ?Sized>(
    sentences: &[&str],
    enc: &E,
    head: &ProjectionHead<T>,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let s = Session::new(&g, enc.is_training(), enc.dropout_p(), 0);
    let pe = enc.params().bind(&g);
    let ph = head.params.bind(&g);
    let raw = enc.forward(&s, &pe, sentences)?;
    let out = head.forward(&s, &ph, raw);
    let t = (*g.value(out)).clone();
    Ok(t)
}

/// One row per caption.
pub fn encode_lto<T: Scalar, E: SentenceEncoder<T> + ?Sized>(
    captions: &[String; 3],
    enc: &E,
    head: &ProjectionHead<T>,
) -> Result<TextEmbedding<T>> {
    check_captions(captions)?;
    let refs: Vec<&str> = captions.iter().map(String::as_str).collect();
    Ok(TextEmbedding {
        mode: TextMode::Lto,
        rows: embed_sentences(&refs, enc, head)?,
    })
}

/// Captions joined by single spaces.
pub fn lso_string(captions: &[String; 3]) -> String {
    captions.join(" ")
}

/// One row for the concatenated captions.
pub fn encode_lso<T: Scalar, E: SentenceEncoder<T> + ?Sized>(
    captions: &[String; 3],
    enc: &E,
    head: &ProjectionHead<T>,
) -> Result<TextEmbedding<T>> {
    check_captions(captions)?;
    Ok(TextEmbedding {
        mode: TextMode::Lso,
        rows: embed_sentences(&[lso_string(captions).as_str()], enc, head)?,
    })
}

pub fn encode_text<T: Scalar, E: SentenceEncoder<T> + ?Sized>(
    captions: &[String; 3],
    mode: TextMode,
    enc: &E,
    head: &ProjectionHead<T>,
) -> Result<TextEmbedding<T>> {
    match mode {
        TextMode::Lto => encode_lto(captions, enc, head),
        TextMode::Lso => encode_lso(captions, enc, head),
    }
}

/// Caption embeddings of every track, in dataset order.
pub fn encode_dataset<T: Scalar, E: SentenceEncoder<T> + ?Sized>(
    d: &Dataset,
    mode: TextMode,
    enc: &E,
    head: &ProjectionHead<T>,
) -> Result<Vec<TextEmbedding<T>>> {
    d.tracks
        .iter()
        .map(|t| encode_text(&t.captions, mode, enc, head))
        .collect()
}

/// Where a triplet element came from: a track and the caption indices used
/// (one index in LTO, a permutation of all three in LSO).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Source {
    pub track: String,
    pub captions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextTriplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
    pub anchor_src: Source,
    pub positive_src: Source,
    pub negative_src: Source,
}

fn permuted(captions: &[String; 3], order: &[usize]) -> String {
    order.iter().map(|&i| captions[i].as_str()).collect::<Vec<_>>().join(" ")
}

fn random_perm<R: Rng>(rng: &mut R) -> Vec<usize> {
    let mut p = vec![0, 1, 2];
    p.shuffle(rng);
    p
}

/// Random anchor/positive/negative caption triplets. Anchor tracks are
/// uniform; the negative track is uniform over the other tracks.
pub fn sample_text_triplets<R: Rng>(
    d: &Dataset,
    mode: TextMode,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<TextTriplet>> {
    let n = d.n();
    if n < 2 {
        return Err(Error::TooFewTracks { needed: 2, got: n });
    }
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let (ta, tb) = (&d.tracks[a], &d.tracks[b]);
        let src = |id: &str, caps: Vec<usize>| Source {
            track: id.to_string(),
            captions: caps,
        };
        let t = match mode {
            TextMode::Lto => {
                let i = rng.random_range(0..3);
                let mut j = rng.random_range(0..2);
                if j >= i {
                    j += 1;
                }
                let k = rng.random_range(0..3);
                TextTriplet {
                    anchor: ta.captions[i].clone(),
                    positive: ta.captions[j].clone(),
                    negative: tb.captions[k].clone(),
                    anchor_src: src(&ta.id, vec![i]),
                    positive_src: src(&ta.id, vec![j]),
                    negative_src: src(&tb.id, vec![k]),
                }
            }
            TextMode::Lso => {
                let pa = random_perm(rng);
                let mut pp = random_perm(rng);
                while pp == pa {
                    pp = random_perm(rng);
                }
                let pn = random_perm(rng);
                TextTriplet {
                    anchor: permuted(&ta.captions, &pa),
                    positive: permuted(&ta.captions, &pp),
                    negative: permuted(&tb.captions, &pn),
                    anchor_src: src(&ta.id, pa),
                    positive_src: src(&ta.id, pp),
                    negative_src: src(&tb.id, pn),
                }
            }
        };
        out.push(t);
    }
    Ok(out)
}

/// Mean hinge `max(0, d_ap - d_an + m)` over the batch.
pub fn triplet_margin_loss<T: Scalar>(d_ap: &[T], d_an: &[T], margin: T) -> Result<T> {
    if d_ap.len() != d_an.len() {
        return Err(Error::LengthMismatch {
            left: d_ap.len(),
            right: d_an.len(),
        });
    }
    if d_ap.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let sum: T = d_ap
        .iter()
        .zip(d_an)
        .map(|(&p, &n)| (p - n + margin).max(T::zero()))
        .sum();
    Ok(sum / lit::<T>(d_ap.len() as f64))
}

/// Graph form of [`triplet_margin_loss`] over rows of three `[B, D]` blocks.
pub fn triplet_margin_loss_graph<T: Scalar>(
    g: &Graph<T>,
    anchors: Var,
    positives: Var,
    negatives: Var,
    batch: usize,
    margin: f64,
    metric: Metric,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for i in 0..batch {
        let a = g.gather_rows(anchors, &[i]);
        let p = g.gather_rows(positives, &[i]);
        let n = g.gather_rows(negatives, &[i]);
        let dap = g.pair_dist(a, p, metric)?;
        let dan = g.pair_dist(a, n, metric)?;
        let h = g.relu(g.add_scalar(g.sub(dap, dan), lit(margin)));
        total = Some(match total {
            Some(t) => g.add(t, h),
            None => h,
        });
    }
    let total = total.ok_or(Error::LengthMismatch { left: 0, right: 0 })?;
    Ok(g.sum_all(g.scale(total, lit(1.0 / batch as f64))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextFinetuneConfig {
    pub mode: TextMode,
    pub metric: Metric,
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Triplet batches per epoch; 0 means one pass worth of anchors.
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TextFinetuneConfig {
    fn default() -> Self {
        Self {
            mode: TextMode::Lto,
            metric: Metric::CosineMetric,
            margin: 1.0,
            epochs: 30,
            batch_size: 16,
            steps_per_epoch: 0,
            lr: 0.5,
            momentum: 0.0,
            seed: 0,
        }
    }
}

/// Per-caption embeddings for every track, used by the separation report.
pub fn caption_embeddings<T: Scalar, E: SentenceEncoder<T> + ?Sized>(
    d: &Dataset,
    enc: &E,
    head: &ProjectionHead<T>,
) -> Result<Vec<[Vec<T>; 3]>> {
    d.tracks
        .iter()
        .map(|t| {
            let e = encode_lto(&t.captions, enc, head)?;
            Ok([e.row(0).to_vec(), e.row(1).to_vec(), e.row(2).to_vec()])
        })
        .collect()
}

pub fn separation_report<T: Scalar, E: SentenceEncoder<T> + ?Sized>(
    d: &Dataset,
    enc: &E,
    head: &ProjectionHead<T>,
    metric: Metric,
) -> Result<IntraInterReport> {
    intra_inter_report(&caption_embeddings(d, enc, head)?, metric)
}

/// Loss of one triplet batch and, when `grads` is set, the gradients of
/// encoder and head parameters.
#[allow(clippy::type_complexity)]
pub fn triplet_batch_loss<T: Scalar, E: SentenceEncoder<T> + ?Sized>(
    batch: &[TextTriplet],
    enc: &E,
    head: &ProjectionHead<T>,
    cfg: &TextFinetuneConfig,
    dropout_seed: u64,
    grads: bool,
) -> Result<(T, Option<(Vec<Vec<T>>, Vec<Vec<T>>)>)> {
    let g = Graph::new();
    let s = Session::new(&g, enc.is_training(), enc.dropout_p(), dropout_seed);
    let pe = enc.params().bind(&g);
    let ph = head.params.bind(&g);
    let sentences: Vec<&str> = batch
        .iter()
        .flat_map(|t| [t.anchor.as_str(), t.positive.as_str(), t.negative.as_str()])
        .collect();
    let raw = enc.forward(&s, &pe, &sentences)?;
    let emb = head.forward(&s, &ph, raw);
    let b = batch.len();
    let pick = |k: usize| g.gather_rows(emb, &(0..b).map(|i| 3 * i + k).collect::<Vec<_>>());
    let (a, p, n) = (pick(0), pick(1), pick(2));
    let loss = triplet_margin_loss_graph(&g, a, p, n, b, cfg.margin, cfg.metric)?;
    let value = scalar_value(&g, loss);
    if !grads {
        return Ok((value, None));
    }
    let mut gr = g.backward(loss);
    let ge = pe.collect_grads(&mut gr, enc.params());
    let gh = ph.collect_grads(&mut gr, &head.params);
    Ok((value, Some((ge, gh))))
}

/// Semi-supervised triplet fine-tuning of encoder and head with SGD.
/// Returns one separation report before training and one after each epoch.
pub fn finetune_text<T: Scalar, E: SentenceEncoder<T> + ?Sized>(
    d: &Dataset,
    enc: &mut E,
    head: &mut ProjectionHead<T>,
    cfg: &TextFinetuneConfig,
) -> Result<Vec<IntraInterReport>> {
    if d.n() < 2 {
        return Err(Error::TooFewTracks { needed: 2, got: d.n() });
    }
    if cfg.batch_size == 0 || !(cfg.margin >= 0.0) || !(cfg.lr >= 0.0) {
        return Err(Error::Config("text fine-tune needs batch_size >= 1, margin >= 0, lr >= 0".into()));
    }
    let was_training = enc.is_training();
    enc.set_training(false);
    let mut history = vec![separation_report(d, enc, head, cfg.metric)?];
    let steps = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        d.n().div_ceil(cfg.batch_size)
    };
    let kind = OptimizerKind::Sgd {
        momentum: cfg.momentum,
    };
    let mut opt_enc = Optimizer::new(kind);
    let mut opt_head = Optimizer::new(kind);
    for epoch in 0..cfg.epochs {
        enc.set_training(true);
        for step in 0..steps {
            let batch_seed = derive_seed(cfg.seed, &[epoch as u64, step as u64]);
            let mut rng: ChaCha8Rng = stream(batch_seed, &[0]);
            let batch = sample_text_triplets(d, cfg.mode, cfg.batch_size, &mut rng)?;
            let (loss, grads) = triplet_batch_loss(&batch, enc, head, cfg, batch_seed, true)?;
            ensure_finite(loss, batch_seed)?;
            let (ge, gh) = grads.expect("gradients requested");
            opt_enc.step(enc.params_mut(), &ge, cfg.lr);
            opt_head.step(&mut head.params, &gh, cfg.lr);
        }
        enc.set_training(false);
        history.push(separation_report(d, enc, head, cfg.metric)?);
    }
    enc.set_training(was_training);
    Ok(history)
}

/// Writes encoder, head and the effective fine-tune config.
pub fn save_text_checkpoint<T: Scalar>(
    path: &Path,
    enc: &ToyEncoder<T>,
    head: &ProjectionHead<T>,
    cfg: &TextFinetuneConfig,
) -> Result<()> {
    let mut w = CheckpointWriter::new(TXT_MAGIC, TXT_VERSION);
    w.u32(enc.config.width as u32);
    w.u32(enc.config.embed_dim as u32);
    w.str(&serde_json::to_string(&enc.config)?);
    w.str(&serde_json::to_string(cfg)?);
    w.u32(enc.vocab.len() as u32);
    for t in enc.vocab.tokens() {
        w.str(t);
    }
    w.str("sgd");
    w.params(enc.params());
    w.params(&head.params);
    w.save(path)
}

/// Loaded text stage: encoder, head and the config it was trained with.
pub struct TextCheckpoint<T> {
    pub encoder: ToyEncoder<T>,
    pub head: ProjectionHead<T>,
    pub config: TextFinetuneConfig,
}

pub fn load_text_checkpoint<T: Scalar>(path: &Path) -> Result<TextCheckpoint<T>> {
    let mut r = CheckpointReader::open(path, TXT_MAGIC)?;
    if r.version != TXT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported text checkpoint version {}", r.version)));
    }
    let width = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let enc_cfg: ToyEncoderConfig = serde_json::from_str(&r.str()?)?;
    if enc_cfg.width != width || enc_cfg.embed_dim != embed_dim {
        return Err(Error::Checkpoint("encoder header disagrees with its config".into()));
    }
    let config: TextFinetuneConfig = serde_json::from_str(&r.str()?)?;
    let n = r.u32()? as usize;
    let tokens = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let _optimizer = r.str()?;
    let mut encoder = ToyEncoder::new(Vocabulary::from_tokens(tokens)?, enc_cfg, 0);
    r.params_into(encoder.params_mut())?;
    let mut head = ProjectionHead::new(width, 0);
    r.params_into(&mut head.params)?;
    r.finish()?;
    Ok(TextCheckpoint {
        encoder,
        head,
        config,
    })
}
