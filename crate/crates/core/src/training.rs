//! Visual-branch optimization against frozen caption embeddings:
//! composite triplet objective, online hard-negative mining, learning-rate
//! schedule and the epoch loop with checkpointing.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::assets::TrackAssets;
use crate::data::records::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::graph::{ensure_finite, scalar_value, Graph, Var};
use crate::metrics::{aggregate, distance_matrix, Aggregation, Metric};
use crate::nn::Session;
use crate::optim::{Optimizer, OptimizerKind};
use crate::retrieval::QueryMode;
use crate::scalar::{lit, Scalar};
use crate::seed::{derive_seed, stream};
use crate::tensor::Tensor;
use crate::text::{TextEmbedding, TextMode};
use crate::visual::{VisualConfig, VisualMode, VisualModel};

const STREAM_SHUFFLE: u64 = 0x5f;
const STREAM_SUBSAMPLE: u64 = 0x5b;
const STREAM_DROPOUT: u64 = 0xd0;

/// Pairing of visual and language output arities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "VS-LT")]
    VsLt,
    #[serde(rename = "VS-LS")]
    VsLs,
    #[default]
    #[serde(rename = "VT-LT")]
    VtLt,
}

impl ModelVariant {
    pub fn visual_mode(self) -> VisualMode {
        match self {
            ModelVariant::VsLt | ModelVariant::VsLs => VisualMode::Vso,
            ModelVariant::VtLt => VisualMode::Vto,
        }
    }

    pub fn text_mode(self) -> TextMode {
        match self {
            ModelVariant::VsLs => TextMode::Lso,
            ModelVariant::VsLt | ModelVariant::VtLt => TextMode::Lto,
        }
    }

    pub fn visual_arity(self) -> usize {
        self.visual_mode().arity()
    }

    pub fn text_arity(self) -> usize {
        self.text_mode().arity()
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelVariant::VsLt => "VS-LT",
            ModelVariant::VsLs => "VS-LS",
            ModelVariant::VtLt => "VT-LT",
        })
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "vs-lt" => Ok(ModelVariant::VsLt),
            "vs-ls" => Ok(ModelVariant::VsLs),
            "vt-lt" => Ok(ModelVariant::VtLt),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected vs-lt, vs-ls or vt-lt)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    pub beta: f64,
    pub metric: Metric,
    pub positive: Aggregation,
    pub negative: Aggregation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            beta: 0.1,
            metric: Metric::Euclidean,
            positive: Aggregation::Min,
            negative: Aggregation::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("margin and beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Which in-batch negative each anchor is paired with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    /// Candidate with the largest anchor distance.
    #[default]
    Farthest,
    /// Candidate with the smallest anchor distance.
    Closest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `(epoch, lr)` pairs; the rate switches at the start of each epoch.
    pub milestones: Vec<(usize, f64)>,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Compute training-set MRR every this many epochs (0: never).
    pub mrr_every: usize,
    pub optimizer: OptimizerKind,
    pub mining: Mining,
    /// Query granularity of the training-set MRR.
    pub mrr_queries: QueryMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale schedule: milestones at the same fractions of training as
    /// the full-scale run, rates scaled by the same ratios.
    pub fn desk() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            milestones: vec![(132, 1e-3 * 2.5 / 3.5), (191, 1e-3 * 1.5 / 3.5)],
            seed: 0,
            checkpoint_every: 0,
            mrr_every: 0,
            optimizer: OptimizerKind::default(),
            mining: Mining::Farthest,
            mrr_queries: QueryMode::Track,
        }
    }

    /// Full-scale schedule of the published run.
    pub fn paper_2021() -> Self {
        Self {
            epochs: 680,
            batch_size: 96,
            lr: 3.5e-5,
            milestones: vec![(450, 2.5e-5), (650, 1.5e-5)],
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-2021" => Ok(Self::paper_2021()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (desk, paper-2021)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 for negative mining".into()));
        }
        if self.milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("lr milestones must be strictly increasing".into()));
        }
        if !(self.lr >= 0.0) || self.milestones.iter().any(|m| !(m.1 >= 0.0)) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.milestones
        .iter()
        .take_while(|(e, _)| epoch >= *e)
        .last()
        .map_or(cfg.lr, |&(_, lr)| lr)
}

fn matrix<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, metric: Metric) -> Result<crate::metrics::DistanceMatrix<T>> {
    distance_matrix(&a.to_rows(), &b.to_rows(), metric)
}

/// Anchor-positive distance: aggregate of the distance matrix (min by default).
pub fn phi<T: Scalar>(a: &Tensor<T>, p: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    Ok(aggregate(&matrix(a, p, cfg.metric)?, cfg.positive))
}

/// Anchor-negative distance: aggregate of the distance matrix (mean by default).
pub fn neg_distance<T: Scalar>(a: &Tensor<T>, n: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    Ok(aggregate(&matrix(a, n, cfg.metric)?, cfg.negative))
}

/// Anchors (visual) with their positives and mined negatives (text).
#[derive(Debug, Clone)]
pub struct TripletBatch<T> {
    pub anchors: Vec<Tensor<T>>,
    pub positives: Vec<Tensor<T>>,
    pub negatives: Vec<Tensor<T>>,
}

/// Mean over the batch of `max(0, φ - neg + m) + β·φ`.
pub fn composite_loss<T: Scalar>(batch: &TripletBatch<T>, cfg: &LossConfig) -> Result<T> {
    let b = batch.anchors.len();
    if b == 0 || batch.positives.len() != b || batch.negatives.len() != b {
        return Err(Error::LengthMismatch {
            left: b,
            right: batch.positives.len().min(batch.negatives.len()),
        });
    }
    let (m, beta) = (lit::<T>(cfg.margin), lit::<T>(cfg.beta));
    let mut total = T::zero();
    for i in 0..b {
        let dp = phi(&batch.anchors[i], &batch.positives[i], cfg)?;
        let dn = neg_distance(&batch.anchors[i], &batch.negatives[i], cfg)?;
        total += (dp - dn + m).max(T::zero()) + beta * dp;
    }
    let loss = total / lit::<T>(b as f64);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch_seed: 0 });
    }
    Ok(loss)
}

fn reduce<T: Scalar>(g: &Graph<T>, d: Var, mode: Aggregation) -> Var {
    match mode {
        Aggregation::Min => g.min_all(d),
        Aggregation::Mean => g.mean_all(d),
    }
}

/// Graph form of [`composite_loss`]; anchors carry gradients.
pub fn composite_loss_graph<T: Scalar>(
    g: &Graph<T>,
    anchors: &[Var],
    positives: &[Var],
    negatives: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    let b = anchors.len();
    if b == 0 || positives.len() != b || negatives.len() != b {
        return Err(Error::LengthMismatch {
            left: b,
            right: positives.len().min(negatives.len()),
        });
    }
    let mut total: Option<Var> = None;
    for i in 0..b {
        let dp = reduce(g, g.pair_dist(anchors[i], positives[i], cfg.metric)?, cfg.positive);
        let dn = reduce(g, g.pair_dist(anchors[i], negatives[i], cfg.metric)?, cfg.negative);
        let hinge = g.relu(g.add_scalar(g.sub(dp, dn), lit(cfg.margin)));
        let term = g.add(hinge, g.scale(dp, lit(cfg.beta)));
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    Ok(g.scale(total.expect("non-empty batch"), lit(1.0 / b as f64)))
}

/// Per anchor `i`, the index `j != i` of `texts` selected by `mining` under
/// the negative aggregation; ties go to the lowest index.
pub fn mine_hard_negatives<T: Scalar>(
    anchors: &[Tensor<T>],
    texts: &[Tensor<T>],
    cfg: &LossConfig,
    mining: Mining,
) -> Result<Vec<usize>> {
    if anchors.len() != texts.len() {
        return Err(Error::LengthMismatch {
            left: anchors.len(),
            right: texts.len(),
        });
    }
    let mut out = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        let mut best: Option<(usize, T)> = None;
        for (j, t) in texts.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = neg_distance(a, t, cfg)?;
            let better = match (best, mining) {
                (None, _) => true,
                (Some((_, bd)), Mining::Farthest) => d > bd,
                (Some((_, bd)), Mining::Closest) => d < bd,
            };
            if better {
                best = Some((j, d));
            }
        }
        out.push(best.ok_or(Error::NoCandidates(i))?.0);
    }
    Ok(out)
}

/// `[model]`, `[loss]` and `[train]` sections of a run config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub visual: VisualConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::VtLt,
            visual: VisualConfig::desk(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.resolve();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Makes the visual head agree with the variant.
    pub fn resolve(&mut self) {
        self.model.visual.mode = self.model.variant.visual_mode();
    }

    pub fn validate(&self) -> Result<()> {
        self.model.visual.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.model.visual.mode != self.model.variant.visual_mode() {
            return Err(Error::Config("visual mode disagrees with the variant".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub mrr: Option<f64>,
}

impl HistoryRow {
    pub fn csv_line(&self) -> String {
        match self.mrr {
            Some(m) => format!("{},{},{},{}", self.epoch, self.loss, self.lr, m),
            None => format!("{},{},{},", self.epoch, self.loss, self.lr),
        }
    }
}

pub const HISTORY_HEADER: &str = "epoch,loss,lr,mrr";

/// Where a training run writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn history(&self) -> PathBuf {
        self.dir.join("history.csv")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
}

/// Training-set MRR callback: receives the current model, returns MRR.
pub type MrrProbe<'a, T> = dyn Fn(&VisualModel<T>) -> Result<f64> + 'a;

/// Batches of shuffled track indices; a trailing singleton joins the
/// previous batch so every batch can mine a negative.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[STREAM_SHUFFLE, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Loss and parameter gradients of one batch of track indices.
#[allow(clippy::too_many_arguments)]
pub fn batch_step<T: Scalar>(
    model: &VisualModel<T>,
    d: &Dataset,
    assets: &dyn TrackAssets,
    texts: &[TextEmbedding<T>],
    batch: &[usize],
    loss_cfg: &LossConfig,
    mining: Mining,
    subsample_seed: u64,
    session_seed: Option<u64>,
) -> Result<(T, Vec<Vec<T>>)> {
    let g = Graph::new();
    let s = match session_seed {
        Some(seed) => Session::new(&g, true, model.config.encoder.dropout_p, seed),
        None => Session::eval(&g),
    };
    let p = model.params.bind(&g);
    let mut anchors = Vec::with_capacity(batch.len());
    for &i in batch {
        let prep = model.prepare(&d.tracks[i], assets, d.frame_size, subsample_seed)?;
        anchors.push(model.forward(&s, &p, &prep)?);
    }
    let anchor_vals: Vec<Tensor<T>> = anchors.iter().map(|&a| (*g.value(a)).clone()).collect();
    let pos_vals: Vec<Tensor<T>> = batch.iter().map(|&i| texts[i].rows.clone()).collect();
    let neg_idx = mine_hard_negatives(&anchor_vals, &pos_vals, loss_cfg, mining)?;
    let positives: Vec<Var> = pos_vals.iter().map(|t| g.constant(t.clone())).collect();
    let negatives: Vec<Var> = neg_idx.iter().map(|&j| positives[j]).collect();
    let loss = composite_loss_graph(&g, &anchors, &positives, &negatives, loss_cfg)?;
    let value = scalar_value(&g, loss);
    let mut grads = g.backward(loss);
    Ok((value, p.collect_grads(&mut grads, &model.params)))
}

/// Trains `model` in place. `texts[i]` is the frozen caption embedding of
/// track `i` with the variant's text arity.
#[allow(clippy::too_many_arguments)]
pub fn train_visual<T: Scalar>(
    d: &Dataset,
    assets: &dyn TrackAssets,
    texts: &[TextEmbedding<T>],
    model: &mut VisualModel<T>,
    cfg: &RunConfig,
    outputs: Option<&TrainOutputs>,
    mrr_probe: Option<&MrrProbe<'_, T>>,
) -> Result<Vec<HistoryRow>> {
    cfg.validate()?;
    if d.n() < 2 {
        return Err(Error::TooFewTracks { needed: 2, got: d.n() });
    }
    if texts.len() != d.n() {
        return Err(Error::LengthMismatch {
            left: texts.len(),
            right: d.n(),
        });
    }
    let arity = cfg.model.variant.text_arity();
    if texts.iter().any(|t| t.rows.rows() != arity) {
        return Err(Error::Shape(format!("text embeddings must have {arity} rows for {}", cfg.model.variant)));
    }
    if model.mode() != cfg.model.variant.visual_mode() {
        return Err(Error::Config("model head disagrees with the variant".into()));
    }
    let tc = &cfg.train;
    let run_text = cfg.to_toml()?;
    if let Some(out) = outputs {
        fs::create_dir_all(&out.dir)?;
        write_atomic(&out.config(), run_text.as_bytes())?;
        write_atomic(&out.history(), format!("{HISTORY_HEADER}\n").as_bytes())?;
    }
    let mut opt = Optimizer::new(tc.optimizer);
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, tc);
        let subsample_seed = derive_seed(tc.seed, &[STREAM_SUBSAMPLE, epoch as u64]);
        let batches = epoch_batches(d.n(), tc.batch_size, tc.seed, epoch);
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let batch_seed = derive_seed(tc.seed, &[STREAM_DROPOUT, epoch as u64, b as u64]);
            let (loss, grads) = batch_step(
                model,
                d,
                assets,
                texts,
                batch,
                &cfg.loss,
                tc.mining,
                subsample_seed,
                Some(batch_seed),
            )?;
            ensure_finite(loss, batch_seed)?;
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { batch_seed });
            }
            opt.step(&mut model.params, &grads, lr);
            loss_sum += loss.as_f64();
        }
        let last = epoch + 1 == tc.epochs;
        let mrr = match mrr_probe {
            Some(f) if tc.mrr_every > 0 && ((epoch + 1) % tc.mrr_every == 0 || last) => Some(f(model)?),
            _ => None,
        };
        let row = HistoryRow {
            epoch,
            loss: loss_sum / batches.len() as f64,
            lr,
            mrr,
        };
        history.push(row);
        if let Some(out) = outputs {
            let mut f = OpenOptions::new().append(true).open(out.history())?;
            writeln!(f, "{}", row.csv_line())?;
            if last || (tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0) {
                model.save(&out.checkpoint(), &run_text)?;
            }
        }
    }
    if let Some(out) = outputs {
        if tc.epochs == 0 {
            model.save(&out.checkpoint(), &run_text)?;
        }
    }
    Ok(history)
}
