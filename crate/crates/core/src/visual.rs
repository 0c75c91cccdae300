//! Visual branch: per-frame object tensors, the crop encoder, the spatial
//! and temporal transformer encoders and the single/triple output heads.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::imageops::{resize, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointReader, CheckpointWriter};
use crate::data::assets::TrackAssets;
use crate::data::records::{ObjectRecord, TrackRecord, FEATURE_DIM, OBJECT_WIDTH};
use crate::data::sampling::{iou, subsample_frames, DEFAULT_FRAME_CAP};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{init_rng, Bound, Conv2d, Decoder, Encoder, Linear, ParamSet, Session};
use crate::scalar::{lit, Scalar};
use crate::seed::{derive_seed, stream};
use crate::tensor::Tensor;
use crate::text::EMBED_DIM;

const VIS_MAGIC: &[u8; 8] = b"AYCE-VIS";
const VIS_VERSION: u32 = 1;

/// Detections overlapping the tracking box above this IoU are dropped.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VisualMode {
    #[serde(rename = "VSO")]
    Vso,
    #[default]
    #[serde(rename = "VTO")]
    Vto,
}

impl VisualMode {
    pub fn arity(self) -> usize {
        match self {
            VisualMode::Vso => 1,
            VisualMode::Vto => 3,
        }
    }
}

impl fmt::Display for VisualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VisualMode::Vso => "VSO",
            VisualMode::Vto => "VTO",
        })
    }
}

impl FromStr for VisualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vso" => Ok(VisualMode::Vso),
            "vto" => Ok(VisualMode::Vto),
            _ => Err(Error::Config(format!("unknown visual mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_blocks: 6,
            n_heads: 8,
            d_model: 256,
            d_ff: 2048,
            dropout_p: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            n_blocks: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            dropout_p: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisualConfig {
    pub mode: VisualMode,
    pub encoder: EncoderConfig,
    /// Crop `(width, height)` after resizing.
    pub crop_size: [u32; 2],
    /// Output channels of the stride-2 3×3 convolution stages.
    pub conv_channels: Vec<usize>,
    pub frame_cap: usize,
    /// Most detections kept per frame (in sidecar order); `None` keeps all.
    pub object_cap: Option<usize>,
    pub iou_threshold: f64,
    /// Class id written into the tracked-vehicle slot.
    pub tracked_class: u32,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            mode: VisualMode::Vto,
            encoder: EncoderConfig::default(),
            crop_size: [110, 90],
            conv_channels: vec![32, 64, 128, 256],
            frame_cap: DEFAULT_FRAME_CAP,
            object_cap: None,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            tracked_class: 12,
        }
    }
}

impl VisualConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            crop_size: [32, 24],
            conv_channels: vec![8, 16, 32, 32],
            object_cap: Some(8),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.crop_size.iter().any(|&v| v == 0) || self.conv_channels.contains(&0) {
            return Err(Error::Config("crop size and conv channels must be positive".into()));
        }
        if self.frame_cap == 0 {
            return Err(Error::Config("frame_cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Object tensor of one subsampled track: `[M, O+1, 261]`, slot 0 is the
/// tracked vehicle. Real frames always precede padded ones.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput<T> {
    pub data: Tensor<T>,
    pub frame_indices: Vec<usize>,
    pub obj_mask: Vec<bool>,
    pub frame_mask: Vec<bool>,
}

impl<T: Scalar> VisualInput<T> {
    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn real_frames(&self) -> usize {
        self.frame_mask.iter().filter(|&&m| m).count()
    }

    /// Appends `extra` fully masked object slots to every frame.
    pub fn pad_objects(&self, extra: usize) -> Self {
        let (m, o) = (self.frames(), self.slots());
        let mut data = Vec::with_capacity(m * (o + extra) * OBJECT_WIDTH);
        let mut mask = Vec::with_capacity(m * (o + extra));
        for f in 0..m {
            let start = f * o * OBJECT_WIDTH;
            data.extend_from_slice(&self.data.data()[start..start + o * OBJECT_WIDTH]);
            data.extend(std::iter::repeat_n(T::zero(), extra * OBJECT_WIDTH));
            mask.extend_from_slice(&self.obj_mask[f * o..(f + 1) * o]);
            mask.extend(std::iter::repeat_n(false, extra));
        }
        Self {
            data: Tensor::new(&[m, o + extra, OBJECT_WIDTH], data),
            frame_indices: self.frame_indices.clone(),
            obj_mask: mask,
            frame_mask: self.frame_mask.clone(),
        }
    }

    /// Appends `extra` fully masked frames.
    pub fn pad_frames(&self, extra: usize) -> Self {
        let (m, o) = (self.frames(), self.slots());
        let mut data = self.data.data().to_vec();
        data.extend(std::iter::repeat_n(T::zero(), extra * o * OBJECT_WIDTH));
        let mut obj_mask = self.obj_mask.clone();
        obj_mask.extend(std::iter::repeat_n(false, extra * o));
        let mut frame_mask = self.frame_mask.clone();
        frame_mask.extend(std::iter::repeat_n(false, extra));
        let mut frame_indices = self.frame_indices.clone();
        frame_indices.extend(std::iter::repeat_n(0, extra));
        Self {
            data: Tensor::new(&[m + extra, o, OBJECT_WIDTH], data),
            frame_indices,
            obj_mask,
            frame_mask,
        }
    }

    /// Swaps object slots `a` and `b` (both ≥ 1) in every frame.
    pub fn swap_objects(&self, a: usize, b: usize) -> Self {
        let (m, o) = (self.frames(), self.slots());
        let mut out = self.clone();
        let w = OBJECT_WIDTH;
        let data = out.data.data_mut();
        for f in 0..m {
            for k in 0..w {
                data.swap((f * o + a) * w + k, (f * o + b) * w + k);
            }
            out.obj_mask.swap(f * o + a, f * o + b);
        }
        out
    }
}

/// Normalized `(x, y, w, h)` of a pixel box.
pub fn normalize_box(b: [f64; 4], frame_size: [f64; 2]) -> Result<[f64; 4]> {
    const TOL: f64 = 1e-6;
    let [fw, fh] = frame_size;
    let n = [b[0] / fw, b[1] / fh, b[2] / fw, b[3] / fh];
    let ok = fw > 0.0
        && fh > 0.0
        && n.iter().all(|v| v.is_finite())
        && n[0] >= -TOL
        && n[1] >= -TOL
        && n[2] > 0.0
        && n[3] > 0.0
        && n[0] + n[2] <= 1.0 + TOL
        && n[1] + n[3] <= 1.0 + TOL;
    if !ok {
        return Err(Error::BoxOutOfImage(format!("{b:?} in frame {fw}x{fh}")));
    }
    Ok(n.map(|v| v.clamp(0.0, 1.0)))
}

/// Builds the object tensor for the sampled frames of `track`.
/// `detections[k]` are the filtered objects of frame `sampled[k]`.
pub fn assemble_visual_input<T: Scalar>(
    track: &TrackRecord,
    sampled: &[usize],
    detections: &[Vec<ObjectRecord>],
    frame_size: [f64; 2],
    cfg: &VisualConfig,
) -> Result<VisualInput<T>> {
    if sampled.len() != detections.len() {
        return Err(Error::LengthMismatch {
            left: sampled.len(),
            right: detections.len(),
        });
    }
    let mut kept: Vec<Vec<&ObjectRecord>> = Vec::with_capacity(sampled.len());
    let mut boxes = Vec::with_capacity(sampled.len());
    for (&f, dets) in sampled.iter().zip(detections) {
        let b = *track.boxes.get(f).ok_or_else(|| {
            Error::Shape(format!("frame {f} outside track `{}`", track.id))
        })?;
        let nb = normalize_box(b, frame_size)?;
        let mut k = Vec::new();
        for d in dets {
            d.validate()?;
            let db = d.bbox.map(|v| v as f64);
            if iou(db, nb) > cfg.iou_threshold {
                continue;
            }
            if cfg.object_cap.is_some_and(|c| k.len() >= c) {
                break;
            }
            k.push(d);
        }
        kept.push(k);
        boxes.push(nb);
    }
    let slots = 1 + kept.iter().map(Vec::len).max().unwrap_or(0);
    let m = sampled.len();
    let mut data = vec![T::zero(); m * slots * OBJECT_WIDTH];
    let mut obj_mask = vec![false; m * slots];
    for f in 0..m {
        let base = f * slots;
        let row = &mut data[base * OBJECT_WIDTH..(base + 1) * OBJECT_WIDTH];
        row[0] = lit(cfg.tracked_class as f64);
        for (dst, &v) in row[1..5].iter_mut().zip(&boxes[f]) {
            *dst = lit(v);
        }
        obj_mask[base] = true;
        for (j, d) in kept[f].iter().enumerate() {
            let slot = base + 1 + j;
            let row = &mut data[slot * OBJECT_WIDTH..(slot + 1) * OBJECT_WIDTH];
            for (dst, v) in row.iter_mut().zip(d.flatten()) {
                *dst = lit(v as f64);
            }
            obj_mask[slot] = true;
        }
    }
    Ok(VisualInput {
        data: Tensor::new(&[m, slots, OBJECT_WIDTH], data),
        frame_indices: sampled.to_vec(),
        obj_mask,
        frame_mask: vec![true; m],
    })
}

/// Crops resized to `(w, h)`, scaled to [0, 1], laid out `[M, h, w, 3]`.
pub fn crop_batch<T: Scalar>(crops: &[RgbImage], size: [u32; 2]) -> Tensor<T> {
    let [w, h] = size;
    let mut data = Vec::with_capacity(crops.len() * (w * h * 3) as usize);
    for c in crops {
        let resized;
        let img = if c.dimensions() == (w, h) {
            c
        } else {
            resized = resize(c, w, h, FilterType::Triangle);
            &resized
        };
        data.extend(img.as_raw().iter().map(|&v| lit::<T>(v as f64 / 255.0)));
    }
    Tensor::new(&[crops.len(), h as usize, w as usize, 3], data)
}

/// Sinusoidal positional encoding evaluated at arbitrary positions.
pub fn positional_row(position: f64, d_model: usize) -> Vec<f64> {
    let angles: Vec<f64> = (0..d_model.div_ceil(2))
        .map(|i| position / 10000f64.powf((2 * i) as f64 / d_model as f64))
        .collect();
    // Separate passes keep sin and cos from being fused into one sincos
    // call, whose last bit can differ from the standalone functions.
    let mut row = vec![0.0; d_model];
    for (j, a) in angles.iter().enumerate() {
        row[2 * j] = a.sin();
    }
    for (j, a) in angles.iter().enumerate().take(d_model / 2) {
        row[2 * j + 1] = a.cos();
    }
    row
}

/// Rows of the canonical table at the given, strictly increasing, indices.
pub fn sampling_aware_pe<T: Scalar>(indices: &[usize], d_model: usize) -> Result<Tensor<T>> {
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::NonMonotoneIndices);
    }
    let data = indices
        .iter()
        .flat_map(|&i| positional_row(i as f64, d_model))
        .map(lit)
        .collect();
    Ok(Tensor::new(&[indices.len(), d_model], data))
}

/// `[M, 256]` crop features from `[M, h, w, 3]` pixels.
#[derive(Debug, Clone)]
pub struct CropEncoder {
    pub convs: Vec<Conv2d>,
    pub fc: Linear,
    pub size: [u32; 2],
}

impl CropEncoder {
    fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut rand_chacha::ChaCha8Rng, cfg: &VisualConfig) -> Self {
        let (mut h, mut w) = (cfg.crop_size[1] as usize, cfg.crop_size[0] as usize);
        let mut in_c = 3;
        let mut convs = Vec::new();
        for (i, &c) in cfg.conv_channels.iter().enumerate() {
            let conv = Conv2d::new(ps, rng, &format!("crop.conv{i}"), in_c, c, 3, 2, 1);
            (h, w) = conv.out_size(h, w);
            convs.push(conv);
            in_c = c;
        }
        let fc = Linear::new(ps, rng, "crop.fc", h * w * in_c, FEATURE_DIM);
        Self {
            convs,
            fc,
            size: cfg.crop_size,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, p: &Bound, crops: Var, m: usize) -> Var {
        let g = s.graph;
        let (mut h, mut w) = (self.size[1] as usize, self.size[0] as usize);
        let mut x = crops;
        for conv in &self.convs {
            x = g.relu(conv.forward(s, p, x, m, h, w));
            (h, w) = conv.out_size(h, w);
        }
        let flat = g.reshape(x, &[m, h * w * self.convs.last().map_or(3, |c| c.out_c)]);
        self.fc.forward(s, p, flat)
    }
}

/// Object tensor and crops of one track, ready for a forward pass.
#[derive(Debug, Clone)]
pub struct PreparedTrack<T> {
    pub input: VisualInput<T>,
    /// `[real frames, h, w, 3]`.
    pub crops: Tensor<T>,
}

/// Embedding rows `[arity, 256]` of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedding<T> {
    pub mode: VisualMode,
    pub rows: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct VisualModel<T> {
    pub config: VisualConfig,
    pub params: ParamSet<T>,
    pub crop: CropEncoder,
    pub input_proj: Linear,
    pub spatial: Encoder,
    pub temporal: Encoder,
    pub decoder: Option<Decoder>,
    /// Present when `d_model` differs from the shared embedding width.
    pub out_proj: Option<Linear>,
}

/// Stable 64-bit key of a track id (FNV-1a).
pub fn id_key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl<T: Scalar> VisualModel<T> {
    pub fn new(config: VisualConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let e = config.encoder;
        let mut rng = init_rng(derive_seed(seed, &[0x715]));
        let mut ps = ParamSet::new();
        let crop = CropEncoder::new(&mut ps, &mut rng, &config);
        let input_proj = Linear::new(&mut ps, &mut rng, "input_proj", OBJECT_WIDTH, e.d_model);
        let spatial = Encoder::new(&mut ps, &mut rng, "spatial", e.n_blocks, e.d_model, e.n_heads, e.d_ff);
        let temporal = Encoder::new(&mut ps, &mut rng, "temporal", e.n_blocks, e.d_model, e.n_heads, e.d_ff);
        let decoder = (config.mode == VisualMode::Vto)
            .then(|| Decoder::new(&mut ps, &mut rng, "decoder", e.n_blocks, e.d_model, e.n_heads, e.d_ff));
        let out_proj = (e.d_model != EMBED_DIM)
            .then(|| Linear::new(&mut ps, &mut rng, "out_proj", e.d_model, EMBED_DIM));
        Ok(Self {
            config,
            params: ps,
            crop,
            input_proj,
            spatial,
            temporal,
            decoder,
            out_proj,
        })
    }

    pub fn mode(&self) -> VisualMode {
        self.config.mode
    }

    /// Subsamples (with `rng_seed`), fetches detections and crops, assembles.
    pub fn prepare(
        &self,
        track: &TrackRecord,
        assets: &dyn TrackAssets,
        frame_size: [f64; 2],
        rng_seed: u64,
    ) -> Result<PreparedTrack<T>> {
        let mut rng = stream(rng_seed, &[id_key(&track.id)]);
        let sampled = subsample_frames(track.n_frames(), self.config.frame_cap, &mut rng);
        self.prepare_frames(track, assets, frame_size, &sampled)
    }

    pub fn prepare_frames(
        &self,
        track: &TrackRecord,
        assets: &dyn TrackAssets,
        frame_size: [f64; 2],
        sampled: &[usize],
    ) -> Result<PreparedTrack<T>> {
        if sampled.is_empty() {
            return Err(Error::AllMasked);
        }
        let dets = sampled
            .iter()
            .map(|&f| assets.objects(track, f))
            .collect::<Result<Vec<_>>>()?;
        let input = assemble_visual_input(track, sampled, &dets, frame_size, &self.config)?;
        let crops = sampled
            .iter()
            .map(|&f| assets.crop(track, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedTrack {
            input,
            crops: crop_batch(&crops, self.config.crop_size),
        })
    }

    pub fn crop_features(&self, s: &Session<'_, T>, p: &Bound, crops: &Tensor<T>) -> Var {
        let m = crops.shape()[0];
        let x = s.graph.constant(crops.clone());
        self.crop.forward(s, p, x, m)
    }

    /// Fills slot-0 features with `crop_feats [real, 256]` and applies the
    /// input projection: `[M·(O+1), d_model]`.
    pub fn embed_objects(&self, s: &Session<'_, T>, p: &Bound, input: &VisualInput<T>, crop_feats: Var) -> Result<Var> {
        let g = s.graph;
        let (m, o) = (input.frames(), input.slots());
        let real = input.real_frames();
        if input.frame_mask[..real].iter().any(|&f| !f) {
            return Err(Error::Shape("real frames must precede padded frames".into()));
        }
        if g.shape(crop_feats) != [real, FEATURE_DIM] {
            return Err(Error::Shape(format!(
                "crop features {:?}, expected [{real}, {FEATURE_DIM}]",
                g.shape(crop_feats)
            )));
        }
        let prefix: Vec<T> = (0..real)
            .flat_map(|f| {
                let start = f * o * OBJECT_WIDTH;
                input.data.data()[start..start + 5].to_vec()
            })
            .collect();
        let prefix = g.constant(Tensor::new(&[real, 5], prefix));
        let slot0 = g.concat_cols(prefix, crop_feats);
        let rest = g.constant(input.data.clone().reshaped(&[m * o, OBJECT_WIDTH]));
        let all = g.concat_rows(&[slot0, rest]);
        let idx: Vec<usize> = (0..m * o)
            .map(|k| if k % o == 0 && k / o < real { k / o } else { real + k })
            .collect();
        let x = g.gather_rows(all, &idx);
        Ok(self.input_proj.forward(s, p, x))
    }

    /// Object-axis encoder with `M` as batch, then the masked mean over
    /// real slots: `[M, d_model]`.
    pub fn spatial_encode(
        &self,
        s: &Session<'_, T>,
        p: &Bound,
        x: Var,
        input: &VisualInput<T>,
        probes: &mut Vec<Var>,
    ) -> Result<Var> {
        let (m, o) = (input.frames(), input.slots());
        for f in 0..m {
            if input.frame_mask[f] && !input.obj_mask[f * o..(f + 1) * o].iter().any(|&v| v) {
                return Err(Error::AllMaskedFrame);
            }
        }
        let h = self.spatial.forward(s, p, x, m, &input.obj_mask, probes);
        Ok(s.graph.masked_mean(h, m, &input.obj_mask))
    }

    /// Adds the positional encoding of the original frame indices and
    /// encodes along time: `[M, d_model]`.
    pub fn temporal_encode(
        &self,
        s: &Session<'_, T>,
        p: &Bound,
        x: Var,
        frame_mask: &[bool],
        frame_indices: &[usize],
        probes: &mut Vec<Var>,
    ) -> Result<Var> {
        let g = s.graph;
        let d = self.config.encoder.d_model;
        let m = frame_mask.len();
        let real: Vec<usize> = frame_indices
            .iter()
            .zip(frame_mask)
            .filter_map(|(&i, &r)| r.then_some(i))
            .collect();
        let pe_real = sampling_aware_pe::<T>(&real, d)?;
        let mut pe = Vec::with_capacity(m * d);
        let mut k = 0;
        for &r in frame_mask {
            if r {
                pe.extend_from_slice(pe_real.row(k));
                k += 1;
            } else {
                pe.extend(std::iter::repeat_n(T::zero(), d));
            }
        }
        let x = g.add(x, g.constant(Tensor::new(&[m, d], pe)));
        Ok(self.temporal.forward(s, p, x, 1, frame_mask, probes))
    }

    /// Masked mean over real frames: `[1, d_model]`.
    pub fn vso_head(&self, s: &Session<'_, T>, h: Var, frame_mask: &[bool]) -> Result<Var> {
        if !frame_mask.iter().any(|&f| f) {
            return Err(Error::AllMasked);
        }
        Ok(s.graph.masked_mean(h, 1, frame_mask))
    }

    /// Decoder over three position-only queries: `[3, d_model]`.
    pub fn vto_head(
        &self,
        s: &Session<'_, T>,
        p: &Bound,
        memory: Var,
        frame_mask: &[bool],
        probes: &mut Vec<Var>,
    ) -> Result<Var> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Config("model has no decoder (VSO mode)".into()))?;
        if !frame_mask.iter().any(|&f| f) {
            return Err(Error::AllMasked);
        }
        let queries = s.graph.constant(sampling_aware_pe(&[0, 1, 2], self.config.encoder.d_model)?);
        Ok(dec.forward(s, p, queries, 3, memory, frame_mask, probes))
    }

    /// Full forward pass of one prepared track: `[arity, 256]`.
    pub fn forward(&self, s: &Session<'_, T>, p: &Bound, prep: &PreparedTrack<T>) -> Result<Var> {
        let mut probes = Vec::new();
        self.forward_probed(s, p, prep, &mut probes)
    }

    pub fn forward_probed(
        &self,
        s: &Session<'_, T>,
        p: &Bound,
        prep: &PreparedTrack<T>,
        probes: &mut Vec<Var>,
    ) -> Result<Var> {
        let input = &prep.input;
        let feats = self.crop_features(s, p, &prep.crops);
        let x = self.embed_objects(s, p, input, feats)?;
        let x = self.spatial_encode(s, p, x, input, probes)?;
        let h = self.temporal_encode(s, p, x, &input.frame_mask, &input.frame_indices, probes)?;
        let out = match self.config.mode {
            VisualMode::Vso => self.vso_head(s, h, &input.frame_mask)?,
            VisualMode::Vto => self.vto_head(s, p, h, &input.frame_mask, probes)?,
        };
        Ok(match &self.out_proj {
            Some(l) => l.forward(s, p, out),
            None => out,
        })
    }

    /// Eval-mode embedding of a prepared track.
    pub fn embed_prepared(&self, prep: &PreparedTrack<T>) -> Result<VisualEmbedding<T>> {
        let g = Graph::new();
        let s = Session::eval(&g);
        let p = self.params.bind(&g);
        let v = self.forward(&s, &p, prep)?;
        Ok(VisualEmbedding {
            mode: self.config.mode,
            rows: (*g.value(v)).clone(),
        })
    }

    /// Eval-mode embedding with subsampling seeded by `(seed, track id)`.
    pub fn embed(
        &self,
        track: &TrackRecord,
        assets: &dyn TrackAssets,
        frame_size: [f64; 2],
        seed: u64,
    ) -> Result<VisualEmbedding<T>> {
        self.embed_prepared(&self.prepare(track, assets, frame_size, seed)?)
    }

    /// Writes the config, an opaque run description and all parameters.
    pub fn save(&self, path: &Path, run_config: &str) -> Result<()> {
        let mut w = CheckpointWriter::new(VIS_MAGIC, VIS_VERSION);
        w.str(&self.config.mode.to_string());
        w.str(&serde_json::to_string(&self.config)?);
        w.u32(self.config.crop_size[0]);
        w.u32(self.config.crop_size[1]);
        w.str(run_config);
        w.params(&self.params);
        w.save(path)
    }

    /// Returns the model and the run description stored with it.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut r = CheckpointReader::open(path, VIS_MAGIC)?;
        if r.version != VIS_VERSION {
            return Err(Error::Checkpoint(format!("unsupported visual checkpoint version {}", r.version)));
        }
        let mode: VisualMode = r.str()?.parse()?;
        let config: VisualConfig = serde_json::from_str(&r.str()?)?;
        let crop = [r.u32()?, r.u32()?];
        if config.mode != mode || config.crop_size != crop {
            return Err(Error::Checkpoint("visual header disagrees with its config".into()));
        }
        let run_config = r.str()?;
        let mut model = Self::new(config, 0)?;
        r.params_into(&mut model.params)?;
        r.finish()?;
        Ok((model, run_config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_pe_values() {
        let pe = sampling_aware_pe::<f64>(&[0, 1], 4).unwrap();
        assert_eq!(pe.row(0), [0.0, 1.0, 0.0, 1.0]);
        assert_eq!(pe.row(1)[0], 1f64.sin());
        assert_eq!(pe.row(1)[3], (1.0 / 100.0f64).cos());
        assert!(matches!(sampling_aware_pe::<f64>(&[2, 2], 4), Err(Error::NonMonotoneIndices)));
    }

    #[test]
    fn box_normalization() {
        assert_eq!(normalize_box([10.0, 20.0, 30.0, 40.0], [100.0, 200.0]).unwrap(), [0.1, 0.1, 0.3, 0.2]);
        assert!(normalize_box([90.0, 0.0, 30.0, 10.0], [100.0, 100.0]).is_err());
        assert!(normalize_box([0.0, 0.0, 0.0, 10.0], [100.0, 100.0]).is_err());
    }

    #[test]
    fn encoder_config_checks_heads() {
        let mut c = EncoderConfig::desk();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        assert!(VisualModel::<f32>::new(
            VisualConfig {
                encoder: c,
                ..VisualConfig::desk()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn id_key_is_stable() {
        assert_eq!(id_key(""), 0xcbf2_9ce4_8422_2325);
        assert_ne!(id_key("track-00001"), id_key("track-00002"));
    }
}
