//! Stage 2: patch distillation.
//!
//! Slides are tiled into square patches, each paired with the matching crop
//! of the stage-1 probability map. A convolutional encoder–decoder learns to
//! reproduce those crops from the raw polarization features; the loss is the
//! per-pixel root mean square error between the decoder's softmax output and
//! the stage-1 probabilities. Once trained, the encoder's globally pooled
//! feature map is the patch embedding handed to stage 3.
//!
//! Network layout (channel-first, `f64`):
//!
//! ```text
//! patch D×S×S ─ conv3×3/s₀ ─ tanh ─ … ─ conv3×3/s₃ ─ tanh ─┬─ mean pool ─ embedding (E)
//!                                                         └─ conv1×1 ─ tanh ─ conv1×1 ─ bilinear ─ softmax ─ M×S×S
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{io, PolarSlide};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Bilinear, ConvGeom, Tensor};
use crate::pixelclf::ProbabilityMap;
use crate::seed;

/// One patch and its stage-1 target, both row-major `S × S × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: (usize, usize),
    pub features: Vec<f32>,
    pub target: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub roi_id: String,
    pub side: usize,
    pub depth: usize,
    pub classes: usize,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Draws `count` patches (or all of them, if fewer) without replacement
    /// from several sets, keeping the draw order.
    pub fn sample(sets: &[PatchSet], count: usize, seed: u64, roi_id: &str) -> Result<PatchSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::InvalidInput("no patch sets to sample from".into()))?;
        if sets
            .iter()
            .any(|s| s.side != first.side || s.depth != first.depth || s.classes != first.classes)
        {
            return Err(Error::DimensionMismatch(
                "patch sets disagree on side, depth or class count".into(),
            ));
        }
        let mut all: Vec<(usize, usize)> = sets
            .iter()
            .enumerate()
            .flat_map(|(s, set)| (0..set.len()).map(move |k| (s, k)))
            .collect();
        all.shuffle(&mut seed::rng(seed));
        all.truncate(count);
        Ok(PatchSet {
            roi_id: roi_id.to_string(),
            side: first.side,
            depth: first.depth,
            classes: first.classes,
            patches: all.iter().map(|&(s, k)| sets[s].patches[k].clone()).collect(),
        })
    }
}

/// Patch origins along one axis: a regular grid, with the last patch moved
/// inward so it ends on the far border.
fn axis_origins(extent: usize, side: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + side <= extent).collect();
    let last = extent - side;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

pub fn extract_patches(slide: &PolarSlide, pmap: &ProbabilityMap, side: usize, stride: usize) -> Result<PatchSet> {
    if side == 0 || stride == 0 {
        return Err(Error::InvalidConfig("patch side and stride must be positive".into()));
    }
    if side > slide.height || side > slide.width {
        return Err(Error::InvalidInput(format!(
            "slide {} is {}x{}, smaller than the {side}-pixel patch",
            slide.slide_id, slide.height, slide.width
        )));
    }
    if pmap.height != slide.height || pmap.width != slide.width {
        return Err(Error::DimensionMismatch(format!(
            "probability map {}x{} does not match slide {}x{}",
            pmap.height, pmap.width, slide.height, slide.width
        )));
    }
    let (d, m) = (slide.depth, pmap.classes);
    let mut patches = Vec::new();
    for &r0 in &axis_origins(slide.height, side, stride) {
        for &c0 in &axis_origins(slide.width, side, stride) {
            let mut features = Vec::with_capacity(side * side * d);
            let mut target = Vec::with_capacity(side * side * m);
            for r in r0..r0 + side {
                let row = r * slide.width;
                features.extend_from_slice(&slide.values[(row + c0) * d..(row + c0 + side) * d]);
                target.extend_from_slice(&pmap.probs[(row + c0) * m..(row + c0 + side) * m]);
            }
            patches.push(Patch {
                origin: (r0, c0),
                features,
                target,
            });
        }
    }
    Ok(PatchSet {
        roi_id: slide.slide_id.clone(),
        side,
        depth: d,
        classes: m,
        patches,
    })
}

/// Architecture of a [`DistillNet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub depth: usize,
    pub classes: usize,
    pub side: usize,
    /// Output channels of the encoder convolutions; the last is the
    /// embedding width E.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub decoder_hidden: usize,
}

impl NetShape {
    pub fn embedding_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.classes < 2 || self.side == 0 || self.decoder_hidden == 0 {
            return Err(Error::InvalidConfig(
                "network needs depth ≥ 1, ≥ 2 classes, a positive patch side and decoder width".into(),
            ));
        }
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::InvalidConfig(
                "encoder needs one stride per convolution and at least one convolution".into(),
            ));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::InvalidConfig("encoder channels and strides must be positive".into()));
        }
        Ok(())
    }

    fn encoder_geoms(&self) -> Vec<ConvGeom> {
        let mut geoms = Vec::with_capacity(self.channels.len());
        let (mut cin, mut h) = (self.depth, self.side);
        for (&cout, &stride) in self.channels.iter().zip(&self.strides) {
            let g = ConvGeom {
                cin,
                cout,
                kernel: 3,
                stride,
                pad: 1,
                height: h,
                width: h,
            };
            h = g.out_height();
            cin = cout;
            geoms.push(g);
        }
        geoms
    }

    fn feature_side(&self) -> usize {
        self.encoder_geoms().last().map_or(self.side, |g| g.out_height())
    }

    fn decoder_geoms(&self) -> [ConvGeom; 2] {
        let h = self.feature_side();
        let pointwise = |cin, cout| ConvGeom {
            cin,
            cout,
            kernel: 1,
            stride: 1,
            pad: 0,
            height: h,
            width: h,
        };
        [
            pointwise(self.embedding_dim(), self.decoder_hidden),
            pointwise(self.decoder_hidden, self.classes),
        ]
    }
}

/// Cached activations of one forward pass.
struct Trace {
    /// Input of every convolution, encoder then decoder.
    inputs: Vec<Vec<f64>>,
    cols: Vec<Vec<f64>>,
    /// tanh outputs of encoder layers and the hidden decoder layer.
    acts: Vec<Vec<f64>>,
    /// `M × S × S` softmax output.
    probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub embedding: Vec<f64>,
    /// Row-major `S × S × M`.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillNet {
    pub shape: NetShape,
    /// `enc{i}.weight`, `enc{i}.bias`, …, `dec0.*`, `dec1.*`.
    pub params: Vec<Tensor>,
}

impl DistillNet {
    pub fn new(shape: NetShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = seed::rng(seed);
        let mut params = Vec::new();
        let geoms = shape.encoder_geoms();
        let dec = shape.decoder_geoms();
        for (i, g) in geoms.iter().enumerate() {
            let fan_in = g.cin * 9;
            params.push(Tensor::uniform(&format!("enc{i}.weight"), &g.weight_shape(), fan_in, &mut rng));
            params.push(Tensor::zeros(&format!("enc{i}.bias"), &[g.cout]));
        }
        for (i, g) in dec.iter().enumerate() {
            params.push(Tensor::uniform(&format!("dec{i}.weight"), &g.weight_shape(), g.cin, &mut rng));
            params.push(Tensor::zeros(&format!("dec{i}.bias"), &[g.cout]));
        }
        Ok(Self { shape, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn layer_geoms(&self) -> Vec<ConvGeom> {
        let mut g = self.shape.encoder_geoms();
        g.extend(self.shape.decoder_geoms());
        g
    }

    fn check_patch(&self, features: &[f32]) -> Result<()> {
        let s = &self.shape;
        if features.len() != s.side * s.side * s.depth {
            return Err(Error::DimensionMismatch(format!(
                "patch has {} values, network expects {}x{}x{}",
                features.len(),
                s.side,
                s.side,
                s.depth
            )));
        }
        Ok(())
    }

    /// Row-major `S × S × D` `f32` to channel-first `f64`.
    fn to_planes(&self, features: &[f32]) -> Vec<f64> {
        let (n, d) = (self.shape.side * self.shape.side, self.shape.depth);
        let mut out = vec![0.0; n * d];
        for (p, px) in features.chunks_exact(d).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * n + p] = v as f64;
            }
        }
        out
    }

    fn encode(&self, x: Vec<f64>, trace: &mut Trace) {
        let geoms = self.shape.encoder_geoms();
        let mut input = x;
        for (i, g) in geoms.iter().enumerate() {
            let (mut out, cols) = nn::conv_forward(g, &self.params[2 * i].data, &self.params[2 * i + 1].data, &input);
            out.iter_mut().for_each(|v| *v = v.tanh());
            trace.inputs.push(input);
            trace.cols.push(cols);
            trace.acts.push(out.clone());
            input = out;
        }
    }

    fn trace(&self, features: &[f32], decode: bool) -> Trace {
        let mut trace = Trace {
            inputs: Vec::new(),
            cols: Vec::new(),
            acts: Vec::new(),
            probs: Vec::new(),
        };
        self.encode(self.to_planes(features), &mut trace);
        if !decode {
            return trace;
        }
        let enc = self.shape.channels.len();
        let [g0, g1] = self.shape.decoder_geoms();
        let feat = trace.acts[enc - 1].clone();
        let (mut hidden, _) = nn::conv_forward(&g0, &self.params[2 * enc].data, &self.params[2 * enc + 1].data, &feat);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let (logits, _) = nn::conv_forward(&g1, &self.params[2 * enc + 2].data, &self.params[2 * enc + 3].data, &hidden);
        trace.inputs.push(feat);
        trace.cols.push(Vec::new());
        trace.inputs.push(hidden.clone());
        trace.cols.push(Vec::new());
        trace.acts.push(hidden);

        let h = g1.height;
        let (m, s) = (self.shape.classes, self.shape.side);
        let up = Bilinear::new(m, (h, h), (s, s));
        let mut z = up.forward(&logits);
        let n = s * s;
        let mut buf = vec![0.0; m];
        for p in 0..n {
            for c in 0..m {
                buf[c] = z[c * n + p];
            }
            let sm = nn::softmax(&buf);
            for c in 0..m {
                z[c * n + p] = sm[c];
            }
        }
        trace.probs = z;
        trace
    }

    fn pooled(&self, trace: &Trace) -> Vec<f64> {
        let feat = &trace.acts[self.shape.channels.len() - 1];
        let e = self.shape.embedding_dim();
        let n = feat.len() / e;
        feat.chunks_exact(n).map(|c| c.iter().sum::<f64>() / n as f64).collect()
    }

    fn to_pixel_major(&self, planes: &[f64]) -> Vec<f64> {
        let m = self.shape.classes;
        let n = planes.len() / m;
        let mut out = vec![0.0; planes.len()];
        for c in 0..m {
            for p in 0..n {
                out[p * m + c] = planes[c * n + p];
            }
        }
        out
    }

    pub fn forward(&self, features: &[f32]) -> Result<Prediction> {
        self.check_patch(features)?;
        let trace = self.trace(features, true);
        Ok(Prediction {
            embedding: self.pooled(&trace),
            probs: self.to_pixel_major(&trace.probs),
        })
    }

    /// Encoder only: the pooled E-vector.
    pub fn embedding(&self, features: &[f32]) -> Result<Vec<f64>> {
        self.check_patch(features)?;
        Ok(self.pooled(&self.trace(features, false)))
    }

    /// Mean per-pixel RMSE against `target` (row-major `S × S × M`) and its
    /// gradient with respect to every parameter tensor.
    pub fn loss_and_grad(&self, features: &[f32], target: &[f32]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_patch(features)?;
        let (m, s) = (self.shape.classes, self.shape.side);
        let n = s * s;
        if target.len() != n * m {
            return Err(Error::DimensionMismatch(format!(
                "target has {} values, expected {}",
                target.len(),
                n * m
            )));
        }
        let tr = self.trace(features, true);
        let p = &tr.probs;

        let mut loss = 0.0;
        let mut dz = vec![0.0; n * m];
        for px in 0..n {
            let mut sq = 0.0;
            for c in 0..m {
                let diff = p[c * n + px] - target[px * m + c] as f64;
                sq += diff * diff;
            }
            let r = (sq / m as f64).sqrt();
            loss += r;
            if r == 0.0 {
                continue;
            }
            // dL/dp_c, then back through the softmax
            let scale = 1.0 / (n as f64 * m as f64 * r);
            let mut dot = 0.0;
            for c in 0..m {
                let g = scale * (p[c * n + px] - target[px * m + c] as f64);
                dz[c * n + px] = g;
                dot += g * p[c * n + px];
            }
            for c in 0..m {
                dz[c * n + px] = p[c * n + px] * (dz[c * n + px] - dot);
            }
        }
        loss /= n as f64;

        let geoms = self.layer_geoms();
        let layers = geoms.len();
        let mut grads = nn::zero_grads(&self.params);
        let h = geoms[layers - 1].height;
        let mut upstream = Bilinear::new(m, (h, h), (s, s)).backward(&dz);
        for l in (0..layers).rev() {
            let g = &geoms[l];
            let (gw, rest) = grads[2 * l..].split_at_mut(1);
            let need_input = l > 0;
            let down = nn::conv_backward(
                g,
                &self.params[2 * l].data,
                &tr.inputs[l],
                &tr.cols[l],
                &upstream,
                &mut gw[0],
                &mut rest[0],
                need_input,
            );
            let Some(mut down) = down else { break };
            // the input of layer l is the tanh output of layer l − 1
            for (d, a) in down.iter_mut().zip(&tr.acts[l - 1]) {
                *d *= 1.0 - a * a;
            }
            upstream = down;
        }
        Ok((loss, grads))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_params(path, &self.params)?;
        io::write_json(&io::sidecar_path(path), &self.shape)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let shape: NetShape = io::read_json(&io::sidecar_path(path))?;
        shape.validate()?;
        let template = Self::new(shape.clone(), 0)?;
        let params = nn::match_params(path, nn::load_params(path)?, &template.params)?;
        Ok(Self { shape, params })
    }
}

/// Per-pixel RMSE between two probability vectors of equal length.
pub fn pixel_rmse(pred: &[f64], target: &[f64]) -> f64 {
    let sq: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    (sq / pred.len() as f64).sqrt()
}

fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax agreement and mean RMSE over every pixel of the evaluated patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    pub acc: f64,
    pub loss: f64,
}

/// Compares two row-major `pixels × M` maps.
pub fn map_metrics(pred: &[f64], target: &[f32], classes: usize) -> (usize, f64) {
    let mut agree = 0;
    let mut loss = 0.0;
    let mut t = vec![0.0; classes];
    for (p, y) in pred.chunks_exact(classes).zip(target.chunks_exact(classes)) {
        for (dst, &v) in t.iter_mut().zip(y) {
            *dst = v as f64;
        }
        if argmax(p) == argmax(y) {
            agree += 1;
        }
        loss += pixel_rmse(p, &t);
    }
    (agree, loss)
}

pub fn metrics(net: &DistillNet, set: &PatchSet) -> Result<DistillMetrics> {
    if set.is_empty() {
        return Err(Error::InvalidInput(format!("patch set {} is empty", set.roi_id)));
    }
    let m = net.shape.classes;
    let parts: Vec<(usize, f64)> = set
        .patches
        .par_iter()
        .map(|p| net.forward(&p.features).map(|pred| map_metrics(&pred.probs, &p.target, m)))
        .collect::<Result<_>>()?;
    let pixels = (set.len() * set.side * set.side) as f64;
    let (agree, loss) = parts.iter().fold((0, 0.0), |(a, l), &(x, y)| (a + x, l + y));
    Ok(DistillMetrics {
        acc: agree as f64 / pixels,
        loss: loss / pixels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub patch_side: usize,
    pub stride: usize,
    /// Encoder widths before the embedding layer.
    pub hidden_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub strides: Vec<usize>,
    pub decoder_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    /// Patches sampled from training slides.
    pub train_patches: usize,
    /// Patches sampled from test slides for held-out metrics.
    pub heldout_patches: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            patch_side: 64,
            stride: 64,
            hidden_channels: vec![16, 16, 16],
            embedding_dim: 64,
            strides: vec![2, 1, 1, 1],
            decoder_hidden: 32,
            epochs: 15,
            batch_size: 4,
            step_size: 1e-2,
            train_patches: 200,
            heldout_patches: 48,
        }
    }
}

impl DistillConfig {
    /// Patch side 224 and embedding width 1024.
    pub fn paper_scale() -> Self {
        Self {
            patch_side: 224,
            stride: 224,
            embedding_dim: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig("stage-2 batch size and step size must be positive".into()));
        }
        if self.train_patches == 0 {
            return Err(Error::InvalidConfig("stage-2 needs at least one training patch".into()));
        }
        if self.patch_side == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig("patch side and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn shape(&self, depth: usize, classes: usize) -> NetShape {
        let mut channels = self.hidden_channels.clone();
        channels.push(self.embedding_dim);
        NetShape {
            depth,
            classes,
            side: self.patch_side,
            channels,
            strides: self.strides.clone(),
            decoder_hidden: self.decoder_hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistorySplit {
    Train,
    Heldout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: HistorySplit,
    pub acc: f64,
    pub loss: f64,
}

/// Trains a freshly initialized network. Epoch 0 in the history holds the
/// metrics of the initialization.
pub fn train(
    train_set: &PatchSet,
    heldout: Option<&PatchSet>,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(DistillNet, Vec<HistoryRow>)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("stage 2 needs at least one training patch".into()));
    }
    if train_set.side != cfg.patch_side {
        return Err(Error::DimensionMismatch(format!(
            "patches are {} pixels wide, configuration says {}",
            train_set.side, cfg.patch_side
        )));
    }
    let mut net = DistillNet::new(cfg.shape(train_set.depth, train_set.classes), seed::derive(seed, &[0]))?;
    let mut opt = Adam::new(cfg.step_size, &net.params);
    let mut history = Vec::new();
    let record = |net: &DistillNet, epoch: usize, history: &mut Vec<HistoryRow>| -> Result<()> {
        let m = metrics(net, train_set)?;
        if !m.loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(HistoryRow {
            epoch,
            split: HistorySplit::Train,
            acc: m.acc,
            loss: m.loss,
        });
        if let Some(h) = heldout {
            let m = metrics(net, h)?;
            history.push(HistoryRow {
                epoch,
                split: HistorySplit::Heldout,
                acc: m.acc,
                loss: m.loss,
            });
        }
        Ok(())
    };
    record(&net, 0, &mut history)?;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut seed::derived_rng(seed, &[1, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<(f64, Vec<Vec<f64>>)> = batch
                .par_iter()
                .map(|&i| {
                    let p = &train_set.patches[i];
                    net.loss_and_grad(&p.features, &p.target)
                })
                .collect::<Result<_>>()?;
            let mut grads = nn::zero_grads(&net.params);
            for (loss, g) in &parts {
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                nn::add_grads(&mut grads, g);
            }
            nn::scale_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.step(&mut net.params, &grads);
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        log::debug!("stage 2 epoch {epoch} done");
        record(&net, epoch, &mut history)?;
    }
    Ok((net, history))
}

pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in history {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::csv(path, e)))
        .collect()
}

/// Embeddings of every patch of one ROI, `K × E` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddingSet {
    pub roi_id: String,
    pub dim: usize,
    pub coords: Vec<(usize, usize)>,
    pub embeddings: Vec<f64>,
}

impl PatchEmbeddingSet {
    pub fn new(roi_id: &str, dim: usize, embeddings: Vec<f64>) -> Result<Self> {
        if dim == 0 || embeddings.is_empty() || !embeddings.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form a non-empty K×{dim} matrix",
                embeddings.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("embeddings of {roi_id} are not finite")));
        }
        Ok(Self {
            roi_id: roi_id.to_string(),
            dim,
            coords: Vec::new(),
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    /// Writes `PLEB` (K, E, `f32` payload); coordinates are not stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let data: Vec<f32> = self.embeddings.iter().map(|&v| v as f32).collect();
        io::write_f32_tensor(path, io::EMBEDDING_MAGIC, None, &[self.len(), self.dim], &data)
    }

    pub fn load(path: &Path, roi_id: &str) -> Result<Self> {
        let (dims, data) = io::read_f32_tensor(path, io::EMBEDDING_MAGIC, None, 2)?;
        Self::new(roi_id, dims[1], data.into_iter().map(f64::from).collect())
    }
}

pub fn embed(net: &DistillNet, set: &PatchSet) -> Result<PatchEmbeddingSet> {
    let rows: Vec<Vec<f64>> = set
        .patches
        .par_iter()
        .map(|p| net.embedding(&p.features))
        .collect::<Result<_>>()?;
    let mut out = PatchEmbeddingSet::new(&set.roi_id, net.shape.embedding_dim(), rows.concat())?;
    out.coords = set.patches.iter().map(|p| p.origin).collect();
    Ok(out)
}
