//! Stage 3: ROI classification from patch embeddings.
//!
//! Gated attention scores every patch of an ROI,
//!
//! ```text
//! a_k = softmax_k( w · (tanh(V e_k) ⊙ sigm(U e_k)) )
//! ```
//!
//! the ROI embedding is the attention-weighted sum `Σ a_k e_k`, and three
//! one-vs-rest sigmoid heads score it. The predicted class is the argmax of
//! the softmax over the three head scores. Training minimizes the sum of the
//! three binary cross-entropies with Adam.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{io, TumorClass};
use crate::distill::PatchEmbeddingSet;
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{self, sigmoid, Adam, Tensor};
use crate::seed;

pub const HEADS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from the supplied seed.
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `L × E`, tanh branch.
    pub v: Tensor,
    /// `L × E`, sigmoid gate.
    pub u: Tensor,
    /// Length `L`.
    pub w: Tensor,
    pub dropout: f64,
}

impl AttentionParams {
    pub fn new(latent: usize, dim: usize, dropout: f64, seed: u64) -> Result<Self> {
        if latent == 0 || dim == 0 {
            return Err(Error::InvalidConfig("attention sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidConfig(format!("dropout {dropout} outside [0, 1)")));
        }
        let mut rng = seed::rng(seed);
        Ok(Self {
            v: Tensor::uniform("attention.v", &[latent, dim], dim, &mut rng),
            u: Tensor::uniform("attention.u", &[latent, dim], dim, &mut rng),
            w: Tensor::uniform("attention.w", &[latent], latent, &mut rng),
            dropout,
        })
    }

    pub fn latent(&self) -> usize {
        self.v.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.v.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `3 × E`, one row per tumor class.
    pub w: Tensor,
    pub b: Tensor,
}

impl HeadParams {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        Self {
            w: Tensor::uniform("heads.w", &[HEADS, dim], dim, &mut rng),
            b: Tensor::zeros("heads.b", &[HEADS]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub attention: AttentionParams,
    pub heads: HeadParams,
}

impl MilModel {
    pub fn new(dim: usize, cfg: &MilConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::new(cfg.latent, dim, cfg.dropout, seed::derive(seed, &[0]))?,
            heads: HeadParams::new(dim, seed::derive(seed, &[1])),
        })
    }

    pub fn dim(&self) -> usize {
        self.attention.dim()
    }

    /// Trainable tensors in gradient order.
    pub fn tensors(&self) -> Vec<Tensor> {
        vec![
            self.attention.v.clone(),
            self.attention.u.clone(),
            self.attention.w.clone(),
            self.heads.w.clone(),
            self.heads.b.clone(),
        ]
    }

    pub fn set_tensors(&mut self, mut t: Vec<Tensor>) {
        self.heads.b = t.pop().unwrap();
        self.heads.w = t.pop().unwrap();
        self.attention.w = t.pop().unwrap();
        self.attention.u = t.pop().unwrap();
        self.attention.v = t.pop().unwrap();
    }

    /// `PLNN` parameters plus a sidecar holding the dropout rate.
    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_params(path, &self.tensors())?;
        io::write_json(
            &io::sidecar_path(path),
            &ModelMeta {
                dropout: self.attention.dropout,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: ModelMeta = io::read_json(&io::sidecar_path(path))?;
        let loaded = nn::load_params(path)?;
        let v = loaded
            .first()
            .filter(|t| t.shape.len() == 2)
            .ok_or_else(|| Error::DimensionMismatch(format!("{}: missing attention.v", path.display())))?;
        let cfg = MilConfig {
            latent: v.shape[0],
            dropout: meta.dropout,
            ..MilConfig::default()
        };
        let mut model = Self::new(v.shape[1], &cfg, 0)?;
        let matched = nn::match_params(path, loaded, &model.tensors())?;
        model.set_tensors(matched);
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    dropout: f64,
}

fn check_bag(dim: usize, emb: &PatchEmbeddingSet) -> Result<()> {
    if emb.dim != dim {
        return Err(Error::DimensionMismatch(format!(
            "ROI {} has {}-dimensional embeddings, model expects {dim}",
            emb.roi_id, emb.dim
        )));
    }
    if emb.is_empty() {
        return Err(Error::InvalidInput(format!("ROI {} has no patches", emb.roi_id)));
    }
    Ok(())
}

/// Inverted-dropout masks for both branches, `K × L` each (all ones in
/// inference mode).
fn dropout_masks(k: usize, latent: usize, p: f64, mode: Mode, seed: u64) -> (Vec<f64>, Vec<f64>) {
    if mode == Mode::Infer || p == 0.0 {
        return (vec![1.0; k * latent], vec![1.0; k * latent]);
    }
    let mut rng = seed::rng(seed);
    let keep = 1.0 / (1.0 - p);
    let mut draw = || -> Vec<f64> {
        (0..k * latent)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect()
    };
    let a = draw();
    let b = draw();
    (a, b)
}

/// Intermediate values of the attention branch for one bag.
struct AttentionTrace {
    tanh: Vec<f64>,
    gate: Vec<f64>,
    mask_t: Vec<f64>,
    mask_g: Vec<f64>,
    weights: Vec<f64>,
}

fn attention_trace(p: &AttentionParams, emb: &PatchEmbeddingSet, mode: Mode, seed: u64) -> AttentionTrace {
    let (k, l, e) = (emb.len(), p.latent(), p.dim());
    // Row-by-row dot products (rather than a blocked matrix product) keep
    // every patch's logit independent of its position in the bag.
    let project = |m: &Tensor| -> Vec<f64> {
        let mut out = Vec::with_capacity(k * l);
        for i in 0..k {
            let x = emb.row(i);
            out.extend(m.data.chunks_exact(e).map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()));
        }
        out
    };
    let hv = project(&p.v);
    let hu = project(&p.u);
    let tanh: Vec<f64> = hv.iter().map(|x| x.tanh()).collect();
    let gate: Vec<f64> = hu.iter().map(|&x| sigmoid(x)).collect();
    let (mask_t, mask_g) = dropout_masks(k, l, p.dropout, mode, seed);
    let logits: Vec<f64> = (0..k)
        .map(|i| {
            (0..l)
                .map(|j| {
                    let idx = i * l + j;
                    p.w.data[j] * tanh[idx] * mask_t[idx] * gate[idx] * mask_g[idx]
                })
                .sum()
        })
        .collect();
    AttentionTrace {
        tanh,
        gate,
        mask_t,
        mask_g,
        weights: softmax_unordered(&logits),
    }
}

/// Sum whose result does not depend on the order of `values`.
fn unordered_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Softmax that is exactly equivariant under permutations of its input.
fn softmax_unordered(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total = unordered_sum(&exps);
    exps.iter().map(|x| x / total).collect()
}

/// Attention weight of every patch; dropout only in [`Mode::Train`].
pub fn attention_weights(p: &AttentionParams, emb: &PatchEmbeddingSet, mode: Mode, seed: u64) -> Result<Vec<f64>> {
    check_bag(p.dim(), emb)?;
    Ok(attention_trace(p, emb, mode, seed).weights)
}

/// `Σ_k a_k e_k`.
pub fn aggregate(weights: &[f64], emb: &PatchEmbeddingSet) -> Result<Vec<f64>> {
    if weights.len() != emb.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} patches",
            weights.len(),
            emb.len()
        )));
    }
    // canonical patch order, so that the sum is invariant to permutations
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        weights[i].total_cmp(&weights[j]).then_with(|| {
            emb.row(i)
                .iter()
                .zip(emb.row(j))
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut out = vec![0.0; emb.dim];
    for &k in &order {
        for (o, &v) in out.iter_mut().zip(emb.row(k)) {
            *o += weights[k] * v;
        }
    }
    Ok(out)
}

fn head_logits(h: &HeadParams, roi: &[f64]) -> [f64; HEADS] {
    let e = roi.len();
    let mut z = [0.0; HEADS];
    for (c, zc) in z.iter_mut().enumerate() {
        *zc = h.b.data[c] + h.w.data[c * e..(c + 1) * e].iter().zip(roi).map(|(a, b)| a * b).sum::<f64>();
    }
    z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiPrediction {
    pub attention: Vec<f64>,
    pub roi_embedding: Vec<f64>,
    pub head_scores: [f64; HEADS],
    pub class_probs: [f64; HEADS],
    pub predicted_class: TumorClass,
}

pub fn predict(model: &MilModel, emb: &PatchEmbeddingSet) -> Result<RoiPrediction> {
    let attention = attention_weights(&model.attention, emb, Mode::Infer, 0)?;
    let roi_embedding = aggregate(&attention, emb)?;
    let z = head_logits(&model.heads, &roi_embedding);
    let head_scores = z.map(sigmoid);
    let sm = nn::softmax(&head_scores);
    let class_probs = [sm[0], sm[1], sm[2]];
    let predicted_class = TumorClass::KNOWN[crate::pixelclf::argmax(&class_probs)];
    Ok(RoiPrediction {
        attention,
        roi_embedding,
        head_scores,
        class_probs,
        predicted_class,
    })
}

/// Gradients in the order `attention.v`, `attention.u`, `attention.w`,
/// `heads.w`, `heads.b`.
pub type MilGrads = [Vec<f64>; 5];

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Summed one-vs-rest binary cross-entropy for one bag and its gradient.
pub fn loss_and_grad(
    model: &MilModel,
    emb: &PatchEmbeddingSet,
    class: usize,
    mode: Mode,
    seed: u64,
) -> Result<(f64, MilGrads)> {
    check_bag(model.dim(), emb)?;
    if class >= HEADS {
        return Err(Error::InvalidInput(format!("class index {class} out of range")));
    }
    let (p, h) = (&model.attention, &model.heads);
    let (k, l, e) = (emb.len(), p.latent(), p.dim());
    let tr = attention_trace(p, emb, mode, seed);
    let roi = aggregate(&tr.weights, emb)?;
    let z = head_logits(h, &roi);

    let mut loss = 0.0;
    let mut dz = [0.0; HEADS];
    for c in 0..HEADS {
        let y = if c == class { 1.0 } else { 0.0 };
        loss += softplus(z[c]) - y * z[c];
        dz[c] = sigmoid(z[c]) - y;
    }

    let mut g_hw = vec![0.0; HEADS * e];
    let mut d_roi = vec![0.0; e];
    for c in 0..HEADS {
        for j in 0..e {
            g_hw[c * e + j] = dz[c] * roi[j];
            d_roi[j] += dz[c] * h.w.data[c * e + j];
        }
    }
    let da: Vec<f64> = (0..k)
        .map(|i| emb.row(i).iter().zip(&d_roi).map(|(a, b)| a * b).sum())
        .collect();
    let dot: f64 = tr.weights.iter().zip(&da).map(|(a, b)| a * b).sum();
    let ds: Vec<f64> = tr.weights.iter().zip(&da).map(|(a, d)| a * (d - dot)).collect();

    let mut g_w = vec![0.0; l];
    let mut dhv = vec![0.0; k * l];
    let mut dhu = vec![0.0; k * l];
    for i in 0..k {
        for j in 0..l {
            let idx = i * l + j;
            let t = tr.tanh[idx] * tr.mask_t[idx];
            let g = tr.gate[idx] * tr.mask_g[idx];
            g_w[j] += ds[i] * t * g;
            let dg = ds[i] * p.w.data[j];
            dhv[idx] = dg * g * tr.mask_t[idx] * (1.0 - tr.tanh[idx] * tr.tanh[idx]);
            dhu[idx] = dg * t * tr.mask_g[idx] * tr.gate[idx] * (1.0 - tr.gate[idx]);
        }
    }
    // (L × K) · (K × E)
    let mut g_v = vec![0.0; l * e];
    let mut g_u = vec![0.0; l * e];
    nn::gemm(l, k, e, &dhv, (1, l), &emb.embeddings, (e, 1), 0.0, &mut g_v);
    nn::gemm(l, k, e, &dhu, (1, l), &emb.embeddings, (e, 1), 0.0, &mut g_u);
    Ok((loss, [g_v, g_u, g_w, g_hw, dz.to_vec()]))
}

/// One labelled ROI.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub embeddings: PatchEmbeddingSet,
    pub class: TumorClass,
}

impl Bag {
    fn label(&self) -> Result<usize> {
        self.class.index().ok_or_else(|| {
            Error::InvalidInput(format!("ROI {} has no known tumor class", self.embeddings.roi_id))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilConfig {
    pub latent: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            latent: 256,
            dropout: 0.25,
            epochs: 30,
            batch_size: 1,
            step_size: 1e-3,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("stage-3 latent size and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig("stage-3 step size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MilEpoch {
    pub epoch: usize,
    /// Mean training loss over the epoch's dropout-perturbed passes.
    pub loss: f64,
    pub train_auc: f64,
    /// Absent when no validation bags were given or they hold one class.
    pub val_auc: Option<f64>,
}

/// Class probabilities (`N × 3`) and labels for a set of bags.
pub fn score_bags(model: &MilModel, bags: &[Bag]) -> Result<(Vec<f64>, Vec<usize>)> {
    let preds: Vec<RoiPrediction> = bags
        .par_iter()
        .map(|b| predict(model, &b.embeddings))
        .collect::<Result<_>>()?;
    let labels = bags.iter().map(Bag::label).collect::<Result<_>>()?;
    Ok((preds.iter().flat_map(|p| p.class_probs).collect(), labels))
}

fn bag_auc(model: &MilModel, bags: &[Bag]) -> Result<Option<f64>> {
    if bags.is_empty() {
        return Ok(None);
    }
    let (probs, labels) = score_bags(model, bags)?;
    match eval::micro_average_auc(&probs, HEADS, &labels) {
        Ok(a) => Ok(Some(a)),
        Err(Error::SingleClass) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn train(train_bags: &[Bag], val_bags: &[Bag], cfg: &MilConfig, seed: u64) -> Result<(MilModel, Vec<MilEpoch>)> {
    cfg.validate()?;
    let mut seen = [false; HEADS];
    for b in train_bags {
        seen[b.label()?] = true;
    }
    if let Some(c) = seen.iter().position(|&s| !s) {
        return Err(Error::EmptyClass {
            class: c,
            context: " among stage-3 training ROIs".into(),
        });
    }
    let dim = train_bags[0].embeddings.dim;
    let mut model = MilModel::new(dim, cfg, seed::derive(seed, &[0]))?;
    let mut params = model.tensors();
    let mut opt = Adam::new(cfg.step_size, &params);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut seed::derived_rng(seed, &[1, epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<(f64, MilGrads)> = batch
                .par_iter()
                .map(|&i| {
                    let b = &train_bags[i];
                    let mask_seed = seed::derive(seed, &[2, epoch as u64, i as u64]);
                    loss_and_grad(&model, &b.embeddings, b.label()?, Mode::Train, mask_seed)
                })
                .collect::<Result<_>>()?;
            let mut grads = nn::zero_grads(&params);
            for (loss, g) in &parts {
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                total += loss;
                nn::add_grads(&mut grads, g);
            }
            nn::scale_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.step(&mut params, &grads);
            model.set_tensors(params.clone());
        }
        let train_auc = bag_auc(&model, train_bags)?.unwrap_or(f64::NAN);
        let val_auc = bag_auc(&model, val_bags)?;
        history.push(MilEpoch {
            epoch,
            loss: total / train_bags.len() as f64,
            train_auc,
            val_auc,
        });
    }
    Ok((model, history))
}

pub fn write_history_csv(path: &Path, history: &[MilEpoch]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["epoch", "loss", "train_auc", "val_auc"])
        .map_err(|e| Error::csv(path, e))?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.loss.to_string(),
            h.train_auc.to_string(),
            h.val_auc.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiEmbeddingRow {
    pub roi_id: String,
    pub true_class: TumorClass,
    pub pred_class: TumorClass,
    pub embedding: Vec<f64>,
}

pub fn export_roi_embeddings(model: &MilModel, bags: &[Bag]) -> Result<Vec<RoiEmbeddingRow>> {
    bags.iter()
        .map(|b| {
            let p = predict(model, &b.embeddings)?;
            Ok(RoiEmbeddingRow {
                roi_id: b.embeddings.roi_id.clone(),
                true_class: b.class,
                pred_class: p.predicted_class,
                embedding: p.roi_embedding,
            })
        })
        .collect()
}

pub fn write_roi_embeddings_csv(path: &Path, rows: &[RoiEmbeddingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let dim = rows.first().map_or(0, |r| r.embedding.len());
    let mut header = vec!["roi_id".to_string(), "true_class".into(), "pred_class".into()];
    header.extend((0..dim).map(|j| format!("e_{j}")));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        let mut rec = vec![r.roi_id.clone(), r.true_class.to_string(), r.pred_class.to_string()];
        rec.extend(r.embedding.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_bag(k: usize, e: usize, seed: u64) -> PatchEmbeddingSet {
        let mut rng = seed::rng(seed);
        PatchEmbeddingSet::new("roi", e, (0..k * e).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_model(e: usize, latent: usize, seed: u64) -> MilModel {
        let cfg = MilConfig {
            latent,
            ..MilConfig::default()
        };
        let mut m = MilModel::new(e, &cfg, seed).unwrap();
        let mut rng = seed::rng(seed ^ 0xabc);
        m.heads.b.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        m
    }

    #[test]
    fn hand_attention_example() {
        // latent width 1: tanh branch reads e_0, gate branch reads e_1
        let p = AttentionParams {
            v: Tensor {
                name: "attention.v".into(),
                shape: vec![1, 2],
                data: vec![1.0, 0.0],
            },
            u: Tensor {
                name: "attention.u".into(),
                shape: vec![1, 2],
                data: vec![0.0, 1.0],
            },
            w: Tensor {
                name: "attention.w".into(),
                shape: vec![1],
                data: vec![1.0],
            },
            dropout: 0.25,
        };
        let emb = PatchEmbeddingSet::new("r", 2, vec![10.0, 10.0, 10.0, -10.0]).unwrap();
        let a = attention_weights(&p, &emb, Mode::Infer, 0).unwrap();
        let l1 = 10f64.tanh() * sigmoid(10.0);
        let l2 = 10f64.tanh() * sigmoid(-10.0);
        assert!((l1 - 0.99995).abs() < 1e-5 && (l2 - 0.0000454).abs() < 1e-7);
        let e1 = 1.0 / (1.0 + (l2 - l1).exp());
        assert!((a[0] - e1).abs() < 1e-15);
        assert!((a[0] - 0.7311).abs() < 1e-4 && (a[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn aggregate_hand_example() {
        let emb = PatchEmbeddingSet::new("r", 2, vec![0.0, 4.0, 4.0, 0.0]).unwrap();
        assert_eq!(aggregate(&[0.25, 0.75], &emb).unwrap(), vec![3.0, 1.0]);
        assert_eq!(aggregate(&[0.0, 1.0], &emb).unwrap(), vec![4.0, 0.0]);
        assert_eq!(aggregate(&[0.5, 0.5], &emb).unwrap(), vec![2.0, 2.0]);
        assert!(aggregate(&[1.0], &emb).is_err());
    }

    #[test]
    fn zero_heads_give_uniform_probabilities() {
        let mut m = small_model(4, 8, 1);
        m.heads.w.data.fill(0.0);
        m.heads.b.data.fill(0.0);
        let p = predict(&m, &random_bag(5, 4, 2)).unwrap();
        assert_eq!(p.head_scores, [0.5; 3]);
        assert!(p.class_probs.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(p.predicted_class, TumorClass::Malignant);
    }

    #[test]
    fn singleton_and_identical_bags() {
        let m = small_model(4, 8, 3);
        let one = random_bag(1, 4, 4);
        assert_eq!(attention_weights(&m.attention, &one, Mode::Train, 9).unwrap(), vec![1.0]);
        let row = random_bag(1, 4, 5).embeddings;
        let same = PatchEmbeddingSet::new("r", 4, row.repeat(6)).unwrap();
        let a = attention_weights(&m.attention, &same, Mode::Infer, 0).unwrap();
        assert!(a.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert!(attention_weights(&m.attention, &random_bag(2, 3, 1), Mode::Infer, 0).is_err());
    }

    #[test]
    fn dropout_is_seeded_and_train_only() {
        let m = small_model(4, 16, 6);
        let bag = random_bag(5, 4, 7);
        let a = attention_weights(&m.attention, &bag, Mode::Train, 1).unwrap();
        assert_eq!(a, attention_weights(&m.attention, &bag, Mode::Train, 1).unwrap());
        assert_ne!(a, attention_weights(&m.attention, &bag, Mode::Train, 2).unwrap());
        let i = attention_weights(&m.attention, &bag, Mode::Infer, 1).unwrap();
        assert_eq!(i, attention_weights(&m.attention, &bag, Mode::Infer, 2).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-3;
        for point in 0..10u64 {
            let mut m = small_model(5, 6, 10 + point);
            let bag = random_bag(4, 5, 20 + point);
            let class = (point % 3) as usize;
            let (_, grads) = loss_and_grad(&m, &bag, class, Mode::Infer, 0).unwrap();
            let mut tensors = m.tensors();
            for t in 0..tensors.len() {
                let mut fd = vec![0.0; tensors[t].len()];
                for i in 0..fd.len() {
                    let orig = tensors[t].data[i];
                    tensors[t].data[i] = orig + h;
                    m.set_tensors(tensors.clone());
                    let up = loss_and_grad(&m, &bag, class, Mode::Infer, 0).unwrap().0;
                    tensors[t].data[i] = orig - h;
                    m.set_tensors(tensors.clone());
                    let down = loss_and_grad(&m, &bag, class, Mode::Infer, 0).unwrap().0;
                    tensors[t].data[i] = orig;
                    m.set_tensors(tensors.clone());
                    fd[i] = (up - down) / (2.0 * h);
                }
                let err = nn::relative_error(&grads[t], &fd);
                assert!(err < 1e-4, "{} at point {point}: {err}", tensors[t].name);
            }
        }
    }

    #[test]
    fn gradients_with_fixed_dropout_masks() {
        let m = small_model(3, 5, 40);
        let bag = random_bag(3, 3, 41);
        let (_, grads) = loss_and_grad(&m, &bag, 1, Mode::Train, 77).unwrap();
        let h = 1e-5;
        let mut t = m.tensors();
        let mut fd = vec![0.0; t[0].len()];
        for i in 0..fd.len() {
            let orig = t[0].data[i];
            let mut eval_at = |d: f64| {
                t[0].data[i] = orig + d;
                let mut mm = m.clone();
                mm.set_tensors(t.clone());
                loss_and_grad(&mm, &bag, 1, Mode::Train, 77).unwrap().0
            };
            fd[i] = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            t[0].data[i] = orig;
        }
        assert!(nn::relative_error(&grads[0], &fd) < 1e-6);
    }

    fn clustered_bags(per_class: usize, seed: u64) -> Vec<Bag> {
        let mut rng = seed::rng(seed);
        let mut bags = Vec::new();
        for (c, class) in TumorClass::KNOWN.iter().enumerate() {
            for i in 0..per_class {
                let mut data = Vec::new();
                for _ in 0..6 {
                    for j in 0..4 {
                        let centre = if j == c { 1.0 } else { 0.0 };
                        data.push(centre + rng.random_range(-0.4..0.4));
                    }
                }
                bags.push(Bag {
                    embeddings: PatchEmbeddingSet::new(&format!("{class}_{i}"), 4, data).unwrap(),
                    class: *class,
                });
            }
        }
        bags
    }

    #[test]
    fn training_separates_clustered_bags() {
        let train_bags = clustered_bags(6, 1);
        let val = clustered_bags(3, 2);
        let cfg = MilConfig {
            latent: 16,
            epochs: 40,
            step_size: 1e-2,
            ..MilConfig::default()
        };
        let (model, history) = train(&train_bags, &val, &cfg, 3).unwrap();
        assert_eq!(history.len(), 40);
        assert!(history.last().unwrap().val_auc.unwrap() > 0.95);
        let (again, h2) = train(&train_bags, &val, &cfg, 3).unwrap();
        assert_eq!(again, model);
        assert_eq!(h2, history);

        let rows = export_roi_embeddings(&model, &val).unwrap();
        assert_eq!(rows.len(), val.len());
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for (i, a) in rows.iter().enumerate() {
            for b in &rows[i + 1..] {
                let c = cos(&a.embedding, &b.embedding);
                if a.true_class == b.true_class {
                    intra += c;
                    ni += 1;
                } else {
                    inter += c;
                    nx += 1;
                }
            }
        }
        assert!(intra / ni as f64 > inter / nx as f64);
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let bags = clustered_bags(1, 5);
        let cfg = MilConfig {
            latent: 8,
            epochs: 0,
            ..MilConfig::default()
        };
        let (model, history) = train(&bags, &[], &cfg, 4).unwrap();
        assert!(history.is_empty());
        assert_eq!(model, MilModel::new(4, &cfg, seed::derive(4, &[0])).unwrap());
        assert!(matches!(train(&bags[..2], &[], &cfg, 4), Err(Error::EmptyClass { class: 2, .. })));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_model(4, 8, 8);
        let path = dir.path().join("mil.plnn");
        m.save(&path).unwrap();
        let back = MilModel::load(&path).unwrap();
        assert_eq!(back.attention.dropout, 0.25);
        for (a, b) in back.tensors().iter().zip(m.tensors()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| *x == *y as f32 as f64));
        }
        let rows = export_roi_embeddings(&m, &clustered_bags(1, 9)).unwrap();
        let csv_path = dir.path().join("roi.csv");
        write_roi_embeddings_csv(&csv_path, &rows).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("roi_id,true_class,pred_class,e_0,e_1,e_2,e_3\nmalignant_0,malignant,"));
        assert_eq!(text.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn attention_invariants(seed in any::<u64>(), k in 1usize..8, shift in -5.0f64..5.0) {
            let m = small_model(3, 4, seed);
            let bag = random_bag(k, 3, seed.wrapping_add(1));
            let a = attention_weights(&m.attention, &bag, Mode::Infer, 0).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(a.iter().all(|&v| v >= 0.0));

            let tr = attention_trace(&m.attention, &bag, Mode::Infer, 0);
            let logits: Vec<f64> = a.iter().map(|v| v.ln()).collect();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            for (x, y) in nn::softmax(&shifted).iter().zip(&tr.weights) {
                prop_assert!((x - y).abs() < 1e-9);
            }

            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut seed::rng(seed));
            let rows: Vec<f64> = perm.iter().flat_map(|&i| bag.row(i).to_vec()).collect();
            let permuted = PatchEmbeddingSet::new("roi", 3, rows).unwrap();
            let p0 = predict(&m, &bag).unwrap();
            let p1 = predict(&m, &permuted).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(p1.attention[j], p0.attention[i]);
            }
            prop_assert_eq!(&p1.roi_embedding, &p0.roi_embedding);
            prop_assert_eq!(p1.class_probs, p0.class_probs);
            let best = p0.head_scores.iter().enumerate().fold(0, |b, (i, &v)| if v > p0.head_scores[b] { i } else { b });
            prop_assert_eq!(p0.predicted_class, TumorClass::KNOWN[best]);
        }
    }
}
