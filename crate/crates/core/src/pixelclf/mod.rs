//! Stage 1: per-pixel structure recognition.
//!
//! A gradient-boosted tree classifier is trained on the polarization
//! features of sparsely annotated pixels. With confident learning enabled,
//! out-of-sample probabilities from stratified cross-validation feed
//! [`crate::confident::clean`]; suspect annotations are dropped and the
//! final model is retrained with the resulting class weights. The model
//! then predicts a probability map over every pixel of the slide.

mod cv;
mod gbdt;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cv::{cross_val_proba, stratified_folds};
pub use gbdt::{argmax, fit, GbdtConfig, GbdtModel, Node, Tree};

use crate::confident::{self, CleanResult, NoisyDataset};
use crate::data::io;
use crate::data::{PolarSlide, SparseAnnotation};
use crate::error::{Error, Result};

/// Per-pixel class probabilities, `H × W × M` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub probs: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != height * width * classes {
            return Err(Error::DimensionMismatch(format!(
                "probability map {height}x{width}x{classes} needs {} values, got {}",
                height * width * classes,
                probs.len()
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            probs,
        })
    }

    pub fn pixel(&self, p: usize) -> &[f32] {
        &self.probs[p * self.classes..(p + 1) * self.classes]
    }

    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        self.pixel(row * self.width + col)
    }

    /// Argmax class per pixel, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .chunks_exact(self.classes)
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_f32_tensor(
            path,
            io::PROBMAP_MAGIC,
            None,
            &[self.height, self.width, self.classes],
            &self.probs,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (dims, probs) = io::read_f32_tensor(path, io::PROBMAP_MAGIC, None, 3)?;
        Self::new(dims[0], dims[1], dims[2], probs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    /// Normalised total split gain per channel.
    pub gains: Vec<f64>,
    /// Channels by descending gain, ties by index.
    pub ranking: Vec<usize>,
}

/// Total split gain per feature over every tree, normalised to sum to one.
pub fn feature_importance(model: &GbdtModel) -> FeatureImportance {
    let mut gains = vec![0.0; model.features];
    for tree in model.trees.iter().flatten() {
        for node in &tree.nodes {
            if let Node::Split { feature, gain, .. } = node {
                gains[*feature] += gain;
            }
        }
    }
    let total: f64 = gains.iter().sum();
    if total > 0.0 {
        gains.iter_mut().for_each(|g| *g /= total);
    }
    let mut ranking: Vec<usize> = (0..gains.len()).collect();
    ranking.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]).then(a.cmp(&b)));
    FeatureImportance { gains, ranking }
}

/// Writes `channel,name,gain` rows in channel order.
pub fn write_importance_csv(path: &Path, imp: &FeatureImportance, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["channel", "name", "gain"])
        .map_err(|e| Error::csv(path, e))?;
    for (c, g) in imp.gains.iter().enumerate() {
        let name = names.get(c).cloned().unwrap_or_else(|| format!("ch_{c}"));
        w.write_record([c.to_string(), name, g.to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    io::write_bytes(path, &bytes)
}

pub fn save_model(path: &Path, model: &GbdtModel) -> Result<()> {
    io::write_json(path, model)
}

pub fn load_model(path: &Path) -> Result<GbdtModel> {
    io::read_json(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub gbdt: GbdtConfig,
    pub folds: usize,
    pub confidence_learning: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            gbdt: GbdtConfig::default(),
            folds: 5,
            confidence_learning: true,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("stage 1 needs at least 2 folds, got {}", self.folds)));
        }
        self.gbdt.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub map: ProbabilityMap,
    pub model: GbdtModel,
    /// Structure class behind each model output, ascending.
    pub classes_used: Vec<usize>,
    pub clean: Option<CleanResult>,
    /// Annotation entry indices the final model was trained on.
    pub retained: Vec<usize>,
}

/// Trains the stage-1 classifier on `ann` and predicts every pixel.
///
/// Only structure classes with at least two annotated pixels take part;
/// the output map still has `classes` channels, with zero probability for
/// the classes that were left out.
pub fn recognize_structures(
    slide: &PolarSlide,
    ann: &SparseAnnotation,
    classes: usize,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<Stage1Output> {
    let d = slide.depth;
    let mut counts = vec![0usize; classes];
    for e in &ann.entries {
        if e.row >= slide.height || e.col >= slide.width || e.label >= classes {
            return Err(Error::InvalidInput(format!(
                "annotation ({}, {}, {}) outside the slide or class range",
                e.row, e.col, e.label
            )));
        }
        counts[e.label] += 1;
    }
    let classes_used: Vec<usize> = (0..classes).filter(|&c| counts[c] >= 2).collect();
    if classes_used.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "degenerate annotation: {} usable class(es), need at least 2",
            classes_used.len()
        )));
    }
    let mut compact = vec![usize::MAX; classes];
    for (k, &c) in classes_used.iter().enumerate() {
        compact[c] = k;
    }
    let m = classes_used.len();

    let usable: Vec<usize> = (0..ann.len())
        .filter(|&i| compact[ann.entries[i].label] != usize::MAX)
        .collect();
    let x: Vec<f32> = usable
        .iter()
        .flat_map(|&i| {
            let e = ann.entries[i];
            slide.at(e.row, e.col).iter().copied()
        })
        .collect();
    let y: Vec<usize> = usable
        .iter()
        .map(|&i| compact[ann.entries[i].label])
        .collect();

    let (retained_local, weights, clean) = if cfg.confidence_learning {
        let probs = cross_val_proba(&x, d, &y, m, cfg.folds, &cfg.gbdt, seed)?;
        let ds = NoisyDataset::new(probs, y.clone(), m)?;
        let result = confident::clean(&ds)?;
        let keep: Vec<usize> = (0..y.len())
            .filter(|i| !result.pruned_indices.contains(i))
            .collect();
        (keep, result.class_weights.clone(), Some(result))
    } else {
        ((0..y.len()).collect(), vec![1.0; m], None)
    };

    let xr: Vec<f32> = retained_local
        .iter()
        .flat_map(|&i| x[i * d..(i + 1) * d].iter().copied())
        .collect();
    let yr: Vec<usize> = retained_local.iter().map(|&i| y[i]).collect();
    let model = fit(&xr, d, &yr, m, &weights, &cfg.gbdt).map_err(|e| match e {
        Error::EmptyClass { class, .. } => Error::EmptyClass {
            class: classes_used[class],
            context: " after pruning".into(),
        },
        other => other,
    })?;

    let compact_probs = model.predict_proba(&slide.values, d)?;
    let mut probs = vec![0.0f32; slide.pixel_count() * classes];
    for (p, row) in compact_probs.chunks_exact(m).enumerate() {
        for (k, &c) in classes_used.iter().enumerate() {
            probs[p * classes + c] = row[k] as f32;
        }
    }
    let map = ProbabilityMap::new(slide.height, slide.width, classes, probs)?;
    Ok(Stage1Output {
        map,
        model,
        classes_used,
        clean,
        retained: retained_local.iter().map(|&i| usable[i]).collect(),
    })
}

/// Fraction of `pixels` whose argmax class equals the ground-truth label.
pub fn pixel_accuracy(map: &ProbabilityMap, truth: &[u8], pixels: &[usize]) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    let pred = map.argmax();
    pixels
        .iter()
        .filter(|&&p| pred[p] == truth[p] as usize)
        .count() as f64
        / pixels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_slide, sparse_annotate, GeneratorConfig, TumorClass};

    fn small_slide(seed: u64) -> (PolarSlide, crate::data::StructureMap) {
        let cfg = GeneratorConfig {
            height: 96,
            width: 96,
            ..GeneratorConfig::default()
        };
        generate_slide(seed, TumorClass::Malignant, &cfg).unwrap()
    }

    #[test]
    fn probability_map_rows_sum_to_one() {
        let (slide, map) = small_slide(1);
        let ann = sparse_annotate(&map, 0.1, 0.1, 2).unwrap();
        let out = recognize_structures(&slide, &ann, 4, &Stage1Config::default(), 3).unwrap();
        for p in 0..slide.pixel_count() {
            let s: f32 = out.map.pixel(p).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(out.map.pixel(p).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(out.clean.is_some());
    }

    #[test]
    fn single_class_annotation_is_degenerate() {
        let (slide, map) = small_slide(2);
        let mut ann = sparse_annotate(&map, 0.05, 0.0, 1).unwrap();
        ann.entries.iter_mut().for_each(|e| e.label = 0);
        assert!(recognize_structures(&slide, &ann, 4, &Stage1Config::default(), 1).is_err());
    }

    #[test]
    fn absent_classes_get_zero_probability() {
        let (slide, map) = small_slide(3);
        let mut ann = sparse_annotate(&map, 0.1, 0.0, 1).unwrap();
        ann.entries.retain(|e| e.label != 1);
        let cfg = Stage1Config {
            confidence_learning: false,
            ..Stage1Config::default()
        };
        let out = recognize_structures(&slide, &ann, 4, &cfg, 1).unwrap();
        assert_eq!(out.classes_used, vec![0, 2, 3]);
        assert!((0..slide.pixel_count()).all(|p| out.map.pixel(p)[1] == 0.0));
    }

    #[test]
    fn probability_map_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.plpm");
        let map = ProbabilityMap::new(2, 3, 2, (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        map.save(&p).unwrap();
        assert_eq!(ProbabilityMap::load(&p).unwrap(), map);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"PLPM");
        assert_eq!(bytes.len(), 16 + 48);
    }

    #[test]
    fn importance_is_normalised_and_ranked() {
        let (slide, map) = small_slide(4);
        let ann = sparse_annotate(&map, 0.1, 0.0, 1).unwrap();
        let cfg = Stage1Config {
            confidence_learning: false,
            ..Stage1Config::default()
        };
        let out = recognize_structures(&slide, &ann, 4, &cfg, 1).unwrap();
        let imp = feature_importance(&out.model);
        assert!((imp.gains.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(imp.ranking[0], 0);
        for w in imp.ranking.windows(2) {
            assert!(imp.gains[w[0]] >= imp.gains[w[1]]);
        }
    }
}
