//! ROC/AUC metrics and the label-noise sweep.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{io, sparse_annotate, CorpusEntry, SlideCorpus, TumorClass};
use crate::error::{Error, Result};
use crate::pixelclf::{pixel_accuracy, recognize_structures, Stage1Config};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC curve of `scores` against binary `labels`, sweeping the threshold
/// down through the distinct scores. Tied scores move the curve in a single
/// diagonal step, so the trapezoidal area equals the Mann–Whitney statistic.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area, in units of one positive–negative pair
    let mut area2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        points,
        auc: area2 as f64 / (2 * pos * neg) as f64,
    })
}

/// One-vs-rest ROC for class `class` of an `N × C` probability matrix.
pub fn class_roc(probs: &[f64], classes: usize, labels: &[usize], class: usize) -> Result<RocCurve> {
    check_matrix(probs, classes, labels)?;
    let scores: Vec<f64> = probs.chunks_exact(classes).map(|r| r[class]).collect();
    let truth: Vec<bool> = labels.iter().map(|&l| l == class).collect();
    roc(&scores, &truth)
}

fn check_matrix(probs: &[f64], classes: usize, labels: &[usize]) -> Result<()> {
    if classes == 0 || probs.len() != labels.len() * classes {
        return Err(Error::DimensionMismatch(format!(
            "{} probabilities for {} samples of {classes} classes",
            probs.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::InvalidInput("label outside the class range".into()));
    }
    Ok(())
}

/// Pools all `N · C` one-vs-rest decisions into one ROC curve.
pub fn micro_roc(probs: &[f64], classes: usize, labels: &[usize]) -> Result<RocCurve> {
    check_matrix(probs, classes, labels)?;
    let truth: Vec<bool> = labels
        .iter()
        .flat_map(|&l| (0..classes).map(move |c| c == l))
        .collect();
    roc(probs, &truth)
}

pub fn micro_average_auc(probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    Ok(micro_roc(probs, classes, labels)?.auc)
}

pub fn write_roc_csv(path: &Path, curve: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["fpr", "tpr"]).map_err(|e| Error::csv(path, e))?;
    for &(f, t) in &curve.points {
        w.write_record([f.to_string(), t.to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Classification summary for a set of ROIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub micro_auc: f64,
    /// Malignant, benign, borderline.
    pub class_auc: Vec<f64>,
    pub accuracy: f64,
}

pub fn auc_summary(probs: &[f64], labels: &[usize]) -> Result<AucSummary> {
    let k = TumorClass::KNOWN.len();
    let micro_auc = micro_average_auc(probs, k, labels)?;
    let class_auc = (0..k)
        .map(|c| class_roc(probs, k, labels, c).map(|r| r.auc))
        .collect::<Result<_>>()?;
    let correct = probs
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| crate::pixelclf::argmax(row) == l)
        .count();
    Ok(AucSummary {
        micro_auc,
        class_auc,
        accuracy: correct as f64 / labels.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSweepConfig {
    pub levels: Vec<f64>,
    /// Slides taken from the front of the corpus for each tumor class.
    pub slides_per_class: usize,
}

impl Default for NoiseSweepConfig {
    fn default() -> Self {
        Self {
            levels: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            slides_per_class: 2,
        }
    }
}

impl NoiseSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.iter().any(|l| !(0.0..=0.5).contains(l)) {
            return Err(Error::InvalidConfig("noise levels must lie in [0, 0.5]".into()));
        }
        if self.slides_per_class == 0 {
            return Err(Error::InvalidConfig("noise sweep needs at least one slide per class".into()));
        }
        Ok(())
    }
}

/// Mean stage-1 pixel accuracy per noise level: on annotated pixels (train)
/// and on the remaining pixels (test), with and without confident learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub noise_levels: Vec<f64>,
    pub slides: Vec<String>,
    pub train_cl_on: Vec<f64>,
    pub train_cl_off: Vec<f64>,
    pub test_cl_on: Vec<f64>,
    pub test_cl_off: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    noise: f64,
    train_cl_on: f64,
    train_cl_off: f64,
    test_cl_on: f64,
    test_cl_off: f64,
}

impl NoiseSweepReport {
    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path).map_err(|e| Error::csv(csv_path, e))?;
        for (i, &noise) in self.noise_levels.iter().enumerate() {
            w.serialize(SweepRow {
                noise,
                train_cl_on: self.train_cl_on[i],
                train_cl_off: self.train_cl_off[i],
                test_cl_on: self.test_cl_on[i],
                test_cl_off: self.test_cl_off[i],
            })
            .map_err(|e| Error::csv(csv_path, e))?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        io::write_json(json_path, self)
    }
}

fn sweep_slides(corpus: &SlideCorpus, per_class: usize) -> Result<Vec<&CorpusEntry>> {
    let mut picked = Vec::new();
    for class in TumorClass::KNOWN {
        let of_class: Vec<&CorpusEntry> = corpus
            .entries
            .iter()
            .filter(|e| e.slide.tumor_class == class)
            .take(per_class)
            .collect();
        if of_class.len() < per_class {
            return Err(Error::InvalidInput(format!(
                "noise sweep wants {per_class} {class} slides, corpus has {}",
                of_class.len()
            )));
        }
        picked.extend(of_class);
    }
    Ok(picked)
}

/// Re-annotates a fixed subset of corpus slides at every noise level and
/// runs stage 1 with and without cleaning. Each slide keeps the same
/// annotated pixels across levels; only the number of flipped labels
/// changes.
pub fn noise_sweep(
    corpus: &SlideCorpus,
    sweep: &NoiseSweepConfig,
    stage1: &Stage1Config,
    seed: u64,
) -> Result<NoiseSweepReport> {
    sweep.validate()?;
    let slides = sweep_slides(corpus, sweep.slides_per_class)?;
    let mut report = NoiseSweepReport {
        noise_levels: sweep.levels.clone(),
        slides: slides.iter().map(|e| e.slide.slide_id.clone()).collect(),
        train_cl_on: Vec::new(),
        train_cl_off: Vec::new(),
        test_cl_on: Vec::new(),
        test_cl_off: Vec::new(),
    };
    for &level in &sweep.levels {
        // (train on, train off, test on, test off) per slide
        let per_slide: Vec<[f64; 4]> = slides
            .par_iter()
            .enumerate()
            .map(|(i, entry)| {
                let map = &entry.map;
                let ann = sparse_annotate(
                    map,
                    entry.annotation.coverage_fraction,
                    level,
                    seed::derive(seed, &[i as u64]),
                )?;
                let annotated = ann.pixel_indices(map.width);
                let mut mask = vec![false; map.labels.len()];
                for &p in &annotated {
                    mask[p] = true;
                }
                let held: Vec<usize> = (0..mask.len()).filter(|&p| !mask[p]).collect();
                let mut acc = [0.0; 4];
                for (k, cl) in [true, false].into_iter().enumerate() {
                    let cfg = Stage1Config {
                        confidence_learning: cl,
                        ..stage1.clone()
                    };
                    let out = recognize_structures(
                        &entry.slide,
                        &ann,
                        map.classes,
                        &cfg,
                        seed::derive(seed, &[i as u64, 1]),
                    )?;
                    acc[k] = pixel_accuracy(&out.map, &map.labels, &annotated);
                    acc[2 + k] = pixel_accuracy(&out.map, &map.labels, &held);
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let mean = |k: usize| per_slide.iter().map(|a| a[k]).sum::<f64>() / per_slide.len() as f64;
        log::info!(
            "noise {level}: test accuracy {:.4} with cleaning, {:.4} without",
            mean(2),
            mean(3)
        );
        report.train_cl_on.push(mean(0));
        report.train_cl_off.push(mean(1));
        report.test_cl_on.push(mean(2));
        report.test_cl_off.push(mean(3));
    }
    Ok(report)
}

/// Moving average with the given window (output is `window − 1` shorter).
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || series.len() < window {
        return Vec::new();
    }
    series
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Concordant pairs plus half the tied pairs, over all pairs.
    fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn hand_case() {
        let r = roc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
        assert_eq!(r.points, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn trivial_cases() {
        assert_eq!(roc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap().auc, 1.0);
        let tied = roc(&[0.3; 5], &[true, false, true, false, false]).unwrap();
        assert_eq!(tied.auc, 0.5);
        assert_eq!(tied.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(roc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
        assert!(roc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn micro_average_cases() {
        let labels = [0, 1, 2, 1];
        let onehot: Vec<f64> = labels
            .iter()
            .flat_map(|&l| (0..3).map(move |c| if c == l { 1.0 } else { 0.0 }))
            .collect();
        assert_eq!(micro_average_auc(&onehot, 3, &labels).unwrap(), 1.0);
        assert_eq!(micro_average_auc(&[1.0 / 3.0; 12], 3, &labels).unwrap(), 0.5);
        let s = auc_summary(&onehot, &labels).unwrap();
        assert_eq!(s.class_auc, vec![1.0, 1.0, 1.0]);
        assert_eq!(s.accuracy, 1.0);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0, 2.0, 4.0], 2), vec![2.0, 2.5, 3.0]);
        assert!(smooth(&[1.0], 3).is_empty());
    }

    #[test]
    fn roc_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roc.csv");
        let r = roc(&[0.2, 0.7], &[false, true]).unwrap();
        write_roc_csv(&path, &r).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "fpr,tpr\n0,0\n0,1\n1,1\n");
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..=12).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..6).prop_map(|v| v as f64 / 5.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_filter("both labels", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
        })
    }

    proptest! {
        #[test]
        fn matches_pair_counting((scores, labels) in instance()) {
            let r = roc(&scores, &labels).unwrap();
            prop_assert!((r.auc - pair_auc(&scores, &labels)).abs() < 1e-12);
            for w in r.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }

        #[test]
        fn invariant_under_monotone_maps((scores, labels) in instance(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let mapped: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
            prop_assert_eq!(roc(&scores, &labels).unwrap().auc, roc(&mapped, &labels).unwrap().auc);
        }

        #[test]
        fn negated_scores_complement(
            raw in prop::collection::vec(any::<u32>(), 2..=12),
            bits in prop::collection::vec(any::<bool>(), 12),
        ) {
            let mut seen = std::collections::BTreeSet::new();
            let scores: Vec<f64> = raw.iter().filter(|v| seen.insert(**v)).map(|&v| v as f64).collect();
            let labels: Vec<bool> = bits[..scores.len()].to_vec();
            prop_assume!(labels.iter().any(|&x| x) && labels.iter().any(|&x| !x));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = roc(&scores, &labels).unwrap().auc + roc(&neg, &labels).unwrap().auc;
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn micro_matches_pair_counting(
            n in 2usize..=10,
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut rng = seed::rng(seed);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            prop_assume!(labels.iter().collect::<std::collections::BTreeSet<_>>().len() >= 2);
            let probs: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
            let flat: Vec<bool> = labels.iter().flat_map(|&l| (0..3).map(move |c| c == l)).collect();
            let micro = micro_average_auc(&probs, 3, &labels).unwrap();
            prop_assert!((micro - pair_auc(&probs, &flat)).abs() < 1e-12);
        }
    }
}
