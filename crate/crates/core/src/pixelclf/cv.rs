use rand::seq::SliceRandom;

use super::gbdt::{fit, GbdtConfig};
use crate::error::{Error, Result};
use crate::seed;

/// Stratified fold index per sample. Each class is shuffled and dealt
/// round-robin, continuing the deal where the previous class stopped.
pub fn stratified_folds(labels: &[usize], classes: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 folds, got {folds}")));
    }
    if folds > labels.len() {
        return Err(Error::InvalidInput(format!(
            "{folds} folds for {} samples",
            labels.len()
        )));
    }
    let mut assignment = vec![0; labels.len()];
    let mut offset = 0;
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(Error::TooSmallToStratify {
                class,
                count: members.len(),
                folds,
            });
        }
        members.shuffle(&mut seed::derived_rng(seed, &[class as u64]));
        for (r, &i) in members.iter().enumerate() {
            assignment[i] = (offset + r) % folds;
        }
        offset += members.len();
    }
    Ok(assignment)
}

/// Out-of-sample class probabilities: row `i` comes from the model trained
/// on every fold except the one holding `i`.
pub fn cross_val_proba(
    features: &[f32],
    width: usize,
    labels: &[usize],
    classes: usize,
    folds: usize,
    cfg: &GbdtConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = labels.len();
    if features.len() != n * width {
        return Err(Error::DimensionMismatch(format!(
            "{} feature values for {n} samples of width {width}",
            features.len()
        )));
    }
    let assignment = stratified_folds(labels, classes, folds, seed)?;
    let mut out = vec![0.0; n * classes];
    for fold in 0..folds {
        let (train, held): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| assignment[i] != fold);
        if held.is_empty() {
            continue;
        }
        let gather = |idx: &[usize]| -> Vec<f32> {
            idx.iter()
                .flat_map(|&i| features[i * width..(i + 1) * width].iter().copied())
                .collect()
        };
        let train_y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let model = fit(&gather(&train), width, &train_y, classes, &vec![1.0; classes], cfg)?;
        let probs = model.predict_proba(&gather(&held), width)?;
        for (row, &i) in probs.chunks_exact(classes).zip(&held) {
            out[i * classes..(i + 1) * classes].copy_from_slice(row);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_hold_equal_class_shares() {
        let labels: Vec<usize> = [0; 6].into_iter().chain([1; 6]).collect();
        let folds = stratified_folds(&labels, 2, 3, 9).unwrap();
        for f in 0..3 {
            for c in 0..2 {
                let count = (0..12).filter(|&i| folds[i] == f && labels[i] == c).count();
                assert_eq!(count, 2);
            }
        }
    }

    #[test]
    fn singleton_class_cannot_be_stratified() {
        let err = stratified_folds(&[0, 0, 0, 1], 2, 2, 1).unwrap_err();
        assert!(matches!(err, Error::TooSmallToStratify { class: 1, .. }));
    }

    #[test]
    fn leave_one_out_rows_come_from_models_without_that_sample() {
        let x: Vec<f32> = vec![0.0, 0.3, 0.5, 2.0, 2.2, 2.9];
        let y = vec![0, 0, 0, 1, 1, 1];
        let cfg = GbdtConfig {
            rounds: 5,
            min_child_weight: 0.0,
            ..GbdtConfig::default()
        };
        let cv = cross_val_proba(&x, 1, &y, 2, 6, &cfg, 3).unwrap();
        for i in 0..6 {
            let keep: Vec<usize> = (0..6).filter(|&j| j != i).collect();
            let xs: Vec<f32> = keep.iter().map(|&j| x[j]).collect();
            let ys: Vec<usize> = keep.iter().map(|&j| y[j]).collect();
            let model = fit(&xs, 1, &ys, 2, &[1.0, 1.0], &cfg).unwrap();
            let p = model.predict_proba(&x[i..i + 1], 1).unwrap();
            assert_eq!(&cv[i * 2..i * 2 + 2], p.as_slice(), "row {i}");
        }
    }

    #[test]
    fn separable_blobs_are_confident_out_of_sample() {
        let (x, y) = super::super::gbdt::tests_support::blobs(60, &[[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]], 0.6, 12);
        let cv = cross_val_proba(&x, 2, &y, 3, 5, &GbdtConfig::default(), 1).unwrap();
        let mean_max = cv
            .chunks_exact(3)
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .sum::<f64>()
            / y.len() as f64;
        assert!(mean_max >= 0.8, "mean max probability {mean_max}");
    }

    #[test]
    fn cross_validation_is_deterministic() {
        let (x, y) = super::super::gbdt::tests_support::blobs(20, &[[0.0, 0.0], [1.0, 1.0]], 0.8, 2);
        let a = cross_val_proba(&x, 2, &y, 2, 4, &GbdtConfig::default(), 5).unwrap();
        let b = cross_val_proba(&x, 2, &y, 2, 4, &GbdtConfig::default(), 5).unwrap();
        assert_eq!(a, b);
    }
}
