use rand::seq::index;
use rand::Rng;

use super::types::{AnnotationEntry, SparseAnnotation, StructureMap};
use crate::error::{Error, Result};
use crate::seed;

/// Simulates sparse noisy annotation of a structure map.
///
/// Selects `⌊coverage · H · W⌋` pixels uniformly without replacement, then
/// resamples the labels of `⌊noise · count⌋` of them uniformly from the
/// other `M − 1` classes. Entries are ordered by pixel index.
pub fn sparse_annotate(
    map: &StructureMap,
    coverage: f64,
    noise: f64,
    seed: u64,
) -> Result<SparseAnnotation> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "coverage must lie in (0, 1], got {coverage}"
        )));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::InvalidInput(format!(
            "noise must lie in [0, 1], got {noise}"
        )));
    }
    if noise > 0.0 && map.classes < 2 {
        return Err(Error::InvalidInput(
            "label noise needs at least two classes".into(),
        ));
    }
    let total = map.height * map.width;
    let count = ((coverage * total as f64) + 1e-9).floor() as usize;
    let flips = ((noise * count as f64) + 1e-9).floor() as usize;

    let mut rng = seed::rng(seed);
    let mut pixels = index::sample(&mut rng, total, count).into_vec();
    pixels.sort_unstable();
    let mut entries: Vec<AnnotationEntry> = pixels
        .iter()
        .map(|&p| AnnotationEntry {
            row: p / map.width,
            col: p % map.width,
            label: map.labels[p] as usize,
        })
        .collect();
    let mut flipped = index::sample(&mut rng, count, flips).into_vec();
    flipped.sort_unstable();
    for i in flipped {
        let truth = entries[i].label;
        // uniform over the other classes: draw from M-1 slots and skip truth
        let mut l = rng.random_range(0..map.classes - 1);
        if l >= truth {
            l += 1;
        }
        entries[i].label = l;
    }
    Ok(SparseAnnotation {
        entries,
        coverage_fraction: coverage,
        noise_fraction: noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn map(h: usize, w: usize) -> StructureMap {
        let labels = (0..h * w).map(|p| (p % 4) as u8).collect();
        StructureMap::new(h, w, 4, labels).unwrap()
    }

    #[test]
    fn noise_free_annotation_matches_map() {
        let m = map(40, 30);
        let ann = sparse_annotate(&m, 0.2, 0.0, 3).unwrap();
        assert_eq!(ann.len(), 240);
        assert!(ann.entries.iter().all(|e| e.label == m.get(e.row, e.col)));
    }

    #[test]
    fn full_coverage_full_noise_flips_everything() {
        let m = map(12, 9);
        let ann = sparse_annotate(&m, 1.0, 1.0, 5).unwrap();
        assert_eq!(ann.len(), 108);
        assert!(ann.entries.iter().all(|e| e.label != m.get(e.row, e.col)));
    }

    #[test]
    fn flip_count_uses_floor_arithmetic() {
        let m = map(100, 100);
        let ann = sparse_annotate(&m, 0.1, 0.3, 9).unwrap();
        assert_eq!(ann.len(), 1000);
        let flipped = ann
            .entries
            .iter()
            .filter(|e| e.label != m.get(e.row, e.col))
            .count();
        assert_eq!(flipped, 300);
        let unique: HashSet<_> = ann.entries.iter().map(|e| (e.row, e.col)).collect();
        assert_eq!(unique.len(), 1000);
    }

    #[test]
    fn annotation_is_deterministic_per_seed() {
        let m = map(50, 50);
        let a = sparse_annotate(&m, 0.05, 0.2, 1).unwrap();
        let b = sparse_annotate(&m, 0.05, 0.2, 1).unwrap();
        let c = sparse_annotate(&m, 0.05, 0.2, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_coverage_is_an_error() {
        assert!(sparse_annotate(&map(4, 4), 0.0, 0.0, 1).is_err());
        assert!(sparse_annotate(&map(4, 4), 0.5, 1.5, 1).is_err());
    }
}
