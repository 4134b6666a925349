use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::annotate::sparse_annotate;
use super::generator::{generate_slide, GeneratorConfig};
use super::io;
use super::types::{PolarSlide, SparseAnnotation, StructureMap, TumorClass};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Slide counts for malignant, benign and borderline cases.
    pub counts: [usize; 3],
    pub train_fraction: f64,
    pub coverage: f64,
    pub noise: f64,
    pub generator: GeneratorConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        // 53/48/35 cohort scaled down by roughly a third
        Self {
            seed: 20240601,
            counts: [18, 16, 12],
            train_fraction: 2.0 / 3.0,
            coverage: 0.02,
            noise: 0.0,
            generator: GeneratorConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.counts.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "every tumor class needs at least one slide, got {:?}",
                self.counts
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) || !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::InvalidConfig(
                "coverage must lie in (0, 1] and noise in [0, 1]".into(),
            ));
        }
        self.generator.validate()
    }

    /// Per-class train counts, `⌊count · train_fraction⌋`.
    pub fn train_counts(&self) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (k, &c) in self.counts.iter().enumerate() {
            let train = ((c as f64 * self.train_fraction) + 1e-9).floor() as usize;
            if train == 0 || train == c {
                return Err(Error::InvalidConfig(format!(
                    "{} slides of class {} cannot be stratified at train fraction {}",
                    c,
                    TumorClass::KNOWN[k],
                    self.train_fraction
                )));
            }
            out[k] = train;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub slide: PolarSlide,
    pub map: StructureMap,
    pub annotation: SparseAnnotation,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct SlideCorpus {
    pub seed: u64,
    pub entries: Vec<CorpusEntry>,
}

/// One slide's record in `manifest.json`; paths are relative to the corpus
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSlide {
    pub slide_id: String,
    pub tumor_class: TumorClass,
    pub split: Split,
    pub slide_path: PathBuf,
    pub labels_path: PathBuf,
    pub annotation_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub slides: Vec<ManifestSlide>,
}

impl CorpusManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self> {
        io::read_json(&dir.join(Self::FILE))
    }

    pub fn slides_in(&self, split: Split) -> impl Iterator<Item = &ManifestSlide> {
        self.slides.iter().filter(move |s| s.split == split)
    }
}

/// Generates every slide, its annotation, and a stratified train/test split.
///
/// Slide `i` uses sub-seed `derive(seed, [i])`, so slides may be generated
/// in parallel without changing the output.
pub fn build_corpus(config: &CorpusConfig) -> Result<SlideCorpus> {
    config.validate()?;
    let train_counts = config.train_counts()?;

    let mut plan: Vec<(usize, TumorClass)> = Vec::new();
    for (k, &c) in config.counts.iter().enumerate() {
        for _ in 0..c {
            plan.push((plan.len(), TumorClass::KNOWN[k]));
        }
    }

    let mut split = vec![Split::Test; plan.len()];
    let mut rng = seed::derived_rng(config.seed, &[u64::MAX]);
    for (k, class) in TumorClass::KNOWN.iter().enumerate() {
        let mut members: Vec<usize> = plan
            .iter()
            .filter(|(_, c)| c == class)
            .map(|(i, _)| *i)
            .collect();
        members.shuffle(&mut rng);
        for &i in &members[..train_counts[k]] {
            split[i] = Split::Train;
        }
    }

    let entries = plan
        .par_iter()
        .map(|&(i, class)| {
            let (mut slide, map) =
                generate_slide(seed::derive(config.seed, &[i as u64]), class, &config.generator)?;
            slide.slide_id = format!("slide_{i:03}");
            let annotation = sparse_annotate(
                &map,
                config.coverage,
                config.noise,
                seed::derive(config.seed, &[i as u64, 1]),
            )?;
            Ok(CorpusEntry {
                slide,
                map,
                annotation,
                split: split[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SlideCorpus {
        seed: config.seed,
        entries,
    })
}

impl SlideCorpus {
    pub fn save(&self, dir: &Path) -> Result<CorpusManifest> {
        let mut slides = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = &e.slide.slide_id;
            let rec = ManifestSlide {
                slide_id: id.clone(),
                tumor_class: e.slide.tumor_class,
                split: e.split,
                slide_path: PathBuf::from(format!("{id}.plrs")),
                labels_path: PathBuf::from(format!("{id}.plbl")),
                annotation_path: PathBuf::from(format!("{id}.ann.csv")),
            };
            io::save_slide(&dir.join(&rec.slide_path), &e.slide)?;
            io::save_structure_map(&dir.join(&rec.labels_path), &e.map)?;
            io::save_annotation(&dir.join(&rec.annotation_path), &e.annotation)?;
            slides.push(rec);
        }
        let manifest = CorpusManifest {
            seed: self.seed,
            slides,
        };
        io::write_json(&dir.join(CorpusManifest::FILE), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = CorpusManifest::load(dir)?;
        let entries = manifest
            .slides
            .iter()
            .map(|s| {
                Ok(CorpusEntry {
                    slide: io::load_slide(&dir.join(&s.slide_path))?,
                    map: io::load_structure_map(&dir.join(&s.labels_path))?,
                    annotation: io::load_annotation(&dir.join(&s.annotation_path))?,
                    split: s.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: manifest.seed,
            entries,
        })
    }

    pub fn split_counts(&self) -> [[usize; 3]; 2] {
        let mut out = [[0; 3]; 2];
        for e in &self.entries {
            let k = e.slide.tumor_class.index().expect("corpus slides are labelled");
            out[(e.split == Split::Test) as usize][k] += 1;
        }
        out
    }
}
