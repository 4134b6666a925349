//! Run configuration: one JSON document with defaults for every key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{io, CorpusConfig, GeneratorConfig};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::NoiseSweepConfig;
use crate::mil::MilConfig;
use crate::pixelclf::Stage1Config;
use crate::render::Palette;

/// Corpus settings; the corpus seed is the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Slide counts for malignant, benign and borderline cases.
    pub counts: [usize; 3],
    pub train_fraction: f64,
    pub coverage: f64,
    pub noise: f64,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            counts: c.counts,
            train_fraction: c.train_fraction,
            coverage: c.coverage,
            noise: c.noise,
            generator: c.generator,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub palette: Palette,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub stage1: Stage1Config,
    pub stage2: DistillConfig,
    pub stage3: MilConfig,
    pub noise_sweep: NoiseSweepConfig,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: CorpusConfig::default().seed,
            out_dir: PathBuf::from("polarpath-run"),
            data: DataConfig::default(),
            stage1: Stage1Config::default(),
            stage2: DistillConfig::default(),
            stage3: MilConfig::default(),
            noise_sweep: NoiseSweepConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| {
            // unknown keys and type errors are configuration problems
            Error::InvalidConfig(format!("{}: {e}", path.display()))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// 448-pixel slides, 224-pixel patches and 1024-wide embeddings.
    pub fn paper_scale(mut self) -> Self {
        self.stage2 = DistillConfig {
            epochs: self.stage2.epochs,
            step_size: self.stage2.step_size,
            batch_size: self.stage2.batch_size,
            ..DistillConfig::paper_scale()
        };
        self.data.generator.height = self.data.generator.height.max(448);
        self.data.generator.width = self.data.generator.width.max(448);
        self
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            counts: self.data.counts,
            train_fraction: self.data.train_fraction,
            coverage: self.data.coverage,
            noise: self.data.noise,
            generator: self.data.generator.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let corpus = self.corpus();
        corpus.validate()?;
        corpus.train_counts()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.stage3.validate()?;
        self.noise_sweep.validate()?;
        let g = &self.data.generator;
        if self.stage2.patch_side > g.height.min(g.width) {
            return Err(Error::InvalidConfig(format!(
                "patch side {} exceeds the {}x{} slides",
                self.stage2.patch_side, g.height, g.width
            )));
        }
        if self.render.palette.anchors.len() != crate::data::STRUCTURE_COUNT {
            return Err(Error::InvalidConfig(format!(
                "palette needs {} anchors, got {}",
                crate::data::STRUCTURE_COUNT,
                self.render.palette.anchors.len()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the configuration with `out_dir` cleared, so that runs in
    /// different directories share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("configuration serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
        assert_eq!(cfg.stage3.latent, 256);
        assert_eq!(cfg.stage3.dropout, 0.25);
        assert_eq!(cfg.stage2.patch_side, 64);
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 5, "stage1": {"folds": 3}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.stage1.folds, 3);
        assert_eq!(cfg.stage2, DistillConfig::default());
        std::fs::write(&path, r#"{"stage1": {"fold": 3}}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn paper_scale_settings() {
        let cfg = RunConfig::default().paper_scale();
        assert_eq!(cfg.stage2.patch_side, 224);
        assert_eq!(cfg.stage2.embedding_dim, 1024);
        assert!(cfg.data.generator.height >= 448);
        cfg.validate().unwrap();
        let bad = RunConfig {
            stage2: DistillConfig {
                patch_side: 300,
                ..DistillConfig::paper_scale()
            },
            ..RunConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
    }
}
