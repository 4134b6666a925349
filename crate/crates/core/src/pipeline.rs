//! Stage orchestration behind the `polarpath` binary.
//!
//! Every command reads its inputs from and writes its outputs under
//! `RunConfig::out_dir`, then records a [`RunManifest`] in
//! `out_dir/manifests/<command>.json`. Manifests carry no timestamps, so two
//! runs with the same configuration produce byte-identical manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::data::{self, io, channel_names, CorpusManifest, SlideCorpus, Split, Structure, TumorClass};
use crate::distill::{self, HistorySplit, PatchEmbeddingSet, PatchSet};
use crate::error::{Error, Result};
use crate::eval;
use crate::mil::{self, Bag};
use crate::pixelclf::{self, ProbabilityMap};
use crate::render::{self, Palette};
use crate::{confident, seed};

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub metrics: Value,
    /// Paths relative to the output directory.
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("polarpath".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("manifest".to_string(), MANIFEST_VERSION.to_string()),
    ])
}

/// Directory layout of one run.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1")
    }
    pub fn stage2(&self) -> PathBuf {
        self.root.join("stage2")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.stage2().join("embeddings")
    }
    pub fn stage3(&self) -> PathBuf {
        self.root.join("stage3")
    }
    pub fn noise(&self) -> PathBuf {
        self.root.join("noise")
    }
    pub fn render(&self) -> PathBuf {
        self.root.join("render")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }
    pub fn probability_map(&self, slide_id: &str) -> PathBuf {
        self.stage1().join(format!("{slide_id}.plpm"))
    }
    pub fn embedding(&self, slide_id: &str) -> PathBuf {
        self.embeddings().join(format!("{slide_id}.pleb"))
    }
    pub fn distill_net(&self) -> PathBuf {
        self.stage2().join("distill.plnn")
    }
    pub fn mil_model(&self) -> PathBuf {
        self.stage3().join("mil.plnn")
    }
}

/// Output of one command: artifacts are absolute while the command runs
/// and are made relative when the manifest is written.
struct Outcome {
    metrics: Value,
    artifacts: Vec<PathBuf>,
}

fn finish(cfg: &RunConfig, command: &str, outcome: Outcome) -> Result<RunManifest> {
    let layout = Layout::new(&cfg.out_dir);
    let artifacts = outcome
        .artifacts
        .iter()
        .map(|p| p.strip_prefix(&layout.root).unwrap_or(p).to_path_buf())
        .collect();
    let manifest = RunManifest {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        versions: versions(),
        metrics: outcome.metrics,
        artifacts,
    };
    io::write_json(&layout.manifest(command), &manifest)?;
    log::info!("{command}: manifest written to {}", layout.manifest(command).display());
    Ok(manifest)
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn require(path: PathBuf, producer: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingStage { path, producer })
    }
}

fn load_corpus(layout: &Layout) -> Result<SlideCorpus> {
    require(layout.corpus().join(CorpusManifest::FILE), "gen")?;
    SlideCorpus::load(&layout.corpus())
}

fn load_corpus_manifest(layout: &Layout) -> Result<CorpusManifest> {
    require(layout.corpus().join(CorpusManifest::FILE), "gen")?;
    CorpusManifest::load(&layout.corpus())
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Generates the synthetic corpus.
pub fn gen(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let dir = layout.corpus();
    mkdir(&dir)?;
    let corpus = data::build_corpus(&cfg.corpus())?;
    let manifest = corpus.save(&dir)?;
    let mut artifacts = vec![dir.join(CorpusManifest::FILE)];
    let mut checksums = BTreeMap::new();
    for s in &manifest.slides {
        for rel in [&s.slide_path, &s.labels_path, &s.annotation_path] {
            let path = dir.join(rel);
            checksums.insert(rel.display().to_string(), io::sha256_file(&path)?);
            artifacts.push(path);
        }
    }
    let counts = corpus.split_counts();
    finish(
        cfg,
        "gen",
        Outcome {
            metrics: json!({
                "slides": manifest.slides.len(),
                "train_counts": counts[0],
                "test_counts": counts[1],
                "checksums": checksums,
            }),
            artifacts,
        },
    )
}

#[derive(Debug, Clone, Serialize)]
struct SlideStage1 {
    slide_id: String,
    split: &'static str,
    /// Agreement with the ground truth on the annotated pixels.
    annotated_acc: f64,
    /// Agreement with the ground truth on every pixel that was not annotated.
    heldout_acc: f64,
    pruned: usize,
}

/// Trains one booster per slide on its sparse annotation and writes the
/// per-pixel probability maps.
pub fn stage1(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let corpus = load_corpus(&layout)?;
    let dir = layout.stage1();
    mkdir(&dir)?;
    let classes = data::STRUCTURE_COUNT;

    let results: Vec<(SlideStage1, Vec<f64>, Vec<PathBuf>)> = corpus
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let id = &e.slide.slide_id;
            let out = pixelclf::recognize_structures(
                &e.slide,
                &e.annotation,
                classes,
                &cfg.stage1,
                seed::derive(cfg.seed, &[10, i as u64]),
            )?;
            let mut files = vec![layout.probability_map(id), dir.join(format!("{id}.gbdt.json"))];
            out.map.save(&files[0])?;
            pixelclf::save_model(&files[1], &out.model)?;
            if let Some(clean) = &out.clean {
                let path = dir.join(format!("{id}.clean.json"));
                confident::write_report(&path, clean)?;
                files.push(path);
            }
            let annotated = e.annotation.pixel_indices(e.slide.width);
            let mut is_annotated = vec![false; e.slide.pixel_count()];
            for &p in &annotated {
                is_annotated[p] = true;
            }
            let rest: Vec<usize> = (0..e.slide.pixel_count()).filter(|&p| !is_annotated[p]).collect();
            let row = SlideStage1 {
                slide_id: id.clone(),
                split: split_name(e.split),
                annotated_acc: pixelclf::pixel_accuracy(&out.map, &e.map.labels, &annotated),
                heldout_acc: pixelclf::pixel_accuracy(&out.map, &e.map.labels, &rest),
                pruned: out.clean.as_ref().map_or(0, |c| c.pruned_indices.len()),
            };
            Ok((row, pixelclf::feature_importance(&out.model).gains, files))
        })
        .collect::<Result<_>>()?;

    let depth = corpus.entries[0].slide.depth;
    let mut gains = vec![0.0; depth];
    for (_, g, _) in &results {
        for (a, b) in gains.iter_mut().zip(g) {
            *a += b / results.len() as f64;
        }
    }
    let mut ranking: Vec<usize> = (0..depth).collect();
    ranking.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]).then(a.cmp(&b)));
    let names = channel_names(depth);
    let importance = pixelclf::FeatureImportance { gains, ranking };
    let importance_path = dir.join("importance.csv");
    pixelclf::write_importance_csv(&importance_path, &importance, &names)?;

    let accuracy_path = dir.join("accuracy.csv");
    let mut w = csv::Writer::from_path(&accuracy_path).map_err(|e| Error::csv(&accuracy_path, e))?;
    for (row, _, _) in &results {
        w.serialize(row).map_err(|e| Error::csv(&accuracy_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&accuracy_path, e))?;

    let n = results.len() as f64;
    let mean = |f: fn(&SlideStage1) -> f64| results.iter().map(|(r, _, _)| f(r)).sum::<f64>() / n;
    let mut artifacts = vec![importance_path, accuracy_path];
    artifacts.extend(results.iter().flat_map(|(_, _, f)| f.iter().cloned()));
    finish(
        cfg,
        "stage1",
        Outcome {
            metrics: json!({
                "slides": results.len(),
                "confidence_learning": cfg.stage1.confidence_learning,
                "mean_annotated_acc": mean(|r| r.annotated_acc),
                "mean_heldout_acc": mean(|r| r.heldout_acc),
                "pruned_total": results.iter().map(|(r, _, _)| r.pruned).sum::<usize>(),
                "top_channels": importance.ranking.iter().take(3).map(|&c| names[c].clone()).collect::<Vec<_>>(),
            }),
            artifacts,
        },
    )
}

fn load_patch_sets(cfg: &RunConfig, layout: &Layout, corpus: &SlideCorpus) -> Result<Vec<(Split, PatchSet)>> {
    corpus
        .entries
        .par_iter()
        .map(|e| {
            let path = require(layout.probability_map(&e.slide.slide_id), "stage1")?;
            let pmap = ProbabilityMap::load(&path)?;
            let set = distill::extract_patches(&e.slide, &pmap, cfg.stage2.patch_side, cfg.stage2.stride)?;
            Ok((e.split, set))
        })
        .collect()
}

/// Distils the stage-1 maps into the patch encoder and exports one
/// embedding set per slide.
pub fn stage2(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let corpus = load_corpus(&layout)?;
    // fail before any work if stage 1 has not run
    for e in &corpus.entries {
        require(layout.probability_map(&e.slide.slide_id), "stage1")?;
    }
    let sets = load_patch_sets(cfg, &layout, &corpus)?;
    let pick = |split: Split| -> Vec<PatchSet> {
        sets.iter().filter(|(s, _)| *s == split).map(|(_, p)| p.clone()).collect()
    };
    let train_set = PatchSet::sample(&pick(Split::Train), cfg.stage2.train_patches, seed::derive(cfg.seed, &[20]), "train")?;
    let heldout = PatchSet::sample(&pick(Split::Test), cfg.stage2.heldout_patches, seed::derive(cfg.seed, &[21]), "heldout")?;
    let (net, history) = distill::train(&train_set, Some(&heldout), &cfg.stage2, seed::derive(cfg.seed, &[22]))?;
    drop(train_set);

    mkdir(&layout.embeddings())?;
    let net_path = layout.distill_net();
    net.save(&net_path)?;
    let history_path = layout.stage2().join("history.csv");
    distill::write_history_csv(&history_path, &history)?;
    let mut artifacts = vec![net_path.clone(), io::sidecar_path(&net_path), history_path];
    for (_, set) in &sets {
        let emb = distill::embed(&net, set)?;
        let path = layout.embedding(&set.roi_id);
        emb.save(&path)?;
        artifacts.push(path);
    }

    let last = |split: HistorySplit| history.iter().rev().find(|h| h.split == split).copied();
    let train_last = last(HistorySplit::Train).expect("history has a training row");
    let held_last = last(HistorySplit::Heldout).expect("history has a held-out row");
    finish(
        cfg,
        "stage2",
        Outcome {
            metrics: json!({
                "epochs": cfg.stage2.epochs,
                "train_patches": cfg.stage2.train_patches,
                "heldout_patches": heldout.len(),
                "parameters": net.parameter_count(),
                "embedding_dim": net.shape.embedding_dim(),
                "train_acc": train_last.acc,
                "train_loss": train_last.loss,
                "heldout_acc": held_last.acc,
                "heldout_loss": held_last.loss,
            }),
            artifacts,
        },
    )
}

#[derive(Debug, Serialize)]
struct PredictionRecord {
    roi_id: String,
    split: &'static str,
    true_class: TumorClass,
    predicted_class: TumorClass,
    class_probs: [f64; 3],
    head_scores: [f64; 3],
    attention: Vec<f64>,
}

fn load_bags(layout: &Layout, manifest: &CorpusManifest, split: Split) -> Result<Vec<Bag>> {
    manifest
        .slides_in(split)
        .map(|s| {
            let path = require(layout.embedding(&s.slide_id), "stage2")?;
            Ok(Bag {
                embeddings: PatchEmbeddingSet::load(&path, &s.slide_id)?,
                class: s.tumor_class,
            })
        })
        .collect()
}

/// Trains the attention-MIL classifier on the training ROIs and scores the
/// held-out ROIs.
pub fn stage3(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let manifest = load_corpus_manifest(&layout)?;
    let train_bags = load_bags(&layout, &manifest, Split::Train)?;
    let val_bags = load_bags(&layout, &manifest, Split::Test)?;
    let (model, history) = mil::train(&train_bags, &val_bags, &cfg.stage3, seed::derive(cfg.seed, &[30]))?;

    let dir = layout.stage3();
    mkdir(&dir)?;
    let model_path = layout.mil_model();
    model.save(&model_path)?;
    let history_path = dir.join("history.csv");
    mil::write_history_csv(&history_path, &history)?;
    let mut artifacts = vec![model_path.clone(), io::sidecar_path(&model_path), history_path];

    let mut records = Vec::new();
    for (split, bags) in [(Split::Train, &train_bags), (Split::Test, &val_bags)] {
        for b in bags.iter() {
            let p = mil::predict(&model, &b.embeddings)?;
            records.push(PredictionRecord {
                roi_id: b.embeddings.roi_id.clone(),
                split: split_name(split),
                true_class: b.class,
                predicted_class: p.predicted_class,
                class_probs: p.class_probs,
                head_scores: p.head_scores,
                attention: p.attention,
            });
        }
    }
    let predictions_path = dir.join("predictions.json");
    io::write_json(&predictions_path, &records)?;
    artifacts.push(predictions_path);

    let (probs, labels) = mil::score_bags(&model, &val_bags)?;
    let summary = eval::auc_summary(&probs, &labels)?;
    let micro_path = dir.join("roc_micro.csv");
    eval::write_roc_csv(&micro_path, &eval::micro_roc(&probs, 3, &labels)?)?;
    artifacts.push(micro_path);
    for (c, class) in TumorClass::KNOWN.iter().enumerate() {
        let path = dir.join(format!("roc_{class}.csv"));
        eval::write_roc_csv(&path, &eval::class_roc(&probs, 3, &labels, c)?)?;
        artifacts.push(path);
    }
    let (train_probs, train_labels) = mil::score_bags(&model, &train_bags)?;
    let train_summary = eval::auc_summary(&train_probs, &train_labels)?;

    let all: Vec<Bag> = train_bags.into_iter().chain(val_bags).collect();
    let emb_path = dir.join("roi_embeddings.csv");
    mil::write_roi_embeddings_csv(&emb_path, &mil::export_roi_embeddings(&model, &all)?)?;
    artifacts.push(emb_path);

    let class_auc: BTreeMap<&str, f64> = TumorClass::KNOWN
        .iter()
        .map(|c| c.name())
        .zip(summary.class_auc.iter().copied())
        .collect();
    finish(
        cfg,
        "stage3",
        Outcome {
            metrics: json!({
                "train_rois": train_labels.len(),
                "validation_rois": labels.len(),
                "epochs": cfg.stage3.epochs,
                "final_loss": history.last().map(|h| h.loss),
                "train_micro_auc": train_summary.micro_auc,
                "micro_auc": summary.micro_auc,
                "class_auc": class_auc,
                "accuracy": summary.accuracy,
            }),
            artifacts,
        },
    )
}

/// Runs stage 1 on a fixed subset of slides at every configured noise
/// level, with and without confident learning.
pub fn noise_exp(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let corpus = load_corpus(&layout)?;
    let report = eval::noise_sweep(&corpus, &cfg.noise_sweep, &cfg.stage1, seed::derive(cfg.seed, &[40]))?;
    let dir = layout.noise();
    mkdir(&dir)?;
    let csv_path = dir.join("noise_sweep.csv");
    let json_path = dir.join("noise_sweep.json");
    report.write(&csv_path, &json_path)?;
    finish(
        cfg,
        "noise-exp",
        Outcome {
            metrics: serde_json::to_value(&report).map_err(|e| Error::json(&json_path, e))?,
            artifacts: vec![csv_path, json_path],
        },
    )
}

/// Renders every stage-1 probability map as a pseudo-H&E image.
pub fn render(cfg: &RunConfig, palette: Option<&Palette>) -> Result<RunManifest> {
    cfg.validate()?;
    let palette = palette.unwrap_or(&cfg.render.palette);
    let layout = Layout::new(&cfg.out_dir);
    let manifest = load_corpus_manifest(&layout)?;
    let dir = layout.render();
    mkdir(&dir)?;
    let artifacts: Vec<PathBuf> = manifest
        .slides
        .par_iter()
        .map(|s| {
            let pmap = ProbabilityMap::load(&require(layout.probability_map(&s.slide_id), "stage1")?)?;
            let image = render::pseudo_stain(&pmap, palette)?;
            let path = dir.join(format!("{}.ppm", s.slide_id));
            render::write_image(&image, &path)?;
            Ok(path)
        })
        .collect::<Result<_>>()?;
    let anchors: BTreeMap<&str, [u8; 3]> = (0..data::STRUCTURE_COUNT)
        .map(|k| Structure::from_index(k).expect("structure index").name())
        .zip(palette.anchors.iter().copied())
        .collect();
    finish(
        cfg,
        "render",
        Outcome {
            metrics: json!({ "images": artifacts.len(), "anchors": anchors }),
            artifacts,
        },
    )
}

/// Collects the metrics of every command that has run into `report.json`.
pub fn report(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let stage3_manifest = require(layout.manifest("stage3"), "stage3")?;
    let mut sections = BTreeMap::new();
    for command in ["gen", "stage1", "stage2", "stage3", "noise-exp", "render"] {
        let path = layout.manifest(command);
        let path = if command == "stage3" { stage3_manifest.clone() } else { path };
        if path.exists() {
            let mut m = RunManifest::load(&path)?;
            if command == "gen" {
                // checksums belong in the corpus manifest, not the summary
                if let Some(obj) = m.metrics.as_object_mut() {
                    obj.remove("checksums");
                }
            }
            sections.insert(command, m.metrics);
        }
    }
    let report_path = layout.root.join("report.json");
    io::write_json(&report_path, &sections)?;
    let s3 = &sections["stage3"];
    finish(
        cfg,
        "report",
        Outcome {
            metrics: json!({
                "micro_auc": s3["micro_auc"],
                "class_auc": s3["class_auc"],
                "accuracy": s3["accuracy"],
            }),
            artifacts: vec![report_path],
        },
    )
}

/// Runs gen, stage1, stage2, stage3, render and report in order.
pub fn pipeline(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let gen = gen(cfg)?;
    let s1 = stage1(cfg)?;
    let s2 = stage2(cfg)?;
    let s3 = stage3(cfg)?;
    let r = render(cfg, None)?;
    let rep = report(cfg)?;
    let root = &cfg.out_dir;
    let mut artifacts = Vec::new();
    for m in [&gen, &s1, &s2, &s3, &r, &rep] {
        artifacts.push(Layout::new(root).manifest(&m.command));
        artifacts.extend(m.artifacts.iter().map(|p| root.join(p)));
    }
    finish(
        cfg,
        "pipeline",
        Outcome {
            metrics: json!({
                "stage1": s1.metrics,
                "stage2": s2.metrics,
                "stage3": s3.metrics,
            }),
            artifacts,
        },
    )
}

/// Checks that every artifact listed in a manifest exists and parses
/// according to its extension.
pub fn verify_artifacts(root: &Path, manifest: &RunManifest) -> Result<()> {
    for rel in &manifest.artifacts {
        let path = root.join(rel);
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if !path.exists() {
            return Err(Error::InvalidInput(format!("manifest lists missing artifact {}", path.display())));
        }
        if name.ends_with(".json") {
            io::read_json::<Value>(&path)?;
        } else if name.ends_with(".csv") {
            let mut r = csv::Reader::from_path(&path).map_err(|e| Error::csv(&path, e))?;
            for rec in r.records() {
                rec.map_err(|e| Error::csv(&path, e))?;
            }
        } else if name.ends_with(".plpm") {
            ProbabilityMap::load(&path)?;
        } else if name.ends_with(".pleb") {
            PatchEmbeddingSet::load(&path, "")?;
        } else if name.ends_with(".ppm") {
            render::read_image(&path)?;
        } else if name.ends_with(".plrs") {
            io::load_slide(&path)?;
        } else if name.ends_with(".plbl") {
            io::load_structure_map(&path)?;
        } else if name == "distill.plnn" {
            distill::DistillNet::load(&path)?;
        } else if name == "mil.plnn" {
            mil::MilModel::load(&path)?;
        }
    }
    Ok(())
}
