//! Synthetic polarimetric slides, sparse noisy annotations, corpora, and
//! their on-disk formats.

mod annotate;
mod corpus;
mod generator;
pub mod io;
mod types;

pub use annotate::sparse_annotate;
pub use corpus::{build_corpus, CorpusConfig, CorpusEntry, CorpusManifest, ManifestSlide, SlideCorpus, Split};
pub use generator::{generate_slide, smooth_field, Composition, GeneratorConfig};
pub use types::{
    channel_names, AnnotationEntry, PolarSlide, SparseAnnotation, Structure, StructureMap, TumorClass,
    STRUCTURE_COUNT,
};
