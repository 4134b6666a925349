use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of structure classes: cell, fiber, colloid, background.
pub const STRUCTURE_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Cell,
    Fiber,
    Colloid,
    Background,
}

impl Structure {
    pub const ALL: [Structure; STRUCTURE_COUNT] = [
        Structure::Cell,
        Structure::Fiber,
        Structure::Colloid,
        Structure::Background,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::Cell => "cell",
            Structure::Fiber => "fiber",
            Structure::Colloid => "colloid",
            Structure::Background => "background",
        }
    }
}

/// Slide-level diagnosis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TumorClass {
    Malignant,
    Benign,
    Borderline,
    Unknown,
}

impl TumorClass {
    pub const KNOWN: [TumorClass; 3] = [
        TumorClass::Malignant,
        TumorClass::Benign,
        TumorClass::Borderline,
    ];

    /// Index into the three classifier heads; `None` for `Unknown`.
    pub fn index(self) -> Option<usize> {
        match self {
            TumorClass::Malignant => Some(0),
            TumorClass::Benign => Some(1),
            TumorClass::Borderline => Some(2),
            TumorClass::Unknown => None,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::KNOWN.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TumorClass::Malignant => "malignant",
            TumorClass::Benign => "benign",
            TumorClass::Borderline => "borderline",
            TumorClass::Unknown => "unknown",
        }
    }
}

impl fmt::Display for TumorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TumorClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "malignant" => Ok(TumorClass::Malignant),
            "benign" => Ok(TumorClass::Benign),
            "borderline" => Ok(TumorClass::Borderline),
            "unknown" => Ok(TumorClass::Unknown),
            other => Err(Error::InvalidInput(format!("unknown tumor class {other:?}"))),
        }
    }
}

const NAMED_CHANNELS: [&str; 6] = [
    "linear_retardance",
    "linear_phase_delay",
    "anisotropy_degree",
    "circular_to_linear_conversion",
    "circular_birefringence",
    "circular_phase_delay",
];

/// Channel names for a slide of the given depth. The first six carry the
/// names of the dominant polarization parameters; the rest are auxiliary.
pub fn channel_names(depth: usize) -> Vec<String> {
    (0..depth)
        .map(|d| match NAMED_CHANNELS.get(d) {
            Some(name) => (*name).to_string(),
            None => format!("aux_{d:02}"),
        })
        .collect()
}

/// Per-pixel polarization-feature tensor, row-major `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarSlide {
    pub slide_id: String,
    pub tumor_class: TumorClass,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub values: Vec<f32>,
    pub channel_names: Vec<String>,
}

impl PolarSlide {
    pub fn new(
        slide_id: impl Into<String>,
        tumor_class: TumorClass,
        height: usize,
        width: usize,
        depth: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::InvalidInput(format!(
                "slide dimensions must be positive, got {height}x{width}x{depth}"
            )));
        }
        if values.len() != height * width * depth {
            return Err(Error::DimensionMismatch(format!(
                "slide {height}x{width}x{depth} needs {} values, got {}",
                height * width * depth,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite slide value at {i}")));
        }
        Ok(Self {
            slide_id: slide_id.into(),
            tumor_class,
            height,
            width,
            depth,
            values,
            channel_names: channel_names(depth),
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Feature vector of the pixel with flat index `p = row * width + col`.
    pub fn pixel(&self, p: usize) -> &[f32] {
        &self.values[p * self.depth..(p + 1) * self.depth]
    }

    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        self.pixel(row * self.width + col)
    }
}

/// Ground-truth structure label per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labels: Vec<u8>,
}

impl StructureMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "structure map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if classes == 0 || classes > u8::MAX as usize {
            return Err(Error::InvalidInput(format!("class count {classes} out of range")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidInput(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col] as usize
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub row: usize,
    pub col: usize,
    pub label: usize,
}

/// Sparse pathologist-style annotation with possibly wrong labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAnnotation {
    pub entries: Vec<AnnotationEntry>,
    pub coverage_fraction: f64,
    pub noise_fraction: f64,
}

impl SparseAnnotation {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Flat pixel indices of the annotated pixels, given the slide width.
    pub fn pixel_indices(&self, width: usize) -> Vec<usize> {
        self.entries.iter().map(|e| e.row * width + e.col).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_names_are_named_then_auxiliary() {
        let names = channel_names(8);
        assert_eq!(names[0], "linear_retardance");
        assert_eq!(names[5], "circular_phase_delay");
        assert_eq!(names[6], "aux_06");
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn slide_rejects_non_finite_values() {
        let err = PolarSlide::new("s", TumorClass::Benign, 1, 1, 2, vec![0.0, f32::NAN]);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn structure_map_rejects_out_of_range_labels() {
        assert!(StructureMap::new(1, 2, 4, vec![0, 4]).is_err());
        assert!(StructureMap::new(1, 2, 4, vec![0]).is_err());
    }

    #[test]
    fn tumor_class_round_trips_through_strings() {
        for c in TumorClass::KNOWN {
            assert_eq!(c.name().parse::<TumorClass>().unwrap(), c);
        }
    }
}
