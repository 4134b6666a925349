//! Binary tensor formats and CSV/JSON sidecars.
//!
//! All binary formats start with a four-byte ASCII magic, followed (for
//! slides only) by a version byte, then little-endian `u32` dimensions and
//! a little-endian payload.
//!
//! | magic  | header            | payload              |
//! |--------|-------------------|----------------------|
//! | `PLRS` | version, H, W, D  | H·W·D `f32`          |
//! | `PLBL` | H, W, M           | H·W `u8`             |
//! | `PLPM` | H, W, M           | H·W·M `f32`          |
//! | `PLEB` | K, E              | K·E `f32`            |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::types::{AnnotationEntry, PolarSlide, SparseAnnotation, StructureMap, TumorClass};
use crate::error::{Error, Result};

pub const SLIDE_MAGIC: &str = "PLRS";
pub const SLIDE_VERSION: u8 = 1;
pub const LABEL_MAGIC: &str = "PLBL";
pub const PROBMAP_MAGIC: &str = "PLPM";
pub const EMBEDDING_MAGIC: &str = "PLEB";

/// `dir/name.ext` → `dir/name.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(read_bytes(path)?)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub(crate) fn encode_header(magic: &str, version: Option<u8>, dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * dims.len());
    out.extend_from_slice(magic.as_bytes());
    if let Some(v) = version {
        out.push(v);
    }
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

/// Parses a header and returns the dimensions and the remaining payload.
pub(crate) fn decode_header<'a>(
    path: &Path,
    bytes: &'a [u8],
    magic: &'static str,
    version: Option<u8>,
    ndims: usize,
) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != magic.as_bytes() {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
        });
    }
    let mut rest = &bytes[4..];
    if let Some(expected) = version {
        match rest.first() {
            Some(&v) if v == expected => rest = &rest[1..],
            Some(&v) => {
                return Err(Error::MalformedHeader {
                    path: path.to_path_buf(),
                    reason: format!("unsupported version {v}, expected {expected}"),
                })
            }
            None => {
                return Err(Error::MalformedHeader {
                    path: path.to_path_buf(),
                    reason: "missing version byte".into(),
                })
            }
        }
    }
    if rest.len() < 4 * ndims {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("header needs {ndims} u32 dimensions"),
        });
    }
    let dims: Vec<usize> = rest[..4 * ndims]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("zero dimension in {dims:?}"),
        });
    }
    Ok((dims, &rest[4 * ndims..]))
}

fn check_payload(path: &Path, payload: &[u8], expected: usize) -> Result<()> {
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "{}: payload has {} bytes but the header declares {expected}",
            path.display(),
            payload.len()
        )));
    }
    Ok(())
}

pub(crate) fn write_f32_tensor(
    path: &Path,
    magic: &str,
    version: Option<u8>,
    dims: &[usize],
    data: &[f32],
) -> Result<()> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut bytes = encode_header(magic, version, dims);
    bytes.reserve(4 * data.len());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub(crate) fn read_f32_tensor(
    path: &Path,
    magic: &'static str,
    version: Option<u8>,
    ndims: usize,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = read_bytes(path)?;
    let (dims, payload) = decode_header(path, &bytes, magic, version, ndims)?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("dimensions {dims:?} overflow"),
        })?;
    check_payload(path, payload, count)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlideMeta {
    slide_id: String,
    tumor_class: TumorClass,
    channel_names: Vec<String>,
}

/// Writes `path` (PLRS) and its `.meta.json` sidecar.
pub fn save_slide(path: &Path, slide: &PolarSlide) -> Result<()> {
    write_f32_tensor(
        path,
        SLIDE_MAGIC,
        Some(SLIDE_VERSION),
        &[slide.height, slide.width, slide.depth],
        &slide.values,
    )?;
    write_json(
        &sidecar_path(path),
        &SlideMeta {
            slide_id: slide.slide_id.clone(),
            tumor_class: slide.tumor_class,
            channel_names: slide.channel_names.clone(),
        },
    )
}

pub fn load_slide(path: &Path) -> Result<PolarSlide> {
    let (dims, values) = read_f32_tensor(path, SLIDE_MAGIC, Some(SLIDE_VERSION), 3)?;
    let meta: SlideMeta = read_json(&sidecar_path(path))?;
    if meta.channel_names.len() != dims[2] {
        return Err(Error::DimensionMismatch(format!(
            "{}: {} channel names for depth {}",
            path.display(),
            meta.channel_names.len(),
            dims[2]
        )));
    }
    let mut slide = PolarSlide::new(meta.slide_id, meta.tumor_class, dims[0], dims[1], dims[2], values)?;
    slide.channel_names = meta.channel_names;
    Ok(slide)
}

pub fn save_structure_map(path: &Path, map: &StructureMap) -> Result<()> {
    let mut bytes = encode_header(LABEL_MAGIC, None, &[map.height, map.width, map.classes]);
    bytes.extend_from_slice(&map.labels);
    write_bytes(path, &bytes)
}

pub fn load_structure_map(path: &Path) -> Result<StructureMap> {
    let bytes = read_bytes(path)?;
    let (dims, payload) = decode_header(path, &bytes, LABEL_MAGIC, None, 3)?;
    check_payload(path, payload, dims[0] * dims[1])?;
    StructureMap::new(dims[0], dims[1], dims[2], payload.to_vec())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationMeta {
    coverage_fraction: f64,
    noise_fraction: f64,
}

/// Writes the `row,col,label` CSV plus a `.meta.json` sidecar holding the
/// coverage and noise fractions.
pub fn save_annotation(path: &Path, ann: &SparseAnnotation) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &ann.entries {
        w.serialize(e).map_err(|e| Error::csv(path, e))?;
    }
    if ann.entries.is_empty() {
        w.write_record(["row", "col", "label"])
            .map_err(|e| Error::csv(path, e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    write_bytes(path, &bytes)?;
    write_json(
        &sidecar_path(path),
        &AnnotationMeta {
            coverage_fraction: ann.coverage_fraction,
            noise_fraction: ann.noise_fraction,
        },
    )
}

pub fn load_annotation(path: &Path) -> Result<SparseAnnotation> {
    let bytes = read_bytes(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let headers = r.headers().map_err(|e| Error::csv(path, e))?;
    if headers != vec!["row", "col", "label"] {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("expected header row,col,label, found {headers:?}"),
        });
    }
    let entries = r
        .deserialize::<AnnotationEntry>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::csv(path, e))?;
    let meta: AnnotationMeta = read_json(&sidecar_path(path))?;
    Ok(SparseAnnotation {
        entries,
        coverage_fraction: meta.coverage_fraction,
        noise_fraction: meta.noise_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_slide, sparse_annotate, GeneratorConfig};

    fn sample() -> (PolarSlide, StructureMap) {
        let cfg = GeneratorConfig {
            height: 24,
            width: 20,
            ..GeneratorConfig::default()
        }
        .with_depth(5);
        generate_slide(4, TumorClass::Borderline, &cfg).unwrap()
    }

    #[test]
    fn slide_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (slide, map) = sample();
        let p = dir.path().join("s.plrs");
        save_slide(&p, &slide).unwrap();
        assert_eq!(load_slide(&p).unwrap(), slide);
        let lp = dir.path().join("s.plbl");
        save_structure_map(&lp, &map).unwrap();
        assert_eq!(load_structure_map(&lp).unwrap(), map);
        let ann = sparse_annotate(&map, 0.3, 0.2, 1).unwrap();
        let ap = dir.path().join("s.ann.csv");
        save_annotation(&ap, &ann).unwrap();
        assert_eq!(load_annotation(&ap).unwrap(), ann);
        let text = fs::read_to_string(&ap).unwrap();
        assert!(text.starts_with("row,col,label\n"));
    }

    #[test]
    fn slide_header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let slide = PolarSlide::new("x", TumorClass::Benign, 2, 3, 1, vec![1.5; 6]).unwrap();
        let p = dir.path().join("x.plrs");
        save_slide(&p, &slide).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..5], b"PLRS\x01");
        assert_eq!(&bytes[5..17], &[2, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(bytes.len(), 17 + 6 * 4);
        assert_eq!(&bytes[17..21], &1.5f32.to_le_bytes());
    }

    #[test]
    fn oversized_header_reports_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (slide, _) = sample();
        let p = dir.path().join("s.plrs");
        save_slide(&p, &slide).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[5..9].copy_from_slice(&1000u32.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_slide(&p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.plrs");
        fs::write(&p, b"JUNKJUNKJUNKJUNKJUNK").unwrap();
        assert!(matches!(load_slide(&p), Err(Error::BadMagic { .. })));
        fs::write(&p, b"PL").unwrap();
        assert!(matches!(load_slide(&p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn short_header_and_bad_version_are_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.plrs");
        fs::write(&p, b"PLRS\x01\x02\x00").unwrap();
        assert!(matches!(load_slide(&p), Err(Error::MalformedHeader { .. })));
        fs::write(&p, b"PLRS\x09\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_slide(&p), Err(Error::MalformedHeader { .. })));
    }

    #[test]
    fn trailing_bytes_are_a_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (_, map) = sample();
        let p = dir.path().join("m.plbl");
        save_structure_map(&p, &map).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.push(0);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_structure_map(&p),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
