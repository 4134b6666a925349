//! Pseudo-H&E rendering of structure probability maps.
//!
//! Each pixel is the probability-weighted blend of one RGB anchor per
//! structure class, so confident pixels take their class colour and
//! uncertain ones look washed out.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io;
use crate::error::{Error, Result};
use crate::pixelclf::ProbabilityMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    /// One `[r, g, b]` anchor per structure class, in class order.
    pub anchors: Vec<[u8; 3]>,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            anchors: vec![
                [86, 70, 170],   // cell: hematoxylin blue-violet
                [226, 127, 187], // fiber: eosin pink
                [217, 145, 160], // colloid: dusky rose
                [255, 255, 255], // background
            ],
        }
    }
}

impl Palette {
    pub fn load(path: &Path) -> Result<Self> {
        let p: Palette = io::read_json(path)?;
        if p.anchors.is_empty() {
            return Err(Error::InvalidConfig(format!("{}: palette has no anchors", path.display())));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// Rounded convex blend of the anchors.
    pub fn blend(&self, probs: &[f64]) -> [u8; 3] {
        let mut out = [0u8; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let v: f64 = probs
                .iter()
                .zip(&self.anchors)
                .map(|(p, a)| p * a[c] as f64)
                .sum();
            *o = v.round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

/// Interleaved 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub fn pseudo_stain(pmap: &ProbabilityMap, palette: &Palette) -> Result<RgbImage> {
    if pmap.classes != palette.anchors.len() {
        return Err(Error::DimensionMismatch(format!(
            "probability map has {} classes, palette has {} anchors",
            pmap.classes,
            palette.anchors.len()
        )));
    }
    let mut data = Vec::with_capacity(pmap.height * pmap.width * 3);
    let mut probs = vec![0.0; pmap.classes];
    for row in pmap.probs.chunks_exact(pmap.classes) {
        for (d, &p) in probs.iter_mut().zip(row) {
            *d = p as f64;
        }
        data.extend(palette.blend(&probs));
    }
    Ok(RgbImage {
        width: pmap.width,
        height: pmap.height,
        data,
    })
}

/// Binary PPM (`P6`, maxval 255).
pub fn write_image(image: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend_from_slice(&image.data);
    io::write_bytes(path, &bytes)
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = io::read_bytes(path)?;
    if !bytes.starts_with(b"P6") {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "P6",
        });
    }
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    // width, height, maxval: whitespace-separated, `#` comments allowed
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| malformed("bad header"))?;
        *field = text.parse().map_err(|_| malformed("expected a decimal number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("missing whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(malformed("only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(malformed("zero image dimension"));
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| malformed("image dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "{}: {} payload bytes for a {width}x{height} image",
            path.display(),
            payload.len()
        )));
    }
    Ok(RgbImage {
        width,
        height,
        data: payload.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_of(rows: &[[f32; 4]], width: usize) -> ProbabilityMap {
        let probs: Vec<f32> = rows.iter().flatten().copied().collect();
        ProbabilityMap::new(rows.len() / width, width, 4, probs).unwrap()
    }

    #[test]
    fn anchors_and_blends() {
        let pal = Palette::default();
        let img = pseudo_stain(&map_of(&[[1.0, 0.0, 0.0, 0.0]; 6], 3), &pal).unwrap();
        assert!(img.data.chunks_exact(3).all(|p| p == [86, 70, 170]));
        let mid = pseudo_stain(&map_of(&[[0.5, 0.5, 0.0, 0.0]], 1), &pal).unwrap();
        assert_eq!(mid.pixel(0, 0), [156, 99, 179]);
        let uniform = pseudo_stain(&map_of(&[[0.25; 4]], 1), &pal).unwrap();
        let mean = |c: usize| (pal.anchors.iter().map(|a| a[c] as f64).sum::<f64>() / 4.0).round() as u8;
        assert_eq!(uniform.pixel(0, 0), [mean(0), mean(1), mean(2)]);
        let three = ProbabilityMap::new(1, 1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(pseudo_stain(&three, &pal), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn visibility_fails_below_two_thirds() {
        // Background mixed only with cell passes through the fiber anchor's
        // neighbourhood; the argmax stays visible only from about 0.68 up.
        let pal = Palette::default();
        let rgb = pal.blend(&[0.35, 0.0, 0.0, 0.65]);
        let d = |a: [u8; 3]| -> i32 { (0..3).map(|c| (rgb[c] as i32 - a[c] as i32).pow(2)).sum() };
        assert!(d(pal.anchors[1]) < d(pal.anchors[3]));
    }

    #[test]
    fn ppm_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let img = RgbImage {
            width: 2,
            height: 2,
            data: (0..12).collect(),
        };
        write_image(&img, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), "P6\n2 2\n255\n".len() as u64 + 12);
        assert_eq!(read_image(&path).unwrap(), img);

        std::fs::write(&path, b"P6 # comment\n2 1\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        assert_eq!(read_image(&path).unwrap().data, vec![1, 2, 3, 4, 5, 6]);
        std::fs::write(&path, b"P3\n2 2\n255\n").unwrap();
        assert!(matches!(read_image(&path), Err(Error::BadMagic { .. })));
        std::fs::write(&path, b"P6\n2 2\n255\n\x00\x01").unwrap();
        assert!(matches!(read_image(&path), Err(Error::Truncated { .. })));
        std::fs::write(&path, b"P6\n2 x\n255\n").unwrap();
        assert!(matches!(read_image(&path), Err(Error::MalformedHeader { .. })));
    }

    #[test]
    fn palette_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("palette.json");
        Palette::default().save(&path).unwrap();
        assert_eq!(Palette::load(&path).unwrap(), Palette::default());
    }

    fn probability_vector() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 4).prop_filter_map("non-zero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn blend_stays_in_the_anchor_hull(p in probability_vector()) {
            let pal = Palette::default();
            let rgb = pal.blend(&p);
            for c in 0..3 {
                let lo = pal.anchors.iter().map(|a| a[c]).min().unwrap();
                let hi = pal.anchors.iter().map(|a| a[c]).max().unwrap();
                prop_assert!(lo <= rgb[c] && rgb[c] <= hi);
            }
        }

        #[test]
        fn confident_pixels_are_nearest_their_anchor(
            k in 0usize..4,
            top in 0.7f64..=1.0,
            rest in prop::collection::vec(0.0f64..1.0, 3),
        ) {
            let s: f64 = rest.iter().sum::<f64>().max(1e-12);
            let mut p = Vec::with_capacity(4);
            let mut others = rest.iter().map(|r| r / s * (1.0 - top));
            for j in 0..4 {
                p.push(if j == k { top } else { others.next().unwrap() });
            }
            let pal = Palette::default();
            let rgb = pal.blend(&p);
            let dist = |a: &[u8; 3]| -> i32 { (0..3).map(|c| (rgb[c] as i32 - a[c] as i32).pow(2)).sum() };
            let nearest = (0..4).min_by_key(|&j| dist(&pal.anchors[j])).unwrap();
            prop_assert_eq!(nearest, k);
        }
    }
}
