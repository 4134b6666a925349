use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::types::{PolarSlide, Structure, StructureMap, TumorClass, STRUCTURE_COUNT};
use crate::error::{Error, Result};
use crate::seed;

/// Structure proportions and fiber arrangement for one tumor class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Composition {
    pub cell: f64,
    pub fiber: f64,
    pub colloid: f64,
    pub background: f64,
    /// 1.0 = all fibers share one orientation, 0.0 = maximal spread.
    pub fiber_coherence: f64,
}

impl Composition {
    fn fractions(&self) -> [f64; STRUCTURE_COUNT] {
        [self.cell, self.fiber, self.colloid, self.background]
    }

    fn validate(&self, which: &str) -> Result<()> {
        let fr = self.fractions();
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidConfig(format!(
                "{which} composition fractions must lie in [0, 1]"
            )));
        }
        let sum: f64 = fr.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "{which} composition fractions sum to {sum}, not 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.fiber_coherence) {
            return Err(Error::InvalidConfig(format!(
                "{which} fiber_coherence must lie in [0, 1]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Per-structure channel means, `STRUCTURE_COUNT × depth`.
    pub structure_means: Vec<Vec<f32>>,
    /// Per-structure channel standard deviations (diagonal covariance).
    pub structure_std: Vec<Vec<f32>>,
    /// Amplitude of the spatially correlated noise added to every channel.
    pub correlated_noise: f32,
    /// Blur radius (pixels) of the correlated noise.
    pub correlated_scale: usize,
    pub cell_radius: f64,
    pub fiber_period: f64,
    /// Orientation spread (radians) applied at zero coherence.
    pub fiber_orientation_spread: f64,
    pub fiber_bundle_scale: usize,
    pub background_smoothness: usize,
    pub malignant: Composition,
    pub benign: Composition,
    pub borderline: Composition,
    /// Per-slide uniform jitter applied to the non-zero cell, fiber and
    /// colloid fractions; background absorbs the difference.
    pub composition_jitter: f64,
}

fn default_means(depth: usize) -> Vec<Vec<f32>> {
    // rows: cell, fiber, colloid, background
    const INFORMATIVE: [[f32; 6]; STRUCTURE_COUNT] = [
        [-1.5, 0.8, 0.6, 0.5, 0.0, 0.3],
        [1.5, 0.8, -0.6, 0.0, 0.5, -0.3],
        [0.5, -0.8, 0.6, -0.5, 0.0, -0.3],
        [-0.5, -0.8, -0.6, 0.0, -0.5, 0.3],
    ];
    INFORMATIVE
        .iter()
        .map(|row| (0..depth).map(|d| row.get(d).copied().unwrap_or(0.0)).collect())
        .collect()
}

fn default_std(depth: usize) -> Vec<Vec<f32>> {
    (0..STRUCTURE_COUNT)
        .map(|_| (0..depth).map(|d| if d == 0 { 0.45 } else { 0.6 }).collect())
        .collect()
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let depth = 16;
        Self {
            height: 256,
            width: 256,
            depth,
            structure_means: default_means(depth),
            structure_std: default_std(depth),
            correlated_noise: 0.15,
            correlated_scale: 12,
            cell_radius: 5.0,
            fiber_period: 16.0,
            fiber_orientation_spread: std::f64::consts::FRAC_PI_2,
            fiber_bundle_scale: 20,
            background_smoothness: 28,
            malignant: Composition {
                cell: 0.35,
                fiber: 0.10,
                colloid: 0.25,
                background: 0.30,
                fiber_coherence: 0.3,
            },
            benign: Composition {
                cell: 0.15,
                fiber: 0.10,
                colloid: 0.45,
                background: 0.30,
                fiber_coherence: 0.9,
            },
            borderline: Composition {
                cell: 0.22,
                fiber: 0.28,
                colloid: 0.20,
                background: 0.30,
                fiber_coherence: 0.6,
            },
            composition_jitter: 0.03,
        }
    }
}

impl GeneratorConfig {
    /// Same configuration with a different channel count; means and
    /// standard deviations are rebuilt from the defaults.
    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self.structure_means = default_means(depth);
        self.structure_std = default_std(depth);
        self
    }

    pub fn composition(&self, class: TumorClass) -> Result<&Composition> {
        match class {
            TumorClass::Malignant => Ok(&self.malignant),
            TumorClass::Benign => Ok(&self.benign),
            TumorClass::Borderline => Ok(&self.borderline),
            TumorClass::Unknown => Err(Error::InvalidInput(
                "cannot generate a slide for an unknown tumor class".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::InvalidConfig(format!(
                "slide dimensions must be positive, got {}x{}x{}",
                self.height, self.width, self.depth
            )));
        }
        for (name, table) in [
            ("structure_means", &self.structure_means),
            ("structure_std", &self.structure_std),
        ] {
            if table.len() != STRUCTURE_COUNT || table.iter().any(|r| r.len() != self.depth) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be {STRUCTURE_COUNT}x{}",
                    self.depth
                )));
            }
            if table.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite")));
            }
        }
        if self.structure_std.iter().flatten().any(|&s| s < 0.0) {
            return Err(Error::InvalidConfig("structure_std must be non-negative".into()));
        }
        if self.cell_radius <= 0.0 || self.fiber_period <= 0.0 {
            return Err(Error::InvalidConfig(
                "cell_radius and fiber_period must be positive".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.composition_jitter) {
            return Err(Error::InvalidConfig("composition_jitter must lie in [0, 0.5)".into()));
        }
        self.malignant.validate("malignant")?;
        self.benign.validate("benign")?;
        self.borderline.validate("borderline")?;
        Ok(())
    }
}

/// Box-blurs white noise three times (an approximate Gaussian) and rescales
/// to zero mean and unit variance.
pub fn smooth_field<R: Rng>(rng: &mut R, height: usize, width: usize, radius: usize) -> Vec<f32> {
    let mut field: Vec<f32> = (0..height * width)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    if radius > 0 {
        let mut scratch = vec![0.0f32; field.len()];
        for _ in 0..3 {
            box_blur_rows(&field, &mut scratch, height, width, radius);
            box_blur_cols(&scratch, &mut field, height, width, radius);
        }
    }
    let n = field.len() as f64;
    let mean = field.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = field.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    for v in &mut field {
        *v = ((*v as f64 - mean) / sd) as f32;
    }
    field
}

fn box_blur_rows(src: &[f32], dst: &mut [f32], height: usize, width: usize, r: usize) {
    let norm = 1.0 / (2 * r + 1) as f32;
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        let at = |x: isize| row[x.clamp(0, width as isize - 1) as usize];
        let mut acc: f32 = (-(r as isize)..=r as isize).map(at).sum();
        for x in 0..width {
            dst[y * width + x] = acc * norm;
            acc += at(x as isize + r as isize + 1) - at(x as isize - r as isize);
        }
    }
}

fn box_blur_cols(src: &[f32], dst: &mut [f32], height: usize, width: usize, r: usize) {
    let norm = 1.0 / (2 * r + 1) as f32;
    for x in 0..width {
        let at = |y: isize| src[y.clamp(0, height as isize - 1) as usize * width + x];
        let mut acc: f32 = (-(r as isize)..=r as isize).map(at).sum();
        for y in 0..height {
            dst[y * width + x] = acc * norm;
            acc += at(y as isize + r as isize + 1) - at(y as isize - r as isize);
        }
    }
}

/// Assigns `label` to the `count` unassigned pixels with the highest score
/// (ties to the lower pixel index).
fn claim_top(labels: &mut [Option<u8>], scores: &[f32], count: usize, label: u8) {
    let mut free: Vec<usize> = (0..labels.len()).filter(|&p| labels[p].is_none()).collect();
    free.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for &p in free.iter().take(count) {
        labels[p] = Some(label);
    }
}

fn jittered_fractions<R: Rng>(comp: &Composition, jitter: f64, rng: &mut R) -> [f64; 4] {
    let mut fr = comp.fractions();
    if jitter > 0.0 {
        for f in fr.iter_mut().take(3) {
            if *f > 0.0 {
                *f = (*f + rng.random_range(-jitter..=jitter)).max(0.0);
            }
        }
        let tissue: f64 = fr[..3].iter().sum();
        if tissue > 1.0 {
            for f in fr.iter_mut().take(3) {
                *f /= tissue;
            }
        }
        fr[3] = (1.0 - fr[..3].iter().sum::<f64>()).max(0.0);
    }
    fr
}

fn blob_scores<R: Rng>(
    labels: &[Option<u8>],
    height: usize,
    width: usize,
    count: usize,
    radius: f64,
    rng: &mut R,
) -> Vec<f32> {
    let free: Vec<usize> = (0..labels.len()).filter(|&p| labels[p].is_none()).collect();
    let mut scores = vec![f32::NEG_INFINITY; labels.len()];
    if count == 0 || free.is_empty() {
        return scores;
    }
    let area = std::f64::consts::PI * radius * radius;
    let wanted = ((count as f64 / area).ceil() as usize).max(1);
    let min_dist = 1.8 * radius;
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(wanted);
    // dart throwing; the spacing requirement is relaxed if the tissue is crowded
    let mut spacing = min_dist;
    let mut attempts = 0;
    while centers.len() < wanted {
        let p = free[rng.random_range(0..free.len())];
        let c = ((p / width) as f64, (p % width) as f64);
        if centers
            .iter()
            .all(|q| (q.0 - c.0).powi(2) + (q.1 - c.1).powi(2) >= spacing * spacing)
        {
            centers.push(c);
        }
        attempts += 1;
        if attempts % (50 * wanted) == 0 {
            spacing *= 0.8;
        }
    }
    let reach = (3.0 * radius).ceil() as isize;
    for &(cy, cx) in &centers {
        let (cy, cx) = (cy as isize, cx as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(height as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(width as isize - 1) {
                let d = (((y - cy).pow(2) + (x - cx).pow(2)) as f32).sqrt();
                let p = y as usize * width + x as usize;
                scores[p] = scores[p].max(-d);
            }
        }
    }
    scores
}

fn fiber_scores<R: Rng>(
    cfg: &GeneratorConfig,
    coherence: f64,
    rng: &mut R,
) -> Vec<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let bundle = smooth_field(rng, h, w, cfg.fiber_bundle_scale);
    let angle = smooth_field(rng, h, w, cfg.fiber_bundle_scale * 2);
    let base = rng.random_range(0.0..std::f64::consts::PI);
    let spread = cfg.fiber_orientation_spread * (1.0 - coherence);
    let phase = rng.random_range(0.0..cfg.fiber_period);
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            let theta = base + spread * (angle[p] as f64).clamp(-2.0, 2.0) / 2.0;
            let proj = x * theta.cos() + y * theta.sin() + phase;
            let stripe = (2.0 * std::f64::consts::PI * proj / cfg.fiber_period).cos();
            bundle[p] + 0.5 * stripe as f32
        })
        .collect()
}

/// Generates one slide and its exact ground-truth structure map.
///
/// Structure counts use floor semantics: cell, fiber and colloid each get
/// `⌊fraction · H · W⌋` pixels and background takes the remainder.
/// Background is placed first (smooth field), then cell blobs around
/// Poisson-disc centres, then oriented fiber stripes; colloid fills what is
/// left.
pub fn generate_slide(
    seed: u64,
    tumor_class: TumorClass,
    config: &GeneratorConfig,
) -> Result<(PolarSlide, StructureMap)> {
    config.validate()?;
    let comp = config.composition(tumor_class)?;
    let mut rng = seed::rng(seed);
    let (h, w, d) = (config.height, config.width, config.depth);
    let n = h * w;

    let fr = jittered_fractions(comp, config.composition_jitter, &mut rng);
    let floor_count = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let cell = floor_count(fr[0]);
    let fiber = floor_count(fr[1]);
    let colloid = floor_count(fr[2]).min(n - cell - fiber);
    let background = n - cell - fiber - colloid;

    let mut labels: Vec<Option<u8>> = vec![None; n];
    let bg_field = smooth_field(&mut rng, h, w, config.background_smoothness);
    claim_top(&mut labels, &bg_field, background, Structure::Background as u8);
    let blobs = blob_scores(&labels, h, w, cell, config.cell_radius, &mut rng);
    claim_top(&mut labels, &blobs, cell, Structure::Cell as u8);
    let stripes = fiber_scores(config, comp.fiber_coherence, &mut rng);
    claim_top(&mut labels, &stripes, fiber, Structure::Fiber as u8);
    let labels: Vec<u8> = labels
        .into_iter()
        .map(|l| l.unwrap_or(Structure::Colloid as u8))
        .collect();

    let mut values = vec![0.0f32; n * d];
    for ch in 0..d {
        let corr = smooth_field(&mut rng, h, w, config.correlated_scale);
        for p in 0..n {
            let s = labels[p] as usize;
            let z: f32 = rng.sample(StandardNormal);
            values[p * d + ch] = config.structure_means[s][ch]
                + config.structure_std[s][ch] * z
                + config.correlated_noise * corr[p];
        }
    }

    let slide = PolarSlide::new(format!("seed_{seed}"), tumor_class, h, w, d, values)?;
    let map = StructureMap::new(h, w, STRUCTURE_COUNT, labels)?;
    Ok((slide, map))
}
