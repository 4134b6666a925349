//! Confident learning over noisy labels.
//!
//! Given out-of-sample predicted probabilities `p̂` and noisy labels `ỹ`,
//! the module estimates per-class confidence thresholds, builds the
//! confidence-gated confusion counts between noisy and latent true labels,
//! calibrates them into a joint distribution `Q[ỹ][y*]`, prunes the
//! least-confident samples of each class in the amount implied by the
//! off-diagonal mass (prune by class), and derives class weights
//! `Q_{y*}[i] / Q[i][i]` for retraining.
//!
//! Conventions used throughout:
//! - sample `x` with `ỹ = i` is counted in `C[i][j]` where `j` is the most
//!   probable class among those whose threshold `x` reaches;
//! - row `i` of `C` is calibrated by `|X_{ỹ=i}|`;
//! - fractional counts are floored and ties go to the lower index.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io;
use crate::error::{Error, Result};

/// Slack on threshold comparisons. A threshold is the mean of the very
/// probabilities it is compared against, so rounding in the mean must not
/// flip an exact tie.
const GATE_EPS: f64 = 1e-12;
/// Slack on floored counts, for the same reason.
const FLOOR_EPS: f64 = 1e-9;

/// Out-of-sample probabilities (`n × m`, row-major) and noisy labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl NoisyDataset {
    pub fn new(probs: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = labels.len();
        if classes == 0 || probs.len() != n * classes {
            return Err(Error::DimensionMismatch(format!(
                "{} probabilities for {n} samples and {classes} classes",
                probs.len()
            )));
        }
        if n < classes {
            return Err(Error::InvalidInput(format!(
                "need at least as many samples ({n}) as classes ({classes})"
            )));
        }
        for (i, row) in probs.chunks_exact(classes).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidInput(format!("row {i} has invalid probabilities")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("row {i} sums to {s}")));
            }
        }
        let mut seen = vec![false; classes];
        for &l in &labels {
            if l >= classes {
                return Err(Error::InvalidInput(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            seen[l] = true;
        }
        if let Some(class) = seen.iter().position(|s| !s) {
            return Err(Error::EmptyClass {
                class,
                context: " in the noisy labels".into(),
            });
        }
        Ok(Self {
            probs,
            labels,
            classes,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let classes = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::DimensionMismatch("ragged probability rows".into()));
        }
        Self::new(rows.concat(), labels, classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.classes];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    /// `counts[i][j] = |X̂_{ỹ=i, y*=j}|`.
    pub counts: Vec<Vec<usize>>,
    /// Sample indices behind each cell, ascending.
    pub members: Vec<Vec<Vec<usize>>>,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn column_total(&self, j: usize) -> usize {
        self.counts.iter().map(|row| row[j]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    /// `q[i][j]` estimates `p(ỹ = i, y* = j)`.
    pub q: Vec<Vec<f64>>,
    /// Column sums of `q`: the estimated true-label prior.
    pub marginal_true: Vec<f64>,
    /// `q[i][j]` as `terms[i][j] / (row_total[i] · T)`: integer
    /// `(C[i][j] · |X_i|, row_total[i])` pairs, when `q` came from counts.
    #[serde(skip)]
    terms: Option<Vec<Vec<(u64, u64)>>>,
}

impl JointDistribution {
    pub fn new(q: Vec<Vec<f64>>) -> Self {
        let m = q.len();
        let marginal_true = (0..m).map(|i| q.iter().map(|row| row[i]).sum()).collect();
        Self {
            q,
            marginal_true,
            terms: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.q.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanResult {
    pub thresholds: ThresholdVector,
    pub confusion: ConfusionCounts,
    pub joint: JointDistribution,
    pub pruned_indices: BTreeSet<usize>,
    pub class_weights: Vec<f64>,
}

/// `t_j`: mean of `p̂_j(x)` over the samples labelled `j`.
pub fn estimate_thresholds(ds: &NoisyDataset) -> ThresholdVector {
    let m = ds.classes;
    let mut sums = vec![0.0; m];
    let sizes = ds.class_sizes();
    for (i, &l) in ds.labels.iter().enumerate() {
        sums[l] += ds.row(i)[l];
    }
    ThresholdVector(
        sums.iter()
            .zip(&sizes)
            .map(|(s, &c)| s / c as f64)
            .collect(),
    )
}

/// The class a sample is attributed to: the most probable class among those
/// whose threshold it reaches (lowest index on ties), if any.
fn confident_class(row: &[f64], t: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (l, (&p, &tl)) in row.iter().zip(t).enumerate() {
        if p >= tl - GATE_EPS && best.is_none_or(|b| p > row[b]) {
            best = Some(l);
        }
    }
    best
}

pub fn build_confusion(ds: &NoisyDataset, t: &ThresholdVector) -> Result<ConfusionCounts> {
    let m = ds.classes;
    if t.0.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} thresholds for {m} classes",
            t.0.len()
        )));
    }
    let mut counts = vec![vec![0usize; m]; m];
    let mut members = vec![vec![Vec::new(); m]; m];
    for (x, &i) in ds.labels.iter().enumerate() {
        if let Some(j) = confident_class(ds.row(x), &t.0) {
            counts[i][j] += 1;
            members[i][j].push(x);
        }
    }
    Ok(ConfusionCounts { counts, members })
}

/// Calibrates `C` into `Q`: each row is normalised, scaled by the size of
/// its noisy class, and the whole matrix is normalised to sum to one.
pub fn estimate_joint(counts: &ConfusionCounts, ds: &NoisyDataset) -> Result<JointDistribution> {
    let m = ds.classes;
    if counts.counts.len() != m || counts.counts.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch(format!(
            "confusion counts are not {m}x{m}"
        )));
    }
    if counts.total() == 0 {
        return Err(Error::EmptyConfusion);
    }
    let sizes = ds.class_sizes();
    // Every non-empty row sums to its class size after scaling, so the
    // normaliser is an integer and each entry is a single exact division.
    let total: usize = counts
        .counts
        .iter()
        .zip(&sizes)
        .filter(|(row, _)| row.iter().any(|&c| c > 0))
        .map(|(_, &size)| size)
        .sum();
    let q: Vec<Vec<f64>> = counts
        .counts
        .iter()
        .zip(&sizes)
        .map(|(row, &size)| {
            let row_total: usize = row.iter().sum();
            row.iter()
                .map(|&c| {
                    if c == 0 {
                        0.0
                    } else {
                        (c * size) as f64 / (row_total * total) as f64
                    }
                })
                .collect()
        })
        .collect();
    let terms = counts
        .counts
        .iter()
        .zip(&sizes)
        .map(|(row, &size)| {
            let row_total: usize = row.iter().sum();
            row.iter().map(|&c| ((c * size) as u64, row_total as u64)).collect()
        })
        .collect();
    Ok(JointDistribution {
        terms: Some(terms),
        ..JointDistribution::new(q)
    })
}

/// Number of samples of class `i` prune-by-class removes:
/// `⌊n · Σ_{j≠i} Q[i][j]⌋`.
pub fn prune_count(n: usize, q: &JointDistribution, i: usize) -> usize {
    let off: f64 = q.q[i]
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, v)| v)
        .sum();
    (n as f64 * off + FLOOR_EPS).floor() as usize
}

/// Prune by class: for every class remove the [`prune_count`] samples with
/// the lowest self-confidence `p̂_i(x)`, ties to the lower sample index.
pub fn prune_by_class(ds: &NoisyDataset, q: &JointDistribution) -> Result<BTreeSet<usize>> {
    let m = ds.classes;
    if q.classes() != m {
        return Err(Error::DimensionMismatch(format!(
            "joint distribution has {} classes, dataset {m}",
            q.classes()
        )));
    }
    let n = ds.len();
    let mut pruned = BTreeSet::new();
    for i in 0..m {
        let mut members: Vec<usize> = (0..n).filter(|&x| ds.labels[x] == i).collect();
        let mut count = prune_count(n, q, i);
        if count > members.len() {
            log::warn!(
                "prune count {count} for class {i} exceeds its {} samples; clamping",
                members.len()
            );
            count = members.len();
        }
        members.sort_by(|&a, &b| ds.row(a)[i].total_cmp(&ds.row(b)[i]).then(a.cmp(&b)));
        pruned.extend(members.into_iter().take(count));
    }
    Ok(pruned)
}

/// Class weights `Q_{y*}[i] / Q[i][i]`, the estimate of `1 / p(ỹ=i | y*=i)`.
///
/// For a joint estimated from counts the ratio is formed as one reduced
/// integer fraction, so it is correctly rounded while its terms fit in 53
/// bits.
pub fn class_weights(q: &JointDistribution) -> Result<Vec<f64>> {
    (0..q.classes())
        .map(|i| {
            let diag = q.q[i][i];
            if diag <= 0.0 {
                return Err(Error::DegenerateClass { class: i });
            }
            Ok(match &q.terms {
                Some(terms) => exact_weight(terms, i).unwrap_or(q.marginal_true[i] / diag),
                None => q.marginal_true[i] / diag,
            })
        })
        .collect()
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `(Σ_r a[r][i] / b[r]) · b[i] / a[i][i]` over integers; the common `T`
/// cancels. `None` on overflow.
fn exact_weight(terms: &[Vec<(u64, u64)>], i: usize) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for row in terms {
        let (a, b) = (row[i].0 as u128, row[i].1 as u128);
        if a == 0 {
            continue;
        }
        num = num.checked_mul(b)?.checked_add(a.checked_mul(den)?)?;
        den = den.checked_mul(b)?;
        let g = gcd(num, den);
        (num, den) = (num / g, den / g);
    }
    let (a_ii, b_i) = (terms[i][i].0 as u128, terms[i][i].1 as u128);
    let (num, den) = (num.checked_mul(b_i)?, den.checked_mul(a_ii)?);
    let g = gcd(num, den);
    Some((num / g) as f64 / (den / g) as f64)
}

pub fn clean(ds: &NoisyDataset) -> Result<CleanResult> {
    let thresholds = estimate_thresholds(ds);
    let confusion = build_confusion(ds, &thresholds)?;
    let joint = estimate_joint(&confusion, ds)?;
    let pruned_indices = prune_by_class(ds, &joint)?;
    let class_weights = class_weights(&joint)?;
    Ok(CleanResult {
        thresholds,
        confusion,
        joint,
        pruned_indices,
        class_weights,
    })
}

/// Writes `sample_id,p_0..p_{m-1},noisy_label`.
pub fn write_probability_csv(path: &Path, ids: &[String], ds: &NoisyDataset) -> Result<()> {
    if ids.len() != ds.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} ids for {} samples",
            ids.len(),
            ds.len()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..ds.classes).map(|j| format!("p_{j}")));
    header.push("noisy_label".into());
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (x, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(ds.row(x).iter().map(|p| p.to_string()));
        rec.push(ds.labels[x].to_string());
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    io::write_bytes(path, &bytes)
}

pub fn read_probability_csv(path: &Path) -> Result<(Vec<String>, NoisyDataset)> {
    let bytes = io::read_bytes(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    let m = header.len().saturating_sub(2);
    let well_formed = m > 0
        && header.get(0) == Some("sample_id")
        && header.get(m + 1) == Some("noisy_label")
        && (0..m).all(|j| header.get(j + 1) == Some(format!("p_{j}").as_str()));
    if !well_formed {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "expected sample_id,p_0..p_{m-1},noisy_label".into(),
        });
    }
    let bad = |what: String| Error::InvalidInput(format!("{}: {what}", path.display()));
    let (mut ids, mut probs, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        ids.push(rec[0].to_string());
        for j in 0..m {
            probs.push(
                rec[j + 1]
                    .parse::<f64>()
                    .map_err(|e| bad(format!("p_{j}: {e}")))?,
            );
        }
        labels.push(
            rec[m + 1]
                .parse::<usize>()
                .map_err(|e| bad(format!("noisy_label: {e}")))?,
        );
    }
    Ok((ids, NoisyDataset::new(probs, labels, m)?))
}

/// JSON report of one cleaning run.
pub fn write_report(path: &Path, result: &CleanResult) -> Result<()> {
    #[derive(Serialize)]
    struct Report<'a> {
        thresholds: &'a [f64],
        confusion: &'a [Vec<usize>],
        joint: &'a [Vec<f64>],
        marginal_true: &'a [f64],
        pruned: Vec<usize>,
        class_weights: &'a [f64],
    }
    io::write_json(
        path,
        &Report {
            thresholds: &result.thresholds.0,
            confusion: &result.confusion.counts,
            joint: &result.joint.q,
            marginal_true: &result.joint.marginal_true,
            pruned: result.pruned_indices.iter().copied().collect(),
            class_weights: &result.class_weights,
        },
    )
}
