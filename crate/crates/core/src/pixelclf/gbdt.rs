//! Multiclass gradient-boosted regression trees with a softmax objective.
//!
//! Each round fits one tree per class to the Newton statistics of the
//! weighted softmax log-loss (`g = w (p − y)`, `h = 2 w p (1 − p)`), using
//! exact greedy split search over presorted features. Trees are grown
//! level by level; split ties go to the lower feature index and then to
//! the lower threshold, so training is fully deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Minimum hessian sum in a child.
    pub min_child_weight: f64,
    /// Minimum gain for a split.
    pub gamma: f64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            max_depth: 4,
            learning_rate: 0.2,
            lambda: 1.0,
            min_child_weight: 1.0,
            gamma: 0.0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::InvalidConfig("max_depth must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.lambda < 0.0 || self.min_child_weight < 0.0 {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive; lambda and min_child_weight non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f32]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if (x[feature] as f64) < threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub classes: usize,
    pub features: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub base_score: f64,
    /// `trees[k][r]`: the round-`r` tree for class `k`.
    pub trees: Vec<Vec<Tree>>,
    /// Weighted training log-loss before the first round and after each
    /// round.
    pub train_loss: Vec<f64>,
}

impl GbdtModel {
    pub fn rounds(&self) -> usize {
        self.trees.first().map_or(0, Vec::len)
    }

    pub fn margins(&self, x: &[f32], out: &mut [f64]) {
        for (k, trees) in self.trees.iter().enumerate() {
            out[k] = self.base_score
                + self.learning_rate * trees.iter().map(|t| t.predict(x)).sum::<f64>();
        }
    }

    /// Softmax class probabilities, `k × classes` row-major.
    pub fn predict_proba(&self, features: &[f32], width: usize) -> Result<Vec<f64>> {
        if width != self.features {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, got {width}",
                self.features
            )));
        }
        if !features.len().is_multiple_of(width) {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form rows of {width}",
                features.len()
            )));
        }
        let m = self.classes;
        let mut out = vec![0.0; features.len() / width * m];
        for (x, row) in features.chunks_exact(width).zip(out.chunks_exact_mut(m)) {
            self.margins(x, row);
            softmax_in_place(row);
        }
        Ok(out)
    }

    pub fn predict_class(&self, features: &[f32], width: usize) -> Result<Vec<usize>> {
        let p = self.predict_proba(features, width)?;
        Ok(p.chunks_exact(self.classes).map(argmax).collect())
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Per-node accumulator for one feature scan.
#[derive(Clone, Copy, Default)]
struct Scan {
    g: f64,
    h: f64,
    last: Option<f32>,
}

struct Grower<'a> {
    x: &'a [f32],
    d: usize,
    sorted: &'a [Vec<u32>],
    cfg: &'a GbdtConfig,
}

impl Grower<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.cfg.lambda)
    }

    /// Grows one tree; returns it, each sample's leaf value, and per-feature
    /// gain.
    fn grow(&self, grad: &[f64], hess: &[f64], importance: &mut [f64]) -> (Tree, Vec<f64>) {
        let n = grad.len();
        let mut nodes: Vec<Node> = vec![Node::Leaf { value: 0.0 }];
        let mut sums: Vec<(f64, f64)> = vec![(grad.iter().sum(), hess.iter().sum())];
        let mut node_of = vec![0u32; n];
        let mut frontier: Vec<usize> = vec![0];

        for _depth in 0..self.cfg.max_depth {
            if frontier.is_empty() {
                break;
            }
            let mut open = vec![false; nodes.len()];
            for &f in &frontier {
                open[f] = true;
            }
            let mut best: Vec<Option<Candidate>> = vec![None; nodes.len()];
            let mut scan = vec![Scan::default(); nodes.len()];
            for f in 0..self.d {
                scan.iter_mut().for_each(|s| *s = Scan::default());
                for &i in &self.sorted[f] {
                    let i = i as usize;
                    let node = node_of[i] as usize;
                    if !open[node] {
                        continue;
                    }
                    let v = self.x[i * self.d + f];
                    let s = &mut scan[node];
                    if let Some(last) = s.last {
                        if v > last {
                            let (g, h) = sums[node];
                            let (gl, hl) = (s.g, s.h);
                            let (gr, hr) = (g - gl, h - hl);
                            if hl >= self.cfg.min_child_weight && hr >= self.cfg.min_child_weight {
                                let gain = 0.5
                                    * (self.score(gl, hl) + self.score(gr, hr) - self.score(g, h))
                                    - self.cfg.gamma;
                                if best[node].is_none_or(|b| gain > b.gain) {
                                    best[node] = Some(Candidate {
                                        gain,
                                        feature: f,
                                        threshold: (last as f64 + v as f64) / 2.0,
                                    });
                                }
                            }
                        }
                    }
                    s.g += grad[i];
                    s.h += hess[i];
                    s.last = Some(v);
                }
            }

            let mut next = Vec::new();
            let mut children = vec![(0usize, 0usize); nodes.len()];
            for &node in &frontier {
                match best[node] {
                    Some(c) if c.gain > 0.0 => {
                        let left = nodes.len();
                        nodes.push(Node::Leaf { value: 0.0 });
                        nodes.push(Node::Leaf { value: 0.0 });
                        sums.push((0.0, 0.0));
                        sums.push((0.0, 0.0));
                        nodes[node] = Node::Split {
                            feature: c.feature,
                            threshold: c.threshold,
                            left,
                            right: left + 1,
                            gain: c.gain,
                        };
                        importance[c.feature] += c.gain;
                        children[node] = (left, left + 1);
                        next.push(left);
                        next.push(left + 1);
                    }
                    _ => {}
                }
            }
            if next.is_empty() {
                break;
            }
            for i in 0..n {
                let node = node_of[i] as usize;
                if let Node::Split {
                    feature, threshold, ..
                } = nodes[node]
                {
                    if node < children.len() && children[node].0 != 0 {
                        let child = if (self.x[i * self.d + feature] as f64) < threshold {
                            children[node].0
                        } else {
                            children[node].1
                        };
                        node_of[i] = child as u32;
                        sums[child].0 += grad[i];
                        sums[child].1 += hess[i];
                    }
                }
            }
            frontier = next;
        }

        for (node, &(g, h)) in nodes.iter_mut().zip(&sums) {
            if let Node::Leaf { value } = node {
                *value = -g / (h + self.cfg.lambda);
            }
        }
        let leaf_values = node_of
            .iter()
            .map(|&nd| match nodes[nd as usize] {
                Node::Leaf { value } => value,
                Node::Split { .. } => unreachable!("samples always end in leaves"),
            })
            .collect();
        (Tree { nodes }, leaf_values)
    }
}

fn weighted_log_loss(probs: &[f64], labels: &[usize], weights: &[f64], m: usize) -> f64 {
    let total: f64 = weights.iter().sum();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -weights[i] * probs[i * m + y].max(1e-300).ln())
        .sum::<f64>()
        / total
}

/// Sample weights from class weights, rescaled to mean one so that any
/// uniform rescaling of the class weights leaves training unchanged.
fn sample_weights(labels: &[usize], class_weights: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = labels.iter().map(|&y| class_weights[y]).collect();
    let total: f64 = raw.iter().sum();
    let scale = labels.len() as f64 / total;
    raw.iter().map(|w| w * scale).collect()
}

/// Trains a booster on `features` (`n × width`, row-major).
///
/// `class_weights[k]` scales the loss of every sample labelled `k`. Every
/// class in `0..classes` must have at least one sample.
pub fn fit(
    features: &[f32],
    width: usize,
    labels: &[usize],
    classes: usize,
    class_weights: &[f64],
    cfg: &GbdtConfig,
) -> Result<GbdtModel> {
    cfg.validate()?;
    let n = labels.len();
    if width == 0 || features.len() != n * width {
        return Err(Error::DimensionMismatch(format!(
            "{} feature values for {n} samples of width {width}",
            features.len()
        )));
    }
    if classes < 2 {
        return Err(Error::InvalidInput("boosting needs at least two classes".into()));
    }
    if class_weights.len() != classes {
        return Err(Error::DimensionMismatch(format!(
            "{} class weights for {classes} classes",
            class_weights.len()
        )));
    }
    if class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "class weights must be positive and finite: {class_weights:?}"
        )));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::InvalidInput(format!("label {y} out of range")));
        }
        counts[y] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass {
            class,
            context: " in the training set".into(),
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature value".into()));
    }

    let weights = sample_weights(labels, class_weights);
    let sorted: Vec<Vec<u32>> = (0..width)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| {
                features[a as usize * width + f]
                    .total_cmp(&features[b as usize * width + f])
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();
    let grower = Grower {
        x: features,
        d: width,
        sorted: &sorted,
        cfg,
    };

    let base_score = 0.0;
    let mut margins = vec![base_score; n * classes];
    let mut probs = margins.clone();
    let refresh = |margins: &[f64], probs: &mut [f64]| {
        probs.copy_from_slice(margins);
        for row in probs.chunks_exact_mut(classes) {
            softmax_in_place(row);
        }
    };
    refresh(&margins, &mut probs);
    let mut train_loss = vec![weighted_log_loss(&probs, labels, &weights, classes)];
    let mut trees: Vec<Vec<Tree>> = vec![Vec::with_capacity(cfg.rounds); classes];
    let mut importance = vec![0.0; width];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];

    for _round in 0..cfg.rounds {
        let mut updates = Vec::with_capacity(classes);
        for k in 0..classes {
            for i in 0..n {
                let p = probs[i * classes + k];
                let y = if labels[i] == k { 1.0 } else { 0.0 };
                grad[i] = weights[i] * (p - y);
                hess[i] = (2.0 * weights[i] * p * (1.0 - p)).max(1e-16);
            }
            let (tree, leaf_values) = grower.grow(&grad, &hess, &mut importance);
            trees[k].push(tree);
            updates.push(leaf_values);
        }
        for (k, values) in updates.iter().enumerate() {
            for i in 0..n {
                margins[i * classes + k] += cfg.learning_rate * values[i];
            }
        }
        refresh(&margins, &mut probs);
        train_loss.push(weighted_log_loss(&probs, labels, &weights, classes));
    }

    Ok(GbdtModel {
        classes,
        features: width,
        learning_rate: cfg.learning_rate,
        max_depth: cfg.max_depth,
        base_score,
        trees,
        train_loss,
    })
}

#[cfg(test)]
pub(crate) mod tests_support {
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Isotropic Gaussian blobs in two dimensions, `n_per` samples each.
    pub(crate) fn blobs(n_per: usize, centers: &[[f32; 2]], sd: f32, seed: u64) -> (Vec<f32>, Vec<usize>) {
        let mut rng = crate::seed::rng(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (k, c) in centers.iter().enumerate() {
            for _ in 0..n_per {
                x.push(c[0] + sd * rng.sample::<f32, _>(StandardNormal));
                x.push(c[1] + sd * rng.sample::<f32, _>(StandardNormal));
                y.push(k);
            }
        }
        (x, y)
    }
}
