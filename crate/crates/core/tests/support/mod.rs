//! Exact-arithmetic reference implementations used by the acceptance tests.

use num_rational::Rational64;

pub type Q = Rational64;

/// Confident-learning quantities computed directly from their definitions
/// over rationals.
#[derive(Debug)]
pub struct Reference {
    pub thresholds: Vec<Q>,
    pub confusion: Vec<Vec<usize>>,
    pub joint: Option<Vec<Vec<Q>>>,
    pub pruned: Option<Vec<usize>>,
    pub weights: Option<Vec<Q>>,
}

pub fn reference_clean(probs: &[Vec<Q>], labels: &[usize], m: usize) -> Reference {
    let n = labels.len();
    let size = |j: usize| labels.iter().filter(|&&l| l == j).count();

    let thresholds: Vec<Q> = (0..m)
        .map(|j| {
            let s: Q = (0..n).filter(|&x| labels[x] == j).map(|x| probs[x][j]).sum();
            s / Q::from_integer(size(j) as i64)
        })
        .collect();

    let mut confusion = vec![vec![0usize; m]; m];
    for x in 0..n {
        let reached: Vec<usize> = (0..m).filter(|&l| probs[x][l] >= thresholds[l]).collect();
        if reached.is_empty() {
            continue;
        }
        let top = reached.iter().map(|&l| probs[x][l]).max().unwrap();
        let j = *reached.iter().find(|&&l| probs[x][l] == top).unwrap();
        confusion[labels[x]][j] += 1;
    }
    if confusion.iter().flatten().all(|&c| c == 0) {
        return Reference {
            thresholds,
            confusion,
            joint: None,
            pruned: None,
            weights: None,
        };
    }

    let mut joint: Vec<Vec<Q>> = (0..m)
        .map(|i| {
            let row_total: usize = confusion[i].iter().sum();
            (0..m)
                .map(|j| {
                    if row_total == 0 {
                        Q::from_integer(0)
                    } else {
                        Q::new(confusion[i][j] as i64, row_total as i64) * Q::from_integer(size(i) as i64)
                    }
                })
                .collect()
        })
        .collect();
    let total: Q = joint.iter().flatten().copied().sum();
    for v in joint.iter_mut().flatten() {
        *v /= total;
    }

    let mut pruned = Vec::new();
    for i in 0..m {
        let off: Q = (0..m).filter(|&j| j != i).map(|j| joint[i][j]).sum();
        let count = (Q::from_integer(n as i64) * off).floor().to_integer() as usize;
        let mut members: Vec<usize> = (0..n).filter(|&x| labels[x] == i).collect();
        members.sort_by(|&a, &b| probs[a][i].cmp(&probs[b][i]).then(a.cmp(&b)));
        pruned.extend(members.into_iter().take(count));
    }
    pruned.sort_unstable();

    let weights = (0..m)
        .map(|i| {
            let prior: Q = (0..m).map(|r| joint[r][i]).sum();
            (joint[i][i] != Q::from_integer(0)).then(|| prior / joint[i][i])
        })
        .collect::<Option<Vec<Q>>>();

    Reference {
        thresholds,
        confusion,
        joint: Some(joint),
        pruned: Some(pruned),
        weights,
    }
}

/// Area under the ROC curve by counting ordered positive/negative pairs,
/// ties counting one half.
pub fn pair_auc(scores: &[Q], labels: &[bool]) -> Option<Q> {
    let pos: Vec<Q> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<Q> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut twice = 0i64;
    for p in &pos {
        for q in &neg {
            twice += match p.cmp(q) {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    Some(Q::new(twice, 2 * (pos.len() * neg.len()) as i64))
}

/// Nearest `f64` to a rational whose numerator and denominator fit in 53
/// bits: one correctly rounded division.
pub fn to_f64(q: Q) -> f64 {
    let (n, d) = (*q.numer(), *q.denom());
    assert!(n.unsigned_abs() < 1 << 53 && d < 1 << 53);
    n as f64 / d as f64
}

/// The exact value of a positive normal `f64` whose exponent keeps the
/// denominator within 62 bits.
pub fn exact(x: f64) -> Q {
    assert!(x.is_normal() && x > 0.0);
    let bits = x.to_bits();
    let mantissa = (bits & ((1 << 52) - 1)) | (1 << 52);
    let exponent = ((bits >> 52) & 0x7ff) as i32 - 1075;
    assert!((-62..=0).contains(&exponent));
    Q::new(mantissa as i64, 1i64 << -exponent)
}
