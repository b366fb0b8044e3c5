use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one iteration")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter().enumerate() {
        let d = sq_dist(p, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort();
    keys.dedup();
    keys.len()
}

/// Lloyd's algorithm from k-means++ seeding. Stops at an assignment
/// fixpoint or after [`MAX_ITERATIONS`]; ties go to the lower cluster id.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    let dim = points.first().map(Vec::len).unwrap_or(0);
    if points.is_empty() || dim == 0 {
        return Err(Error::Data("k-means needs at least one non-empty point".into()));
    }
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Validation("k-means points must be finite with equal dimension".into()));
    }
    let distinct = distinct_count(points);
    if k == 0 || k > distinct {
        return Err(Error::Parameter(format!(
            "k = {k} must be between 1 and the {distinct} distinct points"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("a point differs from every centroid");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centroids.push(points[pick].clone());
    }

    let mut assignments = vec![usize::MAX; points.len()];
    let mut inertia_history = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        let mut inertia = 0.0;
        for (p, a) in points.iter().zip(assignments.iter_mut()) {
            let (c, d) = nearest(p, &centroids);
            changed |= *a != c;
            *a = c;
            inertia += d;
        }
        inertia_history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia_history,
    })
}

/// Paper cluster levels, split at the midpoints of the published gaps.
pub const LEVEL_EDGES: [f64; 5] = [0.175, 0.335, 0.505, 0.675, 0.835];

/// Level 1–6 of a value already normalized to `[0, 1]`.
pub fn level_of(normalized: f64) -> u8 {
    1 + LEVEL_EDGES.iter().filter(|&&e| normalized >= e).count() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelBins {
    pub normalized: Vec<f64>,
    pub levels: Vec<u8>,
    /// Set when every input value was equal.
    pub constant: bool,
}

/// Min–max normalizes `values` and bins them into levels 1–6.
pub fn level_bins(values: &[f64]) -> Result<LevelBins> {
    if values.is_empty() {
        return Err(Error::Data("level_bins needs at least one value".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("level_bins input must be finite".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let constant = hi == lo;
    let normalized: Vec<f64> = if constant {
        vec![0.0; values.len()]
    } else {
        values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    };
    Ok(LevelBins {
        levels: normalized.iter().map(|&v| level_of(v)).collect(),
        normalized,
        constant,
    })
}

/// Min–max scales each column of `rows` to `[0, 1]` (constant columns → 0).
pub fn normalize_columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    let mut out = rows.to_vec();
    for c in 0..dim {
        let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
        for r in &mut out {
            r[c] = if hi > lo { (r[c] - lo) / (hi - lo) } else { 0.0 };
        }
    }
    out
}
