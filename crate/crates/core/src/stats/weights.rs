use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{haversine_km, GraphNode};

/// Dense `N × N` spatial weights with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    n: usize,
    data: Vec<f64>,
    row_standardized: bool,
}

impl SpatialWeights {
    /// Validates a row-major matrix; rows are standardized on request.
    pub fn new(n: usize, data: Vec<f64>, row_standardize: bool) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::dim("SpatialWeights::new", &[data.len()], &[n, n]));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Validation(format!("weights must be finite and ≥ 0, found {v}")));
        }
        if (0..n).any(|i| data[i * n + i] != 0.0) {
            return Err(Error::Validation("weights must have a zero diagonal".into()));
        }
        let mut w = Self {
            n,
            data,
            row_standardized: false,
        };
        if row_standardize {
            w.row_standardize();
        }
        Ok(w)
    }

    /// Each unit's `k` nearest neighbours by great-circle distance (ties
    /// to the lower index), row-standardized.
    pub fn knn(coords: &[(f64, f64)], k: usize) -> Result<Self> {
        let n = coords.len();
        if k == 0 || k >= n {
            return Err(Error::Parameter(format!("k-NN weights need 0 < k < {n}, got k = {k}")));
        }
        let nodes: Vec<GraphNode<f64>> = coords
            .iter()
            .enumerate()
            .map(|(i, &(lat, lon))| GraphNode::new(i.to_string(), lat, lon))
            .collect();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (haversine_km(&nodes[i], &nodes[j]), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, j) in d.iter().take(k) {
                data[i * n + j] = 1.0;
            }
        }
        Self::new(n, data, true)
    }

    /// Rook contiguity on a `rows × cols` lattice in row-major order.
    pub fn rook_grid(rows: usize, cols: usize, row_standardize: bool) -> Result<Self> {
        let n = rows * cols;
        let mut data = vec![0.0; n * n];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if r + 1 < rows {
                    data[i * n + i + cols] = 1.0;
                    data[(i + cols) * n + i] = 1.0;
                }
                if c + 1 < cols {
                    data[i * n + i + 1] = 1.0;
                    data[(i + 1) * n + i] = 1.0;
                }
            }
        }
        Self::new(n, data, row_standardize)
    }

    /// Binary contiguity from `unit_a,unit_b` lines (header optional),
    /// symmetrized, row-standardized.
    pub fn from_contiguity(text: &str, ids: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let n = ids.len();
        let mut data = vec![0.0; n * n];
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (ln == 0 && line.contains("unit")) {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(Error::Format(format!("contiguity line {}: expected `unit_a,unit_b`", ln + 1)));
            }
            let lookup = |s: &str| {
                index
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("contiguity line {}: unknown unit `{s}`", ln + 1)))
            };
            let (a, b) = (lookup(parts[0])?, lookup(parts[1])?);
            if a == b {
                return Err(Error::Validation(format!("contiguity line {}: self-neighbour", ln + 1)));
            }
            data[a * n + b] = 1.0;
            data[b * n + a] = 1.0;
        }
        Self::new(n, data, true)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_row_standardized(&self) -> bool {
        self.row_standardized
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Non-zero `(j, w_ij)` entries of row `i`, by column.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        self.row(i).iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(j, w)| (j, *w)).collect()
    }

    /// Rows with non-zero sums are scaled to sum to one; islands stay zero.
    pub fn row_standardize(&mut self) {
        for i in 0..self.n {
            let s: f64 = self.row(i).iter().sum();
            if s > 0.0 {
                for v in &mut self.data[i * self.n..(i + 1) * self.n] {
                    *v /= s;
                }
            }
        }
        self.row_standardized = true;
    }

    /// Sum of all weights.
    pub fn s0(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Spatial lag `W z`.
    pub fn lag(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(z).map(|(w, v)| w * v).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rook_grid_structure() {
        let w = SpatialWeights::rook_grid(2, 2, false).unwrap();
        assert_eq!(w.neighbors(0), vec![(1, 1.0), (2, 1.0)]);
        assert_eq!(w.s0(), 8.0);
        let w = SpatialWeights::rook_grid(3, 3, true).unwrap();
        assert_eq!(w.neighbors(4).len(), 4);
        for i in 0..9 {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(w.get(i, i), 0.0);
        }
    }

    #[test]
    fn knn_rows_and_ties() {
        let coords = [(0.0, 0.0), (0.0, 1.0), (0.0, -1.0), (0.0, 3.0)];
        let w = SpatialWeights::knn(&coords, 1).unwrap();
        // node 0 is equidistant from 1 and 2: lower index wins
        assert_eq!(w.neighbors(0), vec![(1, 1.0)]);
        assert_eq!(w.neighbors(3), vec![(1, 1.0)]);
        assert!(SpatialWeights::knn(&coords, 4).is_err());
    }

    #[test]
    fn contiguity_file() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let w = SpatialWeights::from_contiguity("unit_a,unit_b\na,b\nb,c\n", &ids).unwrap();
        assert_eq!(w.neighbors(1), vec![(0, 0.5), (2, 0.5)]);
        assert!(SpatialWeights::from_contiguity("a,z\n", &ids).is_err());
        assert!(SpatialWeights::from_contiguity("a,a\n", &ids).is_err());
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(SpatialWeights::new(2, vec![1.0, 0.0, 0.0, 0.0], false).is_err());
        assert!(SpatialWeights::new(2, vec![0.0, -1.0, 0.0, 0.0], false).is_err());
        assert!(SpatialWeights::new(2, vec![0.0; 3], false).is_err());
    }
}
