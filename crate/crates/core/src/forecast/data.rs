use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense `N × C × T` array of non-negative flows, weeks oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTensor<T> {
    values: Vec<T>,
    node_ids: Vec<String>,
    feature_names: Vec<String>,
    week_labels: Vec<String>,
}

impl<T: Scalar> FlowTensor<T> {
    /// `values` is laid out node-major: index `(n·C + c)·T + t`.
    pub fn new(
        values: Vec<T>,
        node_ids: Vec<String>,
        feature_names: Vec<String>,
        week_labels: Vec<String>,
    ) -> Result<Self> {
        let (n, c, t) = (node_ids.len(), feature_names.len(), week_labels.len());
        if n == 0 || c == 0 || t == 0 {
            return Err(Error::Data(format!("flow tensor needs N, C, T > 0, got {n}×{c}×{t}")));
        }
        if values.len() != n * c * t {
            return Err(Error::dim("FlowTensor::new", &[values.len()], &[n, c, t]));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(Error::Validation(format!("flow values must be finite and ≥ 0, found {v}")));
        }
        if let Some(w) = week_labels.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "week labels must be strictly increasing: {} then {}",
                w[0], w[1]
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(id) = node_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Validation(format!("duplicate node id `{id}`")));
        }
        Ok(Self {
            values,
            node_ids,
            feature_names,
            week_labels,
        })
    }

    /// Builds a one-feature tensor from per-node series.
    pub fn from_series(
        node_ids: Vec<String>,
        feature: &str,
        week_labels: Vec<String>,
        series: &[Vec<T>],
    ) -> Result<Self> {
        let t = week_labels.len();
        if series.len() != node_ids.len() || series.iter().any(|s| s.len() != t) {
            return Err(Error::Data("every node series must cover every week".into()));
        }
        Self::new(series.concat(), node_ids, vec![feature.to_string()], week_labels)
    }

    pub fn nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn weeks(&self) -> usize {
        self.week_labels.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn week_labels(&self) -> &[String] {
        &self.week_labels
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, node: usize, feature: usize, week: usize) -> T {
        self.values[(node * self.features() + feature) * self.weeks() + week]
    }

    /// Time series of one node and feature.
    pub fn series(&self, node: usize, feature: usize) -> &[T] {
        let start = (node * self.features() + feature) * self.weeks();
        &self.values[start..start + self.weeks()]
    }

    /// Per-node values of one feature in one week.
    pub fn week_column(&self, feature: usize, week: usize) -> Vec<T> {
        (0..self.nodes()).map(|n| self.get(n, feature, week)).collect()
    }

    pub fn total(&self) -> T {
        self.values.iter().copied().sum()
    }

    /// Weeks `start .. start + len` as a new tensor.
    pub fn weeks_range(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.weeks() {
            return Err(Error::Data(format!(
                "week range {start}..{} outside 0..{}",
                start + len,
                self.weeks()
            )));
        }
        let mut values = Vec::with_capacity(self.nodes() * self.features() * len);
        for n in 0..self.nodes() {
            for c in 0..self.features() {
                values.extend_from_slice(&self.series(n, c)[start..start + len]);
            }
        }
        Ok(Self {
            values,
            node_ids: self.node_ids.clone(),
            feature_names: self.feature_names.clone(),
            week_labels: self.week_labels[start..start + len].to_vec(),
        })
    }

    /// Reorders nodes; `order[i]` is the old index of new node `i`.
    pub fn permute_nodes(&self, order: &[usize]) -> Result<Self> {
        let mut check: Vec<usize> = order.to_vec();
        check.sort_unstable();
        if check != (0..self.nodes()).collect::<Vec<_>>() {
            return Err(Error::Parameter("node order must be a permutation".into()));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for &old in order {
            for c in 0..self.features() {
                values.extend_from_slice(self.series(old, c));
            }
        }
        Ok(Self {
            values,
            node_ids: order.iter().map(|&i| self.node_ids[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            week_labels: self.week_labels.clone(),
        })
    }
}
