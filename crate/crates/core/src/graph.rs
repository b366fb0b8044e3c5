//! Spatial graphs and graph-convolution layers.
//!
//! A [`SpatialGraph`] stores nodes with coordinates and a symmetric weighted
//! edge list. [`normalize_symmetric`] turns it into the dense propagation
//! matrix `D̂^{-1/2}(A + I)D̂^{-1/2}` used by [`gcn_forward`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{glorot_uniform, ParamId, ParamStore, Tape, Tensor, Var};

const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode<T> {
    pub id: String,
    pub latitude: T,
    pub longitude: T,
}

impl<T: Scalar> GraphNode<T> {
    pub fn new(id: impl Into<String>, latitude: T, longitude: T) -> Self {
        Self {
            id: id.into(),
            latitude,
            longitude,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge<T> {
    pub from: usize,
    pub to: usize,
    pub weight: T,
}

/// Undirected weighted graph over spatial units, stored as a symmetric
/// directed edge list sorted by `(from, to)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph<T> {
    nodes: Vec<GraphNode<T>>,
    edges: Vec<Edge<T>>,
}

/// Great-circle distance in kilometres.
pub fn haversine_km<T: Scalar>(a: &GraphNode<T>, b: &GraphNode<T>) -> f64 {
    let (lat1, lon1) = (a.latitude.as_f64().to_radians(), a.longitude.as_f64().to_radians());
    let (lat2, lon2) = (b.latitude.as_f64().to_radians(), b.longitude.as_f64().to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

fn check_nodes<T: Scalar>(nodes: &[GraphNode<T>]) -> Result<()> {
    let mut seen = HashSet::new();
    for n in nodes {
        if !seen.insert(n.id.as_str()) {
            return Err(Error::Validation(format!("duplicate node id `{}`", n.id)));
        }
        if !n.latitude.is_finite() || !n.longitude.is_finite() {
            return Err(Error::Validation(format!("node `{}` has non-finite coordinates", n.id)));
        }
    }
    Ok(())
}

impl<T: Scalar> SpatialGraph<T> {
    /// Builds a graph from an edge list. Edges given in one direction only
    /// are mirrored; conflicting weights for the two directions, duplicate
    /// pairs, self-loops and out-of-range endpoints are rejected.
    pub fn new(nodes: Vec<GraphNode<T>>, edges: Vec<Edge<T>>) -> Result<Self> {
        check_nodes(&nodes)?;
        let n = nodes.len();
        let mut map: BTreeMap<(usize, usize), T> = BTreeMap::new();
        for e in &edges {
            if e.from >= n || e.to >= n {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) out of range for {n} nodes",
                    e.from, e.to
                )));
            }
            if e.from == e.to {
                return Err(Error::Validation(format!("self-loop on node {}", e.from)));
            }
            if map.insert((e.from, e.to), e.weight).is_some() {
                return Err(Error::Validation(format!("duplicate edge ({}, {})", e.from, e.to)));
            }
        }
        let directed: Vec<_> = map.iter().map(|(&k, &w)| (k, w)).collect();
        for ((i, j), w) in directed {
            match map.get(&(j, i)) {
                Some(&w2) if w2 != w => {
                    return Err(Error::Validation(format!(
                        "asymmetric weights on ({i}, {j}): {w} vs {w2}"
                    )))
                }
                Some(_) => {}
                None => {
                    map.insert((j, i), w);
                }
            }
        }
        let edges = map
            .into_iter()
            .map(|((from, to), weight)| Edge { from, to, weight })
            .collect();
        Ok(Self { nodes, edges })
    }

    pub fn nodes(&self) -> &[GraphNode<T>] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge<T>] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.id.clone()).collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|e| e.from == i).count()
    }

    /// Dense weighted adjacency matrix `A` (no self-loops).
    pub fn adjacency(&self) -> Tensor<T> {
        let n = self.len();
        let mut a = Tensor::zeros(&[n, n]);
        for e in &self.edges {
            a.set(e.from, e.to, e.weight);
        }
        a
    }

    /// Content hash over node ids (in order), coordinates and edges.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.nodes {
            h.update(n.id.as_bytes());
            h.update([0u8]);
            h.update(n.latitude.as_f64().to_le_bytes());
            h.update(n.longitude.as_f64().to_le_bytes());
        }
        h.update([0xffu8]);
        for e in &self.edges {
            h.update((e.from as u64).to_le_bytes());
            h.update((e.to as u64).to_le_bytes());
            h.update(e.weight.as_f64().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Reads an edge file (`from_id,to_id,weight` per line, no header).
    pub fn read_edge_file(path: &Path, nodes: Vec<GraphNode<T>>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_edges(&text, nodes)
    }

    pub fn parse_edges(text: &str, nodes: Vec<GraphNode<T>>) -> Result<Self> {
        let index: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!(
                    "edge file line {}: expected `from_id,to_id,weight`",
                    lineno + 1
                )));
            }
            let lookup = |id: &str| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("edge file line {}: unknown node `{id}`", lineno + 1)))
            };
            let weight: f64 = fields[2]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("edge file line {}: bad weight `{}`", lineno + 1, fields[2])))?;
            edges.push(Edge {
                from: lookup(fields[0].trim())?,
                to: lookup(fields[1].trim())?,
                weight: T::lit(weight),
            });
        }
        Self::new(nodes, edges)
    }

    /// Renders the edge list in exchange-file form, both directions.
    pub fn to_edge_file(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            let _ = writeln!(
                out,
                "{},{},{}",
                self.nodes[e.from].id,
                self.nodes[e.to].id,
                e.weight.as_f64()
            );
        }
        out
    }
}

/// Connects each node to its `k` nearest neighbours by great-circle
/// distance, then symmetrizes by union. All weights are 1. Distance ties are
/// broken by node order.
pub fn build_knn_graph<T: Scalar>(nodes: Vec<GraphNode<T>>, k: usize) -> Result<SpatialGraph<T>> {
    check_nodes(&nodes)?;
    let n = nodes.len();
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!("k-NN needs 0 < k < N, got k = {k}, N = {n}")));
    }
    let mut pairs = BTreeMap::new();
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (haversine_km(&nodes[i], &nodes[j]), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            pairs.insert((i, j), ());
            pairs.insert((j, i), ());
        }
    }
    let edges = pairs
        .into_keys()
        .map(|(from, to)| Edge {
            from,
            to,
            weight: T::one(),
        })
        .collect();
    SpatialGraph::new(nodes, edges)
}

/// Dense `D̂^{-1/2}(A + I)D̂^{-1/2}` together with the fingerprint of the
/// graph it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency<T> {
    matrix: Tensor<T>,
    fingerprint: String,
}

impl<T: Scalar> NormalizedAdjacency<T> {
    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }
}

pub fn normalize_symmetric<T: Scalar>(graph: &SpatialGraph<T>) -> Result<NormalizedAdjacency<T>> {
    let n = graph.len();
    if n == 0 {
        return Err(Error::Validation("cannot normalize an empty graph".into()));
    }
    if let Some(e) = graph.edges.iter().find(|e| e.weight < T::zero() || !e.weight.is_finite()) {
        return Err(Error::Validation(format!(
            "edge ({}, {}) has invalid weight {}",
            e.from, e.to, e.weight
        )));
    }
    let mut a_hat = graph.adjacency();
    for i in 0..n {
        a_hat.set(i, i, a_hat.get(i, i) + T::one());
    }
    // self-loop guarantees every degree ≥ 1
    let degree: Vec<T> = (0..n).map(|i| a_hat.row(i).iter().copied().sum::<T>()).collect();
    for i in 0..n {
        for j in 0..n {
            let v = a_hat.get(i, j) / (degree[i] * degree[j]).sqrt();
            a_hat.set(i, j, v);
        }
    }
    Ok(NormalizedAdjacency {
        matrix: a_hat,
        fingerprint: graph.fingerprint(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// One graph-convolution layer `σ(Â H W)`.
#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Parameter(format!("GCN layer `{name}` needs positive widths")));
        }
        let weight = store.add(name, glorot_uniform(in_dim, out_dim, rng))?;
        Ok(Self {
            weight,
            in_dim,
            out_dim,
            activation,
        })
    }

    /// Wraps an existing parameter; its shape must be `in_dim × out_dim`.
    pub fn from_param<T: Scalar>(store: &ParamStore<T>, weight: ParamId, activation: Activation) -> Result<Self> {
        let shape = store.get(weight).value.shape();
        if shape.len() != 2 {
            return Err(Error::dim("gcn_layer", shape, &[0, 0]));
        }
        Ok(Self {
            weight,
            in_dim: shape[0],
            out_dim: shape[1],
            activation,
        })
    }
}

/// Propagates node features through one layer.
///
/// `h` has `B·N` rows: `B` stacked snapshots of the `N` graph nodes, each
/// propagated independently with the same weights.
pub fn gcn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: Var,
    norm: &NormalizedAdjacency<T>,
    layer: &GcnLayer,
) -> Result<Var> {
    let rows = tape.value(h).rows();
    if rows == 0 || rows % norm.len() != 0 {
        return Err(Error::dim("gcn_forward", tape.shape(h), norm.matrix.shape()));
    }
    let w = tape.param(store, layer.weight);
    let hw = tape.matmul(h, w)?;
    let a = tape.constant(norm.matrix.clone());
    let out = tape.block_left_matmul(a, hw)?;
    Ok(match layer.activation {
        Activation::Relu => tape.relu(out),
        Activation::Identity => out,
    })
}
