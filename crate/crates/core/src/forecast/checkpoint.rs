//! Plain-text checkpoint format.
//!
//! ```text
//! visitflow-checkpoint 1
//! config <key> <value>            (one line per hyper-parameter)
//! graph_fingerprint <hex>
//! feature <name>                  (one per input feature)
//! node <id> <lat> <lon>
//! edge <from-index> <to-index> <weight>
//! norm <min> <max>                (node-major, one per node and feature)
//! loss <epoch> <mse>
//! param <name> <rows> <cols>
//! <values, whitespace separated>
//! ```
//!
//! Floats are written with 17 significant digits so a reload reproduces
//! every value bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use super::model::{BiTransGcn, BiTransGcnConfig};
use super::train::{Checkpoint, Normalization};
use crate::error::{Error, Result};
use crate::graph::{Edge, GraphNode, SpatialGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "visitflow-checkpoint";
const VERSION: u32 = 1;

fn num<T: Scalar>(v: T) -> String {
    format!("{:.16e}", v.as_f64())
}

fn parse_num<T: Scalar>(s: &str, line: usize) -> Result<T> {
    s.parse::<f64>()
        .map(T::lit)
        .map_err(|_| Error::Format(format!("line {line}: `{s}` is not a number")))
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Format(format!("{what} `{s}` must be non-empty without whitespace")));
    }
    Ok(())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        let w = &mut out;
        writeln!(w, "{MAGIC} {VERSION}").unwrap();
        for (k, v) in self.model.config().to_pairs() {
            writeln!(w, "config {k} {v}").unwrap();
        }
        writeln!(w, "graph_fingerprint {}", self.model.fingerprint()).unwrap();
        for f in &self.feature_names {
            check_token(f, "feature name")?;
            writeln!(w, "feature {f}").unwrap();
        }
        let graph = self.model.graph();
        for node in graph.nodes() {
            check_token(&node.id, "node id")?;
            writeln!(w, "node {} {} {}", node.id, num(node.latitude), num(node.longitude)).unwrap();
        }
        for e in graph.edges() {
            writeln!(w, "edge {} {} {}", e.from, e.to, num(e.weight)).unwrap();
        }
        for (lo, hi) in self.normalization.min.iter().zip(&self.normalization.max) {
            writeln!(w, "norm {} {}", num(*lo), num(*hi)).unwrap();
        }
        for (epoch, l) in self.loss_curve.iter().enumerate() {
            writeln!(w, "loss {} {}", epoch + 1, num(*l)).unwrap();
        }
        for p in self.model.params().iter() {
            let (r, c) = (p.value.rows(), p.value.cols());
            writeln!(w, "param {} {r} {c}", p.name).unwrap();
            let vals: Vec<String> = p.value.data().iter().map(|v| num(*v)).collect();
            writeln!(w, "{}", vals.join(" ")).unwrap();
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim() == format!("{MAGIC} {VERSION}") => {}
            Some((_, l)) => return Err(Error::Format(format!("unsupported checkpoint header `{l}`"))),
            None => return Err(Error::Format("empty checkpoint".into())),
        }
        let mut config = BiTransGcnConfig::default();
        let mut fingerprint = None;
        let mut features = Vec::new();
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let (mut min, mut max) = (Vec::new(), Vec::new());
        let mut loss_curve = Vec::new();
        let mut params: Vec<(String, Tensor<T>)> = Vec::new();

        while let Some((ln, line)) = lines.next() {
            let tok: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("line {ln}: malformed `{line}`"));
            match tok.first().copied() {
                None => continue,
                Some("config") if tok.len() == 3 => config.set(tok[1], tok[2])?,
                Some("graph_fingerprint") if tok.len() == 2 => fingerprint = Some(tok[1].to_string()),
                Some("feature") if tok.len() == 2 => features.push(tok[1].to_string()),
                Some("node") if tok.len() == 4 => nodes.push(GraphNode::new(
                    tok[1],
                    parse_num(tok[2], ln)?,
                    parse_num(tok[3], ln)?,
                )),
                Some("edge") if tok.len() == 4 => edges.push(Edge {
                    from: tok[1].parse().map_err(|_| bad())?,
                    to: tok[2].parse().map_err(|_| bad())?,
                    weight: parse_num(tok[3], ln)?,
                }),
                Some("norm") if tok.len() == 3 => {
                    min.push(parse_num(tok[1], ln)?);
                    max.push(parse_num(tok[2], ln)?);
                }
                Some("loss") if tok.len() == 3 => loss_curve.push(parse_num(tok[2], ln)?),
                Some("param") if tok.len() == 4 => {
                    let r: usize = tok[2].parse().map_err(|_| bad())?;
                    let c: usize = tok[3].parse().map_err(|_| bad())?;
                    let (_, body) = lines
                        .next()
                        .ok_or_else(|| Error::Format(format!("line {ln}: parameter `{}` has no values", tok[1])))?;
                    let values = body
                        .split_whitespace()
                        .map(|s| parse_num(s, ln + 1))
                        .collect::<Result<Vec<T>>>()?;
                    let value = Tensor::new(vec![r, c], values)
                        .map_err(|_| Error::Format(format!("line {}: wrong value count for `{}`", ln + 1, tok[1])))?;
                    params.push((tok[1].to_string(), value));
                }
                _ => return Err(bad()),
            }
        }

        let graph = SpatialGraph::new(nodes, edges)?;
        let stored = fingerprint.ok_or_else(|| Error::Format("checkpoint lacks graph_fingerprint".into()))?;
        let mut model = BiTransGcn::assemble(config, graph, features.len())?;
        if model.fingerprint() != stored {
            return Err(Error::Fingerprint(format!(
                "stored {stored} but graph hashes to {}",
                model.fingerprint()
            )));
        }
        if min.len() != model.graph().len() * features.len() {
            return Err(Error::Format(format!(
                "expected {} normalization rows, found {}",
                model.graph().len() * features.len(),
                min.len()
            )));
        }
        let store = model.params_mut();
        if params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model declares {}",
                params.len(),
                store.len()
            )));
        }
        for (name, value) in params {
            let id = store
                .id_of(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            store.set_value(id, value)?;
        }
        Ok(Checkpoint {
            model,
            normalization: Normalization {
                min,
                max,
                features: features.len(),
            },
            feature_names: features,
            loss_curve,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// `epoch,mse` CSV of the training loss.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,mse\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            writeln!(out, "{},{}", i + 1, num(*l)).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::data::FlowTensor;
    use crate::forecast::train::train;
    use crate::graph::build_knn_graph;

    fn trained() -> (Checkpoint<f64>, FlowTensor<f64>) {
        let n = 4;
        let nodes = (0..n)
            .map(|i| GraphNode::new(format!("u{i}"), 35.0 + i as f64 * 0.37, -90.0 - i as f64 * 0.11))
            .collect();
        let graph = build_knn_graph(nodes, 2).unwrap();
        let series: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..10).map(|w| (i * 3 + w) as f64 * 1.3 + 0.1).collect())
            .collect();
        let weeks = (0..10).map(|w| format!("2022-W{:02}", w + 1)).collect();
        let data = FlowTensor::from_series((0..n).map(|i| format!("u{i}")).collect(), "visits", weeks, &series).unwrap();
        let config = BiTransGcnConfig {
            hidden: 4,
            n_heads: 2,
            history_window: 3,
            epochs: 3,
            ..Default::default()
        };
        let model = BiTransGcn::assemble(config, graph, 1).unwrap();
        (train(model, &data, 0.7).unwrap(), data)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (ck, data) = trained();
        let text = ck.to_text().unwrap();
        let back = Checkpoint::<f64>::from_text(&text).unwrap();
        assert_eq!(back.to_text().unwrap(), text);
        let a = ck.predict_next(&data).unwrap();
        let b = back.predict_next(&data).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.loss_curve, ck.loss_curve);
        assert!(ck.loss_csv().starts_with("epoch,mse\n1,"));
    }

    #[test]
    fn tampered_checkpoints_rejected() {
        let (ck, _) = trained();
        let text = ck.to_text().unwrap();
        let fp = ck.model.fingerprint().to_string();
        let tampered = text.replace(&fp, "0000000000000000");
        assert!(matches!(Checkpoint::<f64>::from_text(&tampered), Err(Error::Fingerprint(_))));
        assert!(Checkpoint::<f64>::from_text("not a checkpoint").is_err());
        let truncated: String = text.lines().take(text.lines().count() - 2).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::<f64>::from_text(&truncated).is_err());
    }
}
