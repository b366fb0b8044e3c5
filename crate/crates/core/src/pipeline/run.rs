use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::aggregate::{aggregate, parse_crosswalk, SparsityReport};
use super::config::{AttributeTarget, RunConfig, WeightsScheme};
use super::ingest::{ingest, IngestReport};
use super::socio::{read_socio, SocioRow, COMPOSITES};
use super::synth::{generate_synthetic, SynthConfig};
use crate::attribution::{
    attribution_csv, geoshapley_exact, geoshapley_kernel, importance_csv, summarize_importance, BackgroundData,
    FeatureSchema, Ridge,
};
use crate::error::{Error, Result};
use crate::forecast::{
    evaluate, holdout, rate_of_change, train, BiTransGcn, Checkpoint, FlowTensor, Holdout, METRIC_HEADER,
};
use crate::graph::{build_knn_graph, GraphNode, SpatialGraph};
use crate::stats::{kmeans, level_bins, local_bivariate_moran, normalize_columns, spatial_csv, SpatialWeights};

pub const RUN_CONFIG: &str = "run_config.txt";
pub const MANIFEST: &str = "manifest.txt";
pub const CHECKPOINT: &str = "model/checkpoint.txt";
pub const METRICS: &str = "forecast/metrics.csv";
pub const RATE_OF_CHANGE: &str = "forecast/rate_of_change.csv";
pub const CLUSTER_LEVELS: &str = "spatial/cluster_levels.csv";
pub const MORAN: &str = "spatial/moran.csv";
pub const IMPORTANCE: &str = "attribution/importance.csv";

/// Files collated by `report`, with their names inside `report/`.
pub const REPORT_FILES: [(&str, &str); 5] = [
    (METRICS, "metrics.csv"),
    (RATE_OF_CHANGE, "rate_of_change.csv"),
    (CLUSTER_LEVELS, "cluster_levels.csv"),
    (MORAN, "moran.csv"),
    (IMPORTANCE, "importance.csv"),
];

/// A run directory and its configuration. Inputs are copied under
/// `inputs/` so the directory is self-contained.
#[derive(Debug, Clone)]
pub struct Run {
    pub root: PathBuf,
    pub config: RunConfig,
}

fn write(root: &Path, rel: &str, contents: &str) -> Result<()> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

fn read(root: &Path, rel: &str) -> Result<String> {
    let path = root.join(rel);
    std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Per-unit panel for the configured industry and level.
#[derive(Debug, Clone)]
pub struct Panel {
    pub tensor: FlowTensor<f64>,
    pub centroids: Vec<(f64, f64)>,
    pub sparsity: SparsityReport,
    pub ingest: IngestReport,
}

impl Run {
    /// Loads `config` (or the run directory's saved config, or defaults),
    /// applies overrides, copies inputs into the run directory and saves the
    /// resulting config there.
    pub fn open<S: AsRef<str>>(root: &Path, config: Option<&Path>, overrides: &[S]) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let saved = root.join(RUN_CONFIG);
        let mut cfg = match config {
            Some(p) => RunConfig::load(p)?,
            None if saved.is_file() => RunConfig::load(&saved)?,
            None => RunConfig {
                base_dir: root.to_path_buf(),
                ..RunConfig::default()
            },
        };
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        let mut run = Self {
            root: root.to_path_buf(),
            config: cfg,
        };
        run.import_inputs()?;
        run.save_config()?;
        Ok(run)
    }

    fn import_inputs(&mut self) -> Result<()> {
        let names = ["flows.csv", "socio.csv", "crosswalk.csv", "contiguity.csv"];
        let root = self.root.clone();
        let cfg = &mut self.config;
        let base = cfg.base_dir.clone();
        let slots = [&mut cfg.flows, &mut cfg.socio, &mut cfg.crosswalk, &mut cfg.contiguity];
        for (slot, name) in slots.into_iter().zip(names) {
            let Some(p) = slot.as_ref() else { continue };
            let src = if Path::new(p).is_absolute() { PathBuf::from(p) } else { base.join(p) };
            let rel = format!("inputs/{name}");
            let dst = root.join(&rel);
            let same = match (src.canonicalize(), dst.canonicalize()) {
                (Ok(a), Ok(b)) => a == b,
                _ => false,
            };
            if !same {
                std::fs::create_dir_all(root.join("inputs")).map_err(|e| Error::io(&root, e))?;
                std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
            }
            *slot = Some(rel);
        }
        cfg.base_dir = root;
        Ok(())
    }

    pub fn save_config(&self) -> Result<()> {
        write(&self.root, RUN_CONFIG, &self.config.to_text())
    }

    fn input(&self, slot: &Option<String>, key: &str) -> Result<PathBuf> {
        slot.as_ref()
            .map(|p| self.config.resolve(p))
            .ok_or_else(|| Error::Parameter(format!("no `{key}` input configured (set {key} = <path> or run synth)")))
    }

    /// Ingests and aggregates the flow file in memory.
    pub fn panel(&self) -> Result<Panel> {
        let report = ingest(&self.input(&self.config.flows, "flows")?)?;
        let crosswalk = match &self.config.crosswalk {
            Some(p) => {
                let path = self.config.resolve(p);
                Some(parse_crosswalk(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?)
            }
            None => None,
        };
        let agg = aggregate(&report.accepted, self.config.level, self.config.industry, crosswalk.as_ref())?;
        Ok(Panel {
            tensor: agg.tensor,
            centroids: agg.centroids,
            sparsity: agg.sparsity,
            ingest: report,
        })
    }

    fn graph(&self, panel: &Panel) -> Result<SpatialGraph<f64>> {
        let nodes: Vec<GraphNode<f64>> = panel
            .tensor
            .node_ids()
            .iter()
            .zip(&panel.centroids)
            .map(|(id, &(lat, lon))| GraphNode::new(id.clone(), lat, lon))
            .collect();
        match self.config.weights {
            WeightsScheme::Knn => build_knn_graph(nodes, self.config.knn.min(panel.tensor.nodes() - 1).max(1)),
            WeightsScheme::Contiguity => SpatialGraph::read_edge_file(&self.input(&self.config.contiguity, "contiguity")?, nodes),
        }
    }

    fn spatial_weights(&self, panel: &Panel) -> Result<SpatialWeights> {
        match self.config.weights {
            WeightsScheme::Knn => {
                SpatialWeights::knn(&panel.centroids, self.config.knn.min(panel.tensor.nodes() - 1).max(1))
            }
            WeightsScheme::Contiguity => {
                let g = self.graph(panel)?;
                let n = g.len();
                let mut data = vec![0.0; n * n];
                for e in g.edges() {
                    if e.from != e.to {
                        data[e.from * n + e.to] = 1.0;
                    }
                }
                SpatialWeights::new(n, data, true)
            }
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<f64>> {
        let path = self.root.join(CHECKPOINT);
        if !path.is_file() {
            return Err(Error::Data(format!("no checkpoint found at {CHECKPOINT}; run `train` first")));
        }
        Checkpoint::load(&path)
    }

    fn socio(&self, panel: &Panel) -> Result<Vec<SocioRow>> {
        let rows = read_socio(&self.input(&self.config.socio, "socio")?, self.config.normalize_socio)?;
        panel
            .tensor
            .node_ids()
            .iter()
            .map(|id| {
                rows.iter()
                    .find(|r| &r.unit_id == id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("unit `{id}` has no socioeconomic row")))
            })
            .collect()
    }

    /// Next-week forecast per unit and the last observed week.
    fn forecast(&self, panel: &Panel) -> Result<(Vec<f64>, Vec<f64>)> {
        let ck = self.checkpoint()?;
        let next = ck.predict_next(&panel.tensor)?;
        let last = panel.tensor.week_column(crate::forecast::TARGET_FEATURE, panel.tensor.weeks() - 1);
        Ok((last, next))
    }

    /// Writes `manifest.txt`: config echo, input fingerprints, seeds and a
    /// hash of every other file in the run directory.
    pub fn write_manifest(&self) -> Result<()> {
        let mut m = String::from("format visitflow-run 1\n");
        for line in self.config.to_text().lines() {
            writeln!(m, "config {line}").unwrap();
        }
        for (key, slot) in [
            ("flows", &self.config.flows),
            ("socio", &self.config.socio),
            ("crosswalk", &self.config.crosswalk),
            ("contiguity", &self.config.contiguity),
        ] {
            if let Some(p) = slot {
                let path = self.config.resolve(p);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(m, "input {key} {p} sha256:{}", sha256_hex(&bytes)).unwrap();
            }
        }
        let seed = self.config.model.seed;
        writeln!(m, "seed model_init chacha8 {seed}").unwrap();
        writeln!(m, "seed shuffle chacha8 {seed} stream 1").unwrap();
        writeln!(m, "seed dropout chacha8 {seed} stream 2").unwrap();
        writeln!(m, "seed permutations chacha8 {seed}").unwrap();
        writeln!(m, "seed background chacha8 {seed}").unwrap();
        let mut files = Vec::new();
        list_files(&self.root, &self.root, &mut files)?;
        files.sort();
        for rel in files.iter().filter(|f| f.as_str() != MANIFEST) {
            let path = self.root.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(m, "file {rel} sha256:{}", sha256_hex(&bytes)).unwrap();
        }
        write(&self.root, MANIFEST, &m)
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("inside root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}

pub fn synth(run: &mut Run, synth: &SynthConfig) -> Result<String> {
    let out = generate_synthetic(synth)?;
    write(&run.root, "inputs/flows.csv", &out.flows_csv)?;
    write(&run.root, "inputs/socio.csv", &out.socio_csv)?;
    write(&run.root, "inputs/synth_manifest.txt", &out.manifest.to_text())?;
    run.config.flows = Some("inputs/flows.csv".into());
    run.config.socio = Some("inputs/socio.csv".into());
    run.save_config()?;
    run.write_manifest()?;
    let rows = out.flows_csv.lines().count() - 1;
    Ok(format!(
        "synth: {} units x {} weeks, {rows} flow rows (seed {})",
        synth.units, synth.weeks, synth.seed
    ))
}

pub fn ingest_cmd(run: &Run) -> Result<String> {
    let p = run.panel()?;
    let t = &p.tensor;
    let mut summary = p.ingest.summary();
    writeln!(summary, "industry {}", run.config.industry).unwrap();
    writeln!(summary, "level {}", run.config.level).unwrap();
    writeln!(summary, "units {}\nweeks {}", t.nodes(), t.weeks()).unwrap();
    writeln!(summary, "sparsity {}", p.sparsity).unwrap();
    writeln!(summary, "total_visits {}", t.total()).unwrap();
    write(&run.root, "ingest/summary.txt", &summary)?;
    write(&run.root, "ingest/rejections.csv", &p.ingest.rejections_csv())?;
    let mut panel = String::from("unit_id,week,visits\n");
    for (i, id) in t.node_ids().iter().enumerate() {
        for (w, label) in t.week_labels().iter().enumerate() {
            writeln!(panel, "{id},{label},{}", t.get(i, 0, w)).unwrap();
        }
    }
    write(&run.root, "ingest/panel.csv", &panel)?;
    let mut units = String::from("unit_id,lat,lon\n");
    for (id, (lat, lon)) in t.node_ids().iter().zip(&p.centroids) {
        writeln!(units, "{id},{lat:.6},{lon:.6}").unwrap();
    }
    write(&run.root, "ingest/units.csv", &units)?;
    run.write_manifest()?;
    Ok(format!(
        "ingest: {} rows, {} accepted, {} rejected; {} units x {} weeks ({})",
        p.ingest.rows(),
        p.ingest.accepted.len(),
        p.ingest.rejected.len(),
        t.nodes(),
        t.weeks(),
        p.sparsity
    ))
}

pub fn train_cmd(run: &Run) -> Result<String> {
    let panel = run.panel()?;
    let graph = run.graph(&panel)?;
    write(&run.root, "model/graph.csv", &graph.to_edge_file())?;
    let model = BiTransGcn::assemble(run.config.model.clone(), graph, panel.tensor.features())?;
    let ck = train(model, &panel.tensor, run.config.split_ratio)?;
    ck.save(&run.root.join(CHECKPOINT))?;
    write(&run.root, "model/loss_curve.csv", &ck.loss_csv())?;
    run.write_manifest()?;
    Ok(format!(
        "train: {} epochs on {} units, final training MSE {:.6e}",
        ck.loss_curve.len(),
        panel.tensor.nodes(),
        ck.loss_curve.last().copied().unwrap_or(f64::NAN)
    ))
}

fn holdout_for(run: &Run, panel: &Panel) -> Result<Holdout<f64>> {
    holdout(&run.checkpoint()?, &panel.tensor, run.config.split_ratio)
}

pub fn predict_cmd(run: &Run) -> Result<String> {
    let panel = run.panel()?;
    let h = holdout_for(run, &panel)?;
    let mut out = String::from("unit_id,week,predicted,baseline,observed\n");
    for (w, label) in h.week_labels.iter().enumerate() {
        for (i, id) in h.node_ids.iter().enumerate() {
            writeln!(out, "{id},{label},{:.6},{:.6},{}", h.predicted[w][i], h.baseline[w][i], h.truth[w][i]).unwrap();
        }
    }
    write(&run.root, "forecast/holdout.csv", &out)?;
    let (_, next) = run.forecast(&panel)?;
    let mut out = String::from("unit_id,predicted\n");
    for (id, v) in panel.tensor.node_ids().iter().zip(&next) {
        writeln!(out, "{id},{v:.6}").unwrap();
    }
    write(&run.root, "forecast/next_week.csv", &out)?;
    run.write_manifest()?;
    Ok(format!(
        "predict: {} held-out weeks and a next-week forecast for {} units",
        h.week_labels.len(),
        next.len()
    ))
}

pub fn evaluate_cmd(run: &Run) -> Result<String> {
    let panel = run.panel()?;
    let h = holdout_for(run, &panel)?;
    let truth = Holdout::flat(&h.truth);
    let model = evaluate(&Holdout::flat(&h.predicted), &truth)?;
    let base = evaluate(&Holdout::flat(&h.baseline), &truth)?;
    let industry = run.config.industry;
    let mut out = format!("industry,model,{METRIC_HEADER}\n");
    writeln!(out, "{industry},bitransgcn,{}", model.csv_fields()).unwrap();
    writeln!(out, "{industry},historical_average,{}", base.csv_fields()).unwrap();
    write(&run.root, METRICS, &out)?;

    let (last, next) = run.forecast(&panel)?;
    let roc = rate_of_change(&last, &next)?;
    let mut out = String::from("unit_id,last_observed,forecast,rate_of_change_pct\n");
    for (i, id) in panel.tensor.node_ids().iter().enumerate() {
        let r = roc.per_unit[i].map(|v| format!("{v:.4}")).unwrap_or_default();
        writeln!(out, "{id},{},{:.6},{r}", last[i], next[i]).unwrap();
    }
    writeln!(out, "average,,,{:.4}", roc.average).unwrap();
    write(&run.root, RATE_OF_CHANGE, &out)?;
    run.write_manifest()?;
    Ok(format!(
        "evaluate: RMSE {:.4} (historical average {:.4}), MAE {:.4}, average next-week change {:.2}%",
        model.rmse, base.rmse, model.mae, roc.average
    ))
}

struct Clusters {
    values: Vec<f64>,
    normalized: Vec<f64>,
    levels: Vec<u8>,
    assignments: Vec<usize>,
    constant: bool,
}

fn clusters(run: &Run, panel: &Panel) -> Result<Clusters> {
    let (_, next) = run.forecast(panel)?;
    let bins = level_bins(&next)?;
    let points: Vec<Vec<f64>> = next
        .iter()
        .zip(&panel.centroids)
        .map(|(v, (lat, lon))| vec![*v, *lat, *lon])
        .collect();
    let points = normalize_columns(&points);
    let mut distinct: Vec<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    distinct.sort();
    distinct.dedup();
    let k = run.config.clusters.min(distinct.len());
    let km = kmeans(&points, k, run.config.model.seed)?;
    Ok(Clusters {
        values: next,
        normalized: bins.normalized,
        levels: bins.levels,
        assignments: km.assignments,
        constant: bins.constant,
    })
}

pub fn cluster_cmd(run: &Run) -> Result<String> {
    let panel = run.panel()?;
    let c = clusters(run, &panel)?;
    let mut out = String::from("unit_id,value,normalized,level,kmeans_cluster\n");
    for (i, id) in panel.tensor.node_ids().iter().enumerate() {
        writeln!(out, "{id},{:.6},{:.6},{},{}", c.values[i], c.normalized[i], c.levels[i], c.assignments[i]).unwrap();
    }
    write(&run.root, CLUSTER_LEVELS, &out)?;
    run.write_manifest()?;
    let k = c.assignments.iter().max().map_or(0, |m| m + 1);
    let note = if c.constant { " (constant forecast: all level 1)" } else { "" };
    Ok(format!("cluster: {} units in {k} k-means clusters and 6 levels{note}", c.values.len()))
}

pub fn moran_cmd(run: &Run) -> Result<String> {
    let panel = run.panel()?;
    let c = clusters(run, &panel)?;
    let y = match run.config.moran_variable.as_str() {
        "volume" => c.values.clone(),
        name => {
            let k = COMPOSITES.iter().position(|n| *n == name).expect("validated variable");
            run.socio(&panel)?.iter().map(|r| r.values[k]).collect()
        }
    };
    let w = run.spatial_weights(&panel)?;
    let r = local_bivariate_moran(&c.values, &y, &w, run.config.permutations, run.config.alpha, run.config.model.seed)?;
    write(
        &run.root,
        MORAN,
        &spatial_csv(panel.tensor.node_ids(), &c.values, &c.levels, &c.assignments, &r.local)?,
    )?;
    let mut s = String::from("statistic,expectation,z_score,pseudo_p,permutations,x,y\n");
    writeln!(
        s,
        "{:.8},{:.8},{:.6},{:.6},{},forecast_volume,{}",
        r.statistic, r.expectation, r.z_score, r.pseudo_p, r.permutations, run.config.moran_variable
    )
    .unwrap();
    write(&run.root, "spatial/moran_global.csv", &s)?;
    run.write_manifest()?;
    let hh = r.local.iter().filter(|u| u.class.to_string() == "HH").count();
    Ok(format!(
        "moran: I = {:.4} (E = {:.4}, pseudo-p {:.4}), {hh} HH units",
        r.statistic, r.expectation, r.pseudo_p
    ))
}

/// Per-unit attribution target and the units it is defined for.
fn attribution_target(run: &Run, panel: &Panel) -> Result<Vec<Option<f64>>> {
    match run.config.attribute_target {
        AttributeTarget::Predicted => {
            let (last, next) = run.forecast(panel)?;
            Ok(rate_of_change(&last, &next)?.per_unit)
        }
        AttributeTarget::Observed => {
            let t = &panel.tensor;
            Ok((0..t.nodes())
                .map(|i| {
                    let s = t.series(i, crate::forecast::TARGET_FEATURE);
                    let changes: Vec<f64> = s
                        .windows(2)
                        .filter(|w| w[0] > 0.0)
                        .map(|w| 100.0 * (w[1] - w[0]) / w[0])
                        .collect();
                    (!changes.is_empty()).then(|| changes.iter().sum::<f64>() / changes.len() as f64)
                })
                .collect())
        }
    }
}

/// Fits the ridge surrogate and decomposes every unit's prediction.
pub fn attribute_cmd(run: &Run) -> Result<String> {
    let panel = run.panel()?;
    let socio = run.socio(&panel)?;
    let target = attribution_target(run, &panel)?;
    let mut ids = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for ((id, row), t) in panel.tensor.node_ids().iter().zip(&socio).zip(&target) {
        if let Some(t) = t {
            ids.push(id.clone());
            let mut features = row.values.to_vec();
            features.extend([row.lat, row.lon]);
            x.push(features);
            y.push(*t);
        }
    }
    if ids.len() < 2 {
        return Err(Error::Data("attribution needs at least two units with a defined target".into()));
    }
    let ridge = Ridge::fit(&x, &y, run.config.ridge_lambda)?;
    let mut names: Vec<String> = COMPOSITES.iter().map(|s| s.to_string()).collect();
    names.extend(["lat".to_string(), "lon".to_string()]);
    let schema = FeatureSchema::new(names, vec![6, 7])?;
    let seed = run.config.model.seed;
    let bg = BackgroundData::subsample(x.clone(), run.config.background_rows, seed)?;
    let decompositions = x
        .iter()
        .map(|row| match run.config.kernel_samples {
            0 => geoshapley_exact(&ridge, row, &schema, &bg),
            s => geoshapley_kernel(&ridge, row, &schema, &bg, s, seed),
        })
        .collect::<Result<Vec<_>>>()?;
    write(&run.root, "attribution/geoshapley.csv", &attribution_csv(&ids, &decompositions, &schema)?)?;
    let importance = summarize_importance(&decompositions, &schema)?;
    write(&run.root, IMPORTANCE, &importance_csv(&importance))?;
    let mut coef = String::from("term,value\n");
    writeln!(coef, "intercept,{:.10e}", ridge.intercept).unwrap();
    for (n, c) in schema.names().iter().zip(&ridge.coefficients) {
        writeln!(coef, "{n},{c:.10e}").unwrap();
    }
    write(&run.root, "attribution/ridge.csv", &coef)?;
    run.write_manifest()?;
    Ok(format!(
        "attribute: {} units, top components {}",
        ids.len(),
        importance.iter().take(3).map(|r| r.component.as_str()).collect::<Vec<_>>().join(", ")
    ))
}

/// Collates the five result tables into `report/` and writes `report.txt`.
pub fn report_cmd(run: &Run) -> Result<String> {
    let missing: Vec<&str> = REPORT_FILES
        .iter()
        .map(|(src, _)| *src)
        .filter(|src| !run.root.join(src).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "report needs {} (run evaluate, cluster, moran and attribute first)",
            missing.join(", ")
        )));
    }
    let dir = run.root.join("report");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut text = format!("visitflow report\nindustry {}\nlevel {}\n", run.config.industry, run.config.level);
    for (src, name) in REPORT_FILES {
        let body = read(&run.root, src)?;
        write(&run.root, &format!("report/{name}"), &body)?;
        writeln!(text, "\n[{name}]\n{}", body.trim_end()).unwrap();
    }
    write(&run.root, "report.txt", &text)?;
    run.write_manifest()?;
    Ok(format!("report: {} tables in report/, summary in report.txt", REPORT_FILES.len()))
}
