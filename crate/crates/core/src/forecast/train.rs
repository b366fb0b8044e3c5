use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::FlowTensor;
use super::model::BiTransGcn;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DropoutCtx, ParamStore, Tape, Tensor};

/// Index of the feature being forecast.
pub const TARGET_FEATURE: usize = 0;

/// Chronological sample split for a series of `weeks` weeks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitPlan {
    pub window: usize,
    pub targets: usize,
    pub train: usize,
}

impl SplitPlan {
    /// Sample `s` predicts week `window + s` from weeks `s .. s + window`.
    /// The first `⌈ratio · targets⌉` samples train, the rest test; at least
    /// one sample is always held out.
    pub fn new(weeks: usize, window: usize, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Parameter(format!("split ratio must be in (0, 1), got {ratio}")));
        }
        if weeks < window + 2 {
            return Err(Error::Data(format!(
                "need at least {} weeks for a {window}-week window, got {weeks}",
                window + 2
            )));
        }
        let targets = weeks - window;
        let train = ((ratio * targets as f64).ceil() as usize).clamp(1, targets - 1);
        Ok(Self { window, targets, train })
    }

    pub fn test(&self) -> usize {
        self.targets - self.train
    }

    /// Weeks visible to training samples (inputs and targets).
    pub fn training_weeks(&self) -> usize {
        self.window + self.train
    }

    pub fn target_week(&self, sample: usize) -> usize {
        self.window + sample
    }
}

/// Per-node, per-feature min–max scaling to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization<T> {
    /// `N × C`, row-major.
    pub min: Vec<T>,
    pub max: Vec<T>,
    pub features: usize,
}

impl<T: Scalar> Normalization<T> {
    /// Statistics over the first `weeks` weeks.
    pub fn fit(data: &FlowTensor<T>, weeks: usize) -> Self {
        let c = data.features();
        let mut min = Vec::with_capacity(data.nodes() * c);
        let mut max = Vec::with_capacity(data.nodes() * c);
        for n in 0..data.nodes() {
            for f in 0..c {
                let s = &data.series(n, f)[..weeks];
                min.push(s.iter().copied().fold(T::infinity(), T::min));
                max.push(s.iter().copied().fold(T::neg_infinity(), T::max));
            }
        }
        Self { min, max, features: c }
    }

    fn scale(&self, k: usize) -> T {
        let r = self.max[k] - self.min[k];
        if r > T::zero() {
            r
        } else {
            T::one()
        }
    }

    pub fn forward(&self, node: usize, feature: usize, v: T) -> T {
        let k = node * self.features + feature;
        (v - self.min[k]) / self.scale(k)
    }

    pub fn inverse(&self, node: usize, feature: usize, v: T) -> T {
        let k = node * self.features + feature;
        v * self.scale(k) + self.min[k]
    }
}

/// Normalized `(week, node, feature)` window of `window` weeks ending
/// before week `end`.
fn window_rows<T: Scalar>(data: &FlowTensor<T>, norm: &Normalization<T>, end: usize, window: usize) -> Vec<T> {
    let (n, c) = (data.nodes(), data.features());
    let mut out = Vec::with_capacity(window * n * c);
    for t in end - window..end {
        for node in 0..n {
            for f in 0..c {
                out.push(norm.forward(node, f, data.get(node, f, t)));
            }
        }
    }
    out
}

/// Trained model plus everything needed to reproduce its forecasts.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: BiTransGcn<T>,
    pub normalization: Normalization<T>,
    pub feature_names: Vec<String>,
    /// Training-set MSE (dropout off) after each epoch, in epoch order.
    pub loss_curve: Vec<T>,
}

struct AdamW<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: i32,
    lr: T,
    wd: T,
}

impl<T: Scalar> AdamW<T> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(store: &ParamStore<T>, lr: f64, wd: f64) -> Self {
        let zeros: Vec<_> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr: T::lit(lr),
            wd: T::lit(wd),
        }
    }

    fn update(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let (b1, b2) = (T::lit(Self::BETA1), T::lit(Self::BETA2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let eps = T::lit(Self::EPS);
        let decay = T::one() - self.lr * self.wd;
        for (k, p) in store.iter_mut().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (w, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * *g;
                v[i] = b2 * v[i] + (T::one() - b2) * *g * *g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w = *w * decay - self.lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Trains `model` on the training portion of `data`.
///
/// Node order of `data` must match the model graph. Samples are visited
/// in a seeded shuffle, `batch_size` windows per AdamW step.
pub fn train<T: Scalar>(mut model: BiTransGcn<T>, data: &FlowTensor<T>, split_ratio: f64) -> Result<Checkpoint<T>> {
    check_nodes(&model, data)?;
    if data.features() != model.in_features() {
        return Err(Error::dim("train features", &[data.features()], &[model.in_features()]));
    }
    let config = model.config().clone();
    let plan = SplitPlan::new(data.weeks(), config.history_window, split_ratio)?;
    let norm = Normalization::fit(data, plan.training_weeks());
    let n = data.nodes();

    let inputs: Vec<Vec<T>> = (0..plan.train)
        .map(|s| window_rows(data, &norm, plan.target_week(s), plan.window))
        .collect();
    let targets: Vec<Vec<T>> = (0..plan.train)
        .map(|s| {
            let t = plan.target_week(s);
            (0..n)
                .map(|node| norm.forward(node, TARGET_FEATURE, data.get(node, TARGET_FEATURE, t)))
                .collect()
        })
        .collect();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);
    let mut opt = AdamW::new(&model.store, config.learning_rate, config.weight_decay);
    let mut order: Vec<usize> = (0..plan.train).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    // Evaluation and the returned model use the moving average when enabled.
    let mut averaged = (config.ema_decay > 0.0).then(|| model.store.clone());

    let all_x = {
        let windows: Vec<&[T]> = inputs.iter().map(Vec::as_slice).collect();
        model.stack_windows(&windows)?
    };
    let all_y = Tensor::new(vec![plan.train * n, 1], targets.concat())?;

    for epoch in 0..config.epochs {
        opt.lr = T::lit(config.learning_rate_at(epoch));
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            let windows: Vec<&[T]> = batch.iter().map(|&s| inputs[s].as_slice()).collect();
            let x = model.stack_windows(&windows)?;
            let y: Vec<T> = batch.iter().flat_map(|&s| targets[s].iter().copied()).collect();
            let y = Tensor::new(vec![y.len(), 1], y)?;

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let mut ctx = (config.dropout > 0.0).then(|| DropoutCtx {
                rate: config.dropout,
                rng: &mut dropout_rng,
            });
            let pred = model.forward(&mut tape, &model.store, xv, &mut ctx)?;
            let loss = tape.mse(pred, yv)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("training loss became {value} at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            model.store.zero_grad();
            grads.accumulate_into(&tape, &mut model.store);
            opt.update(&mut model.store);
            if let Some(avg) = averaged.as_mut() {
                blend(avg, &model.store, T::lit(config.ema_decay));
            }
        }
        let mut tape = Tape::new();
        let xv = tape.constant(all_x.clone());
        let yv = tape.constant(all_y.clone());
        let pred = model.forward(&mut tape, averaged.as_ref().unwrap_or(&model.store), xv, &mut None)?;
        let loss = tape.mse(pred, yv)?;
        loss_curve.push(tape.value(loss).item());
    }

    if let Some(avg) = averaged {
        model.store = avg;
    }
    Ok(Checkpoint {
        model,
        normalization: norm,
        feature_names: data.feature_names().to_vec(),
        loss_curve,
    })
}

fn blend<T: Scalar>(avg: &mut ParamStore<T>, current: &ParamStore<T>, decay: T) {
    for (a, p) in avg.iter_mut().zip(current.iter()) {
        for (x, &w) in a.value.data_mut().iter_mut().zip(p.value.data()) {
            *x = decay * *x + (T::one() - decay) * w;
        }
    }
}

fn check_nodes<T: Scalar>(model: &BiTransGcn<T>, data: &FlowTensor<T>) -> Result<()> {
    let ids = model.graph().node_ids();
    if ids.as_slice() != data.node_ids() {
        return Err(Error::Fingerprint(format!(
            "flow tensor nodes do not match graph {} (expected order {:?}, got {:?})",
            model.fingerprint(),
            preview(&ids),
            preview(data.node_ids())
        )));
    }
    Ok(())
}

fn preview(ids: &[String]) -> Vec<&str> {
    ids.iter().take(4).map(String::as_str).collect()
}

impl<T: Scalar> Checkpoint<T> {
    /// Forecasts the week after the last week of `history`.
    pub fn predict_next(&self, history: &FlowTensor<T>) -> Result<Vec<T>> {
        check_nodes(&self.model, history)?;
        let w = self.model.config().history_window;
        if history.weeks() < w {
            return Err(Error::Data(format!(
                "history has {} weeks, model needs {w}",
                history.weeks()
            )));
        }
        if history.features() != self.model.in_features() {
            return Err(Error::dim("predict features", &[history.features()], &[self.model.in_features()]));
        }
        let mut out = self.predict_windows(history, &[history.weeks()])?;
        Ok(out.pop().expect("one window"))
    }

    /// One-step forecasts for targets at each week index in `ends`.
    pub(crate) fn predict_windows(&self, data: &FlowTensor<T>, ends: &[usize]) -> Result<Vec<Vec<T>>> {
        let w = self.model.config().history_window;
        let n = data.nodes();
        let mut out = Vec::with_capacity(ends.len());
        for &end in ends {
            let rows = window_rows(data, &self.normalization, end, w);
            let x = self.model.stack_windows(&[&rows])?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let y = self.model.forward(&mut tape, self.model.params(), xv, &mut None)?;
            let y = tape.value(y);
            out.push(
                (0..n)
                    .map(|node| {
                        let v = self.normalization.inverse(node, TARGET_FEATURE, y.data()[node]);
                        if v > T::zero() {
                            v
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            );
        }
        Ok(out)
    }
}

/// Mean of each node's last `window` weeks before `end`.
pub fn historical_average<T: Scalar>(data: &FlowTensor<T>, end: usize, window: usize) -> Vec<T> {
    (0..data.nodes())
        .map(|node| {
            let s = &data.series(node, TARGET_FEATURE)[end - window..end];
            s.iter().copied().sum::<T>() / T::from_count(window)
        })
        .collect()
}

/// Held-out one-step forecasts of the model and the historical-average
/// baseline, one row per (test week, node).
#[derive(Debug, Clone)]
pub struct Holdout<T> {
    pub week_labels: Vec<String>,
    pub node_ids: Vec<String>,
    pub predicted: Vec<Vec<T>>,
    pub baseline: Vec<Vec<T>>,
    pub truth: Vec<Vec<T>>,
}

impl<T: Scalar> Holdout<T> {
    pub fn flat(v: &[Vec<T>]) -> Vec<T> {
        v.iter().flatten().copied().collect()
    }
}

/// Scores the test portion of the same split used for training.
pub fn holdout<T: Scalar>(checkpoint: &Checkpoint<T>, data: &FlowTensor<T>, split_ratio: f64) -> Result<Holdout<T>> {
    check_nodes(&checkpoint.model, data)?;
    let plan = SplitPlan::new(data.weeks(), checkpoint.model.config().history_window, split_ratio)?;
    let ends: Vec<usize> = (plan.train..plan.targets).map(|s| plan.target_week(s)).collect();
    let predicted = checkpoint.predict_windows(data, &ends)?;
    let baseline = ends.iter().map(|&e| historical_average(data, e, plan.window)).collect();
    let truth = ends.iter().map(|&e| data.week_column(TARGET_FEATURE, e)).collect();
    Ok(Holdout {
        week_labels: ends.iter().map(|&e| data.week_labels()[e].clone()).collect(),
        node_ids: data.node_ids().to_vec(),
        predicted,
        baseline,
        truth,
    })
}

/// Trailing moving average with the given window; shorter prefixes are
/// dropped.
pub fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || curve.len() < window {
        return Vec::new();
    }
    curve
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::model::BiTransGcnConfig;
    use crate::graph::{build_knn_graph, GraphNode, SpatialGraph};

    fn graph(n: usize) -> SpatialGraph<f64> {
        let nodes = (0..n)
            .map(|i| GraphNode::new(format!("u{i}"), 40.0 + i as f64 * 0.1, -80.0 + (i % 2) as f64 * 0.05))
            .collect();
        build_knn_graph(nodes, 1).unwrap()
    }

    fn weeks(t: usize) -> Vec<String> {
        (0..t).map(|i| format!("w{i:03}")).collect()
    }

    fn small_config() -> BiTransGcnConfig {
        BiTransGcnConfig {
            hidden: 8,
            n_heads: 2,
            history_window: 4,
            learning_rate: 1e-2,
            dropout: 0.0,
            batch_size: 1,
            warmup_epochs: 0,
            ema_decay: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn split_arithmetic() {
        let p = SplitPlan::new(62, 12, 0.8).unwrap();
        assert_eq!((p.targets, p.train, p.test()), (50, 40, 10));
        let p = SplitPlan::new(14, 12, 0.99).unwrap();
        assert_eq!((p.train, p.test()), (1, 1));
        let e = SplitPlan::new(13, 12, 0.8).unwrap_err();
        assert!(e.to_string().contains("at least 14 weeks"), "{e}");
        assert!(SplitPlan::new(40, 12, 1.0).is_err());
    }

    #[test]
    fn normalization_round_trip_and_constant_series() {
        let data =
            FlowTensor::from_series(vec!["a".into(), "b".into()], "v", weeks(3), &[vec![2.0, 4.0, 6.0], vec![5.0; 3]])
                .unwrap();
        let norm = Normalization::fit(&data, 2);
        assert_eq!(norm.forward(0, 0, 4.0), 1.0);
        assert_eq!(norm.forward(0, 0, 6.0), 2.0);
        assert_eq!(norm.forward(1, 0, 5.0), 0.0);
        assert_eq!(norm.inverse(0, 0, 0.5), 3.0);
        assert_eq!(norm.inverse(1, 0, 0.0), 5.0);
    }

    #[test]
    fn constant_flows_are_learned() {
        let n = 3;
        let data = FlowTensor::from_series(
            (0..n).map(|i| format!("u{i}")).collect(),
            "visits",
            weeks(20),
            &vec![vec![5.0; 20]; n],
        )
        .unwrap();
        let config = BiTransGcnConfig {
            epochs: 60,
            ..small_config()
        };
        let model = BiTransGcn::assemble(config, graph(n), 1).unwrap();
        let ck = train(model, &data, 0.8).unwrap();
        let h = holdout(&ck, &data, 0.8).unwrap();
        let mse = Holdout::flat(&h.predicted)
            .iter()
            .zip(Holdout::flat(&h.truth))
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / (h.predicted.len() * n) as f64;
        assert!(mse < 1e-4, "{mse}");
        let next = ck.predict_next(&data).unwrap();
        assert!(next.iter().all(|v| (v - 5.0).abs() < 0.1), "{next:?}");
        assert_eq!(next, ck.predict_next(&data).unwrap());
    }

    #[test]
    fn sinusoidal_training_converges() {
        let n = 6;
        let t = 60;
        let series: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..t)
                    .map(|w| 10.0 + 4.0 * (2.0 * std::f64::consts::PI * (w as f64 + i as f64) / 13.0).sin())
                    .collect()
            })
            .collect();
        let data =
            FlowTensor::from_series((0..n).map(|i| format!("u{i}")).collect(), "visits", weeks(t), &series).unwrap();
        let config = BiTransGcnConfig {
            epochs: 40,
            learning_rate: 3e-3,
            ..small_config()
        };
        let ck = train(BiTransGcn::assemble(config, graph(n), 1).unwrap(), &data, 0.8).unwrap();
        let first = ck.loss_curve[0];
        let last = *ck.loss_curve.last().unwrap();
        assert!(last < 0.05 * first, "{first} → {last}");
    }

    #[test]
    fn permuted_history_rejected() {
        let n = 3;
        let data =
            FlowTensor::from_series((0..n).map(|i| format!("u{i}")).collect(), "v", weeks(8), &vec![vec![1.0; 8]; n])
                .unwrap();
        let config = BiTransGcnConfig {
            epochs: 1,
            ..small_config()
        };
        let ck = train(BiTransGcn::assemble(config, graph(n), 1).unwrap(), &data, 0.5).unwrap();
        let permuted = data.permute_nodes(&[1, 0, 2]).unwrap();
        assert!(matches!(ck.predict_next(&permuted), Err(Error::Fingerprint(_))));
        let short = data.weeks_range(0, 3).unwrap();
        assert!(matches!(ck.predict_next(&short), Err(Error::Data(_))));
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![2.0, 4.0, 6.0]);
        assert!(smooth(&[1.0], 2).is_empty());
    }
}
