use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{encode_batched, EncoderLayer, Linear, OneStepDecoder};
use crate::error::{Error, Result};
use crate::graph::{gcn_forward, normalize_symmetric, Activation, GcnLayer, NormalizedAdjacency, SpatialGraph};
use crate::scalar::Scalar;
use crate::tensor::{maybe_dropout, DropoutCtx, ParamStore, Tape, Tensor, Var};

/// Hyper-parameters of the forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct BiTransGcnConfig {
    pub dropout: f64,
    pub learning_rate: f64,
    pub hidden: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub gcn_layers: usize,
    pub n_heads: usize,
    pub history_window: usize,
    pub seed: u64,
    pub encoder_layers: usize,
    pub batch_size: usize,
    /// Epochs of linear learning-rate warmup.
    pub warmup_epochs: usize,
    pub lr_decay: LrDecay,
    /// Per-step decay of the parameter moving average; 0 disables it.
    pub ema_decay: f64,
}

/// Learning-rate shape after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrDecay {
    Constant,
    /// Half-cosine from the peak towards zero at the last epoch.
    Cosine,
}

impl std::str::FromStr for LrDecay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Parameter(format!("lr_decay must be constant or cosine, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for LrDecay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        })
    }
}

impl Default for BiTransGcnConfig {
    fn default() -> Self {
        Self {
            dropout: 0.05,
            learning_rate: 1e-4,
            hidden: 128,
            weight_decay: 1e-5,
            epochs: 600,
            gcn_layers: 2,
            n_heads: 4,
            history_window: 12,
            seed: 0,
            encoder_layers: 1,
            batch_size: 8,
            warmup_epochs: 50,
            lr_decay: LrDecay::Constant,
            ema_decay: 0.995,
        }
    }
}

/// Names accepted by [`BiTransGcnConfig::set`].
pub const CONFIG_KEYS: [&str; 14] = [
    "dropout",
    "learning_rate",
    "hidden",
    "weight_decay",
    "epochs",
    "gcn_layers",
    "n_heads",
    "history_window",
    "seed",
    "encoder_layers",
    "batch_size",
    "warmup_epochs",
    "lr_decay",
    "ema_decay",
];

impl BiTransGcnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("epochs", self.epochs),
            ("gcn_layers", self.gcn_layers),
            ("n_heads", self.n_heads),
            ("history_window", self.history_window),
            ("encoder_layers", self.encoder_layers),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.hidden % self.n_heads != 0 {
            return bad(format!(
                "hidden = {} is not divisible by n_heads = {}",
                self.hidden, self.n_heads
            ));
        }
        Ok(())
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Parameter(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "dropout" => self.dropout = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "gcn_layers" => self.gcn_layers = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "history_window" => self.history_window = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "lr_decay" => self.lr_decay = value.parse()?,
            "ema_decay" => self.ema_decay = parse(key, value)?,
            _ => return Err(Error::Parameter(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs in [`CONFIG_KEYS`] order; floats round-trip exactly.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dropout", format!("{:?}", self.dropout)),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("hidden", self.hidden.to_string()),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("epochs", self.epochs.to_string()),
            ("gcn_layers", self.gcn_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("history_window", self.history_window.to_string()),
            ("seed", self.seed.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("ema_decay", format!("{:?}", self.ema_decay)),
        ]
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.learning_rate * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        match self.lr_decay {
            LrDecay::Constant => self.learning_rate,
            LrDecay::Cosine => {
                let span = (self.epochs - self.warmup_epochs.min(self.epochs)).max(1) as f64;
                let progress = (epoch - self.warmup_epochs) as f64 / span;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// Closed-form parameter count for `in_features` input channels.
    pub fn parameter_count(&self, in_features: usize) -> usize {
        let h = self.hidden;
        let gcn = in_features * h + (self.gcn_layers - 1) * h * h;
        let embed = h * h + h;
        // Q, K, V across heads are h×h in total, plus W^L; FFN has width h.
        let attn = 4 * h * h;
        let ffn = 2 * (h * h + h);
        let norms = 4 * h;
        let encoder = self.encoder_layers * (attn + ffn + norms);
        let decoder = h + attn + 2 * h;
        let head = h + 1;
        gcn + embed + encoder + decoder + head
    }
}

/// GCN spatial encoder, embedding, temporal Transformer encoder, one-step
/// decoder and a linear head producing one value per node.
#[derive(Debug, Clone)]
pub struct BiTransGcn<T> {
    config: BiTransGcnConfig,
    in_features: usize,
    graph: SpatialGraph<T>,
    adjacency: NormalizedAdjacency<T>,
    pub(crate) store: ParamStore<T>,
    gcn: Vec<GcnLayer>,
    embed: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: OneStepDecoder,
    head: Linear,
}

impl<T: Scalar> BiTransGcn<T> {
    pub fn assemble(config: BiTransGcnConfig, graph: SpatialGraph<T>, in_features: usize) -> Result<Self> {
        config.validate()?;
        if in_features == 0 {
            return Err(Error::Parameter("model needs at least one input feature".into()));
        }
        let adjacency = normalize_symmetric(&graph)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let mut gcn = Vec::with_capacity(config.gcn_layers);
        for l in 0..config.gcn_layers {
            let input = if l == 0 { in_features } else { h };
            gcn.push(GcnLayer::new(&mut store, &format!("gcn{l}.weight"), input, h, Activation::Relu, &mut rng)?);
        }
        let embed = Linear::new(&mut store, "embed", h, h, &mut rng)?;
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            encoder.push(EncoderLayer::new(&mut store, &format!("enc{l}"), h, config.n_heads, h, &mut rng)?);
        }
        let decoder = OneStepDecoder::new(&mut store, "dec", h, config.n_heads, &mut rng)?;
        let head = Linear::new(&mut store, "head", h, 1, &mut rng)?;
        Ok(Self {
            config,
            in_features,
            graph,
            adjacency,
            store,
            gcn,
            embed,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &BiTransGcnConfig {
        &self.config
    }

    pub fn graph(&self) -> &SpatialGraph<T> {
        &self.graph
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn fingerprint(&self) -> &str {
        self.adjacency.fingerprint()
    }

    /// Forward pass over `B` windows.
    ///
    /// `x` has `B·W·N` rows and `C` columns ordered (window, week, node).
    /// Returns a `B·N × 1` column ordered (window, node).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        let n = self.graph.len();
        let w = self.config.history_window;
        let rows = tape.value(x).rows();
        if tape.value(x).cols() != self.in_features || rows == 0 || rows % (w * n) != 0 {
            return Err(Error::dim("BiTransGcn::forward", tape.shape(x), &[w * n, self.in_features]));
        }
        let batches = rows / (w * n);
        let mut h = x;
        for layer in &self.gcn {
            h = gcn_forward(tape, store, h, &self.adjacency, layer)?;
            h = maybe_dropout(tape, h, dropout);
        }
        h = self.embed.apply(tape, store, h)?;
        // (window, week, node) → (window, node, week): one sequence per node.
        let mut index = Vec::with_capacity(rows);
        for b in 0..batches {
            for node in 0..n {
                for t in 0..w {
                    index.push((b * w + t) * n + node);
                }
            }
        }
        let seq = tape.gather_rows(h, &index)?;
        let enc = encode_batched(tape, store, seq, w, &self.encoder, dropout)?;
        let dec = self.decoder.forward(tape, store, enc, w, dropout)?;
        self.head.apply(tape, store, dec)
    }

    /// Stacks normalized windows into the `(window, week, node) × C` layout.
    pub(crate) fn stack_windows(&self, windows: &[&[T]]) -> Result<Tensor<T>> {
        let per = self.config.history_window * self.graph.len() * self.in_features;
        let mut data = Vec::with_capacity(per * windows.len());
        for w in windows {
            if w.len() != per {
                return Err(Error::dim("stack_windows", &[w.len()], &[per]));
            }
            data.extend_from_slice(w);
        }
        Tensor::new(vec![per / self.in_features * windows.len(), self.in_features], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_knn_graph, GraphNode};

    fn grid_graph(n: usize) -> SpatialGraph<f64> {
        let nodes = (0..n)
            .map(|i| GraphNode::new(format!("u{i}"), 40.0 + (i / 2) as f64 * 0.1, -80.0 + (i % 2) as f64 * 0.1))
            .collect();
        build_knn_graph(nodes, 2).unwrap()
    }

    #[test]
    fn parameter_count_matches_declared_shapes() {
        let config = BiTransGcnConfig::default();
        let model = BiTransGcn::assemble(config.clone(), grid_graph(4), 1).unwrap();
        assert_eq!(model.params().element_count(), config.parameter_count(1));
        let config = BiTransGcnConfig {
            hidden: 12,
            n_heads: 3,
            gcn_layers: 3,
            encoder_layers: 2,
            ..Default::default()
        };
        let model = BiTransGcn::assemble(config.clone(), grid_graph(4), 2).unwrap();
        assert_eq!(model.params().element_count(), config.parameter_count(2));
        // independent count for the default model, one input feature
        let h = 128;
        let expected = h + h * h          // gcn
            + h * h + h                    // embedding
            + 4 * h * h + 2 * (h * h + h) + 4 * h // encoder layer
            + h + 4 * h * h + 2 * h        // decoder
            + h + 1; // head
        assert_eq!(BiTransGcnConfig::default().parameter_count(1), expected);
    }

    #[test]
    fn seeded_assembly_is_deterministic() {
        let a = BiTransGcn::assemble(BiTransGcnConfig::default(), grid_graph(4), 1).unwrap();
        let b = BiTransGcn::assemble(BiTransGcnConfig::default(), grid_graph(4), 1).unwrap();
        for (p, q) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let config = BiTransGcnConfig {
            hidden: 6,
            n_heads: 4,
            ..Default::default()
        };
        assert!(matches!(
            BiTransGcn::assemble(config, grid_graph(4), 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn config_validation_and_text() {
        let mut c = BiTransGcnConfig::default();
        c.set("dropout", "1.0").unwrap();
        assert!(c.validate().is_err());
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("hidden", "x").is_err());
        let mut d = BiTransGcnConfig::default();
        let e = BiTransGcnConfig {
            learning_rate: 0.1 + 0.2,
            ..Default::default()
        };
        for (k, v) in e.to_pairs() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(d, e);
        assert_eq!(CONFIG_KEYS.len(), e.to_pairs().len());
    }

    #[test]
    fn forward_shape() {
        let config = BiTransGcnConfig {
            hidden: 8,
            n_heads: 2,
            history_window: 3,
            ..Default::default()
        };
        let model = BiTransGcn::assemble(config, grid_graph(4), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[2 * 3 * 4, 1], 0.5));
        let y = model.forward(&mut tape, model.params(), x, &mut None).unwrap();
        assert_eq!(tape.shape(y), &[8, 1]);
        assert!(tape.value(y).all_finite());
    }
}
