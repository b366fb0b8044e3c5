//! Scaled dot-product attention, multi-head attention and the temporal
//! Transformer encoder with a one-step cross-attention decoder.
//!
//! Sequences are processed in batches laid out as `B·T` rows: rows
//! `b·T .. (b+1)·T` hold sequence `b`. Attention never crosses batch
//! boundaries and there is no causal mask, so every step attends to the
//! whole window.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{glorot_uniform, maybe_dropout, DropoutCtx, ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// `softmax(QKᵀ/√d_k)·V` for a single sequence.
pub fn scaled_dot_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let dk = tape.value(q).cols();
    if dk == 0 {
        return Err(Error::Parameter("attention needs d_k > 0".into()));
    }
    if tape.value(k).cols() != dk {
        return Err(Error::dim("scaled_dot_attention(q, k)", tape.shape(q), tape.shape(k)));
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::dim("scaled_dot_attention(k, v)", tape.shape(k), tape.shape(v)));
    }
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, T::one() / T::from_count(dk).sqrt());
    let weights = tape.softmax_rows(scaled);
    tape.matmul(weights, v)
}

/// Per-head projections `W_i^Q, W_i^K, W_i^V` and the output map `W^L`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_model: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || d_model % n_heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model = {d_model} must be a positive multiple of n_heads = {n_heads}"
            )));
        }
        let d_k = d_model / n_heads;
        let mut query = Vec::with_capacity(n_heads);
        let mut key = Vec::with_capacity(n_heads);
        let mut value = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            query.push(store.add(format!("{prefix}.head{h}.w_q"), glorot_uniform(d_model, d_k, rng))?);
            key.push(store.add(format!("{prefix}.head{h}.w_k"), glorot_uniform(d_model, d_k, rng))?);
            value.push(store.add(format!("{prefix}.head{h}.w_v"), glorot_uniform(d_model, d_k, rng))?);
        }
        let output = store.add(format!("{prefix}.w_l"), glorot_uniform(n_heads * d_k, d_model, rng))?;
        Ok(Self {
            query,
            key,
            value,
            output,
            n_heads,
            d_k,
            d_model,
        })
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.query
            .iter()
            .chain(&self.key)
            .chain(&self.value)
            .copied()
            .chain(std::iter::once(self.output))
    }
}

/// Batched multi-head attention of `queries` (`B·q_len` rows) over
/// `memory` (`B·m_len` rows).
pub fn multi_head_batched<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    queries: Var,
    memory: Var,
    q_len: usize,
    m_len: usize,
    params: &AttentionParams,
) -> Result<Var> {
    for x in [queries, memory] {
        if tape.value(x).cols() != params.d_model {
            return Err(Error::dim("multi_head", tape.shape(x), &[params.d_model]));
        }
    }
    let (qr, mr) = (tape.value(queries).rows(), tape.value(memory).rows());
    if q_len == 0 || m_len == 0 || qr % q_len != 0 || mr % m_len != 0 || qr / q_len != mr / m_len {
        return Err(Error::dim("multi_head batches", tape.shape(queries), tape.shape(memory)));
    }

    let mut projected = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let wq = tape.param(store, params.query[h]);
        let wk = tape.param(store, params.key[h]);
        let wv = tape.param(store, params.value[h]);
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(memory, wk)?;
        let v = tape.matmul(memory, wv)?;
        projected.push((q, k, v));
    }

    let mut heads = Vec::with_capacity(params.n_heads);
    for &(q, k, v) in &projected {
        heads.push(tape.block_attention(q, k, v, q_len, m_len)?);
    }
    let concat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let wl = tape.param(store, params.output);
    tape.matmul(concat, wl)
}

/// Multi-head self-attention over one sequence `x` (`T × d_model`).
pub fn multi_head<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, params: &AttentionParams) -> Result<Var> {
    let t = tape.value(x).rows();
    multi_head_batched(tape, store, x, x, t, t, params)
}

/// Sinusoidal positional encoding, `T × d_model`.
pub fn positional_encoding<T: Scalar>(len: usize, d_model: usize) -> Tensor<T> {
    let mut pe = Tensor::zeros(&[len, d_model]);
    for pos in 0..len {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            pe.set(pos, i, T::lit(v));
        }
    }
    pe
}

/// Learned scale/shift pair for layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::filled(&[1, width], T::one()))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[1, width]))?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, T::lit(LN_EPS))
    }
}

/// Dense layer `x·W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{prefix}.weight"), glorot_uniform(in_dim, out_dim, rng))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, out_dim]))?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// Post-norm Transformer encoder layer:
/// attention → add → norm → feed-forward → add → norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: AttentionParams,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm_attn: LayerNormParams,
    pub norm_ff: LayerNormParams,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::new(store, &format!("{prefix}.attn"), d_model, n_heads, rng)?,
            ff_in: Linear::new(store, &format!("{prefix}.ff1"), d_model, d_ff, rng)?,
            ff_out: Linear::new(store, &format!("{prefix}.ff2"), d_ff, d_model, rng)?,
            norm_attn: LayerNormParams::new(store, &format!("{prefix}.ln1"), d_model)?,
            norm_ff: LayerNormParams::new(store, &format!("{prefix}.ln2"), d_model)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        seq_len: usize,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        let attn = multi_head_batched(tape, store, x, x, seq_len, seq_len, &self.attention)?;
        let attn = maybe_dropout(tape, attn, dropout);
        let res = tape.add(x, attn)?;
        let x1 = self.norm_attn.apply(tape, store, res)?;
        let hidden = self.ff_in.apply(tape, store, x1)?;
        let hidden = tape.relu(hidden);
        let ff = self.ff_out.apply(tape, store, hidden)?;
        let res = tape.add(x1, ff)?;
        self.norm_ff.apply(tape, store, res)
    }
}

/// Adds positional encoding to each `seq_len`-row block of `x` and runs the
/// encoder stack.
pub fn encode_batched<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    seq_len: usize,
    layers: &[EncoderLayer],
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Parameter("encoder needs at least one layer".into()));
    }
    let (rows, d) = (tape.value(x).rows(), tape.value(x).cols());
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::dim("encode", tape.shape(x), &[seq_len]));
    }
    let pe = positional_encoding::<T>(seq_len, d);
    let mut tiled = Vec::with_capacity(rows * d);
    for _ in 0..rows / seq_len {
        tiled.extend_from_slice(pe.data());
    }
    let pe = tape.constant(Tensor::new(vec![rows, d], tiled)?);
    let mut h = tape.add(x, pe)?;
    for layer in layers {
        h = layer.forward(tape, store, h, seq_len, dropout)?;
    }
    Ok(h)
}

/// Encodes one `T × d_model` sequence (evaluation mode).
pub fn encode_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    layers: &[EncoderLayer],
) -> Result<Var> {
    let t = tape.value(x).rows();
    encode_batched(tape, store, x, t, layers, &mut None)
}

/// Single learned query cross-attending to the encoder output of each
/// sequence, producing one `d_model` vector per sequence.
#[derive(Debug, Clone)]
pub struct OneStepDecoder {
    pub query: ParamId,
    pub attention: AttentionParams,
    pub norm: LayerNormParams,
}

impl OneStepDecoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let query = store.add(format!("{prefix}.query"), glorot_uniform(1, d_model, rng))?;
        Ok(Self {
            query,
            attention: AttentionParams::new(store, &format!("{prefix}.cross"), d_model, n_heads, rng)?,
            norm: LayerNormParams::new(store, &format!("{prefix}.ln"), d_model)?,
        })
    }

    /// `memory` holds `B·seq_len` rows; returns `B × d_model`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        memory: Var,
        seq_len: usize,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        let rows = tape.value(memory).rows();
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::dim("decoder", tape.shape(memory), &[seq_len]));
        }
        let batches = rows / seq_len;
        let q = tape.param(store, self.query);
        let q = tape.gather_rows(q, &vec![0; batches])?;
        let attn = multi_head_batched(tape, store, q, memory, 1, seq_len, &self.attention)?;
        let attn = maybe_dropout(tape, attn, dropout);
        let res = tape.add(q, attn)?;
        self.norm.apply(tape, store, res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check_all;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn attend(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        tape.value(out).clone()
    }

    /// Scalar-loop attention oracle.
    fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
        let (t, dk, dv) = (q.rows(), q.cols(), v.cols());
        let mut out = Tensor::zeros(&[t, dv]);
        for i in 0..t {
            let logits: Vec<f64> = (0..k.rows())
                .map(|j| (0..dk).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dv {
                out.set(i, c, (0..k.rows()).map(|j| e[j] / z * v.get(j, c)).sum());
            }
        }
        out
    }

    #[test]
    fn single_key_returns_value() {
        let q = Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let k = Tensor::from_rows(&[vec![2.0, 0.5]]).unwrap();
        let v = Tensor::from_rows(&[vec![4.0, -1.0, 7.0]]).unwrap();
        assert_eq!(attend(&q, &k, &v), v);
    }

    #[test]
    fn orthogonal_query_gives_column_mean() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -3.0], vec![0.0, 2.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, 6.0], vec![6.0, 0.0]]).unwrap();
        let out = attend(&q, &k, &v);
        for i in 0..2 {
            assert!((out.get(i, 0) - 3.0).abs() < 1e-12);
            assert!((out.get(i, 1) - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_attention_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (rand_tensor(&mut rng, 3, 2), rand_tensor(&mut rng, 3, 2), rand_tensor(&mut rng, 3, 2));
        assert!(attend(&q, &k, &v).max_abs_diff(&attention_oracle(&q, &k, &v)) < 1e-12);
    }

    #[test]
    fn zero_width_keys_rejected() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[2, 0]));
        let v = tape.constant(Tensor::zeros(&[2, 1]));
        assert!(matches!(scaled_dot_attention(&mut tape, q, q, v), Err(Error::Parameter(_))));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionParams::new(&mut store, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn single_identity_head_reduces_to_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let params = AttentionParams::new(&mut store, "a", 3, 1, &mut rng).unwrap();
        for id in params.param_ids().collect::<Vec<_>>() {
            store.set_value(id, Tensor::identity(3)).unwrap();
        }
        let x = rand_tensor(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = multi_head(&mut tape, &store, xv, &params).unwrap();
        assert!(tape.value(out).max_abs_diff(&attend(&x, &x, &x)) < 1e-12);
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let params = AttentionParams::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        store.set_value(params.output, Tensor::zeros(&[4, 4])).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(rand_tensor(&mut rng, 5, 4));
        let out = multi_head(&mut tape, &store, xv, &params).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_leave_normalized_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "enc0", 4, 2, 4, &mut rng).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            if !name.contains(".ln") {
                let shape = store.get(id).value.shape().to_vec();
                store.set_value(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let x = rand_tensor(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = encode_sequence(&mut tape, &store, xv, &[layer]).unwrap();
        let pe = positional_encoding::<f64>(3, 4);
        for r in 0..3 {
            let row: Vec<f64> = (0..4).map(|c| x.get(r, c) + pe.get(r, c)).collect();
            let mean = row.iter().sum::<f64>() / 4.0;
            let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
            for c in 0..4 {
                assert!((tape.value(out).get(r, c) - (row[c] - mean) / sd).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn encoder_handles_single_step_and_huge_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layers = vec![
            EncoderLayer::new(&mut store, "e0", 8, 2, 8, &mut rng).unwrap(),
            EncoderLayer::new(&mut store, "e1", 8, 2, 8, &mut rng).unwrap(),
        ];
        for (t, scale) in [(1usize, 1.0), (6, 1e6)] {
            let x = rand_tensor(&mut rng, t, 8).map(|v| v * scale);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let out = encode_sequence(&mut tape, &store, xv, &layers).unwrap();
            assert!(tape.value(out).all_finite());
            // final layer norm: per-position variance ≈ 1
            for r in 0..t {
                let row = tape.value(out).row(r);
                let m = row.iter().sum::<f64>() / 8.0;
                let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0;
                assert!((var - 1.0).abs() < 0.1, "{var}");
            }
        }
    }

    #[test]
    fn argmax_stable_under_joint_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rand_tensor(&mut rng, 4, 3);
        let k = rand_tensor(&mut rng, 5, 3);
        let weights = |c: f64| {
            let mut tape = Tape::new();
            let qv = tape.constant(q.map(|v| v * c));
            let kv = tape.constant(k.map(|v| v * c));
            let kt = tape.transpose(kv);
            let l = tape.matmul(qv, kt).unwrap();
            let s = tape.softmax_rows(l);
            tape.value(s).clone()
        };
        let argmax = |w: &Tensor<f64>| -> Vec<usize> {
            (0..w.rows())
                .map(|r| {
                    w.row(r)
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                })
                .collect()
        };
        let base = argmax(&weights(1.0));
        for c in [0.5, 2.0, 3.0] {
            assert_eq!(argmax(&weights(c)), base);
        }
    }

    #[test]
    fn encoder_and_decoder_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "e0", 4, 2, 6, &mut rng).unwrap();
        let dec = OneStepDecoder::new(&mut store, "dec", 4, 2, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, 6, 4);
        let target = rand_tensor(&mut rng, 2, 4);
        let report = gradient_check_all(&mut store, 1e-5, |tape, s| {
            let xv = tape.constant(x.clone());
            let enc = encode_batched(tape, s, xv, 3, std::slice::from_ref(&layer), &mut None)?;
            let out = dec.forward(tape, s, enc, 3, &mut None)?;
            let t = tape.constant(target.clone());
            tape.mse(out, t)
        })
        .unwrap();
        assert!(report.max_error() < 1e-4, "{:?}", report.per_param);
    }
}
