//! GeoShapley attribution of a black-box predictor.
//!
//! The `g` location columns form one joint player GEO; every other feature
//! is its own player, giving `q = p − g + 1` players. A prediction splits
//! into a base value, a GEO effect, per-feature effects and GEO × feature
//! interactions that add back up to the prediction.
//!
//! Convention: `sh_i` are ordinary Shapley values of the `q`-player game and
//! `φ_(GEO,j)` is the Shapley interaction index of the pair (GEO, j). Each
//! interaction is split evenly between its two players, so
//! `φ_j = sh_j − φ_(GEO,j)/2` and `φ_GEO = sh_GEO − Σ_j φ_(GEO,j)/2`.

mod ridge;
mod solve;

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use ridge::Ridge;
pub use solve::solve_dense;

use crate::error::{Error, Result};

/// Exact enumeration caches `2^q` coalition values.
pub const MAX_EXACT_PLAYERS: usize = 20;
pub const DEFAULT_BACKGROUND_ROWS: usize = 100;

/// Deterministic model mapping instance rows to predictions.
pub trait PredictFunction {
    fn predict(&self, rows: &[Vec<f64>]) -> Vec<f64>;
}

impl<F: Fn(&[f64]) -> f64> PredictFunction for F {
    fn predict(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    names: Vec<String>,
    geo: Vec<usize>,
    /// Feature indices of players `1..q`.
    non_geo: Vec<usize>,
}

impl FeatureSchema {
    pub fn new(names: Vec<String>, geo: Vec<usize>) -> Result<Self> {
        let p = names.len();
        let mut sorted = geo.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if geo.is_empty() || sorted.len() != geo.len() || sorted.iter().any(|&g| g >= p) {
            return Err(Error::Validation(format!(
                "GEO indices {geo:?} must be distinct, non-empty and below {p}"
            )));
        }
        let non_geo = (0..p).filter(|i| !geo.contains(i)).collect();
        Ok(Self { names, geo, non_geo })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn geo_indices(&self) -> &[usize] {
        &self.geo
    }

    pub fn non_geo_names(&self) -> Vec<&str> {
        self.non_geo.iter().map(|&i| self.names[i].as_str()).collect()
    }

    pub fn feature_count(&self) -> usize {
        self.names.len()
    }

    /// Number of players: GEO plus each non-location feature.
    pub fn players(&self) -> usize {
        self.non_geo.len() + 1
    }

    /// Columns controlled by `player` (0 is GEO).
    fn columns(&self, player: usize) -> &[usize] {
        if player == 0 {
            &self.geo
        } else {
            std::slice::from_ref(&self.non_geo[player - 1])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundData {
    rows: Vec<Vec<f64>>,
}

impl BackgroundData {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let p = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || p == 0 {
            return Err(Error::Validation("background data needs at least one row".into()));
        }
        if rows.iter().any(|r| r.len() != p || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation("background rows must be finite with equal width".into()));
        }
        Ok(Self { rows })
    }

    /// Keeps at most `max_rows` rows, chosen by a seeded draw in file order.
    pub fn subsample(rows: Vec<Vec<f64>>, max_rows: usize, seed: u64) -> Result<Self> {
        if rows.len() <= max_rows {
            return Self::new(rows);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = index::sample(&mut rng, rows.len(), max_rows).into_vec();
        keep.sort_unstable();
        Self::new(keep.into_iter().map(|i| rows[i].clone()).collect())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoShapleyDecomposition {
    pub phi_0: f64,
    pub phi_geo: f64,
    /// Per non-location feature, schema order.
    pub phi_j: Vec<f64>,
    pub phi_geo_j: Vec<f64>,
    pub prediction: f64,
}

impl GeoShapleyDecomposition {
    pub fn total(&self) -> f64 {
        self.phi_0 + self.phi_geo + self.phi_j.iter().sum::<f64>() + self.phi_geo_j.iter().sum::<f64>()
    }
}

fn check_schema(schema: &FeatureSchema, instance: &[f64], background: &BackgroundData) -> Result<()> {
    let p = schema.feature_count();
    if instance.len() != p || background.rows[0].len() != p {
        return Err(Error::Contract(format!(
            "schema has {p} features; instance has {}, background has {}",
            instance.len(),
            background.rows[0].len()
        )));
    }
    Ok(())
}

/// Mean prediction over the background with the columns of the players in
/// `coalition` (bit `i` = player `i`, GEO is bit 0) taken from `instance`.
pub fn coalition_value<F: PredictFunction + ?Sized>(
    f: &F,
    instance: &[f64],
    coalition: u64,
    schema: &FeatureSchema,
    background: &BackgroundData,
) -> Result<f64> {
    check_schema(schema, instance, background)?;
    Ok(coalition_value_unchecked(f, instance, coalition, schema, background))
}

fn coalition_value_unchecked<F: PredictFunction + ?Sized>(
    f: &F,
    instance: &[f64],
    coalition: u64,
    schema: &FeatureSchema,
    background: &BackgroundData,
) -> f64 {
    let mut rows = background.rows.clone();
    for player in 0..schema.players() {
        if coalition >> player & 1 == 1 {
            for &c in schema.columns(player) {
                for r in &mut rows {
                    r[c] = instance[c];
                }
            }
        }
    }
    let preds = f.predict(&rows);
    preds.iter().sum::<f64>() / preds.len() as f64
}

fn factorials(n: usize) -> Vec<f64> {
    let mut out = vec![1.0; n + 1];
    for i in 1..=n {
        out[i] = out[i - 1] * i as f64;
    }
    out
}

/// Splits pair interactions evenly between GEO and each feature.
fn assemble(v_empty: f64, v_full: f64, sh: &[f64], interactions: Vec<f64>) -> GeoShapleyDecomposition {
    let phi_j: Vec<f64> = sh[1..].iter().zip(&interactions).map(|(s, i)| s - 0.5 * i).collect();
    let phi_geo = sh[0] - 0.5 * interactions.iter().sum::<f64>();
    GeoShapleyDecomposition {
        phi_0: v_empty,
        phi_geo,
        phi_j,
        phi_geo_j: interactions,
        prediction: v_full,
    }
}

/// Exact GeoShapley by enumerating all `2^q` coalitions.
pub fn geoshapley_exact<F: PredictFunction + ?Sized>(
    f: &F,
    instance: &[f64],
    schema: &FeatureSchema,
    background: &BackgroundData,
) -> Result<GeoShapleyDecomposition> {
    check_schema(schema, instance, background)?;
    let q = schema.players();
    if q > MAX_EXACT_PLAYERS {
        return Err(Error::Capacity(format!(
            "{q} players exceed the exact limit of {MAX_EXACT_PLAYERS}; use geoshapley_kernel"
        )));
    }
    let full = (1u64 << q) - 1;
    let v: Vec<f64> = (0..=full)
        .map(|s| coalition_value_unchecked(f, instance, s, schema, background))
        .collect();
    let fact = factorials(q);

    let mut sh = vec![0.0; q];
    for (i, shi) in sh.iter_mut().enumerate() {
        let bit = 1u64 << i;
        for s in 0..=full {
            if s & bit == 0 {
                let size = s.count_ones() as usize;
                let w = fact[size] * fact[q - size - 1] / fact[q];
                *shi += w * (v[(s | bit) as usize] - v[s as usize]);
            }
        }
    }

    let mut interactions = vec![0.0; q - 1];
    for (j, inter) in interactions.iter_mut().enumerate() {
        let pair = 1u64 | 1u64 << (j + 1);
        for s in 0..=full {
            if s & pair == 0 {
                let size = s.count_ones() as usize;
                let w = fact[size] * fact[q - size - 2] / fact[q - 1];
                let delta = v[(s | pair) as usize] - v[(s | 1) as usize] - v[(s | pair & !1) as usize] + v[s as usize];
                *inter += w * delta;
            }
        }
    }

    let out = assemble(v[0], v[full as usize], &sh, interactions);
    let residual = (out.total() - out.prediction).abs();
    if residual > 1e-9 * (1.0 + out.prediction.abs()) {
        return Err(Error::Numerical(format!("decomposition misses the prediction by {residual}")));
    }
    Ok(out)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of a coalition of `size` among `m` players.
fn kernel_weight(m: usize, size: usize) -> f64 {
    (m - 1) as f64 / (binomial(m, size) * size as f64 * (m - size) as f64)
}

/// Weighted coalitions for an `m`-player game: all proper non-empty subsets
/// when `samples` covers them, otherwise `samples` draws in proportion to
/// the kernel (each then carries equal weight).
fn design(m: usize, samples: usize, rng: &mut ChaCha8Rng) -> Vec<(u64, f64)> {
    let proper = (1u64 << m) - 2;
    if samples as u64 >= proper {
        return (1..=proper).map(|s| (s, kernel_weight(m, s.count_ones() as usize))).collect();
    }
    let size_mass: Vec<f64> = (1..m).map(|s| (m - 1) as f64 / (s * (m - s)) as f64).collect();
    let total: f64 = size_mass.iter().sum();
    (0..samples)
        .map(|_| {
            let mut t = rng.gen::<f64>() * total;
            let mut size = m - 1;
            for (k, mass) in size_mass.iter().enumerate() {
                if t < *mass {
                    size = k + 1;
                    break;
                }
                t -= mass;
            }
            let mask = index::sample(rng, m, size).iter().fold(0u64, |acc, i| acc | 1 << i);
            (mask, 1.0)
        })
        .collect()
}

/// Constrained weighted least squares: `φ` minimizing
/// `Σ w (value(S) − base − Σ_{i∈S} φ_i)²` subject to `Σ φ = total`.
fn kernel_solve(m: usize, base: f64, total: f64, rows: &[(u64, f64, f64)]) -> Result<Vec<f64>> {
    if m == 1 {
        return Ok(vec![total]);
    }
    let k = m - 1;
    let last = 1u64 << k;
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for &(mask, w, value) in rows {
        let z_last = if mask & last != 0 { 1.0 } else { 0.0 };
        let target = value - base - z_last * total;
        let x: Vec<f64> = (0..k)
            .map(|i| (if mask >> i & 1 == 1 { 1.0 } else { 0.0 }) - z_last)
            .collect();
        for a in 0..k {
            if x[a] != 0.0 {
                rhs[a] += w * x[a] * target;
                for b in 0..k {
                    gram[a * k + b] += w * x[a] * x[b];
                }
            }
        }
    }
    let mut phi = solve_dense(gram, rhs, k)?;
    phi.push(total - phi.iter().sum::<f64>());
    Ok(phi)
}

/// Kernel-weighted least-squares estimate of the GeoShapley components.
///
/// Shapley values come from the `q`-player game; interactions are the
/// Shapley values of the `(q−1)`-player game `S ↦ v(S ∪ GEO) − v(S)`.
/// Both fits enforce efficiency exactly. With `samples ≥ 2^q − 2` every
/// coalition is used and the result equals [`geoshapley_exact`].
pub fn geoshapley_kernel<F: PredictFunction + ?Sized>(
    f: &F,
    instance: &[f64],
    schema: &FeatureSchema,
    background: &BackgroundData,
    samples: usize,
    seed: u64,
) -> Result<GeoShapleyDecomposition> {
    check_schema(schema, instance, background)?;
    let q = schema.players();
    if q > 62 {
        return Err(Error::Capacity(format!("{q} players exceed the 62-player coalition mask")));
    }
    if samples < 2 * q {
        return Err(Error::Parameter(format!("need at least {} samples for {q} players", 2 * q)));
    }
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut value = |s: u64| -> f64 {
        *cache
            .entry(s)
            .or_insert_with(|| coalition_value_unchecked(f, instance, s, schema, background))
    };
    let full = (1u64 << q) - 1;
    let (v_empty, v_full) = (value(0), value(full));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let rows: Vec<(u64, f64, f64)> = design(q, samples, &mut rng)
        .into_iter()
        .map(|(s, w)| (s, w, value(s)))
        .collect();
    let sh = kernel_solve(q, v_empty, v_full - v_empty, &rows)?;

    // Derivative game over the non-location players: bit i ↔ player i + 1.
    let m = q - 1;
    let interactions = if m == 0 {
        Vec::new()
    } else {
        let mut d = |s: u64| value(s << 1 | 1) - value(s << 1);
        let d_empty = d(0);
        let d_full = d((1u64 << m) - 1);
        let rows: Vec<(u64, f64, f64)> = if m == 1 {
            Vec::new()
        } else {
            design(m, samples, &mut rng)
                .into_iter()
                .map(|(s, w)| (s, w, d(s)))
                .collect()
        };
        kernel_solve(m, d_empty, d_full - d_empty, &rows)?
    };
    Ok(assemble(v_empty, v_full, &sh, interactions))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRow {
    pub component: String,
    pub mean_abs_value: f64,
    pub rank: usize,
}

/// Mean absolute value of every component across instances, largest first
/// (ties keep component order: GEO, features, interactions).
pub fn summarize_importance(
    decompositions: &[GeoShapleyDecomposition],
    schema: &FeatureSchema,
) -> Result<Vec<ImportanceRow>> {
    if decompositions.is_empty() {
        return Err(Error::Data("no decompositions to summarize".into()));
    }
    let m = schema.players() - 1;
    if decompositions.iter().any(|d| d.phi_j.len() != m || d.phi_geo_j.len() != m) {
        return Err(Error::Contract(format!("every decomposition must have {m} features")));
    }
    let names = schema.non_geo_names();
    let count = decompositions.len() as f64;
    let mean_abs = |get: &dyn Fn(&GeoShapleyDecomposition) -> f64| {
        decompositions.iter().map(|d| get(d).abs()).sum::<f64>() / count
    };
    let mut rows = vec![("GEO".to_string(), mean_abs(&|d| d.phi_geo))];
    for (j, name) in names.iter().enumerate() {
        rows.push((name.to_string(), mean_abs(&|d| d.phi_j[j])));
    }
    for (j, name) in names.iter().enumerate() {
        rows.push((format!("GEO x {name}"), mean_abs(&|d| d.phi_geo_j[j])));
    }
    rows.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(i, (component, mean_abs_value))| ImportanceRow {
            component,
            mean_abs_value,
            rank: i + 1,
        })
        .collect())
}

/// `unit_id,phi_0,phi_geo,phi_<f>…,phi_geo_x_<f>…,prediction`.
pub fn attribution_csv(ids: &[String], decompositions: &[GeoShapleyDecomposition], schema: &FeatureSchema) -> Result<String> {
    if ids.len() != decompositions.len() {
        return Err(Error::Contract("one unit id per decomposition required".into()));
    }
    let names = schema.non_geo_names();
    let mut out = String::from("unit_id,phi_0,phi_geo");
    for n in &names {
        write!(out, ",phi_{n}").unwrap();
    }
    for n in &names {
        write!(out, ",phi_geo_x_{n}").unwrap();
    }
    out.push_str(",prediction\n");
    for (id, d) in ids.iter().zip(decompositions) {
        write!(out, "{id},{:.8e},{:.8e}", d.phi_0, d.phi_geo).unwrap();
        for v in d.phi_j.iter().chain(&d.phi_geo_j) {
            write!(out, ",{v:.8e}").unwrap();
        }
        writeln!(out, ",{:.8e}", d.prediction).unwrap();
    }
    Ok(out)
}

pub fn importance_csv(rows: &[ImportanceRow]) -> String {
    let mut out = String::from("component,mean_abs_value,rank\n");
    for r in rows {
        writeln!(out, "{},{:.8e},{}", r.component, r.mean_abs_value, r.rank).unwrap();
    }
    out
}
