use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::weights::SpatialWeights;
use crate::error::{Error, Result};

pub const DEFAULT_PERMUTATIONS: usize = 999;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LocalClass {
    HighHigh,
    LowLow,
    HighLow,
    LowHigh,
    NotSignificant,
}

impl fmt::Display for LocalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HighHigh => "HH",
            Self::LowLow => "LL",
            Self::HighLow => "HL",
            Self::LowHigh => "LH",
            Self::NotSignificant => "NS",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUnit {
    /// `z_x,i · (W z_y)_i` on standardized values.
    pub statistic: f64,
    pub lag: f64,
    pub pseudo_p: f64,
    pub class: LocalClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoranResult {
    pub statistic: f64,
    pub expectation: f64,
    /// Standardized against the permutation distribution.
    pub z_score: f64,
    pub pseudo_p: f64,
    pub permutations: usize,
    /// Filled by [`local_bivariate_moran`] only.
    pub local: Vec<LocalUnit>,
}

fn centred(x: &[f64], what: &str) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("{what} contains non-finite values")));
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let z: Vec<f64> = x.iter().map(|v| v - mean).collect();
    if z.iter().all(|v| *v == 0.0) {
        return Err(Error::Statistical(format!("constant attribute: {what} has zero variance")));
    }
    Ok(z)
}

fn check_inputs(n: usize, w: &SpatialWeights) -> Result<()> {
    if n < 3 {
        return Err(Error::Statistical(format!("Moran's I needs n ≥ 3 units, got {n}")));
    }
    if w.len() != n {
        return Err(Error::dim("moran weights", &[n], &[w.len(), w.len()]));
    }
    if w.s0() <= 0.0 {
        return Err(Error::Statistical("weights matrix has no links".into()));
    }
    Ok(())
}

fn statistic(zx: &[f64], zy: &[f64], w: &SpatialWeights, s0: f64) -> f64 {
    let n = zx.len() as f64;
    let lag = w.lag(zy);
    let cross: f64 = zx.iter().zip(&lag).map(|(a, b)| a * b).sum();
    let sxx: f64 = zx.iter().map(|v| v * v).sum();
    let syy: f64 = zy.iter().map(|v| v * v).sum();
    n / s0 * cross / (sxx * syy).sqrt()
}

/// Folded pseudo p-value: the smaller tail, `(count + 1) / (perms + 1)`.
fn folded_p(observed: f64, sims: &[f64]) -> f64 {
    let perms = sims.len();
    let mut larger = sims.iter().filter(|&&s| s >= observed).count();
    if perms - larger < larger {
        larger = perms - larger;
    }
    (larger + 1) as f64 / (perms + 1) as f64
}

fn z_from(observed: f64, sims: &[f64]) -> f64 {
    if sims.len() < 2 {
        return f64::NAN;
    }
    let m = sims.iter().sum::<f64>() / sims.len() as f64;
    let var = sims.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (sims.len() - 1) as f64;
    (observed - m) / var.sqrt()
}

fn global(x: &[f64], y: Option<&[f64]>, w: &SpatialWeights, permutations: usize, seed: u64) -> Result<MoranResult> {
    let n = x.len();
    check_inputs(n, w)?;
    let zx = centred(x, "x")?;
    let zy = match y {
        Some(y) if y.len() != n => return Err(Error::dim("bivariate moran", &[n], &[y.len()])),
        Some(y) => centred(y, "y")?,
        None => zx.clone(),
    };
    let s0 = w.s0();
    let observed = statistic(&zx, &zy, w, s0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = zy.clone();
    let mut sims = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        let lhs = if y.is_some() { &zx } else { &shuffled };
        sims.push(statistic(lhs, &shuffled, w, s0));
    }
    Ok(MoranResult {
        statistic: observed,
        expectation: -1.0 / (n as f64 - 1.0),
        z_score: z_from(observed, &sims),
        pseudo_p: folded_p(observed, &sims),
        permutations,
        local: Vec::new(),
    })
}

/// Global Moran's I with a random-relabelling permutation test.
pub fn global_moran(x: &[f64], w: &SpatialWeights, permutations: usize, seed: u64) -> Result<MoranResult> {
    global(x, None, w, permutations, seed)
}

/// Bivariate Moran's I between `x` and the spatial lag of `y`; the
/// permutation test shuffles `y` only.
pub fn bivariate_moran(
    x: &[f64],
    y: &[f64],
    w: &SpatialWeights,
    permutations: usize,
    seed: u64,
) -> Result<MoranResult> {
    global(x, Some(y), w, permutations, seed)
}

fn standardized(z: &[f64]) -> Vec<f64> {
    let sd = (z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64).sqrt();
    z.iter().map(|v| v / sd).collect()
}

/// Local bivariate Moran with conditional permutation inference.
///
/// Unit `i` keeps its own `x` value; its neighbours' `y` values are
/// replaced by a draw without replacement from the other `n − 1` units.
/// The returned global fields are those of [`bivariate_moran`]. With
/// standardized values the mean of the local statistics is `I · S₀ / n`.
pub fn local_bivariate_moran(
    x: &[f64],
    y: &[f64],
    w: &SpatialWeights,
    permutations: usize,
    alpha: f64,
    seed: u64,
) -> Result<MoranResult> {
    let mut result = bivariate_moran(x, y, w, permutations, seed)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let n = x.len();
    let zx = standardized(&centred(x, "x")?);
    let zy = standardized(&centred(y, "y")?);
    let lag = w.lag(&zy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut local = Vec::with_capacity(n);
    for i in 0..n {
        let observed = zx[i] * lag[i];
        let nbrs = w.neighbors(i);
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let mut sims = Vec::with_capacity(permutations);
        for _ in 0..permutations {
            let draw = index::sample(&mut rng, n - 1, nbrs.len());
            let sim_lag: f64 = draw.iter().zip(&nbrs).map(|(d, (_, wij))| wij * zy[others[d]]).sum();
            sims.push(zx[i] * sim_lag);
        }
        let pseudo_p = if nbrs.is_empty() { 1.0 } else { folded_p(observed, &sims) };
        let class = if pseudo_p > alpha {
            LocalClass::NotSignificant
        } else {
            match (zx[i] > 0.0, lag[i] > 0.0) {
                (true, true) => LocalClass::HighHigh,
                (false, false) => LocalClass::LowLow,
                (true, false) => LocalClass::HighLow,
                (false, true) => LocalClass::LowHigh,
            }
        };
        local.push(LocalUnit {
            statistic: observed,
            lag: lag[i],
            pseudo_p,
            class,
        });
    }
    result.local = local;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Double loop over the formula with raw weights.
    fn oracle(x: &[f64], y: &[f64], w: &SpatialWeights) -> f64 {
        let n = x.len();
        let mx = x.iter().sum::<f64>() / n as f64;
        let my = y.iter().sum::<f64>() / n as f64;
        let (mut num, mut s0) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                num += w.get(i, j) * (x[i] - mx) * (y[j] - my);
                s0 += w.get(i, j);
            }
        }
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
        n as f64 / s0 * num / (sxx * syy).sqrt()
    }

    #[test]
    fn checkerboard_is_minus_one() {
        let w = SpatialWeights::rook_grid(2, 2, false).unwrap();
        let r = global_moran(&[1.0, -1.0, -1.0, 1.0], &w, 99, 1).unwrap();
        assert!((r.statistic + 1.0).abs() < 1e-12);
        assert_eq!(r.expectation, -1.0 / 3.0);
    }

    #[test]
    fn expectation_closed_form() {
        let w = SpatialWeights::rook_grid(1, 5, true).unwrap();
        let r = global_moran(&[1.0, 2.0, 3.0, 4.0, 6.0], &w, 0, 1).unwrap();
        assert_eq!(r.expectation, -0.25);
        assert_eq!(r.pseudo_p, 1.0);
    }

    #[test]
    fn constant_attribute_rejected() {
        let w = SpatialWeights::rook_grid(1, 3, true).unwrap();
        let e = global_moran(&[2.0; 3], &w, 9, 0).unwrap_err();
        assert!(e.to_string().contains("constant attribute"));
        assert!(bivariate_moran(&[1.0, 2.0, 3.0], &[1.0; 3], &w, 9, 0).is_err());
    }

    #[test]
    fn two_components_maximal() {
        // chain 0-1-2 and 3-4-5 with no link between them
        let mut data = vec![0.0; 36];
        for (a, b) in [(0, 1), (1, 2), (3, 4), (4, 5)] {
            data[a * 6 + b] = 1.0;
            data[b * 6 + a] = 1.0;
        }
        let w = SpatialWeights::new(6, data, true).unwrap();
        let x = [2.0, 2.0, 2.0, 7.0, 7.0, 7.0];
        let r = global_moran(&x, &w, 199, 3).unwrap();
        assert!(r.statistic > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut p = x.to_vec();
            p.shuffle(&mut rng);
            assert!(global_moran(&p, &w, 0, 0).unwrap().statistic <= r.statistic + 1e-12);
        }
    }

    #[test]
    fn bivariate_identities_and_oracle() {
        let w = SpatialWeights::rook_grid(3, 3, true).unwrap();
        let x = random(9, 1);
        let y = random(9, 2);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let uni = global_moran(&x, &w, 0, 0).unwrap().statistic;
        assert_eq!(bivariate_moran(&x, &x, &w, 0, 0).unwrap().statistic, uni);
        assert!((bivariate_moran(&x, &neg, &w, 0, 0).unwrap().statistic + uni).abs() < 1e-15);
        let b = bivariate_moran(&x, &y, &w, 0, 0).unwrap().statistic;
        assert!((b - oracle(&x, &y, &w)).abs() < 1e-12);
        let raw = SpatialWeights::rook_grid(3, 3, false).unwrap();
        let b = bivariate_moran(&x, &y, &raw, 0, 0).unwrap().statistic;
        assert!((b - oracle(&x, &y, &raw)).abs() < 1e-12);
    }

    #[test]
    fn local_mean_matches_global() {
        let w = SpatialWeights::rook_grid(4, 5, false).unwrap();
        let (x, y) = (random(20, 5), random(20, 6));
        let r = local_bivariate_moran(&x, &y, &w, 19, 0.05, 1).unwrap();
        let mean = r.local.iter().map(|u| u.statistic).sum::<f64>() / 20.0;
        assert!((mean - r.statistic * w.s0() / 20.0).abs() < 1e-10);
    }

    #[test]
    fn alpha_zero_and_sign_rule() {
        let w = SpatialWeights::rook_grid(3, 3, true).unwrap();
        let x = random(9, 7);
        let r = local_bivariate_moran(&x, &x, &w, 99, 0.0, 1).unwrap();
        assert!(r.local.iter().all(|u| u.class == LocalClass::NotSignificant));
        let r = local_bivariate_moran(&x, &x, &w, 99, 1.0, 1).unwrap();
        for (u, xi) in r.local.iter().zip(&x) {
            let mean = x.iter().sum::<f64>() / 9.0;
            if *xi > mean && u.lag > 0.0 {
                assert_eq!(u.class, LocalClass::HighHigh);
            }
            assert!(u.pseudo_p > 0.0 && u.pseudo_p <= 1.0);
        }
    }

    #[test]
    fn planted_hot_spot() {
        let w = SpatialWeights::rook_grid(9, 9, true).unwrap();
        let mut x = vec![0.0; 81];
        for r in 3..6 {
            for c in 3..6 {
                x[r * 9 + c] = 1.0;
            }
        }
        let a = local_bivariate_moran(&x, &x, &w, 999, 0.05, 42).unwrap();
        let b = local_bivariate_moran(&x, &x, &w, 999, 0.05, 42).unwrap();
        assert_eq!(a, b);
        for cell in [4 * 9 + 4, 3 * 9 + 4, 5 * 9 + 4, 4 * 9 + 3, 4 * 9 + 5] {
            assert_eq!(a.local[cell].class, LocalClass::HighHigh, "cell {cell}: {:?}", a.local[cell]);
        }
        assert!(a.local.iter().all(|u| u.class != LocalClass::HighLow));
    }

    proptest! {
        #[test]
        fn affine_invariance_and_bounds(seed in 0u64..1000, a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0], b in -10.0f64..10.0) {
            let w = SpatialWeights::rook_grid(3, 4, true).unwrap();
            let x = random(12, seed);
            let t: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let i1 = global_moran(&x, &w, 0, 0).unwrap().statistic;
            let i2 = global_moran(&t, &w, 0, 0).unwrap().statistic;
            prop_assert!((i1 - i2).abs() < 1e-10);
            prop_assert!(i1.abs() <= 1.0 + 1e-9);
        }
    }
}
