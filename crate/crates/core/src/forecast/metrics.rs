use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Accuracy summary. `r_squared` is NaN when the truth is constant and
/// `mape` is NaN when no truth value is positive; `notes` explains either.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub r_squared: f64,
    pub mape: f64,
    pub count: usize,
    /// Truth values ≤ 0 left out of MAPE.
    pub mape_excluded: usize,
    pub max_abs_residual: f64,
    pub mean_residual: f64,
    pub notes: Vec<String>,
}

pub const METRIC_HEADER: &str = "mae,rmse,r_squared,mape";

impl MetricsReport {
    /// Table columns in order MAE, RMSE, R², MAPE (percent).
    pub fn csv_fields(&self) -> String {
        format!("{:.6},{:.6},{:.6},{:.4}", self.mae, self.rmse, self.r_squared, self.mape)
    }
}

pub fn evaluate<T: Scalar>(predictions: &[T], truth: &[T]) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::Data("cannot evaluate an empty prediction set".into()));
    }
    if predictions.len() != truth.len() {
        return Err(Error::dim("evaluate", &[predictions.len()], &[truth.len()]));
    }
    let p: Vec<f64> = predictions.iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = truth.iter().map(|v| v.as_f64()).collect();
    let n = p.len() as f64;
    let e: Vec<f64> = p.iter().zip(&y).map(|(a, b)| a - b).collect();
    let mae = e.iter().map(|v| v.abs()).sum::<f64>() / n;
    let sse = e.iter().map(|v| v * v).sum::<f64>();
    let rmse = (sse / n).sqrt();
    let mean = y.iter().sum::<f64>() / n;
    let sst = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let mut notes = Vec::new();
    let r_squared = if sst > 0.0 {
        1.0 - sse / sst
    } else {
        notes.push("r_squared undefined: truth values are constant".to_string());
        f64::NAN
    };
    let pct: Vec<f64> = e.iter().zip(&y).filter(|(_, t)| **t > 0.0).map(|(e, t)| (e / t).abs()).collect();
    let mape_excluded = y.len() - pct.len();
    let mape = if pct.is_empty() {
        notes.push("mape undefined: no positive truth values".to_string());
        f64::NAN
    } else {
        100.0 * pct.iter().sum::<f64>() / pct.len() as f64
    };
    if mape_excluded > 0 && !pct.is_empty() {
        notes.push(format!("mape excludes {mape_excluded} zero-truth values"));
    }
    Ok(MetricsReport {
        mae,
        rmse,
        r_squared,
        mape,
        count: p.len(),
        mape_excluded,
        max_abs_residual: e.iter().fold(0.0, |m, v| m.max(v.abs())),
        mean_residual: e.iter().sum::<f64>() / n,
        notes,
    })
}

/// Week-on-week percent change per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct RateOfChange {
    /// `None` for units whose previous value is not positive.
    pub per_unit: Vec<Option<f64>>,
    pub average: f64,
    pub excluded: Vec<usize>,
}

pub fn rate_of_change<T: Scalar>(previous: &[T], next: &[T]) -> Result<RateOfChange> {
    if previous.len() != next.len() {
        return Err(Error::dim("rate_of_change", &[previous.len()], &[next.len()]));
    }
    let mut per_unit = Vec::with_capacity(previous.len());
    let mut excluded = Vec::new();
    for (i, (p, q)) in previous.iter().zip(next).enumerate() {
        let (p, q) = (p.as_f64(), q.as_f64());
        if p > 0.0 {
            per_unit.push(Some(100.0 * (q - p) / p));
        } else {
            per_unit.push(None);
            excluded.push(i);
        }
    }
    let included: Vec<f64> = per_unit.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::Data("rate of change undefined: no unit has a positive previous value".into()));
    }
    Ok(RateOfChange {
        average: included.iter().sum::<f64>() / included.len() as f64,
        per_unit,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_fit() {
        let r = evaluate(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!((r.mae, r.rmse, r.r_squared, r.mape), (0.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn hand_computed_case() {
        let r = evaluate(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r.mae - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.rmse - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(r.r_squared.abs() < 1e-15);
        assert!((r.mape - (100.0 + 0.0 + 100.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(evaluate::<f64>(&[], &[]), Err(Error::Data(_))));
        let r = evaluate(&[1.0, 2.0], &[3.0, 3.0]).unwrap();
        assert!(r.r_squared.is_nan());
        assert!(!r.notes.is_empty());
        let r = evaluate(&[1.0, 2.0], &[0.0, 4.0]).unwrap();
        assert_eq!(r.mape_excluded, 1);
        assert!((r.mape - 50.0).abs() < 1e-12);
    }

    #[test]
    fn table_row_order() {
        let r = MetricsReport {
            mae: 0.071,
            rmse: 0.136,
            r_squared: 0.927,
            mape: 18.86,
            count: 1,
            mape_excluded: 0,
            max_abs_residual: 0.0,
            mean_residual: 0.0,
            notes: vec![],
        };
        assert_eq!(METRIC_HEADER, "mae,rmse,r_squared,mape");
        assert_eq!(r.csv_fields(), "0.071000,0.136000,0.927000,18.8600");
    }

    #[test]
    fn rates() {
        let r = rate_of_change(&[100.0], &[114.16]).unwrap();
        assert!((r.per_unit[0].unwrap() - 14.16).abs() < 1e-9);
        let r = rate_of_change(&[10.0, 20.0], &[5.0, 30.0]).unwrap();
        assert_eq!(r.per_unit, vec![Some(-50.0), Some(50.0)]);
        assert_eq!(r.average, 0.0);
        let r = rate_of_change(&[3.0, 0.0], &[3.0, 1.0]).unwrap();
        assert_eq!(r.per_unit, vec![Some(0.0), None]);
        assert_eq!(r.excluded, vec![1]);
        assert!(rate_of_change(&[0.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn metric_identities(pairs in prop::collection::vec((0.1f64..100.0, -5.0f64..5.0), 2..40)) {
            let truth: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
            let r = evaluate(&pred, &truth).unwrap();
            prop_assert!(r.rmse >= r.mae && r.mae >= 0.0);
            prop_assert!(r.r_squared.is_nan() || r.r_squared <= 1.0);
            let zero = pairs.iter().all(|p| p.1 == 0.0);
            prop_assert_eq!(r.mape == 0.0, zero);
        }
    }
}
