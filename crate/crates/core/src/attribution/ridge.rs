use super::solve::solve_dense;
use super::PredictFunction;
use crate::error::{Error, Result};

/// Linear model fitted by ridge regression; the intercept is not penalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Ridge {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl Ridge {
    pub fn new(coefficients: Vec<f64>, intercept: f64) -> Self {
        Self {
            coefficients,
            intercept,
        }
    }

    pub fn fit(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<Self> {
        let n = x.len();
        let p = x.first().map(Vec::len).unwrap_or(0);
        if n == 0 || p == 0 || y.len() != n || x.iter().any(|r| r.len() != p) {
            return Err(Error::dim("Ridge::fit", &[n, p], &[y.len()]));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Parameter(format!("ridge penalty must be ≥ 0, got {lambda}")));
        }
        let mean: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let ybar = y.iter().sum::<f64>() / n as f64;
        let mut gram = vec![0.0; p * p];
        let mut rhs = vec![0.0; p];
        for (r, yi) in x.iter().zip(y) {
            for a in 0..p {
                let ca = r[a] - mean[a];
                rhs[a] += ca * (yi - ybar);
                for b in 0..p {
                    gram[a * p + b] += ca * (r[b] - mean[b]);
                }
            }
        }
        for a in 0..p {
            gram[a * p + a] += lambda;
        }
        let coefficients = solve_dense(gram, rhs, p)?;
        let intercept = ybar - coefficients.iter().zip(&mean).map(|(b, m)| b * m).sum::<f64>();
        Ok(Self {
            coefficients,
            intercept,
        })
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

impl PredictFunction for Ridge {
    fn predict(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self.predict_one(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_linear_relation() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 1.5 + 2.0 * r[0] - 3.0 * r[1]).collect();
        let m = Ridge::fit(&x, &y, 0.0).unwrap();
        assert!((m.coefficients[0] - 2.0).abs() < 1e-10);
        assert!((m.coefficients[1] + 3.0).abs() < 1e-10);
        assert!((m.intercept - 1.5).abs() < 1e-10);
        let shrunk = Ridge::fit(&x, &y, 100.0).unwrap();
        assert!(shrunk.coefficients[0].abs() < 2.0);
    }
}
