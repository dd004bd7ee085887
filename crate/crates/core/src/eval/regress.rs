//! Ridge regression for flows and a bilinear model for OD counts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::encoder::Params;
use crate::error::{Error, Result};
use crate::trainer::Adam;

/// Mean absolute and root-mean-square error of `pred` against `truth`.
pub fn mae_rmse(truth: &[f64], pred: &[f64]) -> (f64, f64) {
    assert_eq!(truth.len(), pred.len());
    if truth.is_empty() {
        return (0.0, 0.0);
    }
    let n = truth.len() as f64;
    let (abs, sq) = truth.iter().zip(pred).fold((0.0, 0.0), |(a, s), (t, p)| (a + (t - p).abs(), s + (t - p) * (t - p)));
    let (mae, rmse) = (abs / n, (sq / n).sqrt());
    assert!(mae <= rmse * (1.0 + 1e-12) + 1e-12, "MAE {mae} exceeds RMSE {rmse}");
    (mae, rmse)
}

/// L2-regularized least squares with an unpenalized intercept.
#[derive(Clone, Debug)]
pub struct Ridge {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl Ridge {
    /// Solves `(Xc^T Xc + lambda I) w = Xc^T yc` on centered data by Cholesky.
    pub fn fit(x: &Mat, y: &[f64], lambda: f64) -> Result<Self> {
        let (n, d) = x.dim();
        if n == 0 || y.len() != n {
            return Err(Error::Eval(format!("ridge needs matching non-empty data, got {n} rows and {} targets", y.len())));
        }
        let xm: Vec<f64> = (0..d).map(|k| x.column(k).sum() / n as f64).collect();
        let ym = y.iter().sum::<f64>() / n as f64;
        let xc = DMatrix::from_fn(n, d, |i, k| x[[i, k]] - xm[k]);
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - ym));
        let mut a = xc.transpose() * &xc;
        for k in 0..d {
            a[(k, k)] += lambda;
        }
        let rhs = xc.transpose() * yc;
        let w = match a.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => a.lu().solve(&rhs).ok_or_else(|| Error::Eval("singular ridge system".into()))?,
        };
        let weights: Vec<f64> = w.iter().copied().collect();
        let intercept = ym - weights.iter().zip(&xm).map(|(w, m)| w * m).sum::<f64>();
        Ok(Self { weights, intercept })
    }

    pub fn predict(&self, x: &Mat) -> Vec<f64> {
        x.rows().into_iter().map(|r| self.intercept + r.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BilinearConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for BilinearConfig {
    fn default() -> Self {
        Self { steps: 500, learning_rate: 0.01 }
    }
}

/// `score(i, j) = h_i^T W h_j`.
#[derive(Clone, Debug)]
pub struct Bilinear {
    pub w: Mat,
}

impl Bilinear {
    /// Fits `W` from zero by Adam on the mean squared error over the pairs
    /// where `mask` is 1.
    pub fn fit(h: &Mat, target: &Mat, mask: &Mat, cfg: &BilinearConfig) -> Self {
        let d = h.ncols();
        let count = mask.sum().max(1.0);
        let mut params = Params::new();
        params.insert("w".into(), Mat::zeros((d, d)));
        let mut adam = Adam::new();
        for _ in 0..cfg.steps {
            let s = h.dot(&params["w"]).dot(&h.t());
            let r = (s - target) * mask * (2.0 / count);
            let mut grads = Params::new();
            grads.insert("w".into(), h.t().dot(&r).dot(h));
            adam.step(&mut [&mut params], &grads, cfg.learning_rate);
        }
        Self { w: params.remove("w").unwrap() }
    }

    pub fn scores(&self, h: &Mat) -> Mat {
        h.dot(&self.w).dot(&h.t())
    }

    pub fn score(&self, hi: &[f64], hj: &[f64]) -> f64 {
        let d = hi.len();
        (0..d).map(|a| hi[a] * (0..d).map(|b| self.w[[a, b]] * hj[b]).sum::<f64>()).sum()
    }
}
