//! Shared test oracles, independent of the library's implementation paths.

#![allow(dead_code)]

use ctraj::manifold::ManifoldElement;
use ctraj::solver::FactorEval;
use ctraj::Result;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

/// Kalman filter + Rauch-Tung-Striebel smoother for a scalar-position WNOA
/// chain: state `(x, ẋ)`, transition `Φ(dt) = [[1, dt], [0, 1]]`, process
/// noise `Q(dt) = qc·[[dt³/3, dt²/2], [dt²/2, dt]]`, position measurements.
pub struct RtsOracle {
    pub times: Vec<f64>,
    pub means: Vec<Vector2<f64>>,
    pub covs: Vec<Matrix2<f64>>,
}

pub fn phi(dt: f64) -> Matrix2<f64> {
    Matrix2::new(1.0, dt, 0.0, 1.0)
}

pub fn q_wnoa(dt: f64, qc: f64) -> Matrix2<f64> {
    Matrix2::new(dt.powi(3) / 3.0, dt * dt / 2.0, dt * dt / 2.0, dt) * qc
}

/// Runs the forward filter and backward smoother.
///
/// `measurements[k]` is `Some(z)` when a position measurement exists at
/// `times[k]`; `None` entries are prediction-only steps (used to read the
/// smoothed state at interpolation query times).
pub fn rts_smooth(
    times: &[f64],
    measurements: &[Option<f64>],
    mu0: Vector2<f64>,
    p0: Matrix2<f64>,
    qc: f64,
    r: f64,
) -> RtsOracle {
    let n = times.len();
    let h = nalgebra::RowVector2::new(1.0, 0.0);

    let mut x_filt = Vec::with_capacity(n);
    let mut p_filt = Vec::with_capacity(n);
    let mut x_pred = Vec::with_capacity(n);
    let mut p_pred = Vec::with_capacity(n);

    let mut x = mu0;
    let mut p = p0;
    for k in 0..n {
        if k > 0 {
            let dt = times[k] - times[k - 1];
            let f = phi(dt);
            x = f * x;
            p = f * p * f.transpose() + q_wnoa(dt, qc);
        }
        x_pred.push(x);
        p_pred.push(p);
        if let Some(z) = measurements[k] {
            let s = (h * p * h.transpose())[(0, 0)] + r * r;
            let k_gain = p * h.transpose() / s;
            x += k_gain * (z - (h * x)[(0, 0)]);
            p = (Matrix2::identity() - k_gain * h) * p;
            p = (p + p.transpose()) * 0.5;
        }
        x_filt.push(x);
        p_filt.push(p);
    }

    // backward pass
    let mut means = x_filt.clone();
    let mut covs = p_filt.clone();
    for k in (0..n - 1).rev() {
        let dt = times[k + 1] - times[k];
        let f = phi(dt);
        let c = p_filt[k] * f.transpose() * p_pred[k + 1].try_inverse().unwrap();
        means[k] = x_filt[k] + c * (means[k + 1] - x_pred[k + 1]);
        covs[k] = p_filt[k] + c * (covs[k + 1] - p_pred[k + 1]) * c.transpose();
        covs[k] = (covs[k] + covs[k].transpose()) * 0.5;
    }

    RtsOracle {
        times: times.to_vec(),
        means,
        covs,
    }
}

/// Scalar position measurement on a stacked `(x, ẋ)` vector-space state.
pub struct PositionFactor {
    pub bindings: Vec<usize>,
    pub z: f64,
}

impl FactorEval for PositionFactor {
    fn dim(&self) -> usize {
        1
    }
    fn bindings(&self) -> &[usize] {
        &self.bindings
    }
    fn eval(&self, vars: &[&ManifoldElement]) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let e = DVector::from_element(1, vars[0].data[0] - self.z);
        let mut j = DMatrix::zeros(1, vars[0].data.len());
        j[(0, 0)] = 1.0;
        Ok((e, vec![j]))
    }
}

/// Independent de Boor point evaluation for scalar B-splines on standard
/// knots `tau` (length = control points + order).
pub fn de_boor(tau: &[f64], cps: &[f64], k: usize, t: f64) -> f64 {
    let span = tau.partition_point(|&x| x <= t) - 1;
    let mut d: Vec<f64> = (0..k).map(|j| cps[span + 1 + j - k]).collect();
    for r in 1..k {
        for j in (r..k).rev() {
            let i = span + 1 + j - k;
            let alpha = (t - tau[i]) / (tau[i + k - r] - tau[i]);
            d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j];
        }
    }
    d[k - 1]
}
