//! Exact posterior of a Gaussian-mixture prior under a linear Gaussian
//! measurement.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::{log_sum_exp, GmmPrior};
use crate::measure::MeasurementOperator;
use crate::tensor::Tensor;

/// Largest dimension for which the dense oracle is offered.
pub const MAX_ORACLE_DIM: usize = 64;

/// `p(x | y)` for `y = A x + sigma_y * noise` and a mixture prior.
///
/// Per component `S = A C A^T + s^2 I`, `C' = C - C A^T S^-1 A C`,
/// `m' = m + C A^T S^-1 (y - A m)` and `w' ~ w N(y; A m, S)`.
pub fn gmm_posterior_exact(prior: &GmmPrior, op: &MeasurementOperator, sigma_y: f64, y: &Tensor) -> Result<GmmPrior> {
    let d = prior.dim();
    if d > MAX_ORACLE_DIM {
        return Err(Error::invalid(alloc::format!("oracle limited to {MAX_ORACLE_DIM} dimensions, got {d}")));
    }
    if !op.is_linear() {
        return Err(Error::invalid("oracle needs a linear operator"));
    }
    if !(sigma_y > 0.0) {
        return Err(Error::invalid("exact conditioning needs sigma_y > 0"));
    }
    if op.input_shape().iter().product::<usize>() != d {
        return Err(Error::shape("oracle", &[d], op.input_shape()));
    }
    let m = y.numel();
    let a = DMatrix::from_row_slice(m, d, &op.matrix()?);
    let yv = DVector::from_column_slice(y.data());
    let mut log_w = Vec::with_capacity(prior.n_components());
    let mut means = Vec::with_capacity(prior.n_components());
    let mut covs = Vec::with_capacity(prior.n_components());
    for k in 0..prior.n_components() {
        let c = DMatrix::from_row_slice(d, d, &prior.covariances()[k]);
        let mu = DVector::from_column_slice(&prior.means()[k]);
        let ca_t = &c * a.transpose();
        let s = &a * &ca_t + DMatrix::identity(m, m) * (sigma_y * sigma_y);
        let chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("innovation covariance is not positive definite".into()))?;
        let resid = &yv - &a * &mu;
        let sol = chol.solve(&resid);
        let gain_t = chol.solve(&ca_t.transpose()); // S^-1 A C
        let mean = &mu + &ca_t * &sol;
        let cov = &c - &ca_t * &gain_t;
        let cov = (&cov + cov.transpose()) * 0.5;
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| libm::log(*v)).sum::<f64>();
        let quad = resid.dot(&sol);
        let w = prior.weights()[k];
        let lw = if w > 0.0 { libm::log(w) } else { f64::NEG_INFINITY };
        log_w.push(lw - 0.5 * (logdet + quad + m as f64 * libm::log(2.0 * core::f64::consts::PI)));
        means.push(mean.iter().copied().collect::<Vec<f64>>());
        let mut rows = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                rows.push(cov[(i, j)]);
            }
        }
        covs.push(rows);
    }
    let lse = log_sum_exp(&log_w);
    let mut weights: Vec<f64> = log_w.iter().map(|l| libm::exp(l - lse)).collect();
    crate::gmm::normalize_weights(&mut weights);
    GmmPrior::new(weights, means, covs)
}
