//! Gaussian-mixture priors with exact VP-marginal scores.
//!
//! Under the VP forward process `x_t = sqrt(a) x_0 + sqrt(1 - a) eps` a
//! mixture `sum_k w_k N(mu_k, S_k)` stays a mixture,
//! `sum_k w_k N(sqrt(a) mu_k, a S_k + (1 - a) I)`. Each covariance is stored
//! as `floor * I + Q diag(excess) Q^T` (eigendecomposition with the smallest
//! eigenvalue split off), which makes the time-`t` precision and
//! log-determinant O(d r) to apply.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serialized form: weights, means, row-major covariance matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
struct Factor {
    floor: f64,
    /// `r x d`, rows are orthonormal eigenvectors.
    basis: Vec<f64>,
    excess: Vec<f64>,
    /// Lower Cholesky factor of the covariance, row-major `d x d`.
    chol: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmSpec", into = "GmmSpec")]
pub struct GmmPrior {
    spec: GmmSpec,
    dim: usize,
    factors: Vec<Factor>,
}

impl TryFrom<GmmSpec> for GmmPrior {
    type Error = Error;
    fn try_from(spec: GmmSpec) -> Result<Self> {
        GmmPrior::new(spec.weights, spec.means, spec.covariances)
    }
}

impl From<GmmPrior> for GmmSpec {
    fn from(p: GmmPrior) -> Self {
        p.spec
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(v.iter().map(|x| libm::exp(x - m)).sum::<f64>())
}

/// Per-component quantities at one noise level, kept for Hessian products.
#[derive(Clone, Debug)]
pub struct ScoreEval {
    pub score: Vec<f64>,
    pub responsibilities: Vec<f64>,
    component_scores: Vec<Vec<f64>>,
    /// `(c, w)` where precision = (I - Q^T diag(w) Q) / c.
    precisions: Vec<(f64, Vec<f64>)>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::invalid("mixture needs matching, nonempty weights/means/covariances"));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(alloc::format!("mixture weights sum to {total}, not 1")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("zero-dimensional mixture"));
        }
        let mut factors = Vec::with_capacity(k);
        for (mean, cov) in means.iter().zip(&covariances) {
            if mean.len() != dim || cov.len() != dim * dim {
                return Err(Error::shape("gmm", &[dim, dim], &[mean.len(), cov.len()]));
            }
            factors.push(factorize(cov, dim)?);
        }
        Ok(GmmPrior {
            spec: GmmSpec {
                weights,
                means,
                covariances,
            },
            dim,
            factors,
        })
    }

    /// Single Gaussian.
    pub fn gaussian(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        GmmPrior::new(vec![1.0], vec![mean], vec![covariance])
    }

    /// `N(0, I)` in `d` dimensions.
    pub fn standard(d: usize) -> Result<Self> {
        GmmPrior::gaussian(vec![0.0; d], identity(d))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.spec.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.spec.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.spec.means
    }

    pub fn covariances(&self) -> &[Vec<f64>] {
        &self.spec.covariances
    }

    pub fn spec(&self) -> &GmmSpec {
        &self.spec
    }

    /// Mean of the whole mixture.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (w, mu) in self.spec.weights.iter().zip(&self.spec.means) {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        m
    }

    /// Covariance of the whole mixture (row-major).
    pub fn mixture_covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mean = self.mixture_mean();
        let mut c = vec![0.0; d * d];
        for k in 0..self.n_components() {
            let w = self.spec.weights[k];
            let mu = &self.spec.means[k];
            let s = &self.spec.covariances[k];
            for i in 0..d {
                for j in 0..d {
                    c[i * d + j] += w * (s[i * d + j] + (mu[i] - mean[i]) * (mu[j] - mean[j]));
                }
            }
        }
        c
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape("gmm", &[self.dim], &[x.len()]));
        }
        Ok(())
    }

    /// Component log-densities of the time-marginal at `alpha_bar`, plus the
    /// per-component precision data.
    fn component_terms(&self, x: &[f64], alpha_bar: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<(f64, Vec<f64>)>)> {
        self.check_dim(x)?;
        let a = alpha_bar;
        let sa = libm::sqrt(a);
        let d = self.dim;
        let mut logs = Vec::with_capacity(self.n_components());
        let mut scores = Vec::with_capacity(self.n_components());
        let mut precs = Vec::with_capacity(self.n_components());
        for (k, f) in self.factors.iter().enumerate() {
            let c = a * f.floor + (1.0 - a);
            if !(c > 0.0) {
                return Err(Error::Singular(alloc::format!(
                    "component {k} marginal covariance is singular at alpha_bar = {a}"
                )));
            }
            let delta: Vec<f64> = x
                .iter()
                .zip(&self.spec.means[k])
                .map(|(xi, mi)| xi - sa * mi)
                .collect();
            let w: Vec<f64> = f.excess.iter().map(|e| a * e / (c + a * e)).collect();
            let p_delta = apply_precision(&f.basis, &w, c, &delta);
            let quad: f64 = delta.iter().zip(&p_delta).map(|(u, v)| u * v).sum();
            let logdet = d as f64 * libm::log(c)
                + f.excess.iter().map(|e| libm::log1p(a * e / c)).sum::<f64>();
            let w_k = self.spec.weights[k];
            let log_w = if w_k > 0.0 { libm::log(w_k) } else { f64::NEG_INFINITY };
            logs.push(log_w - 0.5 * (d as f64 * libm::log(2.0 * PI) + logdet + quad));
            scores.push(p_delta.iter().map(|v| -v).collect());
            precs.push((c, w));
        }
        Ok((logs, scores, precs))
    }

    /// `log p_t(x)` for the marginal at `alpha_bar` (`alpha_bar = 1` is the prior).
    pub fn log_density(&self, x: &[f64], alpha_bar: f64) -> Result<f64> {
        let (logs, _, _) = self.component_terms(x, alpha_bar)?;
        Ok(log_sum_exp(&logs))
    }

    /// Exact score of the marginal, with cached terms for [`Self::hessian_vector`].
    pub fn score_eval(&self, x: &[f64], alpha_bar: f64) -> Result<ScoreEval> {
        let (logs, comp, precs) = self.component_terms(x, alpha_bar)?;
        let lse = log_sum_exp(&logs);
        let resp: Vec<f64> = logs.iter().map(|l| libm::exp(l - lse)).collect();
        let mut score = vec![0.0; self.dim];
        for (r, s) in resp.iter().zip(&comp) {
            if *r == 0.0 {
                continue;
            }
            for (a, b) in score.iter_mut().zip(s) {
                *a += r * b;
            }
        }
        Ok(ScoreEval {
            score,
            responsibilities: resp,
            component_scores: comp,
            precisions: precs,
        })
    }

    pub fn score(&self, x: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        Ok(self.score_eval(x, alpha_bar)?.score)
    }

    /// Hessian of `log p_t` times `v`:
    /// `sum_k r_k (-P_k v + s_k (s_k . v)) - s (s . v)`.
    pub fn hessian_vector(&self, eval: &ScoreEval, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for (k, f) in self.factors.iter().enumerate() {
            let r = eval.responsibilities[k];
            if r == 0.0 {
                continue;
            }
            let (c, w) = &eval.precisions[k];
            let pv = apply_precision(&f.basis, w, *c, v);
            let sk = &eval.component_scores[k];
            let skv: f64 = sk.iter().zip(v).map(|(a, b)| a * b).sum();
            for i in 0..d {
                out[i] += r * (skv * sk[i] - pv[i]);
            }
        }
        let sv: f64 = eval.score.iter().zip(v).map(|(a, b)| a * b).sum();
        for i in 0..d {
            out[i] -= eval.score[i] * sv;
        }
        out
    }

    /// Draws `n` samples (categorical component, then `mu + L z`).
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Tensor> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.n_components() - 1;
        for (i, w) in self.spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let d = self.dim;
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let l = &self.factors[k].chol;
        let mu = &self.spec.means[k];
        let data = (0..d)
            .map(|i| mu[i] + (0..=i).map(|j| l[i * d + j] * z[j]).sum::<f64>())
            .collect();
        Tensor::from_parts(vec![d], data)
    }
}

pub(crate) fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn apply_precision(basis: &[f64], w: &[f64], c: f64, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let mut out = v.to_vec();
    for (i, wi) in w.iter().enumerate() {
        if *wi == 0.0 {
            continue;
        }
        let q = &basis[i * d..][..d];
        let proj: f64 = q.iter().zip(v).map(|(a, b)| a * b).sum();
        let s = wi * proj;
        for (o, qj) in out.iter_mut().zip(q) {
            *o -= s * qj;
        }
    }
    for o in &mut out {
        *o /= c;
    }
    out
}

fn factorize(cov: &[f64], d: usize) -> Result<Factor> {
    let m = DMatrix::from_row_slice(d, d, cov);
    let asym = (&m - m.transpose()).abs().max();
    let scale = m.abs().max().max(1e-300);
    if asym > 1e-10 * scale {
        return Err(Error::invalid("covariance is not symmetric"));
    }
    let sym = (&m + m.transpose()) * 0.5;
    let chol = sym
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut chol_rows = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            chol_rows[i * d + j] = l[(i, j)];
        }
    }
    let eig = sym.symmetric_eigen();
    let floor = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(floor > 0.0) {
        return Err(Error::Singular("covariance has a non-positive eigenvalue".into()));
    }
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut basis = Vec::new();
    let mut excess = Vec::new();
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        let e = lam - floor;
        if e > 1e-12 * top {
            basis.extend(eig.eigenvectors.column(i).iter());
            excess.push(e);
        }
    }
    Ok(Factor {
        floor,
        basis,
        excess,
        chol: chol_rows,
    })
}

/// Fits a mixture by k-means++ / Lloyd clustering followed by a
/// probabilistic-PCA covariance per cluster: the top `rank` eigenpairs are
/// kept and the discarded variance (at least `min_floor`) becomes isotropic.
pub fn fit_low_rank<R: Rng + ?Sized>(
    data: &[Tensor],
    k: usize,
    rank: usize,
    min_floor: f64,
    iterations: usize,
    rng: &mut R,
) -> Result<GmmPrior> {
    if data.is_empty() || k == 0 || k > data.len() {
        return Err(Error::invalid("need 1 <= k <= number of points"));
    }
    if !(min_floor > 0.0) {
        return Err(Error::invalid("covariance floor must be positive"));
    }
    let d = data[0].numel();
    if data.iter().any(|x| x.numel() != d) {
        return Err(Error::invalid("inhomogeneous data"));
    }
    let pts: Vec<&[f64]> = data.iter().map(|t| t.data()).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![pts[rng.random_range(0..pts.len())].to_vec()];
    let mut best: Vec<f64> = pts.iter().map(|p| dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = pts.len() - 1;
            for (i, b) in best.iter().enumerate() {
                if u < *b {
                    chosen = i;
                    break;
                }
                u -= b;
            }
            chosen
        } else {
            rng.random_range(0..pts.len())
        };
        centers.push(pts[idx].to_vec());
        for (b, p) in best.iter_mut().zip(&pts) {
            *b = b.min(dist(p, centers.last().unwrap()));
        }
    }

    let mut assign = vec![0usize; pts.len()];
    for _ in 0..iterations.max(1) {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let (arg, _) = centers
                .iter()
                .enumerate()
                .map(|(j, c)| (j, dist(p, c)))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            if assign[i] != arg {
                assign[i] = arg;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in pts.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }

    let mut weights = Vec::new();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for j in 0..k {
        let members: Vec<&[f64]> = pts
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == j)
            .map(|(p, _)| *p)
            .collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let mu: Vec<f64> = (0..d)
            .map(|i| members.iter().map(|p| p[i]).sum::<f64>() / n)
            .collect();
        let mut c = DMatrix::<f64>::zeros(d, d);
        for p in &members {
            let diff = nalgebra::DVector::from_iterator(d, p.iter().zip(&mu).map(|(a, b)| a - b));
            c += &diff * diff.transpose() / n;
        }
        let eig = c.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let keep = rank.min(d);
        let discarded: Vec<f64> = order[keep..].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let floor = if discarded.is_empty() {
            min_floor
        } else {
            (discarded.iter().sum::<f64>() / discarded.len() as f64).max(min_floor)
        };
        let mut cov = identity(d);
        for v in &mut cov {
            *v *= floor;
        }
        for &i in &order[..keep] {
            let e = eig.eigenvalues[i] - floor;
            if e <= 0.0 {
                continue;
            }
            let q = eig.eigenvectors.column(i);
            for r in 0..d {
                for s in 0..d {
                    cov[r * d + s] += e * q[r] * q[s];
                }
            }
        }
        // exact symmetry
        for r in 0..d {
            for s in 0..r {
                let v = 0.5 * (cov[r * d + s] + cov[s * d + r]);
                cov[r * d + s] = v;
                cov[s * d + r] = v;
            }
        }
        weights.push(n);
        means.push(mu);
        covs.push(cov);
    }
    let total: f64 = weights.iter().sum();
    let mut weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    normalize_weights(&mut weights);
    GmmPrior::new(weights, means, covs)
}

/// Rescales so the weights sum to 1 up to rounding.
pub(crate) fn normalize_weights(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_d_mixture() -> GmmPrior {
        GmmPrior::new(
            vec![0.3, 0.7],
            vec![vec![-1.0, 0.5], vec![2.0, -1.0]],
            vec![vec![0.5, 0.1, 0.1, 0.3], vec![0.2, -0.05, -0.05, 0.6]],
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_weights_and_covariances() {
        assert!(GmmPrior::new(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(GmmPrior::gaussian(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(GmmPrior::gaussian(vec![0.0, 0.0], vec![1.0, 0.5, 0.0, 1.0]).is_err());
    }

    #[test]
    fn standard_normal_score_is_minus_x() {
        let p = GmmPrior::standard(3).unwrap();
        for &a in &[1.0, 0.7, 0.2, 1e-3] {
            let s = p.score(&[0.3, -1.2, 2.0], a).unwrap();
            for (si, xi) in s.iter().zip([0.3, -1.2, 2.0]) {
                assert!((si + xi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_mixture_score_on_axis() {
        // components at (+-2, 0); on the x=0 axis the x-score vanishes
        let p = GmmPrior::new(
            vec![0.5, 0.5],
            vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
            vec![identity(2), identity(2)],
        )
        .unwrap();
        let s = p.score(&[0.0, 0.7], 0.5).unwrap();
        assert!(s[0].abs() < 1e-14);
    }

    #[test]
    fn far_tail_follows_nearest_component() {
        let p = GmmPrior::new(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![vec![0.25], vec![0.25]]).unwrap();
        let x = 8.0;
        let s = p.score(&[x], 1.0).unwrap()[0];
        let nearest = -(x - 1.0) / 0.25;
        assert!((s - nearest).abs() < 1e-6);
    }

    #[test]
    fn score_matches_finite_difference_of_log_density() {
        let p = two_d_mixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| 3.0 * rng.random::<f64>() - 1.5).collect();
            let a: f64 = 0.05 + 0.9 * rng.random::<f64>();
            let s = p.score(&x, a).unwrap();
            for i in 0..2 {
                let h = 1e-5;
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (p.log_density(&xp, a).unwrap() - p.log_density(&xm, a).unwrap()) / (2.0 * h);
                assert!((fd - s[i]).abs() < 1e-6, "{fd} vs {}", s[i]);
            }
        }
    }

    #[test]
    fn one_d_score_matches_finite_difference() {
        let p = GmmPrior::new(vec![0.2, 0.8], vec![vec![-2.0], vec![1.5]], vec![vec![0.3], vec![0.8]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = 6.0 * rng.random::<f64>() - 3.0;
            let a = 0.05 + 0.9 * rng.random::<f64>();
            let s = p.score(&[x], a).unwrap()[0];
            let h = 1e-5;
            let fd = (p.log_density(&[x + h], a).unwrap() - p.log_density(&[x - h], a).unwrap()) / (2.0 * h);
            assert!((fd - s).abs() < 1e-6);
        }
    }

    #[test]
    fn hessian_vector_matches_score_difference() {
        let p = two_d_mixture();
        let x = [0.4, -0.2];
        let v = [0.3, 0.9];
        let a = 0.6;
        let eval = p.score_eval(&x, a).unwrap();
        let hv = p.hessian_vector(&eval, &v);
        let h = 1e-5;
        let sp = p.score(&[x[0] + h * v[0], x[1] + h * v[1]], a).unwrap();
        let sm = p.score(&[x[0] - h * v[0], x[1] - h * v[1]], a).unwrap();
        for i in 0..2 {
            let fd = (sp[i] - sm[i]) / (2.0 * h);
            assert!((fd - hv[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn sampling_moments() {
        let p = GmmPrior::standard(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = p.sample(10_000, &mut rng);
        let mut c = [0.0; 4];
        for x in &s {
            let d = x.data();
            c[0] += d[0] * d[0];
            c[1] += d[0] * d[1];
            c[2] += d[1] * d[0];
            c[3] += d[1] * d[1];
        }
        let frob: f64 = c
            .iter()
            .zip([1.0, 0.0, 0.0, 1.0])
            .map(|(a, b)| (a / 1e4 - b) * (a / 1e4 - b))
            .sum::<f64>()
            .sqrt();
        assert!(frob < 0.05 * 2f64.sqrt(), "{frob}");
    }

    #[test]
    fn tiny_covariance_samples_sit_on_mean() {
        let mut cov = identity(3);
        for v in &mut cov {
            *v *= 1e-12;
        }
        let p = GmmPrior::gaussian(vec![1.0, -2.0, 0.5], cov).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for x in p.sample(10, &mut rng) {
            assert!((x.data()[0] - 1.0).abs() < 1e-4);
            assert!((x.data()[1] + 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn fixed_seed_same_draws() {
        let p = two_d_mixture();
        let a = p.sample(5, &mut ChaCha8Rng::seed_from_u64(42));
        let b = p.sample(5, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn low_rank_fit_recovers_clusters() {
        let truth = GmmPrior::new(
            vec![0.5, 0.5],
            vec![vec![-3.0, 0.0, 0.0], vec![3.0, 0.0, 0.0]],
            vec![identity(3), identity(3)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = truth.sample(2000, &mut rng);
        let fit = fit_low_rank(&data, 2, 2, 1e-3, 20, &mut rng).unwrap();
        let mut xs: Vec<f64> = fit.means().iter().map(|m| m[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 3.0).abs() < 0.15 && (xs[1] - 3.0).abs() < 0.15, "{xs:?}");
        assert!((fit.weights()[0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn serde_round_trip_revalidates() {
        let p = two_d_mixture();
        let spec: GmmSpec = p.clone().into();
        let back = GmmPrior::try_from(spec).unwrap();
        assert_eq!(back, p);
    }
}
