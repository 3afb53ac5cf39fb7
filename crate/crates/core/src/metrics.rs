//! Distribution distances, image fidelity and sample diversity.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical inputs.
pub const PSNR_IDENTICAL: f64 = 99.0;

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    same_shape(x, reference, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr peak must be positive"));
    }
    let mse = x.dist_sq(reference)? / x.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * libm::log10(peak * peak / mse))
}

/// Mean SSIM over 7x7 uniform windows (the whole grid if smaller), data
/// range 1. Leading axes are treated as separate channels.
pub fn ssim(x: &Tensor, reference: &Tensor) -> Result<f64> {
    same_shape(x, reference, "ssim")?;
    let shape = x.shape();
    let (h, w) = match shape {
        [n] => (1, *n),
        [.., h, w] => (*h, *w),
        [] => (1, 1),
    };
    let plane = h * w;
    let channels = x.numel() / plane;
    let (c1, c2) = (1e-4, 9e-4);
    let win_h = h.min(7);
    let win_w = w.min(7);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let a = &x.data()[ch * plane..][..plane];
        let b = &reference.data()[ch * plane..][..plane];
        for r0 in 0..=h - win_h {
            for c0 in 0..=w - win_w {
                let n = (win_h * win_w) as f64;
                let (mut sa, mut sb) = (0.0, 0.0);
                for r in r0..r0 + win_h {
                    for c in c0..c0 + win_w {
                        sa += a[r * w + c];
                        sb += b[r * w + c];
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for r in r0..r0 + win_h {
                    for c in c0..c0 + win_w {
                        let (da, db) = (a[r * w + c] - ma, b[r * w + c] - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                // unbiased window statistics
                let norm = (n - 1.0).max(1.0);
                let (va, vb, cov) = (va / norm, vb / norm, cov / norm);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn check_samples(a: &[Tensor]) -> Result<usize> {
    let first = a.first().ok_or_else(|| Error::invalid("empty sample set"))?;
    let d = first.numel();
    if a.iter().any(|x| x.numel() != d) {
        return Err(Error::invalid("samples differ in size"));
    }
    Ok(d)
}

/// Quantile of sorted values at probability `p` with linear interpolation
/// between order statistics placed at `(i + 0.5) / n`.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p * n as f64 - 0.5;
    if pos <= 0.0 {
        return sorted[0];
    }
    if pos >= (n - 1) as f64 {
        return sorted[n - 1];
    }
    let lo = libm::floor(pos) as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
}

/// 1-D Wasserstein-2 distance between empirical distributions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("empty sample set"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let sq = if a.len() == b.len() {
        a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
    } else {
        let m = a.len().max(b.len());
        (0..m)
            .map(|i| {
                let p = (i as f64 + 0.5) / m as f64;
                let d = quantile(&a, p) - quantile(&b, p);
                d * d
            })
            .sum::<f64>()
            / m as f64
    };
    Ok(libm::sqrt(sq))
}

/// Mean over `n_proj` random unit directions of the 1-D W2 distance between
/// the projected sample sets.
pub fn sliced_wasserstein<R: Rng + ?Sized>(a: &[Tensor], b: &[Tensor], n_proj: usize, rng: &mut R) -> Result<f64> {
    let d = check_samples(a)?;
    if check_samples(b)? != d {
        return Err(Error::invalid("sample sets differ in dimension"));
    }
    if n_proj == 0 {
        return Err(Error::invalid("need at least one projection"));
    }
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = libm::sqrt(dir.iter().map(|v| v * v).sum::<f64>());
        dir.iter_mut().for_each(|v| *v /= norm);
        let proj = |s: &[Tensor]| -> Vec<f64> {
            s.iter()
                .map(|x| x.data().iter().zip(&dir).map(|(u, v)| u * v).sum())
                .collect()
        };
        total += wasserstein_1d(&proj(a), &proj(b))?;
    }
    Ok(total / n_proj as f64)
}

/// `(intra_dist, pixel_std)`: mean pairwise L2 distance and mean per-entry
/// population standard deviation.
pub fn diversity(samples: &[Tensor]) -> Result<(f64, f64)> {
    let d = check_samples(samples)?;
    let k = samples.len();
    if k == 1 {
        return Ok((0.0, 0.0));
    }
    let mut pair = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            pair += libm::sqrt(samples[i].dist_sq(&samples[j])?);
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    let mut std = 0.0;
    for p in 0..d {
        let m = samples.iter().map(|s| s.data()[p]).sum::<f64>() / k as f64;
        let v = samples.iter().map(|s| (s.data()[p] - m) * (s.data()[p] - m)).sum::<f64>() / k as f64;
        std += libm::sqrt(v);
    }
    Ok((pair / pairs, std / d as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub sw2: Option<f64>,
    pub intra_dist: Option<f64>,
    pub pixel_std: Option<f64>,
}

/// Plug-in estimate of `int rho V + (1/2) int rho log rho`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergy {
    /// Mean of `V` over particles.
    pub potential: f64,
    /// Mean of the log kernel-density estimate at the particles.
    pub mean_log_density: f64,
    pub total: f64,
}

/// Free-energy estimate for 1-D or 2-D particles with a Gaussian kernel
/// density of the given bandwidth (leave-one-out).
pub fn free_energy_estimate(particles: &[Tensor], potential: impl Fn(&[f64]) -> f64, bandwidth: f64) -> Result<FreeEnergy> {
    let d = check_samples(particles)?;
    if d > 2 {
        return Err(Error::invalid("free-energy estimate supports 1-D or 2-D particles"));
    }
    let n = particles.len();
    if n < 2 {
        return Err(Error::invalid("need at least two particles"));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    let h2 = bandwidth * bandwidth;
    let norm = libm::pow(2.0 * core::f64::consts::PI * h2, d as f64 / 2.0);
    let pts: Vec<&[f64]> = particles.iter().map(|p| p.data()).collect();
    let mut log_rho = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let r2: f64 = pts[i].iter().zip(pts[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            s += libm::exp(-r2 / (2.0 * h2));
        }
        log_rho[i] = libm::log((s / ((n - 1) as f64 * norm)).max(f64::MIN_POSITIVE));
    }
    let pot = pts.iter().map(|p| potential(p)).sum::<f64>() / n as f64;
    let mld = log_rho.iter().sum::<f64>() / n as f64;
    Ok(FreeEnergy {
        potential: pot,
        mean_log_density: mld,
        total: pot + 0.5 * mld,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_conventions() {
        let x = Tensor::vector(vec![0.2, 0.4]).unwrap();
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_IDENTICAL);
        let y = x.map(|v| v + 1.0);
        assert!(psnr(&y, &x, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bits: Vec<f64> = (0..256).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let x = Tensor::new(vec![16, 16], bits).unwrap();
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&x, &x.map(|v| 1.0 - v)).unwrap() <= 0.0);
    }

    #[test]
    fn point_masses() {
        let a = [Tensor::vector(vec![0.0]).unwrap()];
        let b = [Tensor::vector(vec![3.0]).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((sliced_wasserstein(&a, &b, 4, &mut rng).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(sliced_wasserstein(&a, &a, 4, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn shifted_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..10_000).map(|_| 0.7 + rng.sample::<f64, _>(StandardNormal)).collect();
        assert!((wasserstein_1d(&a, &b).unwrap() - 0.7).abs() < 0.05);
        let short: Vec<f64> = b[..3000].to_vec();
        assert!((wasserstein_1d(&a, &short).unwrap() - 0.7).abs() < 0.06);
    }

    #[test]
    fn diversity_hand_values() {
        let x = Tensor::vector(vec![0.1, 0.5, 0.9, 0.0]).unwrap();
        assert_eq!(diversity(core::slice::from_ref(&x)).unwrap(), (0.0, 0.0));
        assert_eq!(diversity(&[x.clone(), x.clone()]).unwrap(), (0.0, 0.0));
        let c = 0.3;
        let (intra, std) = diversity(&[x.clone(), x.map(|v| v + c)]).unwrap();
        assert!((intra - c * 2.0).abs() < 1e-12);
        // population std of {v, v + c} is c / 2
        assert!((std - c / 2.0).abs() < 1e-12);
    }

    #[test]
    fn free_energy_of_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Tensor> = (0..2000).map(|_| Tensor::vector(vec![rng.random::<f64>()]).unwrap()).collect();
        let f = free_energy_estimate(&pts, |_| 0.0, 0.03).unwrap();
        assert!(f.total.abs() < 0.1, "{f:?}");
        let wide: Vec<Tensor> = pts.iter().map(|p| p.scale(2.0)).collect();
        let g = free_energy_estimate(&wide, |_| 0.0, 0.03).unwrap();
        assert!((g.mean_log_density - f.mean_log_density + core::f64::consts::LN_2).abs() < 0.1);
        assert_eq!(free_energy_estimate(&pts, |_| 0.0, 0.03).unwrap(), f);
        let three = [Tensor::vector(vec![0.0; 3]).unwrap(), Tensor::vector(vec![1.0; 3]).unwrap()];
        assert!(free_energy_estimate(&three, |_| 0.0, 0.1).is_err());
    }
}
