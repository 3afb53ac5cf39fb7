//! Synthetic datasets: mixture points, a noisy ring and flip-symmetric
//! shape images. Every dataset is a pure function of its spec and seed.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{GmmPrior, GmmSpec};
use crate::groups::GroupAction;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    GmmPoints {
        prior: GmmSpec,
        n: usize,
        /// Replace the prior by its orbit average under this group.
        #[serde(default)]
        symmetrize: Option<GroupAction>,
    },
    RingManifold {
        d: usize,
        radius: f64,
        thickness: f64,
        n: usize,
    },
    SymShapesGrid {
        size: usize,
        n: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub items: Vec<Tensor>,
}

impl Dataset {
    pub fn generate(spec: DatasetSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = match &spec {
            DatasetSpec::GmmPoints { prior, n, symmetrize } => {
                let prior = GmmPrior::try_from(prior.clone())?;
                gen_gmm_points(&prior, *n, symmetrize.as_ref(), &mut rng)?
            }
            DatasetSpec::RingManifold { d, radius, thickness, n } => gen_ring_manifold(*d, *radius, *thickness, *n, &mut rng)?,
            DatasetSpec::SymShapesGrid { size, n } => gen_sym_shapes_grid(*size, *n, &mut rng)?,
        };
        Ok(Dataset { spec, seed, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.items.first().map(|t| t.shape()).unwrap_or(&[])
    }
}

/// Matrix of the domain action of `g` on flat vectors of length `d`.
fn action_matrix(action: &GroupAction, g: usize, d: usize) -> Result<Vec<f64>> {
    let mut m = vec![0.0; d * d];
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let col = action.apply_domain(g, &Tensor::vector(e)?)?;
        for i in 0..d {
            m[i * d + j] = col.data()[i];
        }
    }
    Ok(m)
}

/// The group-orbit mixture `(1/|G|) sum_g (T_g)_# p`.
pub fn symmetrize_prior(prior: &GmmPrior, action: &GroupAction) -> Result<GmmPrior> {
    let d = prior.dim();
    let order = action.order();
    let mut weights = Vec::new();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for g in action.elements() {
        let p = action_matrix(action, g, d)?;
        for k in 0..prior.n_components() {
            weights.push(prior.weights()[k] / order as f64);
            let mu = &prior.means()[k];
            means.push((0..d).map(|i| (0..d).map(|j| p[i * d + j] * mu[j]).sum()).collect());
            let c = &prior.covariances()[k];
            let mut pc = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    pc[i * d + j] = (0..d).map(|l| p[i * d + l] * c[l * d + j]).sum();
                }
            }
            let mut out = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] = (0..d).map(|l| pc[i * d + l] * p[j * d + l]).sum();
                }
            }
            covs.push(out);
        }
    }
    GmmPrior::new(weights, means, covs)
}

pub fn gen_gmm_points<R: Rng + ?Sized>(prior: &GmmPrior, n: usize, symmetrize: Option<&GroupAction>, rng: &mut R) -> Result<Vec<Tensor>> {
    match symmetrize {
        Some(a) => Ok(symmetrize_prior(prior, a)?.sample(n, rng)),
        None => Ok(prior.sample(n, rng)),
    }
}

/// Points on a circle of the given radius in the first two coordinates plus
/// isotropic Gaussian noise of standard deviation `thickness` in all `d`.
pub fn gen_ring_manifold<R: Rng + ?Sized>(d: usize, radius: f64, thickness: f64, n: usize, rng: &mut R) -> Result<Vec<Tensor>> {
    if d < 2 {
        return Err(Error::invalid("ring needs at least two dimensions"));
    }
    if !(radius > 0.0) || !(thickness >= 0.0) {
        return Err(Error::invalid("ring radius must be positive and thickness non-negative"));
    }
    (0..n)
        .map(|_| {
            let theta = rng.random::<f64>() * 2.0 * PI;
            let mut v: Vec<f64> = (0..d).map(|_| thickness * rng.sample::<f64, _>(StandardNormal)).collect();
            v[0] += radius * libm::cos(theta);
            v[1] += radius * libm::sin(theta);
            Tensor::vector(v)
        })
        .collect()
}

/// Distance from `x` to the circle of `radius` in the first two coordinates.
pub fn distance_to_ring(x: &[f64], radius: f64) -> f64 {
    let r = libm::hypot(x[0], x[1]);
    let rest: f64 = x[2..].iter().map(|v| v * v).sum();
    libm::sqrt((r - radius) * (r - radius) + rest)
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Bar { cx: f64, cy: f64, half_w: f64, half_h: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    /// Signed depth of the pixel centre inside the shape (positive inside).
    fn depth(&self, px: f64, py: f64) -> f64 {
        match *self {
            Shape::Bar { cx, cy, half_w, half_h } => (half_w - (px - cx).abs()).min(half_h - (py - cy).abs()),
            Shape::Disk { cx, cy, r } => r - libm::hypot(px - cx, py - cy),
        }
    }
}

/// `[1, size, size]` images in `[0, 1]` holding one to three bars or disks
/// with soft one-pixel edges. Shape parameters are drawn from laws that are
/// invariant under horizontal and vertical flips.
pub fn gen_sym_shapes_grid<R: Rng + ?Sized>(size: usize, n: usize, rng: &mut R) -> Result<Vec<Tensor>> {
    if size < 4 {
        return Err(Error::invalid("shape grid must be at least 4 pixels wide"));
    }
    let s = size as f64;
    (0..n)
        .map(|_| {
            let count = rng.random_range(1..=3);
            let mut img = vec![0.0f64; size * size];
            for _ in 0..count {
                let cx = rng.random_range(0.2 * s..0.8 * s);
                let cy = rng.random_range(0.2 * s..0.8 * s);
                let shape = if rng.random::<bool>() {
                    let long = rng.random_range(0.15 * s..0.35 * s);
                    let short = rng.random_range(0.05 * s..0.1 * s);
                    if rng.random::<bool>() {
                        Shape::Bar { cx, cy, half_w: long, half_h: short }
                    } else {
                        Shape::Bar { cx, cy, half_w: short, half_h: long }
                    }
                } else {
                    Shape::Disk {
                        cx,
                        cy,
                        r: rng.random_range(0.1 * s..0.22 * s),
                    }
                };
                let intensity = rng.random_range(0.4..1.0);
                for r in 0..size {
                    for c in 0..size {
                        let cover = (shape.depth(c as f64 + 0.5, r as f64 + 0.5) + 0.5).clamp(0.0, 1.0);
                        let v = &mut img[r * size + c];
                        *v = v.max(intensity * cover);
                    }
                }
            }
            Tensor::new(vec![1, size, size], img)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::Transform;

    #[test]
    fn thin_ring_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for x in gen_ring_manifold(4, 2.0, 0.0, 50, &mut rng).unwrap() {
            assert!((libm::hypot(x.data()[0], x.data()[1]) - 2.0).abs() < 1e-12);
            assert!(x.data()[2..].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn ring_thickness_is_half_normal_in_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = 0.05;
        let pts = gen_ring_manifold(2, 1.0, t, 20_000, &mut rng).unwrap();
        let mean = pts.iter().map(|p| distance_to_ring(p.data(), 1.0)).sum::<f64>() / pts.len() as f64;
        let expect = t * libm::sqrt(2.0 / PI);
        assert!((mean - expect).abs() < 0.05 * expect, "{mean} vs {expect}");
    }

    #[test]
    fn shapes_are_bounded_and_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs = gen_sym_shapes_grid(16, 2000, &mut rng).unwrap();
        let (mut left, mut right) = (0.0, 0.0);
        for im in &imgs {
            assert_eq!(im.shape(), &[1, 16, 16]);
            assert!(im.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for r in 0..16 {
                for c in 0..16 {
                    if c < 8 {
                        left += im.data()[r * 16 + c];
                    } else {
                        right += im.data()[r * 16 + c];
                    }
                }
            }
        }
        assert!((left - right).abs() / (left + right) < 0.02);
    }

    #[test]
    fn orbit_mixture_is_invariant() {
        let prior = GmmPrior::new(vec![1.0], vec![vec![1.0, 0.0, -2.0]], vec![crate::gmm::identity(3)]).unwrap();
        let action = GroupAction::new(Transform::FlipH).unwrap();
        let sym = symmetrize_prior(&prior, &action).unwrap();
        assert_eq!(sym.n_components(), 2);
        assert_eq!(sym.means()[1], vec![-2.0, 0.0, 1.0]);
        let x = [0.3, -0.2, 0.9];
        let fx = [0.9, -0.2, 0.3];
        assert!((sym.log_density(&x, 1.0).unwrap() - sym.log_density(&fx, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn regeneration_is_deterministic() {
        let spec = DatasetSpec::SymShapesGrid { size: 8, n: 5 };
        assert_eq!(Dataset::generate(spec.clone(), 3).unwrap(), Dataset::generate(spec, 3).unwrap());
    }
}
