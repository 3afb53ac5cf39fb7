//! Stride-1 2-D cross-correlation with odd square kernels.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    #[default]
    Zero,
    /// Mirror without repeating the edge sample (`[2,1 | 0,1,2 | 1,0]`).
    Reflect,
    Circular,
}

/// Maps a possibly out-of-range coordinate onto the source grid.
pub(crate) fn source_index(i: isize, n: usize, mode: Padding) -> Option<usize> {
    let n_i = n as isize;
    if (0..n_i).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        Padding::Zero => None,
        Padding::Circular => Some(i.rem_euclid(n_i) as usize),
        Padding::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n_i - 1);
            let m = i.rem_euclid(period);
            Some(if m < n_i { m } else { period - m } as usize)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    /// A 2-D kernel applied independently to every channel.
    pub depthwise: bool,
}

/// Resolves input/kernel shapes into a geometry and the output shape.
///
/// Inputs may be `[H, W]`, `[C, H, W]` or `[B, C, H, W]`; kernels `[k, k]`
/// (depthwise) or `[C_out, C_in, k, k]`.
pub(crate) fn geometry(input: &[usize], kernel: &[usize]) -> Result<(ConvGeom, Vec<usize>)> {
    let (batch, cin, h, w) = match *input {
        [h, w] => (1, 1, h, w),
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::invalid("conv2d input must be 2-D, 3-D or 4-D")),
    };
    let (cout, k, depthwise) = match *kernel {
        [k1, k2] if k1 == k2 => (cin, k1, true),
        [co, ci, k1, k2] if k1 == k2 => {
            if ci != cin {
                return Err(Error::shape("conv2d", &[co, cin, k1, k2], kernel));
            }
            (co, k1, false)
        }
        _ => return Err(Error::invalid("conv2d kernel must be square [k,k] or [co,ci,k,k]")),
    };
    if k % 2 == 0 {
        return Err(Error::invalid(alloc::format!("conv2d kernel size {k} is even")));
    }
    let out_shape = match input.len() {
        2 if cout == 1 => vec![h, w],
        2 => vec![cout, h, w],
        3 => vec![cout, h, w],
        _ => vec![batch, cout, h, w],
    };
    Ok((
        ConvGeom {
            batch,
            cin,
            cout,
            h,
            w,
            k,
            depthwise,
        },
        out_shape,
    ))
}

fn tables(g: &ConvGeom, pad: Padding) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let r = (g.k / 2) as isize;
    let rows = (0..g.h)
        .flat_map(|y| (0..g.k).map(move |d| (y, d)))
        .map(|(y, d)| source_index(y as isize + d as isize - r, g.h, pad))
        .collect();
    let cols = (0..g.w)
        .flat_map(|x| (0..g.k).map(move |d| (x, d)))
        .map(|(x, d)| source_index(x as isize + d as isize - r, g.w, pad))
        .collect();
    (rows, cols)
}

/// Iterates (output channel, input channel, kernel offset) triples.
fn channel_pairs(g: &ConvGeom) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let kk = g.k * g.k;
    (0..g.cout).flat_map(move |co| {
        let range = if g.depthwise { co..co + 1 } else { 0..g.cin };
        range.map(move |ci| {
            let koff = if g.depthwise { 0 } else { (co * g.cin + ci) * kk };
            (co, ci, koff)
        })
    })
}

pub(crate) fn forward(input: &[f64], kernel: &[f64], g: &ConvGeom, pad: Padding) -> Vec<f64> {
    let (rows, cols) = tables(g, pad);
    let (h, w, k) = (g.h, g.w, g.k);
    let mut out = vec![0.0; g.batch * g.cout * h * w];
    for b in 0..g.batch {
        for (co, ci, koff) in channel_pairs(g) {
            let src = &input[(b * g.cin + ci) * h * w..][..h * w];
            let dst = &mut out[(b * g.cout + co) * h * w..][..h * w];
            for y in 0..h {
                for dy in 0..k {
                    let Some(sy) = rows[y * k + dy] else { continue };
                    let krow = &kernel[koff + dy * k..][..k];
                    let srow = &src[sy * w..][..w];
                    let drow = &mut dst[y * w..][..w];
                    for x in 0..w {
                        let ctab = &cols[x * k..][..k];
                        let mut acc = 0.0;
                        for dx in 0..k {
                            if let Some(sx) = ctab[dx] {
                                acc += krow[dx] * srow[sx];
                            }
                        }
                        drow[x] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Returns (d input, d kernel) for the requested sides.
pub(crate) fn backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    pad: Padding,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, cols) = tables(g, pad);
    let (h, w, k) = (g.h, g.w, g.k);
    let mut gin = want_input.then(|| vec![0.0; input.len()]);
    let mut gk = want_kernel.then(|| vec![0.0; kernel.len()]);
    for b in 0..g.batch {
        for (co, ci, koff) in channel_pairs(g) {
            let src_off = (b * g.cin + ci) * h * w;
            let gout = &grad_out[(b * g.cout + co) * h * w..][..h * w];
            for y in 0..h {
                for dy in 0..k {
                    let Some(sy) = rows[y * k + dy] else { continue };
                    for x in 0..w {
                        let go = gout[y * w + x];
                        if go == 0.0 {
                            continue;
                        }
                        let ctab = &cols[x * k..][..k];
                        for dx in 0..k {
                            let Some(sx) = ctab[dx] else { continue };
                            let si = src_off + sy * w + sx;
                            let ki = koff + dy * k + dx;
                            if let Some(gi) = gin.as_mut() {
                                gi[si] += kernel[ki] * go;
                            }
                            if let Some(gkk) = gk.as_mut() {
                                gkk[ki] += input[si] * go;
                            }
                        }
                    }
                }
            }
        }
    }
    (gin, gk)
}

/// Plain (tape-free) convolution; output keeps the spatial size of `input`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
    let (g, shape) = geometry(input.shape(), kernel.shape())?;
    let out = Tensor::from_parts(shape, forward(input.data(), kernel.data(), &g, padding));
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Rotates a `[k, k]` (or `[co, ci, k, k]`) kernel by 180 degrees.
pub fn flip_kernel(kernel: &Tensor) -> Tensor {
    let shape = kernel.shape();
    let k = shape[shape.len() - 1];
    let kk = k * k;
    let mut data = kernel.data().to_vec();
    for block in data.chunks_mut(kk) {
        block.reverse();
    }
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn delta(k: usize) -> Tensor {
        let mut d = vec![0.0; k * k];
        d[k * k / 2] = 1.0;
        Tensor::new(vec![k, k], d).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[5, 6], &mut rng);
        for pad in [Padding::Zero, Padding::Reflect, Padding::Circular] {
            assert_eq!(conv2d(&x, &delta(3), pad).unwrap(), x);
        }
    }

    #[test]
    fn box_blur_corner_of_ones() {
        let x = Tensor::ones(&[4, 4]);
        let k = Tensor::full(&[3, 3], 1.0 / 9.0);
        let y = conv2d(&x, &k, Padding::Zero).unwrap();
        // Corner pixel sees a 2x2 block of ones.
        assert!((y.data()[0] - 4.0 / 9.0).abs() < 1e-15);
        assert!((y.data()[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::ones(&[4, 4]);
        assert!(conv2d(&x, &Tensor::ones(&[2, 2]), Padding::Zero).is_err());
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[2, 6, 6], &mut rng);
        let b = Tensor::randn(&[2, 6, 6], &mut rng);
        let k = Tensor::randn(&[3, 3], &mut rng);
        for pad in [Padding::Zero, Padding::Reflect, Padding::Circular] {
            let lhs = conv2d(&a.add(&b).unwrap(), &k, pad).unwrap();
            let rhs = conv2d(&a, &k, pad)
                .unwrap()
                .add(&conv2d(&b, &k, pad).unwrap())
                .unwrap();
            assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn zero_padding_adjoint_is_flipped_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = Tensor::randn(&[7, 9], &mut rng);
            let y = Tensor::randn(&[7, 9], &mut rng);
            let k = Tensor::randn(&[5, 5], &mut rng);
            let lhs = conv2d(&x, &k, Padding::Zero).unwrap().dot(&y).unwrap();
            let rhs = x
                .dot(&conv2d(&y, &flip_kernel(&k), Padding::Zero).unwrap())
                .unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * x.norm() * y.norm());
        }
    }

    #[test]
    fn reflect_indexing() {
        let idx: Vec<_> = (-3..7)
            .map(|i| source_index(i, 4, Padding::Reflect).unwrap())
            .collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(source_index(-1, 4, Padding::Circular), Some(3));
        assert_eq!(source_index(4, 4, Padding::Zero), None);
    }
}
