//! Array kernels behind the graph ops.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3};

use super::Real;

/// Unfold `x` (C,H,W) into patch columns of shape (C·k·k, OH·OW).
pub fn im2col<F: Real>(x: &ArrayView3<'_, F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ci);
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut out_row = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = plane.row(iy as usize);
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * ow + ox] = src[ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch columns back onto an image, accumulating overlaps.
pub fn col2im<F: Real>(
    cols: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = x.index_axis_mut(ndarray::Axis(0), ci);
        for ki in 0..k {
            for kj in 0..k {
                let row = cols.row((ci * k + ki) * k + kj);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dst = plane.row_mut(iy as usize);
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[ix as usize] = dst[ix as usize] + row[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x<F: Real>(x: &ArrayView3<'_, F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, i, j)| x[[ci, i / 2, j / 2]])
}

/// Adjoint of [`upsample2x`]: sum each 2x2 block.
pub fn upsample2x_backward<F: Real>(dy: &ArrayView3<'_, F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                dx[[ci, i / 2, j / 2]] = dx[[ci, i / 2, j / 2]] + dy[[ci, i, j]];
            }
        }
    }
    dx
}

/// Group normalization over (C/groups, H, W) slabs.
/// Returns (y, xhat, per-group 1/std).
pub fn group_norm_forward<F: Real>(
    x: &ArrayView3<'_, F>,
    gamma: &ArrayView1<'_, F>,
    beta: &ArrayView1<'_, F>,
    groups: usize,
    eps: F,
) -> (Array3<F>, Array3<F>, Vec<F>) {
    let (c, h, w) = x.dim();
    let cg = c / groups;
    let n = F::from_f64((cg * h * w) as f64);
    let mut xhat = Array3::zeros((c, h, w));
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let slab = x.slice(ndarray::s![g * cg..(g + 1) * cg, .., ..]);
        let mean = slab.sum() / n;
        let var = slab.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let istd = (var + eps).sqrt().recip();
        inv_std.push(istd);
        let mut out = xhat.slice_mut(ndarray::s![g * cg..(g + 1) * cg, .., ..]);
        ndarray::Zip::from(&mut out).and(&slab).for_each(|o, &v| {
            *o = (v - mean) * istd;
        });
    }
    let mut y = xhat.clone();
    for ci in 0..c {
        let mut plane = y.index_axis_mut(ndarray::Axis(0), ci);
        plane.mapv_inplace(|v| v * gamma[ci] + beta[ci]);
    }
    (y, xhat, inv_std)
}

/// Gradients of group normalization. Returns (dx, dgamma, dbeta).
pub fn group_norm_backward<F: Real>(
    dy: &ArrayView3<'_, F>,
    gamma: &ArrayView1<'_, F>,
    xhat: &Array3<F>,
    inv_std: &[F],
    groups: usize,
) -> (Array3<F>, Array1<F>, Array1<F>) {
    let (c, h, w) = dy.dim();
    let cg = c / groups;
    let n = F::from_f64((cg * h * w) as f64);

    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ci in 0..c {
        let dplane = dy.index_axis(ndarray::Axis(0), ci);
        let xplane = xhat.index_axis(ndarray::Axis(0), ci);
        dgamma[ci] = ndarray::Zip::from(&dplane)
            .and(&xplane)
            .fold(F::zero(), |acc, &d, &xh| acc + d * xh);
        dbeta[ci] = dplane.sum();
    }

    // dxhat = dy * gamma; per group:
    // dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    let mut dx = Array3::zeros((c, h, w));
    for g in 0..groups {
        let range = ndarray::s![g * cg..(g + 1) * cg, .., ..];
        let dys = dy.slice(range);
        let xhs = xhat.slice(range);
        let mut dxhat = Array3::zeros((cg, h, w));
        for local in 0..cg {
            let gma = gamma[g * cg + local];
            let mut plane = dxhat.index_axis_mut(ndarray::Axis(0), local);
            let src = dys.index_axis(ndarray::Axis(0), local);
            ndarray::Zip::from(&mut plane).and(&src).for_each(|o, &v| {
                *o = v * gma;
            });
        }
        let mean_dxhat = dxhat.sum() / n;
        let mean_dxhat_xhat = ndarray::Zip::from(&dxhat)
            .and(&xhs)
            .fold(F::zero(), |acc, &a, &b| acc + a * b)
            / n;
        let istd = inv_std[g];
        let mut out = dx.slice_mut(range);
        ndarray::Zip::from(&mut out)
            .and(&dxhat)
            .and(&xhs)
            .for_each(|o, &dxh, &xh| {
                *o = istd * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
            });
    }
    (dx, dgamma, dbeta)
}
