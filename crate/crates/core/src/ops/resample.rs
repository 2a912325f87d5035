//! Spatial resampling over `[B, C, H, W]`: half-pixel bilinear resize,
//! adaptive average pooling and offset-guided bilinear upsampling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source coordinate of output index `dst` under half-pixel-center alignment,
/// before clamping.
#[inline]
pub fn source_coord(dst: usize, len_in: usize, len_out: usize) -> f64 {
    ((dst as f64 + 0.5) * len_in as f64) / len_out as f64 - 0.5
}

#[derive(Clone, Copy, Debug)]
struct Lerp {
    i0: usize,
    i1: usize,
    frac: f64,
    /// coordinate was clamped to the border, derivative is zero
    clamped: bool,
}

#[inline]
fn lerp_at(src: f64, len_in: usize) -> Lerp {
    let hi = (len_in - 1) as f64;
    let (c, clamped) = if src < 0.0 {
        (0.0, true)
    } else if src > hi {
        (hi, true)
    } else {
        (src, false)
    };
    let i0 = (c.floor() as usize).min(len_in - 1);
    let i1 = (i0 + 1).min(len_in - 1);
    Lerp {
        i0,
        i1,
        frac: c - i0 as f64,
        clamped,
    }
}

fn axis_table(len_in: usize, len_out: usize) -> Vec<Lerp> {
    (0..len_out)
        .map(|o| lerp_at(source_coord(o, len_in, len_out), len_in))
        .collect()
}

fn image_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    x.expect_rank(op, 4)?;
    Ok((x.dim(0), x.dim(1), x.dim(2), x.dim(3)))
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = image_dims(x, "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid("resize target must be at least 1x1".into()));
    }
    let ty = axis_table(h, out_h);
    let tx = axis_table(w, out_w);
    let mut out = vec![0.0; b * c * out_h * out_w];
    for (plane, oplane) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(out_h * out_w))
    {
        for (oy, ly) in ty.iter().enumerate() {
            let r0 = &plane[ly.i0 * w..][..w];
            let r1 = &plane[ly.i1 * w..][..w];
            for (ox, lx) in tx.iter().enumerate() {
                let top = r0[lx.i0] + lx.frac * (r0[lx.i1] - r0[lx.i0]);
                let bot = r1[lx.i0] + lx.frac * (r1[lx.i1] - r1[lx.i0]);
                oplane[oy * out_w + ox] = top + ly.frac * (bot - top);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, out_h, out_w], out))
}

pub fn bilinear_resize_backward(in_shape: &[usize], grad: &Tensor) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (out_h, out_w) = (grad.dim(2), grad.dim(3));
    let ty = axis_table(h, out_h);
    let tx = axis_table(w, out_w);
    let mut gx = vec![0.0; in_shape.iter().product()];
    for (gplane, iplane) in grad
        .data()
        .chunks_exact(out_h * out_w)
        .zip(gx.chunks_exact_mut(h * w))
    {
        for (oy, ly) in ty.iter().enumerate() {
            for (ox, lx) in tx.iter().enumerate() {
                let g = gplane[oy * out_w + ox];
                let (wy0, wy1) = (1.0 - ly.frac, ly.frac);
                let (wx0, wx1) = (1.0 - lx.frac, lx.frac);
                iplane[ly.i0 * w + lx.i0] += g * wy0 * wx0;
                iplane[ly.i0 * w + lx.i1] += g * wy0 * wx1;
                iplane[ly.i1 * w + lx.i0] += g * wy1 * wx0;
                iplane[ly.i1 * w + lx.i1] += g * wy1 * wx1;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

fn bins(len: usize, g: usize) -> Vec<(usize, usize)> {
    (0..g)
        .map(|i| ((i * len) / g, ((i + 1) * len).div_ceil(g)))
        .collect()
}

/// Averages each of the `g x g` floor/ceil bins.
pub fn adaptive_avg_pool(x: &Tensor, g: usize) -> Result<Tensor> {
    let (b, c, h, w) = image_dims(x, "adaptive_avg_pool")?;
    if g == 0 || g > h || g > w {
        return Err(Error::shape(
            "adaptive_avg_pool",
            format!("grid {g} for a {h}x{w} input"),
        ));
    }
    let by = bins(h, g);
    let bx = bins(w, g);
    let mut out = vec![0.0; b * c * g * g];
    for (plane, oplane) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(g * g))
    {
        for (i, &(y0, y1)) in by.iter().enumerate() {
            for (j, &(x0, x1)) in bx.iter().enumerate() {
                let mut s = 0.0;
                for y in y0..y1 {
                    s += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                oplane[i * g + j] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, g, g], out))
}

pub fn adaptive_avg_pool_backward(in_shape: &[usize], grad: &Tensor) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let g = grad.dim(2);
    let by = bins(h, g);
    let bx = bins(w, g);
    let mut gx = vec![0.0; in_shape.iter().product()];
    for (gplane, iplane) in grad
        .data()
        .chunks_exact(g * g)
        .zip(gx.chunks_exact_mut(h * w))
    {
        for (i, &(y0, y1)) in by.iter().enumerate() {
            for (j, &(x0, x1)) in bx.iter().enumerate() {
                let v = gplane[i * g + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for slot in &mut iplane[y * w + x0..y * w + x1] {
                        *slot += v;
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

fn check_offsets(
    x: &Tensor,
    offsets: &Tensor,
    factor: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = image_dims(x, "offset_upsample")?;
    if factor == 0 {
        return Err(Error::Invalid("upsampling factor must be >= 1".into()));
    }
    offsets.expect_shape("offset_upsample", &[b, 2 * factor * factor, h, w])?;
    Ok((b, c, h, w))
}

/// Upsamples by `factor`, sampling `x` bilinearly at the half-pixel base grid
/// displaced by per-cell offsets. `offsets[b, 2j + {0, 1}, y, x]` holds the
/// `(dy, dx)` displacement, in input pixels, of sub-position `j = sy * factor + sx`
/// inside low-resolution cell `(y, x)`; it is shared by all channels.
/// Zero offsets reproduce [`bilinear_resize`] exactly.
pub fn offset_upsample(x: &Tensor, offsets: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = check_offsets(x, offsets, factor)?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; b * c * oh * ow];
    let od = offsets.data();
    let xd = x.data();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let (ly, lx) = sample_point(od, bi, oy, ox, factor, h, w);
                for ci in 0..c {
                    let plane = &xd[(bi * c + ci) * h * w..][..h * w];
                    out[((bi * c + ci) * oh + oy) * ow + ox] = bilerp(plane, w, &ly, &lx);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
}

#[inline]
fn sample_point(
    od: &[f64],
    bi: usize,
    oy: usize,
    ox: usize,
    factor: usize,
    h: usize,
    w: usize,
) -> (Lerp, Lerp) {
    let (cy, cx) = (oy / factor, ox / factor);
    let j = (oy % factor) * factor + ox % factor;
    let chans = 2 * factor * factor;
    let dy = od[((bi * chans + 2 * j) * h + cy) * w + cx];
    let dx = od[((bi * chans + 2 * j + 1) * h + cy) * w + cx];
    let sy = source_coord(oy, h, h * factor) + dy;
    let sx = source_coord(ox, w, w * factor) + dx;
    (lerp_at(sy, h), lerp_at(sx, w))
}

#[inline]
fn bilerp(plane: &[f64], w: usize, ly: &Lerp, lx: &Lerp) -> f64 {
    let v00 = plane[ly.i0 * w + lx.i0];
    let v01 = plane[ly.i0 * w + lx.i1];
    let v10 = plane[ly.i1 * w + lx.i0];
    let v11 = plane[ly.i1 * w + lx.i1];
    let top = v00 + lx.frac * (v01 - v00);
    let bot = v10 + lx.frac * (v11 - v10);
    top + ly.frac * (bot - top)
}

/// Gradients `(input, offsets)` of [`offset_upsample`].
pub fn offset_upsample_backward(
    x: &Tensor,
    offsets: &Tensor,
    factor: usize,
    grad: &Tensor,
) -> (Tensor, Tensor) {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (h * factor, w * factor);
    let chans = 2 * factor * factor;
    let od = offsets.data();
    let xd = x.data();
    let gd = grad.data();
    let mut gx = vec![0.0; x.numel()];
    let mut goff = vec![0.0; offsets.numel()];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let (ly, lx) = sample_point(od, bi, oy, ox, factor, h, w);
                let (mut dsy, mut dsx) = (0.0, 0.0);
                for ci in 0..c {
                    let g = gd[((bi * c + ci) * oh + oy) * ow + ox];
                    let base = (bi * c + ci) * h * w;
                    let plane = &xd[base..][..h * w];
                    let (wy0, wy1) = (1.0 - ly.frac, ly.frac);
                    let (wx0, wx1) = (1.0 - lx.frac, lx.frac);
                    gx[base + ly.i0 * w + lx.i0] += g * wy0 * wx0;
                    gx[base + ly.i0 * w + lx.i1] += g * wy0 * wx1;
                    gx[base + ly.i1 * w + lx.i0] += g * wy1 * wx0;
                    gx[base + ly.i1 * w + lx.i1] += g * wy1 * wx1;
                    let v00 = plane[ly.i0 * w + lx.i0];
                    let v01 = plane[ly.i0 * w + lx.i1];
                    let v10 = plane[ly.i1 * w + lx.i0];
                    let v11 = plane[ly.i1 * w + lx.i1];
                    if !ly.clamped && ly.i1 != ly.i0 {
                        dsy += g * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
                    }
                    if !lx.clamped && lx.i1 != lx.i0 {
                        dsx += g * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
                    }
                }
                let (cy, cx) = (oy / factor, ox / factor);
                let j = (oy % factor) * factor + ox % factor;
                goff[((bi * chans + 2 * j) * h + cy) * w + cx] += dsy;
                goff[((bi * chans + 2 * j + 1) * h + cy) * w + cx] += dsx;
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(offsets.shape().to_vec(), goff),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field_survives_resize() {
        let x = Tensor::full(&[1, 2, 3, 5], 5.0);
        for (oh, ow) in [(1, 1), (4, 7), (9, 2)] {
            let y = bilinear_resize(&x, oh, ow).unwrap();
            assert!(y.data().iter().all(|v| (v - 5.0).abs() < 1e-12));
        }
    }

    #[test]
    fn two_by_two_to_four_by_four_by_hand() {
        // half-pixel: output i maps to (i + 0.5) / 2 - 0.5 = -0.25, 0.25, 0.75, 1.25
        // which clamps to 0, 0.25, 0.75, 1 along each axis
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let f = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                // value = 2 * fy + fx on this ramp
                let want = 2.0 * f[i] + f[j];
                assert!((y.data()[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadrant_pooling() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let y = adaptive_avg_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn uneven_bins_overlap() {
        // 5 rows into 3 bins: [0,2) [1,4) [3,5)
        assert_eq!(bins(5, 3), vec![(0, 2), (1, 4), (3, 5)]);
    }

    #[test]
    fn zero_offsets_match_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 3, 4], &mut rng);
        for s in 1..=3 {
            let off = Tensor::zeros(&[2, 2 * s * s, 3, 4]);
            let a = offset_upsample(&x, &off, s).unwrap();
            let b = bilinear_resize(&x, 3 * s, 4 * s).unwrap();
            assert_eq!(a, b, "factor {s}");
        }
    }

    #[test]
    fn adjoints_of_linear_resamplers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[1, 2, 5, 7], &mut rng);
        let y = bilinear_resize(&x, 8, 3).unwrap();
        let g = Tensor::randn(y.shape(), &mut rng);
        let gx = bilinear_resize_backward(x.shape(), &g);
        assert!((y.dot(&g) - x.dot(&gx)).abs() < 1e-10);

        let y = adaptive_avg_pool(&x, 3).unwrap();
        let g = Tensor::randn(y.shape(), &mut rng);
        let gx = adaptive_avg_pool_backward(x.shape(), &g);
        assert!((y.dot(&g) - x.dot(&gx)).abs() < 1e-10);
    }
}
