//! Synthetic crack images: value-noise pavement texture with dark cubic
//! Bezier strokes and their exact rasterized masks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image `[3, S, S]` in `[0, 1]` and its binary mask `[1, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrackSample {
    pub image: Tensor,
    pub mask: Tensor,
}

/// Cubic Bezier control points in pixel coordinates.
pub type Curve = [(f64, f64); 4];

pub fn bezier(c: &Curve, t: f64) -> (f64, f64) {
    let s = 1.0 - t;
    let w = [s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t];
    let x = w.iter().zip(c).map(|(w, p)| w * p.0).sum();
    let y = w.iter().zip(c).map(|(w, p)| w * p.1).sum();
    (x, y)
}

/// Pixels covered by a stroke of `width` along `curve`, row-major over a
/// `size x size` grid. Samples are at most a quarter pixel apart and always
/// mark the pixel they fall in, so the stroke is 8-connected.
pub fn rasterize_stroke(curve: &Curve, width: usize, size: usize) -> Vec<bool> {
    let mut out = vec![false; size * size];
    let chord: f64 = (0..3)
        .map(|i| (curve[i + 1].0 - curve[i].0).hypot(curve[i + 1].1 - curve[i].1))
        .sum();
    let steps = (chord * 4.0).ceil().max(1.0) as usize;
    let r = width as f64 / 2.0;
    let reach = r.ceil() as isize + 1;
    let inside =
        |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size;
    for i in 0..=steps {
        let (x, y) = bezier(curve, i as f64 / steps as f64);
        let (px, py) = (x.floor() as isize, y.floor() as isize);
        if inside(px, py) {
            out[py as usize * size + px as usize] = true;
        }
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (qx, qy) = (px + dx, py + dy);
                let d = (qx as f64 + 0.5 - x).hypot(qy as f64 + 0.5 - y);
                if inside(qx, qy) && d <= r {
                    out[qy as usize * size + qx as usize] = true;
                }
            }
        }
    }
    out
}

/// Smooth random field in `[0, 1]` sampled on a `cell`-spaced lattice.
fn value_noise(size: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
            let at = |i: usize, j: usize| lattice[j * n + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn random_curve(size: usize, rng: &mut ChaCha8Rng) -> Curve {
    let s = size as f64;
    // endpoints on two different borders so strokes cross the image
    let border = |side: u32, u: f64| match side {
        0 => (u * s, 0.0),
        1 => (s - 0.01, u * s),
        2 => (u * s, s - 0.01),
        _ => (0.0, u * s),
    };
    let a = rng.random_range(0..4);
    let b = (a + rng.random_range(1..4)) % 4;
    let p0 = border(a, rng.random_range(0.1..0.9));
    let p3 = border(b, rng.random_range(0.1..0.9));
    let mut mid = || {
        (
            rng.random_range(0.15..0.85) * s,
            rng.random_range(0.15..0.85) * s,
        )
    };
    [p0, mid(), mid(), p3]
}

/// `count` deterministic samples of `size x size` pixels from `seed`.
pub fn synth_cracks(count: usize, size: usize, seed: u64) -> Result<Vec<CrackSample>> {
    if size < 32 {
        return Err(Error::Invalid(format!(
            "synthetic image size {size} must be at least 32"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let coarse = value_noise(size, size / 4, &mut rng);
        let fine = value_noise(size, 4, &mut rng);
        let base = rng.random_range(0.45..0.7);
        let mut gray: Vec<f64> = coarse
            .iter()
            .zip(&fine)
            .map(|(c, f)| base + 0.2 * (c - 0.5) + 0.12 * (f - 0.5))
            .collect();
        let mut mask = vec![false; size * size];
        for _ in 0..rng.random_range(1..=2) {
            let stroke =
                rasterize_stroke(&random_curve(size, &mut rng), rng.random_range(1..=3), size);
            for (m, s) in mask.iter_mut().zip(stroke) {
                *m |= s;
            }
        }
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (size * size) as f64;
        if frac == 0.0 || frac >= 0.2 {
            continue;
        }
        let depth = rng.random_range(0.25..0.4);
        for (g, &m) in gray.iter_mut().zip(&mask) {
            let grain = rng.random_range(-0.03..0.03);
            if m {
                *g -= depth;
            }
            *g = (*g + grain).clamp(0.0, 1.0);
        }
        let mut image = Vec::with_capacity(3 * size * size);
        for _ in 0..3 {
            image.extend_from_slice(&gray);
        }
        out.push(CrackSample {
            image: Tensor::new(&[3, size, size], image)?,
            mask: Tensor::new(
                &[1, size, size],
                mask.iter().map(|&m| m as u8 as f64).collect(),
            )?,
        });
    }
    Ok(out)
}

/// Stacks samples into `([B, 3, S, S], [B, 1, S, S])` batches.
pub fn stack(samples: &[CrackSample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = samples
        .iter()
        .map(|s| s.image.reshape(&[1, 3, s.image.dim(1), s.image.dim(2)]))
        .collect::<Result<_>>()?;
    let masks: Vec<Tensor> = samples
        .iter()
        .map(|s| s.mask.reshape(&[1, 1, s.mask.dim(1), s.mask.dim(2)]))
        .collect::<Result<_>>()?;
    Ok((
        Tensor::concat(&images.iter().collect::<Vec<_>>(), 0)?,
        Tensor::concat(&masks.iter().collect::<Vec<_>>(), 0)?,
    ))
}
