use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent partial sums
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank("bmm", 3)?;
    b.expect_rank("bmm", 3)?;
    let (bn, m, k) = (a.dim(0), a.dim(1), a.dim(2));
    if b.dim(0) != bn || b.dim(1) != k {
        return Err(Error::shape(
            "bmm",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let n = b.dim(2);
    let mut out = vec![0.0; bn * m * n];
    for bi in 0..bn {
        let ab = &a.data()[bi * m * k..][..m * k];
        let bb = &b.data()[bi * k * n..][..k * n];
        let ob = &mut out[bi * m * n..][..m * n];
        for i in 0..m {
            let orow = &mut ob[i * n..][..n];
            for (p, &av) in ab[i * k..][..k].iter().enumerate() {
                axpy(av, &bb[p * n..][..n], orow);
            }
        }
    }
    Ok(Tensor::from_parts(vec![bn, m, n], out))
}

pub fn bmm_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (bn, m, k, n) = (a.dim(0), a.dim(1), a.dim(2), b.dim(2));
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for bi in 0..bn {
        let ab = &a.data()[bi * m * k..][..m * k];
        let bb = &b.data()[bi * k * n..][..k * n];
        let gbat = &grad.data()[bi * m * n..][..m * n];
        let gab = &mut ga[bi * m * k..][..m * k];
        let gbb = &mut gb[bi * k * n..][..k * n];
        for i in 0..m {
            let grow = &gbat[i * n..][..n];
            for p in 0..k {
                gab[i * k + p] = dot(grow, &bb[p * n..][..n]);
                axpy(ab[i * k + p], grow, &mut gbb[p * n..][..n]);
            }
        }
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

/// Affine map over the last axis: `x[..., C_in] -> x W^T + b`, `W: [C_out, C_in]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    weight.expect_rank("linear", 2)?;
    let (c_out, c_in) = (weight.dim(0), weight.dim(1));
    if x.shape().last() != Some(&c_in) {
        return Err(Error::shape(
            "linear",
            format!("input {:?} vs weight {:?}", x.shape(), weight.shape()),
        ));
    }
    if let Some(b) = bias {
        b.expect_shape("linear", &[c_out])?;
    }
    let rows = x.numel() / c_in;
    let mut out = vec![0.0; rows * c_out];
    let wd = weight.data();
    for (xr, or) in x.data().chunks_exact(c_in).zip(out.chunks_exact_mut(c_out)) {
        for (o, slot) in or.iter_mut().enumerate() {
            *slot = dot(xr, &wd[o * c_in..][..c_in]) + bias.map_or(0.0, |b| b.data()[o]);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = c_out;
    Ok(Tensor::from_parts(shape, out))
}

pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    need_x: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (c_out, c_in) = (weight.dim(0), weight.dim(1));
    let wd = weight.data();
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = vec![0.0; weight.numel()];
    let mut gb = vec![0.0; c_out];
    for (r, (xr, gr)) in x
        .data()
        .chunks_exact(c_in)
        .zip(grad.data().chunks_exact(c_out))
        .enumerate()
    {
        for (o, &g) in gr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            axpy(g, xr, &mut gw[o * c_in..][..c_in]);
            if let Some(gx) = gx.as_mut() {
                axpy(g, &wd[o * c_in..][..c_in], &mut gx[r * c_in..][..c_in]);
            }
        }
    }
    (
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![c_out], gb),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bmm_small() {
        let a = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[1, 2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(bmm(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn linear_matches_matrix_vector() {
        let x = Tensor::new(&[1, 3], vec![1.0, -1.0, 2.0]).unwrap();
        let w = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 2.0, 1.0, 0.0]).unwrap();
        let b = Tensor::new(&[2], vec![0.5, -0.5]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[3.5, 0.5]);
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..7).map(f64::from).collect();
        assert_eq!(dot(&a, &a), 91.0);
    }
}
