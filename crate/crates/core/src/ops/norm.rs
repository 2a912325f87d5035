use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with affine `gain` and `shift`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<Tensor> {
    Ok(layer_norm_with_stats(x, gain, shift)?.0)
}

/// Returns `(y, x_hat, inv_std)` so the backward pass can reuse the statistics.
pub fn layer_norm_with_stats(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let c = *x.shape().last().unwrap();
    if gain.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "input {:?} with gain {:?} / shift {:?}",
                x.shape(),
                gain.shape(),
                shift.shape()
            ),
        ));
    }
    let rows = x.numel() / c;
    let mut y = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    for (r, xr) in x.data().chunks_exact(c).enumerate() {
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..c {
            let h = (xr[j] - mean) * is;
            xhat[r * c + j] = h;
            y[r * c + j] = h * gain.data()[j] + shift.data()[j];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        Tensor::from_parts(x.shape().to_vec(), xhat),
        inv_std,
    ))
}

/// Gradients `(input, gain, shift)`.
pub fn layer_norm_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    gain: &Tensor,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gain.numel();
    let mut gx = vec![0.0; xhat.numel()];
    let mut gg = vec![0.0; c];
    let mut gs = vec![0.0; c];
    let mut dxh = vec![0.0; c];
    for (r, (hr, gr)) in xhat
        .data()
        .chunks_exact(c)
        .zip(grad.data().chunks_exact(c))
        .enumerate()
    {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..c {
            gg[j] += gr[j] * hr[j];
            gs[j] += gr[j];
            dxh[j] = gr[j] * gain.data()[j];
            m1 += dxh[j];
            m2 += dxh[j] * hr[j];
        }
        m1 /= c as f64;
        m2 /= c as f64;
        for j in 0..c {
            gx[r * c + j] = inv_std[r] * (dxh[j] - m1 - hr[j] * m2);
        }
    }
    (
        Tensor::from_parts(xhat.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], gg),
        Tensor::from_parts(vec![c], gs),
    )
}
