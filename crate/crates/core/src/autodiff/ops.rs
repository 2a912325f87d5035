//! Differentiable wrappers around the tensor kernels.

use std::rc::Rc;

use super::tape::Var;
use crate::error::{Error, Result};
use crate::ops::activation::{gelu_grad_scalar, gelu_scalar, sigmoid_scalar, softplus_scalar};
use crate::ops::broadcast::{binary, reduce_to, ternary_out};
use crate::ops::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::ops::matmul::{bmm, bmm_backward, linear, linear_backward};
use crate::ops::norm::{layer_norm_backward, layer_norm_with_stats};
use crate::ops::resample::{
    adaptive_avg_pool, adaptive_avg_pool_backward, bilinear_resize, bilinear_resize_backward,
    offset_upsample, offset_upsample_backward,
};
use crate::ops::softmax::{softmax, softmax_backward};
use crate::tensor::Tensor;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sum_axis_keepdim(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x.data()[(o * len + a) * inner..][..inner];
            let dst = &mut out[o * inner..][..inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::from_parts(shape, out)
}

fn expand_axis(g: &Tensor, shape: &[usize], axis: usize, scale: f64) -> Tensor {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = &g.data()[o * inner..][..inner];
        for a in 0..len {
            let dst = &mut out[(o * len + a) * inner..][..inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s * scale;
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<'t> Var<'t> {
    fn unary(&self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var<'t> {
        let out = self.value.map(f);
        self.tape.apply(out, &[self], move |a| {
            let g = a
                .grad
                .data()
                .iter()
                .zip(a.inputs[0].data())
                .zip(a.output.data())
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(a.grad.shape().to_vec(), g))]
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = binary(&self.value, &other.value, |a, b| a + b)?;
        Ok(self.tape.apply(out, &[self, other], |a| {
            vec![
                a.needs[0].then(|| reduce_to(a.grad, a.inputs[0].shape())),
                a.needs[1].then(|| reduce_to(a.grad, a.inputs[1].shape())),
            ]
        }))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = binary(&self.value, &other.value, |a, b| a - b)?;
        Ok(self.tape.apply(out, &[self, other], |a| {
            vec![
                a.needs[0].then(|| reduce_to(a.grad, a.inputs[0].shape())),
                a.needs[1].then(|| reduce_to(&a.grad.scale(-1.0), a.inputs[1].shape())),
            ]
        }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = binary(&self.value, &other.value, |a, b| a * b)?;
        Ok(self.tape.apply(out, &[self, other], |a| {
            let (x, y) = (a.inputs[0], a.inputs[1]);
            vec![
                a.needs[0]
                    .then(|| reduce_to(&ternary_out(x, y, a.grad, |_, y, g| g * y), x.shape())),
                a.needs[1]
                    .then(|| reduce_to(&ternary_out(x, y, a.grad, |x, _, g| g * x), y.shape())),
            ]
        }))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = binary(&self.value, &other.value, |a, b| a / b)?;
        Ok(self.tape.apply(out, &[self, other], |a| {
            let (x, y) = (a.inputs[0], a.inputs[1]);
            vec![
                a.needs[0]
                    .then(|| reduce_to(&ternary_out(x, y, a.grad, |_, y, g| g / y), x.shape())),
                a.needs[1].then(|| {
                    reduce_to(
                        &ternary_out(x, y, a.grad, |x, y, g| -g * x / (y * y)),
                        y.shape(),
                    )
                }),
            ]
        }))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.tape.apply(self.value.scale(s), &[self], move |a| {
            vec![Some(a.grad.scale(s))]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.tape.apply(self.value.map(|v| v + s), &[self], |a| {
            vec![Some(a.grad.clone())]
        })
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Var<'t> {
        self.tape.apply(self.value.map(|v| 1.0 - v), &[self], |a| {
            vec![Some(a.grad.scale(-1.0))]
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(gelu_scalar, |x, _| gelu_grad_scalar(x))
    }

    /// `max(x, 0)^2`.
    pub fn squared_relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0).powi(2), |x, _| 2.0 * x.max(0.0))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    /// Clamp with a zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let out = self.value.map(|v| v.clamp(lo, hi));
        self.tape.apply(out, &[self], move |a| {
            let g = a
                .grad
                .data()
                .iter()
                .zip(a.inputs[0].data())
                .map(|(g, &x)| if (lo..=hi).contains(&x) { *g } else { 0.0 })
                .collect();
            vec![Some(Tensor::from_parts(a.grad.shape().to_vec(), g))]
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value.sum());
        self.tape.apply(out, &[self], |a| {
            vec![Some(Tensor::full(a.inputs[0].shape(), a.grad.item()))]
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    /// Mean over `axis`, keeping it with length 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        if axis >= self.value.rank() {
            return Err(Error::shape(
                "reduce_axis",
                format!("axis {axis} for {:?}", self.shape()),
            ));
        }
        let scale = if mean {
            1.0 / self.value.dim(axis) as f64
        } else {
            1.0
        };
        let out = sum_axis_keepdim(&self.value, axis).scale(scale);
        Ok(self.tape.apply(out, &[self], move |a| {
            vec![Some(expand_axis(a.grad, a.inputs[0].shape(), axis, scale))]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value.reshape(shape)?;
        Ok(self.tape.apply(out, &[self], |a| {
            vec![Some(Tensor::from_parts(
                a.inputs[0].shape().to_vec(),
                a.grad.data().to_vec(),
            ))]
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let out = self.value.permute(perm)?;
        let inv = inverse_perm(perm);
        Ok(self.tape.apply(out, &[self], move |a| {
            vec![Some(a.grad.permute(&inv).expect("inverse permutation"))]
        }))
    }

    /// `[B, N, C]` tokens to a `[B, C, H, W]` image.
    pub fn tokens_to_image(&self, h: usize, w: usize) -> Result<Var<'t>> {
        self.value.expect_rank("tokens_to_image", 3)?;
        let (b, n, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if n != h * w {
            return Err(Error::shape(
                "tokens_to_image",
                format!("{n} tokens for a {h}x{w} grid"),
            ));
        }
        self.permute(&[0, 2, 1])?.reshape(&[b, c, h, w])
    }

    /// `[B, C, H, W]` image to `[B, H*W, C]` tokens.
    pub fn image_to_tokens(&self) -> Result<Var<'t>> {
        self.value.expect_rank("image_to_tokens", 4)?;
        let s = self.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        self.reshape(&[b, c, hw])?.permute(&[0, 2, 1])
    }

    pub fn concat(parts: &[&Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let values: Vec<&Tensor> = parts.iter().map(|v| v.value.as_ref()).collect();
        let out = Tensor::concat(&values, axis)?;
        let lens: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        Ok(first.tape.apply(out, parts, move |a| {
            let mut start = 0;
            lens.iter()
                .zip(a.needs)
                .map(|(&len, &need)| {
                    let g = need.then(|| a.grad.narrow(axis, start, len).expect("concat slice"));
                    start += len;
                    g
                })
                .collect()
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = self.value.narrow(axis, start, len)?;
        Ok(self.tape.apply(out, &[self], move |a| {
            let shape = a.inputs[0].shape();
            let (outer, full, inner) = split_axis(shape, axis);
            let mut g = vec![0.0; a.inputs[0].numel()];
            for o in 0..outer {
                let src = &a.grad.data()[o * len * inner..][..len * inner];
                g[(o * full + start) * inner..][..len * inner].copy_from_slice(src);
            }
            vec![Some(Tensor::from_parts(shape.to_vec(), g))]
        }))
    }

    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = bmm(&self.value, &other.value)?;
        Ok(self.tape.apply(out, &[self, other], |a| {
            let (ga, gb) = bmm_backward(a.inputs[0], a.inputs[1], a.grad);
            vec![Some(ga), Some(gb)]
        }))
    }

    /// `x W^T + b` over the last axis, `W: [C_out, C_in]`.
    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let out = linear(&self.value, &weight.value, bias.map(|b| b.value.as_ref()))?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape.apply(out, &inputs, |a| {
            let (gx, gw, gb) = linear_backward(a.inputs[0], a.inputs[1], a.grad, a.needs[0]);
            let mut grads = vec![gx, Some(gw)];
            if a.inputs.len() == 3 {
                grads.push(Some(gb));
            }
            grads
        }))
    }

    pub fn conv2d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        spec: ConvSpec,
    ) -> Result<Var<'t>> {
        let out = conv2d(
            &self.value,
            &weight.value,
            bias.map(|b| b.value.as_ref()),
            &spec,
        )?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape.apply(out, &inputs, move |a| {
            let has_bias = a.inputs.len() == 3;
            let need = [a.needs[0], a.needs[1], has_bias && a.needs[2]];
            let g = conv2d_backward(a.inputs[0], a.inputs[1], &spec, a.grad, need)
                .expect("conv2d shapes");
            let mut grads = vec![g.input, g.weight];
            if has_bias {
                grads.push(g.bias);
            }
            grads
        }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let out = softmax(&self.value, axis)?;
        Ok(self.tape.apply(out, &[self], move |a| {
            vec![Some(softmax_backward(a.output, a.grad, axis))]
        }))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gain: &Var<'t>, shift: &Var<'t>) -> Result<Var<'t>> {
        let (out, _, _) = layer_norm_with_stats(&self.value, &gain.value, &shift.value)?;
        Ok(self.tape.apply(out, &[self, gain, shift], |a| {
            let (_, xhat, inv_std) =
                layer_norm_with_stats(a.inputs[0], a.inputs[1], a.inputs[2]).expect("shapes");
            let (gx, gg, gs) = layer_norm_backward(&xhat, &inv_std, a.inputs[1], a.grad);
            vec![Some(gx), Some(gg), Some(gs)]
        }))
    }

    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let out = bilinear_resize(&self.value, out_h, out_w)?;
        Ok(self.tape.apply(out, &[self], |a| {
            vec![Some(bilinear_resize_backward(a.inputs[0].shape(), a.grad))]
        }))
    }

    pub fn adaptive_avg_pool(&self, g: usize) -> Result<Var<'t>> {
        let out = adaptive_avg_pool(&self.value, g)?;
        Ok(self.tape.apply(out, &[self], |a| {
            vec![Some(adaptive_avg_pool_backward(
                a.inputs[0].shape(),
                a.grad,
            ))]
        }))
    }

    /// Bilinear upsampling by `factor` at positions displaced by `offsets`.
    pub fn offset_upsample(&self, offsets: &Var<'t>, factor: usize) -> Result<Var<'t>> {
        let out = offset_upsample(&self.value, &offsets.value, factor)?;
        Ok(self.tape.apply(out, &[self, offsets], move |a| {
            let (gx, goff) = offset_upsample_backward(a.inputs[0], a.inputs[1], factor, a.grad);
            vec![Some(gx), Some(goff)]
        }))
    }

    /// Shares the forward value without recording a dependency.
    pub fn detach(&self) -> Var<'t> {
        Var {
            tape: self.tape,
            id: None,
            value: Rc::clone(&self.value),
        }
    }
}
