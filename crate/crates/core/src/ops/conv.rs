//! Stride-1 2-D convolution over `[B, C, H, W]` with dilation, zero padding
//! and depthwise / pointwise / dense channel grouping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvGroups {
    /// One `k x k` filter per channel, weight `[C, 1, k, k]`.
    Depthwise,
    /// `1 x 1` channel mixing, weight `[C_out, C_in, 1, 1]`.
    Pointwise,
    /// Full `k x k` channel mixing, weight `[C_out, C_in, k, k]`.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: ConvGroups,
}

impl ConvSpec {
    /// Shape-preserving spec: padding `(k - 1) * d / 2`.
    pub fn same(kernel_size: usize, dilation: usize, groups: ConvGroups) -> Self {
        ConvSpec {
            kernel_size,
            dilation,
            padding: (kernel_size - 1) * dilation / 2,
            groups,
        }
    }

    pub fn depthwise(kernel_size: usize) -> Self {
        Self::same(kernel_size, 1, ConvGroups::Depthwise)
    }

    pub fn pointwise() -> Self {
        Self::same(1, 1, ConvGroups::Pointwise)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "kernel size {} is not odd",
                self.kernel_size
            )));
        }
        if self.dilation == 0 {
            return Err(Error::Invalid("dilation must be >= 1".into()));
        }
        if self.groups == ConvGroups::Pointwise && self.kernel_size != 1 {
            return Err(Error::Invalid(
                "pointwise convolution needs kernel size 1".into(),
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self, c_in: usize, c_out: usize) -> [usize; 4] {
        let k = self.kernel_size;
        match self.groups {
            ConvGroups::Depthwise => [c_in, 1, k, k],
            ConvGroups::Pointwise => [c_out, c_in, 1, 1],
            ConvGroups::Dense => [c_out, c_in, k, k],
        }
    }

    fn out_len(&self, n: usize) -> Option<usize> {
        (n + 2 * self.padding).checked_sub(self.dilation * (self.kernel_size - 1))
    }
}

/// For each kernel tap, the output range it touches and the matching input start.
fn taps(spec: &ConvSpec, len_in: usize, len_out: usize) -> Vec<Option<(usize, usize, usize)>> {
    (0..spec.kernel_size)
        .map(|t| {
            let offset = (t * spec.dilation) as isize - spec.padding as isize;
            let start = (-offset).max(0) as usize;
            let end = ((len_in as isize - offset).min(len_out as isize)).max(0) as usize;
            (start < end).then(|| (start, end, (start as isize + offset) as usize))
        })
        .collect()
}

struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    /// input channels per group
    cig: usize,
    /// output channels per group
    cog: usize,
}

fn geometry(x: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    x.expect_rank("conv2d", 4)?;
    weight.expect_rank("conv2d", 4)?;
    let (batch, c_in, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let c_out = match spec.groups {
        ConvGroups::Depthwise => c_in,
        _ => weight.dim(0),
    };
    let expected = spec.weight_shape(c_in, c_out);
    if weight.shape() != expected {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight {:?} does not fit {:?} conv over {c_in} input channels (expected {expected:?})",
                weight.shape(),
                spec.groups
            ),
        ));
    }
    let (ho, wo) = match (spec.out_len(h), spec.out_len(w)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} smaller than the dilated kernel"),
            ))
        }
    };
    let (cig, cog) = match spec.groups {
        ConvGroups::Depthwise => (1, 1),
        _ => (c_in, c_out),
    };
    Ok(Geometry {
        batch,
        c_in,
        c_out,
        h,
        w,
        ho,
        wo,
        cig,
        cog,
    })
}

pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = geometry(x, weight, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", b.shape(), g.c_out),
            ));
        }
    }
    let k = spec.kernel_size;
    let ty = taps(spec, g.h, g.ho);
    let tx = taps(spec, g.w, g.wo);
    let (xd, wd) = (x.data(), weight.data());
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0; g.batch * g.c_out * plane_out];
    let pointwise_fast = k == 1 && spec.padding == 0;

    for b in 0..g.batch {
        for co in 0..g.c_out {
            let group = co / g.cog;
            let oplane = &mut out[(b * g.c_out + co) * plane_out..][..plane_out];
            if let Some(bias) = bias {
                oplane.fill(bias.data()[co]);
            }
            for cil in 0..g.cig {
                let ci = group * g.cig + cil;
                let iplane = &xd[(b * g.c_in + ci) * plane_in..][..plane_in];
                let wbase = (co * g.cig + cil) * k * k;
                if pointwise_fast {
                    let wv = wd[wbase];
                    for (o, &i) in oplane.iter_mut().zip(iplane) {
                        *o += wv * i;
                    }
                    continue;
                }
                for (ky, rows) in ty.iter().enumerate() {
                    let Some((oy0, oy1, iy0)) = *rows else {
                        continue;
                    };
                    for (kx, cols) in tx.iter().enumerate() {
                        let Some((ox0, ox1, ix0)) = *cols else {
                            continue;
                        };
                        let wv = wd[wbase + ky * k + kx];
                        let n = ox1 - ox0;
                        for r in 0..oy1 - oy0 {
                            let orow = &mut oplane[(oy0 + r) * g.wo + ox0..][..n];
                            let irow = &iplane[(iy0 + r) * g.w + ix0..][..n];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, g.c_out, g.ho, g.wo], out))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Adjoint of [`conv2d`]; `need` selects `(input, weight, bias)` gradients.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let g = geometry(x, weight, spec)?;
    grad_out.expect_shape("conv2d_backward", &[g.batch, g.c_out, g.ho, g.wo])?;
    let k = spec.kernel_size;
    let ty = taps(spec, g.h, g.ho);
    let tx = taps(spec, g.w, g.wo);
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gx = need[0].then(|| vec![0.0; x.numel()]);
    let mut gw = need[1].then(|| vec![0.0; weight.numel()]);

    if gx.is_some() || gw.is_some() {
        for b in 0..g.batch {
            for co in 0..g.c_out {
                let group = co / g.cog;
                let gplane = &gd[(b * g.c_out + co) * plane_out..][..plane_out];
                for cil in 0..g.cig {
                    let ci = group * g.cig + cil;
                    let ioff = (b * g.c_in + ci) * plane_in;
                    let iplane = &xd[ioff..][..plane_in];
                    let wbase = (co * g.cig + cil) * k * k;
                    for (ky, rows) in ty.iter().enumerate() {
                        let Some((oy0, oy1, iy0)) = *rows else {
                            continue;
                        };
                        for (kx, cols) in tx.iter().enumerate() {
                            let Some((ox0, ox1, ix0)) = *cols else {
                                continue;
                            };
                            let n = ox1 - ox0;
                            let widx = wbase + ky * k + kx;
                            let wv = wd[widx];
                            let mut acc = 0.0;
                            for r in 0..oy1 - oy0 {
                                let grow = &gplane[(oy0 + r) * g.wo + ox0..][..n];
                                let iidx = (iy0 + r) * g.w + ix0;
                                if let Some(gx) = gx.as_mut() {
                                    let gxrow = &mut gx[ioff + iidx..][..n];
                                    for (o, &gv) in gxrow.iter_mut().zip(grow) {
                                        *o += wv * gv;
                                    }
                                }
                                if gw.is_some() {
                                    let irow = &iplane[iidx..][..n];
                                    acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    let gb = need[2].then(|| {
        let mut acc = vec![0.0; g.c_out];
        for b in 0..g.batch {
            for (co, a) in acc.iter_mut().enumerate() {
                *a += gd[(b * g.c_out + co) * plane_out..][..plane_out]
                    .iter()
                    .sum::<f64>();
            }
        }
        Tensor::from_parts(vec![g.c_out], acc)
    });

    Ok(ConvGrads {
        input: gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        weight: gw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
        bias: gb,
    })
}
