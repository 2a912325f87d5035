//! Right-aligned (numpy-style) broadcasting for binary elementwise ops.

use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("{a:?} and {b:?} are not broadcast-compatible"),
                ))
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                s[i - pad]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every output element.
fn for_each_offset(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    if b.numel() == 1 && out == a.shape() {
        let s = b.data()[0];
        return Ok(a.map(|x| f(x, s)));
    }
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let n: usize = out.iter().product();
    let mut data = vec![0.0; n];
    let (da, db) = (a.data(), b.data());
    for_each_offset(&out, &sa, &sb, |i, oa, ob| data[i] = f(da[oa], db[ob]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums `grad` (shaped like a broadcast result) back down to `shape`.
pub fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape().to_vec();
    let st = broadcast_strides(shape, &out);
    let unit = vec![0; out.len()];
    let mut acc = vec![0.0; shape.iter().product()];
    let g = grad.data();
    for_each_offset(&out, &st, &unit, |i, ot, _| acc[ot] += g[i]);
    Tensor::from_parts(shape.to_vec(), acc)
}

/// `f(a, b)` evaluated elementwise over the broadcast of `a`, `b` and `c`
/// where `c` already has the output shape. Used by backward closures.
pub fn ternary_out(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let out = c.shape();
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut data = vec![0.0; c.numel()];
    let (da, db, dc) = (a.data(), b.data(), c.data());
    for_each_offset(out, &sa, &sb, |i, oa, ob| {
        data[i] = f(da[oa], db[ob], dc[i])
    });
    Tensor::from_parts(out.to_vec(), data)
}
