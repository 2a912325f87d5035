use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} for shape {:?}", x.shape()),
        ));
    }
    let (outer, len, inner) = split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let m = (0..len)
                .map(|j| xd[at(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..len {
                let e = (xd[at(j)] - m).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[at(j)] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Given the softmax output `y` and upstream gradient, returns the input gradient.
pub fn softmax_backward(y: &Tensor, grad: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split(y.shape(), axis);
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let s: f64 = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - s);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}
