//! Bidirectional decayed key-value attention and its decay generator.
//!
//! For token `t` and channel `c`:
//!
//! ```text
//! y[t] = (sum_{i != t} e^{E(t,i)} v[i] + e^{u + k[t]} v[t])
//!      / (sum_{i != t} e^{E(t,i)}      + e^{u + k[t]})
//! E(t,i) = k[i] - (|t - i| - 1) / T * w
//! ```
//!
//! `w` is one value per channel (instance mode, shape `[B, C]`) or one per
//! token and channel (per-token mode, shape `[B, T, C]`, indexed by the
//! aggregating token `t`). [`dywkv_naive`] evaluates the double sum directly;
//! [`dywkv_scan`] computes the instance-mode result in `O(T)` per channel with
//! two running-max-stabilized recurrences.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{join, Bound, Init, ParamSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// Decay pooled over tokens: one value per channel and sample.
    #[default]
    Instance,
    /// Decay per token, indexed by the aggregating token.
    PerToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WkvKernel {
    Naive,
    Scan,
}

struct Dims {
    batch: usize,
    tokens: usize,
    channels: usize,
    per_token: bool,
}

fn dims(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<Dims> {
    k.expect_rank("dywkv", 3)?;
    let (batch, tokens, channels) = (k.dim(0), k.dim(1), k.dim(2));
    v.expect_shape("dywkv", k.shape())?;
    u.expect_shape("dywkv", &[channels])?;
    let per_token = match w.rank() {
        2 => {
            w.expect_shape("dywkv", &[batch, channels])?;
            false
        }
        3 => {
            w.expect_shape("dywkv", k.shape())?;
            true
        }
        _ => {
            return Err(Error::shape(
                "dywkv",
                format!("decay shape {:?}", w.shape()),
            ))
        }
    };
    Ok(Dims {
        batch,
        tokens,
        channels,
        per_token,
    })
}

/// `[B, T, C]` buffer reordered to `[B, C, T]`.
fn channel_major(src: &[f64], d: &Dims) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..d.batch {
        for t in 0..d.tokens {
            let row = &src[(b * d.tokens + t) * d.channels..(b * d.tokens + t + 1) * d.channels];
            for (c, x) in row.iter().enumerate() {
                out[(b * d.channels + c) * d.tokens + t] = *x;
            }
        }
    }
    out
}

/// Strided column `(b, ., c)` of a `[B, T, C]` buffer.
fn column(src: &[f64], d: &Dims, b: usize, c: usize, out: &mut [f64]) {
    for (t, o) in out.iter_mut().enumerate() {
        *o = src[(b * d.tokens + t) * d.channels + c];
    }
}

fn decay_table(w: f64, tokens: usize, table: &mut [f64]) {
    // table[delta] = exp(-(delta - 1) w / T); index 0 unused
    let step = (-w / tokens as f64).exp();
    let mut acc = 1.0;
    table[0] = 0.0;
    for d in table.iter_mut().skip(1) {
        *d = acc;
        acc *= step;
    }
}

fn decay_table_exact(w: f64, tokens: usize, table: &mut [f64]) {
    let lambda = w / tokens as f64;
    table[0] = 0.0;
    for (delta, d) in table.iter_mut().enumerate().skip(1) {
        *d = (-(delta as f64 - 1.0) * lambda).exp();
    }
}

/// `(sum_i a[i] * b[i], sum_i a[i] * b[i] * c[i])` with four partial lanes.
#[inline]
fn dot2(a: &[f64], b: &[f64], c: &[f64]) -> (f64, f64) {
    let n = a.len();
    let (mut d0, mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0, 0.0);
    let (mut n0, mut n1, mut n2, mut n3) = (0.0, 0.0, 0.0, 0.0);
    let chunks = n / 4;
    for j in 0..chunks {
        let i = 4 * j;
        let w0 = a[i] * b[i];
        let w1 = a[i + 1] * b[i + 1];
        let w2 = a[i + 2] * b[i + 2];
        let w3 = a[i + 3] * b[i + 3];
        d0 += w0;
        d1 += w1;
        d2 += w2;
        d3 += w3;
        n0 += w0 * c[i];
        n1 += w1 * c[i + 1];
        n2 += w2 * c[i + 2];
        n3 += w3 * c[i + 3];
    }
    for i in 4 * chunks..n {
        let w = a[i] * b[i];
        d0 += w;
        n0 += w * c[i];
    }
    ((d0 + d1) + (d2 + d3), (n0 + n1) + (n2 + n3))
}

/// Reverse of `table[1..=len]`, so that `rev[j] = table[len - j]`.
fn reversed_prefix(table: &[f64], len: usize, out: &mut [f64]) {
    for j in 0..len {
        out[j] = table[len - j];
    }
}

/// Direct `O(T^2)` evaluation, either decay mode.
pub fn dywkv_naive(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<Tensor> {
    let d = dims(k, v, w, u)?;
    if d.tokens == 0 {
        return Err(Error::Invalid("dywkv needs at least one token".into()));
    }
    let t_len = d.tokens;
    let mut out = vec![0.0; k.numel()];
    let (mut kc, mut vc, mut ek) = (vec![0.0; t_len], vec![0.0; t_len], vec![0.0; t_len]);
    let mut table = vec![0.0; t_len + 1];
    let mut rev = vec![0.0; t_len + 1];
    let mut wc = vec![0.0; t_len];
    for b in 0..d.batch {
        for c in 0..d.channels {
            column(k.data(), &d, b, c, &mut kc);
            column(v.data(), &d, b, c, &mut vc);
            let kmax = kc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (e, &kv) in ek.iter_mut().zip(&kc) {
                *e = (kv - kmax).exp();
            }
            if d.per_token {
                column(w.data(), &d, b, c, &mut wc);
            } else {
                decay_table(w.data()[b * d.channels + c], t_len, &mut table);
            }
            for t in 0..t_len {
                if d.per_token {
                    decay_table(wc[t], t_len, &mut table);
                }
                // left: i in 0..t, delta = t - i
                reversed_prefix(&table, t, &mut rev);
                let (dl, nl) = dot2(&ek[..t], &rev[..t], &vc[..t]);
                // right: i in t+1..T, delta = i - t
                let (dr, nr) = dot2(&ek[t + 1..], &table[1..t_len - t], &vc[t + 1..]);
                let bonus = u.data()[c] + kc[t] - kmax;
                let m = bonus.max(0.0);
                let scale = (-m).exp();
                let eb = (bonus - m).exp();
                let num = (nl + nr) * scale + eb * vc[t];
                let den = (dl + dr) * scale + eb;
                out[(b * t_len + t) * d.channels + c] = num / den;
            }
        }
    }
    Ok(Tensor::from_parts(k.shape().to_vec(), out))
}

/// Running `e^m * (a, b)` accumulator.
#[derive(Clone, Copy)]
struct Acc {
    a: f64,
    b: f64,
    m: f64,
}

impl Acc {
    const EMPTY: Acc = Acc {
        a: 0.0,
        b: 0.0,
        m: f64::NEG_INFINITY,
    };

    /// Decays the held sum by `e^{-lambda}` and adds `e^k (v, 1)`.
    #[inline]
    fn push(self, lambda: f64, k: f64, v: f64) -> Acc {
        let decayed = self.m - lambda;
        if decayed >= k {
            let e = (k - decayed).exp();
            Acc {
                a: self.a + e * v,
                b: self.b + e,
                m: decayed,
            }
        } else {
            let e = (decayed - k).exp();
            Acc {
                a: self.a * e + v,
                b: self.b * e + 1.0,
                m: k,
            }
        }
    }
}

/// `O(T)` instance-mode evaluation; agrees with [`dywkv_naive`].
pub fn dywkv_scan(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<Tensor> {
    let d = dims(k, v, w, u)?;
    if d.per_token {
        return Err(Error::Invalid(
            "the scan kernel needs instance-mode decay; use the naive kernel for per-token decay"
                .into(),
        ));
    }
    if d.tokens == 0 {
        return Err(Error::Invalid("dywkv needs at least one token".into()));
    }
    let (t_len, ch) = (d.tokens, d.channels);
    // channel-major copies keep each sweep on contiguous memory
    let kt = channel_major(k.data(), &d);
    let vt = channel_major(v.data(), &d);
    let mut yt = vec![0.0; k.numel()];
    let mut behind = vec![Acc::EMPTY; t_len];
    for b in 0..d.batch {
        for c in 0..ch {
            let col = (b * ch + c) * t_len..(b * ch + c + 1) * t_len;
            let (kc, vc, yc) = (&kt[col.clone()], &vt[col.clone()], &mut yt[col]);
            let lambda = w.data()[b * ch + c] / t_len as f64;
            let uc = u.data()[c];
            // behind[t] holds i > t, stored before the forward sweep
            let mut acc = Acc::EMPTY;
            for t in (0..t_len).rev() {
                behind[t] = acc;
                acc = acc.push(lambda, kc[t], vc[t]);
            }
            let mut ahead = Acc::EMPTY;
            for t in 0..t_len {
                let back = behind[t];
                let bonus = uc + kc[t];
                let m = bonus.max(ahead.m).max(back.m);
                let (sf, sb, se) = ((ahead.m - m).exp(), (back.m - m).exp(), (bonus - m).exp());
                let num = ahead.a * sf + back.a * sb + vc[t] * se;
                let den = ahead.b * sf + back.b * sb + se;
                yc[t] = num / den;
                ahead = ahead.push(lambda, kc[t], vc[t]);
            }
        }
    }
    let mut out = vec![0.0; k.numel()];
    for b in 0..d.batch {
        for c in 0..ch {
            let src = &yt[(b * ch + c) * t_len..(b * ch + c + 1) * t_len];
            for (t, y) in src.iter().enumerate() {
                out[(b * t_len + t) * ch + c] = *y;
            }
        }
    }
    Ok(Tensor::from_parts(k.shape().to_vec(), out))
}

/// Largest `|a - b|` in each channel, relative to that channel's largest
/// `|v|`; the maximum over channels. Outputs are convex combinations of `v`,
/// so this is the error on the natural scale of each output.
pub fn relative_error(a: &Tensor, b: &Tensor, v: &Tensor) -> f64 {
    let c = *v.shape().last().unwrap_or(&1);
    let mut scale = vec![0.0f64; c];
    for (i, x) in v.data().iter().enumerate() {
        scale[i % c] = scale[i % c].max(x.abs());
    }
    let mut worst = 0.0f64;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        worst = worst.max((x - y).abs() / scale[i % c].max(1e-300));
    }
    worst
}

pub struct WkvGrads {
    pub k: Tensor,
    pub v: Tensor,
    pub w: Tensor,
    pub u: Tensor,
}

/// Closed-form quotient-rule gradients, `O(T^2)` per channel, either mode.
/// `y` is the forward output.
pub fn dywkv_backward(
    k: &Tensor,
    v: &Tensor,
    w: &Tensor,
    u: &Tensor,
    y: &Tensor,
    grad: &Tensor,
) -> Result<WkvGrads> {
    let d = dims(k, v, w, u)?;
    grad.expect_shape("dywkv_backward", k.shape())?;
    let t_len = d.tokens;
    let inv_t = 1.0 / t_len as f64;
    let mut gk = vec![0.0; k.numel()];
    let mut gv = vec![0.0; k.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gu = vec![0.0; d.channels];
    let (mut kc, mut vc, mut ek) = (vec![0.0; t_len], vec![0.0; t_len], vec![0.0; t_len]);
    let (mut yc, mut gc, mut wc) = (vec![0.0; t_len], vec![0.0; t_len], vec![0.0; t_len]);
    let mut table = vec![0.0; t_len + 1];
    let (mut gkc, mut gvc) = (vec![0.0; t_len], vec![0.0; t_len]);
    for b in 0..d.batch {
        for c in 0..d.channels {
            column(k.data(), &d, b, c, &mut kc);
            column(v.data(), &d, b, c, &mut vc);
            column(y.data(), &d, b, c, &mut yc);
            column(grad.data(), &d, b, c, &mut gc);
            if d.per_token {
                column(w.data(), &d, b, c, &mut wc);
            } else {
                wc.fill(w.data()[b * d.channels + c]);
                decay_table_exact(wc[0], t_len, &mut table);
            }
            let kmax = kc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (e, &kv) in ek.iter_mut().zip(&kc) {
                *e = (kv - kmax).exp();
            }
            gkc.fill(0.0);
            gvc.fill(0.0);
            let mut gw_inst = 0.0;
            for t in 0..t_len {
                if d.per_token {
                    decay_table_exact(wc[t], t_len, &mut table);
                }
                let bonus = u.data()[c] + kc[t] - kmax;
                let m = bonus.max(0.0);
                let scale = (-m).exp();
                let eb = (bonus - m).exp();
                let mut den = eb;
                for i in 0..t_len {
                    if i != t {
                        den += ek[i] * table[t.abs_diff(i)] * scale;
                    }
                }
                let g = gc[t] / den;
                let mut gw_t = 0.0;
                for i in 0..t_len {
                    if i == t {
                        continue;
                    }
                    let delta = t.abs_diff(i);
                    let p = ek[i] * table[delta] * scale * g;
                    gvc[i] += p;
                    let dv = p * (vc[i] - yc[t]);
                    gkc[i] += dv;
                    gw_t -= dv * (delta as f64 - 1.0) * inv_t;
                }
                let pb = eb * g * (vc[t] - yc[t]);
                gvc[t] += eb * g;
                gkc[t] += pb;
                gu[c] += pb;
                if d.per_token {
                    gw[(b * t_len + t) * d.channels + c] = gw_t;
                } else {
                    gw_inst += gw_t;
                }
            }
            if !d.per_token {
                gw[b * d.channels + c] = gw_inst;
            }
            for t in 0..t_len {
                gk[(b * t_len + t) * d.channels + c] = gkc[t];
                gv[(b * t_len + t) * d.channels + c] = gvc[t];
            }
        }
    }
    Ok(WkvGrads {
        k: Tensor::from_parts(k.shape().to_vec(), gk),
        v: Tensor::from_parts(k.shape().to_vec(), gv),
        w: Tensor::from_parts(w.shape().to_vec(), gw),
        u: Tensor::from_parts(vec![d.channels], gu),
    })
}

/// Differentiable Dy-WKV. The scan kernel is only valid for instance-mode
/// decay; the backward pass always uses the closed-form gradients.
pub fn dywkv<'t>(
    k: &Var<'t>,
    v: &Var<'t>,
    w: &Var<'t>,
    u: &Var<'t>,
    kernel: WkvKernel,
) -> Result<Var<'t>> {
    let out = match kernel {
        WkvKernel::Naive => dywkv_naive(k.value(), v.value(), w.value(), u.value())?,
        WkvKernel::Scan => dywkv_scan(k.value(), v.value(), w.value(), u.value())?,
    };
    Ok(k.tape().apply(out, &[k, v, w, u], |a| {
        let g = dywkv_backward(
            a.inputs[0],
            a.inputs[1],
            a.inputs[2],
            a.inputs[3],
            a.output,
            a.grad,
        )
        .expect("validated in forward");
        vec![Some(g.k), Some(g.v), Some(g.w), Some(g.u)]
    }))
}

/// Decay generator parameters for one block.
pub struct DecayParams<'t> {
    /// Unconstrained base decay; the effective base is `softplus(w_base_raw)`.
    pub w_base_raw: Var<'t>,
    pub proj_w: Var<'t>,
    pub proj_b: Var<'t>,
    pub u: Var<'t>,
}

impl<'t> DecayParams<'t> {
    pub fn specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(
                join(prefix, "w_base_raw"),
                &[channels],
                Init::Const(crate::ops::activation::softplus_inv(1.0)),
            ),
            ParamSpec::new(
                join(prefix, "decay_w"),
                &[channels, channels],
                Init::TruncNormal(0.02),
            ),
            ParamSpec::new(join(prefix, "decay_b"), &[channels], Init::Zeros),
            ParamSpec::new(join(prefix, "u"), &[channels], Init::Zeros),
        ]
    }

    pub fn bind(bound: &Bound<'t>, prefix: &str) -> Result<Self> {
        Ok(DecayParams {
            w_base_raw: bound.param(prefix, "w_base_raw")?,
            proj_w: bound.param(prefix, "decay_w")?,
            proj_b: bound.param(prefix, "decay_b")?,
            u: bound.param(prefix, "u")?,
        })
    }
}

/// Effective decay `softplus(w_base_raw) * exp(-sigmoid(W_decay x_agg))` for
/// tokens `x: [B, T, C]`: shape `[B, C]` in instance mode (token mean pooled
/// first), `[B, T, C]` in per-token mode.
pub fn dscd<'t>(x: &Var<'t>, params: &DecayParams<'t>, mode: DecayMode) -> Result<Var<'t>> {
    x.value().expect_rank("dscd", 3)?;
    let (b, c) = (x.shape()[0], x.shape()[2]);
    let agg = match mode {
        DecayMode::Instance => x.mean_axis(1)?.reshape(&[b, c])?,
        DecayMode::PerToken => x.clone(),
    };
    let gate = agg
        .linear(&params.proj_w, Some(&params.proj_b))?
        .sigmoid()
        .neg()
        .exp();
    gate.mul(&params.w_base_raw.softplus())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, GradCheck, Tape};
    use crate::params::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Unstabilized double loop, written from the definition.
    fn double_loop(k: &[f64], v: &[f64], w: &[f64], u: f64) -> Vec<f64> {
        let t_len = k.len();
        (0..t_len)
            .map(|t| {
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..t_len {
                    let e = if i == t {
                        (u + k[t]).exp()
                    } else {
                        (k[i] - (t.abs_diff(i) as f64 - 1.0) / t_len as f64 * w[t]).exp()
                    };
                    num += e * v[i];
                    den += e;
                }
                num / den
            })
            .collect()
    }

    fn col(x: &Tensor, c: usize) -> Vec<f64> {
        let ch = x.dim(2);
        x.data().iter().skip(c).step_by(ch).cloned().collect()
    }

    fn random_case(
        r: &mut ChaCha8Rng,
        t: usize,
        c: usize,
        kscale: f64,
    ) -> (Tensor, Tensor, Tensor, Tensor) {
        let k = Tensor::randn(&[1, t, c], r).scale(kscale);
        let v = Tensor::randn(&[1, t, c], r);
        let w = Tensor::uniform(&[1, c], 0.05, 3.0, r);
        let u = Tensor::randn(&[c], r);
        (k, v, w, u)
    }

    #[test]
    fn hand_case_t3() {
        // k = (0, ln 2, 0), v = (1, 2, 3), w = 1, u = 0, T = 3.
        // t=0: i=1 weight 2, i=2 weight e^{-1/3}, bonus 1
        // t=1: i=0 weight 1, i=2 weight 1, bonus 2
        // t=2: i=0 weight e^{-1/3}, i=1 weight 2, bonus 1
        let a = (-1.0f64 / 3.0).exp();
        let expect = [
            (1.0 + 2.0 * 2.0 + 3.0 * a) / (1.0 + 2.0 + a),
            (1.0 + 2.0 * 2.0 + 3.0) / 4.0,
            (1.0 * a + 2.0 * 2.0 + 3.0) / (a + 2.0 + 1.0),
        ];
        let k = Tensor::new(&[1, 3, 1], vec![0.0, 2f64.ln(), 0.0]).unwrap();
        let v = Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let u = Tensor::zeros(&[1]);
        for y in [
            dywkv_naive(&k, &v, &w, &u).unwrap(),
            dywkv_scan(&k, &v, &w, &u).unwrap(),
        ] {
            for (got, want) in y.data().iter().zip(expect) {
                assert!((got - want).abs() < 1e-14, "{got} vs {want}");
            }
        }
        assert!((expect[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn naive_matches_double_loop_both_modes() {
        let mut r = rng(1);
        for t in [1, 2, 5, 17] {
            let (k, v, w, u) = random_case(&mut r, t, 3, 1.0);
            let y = dywkv_naive(&k, &v, &w, &u).unwrap();
            let wt = Tensor::uniform(&[1, t, 3], 0.05, 3.0, &mut r);
            let yt = dywkv_naive(&k, &v, &wt, &u).unwrap();
            for c in 0..3 {
                let wi = vec![w.data()[c]; t];
                let ref_i = double_loop(&col(&k, c), &col(&v, c), &wi, u.data()[c]);
                let ref_t = double_loop(&col(&k, c), &col(&v, c), &col(&wt, c), u.data()[c]);
                for ((a, b), (x, z)) in col(&y, c)
                    .iter()
                    .zip(&ref_i)
                    .zip(col(&yt, c).iter().zip(&ref_t))
                {
                    assert!((a - b).abs() < 1e-12);
                    assert!((x - z).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_returns_value() {
        let k = Tensor::new(&[1, 1, 2], vec![3.0, -40.0]).unwrap();
        let v = Tensor::new(&[1, 1, 2], vec![0.25, -7.0]).unwrap();
        let w = Tensor::ones(&[1, 2]);
        let u = Tensor::new(&[2], vec![5.0, -1.0]).unwrap();
        assert_eq!(dywkv_naive(&k, &v, &w, &u).unwrap(), v);
        assert_eq!(dywkv_scan(&k, &v, &w, &u).unwrap(), v);
    }

    #[test]
    fn constant_values_pass_through() {
        let mut r = rng(2);
        let (k, _, w, u) = random_case(&mut r, 30, 4, 5.0);
        let v = Tensor::from_fn(&[1, 30, 4], |i| (i % 4) as f64 - 1.5);
        for y in [
            dywkv_naive(&k, &v, &w, &u).unwrap(),
            dywkv_scan(&k, &v, &w, &u).unwrap(),
        ] {
            assert!(y.max_abs_diff(&v) < 1e-12);
        }
    }

    #[test]
    fn large_keys_do_not_overflow() {
        let mut r = rng(3);
        let (k, v, w, u) = random_case(&mut r, 64, 4, 50.0);
        let k = k.map(|x| x + 700.0);
        let a = dywkv_naive(&k, &v, &w, &u).unwrap();
        let b = dywkv_scan(&k, &v, &w, &u).unwrap();
        assert!(a.all_finite() && b.all_finite());
        assert!(relative_error(&a, &b, &v) < 1e-10);
    }

    #[test]
    fn scan_rejects_per_token_decay() {
        let k = Tensor::zeros(&[1, 4, 2]);
        let w = Tensor::ones(&[1, 4, 2]);
        assert!(dywkv_scan(&k, &k, &w, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn vanishing_decay_is_softmax_of_keys() {
        // w -> 0 and u = 0: every token sees softmax(k)-weighted mean of v
        let mut r = rng(4);
        let (k, v, _, _) = random_case(&mut r, 9, 2, 1.0);
        let w = Tensor::full(&[1, 2], 1e-12);
        let y = dywkv_scan(&k, &v, &w, &Tensor::zeros(&[2])).unwrap();
        for c in 0..2 {
            let (kc, vc) = (col(&k, c), col(&v, c));
            let z: f64 = kc.iter().map(|x| x.exp()).sum();
            let mean: f64 = kc.iter().zip(&vc).map(|(a, b)| a.exp() * b).sum::<f64>() / z;
            for yt in col(&y, c) {
                assert!((yt - mean).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dscd_limits_and_range() {
        let store = ParamStore::init(&DecayParams::specs("d", 4), &mut rng(5)).unwrap();
        let tape = Tape::no_grad();
        let bound = Bound::frozen(&tape, &store);
        let p = DecayParams::bind(&bound, "d").unwrap();
        let x = tape.constant(Tensor::randn(&[2, 6, 4], &mut rng(6)).scale(20.0));
        for mode in [DecayMode::Instance, DecayMode::PerToken] {
            let w = dscd(&x, &p, mode).unwrap();
            let base = 1.0; // softplus(softplus_inv(1))
            for &r in w.value().data() {
                assert!(r / base > (-1.0f64).exp() && r / base < 1.0);
            }
        }
        // zero projection: exactly w_base * e^{-1/2}
        let zero = tape.constant(Tensor::zeros(&[4, 4]));
        let p0 = DecayParams {
            proj_w: zero,
            ..DecayParams::bind(&bound, "d").unwrap()
        };
        let w = dscd(&x, &p0, DecayMode::Instance).unwrap();
        for &r in w.value().data() {
            assert!((r - (-0.5f64).exp()).abs() < 1e-12);
        }
        let big = tape.constant(Tensor::full(&[4], 1e3));
        let p1 = DecayParams {
            proj_b: big,
            proj_w: tape.constant(Tensor::zeros(&[4, 4])),
            ..DecayParams::bind(&bound, "d").unwrap()
        };
        let w = dscd(&x, &p1, DecayMode::Instance).unwrap();
        assert!((w.value().data()[0] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn gradient_naive_t6_c3() {
        let mut r = rng(7);
        let (k, v, _, u) = random_case(&mut r, 6, 3, 1.0);
        let w = Tensor::uniform(&[1, 3], 0.2, 2.0, &mut r);
        let report = finite_diff_check(
            "dywkv_naive",
            |_, x| Ok(dywkv(&x[0], &x[1], &x[2], &x[3], WkvKernel::Naive)?.mean()),
            &[k, v, w, u],
            &GradCheck::default(),
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    fn projected<'t>(
        tape: &'t Tape,
        x: &[Var<'t>],
        kernel: WkvKernel,
        proj: &Tensor,
    ) -> Result<Var<'t>> {
        Ok(dywkv(&x[0], &x[1], &x[2], &x[3], kernel)?
            .mul(&tape.constant(proj.clone()))?
            .sum())
    }

    #[test]
    fn gradient_per_token_and_scan() {
        let mut r = rng(8);
        let (k, v, w, u) = random_case(&mut r, 7, 2, 1.0);
        let wt = Tensor::uniform(&[2, 7, 2], 0.2, 2.0, &mut r);
        let k2 = Tensor::concat(&[&k, &k.scale(0.5)], 0).unwrap();
        let v2 = Tensor::concat(&[&v, &v.scale(-1.0)], 0).unwrap();
        let proj = Tensor::randn(&[2, 7, 2], &mut r);
        let r1 = finite_diff_check(
            "dywkv_per_token",
            |tape, x| projected(tape, x, WkvKernel::Naive, &proj),
            &[k2.clone(), v2.clone(), wt, u.clone()],
            &GradCheck::default(),
        )
        .unwrap();
        assert!(r1.passed, "{r1}");
        let w2 = Tensor::concat(&[&w, &w.scale(2.0)], 0).unwrap();
        let r2 = finite_diff_check(
            "dywkv_scan",
            |tape, x| projected(tape, x, WkvKernel::Scan, &proj),
            &[k2, v2, w2, u],
            &GradCheck::default(),
        )
        .unwrap();
        assert!(r2.passed, "{r2}");
    }

    #[test]
    fn gradient_dscd() {
        let mut r = rng(9);
        let specs = DecayParams::specs("", 4);
        let inputs: Vec<Tensor> = std::iter::once(Tensor::randn(&[2, 5, 4], &mut r))
            .chain(
                specs
                    .iter()
                    .map(|s| Tensor::randn(&s.shape, &mut r).scale(0.5)),
            )
            .collect();
        let proj = Tensor::randn(&[2, 5, 4], &mut r);
        for mode in [DecayMode::Instance, DecayMode::PerToken] {
            let proj = proj.clone();
            let report = finite_diff_check(
                "dscd",
                move |tape, x| {
                    let p = DecayParams {
                        w_base_raw: x[1].clone(),
                        proj_w: x[2].clone(),
                        proj_b: x[3].clone(),
                        u: x[4].clone(),
                    };
                    let w = dscd(&x[0], &p, mode)?;
                    let rp = match mode {
                        DecayMode::Instance => proj.narrow(1, 0, 1)?.reshape(&[2, 4])?,
                        DecayMode::PerToken => proj.clone(),
                    };
                    Ok(w.mul(&tape.constant(rp))?.sum())
                },
                &inputs,
                &GradCheck::default(),
            )
            .unwrap();
            assert!(report.passed, "{report}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scan_equals_naive(seed in 0u64..u64::MAX, t in 1usize..=64, c in 1usize..=6) {
            let mut r = rng(seed);
            let kscale = r.random_range(0.1..8.0);
            let (k, v, w, u) = random_case(&mut r, t, c, kscale);
            let a = dywkv_naive(&k, &v, &w, &u).unwrap();
            let b = dywkv_scan(&k, &v, &w, &u).unwrap();
            prop_assert!(relative_error(&a, &b, &v) < 1e-10);
        }

        #[test]
        fn output_is_convex_combination(seed in 0u64..u64::MAX, t in 1usize..=40) {
            let mut r = rng(seed);
            let (k, v, w, u) = random_case(&mut r, t, 3, 3.0);
            let y = dywkv_scan(&k, &v, &w, &u).unwrap();
            for c in 0..3 {
                let vc = col(&v, c);
                let lo = vc.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for yt in col(&y, c) {
                    prop_assert!(yt >= lo - 1e-12 && yt <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn key_shift_invariance(seed in 0u64..u64::MAX, shift in -30.0f64..30.0) {
            let mut r = rng(seed);
            let (k, v, w, u) = random_case(&mut r, 20, 2, 2.0);
            let ks = k.map(|x| x + shift);
            for kernel in [dywkv_naive, dywkv_scan] {
                let a = kernel(&k, &v, &w, &u).unwrap();
                let b = kernel(&ks, &v, &w, &u).unwrap();
                prop_assert!(relative_error(&a, &b, &v) < 1e-10);
            }
        }
    }
}
