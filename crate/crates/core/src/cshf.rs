//! Cross-scale harmonic fusion decoder: projects four feature maps to a common
//! width, upsamples each with content-predicted offsets, adds per-scale
//! embeddings, fuses them with pixelwise scale attention, and gates the
//! concatenated aligned features before a 1-channel logit head.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Conv, LayerNorm, WEIGHT_STD};
use crate::ops::conv::ConvSpec;
use crate::params::{join, Bound, Init, ParamSpec};

/// Offset magnitude bound, in input pixels.
pub const OFFSET_BOUND: f64 = 0.25;
pub const LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CshfConfig {
    pub in_channels: [usize; LEVELS],
    pub dim: usize,
    pub factors: [usize; LEVELS],
}

impl CshfConfig {
    pub fn new(in_channels: [usize; LEVELS], dim: usize, factors: [usize; LEVELS]) -> Result<Self> {
        if dim == 0 || in_channels.contains(&0) || factors.contains(&0) {
            return Err(Error::Invalid(
                "decoder widths and factors must be positive".into(),
            ));
        }
        Ok(CshfConfig {
            in_channels,
            dim,
            factors,
        })
    }

    pub fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let d = self.dim;
        let pw = ConvSpec::pointwise();
        let p = |name: String| join(prefix, &name);
        let mut specs = Vec::new();
        for i in 0..LEVELS {
            let s = self.factors[i];
            specs.extend(Conv::specs(
                &p(format!("proj{i}")),
                self.in_channels[i],
                d,
                pw,
            ));
            specs.extend(Conv::specs(&p(format!("offset{i}")), d, 2 * s * s, pw));
            specs.push(ParamSpec::new(
                p(format!("embed{i}")),
                &[d],
                Init::TruncNormal(WEIGHT_STD),
            ));
        }
        specs.extend(Conv::specs(&p("w_attn".into()), LEVELS * d, LEVELS, pw));
        specs.extend(Conv::specs(&p("w_exp".into()), d, LEVELS * d, pw));
        specs.extend(LayerNorm::specs(&p("out_norm".into()), LEVELS * d));
        specs.extend(Conv::specs(&p("bottleneck".into()), LEVELS * d, 1, pw));
        specs
    }
}

pub struct CshfParams<'t> {
    pub cfg: CshfConfig,
    pub proj: Vec<Conv<'t>>,
    pub offset: Vec<Conv<'t>>,
    pub embed: Vec<Var<'t>>,
    pub w_attn: Conv<'t>,
    pub w_exp: Conv<'t>,
    pub out_norm: LayerNorm<'t>,
    pub bottleneck: Conv<'t>,
}

/// Upsamples by `factor` at positions displaced by
/// `OFFSET_BOUND * tanh(offset_proj(x))`.
pub fn dysample_up<'t>(x: &Var<'t>, offset_proj: &Conv<'t>, factor: usize) -> Result<Var<'t>> {
    let offsets = offset_proj.forward(x)?.tanh().scale(OFFSET_BOUND);
    x.offset_upsample(&offsets, factor)
}

/// Decoder intermediates, exposed for inspection.
pub struct CshfTrace<'t> {
    pub aligned: Vec<Var<'t>>,
    pub embedded: Vec<Var<'t>>,
    /// `[B, 4, H, W]`, softmax over the scale axis.
    pub attention: Var<'t>,
    pub harmonic: Var<'t>,
    pub logits: Var<'t>,
}

impl<'t> CshfParams<'t> {
    pub fn bind(bound: &Bound<'t>, prefix: &str, cfg: CshfConfig) -> Result<Self> {
        let pw = ConvSpec::pointwise();
        let p = |name: String| join(prefix, &name);
        Ok(CshfParams {
            cfg,
            proj: (0..LEVELS)
                .map(|i| Conv::bind(bound, &p(format!("proj{i}")), pw))
                .collect::<Result<_>>()?,
            offset: (0..LEVELS)
                .map(|i| Conv::bind(bound, &p(format!("offset{i}")), pw))
                .collect::<Result<_>>()?,
            embed: (0..LEVELS)
                .map(|i| bound.get(&p(format!("embed{i}"))))
                .collect::<Result<_>>()?,
            w_attn: Conv::bind(bound, &p("w_attn".into()), pw)?,
            w_exp: Conv::bind(bound, &p("w_exp".into()), pw)?,
            out_norm: LayerNorm::bind(bound, &p("out_norm".into()))?,
            bottleneck: Conv::bind(bound, &p("bottleneck".into()), pw)?,
        })
    }

    fn check(&self, features: &[Var<'t>], target: (usize, usize)) -> Result<()> {
        if features.len() != LEVELS {
            return Err(Error::Invalid(format!(
                "decoder needs {LEVELS} feature maps, got {}",
                features.len()
            )));
        }
        for (i, f) in features.iter().enumerate() {
            f.value().expect_rank("cshf", 4)?;
            let s = self.cfg.factors[i];
            let (h, w) = (f.shape()[2], f.shape()[3]);
            if f.shape()[1] != self.cfg.in_channels[i] {
                return Err(Error::shape(
                    "cshf",
                    format!(
                        "level {i} has {} channels, expected {}",
                        f.shape()[1],
                        self.cfg.in_channels[i]
                    ),
                ));
            }
            if (h * s, w * s) != target {
                return Err(Error::shape(
                    "cshf",
                    format!(
                        "level {i}: {h}x{w} upsampled by {s} is not the {}x{} target",
                        target.0, target.1
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn trace(&self, features: &[Var<'t>], target: (usize, usize)) -> Result<CshfTrace<'t>> {
        self.check(features, target)?;
        let d = self.cfg.dim;
        let mut aligned = Vec::with_capacity(LEVELS);
        let mut embedded = Vec::with_capacity(LEVELS);
        for (i, f) in features.iter().enumerate() {
            let up = dysample_up(
                &self.proj[i].forward(f)?,
                &self.offset[i],
                self.cfg.factors[i],
            )?;
            embedded.push(up.add(&self.embed[i].reshape(&[1, d, 1, 1])?)?);
            aligned.push(up);
        }
        let stacked = Var::concat(&embedded.iter().collect::<Vec<_>>(), 1)?;
        let attention = self.w_attn.forward(&stacked)?.softmax(1)?;
        let mut harmonic: Option<Var<'t>> = None;
        for (i, e) in embedded.iter().enumerate() {
            let term = attention.narrow(1, i, 1)?.mul(e)?;
            harmonic = Some(match harmonic {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let harmonic = harmonic.expect("four levels");
        let gated = self
            .w_exp
            .forward(&harmonic)?
            .mul(&Var::concat(&aligned.iter().collect::<Vec<_>>(), 1)?)?;
        let normed = self
            .out_norm
            .forward(&gated.permute(&[0, 2, 3, 1])?)?
            .permute(&[0, 3, 1, 2])?;
        let logits = self.bottleneck.forward(&normed)?;
        Ok(CshfTrace {
            aligned,
            embedded,
            attention,
            harmonic,
            logits,
        })
    }

    /// Raw logits `[B, 1, H', W']`.
    pub fn forward(&self, features: &[Var<'t>], target: (usize, usize)) -> Result<Var<'t>> {
        Ok(self.trace(features, target)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GradCheck, Tape};
    use crate::ops::bilinear_resize;
    use crate::ops::resample::source_coord;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use crate::verify::{check_params, projected_mean};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_store(cfg: &CshfConfig, seed: u64, scale: f64) -> ParamStore {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        for spec in cfg.specs("d") {
            store.insert(spec.name, Tensor::randn(&spec.shape, &mut r).scale(scale));
        }
        store
    }

    fn offset_conv<'t>(tape: &'t Tape, w: Tensor, b: Tensor) -> Conv<'t> {
        Conv {
            weight: tape.constant(w),
            bias: tape.constant(b),
            spec: ConvSpec::pointwise(),
        }
    }

    /// Bilinear sample of one plane at a real-valued coordinate, clamped to the border.
    fn sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |yy: usize, xx: usize| plane[yy * w + xx];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    }

    #[test]
    fn zero_offsets_reduce_to_bilinear() {
        let tape = Tape::no_grad();
        let x = Tensor::randn(&[2, 3, 4, 5], &mut rng(1));
        let conv = offset_conv(&tape, Tensor::zeros(&[8, 3, 1, 1]), Tensor::zeros(&[8]));
        let up = dysample_up(&tape.constant(x.clone()), &conv, 2).unwrap();
        assert!(
            up.value()
                .max_abs_diff(&bilinear_resize(&x, 8, 10).unwrap())
                < 1e-15
        );
    }

    #[test]
    fn constant_field_stays_constant() {
        let tape = Tape::no_grad();
        let x = Tensor::full(&[1, 2, 3, 3], 1.75);
        let conv = offset_conv(
            &tape,
            Tensor::randn(&[18, 2, 1, 1], &mut rng(2)),
            Tensor::randn(&[18], &mut rng(3)),
        );
        let up = dysample_up(&tape.constant(x), &conv, 3).unwrap();
        assert!(up.value().data().iter().all(|v| (v - 1.75).abs() < 1e-14));
    }

    #[test]
    fn matches_pointwise_sampling_oracle() {
        let tape = Tape::no_grad();
        let (c, h, w, s) = (2, 3, 3, 2);
        let x = Tensor::randn(&[1, c, h, w], &mut rng(4));
        let conv = offset_conv(
            &tape,
            Tensor::randn(&[8, 2, 1, 1], &mut rng(5)),
            Tensor::randn(&[8], &mut rng(6)),
        );
        let xv = tape.constant(x.clone());
        let offsets = conv
            .forward(&xv)
            .unwrap()
            .tanh()
            .scale(OFFSET_BOUND)
            .into_value();
        let up = dysample_up(&xv, &conv, s).unwrap().into_value();
        for ci in 0..c {
            let plane = &x.data()[ci * h * w..][..h * w];
            for oy in 0..h * s {
                for ox in 0..w * s {
                    let j = (oy % s) * s + ox % s;
                    let cell = (oy / s) * w + ox / s;
                    let dy = offsets.data()[(2 * j) * h * w + cell];
                    let dx = offsets.data()[(2 * j + 1) * h * w + cell];
                    assert!(dy.abs() <= OFFSET_BOUND && dx.abs() <= OFFSET_BOUND);
                    let want = sample(
                        plane,
                        h,
                        w,
                        source_coord(oy, h, h * s) + dy,
                        source_coord(ox, w, w * s) + dx,
                    );
                    let got = up.data()[(ci * h * s + oy) * w * s + ox];
                    assert!((got - want).abs() < 1e-14);
                }
            }
        }
    }

    fn features(cfg: &CshfConfig, b: usize, hw: usize, seed: u64) -> Vec<Tensor> {
        let mut r = rng(seed);
        cfg.in_channels
            .iter()
            .map(|&c| Tensor::randn(&[b, c, hw, hw], &mut r))
            .collect()
    }

    #[test]
    fn attention_normalized_and_harmonic_in_hull() {
        let cfg = CshfConfig::new([4, 6, 4, 5], 3, [2; 4]).unwrap();
        let store = random_store(&cfg, 7, 0.5);
        let tape = Tape::no_grad();
        let bound = Bound::frozen(&tape, &store);
        let p = CshfParams::bind(&bound, "d", cfg).unwrap();
        let feats: Vec<Var<'_>> = features(&cfg, 2, 3, 8)
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        let tr = p.trace(&feats, (6, 6)).unwrap();
        assert_eq!(tr.logits.shape(), &[2, 1, 6, 6]);
        let a = tr.attention.value();
        let plane = 36;
        for b in 0..2 {
            for px in 0..plane {
                let s: f64 = (0..4).map(|i| a.data()[(b * 4 + i) * plane + px]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let hv = tr.harmonic.value();
        for b in 0..2 {
            for ch in 0..3 {
                for px in 0..plane {
                    let at = |t: &Tensor| t.data()[(b * 3 + ch) * plane + px];
                    let vals: Vec<f64> = tr.embedded.iter().map(|e| at(e.value())).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert!(at(hv) >= lo - 1e-12 && at(hv) <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_levels_give_common_feature() {
        let cfg = CshfConfig::new([4; 4], 3, [2; 4]).unwrap();
        let mut store = random_store(&cfg, 9, 0.5);
        for i in 1..4 {
            for name in ["proj", "offset"] {
                for sfx in ["w", "b"] {
                    let t = store.get(&format!("d.{name}0.{sfx}")).unwrap().clone();
                    store.insert(format!("d.{name}{i}.{sfx}"), t);
                }
            }
        }
        for i in 0..4 {
            store.insert(format!("d.embed{i}"), Tensor::zeros(&[3]));
        }
        let tape = Tape::no_grad();
        let bound = Bound::frozen(&tape, &store);
        let p = CshfParams::bind(&bound, "d", cfg).unwrap();
        let f = tape.constant(Tensor::randn(&[1, 4, 3, 3], &mut rng(10)));
        let tr = p
            .trace(&[f.clone(), f.clone(), f.clone(), f], (6, 6))
            .unwrap();
        assert!(tr.harmonic.value().max_abs_diff(tr.embedded[0].value()) < 1e-14);
    }

    #[test]
    fn rejects_mismatched_level() {
        let cfg = CshfConfig::new([4; 4], 3, [2; 4]).unwrap();
        let store = random_store(&cfg, 11, 0.5);
        let tape = Tape::no_grad();
        let bound = Bound::frozen(&tape, &store);
        let p = CshfParams::bind(&bound, "d", cfg).unwrap();
        let mut feats: Vec<Var<'_>> = features(&cfg, 1, 3, 12)
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        feats[2] = tape.constant(Tensor::zeros(&[1, 4, 2, 3]));
        let err = p.forward(&feats, (6, 6)).err().unwrap().to_string();
        assert!(err.contains("level 2"), "{err}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = CshfConfig::new([4; 4], 4, [2; 4]).unwrap();
        let store = random_store(&cfg, 13, 0.3);
        let feats = features(&cfg, 1, 4, 14);
        let report = check_params(
            "cshf_forward",
            &store,
            &feats,
            |b, f| projected_mean(&CshfParams::bind(b, "d", cfg)?.forward(f, (8, 8))?, 15),
            &GradCheck::composite(),
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }
}
