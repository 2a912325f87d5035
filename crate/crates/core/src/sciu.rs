//! Structure-calibrated insight unit: spatial mix with shifted-token
//! interpolation and Dy-WKV aggregation, an AMCM pass on the image view, and
//! a gated squared-ReLU channel mix. Both mixes are pre-normalized residuals.

use crate::amcm::{AmcmConfig, AmcmParams};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::gbst::GbstSpec;
use crate::layers::{LayerNorm, Linear};
use crate::params::{join, Bound, Init, ParamSpec};
use crate::wkv::{dscd, dywkv, DecayMode, DecayParams, WkvKernel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SciuConfig {
    pub gbst: GbstSpec,
    pub grid: usize,
    pub mlp_ratio: usize,
    pub decay_mode: DecayMode,
}

impl SciuConfig {
    pub fn new(
        gbst: GbstSpec,
        grid: usize,
        mlp_ratio: usize,
        decay_mode: DecayMode,
    ) -> Result<Self> {
        if mlp_ratio == 0 {
            return Err(Error::Invalid(
                "channel-mix ratio must be at least 1".into(),
            ));
        }
        AmcmConfig::new(gbst.channels, grid)?;
        Ok(SciuConfig {
            gbst,
            grid,
            mlp_ratio,
            decay_mode,
        })
    }

    pub fn channels(&self) -> usize {
        self.gbst.channels
    }

    pub fn amcm(&self) -> AmcmConfig {
        AmcmConfig {
            channels: self.channels(),
            grid: self.grid,
        }
    }

    pub fn kernel(&self) -> WkvKernel {
        match self.decay_mode {
            DecayMode::Instance => WkvKernel::Scan,
            DecayMode::PerToken => WkvKernel::Naive,
        }
    }

    pub fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let c = self.channels();
        let hidden = self.mlp_ratio * c;
        let p = |name: &str| join(prefix, name);
        let mut specs = LayerNorm::specs(&p("ln1"), c);
        specs.push(ParamSpec::new(p("mu_c"), &[c], Init::Zeros));
        specs.extend(Linear::specs(&p("w_r"), c, c));
        specs.extend(Linear::specs(&p("w_k"), c, c));
        specs.extend(Linear::specs(&p("w_v"), c, c));
        specs.extend(DecayParams::specs(&p("decay"), c));
        specs.extend(self.amcm().specs(&p("amcm")));
        specs.extend(LayerNorm::specs(&p("ln2"), c));
        specs.extend(Linear::specs(&p("w_ctx"), c, c));
        specs.push(ParamSpec::new(p("mu_k"), &[c], Init::Zeros));
        specs.push(ParamSpec::new(p("mu_r"), &[c], Init::Zeros));
        specs.extend(Linear::specs(&p("cm_r"), c, c));
        specs.extend(Linear::specs(&p("cm_k"), c, hidden));
        specs.extend(Linear::specs(&p("cm_v"), hidden, c));
        specs
    }
}

pub struct SciuParams<'t> {
    pub cfg: SciuConfig,
    pub ln1: LayerNorm<'t>,
    pub mu_c: Var<'t>,
    pub w_r: Linear<'t>,
    pub w_k: Linear<'t>,
    pub w_v: Linear<'t>,
    pub decay: DecayParams<'t>,
    pub amcm: AmcmParams<'t>,
    pub ln2: LayerNorm<'t>,
    pub w_ctx: Linear<'t>,
    pub mu_k: Var<'t>,
    pub mu_r: Var<'t>,
    pub cm_r: Linear<'t>,
    pub cm_k: Linear<'t>,
    pub cm_v: Linear<'t>,
}

/// `gate * x + (1 - gate) * shifted`.
fn interpolate<'t>(gate: &Var<'t>, x: &Var<'t>, shifted: &Var<'t>) -> Result<Var<'t>> {
    shifted.add(&gate.mul(&x.sub(shifted)?)?)
}

impl<'t> SciuParams<'t> {
    pub fn bind(bound: &Bound<'t>, prefix: &str, cfg: SciuConfig) -> Result<Self> {
        let p = |name: &str| join(prefix, name);
        Ok(SciuParams {
            cfg,
            ln1: LayerNorm::bind(bound, &p("ln1"))?,
            mu_c: bound.get(&p("mu_c"))?,
            w_r: Linear::bind(bound, &p("w_r"))?,
            w_k: Linear::bind(bound, &p("w_k"))?,
            w_v: Linear::bind(bound, &p("w_v"))?,
            decay: DecayParams::bind(bound, &p("decay"))?,
            amcm: AmcmParams::bind(bound, &p("amcm"), cfg.amcm())?,
            ln2: LayerNorm::bind(bound, &p("ln2"))?,
            w_ctx: Linear::bind(bound, &p("w_ctx"))?,
            mu_k: bound.get(&p("mu_k"))?,
            mu_r: bound.get(&p("mu_r"))?,
            cm_r: Linear::bind(bound, &p("cm_r"))?,
            cm_k: Linear::bind(bound, &p("cm_k"))?,
            cm_v: Linear::bind(bound, &p("cm_v"))?,
        })
    }

    /// `sigmoid(r) * wkv(k, v)` without the residual.
    pub fn spatial_branch(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let shifted = x.gbst(&self.cfg.gbst)?;
        let mixed = interpolate(&self.mu_c.sigmoid(), x, &shifted)?;
        let r = self.w_r.forward(&mixed)?;
        let k = self.w_k.forward(&mixed)?;
        let v = self.w_v.forward(&mixed)?;
        let w = dscd(x, &self.decay, self.cfg.decay_mode)?;
        let wkv = dywkv(&k, &v, &w, &self.decay.u, self.cfg.kernel())?;
        r.sigmoid().mul(&wkv)
    }

    /// Spatial mix with its residual, `sigmoid(r) * wkv + x`.
    pub fn spatial_mix(&self, x: &Var<'t>) -> Result<Var<'t>> {
        self.spatial_branch(x)?.add(x)
    }

    /// `sigmoid(W_r x'_r) * W_v relu(W_k x'_k)^2` without the residual.
    pub fn channel_branch(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let shifted = x.gbst(&self.cfg.gbst)?;
        let dynamic = self.w_ctx.forward(x)?.sigmoid();
        let omega_k = self.mu_k.sigmoid().mul(&dynamic)?;
        let omega_r = self.mu_r.sigmoid().mul(&dynamic)?;
        let xk = interpolate(&omega_k, x, &shifted)?;
        let xr = interpolate(&omega_r, x, &shifted)?;
        let value = self.cm_v.forward(&self.cm_k.forward(&xk)?.squared_relu())?;
        self.cm_r.forward(&xr)?.sigmoid().mul(&value)
    }

    /// Channel mix with its residual.
    pub fn channel_mix(&self, x: &Var<'t>) -> Result<Var<'t>> {
        self.channel_branch(x)?.add(x)
    }

    /// Full block on `[B, N, C]` tokens.
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let (h, w) = (self.cfg.gbst.height, self.cfg.gbst.width);
        let x1 = x.add(&self.spatial_branch(&self.ln1.forward(x)?)?)?;
        let x1 = self
            .amcm
            .forward(&x1.tokens_to_image(h, w)?)?
            .image_to_tokens()?;
        x1.add(&self.channel_branch(&self.ln2.forward(&x1)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GradCheck, Tape};
    use crate::gbst::gbst;
    use crate::ops::{self, sigmoid};
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use crate::verify::{check_params, projected_mean};
    use crate::wkv::dywkv_naive;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn config(h: usize, w: usize, c: usize, mode: DecayMode) -> SciuConfig {
        SciuConfig::new(GbstSpec::new(1, h, w, c).unwrap(), 2, 2, mode).unwrap()
    }

    fn random_store(cfg: &SciuConfig, seed: u64, scale: f64) -> ParamStore {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        for spec in cfg.specs("s") {
            store.insert(spec.name, Tensor::randn(&spec.shape, &mut r).scale(scale));
        }
        store
    }

    fn zero(store: &mut ParamStore, linear: &str) {
        for suffix in ["w", "b"] {
            let name = format!("s.{linear}.{suffix}");
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.insert(name, Tensor::zeros(&shape));
        }
    }

    fn lin(store: &ParamStore, name: &str, x: &Tensor) -> Tensor {
        let w = store.get(&format!("s.{name}.w")).unwrap();
        let b = store.get(&format!("s.{name}.b")).unwrap();
        ops::linear(x, w, Some(b)).unwrap()
    }

    fn mul(a: &Tensor, b: &Tensor) -> Tensor {
        ops::broadcast::binary(a, b, |x, y| x * y).unwrap()
    }

    fn interp(gate: &Tensor, x: &Tensor, shifted: &Tensor) -> Tensor {
        let g = ops::broadcast::binary(gate, x, |g, _| g).unwrap();
        let gx = mul(&g, x);
        let rest = mul(&g.map(|v| 1.0 - v), shifted);
        gx.zip_map(&rest, |a, b| a + b).unwrap()
    }

    /// Spatial mix rebuilt from tensor-level primitives.
    fn spatial_oracle(store: &ParamStore, cfg: &SciuConfig, x: &Tensor) -> Tensor {
        let c = cfg.channels();
        let mixed = interp(
            &sigmoid(store.get("s.mu_c").unwrap()),
            x,
            &gbst(x, &cfg.gbst).unwrap(),
        );
        let (r, k, v) = (
            lin(store, "w_r", &mixed),
            lin(store, "w_k", &mixed),
            lin(store, "w_v", &mixed),
        );
        let b = x.dim(0);
        let mean = Tensor::from_fn(&[b, c], |i| {
            let (bi, ci) = (i / c, i % c);
            (0..x.dim(1))
                .map(|t| x.data()[(bi * x.dim(1) + t) * c + ci])
                .sum::<f64>()
                / x.dim(1) as f64
        });
        let gate =
            lin(store, "decay.decay", &mean).map(|z| (-ops::activation::sigmoid_scalar(z)).exp());
        let base = ops::softplus(store.get("s.decay.w_base_raw").unwrap());
        let w = mul(&gate, &base);
        let wkv = dywkv_naive(&k, &v, &w, store.get("s.decay.u").unwrap()).unwrap();
        mul(&sigmoid(&r), &wkv).zip_map(x, |a, b| a + b).unwrap()
    }

    fn with<T>(
        store: &ParamStore,
        cfg: SciuConfig,
        f: impl for<'t> FnOnce(&'t Tape, SciuParams<'t>) -> T,
    ) -> T {
        let tape = Tape::no_grad();
        let bound = Bound::frozen(&tape, store);
        f(&tape, SciuParams::bind(&bound, "s", cfg).unwrap())
    }

    fn rename_decay(store: &mut ParamStore) {
        // the oracle addresses the decay projection as a linear layer
        let w = store.get("s.decay.decay_w").unwrap().clone();
        let b = store.get("s.decay.decay_b").unwrap().clone();
        store.insert("s.decay.decay.w", w);
        store.insert("s.decay.decay.b", b);
    }

    #[test]
    fn spatial_mix_matches_composition_oracle() {
        let cfg = config(2, 2, 8, DecayMode::Instance);
        let mut store = random_store(&cfg, 1, 0.5);
        let x = Tensor::randn(&[2, 4, 8], &mut rng(2));
        let got = with(&store, cfg, |tape, p| {
            p.spatial_mix(&tape.constant(x.clone()))
                .unwrap()
                .into_value()
        });
        rename_decay(&mut store);
        let want = spatial_oracle(&store, &cfg, &x);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn saturated_gate_bypasses_shift() {
        let cfg = config(3, 3, 8, DecayMode::Instance);
        let mut store = random_store(&cfg, 3, 0.5);
        store.insert("s.mu_c", Tensor::full(&[8], 1e3));
        let x = Tensor::randn(&[1, 9, 8], &mut rng(4));
        let shifted = with(&store, cfg, |tape, p| {
            p.spatial_mix(&tape.constant(x.clone()))
                .unwrap()
                .into_value()
        });
        let cfg0 = SciuConfig {
            gbst: GbstSpec::new(0, 3, 3, 8).unwrap(),
            ..cfg
        };
        let unshifted = with(&store, cfg0, |tape, p| {
            p.spatial_mix(&tape.constant(x.clone()))
                .unwrap()
                .into_value()
        });
        assert!(shifted.max_abs_diff(&unshifted) < 1e-12);
    }

    #[test]
    fn zero_receptance_halves_wkv() {
        let cfg = config(2, 3, 8, DecayMode::Instance);
        let mut store = random_store(&cfg, 5, 0.5);
        zero(&mut store, "w_r");
        let x = Tensor::randn(&[1, 6, 8], &mut rng(6));
        let (y, wkv) = with(&store, cfg, |tape, p| {
            let xv = tape.constant(x.clone());
            let y = p.spatial_mix(&xv).unwrap().into_value();
            let shifted = xv.gbst(&cfg.gbst).unwrap();
            let mixed = interpolate(&p.mu_c.sigmoid(), &xv, &shifted).unwrap();
            let w = dscd(&xv, &p.decay, cfg.decay_mode).unwrap();
            let (k, v) = (
                p.w_k.forward(&mixed).unwrap(),
                p.w_v.forward(&mixed).unwrap(),
            );
            (
                y,
                dywkv(&k, &v, &w, &p.decay.u, WkvKernel::Naive)
                    .unwrap()
                    .into_value(),
            )
        });
        let want = wkv.scale(0.5).zip_map(&x, |a, b| a + b).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn spatial_change_bounded_by_values() {
        let cfg = config(3, 4, 8, DecayMode::Instance);
        let store = random_store(&cfg, 7, 0.8);
        let x = Tensor::randn(&[1, 12, 8], &mut rng(8));
        with(&store, cfg, |tape, p| {
            let xv = tape.constant(x.clone());
            let y = p.spatial_mix(&xv).unwrap();
            let shifted = xv.gbst(&cfg.gbst).unwrap();
            let mixed = interpolate(&p.mu_c.sigmoid(), &xv, &shifted).unwrap();
            let v = p.w_v.forward(&mixed).unwrap();
            for c in 0..8 {
                let vmax = v
                    .value()
                    .data()
                    .iter()
                    .skip(c)
                    .step_by(8)
                    .fold(0.0f64, |m, a| m.max(a.abs()));
                for t in 0..12 {
                    let i = t * 8 + c;
                    assert!((y.value().data()[i] - x.data()[i]).abs() <= vmax + 1e-12);
                }
            }
        });
    }

    #[test]
    fn channel_mix_residual_identities() {
        let cfg = config(3, 3, 8, DecayMode::Instance);
        let mut store = random_store(&cfg, 9, 0.5);
        zero(&mut store, "cm_v");
        let x = Tensor::randn(&[2, 9, 8], &mut rng(10));
        let y = with(&store, cfg, |tape, p| {
            p.channel_mix(&tape.constant(x.clone()))
                .unwrap()
                .into_value()
        });
        assert_eq!(y, x);

        let mut store = random_store(&cfg, 11, 0.5);
        for name in ["cm_r", "cm_k", "cm_v", "w_ctx"] {
            let b = format!("s.{name}.b");
            let shape = store.get(&b).unwrap().shape().to_vec();
            store.insert(b, Tensor::zeros(&shape));
        }
        let zero_in = Tensor::zeros(&[1, 9, 8]);
        let y = with(&store, cfg, |tape, p| {
            p.channel_mix(&tape.constant(zero_in.clone()))
                .unwrap()
                .into_value()
        });
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn zeroed_output_projections_give_identity_block() {
        for mode in [DecayMode::Instance, DecayMode::PerToken] {
            let cfg = config(4, 4, 8, mode);
            let mut store = random_store(&cfg, 12, 0.5);
            zero(&mut store, "w_v");
            zero(&mut store, "cm_v");
            zero(&mut store, "amcm.w_out");
            let x = Tensor::randn(&[1, 16, 8], &mut rng(13));
            let y = with(&store, cfg, |tape, p| {
                p.forward(&tape.constant(x.clone())).unwrap().into_value()
            });
            assert_eq!(y, x);
        }
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let cfg = config(4, 5, 12, DecayMode::Instance);
        let store = random_store(&cfg, 14, 0.3);
        let x = Tensor::randn(&[2, 20, 12], &mut rng(15));
        let a = with(&store, cfg, |tape, p| {
            p.forward(&tape.constant(x.clone())).unwrap().into_value()
        });
        let b = with(&store, cfg, |tape, p| {
            p.forward(&tape.constant(x.clone())).unwrap().into_value()
        });
        assert_eq!(a.shape(), x.shape());
        assert!(a.all_finite());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = config(4, 4, 8, DecayMode::Instance);
        let store = random_store(&cfg, 16, 0.25);
        let x = Tensor::randn(&[1, 16, 8], &mut rng(17));
        let gc = GradCheck::composite();
        let spatial = check_params(
            "spatial_mix",
            &store,
            std::slice::from_ref(&x),
            |b, v| projected_mean(&SciuParams::bind(b, "s", cfg)?.spatial_mix(&v[0])?, 1),
            &gc,
        )
        .unwrap();
        assert!(spatial.passed, "{spatial}");
        let channel = check_params(
            "channel_mix",
            &store,
            std::slice::from_ref(&x),
            |b, v| projected_mean(&SciuParams::bind(b, "s", cfg)?.channel_mix(&v[0])?, 2),
            &gc,
        )
        .unwrap();
        assert!(channel.passed, "{channel}");
        let block = check_params(
            "sciu_forward",
            &store,
            std::slice::from_ref(&x),
            |b, v| projected_mean(&SciuParams::bind(b, "s", cfg)?.forward(&v[0])?, 3),
            &gc,
        )
        .unwrap();
        assert!(block.passed, "{block}");
    }
}
