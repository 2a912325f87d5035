//! Adaptive multi-scale cascaded modulator over `[B, C, H, W]` feature maps.
//!
//! Gated split, a cascade of two large-kernel units feeding a dilated
//! convolution, four multi-granular depthwise kernels, and attention over a
//! `G x G` grid of pooled tokens that modulates the multi-scale features
//! before a residual output projection.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Conv, WEIGHT_STD};
use crate::ops::activation::softplus_inv;
use crate::ops::conv::{ConvGroups, ConvSpec};
use crate::params::{join, Bound, Init, ParamSpec};

pub const MS_KERNELS: [usize; 4] = [5, 7, 9, 11];
pub const DILATION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AmcmConfig {
    pub channels: usize,
    pub grid: usize,
}

impl AmcmConfig {
    pub fn new(channels: usize, grid: usize) -> Result<Self> {
        if channels < 4 || !channels.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "amcm needs an even channel count of at least 4, got {channels}"
            )));
        }
        if grid == 0 {
            return Err(Error::Invalid("amcm grid size must be positive".into()));
        }
        Ok(AmcmConfig { channels, grid })
    }

    /// Widths of the three cascade slices; the remainder goes to the first.
    pub fn slice_widths(&self) -> [usize; 3] {
        let third = self.channels / 3;
        [self.channels - 2 * third, third, third]
    }

    pub fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let c = self.channels;
        let [_, c2, c3] = self.slice_widths();
        let p = |name: &str| join(prefix, name);
        let mut specs = Conv::specs(&p("gate_dw"), c / 2, c / 2, ConvSpec::depthwise(3));
        specs.extend(psi_specs(&p("psi7"), c3, 7));
        specs.extend(Conv::specs(&p("w_proj"), c2, c2, ConvSpec::pointwise()));
        specs.extend(psi_specs(&p("psi9"), c2 + c3, 9));
        specs.extend(Conv::specs(&p("r_dilated"), c, c, dilated()));
        for k in MS_KERNELS {
            specs.extend(Conv::specs(
                &p(&format!("ms{k}")),
                c,
                c,
                ConvSpec::depthwise(k),
            ));
        }
        let m = self.grid * self.grid;
        specs.push(ParamSpec::new(
            p("topology"),
            &[m, m],
            Init::TruncNormal(WEIGHT_STD),
        ));
        specs.extend(Conv::specs(
            &p("omega"),
            4 * c,
            4 * c,
            ConvSpec::pointwise(),
        ));
        specs.extend(Conv::specs(&p("beta"), 4 * c, 4 * c, ConvSpec::pointwise()));
        specs.push(ParamSpec::new(
            p("tau_raw"),
            &[1],
            Init::Const(softplus_inv(1.0)),
        ));
        specs.extend(Conv::specs(&p("w_out"), 4 * c, c, ConvSpec::pointwise()));
        specs
    }
}

fn dilated() -> ConvSpec {
    ConvSpec::same(3, DILATION, ConvGroups::Dense)
}

fn psi_specs(prefix: &str, c: usize, k: usize) -> Vec<ParamSpec> {
    let mut specs = Conv::specs(&join(prefix, "p1"), c, c, ConvSpec::pointwise());
    specs.extend(Conv::specs(
        &join(prefix, "dw"),
        c,
        c,
        ConvSpec::depthwise(k),
    ));
    specs.extend(Conv::specs(
        &join(prefix, "p2"),
        c,
        c,
        ConvSpec::pointwise(),
    ));
    specs
}

/// `W_p2(D_k(GELU(W_p1 h)) * W_p1 h)` with one shared `W_p1`.
pub struct Psi<'t> {
    pub p1: Conv<'t>,
    pub dw: Conv<'t>,
    pub p2: Conv<'t>,
}

impl<'t> Psi<'t> {
    fn bind(bound: &Bound<'t>, prefix: &str, k: usize) -> Result<Self> {
        Ok(Psi {
            p1: Conv::bind(bound, &join(prefix, "p1"), ConvSpec::pointwise())?,
            dw: Conv::bind(bound, &join(prefix, "dw"), ConvSpec::depthwise(k))?,
            p2: Conv::bind(bound, &join(prefix, "p2"), ConvSpec::pointwise())?,
        })
    }

    pub fn forward(&self, h: &Var<'t>) -> Result<Var<'t>> {
        let proj = self.p1.forward(h)?;
        let local = self.dw.forward(&proj.gelu())?;
        self.p2.forward(&local.mul(&proj)?)
    }
}

pub struct AmcmParams<'t> {
    pub cfg: AmcmConfig,
    pub gate_dw: Conv<'t>,
    pub psi7: Psi<'t>,
    pub w_proj: Conv<'t>,
    pub psi9: Psi<'t>,
    pub r_dilated: Conv<'t>,
    pub ms: Vec<Conv<'t>>,
    pub topology: Var<'t>,
    pub omega: Conv<'t>,
    pub beta: Conv<'t>,
    pub tau_raw: Var<'t>,
    pub w_out: Conv<'t>,
}

impl<'t> AmcmParams<'t> {
    pub fn bind(bound: &Bound<'t>, prefix: &str, cfg: AmcmConfig) -> Result<Self> {
        let p = |name: &str| join(prefix, name);
        let pw = ConvSpec::pointwise();
        Ok(AmcmParams {
            cfg,
            gate_dw: Conv::bind(bound, &p("gate_dw"), ConvSpec::depthwise(3))?,
            psi7: Psi::bind(bound, &p("psi7"), 7)?,
            w_proj: Conv::bind(bound, &p("w_proj"), pw)?,
            psi9: Psi::bind(bound, &p("psi9"), 9)?,
            r_dilated: Conv::bind(bound, &p("r_dilated"), dilated())?,
            ms: MS_KERNELS
                .iter()
                .map(|&k| Conv::bind(bound, &p(&format!("ms{k}")), ConvSpec::depthwise(k)))
                .collect::<Result<_>>()?,
            topology: bound.get(&p("topology"))?,
            omega: Conv::bind(bound, &p("omega"), pw)?,
            beta: Conv::bind(bound, &p("beta"), pw)?,
            tau_raw: bound.get(&p("tau_raw"))?,
            w_out: Conv::bind(bound, &p("w_out"), pw)?,
        })
    }

    fn check(&self, x: &Var<'t>) -> Result<()> {
        x.value().expect_rank("amcm", 4)?;
        if x.shape()[1] != self.cfg.channels {
            return Err(Error::shape(
                "amcm",
                format!(
                    "{} channels, module built for {}",
                    x.shape()[1],
                    self.cfg.channels
                ),
            ));
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h < self.cfg.grid || w < self.cfg.grid {
            return Err(Error::shape(
                "amcm",
                format!(
                    "{h}x{w} input is smaller than the {0}x{0} grid",
                    self.cfg.grid
                ),
            ));
        }
        Ok(())
    }

    /// `x * concat(x_1, D3(x_2))` over the two channel halves.
    pub fn gate_split(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let half = self.cfg.channels / 2;
        let first = x.narrow(1, 0, half)?;
        let second = self.gate_dw.forward(&x.narrow(1, half, half)?)?;
        x.mul(&Var::concat(&[&first, &second], 1)?)
    }

    /// `R_d(concat(q1, Psi9(concat(W_proj q2, Psi7(q3)))))`.
    pub fn cascade(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let [c1, c2, c3] = self.cfg.slice_widths();
        let q1 = x.narrow(1, 0, c1)?;
        let q2 = x.narrow(1, c1, c2)?;
        let q3 = x.narrow(1, c1 + c2, c3)?;
        let h1 = self.psi7.forward(&q3)?;
        let h2 = self
            .psi9
            .forward(&Var::concat(&[&self.w_proj.forward(&q2)?, &h1], 1)?)?;
        self.r_dilated.forward(&Var::concat(&[&q1, &h2], 1)?)
    }

    /// Concatenation of the four multi-granular depthwise responses, `4C` channels.
    pub fn multi_scale(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let parts = self
            .ms
            .iter()
            .map(|c| c.forward(x))
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&parts.iter().collect::<Vec<_>>(), 1)
    }

    /// Row-stochastic grid attention `softmax(mean_c(Omega) * S / tau)`,
    /// shape `[B, M, M]`, together with `Omega + beta` as `[B, M, 4C]`.
    pub fn grid_attention(&self, z: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let g = self.cfg.grid;
        let (b, c4) = (z.shape()[0], z.shape()[1]);
        let m = g * g;
        let pooled = z.adaptive_avg_pool(g)?;
        let omega = self
            .omega
            .forward(&pooled)?
            .reshape(&[b, c4, m])?
            .permute(&[0, 2, 1])?;
        let beta = self
            .beta
            .forward(&pooled)?
            .reshape(&[b, c4, m])?
            .permute(&[0, 2, 1])?;
        let row_scale = omega.mean_axis(2)?;
        let tau = self.tau_raw.softplus();
        let logits = row_scale.mul(&self.topology)?.div(&tau)?;
        Ok((logits.softmax(2)?, omega.add(&beta)?))
    }

    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        self.check(x)?;
        let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let g = self.cfg.grid;
        let c4 = 4 * self.cfg.channels;
        let cascaded = self.cascade(&self.gate_split(x)?)?;
        let z = self.multi_scale(&cascaded)?;
        let (attn, values) = self.grid_attention(&z)?;
        let a = attn
            .bmm(&values)?
            .permute(&[0, 2, 1])?
            .reshape(&[b, c4, g, g])?
            .bilinear_resize(h, w)?;
        x.add(&self.w_out.forward(&z.mul(&a.sigmoid())?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GradCheck, Tape};
    use crate::ops;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use crate::verify::{check_params, projected_mean};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Store with every tensor drawn from N(0, scale^2), so signals are not tiny.
    fn random_store(cfg: &AmcmConfig, seed: u64, scale: f64) -> ParamStore {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        for spec in cfg.specs("a") {
            store.insert(spec.name, Tensor::randn(&spec.shape, &mut r).scale(scale));
        }
        store
    }

    fn conv(store: &ParamStore, name: &str, x: &Tensor, spec: ConvSpec) -> Tensor {
        let w = store.get(&format!("a.{name}.w")).unwrap();
        let b = store.get(&format!("a.{name}.b")).unwrap();
        ops::conv2d(x, w, Some(b), &spec).unwrap()
    }

    fn psi_oracle(store: &ParamStore, name: &str, k: usize, h: &Tensor) -> Tensor {
        let pw = ConvSpec::pointwise();
        let proj = conv(store, &format!("{name}.p1"), h, pw);
        let local = conv(
            store,
            &format!("{name}.dw"),
            &ops::gelu(&proj),
            ConvSpec::depthwise(k),
        );
        let prod = local.zip_map(&proj, |a, b| a * b).unwrap();
        conv(store, &format!("{name}.p2"), &prod, pw)
    }

    #[test]
    fn slice_widths_sum_to_channels() {
        for c in (4..64).step_by(2) {
            let cfg = AmcmConfig::new(c, 2).unwrap();
            let [a, b, d] = cfg.slice_widths();
            assert_eq!(a + b + d, c);
            assert!(a >= b && b == d && a - b < 3);
        }
        assert!(AmcmConfig::new(9, 2).is_err());
    }

    #[test]
    fn gate_split_matches_elementwise_oracle() {
        let cfg = AmcmConfig::new(4, 2).unwrap();
        let store = random_store(&cfg, 1, 0.7);
        let x = Tensor::randn(&[1, 4, 3, 3], &mut rng(2));
        let tape = Tape::no_grad();
        let p = AmcmParams::bind(&Bound::frozen(&tape, &store), "a", cfg).unwrap();
        let got = p.gate_split(&tape.constant(x.clone())).unwrap();
        let d3 = conv(
            &store,
            "gate_dw",
            &x.narrow(1, 2, 2).unwrap(),
            ConvSpec::depthwise(3),
        );
        let gate = Tensor::concat(&[&x.narrow(1, 0, 2).unwrap(), &d3], 1).unwrap();
        let want = x.zip_map(&gate, |a, b| a * b).unwrap();
        assert!(got.value().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn gate_split_identity_kernel_squares_input() {
        let cfg = AmcmConfig::new(4, 2).unwrap();
        let mut store = random_store(&cfg, 3, 0.5);
        let mut id = Tensor::zeros(&[2, 1, 3, 3]);
        id.data_mut()[4] = 1.0;
        id.data_mut()[13] = 1.0;
        store.insert("a.gate_dw.w", id);
        store.insert("a.gate_dw.b", Tensor::zeros(&[2]));
        let x = Tensor::randn(&[2, 4, 5, 4], &mut rng(4));
        let tape = Tape::no_grad();
        let p = AmcmParams::bind(&Bound::frozen(&tape, &store), "a", cfg).unwrap();
        let got = p.gate_split(&tape.constant(x.clone())).unwrap();
        assert!(got.value().max_abs_diff(&x.map(|v| v * v)) < 1e-14);
    }

    #[test]
    fn cascade_matches_composition_oracle() {
        let cfg = AmcmConfig::new(12, 2).unwrap();
        let store = random_store(&cfg, 5, 0.3);
        let x = Tensor::randn(&[1, 12, 6, 5], &mut rng(6));
        let tape = Tape::no_grad();
        let p = AmcmParams::bind(&Bound::frozen(&tape, &store), "a", cfg).unwrap();
        let got = p.cascade(&tape.constant(x.clone())).unwrap();

        let h1 = psi_oracle(&store, "psi7", 7, &x.narrow(1, 8, 4).unwrap());
        let q2 = conv(
            &store,
            "w_proj",
            &x.narrow(1, 4, 4).unwrap(),
            ConvSpec::pointwise(),
        );
        let h2 = psi_oracle(&store, "psi9", 9, &Tensor::concat(&[&q2, &h1], 1).unwrap());
        let joined = Tensor::concat(&[&x.narrow(1, 0, 4).unwrap(), &h2], 1).unwrap();
        let want = conv(&store, "r_dilated", &joined, dilated());
        assert!(got.value().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn psi_with_zero_output_projection_is_zero() {
        let cfg = AmcmConfig::new(8, 2).unwrap();
        let mut store = random_store(&cfg, 7, 0.5);
        store.insert("a.psi7.p2.w", Tensor::zeros(&[2, 2, 1, 1]));
        store.insert("a.psi7.p2.b", Tensor::zeros(&[2]));
        let tape = Tape::no_grad();
        let p = AmcmParams::bind(&Bound::frozen(&tape, &store), "a", cfg).unwrap();
        let h = tape.constant(Tensor::randn(&[1, 2, 4, 4], &mut rng(8)));
        assert_eq!(p.psi7.forward(&h).unwrap().value().max_abs(), 0.0);
    }

    #[test]
    fn zero_output_projection_gives_identity() {
        let cfg = AmcmConfig::new(8, 4).unwrap();
        let mut store = random_store(&cfg, 9, 0.5);
        store.insert("a.w_out.w", Tensor::zeros(&[8, 32, 1, 1]));
        store.insert("a.w_out.b", Tensor::zeros(&[8]));
        let x = Tensor::randn(&[2, 8, 9, 7], &mut rng(10));
        let tape = Tape::no_grad();
        let p = AmcmParams::bind(&Bound::frozen(&tape, &store), "a", cfg).unwrap();
        assert_eq!(
            p.forward(&tape.constant(x.clone())).unwrap().into_value(),
            x
        );
    }

    #[test]
    fn shape_is_preserved_and_rows_are_stochastic() {
        for (c, h, w) in [(8, 16, 16), (12, 24, 32)] {
            let cfg = AmcmConfig::new(c, 8).unwrap();
            let store = random_store(&cfg, c as u64, 0.3);
            let tape = Tape::no_grad();
            let p = AmcmParams::bind(&Bound::frozen(&tape, &store), "a", cfg).unwrap();
            let x = tape.constant(Tensor::randn(&[1, c, h, w], &mut rng(11)));
            assert_eq!(p.forward(&x).unwrap().shape(), &[1, c, h, w]);
            let z = p.multi_scale(&x).unwrap();
            let (attn, _) = p.grid_attention(&z).unwrap();
            for row in attn.value().data().chunks(64) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_input_smaller_than_grid() {
        let cfg = AmcmConfig::new(8, 8).unwrap();
        let store = ParamStore::init(&cfg.specs("a"), &mut rng(0)).unwrap();
        let tape = Tape::no_grad();
        let p = AmcmParams::bind(&Bound::frozen(&tape, &store), "a", cfg).unwrap();
        assert!(p
            .forward(&tape.constant(Tensor::zeros(&[1, 8, 4, 16])))
            .is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = AmcmConfig::new(8, 2).unwrap();
        let store = random_store(&cfg, 12, 0.2);
        let x = Tensor::randn(&[1, 8, 8, 8], &mut rng(13));
        let report = check_params(
            "amcm_forward",
            &store,
            &[x],
            |bound, x| {
                let p = AmcmParams::bind(bound, "a", cfg)?;
                projected_mean(&p.forward(&x[0])?, 14)
            },
            &GradCheck::default(),
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }
}
