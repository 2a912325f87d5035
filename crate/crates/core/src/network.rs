//! Full segmentation network: patch embedding with a learned positional
//! table, a standalone AMCM, a flat stack of SCIU blocks with four feature
//! taps, and the CSHF decoder producing full-resolution logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amcm::{AmcmConfig, AmcmParams, MS_KERNELS};
use crate::autodiff::{Tape, Var};
use crate::cshf::{CshfConfig, CshfParams, LEVELS};
use crate::error::{Error, Result};
use crate::gbst::GbstSpec;
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamSpec, ParamStore};
use crate::sciu::{SciuConfig, SciuParams};
use crate::tensor::Tensor;
use crate::wkv::DecayMode;

pub const PATCH_SIZES: [usize; 4] = [4, 8, 16, 32];
pub const LAYER_COUNTS: [usize; 4] = [2, 4, 8, 16];
pub const IN_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub sciu_layers: usize,
    pub shift: usize,
    pub grid: usize,
    pub decoder_dim: usize,
    pub mlp_ratio: usize,
    pub decay_mode: DecayMode,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 4,
            embed_dim: 64,
            sciu_layers: 4,
            shift: 1,
            grid: 8,
            decoder_dim: 32,
            mlp_ratio: 2,
            decay_mode: DecayMode::Instance,
            height: 512,
            width: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !PATCH_SIZES.contains(&self.patch_size) {
            return bad(format!(
                "patch_size {} not in {PATCH_SIZES:?}",
                self.patch_size
            ));
        }
        if !LAYER_COUNTS.contains(&self.sciu_layers) {
            return bad(format!(
                "sciu_layers {} not in {LAYER_COUNTS:?}",
                self.sciu_layers
            ));
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(self.patch_size)
            || !self.width.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "resolution {}x{} is not divisible by patch_size {}",
                self.height, self.width, self.patch_size
            ));
        }
        if self.embed_dim < 8 || !self.embed_dim.is_multiple_of(2) {
            return bad(format!(
                "embed_dim {} must be even and at least 8",
                self.embed_dim
            ));
        }
        let (gh, gw) = self.token_grid();
        if self.grid == 0 || self.grid > gh.min(gw) {
            return bad(format!(
                "grid {} must be in 1..={} for a {gh}x{gw} token grid",
                self.grid,
                gh.min(gw)
            ));
        }
        if self.shift >= gh.min(gw) {
            return bad(format!(
                "shift {} must be smaller than the {gh}x{gw} token grid",
                self.shift
            ));
        }
        if self.decoder_dim == 0 || self.mlp_ratio == 0 {
            return bad("decoder_dim and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn token_grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }

    /// Zero-based indices of the blocks whose outputs feed the decoder:
    /// block `ceil(i N / 4)` (one-based) for `i = 1..=4`.
    pub fn tap_indices(&self) -> [usize; LEVELS] {
        std::array::from_fn(|i| ((i + 1) * self.sciu_layers).div_ceil(LEVELS) - 1)
    }

    pub fn gbst(&self) -> Result<GbstSpec> {
        let (h, w) = self.token_grid();
        GbstSpec::new(self.shift, h, w, self.embed_dim)
    }

    pub fn amcm(&self) -> Result<AmcmConfig> {
        AmcmConfig::new(self.embed_dim, self.grid)
    }

    pub fn sciu(&self) -> Result<SciuConfig> {
        SciuConfig::new(self.gbst()?, self.grid, self.mlp_ratio, self.decay_mode)
    }

    pub fn cshf(&self) -> Result<CshfConfig> {
        CshfConfig::new(
            [self.embed_dim; LEVELS],
            self.decoder_dim,
            [self.patch_size; LEVELS],
        )
    }

    fn patch_features(&self) -> usize {
        IN_CHANNELS * self.patch_size * self.patch_size
    }

    /// Every parameter of the model, in checkpoint order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let c = self.embed_dim;
        let mut specs = Linear::specs("embed", self.patch_features(), c);
        specs.push(ParamSpec::new("pos", &[self.tokens(), c], Init::Zeros));
        specs.extend(self.amcm()?.specs("amcm"));
        let sciu = self.sciu()?;
        for i in 0..self.sciu_layers {
            specs.extend(sciu.specs(&format!("blocks.{i}")));
        }
        specs.extend(self.cshf()?.specs("decoder"));
        Ok(specs)
    }

    /// Seeded initialization; the same seed gives bitwise-identical weights.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        ParamStore::init(&self.param_specs()?, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Checks that `store` holds exactly this model's parameters.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let specs = self.param_specs()?;
        for spec in &specs {
            let t = store.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Weights(format!(
                    "tensor {} has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        let known: std::collections::HashSet<&str> =
            specs.iter().map(|s| s.name.as_str()).collect();
        let unknown: Vec<&str> = store
            .iter()
            .map(|(n, _)| n)
            .filter(|n| !known.contains(n))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Weights(format!(
                "unknown tensors: {}",
                unknown.join(", ")
            )));
        }
        Ok(())
    }

    /// Parameter totals per top-level module (the positional table counts
    /// under `embed`), then the overall total.
    pub fn count_params(&self) -> Result<ParamCount> {
        let mut modules: Vec<(String, usize)> = Vec::new();
        for spec in self.param_specs()? {
            let module = match spec.name.split('.').collect::<Vec<_>>().as_slice() {
                ["blocks", i, ..] => format!("blocks.{i}"),
                ["pos"] => "embed".to_string(),
                [first, ..] => first.to_string(),
                [] => unreachable!(),
            };
            match modules.iter_mut().find(|(m, _)| *m == module) {
                Some((_, n)) => *n += spec.numel(),
                None => modules.push((module, spec.numel())),
            }
        }
        let total = modules.iter().map(|(_, n)| n).sum();
        Ok(ParamCount { modules, total })
    }

    /// Analytic floating-point operation count for one image, itemized.
    pub fn count_flops(&self) -> Result<FlopCount> {
        self.validate()?;
        let (gh, gw) = self.token_grid();
        let n = (gh * gw) as u64;
        let c = self.embed_dim as u64;
        let full = (self.height * self.width) as u64;
        let d = self.decoder_dim as u64;
        let s2 = (self.patch_size * self.patch_size) as u64;
        let mut items = Vec::new();
        items.push((
            "embed".to_string(),
            2 * n * self.patch_features() as u64 * c,
        ));
        let amcm = amcm_macs(self.amcm()?, n) * 2;
        items.push(("amcm".to_string(), amcm));
        let hidden = self.mlp_ratio as u64 * c;
        // spatial r/k/v + decay projection, channel context/r/k/v
        let spatial = 2 * n * (4 * c * c) + wkv_flops(n, c);
        let channel = 2 * n * (2 * c * c + 2 * c * hidden);
        for i in 0..self.sciu_layers {
            items.push((format!("blocks.{i}"), spatial + amcm + channel));
        }
        // per level: projection and offsets at token resolution; attention,
        // expansion and head at full resolution
        let decoder =
            2 * (LEVELS as u64 * n * (c * d + d * 2 * s2) + full * (4 * d * 4 + d * 4 * d + 4 * d));
        items.push(("decoder".to_string(), decoder));
        let total = items.iter().map(|(_, f)| f).sum();
        Ok(FlopCount { items, total })
    }
}

/// Multiply-accumulates of one AMCM application over `n` positions.
fn amcm_macs(cfg: AmcmConfig, n: u64) -> u64 {
    let c = cfg.channels as u64;
    let [_, c2, c3] = cfg.slice_widths().map(|v| v as u64);
    let psi = |w: u64, k: u64| n * (2 * w * w + w * k * k);
    let m = (cfg.grid * cfg.grid) as u64;
    let gate = n * (c / 2) * 9;
    let cascade = psi(c3, 7) + n * c2 * c2 + psi(c2 + c3, 9) + n * c * c * 9;
    let ms: u64 = MS_KERNELS.iter().map(|&k| n * c * (k * k) as u64).sum();
    let grid = 2 * m * (4 * c) * (4 * c) + m * m * 4 * c;
    let out = n * 4 * c * c;
    gate + cascade + ms + grid + out
}

/// Instance-mode scan: two directional recurrences plus the merge, about
/// ten floating-point operations per token and channel.
fn wkv_flops(n: u64, c: u64) -> u64 {
    10 * n * c
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopCount {
    pub items: Vec<(String, u64)>,
    pub total: u64,
}

/// The model's parameters bound to a tape.
pub struct Network<'t> {
    pub cfg: ModelConfig,
    pub embed: Linear<'t>,
    pub pos: Var<'t>,
    pub amcm: AmcmParams<'t>,
    pub blocks: Vec<SciuParams<'t>>,
    pub decoder: CshfParams<'t>,
}

impl<'t> Network<'t> {
    pub fn bind(bound: &Bound<'t>, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let sciu = cfg.sciu()?;
        Ok(Network {
            cfg,
            embed: Linear::bind(bound, "embed")?,
            pos: bound.get("pos")?,
            amcm: AmcmParams::bind(bound, "amcm", cfg.amcm()?)?,
            blocks: (0..cfg.sciu_layers)
                .map(|i| SciuParams::bind(bound, &format!("blocks.{i}"), sciu))
                .collect::<Result<_>>()?,
            decoder: CshfParams::bind(bound, "decoder", cfg.cshf()?)?,
        })
    }

    /// `[B, 3, H, W]` image to `[B, N_tok, C]` tokens.
    pub fn patch_embed(&self, img: &Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        img.value().expect_rank("patch_embed", 4)?;
        let (b, ch, h, w) = (
            img.shape()[0],
            img.shape()[1],
            img.shape()[2],
            img.shape()[3],
        );
        if ch != IN_CHANNELS || (h, w) != (cfg.height, cfg.width) {
            return Err(Error::shape(
                "patch_embed",
                format!(
                    "expected [B, {IN_CHANNELS}, {}, {}], got {:?}",
                    cfg.height,
                    cfg.width,
                    img.shape()
                ),
            ));
        }
        let p = cfg.patch_size;
        let (gh, gw) = cfg.token_grid();
        let patches = img
            .reshape(&[b, ch, gh, p, gw, p])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b, gh * gw, ch * p * p])?;
        self.embed.forward(&patches)?.add(&self.pos)
    }

    /// Backbone features at the four taps, as `[B, C, H/P, W/P]` maps.
    pub fn features(&self, img: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let (gh, gw) = self.cfg.token_grid();
        let tokens = self.patch_embed(img)?;
        let mut x = self
            .amcm
            .forward(&tokens.tokens_to_image(gh, gw)?)?
            .image_to_tokens()?;
        let taps = self.cfg.tap_indices();
        let mut out = Vec::with_capacity(LEVELS);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            let view = x.tokens_to_image(gh, gw)?;
            for _ in taps.iter().filter(|&&t| t == i) {
                out.push(view.clone());
            }
        }
        Ok(out)
    }

    /// Logits `[B, 1, H, W]`.
    pub fn forward(&self, img: &Var<'t>) -> Result<Var<'t>> {
        let feats = self.features(img)?;
        self.decoder
            .forward(&feats, (self.cfg.height, self.cfg.width))
    }
}

/// Crack probabilities `[B, 1, H, W]` for a batch of images, no gradients.
pub fn predict(cfg: &ModelConfig, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
    cfg.check_store(store)?;
    let tape = Tape::no_grad();
    let bound = Bound::frozen(&tape, store);
    let net = Network::bind(&bound, *cfg)?;
    Ok(net
        .forward(&tape.constant(images.clone()))?
        .sigmoid()
        .into_value())
}
