//! Gradient verification helpers and the finite-difference suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::amcm::{AmcmConfig, AmcmParams};
use crate::autodiff::{finite_diff_check, GradCheck, GradCheckReport, Var};
use crate::cshf::{CshfConfig, CshfParams};
use crate::error::{Error, Result};
use crate::gbst::GbstSpec;
use crate::network::{ModelConfig, Network};
use crate::ops::{ConvGroups, ConvSpec};
use crate::params::{Bound, ParamSpec, ParamStore};
use crate::sciu::{SciuConfig, SciuParams};
use crate::tensor::Tensor;
use crate::train::{hybrid_loss, LossConfig};
use crate::wkv::{
    dscd, dywkv, dywkv_naive, dywkv_scan, relative_error, DecayMode, DecayParams, WkvKernel,
};

/// `mean(out * R)` with `R` a fixed standard-normal tensor drawn from `seed`,
/// so every output element contributes a distinct gradient. The mean keeps
/// the loss small, which keeps central-difference roundoff below the
/// relative-error floor for coordinates whose true gradient is zero.
pub fn projected_mean<'t>(out: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let r = Tensor::randn(out.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out.mul(&out.tape().constant(r))?.mean())
}

/// Finite-difference check of `f` with respect to `inputs` and every
/// parameter in `store`. `f` receives the parameters bound to the tape.
pub fn check_params<F>(
    op: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    f: F,
    cfg: &GradCheck,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Bound<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
    let mut all: Vec<Tensor> = inputs.to_vec();
    all.extend(store.iter().map(|(_, t)| t.clone()));
    let n_in = inputs.len();
    finite_diff_check(
        op,
        |tape, vars| {
            let bound = Bound::from_vars(
                tape,
                names
                    .iter()
                    .map(|n| n.to_string())
                    .zip(vars[n_in..].iter().cloned()),
            );
            f(&bound, &vars[..n_in])
        },
        &all,
        cfg,
    )
}

/// Standard-normal parameters scaled by `scale`, so every path carries
/// signal instead of the near-zero initialization.
pub fn random_store(specs: &[ParamSpec], seed: u64, scale: f64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        store.insert(
            spec.name.clone(),
            Tensor::randn(&spec.shape, &mut rng).scale(scale),
        );
    }
    store
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn check_primitives() -> Result<GradCheckReport> {
    let spec = ConvSpec::same(3, 1, ConvGroups::Dense);
    let dw = ConvSpec::same(3, 2, ConvGroups::Depthwise);
    let inputs = [
        randn(&[1, 3, 5, 5], 1),
        randn(&[4, 3, 3, 3], 2).scale(0.3),
        randn(&[4, 1, 3, 3], 3).scale(0.3),
        randn(&[4], 4),
        randn(&[1, 8, 4, 4], 5).scale(0.2),
    ];
    finite_diff_check(
        "primitives",
        |_, x| {
            let h = x[0].conv2d(&x[1], Some(&x[3]), spec)?.gelu();
            let h = h.conv2d(&x[2], None, dw)?.tanh();
            let h = h
                .permute(&[0, 2, 3, 1])?
                .layer_norm(&x[3], &x[3].scale(0.5))?
                .permute(&[0, 3, 1, 2])?;
            let h = h.softmax(1)?.bilinear_resize(4, 4)?;
            let up = h.offset_upsample(&x[4].tanh().scale(0.25), 2)?;
            let pooled = up.adaptive_avg_pool(2)?.softplus();
            let gate = up.sigmoid().mul(&up.squared_relu())?;
            projected_mean(&gate, 6)?.add(&projected_mean(&pooled.exp(), 7)?)
        },
        &inputs,
        &GradCheck::default(),
    )
}

fn check_gbst() -> Result<GradCheckReport> {
    let spec = GbstSpec::new(1, 4, 5, 12)?;
    finite_diff_check(
        "gbst",
        |_, x| projected_mean(&x[0].gbst(&spec)?, 1),
        &[randn(&[2, 20, 12], 2)],
        &GradCheck::default(),
    )
}

fn wkv_inputs(t: usize, c: usize, per_token: bool, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_shape: Vec<usize> = if per_token { vec![1, t, c] } else { vec![1, c] };
    vec![
        Tensor::randn(&[1, t, c], &mut rng),
        Tensor::randn(&[1, t, c], &mut rng),
        Tensor::uniform(&w_shape, 0.2, 2.0, &mut rng),
        Tensor::randn(&[c], &mut rng),
    ]
}

fn check_wkv(kernel: WkvKernel, per_token: bool) -> Result<GradCheckReport> {
    let name = match (kernel, per_token) {
        (WkvKernel::Scan, _) => "dywkv_scan",
        (WkvKernel::Naive, false) => "dywkv_naive",
        (WkvKernel::Naive, true) => "dywkv_naive_per_token",
    };
    finite_diff_check(
        name,
        |_, x| projected_mean(&dywkv(&x[0], &x[1], &x[2], &x[3], kernel)?, 3),
        &wkv_inputs(9, 3, per_token, 4),
        &GradCheck::default(),
    )
}

fn check_dscd() -> Result<GradCheckReport> {
    let store = random_store(&DecayParams::specs("d", 6), 5, 0.5);
    check_params(
        "dscd",
        &store,
        &[randn(&[2, 7, 6], 6)],
        |b, x| {
            let p = DecayParams::bind(b, "d")?;
            let a = projected_mean(&dscd(&x[0], &p, DecayMode::Instance)?, 7)?;
            a.add(&projected_mean(&dscd(&x[0], &p, DecayMode::PerToken)?, 8)?)
        },
        &GradCheck::default(),
    )
}

fn check_amcm() -> Result<GradCheckReport> {
    let cfg = AmcmConfig::new(8, 2)?;
    let store = random_store(&cfg.specs("a"), 12, 0.2);
    check_params(
        "amcm_forward",
        &store,
        &[randn(&[1, 8, 8, 8], 13)],
        |b, x| projected_mean(&AmcmParams::bind(b, "a", cfg)?.forward(&x[0])?, 14),
        &GradCheck::default(),
    )
}

fn sciu_fixture() -> Result<(SciuConfig, ParamStore, Tensor)> {
    let cfg = SciuConfig::new(GbstSpec::new(1, 4, 4, 8)?, 2, 2, DecayMode::Instance)?;
    Ok((
        cfg,
        random_store(&cfg.specs("s"), 16, 0.25),
        randn(&[1, 16, 8], 17),
    ))
}

fn check_spatial() -> Result<GradCheckReport> {
    let (cfg, store, x) = sciu_fixture()?;
    check_params(
        "spatial_mix",
        &store,
        &[x],
        |b, v| projected_mean(&SciuParams::bind(b, "s", cfg)?.spatial_mix(&v[0])?, 1),
        &GradCheck::composite(),
    )
}

fn check_channel() -> Result<GradCheckReport> {
    let (cfg, store, x) = sciu_fixture()?;
    check_params(
        "channel_mix",
        &store,
        &[x],
        |b, v| projected_mean(&SciuParams::bind(b, "s", cfg)?.channel_mix(&v[0])?, 2),
        &GradCheck::composite(),
    )
}

fn check_cshf() -> Result<GradCheckReport> {
    let cfg = CshfConfig::new([4; 4], 4, [2; 4])?;
    let store = random_store(&cfg.specs("d"), 13, 0.3);
    let feats: Vec<Tensor> = (0..4).map(|i| randn(&[1, 4, 4, 4], 20 + i)).collect();
    check_params(
        "cshf_forward",
        &store,
        &feats,
        |b, f| projected_mean(&CshfParams::bind(b, "d", cfg)?.forward(f, (8, 8))?, 15),
        &GradCheck::composite(),
    )
}

fn check_loss() -> Result<GradCheckReport> {
    let target = Tensor::from_fn(&[2, 1, 4, 4], |i| ((i * 7) % 5 == 0) as u8 as f64);
    finite_diff_check(
        "hybrid_loss",
        |_, x| hybrid_loss(&x[0].sigmoid(), &target, &LossConfig::default()),
        &[randn(&[2, 1, 4, 4], 30)],
        &GradCheck::default(),
    )
}

/// Toy network (P=4, C=16, N=2, 32x32) checked through 12 parameter
/// tensors spread over every stage; the rest stay fixed at their values.
pub fn check_network() -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        patch_size: 4,
        embed_dim: 16,
        sciu_layers: 2,
        grid: 4,
        decoder_dim: 8,
        height: 32,
        width: 32,
        ..ModelConfig::default()
    };
    let store = cfg.init(8)?;
    let img = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let names = [
        "embed.w",
        "pos",
        "amcm.psi7.dw.w",
        "amcm.topology",
        "blocks.0.w_k.w",
        "blocks.0.decay.decay_w",
        "blocks.0.decay.u",
        "blocks.1.cm_k.w",
        "blocks.1.amcm.w_out.w",
        "decoder.offset2.w",
        "decoder.w_attn.w",
        "decoder.bottleneck.w",
    ];
    let mut chosen = ParamStore::new();
    for (i, n) in names.iter().enumerate() {
        let shape = store.get(n)?.shape().to_vec();
        chosen.insert(*n, randn(&shape, 100 + i as u64).scale(0.3));
    }
    check_params(
        "network",
        &chosen,
        &[],
        |b, _| {
            let mut vars = Vec::with_capacity(store.len());
            for (n, t) in store.iter() {
                let v = if names.contains(&n) {
                    b.get(n)?
                } else {
                    b.tape().constant(t.clone())
                };
                vars.push((n.to_string(), v));
            }
            let full = Bound::from_vars(b.tape(), vars);
            let net = Network::bind(&full, cfg)?;
            projected_mean(&net.forward(&b.tape().constant(img.clone()))?, 10)
        },
        &GradCheck::composite(),
    )
}

type Check = fn() -> Result<GradCheckReport>;

/// Every gradient check, by module name.
pub const GRADCHECK_SUITE: &[(&str, Check)] = &[
    ("primitives", check_primitives),
    ("gbst", check_gbst),
    ("dywkv_naive", || check_wkv(WkvKernel::Naive, false)),
    ("dywkv_naive_per_token", || {
        check_wkv(WkvKernel::Naive, true)
    }),
    ("dywkv_scan", || check_wkv(WkvKernel::Scan, false)),
    ("dscd", check_dscd),
    ("amcm_forward", check_amcm),
    ("spatial_mix", check_spatial),
    ("channel_mix", check_channel),
    ("cshf_forward", check_cshf),
    ("hybrid_loss", check_loss),
    ("network", check_network),
];

/// Runs the checks named `module`, or all of them for `"all"`.
pub fn run_gradchecks(module: &str) -> Result<Vec<GradCheckReport>> {
    let selected: Vec<_> = GRADCHECK_SUITE
        .iter()
        .filter(|(n, _)| module == "all" || *n == module)
        .collect();
    if selected.is_empty() {
        let known: Vec<&str> = GRADCHECK_SUITE.iter().map(|(n, _)| *n).collect();
        return Err(Error::Invalid(format!(
            "unknown module {module}; expected all or one of {}",
            known.join(", ")
        )));
    }
    selected.iter().map(|(_, f)| f()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: &'static str,
    pub tokens: usize,
    pub channels: usize,
    pub mean_ns: f64,
    /// Time relative to the previous size of the same variant.
    pub ratio: Option<f64>,
}

/// Largest relative difference tolerated between the two kernels before a
/// benchmark is refused.
pub const BENCH_EQUIVALENCE_TOL: f64 = 1e-10;

fn time_mean<F: FnMut() -> Result<Tensor>>(mut f: F, budget: Duration) -> Result<(f64, Tensor)> {
    let start = Instant::now();
    let mut out = f()?;
    let mut runs = 1u32;
    while start.elapsed() < budget && runs < 1000 {
        out = f()?;
        runs += 1;
    }
    Ok((start.elapsed().as_nanos() as f64 / runs as f64, out))
}

/// Times both kernels at each `T` in `sizes` with `C = channels`, instance
/// decay, and verifies they agree before reporting anything.
pub fn bench_wkv(sizes: &[usize], channels: usize, budget: Duration) -> Result<Vec<BenchRow>> {
    let mut rows: Vec<BenchRow> = Vec::new();
    for &t in sizes {
        let x = wkv_inputs(t, channels, false, t as u64);
        let (scan_ns, ys) = time_mean(|| dywkv_scan(&x[0], &x[1], &x[2], &x[3]), budget)?;
        let (naive_ns, yn) = time_mean(|| dywkv_naive(&x[0], &x[1], &x[2], &x[3]), budget)?;
        let err = relative_error(&ys, &yn, &x[1]);
        if err.is_nan() || err > BENCH_EQUIVALENCE_TOL {
            return Err(Error::Invalid(format!(
                "scan and naive kernels disagree at T={t}: relative error {err:.3e}"
            )));
        }
        for (variant, ns) in [("scan", scan_ns), ("naive", naive_ns)] {
            let ratio = rows
                .iter()
                .rev()
                .find(|r| r.variant == variant)
                .map(|r| ns / r.mean_ns);
            rows.push(BenchRow {
                variant,
                tokens: t,
                channels,
                mean_ns: ns,
                ratio,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("variant,T,C,mean_ns,ratio\n");
    for r in rows {
        let ratio = r.ratio.map(|v| format!("{v:.4}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{:.0},{}\n",
            r.variant, r.tokens, r.channels, r.mean_ns, ratio
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for report in run_gradchecks("all").unwrap() {
            assert!(report.passed, "{report}");
        }
    }

    #[test]
    fn unknown_module_lists_known_ones() {
        let err = run_gradchecks("nope").unwrap_err().to_string();
        assert!(err.contains("gbst") && err.contains("network"), "{err}");
    }

    #[test]
    fn bench_rows_and_ratios() {
        let rows = bench_wkv(&[16, 32], 2, Duration::ZERO).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].ratio, None);
        assert!(rows[2].ratio.is_some());
        let csv = bench_csv(&rows);
        assert!(csv.starts_with("variant,T,C,mean_ns,ratio\nscan,16,2,"));
    }
}
