use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Relative-error denominator floor.
    pub floor: f64,
    /// Coordinates sampled per input; all of them when the input is smaller.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
            max_coords: 64,
            seed: 7,
        }
    }
}

impl GradCheck {
    /// Settings for multi-stage blocks. Their gradients span many orders of
    /// magnitude and central differences carry ~1e-11 of roundoff, so the
    /// denominator floor is raised to 1e-6; step and tolerance are unchanged.
    pub fn composite() -> Self {
        GradCheck {
            floor: 1e-6,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
    /// `(input index, flat coordinate, analytic, numeric)` of the largest relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<22} {} max_rel={:.3e} max_abs={:.3e} tol={:.0e} coords={}",
            self.op,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.max_abs_error,
            self.tolerance,
            self.coords_checked
        )?;
        if let Some((k, i, a, n)) = self.worst {
            write!(f, " worst=input{k}[{i}] analytic={a:.6e} numeric={n:.6e}")?;
        }
        Ok(())
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::no_grad();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.value().numel() != 1 {
        return Err(Error::GradCheck(format!(
            "function must be scalar, got shape {:?}",
            out.shape()
        )));
    }
    Ok(out.value().item())
}

/// Compares the tape gradient of the scalar `f` against central differences
/// `(f(x + h e) - f(x - h e)) / 2h` for every input in `inputs`.
pub fn finite_diff_check<F>(
    op: &str,
    f: F,
    inputs: &[Tensor],
    cfg: &GradCheck,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let base = eval(&f, inputs)?;
    if eval(&f, inputs)?.to_bits() != base.to_bits() {
        return Err(Error::GradCheck(format!(
            "{op}: function is not deterministic"
        )));
    }

    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &leaves)?;
    let grads = tape.backward(&loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perturbed = inputs.to_vec();
    let (mut max_rel, mut max_abs, mut checked) = (0.0f64, 0.0f64, 0);
    let mut worst = None;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf);
        let n = inputs[k].numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.max_coords).into_vec()
        };
        for i in coords {
            let x0 = inputs[k].data()[i];
            perturbed[k].data_mut()[i] = x0 + cfg.step;
            let fp = eval(&f, &perturbed)?;
            perturbed[k].data_mut()[i] = x0 - cfg.step;
            let fm = eval(&f, &perturbed)?;
            perturbed[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            if !rel.is_finite() {
                max_rel = f64::INFINITY;
                worst = Some((k, i, a, numeric));
            } else if rel > max_rel || worst.is_none() {
                max_rel = rel;
                worst = Some((k, i, a, numeric));
            }
            max_abs = max_abs.max(abs);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        tolerance: cfg.tolerance,
        coords_checked: checked,
        worst,
        passed: max_rel < cfg.tolerance,
    })
}
