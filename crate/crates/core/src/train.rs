//! Hybrid BCE + Dice loss, AdamW with a polynomial schedule, and the
//! training loop.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{ModelConfig, Network};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            beta: 0.75,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    /// Weights rescaled to sum to one.
    pub fn normalized(&self) -> Result<LossConfig> {
        let total = self.alpha + self.beta;
        if self.alpha < 0.0 || self.beta < 0.0 || total <= 0.0 || self.epsilon < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with a positive sum, got alpha={} beta={} epsilon={}",
                self.alpha, self.beta, self.epsilon
            )));
        }
        Ok(LossConfig {
            alpha: self.alpha / total,
            beta: self.beta / total,
            epsilon: self.epsilon,
        })
    }
}

/// `alpha * BCE + beta * Dice` for probabilities `pred` against a binary
/// `target` of the same shape `[B, ...]`. BCE averages over every pixel;
/// Dice is computed per sample and averaged over the batch.
pub fn hybrid_loss<'t>(pred: &Var<'t>, target: &Tensor, cfg: &LossConfig) -> Result<Var<'t>> {
    if pred.shape() != target.shape() || target.rank() == 0 {
        return Err(Error::shape(
            "hybrid_loss",
            format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let cfg = cfg.normalized()?;
    let tape = pred.tape();
    let b = target.dim(0);
    let m = target.numel() / b;
    let t = tape.constant(target.clone());
    let p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let bce = t
        .mul(&p.ln())?
        .add(&t.one_minus().mul(&p.one_minus().ln())?)?
        .mean()
        .neg();

    let flat_p = pred.reshape(&[b, m])?;
    let flat_t = tape.constant(target.reshape(&[b, m])?);
    let inter = flat_p
        .mul(&flat_t)?
        .sum_axis(1)?
        .scale(2.0)
        .add_scalar(cfg.epsilon);
    let denom = flat_p
        .sum_axis(1)?
        .add(&flat_t.sum_axis(1)?)?
        .add_scalar(cfg.epsilon);
    let dice = inter.div(&denom)?.one_minus().mean();

    bce.scale(cfg.alpha).add(&dice.scale(cfg.beta))
}

/// Loss value without gradients.
pub fn hybrid_loss_value(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let tape = Tape::no_grad();
    Ok(hybrid_loss(&tape.constant(pred.clone()), target, cfg)?
        .value()
        .item())
}

/// Hard Dice of `probs` thresholded at `threshold`, pooled over the batch.
/// Empty prediction and empty target count as a perfect match.
pub fn dice_score(probs: &Tensor, target: &Tensor, threshold: f64) -> f64 {
    let (mut inter, mut total) = (0.0, 0.0);
    for (&p, &t) in probs.data().iter().zip(target.data()) {
        let hit = if p >= threshold { 1.0 } else { 0.0 };
        inter += hit * t;
        total += hit + t;
    }
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub power: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            power: 0.9,
            max_steps: 300,
            seed: 42,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0 && self.power > 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Config(
                "lr, power and eps must be positive, weight_decay non-negative".into(),
            ));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!(
                "betas ({b1}, {b2}) must lie in [0, 1)"
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    /// `lr0 * (1 - t / T_max)^power`, zero from `T_max` on.
    pub fn poly_lr(&self, step: usize) -> f64 {
        let frac = 1.0 - step as f64 / self.max_steps as f64;
        self.lr * frac.max(0.0).powf(self.power)
    }
}

/// AdamW with decoupled weight decay applied to every parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    moments: IndexMap<String, (Tensor, Tensor)>,
    steps: u64,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, Tensor>,
        lr: f64,
        cfg: &OptimConfig,
    ) -> Result<()> {
        self.steps += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        for (name, p) in store.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Weights(format!("no gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape()),
                ));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let pd = p.data_mut();
            for (((x, &gi), mi), vi) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
                *x -= lr * (update + cfg.weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice: f64,
}

/// Full-batch trainer holding the weights and optimizer state.
pub struct Trainer {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub store: ParamStore,
    adam: AdamW,
    step: usize,
}

impl Trainer {
    pub fn new(model: ModelConfig, loss: LossConfig, optim: OptimConfig) -> Result<Self> {
        optim.validate()?;
        loss.normalized()?;
        let store = model.init(optim.seed)?;
        Ok(Trainer {
            model,
            loss,
            optim,
            store,
            adam: AdamW::new(),
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Forward, backward and one optimizer update on `images` `[B, 3, H, W]`
    /// with masks `[B, 1, H, W]`. The reported loss and Dice are those of
    /// the weights before the update.
    pub fn step(&mut self, images: &Tensor, masks: &Tensor) -> Result<StepStats> {
        let tape = Tape::new();
        let (loss, dice, grads) = {
            let bound = Bound::trainable(&tape, &self.store);
            let net = Network::bind(&bound, self.model)?;
            let probs = net.forward(&tape.constant(images.clone()))?.sigmoid();
            let loss = hybrid_loss(&probs, masks, &self.loss)?;
            let dice = dice_score(probs.value(), masks, 0.5);
            let grads = bound.gradients(&tape.backward(&loss)?);
            (loss.value().item(), dice, grads)
        };
        if !loss.is_finite() {
            return Err(Error::Invalid(format!(
                "non-finite loss at step {}",
                self.step
            )));
        }
        let lr = self.optim.poly_lr(self.step);
        self.adam.step(&mut self.store, &grads, lr, &self.optim)?;
        let stats = StepStats {
            step: self.step,
            lr,
            loss,
            dice,
        };
        self.step += 1;
        Ok(stats)
    }

    /// Loss and Dice of the current weights without updating them.
    pub fn evaluate(&self, images: &Tensor, masks: &Tensor) -> Result<(f64, f64)> {
        let probs = crate::network::predict(&self.model, &self.store, images)?;
        Ok((
            hybrid_loss_value(&probs, masks, &self.loss)?,
            dice_score(&probs, masks, 0.5),
        ))
    }
}
