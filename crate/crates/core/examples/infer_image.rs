//! Trains a tiny model briefly, saves it, reloads the checkpoint and writes
//! a mask and probability map for a synthetic image.
//!
//! cargo run --release --example infer_image -- [output_dir]

use std::path::PathBuf;

use scrwkv::checkpoint::Checkpoint;
use scrwkv::io::{write_mask, write_prob_map};
use scrwkv::network::{predict, ModelConfig};
use scrwkv::synth::{stack, synth_cracks};
use scrwkv::train::{LossConfig, OptimConfig, Trainer};

fn main() -> scrwkv::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "infer_out".into()),
    );
    std::fs::create_dir_all(&out).map_err(|e| scrwkv::Error::Invalid(e.to_string()))?;
    let model = ModelConfig {
        embed_dim: 16,
        sciu_layers: 2,
        grid: 4,
        decoder_dim: 8,
        height: 32,
        width: 32,
        ..ModelConfig::default()
    };
    let optim = OptimConfig {
        lr: 2e-3,
        max_steps: 60,
        ..OptimConfig::default()
    };
    let samples = synth_cracks(5, 32, 7)?;
    let (images, masks) = stack(&samples[..4])?;
    let mut trainer = Trainer::new(model, LossConfig::default(), optim)?;
    for _ in 0..optim.max_steps {
        trainer.step(&images, &masks)?;
    }

    let path = out.join("model.ckpt");
    Checkpoint {
        model,
        store: trainer.store,
    }
    .save(&path)?;
    let ckpt = Checkpoint::load_for(&path, &model)?;

    let held_out = &samples[4];
    let probs = predict(
        &model,
        &ckpt.store,
        &held_out.image.reshape(&[1, 3, 32, 32])?,
    )?;
    write_mask(&out.join("mask.png"), &probs, 0.5)?;
    write_prob_map(&out.join("prob.png"), &probs)?;
    write_mask(&out.join("truth.png"), &held_out.mask, 0.5)?;
    println!(
        "wrote mask.png, prob.png and truth.png to {}",
        out.display()
    );
    Ok(())
}
