//! Trains the toy configuration on synthetic cracks and prints the loss curve.
//!
//! cargo run --release --example train_synthetic -- [steps] [lr]

use std::time::Instant;

use scrwkv::network::ModelConfig;
use scrwkv::synth::{stack, synth_cracks};
use scrwkv::train::{LossConfig, OptimConfig, Trainer};

fn main() -> scrwkv::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let model = ModelConfig {
        patch_size: 4,
        embed_dim: 16,
        sciu_layers: 2,
        decoder_dim: 16,
        height: 64,
        width: 64,
        ..ModelConfig::default()
    };
    let mut optim = OptimConfig {
        max_steps: steps,
        ..OptimConfig::default()
    };
    if let Some(lr) = std::env::args().nth(2).and_then(|s| s.parse().ok()) {
        optim.lr = lr;
    }
    let (images, masks) = stack(&synth_cracks(8, 64, optim.seed)?)?;
    let mut trainer = Trainer::new(model, LossConfig::default(), optim)?;
    println!("{} parameters", trainer.store.num_scalars());

    let start = Instant::now();
    let mut first = None;
    for _ in 0..steps {
        let s = trainer.step(&images, &masks)?;
        first.get_or_insert(s.loss);
        if s.step % 25 == 0 {
            println!(
                "step {:>4}  lr {:.2e}  loss {:.4}  dice {:.4}",
                s.step, s.lr, s.loss, s.dice
            );
        }
    }
    let (loss, dice) = trainer.evaluate(&images, &masks)?;
    println!(
        "final loss {loss:.4} ({:.1}% of initial), dice {dice:.4}, {:.1}s",
        100.0 * loss / first.unwrap_or(loss),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
