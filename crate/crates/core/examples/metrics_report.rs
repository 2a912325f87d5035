//! Scores noisy predictions of synthetic masks and prints the report and a
//! coarse slice of the precision/recall curve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scrwkv::metrics::{compute_metrics, default_thresholds};
use scrwkv::synth::synth_cracks;
use scrwkv::Tensor;

fn main() -> scrwkv::Result<()> {
    let samples = synth_cracks(6, 64, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gts: Vec<Tensor> = samples.into_iter().map(|s| s.mask).collect();
    let preds: Vec<Tensor> = gts
        .iter()
        .map(|g| {
            let noise = Tensor::uniform(g.shape(), -0.45, 0.45, &mut rng);
            g.zip_map(&noise, |m, n| (0.6 * m + 0.2 + n).clamp(0.0, 1.0))
        })
        .collect::<scrwkv::Result<_>>()?;
    let report = compute_metrics(&preds, &gts, &default_thresholds())?;
    print!("{}", report.to_table());
    println!("\nthreshold precision recall   f1");
    for c in report.curve.iter().step_by(10) {
        println!(
            "{:>9.2} {:>9.4} {:>6.4} {:.4}",
            c.threshold, c.precision, c.recall, c.f1
        );
    }
    Ok(())
}
