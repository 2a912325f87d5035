//! Runs one AMCM on a random feature map and prints the intermediate shapes
//! and the grid attention row sums.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scrwkv::amcm::{AmcmConfig, AmcmParams};
use scrwkv::params::{Bound, ParamStore};
use scrwkv::{Tape, Tensor};

fn main() -> scrwkv::Result<()> {
    let cfg = AmcmConfig::new(12, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = ParamStore::init(&cfg.specs("amcm"), &mut rng)?;
    let tape = Tape::no_grad();
    let bound = Bound::frozen(&tape, &store);
    let amcm = AmcmParams::bind(&bound, "amcm", cfg)?;
    println!(
        "slice widths {:?}, {} parameters",
        cfg.slice_widths(),
        store.num_scalars()
    );

    let x = tape.constant(Tensor::randn(&[1, 12, 16, 16], &mut rng));
    let gated = amcm.gate_split(&x)?;
    let cascaded = amcm.cascade(&gated)?;
    let z = amcm.multi_scale(&cascaded)?;
    let (attn, values) = amcm.grid_attention(&z)?;
    println!(
        "gated {:?} cascade {:?} multi-scale {:?}",
        gated.shape(),
        cascaded.shape(),
        z.shape()
    );
    println!(
        "grid attention {:?} values {:?}",
        attn.shape(),
        values.shape()
    );
    let rows: Vec<f64> = attn
        .value()
        .data()
        .chunks(16)
        .map(|r| r.iter().sum())
        .collect();
    println!(
        "row sums in [{:.12}, {:.12}]",
        rows.iter().cloned().fold(f64::INFINITY, f64::min),
        rows.iter().cloned().fold(0.0, f64::max)
    );
    let y = amcm.forward(&x)?;
    println!(
        "output {:?}, max |y - x| = {:.3e}",
        y.shape(),
        y.value().max_abs_diff(x.value())
    );
    Ok(())
}
