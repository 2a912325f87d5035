//! Compares the linear-time scan with the quadratic reference on random
//! inputs and prints the worst disagreement per sequence length.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scrwkv::wkv::{dywkv_naive, dywkv_scan, relative_error};
use scrwkv::Tensor;

fn main() -> scrwkv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = 8;
    for t in [1, 2, 16, 128, 1024] {
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let k = Tensor::randn(&[1, t, c], &mut rng).scale(4.0);
            let v = Tensor::randn(&[1, t, c], &mut rng);
            let w = Tensor::uniform(&[1, c], 0.05, 5.0, &mut rng);
            let u = Tensor::randn(&[c], &mut rng);
            let a = dywkv_scan(&k, &v, &w, &u)?;
            let b = dywkv_naive(&k, &v, &w, &u)?;
            worst = worst.max(relative_error(&a, &b, &v));
        }
        println!("T={t:<5} C={c}  max relative error {worst:.2e}");
    }
    Ok(())
}
