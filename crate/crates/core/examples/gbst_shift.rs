//! Shows where each channel group of a one-hot token lands after the shift.

use scrwkv::gbst::{gbst, GbstSpec};
use scrwkv::Tensor;

fn main() -> scrwkv::Result<()> {
    let (h, w, c) = (5, 5, 8);
    let spec = GbstSpec::new(1, h, w, c)?;
    // every channel set at the center token
    let center = 2 * w + 2;
    let x = Tensor::from_fn(&[1, h * w, c], |i| (i / c == center) as u8 as f64);
    let y = gbst(&x, &spec)?;
    for g in spec.groups() {
        let ch = g.channels.start;
        let n = (0..h * w).find(|&n| y.data()[n * c + ch] != 0.0).unwrap();
        println!(
            "channels {:?} {:?}: (2, 2) -> ({}, {})",
            g.channels,
            g.direction,
            n / w,
            n % w
        );
    }
    Ok(())
}
