//! Times the scan and naive kernels over doubling sequence lengths.
//!
//! cargo run --release --example bench_wkv -- [max_T]

use std::time::Duration;

use scrwkv::verify::{bench_csv, bench_wkv};

fn main() -> scrwkv::Result<()> {
    let max_t: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(4096);
    let sizes: Vec<usize> = (0..)
        .map(|i| 256 << i)
        .take_while(|&t| t <= max_t)
        .collect();
    print!(
        "{}",
        bench_csv(&bench_wkv(&sizes, 32, Duration::from_millis(200))?)
    );
    Ok(())
}
