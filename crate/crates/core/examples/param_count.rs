//! Parameter and FLOP breakdown of the default configuration and of the
//! patch-size and depth variants.

use scrwkv::network::{ModelConfig, LAYER_COUNTS, PATCH_SIZES};

fn main() -> scrwkv::Result<()> {
    let cfg = ModelConfig::default();
    let params = cfg.count_params()?;
    let flops = cfg.count_flops()?;
    for ((module, n), (_, f)) in params.modules.iter().zip(&flops.items) {
        println!("{module:<12} {n:>9} params {:>9.3} GFLOPs", *f as f64 / 1e9);
    }
    println!(
        "{:<12} {:>9} params {:>9.3} GFLOPs",
        "total",
        params.total,
        flops.total as f64 / 1e9
    );
    println!("reference (published): 1.22M parameters, 22.78 GFLOPs @512x512");

    println!("\npatch size sweep (N = 4)");
    for p in PATCH_SIZES {
        let c = ModelConfig {
            patch_size: p,
            grid: cfg.grid.min(512 / p),
            ..cfg
        };
        println!(
            "P={p:<3} {:>9} params {:>9.3} GFLOPs",
            c.count_params()?.total,
            c.count_flops()?.total as f64 / 1e9
        );
    }
    println!("\ndepth sweep (P = 4)");
    for n in LAYER_COUNTS {
        let c = ModelConfig {
            sciu_layers: n,
            ..cfg
        };
        println!(
            "N={n:<3} {:>9} params {:>9.3} GFLOPs",
            c.count_params()?.total,
            c.count_flops()?.total as f64 / 1e9
        );
    }
    Ok(())
}
