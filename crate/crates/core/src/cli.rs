//! Command-line interface: `infer`, `eval`, `train`, `gradcheck`, `bench`
//! and `count`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{list_images, read_image, read_mask, write_atomic, write_mask, write_prob_map};
use crate::metrics::compute_metrics;
use crate::network::{predict, ModelConfig};
use crate::ops::bilinear_resize;
use crate::synth::{stack, synth_cracks};
use crate::tensor::Tensor;
use crate::train::Trainer;
use crate::verify::{bench_csv, bench_wkv, run_gradchecks};

#[derive(Debug, Parser)]
#[command(
    name = "scrwkv",
    version,
    about = "Crack segmentation with a decayed-WKV backbone"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment every image in a file or directory.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Score probability maps against ground-truth masks with matching names.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train from scratch and write checkpoints plus a loss log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `synthetic`, or a directory holding `images/` and `masks/`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Number of synthetic images.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Write a checkpoint every this many steps (0: only at the end).
        #[arg(long, default_value_t = 0)]
        save_every: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time the scan and naive WKV kernels.
    Bench {
        #[arg(long, value_enum, default_value_t = BenchOp::Dywkv)]
        op: BenchOp,
        #[arg(long, value_delimiter = ',', default_values_t = [4096, 8192, 16384, 32768])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        /// Minimum timing window per kernel and size.
        #[arg(long, default_value_t = 200)]
        budget_ms: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Parameter and FLOP counts per module.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BenchOp {
    Dywkv,
}

/// Outcome of a command that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ChecksFailed,
}

/// Process exit code: 0 success, 1 validation failure, 2 I/O failure.
pub fn exit_code(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::ChecksFailed) => 1,
        Err(e) if e.is_io() => 2,
        Err(_) => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Infer {
            config,
            weights,
            input,
            output,
            threshold,
        } => infer(config.as_deref(), &weights, &input, &output, threshold),
        Command::Eval {
            pred_dir,
            gt_dir,
            report,
        } => eval(&pred_dir, &gt_dir, &report),
        Command::Train {
            config,
            data,
            out,
            samples,
            save_every,
        } => train(config.as_deref(), &data, &out, samples, save_every),
        Command::Gradcheck { module, report } => gradcheck(&module, report.as_deref()),
        Command::Bench {
            op: BenchOp::Dywkv,
            sizes,
            channels,
            budget_ms,
            report,
        } => {
            let rows = bench_wkv(&sizes, channels, Duration::from_millis(budget_ms))?;
            let csv = bench_csv(&rows);
            print!("{csv}");
            if let Some(p) = report {
                write_atomic(&p, csv.as_bytes())?;
            }
            Ok(Outcome::Success)
        }
        Command::Count { config } => {
            print!("{}", count_report(&load_config(config.as_deref())?.model)?);
            Ok(Outcome::Success)
        }
    }
}

/// The text printed by `count`.
pub fn count_report(model: &ModelConfig) -> Result<String> {
    let params = model.count_params()?;
    let flops = model.count_flops()?;
    let mut s = format!("{:<12} {:>10} {:>12}\n", "module", "params", "GFLOPs");
    for ((module, n), (_, f)) in params.modules.iter().zip(&flops.items) {
        s += &format!("{module:<12} {n:>10} {:>12.3}\n", *f as f64 / 1e9);
    }
    s += &format!(
        "{:<12} {:>10} {:>12.3}\n",
        "total",
        params.total,
        flops.total as f64 / 1e9
    );
    s += &format!(
        "total: {:.2}M parameters, {:.2} GFLOPs @{}x{}\n",
        params.total as f64 / 1e6,
        flops.total as f64 / 1e9,
        model.height,
        model.width
    );
    s += "reference (published): 1.22M parameters, 22.78 GFLOPs @512x512\n";
    Ok(s)
}

fn resize_plane(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let c = t.dim(0);
    bilinear_resize(&t.reshape(&[1, c, t.dim(1), t.dim(2)])?, h, w)?.reshape(&[c, h, w])
}

fn infer(
    config: Option<&Path>,
    weights: &Path,
    input: &Path,
    output: &Path,
    threshold: f64,
) -> Result<Outcome> {
    let model = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => Checkpoint::load(weights)?.model,
    };
    let ckpt = Checkpoint::load_for(weights, &model)?;
    let inputs = if input.is_dir() {
        list_images(input)?
    } else {
        vec![input.to_path_buf()]
    };
    if inputs.is_empty() {
        return Err(Error::Invalid(format!("no images in {}", input.display())));
    }
    ensure_dir(output)?;
    for path in &inputs {
        let img = read_image(path)?;
        let (h, w) = (img.dim(1), img.dim(2));
        let resized = if (h, w) != (model.height, model.width) {
            warn!(
                "{}: resizing {h}x{w} to {}x{}",
                path.display(),
                model.height,
                model.width
            );
            resize_plane(&img, model.height, model.width)?
        } else {
            img
        };
        let probs = predict(
            &model,
            &ckpt.store,
            &resized.reshape(&[1, 3, model.height, model.width])?,
        )?;
        let probs = probs.reshape(&[1, model.height, model.width])?;
        let probs = if (h, w) != (model.height, model.width) {
            resize_plane(&probs, h, w)?
        } else {
            probs
        };
        let name = stem(path);
        write_mask(&output.join(format!("{name}_mask.png")), &probs, threshold)?;
        write_prob_map(&output.join(format!("{name}_prob.png")), &probs)?;
        info!("{} done", path.display());
    }
    println!("wrote {} masks to {}", inputs.len(), output.display());
    Ok(Outcome::Success)
}

fn eval(pred_dir: &Path, gt_dir: &Path, report: &Path) -> Result<Outcome> {
    let gts = list_images(gt_dir)?;
    if gts.is_empty() {
        return Err(Error::Invalid(format!("no masks in {}", gt_dir.display())));
    }
    let mut preds = Vec::with_capacity(gts.len());
    let mut masks = Vec::with_capacity(gts.len());
    for gt in &gts {
        let name = gt.file_name().unwrap_or_default();
        let pred_path = pred_dir.join(name);
        let gray = read_image(&pred_path)?;
        let (h, w) = (gray.dim(1), gray.dim(2));
        let mask = read_mask(gt)?;
        if mask.shape() != [1, h, w] {
            return Err(Error::shape(
                "eval",
                format!(
                    "{}: prediction {h}x{w} vs mask {:?}",
                    pred_path.display(),
                    &mask.shape()[1..]
                ),
            ));
        }
        preds.push(gray.narrow(0, 0, 1)?);
        masks.push(mask);
    }
    let cfg = RunConfig::default();
    let r = compute_metrics(&preds, &masks, &cfg.thresholds)?;
    write_atomic(report, r.to_csv().as_bytes())?;
    print!("{}", r.to_table());
    Ok(Outcome::Success)
}

fn load_dir_dataset(dir: &Path, model: &ModelConfig) -> Result<(Tensor, Tensor)> {
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    let paths = list_images(&img_dir)?;
    if paths.is_empty() {
        return Err(Error::Invalid(format!(
            "no images in {}",
            img_dir.display()
        )));
    }
    let (h, w) = (model.height, model.width);
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for p in &paths {
        let img = read_image(p)?;
        let mask_path = mask_dir.join(p.file_name().unwrap_or_default());
        let mask = read_mask(&mask_path)?;
        if img.shape()[1..] != [h, w] || mask.shape()[1..] != [h, w] {
            return Err(Error::shape(
                "train",
                format!("{}: training pairs must be {h}x{w}", p.display()),
            ));
        }
        images.push(img.reshape(&[1, 3, h, w])?);
        masks.push(mask.reshape(&[1, 1, h, w])?);
    }
    Ok((
        Tensor::concat(&images.iter().collect::<Vec<_>>(), 0)?,
        Tensor::concat(&masks.iter().collect::<Vec<_>>(), 0)?,
    ))
}

fn train(
    config: Option<&Path>,
    data: &str,
    out: &Path,
    samples: usize,
    save_every: usize,
) -> Result<Outcome> {
    let cfg = load_config(config)?;
    let model = cfg.model;
    let (images, masks) = if data == "synthetic" {
        if model.height != model.width {
            return Err(Error::Config(
                "synthetic data needs a square resolution".into(),
            ));
        }
        stack(&synth_cracks(samples, model.height, cfg.optim.seed)?)?
    } else {
        load_dir_dataset(Path::new(data), &model)?
    };
    ensure_dir(out)?;
    let mut trainer = Trainer::new(model, cfg.loss, cfg.optim)?;
    let mut log = String::from("step,lr,loss,dice\n");
    for _ in 0..cfg.optim.max_steps {
        let s = trainer.step(&images, &masks)?;
        log += &format!("{},{:e},{},{}\n", s.step, s.lr, s.loss, s.dice);
        info!("step {} loss {:.5} dice {:.4}", s.step, s.loss, s.dice);
        if save_every > 0 && (s.step + 1) % save_every == 0 {
            let ckpt = Checkpoint {
                model,
                store: trainer.store.clone(),
            };
            ckpt.save(&out.join(format!("step{:06}.ckpt", s.step + 1)))?;
        }
    }
    let (loss, dice) = trainer.evaluate(&images, &masks)?;
    log += &format!("{},0,{loss},{dice}\n", cfg.optim.max_steps);
    write_atomic(&out.join("loss.csv"), log.as_bytes())?;
    Checkpoint {
        model,
        store: trainer.store,
    }
    .save(&out.join("final.ckpt"))?;
    write_atomic(&out.join("config.json"), &serde_json::to_vec_pretty(&cfg)?)?;
    println!(
        "final loss {loss:.5}, dice {dice:.4}; wrote {}",
        out.display()
    );
    Ok(Outcome::Success)
}

fn gradcheck(module: &str, report: Option<&Path>) -> Result<Outcome> {
    let reports = run_gradchecks(module)?;
    let mut text = String::new();
    for r in &reports {
        text += &format!("{r}\n");
    }
    print!("{text}");
    if let Some(p) = report {
        write_atomic(p, text.as_bytes())?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!(
        "{} of {} checks passed",
        reports.len() - failed,
        reports.len()
    );
    Ok(if failed == 0 {
        Outcome::Success
    } else {
        Outcome::ChecksFailed
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_command() {
        for args in [
            vec![
                "scrwkv",
                "infer",
                "--weights",
                "w",
                "--input",
                "i",
                "--output",
                "o",
            ],
            vec![
                "scrwkv",
                "eval",
                "--pred-dir",
                "p",
                "--gt-dir",
                "g",
                "--report",
                "r.csv",
            ],
            vec!["scrwkv", "train", "--data", "synthetic", "--out", "o"],
            vec!["scrwkv", "gradcheck", "--module", "all"],
            vec!["scrwkv", "bench", "--op", "dywkv", "--sizes", "64,128"],
            vec!["scrwkv", "count"],
        ] {
            Cli::try_parse_from(&args).unwrap();
        }
        assert!(Cli::try_parse_from(["scrwkv", "count", "--bogus"]).is_err());
    }

    #[test]
    fn bench_sizes_are_comma_separated() {
        let cli = Cli::try_parse_from(["scrwkv", "bench", "--sizes", "64,128"]).unwrap();
        let Command::Bench { sizes, .. } = cli.command else {
            panic!()
        };
        assert_eq!(sizes, [64, 128]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Ok(Outcome::Success)), 0);
        assert_eq!(exit_code(&Ok(Outcome::ChecksFailed)), 1);
        assert_eq!(exit_code(&Err(Error::Config("x".into()))), 1);
        let io = Error::io("/x", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(exit_code(&Err(io)), 2);
    }

    #[test]
    fn count_prints_total_and_reference() {
        let s = count_report(&ModelConfig::default()).unwrap();
        assert!(s.contains("total: 2.32M parameters"), "{s}");
        assert!(s.contains("reference (published): 1.22M parameters"));
    }
}
