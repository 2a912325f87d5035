use std::path::Path;
use std::process::{Command, Output};

use scrwkv::checkpoint::Checkpoint;
use scrwkv::config::RunConfig;
use scrwkv::network::ModelConfig;
use scrwkv::train::OptimConfig;

fn scrwkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scrwkv"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        sciu_layers: 2,
        grid: 2,
        decoder_dim: 4,
        height: 32,
        width: 32,
        ..ModelConfig::default()
    }
}

fn write_config(dir: &Path, steps: usize) -> String {
    let cfg = RunConfig {
        model: toy_model(),
        optim: OptimConfig {
            max_steps: steps,
            ..OptimConfig::default()
        },
        ..RunConfig::default()
    };
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn write_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]))
        .save(path)
        .unwrap();
}

#[test]
fn count_prints_total_and_reference() {
    let o = scrwkv(&["count"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("total:") && s.contains("1.22M"), "{s}");
}

#[test]
fn eval_on_identical_directories_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let masks = dir.path().join("gt");
    std::fs::create_dir(&masks).unwrap();
    for i in 0..3u32 {
        write_gray(&masks.join(format!("m{i}.png")), 12, 10, |x, y| {
            if (x + y + i) % 5 == 0 {
                255
            } else {
                0
            }
        });
    }
    let report = dir.path().join("report.csv");
    let o = scrwkv(&[
        "eval",
        "--pred-dir",
        masks.to_str().unwrap(),
        "--gt-dir",
        masks.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    for metric in ["ods", "ois", "precision", "recall", "f1", "miou"] {
        assert!(csv.contains(&format!("{metric},1\n")), "{metric}: {csv}");
    }
}

#[test]
fn eval_rejects_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (p, g) = (dir.path().join("p"), dir.path().join("g"));
    std::fs::create_dir(&p).unwrap();
    std::fs::create_dir(&g).unwrap();
    write_gray(&p.join("a.png"), 8, 8, |_, _| 0);
    write_gray(&g.join("a.png"), 8, 9, |_, _| 0);
    let o = scrwkv(&[
        "eval",
        "--pred-dir",
        p.to_str().unwrap(),
        "--gt-dir",
        g.to_str().unwrap(),
        "--report",
        "/dev/null",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 3);
    let out = dir.path().join("run");
    let o = scrwkv(&[
        "train",
        "--config",
        &cfg,
        "--data",
        "synthetic",
        "--samples",
        "2",
        "--out",
        out.to_str().unwrap(),
        "--save-every",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3 + 1);
    assert!(out.join("step000002.ckpt").exists());
    let ckpt = Checkpoint::load(&out.join("final.ckpt")).unwrap();
    assert_eq!(ckpt.model, toy_model());

    // a 40x24 input is resized to the model resolution and back
    let input = dir.path().join("in");
    std::fs::create_dir(&input).unwrap();
    write_gray(&input.join("crack.png"), 40, 24, |x, _| {
        if x == 20 {
            30
        } else {
            160
        }
    });
    let masks = dir.path().join("masks");
    let weights = out.join("final.ckpt");
    let args = [
        "infer",
        "--weights",
        weights.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--output",
        masks.to_str().unwrap(),
    ];
    let o = scrwkv(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mask = image::open(masks.join("crack_mask.png"))
        .unwrap()
        .to_luma8();
    assert_eq!(mask.dimensions(), (40, 24));
    assert!(mask.pixels().all(|p| p[0] == 0 || p[0] == 255));
    let first = std::fs::read(masks.join("crack_prob.png")).unwrap();
    assert!(scrwkv(&args).status.success());
    assert_eq!(std::fs::read(masks.join("crack_prob.png")).unwrap(), first);
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2);
    let run = |name: &str| {
        let out = dir.path().join(name);
        assert!(scrwkv(&[
            "train",
            "--config",
            &cfg,
            "--data",
            "synthetic",
            "--samples",
            "2",
            "--out",
            out.to_str().unwrap()
        ])
        .status
        .success());
        (
            std::fs::read(out.join("final.ckpt")).unwrap(),
            std::fs::read(out.join("loss.csv")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn infer_rejects_weights_for_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.ckpt");
    let other = ModelConfig {
        embed_dim: 16,
        ..toy_model()
    };
    Checkpoint {
        model: other,
        store: other.init(0).unwrap(),
    }
    .save(&weights)
    .unwrap();
    let cfg = write_config(dir.path(), 1);
    let o = scrwkv(&[
        "infer",
        "--config",
        &cfg,
        "--weights",
        weights.to_str().unwrap(),
        "--input",
        "x.png",
        "--output",
        "o",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("embed.w"));
}

#[test]
fn gradcheck_single_module_passes() {
    let o = scrwkv(&["gradcheck", "--module", "gbst"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("1 of 1 checks passed"));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("bench.csv");
    let o = scrwkv(&[
        "bench",
        "--op",
        "dywkv",
        "--sizes",
        "32,64",
        "--channels",
        "4",
        "--budget-ms",
        "1",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(report).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn failures_map_to_exit_codes() {
    assert_eq!(scrwkv(&["count", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        scrwkv(&["count", "--config", "/nonexistent.json"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        scrwkv(&["gradcheck", "--module", "nope"]).status.code(),
        Some(1)
    );
    assert_eq!(scrwkv(&["--help"]).status.code(), Some(0));
}
