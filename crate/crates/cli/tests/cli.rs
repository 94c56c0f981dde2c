use std::path::Path;
use std::process::{Command, Output};

use bsmamba::pipeline::imageio::write_rgb;
use bsmamba::pipeline::pgm;
use bsmamba::tensor::Tensor;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsmamba"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn image(k: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(&[3, 20, 24], |i| {
        scale * (((i * 7 + k * 13) % 29) as f64 / 28.0 * 0.8 + 0.1)
    })
}

fn dataset(root: &Path) {
    for d in ["low", "high"] {
        std::fs::create_dir_all(root.join(d)).unwrap();
    }
    for k in 0..2 {
        let name = format!("p{k}.png");
        write_rgb(&root.join("high").join(&name), &image(k, 1.0)).unwrap();
        write_rgb(&root.join("low").join(&name), &image(k, 0.2)).unwrap();
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&bin(&[])), 1);
    assert_eq!(code(&bin(&["frobnicate"])), 1);
    assert_eq!(code(&bin(&["enhance", "--ckpt", "x"])), 1);
    assert_eq!(code(&bin(&["--help"])), 0);
}

#[test]
fn bad_override_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let data = dir.path().to_str().unwrap();
    let out = dir.path().join("m.bsmk");
    for set in ["iterations", "nope=1", "crop_size=17"] {
        let o = bin(&["train", "--data", data, "--out", out.to_str().unwrap(), "--set", set]);
        assert_eq!(code(&o), 1, "{set}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.bsmk");
    let o = bin(&[
        "train",
        "--data",
        dir.path().join("none").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let o = bin(&[
        "eval",
        "--ckpt",
        out.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn score_writes_16_bit_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("a.png");
    write_rgb(&src, &image(0, 1.0)).unwrap();
    for scorer in ["luma", "histogram"] {
        let out = dir.path().join(format!("{scorer}.pgm"));
        let o = bin(&[
            "score",
            "--in",
            src.to_str().unwrap(),
            "--scorer",
            scorer,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let p = pgm::read(&out).unwrap();
        assert_eq!((p.width, p.height, p.maxval), (24, 20, 65535));
    }
    let o = bin(&[
        "score",
        "--in",
        src.to_str().unwrap(),
        "--scorer",
        "sideways",
        "--out",
        "x.pgm",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_enhance_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    dataset(root);
    let cfg = root.join("desk.cfg");
    std::fs::write(&cfg, "channels = 8\ndenet_width = 8\ncrop_size = 16\nlog_every = 2\n").unwrap();
    let ckpt = root.join("m.bsmk");
    let o = bin(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        root.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--set",
        "iterations=3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("final_psnr="));

    let outdir = root.join("out");
    let o = bin(&[
        "enhance",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--in",
        root.join("low").to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--dump-maps",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for suffix in [
        "enhanced",
        "brightness",
        "semantic",
        "brightness_order",
        "semantic_order",
    ] {
        assert!(outdir.join(format!("p0.{suffix}.png")).is_file(), "{suffix}");
    }

    let csv = root.join("eval.csv");
    let o = bin(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        root.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        stdout.contains("images=2") && stdout.contains("scans_per_forward=8"),
        "{stdout}"
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("image,psnr,ssim,scans"));

    std::fs::write(&ckpt, b"junk").unwrap();
    let o = bin(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        root.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn selftest_passes() {
    let o = bin(&["selftest"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
    assert_eq!(stdout.lines().count(), 8);
}
