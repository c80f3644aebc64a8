use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use thinconv::damage::{parse_epoch_csv, SparsifyReport};
use thinconv::net::load_checkpoint;

/// Writes a tiny MNIST-shaped set: `n` 28×28 images whose label is the row
/// of a bright bar.
fn write_idx(dir: &Path, prefix: &str, n: u32) {
    let mut images = Vec::new();
    images.extend_from_slice(&0x803u32.to_be_bytes());
    for v in [n, 28, 28] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = Vec::new();
    labels.extend_from_slice(&0x801u32.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    for k in 0..n {
        let label = (k % 10) as u8;
        for x in 0..28u32 {
            for y in 0..28u32 {
                let on = x / 3 == label as u32 + 1 && (4..24).contains(&y);
                images.push(if on { 230 } else { ((x * 7 + y * 13 + k) % 40) as u8 });
            }
        }
        labels.push(label);
    }
    fs::write(dir.join(format!("{prefix}-images.idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{prefix}-labels.idx1-ubyte")), labels).unwrap();
}

fn data_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "train", 40);
    write_idx(dir.path(), "t10k", 20);
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thinconv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn set(key: &str, value: impl AsRef<Path>) -> String {
    format!("{key}={}", value.as_ref().display())
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train".to_string(),
        "--set".into(),
        set("data_dir", data),
        "--set".into(),
        set("output_dir", out),
        "--set".into(),
        "epochs=1".into(),
        "--set".into(),
        "batch_size=8".into(),
    ];
    for e in extra {
        args.push("--set".into());
        args.push(e.to_string());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&refs)
}

fn report(dir: &Path) -> SparsifyReport {
    SparsifyReport::from_json(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn help_exits_zero_and_bad_usage_exits_one() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
}

#[test]
fn unknown_config_key_exits_one_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "# test\nseed = 1\nlearning_rate = 0.1\n").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let out = run(&["eval", "--set", "tau=2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--set", &set("data_dir", dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("t10k-images.idx3-ubyte"), [0u8, 0, 8, 1, 0, 0, 0, 0]).unwrap();
    fs::write(dir.path().join("t10k-labels.idx1-ubyte"), [0u8, 0, 8, 1, 0, 0, 0, 0]).unwrap();
    let out = run(&["eval", "--set", &set("data_dir", dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset"));
}

#[test]
fn train_writes_outputs_deterministically() {
    let data = data_dir();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(train(data.path(), a.path(), &["seed=4"]).status.success());
    assert!(train(data.path(), b.path(), &["seed=4"]).status.success());
    let ca = fs::read(a.path().join("model.ckpt")).unwrap();
    assert_eq!(ca, fs::read(b.path().join("model.ckpt")).unwrap());
    let r = report(a.path());
    let (layers, rows) = parse_epoch_csv(&fs::read_to_string(a.path().join("report.csv")).unwrap()).unwrap();
    assert_eq!(layers, vec![0, 2]);
    assert_eq!(rows, r.epochs);
}

#[test]
fn fixed_center_pattern_reports_four_percent() {
    let data = data_dir();
    let out = tempfile::tempdir().unwrap();
    assert!(train(data.path(), out.path(), &["pattern=center1"]).status.success());
    let r = report(out.path());
    assert_eq!(r.method, "fixed_pattern");
    for l in &r.layers {
        assert_eq!(l.density, 0.04);
        assert_eq!(l.speedup, Some(25.0));
    }
    let net = load_checkpoint(out.path().join("model.ckpt")).unwrap();
    for idx in net.conv_indices() {
        let c = net.conv(idx).unwrap();
        for t in 0..c.geometry.out_maps {
            for s in 0..c.geometry.in_maps {
                for i in 0..5 {
                    for j in 0..5 {
                        if (i, j) != (2, 2) {
                            assert_eq!(c.kernel.get(i, j, s, t).unwrap(), 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn sparsify_finetune_and_gradual() {
    let data = data_dir();
    let base = tempfile::tempdir().unwrap();
    assert!(train(data.path(), base.path(), &[]).status.success());
    let ckpt = base.path().join("model.ckpt");

    let missing = run(&["sparsify", "--set", &set("data_dir", data.path()), "--set", "checkpoint=/nonexistent.ckpt"]);
    assert_eq!(missing.status.code(), Some(2));

    let ft = tempfile::tempdir().unwrap();
    let out = run(&[
        "sparsify",
        "--set", &set("data_dir", data.path()),
        "--set", &set("checkpoint", &ckpt),
        "--set", &set("output_dir", ft.path()),
        "--set", "mode=finetune",
        "--set", "regularizer=l21",
        "--set", "tau=0.2",
        "--set", "epochs_reg=1",
        "--set", "epochs_ft=1",
        "--set", "batch_size=8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(ft.path());
    // conv1: 25 groups, floor(25·0.8) = 20 pruned; conv2: 500 groups, 400 pruned
    let live: Vec<usize> = r.layers.iter().map(|l| l.live_groups).collect();
    assert_eq!(live, vec![5, 100]);

    let gr = tempfile::tempdir().unwrap();
    let out = run(&[
        "sparsify",
        "--set", &set("data_dir", data.path()),
        "--set", &set("checkpoint", &ckpt),
        "--set", &set("output_dir", gr.path()),
        "--set", "mode=gradual",
        "--set", "stall_epochs=1",
        "--set", "max_epochs=2",
        "--set", "batch_size=8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(gr.path());
    assert_eq!(r.method, "gradual");
    assert!(r.baseline_val_accuracy.is_some());
    assert!(gr.path().join("pruned.json").exists());
}

#[test]
fn eval_matches_before_and_after_save() {
    let data = data_dir();
    let out = tempfile::tempdir().unwrap();
    assert!(train(data.path(), out.path(), &[]).status.success());
    let r = report(out.path());
    let ev = run(&[
        "eval",
        "--set", &set("data_dir", data.path()),
        "--set", &set("checkpoint", out.path().join("model.ckpt")),
    ]);
    assert!(ev.status.success());
    let text = String::from_utf8_lossy(&ev.stdout);
    assert!(text.contains(&format!("top-1 accuracy {:.4}", r.accuracy_after)), "{text}");
    assert!(text.contains("theoretical speedup 1.00x"));
}

#[test]
fn bench_writes_the_sweep() {
    let out = tempfile::tempdir().unwrap();
    let res = run(&[
        "bench",
        "--set", &set("output_dir", out.path()),
        "--set", "bench_d=3",
        "--set", "bench_in_maps=2",
        "--set", "bench_out_maps=4",
        "--set", "bench_width=6",
        "--set", "bench_height=6",
        "--set", "bench_repeats=2",
        "--set", "bench_warmup=0",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.path().join("bench.csv")).unwrap();
    let rows = thinconv::bench::parse_bench_csv(&csv).unwrap();
    assert_eq!(rows.len(), 20);
    assert_eq!(rows[19].theoretical_speedup, 1.0);
    assert_eq!(rows[9].theoretical_speedup, 2.0);
}
