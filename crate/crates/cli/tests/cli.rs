use std::path::Path;
use std::process::Command;

use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn evax(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_evax"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn evax");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) -> Value {
    let r = evax(args);
    assert_eq!(r.code, 0, "evax {args:?} failed: {}", r.stderr);
    serde_json::from_str(r.stdout.trim()).expect("json summary")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn last_line(s: &str) -> &str {
    s.lines().last().unwrap_or("")
}

#[test]
fn synth_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let v = ok(&["synth", "--task", "cls", "--count", "8", "--seed", "1", "--out", p(&d)]);
    assert_eq!(v["count"], 8);
    assert!(d.join("manifest.csv").exists());
    assert_eq!(std::fs::read_dir(d.join("images")).unwrap().count(), 8);
    let s = ok(&["stats", "--manifest", p(&d.join("manifest.csv"))]);
    assert_eq!(s["rows"], 8);
    assert!(s["std"].as_f64().unwrap() > 0.0);
}

#[test]
fn usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let r = evax(&["frobnicate"]);
    assert_eq!(r.code, 2);
    assert!(last_line(&r.stderr).starts_with("evax: usage error"), "{}", r.stderr);
    let r = evax(&["pretrain", "--out", p(dir.path()), "--bogus-flag", "1"]);
    assert_eq!(r.code, 2);

    let r = evax(&["pretrain", "--out", p(&dir.path().join("a")), "--manifest", "m.csv"]);
    assert_eq!(r.code, 3);
    assert!(last_line(&r.stderr).contains("config error") && r.stderr.contains("tokenizer_ckpt"), "{}", r.stderr);

    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "mask_ratio = 1.5\ntokenizer_ckpt = t.evax\nmanifest = m.csv\n").unwrap();
    let r = evax(&["pretrain", "--out", p(&dir.path().join("b")), "--config", p(&cfg)]);
    assert_eq!(r.code, 3);
    assert!(last_line(&r.stderr).contains("`mask_ratio`"), "{}", r.stderr);

    std::fs::write(&cfg, "mask_ratoi = 0.3\n").unwrap();
    let r = evax(&["pretrain", "--out", p(&dir.path().join("c")), "--config", p(&cfg)]);
    assert_eq!(r.code, 3);
    assert!(last_line(&r.stderr).contains("`mask_ratoi`: unknown key"), "{}", r.stderr);

    let r = evax(&["finetune-cls", "--out", p(&dir.path().join("d")), "--mask-ratio", "0.3"]);
    assert_eq!(r.code, 3, "{}", r.stderr);

    let r = evax(&["stats", "--manifest", p(&dir.path().join("missing.csv"))]);
    assert_eq!(r.code, 4, "{}", r.stderr);
    assert_eq!(r.stderr.lines().filter(|l| l.starts_with("evax:")).count(), 1);
}

fn small_corpus(dir: &Path, task: &str, count: &str, size: &str) -> String {
    let out = dir.join(format!("{task}_corpus"));
    ok(&["synth", "--task", task, "--count", count, "--seed", "3", "--image-size", size, "--out", p(&out)]);
    out.join("manifest.csv").to_string_lossy().into_owned()
}

#[test]
fn train_eval_and_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = small_corpus(root, "cls", "20", "32");
    let tok_dir = root.join("tok");
    ok(&["init-tokenizer", "--preset", "micro", "--image-size", "32", "--seed", "5", "--out", p(&tok_dir)]);
    let tok = tok_dir.join("checkpoints/tokenizer.evax");

    let cfg = root.join("pt.cfg");
    std::fs::write(&cfg, "epochs = 2\nbatch_size = 4\nimage_size = 32\ncache_size = 32\nseed = 3\n").unwrap();
    let pt = root.join("pt");
    let v = ok(&[
        "pretrain", "--config", p(&cfg), "--seed", "9", "--preset", "micro", "--manifest", &manifest,
        "--tokenizer-ckpt", p(&tok), "--out", p(&pt),
    ]);
    assert_eq!(v["steps"], 10);
    for sub in ["checkpoints/pretrain.evax", "reports/loss_curve.csv", "figures", "config.resolved"] {
        assert!(pt.join(sub).exists(), "{sub}");
    }
    let resolved: Value = serde_json::from_str(&std::fs::read_to_string(pt.join("config.resolved")).unwrap()).unwrap();
    assert_eq!(resolved["config"]["seed"], 9);
    assert_eq!(resolved["config"]["mask_ratio"], 0.3);
    assert!(resolved["tool_version"].as_str().unwrap().starts_with("evax "));

    // rerun from the recorded config
    let again = root.join("pt_again");
    ok(&["pretrain", "--config", p(&pt.join("config.resolved")), "--out", p(&again)]);
    assert_eq!(
        std::fs::read(pt.join("reports/loss_curve.csv")).unwrap(),
        std::fs::read(again.join("reports/loss_curve.csv")).unwrap()
    );

    let ft = root.join("ft");
    let v = ok(&[
        "finetune-cls", "--preset", "micro", "--manifest", &manifest, "--ckpt", p(&pt.join("checkpoints/pretrain.evax")),
        "--set", "image_size=32", "--set", "cache_size=32", "--set", "epochs=2", "--set", "batch_size=4",
        "--set", "label_mode=single", "--out", p(&ft),
    ]);
    assert!(ft.join("reports/metrics.csv").exists());
    let ckpt = ft.join("checkpoints/finetune_cls.evax");
    let e = ok(&["eval-cls", "--ckpt", p(&ckpt), "--manifest", &manifest, "--split", "test"]);
    assert_eq!(e["metrics"], v["metrics"]);

    let loc = small_corpus(root, "loc", "20", "32");
    let cam = root.join("cam");
    let c = ok(&["cam", "--ckpt", p(&ckpt), "--manifest", &loc, "--thresholds", "6", "--out", p(&cam)]);
    let csv = std::fs::read_to_string(cam.join("reports/localization.csv")).unwrap();
    let grid: Vec<f32> = csv
        .lines()
        .skip(1)
        .take_while(|l| !l.starts_with("ap25"))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(grid, evax_core::metrics::threshold_grid(6), "{csv}");
    assert_eq!(std::fs::read_dir(cam.join("figures")).unwrap().count(), c["samples"].as_u64().unwrap() as usize);

    let attn = root.join("attn");
    let img = Path::new(&manifest).parent().unwrap().join("images/img_00000.png");
    ok(&["attn", "--ckpt", p(&ckpt), "--image", p(&img), "--point", "5,7", "--point", "20,20", "--out", p(&attn)]);
    assert_eq!(std::fs::read_dir(attn.join("figures")).unwrap().count(), 2);
    let r = evax(&["attn", "--ckpt", p(&ckpt), "--image", p(&img), "--point", "32,0", "--out", p(&attn)]);
    assert_eq!(r.code, 3, "{}", r.stderr);
}

#[test]
fn segmentation_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = small_corpus(root, "seg", "10", "64");
    let out = root.join("seg");
    let v = ok(&[
        "finetune-seg", "--preset", "micro", "--manifest", &manifest, "--set", "image_size=64", "--set", "iterations=6",
        "--set", "eval_interval=3", "--set", "decoder_channels=8", "--out", p(&out),
    ]);
    let ckpt = out.join("checkpoints/finetune_seg.evax");
    let e = ok(&["eval-seg", "--ckpt", p(&ckpt), "--manifest", &manifest, "--split", "val", "--out", p(&root.join("ev"))]);
    assert_eq!(e["metrics"], v["val"]);
    let preds = std::fs::read_dir(root.join("ev/figures")).unwrap().count();
    assert_eq!(preds, e["metrics"]["count"].as_u64().unwrap() as usize);
}
