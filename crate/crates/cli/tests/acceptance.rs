//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! `PASS`/`FAIL` line per criterion and exits nonzero if any failed.
//!
//! `EVAX_CRITERIA=2,3,9` restricts the run to the listed criteria.

#[path = "../../core/tests/primitive_gradients.rs"]
mod primitive_gradients;

#[path = "../../core/tests/pipeline_gradients.rs"]
mod pipeline_gradients;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use evax_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use evax_core::data::{self, synth_corpus, Split, SynthSpec, Task};
use evax_core::interpret;
use evax_core::metrics::{self, threshold_grid, ConfusionCounts};
use evax_core::mim::{apply_mask, mim_loss, pretrain_run, sample_mask, MaskPlan, PretrainConfig, ProjectionHead, Tokenizer};
use evax_core::optim::cosine_lr;
use evax_core::transfer::{finetune_cls, finetune_seg, llrd_scales, Classifier, FinetuneClsConfig, FinetuneSegConfig, LabelMode};
use evax_core::vit::{build_vit, TokenSequence};
use evax_core::{Category, Error, Preset, Rng, Tensor, ViTConfig};

type Verdict = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// 1 ------------------------------------------------------------------------

fn gradients() -> Verdict {
    let t = Instant::now();
    let mut failed = Vec::new();
    let checks = primitive_gradients::CHECKS.iter().chain(pipeline_gradients::CHECKS);
    let mut count = 0;
    for (name, check) in checks {
        count += 1;
        if catch_unwind(*check).is_err() {
            failed.push(*name);
        }
    }
    let elapsed = secs(t.elapsed());
    let detail = format!("{count} check groups x 20 seeds, {} failed, {elapsed:.1}s (limit 120s)", failed.len());
    ensure(failed.is_empty() && elapsed < 120.0, if failed.is_empty() { detail } else { format!("{detail}: {failed:?}") })
}

// 2 ------------------------------------------------------------------------

fn masking_contract() -> Verdict {
    let mut rng = Rng::new(2);
    for _ in 0..500 {
        let n = 4 + rng.below(400) as usize;
        let r = rng.uniform(0.05, 0.95);
        let expect = (n as f64 * r as f64).floor() as usize;
        if expect == 0 {
            continue;
        }
        let plan = sample_mask(n, r, &mut rng).map_err(|e| e.to_string())?;
        let mut idx = plan.indices.clone();
        idx.dedup();
        if plan.len() != expect || idx.len() != expect || idx.iter().any(|&i| i >= n) {
            return Err(format!("n={n} r={r}: {} masked, expected {expect}", plan.len()));
        }
    }
    let vit_b_masked = sample_mask(196, 0.3, &mut rng).unwrap().len();
    if vit_b_masked != 58 {
        return Err(format!("n=196 r=0.3 masked {vit_b_masked}"));
    }

    let model = build_vit(&ViTConfig::new(32, 1, 2, 64), 1).unwrap();
    let pos = model.params.by_name("pos_embed").unwrap().clone();
    let token = randn(&mut rng, &[32]);
    for _ in 0..20 {
        let seq = model.patchify(&randn(&mut rng, &[64, 64])).unwrap();
        let plan = sample_mask(16, 0.3, &mut rng).unwrap();
        let masked = apply_mask(&seq, &plan, &token, &pos).unwrap();
        let flags = plan.flags();
        for (i, &m) in flags.iter().enumerate() {
            let row = |t: &Tensor| t.data()[(i + 1) * 32..(i + 2) * 32].to_vec();
            if !m && row(&masked.tokens) != row(&seq.tokens) {
                return Err(format!("unmasked token {i} changed"));
            }
        }
        if masked.tokens.data()[..32] != seq.tokens.data()[..32] {
            return Err("class token changed".into());
        }
    }

    let (d, dt, n) = (6, 4, 9);
    let mut worst_zero = 0f32;
    for _ in 0..200 {
        let z = randn(&mut rng, &[n, d]);
        let proj = ProjectionHead {
            w: randn(&mut rng, &[d, dt]),
            b: randn(&mut rng, &[dt]),
        };
        let plan = sample_mask(n, 0.5, &mut rng).unwrap();
        let zs = TokenSequence::new(z.clone(), (3, 3), false).unwrap();
        let random_t = TokenSequence::new(randn(&mut rng, &[n, dt]), (3, 3), false).unwrap();
        let l = mim_loss(&zs, &random_t, &plan, &proj).unwrap();
        if !(0.0..=2.0).contains(&l) || l <= 1e-6 {
            return Err(format!("loss {l} for unrelated targets"));
        }
        // targets equal to the projected student features
        let mut exact = vec![0f32; n * dt];
        for i in 0..n {
            for j in 0..dt {
                let mut s = proj.b.data()[j] as f64;
                for k in 0..d {
                    s += z.data()[i * d + k] as f64 * proj.w.data()[k * dt + j] as f64;
                }
                exact[i * dt + j] = s as f32;
            }
        }
        let ts = TokenSequence::new(Tensor::new(vec![n, dt], exact).unwrap(), (3, 3), false).unwrap();
        worst_zero = worst_zero.max(mim_loss(&zs, &ts, &plan, &proj).unwrap().abs());
    }
    let all = MaskPlan::new((0..4).collect(), 4).unwrap();
    let one = TokenSequence::new(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), (2, 2), false).unwrap();
    let flip = TokenSequence::new(Tensor::new(vec![4, 1], vec![-1.0, -2.0, -3.0, -4.0]).unwrap(), (2, 2), false).unwrap();
    let id = ProjectionHead {
        w: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        b: Tensor::zeros(vec![1]),
    };
    let opposite = mim_loss(&one, &flip, &all, &id).unwrap();
    ensure(
        worst_zero < 1e-6 && (opposite - 2.0).abs() < 1e-6,
        format!("counts exact (196 @ 0.3 -> {vit_b_masked}), unmasked rows bitwise equal, loss in [0,2], max loss at equality {worst_zero:.1e}"),
    )
}

// 3 ------------------------------------------------------------------------

fn pairwise_auc(scores: &[f32], labels: &[bool]) -> f64 {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1;
                twice_wins += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

fn metric_oracles() -> Verdict {
    let mut rng = Rng::new(3);
    let mut auc_cases = 0;
    while auc_cases < 200 {
        let n = 2 + rng.below(60) as usize;
        // coarse scores so ties are common
        let scores: Vec<f32> = (0..n).map(|_| rng.below(12) as f32 * 0.25).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let got = metrics::roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = pairwise_auc(&scores, &labels) as f32;
        if got != want {
            return Err(format!("roc_auc {got} vs pairwise {want} on case {auc_cases}"));
        }
        auc_cases += 1;
    }
    let mut worst = 0f64;
    for _ in 0..1000 {
        let n = 1 + rng.below(300) as usize;
        let (ps, pg) = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));
        let s: Vec<bool> = (0..n).map(|_| rng.bernoulli(ps)).collect();
        let g: Vec<bool> = (0..n).map(|_| rng.bernoulli(pg)).collect();
        let d = metrics::dice(&s, &g).unwrap();
        let j = metrics::jaccard(&s, &g).unwrap();
        worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    let mut acc_cases = 0;
    for _ in 0..200 {
        let n = 1 + rng.below(500) as usize;
        let p: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
        let t: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.3)).collect();
        let direct = p.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / n as f64;
        let c = ConfusionCounts::from_predictions(&p, &t).unwrap();
        if metrics::accuracy(&c).unwrap() != direct as f32 {
            return Err(format!("accuracy differs from direct count on n={n}"));
        }
        acc_cases += 1;
    }
    ensure(
        worst <= 1e-12,
        format!("AUC exact on {auc_cases} cases, |D - 2J/(1+J)| max {worst:.1e} over 1000 pairs, accuracy exact on {acc_cases} cases"),
    )
}

// 4 ------------------------------------------------------------------------

fn convergence(root: &Path) -> Verdict {
    let spec = SynthSpec::new(Task::Cls, 8, 64);
    let manifest = synth_corpus(&spec, 1, root.join("c4_data")).map_err(|e| e.to_string())?;
    let tok = Tokenizer::random(&ViTConfig::preset(Preset::Micro, 64), 99).unwrap();
    tok.save(root.join("c4_tok.evax")).unwrap();
    let cfg = PretrainConfig {
        manifest,
        tokenizer_ckpt: root.join("c4_tok.evax"),
        preset: Preset::Micro,
        image_size: 64,
        epochs: 500,
        batch_size: 8,
        crop_scale_min: 1.0,
        hflip_prob: 0.0,
        cache_size: 64,
        ..Default::default()
    };
    let t = Instant::now();
    let a = pretrain_run(&cfg, &root.join("c4_a")).map_err(|e| e.to_string())?;
    let elapsed = secs(t.elapsed());
    let b = pretrain_run(&cfg, &root.join("c4_b")).map_err(|e| e.to_string())?;
    let steps = a.curve.len();
    let first = a.curve[0].loss;
    let tail = a.curve[steps - 10..].iter().map(|p| p.loss).sum::<f32>() / 10.0;
    let same = a.curve.len() == b.curve.len() && a.curve.iter().zip(&b.curve).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits());
    ensure(
        steps == 500 && tail <= 0.1 * first && elapsed < 300.0 && same,
        format!(
            "{steps} steps, loss {first:.4} -> {tail:.4} (last-10 mean, ratio {:.3}, need <= 0.1), {elapsed:.0}s (limit 300s), rerun bitwise {}",
            tail / first,
            if same { "identical" } else { "DIFFERENT" }
        ),
    )
}

// 5 ------------------------------------------------------------------------

/// Micro backbone pre-trained on 1000 unlabeled 64px images, shared by
/// criteria 5 and 7.
fn pretrained(root: &Path) -> std::result::Result<PathBuf, String> {
    let path = root.join("c5_pt/checkpoints/pretrain.evax");
    if path.exists() {
        return Ok(path);
    }
    let mut pspec = SynthSpec::new(Task::Cls, 1000, 64);
    pspec.radius = (20.0, 20.0);
    pspec.noise = 0.05;
    let pre_manifest = synth_corpus(&pspec, 1001, root.join("c5_pre")).map_err(|e| e.to_string())?;
    Tokenizer::random(&ViTConfig::preset(Preset::Micro, 64), 99)
        .unwrap()
        .save(root.join("c5_tok.evax"))
        .unwrap();
    let pcfg = PretrainConfig {
        manifest: pre_manifest,
        tokenizer_ckpt: root.join("c5_tok.evax"),
        preset: Preset::Micro,
        image_size: 64,
        epochs: 50,
        batch_size: 32,
        mask_ratio: 0.5,
        crop_scale_min: 0.5,
        cache_size: 64,
        ..Default::default()
    };
    pretrain_run(&pcfg, &root.join("c5_pt")).map(|o| o.checkpoint).map_err(|e| e.to_string())
}

fn transfer(root: &Path) -> Verdict {
    let t = Instant::now();
    let mut spec = SynthSpec::new(Task::Cls, 400, 64);
    spec.radius = (20.0, 20.0);
    spec.noise = 0.05;
    let manifest = synth_corpus(&spec, 7, root.join("c5_cls")).map_err(|e| e.to_string())?;
    let pre = pretrained(root)?;
    let run = |name: &str, ckpt: Option<&Path>, fraction: f64| {
        let cfg = FinetuneClsConfig {
            manifest: manifest.clone(),
            ckpt: ckpt.map(Path::to_path_buf),
            preset: Preset::Micro,
            image_size: 64,
            epochs: 30,
            batch_size: 8,
            label_mode: LabelMode::Single,
            data_fraction: fraction,
            cache_size: 64,
            crop_scale_min: 0.7,
            base_lr: 1e-3,
            ..Default::default()
        };
        finetune_cls(&cfg, &root.join(format!("c5_{name}"))).map(|o| o.held_out)
    };
    let full = run("full", Some(pre.as_path()), 1.0).map_err(|e| e.to_string())?;
    let tenth = run("tenth", Some(pre.as_path()), 0.1).map_err(|e| e.to_string())?;
    let scratch = run("scratch", None, 0.1).map_err(|e| e.to_string())?;
    let elapsed = secs(t.elapsed());
    let mauc = full.mauc.unwrap_or(0.0);
    let gap = (tenth.accuracy - scratch.accuracy) * 100.0;
    ensure(
        full.accuracy >= 0.95 && mauc >= 0.99 && tenth.accuracy >= 0.85 && gap >= 5.0 && elapsed < 600.0,
        format!(
            "full data acc {:.3} mAUC {mauc:.4}; 10% acc {:.3} (pre-trained) vs {:.3} (random), gap {gap:.1} pts; {elapsed:.0}s (limit 600s)",
            full.accuracy, tenth.accuracy, scratch.accuracy
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn segmentation(root: &Path) -> Verdict {
    let t = Instant::now();
    let mut spec = SynthSpec::new(Task::Seg, 16, 128);
    spec.train_fraction = 1.0;
    spec.val_fraction = 0.0;
    let manifest = synth_corpus(&spec, 5, root.join("c6_seg")).map_err(|e| e.to_string())?;
    let cfg = FinetuneSegConfig {
        manifest,
        preset: Preset::Micro,
        image_size: 128,
        iterations: 1000,
        batch_size: 4,
        base_lr: 1e-3,
        decoder_channels: 32,
        eval_interval: 250,
        hflip_prob: 0.0,
        llrd: 1.0,
        ..Default::default()
    };
    let o = finetune_seg(&cfg, &root.join("c6_run")).map_err(|e| e.to_string())?;
    let elapsed = secs(t.elapsed());
    ensure(
        o.train.dice >= 0.90 && elapsed < 600.0,
        format!("16 pairs at 128px, 1000 iterations: train Dice {:.4} (need >= 0.90), {elapsed:.0}s (limit 600s)", o.train.dice),
    )
}

// 7 ------------------------------------------------------------------------

fn localization(root: &Path) -> Verdict {
    let t = Instant::now();
    let pre = pretrained(root)?;
    // half of the classifier corpus is lesion-free so the head learns what
    // a lesion looks like against plain background
    let mut spec = SynthSpec::new(Task::Cls, 400, 64);
    spec.radius = (16.0, 20.0);
    spec.noise = 0.05;
    spec.empty_fraction = 0.5;
    let manifest = synth_corpus(&spec, 3, root.join("c7_cls")).map_err(|e| e.to_string())?;
    spec.task = Task::Loc;
    spec.empty_fraction = 0.0;
    let loc = synth_corpus(&spec, 3, root.join("c7_loc")).map_err(|e| e.to_string())?;
    let cfg = FinetuneClsConfig {
        manifest,
        ckpt: Some(pre),
        preset: Preset::Micro,
        image_size: 64,
        epochs: 30,
        batch_size: 8,
        label_mode: LabelMode::Multi,
        cache_size: 64,
        crop_scale_min: 0.7,
        base_lr: 1e-3,
        ..Default::default()
    };
    let o = finetune_cls(&cfg, &root.join("c7_ft")).map_err(|e| e.to_string())?;
    let (model, meta) = Classifier::load(&o.checkpoint).map_err(|e| e.to_string())?;
    let names: Vec<String> = meta.meta("label_names").map_err(|e| e.to_string())?;
    let mean: f32 = meta.meta("norm_mean").map_err(|e| e.to_string())?;
    let std: f32 = meta.meta("norm_std").map_err(|e| e.to_string())?;
    let loc = data::load_manifest(&loc).map_err(|e| e.to_string())?;
    let samples = interpret::cam_samples(&model, &names, &loc, Split::Test, mean, std, None).map_err(|e| e.to_string())?;
    let r = interpret::localize(&samples, &threshold_grid(11)).map_err(|e| e.to_string())?;
    let elapsed = secs(t.elapsed());
    ensure(
        r.pointing >= 0.9 && r.best_iou >= 0.3,
        format!(
            "{} boxes: pointing {:.3} (need >= 0.9), IoU {:.3} at t*={:.2} (need >= 0.3); classifier mAUC {:.3}; {elapsed:.0}s",
            samples.len(),
            r.pointing,
            r.best_iou,
            r.best_t,
            o.held_out.mauc.unwrap_or(0.0)
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn serialization(root: &Path) -> Verdict {
    let mut rng = Rng::new(8);
    let mut ck = Checkpoint::new();
    for (i, shape) in [vec![3usize, 5], vec![7], vec![2, 1, 4, 4], vec![0]].into_iter().enumerate() {
        let mut t = randn(&mut rng, &shape);
        if let Some(v) = t.data_mut().first_mut() {
            *v = f32::from_bits(0x7fc0_0001); // a NaN payload must survive too
        }
        ck.push(format!("t{i}"), t);
    }
    ck.set_meta("note", &"acceptance");
    let path = root.join("c8.evax");
    save_checkpoint(&ck, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let same = ck.iter().count() == back.iter().count()
        && ck.iter().zip(back.iter()).all(|((na, a), (nb, b))| {
            na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let bytes = ck.to_bytes();
    let same_bytes = std::fs::read(&path).unwrap() == bytes && back.to_bytes() == bytes;

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_meta_len = bytes.clone();
    bad_meta_len[8..16].copy_from_slice(&(u64::MAX / 2).to_le_bytes());
    let truncated = bytes[..bytes.len() - 3].to_vec();
    let mut bad_version = bytes.clone();
    bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
    let cases: [(&str, Vec<u8>, fn(&Error) -> bool); 4] = [
        ("magic", bad_magic, |e| matches!(e, Error::BadMagic)),
        ("metadata length", bad_meta_len, |e| matches!(e, Error::Truncated)),
        ("payload size", truncated, |e| matches!(e, Error::Truncated)),
        ("version", bad_version, |e| matches!(e, Error::VersionMismatch { .. })),
    ];
    let mut outcomes = Vec::new();
    let mut all_ok = true;
    for (name, b, want) in cases {
        match Checkpoint::from_bytes(&b) {
            Err(e) => {
                let ok = want(&e) && e.category() == Category::Data;
                all_ok &= ok;
                outcomes.push(format!("{name} -> {e:?} ({:?})", e.category()));
            }
            Ok(_) => {
                all_ok = false;
                outcomes.push(format!("{name} -> accepted"));
            }
        }
    }
    ensure(
        same && same_bytes && all_ok,
        format!("round trip bitwise {}; {}", if same && same_bytes { "identical" } else { "DIFFERENT" }, outcomes.join("; ")),
    )
}

// 9 ------------------------------------------------------------------------

fn schedules() -> Verdict {
    let total = 1000;
    let start = cosine_lr(0, total, 3e-4, 1e-6).unwrap();
    let mid = cosine_lr(total / 2, total, 3e-4, 0.0).unwrap();
    let end = cosine_lr(total, total, 3e-4, 1e-6).unwrap();
    let cos_ok = start == 3e-4 && mid == 1.5e-4 && end == 1e-6;
    let mut llrd_ok = true;
    let mut shown = Vec::new();
    for (decay, blocks) in [(0.55f32, 12usize), (0.85, 12)] {
        let scales = llrd_scales(blocks, decay);
        // embedding, blocks, head: the head group keeps the base rate
        let mut want = vec![0f64; blocks + 2];
        let mut v = 1.0f64;
        for w in want.iter_mut().rev() {
            *w = v;
            v *= decay as f64;
        }
        llrd_ok &= scales.len() == blocks + 2 && scales.iter().zip(&want).all(|(&s, &w)| s == w as f32);
        shown.push(format!("{decay}: embed {:.3e}, head {}", scales[0], scales[blocks + 1]));
    }
    ensure(
        cos_ok && llrd_ok,
        format!("cosine {start:e} -> {mid:e} -> {end:e}; LLRD {}", shown.join(", ")),
    )
}

// 10 -----------------------------------------------------------------------

fn evax(args: &[&str]) -> std::result::Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_evax"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("evax {}: {}", args.first().unwrap_or(&""), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn determinism(root: &Path) -> Verdict {
    let p = |x: &Path| x.to_string_lossy().into_owned();
    let corpus = root.join("c10_corpus");
    evax(&["synth", "--task", "cls", "--count", "24", "--image-size", "32", "--seed", "4", "--out", &p(&corpus)])?;
    let manifest = p(&corpus.join("manifest.csv"));
    let tok = root.join("c10_tok");
    evax(&["init-tokenizer", "--preset", "micro", "--image-size", "32", "--out", &p(&tok)])?;
    let tok = p(&tok.join("checkpoints/tokenizer.evax"));
    let pretrain = |dir: &Path| {
        evax(&[
            "pretrain", "--preset", "micro", "--manifest", &manifest, "--tokenizer-ckpt", &tok, "--seed", "13", "--threads", "1",
            "--set", "image_size=32", "--set", "cache_size=32", "--set", "epochs=3", "--set", "batch_size=4", "--out", &p(dir),
        ])
    };
    pretrain(&root.join("c10_pt_a"))?;
    pretrain(&root.join("c10_pt_b"))?;
    let curve = |d: &str| std::fs::read(root.join(d).join("reports/loss_curve.csv")).unwrap_or_default();
    let curves_same = !curve("c10_pt_a").is_empty() && curve("c10_pt_a") == curve("c10_pt_b");

    let ckpt = p(&root.join("c10_pt_a/checkpoints/pretrain.evax"));
    let finetune = |dir: &Path| {
        evax(&[
            "finetune-cls", "--preset", "micro", "--manifest", &manifest, "--ckpt", &ckpt, "--seed", "13", "--threads", "1",
            "--set", "image_size=32", "--set", "cache_size=32", "--set", "epochs=3", "--set", "batch_size=4", "--out", &p(dir),
        ])
    };
    let sa = finetune(&root.join("c10_ft_a"))?;
    let sb = finetune(&root.join("c10_ft_b"))?;
    let metrics = |d: &str| std::fs::read(root.join(d).join("reports/metrics.csv")).unwrap_or_default();
    let summary = |out: &str| serde_json::from_str::<serde_json::Value>(out).ok().map(|v| v["metrics"].clone());
    let metrics_same = !metrics("c10_ft_a").is_empty()
        && metrics("c10_ft_a") == metrics("c10_ft_b")
        && summary(&sa).is_some()
        && summary(&sa) == summary(&sb);
    ensure(
        curves_same && metrics_same,
        format!(
            "pretrain loss curves {}, finetune-cls metrics {} (--threads 1)",
            if curves_same { "bitwise identical" } else { "DIFFER" },
            if metrics_same { "bitwise identical" } else { "DIFFER" }
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<Vec<usize>> = std::env::var("EVAX_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        (1, "gradient correctness", Box::new(gradients)),
        (2, "masking and objective contract", Box::new(masking_contract)),
        (3, "metric oracle equivalence", Box::new(metric_oracles)),
        (4, "pre-training convergence", Box::new(|| convergence(root))),
        (5, "transfer label efficiency", Box::new(|| transfer(root))),
        (6, "segmentation overfit", Box::new(|| segmentation(root))),
        (7, "localization", Box::new(|| localization(root))),
        (8, "checkpoint serialization", Box::new(|| serialization(root))),
        (9, "schedules", Box::new(schedules)),
        (10, "CLI determinism", Box::new(|| determinism(root))),
    ];
    let mut failures = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        let line = format!("criterion {n:>2} {tag} [{name}] {detail} ({:.1}s)\n", secs(t.elapsed()));
        let _ = std::io::stdout().write_all(line.as_bytes());
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
