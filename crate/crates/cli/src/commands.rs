use std::path::Path;

use evax_core::data::{self, SynthSpec, UncertainPolicy};
use evax_core::interpret::{self, Heatmap};
use evax_core::metrics;
use evax_core::mim::{self, PretrainConfig, Tokenizer};
use evax_core::transfer::{self, Classifier, FinetuneClsConfig, FinetuneSegConfig, PretrainedBackbone};
use evax_core::vit::build_vit;
use evax_core::{Error, Preset, Result, Split, Task, ViTConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{self, write_resolved};
use crate::{AttnArgs, CamArgs, EvalClsArgs, EvalSegArgs, InitTokenizerArgs, StatsArgs, SynthArgs, TrainArgs};

fn check_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::config("threads", "must be at least 1"));
    }
    if threads > 1 {
        log::warn!("--threads {threads}: compute is single-threaded, running on one thread");
    }
    Ok(())
}

fn run_dirs(out: &Path) -> Result<()> {
    for sub in ["checkpoints", "reports", "figures"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(d, e))?;
    }
    Ok(())
}

fn flag_overrides(a: &TrainArgs) -> Result<Map<String, Value>> {
    let mut m = config::parse_sets(&a.set)?;
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(k.into(), v);
        }
    };
    put("seed", a.seed.map(Value::from));
    put("preset", a.preset.as_ref().map(|p| Value::from(p.to_ascii_lowercase())));
    put("data_fraction", a.data_fraction.map(Value::from));
    put("mask_ratio", a.mask_ratio.map(Value::from));
    put("crop_scale_min", a.crop_scale_min.map(Value::from));
    put("tokenizer_ckpt", a.tokenizer_ckpt.as_ref().map(|p| Value::from(p.to_string_lossy())));
    put("ckpt", a.ckpt.as_ref().map(|p| Value::from(p.to_string_lossy())));
    put("manifest", a.manifest.as_ref().map(|p| Value::from(p.to_string_lossy())));
    Ok(m)
}

fn resolve_train<T: Serialize + DeserializeOwned + Default>(a: &TrainArgs, command: &str) -> Result<T> {
    check_threads(a.threads)?;
    let file = match &a.config {
        Some(p) => config::read_config_file(p, command)?,
        None => Map::new(),
    };
    config::resolve(&file, &flag_overrides(a)?)
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string(v).expect("json"));
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(v).expect("json") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn pretrain(a: &TrainArgs) -> Result<()> {
    let cfg: PretrainConfig = resolve_train(a, "pretrain")?;
    cfg.validate()?;
    write_resolved(&a.out, "pretrain", a.threads, &cfg)?;
    run_dirs(&a.out)?;
    let o = mim::pretrain_run(&cfg, &a.out)?;
    let first = o.curve.first().map(|p| p.loss);
    let last = o.curve.last().map(|p| p.loss);
    print_json(&json!({
        "checkpoint": o.checkpoint,
        "loss_curve": o.loss_curve_csv,
        "steps": o.curve.len(),
        "initial_loss": first,
        "final_loss": last,
    }));
    Ok(())
}

pub fn finetune_cls(a: &TrainArgs) -> Result<()> {
    let cfg: FinetuneClsConfig = resolve_train(a, "finetune-cls")?;
    cfg.validate()?;
    write_resolved(&a.out, "finetune-cls", a.threads, &cfg)?;
    run_dirs(&a.out)?;
    let o = transfer::finetune_cls(&cfg, &a.out)?;
    print_json(&json!({
        "checkpoint": o.checkpoint,
        "report": o.report,
        "best_epoch": o.best_epoch,
        "split": o.held_out_split.as_str(),
        "metrics": o.held_out,
    }));
    Ok(())
}

pub fn finetune_seg(a: &TrainArgs) -> Result<()> {
    let cfg: FinetuneSegConfig = resolve_train(a, "finetune-seg")?;
    cfg.validate()?;
    write_resolved(&a.out, "finetune-seg", a.threads, &cfg)?;
    run_dirs(&a.out)?;
    let o = transfer::finetune_seg(&cfg, &a.out)?;
    print_json(&json!({
        "checkpoint": o.checkpoint,
        "report": o.report,
        "best_iteration": o.best_iteration,
        "train": o.train,
        "val": o.val,
    }));
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|_| Error::config("split", format!("`{s}` is not one of train, val, test")))
}

pub fn eval_cls(a: &EvalClsArgs) -> Result<()> {
    check_threads(a.threads)?;
    let split = parse_split(&a.split)?;
    let policy: UncertainPolicy = a.uncertain.parse()?;
    let m = transfer::eval_cls(&a.ckpt, &a.manifest, split, policy, a.cache_size)?;
    let doc = json!({"split": split.as_str(), "metrics": m});
    if let Some(out) = &a.out {
        write_resolved(out, "eval-cls", a.threads, a)?;
        run_dirs(out)?;
        write_json(&out.join("reports").join("metrics.json"), &doc)?;
    }
    print_json(&doc);
    Ok(())
}

pub fn eval_seg(a: &EvalSegArgs) -> Result<()> {
    check_threads(a.threads)?;
    let split = parse_split(&a.split)?;
    let pred_dir = a.out.as_ref().map(|o| o.join("figures"));
    if let Some(out) = &a.out {
        write_resolved(out, "eval-seg", a.threads, a)?;
        run_dirs(out)?;
    }
    let m = transfer::eval_seg(&a.ckpt, &a.manifest, split, pred_dir.as_deref())?;
    let doc = json!({"split": split.as_str(), "metrics": m});
    if let Some(out) = &a.out {
        write_json(&out.join("reports").join("metrics.json"), &doc)?;
    }
    print_json(&doc);
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

pub fn cam(a: &CamArgs) -> Result<()> {
    check_threads(a.threads)?;
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(Error::config("alpha", format!("{} is outside [0, 1]", a.alpha)));
    }
    if a.thresholds == 0 {
        return Err(Error::config("thresholds", "need at least one threshold"));
    }
    let split = parse_split(&a.split)?;
    let (model, meta) = Classifier::load(&a.ckpt)?;
    let names: Vec<String> = meta.meta("label_names")?;
    let (mean, std): (f32, f32) = (meta.meta("norm_mean")?, meta.meta("norm_std")?);
    let manifest = data::load_manifest(&a.manifest)?;
    write_resolved(&a.out, "cam", a.threads, a)?;
    run_dirs(&a.out)?;
    let figures = a.out.join("figures");
    if manifest.task == Task::Loc {
        let samples = interpret::cam_samples(&model, &names, &manifest, split, mean, std, a.block)?;
        for s in &samples {
            let path = figures.join(format!("{}_{}.png", stem(&s.path), names[s.class]));
            interpret::render_heatmap(&s.heatmap.normalized, &s.image, path, a.alpha)?;
        }
        let r = interpret::localize(&samples, &metrics::threshold_grid(a.thresholds))?;
        let csv = a.out.join("reports").join("localization.csv");
        metrics::write_localization_csv(&csv, &r)?;
        let constant = samples.iter().filter(|s| s.heatmap.constant).count();
        print_json(&json!({
            "samples": samples.len(),
            "constant_maps": constant,
            "best_threshold": r.best_t,
            "best_mean_iou": r.best_iou,
            "pointing": r.pointing,
            "ap25": r.ap25,
            "ap50": r.ap50,
            "report": csv,
        }));
        return Ok(());
    }
    let classes: Vec<usize> = match &a.class {
        Some(c) => vec![names
            .iter()
            .position(|n| n == c)
            .ok_or_else(|| Error::config("class", format!("`{c}` is not one of {}", names.join(", "))))?],
        None => (0..names.len()).collect(),
    };
    let size = model.vit.cfg.image_size;
    let mut written = 0;
    for row in manifest.split(split) {
        let image = data::decode_image(&row.path)?;
        let x = data::normalize(&data::resize_bilinear(&image, size, size)?, mean, std)?;
        for &c in &classes {
            let hm = interpret::grad_cam(&model, &x, c, a.block, Some((image.height(), image.width())))?;
            let path = figures.join(format!("{}_{}.png", stem(&row.path), names[c]));
            interpret::render_heatmap(&hm.normalized, &image, path, a.alpha)?;
            written += 1;
        }
    }
    print_json(&json!({"figures": written}));
    Ok(())
}

fn parse_point(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config("point", format!("`{s}` is not `y,x`"));
    let (y, x) = s.split_once(',').ok_or_else(bad)?;
    Ok((y.trim().parse().map_err(|_| bad())?, x.trim().parse().map_err(|_| bad())?))
}

pub fn attn(a: &AttnArgs) -> Result<()> {
    check_threads(a.threads)?;
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(Error::config("alpha", format!("{} is outside [0, 1]", a.alpha)));
    }
    let points = a.points.iter().map(|p| parse_point(p)).collect::<Result<Vec<_>>>()?;
    let bb = PretrainedBackbone::load(&a.ckpt)?;
    let mut model = build_vit(&bb.cfg, 0)?;
    bb.apply(&model.vit, &mut model.params)?;
    let block = a.block.unwrap_or(bb.cfg.depth - 1);
    let image = data::decode_image(&a.image)?;
    let (h, w) = (image.height(), image.width());
    let (mean, std) = match bb.norm {
        Some(n) => n,
        None => data::pixel_stats([&image])?,
    };
    let size = bb.cfg.image_size;
    let x = data::normalize(&data::resize_bilinear(&image, size, size)?, mean, std)?;
    write_resolved(&a.out, "attn", a.threads, a)?;
    run_dirs(&a.out)?;
    let mut written = vec![];
    for (i, &(y, xp)) in points.iter().enumerate() {
        if y >= h || xp >= w {
            return Err(Error::config("point", format!("({y}, {xp}) is outside the {h}x{w} image")));
        }
        let q = (y * size / h, xp * size / w);
        let map = interpret::attention_query_map(&model.vit, &model.params, &x, q, block)?;
        let hm = Heatmap::from_grid(map.grid, h, w)?;
        let path = a.out.join("figures").join(format!("attn_{i}_y{y}_x{xp}.png"));
        interpret::render_heatmap(&hm.normalized, &image, &path, a.alpha)?;
        written.push(path);
    }
    print_json(&json!({"block": block, "figures": written}));
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let task: Task = a.task.parse()?;
    let mut spec = SynthSpec::new(task, a.count, a.image_size);
    if let Some(r) = a.radius_min {
        spec.radius.0 = r;
    }
    if let Some(r) = a.radius_max {
        spec.radius.1 = r;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    if let Some(v) = a.contrast {
        spec.contrast = v;
    }
    if let Some(v) = a.train_fraction {
        spec.train_fraction = v;
    }
    if let Some(v) = a.val_fraction {
        spec.val_fraction = v;
    }
    spec.empty_fraction = a.empty_fraction;
    spec.validate()?;
    let manifest = data::synth_corpus(&spec, a.seed, &a.out)?;
    write_resolved(&a.out, "synth", 1, &json!({"seed": a.seed, "spec": spec}))?;
    print_json(&json!({"manifest": manifest, "count": a.count}));
    Ok(())
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let m = data::load_manifest(&a.manifest)?;
    let (mean, std) = data::corpus_stats(&m)?;
    let doc = json!({
        "task": m.task,
        "labels": m.label_names,
        "rows": m.rows.len(),
        "train": m.count(Split::Train),
        "val": m.count(Split::Val),
        "test": m.count(Split::Test),
        "mean": mean,
        "std": std,
    });
    if let Some(out) = &a.out {
        write_resolved(out, "stats", 1, a)?;
        run_dirs(out)?;
        write_json(&out.join("reports").join("stats.json"), &doc)?;
    }
    print_json(&doc);
    Ok(())
}

pub fn init_tokenizer(a: &InitTokenizerArgs) -> Result<()> {
    let preset: Preset = a.preset.parse()?;
    let cfg = ViTConfig::preset(preset, a.image_size);
    cfg.validate()?;
    let tok = Tokenizer::random(&cfg, a.seed)?;
    write_resolved(&a.out, "init-tokenizer", 1, a)?;
    run_dirs(&a.out)?;
    let path = a.out.join("checkpoints").join("tokenizer.evax");
    tok.save(&path)?;
    print_json(&json!({"checkpoint": path}));
    Ok(())
}
