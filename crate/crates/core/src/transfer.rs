//! Downstream adaptation of a pre-trained backbone.
//!
//! Classification pools the final image tokens and applies a dropout plus
//! linear head. Segmentation turns the single-scale token grid into a
//! four-level pyramid (two deconvolutions, one deconvolution, identity,
//! max-pool) and decodes it with a UperNet-style head. Both loops train the
//! whole network with AdamW under layer-wise learning-rate decay.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{self, AugmentConfig, DatasetManifest, Image, ImageCache, Split, Target, Task, UncertainPolicy};
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::metrics::{self, ConfusionCounts, MetricsLog};
use crate::mim::epoch_order;
use crate::optim::{adamw_step, AdamWConfig, AdamWState, ParamGroup};
use crate::params::{ParamId, ParamStore};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;
use crate::vit::{mean_pool_var, Features, Preset, ViT, ViTConfig};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// How label vectors are turned into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Independent sigmoid per class, BCE.
    #[default]
    Multi,
    /// Exactly one positive class, softmax cross-entropy.
    Single,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(LabelMode::Multi),
            "single" => Ok(LabelMode::Single),
            _ => Err(Error::config("label_mode", format!("`{s}` is not one of multi, single"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Backbone loading

/// Ids of every backbone parameter in registration order.
pub fn backbone_ids(vit: &ViT) -> Vec<ParamId> {
    let mut ids = vit.embed_ids();
    for b in &vit.blocks {
        ids.extend(b.ids());
    }
    ids.extend([vit.norm.0, vit.norm.1]);
    ids
}

/// Resamples a `[N, d]` position table to a new token grid; the class-token
/// row, if any, is carried over.
pub fn interpolate_pos_embed(pos: &Tensor, from: (usize, usize), to: (usize, usize), class_token: bool) -> Result<Tensor> {
    let d = pos.shape()[1];
    let off = usize::from(class_token);
    if pos.shape()[0] != from.0 * from.1 + off {
        return Err(Error::shape("interpolate_pos_embed", format!("{:?} for grid {from:?}", pos.shape())));
    }
    let mut out = vec![0.0; (to.0 * to.1 + off) * d];
    out[..off * d].copy_from_slice(&pos.data()[..off * d]);
    for c in 0..d {
        let plane: Vec<f32> = (0..from.0 * from.1).map(|i| pos.data()[(off + i) * d + c]).collect();
        let img = data::resize_bilinear(&Image::new(from.0, from.1, plane)?, to.0, to.1)?;
        for (i, v) in img.pixels().iter().enumerate() {
            out[(off + i) * d + c] = *v;
        }
    }
    Tensor::new(vec![to.0 * to.1 + off, d], out)
}

/// Backbone weights and normalization statistics from a pre-training (or
/// any backbone-bearing) checkpoint.
#[derive(Debug, Clone)]
pub struct PretrainedBackbone {
    pub cfg: ViTConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub norm: Option<(f32, f32)>,
}

impl PretrainedBackbone {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::config("ckpt", format!("{} does not exist", path.display())));
        }
        let ckpt = load_checkpoint(path)?;
        let cfg: ViTConfig = ckpt.meta("vit_config")?;
        let norm = match (ckpt.meta::<f32>("norm_mean"), ckpt.meta::<f32>("norm_std")) {
            (Ok(m), Ok(s)) => Some((m, s)),
            _ => None,
        };
        Ok(PretrainedBackbone {
            cfg,
            tensors: ckpt.tensors,
            norm,
        })
    }

    /// Copies the backbone into `store`, where `vit` was registered. Tensors
    /// that belong to no backbone parameter (mask token, projection head,
    /// old task heads) are ignored. The position table is resampled when the
    /// grids differ.
    pub fn apply(&self, vit: &ViT, store: &mut ParamStore) -> Result<()> {
        let c = &vit.cfg;
        let p = &self.cfg;
        if (p.embed_dim, p.depth, p.heads, p.patch_size, p.use_class_token) != (c.embed_dim, c.depth, c.heads, c.patch_size, c.use_class_token) {
            return Err(Error::config(
                "preset",
                format!(
                    "checkpoint backbone is d={} depth={} heads={}, model is d={} depth={} heads={}",
                    p.embed_dim, p.depth, p.heads, c.embed_dim, c.depth, c.heads
                ),
            ));
        }
        let pos_name = store.names()[vit.pos_embed.index()].clone();
        for id in backbone_ids(vit) {
            let name = store.names()[id.index()].clone();
            let suffix = &name[vit.prefix.len()..];
            let src = self
                .tensors
                .iter()
                .find(|(n, _)| n == suffix)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Integrity(format!("checkpoint has no backbone tensor `{suffix}`")))?;
            let value = if name == pos_name && p.grid() != c.grid() {
                interpolate_pos_embed(src, p.grid(), c.grid(), c.use_class_token)?
            } else {
                src.clone()
            };
            store.set(&name, value)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layer-wise learning-rate decay

/// `decay^(G-1-g)` for the groups `[embed, block_0 .. block_{L-1}, head]`.
pub fn llrd_scales(num_blocks: usize, decay: f32) -> Vec<f32> {
    let g = num_blocks + 2;
    (0..g).map(|i| (decay as f64).powi((g - 1 - i) as i32) as f32).collect()
}

/// Parameter groups for LLRD: patch and position embedding, one group per
/// block, then the final norm together with every non-backbone parameter of
/// the store (the task head).
pub fn llrd_groups(vit: &ViT, store: &ParamStore, decay: f32) -> Result<Vec<ParamGroup>> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::config("llrd", format!("{decay} is outside (0, 1]")));
    }
    let scales = llrd_scales(vit.blocks.len(), decay);
    let mut groups = Vec::with_capacity(scales.len());
    groups.push(ParamGroup {
        name: "embed".into(),
        params: vit.embed_ids(),
        lr_scale: scales[0],
        weight_decay_enabled: true,
    });
    for (i, b) in vit.blocks.iter().enumerate() {
        groups.push(ParamGroup {
            name: format!("block_{i}"),
            params: b.ids(),
            lr_scale: scales[i + 1],
            weight_decay_enabled: true,
        });
    }
    let backbone: std::collections::HashSet<ParamId> = backbone_ids(vit).into_iter().collect();
    let mut head = vec![vit.norm.0, vit.norm.1];
    head.extend(store.ids().filter(|id| !backbone.contains(id)));
    groups.push(ParamGroup {
        name: "head".into(),
        params: head,
        lr_scale: 1.0,
        weight_decay_enabled: true,
    });
    Ok(groups)
}

// ---------------------------------------------------------------------------
// Classification

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsHead {
    /// `[d, K]`
    pub w: ParamId,
    /// `[K]`
    pub b: ParamId,
    pub mode: LabelMode,
    pub dropout_p: f32,
    pub num_classes: usize,
}

/// Backbone plus pooled linear head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub vit: ViT,
    pub head: ClsHead,
    pub params: ParamStore,
}

/// Graph handles of one classifier forward pass.
#[derive(Debug, Clone)]
pub struct ClsForward {
    /// `[B, K]`
    pub logits: Var,
    pub features: Features,
}

impl Classifier {
    pub fn new(cfg: &ViTConfig, num_classes: usize, mode: LabelMode, dropout_p: f32, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("num_classes", "must be at least 1"));
        }
        if mode == LabelMode::Single && num_classes < 2 {
            return Err(Error::config("label_mode", "single-label needs at least two classes"));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::config("dropout", format!("{dropout_p} is outside [0, 1)")));
        }
        let mut params = ParamStore::new();
        let mut rng = Rng::stream(seed, Stream::Init);
        let vit = ViT::register(cfg, &mut params, "", &mut rng)?;
        let w = params.weight(HEAD_WEIGHT, &[cfg.embed_dim, num_classes], &mut rng);
        let b = params.zeros(HEAD_BIAS, &[num_classes]);
        Ok(Classifier {
            vit,
            head: ClsHead {
                w,
                b,
                mode,
                dropout_p,
                num_classes,
            },
            params,
        })
    }

    /// Logits of `[B, 1, H, W]` images. `dropout_key` is only consulted in a
    /// training-mode graph.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var, dropout_key: u64) -> Result<ClsForward> {
        let features = self.vit.forward(g, p, images, None)?;
        let pooled = mean_pool_var(g, features.tokens, features.has_class_token)?;
        let pooled = g.dropout(pooled, self.head.dropout_p, dropout_key, 0)?;
        let logits = g.linear(pooled, p.var(self.head.w), Some(p.var(self.head.b)))?;
        Ok(ClsForward { logits, features })
    }

    /// Evaluation-mode logits `[B, K]`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(false);
        let p = g.bind(&self.params, false);
        let x = g.input(images.clone(), false);
        let out = self.forward(&mut g, &p, x, 0)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn save(&self, path: &Path, extra: &Checkpoint) -> Result<()> {
        let mut ckpt = extra.clone();
        ckpt.set_meta("kind", &"classifier");
        ckpt.set_meta("vit_config", &self.vit.cfg);
        ckpt.set_meta("num_classes", &self.head.num_classes);
        ckpt.set_meta("label_mode", &self.head.mode);
        ckpt.set_meta("dropout", &self.head.dropout_p);
        for (name, t) in self.params.iter() {
            ckpt.push(name, t.clone());
        }
        save_checkpoint(&ckpt, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Checkpoint)> {
        let ckpt = load_checkpoint(path)?;
        let kind: String = ckpt.meta("kind")?;
        if kind != "classifier" {
            return Err(Error::config("ckpt", format!("expected a classifier checkpoint, found `{kind}`")));
        }
        let cfg: ViTConfig = ckpt.meta("vit_config")?;
        let mut model = Classifier::new(&cfg, ckpt.meta("num_classes")?, ckpt.meta("label_mode")?, ckpt.meta("dropout")?, 0)?;
        let copied = model.params.load_prefixed(ckpt.iter(), "", "")?;
        if copied != model.params.len() {
            return Err(Error::Integrity(format!("classifier checkpoint holds {copied} of {} tensors", model.params.len())));
        }
        Ok((model, ckpt))
    }
}

/// Class scores used for ranking: sigmoid for multi-label, softmax for
/// single-label.
pub fn probabilities(logits: &Tensor, mode: LabelMode) -> Tensor {
    let k = logits.shape()[1];
    match mode {
        LabelMode::Multi => logits.map(|v| 1.0 / (1.0 + (-v).exp())),
        LabelMode::Single => {
            let mut out = logits.clone();
            for row in out.data_mut().chunks_mut(k) {
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let s: f32 = row.iter().map(|v| (v - m).exp()).sum();
                for v in row.iter_mut() {
                    *v = (*v - m).exp() / s;
                }
            }
            out
        }
    }
}

fn single_target(labels: &[i8], row: usize) -> Result<usize> {
    let mut hot = labels.iter().enumerate().filter(|(_, &v)| v == 1);
    match (hot.next(), hot.next()) {
        (Some((i, _)), None) if labels.iter().all(|&v| v == 0 || v == 1) => Ok(i),
        _ => Err(Error::Data(format!("row {row}: single-label targets must be one-hot, got {labels:?}"))),
    }
}

/// Mean sigmoid BCE (multi-label) or softmax cross-entropy (single-label).
/// Uncertain (`-1`) labels must have been resolved upstream.
pub fn cls_loss(g: &mut Graph, logits: Var, labels: &[Vec<i8>], mode: LabelMode) -> Result<Var> {
    let (b, k) = (g.shape(logits)[0], g.shape(logits)[1]);
    if labels.len() != b || labels.iter().any(|l| l.len() != k) {
        return Err(Error::shape("cls_loss", format!("{} label rows for logits [{b}, {k}]", labels.len())));
    }
    if let Some(row) = labels.iter().position(|l| l.contains(&-1)) {
        return Err(Error::Data(format!("row {row}: uncertain label reached the loss")));
    }
    match mode {
        LabelMode::Multi => {
            let t = Tensor::new(vec![b, k], labels.iter().flatten().map(|&v| v as f32).collect())?;
            let t = g.constant(t);
            g.bce_with_logits(logits, t)
        }
        LabelMode::Single => {
            let targets = labels.iter().enumerate().map(|(i, l)| single_target(l, i)).collect::<Result<Vec<_>>>()?;
            g.cross_entropy(logits, Arc::new(targets))
        }
    }
}

/// Evaluation summary of a classifier on one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClsMetrics {
    pub mauc: Option<f32>,
    pub per_class_auc: Vec<Option<f32>>,
    pub accuracy: f32,
    /// Sensitivity of the last class in single-label two-class problems.
    pub sensitivity: Option<f32>,
    pub loss: f32,
    pub count: usize,
}

impl ClsMetrics {
    pub fn log(&self, log: &mut MetricsLog, epoch: usize, split: &str) {
        if let Some(m) = self.mauc {
            log.push(epoch, split, "mauc", m);
        }
        log.push(epoch, split, "accuracy", self.accuracy);
        if let Some(s) = self.sensitivity {
            log.push(epoch, split, "sensitivity", s);
        }
        log.push(epoch, split, "loss", self.loss);
    }
}

/// Scores `[N, K]` and labels of a set of cached images in evaluation mode.
pub fn evaluate_cls(model: &Classifier, images: &[Image], labels: &[Vec<i8>], view: &AugmentConfig, batch: usize) -> Result<ClsMetrics> {
    if images.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let k = model.head.num_classes;
    let mut all = Vec::with_capacity(images.len() * k);
    let mut loss_sum = 0.0f64;
    for (chunk, lab) in images.chunks(batch.max(1)).zip(labels.chunks(batch.max(1))) {
        let views = chunk.iter().map(|im| data::eval_view(im, view)).collect::<Result<Vec<_>>>()?;
        let x = data::stack_batch(&views)?;
        let mut g = Graph::new(false);
        let p = g.bind(&model.params, false);
        let xi = g.input(x, false);
        let out = model.forward(&mut g, &p, xi, 0)?;
        let loss = cls_loss(&mut g, out.logits, lab, model.head.mode)?;
        loss_sum += g.value(loss).item() as f64 * chunk.len() as f64;
        all.extend_from_slice(g.value(out.logits).data());
    }
    let logits = Tensor::new(vec![images.len(), k], all)?;
    let probs = probabilities(&logits, model.head.mode);
    let truth = Tensor::new(vec![images.len(), k], labels.iter().flatten().map(|&v| v as f32).collect())?;
    let per_class_auc = metrics::per_class_auc(&probs, &truth)?;
    let mauc = metrics::mean_auc(&per_class_auc).ok().map(|m| m.value);
    let (accuracy, sensitivity) = match model.head.mode {
        LabelMode::Multi => {
            let pred: Vec<bool> = probs.data().iter().map(|&p| p >= 0.5).collect();
            let gt: Vec<bool> = truth.data().iter().map(|&v| v == 1.0).collect();
            (metrics::accuracy(&ConfusionCounts::from_predictions(&pred, &gt)?)?, None)
        }
        LabelMode::Single => {
            let argmax = |row: &[f32]| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            let pred: Vec<usize> = probs.data().chunks(k).map(argmax).collect();
            let gt = labels.iter().enumerate().map(|(i, l)| single_target(l, i)).collect::<Result<Vec<_>>>()?;
            let correct = pred.iter().zip(&gt).filter(|(a, b)| a == b).count();
            let sens = if k == 2 {
                let c = ConfusionCounts::from_predictions(
                    &pred.iter().map(|&p| p == 1).collect::<Vec<_>>(),
                    &gt.iter().map(|&t| t == 1).collect::<Vec<_>>(),
                )?;
                metrics::sensitivity(&c).ok()
            } else {
                None
            };
            (correct as f32 / gt.len() as f32, sens)
        }
    };
    Ok(ClsMetrics {
        mauc,
        per_class_auc,
        accuracy,
        sensitivity,
        loss: (loss_sum / images.len() as f64) as f32,
        count: images.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneClsConfig {
    pub manifest: PathBuf,
    /// Pre-trained backbone; `None` starts from random initialization.
    pub ckpt: Option<PathBuf>,
    pub preset: Preset,
    pub image_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub llrd: f32,
    pub dropout: f32,
    pub weight_decay: f32,
    pub crop_scale_min: f32,
    pub hflip_prob: f32,
    pub label_mode: LabelMode,
    pub uncertain: UncertainPolicy,
    pub seed: u64,
    pub data_fraction: f64,
    pub cache_size: usize,
}

impl Default for FinetuneClsConfig {
    fn default() -> Self {
        FinetuneClsConfig {
            manifest: PathBuf::new(),
            ckpt: None,
            preset: Preset::S,
            image_size: 224,
            epochs: 10,
            batch_size: 128,
            base_lr: 1e-3,
            llrd: 0.55,
            dropout: 0.2,
            weight_decay: 0.05,
            crop_scale_min: 0.5,
            hflip_prob: 0.5,
            label_mode: LabelMode::Multi,
            uncertain: UncertainPolicy::One,
            seed: 0,
            data_fraction: 1.0,
            cache_size: data::DEFAULT_CACHE_SIZE,
        }
    }
}

fn check_common(epochs: usize, batch: usize, lr: f32, llrd: f32, fraction: f64, crop: f32, flip: f32) -> Result<()> {
    if epochs == 0 {
        return Err(Error::config("epochs", "must be positive"));
    }
    if batch == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config("base_lr", format!("{lr} must be positive")));
    }
    if !(llrd > 0.0 && llrd <= 1.0) {
        return Err(Error::config("llrd", format!("{llrd} is outside (0, 1]")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("data_fraction", format!("{fraction} is outside (0, 1]")));
    }
    if !(crop > 0.0 && crop <= 1.0) {
        return Err(Error::config("crop_scale_min", format!("{crop} is outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&flip) {
        return Err(Error::config("hflip_prob", format!("{flip} is outside [0, 1]")));
    }
    Ok(())
}

impl FinetuneClsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.manifest.as_os_str().is_empty() {
            return Err(Error::config("manifest", "is required"));
        }
        check_common(self.epochs, self.batch_size, self.base_lr, self.llrd, self.data_fraction, self.crop_scale_min, self.hflip_prob)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} is outside [0, 1)", self.dropout)));
        }
        if self.cache_size < self.image_size {
            return Err(Error::config("cache_size", "must be at least image_size"));
        }
        ViTConfig::preset(self.preset, self.image_size).validate()
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneClsOutcome {
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub log: MetricsLog,
    pub best_epoch: usize,
    /// Held-out metrics of the selected checkpoint (test split, or the
    /// validation split when there is no test split).
    pub held_out: ClsMetrics,
    pub held_out_split: Split,
    pub model: Classifier,
}

fn labels_of<'a>(rows: impl Iterator<Item = &'a data::ManifestRow>) -> Result<Vec<Vec<i8>>> {
    rows.map(|r| match &r.target {
        Target::Labels(l) => Ok(l.clone()),
        _ => Err(Error::Data(format!("{}: expected a label vector", r.path.display()))),
    })
    .collect()
}

/// Images and labels of one split.
struct SplitData {
    images: Vec<Image>,
    labels: Vec<Vec<i8>>,
}

fn split_data(manifest: &DatasetManifest, split: Split, cache_size: usize) -> Result<SplitData> {
    let sub = DatasetManifest {
        task: manifest.task,
        label_names: manifest.label_names.clone(),
        rows: manifest.split(split).cloned().collect(),
    };
    Ok(SplitData {
        labels: labels_of(sub.rows.iter())?,
        images: ImageCache::build(&sub, cache_size)?.images,
    })
}

fn held_out_split(manifest: &DatasetManifest) -> Result<Split> {
    if manifest.count(Split::Test) > 0 {
        Ok(Split::Test)
    } else if manifest.count(Split::Val) > 0 {
        Ok(Split::Val)
    } else {
        Err(Error::Data("manifest has neither a val nor a test split".into()))
    }
}

/// Normalization statistics: the pre-training corpus's when the checkpoint
/// carries them, otherwise the fine-tuning corpus's train split.
fn norm_stats(pre: Option<&PretrainedBackbone>, manifest: &DatasetManifest) -> Result<(f32, f32)> {
    match pre.and_then(|p| p.norm) {
        Some(s) => Ok(s),
        None => data::corpus_stats(manifest),
    }
}

fn dropout_key(seed: u64, step: usize) -> u64 {
    Rng::stream(seed, Stream::Init).split(step as u64).key()
}

/// Fine-tunes a classifier and writes `checkpoints/finetune_cls.evax` and
/// `reports/metrics.csv` under `run_dir`.
///
/// The learning rate is fixed. After every epoch the model is scored on the
/// validation split (the held-out split when there is none); the epoch with
/// the best mAUC (accuracy for single-label) is kept, ties going to the lower
/// validation loss.
pub fn finetune_cls(cfg: &FinetuneClsConfig, run_dir: &Path) -> Result<FinetuneClsOutcome> {
    cfg.validate()?;
    let manifest = data::load_manifest(&cfg.manifest)?;
    if manifest.task != Task::Cls {
        return Err(Error::Data("finetune-cls needs a classification manifest".into()));
    }
    let manifest = data::subsample(&manifest.resolve_uncertain(cfg.uncertain), cfg.data_fraction, cfg.seed)?;
    let k = manifest.num_classes();
    let pre = cfg.ckpt.as_ref().map(PretrainedBackbone::load).transpose()?;
    let vcfg = ViTConfig::preset(cfg.preset, cfg.image_size);
    let mut model = Classifier::new(&vcfg, k, cfg.label_mode, cfg.dropout, cfg.seed)?;
    if let Some(p) = &pre {
        p.apply(&model.vit, &mut model.params)?;
    }
    let (mean, std) = norm_stats(pre.as_ref(), &manifest)?;

    let train = split_data(&manifest, Split::Train, cfg.cache_size)?;
    if train.images.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let test_split = held_out_split(&manifest)?;
    let val_split = if manifest.count(Split::Val) > 0 { Split::Val } else { test_split };
    let val = split_data(&manifest, val_split, cfg.cache_size)?;
    let test = if test_split == val_split { None } else { Some(split_data(&manifest, test_split, cfg.cache_size)?) };
    // surface bad label rows before any training
    for (i, l) in train.labels.iter().chain(&val.labels).enumerate() {
        if cfg.label_mode == LabelMode::Single {
            single_target(l, i)?;
        }
    }
    let aug = AugmentConfig {
        crop_scale_min: cfg.crop_scale_min,
        crop_size: cfg.image_size,
        hflip_prob: cfg.hflip_prob,
        mean,
        std,
        ..Default::default()
    };
    let groups = llrd_groups(&model.vit, &model.params, cfg.llrd)?;
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = AdamWState::new(&model.params);
    let mut log = MetricsLog::default();
    let cache = ImageCache {
        size: cfg.cache_size,
        images: train.images.clone(),
    };
    let score = |m: &ClsMetrics| match cfg.label_mode {
        LabelMode::Multi => m.mauc.unwrap_or(m.accuracy),
        LabelMode::Single => m.accuracy,
    };
    let mut best: Option<((f32, f32), usize, ParamStore)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.images.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let images = crate::mim::augment_batch(&cache, chunk, &aug, cfg.seed, step)?;
            let labels: Vec<Vec<i8>> = chunk.iter().map(|&i| train.labels[i].clone()).collect();
            let (loss, grads) = {
                let mut g = Graph::new(true);
                let p = g.bind(&model.params, true);
                let x = g.input(images, false);
                let out = model.forward(&mut g, &p, x, dropout_key(cfg.seed, step))?;
                let loss = cls_loss(&mut g, out.logits, &labels, cfg.label_mode)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("fine-tuning loss is {value} at step {step}")));
                }
                g.backward(loss)?;
                (value, g.param_grads(&p))
            };
            adamw_step(&mut model.params, &grads, &groups, &mut state, cfg.base_lr, &opt)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            step += 1;
        }
        log.push(epoch, "train", "loss", (loss_sum / train.images.len() as f64) as f32);
        let m = evaluate_cls(&model, &val.images, &val.labels, &aug, cfg.batch_size)?;
        m.log(&mut log, epoch, val_split.as_str());
        log::info!("finetune-cls epoch {epoch} {} accuracy {:.4} mauc {:?}", val_split.as_str(), m.accuracy, m.mauc);
        // ties on the headline metric go to the lower validation loss
        let key = (score(&m), -m.loss);
        if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
            best = Some((key, epoch, model.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    let held = test.as_ref().unwrap_or(&val);
    let held_out = evaluate_cls(&model, &held.images, &held.labels, &aug, cfg.batch_size)?;
    held_out.log(&mut log, best_epoch, test_split.as_str());

    let mut extra = Checkpoint::new();
    extra.set_meta("norm_mean", &mean);
    extra.set_meta("norm_std", &std);
    extra.set_meta("label_names", &manifest.label_names);
    extra.set_meta("best_epoch", &best_epoch);
    extra.set_meta("config", cfg);
    let ckpt = run_dir.join("checkpoints").join("finetune_cls.evax");
    model.save(&ckpt, &extra)?;
    let report = run_dir.join("reports").join("metrics.csv");
    log.write(&report)?;
    Ok(FinetuneClsOutcome {
        checkpoint: ckpt,
        report,
        log,
        best_epoch,
        held_out,
        held_out_split: test_split,
        model,
    })
}

/// Scores a fine-tuned classifier checkpoint on one split of a manifest,
/// with the same evaluation path as training. `cache_size` defaults to the
/// one recorded at training time.
pub fn eval_cls(ckpt: &Path, manifest: &Path, split: Split, uncertain: UncertainPolicy, cache_size: Option<usize>) -> Result<ClsMetrics> {
    let (model, meta) = Classifier::load(ckpt)?;
    let trained = meta.meta::<FinetuneClsConfig>("config").ok();
    let cache_size = cache_size
        .or(trained.as_ref().map(|c| c.cache_size))
        .unwrap_or(model.vit.cfg.image_size);
    let manifest = data::load_manifest(manifest)?.resolve_uncertain(uncertain);
    if manifest.num_classes() != model.head.num_classes {
        return Err(Error::Data(format!(
            "manifest has {} labels, checkpoint head has {}",
            manifest.num_classes(),
            model.head.num_classes
        )));
    }
    let d = split_data(&manifest, split, cache_size)?;
    let view = AugmentConfig {
        crop_size: model.vit.cfg.image_size,
        mean: meta.meta("norm_mean")?,
        std: meta.meta("norm_std")?,
        ..Default::default()
    };
    let batch = trained.map(|c| c.batch_size).unwrap_or(128);
    evaluate_cls(&model, &d.images, &d.labels, &view, batch)
}

// ---------------------------------------------------------------------------
// Segmentation

pub const PPM_BINS: [usize; 4] = [1, 2, 3, 6];

/// Pyramid adapter: `[B, d, g, g]` to maps at 4x, 2x, 1x and 1/2 of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub up4: [(ParamId, ParamId); 2],
    pub up2: (ParamId, ParamId),
}

/// UperNet-style decoder: pyramid pooling on the coarsest level, top-down
/// fusion, and a classifier on the concatenated finest-resolution maps.
#[derive(Debug, Clone, PartialEq)]
pub struct UperNet {
    pub channels: usize,
    pub num_classes: usize,
    pub ppm: Vec<(ParamId, ParamId)>,
    pub bottleneck: (ParamId, ParamId),
    /// 1x1 convs for the three finer levels.
    pub laterals: Vec<(ParamId, ParamId)>,
    /// 3x3 convs after top-down fusion for the three finer levels.
    pub fpn_out: Vec<(ParamId, ParamId)>,
    pub fuse: (ParamId, ParamId),
    pub classifier: (ParamId, ParamId),
}

fn conv_param(store: &mut ParamStore, name: &str, o: usize, c: usize, k: usize, std: f32, rng: &mut Rng) -> (ParamId, ParamId) {
    let n = o * c * k * k;
    let w = Tensor::from_parts(vec![o, c, k, k], (0..n).map(|_| std * rng.normal()).collect());
    (store.add(format!("{name}.weight"), w, true), store.zeros(format!("{name}.bias"), &[o]))
}

fn he(fan_in: usize) -> f32 {
    (2.0 / fan_in as f32).sqrt()
}

impl Pyramid {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Self {
        let mut deconv = |name: &str| {
            let w = Tensor::from_parts(vec![d, d, 2, 2], (0..d * d * 4).map(|_| he(d) * rng.normal()).collect());
            (store.add(format!("{prefix}{name}.weight"), w, true), store.zeros(format!("{prefix}{name}.bias"), &[d]))
        };
        Pyramid {
            up4: [deconv("fpn1.0"), deconv("fpn1.1")],
            up2: deconv("fpn2.0"),
        }
    }
}

/// Four maps at strides 4, 8, 16 and 32 from token features `[B, d, g, g]`
/// at stride 16.
pub fn build_pyramid(g: &mut Graph, p: &Bound, pyr: &Pyramid, x: Var) -> Result<[Var; 4]> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::shape("build_pyramid", format!("expected a square grid [B, d, g, g], got {s:?}")));
    }
    if !s[2].is_multiple_of(2) {
        return Err(Error::shape("build_pyramid", format!("grid side {} cannot be pooled to 1/32", s[2])));
    }
    let a = g.conv_transpose2d(x, p.var(pyr.up4[0].0), Some(p.var(pyr.up4[0].1)))?;
    let a = g.gelu(a)?;
    let a = g.conv_transpose2d(a, p.var(pyr.up4[1].0), Some(p.var(pyr.up4[1].1)))?;
    let b = g.conv_transpose2d(x, p.var(pyr.up2.0), Some(p.var(pyr.up2.1)))?;
    let d = g.max_pool2d(x)?;
    Ok([a, b, x, d])
}

impl UperNet {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, channels: usize, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("decoder_channels", "must be positive"));
        }
        if num_classes < 2 {
            return Err(Error::config("num_classes", "segmentation needs at least two classes"));
        }
        let ch = channels;
        let mut conv = |name: &str, o, c, k, std| conv_param(store, &format!("{prefix}{name}"), o, c, k, std, rng);
        let ppm = PPM_BINS.iter().map(|b| conv(&format!("ppm.{b}"), ch, d, 1, he(d))).collect();
        let bottleneck = conv("bottleneck", ch, d + PPM_BINS.len() * ch, 3, he(9 * (d + PPM_BINS.len() * ch)));
        let laterals = (0..3).map(|i| conv(&format!("lateral.{i}"), ch, d, 1, he(d))).collect();
        let fpn_out = (0..3).map(|i| conv(&format!("fpn_out.{i}"), ch, ch, 3, he(9 * ch))).collect();
        let fuse = conv("fuse", ch, 4 * ch, 3, he(36 * ch));
        let classifier = conv("classifier", num_classes, ch, 1, 0.02);
        Ok(UperNet {
            channels,
            num_classes,
            ppm,
            bottleneck,
            laterals,
            fpn_out,
            fuse,
            classifier,
        })
    }
}

fn conv_relu(g: &mut Graph, p: &Bound, w: (ParamId, ParamId), x: Var, pad: usize) -> Result<Var> {
    let y = g.conv2d(x, p.var(w.0), Some(p.var(w.1)), 1, pad)?;
    g.relu(y)
}

/// Per-pixel logits `[B, classes, H, W]` from a pyramid, upsampled to
/// `out_size`.
pub fn upernet_forward(g: &mut Graph, p: &Bound, dec: &UperNet, pyramid: &[Var; 4], out_size: (usize, usize)) -> Result<Var> {
    let top = pyramid[3];
    let (th, tw) = (g.shape(top)[2], g.shape(top)[3]);
    let mut branches = vec![top];
    for (&bins, &w) in PPM_BINS.iter().zip(&dec.ppm) {
        let pooled = g.adaptive_avg_pool2d(top, bins, bins)?;
        let y = conv_relu(g, p, w, pooled, 0)?;
        branches.push(g.bilinear(y, th, tw)?);
    }
    let cat = g.concat(&branches, 1)?;
    let mut lat = vec![];
    for i in 0..3 {
        lat.push(conv_relu(g, p, dec.laterals[i], pyramid[i], 0)?);
    }
    lat.push(conv_relu(g, p, dec.bottleneck, cat, 1)?);
    for i in (0..3).rev() {
        let (h, w) = (g.shape(lat[i])[2], g.shape(lat[i])[3]);
        let up = g.bilinear(lat[i + 1], h, w)?;
        lat[i] = g.add(lat[i], up)?;
    }
    let (h0, w0) = (g.shape(lat[0])[2], g.shape(lat[0])[3]);
    let mut outs = vec![];
    for i in 0..3 {
        outs.push(conv_relu(g, p, dec.fpn_out[i], lat[i], 1)?);
    }
    outs.push(lat[3]);
    for o in outs.iter_mut() {
        *o = g.bilinear(*o, h0, w0)?;
    }
    let cat = g.concat(&outs, 1)?;
    let fused = conv_relu(g, p, dec.fuse, cat, 1)?;
    let logits = g.conv2d(fused, p.var(dec.classifier.0), Some(p.var(dec.classifier.1)), 1, 0)?;
    g.bilinear(logits, out_size.0, out_size.1)
}

/// Mean per-pixel cross-entropy of `[B, C, H, W]` logits against class
/// indices laid out `[B, H, W]`.
pub fn seg_loss(g: &mut Graph, logits: Var, targets: Arc<Vec<usize>>) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let x = g.permute(logits, &[0, 2, 3, 1])?;
    let x = g.reshape(x, &[s[0] * s[2] * s[3], s[1]])?;
    g.cross_entropy(x, targets)
}

/// Backbone, pyramid adapter and decoder.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub vit: ViT,
    pub pyramid: Pyramid,
    pub decoder: UperNet,
    pub params: ParamStore,
}

impl Segmenter {
    pub fn new(cfg: &ViTConfig, channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let (gh, gw) = cfg.grid();
        if gh != gw || gh % 2 != 0 {
            return Err(Error::config("image_size", format!("grid {gh}x{gw} must be square with an even side")));
        }
        let mut params = ParamStore::new();
        let mut rng = Rng::stream(seed, Stream::Init);
        let vit = ViT::register(cfg, &mut params, "", &mut rng)?;
        let pyramid = Pyramid::register(&mut params, "decoder.", cfg.embed_dim, &mut rng);
        let decoder = UperNet::register(&mut params, "decoder.", cfg.embed_dim, channels, num_classes, &mut rng)?;
        Ok(Segmenter {
            vit,
            pyramid,
            decoder,
            params,
        })
    }

    /// Logits `[B, classes, H, W]` of `[B, 1, H, W]` images.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        let f = self.vit.forward(g, p, images, None)?;
        let n = g.shape(f.tokens)[1];
        let start = usize::from(f.has_class_token);
        let t = g.slice(f.tokens, 1, start, n)?;
        let t = g.permute(t, &[0, 2, 1])?;
        let (gh, gw) = f.grid;
        let x = g.reshape(t, &[s[0], self.vit.cfg.embed_dim, gh, gw])?;
        let pyr = build_pyramid(g, p, &self.pyramid, x)?;
        upernet_forward(g, p, &self.decoder, &pyr, (s[2], s[3]))
    }

    /// Per-pixel argmax masks of a batch, evaluation mode.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<Vec<bool>>> {
        let mut g = Graph::new(false);
        let p = g.bind(&self.params, false);
        let x = g.input(images.clone(), false);
        let y = self.forward(&mut g, &p, x)?;
        Ok(argmax_masks(g.value(y)))
    }

    pub fn save(&self, path: &Path, extra: &Checkpoint) -> Result<()> {
        let mut ckpt = extra.clone();
        ckpt.set_meta("kind", &"segmenter");
        ckpt.set_meta("vit_config", &self.vit.cfg);
        ckpt.set_meta("decoder_channels", &self.decoder.channels);
        ckpt.set_meta("num_classes", &self.decoder.num_classes);
        for (name, t) in self.params.iter() {
            ckpt.push(name, t.clone());
        }
        save_checkpoint(&ckpt, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Checkpoint)> {
        let ckpt = load_checkpoint(path)?;
        let kind: String = ckpt.meta("kind")?;
        if kind != "segmenter" {
            return Err(Error::config("ckpt", format!("expected a segmenter checkpoint, found `{kind}`")));
        }
        let mut model = Segmenter::new(&ckpt.meta("vit_config")?, ckpt.meta("decoder_channels")?, ckpt.meta("num_classes")?, 0)?;
        let copied = model.params.load_prefixed(ckpt.iter(), "", "")?;
        if copied != model.params.len() {
            return Err(Error::Integrity(format!("segmenter checkpoint holds {copied} of {} tensors", model.params.len())));
        }
        Ok((model, ckpt))
    }
}

/// Per-pixel argmax of `[B, C, H, W]` logits as foreground masks
/// (foreground = any class other than 0).
pub fn argmax_masks(logits: &Tensor) -> Vec<Vec<bool>> {
    let (b, c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]);
    let plane = h * w;
    (0..b)
        .map(|i| {
            let base = &logits.data()[i * c * plane..(i + 1) * c * plane];
            (0..plane)
                .map(|px| (1..c).fold(0, |bi, k| if base[k * plane + px] > base[bi * plane + px] { k } else { bi }) != 0)
                .collect()
        })
        .collect()
}

/// Nearest-neighbour resampling of a binary mask.
pub fn resize_mask(mask: &[bool], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64) as usize;
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64) as usize;
            out.push(mask[sy.min(h - 1) * w + sx.min(w - 1)]);
        }
    }
    out
}

/// Images and masks of one split, resized to the model resolution.
#[derive(Debug, Clone)]
pub struct SegData {
    pub images: Vec<Image>,
    pub masks: Vec<Vec<bool>>,
    pub size: usize,
}

pub fn load_seg_split(manifest: &DatasetManifest, split: Split, size: usize) -> Result<SegData> {
    let mut images = vec![];
    let mut masks = vec![];
    for row in manifest.split(split) {
        let Target::Mask(mp) = &row.target else {
            return Err(Error::Data(format!("{}: expected a mask path", row.path.display())));
        };
        let img = data::decode_image(&row.path)?;
        let (mh, mw, mask) = data::decode_mask(mp)?;
        if (mh, mw) != (img.height(), img.width()) {
            return Err(Error::Data(format!(
                "{}: mask is {mh}x{mw} but image is {}x{}",
                mp.display(),
                img.height(),
                img.width()
            )));
        }
        images.push(data::resize_bilinear(&img, size, size)?);
        masks.push(resize_mask(&mask, mh, mw, size, size));
    }
    Ok(SegData { images, masks, size })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub count: usize,
}

/// Mean per-image foreground Dice and Jaccard.
pub fn evaluate_seg(model: &Segmenter, d: &SegData, mean: f32, std: f32, batch: usize) -> Result<SegMetrics> {
    if d.images.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let (mut ds, mut js) = (0.0, 0.0);
    for (imgs, masks) in d.images.chunks(batch.max(1)).zip(d.masks.chunks(batch.max(1))) {
        let views = imgs.iter().map(|im| data::normalize(im, mean, std)).collect::<Result<Vec<_>>>()?;
        let pred = model.predict(&data::stack_batch(&views)?)?;
        for (s, gt) in pred.iter().zip(masks) {
            ds += metrics::dice(s, gt)?;
            js += metrics::jaccard(s, gt)?;
        }
    }
    let n = d.images.len() as f64;
    Ok(SegMetrics {
        dice: ds / n,
        jaccard: js / n,
        count: d.images.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSegConfig {
    pub manifest: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub preset: Preset,
    pub image_size: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub llrd: f32,
    pub weight_decay: f32,
    pub hflip_prob: f32,
    pub decoder_channels: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub data_fraction: f64,
}

impl Default for FinetuneSegConfig {
    fn default() -> Self {
        FinetuneSegConfig {
            manifest: PathBuf::new(),
            ckpt: None,
            preset: Preset::S,
            image_size: 512,
            iterations: 4000,
            batch_size: 4,
            base_lr: 2e-4,
            llrd: 0.85,
            weight_decay: 0.05,
            hflip_prob: 0.5,
            decoder_channels: 256,
            eval_interval: 500,
            seed: 0,
            data_fraction: 1.0,
        }
    }
}

impl FinetuneSegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.manifest.as_os_str().is_empty() {
            return Err(Error::config("manifest", "is required"));
        }
        check_common(self.iterations, self.batch_size, self.base_lr, self.llrd, self.data_fraction, 1.0, self.hflip_prob)?;
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be positive"));
        }
        if self.decoder_channels == 0 {
            return Err(Error::config("decoder_channels", "must be positive"));
        }
        ViTConfig::preset(self.preset, self.image_size).validate()
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneSegOutcome {
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub log: MetricsLog,
    pub best_iteration: usize,
    pub train: SegMetrics,
    pub val: Option<SegMetrics>,
    pub model: Segmenter,
}

/// Fine-tunes a segmenter with per-pixel cross-entropy at a fixed learning
/// rate. Augmentation is a horizontal flip applied to image and mask alike.
/// Every `eval_interval` iterations (and at the end) Dice is measured on the
/// train split and, when present, the validation split; the best
/// validation Dice (train Dice without a validation split) is kept.
pub fn finetune_seg(cfg: &FinetuneSegConfig, run_dir: &Path) -> Result<FinetuneSegOutcome> {
    cfg.validate()?;
    let manifest = data::load_manifest(&cfg.manifest)?;
    if manifest.task != Task::Seg {
        return Err(Error::Data("finetune-seg needs a segmentation manifest".into()));
    }
    let manifest = data::subsample(&manifest, cfg.data_fraction, cfg.seed)?;
    let pre = cfg.ckpt.as_ref().map(PretrainedBackbone::load).transpose()?;
    let vcfg = ViTConfig::preset(cfg.preset, cfg.image_size);
    let mut model = Segmenter::new(&vcfg, cfg.decoder_channels, 2, cfg.seed)?;
    if let Some(p) = &pre {
        p.apply(&model.vit, &mut model.params)?;
    }
    let (mean, std) = norm_stats(pre.as_ref(), &manifest)?;
    let train = load_seg_split(&manifest, Split::Train, cfg.image_size)?;
    if train.images.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let val = load_seg_split(&manifest, Split::Val, cfg.image_size)?;
    let val = (!val.images.is_empty()).then_some(val);
    let groups = llrd_groups(&model.vit, &model.params, cfg.llrd)?;
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = AdamWState::new(&model.params);
    let mut log = MetricsLog::default();
    let n = train.images.len();
    let s = cfg.image_size;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order = vec![];
    let mut cursor = 0;
    let mut epoch = 0;
    let mut last = (None, None);
    for it in 0..cfg.iterations {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(n) {
            if cursor == order.len() {
                order = epoch_order(n, cfg.seed, epoch);
                epoch += 1;
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let base = Rng::stream(cfg.seed, Stream::Augment).split(u64::MAX - it as u64);
        let mut views = vec![];
        let mut targets = Vec::with_capacity(idx.len() * s * s);
        for (slot, &i) in idx.iter().enumerate() {
            let flip = base.split(slot as u64).bernoulli(cfg.hflip_prob);
            let img = if flip { data::flip_columns(&train.images[i]) } else { train.images[i].clone() };
            views.push(data::normalize(&img, mean, std)?);
            let m = &train.masks[i];
            for y in 0..s {
                for x in 0..s {
                    let sx = if flip { s - 1 - x } else { x };
                    targets.push(usize::from(m[y * s + sx]));
                }
            }
        }
        let images = data::stack_batch(&views)?;
        let (loss, grads) = {
            let mut g = Graph::new(true);
            let p = g.bind(&model.params, true);
            let x = g.input(images, false);
            let logits = model.forward(&mut g, &p, x)?;
            let loss = seg_loss(&mut g, logits, Arc::new(targets))?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("segmentation loss is {value} at iteration {it}")));
            }
            g.backward(loss)?;
            (value, g.param_grads(&p))
        };
        adamw_step(&mut model.params, &grads, &groups, &mut state, cfg.base_lr, &opt)?;
        log.push(it + 1, "train", "loss", loss);
        if (it + 1) % cfg.eval_interval == 0 || it + 1 == cfg.iterations {
            let tm = evaluate_seg(&model, &train, mean, std, cfg.batch_size)?;
            log.push(it + 1, "train", "dice", tm.dice as f32);
            log.push(it + 1, "train", "jaccard", tm.jaccard as f32);
            let vm = val.as_ref().map(|v| evaluate_seg(&model, v, mean, std, cfg.batch_size)).transpose()?;
            if let Some(vm) = &vm {
                log.push(it + 1, "val", "dice", vm.dice as f32);
                log.push(it + 1, "val", "jaccard", vm.jaccard as f32);
            }
            log::info!("finetune-seg iteration {} loss {loss:.4} train dice {:.4}", it + 1, tm.dice);
            let score = vm.map_or(tm.dice, |v| v.dice);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, it + 1, model.params.clone()));
                last = (Some(tm), vm);
            }
        }
    }
    let (_, best_iteration, params) = best.expect("the final iteration is always evaluated");
    model.params = params;
    let mut extra = Checkpoint::new();
    extra.set_meta("norm_mean", &mean);
    extra.set_meta("norm_std", &std);
    extra.set_meta("best_iteration", &best_iteration);
    extra.set_meta("config", cfg);
    let ckpt = run_dir.join("checkpoints").join("finetune_seg.evax");
    model.save(&ckpt, &extra)?;
    let report = run_dir.join("reports").join("metrics.csv");
    log.write(&report)?;
    Ok(FinetuneSegOutcome {
        checkpoint: ckpt,
        report,
        log,
        best_iteration,
        train: last.0.expect("set with best"),
        val: last.1,
        model,
    })
}

/// Dice/Jaccard of a segmenter checkpoint on one split; predicted masks are
/// written as PNGs under `pred_dir` when given.
pub fn eval_seg(ckpt: &Path, manifest: &Path, split: Split, pred_dir: Option<&Path>) -> Result<SegMetrics> {
    let (model, meta) = Segmenter::load(ckpt)?;
    let manifest = data::load_manifest(manifest)?;
    let s = model.vit.cfg.image_size;
    let d = load_seg_split(&manifest, split, s)?;
    let (mean, std): (f32, f32) = (meta.meta("norm_mean")?, meta.meta("norm_std")?);
    let batch = meta.meta::<FinetuneSegConfig>("config").map(|c| c.batch_size).unwrap_or(4);
    if let Some(dir) = pred_dir {
        let rows: Vec<_> = manifest.split(split).collect();
        for (i, im) in d.images.iter().enumerate() {
            let x = data::stack_batch(&[data::normalize(im, mean, std)?])?;
            let pred = model.predict(&x)?;
            let stem = rows[i].path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            data::write_mask_png(dir.join(format!("{stem}_pred.png")), &pred[0], s, s)?;
        }
    }
    evaluate_seg(&model, &d, mean, std, batch)
}
