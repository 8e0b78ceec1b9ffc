//! Masked image modeling against a frozen tokenizer.
//!
//! A fraction `r` of the image tokens of each image is replaced by a learned
//! mask token (keeping the slot's position embedding). The student encodes
//! the corrupted sequence; its features at the masked slots are projected to
//! the tokenizer width and pulled towards the tokenizer's features of the
//! unmasked image with a cosine loss, `1 - mean cos`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{self, AugmentConfig, ImageCache};
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::metrics::write_text;
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState, ParamGroup};
use crate::params::{ParamId, ParamStore};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;
use crate::vit::{build_vit, MaskInput, Preset, TokenSequence, ViT, ViTConfig, ViTModel};

pub const COS_EPS: f32 = 1e-8;
pub const MASK_TOKEN: &str = "mask_token";
pub const PROJ_WEIGHT: &str = "mim_head.weight";
pub const PROJ_BIAS: &str = "mim_head.bias";

/// Sorted, distinct image-token indices to mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub indices: Vec<usize>,
    /// Number of image tokens the plan was drawn for.
    pub n: usize,
}

impl MaskPlan {
    pub fn new(mut indices: Vec<usize>, n: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("mask_plan", format!("index {bad} out of range for {n} tokens")));
        }
        Ok(MaskPlan { indices, n })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.n];
        for &i in &self.indices {
            f[i] = true;
        }
        f
    }
}

/// Number of tokens masked out of `n` at ratio `r`: `floor(n r)`.
pub fn mask_count(n: usize, r: f32) -> usize {
    // the slack keeps products like 196 * 0.3 = 58.8 from drifting across
    // an integer boundary in binary
    ((n as f64 * r as f64) + 1e-9).floor() as usize
}

/// Uniformly random subset of `floor(n r)` image-token indices.
pub fn sample_mask(n: usize, r: f32, rng: &mut Rng) -> Result<MaskPlan> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::config("mask_ratio", format!("{r} is outside (0, 1)")));
    }
    if n == 0 {
        return Err(Error::config("mask_ratio", "no image tokens to mask"));
    }
    let k = mask_count(n, r);
    if k == 0 {
        return Err(Error::config("mask_ratio", format!("floor({n} * {r}) = 0 masks nothing")));
    }
    // partial Fisher-Yates
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below((n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    MaskPlan::new(pool, n)
}

/// Replaces the masked image tokens of an embedded sequence with
/// `mask_token + pos_embed[slot]`; every other row is left untouched.
pub fn apply_mask(seq: &TokenSequence, plan: &MaskPlan, mask_token: &Tensor, pos_embed: &Tensor) -> Result<TokenSequence> {
    let d = seq.dim();
    let offset = usize::from(seq.has_class_token);
    let n_img = seq.len() - offset;
    if plan.n != n_img || plan.indices.iter().any(|&i| i >= n_img) {
        return Err(Error::shape("apply_mask", format!("plan for {} tokens, sequence has {n_img}", plan.n)));
    }
    if mask_token.shape() != [d] || pos_embed.shape() != [seq.len(), d] {
        return Err(Error::shape(
            "apply_mask",
            format!("mask token {:?}, position embedding {:?}, width {d}", mask_token.shape(), pos_embed.shape()),
        ));
    }
    let mut tokens = seq.tokens.clone();
    for &i in &plan.indices {
        let slot = i + offset;
        let row = &mut tokens.data_mut()[slot * d..(slot + 1) * d];
        for (k, v) in row.iter_mut().enumerate() {
            *v = mask_token.data()[k] + pos_embed.data()[slot * d + k];
        }
    }
    TokenSequence::new(tokens, seq.grid, seq.has_class_token)
}

/// Linear map from student width to tokenizer width.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    /// `[d_student, d_target]`
    pub w: Tensor,
    /// `[d_target]`
    pub b: Tensor,
}

/// A frozen backbone whose output tokens are the regression targets.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub model: ViTModel,
    /// Free-form provenance tag such as `random`.
    pub source: String,
}

impl Tokenizer {
    /// Randomly initialized tokenizer drawn from the init stream of `seed`.
    pub fn random(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        Ok(Tokenizer {
            model: build_vit(cfg, seed)?,
            source: "random".into(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("kind", &"tokenizer");
        ckpt.set_meta("vit_config", self.model.cfg());
        ckpt.set_meta("tokenizer_source", &self.source);
        for (name, t) in self.model.params.iter() {
            ckpt.push(name, t.clone());
        }
        save_checkpoint(&ckpt, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::config("tokenizer_ckpt", format!("{} does not exist", path.display())));
        }
        let ckpt = load_checkpoint(path)?;
        let cfg: ViTConfig = ckpt.meta("vit_config")?;
        let source = ckpt.meta::<String>("tokenizer_source").unwrap_or_else(|_| "unknown".into());
        let mut model = build_vit(&cfg, 0)?;
        let copied = model.params.load_prefixed(ckpt.iter(), "", "")?;
        if copied != model.params.len() {
            return Err(Error::Integrity(format!(
                "tokenizer checkpoint holds {copied} of {} backbone tensors",
                model.params.len()
            )));
        }
        Ok(Tokenizer { model, source })
    }

    pub fn dim(&self) -> usize {
        self.model.cfg().embed_dim
    }

    fn check_grid(&self, student: &ViTConfig) -> Result<()> {
        let t = self.model.cfg();
        if t.grid() != student.grid() || t.patch_size != student.patch_size {
            return Err(Error::config(
                "tokenizer_ckpt",
                format!(
                    "tokenizer grid {:?} (patch {}) does not match student grid {:?} (patch {})",
                    t.grid(),
                    t.patch_size,
                    student.grid(),
                    student.patch_size
                ),
            ));
        }
        Ok(())
    }

    /// Image-token features `[B, n, d_t]` of unmasked images `[B, 1, H, W]`,
    /// computed without any gradient bookkeeping.
    pub fn targets(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(false);
        let p = g.bind(&self.model.params, false);
        let x = g.input(images.clone(), false);
        let f = self.model.vit.forward(&mut g, &p, x, None)?;
        let (b, n, d) = (images.shape()[0], self.model.cfg().num_tokens(), self.dim());
        let start = usize::from(f.has_class_token);
        let img = g.slice(f.tokens, 1, start, n)?;
        let out = g.value(img).clone();
        out.reshape(vec![b, n - start, d])
    }
}

/// Target sequence of one `[H, W]` image for a student of config `student`.
pub fn tokenize_targets(image: &Tensor, tokenizer: &Tokenizer, student: &ViTConfig) -> Result<TokenSequence> {
    tokenizer.check_grid(student)?;
    let s = tokenizer.model.cfg().image_size;
    let batch = image.clone().reshape(vec![1, 1, s, s]).map_err(|_| {
        Error::shape("tokenize_targets", format!("image {:?} does not match tokenizer size {s}", image.shape()))
    })?;
    let t = tokenizer.targets(&batch)?;
    let (n, d) = (t.shape()[1], t.shape()[2]);
    TokenSequence::new(t.reshape(vec![n, d])?, tokenizer.model.cfg().grid(), false)
}

/// `1 - mean_i cos(W z_i + b, t_i)` over the gathered rows.
///
/// `student` is `[M, d]` rows already restricted to masked positions;
/// `targets` is `[M, d_t]`.
pub fn mim_loss_rows(g: &mut Graph, student: Var, targets: Var, w: Var, b: Var) -> Result<Var> {
    let projected = g.linear(student, w, Some(b))?;
    let cos = g.cosine_rows(projected, targets, COS_EPS)?;
    let mean = g.mean_all(cos)?;
    let neg = g.scale(mean, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Flat row indices `b * n + i` of the masked image tokens of a batch.
pub fn masked_rows(plans: &[MaskPlan]) -> Vec<usize> {
    plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.indices.iter().map(move |&i| b * p.n + i))
        .collect()
}

/// MIM loss for batched encoder output `[B, N, d]` (class token first when
/// present) against tokenizer targets `[B, n, d_t]`.
pub fn mim_loss_var(
    g: &mut Graph,
    tokens: Var,
    has_class_token: bool,
    targets: Var,
    plans: &[MaskPlan],
    w: Var,
    b: Var,
) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let (bsz, n_tok, d) = (s[0], s[1], s[2]);
    let start = usize::from(has_class_token);
    let n = n_tok - start;
    let ts = g.shape(targets).to_vec();
    if plans.len() != bsz || ts.len() != 3 || ts[0] != bsz || ts[1] != n {
        return Err(Error::shape(
            "mim_loss",
            format!("{} plans, tokens {s:?}, targets {ts:?}", plans.len()),
        ));
    }
    if plans.iter().any(|p| p.n != n || p.is_empty()) {
        return Err(Error::shape("mim_loss", format!("every plan must be non-empty over {n} tokens")));
    }
    let rows = Arc::new(masked_rows(plans));
    let img = g.slice(tokens, 1, start, n_tok)?;
    let img = g.reshape(img, &[bsz * n, d])?;
    let z = g.gather_rows(img, rows.clone())?;
    let t = g.reshape(targets, &[bsz * n, ts[2]])?;
    let t = g.gather_rows(t, rows)?;
    mim_loss_rows(g, z, t, w, b)
}

/// Loss of one encoded sequence against its targets.
pub fn mim_loss(z_out: &TokenSequence, z_t: &TokenSequence, plan: &MaskPlan, proj: &ProjectionHead) -> Result<f32> {
    if plan.is_empty() {
        return Err(Error::config("mask_ratio", "empty mask plan"));
    }
    let mut g = Graph::new(false);
    let (n_out, d) = (z_out.len(), z_out.dim());
    let tokens = g.input(z_out.tokens.clone().reshape(vec![1, n_out, d])?, false);
    let t_img = z_t.image_tokens();
    let (n_t, d_t) = (t_img.shape()[0], t_img.shape()[1]);
    let targets = g.input(t_img.reshape(vec![1, n_t, d_t])?, false);
    let w = g.input(proj.w.clone(), false);
    let b = g.input(proj.b.clone(), false);
    let loss = mim_loss_var(&mut g, tokens, z_out.has_class_token, targets, std::slice::from_ref(plan), w, b)?;
    Ok(g.value(loss).item())
}

/// Sum over masked slots of `cos(W z_i + b, t_i)`, evaluated directly in f64.
pub fn cosine_objective(z_out: &TokenSequence, z_t: &TokenSequence, plan: &MaskPlan, proj: &ProjectionHead) -> f64 {
    let zi = z_out.image_tokens();
    let ti = z_t.image_tokens();
    let (d, dt) = (zi.shape()[1], ti.shape()[1]);
    let mut total = 0.0;
    for &i in &plan.indices {
        let z = &zi.data()[i * d..(i + 1) * d];
        let t = &ti.data()[i * dt..(i + 1) * dt];
        let p: Vec<f64> = (0..dt)
            .map(|j| proj.b.data()[j] as f64 + (0..d).map(|k| z[k] as f64 * proj.w.data()[k * dt + j] as f64).sum::<f64>())
            .collect();
        let dot: f64 = p.iter().zip(t).map(|(a, b)| a * *b as f64).sum();
        let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nt = t.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        total += dot / (np * nt).max(COS_EPS as f64);
    }
    total
}

/// Student backbone with its mask token and projection head in one store.
#[derive(Debug, Clone)]
pub struct MimModel {
    pub vit: ViT,
    pub mask_token: ParamId,
    pub proj: (ParamId, ParamId),
    pub params: ParamStore,
}

impl MimModel {
    pub fn new(cfg: &ViTConfig, target_dim: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = Rng::stream(seed, Stream::Init);
        let vit = ViT::register(cfg, &mut params, "", &mut rng)?;
        let d = cfg.embed_dim;
        let m = (0..d).map(|_| rng.trunc_normal(0.02)).collect();
        let mask_token = params.add(MASK_TOKEN, Tensor::from_vec(m), false);
        let proj = (
            params.weight(PROJ_WEIGHT, &[d, target_dim], &mut rng),
            params.zeros(PROJ_BIAS, &[target_dim]),
        );
        Ok(MimModel {
            vit,
            mask_token,
            proj,
            params,
        })
    }

    pub fn projection(&self) -> ProjectionHead {
        ProjectionHead {
            w: self.params.get(self.proj.0).clone(),
            b: self.params.get(self.proj.1).clone(),
        }
    }

    /// Builds the loss of a batch `[B, 1, H, W]` on `g`; `p` binds a store
    /// laid out like `self.params`.
    pub fn loss(&self, g: &mut Graph, p: &Bound, images: &Tensor, targets: &Tensor, plans: &[MaskPlan]) -> Result<Var> {
        let x = g.input(images.clone(), false);
        let flags: Vec<bool> = plans.iter().flat_map(MaskPlan::flags).collect();
        let mask = MaskInput {
            flags: Arc::new(flags),
            token: p.var(self.mask_token),
        };
        let f = self.vit.forward(g, p, x, Some(&mask))?;
        let t = g.input(targets.clone(), false);
        mim_loss_var(g, f.tokens, f.has_class_token, t, plans, p.var(self.proj.0), p.var(self.proj.1))
    }
}

// ---------------------------------------------------------------------------
// Pre-training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub manifest: PathBuf,
    pub tokenizer_ckpt: PathBuf,
    pub preset: Preset,
    pub image_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f32,
    pub crop_scale_min: f32,
    pub hflip_prob: f32,
    pub base_lr: f32,
    pub min_lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub data_fraction: f64,
    pub cache_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            manifest: PathBuf::new(),
            tokenizer_ckpt: PathBuf::new(),
            preset: Preset::S,
            image_size: 224,
            epochs: 600,
            batch_size: 64,
            mask_ratio: 0.3,
            crop_scale_min: 0.2,
            hflip_prob: 0.5,
            base_lr: 3e-4,
            min_lr: 1e-6,
            weight_decay: 0.05,
            seed: 0,
            data_fraction: 1.0,
            cache_size: data::DEFAULT_CACHE_SIZE,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokenizer_ckpt.as_os_str().is_empty() {
            return Err(Error::config("tokenizer_ckpt", "is required"));
        }
        if self.manifest.as_os_str().is_empty() {
            return Err(Error::config("manifest", "is required"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("mask_ratio", format!("{} is outside (0, 1)", self.mask_ratio)));
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return Err(Error::config("crop_scale_min", format!("{} is outside (0, 1]", self.crop_scale_min)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.base_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.base_lr {
            return Err(Error::config("base_lr", "need 0 <= min_lr <= base_lr and base_lr > 0"));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::config("data_fraction", format!("{} is outside (0, 1]", self.data_fraction)));
        }
        if self.cache_size < self.image_size {
            return Err(Error::config("cache_size", "must be at least image_size"));
        }
        ViTConfig::preset(self.preset, self.image_size).validate()
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_curve_csv: PathBuf,
    pub curve: Vec<CurvePoint>,
    pub model: MimModel,
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.lr, p.loss));
    }
    write_text(path, &out)
}

/// Order in which examples are visited in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::stream(seed, Stream::Augment).split(epoch as u64).shuffle(&mut order);
    order
}

/// Augmented, normalized batch `[B, 1, S, S]`; sample `slot` of `step` draws
/// from its own stream so the batch is a function of `(seed, step)` only.
pub fn augment_batch(cache: &ImageCache, idx: &[usize], aug: &AugmentConfig, seed: u64, step: usize) -> Result<Tensor> {
    let base = Rng::stream(seed, Stream::Augment).split(u64::MAX - step as u64);
    let views = idx
        .iter()
        .enumerate()
        .map(|(slot, &i)| data::augment(&cache.images[i], &mut base.split(slot as u64), aug))
        .collect::<Result<Vec<_>>>()?;
    data::stack_batch(&views)
}

/// Runs masked-image-modeling pre-training and writes
/// `checkpoints/pretrain.evax` and `reports/loss_curve.csv` under `run_dir`.
///
/// Every image of the manifest is used regardless of split; labels are
/// ignored. The learning rate follows a cosine from `base_lr` at step 0 to
/// `min_lr` at the last step.
pub fn pretrain_run(cfg: &PretrainConfig, run_dir: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let tokenizer = Tokenizer::load(&cfg.tokenizer_ckpt)?;
    let vcfg = ViTConfig::preset(cfg.preset, cfg.image_size);
    tokenizer.check_grid(&vcfg)?;
    if tokenizer.model.cfg().image_size != vcfg.image_size {
        return Err(Error::config("image_size", "tokenizer and student image sizes differ"));
    }
    let manifest = data::subsample(&data::load_manifest(&cfg.manifest)?, cfg.data_fraction, cfg.seed)?;
    if manifest.rows.is_empty() {
        return Err(Error::Data("manifest has no rows".into()));
    }
    let (mean, std) = data::corpus_stats(&manifest)?;
    let cache = ImageCache::build(&manifest, cfg.cache_size)?;
    let aug = AugmentConfig {
        crop_scale_min: cfg.crop_scale_min,
        crop_size: cfg.image_size,
        hflip_prob: cfg.hflip_prob,
        mean,
        std,
        ..Default::default()
    };

    let mut model = MimModel::new(&vcfg, tokenizer.dim(), cfg.seed)?;
    let groups = ParamGroup::all(&model.params);
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = AdamWState::new(&model.params);
    let n = cache.images.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let n_img = vcfg.num_patches();
    let mut curve = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let images = augment_batch(&cache, chunk, &aug, cfg.seed, step)?;
            let mut mrng = Rng::stream(cfg.seed, Stream::Mask).split(step as u64);
            let plans = (0..chunk.len())
                .map(|_| sample_mask(n_img, cfg.mask_ratio, &mut mrng))
                .collect::<Result<Vec<_>>>()?;
            let targets = tokenizer.targets(&images)?;
            let (loss, grads) = {
                let mut g = Graph::new(true);
                let bound = g.bind(&model.params, true);
                let loss = model.loss(&mut g, &bound, &images, &targets, &plans)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("pre-training loss is {value} at step {step}")));
                }
                g.backward(loss)?;
                (value, g.param_grads(&bound))
            };
            let lr = cosine_lr(step as u64, (total - 1).max(1) as u64, cfg.base_lr, cfg.min_lr)?;
            adamw_step(&mut model.params, &grads, &groups, &mut state, lr, &opt)?;
            curve.push(CurvePoint { step, lr, loss });
            if step % 50 == 0 {
                log::info!("pretrain step {step}/{total} lr {lr:.3e} loss {loss:.5}");
            }
            step += 1;
        }
    }

    let mut ckpt = Checkpoint::new();
    ckpt.set_meta("kind", &"pretrain");
    ckpt.set_meta("vit_config", &vcfg);
    ckpt.set_meta("steps", &step);
    ckpt.set_meta("norm_mean", &mean);
    ckpt.set_meta("norm_std", &std);
    ckpt.set_meta("tokenizer_source", &tokenizer.source);
    ckpt.set_meta("config", cfg);
    for (name, t) in model.params.iter() {
        ckpt.push(name, t.clone());
    }
    let ckpt_path = run_dir.join("checkpoints").join("pretrain.evax");
    save_checkpoint(&ckpt, &ckpt_path)?;
    let csv = run_dir.join("reports").join("loss_curve.csv");
    write_curve(&csv, &curve)?;
    Ok(PretrainOutcome {
        checkpoint: ckpt_path,
        loss_curve_csv: csv,
        curve,
        model,
    })
}
