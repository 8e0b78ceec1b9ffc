//! Vision transformer backbone.
//!
//! Patch embedding, optional class token and learned absolute position
//! embedding feed a stack of pre-norm blocks. Each block uses 2D axial
//! rotary encoding on queries and keys, an extra LayerNorm on the attention
//! output before its projection (Sub-LN), and a SwiGLU feed-forward unit
//! with its own inner LayerNorm. A final LayerNorm closes the stack.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::ops::RopeTable;
use crate::params::{ParamId, ParamStore};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Ti,
    S,
    B,
    Micro,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ti" => Ok(Preset::Ti),
            "s" => Ok(Preset::S),
            "b" => Ok(Preset::B),
            "micro" => Ok(Preset::Micro),
            other => Err(Error::config("preset", format!("unknown preset `{other}` (ti, s, b, micro)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Ti => "ti",
            Preset::S => "s",
            Preset::B => "b",
            Preset::Micro => "micro",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub image_size: usize,
    pub mlp_hidden: usize,
    pub use_class_token: bool,
}

/// Smallest multiple of 8 that is at least `8 d / 3`.
pub fn swiglu_hidden(d: usize) -> usize {
    (8 * d).div_ceil(3).div_ceil(8) * 8
}

impl ViTConfig {
    pub fn new(embed_dim: usize, depth: usize, heads: usize, image_size: usize) -> Self {
        ViTConfig {
            patch_size: 16,
            embed_dim,
            depth,
            heads,
            image_size,
            mlp_hidden: swiglu_hidden(embed_dim),
            use_class_token: true,
        }
    }

    pub fn preset(p: Preset, image_size: usize) -> Self {
        match p {
            Preset::Ti => Self::new(192, 12, 3, image_size),
            Preset::S => Self::new(384, 12, 6, image_size),
            Preset::B => Self::new(768, 12, 12, image_size),
            Preset::Micro => Self::new(64, 2, 2, image_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: String| Err(Error::config(k, why));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size", format!("{} is not a positive multiple of patch size {}", self.image_size, self.patch_size));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad("heads", format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        if !(self.embed_dim / self.heads).is_multiple_of(4) || self.embed_dim == 0 {
            return bad("embed_dim", format!("head dim {} is not divisible by 4", self.embed_dim / self.heads));
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden", "must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_class_token)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Closed-form parameter count of [`ViT::register`].
    pub fn param_count(&self) -> usize {
        let (d, h, p) = (self.embed_dim, self.mlp_hidden, self.patch_size);
        let embed = d * p * p + d + self.num_tokens() * d + if self.use_class_token { d } else { 0 };
        let attn = 2 * d + (d * 3 * d + 3 * d) + 2 * d + (d * d + d);
        let ffn = 2 * d + 2 * (d * h + h) + 2 * h + (h * d + d);
        embed + self.depth * (attn + ffn) + 2 * d
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub norm1: (ParamId, ParamId),
    pub qkv: (ParamId, ParamId),
    pub attn_norm: (ParamId, ParamId),
    pub proj: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
    pub gate: (ParamId, ParamId),
    pub value: (ParamId, ParamId),
    pub ffn_norm: (ParamId, ParamId),
    pub out: (ParamId, ParamId),
}

impl BlockParams {
    pub fn ids(&self) -> Vec<ParamId> {
        [self.norm1, self.qkv, self.attn_norm, self.proj, self.norm2, self.gate, self.value, self.ffn_norm, self.out]
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .collect()
    }
}

/// Parameter handles of a backbone registered in some [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ViT {
    pub cfg: ViTConfig,
    pub prefix: String,
    pub patch: (ParamId, ParamId),
    pub cls_token: Option<ParamId>,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: (ParamId, ParamId),
    rope: Arc<RopeTable>,
}

/// Token features of a batch.
#[derive(Debug, Clone)]
pub struct Features {
    /// `[B, N, d]` after the final LayerNorm.
    pub tokens: Var,
    /// `[B, N, d]` output of the last block, before the final LayerNorm.
    pub last_block: Var,
    /// Post-softmax attention `[B, heads, N, N]` of the requested block.
    pub attention: Option<Var>,
    pub grid: (usize, usize),
    pub has_class_token: bool,
}

/// Substitution of mask-token content for selected patches.
#[derive(Debug, Clone)]
pub struct MaskInput {
    /// One flag per image token, `[B * n]` in batch-major order.
    pub flags: Arc<Vec<bool>>,
    pub token: Var,
}

fn ln_pair(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (store.ones(format!("{name}.weight"), &[d]), store.zeros(format!("{name}.bias"), &[d]))
}

fn linear_pair(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Rng) -> (ParamId, ParamId) {
    (
        store.weight(format!("{name}.weight"), &[din, dout], rng),
        store.zeros(format!("{name}.bias"), &[dout]),
    )
}

/// 2D axial rotation table for a token grid, optionally preceded by an
/// unrotated class token.
pub fn rope_table(grid: (usize, usize), class_token: bool, head_dim: usize) -> RopeTable {
    let pairs = head_dim / 2;
    let axis_pairs = pairs / 2;
    let freqs: Vec<f64> = (0..axis_pairs)
        .map(|k| ROPE_BASE.powf(-2.0 * k as f64 / (head_dim as f64 / 2.0)))
        .collect();
    let tokens = grid.0 * grid.1 + usize::from(class_token);
    let mut cos = Vec::with_capacity(tokens * pairs);
    let mut sin = Vec::with_capacity(tokens * pairs);
    if class_token {
        cos.extend(std::iter::repeat_n(1.0, pairs));
        sin.extend(std::iter::repeat_n(0.0, pairs));
    }
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            for (pos, _) in [(r, 0), (c, 1)] {
                for f in &freqs {
                    let angle = pos as f64 * f;
                    cos.push(angle.cos() as f32);
                    sin.push(angle.sin() as f32);
                }
            }
        }
    }
    RopeTable { tokens, pairs, cos, sin }
}

/// Applies 2D rotary encoding to `x [heads, tokens, dh]` or `[tokens, dh]`.
pub fn rope_rotate(x: &Tensor, grid: (usize, usize), class_token: bool) -> Result<Tensor> {
    let dh = *x.shape().last().unwrap_or(&0);
    if !dh.is_multiple_of(4) || dh == 0 {
        return Err(Error::shape("rope2d", format!("head dim {dh} is not divisible by 4")));
    }
    let table = Arc::new(rope_table(grid, class_token, dh));
    let lead = x.len() / (table.tokens * dh).max(1);
    let x4 = x.clone().reshape(vec![1, lead, table.tokens, dh])?;
    let mut g = Graph::new(false);
    let v = g.input(x4, false);
    let out = g.rope2d(v, table)?;
    g.value(out).clone().reshape(x.shape().to_vec())
}

impl ViT {
    /// Adds backbone parameters to `store` under `prefix`. Weights are
    /// truncated normal with std 0.02; biases zero; LayerNorm gains one.
    pub fn register(cfg: &ViTConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<ViT> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let name = |s: &str| format!("{prefix}{s}");
        let patch = (
            store.weight(name("patch_embed.weight"), &[d, 1, p, p], rng),
            store.zeros(name("patch_embed.bias"), &[d]),
        );
        let cls_token = cfg.use_class_token.then(|| {
            let data = (0..d).map(|_| rng.trunc_normal(0.02)).collect();
            store.add(name("cls_token"), Tensor::from_parts(vec![d], data), false)
        });
        let pos_data = (0..cfg.num_tokens() * d).map(|_| rng.trunc_normal(0.02)).collect();
        let pos_embed = store.add(name("pos_embed"), Tensor::from_parts(vec![cfg.num_tokens(), d], pos_data), false);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let b = |s: &str| format!("{prefix}blocks.{i}.{s}");
            blocks.push(BlockParams {
                norm1: ln_pair(store, &b("norm1"), d),
                qkv: linear_pair(store, &b("attn.qkv"), d, 3 * d, rng),
                attn_norm: ln_pair(store, &b("attn.inner_norm"), d),
                proj: linear_pair(store, &b("attn.proj"), d, d, rng),
                norm2: ln_pair(store, &b("norm2"), d),
                gate: linear_pair(store, &b("mlp.w_gate"), d, cfg.mlp_hidden, rng),
                value: linear_pair(store, &b("mlp.w_value"), d, cfg.mlp_hidden, rng),
                ffn_norm: ln_pair(store, &b("mlp.inner_norm"), cfg.mlp_hidden),
                out: linear_pair(store, &b("mlp.w_out"), cfg.mlp_hidden, d, rng),
            });
        }
        let norm = ln_pair(store, &name("norm"), d);
        Ok(ViT {
            cfg: cfg.clone(),
            prefix: prefix.to_string(),
            patch,
            cls_token,
            pos_embed,
            blocks,
            norm,
            rope: Arc::new(rope_table(cfg.grid(), cfg.use_class_token, cfg.head_dim())),
        })
    }

    /// Parameters of the patch embedding, class token and position embedding.
    pub fn embed_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.patch.0, self.patch.1, self.pos_embed];
        v.extend(self.cls_token);
        v
    }

    fn check_images(&self, g: &Graph, images: Var) -> Result<usize> {
        let s = g.shape(images);
        let n = self.cfg.image_size;
        if s.len() != 4 || s[1] != 1 || s[2] != n || s[3] != n {
            return Err(Error::shape(
                "patchify",
                format!("expected images [B, 1, {n}, {n}], got {s:?}"),
            ));
        }
        Ok(s[0])
    }

    /// Patch projection of `[B, 1, H, W]` images to `[B, n, d]`, before any
    /// class token or position embedding.
    pub fn patch_tokens(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<Var> {
        let b = self.check_images(g, images)?;
        let (d, n) = (self.cfg.embed_dim, self.cfg.num_patches());
        let x = g.conv2d(images, p.var(self.patch.0), Some(p.var(self.patch.1)), self.cfg.patch_size, 0)?;
        let x = g.reshape(x, &[b, d, n])?;
        g.permute(x, &[0, 2, 1])
    }

    /// Prepends the class token (if any) and adds position embeddings.
    pub fn finish_embedding(&self, g: &mut Graph, p: &Bound, patches: Var) -> Result<Var> {
        let b = g.shape(patches)[0];
        let d = self.cfg.embed_dim;
        let x = match self.cls_token {
            Some(cls) => {
                let zeros = g.constant(Tensor::zeros([b, 1, d]));
                let cls = g.add(zeros, p.var(cls))?;
                g.concat(&[cls, patches], 1)?
            }
            None => patches,
        };
        g.add(x, p.var(self.pos_embed))
    }

    /// Full embedding with optional mask-token substitution. Masked patches
    /// get the mask token as content and keep their slot's position
    /// embedding.
    pub fn embed(&self, g: &mut Graph, p: &Bound, images: Var, mask: Option<&MaskInput>) -> Result<Var> {
        let mut x = self.patch_tokens(g, p, images)?;
        if let Some(m) = mask {
            x = g.mask_replace(x, m.token, m.flags.clone())?;
        }
        self.finish_embedding(g, p, x)
    }

    /// One transformer block on `x [B, N, d]`. Returns the output and the
    /// attention probabilities.
    pub fn block(&self, g: &mut Graph, p: &Bound, index: usize, x: Var) -> Result<(Var, Var)> {
        let blk = &self.blocks[index];
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.cfg.embed_dim || s[1] != self.rope.tokens {
            return Err(Error::shape(
                "block",
                format!("expected [B, {}, {}], got {s:?}", self.rope.tokens, self.cfg.embed_dim),
            ));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());

        let y = g.layer_norm(x, p.var(blk.norm1.0), p.var(blk.norm1.1), LN_EPS)?;
        let qkv = g.linear(y, p.var(blk.qkv.0), Some(p.var(blk.qkv.1)))?;
        let qkv = g.reshape(qkv, &[b, n, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let q = g.slice(qkv, 0, 0, 1)?;
        let k = g.slice(qkv, 0, 1, 2)?;
        let v = g.slice(qkv, 0, 2, 3)?;
        let q = g.reshape(q, &[b, h, n, dh])?;
        let k = g.reshape(k, &[b, h, n, dh])?;
        let v = g.reshape(v, &[b, h, n, dh])?;
        let q = g.rope2d(q, self.rope.clone())?;
        let k = g.rope2d(k, self.rope.clone())?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, d])?;
        let ctx = g.layer_norm(ctx, p.var(blk.attn_norm.0), p.var(blk.attn_norm.1), LN_EPS)?;
        let ctx = g.linear(ctx, p.var(blk.proj.0), Some(p.var(blk.proj.1)))?;
        let x = g.add(x, ctx)?;

        let y = g.layer_norm(x, p.var(blk.norm2.0), p.var(blk.norm2.1), LN_EPS)?;
        let gate = g.linear(y, p.var(blk.gate.0), Some(p.var(blk.gate.1)))?;
        let gate = g.silu(gate)?;
        let val = g.linear(y, p.var(blk.value.0), Some(p.var(blk.value.1)))?;
        let hidden = g.mul(gate, val)?;
        let hidden = g.layer_norm(hidden, p.var(blk.ffn_norm.0), p.var(blk.ffn_norm.1), LN_EPS)?;
        let out = g.linear(hidden, p.var(blk.out.0), Some(p.var(blk.out.1)))?;
        Ok((g.add(x, out)?, attn))
    }

    /// Copy whose rotary positions are reordered so that token `i` takes the
    /// position of token `order[i]`.
    pub fn with_token_order(&self, order: &[usize]) -> Result<ViT> {
        let t = &self.rope;
        let mut seen = vec![false; t.tokens];
        if order.len() != t.tokens || !order.iter().all(|&i| i < t.tokens && !std::mem::replace(&mut seen[i], true)) {
            return Err(Error::shape("with_token_order", format!("not a permutation of {} tokens", t.tokens)));
        }
        let pick = |v: &[f32]| order.iter().flat_map(|&i| v[i * t.pairs..(i + 1) * t.pairs].iter().copied()).collect();
        let mut out = self.clone();
        out.rope = Arc::new(RopeTable {
            tokens: t.tokens,
            pairs: t.pairs,
            cos: pick(&t.cos),
            sin: pick(&t.sin),
        });
        Ok(out)
    }

    /// Runs every block and the final LayerNorm on embedded tokens.
    pub fn encode(&self, g: &mut Graph, p: &Bound, mut x: Var, capture_attention: Option<usize>) -> Result<Features> {
        let mut attention = None;
        for i in 0..self.blocks.len() {
            let (y, attn) = self.block(g, p, i, x)?;
            if capture_attention == Some(i) {
                attention = Some(attn);
            }
            x = y;
        }
        let tokens = g.layer_norm(x, p.var(self.norm.0), p.var(self.norm.1), LN_EPS)?;
        Ok(Features {
            tokens,
            last_block: x,
            attention,
            grid: self.cfg.grid(),
            has_class_token: self.cfg.use_class_token,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var, mask: Option<&MaskInput>) -> Result<Features> {
        let x = self.embed(g, p, images, mask)?;
        self.encode(g, p, x, None)
    }
}

/// Mean over image tokens of `[B, N, d]` features; the class token, when
/// present, is excluded.
pub fn mean_pool_var(g: &mut Graph, features: Var, has_class_token: bool) -> Result<Var> {
    let n = g.shape(features)[1];
    let start = usize::from(has_class_token);
    if n <= start {
        return Err(Error::shape("mean_pool", "no image tokens"));
    }
    let x = g.slice(features, 1, start, n)?;
    g.mean(x, 1)
}

/// A token sequence of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `[n (+1), d]`
    pub tokens: Tensor,
    pub grid: (usize, usize),
    pub has_class_token: bool,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, grid: (usize, usize), has_class_token: bool) -> Result<Self> {
        let expected = grid.0 * grid.1 + usize::from(has_class_token);
        if tokens.ndim() != 2 || tokens.shape()[0] != expected {
            return Err(Error::shape(
                "token_sequence",
                format!("{:?} tokens for grid {grid:?} (class token: {has_class_token})", tokens.shape()),
            ));
        }
        Ok(TokenSequence { tokens, grid, has_class_token })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Image-token rows, class token excluded.
    pub fn image_tokens(&self) -> Tensor {
        let start = usize::from(self.has_class_token);
        let d = self.dim();
        Tensor::from_parts(vec![self.len() - start, d], self.tokens.data()[start * d..].to_vec())
    }
}

/// Mean of the image tokens of a sequence.
pub fn mean_pool(seq: &TokenSequence) -> Result<Tensor> {
    let mut g = Graph::new(false);
    let d = seq.dim();
    let x = g.input(seq.tokens.clone().reshape(vec![1, seq.len(), d])?, false);
    let pooled = mean_pool_var(&mut g, x, seq.has_class_token)?;
    g.value(pooled).clone().reshape(vec![d])
}

/// A backbone that owns its parameters.
#[derive(Debug, Clone)]
pub struct ViTModel {
    pub vit: ViT,
    pub params: ParamStore,
}

/// Builds a backbone with parameters drawn from the init stream of `seed`.
pub fn build_vit(cfg: &ViTConfig, seed: u64) -> Result<ViTModel> {
    let mut params = ParamStore::new();
    let mut rng = Rng::stream(seed, Stream::Init);
    let vit = ViT::register(cfg, &mut params, "", &mut rng)?;
    Ok(ViTModel { vit, params })
}

impl ViTModel {
    pub fn cfg(&self) -> &ViTConfig {
        &self.vit.cfg
    }

    fn image_batch(&self, image: &Tensor) -> Result<Tensor> {
        let n = self.cfg().image_size;
        match image.shape() {
            [h, w] if *h == n && *w == n => image.clone().reshape(vec![1, 1, n, n]),
            [1, h, w] if *h == n && *w == n => image.clone().reshape(vec![1, 1, n, n]),
            s => Err(Error::shape(
                "patchify",
                format!("image {s:?} does not match model size {n}x{n} (patch {})", self.cfg().patch_size),
            )),
        }
    }

    /// Embedded token sequence of one `[H, W]` image.
    pub fn patchify(&self, image: &Tensor) -> Result<TokenSequence> {
        let mut g = Graph::new(false);
        let p = g.bind(&self.params, false);
        let x = g.input(self.image_batch(image)?, false);
        let t = self.vit.embed(&mut g, &p, x, None)?;
        let n = self.cfg().num_tokens();
        let tokens = g.value(t).clone().reshape(vec![n, self.cfg().embed_dim])?;
        TokenSequence::new(tokens, self.cfg().grid(), self.cfg().use_class_token)
    }

    fn run_tokens(&self, seq: &TokenSequence, f: impl FnOnce(&mut Graph, &Bound, Var) -> Result<Var>) -> Result<TokenSequence> {
        let mut g = Graph::new(false);
        let p = g.bind(&self.params, false);
        let x = g.input(seq.tokens.clone().reshape(vec![1, seq.len(), seq.dim()])?, false);
        let y = f(&mut g, &p, x)?;
        let tokens = g.value(y).clone().reshape(vec![seq.len(), seq.dim()])?;
        TokenSequence::new(tokens, seq.grid, seq.has_class_token)
    }

    pub fn block_forward(&self, index: usize, seq: &TokenSequence) -> Result<TokenSequence> {
        if index >= self.vit.blocks.len() {
            return Err(Error::config("block_index", format!("{index} >= depth {}", self.vit.blocks.len())));
        }
        self.run_tokens(seq, |g, p, x| Ok(self.vit.block(g, p, index, x)?.0))
    }

    /// All blocks and the final LayerNorm, evaluation mode.
    pub fn forward_features(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        self.run_tokens(seq, |g, p, x| Ok(self.vit.encode(g, p, x, None)?.tokens))
    }

    pub fn param_count(&self) -> usize {
        self.params.num_elements()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(depth: usize) -> ViTConfig {
        ViTConfig { depth, ..ViTConfig::new(32, depth, 2, 32) }
    }

    #[test]
    fn swiglu_widths() {
        assert_eq!(swiglu_hidden(192), 512);
        assert_eq!(swiglu_hidden(384), 1024);
        assert_eq!(swiglu_hidden(768), 2048);
        assert_eq!(swiglu_hidden(64), 176);
    }

    #[test]
    fn closed_form_count_matches_registration() {
        let m = build_vit(&micro(2), 0).unwrap();
        assert_eq!(m.param_count(), m.cfg().param_count());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = micro(1);
        c.image_size = 30;
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
        let mut c = micro(1);
        c.heads = 3;
        assert!(c.validate().is_err());
        let c = ViTConfig::new(24, 1, 4, 32); // head dim 6
        assert!(c.validate().is_err());
    }

    #[test]
    fn token_counts() {
        let cfg = ViTConfig::preset(Preset::Micro, 224);
        assert_eq!(cfg.num_patches(), 196);
        assert_eq!(cfg.num_tokens(), 197);
    }

    #[test]
    fn rope_identity_at_origin() {
        let x = Tensor::new(vec![1, 8], (0..8).map(|v| v as f32 + 0.5).collect()).unwrap();
        // grid 1x1 without class token: the only token sits at (0, 0)
        let y = rope_rotate(&x, (1, 1), false).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn rope_class_token_bypasses() {
        let x = Tensor::new(vec![5, 8], (0..40).map(|v| (v as f32).sin()).collect()).unwrap();
        let y = rope_rotate(&x, (2, 2), true).unwrap();
        assert_eq!(&y.data()[..8], &x.data()[..8]);
    }

    #[test]
    fn depth_zero_is_final_norm() {
        let m = build_vit(&micro(0), 3).unwrap();
        let img = Tensor::new(vec![32, 32], (0..1024).map(|v| (v as f32 * 0.1).sin()).collect()).unwrap();
        let seq = m.patchify(&img).unwrap();
        let out = m.forward_features(&seq).unwrap();
        // unit gain, zero bias: each row is standardized
        for row in out.tokens.data().chunks(32) {
            let mean: f32 = row.iter().sum::<f32>() / 32.0;
            assert!(mean.abs() < 1e-5);
        }
        let mut g = Graph::new(false);
        let x = g.input(seq.tokens.clone(), false);
        let gm = g.constant(Tensor::full([32], 1.0));
        let bt = g.constant(Tensor::zeros([32]));
        let y = g.layer_norm(x, gm, bt, LN_EPS).unwrap();
        assert!(g.value(y).bit_eq(&out.tokens));
    }

    #[test]
    fn mean_pool_examples() {
        let t = Tensor::new(vec![3, 2], vec![9.0, 9.0, 1.0, 2.0, 3.0, 6.0]).unwrap();
        let seq = TokenSequence::new(t, (1, 2), true).unwrap();
        assert_eq!(mean_pool(&seq).unwrap().data(), &[2.0, 4.0]);
    }
}
