//! Grad-CAM, attention query maps and heatmap rendering.

use std::path::Path;

use crate::data::{self, BBox, DatasetManifest, Image, Split, Target};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{self, LocalizationResult};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transfer::Classifier;
use crate::vit::{mean_pool_var, ViT, LN_EPS};

/// A class-activation or attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Raw values on the token grid, `[gh, gw]`.
    pub grid: Tensor,
    /// Bilinearly upsampled (grid values at patch centres) and min-max
    /// normalized to `[0, 1]`, `[H, W]`.
    pub normalized: Tensor,
    /// Set when the map carried no spatial information; `normalized` is
    /// then all zeros.
    pub constant: bool,
}

impl Heatmap {
    /// Upsamples `grid` to `h x w` and rescales it to span `[0, 1]`.
    pub fn from_grid(grid: Tensor, h: usize, w: usize) -> Result<Self> {
        let (gh, gw) = match grid.shape() {
            [a, b] => (*a, *b),
            s => return Err(Error::shape("heatmap", format!("expected a [gh, gw] grid, got {s:?}"))),
        };
        if !grid.all_finite() {
            return Err(Error::Numerical("heatmap grid has non-finite values".into()));
        }
        let up = data::resize_bilinear_centered(&Image::new(gh, gw, grid.data().to_vec())?, h, w)?;
        let (lo, hi) = up.pixels().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let constant = !(hi - lo > 0.0);
        let pixels = if constant {
            vec![0.0; h * w]
        } else {
            up.pixels().iter().map(|&v| (v - lo) / (hi - lo)).collect()
        };
        Ok(Heatmap {
            grid,
            normalized: Tensor::new(vec![h, w], pixels)?,
            constant,
        })
    }
}

fn batch_of_one(image: &Tensor, size: usize) -> Result<Tensor> {
    match image.shape() {
        [h, w] if *h == size && *w == size => image.clone().reshape(vec![1, 1, size, size]),
        s => Err(Error::shape("interpret", format!("image {s:?} does not match model size {size}"))),
    }
}

/// Output of transformer block `block` for one normalized `[H, W]` image,
/// `[N, d]` including the class token when the model has one.
pub fn block_tokens(vit: &ViT, params: &ParamStore, image: &Tensor, block: usize) -> Result<Tensor> {
    check_block(vit, block)?;
    let mut g = Graph::new(false);
    let p = g.bind(params, false);
    let x = g.input(batch_of_one(image, vit.cfg.image_size)?, false);
    let mut x = vit.embed(&mut g, &p, x, None)?;
    for i in 0..=block {
        x = vit.block(&mut g, &p, i, x)?.0;
    }
    let v = g.value(x).clone();
    let (n, d) = (v.shape()[1], v.shape()[2]);
    v.reshape(vec![n, d])
}

fn check_block(vit: &ViT, block: usize) -> Result<()> {
    if block >= vit.cfg.depth {
        return Err(Error::config("block", format!("{block} >= depth {}", vit.cfg.depth)));
    }
    Ok(())
}

/// Grad-CAM grid `[gh, gw]` from the output `a [N, d]` of block `block`:
/// `ReLU(sum_c w_c A_c)` with `w_c` the grid mean of `d logit_target / d A_c`.
pub fn grad_cam_grid(model: &Classifier, a: &Tensor, target_class: usize, block: usize) -> Result<Tensor> {
    let k = model.head.num_classes;
    if target_class >= k {
        return Err(Error::config("target_class", format!("{target_class} >= {k} classes")));
    }
    let vit = &model.vit;
    check_block(vit, block)?;
    let (gh, gw) = vit.cfg.grid();
    let off = usize::from(vit.cfg.use_class_token);
    let d = vit.cfg.embed_dim;
    if a.shape() != [gh * gw + off, d] {
        return Err(Error::shape("grad_cam", format!("tokens {:?} for grid {gh}x{gw}", a.shape())));
    }
    let mut g = Graph::new(false);
    let p = g.bind(&model.params, false);
    let n = a.shape()[0];
    let av = g.input(a.clone().reshape(vec![1, n, d])?, true);
    let mut x = av;
    for i in block + 1..vit.cfg.depth {
        x = vit.block(&mut g, &p, i, x)?.0;
    }
    let y = g.layer_norm(x, p.var(vit.norm.0), p.var(vit.norm.1), LN_EPS)?;
    let pooled = mean_pool_var(&mut g, y, vit.cfg.use_class_token)?;
    let logits = g.linear(pooled, p.var(model.head.w), Some(p.var(model.head.b)))?;
    let logit = g.slice(logits, 1, target_class, target_class + 1)?;
    let logit = g.sum_all(logit)?;
    g.backward(logit)?;
    let grad = g.grad(av).cloned().unwrap_or_else(|| Tensor::zeros(vec![1, n, d]));
    let (ad, gd) = (&a.data()[off * d..], &grad.data()[off * d..]);
    let cells = gh * gw;
    let weights: Vec<f64> = (0..d)
        .map(|c| (0..cells).map(|i| gd[i * d + c] as f64).sum::<f64>() / cells as f64)
        .collect();
    let cam = (0..cells)
        .map(|i| {
            let s: f64 = (0..d).map(|c| weights[c] * ad[i * d + c] as f64).sum();
            s.max(0.0) as f32
        })
        .collect();
    Tensor::new(vec![gh, gw], cam)
}

/// Grad-CAM of one normalized `[H, W]` image for `target_class` at the
/// output of block `block` (the last block when `None`), upsampled to `out`
/// (defaults to the model resolution).
pub fn grad_cam(
    model: &Classifier,
    image: &Tensor,
    target_class: usize,
    block: Option<usize>,
    out: Option<(usize, usize)>,
) -> Result<Heatmap> {
    let block = block.unwrap_or(model.vit.cfg.depth.saturating_sub(1));
    let a = block_tokens(&model.vit, &model.params, image, block)?;
    let grid = grad_cam_grid(model, &a, target_class, block)?;
    let s = model.vit.cfg.image_size;
    let (h, w) = out.unwrap_or((s, s));
    let hm = Heatmap::from_grid(grid, h, w)?;
    if hm.constant {
        log::warn!("grad-cam for class {target_class} is constant; returning an all-zero map");
    }
    Ok(hm)
}

/// Head-averaged post-softmax attention of the query token containing
/// pixel `point = (y, x)` over the image-token keys of block `block`.
pub fn attention_query_map(vit: &ViT, params: &ParamStore, image: &Tensor, point: (usize, usize), block: usize) -> Result<Heatmap> {
    let s = vit.cfg.image_size;
    if point.0 >= s || point.1 >= s {
        return Err(Error::config("ref_point", format!("{point:?} is outside the {s}x{s} image")));
    }
    check_block(vit, block)?;
    let mut g = Graph::new(false);
    let p = g.bind(params, false);
    let x = g.input(batch_of_one(image, s)?, false);
    let e = vit.embed(&mut g, &p, x, None)?;
    let f = vit.encode(&mut g, &p, e, Some(block))?;
    let attn = g.value(f.attention.expect("attention was requested"));
    let (heads, n) = (attn.shape()[1], attn.shape()[2]);
    let (gh, gw) = vit.cfg.grid();
    let off = usize::from(vit.cfg.use_class_token);
    let ps = vit.cfg.patch_size;
    let q = off + (point.0 / ps) * gw + point.1 / ps;
    let mut grid = vec![0.0f32; gh * gw];
    for h in 0..heads {
        let row = &attn.data()[(h * n + q) * n..(h * n + q + 1) * n];
        for (i, v) in grid.iter_mut().enumerate() {
            *v += row[off + i] / heads as f32;
        }
    }
    Heatmap::from_grid(Tensor::new(vec![gh, gw], grid)?, s, s)
}

/// Blue-to-red colour of a value in `[0, 1]` (the usual "jet" ramp:
/// dark blue, blue, cyan, yellow, red, dark red).
pub fn colormap(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f32| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// RGB bytes of `base` blended with the colour-mapped heatmap at opacity
/// `alpha`.
pub fn blend_heatmap(heatmap: &Tensor, base: &Image, alpha: f32) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", format!("{alpha} is outside [0, 1]")));
    }
    if heatmap.shape() != [base.height(), base.width()] {
        return Err(Error::shape(
            "render_heatmap",
            format!("heatmap {:?} vs image {}x{}", heatmap.shape(), base.height(), base.width()),
        ));
    }
    let mut out = Vec::with_capacity(3 * heatmap.len());
    for (&h, &b) in heatmap.data().iter().zip(base.pixels()) {
        let b = b.clamp(0.0, 1.0);
        for c in colormap(h) {
            out.push((((1.0 - alpha) * b + alpha * c) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Writes the blended overlay as an 8-bit RGB PNG.
pub fn render_heatmap(heatmap: &Tensor, base: &Image, out_path: impl AsRef<Path>, alpha: f32) -> Result<()> {
    let rgb = blend_heatmap(heatmap, base, alpha)?;
    data::write_rgb_png(out_path, &rgb, base.height(), base.width())
}

/// One scored localization sample.
#[derive(Debug, Clone)]
pub struct CamSample {
    pub path: std::path::PathBuf,
    pub class: usize,
    pub bbox: BBox,
    pub heatmap: Heatmap,
    /// The image at its original resolution.
    pub image: Image,
}

/// Grad-CAMs of every box row of a localization manifest split, upsampled
/// to each image's original size, for the class named by the row.
pub fn cam_samples(
    model: &Classifier,
    label_names: &[String],
    manifest: &DatasetManifest,
    split: Split,
    mean: f32,
    std: f32,
    block: Option<usize>,
) -> Result<Vec<CamSample>> {
    let s = model.vit.cfg.image_size;
    let mut out = vec![];
    for row in manifest.split(split) {
        let Target::Box { label, bbox } = &row.target else {
            return Err(Error::Data(format!("{}: expected a box row", row.path.display())));
        };
        let class = label_names
            .iter()
            .position(|n| n == label)
            .ok_or_else(|| Error::Data(format!("{}: label `{label}` is not a class of the model", row.path.display())))?;
        let image = data::decode_image(&row.path)?;
        let x = data::normalize(&data::resize_bilinear(&image, s, s)?, mean, std)?;
        let heatmap = grad_cam(model, &x, class, block, Some((image.height(), image.width())))?;
        out.push(CamSample {
            path: row.path.clone(),
            class,
            bbox: *bbox,
            heatmap,
            image,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no {} rows to localize", split.as_str())));
    }
    Ok(out)
}

/// Threshold sweep over the CAMs of `samples`.
pub fn localize(samples: &[CamSample], thresholds: &[f32]) -> Result<LocalizationResult> {
    let cams: Vec<Tensor> = samples.iter().map(|s| s.heatmap.normalized.clone()).collect();
    let boxes: Vec<BBox> = samples.iter().map(|s| s.bbox).collect();
    metrics::cam_localize(&cams, &boxes, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transfer::{LabelMode, HEAD_BIAS, HEAD_WEIGHT};
    use crate::vit::ViTConfig;

    fn model() -> Classifier {
        Classifier::new(&ViTConfig::new(16, 1, 2, 128), 2, LabelMode::Single, 0.0, 3).unwrap()
    }

    #[test]
    fn normalization_spans_unit_interval() {
        let hm = Heatmap::from_grid(Tensor::new(vec![2, 2], vec![1.0, 3.0, 2.0, 5.0]).unwrap(), 5, 5).unwrap();
        let (lo, hi) = hm.normalized.data().iter().fold((1.0f32, 0.0f32), |(a, b), &v| (a.min(v), b.max(v)));
        assert_eq!((lo, hi), (0.0, 1.0));
        assert!(!hm.constant);
        let flat = Heatmap::from_grid(Tensor::full(vec![3, 3], 0.7), 6, 6).unwrap();
        assert!(flat.constant && flat.normalized.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planted_activation_sets_the_peak() {
        // Only channel 0 varies across cells, so the CAM is ReLU(w_0 * A[., 0]) up
        // to a constant shift; planting a spike of the right sign at (3, 3) must
        // move the argmax there.
        let m = model();
        let (gh, gw) = m.vit.cfg.grid();
        let d = 16;
        let argmax = |t: &Tensor| t.data().iter().enumerate().fold(0, |b, (i, &v)| if v > t.data()[b] { i } else { b });
        let hits = [9.0f32, -9.0]
            .iter()
            .filter(|&&spike| {
                let mut a = Tensor::full(vec![gh * gw + 1, d], 0.3);
                for i in 0..gh * gw {
                    a.data_mut()[(1 + i) * d] = 0.1 * ((i * 7) % 5) as f32;
                }
                a.data_mut()[(1 + 3 * gw + 3) * d] = spike;
                let grid = grad_cam_grid(&m, &a, 0, 0).unwrap();
                argmax(&grid) == 3 * gw + 3 && grid.data()[3 * gw + 3] > 0.0
            })
            .count();
        assert_eq!(hits, 1);
    }

    #[test]
    fn constant_logit_shift_leaves_cam_unchanged() {
        let mut m = model();
        let mut rng = crate::rng::Rng::new(1);
        let img = Tensor::new(vec![128, 128], (0..128 * 128).map(|_| rng.normal()).collect()).unwrap();
        let a = grad_cam(&m, &img, 1, None, None).unwrap();
        let b0 = m.params.by_name(HEAD_BIAS).unwrap().clone();
        m.params.set(HEAD_BIAS, b0.map(|v| v + 4.0)).unwrap();
        let b = grad_cam(&m, &img, 1, None, None).unwrap();
        assert!(a.grid.bit_eq(&b.grid));
        // positive rescaling of the head scales the CAM but not its argmax
        let w = m.params.by_name(HEAD_WEIGHT).unwrap().clone();
        m.params.set(HEAD_WEIGHT, w.map(|v| v * 3.0)).unwrap();
        let c = grad_cam(&m, &img, 1, None, None).unwrap();
        let argmax = |t: &Tensor| t.data().iter().enumerate().fold(0, |b, (i, &v)| if v > t.data()[b] { i } else { b });
        assert_eq!(argmax(&a.grid), argmax(&c.grid));
        assert!(grad_cam(&m, &img, 2, None, None).is_err());
    }

    #[test]
    fn attention_map_is_a_sub_distribution() {
        let m = model();
        let img = Tensor::full(vec![128, 128], 0.2);
        let hm = attention_query_map(&m.vit, &m.params, &img, (40, 70), 0).unwrap();
        let total: f32 = hm.grid.data().iter().sum();
        assert!(hm.grid.data().iter().all(|&v| v >= 0.0));
        assert!(total <= 1.0 + 1e-5);
        let again = attention_query_map(&m.vit, &m.params, &img, (40, 70), 0).unwrap();
        assert_eq!(hm, again);
        assert!(attention_query_map(&m.vit, &m.params, &img, (128, 0), 0).is_err());
        assert!(attention_query_map(&m.vit, &m.params, &img, (0, 0), 1).is_err());
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let mut m = model();
        for name in ["blocks.0.attn.qkv.weight", "blocks.0.attn.qkv.bias"] {
            let t = m.params.by_name(name).unwrap().clone();
            m.params.set(name, t.map(|_| 0.0)).unwrap();
        }
        let mut rng = crate::rng::Rng::new(4);
        let img = Tensor::new(vec![128, 128], (0..128 * 128).map(|_| rng.normal()).collect()).unwrap();
        let hm = attention_query_map(&m.vit, &m.params, &img, (5, 5), 0).unwrap();
        let n = hm.grid.len() as f32;
        for &v in hm.grid.data() {
            assert!((v - 1.0 / (n + 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn rendering() {
        let base = Image::new(2, 3, vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6]).unwrap();
        let hm = Tensor::new(vec![2, 3], vec![0.0, 0.1, 0.5, 0.9, 1.0, 0.3]).unwrap();
        let rgb = blend_heatmap(&hm, &base, 0.0).unwrap();
        for (i, &b) in base.pixels().iter().enumerate() {
            let v = (b * 255.0).round() as u8;
            assert_eq!(&rgb[3 * i..3 * i + 3], &[v, v, v]);
        }
        let cold = blend_heatmap(&Tensor::zeros(vec![2, 3]), &base, 1.0).unwrap();
        assert!(cold.chunks(3).all(|c| c == [0, 0, 128]));
        assert!(colormap(1.0)[0] > colormap(1.0)[2] && colormap(0.0)[2] > colormap(0.0)[0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        render_heatmap(&hm, &base, &p, 0.4).unwrap();
        assert!(matches!(data::decode_image(&p), Err(Error::UnsupportedImage { .. })));
        assert!(blend_heatmap(&hm, &base, 1.5).is_err());
    }
}
