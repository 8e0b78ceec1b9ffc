//! Image decoding, preprocessing, augmentation, manifests and the synthetic
//! corpus generator.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded_permutation, Rng};
use crate::tensor::Tensor;

/// Side length images are resized to once, before augmentation.
pub const DEFAULT_CACHE_SIZE: usize = 336;
/// Smallest side accepted for training images.
pub const MIN_TRAIN_SIDE: usize = 16;
const STD_FLOOR: f64 = 1e-6;
const CROP_RETRIES: usize = 10;
const PNG_TRAILER: [u8; 8] = [0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82];

/// Single-channel image with pixel values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Data(format!(
                "image of {height}x{width} cannot hold {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("image has non-finite pixels".into()));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w] | [1, h, w] => Image::new(*h, *w, t.data().to_vec()),
            s => Err(Error::shape("image", format!("expected [H, W], got {s:?}"))),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// `[H, W]` tensor of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.height, self.width], self.pixels.clone())
    }

    fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        let mut pixels = Vec::with_capacity(h * w);
        for y in top..top + h {
            pixels.extend_from_slice(&self.pixels[y * self.width + left..y * self.width + left + w]);
        }
        Image { height: h, width: w, pixels }
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

// ---------------------------------------------------------------------------
// Decoding and encoding

/// Reads an 8-bit grayscale PNG or binary PGM (`P5`) file.
pub fn decode_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes, path)
}

/// Decodes in-memory file contents; `path` only labels errors.
pub fn decode_bytes(bytes: &[u8], path: &Path) -> Result<Image> {
    let (h, w, raw) = if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes, path)?
    } else if bytes.starts_with(b"P5") {
        decode_pgm(bytes, path)?
    } else {
        return Err(Error::UnsupportedImage {
            path: path.into(),
            detail: "unknown format (expected PNG or binary PGM)".into(),
        });
    };
    let pixels = raw.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image { height: h, width: w, pixels })
}

fn unsupported(path: &Path, detail: impl Into<String>) -> Error {
    Error::UnsupportedImage {
        path: path.into(),
        detail: detail.into(),
    }
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let truncated = !bytes.ends_with(&PNG_TRAILER);
    let fail = |e: png::DecodingError| {
        if truncated {
            Error::TruncatedImage { path: path.into() }
        } else {
            unsupported(path, e.to_string())
        }
    };
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(fail)?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    if info.color_type != png::ColorType::Grayscale {
        return Err(unsupported(path, format!("unsupported channels: {:?}", info.color_type)));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unsupported(path, format!("unsupported bit depth: {:?}", info.bit_depth)));
    }
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(fail)?;
    buf.truncate(frame.buffer_size());
    if buf.len() != w * h {
        return Err(Error::TruncatedImage { path: path.into() });
    }
    Ok((h, w, buf))
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::TruncatedImage { path: path.into() }),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| unsupported(path, "malformed PGM header"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(unsupported(path, format!("unsupported bit depth: maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(unsupported(path, "empty PGM"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let end = pos + w * h;
    if bytes.len() < end {
        return Err(Error::TruncatedImage { path: path.into() });
    }
    Ok((h, w, bytes[pos..end].to_vec()))
}

/// Width and height of an image file.
pub fn image_dims(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let img = decode_image(path)?;
    Ok((img.width, img.height))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    create_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    };
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Writes an 8-bit grayscale PNG, rounding `v * 255`.
pub fn write_gray_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_png(path.as_ref(), img.width, img.height, png::ColorType::Grayscale, &img.to_bytes())
}

/// Writes a binary mask as 0/255 grayscale.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &[bool], height: usize, width: usize) -> Result<()> {
    let data: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, &data)
}

/// Writes interleaved 8-bit RGB.
pub fn write_rgb_png(path: impl AsRef<Path>, rgb: &[u8], height: usize, width: usize) -> Result<()> {
    if rgb.len() != 3 * height * width {
        return Err(Error::Data(format!("rgb buffer of {} bytes for {height}x{width}", rgb.len())));
    }
    write_png(path.as_ref(), width, height, png::ColorType::Rgb, rgb)
}

/// Reads a 0/255 mask; any nonzero byte is foreground.
pub fn decode_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let img = decode_image(path)?;
    let mask = img.pixels.iter().map(|&v| v > 0.0).collect();
    Ok((img.height, img.width, mask))
}

// ---------------------------------------------------------------------------
// Geometric transforms

/// Bilinear resize with aligned corners: output `(i, j)` samples the input at
/// `(i (H-1)/(out_h-1), j (W-1)/(out_w-1))`; an output extent of one samples
/// coordinate 0.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                if out == 1 || inp == 1 {
                    return (0, 0, 0.0);
                }
                let src = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
                let lo = (src.floor() as usize).min(inp - 1);
                (lo, (lo + 1).min(inp - 1), src - lo as f64)
            })
            .collect()
    };
    resample(img, out_h, out_w, taps)
}

/// Bilinear resize on pixel centres: output pixel `i` samples the input at
/// `(i + 0.5) H / out_h - 0.5`, clamped to the edge pixels. Each input pixel
/// lands at the centre of the block it covers, which is what token-grid maps
/// need.
pub fn resize_bilinear_centered(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = (src.floor() as usize).min(inp - 1);
                (lo, (lo + 1).min(inp - 1), src - lo as f64)
            })
            .collect()
    };
    resample(img, out_h, out_w, taps)
}

fn resample(img: &Image, out_h: usize, out_w: usize, taps: impl Fn(usize, usize) -> Vec<(usize, usize, f64)>) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("resize", format!("output size {out_h}x{out_w} must be positive")));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let ty = taps(img.height, out_h);
    let tx = taps(img.width, out_w);
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = (1.0 - fx) * img.get(y0, x0) as f64 + fx * img.get(y0, x1) as f64;
            let bot = (1.0 - fx) * img.get(y1, x0) as f64 + fx * img.get(y1, x1) as f64;
            pixels.push(((1.0 - fy) * top + fy * bot) as f32);
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_scale_min: f32,
    pub crop_size: usize,
    pub hflip_prob: f32,
    pub aspect: (f32, f32),
    pub mean: f32,
    pub std: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale_min: 0.2,
            crop_size: 224,
            hflip_prob: 0.5,
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return Err(Error::config("crop_scale_min", format!("{} is outside (0, 1]", self.crop_scale_min)));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("hflip_prob", format!("{} is outside [0, 1]", self.hflip_prob)));
        }
        if !(self.std > 0.0) {
            return Err(Error::config("std", "must be positive"));
        }
        if self.crop_size == 0 {
            return Err(Error::config("crop_size", "must be positive"));
        }
        if !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1) {
            return Err(Error::config("aspect", format!("{:?} is not an increasing positive range", self.aspect)));
        }
        Ok(())
    }
}

/// Crops a region with area fraction uniform in `[crop_scale_min, 1]` and
/// log-uniform aspect ratio in `cfg.aspect`, then resizes it to
/// `crop_size` squared. After ten rejected draws it falls back to the
/// largest centered square.
pub fn random_resized_crop(img: &Image, rng: &mut Rng, cfg: &AugmentConfig) -> Result<Image> {
    cfg.validate()?;
    let (h, w) = (img.height, img.width);
    let area = (h * w) as f64;
    let (la, lb) = ((cfg.aspect.0 as f64).ln(), (cfg.aspect.1 as f64).ln());
    for _ in 0..CROP_RETRIES {
        let target = area * rng.uniform(cfg.crop_scale_min, 1.0) as f64;
        let ratio = (la + (lb - la) * rng.next_f64()).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.below((h - ch + 1) as u64) as usize;
            let left = rng.below((w - cw + 1) as u64) as usize;
            return resize_bilinear(&img.crop(top, left, ch, cw), cfg.crop_size, cfg.crop_size);
        }
    }
    let side = h.min(w);
    let region = img.crop((h - side) / 2, (w - side) / 2, side, side);
    resize_bilinear(&region, cfg.crop_size, cfg.crop_size)
}

/// Mirrors the columns with probability `p`.
pub fn hflip(img: &Image, rng: &mut Rng, p: f32) -> Image {
    if !rng.bernoulli(p) {
        return img.clone();
    }
    flip_columns(img)
}

pub fn flip_columns(img: &Image) -> Image {
    let mut out = img.clone();
    for row in out.pixels.chunks_mut(img.width) {
        row.reverse();
    }
    out
}

/// `(pixel - mean) / std` as an `[H, W]` tensor.
pub fn normalize(img: &Image, mean: f32, std: f32) -> Result<Tensor> {
    if !(std > 0.0) {
        return Err(Error::config("std", "must be positive"));
    }
    Ok(img.to_tensor().map(|v| (v - mean) / std))
}

/// Training view: random resized crop, flip, normalize.
pub fn augment(img: &Image, rng: &mut Rng, cfg: &AugmentConfig) -> Result<Tensor> {
    let crop = random_resized_crop(img, rng, cfg)?;
    let flipped = hflip(&crop, rng, cfg.hflip_prob);
    normalize(&flipped, cfg.mean, cfg.std)
}

/// Evaluation view: resize to `crop_size`, normalize.
pub fn eval_view(img: &Image, cfg: &AugmentConfig) -> Result<Tensor> {
    normalize(&resize_bilinear(img, cfg.crop_size, cfg.crop_size)?, cfg.mean, cfg.std)
}

/// Stacks `[H, W]` tensors into `[B, 1, H, W]`.
pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = match first.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::shape("stack_batch", format!("expected [H, W], got {s:?}"))),
    };
    let mut data = Vec::with_capacity(items.len() * h * w);
    for t in items {
        if t.shape() != [h, w] {
            return Err(Error::shape("stack_batch", format!("{:?} vs {:?}", t.shape(), [h, w])));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![items.len(), 1, h, w], data)
}

// ---------------------------------------------------------------------------
// Statistics

/// Mean and population standard deviation over every pixel, with the
/// standard deviation floored at `1e-6`.
pub fn pixel_stats<'a>(images: impl IntoIterator<Item = &'a Image> + Clone) -> Result<(f32, f32)> {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for img in images.clone() {
        sum += img.pixels.iter().map(|&v| v as f64).sum::<f64>();
        count += img.pixels.len();
    }
    if count == 0 {
        return Err(Error::Data("no pixels to compute statistics over".into()));
    }
    let mean = sum / count as f64;
    let mut sq = 0.0f64;
    for img in images {
        sq += img.pixels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
    }
    let std = (sq / count as f64).sqrt().max(STD_FLOOR);
    Ok((mean as f32, std as f32))
}

/// Pixel statistics of the decoded train-split images of a manifest.
pub fn corpus_stats(manifest: &DatasetManifest) -> Result<(f32, f32)> {
    let train: Vec<Image> = manifest
        .rows
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| decode_image(&r.path))
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::Data("manifest has no train rows".into()));
    }
    pixel_stats(&train)
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cls,
    Seg,
    Loc,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Task::Cls),
            "seg" => Ok(Task::Seg),
            "loc" => Ok(Task::Loc),
            other => Err(Error::config("task", format!("`{other}` is not one of cls, seg, loc"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// Axis-aligned box in pixel coordinates, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl BBox {
    pub fn area(&self) -> f32 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    /// True when pixel `(y, x)` (its top-left corner) lies in the box.
    pub fn contains_pixel(&self, y: usize, x: usize) -> bool {
        let (x, y) = (x as f32, y as f32);
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// One entry per label column: 0, 1, or -1 for uncertain.
    Labels(Vec<i8>),
    Mask(PathBuf),
    Box { label: String, bbox: BBox },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub split: Split,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub task: Task,
    /// Label columns (cls) or distinct box labels in order of appearance (loc).
    pub label_names: Vec<String>,
    pub rows: Vec<ManifestRow>,
}

/// How uncertain (-1) labels are resolved before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertainPolicy {
    #[default]
    One,
    Zero,
    Exclude,
}

impl std::str::FromStr for UncertainPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" | "1" => Ok(UncertainPolicy::One),
            "zero" | "0" => Ok(UncertainPolicy::Zero),
            "exclude" => Ok(UncertainPolicy::Exclude),
            other => Err(Error::config("uncertain", format!("`{other}` is not one of one, zero, exclude"))),
        }
    }
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Index of a box label in `label_names`.
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_names.iter().position(|l| l == label)
    }

    /// Resolves uncertain labels: mapped to 1 or 0, or rows holding any
    /// uncertain label are dropped.
    pub fn resolve_uncertain(&self, policy: UncertainPolicy) -> DatasetManifest {
        let mut out = self.clone();
        out.rows.retain_mut(|row| {
            let Target::Labels(labels) = &mut row.target else {
                return true;
            };
            match policy {
                UncertainPolicy::Exclude => !labels.contains(&-1),
                UncertainPolicy::One | UncertainPolicy::Zero => {
                    let v = if policy == UncertainPolicy::One { 1 } else { 0 };
                    labels.iter_mut().filter(|l| **l == -1).for_each(|l| *l = v);
                    true
                }
            }
        });
        out
    }
}

fn manifest_err(path: &Path, row: usize, detail: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        row,
        detail: detail.into(),
    }
}

/// Parses a manifest CSV. The task is inferred from the header; relative
/// image and mask paths are resolved against the manifest's directory.
/// Row numbers in errors count data rows from 1.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| manifest_err(path, 0, format!("unreadable header: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.len() < 3 || header[0] != "path" || header[1] != "split" {
        return Err(manifest_err(path, 0, "header must start with `path,split`"));
    }
    let loc_header = ["label", "box_x0", "box_y0", "box_x1", "box_y1"];
    let task = if header.len() == 3 && header[2] == "mask_path" {
        Task::Seg
    } else if header[2..] == loc_header {
        Task::Loc
    } else {
        Task::Cls
    };
    let mut label_names: Vec<String> = match task {
        Task::Cls => header[2..].to_vec(),
        _ => Vec::new(),
    };
    let mut dims_cache: HashMap<PathBuf, (usize, usize)> = HashMap::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 1;
        let record = record.map_err(|e| manifest_err(path, row_no, format!("malformed row: {e}")))?;
        if record.len() != header.len() {
            return Err(manifest_err(
                path,
                row_no,
                format!("{} fields but header declares {}", record.len(), header.len()),
            ));
        }
        let field = |k: usize| record[k].trim();
        if field(0).is_empty() {
            return Err(manifest_err(path, row_no, "empty path"));
        }
        let image_path = base.join(field(0));
        let split: Split = field(1).parse().map_err(|e: Error| manifest_err(path, row_no, e.to_string()))?;
        let target = match task {
            Task::Cls => {
                let labels = (2..record.len())
                    .map(|k| match field(k) {
                        "1" => Ok(1),
                        "0" => Ok(0),
                        "-1" => Ok(-1),
                        other => Err(manifest_err(
                            path,
                            row_no,
                            format!("label `{}` is `{other}`, expected 0, 1 or -1", header[k]),
                        )),
                    })
                    .collect::<Result<Vec<i8>>>()?;
                Target::Labels(labels)
            }
            Task::Seg => {
                if field(2).is_empty() {
                    return Err(manifest_err(path, row_no, "empty mask_path"));
                }
                Target::Mask(base.join(field(2)))
            }
            Task::Loc => {
                let label = field(2).to_string();
                if label.is_empty() {
                    return Err(manifest_err(path, row_no, "empty box label"));
                }
                let mut c = [0f32; 4];
                for (k, v) in c.iter_mut().enumerate() {
                    *v = field(3 + k)
                        .parse()
                        .ok()
                        .filter(|v: &f32| v.is_finite())
                        .ok_or_else(|| manifest_err(path, row_no, format!("`{}` is not a number", header[3 + k])))?;
                }
                let bbox = BBox {
                    x0: c[0],
                    y0: c[1],
                    x1: c[2],
                    y1: c[3],
                };
                if !(bbox.x0 < bbox.x1 && bbox.y0 < bbox.y1) {
                    return Err(manifest_err(path, row_no, format!("box {c:?} needs x0 < x1 and y0 < y1")));
                }
                let (w, h) = match dims_cache.get(&image_path) {
                    Some(d) => *d,
                    None => {
                        let d = image_dims(&image_path).map_err(|e| manifest_err(path, row_no, e.to_string()))?;
                        dims_cache.insert(image_path.clone(), d);
                        d
                    }
                };
                if bbox.x0 < 0.0 || bbox.y0 < 0.0 || bbox.x1 > w as f32 || bbox.y1 > h as f32 {
                    return Err(manifest_err(path, row_no, format!("box {c:?} is outside the {w}x{h} image")));
                }
                if !label_names.contains(&label) {
                    label_names.push(label.clone());
                }
                Target::Box { label, bbox }
            }
        };
        rows.push(ManifestRow {
            path: image_path,
            split,
            target,
        });
    }
    Ok(DatasetManifest {
        task,
        label_names,
        rows,
    })
}

/// Writes a manifest with paths relative to `dir` when possible.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    create_parent(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let rel = |p: &Path| p.strip_prefix(&base).unwrap_or(p).to_string_lossy().into_owned();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut header = vec!["path".to_string(), "split".to_string()];
    match manifest.task {
        Task::Cls => header.extend(manifest.label_names.iter().cloned()),
        Task::Seg => header.push("mask_path".into()),
        Task::Loc => header.extend(["label", "box_x0", "box_y0", "box_x1", "box_y1"].map(String::from)),
    }
    w.write_record(&header).map_err(csv_err)?;
    for row in &manifest.rows {
        let mut rec = vec![rel(&row.path), row.split.as_str().to_string()];
        match &row.target {
            Target::Labels(l) => rec.extend(l.iter().map(|v| v.to_string())),
            Target::Mask(m) => rec.push(rel(m)),
            Target::Box { label, bbox } => {
                rec.push(label.clone());
                rec.extend([bbox.x0, bbox.y0, bbox.x1, bbox.y1].map(|v| v.to_string()));
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Keeps `ceil(fraction * N_train)` train rows: a prefix of one seeded
/// permutation, so smaller fractions select subsets of larger ones for the
/// same seed. Other splits and row order are preserved.
pub fn subsample(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("data_fraction", format!("{fraction} is outside (0, 1]")));
    }
    let train: Vec<usize> = (0..manifest.rows.len()).filter(|&i| manifest.rows[i].split == Split::Train).collect();
    let n = train.len();
    // the small slack keeps decimal fractions like 0.1 from rounding up
    let keep = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let keep = keep.clamp(usize::from(n > 0), n);
    let perm = seeded_permutation(n, seed);
    let mut selected = vec![false; manifest.rows.len()];
    for &p in &perm[..keep] {
        selected[train[p]] = true;
    }
    let mut out = manifest.clone();
    out.rows = manifest
        .rows
        .iter()
        .enumerate()
        .filter(|(i, r)| r.split != Split::Train || selected[*i])
        .map(|(_, r)| r.clone())
        .collect();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cached corpus

/// Images of a manifest decoded and resized once to a square cache size.
#[derive(Debug, Clone)]
pub struct ImageCache {
    pub size: usize,
    pub images: Vec<Image>,
}

impl ImageCache {
    /// Decodes and resizes every row of `manifest`, in row order.
    pub fn build(manifest: &DatasetManifest, size: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.rows.len());
        for row in &manifest.rows {
            let img = decode_image(&row.path)?;
            if img.height < MIN_TRAIN_SIDE || img.width < MIN_TRAIN_SIDE {
                return Err(Error::Data(format!(
                    "{}: {}x{} is smaller than {MIN_TRAIN_SIDE}x{MIN_TRAIN_SIDE}",
                    row.path.display(),
                    img.height,
                    img.width
                )));
            }
            images.push(resize_bilinear(&img, size, size)?);
        }
        Ok(ImageCache { size, images })
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: Task,
    pub count: usize,
    pub image_size: usize,
    /// Lesion half-extent range in pixels.
    pub radius: (f32, f32),
    /// Standard deviation of the background noise.
    pub noise: f32,
    /// Lesion intensity above the background.
    pub contrast: f32,
    /// Fractions of rows assigned to train and val; the rest is test.
    pub train_fraction: f32,
    pub val_fraction: f32,
    /// Fraction of cls/seg images drawn without a lesion (all-zero labels,
    /// empty mask). Loc rows always carry one.
    #[serde(default)]
    pub empty_fraction: f32,
}

impl SynthSpec {
    pub fn new(task: Task, count: usize, image_size: usize) -> Self {
        SynthSpec {
            task,
            count,
            image_size,
            radius: (image_size as f32 * 0.08, image_size as f32 * 0.16),
            noise: 0.08,
            contrast: 0.35,
            train_fraction: 0.7,
            val_fraction: 0.1,
            empty_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("count", "must be positive"));
        }
        if self.image_size < MIN_TRAIN_SIDE {
            return Err(Error::config("image_size", format!("must be at least {MIN_TRAIN_SIDE}")));
        }
        if !(self.radius.0 >= 1.0 && self.radius.0 <= self.radius.1 && 2.0 * self.radius.1 < self.image_size as f32) {
            return Err(Error::config("radius", format!("{:?} does not fit the image", self.radius)));
        }
        if !(self.noise >= 0.0) || !(self.contrast > 0.0) {
            return Err(Error::config("contrast", "noise must be nonnegative and contrast positive"));
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t >= 0.0 && v >= 0.0 && t + v <= 1.0) {
            return Err(Error::config("train_fraction", "split fractions must be nonnegative and sum to at most 1"));
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) || (self.task == Task::Loc && self.empty_fraction > 0.0) {
            return Err(Error::config("empty_fraction", "must lie in [0, 1] and be 0 for loc corpora"));
        }
        Ok(())
    }
}

/// One rendered synthetic sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub shape: Shape,
    /// Rendered lesion pixels.
    pub mask: Vec<bool>,
    /// Tight box around `mask`; `None` for a lesion-free image.
    pub bbox: Option<BBox>,
}

/// Rasterizes one lesion: a disc of radius `r` or a square of half-side `r`
/// centred at `(cy, cx)`.
pub fn rasterize(shape: Shape, size: usize, cy: f32, cx: f32, r: f32) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
            mask[y * size + x] = match shape {
                Shape::Disc => dy * dy + dx * dx <= r * r,
                Shape::Square => dy.abs() <= r && dx.abs() <= r,
            };
        }
    }
    mask
}

fn tight_box(mask: &[bool], size: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (y, x) = (i / size, i % size);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    (x0 != usize::MAX).then_some(BBox {
        x0: x0 as f32,
        y0: y0 as f32,
        x1: x1 as f32,
        y1: y1 as f32,
    })
}

/// Renders sample `index` of a corpus: smooth noisy background with one
/// bright lesion whose kind alternates by a seeded coin, or no lesion with
/// probability `empty_fraction`.
pub fn synth_sample(spec: &SynthSpec, seed: u64, index: usize) -> SynthSample {
    let n = spec.image_size;
    let mut rng = Rng::new(seed).split(index as u64);
    let empty = spec.empty_fraction > 0.0 && rng.split(EMPTY_TAG).next_f32() < spec.empty_fraction;
    let shape = if rng.bernoulli(0.5) { Shape::Disc } else { Shape::Square };
    let r = rng.uniform(spec.radius.0, spec.radius.1);
    let margin = r + 1.0;
    let cy = rng.uniform(margin, n as f32 - margin);
    let cx = rng.uniform(margin, n as f32 - margin);
    let mut mask = rasterize(shape, n, cy, cx, r);
    if empty {
        mask.fill(false);
    }
    let base = rng.uniform(0.25, 0.4);
    let tilt = (rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
    let level = base + spec.contrast * rng.uniform(0.85, 1.15);
    let pixels = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f32 / n as f32 - 0.5, (i % n) as f32 / n as f32 - 0.5);
            let bg = base + tilt.0 * y + tilt.1 * x;
            let v = if mask[i] { level } else { bg };
            (v + spec.noise * rng.normal()).clamp(0.0, 1.0)
        })
        .collect();
    let bbox = tight_box(&mask, n);
    SynthSample {
        image: Image {
            height: n,
            width: n,
            pixels,
        },
        shape,
        mask,
        bbox,
    }
}

const EMPTY_TAG: u64 = 0xE3F7;

fn synth_split(spec: &SynthSpec, index: usize) -> Split {
    let t = (spec.train_fraction * spec.count as f32).round() as usize;
    let v = (spec.val_fraction * spec.count as f32).round() as usize;
    if index < t {
        Split::Train
    } else if index < t + v {
        Split::Val
    } else {
        Split::Test
    }
}

/// Writes a synthetic corpus under `out_dir` and returns the manifest path.
/// Everything is a function of `(spec, seed)`.
pub fn synth_corpus(spec: &SynthSpec, seed: u64, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    spec.validate()?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out.join("images")).map_err(|e| Error::io(out, e))?;
    if spec.task == Task::Seg {
        std::fs::create_dir_all(out.join("masks")).map_err(|e| Error::io(out, e))?;
    }
    let mut rows = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let s = synth_sample(spec, seed, i);
        let img_path = out.join("images").join(format!("img_{i:05}.png"));
        write_gray_png(&img_path, &s.image)?;
        let target = match spec.task {
            Task::Cls => {
                let present = s.bbox.is_some();
                Target::Labels(vec![(present && s.shape == Shape::Disc) as i8, (present && s.shape == Shape::Square) as i8])
            }
            Task::Seg => {
                let mask_path = out.join("masks").join(format!("mask_{i:05}.png"));
                write_mask_png(&mask_path, &s.mask, spec.image_size, spec.image_size)?;
                Target::Mask(mask_path)
            }
            Task::Loc => Target::Box {
                label: s.shape.name().into(),
                bbox: s.bbox.expect("loc samples always hold a lesion"),
            },
        };
        rows.push(ManifestRow {
            path: img_path,
            split: synth_split(spec, i),
            target,
        });
    }
    let label_names = match spec.task {
        Task::Cls | Task::Loc => vec!["disc".to_string(), "square".to_string()],
        Task::Seg => Vec::new(),
    };
    let manifest = DatasetManifest {
        task: spec.task,
        label_names,
        rows,
    };
    let path = out.join("manifest.csv");
    write_manifest(&manifest, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, v: &[f32]) -> Image {
        Image::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn pgm_decoding() {
        let mut bytes = b"P5\n# comment\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 51, 0, 0, 0]);
        let im = decode_bytes(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!((im.height(), im.width()), (2, 3));
        assert_eq!(im.pixels()[1], 1.0);
        assert_eq!(im.pixels()[2], 51.0 / 255.0);
        let zeros = [b"P5 4 4 255\n".as_slice(), &[0u8; 16]].concat();
        assert!(decode_bytes(&zeros, Path::new("z.pgm")).unwrap().pixels().iter().all(|&v| v == 0.0));
        let short = [b"P5 4 4 255\n".as_slice(), &[0u8; 10]].concat();
        assert!(matches!(decode_bytes(&short, Path::new("s.pgm")), Err(Error::TruncatedImage { .. })));
        let deep = [b"P5 1 1 65535\n".as_slice(), &[0u8; 2]].concat();
        assert!(matches!(decode_bytes(&deep, Path::new("d.pgm")), Err(Error::UnsupportedImage { .. })));
    }

    #[test]
    fn png_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let im = img(2, 2, &[0.0, 1.0, 128.0 / 255.0, 3.0 / 255.0]);
        write_gray_png(&p, &im).unwrap();
        assert_eq!(decode_image(&p).unwrap(), im);

        let rgb = dir.path().join("rgb.png");
        write_rgb_png(&rgb, &[0; 12], 2, 2).unwrap();
        let err = decode_image(&rgb).unwrap_err().to_string();
        assert!(err.contains("unsupported channels"), "{err}");

        let bytes = std::fs::read(&p).unwrap();
        let cut = dir.path().join("cut.png");
        std::fs::write(&cut, &bytes[..bytes.len() - 20]).unwrap();
        assert!(matches!(decode_image(&cut), Err(Error::TruncatedImage { .. })));
    }

    #[test]
    fn resize_examples() {
        let src = img(2, 2, &[0.0, 2.0 / 6.0, 4.0 / 6.0, 1.0]);
        let out = resize_bilinear(&src, 3, 3).unwrap();
        let expect = [0.0, 1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 5.0, 6.0].map(|v| v / 6.0);
        for (a, b) in out.pixels().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(resize_bilinear(&src, 2, 2).unwrap(), src);
        let c = Image::constant(5, 7, 0.3);
        assert!(resize_bilinear(&c, 11, 3).unwrap().pixels().iter().all(|&v| v == 0.3));
        let one = resize_bilinear(&src, 1, 1).unwrap();
        assert_eq!(one.pixels(), &[0.0]);
    }

    #[test]
    fn flip_and_normalize() {
        let im = img(1, 2, &[1.0, 2.0]);
        let mut rng = Rng::new(0);
        assert_eq!(hflip(&im, &mut rng, 0.0), im);
        assert_eq!(hflip(&im, &mut rng, 1.0).pixels(), &[2.0, 1.0]);
        assert_eq!(flip_columns(&flip_columns(&im)), im);
        assert_eq!(normalize(&im, 1.0, 2.0).unwrap().data(), &[0.0, 0.5]);
        assert_eq!(normalize(&im, 0.0, 1.0).unwrap().data(), im.pixels());
        assert!(normalize(&im, 0.0, 0.0).is_err());
    }

    #[test]
    fn forced_full_crop() {
        let im = Image::new(8, 8, (0..64).map(|i| i as f32 / 64.0).collect()).unwrap();
        let cfg = AugmentConfig {
            crop_scale_min: 1.0,
            crop_size: 8,
            aspect: (1.0, 1.0),
            ..Default::default()
        };
        let out = random_resized_crop(&im, &mut Rng::new(3), &cfg).unwrap();
        assert_eq!(out, im);
    }

    #[test]
    fn crop_is_deterministic_and_sized() {
        let im = Image::new(20, 30, (0..600).map(|i| (i % 17) as f32 / 16.0).collect()).unwrap();
        let cfg = AugmentConfig {
            crop_size: 12,
            ..Default::default()
        };
        let a = random_resized_crop(&im, &mut Rng::new(9), &cfg).unwrap();
        let b = random_resized_crop(&im, &mut Rng::new(9), &cfg).unwrap();
        assert_eq!(a, b);
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            let c = random_resized_crop(&im, &mut rng, &cfg).unwrap();
            assert_eq!((c.height(), c.width()), (12, 12));
            assert!(c.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn stats_examples() {
        let c = Image::constant(4, 4, 0.5);
        assert_eq!(pixel_stats([&c]).unwrap(), (0.5, 1e-6));
        let (z, o) = (Image::constant(3, 3, 0.0), Image::constant(3, 3, 1.0));
        assert_eq!(pixel_stats([&z, &o]).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn subsample_counts_and_nesting() {
        let rows = (0..200)
            .map(|i| ManifestRow {
                path: PathBuf::from(format!("{i}.png")),
                split: if i < 180 { Split::Train } else { Split::Test },
                target: Target::Labels(vec![0]),
            })
            .collect();
        let m = DatasetManifest {
            task: Task::Cls,
            label_names: vec!["a".into()],
            rows,
        };
        assert_eq!(subsample(&m, 1.0, 5).unwrap(), m);
        assert_eq!(subsample(&m, 0.01, 5).unwrap().count(Split::Train), 2);
        assert_eq!(subsample(&m, 0.1, 5).unwrap().count(Split::Train), 18);
        assert_eq!(subsample(&m, 0.1, 5).unwrap().count(Split::Test), 20);
        let small = subsample(&m, 0.01, 5).unwrap();
        let big = subsample(&m, 0.1, 5).unwrap();
        assert!(small.rows.iter().all(|r| big.rows.contains(r)));
        assert_eq!(subsample(&m, 0.3, 8).unwrap(), subsample(&m, 0.3, 8).unwrap());
        assert!(subsample(&m, 0.0, 5).is_err());
    }

    #[test]
    fn uncertain_policies() {
        let m = DatasetManifest {
            task: Task::Cls,
            label_names: vec!["a".into(), "b".into()],
            rows: vec![
                ManifestRow {
                    path: "x".into(),
                    split: Split::Train,
                    target: Target::Labels(vec![-1, 0]),
                },
                ManifestRow {
                    path: "y".into(),
                    split: Split::Train,
                    target: Target::Labels(vec![1, 0]),
                },
            ],
        };
        assert_eq!(m.resolve_uncertain(UncertainPolicy::One).rows[0].target, Target::Labels(vec![1, 0]));
        assert_eq!(m.resolve_uncertain(UncertainPolicy::Zero).rows[0].target, Target::Labels(vec![0, 0]));
        assert_eq!(m.resolve_uncertain(UncertainPolicy::Exclude).rows.len(), 1);
    }

    #[test]
    fn manifest_parsing_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "path,split,label_0,label_1\na.png,train,1,0\nb.png,val,0,-1\nc.png,test,0,1\n").unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.task, Task::Cls);
        assert_eq!(m.rows.len(), 3);
        assert_eq!(m.rows[1].target, Target::Labels(vec![0, -1]));
        assert_eq!(m.rows[2].path, dir.path().join("c.png"));

        std::fs::write(&p, "path,split,label_0,label_1\na.png,train,1,0\nb.png,train,1\n").unwrap();
        match load_manifest(&p) {
            Err(Error::Manifest { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }

        write_gray_png(dir.path().join("i.png"), &Image::constant(20, 20, 0.0)).unwrap();
        std::fs::write(&p, "path,split,label,box_x0,box_y0,box_x1,box_y1\ni.png,train,disc,5,1,3,4\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { row: 1, .. })));
        std::fs::write(&p, "path,split,label,box_x0,box_y0,box_x1,box_y1\ni.png,train,disc,5,1,30,4\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { row: 1, .. })));
        std::fs::write(&p, "path,split,label,box_x0,box_y0,box_x1,box_y1\ni.png,train,disc,2,1,9,4\n").unwrap();
        assert_eq!(load_manifest(&p).unwrap().task, Task::Loc);
        assert!(matches!(load_manifest(dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn synthetic_corpus_contracts() {
        let dir = tempfile::tempdir().unwrap();
        for task in [Task::Cls, Task::Seg, Task::Loc] {
            let spec = SynthSpec::new(task, 8, 32);
            let out = dir.path().join(format!("{task:?}"));
            let path = synth_corpus(&spec, 11, &out).unwrap();
            let m = load_manifest(&path).unwrap();
            assert_eq!(m.task, task);
            assert_eq!(m.rows.len(), 8);
            for (i, row) in m.rows.iter().enumerate() {
                assert!(row.path.exists());
                let s = synth_sample(&spec, 11, i);
                match &row.target {
                    Target::Box { bbox, .. } => {
                        for (k, _) in s.mask.iter().enumerate().filter(|(_, m)| **m) {
                            assert!(bbox.contains_pixel(k / 32, k % 32));
                        }
                    }
                    Target::Mask(mp) => {
                        let (_, _, mask) = decode_mask(mp).unwrap();
                        assert_eq!(mask, s.mask);
                    }
                    Target::Labels(l) => assert_eq!(l.iter().sum::<i8>(), 1),
                }
            }
        }
        let mut spec = SynthSpec::new(Task::Cls, 40, 32);
        spec.empty_fraction = 0.5;
        let path = synth_corpus(&spec, 5, dir.path().join("neg")).unwrap();
        let m = load_manifest(&path).unwrap();
        let negatives = m.rows.iter().filter(|r| matches!(&r.target, Target::Labels(l) if l.iter().all(|&v| v == 0))).count();
        assert!(negatives > 5 && negatives < 35, "{negatives}");
        for i in 0..40 {
            let s = synth_sample(&spec, 5, i);
            assert_eq!(s.bbox.is_none(), !s.mask.iter().any(|&m| m));
        }
        spec.task = Task::Loc;
        assert!(spec.validate().is_err());
        let a = synth_sample(&SynthSpec::new(Task::Cls, 4, 32), 3, 2);
        let b = synth_sample(&SynthSpec::new(Task::Cls, 4, 32), 3, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn centered_resize_samples_pixel_centres() {
        let row = img(1, 2, &[0.0, 1.0]);
        let up = resize_bilinear_centered(&row, 1, 4).unwrap();
        assert_eq!(up.pixels(), &[0.0, 0.25, 0.75, 1.0]);
        let sq = img(2, 2, &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(resize_bilinear_centered(&sq, 2, 2).unwrap(), sq);
        let down = resize_bilinear_centered(&img(1, 4, &[0.0, 1.0, 2.0, 3.0]), 1, 2).unwrap();
        assert_eq!(down.pixels(), &[0.5, 2.5]);
    }

    proptest! {
        #[test]
        fn resize_stays_in_range(h in 1usize..6, w in 1usize..6, oh in 1usize..9, ow in 1usize..9, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let im = Image::new(h, w, (0..h * w).map(|_| rng.next_f32()).collect()).unwrap();
            let lo = im.pixels().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = im.pixels().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let out = resize_bilinear(&im, oh, ow).unwrap();
            prop_assert!(out.pixels().iter().all(|&v| v >= lo && v <= hi));
        }
    }
}
