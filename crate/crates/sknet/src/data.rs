//! Dataset loading, augmentation, and the synthetic scale-controlled set.
//!
//! Images stay byte-valued (channel-major, like the CIFAR on-disk
//! layout) until batch assembly, so encode/decode round-trips are exact.

use std::fs;
use std::path::Path;

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImage {
    /// Channel-major bytes, `3 * h * w`.
    pub pixels: Vec<u8>,
    pub h: usize,
    pub w: usize,
    pub label: u32,
}

impl LabeledImage {
    pub fn new(pixels: Vec<u8>, h: usize, w: usize, label: u32) -> Result<Self> {
        if pixels.len() != 3 * h * w {
            return Err(Error::Shape(format!(
                "image bytes {} do not match 3x{h}x{w}",
                pixels.len()
            )));
        }
        Ok(Self { pixels, h, w, label })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> u8 {
        self.pixels[(c * self.h + y) * self.w + x]
    }

    /// Mean byte value over all channels and pixels.
    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().map(|&b| b as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Ten,
    Hundred,
}

impl CifarVariant {
    pub fn classes(self) -> u32 {
        match self {
            CifarVariant::Ten => 10,
            CifarVariant::Hundred => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Ten => 1,
            CifarVariant::Hundred => 2,
        }
    }
}

/// Decodes one CIFAR binary batch file: per record a label byte (ten
/// classes) or coarse+fine label bytes (hundred classes, fine used),
/// then 3072 channel-major pixel bytes.
pub fn decode_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Vec<LabeledImage>> {
    let record = variant.label_bytes() + CIFAR_PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Decode(format!(
            "{} bytes is not a whole number of {record}-byte records",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / record);
    for chunk in bytes.chunks_exact(record) {
        let label = chunk[variant.label_bytes() - 1] as u32;
        if label >= variant.classes() {
            return Err(Error::Decode(format!(
                "label {label} out of range for {} classes",
                variant.classes()
            )));
        }
        images.push(LabeledImage {
            pixels: chunk[variant.label_bytes()..].to_vec(),
            h: CIFAR_SIDE,
            w: CIFAR_SIDE,
            label,
        });
    }
    Ok(images)
}

pub fn load_cifar(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Vec<LabeledImage>> {
    decode_cifar(&fs::read(path)?, variant)
}

/// Loads the canonical train/test split from a directory holding the
/// distributed binary files.
pub fn load_cifar_dir(
    dir: impl AsRef<Path>,
    variant: CifarVariant,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let dir = dir.as_ref();
    let (train_files, test_file): (Vec<String>, &str) = match variant {
        CifarVariant::Ten => (
            (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            "test_batch.bin",
        ),
        CifarVariant::Hundred => (vec!["train.bin".into()], "test.bin"),
    };
    let mut train = Vec::new();
    for f in &train_files {
        train.extend(load_cifar(dir.join(f), variant)?);
    }
    let test = load_cifar(dir.join(test_file), variant)?;
    Ok((train, test))
}

/// Encodes images in the ten-class record layout (1 label byte + pixels).
pub fn encode_records(images: &[LabeledImage]) -> Vec<u8> {
    let mut out = Vec::with_capacity(images.len() * (1 + CIFAR_PIXELS));
    for img in images {
        out.push(img.label as u8);
        out.extend_from_slice(&img.pixels);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    None,
    /// Zero-pad by 4 pixels, crop back at a random offset, flip
    /// horizontally with probability one half.
    CifarStandard,
}

pub fn flip_horizontal(img: &LabeledImage) -> LabeledImage {
    let mut pixels = vec![0u8; img.pixels.len()];
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w {
                pixels[(c * img.h + y) * img.w + x] = img.at(c, y, img.w - 1 - x);
            }
        }
    }
    LabeledImage { pixels, h: img.h, w: img.w, label: img.label }
}

fn pad_crop(img: &LabeledImage, pad: usize, oy: usize, ox: usize) -> LabeledImage {
    let mut pixels = vec![0u8; img.pixels.len()];
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w {
                // Source coordinate in the padded frame.
                let sy = (y + oy) as isize - pad as isize;
                let sx = (x + ox) as isize - pad as isize;
                let v = if sy >= 0 && (sy as usize) < img.h && sx >= 0 && (sx as usize) < img.w {
                    img.at(c, sy as usize, sx as usize)
                } else {
                    0
                };
                pixels[(c * img.h + y) * img.w + x] = v;
            }
        }
    }
    LabeledImage { pixels, h: img.h, w: img.w, label: img.label }
}

pub fn augment(img: &LabeledImage, mode: AugmentMode, rng: &mut ChaCha8Rng) -> LabeledImage {
    match mode {
        AugmentMode::None => img.clone(),
        AugmentMode::CifarStandard => {
            let pad = 4;
            let oy = rng.gen_range(0..=2 * pad);
            let ox = rng.gen_range(0..=2 * pad);
            let cropped = pad_crop(img, pad, oy, ox);
            if rng.gen_bool(0.5) {
                flip_horizontal(&cropped)
            } else {
                cropped
            }
        }
    }
}

/// Per-channel mean of byte values scaled to [0,1], for mean-channel
/// subtraction at batch assembly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
}

impl ChannelStats {
    pub fn from_images(images: &[LabeledImage]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("channel statistics need at least one image".into()));
        }
        let mut sum = [0.0f64; 3];
        let mut count = 0u64;
        for img in images {
            let plane = img.h * img.w;
            for c in 0..3 {
                sum[c] += img.pixels[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&b| b as f64)
                    .sum::<f64>();
            }
            count += plane as u64;
        }
        Ok(Self { mean: sum.map(|s| s / (255.0 * count as f64)) })
    }

    pub fn zero() -> Self {
        Self { mean: [0.0; 3] }
    }
}

/// Assembles a batch tensor `(n, 3, h, w)` of [0,1] floats minus the
/// channel means, plus the label vector.
pub fn to_batch(images: &[&LabeledImage], stats: &ChannelStats) -> Result<(Tensor, Vec<u32>)> {
    let first = images.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, w) = (first.h, first.w);
    let mut batch = Tensor::zeros([images.len(), 3, h, w]);
    let mut labels = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        if img.h != h || img.w != w {
            return Err(Error::Shape("mixed image sizes in one batch".into()));
        }
        let plane = h * w;
        for c in 0..3 {
            let dst = batch.plane_mut(i, c);
            let src = &img.pixels[c * plane..(c + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s as f64 / 255.0 - stats.mean[c];
            }
        }
        labels.push(img.label);
    }
    Ok((batch, labels))
}

/// Shape classes drawn by the synthetic generator, in label order.
pub const SYNTHETIC_CLASSES: &[&str] = &["square", "disc", "hbar", "vbar"];

/// Generator settings for the scale-controlled synthetic dataset: one
/// bright centered shape per image on a dark background, class = shape
/// kind, object scale recorded as ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticScaleSpec {
    pub canvas: usize,
    /// Inclusive scale range, within (0, 1]. Scale 1.0 spans the whole
    /// canvas.
    pub scale_range: (f64, f64),
    /// Peak-to-peak amplitude of uniform pixel noise, in byte units.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticScaleSpec {
    pub fn standard(seed: u64) -> Self {
        Self { canvas: 32, scale_range: (0.3, 0.9), noise: 12.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("scale range ({lo}, {hi}) outside (0, 1]")));
        }
        if self.canvas < 8 {
            return Err(Error::Config("canvas too small".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn clamp_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders one centered shape. `scale` is the fraction of the canvas the
/// object spans.
fn render_shape(class: u32, canvas: usize, scale: f64, noise: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = canvas as f64;
    let center = (n - 1.0) / 2.0;
    let half = scale * n / 2.0;
    // One bright, slightly class-tinted foreground over a dark ground.
    let fg = [210.0, 190.0, 170.0];
    let bg = 25.0;
    let mut pixels = vec![0u8; 3 * canvas * canvas];
    for y in 0..canvas {
        for x in 0..canvas {
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            let inside = match class {
                0 => dy.abs() <= half && dx.abs() <= half,
                1 => (dy * dy + dx * dx).sqrt() <= half,
                2 => dy.abs() <= half / 3.0 && dx.abs() <= half,
                3 => dx.abs() <= half / 3.0 && dy.abs() <= half,
                _ => unreachable!("class checked by caller"),
            };
            for c in 0..3 {
                let base = if inside { fg[c] } else { bg };
                let jitter = if noise > 0.0 { rng.gen_range(-noise / 2.0..=noise / 2.0) } else { 0.0 };
                pixels[(c * canvas + y) * canvas + x] = clamp_byte(base + jitter);
            }
        }
    }
    pixels
}

/// Generates `n` images with uniformly drawn class and scale.
/// Deterministic for a fixed spec.
pub fn gen_synthetic(spec: &SyntheticScaleSpec, n: usize) -> Result<Vec<(LabeledImage, f64)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = SYNTHETIC_CLASSES.len() as u32;
    let (lo, hi) = spec.scale_range;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..classes);
        let scale = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let pixels = render_shape(class, spec.canvas, scale, spec.noise, &mut rng);
        out.push((
            LabeledImage { pixels, h: spec.canvas, w: spec.canvas, label: class },
            scale,
        ));
    }
    Ok(out)
}

/// Writes a synthetic dataset as a ten-class-layout record file plus a
/// `index,scale` sidecar.
pub fn write_synthetic(
    records_path: impl AsRef<Path>,
    scales_path: impl AsRef<Path>,
    data: &[(LabeledImage, f64)],
) -> Result<()> {
    let images: Vec<LabeledImage> = data.iter().map(|(img, _)| img.clone()).collect();
    fs::write(records_path, encode_records(&images))?;
    let mut csv = String::from("index,scale\n");
    for (i, (_, scale)) in data.iter().enumerate() {
        csv.push_str(&format!("{i},{scale}\n"));
    }
    fs::write(scales_path, csv)?;
    Ok(())
}

/// Reads back a `index,scale` sidecar.
pub fn read_scales(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("index,scale") => {}
        other => return Err(Error::Decode(format!("bad scale sidecar header {other:?}"))),
    }
    let mut scales = Vec::new();
    for (i, line) in lines.enumerate() {
        let (idx, scale) = line
            .split_once(',')
            .ok_or_else(|| Error::Decode(format!("scale sidecar line {i}: no comma")))?;
        if idx.parse::<usize>() != Ok(i) {
            return Err(Error::Decode(format!("scale sidecar line {i}: bad index {idx:?}")));
        }
        scales.push(
            scale
                .parse::<f64>()
                .map_err(|e| Error::Decode(format!("scale sidecar line {i}: {e}")))?,
        );
    }
    Ok(scales)
}
