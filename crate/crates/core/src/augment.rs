//! Stochastic two-view generation.
//!
//! A view is produced by the fixed chain crop/resize → horizontal flip →
//! brightness/contrast jitter → additive gaussian noise, followed by a clip
//! to `[0, 1]`. The query and key views of one frame use separate RNG
//! streams derived from the batch seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A `C×H×W` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Tensor,
}

impl Frame {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let [c, h, w] = pixels.shape() else {
            return Err(Error::Parameter(format!(
                "frame must be C×H×W, got {:?}",
                pixels.shape()
            )));
        };
        if *c == 0 || *h == 0 || *w == 0 {
            return Err(Error::Parameter(format!("frame extents must be positive, got {:?}", pixels.shape())));
        }
        Ok(Self { pixels })
    }

    /// Builds a frame, clipping every value into `[0, 1]`.
    pub fn clipped(pixels: Tensor) -> Result<Self> {
        Self::new(pixels.map(clip01))
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels.data()[(c * self.height() + y) * self.width() + x]
    }
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Stacks frames into a `B×C×H×W` tensor.
pub fn frames_to_batch(frames: &[Frame]) -> Result<Tensor> {
    let parts: Vec<Tensor> = frames.iter().map(|f| f.pixels.clone()).collect();
    Tensor::stack(&parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_scale_range: [f64; 2],
    pub flip_prob: f64,
    pub brightness_delta: f64,
    pub contrast_range: [f64; 2],
    pub noise_sigma: f64,
    /// `[height, width]`.
    pub output_size: [usize; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: [0.4, 1.0],
            flip_prob: 0.5,
            brightness_delta: 0.2,
            contrast_range: [0.8, 1.2],
            noise_sigma: 0.02,
            output_size: [32, 32],
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled, output at `size`.
    pub fn identity(size: [usize; 2]) -> Self {
        Self {
            crop_scale_range: [1.0, 1.0],
            flip_prob: 0.0,
            brightness_delta: 0.0,
            contrast_range: [1.0, 1.0],
            noise_sigma: 0.0,
            output_size: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [slo, shi] = self.crop_scale_range;
        let [clo, chi] = self.contrast_range;
        let bad = |m: &str| Err(Error::Parameter(format!("augment config: {m}")));
        if !(slo > 0.0 && slo <= shi && shi <= 1.0) {
            return bad("crop_scale_range must satisfy 0 < lo ≤ hi ≤ 1");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if self.brightness_delta < 0.0 || self.noise_sigma < 0.0 {
            return bad("brightness_delta and noise_sigma must be non-negative");
        }
        if !(clo > 0.0 && clo <= chi) {
            return bad("contrast_range must satisfy 0 < lo ≤ hi");
        }
        if self.output_size[0] == 0 || self.output_size[1] == 0 {
            return bad("output_size must be positive");
        }
        Ok(())
    }
}

/// Pixel-aligned crop box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn full(frame: &Frame) -> Self {
        Self {
            top: 0,
            left: 0,
            height: frame.height(),
            width: frame.width(),
        }
    }
}

/// Bilinear resample of `bx` to `out = [height, width]` using pixel-centre alignment.
pub fn crop_resize(v: &Frame, bx: CropBox, out: [usize; 2]) -> Result<Frame> {
    if bx.height == 0
        || bx.width == 0
        || bx.top + bx.height > v.height()
        || bx.left + bx.width > v.width()
    {
        return Err(Error::Parameter(format!(
            "crop box {bx:?} outside {}×{} frame",
            v.height(),
            v.width()
        )));
    }
    if out[0] == 0 || out[1] == 0 {
        return Err(Error::Parameter("crop_resize output size must be positive".into()));
    }
    let (oh, ow) = (out[0], out[1]);
    let c = v.channels();
    let sy = bx.height as f64 / oh as f64;
    let sx = bx.width as f64 / ow as f64;
    let coords = |o: usize, scale: f64, start: usize, len: usize| {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (start + i0, start + i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..oh).map(|o| coords(o, sy, bx.top, bx.height)).collect();
    let xs: Vec<_> = (0..ow).map(|o| coords(o, sx, bx.left, bx.width)).collect();
    let mut data = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = v.at(ch, y0, x0) * (1.0 - fx) + v.at(ch, y0, x1) * fx;
                let bot = v.at(ch, y1, x0) * (1.0 - fx) + v.at(ch, y1, x1) * fx;
                let val = if fy == 0.0 { top } else { top * (1.0 - fy) + bot * fy };
                data.push(clip01(val));
            }
        }
    }
    Frame::new(Tensor::new(vec![c, oh, ow], data)?)
}

/// Reverses column order in every row of every channel.
pub fn horizontal_flip(v: &Frame) -> Frame {
    let w = v.width();
    let mut data = v.pixels.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Frame {
        pixels: Tensor::new(v.pixels.shape().to_vec(), data).expect("shape"),
    }
}

/// Per channel: `clip((x − mean)·c + mean + b, 0, 1)`.
pub fn photometric_jitter(v: &Frame, brightness: f64, contrast: f64) -> Result<Frame> {
    if contrast <= 0.0 {
        return Err(Error::Parameter(format!("contrast must be positive, got {contrast}")));
    }
    if brightness == 0.0 && contrast == 1.0 {
        return Ok(v.clone());
    }
    let plane = v.height() * v.width();
    let mut data = Vec::with_capacity(v.pixels.len());
    for ch in v.pixels.data().chunks(plane) {
        let mean = ch.iter().sum::<f64>() / plane as f64;
        data.extend(ch.iter().map(|&x| clip01((x - mean) * contrast + mean + brightness)));
    }
    Ok(Frame {
        pixels: Tensor::new(v.pixels.shape().to_vec(), data)?,
    })
}

/// Adds i.i.d. `N(0, σ²)` per pixel and clips.
pub fn gaussian_noise(v: &Frame, sigma: f64, rng: &mut Rng) -> Frame {
    if sigma == 0.0 {
        return v.clone();
    }
    let mut pixels = v.pixels.clone();
    for x in pixels.data_mut() {
        *x = clip01(*x + sigma * rng.normal());
    }
    Frame { pixels }
}

/// Draws a random crop box with area fraction in `scale` and aspect ratio in `[3/4, 4/3]`.
pub fn sample_crop_box(h: usize, w: usize, scale: [f64; 2], rng: &mut Rng) -> CropBox {
    let area_frac = rng.range(scale[0], scale[1]);
    let log_ratio = rng.range((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let pos_y = rng.uniform();
    let pos_x = rng.uniform();
    if area_frac >= 1.0 {
        return CropBox { top: 0, left: 0, height: h, width: w };
    }
    let area = area_frac * (h * w) as f64;
    let ratio = log_ratio.exp();
    let bw = ((area * ratio).sqrt().round() as usize).clamp(1, w);
    let bh = ((area / ratio).sqrt().round() as usize).clamp(1, h);
    let top = ((h - bh + 1) as f64 * pos_y).floor() as usize;
    let left = ((w - bw + 1) as f64 * pos_x).floor() as usize;
    CropBox {
        top: top.min(h - bh),
        left: left.min(w - bw),
        height: bh,
        width: bw,
    }
}

/// One random view of `v`.
pub fn sample_view(v: &Frame, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Frame> {
    let bx = sample_crop_box(v.height(), v.width(), cfg.crop_scale_range, rng);
    let mut out = crop_resize(v, bx, cfg.output_size)?;
    if rng.bernoulli(cfg.flip_prob) {
        out = horizontal_flip(&out);
    }
    let b = rng.range(-cfg.brightness_delta, cfg.brightness_delta);
    let c = rng.range(cfg.contrast_range[0], cfg.contrast_range[1]);
    out = photometric_jitter(&out, b, c)?;
    out = gaussian_noise(&out, cfg.noise_sigma, rng);
    Ok(out)
}

/// Query and key views for every frame of a batch.
///
/// Sample `i` uses stream `(batch_seed, i, 0)` for its query view and
/// `(batch_seed, i, 1)` for its key view.
pub fn two_views(frames: &[Frame], cfg: &AugmentConfig, batch_seed: u64) -> Result<(Vec<Frame>, Vec<Frame>)> {
    let mut q = Vec::with_capacity(frames.len());
    let mut k = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        q.push(sample_view(f, cfg, &mut Rng::stream(batch_seed, &[i as u64, 0]))?);
        k.push(sample_view(f, cfg, &mut Rng::stream(batch_seed, &[i as u64, 1]))?);
    }
    Ok((q, k))
}

/// Deterministic resize of the whole frame to `size` (no-op when already that size).
pub fn center_resize(v: &Frame, size: [usize; 2]) -> Result<Frame> {
    if v.height() == size[0] && v.width() == size[1] {
        return Ok(v.clone());
    }
    crop_resize(v, CropBox::full(v), size)
}
