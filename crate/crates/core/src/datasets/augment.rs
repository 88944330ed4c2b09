//! Geometric and photometric augmentations. Geometric ops move image and
//! labels together; photometric ops touch the image only.

use serde::{Deserialize, Serialize};

use crate::datasets::{LabelMap, LabeledImage};
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

/// Bilinear resize with the align-corners=false convention: output pixel
/// centre `o` samples the input at `(o + 0.5) * in / out - 0.5`, clamped to
/// the valid range.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = taps(out_h, h);
    let cols = taps(out_w, w);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        let src = image.channel(ch);
        let dst = out.channel_mut(ch);
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize; never introduces new label values.
pub fn resize_nearest(labels: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    let (h, w) = (labels.height(), labels.width());
    let pick = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut data = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = pick(oy, out_h, h);
        for ox in 0..out_w {
            data.push(labels.get(y, pick(ox, out_w, w)));
        }
    }
    LabelMap::new(out_h, out_w, data)
}

pub fn crop_image(image: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c, ih, iw) = image.chw()?;
    if top + h > ih || left + w > iw || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "crop {h}x{w} at ({top},{left}) exceeds image {ih}x{iw}"
        )));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = image.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&src[(top + y) * iw + left..(top + y) * iw + left + w]);
        }
    }
    Ok(out)
}

pub fn crop(sample: &LabeledImage, top: usize, left: usize, h: usize, w: usize) -> Result<LabeledImage> {
    let image = crop_image(&sample.image, top, left, h, w)?;
    let iw = sample.labels.width();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let row = &sample.labels.data()[(top + y) * iw + left..(top + y) * iw + left + w];
        data.extend_from_slice(row);
    }
    Ok(LabeledImage {
        image,
        labels: LabelMap::new(h, w, data)?,
        domain: sample.domain.clone(),
    })
}

/// Uniform top-left corner of an `h x w` window inside `ih x iw`.
pub fn crop_offsets(ih: usize, iw: usize, h: usize, w: usize, rng: &mut RngState) -> Result<(usize, usize)> {
    if h > ih || w > iw {
        return Err(Error::InvalidArgument(format!(
            "crop {h}x{w} larger than image {ih}x{iw}"
        )));
    }
    Ok((rng.int_range(0, ih - h), rng.int_range(0, iw - w)))
}

/// Image-only variant of [`random_crop`]; draws the same offsets.
pub fn random_crop_image(image: &Tensor, h: usize, w: usize, rng: &mut RngState) -> Result<Tensor> {
    let (_, ih, iw) = image.chw()?;
    let (top, left) = crop_offsets(ih, iw, h, w, rng)?;
    crop_image(image, top, left, h, w)
}

/// Crops the same uniformly placed `h x w` window from image and labels.
pub fn random_crop(sample: &LabeledImage, h: usize, w: usize, rng: &mut RngState) -> Result<LabeledImage> {
    let (top, left) = crop_offsets(sample.labels.height(), sample.labels.width(), h, w, rng)?;
    crop(sample, top, left, h, w)
}

/// Scales intensities by `brightness`, then stretches around the mean by
/// `contrast`; the result is clamped to `[0,1]`.
pub fn adjust_color(image: &Tensor, brightness: f64, contrast: f64) -> Tensor {
    let bright = image.map(|v| v * brightness);
    let mean = bright.mean();
    bright.map(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0))
}

pub fn color_jitter(
    image: &Tensor,
    brightness: (f64, f64),
    contrast: (f64, f64),
    rng: &mut RngState,
) -> Result<Tensor> {
    for (lo, hi) in [brightness, contrast] {
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(format!(
                "jitter range [{lo}, {hi}] must be positive and ordered"
            )));
        }
    }
    let b = rng.uniform_range(brightness.0, brightness.1);
    let c = rng.uniform_range(contrast.0, contrast.1);
    Ok(adjust_color(image, b, c))
}

/// Separable 3x3 Gaussian blur with reflect padding (`-1 -> 1`, `n -> n-2`).
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("blur sigma {sigma} must be positive")));
    }
    let (c, h, w) = image.chw()?;
    let side = (-0.5 / (sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * side;
    let kernel = [side / norm, 1.0 / norm, side / norm];
    let reflect = |i: isize, n: usize| -> usize {
        if n == 1 {
            0
        } else if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let src = image.channel(ch);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (-1..=1)
                    .map(|d| kernel[(d + 1) as usize] * src[y * w + reflect(x as isize + d, w)])
                    .sum();
            }
        }
        let dst = out.channel_mut(ch);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = (-1..=1)
                    .map(|d| kernel[(d + 1) as usize] * tmp[reflect(y as isize + d, h) * w + x])
                    .sum();
            }
        }
    }
    Ok(out)
}

/// Resize, random crop, colour jitter and blur, applied in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// `[H, W]` every sample is resized to before cropping.
    pub resize: Option<[usize; 2]>,
    pub crop: Option<[usize; 2]>,
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub blur_probability: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            resize: None,
            crop: Some([32, 32]),
            brightness: [0.8, 1.2],
            contrast: [0.8, 1.2],
            blur_probability: 0.3,
            blur_sigma: [0.5, 1.0],
        }
    }
}

impl AugmentConfig {
    /// Wider color jitter and heavier, more frequent blur than the default.
    pub fn strong() -> Self {
        Self {
            brightness: [0.5, 1.5],
            contrast: [0.5, 1.5],
            blur_probability: 0.8,
            blur_sigma: [0.5, 2.0],
            ..Self::default()
        }
    }

    pub fn identity() -> Self {
        Self {
            resize: None,
            crop: None,
            brightness: [1.0, 1.0],
            contrast: [1.0, 1.0],
            blur_probability: 0.0,
            blur_sigma: [1.0, 1.0],
        }
    }

    pub fn validate(&self, prefix: &str, problems: &mut Vec<String>) {
        for (name, [lo, hi]) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("blur_sigma", self.blur_sigma),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                problems.push(format!(
                    "{prefix}.{name}: range [{lo}, {hi}] must be positive and ordered"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.blur_probability) {
            problems.push(format!("{prefix}.blur_probability: must lie in [0,1]"));
        }
        for (name, dims) in [("resize", self.resize), ("crop", self.crop)] {
            if let Some([h, w]) = dims {
                if h == 0 || w == 0 {
                    problems.push(format!("{prefix}.{name}: extents must be positive"));
                }
            }
        }
    }

    /// Geometric part only (resize and crop).
    pub fn geometric(&self, sample: &LabeledImage, rng: &mut RngState) -> Result<LabeledImage> {
        let mut out = match self.resize {
            Some([h, w]) if (h, w) != (sample.labels.height(), sample.labels.width()) => LabeledImage {
                image: resize_bilinear(&sample.image, h, w)?,
                labels: resize_nearest(&sample.labels, h, w)?,
                domain: sample.domain.clone(),
            },
            _ => sample.clone(),
        };
        if let Some([h, w]) = self.crop {
            out = random_crop(&out, h, w, rng)?;
        }
        Ok(out)
    }

    /// Photometric part only (colour jitter, then blur with some probability).
    /// The configured resize applied to an unlabeled image.
    pub fn resized(&self, image: &Tensor) -> Result<Tensor> {
        let (_, ih, iw) = image.chw()?;
        match self.resize {
            Some([h, w]) if (h, w) != (ih, iw) => resize_bilinear(image, h, w),
            _ => Ok(image.clone()),
        }
    }

    /// `(top, left, h, w)` of the crop window for an `ih x iw` input; the
    /// whole input when cropping is off.
    pub fn crop_window(&self, ih: usize, iw: usize, rng: &mut RngState) -> Result<(usize, usize, usize, usize)> {
        match self.crop {
            Some([h, w]) => {
                let (top, left) = crop_offsets(ih, iw, h, w, rng)?;
                Ok((top, left, h, w))
            }
            None => Ok((0, 0, ih, iw)),
        }
    }

    /// [`AugmentConfig::geometric`] for an unlabeled image.
    pub fn geometric_image(&self, image: &Tensor, rng: &mut RngState) -> Result<Tensor> {
        let out = self.resized(image)?;
        let (_, ih, iw) = out.chw()?;
        let (top, left, h, w) = self.crop_window(ih, iw, rng)?;
        crop_image(&out, top, left, h, w)
    }

    pub fn photometric(&self, image: &Tensor, rng: &mut RngState) -> Result<Tensor> {
        let b = (self.brightness[0], self.brightness[1]);
        let c = (self.contrast[0], self.contrast[1]);
        let mut out = color_jitter(image, b, c, rng)?;
        if rng.bernoulli(self.blur_probability) {
            let sigma = rng.uniform_range(self.blur_sigma[0], self.blur_sigma[1]);
            out = gaussian_blur(&out, sigma)?;
        }
        Ok(out)
    }

    pub fn apply(&self, sample: &LabeledImage, rng: &mut RngState) -> Result<LabeledImage> {
        let mut out = self.geometric(sample, rng)?;
        out.image = self.photometric(&out.image, rng)?;
        Ok(out)
    }
}
