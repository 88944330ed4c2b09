//! Grounded mask consistency: random patch masking of a source image,
//! supervised by the ground truth of the unmasked image.

use serde::{Deserialize, Serialize};

use crate::datasets::LabelMap;
use crate::error::{Error, Result};
use crate::model::{segmentation_loss, SegNetParams};
use crate::numerics::{RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmcConfig {
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub weight: f64,
    /// Mask the mixed image instead of the un-mixed source image.
    pub on_mixed: bool,
}

impl Default for GmcConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            mask_ratio: 0.3,
            weight: 1.0,
            on_mixed: false,
        }
    }
}

impl GmcConfig {
    pub fn validate(&self, prefix: &str, problems: &mut Vec<String>) {
        if self.patch_size == 0 {
            problems.push(format!("{prefix}.patch_size: must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            problems.push(format!("{prefix}.mask_ratio: {} is outside [0, 1]", self.mask_ratio));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            problems.push(format!("{prefix}.weight: must be a finite non-negative number"));
        }
    }
}

/// Cell grid of a patch mask; `1` keeps the patch visible.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    pub patch_size: usize,
    pub ratio: f64,
    rows: usize,
    cols: usize,
    grid: Vec<u8>,
}

impl PatchMask {
    pub fn from_grid(patch_size: usize, rows: usize, cols: usize, grid: Vec<u8>) -> Result<Self> {
        if grid.len() != rows * cols || grid.iter().any(|&v| v > 1) {
            return Err(Error::Shape(format!("mask grid must be binary {rows}x{cols}")));
        }
        Ok(Self {
            patch_size,
            ratio: f64::NAN,
            rows,
            cols,
            grid,
        })
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_size
    }

    pub fn visible(&self, y: usize, x: usize) -> bool {
        self.grid[(y / self.patch_size) * self.cols + x / self.patch_size] == 1
    }

    /// The grid with each cell replicated `b x b`.
    pub fn expanded(&self) -> LabelMap {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(u8::from(self.visible(y, x)));
            }
        }
        LabelMap::new(h, w, data).expect("extent matches")
    }

    pub fn visible_fraction(&self) -> f64 {
        self.grid.iter().map(|&v| v as f64).sum::<f64>() / self.grid.len() as f64
    }
}

/// Each cell is visible iff an independent `v ~ U(0,1)` exceeds `r`.
pub fn sample_patch_mask(h: usize, w: usize, b: usize, r: f64, rng: &mut RngState) -> Result<PatchMask> {
    if b == 0 {
        return Err(Error::InvalidArgument("patch size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!("mask ratio {r} is outside [0, 1]")));
    }
    for size in [h, w] {
        if size % b != 0 {
            return Err(Error::PatchGridMisalignment { size, patch: b });
        }
    }
    let (rows, cols) = (h / b, w / b);
    let grid = (0..rows * cols).map(|_| u8::from(rng.uniform() > r)).collect();
    Ok(PatchMask {
        patch_size: b,
        ratio: r,
        rows,
        cols,
        grid,
    })
}

pub fn apply_mask(x: &Tensor, mask: &PatchMask) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if h != mask.height() || w != mask.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} does not cover image {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let mut out = x.clone();
    let expanded = mask.expanded();
    for ch in 0..c {
        for (v, &m) in out.channel_mut(ch).iter_mut().zip(expanded.data()) {
            if m == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GmcStep {
    pub loss: f64,
    pub mask: PatchMask,
}

/// Samples a mask, predicts on the masked image and scores the prediction
/// against the full ground truth, masked pixels included. Adds `weight`
/// times the parameter gradient to `grads`.
#[allow(clippy::too_many_arguments)]
pub fn gmc_loss(
    params: &SegNetParams,
    x: &Tensor,
    y: &LabelMap,
    b: usize,
    r: f64,
    rng: &mut RngState,
    weight: f64,
    grads: &mut SegNetParams,
) -> Result<GmcStep> {
    let (_, h, w) = x.chw()?;
    let mask = sample_patch_mask(h, w, b, r, rng)?;
    let masked = apply_mask(x, &mask)?;
    let loss = segmentation_loss(params, &masked, y.data(), weight, grads)?;
    Ok(GmcStep { loss, mask })
}
