//! Finite-difference verification of every analytic gradient path.
//!
//! Each check draws random parameters (with non-zero biases) and inputs,
//! rejects draws where some ReLU unit sits within `1e-4` of its kink, and
//! compares the analytic gradient with central differences on a random
//! sample of coordinates per parameter tensor.

use serde::Serialize;

use crate::datasets::{LabelMap, IGNORE_LABEL};
use crate::error::Result;
use crate::gmc::{apply_mask, gmc_loss, sample_patch_mask};
use crate::model::{relu_margin, segmentation_loss, SegNetParams, PARAM_NAMES};
use crate::numerics::{
    finite_difference_gradient, max_relative_error, RngState, Tensor, DEFAULT_EPS, RELATIVE_ERROR_FLOOR,
};
use crate::plgcl::{
    confidence_maps, gaussian_stats, plgcl_loss, sample_patches, selection_loss, GaussianStats, PlgclConfig, Sampling,
};

pub const TOLERANCE: f64 = 1e-5;
const MIN_RELU_MARGIN: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seeds: u64,
    pub side: usize,
    pub classes: usize,
    pub embed_dim: usize,
    /// Coordinates sampled per parameter tensor; `0` checks all of them.
    pub coords_per_tensor: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            side: 8,
            classes: 8,
            embed_dim: 32,
            coords_per_tensor: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathReport {
    pub path: String,
    pub seeds: u64,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub paths: Vec<PathReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.paths.iter().all(|p| p.passed)
    }
}

pub fn random_image(rng: &mut RngState, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.uniform()).collect()).expect("shape")
}

/// Random parameters with `N(0, 0.1)` biases.
pub fn random_params(rng: &mut RngState, classes: usize, embed_dim: usize) -> SegNetParams {
    let mut params = SegNetParams::init(rng, classes, embed_dim);
    for b in [
        &mut params.conv1_b,
        &mut params.conv2_b,
        &mut params.conv3_b,
        &mut params.out_b,
        &mut params.head_b,
    ] {
        b.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.normal());
    }
    params
}

/// Redraws from `(seed, attempt)` until `accept` holds for the draw.
pub fn kink_free<T>(
    seed: u64,
    mut draw: impl FnMut(&mut RngState) -> T,
    mut inputs: impl FnMut(&T) -> Vec<(SegNetParams, Tensor)>,
) -> Result<(T, RngState)> {
    let mut attempt = 0u64;
    loop {
        let mut rng = RngState::derived(seed, &[attempt]);
        let candidate = draw(&mut rng);
        let mut ok = true;
        for (params, x) in inputs(&candidate) {
            if relu_margin(&params, &x)? <= MIN_RELU_MARGIN {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok((candidate, rng));
        }
        attempt += 1;
    }
}

/// Sampled `(tensor, coordinate)` pairs; every coordinate when `per_tensor`
/// is zero or exceeds the tensor size.
fn sample_coords(
    params: &SegNetParams,
    tensors: &[usize],
    per_tensor: usize,
    rng: &mut RngState,
) -> Vec<(usize, usize)> {
    let mut coords = Vec::new();
    for &t in tensors {
        let n = params.tensors()[t].len();
        if per_tensor == 0 || per_tensor >= n {
            coords.extend((0..n).map(|i| (t, i)));
        } else {
            let all: Vec<usize> = (0..n).collect();
            let picked = rng.choose_subset(&all, per_tensor).expect("per_tensor < n");
            coords.extend(picked.into_iter().map(|i| (t, i)));
        }
    }
    coords
}

/// Worst relative error between `analytic` and central differences of
/// `objective` over the sampled coordinates.
pub fn compare_param_gradient(
    params: &SegNetParams,
    analytic: &SegNetParams,
    coords: &[(usize, usize)],
    mut objective: impl FnMut(&SegNetParams) -> f64,
) -> Result<f64> {
    let mut a = Vec::with_capacity(coords.len());
    let mut n = Vec::with_capacity(coords.len());
    let mut probe = params.clone();
    for &(t, i) in coords {
        let base = params.tensors()[t].data()[i];
        let single = Tensor::from_vec(vec![base]);
        let g = finite_difference_gradient(
            |v| {
                probe.tensors_mut()[t].data_mut()[i] = v.data()[0];
                objective(&probe)
            },
            &single,
            DEFAULT_EPS,
        )?;
        probe.tensors_mut()[t].data_mut()[i] = base;
        a.push(analytic.tensors()[t].data()[i]);
        n.push(g.data()[0]);
    }
    Ok(max_relative_error(&a, &n, RELATIVE_ERROR_FLOOR))
}

fn labels_for(rng: &mut RngState, side: usize, classes: usize) -> LabelMap {
    let data = (0..side * side)
        .map(|_| {
            if rng.bernoulli(0.05) {
                IGNORE_LABEL
            } else {
                rng.int_range(0, classes - 1) as u8
            }
        })
        .collect();
    LabelMap::new(side, side, data).expect("extent")
}

const SEG_TENSORS: [usize; 8] = [0, 1, 2, 3, 4, 5, 6, 7];
const HEAD_TENSORS: [usize; 2] = [8, 9];

/// Segmentation cross-entropy through the full network.
pub fn check_segmentation(cfg: &SuiteConfig, seed: u64) -> Result<(f64, usize)> {
    let ((params, x), mut rng) = kink_free(
        seed,
        |rng| {
            (
                random_params(rng, cfg.classes, cfg.embed_dim),
                random_image(rng, cfg.side, cfg.side),
            )
        },
        |(p, x)| vec![(p.clone(), x.clone())],
    )?;
    let y = labels_for(&mut rng, cfg.side, cfg.classes);
    let mut grads = params.zeros_like();
    segmentation_loss(&params, &x, y.data(), 1.0, &mut grads)?;
    let coords = sample_coords(&params, &SEG_TENSORS, cfg.coords_per_tensor, &mut rng);
    let mut scratch = params.zeros_like();
    let err = compare_param_gradient(&params, &grads, &coords, |p| {
        segmentation_loss(p, &x, y.data(), 0.0, &mut scratch).expect("loss")
    })?;
    Ok((err, coords.len()))
}

/// Masked-image consistency loss; every evaluation replays the same mask
/// stream so the objective is a fixed function of the parameters.
pub fn check_gmc(cfg: &SuiteConfig, seed: u64) -> Result<(f64, usize)> {
    let b = (cfg.side / 4).max(1);
    let r = 0.5;
    let mask_seed = crate::numerics::derive_seed(seed, &[u64::MAX]);
    let ((params, x), mut rng) = kink_free(
        seed,
        |rng| {
            (
                random_params(rng, cfg.classes, cfg.embed_dim),
                random_image(rng, cfg.side, cfg.side),
            )
        },
        |(p, x)| {
            let mask = sample_patch_mask(cfg.side, cfg.side, b, r, &mut RngState::new(mask_seed)).expect("aligned");
            vec![(p.clone(), apply_mask(x, &mask).expect("shape"))]
        },
    )?;
    let y = labels_for(&mut rng, cfg.side, cfg.classes);
    let mut grads = params.zeros_like();
    gmc_loss(&params, &x, &y, b, r, &mut RngState::new(mask_seed), 1.0, &mut grads)?;
    let coords = sample_coords(&params, &SEG_TENSORS, cfg.coords_per_tensor, &mut rng);
    let mut scratch = params.zeros_like();
    let err = compare_param_gradient(&params, &grads, &coords, |p| {
        gmc_loss(p, &x, &y, b, r, &mut RngState::new(mask_seed), 0.0, &mut scratch)
            .expect("loss")
            .loss
    })?;
    Ok((err, coords.len()))
}

fn random_unit(rng: &mut RngState, d: usize) -> Tensor {
    let v = Tensor::from_vec((0..d).map(|_| rng.normal()).collect());
    let n = v.norm();
    v.scale(1.0 / n)
}

/// Closed-form contrastive loss w.r.t. the query embedding.
pub fn check_plgcl_query(cfg: &SuiteConfig, seed: u64) -> Result<(f64, usize)> {
    let mut rng = RngState::new(seed);
    let d = cfg.embed_dim;
    let f_u = random_unit(&mut rng, d);
    let set = |rng: &mut RngState, n: usize| -> Vec<Tensor> { (0..n).map(|_| random_unit(rng, d)).collect() };
    let stats = |v: &[Tensor]| gaussian_stats(&v.iter().collect::<Vec<_>>());
    let pos = stats(&set(&mut rng, 3))?;
    let negs: Vec<GaussianStats> = (0..3).map(|_| stats(&set(&mut rng, 5))).collect::<Result<_>>()?;
    let pc = PlgclConfig::default();
    let (_, g) = plgcl_loss(&f_u, &pos, &negs, pc.temperature, pc.negative_scale, 1.0)?;
    let fd = finite_difference_gradient(
        |t| {
            plgcl_loss(t, &pos, &negs, pc.temperature, pc.negative_scale, 1.0)
                .map(|r| r.0)
                .unwrap_or(f64::NAN)
        },
        &f_u,
        DEFAULT_EPS * 0.1,
    )?;
    Ok((max_relative_error(g.data(), fd.data(), RELATIVE_ERROR_FLOOR), d))
}

/// Two-class confidence layout (left/right halves) for an image.
fn split_logits(classes: usize, side: usize, rng: &mut RngState) -> Tensor {
    let mut logits = Tensor::zeros(&[classes, side, side]);
    let second = 1 + rng.int_range(0, classes - 2);
    for y in 0..side {
        for x in 0..side {
            let k = if x < side / 2 { 0 } else { second };
            logits.data_mut()[(k * side + y) * side + x] = 4.0;
        }
    }
    logits.data_mut().iter_mut().for_each(|v| *v += 0.5 * rng.normal());
    logits
}

/// Full patch-selection loss w.r.t. the projection head (and, through the
/// statistics, every key embedding).
pub fn check_plgcl_head(cfg: &SuiteConfig, seed: u64) -> Result<(f64, usize)> {
    let pc = PlgclConfig {
        patch_size: (cfg.side / 2).max(2),
        candidates: 3,
        positives: 2,
        embed_dim: cfg.embed_dim,
        ..PlgclConfig::default()
    };
    let (((params, selection), lambda), mut rng) = kink_free(
        seed,
        |rng| {
            let params = random_params(rng, cfg.classes, cfg.embed_dim);
            let x = random_image(rng, cfg.side, cfg.side);
            let conf = confidence_maps(&split_logits(cfg.classes, cfg.side, rng)).expect("finite");
            let selection = match sample_patches(&x, &conf, &pc).expect("aligned") {
                Sampling::Selected(s) => Some(s),
                Sampling::Insufficient { .. } => None,
            };
            ((params, selection), rng.uniform())
        },
        |((p, sel), _)| match sel {
            Some(sel) => sel
                .classes
                .iter()
                .flat_map(|c| std::iter::once(&c.anchor).chain(&c.candidates))
                .map(|r| (p.clone(), r.pixels.clone()))
                .collect(),
            // Force a redraw.
            None => vec![(p.clone(), Tensor::zeros(&[3, 2, 2]))],
        },
    )?;
    let selection = selection.expect("accepted draws have a selection");
    let mut grads = params.zeros_like();
    selection_loss(&params, &selection, &pc, lambda, 1.0, &mut grads)?;
    let coords = sample_coords(&params, &HEAD_TENSORS, 2 * cfg.coords_per_tensor, &mut rng);
    let mut scratch = params.zeros_like();
    let err = compare_param_gradient(&params, &grads, &coords, |p| {
        selection_loss(p, &selection, &pc, lambda, 0.0, &mut scratch)
            .expect("loss")
            .loss
    })?;
    Ok((err, coords.len()))
}

type Check = fn(&SuiteConfig, u64) -> Result<(f64, usize)>;

pub const PATHS: [(&str, Check); 4] = [
    ("segmentation_ce", check_segmentation),
    ("gmc", check_gmc),
    ("plgcl_query", check_plgcl_query),
    ("plgcl_head", check_plgcl_head),
];

pub fn run(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut paths = Vec::new();
    for (p, (name, check)) in PATHS.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut coordinates = 0;
        for seed in 0..cfg.seeds {
            let (err, n) = check(cfg, crate::numerics::derive_seed(seed, &[p as u64]))?;
            worst = worst.max(err);
            coordinates += n;
        }
        paths.push(PathReport {
            path: name.to_string(),
            seeds: cfg.seeds,
            coordinates,
            max_relative_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(SuiteReport {
        tolerance: TOLERANCE,
        paths,
    })
}

/// Names of the parameter tensors that the sampled checks cover.
pub fn checked_tensors(path: &str) -> Vec<&'static str> {
    let idx: &[usize] = match path {
        "plgcl_head" => &HEAD_TENSORS,
        "plgcl_query" => &[],
        _ => &SEG_TENSORS,
    };
    idx.iter().map(|&i| PARAM_NAMES[i]).collect()
}
