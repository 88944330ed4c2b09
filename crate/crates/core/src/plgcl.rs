//! Pseudo-label guided contrastive learning.
//!
//! Teacher confidence maps pick class-attributed patches from a target
//! image: per class an anchor patch, a pool of high-confidence candidates,
//! positives chosen by nearest average entropy, and negatives from the other
//! classes. The student embeds the patches and is trained with a Gaussian
//! closed form of the InfoNCE objective whose statistics (per-class mean and
//! diagonal variance of the key embeddings) are differentiated as well.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode_project, encode_project_backward, EmbedCache, SegNetParams};
use crate::numerics::{log_sum_exp, softmax, RngState, Tensor};

const ENTROPY_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlgclConfig {
    pub temperature: f64,
    /// `zeta`: scale of the negative sum.
    pub negative_scale: f64,
    /// `lambda` reached at the end of training; it ramps linearly from 0.
    pub lambda_max: f64,
    pub patch_size: usize,
    /// `J`: candidate pool size per class, anchor excluded.
    pub candidates: usize,
    /// `n`: positives per anchor.
    pub positives: usize,
    pub embed_dim: usize,
    pub presence_threshold: f64,
}

impl Default for PlgclConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            negative_scale: 1.0,
            lambda_max: 1.0,
            patch_size: 8,
            candidates: 8,
            positives: 2,
            embed_dim: 32,
            presence_threshold: 0.5,
        }
    }
}

impl PlgclConfig {
    /// `lambda` after a fraction `progress` of training.
    pub fn lambda_at(&self, progress: f64) -> f64 {
        self.lambda_max * progress.clamp(0.0, 1.0)
    }

    pub fn validate(&self, prefix: &str, problems: &mut Vec<String>) {
        if !(self.temperature > 0.0) {
            problems.push(format!("{prefix}.temperature: must be positive"));
        }
        if !(self.negative_scale >= 0.0) {
            problems.push(format!("{prefix}.negative_scale: must be non-negative"));
        }
        if !(self.lambda_max >= 0.0) {
            problems.push(format!("{prefix}.lambda_max: must be non-negative"));
        }
        if self.patch_size < 2 || !self.patch_size.is_multiple_of(2) {
            problems.push(format!("{prefix}.patch_size: must be even and at least 2"));
        }
        if self.candidates == 0 {
            problems.push(format!("{prefix}.candidates: must be at least 1"));
        }
        if self.positives == 0 {
            problems.push(format!("{prefix}.positives: must be at least 1"));
        }
        if self.embed_dim < 2 {
            problems.push(format!("{prefix}.embed_dim: must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.presence_threshold) {
            problems.push(format!("{prefix}.presence_threshold: must lie in [0, 1]"));
        }
    }
}

/// Per-pixel class probabilities `[K,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMaps(Tensor);

impl ConfidenceMaps {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn class_map(&self, k: usize) -> &[f64] {
        self.0.channel(k)
    }
}

pub fn confidence_maps(teacher_logits: &Tensor) -> Result<ConfidenceMaps> {
    teacher_logits.chw()?;
    teacher_logits.ensure_finite("teacher logits")?;
    Ok(ConfidenceMaps(softmax(teacher_logits, 0)?))
}

/// `I'(ch,i,j) = I(ch,i,j) * C_k(i,j)`.
pub fn attended_image(image: &Tensor, c_k: &[f64]) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if c_k.len() != h * w {
        return Err(Error::Shape(format!(
            "confidence map has {} pixels, image has {}",
            c_k.len(),
            h * w
        )));
    }
    let mut out = image.clone();
    for ch in 0..c {
        for (v, &m) in out.channel_mut(ch).iter_mut().zip(c_k) {
            *v *= m;
        }
    }
    Ok(out)
}

/// Binary entropy `-x ln x - (1-x) ln(1-x)` with `x` clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn entropy_fn(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidArgument(format!("entropy input {x} is outside [0, 1]")));
    }
    let x = x.clamp(ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP);
    Ok(-x * x.ln() - (1.0 - x) * (1.0 - x).ln())
}

pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchRecord {
    pub class: u8,
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub avg_confidence: f64,
    pub avg_entropy: f64,
    /// `[3,p,p]` crop of the attended image.
    #[serde(skip)]
    pub pixels: Tensor,
}

/// Average confidence and average luma entropy of every aligned,
/// non-overlapping `p x p` patch in raster order. Luma is clamped to
/// `[0,1]` before the entropy.
pub fn patch_statistics(class: u8, c_k: &[f64], attended: &Tensor, p: usize) -> Result<Vec<PatchRecord>> {
    let (c, h, w) = attended.chw()?;
    if c != 3 || c_k.len() != h * w {
        return Err(Error::Shape(format!(
            "patch statistics need a [3,H,W] image and an [H,W] map, got {:?} and {}",
            attended.shape(),
            c_k.len()
        )));
    }
    if p == 0 {
        return Err(Error::InvalidArgument("patch size must be at least 1".into()));
    }
    for size in [h, w] {
        if size % p != 0 {
            return Err(Error::PatchGridMisalignment { size, patch: p });
        }
    }
    let plane = h * w;
    let data = attended.data();
    let area = (p * p) as f64;
    let mut records = Vec::with_capacity(plane / (p * p));
    for row in (0..h).step_by(p) {
        for col in (0..w).step_by(p) {
            let mut conf = 0.0;
            let mut ent = 0.0;
            let mut pixels = Vec::with_capacity(3 * p * p);
            for y in row..row + p {
                for x in col..col + p {
                    let i = y * w + x;
                    conf += c_k[i];
                    let g = luma(data[i], data[plane + i], data[2 * plane + i]).clamp(0.0, 1.0);
                    ent += entropy_fn(g)?;
                }
            }
            for ch in 0..3 {
                for y in row..row + p {
                    pixels.extend_from_slice(&data[ch * plane + y * w + col..ch * plane + y * w + col + p]);
                }
            }
            records.push(PatchRecord {
                class,
                row,
                col,
                size: p,
                avg_confidence: conf / area,
                avg_entropy: ent / area,
                pixels: Tensor::new(vec![3, p, p], pixels)?,
            });
        }
    }
    Ok(records)
}

/// Patches of one present class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassPatches {
    pub class: u8,
    pub anchor: PatchRecord,
    /// Top-`J` patches by confidence, anchor excluded, in descending order.
    pub candidates: Vec<PatchRecord>,
    /// Indices into `candidates`.
    pub positives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchSelection {
    pub classes: Vec<ClassPatches>,
}

impl PatchSelection {
    pub fn positives(&self, i: usize) -> impl Iterator<Item = &PatchRecord> {
        let cls = &self.classes[i];
        cls.positives.iter().map(move |&j| &cls.candidates[j])
    }

    /// Anchors and candidates of every class other than `classes[i]`.
    pub fn negatives(&self, i: usize) -> impl Iterator<Item = &PatchRecord> {
        self.classes
            .iter()
            .enumerate()
            .filter(move |(j, _)| *j != i)
            .flat_map(|(_, c)| std::iter::once(&c.anchor).chain(c.candidates.iter()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Sampling {
    /// Fewer than two classes reach the presence threshold; the contrastive
    /// term is skipped.
    Insufficient {
        present: usize,
    },
    Selected(PatchSelection),
}

/// Index of the record with maximal confidence; ties go to the first in
/// raster order.
fn argmax_confidence(records: &[PatchRecord]) -> usize {
    let mut best = 0;
    for (i, r) in records.iter().enumerate() {
        if r.avg_confidence > records[best].avg_confidence {
            best = i;
        }
    }
    best
}

pub fn sample_patches(image: &Tensor, conf: &ConfidenceMaps, cfg: &PlgclConfig) -> Result<Sampling> {
    let (_, h, w) = image.chw()?;
    if (h, w) != (conf.height(), conf.width()) {
        return Err(Error::Shape("confidence maps do not match the image".into()));
    }
    let mut classes = Vec::new();
    for k in 0..conf.classes() {
        let c_k = conf.class_map(k);
        let attended = attended_image(image, c_k)?;
        let mut records = patch_statistics(k as u8, c_k, &attended, cfg.patch_size)?;
        let anchor_idx = argmax_confidence(&records);
        if records[anchor_idx].avg_confidence < cfg.presence_threshold {
            continue;
        }
        let anchor = records.remove(anchor_idx);
        // Stable sort keeps raster order among equal confidences.
        records.sort_by(|a, b| b.avg_confidence.total_cmp(&a.avg_confidence));
        records.truncate(cfg.candidates);
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| {
            let da = (records[a].avg_entropy - anchor.avg_entropy).abs();
            let db = (records[b].avg_entropy - anchor.avg_entropy).abs();
            da.total_cmp(&db)
        });
        order.truncate(cfg.positives);
        order.sort_unstable();
        classes.push(ClassPatches {
            class: k as u8,
            anchor,
            candidates: records,
            positives: order,
        });
    }
    if classes.len() < 2 {
        return Ok(Sampling::Insufficient { present: classes.len() });
    }
    Ok(Sampling::Selected(PatchSelection { classes }))
}

/// Unit-norm student embeddings of the patch payloads.
pub fn embed_patches(params: &SegNetParams, patches: &[&PatchRecord]) -> Result<Vec<(Tensor, EmbedCache)>> {
    patches.iter().map(|p| encode_project(params, &p.pixels)).collect()
}

fn check_unit(vectors: &[&Tensor], dim: usize) -> Result<()> {
    for v in vectors {
        if v.len() != dim {
            return Err(Error::Shape(format!("embedding of length {} != {dim}", v.len())));
        }
        if (v.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("embeddings must have unit norm".into()));
        }
    }
    Ok(())
}

/// Sampled InfoNCE averaged over positives.
pub fn infonce_loss(f_u: &Tensor, positives: &[Tensor], negatives: &[Tensor], tau: f64) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidArgument(
            "InfoNCE needs at least one positive and one negative".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let all: Vec<&Tensor> = std::iter::once(f_u).chain(positives).chain(negatives).collect();
    check_unit(&all, f_u.len())?;
    let neg: Vec<f64> = negatives
        .iter()
        .map(|n| f_u.dot(n).map(|d| d / tau))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for p in positives {
        let s = f_u.dot(p)? / tau;
        let mut logits = Vec::with_capacity(neg.len() + 1);
        logits.push(s);
        logits.extend_from_slice(&neg);
        total += log_sum_exp(&logits) - s;
    }
    Ok(total / positives.len() as f64)
}

/// Mean and diagonal population variance of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Tensor,
    pub var: Tensor,
}

pub fn gaussian_stats(embeddings: &[&Tensor]) -> Result<GaussianStats> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidArgument("gaussian statistics of an empty set".into()))?;
    let d = first.len();
    let n = embeddings.len() as f64;
    let mut mean = vec![0.0; d];
    for e in embeddings {
        if e.len() != d {
            return Err(Error::Shape("embeddings differ in length".into()));
        }
        for (m, v) in mean.iter_mut().zip(e.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for e in embeddings {
        for ((s, v), m) in var.iter_mut().zip(e.data()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    Ok(GaussianStats {
        mean: Tensor::from_vec(mean),
        var: Tensor::from_vec(var),
    })
}

/// Pulls gradients w.r.t. mean and variance back onto the embeddings.
pub fn gaussian_stats_backward(
    embeddings: &[&Tensor],
    stats: &GaussianStats,
    grad_mean: &Tensor,
    grad_var: &Tensor,
) -> Vec<Tensor> {
    let n = embeddings.len() as f64;
    embeddings
        .iter()
        .map(|e| {
            let data = e
                .data()
                .iter()
                .enumerate()
                .map(|(d, v)| grad_mean.data()[d] / n + grad_var.data()[d] * 2.0 * (v - stats.mean.data()[d]) / n)
                .collect();
            Tensor::from_vec(data)
        })
        .collect()
}

/// Gradients of the closed-form loss w.r.t. every input.
#[derive(Clone, Debug)]
pub struct PlgclGrads {
    pub f_u: Tensor,
    pub pos_mean: Tensor,
    pub pos_var: Tensor,
    pub neg_mean: Vec<Tensor>,
    pub neg_var: Vec<Tensor>,
}

/// `a = f.mu / tau`, `q = lambda / (2 tau^2) * sum f^2 sigma`.
fn score(f_u: &Tensor, stats: &GaussianStats, tau: f64, lambda: f64) -> f64 {
    let a: f64 = f_u
        .data()
        .iter()
        .zip(stats.mean.data())
        .map(|(f, m)| f * m)
        .sum::<f64>()
        / tau;
    let q: f64 = f_u
        .data()
        .iter()
        .zip(stats.var.data())
        .map(|(f, s)| f * f * s)
        .sum::<f64>();
    a + lambda / (2.0 * tau * tau) * q
}

/// `ln[exp(a+ + q+) + zeta * sum exp(a- + q-)] - a+` with its full gradient.
pub fn plgcl_loss_with_grads(
    f_u: &Tensor,
    pos: &GaussianStats,
    negs: &[GaussianStats],
    tau: f64,
    zeta: f64,
    lambda: f64,
) -> Result<(f64, PlgclGrads)> {
    if !(tau > 0.0) || !(zeta >= 0.0) {
        return Err(Error::InvalidArgument("need tau > 0 and zeta >= 0".into()));
    }
    let d = f_u.len();
    for s in std::iter::once(pos).chain(negs) {
        if s.mean.len() != d || s.var.len() != d {
            return Err(Error::Shape("gaussian statistics do not match the query".into()));
        }
    }
    let a_pos = f_u.dot(&pos.mean)? / tau;
    let s_pos = score(f_u, pos, tau, lambda);
    let s_neg: Vec<f64> = negs.iter().map(|n| score(f_u, n, tau, lambda)).collect();
    let active = zeta > 0.0;
    let max = if active {
        s_neg.iter().copied().fold(s_pos, f64::max)
    } else {
        s_pos
    };
    let e_pos = (s_pos - max).exp();
    let e_neg: Vec<f64> = s_neg
        .iter()
        .map(|s| if active { zeta * (s - max).exp() } else { 0.0 })
        .collect();
    let z = e_pos + e_neg.iter().sum::<f64>();
    let loss = max + z.ln() - a_pos;
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss"));
    }

    let w_pos = e_pos / z;
    let quad = lambda / (tau * tau);
    let f = f_u.data();
    let mut g_f: Vec<f64> = (0..d)
        .map(|i| (w_pos - 1.0) * pos.mean.data()[i] / tau + w_pos * quad * f[i] * pos.var.data()[i])
        .collect();
    let mut neg_mean = Vec::with_capacity(negs.len());
    let mut neg_var = Vec::with_capacity(negs.len());
    for (n, e) in negs.iter().zip(&e_neg) {
        let w = e / z;
        for i in 0..d {
            g_f[i] += w * (n.mean.data()[i] / tau + quad * f[i] * n.var.data()[i]);
        }
        neg_mean.push(Tensor::from_vec(f.iter().map(|v| w * v / tau).collect()));
        neg_var.push(Tensor::from_vec(f.iter().map(|v| w * 0.5 * quad * v * v).collect()));
    }
    let grads = PlgclGrads {
        f_u: Tensor::from_vec(g_f),
        pos_mean: Tensor::from_vec(f.iter().map(|v| (w_pos - 1.0) * v / tau).collect()),
        pos_var: Tensor::from_vec(f.iter().map(|v| w_pos * 0.5 * quad * v * v).collect()),
        neg_mean,
        neg_var,
    };
    Ok((loss, grads))
}

/// Closed-form loss and its gradient w.r.t. the query embedding.
pub fn plgcl_loss(
    f_u: &Tensor,
    pos: &GaussianStats,
    negs: &[GaussianStats],
    tau: f64,
    zeta: f64,
    lambda: f64,
) -> Result<(f64, Tensor)> {
    plgcl_loss_with_grads(f_u, pos, negs, tau, zeta, lambda).map(|(l, g)| (l, g.f_u))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McBound {
    pub l_mc: f64,
    pub l_closed: f64,
    pub gap: f64,
    pub std_error: f64,
}

fn draw(stats: &GaussianStats, rng: &mut RngState) -> Tensor {
    Tensor::from_vec(
        stats
            .mean
            .data()
            .iter()
            .zip(stats.var.data())
            .map(|(m, s)| m + s.sqrt() * rng.normal())
            .collect(),
    )
}

/// Compares the closed form (`lambda = zeta = 1`) on fitted statistics with a
/// Monte-Carlo estimate of the sampled objective, drawing one positive and
/// one key per negative class from the fitted Gaussians in each trial.
pub fn mc_upper_bound_check(
    f_u: &Tensor,
    pos_samples: &[Tensor],
    neg_samples: &[Vec<Tensor>],
    tau: f64,
    trials: usize,
    rng: &mut RngState,
) -> Result<McBound> {
    if pos_samples.is_empty() || neg_samples.iter().any(|n| n.is_empty()) || trials == 0 {
        return Err(Error::InvalidArgument("bound check needs samples and trials".into()));
    }
    let pos = gaussian_stats(&pos_samples.iter().collect::<Vec<_>>())?;
    let negs = neg_samples
        .iter()
        .map(|n| gaussian_stats(&n.iter().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let (l_closed, _) = plgcl_loss(f_u, &pos, &negs, tau, 1.0, 1.0)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut logits = vec![0.0; negs.len() + 1];
    for _ in 0..trials {
        let s_pos = f_u.dot(&draw(&pos, rng))? / tau;
        logits[0] = s_pos;
        for (slot, n) in logits[1..].iter_mut().zip(&negs) {
            *slot = f_u.dot(&draw(n, rng))? / tau;
        }
        let l = log_sum_exp(&logits) - s_pos;
        sum += l;
        sum_sq += l * l;
    }
    let t = trials as f64;
    let l_mc = sum / t;
    let var = (sum_sq / t - l_mc * l_mc).max(0.0) * t / (t - 1.0).max(1.0);
    Ok(McBound {
        l_mc,
        l_closed,
        gap: l_closed - l_mc,
        std_error: (var / t).sqrt(),
    })
}

/// Result of one contrastive step over a patch selection.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionLoss {
    pub loss: f64,
    /// Classes that served as query (at least one positive).
    pub queries: usize,
}

/// Mean closed-form loss over every present class used as query, with the
/// gradient (scaled by `weight`) added to `grads`. Gradients flow through
/// the query embedding and through the key statistics.
pub fn selection_loss(
    params: &SegNetParams,
    selection: &PatchSelection,
    cfg: &PlgclConfig,
    lambda: f64,
    weight: f64,
    grads: &mut SegNetParams,
) -> Result<SelectionLoss> {
    // Per class: anchor at offset 0, then the candidates.
    let mut offsets = Vec::with_capacity(selection.classes.len());
    let mut patches = Vec::new();
    for c in &selection.classes {
        offsets.push(patches.len());
        patches.push(&c.anchor);
        patches.extend(c.candidates.iter());
    }
    let embedded = embed_patches(params, &patches)?;
    let emb: Vec<&Tensor> = embedded.iter().map(|(e, _)| e).collect();
    let group =
        |i: usize| -> Vec<usize> { (offsets[i]..offsets[i] + 1 + selection.classes[i].candidates.len()).collect() };
    let key_stats = (0..selection.classes.len())
        .map(|i| gaussian_stats(&group(i).iter().map(|&j| emb[j]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;

    let mut emb_grads: Vec<Tensor> = emb.iter().map(|e| Tensor::zeros(e.shape())).collect();
    let mut total = 0.0;
    let mut queries = 0;
    let mut per_query = Vec::new();
    for (i, cls) in selection.classes.iter().enumerate() {
        if cls.positives.is_empty() {
            continue;
        }
        let pos_idx: Vec<usize> = cls.positives.iter().map(|&p| offsets[i] + 1 + p).collect();
        let pos_emb: Vec<&Tensor> = pos_idx.iter().map(|&j| emb[j]).collect();
        let pos = gaussian_stats(&pos_emb)?;
        let neg_classes: Vec<usize> = (0..selection.classes.len()).filter(|&j| j != i).collect();
        let negs: Vec<GaussianStats> = neg_classes.iter().map(|&j| key_stats[j].clone()).collect();
        let (loss, g) = plgcl_loss_with_grads(
            emb[offsets[i]],
            &pos,
            &negs,
            cfg.temperature,
            cfg.negative_scale,
            lambda,
        )?;
        total += loss;
        queries += 1;
        per_query.push((i, pos_idx, pos, neg_classes, g));
    }
    if queries == 0 {
        return Ok(SelectionLoss { loss: 0.0, queries });
    }
    let scale = 1.0 / queries as f64;
    for (i, pos_idx, pos, neg_classes, g) in per_query {
        emb_grads[offsets[i]].axpy(scale, &g.f_u)?;
        let pos_emb: Vec<&Tensor> = pos_idx.iter().map(|&j| emb[j]).collect();
        for (j, gj) in pos_idx
            .iter()
            .zip(gaussian_stats_backward(&pos_emb, &pos, &g.pos_mean, &g.pos_var))
        {
            emb_grads[*j].axpy(scale, &gj)?;
        }
        for (n, &c) in neg_classes.iter().enumerate() {
            let idx = group(c);
            let members: Vec<&Tensor> = idx.iter().map(|&j| emb[j]).collect();
            let back = gaussian_stats_backward(&members, &key_stats[c], &g.neg_mean[n], &g.neg_var[n]);
            for (j, gj) in idx.iter().zip(back) {
                emb_grads[*j].axpy(scale, &gj)?;
            }
        }
    }
    if weight != 0.0 {
        for ((_, cache), g) in embedded.iter().zip(&emb_grads) {
            encode_project_backward(params, cache, &g.scale(weight), grads)?;
        }
    }
    Ok(SelectionLoss {
        loss: total * scale,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, max_relative_error, RELATIVE_ERROR_FLOOR};
    use proptest::prelude::*;

    fn unit(rng: &mut RngState, d: usize) -> Tensor {
        let v = Tensor::from_vec((0..d).map(|_| rng.normal()).collect());
        let n = v.norm();
        v.scale(1.0 / n)
    }

    fn random_stats(rng: &mut RngState, d: usize, spread: f64) -> GaussianStats {
        GaussianStats {
            mean: Tensor::from_vec((0..d).map(|_| 0.3 * rng.normal()).collect()),
            var: Tensor::from_vec((0..d).map(|_| spread * rng.uniform()).collect()),
        }
    }

    #[test]
    fn confidence_map_cases() {
        let zero = confidence_maps(&Tensor::zeros(&[4, 2, 3])).unwrap();
        assert!(zero.tensor().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let mut logits = Tensor::zeros(&[3, 1, 1]);
        logits.data_mut()[1] = 20.0;
        assert!(confidence_maps(&logits).unwrap().tensor().data()[1] > 0.999);
        let mut rng = RngState::new(1);
        let random = Tensor::new(vec![5, 4, 4], (0..80).map(|_| 3.0 * rng.normal()).collect()).unwrap();
        let c = confidence_maps(&random).unwrap();
        for px in 0..16 {
            let s: f64 = (0..5).map(|k| c.class_map(k)[px]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attended_image_cases() {
        let mut rng = RngState::new(2);
        let img = Tensor::new(vec![3, 2, 2], (0..12).map(|_| rng.uniform()).collect()).unwrap();
        assert_eq!(attended_image(&img, &[1.0; 4]).unwrap(), img);
        assert!(attended_image(&img, &[0.0; 4])
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let ones = Tensor::full(&[3, 2, 2], 1.0);
        let out = attended_image(&ones, &[1.0, 0.25, 1.0, 1.0]).unwrap();
        for ch in 0..3 {
            assert_eq!(out.channel(ch)[1], 0.25);
        }
        assert!(attended_image(&img, &[1.0; 3]).is_err());
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy_fn(0.5).unwrap() - 2f64.ln()).abs() < 1e-12);
        let clamped = -1e-7 * 1e-7f64.ln() - (1.0 - 1e-7) * (1.0 - 1e-7f64).ln();
        assert_eq!(entropy_fn(0.0).unwrap(), clamped);
        assert!((entropy_fn(0.0).unwrap() - 1.71e-6).abs() < 0.01e-6);
        assert!(entropy_fn(-0.1).is_err());
        assert!(entropy_fn(1.2).is_err());
    }

    proptest! {
        #[test]
        fn entropy_is_symmetric_and_bounded(x in 0.0f64..=1.0) {
            let a = entropy_fn(x).unwrap();
            let b = entropy_fn(1.0 - x).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=2f64.ln() + 1e-15).contains(&a));
        }

        #[test]
        fn closed_form_is_order_invariant_and_monotone(seed in 0u64..5000) {
            let mut rng = RngState::new(seed);
            let f = unit(&mut rng, 6);
            let pos = random_stats(&mut rng, 6, 0.05);
            let mut negs: Vec<GaussianStats> = (0..3).map(|_| random_stats(&mut rng, 6, 0.05)).collect();
            let (l, _) = plgcl_loss(&f, &pos, &negs, 0.5, 1.0, 0.7).unwrap();
            negs.reverse();
            let (r, _) = plgcl_loss(&f, &pos, &negs, 0.5, 1.0, 0.7).unwrap();
            prop_assert!((l - r).abs() < 1e-12);
            // Shift one negative mean along f_u: its a- grows.
            negs[0].mean.axpy(0.1, &f).unwrap();
            let (up, _) = plgcl_loss(&f, &pos, &negs, 0.5, 1.0, 0.7).unwrap();
            prop_assert!(up >= r);
            prop_assert!(l >= 0.0 || (l.abs() < 1e-12));
        }
    }

    #[test]
    fn patch_statistics_simple_cases() {
        let conf = vec![0.8; 64];
        let img = Tensor::full(&[3, 8, 8], 0.5);
        let attended = attended_image(&img, &conf).unwrap();
        for r in patch_statistics(0, &conf, &attended, 4).unwrap() {
            assert!((r.avg_confidence - 0.8).abs() < 1e-15);
        }
        let half = Tensor::full(&[3, 8, 8], 0.5);
        for r in patch_statistics(0, &[1.0; 64], &half, 4).unwrap() {
            assert!((r.avg_entropy - 2f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(
            patch_statistics(0, &conf, &attended, 3),
            Err(Error::PatchGridMisalignment { size: 8, patch: 3 })
        ));
    }

    /// Per-pixel transcription of the patch average confidence and entropy.
    fn brute_patch_stats(c_k: &[f64], attended: &Tensor, p: usize, row: usize, col: usize) -> (f64, f64) {
        let (_, h, w) = attended.chw().unwrap();
        let mut conf_sum = 0.0;
        let mut ent_sum = 0.0;
        for y in row..row + p {
            for x in col..col + p {
                conf_sum += c_k[y * w + x];
                let rgb: Vec<f64> = (0..3).map(|ch| attended.data()[(ch * h + y) * w + x]).collect();
                let g = (0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]).clamp(0.0, 1.0);
                let g = g.clamp(1e-7, 1.0 - 1e-7);
                ent_sum += -g * g.ln() - (1.0 - g) * (1.0 - g).ln();
            }
        }
        (conf_sum / (p * p) as f64, ent_sum / (p * p) as f64)
    }

    #[test]
    fn patch_statistics_match_brute_force() {
        for seed in 0..10 {
            let mut rng = RngState::new(seed);
            let logits = Tensor::new(vec![3, 16, 16], (0..768).map(|_| 2.0 * rng.normal()).collect()).unwrap();
            let conf = confidence_maps(&logits).unwrap();
            let img = Tensor::new(vec![3, 16, 16], (0..768).map(|_| rng.uniform()).collect()).unwrap();
            for k in 0..3 {
                let attended = attended_image(&img, conf.class_map(k)).unwrap();
                let records = patch_statistics(k as u8, conf.class_map(k), &attended, 4).unwrap();
                assert_eq!(records.len(), 16);
                for r in &records {
                    let (a, e) = brute_patch_stats(conf.class_map(k), &attended, 4, r.row, r.col);
                    assert_eq!(r.avg_confidence, a);
                    assert_eq!(r.avg_entropy, e);
                    assert!((0.0..=1.0).contains(&r.avg_confidence));
                    assert!((0.0..=2f64.ln()).contains(&r.avg_entropy));
                }
            }
        }
    }

    fn logits_from_labels(labels: &[usize], k: usize, h: usize, w: usize, margin: f64) -> Tensor {
        let mut t = Tensor::zeros(&[k, h, w]);
        for (px, &l) in labels.iter().enumerate() {
            t.data_mut()[l * h * w + px] = margin;
        }
        t
    }

    #[test]
    fn separable_halves() {
        let (h, w) = (16, 16);
        let labels: Vec<usize> = (0..h * w).map(|i| usize::from(i % w >= 8)).collect();
        let conf = confidence_maps(&logits_from_labels(&labels, 2, h, w, 40.0)).unwrap();
        let img = Tensor::full(&[3, h, w], 0.5);
        let cfg = PlgclConfig {
            patch_size: 4,
            candidates: 4,
            ..PlgclConfig::default()
        };
        let Sampling::Selected(sel) = sample_patches(&img, &conf, &cfg).unwrap() else {
            panic!("two classes are present")
        };
        assert_eq!(sel.classes.len(), 2);
        assert!(sel.classes[0].anchor.col < 8);
        assert!(sel.classes[1].anchor.col >= 8);
        assert_eq!((sel.classes[0].anchor.row, sel.classes[0].anchor.col), (0, 0));
        assert_eq!((sel.classes[1].anchor.row, sel.classes[1].anchor.col), (0, 8));
        for n in sel.negatives(0) {
            assert_eq!(n.class, 1);
            assert!(n.col >= 8);
        }
        assert_eq!(sel.positives(0).count(), 2);
    }

    #[test]
    fn single_class_signals_skip() {
        let conf = confidence_maps(&logits_from_labels(&[0; 64], 3, 8, 8, 10.0)).unwrap();
        let img = Tensor::full(&[3, 8, 8], 0.4);
        let cfg = PlgclConfig {
            patch_size: 4,
            ..PlgclConfig::default()
        };
        assert_eq!(
            sample_patches(&img, &conf, &cfg).unwrap(),
            Sampling::Insufficient { present: 1 }
        );
    }

    /// Enumerates every patch by hand and derives the selection from the
    /// definitions: argmax anchor, top-J pool, nearest-entropy positives.
    #[test]
    fn three_class_selection_matches_enumeration() {
        for seed in 0..20 {
            let mut rng = RngState::new(seed);
            let (h, w, p, k) = (16, 16, 4, 3);
            let labels: Vec<usize> = (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    if y < 6 {
                        0
                    } else if x < 9 {
                        1
                    } else {
                        2
                    }
                })
                .collect();
            let mut logits = logits_from_labels(&labels, k, h, w, 3.0);
            logits.data_mut().iter_mut().for_each(|v| *v += 0.8 * rng.normal());
            let conf = confidence_maps(&logits).unwrap();
            let img = Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.uniform()).collect()).unwrap();
            let cfg = PlgclConfig {
                patch_size: p,
                candidates: 5,
                positives: 2,
                presence_threshold: 0.3,
                ..PlgclConfig::default()
            };
            let sampled = sample_patches(&img, &conf, &cfg).unwrap();

            let mut expected = Vec::new();
            for class in 0..k {
                let attended = attended_image(&img, conf.class_map(class)).unwrap();
                let mut stats = Vec::new();
                for row in (0..h).step_by(p) {
                    for col in (0..w).step_by(p) {
                        let (a, e) = brute_patch_stats(conf.class_map(class), &attended, p, row, col);
                        stats.push((row, col, a, e));
                    }
                }
                let mut best = 0;
                for i in 1..stats.len() {
                    if stats[i].2 > stats[best].2 {
                        best = i;
                    }
                }
                if stats[best].2 < cfg.presence_threshold {
                    continue;
                }
                let anchor = stats[best];
                let mut pool: Vec<(usize, usize, f64, f64)> = stats
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != best)
                    .map(|(_, s)| *s)
                    .collect();
                // Insertion sort by descending confidence, stable.
                for i in 1..pool.len() {
                    let mut j = i;
                    while j > 0 && pool[j - 1].2 < pool[j].2 {
                        pool.swap(j - 1, j);
                        j -= 1;
                    }
                }
                pool.truncate(cfg.candidates);
                let mut dist: Vec<(f64, usize)> = pool
                    .iter()
                    .enumerate()
                    .map(|(i, s)| ((s.3 - anchor.3).abs(), i))
                    .collect();
                dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let mut pos: Vec<usize> = dist.iter().take(cfg.positives).map(|d| d.1).collect();
                pos.sort();
                expected.push((
                    class,
                    (anchor.0, anchor.1),
                    pool.iter().map(|s| (s.0, s.1)).collect::<Vec<_>>(),
                    pos,
                ));
            }

            match sampled {
                Sampling::Insufficient { present } => assert!(expected.len() < 2 && present == expected.len()),
                Sampling::Selected(sel) => {
                    assert_eq!(sel.classes.len(), expected.len(), "seed {seed}");
                    for (got, (class, anchor, pool, pos)) in sel.classes.iter().zip(&expected) {
                        assert_eq!(got.class as usize, *class);
                        assert_eq!((got.anchor.row, got.anchor.col), *anchor);
                        let got_pool: Vec<_> = got.candidates.iter().map(|c| (c.row, c.col)).collect();
                        assert_eq!(&got_pool, pool);
                        assert_eq!(&got.positives, pos);
                    }
                    for i in 0..sel.classes.len() {
                        let n_neg = sel.negatives(i).count();
                        let want: usize = sel
                            .classes
                            .iter()
                            .enumerate()
                            .filter(|(j, _)| *j != i)
                            .map(|(_, c)| 1 + c.candidates.len())
                            .sum();
                        assert_eq!(n_neg, want);
                        assert!(sel.negatives(i).all(|r| r.class != sel.classes[i].class));
                    }
                }
            }
        }
    }

    #[test]
    fn infonce_cases() {
        let e = |v: &[f64]| Tensor::from_vec(v.to_vec());
        let f = e(&[1.0, 0.0]);
        let p = e(&[0.0, 1.0]);
        let n = e(&[0.0, -1.0]);
        assert!(
            (infonce_loss(&f, std::slice::from_ref(&p), std::slice::from_ref(&n), 0.5).unwrap() - 2f64.ln()).abs()
                < 1e-12
        );
        let near = infonce_loss(&f, std::slice::from_ref(&f), &[e(&[-1.0, 0.0])], 0.01).unwrap();
        assert!(near < 1e-60);
        assert!(infonce_loss(&f, &[], std::slice::from_ref(&n), 0.1).is_err());
        assert!(infonce_loss(&f, &[p], &[], 0.1).is_err());
    }

    #[test]
    fn infonce_matches_direct_transcription() {
        let tau = 0.07;
        for seed in 0..20 {
            let mut rng = RngState::new(seed);
            let f = unit(&mut rng, 8);
            let pos: Vec<Tensor> = (0..3).map(|_| unit(&mut rng, 8)).collect();
            let neg: Vec<Tensor> = (0..5).map(|_| unit(&mut rng, 8)).collect();
            let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
            let mut expected = 0.0;
            for p in &pos {
                let num = (dot(&f, p) / tau).exp();
                let den = num + neg.iter().map(|n| (dot(&f, n) / tau).exp()).sum::<f64>();
                expected += -(num / den).ln();
            }
            expected /= pos.len() as f64;
            let got = infonce_loss(&f, &pos, &neg, tau).unwrap();
            assert!(
                (got - expected).abs() < 1e-10 * expected.abs().max(1.0),
                "{got} vs {expected}"
            );
        }
    }

    #[test]
    fn gaussian_stats_cases() {
        let v = Tensor::from_vec(vec![0.5, -2.0, 3.0]);
        let single = gaussian_stats(&[&v]).unwrap();
        assert_eq!(single.mean, v);
        assert!(single.var.data().iter().all(|&s| s == 0.0));
        let neg = v.scale(-1.0);
        let pair = gaussian_stats(&[&v, &neg]).unwrap();
        assert!(pair.mean.data().iter().all(|&m| m == 0.0));
        for (s, x) in pair.var.data().iter().zip(v.data()) {
            assert!((s - x * x).abs() < 1e-15);
        }
        assert!(gaussian_stats(&[]).is_err());

        let mut rng = RngState::new(4);
        let set: Vec<Tensor> = (0..10)
            .map(|_| Tensor::from_vec((0..4).map(|_| rng.normal()).collect()))
            .collect();
        let stats = gaussian_stats(&set.iter().collect::<Vec<_>>()).unwrap();
        for d in 0..4 {
            let xs: Vec<f64> = set.iter().map(|t| t.data()[d]).collect();
            let mean = xs.iter().sum::<f64>() / 10.0;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 10.0;
            assert!((stats.mean.data()[d] - mean).abs() < 1e-14);
            assert!((stats.var.data()[d] - var).abs() < 1e-14);
        }
    }

    #[test]
    fn closed_form_reductions() {
        let mut rng = RngState::new(6);
        let f = unit(&mut rng, 5);
        let point = |rng: &mut RngState| GaussianStats {
            mean: unit(rng, 5),
            var: Tensor::zeros(&[5]),
        };
        let pos = point(&mut rng);
        let (l, _) = plgcl_loss(&f, &pos, &[], 0.07, 1.0, 1.0).unwrap();
        assert!(l.abs() < 1e-12);

        let neg = point(&mut rng);
        let tau = 0.3;
        let a_pos = f.dot(&pos.mean).unwrap() / tau;
        let a_neg = f.dot(&neg.mean).unwrap() / tau;
        let softplus = (1.0 + (a_neg - a_pos).exp()).ln();
        let (l, _) = plgcl_loss(&f, &pos, std::slice::from_ref(&neg), tau, 1.0, 1.0).unwrap();
        assert!((l - softplus).abs() < 1e-12);

        // lambda = 0 drops the variance terms.
        let noisy_pos = GaussianStats {
            var: Tensor::full(&[5], 0.3),
            ..pos.clone()
        };
        let noisy_neg = GaussianStats {
            var: Tensor::full(&[5], 0.2),
            ..neg
        };
        let (l0, _) = plgcl_loss(&f, &noisy_pos, &[noisy_neg], tau, 1.0, 0.0).unwrap();
        assert!((l0 - softplus).abs() < 1e-12);

        // zeta = 0 removes the negatives entirely.
        let (lz, _) = plgcl_loss(&f, &pos, &[point(&mut rng)], tau, 0.0, 1.0).unwrap();
        assert!(lz.abs() < 1e-12);
    }

    #[test]
    fn closed_form_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = RngState::new(seed);
            let f = unit(&mut rng, 8);
            let pos = random_stats(&mut rng, 8, 0.02);
            let negs: Vec<GaussianStats> = (0..3).map(|_| random_stats(&mut rng, 8, 0.02)).collect();
            let (tau, zeta, lambda) = (0.07, 1.0, 1.0);
            let (_, g) = plgcl_loss_with_grads(&f, &pos, &negs, tau, zeta, lambda).unwrap();

            let fd_f =
                finite_difference_gradient(|t| plgcl_loss(t, &pos, &negs, tau, zeta, lambda).unwrap().0, &f, 1e-6)
                    .unwrap();
            let err = max_relative_error(g.f_u.data(), fd_f.data(), RELATIVE_ERROR_FLOOR);
            assert!(err < 1e-6, "seed {seed}: f_u {err}");

            let fd_mean = finite_difference_gradient(
                |t| {
                    let p = GaussianStats {
                        mean: t.clone(),
                        var: pos.var.clone(),
                    };
                    plgcl_loss(&f, &p, &negs, tau, zeta, lambda).unwrap().0
                },
                &pos.mean,
                1e-6,
            )
            .unwrap();
            assert!(max_relative_error(g.pos_mean.data(), fd_mean.data(), RELATIVE_ERROR_FLOOR) < 1e-5);
            let fd_var = finite_difference_gradient(
                |t| {
                    let mut n = negs.clone();
                    n[1].var = t.clone();
                    plgcl_loss(&f, &pos, &n, tau, zeta, lambda).unwrap().0
                },
                &negs[1].var,
                1e-6,
            )
            .unwrap();
            let e = max_relative_error(g.neg_var[1].data(), fd_var.data(), RELATIVE_ERROR_FLOOR);
            assert!(e < 1e-5, "seed {seed}: {e}");
        }
    }

    #[test]
    fn degenerate_gaussians_close_the_bound_exactly() {
        let mut rng = RngState::new(7);
        let f = unit(&mut rng, 6);
        let p = unit(&mut rng, 6);
        let negs: Vec<Vec<Tensor>> = (0..3).map(|_| vec![unit(&mut rng, 6); 2]).collect();
        let b = mc_upper_bound_check(&f, &[p.clone(), p], &negs, 0.07, 100, &mut rng).unwrap();
        assert!(b.gap.abs() < 1e-9, "{b:?}");
    }

    #[test]
    fn bound_holds_on_random_gaussians() {
        let mut rng = RngState::new(8);
        for _ in 0..5 {
            let f = unit(&mut rng, 8);
            let center = unit(&mut rng, 8);
            let pos: Vec<Tensor> = (0..4)
                .map(|_| center.add_scalar(0.0).scale(1.0))
                .map(|c| {
                    let mut c = c;
                    c.axpy(0.3, &unit(&mut rng, 8)).unwrap();
                    c.scale(1.0 / c.norm())
                })
                .collect();
            let negs: Vec<Vec<Tensor>> = (0..3).map(|_| (0..5).map(|_| unit(&mut rng, 8)).collect()).collect();
            let b = mc_upper_bound_check(&f, &pos, &negs, 0.07, 20_000, &mut rng).unwrap();
            assert!(b.gap >= -3.0 * b.std_error, "{b:?}");
        }
    }

    #[test]
    fn standard_error_shrinks_with_trials() {
        let mut rng = RngState::new(9);
        let f = unit(&mut rng, 8);
        let pos: Vec<Tensor> = (0..4).map(|_| unit(&mut rng, 8)).collect();
        let negs: Vec<Vec<Tensor>> = (0..2).map(|_| (0..4).map(|_| unit(&mut rng, 8)).collect()).collect();
        let small = mc_upper_bound_check(&f, &pos, &negs, 0.5, 1_000, &mut rng).unwrap();
        let large = mc_upper_bound_check(&f, &pos, &negs, 0.5, 100_000, &mut rng).unwrap();
        let ratio = small.std_error / large.std_error;
        assert!((ratio - 10.0).abs() < 2.0, "ratio {ratio}");
    }
}
