//! Teacher training on mixed multi-source data, student adaptation on
//! unlabeled target images, and evaluation.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classmixpp::{argmax_labels, classmix_pp, ClassScores};
use crate::datasets::augment::crop_image;
use crate::datasets::{AugmentConfig, Dataset, LabelMap, LabeledImage, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::gmc::{apply_mask, sample_patch_mask, GmcConfig};
use crate::metrics::{ConfusionMatrix, MiouReport};
use crate::model::{backward, forward, predict, segmentation_loss, SegNetParams};
use crate::numerics::{pixel_cross_entropy, RngState, Tensor};
use crate::optim::{adamw_step, ema_update, AdamWState, EmaConfig, OptimConfig};
use crate::plgcl::{confidence_maps, sample_patches, selection_loss, ConfidenceMaps, PlgclConfig, Sampling};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub use_classmixpp: bool,
    pub gmc: GmcConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per epoch; defaults to the largest source.
    pub steps_per_epoch: Option<usize>,
    pub augment: AugmentConfig,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            use_classmixpp: true,
            gmc: GmcConfig::default(),
            optim: OptimConfig::default(),
            epochs: 24,
            batch_size: 4,
            steps_per_epoch: None,
            augment: AugmentConfig::default(),
            embed_dim: 32,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self, prefix: &str, problems: &mut Vec<String>) {
        self.gmc.validate(&format!("{prefix}.gmc"), problems);
        self.optim.validate(&format!("{prefix}.optim"), problems);
        self.augment.validate(&format!("{prefix}.augment"), problems);
        if self.epochs == 0 {
            problems.push(format!("{prefix}.epochs: must be at least 1"));
        }
        if self.batch_size == 0 {
            problems.push(format!("{prefix}.batch_size: must be at least 1"));
        }
        if self.steps_per_epoch == Some(0) {
            problems.push(format!("{prefix}.steps_per_epoch: must be at least 1"));
        }
        if self.embed_dim < 2 {
            problems.push(format!("{prefix}.embed_dim: must be at least 2"));
        }
        if let Some([h, w]) = self.augment.crop {
            if self.gmc.patch_size > 0 && (h % self.gmc.patch_size != 0 || w % self.gmc.patch_size != 0) {
                problems.push(format!(
                    "{prefix}.gmc.patch_size: {} does not divide the {h}x{w} crop",
                    self.gmc.patch_size
                ));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub contrastive_weight: f64,
    pub ce_weight: f64,
    /// Per predicted class, the fraction of most confident pixels whose
    /// pseudo-labels enter the cross-entropy; 1 keeps every pixel.
    pub pseudo_keep: f64,
    /// Weight of an extra supervised term on source samples; 0 keeps the
    /// adaptation target-only.
    pub source_ce_weight: f64,
    pub plgcl: PlgclConfig,
    pub ema: EmaConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per epoch; defaults to the target set size.
    pub steps_per_epoch: Option<usize>,
    /// Crop and photometric settings of the student view. Pseudo-labels are
    /// computed on the crop before photometric changes.
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            contrastive_weight: 1.0,
            ce_weight: 0.5,
            pseudo_keep: 0.3,
            source_ce_weight: 0.0,
            plgcl: PlgclConfig::default(),
            ema: EmaConfig::default(),
            optim: OptimConfig {
                lr: 1e-4,
                ..OptimConfig::default()
            },
            epochs: 4,
            batch_size: 2,
            steps_per_epoch: None,
            augment: AugmentConfig::strong(),
            seed: 0,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self, prefix: &str, problems: &mut Vec<String>) {
        for (name, v) in [
            ("contrastive_weight", self.contrastive_weight),
            ("ce_weight", self.ce_weight),
            ("source_ce_weight", self.source_ce_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{prefix}.{name}: must be a finite non-negative number"));
            }
        }
        if !(self.pseudo_keep > 0.0 && self.pseudo_keep <= 1.0) {
            problems.push(format!("{prefix}.pseudo_keep: must lie in (0, 1]"));
        }
        self.plgcl.validate(&format!("{prefix}.plgcl"), problems);
        self.ema.validate(&format!("{prefix}.ema"), problems);
        self.optim.validate(&format!("{prefix}.optim"), problems);
        self.augment.validate(&format!("{prefix}.augment"), problems);
        if self.epochs == 0 {
            problems.push(format!("{prefix}.epochs: must be at least 1"));
        }
        if self.batch_size == 0 {
            problems.push(format!("{prefix}.batch_size: must be at least 1"));
        }
        if self.steps_per_epoch == Some(0) {
            problems.push(format!("{prefix}.steps_per_epoch: must be at least 1"));
        }
    }
}

/// One line of `metrics.jsonl`. Loss fields are means over the epoch's
/// samples; `None` when the term is inactive in the phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub seg_loss: Option<f64>,
    pub gmc_loss: Option<f64>,
    pub plgcl_loss: Option<f64>,
    pub ce_pseudo_loss: Option<f64>,
    /// Fraction of student samples whose contrastive term was skipped.
    pub plgcl_skipped: Option<f64>,
    pub train_miou: Option<f64>,
    pub val_miou: Option<f64>,
    pub seconds: f64,
}

/// `report.json`; holds no timing so reruns are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub phase: String,
    pub seed: u64,
    pub epochs: usize,
    pub optimizer_steps: u64,
    pub final_losses: PhaseLosses,
    pub val: Option<MiouReport>,
    /// Target ground-truth reads during adaptation; always 0.
    pub target_label_reads: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLosses {
    pub seg_loss: Option<f64>,
    pub gmc_loss: Option<f64>,
    pub plgcl_loss: Option<f64>,
    pub ce_pseudo_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: SegNetParams,
    pub metrics: Vec<EpochMetrics>,
    /// Mean total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub report: RunReport,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub student: SegNetParams,
    /// The teacher after EMA tracking (unchanged when EMA is off).
    pub teacher: SegNetParams,
    pub metrics: Vec<EpochMetrics>,
    pub step_losses: Vec<f64>,
    pub target_label_reads: usize,
    pub report: RunReport,
}

/// Output directory handling shared by both phases.
struct RunDir {
    dir: Option<PathBuf>,
}

impl RunDir {
    fn create(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let path = d.join(METRICS_FILE);
            File::create(&path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
        })
    }

    fn log(&self, m: &EpochMetrics) -> Result<()> {
        let Some(d) = &self.dir else { return Ok(()) };
        let path = d.join(METRICS_FILE);
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(m)?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    fn checkpoint(&self, params: &SegNetParams, name: &str, epoch: usize) -> Result<()> {
        match &self.dir {
            Some(d) => params.save(&d.join(name), epoch),
            None => Ok(()),
        }
    }

    fn report(&self, report: &RunReport) -> Result<()> {
        let Some(d) = &self.dir else { return Ok(()) };
        let path = d.join(REPORT_FILE);
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, Default)]
struct Sums {
    values: [f64; 4],
    counts: [usize; 4],
}

const SEG: usize = 0;
const GMC: usize = 1;
const PLGCL: usize = 2;
const CE_PSEUDO: usize = 3;

impl Sums {
    fn add(&mut self, slot: usize, v: f64) {
        self.values[slot] += v;
        self.counts[slot] += 1;
    }

    fn merge(&mut self, other: &Sums) {
        for i in 0..4 {
            self.values[i] += other.values[i];
            self.counts[i] += other.counts[i];
        }
    }

    fn mean(&self, slot: usize) -> Option<f64> {
        (self.counts[slot] > 0).then(|| self.values[slot] / self.counts[slot] as f64)
    }

    fn losses(&self) -> PhaseLosses {
        PhaseLosses {
            seg_loss: self.mean(SEG),
            gmc_loss: self.mean(GMC),
            plgcl_loss: self.mean(PLGCL),
            ce_pseudo_loss: self.mean(CE_PSEUDO),
        }
    }
}

/// Per-sample contribution to one optimizer step.
struct SampleStep {
    grads: SegNetParams,
    total: f64,
    sums: Sums,
    cm: Option<ConfusionMatrix>,
    plgcl_skipped: bool,
}

fn check_sources(sources: &[&Dataset]) -> Result<usize> {
    let Some(first) = sources.first() else {
        return Err(Error::InvalidArgument("at least one source dataset is required".into()));
    };
    let k = first.class_count();
    for s in sources {
        if s.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "source dataset '{}' is empty",
                s.manifest.name
            )));
        }
        if s.class_count() != k {
            return Err(Error::InvalidArgument(
                "source datasets disagree on the class list".into(),
            ));
        }
    }
    Ok(k)
}

/// Draws the pair `(A, B)` for one teacher step: with two or more sources,
/// one image from each of two distinct sources, roles swapped with
/// probability 0.5.
fn draw_pair(sources: &[&Dataset], rng: &mut RngState) -> (LabeledImage, LabeledImage) {
    let (sa, sb) = if sources.len() >= 2 {
        let picked = rng
            .choose_subset(&(0..sources.len()).collect::<Vec<_>>(), 2)
            .expect("two sources");
        (picked[0], picked[1])
    } else {
        (0, 0)
    };
    let a = sources[sa].sample(rng.int_range(0, sources[sa].len() - 1));
    let b = sources[sb].sample(rng.int_range(0, sources[sb].len() - 1));
    if rng.bernoulli(0.5) {
        (b, a)
    } else {
        (a, b)
    }
}

fn teacher_sample(
    params: &SegNetParams,
    sources: &[&Dataset],
    cfg: &TeacherConfig,
    classes: usize,
    rng: &mut RngState,
) -> Result<SampleStep> {
    let (a, b) = draw_pair(sources, rng);
    let a = cfg.augment.apply(&a, rng)?;
    let mut grads = params.zeros_like();
    let mut sums = Sums::default();

    let (x, y) = if cfg.use_classmixpp {
        let b = cfg.augment.apply(&b, rng)?;
        let mix = classmix_pp(&a, &b, rng)?;
        (mix.image, mix.labels)
    } else {
        (a.image.clone(), a.labels.clone())
    };
    let (logits, cache) = forward(params, &x)?;
    let (seg, g_logits) = pixel_cross_entropy(&logits, y.data(), IGNORE_LABEL)?;
    backward(params, &cache, &g_logits, &mut grads)?;
    sums.add(SEG, seg);
    let mut cm = ConfusionMatrix::new(classes);
    cm.update(&argmax_labels(ClassScores::Channels(&logits))?, &y)?;

    let mut total = seg;
    if cfg.gmc.weight > 0.0 {
        let (gx, gy) = if cfg.gmc.on_mixed {
            (&x, &y)
        } else {
            (&a.image, &a.labels)
        };
        let (_, h, w) = gx.chw()?;
        let mask = sample_patch_mask(h, w, cfg.gmc.patch_size, cfg.gmc.mask_ratio, rng)?;
        let masked = apply_mask(gx, &mask)?;
        let gmc = segmentation_loss(params, &masked, gy.data(), cfg.gmc.weight, &mut grads)?;
        sums.add(GMC, gmc);
        total += cfg.gmc.weight * gmc;
    }
    Ok(SampleStep {
        grads,
        total,
        sums,
        cm: Some(cm),
        plgcl_skipped: false,
    })
}

/// Sums per-sample gradients in sample order and takes one AdamW step.
struct StepAccumulator {
    epoch_sums: Sums,
    cm: Option<ConfusionMatrix>,
    skipped: usize,
    samples: usize,
    step_losses: Vec<f64>,
}

impl StepAccumulator {
    fn new() -> Self {
        Self {
            epoch_sums: Sums::default(),
            cm: None,
            skipped: 0,
            samples: 0,
            step_losses: Vec::new(),
        }
    }

    fn apply(
        &mut self,
        params: &mut SegNetParams,
        state: &mut AdamWState,
        lr: f64,
        batch: Vec<SampleStep>,
    ) -> Result<()> {
        let n = batch.len() as f64;
        let mut grads = params.zeros_like();
        let mut total = 0.0;
        for s in batch {
            grads.accumulate(&s.grads, 1.0 / n)?;
            total += s.total / n;
            self.epoch_sums.merge(&s.sums);
            self.samples += 1;
            self.skipped += usize::from(s.plgcl_skipped);
            if let Some(cm) = s.cm {
                match &mut self.cm {
                    Some(acc) => acc.merge(&cm)?,
                    None => self.cm = Some(cm),
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        adamw_step(params, &grads, state, lr)?;
        self.step_losses.push(total);
        Ok(())
    }
}

fn run_batch<F>(range: std::ops::Range<usize>, f: F) -> Result<Vec<SampleStep>>
where
    F: Fn(usize) -> Result<SampleStep> + Sync + Send,
{
    // Results come back in index order whatever the thread schedule.
    range.into_par_iter().map(f).collect()
}

fn val_miou(params: &SegNetParams, val: Option<&Dataset>) -> Result<Option<MiouReport>> {
    val.map(|v| evaluate(params, v)).transpose()
}

/// Trains a teacher from scratch on one or more labeled sources. Writes
/// `metrics.jsonl`, `report.json`, `teacher_eNNN.ckpt` per epoch and
/// `teacher.ckpt` into `out` when given.
pub fn train_teacher(
    sources: &[&Dataset],
    val: Option<&Dataset>,
    cfg: &TeacherConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut problems = Vec::new();
    cfg.validate("teacher", &mut problems);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let classes = check_sources(sources)?;
    let run = RunDir::create(out)?;
    let mut params = SegNetParams::init(&mut RngState::derived(cfg.seed, &[u64::MAX]), classes, cfg.embed_dim);
    let mut state = AdamWState::new(&params, cfg.optim);
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| sources.iter().map(|s| s.len()).max().unwrap_or(0));

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut last = Sums::default();
    let mut val_report = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.optim.lr_at(epoch, cfg.epochs);
        let mut acc = StepAccumulator::new();
        let mut start = 0;
        while start < steps {
            let end = (start + cfg.batch_size).min(steps);
            let snapshot = &params;
            let batch = run_batch(start..end, |i| {
                let mut rng = RngState::derived(cfg.seed, &[epoch as u64, i as u64]);
                teacher_sample(snapshot, sources, cfg, classes, &mut rng)
            })?;
            acc.apply(&mut params, &mut state, lr, batch)?;
            start = end;
        }
        val_report = val_miou(&params, val)?;
        let m = EpochMetrics {
            phase: "teacher".into(),
            epoch,
            lr,
            seg_loss: acc.epoch_sums.mean(SEG),
            gmc_loss: acc.epoch_sums.mean(GMC),
            plgcl_loss: None,
            ce_pseudo_loss: None,
            plgcl_skipped: None,
            train_miou: acc.cm.as_ref().and_then(|cm| cm.miou().ok()),
            val_miou: val_report.as_ref().map(|r| r.miou),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "teacher epoch {epoch}: seg {:.4} gmc {:?} train mIoU {:?} val mIoU {:?}",
            m.seg_loss.unwrap_or(f64::NAN),
            m.gmc_loss,
            m.train_miou,
            m.val_miou
        );
        run.log(&m)?;
        run.checkpoint(&params, &format!("teacher_e{epoch:03}.ckpt"), epoch)?;
        metrics.push(m);
        step_losses.extend(acc.step_losses);
        last = acc.epoch_sums;
    }
    run.checkpoint(&params, "teacher.ckpt", cfg.epochs)?;
    let report = RunReport {
        phase: "teacher".into(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        optimizer_steps: state.t,
        final_losses: last.losses(),
        val: val_report,
        target_label_reads: None,
    };
    run.report(&report)?;
    Ok(TrainOutcome {
        params,
        metrics,
        step_losses,
        report,
    })
}

/// Per-pixel argmax of the teacher prediction and its softmax maps.
pub fn pseudo_labels(teacher: &SegNetParams, x: &Tensor) -> Result<(LabelMap, ConfidenceMaps)> {
    let logits = predict(teacher, x)?;
    let labels = argmax_labels(ClassScores::Channels(&logits))?;
    Ok((labels, confidence_maps(&logits)?))
}

/// Class-balanced pseudo-label selection: within each predicted class only
/// the `keep` most confident fraction of its pixels retains its label, the
/// rest become the ignore label. `keep = 1` returns `labels` unchanged.
pub fn confident_labels(labels: &LabelMap, conf: &ConfidenceMaps, keep: f64) -> LabelMap {
    let mut out = labels.clone();
    if keep >= 1.0 {
        return out;
    }
    let mut by_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); conf.classes()];
    for (px, &l) in labels.data().iter().enumerate() {
        by_class[l as usize].push((conf.class_map(l as usize)[px], px));
    }
    for mut members in by_class {
        members.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let kept = (keep * members.len() as f64).ceil() as usize;
        for &(_, px) in &members[kept..] {
            out.data_mut()[px] = IGNORE_LABEL;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn student_sample(
    student: &SegNetParams,
    teacher: &SegNetParams,
    target: &Dataset,
    index: usize,
    sources: &[&Dataset],
    cfg: &StudentConfig,
    lambda: f64,
    rng: &mut RngState,
) -> Result<SampleStep> {
    // The teacher sees the whole image; its prediction is cropped with the
    // student's window.
    let full = cfg.augment.resized(target.image(index))?;
    let (_, ih, iw) = full.chw()?;
    let (top, left, h, w) = cfg.augment.crop_window(ih, iw, rng)?;
    let logits = crop_image(&predict(teacher, &full)?, top, left, h, w)?;
    let labels = argmax_labels(ClassScores::Channels(&logits))?;
    let conf = confidence_maps(&logits)?;
    let crop = crop_image(&full, top, left, h, w)?;
    let view = cfg.augment.photometric(&crop, rng)?;
    let mut grads = student.zeros_like();
    let mut sums = Sums::default();

    let ce = segmentation_loss(
        student,
        &view,
        confident_labels(&labels, &conf, cfg.pseudo_keep).data(),
        cfg.ce_weight,
        &mut grads,
    )?;
    sums.add(CE_PSEUDO, ce);
    let mut total = cfg.ce_weight * ce;

    let mut skipped = false;
    if cfg.contrastive_weight > 0.0 {
        match sample_patches(&view, &conf, &cfg.plgcl)? {
            Sampling::Selected(selection) => {
                let out = selection_loss(
                    student,
                    &selection,
                    &cfg.plgcl,
                    lambda,
                    cfg.contrastive_weight,
                    &mut grads,
                )?;
                if out.queries > 0 {
                    sums.add(PLGCL, out.loss);
                    total += cfg.contrastive_weight * out.loss;
                } else {
                    skipped = true;
                }
            }
            Sampling::Insufficient { .. } => skipped = true,
        }
    }

    if cfg.source_ce_weight > 0.0 {
        let src = sources[rng.int_range(0, sources.len() - 1)];
        let sample = cfg.augment.apply(&src.sample(rng.int_range(0, src.len() - 1)), rng)?;
        let seg = segmentation_loss(
            student,
            &sample.image,
            sample.labels.data(),
            cfg.source_ce_weight,
            &mut grads,
        )?;
        sums.add(SEG, seg);
        total += cfg.source_ce_weight * seg;
    }
    Ok(SampleStep {
        grads,
        total,
        sums,
        cm: None,
        plgcl_skipped: skipped,
    })
}

/// Adapts a clone of `teacher` to the unlabeled `target` images. Only
/// images are read from `target`; the returned read count covers its
/// labels over the whole call. `sources` is consulted only when
/// `source_ce_weight > 0`. Writes `metrics.jsonl`, `report.json`,
/// `student_eNNN.ckpt`, `student.ckpt` and `teacher_ema.ckpt` into `out`.
pub fn adapt_student(
    teacher: &SegNetParams,
    target: &Dataset,
    sources: &[&Dataset],
    val: Option<&Dataset>,
    cfg: &StudentConfig,
    out: Option<&Path>,
) -> Result<AdaptOutcome> {
    let mut problems = Vec::new();
    cfg.validate("student", &mut problems);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if target.is_empty() {
        return Err(Error::InvalidArgument("target dataset is empty".into()));
    }
    if target.class_count() != teacher.classes() {
        return Err(Error::InvalidArgument(format!(
            "target has {} classes, teacher predicts {}",
            target.class_count(),
            teacher.classes()
        )));
    }
    if cfg.contrastive_weight > 0.0 && cfg.plgcl.embed_dim != teacher.embed_dim() {
        return Err(Error::InvalidArgument(format!(
            "plgcl.embed_dim {} differs from the checkpoint's {}",
            cfg.plgcl.embed_dim,
            teacher.embed_dim()
        )));
    }
    if cfg.source_ce_weight > 0.0 {
        check_sources(sources)?;
    }
    let reads_before = target.label_reads();
    let run = RunDir::create(out)?;
    let mut student = teacher.clone();
    let mut teacher = teacher.clone();
    let mut state = AdamWState::new(&student, cfg.optim);
    let steps = cfg.steps_per_epoch.unwrap_or(target.len());
    let total_steps = (cfg.epochs * steps) as f64;

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut last = Sums::default();
    let mut val_report = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.optim.lr_at(epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..target.len()).collect();
        RngState::derived(cfg.seed, &[epoch as u64, u64::MAX]).shuffle(&mut order);
        let mut acc = StepAccumulator::new();
        let mut start = 0;
        while start < steps {
            let end = (start + cfg.batch_size).min(steps);
            let lambda = cfg.plgcl.lambda_at((epoch * steps + start) as f64 / total_steps);
            let (s_snap, t_snap) = (&student, &teacher);
            let order = &order;
            let batch = run_batch(start..end, |i| {
                let mut rng = RngState::derived(cfg.seed, &[epoch as u64, i as u64]);
                student_sample(
                    s_snap,
                    t_snap,
                    target,
                    order[i % order.len()],
                    sources,
                    cfg,
                    lambda,
                    &mut rng,
                )
            })?;
            acc.apply(&mut student, &mut state, lr, batch)?;
            if cfg.ema.enabled {
                ema_update(&mut teacher, &student, cfg.ema.decay)?;
            }
            start = end;
        }
        val_report = val_miou(&student, val)?;
        let m = EpochMetrics {
            phase: "student".into(),
            epoch,
            lr,
            seg_loss: acc.epoch_sums.mean(SEG),
            gmc_loss: None,
            plgcl_loss: acc.epoch_sums.mean(PLGCL),
            ce_pseudo_loss: acc.epoch_sums.mean(CE_PSEUDO),
            plgcl_skipped: (cfg.contrastive_weight > 0.0).then(|| acc.skipped as f64 / acc.samples.max(1) as f64),
            train_miou: None,
            val_miou: val_report.as_ref().map(|r| r.miou),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "student epoch {epoch}: ce {:.4} plgcl {:?} val mIoU {:?}",
            m.ce_pseudo_loss.unwrap_or(f64::NAN),
            m.plgcl_loss,
            m.val_miou
        );
        run.log(&m)?;
        run.checkpoint(&student, &format!("student_e{epoch:03}.ckpt"), epoch)?;
        metrics.push(m);
        step_losses.extend(acc.step_losses);
        last = acc.epoch_sums;
    }
    let target_label_reads = target.label_reads() - reads_before;
    run.checkpoint(&student, "student.ckpt", cfg.epochs)?;
    run.checkpoint(&teacher, "teacher_ema.ckpt", cfg.epochs)?;
    let report = RunReport {
        phase: "student".into(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        optimizer_steps: state.t,
        final_losses: last.losses(),
        val: val_report,
        target_label_reads: Some(target_label_reads),
    };
    run.report(&report)?;
    Ok(AdaptOutcome {
        student,
        teacher,
        metrics,
        step_losses,
        target_label_reads,
        report,
    })
}

/// Confusion matrix of `params` over every sample of a labeled dataset.
pub fn confusion(params: &SegNetParams, dataset: &Dataset) -> Result<ConfusionMatrix> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    if dataset.class_count() != params.classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model predicts {}",
            dataset.class_count(),
            params.classes()
        )));
    }
    let k = params.classes();
    let parts = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let pred = argmax_labels(ClassScores::Channels(&predict(params, dataset.image(i))?))?;
            let mut cm = ConfusionMatrix::new(k);
            cm.update(&pred, dataset.labels(i))?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConfusionMatrix::new(k);
    for cm in &parts {
        total.merge(cm)?;
    }
    Ok(total)
}

pub fn evaluate(params: &SegNetParams, dataset: &Dataset) -> Result<MiouReport> {
    confusion(params, dataset)?.report(&dataset.manifest.classes)
}
