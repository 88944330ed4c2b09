//! Procedural street-scene generator.
//!
//! A scene is painted back to front from axis-aligned rectangles and
//! triangles: sky above a sampled horizon, a sidewalk ground plane, building
//! blocks standing on the horizon, vegetation, a road trapezoid running to
//! the vanishing point, then vehicles, persons and poles. Every paint call
//! writes the colour and the class id of the same pixel set, so the label
//! map traces the painted geometry exactly. Per-object colour jitter,
//! per-pixel noise and a global tint come from the [`SceneStyle`].

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{netpbm, DatasetManifest, LabelMap, LabeledImage, SampleEntry, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, RngState, Tensor};

pub const ROAD: u8 = 0;
pub const SIDEWALK: u8 = 1;
pub const BUILDING: u8 = 2;
pub const SKY: u8 = 3;
pub const VEGETATION: u8 = 4;
pub const VEHICLE: u8 = 5;
pub const PERSON: u8 = 6;
pub const POLE: u8 = 7;

/// Number of classes the generator paints.
pub const PAINTED_CLASSES: usize = 8;
pub const MAX_CLASSES: usize = 13;

pub const DEFAULT_CLASS_NAMES: [&str; PAINTED_CLASSES] = [
    "road",
    "sidewalk",
    "building",
    "sky",
    "vegetation",
    "vehicle",
    "person",
    "pole",
];

/// Ordered class names. The first eight ids carry the painted roles above;
/// names beyond those (up to 13) are accepted but never painted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSchema {
    pub names: Vec<String>,
}

impl Default for ClassSchema {
    fn default() -> Self {
        Self {
            names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ClassSchema {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < PAINTED_CLASSES || names.len() > MAX_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "class schema needs between {PAINTED_CLASSES} and {MAX_CLASSES} names, got {}",
                names.len()
            )));
        }
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::InvalidArgument("class names must be unique".into()));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassColor {
    pub mean: [f64; 3],
    /// Std-dev of the per-object colour offset.
    pub jitter: f64,
}

const fn color(r: f64, g: f64, b: f64, jitter: f64) -> ClassColor {
    ClassColor {
        mean: [r, g, b],
        jitter,
    }
}

/// Inclusive object-count range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

const fn count(min: usize, max: usize) -> CountRange {
    CountRange { min, max }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub buildings: CountRange,
    pub vegetation: CountRange,
    pub vehicles: CountRange,
    pub persons: CountRange,
    pub poles: CountRange,
}

impl ObjectCounts {
    pub const NONE: ObjectCounts = ObjectCounts {
        buildings: count(0, 0),
        vegetation: count(0, 0),
        vehicles: count(0, 0),
        persons: count(0, 0),
        poles: count(0, 0),
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneStyle {
    pub name: String,
    /// One entry per painted class, indexed by class id.
    pub palette: Vec<ClassColor>,
    /// Horizon row as a fraction of the image height.
    pub horizon: [f64; 2],
    /// Road width at the bottom edge as a fraction of the image width.
    pub road_width: [f64; 2],
    pub objects: ObjectCounts,
    /// Probability that each distractor slot receives a randomly placed object.
    pub clutter: f64,
    pub clutter_slots: usize,
    pub noise_sigma: f64,
    /// Per-channel multiplicative tint applied to the finished image.
    pub tint: [f64; 3],
}

pub const PRESET_NAMES: [&str; 4] = ["src_a", "src_b", "tgt_structured", "tgt_unstructured"];

impl SceneStyle {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "src_a" => Ok(Self::src_a()),
            "src_b" => Ok(Self::src_b()),
            "tgt_structured" => Ok(Self::tgt_structured()),
            "tgt_unstructured" => Ok(Self::tgt_unstructured()),
            other => Err(Error::InvalidArgument(format!(
                "unknown style preset {other:?}; valid presets: {}",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    /// Bright, saturated palette with orderly layouts.
    pub fn src_a() -> Self {
        Self {
            name: "src_a".into(),
            palette: vec![
                color(0.42, 0.42, 0.46, 0.04),
                color(0.78, 0.66, 0.58, 0.05),
                color(0.70, 0.36, 0.28, 0.08),
                color(0.40, 0.66, 0.96, 0.04),
                color(0.22, 0.70, 0.18, 0.06),
                color(0.90, 0.12, 0.14, 0.08),
                color(0.98, 0.82, 0.16, 0.06),
                color(0.88, 0.88, 0.90, 0.04),
            ],
            horizon: [0.35, 0.50],
            road_width: [0.6, 0.9],
            objects: ObjectCounts {
                buildings: count(2, 4),
                vegetation: count(1, 3),
                vehicles: count(1, 2),
                persons: count(1, 2),
                poles: count(1, 2),
            },
            clutter: 0.1,
            clutter_slots: 6,
            noise_sigma: 0.02,
            tint: [1.0, 1.0, 1.0],
        }
    }

    /// Muted palette, orderly layouts, few persons and poles.
    pub fn src_b() -> Self {
        Self {
            name: "src_b".into(),
            palette: vec![
                color(0.30, 0.28, 0.24, 0.04),
                color(0.52, 0.54, 0.48, 0.05),
                color(0.46, 0.40, 0.52, 0.08),
                color(0.74, 0.76, 0.78, 0.04),
                color(0.38, 0.46, 0.26, 0.06),
                color(0.36, 0.26, 0.62, 0.08),
                color(0.62, 0.40, 0.30, 0.06),
                color(0.54, 0.50, 0.40, 0.04),
            ],
            horizon: [0.30, 0.45],
            road_width: [0.5, 0.8],
            objects: ObjectCounts {
                buildings: count(2, 5),
                vegetation: count(1, 2),
                vehicles: count(1, 3),
                persons: count(0, 1),
                poles: count(0, 1),
            },
            clutter: 0.05,
            clutter_slots: 6,
            noise_sigma: 0.03,
            tint: [0.95, 0.97, 1.05],
        }
    }

    fn target_palette() -> Vec<ClassColor> {
        vec![
            color(0.38, 0.36, 0.33, 0.05),
            color(0.64, 0.58, 0.50, 0.06),
            color(0.60, 0.40, 0.42, 0.09),
            color(0.58, 0.70, 0.86, 0.05),
            color(0.30, 0.56, 0.24, 0.07),
            color(0.64, 0.20, 0.40, 0.10),
            color(0.80, 0.62, 0.22, 0.08),
            color(0.70, 0.68, 0.62, 0.05),
        ]
    }

    /// Shifted palette with orderly layouts.
    pub fn tgt_structured() -> Self {
        Self {
            name: "tgt_structured".into(),
            palette: Self::target_palette(),
            horizon: [0.35, 0.50],
            road_width: [0.6, 0.9],
            objects: ObjectCounts {
                buildings: count(2, 4),
                vegetation: count(1, 3),
                vehicles: count(1, 2),
                persons: count(1, 2),
                poles: count(1, 2),
            },
            clutter: 0.1,
            clutter_slots: 6,
            noise_sigma: 0.04,
            tint: [1.04, 0.98, 0.92],
        }
    }

    /// Shifted palette, heavy clutter and dense traffic.
    pub fn tgt_unstructured() -> Self {
        Self {
            name: "tgt_unstructured".into(),
            palette: Self::target_palette(),
            horizon: [0.30, 0.55],
            road_width: [0.5, 1.0],
            objects: ObjectCounts {
                buildings: count(2, 6),
                vegetation: count(1, 4),
                vehicles: count(2, 5),
                persons: count(2, 5),
                poles: count(1, 3),
            },
            clutter: 0.8,
            clutter_slots: 8,
            noise_sigma: 0.05,
            tint: [1.04, 0.98, 0.92],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.palette.len() != PAINTED_CLASSES {
            problems.push(format!(
                "palette needs {PAINTED_CLASSES} entries, got {}",
                self.palette.len()
            ));
        }
        for (name, [lo, hi]) in [("horizon", self.horizon), ("road_width", self.road_width)] {
            if !(0.0 < lo && lo <= hi && hi < 1.0 + f64::EPSILON) {
                problems.push(format!("{name}: range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"));
            }
        }
        if self.horizon[1] >= 0.9 {
            problems.push("horizon: upper bound must leave ground rows (< 0.9)".into());
        }
        let o = &self.objects;
        for (name, r) in [
            ("buildings", o.buildings),
            ("vegetation", o.vegetation),
            ("vehicles", o.vehicles),
            ("persons", o.persons),
            ("poles", o.poles),
        ] {
            if r.min > r.max {
                problems.push(format!("objects.{name}: min > max"));
            }
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            problems.push("clutter must lie in [0,1]".into());
        }
        if !(self.noise_sigma >= 0.0) {
            problems.push("noise_sigma must be non-negative".into());
        }
        if self.tint.iter().any(|t| !(*t > 0.0)) {
            problems.push("tint entries must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f64; 3]>,
    labels: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, class: u8, rgb: [f64; 3]) {
        let i = y * self.w + x;
        self.rgb[i] = rgb;
        self.labels[i] = class;
    }

    /// Half-open rectangle, clipped to the canvas.
    fn rect(&mut self, y0: isize, y1: isize, x0: isize, x1: isize, class: u8, rgb: [f64; 3]) {
        let clip = |v: isize, n: usize| v.clamp(0, n as isize) as usize;
        for y in clip(y0, self.h)..clip(y1, self.h) {
            for x in clip(x0, self.w)..clip(x1, self.w) {
                self.paint(y, x, class, rgb);
            }
        }
    }

    /// Triangle through three vertices; a pixel belongs to it when its centre
    /// lies inside or on an edge.
    fn triangle(&mut self, v: [(f64, f64); 3], class: u8, rgb: [f64; 3]) {
        let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let area = edge(v[0], v[1], v[2]);
        if area == 0.0 {
            return;
        }
        let ys = v.iter().map(|p| p.0);
        let xs = v.iter().map(|p| p.1);
        let y_lo = ys.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let y_hi = (ys.fold(f64::NEG_INFINITY, f64::max).ceil() as isize).clamp(0, self.h as isize) as usize;
        let x_lo = xs.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let x_hi = (xs.fold(f64::NEG_INFINITY, f64::max).ceil() as isize).clamp(0, self.w as isize) as usize;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let p = (y as f64 + 0.5, x as f64 + 0.5);
                let e0 = edge(v[0], v[1], p) * area.signum();
                let e1 = edge(v[1], v[2], p) * area.signum();
                let e2 = edge(v[2], v[0], p) * area.signum();
                if e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0 {
                    self.paint(y, x, class, rgb);
                }
            }
        }
    }
}

fn object_color(style: &SceneStyle, class: u8, rng: &mut RngState) -> [f64; 3] {
    let c = style.palette[class as usize];
    let mut out = c.mean;
    for v in out.iter_mut() {
        *v = (*v + c.jitter * rng.normal()).clamp(0.0, 1.0);
    }
    out
}

fn sample_count(r: CountRange, rng: &mut RngState) -> usize {
    rng.int_range(r.min, r.max)
}

/// Paints one labeled scene. Deterministic for a fixed style and RNG state.
pub fn generate_scene(
    style: &SceneStyle,
    schema: &ClassSchema,
    h: usize,
    w: usize,
    rng: &mut RngState,
) -> Result<LabeledImage> {
    if h < 32 || w < 32 {
        return Err(Error::Shape(format!("scenes need at least 32x32 pixels, got {h}x{w}")));
    }
    if schema.len() < PAINTED_CLASSES {
        return Err(Error::InvalidArgument(
            "class schema too small for the generator".into(),
        ));
    }
    style.validate()?;
    let (hf, wf) = (h as f64, w as f64);
    let mut canvas = Canvas {
        h,
        w,
        rgb: vec![[0.0; 3]; h * w],
        labels: vec![SKY; h * w],
    };

    let horizon = ((rng.uniform_range(style.horizon[0], style.horizon[1]) * hf).round() as usize).clamp(1, h - 2);
    let hz = horizon as isize;
    let sky = object_color(style, SKY, rng);
    canvas.rect(0, hz, 0, w as isize, SKY, sky);
    let ground = object_color(style, SIDEWALK, rng);
    canvas.rect(hz, h as isize, 0, w as isize, SIDEWALK, ground);

    for _ in 0..sample_count(style.objects.buildings, rng) {
        let bw = rng.uniform_range(0.12, 0.3) * wf;
        let bh = rng.uniform_range(0.1, 0.9) * horizon as f64;
        let x0 = rng.uniform_range(-0.1, 0.95) * wf;
        let foot = horizon as f64 + rng.uniform_range(0.0, 0.04) * hf;
        let rgb = object_color(style, BUILDING, rng);
        canvas.rect(
            (foot - bh) as isize,
            foot as isize,
            x0 as isize,
            (x0 + bw) as isize,
            BUILDING,
            rgb,
        );
    }

    for _ in 0..sample_count(style.objects.vegetation, rng) {
        let rgb = object_color(style, VEGETATION, rng);
        let cx = rng.uniform_range(0.0, 1.0) * wf;
        let half = rng.uniform_range(0.04, 0.1) * wf;
        let foot = horizon as f64 + rng.uniform_range(0.0, 0.15) * hf;
        let top = foot - rng.uniform_range(0.1, 0.3) * hf;
        if rng.bernoulli(0.5) {
            canvas.triangle([(top, cx), (foot, cx - half), (foot, cx + half)], VEGETATION, rgb);
        } else {
            canvas.rect(
                top as isize,
                foot as isize,
                (cx - half) as isize,
                (cx + half) as isize,
                VEGETATION,
                rgb,
            );
        }
    }

    // Road: trapezoid from a narrow top at the horizon to the bottom edge,
    // painted as two triangles.
    let road_rgb = object_color(style, ROAD, rng);
    let vanish = (0.5 + rng.uniform_range(-0.15, 0.15)) * wf;
    let top_half = (0.02 * wf).max(1.0);
    let bottom_center = (0.5 + rng.uniform_range(-0.1, 0.1)) * wf;
    let bottom_half = 0.5 * rng.uniform_range(style.road_width[0], style.road_width[1]) * wf;
    let (yt, yb) = (horizon as f64, hf);
    let tl = (yt, vanish - top_half);
    let tr = (yt, vanish + top_half);
    let bl = (yb, bottom_center - bottom_half);
    let br = (yb, bottom_center + bottom_half);
    canvas.triangle([tl, bl, br], ROAD, road_rgb);
    canvas.triangle([tl, br, tr], ROAD, road_rgb);
    let road_x = |y: f64| {
        let t = ((y - yt) / (yb - yt)).clamp(0.0, 1.0);
        let left = tl.1 + t * (bl.1 - tl.1);
        let right = tr.1 + t * (br.1 - tr.1);
        (left, right)
    };

    let ground_rows = hf - horizon as f64;
    let place_vehicle = |canvas: &mut Canvas, rng: &mut RngState, anywhere: bool| {
        let depth = rng.uniform_range(0.25, 1.0);
        let foot = horizon as f64 + depth * ground_rows;
        let vw = (0.08 + 0.22 * depth) * wf;
        let vh = vw * rng.uniform_range(0.45, 0.7);
        let cx = if anywhere {
            rng.uniform_range(0.0, 1.0) * wf
        } else {
            let (l, r) = road_x(foot);
            rng.uniform_range(l, r.max(l + 1.0))
        };
        let rgb = object_color(style, VEHICLE, rng);
        let (x0, x1) = (cx - vw / 2.0, cx + vw / 2.0);
        canvas.rect(
            (foot - vh) as isize,
            foot as isize,
            x0 as isize,
            x1 as isize,
            VEHICLE,
            rgb,
        );
        // cabin
        let cabin = (foot - vh, x0 + 0.2 * vw);
        canvas.triangle([cabin, (foot - 1.5 * vh, cx), (foot - vh, x1 - 0.2 * vw)], VEHICLE, rgb);
    };
    let place_person = |canvas: &mut Canvas, rng: &mut RngState, anywhere: bool| {
        let depth = rng.uniform_range(0.2, 1.0);
        let foot = horizon as f64 + depth * ground_rows;
        let ph = (0.1 + 0.2 * depth) * hf;
        let pw = (ph * 0.3).max(1.0);
        let cx = if anywhere || rng.bernoulli(0.5) {
            let (l, _) = road_x(foot);
            rng.uniform_range(0.0, l.max(1.0))
        } else {
            let (_, r) = road_x(foot);
            rng.uniform_range(r.min(wf - 1.0), wf)
        };
        let cx = if anywhere { rng.uniform_range(0.0, wf) } else { cx };
        let rgb = object_color(style, PERSON, rng);
        canvas.rect(
            (foot - ph) as isize,
            foot as isize,
            (cx - pw / 2.0) as isize,
            (cx + pw / 2.0).ceil() as isize,
            PERSON,
            rgb,
        );
    };
    let place_pole = |canvas: &mut Canvas, rng: &mut RngState, anywhere: bool| {
        let depth = rng.uniform_range(0.1, 1.0);
        let foot = horizon as f64 + depth * ground_rows;
        let ph = (0.3 + 0.4 * depth) * hf;
        let x = if anywhere || rng.bernoulli(0.5) {
            rng.uniform_range(0.0, road_x(foot).0.max(1.0))
        } else {
            rng.uniform_range(road_x(foot).1.min(wf - 1.0), wf)
        };
        let x = if anywhere { rng.uniform_range(0.0, wf) } else { x };
        let width = (0.02 * wf).max(1.0).round() as isize;
        let rgb = object_color(style, POLE, rng);
        canvas.rect(
            (foot - ph) as isize,
            foot as isize,
            x as isize,
            x as isize + width,
            POLE,
            rgb,
        );
    };

    for _ in 0..sample_count(style.objects.vehicles, rng) {
        place_vehicle(&mut canvas, rng, false);
    }
    for _ in 0..sample_count(style.objects.persons, rng) {
        place_person(&mut canvas, rng, false);
    }
    for _ in 0..sample_count(style.objects.poles, rng) {
        place_pole(&mut canvas, rng, false);
    }
    for _ in 0..style.clutter_slots {
        if !rng.bernoulli(style.clutter) {
            continue;
        }
        match rng.int_range(0, 3) {
            0 => place_vehicle(&mut canvas, rng, true),
            1 => place_person(&mut canvas, rng, true),
            2 => place_pole(&mut canvas, rng, true),
            _ => {
                let rgb = object_color(style, VEGETATION, rng);
                let cy = rng.uniform_range(horizon as f64, hf);
                let cx = rng.uniform_range(0.0, wf);
                let s = rng.uniform_range(0.04, 0.12) * wf;
                canvas.triangle([(cy - s, cx), (cy + s, cx - s), (cy + s, cx + s)], VEGETATION, rgb);
            }
        }
    }

    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (px, rgb) in canvas.rgb.iter().enumerate() {
        for ch in 0..3 {
            let noisy = rgb[ch] + style.noise_sigma * rng.normal();
            data[ch * plane + px] = (noisy * style.tint[ch]).clamp(0.0, 1.0);
        }
    }
    LabeledImage::new(
        Tensor::new(vec![3, h, w], data)?,
        LabelMap::new(h, w, canvas.labels)?,
        style.name.clone(),
    )
}

/// Writes `n` scenes as `NNNNNN.ppm`/`NNNNNN.pgm` plus `manifest.json`.
/// Sample `i` draws from the stream `(seed, i)`.
pub fn generate_dataset(
    style: &SceneStyle,
    schema: &ClassSchema,
    n: usize,
    size: (usize, usize),
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngState::new(derive_seed(seed, &[i as u64]));
            let scene = generate_scene(style, schema, size.0, size.1, &mut rng)?;
            let entry = SampleEntry {
                image: format!("{i:06}.ppm"),
                labels: format!("{i:06}.pgm"),
                domain: style.name.clone(),
            };
            netpbm::write_ppm(&out_dir.join(&entry.image), &scene.image)?;
            netpbm::write_pgm(&out_dir.join(&entry.labels), &scene.labels)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        name: style.name.clone(),
        classes: schema.names.clone(),
        samples,
        seed,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// In-memory variant of [`generate_dataset`] with identical per-sample streams.
pub fn generate_samples(
    style: &SceneStyle,
    schema: &ClassSchema,
    n: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngState::new(derive_seed(seed, &[i as u64]));
            generate_scene(style, schema, size.0, size.1, &mut rng)
        })
        .collect()
}

/// Normalized per-class pixel frequencies over a set of label maps.
pub fn class_histogram(labels: &[&LabelMap], classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; classes];
    let mut total = 0.0f64;
    for map in labels {
        for &v in map.data() {
            if (v as usize) < classes {
                counts[v as usize] += 1.0;
                total += 1.0;
            }
        }
    }
    counts.iter().map(|c| c / total.max(1.0)).collect()
}
