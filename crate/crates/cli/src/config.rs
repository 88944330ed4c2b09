use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use synthgen::datasets::{Dataset, DatasetManifest};
use synthgen::engine::{StudentConfig, TeacherConfig};
use synthgen::numerics::derive_seed;
use synthgen::scenegen::{
    generate_dataset, generate_samples, ClassSchema, SceneStyle, DEFAULT_CLASS_NAMES, MAX_CLASSES,
};

/// One dataset of the experiment: either generated from a style or loaded
/// from an existing manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub style: String,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl DatasetSpec {
    fn new(style: &str, count: usize) -> Self {
        Self {
            style: style.into(),
            count,
            manifest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `[H, W]` of generated scenes.
    pub size: [usize; 2],
    pub sources: Vec<DatasetSpec>,
    /// Unlabeled adaptation images.
    pub target: DatasetSpec,
    /// Labeled target images used only for evaluation.
    pub heldout: DatasetSpec,
    /// Extra styles addressable by name next to the presets.
    pub styles: BTreeMap<String, SceneStyle>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: [36, 36],
            sources: vec![DatasetSpec::new("src_a", 200), DatasetSpec::new("src_b", 200)],
            target: DatasetSpec::new("tgt_unstructured", 100),
            heldout: DatasetSpec::new("tgt_unstructured", 50),
            styles: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every stochastic stream; phase and dataset seeds derive from it.
    pub seed: u64,
    pub classes: Vec<String>,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Which dataset of the config a stream belongs to.
#[derive(Clone, Copy, Debug)]
pub enum Role {
    Source(usize),
    Target,
    Heldout,
}

impl Role {
    fn coords(self) -> [u64; 2] {
        match self {
            Role::Source(i) => [1, i as u64],
            Role::Target => [2, 0],
            Role::Heldout => [3, 0],
        }
    }

    pub fn dir_name(self, spec: &DatasetSpec) -> String {
        match self {
            Role::Source(i) => format!("source{i}_{}", spec.style),
            Role::Target => format!("target_{}", spec.style),
            Role::Heldout => format!("heldout_{}", spec.style),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Propagates the root seed into the phase configs.
    pub fn resolve(mut self) -> Self {
        self.teacher.seed = derive_seed(self.seed, &[10]);
        self.student.seed = derive_seed(self.seed, &[11]);
        self
    }

    pub fn schema(&self) -> synthgen::Result<ClassSchema> {
        ClassSchema::new(self.classes.clone())
    }

    pub fn style(&self, name: &str) -> synthgen::Result<SceneStyle> {
        match self.data.styles.get(name) {
            Some(style) => Ok(style.clone()),
            None => SceneStyle::preset(name),
        }
    }

    /// Every problem found, each prefixed with its key.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(e) = self.schema() {
            p.push(format!("classes: {e}"));
        }
        if self.classes.len() > MAX_CLASSES {
            p.push(format!("classes: at most {MAX_CLASSES} names are supported"));
        }
        let [h, w] = self.data.size;
        if h < 32 || w < 32 || h % 2 != 0 || w % 2 != 0 {
            p.push(format!("data.size: {h}x{w} must be even and at least 32x32"));
        }
        if self.data.sources.is_empty() {
            p.push("data.sources: at least one source is required".into());
        }
        let specs = self
            .data
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("data.sources[{i}]"), s))
            .chain([
                ("data.target".to_string(), &self.data.target),
                ("data.heldout".to_string(), &self.data.heldout),
            ]);
        for (key, spec) in specs {
            if spec.count == 0 {
                p.push(format!("{key}.count: must be at least 1"));
            }
            if spec.manifest.is_none() {
                if let Err(e) = self.style(&spec.style) {
                    p.push(format!("{key}.style: {e}"));
                }
            }
        }
        for (name, style) in &self.data.styles {
            if let Err(e) = style.validate() {
                p.push(format!("data.styles.{name}: {e}"));
            }
        }
        self.teacher.validate("teacher", &mut p);
        self.student.validate("student", &mut p);
        for (key, crop) in [
            ("teacher.augment.crop", self.teacher.augment.crop),
            ("student.augment.crop", self.student.augment.crop),
        ] {
            if let Some([ch, cw]) = crop {
                if ch > h || cw > w {
                    p.push(format!("{key}: {ch}x{cw} exceeds data.size {h}x{w}"));
                }
            }
        }
        if self.student.contrastive_weight > 0.0 && self.student.plgcl.embed_dim != self.teacher.embed_dim {
            p.push(format!(
                "student.plgcl.embed_dim: {} differs from teacher.embed_dim {}",
                self.student.plgcl.embed_dim, self.teacher.embed_dim
            ));
        }
        p
    }

    fn spec(&self, role: Role) -> &DatasetSpec {
        match role {
            Role::Source(i) => &self.data.sources[i],
            Role::Target => &self.data.target,
            Role::Heldout => &self.data.heldout,
        }
    }

    pub fn dataset_seed(&self, role: Role) -> u64 {
        derive_seed(self.seed, &role.coords())
    }

    /// Loads the manifest of `role` when one is configured, otherwise
    /// generates the dataset in memory.
    pub fn dataset(&self, role: Role) -> anyhow::Result<Dataset> {
        let spec = self.spec(role);
        if let Some(path) = &spec.manifest {
            return Dataset::load(path).with_context(|| format!("cannot load dataset {}", path.display()));
        }
        let schema = self.schema()?;
        let style = self.style(&spec.style)?;
        let seed = self.dataset_seed(role);
        let [h, w] = self.data.size;
        let samples = generate_samples(&style, &schema, spec.count, (h, w), seed)?;
        let manifest = DatasetManifest {
            name: style.name.clone(),
            classes: schema.names.clone(),
            samples: Vec::new(),
            seed,
        };
        Ok(Dataset::from_samples(manifest, samples))
    }

    /// Writes the dataset of `role` under `root` unless a manifest is
    /// configured; returns the manifest path.
    pub fn materialize(&self, role: Role, root: &Path) -> anyhow::Result<PathBuf> {
        let spec = self.spec(role);
        if let Some(path) = &spec.manifest {
            return Ok(DatasetManifest::resolve(path));
        }
        let dir = root.join(role.dir_name(spec));
        let [h, w] = self.data.size;
        generate_dataset(
            &self.style(&spec.style)?,
            &self.schema()?,
            spec.count,
            (h, w),
            self.dataset_seed(role),
            &dir,
        )?;
        Ok(DatasetManifest::resolve(&dir))
    }

    pub fn sources(&self) -> anyhow::Result<Vec<Dataset>> {
        (0..self.data.sources.len())
            .map(|i| self.dataset(Role::Source(i)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(cfg.problems().is_empty(), "{:?}", cfg.problems());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"teacher": {"gmc": {"ratio": 1}}}"#).is_err());
    }

    #[test]
    fn every_problem_is_listed() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"data": {"size": [20, 20], "target": {"style": "mars", "count": 0}},
                "teacher": {"epochs": 0, "gmc": {"mask_ratio": 3.0}},
                "student": {"ce_weight": -1.0}}"#,
        )
        .unwrap();
        let problems = cfg.problems();
        for key in [
            "data.size",
            "data.target.count",
            "data.target.style",
            "teacher.epochs",
            "teacher.gmc.mask_ratio",
            "student.ce_weight",
        ] {
            assert!(
                problems.iter().any(|p| p.starts_with(key)),
                "{key} missing from {problems:?}"
            );
        }
    }

    #[test]
    fn resolve_derives_phase_seeds() {
        let a = RunConfig {
            seed: 1,
            ..RunConfig::default()
        }
        .resolve();
        let b = RunConfig {
            seed: 2,
            ..RunConfig::default()
        }
        .resolve();
        assert_ne!(a.teacher.seed, b.teacher.seed);
        assert_ne!(a.teacher.seed, a.student.seed);
        assert_eq!(a.clone().resolve(), a);
    }
}
