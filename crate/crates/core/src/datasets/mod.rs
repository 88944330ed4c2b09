//! Labeled images, Netpbm file IO, JSON manifests and augmentations.

pub mod augment;
pub mod netpbm;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use augment::AugmentConfig;

/// Label value for pixels excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class ids, row-major `[H,W]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    /// Distinct class ids, ignore excluded.
    pub fn classes(&self) -> BTreeSet<u8> {
        self.data.iter().copied().filter(|&v| v != IGNORE_LABEL).collect()
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE_LABEL && v as usize >= classes) {
            Some(v) => Err(Error::InvalidArgument(format!(
                "label {v} out of range for {classes} classes"
            ))),
            None => Ok(()),
        }
    }
}

/// RGB image in `[0,1]` with its label map and domain tag.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor,
    pub labels: LabelMap,
    pub domain: String,
}

impl LabeledImage {
    pub fn new(image: Tensor, labels: LabelMap, domain: impl Into<String>) -> Result<Self> {
        let (c, h, w) = image.chw()?;
        if c != 3 || h != labels.height() || w != labels.width() {
            return Err(Error::Shape(format!(
                "image {:?} does not match labels {}x{}",
                image.shape(),
                labels.height(),
                labels.width()
            )));
        }
        Ok(Self {
            image,
            labels,
            domain: domain.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image: String,
    pub labels: String,
    pub domain: String,
}

/// `manifest.json`: sample file paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub samples: Vec<SampleEntry>,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// Accepts either the manifest file itself or its directory.
    pub fn resolve(path: &Path) -> PathBuf {
        if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = Self::resolve(path);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A manifest loaded into memory.
///
/// Label access goes through [`Dataset::labels`], which counts reads. Loops
/// that must stay label-free (target adaptation) are audited against that
/// counter.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: Vec<Tensor>,
    labels: Vec<LabelMap>,
    domains: Vec<String>,
    label_reads: AtomicUsize,
}

impl Dataset {
    pub fn from_samples(manifest: DatasetManifest, samples: Vec<LabeledImage>) -> Self {
        let mut images = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        let mut domains = Vec::with_capacity(samples.len());
        for s in samples {
            images.push(s.image);
            labels.push(s.labels);
            domains.push(s.domain);
        }
        Self {
            manifest,
            images,
            labels,
            domains,
            label_reads: AtomicUsize::new(0),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = DatasetManifest::resolve(path);
        let manifest = DatasetManifest::load(&manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let k = manifest.class_count();
        let samples = manifest
            .samples
            .iter()
            .map(|entry| {
                let image = netpbm::read_ppm(&root.join(&entry.image))?;
                let labels = netpbm::read_pgm(&root.join(&entry.labels))?;
                labels.validate(k)?;
                LabeledImage::new(image, labels, entry.domain.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_samples(manifest, samples))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_count()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn domain(&self, i: usize) -> &str {
        &self.domains[i]
    }

    /// Ground-truth labels of sample `i`; every call is counted.
    pub fn labels(&self, i: usize) -> &LabelMap {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        &self.labels[i]
    }

    /// Full labeled sample; counts as a label read.
    pub fn sample(&self, i: usize) -> LabeledImage {
        LabeledImage {
            image: self.images[i].clone(),
            labels: self.labels(i).clone(),
            domain: self.domains[i].clone(),
        }
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn reset_label_reads(&self) {
        self.label_reads.store(0, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> DatasetManifest {
        DatasetManifest {
            name: "demo".into(),
            classes: vec!["a".into(), "b".into()],
            samples: vec![SampleEntry {
                image: "000000.ppm".into(),
                labels: "000000.pgm".into(),
                domain: "demo".into(),
            }],
            seed: 9,
        }
    }

    #[test]
    fn manifest_load_save_load_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let m = manifest();
        m.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        loaded.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn dataset_load_counts_label_reads() {
        let dir = tempfile::tempdir().unwrap();
        let image = Tensor::full(&[3, 2, 2], 0.5);
        let labels = LabelMap::new(2, 2, vec![0, 1, 1, IGNORE_LABEL]).unwrap();
        netpbm::write_ppm(&dir.path().join("000000.ppm"), &image).unwrap();
        netpbm::write_pgm(&dir.path().join("000000.pgm"), &labels).unwrap();
        manifest().save(&dir.path().join(MANIFEST_FILE)).unwrap();

        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        let _ = ds.image(0);
        assert_eq!(ds.label_reads(), 0);
        assert_eq!(ds.labels(0), &labels);
        let _ = ds.sample(0);
        assert_eq!(ds.label_reads(), 2);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let labels = LabelMap::new(1, 3, vec![0, 7, IGNORE_LABEL]).unwrap();
        assert!(labels.validate(8).is_ok());
        assert!(labels.validate(7).is_err());
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn labeled_image_requires_matching_extent() {
        assert!(LabeledImage::new(Tensor::zeros(&[3, 2, 3]), LabelMap::filled(2, 3, 0), "x").is_ok());
        assert!(LabeledImage::new(Tensor::zeros(&[3, 3, 2]), LabelMap::filled(2, 3, 0), "x").is_err());
        assert!(LabeledImage::new(Tensor::zeros(&[1, 2, 3]), LabelMap::filled(2, 3, 0), "x").is_err());
    }
}
