//! Label-guided binary-mask mixing of two labeled source images.

use std::collections::BTreeSet;

use crate::datasets::{LabelMap, LabeledImage, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

/// Either per-class scores `[K,H,W]` or an index map.
#[derive(Clone, Copy, Debug)]
pub enum ClassScores<'a> {
    Channels(&'a Tensor),
    Labels(&'a LabelMap),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixResult {
    pub image: Tensor,
    pub labels: LabelMap,
    /// 1 where the pixel comes from `A`, 0 where it comes from `B`.
    pub mask: LabelMap,
    pub selected_classes: BTreeSet<u8>,
}

/// Per-pixel argmax over the class channel; ties go to the lowest index.
pub fn argmax_labels(scores: ClassScores<'_>) -> Result<LabelMap> {
    let t = match scores {
        ClassScores::Labels(map) => return Ok(map.clone()),
        ClassScores::Channels(t) => t,
    };
    let (k, h, w) = t.chw()?;
    if k == 0 || k > IGNORE_LABEL as usize {
        return Err(Error::Shape(format!("argmax needs 1..=255 channels, got {k}")));
    }
    let plane = h * w;
    let data = t.data();
    let labels = (0..plane)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if data[c * plane + px] > data[best * plane + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}

/// Distinct non-ignore classes; an all-ignore map is an error.
pub fn class_set(labels: &LabelMap) -> Result<BTreeSet<u8>> {
    let set = labels.classes();
    if set.is_empty() {
        return Err(Error::InvalidArgument("label map has no labeled pixels".into()));
    }
    Ok(set)
}

/// Uniform random subset of size `max(1, floor(|C|/2))`.
pub fn select_half(classes: &BTreeSet<u8>, rng: &mut RngState) -> Result<BTreeSet<u8>> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("cannot select from an empty class set".into()));
    }
    let all: Vec<u8> = classes.iter().copied().collect();
    let m = (all.len() / 2).max(1);
    Ok(rng.choose_subset(&all, m)?.into_iter().collect())
}

pub fn build_mask(labels: &LabelMap, selected: &BTreeSet<u8>) -> LabelMap {
    let present = labels.classes();
    if !selected.is_subset(&present) {
        log::warn!("mask classes {selected:?} are not all present in {present:?}");
    }
    let data = labels
        .data()
        .iter()
        .map(|&v| u8::from(v != IGNORE_LABEL && selected.contains(&v)))
        .collect();
    LabelMap::new(labels.height(), labels.width(), data).expect("same extent")
}

/// Pastes the pixels of `a` whose class is in `mask` onto `b`.
pub fn mix_with_mask(a: &LabeledImage, b: &LabeledImage, mask: &LabelMap) -> Result<(Tensor, LabelMap)> {
    if a.image.shape() != b.image.shape() || mask.data().len() != a.labels.data().len() {
        return Err(Error::Shape(format!(
            "cannot mix {:?} with {:?}",
            a.image.shape(),
            b.image.shape()
        )));
    }
    let plane = mask.data().len();
    let mut image = b.image.clone();
    let mut labels = b.labels.clone();
    for (px, &m) in mask.data().iter().enumerate() {
        if m == 1 {
            for ch in 0..3 {
                image.data_mut()[ch * plane + px] = a.image.data()[ch * plane + px];
            }
            labels.data_mut()[px] = a.labels.data()[px];
        }
    }
    Ok((image, labels))
}

/// Samples half of the classes of `a` and pastes their pixels onto `b`.
pub fn classmix_pp(a: &LabeledImage, b: &LabeledImage, rng: &mut RngState) -> Result<MixResult> {
    if a.image.shape() != b.image.shape() {
        return Err(Error::Shape(format!(
            "cannot mix {:?} with {:?}",
            a.image.shape(),
            b.image.shape()
        )));
    }
    let s_a = argmax_labels(ClassScores::Labels(&a.labels))?;
    let classes = class_set(&s_a)?;
    let selected = select_half(&classes, rng)?;
    let mask = build_mask(&s_a, &selected);
    let (image, labels) = mix_with_mask(a, b, &mask)?;
    Ok(MixResult {
        image,
        labels,
        mask,
        selected_classes: selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labeled(h: usize, w: usize, rgb: [f64; 3], labels: Vec<u8>) -> LabeledImage {
        let mut data = Vec::new();
        for v in rgb {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        LabeledImage::new(
            Tensor::new(vec![3, h, w], data).unwrap(),
            LabelMap::new(h, w, labels).unwrap(),
            "t",
        )
        .unwrap()
    }

    fn random_labeled(rng: &mut RngState, h: usize, w: usize, k: usize) -> LabeledImage {
        let image = Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.uniform()).collect()).unwrap();
        let labels = (0..h * w)
            .map(|_| {
                if rng.bernoulli(0.1) {
                    IGNORE_LABEL
                } else {
                    rng.int_range(0, k - 1) as u8
                }
            })
            .collect();
        LabeledImage::new(image, LabelMap::new(h, w, labels).unwrap(), "r").unwrap()
    }

    #[test]
    fn argmax_cases() {
        let one_hot = Tensor::new(vec![3, 1, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(
            argmax_labels(ClassScores::Channels(&one_hot)).unwrap().data(),
            &[0, 1, 2]
        );
        let map = LabelMap::new(1, 2, vec![4, IGNORE_LABEL]).unwrap();
        assert_eq!(argmax_labels(ClassScores::Labels(&map)).unwrap(), map);
        let tie = Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap();
        assert_eq!(argmax_labels(ClassScores::Channels(&tie)).unwrap().data(), &[0]);
    }

    #[test]
    fn class_set_cases() {
        assert_eq!(class_set(&LabelMap::filled(3, 3, 3)).unwrap(), BTreeSet::from([3]));
        let checker = LabelMap::new(2, 2, vec![0, 7, 7, 0]).unwrap();
        assert_eq!(class_set(&checker).unwrap(), BTreeSet::from([0, 7]));
        let holes = LabelMap::new(1, 3, vec![IGNORE_LABEL, 1, 2]).unwrap();
        assert_eq!(class_set(&holes).unwrap(), BTreeSet::from([1, 2]));
        assert!(class_set(&LabelMap::filled(2, 2, IGNORE_LABEL)).is_err());
    }

    #[test]
    fn select_half_sizes() {
        let mut rng = RngState::new(0);
        assert_eq!(
            select_half(&BTreeSet::from([6]), &mut rng).unwrap(),
            BTreeSet::from([6])
        );
        let four = BTreeSet::from([0, 1, 2, 3]);
        for _ in 0..50 {
            let c = select_half(&four, &mut rng).unwrap();
            assert_eq!(c.len(), 2);
            assert!(c.is_subset(&four));
        }
        assert!(select_half(&BTreeSet::new(), &mut rng).is_err());
    }

    #[test]
    fn select_half_is_uniform_over_five_classes() {
        let five = BTreeSet::from([0, 1, 2, 3, 4]);
        let mut rng = RngState::new(17);
        let mut hits = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            for c in select_half(&five, &mut rng).unwrap() {
                hits[c as usize] += 1;
            }
        }
        for h in hits {
            let freq = h as f64 / draws as f64;
            assert!((freq - 0.4).abs() < 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn mask_cases() {
        let map = LabelMap::new(2, 2, vec![1, 2, 2, 1]).unwrap();
        assert_eq!(build_mask(&map, &BTreeSet::from([1])).data(), &[1, 0, 0, 1]);
        assert_eq!(build_mask(&map, &BTreeSet::new()).data(), &[0; 4]);
        let holes = LabelMap::new(1, 3, vec![1, IGNORE_LABEL, 2]).unwrap();
        assert_eq!(build_mask(&holes, &class_set(&holes).unwrap()).data(), &[1, 0, 1]);
    }

    #[test]
    fn single_class_source_is_copied_whole() {
        let a = labeled(2, 2, [1.0, 0.0, 0.0], vec![1; 4]);
        let b = labeled(2, 2, [0.0, 0.0, 1.0], vec![2; 4]);
        let mix = classmix_pp(&a, &b, &mut RngState::new(3)).unwrap();
        assert_eq!(mix.selected_classes, BTreeSet::from([1]));
        assert_eq!(mix.image, a.image);
        assert_eq!(mix.labels, a.labels);
    }

    #[test]
    fn mixing_an_image_with_itself_is_identity() {
        let mut rng = RngState::new(8);
        let a = random_labeled(&mut rng, 6, 5, 4);
        let mix = classmix_pp(&a, &a, &mut rng).unwrap();
        assert_eq!(mix.image, a.image);
        assert_eq!(mix.labels, a.labels);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = labeled(2, 2, [0.0; 3], vec![0; 4]);
        let b = labeled(2, 3, [0.0; 3], vec![0; 6]);
        assert!(classmix_pp(&a, &b, &mut RngState::new(0)).is_err());
    }

    /// Direct per-pixel transcription: classes of A, half of them, then a
    /// pixelwise choice between A and B.
    fn brute_force(a: &LabeledImage, b: &LabeledImage, rng: &mut RngState) -> (Vec<f64>, Vec<u8>) {
        let (h, w) = (a.height(), a.width());
        let mut classes = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = a.labels.get(y, x);
                if v != IGNORE_LABEL && !classes.contains(&v) {
                    classes.push(v);
                }
            }
        }
        classes.sort();
        let take = std::cmp::max(1, classes.len() / 2);
        let chosen = rng.choose_subset(&classes, take).unwrap();
        let mut image = vec![0.0; 3 * h * w];
        let mut labels = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                let from_a = chosen.contains(&a.labels.get(y, x));
                let src = if from_a { a } else { b };
                for ch in 0..3 {
                    let i = (ch * h + y) * w + x;
                    image[i] = src.image.data()[i];
                }
                labels[y * w + x] = src.labels.get(y, x);
            }
        }
        (image, labels)
    }

    #[test]
    fn matches_brute_force_on_random_pairs() {
        for seed in 0..50 {
            let mut rng = RngState::new(seed);
            let a = random_labeled(&mut rng, 4, 4, 5);
            let b = random_labeled(&mut rng, 4, 4, 5);
            let mix = classmix_pp(&a, &b, &mut RngState::new(seed + 100)).unwrap();
            let (image, labels) = brute_force(&a, &b, &mut RngState::new(seed + 100));
            assert_eq!(mix.image.data(), &image[..]);
            assert_eq!(mix.labels.data(), &labels[..]);
        }
    }

    proptest! {
        #[test]
        fn every_pixel_comes_from_exactly_one_input(seed in 0u64..10_000) {
            let mut rng = RngState::new(seed);
            let a = random_labeled(&mut rng, 5, 7, 6);
            let b = random_labeled(&mut rng, 5, 7, 6);
            let mix = classmix_pp(&a, &b, &mut rng).unwrap();
            let plane = 35;
            for px in 0..plane {
                let src = if mix.mask.data()[px] == 1 { &a } else { &b };
                prop_assert_eq!(mix.labels.data()[px], src.labels.data()[px]);
                for ch in 0..3 {
                    prop_assert_eq!(mix.image.data()[ch * plane + px], src.image.data()[ch * plane + px]);
                }
                let in_c = mix.selected_classes.contains(&a.labels.data()[px]);
                prop_assert_eq!(mix.mask.data()[px] == 1, in_c);
            }
            let union: BTreeSet<u8> = a.labels.classes().union(&b.labels.classes()).copied().collect();
            prop_assert!(mix.labels.classes().is_subset(&union));
        }
    }
}
