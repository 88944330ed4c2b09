use synthgen::datasets::{AugmentConfig, Dataset, DatasetManifest, IGNORE_LABEL};
use synthgen::engine::{adapt_student, evaluate, pseudo_labels, train_teacher, StudentConfig, TeacherConfig};
use synthgen::gmc::GmcConfig;
use synthgen::optim::{EmaConfig, OptimConfig, Schedule};
use synthgen::scenegen::{generate_samples, ClassSchema, SceneStyle};

fn dataset(style: &str, n: usize, side: usize, seed: u64) -> Dataset {
    let schema = ClassSchema::default();
    let samples = generate_samples(&SceneStyle::preset(style).unwrap(), &schema, n, (side, side), seed).unwrap();
    let manifest = DatasetManifest {
        name: style.into(),
        classes: schema.names.clone(),
        samples: Vec::new(),
        seed,
    };
    Dataset::from_samples(manifest, samples)
}

fn plain_teacher(epochs: usize, seed: u64) -> TeacherConfig {
    TeacherConfig {
        use_classmixpp: false,
        gmc: GmcConfig {
            weight: 0.0,
            ..GmcConfig::default()
        },
        epochs,
        batch_size: 1,
        augment: AugmentConfig::identity(),
        optim: OptimConfig {
            lr: 3e-3,
            schedule: Schedule::Constant,
            ..OptimConfig::default()
        },
        embed_dim: 8,
        seed,
        ..TeacherConfig::default()
    }
}

#[test]
fn pseudo_labels_match_ground_truth_on_fitted_sources() {
    let data = dataset("src_a", 6, 32, 40);
    let teacher = train_teacher(&[&data], None, &plain_teacher(60, 1), None)
        .unwrap()
        .params;
    let mut agree = 0usize;
    let mut counted = 0usize;
    for i in 0..data.len() {
        let (labels, _) = pseudo_labels(&teacher, data.image(i)).unwrap();
        for (&p, &g) in labels.data().iter().zip(data.labels(i).data()) {
            if g != IGNORE_LABEL {
                counted += 1;
                agree += usize::from(p == g);
            }
        }
    }
    let rate = agree as f64 / counted as f64;
    assert!(rate > 0.9, "pixel agreement {rate}");
}

#[test]
fn disabled_components_reduce_to_supervised_then_vanilla_self_training() {
    let source = dataset("src_b", 4, 32, 41);
    let target = dataset("tgt_structured", 3, 32, 42);
    let teacher = train_teacher(&[&source], None, &plain_teacher(2, 2), None).unwrap();
    assert!(teacher
        .metrics
        .iter()
        .all(|m| m.gmc_loss.is_none() || m.gmc_loss == Some(0.0)));
    let cfg = StudentConfig {
        contrastive_weight: 0.0,
        pseudo_keep: 1.0,
        ema: EmaConfig {
            enabled: false,
            decay: 0.999,
        },
        augment: AugmentConfig::identity(),
        epochs: 2,
        seed: 3,
        ..StudentConfig::default()
    };
    let out = adapt_student(&teacher.params, &target, &[], None, &cfg, None).unwrap();
    assert_eq!(out.teacher, teacher.params);
    assert_ne!(out.student, teacher.params);
    for m in &out.metrics {
        assert!(m.plgcl_loss.is_none());
        assert!(m.ce_pseudo_loss.unwrap().is_finite());
    }
    assert_eq!(target.label_reads(), 0);
}

#[test]
fn default_configuration_runs_on_desk_sized_scenes() {
    let a = dataset("src_a", 3, 36, 43);
    let b = dataset("src_b", 3, 36, 44);
    let target = dataset("tgt_unstructured", 2, 36, 45);
    let heldout = dataset("tgt_unstructured", 2, 36, 46);
    let tcfg = TeacherConfig {
        epochs: 1,
        ..TeacherConfig::default()
    };
    let teacher = train_teacher(&[&a, &b], Some(&heldout), &tcfg, None).unwrap();
    assert_eq!(teacher.report.optimizer_steps, 1);
    assert!(teacher.metrics[0].val_miou.is_some());
    let scfg = StudentConfig {
        epochs: 1,
        ..StudentConfig::default()
    };
    let out = adapt_student(&teacher.params, &target, &[&a, &b], Some(&heldout), &scfg, None).unwrap();
    assert_eq!(out.target_label_reads, 0);
    assert_eq!(out.report.target_label_reads, Some(0));
    let report = evaluate(&out.student, &heldout).unwrap();
    assert!((0.0..=1.0).contains(&report.miou));
}
