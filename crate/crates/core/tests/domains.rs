use c2fda::detector::BBox;
use c2fda::domains::{
    apply_shift, generate_domains, generate_scene, in_family, quantize, read_dataset,
    write_dataset, DataConfig, Sample, SceneConfig, Shape, ShiftConfig, UnlabeledDataset,
};
use c2fda::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene(seed: u64) -> Sample {
    generate_scene(&mut ChaCha8Rng::seed_from_u64(seed), &SceneConfig::default(), format!("s{seed}"))
        .unwrap()
}

fn pixel(image: &Tensor, x: usize, y: usize) -> [f64; 3] {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    std::array::from_fn(|c| image.data()[c * h * w + y * w + x])
}

#[test]
fn scenes_are_deterministic_and_bounded() {
    let config = SceneConfig::default();
    assert_eq!(scene(3), scene(3));
    assert_ne!(scene(3).image, scene(4).image);
    for seed in 0..100 {
        let s = scene(seed);
        assert!(s.annotations.len() <= config.max_objects);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for a in &s.annotations {
            assert!(a.bbox.within(64.0, 64.0));
            assert!(a.bbox.area() >= 16.0);
            assert!(a.category < 3);
        }
    }
}

#[test]
fn objects_fill_their_boxes_with_their_colour_family() {
    for seed in 0..100 {
        let s = scene(seed);
        for a in &s.annotations {
            let b = a.bbox;
            let mut family = 0usize;
            for y in b.y_min as usize..b.y_max as usize {
                for x in b.x_min as usize..b.x_max as usize {
                    if in_family(pixel(&s.image, x, y), a.category, 3, 30.0) {
                        family += 1;
                    }
                }
            }
            // relative to the area the shape itself can cover inside its box
            let ideal = b.area() * Shape::of_class(a.category).fill_ratio();
            assert!(
                family as f64 >= 0.6 * ideal,
                "seed {seed}: class {} has {family} family pixels of {ideal:.1}",
                a.category
            );
        }
    }
}

#[test]
fn classes_are_balanced() {
    let mut counts = [0usize; 3];
    for seed in 0..200 {
        for a in scene(1000 + seed).annotations {
            counts[a.category] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let uniform = total as f64 / 3.0;
    for c in counts {
        assert!((c as f64 - uniform).abs() <= 0.3 * uniform, "{counts:?}");
    }
}

fn constant_sample(rgb: [f64; 3]) -> Sample {
    let data = rgb.iter().flat_map(|&v| std::iter::repeat_n(v, 4)).collect();
    Sample {
        id: "c".into(),
        image: Tensor::new(&[3, 2, 2], data).unwrap(),
        annotations: vec![],
    }
}

#[test]
fn shift_examples() {
    let s = scene(9);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let same = apply_shift(&s, &ShiftConfig::identity(), &mut rng).unwrap();
    assert_eq!(same, s);

    let fog = ShiftConfig {
        fog_intensity: 1.0,
        fog_color: [0.1, 0.5, 0.9],
        noise_sigma: 0.0,
        hue_rotation: 35.0,
    };
    let out = apply_shift(&s, &fog, &mut rng).unwrap();
    for y in 0..64 {
        for x in 0..64 {
            assert_eq!(pixel(&out.image, x, y), [0.1, 0.5, 0.9]);
        }
    }

    let half = ShiftConfig {
        fog_intensity: 0.5,
        fog_color: [1.0; 3],
        noise_sigma: 0.0,
        hue_rotation: 0.0,
    };
    let out = apply_shift(&constant_sample([0.2, 0.4, 0.6]), &half, &mut rng).unwrap();
    let expect = [0.6, 0.7, 0.8];
    for (c, e) in expect.iter().enumerate() {
        assert!((pixel(&out.image, 1, 1)[c] - e).abs() < 1e-12);
    }

    // rotating grey leaves it grey
    let rot = ShiftConfig {
        hue_rotation: 77.0,
        ..ShiftConfig::identity()
    };
    let out = apply_shift(&constant_sample([0.3; 3]), &rot, &mut rng).unwrap();
    assert!(out.image.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
}

proptest! {
    #[test]
    fn shift_never_moves_boxes(
        seed in 0u64..1000,
        fog in 0.0f64..1.0,
        noise in 0.0f64..0.2,
        hue in -180.0f64..180.0,
    ) {
        let s = scene(seed);
        let shift = ShiftConfig { fog_intensity: fog, fog_color: [0.7, 0.7, 0.8], noise_sigma: noise, hue_rotation: hue };
        let out = apply_shift(&s, &shift, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&out.annotations, &s.annotations);
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn small_data() -> DataConfig {
    DataConfig {
        source_train: 6,
        source_test: 2,
        target_train: 5,
        target_test: 3,
    }
}

#[test]
fn dataset_round_trip() {
    let pair = generate_domains(&SceneConfig::default(), &ShiftConfig::default(), &small_data(), 5)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut shuffled = pair.target_train.clone();
    shuffled.reverse();
    write_dataset(&shuffled, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    let ids: Vec<&str> = back.iter().map(|s| s.id.as_str()).collect();
    let expected: Vec<&str> = shuffled.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, expected);
    for (a, b) in shuffled.iter().zip(&back) {
        assert_eq!(a.annotations, b.annotations);
        // generated images are already quantised, so they come back exactly
        assert_eq!(a.image, b.image);
    }

    // arbitrary images lose at most one quantisation step
    let raw = scene(21);
    let q = quantize(&raw.image);
    for (x, y) in raw.image.data().iter().zip(q.data()) {
        assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
    }
    let dir2 = tempfile::tempdir().unwrap();
    write_dataset(std::slice::from_ref(&raw), dir2.path()).unwrap();
    let back = read_dataset(dir2.path()).unwrap();
    for (x, y) in raw.image.data().iter().zip(back[0].image.data()) {
        assert!((x - y).abs() <= 1.0 / 255.0);
    }
}

#[test]
fn dataset_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.txt"), "a\n").unwrap();
    assert!(read_dataset(dir.path()).is_err());

    let pair = generate_domains(&SceneConfig::default(), &ShiftConfig::default(), &small_data(), 1)
        .unwrap();
    write_dataset(&pair.source_train[..1], dir.path()).unwrap();
    let id = &pair.source_train[0].id;
    std::fs::write(dir.path().join(format!("{id}.txt")), "0 1 2 3\n").unwrap();
    let err = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn generation_is_reproducible_and_splits_differ() {
    let a = generate_domains(&SceneConfig::default(), &ShiftConfig::default(), &small_data(), 8)
        .unwrap();
    let b = generate_domains(&SceneConfig::default(), &ShiftConfig::default(), &small_data(), 8)
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.source_train.len(), 6);
    assert_eq!(a.target_test.len(), 3);
    assert_ne!(a.source_train[0].image, a.target_train[0].image);
}

#[test]
fn unlabeled_view_counts_label_reads() {
    let pair = generate_domains(&SceneConfig::default(), &ShiftConfig::default(), &small_data(), 2)
        .unwrap();
    let view = UnlabeledDataset::new(pair.target_train);
    let _ = view.image(0);
    assert_eq!(view.label_reads(), 0);
    let _ = view.labels(1);
    assert_eq!(view.label_reads(), 1);
}

/// Per-channel mean and standard deviation of an image.
fn stats(image: &Tensor) -> Vec<f64> {
    let plane = image.numel() / 3;
    let mut f = Vec::new();
    for c in image.data().chunks(plane) {
        let m = c.iter().sum::<f64>() / plane as f64;
        let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / plane as f64;
        f.push(m);
        f.push(v.sqrt());
    }
    f
}

#[test]
fn default_shift_is_linearly_detectable() {
    let data = DataConfig {
        source_train: 150,
        source_test: 0,
        target_train: 150,
        target_test: 0,
    };
    let pair = generate_domains(&SceneConfig::default(), &ShiftConfig::default(), &data, 13).unwrap();
    let mut src: Vec<Vec<f64>> = pair.source_train.iter().map(|s| stats(&s.image)).collect();
    let mut tgt: Vec<Vec<f64>> = pair.target_train.iter().map(|s| stats(&s.image)).collect();
    // standardise with training statistics, then a nearest-centroid probe:
    // a linear rule fit on the first 100 of each domain
    for dim in 0..6 {
        let train: Vec<f64> = src[..100].iter().chain(&tgt[..100]).map(|x| x[dim]).collect();
        let m = train.iter().sum::<f64>() / 200.0;
        let sd = (train.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 200.0).sqrt();
        for x in src.iter_mut().chain(tgt.iter_mut()) {
            x[dim] = (x[dim] - m) / sd;
        }
    }
    let centroid = |xs: &[Vec<f64>]| -> Vec<f64> {
        (0..6).map(|d| xs.iter().map(|x| x[d]).sum::<f64>() / xs.len() as f64).collect()
    };
    let (cs, ct) = (centroid(&src[..100]), centroid(&tgt[..100]));
    let d = |x: &[f64], c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let correct = src[100..].iter().filter(|x| d(x, &cs) < d(x, &ct)).count()
        + tgt[100..].iter().filter(|x| d(x, &ct) < d(x, &cs)).count();
    let accuracy = correct as f64 / 100.0;
    assert!(accuracy > 0.9, "probe accuracy {accuracy}");
}

#[test]
fn boxes_survive_quantisation() {
    let s = scene(4);
    let b: Vec<BBox> = s.annotations.iter().map(|a| a.bbox).collect();
    for bb in b {
        assert_eq!(bb.x_min.fract(), 0.0);
        assert_eq!(bb.y_max.fract(), 0.0);
    }
}
