use c2fda::config::{EvalConfig, ProbeLoss};
use c2fda::detector::{Annotation, BBox, Detection, DetectorConfig, DetectorModel};
use c2fda::eval::*;
use c2fda::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn bbox(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
    BBox::new(x0, y0, x1, y1).unwrap()
}

fn gt(b: BBox, category: usize) -> Annotation {
    Annotation { bbox: b, category }
}

fn det(b: BBox, category: usize, score: f64) -> Detection {
    Detection { bbox: b, category, score }
}

fn iou_box(x: f64, y: f64, w: f64, h: f64) -> BBox {
    bbox(x, y, x + w, y + h)
}

#[test]
fn single_detection_cases() {
    let g = vec![vec![gt(bbox(0.0, 0.0, 10.0, 10.0), 0)]];
    // 7 x 10 inside the 10 x 10 ground truth: IoU 0.7
    let good = vec![vec![det(bbox(0.0, 0.0, 7.0, 10.0), 0, 0.9)]];
    assert_eq!(average_precision(&good, &g, 1, 0.5).unwrap().classes[0].ap, Some(1.0));
    let poor = vec![vec![det(bbox(0.0, 0.0, 4.0, 10.0), 0, 0.9)]];
    assert_eq!(average_precision(&poor, &g, 1, 0.5).unwrap().classes[0].ap, Some(0.0));
}

#[test]
fn ranking_of_a_false_positive_halves_ap() {
    let g = vec![vec![gt(bbox(0.0, 0.0, 10.0, 10.0), 0)]];
    let tp = bbox(0.0, 0.0, 10.0, 10.0);
    let fp = bbox(20.0, 20.0, 30.0, 30.0);
    let fp_first = vec![vec![det(fp, 0, 0.9), det(tp, 0, 0.8)]];
    let tp_first = vec![vec![det(tp, 0, 0.9), det(fp, 0, 0.8)]];
    let a = average_precision(&fp_first, &g, 1, 0.5).unwrap();
    let b = average_precision(&tp_first, &g, 1, 0.5).unwrap();
    assert_eq!(a.classes[0].ap, Some(0.5));
    assert_eq!(b.classes[0].ap, Some(1.0));
    let (da, ga) = case_to_flat(&fp_first, &g);
    assert_eq!(oracle_ap(&da, &ga, 0, 0.5), 0.5);
}

#[test]
fn duplicate_detections_are_false_positives_and_classes_do_not_mix() {
    let b = bbox(0.0, 0.0, 10.0, 10.0);
    let g = vec![vec![gt(b, 0)]];
    let d = vec![vec![det(b, 0, 0.9), det(b, 0, 0.8), det(b, 1, 0.95)]];
    let r = average_precision(&d, &g, 2, 0.5).unwrap();
    assert_eq!(r.classes[0].ap, Some(1.0));
    assert_eq!(r.classes[0].det_count, 2);
    assert_eq!(r.classes[1].ap, None);
    assert_eq!(r.classes[1].det_count, 1);
    // class 1 has no ground truth and is left out of the mean
    assert_eq!(r.map, 1.0);
}

#[test]
fn detections_match_only_in_their_own_image() {
    let b = bbox(0.0, 0.0, 10.0, 10.0);
    let g = vec![vec![gt(b, 0)], vec![]];
    let d = vec![vec![], vec![det(b, 0, 0.9)]];
    assert_eq!(average_precision(&d, &g, 1, 0.5).unwrap().classes[0].ap, Some(0.0));
    assert!(average_precision(&d, &g[..1], 1, 0.5).is_err());
}

#[test]
fn report_csv_layout() {
    let b = bbox(0.0, 0.0, 10.0, 10.0);
    let g = vec![vec![gt(b, 0)]];
    let d = vec![vec![det(b, 0, 0.9)]];
    let r = average_precision(&d, &g, 2, 0.5).unwrap();
    let base = average_precision(&[vec![]], &g, 2, 0.5).unwrap();
    let csv = r.with_baseline(&base).to_csv();
    assert_eq!(
        csv,
        "class,ap,gt_count,det_count\n0,1,1,1\n1,undefined,0,0\nmAP,1\ngain,1\n"
    );
}

type Flat = Vec<(usize, BBox, usize, f64)>;

fn case_to_flat(d: &[Vec<Detection>], g: &[Vec<Annotation>]) -> (Flat, Vec<Vec<(BBox, usize)>>) {
    let flat = d
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().map(move |x| (i, x.bbox, x.category, x.score)))
        .collect();
    let gts = g.iter().map(|v| v.iter().map(|a| (a.bbox, a.category)).collect()).collect();
    (flat, gts)
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    inter / (a.area() + b.area() - inter)
}

/// Precision/recall enumerated cutoff by cutoff, each cutoff re-matched
/// from scratch; AP sums the best precision at recall >= j / G.
fn oracle_ap(dets: &Flat, gts: &[Vec<(BBox, usize)>], class: usize, thresh: f64) -> f64 {
    let mut mine: Vec<&(usize, BBox, usize, f64)> = dets.iter().filter(|d| d.2 == class).collect();
    let mut order = Vec::new();
    while !mine.is_empty() {
        let mut best = 0;
        for i in 1..mine.len() {
            if mine[i].3 > mine[best].3 {
                best = i;
            }
        }
        order.push(mine.remove(best));
    }
    let total: usize = gts.iter().map(|g| g.iter().filter(|x| x.1 == class).count()).sum();
    let mut curve = Vec::new();
    for k in 1..=order.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        for d in &order[..k] {
            let mut pick: Option<(usize, f64)> = None;
            for (j, g) in gts[d.0].iter().enumerate() {
                if g.1 != class || used[d.0][j] {
                    continue;
                }
                let o = overlap(&d.1, &g.0);
                if pick.is_none_or(|(_, b)| o >= b) {
                    pick = Some((j, o));
                }
            }
            if let Some((j, o)) = pick {
                if o >= thresh {
                    used[d.0][j] = true;
                    tp += 1;
                }
            }
        }
        curve.push((tp, tp as f64 / k as f64));
    }
    let mut sum = 0.0;
    for j in 1..=total {
        let best = curve
            .iter()
            .filter(|(tp, _)| *tp >= j)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / total as f64
}

fn random_case(rng: &mut ChaCha8Rng, classes: usize) -> (Vec<Vec<Detection>>, Vec<Vec<Annotation>>) {
    let images = rng.random_range(1..=3);
    let mut gts = vec![Vec::new(); images];
    let mut dets = vec![Vec::new(); images];
    let grid_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0..6) as f64 * 2.0;
        let y = rng.random_range(0..6) as f64 * 2.0;
        let w = rng.random_range(2..7) as f64 * 2.0;
        let h = rng.random_range(2..7) as f64 * 2.0;
        iou_box(x, y, w, h)
    };
    for c in 0..classes {
        for _ in 0..rng.random_range(1..=5) {
            let i = rng.random_range(0..images);
            gts[i].push(gt(grid_box(rng), c));
        }
        for _ in 0..rng.random_range(0..=8) {
            let i = rng.random_range(0..images);
            let b = grid_box(rng);
            dets[i].push(det(b, c, rng.random::<f64>()));
        }
    }
    (dets, gts)
}

#[test]
fn matches_brute_force_enumeration_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (d, g) = random_case(&mut rng, 2);
        let report = average_precision(&d, &g, 2, 0.5).unwrap();
        let (flat, gts) = case_to_flat(&d, &g);
        let mut aps = Vec::new();
        for c in 0..2 {
            let want = oracle_ap(&flat, &gts, c, 0.5);
            assert_eq!(report.classes[c].ap, Some(want));
            aps.push(want);
        }
        assert_eq!(report.map, (aps[0] + aps[1]) / 2.0);
    }
}

proptest! {
    #[test]
    fn ap_depends_only_on_score_ranks(seed in 0u64..10_000, shift in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, g) = random_case(&mut rng, 2);
        let warped: Vec<Vec<Detection>> = d
            .iter()
            .map(|ds| ds.iter().map(|x| det(x.bbox, x.category, (3.0 * x.score).exp() + shift)).collect())
            .collect();
        prop_assert_eq!(average_precision(&d, &g, 2, 0.5).unwrap(), average_precision(&warped, &g, 2, 0.5).unwrap());
    }

    #[test]
    fn error_percentages_sum_to_one_hundred(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, g) = random_case(&mut rng, 3);
        let p = error_analysis(&d, &g, 3).unwrap();
        for c in p.classes.iter().flatten() {
            prop_assert!((c.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        }
        if p.classes.iter().any(Option::is_some) {
            prop_assert!((p.mean.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        }
    }
}

#[test]
fn error_bins_include_their_lower_boundary() {
    let g = vec![vec![gt(bbox(0.0, 0.0, 10.0, 10.0), 0)]];
    let at = |h: f64| vec![vec![det(bbox(0.0, 0.0, 10.0, h), 0, 0.9)]];
    assert_eq!(error_analysis(&at(5.0), &g, 1).unwrap().mean, [100.0, 0.0, 0.0]);
    assert_eq!(error_analysis(&at(3.0), &g, 1).unwrap().mean, [0.0, 100.0, 0.0]);
    assert_eq!(error_analysis(&at(2.9), &g, 1).unwrap().mean, [0.0, 0.0, 100.0]);
}

#[test]
fn disjoint_detections_are_all_background() {
    let g = vec![vec![gt(bbox(0.0, 0.0, 10.0, 10.0), 0), gt(bbox(0.0, 0.0, 5.0, 5.0), 1)]];
    let d = vec![vec![
        det(bbox(40.0, 40.0, 50.0, 50.0), 0, 0.9),
        det(bbox(30.0, 30.0, 35.0, 35.0), 1, 0.9),
        det(bbox(0.0, 0.0, 10.0, 10.0), 1, 0.1),
    ]];
    // class 1 has K = 1, so only its top detection (the disjoint one) counts
    let p = error_analysis(&d, &g, 2).unwrap();
    assert_eq!(p.mean, [0.0, 0.0, 100.0]);
}

fn oracle_bins(d: &[Vec<Detection>], g: &[Vec<Annotation>], classes: usize) -> Vec<Option<[f64; 3]>> {
    (0..classes)
        .map(|c| {
            let k = g.iter().flatten().filter(|a| a.category == c).count();
            let mut all: Vec<(usize, Detection)> = Vec::new();
            for (i, ds) in d.iter().enumerate() {
                for x in ds.iter().filter(|x| x.category == c) {
                    all.push((i, *x));
                }
            }
            let mut top = Vec::new();
            while top.len() < k && !all.is_empty() {
                let mut best = 0;
                for i in 1..all.len() {
                    if all[i].1.score > all[best].1.score {
                        best = i;
                    }
                }
                top.push(all.remove(best));
            }
            if top.is_empty() {
                return None;
            }
            let mut n = [0.0; 3];
            for (i, x) in &top {
                let mut m: f64 = 0.0;
                for a in g[*i].iter().filter(|a| a.category == c) {
                    m = m.max(overlap(&x.bbox, &a.bbox));
                }
                let slot = if m >= 0.5 { 0 } else if m >= 0.3 { 1 } else { 2 };
                n[slot] += 1.0;
            }
            Some(n.map(|v| 100.0 * v / top.len() as f64))
        })
        .collect()
}

#[test]
fn mixed_fixture_matches_brute_force_binning() {
    let g = vec![
        vec![gt(bbox(0.0, 0.0, 10.0, 10.0), 0), gt(bbox(20.0, 20.0, 30.0, 30.0), 1)],
        vec![gt(bbox(5.0, 5.0, 15.0, 15.0), 0), gt(bbox(40.0, 0.0, 50.0, 10.0), 1)],
    ];
    let d = vec![
        vec![
            det(bbox(0.0, 0.0, 10.0, 8.0), 0, 0.95),
            det(bbox(20.0, 20.0, 30.0, 24.0), 1, 0.7),
            det(bbox(60.0, 60.0, 62.0, 62.0), 0, 0.2),
        ],
        vec![
            det(bbox(5.0, 5.0, 15.0, 9.0), 0, 0.6),
            det(bbox(40.0, 0.0, 50.0, 10.0), 1, 0.9),
            det(bbox(0.0, 40.0, 5.0, 45.0), 1, 0.8),
        ],
    ];
    let p = error_analysis(&d, &g, 2).unwrap();
    let want = oracle_bins(&d, &g, 2);
    assert_eq!(p.classes, want);
    assert_eq!(p.classes[0], Some([50.0, 50.0, 0.0]));
    assert_eq!(p.classes[1], Some([50.0, 0.0, 50.0]));
    assert_eq!(p.mean, [50.0, 25.0, 25.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (d, g) = random_case(&mut rng, 3);
        assert_eq!(error_analysis(&d, &g, 3).unwrap().classes, oracle_bins(&d, &g, 3));
    }
}

#[test]
fn error_csv_layout() {
    let g = vec![vec![gt(bbox(0.0, 0.0, 10.0, 10.0), 0)]];
    let d = vec![vec![det(bbox(0.0, 0.0, 10.0, 10.0), 0, 0.9)]];
    let p = error_analysis(&d, &g, 2).unwrap();
    assert_eq!(
        p.to_csv(),
        "class,correct_pct,misloc_pct,background_pct\n0,100,0,0\nmean,100,0,0\n"
    );
}

fn cloud(seed: u64, n: usize, dim: usize, centre: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| (0..dim).map(|_| centre + normal.sample(&mut rng)).collect())
        .collect()
}

#[test]
fn separable_domains_are_two_apart() {
    for probe in [ProbeLoss::Logistic, ProbeLoss::Hinge] {
        let config = EvalConfig { probe, ..EvalConfig::default() };
        let d = proxy_a_distance(&cloud(1, 100, 4, -10.0), &cloud(2, 100, 4, 10.0), &config, 0).unwrap();
        assert_eq!(d.epsilon, 0.0);
        assert_eq!(d.d_a, 2.0);
    }
}

#[test]
fn identical_distributions_are_about_one_apart() {
    let config = EvalConfig::default();
    for seed in 0..10 {
        let d = proxy_a_distance(&cloud(2 * seed, 1000, 8, 0.0), &cloud(2 * seed + 1, 1000, 8, 0.0), &config, seed)
            .unwrap();
        assert!((d.d_a - 1.0).abs() <= 0.15, "seed {seed}: {d:?}");
    }
}

#[test]
fn proxy_distance_needs_twenty_vectors_each() {
    let config = EvalConfig::default();
    assert!(proxy_a_distance(&cloud(1, 19, 3, 0.0), &cloud(2, 50, 3, 0.0), &config, 0).is_err());
    assert!(proxy_a_distance(&cloud(1, 50, 3, 0.0), &cloud(2, 19, 3, 0.0), &config, 0).is_err());
    assert!(proxy_a_distance(&cloud(1, 20, 3, 0.0), &cloud(2, 20, 3, 0.0), &config, 0).is_ok());
    assert!(proxy_a_distance(&cloud(1, 20, 3, 0.0), &cloud(2, 20, 4, 0.0), &config, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn proxy_distance_is_bounded(seed in 0u64..1000, gap in 0.0f64..4.0, n in 20usize..60) {
        let d = proxy_a_distance(&cloud(seed, n, 3, 0.0), &cloud(seed + 7, n + 5, 3, gap), &EvalConfig::default(), seed).unwrap();
        prop_assert!((0.0..=0.5).contains(&d.epsilon));
        prop_assert!((0.0..=2.0).contains(&d.d_a));
        prop_assert_eq!(d.d_a, 2.0 * (1.0 - d.epsilon));
    }
}

fn read_pgm(path: &std::path::Path) -> Vec<u8> {
    let bytes = std::fs::read(path).unwrap();
    let header = b"P5\n64 64\n255\n";
    assert!(bytes.starts_with(header));
    bytes[header.len()..].to_vec()
}

#[test]
fn attention_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.pgm");
    let map = Tensor::new(&[1, 2], vec![0.0, 0.8808]).unwrap();
    write_attention_pgm(&map, 64, 64, &path).unwrap();
    let px = read_pgm(&path);
    assert_eq!(*px.iter().min().unwrap(), 0);
    assert_eq!(*px.iter().max().unwrap(), 225);

    write_attention_pgm(&Tensor::full(&[2, 2], 1.0), 64, 64, &path).unwrap();
    assert!(read_pgm(&path).iter().all(|&v| v == 255));

    let model = DetectorModel::new(DetectorConfig::default(), 3).unwrap();
    export_attention(&model, &Tensor::zeros(&[3, 64, 64]), &path).unwrap();
    assert!(read_pgm(&path).iter().all(|&v| v == 0));

    assert!(write_attention_pgm(&map, 64, 64, &dir.path().join("missing/a.pgm")).is_err());
}

#[test]
fn attention_image_matches_image_size_and_range() {
    let model = DetectorModel::new(DetectorConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = Tensor::new(&[3, 64, 64], (0..3 * 64 * 64).map(|_| rng.random()).collect()).unwrap();
    let a = attention_image(&model, &image).unwrap();
    assert_eq!(a.shape(), [64, 64]);
    assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(a.max() > 0.0);
}
