use std::collections::BTreeMap;

use c2fda::detector::{Annotation, BBox, DetectorConfig, DetectorModel};
use c2fda::psa::{
    gt_features, init_global_prototypes, live_prototypes, psa_loss, psa_loss_graph,
    roi_features, similarity, source_local_prototypes, target_local_prototypes, PrototypeBank,
};
use c2fda::tensor::{check_gradients, Graph, Tensor};
use c2fda::Domain;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rows(data: &[&[f64]]) -> Tensor {
    Tensor::new(&[data.len(), data[0].len()], data.concat()).unwrap()
}

fn bank(domain: Domain, entries: &[(usize, Vec<f64>)], classes: usize, dim: usize) -> PrototypeBank {
    let mut b = PrototypeBank::new(domain, classes, dim);
    for (k, v) in entries {
        b.set(*k, v.clone()).unwrap();
    }
    b
}

fn close_vec(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn source_prototypes_are_group_means() {
    let p = source_local_prototypes(&rows(&[&[0.3, -2.0]]), &[2]).unwrap();
    assert_eq!(p.get(2).unwrap(), [0.3, -2.0]);
    assert_eq!(p.len(), 1);

    let p = source_local_prototypes(&rows(&[&[1.0, 0.0], &[0.0, 1.0]]), &[1, 1]).unwrap();
    assert_eq!(p.get(1).unwrap(), [0.5, 0.5]);

    let feats: [&[f64]; 5] = [
        &[1.0, 2.0, 3.0],
        &[0.0, -1.0, 4.0],
        &[2.0, 2.0, 2.0],
        &[5.0, 0.5, -3.0],
        &[-1.0, 1.0, 0.0],
    ];
    let labels = [0, 2, 0, 1, 2];
    let p = source_local_prototypes(&rows(&feats), &labels).unwrap();
    for k in 0..3 {
        let members: Vec<&[f64]> = (0..5).filter(|&i| labels[i] == k).map(|i| feats[i]).collect();
        let oracle: Vec<f64> = (0..3)
            .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64)
            .collect();
        assert!(close_vec(p.get(k).unwrap(), &oracle, 1e-15));
        assert_eq!(p.count(k), members.len());
    }
    assert!(source_local_prototypes(&rows(&[&[1.0]]), &[]).is_err());
}

#[test]
fn target_prototypes_filter_then_average() {
    let p = target_local_prototypes(&rows(&[&[4.0, 5.0]]), &rows(&[&[0.03, 0.95, 0.02]]), 0.8)
        .unwrap();
    assert_eq!(p.get(0).unwrap(), [4.0, 5.0]);

    let p = target_local_prototypes(&rows(&[&[4.0, 5.0]]), &rows(&[&[0.9, 0.05, 0.05]]), 0.01)
        .unwrap();
    assert!(p.is_empty());

    let feats: [&[f64]; 4] = [&[1.0, 0.0], &[0.0, 2.0], &[9.0, 9.0], &[3.0, 1.0]];
    let scores: [&[f64]; 4] = [
        &[0.05, 0.9, 0.05],
        &[0.1, 0.85, 0.05],
        &[0.3, 0.6, 0.1],
        &[0.02, 0.03, 0.95],
    ];
    let p = target_local_prototypes(&rows(&feats), &rows(&scores), 0.8).unwrap();
    let accepted: Vec<(usize, &[f64])> = (0..4)
        .filter_map(|i| {
            let s = scores[i];
            let (k, &best) = s[1..].iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
            (best >= 0.8 && best >= s[0]).then_some((k, feats[i]))
        })
        .collect();
    assert_eq!(accepted.len(), 3);
    for k in 0..2 {
        let members: Vec<&[f64]> = accepted.iter().filter(|a| a.0 == k).map(|a| a.1).collect();
        let oracle: Vec<f64> = (0..2)
            .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64)
            .collect();
        assert!(close_vec(p.get(k).unwrap(), &oracle, 1e-15));
    }
}

#[test]
fn similarity_examples() {
    let x = [0.3, -1.2, 2.0];
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((similarity(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    assert!(similarity(&x, &neg).unwrap().abs() < 1e-15);
    assert!((similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
    assert!(similarity(&[0.0, 0.0], &[1.0, 0.0]).is_none());
}

fn local_of(k: usize, v: &[f64]) -> c2fda::psa::LocalPrototypes {
    let labels = [k];
    source_local_prototypes(&rows(&[v]), &labels).unwrap()
}

#[test]
fn update_global_examples() {
    let gp = vec![1.0, -2.0, 0.5];
    let mut b = bank(Domain::Source, &[(0, gp.clone())], 2, 3);
    b.update_global(&local_of(0, &gp)).unwrap();
    assert!(close_vec(b.get(0).unwrap(), &gp, 1e-15));

    let neg: Vec<f64> = gp.iter().map(|v| -v).collect();
    let r = b.update_global(&local_of(0, &neg)).unwrap();
    assert_eq!(r[0].alpha, 0.0);
    assert_eq!(b.get(0).unwrap(), gp.as_slice());

    let mut b = bank(Domain::Target, &[(1, vec![1.0, 0.0, 0.0, 0.0])], 2, 4);
    b.update_global(&local_of(1, &[0.0, 1.0, 0.0, 0.0])).unwrap();
    assert!(close_vec(b.get(1).unwrap(), &[0.5, 0.5, 0.0, 0.0], 1e-15));

    // first sight copies; absent classes stay put
    b.update_global(&local_of(0, &[2.0, 2.0, 2.0, 2.0])).unwrap();
    assert_eq!(b.get(0).unwrap(), [2.0; 4]);
    assert!(close_vec(b.get(1).unwrap(), &[0.5, 0.5, 0.0, 0.0], 1e-15));

    // vanishing local vector is skipped
    let before = b.clone();
    let r = b.update_global(&local_of(1, &[0.0; 4])).unwrap();
    assert!(r.is_empty());
    assert_eq!(b, before);

    assert!(b.update_global(&local_of(0, &[1.0, 2.0])).is_err());
    assert!(b.update_global(&local_of(5, &[1.0; 4])).is_err());
}

#[test]
fn psa_loss_examples() {
    let a = bank(Domain::Source, &[(0, vec![1.0, 2.0]), (2, vec![0.5, 0.5])], 3, 2);
    let mut t = a.clone();
    assert_eq!(psa_loss(&a, &t).unwrap(), 0.0);
    t.set(0, vec![1.0, 2.5]).unwrap();
    assert!(psa_loss(&a, &t).unwrap() > 0.0);

    let s = bank(Domain::Source, &[(1, vec![1.0, 0.0])], 3, 2);
    let t = bank(Domain::Target, &[(1, vec![0.0, 1.0])], 3, 2);
    assert!((psa_loss(&s, &t).unwrap() - 2.0).abs() < 1e-15);

    let empty = PrototypeBank::new(Domain::Target, 3, 2);
    assert_eq!(psa_loss(&s, &empty).unwrap(), 0.0);
    assert!(psa_loss(&s, &PrototypeBank::new(Domain::Target, 3, 5)).is_err());
}

#[test]
fn live_prototype_graph_matches_bank_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fc2: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fc2_t: Vec<f64> = (0..3 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let src_labels = [0, 1, 0, 2, 1];
    let tgt_scores = rows(&[
        &[0.05, 0.9, 0.03, 0.02],
        &[0.0, 0.0, 0.0, 1.0],
        &[0.02, 0.02, 0.95, 0.01],
    ]);
    let src0 = bank(Domain::Source, &[(0, vec![0.2, 0.1, -0.3, 0.4]), (1, vec![1.0; 4])], 3, 4);
    let tgt0 = bank(Domain::Target, &[(0, vec![-0.5, 0.3, 0.2, 0.1]), (2, vec![0.3; 4])], 3, 4);

    let build = |g: &mut Graph, v: &[c2fda::tensor::Var]| {
        let mut src = src0.clone();
        let mut tgt = tgt0.clone();
        let ls = source_local_prototypes(g.value(v[0]), &src_labels)?;
        let lt = target_local_prototypes(g.value(v[1]), &tgt_scores, 0.8)?;
        let rs = src.update_global(&ls)?;
        let rt = tgt.update_global(&lt)?;
        let live_s = live_prototypes(g, v[0], &ls, &rs)?;
        let live_t = live_prototypes(g, v[1], &lt, &rt)?;
        for (k, var) in live_s.iter() {
            assert!(close_vec(g.value(*var).data(), src.get(*k).unwrap(), 1e-12));
        }
        let loss = psa_loss_graph(g, &src, &live_s, &tgt, &live_t)?;
        assert!((g.value(loss).item() - psa_loss(&src, &tgt)?).abs() < 1e-12);
        Ok::<_, c2fda::Error>(loss)
    };
    let params = [
        Tensor::new(&[5, 4], fc2).unwrap(),
        Tensor::new(&[3, 4], fc2_t).unwrap(),
    ];
    // gates and history are constants, so hold them fixed under perturbation
    let frozen = |g: &mut Graph, v: &[c2fda::tensor::Var]| {
        let mut src = src0.clone();
        let mut tgt = tgt0.clone();
        let ls = source_local_prototypes(&params[0], &src_labels)?;
        let lt = target_local_prototypes(&params[1], &tgt_scores, 0.8)?;
        let rs = src.update_global(&ls)?;
        let rt = tgt.update_global(&lt)?;
        let live_s = live_prototypes(g, v[0], &ls, &rs)?;
        let live_t = live_prototypes(g, v[1], &lt, &rt)?;
        psa_loss_graph(g, &src, &live_s, &tgt, &live_t)
    };
    let mut g = Graph::new();
    let vars: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
    build(&mut g, &vars).unwrap();
    assert!(check_gradients(&params, frozen, 1e-6).unwrap() < 1e-6);
}

#[test]
fn psa_loss_graph_without_common_classes_is_zero() {
    let s = bank(Domain::Source, &[(0, vec![1.0])], 2, 1);
    let t = bank(Domain::Target, &[(1, vec![1.0])], 2, 1);
    let mut g = Graph::new();
    let loss = psa_loss_graph(&mut g, &s, &BTreeMap::new(), &t, &BTreeMap::new()).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
}

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[3, 64, 64], (0..3 * 64 * 64).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn init_pass_builds_all_region_means() {
    let model = DetectorModel::new(DetectorConfig::default(), 8).unwrap();
    let imgs = [image(1), image(2)];
    let gts = [
        vec![Annotation { bbox: BBox::new(4.0, 4.0, 24.0, 24.0).unwrap(), category: 0 }],
        vec![
            Annotation { bbox: BBox::new(30.0, 8.0, 60.0, 40.0).unwrap(), category: 0 },
            Annotation { bbox: BBox::new(0.0, 30.0, 20.0, 62.0).unwrap(), category: 0 },
            Annotation { bbox: BBox::new(10.0, 10.0, 40.0, 30.0).unwrap(), category: 2 },
        ],
    ];
    let (src, tgt) = init_global_prototypes(
        &model,
        imgs.iter().zip(&gts).map(|(i, g)| (i, g.as_slice())),
        imgs.iter(),
        0.0,
    )
    .unwrap();
    assert_eq!(src.domain(), Domain::Source);
    let mut regions: Vec<(usize, Vec<f64>)> = Vec::new();
    for (img, g) in imgs.iter().zip(&gts) {
        let f = gt_features(&model, img, g).unwrap();
        for (r, a) in g.iter().enumerate() {
            regions.push((a.category, f.data()[r * 64..(r + 1) * 64].to_vec()));
        }
    }
    for k in 0..3 {
        let members: Vec<&Vec<f64>> = regions.iter().filter(|r| r.0 == k).map(|r| &r.1).collect();
        if members.is_empty() {
            assert!(src.get(k).is_none());
            continue;
        }
        let oracle: Vec<f64> = (0..64)
            .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64)
            .collect();
        assert!(close_vec(src.get(k).unwrap(), &oracle, 1e-12));
    }
    // target: all accepted RoIs of both images pooled per class
    let mut accepted: Vec<(usize, Vec<f64>)> = Vec::new();
    for img in &imgs {
        let (f, s) = roi_features(&model, img).unwrap();
        for r in 0..f.shape()[0] {
            let row = &s.data()[r * 4..(r + 1) * 4];
            if let Some(k) = c2fda::psa::pseudo_label(row, 0.0) {
                accepted.push((k, f.data()[r * 64..(r + 1) * 64].to_vec()));
            }
        }
    }
    for k in 0..3 {
        let members: Vec<&Vec<f64>> = accepted.iter().filter(|r| r.0 == k).map(|r| &r.1).collect();
        match tgt.get(k) {
            None => assert!(members.is_empty()),
            Some(gp) => {
                let oracle: Vec<f64> = (0..64)
                    .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                assert!(close_vec(gp, &oracle, 1e-12));
            }
        }
    }

    let (_, none) = init_global_prototypes(&model, std::iter::empty(), imgs.iter(), 1.1).unwrap();
    assert!((0..3).all(|k| !none.is_initialized(k)));
}

fn vec3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 3)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn updates_are_convex_and_approach_the_local(gp in vec3(), p in vec3()) {
        prop_assume!(norm(&gp) > 1e-3 && norm(&p) > 1e-3);
        let mut b = bank(Domain::Source, &[(0, gp.clone())], 1, 3);
        let mut prev = gp.clone();
        for _ in 0..5 {
            let r = b.update_global(&local_of(0, &p)).unwrap();
            let alpha = r[0].alpha;
            prop_assert!((0.0..=1.0).contains(&alpha));
            let now = b.get(0).unwrap().to_vec();
            for d in 0..3 {
                let expect = alpha * p[d] + (1.0 - alpha) * prev[d];
                prop_assert!((now[d] - expect).abs() < 1e-12);
            }
            prop_assert!(norm(&now) <= norm(&prev).max(norm(&p)) + 1e-12);
            prop_assert!(dist(&now, &p) <= dist(&prev, &p) + 1e-12);
            if alpha > 0.0 && dist(&prev, &p) > 1e-9 {
                prop_assert!(dist(&now, &p) < dist(&prev, &p));
            }
            prev = now;
        }
    }

    #[test]
    fn empty_local_is_a_no_op(gp in vec3()) {
        let mut b = bank(Domain::Target, &[(1, gp)], 2, 3);
        let before = b.clone();
        b.update_global(&c2fda::psa::LocalPrototypes::default()).unwrap();
        prop_assert_eq!(b, before);
    }

    #[test]
    fn loss_vanishes_only_on_agreement(a in vec3(), b in vec3()) {
        let s = bank(Domain::Source, &[(0, a.clone())], 1, 3);
        let t = bank(Domain::Target, &[(0, b.clone())], 1, 3);
        let l = psa_loss(&s, &t).unwrap();
        prop_assert_eq!(l == 0.0, a == b);
        prop_assert!((l - dist(&a, &b).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn outlier_displacement_is_suppressed(
        c in vec3(),
        o in vec3(),
        n in 1usize..8,
    ) {
        prop_assume!(norm(&c) > 0.1 && norm(&o) > 0.1);
        let mut feats: Vec<Vec<f64>> = (0..n).map(|_| c.clone()).collect();
        feats.push(o.clone());
        let flat: Vec<&[f64]> = feats.iter().map(|v| v.as_slice()).collect();
        let local = source_local_prototypes(&rows(&flat), &vec![0; n + 1]).unwrap();
        let mut b = bank(Domain::Target, &[(0, c.clone())], 1, 3);
        let alpha = b.update_global(&local).unwrap()[0].alpha;
        let moved = b.get(0).unwrap();
        prop_assert!(dist(moved, &c) <= alpha * dist(&o, &c) / (n + 1) as f64 + 1e-12);
    }
}
