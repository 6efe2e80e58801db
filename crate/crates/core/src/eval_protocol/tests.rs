use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::oracle::{ap_brute_force, combine_reference};

fn r(a: f64, b: f64, c: f64, d: f64) -> Rect {
    Rect::new(a, b, c, d).unwrap()
}

fn det(img: u64, rect: Rect, s: f64) -> Detection {
    Detection::new(img, rect, s)
}

fn gt(img: u64, rect: Rect) -> GroundTruthBox {
    GroundTruthBox { image_id: img, rect, category_id: 1, known: true }
}

#[test]
fn ap_fixtures() {
    let cfg = EvalConfig::default();
    let g = vec![gt(0, r(0.0, 0.0, 10.0, 10.0))];
    // IoU 0.6: 10×10 against 10×6 inside it.
    let d = vec![det(0, r(0.0, 0.0, 10.0, 6.0), 0.5)];
    assert_eq!(average_precision(&d, &g, &cfg).ap, 1.0);
    let far = vec![det(0, r(50.0, 50.0, 60.0, 60.0), 0.9), det(0, r(20.0, 0.0, 30.0, 10.0), 0.8)];
    assert_eq!(average_precision(&far, &g, &cfg).ap, 0.0);

    let g2 = vec![gt(0, r(0.0, 0.0, 10.0, 10.0)), gt(0, r(20.0, 20.0, 30.0, 30.0))];
    let d3 = vec![
        det(0, r(0.0, 0.0, 10.0, 10.0), 0.9),
        det(0, r(40.0, 40.0, 50.0, 50.0), 0.8),
        det(0, r(20.0, 20.0, 30.0, 30.0), 0.7),
    ];
    let pr = average_precision(&d3, &g2, &cfg);
    assert!((pr.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    assert!((pr.ap - 0.8333).abs() < 1e-4);
    assert_eq!((pr.tp, pr.fp, pr.num_gt), (2, 1, 2));
    assert!(pr.points.windows(2).all(|w| w[0].0 <= w[1].0));
}

#[test]
fn ap_without_ground_truth() {
    let cfg = EvalConfig::default();
    assert_eq!(average_precision(&[], &[], &cfg).ap, 1.0);
    assert_eq!(average_precision(&[det(0, r(0.0, 0.0, 1.0, 1.0), 0.3)], &[], &cfg).ap, 0.0);
    assert_eq!(average_precision(&[], &[gt(0, r(0.0, 0.0, 1.0, 1.0))], &cfg).ap, 0.0);
}

#[test]
fn eleven_point_interpolation() {
    let cfg = EvalConfig { interpolation: ApInterpolation::ElevenPoint, ..EvalConfig::default() };
    let g2 = vec![gt(0, r(0.0, 0.0, 10.0, 10.0)), gt(0, r(20.0, 20.0, 30.0, 30.0))];
    let d3 = vec![
        det(0, r(0.0, 0.0, 10.0, 10.0), 0.9),
        det(0, r(40.0, 40.0, 50.0, 50.0), 0.8),
        det(0, r(20.0, 20.0, 30.0, 30.0), 0.7),
    ];
    // Recall thresholds 0..=0.5 see precision 1, 0.6..=1.0 see 2/3.
    let want = (6.0 + 5.0 * 2.0 / 3.0) / 11.0;
    assert!((average_precision(&d3, &g2, &cfg).ap - want).abs() < 1e-15);
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruthBox>) {
    let rect = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
        r(x, y, x + rng.gen_range(2.0..20.0), y + rng.gen_range(2.0..20.0))
    };
    let gts: Vec<_> = (0..rng.gen_range(0..8)).map(|_| gt(0, rect(rng))).collect();
    let mut dets = Vec::new();
    for _ in 0..rng.gen_range(0..15) {
        let b = if !gts.is_empty() && rng.gen_bool(0.5) {
            let g = gts[rng.gen_range(0..gts.len())].rect;
            let j = rng.gen_range(-3.0..3.0);
            r(g.x_min + j, g.y_min + j.abs(), g.x_max + j, g.y_max + 1.0)
        } else {
            rect(rng)
        };
        dets.push(det(0, b, rng.gen_range(0.0..1.0)));
    }
    (dets, gts)
}

#[test]
fn ap_matches_operating_point_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = EvalConfig::default();
    for _ in 0..100 {
        let (dets, gts) = random_instance(&mut rng);
        let fast = average_precision(&dets, &gts, &cfg).ap;
        let slow = ap_brute_force(&dets, &gts, cfg.iou_thresh);
        assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
        assert!((0.0..=1.0).contains(&fast));
    }
}

#[test]
fn combine_examples() {
    let cfg = EvalConfig::default();
    let a = r(0.0, 0.0, 10.0, 10.0);
    let one = vec![vec![det(0, a, 0.4), det(0, r(1.0, 0.0, 11.0, 10.0), 0.3), det(0, r(30.0, 30.0, 40.0, 40.0), 0.2)]];
    assert_eq!(combine_query_detections(&one, &cfg), nms_class_agnostic(&one[0], 0.5));
    let two = vec![vec![det(0, a, 0.9).with_query("a")], vec![det(0, a, 0.8).with_query("b")]];
    let out = combine_query_detections(&two, &cfg);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].score, 0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let sources: Vec<Vec<Detection>> = (0..3).map(|_| random_instance(&mut rng).0).collect();
        let small = EvalConfig { top_n: 2, ..EvalConfig::default() };
        assert_eq!(combine_query_detections(&sources, &small), combine_reference(&sources, 0.5, 2));
    }
}

proptest! {
    #[test]
    fn combine_is_bounded_suppressed_and_order_free(seed in 0u64..500, top in 1usize..8, t in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sources: Vec<Vec<Detection>> = (0..3).map(|_| random_instance(&mut rng).0).collect();
        let cfg = EvalConfig { top_n: top, nms_thresh: t, ..EvalConfig::default() };
        let out = combine_query_detections(&sources, &cfg);
        prop_assert!(out.len() <= top);
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                prop_assert!(iou(&a.rect, &b.rect) <= t);
            }
        }
        let reversed: Vec<Vec<Detection>> = sources.iter().rev().cloned().collect();
        prop_assert_eq!(combine_query_detections(&reversed, &cfg), out);
    }

    #[test]
    fn recall_is_monotone(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = random_instance(&mut rng);
        let cfg = EvalConfig::default();
        let ns = [1, 2, 5, 10, 50];
        let curve = recall_curve(&dets, &gts, &cfg, &ns).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1));
        for (n, v) in &curve {
            prop_assert_eq!(*v, recall_at_n(&dets, &gts, &cfg, *n).unwrap());
        }
        let loose = EvalConfig { iou_thresh: 0.3, ..cfg.clone() };
        prop_assert!(recall_at_n(&dets, &gts, &loose, 10).unwrap() >= recall_at_n(&dets, &gts, &cfg, 10).unwrap());
    }
}

#[test]
fn recall_examples() {
    let cfg = EvalConfig::default();
    let g = vec![gt(0, r(0.0, 0.0, 10.0, 10.0)), gt(0, r(20.0, 0.0, 30.0, 10.0)), gt(0, r(40.0, 0.0, 50.0, 10.0))];
    let mut sup: Vec<Detection> = g.iter().map(|x| det(0, x.rect, 0.5)).collect();
    sup.push(det(0, r(60.0, 60.0, 70.0, 70.0), 0.9));
    assert_eq!(recall_at_n(&sup, &g, &cfg, 10).unwrap(), 1.0);
    assert_eq!(recall_at_n(&[], &g, &cfg, 10).unwrap(), 0.0);
    assert_eq!(recall_at_n(&[], &[], &cfg, 10).unwrap(), 1.0);
    let d = vec![det(0, g[0].rect, 0.9), det(0, g[2].rect, 0.8), det(0, g[1].rect, 0.1)];
    assert!((recall_at_n(&d, &g, &cfg, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!(recall_at_n(&d, &g, &cfg, 0).is_err());
    let curve = recall_curve(&d, &g, &cfg, &[10, 30, 50]).unwrap();
    assert_eq!(curve, vec![(10, 1.0), (30, 1.0), (50, 1.0)]);
}

#[test]
fn per_image_pooling_averages_images() {
    let cfg = EvalConfig { recall_pooling: RecallPooling::PerImage, ..EvalConfig::default() };
    let g = vec![gt(0, r(0.0, 0.0, 10.0, 10.0)), gt(1, r(0.0, 0.0, 10.0, 10.0)), gt(1, r(20.0, 0.0, 30.0, 10.0))];
    let d = vec![det(0, g[0].rect, 0.9)];
    assert_eq!(recall_at_n(&d, &g, &cfg, 5).unwrap(), 0.5);
    assert!((recall_at_n(&d, &g, &EvalConfig::default(), 5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn size_buckets_follow_area_fractions() {
    let b = SizeBuckets::default();
    assert_eq!(b.classify(400.0 / 10_000.0), SizeBucket::Small);
    assert_eq!(b.classify(1000.0 / 10_000.0), SizeBucket::Medium);
    assert_eq!(b.classify(2500.0 / 10_000.0), SizeBucket::Large);
    assert_eq!(b.classify(0.05), SizeBucket::Medium);
    assert_eq!(b.classify(0.20), SizeBucket::Medium);
    assert!(SizeBuckets { small: 0.3, large: 0.2 }.validate().is_err());

    let sizes: BTreeMap<u64, (f64, f64)> = [(0, (100.0, 100.0))].into();
    let g = vec![gt(0, r(0.0, 0.0, 20.0, 20.0)), gt(0, r(30.0, 0.0, 55.0, 40.0)), gt(0, r(0.0, 50.0, 50.0, 100.0))];
    let d = vec![det(0, g[0].rect, 0.9), det(0, g[2].rect, 0.8)];
    let out = size_bucket_recall(&d, &g, &sizes, &b, &EvalConfig::default()).unwrap();
    assert_eq!(out.small, RecallCount { matched: 1, total: 1 });
    assert_eq!(out.medium, RecallCount { matched: 0, total: 1 });
    assert_eq!(out.large, RecallCount { matched: 1, total: 1 });
    assert_eq!(out.small.total + out.medium.total + out.large.total, g.len());
}

#[test]
fn bucket_matching_is_global() {
    // One detection overlaps a small and a large GT; global matching gives
    // it to the higher-IoU large box, so the small one stays unmatched.
    let sizes: BTreeMap<u64, (f64, f64)> = [(0, (100.0, 100.0))].into();
    let small = gt(0, r(0.0, 0.0, 20.0, 20.0));
    let large = gt(0, r(0.0, 0.0, 24.0, 24.0));
    let d = vec![det(0, r(0.0, 0.0, 23.0, 23.0), 0.9)];
    let out = size_bucket_recall(&d, &[small, large], &sizes, &SizeBuckets::default(), &EvalConfig::default()).unwrap();
    assert_eq!(out.small.matched + out.medium.matched, 1);
    assert_eq!(out.small.matched, 0);
}

#[test]
fn category_recall() {
    let cfg = EvalConfig::default();
    let mut g = vec![gt(0, r(0.0, 0.0, 10.0, 10.0)), gt(0, r(20.0, 0.0, 30.0, 10.0)), gt(0, r(40.0, 0.0, 50.0, 10.0))];
    g[2].category_id = 7;
    let d = vec![det(0, g[0].rect, 0.9), det(0, g[2].rect, 0.8)];
    let out = recall_by_category(&d, &g, &cfg);
    assert_eq!(out, [(1, 0.5), (7, 1.0)].into());
    let single: Vec<_> = g.iter().map(|x| GroundTruthBox { category_id: 1, ..x.clone() }).collect();
    assert_eq!(recall_by_category(&d, &single, &cfg)[&1], recall_at_n(&d, &single, &cfg, cfg.top_n).unwrap());
}

#[test]
fn report_agrees_with_direct_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut sizes = BTreeMap::new();
    for img in 0..6u64 {
        let (d, g) = random_instance(&mut rng);
        dets.extend(d.into_iter().map(|x| Detection { image_id: img, ..x }));
        gts.extend(g.into_iter().map(|x| GroundTruthBox { image_id: img, ..x }));
        sizes.insert(img, (64.0, 64.0));
    }
    let cfg = EvalConfig { top_n: 5, ..EvalConfig::default() };
    let report = evaluate(&dets, &gts, &sizes, &cfg, &SizeBuckets::default(), &[1, 5]).unwrap();
    let truncated = apply_protocol(&dets, &cfg);
    assert_eq!(report.ap50, average_precision(&truncated, &gts, &cfg).ap);
    assert_eq!(report.r50, recall_at_n(&dets, &gts, &cfg, 5).unwrap());
    assert_eq!(report.curve[0], (1, recall_at_n(&dets, &gts, &cfg, 1).unwrap()));
    assert_eq!(report.per_category, recall_by_category(&dets, &gts, &cfg));
    assert!(evaluate(&dets, &gts, &BTreeMap::new(), &cfg, &SizeBuckets::default(), &[1]).is_err());
}

#[test]
fn score_threshold_is_strict() {
    let cfg = EvalConfig { score_thresh: Some(0.7), ..EvalConfig::default() };
    let d = vec![det(0, r(0.0, 0.0, 1.0, 1.0), 0.7), det(0, r(0.0, 0.0, 1.0, 1.0), 0.71)];
    let kept = apply_protocol(&d, &cfg);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.71);
}

#[test]
fn tile_grids() {
    assert_eq!(tile_grid(8, 256, 256).unwrap(), (4, 2));
    assert_eq!(tile_grid(8, 256, 128).unwrap(), (4, 2));
    assert_eq!(tile_grid(8, 128, 256).unwrap(), (2, 4));
    assert_eq!(tile_grid(1, 7, 5).unwrap(), (1, 1));
    assert_eq!(tile_grid(4, 64, 64).unwrap(), (2, 2));
    assert!(tile_grid(0, 64, 64).is_err());
    assert!(tile_grid(7, 70, 70).is_err());
    assert!(tile_grid(8, 250, 250).is_err());
}

#[test]
fn tiled_inference_translates_and_merges() {
    let image = Tensor::zeros(&[128, 256, 1]);
    let cfg = EvalConfig::default();
    let local = |_: &Tensor| Ok(vec![det(3, r(2.0, 3.0, 5.0, 6.0), 0.9)]);
    let out = tiled_inference(&image, local, 8, &cfg).unwrap();
    assert_eq!(out.len(), 8);
    let origins: Vec<[f64; 4]> = out.iter().map(|d| d.rect.to_array()).collect();
    assert!(origins.contains(&[2.0, 3.0, 5.0, 6.0]));
    assert!(origins.contains(&[194.0, 67.0, 197.0, 70.0]));
    let shift = |_: &Tensor| Ok(vec![det(0, r(2.0, 3.0, 5.0, 6.0), 0.9)]);
    let moved = tiled_inference(&Tensor::zeros(&[100, 200, 1]), shift, 1, &cfg).unwrap();
    assert_eq!(moved, vec![det(0, r(2.0, 3.0, 5.0, 6.0), 0.9)]);
    let rects = tile_rects(8, 256, 128).unwrap();
    assert_eq!(rects[5].to_array(), [64.0, 64.0, 128.0, 128.0]);
}

#[test]
fn tiled_inference_sees_each_crop() {
    let mut image = Tensor::zeros(&[64, 128, 1]);
    image.data_mut()[40 * 128 + 100] = 1.0;
    let find_bright = |t: &Tensor| {
        let w = t.shape()[1];
        Ok(t.data()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.5)
            .map(|(i, _)| det(0, r((i % w) as f64, (i / w) as f64, (i % w + 1) as f64, (i / w + 1) as f64), 1.0))
            .collect())
    };
    let out = tiled_inference(&image, find_bright, 8, &EvalConfig::default()).unwrap();
    assert_eq!(out, vec![det(0, r(100.0, 40.0, 101.0, 41.0), 1.0)]);
}

#[test]
fn resize_same_size_is_identity() {
    let img = Tensor::from_fn(&[5, 7, 2], |i| i as f64 * 0.1);
    assert_eq!(resize(&img, 7, 5).unwrap(), img);
}

#[test]
fn resize_integer_factor_averages_blocks() {
    let img = Tensor::from_fn(&[4, 4, 1], |i| i as f64);
    let out = resize(&img, 2, 2).unwrap();
    // Top-left block holds 0, 1, 4, 5.
    assert_eq!(out.data(), &[2.5, 4.5, 10.5, 12.5]);
    assert!(resize(&img, 0, 2).is_err());
}

proptest! {
    #[test]
    fn resize_preserves_mean(ih in 1usize..20, iw in 1usize..20, h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn(&[ih, iw, 1], |_| rng.gen_range(0.0..1.0));
        let out = resize(&img, w, h).unwrap();
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.data().len() as f64;
        prop_assert!((mean(&img) - mean(&out)).abs() < 1e-12);
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
    }
}
