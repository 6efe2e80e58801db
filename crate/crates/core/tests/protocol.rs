use std::collections::BTreeMap;

use mavlkit::data_io::{self, gen_synthetic_dataset, SyntheticSpec};
use mavlkit::eval_protocol::{self, combine_query_detections, evaluate, SizeBuckets};
use mavlkit::geometry::nms_class_agnostic;
use mavlkit::mask2box::{mask_to_boxes, Mask2BoxConfig};
use mavlkit::oracle::nms_reference;
use mavlkit::pseudo_label::{generate_unknown_pseudo_labels, max_known_iou, PseudoLabelConfig};
use mavlkit::{Detection, EvalConfig, GroundTruthBox, Rect};
use proptest::prelude::*;

fn rect() -> impl Strategy<Value = Rect> {
    (0.0..80.0f64, 0.0..80.0f64, 1.0..40.0f64, 1.0..40.0f64).prop_map(|(x, y, w, h)| Rect::new(x, y, x + w, y + h).unwrap())
}

fn dets(image_id: u64) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((rect(), 0.0..1.0f64), 0..30)
        .prop_map(move |v| v.into_iter().map(|(r, s)| Detection::new(image_id, r, s)).collect())
}

fn gt(image_id: u64, rect: Rect) -> GroundTruthBox {
    GroundTruthBox { image_id, rect, category_id: 1, known: true }
}

#[test]
fn synthetic_ground_truth_scores_perfectly() {
    let data = gen_synthetic_dataset(&SyntheticSpec { num_images: 20, seed: 4, ..SyntheticSpec::default() }).unwrap();
    let gts = &data.dataset.annotations;
    let dets: Vec<_> = gts.iter().map(|g| Detection::new(g.image_id, g.rect, 0.9)).collect();
    let report = evaluate(&dets, gts, &data.dataset.sizes(), &EvalConfig::default(), &SizeBuckets::default(), &[1, 10, 50]).unwrap();
    assert_eq!(report.ap50, 1.0);
    assert_eq!(report.r50, 1.0);
}

#[test]
fn files_round_trip_through_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic_dataset(&SyntheticSpec { num_images: 6, seed: 9, ..SyntheticSpec::default() }).unwrap();
    let gt_path = dir.path().join("gt.json");
    data_io::save_ground_truth(&gt_path, &data.dataset).unwrap();
    assert_eq!(data_io::load_ground_truth(&gt_path).unwrap(), data.dataset);

    let dets: Vec<_> = data.dataset.annotations.iter().map(|g| Detection::new(g.image_id, g.rect.translate(0.3, 0.1), 0.1 + 1.0 / 3.0)).collect();
    let det_path = dir.path().join("dets.json");
    data_io::save_detections(&det_path, &dets).unwrap();
    assert_eq!(data_io::load_proposals(&det_path).unwrap(), dets);
}

#[test]
fn shape_masks_recover_isolated_shapes() {
    let data = gen_synthetic_dataset(&SyntheticSpec { num_images: 30, max_shapes: 1, noise: 0.0, seed: 2, ..SyntheticSpec::default() }).unwrap();
    for (info, image) in data.dataset.images.iter().zip(&data.images) {
        let (w, h) = (info.width as usize, info.height as usize);
        let boxes = mask_to_boxes(h, w, &image.shape_mask, &Mask2BoxConfig::default(), info.id).unwrap();
        let truth: Vec<_> = data.dataset.annotations.iter().filter(|a| a.image_id == info.id).collect();
        assert_eq!(boxes.len(), 1);
        assert!(mavlkit::geometry::iou(&boxes[0].rect, &truth[0].rect) > 0.8);
    }
}

proptest! {
    #[test]
    fn nms_agrees_with_reference(d in dets(1), t in 0.1..0.9f64) {
        prop_assert_eq!(nms_class_agnostic(&d, t), nms_reference(&d, t));
    }

    #[test]
    fn combined_output_is_bounded_and_suppressed(a in dets(1), b in dets(1), n in 1usize..20) {
        let cfg = EvalConfig { top_n: n, ..EvalConfig::default() };
        let out = combine_query_detections(&[a, b], &cfg);
        prop_assert!(out.len() <= n);
        prop_assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        for (i, x) in out.iter().enumerate() {
            for y in &out[i + 1..] {
                prop_assert!(mavlkit::geometry::iou(&x.rect, &y.rect) <= cfg.nms_thresh);
            }
        }
    }

    #[test]
    fn metrics_stay_in_unit_range(d in dets(1), g in prop::collection::vec(rect(), 0..10)) {
        let gts: Vec<_> = g.into_iter().map(|r| gt(1, r)).collect();
        let sizes = BTreeMap::from([(1, (120.0, 120.0))]);
        let r = evaluate(&d, &gts, &sizes, &EvalConfig::default(), &SizeBuckets::default(), &[1, 10, 50]).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.ap50));
        prop_assert!(r.curve.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn pseudo_labels_respect_both_filters(d in dets(3), g in prop::collection::vec(rect(), 0..6)) {
        let known: Vec<_> = g.into_iter().map(|r| gt(3, r)).collect();
        let cfg = PseudoLabelConfig::default();
        for p in generate_unknown_pseudo_labels(&d, &known, &cfg) {
            prop_assert!(p.score >= cfg.min_score);
            prop_assert!(max_known_iou(&p, &known) <= cfg.max_known_iou);
        }
    }

    #[test]
    fn tiles_cover_the_image_exactly(tiles in 1usize..13, w in 1usize..6, h in 1usize..6) {
        let (w, h) = (w * 24, h * 24);
        if let Ok(rects) = eval_protocol::tile_rects(tiles, w, h) {
            prop_assert_eq!(rects.len(), tiles);
            let area: f64 = rects.iter().map(Rect::area).sum();
            prop_assert!((area - (w * h) as f64).abs() < 1e-9);
        }
    }
}
