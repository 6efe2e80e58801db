//! Unknown-object pseudo-labels from class-agnostic proposals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms_class_agnostic, Detection, GroundTruthBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    /// Proposals scoring below this are discarded.
    pub min_score: f64,
    /// Proposals overlapping a known GT box by more than this are discarded.
    pub max_known_iou: f64,
    /// Optional NMS threshold among the survivors.
    pub nms: Option<f64>,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig { min_score: 0.7, max_known_iou: 0.5, nms: None }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.min_score) || !unit(self.max_known_iou) || self.nms.is_some_and(|t| !unit(t)) {
            return Err(Error::Config(format!("pseudo-label thresholds must lie in [0, 1]: {self:?}")));
        }
        Ok(())
    }
}

/// Largest IoU of `d` with any known GT box on the same image.
pub fn max_known_iou(d: &Detection, known: &[GroundTruthBox]) -> f64 {
    known.iter().filter(|g| g.known && g.image_id == d.image_id).map(|g| iou(&d.rect, &g.rect)).fold(0.0, f64::max)
}

/// Keeps proposals with `score ≥ min_score` whose IoU with every known GT
/// box is at most `max_known_iou`, in input order.
pub fn generate_unknown_pseudo_labels(proposals: &[Detection], known_gt: &[GroundTruthBox], cfg: &PseudoLabelConfig) -> Vec<Detection> {
    let kept: Vec<Detection> = proposals
        .iter()
        .filter(|p| p.score >= cfg.min_score && max_known_iou(p, known_gt) <= cfg.max_known_iou)
        .cloned()
        .collect();
    match cfg.nms {
        None => kept,
        Some(t) => {
            let survivors = nms_class_agnostic(&kept, t);
            kept.into_iter().filter(|d| survivors.contains(d)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::geometry::Rect;

    fn r(a: f64, b: f64, c: f64, d: f64) -> Rect {
        Rect::new(a, b, c, d).unwrap()
    }

    fn known(rect: Rect) -> GroundTruthBox {
        GroundTruthBox { image_id: 0, rect, category_id: 1, known: true }
    }

    #[test]
    fn threshold_examples() {
        let cfg = PseudoLabelConfig::default();
        let g = vec![known(r(0.0, 0.0, 10.0, 10.0))];
        let low = Detection::new(0, r(50.0, 50.0, 60.0, 60.0), 0.65);
        assert!(generate_unknown_pseudo_labels(&[low], &g, &cfg).is_empty());
        // 10×6 inside the 10×10 GT: IoU 0.6.
        let overlapping = Detection::new(0, r(0.0, 0.0, 10.0, 6.0), 0.8);
        assert!(generate_unknown_pseudo_labels(&[overlapping], &g, &cfg).is_empty());
        // 10×3 inside: IoU 0.3.
        let novel = Detection::new(0, r(0.0, 0.0, 10.0, 3.0), 0.8);
        assert!((max_known_iou(&novel, &g) - 0.3).abs() < 1e-15);
        assert_eq!(generate_unknown_pseudo_labels(&[novel.clone()], &g, &cfg), vec![novel]);
        assert!(generate_unknown_pseudo_labels(&[], &g, &cfg).is_empty());
    }

    #[test]
    fn boundaries_are_kept() {
        let cfg = PseudoLabelConfig::default();
        let g = vec![known(r(0.0, 0.0, 10.0, 10.0))];
        let half = Detection::new(0, r(0.0, 0.0, 10.0, 5.0), 0.7);
        assert_eq!(max_known_iou(&half, &g), 0.5);
        assert_eq!(generate_unknown_pseudo_labels(&[half.clone()], &g, &cfg), vec![half]);
    }

    #[test]
    fn unknown_and_foreign_boxes_do_not_suppress() {
        let cfg = PseudoLabelConfig::default();
        let mut unknown = known(r(0.0, 0.0, 10.0, 10.0));
        unknown.known = false;
        let other_image = GroundTruthBox { image_id: 9, ..known(r(0.0, 0.0, 10.0, 10.0)) };
        let d = Detection::new(0, r(0.0, 0.0, 10.0, 10.0), 0.9);
        assert_eq!(generate_unknown_pseudo_labels(&[d.clone()], &[unknown, other_image], &cfg), vec![d]);
    }

    #[test]
    fn optional_nms_removes_duplicates() {
        let cfg = PseudoLabelConfig { nms: Some(0.5), ..PseudoLabelConfig::default() };
        let a = Detection::new(0, r(0.0, 0.0, 10.0, 10.0), 0.8);
        let b = Detection::new(0, r(0.0, 0.0, 10.0, 10.0), 0.9);
        assert_eq!(generate_unknown_pseudo_labels(&[a, b.clone()], &[], &cfg), vec![b]);
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (0.0..40.0f64, 0.0..40.0f64, 1.0..20.0f64, 1.0..20.0f64, 0.0..=1.0f64)
            .prop_map(|(x, y, w, h, s)| Detection::new(0, r(x, y, x + w, y + h), s))
    }

    proptest! {
        #[test]
        fn filter_properties(
            props in prop::collection::vec(arb_det(), 0..20),
            gts in prop::collection::vec(arb_det(), 0..6),
            s1 in 0.0..=1.0f64, s2 in 0.0..=1.0f64, i1 in 0.0..=1.0f64, i2 in 0.0..=1.0f64,
        ) {
            let known: Vec<GroundTruthBox> = gts.iter().map(|d| GroundTruthBox { image_id: 0, rect: d.rect, category_id: 1, known: true }).collect();
            let cfg = PseudoLabelConfig { min_score: s1.min(s2), max_known_iou: i1.max(i2), nms: None };
            let out = generate_unknown_pseudo_labels(&props, &known, &cfg);
            for d in &out {
                prop_assert!(d.score >= cfg.min_score);
                for g in &known {
                    prop_assert!(iou(&d.rect, &g.rect) <= cfg.max_known_iou);
                }
            }
            let mut it = props.iter();
            prop_assert!(out.iter().all(|d| it.any(|p| p == d)));
            prop_assert_eq!(&generate_unknown_pseudo_labels(&out, &known, &cfg), &out);
            let stricter = PseudoLabelConfig { min_score: s1.max(s2), max_known_iou: i1.min(i2), nms: None };
            let fewer = generate_unknown_pseudo_labels(&props, &known, &stricter);
            prop_assert!(fewer.len() <= out.len());
            prop_assert!(fewer.iter().all(|d| out.contains(d)));
        }
    }
}
