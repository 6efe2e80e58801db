//! Bipartite matching and the set-prediction loss.
//!
//! Each fusion block's predictions are matched to the targets independently
//! with the Hungarian algorithm, then scored with objectness BCE plus L1 and
//! GIoU box terms. The total is the sum over blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DetectionSet;
use crate::numerics::kernels::sigmoid;
use crate::numerics::Tensor;

/// Target box in normalized `(cx, cy, w, h)`.
pub type TargetBox = [f64; 4];

/// Weights of the three loss (and matching-cost) terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 2.0, l1: 5.0, giou: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls, self.l1, self.giou];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) || all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative and not all zero: {self:?}")));
        }
        Ok(())
    }
}

/// A partial injection of targets into predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    /// `(prediction, target)` pairs sorted by target index.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions left without a target, ascending.
    pub unmatched: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        let m = cost.shape()[1];
        self.pairs.iter().map(|&(p, t)| cost.data()[p * m + t]).sum()
    }
}

/// Minimum-cost assignment of every target (column) to a distinct
/// prediction (row) of `cost: [n, m]`, `n ≥ m`, via Kuhn–Munkres with
/// row/column potentials in `O(m² n)`.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    let (n, m) = match cost.shape() {
        [n, m] => (*n, *m),
        [n] => (*n, 0),
        s => return Err(Error::shape("hungarian", format!("cost matrix shape {s:?}"))),
    };
    if n < m {
        return Err(Error::Validation(format!("{m} targets but only {n} predictions")));
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite("hungarian cost".into()));
    }
    if m == 0 {
        return Ok(Assignment { pairs: Vec::new(), unmatched: (0..n).collect() });
    }
    // Targets are the "rows" of the classic formulation, predictions its
    // "columns"; both are 1-based with slot 0 as the virtual start.
    let c = |t: usize, p: usize| cost.data()[(p - 1) * m + (t - 1)];
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for t in 1..=m {
        owner[0] = t;
        let mut p0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[p0] = true;
            let t0 = owner[p0];
            let mut delta = f64::INFINITY;
            let mut p1 = 0;
            for p in 1..=n {
                if used[p] {
                    continue;
                }
                let cur = c(t0, p) - u[t0] - v[p];
                if cur < minv[p] {
                    minv[p] = cur;
                    way[p] = p0;
                }
                if minv[p] < delta {
                    delta = minv[p];
                    p1 = p;
                }
            }
            for p in 0..=n {
                if used[p] {
                    u[owner[p]] += delta;
                    v[p] -= delta;
                } else {
                    minv[p] -= delta;
                }
            }
            p0 = p1;
            if owner[p0] == 0 {
                break;
            }
        }
        loop {
            let p1 = way[p0];
            owner[p0] = owner[p1];
            p0 = p1;
            if p0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n).filter(|&p| owner[p] != 0).map(|p| (p - 1, owner[p] - 1)).collect();
    pairs.sort_by_key(|&(_, t)| t);
    let unmatched = (1..=n).filter(|&p| owner[p] == 0).map(|p| p - 1).collect();
    Ok(Assignment { pairs, unmatched })
}

/// GIoU of two `(cx, cy, w, h)` boxes and its gradient w.r.t. the first.
pub fn giou_cxcywh_with_grad(p: &TargetBox, g: &TargetBox) -> (f64, [f64; 4]) {
    let (x1, x2, y1, y2) = (p[0] - 0.5 * p[2], p[0] + 0.5 * p[2], p[1] - 0.5 * p[3], p[1] + 0.5 * p[3]);
    let (gx1, gx2, gy1, gy2) = (g[0] - 0.5 * g[2], g[0] + 0.5 * g[2], g[1] - 0.5 * g[3], g[1] + 0.5 * g[3]);
    let iw = x2.min(gx2) - x1.max(gx1);
    let ih = y2.min(gy2) - y1.max(gy1);
    let (iw_pos, ih_pos) = (iw > 0.0, ih > 0.0);
    let inter = iw.max(0.0) * ih.max(0.0);
    let area_p = p[2] * p[3];
    let union = area_p + g[2] * g[3] - inter;
    let hw = x2.max(gx2) - x1.min(gx1);
    let hh = y2.max(gy2) - y1.min(gy1);
    let hull = hw * hh;
    if union <= 0.0 || hull <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union - (hull - union) / hull;

    let d_inter = 1.0 / union + inter / (union * union) - 1.0 / hull;
    let d_area = -inter / (union * union) + 1.0 / hull;
    let d_hull = -union / (hull * hull);

    // Partials w.r.t. corners.
    let (mut dx1, mut dx2, mut dy1, mut dy2) = (0.0, 0.0, 0.0, 0.0);
    if iw_pos && ih_pos {
        if x2 < gx2 {
            dx2 += d_inter * ih;
        }
        if x1 > gx1 {
            dx1 -= d_inter * ih;
        }
        if y2 < gy2 {
            dy2 += d_inter * iw;
        }
        if y1 > gy1 {
            dy1 -= d_inter * iw;
        }
    }
    if x2 > gx2 {
        dx2 += d_hull * hh;
    }
    if x1 < gx1 {
        dx1 -= d_hull * hh;
    }
    if y2 > gy2 {
        dy2 += d_hull * hw;
    }
    if y1 < gy1 {
        dy1 -= d_hull * hw;
    }
    let grad = [
        dx1 + dx2,
        dy1 + dy2,
        0.5 * (dx2 - dx1) + d_area * p[3],
        0.5 * (dy2 - dy1) + d_area * p[2],
    ];
    (value, grad)
}

fn pred_box(set: &DetectionSet, q: usize) -> TargetBox {
    let r = set.boxes.row(q);
    [r[0], r[1], r[2], r[3]]
}

/// Matching cost `[Q, m]`:
/// `w_cls·(−objectness) + w_l1·‖b − g‖₁ + w_giou·(1 − GIoU(b, g))`.
pub fn match_cost(preds: &DetectionSet, targets: &[TargetBox], w: &LossWeights) -> Tensor {
    let q = preds.len();
    let m = targets.len();
    let mut data = Vec::with_capacity(q * m);
    for i in 0..q {
        let b = pred_box(preds, i);
        let obj = preds.objectness.data()[i];
        for g in targets {
            let l1: f64 = b.iter().zip(g).map(|(a, c)| (a - c).abs()).sum();
            let (gi, _) = giou_cxcywh_with_grad(&b, g);
            data.push(w.cls * -obj + w.l1 * l1 + w.giou * (1.0 - gi));
        }
    }
    if m == 0 {
        return Tensor::zeros(&[q]);
    }
    Tensor::new(vec![q, m], data).expect("cost shape")
}

/// Loss components of one detection set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.cls + self.l1 + self.giou
    }
}

/// Gradients of the loss w.r.t. one set's boxes `[Q, 4]` and objectness logits `[Q]`.
#[derive(Clone, Debug)]
pub struct SetGrad {
    pub boxes: Tensor,
    pub logits: Tensor,
}

/// Summed loss over all detection sets with per-set detail.
#[derive(Clone, Debug)]
pub struct SetLoss {
    pub total: f64,
    pub per_set: Vec<LossTerms>,
    pub grads: Vec<SetGrad>,
    pub assignments: Vec<Assignment>,
}

/// Loss and gradients of one set under a fixed assignment. Box terms are
/// normalized by the target count; BCE is averaged over predictions.
pub fn single_set_loss(set: &DetectionSet, targets: &[TargetBox], assignment: &Assignment, w: &LossWeights) -> (LossTerms, SetGrad) {
    let q = set.len();
    let norm = targets.len().max(1) as f64;
    let mut labels = vec![0.0; q];
    for &(p, _) in &assignment.pairs {
        labels[p] = 1.0;
    }
    let mut terms = LossTerms::default();
    let mut d_logits = vec![0.0; q];
    for i in 0..q {
        let z = set.logits.data()[i];
        // softplus(z) − y·z, computed stably.
        let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
        terms.cls += w.cls * (softplus - labels[i] * z) / q as f64;
        d_logits[i] = w.cls * (sigmoid(z) - labels[i]) / q as f64;
    }
    let mut d_boxes = vec![0.0; q * 4];
    for &(p, t) in &assignment.pairs {
        let b = pred_box(set, p);
        let g = &targets[t];
        for k in 0..4 {
            let diff = b[k] - g[k];
            terms.l1 += w.l1 * diff.abs() / norm;
            d_boxes[p * 4 + k] += w.l1 * diff.signum() * f64::from(diff != 0.0) / norm;
        }
        let (gi, dg) = giou_cxcywh_with_grad(&b, g);
        terms.giou += w.giou * (1.0 - gi) / norm;
        for k in 0..4 {
            d_boxes[p * 4 + k] -= w.giou * dg[k] / norm;
        }
    }
    let grad = SetGrad {
        boxes: Tensor::new(vec![q, 4], d_boxes).expect("box grad"),
        logits: Tensor::new(vec![q], d_logits).expect("logit grad"),
    };
    (terms, grad)
}

/// Matches each set independently and sums the losses.
pub fn set_loss(outputs: &[DetectionSet], targets: &[TargetBox], w: &LossWeights) -> Result<SetLoss> {
    set_loss_masked(outputs, targets, w, &vec![true; outputs.len()])
}

/// Like [`set_loss`], but only sets with `include[f]` contribute.
pub fn set_loss_masked(outputs: &[DetectionSet], targets: &[TargetBox], w: &LossWeights, include: &[bool]) -> Result<SetLoss> {
    w.validate()?;
    if outputs.is_empty() || include.len() != outputs.len() {
        return Err(Error::Config(format!("{} detection sets, {} include flags", outputs.len(), include.len())));
    }
    let assignments = outputs
        .iter()
        .map(|set| hungarian(&match_cost(set, targets, w)))
        .collect::<Result<Vec<_>>>()?;
    Ok(set_loss_with_assignments(outputs, targets, w, &assignments, include))
}

/// Loss under caller-supplied assignments (matching held fixed).
pub fn set_loss_with_assignments(
    outputs: &[DetectionSet],
    targets: &[TargetBox],
    w: &LossWeights,
    assignments: &[Assignment],
    include: &[bool],
) -> SetLoss {
    let mut total = 0.0;
    let mut per_set = Vec::new();
    let mut grads = Vec::new();
    for ((set, a), &inc) in outputs.iter().zip(assignments).zip(include) {
        let (mut terms, mut grad) = single_set_loss(set, targets, a, w);
        if !inc {
            terms = LossTerms::default();
            grad.boxes.scale(0.0);
            grad.logits.scale(0.0);
        }
        total += terms.total();
        per_set.push(terms);
        grads.push(grad);
    }
    SetLoss { total, per_set, grads, assignments: assignments.to_vec() }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{giou, BoxFormat, Rect};
    use crate::numerics::kernels::sigmoid;
    use crate::oracle;

    fn set_from(boxes: &[TargetBox], logits: &[f64]) -> DetectionSet {
        DetectionSet::from_logits(
            Tensor::new(vec![boxes.len(), 4], boxes.concat()).unwrap(),
            Tensor::vector(logits.to_vec()),
        )
    }

    fn random_set(rng: &mut ChaCha8Rng, q: usize) -> DetectionSet {
        let boxes: Vec<TargetBox> = (0..q)
            .map(|_| [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4)])
            .collect();
        let logits: Vec<f64> = (0..q).map(|_| rng.gen_range(-3.0..3.0)).collect();
        set_from(&boxes, &logits)
    }

    fn random_targets(rng: &mut ChaCha8Rng, m: usize) -> Vec<TargetBox> {
        (0..m)
            .map(|_| [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4)])
            .collect()
    }

    #[test]
    fn hungarian_examples() {
        let a = hungarian(&Tensor::new(vec![1, 1], vec![5.0]).unwrap()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        let cost = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let a = hungarian(&cost).unwrap();
        let mut pairs = a.pairs.clone();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost(&cost), 4.0);
        assert!(a.unmatched.is_empty());
    }

    #[test]
    fn hungarian_rejects_more_targets_than_predictions() {
        let cost = Tensor::zeros(&[2, 3]);
        assert!(matches!(hungarian(&cost), Err(Error::Validation(_))));
    }

    #[test]
    fn hungarian_six_by_six_integer_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let cost = Tensor::from_fn(&[6, 6], |_| rng.gen_range(0..20) as f64);
            let a = hungarian(&cost).unwrap();
            let (best, _) = oracle::assignment_brute_force(&cost);
            assert_eq!(a.total_cost(&cost), best);
        }
    }

    #[test]
    fn match_cost_examples() {
        let w = LossWeights { cls: 1.0, l1: 1.0, giou: 1.0 };
        let g = [0.5, 0.5, 0.2, 0.2];
        // Objectness 1 in the limit: use a large logit and compare to −1.
        let set = set_from(&[g], &[40.0]);
        let c = match_cost(&set, &[g], &w);
        assert!((c.data()[0] + 1.0).abs() < 1e-12);

        let set = set_from(&[[0.5, 0.5, 0.2, 0.2], [0.1, 0.3, 0.1, 0.1]], &[0.3, -1.0]);
        let targets = [[0.5, 0.5, 0.4, 0.4], [0.2, 0.2, 0.2, 0.2]];
        let c = match_cost(&set, &targets, &LossWeights { cls: 1.0, l1: 0.0, giou: 0.0 });
        for q in 0..2 {
            for t in 0..2 {
                assert_eq!(c.at2(q, t), -set.objectness.data()[q]);
            }
        }
        let c = match_cost(&set, &targets, &LossWeights { cls: 0.0, l1: 1.0, giou: 0.0 });
        assert!((c.at2(0, 0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn giou_gradient_matches_corner_form_and_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p: TargetBox = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5)];
            let g: TargetBox = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5)];
            let (v, grad) = giou_cxcywh_with_grad(&p, &g);
            let rp = Rect::from_format(p, BoxFormat::Cxcywh).unwrap();
            let rg = Rect::from_format(g, BoxFormat::Cxcywh).unwrap();
            assert!((v - giou(&rp, &rg)).abs() < 1e-12);
            for k in 0..4 {
                let h = 1e-6;
                let (mut a, mut b) = (p, p);
                a[k] += h;
                b[k] -= h;
                let fd = (giou_cxcywh_with_grad(&a, &g).0 - giou_cxcywh_with_grad(&b, &g).0) / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-5, "k={k} fd={fd} an={}", grad[k]);
            }
        }
    }

    #[test]
    fn perfect_predictions_have_vanishing_loss() {
        let targets = [[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.1]];
        let set = set_from(&[targets[1], [0.5, 0.5, 0.1, 0.1], targets[0]], &[60.0, -60.0, 60.0]);
        let loss = set_loss(&[set], &targets, &LossWeights::default()).unwrap();
        assert!(loss.per_set[0].l1.abs() < 1e-15);
        assert!(loss.per_set[0].giou.abs() < 1e-15);
        assert!(loss.per_set[0].cls < 1e-20);
        assert_eq!(loss.assignments[0].pairs, vec![(2, 0), (0, 1)]);
    }

    #[test]
    fn identical_sets_add_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_set(&mut rng, 6);
        let targets = random_targets(&mut rng, 3);
        let w = LossWeights::default();
        let one = set_loss(std::slice::from_ref(&set), &targets, &w).unwrap().total;
        let six = set_loss(&vec![set; 6], &targets, &w).unwrap().total;
        assert!((six - 6.0 * one).abs() < 1e-12);
    }

    #[test]
    fn zero_targets_only_penalize_objectness() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = random_set(&mut rng, 4);
        let loss = set_loss(std::slice::from_ref(&set), &[], &LossWeights::default()).unwrap();
        assert_eq!(loss.per_set[0].l1, 0.0);
        assert_eq!(loss.per_set[0].giou, 0.0);
        let expect: f64 = set.logits.data().iter().map(|&z| 2.0 * -(1.0 - sigmoid(z)).ln() / 4.0).sum();
        assert!((loss.total - expect).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_loss() {
        let w = LossWeights::default();
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rng.gen_range(1..7);
            let m = rng.gen_range(0..=q);
            let sets: Vec<DetectionSet> = (0..3).map(|_| random_set(&mut rng, q)).collect();
            let targets = random_targets(&mut rng, m);
            let loss = set_loss(&sets, &targets, &w).unwrap();
            let reference = oracle::set_loss_brute_force(&sets, &targets, &w);
            assert!((loss.total - reference).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences_with_fixed_matching() {
        let w = LossWeights::default();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
            let set = random_set(&mut rng, 5);
            let targets = random_targets(&mut rng, 3);
            let base = set_loss(std::slice::from_ref(&set), &targets, &w).unwrap();
            let fixed = base.assignments.clone();
            let eval = |s: &DetectionSet| set_loss_with_assignments(std::slice::from_ref(s), &targets, &w, &fixed, &[true]).total;
            let h = 1e-6;
            for i in 0..20 {
                let mut a = set.clone();
                let mut b = set.clone();
                a.boxes.data_mut()[i] += h;
                b.boxes.data_mut()[i] -= h;
                let fd = (eval(&a) - eval(&b)) / (2.0 * h);
                let an = base.grads[0].boxes.data()[i];
                assert!((fd - an).abs() / an.abs().max(1.0) < 1e-4, "box {i}: {fd} vs {an}");
            }
            for i in 0..5 {
                let mut a = set.clone();
                let mut b = set.clone();
                a.logits.data_mut()[i] += h;
                b.logits.data_mut()[i] -= h;
                let fd = (eval(&a) - eval(&b)) / (2.0 * h);
                let an = base.grads[0].logits.data()[i];
                assert!((fd - an).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masking_a_set_removes_its_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let sets: Vec<DetectionSet> = (0..6).map(|_| random_set(&mut rng, 5)).collect();
        let targets = random_targets(&mut rng, 2);
        let w = LossWeights::default();
        let full = set_loss(&sets, &targets, &w).unwrap();
        for f in 0..6 {
            let mut include = vec![true; 6];
            include[f] = false;
            let masked = set_loss_masked(&sets, &targets, &w, &include).unwrap();
            assert!((full.total - masked.total - full.per_set[f].total()).abs() < 1e-12);
            assert!(masked.total < full.total);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn hungarian_is_optimal(seed in 0u64..1_000_000, n in 1usize..=7, extra in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = n.saturating_sub(extra).max(1);
            let cost = Tensor::from_fn(&[n, m], |_| rng.gen_range(0..10) as f64);
            let a = hungarian(&cost).unwrap();
            let (best, _) = oracle::assignment_brute_force(&cost);
            prop_assert_eq!(a.total_cost(&cost), best);
            prop_assert_eq!(a.pairs.len(), m);
            let mut preds: Vec<usize> = a.pairs.iter().map(|p| p.0).chain(a.unmatched.iter().copied()).collect();
            preds.sort();
            prop_assert_eq!(preds, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn loss_is_permutation_invariant(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, 6);
            let targets = random_targets(&mut rng, 4);
            let w = LossWeights::default();
            let base = set_loss(std::slice::from_ref(&set), &targets, &w).unwrap().total;
            let mut t2 = targets.clone();
            t2.rotate_left(1);
            t2.swap(0, 2);
            let perm = [3usize, 0, 5, 1, 4, 2];
            let boxes: Vec<TargetBox> = perm.iter().map(|&i| {
                let r = set.boxes.row(i);
                [r[0], r[1], r[2], r[3]]
            }).collect();
            let logits: Vec<f64> = perm.iter().map(|&i| set.logits.data()[i]).collect();
            let s2 = set_from(&boxes, &logits);
            let other = set_loss(&[s2], &t2, &w).unwrap().total;
            prop_assert!((base - other).abs() < 1e-12);
        }
    }
}
