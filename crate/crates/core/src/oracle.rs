//! Slow reference implementations.
//!
//! Each function here recomputes something the fast paths compute, using the
//! most literal algorithm available (exhaustive enumeration, explicit loops,
//! flood fill). They share no code with the implementations they check and
//! back both the test suite and the `oracle` CLI subcommand.

use std::collections::VecDeque;

use crate::geometry::{Detection, Rect};
use crate::numerics::{ParamStore, Tensor};

fn iou_plain(a: &Rect, b: &Rect) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// NMS by repeated selection: take the best remaining detection (earliest on
/// ties), discard everything overlapping it above `t`, repeat.
pub fn nms_reference(dets: &[Detection], t: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        for i in 0..dets.len() {
            if alive[i] && iou_plain(&dets[b].rect, &dets[i].rect) > t {
                alive[i] = false;
            }
        }
        out.push(dets[b].clone());
    }
    out
}

/// Deformable attention written as nested loops over queries, heads,
/// levels, points and the four bilinear neighbours.
pub fn msda_reference(
    queries: &Tensor,
    refs: &[crate::msda::ReferencePoint],
    maps: &[Tensor],
    params: &ParamStore,
    prefix: &str,
    heads: usize,
    points: usize,
) -> Tensor {
    let p = |n: &str| params.get(&format!("{prefix}.{n}")).expect("msda param").data().to_vec();
    let (vw, vb, ow, ob, aw, ab, pw, pb) =
        (p("value.w"), p("value.b"), p("offset.w"), p("offset.b"), p("attn.w"), p("attn.b"), p("output.w"), p("output.b"));
    let q_count = queries.shape()[0];
    let c = queries.shape()[1];
    let nl = maps.len();
    let dh = c / heads;
    let slots = heads * nl * points;
    let project = |x: &[f64], w: &[f64], b: &[f64], dout: usize| -> Vec<f64> {
        (0..dout).map(|j| b[j] + (0..x.len()).map(|k| x[k] * w[k * dout + j]).sum::<f64>()).collect()
    };
    // Value-project every pixel of every level.
    let values: Vec<Vec<Vec<f64>>> = maps
        .iter()
        .map(|m| {
            let (h, w) = (m.shape()[0], m.shape()[1]);
            (0..h * w).map(|i| project(&m.data()[i * c..(i + 1) * c], &vw, &vb, c)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(q_count * c);
    for q in 0..q_count {
        let x = queries.row(q);
        let off = project(x, &ow, &ob, slots * 2);
        let logits = project(x, &aw, &ab, slots);
        let mut head_out = vec![0.0; c];
        for m in 0..heads {
            let group = &logits[m * nl * points..(m + 1) * nl * points];
            let mx = group.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = group.iter().map(|g| (g - mx).exp()).sum();
            for l in 0..nl {
                let (h, w) = (maps[l].shape()[0], maps[l].shape()[1]);
                for k in 0..points {
                    let s = (m * nl + l) * points + k;
                    let a = (logits[s] - mx).exp() / z;
                    let px = refs[q].x * w as f64 + off[2 * s] - 0.5;
                    let py = refs[q].y * h as f64 + off[2 * s + 1] - 0.5;
                    let (x0, y0) = (px.floor(), py.floor());
                    for (dy, dx) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
                        let (cx, cy) = (x0 + dx, y0 + dy);
                        if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
                            continue;
                        }
                        let wx = 1.0 - (px - cx).abs();
                        let wy = 1.0 - (py - cy).abs();
                        let v = &values[l][cy as usize * w + cx as usize];
                        for ch in 0..dh {
                            head_out[m * dh + ch] += a * wx * wy * v[m * dh + ch];
                        }
                    }
                }
            }
        }
        out.extend(project(&head_out, &pw, &pb, c));
    }
    Tensor::new(vec![q_count, c], out).expect("reference output")
}

/// Labels foreground pixels by breadth-first flood fill; returns the label
/// grid (0 = background, components numbered in raster order of their first
/// pixel) and the component count.
pub fn flood_fill_labels(fg: &[bool], height: usize, width: usize, eight: bool) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; fg.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = ((p / width) as isize, (p % width) as isize);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    if (dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                        continue;
                    }
                    let n = nr as usize * width + nc as usize;
                    if fg[n] && labels[n] == 0 {
                        labels[n] = next;
                        queue.push_back(n);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Every injection of `m` targets (columns) into `n ≥ m` predictions (rows):
/// the minimum total cost and the lexicographically first optimal
/// `(prediction, target)` pair list, ordered by target.
pub fn assignment_brute_force(cost: &Tensor) -> (f64, Vec<(usize, usize)>) {
    let n = cost.shape()[0];
    let m = if cost.rank() == 2 { cost.shape()[1] } else { 0 };
    let mut best = (f64::INFINITY, Vec::new());
    let mut chosen = Vec::with_capacity(m);
    let mut used = vec![false; n];
    fn rec(
        t: usize,
        m: usize,
        n: usize,
        cost: &Tensor,
        acc: f64,
        chosen: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if t == m {
            if acc < best.0 {
                *best = (acc, chosen.iter().enumerate().map(|(t, &p)| (p, t)).collect());
            }
            return;
        }
        for p in 0..n {
            if !used[p] {
                used[p] = true;
                chosen.push(p);
                rec(t + 1, m, n, cost, acc + cost.data()[p * m + t], chosen, used, best);
                chosen.pop();
                used[p] = false;
            }
        }
    }
    if m == 0 {
        return (0.0, Vec::new());
    }
    rec(0, m, n, cost, 0.0, &mut chosen, &mut used, &mut best);
    best
}

fn giou_plain(p: &[f64; 4], g: &[f64; 4]) -> f64 {
    let a = Rect { x_min: p[0] - p[2] / 2.0, y_min: p[1] - p[3] / 2.0, x_max: p[0] + p[2] / 2.0, y_max: p[1] + p[3] / 2.0 };
    let b = Rect { x_min: g[0] - g[2] / 2.0, y_min: g[1] - g[3] / 2.0, x_max: g[0] + g[2] / 2.0, y_max: g[1] + g[3] / 2.0 };
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let union = p[2] * p[3] + g[2] * g[3] - iw * ih;
    let hull = (a.x_max.max(b.x_max) - a.x_min.min(b.x_min)) * (a.y_max.max(b.y_max) - a.y_min.min(b.y_min));
    iw * ih / union - (hull - union) / hull
}

/// Set loss recomputed by enumerating every injection for the matching and
/// evaluating BCE, L1 and GIoU from their textbook definitions.
pub fn set_loss_brute_force(
    sets: &[crate::model::DetectionSet],
    targets: &[[f64; 4]],
    w: &crate::matching_losses::LossWeights,
) -> f64 {
    let mut total = 0.0;
    for set in sets {
        let q = set.boxes.shape()[0];
        let m = targets.len();
        let b = |i: usize| -> [f64; 4] { [set.boxes.data()[4 * i], set.boxes.data()[4 * i + 1], set.boxes.data()[4 * i + 2], set.boxes.data()[4 * i + 3]] };
        let prob = |i: usize| 1.0 / (1.0 + (-set.logits.data()[i]).exp());
        let mut cost = vec![0.0; q * m.max(1)];
        for i in 0..q {
            for (t, g) in targets.iter().enumerate() {
                let l1: f64 = (0..4).map(|k| (b(i)[k] - g[k]).abs()).sum();
                cost[i * m + t] = -w.cls * prob(i) + w.l1 * l1 + w.giou * (1.0 - giou_plain(&b(i), g));
            }
        }
        let pairs = if m == 0 {
            Vec::new()
        } else {
            assignment_brute_force(&Tensor::new(vec![q, m], cost).expect("cost")).1
        };
        let norm = m.max(1) as f64;
        for i in 0..q {
            let y = if pairs.iter().any(|&(p, _)| p == i) { 1.0 } else { 0.0 };
            let p = prob(i);
            total += w.cls * -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()) / q as f64;
        }
        for &(p, t) in &pairs {
            let l1: f64 = (0..4).map(|k| (b(p)[k] - targets[t][k]).abs()).sum();
            total += w.l1 * l1 / norm + w.giou * (1.0 - giou_plain(&b(p), &targets[t])) / norm;
        }
    }
    total
}

/// Average precision by enumerating every score-threshold operating point:
/// for each distinct score `t`, the detections scoring at least `t` are
/// matched from scratch, giving one `(recall, precision)` point. The area
/// sums each recall increment times the best precision at that recall or
/// beyond. Assumes distinct scores and a single image.
pub fn ap_brute_force(dets: &[Detection], gts: &[crate::geometry::GroundTruthBox], thresh: f64) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let mut points = Vec::new();
    for &t in &thresholds {
        let mut chosen: Vec<&Detection> = dets.iter().filter(|d| d.score >= t).collect();
        chosen.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut taken = vec![false; gts.len()];
        let mut tp = 0;
        for d in &chosen {
            let mut best = None;
            let mut best_iou = thresh;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou_plain(&d.rect, &gt.rect);
                if !taken[g] && v > best_iou {
                    best = Some(g);
                    best_iou = v;
                }
            }
            if let Some(g) = best {
                taken[g] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / chosen.len() as f64));
    }
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.dedup();
    let mut prev = 0.0;
    let mut area = 0.0;
    for r in recalls {
        let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        area += (r - prev) * best;
        prev = r;
    }
    area
}

/// Pool, NMS by repeated selection, sort, truncate.
pub fn combine_reference(sources: &[Vec<Detection>], nms_thresh: f64, top_n: usize) -> Vec<Detection> {
    let mut pooled = Vec::new();
    for s in sources {
        pooled.extend(s.iter().cloned());
    }
    let mut kept = nms_reference(&pooled, nms_thresh);
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(top_n);
    kept
}
