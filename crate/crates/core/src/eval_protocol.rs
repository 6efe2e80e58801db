//! Class-agnostic evaluation: query combination, AP / Recall@N, size
//! buckets, per-category recall and tiled inference.
//!
//! Matching is greedy in score order, one-to-one, and never crosses images,
//! so every image can be matched independently ([`evaluate_image`]) and the
//! results reduced in image-id order ([`reduce`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms_class_agnostic, score_order, Detection, GroundTruthBox, Rect};
use crate::numerics::Tensor;

/// Interpolation used for the area under the precision–recall curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// How recall is aggregated over images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallPooling {
    /// Matched GT over all GT in the dataset.
    #[default]
    Pooled,
    /// Mean of per-image recall over images that have GT.
    PerImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub top_n: usize,
    /// Keep only detections scoring strictly above this.
    pub score_thresh: Option<f64>,
    pub nms_thresh: f64,
    pub interpolation: ApInterpolation,
    pub recall_pooling: RecallPooling,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            top_n: 50,
            score_thresh: None,
            nms_thresh: 0.5,
            interpolation: ApInterpolation::AllPoint,
            recall_pooling: RecallPooling::Pooled,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.iou_thresh) || !unit(self.nms_thresh) || self.score_thresh.is_some_and(|s| !unit(s)) {
            return Err(Error::Config(format!("thresholds must lie in [0, 1]: {self:?}")));
        }
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be at least 1".into()));
        }
        Ok(())
    }
}

/// Precision–recall curve with its area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` after each detection in score order.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    pub num_gt: usize,
}

/// Area-fraction bounds separating small, medium and large objects.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub small: f64,
    pub large: f64,
}

impl Default for SizeBuckets {
    fn default() -> Self {
        SizeBuckets { small: 0.05, large: 0.20 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBuckets {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.small && self.small < self.large && self.large < 1.0) {
            return Err(Error::Config(format!("size bounds must satisfy 0 < small < large < 1: {self:?}")));
        }
        Ok(())
    }

    /// `[0, small)` small, `[small, large]` medium, `(large, 1]` large.
    pub fn classify(&self, area_fraction: f64) -> SizeBucket {
        if area_fraction < self.small {
            SizeBucket::Small
        } else if area_fraction <= self.large {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

/// Matched / total counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallCount {
    pub matched: usize,
    pub total: usize,
}

impl RecallCount {
    /// Recall, defined as 1 when there is nothing to recall.
    pub fn recall(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }

    fn add(&mut self, other: RecallCount) {
        self.matched += other.matched;
        self.total += other.total;
    }
}

/// Greedy one-to-one matching result.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// Per detection (input order): index of the matched GT.
    pub det_match: Vec<Option<usize>>,
    /// Per GT: index of the matching detection.
    pub gt_match: Vec<Option<usize>>,
}

/// Detections in score order (ties by input order) each take the
/// highest-IoU unmatched GT of the same image if that IoU exceeds `thresh`.
/// Equal IoUs go to the earlier GT.
pub fn greedy_match(dets: &[Detection], gts: &[GroundTruthBox], thresh: f64) -> Matching {
    let mut det_match = vec![None; dets.len()];
    let mut gt_match = vec![None; gts.len()];
    for d in score_order(dets.iter().map(|d| d.score)) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_match[g].is_some() || gt.image_id != dets[d].image_id {
                continue;
            }
            let v = iou(&dets[d].rect, &gt.rect);
            if v > thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            det_match[d] = Some(g);
            gt_match[g] = Some(d);
        }
    }
    Matching { det_match, gt_match }
}

/// Best `n` detections by score (ties by input order), in score order.
pub fn top_n(dets: &[Detection], n: usize) -> Vec<Detection> {
    score_order(dets.iter().map(|d| d.score)).into_iter().take(n).map(|i| dets[i].clone()).collect()
}

/// Groups detections by image id, preserving order within each image.
pub fn by_image<T: Clone>(items: &[T], id: impl Fn(&T) -> u64) -> BTreeMap<u64, Vec<T>> {
    let mut out: BTreeMap<u64, Vec<T>> = BTreeMap::new();
    for it in items {
        out.entry(id(it)).or_default().push(it.clone());
    }
    out
}

/// Applies the optional score threshold, then keeps the top `cfg.top_n`
/// detections of every image. Output is grouped by image id.
pub fn apply_protocol(dets: &[Detection], cfg: &EvalConfig) -> Vec<Detection> {
    let kept: Vec<Detection> = dets.iter().filter(|d| cfg.score_thresh.is_none_or(|t| d.score > t)).cloned().collect();
    by_image(&kept, |d| d.image_id).values().flat_map(|v| top_n(v, cfg.top_n)).collect()
}

/// Pools all sources for one image, suppresses duplicates
/// class-agnostically, and keeps the `top_n` best.
pub fn combine_query_detections(per_source: &[Vec<Detection>], cfg: &EvalConfig) -> Vec<Detection> {
    let pooled: Vec<Detection> = per_source.iter().flatten().cloned().collect();
    let kept = nms_class_agnostic(&pooled, cfg.nms_thresh);
    top_n(&kept, cfg.top_n)
}

fn interpolate(points: &[(f64, f64)], kind: ApInterpolation) -> f64 {
    match kind {
        ApInterpolation::AllPoint => {
            let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut prev = 0.0;
            let mut area = 0.0;
            for (&(r, _), p) in points.iter().zip(envelope) {
                area += (r - prev) * p;
                prev = r;
            }
            area
        }
        ApInterpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    points.iter().filter(|p| p.0 >= t).map(|p| p.1).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Curve from true-positive flags already in score order.
pub fn curve_from_flags(flags: &[bool], num_gt: usize, kind: ApInterpolation) -> PrCurve {
    let mut tp = 0;
    let mut points = Vec::with_capacity(flags.len());
    for (k, &hit) in flags.iter().enumerate() {
        tp += usize::from(hit);
        let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
        points.push((recall, tp as f64 / (k + 1) as f64));
    }
    let ap = match (num_gt, flags.len()) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => interpolate(&points, kind),
    };
    PrCurve { points, ap, tp, fp: flags.len() - tp, num_gt }
}

/// Class-agnostic average precision. Detections should already be
/// truncated per protocol (see [`apply_protocol`]).
pub fn average_precision(dets: &[Detection], gts: &[GroundTruthBox], cfg: &EvalConfig) -> PrCurve {
    let m = greedy_match(dets, gts, cfg.iou_thresh);
    let flags: Vec<bool> = score_order(dets.iter().map(|d| d.score)).into_iter().map(|i| m.det_match[i].is_some()).collect();
    curve_from_flags(&flags, gts.len(), cfg.interpolation)
}

fn recall_count(dets: &[Detection], gts: &[GroundTruthBox], iou_thresh: f64, n: usize) -> BTreeMap<u64, RecallCount> {
    let mut out: BTreeMap<u64, RecallCount> = BTreeMap::new();
    let gt_by = by_image(gts, |g| g.image_id);
    let det_by = by_image(dets, |d| d.image_id);
    for (id, g) in &gt_by {
        let top = det_by.get(id).map(|d| top_n(d, n)).unwrap_or_default();
        let m = greedy_match(&top, g, iou_thresh);
        out.insert(*id, RecallCount { matched: m.gt_match.iter().flatten().count(), total: g.len() });
    }
    out
}

fn pool(counts: &BTreeMap<u64, RecallCount>, pooling: RecallPooling) -> f64 {
    match pooling {
        RecallPooling::Pooled => {
            let mut c = RecallCount::default();
            counts.values().for_each(|v| c.add(*v));
            c.recall()
        }
        RecallPooling::PerImage => {
            let with_gt: Vec<f64> = counts.values().filter(|c| c.total > 0).map(|c| c.recall()).collect();
            if with_gt.is_empty() {
                1.0
            } else {
                with_gt.iter().sum::<f64>() / with_gt.len() as f64
            }
        }
    }
}

/// Fraction of GT matched by the top-`n` detections of each image.
pub fn recall_at_n(dets: &[Detection], gts: &[GroundTruthBox], cfg: &EvalConfig, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("recall_at_n needs n ≥ 1".into()));
    }
    Ok(pool(&recall_count(dets, gts, cfg.iou_thresh, n), cfg.recall_pooling))
}

/// Recall at each `n` of an ascending list.
pub fn recall_curve(dets: &[Detection], gts: &[GroundTruthBox], cfg: &EvalConfig, ns: &[usize]) -> Result<Vec<(usize, f64)>> {
    if ns.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(format!("recall curve points must ascend: {ns:?}")));
    }
    ns.iter().map(|&n| Ok((n, recall_at_n(dets, gts, cfg, n)?))).collect()
}

/// Per-bucket recall counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketRecall {
    pub small: RecallCount,
    pub medium: RecallCount,
    pub large: RecallCount,
}

impl BucketRecall {
    pub fn get_mut(&mut self, b: SizeBucket) -> &mut RecallCount {
        match b {
            SizeBucket::Small => &mut self.small,
            SizeBucket::Medium => &mut self.medium,
            SizeBucket::Large => &mut self.large,
        }
    }

    pub fn recalls(&self) -> (f64, f64, f64) {
        (self.small.recall(), self.medium.recall(), self.large.recall())
    }
}

/// Area fraction of a GT box within its image.
fn area_fraction(g: &GroundTruthBox, sizes: &BTreeMap<u64, (f64, f64)>) -> Result<f64> {
    let (w, h) = sizes.get(&g.image_id).ok_or_else(|| Error::Validation(format!("no size for image {}", g.image_id)))?;
    Ok(g.rect.area() / (w * h))
}

/// Recall of the top `cfg.top_n` detections split by GT size. Matching is
/// done once over all GT; buckets only partition the result.
pub fn size_bucket_recall(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    sizes: &BTreeMap<u64, (f64, f64)>,
    buckets: &SizeBuckets,
    cfg: &EvalConfig,
) -> Result<BucketRecall> {
    buckets.validate()?;
    let mut out = BucketRecall::default();
    for (id, g) in by_image(gts, |g| g.image_id) {
        let d: Vec<Detection> = dets.iter().filter(|d| d.image_id == id).cloned().collect();
        let m = greedy_match(&top_n(&d, cfg.top_n), &g, cfg.iou_thresh);
        for (gt, hit) in g.iter().zip(&m.gt_match) {
            let c = out.get_mut(buckets.classify(area_fraction(gt, sizes)?));
            c.total += 1;
            c.matched += usize::from(hit.is_some());
        }
    }
    Ok(out)
}

/// Recall per GT category of the top `cfg.top_n` class-agnostic
/// detections. Categories without GT are absent.
pub fn recall_by_category(dets: &[Detection], gts: &[GroundTruthBox], cfg: &EvalConfig) -> BTreeMap<u64, f64> {
    let mut counts: BTreeMap<u64, RecallCount> = BTreeMap::new();
    for (id, g) in by_image(gts, |g| g.image_id) {
        let d: Vec<Detection> = dets.iter().filter(|d| d.image_id == id).cloned().collect();
        let m = greedy_match(&top_n(&d, cfg.top_n), &g, cfg.iou_thresh);
        for (gt, hit) in g.iter().zip(&m.gt_match) {
            let c = counts.entry(gt.category_id).or_default();
            c.total += 1;
            c.matched += usize::from(hit.is_some());
        }
    }
    counts.into_iter().map(|(k, c)| (k, c.recall())).collect()
}

/// Everything the report needs from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub image_id: u64,
    /// `(score, is_tp)` of the protocol-truncated detections in score order.
    pub scored: Vec<(f64, bool)>,
    pub recall_at: Vec<RecallCount>,
    pub buckets: BucketRecall,
    pub per_category: BTreeMap<u64, RecallCount>,
}

/// Evaluates one image. `dets` and `gts` must all belong to `image_id`.
pub fn evaluate_image(
    image_id: u64,
    dets: &[Detection],
    gts: &[GroundTruthBox],
    size: (f64, f64),
    cfg: &EvalConfig,
    buckets: &SizeBuckets,
    ns: &[usize],
) -> ImageEval {
    let dets = apply_protocol(dets, cfg);
    let m = greedy_match(&dets, gts, cfg.iou_thresh);
    let scored = dets.iter().zip(&m.det_match).map(|(d, g)| (d.score, g.is_some())).collect();
    let recall_at = ns
        .iter()
        .map(|&n| {
            let mm = greedy_match(&top_n(&dets, n), gts, cfg.iou_thresh);
            RecallCount { matched: mm.gt_match.iter().flatten().count(), total: gts.len() }
        })
        .collect();
    let mut b = BucketRecall::default();
    let mut per_category: BTreeMap<u64, RecallCount> = BTreeMap::new();
    for (g, hit) in gts.iter().zip(&m.gt_match) {
        let c = b.get_mut(buckets.classify(g.rect.area() / (size.0 * size.1)));
        c.total += 1;
        c.matched += usize::from(hit.is_some());
        let c = per_category.entry(g.category_id).or_default();
        c.total += 1;
        c.matched += usize::from(hit.is_some());
    }
    ImageEval { image_id, scored, recall_at, buckets: b, per_category }
}

/// Dataset-level metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub r50: f64,
    pub tp: usize,
    pub fp: usize,
    pub num_gt: usize,
    /// `(n, recall)` pairs.
    pub curve: Vec<(usize, f64)>,
    /// `(recall, precision)` after each detection in score order.
    pub pr_points: Vec<(f64, f64)>,
    pub buckets: BTreeMap<SizeBucket, RecallCount>,
    pub per_category: BTreeMap<u64, f64>,
}

/// Combines per-image results in image-id order. `ns` must be the list
/// passed to [`evaluate_image`].
pub fn reduce(mut images: Vec<ImageEval>, cfg: &EvalConfig, ns: &[usize]) -> EvalReport {
    images.sort_by_key(|e| e.image_id);
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for e in &images {
        scored.extend(e.scored.iter().copied());
    }
    let order = score_order(scored.iter().map(|s| s.0));
    let flags: Vec<bool> = order.iter().map(|&i| scored[i].1).collect();
    let num_gt: usize = images.iter().map(|e| e.buckets.small.total + e.buckets.medium.total + e.buckets.large.total).sum();
    let pr = curve_from_flags(&flags, num_gt, cfg.interpolation);
    let curve = ns
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let counts: BTreeMap<u64, RecallCount> = images.iter().map(|e| (e.image_id, e.recall_at[k])).collect();
            (n, pool(&counts, cfg.recall_pooling))
        })
        .collect();
    let top: BTreeMap<u64, RecallCount> = images
        .iter()
        .map(|e| {
            let mut c = RecallCount::default();
            e.per_category.values().for_each(|v| c.add(*v));
            (e.image_id, c)
        })
        .collect();
    let mut buckets = BTreeMap::new();
    let mut cats: BTreeMap<u64, RecallCount> = BTreeMap::new();
    for e in &images {
        for (k, c) in [(SizeBucket::Small, e.buckets.small), (SizeBucket::Medium, e.buckets.medium), (SizeBucket::Large, e.buckets.large)] {
            buckets.entry(k).or_insert_with(RecallCount::default).add(c);
        }
        for (k, c) in &e.per_category {
            cats.entry(*k).or_default().add(*c);
        }
    }
    EvalReport {
        ap50: pr.ap,
        r50: pool(&top, cfg.recall_pooling),
        tp: pr.tp,
        fp: pr.fp,
        num_gt,
        curve,
        pr_points: pr.points,
        buckets,
        per_category: cats.into_iter().map(|(k, c)| (k, c.recall())).collect(),
    }
}

/// Sequential convenience over [`evaluate_image`] and [`reduce`]. Every
/// image with GT or detections must have a size.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    sizes: &BTreeMap<u64, (f64, f64)>,
    cfg: &EvalConfig,
    buckets: &SizeBuckets,
    ns: &[usize],
) -> Result<EvalReport> {
    let images = per_image_inputs(dets, gts, sizes)?;
    let evals = images.iter().map(|(id, d, g, s)| evaluate_image(*id, d, g, *s, cfg, buckets, ns)).collect();
    Ok(reduce(evals, cfg, ns))
}

/// Per-image input tuple: id, detections, GT, `(width, height)`.
pub type ImageInput = (u64, Vec<Detection>, Vec<GroundTruthBox>, (f64, f64));

/// Splits detections and GT by image, in image-id order.
pub fn per_image_inputs(dets: &[Detection], gts: &[GroundTruthBox], sizes: &BTreeMap<u64, (f64, f64)>) -> Result<Vec<ImageInput>> {
    cfg_check_ids(dets, gts, sizes)?;
    let mut d = by_image(dets, |d| d.image_id);
    let mut g = by_image(gts, |g| g.image_id);
    Ok(sizes
        .iter()
        .map(|(id, s)| (*id, d.remove(id).unwrap_or_default(), g.remove(id).unwrap_or_default(), *s))
        .collect())
}

fn cfg_check_ids(dets: &[Detection], gts: &[GroundTruthBox], sizes: &BTreeMap<u64, (f64, f64)>) -> Result<()> {
    let missing = dets.iter().map(|d| d.image_id).chain(gts.iter().map(|g| g.image_id)).find(|id| !sizes.contains_key(id));
    match missing {
        Some(id) => Err(Error::Validation(format!("image {id} is not in the image list"))),
        None => Ok(()),
    }
}

/// Grid `(columns, rows)` for splitting an image into `tiles` equal crops.
/// `tiles = a·b` with `b` the largest divisor not above `√tiles` and
/// `a ≤ 2b`; the longer side gets `a`. So 8 gives 4×2 on landscape or
/// square images and 2×4 on portrait ones.
pub fn tile_grid(tiles: usize, width: usize, height: usize) -> Result<(usize, usize)> {
    if tiles == 0 {
        return Err(Error::Config("tile count must be positive".into()));
    }
    let b = (1..=tiles).rev().find(|b| b * b <= tiles && tiles % b == 0).expect("1 divides");
    let a = tiles / b;
    if a > 2 * b {
        return Err(Error::Config(format!("{tiles} tiles do not form a grid with aspect at most 2:1")));
    }
    let (cols, rows) = if width >= height { (a, b) } else { (b, a) };
    if width % cols != 0 || height % rows != 0 {
        return Err(Error::Config(format!("{width}×{height} image does not split into {cols}×{rows} equal crops")));
    }
    Ok((cols, rows))
}

/// Copies the `[y0, y0+h) × [x0, x0+w)` window of an `[H, W, C]` image.
pub fn crop(image: &Tensor, x0: usize, y0: usize, w: usize, h: usize) -> Result<Tensor> {
    let [ih, iw, c] = image.shape() else {
        return Err(Error::shape("crop", format!("image shape {:?} is not [H, W, C]", image.shape())));
    };
    if x0 + w > *iw || y0 + h > *ih {
        return Err(Error::shape("crop", format!("window {w}×{h} at ({x0},{y0}) exceeds {iw}×{ih}")));
    }
    let mut data = Vec::with_capacity(w * h * c);
    for y in y0..y0 + h {
        data.extend_from_slice(&image.data()[(y * iw + x0) * c..(y * iw + x0 + w) * c]);
    }
    Tensor::new(vec![h, w, *c], data)
}

/// Area-averaging resample of an `[H, W, C]` image to `[h, w, C]`: every
/// output pixel is the mean of the input area it covers.
pub fn resize(image: &Tensor, w: usize, h: usize) -> Result<Tensor> {
    let [ih, iw, c] = *image.shape() else {
        return Err(Error::shape("resize", format!("image shape {:?} is not [H, W, C]", image.shape())));
    };
    if w == 0 || h == 0 || iw == 0 || ih == 0 {
        return Err(Error::shape("resize", format!("cannot resize {iw}×{ih} to {w}×{h}")));
    }
    // Sparse overlap weights along one axis: (input index, weight) per output.
    let weights = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut v = Vec::new();
                let mut i = a.floor() as usize;
                while (i as f64) < b && i < n_in {
                    let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)) / scale;
                    if overlap > 0.0 {
                        v.push((i, overlap));
                    }
                    i += 1;
                }
                v
            })
            .collect()
    };
    let (wx, wy) = (weights(iw, w), weights(ih, h));
    let src = image.data();
    let mut out = vec![0.0; h * w * c];
    for (oy, ry) in wy.iter().enumerate() {
        for (ox, rx) in wx.iter().enumerate() {
            let dst = &mut out[(oy * w + ox) * c..(oy * w + ox + 1) * c];
            for &(y, fy) in ry {
                for &(x, fx) in rx {
                    let base = (y * iw + x) * c;
                    for k in 0..c {
                        dst[k] += fy * fx * src[base + k];
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Runs `detector` on each crop of a tile grid, shifts boxes back into
/// image coordinates, then pools, suppresses and keeps the top N.
pub fn tiled_inference<D>(image: &Tensor, detector: D, tiles: usize, cfg: &EvalConfig) -> Result<Vec<Detection>>
where
    D: Fn(&Tensor) -> Result<Vec<Detection>>,
{
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (cols, rows) = tile_grid(tiles, w, h)?;
    let (tw, th) = (w / cols, h / rows);
    let mut per_tile = Vec::with_capacity(tiles);
    for r in 0..rows {
        for c in 0..cols {
            let part = crop(image, c * tw, r * th, tw, th)?;
            let shifted = detector(&part)?
                .into_iter()
                .map(|d| Detection { rect: d.rect.translate((c * tw) as f64, (r * th) as f64), ..d })
                .collect();
            per_tile.push(shifted);
        }
    }
    Ok(combine_query_detections(&per_tile, cfg))
}

/// Rectangles of the tile grid, row-major.
pub fn tile_rects(tiles: usize, width: usize, height: usize) -> Result<Vec<Rect>> {
    let (cols, rows) = tile_grid(tiles, width, height)?;
    let (tw, th) = ((width / cols) as f64, (height / rows) as f64);
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| Rect::new(c as f64 * tw, r as f64 * th, (c + 1) as f64 * tw, (r + 1) as f64 * th))
        .collect()
}

#[cfg(test)]
mod tests;
