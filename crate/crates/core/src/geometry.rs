//! Boxes, overlap measures, format conversion, and class-agnostic NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Coordinate layouts a box can be written in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxFormat {
    /// `(x_min, y_min, x_max, y_max)`
    Xyxy,
    /// `(center_x, center_y, width, height)`
    Cxcywh,
    /// `(x_min, y_min, width, height)`
    Xywh,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let r = Rect { x_min, y_min, x_max, y_max };
        if !r.to_array().iter().all(|v| v.is_finite()) || x_min > x_max || y_min > y_max {
            return Err(Error::Validation(format!("invalid box {:?}", r.to_array())));
        }
        Ok(r)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Moves the box by `(dx, dy)`.
    pub fn translate(&self, dx: f64, dy: f64) -> Rect {
        Rect { x_min: self.x_min + dx, y_min: self.y_min + dy, x_max: self.x_max + dx, y_max: self.y_max + dy }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Rect {
        Rect { x_min: self.x_min * sx, y_min: self.y_min * sy, x_max: self.x_max * sx, y_max: self.y_max * sy }
    }

    /// Intersects with `[0, width] × [0, height]`.
    pub fn clamp(&self, width: f64, height: f64) -> Rect {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        Rect { x_min: cx(self.x_min), y_min: cy(self.y_min), x_max: cx(self.x_max), y_max: cy(self.y_max) }
    }

    pub fn is_normalized(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Reads a box written in `format`.
    pub fn from_format(v: [f64; 4], format: BoxFormat) -> Result<Rect> {
        match format {
            BoxFormat::Xyxy => Rect::new(v[0], v[1], v[2], v[3]),
            BoxFormat::Cxcywh => {
                check_extent(v[2], v[3])?;
                Rect::new(v[0] - 0.5 * v[2], v[1] - 0.5 * v[3], v[0] + 0.5 * v[2], v[1] + 0.5 * v[3])
            }
            BoxFormat::Xywh => {
                check_extent(v[2], v[3])?;
                Rect::new(v[0], v[1], v[0] + v[2], v[1] + v[3])
            }
        }
    }

    /// Writes the box in `format`.
    pub fn to_format(&self, format: BoxFormat) -> [f64; 4] {
        match format {
            BoxFormat::Xyxy => self.to_array(),
            BoxFormat::Cxcywh => [
                0.5 * (self.x_min + self.x_max),
                0.5 * (self.y_min + self.y_max),
                self.width(),
                self.height(),
            ],
            BoxFormat::Xywh => [self.x_min, self.y_min, self.width(), self.height()],
        }
    }
}

fn check_extent(w: f64, h: f64) -> Result<()> {
    if w < 0.0 || h < 0.0 || !w.is_finite() || !h.is_finite() {
        return Err(Error::Validation(format!("negative or non-finite extent w={w} h={h}")));
    }
    Ok(())
}

/// Converts four coordinates between layouts.
pub fn convert(v: [f64; 4], from: BoxFormat, to: BoxFormat) -> Result<[f64; 4]> {
    if from == to {
        if from != BoxFormat::Xyxy {
            check_extent(v[2], v[3])?;
        }
        return Ok(v);
    }
    Ok(Rect::from_format(v, from)?.to_format(to))
}

fn intersection(a: &Rect, b: &Rect) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    w * h
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU; zero when the enclosing box has no area.
pub fn giou(a: &Rect, b: &Rect) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let hull = (a.x_max.max(b.x_max) - a.x_min.min(b.x_min)) * (a.y_max.max(b.y_max) - a.y_min.min(b.y_min));
    if hull <= 0.0 {
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull - union) / hull
}

/// A scored box on one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    #[serde(rename = "box")]
    pub rect: Rect,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_query: Option<String>,
}

impl Detection {
    pub fn new(image_id: u64, rect: Rect, score: f64) -> Self {
        Detection { image_id, rect, score, source_query: None }
    }

    pub fn with_query(mut self, query: impl Into<String>) -> Self {
        self.source_query = Some(query.into());
        self
    }
}

/// An annotated box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: u64,
    #[serde(rename = "box")]
    pub rect: Rect,
    pub category_id: u64,
    /// Whether the category belongs to the known (labelled) set.
    pub known: bool,
}

/// Indices of `scores` ordered by score descending; equal scores keep input order.
pub fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy class-agnostic NMS. Returns the indices of kept detections in
/// keep order (score descending, earlier index first on ties).
pub fn nms_indices(rects: &[Rect], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores.iter().copied()) {
        if kept.iter().all(|&k| iou(&rects[k], &rects[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Class-agnostic non-maximum suppression; categories and sources are ignored.
pub fn nms_class_agnostic(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let rects: Vec<Rect> = dets.iter().map(|d| d.rect).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_indices(&rects, &scores, iou_thresh).into_iter().map(|i| dets[i].clone()).collect()
}
