//! Dataset files, detection files, PGM images, the synthetic shapes
//! generator, and the caption-structure ablation transforms.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval_protocol::SizeBuckets;
use crate::geometry::{nms_class_agnostic, BoxFormat, Detection, GroundTruthBox, Rect};
use crate::model::TokenQuery;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// Validated ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<GroundTruthBox>,
    pub categories: Vec<Category>,
}

impl Dataset {
    /// `(width, height)` per image id.
    pub fn sizes(&self) -> BTreeMap<u64, (f64, f64)> {
        self.images.iter().map(|i| (i.id, (i.width as f64, i.height as f64))).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
    category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iscrowd: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ignore: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segmentation: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthFile {
    images: Vec<ImageInfo>,
    annotations: Vec<AnnotationRecord>,
    categories: Vec<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    info: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    licenses: Option<serde_json::Value>,
}

/// Byte offset of a 1-based `(line, column)` position.
fn byte_offset(text: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

/// Parses JSON, mapping syntax errors to [`Error::Parse`] with a byte offset
/// and shape mismatches to [`Error::Schema`].
pub fn parse_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| {
        use serde_json::error::Category as C;
        match e.classify() {
            C::Syntax => Error::Parse { offset: byte_offset(bytes, e.line(), e.column()), message: e.to_string() },
            C::Eof => Error::Parse { offset: bytes.len(), message: e.to_string() },
            C::Data => Error::Schema(e.to_string()),
            C::Io => Error::Io(std::io::Error::other(e.to_string())),
        }
    })
}

/// Parses a COCO-style GT document. Crowd and ignore annotations are dropped
/// (the count is logged); boxes are clamped to their image.
pub fn parse_ground_truth(bytes: &[u8]) -> Result<Dataset> {
    let file: GroundTruthFile = parse_json(bytes)?;
    let mut sizes = BTreeMap::new();
    for im in &file.images {
        if im.width == 0 || im.height == 0 {
            return Err(Error::Validation(format!("image {} has zero size", im.id)));
        }
        if sizes.insert(im.id, (im.width as f64, im.height as f64)).is_some() {
            return Err(Error::Validation(format!("duplicate image id {}", im.id)));
        }
    }
    let mut cat_ids = BTreeSet::new();
    for c in &file.categories {
        if !cat_ids.insert(c.id) {
            return Err(Error::Validation(format!("duplicate category id {}", c.id)));
        }
    }
    let mut ann_ids = BTreeSet::new();
    let mut dropped = 0;
    let mut annotations = Vec::with_capacity(file.annotations.len());
    for a in &file.annotations {
        if !ann_ids.insert(a.id) {
            return Err(Error::Validation(format!("duplicate annotation id {}", a.id)));
        }
        let Some(&(w, h)) = sizes.get(&a.image_id) else {
            return Err(Error::Validation(format!("annotation {} refers to missing image {}", a.id, a.image_id)));
        };
        if !cat_ids.contains(&a.category_id) {
            return Err(Error::Validation(format!("annotation {} refers to missing category {}", a.id, a.category_id)));
        }
        let rect = Rect::from_format(a.bbox, BoxFormat::Xywh)
            .map_err(|e| Error::Validation(format!("annotation {}: {e}", a.id)))?
            .clamp(w, h);
        if a.iscrowd.unwrap_or(0) != 0 || a.ignore.unwrap_or(0) != 0 {
            dropped += 1;
            continue;
        }
        annotations.push(GroundTruthBox { image_id: a.image_id, rect, category_id: a.category_id, known: true });
    }
    if dropped > 0 {
        log::info!("dropped {dropped} crowd/ignore annotations");
    }
    Ok(Dataset { images: file.images, annotations, categories: file.categories })
}

pub fn load_ground_truth(path: &Path) -> Result<Dataset> {
    parse_ground_truth(&fs::read(path)?)
}

/// Serializes a dataset back to the COCO-style schema; annotation ids are
/// assigned in order from 1.
pub fn ground_truth_json(ds: &Dataset) -> Result<String> {
    let file = GroundTruthFile {
        images: ds.images.clone(),
        annotations: ds
            .annotations
            .iter()
            .enumerate()
            .map(|(i, g)| AnnotationRecord {
                id: i as u64 + 1,
                image_id: g.image_id,
                bbox: xywh_exact(&g.rect),
                category_id: g.category_id,
                iscrowd: None,
                ignore: None,
                area: None,
                segmentation: None,
            })
            .collect(),
        categories: ds.categories.clone(),
        info: None,
        licenses: None,
    };
    Ok(serde_json::to_string_pretty(&file).map_err(|e| Error::Schema(e.to_string()))?)
}

pub fn save_ground_truth(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, ground_truth_json(ds)?)?;
    Ok(())
}

/// One entry of a detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// Width that reproduces `hi` exactly when added back to `lo`. `lo + w`
/// is monotone in `w`, and non-negative floats order like their bit
/// patterns, so bisection over the bits finds it when it exists.
fn exact_extent(lo: f64, hi: f64) -> f64 {
    let w0 = hi - lo;
    if lo + w0 == hi || !(w0 > 0.0) || !w0.is_finite() {
        return w0;
    }
    let (mut a, mut b) = (0u64, (w0 * 2.0).to_bits());
    while a < b {
        let mid = a + (b - a) / 2;
        if lo + f64::from_bits(mid) < hi {
            a = mid + 1;
        } else {
            b = mid;
        }
    }
    let w = f64::from_bits(a);
    if lo + w == hi {
        w
    } else {
        w0
    }
}

fn xywh_exact(r: &Rect) -> [f64; 4] {
    [r.x_min, r.y_min, exact_extent(r.x_min, r.x_max), exact_extent(r.y_min, r.y_max)]
}

impl DetectionRecord {
    pub fn from_detection(d: &Detection, category: Option<&str>) -> Self {
        DetectionRecord {
            image_id: d.image_id,
            bbox: xywh_exact(&d.rect),
            score: d.score,
            query: d.source_query.clone(),
            category: category.map(str::to_owned),
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!("score {} outside [0, 1] on image {}", self.score, self.image_id)));
        }
        let rect = Rect::from_format(self.bbox, BoxFormat::Xywh)
            .map_err(|e| Error::Validation(format!("image {}: {e}", self.image_id)))?;
        Ok(Detection { image_id: self.image_id, rect, score: self.score, source_query: self.query.clone() })
    }
}

pub fn parse_detections(bytes: &[u8]) -> Result<Vec<Detection>> {
    let records: Vec<DetectionRecord> = parse_json(bytes)?;
    records.iter().map(DetectionRecord::to_detection).collect()
}

pub fn load_proposals(path: &Path) -> Result<Vec<Detection>> {
    parse_detections(&fs::read(path)?)
}

/// Detections as a JSON array; `category` tags every entry when given.
pub fn detections_json(dets: &[Detection], category: Option<&str>) -> String {
    let records: Vec<DetectionRecord> = dets.iter().map(|d| DetectionRecord::from_detection(d, category)).collect();
    serde_json::to_string_pretty(&records).expect("plain records serialize")
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    fs::write(path, detections_json(dets, None))?;
    Ok(())
}

/// Binary 8-bit PGM (P5) with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(Error::Validation(format!("{} pixels for a {width}×{height} image", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Decodes a binary 8-bit PGM; returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse { offset: pos, message: "truncated PGM header".into() });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(Error::Parse { offset: 0, message: format!("expected magic P5, found {:?}", fields[0].1) });
    }
    let num = |k: usize| -> Result<usize> {
        fields[k].1.parse().map_err(|_| Error::Parse { offset: fields[k].0, message: format!("bad number {:?}", fields[k].1) })
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::Validation(format!("only 8-bit PGM (maxval 255) is supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Validation("PGM with zero size".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Parse { offset: bytes.len(), message: "truncated PGM raster".into() })?;
    Ok((w, h, data.to_vec()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)?)?;
    Ok(())
}

/// `[H, W, 1]` intensities in `[0, 1]` from 8-bit pixels.
pub fn pixels_to_tensor(width: usize, height: usize, pixels: &[u8]) -> Result<Tensor> {
    Tensor::new(vec![height, width, 1], pixels.iter().map(|&p| p as f64 / 255.0).collect())
}

/// 8-bit pixels from `[0, 1]` intensities (rounded, clamped).
pub fn tensor_to_pixels(image: &Tensor) -> Vec<u8> {
    image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Boxes a text query asks for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionGroup {
    pub image_id: u64,
    /// Absent for caption-free groups.
    pub query: Option<TokenQuery>,
    /// Pixel boxes.
    pub targets: Vec<Rect>,
}

/// Size class a query rule selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryRule {
    All,
    Small,
    Large,
}

impl QueryRule {
    pub fn accepts(&self, area_fraction: f64, buckets: &SizeBuckets) -> bool {
        match self {
            QueryRule::All => true,
            QueryRule::Small => area_fraction < buckets.small,
            QueryRule::Large => area_fraction > buckets.large,
        }
    }
}

/// Synthetic shapes dataset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Probability that a shape is drawn small, medium or large.
    pub size_mix: [f64; 3],
    pub buckets: SizeBuckets,
    /// Query text per rule; every image gets one group per rule with at
    /// least one matching shape.
    pub rules: Vec<(QueryRule, String)>,
    /// Background noise amplitude.
    pub noise: f64,
    pub first_image_id: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_images: 100,
            image_size: 64,
            min_shapes: 1,
            max_shapes: 4,
            size_mix: [0.45, 0.3, 0.25],
            buckets: SizeBuckets::default(),
            rules: vec![
                (QueryRule::All, "all objects".into()),
                (QueryRule::Small, "small objects".into()),
                (QueryRule::Large, "large objects".into()),
            ],
            noise: 0.25,
            first_image_id: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.buckets.validate()?;
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!("shape count range {}..={} is empty or zero", self.min_shapes, self.max_shapes)));
        }
        if self.image_size < 16 || self.num_images == 0 {
            return Err(Error::Config("need at least one image of side ≥ 16".into()));
        }
        if self.size_mix.iter().any(|p| *p < 0.0) || self.size_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid size mix {:?}", self.size_mix)));
        }
        if self.rules.is_empty() {
            return Err(Error::Config("no query rules".into()));
        }
        for (_, text) in &self.rules {
            TokenQuery::parse(text)?;
        }
        if !(0.0..=0.4).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.4]", self.noise)));
        }
        Ok(())
    }
}

/// One rendered synthetic image.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub id: u64,
    pub pixels: Vec<u8>,
    /// Foreground-only render (shape pixels 255, background 0).
    pub shape_mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub groups: Vec<CaptionGroup>,
    pub images: Vec<SyntheticImage>,
}

impl SyntheticDataset {
    pub fn image_tensor(&self, index: usize) -> Tensor {
        let s = self.dataset.images[index].width as usize;
        pixels_to_tensor(s, s, &self.images[index].pixels).expect("square render")
    }
}

const RECTANGLE: u64 = 1;
const ELLIPSE: u64 = 2;

fn ellipse_contains(x0: usize, y0: usize, w: usize, h: usize, px: usize, py: usize) -> bool {
    let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
    let dx = (px as f64 + 0.5 - (x0 as f64 + rx)) / rx;
    let dy = (py as f64 + 0.5 - (y0 as f64 + ry)) / ry;
    dx * dx + dy * dy <= 1.0
}

/// Renders one image; boxes are the tight bounds of the drawn pixels.
fn render(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>, Vec<(Rect, u64)>) {
    let s = spec.image_size;
    let area = (s * s) as f64;
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut occupied = vec![false; s * s];
    let mut pixels: Vec<u8> = if spec.noise > 0.0 {
        (0..s * s).map(|_| (rng.gen_range(0.0..spec.noise) * 255.0).round() as u8).collect()
    } else {
        vec![0; s * s]
    };
    let mut mask = vec![0u8; s * s];
    let mut grays: Vec<u8> = (0..8).map(|k| 140 + 16 * k as u8).collect();
    grays.shuffle(rng);
    let total: f64 = spec.size_mix.iter().sum();
    let mut shapes = Vec::new();
    for gray in grays.into_iter().take(count) {
        for _attempt in 0..50 {
            let u = rng.gen_range(0.0..total);
            let (lo, hi) = if u < spec.size_mix[0] {
                (0.012, spec.buckets.small * 0.8)
            } else if u < spec.size_mix[0] + spec.size_mix[1] {
                (spec.buckets.small * 1.25, spec.buckets.large * 0.85)
            } else {
                (spec.buckets.large * 1.25, 0.40)
            };
            let frac = rng.gen_range(lo..hi);
            let aspect: f64 = rng.gen_range(0.6f64..1.6).sqrt();
            let w = ((frac * area).sqrt() * aspect).round().clamp(3.0, (s - 2) as f64) as usize;
            let h = ((frac * area).sqrt() / aspect).round().clamp(3.0, (s - 2) as f64) as usize;
            let x0 = rng.gen_range(0..=s - w);
            let y0 = rng.gen_range(0..=s - h);
            let ellipse = rng.gen_bool(0.5);
            // One pixel of clearance around every shape keeps components apart.
            let clear = (y0.saturating_sub(1)..(y0 + h + 1).min(s))
                .all(|y| (x0.saturating_sub(1)..(x0 + w + 1).min(s)).all(|x| !occupied[y * s + x]));
            if !clear {
                continue;
            }
            let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0, 0);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    occupied[y * s + x] = true;
                    if ellipse && !ellipse_contains(x0, y0, w, h, x, y) {
                        continue;
                    }
                    pixels[y * s + x] = gray;
                    mask[y * s + x] = 255;
                    (xmin, ymin, xmax, ymax) = (xmin.min(x), ymin.min(y), xmax.max(x + 1), ymax.max(y + 1));
                }
            }
            let rect = Rect::new(xmin as f64, ymin as f64, xmax as f64, ymax as f64).expect("drawn shape");
            shapes.push((rect, if ellipse { ELLIPSE } else { RECTANGLE }));
            break;
        }
    }
    (pixels, mask, shapes)
}

/// Generates a seeded synthetic dataset: shapes on noise, annotations, and
/// one caption group per applicable query rule.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let rules: Vec<(QueryRule, TokenQuery)> =
        spec.rules.iter().map(|(r, t)| Ok((*r, TokenQuery::parse(t)?))).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.image_size;
    let area = (s * s) as f64;
    let mut images = Vec::new();
    let mut infos = Vec::new();
    let mut annotations = Vec::new();
    let mut groups = Vec::new();
    for k in 0..spec.num_images {
        let id = spec.first_image_id + k as u64;
        let (pixels, shape_mask, shapes) = render(spec, &mut rng);
        for (rule, query) in &rules {
            let targets: Vec<Rect> = shapes.iter().filter(|(r, _)| rule.accepts(r.area() / area, &spec.buckets)).map(|(r, _)| *r).collect();
            if !targets.is_empty() {
                groups.push(CaptionGroup { image_id: id, query: Some(query.clone()), targets });
            }
        }
        annotations.extend(shapes.iter().map(|(rect, cat)| GroundTruthBox { image_id: id, rect: *rect, category_id: *cat, known: true }));
        infos.push(ImageInfo { id, width: s as u32, height: s as u32, file_name: format!("img_{id:06}.pgm") });
        images.push(SyntheticImage { id, pixels, shape_mask });
    }
    let categories = vec![Category { id: RECTANGLE, name: "rectangle".into() }, Category { id: ELLIPSE, name: "ellipse".into() }];
    Ok(SyntheticDataset { dataset: Dataset { images: infos, annotations, categories }, groups, images })
}

/// Manifest binding a synthetic dataset's files, annotations and groups.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub ground_truth: String,
    pub images: Vec<ImageInfo>,
    pub groups: Vec<ManifestGroup>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestGroup {
    pub image_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    /// `[x, y, w, h]` pixel boxes.
    pub boxes: Vec<[f64; 4]>,
}

impl ManifestGroup {
    pub fn from_group(g: &CaptionGroup) -> Self {
        ManifestGroup { image_id: g.image_id, query: g.query.as_ref().map(TokenQuery::text), boxes: g.targets.iter().map(xywh_exact).collect() }
    }

    pub fn to_group(&self) -> Result<CaptionGroup> {
        let query = self.query.as_deref().map(TokenQuery::parse).transpose()?;
        let targets = self
            .boxes
            .iter()
            .map(|b| Rect::from_format(*b, BoxFormat::Xywh))
            .collect::<Result<Vec<_>>>()?;
        Ok(CaptionGroup { image_id: self.image_id, query, targets })
    }
}

/// Writes images as PGM, the GT file and the manifest into `dir`.
pub fn write_synthetic(dir: &Path, data: &SyntheticDataset, spec: &SyntheticSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (info, img) in data.dataset.images.iter().zip(&data.images) {
        write_pgm(&dir.join(&info.file_name), info.width as usize, info.height as usize, &img.pixels)?;
    }
    save_ground_truth(&dir.join("gt.json"), &data.dataset)?;
    let manifest = Manifest {
        spec: spec.clone(),
        ground_truth: "gt.json".into(),
        images: data.dataset.images.clone(),
        groups: data.groups.iter().map(ManifestGroup::from_group).collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    parse_json(&fs::read(path)?)
}

/// Reads a directory written by [`write_synthetic`]. Shape masks are not
/// stored on disk and come back empty.
pub fn read_synthetic(dir: &Path) -> Result<(SyntheticSpec, SyntheticDataset)> {
    let manifest = load_manifest(&dir.join("manifest.json"))?;
    let dataset = load_ground_truth(&dir.join(&manifest.ground_truth))?;
    if dataset.images != manifest.images {
        return Err(Error::Validation("manifest image list differs from the ground-truth file".into()));
    }
    let known: BTreeSet<u64> = dataset.images.iter().map(|i| i.id).collect();
    let mut images = Vec::with_capacity(dataset.images.len());
    for info in &dataset.images {
        let (w, h, pixels) = read_pgm(&dir.join(&info.file_name))?;
        if (w, h) != (info.width as usize, info.height as usize) || w != h {
            return Err(Error::Validation(format!("{} is {w}×{h}, expected a square {}×{}", info.file_name, info.width, info.height)));
        }
        images.push(SyntheticImage { id: info.id, pixels, shape_mask: Vec::new() });
    }
    let groups = manifest.groups.iter().map(ManifestGroup::to_group).collect::<Result<Vec<_>>>()?;
    if let Some(g) = groups.iter().find(|g| !known.contains(&g.image_id) || g.targets.is_empty()) {
        return Err(Error::Validation(format!("group for image {} is empty or refers to an unknown image", g.image_id)));
    }
    Ok((manifest.spec, SyntheticDataset { dataset, groups, images }))
}

/// Setting 1: per image, the concatenation of every group's boxes.
/// Duplicates are kept and caption identity is dropped.
pub fn ablation_setting1_merge(groups: &[CaptionGroup]) -> BTreeMap<u64, Vec<Rect>> {
    let mut out: BTreeMap<u64, Vec<Rect>> = BTreeMap::new();
    for g in groups {
        out.entry(g.image_id).or_default().extend(g.targets.iter().copied());
    }
    out
}

/// Setting 2: class-agnostic NMS with uniform scores, so earlier boxes win.
pub fn ablation_setting2_nms(merged: &BTreeMap<u64, Vec<Rect>>, thresh: f64) -> BTreeMap<u64, Vec<Rect>> {
    merged
        .iter()
        .map(|(id, boxes)| {
            let dets: Vec<Detection> = boxes.iter().map(|r| Detection::new(*id, *r, 1.0)).collect();
            (*id, nms_class_agnostic(&dets, thresh).into_iter().map(|d| d.rect).collect())
        })
        .collect()
}

/// Setting 3: random partition of each image's boxes into caption-free
/// groups of `group_size` (the last may be smaller), without replacement.
pub fn ablation_setting3_group(boxes: &BTreeMap<u64, Vec<Rect>>, group_size: usize, seed: u64) -> Result<Vec<CaptionGroup>> {
    if group_size == 0 {
        return Err(Error::Config("group size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (id, b) in boxes {
        let mut shuffled = b.clone();
        shuffled.shuffle(&mut rng);
        for chunk in shuffled.chunks(group_size) {
            out.push(CaptionGroup { image_id: *id, query: None, targets: chunk.to_vec() });
        }
    }
    Ok(out)
}

/// Caption-free groups rebuilt from merged per-image lists (one group each).
pub fn groups_from_merged(merged: &BTreeMap<u64, Vec<Rect>>) -> Vec<CaptionGroup> {
    merged
        .iter()
        .filter(|(_, b)| !b.is_empty())
        .map(|(id, b)| CaptionGroup { image_id: *id, query: None, targets: b.clone() })
        .collect()
}
