//! Binary masks to boxes via two-pass connected-components labelling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Detection, Rect};

/// Row-major boolean foreground grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Validation(format!("{} mask values for a {height}×{width} mask", data.len())));
        }
        Ok(BinaryMask { height, width, data })
    }

    /// Foreground where the 8-bit value is at least `threshold`.
    pub fn from_gray(height: usize, width: usize, pixels: &[u8], threshold: u8) -> Result<Self> {
        Self::new(height, width, pixels.iter().map(|&p| p >= threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    /// Surrounds the mask with background.
    pub fn pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> BinaryMask {
        let w = self.width + left + right;
        let h = self.height + top + bottom;
        let mut data = vec![false; w * h];
        for r in 0..self.height {
            let dst = (r + top) * w + left;
            data[dst..dst + self.width].copy_from_slice(&self.data[r * self.width..(r + 1) * self.width]);
        }
        BinaryMask { height: h, width: w, data }
    }
}

/// Pixel adjacency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::Config(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }
}

/// One labelled component.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub label: u32,
    pub pixel_count: usize,
    /// Tight box in pixel-edge coordinates: pixel `(r, c)` spans `[c, c+1) × [r, r+1)`.
    pub bbox: Rect,
}

/// Label grid (0 = background, components `1..=n`) and component list.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeling {
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) -> u32 {
    let (ra, rb) = (find(parent, a), find(parent, b));
    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
    parent[hi as usize] = lo;
    lo
}

/// Two-pass union-find labelling. Final labels are dense from 1 in raster
/// order of each component's first pixel.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Labeling {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut parent: Vec<u32> = vec![0];
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            let mut look = |rr: usize, cc: usize| {
                let l = labels[rr * w + cc];
                if l != 0 {
                    neighbours[n] = l;
                    n += 1;
                }
            };
            if c > 0 {
                look(r, c - 1);
            }
            if r > 0 {
                look(r - 1, c);
                if connectivity == Connectivity::Eight {
                    if c > 0 {
                        look(r - 1, c - 1);
                    }
                    if c + 1 < w {
                        look(r - 1, c + 1);
                    }
                }
            }
            labels[r * w + c] = if n == 0 {
                let fresh = parent.len() as u32;
                parent.push(fresh);
                fresh
            } else {
                let mut root = neighbours[0];
                for &other in &neighbours[1..n] {
                    root = union(&mut parent, root, other);
                }
                root
            };
        }
    }
    let mut dense = vec![0u32; parent.len()];
    // Per component: pixel count and [x_min, y_min, x_max, y_max].
    let mut stats: Vec<(usize, [usize; 4])> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let l = labels[r * w + c];
            if l == 0 {
                continue;
            }
            let root = find(&mut parent, l) as usize;
            if dense[root] == 0 {
                stats.push((0, [c, r, c + 1, r + 1]));
                dense[root] = stats.len() as u32;
            }
            let k = dense[root];
            labels[r * w + c] = k;
            let (count, b) = &mut stats[k as usize - 1];
            *count += 1;
            *b = [b[0].min(c), b[1].min(r), b[2].max(c + 1), b[3].max(r + 1)];
        }
    }
    let components = stats
        .iter()
        .enumerate()
        .map(|(i, (count, b))| Component {
            label: i as u32 + 1,
            pixel_count: *count,
            bbox: Rect::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64).expect("pixel bounds"),
        })
        .collect();
    Labeling { labels, components }
}

/// One detection per component with at least `min_area` pixels. Scores are
/// 1.0, or the mean of `score_map` over the component's pixels.
pub fn components_to_boxes(
    labeling: &Labeling,
    min_area: usize,
    score_map: Option<&[f64]>,
    image_id: u64,
) -> Result<Vec<Detection>> {
    let mut sums = vec![0.0; labeling.components.len()];
    if let Some(map) = score_map {
        if map.len() != labeling.labels.len() {
            return Err(Error::Validation(format!("score map has {} values for {} pixels", map.len(), labeling.labels.len())));
        }
        for (&l, &s) in labeling.labels.iter().zip(map) {
            if l != 0 {
                sums[l as usize - 1] += s;
            }
        }
    }
    Ok(labeling
        .components
        .iter()
        .filter(|c| c.pixel_count >= min_area)
        .map(|c| {
            let score = if score_map.is_some() { sums[c.label as usize - 1] / c.pixel_count as f64 } else { 1.0 };
            Detection::new(image_id, c.bbox, score)
        })
        .collect())
}

/// Mask-to-box conversion settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mask2BoxConfig {
    pub connectivity: Connectivity,
    pub min_area: usize,
    /// 8-bit foreground threshold.
    pub threshold: u8,
}

impl Default for Mask2BoxConfig {
    fn default() -> Self {
        Mask2BoxConfig { connectivity: Connectivity::Eight, min_area: 1, threshold: 128 }
    }
}

/// Boxes of an 8-bit grayscale mask.
pub fn mask_to_boxes(height: usize, width: usize, pixels: &[u8], cfg: &Mask2BoxConfig, image_id: u64) -> Result<Vec<Detection>> {
    let mask = BinaryMask::from_gray(height, width, pixels, cfg.threshold)?;
    components_to_boxes(&connected_components(&mask, cfg.connectivity), cfg.min_area, None, image_id)
}
