//! Multi-scale deformable attention.
//!
//! Each query reads a fixed number of bilinearly sampled keys per head and
//! per pyramid level, located around its reference point by learned offsets.
//! Work per query is `heads × levels × points` samples regardless of how
//! large the feature maps are.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::kernels::{bilinear_taps, LevelShape};
use crate::numerics::{NodeId, ParamInit, ParamStore, SampleStats, Tape, Tensor};

/// Multi-level feature maps flattened into one `[Σ H_l·W_l, C]` block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<LevelShape>,
    strides: Vec<usize>,
    values: Tensor,
}

impl FeaturePyramid {
    /// Builds a pyramid from `[H_l, W_l, C]` maps ordered fine to coarse.
    pub fn from_maps(maps: &[Tensor], strides: &[usize]) -> Result<Self> {
        if maps.is_empty() || maps.len() != strides.len() {
            return Err(Error::Config(format!("{} maps for {} strides", maps.len(), strides.len())));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("strides must strictly increase: {strides:?}")));
        }
        let channels = maps[0].last_dim();
        let mut levels = Vec::new();
        let mut data = Vec::new();
        let mut start = 0;
        for m in maps {
            let [h, w, c] = m.shape() else {
                return Err(Error::shape("pyramid", format!("level shape {:?} is not [H, W, C]", m.shape())));
            };
            if *c != channels {
                return Err(Error::shape("pyramid", format!("level has {c} channels, expected {channels}")));
            }
            levels.push(LevelShape { height: *h, width: *w, start });
            start += h * w;
            data.extend_from_slice(m.data());
        }
        Ok(FeaturePyramid { levels, strides: strides.to_vec(), values: Tensor::new(vec![start, channels], data)? })
    }

    pub(crate) fn from_flat(levels: Vec<LevelShape>, strides: Vec<usize>, values: Tensor) -> Self {
        FeaturePyramid { levels, strides, values }
    }

    pub fn levels(&self) -> &[LevelShape] {
        &self.levels
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn channels(&self) -> usize {
        self.values.last_dim()
    }

    /// Flattened values, fine level first, row-major within a level.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Level `l` as an `[H, W, C]` map.
    pub fn level_map(&self, l: usize) -> Tensor {
        let lv = self.levels[l];
        let c = self.channels();
        let data = self.values.data()[lv.start * c..(lv.start + lv.height * lv.width) * c].to_vec();
        Tensor::new(vec![lv.height, lv.width, c], data).expect("level slice")
    }

    /// Total number of pixels over all levels.
    pub fn pixel_count(&self) -> usize {
        self.values.shape()[0]
    }

    /// Normalized center of every pyramid position, in flattened order.
    pub fn normalized_centers(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.pixel_count());
        for lv in &self.levels {
            for i in 0..lv.height {
                for j in 0..lv.width {
                    out.push([(j as f64 + 0.5) / lv.width as f64, (i as f64 + 0.5) / lv.height as f64]);
                }
            }
        }
        out
    }
}

/// Normalized sampling anchor in `[0, 1]²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferencePoint {
    pub x: f64,
    pub y: f64,
}

impl ReferencePoint {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Validation(format!("reference point ({x}, {y}) outside the unit square")));
        }
        Ok(ReferencePoint { x, y })
    }
}

/// Bilinear read of an `[H, W, C]` map at continuous pixel coordinates.
///
/// Pixel `(i, j)` has its center at `(j + 0.5, i + 0.5)`; neighbours outside
/// the map contribute zero.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Result<Tensor> {
    let [h, w, c] = map.shape() else {
        return Err(Error::shape("bilinear_sample", format!("expected [H, W, C], got {:?}", map.shape())));
    };
    let (h, w, c) = (*h as isize, *w as isize, *c);
    let taps = bilinear_taps(x, y);
    let mut out = vec![0.0; c];
    for t in 0..4 {
        let (r, col) = taps.cells[t];
        if r < 0 || col < 0 || r >= h || col >= w {
            continue;
        }
        let base = (r * w + col) as usize * c;
        for (o, v) in out.iter_mut().zip(&map.data()[base..base + c]) {
            *o += taps.weights[t] * v;
        }
    }
    Ok(Tensor::vector(out))
}

/// Sizes of a deformable attention module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsdaShape {
    pub channels: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl MsdaShape {
    pub fn slots(&self) -> usize {
        self.heads * self.levels * self.points
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.levels == 0 || self.points == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!("invalid deformable attention shape {self:?}")));
        }
        Ok(())
    }
}

/// Registers `{prefix}.value/offset/attn/output` projections.
///
/// Offsets start from a fixed star: point `k` of head `m` points along angle
/// `2π(k + m/M)/K` at one level-pixel. Attention logits start at zero.
pub fn init_msda(init: &mut ParamInit<'_>, prefix: &str, shape: MsdaShape) -> Result<()> {
    shape.validate()?;
    let MsdaShape { channels, heads, levels, points } = shape;
    init.dense(&format!("{prefix}.value"), channels, channels)?;
    init.insert(&format!("{prefix}.offset.w"), Tensor::zeros(&[channels, shape.slots() * 2]))?;
    let mut bias = Vec::with_capacity(shape.slots() * 2);
    for m in 0..heads {
        for _ in 0..levels {
            for k in 0..points {
                let angle = 2.0 * PI * (k as f64 + m as f64 / heads as f64) / points as f64;
                bias.push(angle.cos());
                bias.push(angle.sin());
            }
        }
    }
    init.insert(&format!("{prefix}.offset.b"), Tensor::vector(bias))?;
    init.insert(&format!("{prefix}.attn.w"), Tensor::zeros(&[channels, shape.slots()]))?;
    init.insert(&format!("{prefix}.attn.b"), Tensor::zeros(&[shape.slots()]))?;
    init.dense(&format!("{prefix}.output"), channels, channels)?;
    Ok(())
}

/// Node handles produced by [`msda_attention`].
#[derive(Clone, Copy, Debug)]
pub struct MsdaNodes {
    pub output: NodeId,
    /// Softmax-normalized attention weights `[Q, M·L·K]`.
    pub weights: NodeId,
    pub offsets: NodeId,
}

/// Records deformable attention of `query: [Q, C]` into `input: [Σ H_l·W_l, C]`.
#[allow(clippy::too_many_arguments)]
pub fn msda_attention(
    tape: &mut Tape<'_>,
    query: NodeId,
    refs: NodeId,
    input: NodeId,
    levels: &[LevelShape],
    prefix: &str,
    heads: usize,
    points: usize,
) -> Result<MsdaNodes> {
    let value = tape.dense(input, &format!("{prefix}.value"))?;
    let offsets = tape.dense(query, &format!("{prefix}.offset"))?;
    let logits = tape.dense(query, &format!("{prefix}.attn"))?;
    let weights = tape.softmax(logits, levels.len() * points)?;
    let sampled = tape.msda_sample(value, levels, offsets, weights, refs, heads, points)?;
    let output = tape.dense(sampled, &format!("{prefix}.output"))?;
    Ok(MsdaNodes { output, weights, offsets })
}

/// Standalone deformable attention parameters.
#[derive(Clone, Debug)]
pub struct MsdaParams {
    pub shape: MsdaShape,
    /// Projections stored under the prefix `msda`.
    pub store: ParamStore,
}

impl MsdaParams {
    pub fn init(shape: MsdaShape, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        init_msda(&mut ParamInit { store: &mut store, rng: &mut rng }, "msda", shape)?;
        Ok(MsdaParams { shape, store })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.store.get_mut(&format!("msda.{name}"))
    }
}

/// Result of [`msda_forward`].
#[derive(Clone, Debug)]
pub struct MsdaOutput {
    pub output: Tensor,
    pub weights: Tensor,
    pub sampling_offsets: Tensor,
    pub stats: SampleStats,
}

/// Deformable attention of `queries: [Q, C]` anchored at `refs` into `pyramid`.
pub fn msda_forward(
    queries: &Tensor,
    refs: &[ReferencePoint],
    pyramid: &FeaturePyramid,
    params: &MsdaParams,
) -> Result<MsdaOutput> {
    params.shape.validate()?;
    let (q, c) = queries.dims2("msda_forward")?;
    if c != pyramid.channels() || c != params.shape.channels {
        return Err(Error::Config(format!(
            "query width {c}, pyramid channels {}, module channels {}",
            pyramid.channels(),
            params.shape.channels
        )));
    }
    if refs.len() != q || pyramid.levels().len() != params.shape.levels {
        return Err(Error::Config(format!(
            "{} refs for {q} queries; {} levels for a {}-level module",
            refs.len(),
            pyramid.levels().len(),
            params.shape.levels
        )));
    }
    let mut tape = Tape::with_params(&params.store);
    let qn = tape.input(queries.clone());
    let rn = tape.input(Tensor::new(vec![q, 2], refs.iter().flat_map(|r| [r.x, r.y]).collect())?);
    let vn = tape.input(pyramid.values().clone());
    let nodes = msda_attention(&mut tape, qn, rn, vn, pyramid.levels(), "msda", params.shape.heads, params.shape.points)?;
    Ok(MsdaOutput {
        output: tape.value(nodes.output).clone(),
        weights: tape.value(nodes.weights).clone(),
        sampling_offsets: tape.value(nodes.offsets).clone(),
        stats: tape.sample_stats(),
    })
}
