//! Desk-scale detector with late vision-language fusion.
//!
//! Pipeline: strided patch embeddings form a feature pyramid, refined by
//! deformable self-attention encoder layers; learned object queries read the
//! pyramid through deformable cross-attention; token embeddings of the text
//! query are concatenated with the decoded object queries and passed through
//! a stack of self-attention blocks. One shared detection head reads the
//! object-query positions after every block.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{score_order, BoxFormat, Detection, Rect};
use crate::msda::{init_msda, msda_attention, FeaturePyramid, MsdaShape};
use crate::numerics::kernels::{sigmoid, LevelShape};
use crate::numerics::layers::{init_mlp, mlp_residual};
use crate::numerics::{init_sa_block, sa_block, BlockShape, NodeId, ParamInit, ParamStore, Tape, Tensor};

/// Words understood by the toy token embedder, in id order.
pub const VOCABULARY: [&str; 16] = [
    "all", "objects", "entities", "small", "little", "large", "big", "medium", "visible", "obscure", "and", "tiny",
    "things", "shapes", "every", "items",
];

/// Architecture dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the (square) training images.
    pub image_size: usize,
    pub in_channels: usize,
    pub strides: Vec<usize>,
    /// Shared model width `d` (equals pyramid channels).
    pub width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub fusion_blocks: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub attn_heads: usize,
    pub msda_heads: usize,
    pub msda_points: usize,
    pub mlp_hidden: usize,
    /// Also supervise every decoder layer's output through the head.
    pub decoder_aux_loss: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            in_channels: 1,
            strides: vec![8, 16, 32],
            width: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            num_queries: 24,
            fusion_blocks: 6,
            vocab_size: VOCABULARY.len(),
            max_tokens: 8,
            attn_heads: 4,
            msda_heads: 4,
            msda_points: 4,
            mlp_hidden: 128,
            decoder_aux_loss: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.fusion_blocks == 0 || self.num_queries == 0 {
            return fail("fusion_blocks and num_queries must be at least 1".into());
        }
        if self.strides.is_empty() || self.strides.windows(2).any(|w| w[0] >= w[1]) || self.strides[0] == 0 {
            return fail(format!("strides must be positive and strictly increasing: {:?}", self.strides));
        }
        if let Some(s) = self.strides.iter().find(|&&s| self.image_size % s != 0) {
            return fail(format!("stride {s} does not divide image size {}", self.image_size));
        }
        if self.width == 0 || self.width % self.attn_heads.max(1) != 0 || self.width % self.msda_heads.max(1) != 0 {
            return fail(format!("width {} not divisible by head counts", self.width));
        }
        if self.attn_heads == 0 || self.msda_heads == 0 || self.msda_points == 0 {
            return fail("head and point counts must be positive".into());
        }
        if self.vocab_size == 0 || self.max_tokens == 0 || self.in_channels == 0 {
            return fail("vocab_size, max_tokens and in_channels must be positive".into());
        }
        Ok(())
    }

    fn msda_shape(&self) -> MsdaShape {
        MsdaShape { channels: self.width, heads: self.msda_heads, levels: self.strides.len(), points: self.msda_points }
    }

    fn block_shape(&self) -> BlockShape {
        BlockShape { width: self.width, hidden: self.mlp_hidden, heads: self.attn_heads }
    }
}

/// Token ids of a text query.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenQuery {
    pub ids: Vec<usize>,
}

impl TokenQuery {
    /// Tokenizes whitespace-separated words against [`VOCABULARY`].
    pub fn parse(text: &str) -> Result<Self> {
        let ids = text
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                VOCABULARY
                    .iter()
                    .position(|v| *v == w)
                    .ok_or_else(|| Error::Validation(format!("unknown query word {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::Validation("empty query".into()));
        }
        Ok(TokenQuery { ids })
    }

    pub fn text(&self) -> String {
        self.ids.iter().map(|&i| VOCABULARY.get(i).copied().unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.ids.is_empty() || self.ids.len() > cfg.max_tokens {
            return Err(Error::Validation(format!("query length {} outside 1..={}", self.ids.len(), cfg.max_tokens)));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::Validation(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        Ok(())
    }
}

/// One head readout: normalized `(cx, cy, w, h)` boxes and objectness.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub boxes: Tensor,
    pub objectness: Tensor,
    /// Pre-sigmoid objectness.
    pub logits: Tensor,
}

impl DetectionSet {
    pub fn from_logits(boxes: Tensor, logits: Tensor) -> Self {
        let objectness = Tensor::vector(logits.data().iter().map(|&z| sigmoid(z)).collect());
        DetectionSet { boxes, objectness, logits }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Corner-form pixel boxes for an image of `width × height`, clamped to
    /// the image, with objectness scores, sorted by score.
    pub fn to_detections(&self, image_id: u64, width: usize, height: usize) -> Vec<Detection> {
        let order = score_order(self.objectness.data().iter().copied());
        order
            .into_iter()
            .map(|q| {
                let r = self.boxes.row(q);
                let rect = Rect::from_format([r[0], r[1], r[2], r[3]], BoxFormat::Cxcywh)
                    .expect("squashed box")
                    .scale(width as f64, height as f64)
                    .clamp(width as f64, height as f64);
                Detection::new(image_id, rect, self.objectness.data()[q])
            })
            .collect()
    }
}

/// Node handles of one head readout on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub boxes: NodeId,
    pub logits: NodeId,
}

/// Model weights with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl ModelParams {
    /// Seeded initialization.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = ParamInit { store: &mut store, rng: &mut rng };
        let d = config.width;
        for (l, s) in config.strides.iter().enumerate() {
            init.dense(&format!("patch.{l}"), s * s * config.in_channels, d)?;
        }
        let e = init.uniform(&[config.strides.len(), d], 0.1);
        init.insert("level_embed", e)?;
        for i in 0..config.encoder_layers {
            init.norm(&format!("enc.{i}.ln1"), d)?;
            init_msda(&mut init, &format!("enc.{i}.msda"), config.msda_shape())?;
            init_mlp(&mut init, &format!("enc.{i}"), d, config.mlp_hidden)?;
        }
        let content = init.uniform(&[config.num_queries, d], 1.0);
        init.insert("query.content", content)?;
        let pos = init.uniform(&[config.num_queries, d], 1.0);
        init.insert("query.pos", pos)?;
        init.dense("ref", d, 2)?;
        for i in 0..config.decoder_layers {
            init.norm(&format!("dec.{i}.ln1"), d)?;
            init.dense(&format!("dec.{i}.qkv"), d, 3 * d)?;
            init.dense(&format!("dec.{i}.proj"), d, d)?;
            init.norm(&format!("dec.{i}.ln_ca"), d)?;
            init_msda(&mut init, &format!("dec.{i}.msda"), config.msda_shape())?;
            init_mlp(&mut init, &format!("dec.{i}"), d, config.mlp_hidden)?;
        }
        init.norm("dec.norm", d)?;
        let tok = init.uniform(&[config.vocab_size, d], 1.0);
        init.insert("tok.embed", tok)?;
        let tpos = init.uniform(&[config.max_tokens, d], 0.1);
        init.insert("tok.pos", tpos)?;
        let fpos = init.uniform(&[config.num_queries + config.max_tokens, d], 0.1);
        init.insert("fuse.pos", fpos)?;
        for f in 0..config.fusion_blocks {
            init_sa_block(&mut init, &format!("fuse.{f}"), config.block_shape())?;
        }
        init.norm("head.norm", d)?;
        init.dense("head.box1", d, d)?;
        init.dense_with("head.box2", d, 4, 1e-3)?;
        init.dense_with("head.obj", d, 1, 1e-3)?;
        store.get_mut("head.box2.b")?.data_mut().copy_from_slice(&[0.0, 0.0, logit(0.2), logit(0.2)]);
        store.get_mut("head.obj.b")?.data_mut()[0] = -2.0;
        Ok(ModelParams { config, store })
    }
}

/// Fixed 2-D sinusoidal code of normalized `(x, y)`: a quarter of the
/// channels each for `sin`/`cos` of x and y at geometric frequencies from π to 64π.
pub fn position_code(x: f64, y: f64, width: usize) -> Vec<f64> {
    let per = (width / 4).max(1);
    let mut out = vec![0.0; width];
    for k in 0..per {
        let f = if per > 1 { PI * 64f64.powf(k as f64 / (per - 1) as f64) } else { PI };
        let slots = [(x * f).sin(), (x * f).cos(), (y * f).sin(), (y * f).cos()];
        for (s, v) in slots.iter().enumerate() {
            let idx = s * per + k;
            if idx < width {
                out[idx] = *v;
            }
        }
    }
    out
}

/// Tape-level pyramid: flattened `[Σ H_l·W_l, d]` node plus geometry.
#[derive(Clone, Debug)]
pub struct PyramidNodes {
    pub values: NodeId,
    pub levels: Vec<LevelShape>,
}

/// Records the image encoder.
pub fn encode_image_on(tape: &mut Tape<'_>, cfg: &ModelConfig, image: &Tensor) -> Result<PyramidNodes> {
    let [h, w, ch] = image.shape() else {
        return Err(Error::shape("encode_image", format!("image shape {:?} is not [H, W, C]", image.shape())));
    };
    let (h, w, ch) = (*h, *w, *ch);
    if ch != cfg.in_channels {
        return Err(Error::Config(format!("image has {ch} channels, model expects {}", cfg.in_channels)));
    }
    let largest = *cfg.strides.last().expect("validated strides");
    if h % largest != 0 || w % largest != 0 {
        return Err(Error::Config(format!("image {h}×{w} not divisible by stride {largest}")));
    }
    let d = cfg.width;
    let level_embed = tape.param("level_embed")?;
    let mut parts = Vec::new();
    let mut levels = Vec::new();
    let mut centers = Vec::new();
    let mut start = 0;
    for (l, &s) in cfg.strides.iter().enumerate() {
        let (lh, lw) = (h / s, w / s);
        let mut patches = Vec::with_capacity(lh * lw * s * s * ch);
        let mut pos = Vec::with_capacity(lh * lw * d);
        for i in 0..lh {
            for j in 0..lw {
                for r in 0..s {
                    let row = (i * s + r) * w + j * s;
                    patches.extend_from_slice(&image.data()[row * ch..(row + s) * ch]);
                }
                let (cx, cy) = ((j as f64 + 0.5) / lw as f64, (i as f64 + 0.5) / lh as f64);
                pos.extend(position_code(cx, cy, d));
                centers.extend([cx, cy]);
            }
        }
        let p = tape.input(Tensor::new(vec![lh * lw, s * s * ch], patches)?);
        let emb = tape.dense(p, &format!("patch.{l}"))?;
        let pos = tape.input(Tensor::new(vec![lh * lw, d], pos)?);
        let emb = tape.add(emb, pos)?;
        let lvl = tape.gather_rows(level_embed, &vec![l; lh * lw])?;
        parts.push(tape.add(emb, lvl)?);
        levels.push(LevelShape { height: lh, width: lw, start });
        start += lh * lw;
    }
    let mut x = tape.concat_rows(&parts)?;
    let refs = tape.input(Tensor::new(vec![start, 2], centers)?);
    for i in 0..cfg.encoder_layers {
        let hn = tape.norm(x, &format!("enc.{i}.ln1"))?;
        let m = msda_attention(tape, hn, refs, hn, &levels, &format!("enc.{i}.msda"), cfg.msda_heads, cfg.msda_points)?;
        x = tape.add(x, m.output)?;
        x = mlp_residual(tape, x, &format!("enc.{i}"))?;
    }
    Ok(PyramidNodes { values: x, levels })
}

/// Reference-point logits `[Q, 2]` of the learned queries.
pub fn reference_logits_on(tape: &mut Tape<'_>) -> Result<NodeId> {
    let pos = tape.param("query.pos")?;
    tape.dense(pos, "ref")
}

/// Records the query decoder; returns the decoded queries and, per decoder
/// layer, the pre-norm hidden state.
pub fn decode_queries_on(tape: &mut Tape<'_>, cfg: &ModelConfig, pyramid: &PyramidNodes) -> Result<(NodeId, Vec<NodeId>)> {
    let pos = tape.param("query.pos")?;
    let mut x = tape.param("query.content")?;
    let ref_logits = reference_logits_on(tape)?;
    let refs = tape.sigmoid(ref_logits)?;
    let mut hidden = Vec::new();
    for i in 0..cfg.decoder_layers {
        let h = tape.norm(x, &format!("dec.{i}.ln1"))?;
        let h = tape.add(h, pos)?;
        let qkv = tape.dense(h, &format!("dec.{i}.qkv"))?;
        let a = tape.attention(qkv, cfg.attn_heads)?;
        let o = tape.dense(a, &format!("dec.{i}.proj"))?;
        x = tape.add(x, o)?;
        let h = tape.norm(x, &format!("dec.{i}.ln_ca"))?;
        let h = tape.add(h, pos)?;
        let m = msda_attention(
            tape,
            h,
            refs,
            pyramid.values,
            &pyramid.levels,
            &format!("dec.{i}.msda"),
            cfg.msda_heads,
            cfg.msda_points,
        )?;
        x = tape.add(x, m.output)?;
        x = mlp_residual(tape, x, &format!("dec.{i}"))?;
        hidden.push(x);
    }
    Ok((tape.norm(x, "dec.norm")?, hidden))
}

/// Records token embedding `[T', d]`.
pub fn embed_tokens_on(tape: &mut Tape<'_>, cfg: &ModelConfig, query: &TokenQuery) -> Result<NodeId> {
    query.validate(cfg)?;
    let table = tape.param("tok.embed")?;
    let e = tape.gather_rows(table, &query.ids)?;
    let pos_table = tape.param("tok.pos")?;
    let pos = tape.slice_rows(pos_table, 0, query.ids.len())?;
    tape.add(e, pos)
}

/// Shared detection head on `[Q, d]` states.
pub fn head_on(tape: &mut Tape<'_>, h: NodeId, ref_logits: NodeId) -> Result<HeadNodes> {
    let h = tape.norm(h, "head.norm")?;
    let b = tape.dense(h, "head.box1")?;
    let b = tape.gelu(b)?;
    let delta = tape.dense(b, "head.box2")?;
    let anchor = tape.pad_cols(ref_logits, 4, 0)?;
    let z = tape.add(delta, anchor)?;
    let boxes = tape.sigmoid(z)?;
    let logits = tape.dense(h, "head.obj")?;
    Ok(HeadNodes { boxes, logits })
}

/// Records the late-fusion stack; one head readout per fusion block.
pub fn late_fusion_on(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    query_reprs: NodeId,
    text: NodeId,
    ref_logits: NodeId,
) -> Result<Vec<HeadNodes>> {
    let (q, d) = tape.value(query_reprs).dims2("late_fusion")?;
    let (t, dt) = tape.value(text).dims2("late_fusion")?;
    if d != dt || d != cfg.width {
        return Err(Error::shape("late_fusion", format!("query width {d}, text width {dt}, model width {}", cfg.width)));
    }
    if q + t > cfg.num_queries + cfg.max_tokens {
        return Err(Error::shape("late_fusion", format!("{q} queries + {t} tokens exceed the position table")));
    }
    let x = tape.concat_rows(&[query_reprs, text])?;
    let table = tape.param("fuse.pos")?;
    let pos = tape.slice_rows(table, 0, q + t)?;
    let mut x = tape.add(x, pos)?;
    let mut outs = Vec::with_capacity(cfg.fusion_blocks);
    for f in 0..cfg.fusion_blocks {
        x = sa_block(tape, x, &format!("fuse.{f}"), cfg.attn_heads)?;
        let h = tape.slice_rows(x, 0, q)?;
        outs.push(head_on(tape, h, ref_logits)?);
    }
    Ok(outs)
}

/// Node handles of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub pyramid: PyramidNodes,
    pub decoded: NodeId,
    pub ref_logits: NodeId,
    /// Fusion-block head readouts, one per text query.
    pub heads: Vec<Vec<HeadNodes>>,
    /// Decoder-layer head readouts (only with `decoder_aux_loss`).
    pub decoder_heads: Vec<HeadNodes>,
}

/// Records image encoding and decoding once, then fusion for each query.
pub fn forward_on(tape: &mut Tape<'_>, cfg: &ModelConfig, image: &Tensor, queries: &[TokenQuery]) -> Result<ForwardNodes> {
    let pyramid = encode_image_on(tape, cfg, image)?;
    let (decoded, hidden) = decode_queries_on(tape, cfg, &pyramid)?;
    let ref_logits = reference_logits_on(tape)?;
    let mut decoder_heads = Vec::new();
    if cfg.decoder_aux_loss {
        for &hid in &hidden {
            decoder_heads.push(head_on(tape, hid, ref_logits)?);
        }
    }
    let mut heads = Vec::with_capacity(queries.len());
    for q in queries {
        let text = embed_tokens_on(tape, cfg, q)?;
        heads.push(late_fusion_on(tape, cfg, decoded, text, ref_logits)?);
    }
    Ok(ForwardNodes { pyramid, decoded, ref_logits, heads, decoder_heads })
}

/// Reads head outputs off a tape.
pub fn read_set(tape: &Tape<'_>, h: HeadNodes) -> DetectionSet {
    let q = tape.value(h.logits).shape()[0];
    let logits = Tensor::vector(tape.value(h.logits).data().to_vec());
    debug_assert_eq!(logits.len(), q);
    DetectionSet::from_logits(tape.value(h.boxes).clone(), logits)
}

/// Image → feature pyramid.
pub fn encode_image(image: &Tensor, params: &ModelParams) -> Result<FeaturePyramid> {
    let mut tape = Tape::with_params(&params.store);
    let p = encode_image_on(&mut tape, &params.config, image)?;
    Ok(FeaturePyramid::from_flat(p.levels, params.config.strides.clone(), tape.value(p.values).clone()))
}

/// Pyramid → decoded object queries `[Q, d]`.
pub fn decode_queries(pyramid: &FeaturePyramid, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::with_params(&params.store);
    let values = tape.input(pyramid.values().clone());
    let nodes = PyramidNodes { values, levels: pyramid.levels().to_vec() };
    let (out, _) = decode_queries_on(&mut tape, &params.config, &nodes)?;
    Ok(tape.value(out).clone())
}

/// Reference points `[Q, 2]` of the learned queries, in `(0, 1)²`.
pub fn reference_points(params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::with_params(&params.store);
    let l = reference_logits_on(&mut tape)?;
    let r = tape.sigmoid(l)?;
    Ok(tape.value(r).clone())
}

/// Token ids → embeddings `[T', d]`.
pub fn embed_tokens(query: &TokenQuery, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::with_params(&params.store);
    let e = embed_tokens_on(&mut tape, &params.config, query)?;
    Ok(tape.value(e).clone())
}

/// Decoded queries and text embeddings → one detection set per fusion block.
pub fn late_fusion_forward(query_reprs: &Tensor, text_embs: &Tensor, params: &ModelParams) -> Result<Vec<DetectionSet>> {
    let mut tape = Tape::with_params(&params.store);
    let q = tape.input(query_reprs.clone());
    let t = tape.input(text_embs.clone());
    let r = reference_logits_on(&mut tape)?;
    let heads = late_fusion_on(&mut tape, &params.config, q, t, r)?;
    Ok(heads.into_iter().map(|h| read_set(&tape, h)).collect())
}

/// Full forward pass for one image and one query.
pub fn model_forward(image: &Tensor, query: &TokenQuery, params: &ModelParams) -> Result<Vec<DetectionSet>> {
    let mut tape = Tape::with_params(&params.store);
    let nodes = forward_on(&mut tape, &params.config, image, std::slice::from_ref(query))?;
    Ok(nodes.heads[0].iter().map(|h| read_set(&tape, *h)).collect())
}

/// Final-block detections in image pixels, sorted by objectness. With a
/// score threshold, only detections scoring above it are kept.
pub fn predict(
    image: &Tensor,
    query: &TokenQuery,
    params: &ModelParams,
    image_id: u64,
    score_thresh: Option<f64>,
) -> Result<Vec<Detection>> {
    let sets = model_forward(image, query, params)?;
    let last = sets.last().expect("at least one fusion block");
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut dets = last.to_detections(image_id, w, h);
    if let Some(t) = score_thresh {
        dets.retain(|d| d.score > t);
    }
    Ok(dets)
}

/// [`predict`] for images of any size: the image is resampled to the model
/// input and boxes are scaled back to the original pixels.
pub fn predict_scaled(
    image: &Tensor,
    query: &TokenQuery,
    params: &ModelParams,
    image_id: u64,
    score_thresh: Option<f64>,
) -> Result<Vec<Detection>> {
    let s = params.config.image_size;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if (h, w) == (s, s) {
        return predict(image, query, params, image_id, score_thresh);
    }
    let small = crate::eval_protocol::resize(image, s, s)?;
    let (sx, sy) = (w as f64 / s as f64, h as f64 / s as f64);
    Ok(predict(&small, query, params, image_id, score_thresh)?
        .into_iter()
        .map(|d| Detection { rect: d.rect.scale(sx, sy).clamp(w as f64, h as f64), ..d })
        .collect())
}
