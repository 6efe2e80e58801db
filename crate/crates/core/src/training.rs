//! Loss assembly over the tape and a deterministic Adam trainer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching_losses::{set_loss, LossWeights, TargetBox};
use crate::model::{forward_on, read_set, HeadNodes, ModelParams, TokenQuery};
use crate::numerics::{NodeId, ParamStore, Tape, Tensor};

/// One image with its caption groups: each query has its own target boxes
/// in normalized `(cx, cy, w, h)`.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: Tensor,
    pub groups: Vec<(TokenQuery, Vec<TargetBox>)>,
}

/// Loss of one sample with per-parameter gradients.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub total: f64,
    /// Loss of each fusion block summed over groups.
    pub per_block: Vec<f64>,
    pub grads: Vec<Option<Tensor>>,
}

fn seed_head(seeds: &mut Vec<(NodeId, Tensor)>, h: HeadNodes, boxes: Tensor, logits: Tensor) {
    let q = logits.len();
    seeds.push((h.boxes, boxes));
    seeds.push((h.logits, logits.reshape(vec![q, 1]).expect("logit grad shape")));
}

/// Forward and backward for one sample. Every fusion block's head loss
/// (and each decoder layer's, if enabled) is summed over all groups.
pub fn sample_loss(params: &ModelParams, sample: &TrainSample, w: &LossWeights) -> Result<SampleLoss> {
    sample_loss_with(&params.config, &params.store, sample, w)
}

pub(crate) fn sample_loss_with(
    cfg: &crate::model::ModelConfig,
    store: &ParamStore,
    sample: &TrainSample,
    w: &LossWeights,
) -> Result<SampleLoss> {
    if sample.groups.is_empty() {
        return Err(Error::Validation("training sample without caption groups".into()));
    }
    let mut tape = Tape::with_params(store);
    let queries: Vec<TokenQuery> = sample.groups.iter().map(|(q, _)| q.clone()).collect();
    let nodes = forward_on(&mut tape, cfg, &sample.image, &queries)?;
    let mut seeds = Vec::new();
    let mut total = 0.0;
    let mut per_block = vec![0.0; cfg.fusion_blocks];
    for (heads, (_, targets)) in nodes.heads.iter().zip(&sample.groups) {
        let mut all: Vec<HeadNodes> = heads.clone();
        all.extend(nodes.decoder_heads.iter().copied());
        let sets: Vec<_> = all.iter().map(|h| read_set(&tape, *h)).collect();
        let loss = set_loss(&sets, targets, w)?;
        total += loss.total;
        for (f, terms) in loss.per_set.iter().take(cfg.fusion_blocks).enumerate() {
            per_block[f] += terms.total();
        }
        for (h, g) in all.iter().zip(loss.grads) {
            seed_head(&mut seeds, *h, g.boxes, g.logits);
        }
    }
    let grads = tape.backward(&seeds)?;
    Ok(SampleLoss { total, per_block, grads: tape.param_grads(&grads) })
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch after which the learning rate is multiplied by `lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            lr_drop_epoch: 8,
            lr_drop_factor: 0.1,
            grad_clip: 0.1,
            weight_decay: 1e-4,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimizer settings: {self:?}")));
        }
        self.loss.validate()
    }

    /// The same setting trained twice as long (lr drop moved proportionally).
    pub fn longer_schedule(&self) -> TrainConfig {
        TrainConfig { epochs: self.epochs * 2, lr_drop_epoch: self.lr_drop_epoch * 2, ..self.clone() }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((x, &gj), (mj, vj)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                *x -= lr * ((*mj / c1) / ((*vj / c2).sqrt() + self.eps) + weight_decay * *x);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.dot(g)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.scale(s);
        }
    }
    norm
}

/// Per-epoch training record.
#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

fn accumulate(acc: &mut [Option<Tensor>], add: Vec<Option<Tensor>>) {
    for (a, g) in acc.iter_mut().zip(add) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Trains in place. Samples are shuffled per epoch from `cfg.seed`; each
/// batch's gradients are averaged, clipped, and applied with Adam.
/// `on_epoch` sees the parameters after every epoch.
pub fn train(
    params: &mut ModelParams,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &ModelParams),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params.store);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = if epoch >= cfg.lr_drop_epoch { cfg.lr * cfg.lr_drop_factor } else { cfg.lr };
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<Tensor>> = vec![None; params.store.len()];
            for &i in batch {
                let l = sample_loss(params, &samples[i], &cfg.loss)?;
                sum += l.total;
                accumulate(&mut acc, l.grads);
            }
            for g in acc.iter_mut().flatten() {
                g.scale(1.0 / batch.len() as f64);
            }
            clip_grad_norm(&mut acc, cfg.grad_clip);
            adam.update(&mut params.store, &acc, lr, cfg.weight_decay);
        }
        let stats = EpochStats { epoch, mean_loss: sum / samples.len() as f64, lr };
        log::info!("epoch {epoch}: loss {:.4} lr {lr:e}", stats.mean_loss);
        on_epoch(&stats, params);
        history.push(stats);
    }
    Ok(history)
}

/// Normalized `(cx, cy, w, h)` of a pixel box.
pub fn normalized_target(r: &crate::geometry::Rect, width: f64, height: f64) -> TargetBox {
    let [cx, cy, w, h] = r.to_format(crate::geometry::BoxFormat::Cxcywh);
    [cx / width, cy / height, w / width, h / height]
}

/// Training samples for the listed images: each image gets its caption
/// groups, with `default_query` standing in for caption-free groups.
/// Images without groups are skipped.
pub fn build_samples(
    images: &[(u64, Tensor)],
    groups: &[crate::data_io::CaptionGroup],
    default_query: &TokenQuery,
) -> Vec<TrainSample> {
    let by = crate::eval_protocol::by_image(groups, |g| g.image_id);
    images
        .iter()
        .filter_map(|(id, image)| {
            let gs = by.get(id)?;
            let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
            let groups = gs
                .iter()
                .map(|g| {
                    let q = g.query.clone().unwrap_or_else(|| default_query.clone());
                    (q, g.targets.iter().map(|r| normalized_target(r, w, h)).collect())
                })
                .collect();
            Some(TrainSample { image: image.clone(), groups })
        })
        .collect()
}
