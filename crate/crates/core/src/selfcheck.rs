//! Runnable verification suites: finite-difference gradient checks of
//! every differentiable op, and fast-path versus brute-force oracle
//! comparisons. Used by the `gradcheck` and `oracle` commands and the
//! acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::eval_protocol::{average_precision, EvalConfig};
use crate::geometry::{nms_class_agnostic, Detection, GroundTruthBox, Rect};
use crate::mask2box::{connected_components, BinaryMask, Connectivity};
use crate::matching_losses::{hungarian, set_loss, LossWeights};
use crate::model::{DetectionSet, ModelConfig, ModelParams, TokenQuery};
use crate::msda::{init_msda, msda_attention, msda_forward, FeaturePyramid, MsdaParams, MsdaShape, ReferencePoint};
use crate::numerics::{grad_check, grad_check_scalar, init_sa_block, sa_block, BlockShape, GradCheckOptions, LevelShape, ParamInit, ParamStore, Tensor};
use crate::oracle;
use crate::training::{sample_loss_with, TrainSample};

/// Worst relative error of one op over all seeds.
#[derive(Clone, Debug, Serialize)]
pub struct GradRow {
    pub op: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

fn row(op: &'static str, errors: Vec<f64>, tolerance: f64) -> GradRow {
    let max_rel_error = errors.iter().cloned().fold(0.0, f64::max);
    GradRow { op, seeds: errors.len(), max_rel_error, tolerance, pass: max_rel_error <= tolerance }
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { seed, ..GradCheckOptions::default() }
}

/// Gradient checks for every differentiable op over `seeds` seeds.
pub fn gradient_suite(seeds: u64) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    let empty = ParamStore::new();
    let per_seed = |f: &mut dyn FnMut(u64, &mut ChaCha8Rng) -> Result<f64>| -> Result<Vec<f64>> {
        (0..seeds).map(|s| f(s, &mut ChaCha8Rng::seed_from_u64(s))).collect()
    };

    let errs = per_seed(&mut |s, rng| {
        let inputs = vec![rand_tensor(rng, &[3, 4], -1.0, 1.0), rand_tensor(rng, &[4, 5], -1.0, 1.0), rand_tensor(rng, &[5], -1.0, 1.0)];
        grad_check(|t, ids| t.linear(ids[0], ids[1], ids[2]), &inputs, &empty, opts(s))
    })?;
    rows.push(row("linear", errs, OP_TOLERANCE));

    let errs = per_seed(&mut |s, rng| {
        let inputs = vec![rand_tensor(rng, &[3, 6], -2.0, 2.0)];
        grad_check(|t, ids| t.softmax(ids[0], 6), &inputs, &empty, opts(s))
    })?;
    rows.push(row("softmax", errs, OP_TOLERANCE));

    let errs = per_seed(&mut |s, rng| {
        let inputs = vec![rand_tensor(rng, &[3, 6], -1.0, 1.0), rand_tensor(rng, &[6], 0.5, 1.5), rand_tensor(rng, &[6], -0.5, 0.5)];
        grad_check(|t, ids| t.layer_norm(ids[0], ids[1], ids[2], 1e-5), &inputs, &empty, opts(s))
    })?;
    rows.push(row("layer_norm", errs, OP_TOLERANCE));

    let errs = per_seed(&mut |s, rng| {
        let mut store = ParamStore::new();
        init_sa_block(&mut ParamInit { store: &mut store, rng }, "blk", BlockShape { width: 8, hidden: 12, heads: 2 })?;
        jitter(&mut store, rng, 0.3);
        let inputs = vec![rand_tensor(rng, &[3, 8], -1.0, 1.0)];
        grad_check(|t, ids| sa_block(t, ids[0], "blk", 2), &inputs, &store, opts(s))
    })?;
    rows.push(row("sa_block", errs, OP_TOLERANCE));

    let errs = per_seed(&mut |s, rng| {
        // One head, one level, one point with weight 1: a plain bilinear read
        // of the value map at the reference plus offset.
        let levels = [LevelShape { height: 4, width: 5, start: 0 }];
        let inputs = vec![
            rand_tensor(rng, &[20, 3], -1.0, 1.0),
            rand_tensor(rng, &[2, 2], -1.3, 1.3),
            rand_tensor(rng, &[2, 2], 0.05, 0.95),
        ];
        grad_check(
            |t, ids| {
                let w = t.input(Tensor::full(&[2, 1], 1.0));
                t.msda_sample(ids[0], &levels, ids[1], w, ids[2], 1, 1)
            },
            &inputs,
            &empty,
            opts(s),
        )
    })?;
    rows.push(row("bilinear_sample", errs, OP_TOLERANCE));

    let errs = per_seed(&mut |s, rng| {
        let shape = MsdaShape { channels: 4, heads: 2, levels: 2, points: 2 };
        let mut store = ParamStore::new();
        init_msda(&mut ParamInit { store: &mut store, rng }, "msda", shape)?;
        jitter(&mut store, rng, 0.5);
        let levels = [LevelShape { height: 4, width: 3, start: 0 }, LevelShape { height: 2, width: 2, start: 12 }];
        let inputs = vec![rand_tensor(rng, &[2, 4], -1.0, 1.0), rand_tensor(rng, &[2, 2], 0.1, 0.9), rand_tensor(rng, &[16, 4], -1.0, 1.0)];
        grad_check(|t, ids| Ok(msda_attention(t, ids[0], ids[1], ids[2], &levels, "msda", 2, 2)?.output), &inputs, &store, opts(s))
    })?;
    rows.push(row("msda_forward", errs, OP_TOLERANCE));

    let errs = per_seed(&mut |s, rng| {
        let (q, f) = (5, 3);
        let targets: Vec<[f64; 4]> = (0..3).map(|_| [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3)]).collect();
        let mut inputs = Vec::new();
        for _ in 0..f {
            inputs.push(Tensor::from_fn(&[q, 4], |i| if i % 4 < 2 { rng.gen_range(0.2..0.8) } else { rng.gen_range(0.1..0.3) }));
            inputs.push(rand_tensor(rng, &[q], -2.0, 2.0));
        }
        let w = LossWeights::default();
        let eval = |_: &ParamStore, x: &[Tensor]| {
            let sets: Vec<DetectionSet> = x.chunks(2).map(|c| DetectionSet::from_logits(c[0].clone(), c[1].clone())).collect();
            let l = set_loss(&sets, &targets, &w)?;
            let grads = l.grads.into_iter().flat_map(|g| [g.boxes, g.logits]).collect();
            Ok((l.total, grads, Vec::new()))
        };
        grad_check_scalar(&eval, &inputs, &empty, opts(s))
    })?;
    rows.push(row("set_loss", errs, OP_TOLERANCE));

    let errs = per_seed(&mut |s, rng| {
        let cfg = ModelConfig {
            image_size: 16,
            strides: vec![4, 8],
            width: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            num_queries: 3,
            fusion_blocks: 2,
            max_tokens: 4,
            attn_heads: 2,
            msda_heads: 2,
            msda_points: 2,
            mlp_hidden: 16,
            seed: s,
            ..ModelConfig::default()
        };
        let mut params = ModelParams::init(cfg.clone())?;
        jitter(&mut params.store, rng, 0.2);
        let sample = TrainSample {
            image: rand_tensor(rng, &[16, 16, 1], 0.0, 1.0),
            groups: vec![
                (TokenQuery::parse("all objects")?, vec![[0.3, 0.3, 0.2, 0.3], [0.7, 0.6, 0.4, 0.3]]),
                (TokenQuery::parse("small objects")?, vec![[0.3, 0.3, 0.2, 0.3]]),
            ],
        };
        let w = LossWeights::default();
        let eval = |store: &ParamStore, _: &[Tensor]| {
            let l = sample_loss_with(&cfg, store, &sample, &w)?;
            Ok((l.total, Vec::new(), l.grads))
        };
        grad_check_scalar(&eval, &[], &params.store, GradCheckOptions { step: 1e-6, seed: s, max_per_tensor: Some(3) })
    })?;
    rows.push(row("model_end_to_end", errs, END_TO_END_TOLERANCE));
    Ok(rows)
}

/// Outcome of one fast-versus-reference comparison.
#[derive(Clone, Debug, Serialize)]
pub struct OracleRow {
    pub check: &'static str,
    pub instances: usize,
    pub mismatches: usize,
    /// Largest numeric difference (0 for exact comparisons).
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn oracle_row(check: &'static str, instances: usize, mismatches: usize, max_abs_diff: f64, tolerance: f64) -> OracleRow {
    OracleRow { check, instances, mismatches, max_abs_diff, tolerance, pass: mismatches == 0 && max_abs_diff <= tolerance }
}

fn random_rect(rng: &mut ChaCha8Rng) -> Rect {
    let (x, y) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
    Rect::new(x, y, x + rng.gen_range(1.0..20.0), y + rng.gen_range(1.0..20.0)).expect("positive extent")
}

/// Instance counts of the oracle suite.
#[derive(Clone, Copy, Debug)]
pub struct OracleCounts {
    pub hungarian: usize,
    pub nms: usize,
    pub ap: usize,
    pub components: usize,
    pub msda: usize,
}

impl Default for OracleCounts {
    fn default() -> Self {
        OracleCounts { hungarian: 200, nms: 500, ap: 100, components: 200, msda: 20 }
    }
}

/// Compares every fast path against its brute-force oracle on seeded
/// random instances.
pub fn oracle_suite(counts: OracleCounts, seed: u64) -> Result<Vec<OracleRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();

    let mut bad = 0;
    for _ in 0..counts.hungarian {
        let m = rng.gen_range(1..=7);
        let n = rng.gen_range(m..=7);
        // Small integer costs make ties common; totals are compared exactly.
        let cost = Tensor::from_fn(&[n, m], |_| rng.gen_range(0..10) as f64);
        let fast = hungarian(&cost)?;
        let (best, _) = oracle::assignment_brute_force(&cost);
        let targets: Vec<usize> = fast.pairs.iter().map(|p| p.1).collect();
        let mut preds: Vec<usize> = fast.pairs.iter().map(|p| p.0).collect();
        preds.sort_unstable();
        preds.dedup();
        if fast.total_cost(&cost) != best || targets != (0..m).collect::<Vec<_>>() || preds.len() != m {
            bad += 1;
        }
    }
    rows.push(oracle_row("hungarian_vs_permutations", counts.hungarian, bad, 0.0, 0.0));

    let mut bad = 0;
    for _ in 0..counts.nms {
        let n = rng.gen_range(0..30);
        let dets: Vec<Detection> = (0..n).map(|_| Detection::new(0, random_rect(&mut rng), rng.gen_range(0..20) as f64 / 20.0)).collect();
        let t = rng.gen_range(0.0..1.0);
        if nms_class_agnostic(&dets, t) != oracle::nms_reference(&dets, t) {
            bad += 1;
        }
    }
    rows.push(oracle_row("nms_vs_reference", counts.nms, bad, 0.0, 0.0));

    let mut worst = 0.0_f64;
    let cfg = EvalConfig::default();
    for _ in 0..counts.ap {
        let gts: Vec<GroundTruthBox> = (0..rng.gen_range(0..8))
            .map(|_| GroundTruthBox { image_id: 0, rect: random_rect(&mut rng), category_id: 1, known: true })
            .collect();
        let dets: Vec<Detection> = (0..rng.gen_range(0..15))
            .map(|_| {
                let rect = if !gts.is_empty() && rng.gen_bool(0.6) {
                    let g = gts[rng.gen_range(0..gts.len())].rect;
                    g.translate(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))
                } else {
                    random_rect(&mut rng)
                };
                Detection::new(0, rect, rng.gen_range(0.0..1.0))
            })
            .collect();
        let fast = average_precision(&dets, &gts, &cfg).ap;
        worst = worst.max((fast - oracle::ap_brute_force(&dets, &gts, cfg.iou_thresh)).abs());
    }
    rows.push(oracle_row("ap_vs_operating_points", counts.ap, 0, worst, 1e-12));

    let mut bad = 0;
    for _ in 0..counts.components {
        let (h, w) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let p = rng.gen_range(0.1..0.7);
        let mask = BinaryMask::new(h, w, (0..h * w).map(|_| rng.gen_bool(p)).collect())?;
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let l = connected_components(&mask, conn);
            let (labels, count) = oracle::flood_fill_labels(mask.data(), h, w, conn == Connectivity::Eight);
            if l.components.len() != count || l.labels != labels {
                bad += 1;
            }
        }
    }
    rows.push(oracle_row("components_vs_flood_fill", counts.components, bad, 0.0, 0.0));

    let mut worst = 0.0_f64;
    for s in 0..counts.msda {
        let shape = MsdaShape { channels: 8, heads: 2, levels: 3, points: 3 };
        let mut params = MsdaParams::init(shape, s as u64)?;
        jitter(&mut params.store, &mut rng, 0.5);
        let maps: Vec<Tensor> = [(6, 5), (3, 3), (2, 1)].iter().map(|&(h, w)| rand_tensor(&mut rng, &[h, w, 8], -1.0, 1.0)).collect();
        let pyr = FeaturePyramid::from_maps(&maps, &[4, 8, 16])?;
        let q = rand_tensor(&mut rng, &[4, 8], -1.0, 1.0);
        let refs: Vec<ReferencePoint> =
            (0..4).map(|_| ReferencePoint::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))).collect::<Result<_>>()?;
        let fast = msda_forward(&q, &refs, &pyr, &params)?.output;
        let slow = oracle::msda_reference(&q, &refs, &maps, &params.store, "msda", 2, 3);
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    rows.push(oracle_row("msda_vs_loops", counts.msda, 0, worst, 1e-12));
    Ok(rows)
}
