use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mavlkit::data_io::{
    ablation_setting1_merge, ablation_setting2_nms, ablation_setting3_group, gen_synthetic_dataset,
    groups_from_merged, load_ground_truth, load_proposals, pixels_to_tensor, read_pgm, read_synthetic, save_detections,
    write_synthetic, ManifestGroup, SyntheticSpec,
};
use mavlkit::eval_protocol::{
    combine_query_detections, evaluate_image, per_image_inputs, reduce, tiled_inference, top_n, ApInterpolation, ImageEval,
    RecallPooling, SizeBuckets,
};
use mavlkit::experiment::{run_toy, run_toy_on, AblationSetting, ToyConfig};
use mavlkit::mask2box::{mask_to_boxes, Connectivity, Mask2BoxConfig};
use mavlkit::model::predict_scaled;
use mavlkit::pseudo_label::{generate_unknown_pseudo_labels, PseudoLabelConfig};
use mavlkit::selfcheck::{gradient_suite, oracle_suite, OracleCounts};
use mavlkit::{checkpoint, Detection, EvalConfig, TokenQuery};
use rayon::prelude::*;
use rayon::ThreadPool;
use serde_json::json;

use crate::args::*;
use crate::report::{f, Outcome, Table};
use crate::CliError;

type Res<T> = std::result::Result<T, CliError>;

fn input_file(p: &Path) -> Res<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("input file {} does not exist", p.display())))
    }
}

fn input_dir(p: &Path) -> Res<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("input directory {} does not exist", p.display())))
    }
}

/// The output's parent directory must exist and the path must not be a directory.
fn output_file(p: &Path) -> Res<()> {
    let parent_ok = match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.is_dir(),
        _ => true,
    };
    if !parent_ok || p.is_dir() {
        return Err(CliError::Invalid(format!("cannot write output file {}", p.display())));
    }
    Ok(())
}

fn output_dir(p: &Path) -> Res<()> {
    if p.is_file() {
        return Err(CliError::Invalid(format!("output directory {} is a file", p.display())));
    }
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() && !d.is_dir() => {
            Err(CliError::Invalid(format!("parent of output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn write(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(|e| CliError::Core(e.into()))
}

pub fn run(command: &Command, seed: u64, pool: &ThreadPool) -> Res<Outcome> {
    match command {
        Command::Eval(a) => eval(a, pool),
        Command::Combine(a) => combine(a, pool),
        Command::Infer(a) => infer(a, pool),
        Command::Pseudolabel(a) => pseudolabel(a),
        Command::Mask2box(a) => mask2box(a),
        Command::GenSynth(a) => gen_synth(a, seed),
        Command::Ablate(a) => ablate(a, seed),
        Command::TrainToy(a) => train_toy(a, seed),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Oracle(a) => oracle(a, seed),
    }
}

fn eval(a: &EvalArgs, pool: &ThreadPool) -> Res<Outcome> {
    input_file(&a.gt)?;
    input_file(&a.dets)?;
    let cfg = EvalConfig {
        iou_thresh: a.protocol.iou,
        top_n: a.protocol.top_n,
        score_thresh: a.protocol.score_thresh,
        interpolation: if a.eleven_point { ApInterpolation::ElevenPoint } else { ApInterpolation::AllPoint },
        recall_pooling: if a.per_image_recall { RecallPooling::PerImage } else { RecallPooling::Pooled },
        ..EvalConfig::default()
    };
    cfg.validate()?;
    let buckets = SizeBuckets { small: a.small, large: a.large };
    buckets.validate()?;
    if a.recall_at.contains(&0) {
        return Err(CliError::Invalid("recall cut-offs must be positive".into()));
    }
    let ds = load_ground_truth(&a.gt)?;
    let dets = load_proposals(&a.dets)?;
    let inputs = per_image_inputs(&dets, &ds.annotations, &ds.sizes())?;
    let evals: Vec<ImageEval> = pool.install(|| {
        inputs.par_iter().map(|(id, d, g, s)| evaluate_image(*id, d, g, *s, &cfg, &buckets, &a.recall_at)).collect()
    });
    let report = reduce(evals, &cfg, &a.recall_at);

    let mut t = Table::new(&["metric", "value"]);
    t.row(vec!["AP50".into(), f(report.ap50)]);
    t.row(vec![format!("R50 (top {})", cfg.top_n), f(report.r50)]);
    for (n, r) in &report.curve {
        t.row(vec![format!("recall@{n}"), f(*r)]);
    }
    for (b, c) in &report.buckets {
        t.row(vec![format!("recall {b:?}").to_lowercase(), format!("{} ({}/{})", f(c.recall()), c.matched, c.total)]);
    }
    let names: BTreeMap<u64, &str> = ds.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    for (id, r) in &report.per_category {
        t.row(vec![format!("recall {}", names.get(id).copied().unwrap_or("?")), f(*r)]);
    }
    let config = json!({
        "gt": display(&a.gt), "dets": display(&a.dets), "eval": cfg,
        "buckets": buckets, "recall_at": a.recall_at,
    });
    Ok(Outcome::new(config, report, t))
}

fn combine(a: &CombineArgs, pool: &ThreadPool) -> Res<Outcome> {
    for s in &a.sources {
        input_file(s)?;
    }
    output_file(&a.out)?;
    let cfg = EvalConfig { nms_thresh: a.nms, top_n: a.top_n, ..EvalConfig::default() };
    cfg.validate()?;
    let sources: Vec<Vec<Detection>> = a.sources.iter().map(|p| load_proposals(p)).collect::<mavlkit::Result<_>>()?;
    let mut ids: Vec<u64> = sources.iter().flatten().map(|d| d.image_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let combined: Vec<Vec<Detection>> = pool.install(|| {
        ids.par_iter()
            .map(|id| {
                let per: Vec<Vec<Detection>> =
                    sources.iter().map(|s| s.iter().filter(|d| d.image_id == *id).cloned().collect()).collect();
                combine_query_detections(&per, &cfg)
            })
            .collect()
    });
    let out: Vec<Detection> = combined.into_iter().flatten().collect();
    save_detections(&a.out, &out)?;

    let mut t = Table::new(&["source", "detections"]);
    for (p, s) in a.sources.iter().zip(&sources) {
        t.row(vec![display(p), s.len().to_string()]);
    }
    t.row(vec!["combined".into(), out.len().to_string()]);
    let config = json!({
        "sources": a.sources.iter().map(|p| display(p)).collect::<Vec<_>>(),
        "nms": a.nms, "top_n": a.top_n, "out": display(&a.out),
    });
    let result = json!({
        "source_detections": sources.iter().map(Vec::len).collect::<Vec<_>>(),
        "images": ids.len(), "detections": out.len(),
    });
    Ok(Outcome::new(config, result, t))
}

fn infer(a: &InferArgs, pool: &ThreadPool) -> Res<Outcome> {
    input_file(&a.checkpoint)?;
    for p in &a.images {
        input_file(p)?;
    }
    output_file(&a.out)?;
    let query = TokenQuery::parse(&a.query)?;
    let cfg = EvalConfig { nms_thresh: a.nms, top_n: a.top_n, ..EvalConfig::default() };
    cfg.validate()?;
    if a.tiles == Some(0) {
        return Err(CliError::Invalid("--tiles must be positive".into()));
    }
    let params = checkpoint::load(&a.checkpoint)?;
    query.validate(&params.config)?;
    let text = query.text();
    let per_image: Vec<mavlkit::Result<Vec<Detection>>> = pool.install(|| {
        a.images
            .par_iter()
            .enumerate()
            .map(|(i, path)| {
                let id = i as u64 + 1;
                let (w, h, pixels) = read_pgm(path)?;
                let image = pixels_to_tensor(w, h, &pixels)?;
                let detect = |img: &mavlkit::Tensor| predict_scaled(img, &query, &params, id, a.score_thresh);
                let dets = match a.tiles {
                    Some(n) => tiled_inference(&image, detect, n, &cfg)?,
                    None => top_n(&detect(&image)?, cfg.top_n),
                };
                Ok(dets.into_iter().map(|d| d.with_query(text.clone())).collect())
            })
            .collect()
    });
    let mut t = Table::new(&["image_id", "file", "detections"]);
    let mut counts = Vec::new();
    let mut all = Vec::new();
    for (i, (path, r)) in a.images.iter().zip(per_image).enumerate() {
        let dets = r?;
        t.row(vec![(i + 1).to_string(), display(path), dets.len().to_string()]);
        counts.push(dets.len());
        all.extend(dets);
    }
    save_detections(&a.out, &all)?;
    let config = json!({
        "checkpoint": display(&a.checkpoint),
        "images": a.images.iter().map(|p| display(p)).collect::<Vec<_>>(),
        "query": text, "tiles": a.tiles, "nms": a.nms, "top_n": a.top_n,
        "score_thresh": a.score_thresh, "out": display(&a.out), "model": params.config,
    });
    Ok(Outcome::new(config, json!({ "detections_per_image": counts, "detections": all.len() }), t))
}

fn pseudolabel(a: &PseudolabelArgs) -> Res<Outcome> {
    input_file(&a.proposals)?;
    input_file(&a.known_gt)?;
    output_file(&a.out)?;
    let cfg = PseudoLabelConfig { min_score: a.min_score, max_known_iou: a.max_known_iou, nms: a.nms };
    cfg.validate()?;
    let proposals = load_proposals(&a.proposals)?;
    let known = load_ground_truth(&a.known_gt)?;
    let labels = generate_unknown_pseudo_labels(&proposals, &known.annotations, &cfg);
    save_detections(&a.out, &labels)?;
    let mut t = Table::new(&["stage", "boxes"]);
    t.row(vec!["proposals".into(), proposals.len().to_string()]);
    t.row(vec!["known gt".into(), known.annotations.len().to_string()]);
    t.row(vec!["pseudo-labels".into(), labels.len().to_string()]);
    let config = json!({
        "proposals": display(&a.proposals), "known_gt": display(&a.known_gt),
        "pseudo_label": cfg, "out": display(&a.out),
    });
    let result = json!({ "proposals": proposals.len(), "known_gt": known.annotations.len(), "pseudo_labels": labels.len() });
    Ok(Outcome::new(config, result, t))
}

fn mask2box(a: &Mask2boxArgs) -> Res<Outcome> {
    input_file(&a.mask)?;
    output_file(&a.out)?;
    let cfg = Mask2BoxConfig { connectivity: Connectivity::from_count(a.connectivity)?, min_area: a.min_area, threshold: a.threshold };
    let (w, h, pixels) = read_pgm(&a.mask)?;
    let boxes = mask_to_boxes(h, w, &pixels, &cfg, a.image_id)?;
    save_detections(&a.out, &boxes)?;
    let mut t = Table::new(&["x_min", "y_min", "x_max", "y_max", "score"]);
    for d in &boxes {
        let r = d.rect;
        t.row(vec![r.x_min.to_string(), r.y_min.to_string(), r.x_max.to_string(), r.y_max.to_string(), f(d.score)]);
    }
    let config = json!({ "mask": display(&a.mask), "mask2box": cfg, "image_id": a.image_id, "out": display(&a.out) });
    Ok(Outcome::new(config, json!({ "width": w, "height": h, "boxes": boxes.len() }), t))
}

fn gen_synth(a: &GenSynthArgs, seed: u64) -> Res<Outcome> {
    output_dir(&a.out)?;
    let spec = SyntheticSpec {
        num_images: a.images,
        image_size: a.size,
        min_shapes: a.min_shapes,
        max_shapes: a.max_shapes,
        noise: a.noise,
        seed,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic_dataset(&spec)?;
    write_synthetic(&a.out, &data, &spec)?;
    let mut per_query: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for g in &data.groups {
        let e = per_query.entry(g.query.as_ref().map(TokenQuery::text).unwrap_or_default()).or_default();
        e.0 += 1;
        e.1 += g.targets.len();
    }
    let mut t = Table::new(&["query", "groups", "boxes"]);
    for (q, (g, b)) in &per_query {
        t.row(vec![q.clone(), g.to_string(), b.to_string()]);
    }
    let result = json!({
        "images": data.images.len(), "annotations": data.dataset.annotations.len(),
        "groups": data.groups.len(),
        "per_query": per_query.iter().map(|(q, (g, b))| (q.clone(), json!({ "groups": g, "boxes": b }))).collect::<BTreeMap<_, _>>(),
    });
    Ok(Outcome::new(json!({ "out": display(&a.out), "synthetic": spec }), result, t))
}

fn ablate(a: &AblateArgs, seed: u64) -> Res<Outcome> {
    input_dir(&a.data)?;
    output_file(&a.out)?;
    if !(1..=3).contains(&a.setting) {
        return Err(CliError::Invalid(format!("--setting must be 1, 2 or 3, got {}", a.setting)));
    }
    if a.group_size == 0 || !(0.0..=1.0).contains(&a.nms) {
        return Err(CliError::Invalid("--group-size must be positive and --nms in [0, 1]".into()));
    }
    let (_, data) = read_synthetic(&a.data)?;
    let merged = ablation_setting1_merge(&data.groups);
    let groups = match a.setting {
        1 => groups_from_merged(&merged),
        2 => groups_from_merged(&ablation_setting2_nms(&merged, a.nms)),
        _ => ablation_setting3_group(&ablation_setting2_nms(&merged, a.nms), a.group_size, seed)?,
    };
    let records: Vec<ManifestGroup> = groups.iter().map(ManifestGroup::from_group).collect();
    let mut text = serde_json::to_string_pretty(&records).expect("groups serialize");
    text.push('\n');
    write(&a.out, &text)?;
    let boxes_in: usize = data.groups.iter().map(|g| g.targets.len()).sum();
    let boxes_out: usize = groups.iter().map(|g| g.targets.len()).sum();
    let mut t = Table::new(&["", "groups", "boxes"]);
    t.row(vec!["input".into(), data.groups.len().to_string(), boxes_in.to_string()]);
    t.row(vec![format!("setting {}", a.setting), groups.len().to_string(), boxes_out.to_string()]);
    let config = json!({
        "data": display(&a.data), "setting": a.setting, "group_size": a.group_size,
        "nms": a.nms, "out": display(&a.out),
    });
    let result = json!({ "groups_in": data.groups.len(), "boxes_in": boxes_in, "groups_out": groups.len(), "boxes_out": boxes_out });
    Ok(Outcome::new(config, result, t))
}

fn train_toy(a: &TrainToyArgs, seed: u64) -> Res<Outcome> {
    if let Some(p) = &a.config {
        input_file(p)?;
    }
    if let Some(d) = &a.data {
        input_dir(d)?;
    }
    if let Some(p) = &a.checkpoint {
        output_file(p)?;
    }
    let mut cfg: ToyConfig = match &a.config {
        Some(p) => mavlkit::data_io::parse_json(&fs::read(p).map_err(|e| CliError::Core(e.into()))?)?,
        None => ToyConfig::default(),
    };
    let data = match &a.data {
        Some(d) => {
            let (spec, data) = read_synthetic(d)?;
            cfg.data = SyntheticSpec { num_images: data.images.len(), ..spec };
            Some(data)
        }
        None => None,
    };
    if let Some(n) = a.images {
        if data.is_some() {
            return Err(CliError::Invalid("--images cannot be combined with --data".into()));
        }
        cfg.data.num_images = n;
    }
    if let Some(n) = a.train_images {
        cfg.train_images = n;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
        cfg.train.lr_drop_epoch = e * 4 / 5;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(s) = a.setting {
        cfg.setting = AblationSetting::from_index(s)?;
    }
    if let Some(w) = a.width {
        cfg.model.width = w;
        cfg.model.mlp_hidden = 2 * w;
    }
    if let Some(q) = a.queries {
        cfg.model.num_queries = q;
    }
    if let Some(fb) = a.fusion_blocks {
        cfg.model.fusion_blocks = fb;
    }
    cfg.model.image_size = cfg.data.image_size;
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    let log = |s: &mavlkit::training::EpochStats| log::info!("epoch {} mean loss {:.4}", s.epoch, s.mean_loss);
    let (report, params) = match &data {
        Some(d) => run_toy_on(&cfg, d, log)?,
        None => run_toy(&cfg, log)?,
    };
    if let Some(p) = &a.checkpoint {
        checkpoint::save(p, &params)?;
    }
    let mut t = Table::new(&["metric", "value"]);
    t.row(vec!["setting".into(), report.setting.to_string()]);
    t.row(vec!["train / test images".into(), format!("{} / {}", report.train_images, report.test_images)]);
    if let Some(last) = report.history.last() {
        t.row(vec!["final mean loss".into(), f(last.mean_loss)]);
    }
    t.row(vec![format!("AP50 ({})", cfg.eval_query), f(report.eval.ap50)]);
    t.row(vec![format!("R50 ({})", cfg.eval_query), f(report.eval.r50)]);
    let n = cfg.conditioning_top_n;
    t.row(vec![format!("small recall@{n} ({})", cfg.eval_query), f(report.small_recall_eval_query)]);
    t.row(vec![format!("small recall@{n} ({})", cfg.small_query), f(report.small_recall_small_query)]);
    let config = json!({
        "toy": cfg,
        "data": a.data.as_deref().map(display),
        "checkpoint": a.checkpoint.as_deref().map(display),
    });
    Ok(Outcome::new(config, report, t))
}

fn gradcheck(a: &GradcheckArgs) -> Res<Outcome> {
    if a.seeds == 0 {
        return Err(CliError::Invalid("--seeds must be positive".into()));
    }
    let rows = gradient_suite(a.seeds)?;
    let mut t = Table::new(&["op", "seeds", "max rel err", "tolerance", "status"]);
    for r in &rows {
        let status = if r.pass { "ok" } else { "FAIL" };
        t.row(vec![r.op.into(), r.seeds.to_string(), format!("{:.3e}", r.max_rel_error), format!("{:.0e}", r.tolerance), status.into()]);
    }
    let failed = rows.iter().any(|r| !r.pass);
    let mut o = Outcome::new(json!({ "seeds": a.seeds }), json!({ "pass": !failed, "ops": rows }), t);
    o.failed = failed;
    Ok(o)
}

fn oracle(a: &OracleArgs, seed: u64) -> Res<Outcome> {
    let counts = OracleCounts { hungarian: a.hungarian, nms: a.nms, ap: a.ap, components: a.components, msda: a.msda };
    let rows = oracle_suite(counts, seed)?;
    let mut t = Table::new(&["check", "instances", "mismatches", "max abs diff", "status"]);
    for r in &rows {
        let status = if r.pass { "ok" } else { "FAIL" };
        t.row(vec![
            r.check.into(),
            r.instances.to_string(),
            r.mismatches.to_string(),
            format!("{:.3e}", r.max_abs_diff),
            status.into(),
        ]);
    }
    let failed = rows.iter().any(|r| !r.pass);
    let config = json!({
        "hungarian": a.hungarian, "nms": a.nms, "ap": a.ap, "components": a.components, "msda": a.msda,
    });
    let mut o = Outcome::new(config, json!({ "pass": !failed, "checks": rows }), t);
    o.failed = failed;
    Ok(o)
}
