//! End-to-end toy experiment: synthetic shapes, optional caption-structure
//! ablation, training, and held-out evaluation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data_io::{
    ablation_setting1_merge, ablation_setting2_nms, ablation_setting3_group, gen_synthetic_dataset, groups_from_merged,
    CaptionGroup, SyntheticDataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval_protocol::{evaluate, size_bucket_recall, EvalConfig, EvalReport, SizeBuckets};
use crate::geometry::{Detection, GroundTruthBox};
use crate::model::{predict, ModelConfig, ModelParams, TokenQuery};
use crate::numerics::Tensor;
use crate::training::{build_samples, train, EpochStats, TrainConfig};

/// How training groups are derived from the generated caption groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSetting {
    /// All groups of an image concatenated into one caption-free list.
    Merge,
    /// `Merge` followed by class-agnostic NMS.
    MergeNms,
    /// `MergeNms` regrouped at random into small caption-free groups.
    Regroup,
    /// `Regroup` trained for twice as many epochs.
    RegroupLonger,
    /// Original query groups.
    #[default]
    Grouped,
}

impl AblationSetting {
    pub fn from_index(i: u32) -> Result<Self> {
        Ok(match i {
            1 => AblationSetting::Merge,
            2 => AblationSetting::MergeNms,
            3 => AblationSetting::Regroup,
            4 => AblationSetting::RegroupLonger,
            5 => AblationSetting::Grouped,
            _ => return Err(Error::Config(format!("ablation setting {i} is not in 1..=5"))),
        })
    }

    pub fn index(&self) -> u32 {
        match self {
            AblationSetting::Merge => 1,
            AblationSetting::MergeNms => 2,
            AblationSetting::Regroup => 3,
            AblationSetting::RegroupLonger => 4,
            AblationSetting::Grouped => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    /// Generated images; the first `train_images` train, the rest are held out.
    pub data: SyntheticSpec,
    pub train_images: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub setting: AblationSetting,
    pub group_size: usize,
    pub merge_nms_thresh: f64,
    /// Query used for caption-free groups and for AP / recall.
    pub eval_query: String,
    /// Query whose small-object recall is compared against `eval_query`.
    pub small_query: String,
    /// Detections per image counted by the small-object recall comparison.
    pub conditioning_top_n: usize,
    pub eval: EvalConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            data: SyntheticSpec { num_images: 2200, ..SyntheticSpec::default() },
            train_images: 2000,
            model: ModelConfig::default(),
            train: TrainConfig { epochs: 10, lr: 2e-3, lr_drop_epoch: 8, ..TrainConfig::default() },
            setting: AblationSetting::Grouped,
            group_size: 6,
            merge_nms_thresh: 0.9,
            eval_query: "all objects".into(),
            small_query: "small objects".into(),
            conditioning_top_n: 2,
            eval: EvalConfig::default(),
        }
    }
}

impl ToyConfig {
    /// Applies one seed to data, model initialization and shuffling.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.train_images == 0 || self.train_images >= self.data.num_images {
            return Err(Error::Config(format!(
                "train_images must be in 1..{} to leave a held-out split",
                self.data.num_images
            )));
        }
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config("synthetic image size differs from the model input size".into()));
        }
        if self.conditioning_top_n == 0 {
            return Err(Error::Config("conditioning_top_n must be positive".into()));
        }
        TokenQuery::parse(&self.eval_query)?;
        TokenQuery::parse(&self.small_query)?;
        Ok(())
    }
}

/// Training groups for `setting`.
pub fn setting_groups(groups: &[CaptionGroup], setting: AblationSetting, cfg: &ToyConfig) -> Result<Vec<CaptionGroup>> {
    let merged = ablation_setting1_merge(groups);
    Ok(match setting {
        AblationSetting::Grouped => groups.to_vec(),
        AblationSetting::Merge => groups_from_merged(&merged),
        AblationSetting::MergeNms => groups_from_merged(&ablation_setting2_nms(&merged, cfg.merge_nms_thresh)),
        AblationSetting::Regroup | AblationSetting::RegroupLonger => {
            ablation_setting3_group(&ablation_setting2_nms(&merged, cfg.merge_nms_thresh), cfg.group_size, cfg.data.seed)?
        }
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyReport {
    pub setting: u32,
    pub train_images: usize,
    pub test_images: usize,
    pub history: Vec<EpochStats>,
    /// Held-out metrics under `eval_query`.
    pub eval: EvalReport,
    pub small_recall_eval_query: f64,
    pub small_recall_small_query: f64,
    pub conditioning_gap: f64,
}

/// Held-out split of a generated dataset.
pub struct HeldOut {
    pub images: Vec<(u64, Tensor)>,
    pub gts: Vec<GroundTruthBox>,
    pub sizes: BTreeMap<u64, (f64, f64)>,
}

impl HeldOut {
    fn new(data: &SyntheticDataset, images: Vec<(u64, Tensor)>) -> Self {
        let ids: BTreeSet<u64> = images.iter().map(|x| x.0).collect();
        let gts = data.dataset.annotations.iter().filter(|g| ids.contains(&g.image_id)).cloned().collect();
        let sizes = data.dataset.sizes().into_iter().filter(|(k, _)| ids.contains(k)).collect();
        HeldOut { images, gts, sizes }
    }

    pub fn predict_all(&self, params: &ModelParams, query: &TokenQuery) -> Result<Vec<Detection>> {
        let mut out = Vec::new();
        for (id, im) in &self.images {
            out.extend(predict(im, query, params, *id, None)?);
        }
        Ok(out)
    }
}

/// Runs generation, the chosen setting, training and evaluation. Returns
/// the report and the trained parameters.
pub fn run_toy(cfg: &ToyConfig, on_epoch: impl FnMut(&EpochStats)) -> Result<(ToyReport, ModelParams)> {
    cfg.validate()?;
    run_toy_on(cfg, &gen_synthetic_dataset(&cfg.data)?, on_epoch)
}

/// [`run_toy`] on an existing dataset, e.g. one read back from disk. Images
/// are split in dataset order.
pub fn run_toy_on(cfg: &ToyConfig, data: &SyntheticDataset, mut on_epoch: impl FnMut(&EpochStats)) -> Result<(ToyReport, ModelParams)> {
    cfg.validate()?;
    if data.images.len() != cfg.data.num_images {
        return Err(Error::Validation(format!("dataset has {} images, config expects {}", data.images.len(), cfg.data.num_images)));
    }
    let mut images: Vec<(u64, Tensor)> = (0..data.images.len()).map(|i| (data.images[i].id, data.image_tensor(i))).collect();
    let test = HeldOut::new(data, images.split_off(cfg.train_images));
    let eval_query = TokenQuery::parse(&cfg.eval_query)?;
    let small_query = TokenQuery::parse(&cfg.small_query)?;

    let groups = setting_groups(&data.groups, cfg.setting, cfg)?;
    let samples = build_samples(&images, &groups, &eval_query);
    drop(images);
    let train_cfg = if cfg.setting == AblationSetting::RegroupLonger { cfg.train.longer_schedule() } else { cfg.train.clone() };
    let mut params = ModelParams::init(cfg.model.clone())?;
    let history = train(&mut params, &samples, &train_cfg, |s, _| on_epoch(s))?;

    let buckets = SizeBuckets::default();
    let dets = test.predict_all(&params, &eval_query)?;
    let eval = evaluate(&dets, &test.gts, &test.sizes, &cfg.eval, &buckets, &[1, 10, cfg.eval.top_n])?;
    let at_n = EvalConfig { top_n: cfg.conditioning_top_n, ..cfg.eval.clone() };
    let small_all = size_bucket_recall(&dets, &test.gts, &test.sizes, &buckets, &at_n)?.small.recall();
    let dets_small = test.predict_all(&params, &small_query)?;
    let small_small = size_bucket_recall(&dets_small, &test.gts, &test.sizes, &buckets, &at_n)?.small.recall();

    let report = ToyReport {
        setting: cfg.setting.index(),
        train_images: samples.len(),
        test_images: test.images.len(),
        history,
        eval,
        small_recall_eval_query: small_all,
        small_recall_small_query: small_small,
        conditioning_gap: small_small - small_all,
    };
    Ok((report, params))
}
