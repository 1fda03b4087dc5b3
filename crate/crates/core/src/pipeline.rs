//! The staged training protocol of the toy family: pretrain the patch
//! classifier, convert it to the coarse FCN, fine-tune, then add one skip
//! stage at a time, each initialized from the previous net with a reduced
//! learning rate.

use std::time::Duration;

use crate::data::{center_patches, dominant_patches, gen_sample_colors, sample_seed, Sample};
use crate::error::Result;
use crate::metrics::Metrics;
use crate::net::Net;
use crate::train::{evaluate, train, TrainConfig, TrainReport};
use crate::zoo::{self, PATCH};

/// How pretraining patches are labelled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pretext {
    /// Class of the center pixel (patchwise segmentation).
    CenterPixel,
    /// Most frequent foreground class in the patch (whole-patch recognition).
    Dominant,
}

/// Hyperparameters of every stage.
#[derive(Clone, Debug)]
pub struct Protocol {
    pub classes: usize,
    pub pretext: Pretext,
    /// Palette colors of a separate pretraining set (empty: pretrain on the task's own images).
    pub pretext_colors: Vec<usize>,
    pub patches_per_image: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Applied to each skip stage; its `lr_drop_factor` divides `finetune.lr`.
    pub skip: TrainConfig,
}

impl Protocol {
    /// Desk-scale defaults for 32x32 synthetic images.
    pub fn toy(classes: usize, seed: u64) -> Self {
        let base = TrainConfig {
            seed,
            momentum: 0.9,
            weight_decay: 5e-4,
            ..TrainConfig::default()
        };
        Protocol {
            classes,
            pretext: Pretext::Dominant,
            pretext_colors: vec![0, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15],
            patches_per_image: 8,
            pretrain: TrainConfig {
                lr: 0.01,
                batch_size: 32,
                epochs: 4,
                ..base.clone()
            },
            finetune: TrainConfig {
                lr: 0.01,
                batch_size: 4,
                epochs: 12,
                ..base.clone()
            },
            skip: TrainConfig {
                lr: 0.01,
                lr_drop_factor: 100.0,
                batch_size: 4,
                epochs: 4,
                ..base
            },
        }
    }
}

/// Outcome of one stage.
#[derive(Clone, Debug)]
pub struct Stage {
    pub net: Net<f32>,
    pub report: TrainReport,
    pub val: Metrics,
}

/// Train the toy classifier on labelled patches.
pub fn pretrain_classifier(p: &Protocol, train_set: &[Sample]) -> Result<(Net<f32>, TrainReport)> {
    let source: Vec<Sample>;
    let train_set = if p.pretext_colors.is_empty() {
        train_set
    } else {
        let (h, w) = (train_set[0].labels.height(), train_set[0].labels.width());
        source = (0..train_set.len())
            .map(|i| {
                gen_sample_colors(
                    h,
                    w,
                    &p.pretext_colors,
                    sample_seed(p.pretrain.seed ^ 0x5eed, i),
                )
            })
            .collect::<Result<_>>()?;
        &source
    };
    let classes = if p.pretext_colors.is_empty() {
        p.classes
    } else {
        p.pretext_colors.len()
    };
    let patches = match p.pretext {
        Pretext::CenterPixel => {
            center_patches(train_set, PATCH, p.patches_per_image, p.pretrain.seed)?
        }
        Pretext::Dominant => {
            dominant_patches(train_set, PATCH, p.patches_per_image, p.pretrain.seed)?
        }
    };
    let mut net = Net::init(zoo::build_toy_classifier(classes)?, p.pretrain.seed)?;
    let report = train(&mut net, &patches, &[], &p.pretrain)?;
    Ok((net, report))
}

/// Convert a trained classifier to the coarse FCN and fine-tune it with
/// `cfg` (its `train_only` restricts which layers learn).
pub fn finetune_coarse(
    p: &Protocol,
    classifier: &Net<f32>,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val: &[Sample],
) -> Result<Stage> {
    let spec = zoo::convert_to_fcn(classifier.spec(), p.classes)?;
    let net = Net::transplant(spec, cfg.seed, &classifier.checkpoint())?;
    run_stage(net, cfg, train_set, val)
}

/// Attach a skip on `pool` to a trained net and fine-tune with the skip config.
pub fn add_skip_stage(
    p: &Protocol,
    prev: &Net<f32>,
    pool: &str,
    train_set: &[Sample],
    val: &[Sample],
) -> Result<Stage> {
    let spec = zoo::attach_skip(prev.spec(), pool)?;
    let net = Net::transplant(spec, p.skip.seed, &prev.checkpoint())?;
    run_stage(net, &p.skip, train_set, val)
}

fn run_stage(
    mut net: Net<f32>,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val: &[Sample],
) -> Result<Stage> {
    let report = train(&mut net, train_set, val, cfg)?;
    let val = evaluate(&net, val, "out")?;
    Ok(Stage { net, report, val })
}

/// Validation metrics of every member of the family from one seed.
#[derive(Clone, Debug)]
pub struct FamilyRun {
    pub coarse: Stage,
    pub skip1: Stage,
    pub skip2: Stage,
    /// Coarse net with only the new score layer trained.
    pub head_only: Stage,
    pub wall: Duration,
}

/// Full protocol: pretrain, coarse (full and head-only), skip x1, skip x2.
pub fn run_family(p: &Protocol, train_set: &[Sample], val: &[Sample]) -> Result<FamilyRun> {
    let start = std::time::Instant::now();
    let (classifier, _) = pretrain_classifier(p, train_set)?;
    let coarse = finetune_coarse(p, &classifier, &p.finetune, train_set, val)?;
    let head_cfg = TrainConfig {
        train_only: vec!["score".into()],
        ..p.finetune.clone()
    };
    let head_only = finetune_coarse(p, &classifier, &head_cfg, train_set, val)?;
    let skip1 = add_skip_stage(p, &coarse.net, "pool2", train_set, val)?;
    let skip2 = add_skip_stage(p, &skip1.net, "pool1", train_set, val)?;
    Ok(FamilyRun {
        coarse,
        skip1,
        skip2,
        head_only,
        wall: start.elapsed(),
    })
}
