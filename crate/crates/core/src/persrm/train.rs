//! Two-stage training: stage 1 fits the backbone with `w_p` held fixed,
//! stage 2 freezes the backbone and fits only the preference head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Gradient, ParamBlock, PersRM, PreferencePair, PreferenceWeights, TrainingStage, WeightSource};
use crate::error::{PadError, Result};

/// Fixed `w_p` used while fitting the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Weights {
    /// `w_p = 1` for every pair. Every head then receives the same gradient,
    /// so heads that start equal stay equal.
    AllOnes,
    /// `w_p` = the pair's descriptor scaled to unit norm, so head `j` only
    /// learns from pairs that involve dimension `j`.
    UnitPreference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Pairs per update; 0 means full-batch gradient descent.
    pub batch_size: usize,
    pub seed: u64,
    pub stage1_weights: Stage1Weights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5.0,
            epochs_stage1: 40,
            epochs_stage2: 40,
            batch_size: 0,
            seed: 0,
            stage1_weights: Stage1Weights::UnitPreference,
        }
    }
}

/// Training-set loss after `epoch` passes (epoch 0 is the starting loss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
}

impl LossRecord {
    pub fn csv_header() -> &'static str {
        "stage,epoch,loss"
    }

    pub fn to_csv(&self) -> String {
        format!("{},{},{}", self.stage, self.epoch, self.loss)
    }
}

fn validate(cfg: &TrainConfig) -> Result<()> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(PadError::Config(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    Ok(())
}

fn batches<'a>(data: &'a [PreferencePair], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<&'a PreferencePair>> {
    if cfg.batch_size == 0 || cfg.batch_size >= data.len() {
        return vec![data.iter().collect()];
    }
    let mut order: Vec<&PreferencePair> = data.iter().collect();
    order.shuffle(rng);
    order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
}

fn owned(batch: &[&PreferencePair]) -> Vec<PreferencePair> {
    batch.iter().map(|p| (*p).clone()).collect()
}

/// Stage 1: gradient descent on the backbone with the head frozen and
/// `w_p` fixed by `cfg.stage1_weights`.
pub fn train_stage1(
    mut model: PersRM,
    data: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<(PersRM, Vec<LossRecord>)> {
    validate(cfg)?;
    if !model.reference().is_frozen() {
        return Err(PadError::StageOrder(
            "reference model must be frozen before stage 1".into(),
        ));
    }
    if model.stage() != TrainingStage::Fresh || model.backbone().is_frozen() {
        return Err(PadError::StageOrder("stage 1 runs once, on a fresh model".into()));
    }
    let source = match cfg.stage1_weights {
        Stage1Weights::AllOnes => WeightSource::Fixed(PreferenceWeights::ones(model.dims())),
        Stage1Weights::UnitPreference => WeightSource::UnitDescriptor,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = vec![LossRecord {
        stage: 1,
        epoch: 0,
        loss: model.loss_with(data, &source)?,
    }];
    for epoch in 1..=cfg.epochs_stage1 {
        for batch in batches(data, cfg, &mut rng) {
            let batch = owned(&batch);
            let Gradient::Backbone(g) = model.grad(&batch, ParamBlock::Backbone, &source)? else {
                unreachable!("backbone block yields a backbone gradient")
            };
            model.backbone_mut().apply_gradient(&g, cfg.lr)?;
        }
        history.push(LossRecord {
            stage: 1,
            epoch,
            loss: model.loss_with(data, &source)?,
        });
    }
    model.set_stage(TrainingStage::Stage1);
    Ok((model, history))
}

/// Stage 2: freeze the backbone and fit the preference head.
pub fn train_stage2(
    mut model: PersRM,
    data: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<(PersRM, Vec<LossRecord>)> {
    validate(cfg)?;
    if model.stage() == TrainingStage::Fresh {
        return Err(PadError::StageOrder(
            "stage 2 needs a backbone trained by stage 1; run stage 1 first".into(),
        ));
    }
    model.backbone_mut().freeze();
    model.head_mut().set_trainable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut history = vec![LossRecord {
        stage: 2,
        epoch: 0,
        loss: model.loss(data)?,
    }];
    for epoch in 1..=cfg.epochs_stage2 {
        for batch in batches(data, cfg, &mut rng) {
            let batch = owned(&batch);
            let Gradient::Head(g) = model.grad(&batch, ParamBlock::Head, &WeightSource::Head)? else {
                unreachable!("head block yields a head gradient")
            };
            model.head_mut().apply_gradient(&g, cfg.lr)?;
        }
        history.push(LossRecord {
            stage: 2,
            epoch,
            loss: model.loss(data)?,
        });
    }
    model.set_stage(TrainingStage::Stage2);
    Ok((model, history))
}
