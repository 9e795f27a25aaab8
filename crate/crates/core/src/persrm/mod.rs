//! The personalized reward model.
//!
//! Token features are β-scaled per-head log-ratios between the trained
//! backbone and the frozen reference,
//! `φ_j(s, a) = β (log π̂_θ,j(a|s) − log π̂_ref,j(a|s))`, and the reward of a
//! preference is `w_pᵀ φ`. Summed over a response these give the sequence
//! score whose difference between chosen and rejected responses drives the
//! Bradley-Terry loss.

mod preference;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use preference::{PreferenceDescriptor, PreferenceHead, PreferenceSpace, PreferenceWeights};
pub use train::{train_stage1, train_stage2, LossRecord, Stage1Weights, TrainConfig};

use crate::artifact::{self, Provenance};
use crate::error::{PadError, Result};
use crate::mdp::{State, TokenId};
use crate::toylm::{FactoredLM, LogProbMatrix};

/// `φ(s, a) ∈ ℝ^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_assign(&mut self, other: &FeatureVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn sub(&self, other: &FeatureVector) -> FeatureVector {
        FeatureVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

/// One record of the preference dataset `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
    pub pref: PreferenceDescriptor,
}

impl PreferencePair {
    pub fn new(
        prompt: Vec<TokenId>,
        chosen: Vec<TokenId>,
        rejected: Vec<TokenId>,
        pref: PreferenceDescriptor,
    ) -> Result<Self> {
        if chosen.is_empty() || rejected.is_empty() {
            return Err(PadError::BadSpec("pair responses must be nonempty".into()));
        }
        if chosen == rejected {
            return Err(PadError::BadSpec("chosen and rejected responses are identical".into()));
        }
        Ok(Self {
            prompt,
            chosen,
            rejected,
            pref,
        })
    }

    /// Same pair with chosen and rejected swapped.
    pub fn flipped(&self) -> Self {
        Self {
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            pref: self.pref.clone(),
        }
    }
}

/// How far training has progressed; stage 2 requires a finished stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStage {
    Fresh,
    Stage1,
    Stage2,
}

/// Parameter block a gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    Backbone,
    Head,
    Reference,
}

/// Where each pair's `w_p` comes from when evaluating the loss.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    /// `w_p = π_p(p)` through the preference head.
    Head,
    /// The same vector for every pair.
    Fixed(PreferenceWeights),
    /// The descriptor itself scaled to unit norm (requires `m = d`); the
    /// empty descriptor maps to zero.
    UnitDescriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Gradient {
    Backbone(BTreeMap<Vec<TokenId>, Vec<f64>>),
    Head(Vec<f64>),
}

/// Stable `σ(x)`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `log σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Bradley-Terry preference probability `exp(r_w) / (exp(r_w) + exp(r_l))`.
pub fn bt_probability(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// Per-context log-probabilities of backbone and reference, memoized for
/// one evaluation pass.
struct ContextCache<'a> {
    model: &'a PersRM,
    rows: BTreeMap<Vec<TokenId>, (LogProbMatrix, LogProbMatrix)>,
}

impl<'a> ContextCache<'a> {
    fn new(model: &'a PersRM) -> Self {
        Self {
            model,
            rows: BTreeMap::new(),
        }
    }

    fn get(&mut self, ctx: &[TokenId]) -> &(LogProbMatrix, LogProbMatrix) {
        if !self.rows.contains_key(ctx) {
            let theta = self.model.backbone.logprobs_for_context(ctx);
            let reference = self.model.reference.logprobs_for_context(ctx);
            self.rows.insert(ctx.to_vec(), (theta, reference));
        }
        &self.rows[ctx]
    }

    fn sequence_score(&mut self, x: &[TokenId], y: &[TokenId]) -> FeatureVector {
        let beta = self.model.beta;
        let d = self.model.dims();
        let mut acc = FeatureVector::zeros(d);
        for (ctx, a) in step_contexts(x, y, self.model.order()) {
            let (theta, reference) = self.get(&ctx);
            for j in 0..d {
                acc.0[j] += beta * (theta.get(j, a) - reference.get(j, a));
            }
        }
        acc
    }
}

/// `(context, action)` for every step of response `y` after prompt `x`.
fn step_contexts(x: &[TokenId], y: &[TokenId], order: usize) -> Vec<(Vec<TokenId>, TokenId)> {
    let stream: Vec<TokenId> = x.iter().chain(y).copied().collect();
    (0..y.len())
        .map(|t| {
            let end = x.len() + t;
            let start = end.saturating_sub(order - 1);
            (stream[start..end].to_vec(), y[t])
        })
        .collect()
}

/// Backbone `π̂_θ`, frozen reference `π̂_ref`, preference head and `β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersRM {
    backbone: FactoredLM,
    reference: FactoredLM,
    head: PreferenceHead,
    beta: f64,
    stage: TrainingStage,
}

impl PersRM {
    /// `π_θ ← π_ref`, freeze `π_ref`, attach a zero-initialized head with
    /// `m` inputs.
    pub fn new(reference: &FactoredLM, m: usize, beta: f64) -> Result<Self> {
        Self::with_head(reference, PreferenceHead::zeros(m, reference.dims()), beta)
    }

    pub fn with_head(reference: &FactoredLM, head: PreferenceHead, beta: f64) -> Result<Self> {
        if head.outputs() != reference.dims() {
            return Err(PadError::DimMismatch {
                expected: reference.dims(),
                got: head.outputs(),
            });
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(PadError::BadSpec(format!("beta must be > 0, got {beta}")));
        }
        Ok(Self {
            backbone: reference.clone_trainable(),
            reference: reference.clone_frozen(),
            head,
            beta,
            stage: TrainingStage::Fresh,
        })
    }

    /// Assembles a model from explicit parts, e.g. for tests that need a
    /// backbone different from the reference.
    pub fn from_parts(backbone: FactoredLM, reference: FactoredLM, head: PreferenceHead, beta: f64) -> Result<Self> {
        if backbone.dims() != reference.dims() || head.outputs() != backbone.dims() {
            return Err(PadError::DimMismatch {
                expected: backbone.dims(),
                got: reference.dims(),
            });
        }
        if backbone.order() != reference.order() || backbone.vocab() != reference.vocab() {
            return Err(PadError::ShapeMismatch(
                "backbone and reference differ in order or vocabulary".into(),
            ));
        }
        let mut m = Self::with_head(&reference, head, beta)?;
        m.backbone = backbone;
        Ok(m)
    }

    pub fn backbone(&self) -> &FactoredLM {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut FactoredLM {
        &mut self.backbone
    }

    pub fn reference(&self) -> &FactoredLM {
        &self.reference
    }

    pub fn head(&self) -> &PreferenceHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut PreferenceHead {
        &mut self.head
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn dims(&self) -> usize {
        self.backbone.dims()
    }

    pub fn order(&self) -> usize {
        self.backbone.order()
    }

    pub fn stage(&self) -> TrainingStage {
        self.stage
    }

    pub(crate) fn set_stage(&mut self, stage: TrainingStage) {
        self.stage = stage;
    }

    pub fn encode_preference(&self, p: &PreferenceDescriptor) -> Result<PreferenceWeights> {
        self.head.encode(p)
    }

    /// Raw per-head log-ratios `log π̂_θ,j(·|s) − log π̂_ref,j(·|s)`, row-major
    /// `d × |V|` (not scaled by β).
    pub fn log_ratios(&self, s: &State) -> Vec<f64> {
        let ctx = self.backbone.context_of(s);
        let theta = self.backbone.logprobs_for_context(&ctx);
        let reference = self.reference.logprobs_for_context(&ctx);
        let v = self.backbone.vocab().len();
        let mut out = Vec::with_capacity(self.dims() * v);
        for j in 0..self.dims() {
            out.extend(theta.row(j).iter().zip(reference.row(j)).map(|(a, b)| a - b));
        }
        out
    }

    /// `wᵀ (log π̂_θ(a|s) − log π̂_ref(a|s))` for every token `a`.
    pub fn weighted_log_ratios(&self, w: &PreferenceWeights, s: &State) -> Result<Vec<f64>> {
        self.check_weights(w)?;
        let v = self.backbone.vocab().len();
        let ratios = self.log_ratios(s);
        Ok((0..v)
            .map(|a| (0..self.dims()).map(|j| w.0[j] * ratios[j * v + a]).sum())
            .collect())
    }

    fn check_weights(&self, w: &PreferenceWeights) -> Result<()> {
        if w.len() != self.dims() {
            return Err(PadError::DimMismatch {
                expected: self.dims(),
                got: w.len(),
            });
        }
        Ok(())
    }

    /// `φ_j(s, a) = β (log π̂_θ,j(a|s) − log π̂_ref,j(a|s))`.
    pub fn token_feature(&self, s: &State, a: TokenId) -> Result<FeatureVector> {
        self.backbone.vocab().check(a)?;
        let theta = self.backbone.logprobs(s);
        let reference = self.reference.logprobs(s);
        Ok(FeatureVector(
            (0..self.dims())
                .map(|j| self.beta * (theta.get(j, a) - reference.get(j, a)))
                .collect(),
        ))
    }

    /// `R(p, s, a) = w_pᵀ φ(s, a)`.
    pub fn token_reward(&self, w: &PreferenceWeights, s: &State, a: TokenId) -> Result<f64> {
        self.check_weights(w)?;
        Ok(w.dot(&self.token_feature(s, a)?.0))
    }

    /// `Σ_t φ(s_t, a_t)` over the steps of response `y`.
    pub fn sequence_feature_score(&self, x: &[TokenId], y: &[TokenId]) -> Result<FeatureVector> {
        if y.is_empty() {
            return Err(PadError::BadState("sequence score needs a nonempty response".into()));
        }
        let vocab = self.backbone.vocab();
        vocab.check_all(x)?;
        vocab.check_all(y)?;
        Ok(ContextCache::new(self).sequence_score(x, y))
    }

    fn pair_weights(&self, pair: &PreferencePair, source: &WeightSource) -> Result<PreferenceWeights> {
        let w = match source {
            WeightSource::Head => self.head.encode(&pair.pref)?,
            WeightSource::Fixed(w) => w.clone(),
            WeightSource::UnitDescriptor => {
                if pair.pref.len() != self.dims() {
                    return Err(PadError::DimMismatch {
                        expected: self.dims(),
                        got: pair.pref.len(),
                    });
                }
                let w = PreferenceWeights(pair.pref.values().to_vec());
                let n = w.norm();
                if n == 0.0 {
                    w
                } else {
                    w.scaled(1.0 / n)
                }
            }
        };
        self.check_weights(&w)?;
        Ok(w)
    }

    /// Bradley-Terry loss with `w_p` from the preference head.
    pub fn loss(&self, batch: &[PreferencePair]) -> Result<f64> {
        self.loss_with(batch, &WeightSource::Head)
    }

    /// `−mean log σ(w_pᵀ (S(x, y_w) − S(x, y_l)))`.
    pub fn loss_with(&self, batch: &[PreferencePair], source: &WeightSource) -> Result<f64> {
        if batch.is_empty() {
            return Err(PadError::EmptyBatch);
        }
        let mut cache = ContextCache::new(self);
        let mut total = 0.0;
        for pair in batch {
            let w = self.pair_weights(pair, source)?;
            let diff = cache
                .sequence_score(&pair.prompt, &pair.chosen)
                .sub(&cache.sequence_score(&pair.prompt, &pair.rejected));
            total -= log_sigmoid(w.dot(&diff.0));
        }
        Ok(total / batch.len() as f64)
    }

    /// Analytic gradient of [`PersRM::loss_with`] with respect to one
    /// parameter block.
    pub fn grad(&self, batch: &[PreferencePair], block: ParamBlock, source: &WeightSource) -> Result<Gradient> {
        if batch.is_empty() {
            return Err(PadError::EmptyBatch);
        }
        match block {
            ParamBlock::Reference => Err(PadError::FrozenParameters("the reference model is never trained")),
            ParamBlock::Backbone if self.backbone.is_frozen() => Err(PadError::FrozenParameters("backbone is frozen")),
            ParamBlock::Head if !self.head.is_trainable() => {
                Err(PadError::FrozenParameters("preference head is frozen"))
            }
            ParamBlock::Head if *source != WeightSource::Head => Err(PadError::Config(
                "head gradient requires weights produced by the head".into(),
            )),
            ParamBlock::Backbone => self.backbone_grad(batch, source).map(Gradient::Backbone),
            ParamBlock::Head => self.head_grad(batch).map(Gradient::Head),
        }
    }

    fn backbone_grad(
        &self,
        batch: &[PreferencePair],
        source: &WeightSource,
    ) -> Result<BTreeMap<Vec<TokenId>, Vec<f64>>> {
        let d = self.dims();
        let v = self.backbone.vocab().len();
        let n = batch.len() as f64;
        let mut cache = ContextCache::new(self);
        let mut grad: BTreeMap<Vec<TokenId>, Vec<f64>> = BTreeMap::new();
        for pair in batch {
            let w = self.pair_weights(pair, source)?;
            let diff = cache
                .sequence_score(&pair.prompt, &pair.chosen)
                .sub(&cache.sequence_score(&pair.prompt, &pair.rejected));
            let margin = w.dot(&diff.0);
            // dL/dmargin for this pair
            let coef = -sigmoid(-margin) / n;
            if coef == 0.0 || w.0.iter().all(|&x| x == 0.0) {
                continue;
            }
            for (y, sign) in [(&pair.chosen, 1.0), (&pair.rejected, -1.0)] {
                for (ctx, a) in step_contexts(&pair.prompt, y, self.order()) {
                    let probs: Vec<f64> = {
                        let (theta, _) = cache.get(&ctx);
                        (0..d)
                            .flat_map(|j| theta.row(j).iter().map(|lp| lp.exp()).collect::<Vec<_>>())
                            .collect()
                    };
                    let g = grad.entry(ctx).or_insert_with(|| vec![0.0; d * v]);
                    for j in 0..d {
                        let scale = coef * sign * w.0[j] * self.beta;
                        if scale == 0.0 {
                            continue;
                        }
                        let row = &mut g[j * v..(j + 1) * v];
                        for (b, gb) in row.iter_mut().enumerate() {
                            *gb -= scale * probs[j * v + b];
                        }
                        row[a as usize] += scale;
                    }
                }
            }
        }
        Ok(grad)
    }

    fn head_grad(&self, batch: &[PreferencePair]) -> Result<Vec<f64>> {
        let d = self.dims();
        let m = self.head.inputs();
        let n = batch.len() as f64;
        let mut cache = ContextCache::new(self);
        let mut grad = vec![0.0; m * d];
        for pair in batch {
            let w = self.head.encode(&pair.pref)?;
            let diff = cache
                .sequence_score(&pair.prompt, &pair.chosen)
                .sub(&cache.sequence_score(&pair.prompt, &pair.rejected));
            let coef = -sigmoid(-w.dot(&diff.0)) / n;
            for (k, &h) in pair.pref.values().iter().enumerate() {
                if h == 0.0 {
                    continue;
                }
                for j in 0..d {
                    grad[k * d + j] += coef * h * diff.0[j];
                }
            }
        }
        Ok(grad)
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        artifact::save_json(path, "persrm", provenance, self)
    }

    pub fn load(path: &Path) -> Result<(Provenance, Self)> {
        artifact::load_json(path, "persrm")
    }
}
