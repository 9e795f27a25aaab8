//! Guided decoding.
//!
//! At each step the base model proposes its top-`k` tokens. Each candidate
//! is scored by `log π_LM(a|s) + β · w_pᵀ (log π̂_θ(a|s) − log π̂_ref(a|s))`
//! and the next token is chosen from those scores: greedily, by sampling,
//! or, for best-of-k, whole base-model samples are ranked by their
//! sequence-level personalized reward.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PadError, Result};
use crate::mdp::{State, TokenId, TokenMdp, Trajectory};
use crate::persrm::{PersRM, PreferenceDescriptor, PreferenceWeights};
use crate::toylm::NGramLM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Stochastic,
    BestOfK,
}

impl std::str::FromStr for Strategy {
    type Err = PadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "stochastic" => Ok(Strategy::Stochastic),
            "best_of_k" | "best-of-k" => Ok(Strategy::BestOfK),
            other => Err(PadError::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Greedy => "greedy",
            Strategy::Stochastic => "stochastic",
            Strategy::BestOfK => "best_of_k",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Guidance weight.
    pub beta: f64,
    /// Candidates kept per step (responses sampled for best-of-k).
    pub k: usize,
    pub strategy: Strategy,
    pub temperature: f64,
    pub max_prompt_len: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            k: 10,
            strategy: Strategy::Greedy,
            temperature: 0.7,
            max_prompt_len: 2048,
            max_new_tokens: 128,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(PadError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.k == 0 || (self.strategy != Strategy::BestOfK && self.k > vocab_size) {
            return Err(PadError::Config(format!(
                "k must be in 1..={vocab_size}, got {}",
                self.k
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PadError::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub token: TokenId,
    pub base_logprob: f64,
    /// `β · w_pᵀ (log π̂_θ − log π̂_ref)`.
    pub guidance: f64,
    /// `guidance + base_logprob`.
    pub combined: f64,
}

/// One traced decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub state_len: usize,
    pub candidates: Vec<ScoredCandidate>,
    pub chosen: TokenId,
    /// Token preferred by the exhaustive rule over the whole vocabulary.
    pub oracle: TokenId,
    /// True when the exhaustive winner is not among the base top-k.
    pub oracle_outside_topk: bool,
}

/// A best-of-k sample with its sequence-level reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub response: Vec<TokenId>,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<StepTrace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<ScoredResponse>,
}

impl GenerationTrace {
    pub fn outside_topk_count(&self) -> usize {
        self.steps.iter().filter(|s| s.oracle_outside_topk).count()
    }
}

/// Index of the maximum value; ties go to the lowest token id.
fn argmax_by_token<I: IntoIterator<Item = (TokenId, f64)>>(items: I) -> Option<TokenId> {
    let mut best: Option<(TokenId, f64)> = None;
    for (t, v) in items {
        best = match best {
            None => Some((t, v)),
            Some((bt, bv)) if v > bv || (v == bv && t < bt) => Some((t, v)),
            keep => keep,
        };
    }
    best.map(|(t, _)| t)
}

/// Samples an index from unnormalized log-weights.
fn sample_log_weights(logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // rounding can leave u marginally above the last bucket
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Softmax of `scores / temperature`.
pub fn candidate_probabilities(candidates: &[ScoredCandidate], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = candidates.iter().map(|c| c.combined / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Frozen base model plus reward model.
#[derive(Debug, Clone, Copy)]
pub struct PadDecoder<'a> {
    pub lm: &'a NGramLM,
    pub model: &'a PersRM,
}

impl<'a> PadDecoder<'a> {
    pub fn new(lm: &'a NGramLM, model: &'a PersRM) -> Result<Self> {
        if lm.vocab() != model.backbone().vocab() {
            return Err(PadError::ShapeMismatch(
                "base model and reward model vocabularies differ".into(),
            ));
        }
        Ok(Self { lm, model })
    }

    fn check_live(&self, s: &State) -> Result<()> {
        if s.ends_with(self.lm.vocab().eos()) {
            Err(PadError::TerminalState)
        } else {
            Ok(())
        }
    }

    /// Base top-`k` (ties → lowest id), each scored with guidance.
    pub fn combined_scores(
        &self,
        w: &PreferenceWeights,
        s: &State,
        beta: f64,
        k: usize,
    ) -> Result<Vec<ScoredCandidate>> {
        self.check_live(s)?;
        let v = self.lm.vocab().len();
        if k == 0 || k > v {
            return Err(PadError::Config(format!("k must be in 1..={v}, got {k}")));
        }
        let base = self.lm.logprobs(s);
        let mut order: Vec<TokenId> = (0..v as TokenId).collect();
        order.sort_by(|&a, &b| base[b as usize].total_cmp(&base[a as usize]).then(a.cmp(&b)));
        order.truncate(k);
        let ratios = self.model.weighted_log_ratios(w, s)?;
        Ok(order
            .into_iter()
            .map(|t| {
                let base_logprob = base[t as usize];
                let guidance = beta * ratios[t as usize];
                ScoredCandidate {
                    token: t,
                    base_logprob,
                    guidance,
                    combined: guidance + base_logprob,
                }
            })
            .collect())
    }

    /// Greedy choice among the candidates.
    pub fn greedy_step(&self, w: &PreferenceWeights, s: &State, beta: f64, k: usize) -> Result<TokenId> {
        let cands = self.combined_scores(w, s, beta, k)?;
        Ok(Self::pick_greedy(&cands))
    }

    fn pick_greedy(cands: &[ScoredCandidate]) -> TokenId {
        argmax_by_token(cands.iter().map(|c| (c.token, c.combined))).expect("k >= 1")
    }

    /// Samples from `softmax(combined / temperature)` over the candidates.
    pub fn stochastic_step(
        &self,
        w: &PreferenceWeights,
        s: &State,
        beta: f64,
        k: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<TokenId> {
        let cands = self.combined_scores(w, s, beta, k)?;
        Ok(Self::pick_stochastic(&cands, temperature, rng))
    }

    fn pick_stochastic(cands: &[ScoredCandidate], temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
        let logits: Vec<f64> = cands.iter().map(|c| c.combined / temperature).collect();
        cands[sample_log_weights(&logits, rng)].token
    }

    /// Exhaustive maximizer of `π_LM(a|s) · exp(β wᵀ log-ratio)` over the
    /// whole vocabulary, evaluated in probability space.
    pub fn oracle_argmax(&self, w: &PreferenceWeights, s: &State, beta: f64) -> Result<TokenId> {
        self.check_live(s)?;
        let base = self.lm.logprobs(s);
        let ratios = self.model.weighted_log_ratios(w, s)?;
        let scores = base.iter().zip(&ratios).map(|(lp, r)| lp.exp() * (beta * r).exp());
        Ok(argmax_by_token((0..).zip(scores)).expect("vocabulary is nonempty"))
    }

    /// Samples one response from the base model at `temperature`.
    pub fn sample_base(
        &self,
        prompt: &[TokenId],
        max_new_tokens: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Trajectory> {
        let mdp = TokenMdp::new(self.lm.vocab().clone(), max_new_tokens);
        let mut s = State::new(&mdp.vocab, prompt.to_vec())?;
        while !mdp.is_terminal(&s) {
            let logits: Vec<f64> = self.lm.logprobs(&s).iter().map(|l| l / temperature).collect();
            let a = sample_log_weights(&logits, rng) as TokenId;
            s = mdp.transition(&s, a)?;
        }
        Ok(mdp.trajectory(&s))
    }

    /// Samples `k` base responses and keeps the one with the highest
    /// `wᵀ Σ_t φ(s_t, a_t)`; ties keep the earliest sample.
    pub fn best_of_k(
        &self,
        w: &PreferenceWeights,
        prompt: &[TokenId],
        cfg: &DecodeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Trajectory, Vec<ScoredResponse>)> {
        let mut best: Option<(Trajectory, f64)> = None;
        let mut scored = Vec::with_capacity(cfg.k);
        for _ in 0..cfg.k {
            let traj = self.sample_base(prompt, cfg.max_new_tokens, cfg.temperature, rng)?;
            let score = if traj.response.is_empty() {
                0.0
            } else {
                w.dot(&self.model.sequence_feature_score(prompt, &traj.response)?.0)
            };
            scored.push(ScoredResponse {
                response: traj.response.clone(),
                score,
            });
            if best.as_ref().is_none_or(|(_, b)| score > *b) {
                best = Some((traj, score));
            }
        }
        let (traj, _) = best.ok_or_else(|| PadError::Config("best-of-k needs k >= 1".into()))?;
        Ok((traj, scored))
    }

    /// Runs the selected strategy from the prompt until EOS or the length cap.
    pub fn generate(
        &self,
        pref: &PreferenceDescriptor,
        prompt: &[TokenId],
        cfg: &DecodeConfig,
        trace: bool,
    ) -> Result<(Trajectory, GenerationTrace)> {
        let w = self.model.encode_preference(pref)?;
        self.generate_with_weights(&w, prompt, cfg, trace)
    }

    pub fn generate_with_weights(
        &self,
        w: &PreferenceWeights,
        prompt: &[TokenId],
        cfg: &DecodeConfig,
        trace: bool,
    ) -> Result<(Trajectory, GenerationTrace)> {
        let vocab = self.lm.vocab();
        cfg.validate(vocab.len())?;
        let prompt = &prompt[prompt.len().saturating_sub(cfg.max_prompt_len)..];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut out = GenerationTrace::default();

        if cfg.strategy == Strategy::BestOfK {
            let (traj, samples) = self.best_of_k(w, prompt, cfg, &mut rng)?;
            if trace {
                out.samples = samples;
            }
            return Ok((traj, out));
        }

        let mdp = TokenMdp::new(vocab.clone(), cfg.max_new_tokens);
        let mut s = State::new(vocab, prompt.to_vec())?;
        let mut step = 0;
        while !mdp.is_terminal(&s) {
            let cands = self.combined_scores(w, &s, cfg.beta, cfg.k)?;
            let a = match cfg.strategy {
                Strategy::Greedy => Self::pick_greedy(&cands),
                Strategy::Stochastic => Self::pick_stochastic(&cands, cfg.temperature, &mut rng),
                Strategy::BestOfK => unreachable!("handled above"),
            };
            if trace {
                let oracle = self.oracle_argmax(w, &s, cfg.beta)?;
                out.steps.push(StepTrace {
                    step,
                    state_len: s.len(),
                    oracle_outside_topk: !cands.iter().any(|c| c.token == oracle),
                    candidates: cands,
                    chosen: a,
                    oracle,
                });
            }
            s = mdp.transition(&s, a)?;
            step += 1;
        }
        Ok((mdp.trajectory(&s), out))
    }
}

/// Greedy decoding from the base model alone.
pub fn base_greedy(lm: &NGramLM, prompt: &[TokenId], max_new_tokens: usize) -> Result<Trajectory> {
    let mdp = TokenMdp::new(lm.vocab().clone(), max_new_tokens);
    let mut s = State::new(&mdp.vocab, prompt.to_vec())?;
    while !mdp.is_terminal(&s) {
        let lp = lm.logprobs(&s);
        let a = argmax_by_token((0..).zip(lp)).expect("vocabulary is nonempty");
        s = mdp.transition(&s, a)?;
    }
    Ok(mdp.trajectory(&s))
}
