//! Synthetic style-marked corpora and preference pairs with known ground
//! truth.
//!
//! Token layout: `0` is EOS, `1` the instruction delimiter, then one block
//! of `marker_set_size` marker tokens per named dimension, then filler.
//! A prompt is a random filler stub, the delimiter and one filler topic
//! token. A marker never directly follows a marker of the same dimension.
//! Filler follows a fixed seeded successor chain most of the time, which
//! gives the base model a strong marker-free default continuation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PadError, Result};
use crate::evalkit::StyleOracle;
use crate::mdp::{TokenId, Trajectory, Vocab};
use crate::persrm::{PreferenceDescriptor, PreferencePair, PreferenceSpace};

pub const EOS: TokenId = 0;
pub const INSTRUCTION: TokenId = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub dims: Vec<String>,
    pub marker_set_size: usize,
    pub prompts: usize,
    pub responses_per_prompt: usize,
    /// Inclusive `[min, max]` length of the stub before the delimiter.
    pub prompt_len: [usize; 2],
    /// Inclusive `[min, max]`, EOS not counted.
    pub response_len: [usize; 2],
    /// Per-sequence intensity of each dimension is uniform in this range.
    pub intensity: [f64; 2],
    /// Per-token probability of a dimension's marker is `strength * intensity`.
    pub strength: f64,
    /// Probability that a filler token follows the successor chain.
    pub chain_prob: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            dims: vec!["polite".into(), "verbose".into(), "markerful".into()],
            marker_set_size: 8,
            prompts: 240,
            responses_per_prompt: 12,
            prompt_len: [3, 6],
            response_len: [8, 16],
            intensity: [0.0, 1.0],
            strength: 0.3,
            chain_prob: 0.7,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PadError::BadSpec(msg));
        let m = self.dims.len();
        PreferenceSpace::new(self.dims.iter().cloned())?;
        if self.marker_set_size == 0 {
            return bad("marker_set_size must be >= 1".into());
        }
        if 2 + m * self.marker_set_size >= self.vocab_size {
            return bad(format!(
                "vocabulary of {} leaves no filler after EOS, the delimiter and {m} marker sets of {}",
                self.vocab_size, self.marker_set_size
            ));
        }
        if self.prompts == 0 || self.responses_per_prompt == 0 {
            return bad("prompts and responses_per_prompt must be >= 1".into());
        }
        if self.prompt_len[0] > self.prompt_len[1] {
            return bad("prompt_len must be a range [min, max]".into());
        }
        if self.response_len[0] == 0 || self.response_len[0] > self.response_len[1] {
            return bad("response_len must be a range [min, max] with min >= 1".into());
        }
        let [lo, hi] = self.intensity;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("intensity must be a range inside [0, 1]".into());
        }
        if !(self.strength >= 0.0 && self.strength * m as f64 <= 1.0) {
            return bad("strength must be >= 0 with strength * dims <= 1".into());
        }
        if !(0.0..=1.0).contains(&self.chain_prob) {
            return bad("chain_prob must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size, EOS)?.with_display(self.display_names())
    }

    pub fn space(&self) -> Result<PreferenceSpace> {
        PreferenceSpace::new(self.dims.iter().cloned())
    }

    pub fn markers(&self, dim: usize) -> Vec<TokenId> {
        let start = 2 + dim * self.marker_set_size;
        (start..start + self.marker_set_size).map(|t| t as TokenId).collect()
    }

    pub fn filler(&self) -> Vec<TokenId> {
        (2 + self.dims.len() * self.marker_set_size..self.vocab_size)
            .map(|t| t as TokenId)
            .collect()
    }

    pub fn oracle(&self) -> Result<StyleOracle> {
        let markers = (0..self.dims.len())
            .map(|j| self.markers(j).into_iter().collect())
            .collect();
        StyleOracle::new(self.space()?, markers, &self.vocab()?)
    }

    fn display_names(&self) -> Vec<String> {
        let mut names = vec!["<eos>".to_string(), "<inst>".to_string()];
        for d in &self.dims {
            names.extend((0..self.marker_set_size).map(|i| format!("{d}{i}")));
        }
        let filler = self.filler().len();
        names.extend((0..filler).map(|i| format!("w{i}")));
        names
    }

    /// Fixed successor permutation over filler tokens.
    fn chain(&self) -> BTreeMap<TokenId, TokenId> {
        let filler = self.filler();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c4a1);
        let mut order = filler.clone();
        order.shuffle(&mut rng);
        order
            .iter()
            .zip(order.iter().cycle().skip(1))
            .map(|(&a, &b)| (a, b))
            .collect()
    }
}

fn random_prompt(spec: &CorpusSpec, filler: &[TokenId], rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let n = rng.gen_range(spec.prompt_len[0]..=spec.prompt_len[1]);
    let mut p: Vec<TokenId> = (0..n)
        .map(|_| *filler.choose(rng).expect("filler is nonempty"))
        .collect();
    p.push(INSTRUCTION);
    p.push(*filler.choose(rng).expect("filler is nonempty"));
    p
}

fn random_response(
    spec: &CorpusSpec,
    filler: &[TokenId],
    chain: &BTreeMap<TokenId, TokenId>,
    prompt: &[TokenId],
    rng: &mut ChaCha8Rng,
) -> Vec<TokenId> {
    let m = spec.dims.len();
    let [lo, hi] = spec.intensity;
    let mix: Vec<f64> = (0..m).map(|_| spec.strength * rng.gen_range(lo..=hi)).collect();
    let len = rng.gen_range(spec.response_len[0]..=spec.response_len[1]);
    let mut prev = *prompt.last().expect("prompts are nonempty");
    let mut out = Vec::with_capacity(len + 1);
    for _ in 0..len {
        let mut r: f64 = rng.gen();
        let mut token = None;
        for (j, &q) in mix.iter().enumerate() {
            if r < q {
                let markers = spec.markers(j);
                if !markers.contains(&prev) {
                    token = Some(*markers.choose(rng).expect("marker sets are nonempty"));
                }
                break;
            }
            r -= q;
        }
        let t = token.unwrap_or_else(|| match chain.get(&prev) {
            Some(&next) if rng.gen::<f64>() < spec.chain_prob => next,
            _ => *filler.choose(rng).expect("filler is nonempty"),
        });
        out.push(t);
        prev = t;
    }
    out.push(EOS);
    out
}

/// `prompts × responses_per_prompt` trajectories; responses sharing a
/// prompt are adjacent.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    let filler = spec.filler();
    let chain = spec.chain();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = BTreeSet::new();
    let mut corpus = Vec::with_capacity(spec.prompts * spec.responses_per_prompt);
    while seen.len() < spec.prompts {
        let prompt = random_prompt(spec, &filler, &mut rng);
        if !seen.insert(prompt.clone()) {
            continue;
        }
        for _ in 0..spec.responses_per_prompt {
            let response = random_response(spec, &filler, &chain, &prompt, &mut rng);
            corpus.push(Trajectory::new(&vocab, prompt.clone(), response)?);
        }
    }
    Ok(corpus)
}

/// Fresh prompts that never occur in `corpus`.
pub fn heldout_prompts(spec: &CorpusSpec, corpus: &[Trajectory], count: usize, seed: u64) -> Result<Vec<Vec<TokenId>>> {
    spec.validate()?;
    let filler = spec.filler();
    let taken: BTreeSet<&[TokenId]> = corpus.iter().map(|t| t.prompt.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<TokenId>> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * (count + 1) {
            return Err(PadError::InsufficientData("cannot find enough unseen prompts".into()));
        }
        let p = random_prompt(spec, &filler, &mut rng);
        if taken.contains(p.as_slice()) || out.contains(&p) {
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSpec {
    pub pairs_per_preference: usize,
    /// Minimum signed oracle margin on every active dimension.
    pub threshold: f64,
    /// Preferences to sample, in descriptor syntax (`"polite,verbose"`).
    pub preferences: Vec<String>,
    pub seed: u64,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            pairs_per_preference: 200,
            threshold: 0.2,
            preferences: ["polite", "verbose", "markerful"].map(String::from).to_vec(),
            seed: 0,
        }
    }
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(PadError::BadSpec(format!(
                "margin threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if self.preferences.is_empty() || self.pairs_per_preference == 0 {
            return Err(PadError::BadSpec(
                "need at least one preference and one pair per preference".into(),
            ));
        }
        Ok(())
    }

    pub fn descriptors(&self, space: &PreferenceSpace) -> Result<Vec<PreferenceDescriptor>> {
        self.preferences
            .iter()
            .map(|p| {
                let d = space.parse(p)?;
                if d.is_empty() {
                    return Err(PadError::BadSpec(
                        "training preferences must have an active dimension".into(),
                    ));
                }
                Ok(d)
            })
            .collect()
    }
}

/// Smallest signed per-dimension margin of `a` over `b` on the active
/// dimensions of `pref`.
pub fn pair_margin(oracle: &StyleOracle, pref: &PreferenceDescriptor, a: &Trajectory, b: &Trajectory) -> f64 {
    let sa = oracle.scores(a.content());
    let sb = oracle.scores(b.content());
    pref.active_dims()
        .into_iter()
        .map(|j| pref.values()[j].signum() * (sa[j] - sb[j]))
        .fold(f64::INFINITY, f64::min)
}

/// For each preference, walks prompt groups in seeded order and keeps the
/// group's best-separated pair when its margin reaches the threshold.
pub fn gen_pref_pairs(corpus: &[Trajectory], oracle: &StyleOracle, spec: &PairSpec) -> Result<Vec<PreferencePair>> {
    spec.validate()?;
    let mut groups: BTreeMap<&[TokenId], Vec<&Trajectory>> = BTreeMap::new();
    for t in corpus {
        groups.entry(t.prompt.as_slice()).or_default().push(t);
    }
    let groups: Vec<Vec<&Trajectory>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for pref in spec.descriptors(oracle.space())? {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut rng);
        let mut emitted = 0;
        for g in order {
            if emitted == spec.pairs_per_preference {
                break;
            }
            let group = &groups[g];
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..group.len() {
                for k in 0..group.len() {
                    if i == k || group[i].content() == group[k].content() {
                        continue;
                    }
                    let margin = pair_margin(oracle, &pref, group[i], group[k]);
                    if best.is_none_or(|(b, _, _)| margin > b) {
                        best = Some((margin, i, k));
                    }
                }
            }
            if let Some((margin, i, k)) = best {
                if margin >= spec.threshold && margin > 0.0 {
                    out.push(PreferencePair::new(
                        group[i].prompt.clone(),
                        group[i].response.clone(),
                        group[k].response.clone(),
                        pref.clone(),
                    )?);
                    emitted += 1;
                }
            }
        }
        if emitted < spec.pairs_per_preference {
            return Err(PadError::InsufficientData(format!(
                "preference `{}` reached {emitted} of {} pairs at threshold {}",
                oracle.space().label(&pref),
                spec.pairs_per_preference,
                spec.threshold
            )));
        }
    }
    Ok(out)
}

/// On-disk pair record with the preference keyed by dimension name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
    pub pref: BTreeMap<String, f64>,
}

impl PairRecord {
    pub fn from_pair(space: &PreferenceSpace, p: &PreferencePair) -> Self {
        Self {
            prompt: p.prompt.clone(),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
            pref: space.to_map(&p.pref),
        }
    }

    pub fn into_pair(self, space: &PreferenceSpace) -> Result<PreferencePair> {
        PreferencePair::new(self.prompt, self.chosen, self.rejected, space.from_map(&self.pref)?)
    }
}

/// Prompt-file record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt: Vec<TokenId>,
}

const GUIDELINES: &str =
    "[Guidelines] Your task is to generate response by considering the following principle.\n[Principles] ";
const INSTRUCTION_TAG: &str = "\n[Instruction] ";

/// Text-mode prompt template.
pub fn render_prompt(principles: &str, instruction: &str) -> String {
    format!("{GUIDELINES}{principles}{INSTRUCTION_TAG}{instruction}")
}

/// Inverse of [`render_prompt`]; `None` if the text does not follow the template.
pub fn parse_prompt(text: &str) -> Option<(String, String)> {
    let rest = text.strip_prefix(GUIDELINES)?;
    let (principles, instruction) = rest.split_once(INSTRUCTION_TAG)?;
    Some((principles.to_string(), instruction.to_string()))
}
