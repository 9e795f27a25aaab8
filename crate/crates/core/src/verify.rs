//! Self-generating property battery: random small models and tabular MDPs
//! on which the exact identities of the method are checked numerically.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{base_greedy, DecodeConfig, PadDecoder};
use crate::error::Result;
use crate::mdp::{State, TokenId, Trajectory, Vocab};
use crate::persrm::{
    Gradient, ParamBlock, PersRM, PreferenceDescriptor, PreferenceHead, PreferencePair, PreferenceWeights, WeightSource,
};
use crate::theory::{self, BoundReport};
use crate::toylm::{FactoredLM, NGramLM};

/// A random base model, reward model, preference and state.
#[derive(Debug, Clone)]
pub struct DecodeInstance {
    pub lm: NGramLM,
    pub model: PersRM,
    pub w: PreferenceWeights,
    pub state: State,
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: &Vocab, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(1..vocab.len() as TokenId)).collect()
}

fn random_corpus(rng: &mut ChaCha8Rng, vocab: &Vocab, n: usize) -> Vec<Trajectory> {
    (0..n)
        .map(|_| {
            let plen = rng.gen_range(1..=3);
            let rlen = rng.gen_range(1..=6);
            let prompt = random_tokens(rng, vocab, plen);
            let mut resp = random_tokens(rng, vocab, rlen);
            resp.push(vocab.eos());
            Trajectory::new(vocab, prompt, resp).expect("tokens are in range")
        })
        .collect()
}

/// Reward model whose backbone is the reference plus uniform noise on
/// every stored logit and on the contexts of `extra`.
pub fn random_model(
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
    order: usize,
    dims: usize,
    m: usize,
    extra: &[Vec<TokenId>],
) -> PersRM {
    let corpus = random_corpus(rng, vocab, 12);
    let reference = FactoredLM::from_ngram(
        &NGramLM::train(&corpus, vocab, order, 0.5).expect("corpus is nonempty"),
        dims,
    )
    .expect("dims >= 1");
    let mut backbone = reference.clone_trainable();
    let mut contexts: BTreeSet<Vec<TokenId>> = reference.table().keys().cloned().collect();
    contexts.extend(extra.iter().cloned());
    for ctx in contexts {
        for j in 0..dims {
            for a in vocab.tokens() {
                let v = backbone.logit(&ctx, j, a) + rng.gen_range(-1.5..1.5);
                backbone.set_logit(&ctx, j, a, v).expect("backbone is trainable");
            }
        }
    }
    let head = PreferenceHead::from_matrix(m, dims, (0..m * dims).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape matches");
    let beta = rng.gen_range(0.2..2.0);
    PersRM::from_parts(backbone, reference, head, beta).expect("parts agree")
}

pub fn random_decode_instance(seed: u64, max_vocab: usize) -> DecodeInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = rng.gen_range(2..=max_vocab.max(2));
    let vocab = Vocab::new(v, 0).expect("v >= 2");
    let lm = NGramLM::train(&random_corpus(&mut rng, &vocab, 10), &vocab, rng.gen_range(1..=3), 0.5)
        .expect("corpus is nonempty");
    let dims = rng.gen_range(1..=4);
    let order = rng.gen_range(1..=3);
    let plen = rng.gen_range(1..=4);
    let glen = rng.gen_range(0..=3);
    let prompt = random_tokens(&mut rng, &vocab, plen);
    let generated = random_tokens(&mut rng, &vocab, glen);
    let state = State::from_parts(&vocab, prompt, generated).expect("no EOS inside");
    let ctx = state.context(order - 1);
    let model = random_model(&mut rng, &vocab, order, dims, dims, &[ctx]);
    let w = PreferenceWeights((0..dims).map(|_| rng.gen_range(-2.0..2.0)).collect());
    DecodeInstance { lm, model, w, state }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, cases: usize, failures: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            cases,
            failures,
            max_error,
            tolerance,
            passed: failures == 0,
        }
    }
}

/// Full-vocabulary guided greedy step equals the exhaustive
/// `π_LM · exp(β wᵀ log-ratio)` argmax.
pub fn check_argmax_equivalence(seed: u64, instances: usize) -> Result<CheckResult> {
    let mut failures = 0;
    for i in 0..instances {
        let inst = random_decode_instance(seed.wrapping_add(i as u64), 20);
        let dec = PadDecoder::new(&inst.lm, &inst.model)?;
        let beta = 1.0 + (i % 3) as f64;
        let k = inst.lm.vocab().len();
        if dec.greedy_step(&inst.w, &inst.state, beta, k)? != dec.oracle_argmax(&inst.w, &inst.state, beta)? {
            failures += 1;
        }
    }
    Ok(CheckResult::new("argmax_equivalence", instances, failures, 0.0, 0.0))
}

/// Summed token rewards along a trajectory equal the preference-weighted
/// sequence score of every prefix.
pub fn check_telescoping(seed: u64, instances: usize) -> Result<CheckResult> {
    const TOL: f64 = 1e-9;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let vocab = Vocab::new(rng.gen_range(3..=12), 0)?;
        let order = rng.gen_range(1..=3);
        let dims = rng.gen_range(1..=4);
        let plen = rng.gen_range(1..=4);
        let ylen = rng.gen_range(1..=10);
        let x = random_tokens(&mut rng, &vocab, plen);
        let y = random_tokens(&mut rng, &vocab, ylen);
        let model = random_model(&mut rng, &vocab, order, dims, dims, &[]);
        let w = PreferenceWeights((0..dims).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let traj = Trajectory {
            prompt: x.clone(),
            response: y.clone(),
            terminated: false,
        };
        let mut cum = 0.0;
        let mut bad = false;
        for (t, (s, a)) in traj.steps().enumerate() {
            cum += model.token_reward(&w, &s, a)?;
            let seq = w.dot(&model.sequence_feature_score(&x, &y[..=t])?.0);
            let err = (cum - seq).abs();
            worst = worst.max(err);
            bad |= err > TOL;
        }
        failures += bad as usize;
    }
    Ok(CheckResult::new("telescoping", instances, failures, worst, TOL))
}

/// Successor features satisfy their Bellman equation and reproduce direct
/// policy evaluation for any weight vector.
pub fn check_successor_features(seed: u64, instances: usize) -> Result<CheckResult> {
    const TOL: f64 = 1e-9;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for i in 0..instances {
        let s = seed.wrapping_add(i as u64);
        let mdp = if i % 2 == 0 {
            theory::random_instance(s).mdp
        } else {
            theory::random_stochastic_mdp(s)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xabcdef);
        let pi = theory::random_policy(&mdp, &mut rng);
        let sf = theory::successor_features(&mdp, &pi)?;
        let w = PreferenceWeights((0..mdp.dims()).map(|_| rng.gen_range(-1.0..=1.0)).collect());
        let residual = theory::sf_bellman_residual(&mdp, &pi, &sf);
        let gap = theory::q_from_sf(&sf, &w)?.max_abs_diff(&theory::evaluate_policy(&mdp, &pi, &w)?);
        let err = residual.max(gap);
        worst = worst.max(err);
        failures += (err > TOL) as usize;
    }
    Ok(CheckResult::new("successor_features", instances, failures, worst, TOL))
}

fn random_pairs(rng: &mut ChaCha8Rng, vocab: &Vocab, m: usize, n: usize) -> Vec<PreferencePair> {
    (0..n)
        .map(|_| {
            let plen = rng.gen_range(1..=3);
            let prompt = random_tokens(rng, vocab, plen);
            let (cl, rl) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let chosen = random_tokens(rng, vocab, cl);
            let mut rejected = random_tokens(rng, vocab, rl);
            if rejected == chosen {
                rejected.push(vocab.eos());
            }
            let pref = PreferenceDescriptor::from_values((0..m).map(|_| rng.gen_range(-1.0..=1.0)).collect())
                .expect("values in range");
            PreferencePair::new(prompt, chosen, rejected, pref).expect("distinct nonempty responses")
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps gradients that are
/// zero analytically from being judged against rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Small model and batch used for finite-difference checks.
pub fn gradient_fixture(seed: u64) -> (PersRM, Vec<PreferencePair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::new(12, 0).expect("valid vocabulary");
    let model = random_model(&mut rng, &vocab, 2, 3, 3, &[]);
    let pairs = random_pairs(&mut rng, &vocab, 3, 6);
    (model, pairs)
}

/// Analytic gradients against central differences with step `1e-6` for
/// every backbone logit the batch touches and every head entry.
pub fn check_gradients(seed: u64) -> Result<CheckResult> {
    const TOL: f64 = 1e-4;
    const H: f64 = 1e-6;
    let (model, pairs) = gradient_fixture(seed);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut cases = 0;
    for source in [WeightSource::Head, WeightSource::UnitDescriptor] {
        let Gradient::Backbone(g) = model.grad(&pairs, ParamBlock::Backbone, &source)? else {
            unreachable!("backbone block yields a backbone gradient")
        };
        let mut contexts: BTreeSet<Vec<TokenId>> = model.backbone().table().keys().cloned().collect();
        contexts.extend(g.keys().cloned());
        let v = model.backbone().vocab().len();
        for ctx in contexts {
            for j in 0..model.dims() {
                for a in 0..v as TokenId {
                    let base = model.backbone().logit(&ctx, j, a);
                    let mut plus = model.clone();
                    plus.backbone_mut().set_logit(&ctx, j, a, base + H)?;
                    let mut minus = model.clone();
                    minus.backbone_mut().set_logit(&ctx, j, a, base - H)?;
                    let numeric = (plus.loss_with(&pairs, &source)? - minus.loss_with(&pairs, &source)?) / (2.0 * H);
                    let analytic = g.get(&ctx).map_or(0.0, |row| row[j * v + a as usize]);
                    let err = relative_error(analytic, numeric);
                    worst = worst.max(err);
                    failures += (err > TOL) as usize;
                    cases += 1;
                }
            }
        }
    }
    let Gradient::Head(g) = model.grad(&pairs, ParamBlock::Head, &WeightSource::Head)? else {
        unreachable!("head block yields a head gradient")
    };
    let head = model.head().clone();
    for (i, &analytic) in g.iter().enumerate() {
        let bumped = |delta: f64| -> Result<f64> {
            let mut matrix = head.matrix().to_vec();
            matrix[i] += delta;
            let mut m = model.clone();
            *m.head_mut() = PreferenceHead::from_matrix(head.inputs(), head.outputs(), matrix)?;
            m.loss(&pairs)
        };
        let numeric = (bumped(H)? - bumped(-H)?) / (2.0 * H);
        let err = relative_error(analytic, numeric);
        worst = worst.max(err);
        failures += (err > TOL) as usize;
        cases += 1;
    }
    Ok(CheckResult::new("gradients", cases, failures, worst, TOL))
}

/// `β = 0` and `w = 0` guided greedy decoding both reproduce base greedy.
pub fn check_reductions(seed: u64, instances: usize) -> Result<CheckResult> {
    let mut failures = 0;
    for i in 0..instances {
        let mut inst = random_decode_instance(seed.wrapping_add(i as u64), 20);
        let prompt = inst.state.prompt().to_vec();
        let base = base_greedy(&inst.lm, &prompt, 12)?;
        let dec = PadDecoder::new(&inst.lm, &inst.model)?;
        let k = inst.lm.vocab().len().min(10);
        let zero_beta = DecodeConfig {
            beta: 0.0,
            k,
            max_new_tokens: 12,
            ..DecodeConfig::default()
        };
        let (a, _) = dec.generate_with_weights(&inst.w, &prompt, &zero_beta, false)?;
        inst.w = PreferenceWeights::zeros(inst.w.len());
        let zero_w = DecodeConfig { beta: 1.0, ..zero_beta };
        let (b, _) = dec.generate_with_weights(&inst.w, &prompt, &zero_w, false)?;
        failures += (a != base || b != base) as usize;
    }
    Ok(CheckResult::new("reductions", instances, failures, 0.0, 0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremSummary {
    pub instances: usize,
    pub factor2_violations: usize,
    pub factor1_violations: usize,
    pub max_gap_over_factor1_bound: f64,
    pub reports: Vec<BoundReport>,
}

/// Runs the transfer-bound check on `instances` random tabular problems.
pub fn theorem_sweep(seed: u64, instances: usize) -> Result<TheoremSummary> {
    let mut reports = Vec::with_capacity(instances);
    for i in 0..instances {
        let s = seed.wrapping_add(i as u64);
        let inst = theory::random_instance(s);
        let mut r = theory::theorem1_check(&inst.mdp, &inst.train_ws, &inst.test_w)?;
        r.seed = Some(s);
        reports.push(r);
    }
    let ratio = reports
        .iter()
        .filter(|r| r.bound_factor1 > 0.0)
        .map(|r| r.max_gap / r.bound_factor1)
        .fold(0.0, f64::max);
    Ok(TheoremSummary {
        instances,
        factor2_violations: reports.iter().filter(|r| !r.holds_factor2).count(),
        factor1_violations: reports.iter().filter(|r| !r.holds_factor1).count(),
        max_gap_over_factor1_bound: ratio,
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Tabular instances for the transfer-bound sweep.
    pub instances: usize,
    pub decode_instances: usize,
    pub telescoping_instances: usize,
    pub sf_instances: usize,
    pub reduction_instances: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 500,
            decode_instances: 1000,
            telescoping_instances: 200,
            sf_instances: 200,
            reduction_instances: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub theorem: TheoremSummary,
    pub passed: bool,
}

impl VerifyReport {
    /// One line per check.
    pub fn summary(&self) -> String {
        let mut lines: Vec<String> = self
            .checks
            .iter()
            .map(|c| {
                format!(
                    "{:<20} {} cases={} failures={} max_error={:.3e}",
                    c.name,
                    if c.passed { "PASS" } else { "FAIL" },
                    c.cases,
                    c.failures,
                    c.max_error
                )
            })
            .collect();
        let t = &self.theorem;
        lines.push(format!(
            "{:<20} {} instances={} factor2_violations={}",
            "transfer_bound",
            if t.factor2_violations == 0 { "PASS" } else { "FAIL" },
            t.instances,
            t.factor2_violations
        ));
        lines.push(format!(
            "{:<20} INFO factor1_violations={} max_gap/factor1_bound={:.4}",
            "transfer_bound", t.factor1_violations, t.max_gap_over_factor1_bound
        ));
        lines.join("\n")
    }
}

pub fn run_battery(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let checks = vec![
        check_argmax_equivalence(cfg.seed, cfg.decode_instances)?,
        check_telescoping(cfg.seed, cfg.telescoping_instances)?,
        check_successor_features(cfg.seed, cfg.sf_instances)?,
        check_gradients(cfg.seed)?,
        check_reductions(cfg.seed, cfg.reduction_instances)?,
    ];
    let theorem = theorem_sweep(cfg.seed, cfg.instances)?;
    let passed = checks.iter().all(|c| c.passed) && theorem.factor2_violations == 0;
    Ok(VerifyReport {
        seed: cfg.seed,
        checks,
        theorem,
        passed,
    })
}
