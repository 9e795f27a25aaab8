//! End-to-end commands driven by one TOML run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::{read_jsonl, write_jsonl, write_text, JsonlHeader, Provenance};
use crate::datagen::{gen_corpus, gen_pref_pairs, heldout_prompts, CorpusSpec, PairRecord, PairSpec, PromptRecord};
use crate::decoder::{base_greedy, DecodeConfig, GenerationTrace, PadDecoder, ScoredResponse, StepTrace};
use crate::error::{PadError, Result};
use crate::evalkit::{compare_runs, diversity, EvalReport, StyleOracle};
use crate::mdp::{TokenId, Trajectory};
use crate::persrm::{
    train_stage1, train_stage2, LossRecord, PersRM, PreferenceDescriptor, PreferencePair, TrainConfig, TrainingStage,
};
use crate::toylm::{FactoredLM, NGramLM};
use crate::verify::{run_battery, VerifyConfig, VerifyReport};

/// File locations; relative entries are resolved against `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub corpus: PathBuf,
    pub pairs: PathBuf,
    pub prompts: PathBuf,
    pub base_lm: PathBuf,
    pub checkpoint: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: "runs/default".into(),
            corpus: "corpus.jsonl".into(),
            pairs: "pairs.jsonl".into(),
            prompts: "prompts.jsonl".into(),
            base_lm: "base_lm.json".into(),
            checkpoint: "persrm.json".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn corpus(&self) -> PathBuf {
        self.resolve(&self.corpus)
    }

    pub fn pairs(&self) -> PathBuf {
        self.resolve(&self.pairs)
    }

    pub fn prompts(&self) -> PathBuf {
        self.resolve(&self.prompts)
    }

    pub fn base_lm(&self) -> PathBuf {
        self.resolve(&self.base_lm)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.resolve(&self.checkpoint)
    }

    pub fn reports(&self) -> PathBuf {
        self.resolve(&self.reports)
    }

    pub fn train_log(&self, stage: u8) -> PathBuf {
        self.resolve(Path::new(&format!("train_log_stage{stage}.csv")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// n-gram order of the base model.
    pub order: usize,
    pub alpha: f64,
    /// n-gram order of the factored reward model's contexts.
    pub feature_order: usize,
    /// `β` scaling the token features.
    pub beta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            order: 3,
            alpha: 0.5,
            feature_order: 1,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub heldout_prompts: usize,
    pub heldout_seed: u64,
    pub beta_sweep: Vec<f64>,
    pub k_sweep: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            heldout_prompts: 100,
            heldout_seed: 1,
            beta_sweep: vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0],
            k_sweep: vec![1, 2, 5, 10, 20],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub corpus: CorpusSpec,
    pub pairs: PairSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub verify: VerifyConfig,
    #[serde(skip)]
    pinned_hash: Option<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PadError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PadError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            PadError::Config(msg) => PadError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// SHA-256 of the canonical JSON form, paths excluded so that moving the
    /// output directory does not change artifact contents.
    pub fn hash(&self) -> String {
        if let Some(h) = &self.pinned_hash {
            return h.clone();
        }
        let mut v = serde_json::to_value(self).expect("run configuration serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    /// Freezes the current hash so later flag overrides do not change it.
    pub fn pin_hash(&mut self) {
        self.pinned_hash = Some(self.hash());
    }

    fn provenance(&self, seed: u64) -> Provenance {
        Provenance {
            config_hash: Some(self.hash()),
            seed: Some(seed),
        }
    }

    fn check_inputs(paths: &[PathBuf], hint: &str) -> Result<()> {
        for p in paths {
            if !p.exists() {
                return Err(PadError::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing input; {hint}")),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub corpus: usize,
    pub pairs: usize,
    pub pairs_per_preference: BTreeMap<String, usize>,
    pub prompts: usize,
}

/// Writes the corpus, preference pairs and held-out prompt files.
pub fn gen_data(cfg: &RunConfig) -> Result<GenDataSummary> {
    let space = cfg.corpus.space()?;
    let corpus = gen_corpus(&cfg.corpus)?;
    let oracle = cfg.corpus.oracle()?;
    let pairs = gen_pref_pairs(&corpus, &oracle, &cfg.pairs)?;
    let prompts = heldout_prompts(&cfg.corpus, &corpus, cfg.eval.heldout_prompts, cfg.eval.heldout_seed)?;

    let header = JsonlHeader::new("corpus", cfg.provenance(cfg.corpus.seed))
        .with_meta("vocab_size", cfg.corpus.vocab_size)
        .with_meta("dims", &cfg.corpus.dims);
    write_jsonl(&cfg.paths.corpus(), &header, &corpus)?;

    let records: Vec<PairRecord> = pairs.iter().map(|p| PairRecord::from_pair(&space, p)).collect();
    let header = JsonlHeader::new("pairs", cfg.provenance(cfg.pairs.seed))
        .with_meta("dims", &cfg.corpus.dims)
        .with_meta("threshold", cfg.pairs.threshold);
    write_jsonl(&cfg.paths.pairs(), &header, &records)?;

    let prompt_records: Vec<PromptRecord> = prompts.into_iter().map(|prompt| PromptRecord { prompt }).collect();
    let header = JsonlHeader::new("prompts", cfg.provenance(cfg.eval.heldout_seed));
    write_jsonl(&cfg.paths.prompts(), &header, &prompt_records)?;

    let mut per_pref = BTreeMap::new();
    for p in &pairs {
        *per_pref.entry(space.label(&p.pref)).or_insert(0) += 1;
    }
    Ok(GenDataSummary {
        corpus: corpus.len(),
        pairs: pairs.len(),
        pairs_per_preference: per_pref,
        prompts: prompt_records.len(),
    })
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Vec<Trajectory>> {
    let path = cfg.paths.corpus();
    RunConfig::check_inputs(std::slice::from_ref(&path), "run `pad gen-data` first")?;
    let (_, corpus) = read_jsonl::<Trajectory>(&path, "corpus")?;
    let vocab = cfg.corpus.vocab()?;
    for t in &corpus {
        vocab.check_all(&t.prompt)?;
        vocab.check_all(&t.response)?;
    }
    Ok(corpus)
}

pub fn load_pairs(cfg: &RunConfig) -> Result<Vec<PreferencePair>> {
    let path = cfg.paths.pairs();
    RunConfig::check_inputs(std::slice::from_ref(&path), "run `pad gen-data` first")?;
    let space = cfg.corpus.space()?;
    let (_, records) = read_jsonl::<PairRecord>(&path, "pairs")?;
    records.into_iter().map(|r| r.into_pair(&space)).collect()
}

pub fn load_prompts(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    RunConfig::check_inputs(&[path.to_path_buf()], "run `pad gen-data` first or pass a prompt file")?;
    let (_, records) = read_jsonl::<PromptRecord>(path, "prompts")?;
    Ok(records.into_iter().map(|r| r.prompt).collect())
}

/// Which training stages to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    One,
    Two,
    All,
}

impl std::str::FromStr for StageSelection {
    type Err = PadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "all" => Ok(Self::All),
            other => Err(PadError::Config(format!("stage must be 1, 2 or all, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage1: Vec<LossRecord>,
    pub stage2: Vec<LossRecord>,
    pub checkpoint: PathBuf,
}

fn write_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut text = String::from(LossRecord::csv_header());
    text.push('\n');
    for r in records {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    write_text(path, &text)
}

/// Fresh reward model: the reference is the `feature_order` n-gram of the
/// corpus copied into every head.
pub fn initial_model(cfg: &RunConfig, corpus: &[Trajectory]) -> Result<PersRM> {
    let vocab = cfg.corpus.vocab()?;
    let lm = NGramLM::train(corpus, &vocab, cfg.model.feature_order, cfg.model.alpha)?;
    let m = cfg.corpus.dims.len();
    let reference = FactoredLM::from_ngram(&lm, m)?;
    PersRM::new(&reference, m, cfg.model.beta)
}

/// Stage 1 also fits and saves the base language model.
pub fn train(cfg: &RunConfig, stage: StageSelection) -> Result<TrainSummary> {
    let pairs = load_pairs(cfg)?;
    let prov = cfg.provenance(cfg.train.seed);
    let ckpt = cfg.paths.checkpoint();
    let mut summary = TrainSummary {
        stage1: vec![],
        stage2: vec![],
        checkpoint: ckpt.clone(),
    };

    let model = if stage == StageSelection::Two {
        if !ckpt.exists() {
            return Err(PadError::StageOrder(format!(
                "stage 2 needs the stage-1 checkpoint {}; run `pad train --stage 1` first",
                ckpt.display()
            )));
        }
        PersRM::load(&ckpt)?.1
    } else {
        let corpus = load_corpus(cfg)?;
        let vocab = cfg.corpus.vocab()?;
        NGramLM::train(&corpus, &vocab, cfg.model.order, cfg.model.alpha)?.save(&cfg.paths.base_lm(), &prov)?;
        let (model, log) = train_stage1(initial_model(cfg, &corpus)?, &pairs, &cfg.train)?;
        write_log(&cfg.paths.train_log(1), &log)?;
        summary.stage1 = log;
        model
    };

    let model = if stage == StageSelection::One {
        model
    } else {
        if model.stage() == TrainingStage::Fresh {
            return Err(PadError::StageOrder("checkpoint has not been through stage 1".into()));
        }
        let (model, log) = train_stage2(model, &pairs, &cfg.train)?;
        write_log(&cfg.paths.train_log(2), &log)?;
        summary.stage2 = log;
        model
    };
    model.save(&ckpt, &prov)?;
    Ok(summary)
}

/// Options of one decode run beyond the `[decode]` config section.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeRequest {
    /// Descriptor text such as `polite,verbose`; ignored in base-only mode.
    pub preference: String,
    /// Prompt file; defaults to the held-out prompts.
    pub prompts: Option<PathBuf>,
    /// Generations file; defaults to `reports/generations_<label>.jsonl`.
    pub output: Option<PathBuf>,
    pub trace: bool,
    /// Greedy decoding from the base model alone.
    pub base_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub oracle_outside_topk: usize,
    pub steps: Vec<StepTrace>,
    pub samples: Vec<ScoredResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub prompts: usize,
    pub tokens: usize,
    pub total_seconds: f64,
    pub mean_seconds_per_prompt: f64,
    pub mean_microseconds_per_token: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub generations: Vec<Trajectory>,
    pub generations_path: PathBuf,
    pub trace_path: Option<PathBuf>,
    pub timing_path: PathBuf,
    pub timing: Timing,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn load_models(cfg: &RunConfig) -> Result<(NGramLM, PersRM)> {
    RunConfig::check_inputs(&[cfg.paths.base_lm(), cfg.paths.checkpoint()], "run `pad train` first")?;
    Ok((
        NGramLM::load(&cfg.paths.base_lm())?.1,
        PersRM::load(&cfg.paths.checkpoint())?.1,
    ))
}

/// Generates one response per prompt and writes generations, optional
/// traces and a timing record.
pub fn decode(cfg: &RunConfig, req: &DecodeRequest) -> Result<DecodeOutput> {
    let space = cfg.corpus.space()?;
    let pref = if req.base_only {
        PreferenceDescriptor::empty(space.len())
    } else {
        space.parse(&req.preference)?
    };
    let label = if req.base_only {
        "base".to_string()
    } else {
        space.label(&pref)
    };
    let prompts = load_prompts(&req.prompts.clone().unwrap_or_else(|| cfg.paths.prompts()))?;
    let (lm, model) = load_models(cfg)?;
    let dcfg = &cfg.decode;
    dcfg.validate(lm.vocab().len())?;
    let dec = PadDecoder::new(&lm, &model)?;

    let started = Instant::now();
    let mut generations = Vec::with_capacity(prompts.len());
    let mut traces = Vec::new();
    for (index, prompt) in prompts.iter().enumerate() {
        let (traj, trace) = if req.base_only {
            let p = &prompt[prompt.len().saturating_sub(dcfg.max_prompt_len)..];
            (base_greedy(&lm, p, dcfg.max_new_tokens)?, GenerationTrace::default())
        } else {
            dec.generate(&pref, prompt, dcfg, req.trace)?
        };
        if req.trace {
            traces.push(TraceRecord {
                index,
                prompt: traj.prompt.clone(),
                response: traj.response.clone(),
                oracle_outside_topk: trace.outside_topk_count(),
                steps: trace.steps,
                samples: trace.samples,
            });
        }
        generations.push(traj);
    }
    let elapsed = started.elapsed().as_secs_f64();

    let out = req
        .output
        .clone()
        .unwrap_or_else(|| cfg.paths.reports().join(format!("generations_{label}.jsonl")));
    let prov = cfg.provenance(dcfg.seed);
    write_jsonl(&out, &JsonlHeader::new("generations", prov.clone()), &generations)?;

    let trace_path = if req.trace {
        let path = with_suffix(&out, ".trace.jsonl");
        let w = if req.base_only {
            None
        } else {
            Some(model.encode_preference(&pref)?.0)
        };
        let header = JsonlHeader::new("trace", prov)
            .with_meta("beta", dcfg.beta)
            .with_meta("k", dcfg.k)
            .with_meta("strategy", dcfg.strategy.to_string())
            .with_meta("temperature", dcfg.temperature)
            .with_meta("max_new_tokens", dcfg.max_new_tokens)
            .with_meta("base_only", req.base_only)
            .with_meta("preference", space.to_map(&pref))
            .with_meta("weights", w);
        write_jsonl(&path, &header, &traces)?;
        Some(path)
    } else {
        None
    };

    let tokens: usize = generations.iter().map(|t| t.response.len()).sum();
    let timing = Timing {
        prompts: generations.len(),
        tokens,
        total_seconds: elapsed,
        mean_seconds_per_prompt: elapsed / generations.len().max(1) as f64,
        mean_microseconds_per_token: elapsed * 1e6 / tokens.max(1) as f64,
    };
    let timing_path = with_suffix(&out, ".timing.json");
    write_stamped(&timing_path, cfg, dcfg.seed, &timing)?;
    Ok(DecodeOutput {
        generations,
        generations_path: out,
        trace_path,
        timing_path,
        timing,
    })
}

pub fn load_generations(path: &Path) -> Result<Vec<Trajectory>> {
    RunConfig::check_inputs(&[path.to_path_buf()], "run `pad decode` first")?;
    Ok(read_jsonl::<Trajectory>(path, "generations")?.1)
}

/// Compares two generation files and writes `<output>.csv` and
/// `<output>.json`.
pub fn eval(cfg: &RunConfig, run_a: &Path, run_b: &Path, preference: &str, output: &Path) -> Result<EvalReport> {
    let oracle = cfg.corpus.oracle()?;
    let pref = oracle.space().parse(preference)?;
    let a = load_generations(run_a)?;
    let b = load_generations(run_b)?;
    let report = compare_runs(&a, &b, &oracle, &pref)?;
    write_text(&output.with_extension("csv"), &report.to_csv())?;
    write_stamped(&output.with_extension("json"), cfg, cfg.decode.seed, &report)?;
    Ok(report)
}

/// One setting of a sensitivity sweep against base greedy decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_active_score: f64,
    pub mean_scores: Vec<f64>,
    pub diversity: f64,
    pub win_rate_vs_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub preference: BTreeMap<String, f64>,
    pub dims: Vec<String>,
    pub beta: Vec<SweepRow>,
    pub k: Vec<SweepRow>,
}

fn sweep_table(name: &str, dims: &[String], rows: &[SweepRow]) -> String {
    let mut out = format!("{name},mean_active_score");
    for d in dims {
        out.push_str(&format!(",{d}"));
    }
    out.push_str(",diversity,win_rate_vs_base\n");
    for r in rows {
        out.push_str(&format!("{},{}", r.value, r.mean_active_score));
        for s in &r.mean_scores {
            out.push_str(&format!(",{s}"));
        }
        out.push_str(&format!(",{},{}\n", r.diversity, r.win_rate_vs_base));
    }
    out
}

fn sweep_row(
    value: f64,
    runs: &[Trajectory],
    base: &[Trajectory],
    oracle: &StyleOracle,
    pref: &PreferenceDescriptor,
) -> Result<SweepRow> {
    let report = compare_runs(runs, base, oracle, pref)?;
    let active = pref.active_dims();
    let n = runs.len().max(1) as f64;
    let mean_scores: Vec<f64> = oracle.space().names().iter().map(|d| report.mean_scores_a[d]).collect();
    let mean_active_score = active.iter().map(|&j| mean_scores[j]).sum::<f64>() / active.len() as f64;
    Ok(SweepRow {
        value,
        mean_active_score,
        mean_scores,
        diversity: runs.iter().map(|t| diversity(t.content())).sum::<f64>() / n,
        win_rate_vs_base: report.win_rate,
    })
}

/// Score-vs-β and score-vs-k tables on the held-out prompts, written to
/// `reports/sweep_beta.csv`, `reports/sweep_k.csv` and `reports/sweep.json`.
pub fn sweep(cfg: &RunConfig, preference: &str, betas: &[f64], ks: &[usize]) -> Result<SweepReport> {
    let oracle = cfg.corpus.oracle()?;
    let space = oracle.space().clone();
    let pref = space.parse(preference)?;
    let prompts = load_prompts(&cfg.paths.prompts())?;
    let (lm, model) = load_models(cfg)?;
    let dec = PadDecoder::new(&lm, &model)?;
    let base: Vec<Trajectory> = prompts
        .iter()
        .map(|p| base_greedy(&lm, p, cfg.decode.max_new_tokens))
        .collect::<Result<_>>()?;
    let run = |dcfg: &DecodeConfig| -> Result<Vec<Trajectory>> {
        prompts
            .iter()
            .map(|p| dec.generate(&pref, p, dcfg, false).map(|(t, _)| t))
            .collect()
    };
    let mut beta_rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let dcfg = DecodeConfig {
            beta,
            ..cfg.decode.clone()
        };
        beta_rows.push(sweep_row(beta, &run(&dcfg)?, &base, &oracle, &pref)?);
    }
    let mut k_rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let dcfg = DecodeConfig {
            k,
            ..cfg.decode.clone()
        };
        k_rows.push(sweep_row(k as f64, &run(&dcfg)?, &base, &oracle, &pref)?);
    }
    let report = SweepReport {
        preference: space.to_map(&pref),
        dims: space.names().to_vec(),
        beta: beta_rows,
        k: k_rows,
    };
    let dir = cfg.paths.reports();
    write_text(
        &dir.join("sweep_beta.csv"),
        &sweep_table("beta", &report.dims, &report.beta),
    )?;
    write_text(&dir.join("sweep_k.csv"), &sweep_table("k", &report.dims, &report.k))?;
    write_stamped(&dir.join("sweep.json"), cfg, cfg.decode.seed, &report)?;
    Ok(report)
}

/// Runs the verification battery and writes `reports/verify.json`.
pub fn verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let report = run_battery(&cfg.verify)?;
    write_stamped(&cfg.paths.reports().join("verify.json"), cfg, cfg.verify.seed, &report)?;
    Ok(report)
}

/// Pretty JSON object carrying `{schema_version, config_hash, seed}` next
/// to the body.
fn write_stamped<T: Serialize>(path: &Path, cfg: &RunConfig, seed: u64, body: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Stamped<'a, T> {
        schema_version: u32,
        config_hash: String,
        seed: u64,
        report: &'a T,
    }
    let stamped = Stamped {
        schema_version: crate::artifact::SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed,
        report: body,
    };
    write_text(
        path,
        &(serde_json::to_string_pretty(&stamped).expect("report serializes") + "\n"),
    )
}
