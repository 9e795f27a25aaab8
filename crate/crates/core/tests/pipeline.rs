use std::path::Path;

use pad_core::artifact::{read_jsonl, JsonlHeader};
use pad_core::datagen::{gen_corpus, gen_pref_pairs, CorpusSpec, PairSpec};
use pad_core::decoder::Strategy;
use pad_core::evalkit::compare_runs;
use pad_core::mdp::Trajectory;
use pad_core::persrm::{train_stage1, train_stage2, PersRM, Stage1Weights, TrainConfig, TrainingStage};
use pad_core::pipeline::{self, DecodeRequest, RunConfig, StageSelection, TraceRecord};
use pad_core::PadError;

fn config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.out_dir = dir.to_path_buf();
    cfg.eval.heldout_prompts = 20;
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn gen_data_counts_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = config(&a.path().join("nested/out"));
    let cfg_b = config(b.path());
    let s = pipeline::gen_data(&cfg_a).unwrap();
    pipeline::gen_data(&cfg_b).unwrap();
    assert_eq!(s.corpus, cfg_a.corpus.prompts * cfg_a.corpus.responses_per_prompt);
    assert_eq!(s.pairs, 3 * cfg_a.pairs.pairs_per_preference);
    assert!(s
        .pairs_per_preference
        .values()
        .all(|&n| n == cfg_a.pairs.pairs_per_preference));
    assert_eq!(s.prompts, 20);
    for f in ["corpus.jsonl", "pairs.jsonl", "prompts.jsonl"] {
        assert_eq!(
            read(&a.path().join("nested/out").join(f)),
            read(&b.path().join(f)),
            "{f}"
        );
    }
    let (header, corpus) = read_jsonl::<Trajectory>(&cfg_a.paths.corpus(), "corpus").unwrap();
    assert_eq!(header.schema_version, 1);
    assert_eq!(header.provenance.config_hash.as_deref(), Some(cfg_a.hash().as_str()));
    assert_eq!(header.provenance.seed, Some(cfg_a.corpus.seed));
    assert_eq!(corpus.len(), s.corpus);
}

#[test]
fn stage_two_before_stage_one_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    pipeline::gen_data(&cfg).unwrap();
    let err = pipeline::train(&cfg, StageSelection::Two).unwrap_err();
    assert!(matches!(err, PadError::StageOrder(_)), "{err}");
    assert!(err.to_string().contains("stage 1"));

    let corpus = pipeline::load_corpus(&cfg).unwrap();
    let pairs = pipeline::load_pairs(&cfg).unwrap();
    let fresh = pipeline::initial_model(&cfg, &corpus).unwrap();
    assert!(matches!(
        train_stage2(fresh, &pairs, &cfg.train),
        Err(PadError::StageOrder(_))
    ));
}

#[test]
fn training_lowers_loss_and_checkpoint_reloads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    pipeline::gen_data(&cfg).unwrap();
    let one = pipeline::train(&cfg, StageSelection::One).unwrap();
    assert!(one.stage2.is_empty());
    assert!((one.stage1[0].loss - std::f64::consts::LN_2).abs() < 1e-12);
    let final1 = one.stage1.last().unwrap().loss;
    assert!(final1 < std::f64::consts::LN_2, "{final1}");

    let two = pipeline::train(&cfg, StageSelection::Two).unwrap();
    let final2 = two.stage2.last().unwrap().loss;
    let (prov, model) = PersRM::load(&cfg.paths.checkpoint()).unwrap();
    assert_eq!(prov.config_hash.as_deref(), Some(cfg.hash().as_str()));
    assert_eq!(model.stage(), TrainingStage::Stage2);
    let pairs = pipeline::load_pairs(&cfg).unwrap();
    assert!((model.loss(&pairs).unwrap() - final2).abs() <= 1e-12);

    let log = std::fs::read_to_string(cfg.paths.train_log(2)).unwrap();
    assert_eq!(log.lines().count(), cfg.train.epochs_stage2 + 2);
    assert!(log.starts_with("stage,epoch,loss\n"));
}

#[test]
fn staged_and_all_training_write_identical_checkpoints() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cb) = (config(a.path()), config(b.path()));
    pipeline::gen_data(&ca).unwrap();
    pipeline::gen_data(&cb).unwrap();
    pipeline::train(&ca, StageSelection::All).unwrap();
    pipeline::train(&cb, StageSelection::One).unwrap();
    pipeline::train(&cb, StageSelection::Two).unwrap();
    assert_eq!(read(&ca.paths.checkpoint()), read(&cb.paths.checkpoint()));
    assert_eq!(read(&ca.paths.base_lm()), read(&cb.paths.base_lm()));
}

#[test]
fn flipped_labels_reverse_the_learned_direction() {
    let spec = CorpusSpec {
        prompts: 60,
        ..CorpusSpec::default()
    };
    let corpus = gen_corpus(&spec).unwrap();
    let oracle = spec.oracle().unwrap();
    let pairs = gen_pref_pairs(
        &corpus,
        &oracle,
        &PairSpec {
            pairs_per_preference: 40,
            ..PairSpec::default()
        },
    )
    .unwrap();
    let flipped: Vec<_> = pairs.iter().map(|p| p.flipped()).collect();
    let mut cfg = RunConfig::default();
    cfg.corpus = spec;
    let train = TrainConfig {
        epochs_stage1: 20,
        epochs_stage2: 20,
        ..TrainConfig::default()
    };
    let fit = |data: &[_]| {
        let (m, _) = train_stage1(pipeline::initial_model(&cfg, &corpus).unwrap(), data, &train).unwrap();
        train_stage2(m, data, &train).unwrap().0
    };
    let normal = fit(&pairs);
    let reversed = fit(&flipped);
    let score = |m: &PersRM, p: &pad_core::persrm::PreferencePair| {
        let w = m.encode_preference(&p.pref).unwrap();
        w.dot(&m.sequence_feature_score(&p.prompt, &p.chosen).unwrap().0)
            - w.dot(&m.sequence_feature_score(&p.prompt, &p.rejected).unwrap().0)
    };
    let agree = pairs.iter().filter(|p| score(&normal, p) > 0.0).count();
    let agree_rev = pairs.iter().filter(|p| score(&reversed, p) < 0.0).count();
    assert!(agree as f64 >= 0.9 * pairs.len() as f64, "{agree}");
    assert!(agree_rev as f64 >= 0.9 * pairs.len() as f64, "{agree_rev}");
}

#[test]
fn all_ones_stage_one_keeps_heads_identical() {
    let spec = CorpusSpec {
        prompts: 60,
        ..CorpusSpec::default()
    };
    let corpus = gen_corpus(&spec).unwrap();
    let pairs = gen_pref_pairs(
        &corpus,
        &spec.oracle().unwrap(),
        &PairSpec {
            pairs_per_preference: 30,
            ..PairSpec::default()
        },
    )
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.corpus = spec;
    let ones = TrainConfig {
        epochs_stage1: 10,
        stage1_weights: Stage1Weights::AllOnes,
        ..TrainConfig::default()
    };
    let (collapsed, _) = train_stage1(pipeline::initial_model(&cfg, &corpus).unwrap(), &pairs, &ones).unwrap();
    let same = |m: &PersRM| {
        m.backbone().table().values().all(|row| {
            let v = m.backbone().vocab().len();
            (1..m.dims()).all(|j| row[j * v..(j + 1) * v] == row[..v])
        })
    };
    assert!(same(&collapsed));
    let unit = TrainConfig {
        epochs_stage1: 10,
        ..TrainConfig::default()
    };
    let (split, _) = train_stage1(pipeline::initial_model(&cfg, &corpus).unwrap(), &pairs, &unit).unwrap();
    assert!(!same(&split));
}

fn trained(dir: &Path) -> RunConfig {
    let cfg = config(dir);
    pipeline::gen_data(&cfg).unwrap();
    pipeline::train(&cfg, StageSelection::All).unwrap();
    cfg
}

fn trace_of(path: &Path) -> (JsonlHeader, Vec<TraceRecord>) {
    read_jsonl(path, "trace").unwrap()
}

#[test]
fn decode_outputs_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path());
    cfg.pin_hash();
    let out = |name: &str| dir.path().join(name);

    let req = |pref: &str, file: &str| DecodeRequest {
        preference: pref.into(),
        output: Some(out(file)),
        trace: true,
        ..DecodeRequest::default()
    };
    let guided = pipeline::decode(&cfg, &req("polite", "polite.jsonl")).unwrap();
    assert_eq!(guided.generations.len(), 20);
    assert!(guided.timing_path.exists());
    let (header, records) = trace_of(guided.trace_path.as_ref().unwrap());
    assert_eq!(header.meta["beta"], serde_json::json!(1.0));
    assert_eq!(header.meta["k"], serde_json::json!(10));
    assert_eq!(header.meta["strategy"], serde_json::json!("greedy"));
    assert_eq!(records.len(), 20);
    assert!(records
        .iter()
        .all(|r| r.steps.len() == r.response.len() && r.steps.iter().all(|s| s.candidates.len() == 10)));

    let base = pipeline::decode(
        &cfg,
        &DecodeRequest {
            base_only: true,
            ..req("", "base.jsonl")
        },
    )
    .unwrap();
    let mut zero = cfg.clone();
    zero.decode.beta = 0.0;
    pipeline::decode(
        &zero,
        &DecodeRequest {
            trace: false,
            ..req("polite", "beta0.jsonl")
        },
    )
    .unwrap();
    assert_eq!(read(&base.generations_path), read(&out("beta0.jsonl")));

    let mut bok = cfg.clone();
    bok.decode.strategy = Strategy::BestOfK;
    bok.decode.k = 4;
    let r = pipeline::decode(&bok, &req("verbose", "bok.jsonl")).unwrap();
    let (header, records) = trace_of(r.trace_path.as_ref().unwrap());
    assert_eq!(header.meta["k"], serde_json::json!(4));
    assert!(records.iter().all(|r| r.samples.len() == 4));

    let err = pipeline::decode(&cfg, &req("rude", "x.jsonl")).unwrap_err();
    assert!(matches!(err, PadError::UnknownDimension(_)));
}

#[test]
fn decode_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path());
    cfg.decode.strategy = Strategy::Stochastic;
    for file in ["a.jsonl", "b.jsonl"] {
        let req = DecodeRequest {
            preference: "polite,verbose".into(),
            output: Some(dir.path().join(file)),
            trace: true,
            ..DecodeRequest::default()
        };
        pipeline::decode(&cfg, &req).unwrap();
    }
    assert_eq!(read(&dir.path().join("a.jsonl")), read(&dir.path().join("b.jsonl")));
    assert_eq!(
        read(&dir.path().join("a.trace.jsonl")),
        read(&dir.path().join("b.trace.jsonl"))
    );
}

#[test]
fn eval_matches_direct_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let req = |pref: &str, base_only: bool, file: &str| DecodeRequest {
        preference: pref.into(),
        base_only,
        output: Some(dir.path().join(file)),
        ..DecodeRequest::default()
    };
    let a = pipeline::decode(&cfg, &req("polite", false, "a.jsonl")).unwrap();
    let b = pipeline::decode(&cfg, &req("", true, "b.jsonl")).unwrap();

    let report = pipeline::eval(
        &cfg,
        &a.generations_path,
        &b.generations_path,
        "polite",
        &dir.path().join("rep"),
    )
    .unwrap();
    let oracle = cfg.corpus.oracle().unwrap();
    let pref = oracle.space().parse("polite").unwrap();
    let direct = compare_runs(&a.generations, &b.generations, &oracle, &pref).unwrap();
    assert_eq!(report, direct);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("rep.csv")).unwrap(),
        direct.to_csv()
    );
    assert!(dir.path().join("rep.json").exists());

    let own = pipeline::eval(
        &cfg,
        &a.generations_path,
        &a.generations_path,
        "polite",
        &dir.path().join("self"),
    )
    .unwrap();
    assert_eq!(own.win_rate, 0.5);

    let short = dir.path().join("short.jsonl");
    let mut cfg_short = cfg.clone();
    cfg_short.eval.heldout_prompts = 5;
    let text = std::fs::read_to_string(&b.generations_path).unwrap();
    std::fs::write(&short, text.lines().take(6).collect::<Vec<_>>().join("\n") + "\n").unwrap();
    assert!(matches!(
        pipeline::eval(&cfg, &a.generations_path, &short, "polite", &dir.path().join("bad")),
        Err(PadError::LengthMismatch { .. })
    ));
}

#[test]
fn sweep_tables_have_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let r = pipeline::sweep(&cfg, "verbose", &[0.0, 0.5, 2.0], &[1, 10]).unwrap();
    assert_eq!(r.beta.len(), 3);
    assert_eq!(r.k.len(), 2);
    assert_eq!(r.beta[0].win_rate_vs_base, 0.5);
    assert_eq!(r.k[0].win_rate_vs_base, 0.5);
    let table = std::fs::read_to_string(cfg.paths.reports().join("sweep_beta.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert_eq!(
        table.lines().next().unwrap(),
        "beta,mean_active_score,polite,verbose,markerful,diversity,win_rate_vs_base"
    );
}

#[test]
fn verify_report_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = config(a.path());
    ca.verify.instances = 50;
    ca.verify.decode_instances = 100;
    let mut cb = ca.clone();
    cb.paths.out_dir = b.path().to_path_buf();
    let r = pipeline::verify(&ca).unwrap();
    pipeline::verify(&cb).unwrap();
    assert!(r.passed);
    assert_eq!(r.theorem.instances, 50);
    assert_eq!(
        read(&ca.paths.reports().join("verify.json")),
        read(&cb.paths.reports().join("verify.json"))
    );
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let partial = RunConfig::from_toml("[decode]\nbeta = 2.5\n").unwrap();
    assert_eq!(partial.decode.beta, 2.5);
    assert_eq!(partial.decode.k, 10);
    assert!(matches!(
        RunConfig::from_toml("[decode]\nbetta = 1\n"),
        Err(PadError::Config(_))
    ));
    let mut moved = cfg.clone();
    moved.paths.out_dir = "/elsewhere".into();
    assert_eq!(moved.hash(), cfg.hash());
    let mut changed = cfg.clone();
    changed.train.lr = 1.0;
    assert_ne!(changed.hash(), cfg.hash());
}

#[test]
fn missing_inputs_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let err = pipeline::train(&cfg, StageSelection::One).unwrap_err();
    assert!(matches!(err, PadError::Io { .. }));
    assert!(err.to_string().contains("pairs.jsonl"));
}

#[test]
fn shipped_config_equals_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
}
