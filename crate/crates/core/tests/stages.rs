use std::fs;
use std::path::Path;

use vstreid::experiment::artifacts::{
    sidecar_path, CheckpointSidecar, ProposalRecord, ScoreRecord, BENCH_JSON, CMC_CSV, JOINT_CKPT, LSTM_CKPT,
    POTENTIAL_CKPT, PROPOSALS_JSONL, REPORT_JSON, SCORES_JSONL,
};
use vstreid::experiment::{stages, RunConfig, ScorerKind};
use vstreid::network::load_dataset;
use vstreid::ErrorKind;

fn small(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.synth.n_cameras = 6;
    cfg.synth.n_vehicles = 16;
    cfg.potential.epochs = 4;
    cfg.siamese.epochs = 4;
    cfg.lstm.epochs = 2;
    cfg.finetune.epochs = 1;
    cfg.bench.pairs = 20;
    cfg.paths.out_dir = out.to_owned();
    cfg
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn staged_run_matches_one_shot_pipeline() {
    let staged = tempfile::tempdir().unwrap();
    let whole = tempfile::tempdir().unwrap();
    let cfg = small(staged.path());

    stages::synth(&cfg).unwrap();
    stages::train_potential(&cfg).unwrap();
    stages::train_lstm(&cfg).unwrap();
    stages::finetune_stage(&cfg).unwrap();
    let n_props = stages::propose(&cfg).unwrap();
    let n_scores = stages::score(&cfg).unwrap();
    let report = stages::eval(&cfg).unwrap();
    assert_eq!(n_props, n_scores);

    let one_shot = stages::pipeline(&small(whole.path())).unwrap();
    assert_eq!(report.metrics_json().unwrap(), one_shot.run.report.metrics_json().unwrap());
    for name in [POTENTIAL_CKPT, LSTM_CKPT, JOINT_CKPT, PROPOSALS_JSONL, SCORES_JSONL] {
        let a = fs::read(staged.path().join(name)).unwrap();
        let b = fs::read(whole.path().join(name)).unwrap();
        assert!(a == b, "{name} differs between staged and one-shot runs");
    }
}

#[test]
fn artifacts_carry_the_run_stamp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    stages::pipeline(&cfg).unwrap();
    let hash = cfg.hash().unwrap();

    for ckpt in [POTENTIAL_CKPT, LSTM_CKPT, JOINT_CKPT] {
        let text = fs::read_to_string(sidecar_path(&dir.path().join(ckpt))).unwrap();
        let side: CheckpointSidecar = serde_json::from_str(&text).unwrap();
        assert_eq!(side.stamp.config_hash, hash);
        assert_eq!(side.stamp.seed, 3);
        assert!(!side.params.is_empty());
    }
    let props: Vec<ProposalRecord> = read_lines(&dir.path().join(PROPOSALS_JSONL));
    assert!(!props.is_empty());
    for p in &props {
        assert_eq!(p.stamp.config_hash, hash);
        assert_eq!(p.feasible, p.score.is_some());
        if p.feasible {
            assert_eq!(p.state_ids.len(), p.cameras.len());
            assert_eq!(p.edge_psi.len() + 1, p.cameras.len());
            assert_eq!((p.state_ids[0], *p.state_ids.last().unwrap()), (p.from, p.to));
        }
    }
    let scores: Vec<ScoreRecord> = read_lines(&dir.path().join(SCORES_JSONL));
    assert_eq!(scores.len(), props.len());
    for s in &scores {
        let expected = s.siamese + s.path_score.unwrap_or(0.0);
        assert!((s.final_score - expected).abs() < 1e-12);
    }

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(REPORT_JSON)).unwrap()).unwrap();
    assert_eq!(report["config_hash"], hash);
    assert_eq!(report["rng"], "chacha8");
    let bench: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(BENCH_JSON)).unwrap()).unwrap();
    assert_eq!(bench["potential"], "trained");
    assert!(bench["shared"]["counters"]["outputs_match"].as_bool().unwrap());

    let cmc = fs::read_to_string(dir.path().join(CMC_CSV)).unwrap();
    assert!(cmc.starts_with("scorer,k,accuracy\n"));
    assert!(cmc.lines().skip(1).all(|l| l.split(',').count() == 3));
}

#[test]
fn oracle_scorer_needs_no_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.eval.scorers = vec![ScorerKind::Oracle, ScorerKind::Constant, ScorerKind::Str];
    cfg.eval.ajs = false;
    let report = stages::eval(&cfg).unwrap();
    assert_eq!(report.metrics.scorers["oracle"].map, 1.0);
    assert!(report.metrics.scorers["constant"].map < 1.0);
    assert!(report.training.is_none());
}

#[test]
fn later_stages_name_their_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let err = stages::train_lstm(&cfg).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    assert!(err.to_string().contains("train-potential"));
    let err = stages::score(&cfg).unwrap_err();
    assert!(err.to_string().contains("train-potential"));
    let mut cfg = small(dir.path());
    cfg.eval.scorers = vec![ScorerKind::Final];
    assert_eq!(stages::eval(&cfg).unwrap_err().kind(), ErrorKind::Config);
}

#[test]
fn generated_dataset_is_reused_until_the_synth_section_changes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    let first = stages::load_inputs(&cfg).unwrap();
    let on_disk = load_dataset(&cfg.paths.dataset_dir()).unwrap();
    assert_eq!(on_disk.states().len(), first.dataset.states().len());

    cfg.synth.n_vehicles = 10;
    let second = stages::load_inputs(&cfg).unwrap();
    assert_ne!(second.dataset.states().len(), first.dataset.states().len());
    let reloaded = load_dataset(&cfg.paths.dataset_dir()).unwrap();
    assert_eq!(reloaded.states().len(), second.dataset.states().len());
}

#[test]
fn bench_without_checkpoint_uses_an_untrained_potential() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let art = stages::bench_stage(&cfg).unwrap();
    assert_eq!(art.potential, "untrained");
    let c = &art.report.shared.counters;
    assert!(c.outputs_match);
    assert!(c.batch_evaluations <= c.edge_pair_bound);
}

#[test]
fn grad_check_writes_a_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let art = stages::grad_check(&cfg).unwrap();
    assert!(art.report.passed);
    assert_eq!(art.report.suites.len(), 3);
    assert!(dir.path().join("grad_check.json").exists());
}
