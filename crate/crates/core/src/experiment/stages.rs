//! One function per CLI subcommand. Each reads the artifacts of earlier
//! stages from the output directory and writes its own.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;

use super::artifacts::{
    cmc_table, load_stage_checkpoint, save_with_sidecar, write_json, write_jsonl, ProposalRecord, ScoreRecord, Stamp,
    BENCH_JSON, BIAS_JSON, CMC_CSV, GRAD_CHECK_JSON, JOINT_CKPT, LSTM_CKPT, POTENTIAL_CKPT, PROPOSALS_JSONL,
    REPORT_JSON, SCORES_JSONL,
};
use super::bench::{bench, BenchReport};
use super::bias::{bias_study, BiasStudy};
use super::config::RunConfig;
use super::gradsuite::{grad_suite, GradSuiteReport};
use super::pipeline::{
    evaluate, finetune, lstm_training_data, pretrain_lstm, query_pairs, run_pipeline, Models, PipelineRun, Potentials,
    Report, MRF_PREFIX, SIAMESE_PREFIX,
};
use crate::error::{Error, Result};
use crate::lstm::{final_similarity, path_score, PathLstm};
use crate::mrf::{PathProposal, ProposalEngine};
use crate::network::{load_dataset, write_dataset, Dataset, PathCatalog, Split, StateIx};
use crate::numeric::{derive_seed, seeded_rng, ParamStore};
use crate::potential::{FrozenPotential, Normalizer, PairPotential, PotentialNet, PsiMatrixCache};
use crate::synth::generate;

/// Number of seeded constructions in the bias study.
pub const BIAS_CONSTRUCTIONS: usize = 50;

pub fn stamp(cfg: &RunConfig) -> Result<Stamp> {
    Ok(Stamp {
        config_hash: cfg.hash()?,
        seed: cfg.seed,
    })
}

/// Dataset, path catalog and normalizer shared by every stage.
pub struct Inputs {
    pub dataset: Dataset,
    pub catalog: PathCatalog,
    pub normalizer: Normalizer,
}

impl Inputs {
    fn new(dataset: Dataset) -> Result<Self> {
        let catalog = PathCatalog::build(&dataset)?;
        let normalizer = Normalizer::from_dataset(&dataset);
        Ok(Inputs {
            dataset,
            catalog,
            normalizer,
        })
    }
}

fn generated_matches(ds: &Dataset, cfg: &RunConfig) -> Result<bool> {
    let want = cfg.synth.hash()?;
    Ok(ds.meta().provenance.as_ref().is_some_and(|p| p.config_hash == want))
}

/// The configured dataset; without one, the dataset generated into
/// `<out_dir>/dataset`, regenerated when missing or made from another
/// `[synth]` section.
pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    if let Some(dir) = &cfg.paths.dataset {
        return Inputs::new(load_dataset(dir)?);
    }
    let dir = cfg.paths.dataset_dir();
    if dir.join("meta.json").exists() {
        let ds = load_dataset(&dir)?;
        if generated_matches(&ds, cfg)? {
            return Inputs::new(ds);
        }
        tracing::warn!(dir = %dir.display(), "dataset was generated from a different [synth] section; regenerating");
    }
    let ds = generate(&cfg.synth)?;
    write_dataset(&dir, &ds)?;
    Inputs::new(ds)
}

/// `synth`: generates the dataset into the dataset directory.
pub fn synth(cfg: &RunConfig) -> Result<(PathBuf, Dataset)> {
    let ds = generate(&cfg.synth)?;
    let dir = cfg.paths.dataset_dir();
    write_dataset(&dir, &ds)?;
    Ok((dir, ds))
}

fn potentials(cfg: &RunConfig) -> Result<Potentials> {
    Potentials::from_combined(&load_stage_checkpoint(&cfg.paths.artifact(POTENTIAL_CKPT), "train-potential")?)
}

/// `train-potential`: both pairwise networks into `potential.ckpt`.
pub fn train_potential(cfg: &RunConfig) -> Result<Potentials> {
    let inputs = load_inputs(cfg)?;
    let (pots, [mrf_log, siamese_log]) = Potentials::train(cfg, &inputs.dataset, &inputs.catalog, &inputs.normalizer)?;
    let logs = BTreeMap::from([(MRF_PREFIX.to_owned(), mrf_log), (SIAMESE_PREFIX.to_owned(), siamese_log)]);
    save_with_sidecar(
        &cfg.paths.artifact(POTENTIAL_CKPT),
        &pots.combined_store()?,
        &stamp(cfg)?,
        "train-potential",
        logs,
    )?;
    Ok(pots)
}

/// `train-lstm`: Adam pretraining on frozen MRF proposals into `lstm.ckpt`.
pub fn train_lstm(cfg: &RunConfig) -> Result<ParamStore> {
    let inputs = load_inputs(cfg)?;
    let pots = potentials(cfg)?;
    let mrf = pots.frozen_mrf(&inputs.dataset, &inputs.normalizer)?;
    let data = lstm_training_data(cfg, &inputs.dataset, &inputs.catalog, &mrf)?;
    let (_, store, log) = pretrain_lstm(cfg, &inputs.dataset, &inputs.normalizer, &data)?;
    let logs = BTreeMap::from([("lstm".to_owned(), log)]);
    save_with_sidecar(&cfg.paths.artifact(LSTM_CKPT), &store, &stamp(cfg)?, "train-lstm", logs)?;
    Ok(store)
}

/// `finetune`: joint SGD of the Siamese network and Path-LSTM into
/// `joint.ckpt`.
pub fn finetune_stage(cfg: &RunConfig) -> Result<ParamStore> {
    let inputs = load_inputs(cfg)?;
    let pots = potentials(cfg)?;
    let lstm = load_stage_checkpoint(&cfg.paths.artifact(LSTM_CKPT), "train-lstm")?;
    let mrf = pots.frozen_mrf(&inputs.dataset, &inputs.normalizer)?;
    let data = lstm_training_data(cfg, &inputs.dataset, &inputs.catalog, &mrf)?;
    let (store, log) = finetune(cfg, &inputs.dataset, &inputs.normalizer, &pots, &lstm, &data)?;
    let logs = BTreeMap::from([("finetune".to_owned(), log)]);
    save_with_sidecar(&cfg.paths.artifact(JOINT_CKPT), &store, &stamp(cfg)?, "finetune", logs)?;
    Ok(store)
}

fn test_proposals(
    cfg: &RunConfig,
    inputs: &Inputs,
    pots: &Potentials,
) -> Result<Vec<((StateIx, StateIx), Option<PathProposal>)>> {
    let mrf = pots.frozen_mrf(&inputs.dataset, &inputs.normalizer)?;
    let engine = ProposalEngine::new(PsiMatrixCache::new(&mrf, &inputs.dataset, Split::Test), &inputs.catalog);
    let pairs = query_pairs(&inputs.dataset);
    let found = engine.batch_propose(&pairs, cfg.threads)?;
    Ok(pairs.into_iter().zip(found).collect())
}

fn write_proposals(cfg: &RunConfig, inputs: &Inputs, props: &[((StateIx, StateIx), Option<PathProposal>)]) -> Result<usize> {
    let stamp = stamp(cfg)?;
    let records: Vec<ProposalRecord> = props
        .iter()
        .map(|(pair, p)| ProposalRecord::new(&stamp, &inputs.dataset, *pair, p.as_ref()))
        .collect();
    write_jsonl(&cfg.paths.artifact(PROPOSALS_JSONL), &records)?;
    Ok(records.len())
}

/// `propose`: MRF proposals for every time-ordered query/gallery pair.
pub fn propose(cfg: &RunConfig) -> Result<usize> {
    let inputs = load_inputs(cfg)?;
    let pots = potentials(cfg)?;
    let props = test_proposals(cfg, &inputs, &pots)?;
    write_proposals(cfg, &inputs, &props)
}

fn score_records(
    cfg: &RunConfig,
    inputs: &Inputs,
    joint: &ParamStore,
    props: &[((StateIx, StateIx), Option<PathProposal>)],
) -> Result<Vec<ScoreRecord>> {
    let ds = &inputs.dataset;
    let stamp = stamp(cfg)?;
    let siamese_store = joint.extract(&format!("{SIAMESE_PREFIX}."));
    let net = PotentialNet::bind(&siamese_store, SIAMESE_PREFIX)?;
    let siamese = FrozenPotential::new(net, siamese_store, ds, inputs.normalizer)?;
    let lstm = PathLstm::bind(joint)?;
    props
        .iter()
        .map(|&((a, b), ref p)| {
            let psi = siamese.psi(a, b);
            let path = p
                .as_ref()
                .map(|p| path_score(&lstm, joint, ds, &inputs.normalizer, p))
                .transpose()?;
            let (va, vb) = (ds.state(a).vehicle, ds.state(b).vehicle);
            Ok(ScoreRecord {
                stamp: stamp.clone(),
                from: ds.state(a).id,
                to: ds.state(b).id,
                same_vehicle: va.zip(vb).map(|(x, y)| x == y),
                siamese: psi,
                path_score: path,
                final_score: final_similarity(psi, path),
            })
        })
        .collect()
}

/// `score`: final similarity of every query/gallery pair.
pub fn score(cfg: &RunConfig) -> Result<usize> {
    let inputs = load_inputs(cfg)?;
    let pots = potentials(cfg)?;
    let joint = load_stage_checkpoint(&cfg.paths.artifact(JOINT_CKPT), "finetune")?;
    let props = test_proposals(cfg, &inputs, &pots)?;
    let records = score_records(cfg, &inputs, &joint, &props)?;
    write_jsonl(&cfg.paths.artifact(SCORES_JSONL), &records)?;
    Ok(records.len())
}

fn optional_checkpoint(cfg: &RunConfig, name: &str, producer: &str) -> Result<Option<ParamStore>> {
    let path = cfg.paths.artifact(name);
    if path.exists() {
        load_stage_checkpoint(&path, producer).map(Some)
    } else {
        Ok(None)
    }
}

fn write_report(cfg: &RunConfig, report: &Report) -> Result<()> {
    write_json(&cfg.paths.artifact(REPORT_JSON), report)?;
    super::artifacts::write_text(&cfg.paths.artifact(CMC_CSV), &cmc_table(&report.metrics))
}

/// `eval`: every configured scorer over the test queries, using whichever
/// checkpoints exist, into `report.json` and `cmc.csv`.
pub fn eval(cfg: &RunConfig) -> Result<Report> {
    let inputs = load_inputs(cfg)?;
    let models = Models {
        potentials: optional_checkpoint(cfg, POTENTIAL_CKPT, "train-potential")?
            .map(|s| Potentials::from_combined(&s))
            .transpose()?,
        lstm: optional_checkpoint(cfg, LSTM_CKPT, "train-lstm")?,
        joint: optional_checkpoint(cfg, JOINT_CKPT, "finetune")?,
    };
    let start = std::time::Instant::now();
    let metrics = evaluate(cfg, &inputs.dataset, &inputs.catalog, &inputs.normalizer, &models)?;
    let mut report = Report::new(cfg, &inputs.dataset, &inputs.catalog, metrics)?;
    report.timing.insert("eval".into(), start.elapsed().as_secs_f64());
    write_report(cfg, &report)?;
    Ok(report)
}

/// `bench.json`.
#[derive(Debug, Clone, Serialize)]
pub struct BenchArtifact {
    #[serde(flatten)]
    pub stamp: Stamp,
    /// `trained` when `potential.ckpt` was used, `untrained` for a fresh
    /// random network. Counters do not depend on the weights.
    pub potential: String,
    #[serde(flatten)]
    pub report: BenchReport,
}

fn bench_with(cfg: &RunConfig, inputs: &Inputs, mrf_store: Option<ParamStore>) -> Result<BenchArtifact> {
    let ds = &inputs.dataset;
    let (net, store, label) = match mrf_store {
        Some(s) => (PotentialNet::bind(&s, MRF_PREFIX)?, s, "trained"),
        None => {
            let mut s = ParamStore::new();
            let mut rng = seeded_rng(derive_seed(cfg.seed, "mrf.init"));
            let net = PotentialNet::init(&mut s, MRF_PREFIX, ds.feature_dim(), &cfg.potential, &mut rng)?;
            (net, s, "untrained")
        }
    };
    let psi = FrozenPotential::new(net, store, ds, inputs.normalizer)?;
    let report = bench(ds, &inputs.catalog, &psi, cfg.bench.pairs, cfg.seed, cfg.threads)?;
    let artifact = BenchArtifact {
        stamp: stamp(cfg)?,
        potential: label.to_owned(),
        report,
    };
    write_json(&cfg.paths.artifact(BENCH_JSON), &artifact)?;
    Ok(artifact)
}

/// `bench`: ψ-evaluation counts of batch versus per-pair proposals.
pub fn bench_stage(cfg: &RunConfig) -> Result<BenchArtifact> {
    let inputs = load_inputs(cfg)?;
    let mrf = optional_checkpoint(cfg, POTENTIAL_CKPT, "train-potential")?.map(|s| s.extract(&format!("{MRF_PREFIX}.")));
    bench_with(cfg, &inputs, mrf)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckArtifact {
    #[serde(flatten)]
    pub stamp: Stamp,
    #[serde(flatten)]
    pub report: GradSuiteReport,
}

/// `grad-check`: all gradient suites into `grad_check.json`. Fails with a
/// numeric error after writing the file when any suite exceeds tolerance.
pub fn grad_check(cfg: &RunConfig) -> Result<GradCheckArtifact> {
    let artifact = GradCheckArtifact {
        stamp: stamp(cfg)?,
        report: grad_suite(cfg)?,
    };
    write_json(&cfg.paths.artifact(GRAD_CHECK_JSON), &artifact)?;
    if !artifact.report.passed {
        let failed: Vec<String> = artifact
            .report
            .suites
            .iter()
            .filter(|s| !s.passed)
            .map(|s| format!("{} ({:.3e} at {})", s.name, s.report.max_rel_error, s.report.worst_param))
            .collect();
        return Err(Error::GradCheck(failed.join(", ")));
    }
    Ok(artifact)
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasArtifact {
    #[serde(flatten)]
    pub stamp: Stamp,
    #[serde(flatten)]
    pub study: BiasStudy,
}

/// Bias study with the finetuned Path-LSTM of a finished run.
pub fn bias_of_run(cfg: &RunConfig, run: &PipelineRun) -> Result<BiasArtifact> {
    let ds = &run.dataset;
    let mrf = run.potentials.frozen_mrf(ds, &run.normalizer)?;
    let lstm = PathLstm::bind(&run.joint_store)?;
    let study = bias_study(
        ds,
        &run.normalizer,
        &mrf,
        &lstm,
        &run.joint_store,
        BIAS_CONSTRUCTIONS,
        derive_seed(cfg.seed, "bias"),
    )?;
    Ok(BiasArtifact {
        stamp: stamp(cfg)?,
        study,
    })
}

/// What `pipeline` produced besides its files.
pub struct PipelineOutputs {
    pub run: PipelineRun,
    pub bench: BenchArtifact,
    pub bias: BiasArtifact,
}

/// `pipeline`: synth, every training stage, proposals, scores, evaluation,
/// bench and the bias study in one process.
pub fn pipeline(cfg: &RunConfig) -> Result<PipelineOutputs> {
    let run = run_pipeline(cfg)?;
    if cfg.paths.dataset.is_none() {
        write_dataset(&cfg.paths.dataset_dir(), &run.dataset)?;
    }
    let stamp = stamp(cfg)?;
    let training = run.report.training.as_ref();
    let log = |name: &str, pick: fn(&super::pipeline::TrainingSummary) -> &crate::potential::TrainLog| {
        training.map(|t| (name.to_owned(), pick(t).clone())).into_iter().collect::<BTreeMap<_, _>>()
    };
    let mut potential_logs = log(MRF_PREFIX, |t| &t.potential);
    potential_logs.extend(log(SIAMESE_PREFIX, |t| &t.siamese));
    save_with_sidecar(
        &cfg.paths.artifact(POTENTIAL_CKPT),
        &run.potentials.combined_store()?,
        &stamp,
        "train-potential",
        potential_logs,
    )?;
    save_with_sidecar(&cfg.paths.artifact(LSTM_CKPT), &run.lstm_store, &stamp, "train-lstm", log("lstm", |t| &t.lstm))?;
    save_with_sidecar(
        &cfg.paths.artifact(JOINT_CKPT),
        &run.joint_store,
        &stamp,
        "finetune",
        log("finetune", |t| &t.finetune),
    )?;

    let inputs = Inputs {
        dataset: run.dataset.clone(),
        catalog: run.catalog.clone(),
        normalizer: run.normalizer,
    };
    let props = test_proposals(cfg, &inputs, &run.potentials)?;
    write_proposals(cfg, &inputs, &props)?;
    write_jsonl(&cfg.paths.artifact(SCORES_JSONL), &score_records(cfg, &inputs, &run.joint_store, &props)?)?;
    write_report(cfg, &run.report)?;
    let bench = bench_with(cfg, &inputs, Some(run.potentials.mrf_store.clone()))?;
    let bias = bias_of_run(cfg, &run)?;
    write_json(&cfg.paths.artifact(BIAS_JSON), &bias)?;
    Ok(PipelineOutputs { run, bench, bias })
}
