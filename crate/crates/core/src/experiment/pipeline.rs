//! Training stages, evaluation and the end-to-end run.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use serde::Serialize;

use super::config::{RunConfig, ScorerKind};
use crate::error::{Error, Result};
use crate::eval::{gallery_of, path_jaccard, rank_queries, str_baseline, Metrics};
use crate::lstm::{finetune_joint, label_proposals, path_score, train_path_lstm, LabeledProposal, PathLstm};
use crate::mrf::{PathProposal, ProposalEngine};
use crate::network::{load_dataset, Dataset, PathCatalog, Provenance, Split, StateIx};
use crate::numeric::{derive_seed, seeded_rng, ParamStore, RNG_ALGORITHM};
use crate::potential::{
    sample_any_camera_pairs, sample_training_pairs, time_order, train_potential, FrozenPotential, Normalizer,
    PairPotential, PotentialNet, PsiMatrixCache, TrainLog,
};
use crate::synth::generate;

pub const MRF_PREFIX: &str = "mrf";
pub const SIAMESE_PREFIX: &str = "siamese";

/// The dataset named by the config, or a freshly generated one.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.paths.dataset {
        Some(dir) => load_dataset(dir),
        None => generate(&cfg.synth),
    }
}

/// Both pairwise networks: the MRF potential (adjacent cameras) and the
/// Siamese scorer (any two cameras). Each has its own store.
#[derive(Debug, Clone)]
pub struct Potentials {
    pub mrf: PotentialNet,
    pub mrf_store: ParamStore,
    pub siamese: PotentialNet,
    pub siamese_store: ParamStore,
}

impl Potentials {
    pub fn train(cfg: &RunConfig, ds: &Dataset, catalog: &PathCatalog, norm: &Normalizer) -> Result<(Self, [TrainLog; 2])> {
        let d = ds.feature_dim();
        let mut mrf_store = ParamStore::new();
        let mrf = PotentialNet::init(
            &mut mrf_store,
            MRF_PREFIX,
            d,
            &cfg.potential,
            &mut seeded_rng(derive_seed(cfg.seed, "mrf.init")),
        )?;
        let samples = sample_training_pairs(
            ds,
            catalog,
            cfg.potential.negatives_per_positive,
            derive_seed(cfg.seed, "mrf.pairs"),
        )?;
        let mrf_log = train_potential(
            &mrf,
            &mut mrf_store,
            ds,
            norm,
            &samples,
            &cfg.potential,
            derive_seed(cfg.seed, "mrf.train"),
        )?;

        let mut siamese_store = ParamStore::new();
        let siamese = PotentialNet::init(
            &mut siamese_store,
            SIAMESE_PREFIX,
            d,
            &cfg.siamese,
            &mut seeded_rng(derive_seed(cfg.seed, "siamese.init")),
        )?;
        let samples = sample_any_camera_pairs(
            ds,
            Split::Train,
            cfg.siamese.negatives_per_positive,
            None,
            derive_seed(cfg.seed, "siamese.pairs"),
        )?;
        let siamese_log = train_potential(
            &siamese,
            &mut siamese_store,
            ds,
            norm,
            &samples,
            &cfg.siamese,
            derive_seed(cfg.seed, "siamese.train"),
        )?;
        Ok((
            Potentials {
                mrf,
                mrf_store,
                siamese,
                siamese_store,
            },
            [mrf_log, siamese_log],
        ))
    }

    /// One store holding both networks, for checkpointing.
    pub fn combined_store(&self) -> Result<ParamStore> {
        let mut store = self.mrf_store.extract(&format!("{MRF_PREFIX}."));
        store.merge(self.siamese_store.extract(&format!("{SIAMESE_PREFIX}.")))?;
        Ok(store)
    }

    pub fn from_combined(store: &ParamStore) -> Result<Self> {
        let mrf_store = store.extract(&format!("{MRF_PREFIX}."));
        let siamese_store = store.extract(&format!("{SIAMESE_PREFIX}."));
        Ok(Potentials {
            mrf: PotentialNet::bind(&mrf_store, MRF_PREFIX)?,
            siamese: PotentialNet::bind(&siamese_store, SIAMESE_PREFIX)?,
            mrf_store,
            siamese_store,
        })
    }

    pub fn frozen_mrf<'a>(&self, ds: &'a Dataset, norm: &Normalizer) -> Result<FrozenPotential<'a>> {
        FrozenPotential::new(self.mrf.clone(), self.mrf_store.clone(), ds, *norm)
    }

    pub fn frozen_siamese<'a>(&self, ds: &'a Dataset, norm: &Normalizer) -> Result<FrozenPotential<'a>> {
        FrozenPotential::new(self.siamese.clone(), self.siamese_store.clone(), ds, *norm)
    }
}

/// Labelled training pairs from any two cameras with their frozen MRF
/// proposals over the training split.
pub fn lstm_training_data<P: PairPotential>(
    cfg: &RunConfig,
    ds: &Dataset,
    catalog: &PathCatalog,
    mrf: &P,
) -> Result<Vec<LabeledProposal>> {
    let samples = sample_any_camera_pairs(
        ds,
        Split::Train,
        cfg.lstm.negatives_per_positive,
        cfg.lstm.max_positives,
        derive_seed(cfg.seed, "lstm.pairs"),
    )?;
    label_proposals(ds, Split::Train, catalog, mrf, &samples, cfg.threads)
}

/// Adam pretraining of a fresh Path-LSTM.
pub fn pretrain_lstm(
    cfg: &RunConfig,
    ds: &Dataset,
    norm: &Normalizer,
    data: &[LabeledProposal],
) -> Result<(PathLstm, ParamStore, TrainLog)> {
    let mut store = ParamStore::new();
    let lstm = PathLstm::init(&mut store, ds.feature_dim(), &mut seeded_rng(derive_seed(cfg.seed, "lstm.init")))?;
    let log = train_path_lstm(&lstm, &mut store, ds, norm, data, &cfg.lstm, derive_seed(cfg.seed, "lstm.train"))?;
    Ok((lstm, store, log))
}

/// Joint SGD of the pretrained Siamese network and Path-LSTM. Returns one
/// store with `siamese.*` and `lstm.*`.
pub fn finetune(
    cfg: &RunConfig,
    ds: &Dataset,
    norm: &Normalizer,
    potentials: &Potentials,
    lstm_store: &ParamStore,
    data: &[LabeledProposal],
) -> Result<(ParamStore, TrainLog)> {
    let mut store = potentials.siamese_store.extract(&format!("{SIAMESE_PREFIX}."));
    store.merge(lstm_store.extract("lstm."))?;
    let siamese = PotentialNet::bind(&store, SIAMESE_PREFIX)?;
    let lstm = PathLstm::bind(&store)?;
    let log = finetune_joint(
        &siamese,
        &lstm,
        &mut store,
        ds,
        norm,
        data,
        &cfg.finetune,
        derive_seed(cfg.seed, "finetune"),
    )?;
    Ok((store, log))
}

/// Whatever trained models are available to the evaluator.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub potentials: Option<Potentials>,
    /// Pretrained Path-LSTM (`lstm.*`).
    pub lstm: Option<ParamStore>,
    /// Finetuned Siamese network and Path-LSTM.
    pub joint: Option<ParamStore>,
}

impl Models {
    fn potentials(&self, scorer: ScorerKind) -> Result<&Potentials> {
        self.potentials
            .as_ref()
            .ok_or_else(|| Error::Config(format!("scorer {} needs trained potentials", scorer.name())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AjsSummary {
    pub ajs: f64,
    /// Positive (query, gallery) pairs evaluated.
    pub pairs: usize,
    pub infeasible: usize,
    /// Pairs whose proposal equals the ground-truth path.
    pub exact: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub scorers: BTreeMap<String, Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ajs: Option<AjsSummary>,
}

/// Time-ordered (query, gallery) pairs of every query, without duplicates.
pub fn query_pairs(ds: &Dataset) -> Vec<(StateIx, StateIx)> {
    let mut set = BTreeSet::new();
    for q in ds.split_indices(Split::Query) {
        for g in gallery_of(ds, q) {
            set.insert(time_order(ds, q, g));
        }
    }
    set.into_iter().collect()
}

type ProposalMap = HashMap<(StateIx, StateIx), Option<PathProposal>>;

fn path_scores(ds: &Dataset, norm: &Normalizer, store: &ParamStore, proposals: &ProposalMap) -> Result<HashMap<(StateIx, StateIx), f64>> {
    let lstm = PathLstm::bind(store)?;
    let mut out = HashMap::with_capacity(proposals.len());
    for (&pair, prop) in proposals {
        if let Some(p) = prop {
            out.insert(pair, path_score(&lstm, store, ds, norm, p)?);
        }
    }
    Ok(out)
}

/// Ranks the test queries with every configured scorer.
pub fn evaluate(cfg: &RunConfig, ds: &Dataset, catalog: &PathCatalog, norm: &Normalizer, models: &Models) -> Result<Evaluation> {
    let scorers: BTreeSet<ScorerKind> = cfg.eval.scorers.iter().copied().collect();
    let path_scorers = scorers.iter().any(|s| s.uses_proposals());
    let need_proposals = path_scorers || (cfg.eval.ajs && models.potentials.is_some());
    if cfg.eval.ajs && !need_proposals {
        tracing::warn!("no trained potentials and no path-based scorer; AJS skipped");
    }

    let mut proposals: ProposalMap = HashMap::new();
    let mut ajs = None;
    if need_proposals {
        let needing = scorers.iter().copied().find(|s| s.uses_proposals()).unwrap_or(ScorerKind::MrfAverage);
        let pots = models.potentials(needing)?;
        let mrf = pots.frozen_mrf(ds, norm)?;
        let engine = ProposalEngine::new(PsiMatrixCache::new(&mrf, ds, Split::Test), catalog);
        let pairs = query_pairs(ds);
        let found = engine.batch_propose(&pairs, cfg.threads)?;
        proposals = pairs.into_iter().zip(found).collect();
        if cfg.eval.ajs {
            ajs = Some(ajs_summary(ds, &proposals)?);
        }
    }

    let mut out = BTreeMap::new();
    for &kind in &scorers {
        let metrics = match kind {
            ScorerKind::Oracle => {
                let f = |q: StateIx, g: StateIx| {
                    let (a, b) = (ds.state(q).vehicle, ds.state(g).vehicle);
                    Ok(if a.is_some() && a == b { 1.0 } else { 0.0 })
                };
                Metrics::from_ranking(&rank_queries(ds, &f, cfg.threads)?)?
            }
            ScorerKind::Constant => {
                let f = |_: StateIx, _: StateIx| Ok(0.5);
                Metrics::from_ranking(&rank_queries(ds, &f, cfg.threads)?)?
            }
            ScorerKind::Str => {
                let test = ds.split_indices(Split::Test);
                let (lo, hi) = test.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let t = ds.state(i).timestamp;
                    (lo.min(t), hi.max(t))
                });
                let t_max = if hi > lo { hi - lo } else { 1.0 };
                let d_max = ds.max_camera_distance();
                let f = |q: StateIx, g: StateIx| {
                    let (a, b) = (ds.state(q), ds.state(g));
                    let s = str_baseline(
                        a.timestamp,
                        b.timestamp,
                        ds.camera(a.camera)?.location,
                        ds.camera(b.camera)?.location,
                        t_max,
                        d_max,
                    )?;
                    Ok(1.0 - s)
                };
                Metrics::from_ranking(&rank_queries(ds, &f, cfg.threads)?)?
            }
            ScorerKind::Visual => {
                let siamese = models.potentials(kind)?.frozen_siamese(ds, norm)?;
                let f = |q: StateIx, g: StateIx| Ok(siamese.visual(q, g));
                Metrics::from_ranking(&rank_queries(ds, &f, cfg.threads)?)?
            }
            ScorerKind::Siamese => {
                let siamese = models.potentials(kind)?.frozen_siamese(ds, norm)?;
                let f = |q: StateIx, g: StateIx| {
                    let (a, b) = time_order(ds, q, g);
                    Ok(siamese.psi(a, b))
                };
                Metrics::from_ranking(&rank_queries(ds, &f, cfg.threads)?)?
            }
            ScorerKind::MrfAverage => {
                let f = |q: StateIx, g: StateIx| {
                    let pair = time_order(ds, q, g);
                    Ok(proposals[&pair].as_ref().map_or(0.0, |p| p.score))
                };
                let mut m = Metrics::from_ranking(&rank_queries(ds, &f, cfg.threads)?)?;
                m.ajs = ajs.as_ref().map(|a| a.ajs);
                m
            }
            ScorerKind::Final | ScorerKind::FinalPretrained => {
                let (siamese_store, lstm_store) = if kind == ScorerKind::Final {
                    let joint = models
                        .joint
                        .as_ref()
                        .ok_or_else(|| Error::Config("scorer final needs a finetuned checkpoint".into()))?;
                    (joint.extract(&format!("{SIAMESE_PREFIX}.")), joint.clone())
                } else {
                    let lstm = models
                        .lstm
                        .as_ref()
                        .ok_or_else(|| Error::Config("scorer final_pretrained needs a Path-LSTM checkpoint".into()))?;
                    (models.potentials(kind)?.siamese_store.clone(), lstm.clone())
                };
                let net = PotentialNet::bind(&siamese_store, SIAMESE_PREFIX)?;
                let siamese = FrozenPotential::new(net, siamese_store, ds, *norm)?;
                let scores = path_scores(ds, norm, &lstm_store, &proposals)?;
                let f = |q: StateIx, g: StateIx| {
                    let pair = time_order(ds, q, g);
                    Ok(siamese.psi(pair.0, pair.1) + scores.get(&pair).copied().unwrap_or(0.0))
                };
                let mut m = Metrics::from_ranking(&rank_queries(ds, &f, cfg.threads)?)?;
                m.ajs = ajs.as_ref().map(|a| a.ajs);
                m
            }
        };
        out.insert(kind.name().to_owned(), metrics);
    }
    Ok(Evaluation { scorers: out, ajs })
}

fn ajs_summary(ds: &Dataset, proposals: &ProposalMap) -> Result<AjsSummary> {
    let mut values = Vec::new();
    let mut infeasible = 0;
    let mut exact = 0;
    for q in ds.split_indices(Split::Query) {
        let v = ds.state(q).vehicle;
        for g in gallery_of(ds, q) {
            if v.is_none() || ds.state(g).vehicle != v {
                continue;
            }
            let (a, b) = time_order(ds, q, g);
            let prop = proposals[&(a, b)].as_ref();
            let j = path_jaccard(ds, a, b, prop)?;
            infeasible += usize::from(prop.is_none());
            exact += usize::from(j == 1.0);
            values.push(j);
        }
    }
    Ok(AjsSummary {
        ajs: crate::eval::ajs(&values)?,
        pairs: values.len(),
        infeasible,
        exact,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub cameras: usize,
    pub states: usize,
    pub train_states: usize,
    pub test_states: usize,
    pub queries: usize,
    pub catalog_paths: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl DatasetSummary {
    pub fn new(ds: &Dataset, catalog: &PathCatalog) -> Self {
        DatasetSummary {
            cameras: ds.cameras().len(),
            states: ds.states().len(),
            train_states: ds.split_indices(Split::Train).len(),
            test_states: ds.split_indices(Split::Test).len(),
            queries: ds.split_indices(Split::Query).len(),
            catalog_paths: catalog.num_paths(),
            provenance: ds.meta().provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub potential: TrainLog,
    pub siamese: TrainLog,
    pub lstm: TrainLog,
    pub lstm_samples: usize,
    pub lstm_feasible: usize,
    pub finetune: TrainLog,
}

/// `report.json`. Everything except `timing` is a pure function of the
/// config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub config_hash: String,
    pub rng: String,
    pub dataset: DatasetSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
    pub metrics: Evaluation,
    /// Wall-clock seconds per stage.
    pub timing: BTreeMap<String, f64>,
}

impl Report {
    pub fn new(cfg: &RunConfig, ds: &Dataset, catalog: &PathCatalog, metrics: Evaluation) -> Result<Self> {
        Ok(Report {
            seed: cfg.seed,
            config_hash: cfg.hash()?,
            rng: RNG_ALGORITHM.to_owned(),
            dataset: DatasetSummary::new(ds, catalog),
            training: None,
            metrics,
            timing: BTreeMap::new(),
        })
    }

    /// Canonical bytes of the metrics block.
    pub fn metrics_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.metrics)?)
    }
}

/// Everything one end-to-end run produced.
pub struct PipelineRun {
    pub dataset: Dataset,
    pub catalog: PathCatalog,
    pub normalizer: Normalizer,
    pub potentials: Potentials,
    pub lstm: PathLstm,
    pub lstm_store: ParamStore,
    pub joint_store: ParamStore,
    pub report: Report,
}

/// Synth (or load), train every network, evaluate.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let mut timing = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timing: &mut BTreeMap<String, f64>| {
        timing.insert(name.to_owned(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let ds = prepare_dataset(cfg)?;
    let catalog = PathCatalog::build(&ds)?;
    let norm = Normalizer::from_dataset(&ds);
    lap("dataset", &mut timing);

    let (potentials, [potential_log, siamese_log]) = Potentials::train(cfg, &ds, &catalog, &norm)?;
    lap("train_potential", &mut timing);

    let data = {
        let mrf = potentials.frozen_mrf(&ds, &norm)?;
        lstm_training_data(cfg, &ds, &catalog, &mrf)?
    };
    let (lstm, lstm_store, lstm_log) = pretrain_lstm(cfg, &ds, &norm, &data)?;
    lap("train_lstm", &mut timing);

    let (joint_store, finetune_log) = finetune(cfg, &ds, &norm, &potentials, &lstm_store, &data)?;
    lap("finetune", &mut timing);

    let models = Models {
        potentials: Some(potentials.clone()),
        lstm: Some(lstm_store.clone()),
        joint: Some(joint_store.clone()),
    };
    let metrics = evaluate(cfg, &ds, &catalog, &norm, &models)?;
    lap("eval", &mut timing);

    let mut report = Report::new(cfg, &ds, &catalog, metrics)?;
    report.training = Some(TrainingSummary {
        potential: potential_log,
        siamese: siamese_log,
        lstm: lstm_log,
        lstm_samples: data.len(),
        lstm_feasible: data.iter().filter(|d| d.proposal.is_some()).count(),
        finetune: finetune_log,
    });
    report.timing = timing;
    Ok(PipelineRun {
        dataset: ds,
        catalog,
        normalizer: norm,
        potentials,
        lstm,
        lstm_store,
        joint_store,
        report,
    })
}
