//! Finite-difference checks of every trainable objective on a fresh random
//! initialization.

use serde::Serialize;

use super::config::RunConfig;
use super::pipeline::SIAMESE_PREFIX;
use crate::error::{Error, Result};
use crate::lstm::{joint_loss, path_loss, path_sequence, LabeledProposal, PathLstm};
use crate::mrf::PathProposal;
use crate::network::{Dataset, SpatialPath, Split, StateIx};
use crate::numeric::{derive_seed, grad_check, seeded_rng, GradCheckReport, ParamStore, DEFAULT_GRAD_CHECK_EPS};
use crate::potential::{potential_loss, Normalizer, PairSample, PotentialNet};
use crate::synth::{generate, SynthConfig};

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Sightings per checked path, i.e. five LSTM steps.
pub const CHECKED_PATH_LEN: usize = 6;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSuiteReport {
    pub eps: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

impl GradSuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.suites.iter().map(|s| s.report.max_rel_error).fold(0.0, f64::max)
    }
}

/// A small dataset whose vehicles each have exactly [`CHECKED_PATH_LEN`]
/// sightings.
fn fixture(cfg: &RunConfig) -> Result<Dataset> {
    generate(&SynthConfig {
        seed: derive_seed(cfg.seed, "grad.data"),
        n_cameras: 4,
        n_vehicles: 4,
        feature_dim: cfg.synth.feature_dim,
        sightings_min: CHECKED_PATH_LEN,
        sightings_max: CHECKED_PATH_LEN,
        confuser_fraction: 0.0,
        ..SynthConfig::default()
    })
}

fn paths(ds: &Dataset) -> Vec<Vec<StateIx>> {
    let mut out: Vec<Vec<StateIx>> = ds.trajectories(Split::Train).into_values().collect();
    out.extend(ds.trajectories(Split::Test).into_values());
    out
}

fn proposal(ds: &Dataset, states: Vec<StateIx>) -> Result<PathProposal> {
    let path = SpatialPath::new(states.iter().map(|&s| ds.state(s).camera).collect())?;
    Ok(PathProposal {
        path,
        edge_psi: vec![0.5; states.len() - 1],
        log_value: 0.0,
        score: 0.5,
        states,
    })
}

/// The head of `a` followed by the tail of `b`, cut where the two cameras
/// differ so the result is still a valid camera sequence.
fn splice(ds: &Dataset, a: &[StateIx], b: &[StateIx]) -> Result<Vec<StateIx>> {
    [3, 2, 4, 1, 5]
        .into_iter()
        .find(|&k| ds.state(a[k - 1]).camera != ds.state(b[k]).camera)
        .map(|k| a[..k].iter().chain(&b[k..]).copied().collect())
        .ok_or_else(|| Error::Dataset("gradient fixture trajectories cannot be spliced".into()))
}

fn suite(name: &str, report: GradCheckReport) -> SuiteResult {
    SuiteResult {
        name: name.to_owned(),
        passed: report.max_rel_error < GRAD_TOLERANCE,
        report,
    }
}

/// Runs the pairwise-potential, Path-LSTM and joint suites.
pub fn grad_suite(cfg: &RunConfig) -> Result<GradSuiteReport> {
    let ds = fixture(cfg)?;
    let norm = Normalizer::from_dataset(&ds);
    let d = ds.feature_dim();
    let trajectories = paths(&ds);
    if trajectories.len() < 2 {
        return Err(Error::Dataset("gradient fixture needs two trajectories".into()));
    }
    let (t0, t1) = (&trajectories[0], &trajectories[1]);
    let mut suites = Vec::new();

    let mut store = ParamStore::new();
    let mut rng = seeded_rng(derive_seed(cfg.seed, "grad.potential"));
    let net = PotentialNet::init(&mut store, SIAMESE_PREFIX, d, &cfg.potential, &mut rng)?;
    let samples = [
        PairSample { a: t0[0], b: t0[1], label: true },
        PairSample { a: t0[2], b: t1[3], label: false },
        PairSample { a: t1[1], b: t1[4], label: true },
        PairSample { a: t1[0], b: t0[5], label: false },
    ];
    let report = grad_check(&mut store, DEFAULT_GRAD_CHECK_EPS, |s| {
        potential_loss(&net, s, &ds, &norm, &samples, true)
    })?;
    suites.push(suite("potential", report));

    let mut store = ParamStore::new();
    let mut rng = seeded_rng(derive_seed(cfg.seed, "grad.lstm"));
    let lstm = PathLstm::init(&mut store, d, &mut rng)?;
    let mixed = splice(&ds, t0, t1)?;
    let data = vec![
        (path_sequence(&ds, &norm, t0)?, true),
        (path_sequence(&ds, &norm, &mixed)?, false),
    ];
    let report = grad_check(&mut store, DEFAULT_GRAD_CHECK_EPS, |s| path_loss(&lstm, s, &data, true))?;
    suites.push(suite("path_lstm", report));

    let mut store = ParamStore::new();
    let mut rng = seeded_rng(derive_seed(cfg.seed, "grad.joint"));
    let siamese = PotentialNet::init(&mut store, SIAMESE_PREFIX, d, &cfg.siamese, &mut rng)?;
    let lstm = PathLstm::init(&mut store, d, &mut rng)?;
    let data = vec![
        LabeledProposal {
            a: t0[0],
            b: t0[CHECKED_PATH_LEN - 1],
            label: true,
            proposal: Some(proposal(&ds, t0.clone())?),
        },
        LabeledProposal {
            a: mixed[0],
            b: mixed[CHECKED_PATH_LEN - 1],
            label: false,
            proposal: Some(proposal(&ds, mixed.clone())?),
        },
        LabeledProposal {
            a: t1[0],
            b: t0[1],
            label: false,
            proposal: None,
        },
    ];
    let report = grad_check(&mut store, DEFAULT_GRAD_CHECK_EPS, |s| {
        joint_loss(&siamese, &lstm, s, &ds, &norm, &data, true)
    })?;
    suites.push(suite("joint", report));

    Ok(GradSuiteReport {
        eps: DEFAULT_GRAD_CHECK_EPS,
        tolerance: GRAD_TOLERANCE,
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_has_five_step_paths() {
        let ds = fixture(&RunConfig::default()).unwrap();
        let p = paths(&ds);
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|t| t.len() == CHECKED_PATH_LEN));
    }
}
