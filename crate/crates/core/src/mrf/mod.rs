//! Chain MRF inference along spatial paths and proposal selection.

mod chain;
mod engine;
mod oracle;

pub use chain::{log_potential, max_sum, Chain, ChainNode, ChainSolution, PSI_FLOOR};
pub use engine::ProposalEngine;
pub use oracle::{brute_force_oracle, DEFAULT_ORACLE_CAP};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{Dataset, PathCatalog, SpatialPath, Split, StateId, StateIx};
use crate::potential::PairPotential;

/// MAP assignment along one spatial path between two query states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathProposal {
    pub path: SpatialPath,
    /// One state per camera of `path`, endpoints included.
    pub states: Vec<StateIx>,
    /// ψ on each of the `N − 1` edges of the assignment.
    pub edge_psi: Vec<f64>,
    /// `Σ log ψ` with clamped potentials.
    pub log_value: f64,
    /// Mean of `edge_psi`.
    pub score: f64,
}

impl PathProposal {
    fn from_solution(path: &SpatialPath, domains: &[Vec<StateIx>], sol: ChainSolution) -> Result<Self> {
        let states = sol.choice.iter().enumerate().map(|(k, &c)| domains[k][c]).collect();
        let score = empirical_average(&sol.edge_psi)?;
        Ok(PathProposal {
            path: path.clone(),
            states,
            edge_psi: sol.edge_psi,
            log_value: sol.log_value,
            score,
        })
    }

    /// The free variables: states chosen at the intermediate cameras.
    pub fn intermediate(&self) -> &[StateIx] {
        &self.states[1..self.states.len() - 1]
    }

    pub fn state_ids(&self, ds: &Dataset) -> Vec<StateId> {
        self.states.iter().map(|&ix| ds.state(ix).id).collect()
    }

    /// True when timestamps never decrease along the chosen states.
    pub fn is_time_consistent(&self, ds: &Dataset) -> bool {
        self.states
            .windows(2)
            .all(|w| ds.state(w[0]).timestamp <= ds.state(w[1]).timestamp)
    }
}

/// Arithmetic mean of the edge potentials of a feasible assignment.
pub fn empirical_average(edge_psi: &[f64]) -> Result<f64> {
    if edge_psi.is_empty() {
        return Err(Error::InvalidArgument(
            "empirical average of an infeasible assignment".into(),
        ));
    }
    Ok(edge_psi.iter().sum::<f64>() / edge_psi.len() as f64)
}

/// Chain over `path` with `p` and `q` fixed at its ends and the states of
/// `split` at every intermediate camera. Also returns the state index behind
/// each chain node.
pub fn path_chain(
    ds: &Dataset,
    split: Split,
    path: &SpatialPath,
    p: StateIx,
    q: StateIx,
) -> Result<(Chain, Vec<Vec<StateIx>>)> {
    let (sp, sq) = (ds.state(p), ds.state(q));
    if sp.camera != path.first() || sq.camera != path.last() {
        return Err(Error::InvalidArgument(format!(
            "states {} and {} are not at the ends of path {path}",
            sp.id, sq.id
        )));
    }
    let cams = path.cameras();
    let mut domains = Vec::with_capacity(cams.len());
    domains.push(vec![p]);
    for &c in &cams[1..cams.len() - 1] {
        domains.push(ds.states_at(c, split)?.to_vec());
    }
    domains.push(vec![q]);
    let layers = domains
        .iter()
        .map(|d| {
            d.iter()
                .map(|&ix| ChainNode {
                    id: ds.state(ix).id,
                    timestamp: ds.state(ix).timestamp,
                })
                .collect()
        })
        .collect();
    Ok((Chain::new(layers)?, domains))
}

/// Exact MAP assignment along one path; `None` if no time-feasible
/// assignment exists.
pub fn max_sum_on_path<P: PairPotential + ?Sized>(
    ds: &Dataset,
    split: Split,
    path: &SpatialPath,
    p: StateIx,
    q: StateIx,
    potential: &P,
) -> Result<Option<PathProposal>> {
    let (chain, domains) = path_chain(ds, split, path, p, q)?;
    max_sum(&chain, |k, a, b| potential.psi(domains[k][a], domains[k + 1][b]))
        .map(|sol| PathProposal::from_solution(path, &domains, sol))
        .transpose()
}

/// Exhaustive counterpart of [`max_sum_on_path`].
pub fn oracle_on_path<P: PairPotential + ?Sized>(
    ds: &Dataset,
    split: Split,
    path: &SpatialPath,
    p: StateIx,
    q: StateIx,
    potential: &P,
    cap: u128,
) -> Result<Option<PathProposal>> {
    let (chain, domains) = path_chain(ds, split, path, p, q)?;
    brute_force_oracle(&chain, cap, |k, a, b| potential.psi(domains[k][a], domains[k + 1][b]))?
        .map(|sol| PathProposal::from_solution(path, &domains, sol))
        .transpose()
}

/// Best proposal over the catalog candidates for `(camera(p), camera(q))`,
/// ranked by empirical average. Ties keep the earlier candidate, i.e. the
/// shorter path, then the smaller camera sequence. `None` when no candidate
/// is feasible or the pair is not in the catalog.
pub fn propose<P: PairPotential + ?Sized>(
    ds: &Dataset,
    split: Split,
    catalog: &PathCatalog,
    p: StateIx,
    q: StateIx,
    potential: &P,
) -> Result<Option<PathProposal>> {
    let mut best: Option<PathProposal> = None;
    for path in catalog.candidates(ds.state(p).camera, ds.state(q).camera) {
        if let Some(prop) = max_sum_on_path(ds, split, path, p, q, potential)? {
            if best.as_ref().is_none_or(|b| prop.score > b.score) {
                best = Some(prop);
            }
        }
    }
    Ok(best)
}
