//! Batch proposal engine. ψ matrices are shared per camera pair, and the
//! backward DP tables of every path suffix ending at a given query state are
//! computed once and reused by all queries whose candidate paths share that
//! suffix.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;

use super::chain::log_potential;
use super::{empirical_average, PathProposal};
use crate::error::{Error, Result};
use crate::network::{CameraId, PathCatalog, SpatialPath, StateIx};
use crate::potential::{PairPotential, PsiMatrix, PsiMatrixCache};

/// Backward DP over `cameras[k..]` ending at a fixed state `q`.
struct SuffixTable {
    /// Best log-value from each state at the suffix's first camera to `q`.
    best: Vec<f64>,
    /// Chosen index into the next camera's domain, with its ψ.
    next: Vec<(usize, f64)>,
    /// Table of `cameras[k+1..]`; `None` when the next camera is `q`'s.
    child: Option<Arc<SuffixTable>>,
}

type SuffixKey = (Vec<CameraId>, StateIx);
type SuffixSlot = Arc<OnceLock<Arc<SuffixTable>>>;

pub struct ProposalEngine<'a, P: PairPotential> {
    cache: PsiMatrixCache<'a, P>,
    catalog: &'a PathCatalog,
    suffixes: Mutex<HashMap<SuffixKey, SuffixSlot>>,
}

impl<'a, P: PairPotential> ProposalEngine<'a, P> {
    pub fn new(cache: PsiMatrixCache<'a, P>, catalog: &'a PathCatalog) -> Self {
        ProposalEngine {
            cache,
            catalog,
            suffixes: Mutex::new(HashMap::new()),
        }
    }

    /// Total ψ evaluations so far.
    pub fn psi_evaluations(&self) -> u64 {
        self.cache.evaluations()
    }

    pub fn suffix_tables(&self) -> usize {
        self.suffixes.lock().expect("suffix cache poisoned").len()
    }

    /// Same result as [`super::propose`] over the engine's split.
    pub fn propose(&self, p: StateIx, q: StateIx) -> Result<Option<PathProposal>> {
        let ds = self.cache.dataset();
        let split = self.cache.split();
        for ix in [p, q] {
            if !ds.in_split(ix, split) {
                return Err(Error::InvalidArgument(format!(
                    "state {} is not in the {split:?} split",
                    ds.state(ix).id
                )));
            }
        }
        let mut best: Option<PathProposal> = None;
        for path in self.catalog.candidates(ds.state(p).camera, ds.state(q).camera) {
            if let Some(prop) = self.solve(path, p, q)? {
                if best.as_ref().is_none_or(|b| prop.score > b.score) {
                    best = Some(prop);
                }
            }
        }
        Ok(best)
    }

    /// One proposal per pair, in input order. `threads > 1` resolves pairs
    /// concurrently; results do not depend on the thread count.
    pub fn batch_propose(&self, pairs: &[(StateIx, StateIx)], threads: usize) -> Result<Vec<Option<PathProposal>>> {
        if threads <= 1 {
            return pairs.iter().map(|&(p, q)| self.propose(p, q)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| pairs.par_iter().map(|&(p, q)| self.propose(p, q)).collect())
    }

    fn solve(&self, path: &SpatialPath, p: StateIx, q: StateIx) -> Result<Option<PathProposal>> {
        let ds = self.cache.dataset();
        let split = self.cache.split();
        let cams = path.cameras();
        let (tp, tq) = (ds.state(p).timestamp, ds.state(q).timestamp);
        let first = self.cache.psi_matrix(cams[0], cams[1])?;
        let row = ds.rank_at_camera(p, split).expect("membership checked");

        if cams.len() == 2 {
            if tp > tq {
                return Ok(None);
            }
            let col = ds.rank_at_camera(q, split).expect("membership checked");
            let psi = first.get(row, col);
            return Ok(Some(PathProposal {
                path: path.clone(),
                states: vec![p, q],
                edge_psi: vec![psi],
                log_value: log_potential(psi),
                score: psi,
            }));
        }

        let table = self.suffix(&cams[1..], q)?;
        let domain = ds.states_at(cams[1], split)?;
        let mut arg: Option<(usize, f64)> = None;
        let mut value = f64::NEG_INFINITY;
        for (b, &xb) in domain.iter().enumerate() {
            let tail = table.best[b];
            if tp > ds.state(xb).timestamp || tail == f64::NEG_INFINITY {
                continue;
            }
            let psi = first.get(row, b);
            let v = log_potential(psi) + tail;
            if arg.is_none() || v > value || (v == value && ds.state(xb).id < ds.state(domain[arg.unwrap().0]).id) {
                value = v;
                arg = Some((b, psi));
            }
        }
        let Some((mut b, psi0)) = arg else {
            return Ok(None);
        };

        let mut states = Vec::with_capacity(cams.len());
        let mut edge_psi = Vec::with_capacity(cams.len() - 1);
        states.push(p);
        edge_psi.push(psi0);
        let mut node = Some(table);
        let mut k = 1;
        while let Some(t) = node {
            states.push(ds.states_at(cams[k], split)?[b]);
            let (nb, psi) = t.next[b];
            edge_psi.push(psi);
            b = nb;
            node = t.child.clone();
            k += 1;
        }
        states.push(q);
        let score = empirical_average(&edge_psi)?;
        Ok(Some(PathProposal {
            path: path.clone(),
            states,
            edge_psi,
            log_value: value,
            score,
        }))
    }

    /// Table for the suffix `cams` (length ≥ 2) ending at `q`.
    fn suffix(&self, cams: &[CameraId], q: StateIx) -> Result<Arc<SuffixTable>> {
        let ds = self.cache.dataset();
        let split = self.cache.split();
        let slot = {
            let mut map = self.suffixes.lock().expect("suffix cache poisoned");
            map.entry((cams.to_vec(), q)).or_default().clone()
        };
        if let Some(t) = slot.get() {
            return Ok(t.clone());
        }
        // everything fallible happens outside the write-once initializer
        let child = if cams.len() > 2 {
            Some(self.suffix(&cams[1..], q)?)
        } else {
            None
        };
        let matrix: Arc<PsiMatrix> = self.cache.psi_matrix(cams[0], cams[1])?;
        let here = ds.states_at(cams[0], split)?;
        let there: Vec<StateIx> = if cams.len() > 2 {
            ds.states_at(cams[1], split)?.to_vec()
        } else {
            vec![q]
        };
        let q_col = ds.rank_at_camera(q, split).expect("membership checked");
        let table = slot.get_or_init(|| {
            let mut best = vec![f64::NEG_INFINITY; here.len()];
            let mut next = vec![(usize::MAX, 0.0); here.len()];
            for (a, &xa) in here.iter().enumerate() {
                let ta = ds.state(xa).timestamp;
                let mut arg: Option<usize> = None;
                for (b, &xb) in there.iter().enumerate() {
                    let tail = child.as_ref().map_or(0.0, |c| c.best[b]);
                    if ta > ds.state(xb).timestamp || tail == f64::NEG_INFINITY {
                        continue;
                    }
                    let psi = if child.is_some() { matrix.get(a, b) } else { matrix.get(a, q_col) };
                    let v = log_potential(psi) + tail;
                    let better = match arg {
                        None => true,
                        Some(cur) => v > best[a] || (v == best[a] && ds.state(xb).id < ds.state(there[cur]).id),
                    };
                    if better {
                        best[a] = v;
                        next[a] = (b, psi);
                        arg = Some(b);
                    }
                }
            }
            Arc::new(SuffixTable { best, next, child })
        });
        Ok(table.clone())
    }
}
