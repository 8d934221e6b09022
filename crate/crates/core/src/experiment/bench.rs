//! Batch versus per-pair proposal cost, counted in ψ evaluations.

use std::cmp::Reverse;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::pipeline::query_pairs;
use crate::error::Result;
use crate::mrf::{propose, ProposalEngine};
use crate::network::{Dataset, PathCatalog, Split, StateIx};
use crate::numeric::{derive_seed, seeded_rng};
use crate::potential::{edge_pair_bound, CountingPotential, PairPotential, PsiMatrixCache};

/// Deterministic part of a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchCounters {
    pub pairs: usize,
    pub batch_evaluations: u64,
    pub naive_evaluations: u64,
    /// Σ over catalog edges of `K_i · K_j` on the test split.
    pub edge_pair_bound: u64,
    /// `naive_evaluations / batch_evaluations`.
    pub ratio: f64,
    pub suffix_tables: usize,
    pub feasible: usize,
    /// Batch and per-pair proposals are identical.
    pub outputs_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchTiming {
    pub batch_seconds: f64,
    pub naive_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRun {
    pub counters: BenchCounters,
    pub timing: BenchTiming,
}

/// `bench.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    /// Pairs grouped by camera pair, so that they share every edge.
    pub shared: BenchRun,
    /// Random query/gallery pairs.
    pub queries: BenchRun,
}

fn routable(ds: &Dataset, catalog: &PathCatalog, (a, b): (StateIx, StateIx)) -> bool {
    !catalog.candidates(ds.state(a).camera, ds.state(b).camera).is_empty()
}

/// Up to `n` time-ordered test pairs drawn camera pair by camera pair,
/// starting with the camera pairs whose candidate paths have the most
/// edges. Within a camera pair the order is seeded.
pub fn shared_edge_pairs(ds: &Dataset, catalog: &PathCatalog, n: usize, seed: u64) -> Result<Vec<(StateIx, StateIx)>> {
    let mut groups = Vec::new();
    for (from, to) in catalog.pairs() {
        let edges: usize = catalog.candidates(from, to).iter().map(|p| p.len() - 1).sum();
        groups.push((Reverse(edges), from, to));
    }
    groups.sort_unstable();
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(n);
    for (_, from, to) in groups {
        if out.len() >= n {
            break;
        }
        let (src, dst) = (ds.states_at(from, Split::Test)?, ds.states_at(to, Split::Test)?);
        let mut group: Vec<_> = src
            .iter()
            .flat_map(|&a| dst.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| ds.state(a).timestamp <= ds.state(b).timestamp)
            .collect();
        group.shuffle(&mut rng);
        out.extend(group.into_iter().take(n - out.len()));
    }
    Ok(out)
}

/// Up to `n` query/gallery pairs with a catalog entry, in seeded order.
pub fn query_bench_pairs(ds: &Dataset, catalog: &PathCatalog, n: usize, seed: u64) -> Vec<(StateIx, StateIx)> {
    let mut pairs: Vec<_> = query_pairs(ds).into_iter().filter(|&p| routable(ds, catalog, p)).collect();
    pairs.shuffle(&mut seeded_rng(seed));
    pairs.truncate(n);
    pairs
}

/// Resolves `pairs` once through the batch engine and once pair by pair with
/// a counting potential.
pub fn run_bench<P: PairPotential>(
    ds: &Dataset,
    catalog: &PathCatalog,
    potential: &P,
    pairs: &[(StateIx, StateIx)],
    threads: usize,
) -> Result<BenchRun> {
    let start = Instant::now();
    let engine = ProposalEngine::new(PsiMatrixCache::new(potential, ds, Split::Test), catalog);
    let batch = engine.batch_propose(pairs, threads)?;
    let batch_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let counting = CountingPotential::new(potential);
    let naive = pairs
        .iter()
        .map(|&(p, q)| propose(ds, Split::Test, catalog, p, q, &counting))
        .collect::<Result<Vec<_>>>()?;
    let naive_seconds = start.elapsed().as_secs_f64();

    let batch_evaluations = engine.psi_evaluations();
    let naive_evaluations = counting.calls();
    Ok(BenchRun {
        counters: BenchCounters {
            pairs: pairs.len(),
            batch_evaluations,
            naive_evaluations,
            edge_pair_bound: edge_pair_bound(ds, catalog, Split::Test)?,
            ratio: naive_evaluations as f64 / batch_evaluations.max(1) as f64,
            suffix_tables: engine.suffix_tables(),
            feasible: batch.iter().filter(|p| p.is_some()).count(),
            outputs_match: batch == naive,
        },
        timing: BenchTiming {
            batch_seconds,
            naive_seconds,
        },
    })
}

/// Both workloads with `n` pairs each.
pub fn bench<P: PairPotential>(
    ds: &Dataset,
    catalog: &PathCatalog,
    potential: &P,
    n: usize,
    seed: u64,
    threads: usize,
) -> Result<BenchReport> {
    let shared = shared_edge_pairs(ds, catalog, n, derive_seed(seed, "bench.shared"))?;
    let queries = query_bench_pairs(ds, catalog, n, derive_seed(seed, "bench.queries"));
    Ok(BenchReport {
        shared: run_bench(ds, catalog, potential, &shared, threads)?,
        queries: run_bench(ds, catalog, potential, &queries, threads)?,
    })
}
