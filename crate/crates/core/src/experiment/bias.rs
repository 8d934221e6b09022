//! Longer-path bias of the empirical average, and whether the Path-LSTM
//! undoes it.
//!
//! Each construction takes a stretch of one test trajectory with at least
//! three sightings and swaps its last sighting for the best-matching state
//! of another vehicle at the same camera. That gives an identity-inconsistent
//! path with a high average ψ. The consistent path is a single hop between
//! consecutive sightings of one vehicle whose ψ is below that average.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lstm::{path_sequence, PathLstm};
use crate::network::{Dataset, Split, StateId, StateIx};
use crate::numeric::{derive_seed, seeded_rng, ParamStore};
use crate::potential::{Normalizer, PairPotential};

/// Attempts per construction before giving up.
const MAX_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasCase {
    pub seed: u64,
    pub inconsistent: Vec<StateId>,
    pub consistent: Vec<StateId>,
    /// Empirical average ψ of each path.
    pub inconsistent_average: f64,
    pub consistent_average: f64,
    pub inconsistent_score: f64,
    pub consistent_score: f64,
}

impl BiasCase {
    pub fn lstm_prefers_consistent(&self) -> bool {
        self.consistent_score > self.inconsistent_score
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasStudy {
    pub cases: Vec<BiasCase>,
    pub preferred_consistent: usize,
    pub rate: f64,
}

fn average<P: PairPotential + ?Sized>(psi: &P, states: &[StateIx]) -> f64 {
    states.windows(2).map(|w| psi.psi(w[0], w[1])).sum::<f64>() / (states.len() - 1) as f64
}

/// One construction whose inconsistent path out-scores the consistent one
/// on average ψ, or `None` when the dataset offers none.
pub fn construct_case<P: PairPotential + ?Sized, R: Rng + ?Sized>(
    ds: &Dataset,
    psi: &P,
    rng: &mut R,
) -> Option<(Vec<StateIx>, Vec<StateIx>)> {
    let trajectories: Vec<Vec<StateIx>> = ds.trajectories(Split::Test).into_values().collect();
    let long: Vec<&Vec<StateIx>> = trajectories.iter().filter(|t| t.len() >= 3).collect();
    let hops: Vec<[StateIx; 2]> = trajectories
        .iter()
        .flat_map(|t| t.windows(2).map(|w| [w[0], w[1]]))
        .collect();
    if long.is_empty() || hops.is_empty() {
        return None;
    }
    for _ in 0..MAX_ATTEMPTS {
        let traj = long.choose(rng)?;
        let len = rng.random_range(3..=traj.len());
        let start = rng.random_range(0..=traj.len() - len);
        let mut path = traj[start..start + len].to_vec();
        let prev = path[len - 2];
        let last = ds.state(path[len - 1]);
        let t_prev = ds.state(prev).timestamp;
        let Ok(at_camera) = ds.states_at(last.camera, Split::Test) else {
            continue;
        };
        let impostor = at_camera
            .iter()
            .copied()
            .filter(|&z| ds.state(z).vehicle != last.vehicle && ds.state(z).timestamp >= t_prev)
            .map(|z| (psi.psi(prev, z), z))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        let Some((_, z)) = impostor else {
            continue;
        };
        path[len - 1] = z;
        let s_inconsistent = average(psi, &path);
        let lower: Vec<&[StateIx; 2]> = hops.iter().filter(|h| psi.psi(h[0], h[1]) < s_inconsistent).collect();
        if let Some(hop) = lower.choose(rng) {
            return Some((path, hop.to_vec()));
        }
    }
    None
}

/// `n` seeded constructions scored by a trained Path-LSTM.
pub fn bias_study<P: PairPotential + ?Sized>(
    ds: &Dataset,
    norm: &Normalizer,
    psi: &P,
    lstm: &PathLstm,
    store: &ParamStore,
    n: usize,
    seed: u64,
) -> Result<BiasStudy> {
    let mut cases = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let case_seed = derive_seed(seed, &format!("bias.{i}"));
        let mut rng = seeded_rng(case_seed);
        let (bad, good) = construct_case(ds, psi, &mut rng)
            .ok_or_else(|| Error::Dataset("no inconsistent path out-scores a consistent hop on this dataset".into()))?;
        let score = |states: &[StateIx]| lstm.score(store, &path_sequence(ds, norm, states)?);
        let ids = |states: &[StateIx]| states.iter().map(|&ix| ds.state(ix).id).collect();
        cases.push(BiasCase {
            seed: case_seed,
            inconsistent: ids(&bad),
            consistent: ids(&good),
            inconsistent_average: average(psi, &bad),
            consistent_average: average(psi, &good),
            inconsistent_score: score(&bad)?,
            consistent_score: score(&good)?,
        });
    }
    let preferred_consistent = cases.iter().filter(|c| c.lstm_prefers_consistent()).count();
    let rate = if cases.is_empty() { 0.0 } else { preferred_consistent as f64 / cases.len() as f64 };
    Ok(BiasStudy {
        cases,
        preferred_consistent,
        rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn dataset() -> Dataset {
        generate(&SynthConfig {
            n_cameras: 6,
            n_vehicles: 24,
            sightings_min: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn construction_shows_the_bias() {
        let ds = dataset();
        let psi = |a: StateIx, b: StateIx| {
            let (x, y) = (ds.state(a), ds.state(b));
            let d: f64 = x.appearance.iter().zip(&y.appearance).map(|(p, q)| (p - q).powi(2)).sum();
            (-d).exp().clamp(1e-6, 1.0 - 1e-6)
        };
        for seed in 0..10 {
            let (bad, good) = construct_case(&ds, &psi, &mut seeded_rng(seed)).unwrap();
            assert!(bad.len() > good.len());
            assert_eq!(good.len(), 2);
            assert!(average(&psi, &bad) > average(&psi, &good));
            let v = |ix: StateIx| ds.state(ix).vehicle;
            assert_ne!(v(bad[bad.len() - 1]), v(bad[0]));
            assert!(bad[..bad.len() - 1].iter().all(|&s| v(s) == v(bad[0])));
            assert_eq!(v(good[0]), v(good[1]));
            assert!(bad.windows(2).all(|w| ds.state(w[0]).timestamp <= ds.state(w[1]).timestamp));
        }
    }

    #[test]
    fn construction_is_seeded() {
        let ds = dataset();
        let psi = |a: StateIx, b: StateIx| 0.2 + 0.6 * (((a * 31 + b * 17) % 101) as f64 / 101.0);
        let a = construct_case(&ds, &psi, &mut seeded_rng(3));
        let b = construct_case(&ds, &psi, &mut seeded_rng(3));
        assert_eq!(a, b);
    }
}
