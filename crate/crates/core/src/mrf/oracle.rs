//! Exhaustive reference solver for chain instances, used to cross-check the
//! dynamic program.

use super::chain::{log_potential, Chain, ChainSolution};
use crate::error::{Error, Result};

pub const DEFAULT_ORACLE_CAP: u128 = 1_000_000;

/// Enumerates every joint assignment. Same feasibility rule (non-decreasing
/// timestamps) and tie rule (lexicographically smallest state ids, earliest
/// layer first) as [`super::max_sum`]. Fails if the number of assignments
/// exceeds `cap`.
pub fn brute_force_oracle<F>(chain: &Chain, cap: u128, mut psi: F) -> Result<Option<ChainSolution>>
where
    F: FnMut(usize, usize, usize) -> f64,
{
    let total = chain.assignment_count();
    if total > cap {
        return Err(Error::InvalidArgument(format!(
            "{total} assignments exceed the oracle cap of {cap}"
        )));
    }
    let n = chain.len();
    // visit each layer's nodes in ascending id order so that the first optimum
    // found is the lexicographically smallest one
    let orders: Vec<Vec<usize>> = chain
        .layers()
        .iter()
        .map(|layer| {
            let mut idx: Vec<usize> = (0..layer.len()).collect();
            idx.sort_by_key(|&i| layer[i].id);
            idx
        })
        .collect();
    if orders.iter().any(Vec::is_empty) {
        return Ok(None);
    }

    let mut digits = vec![0usize; n];
    let mut best: Option<ChainSolution> = None;
    loop {
        let choice: Vec<usize> = (0..n).map(|k| orders[k][digits[k]]).collect();
        let feasible = (0..n - 1).all(|k| {
            chain.layer(k)[choice[k]].timestamp <= chain.layer(k + 1)[choice[k + 1]].timestamp
        });
        if feasible {
            let edge_psi: Vec<f64> = (0..n - 1).map(|k| psi(k, choice[k], choice[k + 1])).collect();
            let mut log_value = 0.0;
            for &p in &edge_psi {
                log_value += log_potential(p);
            }
            if best.as_ref().is_none_or(|b| log_value > b.log_value) {
                best = Some(ChainSolution {
                    choice,
                    log_value,
                    edge_psi,
                });
            }
        }
        // odometer, last layer fastest
        let mut k = n;
        loop {
            if k == 0 {
                return Ok(best);
            }
            k -= 1;
            digits[k] += 1;
            if digits[k] < orders[k].len() {
                break;
            }
            digits[k] = 0;
        }
    }
}
