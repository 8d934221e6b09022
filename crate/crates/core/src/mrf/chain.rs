use crate::error::{Error, Result};
use crate::network::StateId;

/// Potentials are clamped into `[PSI_FLOOR, 1 − PSI_FLOOR]` before taking logs.
pub const PSI_FLOOR: f64 = 1e-12;

#[inline]
pub fn log_potential(psi: f64) -> f64 {
    psi.clamp(PSI_FLOOR, 1.0 - PSI_FLOOR).ln()
}

/// One candidate value of a chain variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainNode {
    pub id: StateId,
    pub timestamp: f64,
}

/// Domains of the variables along a chain. The first and last layers hold
/// exactly one node each: the two fixed query states.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    layers: Vec<Vec<ChainNode>>,
}

impl Chain {
    pub fn new(layers: Vec<Vec<ChainNode>>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a chain needs at least two variables, got {}",
                layers.len()
            )));
        }
        if layers[0].len() != 1 || layers[layers.len() - 1].len() != 1 {
            return Err(Error::InvalidArgument(
                "chain endpoints must be single fixed states".into(),
            ));
        }
        Ok(Chain { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn layer(&self, k: usize) -> &[ChainNode] {
        &self.layers[k]
    }

    pub fn layers(&self) -> &[Vec<ChainNode>] {
        &self.layers
    }

    /// Number of joint assignments of the free variables.
    pub fn assignment_count(&self) -> u128 {
        self.layers.iter().map(|l| l.len() as u128).product()
    }
}

/// MAP assignment of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSolution {
    /// Chosen index into each layer; `choice[0] == choice[N-1] == 0`.
    pub choice: Vec<usize>,
    /// `Σ log ψ` over the `N − 1` edges (clamped potentials).
    pub log_value: f64,
    /// Raw ψ on each edge of the chosen assignment.
    pub edge_psi: Vec<f64>,
}

/// Exact max-sum over a chain with non-decreasing timestamps.
///
/// `psi(k, a, b)` is the potential between node `a` of layer `k` and node `b`
/// of layer `k + 1`; it is only called on time-feasible pairs that can still
/// reach the end of the chain. Among optimal assignments the one with the
/// lowest state id at the earliest differing layer is returned. `None` means
/// no time-feasible assignment exists.
pub fn max_sum<F>(chain: &Chain, mut psi: F) -> Option<ChainSolution>
where
    F: FnMut(usize, usize, usize) -> f64,
{
    let n = chain.len();
    // best[k][a]: optimal log-value from node a of layer k to the end
    let mut best: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut next: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    best[n - 1] = vec![0.0];
    for k in (0..n - 1).rev() {
        let here = chain.layer(k);
        let there = chain.layer(k + 1);
        let mut row_best = vec![f64::NEG_INFINITY; here.len()];
        let mut row_next = vec![(usize::MAX, 0.0); here.len()];
        for (a, na) in here.iter().enumerate() {
            let mut arg: Option<(usize, f64)> = None;
            let mut value = f64::NEG_INFINITY;
            for (b, nb) in there.iter().enumerate() {
                let tail = best[k + 1][b];
                if na.timestamp > nb.timestamp || tail == f64::NEG_INFINITY {
                    continue;
                }
                let p = psi(k, a, b);
                let v = log_potential(p) + tail;
                let better = match arg {
                    None => true,
                    Some((cur, _)) => v > value || (v == value && nb.id < there[cur].id),
                };
                if better {
                    value = v;
                    arg = Some((b, p));
                }
            }
            if let Some(choice) = arg {
                row_best[a] = value;
                row_next[a] = choice;
            }
        }
        best[k] = row_best;
        next[k] = row_next;
    }
    let log_value = best[0][0];
    if log_value == f64::NEG_INFINITY {
        return None;
    }
    let mut choice = vec![0usize; n];
    let mut edge_psi = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let (b, p) = next[k][choice[k]];
        choice[k + 1] = b;
        edge_psi.push(p);
    }
    Some(ChainSolution {
        choice,
        log_value,
        edge_psi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: u64, t: f64) -> ChainNode {
        ChainNode {
            id: StateId(id),
            timestamp: t,
        }
    }

    #[test]
    fn adjacent_cameras_have_no_free_variables() {
        let chain = Chain::new(vec![vec![node(0, 0.0)], vec![node(9, 5.0)]]).unwrap();
        let sol = max_sum(&chain, |_, _, _| 0.7).unwrap();
        assert_eq!(sol.choice, vec![0, 0]);
        assert_eq!(sol.edge_psi, vec![0.7]);
        assert!((sol.log_value - 0.7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn three_camera_example() {
        // ψ(p,s₁)=0.9, ψ(s₁,q)=0.8, ψ(p,s₂)=0.2, ψ(s₂,q)=0.7
        let chain = Chain::new(vec![
            vec![node(0, 0.0)],
            vec![node(1, 1.0), node(2, 2.0)],
            vec![node(9, 5.0)],
        ])
        .unwrap();
        let table = |k: usize, a: usize, b: usize| if k == 0 { [0.9, 0.2][b] } else { [0.8, 0.7][a] };
        let sol = max_sum(&chain, table).unwrap();
        assert_eq!(sol.choice, vec![0, 0, 0]);
        assert!((sol.log_value - 0.72f64.ln()).abs() < 1e-12);
        assert_eq!(sol.edge_psi, vec![0.9, 0.8]);
    }

    #[test]
    fn late_middle_state_is_infeasible() {
        let chain = Chain::new(vec![vec![node(0, 0.0)], vec![node(1, 10.0)], vec![node(9, 5.0)]]).unwrap();
        assert!(max_sum(&chain, |_, _, _| 0.9).is_none());
    }

    #[test]
    fn equal_timestamps_are_feasible() {
        let chain = Chain::new(vec![vec![node(0, 1.0)], vec![node(1, 1.0)], vec![node(9, 1.0)]]).unwrap();
        assert!(max_sum(&chain, |_, _, _| 0.9).is_some());
    }

    #[test]
    fn ties_pick_lowest_id_at_earliest_layer() {
        let chain = Chain::new(vec![
            vec![node(0, 0.0)],
            vec![node(7, 1.0), node(3, 2.0)],
            vec![node(8, 3.0), node(4, 4.0)],
            vec![node(9, 5.0)],
        ])
        .unwrap();
        let sol = max_sum(&chain, |_, _, _| 0.5).unwrap();
        assert_eq!(sol.choice, vec![0, 1, 1, 0]);
    }

    #[test]
    fn potentials_are_clamped_before_log() {
        let chain = Chain::new(vec![vec![node(0, 0.0)], vec![node(9, 1.0)]]).unwrap();
        let sol = max_sum(&chain, |_, _, _| 0.0).unwrap();
        assert_eq!(sol.log_value, PSI_FLOOR.ln());
        assert_eq!(sol.edge_psi, vec![0.0]);
    }

    #[test]
    fn chain_shape_validation() {
        assert!(Chain::new(vec![vec![node(0, 0.0)]]).is_err());
        assert!(Chain::new(vec![vec![node(0, 0.0), node(1, 0.0)], vec![node(2, 0.0)]]).is_err());
        assert!(Chain::new(vec![vec![node(0, 0.0)], vec![]]).is_err());
    }
}
