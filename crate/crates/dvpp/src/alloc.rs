//! Capacity-proportional allocation of participation DC gains and its
//! distributed consensus-filter counterpart over a communication graph.

use std::collections::{HashSet, VecDeque};

use crate::{Error, Result};

/// Undirected communication graph over low-pass device indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl CommGraph {
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for &(a, b) in &edges {
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::Config("graph edge references unknown node".into()));
            }
            if a == b {
                return Err(Error::Config("graph self-loop".into()));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::Config("duplicate graph edge".into()));
            }
        }
        Ok(CommGraph { n_nodes, edges })
    }

    /// Line graph 0-1-2-...-(n-1).
    pub fn line(n_nodes: usize) -> Self {
        CommGraph {
            n_nodes,
            edges: (1..n_nodes).map(|i| (i - 1, i)).collect(),
        }
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        if self.n_nodes == 0 {
            return true;
        }
        let adj = self.neighbors();
        let mut seen = vec![false; self.n_nodes];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Closed-form capacity-proportional allocation:
/// `theta_i = (1 - fixed_dc) * y_i / sum(y)`, renormalized so the DC budget
/// is met exactly.
pub fn allocate(y: &[f64], fixed_dc: f64) -> Result<Vec<f64>> {
    if y.iter().any(|v| *v < 0.0) {
        return Err(Error::Config("capacities must be nonnegative".into()));
    }
    if !(0.0..=1.0).contains(&fixed_dc) {
        return Err(Error::Config("fixed DC share must lie in [0,1]".into()));
    }
    let total: f64 = y.iter().sum();
    let budget = 1.0 - fixed_dc;
    if total <= 0.0 {
        if budget.abs() <= 1e-12 {
            return Ok(vec![0.0; y.len()]);
        }
        return Err(Error::NoCapacity);
    }
    let mut theta: Vec<f64> = y.iter().map(|v| budget * v / total).collect();
    // renormalize residual rounding so the DC sums telescope exactly
    let s: f64 = theta.iter().sum();
    if s > 0.0 {
        let k = budget / s;
        for t in &mut theta {
            *t *= k;
        }
    }
    Ok(theta)
}

/// Independent oracle for [`allocate`]: minimize `sum theta_i^2 / y_i`
/// subject to `sum theta = 1 - fixed_dc`, `theta >= 0`, by projected
/// coordinate refinement with resolution doubling until the objective change
/// drops below 1e-10. Intended for tests, not production use.
pub fn qp_oracle(y: &[f64], fixed_dc: f64) -> Result<Vec<f64>> {
    if y.iter().any(|v| *v < 0.0) {
        return Err(Error::Config("capacities must be nonnegative".into()));
    }
    if !(0.0..=1.0).contains(&fixed_dc) {
        return Err(Error::Config("fixed DC share must lie in [0,1]".into()));
    }
    let budget = 1.0 - fixed_dc;
    let total: f64 = y.iter().sum();
    if total <= 0.0 {
        if budget.abs() <= 1e-12 {
            return Ok(vec![0.0; y.len()]);
        }
        return Err(Error::NoCapacity);
    }
    let n = y.len();
    let active: Vec<usize> = (0..n).filter(|&i| y[i] > 0.0).collect();
    let objective = |theta: &[f64]| -> f64 {
        theta
            .iter()
            .enumerate()
            .filter(|(i, _)| y[*i] > 0.0)
            .map(|(i, t)| t * t / y[i])
            .sum()
    };
    // feasible start: equal split over devices with capacity
    let mut theta = vec![0.0; n];
    for &i in &active {
        theta[i] = budget / active.len() as f64;
    }
    let mut step = budget.max(1e-6) / 4.0;
    let mut prev = objective(&theta);
    loop {
        let mut improved = true;
        while improved {
            improved = false;
            // pairwise transfers keep the equality constraint exact
            for &i in &active {
                for &j in &active {
                    if i == j {
                        continue;
                    }
                    let d = step.min(theta[j]);
                    if d <= 0.0 {
                        continue;
                    }
                    theta[i] += d;
                    theta[j] -= d;
                    let cand = objective(&theta);
                    if cand < prev - 1e-18 {
                        prev = cand;
                        improved = true;
                    } else {
                        theta[i] -= d;
                        theta[j] += d;
                    }
                }
            }
        }
        let before = prev;
        step *= 0.5;
        if step < 1e-12 {
            break;
        }
        // one more sweep at the finer resolution; stop when refinement
        // changes the objective by less than 1e-10
        let mut improved = true;
        while improved {
            improved = false;
            for &i in &active {
                for &j in &active {
                    if i == j {
                        continue;
                    }
                    let d = step.min(theta[j]);
                    if d <= 0.0 {
                        continue;
                    }
                    theta[i] += d;
                    theta[j] -= d;
                    let cand = objective(&theta);
                    if cand < prev - 1e-18 {
                        prev = cand;
                        improved = true;
                    } else {
                        theta[i] -= d;
                        theta[j] += d;
                    }
                }
            }
        }
        if (before - prev).abs() < 1e-10 && step < 1e-8 {
            break;
        }
    }
    Ok(theta)
}

/// Consensus-filter trajectory sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusTrace {
    pub t: Vec<f64>,
    /// Row-major: theta[k] is the parameter vector at time t[k].
    pub theta: Vec<Vec<f64>>,
}

/// Explicit-Euler stability bound for the consensus filter:
/// `dt < 2 * min(y) / deg_max` over capacity-carrying nodes.
pub fn consensus_dt_bound(graph: &CommGraph, y: &[f64]) -> f64 {
    let adj = graph.neighbors();
    let deg_max = adj.iter().map(|a| a.len()).max().unwrap_or(0).max(1) as f64;
    let y_min = y
        .iter()
        .copied()
        .filter(|v| *v > 0.0)
        .fold(f64::INFINITY, f64::min);
    2.0 * y_min / deg_max
}

/// Adjacency with zero-capacity nodes contracted: neighbors of a node
/// without capacity are connected pairwise so the node acts as a relay.
pub fn relay_adjacency(graph: &CommGraph, y: &[f64]) -> Vec<Vec<usize>> {
    let mut adj = graph.neighbors();
    for i in 0..graph.n_nodes {
        if y[i] == 0.0 {
            let nbrs = adj[i].clone();
            for (a_pos, &a) in nbrs.iter().enumerate() {
                for &b in nbrs.iter().skip(a_pos + 1) {
                    if y[a] > 0.0 && y[b] > 0.0 && !adj[a].contains(&b) {
                        adj[a].push(b);
                        adj[b].push(a);
                    }
                }
            }
        }
    }
    adj
}

/// Right-hand side of the consensus filter
/// `dtheta_i/dt = sum_{l in I_i} (theta_l / y_l - theta_i / y_i)`
/// on a (relay-contracted) adjacency; zero-capacity nodes stay at rest.
pub fn consensus_rate(adj: &[Vec<usize>], y: &[f64], theta: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut dtheta = vec![0.0; n];
    for i in 0..n {
        if y[i] == 0.0 {
            continue;
        }
        for &l in &adj[i] {
            if y[l] == 0.0 {
                continue;
            }
            dtheta[i] += theta[l] / y[l] - theta[i] / y[i];
        }
    }
    dtheta
}

/// Integrate the distributed consensus filter
/// `dtheta_i/dt = sum_{l in I_i} (theta_l / y_l - theta_i / y_i)`
/// with piecewise-constant capacities. Zero-capacity nodes hold `theta = 0`
/// and act as pass-through relays between their neighbors.
pub fn consensus_simulate(
    graph: &CommGraph,
    y: &[f64],
    theta0: &[f64],
    dt: f64,
    horizon: f64,
) -> Result<ConsensusTrace> {
    if y.len() != graph.n_nodes || theta0.len() != graph.n_nodes {
        return Err(Error::DimensionMismatch("consensus node count".into()));
    }
    if !graph.is_connected() {
        return Err(Error::DisconnectedGraph);
    }
    if y.iter().any(|v| *v < 0.0) {
        return Err(Error::Config("capacities must be nonnegative".into()));
    }
    let bound = consensus_dt_bound(graph, y);
    if !(dt > 0.0) || dt >= bound {
        return Err(Error::ConsensusStepTooLarge { dt, bound });
    }

    let adj = relay_adjacency(graph, y);

    let n_steps = (horizon / dt).ceil() as usize;
    let mut theta = theta0.to_vec();
    for (i, t) in theta.iter_mut().enumerate() {
        if y[i] == 0.0 {
            *t = 0.0;
        }
    }
    let mut trace = ConsensusTrace {
        t: Vec::with_capacity(n_steps + 1),
        theta: Vec::with_capacity(n_steps + 1),
    };
    trace.t.push(0.0);
    trace.theta.push(theta.clone());
    for k in 0..n_steps {
        let dtheta = consensus_rate(&adj, y, &theta);
        for i in 0..graph.n_nodes {
            theta[i] += dt * dtheta[i];
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::SimulationDiverged((k + 1) as f64 * dt));
        }
        trace.t.push((k + 1) as f64 * dt);
        trace.theta.push(theta.clone());
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn proportional_split_of_table_capacities() {
        // wind 37 MW, pv 28 MW
        let theta = allocate(&[37.0, 28.0], 0.0).unwrap();
        assert_relative_eq!(theta[0], 37.0 / 65.0, epsilon = 1e-12);
        assert_relative_eq!(theta[1], 28.0 / 65.0, epsilon = 1e-12);
        assert!((theta[0] - 0.56923).abs() < 1e-5);
        assert!((theta[1] - 0.43077).abs() < 1e-5);
    }

    #[test]
    fn equal_capacities_split_equally() {
        let theta = allocate(&[2.0, 2.0, 2.0], 0.0).unwrap();
        for t in &theta {
            assert_relative_eq!(*t, 1.0 / 3.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn full_fixed_dc_yields_zero() {
        let theta = allocate(&[1.0, 4.0], 1.0).unwrap();
        assert_eq!(theta, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_capacity_with_remaining_budget_fails() {
        assert!(matches!(
            allocate(&[0.0, 0.0], 0.2),
            Err(Error::NoCapacity)
        ));
    }

    #[test]
    fn allocation_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(1..=5);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..10.0)).collect();
            let c = rng.gen_range(0.1..50.0);
            let scaled: Vec<f64> = y.iter().map(|v| v * c).collect();
            let a = allocate(&y, 0.3).unwrap();
            let b = allocate(&scaled, 0.3).unwrap();
            for (x, z) in a.iter().zip(&b) {
                assert_relative_eq!(x, z, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn oracle_symmetry_cases() {
        let theta = qp_oracle(&[1.0, 1.0, 1.0], 0.25).unwrap();
        for t in &theta {
            assert_relative_eq!(*t, 0.25, epsilon = 1e-8);
        }
        let single = qp_oracle(&[5.0], 0.4).unwrap();
        assert_relative_eq!(single[0], 0.6, epsilon = 1e-8);
    }

    #[test]
    fn oracle_agrees_with_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let n = rng.gen_range(2..=5);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..5.0)).collect();
            let fixed_dc = rng.gen_range(0.0..0.9);
            let closed = allocate(&y, fixed_dc).unwrap();
            let oracle = qp_oracle(&y, fixed_dc).unwrap();
            for (a, b) in closed.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-8, "closed {a} oracle {b}");
            }
        }
    }

    #[test]
    fn consensus_symmetric_pair() {
        let g = CommGraph::line(2);
        let tr = consensus_simulate(&g, &[1.0, 1.0], &[1.0, 0.0], 0.1, 20.0).unwrap();
        let last = tr.theta.last().unwrap();
        assert_relative_eq!(last[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(last[1], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn consensus_conserves_total() {
        let g = CommGraph::new(4, vec![(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let y = [0.9, 0.4, 1.3, 0.7];
        let theta0 = [0.4, 0.3, 0.2, 0.1];
        let tr = consensus_simulate(&g, &y, &theta0, 0.05, 5.0).unwrap();
        let s0: f64 = theta0.iter().sum();
        for row in &tr.theta {
            let s: f64 = row.iter().sum();
            assert!((s - s0).abs() <= 1e-12);
        }
    }

    #[test]
    fn consensus_terminal_matches_allocation() {
        let g = CommGraph::line(2);
        let y = [37.0 / 65.0, 28.0 / 65.0]; // pu-normalized capacities
        let tr = consensus_simulate(&g, &y, &[0.5, 0.5], 0.01, 60.0).unwrap();
        let target = allocate(&y, 0.0).unwrap();
        let last = tr.theta.last().unwrap();
        assert!((last[0] - target[0]).abs() <= 1e-6);
        assert!((last[1] - target[1]).abs() <= 1e-6);
        assert!((target[0] - 0.56923).abs() < 1e-5);
    }

    #[test]
    fn consensus_rejects_disconnected_graph() {
        let g = CommGraph::new(3, vec![(0, 1)]).unwrap();
        assert!(matches!(
            consensus_simulate(&g, &[1.0; 3], &[0.3, 0.3, 0.4], 0.01, 1.0),
            Err(Error::DisconnectedGraph)
        ));
    }

    #[test]
    fn consensus_rejects_unstable_step() {
        let g = CommGraph::line(2);
        let bound = consensus_dt_bound(&g, &[0.5, 0.5]);
        assert!(matches!(
            consensus_simulate(&g, &[0.5, 0.5], &[0.5, 0.5], bound * 1.01, 1.0),
            Err(Error::ConsensusStepTooLarge { .. })
        ));
    }

    #[test]
    fn zero_capacity_node_relays() {
        // middle node has no capacity; outer nodes still reach consensus
        let g = CommGraph::line(3);
        let y = [1.0, 0.0, 1.0];
        let tr = consensus_simulate(&g, &y, &[0.8, 0.1, 0.2], 0.05, 30.0).unwrap();
        let last = tr.theta.last().unwrap();
        assert_relative_eq!(last[1], 0.0);
        // total over capacity-carrying nodes is conserved after zeroing
        assert_relative_eq!(last[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(last[2], 0.5, epsilon = 1e-6);
    }
}
