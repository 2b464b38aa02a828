//! Exact Kantorovich solver: primal network simplex on the bipartite
//! transportation network.
//!
//! The basis is a spanning tree over the `m + n` supply/demand nodes plus an
//! artificial root. The initial tree hangs every node off the root through an
//! artificial arc, which makes it strongly feasible; leaving arcs are chosen
//! with the last-blocking-arc rule so degenerate pivots cannot cycle.
//! Entering arcs are priced with block search.

use ndarray::Array2;

use super::{compensated_sum, l1_violation, CostMatrix, DiscreteMeasure, TransportPlan};
use crate::{Error, Result};

/// Largest support accepted by [`exact_ot`].
pub const DEFAULT_MAX_SUPPORT: usize = 256;

/// Exact solver with a configurable support limit.
#[derive(Debug, Clone, Copy)]
pub struct ExactSolver {
    pub max_support: usize,
    pub max_pivots: usize,
}

impl Default for ExactSolver {
    fn default() -> Self {
        Self { max_support: DEFAULT_MAX_SUPPORT, max_pivots: 50_000_000 }
    }
}

/// Optimal plan for `min <pi, C>` over couplings of `a` and `b`.
pub fn exact_ot(a: &DiscreteMeasure, b: &DiscreteMeasure, cost: &CostMatrix) -> Result<TransportPlan> {
    ExactSolver::default().solve(a, b, cost)
}

impl ExactSolver {
    pub fn with_max_support(max_support: usize) -> Self {
        Self { max_support, ..Self::default() }
    }

    pub fn solve(&self, a: &DiscreteMeasure, b: &DiscreteMeasure, cost: &CostMatrix) -> Result<TransportPlan> {
        cost.check_shape(a, b)?;
        a.ensure_probability("source")?;
        b.ensure_probability("target")?;
        let size = a.len().max(b.len());
        if size > self.max_support {
            return Err(Error::SupportTooLarge { size, limit: self.max_support });
        }
        if let Some(v) = cost.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cost entry {v}")));
        }
        self.solve_weights(&a.weights, &b.weights, &cost.values)
    }

    /// Solve on raw weight vectors (already validated).
    pub(crate) fn solve_weights(&self, a: &[f64], b: &[f64], cost: &Array2<f64>) -> Result<TransportPlan> {
        // Zero-weight atoms carry no flow; dropping them keeps the initial tree
        // strongly feasible.
        let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
        let cols: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0.0).collect();
        let sub_cost = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| cost[[rows[i], cols[j]]]);
        let supply: Vec<f64> = rows.iter().map(|&i| a[i]).collect();
        let demand: Vec<f64> = cols.iter().map(|&j| b[j]).collect();

        let mut ns = NetworkSimplex::new(&supply, &demand, &sub_cost);
        let pivots = ns.run(self.max_pivots)?;

        let mut coupling = Array2::zeros((a.len(), b.len()));
        let n = cols.len();
        for (ii, &i) in rows.iter().enumerate() {
            for (jj, &j) in cols.iter().enumerate() {
                coupling[[i, j]] = ns.flow[ii * n + jj];
            }
        }
        let objective = compensated_sum(coupling.iter().zip(cost.iter()).map(|(x, c)| x * c));
        let mut plan = TransportPlan {
            coupling,
            objective_value: objective,
            regularized_objective: objective,
            iterations: pivots,
            converged: true,
            marginal_violation: 0.0,
        };
        plan.marginal_violation = l1_violation(&plan.row_sums(), a) + l1_violation(&plan.col_sums(), b);
        Ok(plan)
    }
}

struct NetworkSimplex<'a> {
    m: usize,
    n: usize,
    cost: &'a Array2<f64>,
    art_cost: f64,
    /// Flow on real arcs (`i * n + j`) followed by one artificial arc per node.
    flow: Vec<f64>,
    root: usize,
    parent: Vec<usize>,
    /// Tree arc joining a node to its parent.
    pred: Vec<usize>,
    depth: Vec<usize>,
    pi: Vec<f64>,
    adjacency: Vec<Vec<usize>>,
    next_arc: usize,
    block_size: usize,
    price_tol: f64,
}

const NONE: usize = usize::MAX;

impl<'a> NetworkSimplex<'a> {
    fn new(supply: &[f64], demand: &[f64], cost: &'a Array2<f64>) -> Self {
        let (m, n) = (supply.len(), demand.len());
        let nodes = m + n;
        let root = nodes;
        let max_cost = cost.iter().fold(0.0_f64, |acc, &c| acc.max(c.abs()));
        let art_cost = (max_cost + 1.0) * (nodes + 1) as f64;
        let real = m * n;
        let mut flow = vec![0.0; real + nodes];
        let mut adjacency = vec![Vec::new(); nodes + 1];
        for u in 0..nodes {
            flow[real + u] = if u < m { supply[u] } else { demand[u - m] };
            adjacency[u].push(real + u);
            adjacency[root].push(real + u);
        }
        let mut ns = Self {
            m,
            n,
            cost,
            art_cost,
            flow,
            root,
            parent: vec![NONE; nodes + 1],
            pred: vec![NONE; nodes + 1],
            depth: vec![0; nodes + 1],
            pi: vec![0.0; nodes + 1],
            adjacency,
            next_arc: 0,
            block_size: ((real as f64).sqrt().ceil() as usize).max(10),
            price_tol: 1e-12 * (max_cost + 1.0),
        };
        ns.rebuild_tree();
        ns
    }

    fn real_arcs(&self) -> usize {
        self.m * self.n
    }

    fn endpoints(&self, arc: usize) -> (usize, usize) {
        let real = self.real_arcs();
        if arc < real {
            (arc / self.n, self.m + arc % self.n)
        } else {
            let u = arc - real;
            if u < self.m {
                (u, self.root)
            } else {
                (self.root, u)
            }
        }
    }

    fn arc_cost(&self, arc: usize) -> f64 {
        let real = self.real_arcs();
        if arc < real {
            self.cost[[arc / self.n, arc % self.n]]
        } else if arc - real < self.m {
            0.0
        } else {
            self.art_cost
        }
    }

    fn reduced_cost(&self, arc: usize) -> f64 {
        let (s, t) = self.endpoints(arc);
        self.arc_cost(arc) + self.pi[s] - self.pi[t]
    }

    /// Recompute parent/pred/depth/potentials from the basic arcs.
    fn rebuild_tree(&mut self) {
        let root = self.root;
        self.parent[root] = NONE;
        self.pred[root] = NONE;
        self.depth[root] = 0;
        self.pi[root] = 0.0;
        let mut queue = std::collections::VecDeque::with_capacity(self.parent.len());
        queue.push_back(root);
        while let Some(u) = queue.pop_front() {
            for k in 0..self.adjacency[u].len() {
                let arc = self.adjacency[u][k];
                if arc == self.pred[u] {
                    continue;
                }
                let (s, t) = self.endpoints(arc);
                let v = if s == u { t } else { s };
                self.parent[v] = u;
                self.pred[v] = arc;
                self.depth[v] = self.depth[u] + 1;
                // Basic arcs have zero reduced cost.
                self.pi[v] = if s == u { self.pi[u] + self.arc_cost(arc) } else { self.pi[u] - self.arc_cost(arc) };
                queue.push_back(v);
            }
        }
    }

    fn find_entering(&mut self) -> Option<usize> {
        let total = self.real_arcs();
        if total == 0 {
            return None;
        }
        let mut best = NONE;
        let mut best_rc = -self.price_tol;
        let mut in_block = 0;
        for _ in 0..total {
            let arc = self.next_arc;
            self.next_arc = if self.next_arc + 1 == total { 0 } else { self.next_arc + 1 };
            let rc = self.reduced_cost(arc);
            if rc < best_rc {
                best_rc = rc;
                best = arc;
            }
            in_block += 1;
            if in_block == self.block_size {
                if best != NONE {
                    return Some(best);
                }
                in_block = 0;
            }
        }
        (best != NONE).then_some(best)
    }

    fn run(&mut self, max_pivots: usize) -> Result<usize> {
        let mut pivots = 0;
        while let Some(entering) = self.find_entering() {
            if pivots == max_pivots {
                return Err(Error::Diverged(format!("network simplex exceeded {max_pivots} pivots")));
            }
            self.pivot(entering);
            pivots += 1;
        }
        Ok(pivots)
    }

    fn pivot(&mut self, entering: usize) {
        let (first, second) = self.endpoints(entering);
        let join = {
            let (mut u, mut v) = (first, second);
            while u != v {
                if self.depth[u] >= self.depth[v] {
                    u = self.parent[u];
                } else {
                    v = self.parent[v];
                }
            }
            u
        };

        // Flow is pushed join -> first -> second -> join.
        let mut delta = f64::INFINITY;
        let mut leaving_node = NONE;
        let mut u = first;
        while u != join {
            let arc = self.pred[u];
            if self.endpoints(arc).0 == u {
                // Arc points up toward the parent: the push decreases it.
                let d = self.flow[arc];
                if d < delta {
                    delta = d;
                    leaving_node = u;
                }
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != join {
            let arc = self.pred[u];
            if self.endpoints(arc).0 != u {
                let d = self.flow[arc];
                if d <= delta {
                    delta = d;
                    leaving_node = u;
                }
            }
            u = self.parent[u];
        }
        debug_assert!(leaving_node != NONE, "transportation cycles are always bounded");

        if delta > 0.0 {
            let mut u = first;
            while u != join {
                let arc = self.pred[u];
                if self.endpoints(arc).0 == u {
                    self.flow[arc] -= delta;
                } else {
                    self.flow[arc] += delta;
                }
                u = self.parent[u];
            }
            let mut u = second;
            while u != join {
                let arc = self.pred[u];
                if self.endpoints(arc).0 == u {
                    self.flow[arc] += delta;
                } else {
                    self.flow[arc] -= delta;
                }
                u = self.parent[u];
            }
            self.flow[entering] += delta;
        }
        let leaving = self.pred[leaving_node];
        self.flow[leaving] = 0.0;

        let (s, t) = self.endpoints(leaving);
        self.adjacency[s].retain(|&a| a != leaving);
        self.adjacency[t].retain(|&a| a != leaving);
        self.adjacency[first].push(entering);
        self.adjacency[second].push(entering);
        self.rebuild_tree();
    }
}
