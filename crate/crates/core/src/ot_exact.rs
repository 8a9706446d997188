//! Exact discrete Kantorovich problem.
//!
//! The transportation LP is solved with a primal network simplex on the
//! complete bipartite graph (rows = sources, columns = sinks). The basis is a
//! spanning tree of `n + m - 1` cells; potentials are rebuilt from the tree
//! after every pivot, pricing uses a rotating block search, and the final flows
//! are recomputed from the tree so that marginals are met up to rounding.
//! Returned plans are therefore vertices with at most `n + m - 1` nonzeros,
//! which is what the Frank-Wolfe linear oracle needs.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::matstat::Matrix;

/// Masses below this are treated as absent.
pub const MASS_FLOOR: f64 = 1e-12;
/// Tolerated gap between total supply and total demand.
pub const MASS_GAP_TOL: f64 = 1e-6;

/// Probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassVector(Vec<f64>);

impl MassVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidMass {
                reason: "empty".into(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidMass {
                reason: format!("entry {v} is negative or non-finite"),
            });
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMass {
                reason: format!("entries sum to {total}"),
            });
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform mass over zero points");
        Self(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for MassVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    ExactLp,
    Sinkhorn,
    FrankWolfe,
}

/// A coupling together with its cost and solver diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportPlan {
    pub plan: Matrix,
    /// `⟨D, plan⟩` for the cost matrix the plan was solved against.
    pub cost: f64,
    pub iterations: usize,
    pub method: SolverMethod,
    pub converged: bool,
}

impl TransportPlan {
    /// Largest absolute deviation of the plan's row/column sums from `a`/`b`.
    pub fn marginal_violation(&self, a: &[f64], b: &[f64]) -> f64 {
        marginal_violation(&self.plan, a, b)
    }

    pub fn nonzeros(&self) -> usize {
        self.plan.as_slice().iter().filter(|v| **v != 0.0).count()
    }
}

pub fn marginal_violation(plan: &Matrix, a: &[f64], b: &[f64]) -> f64 {
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    rows.iter()
        .zip(a)
        .chain(cols.iter().zip(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Exact optimal transport between two probability vectors.
pub fn solve_exact_ot(cost: &Matrix, a: &MassVector, b: &MassVector) -> Result<TransportPlan> {
    solve_transport(cost, a.values(), b.values())
}

/// Exact transport between raw supply and demand vectors with equal totals.
///
/// Entries below [`MASS_FLOOR`] are dropped and the surviving masses are
/// rescaled to the common total before solving.
pub fn solve_transport(cost: &Matrix, supply: &[f64], demand: &[f64]) -> Result<TransportPlan> {
    solve_transport_warm(cost, supply, demand, None).map(|(p, _)| p)
}

/// Spanning-tree basis of a transport solution (`n + m - 1` cells).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Basis(pub Vec<(usize, usize)>);

/// [`solve_transport`] started from `start` when it is feasible for these
/// masses. Returns the final basis when no mass entry was dropped.
pub fn solve_transport_warm(
    cost: &Matrix,
    supply: &[f64],
    demand: &[f64],
    start: Option<&Basis>,
) -> Result<(TransportPlan, Option<Basis>)> {
    let (n, m) = cost.shape();
    if supply.len() != n || demand.len() != m {
        return Err(dim_mismatch(
            "solve_transport",
            format!("masses of length ({n}, {m})"),
            format!("({}, {})", supply.len(), demand.len()),
        ));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite {
            what: "transport cost".into(),
        });
    }
    if supply.iter().chain(demand).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidMass {
            reason: "negative or non-finite mass".into(),
        });
    }
    let total_a: f64 = supply.iter().sum();
    let total_b: f64 = demand.iter().sum();
    if (total_a - total_b).abs() > MASS_GAP_TOL {
        return Err(Error::InfeasibleMarginals {
            gap: (total_a - total_b).abs(),
        });
    }
    if total_a <= MASS_FLOOR {
        return Ok((
            TransportPlan {
                plan: Matrix::zeros(n, m),
                cost: 0.0,
                iterations: 0,
                method: SolverMethod::ExactLp,
                converged: true,
            },
            None,
        ));
    }

    let rows: Vec<usize> = (0..n).filter(|&i| supply[i] >= MASS_FLOOR).collect();
    let cols: Vec<usize> = (0..m).filter(|&j| demand[j] >= MASS_FLOOR).collect();
    let kept_a: f64 = rows.iter().map(|&i| supply[i]).sum();
    let kept_b: f64 = cols.iter().map(|&j| demand[j]).sum();
    let total = 0.5 * (total_a + total_b);
    let sa: Vec<f64> = rows.iter().map(|&i| supply[i] * total / kept_a).collect();
    let sb: Vec<f64> = cols.iter().map(|&j| demand[j] * total / kept_b).collect();
    let sub_cost = Matrix::from_fn(rows.len(), cols.len(), |i, j| cost[(rows[i], cols[j])]);

    let complete = rows.len() == n && cols.len() == m;
    let mut simplex = TransportSimplex::new(&sub_cost, &sa, &sb, start.filter(|_| complete));
    simplex.run()?;
    let basis = complete.then(|| Basis(simplex.cells.clone()));
    let sub_plan = simplex.plan();

    let mut plan = Matrix::zeros(n, m);
    for (si, &i) in rows.iter().enumerate() {
        for (sj, &j) in cols.iter().enumerate() {
            plan[(i, j)] = sub_plan[(si, sj)];
        }
    }
    let value = plan.frobenius_dot(cost);
    Ok((
        TransportPlan {
            plan,
            cost: value,
            iterations: simplex.pivots,
            method: SolverMethod::ExactLp,
            converged: true,
        },
        basis,
    ))
}

const NONE: usize = usize::MAX;

struct TransportSimplex<'a> {
    cost: &'a Matrix,
    supply: &'a [f64],
    demand: &'a [f64],
    n: usize,
    m: usize,
    /// Basic cells `(row, col)` and their flows.
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
    /// `slot[i * m + j]` = index into `cells`, or NONE.
    slot: Vec<usize>,
    // Spanning tree over nodes rows 0..n, cols n..n+m; `adj[u]` holds
    // `(neighbour, cell)` pairs.
    adj: Vec<Vec<(usize, usize)>>,
    parent: Vec<usize>,
    parent_cell: Vec<usize>,
    depth: Vec<usize>,
    order: Vec<usize>,
    potential: Vec<f64>,
    pivots: usize,
    scan_pos: usize,
}

impl<'a> TransportSimplex<'a> {
    fn new(cost: &'a Matrix, supply: &'a [f64], demand: &'a [f64], start: Option<&Basis>) -> Self {
        let (n, m) = cost.shape();
        let nodes = n + m;
        let mut s = Self {
            cost,
            supply,
            demand,
            n,
            m,
            cells: Vec::with_capacity(nodes - 1),
            flow: Vec::with_capacity(nodes - 1),
            slot: vec![NONE; n * m],
            adj: vec![Vec::new(); nodes],
            parent: vec![NONE; nodes],
            parent_cell: vec![NONE; nodes],
            depth: vec![0; nodes],
            order: Vec::with_capacity(nodes),
            potential: vec![0.0; nodes],
            pivots: 0,
            scan_pos: 0,
        };
        if !start.is_some_and(|b| s.try_basis(b)) {
            s.least_cost_start();
        }
        s
    }

    /// Adopt `basis` if it is a spanning tree whose flows are feasible for
    /// the current masses.
    fn try_basis(&mut self, basis: &Basis) -> bool {
        let (n, m) = (self.n, self.m);
        if basis.0.len() != n + m - 1 || basis.0.iter().any(|&(i, j)| i >= n || j >= m) {
            return false;
        }
        for (c, &(i, j)) in basis.0.iter().enumerate() {
            if self.slot[i * m + j] != NONE {
                self.reset();
                return false;
            }
            self.slot[i * m + j] = c;
            self.cells.push((i, j));
            self.flow.push(0.0);
            self.adj[i].push((n + j, c));
            self.adj[n + j].push((i, c));
        }
        self.rebuild_tree();
        if self.order.len() != n + m {
            self.reset();
            return false;
        }
        let total: f64 = self.supply.iter().sum();
        if !self.peel_flows().iter().all(|&f| f >= -1e-12 * total) {
            self.reset();
            return false;
        }
        self.flow.iter_mut().for_each(|f| *f = f.max(0.0));
        true
    }

    fn reset(&mut self) {
        self.cells.clear();
        self.flow.clear();
        self.slot.iter_mut().for_each(|s| *s = NONE);
        self.adj.iter_mut().for_each(Vec::clear);
    }

    /// Initial basic feasible tree by the least-cost rule: cells are filled
    /// in increasing cost order and every allocation retires exactly one row
    /// or column, so `n + m - 1` cells form a spanning tree.
    fn least_cost_start(&mut self) {
        let (n, m) = (self.n, self.m);
        let c = self.cost.as_slice();
        let mut idx: Vec<usize> = (0..n * m).collect();
        idx.sort_unstable_by(|&p, &q| c[p].total_cmp(&c[q]).then(p.cmp(&q)));
        let mut rem_a = self.supply.to_vec();
        let mut rem_b = self.demand.to_vec();
        let mut row_open = vec![true; n];
        let mut col_open = vec![true; m];
        let (mut rows_left, mut cols_left) = (n, m);
        for p in idx {
            let (i, j) = (p / m, p % m);
            if !row_open[i] || !col_open[j] {
                continue;
            }
            let row_first = rem_a[i] <= rem_b[j];
            let x = rem_a[i].min(rem_b[j]).max(0.0);
            self.slot[p] = self.cells.len();
            self.cells.push((i, j));
            self.flow.push(x);
            rem_a[i] -= x;
            rem_b[j] -= x;
            if rows_left == 1 && cols_left == 1 {
                break;
            }
            if (row_first && rows_left > 1) || cols_left == 1 {
                row_open[i] = false;
                rows_left -= 1;
            } else {
                col_open[j] = false;
                cols_left -= 1;
            }
        }
        debug_assert_eq!(self.cells.len(), n + m - 1);
        for (c, &(i, j)) in self.cells.iter().enumerate() {
            self.adj[i].push((n + j, c));
            self.adj[n + j].push((i, c));
        }
    }

    /// Parents, depths, potentials and BFS order for the whole tree.
    fn rebuild_tree(&mut self) {
        let nodes = self.n + self.m;
        self.parent.iter_mut().for_each(|p| *p = NONE);
        self.order.clear();
        self.order.push(0);
        self.parent[0] = 0;
        self.parent_cell[0] = NONE;
        self.depth[0] = 0;
        self.potential[0] = 0.0;
        let mut head = 0;
        while head < self.order.len() {
            let u = self.order[head];
            head += 1;
            for k in 0..self.adj[u].len() {
                let (v, c) = self.adj[u][k];
                if self.parent[v] != NONE {
                    continue;
                }
                self.hang(v, u, c);
                self.order.push(v);
            }
        }
        debug_assert_eq!(self.order.len(), nodes, "basis is not a spanning tree");
    }

    fn hang(&mut self, v: usize, u: usize, c: usize) {
        self.parent[v] = u;
        self.parent_cell[v] = c;
        self.depth[v] = self.depth[u] + 1;
        let (ci, cj) = self.cells[c];
        // u_i + v_j = c_ij
        self.potential[v] = self.cost[(ci, cj)] - self.potential[u];
    }

    /// Re-hang the subtree containing `s` below `o` through cell `c`.
    fn rehang(&mut self, s: usize, o: usize, c: usize, stack: &mut Vec<usize>) {
        self.hang(s, o, c);
        stack.clear();
        stack.push(s);
        while let Some(u) = stack.pop() {
            let pc = self.parent_cell[u];
            for k in 0..self.adj[u].len() {
                let (v, vc) = self.adj[u][k];
                if vc == pc {
                    continue;
                }
                self.hang(v, u, vc);
                stack.push(v);
            }
        }
    }

    /// Rotating block search for a cell with negative reduced cost.
    fn price(&mut self, tol: f64) -> Option<(usize, usize)> {
        let total = self.n * self.m;
        let block = ((total as f64).sqrt() as usize).max(self.n + self.m).min(total);
        let mut best: Option<(usize, f64)> = None;
        let mut scanned = 0;
        let mut pos = self.scan_pos;
        while scanned < total {
            let end = (scanned + block).min(total);
            while scanned < end {
                if self.slot[pos] == NONE {
                    let i = pos / self.m;
                    let j = pos % self.m;
                    let r = self.cost[(i, j)] - self.potential[i] - self.potential[self.n + j];
                    if r < -tol && best.is_none_or(|(_, br)| r < br) {
                        best = Some((pos, r));
                    }
                }
                pos += 1;
                if pos == total {
                    pos = 0;
                }
                scanned += 1;
            }
            if best.is_some() {
                break;
            }
        }
        self.scan_pos = pos;
        best.map(|(p, _)| (p / self.m, p % self.m))
    }

    fn run(&mut self) -> Result<()> {
        let scale = self
            .cost
            .as_slice()
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
            .max(1e-300);
        let tol = 1e-12 * scale;
        let limit = 50 * (self.n + self.m) * (self.n + self.m) + 1000;
        let mut path_minus: Vec<usize> = Vec::new();
        let mut path_plus: Vec<usize> = Vec::new();
        let mut up_col: Vec<usize> = Vec::new();
        let mut up_row: Vec<usize> = Vec::new();
        let mut stack: Vec<usize> = Vec::new();
        self.rebuild_tree();
        loop {
            let Some((ei, ej)) = self.price(tol) else {
                break;
            };
            if self.pivots >= limit {
                return Err(Error::SimplexPivotLimit { pivots: limit });
            }
            self.pivots += 1;

            // Cycle: entering (ei, ej) then tree path col ej -> row ei.
            // Edges alternate sign starting with '-' at the column end.
            path_minus.clear();
            path_plus.clear();
            up_col.clear();
            up_row.clear();
            let mut x = self.n + ej;
            let mut y = ei;
            while self.depth[x] > self.depth[y] {
                up_col.push(self.parent_cell[x]);
                x = self.parent[x];
            }
            while self.depth[y] > self.depth[x] {
                up_row.push(self.parent_cell[y]);
                y = self.parent[y];
            }
            while x != y {
                up_col.push(self.parent_cell[x]);
                x = self.parent[x];
                up_row.push(self.parent_cell[y]);
                y = self.parent[y];
            }
            for (k, &c) in up_col.iter().chain(up_row.iter().rev()).enumerate() {
                if k % 2 == 0 {
                    path_minus.push(c);
                } else {
                    path_plus.push(c);
                }
            }

            let mut leave = path_minus[0];
            let mut leave_pos = 0;
            let mut theta = self.flow[leave];
            for (k, &c) in path_minus.iter().enumerate().skip(1) {
                if self.flow[c] < theta {
                    theta = self.flow[c];
                    leave = c;
                    leave_pos = k;
                }
            }
            // Cycle position 2k; the column side holds the first up_col.len().
            let col_side = 2 * leave_pos < up_col.len();
            let theta = theta.max(0.0);
            for &c in &path_minus {
                self.flow[c] -= theta;
            }
            for &c in &path_plus {
                self.flow[c] += theta;
            }
            let (li, lj) = self.cells[leave];
            self.slot[li * self.m + lj] = NONE;
            let (ln, lc) = (li, self.n + lj);
            self.adj[ln].retain(|&(_, c)| c != leave);
            self.adj[lc].retain(|&(_, c)| c != leave);
            self.cells[leave] = (ei, ej);
            self.flow[leave] = theta;
            self.slot[ei * self.m + ej] = leave;
            let (rn, cn) = (ei, self.n + ej);
            self.adj[rn].push((cn, leave));
            self.adj[cn].push((rn, leave));
            if col_side {
                self.rehang(cn, rn, leave, &mut stack);
            } else {
                self.rehang(rn, cn, leave, &mut stack);
            }
        }
        self.rebuild_tree();
        self.recompute_flows();
        Ok(())
    }

    /// Flows are uniquely determined by the tree; peel from the leaves.
    fn recompute_flows(&mut self) {
        self.peel_flows();
        for f in &mut self.flow {
            if *f < 0.0 {
                *f = 0.0;
            }
        }
    }

    fn peel_flows(&mut self) -> &[f64] {
        let mut residual: Vec<f64> = self
            .supply
            .iter()
            .chain(self.demand.iter())
            .copied()
            .collect();
        for &v in self.order.iter().rev() {
            let c = self.parent_cell[v];
            if c == NONE {
                continue;
            }
            let f = residual[v];
            self.flow[c] = f;
            let p = self.parent[v];
            residual[p] -= f;
        }
        &self.flow
    }

    fn plan(&self) -> Matrix {
        let mut plan = Matrix::zeros(self.n, self.m);
        for (&(i, j), &f) in self.cells.iter().zip(&self.flow) {
            plan[(i, j)] = f;
        }
        plan
    }
}

/// Optimal permutation by exhaustive enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
}

pub const BRUTE_FORCE_MAX_N: usize = 8;

/// Minimises `Σ_i D[i][σ(i)]` over all permutations; lexicographically
/// smallest σ wins ties. Test oracle only: `n ≤ 8`.
pub fn brute_force_assignment(cost: &Matrix) -> Result<Assignment> {
    let (n, m) = cost.shape();
    if n != m {
        return Err(dim_mismatch("brute_force_assignment", "square matrix", format!("{n}x{m}")));
    }
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::OracleTooLarge {
            what: "assignment",
            size: n,
            limit: BRUTE_FORCE_MAX_N,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>();
    let mut best = Assignment {
        perm: perm.clone(),
        cost: eval(&perm),
    };
    // Lexicographic next-permutation keeps the first minimiser found.
    while next_permutation(&mut perm) {
        let c = eval(&perm);
        if c < best.cost {
            best = Assignment {
                perm: perm.clone(),
                cost: c,
            };
        }
    }
    Ok(best)
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matstat::SeededRng;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_cost_matching() {
        let d = m(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let u = MassVector::uniform(2);
        let p = solve_exact_ot(&d, &u, &u).unwrap();
        assert_eq!(p.cost, 0.0);
        assert!((p.plan[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((p.plan[(1, 1)] - 0.5).abs() < 1e-15);
        assert_eq!(p.plan[(0, 1)], 0.0);
    }

    #[test]
    fn forced_plan() {
        let d = m(&[vec![2.0, 4.0]]);
        let p = solve_exact_ot(&d, &MassVector::uniform(1), &MassVector::uniform(2)).unwrap();
        assert_eq!(p.plan.as_slice(), &[0.5, 0.5]);
        assert!((p.cost - 3.0).abs() < 1e-15);
    }

    #[test]
    fn mass_mismatch_is_an_error() {
        let d = Matrix::zeros(2, 2);
        let err = solve_transport(&d, &[0.5, 0.5], &[0.5, 0.6]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleMarginals { .. }));
    }

    #[test]
    fn mass_vector_validation() {
        assert!(MassVector::new(vec![0.5, 0.6]).is_err());
        assert!(MassVector::new(vec![1.5, -0.5]).is_err());
        assert!(MassVector::new(vec![]).is_err());
        assert!(MassVector::new(vec![0.25; 4]).is_ok());
    }

    #[test]
    fn degenerate_masses_are_dropped() {
        let mut rng = SeededRng::new(11);
        let d = rng.uniform_matrix(3, 3);
        let a = [0.5, 1e-14, 0.5 - 1e-14];
        let b = [1.0 / 3.0; 3];
        let p = solve_transport(&d, &a, &b).unwrap();
        assert!(p.plan.row(1).iter().all(|v| *v == 0.0));
        assert!(p.marginal_violation(&a, &b) < 1e-6);
    }

    #[test]
    fn basic_solution_sparsity() {
        let mut rng = SeededRng::new(5);
        for n in 2..9 {
            let mm = n + 3;
            let d = rng.uniform_matrix(n, mm);
            let p = solve_exact_ot(&d, &MassVector::uniform(n), &MassVector::uniform(mm)).unwrap();
            assert!(p.nonzeros() <= n + mm - 1);
            assert!(p.marginal_violation(&vec![1.0 / n as f64; n], &vec![1.0 / mm as f64; mm]) < 1e-12);
        }
    }

    #[test]
    fn brute_force_small_cases() {
        let a = brute_force_assignment(&m(&[vec![0.0, 9.0], vec![9.0, 0.0]])).unwrap();
        assert_eq!(a.perm, vec![0, 1]);
        assert_eq!(a.cost, 0.0);
        let a = brute_force_assignment(&m(&[vec![5.0]])).unwrap();
        assert_eq!((a.perm, a.cost), (vec![0], 5.0));
        // All-equal costs: identity is the lexicographically smallest tie.
        let a = brute_force_assignment(&Matrix::filled(4, 4, 1.0)).unwrap();
        assert_eq!(a.perm, vec![0, 1, 2, 3]);
    }

    #[test]
    fn brute_force_guard() {
        assert!(matches!(
            brute_force_assignment(&Matrix::zeros(9, 9)),
            Err(Error::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn exact_matches_brute_force_4x4() {
        let mut rng = SeededRng::new(99);
        for _ in 0..20 {
            let d = rng.uniform_matrix(4, 4);
            let u = MassVector::uniform(4);
            let p = solve_exact_ot(&d, &u, &u).unwrap();
            let bf = brute_force_assignment(&d).unwrap();
            assert!((p.cost * 4.0 - bf.cost).abs() < 1e-10);
        }
    }
}
