//! Exact discrete optimal transport and the budgeted linear oracle.
//!
//! [`wasserstein_distance`] runs a transportation simplex (MODI duals) on the
//! flattened `(x, y)` points. Infinite costs never enter the basis by pivoting;
//! the problem is split into the connected components of the finite-cost
//! bipartite graph, so label-preserving costs decompose per label.
//!
//! [`constrained_linear_oracle`] maximizes a linear gain over couplings that
//! start at a fixed source distribution and spend at most `epsilon` in
//! expected cost. It is the vertex oracle behind the Frank-Wolfe solver.

use crate::distribution::{GroundCost, JointDistribution};
use crate::error::{Error, Result};

/// Transport plan between two flattened point sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    sources: usize,
    targets: usize,
    plan: Vec<f64>,
}

impl Coupling {
    pub fn new(sources: usize, targets: usize, plan: Vec<f64>) -> Self {
        assert_eq!(plan.len(), sources * targets, "plan shape");
        Self {
            sources,
            targets,
            plan,
        }
    }

    pub fn sources(&self) -> usize {
        self.sources
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.plan[a * self.targets + b]
    }

    pub fn plan(&self) -> &[f64] {
        &self.plan
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.targets).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.targets];
        for row in self.plan.chunks(self.targets) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// `Σ plan · cost` over the cells that carry mass.
    pub fn cost(&self, cost: &GroundCost) -> f64 {
        let mut total = 0.0;
        for a in 0..self.sources {
            for b in 0..self.targets {
                let g = self.get(a, b);
                if g > 0.0 {
                    total += g * cost.between(a, b);
                }
            }
        }
        total
    }
}

/// Kantorovich potentials: `phi[a] + psi[b] <= d(a, b)` on finite pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl DualPotentials {
    /// Gauge shift `(phi + c, psi - c)`.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            phi: self.phi.iter().map(|p| p + c).collect(),
            psi: self.psi.iter().map(|p| p - c).collect(),
        }
    }
}

/// Result of [`wasserstein_distance`].
#[derive(Debug, Clone)]
pub struct Transport {
    pub value: f64,
    pub coupling: Coupling,
    pub duals: DualPotentials,
    /// Some basic cell of the final basis carries no flow, so the optimal
    /// potentials are not unique beyond the per-component gauge.
    pub degenerate: bool,
    /// Connected components of the finite-cost graph that contain points.
    pub components: Vec<Component>,
}

/// One block of a decomposed transport problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

/// `W_d(mu, nu)` with an optimal plan and gauge-fixed potentials.
///
/// `phi` lives on the points of `mu`, `psi` on the points of `nu`; in every
/// component `phi` vanishes at the first source point that carries mass.
pub fn wasserstein_distance(
    mu: &JointDistribution,
    nu: &JointDistribution,
    cost: &GroundCost,
) -> Result<Transport> {
    if mu.nx() != nu.nx() || mu.ny() != nu.ny() || cost.nx() != mu.nx() || cost.ny() != mu.ny() {
        return Err(Error::DimensionMismatch(
            "transport needs both joints and the cost on one alphabet".into(),
        ));
    }
    let n = mu.len();
    solve_transport(mu.mass(), nu.mass(), cost.matrix(), n)
}

/// Transport between arbitrary mass vectors under an `m × n` cost matrix.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &[f64], n: usize) -> Result<Transport> {
    let m = supply.len();
    assert_eq!(demand.len(), n);
    assert_eq!(cost.len(), m * n);

    let components = finite_components(m, n, cost);
    let mut plan = vec![0.0; m * n];
    let mut phi = vec![0.0; m];
    let mut psi = vec![0.0; n];
    let mut degenerate = false;

    for comp in &components {
        let s: Vec<f64> = comp.sources.iter().map(|&i| supply[i]).collect();
        let d: Vec<f64> = comp.targets.iter().map(|&j| demand[j]).collect();
        let (ts, td): (f64, f64) = (s.iter().sum(), d.iter().sum());
        if (ts - td).abs() > 1e-9 {
            return Err(Error::Infeasible(format!(
                "finite-cost block holds {ts} source mass but {td} target mass"
            )));
        }
        if comp.sources.is_empty() || comp.targets.is_empty() {
            // Isolated points carry no mass; tighten their potential against the rest below.
            continue;
        }
        let local_cost: Vec<f64> = comp
            .sources
            .iter()
            .flat_map(|&i| comp.targets.iter().map(move |&j| cost[i * n + j]))
            .collect();
        let sol = TransportSimplex::solve(&s, &d, &local_cost)?;
        degenerate |= sol.degenerate;

        // Gauge: phi = 0 at the first source carrying mass.
        let anchor = s.iter().position(|&v| v > 0.0).unwrap_or(0);
        let shift = sol.u[anchor];
        for (k, &i) in comp.sources.iter().enumerate() {
            phi[i] = sol.u[k] - shift;
            for (l, &j) in comp.targets.iter().enumerate() {
                plan[i * n + j] = sol.flow[k * comp.targets.len() + l];
            }
        }
        for (l, &j) in comp.targets.iter().enumerate() {
            psi[j] = sol.v[l] + shift;
        }
    }

    // Isolated points have no finite edge at all; give them the value 0.
    let value = plan
        .iter()
        .zip(cost)
        .filter(|(g, _)| **g > 0.0)
        .map(|(g, c)| g * c)
        .sum();

    Ok(Transport {
        value,
        coupling: Coupling::new(m, n, plan),
        duals: DualPotentials { phi, psi },
        degenerate,
        components,
    })
}

/// `|primal - dual| + max(0, worst feasibility violation)` for a plan and
/// potentials; zero for an optimal pair.
pub fn verify_duality(coupling: &Coupling, duals: &DualPotentials, cost: &GroundCost) -> f64 {
    let (m, n) = (coupling.sources(), coupling.targets());
    let primal = coupling.cost(cost);
    let rows = coupling.row_sums();
    let cols = coupling.col_sums();
    let dual: f64 = duals.phi.iter().zip(&rows).map(|(p, r)| p * r).sum::<f64>()
        + duals.psi.iter().zip(&cols).map(|(p, c)| p * c).sum::<f64>();
    let mut violation: f64 = 0.0;
    for a in 0..m {
        for b in 0..n {
            let c = cost.between(a, b);
            if c.is_finite() {
                violation = violation.max(duals.phi[a] + duals.psi[b] - c);
            }
        }
    }
    (primal - dual).abs() + violation.max(0.0)
}

fn finite_components(m: usize, n: usize, cost: &[f64]) -> Vec<Component> {
    let mut parent: Vec<usize> = (0..m + n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..m {
        for j in 0..n {
            if cost[i * n + j].is_finite() {
                let (a, b) = (find(&mut parent, i), find(&mut parent, m + j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut roots: Vec<usize> = Vec::new();
    let mut comps: Vec<Component> = Vec::new();
    for node in 0..m + n {
        let r = find(&mut parent, node);
        let idx = match roots.iter().position(|&x| x == r) {
            Some(k) => k,
            None => {
                roots.push(r);
                comps.push(Component {
                    sources: Vec::new(),
                    targets: Vec::new(),
                });
                roots.len() - 1
            }
        };
        if node < m {
            comps[idx].sources.push(node);
        } else {
            comps[idx].targets.push(node - m);
        }
    }
    comps
}

struct SimplexSolution {
    flow: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    degenerate: bool,
}

/// Dense transportation simplex on one connected block.
struct TransportSimplex<'a> {
    m: usize,
    n: usize,
    cost: &'a [f64],
    /// Cost used for pivoting: `+inf` replaced by a large finite penalty.
    work_cost: Vec<f64>,
    flow: Vec<f64>,
    basic: Vec<bool>,
    basis: Vec<usize>,
    tol: f64,
}

const DEGENERATE_RUN_BEFORE_BLAND: usize = 50;

impl<'a> TransportSimplex<'a> {
    fn solve(supply: &[f64], demand: &[f64], cost: &'a [f64]) -> Result<SimplexSolution> {
        let (m, n) = (supply.len(), demand.len());
        let mut demand = demand.to_vec();
        // Absorb the (validated, sub-1e-9) imbalance so the tree system is consistent.
        let imbalance = supply.iter().sum::<f64>() - demand.iter().sum::<f64>();
        demand[n - 1] = (demand[n - 1] + imbalance).max(0.0);

        let max_finite = cost.iter().copied().filter(|c| c.is_finite()).fold(0.0, f64::max);
        let penalty = (1.0 + max_finite) * 1e6;
        let work_cost: Vec<f64> = cost.iter().map(|&c| if c.is_finite() { c } else { penalty }).collect();

        let mut simplex = TransportSimplex {
            m,
            n,
            cost,
            work_cost,
            flow: vec![0.0; m * n],
            basic: vec![false; m * n],
            basis: Vec::with_capacity(m + n - 1),
            tol: 1e-12 * (1.0 + max_finite),
        };

        let cap = 50 * m * n + 1000;
        simplex.initial_basis(supply, &demand);
        let (u, v) = match simplex.pivot_until_optimal(cap) {
            Some(duals) => duals,
            None => {
                // Cycling fallback: perturb the supplies, solve, then re-evaluate
                // the final basis against the true masses.
                let scale = supply.iter().chain(&demand).copied().filter(|&s| s > 0.0).fold(1.0, f64::min);
                let eps = 1e-9 * scale;
                let mut ps = supply.to_vec();
                for (i, s) in ps.iter_mut().enumerate() {
                    *s += eps * (i + 1) as f64;
                }
                let mut pd = demand.clone();
                pd[n - 1] += eps * (m * (m + 1) / 2) as f64;
                simplex.flow.iter_mut().for_each(|f| *f = 0.0);
                simplex.basic.iter_mut().for_each(|b| *b = false);
                simplex.basis.clear();
                simplex.initial_basis(&ps, &pd);
                let duals = simplex.pivot_until_optimal(cap).ok_or(Error::NumericalDegeneracy)?;
                simplex.flow = simplex.tree_flows(supply, &demand);
                if simplex.flow.iter().any(|&f| f < -1e-9) {
                    return Err(Error::NumericalDegeneracy);
                }
                simplex.flow.iter_mut().for_each(|f| *f = f.max(0.0));
                duals
            }
        };

        for &cell in &simplex.basis {
            if !simplex.cost[cell].is_finite() && simplex.flow[cell] > 1e-12 {
                return Err(Error::Infeasible(
                    "no finite-cost coupling between the two distributions".into(),
                ));
            }
        }
        let degenerate = simplex.basis.iter().any(|&cell| simplex.flow[cell] <= 1e-13);
        // Infinite cells carry no flow; drop them from the plan entirely.
        for (f, c) in simplex.flow.iter_mut().zip(simplex.cost) {
            if !c.is_finite() {
                *f = 0.0;
            }
        }
        Ok(SimplexSolution {
            flow: simplex.flow,
            u,
            v,
            degenerate,
        })
    }

    /// Least-cost rule restricted to finite cells while possible. Eliminating
    /// exactly one line per allocation yields a spanning tree of `m + n - 1` cells.
    fn initial_basis(&mut self, supply: &[f64], demand: &[f64]) {
        let (m, n) = (self.m, self.n);
        let mut rs = supply.to_vec();
        let mut cd = demand.to_vec();
        let mut row_on = vec![true; m];
        let mut col_on = vec![true; n];
        let (mut rows_left, mut cols_left) = (m, n);
        while rows_left > 0 && cols_left > 0 {
            let mut best: Option<(bool, f64, usize)> = None;
            for i in (0..m).filter(|&i| row_on[i]) {
                for j in (0..n).filter(|&j| col_on[j]) {
                    let cell = i * n + j;
                    let key = (!self.cost[cell].is_finite(), self.work_cost[cell], cell);
                    let better = match best {
                        None => true,
                        Some((inf, c, _)) => (key.0, key.1) < (inf, c),
                    };
                    if better {
                        best = Some(key);
                    }
                }
            }
            let cell = best.expect("active rows and columns remain").2;
            let (i, j) = (cell / n, cell % n);
            let x = rs[i].min(cd[j]).max(0.0);
            self.flow[cell] = x;
            self.basic[cell] = true;
            self.basis.push(cell);
            rs[i] -= x;
            cd[j] -= x;
            if rows_left == 1 && cols_left == 1 {
                break;
            }
            let drop_row = if rows_left == 1 {
                false
            } else if cols_left == 1 {
                true
            } else {
                rs[i] <= cd[j]
            };
            if drop_row {
                row_on[i] = false;
                rows_left -= 1;
            } else {
                col_on[j] = false;
                cols_left -= 1;
            }
        }
        debug_assert_eq!(self.basis.len(), m + n - 1);
    }

    fn adjacency(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let mut rows = vec![Vec::new(); self.m];
        let mut cols = vec![Vec::new(); self.n];
        for &cell in &self.basis {
            rows[cell / self.n].push(cell % self.n);
            cols[cell % self.n].push(cell / self.n);
        }
        (rows, cols)
    }

    fn duals(&self) -> (Vec<f64>, Vec<f64>) {
        let (rows, cols) = self.adjacency();
        let mut u = vec![f64::NAN; self.m];
        let mut v = vec![f64::NAN; self.n];
        u[0] = 0.0;
        // Nodes: rows are 0..m, columns m..m+n.
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            if node < self.m {
                for &j in &rows[node] {
                    if v[j].is_nan() {
                        v[j] = self.work_cost[node * self.n + j] - u[node];
                        stack.push(self.m + j);
                    }
                }
            } else {
                let j = node - self.m;
                for &i in &cols[j] {
                    if u[i].is_nan() {
                        u[i] = self.work_cost[i * self.n + j] - v[j];
                        stack.push(i);
                    }
                }
            }
        }
        (u, v)
    }

    /// Basis-tree path from row `i` to column `j` as a list of cells.
    fn tree_path(&self, i: usize, j: usize) -> Vec<usize> {
        let (rows, cols) = self.adjacency();
        let total = self.m + self.n;
        let mut prev = vec![usize::MAX; total];
        let mut seen = vec![false; total];
        seen[i] = true;
        let mut queue = std::collections::VecDeque::from([i]);
        let target = self.m + j;
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            let neighbours: Vec<usize> = if node < self.m {
                rows[node].iter().map(|&c| self.m + c).collect()
            } else {
                cols[node - self.m].clone()
            };
            for next in neighbours {
                if !seen[next] {
                    seen[next] = true;
                    prev[next] = node;
                    queue.push_back(next);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = target;
        while node != i {
            let p = prev[node];
            let cell = if node >= self.m {
                p * self.n + (node - self.m)
            } else {
                node * self.n + (p - self.m)
            };
            cells.push(cell);
            node = p;
        }
        cells.reverse();
        cells
    }

    /// Returns the optimal duals, or `None` when the iteration cap is hit.
    fn pivot_until_optimal(&mut self, cap: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut bland = false;
        let mut degenerate_run = 0usize;
        for _ in 0..cap {
            let (u, v) = self.duals();
            let mut entering: Option<(usize, f64)> = None;
            for cell in 0..self.m * self.n {
                if self.basic[cell] || !self.cost[cell].is_finite() {
                    continue;
                }
                let rc = self.work_cost[cell] - u[cell / self.n] - v[cell % self.n];
                if rc < -self.tol {
                    if bland {
                        entering = Some((cell, rc));
                        break;
                    }
                    if entering.map_or(true, |(_, best)| rc < best) {
                        entering = Some((cell, rc));
                    }
                }
            }
            let Some((enter, _)) = entering else {
                return Some((u, v));
            };
            let (i, j) = (enter / self.n, enter % self.n);
            let path = self.tree_path(i, j);
            // Path cells alternate -, +, -, ... starting at row i; the last is -.
            let mut theta = f64::INFINITY;
            let mut leave = usize::MAX;
            for (k, &cell) in path.iter().enumerate() {
                if k % 2 == 0 {
                    let f = self.flow[cell];
                    if f < theta || (bland && f == theta && cell < leave) {
                        theta = f;
                        leave = cell;
                    }
                }
            }
            for (k, &cell) in path.iter().enumerate() {
                if k % 2 == 0 {
                    self.flow[cell] -= theta;
                } else {
                    self.flow[cell] += theta;
                }
            }
            self.flow[enter] = theta;
            self.flow[leave] = 0.0;
            self.basic[leave] = false;
            self.basic[enter] = true;
            let pos = self.basis.iter().position(|&c| c == leave).expect("leaving cell is basic");
            self.basis[pos] = enter;

            if theta <= 0.0 {
                degenerate_run += 1;
                if degenerate_run >= DEGENERATE_RUN_BEFORE_BLAND {
                    bland = true;
                }
            } else {
                degenerate_run = 0;
            }
        }
        None
    }

    /// Flows of the current basis tree for the given masses (leaf peeling).
    fn tree_flows(&self, supply: &[f64], demand: &[f64]) -> Vec<f64> {
        let (m, n) = (self.m, self.n);
        let mut rem: Vec<f64> = supply.iter().chain(demand).copied().collect();
        let mut degree = vec![0usize; m + n];
        for &cell in &self.basis {
            degree[cell / n] += 1;
            degree[m + cell % n] += 1;
        }
        let mut used = vec![false; self.basis.len()];
        let mut flow = vec![0.0; m * n];
        for _ in 0..self.basis.len() {
            let Some(k) = (0..self.basis.len()).find(|&k| {
                !used[k] && {
                    let cell = self.basis[k];
                    degree[cell / n] == 1 || degree[m + cell % n] == 1
                }
            }) else {
                break;
            };
            used[k] = true;
            let cell = self.basis[k];
            let (r, c) = (cell / n, m + cell % n);
            let f = if degree[r] == 1 { rem[r] } else { rem[c] };
            flow[cell] = f;
            rem[r] -= f;
            rem[c] -= f;
            degree[r] -= 1;
            degree[c] -= 1;
        }
        flow
    }
}

/// Budgeted linear maximization over couplings leaving `mu`.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub coupling: Coupling,
    /// Shadow price of the distortion budget.
    pub multiplier: f64,
    pub objective: f64,
    pub achieved_distortion: f64,
}

impl OracleResult {
    /// Target marginal of the coupling.
    pub fn target(&self) -> Vec<f64> {
        self.coupling.col_sums()
    }
}

/// Finds `γ` maximizing `Σ γ(a, b) gain(b)` with row sums `mu`, `γ >= 0` and
/// `Σ γ · cost <= epsilon`.
///
/// For a multiplier `λ` every source picks `argmax_b gain(b) - λ cost(a, b)`
/// (ties toward the cheaper, then lower-index target). The smallest `λ` whose
/// selection fits the budget is bracketed by bisection; the two bracketing
/// selections are then merged row by row so the budget binds, leaving at most
/// one source row split between two targets.
pub fn constrained_linear_oracle(
    mu: &JointDistribution,
    cost: &GroundCost,
    epsilon: f64,
    gain: &[f64],
) -> Result<OracleResult> {
    let n = mu.len();
    if cost.num_points() != n || gain.len() != n {
        return Err(Error::DimensionMismatch("oracle inputs disagree on the point count".into()));
    }
    if !(epsilon >= 0.0) {
        return Err(crate::error::invalid("epsilon", format!("must be >= 0, got {epsilon}")));
    }
    let oracle = BudgetOracle::new(mu.mass(), cost, gain, |_, _| true)?;
    oracle.solve(epsilon)
}

/// Shared machinery for the budgeted oracle; `allowed` restricts the targets
/// each source may use on top of finiteness.
pub(crate) struct BudgetOracle<'a> {
    mass: &'a [f64],
    cost: &'a GroundCost,
    gain: &'a [f64],
    candidates: Vec<Vec<usize>>,
}

impl<'a> BudgetOracle<'a> {
    pub(crate) fn new(
        mass: &'a [f64],
        cost: &'a GroundCost,
        gain: &'a [f64],
        allowed: impl Fn(usize, usize) -> bool,
    ) -> Result<Self> {
        let n = mass.len();
        let mut candidates = Vec::with_capacity(n);
        for a in 0..n {
            let c: Vec<usize> = (0..n)
                .filter(|&b| cost.between(a, b).is_finite() && allowed(a, b))
                .collect();
            if c.is_empty() && mass[a] > 0.0 {
                return Err(Error::EmptyFeasible(a));
            }
            candidates.push(c);
        }
        Ok(Self {
            mass,
            cost,
            gain,
            candidates,
        })
    }

    fn choose(&self, a: usize, lambda: f64) -> usize {
        let mut best = usize::MAX;
        let mut best_val = f64::NEG_INFINITY;
        let mut best_cost = f64::INFINITY;
        for &b in &self.candidates[a] {
            let c = self.cost.between(a, b);
            let val = self.gain[b] - lambda * c;
            let tie = 1e-14 * (1.0 + val.abs());
            if val > best_val + tie || ((val - best_val).abs() <= tie && c < best_cost) {
                best = b;
                best_val = val;
                best_cost = c;
            }
        }
        best
    }

    fn select(&self, lambda: f64) -> Vec<usize> {
        (0..self.mass.len())
            .map(|a| if self.mass[a] > 0.0 { self.choose(a, lambda) } else { a })
            .collect()
    }

    fn selection_cost(&self, sel: &[usize]) -> f64 {
        sel.iter()
            .enumerate()
            .filter(|(a, _)| self.mass[*a] > 0.0)
            .map(|(a, &b)| self.mass[a] * self.cost.between(a, b))
            .sum()
    }

    fn dual_bound(&self, lambda: f64, epsilon: f64) -> f64 {
        let mut total = lambda * epsilon;
        for a in (0..self.mass.len()).filter(|&a| self.mass[a] > 0.0) {
            let best = self.candidates[a]
                .iter()
                .map(|&b| self.gain[b] - lambda * self.cost.between(a, b))
                .fold(f64::NEG_INFINITY, f64::max);
            total += self.mass[a] * best;
        }
        total
    }

    /// Per-source argmax over the candidate sets; the budget plays no role.
    pub(crate) fn unconstrained(&self) -> OracleResult {
        let sel = self.select(0.0);
        self.assemble(&sel, None, 0.0)
    }

    pub(crate) fn solve(&self, epsilon: f64) -> Result<OracleResult> {
        let fits = |c: f64| c <= epsilon * (1.0 + 1e-12) + 1e-15;
        let sel0 = self.select(0.0);
        if fits(self.selection_cost(&sel0)) {
            return Ok(self.assemble(&sel0, None, 0.0));
        }

        let mut hi: f64 = 1.0;
        for a in (0..self.mass.len()).filter(|&a| self.mass[a] > 0.0) {
            for &b in &self.candidates[a] {
                let c = self.cost.between(a, b);
                if c > 0.0 {
                    hi = hi.max((self.gain[b] - self.gain[a]) / c);
                }
            }
        }
        hi = 2.0 * hi + 1.0;
        while !fits(self.selection_cost(&self.select(hi))) {
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(Error::Infeasible("no selection meets the distortion budget".into()));
            }
        }
        let mut lo = 0.0;
        for _ in 0..400 {
            if hi - lo <= 1e-12 * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if fits(self.selection_cost(&self.select(mid))) {
                hi = mid;
            } else {
                lo = mid;
            }
        }

        let sel_hi = self.select(hi);
        let sel_lo = self.select(lo);
        // Switch rows from the cheap selection to the expensive one until the budget binds.
        let mut spent = self.selection_cost(&sel_hi);
        let mut sel = sel_hi.clone();
        let mut split = None;
        for a in 0..self.mass.len() {
            if self.mass[a] <= 0.0 || sel_lo[a] == sel_hi[a] {
                continue;
            }
            let delta = self.mass[a] * (self.cost.between(a, sel_lo[a]) - self.cost.between(a, sel_hi[a]));
            if delta <= 0.0 {
                continue;
            }
            if spent + delta <= epsilon {
                sel[a] = sel_lo[a];
                spent += delta;
            } else {
                let theta = ((epsilon - spent) / delta).clamp(0.0, 1.0);
                split = Some((a, sel_lo[a], theta));
                break;
            }
        }

        let dual_hi = self.dual_bound(hi, epsilon);
        let dual_lo = self.dual_bound(lo, epsilon);
        let multiplier = if dual_lo < dual_hi { lo } else { hi };
        let result = self.assemble(&sel, split, multiplier);
        let gap = dual_hi.min(dual_lo) - result.objective;
        if gap > 1e-9 * (1.0 + result.objective.abs()) {
            return Err(Error::BisectionStall { lambda: hi, gap });
        }
        Ok(result)
    }

    fn assemble(&self, sel: &[usize], split: Option<(usize, usize, f64)>, multiplier: f64) -> OracleResult {
        let n = self.mass.len();
        let mut plan = vec![0.0; n * n];
        for (a, &b) in sel.iter().enumerate() {
            plan[a * n + b] += self.mass[a];
        }
        if let Some((a, b, theta)) = split {
            let moved = self.mass[a] * theta;
            plan[a * n + sel[a]] -= moved;
            plan[a * n + b] += moved;
        }
        let coupling = Coupling::new(n, n, plan);
        let mut objective = 0.0;
        let mut achieved = 0.0;
        for a in 0..n {
            for b in 0..n {
                let g = coupling.get(a, b);
                if g > 0.0 {
                    objective += g * self.gain[b];
                    achieved += g * self.cost.between(a, b);
                }
            }
        }
        OracleResult {
            coupling,
            multiplier,
            objective,
            achieved_distortion: achieved,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::CostKind;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn random_joint(rng: &mut Pcg64, nx: usize, ny: usize, zeros: bool) -> JointDistribution {
        let w: Vec<f64> = (0..nx * ny)
            .map(|_| if zeros && rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.01..1.0) })
            .collect();
        if w.iter().all(|&v| v == 0.0) {
            return JointDistribution::uniform(nx, ny);
        }
        JointDistribution::normalized(nx, ny, w).unwrap()
    }

    #[test]
    fn identical_distributions_cost_nothing() {
        let mut rng = Pcg64::seed_from_u64(3);
        let mu = random_joint(&mut rng, 3, 2, true);
        let cost = GroundCost::from_kind(CostKind::AbsoluteDifference, 3, 2, false).unwrap();
        let t = wasserstein_distance(&mu, &mu, &cost).unwrap();
        assert!(t.value.abs() < 1e-15);
        for a in 0..6 {
            for b in 0..6 {
                if a != b {
                    assert_eq!(t.coupling.get(a, b), 0.0);
                }
            }
        }
        assert!(verify_duality(&t.coupling, &t.duals, &cost) < 1e-12);
    }

    #[test]
    fn point_masses() {
        let cost = GroundCost::from_kind(CostKind::SquaredDifference, 4, 2, false).unwrap();
        let a = JointDistribution::point_mass(4, 2, 0, 1);
        let b = JointDistribution::point_mass(4, 2, 3, 0);
        let t = wasserstein_distance(&a, &b, &cost).unwrap();
        assert_eq!(t.value, 9.0 + 1.0);
    }

    #[test]
    fn split_mass_to_the_middle() {
        let cost = GroundCost::from_kind(CostKind::AbsoluteDifference, 3, 1, true).unwrap();
        let mu = JointDistribution::new(3, 1, vec![0.5, 0.0, 0.5]).unwrap();
        let nu = JointDistribution::new(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
        let t = wasserstein_distance(&mu, &nu, &cost).unwrap();
        assert!((t.value - 1.0).abs() < 1e-15);
        assert!(verify_duality(&t.coupling, &t.duals, &cost) < 1e-12);
    }

    #[test]
    fn label_preserving_mismatch_is_infeasible() {
        let cost = GroundCost::from_kind(CostKind::AbsoluteDifference, 2, 2, true).unwrap();
        let mu = JointDistribution::new(2, 2, vec![0.5, 0.0, 0.5, 0.0]).unwrap();
        let nu = JointDistribution::new(2, 2, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!(matches!(wasserstein_distance(&mu, &nu, &cost), Err(Error::Infeasible(_))));
    }

    #[test]
    fn explicit_infinite_entries_without_finite_route() {
        // Connected finite graph, but the only finite edge out of source 0
        // lands on a target with too little demand.
        let inf = f64::INFINITY;
        let cost = GroundCost::explicit(1, 2, vec![0.0, inf, 1.0, 0.0]).unwrap();
        let mu = JointDistribution::new(1, 2, vec![0.5, 0.5]).unwrap();
        let nu = JointDistribution::new(1, 2, vec![0.2, 0.8]).unwrap();
        assert!(matches!(wasserstein_distance(&mu, &nu, &cost), Err(Error::Infeasible(_))));
        let t = wasserstein_distance(&nu, &mu, &cost).unwrap();
        assert!((t.value - 0.3).abs() < 1e-15);
    }

    #[test]
    fn duality_gauge_and_corruption() {
        let mut rng = Pcg64::seed_from_u64(11);
        let cost = GroundCost::from_kind(CostKind::AbsoluteDifference, 3, 2, false).unwrap();
        let mu = random_joint(&mut rng, 3, 2, false);
        let nu = random_joint(&mut rng, 3, 2, false);
        let t = wasserstein_distance(&mu, &nu, &cost).unwrap();
        let gap = verify_duality(&t.coupling, &t.duals, &cost);
        assert!(gap <= 1e-8);
        let shifted = verify_duality(&t.coupling, &t.duals.shifted(3.7), &cost);
        assert!((shifted - gap).abs() < 1e-12);

        let (a, b) = (0..36).map(|c| (c / 6, c % 6)).find(|&(a, b)| t.coupling.get(a, b) > 0.0).unwrap();
        let mut bad = t.duals.clone();
        bad.psi[b] += 1.0;
        let _ = a;
        assert!(verify_duality(&t.coupling, &bad, &cost) >= 1.0 - 1e-8);
    }

    #[test]
    fn gauge_fixes_first_support_point() {
        let cost = GroundCost::from_kind(CostKind::SquaredDifference, 3, 2, true).unwrap();
        let mu = JointDistribution::new(3, 2, vec![0.0, 0.2, 0.3, 0.1, 0.2, 0.2]).unwrap();
        let nu = JointDistribution::new(3, 2, vec![0.25, 0.0, 0.25, 0.3, 0.0, 0.2]).unwrap();
        let t = wasserstein_distance(&mu, &nu, &cost).unwrap();
        // Label 0 block: first source with mass is point (1, 0) = index 2.
        assert_eq!(t.duals.phi[2], 0.0);
        // Label 1 block: first source with mass is point (0, 1) = index 1.
        assert_eq!(t.duals.phi[1], 0.0);
        assert_eq!(t.components.len(), 2);
    }

    #[test]
    fn metric_axioms_on_random_instances() {
        let mut rng = Pcg64::seed_from_u64(5);
        let cost = GroundCost::from_kind(CostKind::AbsoluteDifference, 3, 3, false).unwrap();
        for _ in 0..200 {
            let a = random_joint(&mut rng, 3, 3, true);
            let b = random_joint(&mut rng, 3, 3, true);
            let c = random_joint(&mut rng, 3, 3, true);
            let ab = wasserstein_distance(&a, &b, &cost).unwrap().value;
            let ba = wasserstein_distance(&b, &a, &cost).unwrap().value;
            let bc = wasserstein_distance(&b, &c, &cost).unwrap().value;
            let ac = wasserstein_distance(&a, &c, &cost).unwrap().value;
            assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
            assert!(ac <= ab + bc + 1e-8);
            assert!(wasserstein_distance(&a, &a, &cost).unwrap().value.abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_problems_terminate() {
        // Many equal masses and ties in the cost make every basis degenerate.
        let cost = GroundCost::from_kind(CostKind::Hamming, 4, 4, false).unwrap();
        let mu = JointDistribution::uniform(4, 4);
        let mut w = vec![1.0; 16];
        w[0] = 0.0;
        w[5] = 2.0;
        let nu = JointDistribution::normalized(4, 4, w).unwrap();
        let t = wasserstein_distance(&mu, &nu, &cost).unwrap();
        assert!(verify_duality(&t.coupling, &t.duals, &cost) < 1e-9);
        assert!((t.value - 2.0 / 16.0).abs() < 1e-12);
    }

    fn toy_setup() -> (JointDistribution, GroundCost) {
        let mut m = vec![0.0; 25];
        for k in [0, 2, 4] {
            m[k * 5 + k] = 1.0 / 3.0;
        }
        (
            JointDistribution::new(5, 5, m).unwrap(),
            GroundCost::from_kind(CostKind::AbsoluteDifference, 5, 5, true).unwrap(),
        )
    }

    #[test]
    fn oracle_slack_budget_is_unconstrained() {
        let mut rng = Pcg64::seed_from_u64(2);
        let mu = random_joint(&mut rng, 3, 2, false);
        let cost = GroundCost::from_kind(CostKind::AbsoluteDifference, 3, 2, true).unwrap();
        let gain: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = constrained_linear_oracle(&mu, &cost, cost.max_finite(), &gain).unwrap();
        assert_eq!(r.multiplier, 0.0);
        for a in 0..6 {
            let y = a % 2;
            let best = (0..3).map(|z| gain[z * 2 + y]).fold(f64::NEG_INFINITY, f64::max);
            let row: f64 = (0..6).map(|b| r.coupling.get(a, b) * gain[b]).sum();
            assert!((row - mu.mass()[a] * best).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_zero_budget_is_identity() {
        let mut rng = Pcg64::seed_from_u64(4);
        let mu = random_joint(&mut rng, 3, 2, false);
        let cost = GroundCost::from_kind(CostKind::SquaredDifference, 3, 2, false).unwrap();
        let gain: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = constrained_linear_oracle(&mu, &cost, 0.0, &gain).unwrap();
        for a in 0..6 {
            assert!((r.coupling.get(a, a) - mu.mass()[a]).abs() < 1e-15);
        }
        let expected: f64 = mu.mass().iter().zip(&gain).map(|(m, g)| m * g).sum();
        assert!((r.objective - expected).abs() < 1e-14);
        assert!(r.achieved_distortion <= 1e-15);
    }

    #[test]
    fn oracle_on_toy_instance_moves_every_point_once() {
        let (mu, cost) = toy_setup();
        let clamp = 1e12f64.ln();
        let post = mu.posterior(crate::ZeroMassPolicy::Uniform);
        let gain: Vec<f64> = (0..25)
            .map(|p| {
                let (x, y) = (p / 5, p % 5);
                let q = if post.coverage[x] { post.rule.get(x, y) } else { 0.0 };
                if q > 0.0 { -q.ln() } else { clamp }
            })
            .collect();
        let r = constrained_linear_oracle(&mu, &cost, 1.0, &gain).unwrap();
        assert!((r.objective - clamp).abs() < 1e-12);
        assert!((r.achieved_distortion - 1.0).abs() < 1e-12);
        for k in [0, 2, 4] {
            let a = k * 5 + k;
            let moved: f64 = (0..5)
                .filter(|&z| (z as i64 - k as i64).abs() == 1)
                .map(|z| r.coupling.get(a, z * 5 + k))
                .sum();
            assert!((moved - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_has_one_split_row_and_monotone_objective() {
        let mut rng = Pcg64::seed_from_u64(9);
        let cost = GroundCost::from_kind(CostKind::SquaredDifference, 4, 3, true).unwrap();
        for _ in 0..50 {
            let mu = random_joint(&mut rng, 4, 3, false);
            let gain: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..3.0)).collect();
            let mut last = f64::NEG_INFINITY;
            for k in 0..=20 {
                let eps = 0.1 * k as f64;
                let r = constrained_linear_oracle(&mu, &cost, eps, &gain).unwrap();
                assert!(r.objective >= last - 1e-12);
                last = r.objective;
                assert!(r.achieved_distortion <= eps + 1e-9);
                assert!(r.multiplier * (eps - r.achieved_distortion) <= 1e-8 * (1.0 + r.objective.abs()));
                let split_rows = (0..12)
                    .filter(|&a| (0..12).filter(|&b| r.coupling.get(a, b) > 0.0).count() > 1)
                    .count();
                assert!(split_rows <= 1);
                let rows = r.coupling.row_sums();
                for a in 0..12 {
                    assert!((rows[a] - mu.mass()[a]).abs() < 1e-15);
                }
            }
        }
    }
}
