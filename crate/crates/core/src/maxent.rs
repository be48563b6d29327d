//! Maximum conditional entropy over convex perturbation sets.
//!
//! The feasible joints are target marginals of couplings that leave the clean
//! distribution `μ`; every constraint kind is a polytope of such couplings, so
//! Frank-Wolfe only needs a linear oracle over couplings. The solver keeps the
//! iterate as a convex combination of oracle vertices and takes pairwise steps
//! (mass moves from the worst active vertex to the new one) with an exact
//! line search on the concave objective.

use crate::distribution::{Channel, GroundCost, JointDistribution, SUPPORT_THRESHOLD};
use crate::error::{invalid, Error, Result};
use crate::transport::{wasserstein_distance, BudgetOracle, Coupling, OracleResult, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// `{ν : W_d(μ, ν) <= ε}`.
    WassersteinBall,
    /// Channels `P(Z|X,Y)` with `E[d(X, Z)] <= ε`.
    ExpectedDistortionChannel,
    /// Channels with `d(X, Z) <= ε` almost surely.
    MaxDistortionChannel,
}

impl ConstraintKind {
    pub fn is_channel(self) -> bool {
        !matches!(self, ConstraintKind::WassersteinBall)
    }
}

/// A convex set of joints around the clean distribution.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    pub epsilon: f64,
    pub cost: GroundCost,
    pub reference: JointDistribution,
}

impl ConstraintSpec {
    pub fn new(
        kind: ConstraintKind,
        epsilon: f64,
        cost: GroundCost,
        reference: JointDistribution,
    ) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(invalid("constraint", format!("epsilon must be >= 0, got {epsilon}")));
        }
        if cost.nx() != reference.nx() || cost.ny() != reference.ny() {
            return Err(Error::DimensionMismatch("cost and reference alphabets differ".into()));
        }
        if kind.is_channel() && !cost.label_preserving() && reference.ny() > 1 {
            return Err(invalid(
                "constraint",
                "channel constraints need a label-preserving cost",
            ));
        }
        Ok(Self {
            kind,
            epsilon,
            cost,
            reference,
        })
    }

    /// Same set with a different budget.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.kind, epsilon, self.cost.clone(), self.reference.clone())
    }

    fn allowed(&self, a: usize, b: usize) -> bool {
        match self.kind {
            ConstraintKind::MaxDistortionChannel => {
                self.cost.between(a, b) <= self.epsilon * (1.0 + 1e-12) + 1e-15
            }
            _ => true,
        }
    }

    /// Maximizes `Σ ν · gain` over the set; the returned coupling starts at `μ`.
    pub fn linear_oracle(&self, gain: &[f64]) -> Result<OracleResult> {
        let oracle = BudgetOracle::new(self.reference.mass(), &self.cost, gain, |a, b| {
            self.allowed(a, b)
        })?;
        match self.kind {
            ConstraintKind::MaxDistortionChannel => Ok(oracle.unconstrained()),
            _ => oracle.solve(self.epsilon),
        }
    }

    /// A coupling in the relative interior of the set: every source spreads a
    /// share of its mass uniformly over the targets it may reach.
    fn spread_start(&self) -> Coupling {
        let n = self.reference.len();
        let mass = self.reference.mass();
        let mut spread = vec![0.0; n * n];
        let mut spread_cost = 0.0;
        for a in (0..n).filter(|&a| mass[a] > 0.0) {
            let targets: Vec<usize> = (0..n)
                .filter(|&b| self.cost.between(a, b).is_finite() && self.allowed(a, b))
                .collect();
            let share = mass[a] / targets.len() as f64;
            for b in targets {
                spread[a * n + b] = share;
                spread_cost += share * self.cost.between(a, b);
            }
        }
        let weight = match self.kind {
            ConstraintKind::MaxDistortionChannel => 1.0,
            _ if spread_cost <= 0.0 => 1.0,
            _ => (0.5 * self.epsilon / spread_cost).min(0.5),
        };
        let mut plan = vec![0.0; n * n];
        for a in 0..n {
            plan[a * n + a] = (1.0 - weight) * mass[a];
            for b in 0..n {
                plan[a * n + b] += weight * spread[a * n + b];
            }
        }
        Coupling::new(n, n, plan)
    }

    /// `reach[x][y]`: some clean mass with label `y` may be moved into row `x`.
    fn reachable_labels(&self) -> Vec<Vec<bool>> {
        let (nx, ny) = (self.reference.nx(), self.reference.ny());
        let n = nx * ny;
        let mass = self.reference.mass();
        let mut reach = vec![vec![false; ny]; nx];
        for a in (0..n).filter(|&a| mass[a] > 0.0) {
            for b in 0..n {
                let c = self.cost.between(a, b);
                let movable = c.is_finite()
                    && self.allowed(a, b)
                    && (self.epsilon > 0.0 || c == 0.0);
                if movable {
                    reach[b / ny][b % ny] = true;
                }
            }
        }
        reach
    }

    /// Label distribution standing in for the posterior of rows where `nu`
    /// has no mass: the label marginal of `nu` restricted to the labels that
    /// can reach the row (uniform if none can).
    ///
    /// `-ln` of it is a supergradient of the row's entropy at zero mass, and
    /// the one that is tight for the mass the adversary can actually bring.
    pub fn empty_row_prior(&self, nu: &JointDistribution) -> Vec<Vec<f64>> {
        empty_row_prior(&self.reachable_labels(), &nu.marginal_y())
    }

    /// Whether `nu` belongs to the set, up to `tol` on the budget.
    pub fn contains(&self, nu: &JointDistribution, tol: f64) -> Result<bool> {
        match self.kind {
            ConstraintKind::MaxDistortionChannel => {
                let n = self.reference.len();
                let reach: Vec<f64> = (0..n * n)
                    .map(|c| if self.allowed(c / n, c % n) { 0.0 } else { f64::INFINITY })
                    .collect();
                match crate::transport::solve_transport(self.reference.mass(), nu.mass(), &reach, n) {
                    Ok(_) => Ok(true),
                    Err(Error::Infeasible(_)) => Ok(false),
                    Err(e) => Err(e),
                }
            }
            _ => match wasserstein_distance(&self.reference, nu, &self.cost) {
                Ok(t) => Ok(t.value <= self.epsilon + tol),
                Err(Error::Infeasible(_)) => Ok(false),
                Err(e) => Err(e),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineSearch {
    /// Open-loop `2 / (t + 2)` steps, plain Frank-Wolfe directions.
    Harmonic,
    /// Exact line search (safeguarded Newton on the derivative) with pairwise directions.
    Golden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop once the Frank-Wolfe gap (nats) falls below this.
    pub fw_gap_tolerance: f64,
    /// Posterior floor used in the entropy gradient.
    pub gradient_clamp: f64,
    pub line_search: LineSearch,
    /// Recorded for reproducibility; the solvers themselves are deterministic.
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            fw_gap_tolerance: 1e-7,
            gradient_clamp: 1e-12,
            line_search: LineSearch::Golden,
            seed: 0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(invalid("solver options", "max_iterations must be positive"));
        }
        if !(self.fw_gap_tolerance > 0.0) {
            return Err(invalid("solver options", "fw_gap_tolerance must be positive"));
        }
        if !(self.gradient_clamp > 0.0 && self.gradient_clamp <= 1e-3) {
            return Err(invalid("solver options", "gradient_clamp must lie in (0, 1e-3]"));
        }
        Ok(())
    }
}

/// Outcome of [`max_conditional_entropy`].
#[derive(Debug, Clone)]
pub struct SolveReport {
    /// `H(Y|X)` of `nu_star`; a lower bound on the optimum.
    pub h_star: f64,
    pub nu_star: JointDistribution,
    /// Perturbation channel, for channel-kind constraints.
    pub channel: Option<Channel>,
    /// Coupling from the reference to `nu_star`.
    pub coupling: Coupling,
    /// The optimum lies in `[h_star, h_star + fw_gap]`.
    pub fw_gap: f64,
    pub iterations: usize,
    pub multiplier: f64,
    pub converged: bool,
    /// Label distribution certified for each row of `X`; on rows where
    /// `nu_star` has mass it is the posterior, elsewhere it is the
    /// supergradient choice behind `fw_gap`.
    pub row_rule: Vec<Vec<f64>>,
}

/// Ascent direction of `H(Y|X)`: `-ln ν(y|x)` with the posterior floored at `delta`.
///
/// Rows without mass read as floored everywhere.
pub fn entropy_gradient(nu: &JointDistribution, delta: f64) -> Vec<f64> {
    gradient_of(nu.mass(), nu.nx(), nu.ny(), delta)
}

fn gradient_of(mass: &[f64], nx: usize, ny: usize, delta: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(mass.len());
    for x in 0..nx {
        let row = &mass[x * ny..(x + 1) * ny];
        let px: f64 = row.iter().sum();
        let denom = px.max(delta);
        for &m in row {
            let post = (m.max(delta * px) / denom).max(delta);
            g.push(-post.ln());
        }
    }
    g
}

fn empty_row_prior(reach: &[Vec<bool>], label_marginal: &[f64]) -> Vec<Vec<f64>> {
    let ny = label_marginal.len();
    reach
        .iter()
        .map(|labels| {
            let total: f64 = (0..ny).filter(|&y| labels[y]).map(|y| label_marginal[y]).sum();
            if total > 0.0 {
                (0..ny)
                    .map(|y| if labels[y] { label_marginal[y] / total } else { 0.0 })
                    .collect()
            } else {
                vec![1.0 / ny as f64; ny]
            }
        })
        .collect()
}

/// Solver-side gradient: as [`entropy_gradient`], except rows with mass at
/// most `delta` use `prior` instead of their (undefined) posterior.
fn solver_gradient(mass: &[f64], ny: usize, delta: f64, prior: &[Vec<f64>]) -> Vec<f64> {
    let mut g = Vec::with_capacity(mass.len());
    for (x, row) in mass.chunks(ny).enumerate() {
        let px: f64 = row.iter().sum();
        if px <= delta {
            g.extend(prior[x].iter().map(|&p| -p.max(delta).ln()));
        } else {
            g.extend(row.iter().map(|&m| -(m.max(delta * px) / px).ln()));
        }
    }
    g
}

fn label_marginal(mass: &[f64], ny: usize) -> Vec<f64> {
    let mut out = vec![0.0; ny];
    for row in mass.chunks(ny) {
        for (o, &m) in out.iter_mut().zip(row) {
            *o += m;
        }
    }
    out
}


fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// First and second derivative of `H(Y|X)` at `nu + t·dir`.
///
/// Per row, `d/dt Σ m ln(p/m) = Σ d ln(p/m)` and the second derivative is
/// `dp²/p - Σ d²/m`; entries moving off zero have infinite slope.
fn entropy_slope(nu: &[f64], dir: &[f64], t: f64, ny: usize) -> (f64, f64) {
    let (mut slope, mut curv) = (0.0, 0.0);
    for (row, drow) in nu.chunks(ny).zip(dir.chunks(ny)) {
        let (mut p, mut dp) = (0.0, 0.0);
        for (&m, &d) in row.iter().zip(drow) {
            p += m + t * d;
            dp += d;
        }
        if p <= 0.0 {
            continue;
        }
        for (&m, &d) in row.iter().zip(drow) {
            if d == 0.0 {
                continue;
            }
            let m = m + t * d;
            if m <= 0.0 {
                slope += if d > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
                continue;
            }
            slope += d * (p / m).ln();
            curv -= d * d / m;
        }
        curv += dp * dp / p;
    }
    (slope, curv)
}

const SEARCH_ITERATIONS: usize = 64;

/// Maximizer on `[0, hi]` of a concave function given by its derivative and
/// curvature: Newton steps kept inside a shrinking bracket, bisection when
/// they leave it. Returns the bracket's left end, so the result never does
/// worse than 0.
fn newton_bracket(hi: f64, mut slope: impl FnMut(f64) -> (f64, f64)) -> f64 {
    let (s0, c0) = slope(0.0);
    if !(s0 > 0.0) {
        return 0.0;
    }
    if slope(hi).0 >= 0.0 {
        return hi;
    }
    let (mut lo, mut up) = (0.0, hi);
    let mut t = if s0.is_finite() && c0 < 0.0 { -s0 / c0 } else { 0.5 * hi };
    for _ in 0..SEARCH_ITERATIONS {
        if !(t > lo && t < up) {
            t = 0.5 * (lo + up);
        }
        let (s, c) = slope(t);
        if s > 0.0 {
            lo = t;
        } else if s < 0.0 {
            up = t;
        } else {
            return t;
        }
        if up - lo <= 1e-15 * hi.max(1e-300) {
            break;
        }
        let next = if s.is_finite() && c < 0.0 { t - s / c } else { f64::NAN };
        t = next;
    }
    lo
}

struct Vertex {
    weight: f64,
    plan: Vec<f64>,
    target: Vec<f64>,
    /// Linear penalty carried by the vertex (transport cost of its plan).
    lin: f64,
}

fn same_plan(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-15)
}

/// Iterate kept as a convex combination of oracle vertices; the objective
/// is `scale · H(Y|X) - lin`.
struct ActiveSet {
    vertices: Vec<Vertex>,
    nu: Vec<f64>,
    lin: f64,
    scale: f64,
    ny: usize,
    reach: Vec<Vec<bool>>,
    delta: f64,
    /// Refined supergradient choice for rows that are empty.
    pinned: Vec<Option<Vec<f64>>>,
}

impl ActiveSet {
    fn new(start: &Coupling, lin: f64, scale: f64, reach: Vec<Vec<bool>>, delta: f64) -> Self {
        let ny = reach[0].len();
        let nu = start.col_sums();
        Self {
            vertices: vec![Vertex {
                weight: 1.0,
                plan: start.plan().to_vec(),
                target: nu.clone(),
                lin,
            }],
            pinned: vec![None; reach.len()],
            nu,
            lin,
            scale,
            ny,
            reach,
            delta,
        }
    }

    fn prior(&self, nu: &[f64]) -> Vec<Vec<f64>> {
        let mut prior = empty_row_prior(&self.reach, &label_marginal(nu, self.ny));
        for (p, pin) in prior.iter_mut().zip(&self.pinned) {
            if let Some(pin) = pin {
                p.clone_from(pin);
            }
        }
        prior
    }

    fn gradient(&self, nu: &[f64]) -> Vec<f64> {
        solver_gradient(nu, self.ny, self.delta, &self.prior(nu))
    }

    fn empty_rows(&self) -> Vec<usize> {
        self.nu
            .chunks(self.ny)
            .enumerate()
            .filter(|(_, row)| row.iter().sum::<f64>() <= self.delta)
            .map(|(x, _)| x)
            .collect()
    }

    /// Posterior of each row, or the supergradient choice where the row is empty.
    fn row_rule(&self) -> Vec<Vec<f64>> {
        let prior = self.prior(&self.nu);
        self.nu
            .chunks(self.ny)
            .zip(prior)
            .map(|(row, p)| {
                let px: f64 = row.iter().sum();
                if px > self.delta {
                    row.iter().map(|m| m / px).collect()
                } else {
                    p
                }
            })
            .collect()
    }

    /// Adds an arbitrary feasible point (not necessarily an oracle vertex).
    fn insert_point(&mut self, plan: Vec<f64>, target: Vec<f64>, lin: f64) -> usize {
        self.vertices.push(Vertex {
            weight: 0.0,
            plan,
            target,
            lin,
        });
        self.vertices.len() - 1
    }

    fn insert(&mut self, plan: &Coupling, lin: f64) -> usize {
        if let Some(i) = self.vertices.iter().position(|v| same_plan(&v.plan, plan.plan())) {
            return i;
        }
        self.vertices.push(Vertex {
            weight: 0.0,
            plan: plan.plan().to_vec(),
            target: plan.col_sums(),
            lin,
        });
        self.vertices.len() - 1
    }

    fn value(&self, g: &[f64], v: &Vertex) -> f64 {
        self.scale * dot(g, &v.target) - v.lin
    }

    /// Linearized objective at the iterate.
    fn current(&self, g: &[f64]) -> f64 {
        self.scale * dot(g, &self.nu) - self.lin
    }

    /// Exact line search along `(dir, dlin)` on `[0, hi]`.
    fn search(&self, dir: &[f64], dlin: f64, hi: f64) -> f64 {
        newton_bracket(hi, |t| {
            let (s, c) = entropy_slope(&self.nu, dir, t, self.ny);
            (self.scale * s - dlin, self.scale * c)
        })
    }

    /// Moves weight from vertex `from` to vertex `to`; false if no ascent.
    fn pairwise(&mut self, to: usize, from: usize) -> bool {
        let dir: Vec<f64> = self.vertices[to]
            .target
            .iter()
            .zip(&self.vertices[from].target)
            .map(|(a, b)| a - b)
            .collect();
        let dlin = self.vertices[to].lin - self.vertices[from].lin;
        let max_step = self.vertices[from].weight;
        let tau = self.search(&dir, dlin, max_step);
        if tau <= 0.0 {
            return false;
        }
        self.lin += tau * dlin;
        self.vertices[from].weight = if tau >= max_step { 0.0 } else { max_step - tau };
        self.vertices[to].weight += tau;
        for (v, d) in self.nu.iter_mut().zip(&dir) {
            *v += tau * d;
        }
        true
    }

    /// Plain Frank-Wolfe step toward vertex `to`, with `tau` fixed or searched.
    fn toward(&mut self, to: usize, tau: Option<f64>) -> bool {
        let dir: Vec<f64> = self.vertices[to]
            .target
            .iter()
            .zip(&self.nu)
            .map(|(a, b)| a - b)
            .collect();
        let dlin = self.vertices[to].lin - self.lin;
        let tau = tau.unwrap_or_else(|| self.search(&dir, dlin, 1.0));
        if tau <= 0.0 {
            return false;
        }
        self.lin += tau * dlin;
        for v in self.vertices.iter_mut() {
            v.weight *= 1.0 - tau;
        }
        self.vertices[to].weight += tau;
        for (v, d) in self.nu.iter_mut().zip(&dir) {
            *v += tau * d;
        }
        true
    }

    /// Active vertices with the largest and smallest linear value under `g`.
    fn extremes(&self, g: &[f64]) -> (usize, usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        let mut worst = (0, f64::INFINITY);
        for (i, v) in self.vertices.iter().enumerate() {
            let val = self.value(g, v);
            if val > best.1 {
                best = (i, val);
            }
            if val < worst.1 {
                worst = (i, val);
            }
        }
        (best.0, worst.0, best.1 - worst.1)
    }

    fn prune(&mut self) {
        self.vertices.retain(|v| v.weight > 0.0);
    }

    fn resync(&mut self) {
        self.nu = combine(&self.vertices, |v| &v.target, self.nu.len());
        let total: f64 = self.vertices.iter().map(|v| v.weight).sum();
        self.lin = self.vertices.iter().map(|v| v.weight * v.lin).sum::<f64>() / total;
    }

    /// One iteration after the oracle returned vertex `s_idx` with gap `gap`.
    /// Returns false when no ascent is possible numerically.
    fn step(
        &mut self,
        g: &[f64],
        s_idx: usize,
        gap: f64,
        iteration: usize,
        rule: LineSearch,
    ) -> bool {
        match rule {
            LineSearch::Harmonic => {
                self.toward(s_idx, Some(2.0 / (iteration as f64 + 2.0)));
            }
            LineSearch::Golden => {
                let (_, away, _) = self.extremes(g);
                let moved = (away != s_idx && self.pairwise(s_idx, away)) || self.toward(s_idx, None);
                if !moved {
                    return false;
                }
                self.prune();
                for _ in 0..LOCAL_STEPS {
                    let g = self.gradient(&self.nu);
                    let (best, worst, local_gap) = self.extremes(&g);
                    if best == worst || local_gap < 0.02 * gap || !self.pairwise(best, worst) {
                        break;
                    }
                    self.prune();
                }
            }
        }
        self.prune();
        if iteration % 256 == 0 {
            // Rebuild from the vertices to stop rounding drift.
            self.resync();
        }
        true
    }
}

/// Pairwise steps among active vertices allowed after each oracle call.
const LOCAL_STEPS: usize = 2000;

/// Maximizes `H_ν(Y|X)` over the set described by `spec`.
///
/// The iterate starts in the relative interior of the set and only moves
/// along feasible directions, so every reported `nu_star` is feasible.
/// `converged = false` means the iteration budget ran out; the report is
/// still a valid lower bound with its certificate.
pub fn max_conditional_entropy(spec: &ConstraintSpec, opts: &SolverOptions) -> Result<SolveReport> {
    opts.validate()?;
    solve_from(spec, opts, spec.spread_start())
}

/// [`max_conditional_entropy`] started from a known feasible coupling
/// (rows: reference points, columns: perturbed points).
pub fn max_conditional_entropy_from(
    spec: &ConstraintSpec,
    opts: &SolverOptions,
    warm: &Coupling,
) -> Result<SolveReport> {
    opts.validate()?;
    let n = spec.reference.len();
    if warm.sources() != n || warm.targets() != n {
        return Err(Error::DimensionMismatch("warm start has the wrong shape".into()));
    }
    let rows = warm.row_sums();
    if rows.iter().zip(spec.reference.mass()).any(|(r, m)| (r - m).abs() > 1e-9) {
        return Err(invalid("warm start", "row sums differ from the reference"));
    }
    for (c, &g) in warm.plan().iter().enumerate() {
        let ok = g >= 0.0
            && (g == 0.0 || (spec.cost.between(c / n, c % n).is_finite() && spec.allowed(c / n, c % n)));
        if !ok {
            return Err(invalid("warm start", format!("plan entry {c} leaves the feasible set")));
        }
    }
    if spec.kind != ConstraintKind::MaxDistortionChannel
        && warm.cost(&spec.cost) > spec.epsilon * (1.0 + 1e-9) + 1e-12
    {
        return Err(invalid("warm start", "plan exceeds the distortion budget"));
    }
    solve_from(spec, opts, warm.clone())
}

/// Solves along nondecreasing budgets, warm-starting each solve from the
/// previous maximizer. The sets are nested and the iteration only ascends, so
/// `h_star` is nondecreasing along the path.
pub fn solve_path(spec: &ConstraintSpec, budgets: &[f64], opts: &SolverOptions) -> Result<Vec<SolveReport>> {
    if budgets.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(invalid("budgets", "must be sorted in nondecreasing order"));
    }
    let mut out: Vec<SolveReport> = Vec::with_capacity(budgets.len());
    for &eps in budgets {
        let spec = spec.with_epsilon(eps)?;
        let report = match out.last() {
            None => max_conditional_entropy(&spec, opts)?,
            Some(prev) => {
                let mut report = max_conditional_entropy_from(&spec, opts, &prev.coupling)?;
                if report.h_star < prev.h_star {
                    // Rounding in the final recombination; the previous point is
                    // feasible here and the certificate still holds for it.
                    report.fw_gap = (report.fw_gap + report.h_star - prev.h_star).max(0.0);
                    report.h_star = prev.h_star;
                    report.nu_star = prev.nu_star.clone();
                    report.coupling = prev.coupling.clone();
                    report.channel = prev.channel.clone();
                    report.row_rule = prev.row_rule.clone();
                }
                report
            }
        };
        out.push(report);
    }
    Ok(out)
}

fn solve_from(spec: &ConstraintSpec, opts: &SolverOptions, start: Coupling) -> Result<SolveReport> {
    let (nx, ny) = (spec.reference.nx(), spec.reference.ny());
    let n = nx * ny;
    let mut set = ActiveSet::new(
        &start,
        0.0,
        1.0,
        spec.reachable_labels(),
        opts.gradient_clamp,
    );
    let mut fw_gap = f64::INFINITY;
    let mut multiplier = 0.0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        let g = set.gradient(&set.nu);
        let s = spec.linear_oracle(&g)?;
        multiplier = s.multiplier;
        let gap = dot(&g, &s.target()) - set.current(&g);
        fw_gap = gap.max(0.0);
        if gap <= opts.fw_gap_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let s_idx = set.insert(&s.coupling, 0.0);
        if set.step(&g, s_idx, gap, iterations, opts.line_search) {
            continue;
        }
        // No ascent along the oracle vertex: the supergradient on empty rows
        // overstates what a single vertex can gain there.
        match refine_empty_rows(spec, &mut set, gap)? {
            Refined::Certified(tighter) => {
                fw_gap = tighter;
                converged = tighter <= opts.fw_gap_tolerance;
                if converged || tighter > 0.99 * gap {
                    break;
                }
            }
            Refined::Direction { plan, target, gap } => {
                fw_gap = gap;
                let idx = set.insert_point(plan, target, 0.0);
                if !set.toward(idx, None) {
                    break;
                }
                set.prune();
            }
        }
    }

    let row_rule = set.row_rule();
    let nu = combine(&set.vertices, |v| &v.target, n);
    let plan = combine(&set.vertices, |v| &v.plan, n * n);
    let nu_star = JointDistribution::from_solver(nx, ny, nu);
    let coupling = Coupling::new(n, n, plan);
    let channel = spec
        .kind
        .is_channel()
        .then(|| channel_from_coupling(&spec.reference, &coupling));
    Ok(SolveReport {
        h_star: nu_star.conditional_entropy(),
        nu_star,
        channel,
        coupling,
        fw_gap,
        iterations,
        multiplier,
        converged,
        row_rule,
    })
}

enum Refined {
    /// The tightest gap found is within tolerance or no direction helps.
    Certified(f64),
    /// Average of the oracle replies: an ascent candidate for the true
    /// (nonsmooth) objective.
    Direction { plan: Vec<f64>, target: Vec<f64>, gap: f64 },
}

const REFINE_ROUNDS: usize = 64;

/// Fictitious play between the oracle and the label distributions of rows
/// where the iterate has no mass.
///
/// Any distribution on an empty row gives a valid supergradient, and the
/// directional derivative toward a point equals its linearization when the
/// row distribution is that point's own posterior. Alternating the two
/// tightens the certificate and yields a mixed direction whose linear gain
/// is genuine. The best distributions found stay pinned on the set.
fn refine_empty_rows(spec: &ConstraintSpec, set: &mut ActiveSet, gap: f64) -> Result<Refined> {
    let empty = set.empty_rows();
    if empty.is_empty() {
        return Ok(Refined::Certified(gap));
    }
    let n = set.nu.len();
    let ny = set.ny;
    let mut best = (gap, set.pinned.clone());
    let mut plan = vec![0.0; n * n];
    let mut target = vec![0.0; n];
    for round in 0..REFINE_ROUNDS {
        let g = set.gradient(&set.nu);
        let s = spec.linear_oracle(&g)?;
        let gap = dot(&g, &s.target()) - set.current(&g);
        if gap < best.0 {
            best = (gap, set.pinned.clone());
        }
        let w = 1.0 / (round as f64 + 1.0);
        for (p, q) in plan.iter_mut().zip(s.coupling.plan()) {
            *p += w * (q - *p);
        }
        for (t, q) in target.iter_mut().zip(s.target()) {
            *t += w * (q - *t);
        }
        for &x in &empty {
            let row = &target[x * ny..(x + 1) * ny];
            let px: f64 = row.iter().sum();
            if px > 0.0 {
                set.pinned[x] = Some(row.iter().map(|m| m / px).collect());
            }
        }
    }
    // The average's own posterior makes its linear gain exact.
    let g = set.gradient(&set.nu);
    let own_gain = dot(&g, &target) - set.current(&g);
    let gap = dot(&g, &spec.linear_oracle(&g)?.target()) - set.current(&g);
    if gap < best.0 {
        best = (gap, set.pinned.clone());
    }
    let keep = own_gain > 0.0;
    set.pinned = best.1;
    Ok(if keep {
        Refined::Direction { plan, target, gap: best.0.max(0.0) }
    } else {
        Refined::Certified(best.0.max(0.0))
    })
}

/// Outcome of [`penalized_solve`].
#[derive(Debug, Clone)]
pub struct PenalizedSolution {
    pub nu: JointDistribution,
    /// `W_d(ν, μ)`, from an exact transport solve at the returned `nu`.
    pub transport_value: f64,
    /// `H_ν(Y|X)`.
    pub entropy: f64,
    /// `transport_value - λ · entropy`.
    pub objective: f64,
    /// Optimal transport from `nu` (sources) to `μ` (targets).
    pub transport: Transport,
    /// The optimum lies in `[objective - fw_gap, objective]`.
    pub fw_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The transport basis is degenerate, so its potentials are not unique.
    pub degenerate_duals: bool,
}

/// Minimizes `W_d(ν, μ) - λ H_ν(Y|X)` over all joints `ν`.
///
/// Works jointly over couplings whose second marginal is `μ`: the objective
/// `Σ γ d - λ H(first marginal of γ)` is convex there, the feasible set is a
/// product of simplices (one per point of `μ`), and its minimum over `γ`
/// equals the minimum over `ν` of the stated objective.
pub fn penalized_solve(
    mu: &JointDistribution,
    cost: &GroundCost,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<PenalizedSolution> {
    opts.validate()?;
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(invalid("lambda", format!("must be a positive number, got {lambda}")));
    }
    if cost.nx() != mu.nx() || cost.ny() != mu.ny() {
        return Err(Error::DimensionMismatch("cost and reference alphabets differ".into()));
    }
    if !cost.is_all_finite() {
        return Err(invalid("cost", "the penalized problem needs an all-finite cost"));
    }
    let (nx, ny) = (mu.nx(), mu.ny());
    let n = nx * ny;
    let mass = mu.mass();
    // Rows of the plan are points of `μ`, columns points of `ν`.
    let oracle = |g: &[f64]| {
        let mut plan = vec![0.0; n * n];
        let mut lin = 0.0;
        for a in (0..n).filter(|&a| mass[a] > 0.0) {
            let mut best = (a, f64::NEG_INFINITY);
            for b in 0..n {
                let val = lambda * g[b] - cost.between(b, a);
                if val > best.1 + 1e-15 * (1.0 + val.abs()) {
                    best = (b, val);
                }
            }
            plan[a * n + best.0] = mass[a];
            lin += mass[a] * cost.between(best.0, a);
        }
        (Coupling::new(n, n, plan), lin)
    };

    let identity: Vec<f64> = (0..n * n)
        .map(|c| if c / n == c % n { mass[c / n] } else { 0.0 })
        .collect();
    let mut set = ActiveSet::new(
        &Coupling::new(n, n, identity),
        0.0,
        lambda,
        vec![vec![true; ny]; nx],
        opts.gradient_clamp,
    );
    let mut fw_gap = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let g = set.gradient(&set.nu);
        let (plan, lin) = oracle(&g);
        let gap = lambda * dot(&g, &plan.col_sums()) - lin - set.current(&g);
        fw_gap = gap.max(0.0);
        if gap <= opts.fw_gap_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let s_idx = set.insert(&plan, lin);
        if !set.step(&g, s_idx, gap, iterations, opts.line_search) {
            break;
        }
    }

    let nu = JointDistribution::from_solver(nx, ny, combine(&set.vertices, |v| &v.target, n));
    let transport = wasserstein_distance(&nu, mu, cost)?;
    let entropy = nu.conditional_entropy();
    Ok(PenalizedSolution {
        transport_value: transport.value,
        entropy,
        objective: transport.value - lambda * entropy,
        degenerate_duals: transport.degenerate,
        transport,
        nu,
        fw_gap,
        iterations,
        converged,
    })
}

fn combine(active: &[Vertex], pick: impl Fn(&Vertex) -> &Vec<f64>, len: usize) -> Vec<f64> {
    let total: f64 = active.iter().map(|v| v.weight).sum();
    let mut out = vec![0.0; len];
    for v in active {
        let w = v.weight / total;
        for (o, &p) in out.iter_mut().zip(pick(v)) {
            *o += w * p;
        }
    }
    out
}

/// `k(z|x,y) = γ((x,y),(z,y)) / μ(x,y)`; unit mass on `z = x` where `μ` is empty.
pub fn channel_from_coupling(mu: &JointDistribution, coupling: &Coupling) -> Channel {
    let (nx, ny) = (mu.nx(), mu.ny());
    let mut cond = vec![0.0; nx * ny * nx];
    for x in 0..nx {
        for y in 0..ny {
            let a = x * ny + y;
            let m = mu.mass()[a];
            let slice = &mut cond[a * nx..(a + 1) * nx];
            if m > SUPPORT_THRESHOLD {
                let row: Vec<f64> = (0..nx).map(|z| coupling.get(a, z * ny + y).max(0.0)).collect();
                let total: f64 = row.iter().sum();
                for (s, r) in slice.iter_mut().zip(row) {
                    *s = r / total;
                }
            } else {
                slice.iter_mut().for_each(|s| *s = 1.0 / nx as f64);
            }
        }
    }
    Channel::from_slices_unchecked(nx, ny, nx, cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{binary_entropy, conditional_entropy_of, CostKind};
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn random_joint(rng: &mut Pcg64, nx: usize, ny: usize, floor: f64) -> JointDistribution {
        let w = (0..nx * ny).map(|_| floor + rng.gen::<f64>()).collect();
        JointDistribution::normalized(nx, ny, w).unwrap()
    }

    fn toy_spec() -> ConstraintSpec {
        let mut m = vec![0.0; 25];
        for k in [0, 2, 4] {
            m[k * 5 + k] = 1.0 / 3.0;
        }
        let mu = JointDistribution::normalized(5, 5, m).unwrap();
        let cost = GroundCost::from_kind(CostKind::AbsoluteDifference, 5, 5, true).unwrap();
        ConstraintSpec::new(ConstraintKind::MaxDistortionChannel, 1.0, cost, mu).unwrap()
    }

    fn squared_spec(mu: &JointDistribution, kind: ConstraintKind, eps: f64) -> ConstraintSpec {
        let cost = GroundCost::from_kind(CostKind::SquaredDifference, mu.nx(), mu.ny(), true).unwrap();
        ConstraintSpec::new(kind, eps, cost, mu.clone()).unwrap()
    }

    #[test]
    fn gradient_closed_forms() {
        let g = entropy_gradient(&JointDistribution::uniform(2, 2), 1e-12);
        assert!(g.iter().all(|v| (v - 2f64.ln()).abs() < 1e-15));
        let diag = JointDistribution::normalized(3, 3, (0..9).map(|c| (c / 3 == c % 3) as u8 as f64).collect()).unwrap();
        let g = entropy_gradient(&diag, 1e-12);
        for k in 0..3 {
            assert_eq!(g[k * 3 + k], 0.0);
        }
        assert!((g[1] - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Pcg64::seed_from_u64(11);
        let p = random_joint(&mut rng, 3, 3, 0.2);
        let g = entropy_gradient(&p, 1e-12);
        let h = 1e-6;
        for _ in 0..50 {
            let mut d: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() - 0.5).collect();
            let mean = d.iter().sum::<f64>() / 9.0;
            d.iter_mut().for_each(|v| *v -= mean);
            let shifted = |t: f64| {
                let m: Vec<f64> = p.mass().iter().zip(&d).map(|(a, b)| a + t * b).collect();
                conditional_entropy_of(&m, 3)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let an = dot(&g, &d);
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }

    #[test]
    fn zero_budget_returns_reference() {
        let mut rng = Pcg64::seed_from_u64(3);
        let mu = random_joint(&mut rng, 4, 3, 0.0);
        for kind in [
            ConstraintKind::WassersteinBall,
            ConstraintKind::ExpectedDistortionChannel,
            ConstraintKind::MaxDistortionChannel,
        ] {
            let r = max_conditional_entropy(&squared_spec(&mu, kind, 0.0), &SolverOptions::default()).unwrap();
            assert!(r.converged);
            assert!((r.h_star - mu.conditional_entropy()).abs() < 1e-12);
            for (a, b) in r.nu_star.mass().iter().zip(mu.mass()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn toy_value_and_split() {
        let r = max_conditional_entropy(&toy_spec(), &SolverOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.h_star - binary_entropy(1.0 / 3.0)).abs() < 1e-4, "{}", r.h_star);
        let k = r.channel.unwrap();
        assert!((k.get(2, 2, 1) - 0.5).abs() < 1e-3);
        assert!((k.get(2, 2, 3) - 0.5).abs() < 1e-3);
        assert!(r.h_star <= binary_entropy(1.0 / 3.0) + 1e-12);
    }

    /// Grid search over the two flip probabilities of a binary channel.
    fn binary_grid_oracle(eps: f64) -> f64 {
        let steps = 1000;
        let mut best: f64 = 0.0;
        for i in 0..=steps {
            for j in 0..=steps {
                let (a, b) = (i as f64 / steps as f64, j as f64 / steps as f64);
                if 0.5 * a + 0.5 * b > eps + 1e-12 {
                    continue;
                }
                let m = [0.5 * (1.0 - a), 0.5 * b, 0.5 * a, 0.5 * (1.0 - b)];
                best = best.max(conditional_entropy_of(&m, 2));
            }
        }
        best
    }

    #[test]
    fn binary_hamming_matches_grid() {
        let mu = JointDistribution::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let cost = GroundCost::from_kind(CostKind::Hamming, 2, 2, true).unwrap();
        let spec = ConstraintSpec::new(ConstraintKind::ExpectedDistortionChannel, 0.25, cost, mu).unwrap();
        let r = max_conditional_entropy(&spec, &SolverOptions::default()).unwrap();
        let grid = binary_grid_oracle(0.25);
        assert!((r.h_star - grid).abs() < 1e-6, "{} vs {grid}", r.h_star);
        assert!((r.h_star - binary_entropy(0.25)).abs() < 1e-6);
    }

    #[test]
    fn monotone_capped_and_saturating() {
        let mut rng = Pcg64::seed_from_u64(5);
        let mu = random_joint(&mut rng, 5, 4, 0.0);
        let spec = squared_spec(&mu, ConstraintKind::WassersteinBall, 0.0);
        let hy = mu.label_entropy();
        let sat = (0..5)
            .map(|z| (0..5).map(|x| mu.marginal_x()[x] * ((x as f64) - (z as f64)).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let mut prev = 0.0;
        for k in 0..=12 {
            let eps = 0.25 * k as f64;
            let r = max_conditional_entropy(&spec.with_epsilon(eps).unwrap(), &SolverOptions::default()).unwrap();
            assert!(r.converged);
            assert!(r.h_star >= prev - 1e-9);
            assert!(r.h_star <= hy + 1e-12 && hy <= 4f64.ln());
            if eps >= sat {
                assert!((r.h_star - hy).abs() < 1e-6, "eps {eps}: {} vs {hy}", r.h_star);
            }
            assert!(spec.with_epsilon(eps).unwrap().contains(&r.nu_star, 1e-8).unwrap());
            prev = r.h_star;
        }
    }

    /// A random channel, pulled toward the identity until it meets the budget.
    fn random_feasible(spec: &ConstraintSpec, rng: &mut Pcg64) -> JointDistribution {
        let mu = &spec.reference;
        let (nx, ny) = (mu.nx(), mu.ny());
        let mut cond = Vec::with_capacity(nx * ny * nx);
        for x in 0..nx {
            for _ in 0..ny {
                let w: Vec<f64> = (0..nx)
                    .map(|z| {
                        let ok = spec.kind != ConstraintKind::MaxDistortionChannel
                            || spec.cost.between(x * ny, z * ny) <= spec.epsilon;
                        if ok { rng.gen::<f64>().powi(3) } else { 0.0 }
                    })
                    .collect();
                let t: f64 = w.iter().sum();
                cond.extend(w.iter().map(|v| v / t));
            }
        }
        let k = Channel::new(nx, ny, nx, cond).unwrap();
        let d = mu.expected_distortion(&k, &spec.cost).unwrap();
        let t = if spec.kind == ConstraintKind::MaxDistortionChannel || d <= spec.epsilon {
            1.0
        } else {
            spec.epsilon / d
        };
        let moved = mu.push_forward(&k).unwrap();
        let m = moved.mass().iter().zip(mu.mass()).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        JointDistribution::normalized(nx, ny, m).unwrap()
    }

    #[test]
    fn certificate_bounds_random_feasible_points() {
        let mut rng = Pcg64::seed_from_u64(21);
        for trial in 0..6 {
            let mu = random_joint(&mut rng, 4, 3, 0.0);
            let kind = [
                ConstraintKind::WassersteinBall,
                ConstraintKind::ExpectedDistortionChannel,
                ConstraintKind::MaxDistortionChannel,
            ][trial % 3];
            let spec = squared_spec(&mu, kind, [0.3, 1.0][trial % 2]);
            let r = max_conditional_entropy(&spec, &SolverOptions::default()).unwrap();
            assert!(r.converged);
            assert!(r.fw_gap >= -1e-10);
            assert!((r.h_star - r.nu_star.conditional_entropy()).abs() < 1e-12);
            for _ in 0..20 {
                let nu = random_feasible(&spec, &mut rng);
                assert!(spec.contains(&nu, 1e-9).unwrap());
                assert!(nu.conditional_entropy() <= r.h_star + r.fw_gap + 1e-9);
            }
        }
    }

    #[test]
    fn harmonic_steps_agree_roughly() {
        let mut rng = Pcg64::seed_from_u64(8);
        let mu = random_joint(&mut rng, 3, 3, 0.1);
        let spec = squared_spec(&mu, ConstraintKind::ExpectedDistortionChannel, 0.4);
        let golden = max_conditional_entropy(&spec, &SolverOptions::default()).unwrap();
        let opts = SolverOptions {
            line_search: LineSearch::Harmonic,
            ..SolverOptions::default()
        };
        let harmonic = max_conditional_entropy(&spec, &opts).unwrap();
        assert!(harmonic.h_star <= golden.h_star + golden.fw_gap + 1e-12);
        assert!(golden.h_star - harmonic.h_star < 1e-3);
    }

    #[test]
    fn options_are_validated() {
        let mut opts = SolverOptions::default();
        opts.gradient_clamp = 0.5;
        assert!(max_conditional_entropy(&toy_spec(), &opts).is_err());
        let mu = JointDistribution::uniform(2, 2);
        let cost = GroundCost::from_kind(CostKind::Hamming, 2, 2, false).unwrap();
        assert!(ConstraintSpec::new(ConstraintKind::ExpectedDistortionChannel, 0.1, cost.clone(), mu.clone()).is_err());
        assert!(ConstraintSpec::new(ConstraintKind::WassersteinBall, -1.0, cost, mu).is_err());
    }

    #[test]
    fn penalized_limits() {
        let mut rng = Pcg64::seed_from_u64(2);
        let mu = random_joint(&mut rng, 3, 3, 0.2);
        let cost = GroundCost::from_kind(CostKind::AbsoluteDifference, 3, 3, false).unwrap();
        let opts = SolverOptions::default();
        let tiny = penalized_solve(&mu, &cost, 1e-4, &opts).unwrap();
        assert!(tiny.converged);
        assert!(tiny.transport_value < 1e-12);
        assert!(tiny.nu.mass().iter().zip(mu.mass()).all(|(a, b)| (a - b).abs() < 1e-12));
        let big = penalized_solve(&mu, &cost, 10.0 * cost.max_finite() / 3f64.ln(), &opts).unwrap();
        assert!(big.converged, "{} {}", big.fw_gap, big.iterations);
        assert!(3f64.ln() - big.entropy < 1e-3, "{}", big.entropy);
        let bigger = penalized_solve(&mu, &cost, 100.0 * cost.max_finite() / 3f64.ln(), &opts).unwrap();
        assert!(bigger.entropy >= big.entropy - 1e-12);
    }

    /// `W` for the 4-cycle metric of Hamming distance on binary pairs.
    fn cycle_wasserstein(nu: &[f64], mu: &[f64]) -> f64 {
        let order = [0, 1, 3, 2];
        let mut f = [0.0; 4];
        let mut acc = 0.0;
        for (k, &p) in order.iter().enumerate() {
            acc += nu[p] - mu[p];
            f[k] = acc;
        }
        let mut s = f;
        s.sort_by(f64::total_cmp);
        let t = 0.5 * (s[1] + s[2]);
        f.iter().map(|v| (v - t).abs()).sum()
    }

    #[test]
    fn penalized_matches_grid_on_binary_pairs() {
        let mu = JointDistribution::new(2, 2, vec![0.4, 0.1, 0.2, 0.3]).unwrap();
        let cost = GroundCost::from_kind(CostKind::Hamming, 2, 2, false).unwrap();
        let lambda = 0.1;
        let r = penalized_solve(&mu, &cost, lambda, &SolverOptions::default()).unwrap();
        assert!((cycle_wasserstein(r.nu.mass(), mu.mass()) - r.transport_value).abs() < 1e-12);
        let steps = 500;
        let mut best = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=steps - i {
                for k in 0..=steps - i - j {
                    let l = steps - i - j - k;
                    let m = [i, j, k, l].map(|v| v as f64 / steps as f64);
                    let val = cycle_wasserstein(&m, mu.mass()) - lambda * conditional_entropy_of(&m, 2);
                    best = best.min(val);
                }
            }
        }
        assert!(r.objective <= best + 1e-12);
        assert!(best - r.objective < 1e-3, "{} vs {best}", r.objective);
    }
}
