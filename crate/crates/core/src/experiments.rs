//! Scenario runners: the five-symbol toy game, the accuracy/robustness
//! sweep, the penalized fixed point, privacy mechanisms and the
//! discontinuity counterexample.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;
use rayon::prelude::*;
use serde::Serialize;

use crate::distribution::{Channel, CostKind, GroundCost, JointDistribution, ZeroMassPolicy};
use crate::error::{invalid, Error, Result};
use crate::game::{
    attack_best_response_clamped, deterministic_maximin, deterministic_minimax, extract_rule,
};
use crate::maxent::{
    max_conditional_entropy, penalized_solve, solve_path, ConstraintKind, ConstraintSpec,
    SolverOptions,
};
use crate::transport::wasserstein_distance;

/// Seed of the default sweep instance.
pub const DEFAULT_SWEEP_SEED: u64 = 333_774;
/// Sharpness of the default sweep instance.
pub const DEFAULT_SHARPNESS: f64 = 2.5;

/// Seeded joint over `nx × ny`: sorted uniforms give flat spacings on the
/// simplex, and raising them to `sharpness` concentrates the mass.
///
/// The generator is PCG32 (a 64-bit linear congruential step with a
/// permuted output), so the draw is reproducible bit for bit.
pub fn seeded_joint(nx: usize, ny: usize, seed: u64, sharpness: f64) -> JointDistribution {
    let n = nx * ny;
    let mut rng = Pcg32::seed_from_u64(seed);
    let mut cuts: Vec<f64> = (0..n - 1).map(|_| rng.gen::<f64>()).collect();
    cuts.push(0.0);
    cuts.push(1.0);
    cuts.sort_by(f64::total_cmp);
    let weights: Vec<f64> = cuts.windows(2).map(|w| (w[1] - w[0]).powf(sharpness)).collect();
    JointDistribution::normalized(nx, ny, weights).expect("spacings are positive")
}

/// The 5×5 instance used by default in sweeps, with the label-preserving
/// squared-difference cost.
pub fn default_sweep_instance(seed: u64) -> (JointDistribution, GroundCost) {
    let mu = seeded_joint(5, 5, seed, DEFAULT_SHARPNESS);
    let cost = GroundCost::from_kind(CostKind::SquaredDifference, 5, 5, true)
        .expect("built-in cost is valid");
    (mu, cost)
}

/// `start, start + step, ...` up to `stop` inclusive (with a little slack for rounding).
pub fn budget_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) || start < 0.0 || step <= 0.0 || stop < start {
        return Err(invalid("grid", format!("need 0 <= start <= stop and step > 0, got {start}:{stop}:{step}")));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize;
    if count > 100_000 {
        return Err(invalid("grid", format!("{} points is too many", count + 1)));
    }
    Ok((0..=count).map(|k| start + k as f64 * step).collect())
}

/// `0, 0.05, ..., 2.0`.
pub fn default_sweep_grid() -> Vec<f64> {
    (0..=40).map(|k| k as f64 / 20.0).collect()
}

/// `min_z E_μ d(X, z)`: cheapest budget that lets the adversary merge all
/// features into one, making `Z` independent of `Y`.
pub fn saturation_budget(mu: &JointDistribution, cost: &GroundCost) -> f64 {
    let (nx, ny) = (mu.nx(), mu.ny());
    (0..nx)
        .map(|z| {
            (0..nx * ny)
                .filter(|&a| mu.mass()[a] > 0.0)
                .map(|a| mu.mass()[a] * cost.feature_cost(a / ny, z, a % ny))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub h_star: f64,
    /// Mass of the middle symbol routed one step down.
    pub alpha_hat: f64,
    pub det_maximin: f64,
    pub det_minimax: f64,
    pub fw_gap: f64,
    pub converged: bool,
}

/// Five symbols, clean mass `1/3` on `(0,0), (2,2), (4,4)`, `|x - z|`
/// distortion at most 1.
pub fn toy_instance() -> (JointDistribution, GroundCost, f64) {
    let mut mass = vec![0.0; 25];
    for k in [0, 2, 4] {
        mass[k * 5 + k] = 1.0 / 3.0;
    }
    let mu = JointDistribution::normalized(5, 5, mass).expect("valid toy joint");
    let cost = GroundCost::from_kind(CostKind::AbsoluteDifference, 5, 5, true)
        .expect("built-in cost is valid");
    (mu, cost, 1.0)
}

pub fn run_toy_example(opts: &SolverOptions) -> Result<ToyReport> {
    let (mu, cost, eps) = toy_instance();
    let spec = ConstraintSpec::new(ConstraintKind::MaxDistortionChannel, eps, cost.clone(), mu.clone())?;
    let report = max_conditional_entropy(&spec, opts)?;
    let alpha_hat = report
        .channel
        .as_ref()
        .map(|k| k.get(2, 2, 1))
        .expect("channel kinds report a channel");
    Ok(ToyReport {
        h_star: report.h_star,
        alpha_hat,
        det_maximin: deterministic_maximin(&mu, &cost, eps)?.0,
        det_minimax: deterministic_minimax(&mu, &cost, eps, opts)?,
        fw_gap: report.fw_gap,
        converged: report.converged,
    })
}

/// Worst-case losses of the robust rule for each budget against each attack budget.
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub epsilon_rule: Vec<f64>,
    pub epsilon_attack: Vec<f64>,
    /// `loss[a][r] = max_{ν ∈ D(ε_attack[a])} L(ν, q*_{ε_rule[r]})`.
    pub loss: Vec<Vec<f64>>,
    /// The attack reply put mass where the rule has zero probability.
    pub unbounded: Vec<Vec<bool>>,
    pub h_star_curve: Vec<f64>,
    pub fw_gap: Vec<f64>,
    pub converged: Vec<bool>,
    /// Rows each rule pins; other rows use the fallback label distribution.
    pub coverage: Vec<Vec<bool>>,
    pub clean_entropy: f64,
    pub label_entropy: f64,
    pub epsilon_sat: f64,
    /// Cells whose evaluation failed, with the reason; their loss is NaN.
    pub failures: Vec<(usize, usize, String)>,
}

/// Fills the grid over the Wasserstein ball of the (label-preserving) cost.
///
/// Budgets are solved along the sorted grid with warm starts, so the value
/// curve is nondecreasing; the attack evaluations run in parallel.
pub fn run_tradeoff_sweep(
    mu: &JointDistribution,
    cost: &GroundCost,
    grid: &[f64],
    opts: &SolverOptions,
) -> Result<SweepGrid> {
    if grid.is_empty() || grid[0] != 0.0 {
        return Err(invalid("grid", "must be nonempty and start at 0"));
    }
    if !cost.label_preserving() && mu.ny() > 1 {
        return Err(invalid("cost", "the sweep needs a label-preserving cost"));
    }
    let spec = ConstraintSpec::new(ConstraintKind::WassersteinBall, 0.0, cost.clone(), mu.clone())?;
    let reports = solve_path(&spec, grid, opts)?;
    let specs: Vec<ConstraintSpec> = grid.iter().map(|&e| spec.with_epsilon(e)).collect::<Result<_>>()?;
    let rules: Vec<_> = reports.iter().zip(&specs).map(|(r, s)| extract_rule(r, s)).collect();

    let cells: Vec<Vec<Result<(f64, bool)>>> = specs
        .par_iter()
        .map(|attack| {
            rules
                .iter()
                .map(|rule| {
                    attack_best_response_clamped(&rule.rule, attack, opts.gradient_clamp)
                        .map(|r| (r.loss, r.unbounded))
                })
                .collect()
        })
        .collect();

    let mut loss = vec![vec![f64::NAN; grid.len()]; grid.len()];
    let mut unbounded = vec![vec![false; grid.len()]; grid.len()];
    let mut failures = Vec::new();
    for (a, row) in cells.into_iter().enumerate() {
        for (r, cell) in row.into_iter().enumerate() {
            match cell {
                Ok((l, u)) => {
                    loss[a][r] = l;
                    unbounded[a][r] = u;
                }
                Err(e) => failures.push((a, r, e.to_string())),
            }
        }
    }
    Ok(SweepGrid {
        epsilon_rule: grid.to_vec(),
        epsilon_attack: grid.to_vec(),
        loss,
        unbounded,
        h_star_curve: reports.iter().map(|r| r.h_star).collect(),
        fw_gap: reports.iter().map(|r| r.fw_gap).collect(),
        converged: reports.iter().map(|r| r.converged).collect(),
        coverage: rules.into_iter().map(|r| r.coverage).collect(),
        clean_entropy: mu.conditional_entropy(),
        label_entropy: mu.label_entropy(),
        epsilon_sat: saturation_budget(mu, cost),
        failures,
    })
}

/// How well the transport potential of a penalized optimum matches the
/// log-posterior.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub lambda: f64,
    /// RMS over the support of `φ + λ (ln ν(x,y) - ln ν(x)) - C`.
    pub residual_standard: f64,
    /// Same with `ln ν(x,y) - ln ν(x) / |Y|`.
    pub residual_uniform_variant: f64,
    pub degenerate_duals: bool,
    pub support_size: usize,
    /// Connected pieces of the optimal plan; each carries its own potential shift.
    pub plan_components: usize,
    pub objective: f64,
    pub fw_gap: f64,
    pub converged: bool,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Least squares `min Σ_k w_k (c_k - m_k)^2` subject to `c_i - c_j <= r`
/// for every `(i, j, r)`, by Hildreth's row-action method.
fn fit_shifts(weights: &[f64], means: &[f64], constraints: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut c = means.to_vec();
    let mut multipliers = vec![0.0; constraints.len()];
    for _ in 0..20_000 {
        let mut change: f64 = 0.0;
        for (k, &(i, j, r)) in constraints.iter().enumerate() {
            let curvature = 1.0 / weights[i] + 1.0 / weights[j];
            let violation = c[i] - c[j] - r;
            let next = (multipliers[k] + violation / curvature).max(0.0);
            let delta = next - multipliers[k];
            if delta != 0.0 {
                multipliers[k] = next;
                c[i] -= delta / weights[i];
                c[j] += delta / weights[j];
                change = change.max(delta.abs());
            }
        }
        if change < 1e-15 {
            break;
        }
    }
    c
}

/// Residuals of the potential identity at `nu` for penalty `lambda`.
///
/// The potential `φ` of `W_d(ν, μ)` is unique only up to a shift on each
/// connected piece of the optimal plan; the shifts (kept dual-feasible) and
/// the constant are fitted by least squares, separately for each log-posterior
/// representative. Stationarity of `W_d(ν, μ) - λ H_ν(Y|X)` gives
/// `φ = -λ ln ν(y|x) + C` for the potential convention `φ + ψ <= d`.
pub fn fixed_point_residuals(
    nu: &JointDistribution,
    mu: &JointDistribution,
    cost: &GroundCost,
    lambda: f64,
) -> Result<FixedPointReport> {
    let transport = wasserstein_distance(nu, mu, cost)?;
    let (nx, ny) = (nu.nx(), nu.ny());
    let n = nx * ny;
    let phi = &transport.duals.phi;
    let psi = &transport.duals.psi;
    let plan = transport.coupling.plan();

    // Nodes 0..n are points of ν, n..2n points of μ.
    let mut parent: Vec<usize> = (0..2 * n).collect();
    let scale = plan.iter().cloned().fold(0.0, f64::max);
    for b in 0..n {
        for a in 0..n {
            if plan[b * n + a] > 1e-12 * scale {
                let (rb, ra) = (find(&mut parent, b), find(&mut parent, n + a));
                parent[rb] = ra;
            }
        }
    }
    let support: Vec<usize> = (0..n).filter(|&b| nu.mass()[b] > 1e-12).collect();
    let mut roots: Vec<usize> = support.iter().map(|&b| find(&mut parent, b)).collect();
    roots.sort_unstable();
    roots.dedup();
    let piece = |parent: &mut Vec<usize>, node: usize| {
        let root = find(parent, node);
        roots.binary_search(&root).ok()
    };
    let pieces: Vec<Option<usize>> = (0..2 * n).map(|i| piece(&mut parent, i)).collect();

    let mut constraints = Vec::new();
    for b in 0..n {
        for a in (0..n).filter(|&a| mu.mass()[a] > 0.0) {
            let d = cost.between(b, a);
            if let (Some(i), Some(j), true) = (pieces[b], pieces[n + a], d.is_finite()) {
                if i != j {
                    constraints.push((i, j, (d - phi[b] - psi[a]).max(0.0)));
                }
            }
        }
    }

    let marginal = nu.marginal_x();
    let residual = |uniform: bool| {
        let target: Vec<f64> = support
            .iter()
            .map(|&b| {
                let weight = if uniform { 1.0 / ny as f64 } else { 1.0 };
                let r = nu.mass()[b].ln() - weight * marginal[b / ny].ln();
                phi[b] + lambda * r
            })
            .collect();
        let mut weights = vec![0.0; roots.len()];
        let mut means = vec![0.0; roots.len()];
        for (&b, t) in support.iter().zip(&target) {
            let k = pieces[b].expect("support nodes have a piece");
            weights[k] += 1.0;
            means[k] -= t;
        }
        for (m, w) in means.iter_mut().zip(&weights) {
            *m /= w;
        }
        let shifts = fit_shifts(&weights, &means, &constraints);
        let values: Vec<f64> = support
            .iter()
            .zip(&target)
            .map(|(&b, t)| t + shifts[pieces[b].unwrap()])
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
    };

    Ok(FixedPointReport {
        lambda,
        residual_standard: residual(false),
        residual_uniform_variant: residual(true),
        degenerate_duals: transport.degenerate || roots.len() > 1,
        support_size: support.len(),
        plan_components: roots.len(),
        objective: transport.value - lambda * nu.conditional_entropy(),
        fw_gap: f64::NAN,
        converged: true,
    })
}

/// Solves the penalized problem and checks the potential identity at its optimum.
pub fn run_fixed_point(
    mu: &JointDistribution,
    cost: &GroundCost,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<FixedPointReport> {
    let solution = penalized_solve(mu, cost, lambda, opts)?;
    let mut report = fixed_point_residuals(&solution.nu, mu, cost, lambda)?;
    report.degenerate_duals |= solution.degenerate_duals;
    report.fw_gap = solution.fw_gap;
    report.converged = solution.converged;
    Ok(report)
}

/// A release channel that leaks as little about the label as the budget allows.
#[derive(Debug, Clone)]
pub struct PrivacyMechanism {
    pub epsilon: f64,
    pub channel: Channel,
    /// `I(Y; Z)` of the released joint, nats.
    pub leakage: f64,
    pub distortion: f64,
    pub h_star: f64,
    pub fw_gap: f64,
    pub converged: bool,
}

fn mechanism_from(
    mu: &JointDistribution,
    cost: &GroundCost,
    epsilon: f64,
    report: &crate::maxent::SolveReport,
) -> Result<PrivacyMechanism> {
    let channel = report.channel.clone().expect("channel kinds report a channel");
    Ok(PrivacyMechanism {
        epsilon,
        leakage: mu.push_forward(&channel)?.mutual_information_yz(),
        distortion: mu.expected_distortion(&channel, cost)?,
        channel,
        h_star: report.h_star,
        fw_gap: report.fw_gap,
        converged: report.converged,
    })
}

/// Minimizes `I(Y; Z)` over channels with `E d(X, Z) <= ε`, which is the same
/// as maximizing `H(Y|Z)`.
pub fn design_privacy_mechanism(
    mu: &JointDistribution,
    cost: &GroundCost,
    epsilon: f64,
    opts: &SolverOptions,
) -> Result<PrivacyMechanism> {
    let spec = ConstraintSpec::new(ConstraintKind::ExpectedDistortionChannel, epsilon, cost.clone(), mu.clone())?;
    let report = max_conditional_entropy(&spec, opts)?;
    mechanism_from(mu, cost, epsilon, &report)
}

/// [`design_privacy_mechanism`] along sorted budgets, warm-started, so the
/// leakage is nonincreasing.
pub fn privacy_tradeoff(
    mu: &JointDistribution,
    cost: &GroundCost,
    budgets: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<PrivacyMechanism>> {
    let spec = ConstraintSpec::new(ConstraintKind::ExpectedDistortionChannel, 0.0, cost.clone(), mu.clone())?;
    solve_path(&spec, budgets, opts)?
        .iter()
        .zip(budgets)
        .map(|(r, &e)| mechanism_from(mu, cost, e, r))
        .collect()
}

/// One line of the counterexample table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleRow {
    pub n: u64,
    /// `q_n(1|0)`, `q_n(1|1)`.
    pub q: [f64; 2],
    /// `q'_n(1|0)`, `q'_n(1|1)`.
    pub q_prime: [f64; 2],
    /// Total-variation distances of `p_n` and `p'_n` to the common limit.
    pub tv: [f64; 2],
}

/// Two joint sequences on `{0,1}²` with the same limit whose posteriors
/// disagree completely on `x = 1` for every `n`.
pub fn counterexample_pair(n: u64) -> Result<(JointDistribution, JointDistribution)> {
    if n < 2 {
        return Err(invalid("n", format!("must be at least 2, got {n}")));
    }
    let n = n as f64;
    let small = 1.0 / (2.0 * n);
    let large = (n - 1.0) / (2.0 * n);
    Ok((
        JointDistribution::new(2, 2, vec![0.5, large, 0.0, small])?,
        JointDistribution::new(2, 2, vec![large, 0.5, small, 0.0])?,
    ))
}

pub fn run_counterexample(n_values: &[u64]) -> Result<Vec<CounterexampleRow>> {
    if n_values.is_empty() {
        return Err(invalid("n", "need at least one value"));
    }
    let limit = [0.5, 0.5, 0.0, 0.0];
    let tv = |p: &JointDistribution| {
        0.5 * p.mass().iter().zip(limit).map(|(a, b)| (a - b).abs()).sum::<f64>()
    };
    n_values
        .iter()
        .map(|&n| {
            let (p, p_prime) = counterexample_pair(n)?;
            let q = p.posterior(ZeroMassPolicy::Uniform).rule;
            let q_prime = p_prime.posterior(ZeroMassPolicy::Uniform).rule;
            Ok(CounterexampleRow {
                n,
                q: [q.get(0, 1), q.get(1, 1)],
                q_prime: [q_prime.get(0, 1), q_prime.get(1, 1)],
                tv: [tv(&p), tv(&p_prime)],
            })
        })
        .collect()
}

/// Parses `"2,10,1000"`.
pub fn parse_n_list(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| Error::Invalid { what: "n", reason: format!("`{s}`: {e}") })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    #[test]
    fn default_instance_has_moderate_entropies() {
        let (mu, _) = default_sweep_instance(DEFAULT_SWEEP_SEED);
        let (h_y, h_yx) = (mu.label_entropy(), mu.conditional_entropy());
        assert!((1.5..=1.7).contains(&h_y), "{h_y}");
        assert!((0.3..=0.4).contains(&h_yx), "{h_yx}");
        assert_eq!(seeded_joint(5, 5, 7, 2.5), seeded_joint(5, 5, 7, 2.5));
        assert_ne!(seeded_joint(5, 5, 7, 2.5), seeded_joint(5, 5, 8, 2.5));
    }

    #[test]
    fn grids() {
        let g = default_sweep_grid();
        assert_eq!(g.len(), 41);
        assert_eq!(g[40], 2.0);
        assert_eq!(budget_grid(0.0, 1.0, 0.25).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(budget_grid(0.0, 0.3, 0.1).unwrap().len(), 4);
        assert!(budget_grid(1.0, 0.0, 0.1).is_err());
        assert!(budget_grid(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn toy_matches_closed_form() {
        let toy = run_toy_example(&opts()).unwrap();
        let h = crate::distribution::binary_entropy(1.0 / 3.0);
        assert!(toy.converged);
        assert!((toy.h_star - h).abs() <= 1e-4, "{}", toy.h_star);
        assert!((toy.alpha_hat - 0.5).abs() <= 1e-3, "{}", toy.alpha_hat);
        assert!((toy.det_maximin - 2.0 / 3.0 * std::f64::consts::LN_2).abs() <= 1e-9);
        assert!((toy.det_minimax - h).abs() <= 1e-3, "{}", toy.det_minimax);
    }

    #[test]
    fn counterexample_posteriors_split() {
        let rows = run_counterexample(&[2, 10, 1000]).unwrap();
        for row in &rows {
            let n = row.n as f64;
            assert!((row.q[0] - (n - 1.0) / (2.0 * n - 1.0)).abs() < 1e-12);
            assert_eq!(row.q[1], 1.0);
            assert!((row.q_prime[0] - n / (2.0 * n - 1.0)).abs() < 1e-12);
            assert_eq!(row.q_prime[1], 0.0);
            assert!((row.tv[0] - 1.0 / (2.0 * n)).abs() < 1e-12);
            assert!((row.tv[1] - 1.0 / (2.0 * n)).abs() < 1e-12);
        }
        assert!(run_counterexample(&[1]).is_err());
        assert_eq!(parse_n_list("2, 10").unwrap(), vec![2, 10]);
        assert!(parse_n_list("2,x").is_err());
    }

    #[test]
    fn privacy_leakage_tracks_value() {
        let mu = seeded_joint(3, 2, 11, 1.5);
        let cost = GroundCost::from_kind(CostKind::AbsoluteDifference, 3, 2, true).unwrap();
        let path = privacy_tradeoff(&mu, &cost, &[0.0, 0.1, 0.3, 1.0, 3.0], &opts()).unwrap();
        for w in path.windows(2) {
            assert!(w[1].leakage <= w[0].leakage + 1e-9);
        }
        for m in &path {
            assert!((m.leakage - (mu.label_entropy() - m.h_star)).abs() <= 1e-6 + m.fw_gap);
            assert!(m.distortion <= m.epsilon + 1e-9);
        }
        assert!((path[0].leakage - mu.mutual_information_yz()).abs() < 1e-9);
        assert!(path.last().unwrap().leakage < 1e-6);
    }

    #[test]
    fn coarse_sweep_invariants() {
        let (mu, cost) = default_sweep_instance(DEFAULT_SWEEP_SEED);
        let grid = budget_grid(0.0, 2.0, 0.25).unwrap();
        let sweep = run_tradeoff_sweep(&mu, &cost, &grid, &opts()).unwrap();
        let n = grid.len();
        assert!(sweep.failures.is_empty());
        assert!(sweep.epsilon_sat < 2.0, "{}", sweep.epsilon_sat);
        assert!((sweep.loss[0][0] - sweep.clean_entropy).abs() <= 1e-6);
        for a in 0..n {
            for r in 0..n {
                assert!(sweep.loss[a][r] >= sweep.loss[a][a] - 2e-3, "{a} {r}");
                assert!(sweep.loss[a][r] >= sweep.h_star_curve[a] - 1e-9);
                if a > 0 {
                    assert!(sweep.loss[a][r] >= sweep.loss[a - 1][r] - 1e-9);
                }
                if grid[r] >= sweep.epsilon_sat {
                    assert!((sweep.loss[a][r] - sweep.label_entropy).abs() <= 2e-3);
                }
            }
            assert!((sweep.loss[a][a] - sweep.h_star_curve[a]).abs() <= 2e-3);
        }
        assert!(sweep.h_star_curve.windows(2).all(|w| w[0] <= w[1]));
        assert!(run_tradeoff_sweep(&mu, &cost, &[0.5, 1.0], &opts()).is_err());
    }

    #[test]
    fn fixed_point_residual_discriminates() {
        for seed in 0..3u64 {
            let mu = seeded_joint(3, 3, 1000 + seed, 1.0);
            let cost = GroundCost::from_kind(CostKind::AbsoluteDifference, 3, 3, false)
                .unwrap()
                .scaled(0.01)
                .unwrap();
            for lambda in [0.02, 0.1] {
                let fp = run_fixed_point(&mu, &cost, lambda, &opts()).unwrap();
                assert!(fp.converged);
                let best = fp.residual_standard.min(fp.residual_uniform_variant);
                assert!(best <= 1e-3 * (1.0 + lambda * 3f64.ln()), "{best}");
                let sol = penalized_solve(&mu, &cost, lambda, &opts()).unwrap();
                let mixed = sol.nu.mass().iter().map(|m| 0.95 * m + 0.05 / 9.0).collect();
                let pert = JointDistribution::new(3, 3, mixed).unwrap();
                let off = fixed_point_residuals(&pert, &mu, &cost, lambda).unwrap();
                assert!(off.residual_standard.min(off.residual_uniform_variant) >= 10.0 * best);
            }
        }
    }

    #[test]
    fn shift_fit_respects_constraints() {
        // Unconstrained means, then one binding constraint c0 - c1 <= 0.
        let c = fit_shifts(&[1.0, 1.0], &[1.0, -1.0], &[]);
        assert_eq!(c, vec![1.0, -1.0]);
        let c = fit_shifts(&[1.0, 1.0], &[1.0, -1.0], &[(0, 1, 0.0)]);
        assert!((c[0] - c[1]).abs() < 1e-12 && c[0].abs() < 1e-12);
        let c = fit_shifts(&[3.0, 1.0], &[1.0, -1.0], &[(0, 1, 0.0)]);
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12);
    }
}
