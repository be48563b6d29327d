//! The classifier-versus-adversary game: robust rules, best responses,
//! saddle certificates and the value of deterministic attacks.

use rayon::prelude::*;

use crate::distribution::{DecisionRule, GroundCost, JointDistribution};
use crate::error::{invalid, Error, Result};
use crate::maxent::{max_conditional_entropy, ConstraintKind, ConstraintSpec, SolveReport, SolverOptions};

/// Rows whose marginal under the maximizer exceeds this pin the rule.
pub const COVERAGE_THRESHOLD: f64 = 1e-9;

/// Largest number of deterministic maps [`deterministic_maximin`] enumerates.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

const DEFAULT_CLAMP: f64 = 1e-12;

/// A minimax rule together with the rows the maximizer actually pins.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustRule {
    pub rule: DecisionRule,
    pub coverage: Vec<bool>,
}

/// Reads the robust rule off a maximizer: its posterior where it has mass.
///
/// Rows the maximizer leaves empty get the label distribution the solver
/// certified against there (its supergradient choice), so the worst-case
/// loss of the returned rule is bounded by `h_star + fw_gap`. Reports that
/// carry no such choice fall back to the label marginal restricted to the
/// labels the adversary can bring to the row.
pub fn extract_rule(report: &SolveReport, spec: &ConstraintSpec) -> RobustRule {
    let nu = &report.nu_star;
    let (nx, ny) = (nu.nx(), nu.ny());
    let prior = if report.row_rule.len() == nx {
        report.row_rule.clone()
    } else {
        spec.empty_row_prior(nu)
    };
    let mut cond = Vec::with_capacity(nx * ny);
    let mut coverage = Vec::with_capacity(nx);
    for (x, row) in nu.mass().chunks(ny).enumerate() {
        let px: f64 = row.iter().sum();
        if px > COVERAGE_THRESHOLD {
            cond.extend(row.iter().map(|m| m / px));
            coverage.push(true);
        } else {
            cond.extend_from_slice(&prior[x]);
            coverage.push(false);
        }
    }
    RobustRule {
        rule: DecisionRule::from_rows_unchecked(nx, ny, cond),
        coverage,
    }
}

/// The adversary's best reply to a fixed rule.
#[derive(Debug, Clone)]
pub struct AttackResponse {
    pub nu: JointDistribution,
    /// Worst-case log-loss; entries with `q = 0` count as `ln(1/δ)`.
    pub loss: f64,
    /// The reply puts mass where the rule assigns zero probability, so the
    /// true worst-case loss is infinite.
    pub unbounded: bool,
}

/// Maximizes the (linear) loss `L(ν, q)` over the set with the default clamp.
pub fn attack_best_response(q: &DecisionRule, spec: &ConstraintSpec) -> Result<AttackResponse> {
    attack_best_response_clamped(q, spec, DEFAULT_CLAMP)
}

/// [`attack_best_response`] with an explicit clamp `δ`.
pub fn attack_best_response_clamped(
    q: &DecisionRule,
    spec: &ConstraintSpec,
    delta: f64,
) -> Result<AttackResponse> {
    let mu = &spec.reference;
    if q.nx() != mu.nx() || q.ny() != mu.ny() {
        return Err(Error::DimensionMismatch("rule and constraint alphabets differ".into()));
    }
    let gain: Vec<f64> = q.values().iter().map(|&p| -p.max(delta).ln()).collect();
    let best = spec.linear_oracle(&gain)?;
    let target = best.target();
    let unbounded = target
        .iter()
        .zip(q.values())
        .any(|(&m, &p)| m > 0.0 && p == 0.0);
    let loss = target.iter().zip(&gain).map(|(m, g)| m * g).sum();
    Ok(AttackResponse {
        nu: JointDistribution::from_solver(mu.nx(), mu.ny(), target),
        loss,
        unbounded,
    })
}

/// Both sides of the game value, from one entropy solve and one best reply.
#[derive(Debug, Clone)]
pub struct SaddleCertificate {
    /// `max_ν L(ν, q*)`.
    pub minimax_upper: f64,
    /// `h_star` of the entropy solve.
    pub maximin_lower: f64,
    pub gap: f64,
    pub unbounded: bool,
    pub rule: RobustRule,
    pub report: SolveReport,
}

pub fn saddle_gap(spec: &ConstraintSpec, opts: &SolverOptions) -> Result<SaddleCertificate> {
    let report = max_conditional_entropy(spec, opts)?;
    let rule = extract_rule(&report, spec);
    let reply = attack_best_response_clamped(&rule.rule, spec, opts.gradient_clamp)?;
    Ok(SaddleCertificate {
        minimax_upper: reply.loss,
        maximin_lower: report.h_star,
        gap: reply.loss - report.h_star,
        unbounded: reply.unbounded,
        rule,
        report,
    })
}

/// Deterministic attacks against stochastic ones on the same budget.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DeterministicAttackReport {
    /// Best `H(Y|Z)` reachable by a deterministic map `z = g(x, y)`.
    pub maximin_value: f64,
    /// `g` on the flattened points of the reference (unsupported points map to themselves).
    pub maximin_map: Vec<usize>,
    /// Loss of the best rule against a per-point worst-case adversary.
    pub minimax_value: f64,
    /// `h_star` of the max-distortion channel set with the same budget.
    pub stochastic_value: f64,
}

/// Features each supported point may be moved to, in support order.
fn balls(mu: &JointDistribution, cost: &GroundCost, epsilon: f64) -> Result<Vec<(usize, Vec<usize>)>> {
    if cost.nx() != mu.nx() || cost.ny() != mu.ny() {
        return Err(Error::DimensionMismatch("cost and reference alphabets differ".into()));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(invalid("epsilon", format!("must be >= 0, got {epsilon}")));
    }
    let (nx, ny) = (mu.nx(), mu.ny());
    Ok((0..nx * ny)
        .filter(|&a| mu.mass()[a] > 0.0)
        .map(|a| {
            let (x, y) = (a / ny, a % ny);
            let ball = (0..nx)
                .filter(|&z| cost.feature_cost(x, z, y) <= epsilon * (1.0 + 1e-12) + 1e-15)
                .collect();
            (a, ball)
        })
        .collect())
}

/// `max_g H(Y | g(X, Y))` over deterministic maps with `d(X, g) <= ε`, by enumeration.
pub fn deterministic_maximin(
    mu: &JointDistribution,
    cost: &GroundCost,
    epsilon: f64,
) -> Result<(f64, Vec<usize>)> {
    let balls = balls(mu, cost, epsilon)?;
    let count: f64 = balls.iter().map(|(_, b)| b.len() as f64).product();
    if count > ENUMERATION_LIMIT as f64 {
        return Err(Error::TooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let (nx, ny) = (mu.nx(), mu.ny());
    let decode = |mut index: u64| -> Vec<usize> {
        balls
            .iter()
            .map(|(_, ball)| {
                let pick = ball[(index % ball.len() as u64) as usize];
                index /= ball.len() as u64;
                pick
            })
            .collect()
    };
    let value_of = |picks: &[usize]| {
        let mut joint = vec![0.0; nx * ny];
        for ((a, _), &z) in balls.iter().zip(picks) {
            joint[z * ny + a % ny] += mu.mass()[*a];
        }
        crate::distribution::conditional_entropy_of(&joint, ny)
    };
    let (value, index) = (0..count as u64)
        .into_par_iter()
        .map(|i| (value_of(&decode(i)), i))
        .reduce(
            || (f64::NEG_INFINITY, u64::MAX),
            |a, b| match a.0.total_cmp(&b.0) {
                std::cmp::Ordering::Less => b,
                std::cmp::Ordering::Greater => a,
                std::cmp::Ordering::Equal => if a.1 <= b.1 { a } else { b },
            },
        );
    let mut map: Vec<usize> = (0..nx * ny).map(|a| a / ny).collect();
    for ((a, _), z) in balls.iter().zip(decode(index)) {
        map[*a] = z;
    }
    Ok((value, map))
}

/// Euclidean projection onto `{q : q_i >= floor, Σ q_i = 1}`.
fn project_floored_simplex(v: &mut [f64], floor: f64) {
    let budget = 1.0 - floor * v.len() as f64;
    let mut sorted: Vec<f64> = v.iter().map(|x| x - floor).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        acc += s;
        let t = (acc - budget) / (k + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = floor + (*x - floor - theta).max(0.0);
    }
}

const SUBGRADIENT_STEPS: usize = 20_000;
const SUBGRADIENT_STEP0: f64 = 0.1;

/// `min_q Σ μ(x,y) max_{z ∈ ball(x)} -ln q(y|z)`: the best rule against an
/// adversary who sees the rule and moves each point deterministically.
///
/// Projected subgradient descent with normalized `1/√t` steps; the best
/// iterate is returned, so the value is an upper bound on the minimum.
pub fn deterministic_minimax(
    mu: &JointDistribution,
    cost: &GroundCost,
    epsilon: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    opts.validate()?;
    let balls = balls(mu, cost, epsilon)?;
    let (nx, ny) = (mu.nx(), mu.ny());
    let floor = opts.gradient_clamp;
    let mut q = vec![1.0 / ny as f64; nx * ny];
    let mut best = f64::INFINITY;
    let mut grad = vec![0.0; nx * ny];
    for t in 1..=SUBGRADIENT_STEPS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        for (a, ball) in &balls {
            let y = a % ny;
            let z = ball
                .iter()
                .copied()
                .min_by(|&i, &j| q[i * ny + y].total_cmp(&q[j * ny + y]))
                .expect("balls contain the point itself");
            let p = q[z * ny + y].max(floor);
            let m = mu.mass()[*a];
            value -= m * p.ln();
            grad[z * ny + y] -= m / p;
        }
        best = best.min(value);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let step = SUBGRADIENT_STEP0 / (t as f64).sqrt() / norm;
        for (v, g) in q.iter_mut().zip(&grad) {
            *v -= step * g;
        }
        for row in q.chunks_mut(ny) {
            project_floored_simplex(row, floor);
        }
    }
    Ok(best)
}

/// Deterministic maximin and minimax next to the stochastic value, for the
/// max-distortion budget `ε`.
pub fn deterministic_attack_report(
    mu: &JointDistribution,
    cost: &GroundCost,
    epsilon: f64,
    opts: &SolverOptions,
) -> Result<DeterministicAttackReport> {
    let (maximin_value, maximin_map) = deterministic_maximin(mu, cost, epsilon)?;
    let minimax_value = deterministic_minimax(mu, cost, epsilon, opts)?;
    let spec = ConstraintSpec::new(ConstraintKind::MaxDistortionChannel, epsilon, cost.clone(), mu.clone())?;
    let stochastic_value = max_conditional_entropy(&spec, opts)?.h_star;
    Ok(DeterministicAttackReport {
        maximin_value,
        maximin_map,
        minimax_value,
        stochastic_value,
    })
}
