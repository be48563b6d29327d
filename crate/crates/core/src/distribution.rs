//! Finite-alphabet probability objects and information measures.
//!
//! Every entropy in this crate is in nats and uses the convention `0 ln 0 = 0`.
//! A point of the product alphabet `X × Y` is addressed either as `(x, y)` or
//! by its flattened index `x * ny + y`; couplings and ground costs use the
//! flattened form.

use crate::error::{invalid, Error, Result};

/// Absolute tolerance on every probability sum checked at construction.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Marginal mass below which a row of a joint is treated as empty.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

#[inline]
pub(crate) fn xlnx(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}

/// Shannon entropy of a mass vector in nats.
pub fn entropy(mass: &[f64]) -> f64 {
    -mass.iter().map(|&m| xlnx(m)).sum::<f64>()
}

/// `H(Y|X)` of a row-major mass slice with `ny` labels per row.
pub(crate) fn conditional_entropy_of(mass: &[f64], ny: usize) -> f64 {
    let mut h = 0.0;
    for row in mass.chunks(ny) {
        let px: f64 = row.iter().sum();
        if px <= 0.0 {
            continue;
        }
        for &m in row {
            if m > 0.0 {
                h -= m * (m / px).ln();
            }
        }
    }
    h
}

fn check_masses(what: &'static str, values: &[f64]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(invalid(what, format!("entry {i} is not finite ({v})")));
        }
        if v < 0.0 {
            return Err(invalid(what, format!("entry {i} is negative ({v})")));
        }
    }
    Ok(())
}

fn check_sum(what: &'static str, label: &str, values: &[f64]) -> Result<()> {
    let total: f64 = values.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(invalid(what, format!("{label} sums to {total}, expected 1")));
    }
    Ok(())
}

/// Probability mass over `X × Y`, stored row-major by `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    nx: usize,
    ny: usize,
    mass: Vec<f64>,
}

impl JointDistribution {
    pub fn new(nx: usize, ny: usize, mass: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(invalid("joint distribution", "alphabets must be nonempty"));
        }
        if mass.len() != nx * ny {
            return Err(invalid(
                "joint distribution",
                format!("expected {} entries, got {}", nx * ny, mass.len()),
            ));
        }
        check_masses("joint distribution", &mass)?;
        check_sum("joint distribution", "mass", &mass)?;
        Ok(Self { nx, ny, mass })
    }

    /// Builds a joint from nonnegative weights, dividing by their total.
    pub fn normalized(nx: usize, ny: usize, weights: Vec<f64>) -> Result<Self> {
        check_masses("joint distribution", &weights)?;
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(invalid("joint distribution", "weights have zero total"));
        }
        Self::new(nx, ny, weights.into_iter().map(|w| w / total).collect())
    }

    /// Solver-internal constructor: the caller guarantees the invariants up to
    /// accumulated rounding, which is renormalized away.
    pub(crate) fn from_solver(nx: usize, ny: usize, mut mass: Vec<f64>) -> Self {
        for m in mass.iter_mut() {
            if *m < 0.0 {
                *m = 0.0;
            }
        }
        let total: f64 = mass.iter().sum();
        debug_assert!((total - 1.0).abs() < 1e-9, "solver mass drifted to {total}");
        if total > 0.0 {
            mass.iter_mut().for_each(|m| *m /= total);
        }
        Self { nx, ny, mass }
    }

    pub fn uniform(nx: usize, ny: usize) -> Self {
        let n = nx * ny;
        Self {
            nx,
            ny,
            mass: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(nx: usize, ny: usize, x: usize, y: usize) -> Self {
        let mut mass = vec![0.0; nx * ny];
        mass[x * ny + y] = 1.0;
        Self { nx, ny, mass }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Number of points of the product alphabet.
    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.mass[x * self.ny + y]
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn into_mass(self) -> Vec<f64> {
        self.mass
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.mass[x * self.ny..(x + 1) * self.ny]
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        (0..self.nx).map(|x| self.row(x).iter().sum()).collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.ny];
        for x in 0..self.nx {
            for (o, &m) in out.iter_mut().zip(self.row(x)) {
                *o += m;
            }
        }
        out
    }

    /// Posterior `p(y|x)` with an explicit record of which rows are supported.
    pub fn posterior(&self, policy: ZeroMassPolicy) -> Posterior {
        let uniform = 1.0 / self.ny as f64;
        let mut cond = Vec::with_capacity(self.len());
        let mut coverage = Vec::with_capacity(self.nx);
        for x in 0..self.nx {
            let row = self.row(x);
            let px: f64 = row.iter().sum();
            if px > SUPPORT_THRESHOLD {
                cond.extend(row.iter().map(|&m| m / px));
                coverage.push(true);
            } else {
                cond.extend(std::iter::repeat(uniform).take(self.ny));
                coverage.push(false);
            }
        }
        Posterior {
            rule: DecisionRule {
                nx: self.nx,
                ny: self.ny,
                cond,
            },
            coverage,
            policy,
        }
    }

    /// `H(Y|X)` in nats.
    pub fn conditional_entropy(&self) -> f64 {
        conditional_entropy_of(&self.mass, self.ny).max(0.0)
    }

    /// `H(Y)` in nats.
    pub fn label_entropy(&self) -> f64 {
        entropy(&self.marginal_y())
    }

    /// Expected log loss `E_p[-ln q(Y|X)]`; `+inf` when `q` assigns zero
    /// probability to a pair that carries mass.
    pub fn cross_entropy_loss(&self, q: &DecisionRule) -> Result<f64> {
        if q.nx != self.nx || q.ny != self.ny {
            return Err(Error::DimensionMismatch(format!(
                "joint is {}x{}, rule is {}x{}",
                self.nx, self.ny, q.nx, q.ny
            )));
        }
        let mut loss = 0.0;
        for (&p, &qv) in self.mass.iter().zip(&q.cond) {
            if p > 0.0 {
                if qv <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                loss -= p * qv.ln();
            }
        }
        Ok(loss)
    }

    /// Joint of `(Z, Y)` obtained by passing `X` through `k` while keeping the label.
    pub fn push_forward(&self, k: &Channel) -> Result<JointDistribution> {
        self.check_channel(k)?;
        let mut out = vec![0.0; k.nz * self.ny];
        for x in 0..self.nx {
            for y in 0..self.ny {
                let m = self.get(x, y);
                if m == 0.0 {
                    continue;
                }
                for (z, &w) in k.slice(x, y).iter().enumerate() {
                    out[z * self.ny + y] += m * w;
                }
            }
        }
        Ok(JointDistribution::from_solver(k.nz, self.ny, out))
    }

    /// `E[d(X, Z)]` under `self ⊗ k`, with `d(x, z)` read from the label-fixed
    /// slice of `cost`.
    pub fn expected_distortion(&self, k: &Channel, cost: &GroundCost) -> Result<f64> {
        self.check_channel(k)?;
        if cost.nx != self.nx || cost.ny != self.ny || k.nz != self.nx {
            return Err(Error::DimensionMismatch(
                "cost alphabets must match the joint and the channel output".into(),
            ));
        }
        let mut total = 0.0;
        for x in 0..self.nx {
            for y in 0..self.ny {
                let m = self.get(x, y);
                if m == 0.0 {
                    continue;
                }
                for (z, &w) in k.slice(x, y).iter().enumerate() {
                    if w > 0.0 {
                        total += m * w * cost.feature_cost(x, z, y);
                    }
                }
            }
        }
        Ok(total)
    }

    /// `I(Y; Z) = H(Y) - H(Y|Z)` for a joint over `Z × Y`.
    pub fn mutual_information_yz(&self) -> f64 {
        (self.label_entropy() - self.conditional_entropy()).max(0.0)
    }

    fn check_channel(&self, k: &Channel) -> Result<()> {
        if k.nx != self.nx || k.ny != self.ny {
            return Err(Error::DimensionMismatch(format!(
                "joint is {}x{}, channel input is {}x{}",
                self.nx, self.ny, k.nx, k.ny
            )));
        }
        Ok(())
    }
}

/// What a caller wants to see for rows of `X` that carry no mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroMassPolicy {
    /// Unsupported rows read as the uniform distribution.
    #[default]
    Uniform,
    /// Unsupported rows are withheld by [`Posterior::row`].
    Flagged,
}

/// Posterior rule together with its coverage mask over `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub rule: DecisionRule,
    pub coverage: Vec<bool>,
    pub policy: ZeroMassPolicy,
}

impl Posterior {
    pub fn row(&self, x: usize) -> Option<&[f64]> {
        match (self.policy, self.coverage[x]) {
            (ZeroMassPolicy::Flagged, false) => None,
            _ => Some(self.rule.row(x)),
        }
    }
}

/// Soft classifier `q(y|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRule {
    nx: usize,
    ny: usize,
    cond: Vec<f64>,
}

impl DecisionRule {
    pub fn new(nx: usize, ny: usize, cond: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || cond.len() != nx * ny {
            return Err(invalid("decision rule", "shape does not match alphabets"));
        }
        check_masses("decision rule", &cond)?;
        for x in 0..nx {
            check_sum("decision rule", &format!("row {x}"), &cond[x * ny..(x + 1) * ny])?;
        }
        Ok(Self { nx, ny, cond })
    }

    pub fn uniform(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            cond: vec![1.0 / ny as f64; nx * ny],
        }
    }

    pub(crate) fn from_rows_unchecked(nx: usize, ny: usize, cond: Vec<f64>) -> Self {
        Self { nx, ny, cond }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.cond[x * self.ny + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.cond[x * self.ny..(x + 1) * self.ny]
    }

    pub fn values(&self) -> &[f64] {
        &self.cond
    }
}

/// Randomized perturbation `P(Z | X, Y)`; the slice for `(x, y)` is a
/// distribution over `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    nx: usize,
    ny: usize,
    nz: usize,
    cond: Vec<f64>,
}

impl Channel {
    pub fn new(nx: usize, ny: usize, nz: usize, cond: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 || cond.len() != nx * ny * nz {
            return Err(invalid("channel", "shape does not match alphabets"));
        }
        check_masses("channel", &cond)?;
        for (i, slice) in cond.chunks(nz).enumerate() {
            check_sum("channel", &format!("slice ({}, {})", i / ny, i % ny), slice)?;
        }
        Ok(Self { nx, ny, nz, cond })
    }

    pub fn identity(nx: usize, ny: usize) -> Self {
        let mut cond = vec![0.0; nx * ny * nx];
        for x in 0..nx {
            for y in 0..ny {
                cond[(x * ny + y) * nx + x] = 1.0;
            }
        }
        Self {
            nx,
            ny,
            nz: nx,
            cond,
        }
    }

    pub(crate) fn from_slices_unchecked(nx: usize, ny: usize, nz: usize, cond: Vec<f64>) -> Self {
        Self { nx, ny, nz, cond }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn slice(&self, x: usize, y: usize) -> &[f64] {
        let start = (x * self.ny + y) * self.nz;
        &self.cond[start..start + self.nz]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.slice(x, y)[z]
    }

    pub fn values(&self) -> &[f64] {
        &self.cond
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Explicit,
    AbsoluteDifference,
    SquaredDifference,
    Hamming,
}

impl CostKind {
    fn scalar(self, a: usize, b: usize) -> f64 {
        let diff = a as f64 - b as f64;
        match self {
            CostKind::AbsoluteDifference => diff.abs(),
            CostKind::SquaredDifference => diff * diff,
            CostKind::Hamming => f64::from(u8::from(a != b)),
            CostKind::Explicit => unreachable!("explicit costs carry their own matrix"),
        }
    }
}

/// Ground cost over pairs of `(x, y)` points; `+inf` marks forbidden moves.
///
/// For the parametric kinds the base cost is `c(x, x')` on feature indices.
/// A label-preserving cost equals `c(x, x')` when the labels agree and `+inf`
/// otherwise; a non-label-preserving one charges `c(x, x') + c(y, y')`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundCost {
    kind: CostKind,
    label_preserving: bool,
    nx: usize,
    ny: usize,
    matrix: Vec<f64>,
}

impl GroundCost {
    pub fn from_kind(kind: CostKind, nx: usize, ny: usize, label_preserving: bool) -> Result<Self> {
        if kind == CostKind::Explicit {
            return Err(invalid("ground cost", "explicit costs need a matrix"));
        }
        if nx == 0 || ny == 0 {
            return Err(invalid("ground cost", "alphabets must be nonempty"));
        }
        let n = nx * ny;
        let mut matrix = vec![0.0; n * n];
        for a in 0..n {
            let (x, y) = (a / ny, a % ny);
            for b in 0..n {
                let (xp, yp) = (b / ny, b % ny);
                matrix[a * n + b] = if label_preserving {
                    if y == yp {
                        kind.scalar(x, xp)
                    } else {
                        f64::INFINITY
                    }
                } else {
                    kind.scalar(x, xp) + kind.scalar(y, yp)
                };
            }
        }
        Ok(Self {
            kind,
            label_preserving,
            nx,
            ny,
            matrix,
        })
    }

    /// Label-preserving cost from an `nx × nx` feature cost.
    pub fn explicit_base(nx: usize, ny: usize, base: &[f64]) -> Result<Self> {
        if base.len() != nx * nx {
            return Err(invalid("ground cost", format!("base must have {} entries", nx * nx)));
        }
        check_cost_entries(base, nx)?;
        let n = nx * ny;
        let mut matrix = vec![f64::INFINITY; n * n];
        for x in 0..nx {
            for xp in 0..nx {
                for y in 0..ny {
                    matrix[(x * ny + y) * n + xp * ny + y] = base[x * nx + xp];
                }
            }
        }
        Ok(Self {
            kind: CostKind::Explicit,
            label_preserving: true,
            nx,
            ny,
            matrix,
        })
    }

    /// Cost given as a full `(nx·ny) × (nx·ny)` matrix.
    pub fn explicit(nx: usize, ny: usize, matrix: Vec<f64>) -> Result<Self> {
        let n = nx * ny;
        if nx == 0 || ny == 0 || matrix.len() != n * n {
            return Err(invalid("ground cost", format!("matrix must have {} entries", n * n)));
        }
        check_cost_entries(&matrix, n)?;
        let label_preserving = (0..n).all(|a| {
            (0..n).all(|b| (a % ny == b % ny) || matrix[a * n + b] == f64::INFINITY)
        }) && (0..nx).all(|x| {
            (0..nx).all(|xp| {
                (1..ny).all(|y| matrix[(x * ny + y) * n + xp * ny + y] == matrix[(x * ny) * n + xp * ny])
            })
        }) && ny > 1;
        Ok(Self {
            kind: CostKind::Explicit,
            label_preserving,
            nx,
            ny,
            matrix,
        })
    }

    /// Same cost multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(invalid("ground cost", "scale factor must be positive"));
        }
        Ok(Self {
            kind: CostKind::Explicit,
            label_preserving: self.label_preserving,
            nx: self.nx,
            ny: self.ny,
            matrix: self.matrix.iter().map(|c| c * factor).collect(),
        })
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn label_preserving(&self) -> bool {
        self.label_preserving
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn num_points(&self) -> usize {
        self.nx * self.ny
    }

    /// Cost between flattened points `a` and `b`.
    #[inline]
    pub fn between(&self, a: usize, b: usize) -> f64 {
        self.matrix[a * self.num_points() + b]
    }

    /// Cost of moving feature `x` to `z` while keeping label `y`.
    #[inline]
    pub fn feature_cost(&self, x: usize, z: usize, y: usize) -> f64 {
        self.between(x * self.ny + y, z * self.ny + y)
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Largest finite entry.
    pub fn max_finite(&self) -> f64 {
        self.matrix
            .iter()
            .copied()
            .filter(|c| c.is_finite())
            .fold(0.0, f64::max)
    }

    pub fn is_all_finite(&self) -> bool {
        self.matrix.iter().all(|c| c.is_finite())
    }
}

fn check_cost_entries(matrix: &[f64], n: usize) -> Result<()> {
    for (i, &c) in matrix.iter().enumerate() {
        if c.is_nan() || c < 0.0 {
            return Err(invalid("ground cost", format!("entry {i} must be >= 0, got {c}")));
        }
    }
    for a in 0..n {
        if matrix[a * n + a] != 0.0 {
            return Err(invalid("ground cost", format!("diagonal entry {a} is not zero")));
        }
    }
    Ok(())
}

/// Binary entropy `h2(p)` in nats.
pub fn binary_entropy(p: f64) -> f64 {
    -xlnx(p) - xlnx(1.0 - p)
}
