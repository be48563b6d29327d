//! Problem and report files, sweep CSV, SVG plots and the command line.
//!
//! Problem files are JSON with a strict schema; `null` in a cost matrix
//! stands for a forbidden move.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::distribution::{CostKind, DecisionRule, GroundCost, JointDistribution};
use crate::error::{Error, Result};
use crate::experiments::{
    budget_grid, default_sweep_instance, design_privacy_mechanism,
    parse_n_list, privacy_tradeoff, run_counterexample, run_fixed_point, run_toy_example,
    run_tradeoff_sweep, seeded_joint, PrivacyMechanism, SweepGrid, DEFAULT_SHARPNESS,
    DEFAULT_SWEEP_SEED,
};
use crate::game::{deterministic_attack_report, saddle_gap};
use crate::maxent::{ConstraintKind, ConstraintSpec, LineSearch, SolverOptions};

pub const FORMAT_VERSION: u32 = 1;
pub const SEED_ENV: &str = "ROBUST_ENTROPY_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKindName {
    Explicit,
    AbsoluteDifference,
    SquaredDifference,
    Hamming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKindName {
    WassersteinBall,
    ExpectedDistortionChannel,
    MaxDistortionChannel,
}

impl From<ConstraintKindName> for ConstraintKind {
    fn from(k: ConstraintKindName) -> Self {
        match k {
            ConstraintKindName::WassersteinBall => ConstraintKind::WassersteinBall,
            ConstraintKindName::ExpectedDistortionChannel => ConstraintKind::ExpectedDistortionChannel,
            ConstraintKindName::MaxDistortionChannel => ConstraintKind::MaxDistortionChannel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearchName {
    Harmonic,
    Golden,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub kind: CostKindName,
    #[serde(default = "yes")]
    pub label_preserving: bool,
    /// Explicit kind only: `nx × nx` feature costs when label-preserving,
    /// otherwise the full `(nx·ny) × (nx·ny)` matrix. Row-major; `null` = forbidden.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub kind: ConstraintKindName,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fw_gap_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_clamp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_search: Option<LineSearchName>,
}

/// On-disk problem description.
///
/// `mu` may be omitted, in which case it is drawn with [`seeded_joint`] from
/// `seed` (default [`DEFAULT_SWEEP_SEED`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub version: u32,
    pub nx: usize,
    pub ny: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    pub cost: CostSection,
    pub constraint: ConstraintSection,
    #[serde(default)]
    pub options: OptionsSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A problem file turned into solver inputs.
#[derive(Debug, Clone)]
pub struct Problem {
    pub file: ProblemFile,
    pub mu: JointDistribution,
    pub cost: GroundCost,
    pub spec: ConstraintSpec,
    pub opts: SolverOptions,
}

fn validation(path: impl Into<String>, message: impl ToString) -> Error {
    Error::Validation {
        path: path.into(),
        message: message.to_string(),
    }
}

fn reason(e: Error) -> String {
    match e {
        Error::Invalid { reason, .. } => reason,
        other => other.to_string(),
    }
}

impl ProblemFile {
    /// Builds the solver inputs; errors name the offending field.
    pub fn resolve(&self) -> Result<Problem> {
        if self.version != FORMAT_VERSION {
            return Err(validation("version", format!("unsupported version {}, expected {FORMAT_VERSION}", self.version)));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(validation(if self.nx == 0 { "nx" } else { "ny" }, "must be positive"));
        }
        if self.nx.saturating_mul(self.ny) > 400 {
            return Err(validation("nx", "alphabets beyond 400 points are not supported"));
        }
        let seed = self.seed.unwrap_or(DEFAULT_SWEEP_SEED);
        let mu = match &self.mu {
            Some(mass) => {
                if let Some(i) = mass.iter().position(|m| !m.is_finite() || *m < 0.0) {
                    return Err(validation(format!("mu[{i}]"), format!("mass must be finite and nonnegative, got {}", mass[i])));
                }
                JointDistribution::new(self.nx, self.ny, mass.clone()).map_err(|e| validation("mu", reason(e)))?
            }
            None => seeded_joint(self.nx, self.ny, seed, DEFAULT_SHARPNESS),
        };
        let cost = self.cost_matrix()?;
        let eps = self.constraint.epsilon;
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(validation("constraint.epsilon", format!("must be finite and nonnegative, got {eps}")));
        }
        let spec = ConstraintSpec::new(self.constraint.kind.into(), eps, cost.clone(), mu.clone())
            .map_err(|e| validation("constraint.kind", reason(e)))?;
        let defaults = SolverOptions::default();
        let o = &self.options;
        let opts = SolverOptions {
            max_iterations: o.max_iterations.unwrap_or(defaults.max_iterations),
            fw_gap_tolerance: o.fw_gap_tolerance.unwrap_or(defaults.fw_gap_tolerance),
            gradient_clamp: o.gradient_clamp.unwrap_or(defaults.gradient_clamp),
            line_search: match o.line_search {
                Some(LineSearchName::Harmonic) => LineSearch::Harmonic,
                Some(LineSearchName::Golden) => LineSearch::Golden,
                None => defaults.line_search,
            },
            seed,
        };
        opts.validate().map_err(|e| validation("options", reason(e)))?;
        Ok(Problem {
            file: ProblemFile {
                mu: Some(mu.mass().to_vec()),
                ..self.clone()
            },
            mu,
            cost,
            spec,
            opts,
        })
    }

    fn cost_matrix(&self) -> Result<GroundCost> {
        let (nx, ny) = (self.nx, self.ny);
        let c = &self.cost;
        let kind = match c.kind {
            CostKindName::Explicit => CostKind::Explicit,
            CostKindName::AbsoluteDifference => CostKind::AbsoluteDifference,
            CostKindName::SquaredDifference => CostKind::SquaredDifference,
            CostKindName::Hamming => CostKind::Hamming,
        };
        match (kind, &c.matrix) {
            (CostKind::Explicit, None) => Err(validation("cost.matrix", "required for the explicit kind")),
            (CostKind::Explicit, Some(m)) => {
                let values: Vec<f64> = m.iter().map(|v| v.unwrap_or(f64::INFINITY)).collect();
                let built = if c.label_preserving {
                    GroundCost::explicit_base(nx, ny, &values)
                } else {
                    GroundCost::explicit(nx, ny, values)
                };
                built.map_err(|e| validation("cost.matrix", reason(e)))
            }
            (_, Some(_)) => Err(validation("cost.matrix", "only allowed for the explicit kind")),
            (kind, None) => GroundCost::from_kind(kind, nx, ny, c.label_preserving).map_err(|e| validation("cost", reason(e))),
        }
    }
}

fn from_json<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        match inner.classify() {
            serde_json::error::Category::Data => validation(path, inner),
            _ => Error::Syntax(inner.to_string()),
        }
    })?;
    de.end().map_err(|e| Error::Syntax(e.to_string()))?;
    Ok(value)
}

/// Parses and validates a problem file.
pub fn parse_problem(bytes: &[u8]) -> Result<ProblemFile> {
    let file: ProblemFile = from_json(bytes)?;
    file.resolve()?;
    Ok(file)
}

/// Worst-case certificate as written to reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSection {
    pub minimax_upper: f64,
    pub maximin_lower: f64,
    pub gap: f64,
    pub unbounded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub problem: ProblemFile,
    pub h_star: f64,
    pub fw_gap: f64,
    pub iterations: usize,
    pub multiplier: f64,
    pub converged: bool,
    /// Rows indexed by `x`.
    pub nu_star: Vec<Vec<f64>>,
    pub q_star: Vec<Vec<f64>>,
    pub coverage: Vec<bool>,
    pub certificate: CertificateSection,
    pub wall_time_ms: f64,
}

fn rows(values: &[f64], width: usize) -> Vec<Vec<f64>> {
    values.chunks(width).map(<[f64]>::to_vec).collect()
}

/// Solves a problem and certifies the result.
pub fn solve_problem(problem: &Problem) -> Result<ReportFile> {
    let start = Instant::now();
    let cert = saddle_gap(&problem.spec, &problem.opts)?;
    let ny = problem.mu.ny();
    Ok(ReportFile {
        problem: problem.file.clone(),
        h_star: cert.report.h_star,
        fw_gap: cert.report.fw_gap,
        iterations: cert.report.iterations,
        multiplier: cert.report.multiplier,
        converged: cert.report.converged,
        nu_star: rows(cert.report.nu_star.mass(), ny),
        q_star: rows(cert.rule.rule.values(), ny),
        coverage: cert.rule.coverage.clone(),
        certificate: CertificateSection {
            minimax_upper: cert.minimax_upper,
            maximin_lower: cert.maximin_lower,
            gap: cert.gap,
            unbounded: cert.unbounded,
        },
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

impl ReportFile {
    /// Re-checks what a solve guarantees: a valid maximizer whose entropy is
    /// `h_star`, valid rule rows, and weak duality of the certificate.
    pub fn check(&self) -> Result<()> {
        let problem = self.problem.resolve()?;
        let (nx, ny) = (problem.mu.nx(), problem.mu.ny());
        let shape_ok = |m: &Vec<Vec<f64>>| m.len() == nx && m.iter().all(|r| r.len() == ny);
        if !shape_ok(&self.nu_star) || !shape_ok(&self.q_star) || self.coverage.len() != nx {
            return Err(validation("nu_star", "shape does not match the problem"));
        }
        let nu = JointDistribution::new(nx, ny, self.nu_star.concat()).map_err(|e| validation("nu_star", reason(e)))?;
        DecisionRule::new(nx, ny, self.q_star.concat()).map_err(|e| validation("q_star", reason(e)))?;
        if (nu.conditional_entropy() - self.h_star).abs() > 1e-9 {
            return Err(validation("h_star", "does not match the entropy of nu_star"));
        }
        if !(self.fw_gap >= 0.0) {
            return Err(validation("fw_gap", "must be nonnegative"));
        }
        let c = &self.certificate;
        if !c.unbounded && c.maximin_lower > c.minimax_upper + 1e-9 {
            return Err(validation("certificate", "lower bound exceeds upper bound"));
        }
        if !problem.spec.contains(&nu, 1e-7)? {
            return Err(validation("nu_star", "outside the constraint set"));
        }
        Ok(())
    }
}

/// Parses a report and re-checks it.
pub fn parse_report(bytes: &[u8]) -> Result<ReportFile> {
    let report: ReportFile = from_json(bytes)?;
    report.check()?;
    Ok(report)
}

/// Writes every float with 17 significant digits.
struct FullPrecision<'a>(serde_json::ser::PrettyFormatter<'a>);

macro_rules! forward {
    ($($name:ident($($arg:ident: $ty:ty),*);)*) => {
        $(fn $name<W: ?Sized + std::io::Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> std::io::Result<()> {
            self.0.$name(w $(, $arg)*)
        })*
    };
}

impl serde_json::ser::Formatter for FullPrecision<'_> {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        write!(w, "{value:.16e}")
    }

    forward! {
        begin_array();
        end_array();
        begin_array_value(first: bool);
        end_array_value();
        begin_object();
        end_object();
        begin_object_key(first: bool);
        end_object_key();
        begin_object_value();
        end_object_value();
    }
}

/// Pretty JSON with 17 significant digits per float; non-finite values become `null`.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision(serde_json::ser::PrettyFormatter::new()));
    value.serialize(&mut ser).expect("in-memory serialization");
    out.push(b'\n');
    String::from_utf8(out).expect("JSON is UTF-8")
}

pub const CSV_HEADER: &str = "epsilon_attack,epsilon_rule,loss_nats,h_star_nats,converged";

/// One row per cell, sorted by attack budget then rule budget.
pub fn write_sweep_csv(grid: &SweepGrid) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (a, &ea) in grid.epsilon_attack.iter().enumerate() {
        for (r, &er) in grid.epsilon_rule.iter().enumerate() {
            let converged = grid.converged[a] && grid.converged[r];
            writeln!(out, "{ea},{er},{},{},{converged}", grid.loss[a][r], grid.h_star_curve[a]).unwrap();
        }
    }
    out
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 30.0, 55.0); // left, right, top, bottom

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: &[f64], ys: impl Iterator<Item = f64>) -> Self {
        let span = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let (xlo, xhi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let (ylo, yhi) = ys
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (ylo, yhi) = if ylo.is_finite() { (ylo, yhi) } else { (0.0, 1.0) };
        let pad = 0.05 * (yhi - ylo);
        Self {
            x: span(xlo, xhi),
            y: span(ylo - pad, yhi + pad),
        }
    }

    fn px(&self, v: f64) -> f64 {
        MARGIN.0 + (v - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - MARGIN.0 - MARGIN.1)
    }

    fn py(&self, v: f64) -> f64 {
        HEIGHT - MARGIN.3 - (v - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - MARGIN.2 - MARGIN.3)
    }
}

/// Blue-to-red ramp.
fn shade(k: usize, n: usize) -> String {
    let t = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
    let r = (40.0 + 200.0 * t).round() as u8;
    let b = (220.0 - 190.0 * t).round() as u8;
    format!("#{r:02x}40{b:02x}")
}

fn polyline(out: &mut String, frame: &Frame, xs: &[f64], ys: &[f64], style: &str) {
    let points: Vec<String> = xs
        .iter()
        .zip(ys)
        .filter(|(_, y)| y.is_finite())
        .map(|(&x, &y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
        .collect();
    if points.len() == 1 {
        let (x, y) = points[0].split_once(',').unwrap();
        writeln!(out, r#"<circle cx="{x}" cy="{y}" r="2.5" {style}/>"#).unwrap();
    } else if !points.is_empty() {
        writeln!(out, r#"<polyline fill="none" {style} points="{}"/>"#, points.join(" ")).unwrap();
    }
}

fn chart(title: &str, xlabel: &str, frame: &Frame, body: &str) -> String {
    let mut out = String::new();
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    let (x0, x1) = (MARGIN.0, WIDTH - MARGIN.1);
    let (y0, y1) = (HEIGHT - MARGIN.3, MARGIN.2);
    writeln!(out, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#).unwrap();
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = frame.x.0 + t * (frame.x.1 - frame.x.0);
        let yv = frame.y.0 + t * (frame.y.1 - frame.y.0);
        let (px, py) = (frame.px(xv), frame.py(yv));
        writeln!(out, r#"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.2}</text>"#, y0 + 5.0, y0 + 18.0).unwrap();
        writeln!(out, r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.3}</text>"#, x0 - 5.0, x0 - 8.0, py + 4.0).unwrap();
    }
    writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xlabel}</text>"#, 0.5 * (x0 + x1), HEIGHT - 12.0).unwrap();
    writeln!(out, r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">loss (nats)</text>"#, 0.5 * (y0 + y1), 0.5 * (y0 + y1)).unwrap();
    writeln!(out, r#"<text x="{:.2}" y="18" text-anchor="middle">{title}</text>"#, 0.5 * (x0 + x1)).unwrap();
    out.push_str(body);
    out.push_str("</svg>\n");
    out
}

/// Left: loss against the rule budget, one curve per attack budget.
/// Right: loss against the attack budget, one curve per rule budget, with
/// the game value dashed.
pub fn render_plots(grid: &SweepGrid) -> (String, String) {
    let values = || grid.loss.iter().flatten().copied().chain(grid.h_star_curve.iter().copied());

    let frame = Frame::new(&grid.epsilon_rule, values());
    let mut body = String::new();
    let n = grid.epsilon_attack.len();
    for a in 0..n {
        let style = format!(r#"stroke="{}" fill="{}" stroke-width="1.2""#, shade(a, n), shade(a, n));
        polyline(&mut body, &frame, &grid.epsilon_rule, &grid.loss[a], &style);
    }
    let left = chart("loss vs rule budget (one curve per attack budget)", "rule budget", &frame, &body);

    let frame = Frame::new(&grid.epsilon_attack, values());
    let mut body = String::new();
    let n = grid.epsilon_rule.len();
    for r in 0..n {
        let column: Vec<f64> = grid.loss.iter().map(|row| row[r]).collect();
        let style = format!(r#"stroke="{}" fill="{}" stroke-width="1.2""#, shade(r, n), shade(r, n));
        polyline(&mut body, &frame, &grid.epsilon_attack, &column, &style);
    }
    polyline(
        &mut body,
        &frame,
        &grid.epsilon_attack,
        &grid.h_star_curve,
        r#"stroke="black" fill="black" stroke-width="2" stroke-dasharray="6 4""#,
    );
    let right = chart("loss vs attack budget (dashed: game value)", "attack budget", &frame, &body);
    (left, right)
}

#[derive(Debug, Parser)]
#[command(name = "robust-entropy", version, about = "Exact robust classification games on finite alphabets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a problem file and print the certified report.
    Solve { file: PathBuf },
    /// Fill the loss grid over rule and attack budgets (default instance without FILE).
    Sweep {
        file: Option<PathBuf>,
        /// `start:stop:step`
        #[arg(long, default_value = "0:2:0.05")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Five-symbol example: stochastic versus deterministic attacks.
    ToyExample,
    /// Check the potential identity at the penalized optimum.
    FixedPoint {
        file: PathBuf,
        #[arg(long)]
        lambda: f64,
    },
    /// Posterior discontinuity table.
    Counterexample {
        #[arg(long, default_value = "2,10,1000")]
        n: String,
    },
    /// Deterministic versus stochastic attack values.
    DetGap { file: PathBuf },
    /// Least-leakage release channel under an expected-distortion budget.
    DesignMechanism {
        file: PathBuf,
        /// Also trace leakage over `start:stop:step`.
        #[arg(long)]
        grid: Option<String>,
    },
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || validation("--grid", format!("expected start:stop:step, got `{text}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    budget_grid(nums[0], nums[1], nums[2]).map_err(|e| validation("--grid", reason(e)))
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| validation(SEED_ENV, format!("not a 64-bit unsigned integer: `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Reads and resolves a problem file, applying the seed override.
pub fn load_problem(path: &Path) -> Result<Problem> {
    let bytes = std::fs::read(path).map_err(|e| validation(path.display().to_string(), e))?;
    let mut file = parse_problem(&bytes)?;
    if let Some(seed) = seed_override()? {
        file.seed = Some(seed);
    }
    file.resolve()
}

#[derive(Serialize)]
struct MechanismOut {
    epsilon: f64,
    leakage_nats: f64,
    distortion: f64,
    h_star: f64,
    fw_gap: f64,
    converged: bool,
    /// Indexed `[x][y][z]`.
    channel: Vec<Vec<Vec<f64>>>,
}

impl From<&PrivacyMechanism> for MechanismOut {
    fn from(m: &PrivacyMechanism) -> Self {
        let k = &m.channel;
        Self {
            epsilon: m.epsilon,
            leakage_nats: m.leakage,
            distortion: m.distortion,
            h_star: m.h_star,
            fw_gap: m.fw_gap,
            converged: m.converged,
            channel: (0..k.nx())
                .map(|x| (0..k.ny()).map(|y| k.slice(x, y).to_vec()).collect())
                .collect(),
        }
    }
}

/// Exit status of a finished command.
enum Outcome {
    Done,
    NotConverged,
}

fn converged(flag: bool) -> Outcome {
    if flag {
        Outcome::Done
    } else {
        Outcome::NotConverged
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Solve { file } => {
            let problem = load_problem(&file)?;
            let report = solve_problem(&problem)?;
            print!("{}", to_json(&report));
            Ok(converged(report.converged))
        }
        Command::Sweep { file, grid, out } => {
            let grid = parse_grid(&grid)?;
            let (mu, cost, opts) = match file {
                Some(path) => {
                    let p = load_problem(&path)?;
                    (p.mu, p.cost, p.opts)
                }
                None => {
                    let seed = seed_override()?.unwrap_or(DEFAULT_SWEEP_SEED);
                    let (mu, cost) = default_sweep_instance(seed);
                    (mu, cost, SolverOptions { seed, ..SolverOptions::default() })
                }
            };
            let sweep = run_tradeoff_sweep(&mu, &cost, &grid, &opts)?;
            std::fs::create_dir_all(&out).map_err(|e| validation("--out", e))?;
            let (left, right) = render_plots(&sweep);
            for (name, body) in [
                ("sweep.csv", write_sweep_csv(&sweep)),
                ("loss_vs_rule.svg", left),
                ("loss_vs_attack.svg", right),
            ] {
                std::fs::write(out.join(name), body).map_err(|e| validation("--out", e))?;
            }
            for (a, r, msg) in &sweep.failures {
                eprintln!("cell (attack {}, rule {}) failed: {msg}", grid[*a], grid[*r]);
            }
            println!(
                "{} budgets; H(Y|X) = {:.6}, H(Y) = {:.6}, saturation budget = {:.6}; wrote {}",
                grid.len(),
                sweep.clean_entropy,
                sweep.label_entropy,
                sweep.epsilon_sat,
                out.display()
            );
            Ok(converged(sweep.converged.iter().all(|&c| c) && sweep.failures.is_empty()))
        }
        Command::ToyExample => {
            let report = run_toy_example(&SolverOptions::default())?;
            print!("{}", to_json(&report));
            Ok(converged(report.converged))
        }
        Command::FixedPoint { file, lambda } => {
            if !(lambda.is_finite() && lambda > 0.0) {
                return Err(validation("--lambda", "must be positive"));
            }
            let p = load_problem(&file)?;
            let report = run_fixed_point(&p.mu, &p.cost, lambda, &p.opts)?;
            print!("{}", to_json(&report));
            Ok(converged(report.converged))
        }
        Command::Counterexample { n } => {
            let values = parse_n_list(&n).map_err(|e| validation("--n", reason(e)))?;
            let table = run_counterexample(&values).map_err(|e| validation("--n", reason(e)))?;
            println!("n,q_1_given_0,q_1_given_1,qprime_1_given_0,qprime_1_given_1,tv_p,tv_pprime");
            for row in table {
                println!(
                    "{},{},{},{},{},{},{}",
                    row.n, row.q[0], row.q[1], row.q_prime[0], row.q_prime[1], row.tv[0], row.tv[1]
                );
            }
            Ok(Outcome::Done)
        }
        Command::DetGap { file } => {
            let p = load_problem(&file)?;
            let report = deterministic_attack_report(&p.mu, &p.cost, p.file.constraint.epsilon, &p.opts)?;
            print!("{}", to_json(&report));
            Ok(Outcome::Done)
        }
        Command::DesignMechanism { file, grid } => {
            let p = load_problem(&file)?;
            if p.file.constraint.kind != ConstraintKindName::ExpectedDistortionChannel {
                return Err(validation("constraint.kind", "design-mechanism needs expected_distortion_channel"));
            }
            let mechanisms = match grid {
                Some(g) => privacy_tradeoff(&p.mu, &p.cost, &parse_grid(&g)?, &p.opts)?,
                None => vec![design_privacy_mechanism(&p.mu, &p.cost, p.file.constraint.epsilon, &p.opts)?],
            };
            let out: Vec<MechanismOut> = mechanisms.iter().map(MechanismOut::from).collect();
            print!("{}", to_json(&out));
            Ok(converged(mechanisms.iter().all(|m| m.converged)))
        }
    }
}

/// Maps an error to the process exit status.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Infeasible(_) | Error::EmptyFeasible(_) => 3,
        Error::NumericalDegeneracy | Error::BisectionStall { .. } => 2,
        _ => 1,
    }
}

/// Runs the command line; returns the exit status.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => 0,
        Ok(Outcome::NotConverged) => {
            eprintln!("warning: solver stopped before reaching the gap tolerance");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
