//! Command-line front end: TOML run configuration, subcommand dispatch,
//! CSV tables and JSON metadata.
//!
//! Units in config files: durations in nanoseconds, frequencies in plain
//! GHz (ω/2π; multiplied by 2π at load time). The Rabi system block takes
//! its drive amplitude directly in rad/ns.
//!
//! Determinism: every CSV is byte-identical across runs for a fixed config,
//! seed, and worker count; wall-clock measurements appear only in JSON
//! outputs, under explicitly named `*_seconds` / `wall_time_s` fields.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use serde::Deserialize;
use serde_json::json;

use crate::adjoint_engine::{compute_gradient, AccumulationMethod};
use crate::controls::{BsplineCarrierPulse, Problem, PulseShape};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::hermite_integrator::{
    forward_evolve, HermiteScheme, KrylovOptions, SolveStats, StateHistory, TimeGrid,
};
use crate::model::{
    build_control_operators, build_drift, build_guard_weights, Frame, GuardScheme, SubsystemSpec,
    SystemSpec, TWO_PI,
};
use crate::objectives::{objective_parts, GateTarget, InfidelityKind, ObjectiveConfig};
use crate::optimize::{optimize, random_initial_controls, OptimizeOptions, Termination};
use crate::state_core::{complex_to_real, RealStateMatrix};
use crate::verify::{
    self, convergence_study, finite_difference_best_h, rabi_infidelity_gradient, rabi_problem,
    rabi_unitary, recommend_steps, relative_frobenius_error, ConvergenceRow, OrderStudy, RabiSpec,
    Reference,
};

/// Stamped into every JSON output.
pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    #[serde(default)]
    pub controls: Option<ControlsSection>,
    #[serde(default)]
    pub gate: Option<GateSection>,
    pub scheme: SchemeSection,
    pub grid: GridSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub study: StudySection,
    #[serde(default)]
    pub seed: u64,
}

/// Exactly one of `rabi` / `qudits` must be present.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(default)]
    pub rabi: Option<RabiSection>,
    #[serde(default)]
    pub qudits: Option<QuditsSection>,
}

/// Two-level system under a constant complex drive; carries its own two
/// constant controls (θ₁, θ₂) = (Re Ω, Im Ω), so no `[controls]` section
/// applies. Closed-form references become available.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RabiSection {
    /// |Ω| in rad/ns.
    pub amplitude: f64,
    /// arg Ω in radians.
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuditsSection {
    pub subsystems: Vec<SubsystemSection>,
    #[serde(default)]
    pub cross_kerr: Vec<CrossKerrSection>,
    /// "rotating" (default) or "laboratory".
    #[serde(default = "default_frame")]
    pub frame: String,
}

fn default_frame() -> String {
    "rotating".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemSection {
    pub essential_levels: usize,
    #[serde(default)]
    pub guard_levels: usize,
    #[serde(default)]
    pub transition_freq_ghz: f64,
    #[serde(default)]
    pub self_kerr_ghz: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossKerrSection {
    /// 1-based subsystem indices (p, q), p > q.
    pub pair: [usize; 2],
    pub value_ghz: f64,
}

/// B-spline-times-carrier ansatz, two independent quadrature pulses per
/// subsystem (in-phase on a+a†, quadrature on i(a−a†)).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsSection {
    pub spline_degree: usize,
    pub spline_count: usize,
    /// One list per subsystem, or a single list broadcast to all.
    pub carrier_freqs_ghz: Vec<Vec<f64>>,
    /// Box bound ±b applied to every control parameter during optimization.
    #[serde(default)]
    pub amplitude_bound: Option<f64>,
    /// Half-width of the uniform random initial parameter draw.
    #[serde(default)]
    pub initial_amplitude: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSection {
    /// "hadamard" | "pauli-x" | "pauli-y" | "pauli-z" | "cnot".
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub matrix_re: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub matrix_im: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub order: usize,
    /// Orders swept by `convergence` / `stepsize-study` (default: `[order]`).
    #[serde(default)]
    pub study_orders: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub duration_ns: f64,
    #[serde(default)]
    pub steps: Option<usize>,
    /// Alternative to `steps`: pick the step count from a previously
    /// written study file (see `study_file`).
    #[serde(default)]
    pub target_error: Option<f64>,
    /// JSON summary produced by `convergence` or `stepsize-study`.
    #[serde(default)]
    pub study_file: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    /// "trace" (default) or "generalized".
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default)]
    pub guard: Option<GuardSection>,
    /// Tikhonov weight γ on ‖θ‖².
    #[serde(default)]
    pub regularization: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection {
            kind: default_kind(),
            guard: None,
            regularization: 0.0,
        }
    }
}

fn default_kind() -> String {
    "trace".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardSection {
    /// "uniform" (same weight on every guard state) or "exponential"
    /// (geometric decay downward from the topmost level).
    pub scheme: String,
    /// Uniform weight, or the exponential base.
    #[serde(default = "default_one")]
    pub value: f64,
    /// Multiplier on the integrated guard population in the objective.
    #[serde(default = "default_one")]
    pub coefficient: f64,
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_gradient_tolerance")]
    pub gradient_tolerance: f64,
    #[serde(default = "default_decrease_tolerance")]
    pub objective_decrease_tolerance: f64,
    #[serde(default)]
    pub target_objective: Option<f64>,
    #[serde(default)]
    pub max_wall_time_s: Option<f64>,
    #[serde(default = "default_memory")]
    pub memory: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            max_iterations: default_max_iterations(),
            gradient_tolerance: default_gradient_tolerance(),
            objective_decrease_tolerance: default_decrease_tolerance(),
            target_objective: None,
            max_wall_time_s: None,
            memory: default_memory(),
        }
    }
}

fn default_max_iterations() -> usize {
    500
}
fn default_gradient_tolerance() -> f64 {
    1e-8
}
fn default_decrease_tolerance() -> f64 {
    1e-14
}
fn default_memory() -> usize {
    10
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    /// Step counts of the error-vs-steps grid, strictly increasing.
    #[serde(default = "default_study_steps")]
    pub steps: Vec<usize>,
    /// Random control vectors averaged over by `stepsize-study`.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            steps: default_study_steps(),
            samples: default_samples(),
        }
    }
}

fn default_study_steps() -> Vec<usize> {
    vec![16, 32, 64, 128, 256]
}
fn default_samples() -> usize {
    25
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Named gates
// ---------------------------------------------------------------------------

/// Built-in gate matrices on the essential subspace.
pub fn named_gate(name: &str, essential_dim: usize) -> Result<Vec<Vec<Complex64>>> {
    let re = |x: f64| Complex64::new(x, 0.0);
    let im = |x: f64| Complex64::new(0.0, x);
    let (gate, dim): (Vec<Vec<Complex64>>, usize) = match name {
        "hadamard" => {
            let h = std::f64::consts::FRAC_1_SQRT_2;
            (vec![vec![re(h), re(h)], vec![re(h), re(-h)]], 2)
        }
        "pauli-x" => (vec![vec![re(0.0), re(1.0)], vec![re(1.0), re(0.0)]], 2),
        "pauli-y" => (vec![vec![re(0.0), im(-1.0)], vec![im(1.0), re(0.0)]], 2),
        "pauli-z" => (vec![vec![re(1.0), re(0.0)], vec![re(0.0), re(-1.0)]], 2),
        "cnot" => {
            let mut g = vec![vec![re(0.0); 4]; 4];
            g[0][0] = re(1.0);
            g[1][1] = re(1.0);
            g[2][3] = re(1.0);
            g[3][2] = re(1.0);
            (g, 4)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown gate \"{other}\" (hadamard, pauli-x, pauli-y, pauli-z, cnot)"
            )))
        }
    };
    if dim != essential_dim {
        return Err(Error::Config(format!(
            "gate \"{name}\" acts on {dim} essential states, system has {essential_dim}"
        )));
    }
    Ok(gate)
}

// ---------------------------------------------------------------------------
// Config → runnable problem
// ---------------------------------------------------------------------------

pub struct Assembled {
    pub problem: Problem,
    pub theta0: Vec<f64>,
    pub scheme: HermiteScheme,
    pub grid: TimeGrid,
    pub initial: RealStateMatrix,
    pub target: Option<GateTarget>,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizeOptions,
    pub seed: u64,
    pub essential_indices: Vec<usize>,
    pub total_dim: usize,
    /// Closed-form reference, present for the Rabi system.
    pub analytic: Option<RabiSpec>,
    pub duration: f64,
    pub order: usize,
    pub study_orders: Vec<usize>,
    pub sample_amplitude: f64,
    pub warnings: Vec<String>,
}

fn basis_initial(total_dim: usize, essential_indices: &[usize]) -> RealStateMatrix {
    let columns = essential_indices
        .iter()
        .map(|&idx| {
            let mut psi = vec![Complex64::new(0.0, 0.0); total_dim];
            psi[idx] = Complex64::new(1.0, 0.0);
            complex_to_real(&psi)
        })
        .collect();
    let mut m = RealStateMatrix::new(columns).unwrap();
    m.essential_dim = essential_indices.len();
    m
}

#[derive(Debug, Deserialize)]
struct StudyFileOrders {
    orders: Vec<StudyFileOrder>,
}

#[derive(Debug, Deserialize)]
struct StudyFileOrder {
    order: usize,
    rows: Vec<StudyFileRow>,
}

#[derive(Debug, Deserialize)]
struct StudyFileRow {
    steps: usize,
    error: f64,
    #[serde(default)]
    rate: Option<f64>,
}

fn resolve_steps(grid: &GridSection, order: usize, config_dir: &Path) -> Result<usize> {
    match (grid.steps, grid.target_error) {
        // An explicit step count always wins; a coexisting target_error is
        // the recommendation target of the study commands.
        (Some(n), _) => Ok(n),
        (None, Some(target)) => {
            let Some(file) = &grid.study_file else {
                return Err(Error::Config(
                    "[grid] target_error needs a study_file (run `convergence` or \
                     `stepsize-study` first) or an explicit steps value"
                        .into(),
                ));
            };
            let path = if file.is_relative() {
                config_dir.join(file)
            } else {
                file.clone()
            };
            let text = std::fs::read_to_string(&path)?;
            let study: StudyFileOrders = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let entry = study
                .orders
                .iter()
                .find(|o| o.order == order)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "{}: no rows for order {order}",
                        path.display()
                    ))
                })?;
            let rows: Vec<ConvergenceRow> = entry
                .rows
                .iter()
                .map(|r| ConvergenceRow {
                    steps: r.steps,
                    error: r.error,
                    rate: r.rate,
                })
                .collect();
            recommend_steps(&rows, target)
        }
        (None, None) => Err(Error::Config(
            "[grid] needs steps, or target_error with a study_file".into(),
        )),
    }
}

fn parse_frame(s: &str) -> Result<Frame> {
    match s {
        "rotating" => Ok(Frame::Rotating),
        "laboratory" => Ok(Frame::Laboratory),
        other => Err(Error::Config(format!(
            "unknown frame \"{other}\" (rotating, laboratory)"
        ))),
    }
}

pub fn assemble(
    cfg: &RunConfig,
    config_dir: &Path,
    seed_override: Option<u64>,
    order_override: Option<usize>,
) -> Result<Assembled> {
    let seed = seed_override.unwrap_or(cfg.seed);
    let order = order_override.unwrap_or(cfg.scheme.order);
    let scheme = HermiteScheme::of_order(order)?;
    let duration = cfg.grid.duration_ns;
    let steps = resolve_steps(&cfg.grid, order, config_dir)?;
    let grid = TimeGrid::new(duration, steps)?;

    let (problem, theta0, essential_indices, total_dim, analytic, sample_amplitude, guard_sys) =
        match (&cfg.system.rabi, &cfg.system.qudits) {
            (Some(rabi), None) => {
                if cfg.controls.is_some() {
                    return Err(Error::Config(
                        "the rabi system carries its own two constant controls; \
                         remove the [controls] section"
                            .into(),
                    ));
                }
                let spec = RabiSpec::new(
                    Complex64::from_polar(rabi.amplitude, rabi.phase),
                    duration,
                )?;
                let problem = rabi_problem(duration)?;
                let theta0 = spec.theta().to_vec();
                (
                    problem,
                    theta0,
                    vec![0, 1],
                    2,
                    Some(spec),
                    rabi.amplitude,
                    None,
                )
            }
            (None, Some(qudits)) => {
                let sys = SystemSpec {
                    subsystems: qudits
                        .subsystems
                        .iter()
                        .map(|s| SubsystemSpec {
                            essential_levels: s.essential_levels,
                            guard_levels: s.guard_levels,
                            transition_freq: TWO_PI * s.transition_freq_ghz,
                            self_kerr: TWO_PI * s.self_kerr_ghz,
                        })
                        .collect(),
                    cross_kerr: qudits
                        .cross_kerr
                        .iter()
                        .map(|c| ((c.pair[0], c.pair[1]), TWO_PI * c.value_ghz))
                        .collect(),
                    frame: parse_frame(&qudits.frame)?,
                };
                sys.validate()?;
                let Some(controls) = &cfg.controls else {
                    return Err(Error::Config(
                        "qudit systems need a [controls] section".into(),
                    ));
                };
                let n_sub = sys.subsystems.len();
                let freq_lists: Vec<Vec<f64>> = if controls.carrier_freqs_ghz.len() == 1 {
                    vec![controls.carrier_freqs_ghz[0].clone(); n_sub]
                } else if controls.carrier_freqs_ghz.len() == n_sub {
                    controls.carrier_freqs_ghz.clone()
                } else {
                    return Err(Error::Config(format!(
                        "carrier_freqs_ghz has {} lists for {n_sub} subsystems \
                         (give one list per subsystem, or a single shared list)",
                        controls.carrier_freqs_ghz.len()
                    )));
                };
                let mut ops = Vec::with_capacity(2 * n_sub);
                let mut pulses = Vec::with_capacity(2 * n_sub);
                for q in 1..=n_sub {
                    let (in_phase, quadrature) = build_control_operators(&sys, q)?;
                    ops.push(in_phase);
                    ops.push(quadrature);
                    let freqs: Vec<f64> =
                        freq_lists[q - 1].iter().map(|f| TWO_PI * f).collect();
                    for _ in 0..2 {
                        pulses.push(PulseShape::BsplineCarrier(BsplineCarrierPulse::new(
                            controls.spline_degree,
                            controls.spline_count,
                            freqs.clone(),
                            duration,
                        )?));
                    }
                }
                let drift = build_drift(&sys)?;
                let ens = crate::controls::ControlEnsemble::new(pulses, duration)?;
                let problem = Problem::new(drift, ops, ens)?;
                let theta0 = random_initial_controls(
                    problem.n_params(),
                    controls.initial_amplitude,
                    seed,
                )?;
                let essential = sys.essential_indices();
                let total = sys.total_dim();
                (
                    problem,
                    theta0,
                    essential,
                    total,
                    None,
                    controls.initial_amplitude,
                    Some(sys),
                )
            }
            _ => {
                return Err(Error::Config(
                    "[system] needs exactly one of rabi or qudits".into(),
                ))
            }
        };

    let infidelity_kind = match cfg.objective.kind.as_str() {
        "trace" => InfidelityKind::Trace,
        "generalized" => InfidelityKind::Generalized,
        other => {
            return Err(Error::Config(format!(
                "unknown objective kind \"{other}\" (trace, generalized)"
            )))
        }
    };
    let (guard_weights, guard_coefficient) = match &cfg.objective.guard {
        None => (None, 1.0),
        Some(g) => {
            let Some(sys) = &guard_sys else {
                return Err(Error::Config(
                    "guard penalties need a qudit system with guard levels".into(),
                ));
            };
            let scheme = match g.scheme.as_str() {
                "uniform" => GuardScheme::Uniform(g.value),
                "exponential" => GuardScheme::Exponential(g.value),
                other => {
                    return Err(Error::Config(format!(
                        "unknown guard scheme \"{other}\" (uniform, exponential)"
                    )))
                }
            };
            (Some(build_guard_weights(sys, scheme)?), g.coefficient)
        }
    };
    let objective = ObjectiveConfig {
        infidelity_kind,
        guard_weights,
        guard_coefficient,
        regularization: cfg.objective.regularization,
    };
    objective.validate()?;

    let target = match &cfg.gate {
        None => None,
        Some(gate) => {
            let e = essential_indices.len();
            let matrix = match (&gate.name, &gate.matrix_re) {
                (Some(name), None) => named_gate(name, e)?,
                (None, Some(re)) => {
                    let im = gate.matrix_im.clone().unwrap_or_else(|| {
                        vec![vec![0.0; re.first().map_or(0, Vec::len)]; re.len()]
                    });
                    if im.len() != re.len()
                        || re.iter().zip(&im).any(|(r, i)| r.len() != i.len())
                    {
                        return Err(Error::Config(
                            "matrix_im shape differs from matrix_re".into(),
                        ));
                    }
                    re.iter()
                        .zip(&im)
                        .map(|(rr, ri)| {
                            rr.iter()
                                .zip(ri)
                                .map(|(&a, &b)| Complex64::new(a, b))
                                .collect()
                        })
                        .collect()
                }
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "[gate] sets both name and matrix_re; pick one".into(),
                    ))
                }
                (None, None) => {
                    return Err(Error::Config(
                        "[gate] needs a name or an explicit matrix".into(),
                    ))
                }
            };
            Some(GateTarget::from_complex_gate(
                &matrix,
                &essential_indices,
                total_dim,
            )?)
        }
    };

    let bounds = cfg
        .controls
        .as_ref()
        .and_then(|c| c.amplitude_bound)
        .map(|b| vec![(-b, b); theta0.len()]);
    let optimizer = OptimizeOptions {
        bounds,
        max_iterations: cfg.optimizer.max_iterations.max(1),
        max_wall_time: cfg
            .optimizer
            .max_wall_time_s
            .map(std::time::Duration::from_secs_f64),
        gradient_tolerance: cfg.optimizer.gradient_tolerance,
        objective_decrease_tolerance: cfg.optimizer.objective_decrease_tolerance,
        target_objective: cfg.optimizer.target_objective,
        memory: cfg.optimizer.memory,
    };

    let mut study_orders = cfg
        .scheme
        .study_orders
        .clone()
        .unwrap_or_else(|| vec![order]);
    if study_orders.is_empty() {
        study_orders = vec![order];
    }

    let warnings = problem.controls.smoothness_warnings(order);

    let initial = basis_initial(total_dim, &essential_indices);
    Ok(Assembled {
        problem,
        theta0,
        scheme,
        grid,
        initial,
        target,
        objective,
        optimizer,
        seed,
        essential_indices,
        total_dim,
        analytic,
        duration,
        order,
        study_orders,
        sample_amplitude,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

fn fmt_f(x: f64) -> String {
    format!("{x:e}")
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn report_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn studies_json(studies: &[OrderStudy]) -> serde_json::Value {
    json!(studies
        .iter()
        .map(|s| {
            json!({
                "order": s.order,
                "rows": s.rows.iter().map(|r| json!({
                    "steps": r.steps,
                    "error": r.error,
                    "rate": r.rate,
                })).collect::<Vec<_>>(),
            })
        })
        .collect::<Vec<_>>())
}

fn recommendations_json(
    studies: &[OrderStudy],
    target_error: Option<f64>,
) -> serde_json::Value {
    let Some(target) = target_error else {
        return json!([]);
    };
    json!(studies
        .iter()
        .filter_map(|s| {
            recommend_steps(&s.rows, target).ok().map(|n| {
                json!({"order": s.order, "target_error": target, "steps": n})
            })
        })
        .collect::<Vec<_>>())
}

/// Table-layout CSV: steps column, then error and observed-rate columns
/// per order.
fn study_table_csv(studies: &[OrderStudy], steps: &[usize]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["steps".to_string()];
    for s in studies {
        header.push(format!("err_o{}", s.order));
        header.push(format!("cvg_o{}", s.order));
    }
    let rows = steps
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut row = vec![n.to_string()];
            for s in studies {
                row.push(fmt_f(s.rows[i].error));
                row.push(s.rows[i].rate.map(fmt_f).unwrap_or_default());
            }
            row
        })
        .collect();
    (header, rows)
}

// ---------------------------------------------------------------------------
// Command-line surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "pulsekit",
    version,
    about = "High-order propagation, exact discrete gradients, and pulse optimization \
             for quantum gate design"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Propagate the configured system; write population and norm series.
    Simulate(RunArgs),
    /// Compute the exact gradient of the configured objective, with
    /// per-phase instrumentation.
    Gradient(GradientArgs),
    /// Error-vs-steps table against an analytic or fine-grid reference.
    Convergence(RunArgs),
    /// Convergence statistics over random control samples, with a
    /// step-count recommendation.
    StepsizeStudy(StepsizeArgs),
    /// Projected quasi-Newton optimization of the control parameters.
    Optimize(RunArgs),
    /// Self-check of the toolkit against the closed-form two-level drive.
    RabiVerify(RabiVerifyArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Path to the TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads (default: one per core).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the scheme order.
    #[arg(long)]
    pub order: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradientArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Cross-validate against central finite differences of the discrete
    /// objective (relative tolerance 1e-6); exits nonzero on disagreement.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args)]
pub struct StepsizeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Override the sample count from the config (default 25).
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RabiVerifyArgs {
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Scheme order for the discrete-vs-analytic gradient check.
    #[arg(long, default_value_t = 10)]
    pub order: usize,
    /// Step count for the discrete-vs-analytic gradient check.
    #[arg(long, default_value_t = 128)]
    pub steps: usize,
    /// Worker threads (default: one per core).
    #[arg(long)]
    pub workers: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Gradient(args) => cmd_gradient(&args),
        Command::Convergence(args) => cmd_convergence(&args),
        Command::StepsizeStudy(args) => cmd_stepsize_study(&args),
        Command::Optimize(args) => cmd_optimize(&args),
        Command::RabiVerify(args) => cmd_rabi_verify(&args),
    }
}

fn prepare(args: &RunArgs) -> Result<(RunConfig, Assembled)> {
    exec::configure_workers(args.workers);
    let cfg = load_config(&args.config)?;
    let dir = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let asm = assemble(&cfg, &dir, args.seed, args.order)?;
    report_warnings(&asm.warnings);
    std::fs::create_dir_all(&args.out)?;
    Ok((cfg, asm))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn scaled_norm_at(history: &StateHistory, node: usize) -> f64 {
    let sq: f64 = history
        .columns
        .iter()
        .map(|col| col[node].data.iter().map(|x| x * x).sum::<f64>())
        .sum();
    sq.sqrt() / (history.n_columns() as f64).sqrt()
}

/// Exact propagation preserves the scaled norm, so a visible drift at the
/// final node means the grid does not resolve the time dependence of the
/// Hamiltonian (fast carriers are the usual cause) and every reported
/// value is suspect.
const NORM_DRIFT_WARN: f64 = 1e-3;

fn warn_on_norm_drift(final_scaled_norm: f64) {
    if (final_scaled_norm - 1.0).abs() > NORM_DRIFT_WARN {
        eprintln!(
            "warning: final scaled norm {final_scaled_norm:.6} deviates from 1; \
             the time grid is too coarse for this Hamiltonian (try more steps, \
             a higher order, or the `convergence` subcommand)"
        );
    }
}

fn cmd_simulate(args: &RunArgs) -> Result<()> {
    let (_cfg, asm) = prepare(args)?;
    let opts = KrylovOptions::default();
    let (history, stats) = forward_evolve(
        &asm.problem,
        &asm.theta0,
        &asm.scheme,
        &asm.grid,
        &asm.initial,
        &opts,
        ExecMode::Parallel,
    )?;

    let n_nodes = history.n_nodes();
    let n_cols = history.n_columns();
    let dim = asm.total_dim;
    let mut header = vec![
        "step".to_string(),
        "time_ns".to_string(),
        "scaled_norm".to_string(),
    ];
    for k in 0..n_cols {
        for i in 0..dim {
            header.push(format!("pop_c{k}_s{i}"));
        }
    }
    let mut rows = Vec::with_capacity(n_nodes);
    for n in 0..n_nodes {
        let mut row = vec![
            n.to_string(),
            fmt_f(asm.grid.time(n)),
            fmt_f(scaled_norm_at(&history, n)),
        ];
        for col in &history.columns {
            let w = &col[n];
            let (u, v) = (w.u(), w.v());
            for i in 0..dim {
                row.push(fmt_f(u[i] * u[i] + v[i] * v[i]));
            }
        }
        rows.push(row);
    }
    write_csv(&args.out.join("populations.csv"), &header, &rows)?;

    let final_m = history.final_matrix();
    let mut fs_header = vec!["state".to_string()];
    for k in 0..n_cols {
        fs_header.push(format!("re_c{k}"));
        fs_header.push(format!("im_c{k}"));
    }
    let fs_rows: Vec<Vec<String>> = (0..dim)
        .map(|i| {
            let mut row = vec![i.to_string()];
            for col in &final_m.columns {
                row.push(fmt_f(col.u()[i]));
                row.push(fmt_f(col.v()[i]));
            }
            row
        })
        .collect();
    write_csv(&args.out.join("final_state.csv"), &fs_header, &fs_rows)?;

    let analytic_error = asm.analytic.as_ref().map(|spec| {
        let exact = verify::unitary_to_real_matrix(&rabi_unitary(spec, spec.t_final));
        relative_frobenius_error(&final_m, &exact)
    });
    let final_scaled_norm = scaled_norm_at(&history, n_nodes - 1);
    warn_on_norm_drift(final_scaled_norm);
    write_json(
        &args.out.join("simulate_summary.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "order": asm.order,
            "steps": asm.grid.n_steps,
            "duration_ns": asm.duration,
            "columns": n_cols,
            "dim": dim,
            "final_scaled_norm": final_scaled_norm,
            "analytic_relative_error": analytic_error,
            "forward": phase_json(&stats.forward),
        }),
    )?;
    Ok(())
}

fn phase_json(p: &crate::hermite_integrator::PhaseStats) -> serde_json::Value {
    json!({
        "matvecs": p.matvec_count,
        "krylov_iterations": p.krylov_iterations,
        "linear_solves": p.linear_solves,
        "wall_time_s": p.wall_time.as_secs_f64(),
    })
}

/// Objective of the discrete pipeline as a function of θ, for the
/// finite-difference cross-check.
fn discrete_objective(
    asm: &Assembled,
    target: &GateTarget,
    theta: &[f64],
) -> Result<f64> {
    let opts = KrylovOptions::default();
    let (history, _) = forward_evolve(
        &asm.problem,
        theta,
        &asm.scheme,
        &asm.grid,
        &asm.initial,
        &opts,
        ExecMode::Sequential,
    )?;
    Ok(objective_parts(&history, &asm.objective, target, theta)?.total)
}

fn cmd_gradient(args: &GradientArgs) -> Result<()> {
    let (_cfg, asm) = prepare(&args.run)?;
    let target = asm.target.as_ref().ok_or_else(|| {
        Error::Config("gradient needs a [gate] section".into())
    })?;
    let opts = KrylovOptions::default();
    let (parts, report) = compute_gradient(
        &asm.problem,
        &asm.theta0,
        &asm.scheme,
        &asm.grid,
        &asm.initial,
        &asm.objective,
        target,
        &opts,
        AccumulationMethod::Efficient,
        ExecMode::Parallel,
    )?;

    let offsets = &asm.problem.controls.param_offsets;
    let header = vec![
        "param".to_string(),
        "pulse".to_string(),
        "gradient".to_string(),
    ];
    let rows: Vec<Vec<String>> = report
        .grad
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let pulse = offsets.iter().position(|r| r.contains(&k)).unwrap_or(0);
            vec![k.to_string(), pulse.to_string(), fmt_f(*g)]
        })
        .collect();
    write_csv(&args.run.out.join("gradient.csv"), &header, &rows)?;

    let q = asm.order / 2;
    let steps = asm.grid.n_steps;
    let cols = asm.initial.columns.len();
    let stats: &SolveStats = &report.stats;
    let mut metrics = json!({
        "schema_version": SCHEMA_VERSION,
        "order": asm.order,
        "steps": steps,
        "n_params": asm.problem.n_params(),
        "dim": asm.total_dim,
        "columns": cols,
        "objective": {
            "total": parts.total,
            "infidelity": parts.infidelity,
            "guard_penalty": parts.guard_penalty,
            "regularization": parts.regularization,
        },
        "phases": {
            "forward": phase_json(&stats.forward),
            "adjoint": phase_json(&stats.adjoint),
            "accumulation": phase_json(&stats.accumulation),
        },
        "per_step": {
            // Structural operator applications of one step on one column,
            // fixed by the scheme order.
            "forward_apply_matvecs": q * (q + 1) / 2,
            "adjoint_transpose_matvecs": (1u64 << q) - 1,
            // Measured mean over the run; independent of the number of
            // control parameters.
            "accumulation_matvecs_per_column":
                stats.accumulation.matvec_count as f64 / (steps * cols) as f64,
        },
    });

    if args.check {
        let (_, rel) = finite_difference_best_h(
            |theta: &[f64]| discrete_objective(&asm, target, theta),
            &asm.theta0,
            &report.grad,
        )?;
        let passed = rel <= 1e-6;
        metrics["check"] = json!({
            "relative_error": rel,
            "tolerance": 1e-6,
            "passed": passed,
        });
        write_json(&args.run.out.join("gradient_metrics.json"), &metrics)?;
        if !passed {
            return Err(Error::Verify(format!(
                "adjoint gradient disagrees with finite differences: rel err {rel:.3e}"
            )));
        }
    } else {
        write_json(&args.run.out.join("gradient_metrics.json"), &metrics)?;
    }
    Ok(())
}

fn reference_for(asm: &Assembled) -> (Reference, &'static str) {
    match &asm.analytic {
        Some(spec) => (
            Reference::Exact(verify::unitary_to_real_matrix(&rabi_unitary(
                spec,
                spec.t_final,
            ))),
            "analytic",
        ),
        None => (
            Reference::FineGrid {
                order: 12,
                refine: 4,
            },
            "fine-grid",
        ),
    }
}

fn cmd_convergence(args: &RunArgs) -> Result<()> {
    let (cfg, asm) = prepare(args)?;
    let steps = cfg.study.steps.clone();
    let (reference, ref_name) = reference_for(&asm);
    let opts = KrylovOptions::default();
    let studies = convergence_study(
        &asm.problem,
        &asm.theta0,
        asm.duration,
        &asm.initial,
        &asm.study_orders,
        &steps,
        &reference,
        &opts,
        ExecMode::Parallel,
    )?;

    let (header, rows) = study_table_csv(&studies, &steps);
    write_csv(&args.out.join("convergence.csv"), &header, &rows)?;
    write_json(
        &args.out.join("convergence_summary.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "duration_ns": asm.duration,
            "reference": ref_name,
            "orders": studies_json(&studies),
            "recommendations": recommendations_json(&studies, cfg.grid.target_error),
        }),
    )?;
    Ok(())
}

fn cmd_stepsize_study(args: &StepsizeArgs) -> Result<()> {
    let (cfg, asm) = prepare(&args.run)?;
    let samples = args.samples.unwrap_or(cfg.study.samples).max(1);
    let steps = cfg.study.steps.clone();
    if steps.windows(2).any(|w| w[0] >= w[1]) || steps.is_empty() {
        return Err(Error::Config(
            "[study] steps must be non-empty and strictly increasing".into(),
        ));
    }
    if asm.sample_amplitude == 0.0 {
        eprintln!(
            "warning: initial_amplitude is 0; every sample uses the zero control vector"
        );
    }
    let opts = KrylovOptions::default();

    // Per-sample control draws and reference states.
    let thetas: Vec<Vec<f64>> = (0..samples)
        .map(|s| {
            random_initial_controls(
                asm.problem.n_params(),
                asm.sample_amplitude,
                asm.seed.wrapping_add(s as u64),
            )
        })
        .collect::<Result<_>>()?;
    let references: Vec<RealStateMatrix> = match &asm.analytic {
        Some(_) => thetas
            .iter()
            .map(|th| {
                let spec = RabiSpec::new(Complex64::new(th[0], th[1]), asm.duration)?;
                Ok(verify::unitary_to_real_matrix(&rabi_unitary(
                    &spec,
                    spec.t_final,
                )))
            })
            .collect::<Result<_>>()?,
        None => {
            let fine_scheme = HermiteScheme::of_order(12)?;
            let fine_grid = TimeGrid::new(asm.duration, steps[steps.len() - 1] * 4)?;
            exec::map_indexed(ExecMode::Parallel, samples, |s| {
                let (history, _) = forward_evolve(
                    &asm.problem,
                    &thetas[s],
                    &fine_scheme,
                    &fine_grid,
                    &asm.initial,
                    &opts,
                    ExecMode::Sequential,
                )?;
                Ok::<_, Error>(history.final_matrix())
            })
            .into_iter()
            .collect::<Result<_>>()?
        }
    };

    // One task per (sample, order, steps) point; each measures its own
    // error and wall time.
    let orders = asm.study_orders.clone();
    let n_points = orders.len() * steps.len();
    let tasks = samples * n_points;
    let measured = exec::map_indexed(ExecMode::Parallel, tasks, |idx| {
        let s = idx / n_points;
        let o = (idx % n_points) / steps.len();
        let n = idx % steps.len();
        let scheme = HermiteScheme::of_order(orders[o])?;
        let grid = TimeGrid::new(asm.duration, steps[n])?;
        let t0 = Instant::now();
        let (history, _) = forward_evolve(
            &asm.problem,
            &thetas[s],
            &scheme,
            &grid,
            &asm.initial,
            &opts,
            ExecMode::Sequential,
        )?;
        let secs = t0.elapsed().as_secs_f64();
        let err = relative_frobenius_error(&history.final_matrix(), &references[s]);
        Ok::<_, Error>((err, secs))
    });
    let measured: Vec<(f64, f64)> = measured.into_iter().collect::<Result<_>>()?;

    // Aggregate over samples.
    let mut header = vec![
        "order".to_string(),
        "steps".to_string(),
        "mean_error".to_string(),
        "std_error".to_string(),
        "rel_std".to_string(),
    ];
    let mut csv_rows = Vec::with_capacity(n_points);
    let mut studies: Vec<OrderStudy> = Vec::with_capacity(orders.len());
    let mut json_rows = Vec::with_capacity(n_points);
    for (o, &order) in orders.iter().enumerate() {
        let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(steps.len());
        for (n, &n_steps) in steps.iter().enumerate() {
            let point = o * steps.len() + n;
            let errs: Vec<f64> = (0..samples)
                .map(|s| measured[s * n_points + point].0)
                .collect();
            let secs: Vec<f64> = (0..samples)
                .map(|s| measured[s * n_points + point].1)
                .collect();
            let mean = errs.iter().sum::<f64>() / samples as f64;
            let std = if samples > 1 {
                (errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
                    / (samples - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            let mean_secs = secs.iter().sum::<f64>() / samples as f64;
            let rate = rows.last().map(|prev: &ConvergenceRow| {
                (prev.error / mean).ln() / (n_steps as f64 / prev.steps as f64).ln()
            });
            csv_rows.push(vec![
                order.to_string(),
                n_steps.to_string(),
                fmt_f(mean),
                fmt_f(std),
                fmt_f(if mean > 0.0 { std / mean } else { 0.0 }),
            ]);
            json_rows.push(json!({
                "order": order,
                "steps": n_steps,
                "mean_error": mean,
                "std_error": std,
                "mean_seconds": mean_secs,
            }));
            rows.push(ConvergenceRow {
                steps: n_steps,
                error: mean,
                rate,
            });
        }
        studies.push(OrderStudy { order, rows });
    }
    header.shrink_to_fit();

    write_csv(&args.run.out.join("stepsize_study.csv"), &header, &csv_rows)?;
    write_json(
        &args.run.out.join("stepsize_summary.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "duration_ns": asm.duration,
            "samples": samples,
            "rows": json_rows,
            "orders": studies_json(&studies),
            "recommendations": recommendations_json(&studies, cfg.grid.target_error),
        }),
    )?;
    Ok(())
}

fn termination_name(t: &Termination) -> &'static str {
    match t {
        Termination::GradientTolerance => "gradient-tolerance",
        Termination::ObjectiveDecrease => "objective-decrease",
        Termination::TargetObjective => "target-objective",
        Termination::IterationLimit => "iteration-limit",
        Termination::TimeLimit => "time-limit",
        Termination::LineSearchExhausted => "line-search-exhausted",
        Termination::EvaluationFailure(_) => "evaluation-failure",
    }
}

fn cmd_optimize(args: &RunArgs) -> Result<()> {
    let (cfg, asm) = prepare(args)?;
    let target = asm.target.as_ref().ok_or_else(|| {
        Error::Config("optimize needs a [gate] section".into())
    })?;
    let opts = KrylovOptions::default();

    // A zero-iteration budget degenerates to a single evaluation: θ0 is
    // reported unchanged.
    let (theta_star, trace) = if cfg.optimizer.max_iterations == 0 {
        let (history, _) = forward_evolve(
            &asm.problem,
            &asm.theta0,
            &asm.scheme,
            &asm.grid,
            &asm.initial,
            &opts,
            ExecMode::Parallel,
        )?;
        let parts = objective_parts(&history, &asm.objective, target, &asm.theta0)?;
        let record = crate::optimize::IterationRecord {
            iteration: 0,
            objective: parts.total,
            infidelity: parts.infidelity,
            guard_value: parts.guard_penalty,
            gradient_norm: f64::NAN,
            step_length: 0.0,
            wall_time: std::time::Duration::ZERO,
        };
        (
            asm.theta0.clone(),
            crate::optimize::OptimizeTrace {
                iterations: vec![record],
                termination: Termination::IterationLimit,
            },
        )
    } else {
        optimize(
            &asm.problem,
            &asm.theta0,
            &asm.objective,
            &asm.scheme,
            &asm.grid,
            &asm.initial,
            target,
            &asm.optimizer,
            &opts,
            AccumulationMethod::Efficient,
            ExecMode::Parallel,
        )?
    };

    let header = vec![
        "iteration".to_string(),
        "objective".to_string(),
        "infidelity".to_string(),
        "guard_penalty".to_string(),
        "gradient_norm".to_string(),
        "step_length".to_string(),
    ];
    let rows: Vec<Vec<String>> = trace
        .iterations
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                fmt_f(r.objective),
                fmt_f(r.infidelity),
                fmt_f(r.guard_value),
                fmt_f(r.gradient_norm),
                fmt_f(r.step_length),
            ]
        })
        .collect();
    write_csv(&args.out.join("optimize_trace.csv"), &header, &rows)?;

    // Re-propagate at the optimized parameters: the scaled norm of the
    // final basis flags an under-resolved grid, which would make every
    // reported objective value meaningless.
    let (final_history, _) = forward_evolve(
        &asm.problem,
        &theta_star,
        &asm.scheme,
        &asm.grid,
        &asm.initial,
        &opts,
        ExecMode::Parallel,
    )?;
    let final_scaled_norm = scaled_norm_at(&final_history, final_history.n_nodes() - 1);
    warn_on_norm_drift(final_scaled_norm);

    let last = trace.iterations.last();
    let detail = match &trace.termination {
        Termination::EvaluationFailure(msg) => Some(msg.clone()),
        _ => None,
    };
    write_json(
        &args.out.join("optimized_controls.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "termination": termination_name(&trace.termination),
            "termination_detail": detail,
            "iterations": trace.iterations.len(),
            "wall_time_s": last.map(|r| r.wall_time.as_secs_f64()),
            "final": last.map(|r| json!({
                "objective": r.objective,
                "infidelity": r.infidelity,
                "guard_penalty": r.guard_value,
            })),
            "final_scaled_norm": final_scaled_norm,
            "theta": theta_star,
        }),
    )?;

    // Optimized pulse shapes sampled at the grid nodes.
    let mut ensemble = asm.problem.controls.clone();
    ensemble.set_theta(&theta_star)?;
    let n_controls = ensemble.pulses.len();
    let mut ph = vec!["time_ns".to_string()];
    for c in 0..n_controls {
        ph.push(format!("c{c}"));
    }
    let mut prows = Vec::with_capacity(asm.grid.n_steps + 1);
    for n in 0..=asm.grid.n_steps {
        let t = asm.grid.time(n);
        let values = ensemble.eval_derivatives(t, 0)?;
        let mut row = vec![fmt_f(t)];
        for c in 0..n_controls {
            row.push(fmt_f(values.value(c, 0)));
        }
        prows.push(row);
    }
    write_csv(&args.out.join("pulse_samples.csv"), &ph, &prows)?;
    Ok(())
}

fn cmd_rabi_verify(args: &RabiVerifyArgs) -> Result<()> {
    exec::configure_workers(args.workers);
    std::fs::create_dir_all(&args.out)?;
    let spec = RabiSpec::study_protocol();
    let mut checks: Vec<(String, f64, f64)> = Vec::new();

    // Propagator equals the identity at t = 0.
    let u0 = rabi_unitary(&spec, 0.0);
    let mut dev = 0.0_f64;
    for (r, row) in u0.iter().enumerate() {
        for (c, x) in row.iter().enumerate() {
            let expect = if r == c { 1.0 } else { 0.0 };
            dev = dev.max((x - Complex64::new(expect, 0.0)).norm());
        }
    }
    checks.push(("identity_at_t0".into(), dev, 1e-15));

    // Unitarity at sampled times.
    let mut udev = 0.0_f64;
    for k in 1..=17 {
        let t = spec.t_final * k as f64 / 17.0;
        let u = rabi_unitary(&spec, t);
        for r in 0..2 {
            for c in 0..2 {
                let mut prod = Complex64::new(0.0, 0.0);
                for m in 0..2 {
                    prod += u[r][m] * u[c][m].conj();
                }
                let expect = if r == c { 1.0 } else { 0.0 };
                udev = udev.max((prod - Complex64::new(expect, 0.0)).norm());
            }
        }
    }
    checks.push(("unitarity".into(), udev, 1e-14));

    // Full population transfer after half a period at zero phase.
    let phase0 = RabiSpec::new(Complex64::new(spec.omega.norm(), 0.0), spec.t_final)?;
    let u_half = rabi_unitary(&phase0, phase0.period() / 2.0);
    checks.push((
        "half_period_transfer".into(),
        (u_half[1][0].norm() - 1.0).abs(),
        1e-14,
    ));

    // Equation of motion: finite-difference dU/dt vs −iH U.
    let h = 1e-5;
    let h_mat = [
        [Complex64::new(0.0, 0.0), spec.omega],
        [spec.omega.conj(), Complex64::new(0.0, 0.0)],
    ];
    let mut rdev = 0.0_f64;
    for t in [0.2 * spec.t_final, 0.55 * spec.t_final, 0.9 * spec.t_final] {
        let up = rabi_unitary(&spec, t + h);
        let um = rabi_unitary(&spec, t - h);
        let u = rabi_unitary(&spec, t);
        for r in 0..2 {
            for c in 0..2 {
                let fd = (up[r][c] - um[r][c]) / (2.0 * h);
                let mut rhs = Complex64::new(0.0, 0.0);
                for m in 0..2 {
                    rhs += h_mat[r][m] * u[m][c];
                }
                let expect = Complex64::new(0.0, -1.0) * rhs;
                rdev = rdev.max((fd - expect).norm() / expect.norm().max(1.0));
            }
        }
    }
    checks.push(("equation_of_motion".into(), rdev, 1e-6));

    // Analytic infidelity gradient vs its finite-difference oracle.
    let hadamard = named_gate("hadamard", 2)?;
    let target_mat: verify::Mat2 = [
        [hadamard[0][0], hadamard[0][1]],
        [hadamard[1][0], hadamard[1][1]],
    ];
    let analytic_grad = rabi_infidelity_gradient(&spec, &target_mat)?;
    let (_, fd_rel) = finite_difference_best_h(
        |th: &[f64]| {
            let s = RabiSpec::new(Complex64::new(th[0], th[1]), spec.t_final)?;
            Ok(verify::rabi_infidelity(&s, &target_mat))
        },
        &spec.theta(),
        &analytic_grad,
    )?;
    checks.push(("analytic_gradient_vs_fd".into(), fd_rel, 1e-8));

    // Discrete adjoint vs the analytic gradient.
    let problem = rabi_problem(spec.t_final)?;
    let scheme = HermiteScheme::of_order(args.order)?;
    let grid = TimeGrid::new(spec.t_final, args.steps)?;
    let initial = basis_initial(2, &[0, 1]);
    let target = GateTarget::from_complex_gate(&hadamard, &[0, 1], 2)?;
    let config = ObjectiveConfig {
        infidelity_kind: InfidelityKind::Trace,
        ..Default::default()
    };
    let (_, report) = compute_gradient(
        &problem,
        &spec.theta(),
        &scheme,
        &grid,
        &initial,
        &config,
        &target,
        &KrylovOptions::default(),
        AccumulationMethod::Efficient,
        ExecMode::Parallel,
    )?;
    let rel = verify::relative_l2_error(&report.grad, &analytic_grad, verify::ERROR_FLOOR);
    checks.push((
        format!("discrete_adjoint_order{}_steps{}", args.order, args.steps),
        rel,
        1e-13,
    ));

    let all_passed = checks.iter().all(|(_, v, tol)| v <= tol);
    write_json(
        &args.out.join("rabi_verify.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "checks": checks.iter().map(|(name, value, tol)| json!({
                "name": name,
                "value": value,
                "tolerance": tol,
                "passed": value <= tol,
            })).collect::<Vec<_>>(),
            "all_passed": all_passed,
        }),
    )?;
    for (name, value, tol) in &checks {
        let status = if value <= tol { "ok" } else { "FAIL" };
        println!("{status}  {name}: {value:.3e} (tolerance {tol:.1e})");
    }
    if !all_passed {
        return Err(Error::Verify(
            "closed-form self-check failed; see rabi_verify.json".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rabi_toml() -> &'static str {
        r#"
            seed = 7
            [system.rabi]
            amplitude = 0.05
            phase = 0.7853981633974483
            [scheme]
            order = 4
            [grid]
            duration_ns = 596.9026041820607
            steps = 256
        "#
    }

    #[test]
    fn config_parses_and_assembles_rabi() {
        let cfg: RunConfig = toml::from_str(rabi_toml()).unwrap();
        let asm = assemble(&cfg, Path::new("."), None, None).unwrap();
        assert_eq!(asm.problem.n_params(), 2);
        assert_eq!(asm.grid.n_steps, 256);
        assert!(asm.analytic.is_some());
        let theta = asm.theta0.clone();
        assert!((theta[0] - 0.05 * (0.25_f64 * std::f64::consts::PI).cos()).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected_with_positions() {
        let bad = rabi_toml().replace("seed = 7", "seed = 7\nbogus_key = 1");
        let err = toml::from_str::<RunConfig>(&bad).unwrap_err();
        assert!(err.to_string().contains("bogus_key"));

        let nested = rabi_toml().replace("amplitude = 0.05", "amplitude = 0.05\nextra = 2");
        assert!(toml::from_str::<RunConfig>(&nested).is_err());
    }

    #[test]
    fn system_section_requires_exactly_one_kind() {
        let none: RunConfig = toml::from_str(
            r#"
                [system]
                [scheme]
                order = 4
                [grid]
                duration_ns = 10.0
                steps = 8
            "#,
        )
        .unwrap();
        assert!(assemble(&none, Path::new("."), None, None).is_err());
    }

    #[test]
    fn qudit_config_builds_two_pulses_per_subsystem() {
        let cfg: RunConfig = toml::from_str(
            r#"
                [system.qudits]
                subsystems = [
                    { essential_levels = 2, guard_levels = 1, self_kerr_ghz = 0.2 },
                ]
                [controls]
                spline_degree = 3
                spline_count = 6
                carrier_freqs_ghz = [[0.0, 0.1]]
                initial_amplitude = 0.01
                amplitude_bound = 0.05
                [gate]
                name = "hadamard"
                [scheme]
                order = 6
                [grid]
                duration_ns = 100.0
                steps = 50
            "#,
        )
        .unwrap();
        let asm = assemble(&cfg, Path::new("."), None, None).unwrap();
        assert_eq!(asm.problem.control_ops.len(), 2);
        // 2 pulses × 2 carriers × 2 quadrature blocks × 6 splines
        assert_eq!(asm.problem.n_params(), 2 * 2 * 2 * 6);
        assert_eq!(asm.total_dim, 3);
        assert_eq!(asm.essential_indices, vec![0, 1]);
        assert!(asm.target.is_some());
        let bounds = asm.optimizer.bounds.as_ref().unwrap();
        assert_eq!(bounds.len(), asm.problem.n_params());
        assert_eq!(bounds[0], (-0.05, 0.05));
        // Initial draw respects the amplitude and the seed.
        assert!(asm.theta0.iter().all(|v| v.abs() <= 0.01));
        let again = assemble(&cfg, Path::new("."), None, None).unwrap();
        assert_eq!(asm.theta0, again.theta0);
        let reseeded = assemble(&cfg, Path::new("."), Some(99), None).unwrap();
        assert_ne!(asm.theta0, reseeded.theta0);
    }

    #[test]
    fn named_gates_have_expected_shapes() {
        assert!(named_gate("hadamard", 2).is_ok());
        assert!(named_gate("cnot", 4).is_ok());
        assert!(named_gate("cnot", 2).is_err());
        assert!(named_gate("nope", 2).is_err());
        let y = named_gate("pauli-y", 2).unwrap();
        assert_eq!(y[0][1], Complex64::new(0.0, -1.0));
    }

    #[test]
    fn grid_resolution_rules() {
        // steps + target_error: steps wins (target feeds recommendations).
        let mut cfg: RunConfig = toml::from_str(rabi_toml()).unwrap();
        cfg.grid.target_error = Some(1e-5);
        assert_eq!(
            assemble(&cfg, Path::new("."), None, None).unwrap().grid.n_steps,
            256
        );
        // target_error alone needs a study file.
        cfg.grid.steps = None;
        assert!(matches!(
            assemble(&cfg, Path::new("."), None, None),
            Err(Error::Config(_))
        ));
        // Neither is an error.
        cfg.grid.target_error = None;
        assert!(matches!(
            assemble(&cfg, Path::new("."), None, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn float_formatting_round_trips() {
        for x in [7.7e-6, 1.0, -3.4e-2, 596.9026041820607, 0.0] {
            let s = fmt_f(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
    }
}
