//! Seeded experiment commands. Every command is a pure function of its
//! config and writes CSV artifacts into the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer};

use crate::dual::{
    recommended_constants, run_exact_dual_learning, wishart_deviation, wishart_bound, DualLearnConfig, StepSize,
};
use crate::error::{Error, Result};
use crate::format::{Cell, CsvTable};
use crate::linalg::{randn_matrix, randn_vector, spectral_norm, sym_eigen_range};
use crate::oracle::{kkt_brute_force, TrackingOracle};
use crate::perturbation::{run_perturbed_dual_learning, PerturbationSpec};
use crate::system::{rollout, sample_system, ConstraintSpec, LayeredProblem};
use crate::tracking::{run_layered_actor_critic, DualArch, EvalMetrics, LayeredConfig, TrackingMode};

/// Perturbation levels of the perturbed dual-learning traces.
pub const PERTURBATION_LEVELS: [f64; 3] = [1e-3, 1e-2, 5e-2];
/// Penalties of the sweep.
pub const RHO_VALUES: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];
/// `(d_x, B)` pairs of the Wishart check.
pub const WISHART_CASES: [(usize, usize); 3] = [(1, 1), (2, 8), (4, 64)];
pub const WISHART_TRIALS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DualKind {
    Linear,
    Mlp,
}

/// Flat key-value config; absent keys take command-specific defaults.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d_x: Option<usize>,
    pub d_u: Option<usize>,
    #[serde(rename = "T")]
    pub horizon: Option<usize>,
    pub rho: Option<f64>,
    pub eta: Option<f64>,
    #[serde(rename = "B")]
    pub batch: Option<usize>,
    /// Dual iterations for theory traces, joint iterations for pipelines.
    #[serde(rename = "K")]
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
    pub n_systems: Option<usize>,
    pub spectral_radius: Option<f64>,
    /// Lower bound on `x_{t,i}`, `t ≥ 1`; a number or `"-inf"`.
    #[serde(default, deserialize_with = "bound_value")]
    pub constraint_bound: Option<f64>,
    /// Tracker training episodes per policy-iteration round.
    pub episodes: Option<usize>,
    /// Output directory.
    pub output_path: Option<PathBuf>,
    pub oracle_tracking: Option<bool>,
    /// `R = input_weight · I`.
    pub input_weight: Option<f64>,
    pub dual: Option<DualKind>,
    pub hidden: Option<usize>,
    pub freeze_iterations: Option<usize>,
}

fn bound_value<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Num(v)) => Ok(Some(v)),
        Some(Raw::Text(s)) => match s.trim() {
            "-inf" | "-infinity" | "none" => Ok(Some(f64::NEG_INFINITY)),
            other => other
                .parse::<f64>()
                .map(Some)
                .map_err(|_| serde::de::Error::custom(format!("invalid constraint bound {other:?}"))),
        },
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_path.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Files written by a command with one-line summaries.
#[derive(Clone, Debug, Default)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
}

/// Median of the finite entries, NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

struct Setup {
    dx: usize,
    du: usize,
    horizon: usize,
    rho: f64,
    input_weight: f64,
    radius: f64,
    seed: u64,
    systems: usize,
}

impl Setup {
    fn resolve(c: &ExperimentConfig, dx: usize, du: usize, horizon: usize, radius: f64, systems: usize) -> Result<Self> {
        let s = Self {
            dx: c.d_x.unwrap_or(dx),
            du: c.d_u.unwrap_or(du),
            horizon: c.horizon.unwrap_or(horizon),
            rho: c.rho.unwrap_or(2.0),
            input_weight: c.input_weight.unwrap_or(0.01),
            radius: c.spectral_radius.unwrap_or(radius),
            seed: c.seed.unwrap_or(0),
            systems: c.n_systems.unwrap_or(systems),
        };
        if s.dx == 0 || s.du == 0 || s.horizon == 0 || s.systems == 0 {
            return Err(Error::Config("dimensions, horizon and system count must be positive".into()));
        }
        if !(s.rho > 0.0) || !(s.input_weight > 0.0) || !s.rho.is_finite() || !s.input_weight.is_finite() {
            return Err(Error::Config("rho and input_weight must be positive".into()));
        }
        Ok(s)
    }

    fn system_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }

    fn problem(&self, i: usize, rho: f64) -> Result<LayeredProblem> {
        let sys = sample_system(self.system_seed(i), self.dx, self.du, self.radius)?.system;
        LayeredProblem::new(
            sys,
            self.horizon,
            DMatrix::identity(self.dx, self.dx),
            DMatrix::identity(self.du, self.du) * self.input_weight,
            rho,
        )
    }
}

fn write_table(dir: &Path, name: &str, table: &CsvTable, out: &mut CommandOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, table.render())?;
    out.files.push(path);
    Ok(())
}

struct IdentityRow {
    system: String,
    seed: u64,
    check: String,
    value: f64,
    tolerance: f64,
    pass: bool,
    gating: bool,
}

fn below(system: usize, seed: u64, check: &str, value: f64, tolerance: f64) -> IdentityRow {
    IdentityRow {
        system: system.to_string(),
        seed,
        check: check.into(),
        value,
        tolerance,
        pass: value <= tolerance,
        gating: true,
    }
}

fn identity_rows(problem: &LayeredProblem, oracle: &TrackingOracle, system: usize, seed: u64) -> Result<Vec<IdentityRow>> {
    let dx = problem.state_dim();
    let n = problem.reference_len();
    let (h, g) = oracle.difference_map();
    let theta = oracle.theta_star();
    let mut rows = Vec::new();

    let fixed = spectral_norm(&(h * theta + g)) / spectral_norm(g).max(f64::MIN_POSITIVE);
    rows.push(below(system, seed, "fixed_point", fixed, 1e-8));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1de7_0001);
    let mut lemma = 0.0f64;
    for _ in 0..5 {
        let th = randn_matrix(&mut rng, n, dx);
        let xi = randn_vector(&mut rng, dx);
        let nu = &th * &xi;
        let (r, sol, _) = oracle.plan_and_track(&nu, &xi)?;
        let traj = rollout(problem, &xi, &sol.u)?;
        let executed = problem.output().apply_stacked_vec(&traj.x, problem.horizon() + 1);
        let predicted = h * &nu + g * &xi;
        let err = (&r - executed - &predicted).amax() / (1.0 + predicted.amax());
        lemma = lemma.max(err);
    }
    rows.push(below(system, seed, "lemma_residual", lemma, 1e-10));

    let mut kkt = 0.0f64;
    for _ in 0..3 {
        let xi = randn_vector(&mut rng, dx);
        let sol = kkt_brute_force(problem, &xi)?;
        kkt = kkt.max((theta * &xi - &sol.nu).amax() / (1.0 + sol.nu.amax()));
    }
    rows.push(below(system, seed, "kkt_dual", kkt, 1e-6));

    let p_min = sym_eigen_range(oracle.p()).0;
    rows.push(IdentityRow { pass: p_min > 0.0, ..below(system, seed, "p_min_eig", p_min, 0.0) });
    let h_max = sym_eigen_range(h).1;
    rows.push(below(system, seed, "h_max_eig", h_max, 0.0));
    if let Some(last) = rows.last_mut() {
        last.pass = h_max < 0.0;
    }
    Ok(rows)
}

/// Identity checks, exact and perturbed dual-learning traces.
/// Writes `theory_identities.csv` and `theta_trace.csv`; fails with a dump
/// of the failing rows when any gating check misses its tolerance.
pub fn cmd_verify_theory(config: &ExperimentConfig) -> Result<CommandOutput> {
    let setup = Setup::resolve(config, 2, 2, 20, 1.0, 5)?;
    let eta = config.eta.unwrap_or(1.0);
    let batch = config.batch.unwrap_or(64);
    let iterations = config.iterations.unwrap_or(200);
    let mut rows = Vec::new();
    let mut trace = CsvTable::new(&["system", "seed", "eps", "iter", "theta_err", "bound"]);
    let mut out = CommandOutput::default();
    let mut decay = Vec::new();

    for i in 0..setup.systems {
        let seed = setup.system_seed(i);
        let problem = setup.problem(i, setup.rho)?;
        let oracle = TrackingOracle::build(&problem)?;
        rows.extend(identity_rows(&problem, &oracle, i, seed)?);

        let learn = DualLearnConfig { eta: StepSize::Fixed(eta), batch, iterations, seed, initial: None };
        let exact = run_exact_dual_learning(&problem, &oracle, &learn)?;
        let gamma = recommended_constants(&oracle)?.gamma(eta, batch);
        let e0 = exact.spectral[0];
        for (k, e) in exact.spectral.iter().enumerate() {
            let bound = if gamma < 1.0 { gamma.powi(k as i32) * e0 } else { f64::INFINITY };
            trace.push(vec![i.into(), seed.into(), 0.0.into(), k.into(), (*e).into(), bound.into()]);
        }
        let ratio = exact.spectral[iterations] / e0.max(f64::MIN_POSITIVE);
        decay.push(ratio);
        rows.push(below(i, seed, "exact_decay", ratio, 1e-6));

        let zero = run_perturbed_dual_learning(&problem, &oracle, &PerturbationSpec::zero(&oracle), &learn)?;
        let gap = zero.spectral.iter().zip(&exact.spectral).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rows.push(below(i, seed, "zero_perturbation_trace", gap, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1de7_0002);
        for eps in PERTURBATION_LEVELS {
            let spec = PerturbationSpec::random_level(&oracle, &mut rng, eps)?;
            let run = run_perturbed_dual_learning(&problem, &oracle, &spec, &learn)?;
            for (k, (e, b)) in run.spectral.iter().zip(&run.bound_trace).enumerate() {
                trace.push(vec![i.into(), seed.into(), eps.into(), k.into(), (*e).into(), (*b).into()]);
            }
        }
    }

    let mut rng_seed = setup.seed ^ 0x1de7_0003;
    for (d, b) in WISHART_CASES {
        let mc = wishart_deviation(d, b, WISHART_TRIALS, rng_seed)?;
        rng_seed = rng_seed.wrapping_add(1);
        let slack = 1.0 + 3.0 / (WISHART_TRIALS as f64).sqrt();
        let exact = ((d * (d + 1)) as f64 / b as f64).sqrt() * slack;
        let stated = wishart_bound(d, b) * slack;
        let label = format!("wishart_d{d}_b{b}");
        rows.push(IdentityRow {
            system: "all".into(),
            seed: setup.seed,
            check: label.clone(),
            value: mc,
            tolerance: exact,
            pass: mc <= exact,
            gating: true,
        });
        rows.push(IdentityRow {
            system: "all".into(),
            seed: setup.seed,
            check: format!("{label}_stated"),
            value: mc,
            tolerance: stated,
            pass: mc <= stated,
            gating: false,
        });
    }

    let mut table = CsvTable::new(&["system", "seed", "check", "value", "tolerance", "pass", "gating"]);
    for r in &rows {
        table.push(vec![
            Cell::Text(r.system.clone()),
            r.seed.into(),
            Cell::Text(r.check.clone()),
            r.value.into(),
            r.tolerance.into(),
            r.pass.into(),
            r.gating.into(),
        ]);
    }
    let dir = config.output_dir();
    write_table(&dir, "theory_identities.csv", &table, &mut out)?;
    write_table(&dir, "theta_trace.csv", &trace, &mut out)?;

    let failures: Vec<&IdentityRow> = rows.iter().filter(|r| r.gating && !r.pass).collect();
    out.summary.push(format!(
        "identity checks: {} gating rows, {} failed; median final/initial dual error {:.3e}",
        rows.iter().filter(|r| r.gating).count(),
        failures.len(),
        median(&decay)
    ));
    if !failures.is_empty() {
        let mut dump = String::new();
        for r in failures {
            writeln!(dump, "system {} seed {} {}: {:e} > {:e}", r.system, r.seed, r.check, r.value, r.tolerance).unwrap();
        }
        return Err(Error::Verification(dump));
    }
    Ok(out)
}

struct PipelineSettings {
    eta: f64,
    batch: usize,
    iterations: usize,
    freeze: Option<usize>,
    episodes: Option<usize>,
    oracle: bool,
    dual: DualArch,
}

impl PipelineSettings {
    fn resolve(c: &ExperimentConfig, eta: f64, batch: usize, dual: DualKind, hidden: usize) -> Result<Self> {
        let dual = match c.dual.unwrap_or(dual) {
            DualKind::Linear => DualArch::Linear,
            DualKind::Mlp => DualArch::Mlp { hidden: c.hidden.unwrap_or(hidden) },
        };
        let s = Self {
            eta: c.eta.unwrap_or(eta),
            batch: c.batch.unwrap_or(batch),
            iterations: c.iterations.unwrap_or(1000),
            freeze: c.freeze_iterations,
            episodes: c.episodes,
            oracle: c.oracle_tracking.unwrap_or(false),
            dual,
        };
        s.layered(0, true).validate()?;
        Ok(s)
    }

    fn layered(&self, seed: u64, dual_enabled: bool) -> LayeredConfig {
        let mut cfg = LayeredConfig {
            tracking: if self.oracle { TrackingMode::Oracle } else { TrackingMode::Learned },
            dual: self.dual.clone(),
            dual_enabled,
            eta: self.eta,
            batch: self.batch,
            joint_iterations: self.iterations,
            episodes_per_refit: self.episodes,
            seed,
            ..LayeredConfig::default()
        };
        if let Some(f) = self.freeze {
            cfg.freeze_iterations = f;
        }
        cfg
    }
}

/// Metrics of a run; a failed run counts as diverged with NaN entries.
fn run_cell(problem: &LayeredProblem, cfg: &LayeredConfig) -> EvalMetrics {
    match run_layered_actor_critic(problem, cfg) {
        Ok(r) => r.metrics,
        Err(_) => EvalMetrics {
            relative_cost: f64::NAN,
            mean_deviation: f64::NAN,
            mean_violation: f64::NAN,
            achieved_cost: f64::NAN,
            optimal_cost: f64::NAN,
            diverged: true,
            unconverged_plans: 0,
        },
    }
}

struct PairedRow {
    seed: u64,
    dual: EvalMetrics,
    nodual: EvalMetrics,
}

impl PairedRow {
    fn flagged(&self) -> bool {
        self.dual.diverged || self.nodual.diverged
    }
}

fn paired_rows(setup: &Setup, settings: &PipelineSettings, rho: f64, bound: Option<f64>) -> Result<Vec<PairedRow>> {
    let mut rows = Vec::with_capacity(setup.systems);
    for i in 0..setup.systems {
        let seed = setup.system_seed(i);
        let mut problem = setup.problem(i, rho)?;
        if let Some(b) = bound.filter(|b| *b > f64::NEG_INFINITY) {
            let spec = ConstraintSpec::uniform_lower(setup.horizon, problem.output_dim(), b);
            problem = problem.constrained(spec)?;
        }
        let dual = run_cell(&problem, &settings.layered(seed, true));
        let nodual = run_cell(&problem, &settings.layered(seed, false));
        rows.push(PairedRow { seed, dual, nodual });
    }
    Ok(rows)
}

fn summarize(label: &str, rows: &[PairedRow]) -> String {
    let pick = |f: fn(&PairedRow) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
    format!(
        "{label}: median relative cost {:.6} (no dual {:.6}), median deviation {:.3e} (no dual {:.3e}), {} flagged",
        pick(|r| r.dual.relative_cost),
        pick(|r| r.nodual.relative_cost),
        pick(|r| r.dual.mean_deviation),
        pick(|r| r.nodual.mean_deviation),
        rows.iter().filter(|r| r.flagged()).count()
    )
}

const LQR_COLUMNS: [&str; 8] = [
    "dx",
    "du",
    "seed",
    "relative_cost",
    "mean_deviation",
    "relative_cost_nodual",
    "mean_deviation_nodual",
    "flagged",
];

fn lqr_cells(setup: &Setup, r: &PairedRow) -> Vec<Cell> {
    vec![
        setup.dx.into(),
        setup.du.into(),
        r.seed.into(),
        r.dual.relative_cost.into(),
        r.dual.mean_deviation.into(),
        r.nodual.relative_cost.into(),
        r.nodual.mean_deviation.into(),
        r.flagged().into(),
    ]
}

/// Learned pipeline and no-dual ablation on unconstrained systems; writes `lqr_table.csv`.
pub fn cmd_lqr_table(config: &ExperimentConfig) -> Result<CommandOutput> {
    let setup = Setup::resolve(config, 2, 2, 20, 1.0, 10)?;
    let settings = PipelineSettings::resolve(config, 0.1, 5, DualKind::Linear, 128)?;
    let rows = paired_rows(&setup, &settings, setup.rho, None)?;
    let mut table = CsvTable::new(&LQR_COLUMNS);
    for r in &rows {
        table.push(lqr_cells(&setup, r));
    }
    let mut out = CommandOutput::default();
    write_table(&config.output_dir(), "lqr_table.csv", &table, &mut out)?;
    out.summary.push(summarize("lqr", &rows));
    Ok(out)
}

/// [`cmd_lqr_table`] per penalty on underactuated systems; writes `rho_sweep.csv`.
/// A configured `rho` restricts the sweep to that value.
pub fn cmd_rho_sweep(config: &ExperimentConfig) -> Result<CommandOutput> {
    let setup = Setup::resolve(config, 4, 2, 10, 1.0, 5)?;
    let settings = PipelineSettings::resolve(config, 0.1, 5, DualKind::Linear, 128)?;
    let rhos: Vec<f64> = match config.rho {
        Some(r) => vec![r],
        None => RHO_VALUES.to_vec(),
    };
    let mut header = vec!["rho"];
    header.extend(LQR_COLUMNS);
    let mut table = CsvTable::new(&header);
    let mut out = CommandOutput::default();
    for rho in rhos {
        let rows = paired_rows(&setup, &settings, rho, None)?;
        for r in &rows {
            let mut cells = vec![Cell::from(rho)];
            cells.extend(lqr_cells(&setup, r));
            table.push(cells);
        }
        out.summary.push(summarize(&format!("rho {rho}"), &rows));
    }
    write_table(&config.output_dir(), "rho_sweep.csv", &table, &mut out)?;
    Ok(out)
}

/// Constrained pipeline with an MLP dual and constrained planner plus the
/// no-dual baseline; writes `clqr_table.csv`. A bound of `-inf` drops the
/// constraint.
pub fn cmd_clqr(config: &ExperimentConfig) -> Result<CommandOutput> {
    let setup = Setup::resolve(config, 2, 2, 20, 0.995, 10)?;
    let settings = PipelineSettings::resolve(config, 0.05, 40, DualKind::Mlp, 128)?;
    let bound = config.constraint_bound.unwrap_or(-0.05);
    if bound.is_nan() || bound == f64::INFINITY {
        return Err(Error::Config(format!("invalid constraint bound {bound}")));
    }
    let rows = paired_rows(&setup, &settings, setup.rho, Some(bound))?;
    let mut table = CsvTable::new(&[
        "dx",
        "du",
        "seed",
        "relative_cost",
        "mean_deviation",
        "violation",
        "relative_cost_nodual",
        "mean_deviation_nodual",
        "violation_nodual",
        "flagged",
    ]);
    for r in &rows {
        table.push(vec![
            setup.dx.into(),
            setup.du.into(),
            r.seed.into(),
            r.dual.relative_cost.into(),
            r.dual.mean_deviation.into(),
            r.dual.mean_violation.into(),
            r.nodual.relative_cost.into(),
            r.nodual.mean_deviation.into(),
            r.nodual.mean_violation.into(),
            r.flagged().into(),
        ]);
    }
    let mut out = CommandOutput::default();
    write_table(&config.output_dir(), "clqr_table.csv", &table, &mut out)?;
    out.summary.push(summarize("clqr", &rows));
    out.summary.push(format!(
        "clqr: median violation {:.3e} (no dual {:.3e})",
        median(&rows.iter().map(|r| r.dual.mean_violation).collect::<Vec<_>>()),
        median(&rows.iter().map(|r| r.nodual.mean_violation).collect::<Vec<_>>())
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys() {
        assert!(ExperimentConfig::from_json_str(r#"{"d_x": 2, "bogus": 1}"#).is_err());
        let c = ExperimentConfig::from_json_str(r#"{"d_x": 3, "T": 5, "B": 8, "K": 9, "dual": "mlp"}"#).unwrap();
        assert_eq!((c.d_x, c.horizon, c.batch, c.iterations, c.dual), (Some(3), Some(5), Some(8), Some(9), Some(DualKind::Mlp)));
    }

    #[test]
    fn parses_infinite_bound() {
        let c = ExperimentConfig::from_json_str(r#"{"constraint_bound": "-inf"}"#).unwrap();
        assert_eq!(c.constraint_bound, Some(f64::NEG_INFINITY));
        let c = ExperimentConfig::from_json_str(r#"{"constraint_bound": -0.1}"#).unwrap();
        assert_eq!(c.constraint_bound, Some(-0.1));
        assert!(ExperimentConfig::from_json_str(r#"{"constraint_bound": "low"}"#).is_err());
    }

    #[test]
    fn median_skips_nan() {
        assert_eq!(median(&[3.0, f64::NAN, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 4.0]), 2.5);
        assert!(median(&[f64::NAN]).is_nan());
    }

    #[test]
    fn rejects_bad_pipeline_settings() {
        let c = ExperimentConfig { batch: Some(0), ..Default::default() };
        assert!(matches!(cmd_lqr_table(&c), Err(Error::Config(_))));
    }
}
