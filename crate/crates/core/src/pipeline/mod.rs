//! Experiment runner behind the command-line tool.
//!
//! Every command writes its files into one output directory. Result files
//! hold no timestamps or paths, so a rerun with the same configuration and
//! seed reproduces them byte for byte; `manifest.json` carries the run
//! metadata.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use config::{CheckConfig, ContractConfig, ExperimentConfig, Overrides, StartConfig};
pub use output::{float, from_rows, read_json, rows, to_json, write_atomic, write_csv, write_json};

use crate::datamarket::{
    bind_model, simulate_market, AnalyticExpectations, DataMarketSpec, SimulationReport,
};
use crate::equilibria::{
    check_noe, check_ve_on_simplex, sample_simplex, simplex_from_slopes, solve_gne, solve_kkt,
    ve_inner_product, verify_gne, DeviationCertificate, GneCandidate, GneOptions,
    SimplexDescription,
};
use crate::error::{Error, Result};
use crate::market::{
    agent_expected_utility, check_feasibility, ContractParams, EffortProfile, MarketModel, Matrix,
};
use crate::stage2::{self, Boundary};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_FILE: &str = "results.json";
pub const EQUILIBRIUM_FILE: &str = "equilibrium.json";
pub const SAMPLES_FILE: &str = "simplex_samples.csv";
pub const STAGE2_FILE: &str = "stage2.json";
pub const GNE_FILE: &str = "gne.json";
pub const SIMPLEX_FILE: &str = "simplex.json";
pub const POINTS_FILE: &str = "simplex_points.csv";
pub const VERIFY_FILE: &str = "verify.json";
pub const SIMULATION_FILE: &str = "simulation.json";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Attached to every document that reports a deviation certificate.
pub const CERTIFICATE_NOTE: &str = "equilibrium verification samples unilateral deviations; \
    it reports the best improvement found and is not a global proof";

const SOLVER_STREAM: u64 = 1;
const SIMPLEX_STREAM: u64 = 2;
const MC_STREAM: u64 = 3;
const START_STREAM: u64 = 4;
const VE_STREAM: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Success,
    NotConverged,
    VerificationFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::NotConverged => 3,
            Outcome::VerificationFailed => 4,
        }
    }

    fn from_pass(pass: bool) -> Self {
        if pass {
            Outcome::Success
        } else {
            Outcome::VerificationFailed
        }
    }
}

/// Exit code for an error that stopped a command.
pub fn error_exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    crate::rng::substream(seed, stream).next_u64()
}

fn bind(spec: &DataMarketSpec) -> Result<MarketModel> {
    bind_model(spec).map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(format!("market: {other}")),
    })
}

fn solver_options(cfg: &ExperimentConfig) -> GneOptions {
    GneOptions {
        seed: derived_seed(cfg.seed, SOLVER_STREAM),
        ..cfg.solver.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub pass: bool,
    /// Worst value of the checked quantity.
    pub worst: f64,
    pub tol: f64,
}

impl Check {
    fn at_most(worst: f64, tol: f64) -> Self {
        Self {
            pass: worst <= tol,
            worst,
            tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Seconds since the Unix epoch; the only time-dependent field of a run.
    pub created_unix: u64,
    pub parallel: bool,
    pub config: Option<ExperimentConfig>,
    pub files: Vec<String>,
    pub outcome: Outcome,
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: Option<&ExperimentConfig>,
    files: &[&str],
    outcome: Outcome,
) -> Result<()> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed: cfg.map_or(0, |c| c.seed),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        parallel: crate::par::is_parallel(),
        config: cfg.cloned(),
        files: files.iter().map(|f| f.to_string()).collect(),
        outcome,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)
}

fn prepare(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

// ---------------------------------------------------------------- stage 2

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub a: Vec<Vec<f64>>,
    pub e_star: Vec<f64>,
    pub boundary: Vec<Boundary>,
    pub per_agent_residual: Vec<f64>,
    /// Efforts are bitwise identical under zero transfers and under the
    /// configured (or centroid) transfers.
    pub independent_of_c: bool,
}

fn stage2_summary(model: &MarketModel, a: &Matrix, c: Option<&Matrix>) -> Result<Stage2Summary> {
    let sol = stage2::solve_efforts(model, a)?;
    let zeros = Matrix::zeros(a.nrows(), a.ncols());
    let other = match c {
        Some(c) => c.clone(),
        None => Matrix::from_element(a.nrows(), a.ncols(), 1.0),
    };
    Ok(Stage2Summary {
        a: rows(a),
        e_star: sol.e_star.0,
        boundary: sol.boundary_flags,
        per_agent_residual: sol.per_agent_residual,
        independent_of_c: stage2::c_independence_check(model, a, &zeros, &other)?,
    })
}

pub fn cmd_stage2(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let model = bind(&cfg.market)?;
    let a = cfg
        .contract_slopes()
        .ok_or_else(|| Error::Config("contract.a is required for stage2".into()))?;
    prepare(out)?;
    let summary = stage2_summary(&model, &a, cfg.contract_transfers().as_ref())?;
    write_json(&out.join(STAGE2_FILE), &summary)?;
    write_manifest(out, "stage2", Some(cfg), &[STAGE2_FILE], Outcome::Success)?;
    Ok(Outcome::Success)
}

// ---------------------------------------------------------------- GNE

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub init: Vec<Vec<f64>>,
    pub converged: bool,
    pub br_iterations: usize,
    pub a: Vec<Vec<f64>>,
    pub max_improvement: Option<f64>,
}

/// An equilibrium candidate together with its market, as read by `verify`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumFile {
    pub market: DataMarketSpec,
    pub converged: bool,
    pub br_iterations: usize,
    pub a: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub e_star: Vec<f64>,
    pub certificate: Option<DeviationCertificate>,
    pub note: String,
}

impl EquilibriumFile {
    fn new(spec: &DataMarketSpec, cand: &GneCandidate) -> Self {
        Self {
            market: spec.clone(),
            converged: cand.converged,
            br_iterations: cand.br_iterations,
            a: rows(&cand.params.a),
            c: rows(&cand.params.c),
            e_star: cand.e_star.0.clone(),
            certificate: cand.certificate.clone(),
            note: CERTIFICATE_NOTE.into(),
        }
    }

    pub fn params(&self) -> Result<ContractParams> {
        let bad =
            |f: &str| Error::Config(format!("equilibrium file: {f} is not a rectangular matrix"));
        let a = from_rows(&self.a).ok_or_else(|| bad("a"))?;
        let c = from_rows(&self.c).ok_or_else(|| bad("c"))?;
        ContractParams::new(c, a).map_err(|e| Error::Config(format!("equilibrium file: {e}")))
    }
}

struct Solved {
    candidates: Vec<GneCandidate>,
    starts: Vec<StartSummary>,
    /// First converged candidate.
    primary: Option<usize>,
}

fn start_matrices(cfg: &ExperimentConfig) -> Vec<Matrix> {
    let (m, n) = (cfg.market.n_principals, cfg.market.n_agents);
    let mut starts = vec![cfg.start_slopes()];
    for s in 0..cfg.start.extra {
        let mut rng = crate::rng::substream(derived_seed(cfg.seed, START_STREAM), s as u64);
        starts.push(Matrix::from_fn(m, n, |_, _| {
            crate::rng::log_uniform(&mut rng, 0.01, 10.0)
        }));
    }
    starts
}

fn solve(cfg: &ExperimentConfig, model: &MarketModel) -> Result<Solved> {
    let opts = solver_options(cfg);
    let inits = start_matrices(cfg);
    let mut candidates = Vec::new();
    let mut starts = Vec::new();
    // Distinct fixed points only; the per-start table keeps every run.
    for init in &inits {
        let cand = solve_gne(model, init, &opts)?;
        starts.push(StartSummary {
            init: rows(init),
            converged: cand.converged,
            br_iterations: cand.br_iterations,
            a: rows(&cand.params.a),
            max_improvement: cand.certificate.as_ref().map(|c| c.max_improvement),
        });
        let duplicate = cand.converged
            && candidates.iter().any(|f: &GneCandidate| {
                f.converged && (&f.params.a - &cand.params.a).amax() < 1e-6
            });
        if !duplicate {
            candidates.push(cand);
        }
    }
    let primary = candidates.iter().position(|c| c.converged);
    Ok(Solved {
        candidates,
        starts,
        primary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GneSummary {
    pub converged: bool,
    pub distinct_fixed_points: usize,
    pub starts: Vec<StartSummary>,
    pub certificate: Option<DeviationCertificate>,
    pub certificate_pass: bool,
    pub note: String,
}

fn gne_summary(cfg: &ExperimentConfig, solved: &Solved) -> GneSummary {
    let cert = solved
        .primary
        .and_then(|p| solved.candidates[p].certificate.clone());
    GneSummary {
        converged: solved.primary.is_some(),
        distinct_fixed_points: solved.candidates.iter().filter(|c| c.converged).count(),
        starts: solved.starts.clone(),
        certificate_pass: cert
            .as_ref()
            .is_some_and(|c| c.passes(cfg.solver.verify_tol)),
        certificate: cert,
        note: CERTIFICATE_NOTE.into(),
    }
}

pub fn cmd_gne(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let model = bind(&cfg.market)?;
    prepare(out)?;
    let solved = solve(cfg, &model)?;
    let summary = gne_summary(cfg, &solved);
    let chosen = &solved.candidates[solved.primary.unwrap_or(0)];
    write_json(
        &out.join(EQUILIBRIUM_FILE),
        &EquilibriumFile::new(&cfg.market, chosen),
    )?;
    write_json(&out.join(GNE_FILE), &summary)?;
    let outcome = if !summary.converged {
        Outcome::NotConverged
    } else {
        Outcome::from_pass(summary.certificate_pass)
    };
    write_manifest(
        out,
        "gne",
        Some(cfg),
        &[EQUILIBRIUM_FILE, GNE_FILE],
        outcome,
    )?;
    Ok(outcome)
}

// ---------------------------------------------------------------- simplex

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexSummary {
    pub a: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    /// `lower_bounds[j][i]`: smallest transfer keeping payment `(j, i)`
    /// nonnegative in expectation.
    pub lower_bounds: Vec<Vec<f64>>,
    pub slack: Vec<f64>,
    pub single_point: bool,
    pub centroid: Vec<Vec<f64>>,
    /// `vertices[i][v][j]`
    pub vertices: Vec<Vec<Vec<f64>>>,
    pub samples: usize,
}

fn simplex_summary(desc: &SimplexDescription, k: usize) -> SimplexSummary {
    let slack = desc.slack();
    SimplexSummary {
        a: rows(&desc.a_ref),
        g: desc.g.clone(),
        lower_bounds: rows(&desc.lower_bounds),
        single_point: desc.n_principals() == 1 || slack.iter().all(|&s| s == 0.0),
        slack,
        centroid: rows(&desc.centroid()),
        vertices: (0..desc.n_agents())
            .map(|i| desc.vertices_for_agent(i))
            .collect(),
        samples: k,
    }
}

fn transfer_header(m: usize, n: usize) -> Vec<String> {
    (0..m)
        .flat_map(|j| (0..n).map(move |i| format!("c[{j}][{i}]")))
        .collect()
}

fn transfer_cells(c: &Matrix) -> Vec<String> {
    c.row_iter()
        .flat_map(|r| r.iter().map(|&x| float(x)).collect::<Vec<_>>())
        .collect()
}

/// Slopes for `simplex`: the equilibrium file, then `contract.a`, then a
/// fresh solve.
pub fn cmd_simplex(
    cfg: &ExperimentConfig,
    equilibrium: Option<&Path>,
    out: &Path,
) -> Result<Outcome> {
    let (spec, a) = if let Some(path) = equilibrium {
        let eq = load_equilibrium(path)?;
        let a = eq.params()?.a;
        (eq.market, a)
    } else if let Some(a) = cfg.contract_slopes() {
        (cfg.market.clone(), a)
    } else {
        let model = bind(&cfg.market)?;
        let solved = solve(cfg, &model)?;
        match solved.primary {
            Some(p) => (cfg.market.clone(), solved.candidates[p].params.a.clone()),
            None => {
                return Err(Error::Structure(
                    "no equilibrium slopes: the solver did not converge".into(),
                ))
            }
        }
    };
    let model = bind(&spec)?;
    prepare(out)?;
    let desc = simplex_from_slopes(&model, &a)?;
    let points = sample_simplex(&desc, cfg.samples, derived_seed(cfg.seed, SIMPLEX_STREAM))?;
    let mu = EffortProfile(stage2::mu(&model, &a)?);
    let (m, n) = (model.n_principals(), model.n_agents());
    let mut header = vec!["sample".to_string()];
    header.extend(transfer_header(m, n));
    header.extend((0..n).map(|i| format!("row_sum[{i}]")));
    header.extend((0..n).map(|i| format!("ir_slack[{i}]")));
    header.push("min_payment_slack".into());
    let mut table = Vec::new();
    for (t, c) in points.iter().enumerate() {
        let params = ContractParams {
            c: c.clone(),
            a: a.clone(),
        };
        let rep = check_feasibility(&model, &params, &mu, cfg.checks.positivity_tol)?;
        let mut row = vec![t.to_string()];
        row.extend(transfer_cells(c));
        row.extend((0..n).map(|i| float(c.column(i).sum())));
        row.extend(rep.ir_slack.iter().map(|&x| float(x)));
        row.push(float(rep.payment_slack.min()));
        table.push(row);
    }
    write_json(
        &out.join(SIMPLEX_FILE),
        &simplex_summary(&desc, cfg.samples),
    )?;
    write_csv(&out.join(POINTS_FILE), &header, &table)?;
    write_manifest(
        out,
        "simplex",
        Some(cfg),
        &[SIMPLEX_FILE, POINTS_FILE],
        Outcome::Success,
    )?;
    Ok(Outcome::Success)
}

// ---------------------------------------------------------------- checks

/// Checks at one point of the transfer polytope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCheck {
    pub c: Vec<Vec<f64>>,
    /// Expected utility per agent; zero when IR binds.
    pub ir_slack: Vec<f64>,
    pub min_payment_slack: f64,
    pub feasible: bool,
    pub gne_improvement: f64,
    pub ve_vs_centroid: f64,
    /// Every payment slack at least ten times the active tolerance.
    pub interior: bool,
    /// Mean IR multiplier over principals.
    pub lambda: Vec<f64>,
    pub lambda_error: f64,
    pub stationarity: f64,
    pub nu_max: f64,
    pub noe_equal_weights: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChecksSummary {
    pub points: usize,
    pub interior_points: usize,
    pub boundary_points: usize,
    pub feasibility: Check,
    pub ir_binding: Check,
    pub gne_deviation: Check,
    pub ve: Check,
    /// Multiplier checks cover interior points only.
    pub kkt_lambda: Check,
    pub kkt_stationarity: Check,
    pub kkt_nu: Check,
    pub noe: Check,
}

impl ChecksSummary {
    pub fn pass(&self) -> bool {
        [
            self.feasibility,
            self.ir_binding,
            self.gne_deviation,
            self.ve,
            self.kkt_lambda,
            self.kkt_stationarity,
            self.kkt_nu,
            self.noe,
        ]
        .iter()
        .all(|c| c.pass)
    }
}

fn check_point(
    cfg: &ExperimentConfig,
    model: &MarketModel,
    params: &ContractParams,
    centroid: &ContractParams,
    mu: &EffortProfile,
    index: u64,
) -> Result<PointCheck> {
    let checks = &cfg.checks;
    let (m, n) = (model.n_principals(), model.n_agents());
    let rep = check_feasibility(model, params, mu, 0.0)?;
    let ir_slack: Vec<f64> = (0..n)
        .map(|i| agent_expected_utility(model, params, mu, i))
        .collect::<Result<_>>()?;
    let min_payment_slack = rep.payment_slack.min();
    let feasible = ir_slack.iter().all(|&s| s >= -checks.ir_tol)
        && min_payment_slack >= -checks.positivity_tol;
    let base = solver_options(cfg);
    let opts = GneOptions {
        seed: derived_seed(base.seed, index),
        ..base
    };
    let cert = verify_gne(model, params, &opts)?;
    let ve = if feasible {
        ve_inner_product(model, centroid, params)?
    } else {
        f64::NAN
    };
    let interior = min_payment_slack >= 10.0 * checks.active_tol;
    let (lambda, lambda_error, stationarity, nu_max, noe) = if feasible {
        let kkt = solve_kkt(model, params, checks.active_tol)?;
        let err = kkt
            .per_principal_lambda
            .iter()
            .flatten()
            .fold(0.0f64, |w, &l| w.max((l - 1.0).abs()));
        let noe = check_noe(model, params, &vec![1.0; m], checks.noe_tol)?;
        (
            kkt.lambda.clone(),
            err,
            kkt.stationarity_residual,
            kkt.max_abs_nu(),
            noe,
        )
    } else {
        (vec![f64::NAN; n], f64::NAN, f64::NAN, f64::NAN, false)
    };
    Ok(PointCheck {
        c: rows(&params.c),
        ir_slack,
        min_payment_slack,
        feasible,
        gne_improvement: cert.max_improvement,
        ve_vs_centroid: ve,
        interior,
        lambda,
        lambda_error,
        stationarity,
        nu_max,
        noe_equal_weights: noe,
    })
}

/// `NaN` counts as a failure.
fn worst(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0f64, |w, v| {
        if v.is_nan() || w.is_nan() {
            f64::NAN
        } else {
            w.max(v)
        }
    })
}

fn check_at(worst_value: f64, tol: f64) -> Check {
    if worst_value.is_nan() {
        Check {
            pass: false,
            worst: worst_value,
            tol,
        }
    } else {
        Check::at_most(worst_value, tol)
    }
}

fn summarize(
    cfg: &ExperimentConfig,
    points: &[PointCheck],
    ve_sampled_pass: bool,
) -> ChecksSummary {
    let t = &cfg.checks;
    let interior: Vec<&PointCheck> = points.iter().filter(|p| p.interior).collect();
    // Largest constraint violation; zero when every point is feasible.
    let feas_worst = worst(points.iter().map(|p| {
        p.ir_slack
            .iter()
            .fold(-p.min_payment_slack, |w, &s| w.max(-s))
            .max(0.0)
    }));
    let mut ve = check_at(
        worst(points.iter().map(|p| p.ve_vs_centroid.abs())),
        t.ve_tol,
    );
    ve.pass &= ve_sampled_pass;
    let noe_failures = interior.iter().filter(|p| !p.noe_equal_weights).count();
    ChecksSummary {
        points: points.len(),
        interior_points: interior.len(),
        boundary_points: points.len() - interior.len(),
        feasibility: Check {
            pass: points.iter().all(|p| p.feasible),
            worst: feas_worst,
            tol: t.ir_tol,
        },
        ir_binding: check_at(
            worst(
                points
                    .iter()
                    .flat_map(|p| p.ir_slack.iter().map(|s| s.abs())),
            ),
            t.ir_tol,
        ),
        gne_deviation: check_at(
            points
                .iter()
                .map(|p| p.gne_improvement)
                .fold(f64::NEG_INFINITY, f64::max),
            cfg.solver.verify_tol,
        ),
        ve,
        kkt_lambda: check_at(worst(interior.iter().map(|p| p.lambda_error)), t.lambda_tol),
        kkt_stationarity: check_at(
            worst(interior.iter().map(|p| p.stationarity)),
            t.stationarity_tol,
        ),
        kkt_nu: check_at(worst(interior.iter().map(|p| p.nu_max)), 0.0),
        noe: Check {
            pass: noe_failures == 0,
            worst: noe_failures as f64,
            tol: 0.0,
        },
    }
}

fn points_table(m: usize, n: usize, points: &[PointCheck]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["sample".to_string()];
    header.extend(transfer_header(m, n));
    header.extend((0..n).map(|i| format!("ir_slack[{i}]")));
    header.push("min_payment_slack".into());
    header.push("gne_improvement".into());
    header.push("ve_vs_centroid".into());
    header.push("interior".into());
    header.extend((0..n).map(|i| format!("lambda[{i}]")));
    header.push("lambda_error".into());
    header.push("stationarity".into());
    header.push("nu_max".into());
    header.push("noe".into());
    let table = points
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let mut row = vec![t.to_string()];
            row.extend(p.c.iter().flatten().map(|&x| float(x)));
            row.extend(p.ir_slack.iter().map(|&x| float(x)));
            row.push(float(p.min_payment_slack));
            row.push(float(p.gne_improvement));
            row.push(float(p.ve_vs_centroid));
            row.push(p.interior.to_string());
            row.extend(p.lambda.iter().map(|&x| float(x)));
            row.push(float(p.lambda_error));
            row.push(float(p.stationarity));
            row.push(float(p.nu_max));
            row.push(p.noe_equal_weights.to_string());
            row
        })
        .collect();
    (header, table)
}

// ---------------------------------------------------------------- simulate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub a: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub efforts: Vec<f64>,
    pub max_z: f64,
    pub z_limit: f64,
    pub pass: bool,
    pub analytic: AnalyticExpectations,
    pub estimates: SimulationReport,
}

fn simulation_summary(
    cfg: &ExperimentConfig,
    spec: &DataMarketSpec,
    params: &ContractParams,
    e: &EffortProfile,
) -> Result<SimulationSummary> {
    let report = simulate_market(
        spec,
        params,
        e,
        cfg.mc_samples,
        derived_seed(cfg.seed, MC_STREAM),
    )?;
    let exact = AnalyticExpectations::compute(spec, params, e)?;
    let max_z = report.max_z_score(&exact);
    Ok(SimulationSummary {
        a: rows(&params.a),
        c: rows(&params.c),
        efforts: e.0.clone(),
        max_z,
        z_limit: cfg.checks.mc_z,
        pass: max_z <= cfg.checks.mc_z,
        analytic: exact,
        estimates: report,
    })
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let model = bind(&cfg.market)?;
    let a = cfg
        .contract_slopes()
        .ok_or_else(|| Error::Config("contract.a is required for simulate".into()))?;
    let c = match cfg.contract_transfers() {
        Some(c) => c,
        None => simplex_from_slopes(&model, &a)?.centroid(),
    };
    let e = match cfg.contract.as_ref().and_then(|k| k.efforts.clone()) {
        Some(e) => EffortProfile(e),
        None => EffortProfile(stage2::mu(&model, &a)?),
    };
    prepare(out)?;
    let summary = simulation_summary(cfg, &cfg.market, &ContractParams { c, a }, &e)?;
    let outcome = Outcome::from_pass(summary.pass);
    write_json(&out.join(SIMULATION_FILE), &summary)?;
    write_manifest(out, "simulate", Some(cfg), &[SIMULATION_FILE], outcome)?;
    Ok(outcome)
}

// ---------------------------------------------------------------- run

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub outcome: Outcome,
    pub n_agents: usize,
    pub n_principals: usize,
    pub seed: u64,
    pub gne: GneSummary,
    pub stage2: Option<Stage2Summary>,
    pub simplex: Option<SimplexSummary>,
    pub checks: Option<ChecksSummary>,
    pub simulation: Option<SimulationSummary>,
}

/// Solve, sample the polytope of equilibria, check every sampled point
/// and cross-check the closed forms by simulation. Writes
/// `results.json`, `equilibrium.json`, `simplex_samples.csv` and the
/// manifest into `out`.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let model = bind(&cfg.market)?;
    prepare(out)?;
    let solved = solve(cfg, &model)?;
    let gne = gne_summary(cfg, &solved);
    let mut results = RunResults {
        outcome: Outcome::NotConverged,
        n_agents: cfg.market.n_agents,
        n_principals: cfg.market.n_principals,
        seed: cfg.seed,
        gne,
        stage2: None,
        simplex: None,
        checks: None,
        simulation: None,
    };
    let chosen = &solved.candidates[solved.primary.unwrap_or(0)];
    write_json(
        &out.join(EQUILIBRIUM_FILE),
        &EquilibriumFile::new(&cfg.market, chosen),
    )?;

    let Some(p) = solved.primary else {
        write_json(&out.join(RESULTS_FILE), &results)?;
        write_manifest(
            out,
            "run",
            Some(cfg),
            &[RESULTS_FILE, EQUILIBRIUM_FILE],
            results.outcome,
        )?;
        return Ok(results.outcome);
    };
    let cand = &solved.candidates[p];
    let a = cand.params.a.clone();
    let centroid = cand.params.clone();
    results.stage2 = Some(stage2_summary(&model, &a, Some(&centroid.c))?);

    let desc = simplex_from_slopes(&model, &a)?;
    results.simplex = Some(simplex_summary(&desc, cfg.samples));
    let samples = sample_simplex(&desc, cfg.samples, derived_seed(cfg.seed, SIMPLEX_STREAM))?;
    let mu = cand.e_star.clone();
    let points: Vec<PointCheck> = samples
        .into_iter()
        .enumerate()
        .map(|(t, c)| {
            let params = ContractParams { c, a: a.clone() };
            check_point(cfg, &model, &params, &centroid, &mu, t as u64)
        })
        .collect::<Result<_>>()?;
    let ve_sampled = check_ve_on_simplex(
        &model,
        &desc,
        cfg.samples,
        derived_seed(cfg.seed, VE_STREAM),
        cfg.checks.ve_tol,
    )?;
    let checks = summarize(cfg, &points, ve_sampled);
    let (header, table) = points_table(model.n_principals(), model.n_agents(), &points);
    write_csv(&out.join(SAMPLES_FILE), &header, &table)?;

    let sim = simulation_summary(cfg, &cfg.market, &centroid, &mu)?;
    let pass = results.gne.certificate_pass && checks.pass() && sim.pass;
    results.checks = Some(checks);
    results.simulation = Some(sim);
    results.outcome = Outcome::from_pass(pass);
    write_json(&out.join(RESULTS_FILE), &results)?;
    write_manifest(
        out,
        "run",
        Some(cfg),
        &[RESULTS_FILE, EQUILIBRIUM_FILE, SAMPLES_FILE],
        results.outcome,
    )?;
    Ok(results.outcome)
}

// ---------------------------------------------------------------- verify

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyResults {
    pub outcome: Outcome,
    pub converged_flag: bool,
    /// Largest distance of the transfers from the polytope for their slopes.
    pub simplex_violation: f64,
    pub point: PointCheck,
    pub checks: ChecksSummary,
    pub note: String,
}

pub fn load_equilibrium(path: &Path) -> Result<EquilibriumFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Checks binding IR, the deviation certificate, the variational and
/// normalized conditions at the point stored in `equilibrium`. Tolerances,
/// sample counts and seeds come from `cfg`; its market section is ignored.
pub fn cmd_verify(cfg: &ExperimentConfig, equilibrium: &Path, out: &Path) -> Result<Outcome> {
    let eq = load_equilibrium(equilibrium)?;
    let model = bind(&eq.market)?;
    let params = eq.params()?;
    model
        .check_contract(&params)
        .map_err(|e| Error::Config(format!("equilibrium file: {e}")))?;
    prepare(out)?;
    let cfg = ExperimentConfig {
        market: eq.market.clone(),
        ..cfg.clone()
    };
    let mu = EffortProfile(stage2::mu(&model, &params.a)?);
    let reference = simplex_from_slopes(&model, &params.a);
    let (violation, centroid, ve_sampled) = match &reference {
        Ok(desc) => (
            desc.violation(&params.c),
            ContractParams {
                c: desc.centroid(),
                a: params.a.clone(),
            },
            check_ve_on_simplex(
                &model,
                desc,
                cfg.samples,
                derived_seed(cfg.seed, VE_STREAM),
                cfg.checks.ve_tol,
            )?,
        ),
        Err(_) => (f64::INFINITY, params.clone(), false),
    };
    let point = check_point(&cfg, &model, &params, &centroid, &mu, 0)?;
    let checks = summarize(&cfg, std::slice::from_ref(&point), ve_sampled);
    let pass = checks.pass() && violation <= cfg.checks.ir_tol;
    let results = VerifyResults {
        outcome: Outcome::from_pass(pass),
        converged_flag: eq.converged,
        simplex_violation: violation,
        point,
        checks,
        note: CERTIFICATE_NOTE.into(),
    };
    write_json(&out.join(VERIFY_FILE), &results)?;
    write_manifest(out, "verify", Some(&cfg), &[VERIFY_FILE], results.outcome)?;
    Ok(results.outcome)
}

// ---------------------------------------------------------------- report

/// Columns of `summary.csv`: a name and a JSON pointer into each kind of
/// result document.
const REPORT_COLUMNS: &[(&str, &[&str])] = &[
    ("outcome", &["/outcome"]),
    ("n_agents", &["/n_agents", "/market/n_agents"]),
    ("n_principals", &["/n_principals", "/market/n_principals"]),
    (
        "converged",
        &["/gne/converged", "/converged", "/converged_flag"],
    ),
    (
        "max_improvement",
        &[
            "/gne/certificate/max_improvement",
            "/certificate/max_improvement",
        ],
    ),
    ("ir_binding", &["/checks/ir_binding/worst"]),
    ("ve", &["/checks/ve/worst"]),
    ("lambda_error", &["/checks/kkt_lambda/worst"]),
    ("stationarity", &["/checks/kkt_stationarity/worst"]),
    ("nu_max", &["/checks/kkt_nu/worst"]),
    ("interior_points", &["/checks/interior_points"]),
    ("mc_max_z", &["/simulation/max_z", "/max_z"]),
];

const REPORT_FILES: &[&str] = &[RESULTS_FILE, VERIFY_FILE, EQUILIBRIUM_FILE, SIMULATION_FILE];

fn cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::Number(x)) => match x.as_f64() {
            Some(f) if x.is_f64() => float(f),
            _ => x.to_string(),
        },
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

/// Merges result documents into one table. Directories contribute every
/// known result file they contain.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<(Outcome, Vec<Vec<String>>)> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            files.extend(
                REPORT_FILES
                    .iter()
                    .map(|f| input.join(f))
                    .filter(|p| p.is_file()),
            );
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Config("report: no result files found".into()));
    }
    let mut header = vec!["source".to_string()];
    header.extend(REPORT_COLUMNS.iter().map(|(name, _)| name.to_string()));
    let mut table = Vec::new();
    for f in &files {
        let doc: Value =
            read_json(f).map_err(|e| Error::Config(format!("{}: {e}", f.display())))?;
        let mut row = vec![f.display().to_string()];
        for (_, pointers) in REPORT_COLUMNS {
            row.push(cell(pointers.iter().find_map(|p| doc.pointer(p))));
        }
        table.push(row);
    }
    prepare(out)?;
    write_csv(&out.join(SUMMARY_FILE), &header, &table)?;
    let mut all = vec![header];
    all.extend(table);
    Ok((Outcome::Success, all))
}
