//! Command-line surface: offline synthesis, closed-loop simulation,
//! property verification, and summary reporting over JSON/CSV artifacts.
//!
//! Exit codes: 0 success, 1 check failure, 2 config/parse error,
//! 3 infeasible synthesis, 4 simulation halted on infeasibility.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{model_by_name, system_rows_from_boxes, BoxSet};
use crate::sim::{run_closed_loop, summarize, trace_to_csv, RunSummary, Scenario, SimTrace};
use crate::synthesis::{
    compute_alpha_lp, compute_wbar, compute_wbar_o,
    optimize_observer_gain, synth_ccm, synth_rompc, synth_terminal_cost, synth_tmpc_terminal,
    validate_design, CostWeights, DesignArtifact, Multipliers, SynthContext, SynthGrid, Variant,
};
use crate::verify::{
    verify_descent, verify_lipschitz_and_contraction, verify_recursive_feasibility,
    verify_terminal_invariance,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_HALTED: i32 = 4;

#[derive(Parser)]
#[command(name = "safe-nmpc", about = "Tube-based robust NMPC toolchain", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run offline synthesis from a JSON config, writing a design artifact
    /// and a validation report.
    Synth(SynthArgs),
    /// Run a closed-loop scenario (optionally a batch of seeds), writing
    /// trace CSV/JSON and a run summary.
    Simulate(SimArgs),
    /// Run property checks against a trace and/or artifact.
    Verify(VerifyArgs),
    /// Aggregate run summaries in a directory into a table and CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Synthesis config JSON path.
    config: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    /// Scenario JSON path.
    scenario: PathBuf,
    /// Output directory for traces and summaries.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of consecutive seeds to run starting at the scenario seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Design artifact JSON path.
    #[arg(long)]
    artifact: PathBuf,
    /// Scenario JSON path (supplies the reference, boxes, and seeds).
    #[arg(long)]
    scenario: PathBuf,
    /// Trace JSON path (required by trace-based checks).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Comma-separated checks: descent, recursive_feasibility,
    /// terminal_invariance, lipschitz.
    #[arg(long, value_delimiter = ',')]
    checks: Vec<String>,
    /// Report output path.
    #[arg(long, default_value = "verify_report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing `*summary*.json` files from simulate runs.
    dir: PathBuf,
    /// Aggregated CSV output path.
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
}

/// Offline synthesis configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub schema: u32,
    pub variant: Variant,
    pub model: String,
    /// Artifact output path.
    pub out: String,
    /// Validation report output path.
    #[serde(default)]
    pub validation_out: Option<String>,
    /// Diagonal stage weights.
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    /// Tracking-variant regularization added to Q in the terminal LMI.
    #[serde(default)]
    pub eps_reg: f64,
    /// Tube contraction rate (tube variants).
    #[serde(default)]
    pub rho: f64,
    /// Pinned invariance multiplier; bisected when absent.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Output-feedback multipliers.
    #[serde(default)]
    pub multipliers: Option<Multipliers>,
    /// Observer-error bound (output-feedback variant).
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Observer gain rows (row-major); optimized when absent.
    #[serde(default)]
    pub l_gain: Option<Vec<Vec<f64>>>,
    /// Penalty on the observer-gain norm bound when optimizing it.
    #[serde(default = "default_l_penalty")]
    pub l_penalty: f64,
    /// Grid points per nonlinear dimension.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Densification factor of the validation grid.
    #[serde(default = "default_dense_factor")]
    pub dense_factor: usize,
    pub x_box: BoxSet,
    pub u_box: BoxSet,
    pub w_box: BoxSet,
    #[serde(default)]
    pub eta_box: Option<BoxSet>,
    /// Terminal-set scaling override; derived from the invariance bound (or
    /// the scaling LP for the tracking variant) when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Reference points `(u^r, x^r)` for the terminal-scaling LP.
    #[serde(default)]
    pub reference_points: Option<Vec<Vec<f64>>>,
    /// Characteristic obstacle-constraint interval for the cost weights.
    #[serde(default = "default_obstacle_span")]
    pub obstacle_span: f64,
}

fn default_grid_points() -> usize {
    3
}
fn default_dense_factor() -> usize {
    10
}
fn default_obstacle_span() -> f64 {
    2.0
}
fn default_l_penalty() -> f64 {
    1.0
}

/// Verification report written by `verify`.
#[derive(Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema: u32,
    pub checks: Vec<(String, bool, serde_json::Value)>,
    pub pass: bool,
}

/// Entry point: parse arguments and dispatch. Returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    init_thread_pool();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // Help/version exit 0; real argument errors are config errors.
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(&a.config),
        Command::Simulate(a) => cmd_simulate(&a.scenario, &a.out, a.seeds),
        Command::Verify(a) => cmd_verify(&a),
        Command::Report(a) => cmd_report(&a.dir, &a.out),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Infeasible(_) => EXIT_INFEASIBLE,
                _ => EXIT_CONFIG,
            }
        }
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("SAFE_NMPC_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("parsing {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::Io(format!("creating {}: {e}", parent.display())))?;
        }
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Io(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
}

fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(values))
}

/// Run offline synthesis per the config and write the artifact.
pub fn cmd_synth(config_path: &Path) -> Result<i32> {
    let cfg: SynthConfig = read_json(config_path)?;
    if cfg.schema != 1 {
        return Err(Error::Config(format!("unsupported synth config schema {}", cfg.schema)));
    }
    let model = model_by_name(&cfg.model)?;
    let q = diag(&cfg.q_diag);
    let r = diag(&cfg.r_diag);
    if q.nrows() != model.n_x || r.nrows() != model.n_u {
        return Err(Error::Config("weight dimensions do not match the model".into()));
    }
    let system_rows = system_rows_from_boxes(&cfg.u_box, &cfg.x_box);
    let grid = SynthGrid::for_model(&model, &cfg.x_box, &cfg.u_box, cfg.grid_points)?;
    let weights = CostWeights::from_rows(&system_rows, cfg.obstacle_span);
    let default_refs = vec![DVector::zeros(model.n_u + model.n_x)];
    let reference_points: Vec<DVector<f64>> = cfg
        .reference_points
        .as_ref()
        .map(|pts| pts.iter().map(|p| DVector::from_vec(p.clone())).collect())
        .unwrap_or(default_refs);

    let artifact = match cfg.variant {
        Variant::Tmpc => {
            let (p, k, _residual) = synth_tmpc_terminal(&model, &q, &r, cfg.eps_reg, &grid)?;
            let alpha = match cfg.alpha {
                Some(a) => a,
                None => compute_alpha_lp(&p, &k, &reference_points, &system_rows)?,
            };
            DesignArtifact {
                schema: 1,
                variant: Variant::Tmpc,
                model: cfg.model.clone(),
                p,
                k: Some(k),
                pdelta: None,
                kdelta: None,
                rho: 0.0,
                wbar: 0.0,
                c_s: vec![],
                c_s_o: vec![],
                c_o: 0.0,
                alpha,
                l_gain: None,
                epsilon: 0.0,
                multipliers: Multipliers::default(),
                q_weight: q.clone(),
                r_weight: r.clone(),
                eps_reg: cfg.eps_reg,
                n_u: model.n_u,
                validation: Default::default(),
            }
        }
        Variant::Rmpc => {
            if cfg.rho <= 0.0 {
                return Err(Error::Config("tube synthesis needs rho > 0".into()));
            }
            let ccm =
                synth_ccm(&model, cfg.rho, cfg.lambda, &grid, &cfg.w_box, &system_rows, &weights)?;
            let kdelta = ccm.kdelta.clone();
            let (p, _residual) = synth_terminal_cost(&model, &kdelta, &q, &r, &grid)?;
            let wbar = compute_wbar(&ccm.pdelta, &model.e_mat, &cfg.w_box);
            let alpha = cfg.alpha.unwrap_or(wbar / cfg.rho);
            DesignArtifact {
                schema: 1,
                variant: Variant::Rmpc,
                model: cfg.model.clone(),
                p,
                k: None,
                pdelta: Some(ccm.pdelta),
                kdelta: Some(kdelta),
                rho: cfg.rho,
                wbar,
                c_s: ccm.c_s.clone(),
                c_s_o: vec![0.0; ccm.c_s.len()],
                c_o: ccm.c_o,
                alpha,
                l_gain: None,
                epsilon: 0.0,
                multipliers: Multipliers {
                    lambda: ccm.lambda,
                    ..Multipliers::default()
                },
                q_weight: q.clone(),
                r_weight: r.clone(),
                eps_reg: 0.0,
                n_u: model.n_u,
                validation: Default::default(),
            }
        }
        Variant::Rompc => {
            if cfg.rho <= 0.0 {
                return Err(Error::Config("tube synthesis needs rho > 0".into()));
            }
            let epsilon = cfg
                .epsilon
                .ok_or_else(|| Error::Config("output-feedback synthesis needs epsilon".into()))?;
            let mult = cfg.multipliers.ok_or_else(|| {
                Error::Config("output-feedback synthesis needs the multiplier set".into())
            })?;
            let eta_box = cfg
                .eta_box
                .clone()
                .ok_or_else(|| Error::Config("output-feedback synthesis needs eta_box".into()))?;
            if mult.lambda_delta < mult.lambda_delta_eps * epsilon * epsilon {
                return Err(Error::Config(format!(
                    "multiplier inequality violated: lambda_delta {} < lambda_delta_eps·epsilon² {}",
                    mult.lambda_delta,
                    mult.lambda_delta_eps * epsilon * epsilon
                )));
            }
            let l_gain = match &cfg.l_gain {
                Some(rows) => {
                    let nr = rows.len();
                    let nc = rows.first().map(|r| r.len()).unwrap_or(0);
                    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
                }
                None => {
                    // Seed the metric with a state-feedback design, then
                    // optimize the injection gain against it.
                    let ccm = synth_ccm(
                        &model,
                        cfg.rho,
                        Some(mult.lambda_delta),
                        &grid,
                        &cfg.w_box,
                        &system_rows,
                        &weights,
                    )?;
                    optimize_observer_gain(
                        &ccm.pdelta,
                        &ccm.kdelta,
                        &model,
                        &mult,
                        &grid,
                        &cfg.w_box,
                        &eta_box,
                        cfg.l_penalty,
                    )?
                    .l_gain
                }
            };
            let res = synth_rompc(
                &model,
                &l_gain,
                cfg.rho,
                &mult,
                epsilon,
                &grid,
                &cfg.w_box,
                &eta_box,
                &system_rows,
                &weights,
            )?;
            let (p, _residual) = synth_terminal_cost(&model, &res.kdelta, &q, &r, &grid)?;
            let wbar_o =
                compute_wbar_o(&res.pdelta, &l_gain, &model.c_mat, &model.f_mat, &eta_box, epsilon)?;
            let alpha = cfg.alpha.unwrap_or(wbar_o / cfg.rho + epsilon);
            DesignArtifact {
                schema: 1,
                variant: Variant::Rompc,
                model: cfg.model.clone(),
                p,
                k: None,
                pdelta: Some(res.pdelta),
                kdelta: Some(res.kdelta),
                rho: cfg.rho,
                wbar: wbar_o,
                c_s: res.c_s.clone(),
                c_s_o: res.c_s_o.clone(),
                c_o: res.c_o,
                alpha,
                l_gain: Some(l_gain),
                epsilon,
                multipliers: mult,
                q_weight: q.clone(),
                r_weight: r.clone(),
                eps_reg: 0.0,
                n_u: model.n_u,
                validation: Default::default(),
            }
        }
    };

    // Re-check everything on a densified grid before publishing.
    let ctx = SynthContext {
        model: model.clone(),
        grid: grid.clone(),
        system_rows: system_rows.clone(),
        w_box: cfg.w_box.clone(),
        h_box: cfg.eta_box.clone(),
        q: q.clone(),
        r: r.clone(),
        eps_reg: cfg.eps_reg,
        weights: weights.clone(),
    };
    let mut artifact = artifact;
    let validation = validate_design(&artifact, &ctx, cfg.dense_factor)?;
    let ok = validation.passes(1e-6);
    artifact.validation = validation.clone();
    artifact.check_invariants()?;
    write_json(Path::new(&artifact_path(&cfg)), &artifact)?;
    let validation_path = cfg
        .validation_out
        .clone()
        .unwrap_or_else(|| format!("{}.validation.json", cfg.out.trim_end_matches(".json")));
    write_json(Path::new(&validation_path), &validation)?;
    println!(
        "synth {}: wrote {} (validation worst residual {:.3e})",
        if ok { "ok" } else { "FAILED" },
        cfg.out,
        validation.worst()
    );
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn artifact_path(cfg: &SynthConfig) -> String {
    cfg.out.clone()
}

/// Run one scenario for `seeds` consecutive seeds and write the outputs.
pub fn cmd_simulate(scenario_path: &Path, out_dir: &Path, seeds: u64) -> Result<i32> {
    let scenario: Scenario = read_json(scenario_path)?;
    scenario.check_invariants()?;
    let artifact_file = scenario
        .artifact
        .clone()
        .ok_or_else(|| Error::Config("scenario has no artifact path".into()))?;
    let artifact: DesignArtifact = read_json(Path::new(&artifact_file))?;
    artifact.check_invariants()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("creating {}: {e}", out_dir.display())))?;

    use rayon::prelude::*;
    let runs: Vec<(u64, Result<(SimTrace, RunSummary)>)> = (0..seeds)
        .into_par_iter()
        .map(|i| {
            let mut sc = scenario.clone();
            sc.seed = scenario.seed + i;
            let result = run_closed_loop(&sc, &artifact).map(|trace| {
                let reference = sc.reference.build(sc.duration + 2.0 * sc.ts);
                let summary = summarize(&trace, &reference);
                (trace, summary)
            });
            (sc.seed, result)
        })
        .collect();

    let mut worst_exit = EXIT_OK;
    let mut aggregate = Vec::new();
    for (seed, run) in runs {
        let (trace, summary) = run?;
        let base = out_dir.join(format!("trace_seed{seed}"));
        std::fs::write(base.with_extension("csv"), trace_to_csv(&trace))
            .map_err(|e| Error::Io(format!("writing trace csv: {e}")))?;
        write_json(&base.with_extension("json"), &trace)?;
        write_json(&out_dir.join(format!("summary_seed{seed}.json")), &summary)?;
        if trace.halted.is_some() {
            worst_exit = EXIT_HALTED;
        } else if summary.violations > 0 {
            worst_exit = worst_exit.max(EXIT_CHECK_FAILED);
        }
        aggregate.push((seed, summary));
    }
    let total_violations: usize = aggregate.iter().map(|(_, s)| s.violations).sum();
    let batch = serde_json::json!({
        "schema": 1,
        "runs": aggregate.len(),
        "total_violations": total_violations,
        "halted_runs": aggregate.iter().filter(|(_, s)| s.halted.is_some()).count(),
        "worst_margin_sys": aggregate.iter().map(|(_, s)| s.worst_margin_sys).fold(f64::INFINITY, f64::min),
        "worst_margin_obs": aggregate.iter().map(|(_, s)| s.worst_margin_obs).fold(f64::INFINITY, f64::min),
        "worst_tube_gap": aggregate.iter().map(|(_, s)| s.worst_tube_gap).fold(f64::NEG_INFINITY, f64::max),
        "worst_observer_gap": aggregate.iter().map(|(_, s)| s.worst_observer_gap).fold(f64::NEG_INFINITY, f64::max),
    });
    write_json(&out_dir.join("batch_summary.json"), &batch)?;
    println!(
        "simulate: {} run(s), {} violation record(s), outputs in {}",
        aggregate.len(),
        total_violations,
        out_dir.display()
    );
    Ok(worst_exit)
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    if args.checks.is_empty() {
        return Err(Error::Config("no checks requested".into()));
    }
    let artifact: DesignArtifact = read_json(&args.artifact)?;
    artifact.check_invariants()?;
    let scenario: Scenario = read_json(&args.scenario)?;
    let model = model_by_name(&scenario.model)?;
    let reference = scenario.reference.build(scenario.duration + 2.0 * scenario.ts);
    let trace: Option<SimTrace> = match &args.trace {
        Some(p) => Some(read_json(p)?),
        None => None,
    };
    let need_trace = || -> Result<&SimTrace> {
        trace.as_ref().ok_or_else(|| Error::Config("this check needs --trace".into()))
    };
    let mut checks = Vec::new();
    let mut all_pass = true;
    for name in &args.checks {
        let (pass, detail) = match name.as_str() {
            "descent" => {
                let r = verify_descent(need_trace()?, &artifact, &reference);
                (r.pass, serde_json::to_value(&r).unwrap())
            }
            "recursive_feasibility" => {
                let r = verify_recursive_feasibility(need_trace()?, 1e-6);
                (r.pass, serde_json::to_value(&r).unwrap())
            }
            "terminal_invariance" => {
                let s_test = 0.25 * artifact.wbar / artifact.rho.max(1e-300);
                let r = verify_terminal_invariance(
                    &artifact,
                    &model,
                    &reference,
                    scenario.ts,
                    scenario.ts,
                    artifact.alpha,
                    s_test,
                    100,
                    scenario.seed,
                )?;
                (r.pass, serde_json::to_value(&r).unwrap())
            }
            "lipschitz" => {
                let rows = system_rows_from_boxes(&scenario.u_box, &scenario.x_box);
                let r = verify_lipschitz_and_contraction(
                    &artifact,
                    &model,
                    &rows,
                    &scenario.x_box,
                    &scenario.u_box,
                    &scenario.w_box,
                    10_000,
                    scenario.seed,
                )?;
                (r.pass, serde_json::to_value(&r).unwrap())
            }
            other => return Err(Error::Config(format!("unknown check '{other}'"))),
        };
        all_pass &= pass;
        println!("check {name}: {}", if pass { "pass" } else { "FAIL" });
        checks.push((name.clone(), pass, detail));
    }
    let report = VerifyReport { schema: 1, checks, pass: all_pass };
    write_json(&args.out, &report)?;
    Ok(if all_pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_report(dir: &Path, out: &Path) -> Result<i32> {
    let mut rows: Vec<(String, RunSummary)> = Vec::new();
    let entries =
        std::fs::read_dir(dir).map_err(|e| Error::Io(format!("reading {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map(|x| x == "json").unwrap_or(false)
                && p.file_name()
                    .map(|n| n.to_string_lossy().contains("summary_seed"))
                    .unwrap_or(false)
        })
        .collect();
    paths.sort();
    for p in paths {
        let summary: RunSummary = read_json(&p)?;
        rows.push((p.file_name().unwrap().to_string_lossy().into_owned(), summary));
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("no run summaries found in {}", dir.display())));
    }
    let mut csv = String::from(
        "run,violations,worst_margin_sys,worst_margin_obs,worst_tube_gap,worst_observer_gap,worst_candidate_margin,final_tracking_error,mean_objective,halted\n",
    );
    println!("{:<28} {:>10} {:>14} {:>14} {:>12}", "run", "violations", "worst_sys", "worst_obs", "tube_gap");
    for (name, s) in &rows {
        println!(
            "{:<28} {:>10} {:>14.3e} {:>14.3e} {:>12.3e}",
            name, s.violations, s.worst_margin_sys, s.worst_margin_obs, s.worst_tube_gap
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            name,
            s.violations,
            s.worst_margin_sys,
            s.worst_margin_obs,
            s.worst_tube_gap,
            s.worst_observer_gap,
            s.worst_candidate_margin,
            s.final_tracking_error,
            s.mean_objective,
            s.halted.as_deref().unwrap_or("")
        ));
    }
    std::fs::write(out, csv).map_err(|e| Error::Io(format!("writing {}: {e}", out.display())))?;
    println!("report: {} run(s) aggregated into {}", rows.len(), out.display());
    Ok(EXIT_OK)
}
