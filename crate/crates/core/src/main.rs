use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mixmc::coupling::simulate_coupled_paths;
use mixmc::mixedpath::{simulate_mixed_path, MixedConfig};
use mixmc::mlmc::{
    calibrate_costs, complexity_study, estimate, optimize_plan, EstimateReport, MlmcPlan,
    PilotConfig, ProbeConfig, StudyRow,
};
use mixmc::model::{builtin_model, parse_model, ReactionNetwork};
use mixmc::rng::{Stream, StreamKey};
use mixmc::splitting::{CostModel, SplitConfig, SplitForce};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "mixmc", version, about = "Mixed exact/tau-leap multilevel estimator for reaction networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Builtin model name (virus, stiff, decay, birth) or path to a model JSON file.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Splitting rule: "cost" or "pareto".
    #[arg(long, default_value = "cost")]
    split: String,
    /// Activity fraction for the pareto rule.
    #[arg(long, default_value_t = 0.9)]
    pareto_threshold: f64,
    /// Force a regime instead of adaptive splitting: "exact" or "tauleap".
    #[arg(long)]
    force: Option<String>,
    /// Calibrated cost model JSON (from `calibrate --out`); synthetic defaults otherwise.
    #[arg(long)]
    costs: Option<PathBuf>,
    /// Worker threads for sample evaluation (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// List the builtin models.
    Models,
    /// Run single-level mixed paths and report the sample statistics.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0.25)]
        dt: f64,
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        #[arg(long, default_value_t = 1000)]
        paths: u64,
    },
    /// Run coupled coarse/fine pairs and report the difference statistics.
    Couple {
        #[command(flatten)]
        common: CommonArgs,
        /// Coarse mesh width; the fine mesh halves it.
        #[arg(long, default_value_t = 0.25)]
        dt: f64,
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        #[arg(long, default_value_t = 1000)]
        pairs: u64,
    },
    /// Measure machine step costs and write the fitted cost model.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 20000)]
        batch: usize,
    },
    /// Plan and run the full multilevel estimator to a relative tolerance.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0.05)]
        tol: f64,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        /// Coarsest mesh width (default T/4).
        #[arg(long)]
        dt0: Option<f64>,
        #[arg(long, default_value_t = 10)]
        levels_max: usize,
        /// Deterministic-time-change control variate on level 0: "on" or "off".
        #[arg(long, default_value = "off")]
        cv: String,
    },
    /// Run the estimator across a tolerance ladder and emit work-vs-TOL data.
    ConvergenceStudy {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated relative tolerances.
        #[arg(long, default_value = "0.1,0.05,0.025")]
        tols: String,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        #[arg(long)]
        dt0: Option<f64>,
        #[arg(long, default_value_t = 10)]
        levels_max: usize,
        /// Include the fitted SSA baseline work column.
        #[arg(long, default_value_t = true)]
        ssa: bool,
    },
}

#[derive(Serialize)]
struct PathStats {
    command: String,
    version: &'static str,
    seed: u64,
    model: String,
    dt: f64,
    delta: f64,
    paths: u64,
    mean: f64,
    variance: f64,
    exited: u64,
    n_tl_mean: f64,
    n_mnrm_mean: f64,
    work_mean: f64,
}

#[derive(Serialize)]
struct EstimateRun {
    command: String,
    version: &'static str,
    seed: u64,
    model: String,
    plan: MlmcPlan,
    report: EstimateReport,
}

#[derive(Serialize)]
struct StudyRun {
    command: String,
    version: &'static str,
    seed: u64,
    model: String,
    confidence: f64,
    rows: Vec<StudyRow>,
}

fn load_model(spec: &str) -> Result<ReactionNetwork, String> {
    if let Ok(net) = builtin_model(spec) {
        return Ok(net);
    }
    let text = fs::read_to_string(spec)
        .map_err(|e| format!("cannot read model '{spec}': {e}"))?;
    parse_model(&text).map_err(|e| format!("cannot parse model '{spec}': {e}"))
}

fn split_config(common: &CommonArgs) -> Result<SplitConfig, String> {
    let mut cfg = SplitConfig::default();
    match common.split.as_str() {
        "cost" => {}
        "pareto" => cfg.pareto = Some(common.pareto_threshold),
        other => return Err(format!("unknown split rule '{other}' (use cost or pareto)")),
    }
    if let Some(f) = &common.force {
        cfg.force = match f.as_str() {
            "exact" => SplitForce::AllExact,
            "tauleap" => SplitForce::AllTauLeap,
            other => return Err(format!("unknown force '{other}' (use exact or tauleap)")),
        };
    }
    Ok(cfg)
}

fn load_costs(common: &CommonArgs) -> Result<CostModel, String> {
    match &common.costs {
        None => Ok(CostModel::default_synthetic()),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| format!("cannot read costs '{}': {e}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| format!("cannot parse costs '{}': {e}", path.display()))
        }
    }
}

fn emit(common: &CommonArgs, json: String) -> Result<(), String> {
    match &common.out {
        None => {
            println!("{json}");
            Ok(())
        }
        Some(path) => fs::write(path, json.as_bytes())
            .map_err(|e| format!("cannot write '{}': {e}", path.display())),
    }
}

fn study_csv(rows: &[StudyRow]) -> String {
    let mut csv =
        String::from("tol,levels,value,predicted_work,modeled_work,ssa_work,ssa_ratio\n");
    for r in rows {
        let (ssa, ratio) = match r.ssa_work {
            Some(w) => (format!("{w:.6e}"), format!("{:.4}", w / r.predicted_work)),
            None => (String::new(), String::new()),
        };
        csv.push_str(&format!(
            "{:.6e},{},{:.8e},{:.6e},{:.6e},{ssa},{ratio}\n",
            r.tol, r.levels, r.value, r.predicted_work, r.modeled_work
        ));
    }
    csv
}

fn run() -> Result<(), String> {
    let cli = Cli::try_parse().map_err(|e| {
        // help/version requests are not errors
        let _ = e.print();
        e
    });
    let cli = match cli {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => return Ok(()),
        Err(_) => return Err(String::new()),
    };
    match cli.cmd {
        Cmd::Models => {
            for name in ["virus", "stiff", "decay", "birth"] {
                let net = builtin_model(name).expect("builtin");
                println!(
                    "{name}: {} species, {} reactions, T = {}",
                    net.dim(),
                    net.n_reactions(),
                    net.final_time
                );
            }
            Ok(())
        }
        Cmd::Simulate {
            common,
            dt,
            delta,
            paths,
        } => {
            let net = load_model(&common.model)?;
            set_workers(common.workers)?;
            let cfg = MixedConfig {
                dt,
                delta,
                cost: load_costs(&common)?,
                split: split_config(&common)?,
            };
            use rayon::prelude::*;
            let rows: Vec<(f64, bool, u64, u64, f64)> = (0..paths)
                .into_par_iter()
                .map(|i| {
                    let mut s = Stream::new(StreamKey::new(common.seed, 0, i, 0));
                    let p = simulate_mixed_path(&net, &cfg, &mut s, None);
                    (p.observable_value(&net), p.exited, p.n_tl, p.n_mnrm, p.work)
                })
                .collect();
            let stats = summarize("simulate", &common, &net, dt, delta, &rows);
            emit(&common, serde_json::to_string_pretty(&stats).unwrap())
        }
        Cmd::Couple {
            common,
            dt,
            delta,
            pairs,
        } => {
            let net = load_model(&common.model)?;
            set_workers(common.workers)?;
            let cost = load_costs(&common)?;
            let split = split_config(&common)?;
            let coarse = MixedConfig {
                dt,
                delta,
                cost: cost.clone(),
                split: split.clone(),
            };
            let fine = MixedConfig {
                dt: dt / 2.0,
                delta,
                cost,
                split,
            };
            use rayon::prelude::*;
            let rows: Vec<(f64, bool, u64, u64, f64)> = (0..pairs)
                .into_par_iter()
                .map(|i| {
                    let mut s = Stream::new(StreamKey::new(common.seed, 1, i, 0));
                    let pair = simulate_coupled_paths(&net, &coarse, &fine, &mut s);
                    (
                        pair.fine.observable_value(&net) - pair.coarse.observable_value(&net),
                        pair.coarse.exited || pair.fine.exited,
                        pair.coarse.n_tl + pair.fine.n_tl,
                        pair.coarse.n_mnrm + pair.fine.n_mnrm,
                        pair.work,
                    )
                })
                .collect();
            let stats = summarize("couple", &common, &net, dt, delta, &rows);
            emit(&common, serde_json::to_string_pretty(&stats).unwrap())
        }
        Cmd::Calibrate { common, batch } => {
            let net = load_model(&common.model)?;
            let probe = ProbeConfig {
                batch,
                seed: common.seed,
            };
            let costs = calibrate_costs(&net, &probe).map_err(|e| e.to_string())?;
            emit(&common, serde_json::to_string_pretty(&costs).unwrap())
        }
        Cmd::Estimate {
            common,
            tol,
            confidence,
            dt0,
            levels_max,
            cv,
        } => {
            let net = load_model(&common.model)?;
            set_workers(common.workers)?;
            let cost = load_costs(&common)?;
            let split = split_config(&common)?;
            let cv_on = match cv.as_str() {
                "on" => true,
                "off" => false,
                other => return Err(format!("--cv must be on or off, got '{other}'")),
            };
            let pilot = PilotConfig {
                dt0,
                max_levels: levels_max,
                split: split.clone(),
                ..Default::default()
            };
            let (plan, _) = optimize_plan(&net, tol, confidence, &pilot, &cost, common.seed)
                .map_err(|e| e.to_string())?;
            let report = estimate(&net, &plan, &cost, &split, cv_on, common.seed);
            let run = EstimateRun {
                command: format!(
                    "estimate --model {} --tol {tol} --confidence {confidence} --seed {}",
                    common.model, common.seed
                ),
                version: VERSION,
                seed: common.seed,
                model: common.model.clone(),
                plan,
                report,
            };
            emit(&common, serde_json::to_string_pretty(&run).unwrap())
        }
        Cmd::ConvergenceStudy {
            common,
            tols,
            confidence,
            dt0,
            levels_max,
            ssa,
        } => {
            let net = load_model(&common.model)?;
            set_workers(common.workers)?;
            let cost = load_costs(&common)?;
            let split = split_config(&common)?;
            let tols: Vec<f64> = tols
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| format!("bad tolerance '{t}': {e}"))
                })
                .collect::<Result<_, _>>()?;
            let pilot = PilotConfig {
                dt0,
                max_levels: levels_max,
                split: split.clone(),
                ..Default::default()
            };
            let rows = complexity_study(&net, &tols, confidence, &pilot, &cost, ssa, common.seed)
                .map_err(|e| e.to_string())?;
            let csv = study_csv(&rows);
            if let Some(out) = &common.out {
                let csv_path = out.with_extension("csv");
                fs::write(&csv_path, csv.as_bytes())
                    .map_err(|e| format!("cannot write '{}': {e}", csv_path.display()))?;
            } else {
                print!("{csv}");
            }
            let run = StudyRun {
                command: format!("convergence-study --model {}", common.model),
                version: VERSION,
                seed: common.seed,
                model: common.model.clone(),
                confidence,
                rows,
            };
            emit(&common, serde_json::to_string_pretty(&run).unwrap())
        }
    }
}

fn set_workers(n: usize) -> Result<(), String> {
    if n == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("cannot configure {n} workers: {e}"))
}

fn summarize(
    command: &str,
    common: &CommonArgs,
    _net: &ReactionNetwork,
    dt: f64,
    delta: f64,
    rows: &[(f64, bool, u64, u64, f64)],
) -> PathStats {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let variance = if rows.len() > 1 {
        rows.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    PathStats {
        command: command.to_string(),
        version: VERSION,
        seed: common.seed,
        model: common.model.clone(),
        dt,
        delta,
        paths: rows.len() as u64,
        mean,
        variance,
        exited: rows.iter().filter(|r| r.1).count() as u64,
        n_tl_mean: rows.iter().map(|r| r.2 as f64).sum::<f64>() / n,
        n_mnrm_mean: rows.iter().map(|r| r.3 as f64).sum::<f64>() / n,
        work_mean: rows.iter().map(|r| r.4).sum::<f64>() / n,
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::FAILURE
        }
    }
}
