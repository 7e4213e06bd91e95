use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tube_mpc_harness::plot::{line_plot, Series};
use tube_mpc_harness::report;
use tube_mpc_harness::scenario::{row_labels, Method};
use tube_mpc_harness::sim::Tightening;
use tube_mpc_harness::{run_closed_loop, run_monte_carlo, ScenarioFile, Synthesis};

#[derive(Parser)]
#[command(
    name = "tube-mpc",
    about = "Robust output-feedback tube MPC benchmarks with ellipsoidal disturbance bounds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one closed-loop run and write its log
    Run {
        scenario: PathBuf,
        /// Seed override (defaults to the scenario seed)
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for log.csv and plots
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Steady-state tightening comparison against the stored references
    Table1 { scenario: PathBuf },
    /// Batch of seeded runs with aggregated guarantee checks
    Montecarlo {
        scenario: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Emit a margin schedule as CSV
    Tighten {
        scenario: PathBuf,
        /// proposed | two-set | single-set
        #[arg(long, default_value = "proposed")]
        method: String,
        /// Number of schedule steps
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-search the estimator mixing parameters
    Tune { scenario: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> tube_mpc_harness::Result<()> {
    match cli.command {
        Command::Run { scenario, seed, out } => {
            let sc = ScenarioFile::load(&scenario)?.resolve()?;
            let synth = Synthesis::build(&sc)?;
            let seed = seed.unwrap_or(sc.seed);
            let log = run_closed_loop(&sc, &synth, seed)?;
            println!(
                "run '{}' seed {seed}: {} steps, min slack {:.3e}, final |xbar| {:.3e}",
                sc.name,
                log.records.len() - 1,
                log.min_slack,
                log.final_nominal_norm
            );
            println!(
                "  containment excess {:.3e}, margin excess {:.3e}, lyapunov excess {:.3e} -> {}",
                log.worst_containment_excess,
                log.worst_margin_excess,
                log.worst_lyapunov_excess,
                if log.satisfies_guarantees() { "guarantees hold" } else { "GUARANTEES VIOLATED" }
            );
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                report::write_log_csv(&log, &dir.join("log.csv"))?;
                let n = log.records[0].x.len();
                let m = log.records[0].u.len();
                let states: Vec<Series> = (0..n)
                    .map(|i| Series {
                        label: Box::leak(format!("x[{}]", i + 1).into_boxed_str()),
                        values: log.records.iter().map(|r| r.x[i]).collect(),
                    })
                    .collect();
                line_plot("state trajectory", &states, &dir.join("states.svg"))?;
                let inputs: Vec<Series> = (0..m)
                    .map(|i| Series {
                        label: Box::leak(format!("u[{}]", i + 1).into_boxed_str()),
                        values: log.records.iter().map(|r| r.u[i]).collect(),
                    })
                    .collect();
                line_plot("input trajectory", &inputs, &dir.join("inputs.svg"))?;
                let d = log.records[0].margins.len();
                let labels = row_labels(&sc.constraints);
                let margins: Vec<Series> = (0..d)
                    .map(|i| Series {
                        label: Box::leak(labels[i].clone().into_boxed_str()),
                        values: log.records.iter().map(|r| r.margins[i]).collect(),
                    })
                    .collect();
                line_plot("applied margins", &margins, &dir.join("margins.svg"))?;
                println!("  wrote log.csv, states.svg, inputs.svg, margins.svg to {}", dir.display());
            }
            Ok(())
        }
        Command::Table1 { scenario } => {
            let sc = ScenarioFile::load(&scenario)?.resolve()?;
            let tight = Tightening::build(&sc)?;
            let report = report::run_table1(&sc, &tight)?;
            print!("{report}");
            Ok(())
        }
        Command::Montecarlo { scenario, runs } => {
            let sc = ScenarioFile::load(&scenario)?.resolve()?;
            let synth = Synthesis::build(&sc)?;
            let n = runs.unwrap_or(sc.runs);
            let rep = run_monte_carlo(&sc, &synth, n)?;
            println!(
                "{} runs in {:.2?} (max step {:.2?})",
                rep.runs, rep.wall_time, rep.max_step_time
            );
            println!(
                "  aborted: {}, min slack {:.3e}, containment excess {:.3e}",
                rep.aborted.len(),
                rep.min_slack,
                rep.worst_containment_excess
            );
            println!(
                "  margin excess {:.3e}, lyapunov excess {:.3e}, max final |xbar| {:.3e}",
                rep.worst_margin_excess, rep.worst_lyapunov_excess, rep.max_final_nominal_norm
            );
            println!("  -> {}", if rep.all_clean() { "all guarantees hold" } else { "VIOLATIONS" });
            Ok(())
        }
        Command::Tighten {
            scenario,
            method,
            steps,
            out,
        } => {
            let sc = ScenarioFile::load(&scenario)?.resolve()?;
            let tight = Tightening::build(&sc)?;
            let method = Method::parse(&method)?;
            let margins = report::tighten_schedule(&sc, &tight, method, steps)?;
            let labels = row_labels(&sc.constraints);
            match out {
                Some(path) => {
                    let mut file = std::fs::File::create(&path)?;
                    report::write_schedule_csv(&mut file, &labels, &margins)?;
                    println!("wrote {}", path.display());
                }
                None => {
                    let mut stdout = std::io::stdout().lock();
                    report::write_schedule_csv(&mut stdout, &labels, &margins)?;
                }
            }
            Ok(())
        }
        Command::Tune { scenario } => {
            let file = ScenarioFile::load(&scenario)?;
            let sc = file.resolve()?;
            let start = std::time::Instant::now();
            let (beta, rho) = tube_mpc_core::estimator::tune_params(
                &sc.system,
                sc.w.shape(),
                sc.v.shape(),
                file.estimator.grid_step.unwrap_or(0.02),
            )?;
            let params = tube_mpc_core::estimator::EstimatorParams::new(
                beta,
                rho,
                sc.w.shape().clone(),
                sc.v.shape().clone(),
            )?;
            let p_inf = tube_mpc_core::estimator::steady_state_shape(&params, &sc.system)?;
            println!(
                "tuned beta = {beta:.4}, rho = {rho:.4}, trace(P_inf) = {:.6e} ({:.2?})",
                p_inf.trace(),
                start.elapsed()
            );
            Ok(())
        }
    }
}
