//! Single-binary frontend: solve / optimize / reach / gen-data /
//! train-guide / eval-guide / export-smt / bench.
//!
//! Exit codes are stable: 0 sat or success, 1 unsat, 2 unknown or
//! inconclusive, 3 usage or parse error, 4 internal error. The log level
//! comes from the `POLYAR_LOG` environment variable.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use polybern::guide::{self, GuideModel, TrainConfig};
use polybern::optimize::{self, OptConfig, OptOutcome};
use polybern::parse;
use polybern::reach;
use polybern::solver::{self, Endgame, Policy, SolveOutcome, SolverConfig};
use polybern::suites;

const EXIT_SAT: i32 = 0;
const EXIT_UNSAT: i32 = 1;
const EXIT_UNKNOWN: i32 = 2;
const EXIT_USAGE: i32 = 3;
const EXIT_INTERNAL: i32 = 4;

#[derive(Parser)]
#[command(
    name = "polybern",
    about = "Bernstein-enclosure branch-and-prune solver and optimizer for bounded polynomial inequality systems",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SolveArgs {
    /// Problem file (vars/box/constraint/objective/epsilon directives)
    #[arg(long)]
    problem: PathBuf,
    /// Override the problem's epsilon knob
    #[arg(long)]
    eps: Option<f64>,
    /// Guide model JSON; without it a round-robin action policy is used
    #[arg(long)]
    guide: Option<PathBuf>,
    /// Endgame: `bernstein` or `smt:<command>`
    #[arg(long, default_value = "bernstein")]
    endgame: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Emit the machine-readable outcome JSON on stdout
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Decide feasibility of a polynomial constraint system
    Solve(SolveArgs),
    /// Minimize and maximize the problem's objective
    Optimize {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        guide: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Template-polyhedron reachability for a discrete polynomial map
    Reach {
        #[arg(long)]
        model: PathBuf,
        /// Write the step/face/volume CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labelled action dataset
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a guide model from a dataset CSV
    TrainGuide {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of the dataset held out for validation
        #[arg(long, default_value_t = 0.1)]
        val_frac: f64,
    },
    /// Report a guide model's action-prediction accuracy on a dataset
    EvalGuide {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Export a problem as SMT-LIB2 (QF_NRA)
    ExportSmt {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a benchmark suite and emit a CSV of results
    Bench {
        /// One of: pvs, random, scaling
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        guide: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("POLYAR_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { EXIT_USAGE } else { EXIT_SAT });
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            classify_error(&e)
        }
    };
    std::process::exit(code);
}

fn classify_error(e: &anyhow::Error) -> i32 {
    if let Some(err) = e.downcast_ref::<polybern::Error>() {
        match err {
            polybern::Error::Parse(_)
            | polybern::Error::ModelFormat(_)
            | polybern::Error::Config(_)
            | polybern::Error::MissingObjective
            | polybern::Error::Io(_) => EXIT_USAGE,
            _ => EXIT_INTERNAL,
        }
    } else {
        EXIT_INTERNAL
    }
}

fn load_policy(guide: &Option<PathBuf>) -> anyhow::Result<Policy> {
    match guide {
        Some(path) => Ok(Policy::Guide(Arc::new(GuideModel::load(path)?))),
        None => {
            log::warn!("no guide model supplied; falling back to the round-robin action policy");
            Ok(Policy::RoundRobin)
        }
    }
}

fn parse_endgame(spec: &str) -> anyhow::Result<Endgame> {
    if spec == "bernstein" {
        Ok(Endgame::default())
    } else if let Some(cmd) = spec.strip_prefix("smt:") {
        Ok(Endgame::ExternalSmt {
            command: cmd.to_string(),
        })
    } else {
        anyhow::bail!(polybern::Error::Config(format!(
            "unknown endgame `{spec}` (expected `bernstein` or `smt:<command>`)"
        )))
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Solve(args) => {
            let mut problem = parse::parse_problem(&args.problem)?;
            if let Some(eps) = args.eps {
                problem.epsilon = eps;
            }
            let cfg = SolverConfig {
                endgame: parse_endgame(&args.endgame)?,
                policy: load_policy(&args.guide)?,
                workers: args.workers,
                ..SolverConfig::for_problem(&problem)
            };
            let report = solver::solve(&problem, &cfg)?;
            if args.json {
                println!("{}", serde_json::to_string(&report.to_json())?);
            } else {
                match &report.outcome {
                    SolveOutcome::Sat { point, residuals } => {
                        println!(
                            "sat x = ({}) residuals = ({})",
                            join(point),
                            join(residuals)
                        );
                    }
                    SolveOutcome::Unsat { certificate } => {
                        let volume: f64 = certificate.iter().map(|c| c.region.volume()).sum();
                        println!("unsat");
                        eprintln!(
                            "certificate: {} boxes covering volume {volume}",
                            certificate.len()
                        );
                    }
                    SolveOutcome::Unknown {
                        reason,
                        remaining_volume,
                    } => {
                        println!("unknown ({reason}; remaining volume {remaining_volume})");
                    }
                }
                if let Some(wall) = report.stats.wall {
                    eprintln!(
                        "iterations {} wall {:.3}s",
                        report.stats.iterations,
                        wall.as_secs_f64()
                    );
                }
            }
            Ok(match report.outcome {
                SolveOutcome::Sat { .. } => EXIT_SAT,
                SolveOutcome::Unsat { .. } => EXIT_UNSAT,
                SolveOutcome::Unknown { .. } => EXIT_UNKNOWN,
            })
        }
        Command::Optimize {
            problem,
            eps,
            guide,
            json,
        } => {
            let mut problem = parse::parse_problem(&problem)?;
            if let Some(eps) = eps {
                problem.epsilon = eps;
            }
            let cfg = OptConfig {
                policy: load_policy(&guide)?,
                ..OptConfig::for_problem(&problem)
            };
            match optimize::optimize(&problem, &cfg)? {
                OptOutcome::Ok(r) => {
                    if json {
                        println!("{}", serde_json::to_string(&r.to_json())?);
                    } else {
                        println!(
                            "min {} at ({}) | max {} at ({}) | error bound {}",
                            r.p_min_hat,
                            join(&r.x_min),
                            r.p_max_hat,
                            join(&r.x_max),
                            r.error_bound
                        );
                    }
                    Ok(EXIT_SAT)
                }
                OptOutcome::Infeasible => {
                    if json {
                        println!("{}", serde_json::json!({"status": "infeasible"}));
                    } else {
                        println!("infeasible");
                    }
                    Ok(EXIT_UNSAT)
                }
            }
        }
        Command::Reach { model, out } => {
            let model = reach::parse_model(&model)?;
            let q0 = model.initial_polytope()?;
            let template = reach::template_matrix(model.template, model.init.n());
            let result = reach::reach(
                &q0,
                &model.map,
                &template,
                model.steps,
                model.epsilon,
                &Policy::RoundRobin,
            )?;
            let csv = reach::reach_csv(&result);
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            if let Some(step) = result.terminated_empty {
                eprintln!("reachable set became empty at step {step}");
            }
            Ok(EXIT_SAT)
        }
        Command::GenData { count, seed, out } => {
            let data = guide::generate_dataset(count, seed);
            std::fs::write(out, guide::dataset_to_csv(&data))?;
            Ok(EXIT_SAT)
        }
        Command::TrainGuide {
            data,
            out,
            epochs,
            batch_size,
            lr,
            seed,
            val_frac,
        } => {
            let samples = guide::dataset_from_csv(&std::fs::read_to_string(&data)?)?;
            let val_len = ((samples.len() as f64) * val_frac) as usize;
            let split = samples.len() - val_len;
            let cfg = TrainConfig {
                epochs,
                batch_size,
                learning_rate: lr,
                seed,
                ..TrainConfig::default()
            };
            let model = guide::train(&samples[..split], &samples[split..], &cfg);
            eprintln!(
                "train accuracy {:.4} validation accuracy {:.4}",
                model.meta.train_accuracy, model.meta.val_accuracy
            );
            model.save(&out)?;
            Ok(EXIT_SAT)
        }
        Command::EvalGuide { model, data } => {
            let model = GuideModel::load(&model)?;
            let samples = guide::dataset_from_csv(&std::fs::read_to_string(&data)?)?;
            println!("{}", guide::evaluate_accuracy(&model, &samples));
            Ok(EXIT_SAT)
        }
        Command::ExportSmt { problem, out } => {
            let problem = parse::parse_problem(&problem)?;
            std::fs::write(out, parse::export_smtlib2(&problem))?;
            Ok(EXIT_SAT)
        }
        Command::Bench { suite, out, guide } => {
            let policy = match &guide {
                Some(path) => Policy::Guide(Arc::new(GuideModel::load(path)?)),
                None => Policy::RoundRobin,
            };
            let csv = run_bench(&suite, &policy)?;
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(EXIT_SAT)
        }
    }
}

fn run_bench(suite: &str, policy: &Policy) -> anyhow::Result<String> {
    let mut rows = String::from("instance,verdict,wall_seconds,iterations,pruned_volume\n");
    let mut bench_one = |name: &str, problem: &parse::ProblemFile| -> anyhow::Result<()> {
        let cfg = SolverConfig {
            policy: policy.clone(),
            ..SolverConfig::for_problem(problem)
        };
        let start = Instant::now();
        let report = solver::solve(problem, &cfg)?;
        rows.push_str(&format!(
            "{},{},{:.6},{},{}\n",
            name,
            report.outcome.status(),
            start.elapsed().as_secs_f64(),
            report.stats.iterations,
            report.stats.pruned_volume
        ));
        Ok(())
    };
    match suite {
        "pvs" => {
            for b in &suites::PVS_SUITE {
                let problem = suites::parse_benchmark(b);
                bench_one(b.name, &problem)?;
            }
        }
        "scaling" => {
            for b in &suites::SCALING_SUITE {
                let problem = suites::parse_benchmark(b);
                bench_one(b.name, &problem)?;
            }
        }
        "random" => {
            for i in 0..50 {
                let problem = suites::random_feasibility_problem(2024, i, 2, 4, 3);
                bench_one(&format!("random_{i:02}"), &problem)?;
            }
        }
        other => anyhow::bail!(polybern::Error::Config(format!(
            "unknown suite `{other}` (expected pvs, random, or scaling)"
        ))),
    }
    Ok(rows)
}

fn join(xs: &[f64]) -> String {
    xs.iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}
