use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ede_core::energy::{Grid, ProblemKind};
use ede_core::harness::{
    emit_plots, output_root, pretrain_stage, reproduce, run_experiment, ExperimentConfig, ExperimentId, RunOptions,
};
use ede_core::reference::{ReferenceRun, DEFAULT_DT_REF};
use ede_core::sav_evolve::update_r;
use ede_core::{Error, Result};

/// Energy-dissipative evolutionary DeepONet experiments.
///
/// Runs are written under `$EDE_OUTPUT_ROOT` (default `runs/`).
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the operator network of an experiment.
    Pretrain(RunArgs),
    /// Pretrain (or reuse), evolve and compare against the reference.
    Evolve(EvolveArgs),
    /// Run the canonical experiment behind table 1, 2, 3 or 4 and gate it.
    Reproduce { table: u32 },
    /// Print a reference solution or the auxiliary-variable update.
    #[command(subcommand)]
    Oracle(Oracle),
    /// Write plot data and SVG figures for a finished run directory.
    Plot { dir: PathBuf },
    /// Print the canonical configuration of an experiment as TOML.
    Config { experiment: ExperimentId },
}

#[derive(Args)]
struct RunArgs {
    /// Config file, or an experiment name for its canonical config.
    config: String,
    /// Run directory; overrides the config and the output root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvolveArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Retrain even when pretrained weights exist in the run directory.
    #[arg(long)]
    fresh: bool,
}

#[derive(Args)]
struct FieldArgs {
    /// Time of the returned field.
    #[arg(long)]
    t: f64,
    /// Grid points per axis.
    #[arg(long, default_value_t = 51)]
    points: usize,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Oracle {
    /// a·sin(πx)·exp(−π²t) on [0, 2].
    Heat {
        #[arg(long)]
        a: f64,
        #[command(flatten)]
        field: FieldArgs,
    },
    /// sin(πx)·exp(−cπ²t) on [0, 2].
    ParametricHeat {
        #[arg(long)]
        c: f64,
        #[command(flatten)]
        field: FieldArgs,
    },
    /// Finite-difference SAV solution from a·sin(πx) on [−1, 1].
    Ac1d {
        #[arg(long)]
        a: f64,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_DT_REF)]
        dt_ref: f64,
        #[command(flatten)]
        field: FieldArgs,
    },
    /// Finite-difference SAV solution from a·sin(πx)sin(πy) on [−1, 1]².
    Ac2d {
        #[arg(long)]
        a: f64,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_DT_REF)]
        dt_ref: f64,
        #[command(flatten)]
        field: FieldArgs,
    },
    /// r / (1 + dt·‖𝒩‖²/(2E)).
    RUpdate {
        #[arg(long)]
        r: f64,
        #[arg(long)]
        energy: f64,
        #[arg(long)]
        n_norm_sq: f64,
        #[arg(long)]
        dt: f64,
    },
}

fn load_config(arg: &str) -> Result<ExperimentConfig> {
    match arg.parse::<ExperimentId>() {
        Ok(id) => Ok(ExperimentConfig::canonical(id)),
        Err(_) if Path::new(arg).exists() => ExperimentConfig::load(Path::new(arg)),
        Err(_) => Err(Error::Usage(format!(
            "`{arg}` is neither a config file nor an experiment name"
        ))),
    }
}

fn run_dir(args: &RunArgs, cfg: &ExperimentConfig) -> PathBuf {
    args.out.clone().unwrap_or_else(|| cfg.resolve_output_dir())
}

fn oracle_field(run: ReferenceRun, out: Option<PathBuf>) -> Result<bool> {
    let field = run.compute()?;
    match out {
        Some(path) => ede_core::energy::write_field_csv(&path, &run.grid, &field)?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            let names: Vec<&str> = ["x", "y"][..run.grid.dim()].iter().copied().chain(["u"]).collect();
            w.write_record(&names)?;
            for (k, v) in field.iter().enumerate() {
                let mut rec: Vec<String> = run.grid.point(k).iter().map(|c| format!("{c:e}")).collect();
                rec.push(format!("{v:e}"));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
    }
    Ok(true)
}

fn oracle(cmd: Oracle) -> Result<bool> {
    let run = |kind, amplitude, grid: Result<Grid>, f: FieldArgs, dt_ref| -> Result<bool> {
        let mut r = ReferenceRun::new(kind, amplitude, grid?, f.t);
        r.dt_ref = dt_ref;
        oracle_field(r, f.out)
    };
    match cmd {
        Oracle::Heat { a, field } => {
            let g = Grid::line(0.0, 2.0, field.points);
            run(ProblemKind::Heat, a, g, field, DEFAULT_DT_REF)
        }
        Oracle::ParametricHeat { c, field } => {
            let g = Grid::line(0.0, 2.0, field.points);
            run(ProblemKind::ParametricHeat { c }, 1.0, g, field, DEFAULT_DT_REF)
        }
        Oracle::Ac1d { a, eps, dt_ref, field } => {
            let g = Grid::line(-1.0, 1.0, field.points);
            run(ProblemKind::AllenCahn1D { eps }, a, g, field, dt_ref)
        }
        Oracle::Ac2d { a, eps, dt_ref, field } => {
            let g = Grid::square(-1.0, 1.0, field.points);
            run(ProblemKind::AllenCahn2D { eps }, a, g, field, dt_ref)
        }
        Oracle::RUpdate {
            r,
            energy,
            n_norm_sq,
            dt,
        } => {
            println!("{:e}", update_r(r, energy, n_norm_sq, dt)?);
            Ok(true)
        }
    }
}

/// `Ok(true)` when every gated check passed.
fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = load_config(&args.config)?;
            let dir = run_dir(&args, &cfg);
            let pre = pretrain_stage(&cfg, &dir, false)?;
            let report = pre.report.expect("fresh pretraining has a report");
            println!(
                "{}: mse {:.3e} after {} epochs + {} polish steps ({:.1} s) -> {}",
                cfg.experiment,
                report.final_mse,
                report.epochs,
                report.polish_steps,
                pre.seconds,
                dir.display()
            );
            Ok(true)
        }
        Command::Evolve(args) => {
            let cfg = load_config(&args.run.config)?;
            let dir = run_dir(&args.run, &cfg);
            let opts = RunOptions {
                reuse_pretrained: !args.fresh,
                reference_cache: output_root().join("reference-cache"),
            };
            let out = run_experiment(&cfg, &dir, &opts)?;
            let cells = out.table.gate(cfg.evaluation.threshold);
            let report = ede_core::harness::ReproduceReport {
                table_id: 0,
                threshold: cfg.evaluation.threshold,
                cells,
                outcome: out,
            };
            print!("{}", report.render());
            println!("artifacts in {}", dir.display());
            Ok(report.outcome.manifest.failure.is_none() && report.cells.iter().all(|c| c.pass))
        }
        Command::Reproduce { table } => {
            let report = reproduce(table, &output_root())?;
            print!("{}", report.render());
            Ok(report.passed())
        }
        Command::Oracle(cmd) => oracle(cmd),
        Command::Plot { dir } => {
            for p in emit_plots(&dir)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::Config { experiment } => {
            print!("{}", ExperimentConfig::canonical(experiment).to_toml_string()?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
