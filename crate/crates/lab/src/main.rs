//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use weakguide_lab::config::{Config, Lab};
use weakguide_lab::experiments;
use weakguide_lab::report::{self, RunOutput};

#[derive(Parser)]
#[command(
    name = "weakguide",
    version,
    about = "Desk-scale diffusion guidance and de-biasing experiments on a closed-form mixture world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file.
    #[arg(long, default_value = "configs/default.toml")]
    config: PathBuf,
    /// Master seed; overrides the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for results.csv, records.jsonl, summary.txt.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = one per core); overrides the config value.
    #[arg(long)]
    workers: Option<usize>,
    /// Chains per cell; overrides the config value.
    #[arg(long)]
    n: Option<usize>,
    /// Also write samples.csv with plain conditional samples of the
    /// flagship context, for plotting.
    #[arg(long, default_value_t = false)]
    dump_samples: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Partial-noising probe of minority regions.
    ModeTest {
        #[command(flatten)]
        run: RunArgs,
        /// Noising depth as a fraction of the schedule; overrides config.
        #[arg(long)]
        t_star_frac: Option<f64>,
    },
    /// Guidance-scale sweep: attribute ratio and alignment per scale.
    SweepCfg {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated guidance scales; overrides the config grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Annealed condition-noise sweep over (s, tau1) cells.
    SweepCads {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated noise scales; overrides the config s grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Prompt-swap fraction sweep.
    SweepSwap {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated step fractions; overrides the config grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// De-biasing evaluation across the biased contexts.
    Debias {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Explicit-qualifier compliance evaluation.
    Compliance {
        #[command(flatten)]
        run: RunArgs,
    },
    /// World, codec, and schedule invariant suite.
    ValidateWorld {
        #[command(flatten)]
        run: RunArgs,
        /// Also export the neutral prompt embedding of every context.
        #[arg(long, default_value_t = false)]
        dump_embeddings: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage text; fold every parse problem
            // into the configuration exit code
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(MainError::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(1)
        }
        Err(MainError::Runtime(e)) => {
            eprintln!("runtime error: {e}");
            ExitCode::from(2)
        }
    }
}

enum MainError {
    Config(String),
    Runtime(String),
}

impl From<weakguide_core::Error> for MainError {
    fn from(e: weakguide_core::Error) -> Self {
        MainError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for MainError {
    fn from(e: std::io::Error) -> Self {
        MainError::Runtime(e.to_string())
    }
}

fn load(run: &RunArgs) -> Result<(Lab, u64, usize, rayon::ThreadPool), MainError> {
    let lab = Config::from_path(&run.config)
        .and_then(Config::build)
        .map_err(|e| MainError::Config(e.to_string()))?;
    let seed = run.seed.unwrap_or(lab.config.master_seed);
    let n = run.n.unwrap_or(lab.config.experiment.n);
    if n == 0 {
        return Err(MainError::Config("--n must be at least 1".to_string()));
    }
    let workers = run.workers.unwrap_or(lab.config.experiment.workers);
    let pool = experiments::make_pool(workers);
    Ok((lab, seed, n, pool))
}

fn run(cli: Cli) -> Result<(), MainError> {
    match cli.command {
        Command::ModeTest { run, t_star_frac } => {
            let (lab, seed, n, pool) = load(&run)?;
            let exp = &lab.config.experiment.mode_test;
            let frac = t_star_frac.unwrap_or(exp.t_star_frac);
            if !(0.0..=1.0).contains(&frac) {
                return Err(MainError::Config("--t-star-frac must be in [0, 1]".into()));
            }
            let context = exp.context.clone();
            let minor = exp.minor.clone();
            let output = experiments::mode_test(&lab, &pool, seed, n, &context, &minor, frac)?;
            emit(&run, &lab, output)
        }
        Command::SweepCfg { run, grid } => {
            let (lab, seed, n, pool) = load(&run)?;
            let exp = &lab.config.experiment.sweep_cfg;
            let grid = grid.unwrap_or_else(|| exp.grid.clone());
            check_grid(&grid)?;
            let context = exp.context.clone();
            let output = experiments::sweep_cfg(&lab, &pool, seed, n, &context, &grid)?;
            emit(&run, &lab, output)
        }
        Command::SweepCads { run, grid } => {
            let (lab, seed, n, pool) = load(&run)?;
            let exp = lab.config.experiment.sweep_cads.clone();
            let s_grid = grid.unwrap_or_else(|| exp.s_grid.clone());
            check_grid(&s_grid)?;
            let alpha = lab.config.experiment.alpha;
            let output = experiments::sweep_cads(
                &lab,
                &pool,
                seed,
                n,
                &exp.context,
                &s_grid,
                &exp.tau1_grid,
                exp.tau2,
                alpha,
            )?;
            emit(&run, &lab, output)
        }
        Command::SweepSwap { run, grid } => {
            let (lab, seed, n, pool) = load(&run)?;
            let exp = lab.config.experiment.sweep_swap.clone();
            let grid = grid.unwrap_or_else(|| exp.grid.clone());
            check_grid(&grid)?;
            let alpha = lab.config.experiment.alpha;
            let output = experiments::sweep_swap(
                &lab,
                &pool,
                seed,
                n,
                &exp.context,
                &exp.attribute,
                &grid,
                alpha,
            )?;
            emit(&run, &lab, output)
        }
        Command::Debias { run } => {
            let (lab, seed, n, pool) = load(&run)?;
            let exp = lab.config.experiment.debias.clone();
            let alpha = lab.config.experiment.alpha;
            let output = experiments::debias(
                &lab,
                &pool,
                seed,
                n,
                &exp.contexts,
                &exp.family,
                exp.tau,
                alpha,
                &exp.multi_context,
                &exp.multi_families,
                &exp.object_contexts,
            )?;
            emit(&run, &lab, output)
        }
        Command::Compliance { run } => {
            let (lab, seed, n, pool) = load(&run)?;
            let exp = lab.config.experiment.compliance.clone();
            let alpha = lab.config.experiment.alpha;
            let output = experiments::compliance_eval(
                &lab,
                &pool,
                seed,
                n,
                &exp.contexts,
                &exp.family,
                exp.tau,
                alpha,
            )?;
            emit(&run, &lab, output)
        }
        Command::ValidateWorld {
            run,
            dump_embeddings,
        } => {
            let (lab, seed, _n, pool) = load(&run)?;
            let output = experiments::validate_world(&lab, &pool, seed)?;
            if dump_embeddings {
                std::fs::create_dir_all(&run.out)?;
                for ctx in lab.world.contexts() {
                    let c = lab
                        .codec
                        .encode(&weakguide_core::codec::PromptSpec::context(&ctx.id))?;
                    let path = run.out.join(format!("embedding_{}.csv", ctx.id));
                    report::write_embedding_csv(&path, &c)?;
                }
            }
            emit(&run, &lab, output)
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<(), MainError> {
    if grid.is_empty() {
        return Err(MainError::Config("--grid must not be empty".into()));
    }
    Ok(())
}

fn emit(run: &RunArgs, lab: &Lab, output: RunOutput) -> Result<(), MainError> {
    report::write_outputs(&run.out, &output)?;
    if run.dump_samples {
        // re-derive the baseline samples of the experiment's main context
        // so plots can be made without re-running
        let pool = experiments::make_pool(1);
        let context = lab.config.experiment.mode_test.context.clone();
        let prompt = weakguide_core::codec::PromptSpec::context(&context);
        let cell = experiments::sample_cell(
            lab,
            &pool,
            lab.config.master_seed,
            "dump",
            &context,
            &prompt,
            lab.config.experiment.n.min(2000),
            |_, _| weakguide_core::guidance::GuidanceSpec::Vanilla,
        )?;
        report::write_samples_csv(&run.out.join("samples.csv"), &cell.samples, 0)?;
    }
    print!("{}", output.summary);
    Ok(())
}
