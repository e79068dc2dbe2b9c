use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use polydreg::metrics::GradTarget;
use polydreg_cli::checkpoint::Checkpoint;
use polydreg_cli::commands::{
    cmd_eval, cmd_stats, cmd_tailratio, cmd_train, parse_comparison, resolve_run, CliError, EvalData, RunSource,
    StatsInput,
};
use polydreg_cli::config::load_plan;
use polydreg_cli::report::render_text;
use polydreg_cli::sweep::{run_sweep, SweepOptions};

#[derive(Parser)]
#[command(name = "polydreg", version, about = "Polynomial networks with Jacobian regularization: runs, sweeps and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its checkpoint, epoch log and result row.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long, default_value = "out/train")]
        out: PathBuf,
    },
    /// Run every (model, fraction, seed) cell of a plan, then the statistics.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
        /// Output directory; defaults to the plan's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Continue a previous sweep in the same directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many new cells, leaving the sweep unfinished.
        #[arg(long, hide = true)]
        max_cells: Option<usize>,
    },
    /// Gradient tail ratio and norm histogram of a checkpoint.
    Tailratio {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = Target::Loss)]
        target: Target,
        #[arg(long, default_value = "out/tailratio")]
        out: PathBuf,
    },
    /// Paired tests over a results table.
    Stats {
        #[arg(long)]
        results: PathBuf,
        /// Take comparisons, fractions, seeds and the family size from a plan.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Extra comparison as model_a:model_b:metric (metric: tau | accuracy).
        #[arg(long)]
        compare: Vec<String>,
        /// Bonferroni family size.
        #[arg(long)]
        bonferroni_m: Option<usize>,
        #[arg(long, default_value = "out/stats")]
        out: PathBuf,
    },
    /// Accuracy and tau of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run file.
    #[arg(long, conflicts_with_all = ["plan", "cell"], required_unless_present = "plan")]
    config: Option<PathBuf>,
    /// Plan file; pick the run with --cell.
    #[arg(long, requires = "cell")]
    plan: Option<PathBuf>,
    /// model:fraction:seed within --plan.
    #[arg(long)]
    cell: Option<String>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct DataArgs {
    /// Evaluate on the eval split of this run file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate on every row of this CSV.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataArgs {
    fn source(&self) -> EvalData<'_> {
        match (&self.config, &self.data) {
            (Some(c), _) => EvalData::Config(c),
            (None, Some(d)) => EvalData::Csv(d),
            (None, None) => unreachable!("clap requires one of --config and --data"),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Loss,
    TrueLogit,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { run, out } => {
            let source = match (&run.config, &run.plan, &run.cell) {
                (Some(c), _, _) => RunSource::Config(c),
                (None, Some(p), Some(cell)) => RunSource::PlanCell { plan: p, cell },
                _ => return Err(CliError::Usage("train needs --config, or --plan with --cell".into())),
            };
            let (cfg, id) = resolve_run(source, run.seed)?;
            let done = cmd_train(&cfg, &id, &out)?;
            println!("{}", serde_json::to_string(&done.row).expect("rows serialize"));
        }
        Command::Sweep { plan, out, workers, resume, max_cells } => {
            let plan = load_plan(&plan)?;
            let out = out
                .or_else(|| plan.out.clone())
                .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `out` in the plan".into()))?;
            let s = run_sweep(&plan, &SweepOptions { out: out.clone(), workers, resume, max_cells })?;
            println!(
                "{}: {} cells, {} reused, {} run, {} failed{}",
                out.display(),
                s.total,
                s.reused,
                s.ran,
                s.failed,
                if s.complete { "" } else { " (unfinished)" }
            );
        }
        Command::Tailratio { checkpoint, data, target, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let target = match target {
                Target::Loss => GradTarget::Loss,
                Target::TrueLogit => GradTarget::TrueLogit,
            };
            let r = cmd_tailratio(&ckpt, data.source(), target, Some(&out))?;
            println!("{}: n={} mean={:.6e} p99={:.6e} tau={:.6}", r.model_id, r.n, r.mean, r.p99, r.tau);
        }
        Command::Stats { results, plan, compare, bonferroni_m, out } => {
            let compare = compare.iter().map(|c| parse_comparison(c)).collect::<Result<Vec<_>, _>>()?;
            let r = cmd_stats(StatsInput { results: &results, plan: plan.as_deref(), compare, bonferroni_m, out: &out })?;
            print!("{}", render_text(&r));
        }
        Command::Eval { checkpoint, data, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let r = cmd_eval(&ckpt, data.source(), out.as_deref())?;
            println!("{}", serde_json::to_string(&r).expect("reports serialize"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
