use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use php_av::report::AblationKind;
use php_av_cli::commands;
use php_av_cli::{CliError, CliResult, ExperimentConfig, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "php-av",
    version,
    about = "Progressive audio-visual prompting experiments on synthetic tasks"
)]
struct Cli {
    /// JSON experiment config; `PHP_*` environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// A comma-separated task order; repeat for several.
    #[arg(long, global = true)]
    orders: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Component placement such as `S-M-D` (TMA, TMDG, TMI).
    #[arg(long, global = true)]
    placement: Option<String>,

    /// Enabled components: `all`, `none` or a list like `TMA,TMI`.
    #[arg(long, global = true)]
    components: Option<String>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic datasets.
    Generate,
    /// Train every order and checkpoint each stage.
    Run,
    /// Tabulate results into forgetting/transfer tables and plots.
    Report {
        /// Directory holding `result.json` files; defaults to `<out>/runs`.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value = "PHP")]
        method: String,
    },
    /// Component-mask and placement ablations.
    Ablate {
        /// `components`, `placement` or `both`.
        #[arg(long, default_value = "both")]
        kind: String,
    },
    /// Single-task accuracy of each task.
    Baseline {
        /// Restrict to these tasks.
        #[arg(long)]
        task: Vec<String>,
    },
}

fn execute(cli: Cli) -> CliResult<()> {
    let overrides = Overrides {
        orders: cli.orders,
        seed: cli.seed,
        placement: cli.placement,
        components: cli.components,
        out: cli.out,
    };
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Generate => {
            commands::generate(&cfg)?;
        }
        Command::Run => {
            for r in commands::run(&cfg)? {
                let row: Vec<String> = r.final_row().iter().map(|a| format!("{a:.2}")).collect();
                println!("{}: {}", r.order.join(" → "), row.join(" "));
            }
        }
        Command::Report { results, method } => {
            let dir = results.unwrap_or_else(|| cfg.runs_dir());
            let out = commands::report(&cfg, &dir, &method)?;
            for f in out.files {
                println!("{}", f.display());
            }
        }
        Command::Ablate { kind } => {
            let kinds = match kind.as_str() {
                "both" => vec![AblationKind::Components, AblationKind::Placement],
                k => vec![k.parse::<AblationKind>()?],
            };
            for f in commands::ablate(&cfg, &kinds)? {
                println!("{}", f.display());
            }
        }
        Command::Baseline { task } => {
            for (t, acc) in commands::baseline(&cfg, &task)? {
                println!("{t}: {acc:.2}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code: CliError = e;
            ExitCode::from(code.exit_code() as u8)
        }
    }
}
