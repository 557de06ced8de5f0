use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wfald::harness::sweep::SUMMARY_FILE;
use wfald::harness::validate::run_validation;
use wfald::harness::{emit_plotdata, parse_config, read_summary, run_sweep, Figure, SweepSpec};
use wfald::{Error, Result};

#[derive(Parser)]
#[command(name = "wfald", version, about = "Wireless federated Langevin dynamics simulator")]
struct Cli {
    /// Log progress (-v) or details (-vv).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the base configuration (run.algorithm, run.p_c, channel.snr_db).
    Run(ConfigArgs),
    /// Run the grid sweep.algorithms x sweep.pc_grid x sweep.snr_db_grid.
    Sweep(ConfigArgs),
    /// Turn a sweep summary into tidy plot data.
    Plotdata {
        /// Sweep output directory or summary CSV.
        input: PathBuf,
        /// Figure to emit: pc_curve, snr_curve or baseline_compare (default: all that apply).
        #[arg(short, long)]
        figure: Vec<String>,
        /// Output directory (default: the input directory).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant self-checks on a tiny problem.
    Validate,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file with dotted keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. --set run.eta=0.01 (repeatable).
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides sweep.output_dir).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Worker threads (overrides sweep.workers).
    #[arg(short, long)]
    workers: Option<usize>,
}

fn load(args: &ConfigArgs) -> Result<SweepSpec> {
    let mut spec = parse_config(args.config.as_deref(), &args.set)?;
    if let Some(out) = &args.out {
        spec.output_dir = out.clone();
    }
    if let Some(w) = args.workers {
        spec.workers = w;
    }
    Ok(spec)
}

fn sweep(spec: &SweepSpec) -> Result<()> {
    let result = run_sweep(spec)?;
    for row in &result.rows {
        println!(
            "{} p_c={} snr_db={}: mse {:.4e} +- {:.1e}, test error {:.4} (ensemble) {:.4} (last iterate)",
            row.algorithm,
            row.p_c,
            row.snr_db,
            row.mse_mean,
            row.mse_se,
            row.test_ensemble_mean,
            row.test_frequentist_mean
        );
    }
    println!("wrote {}", spec.output_dir.display());
    Ok(())
}

fn plotdata(input: &Path, figures: &[String], out: Option<&Path>) -> Result<()> {
    let (summary, dir) = if input.is_dir() {
        (input.join(SUMMARY_FILE), input.to_path_buf())
    } else {
        let parent = input.parent().map(Path::to_path_buf).unwrap_or_default();
        (input.to_path_buf(), parent)
    };
    let out = out.map(Path::to_path_buf).unwrap_or(dir);
    let rows = read_summary(&summary)?;
    if figures.is_empty() {
        let mut written = 0;
        for fig in Figure::ALL {
            match emit_plotdata(&rows, fig, &out) {
                Ok(path) => {
                    println!("wrote {}", path.display());
                    written += 1;
                }
                Err(Error::Config { message, .. }) => log::warn!("skipping {fig}: {message}"),
                Err(e) => return Err(e),
            }
        }
        if written == 0 {
            return Err(Error::Config {
                key: "plotdata".into(),
                message: "no figure could be built from this summary".into(),
            });
        }
    } else {
        for name in figures {
            let path = emit_plotdata(&rows, name.parse()?, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn validate() -> Result<bool> {
    let checks = run_validation()?;
    let mut ok = true;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = match &cli.command {
        Command::Run(args) => load(args).and_then(|spec| sweep(&spec.single())),
        Command::Sweep(args) => load(args).and_then(|spec| sweep(&spec)),
        Command::Plotdata { input, figure, out } => plotdata(input, figure, out.as_deref()),
        Command::Validate => match validate() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
