use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use funnel_select::PhiFamily;
use funnel_select_cli::{run, ExperimentConfig, Overrides, Phase, Problem, Status};

/// Trajectory selection in funnels of non-unique solutions.
#[derive(Debug, Parser)]
#[command(name = "funnel-select", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Shift and splice closure of the funnels at the configured anchors.
    Axioms,
    /// Successive-maximization reduction at the configured anchors.
    Reduce,
    /// Semigroup law on random triples, recomputed from scratch.
    Semigroup,
    /// Classification of the Clairaut semi-process.
    Clairaut,
    /// Terminal-time, local-axiom and guard-gap checks.
    Local,
    /// Every phase.
    All,
    /// Every phase; the problem is usually given with `--problem`.
    Run,
}

/// Precedence, lowest first: problem defaults, `--config` file, flags.
#[derive(Debug, Args)]
struct Common {
    #[arg(long, global = true, value_enum)]
    problem: Option<Problem>,
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    n_max: Option<usize>,
    #[arg(long, global = true)]
    eta_tie: Option<f64>,
    #[arg(long, global = true)]
    eps_singleton: Option<f64>,
    /// Guard gap as a fraction of the terminal time.
    #[arg(long, global = true)]
    guard_gap: Option<f64>,
    #[arg(long, global = true, value_parser = parse_family)]
    phi_family: Option<PhiFamily>,
    /// Print the report as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
}

fn parse_family(s: &str) -> Result<PhiFamily, String> {
    s.parse().map_err(|e: funnel_select::FunnelError| e.to_string())
}

fn phases(command: &Command) -> Vec<Phase> {
    match command {
        Command::Axioms => vec![Phase::Axioms],
        Command::Reduce => vec![Phase::Reduce],
        Command::Semigroup => vec![Phase::Semigroup],
        Command::Clairaut => vec![Phase::Clairaut],
        Command::Local => vec![Phase::Local],
        Command::All | Command::Run => Phase::ALL.to_vec(),
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("FUNNEL_SELECT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("FUNNEL_SELECT_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            anyhow::bail!("FUNNEL_SELECT_THREADS must be a positive integer, got `{v}`");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let cfg = ExperimentConfig::load(c.config.as_deref(), c.problem).and_then(|mut cfg| {
        Overrides {
            n_max: c.n_max,
            eta_tie: c.eta_tie,
            eps_singleton: c.eps_singleton,
            guard_gap: c.guard_gap,
            phi_family: c.phi_family,
        }
        .apply(&mut cfg)
        .map(|_| cfg)
    });
    let cfg = match cfg {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let out = match run(&cfg, &phases(&cli.command), &c.out_dir) {
        Ok(out) => out,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if c.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&out.report).expect("report serializes")
        );
    } else {
        for (check, (_, secs)) in out.report.checks.iter().zip(&out.timings.phases) {
            let status = match check.status {
                Status::Pass => "pass",
                Status::Fail => "FAIL",
                Status::Skipped => "skipped",
            };
            println!("{:<10} {:<8} {:>8.2}s", check.phase.as_str(), status, secs);
        }
        println!("report: {}", out.report_path.display());
    }
    if out.report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
