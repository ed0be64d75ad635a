use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairdiff::harness::{self, ConfigSource, Run, RunOutcome};
use fairdiff::selftest;
use fairdiff::Error;

#[derive(Parser)]
#[command(name = "fairdiff", version, about = "Bias measurement and latent-space correction for diffusion samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the population file and its attribute marginals.
    Synth(RunArgs),
    /// Uncorrected generation and its bias report.
    Baseline(RunArgs),
    /// Calibrate at t*, generate with equal component quotas, report both modes.
    Correct(RunArgs),
    /// Merge report files into one long-format CSV.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory for run outputs (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value`, repeatable; keys are dotted config paths.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn run(self) -> Result<Run, Error> {
        let source = ConfigSource {
            path: Some(self.config),
            overrides: self.overrides,
            seed: self.seed,
        };
        let mut cfg = source.load()?;
        if let Some(out) = self.out {
            let cwd = std::env::current_dir().map_err(|e| Error::Io { path: ".".into(), source: e })?;
            cfg.out = cwd.join(out);
        }
        Run::new(cfg, source)
    }
}

fn print_outcome(out: &RunOutcome) {
    println!("{}", out.dir.display());
    if let Some(r) = &out.report {
        let fmt = |v: &[f64]| v.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(" ");
        eprintln!("{}: train {}", r.attribute, fmt(&r.train_props));
        eprintln!("{}: uncorrected {}", r.attribute, fmt(&r.gen_props_uncorrected));
        if let Some(c) = &r.gen_props_corrected {
            eprintln!("{}: corrected {}", r.attribute, fmt(c));
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => a.run().and_then(harness::cmd_synth).map(|o| print_outcome(&o)),
        Command::Baseline(a) => a.run().and_then(harness::cmd_baseline).map(|o| print_outcome(&o)),
        Command::Correct(a) => a.run().and_then(harness::cmd_correct).map(|o| print_outcome(&o)),
        Command::Report { reports, out } => harness::cmd_report(&reports, out.as_deref()).map(|table| {
            if out.is_none() {
                print!("{table}");
            }
        }),
        Command::Selftest { seed } => {
            let checks = selftest::run_checks(seed);
            for c in &checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                if c.detail.is_empty() {
                    println!("{status}  {}", c.name);
                } else {
                    println!("{status}  {}  ({})", c.name, c.detail);
                }
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                eprintln!("{failed} check(s) failed");
                return ExitCode::from(3);
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
