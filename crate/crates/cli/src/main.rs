use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use marginlab::runner::config::{DatasetSpec, RunConfig};
use marginlab::runner::run::{cmd_check, cmd_gen_data, cmd_run, cmd_verify_loss};
use marginlab::runner::sweep::{cmd_sweep, resolve_workers, SweepConfig};
use marginlab::{Error, LossFunction, LossKind};

#[derive(Parser)]
#[command(name = "marginlab", version, about = "Gradient descent margin and implicit-bias experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and certify every applicable bound.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generator seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the loss assumptions on the default grids.
    VerifyLoss {
        /// exp, logistic or poly_tail
        #[arg(long)]
        loss: String,
        /// Tail exponent for poly_tail.
        #[arg(long)]
        k: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a base config over a list of values on one axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Falls back to MARGINLAB_WORKERS, then the number of CPUs.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the configured dataset to DIR/dataset.csv.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-certify a finished run directory from its trajectory file.
    Check {
        /// Run directory written by `run`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, Error> {
    flag.or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::usage("no output directory: pass --out or set \"out\" in the config"))
}

fn apply_seed(cfg: &mut RunConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.seed = Some(s);
        if let DatasetSpec::Generated { seed, .. } = &mut cfg.dataset {
            *seed = Some(s);
        }
    }
}

fn load_sweep(path: &Path) -> Result<SweepConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    SweepConfig::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn parse_loss(name: &str, k: Option<f64>) -> Result<LossFunction, Error> {
    let kind = match (name, k) {
        ("exp", None) => LossKind::Exp,
        ("logistic", None) => LossKind::Logistic,
        ("poly_tail", Some(k)) => LossKind::PolyTail { k },
        ("poly_tail", None) => return Err(Error::usage("poly_tail needs --k")),
        ("exp" | "logistic", Some(_)) => return Err(Error::usage("--k only applies to poly_tail")),
        (other, _) => return Err(Error::usage(format!("unknown loss {other:?}"))),
    };
    LossFunction::from_kind(kind).map_err(|e| Error::usage(e.to_string()))
}

/// Exit code 0 when every applicable check passed, 1 otherwise.
fn dispatch(cmd: Command) -> Result<bool, Error> {
    match cmd {
        Command::Run { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            apply_seed(&mut cfg, seed);
            let dir = out_dir(out, &cfg)?;
            let res = cmd_run(&cfg, &dir)?;
            for r in &res.reports {
                let status = match (r.applicable, r.passed) {
                    (false, _) => "n/a ",
                    (true, true) => "pass",
                    (true, false) => "FAIL",
                };
                let slack = r.worst_slack.map(|s| format!("{s:.3e}")).unwrap_or_else(|| "-".into());
                println!("{status} {:<18} worst slack {slack}", r.theorem_id.name());
                for w in &r.warnings {
                    println!("     warning: {w}");
                }
            }
            println!("artifacts in {}", dir.display());
            Ok(res.passed())
        }
        Command::VerifyLoss { loss, k, out } => {
            let loss = parse_loss(&loss, k)?;
            let rep = cmd_verify_loss(&loss, &out)?;
            for c in &rep.conditions {
                let status = if c.passed { "pass" } else { "FAIL" };
                println!("{status} [{}] {} (worst {:.3e})", c.condition, c.check, c.worst_violation);
            }
            Ok(rep.passed)
        }
        Command::Sweep {
            config,
            out,
            workers,
            seed,
        } => {
            let mut cfg = load_sweep(&config)?;
            apply_seed(&mut cfg.base, seed);
            let dir = out_dir(out, &cfg.base)?;
            let workers = resolve_workers(workers)?;
            let rows = cmd_sweep(&cfg, &dir, workers)?;
            let failed: Vec<_> = rows.iter().filter_map(|r| r.error.as_ref().map(|e| (&r.axis_value, e))).collect();
            for (v, e) in &failed {
                eprintln!("{} = {v}: {e}", cfg.sweep.name());
            }
            println!("{} rows written to {}", rows.len(), dir.join("sweep.csv").display());
            Ok(failed.is_empty() && rows.iter().all(|r| r.reports_passed))
        }
        Command::GenData { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            apply_seed(&mut cfg, seed);
            let dir = out_dir(out, &cfg)?;
            let ds = cmd_gen_data(&cfg, &dir)?;
            println!("wrote {} rows of dimension {} to {}", ds.n(), ds.d(), dir.join("dataset.csv").display());
            Ok(true)
        }
        Command::Check { out } => {
            let chk = cmd_check(&out)?;
            for r in chk.result.reports.iter().filter(|r| r.applicable) {
                println!("{} {}", if r.passed { "pass" } else { "FAIL" }, r.theorem_id.name());
            }
            match chk.matches_recorded {
                Some(false) => println!("note: reports differ from the recorded reports.json"),
                Some(true) => println!("reports match the recorded reports.json"),
                None => {}
            }
            Ok(chk.result.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("marginlab [{}]: {e}", e.module());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
