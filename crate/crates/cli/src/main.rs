use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ensemble_dft::config::{Algorithm, RunConfig};
use ensemble_dft::fixtures::{make_fixture, FIXTURES};
use ensemble_dft::report::{compare, describe, execute, write_run};
use ensemble_dft::Error;

/// Exit code when a run finishes without meeting its tolerance.
const NOT_CONVERGED: u8 = 5;

#[derive(Parser)]
#[command(name = "edft", version, about = "Smeared Kohn-Sham free-energy minimization on small plane-wave models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one algorithm and write CSV, JSON and plot script.
    Run {
        #[command(flatten)]
        source: Source,
        /// scf or pcg-s1|s2|s3 with optional -r1|-r2 (default: from config).
        #[arg(long)]
        algo: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run several algorithms on the same system and write a combined plot script.
    Compare {
        #[command(flatten)]
        source: Source,
        /// Comma-separated algorithm list.
        #[arg(long, alias = "algos", value_delimiter = ',', default_value = "pcg-s1,pcg-s2,pcg-s3,scf")]
        algo: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Built-in test systems.
    Fixtures {
        #[command(subcommand)]
        action: FixtureAction,
    },
    /// Check a config file and list every violation.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum FixtureAction {
    /// List fixture names.
    List,
    /// Print a fixture as a config file.
    Show { name: String },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Path to a TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Name of a built-in fixture.
    #[arg(long)]
    fixture: Option<String>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Iteration cap for both the optimizer and SCF.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Optimizer gradient tolerance and SCF density tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

fn load(source: &Source, o: &Overrides) -> Result<RunConfig, Error> {
    let mut cfg = match (&source.config, &source.fixture) {
        (Some(path), _) => RunConfig::from_path(path)?,
        (None, Some(name)) => make_fixture(name)?,
        (None, None) => unreachable!("clap enforces one source"),
    };
    if let Some(s) = o.seed {
        cfg.run.seed = s;
    }
    if let Some(d) = &o.out_dir {
        cfg.run.out_dir = d.display().to_string();
    }
    if let Some(m) = o.max_iter {
        cfg.optimizer.max_iter = Some(m);
        cfg.scf.max_iter = Some(m);
    }
    if let Some(t) = o.tol {
        cfg.optimizer.tol = Some(t);
        cfg.scf.eps_density = Some(t);
    }
    let errs = cfg.violations();
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Run { source, algo, overrides } => {
            let cfg = load(&source, &overrides)?;
            let alg = match algo {
                Some(a) => Algorithm::parse(&a)?,
                None => cfg.algorithm()?,
            };
            let outcome = execute(&cfg, alg)?;
            let files = write_run(&outcome, std::path::Path::new(&cfg.run.out_dir))?;
            println!("{}", describe(&outcome.summary));
            println!("wrote {}, {}, {}", files.csv.display(), files.json.display(), files.plot.display());
            Ok(if outcome.summary.converged { 0 } else { NOT_CONVERGED })
        }
        Command::Compare { source, algo, overrides } => {
            let cfg = load(&source, &overrides)?;
            let algs = algo.iter().map(|a| Algorithm::parse(a)).collect::<Result<Vec<_>, _>>()?;
            let (outcomes, plot) = compare(&cfg, &algs, std::path::Path::new(&cfg.run.out_dir))?;
            for o in &outcomes {
                println!("{}", describe(&o.summary));
            }
            println!("wrote {}", plot.display());
            Ok(0)
        }
        Command::Fixtures { action: FixtureAction::List } => {
            for (name, what) in FIXTURES {
                println!("{name:<22}{what}");
            }
            Ok(0)
        }
        Command::Fixtures { action: FixtureAction::Show { name } } => {
            print!("{}", make_fixture(&name)?.to_toml()?);
            Ok(0)
        }
        Command::Validate { config } => {
            RunConfig::from_path(&config)?;
            println!("{}: ok", config.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
