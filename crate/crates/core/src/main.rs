use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trojankey::cli::{self, Options, ScenarioConfig};

#[derive(Parser)]
#[command(name = "trojankey", version, about = "Trojan-key search against logic-locked neurons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding [output].dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scenario seed, overriding the top-level `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the victim network and record its accuracy.
    VictimTrain(Common),
    /// Lock the victim and search for a trojan key.
    Attack(Common),
    /// Evaluate a stored attack result on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Attack result to evaluate; defaults to the one in the output directory.
        #[arg(long)]
        result: Option<PathBuf>,
    },
    /// Run internal consistency checks.
    Selftest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn set_jobs(jobs: Option<usize>) {
    if let Some(n) = jobs {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn options(c: &Common) -> Options {
    set_jobs(c.jobs);
    Options {
        config: c.config.clone(),
        out: c.out.clone(),
        seed: c.seed,
    }
}

fn run(command: Command) -> trojankey::Result<u8> {
    match command {
        Command::VictimTrain(c) => {
            let e = cli::cmd_victim_train(&options(&c))?;
            println!("test accuracy {} (model {})", e.payload.test_accuracy, e.model_hash);
        }
        Command::Attack(c) => {
            let e = cli::cmd_attack(&options(&c))?;
            let r = &e.payload.result;
            println!("trojan key {} loss {}", r.trojan_key.code, r.loss);
            if let Some(rank) = r.brute_force_rank {
                println!("brute force rank {rank}");
            }
        }
        Command::Eval { common, result } => {
            let e = cli::cmd_eval(&options(&common), result.as_deref())?;
            if let Some(u) = &e.payload.untargeted {
                println!(
                    "trigger delta {} mean non-trigger delta {}",
                    u.summary.trigger_delta, u.summary.mean_nontrigger_delta
                );
            }
            if let Some(shift) = e.payload.targeted.as_ref().and_then(|t| t.target_shift) {
                println!("target shift {shift}");
            }
        }
        Command::Selftest { config, jobs } => {
            set_jobs(jobs);
            let config = config.map(|p| ScenarioConfig::load(&p)).transpose()?;
            let report = cli::cmd_selftest(config.as_ref())?;
            print!("{}", report.to_text());
            return Ok(if report.passed() { 0 } else { 1 });
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
