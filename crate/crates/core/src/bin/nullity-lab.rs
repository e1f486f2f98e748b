use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nullity_lab::report::{exit_code_for_error, run, Command, ExperimentConfig, EXIT_CONFIG};

/// Run one nullity-lab experiment and write a JSON report.
#[derive(Parser)]
#[command(name = "nullity-lab", version)]
struct Args {
    /// analyze | leafcheck | lift | holonomy | connect | classprobe | tube | counterexample
    command: Command,
    /// TOML experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("NULLITY_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| format!("NULLITY_LAB_THREADS must be a positive integer, got `{v}`"))?;
    if n == 0 {
        return Err("NULLITY_LAB_THREADS must be positive".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG as u8);
    }
    let config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for_error(&e) as u8);
        }
    };
    let output = match run(args.command, &config, args.seed) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for_error(&e) as u8);
        }
    };
    match output.write(&args.out) {
        Ok(path) => println!("{}", path.display()),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for_error(&e) as u8);
        }
    }
    for c in &output.report.checks {
        println!(
            "{} {} = {:.3e} ({} {:.3e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.relation,
            c.bound
        );
    }
    ExitCode::from(output.exit_code() as u8)
}
