use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smolkit::scenario::{execute, parse_config, Mode, OUTPUT_ENV};

#[derive(Parser)]
#[command(name = "smolkit", version, about = "Coagulation-diffusion scenarios with bound checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Scenario file
    config: PathBuf,
    /// Worker threads (default: all cores); never changes results
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (default: `output.dir`, then $SMOLKIT_OUT/<name>)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario in the mode its config names
    Run(Common),
    /// Run the scenario's monitors and report pass/fail
    Verify(Common),
    /// Gel-mass refinement scan over `gelscan.n_list`
    Gelscan(Common),
}

fn main() -> ExitCode {
    // usage errors exit 1 so that 2 always means a failed check
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (args, forced) = match cli.command {
        Command::Run(a) => (a, None),
        Command::Verify(a) => (a, Some(Mode::Verify)),
        Command::Gelscan(a) => (a, Some(Mode::Gelscan)),
    };
    let result = parse_config(&args.config).and_then(|mut s| {
        if let Some(m) = forced {
            s.mode = m;
        }
        let out = s.output_root(args.out.as_deref());
        smolkit::with_workers(args.workers, || execute(&s, &out))?
    });
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            println!("output: {}", outcome.out_dir.display());
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("smolkit: {e}");
            if matches!(e, smolkit::Error::Io(_)) {
                eprintln!("(default output root can be set with {OUTPUT_ENV})");
            }
            ExitCode::from(1)
        }
    }
}
