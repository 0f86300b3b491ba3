//! Runs a scenario file the same way the `smolkit` binary does.
//!
//! cargo run --example run_scenario -- examples/configs/blob_sum_kernel.cfg

use std::path::PathBuf;

use smolkit::scenario::{execute, parse_config};

fn main() -> smolkit::Result<()> {
    let path: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/constant_homogeneous.cfg").into())
        .into();
    let s = parse_config(&path)?;
    let out = s.output_root(None);
    let outcome = execute(&s, &out)?;
    print!("{}", outcome.summary);
    println!("wrote {}", out.display());
    std::process::exit(outcome.exit_code());
}
