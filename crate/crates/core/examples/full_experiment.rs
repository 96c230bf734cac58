//! Parses a config, runs every (method, seed) pair and writes the CSVs.
//!
//! `cargo run --release --example full_experiment -- [config] [out_dir]`

use osifl::config::{parse_config, SEED_OVERRIDE_ENV};
use osifl::experiment::{final_accuracy_table, run_experiment};

const DEFAULT: &str = "\
# surrogate generator keeps this example fast; use `ddpm` for the full pipeline
generator = surrogate
methods = OSIFL, OSCAR_IL, OSCAR_CEILING, FEDAVG
";

fn main() -> osifl::Result<()> {
    let mut args = std::env::args().skip(1);
    let text = match args.next() {
        Some(path) => std::fs::read_to_string(path)?,
        None => DEFAULT.to_string(),
    };
    let mut cfg = parse_config(&text)?;
    cfg.apply_seed_override(std::env::var(SEED_OVERRIDE_ENV).ok().as_deref())?;
    let out_dir = args.next().map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("osifl_experiment"));

    let output = run_experiment(&cfg)?;
    for path in output.write(&out_dir)? {
        println!("wrote {}", path.display());
    }
    for (method, acc) in final_accuracy_table(&output.reports) {
        println!("{:<14} {:.4}", method.as_str(), acc);
    }
    Ok(())
}
