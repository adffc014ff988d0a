//! Label-informedness and sufficiency tables for one sufficiency level.
//!
//!     cargo run --release --example tables -- [s] [n]

use rationale_assoc::harness::{label_informedness, sufficiency_gap, train_suite, SuiteConfig};
use rationale_assoc::taskgen::{generate_dataset, SufficiencyConfig};

fn main() -> rationale_assoc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let s = args.first().map_or(1.0, |a| a.parse().expect("s"));
    let n = args.get(1).map_or(1200, |a| a.parse().expect("n"));

    let data = generate_dataset(&SufficiencyConfig { s, seed: 13, n })?;
    let suite = train_suite(&data, &SuiteConfig::default())?;
    let models = suite.trained();
    let out = std::io::stdout();
    label_informedness(&models, &suite.dev)?.write_csv(out.lock())?;
    println!();
    sufficiency_gap(&models, &suite.dev)?.write_csv(out.lock())?;
    Ok(())
}
