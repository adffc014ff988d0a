//! Train all four configurations on one split and save their checkpoints.
//!
//!     cargo run --release --example train_suite -- [s] [n] [out_dir]

use rationale_assoc::checkpoint::save_model;
use rationale_assoc::cli::checkpoint_name;
use rationale_assoc::harness::{train_suite, SuiteConfig};
use rationale_assoc::taskgen::{generate_dataset, SufficiencyConfig};

fn main() -> rationale_assoc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let s = args.first().map_or(1.0, |a| a.parse().expect("s"));
    let n = args.get(1).map_or(1200, |a| a.parse().expect("n"));

    let data = generate_dataset(&SufficiencyConfig { s, seed: 13, n })?;
    let suite = train_suite(&data, &SuiteConfig::default())?;
    for (model, report) in &suite.models {
        println!(
            "{:6} epochs {:2} (best {:2})  dev accuracy {:.3}",
            report.mode.to_string(),
            report.curve.len(),
            report.best_epoch,
            report.dev_accuracy
        );
        if let Some(dir) = args.get(2) {
            std::fs::create_dir_all(dir)?;
            save_model(&std::path::Path::new(dir).join(checkpoint_name(model.mode)), model)?;
        }
    }
    Ok(())
}
