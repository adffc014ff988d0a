//! Gaussian input-noise sweep: label flips, rationale meaning proxy and
//! the stability case at each noise level.
//!
//!     cargo run --release --example noise_sweep -- [n]

use rationale_assoc::harness::{train_configs, SuiteConfig};
use rationale_assoc::robustness::{sweep_and_classify, NoiseConfig, Thresholds, NOISE_EMBED_SCALE};
use rationale_assoc::target::LocalTarget;
use rationale_assoc::taskgen::{generate_dataset, SufficiencyConfig};
use rationale_assoc::Mode;

fn main() -> rationale_assoc::Result<()> {
    let n = std::env::args().nth(1).map_or(1500, |a| a.parse().expect("n"));
    let data = generate_dataset(&SufficiencyConfig { s: 0.5, seed: 13, n })?;
    let cfg = SuiteConfig {
        embed_scale: NOISE_EMBED_SCALE,
        ..SuiteConfig::default()
    };
    let suite = train_configs(&data, &cfg, &[Mode::InputToLabelRationale, Mode::RationaleToLabel])?;
    let mut target = LocalTarget::new(suite.model(Mode::InputToLabelRationale)?.clone());
    let evaluator = suite.model(Mode::RationaleToLabel)?;

    let report = sweep_and_classify(&mut target, evaluator, &suite.dev, &NoiseConfig::default(), Thresholds::default())?;
    report.write_csv(std::io::stdout())?;
    println!("flip rate vs variance, spearman {:.3}", report.flip_trend()?);
    Ok(())
}
