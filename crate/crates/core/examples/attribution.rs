//! Label and rationale attributions for a trained I->OR model, and their
//! agreement metrics over a held-out split.
//!
//!     cargo run --release --example attribution -- [n]

use rationale_assoc::attribution::{attribute_corpus, SpanAttributions, SpanTag};
use rationale_assoc::format::{parse_output, Mode, TaskFormat};
use rationale_assoc::harness::{train_configs, SuiteConfig};
use rationale_assoc::metrics::{summarize, DEFAULT_TOP_K};
use rationale_assoc::target::LocalTarget;
use rationale_assoc::taskgen::{generate_dataset, SufficiencyConfig};

fn main() -> rationale_assoc::Result<()> {
    let n = std::env::args().nth(1).map_or(600, |a| a.parse().expect("n"));
    let data = generate_dataset(&SufficiencyConfig { s: 0.5, seed: 13, n })?;
    let suite = train_configs(&data, &SuiteConfig::default(), &[Mode::InputToLabelRationale])?;
    let model = suite.model(Mode::InputToLabelRationale)?;

    // one instance in detail
    let inst = &suite.dev[0];
    let ids = model.source_ids(inst, None)?;
    let trace = model.decode_ids(&ids, None)?;
    let decoded = parse_output(&model.vocab.decode(&trace.decoded))?;
    let spans = SpanAttributions::compute(&model.params, &trace, &decoded)?;
    println!("decoded: {}", decoded.raw.join(" "));
    println!("{:>14} {:>9} {:>9} {:>9}", "token", "label", "rationale", "total");
    for (i, &id) in ids.iter().enumerate() {
        println!(
            "{:>14} {:>9.4} {:>9.4} {:>9.4}",
            model.vocab.token(id).unwrap_or("?"),
            spans.get(SpanTag::Label).values[i],
            spans.get(SpanTag::Rationale).values[i],
            spans.get(SpanTag::Total).values[i]
        );
    }
    println!("identity deviation {:.2e}", spans.identity_deviation());

    let mut target = LocalTarget::new(model.clone());
    let corpus = attribute_corpus(&mut target, &suite.dev, TaskFormat::Qa, DEFAULT_TOP_K)?;
    summarize(&corpus.records, corpus.parse_failures)?.write_csv(std::io::stdout())?;
    Ok(())
}
