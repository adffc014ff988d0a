//! Generate a synthetic rationalized QA dataset and print a few instances.
//!
//!     cargo run --example generate -- [s] [n] [seed] [out.jsonl]

use rationale_assoc::instance::{detokenize, save_dataset};
use rationale_assoc::taskgen::{generate_dataset, label_slot_histogram, SufficiencyConfig};

fn main() -> rationale_assoc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let s = args.first().map_or(0.5, |a| a.parse().expect("s"));
    let n = args.get(1).map_or(12, |a| a.parse().expect("n"));
    let seed = args.get(2).map_or(13, |a| a.parse().expect("seed"));

    let data = generate_dataset(&SufficiencyConfig { s, seed, n })?;
    for inst in data.iter().take(4) {
        println!("{}  sufficient={}", inst.id, inst.sufficient);
        println!("  question:  {}", detokenize(&inst.question));
        for c in &inst.choices {
            println!("  choice:    {}", detokenize(c));
        }
        println!("  label:     {}", detokenize(&inst.gold_label));
        println!("  rationale: {}", detokenize(&inst.gold_rationale));
    }
    let sufficient = data.iter().filter(|i| i.sufficient).count();
    println!("{sufficient}/{} sufficient, gold slot counts {:?}", data.len(), label_slot_histogram(&data));

    if let Some(path) = args.get(3) {
        save_dataset(path.as_ref(), &data)?;
        println!("wrote {path}");
    }
    Ok(())
}
