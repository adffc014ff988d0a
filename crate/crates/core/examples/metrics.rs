//! Association metrics on hand-written attribution vectors.

use rationale_assoc::metrics::{cosine, jsd_uniform, kendall_counts, topk_overlap, AssociationRecord};

fn main() -> rationale_assoc::Result<()> {
    let label = [0.9, -0.1, 0.4, 0.0, 0.4, -0.7];
    let rationale = [0.5, 0.2, 0.4, 0.1, 0.3, -0.2];

    let counts = kendall_counts(&label, &rationale)?;
    println!("{counts:?} -> tau-b {:.4}", counts.tau_b()?);
    println!("cosine raw {:.4}, abs {:.4}", cosine(&label, &rationale, false)?, cosine(&label, &rationale, true)?);
    println!("top-3 overlap {}", topk_overlap(&label, &rationale, 3, false)?);
    println!("jsd vs uniform: label {:.4}, rationale {:.4}", jsd_uniform(&label)?, jsd_uniform(&rationale)?);
    println!("{:#?}", AssociationRecord::compute("demo", &label, &rationale, 3)?);
    Ok(())
}
