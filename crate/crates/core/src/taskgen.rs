//! Synthetic attribute-lookup QA with a knob for rationale sufficiency.
//!
//! A seeded knowledge base assigns every entity one value per attribute;
//! value sets of different attributes are disjoint. Questions ask
//! `what is the <attribute> of <entity> ?`.
//!
//! * Sufficient instances offer three values of the asked attribute and
//!   carry `the <attribute> of <entity> is a <kind> <value>`: the rationale
//!   alone picks the answer. `<kind>` (common or rare) is fixed per value.
//! * Complementary instances offer the entity's values for three different
//!   attributes and carry `<entity> has <v> and <v> and <v>` (all three
//!   choices, shuffled): only the question says which one is meant.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::RationalizedInstance;

pub const ATTRIBUTES: [&str; 6] = ["color", "shape", "food", "city", "animal", "tool"];

const VALUES: [[&str; 8]; 6] = [
    ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"],
    ["circle", "square", "triangle", "star", "oval", "cube", "cone", "ring"],
    ["bread", "rice", "soup", "cheese", "apple", "noodles", "fish", "beans"],
    ["paris", "lima", "oslo", "cairo", "tokyo", "quito", "rome", "delhi"],
    ["cat", "horse", "owl", "frog", "tiger", "whale", "goat", "crow"],
    ["hammer", "saw", "drill", "wrench", "shovel", "ladder", "needle", "axe"],
];

/// Values in the first half of each list are `common`, the rest `rare`.
pub const KINDS: [&str; 2] = ["common", "rare"];

const ONSETS: [&str; 10] = ["b", "d", "f", "k", "l", "m", "n", "p", "r", "t"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Size and seed of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyConfig {
    /// Fraction of instances whose rationale alone determines the label.
    pub s: f64,
    pub seed: u64,
    pub n: usize,
}

impl SufficiencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.s) {
            return Err(Error::Config(format!("sufficiency s={} outside [0, 1]", self.s)));
        }
        Ok(())
    }

    /// Number of instances that carry a sufficient rationale.
    pub fn sufficient_count(&self) -> usize {
        (self.s * self.n as f64).floor() as usize
    }
}

/// Attribute of a value token, if it is one.
pub fn attribute_of(value: &str) -> Option<&'static str> {
    VALUES
        .iter()
        .position(|vs| vs.contains(&value))
        .map(|a| ATTRIBUTES[a])
}

/// Qualifier word the sufficient template puts before `value`.
pub fn kind_of(value: &str) -> Option<&'static str> {
    VALUES.iter().find_map(|vs| vs.iter().position(|v| *v == value).map(|i| KINDS[i * 2 / vs.len()]))
}

/// The entity/attribute/value table behind a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    entities: Vec<String>,
    /// `facts[e][a]` indexes into `VALUES[a]`.
    facts: Vec<[usize; 6]>,
}

impl World {
    pub const DEFAULT_ENTITIES: usize = 60;

    /// Random knowledge base over `num_entities` entities (at most 2500).
    pub fn new(num_entities: usize, seed: u64) -> Result<Self> {
        let mut names = Vec::new();
        'outer: for o1 in ONSETS {
            for n1 in NUCLEI {
                for o2 in ONSETS {
                    for n2 in NUCLEI {
                        if names.len() == num_entities {
                            break 'outer;
                        }
                        // skip names that collide with value words
                        let name = format!("{o1}{n1}{o2}{n2}");
                        if attribute_of(&name).is_none() {
                            names.push(name);
                        }
                    }
                }
            }
        }
        if names.len() < num_entities {
            return Err(Error::Config(format!("cannot name {num_entities} entities")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b62_7365_6564);
        let facts = (0..num_entities)
            .map(|_| std::array::from_fn(|a| rng.gen_range(0..VALUES[a].len())))
            .collect();
        Ok(World {
            entities: names,
            facts,
        })
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    /// Value of `attribute` for entity index `e`.
    pub fn value(&self, e: usize, attribute: usize) -> &'static str {
        VALUES[attribute][self.facts[e][attribute]]
    }

    /// Every token the generator can emit, in a fixed order.
    pub fn tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = ["what", "is", "the", "of", "?", "has", "and", "a"]
            .iter()
            .chain(KINDS.iter())
            .map(|s| s.to_string())
            .collect();
        out.extend(ATTRIBUTES.iter().map(|s| s.to_string()));
        out.extend(VALUES.iter().flatten().map(|s| s.to_string()));
        out.extend(self.entities.iter().cloned());
        out
    }

    /// Deterministic dataset: exactly `cfg.sufficient_count()` sufficient
    /// instances at seeded positions, gold answers spread evenly over
    /// choice slots.
    pub fn generate(&self, cfg: &SufficiencyConfig) -> Result<Vec<RationalizedInstance>> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sufficient = vec![false; cfg.n];
        sufficient[..cfg.sufficient_count()].fill(true);
        sufficient.shuffle(&mut rng);
        let width = cfg.n.max(1).to_string().len();
        let mut out = Vec::with_capacity(cfg.n);
        for (i, &suff) in sufficient.iter().enumerate() {
            let e = rng.gen_range(0..self.entities.len());
            let a = rng.gen_range(0..ATTRIBUTES.len());
            let entity = self.entities[e].clone();
            let gold = self.value(e, a);
            let mut choices: Vec<&str> = if suff {
                let mut others: Vec<&str> = VALUES[a].iter().copied().filter(|v| *v != gold).collect();
                others.shuffle(&mut rng);
                vec![gold, others[0], others[1]]
            } else {
                let mut attrs: Vec<usize> = (0..ATTRIBUTES.len()).filter(|&b| b != a).collect();
                attrs.shuffle(&mut rng);
                vec![gold, self.value(e, attrs[0]), self.value(e, attrs[1])]
            };
            let slot = rng.gen_range(0..3);
            choices.swap(0, slot);
            let rationale: Vec<String> = if suff {
                let kind = kind_of(gold).expect("gold is a value");
                vec!["the", ATTRIBUTES[a], "of", &entity, "is", "a", kind, gold]
                    .into_iter()
                    .map(String::from)
                    .collect()
            } else {
                let mut listed = choices.clone();
                listed.shuffle(&mut rng);
                vec![&entity as &str, "has", listed[0], "and", listed[1], "and", listed[2]]
                    .into_iter()
                    .map(String::from)
                    .collect()
            };
            out.push(RationalizedInstance {
                id: format!("toy-{i:0width$}"),
                question: ["what", "is", "the", ATTRIBUTES[a], "of", &entity, "?"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                choices: choices.iter().map(|c| vec![c.to_string()]).collect(),
                gold_label: vec![gold.to_string()],
                gold_rationale: rationale,
                premise: None,
                sufficient: suff,
            });
        }
        Ok(out)
    }
}

/// Generates a dataset over the default-size knowledge base seeded by
/// `cfg.seed`.
pub fn generate_dataset(cfg: &SufficiencyConfig) -> Result<Vec<RationalizedInstance>> {
    World::new(World::DEFAULT_ENTITIES, cfg.seed)?.generate(cfg)
}

/// Result of reading a rationale with the generator's templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleVerdict {
    Label(Vec<String>),
    Undetermined,
}

/// Rule-based reader of the generator's templates: the answer is the
/// unique choice both mentioned in the rationale and compatible with
/// every attribute named in the rationale or (if given) the question.
pub fn template_oracle(rationale: &[String], choices: &[Vec<String>], question: Option<&[String]>) -> OracleVerdict {
    let named: Vec<&str> = rationale
        .iter()
        .chain(question.into_iter().flatten())
        .map(String::as_str)
        .filter(|t| ATTRIBUTES.contains(t))
        .collect();
    let candidates: Vec<&Vec<String>> = choices
        .iter()
        .filter(|c| c.iter().all(|t| rationale.contains(t)))
        .filter(|c| {
            named
                .iter()
                .all(|attr| c.iter().all(|t| attribute_of(t) == Some(*attr)))
        })
        .collect();
    match candidates.as_slice() {
        [only] => OracleVerdict::Label((*only).clone()),
        _ => OracleVerdict::Undetermined,
    }
}

/// Seeded split into (train, dev); `dev_fraction` of the instances, at
/// least one, go to dev.
pub fn split_dataset(
    instances: &[RationalizedInstance],
    dev_fraction: f64,
    seed: u64,
) -> Result<(Vec<RationalizedInstance>, Vec<RationalizedInstance>)> {
    if !(0.0..1.0).contains(&dev_fraction) {
        return Err(Error::Config(format!("dev fraction {dev_fraction} outside [0, 1)")));
    }
    if instances.len() < 2 {
        return Err(Error::Data("need at least two instances to split".into()));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7370_6c69_74));
    let n_dev = ((instances.len() as f64 * dev_fraction).round() as usize).clamp(1, instances.len() - 1);
    let mut dev_idx = order[..n_dev].to_vec();
    let mut train_idx = order[n_dev..].to_vec();
    dev_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| instances[i].clone()).collect();
    Ok((pick(&train_idx), pick(&dev_idx)))
}

/// Counts instances per gold choice slot.
pub fn label_slot_histogram(instances: &[RationalizedInstance]) -> HashMap<usize, usize> {
    let mut hist = HashMap::new();
    for inst in instances {
        if let Some(i) = inst.gold_index() {
            *hist.entry(i).or_insert(0) += 1;
        }
    }
    hist
}
