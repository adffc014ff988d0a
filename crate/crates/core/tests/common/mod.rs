#![allow(dead_code)]

use std::sync::OnceLock;

use rationale_assoc::format::{task_vocab, Mode, TaskFormat};
use rationale_assoc::model::{train, ModelConfig, TrainConfig, TrainedModel};
use rationale_assoc::taskgen::{generate_dataset, SufficiencyConfig};
use rationale_assoc::RationalizedInstance;

/// A small dataset with quickly trained I->OR and R->O models.
pub struct Fixture {
    pub data: Vec<RationalizedInstance>,
    pub ior: TrainedModel,
    pub ro: TrainedModel,
}

pub fn small() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let data = generate_dataset(&SufficiencyConfig { s: 0.5, seed: 5, n: 120 }).unwrap();
        let vocab = task_vocab(&data);
        let mc = ModelConfig::new(vocab.len());
        let tc = TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 25,
            patience: 25,
            seed: 5,
            ..TrainConfig::default()
        };
        let fit = |mode| train(&data, &data[..20], &vocab, mode, TaskFormat::Qa, &mc, &tc).unwrap().0;
        Fixture {
            ior: fit(Mode::InputToLabelRationale),
            ro: fit(Mode::RationaleToLabel),
            data,
        }
    })
}

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}
