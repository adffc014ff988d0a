//! The four model configurations trained side by side, and the two
//! pipeline-versus-joint experiments run on them: how label-informed the
//! generated rationales are, and how much the input adds on top of the
//! reference rationale.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{parse_label, parse_output, task_vocab, Mode, TaskFormat};
use crate::instance::RationalizedInstance;
use crate::model::{train, ModelConfig, TrainConfig, TrainReport, TrainedModel};
use crate::taskgen::split_dataset;
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub format: TaskFormat,
    pub dev_fraction: f64,
    /// Seeds the split and every training run.
    pub seed: u64,
    pub d_model: usize,
    pub d_ff: usize,
    pub tie_embeddings: bool,
    pub embed_scale: f64,
    pub train: TrainConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            format: TaskFormat::Qa,
            dev_fraction: 0.2,
            seed: 13,
            d_model: 32,
            d_ff: 64,
            tie_embeddings: false,
            embed_scale: 1.0,
            train: TrainConfig::default(),
        }
    }
}

impl SuiteConfig {
    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            tie_embeddings: self.tie_embeddings,
            embed_scale: self.embed_scale,
            ..ModelConfig::new(vocab.len())
        }
    }
}

/// One trained model per configuration, all on the same split.
#[derive(Debug, Clone)]
pub struct ConfigSuite {
    pub vocab: Vocab,
    pub train: Vec<RationalizedInstance>,
    pub dev: Vec<RationalizedInstance>,
    pub models: Vec<(TrainedModel, TrainReport)>,
}

impl ConfigSuite {
    pub fn model(&self, mode: Mode) -> Result<&TrainedModel> {
        find_model(&self.trained(), mode)
    }

    /// The trained models, in training order.
    pub fn trained(&self) -> Vec<&TrainedModel> {
        self.models.iter().map(|(m, _)| m).collect()
    }

    pub fn report(&self, mode: Mode) -> Option<&TrainReport> {
        self.models.iter().find(|(_, r)| r.mode == mode).map(|(_, r)| r)
    }
}

/// Trains the four configurations separately on one seeded split.
pub fn train_suite(dataset: &[RationalizedInstance], cfg: &SuiteConfig) -> Result<ConfigSuite> {
    train_configs(dataset, cfg, &Mode::ALL)
}

/// Trains the given configurations separately on one seeded split.
pub fn train_configs(dataset: &[RationalizedInstance], cfg: &SuiteConfig, modes: &[Mode]) -> Result<ConfigSuite> {
    let (train_set, dev) = split_dataset(dataset, cfg.dev_fraction, cfg.seed)?;
    let vocab = task_vocab(dataset);
    let model_cfg = cfg.model_config(&vocab);
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let models = modes
        .iter()
        .map(|&mode| train(&train_set, &dev, &vocab, mode, cfg.format, &model_cfg, &tc))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConfigSuite {
        vocab,
        train: train_set,
        dev,
        models,
    })
}

/// One accuracy row of an experiment table. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: String,
    pub accuracy: f64,
    /// Difference to the table's reference row, two decimals.
    pub delta: Option<f64>,
    pub evaluated: usize,
    pub parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn row(&self, config: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.config == config)
    }

    /// CSV with columns `config,accuracy,delta,evaluated,parse_failures`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["config", "accuracy", "delta", "evaluated", "parse_failures"])?;
        for r in &self.rows {
            w.write_record([
                r.config.clone(),
                format!("{:.2}", r.accuracy),
                r.delta.map(|d| format!("{d:+.2}")).unwrap_or_default(),
                r.evaluated.to_string(),
                r.parse_failures.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `b - a` rounded to two decimals; both must be percentages.
pub fn compute_gap(a: f64, b: f64) -> Result<f64> {
    for v in [a, b] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Metric(format!("accuracy {v} outside [0, 100]")));
        }
    }
    Ok(((b - a) * 100.0).round() / 100.0)
}

/// Label accuracy (percent) of a label-predicting model when fed the
/// given rationales; `None` rationales are skipped and counted.
pub fn accuracy_on_rationales(
    predictor: &TrainedModel,
    instances: &[RationalizedInstance],
    rationales: &[Option<Vec<String>>],
) -> Result<(f64, usize, usize)> {
    if instances.len() != rationales.len() {
        return Err(Error::Align {
            left: instances.len(),
            right: rationales.len(),
        });
    }
    let mut correct = 0;
    let mut evaluated = 0;
    let mut failures = 0;
    for (inst, r) in instances.iter().zip(rationales) {
        let Some(r) = r else {
            failures += 1;
            continue;
        };
        let raw = predictor.generate(inst, Some(r))?;
        evaluated += 1;
        correct += (parse_label(&raw) == inst.gold_label) as usize;
    }
    let acc = if evaluated == 0 {
        0.0
    } else {
        100.0 * correct as f64 / evaluated as f64
    };
    Ok((acc, evaluated, failures))
}

/// Rationales a generator emits for each instance: the text after the
/// separator for I->OR, the whole emission for I->R. Unparseable or empty
/// rationales come back as `None`.
pub fn generated_rationales(
    generator: &TrainedModel,
    instances: &[RationalizedInstance],
) -> Result<Vec<Option<Vec<String>>>> {
    instances
        .iter()
        .map(|inst| {
            let raw = generator.generate(inst, None)?;
            let r = match generator.mode {
                Mode::InputToLabelRationale => parse_output(&raw).ok().map(|o| o.rationale_tokens),
                Mode::InputToRationale => Some(parse_label(&raw)),
                other => {
                    return Err(Error::Config(format!("{other} models do not generate rationales")));
                }
            };
            Ok(r.filter(|r| !r.is_empty()))
        })
        .collect()
}

fn row(config: &str, (accuracy, evaluated, parse_failures): (f64, usize, usize), reference: Option<f64>) -> Result<ReportRow> {
    Ok(ReportRow {
        config: config.to_string(),
        accuracy,
        delta: reference.map(|r| compute_gap(r, accuracy)).transpose()?,
        evaluated,
        parse_failures,
    })
}

/// The model of configuration `mode`, which must be trained.
pub fn find_model<'a>(models: &[&'a TrainedModel], mode: Mode) -> Result<&'a TrainedModel> {
    let m = models
        .iter()
        .find(|m| m.mode == mode)
        .ok_or_else(|| Error::Config(format!("no {mode} model given")))?;
    m.ensure_trained()?;
    Ok(m)
}

/// The frozen R->O model scored on reference, joint-generated and
/// pipeline-generated rationales, with deltas to the reference row.
/// Needs the R->O, I->OR and I->R models.
pub fn label_informedness(models: &[&TrainedModel], test: &[RationalizedInstance]) -> Result<ExperimentReport> {
    let ro = find_model(models, Mode::RationaleToLabel)?;
    let gold: Vec<Option<Vec<String>>> = test.iter().map(|i| Some(i.gold_rationale.clone())).collect();
    let rstar = accuracy_on_rationales(ro, test, &gold)?;
    let joint = generated_rationales(find_model(models, Mode::InputToLabelRationale)?, test)?;
    let pipeline = generated_rationales(find_model(models, Mode::InputToRationale)?, test)?;
    Ok(ExperimentReport {
        name: "label_informedness".into(),
        rows: vec![
            row("R*", rstar, None)?,
            row("I->OR", accuracy_on_rationales(ro, test, &joint)?, Some(rstar.0))?,
            row("I->R", accuracy_on_rationales(ro, test, &pipeline)?, Some(rstar.0))?,
        ],
    })
}

/// R->O against IR->O, both reading the reference rationale.
pub fn sufficiency_gap(models: &[&TrainedModel], test: &[RationalizedInstance]) -> Result<ExperimentReport> {
    let gold: Vec<Option<Vec<String>>> = test.iter().map(|i| Some(i.gold_rationale.clone())).collect();
    let ro = accuracy_on_rationales(find_model(models, Mode::RationaleToLabel)?, test, &gold)?;
    let iro = accuracy_on_rationales(find_model(models, Mode::InputRationaleToLabel)?, test, &gold)?;
    Ok(ExperimentReport {
        name: "sufficiency_gap".into(),
        rows: vec![row("R->O", ro, None)?, row("IR->O", iro, Some(ro.0))?],
    })
}
