//! Maximum-likelihood training with Adam, global-norm clipping and early
//! stopping on dev loss, plus the trained-model wrapper used everywhere
//! downstream.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decode::{greedy_decode, shift_right, ForwardTrace, NoiseSample};
use super::network::log_softmax;
use super::params::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::format::{parse_label, parse_output, source_for, target_for, Mode, TaskFormat};
use crate::instance::RationalizedInstance;
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub max_decode_len: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 16,
            max_epochs: 40,
            patience: 4,
            seed: 13,
            max_decode_len: super::DEFAULT_MAX_DECODE_LEN,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.max_decode_len > 0
            && self.clip_norm > 0.0;
        if !positive {
            return Err(Error::Config("training settings must all be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// One serialized (source, target) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

pub fn examples_for(
    instances: &[RationalizedInstance],
    vocab: &Vocab,
    mode: Mode,
    fmt: TaskFormat,
) -> Result<Vec<Example>> {
    instances
        .iter()
        .map(|inst| {
            Ok(Example {
                source: vocab.encode(&source_for(inst, mode, fmt, None)?)?,
                target: vocab.encode(&target_for(inst, mode))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub curve: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub dev_loss: f64,
    /// Label accuracy for label-predicting modes, exact rationale match
    /// for I->R; greedy decoding on the dev split.
    pub dev_accuracy: f64,
}

/// Parameters together with everything needed to serialize inputs and
/// read outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub vocab: Vocab,
    pub params: ModelParams,
    pub mode: Mode,
    pub format: TaskFormat,
    /// Zero for a freshly initialized model.
    pub trained_epochs: usize,
    pub max_decode_len: usize,
}

impl TrainedModel {
    pub fn untrained(vocab: Vocab, params: ModelParams, mode: Mode, format: TaskFormat) -> Self {
        TrainedModel {
            vocab,
            params,
            mode,
            format,
            trained_epochs: 0,
            max_decode_len: super::DEFAULT_MAX_DECODE_LEN,
        }
    }

    pub fn ensure_trained(&self) -> Result<()> {
        if self.trained_epochs == 0 {
            return Err(Error::State(format!("{} model has never been trained", self.mode)));
        }
        Ok(())
    }

    /// Source ids for `inst`; `rationale` replaces the gold rationale for
    /// the rationale-reading modes.
    pub fn source_ids(&self, inst: &RationalizedInstance, rationale: Option<&[String]>) -> Result<Vec<TokenId>> {
        self.vocab.encode(&source_for(inst, self.mode, self.format, rationale)?)
    }

    pub fn decode_ids(&self, ids: &[TokenId], noise: Option<&NoiseSample>) -> Result<ForwardTrace> {
        greedy_decode(&self.params, ids, noise, self.max_decode_len)
    }

    /// Clean greedy decode, as tokens.
    pub fn generate(&self, inst: &RationalizedInstance, rationale: Option<&[String]>) -> Result<Vec<String>> {
        let trace = self.decode_ids(&self.source_ids(inst, rationale)?, None)?;
        Ok(self.vocab.decode(&trace.decoded))
    }

    /// Label read off a decoded sequence; `None` when an I->OR emission
    /// does not parse. Meaningless for I->R.
    pub fn read_label(&self, raw: &[String]) -> Option<Vec<String>> {
        match self.mode {
            Mode::InputToLabelRationale => parse_output(raw).ok().map(|o| o.label_tokens),
            _ => Some(parse_label(raw)),
        }
    }
}

/// Mean per-token cross-entropy and its gradient, accumulated into `grad`
/// scaled by `weight`.
fn example_loss(params: &ModelParams, ex: &Example, weight: f64, grad: Option<&mut ModelParams>) -> f64 {
    let x = params.embed(&ex.source);
    let pass = params.forward(&x, &shift_right(&ex.target));
    let logp = log_softmax(&pass.logits);
    let loss: f64 = ex.target.iter().enumerate().map(|(k, &t)| -logp[[k, t]]).sum();
    if let Some(grad) = grad {
        let mut dlogits = logp.mapv(f64::exp);
        for (k, &t) in ex.target.iter().enumerate() {
            dlogits[[k, t]] -= 1.0;
        }
        dlogits *= weight;
        let dx = params.backward(&pass, &dlogits, grad);
        params.accumulate_embedding_grad(grad, &ex.source, &dx);
    }
    loss
}

fn mean_loss(params: &ModelParams, examples: &[Example]) -> f64 {
    let tokens: usize = examples.iter().map(|e| e.target.len()).sum();
    let total: f64 = examples.iter().map(|e| example_loss(params, e, 0.0, None)).sum();
    total / tokens.max(1) as f64
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ModelParams) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let grads = grad.tensors();
        for (((p, m), v), (_, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads)
        {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Fraction of dev instances the model gets right under greedy decoding.
pub fn dev_accuracy(model: &TrainedModel, dev: &[RationalizedInstance]) -> Result<f64> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for inst in dev {
        let raw = model.generate(inst, None)?;
        let ok = match model.mode {
            Mode::InputToRationale => parse_label(&raw) == inst.gold_rationale,
            _ => model.read_label(&raw).as_ref() == Some(&inst.gold_label),
        };
        correct += ok as usize;
    }
    Ok(correct as f64 / dev.len() as f64)
}

/// Trains a fresh model of `model_cfg` shape on `train_set` in `mode`,
/// early-stopping on `dev_set` loss. The best-dev-loss parameters are kept.
pub fn train(
    train_set: &[RationalizedInstance],
    dev_set: &[RationalizedInstance],
    vocab: &Vocab,
    mode: Mode,
    fmt: TaskFormat,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Data("training needs non-empty train and dev sets".into()));
    }
    if model_cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary size {} differs from vocabulary ({})",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    let train_ex = examples_for(train_set, vocab, mode, fmt)?;
    let dev_ex = examples_for(dev_set, vocab, mode, fmt)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(model_cfg, cfg.seed);
    let mut adam = Adam::new(&params);
    let mut grad = params.zeros_like();
    let mut order: Vec<usize> = (0..train_ex.len()).collect();

    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut curve = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grad.scale(0.0);
            let n_tok: usize = batch.iter().map(|&i| train_ex[i].target.len()).sum();
            let w = 1.0 / n_tok as f64;
            for &i in batch {
                total += example_loss(&params, &train_ex[i], w, Some(&mut grad));
            }
            tokens += n_tok;
            let norm = grad.l2_norm();
            if !norm.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    loss: total / tokens as f64,
                });
            }
            if norm > cfg.clip_norm {
                grad.scale(cfg.clip_norm / norm);
            }
            adam.step(&mut params, &grad, cfg.learning_rate);
        }
        let train_loss = total / tokens as f64;
        let dev_loss = mean_loss(&params, &dev_ex);
        if !train_loss.is_finite() || !dev_loss.is_finite() || !params.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                loss: train_loss,
            });
        }
        curve.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
        });
        if dev_loss < best.0 {
            best = (dev_loss, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (dev_loss, best_epoch, params) = best;
    let model = TrainedModel {
        vocab: vocab.clone(),
        params,
        mode,
        format: fmt,
        trained_epochs: curve.len(),
        max_decode_len: cfg.max_decode_len,
    };
    let dev_accuracy = dev_accuracy(&model, dev_set)?;
    Ok((
        model,
        TrainReport {
            mode,
            curve,
            best_epoch,
            dev_loss,
            dev_accuracy,
        },
    ))
}

/// Gradient of the mean target cross-entropy with respect to every
/// parameter, for external checks.
pub fn loss_gradient(params: &ModelParams, examples: &[Example]) -> (f64, ModelParams) {
    let tokens: usize = examples.iter().map(|e| e.target.len()).sum();
    let w = 1.0 / tokens as f64;
    let mut grad = params.zeros_like();
    let total: f64 = examples.iter().map(|e| example_loss(params, e, w, Some(&mut grad))).sum();
    (total * w, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::task_vocab;
    use crate::taskgen::{generate_dataset, SufficiencyConfig};

    fn data(n: usize, s: f64) -> Vec<RationalizedInstance> {
        generate_dataset(&SufficiencyConfig { s, seed: 3, n }).unwrap()
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let d = data(3, 0.5);
        let vocab = task_vocab(&d);
        let mut mc = ModelConfig::new(vocab.len());
        mc.d_model = 8;
        mc.d_ff = 12;
        let p = ModelParams::init(&mc, 1);
        let ex = examples_for(&d, &vocab, Mode::InputToLabelRationale, TaskFormat::Qa).unwrap();
        let (_, g) = loss_gradient(&p, &ex);
        let analytic: Vec<Vec<f64>> = g.tensors().iter().map(|(_, t)| t.to_vec()).collect();
        let h = 1e-6;
        for ti in 0..analytic.len() {
            let len = analytic[ti].len();
            for k in (0..len).step_by(1 + len / 5) {
                let mut a = p.clone();
                a.tensors_mut()[ti][k] += h;
                let mut b = p.clone();
                b.tensors_mut()[ti][k] -= h;
                let num = (loss_gradient(&a, &ex).0 - loss_gradient(&b, &ex).0) / (2.0 * h);
                assert!((num - analytic[ti][k]).abs() < 1e-6 * (1.0 + num.abs()), "tensor {ti}[{k}]");
            }
        }
    }

    #[test]
    fn memorizes_ten_instances() {
        let d = data(10, 0.5);
        let vocab = task_vocab(&d);
        let cfg = TrainConfig {
            max_epochs: 200,
            patience: 200,
            batch_size: 10,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (model, report) = train(
            &d,
            &d,
            &vocab,
            Mode::InputToLabelRationale,
            TaskFormat::Qa,
            &ModelConfig::new(vocab.len()),
            &cfg,
        )
        .unwrap();
        let last = report.curve.last().unwrap();
        assert!(report.curve.iter().any(|r| r.train_loss < 0.01), "final {last:?}");
        assert!(model.trained_epochs <= 200);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let d = data(40, 0.5);
        let vocab = task_vocab(&d);
        let cfg = TrainConfig {
            max_epochs: 3,
            patience: 3,
            ..TrainConfig::default()
        };
        let run = || {
            train(
                &d[..30],
                &d[30..],
                &vocab,
                Mode::RationaleToLabel,
                TaskFormat::Qa,
                &ModelConfig::new(vocab.len()),
                &cfg,
            )
            .unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a.params, b.params);
        assert_eq!(ra, rb);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        let d = data(5, 0.5);
        let vocab = task_vocab(&d);
        let mc = ModelConfig::new(vocab.len());
        let cfg = TrainConfig::default();
        let err = train(&[], &d, &vocab, Mode::RationaleToLabel, TaskFormat::Qa, &mc, &cfg).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let bad = TrainConfig {
            patience: 100,
            max_epochs: 10,
            ..cfg
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn untrained_model_is_a_state_error() {
        let d = data(2, 0.5);
        let vocab = task_vocab(&d);
        let p = ModelParams::init(&ModelConfig::new(vocab.len()), 0);
        let m = TrainedModel::untrained(vocab, p, Mode::RationaleToLabel, TaskFormat::Qa);
        assert!(matches!(m.ensure_trained(), Err(Error::State(_))));
    }
}
