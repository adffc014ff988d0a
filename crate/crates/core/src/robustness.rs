//! Do label and rationale degrade together when the encoder input
//! embeddings are perturbed with Gaussian noise?
//!
//! Label change is measured by flips against the clean prediction. Change
//! in rationale meaning is proxied by a frozen R->O model: how often it
//! still recovers the gold label from the perturbed rationale.

use std::fmt;
use std::io::Write;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{parse_label, parse_output, source_for, Mode};
use crate::instance::RationalizedInstance;
use crate::metrics::spearman;
use crate::model::{NoiseSample, TrainedModel};
use crate::target::{MeasurementTarget, NoiseRequest, TargetCapabilities};

pub const DEFAULT_SIGMA2_GRID: [f64; 7] = [0.0, 5.0, 10.0, 15.0, 20.0, 30.0, 50.0];

/// Embedding multiplier (see [`ModelConfig::embed_scale`]) that puts the
/// default grid on the scale of the embeddings. With unit-scale
/// embeddings every nonzero level already drowns the input.
///
/// [`ModelConfig::embed_scale`]: crate::model::ModelConfig::embed_scale
pub const NOISE_EMBED_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma2_grid: Vec<f64>,
    pub base_seed: u64,
    pub samples_per_instance: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma2_grid: DEFAULT_SIGMA2_GRID.to_vec(),
            base_seed: 0,
            samples_per_instance: 1,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma2_grid.first() != Some(&0.0) {
            return Err(Error::Config("noise grid must start at 0".into()));
        }
        if self.sigma2_grid.iter().any(|v| !v.is_finite()) || self.sigma2_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("noise grid must be finite and strictly ascending".into()));
        }
        if self.samples_per_instance == 0 {
            return Err(Error::Config("need at least one noise sample per instance".into()));
        }
        Ok(())
    }
}

/// `n`×`d` matrix of iid N(0, sigma2) draws, row-major from `seed`.
pub fn noise_sample(n: usize, d: usize, sigma2: f64, seed: u64) -> Result<NoiseSample> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::Config(format!("noise variance {sigma2} must be finite and non-negative")));
    }
    let normal = Normal::new(0.0, sigma2.sqrt()).expect("standard deviation is finite and non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(NoiseSample(Array2::from_shape_simple_fn((n, d), || normal.sample(&mut rng))))
}

/// `x` plus seeded Gaussian noise; `sigma2 = 0` returns `x` unchanged.
pub fn perturb(x: &Array2<f64>, sigma2: f64, seed: u64) -> Result<Array2<f64>> {
    let NoiseSample(noise) = noise_sample(x.nrows(), x.ncols(), sigma2, seed)?;
    if sigma2 == 0.0 {
        return Ok(x.clone());
    }
    Ok(x + &noise)
}

/// Seed for one (instance, grid level, sample) decode, independent of
/// the order in which decodes run.
pub fn instance_seed(base_seed: u64, instance_id: &str, level: usize, sample: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update((instance_id.len() as u64).to_le_bytes());
    h.update(instance_id.as_bytes());
    h.update((level as u64).to_le_bytes());
    h.update((sample as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipStats {
    pub flips: usize,
    /// Perturbed predictions that are not one of the answer choices
    /// (these always count as flips unless the clean prediction was the
    /// same string).
    pub out_of_choices: usize,
    pub correct: usize,
    pub total: usize,
    pub flip_rate: f64,
    pub accuracy: f64,
}

/// Flips are changes from the clean prediction, whatever the new output
/// is. `None` marks an unparseable decode: it differs from every label
/// and is never correct.
pub fn flip_stats(
    original: &[Option<Vec<String>>],
    perturbed: &[Option<Vec<String>>],
    instances: &[RationalizedInstance],
) -> Result<FlipStats> {
    if original.len() != perturbed.len() {
        return Err(Error::Align {
            left: original.len(),
            right: perturbed.len(),
        });
    }
    if original.len() != instances.len() {
        return Err(Error::Align {
            left: original.len(),
            right: instances.len(),
        });
    }
    let mut s = FlipStats {
        flips: 0,
        out_of_choices: 0,
        correct: 0,
        total: original.len(),
        flip_rate: 0.0,
        accuracy: 0.0,
    };
    for ((o, p), inst) in original.iter().zip(perturbed).zip(instances) {
        s.flips += (o != p) as usize;
        match p {
            Some(label) => {
                s.correct += (*label == inst.gold_label) as usize;
                s.out_of_choices += (!inst.choices.contains(label)) as usize;
            }
            None => s.out_of_choices += 1,
        }
    }
    if s.total > 0 {
        s.flip_rate = s.flips as f64 / s.total as f64;
        s.accuracy = s.correct as f64 / s.total as f64;
    }
    Ok(s)
}

/// Accuracy of a frozen R->O model fed the given rationales. A missing
/// rationale counts as a wrong prediction.
pub fn meaning_proxy(
    rationales: &[Option<Vec<String>>],
    evaluator: &TrainedModel,
    instances: &[RationalizedInstance],
) -> Result<f64> {
    evaluator.ensure_trained()?;
    if evaluator.mode != Mode::RationaleToLabel {
        return Err(Error::State(format!("proxy evaluator must be R->O, got {}", evaluator.mode)));
    }
    if rationales.len() != instances.len() {
        return Err(Error::Align {
            left: rationales.len(),
            right: instances.len(),
        });
    }
    if instances.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (r, inst) in rationales.iter().zip(instances) {
        if let Some(r) = r {
            correct += (parse_label(&evaluator.generate(inst, Some(r))?) == inst.gold_label) as usize;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StabilityCase {
    /// Stable label, stable rationale.
    Case1,
    /// Unstable label, unstable rationale.
    Case2,
    /// Stable label, unstable rationale.
    Case3,
    /// Unstable label, stable rationale.
    Case4,
}

impl fmt::Display for StabilityCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StabilityCase::Case1 => "case1",
            StabilityCase::Case2 => "case2",
            StabilityCase::Case3 => "case3",
            StabilityCase::Case4 => "case4",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Largest flip rate (fraction) still called a stable label.
    pub label: f64,
    /// Largest proxy-accuracy drop (percentage points) still called a
    /// stable rationale.
    pub rationale: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            label: 0.10,
            rationale: 10.0,
        }
    }
}

pub fn classify(flip_rate: f64, proxy_drop_points: f64, t: Thresholds) -> StabilityCase {
    match (flip_rate <= t.label, proxy_drop_points <= t.rationale) {
        (true, true) => StabilityCase::Case1,
        (false, false) => StabilityCase::Case2,
        (true, false) => StabilityCase::Case3,
        (false, true) => StabilityCase::Case4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma2: f64,
    pub accuracy: f64,
    pub flip_rate: f64,
    pub proxy_accuracy: f64,
    /// Clean proxy accuracy minus this row's, in percentage points.
    pub proxy_drop: f64,
    pub parse_failures: usize,
    pub out_of_choices: usize,
    pub case: StabilityCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub rows: Vec<SweepRow>,
    /// Proxy accuracy on the reference rationales.
    pub proxy_accuracy_rstar: f64,
    /// Proxy accuracy on the clean generated rationales.
    pub proxy_accuracy_clean: f64,
    pub instances: usize,
    pub samples_per_instance: usize,
    pub thresholds: Thresholds,
    /// What the measured target declared about itself.
    pub target: TargetCapabilities,
}

impl NoiseSweepReport {
    /// Spearman correlation between the grid and the flip rates.
    pub fn flip_trend(&self) -> Result<f64> {
        let s: Vec<f64> = self.rows.iter().map(|r| r.sigma2).collect();
        let f: Vec<f64> = self.rows.iter().map(|r| r.flip_rate).collect();
        spearman(&s, &f)
    }

    /// Columns `sigma2,accuracy,flip_rate,proxy_accuracy,proxy_accuracy_rstar,case`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sigma2", "accuracy", "flip_rate", "proxy_accuracy", "proxy_accuracy_rstar", "case"])?;
        for r in &self.rows {
            w.write_record([
                format!("{}", r.sigma2),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.flip_rate),
                format!("{:.6}", r.proxy_accuracy),
                format!("{:.6}", self.proxy_accuracy_rstar),
                r.case.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Label and rationale read off an I->OR emission; both `None` when it
/// does not parse.
fn split_emission(raw: &[String]) -> (Option<Vec<String>>, Option<Vec<String>>) {
    match parse_output(raw) {
        Ok(out) => (Some(out.label_tokens), Some(out.rationale_tokens)),
        Err(_) => (None, None),
    }
}

/// Decodes every instance at every grid level through `target` (an I->OR
/// model), scores labels against the clean decode and rationales with
/// the frozen `evaluator`, and classifies each level.
pub fn sweep_and_classify(
    target: &mut dyn MeasurementTarget,
    evaluator: &TrainedModel,
    dataset: &[RationalizedInstance],
    cfg: &NoiseConfig,
    thresholds: Thresholds,
) -> Result<NoiseSweepReport> {
    cfg.validate()?;
    evaluator.ensure_trained()?;
    let caps = target.capabilities().clone();
    if !caps.supports_decode || (!caps.supports_noise && cfg.sigma2_grid.len() > 1) {
        return Err(Error::Config(format!("target `{}` cannot decode under noise", caps.name)));
    }
    let inputs = dataset
        .iter()
        .map(|inst| source_for(inst, Mode::InputToLabelRationale, evaluator.format, None))
        .collect::<Result<Vec<_>>>()?;

    let samples = cfg.samples_per_instance;
    // every (instance, sample) pair is one observation
    let expanded: Vec<RationalizedInstance> = dataset
        .iter()
        .flat_map(|inst| std::iter::repeat(inst.clone()).take(samples))
        .collect();
    let rstar: Vec<Option<Vec<String>>> = dataset.iter().map(|i| Some(i.gold_rationale.clone())).collect();
    let proxy_accuracy_rstar = meaning_proxy(&rstar, evaluator, dataset)?;

    let mut clean_labels = Vec::new();
    let mut proxy_accuracy_clean = 0.0;
    let mut rows = Vec::with_capacity(cfg.sigma2_grid.len());
    for (level, &sigma2) in cfg.sigma2_grid.iter().enumerate() {
        let mut labels = Vec::with_capacity(expanded.len());
        let mut rationales = Vec::with_capacity(expanded.len());
        for (inst, input) in dataset.iter().zip(&inputs) {
            for sample in 0..samples {
                let noise = NoiseRequest {
                    sigma2,
                    seed: instance_seed(cfg.base_seed, &inst.id, level, sample),
                };
                let raw = target.decode(input, Some(noise))?;
                let (l, r) = split_emission(&raw);
                labels.push(l);
                rationales.push(r);
            }
        }
        if level == 0 {
            clean_labels = labels.clone();
        }
        let flips = flip_stats(&clean_labels, &labels, &expanded)?;
        let proxy_accuracy = meaning_proxy(&rationales, evaluator, &expanded)?;
        if level == 0 {
            proxy_accuracy_clean = proxy_accuracy;
        }
        let proxy_drop = 100.0 * (proxy_accuracy_clean - proxy_accuracy);
        rows.push(SweepRow {
            sigma2,
            accuracy: flips.accuracy,
            flip_rate: flips.flip_rate,
            proxy_accuracy,
            proxy_drop,
            parse_failures: labels.iter().filter(|l| l.is_none()).count(),
            out_of_choices: flips.out_of_choices,
            case: classify(flips.flip_rate, proxy_drop, thresholds),
        });
    }
    Ok(NoiseSweepReport {
        rows,
        proxy_accuracy_rstar,
        proxy_accuracy_clean,
        instances: dataset.len(),
        samples_per_instance: samples,
        thresholds,
        target: caps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_is_identity() {
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.37 - 1.0);
        assert_eq!(perturb(&x, 0.0, 99).unwrap(), x);
        assert!(matches!(perturb(&x, -1.0, 0), Err(Error::Config(_))));
        assert_eq!(perturb(&x, 2.0, 5).unwrap(), perturb(&x, 2.0, 5).unwrap());
        assert_ne!(perturb(&x, 2.0, 5).unwrap(), perturb(&x, 2.0, 6).unwrap());
    }

    #[test]
    fn sample_variance() {
        let NoiseSample(n) = noise_sample(1000, 100, 4.0, 17).unwrap();
        let mean = n.mean().unwrap();
        let var = n.mapv(|v| (v - mean).powi(2)).sum() / (n.len() - 1) as f64;
        assert!((3.9..=4.1).contains(&var), "{var}");
    }

    fn inst(gold: &str) -> RationalizedInstance {
        RationalizedInstance {
            id: gold.into(),
            question: vec!["q".into()],
            choices: vec![vec!["have".into()], vec!["fun".into()], vec![gold.into()]],
            gold_label: vec![gold.into()],
            gold_rationale: vec!["r".into()],
            premise: None,
            sufficient: true,
        }
    }

    fn lab(s: &str) -> Option<Vec<String>> {
        Some(vec![s.to_string()])
    }

    #[test]
    fn flips() {
        let insts: Vec<_> = (0..10).map(|i| inst(&format!("g{i}"))).collect();
        let orig: Vec<_> = (0..10).map(|i| lab(&format!("g{i}"))).collect();
        let s = flip_stats(&orig, &orig, &insts).unwrap();
        assert_eq!((s.flip_rate, s.accuracy), (0.0, 1.0));

        let mut pert = orig.clone();
        pert[0] = lab("banana");
        pert[1] = lab("have");
        pert[2] = None;
        let s = flip_stats(&orig, &pert, &insts).unwrap();
        assert_eq!(s.flips, 3);
        assert!((s.flip_rate - 0.3).abs() < 1e-15);
        assert_eq!(s.out_of_choices, 2);
        assert!((s.accuracy - 0.7).abs() < 1e-15);
        assert!(matches!(flip_stats(&orig, &pert[..3], &insts), Err(Error::Align { .. })));
    }

    #[test]
    fn case_thresholds() {
        let t = Thresholds::default();
        assert_eq!(classify(0.0, 0.0, t), StabilityCase::Case1);
        assert_eq!(classify(0.02, 30.0, t), StabilityCase::Case3);
        assert_eq!(classify(0.5, 30.0, t), StabilityCase::Case2);
        assert_eq!(classify(0.5, 2.0, t), StabilityCase::Case4);
    }

    #[test]
    fn grid_validation() {
        let mut c = NoiseConfig::default();
        c.validate().unwrap();
        c.sigma2_grid = vec![5.0, 10.0];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.sigma2_grid = vec![0.0, 10.0, 10.0];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seeds_depend_on_every_part() {
        let s = instance_seed(1, "a", 0, 0);
        assert_eq!(s, instance_seed(1, "a", 0, 0));
        for other in [
            instance_seed(2, "a", 0, 0),
            instance_seed(1, "b", 0, 0),
            instance_seed(1, "a", 1, 0),
            instance_seed(1, "a", 0, 1),
        ] {
            assert_ne!(s, other);
        }
    }
}
