//! Acceptance suite. Runs every primary criterion once, prints one line
//! per criterion and fails if any of them fails.
//!
//! Expensive fixtures (trained models) are built once and shared.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rationale_assoc::attribution::{attribute_corpus, CorpusAttribution, SpanAttributions};
use rationale_assoc::checkpoint::save_model;
use rationale_assoc::format::{parse_output, source_for, task_vocab, Mode, TaskFormat};
use rationale_assoc::harness::{label_informedness, sufficiency_gap, train_configs, ConfigSuite, SuiteConfig};
use rationale_assoc::metrics::{cosine, kendall_counts, summarize, TauCounts, DEFAULT_TOP_K};
use rationale_assoc::model::{greedy_decode, input_gradients, span_logit_sum, ModelConfig, ModelParams};
use rationale_assoc::protocol::{RemoteTarget, DEFAULT_HANDSHAKE_TIMEOUT};
use rationale_assoc::robustness::{sweep_and_classify, NoiseConfig, StabilityCase, Thresholds, NOISE_EMBED_SCALE};
use rationale_assoc::target::LocalTarget;
use rationale_assoc::taskgen::{generate_dataset, SufficiencyConfig};
use rationale_assoc::RationalizedInstance;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

// ---------------------------------------------------------------- gradients

/// Central difference of the span logit sum along one input coordinate.
fn central(
    params: &ModelParams,
    x: &mut ndarray::Array2<f64>,
    decoded: &[usize],
    span: &[usize],
    (i, j): (usize, usize),
    h: f64,
) -> f64 {
    let orig = x[[i, j]];
    x[[i, j]] = orig + h;
    let up = span_logit_sum(params, x, decoded, span);
    x[[i, j]] = orig - h;
    let down = span_logit_sum(params, x, decoded, span);
    x[[i, j]] = orig;
    (up - down) / (2.0 * h)
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let data = generate_dataset(&SufficiencyConfig { s: 0.5, seed: 99, n: 200 }).unwrap();
    let vocab = task_vocab(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    let tol = 1e-4;
    let (mut worst, mut worst_five, mut components, mut floored) = (0.0f64, 0.0f64, 0usize, 0usize);
    let mut triples = 0;
    while triples < 100 {
        let scale = [1.0, NOISE_EMBED_SCALE][triples % 2];
        let cfg = ModelConfig {
            embed_scale: scale,
            tie_embeddings: triples % 3 == 0,
            ..ModelConfig::new(vocab.len())
        };
        let params = ModelParams::init(&cfg, rng.gen());
        let inst = &data[rng.gen_range(0..data.len())];
        let input = source_for(inst, Mode::InputToLabelRationale, TaskFormat::Qa, None).unwrap();
        let ids = vocab.encode(&input).unwrap();
        let trace = greedy_decode(&params, &ids, None, 16).unwrap();
        let m = trace.len();
        let cut = rng.gen_range(0..m);
        let span: Vec<usize> = match triples % 3 {
            0 => (0..=cut).collect(),
            1 => (cut..m).collect(),
            _ => (0..m).collect(),
        };
        let analytic = input_gradients(&params, &trace, &span).unwrap();
        let mut x = trace.x.clone();
        let f = span_logit_sum(&params, &x, &trace.decoded, &span);
        // rounding in f(x +- h) alone perturbs the quotient by about eps |f| / h
        let noise = 10.0 * f64::EPSILON * f.abs().max(1.0) / h;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let a = analytic[[i, j]];
                let fd = central(&params, &mut x, &trace.decoded, &span, (i, j), h);
                let mag = a.abs().max(fd.abs());
                floored += (tol * mag < noise) as usize;
                worst = worst.max((a - fd).abs() / mag.max(noise / tol));
                components += 1;
                if components % 5 != 0 {
                    continue;
                }
                // fourth-order stencil at a wider step, far above the rounding floor
                let w = 1e-3;
                let c1 = central(&params, &mut x, &trace.decoded, &span, (i, j), w);
                let c2 = central(&params, &mut x, &trace.decoded, &span, (i, j), 2.0 * w);
                let five = (4.0 * c1 - c2) / 3.0;
                worst_five = worst_five.max((a - five).abs() / a.abs().max(five.abs()).max(1e-12));
            }
        }
        triples += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "gradient exactness",
        worst < tol && worst_five < tol && secs < 120.0,
        format!(
            "{triples} triples, {components} components; h=1e-5 max rel err {worst:.2e} \
             ({floored} components below the rounding floor); 5-point h=1e-3 on every 5th component max rel err {worst_five:.2e}; {secs:.1}s"
        ),
    )
}

// ------------------------------------------------------------------ metrics

fn brute_tau(a: &[f64], b: &[f64]) -> TauCounts {
    let n = a.len();
    let (mut score, mut ties_a, mut ties_b) = (0i64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            ties_a += (da == 0.0) as u64;
            ties_b += (db == 0.0) as u64;
            if da != 0.0 && db != 0.0 {
                score += if (da > 0.0) == (db > 0.0) { 1 } else { -1 };
            }
        }
    }
    TauCounts {
        score,
        pairs: (n * (n - 1) / 2) as u64,
        ties_a,
        ties_b,
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut mismatches, mut cos_violations, mut tied) = (0, 0, 0);
    for t in 0..1000 {
        let n = rng.gen_range(2..60);
        let with_ties = t % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if with_ties {
                rng.gen_range(-3..=3) as f64 * 0.5
            } else {
                rng.gen_range(-1.0..1.0)
            }
        };
        let a: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let fast = kendall_counts(&a, &b).unwrap();
        let slow = brute_tau(&a, &b);
        tied += (slow.ties_a + slow.ties_b > 0) as usize;
        let same_tau = match (fast.tau_b(), slow.tau_b()) {
            (Ok(x), Ok(y)) => x.to_bits() == y.to_bits() && (-1.0..=1.0).contains(&x),
            (Err(_), Err(_)) => true,
            _ => false,
        };
        mismatches += (fast != slow || !same_tau) as usize;
        if let (Ok(raw), Ok(abs)) = (cosine(&a, &b, false), cosine(&a, &b, true)) {
            cos_violations += (abs < raw.abs()) as usize;
        }
    }
    report(
        "metric oracle equivalence",
        mismatches == 0 && cos_violations == 0,
        format!("1000 vector pairs ({tied} with ties): {mismatches} tau mismatches, {cos_violations} cosine violations"),
    )
}

// ------------------------------------------------------- trained fixtures

/// I->OR and R->O trained for the noise experiments, and the held-out
/// instances they are measured on.
fn noise_models() -> (ConfigSuite, Vec<RationalizedInstance>) {
    let data = generate_dataset(&SufficiencyConfig { s: 0.5, seed: 13, n: 5000 }).unwrap();
    let cfg = SuiteConfig {
        embed_scale: NOISE_EMBED_SCALE,
        ..SuiteConfig::default()
    };
    let suite = train_configs(&data, &cfg, &[Mode::InputToLabelRationale, Mode::RationaleToLabel]).unwrap();
    let test = suite.dev.clone();
    (suite, test)
}

fn decomposition_identity(suite: &ConfigSuite, test: &[RationalizedInstance]) -> Outcome {
    let model = suite.model(Mode::InputToLabelRationale).unwrap();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for inst in test {
        let ids = model.source_ids(inst, None).unwrap();
        let trace = model.decode_ids(&ids, None).unwrap();
        let Ok(parsed) = parse_output(&model.vocab.decode(&trace.decoded)) else {
            skipped += 1;
            continue;
        };
        match SpanAttributions::compute(&model.params, &trace, &parsed) {
            Ok(a) => {
                worst = worst.max(a.identity_deviation());
                checked += 1;
            }
            Err(_) => skipped += 1,
        }
    }
    report(
        "decomposition identity",
        checked > 0 && worst <= 1e-12,
        format!("{checked} instances, max rel deviation {worst:.2e} ({skipped} without a parseable rationale)"),
    )
}

fn robustness(suite: &ConfigSuite, test: &[RationalizedInstance]) -> Outcome {
    let mut target = LocalTarget::new(suite.model(Mode::InputToLabelRationale).unwrap().clone());
    let evaluator = suite.model(Mode::RationaleToLabel).unwrap();
    let cfg = NoiseConfig {
        base_seed: 13,
        ..NoiseConfig::default()
    };
    let rep = sweep_and_classify(&mut target, evaluator, test, &cfg, Thresholds::default()).unwrap();
    let zero = &rep.rows[0];
    let top = rep.rows.last().unwrap();
    let trend = rep.flip_trend().unwrap();
    let chance = 100.0 / 3.0;
    let curve: Vec<String> = rep
        .rows
        .iter()
        .map(|r| format!("{}:{:.1}%/{:.2}", r.sigma2, 100.0 * r.accuracy, r.flip_rate))
        .collect();
    report(
        "robustness sanity",
        zero.flip_rate == 0.0
            && zero.proxy_drop == 0.0
            && zero.case == StabilityCase::Case1
            && test.len() >= 500
            && (100.0 * top.accuracy - chance).abs() <= 10.0
            && trend >= 0.8,
        format!(
            "n={}, sigma2=0 flips {} drop {:.1} {:?}; sigma2={} accuracy {:.2}% (chance {chance:.2}); flip/sigma2 spearman {trend:.3}; [{}]",
            test.len(),
            zero.flip_rate,
            zero.proxy_drop,
            zero.case,
            top.sigma2,
            100.0 * top.accuracy,
            curve.join(" ")
        ),
    )
}

fn label_informedness_direction() -> Outcome {
    let mut gaps = Vec::new();
    for seed in [13, 14, 15] {
        let data = generate_dataset(&SufficiencyConfig { s: 1.0, seed, n: 1200 }).unwrap();
        let cfg = SuiteConfig {
            seed,
            ..SuiteConfig::default()
        };
        let modes = [Mode::InputToLabelRationale, Mode::InputToRationale, Mode::RationaleToLabel];
        let suite = train_configs(&data, &cfg, &modes).unwrap();
        let t = label_informedness(&suite.trained(), &suite.dev).unwrap();
        gaps.push(t.row("I->OR").unwrap().accuracy - t.row("I->R").unwrap().accuracy);
    }
    report(
        "label-informedness direction",
        gaps.iter().all(|g| *g >= 5.0),
        format!("I->OR minus I->R rationale accuracy per seed: {gaps:.2?} points"),
    )
}

fn sufficiency_gap_direction() -> Outcome {
    let mut deltas = Vec::new();
    for s in [0.0, 1.0] {
        let data = generate_dataset(&SufficiencyConfig { s, seed: 13, n: 1200 }).unwrap();
        let modes = [Mode::RationaleToLabel, Mode::InputRationaleToLabel];
        let suite = train_configs(&data, &SuiteConfig::default(), &modes).unwrap();
        let t = sufficiency_gap(&suite.trained(), &suite.dev).unwrap();
        deltas.push(t.row("IR->O").unwrap().delta.unwrap());
    }
    report(
        "sufficiency-gap direction",
        deltas[0] >= 20.0 && deltas[1].abs() <= 5.0,
        format!("IR->O minus R->O: s=0 {:+.2}, s=1 {:+.2}", deltas[0], deltas[1]),
    )
}

fn metric_ranges(corpus: &CorpusAttribution, dir: &Path) -> Outcome {
    let ln2 = std::f64::consts::LN_2 + 1e-12;
    let bad = corpus
        .records
        .iter()
        .filter(|r| {
            !((0.0..=ln2).contains(&r.jsd_label_uniform)
                && (0.0..=ln2).contains(&r.jsd_rationale_uniform)
                && (-1.0..=1.0).contains(&r.kendall_tau_raw)
                && (-1.0..=1.0).contains(&r.kendall_tau_abs)
                && (-1.0..=1.0).contains(&r.cosine_raw)
                && (0.0..=1.0).contains(&r.cosine_abs)
                && r.cosine_abs >= r.cosine_raw.abs() - 1e-12
                && r.topk_overlap <= DEFAULT_TOP_K
                && r.check_ranges().is_ok())
        })
        .count();
    let summary = summarize(&corpus.records, corpus.parse_failures).unwrap();
    let path = dir.join("histograms.csv");
    summary
        .write_histograms_csv(std::fs::File::create(&path).unwrap())
        .unwrap();
    let csv = std::fs::read_to_string(&path).unwrap();
    let families = ["kendall_tau", "cosine", "topk_overlap", "jsd"];
    let missing: Vec<&str> = families
        .iter()
        .copied()
        .filter(|f| !csv.lines().any(|l| l.starts_with(f)))
        .collect();
    let binned_ok = summary
        .histograms
        .iter()
        .all(|h| h.counts.iter().sum::<usize>() == corpus.records.len());
    report(
        "sanity-metric ranges",
        bad == 0 && missing.is_empty() && binned_ok && !corpus.records.is_empty(),
        format!(
            "{} records, {bad} out of range; histogram families missing: {missing:?}; jsd label mean {:.3}, tau raw mean {:.3}",
            corpus.records.len(),
            summary.jsd_label_uniform.mean,
            summary.kendall_tau_raw.mean
        ),
    )
}

fn loopback_parity(suite: &ConfigSuite, test: &[RationalizedInstance], dir: &Path) -> Outcome {
    let model = suite.model(Mode::InputToLabelRationale).unwrap();
    let evaluator = suite.model(Mode::RationaleToLabel).unwrap();
    let ckpt = dir.join("i_or.ckpt");
    save_model(&ckpt, model).unwrap();
    let command = format!("{} serve --checkpoint {}", env!("CARGO_BIN_EXE_rassoc"), ckpt.display());
    let cfg = NoiseConfig {
        base_seed: 5,
        ..NoiseConfig::default()
    };
    let subset = &test[..300.min(test.len())];

    let render = |target: &mut dyn rationale_assoc::target::MeasurementTarget| -> Vec<u8> {
        let mut out = Vec::new();
        let sweep = sweep_and_classify(target, evaluator, subset, &cfg, Thresholds::default()).unwrap();
        sweep.write_csv(&mut out).unwrap();
        out.extend(serde_json::to_vec(&sweep).unwrap());
        let corpus = attribute_corpus(target, subset, TaskFormat::Qa, DEFAULT_TOP_K).unwrap();
        rationale_assoc::metrics::write_records_csv(&mut out, &corpus.records).unwrap();
        rationale_assoc::attribution::write_dump(&mut out, &corpus.dump).unwrap();
        let summary = summarize(&corpus.records, corpus.parse_failures).unwrap();
        summary.write_csv(&mut out).unwrap();
        summary.write_histograms_csv(&mut out).unwrap();
        out
    };
    let local = render(&mut LocalTarget::new(model.clone()));
    let mut remote = RemoteTarget::spawn(&command, DEFAULT_HANDSHAKE_TIMEOUT).unwrap();
    let wire = render(&mut remote);
    report(
        "loopback parity",
        local == wire,
        format!(
            "{} instances, {} report bytes, in-process vs `rassoc serve` {}",
            subset.len(),
            local.len(),
            if local == wire { "identical" } else { "differ" }
        ),
    )
}

fn main() {
    // `cargo test --test acceptance -- robust` runs the matching criteria only
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let want = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut outcomes = Vec::new();
    if want("gradient exactness") {
        outcomes.push(gradient_exactness());
    }
    if want("metric oracle equivalence") {
        outcomes.push(metric_oracle());
    }
    let trained = ["decomposition identity", "robustness sanity", "sanity-metric ranges", "loopback parity"];
    if trained.iter().any(|n| want(n)) {
        let (suite, test) = noise_models();
        if want(trained[0]) {
            outcomes.push(decomposition_identity(&suite, &test));
        }
        if want(trained[1]) {
            outcomes.push(robustness(&suite, &test));
        }
        if want(trained[2]) {
            let mut target = LocalTarget::new(suite.model(Mode::InputToLabelRationale).unwrap().clone());
            let corpus = attribute_corpus(&mut target, &test, TaskFormat::Qa, DEFAULT_TOP_K).unwrap();
            outcomes.push(metric_ranges(&corpus, dir.path()));
        }
        if want(trained[3]) {
            outcomes.push(loopback_parity(&suite, &test, dir.path()));
        }
    }
    if want("label-informedness direction") {
        outcomes.push(label_informedness_direction());
    }
    if want("sufficiency-gap direction") {
        outcomes.push(sufficiency_gap_direction());
    }

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        outcomes.len() - failed.len(),
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        for o in &failed {
            eprintln!("failed: {} ({})", o.name, o.detail);
        }
        std::process::exit(1);
    }
}
