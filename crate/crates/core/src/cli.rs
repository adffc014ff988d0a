//! The `rassoc` command line: dataset generation, training, noise sweeps,
//! attribution runs, the pipeline-versus-joint tables, and a protocol
//! server for the built-in model.
//!
//! Every command writes a `manifest.json` next to its outputs listing the
//! arguments, seeds and SHA-256 of every input and output file. `rassoc
//! rerun <manifest>` runs the same command again.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{attribute_corpus, write_dump};
use crate::checkpoint::{load_model, save_model};
use crate::error::{Error, Result};
use crate::format::{task_vocab, Mode, TaskFormat};
use crate::harness::{label_informedness, sufficiency_gap};
use crate::instance::{load_dataset, save_dataset, RationalizedInstance};
use crate::metrics::{summarize, write_records_csv, DEFAULT_TOP_K};
use crate::model::{train, ModelConfig, TrainConfig, TrainedModel};
use crate::protocol::{serve, RemoteTarget, DEFAULT_HANDSHAKE_TIMEOUT};
use crate::robustness::{sweep_and_classify, NoiseConfig, Thresholds, DEFAULT_SIGMA2_GRID};
use crate::target::{LocalTarget, MeasurementTarget};
use crate::taskgen::{split_dataset, SufficiencyConfig, World};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "rassoc", version, about = "Label-rationale association measurements")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate a synthetic attribute-lookup dataset.
    Gen(GenArgs),
    /// Train models for one or more configurations.
    Train(TrainArgs),
    /// Decode under embedding noise and classify label/rationale stability.
    Sweep(SweepArgs),
    /// Attribute label and rationale logits and compare the attributions.
    Attr(AttrArgs),
    /// Label-informedness and sufficiency tables.
    Tables(TablesArgs),
    /// Serve a checkpoint over the wire protocol on stdin/stdout.
    Serve(ServeArgs),
    /// Run the command recorded in a manifest again.
    Rerun(RerunArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    #[arg(long, default_value_t = 1200)]
    pub n: usize,
    /// Fraction of instances with sufficient reference rationales.
    #[arg(long, default_value_t = 0.5)]
    pub sufficiency: f64,
    #[arg(long, default_value_t = World::DEFAULT_ENTITIES)]
    pub entities: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    /// Comma-separated configurations, e.g. `I->OR,R->O`.
    #[arg(long, value_delimiter = ',', default_values_t = Mode::ALL.map(|m| m.to_string()))]
    pub modes: Vec<String>,
    #[arg(long, default_value = "qa")]
    pub format: String,
    #[arg(long, default_value_t = 0.2)]
    pub dev_fraction: f64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub patience: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 64)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 1.0)]
    pub embed_scale: f64,
}

/// Where the measured I->OR model comes from.
#[derive(Debug, Args, Serialize)]
pub struct TargetArgs {
    /// Directory holding the checkpoints written by `train`.
    #[arg(long)]
    pub checkpoint_dir: PathBuf,
    /// `builtin` for the I->OR checkpoint, or `spawn:<command>` for a
    /// protocol server.
    #[arg(long, default_value = "builtin")]
    pub target: String,
    #[arg(long, default_value_t = DEFAULT_HANDSHAKE_TIMEOUT.as_secs_f64())]
    pub handshake_timeout: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub target: TargetArgs,
    /// Seeds the noise draws.
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIGMA2_GRID.to_vec())]
    pub sigma2_grid: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Largest flip rate still counted as a stable label.
    #[arg(long, default_value_t = 0.10)]
    pub theta_label: f64,
    /// Largest proxy-accuracy drop in points still counted as a stable
    /// rationale.
    #[arg(long, default_value_t = 10.0)]
    pub theta_rationale: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct AttrArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub target: TargetArgs,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    /// Recorded in the manifest; attribution itself draws no randomness.
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TablesArgs {
    /// Held-out instances, e.g. the `dev.jsonl` written by `train`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, enough to run the command again.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written, by file name within the output
    /// directory.
    pub artifacts: BTreeMap<String, String>,
    pub toolkit_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(format!("{digest:x}"))
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Collects what a run read and wrote.
struct Run {
    out_dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    started: u64,
}

impl Run {
    fn start(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        Ok(Run {
            out_dir: out_dir.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: now_unix(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Creates `name` in the output directory and hands a writer to `f`.
    fn write<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let mut w = BufWriter::new(File::create(self.out_dir.join(name))?);
        f(&mut w)?;
        w.flush()?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish<C: Serialize>(self, command: &str, args: &[String], config: &C, seeds: &[(&str, u64)]) -> Result<()> {
        let mut artifacts = BTreeMap::new();
        for name in &self.outputs {
            artifacts.insert(name.clone(), sha256_file(&self.out_dir.join(name))?);
        }
        let manifest = RunManifest {
            command: command.to_string(),
            args: args.to_vec(),
            config: serde_json::to_value(config)?,
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            inputs: self.inputs,
            artifacts,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started,
            finished_unix: now_unix(),
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        fs::write(self.out_dir.join(MANIFEST), json)?;
        Ok(())
    }
}

fn json_to<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// File name of a configuration's checkpoint, e.g. `i_or.ckpt`.
pub fn checkpoint_name(mode: Mode) -> &'static str {
    match mode {
        Mode::InputToLabelRationale => "i_or.ckpt",
        Mode::InputToRationale => "i_r.ckpt",
        Mode::RationaleToLabel => "r_o.ckpt",
        Mode::InputRationaleToLabel => "ir_o.ckpt",
    }
}

fn load_trained(run: &mut Run, dir: &Path, mode: Mode) -> Result<TrainedModel> {
    let path = dir.join(checkpoint_name(mode));
    run.input(&path)?;
    let model = load_model(&path)?;
    if model.mode != mode {
        return Err(Error::Data(format!("{} holds a {} model, expected {mode}", path.display(), model.mode)));
    }
    model.ensure_trained()?;
    Ok(model)
}

fn load_instances(run: &mut Run, path: &Path) -> Result<Vec<RationalizedInstance>> {
    run.input(path)?;
    let data = load_dataset(path)?;
    if data.is_empty() {
        return Err(Error::Data(format!("{} holds no instances", path.display())));
    }
    Ok(data)
}

fn open_target(run: &mut Run, t: &TargetArgs) -> Result<Box<dyn MeasurementTarget>> {
    if t.target == "builtin" {
        let model = load_trained(run, &t.checkpoint_dir, Mode::InputToLabelRationale)?;
        return Ok(Box::new(LocalTarget::new(model)));
    }
    let Some(command) = t.target.strip_prefix("spawn:") else {
        return Err(Error::Config(format!("--target must be `builtin` or `spawn:<command>`, got `{}`", t.target)));
    };
    if !(t.handshake_timeout > 0.0 && t.handshake_timeout.is_finite()) {
        return Err(Error::Config("--handshake-timeout must be positive".into()));
    }
    let timeout = Duration::from_secs_f64(t.handshake_timeout);
    Ok(Box::new(RemoteTarget::spawn(command, timeout)?))
}

fn cmd_gen(a: &GenArgs, argv: &[String]) -> Result<()> {
    let cfg = SufficiencyConfig {
        s: a.sufficiency,
        seed: a.seed,
        n: a.n,
    };
    cfg.validate()?;
    let mut run = Run::start(&a.out_dir)?;
    let data = World::new(a.entities, a.seed)?.generate(&cfg)?;
    save_dataset(&a.out_dir.join("dataset.jsonl"), &data)?;
    run.outputs.push("dataset.jsonl".into());
    run.finish("gen", argv, a, &[("seed", a.seed)])
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let modes = a
        .modes
        .iter()
        .map(|m| m.parse::<Mode>())
        .collect::<Result<Vec<_>>>()?;
    let format: TaskFormat = a.format.parse()?;
    let tc = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        patience: a.patience,
        seed: a.seed,
        ..TrainConfig::default()
    };
    tc.validate()?;
    if !(a.embed_scale > 0.0 && a.embed_scale.is_finite()) || a.d_model == 0 || a.d_ff == 0 {
        return Err(Error::Config("model dimensions and embedding scale must be positive".into()));
    }
    let mut run = Run::start(&a.out_dir)?;
    let data = load_instances(&mut run, &a.dataset)?;
    let (train_set, dev) = split_dataset(&data, a.dev_fraction, a.seed)?;
    let vocab = task_vocab(&data);
    let mc = ModelConfig {
        d_model: a.d_model,
        d_ff: a.d_ff,
        embed_scale: a.embed_scale,
        ..ModelConfig::new(vocab.len())
    };
    run.write("train.jsonl", |w| crate::instance::write_jsonl(w, &train_set))?;
    run.write("dev.jsonl", |w| crate::instance::write_jsonl(w, &dev))?;
    let mut reports = Vec::new();
    for mode in modes {
        let (model, report) = train(&train_set, &dev, &vocab, mode, format, &mc, &tc)?;
        save_model(&a.out_dir.join(checkpoint_name(mode)), &model)?;
        run.outputs.push(checkpoint_name(mode).into());
        reports.push(report);
    }
    run.write("train_curves.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["config", "epoch", "train_loss", "dev_loss"])?;
        for r in &reports {
            for e in &r.curve {
                c.write_record([
                    r.mode.to_string(),
                    e.epoch.to_string(),
                    format!("{:.17e}", e.train_loss),
                    format!("{:.17e}", e.dev_loss),
                ])?;
            }
        }
        c.flush()?;
        Ok(())
    })?;
    run.write("train_summary.json", |w| json_to(w, &reports))?;
    run.finish("train", argv, a, &[("seed", a.seed)])
}

fn cmd_sweep(a: &SweepArgs, argv: &[String]) -> Result<()> {
    let cfg = NoiseConfig {
        sigma2_grid: a.sigma2_grid.clone(),
        base_seed: a.seed,
        samples_per_instance: a.samples,
    };
    cfg.validate()?;
    let thresholds = Thresholds {
        label: a.theta_label,
        rationale: a.theta_rationale,
    };
    let mut run = Run::start(&a.out_dir)?;
    let data = load_instances(&mut run, &a.dataset)?;
    let evaluator = load_trained(&mut run, &a.target.checkpoint_dir, Mode::RationaleToLabel)?;
    let mut target = open_target(&mut run, &a.target)?;
    let report = sweep_and_classify(target.as_mut(), &evaluator, &data, &cfg, thresholds)?;
    run.write("sweep.csv", |w| report.write_csv(w))?;
    run.write("sweep_summary.json", |w| {
        let trend = report.flip_trend().ok();
        json_to(w, &serde_json::json!({ "report": report, "flip_rate_spearman": trend }))
    })?;
    run.finish("sweep", argv, a, &[("noise", a.seed)])
}

fn cmd_attr(a: &AttrArgs, argv: &[String]) -> Result<()> {
    if a.top_k == 0 {
        return Err(Error::Config("--top-k must be positive".into()));
    }
    let mut run = Run::start(&a.out_dir)?;
    let data = load_instances(&mut run, &a.dataset)?;
    let mut target = open_target(&mut run, &a.target)?;
    let format = data[0].premise.as_ref().map_or(TaskFormat::Qa, |_| TaskFormat::Nli);
    let result = attribute_corpus(target.as_mut(), &data, format, a.top_k)?;
    let summary = summarize(&result.records, result.parse_failures)?;
    run.write("attributions.jsonl", |w| write_dump(w, &result.dump))?;
    run.write("association.csv", |w| write_records_csv(w, &result.records))?;
    run.write("summary.csv", |w| summary.write_csv(w))?;
    run.write("histograms.csv", |w| summary.write_histograms_csv(w))?;
    run.write("summary.json", |w| {
        json_to(
            w,
            &serde_json::json!({ "summary": summary, "target": target.capabilities() }),
        )
    })?;
    run.finish("attr", argv, a, &[("seed", a.seed)])
}

fn cmd_tables(a: &TablesArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::start(&a.out_dir)?;
    let test = load_instances(&mut run, &a.dataset)?;
    let models = Mode::ALL
        .iter()
        .map(|&m| load_trained(&mut run, &a.checkpoint_dir, m))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TrainedModel> = models.iter().collect();
    let informed = label_informedness(&refs, &test)?;
    let gap = sufficiency_gap(&refs, &test)?;
    run.write("label_informedness.csv", |w| informed.write_csv(w))?;
    run.write("sufficiency_gap.csv", |w| gap.write_csv(w))?;
    run.write("tables.json", |w| json_to(w, &[&informed, &gap]))?;
    run.finish("tables", argv, a, &[("seed", a.seed)])
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let mut target = LocalTarget::new(model);
    let stdin = io::stdin();
    serve(&mut target, stdin.lock(), io::stdout().lock())
}

/// Runs one parsed command; `argv` excludes the program name.
pub fn execute(command: &Command, argv: &[String]) -> Result<()> {
    match command {
        Command::Gen(a) => cmd_gen(a, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Sweep(a) => cmd_sweep(a, argv),
        Command::Attr(a) => cmd_attr(a, argv),
        Command::Tables(a) => cmd_tables(a, argv),
        Command::Serve(a) => cmd_serve(a),
        Command::Rerun(a) => {
            let m = read_manifest(&a.manifest)?;
            let cli = parse(&m.args).map_err(|e| Error::Config(format!("manifest arguments do not parse: {e}")))?;
            if matches!(cli.command, Command::Rerun(_)) {
                return Err(Error::Config("a manifest cannot record a rerun".into()));
            }
            execute(&cli.command, &m.args)
        }
    }
}

fn parse(argv: &[String]) -> std::result::Result<Cli, clap::Error> {
    Cli::try_parse_from(std::iter::once("rassoc".to_string()).chain(argv.iter().cloned()))
}

/// Exit code: 0 on success, 1 on usage errors, 2 on data or model errors.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_usage() {
        1
    } else {
        2
    }
}

/// Entry point of the `rassoc` binary.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let argv: Vec<String> = args
        .into_iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let cli = match parse(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
