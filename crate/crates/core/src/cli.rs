//! Command-line driver: data generation, training, ISMR, injection,
//! benchmarking and report collection.
//!
//! Every command resolves one [`ExperimentConfig`], writes a
//! [`RunManifest`] before computing anything and marks it complete at the
//! end. Passing a manifest back through `--config` replays the run.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use walkdir::WalkDir;

use crate::bench::{run_scaling, BenchConfig};
use crate::datagen::{
    derive_seed, gen_corpus, make_injection_set, write_corpus, Corpus, CorpusSizes, GrammarSpec, ReorderRule,
    SyntheticLexicon,
};
use crate::models::{
    init_model, load_checkpoint, save_checkpoint, save_map, Arch, MapSource, ModelConfig,
};
use crate::protocols::{
    concept_breakdown, injection_summary, ismr_table, run_injection, run_ismr, InjectionConfig, InjectionRun, Setup,
};
use crate::training::{eval_loss, train, MetricsRecord, TrainConfig};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configuration or inputs. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while computing or writing results. Exit code 1.
    #[error("{0}")]
    Compute(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Compute(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn compute<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Compute(format!("{context}: {e}"))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Content words per side.
    pub content_vocab: usize,
    pub rule: ReorderRule,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl DataConfig {
    pub fn lexicon(&self) -> SyntheticLexicon {
        SyntheticLexicon::new(self.content_vocab, self.seed)
    }

    pub fn grammar(&self) -> GrammarSpec {
        GrammarSpec { rule: self.rule, min_len: self.min_len, max_len: self.max_len }
    }

    pub fn generate(&self) -> Result<(SyntheticLexicon, Corpus)> {
        let lex = self.lexicon();
        let sizes = CorpusSizes { train: self.train, valid: self.valid, test: self.test };
        let corpus = gen_corpus(&lex, &self.grammar(), sizes, self.seed).map_err(|e| usage(format!("data: {e}")))?;
        Ok((lex, corpus))
    }
}

/// Model shape. Vocabulary size and maximum length come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_mult: usize,
    pub complex_ffn_mult: usize,
    pub l_pad: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub injection: InjectionConfig,
    pub bench: BenchConfig,
}

const SECTIONS: [&str; 5] = ["data", "model", "train", "injection", "bench"];

fn section<T: DeserializeOwned>(root: &serde_json::Map<String, Value>, name: &str) -> Result<T> {
    let v = root.get(name).ok_or_else(|| usage(format!("config: missing section [{name}]")))?;
    serde_json::from_value(v.clone()).map_err(|e| usage(format!("config [{name}]: {e}")))
}

impl ExperimentConfig {
    /// Builds a config from a JSON-shaped tree, naming the section and field
    /// of any missing or unknown key.
    pub fn from_value(v: &Value) -> Result<Self> {
        let root = v.as_object().ok_or_else(|| usage("config: top level must be a table"))?;
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(usage(format!("config: unknown section [{k}]")));
        }
        Ok(Self {
            data: section(root, "data")?,
            model: section(root, "model")?,
            train: section(root, "train")?,
            injection: section(root, "injection")?,
            bench: section(root, "bench")?,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_value(&toml_to_value(text)?)
    }

    pub fn model_config(&self, lex: &SyntheticLexicon) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab: lex.vocab_size(),
            d: m.d,
            heads: m.heads,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            ffn_mult: m.ffn_mult,
            complex_ffn_mult: m.complex_ffn_mult,
            max_len: self.data.max_len,
            l_pad: m.l_pad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.grammar().validate().map_err(|e| usage(format!("config [data]: {e}")))?;
        self.model_config(&self.data.lexicon()).validate().map_err(|e| usage(format!("config [model]: {e}")))?;
        self.train.validate().map_err(|e| usage(format!("config [train]: {e}")))?;
        if self.train.seeds.is_empty() {
            return Err(usage("config [train]: seeds must not be empty"));
        }
        self.bench.validate().map_err(|e| usage(format!("config [bench]: {e}")))?;
        Ok(())
    }
}

fn toml_to_value(text: &str) -> Result<Value> {
    let table: toml::Table = toml::from_str(text).map_err(|e| usage(format!("config: {e}")))?;
    serde_json::to_value(table).map_err(|e| usage(format!("config: {e}")))
}

/// Applies a `section.field=value` override. The value is read as TOML
/// (numbers, booleans, arrays, quoted strings) and otherwise kept as a bare
/// string.
fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (path, raw) = item.split_once('=').ok_or_else(|| usage(format!("--set {item}: expected key=value")))?;
    let parsed = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key present")).map_err(|e| usage(e.to_string()))?,
        Err(_) => Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(*k))
            .ok_or_else(|| usage(format!("--set {path}: no section {k}")))?;
    }
    let obj = node.as_object_mut().ok_or_else(|| usage(format!("--set {path}: not a table")))?;
    obj.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Peak learning rate 1e-4.
    Ismr,
    /// Peak learning rate 8e-4 with 120 warmup steps.
    Marathon,
}

impl Preset {
    pub fn apply(self, train: &mut TrainConfig) {
        match self {
            Preset::Ismr => train.peak_lr = 1e-4,
            Preset::Marathon => {
                train.peak_lr = 8e-4;
                train.warmup_steps = 120;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Incomplete,
    Complete,
    Failed,
}

/// Written before any compute starts. Only `status`, `finished_unix` and
/// `error` change afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub arch: Option<Arch>,
    pub preset: Option<Preset>,
    pub map_source: Option<MapSource>,
    pub checkpoint: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub revision: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(compute(&path.display().to_string()))
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn revision() -> String {
    let git = std::process::Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into());
    format!("{} {} ({git})", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Manifests for a command group and its per-seed directories, finalized
/// together.
struct Manifests {
    entries: Vec<(PathBuf, RunManifest)>,
}

impl Manifests {
    fn start(template: &RunManifest, group: &Path, seed_dirs: &[(u64, PathBuf)], force: bool) -> Result<Self> {
        let mut entries = vec![(group.join("manifest.json"), template.clone())];
        for (seed, dir) in seed_dirs {
            entries.push((dir.join("manifest.json"), RunManifest { seeds: vec![*seed], ..template.clone() }));
        }
        for (path, _) in &entries {
            if path.exists() && !force {
                return Err(usage(format!("{} exists; pass --force to overwrite", path.display())));
            }
        }
        for (path, m) in &entries {
            fs::create_dir_all(path.parent().expect("manifest has a parent")).map_err(compute("create output dir"))?;
            m.write(path)?;
        }
        Ok(Self { entries })
    }

    fn finish(mut self, outcome: &Result<()>) -> Result<()> {
        let now = unix_now();
        for (path, m) in &mut self.entries {
            m.finished_unix = Some(now);
            match outcome {
                Ok(()) => m.status = RunStatus::Complete,
                Err(e) => {
                    m.status = RunStatus::Failed;
                    m.error = Some(e.to_string());
                }
            }
            m.write(path)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Arguments

#[derive(Debug, Parser)]
#[command(name = "prism", version, about = "Harmonic encoder experiments on a synthetic translation task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Output root.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Comma-separated seeds; replaces `train.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Override any config field, e.g. `--set train.peak_lr=2e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and vocabulary.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one architecture from scratch, once per seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        arch: Option<Arch>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Peak learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Iteration 1, map transplant into a fresh model, and the shuffled ablation.
    Ismr {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        arch: Option<Arch>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Table to transplant; defaults to the architecture's decoder-side table.
        #[arg(long, value_enum)]
        map_source: Option<MapSource>,
    },
    /// Few-shot injection of novel concepts into a trained checkpoint.
    Inject {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Constant injection learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Number of injection updates.
        #[arg(long)]
        steps: Option<usize>,
        /// One batch per concept instead of one shared batch.
        #[arg(long)]
        separate_batches: bool,
    },
    /// Time the two token mixers across sequence lengths.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Collect final metrics and tables found under a directory.
    Report {
        /// Directory to scan.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

/// What a finished command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

struct Resolved {
    config: ExperimentConfig,
    previous: Option<RunManifest>,
}

fn resolve(common: &Common, expected_command: &str) -> Result<Resolved> {
    let path = &common.config;
    let (mut tree, previous) = if path.extension().is_some_and(|e| e == "json") {
        let m = RunManifest::read(path)?;
        if m.command != expected_command {
            return Err(usage(format!("manifest is for `{}`, not `{expected_command}`", m.command)));
        }
        (serde_json::to_value(&m.config).expect("config serializes"), Some(m))
    } else {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        (toml_to_value(&text)?, None)
    };
    for item in &common.overrides {
        apply_override(&mut tree, item)?;
    }
    let mut config = ExperimentConfig::from_value(&tree)?;
    if !common.seed.is_empty() {
        config.train.seeds = common.seed.clone();
    }
    Ok(Resolved { config, previous })
}

fn template(command: &str, config: &ExperimentConfig, out: &Path) -> RunManifest {
    RunManifest {
        command: command.into(),
        arch: None,
        preset: None,
        map_source: None,
        checkpoint: None,
        seeds: config.train.seeds.clone(),
        out: out.to_path_buf(),
        revision: revision(),
        started_unix: unix_now(),
        finished_unix: None,
        status: RunStatus::Incomplete,
        error: None,
        config: config.clone(),
    }
}

fn pick_arch(flag: Option<Arch>, previous: &Option<RunManifest>) -> Result<Arch> {
    flag.or_else(|| previous.as_ref().and_then(|m| m.arch)).ok_or_else(|| usage("--arch is required"))
}

/// Parses arguments and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(outcome) => {
            println!("wrote {}", outcome.dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::GenData { common } => cmd_gen_data(&common),
        Command::Train { common, arch, preset, lr, steps } => {
            let mut r = resolve(&common, "train")?;
            let arch = pick_arch(arch, &r.previous)?;
            if let Some(p) = preset {
                p.apply(&mut r.config.train);
            }
            override_train(&mut r.config.train, lr, steps);
            cmd_train(&common, r.config, arch, preset)
        }
        Command::Ismr { common, arch, preset, lr, steps, map_source } => {
            let mut r = resolve(&common, "ismr")?;
            let arch = pick_arch(arch, &r.previous)?;
            if let Some(p) = preset {
                p.apply(&mut r.config.train);
            }
            override_train(&mut r.config.train, lr, steps);
            let source = map_source
                .or_else(|| r.previous.as_ref().and_then(|m| m.map_source))
                .unwrap_or_else(|| MapSource::default_for(arch));
            cmd_ismr(&common, r.config, arch, preset, source)
        }
        Command::Inject { common, checkpoint, lr, steps, separate_batches } => {
            let mut r = resolve(&common, "inject")?;
            let checkpoint = checkpoint
                .or_else(|| r.previous.as_ref().and_then(|m| m.checkpoint.clone()))
                .ok_or_else(|| usage("--checkpoint is required"))?;
            if let Some(lr) = lr {
                r.config.injection.lr = lr;
            }
            if let Some(s) = steps {
                r.config.injection.steps = s;
            }
            r.config.injection.separate_batches |= separate_batches;
            cmd_inject(&common, r.config, &checkpoint)
        }
        Command::Bench { common } => {
            let r = resolve(&common, "bench")?;
            cmd_bench(&common, r.config)
        }
        Command::Report { out } => cmd_report(&out),
    }
}

fn override_train(train: &mut TrainConfig, lr: Option<f64>, steps: Option<usize>) {
    if let Some(lr) = lr {
        train.peak_lr = lr;
    }
    if let Some(s) = steps {
        train.steps = s;
    }
}

// ---------------------------------------------------------------------------
// Commands

/// Streams metrics records to a JSON-lines file, keeping the first write error.
struct MetricsFile {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl MetricsFile {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(compute(&path.display().to_string()))?;
        Ok(Self { out: BufWriter::new(f), error: None })
    }

    fn record(&mut self, r: &MetricsRecord) {
        eprintln!("{} step {} {} loss {:.4} bleu {:.2}", r.run_id, r.step, r.split, r.loss, r.bleu.unwrap_or(f64::NAN));
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{}", r.to_line()).and_then(|_| self.out.flush()) {
                self.error = Some(e);
            }
        }
    }

    fn close(mut self) -> Result<()> {
        match self.error.take() {
            Some(e) => Err(CliError::Compute(format!("metrics write failed: {e}"))),
            None => self.out.flush().map_err(compute("metrics flush")),
        }
    }
}

fn write_text(path: &Path, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(path, text).map_err(compute(&path.display().to_string()))?;
    files.push(path.to_path_buf());
    Ok(())
}

fn seed_dirs(group: &Path, seeds: &[u64]) -> Vec<(u64, PathBuf)> {
    seeds.iter().map(|&s| (s, group.join(s.to_string()))).collect()
}

fn cmd_gen_data(common: &Common) -> Result<Outcome> {
    let r = resolve(common, "gen-data")?;
    r.config.validate()?;
    let dir = common.out.join("data");
    if dir.join("train.tsv").exists() && !common.force {
        return Err(usage(format!("{} already holds a corpus; pass --force to overwrite", dir.display())));
    }
    let manifests = Manifests::start(&template("gen-data", &r.config, &common.out), &dir, &[], true)?;
    let outcome = (|| {
        let (lex, corpus) = r.config.data.generate()?;
        write_corpus(&dir, &corpus, &lex.vocab()).map_err(compute("write corpus"))
    })();
    manifests.finish(&outcome)?;
    outcome?;
    let files = ["train.tsv", "valid.tsv", "test.tsv", "vocab.tsv", "manifest.json"].iter().map(|f| dir.join(f)).collect();
    Ok(Outcome { dir, files })
}

fn cmd_train(common: &Common, config: ExperimentConfig, arch: Arch, preset: Option<Preset>) -> Result<Outcome> {
    config.validate()?;
    let group = common.out.join("train").join(arch.as_str());
    let dirs = seed_dirs(&group, &config.train.seeds);
    let tpl = RunManifest { arch: Some(arch), preset, ..template("train", &config, &common.out) };
    let manifests = Manifests::start(&tpl, &group, &dirs, common.force)?;
    let mut files = Vec::new();
    let outcome = (|| {
        let (lex, corpus) = config.data.generate()?;
        let model_cfg = config.model_config(&lex);
        let hash = lex.vocab().hash();
        for (seed, dir) in &dirs {
            let mut model = init_model(arch, &model_cfg, derive_seed(*seed, "init")).map_err(compute("init"))?;
            let metrics_path = dir.join("metrics.jsonl");
            let mut metrics = MetricsFile::create(&metrics_path)?;
            let run_id = format!("train/{arch}/{seed}");
            train(&mut model, &corpus.train, &corpus.valid, &config.train, *seed, &run_id, &mut |r| metrics.record(r))
                .map_err(compute(&run_id))?;
            metrics.close()?;
            let ckpt = dir.join("checkpoint.ckpt");
            let meta = vec![
                ("vocab_hash".to_string(), hash.clone()),
                ("seed".to_string(), seed.to_string()),
                ("steps".to_string(), config.train.steps.to_string()),
            ];
            save_checkpoint(&model, &ckpt, &meta).map_err(compute("checkpoint"))?;
            files.extend([metrics_path, ckpt]);
        }
        Ok(())
    })();
    manifests.finish(&outcome)?;
    outcome?;
    Ok(Outcome { dir: group, files })
}

fn cmd_ismr(
    common: &Common,
    config: ExperimentConfig,
    arch: Arch,
    preset: Option<Preset>,
    source: MapSource,
) -> Result<Outcome> {
    config.validate()?;
    let group = common.out.join("ismr").join(arch.as_str());
    let dirs = seed_dirs(&group, &config.train.seeds);
    let tpl = RunManifest { arch: Some(arch), preset, map_source: Some(source), ..template("ismr", &config, &common.out) };
    let manifests = Manifests::start(&tpl, &group, &dirs, common.force)?;
    let mut files = Vec::new();
    let outcome = (|| {
        let (lex, corpus) = config.data.generate()?;
        let setup = Setup {
            corpus: &corpus,
            vocab_hash: lex.vocab().hash(),
            model: config.model_config(&lex),
            train: config.train.clone(),
        };
        let mut runs = Vec::new();
        for (seed, dir) in &dirs {
            let metrics_path = dir.join("metrics.jsonl");
            let mut metrics = MetricsFile::create(&metrics_path)?;
            let run = run_ismr(arch, &setup, source, *seed, &mut |r| metrics.record(r)).map_err(compute("ismr"))?;
            metrics.close()?;
            let (e1, shuffled) = (dir.join("map_iter1.map"), dir.join("map_shuffled.map"));
            save_map(&run.map, &e1).map_err(compute("save map"))?;
            save_map(&run.shuffled, &shuffled).map_err(compute("save map"))?;
            write_text(&dir.join("ismr_table.csv"), &ismr_table(std::slice::from_ref(&run)), &mut files)?;
            files.extend([metrics_path, e1, shuffled]);
            runs.push(run);
        }
        write_text(&group.join("ismr_table.csv"), &ismr_table(&runs), &mut files)
    })();
    manifests.finish(&outcome)?;
    outcome?;
    Ok(Outcome { dir: group, files })
}

fn injection_records(run_id: &str, seed: u64, pre_loss: f64, run: &InjectionRun, post_loss: f64) -> [MetricsRecord; 2] {
    let rec = |split: &str, step: usize, loss: f64, bleu: f64, acq: f64, delta: f64| MetricsRecord {
        run_id: run_id.to_string(),
        seed,
        step,
        split: split.to_string(),
        loss,
        bleu: Some(bleu),
        acquisition: Some(acq),
        stability_delta: Some(delta),
        lr: run.lr,
        grad_norm: 0.0,
        wall_ms: 0,
    };
    [
        rec("pre-injection", 0, pre_loss, run.pre_bleu.bleu, run.pre_acquisition.fraction, 0.0),
        rec("post-injection", run.updates_executed, post_loss, run.post_bleu.bleu, run.post_acquisition.fraction, run.stability_delta),
    ]
}

fn cmd_inject(common: &Common, config: ExperimentConfig, checkpoint: &Path) -> Result<Outcome> {
    config.validate()?;
    let (probe, header) = load_checkpoint(checkpoint).map_err(|e| usage(format!("{}: {e}", checkpoint.display())))?;
    let arch = probe.arch;
    drop(probe);
    let (lex, corpus) = config.data.generate()?;
    let hash = lex.vocab().hash();
    if header.get("vocab_hash") != Some(hash.as_str()) {
        return Err(usage(format!(
            "checkpoint/vocab mismatch: checkpoint has {:?}, config generates {hash}",
            header.get("vocab_hash")
        )));
    }
    let group = common.out.join("inject").join(arch.as_str());
    let dirs = seed_dirs(&group, &config.train.seeds);
    let tpl = RunManifest {
        arch: Some(arch),
        checkpoint: Some(checkpoint.to_path_buf()),
        ..template("inject", &config, &common.out)
    };
    let manifests = Manifests::start(&tpl, &group, &dirs, common.force)?;
    let mut files = Vec::new();
    let outcome = (|| {
        let budget = config.train.token_budget;
        let mut runs = Vec::new();
        for (seed, dir) in &dirs {
            let inj = make_injection_set(&lex, &config.data.grammar(), config.injection.eval_per_concept, *seed)
                .map_err(|e| usage(format!("injection set: {e}")))?;
            let (model, _) = load_checkpoint(checkpoint).map_err(compute("checkpoint"))?;
            let pre_loss = eval_loss(&model, &corpus.valid, budget).map_err(compute("eval"))?;
            let run = run_injection(model, &inj, &corpus.valid, &config.injection).map_err(compute("injection"))?;
            let post_loss = eval_loss(&run.model, &corpus.valid, budget).map_err(compute("eval"))?;
            let run_id = format!("inject/{arch}/{seed}");
            let metrics_path = dir.join("metrics.jsonl");
            let mut metrics = MetricsFile::create(&metrics_path)?;
            for r in injection_records(&run_id, *seed, pre_loss, &run, post_loss) {
                metrics.record(&r);
            }
            metrics.close()?;
            files.push(metrics_path);
            write_text(&dir.join("summary.csv"), &injection_summary(&[(arch.to_string(), &run)]), &mut files)?;
            write_text(&dir.join("concepts.csv"), &concept_breakdown(&run, &inj), &mut files)?;
            let ckpt = dir.join("checkpoint_post.ckpt");
            save_checkpoint(&run.model, &ckpt, &[("vocab_hash".to_string(), hash.clone())]).map_err(compute("checkpoint"))?;
            files.push(ckpt);
            runs.push((*seed, run));
        }
        let best = runs
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                a.1.post_acquisition
                    .fraction
                    .total_cmp(&b.1.post_acquisition.fraction)
                    .then(a.1.stability_delta.total_cmp(&b.1.stability_delta))
            })
            .map(|(i, _)| i)
            .expect("at least one seed");
        let mut columns: Vec<(String, &InjectionRun)> = runs.iter().map(|(s, r)| (format!("seed_{s}"), r)).collect();
        columns.push((format!("best_seed_{}", runs[best].0), &runs[best].1));
        write_text(&group.join("summary.csv"), &injection_summary(&columns), &mut files)
    })();
    manifests.finish(&outcome)?;
    outcome?;
    Ok(Outcome { dir: group, files })
}

fn cmd_bench(common: &Common, config: ExperimentConfig) -> Result<Outcome> {
    config.bench.validate().map_err(|e| usage(format!("config [bench]: {e}")))?;
    let dir = common.out.join("bench");
    let manifests = Manifests::start(&template("bench", &config, &common.out), &dir, &[], common.force)?;
    let mut files = Vec::new();
    let outcome = (|| {
        let report = run_scaling(&config.bench).map_err(compute("bench"))?;
        write_text(&dir.join("scaling.csv"), &report.to_csv(), &mut files)?;
        write_text(&dir.join("summary.csv"), &report.summary(), &mut files)?;
        write_text(&dir.join("metadata.txt"), &report.metadata_text(), &mut files)?;
        eprint!("{}", report.summary());
        Ok(())
    })();
    manifests.finish(&outcome)?;
    outcome?;
    Ok(Outcome { dir, files })
}

/// Final record of every metrics stream under `root`, plus any tables found,
/// gathered into `report.csv`.
fn cmd_report(root: &Path) -> Result<Outcome> {
    if !root.is_dir() {
        return Err(usage(format!("{} is not a directory", root.display())));
    }
    let mut metrics = Vec::new();
    let mut tables = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(compute("scan"))?;
        let name = entry.file_name().to_string_lossy();
        if name == "metrics.jsonl" {
            metrics.push(entry.path().to_path_buf());
        } else if entry.depth() <= 3 && (name == "ismr_table.csv" || name == "summary.csv") {
            tables.push(entry.path().to_path_buf());
        }
    }
    let mut out = String::from("run_id,seed,step,split,loss,bleu,acquisition,stability_delta\n");
    for path in &metrics {
        let text = fs::read_to_string(path).map_err(compute(&path.display().to_string()))?;
        let mut last: std::collections::BTreeMap<String, MetricsRecord> = Default::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: MetricsRecord =
                serde_json::from_str(line).map_err(|e| CliError::Compute(format!("{}: {e}", path.display())))?;
            last.insert(r.run_id.clone(), r);
        }
        for r in last.values() {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{:.4},{},{},{}\n",
                r.run_id,
                r.seed,
                r.step,
                r.split,
                r.loss,
                opt(r.bleu),
                opt(r.acquisition),
                opt(r.stability_delta)
            ));
        }
    }
    for t in &tables {
        let text = fs::read_to_string(t).map_err(compute(&t.display().to_string()))?;
        out.push_str(&format!("\n# {}\n{text}", t.strip_prefix(root).unwrap_or(t).display()));
    }
    print!("{out}");
    let path = root.join("report.csv");
    let mut files = Vec::new();
    write_text(&path, &out, &mut files)?;
    Ok(Outcome { dir: root.to_path_buf(), files })
}

#[cfg(test)]
mod tests;
