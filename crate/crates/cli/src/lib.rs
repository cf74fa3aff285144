//! Command-line front end: `train`, `eval`, `ablate`, `dump-reps` and
//! `make-splits`.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use protoqda::episodes::{
    dataset_labels, load_dataset, load_label_vectors, make_splits, sample_episode_seeded,
    synthetic_dataset, Dataset, EpisodeError, LabelSource, SyntheticCorpusSpec,
};
use protoqda::label_adapter::represent_episode;
use protoqda::qda::estimate_prototypes;
use protoqda::trainer::{
    evaluate, mean_ci95, support_only_prototypes, train, Checkpoint, RunReport, TrainConfig,
    TrainError,
};
use protoqda::wordrep::{load_word_vectors, OovPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<EpisodeError> for CliError {
    fn from(e: EpisodeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Episodes(_) | TrainError::Evaluation(_) => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "protoqda", version, about = "Episodic few-shot text classification")]
pub struct Cli {
    /// Cap on evaluation worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Suppress the summary printed on standard output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an adapter and evaluate it on the test split.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(CheckpointArgs),
    /// Train and evaluate the four component variants on shared episodes.
    Ablate(RunArgs),
    /// Write sample and prototype representations of one test episode.
    DumpReps(DumpArgs),
    /// Draw disjoint train/valid/test class lists from a dataset.
    MakeSplits(SplitArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted-key override applied after parsing, e.g. `--set r=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Support samples per class (default: config k_shot).
    #[arg(long)]
    pub k: Option<usize>,
    /// Query samples per class (default: config m_query).
    #[arg(long)]
    pub m: Option<usize>,
    /// Episode seed (default: config seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Class counts as train/valid/test.
    #[arg(long, default_value = "20/5/16")]
    pub counts: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Data section of a run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticCorpusSpec),
    Files(FileData),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileData {
    pub data: PathBuf,
    pub split: PathBuf,
    #[serde(default)]
    pub word_vectors: Option<PathBuf>,
    #[serde(default)]
    pub oov_policy: OovPolicy,
    #[serde(default)]
    pub label_vectors: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: DataSource,
}

impl RunConfig {
    /// Parses `path`, rejects unknown top-level keys, applies overrides and
    /// resolves data paths against the config's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let raw: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let known: BTreeSet<String> = match serde_json::to_value(TrainConfig::default()) {
            Ok(Value::Object(map)) => map.keys().cloned().chain(["data".to_owned()]).collect(),
            _ => unreachable!("TrainConfig serializes to an object"),
        };
        if let Value::Object(map) = &raw {
            if let Some(key) = map.keys().find(|k| !known.contains(*k)) {
                return Err(CliError::Config(format!("{}: unknown key \"{key}\"", path.display())));
            }
        }
        let parsed: RunConfig = serde_json::from_value(raw)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut value = serde_json::to_value(&parsed).expect("config serializes");
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut config: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("after overrides: {e}")))?;
        config
            .train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let DataSource::Files(files) = &mut config.data {
            let base = path.parent().unwrap_or(Path::new(""));
            for p in [&mut files.data, &mut files.split] {
                *p = base.join(&*p);
            }
            for p in [&mut files.word_vectors, &mut files.label_vectors].into_iter().flatten() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }
}

/// Sets `key.path=value` in `root`; the key must already exist. Values are
/// parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override \"{spec}\" is not KEY=VALUE")))?;
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Config(format!("override key \"{key}\" does not exist")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok(())
}

pub fn load_data(config: &RunConfig) -> Result<Dataset> {
    let min_size = config.train.k_shot + config.train.m_query;
    let data = match &config.data {
        DataSource::Synthetic(spec) => synthetic_dataset(spec)?,
        DataSource::Files(files) => {
            let table = files
                .word_vectors
                .as_ref()
                .map(|p| load_word_vectors(p, files.oov_policy))
                .transpose()
                .map_err(|e| CliError::Data(e.to_string()))?;
            let label_vectors = files.label_vectors.as_ref().map(load_label_vectors).transpose()?;
            let source = LabelSource {
                table: table.as_ref(),
                label_vectors: label_vectors.as_ref(),
            };
            load_dataset(&files.data, &files.split, source, min_size)?
        }
    };
    let report = &data.report;
    if report.dropped_unlisted > 0 {
        log::warn!(
            "dropped {} samples with labels outside the split: {:?}",
            report.dropped_unlisted,
            report.unlisted_labels
        );
    }
    if report.dropped_unrepresentable > 0 {
        log::warn!("dropped {} samples with no known tokens", report.dropped_unrepresentable);
    }
    for (split, label, size) in &report.undersized {
        log::warn!("{split} class \"{label}\" has {size} samples, fewer than {min_size}");
    }
    Ok(data)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    write_file(path, &(text + "\n"))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn run_train(args: &RunArgs, quiet: bool) -> Result<()> {
    let config = RunConfig::load(&args.config, &args.overrides)?;
    let data = load_data(&config)?;
    let (checkpoint, report) = match train(&config.train, &data) {
        Ok(out) => out,
        Err(TrainError::Aborted { epoch, source, partial }) => {
            partial.save(args.out.join("checkpoint.partial.json"))?;
            return Err(CliError::Runtime(format!("training aborted in epoch {epoch}: {source}")));
        }
        Err(e) => return Err(e.into()),
    };
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;
    checkpoint.save(args.out.join("checkpoint.json"))?;
    write_json(&args.out.join("report.json"), &report)?;
    if !quiet {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn run_eval(args: &CheckpointArgs, quiet: bool) -> Result<()> {
    let config = RunConfig::load(&args.run.config, &args.run.overrides)?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&config)?;
    let report = evaluate(&checkpoint, &data.test, &config.train)?;
    write_json(&args.run.out.join("report.json"), &report)?;
    if !quiet {
        print!("{}", report.to_table());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRow {
    variant: String,
    test_acc_mean: f64,
    test_acc_ci95: f64,
    test_episodes: usize,
    /// Paired accuracy difference against the PN row on shared episodes.
    delta_vs_pn: f64,
    delta_vs_pn_ci95: f64,
}

fn run_ablate(args: &RunArgs, quiet: bool) -> Result<()> {
    let config = RunConfig::load(&args.config, &args.overrides)?;
    let data = load_data(&config)?;
    let mut reports: Vec<RunReport> = Vec::with_capacity(4);
    for (bypass_adapter, bypass_qda) in [(false, false), (false, true), (true, false), (true, true)] {
        let cfg = TrainConfig {
            bypass_adapter,
            bypass_qda,
            ..config.train.clone()
        };
        log::info!("ablation variant {}", cfg.variant());
        reports.push(train(&cfg, &data)?.1);
    }
    let pn = &reports[3];
    let rows: Vec<AblationRow> = reports
        .iter()
        .map(|r| {
            let diffs: Vec<f64> = r
                .per_episode
                .iter()
                .zip(&pn.per_episode)
                .map(|(a, b)| a.accuracy - b.accuracy)
                .collect();
            let (delta, ci) = mean_ci95(&diffs);
            AblationRow {
                variant: r.variant.clone(),
                test_acc_mean: r.test_acc_mean,
                test_acc_ci95: r.test_acc_ci95,
                test_episodes: r.test_episodes,
                delta_vs_pn: delta,
                delta_vs_pn_ci95: ci,
            }
        })
        .collect();
    write_json(&args.out.join("ablation.json"), &serde_json::json!({ "rows": rows }))?;
    if quiet {
        return Ok(());
    }
    println!("{:<12} {:>10} {:>10} {:>12}", "variant", "accuracy", "ci95", "vs pn");
    for r in &rows {
        println!(
            "{:<12} {:>10.4} {:>10.4} {:>+12.4}",
            r.variant, r.test_acc_mean, r.test_acc_ci95, r.delta_vs_pn
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct RepRow<'a> {
    id: String,
    label: &'a str,
    rep: Vec<f64>,
    kind: &'static str,
}

fn run_dump_reps(args: &DumpArgs, quiet: bool) -> Result<()> {
    let config = RunConfig::load(&args.run.config, &args.run.overrides)?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&config)?;
    let cfg = &config.train;
    let (k, m) = (args.k.unwrap_or(cfg.k_shot), args.m.unwrap_or(cfg.m_query));
    let seed = args.seed.unwrap_or(cfg.seed);
    let episode = sample_episode_seeded(&data.test, cfg.n_way, k, m, seed)?;
    let adapter = (!cfg.bypass_adapter).then_some(&checkpoint.params);
    let reps = represent_episode(adapter, &episode, false, &mut ChaCha8Rng::seed_from_u64(seed))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let names = episode.class_names();
    let plain = support_only_prototypes(&reps, names)?;
    let augmented = estimate_prototypes(&reps.support, reps.query.view(), names, &cfg.qda_settings())
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut lines = Vec::new();
    let mut push = |row: RepRow<'_>| lines.push(serde_json::to_string(&row).expect("row serializes"));
    for (c, class) in episode.support.iter().enumerate() {
        for (j, seq) in class.iter().enumerate() {
            push(RepRow {
                id: seq.source_id.clone(),
                label: &seq.label,
                rep: reps.support[c].row(j).to_vec(),
                kind: "sample",
            });
        }
    }
    for (i, seq) in episode.query.iter().enumerate() {
        push(RepRow {
            id: seq.source_id.clone(),
            label: &seq.label,
            rep: reps.query.row(i).to_vec(),
            kind: "sample",
        });
    }
    for (kind, set) in [("support_prototype", &plain), ("qda_prototype", &augmented.prototypes)] {
        for (c, name) in names.iter().enumerate() {
            push(RepRow {
                id: format!("{kind}/{name}"),
                label: name,
                rep: set.vectors().row(c).to_vec(),
                kind,
            });
        }
    }
    let mut text = lines.join("\n");
    text.push('\n');
    write_file(&args.run.out.join("reps.jsonl"), &text)?;
    if !quiet {
        println!("wrote {} rows to {}", lines.len(), args.run.out.join("reps.jsonl").display());
    }
    Ok(())
}

fn parse_counts(text: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = text.split('/').collect();
    let bad = || CliError::Config(format!("counts \"{text}\" must look like 20/5/16"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0; 3];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p.trim().parse().map_err(|_| bad())?;
    }
    Ok(out)
}

fn run_make_splits(args: &SplitArgs, quiet: bool) -> Result<()> {
    let counts = parse_counts(&args.counts)?;
    let labels = dataset_labels(&args.data)?;
    let split = make_splits(&labels, counts, args.seed)?;
    let path = args.out.join("split.json");
    write_json(&path, &split)?;
    if quiet {
        return Ok(());
    }
    println!(
        "wrote {} with {}/{}/{} classes",
        path.display(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let work = || match &cli.command {
        Command::Train(a) => run_train(a, cli.quiet),
        Command::Eval(a) => run_eval(a, cli.quiet),
        Command::Ablate(a) => run_ablate(a, cli.quiet),
        Command::DumpReps(a) => run_dump_reps(a, cli.quiet),
        Command::MakeSplits(a) => run_make_splits(a, cli.quiet),
    };
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?
            .install(work),
        None => work(),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status. Errors go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
