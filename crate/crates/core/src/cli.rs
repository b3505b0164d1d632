//! Command-line front end. `main.rs` only forwards to [`run`].

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::baseline::ThresholdBaseline;
use crate::dataset::{Dataset, DatasetError, LoadReport, Manifest};
use crate::dyngraph::{IngestReport, SnapshotConfig, SECONDS_PER_DAY};
use crate::model::{
    self, evaluate, init_params, load_params, mean_temporal_attention, save_params, train,
    Ablation, EpochRecord, LossScope, Metrics, ModelConfig, ModelError, ModelParams,
    OptimizerKind, Split, TrainingConfig,
};
use crate::synth::{self, FeatureKind, SynthConfig};
use crate::temporal::MetricEncoding;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "botdgt", version, about = "Dynamic-graph bot detection")]
pub struct Cli {
    /// Dataset manifest (key = value file).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the dataset, build snapshots and print the ingest report.
    Ingest,
    /// Train a model and write checkpoint, epoch log and report.
    Train(TrainArgs),
    /// Evaluate a trained model on one split.
    Eval(EvalArgs),
    /// Retrain at several snapshot intervals and tabulate the metrics.
    SweepGranularity(SweepArgs),
    /// Mean temporal attention weights of a trained model.
    ExportAttention(AttentionArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Fit and evaluate the threshold baseline on final-snapshot metrics.
    Baseline,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    All,
    Final,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EncodingArg {
    Bucketed,
    Linear,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = ScopeArg::All)]
    pub loss_scope: ScopeArg,
    /// Comma-separated: no_temporal, no_p_at, no_p_lcc, no_p_blr.
    #[arg(long, default_value = "none")]
    pub ablation: Ablation,
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub structural_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub structural_heads: usize,
    #[arg(long, default_value_t = 4)]
    pub temporal_heads: usize,
    #[arg(long, default_value_t = 32)]
    pub classifier_hidden: usize,
    #[arg(long, default_value_t = 20)]
    pub buckets: usize,
    #[arg(long, value_enum, default_value_t = EncodingArg::Bucketed)]
    pub metric_encoding: EncodingArg,
    #[arg(long)]
    pub residual: bool,
    #[arg(long)]
    pub layer_norm: bool,
    #[arg(long)]
    pub no_self_loops: bool,
}

impl TrainArgs {
    fn model_config(&self, input_dim: usize, num_snapshots: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            structural_layers: self.structural_layers,
            structural_heads: self.structural_heads,
            temporal_heads: self.temporal_heads,
            classifier_hidden: self.classifier_hidden,
            num_snapshots,
            num_buckets: self.buckets,
            slope: 0.01,
            self_loops: !self.no_self_loops,
            residual: self.residual,
            layer_norm: self.layer_norm,
            metric_encoding: match self.metric_encoding {
                EncodingArg::Bucketed => MetricEncoding::Bucketed,
                EncodingArg::Linear => MetricEncoding::Linear,
            },
            ablation: self.ablation,
        }
    }

    fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => OptimizerKind::Adam,
                OptimizerArg::Sgd => OptimizerKind::Sgd,
            },
            loss_scope: match self.loss_scope {
                ScopeArg::All => LossScope::AllSnapshots,
                ScopeArg::Final => LossScope::FinalSnapshot,
            },
            ..TrainingConfig::default()
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `train` (or a checkpoint file inside it).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Clone, Debug, Args)]
pub struct SweepArgs {
    /// Snapshot intervals in days, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub intervals: Vec<u64>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Clone, Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Nodes to average over.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Clone, Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub humans: usize,
    #[arg(long, default_value_t = 100)]
    pub bots: usize,
    #[arg(long, default_value_t = 6)]
    pub snapshots: usize,
    #[arg(long, default_value_t = 8)]
    pub cluster_size: usize,
    #[arg(long, default_value_t = 3)]
    pub bot_out_degree: usize,
    #[arg(long, default_value_t = 3)]
    pub human_out_degree: usize,
    #[arg(long, default_value_t = 0.9)]
    pub reciprocity_human: f64,
    #[arg(long, default_value_t = 0.1)]
    pub reciprocity_bot: f64,
    #[arg(long, default_value_t = 1.0)]
    pub cluster_density: f64,
    #[arg(long, default_value_t = 60)]
    pub window_days: u64,
    #[arg(long)]
    pub camouflage: bool,
    /// Noise feature columns instead of degree descriptors.
    #[arg(long)]
    pub noise_features: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Model(ModelError::Divergence { .. })
            | CliError::Dataset(DatasetError::Model(ModelError::Divergence { .. })) => EXIT_DIVERGED,
            _ => EXIT_ERROR,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest => cmd_ingest(cli),
        Command::Train(args) => cmd_train(cli, args),
        Command::Eval(args) => cmd_eval(cli, args),
        Command::SweepGranularity(args) => cmd_sweep(cli, args),
        Command::ExportAttention(args) => cmd_export_attention(cli, args),
        Command::Synth(args) => cmd_synth(cli, args),
        Command::Baseline => cmd_baseline(cli),
    }
}

fn load_dataset(cli: &Cli) -> Result<(Dataset, LoadReport)> {
    let path = cli
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::Usage("--manifest is required".into()))?;
    let manifest = Manifest::load(path)?;
    Ok(Dataset::load(&manifest)?)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(dir)
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s)
}

#[derive(Serialize)]
struct IngestSummary<'a> {
    dataset: &'a LoadReport,
    snapshots: &'a IngestReport,
}

fn cmd_ingest(cli: &Cli) -> Result<()> {
    let (ds, load) = load_dataset(cli)?;
    let (_, report, _) = ds.graph(None)?;
    let summary = IngestSummary {
        dataset: &load,
        snapshots: &report,
    };
    emit(&(serde_json::to_string_pretty(&summary)? + "\n"));
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        write_json(&dir.join("ingest_report.json"), &summary)?;
    }
    Ok(())
}

/// Saved next to a checkpoint so `eval` and `export-attention` can rebuild
/// the model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub seed: u64,
    pub interval_secs: u64,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    ablation: String,
    seed: u64,
    model: &'a ModelConfig,
    training: &'a TrainingConfig,
    num_parameters: usize,
    num_nodes: usize,
    num_snapshots: usize,
    best_epoch: Option<usize>,
    train: Metrics,
    val: Option<Metrics>,
    test: Metrics,
}

pub fn epoch_log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_accuracy,val_f1,val_precision,val_recall\n");
    for r in log {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val.accuracy, r.val.f1, r.val.precision, r.val.recall
        )
        .unwrap();
    }
    s
}

struct TrainedRun {
    model: ModelConfig,
    params: ModelParams,
    test: Metrics,
}

fn train_once(
    cli: &Cli,
    ds: &Dataset,
    snapshot: &SnapshotConfig,
    args: &TrainArgs,
    out: Option<&Path>,
) -> Result<TrainedRun> {
    let (graph, _, metrics) = ds.graph(Some(snapshot))?;
    let model = args.model_config(ds.feature_dim(), graph.num_snapshots());
    let training = args.training_config();
    let data = ds.training_data(&graph, &metrics, &model)?;
    if data.nodes(Split::Test).is_empty() {
        return Err(CliError::Usage("test split has no labeled nodes".into()));
    }
    let init = init_params(&model, cli.seed)?;
    if let Some(dir) = out {
        save_params(&dir.join("init_checkpoint.bin"), &init)?;
    }
    let outcome = train(&data, &model, &training, init, |r| {
        eprintln!(
            "epoch {:>4}  loss {:.6}  val_acc {:.4}  val_f1 {:.4}",
            r.epoch, r.train_loss, r.val.accuracy, r.val.f1
        );
    })?;
    let test = evaluate(&outcome.params, &data, Split::Test, &model)?;
    if let Some(dir) = out {
        let file = ModelFile {
            model: model.clone(),
            training: training.clone(),
            seed: cli.seed,
            interval_secs: snapshot.interval_secs,
        };
        save_trained(dir, &file, &outcome.params)?;
        save_params(&dir.join("final_checkpoint.bin"), &outcome.final_params)?;
        write_file(&dir.join("epoch_log.csv"), epoch_log_csv(&outcome.log))?;
        let report = TrainReport {
            ablation: model.ablation.to_string(),
            seed: cli.seed,
            model: &model,
            training: &training,
            num_parameters: outcome.params.num_scalars(),
            num_nodes: graph.num_nodes,
            num_snapshots: graph.num_snapshots(),
            best_epoch: outcome.best_epoch,
            train: evaluate(&outcome.params, &data, Split::Train, &model)?,
            val: if data.nodes(Split::Val).is_empty() {
                None
            } else {
                Some(evaluate(&outcome.params, &data, Split::Val, &model)?)
            },
            test,
        };
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(TrainedRun {
        model,
        params: outcome.params,
        test,
    })
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let (ds, _) = load_dataset(cli)?;
    let dir = out_dir(cli)?;
    let run = train_once(cli, &ds, &ds.snapshot, args, Some(dir))?;
    emit(&format!(
        "test accuracy {:.4}  f1 {:.4}  ({} parameters)\n",
        run.test.accuracy,
        run.test.f1,
        run.params.num_scalars()
    ));
    Ok(())
}

fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join("checkpoint.bin"), path.join("model.json"))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), dir.join("model.json"))
    }
}

/// Writes `checkpoint.bin` and `model.json` into `dir`.
pub fn save_trained(dir: &Path, file: &ModelFile, params: &ModelParams) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    save_params(&dir.join("checkpoint.bin"), params)?;
    write_json(&dir.join("model.json"), file)
}

/// Reads a model written by `train`: `path` is the output directory or a
/// checkpoint file inside it.
pub fn load_trained(path: &Path) -> Result<(ModelFile, ModelParams)> {
    let (ckpt, meta) = checkpoint_paths(path);
    let text = fs::read_to_string(&meta).map_err(|source| CliError::Io {
        path: meta.clone(),
        source,
    })?;
    let file: ModelFile = serde_json::from_str(&text)?;
    let params = load_params(&ckpt, &file.model)?;
    Ok((file, params))
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let (ds, _) = load_dataset(cli)?;
    let (file, params) = load_trained(&args.checkpoint)?;
    let snapshot = SnapshotConfig {
        interval_secs: file.interval_secs,
        ..ds.snapshot.clone()
    };
    let (graph, _, metrics) = ds.graph(Some(&snapshot))?;
    let data = ds.training_data(&graph, &metrics, &file.model)?;
    let split = Split::from(args.split);
    if data.nodes(split).is_empty() {
        return Err(CliError::Usage("split has no labeled nodes".into()));
    }
    let m = evaluate(&params, &data, split, &file.model)?;
    let s = serde_json::to_string_pretty(&m)?;
    emit(&format!("{s}\n"));
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        write_file(&dir.join("eval.json"), s + "\n")?;
    }
    Ok(())
}

pub fn sweep_csv(rows: &[(u64, usize, Metrics)]) -> String {
    let mut s = String::from("interval_days,num_snapshots,accuracy,precision,recall,f1\n");
    for (days, n, m) in rows {
        writeln!(s, "{days},{n},{},{},{},{}", m.accuracy, m.precision, m.recall, m.f1).unwrap();
    }
    s
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    if args.intervals.len() < 2 {
        return Err(CliError::Usage("need at least 2 intervals".into()));
    }
    if args.intervals.contains(&0) {
        return Err(CliError::Usage("intervals must be positive".into()));
    }
    let (ds, _) = load_dataset(cli)?;
    let dir = out_dir(cli)?;
    let mut rows = Vec::new();
    for &days in &args.intervals {
        let snapshot = SnapshotConfig {
            interval_secs: days * SECONDS_PER_DAY,
            num_snapshots: None,
            ..ds.snapshot.clone()
        };
        let run = train_once(cli, &ds, &snapshot, &args.train, None)?;
        eprintln!("interval {days} days: {} snapshots, f1 {:.4}", run.model.num_snapshots, run.test.f1);
        rows.push((days, run.model.num_snapshots, run.test));
    }
    let csv = sweep_csv(&rows);
    emit(&csv);
    write_file(&dir.join("sweep.csv"), csv)
}

pub fn attention_csv(table: &[Vec<f64>]) -> String {
    let mut s = String::from("snapshot_query,snapshot_key,mean_weight\n");
    for (a, row) in table.iter().enumerate() {
        for (b, w) in row.iter().enumerate() {
            writeln!(s, "{a},{b},{w}").unwrap();
        }
    }
    s
}

fn cmd_export_attention(cli: &Cli, args: &AttentionArgs) -> Result<()> {
    let (ds, _) = load_dataset(cli)?;
    let (file, params) = load_trained(&args.checkpoint)?;
    if file.model.ablation.no_temporal {
        return Err(CliError::Usage("model was trained without the temporal module".into()));
    }
    let snapshot = SnapshotConfig {
        interval_secs: file.interval_secs,
        ..ds.snapshot.clone()
    };
    let (graph, _, metrics) = ds.graph(Some(&snapshot))?;
    let data = ds.training_data(&graph, &metrics, &file.model)?;
    let nodes = data.nodes(args.split.into());
    if nodes.is_empty() {
        return Err(CliError::Usage("node set is empty".into()));
    }
    let mut tape = Tape::new();
    let vars = params.map(&mut |t| tape.constant(t.clone()));
    let out = model::forward(&mut tape, &vars, &data.inputs, &file.model)?;
    let table = mean_temporal_attention(&tape, &out, &data.inputs, &nodes);
    let csv = attention_csv(&table);
    emit(&csv);
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        write_file(&dir.join("attention.csv"), csv)?;
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_humans: args.humans,
        num_bots: args.bots,
        num_snapshots: args.snapshots,
        human_cluster_size: args.cluster_size,
        bot_out_degree: args.bot_out_degree,
        reciprocity_human: args.reciprocity_human,
        reciprocity_bot: args.reciprocity_bot,
        camouflage: args.camouflage,
        seed: cli.seed,
        human_out_degree: args.human_out_degree,
        cluster_density: args.cluster_density,
        window_days: args.window_days,
        features: args.noise_features.map_or(FeatureKind::Degree, FeatureKind::Noise),
        train_fraction: 0.7,
        val_fraction: 0.1,
    };
    let ds = synth::generate(&cfg).map_err(CliError::Usage)?;
    let dir = out_dir(cli)?;
    let manifest = ds.export(dir)?;
    write_json(&dir.join("synth.json"), &cfg)?;
    emit(&format!("{}\n", manifest.display()));
    Ok(())
}

#[derive(Serialize)]
struct BaselineReport {
    baseline: ThresholdBaseline,
    train: Metrics,
    val: Metrics,
    test: Metrics,
}

fn cmd_baseline(cli: &Cli) -> Result<()> {
    let (ds, _) = load_dataset(cli)?;
    let (_, _, metrics) = ds.graph(None)?;
    let stump = ThresholdBaseline::fit(&metrics, &ds.labels, &ds.splits)
        .ok_or_else(|| CliError::Usage("no labeled training nodes".into()))?;
    let eval = |s| stump.evaluate(&metrics, &ds.labels, &ds.splits, s);
    let report = BaselineReport {
        baseline: stump,
        train: eval(Split::Train),
        val: eval(Split::Val),
        test: eval(Split::Test),
    };
    let s = serde_json::to_string_pretty(&report)?;
    emit(&format!("{s}\n"));
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        write_file(&dir.join("baseline.json"), s + "\n")?;
    }
    Ok(())
}
