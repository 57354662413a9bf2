use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qmann::addressing::SimilarityKind;
use qmann::data::{gen_babi_task1, gen_synthetic, load_babi_task, parse_babi, Dataset, Story, SyntheticTask};
use qmann::diag::{export_curves, export_histograms, overflow_trace, EnergyModel, EnergyReport, HistogramSnapshot};
use qmann::fxp::QFormat;
use qmann::model::{FixedFormats, MannModel, Quantization};
use qmann::train::{evaluate, init_model, train, EsConfig, RunMetrics, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const MAX_SENTENCES: usize = 50;

#[derive(Parser)]
#[command(name = "qmann", version, about = "Quantized memory-augmented networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its artifacts to --out.
    Train(TrainArgs),
    /// Re-evaluate a trained run on its test split.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint to use instead of the run's own.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every (task, format, seed) cell and summarise best/mean errors.
    Sweep(SweepArgs),
    /// Print per-epoch overflow and similarity-width traces of a run.
    Diag {
        #[arg(long)]
        run: PathBuf,
    },
    /// Energy report of a run against a baseline run.
    Energy {
        #[arg(long)]
        run: PathBuf,
        /// Baseline run; defaults to a float model of the same shape.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Float,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Act {
    Fixed,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Task {
    Synthetic(SyntheticTask),
    /// Locally generated stories in bAbI task 1 format.
    BabiReplica,
    Babi(u32),
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("synthetic", "babi1-replica")) => Ok(Task::BabiReplica),
            Some(("synthetic", kind)) => kind.parse().map(Task::Synthetic).map_err(|e| e.to_string()),
            Some(("babi", n)) => match n.parse() {
                Ok(n @ 1..=20) => Ok(Task::Babi(n)),
                _ => Err(format!("bAbI task must be 1..20, got {n}")),
            },
            _ => Err(format!("expected synthetic:<kind> or babi:<n>, got {s}")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Synthetic(k) => write!(f, "synthetic:{k}"),
            Task::BabiReplica => write!(f, "synthetic:babi1-replica"),
            Task::Babi(n) => write!(f, "babi:{n}"),
        }
    }
}

#[derive(Args, Clone, Debug)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "float")]
    mode: Mode,
    /// Format for parameters, activations and memory in fixed mode.
    #[arg(long, default_value = "Q5.2")]
    qformat: QFormat,
    #[arg(long, value_enum, default_value = "fixed")]
    act: Act,
    #[arg(long, value_enum, default_value = "dot")]
    similarity: Similarity,
    #[arg(long)]
    mq: bool,
    #[arg(long)]
    es: bool,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 3)]
    hops: usize,
    #[arg(long, default_value_t = 60)]
    embed_dim: usize,
    #[arg(long, default_value_t = -3, allow_negative_numbers = true)]
    alpha: i32,
}

#[derive(Args, Clone, Debug)]
struct DataArgs {
    /// synthetic:{single-fact,two-fact,wide-similarity,babi1-replica} or babi:<n>
    #[arg(long)]
    task: Task,
    /// Directory holding qa<n>_*_{train,test}.txt files.
    #[arg(long, env = "QMANN_BABI_DIR")]
    babi_dir: Option<PathBuf>,
    /// Questions generated for synthetic training/test splits.
    #[arg(long, default_value_t = 1000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    /// Seed of the synthetic generator (the test split uses seed + 1).
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Similarity {
    Dot,
    Hamming,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// One or more tasks; errors are averaged over tasks.
    #[arg(long = "task", required = true)]
    tasks: Vec<Task>,
    #[arg(long, env = "QMANN_BABI_DIR")]
    babi_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    /// Comma-separated formats, e.g. Q5.4,Q2.7 (ignored in float mode).
    #[arg(long, value_delimiter = ',', default_value = "Q5.2")]
    qformats: Vec<QFormat>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    model: ModelArgs,
    /// Directory for summary.json and summary.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything needed to rebuild a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunSpec {
    version: String,
    task: Task,
    babi_dir: Option<PathBuf>,
    n_train: usize,
    n_test: usize,
    data_seed: u64,
    train: TrainConfig,
}

fn train_config(m: &ModelArgs, qformat: QFormat, seed: u64) -> Result<TrainConfig> {
    let quant = match m.mode {
        Mode::Float => Quantization::Float,
        Mode::Fixed => Quantization::Fixed(FixedFormats::uniform(qformat)),
    };
    let cfg = TrainConfig {
        learning_rate: m.lr,
        epochs: m.epochs,
        batch_size: m.batch_size,
        seed,
        quant,
        similarity: match m.similarity {
            Similarity::Dot => SimilarityKind::Dot,
            Similarity::Hamming => SimilarityKind::Hamming,
        },
        binary_act: m.act == Act::Binary,
        mq: m.mq,
        es: EsConfig { enabled: m.es, patience: m.patience, ..EsConfig::default() },
        alpha: m.alpha,
        embed_dim: m.embed_dim,
        hops: m.hops,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    cfg.model_config(1).validate()?;
    Ok(cfg)
}

fn load_stories(spec: &RunSpec) -> Result<(Vec<Story>, Vec<Story>)> {
    Ok(match &spec.task {
        Task::Synthetic(k) => (
            gen_synthetic(*k, spec.n_train, spec.data_seed),
            gen_synthetic(*k, spec.n_test, spec.data_seed + 1),
        ),
        Task::BabiReplica => {
            let gen = |n: usize, seed| parse_babi(&gen_babi_task1(n.div_ceil(5), seed), MAX_SENTENCES);
            (gen(spec.n_train, spec.data_seed)?, gen(spec.n_test, spec.data_seed + 1)?)
        }
        Task::Babi(n) => {
            let dir = spec
                .babi_dir
                .as_ref()
                .context("babi tasks need --babi-dir or QMANN_BABI_DIR")?;
            load_babi_task(dir, *n, MAX_SENTENCES)?
        }
    })
}

fn load_dataset(spec: &RunSpec) -> Result<Dataset> {
    let (train, test) = load_stories(spec)?;
    Ok(Dataset::from_splits(train, test, spec.train.valid_fraction, spec.train.seed)?)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents).with_context(|| format!("writing {}", dir.join(name).display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// A float model with the same shape, used as the energy baseline.
fn float_twin(model: &MannModel) -> MannModel {
    let mut twin = model.clone();
    twin.config.quant = Quantization::Float;
    twin.config.similarity = SimilarityKind::Dot;
    twin.config.binary_act = false;
    twin.config.mq = false;
    twin
}

fn energy_report(model: &MannModel, metrics: &RunMetrics, data: &Dataset, name: &str) -> Result<EnergyReport> {
    let baseline = evaluate(&float_twin(model), &data.test)?.ops;
    Ok(EnergyReport::new(&EnergyModel::default(), name, &metrics.inference_ops, "float32", &baseline)?)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let spec = RunSpec {
        version: env!("CARGO_PKG_VERSION").to_string(),
        task: args.data.task.clone(),
        babi_dir: args.data.babi_dir.clone(),
        n_train: args.data.n_train,
        n_test: args.data.n_test,
        data_seed: args.data.data_seed,
        train: train_config(&args.model, args.model.qformat, args.seed)?,
    };
    let data = load_dataset(&spec)?;
    fs::create_dir_all(&args.out)?;
    write(&args.out, "config.json", &serde_json::to_string_pretty(&spec)?)?;

    let mut log = fs::File::create(args.out.join("metrics.jsonl"))?;
    let mut log_err = None;
    let model = init_model(&data, &spec.train)?;
    let (model, metrics) = train(model, &data, &spec.train, |e| {
        let line = serde_json::json!({
            "epoch": e.epoch,
            "train_err": e.train_err,
            "val_err": e.val_err,
            "test_err": e.test_err,
            "loss": e.loss,
            "overflows": e.overflows,
            "similarity_width": e.similarity_width,
            "histograms": "histograms.csv",
        });
        if let Err(err) = writeln!(log, "{line}") {
            log_err.get_or_insert(err);
        }
        eprintln!(
            "epoch {:3}  loss {:.4}  train {:5.1}%  valid {:5.1}%  test {:5.1}%  similarity overflows {}",
            e.epoch, e.loss, e.train_err, e.val_err, e.test_err, e.overflows.similarity
        );
    })?;
    if let Some(err) = log_err {
        return Err(err.into());
    }

    write(&args.out, "checkpoint.json", &model.to_json()?)?;
    write(&args.out, "metrics.json", &serde_json::to_string_pretty(&metrics)?)?;
    write(&args.out, "curves.csv", &export_curves(&metrics))?;
    let snapshots: Vec<HistogramSnapshot> = metrics
        .epochs
        .iter()
        .map(|e| HistogramSnapshot { step: e.epoch, histogram: e.histogram.clone() })
        .collect();
    write(&args.out, "histograms.csv", &export_histograms(&snapshots))?;
    let report = energy_report(&model, &metrics, &data, &spec.task.to_string())?;
    write(&args.out, "energy.json", &serde_json::to_string_pretty(&report)?)?;

    let f = &metrics.final_errors;
    println!(
        "train {:.2}%  valid {:.2}%  test {:.2}%  energy gain vs float {:.2}x",
        f.train_err, f.val_err, f.test_err, report.gain_vs_baseline
    );
    Ok(())
}

fn cmd_eval(run: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let spec: RunSpec = read_json(&run.join("config.json"))?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.join("checkpoint.json"));
    let model = MannModel::from_json(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
    let data = load_dataset(&spec)?;
    if model.config.input_dim != data.vocab.len() {
        bail!("checkpoint input dimension {} does not match the task vocabulary {}", model.config.input_dim, data.vocab.len());
    }
    let eval = evaluate(&model, &data.test)?;
    println!("test error {}%", eval.error);
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    qformat: String,
    avg_of_best: f64,
    avg_of_mean: f64,
    similarity_overflows: f64,
    total_overflows: f64,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let formats = match args.model.mode {
        Mode::Float => vec![None],
        Mode::Fixed => args.qformats.iter().copied().map(Some).collect(),
    };
    let mut cells = Vec::new();
    for (fi, f) in formats.iter().enumerate() {
        for (ti, task) in args.tasks.iter().enumerate() {
            for &seed in &args.seeds {
                let spec = RunSpec {
                    version: env!("CARGO_PKG_VERSION").to_string(),
                    task: task.clone(),
                    babi_dir: args.babi_dir.clone(),
                    n_train: args.n_train,
                    n_test: args.n_test,
                    data_seed: args.data_seed,
                    train: train_config(&args.model, f.unwrap_or(args.model.qformat), seed)?,
                };
                cells.push((fi, ti, spec));
            }
        }
    }
    let results: Vec<(usize, usize, RunMetrics)> = cells
        .into_par_iter()
        .map(|(fi, ti, spec)| -> Result<_> {
            let data = load_dataset(&spec)?;
            let (_, m) = train(init_model(&data, &spec.train)?, &data, &spec.train, |_| {})?;
            Ok((fi, ti, m))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (fi, f) in formats.iter().enumerate() {
        let (mut best, mut mean) = (0.0, 0.0);
        let (mut sim_of, mut all_of, mut runs) = (0.0, 0.0, 0.0);
        for ti in 0..args.tasks.len() {
            let errs: Vec<f64> = results
                .iter()
                .filter(|r| r.0 == fi && r.1 == ti)
                .map(|r| r.2.final_errors.test_err)
                .collect();
            best += errs.iter().copied().fold(f64::INFINITY, f64::min);
            mean += errs.iter().sum::<f64>() / errs.len() as f64;
        }
        for r in results.iter().filter(|r| r.0 == fi) {
            let of = r.2.total_overflows();
            sim_of += of.similarity as f64;
            all_of += of.total() as f64;
            runs += 1.0;
        }
        let tasks = args.tasks.len() as f64;
        rows.push(SweepRow {
            qformat: f.map_or("float".to_string(), |f| f.to_string()),
            avg_of_best: best / tasks,
            avg_of_mean: mean / tasks,
            similarity_overflows: sim_of / runs,
            total_overflows: all_of / runs,
        });
    }

    let mut csv = String::from("qformat,avg_of_best,avg_of_mean,similarity_overflows,total_overflows\n");
    println!("{:<8} {:>12} {:>12} {:>16} {:>16}", "format", "avg-of-best", "avg-of-mean", "sim overflows", "all overflows");
    for r in &rows {
        println!(
            "{:<8} {:>11.2}% {:>11.2}% {:>16.1} {:>16.1}",
            r.qformat, r.avg_of_best, r.avg_of_mean, r.similarity_overflows, r.total_overflows
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.qformat, r.avg_of_best, r.avg_of_mean, r.similarity_overflows, r.total_overflows
        ));
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write(out, "summary.json", &serde_json::to_string_pretty(&rows)?)?;
        write(out, "summary.csv", &csv)?;
    }
    Ok(())
}

fn cmd_diag(run: &Path) -> Result<()> {
    let metrics: RunMetrics = read_json(&run.join("metrics.json"))?;
    println!("epoch,memory,key,similarity,weight,read,similarity_width");
    for ((epoch, of), e) in overflow_trace(&metrics).into_iter().zip(&metrics.epochs) {
        let width = e.similarity_width.map_or(String::new(), |w| w.to_string());
        println!("{epoch},{},{},{},{},{},{width}", of.memory, of.key, of.similarity, of.weight, of.read);
    }
    Ok(())
}

fn cmd_energy(run: &Path, baseline: Option<&Path>) -> Result<()> {
    let spec: RunSpec = read_json(&run.join("config.json"))?;
    let metrics: RunMetrics = read_json(&run.join("metrics.json"))?;
    let report = match baseline {
        Some(b) => {
            let base: RunMetrics = read_json(&b.join("metrics.json"))?;
            EnergyReport::new(
                &EnergyModel::default(),
                &run.display().to_string(),
                &metrics.inference_ops,
                &b.display().to_string(),
                &base.inference_ops,
            )?
        }
        None => {
            let model = MannModel::from_json(&fs::read_to_string(run.join("checkpoint.json"))?)?;
            energy_report(&model, &metrics, &load_dataset(&spec)?, &run.display().to_string())?
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Eval { run, checkpoint } => cmd_eval(&run, checkpoint.as_deref()),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Diag { run } => cmd_diag(&run),
        Command::Energy { run, baseline } => cmd_energy(&run, baseline.as_deref()),
    }
}
