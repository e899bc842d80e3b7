//! The `smoe` command line: train, evaluate, analyze, run oracle suites, export.
//!
//! Exit codes are a stable contract: 0 success, 2 usage or configuration error,
//! 3 training failure, 4 misaligned routing records, 5 oracle failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::token_swap_attack;
use crate::error::{Error, Result};
use crate::metrics::{format_value, mean_decision_entropy, MetricsReport, RoutingRecord};
use crate::pgm_oracle::{run_all_suites, Fault, InstanceSize, OracleReport, SuiteConfig};
use crate::rng::streams;
use crate::trainer::{self, Checkpoint, Combiner, RunConfig, Task, TaskData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_ALIGNMENT: i32 = 4;
pub const EXIT_ORACLE: i32 = 5;
/// Unexpected internal errors outside the documented contract.
pub const EXIT_INTERNAL: i32 = 1;

/// Environment variable naming the directory that holds run directories when `--out` is absent.
pub const RUNS_DIR_ENV: &str = "SMOE_RUNS_DIR";
pub const DEFAULT_RUNS_DIR: &str = "runs";

pub const FLUCTUATION_HEADER: [&str; 7] =
    ["variant", "seed", "epoch_a", "epoch_b", "layer", "fluctuation_rate", "set_change_rate"];
pub const ENTROPY_RATIO_HEADER: [&str; 8] = [
    "variant",
    "baseline",
    "seed",
    "epoch",
    "layer",
    "model_entropy",
    "baseline_entropy",
    "entropy_ratio",
];
pub const LOAD_HEADER: [&str; 6] = ["variant", "seed", "epoch", "layer", "expert", "fraction"];
pub const LOSS_HEADER: [&str; 7] = ["variant", "seed", "epoch", "train_loss", "eval_loss", "eval_ppl", "tau"];
pub const EVAL_HEADER: [&str; 6] = ["variant", "seed", "epoch", "split", "attack_fraction", "ppl"];
pub const ORACLE_HEADER: [&str; 5] = ["quantity", "instance_seed", "max_abs_error", "max_se", "pass"];

#[derive(Debug, Parser)]
#[command(name = "smoe", version, about = "Similarity- and attention-aware sparse MoE experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one seeded run and write its run directory.
    Train(TrainArgs),
    /// Score clean and token-swap-attacked test perplexity of a run.
    Eval(EvalArgs),
    /// Fluctuation, entropy and load metrics, optionally against a baseline run.
    Analyze(AnalyzeArgs),
    /// Enumeration and Monte-Carlo agreement suites on tiny instances.
    Oracle(OracleArgs),
    /// Re-serialize a run's metrics as CSV or JSON.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Baseline,
    Similarity,
    Attention,
}

impl From<Variant> for Combiner {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Baseline => Combiner::Baseline,
            Variant::Similarity => Combiner::SimilarityAware,
            Variant::Attention => Combiner::AttentionAware,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; defaults to `$SMOE_RUNS_DIR/<config>-<variant>-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub run: PathBuf,
    /// Checkpoint epoch; defaults to the last one.
    #[arg(long)]
    pub epoch: Option<usize>,
    /// Overrides the run's attack fraction.
    #[arg(long)]
    pub attack_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub run: PathBuf,
    /// Baseline run for entropy ratio and load comparison.
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub instances: usize,
    #[arg(long, default_value_t = 3)]
    pub tokens: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub experts: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub d_qk: usize,
    #[arg(long, default_value_t = 500_000)]
    pub posterior_samples: usize,
    #[arg(long, default_value_t = 200_000)]
    pub chain_samples: usize,
    #[arg(long, default_value_t = 10_000)]
    pub bound_instances: usize,
    /// Also write `oracle.csv` into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flips one posterior entry before comparison; the suites must then fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub run: PathBuf,
    /// `csv` or `json`.
    #[arg(long)]
    pub format: String,
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::TrainingFailure { .. } => EXIT_TRAINING,
        Error::Alignment(_) => EXIT_ALIGNMENT,
        Error::Usage(_)
        | Error::Config(_)
        | Error::Validation(_)
        | Error::Parameter(_)
        | Error::Refusal(_)
        | Error::Ingestion(_)
        | Error::EmptyInput(_)
        | Error::Format(_)
        | Error::Io { .. } => EXIT_USAGE,
        _ => EXIT_INTERNAL,
    }
}

/// Parses `args` (program name first) and runs the command, returning the exit code.
pub fn run_from<I, T>(args: I) -> i32
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
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(a).map(|_| EXIT_OK),
        Command::Eval(a) => {
            let (clean, attacked) = cmd_eval(a)?;
            println!("test ppl {clean:.4}, attacked ppl {attacked:.4}");
            Ok(EXIT_OK)
        }
        Command::Analyze(a) => {
            let report = cmd_analyze(&a.run, a.baseline.as_deref())?;
            for l in &report.layers {
                let ratio = l.entropy_ratio.map(|r| format!(" entropy_ratio {}", format_value(r))).unwrap_or_default();
                println!(
                    "layer {} fluctuation {} set_change {} load_kl {}{ratio}",
                    l.layer,
                    format_value(l.fluctuation_rate),
                    format_value(l.set_change_rate),
                    format_value(l.load_kl)
                );
            }
            Ok(EXIT_OK)
        }
        Command::Oracle(a) => cmd_oracle(a),
        Command::Export(a) => cmd_export(&a.run, &a.format, a.baseline.as_deref()).map(|_| EXIT_OK),
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

fn write_rows<const N: usize>(path: &Path, header: [&str; N], rows: &[[String; N]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Resolves the run directory and clears it when `force` allows.
fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if !empty {
            if !force {
                return Err(Error::Usage(format!(
                    "run directory {} already exists; pass --force to replace it",
                    dir.display()
                )));
            }
            if !dir.join("config.toml").is_file() {
                return Err(Error::Usage(format!(
                    "{} is not a run directory; refusing to replace it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    create_dir(&dir.join("checkpoints"))?;
    create_dir(&dir.join("routing"))
}

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// Epochs of all checkpoints in a run directory, ascending.
pub fn checkpoint_epochs(run: &Path) -> Result<Vec<usize>> {
    let dir = run.join("checkpoints");
    let mut epochs: Vec<usize> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse().ok()
        })
        .collect();
    epochs.sort_unstable();
    if epochs.is_empty() {
        return Err(Error::Usage(format!("{} holds no checkpoints", dir.display())));
    }
    Ok(epochs)
}

pub fn load_checkpoint(run: &Path, epoch: usize) -> Result<Checkpoint> {
    Checkpoint::load(&run.join("checkpoints").join(checkpoint_name(epoch)))
}

fn train_run_dir(a: &TrainArgs, cfg: &RunConfig) -> PathBuf {
    if let Some(out) = &a.out {
        return out.clone();
    }
    let root = std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_RUNS_DIR), PathBuf::from);
    let stem = a.config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    root.join(format!("{stem}-{}-seed{}", cfg.model.combiner.label(), cfg.train.seed))
}

/// Trains one run; returns its directory.
pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(v) = a.variant {
        cfg.model.combiner = v.into();
    }
    train_into(&cfg, &train_run_dir(a, &cfg), a.force, true)
}

/// Trains `cfg` into `dir`, writing checkpoints, routing records, the loss curve,
/// last-epoch-pair metrics and test perplexities. With `progress`, one line per
/// epoch goes to stderr.
pub fn train_into(cfg: &RunConfig, dir: &Path, force: bool, progress: bool) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    if cfg.task == Task::Lm {
        cfg.corpus = fs::canonicalize(&cfg.corpus).map_err(|e| Error::io(&cfg.corpus, e))?;
    }
    let (data, mut model) = trainer::setup(&cfg)?;
    cfg.model = model.config.clone();
    prepare_run_dir(dir, force)?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;

    let variant = cfg.model.combiner.label();
    let seed = cfg.train.seed;
    let epochs = cfg.train.epochs;
    let checkpoints = trainer::train(&mut model, &data, &cfg, |ck| {
        let path = dir.join("checkpoints").join(checkpoint_name(ck.epoch));
        ck.save(&path)?;
        let rpath = dir.join("routing").join(format!("epoch_{:03}.csv", ck.epoch));
        let file = fs::File::create(&rpath).map_err(|e| Error::io(&rpath, e))?;
        ck.record.write_csv(std::io::BufWriter::new(file))?;
        if progress {
            eprintln!(
                "[{variant} seed {seed}] epoch {}/{epochs} train_loss {} eval_loss {:.4}",
                ck.epoch,
                ck.train_loss.map_or_else(|| "-".to_string(), |l| format!("{l:.4}")),
                ck.eval_loss
            );
        }
        Ok(())
    })?;

    let loss_rows: Vec<[String; 7]> = checkpoints
        .iter()
        .map(|c| {
            [
                variant.to_string(),
                seed.to_string(),
                c.epoch.to_string(),
                c.train_loss.map(format_value).unwrap_or_default(),
                format_value(c.eval_loss),
                format_value(c.eval_perplexity()),
                format_value(c.tau),
            ]
        })
        .collect();
    write_rows(&dir.join("loss.csv"), LOSS_HEADER, &loss_rows)?;

    if checkpoints.len() >= 2 {
        let n = checkpoints.len();
        let report = MetricsReport::build(
            variant,
            seed,
            &checkpoints[n - 2].record,
            &checkpoints[n - 1].record,
            None,
        )?;
        write_report_files(dir, &report, None, &checkpoints[n - 1].record, None)?;
    }
    if let TaskData::Lm(_) = data {
        let last = checkpoints.last().expect("initial checkpoint always exists");
        write_eval(dir, last, &data, cfg.attack_fraction)?;
    }
    Ok(dir.to_path_buf())
}

/// Test perplexity of `ck`'s model on clean and token-swap-attacked text.
///
/// Attacked inputs are scored against the clean next tokens. Attack positions come
/// from the run seed's attack stream, so every variant of a seed sees the same positions.
pub fn attacked_perplexities(ck: &Checkpoint, data: &TaskData, fraction: f64) -> Result<(f64, f64)> {
    let TaskData::Lm(corpus) = data else {
        return Err(Error::Usage("perplexity is defined for the language-modeling task".into()));
    };
    let model = ck.model()?;
    let seq_len = ck.config.train.seq_len;
    let test = corpus.test_ids();
    let clean = trainer::evaluate_ppl(&model, test, seq_len, ck.tau)?;
    let attacked_inputs = token_swap_attack(test, fraction, attack_seed(ck.config.train.seed))?;
    let attacked = attacked_ppl(&model, &attacked_inputs, test, seq_len, ck.tau)?;
    Ok((clean, attacked))
}

fn attack_seed(run_seed: u64) -> u64 {
    run_seed ^ (streams::ATTACK << 32)
}

/// Perplexity of predicting `clean[t+1]` from the (attacked) prefix `inputs[..=t]`.
fn attacked_ppl(model: &trainer::Model, inputs: &[usize], clean: &[usize], seq_len: usize, tau: f64) -> Result<f64> {
    if clean.len() < 2 || inputs.len() != clean.len() {
        return Err(Error::Usage("attacked perplexity needs aligned streams of at least two tokens".into()));
    }
    let predictions = clean.len() - 1;
    let mut total = 0.0;
    let mut s = 0;
    while s < predictions {
        let len = seq_len.min(predictions - s);
        let batch = trainer::Batch {
            input: trainer::BatchInput::Tokens(inputs[s..s + len].to_vec()),
            targets: clean[s + 1..s + len + 1].to_vec(),
            seq_len: len,
        };
        let (loss, _) = model.evaluate_batch(&batch, tau)?;
        total += loss * len as f64;
        s += len;
    }
    Ok((total / predictions as f64).exp())
}

fn write_eval(dir: &Path, ck: &Checkpoint, data: &TaskData, fraction: f64) -> Result<(f64, f64)> {
    let (clean, attacked) = attacked_perplexities(ck, data, fraction)?;
    let variant = ck.config.model.combiner.label().to_string();
    let seed = ck.config.train.seed.to_string();
    let epoch = ck.epoch.to_string();
    let rows = [
        [variant.clone(), seed.clone(), epoch.clone(), "test".into(), format_value(0.0), format_value(clean)],
        [variant, seed, epoch, "test_attacked".into(), format_value(fraction), format_value(attacked)],
    ];
    write_rows(&dir.join("eval.csv"), EVAL_HEADER, &rows)?;
    Ok((clean, attacked))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(f64, f64)> {
    let epochs = checkpoint_epochs(&a.run)?;
    let epoch = a.epoch.unwrap_or(*epochs.last().expect("nonempty"));
    if !epochs.contains(&epoch) {
        return Err(Error::Usage(format!("{} has no checkpoint for epoch {epoch}", a.run.display())));
    }
    let ck = load_checkpoint(&a.run, epoch)?;
    let data = TaskData::prepare(&ck.config)?;
    let fraction = a.attack_fraction.unwrap_or(ck.config.attack_fraction);
    write_eval(&a.run, &ck, &data, fraction)
}

fn write_report_files(
    dir: &Path,
    report: &MetricsReport,
    baseline: Option<(&str, &RoutingRecord)>,
    final_record: &RoutingRecord,
    only: Option<&str>,
) -> Result<()> {
    let want = |f: &str| only.is_none_or(|o| o == f);
    let variant = report.variant.clone();
    let seed = report.seed.to_string();
    if want("csv") {
        let rows: Vec<[String; 7]> = report
            .layers
            .iter()
            .map(|l| {
                [
                    variant.clone(),
                    seed.clone(),
                    report.epoch_a.to_string(),
                    report.epoch_b.to_string(),
                    l.layer.to_string(),
                    format_value(l.fluctuation_rate),
                    format_value(l.set_change_rate),
                ]
            })
            .collect();
        write_rows(&dir.join("fluctuation.csv"), FLUCTUATION_HEADER, &rows)?;

        let mut load_rows = Vec::new();
        let mut push_load = |name: &str, rec: &RoutingRecord| -> Result<()> {
            for (l, dist) in crate::metrics::load_distribution(rec)?.iter().enumerate() {
                for (e, f) in dist.fractions.iter().enumerate() {
                    load_rows.push([
                        name.to_string(),
                        seed.clone(),
                        rec.epoch.to_string(),
                        l.to_string(),
                        e.to_string(),
                        format_value(*f),
                    ]);
                }
            }
            Ok(())
        };
        push_load(&variant, final_record)?;
        if let Some((name, b)) = baseline {
            push_load(name, b)?;
        }
        write_rows(&dir.join("load.csv"), LOAD_HEADER, &load_rows)?;

        if let Some((name, b)) = baseline {
            let base_ent = mean_decision_entropy(b)?;
            let rows: Vec<[String; 8]> = report
                .layers
                .iter()
                .map(|l| {
                    [
                        variant.clone(),
                        name.to_string(),
                        seed.clone(),
                        report.epoch_b.to_string(),
                        l.layer.to_string(),
                        format_value(l.mean_decision_entropy),
                        format_value(base_ent[l.layer]),
                        format_value(l.entropy_ratio.unwrap_or(f64::NAN)),
                    ]
                })
                .collect();
            write_rows(&dir.join("entropy_ratio.csv"), ENTROPY_RATIO_HEADER, &rows)?;
        }
        let path = dir.join("metrics.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        report.write_csv(std::io::BufWriter::new(file))?;
    }
    if want("json") {
        let path = dir.join("metrics.json");
        fs::write(&path, report.to_json()? + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Records and labels needed for an analysis of `run` against an optional baseline.
struct Analysis {
    report: MetricsReport,
    final_record: RoutingRecord,
    baseline: Option<(String, RoutingRecord)>,
}

fn analysis(run: &Path, baseline: Option<&Path>) -> Result<Analysis> {
    let epochs = checkpoint_epochs(run)?;
    if epochs.len() < 2 {
        return Err(Error::Usage(format!(
            "{} has a single checkpoint; fluctuation needs two epochs",
            run.display()
        )));
    }
    let a = load_checkpoint(run, epochs[epochs.len() - 2])?;
    let b = load_checkpoint(run, epochs[epochs.len() - 1])?;
    if a.eval_fingerprint != b.eval_fingerprint {
        return Err(Error::Alignment("checkpoints of one run used different evaluation sets".into()));
    }
    let base = match baseline {
        Some(dir) => {
            let ck = load_checkpoint(dir, b.epoch).map_err(|e| match e {
                Error::Io { .. } => Error::Alignment(format!(
                    "baseline {} has no checkpoint for epoch {}",
                    dir.display(),
                    b.epoch
                )),
                other => other,
            })?;
            if ck.eval_fingerprint != b.eval_fingerprint {
                return Err(Error::Alignment(format!(
                    "baseline {} was evaluated on a different token set",
                    dir.display()
                )));
            }
            Some((ck.config.model.combiner.label().to_string(), ck.record))
        }
        None => None,
    };
    let report = MetricsReport::build(
        b.config.model.combiner.label(),
        b.config.train.seed,
        &a.record,
        &b.record,
        base.as_ref().map(|(n, r)| (n.as_str(), r)),
    )?;
    Ok(Analysis {
        report,
        final_record: b.record,
        baseline: base,
    })
}

/// Writes `analysis/` inside `run`; returns the report.
pub fn cmd_analyze(run: &Path, baseline: Option<&Path>) -> Result<MetricsReport> {
    let an = analysis(run, baseline)?;
    let out = run.join("analysis");
    create_dir(&out)?;
    let base = an.baseline.as_ref().map(|(n, r)| (n.as_str(), r));
    write_report_files(&out, &an.report, base, &an.final_record, None)?;
    Ok(an.report)
}

/// Writes `export/` inside `run` in the requested format.
pub fn cmd_export(run: &Path, format: &str, baseline: Option<&Path>) -> Result<PathBuf> {
    if format != "csv" && format != "json" {
        return Err(Error::Usage(format!("unknown export format '{format}', expected csv or json")));
    }
    let an = analysis(run, baseline)?;
    let out = run.join("export");
    create_dir(&out)?;
    let base = an.baseline.as_ref().map(|(n, r)| (n.as_str(), r));
    write_report_files(&out, &an.report, base, &an.final_record, Some(format))?;
    Ok(out)
}

fn report_row(r: &OracleReport) -> [String; 5] {
    let max_se = r.se.iter().copied().fold(0.0, f64::max);
    [
        r.quantity.clone(),
        r.instance_seed.to_string(),
        format_value(r.max_abs_error()),
        format_value(max_se),
        r.pass.to_string(),
    ]
}

/// Runs every oracle suite; exit code 5 names the first failing check.
pub fn cmd_oracle(a: &OracleArgs) -> Result<i32> {
    let size = InstanceSize {
        tokens: a.tokens,
        heads: a.heads,
        experts: a.experts,
        dim: a.dim,
        d_qk: a.d_qk,
    };
    size.check()?;
    let cfg = SuiteConfig {
        base_seed: a.seed,
        instances: a.instances,
        size,
        posterior_samples: a.posterior_samples,
        chain_samples: a.chain_samples,
        bound_instances: a.bound_instances,
        ..Default::default()
    };
    let fault = if a.inject_fault { Fault::FlipPosteriorEntry } else { Fault::None };
    let reports = run_all_suites(&cfg, fault)?;
    let mut stdout = std::io::stdout().lock();
    for r in &reports {
        let _ = writeln!(
            stdout,
            "{} {} seed {} max_abs_error {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.quantity,
            r.instance_seed,
            format_value(r.max_abs_error())
        );
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let rows: Vec<[String; 5]> = reports.iter().map(report_row).collect();
        write_rows(&dir.join("oracle.csv"), ORACLE_HEADER, &rows)?;
    }
    match reports.iter().find(|r| !r.pass) {
        Some(r) => {
            eprintln!("oracle failure: {} on instance seed {}", r.quantity, r.instance_seed);
            Ok(EXIT_ORACLE)
        }
        None => Ok(EXIT_OK),
    }
}
