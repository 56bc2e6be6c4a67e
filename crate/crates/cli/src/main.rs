//! `alim` — generate noisy partial-label corpora, train with ALIM, run the
//! oracle suite and sweep `lambda`.
//!
//! ```bash
//! alim gen --n 4000 --c 4 --d 2 --q 0.3 --eta 0.3 --seed 1 --out data/
//! alim train --train data/train.ndjson --test data/test.ndjson \
//!     --lambda adaptive:0.3 --norm scale:1 --mixup --e0 80 --out runs/alim
//! alim verify --trials 1000 --seed 7
//! alim sweep --train data/train.ndjson --test data/test.ndjson --mixup --out runs/sweep
//! ```
//!
//! Every command accepts `--config FILE` (JSON); explicit flags win over the
//! file, which wins over built-in defaults. The effective configuration is
//! written to `config.json` next to the outputs and can be fed back through
//! `--config` to repeat a run exactly.
//!
//! Exit codes: 0 success, 1 usage or invalid configuration, 2 verification
//! failure, 3 I/O or malformed input.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alim::datagen::derive_seed;
use alim::io::{load_corpus, save_checkpoint, save_corpus, Corpus, MetricsWriter};
use alim::oracle::{run_suite, SuiteConfig};
use alim::{
    corrupt, make_gaussian_blobs, run_experiment, run_experiment_with, validate_corpus, AlimError, Architecture,
    CorruptionSpec, EpochMetrics, LabelRule, LambdaPolicy, Normalization, PartialSample, TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const TEST_SEED_TAG: u64 = 0x7e57;
const CORRUPTION_SEED_TAG: u64 = 0xc0de;
const FIXED_GRID: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.7];

#[derive(Debug)]
enum CliError {
    Usage(String),
    Verification(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Verification(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Verification(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<AlimError> for CliError {
    fn from(e: AlimError) -> Self {
        match e {
            AlimError::Io(_) | AlimError::Parse { .. } => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "alim", version, about = "Noisy partial label learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/test corpora from Gaussian blobs with ambiguity and noise.
    Gen(GenArgs),
    /// Train one model and write metrics plus a checkpoint.
    Train(TrainArgs),
    /// Run the closed-form, RC and quantile oracle checks.
    Verify(VerifyArgs),
    /// Train over a lambda grid plus the adaptive policy and tabulate accuracies.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// JSON file with any subset of the generation settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training samples.
    #[arg(long)]
    n: Option<usize>,
    /// Clean test samples [default: max(n / 4, c)].
    #[arg(long)]
    n_test: Option<usize>,
    /// Number of classes.
    #[arg(long)]
    c: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Standard deviation of each blob.
    #[arg(long)]
    spread: Option<f64>,
    /// Ambiguity: flip probability of each incorrect label.
    #[arg(long)]
    q: Option<f64>,
    /// Noise: probability that a sample loses its true label.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct GenConfig {
    n: usize,
    n_test: Option<usize>,
    c: usize,
    d: usize,
    spread: f64,
    q: f64,
    eta: f64,
    seed: u64,
    out: PathBuf,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 4000,
            n_test: None,
            c: 4,
            d: 2,
            spread: 0.5,
            q: 0.3,
            eta: 0.3,
            seed: 0,
            out: PathBuf::from("data"),
        }
    }
}

/// Training flags shared by `train` and `sweep`.
#[derive(Args, Debug)]
struct TrainFlags {
    /// JSON file with any subset of the experiment settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus (NDJSON).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test corpus (NDJSON, every sample needs `truth`).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `fixed:<v>` or `adaptive:<eta>`.
    #[arg(long)]
    lambda: Option<LambdaPolicy>,
    /// `onehot` or `scale:<K>`.
    #[arg(long)]
    norm: Option<Normalization>,
    /// `linear` or `mlp:<hidden>`.
    #[arg(long)]
    arch: Option<Architecture>,
    /// Warm-up epochs.
    #[arg(long)]
    e0: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Enable mixup after warm-up.
    #[arg(long)]
    mixup: bool,
    /// Disable mixup even if the config file enables it.
    #[arg(long, conflicts_with = "mixup")]
    no_mixup: bool,
    /// Beta(zeta, zeta) parameter of the mixup weight.
    #[arg(long)]
    zeta: Option<f64>,
    /// Weight of the mixup loss.
    #[arg(long)]
    lambda_mix: Option<f64>,
    /// Mix during warm-up too.
    #[arg(long)]
    mixup_warmup: bool,
    /// Use plain RC targets for every epoch (baseline).
    #[arg(long)]
    rc: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
struct ExperimentConfig {
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    out: Option<PathBuf>,
    training: TrainConfig,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Instances per check.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simplex grid step of the brute-force oracle (at most 1e-2).
    #[arg(long, default_value_t = 1e-2)]
    grid_res: f64,
    /// Class counts for the grid oracle (2 to 4); repeatable.
    #[arg(long = "c", value_delimiter = ',', default_values_t = [2usize, 3, 4])]
    classes: Vec<usize>,
    /// Write every individual check as NDJSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Fixed lambda values (comma separated).
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Estimated noise level for the adaptive row.
    #[arg(long)]
    eta: Option<f64>,
    /// Extra adaptive runs over these warm-up lengths.
    #[arg(long, value_delimiter = ',')]
    e0_grid: Option<Vec<usize>>,
    /// Extra adaptive runs over these mixup weights.
    #[arg(long, value_delimiter = ',')]
    lambda_mix_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct SweepConfig {
    experiment: ExperimentConfig,
    lambdas: Vec<f64>,
    eta: f64,
    e0_grid: Vec<usize>,
    lambda_mix_grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            lambdas: FIXED_GRID.to_vec(),
            eta: 0.3,
            e0_grid: Vec::new(),
            lambda_mix_grid: Vec::new(),
        }
    }
}

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn cmd_gen(args: GenArgs) -> CliResult<()> {
    let mut cfg: GenConfig = load_config(args.config.as_deref())?;
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { cfg.$field = v; })* };
    }
    set!(n, c, d, spread, q, eta, seed, out);
    if args.n_test.is_some() {
        cfg.n_test = args.n_test;
    }
    let n_test = cfg.n_test.unwrap_or((cfg.n / 4).max(cfg.c));

    let spec = CorruptionSpec::new(cfg.c, cfg.q, cfg.eta, derive_seed(cfg.seed, CORRUPTION_SEED_TAG))?;
    let points = make_gaussian_blobs::<f64>(cfg.n, cfg.c, cfg.d, cfg.spread, cfg.seed)?;
    let train = corrupt(&points, &spec)?;
    let stats = validate_corpus(&train, &spec)?;
    let test_points = make_gaussian_blobs::<f64>(n_test, cfg.c, cfg.d, cfg.spread, derive_seed(cfg.seed, TEST_SEED_TAG))?;
    let test = test_points
        .iter()
        .map(|p| PartialSample::exact(p, cfg.c))
        .collect::<Result<Vec<_>, _>>()?;

    create_dir(&cfg.out)?;
    save_corpus(&Corpus::new(train, Some(spec))?, cfg.out.join("train.ndjson"))?;
    save_corpus(&Corpus::new(test, None)?, cfg.out.join("test.ndjson"))?;
    write_json(&cfg.out.join("stats.json"), &stats)?;
    write_json(&cfg.out.join("config.json"), &cfg)?;
    println!(
        "wrote {} train / {} test samples to {}; mean |S| {:.3} (expect {:.3}), noise {:.3} (expect {:.3})",
        cfg.n,
        n_test,
        cfg.out.display(),
        stats.mean_candidate_size,
        stats.expected_candidate_size,
        stats.noise_fraction,
        stats.expected_noise_fraction
    );
    Ok(())
}

fn apply_train_flags(cfg: &mut ExperimentConfig, f: &TrainFlags) {
    let t = &mut cfg.training;
    if f.train.is_some() {
        cfg.train.clone_from(&f.train);
    }
    if f.test.is_some() {
        cfg.test.clone_from(&f.test);
    }
    if f.out.is_some() {
        cfg.out.clone_from(&f.out);
    }
    if let Some(v) = f.lambda {
        t.lambda_policy = v;
    }
    if let Some(v) = f.norm {
        t.norm = v;
    }
    if let Some(v) = f.arch {
        t.architecture = v;
    }
    if let Some(v) = f.e0 {
        t.e0 = v;
    }
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.lr {
        t.optimizer.base_lr = v;
    }
    if let Some(v) = f.momentum {
        t.optimizer.momentum = v;
    }
    if let Some(v) = f.weight_decay {
        t.optimizer.weight_decay = v;
    }
    if f.mixup {
        t.mixup.enabled = true;
    }
    if f.no_mixup {
        t.mixup.enabled = false;
    }
    if let Some(v) = f.zeta {
        t.mixup.zeta = v;
    }
    if let Some(v) = f.lambda_mix {
        t.mixup.lambda_mix = v;
    }
    if f.mixup_warmup {
        t.mixup.during_warmup = true;
    }
    if f.rc {
        t.rule = LabelRule::Rc;
    }
    if let Some(v) = f.seed {
        t.seed = v;
    }
}

struct Loaded {
    train: Vec<PartialSample<f64>>,
    test: Vec<PartialSample<f64>>,
    out: PathBuf,
}

fn load_experiment(cfg: &ExperimentConfig) -> CliResult<Loaded> {
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone().ok_or_else(|| CliError::Usage(format!("missing --{flag} (or \"{flag}\" in the config file)")))
    };
    let train_path = need(&cfg.train, "train")?;
    let test_path = need(&cfg.test, "test")?;
    let out = need(&cfg.out, "out")?;
    cfg.training.validate()?;
    let read = |path: &Path| -> CliResult<Corpus<f64>> {
        load_corpus(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    };
    let train = read(&train_path)?;
    let test = read(&test_path)?;
    if test.header.num_classes != train.header.num_classes || test.header.dim != train.header.dim {
        return Err(CliError::Usage(format!(
            "train corpus has c={}, d={} but test corpus has c={}, d={}",
            train.header.num_classes, train.header.dim, test.header.num_classes, test.header.dim
        )));
    }
    Ok(Loaded {
        train: train.samples,
        test: test.samples,
        out,
    })
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let mut cfg: ExperimentConfig = load_config(args.flags.config.as_deref())?;
    apply_train_flags(&mut cfg, &args.flags);
    let data = load_experiment(&cfg)?;
    create_dir(&data.out)?;
    write_json(&data.out.join("config.json"), &cfg)?;

    let mut writer = MetricsWriter::create(data.out.join("metrics.ndjson"))?;
    let output = run_experiment_with(&data.train, &data.test, &cfg.training, |m, _| writer.write(m))?;
    save_checkpoint(&output.model, data.out.join("model.json"))?;

    let last = output.metrics.last().ok_or_else(|| CliError::Usage("no epochs were run".into()))?;
    println!(
        "final test accuracy: {:.4} (train {:.4}, lambda {:.4}, {} epochs)",
        last.test_accuracy.unwrap_or(f64::NAN),
        last.train_accuracy.unwrap_or(f64::NAN),
        last.lambda,
        output.metrics.len()
    );
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> CliResult<()> {
    let config = SuiteConfig {
        trials: args.trials,
        seed: args.seed,
        grid_resolution: args.grid_res,
        grid_classes: args.classes,
    };
    let report = run_suite(&config)?;

    if let Some(path) = &args.out {
        let mut text = String::new();
        for r in &report.reports {
            text.push_str(&serde_json::to_string(r).map_err(|e| CliError::Io(e.to_string()))?);
            text.push('\n');
        }
        for q in &report.quantile {
            text.push_str(&serde_json::to_string(q).map_err(|e| CliError::Io(e.to_string()))?);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }

    let mut checks: Vec<&str> = Vec::new();
    for r in &report.reports {
        if !checks.contains(&r.check.as_str()) {
            checks.push(&r.check);
        }
    }
    for check in checks {
        let rows: Vec<_> = report.reports.iter().filter(|r| r.check == check).collect();
        let ok = rows.iter().filter(|r| r.passed).count();
        let worst = rows.iter().map(|r| r.max_abs_deviation).fold(0.0, f64::max);
        println!("{check:<20} {ok}/{} passed, max deviation {worst:.3e}", rows.len());
    }
    for q in &report.quantile {
        println!(
            "{:<20} eta={} lambda={:.4} flagged={:.4} violations={} {}",
            q.check,
            q.eta,
            q.lambda,
            q.flagged_fraction,
            q.equivalence_violations,
            if q.passed { "passed" } else { "FAILED" }
        );
    }
    if report.passed() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CliError::Verification(format!("{} checks failed", report.failures())))
    }
}

struct SweepRow {
    run: &'static str,
    policy: LambdaPolicy,
    e0: usize,
    lambda_mix: f64,
    metrics: Vec<EpochMetrics>,
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let mut cfg: SweepConfig = load_config(args.flags.config.as_deref())?;
    apply_train_flags(&mut cfg.experiment, &args.flags);
    if let Some(v) = args.lambdas {
        cfg.lambdas = v;
    }
    if let Some(v) = args.eta {
        cfg.eta = v;
    }
    if let Some(v) = args.e0_grid {
        cfg.e0_grid = v;
    }
    if let Some(v) = args.lambda_mix_grid {
        cfg.lambda_mix_grid = v;
    }
    let data = load_experiment(&cfg.experiment)?;
    let base = cfg.experiment.training.clone();
    let adaptive = LambdaPolicy::adaptive(cfg.eta)?;

    let mut plan: Vec<(&'static str, TrainConfig)> = Vec::new();
    for &value in &cfg.lambdas {
        plan.push(("fixed", TrainConfig {
            lambda_policy: LambdaPolicy::fixed(value)?,
            ..base.clone()
        }));
    }
    plan.push(("adaptive", TrainConfig {
        lambda_policy: adaptive,
        ..base.clone()
    }));
    for &e0 in &cfg.e0_grid {
        plan.push(("e0", TrainConfig {
            lambda_policy: adaptive,
            e0,
            ..base.clone()
        }));
    }
    for &lambda_mix in &cfg.lambda_mix_grid {
        let mut t = TrainConfig {
            lambda_policy: adaptive,
            ..base.clone()
        };
        t.mixup.lambda_mix = lambda_mix;
        plan.push(("lambda_mix", t));
    }
    for (_, t) in &plan {
        t.validate()?;
    }

    create_dir(&data.out)?;
    write_json(&data.out.join("config.json"), &cfg)?;
    let mut rows = Vec::with_capacity(plan.len());
    for (run, t) in plan {
        let out = run_experiment(&data.train, &data.test, &t)?;
        let row = SweepRow {
            run,
            policy: t.lambda_policy,
            e0: t.e0,
            lambda_mix: t.mixup.lambda_mix,
            metrics: out.metrics,
        };
        let _ = writeln!(std::io::stderr(), "done: {} {} e0={} lambda_mix={}", row.run, row.policy, row.e0, row.lambda_mix);
        rows.push(row);
    }

    let mut table = String::from("run\tpolicy\te0\tlambda_mix\tfinal_test_accuracy\tfinal_train_accuracy\tfinal_lambda\n");
    for r in &rows {
        let last = r.metrics.last();
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.run,
            r.policy,
            r.e0,
            r.lambda_mix,
            fmt(last.and_then(|m| m.test_accuracy)),
            fmt(last.and_then(|m| m.train_accuracy)),
            fmt(last.map(|m| m.lambda)),
        );
    }
    fs::write(data.out.join("sweep.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
