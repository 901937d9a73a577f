//! Command-line driver for data preparation, training and analysis.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data,
//! format or I/O errors.

pub mod config;
mod logging;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use rearec::data::{
    assign_groups, chronological_split, load_interactions, preprocess, synth_sequences, GroupKind, SequenceDataset, Split,
    SynthConfig, Transitions,
};
use rearec::encoder::{EncoderConfig, ModelParams};
use rearec::evaluation::{
    bench_latency, evaluate_steps, mean_offdiagonal, posthoc_oracle, rank_trajectory, state_similarity, subgroup_report,
    ModelScorer,
};
use rearec::reasoning::{reason, Strategy};
use rearec::training::{fit, load_checkpoint, save_checkpoint, CheckpointMeta};
use rearec::{Error, Result};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "rearec", version, about = "Sequential recommendation with latent multi-step reasoning")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Directory for every output file.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Log level for NDJSON events on stderr.
    #[arg(long, global = true, value_enum, default_value = "info")]
    log_level: LogLevel,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LogLevel {
    Off,
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl From<LogLevel> for log::LevelFilter {
    fn from(l: LogLevel) -> Self {
        match l {
            LogLevel::Off => Self::Off,
            LogLevel::Error => Self::Error,
            LogLevel::Warn => Self::Warn,
            LogLevel::Info => Self::Info,
            LogLevel::Debug => Self::Debug,
            LogLevel::Trace => Self::Trace,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, filter and split an interaction log into `dataset.json`.
    Prepare(PrepareArgs),
    /// Write a synthetic regime-switching interaction log.
    Synth(SynthArgs),
    /// Train a model and write `model.ckpt` and `history.csv`.
    #[command(after_help = config::schema_help())]
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint; writes `metrics.csv` and `metrics.json`.
    Eval(EvalArgs),
    /// Per-subgroup metrics; writes `groups.csv` and `groups.json`.
    Groups(GroupsArgs),
    /// Fixed-step metrics plus the per-example best-step oracle; writes `oracle.csv`.
    Oracle(OracleArgs),
    /// Target rank after each reasoning step; writes `trajectories.csv`.
    Trace(TraceArgs),
    /// Cosine similarity between reasoning states; writes `similarity.csv`.
    Similarity(SimilarityArgs),
    /// Test-pass wall-clock per step count; writes `latency.csv`.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Raw interaction TSV; falls back to `interactions` in the config.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep events with rating strictly above this [default: 3].
    #[arg(long)]
    min_rating: Option<f64>,
    /// Minimum events per user and item [default: 5].
    #[arg(long)]
    k_core: Option<usize>,
    /// Validation start timestamp [default: 80% quantile].
    #[arg(long)]
    t1: Option<i64>,
    /// Test start timestamp [default: 90% quantile].
    #[arg(long)]
    t2: Option<i64>,
    /// Most recent items per prefix [default: 50].
    #[arg(long)]
    n_max: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TransitionArg {
    Random,
    Cycle,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    /// Hidden regimes.
    #[arg(long, default_value_t = 4)]
    regimes: usize,
    #[arg(long, default_value_t = 10)]
    min_len: usize,
    #[arg(long, default_value_t = 30)]
    max_len: usize,
    /// Probability of a uniformly random next item.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Per-step probability of switching regime.
    #[arg(long, default_value_t = 0.1)]
    switch_prob: f64,
    #[arg(long, value_enum, default_value = "random")]
    transitions: TransitionArg,
    /// Output file [default: <out-dir>/interactions.tsv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prepared dataset JSON.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// base | erl | prl [default: base]
    #[arg(long)]
    objective: Option<String>,
    /// Reasoning steps during training [default: 0].
    #[arg(long)]
    k: Option<usize>,
    /// KL weight for erl [default: 0.01].
    #[arg(long)]
    lambda: Option<f64>,
    /// Base temperature for prl [default: 1.0].
    #[arg(long)]
    tau: Option<f64>,
    /// Temperature decay rate for prl [default: 1.0].
    #[arg(long)]
    alpha: Option<f64>,
    /// Noise variance for prl [default: 0.01].
    #[arg(long)]
    gamma: Option<f64>,
    /// Contrastive temperature for prl [default: 1.0].
    #[arg(long)]
    tau_c: Option<f64>,
    /// [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// [default: 128]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 200]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    patience: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Model width [default: 64].
    #[arg(long)]
    d: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    layers: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    heads: Option<usize>,
    /// [default: 50]
    #[arg(long)]
    n_max: Option<usize>,
    /// Reasoning positions supported at inference [default: 5].
    #[arg(long)]
    k_max: Option<usize>,
    /// causal | prefix [default: causal]
    #[arg(long)]
    mask_mode: Option<String>,
    /// [default: 0.2]
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset JSON [default: the one recorded in the checkpoint].
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// train | valid | test
    #[arg(long, default_value = "test")]
    split: String,
    /// last | mean [default: from the training objective]
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated reasoning steps [default: the training K].
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
    /// Rank items from the prefix below all others.
    #[arg(long)]
    exclude_history: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GroupArg {
    User,
    Item,
}

#[derive(Args, Debug)]
struct GroupsArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "user")]
    kind: GroupArg,
    #[arg(long, default_value_t = 4)]
    groups: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    steps: Vec<usize>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Deepest step considered [default: the checkpoint's k_max].
    #[arg(long)]
    k_max: Option<usize>,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated user ids [default: all users with examples in the split].
    #[arg(long, value_delimiter = ',')]
    users: Vec<String>,
    /// Reasoning steps [default: the checkpoint's k_max].
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct SimilarityArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated user ids [default: all users with examples in the split].
    #[arg(long, value_delimiter = ',')]
    users: Vec<String>,
    /// Reasoning steps [default: the checkpoint's k_max].
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum CacheArg {
    Cached,
    Uncached,
    Both,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    steps: Vec<usize>,
    #[arg(long, value_enum, default_value = "both")]
    cache: CacheArg,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    logging::init(cli.global.log_level.into());
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.global.workers.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = &cli.global.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    match &cli.command {
        Command::Prepare(a) => prepare(a, out),
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Groups(a) => groups(a, out),
        Command::Oracle(a) => oracle(a, out),
        Command::Trace(a) => trace(a, out),
        Command::Similarity(a) => similarity(a, out),
        Command::Bench(a) => bench(a, out),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn prepare(a: &PrepareArgs, out: &Path) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    cfg.set("interactions", a.input.as_ref().map(|p| p.display()));
    cfg.set("min_rating", a.min_rating);
    cfg.set("k_core", a.k_core);
    cfg.set("t1", a.t1);
    cfg.set("t2", a.t2);
    cfg.set("n_max", a.n_max);
    let input: PathBuf = cfg
        .get::<String>("interactions")?
        .ok_or_else(|| Error::Config("an input log is required (--input or `interactions`)".into()))?
        .into();
    let raw = load_interactions(&input)?;
    let log = preprocess(&raw, cfg.require("min_rating")?, cfg.require("k_core")?);
    if log.is_empty() {
        return Err(Error::Data("no interactions survive preprocessing".into()));
    }
    let t1 = match cfg.get("t1")? {
        Some(t) => t,
        None => log.timestamp_quantile(0.8).expect("nonempty log"),
    };
    let t2 = match cfg.get("t2")? {
        Some(t) => t,
        None => log.timestamp_quantile(0.9).expect("nonempty log"),
    };
    let ds = chronological_split(&log, t1, t2, cfg.require("n_max")?)?;
    log::info!(
        "{} of {} events kept; {} users, {} items; train/valid/test examples {}/{}/{}",
        log.len(),
        raw.len(),
        ds.num_users(),
        ds.num_items(),
        ds.examples_in(Split::Train).count(),
        ds.examples_in(Split::Valid).count(),
        ds.examples_in(Split::Test).count()
    );
    ds.save_json(&out.join("dataset.json"))
}

fn synth(a: &SynthArgs, out: &Path) -> Result<()> {
    let cfg = SynthConfig {
        num_users: a.users,
        num_items: a.items,
        regimes: a.regimes,
        min_len: a.min_len,
        max_len: a.max_len,
        noise: a.noise,
        switch_prob: a.switch_prob,
        transitions: match a.transitions {
            TransitionArg::Random => Transitions::Random,
            TransitionArg::Cycle => Transitions::Cycle,
        },
        seed: a.seed,
    };
    let log = synth_sequences(&cfg)?;
    let path = a.out.clone().unwrap_or_else(|| out.join("interactions.tsv"));
    log.save_tsv(&path)?;
    log::info!("wrote {} events to {}", log.len(), path.display());
    Ok(())
}

fn train(a: &TrainArgs, out: &Path) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    cfg.set("dataset", a.dataset.as_ref().map(|p| p.display()));
    cfg.set("objective", a.objective.as_ref());
    cfg.set("k", a.k);
    cfg.set("lambda", a.lambda);
    cfg.set("tau", a.tau);
    cfg.set("alpha", a.alpha);
    cfg.set("gamma", a.gamma);
    cfg.set("tau_c", a.tau_c);
    cfg.set("learning_rate", a.learning_rate);
    cfg.set("batch_size", a.batch_size);
    cfg.set("max_epochs", a.max_epochs);
    cfg.set("patience", a.patience);
    cfg.set("seed", a.seed);
    cfg.set("d", a.d);
    cfg.set("layers", a.layers);
    cfg.set("heads", a.heads);
    cfg.set("n_max", a.n_max);
    cfg.set("k_max", a.k_max);
    cfg.set("mask_mode", a.mask_mode.as_ref());
    cfg.set("dropout", a.dropout);

    let dataset: String = cfg
        .get("dataset")?
        .ok_or_else(|| Error::Config("a dataset is required (--dataset or `dataset`)".into()))?;
    let ds = SequenceDataset::load_json(Path::new(&dataset))?;
    let ecfg = cfg.encoder(ds.num_items())?;
    let tcfg = cfg.train()?;
    if tcfg.objective.k > ecfg.k_max {
        return Err(Error::Config(format!("k {} exceeds k_max {}", tcfg.objective.k, ecfg.k_max)));
    }
    let outcome = fit(&ds, &tcfg, &ecfg)?;
    log::info!("best validation NDCG@10 {:.5} at epoch {}", outcome.best_metric(), outcome.best_epoch);

    let mut meta = CheckpointMeta::new(ecfg);
    meta.train = Some(tcfg);
    meta.epoch = outcome.best_epoch;
    meta.history = outcome.history.clone();
    meta.dataset = Some(dataset);
    save_checkpoint(&outcome.params, &meta, &out.join("model.ckpt"))?;

    let mut csv = String::from("epoch,train_loss,valid_ndcg10\n");
    for h in &outcome.history {
        let _ = writeln!(csv, "{},{:.6},{:.6}", h.epoch, h.train_loss, h.valid_metric);
    }
    write(&out.join("history.csv"), &csv)
}

struct Loaded {
    params: ModelParams<f32>,
    meta: CheckpointMeta,
    ds: SequenceDataset,
    split: Split,
    strategy: Strategy,
}

impl Loaded {
    fn ecfg(&self) -> &EncoderConfig {
        &self.meta.encoder
    }

    fn train_k(&self) -> usize {
        self.meta.train.as_ref().map_or(0, |t| t.objective.k)
    }

    fn scorer(&self) -> ModelScorer<'_, f32> {
        ModelScorer::new(&self.params, self.ecfg(), self.strategy)
    }

    fn check_steps(&self, k: usize) -> Result<()> {
        if k > self.ecfg().k_max {
            return Err(Error::InvalidArgument(format!("{k} steps exceed the model's k_max {}", self.ecfg().k_max)));
        }
        Ok(())
    }

    /// Examples of the split, restricted to `users` when given.
    fn examples(&self, users: &[String]) -> Result<Vec<&rearec::data::Example>> {
        let wanted: Vec<usize> = users
            .iter()
            .map(|u| {
                self.ds
                    .user_index(u)
                    .ok_or_else(|| Error::Data(format!("unknown user `{u}`")))
            })
            .collect::<Result<_>>()?;
        Ok(self
            .ds
            .examples_in(self.split)
            .filter(|e| wanted.is_empty() || wanted.contains(&e.user))
            .collect())
    }
}

fn load_model(a: &ModelArgs) -> Result<Loaded> {
    let (params, meta) = load_checkpoint(&a.checkpoint)?;
    let ds_path = match (&a.dataset, &meta.dataset) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(Error::Config("checkpoint names no dataset; pass --dataset".into())),
    };
    let ds = SequenceDataset::load_json(&ds_path)?;
    if ds.num_items() != meta.encoder.num_items {
        return Err(Error::Data(format!(
            "dataset has {} items but the model was trained on {}",
            ds.num_items(),
            meta.encoder.num_items
        )));
    }
    let split: Split = a.split.parse()?;
    let strategy = match &a.strategy {
        Some(s) => s.parse()?,
        None => meta
            .train
            .as_ref()
            .map_or(Strategy::LastStep, |t| t.objective.objective.inference_strategy()),
    };
    Ok(Loaded {
        params,
        meta,
        ds,
        split,
        strategy,
    })
}

fn eval(a: &EvalArgs, out: &Path) -> Result<()> {
    let m = load_model(&a.model)?;
    let steps = if a.steps.is_empty() { vec![m.train_k()] } else { a.steps.clone() };
    for &k in &steps {
        m.check_steps(k)?;
    }
    let mut scorer = m.scorer();
    scorer.exclude_history = a.exclude_history;
    let report = evaluate_steps(&scorer, &m.ds, m.split, &steps, None)?;
    write(&out.join("metrics.csv"), &report.to_csv())?;
    write(&out.join("metrics.json"), &report.to_json())
}

fn groups(a: &GroupsArgs, out: &Path) -> Result<()> {
    let m = load_model(&a.model)?;
    for &k in &a.steps {
        m.check_steps(k)?;
    }
    let kind = match a.kind {
        GroupArg::User => GroupKind::UserByLength,
        GroupArg::Item => GroupKind::ItemByPopularity,
    };
    let assignment = assign_groups(&m.ds, kind, a.groups)?;
    let report = subgroup_report(&m.scorer(), &m.ds, m.split, &assignment, &a.steps)?;
    write(&out.join("groups.csv"), &report.to_csv())?;
    write(&out.join("groups.json"), &report.to_json())
}

fn oracle(a: &OracleArgs, out: &Path) -> Result<()> {
    let m = load_model(&a.model)?;
    let k_max = a.k_max.unwrap_or(m.ecfg().k_max);
    m.check_steps(k_max)?;
    let report = posthoc_oracle(&m.scorer(), &m.ds, m.split, k_max)?;
    write(&out.join("oracle.csv"), &report.to_csv())?;
    write(&out.join("oracle.json"), &report.to_json())
}

fn trace(a: &TraceArgs, out: &Path) -> Result<()> {
    let m = load_model(&a.model)?;
    let k = a.k.unwrap_or(m.ecfg().k_max);
    m.check_steps(k)?;
    let mut csv = String::from("user,position,target,step,rank\n");
    let mut last_user = usize::MAX;
    let mut position = 0;
    for ex in m.examples(&a.users)? {
        position = if ex.user == last_user { position + 1 } else { 0 };
        last_user = ex.user;
        let prefix = &ex.prefix[ex.prefix.len().saturating_sub(m.ecfg().n_max)..];
        let ranks = rank_trajectory(&m.params, m.ecfg(), prefix, ex.target, k)?;
        for (step, rank) in ranks.iter().enumerate() {
            let _ = writeln!(csv, "{},{position},{},{step},{rank}", m.ds.users[ex.user], m.ds.items[ex.target]);
        }
    }
    write(&out.join("trajectories.csv"), &csv)
}

fn similarity(a: &SimilarityArgs, out: &Path) -> Result<()> {
    let m = load_model(&a.model)?;
    let k = a.k.unwrap_or(m.ecfg().k_max);
    m.check_steps(k)?;
    let mut csv = String::from("user,position,i,j,cosine\n");
    let mut means = Vec::new();
    let mut last_user = usize::MAX;
    let mut position = 0;
    for ex in m.examples(&a.users)? {
        position = if ex.user == last_user { position + 1 } else { 0 };
        last_user = ex.user;
        let prefix = &ex.prefix[ex.prefix.len().saturating_sub(m.ecfg().n_max)..];
        let states = reason(prefix, k, &m.params, m.ecfg())?;
        let matrix = state_similarity(&states.states);
        means.extend(mean_offdiagonal(&matrix));
        for (i, row) in matrix.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let v = v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
                let _ = writeln!(csv, "{},{position},{i},{j},{v}", m.ds.users[ex.user]);
            }
        }
    }
    if !means.is_empty() {
        log::info!(
            "mean off-diagonal similarity {:.4} over {} examples",
            means.iter().sum::<f64>() / means.len() as f64,
            means.len()
        );
    }
    write(&out.join("similarity.csv"), &csv)
}

fn bench(a: &BenchArgs, out: &Path) -> Result<()> {
    let m = load_model(&a.model)?;
    for &k in &a.steps {
        m.check_steps(k)?;
    }
    let mut csv = String::new();
    for cached in [true, false] {
        let wanted = match a.cache {
            CacheArg::Both => true,
            CacheArg::Cached => cached,
            CacheArg::Uncached => !cached,
        };
        if !wanted {
            continue;
        }
        let report = bench_latency(&m.params, m.ecfg(), &m.ds, &a.steps, cached)?;
        let body = report.to_csv();
        if csv.is_empty() {
            csv.push_str(&body);
        } else {
            csv.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
        }
    }
    write(&out.join("latency.csv"), &csv)
}
