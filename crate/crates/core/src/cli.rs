//! Command-line front end. Every command that writes files also writes the
//! fully resolved configuration next to them; passing that file back with
//! `--config` reproduces the output.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ablation::{ablation_table, run_ablation, AblationConfig, Splits, Variant};
use crate::bench::{bench_pool, BenchConfig};
use crate::data::{
    generate_synthetic, load_features, read_json, synth_classes, write_json, write_synthetic, ClassVocabulary, Dataset,
    SynthSpec, Video, CLASSES_FILE,
};
use crate::error::Error;
use crate::eval::{average_map, default_deltas, load_eval_inputs};
use crate::gradcheck::run_gradient_suite;
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, SpottingModel};
use crate::pooling::{PoolKind, PoolSpec, TemporalWindow};
use crate::spotting::{dense_actionness, nms, SpotFile};
use crate::training::{chunks_for_model, train, TrainConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const CHECKPOINT_FILE: &str = "model.spkt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "actspot", version, about = "Action spotting with temporally-aware learnable pooling")]
struct Cli {
    /// Maximum number of worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset whose paired classes differ only in temporal order.
    GenSynth(GenSynthArgs),
    /// Train a spotting model on a dataset directory.
    Train(TrainArgs),
    /// Run dense inference and NMS over every feature file in a directory.
    Spot(SpotArgs),
    /// Score predictions against ground truth with the tolerance-swept Average-mAP.
    Eval(EvalArgs),
    /// Compare every analytic gradient against central finite differences.
    CheckGrad(CheckGradArgs),
    /// Time the literal and factored NetVLAD computations.
    BenchPool(BenchArgs),
    /// Train and evaluate every pooling variant on the same data.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with any subset of the resolved configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset seed; patterns and every video derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of training videos.
    #[arg(long)]
    games: Option<usize>,
    /// Number of validation videos.
    #[arg(long)]
    val_games: Option<usize>,
    /// Number of test videos.
    #[arg(long)]
    test_games: Option<usize>,
    /// Video length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Frames per second.
    #[arg(long)]
    frame_rate: Option<f64>,
    /// Feature dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Number of order-swapped class pairs.
    #[arg(long)]
    pairs: Option<usize>,
    /// Background noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Pattern strength added on top of the noise.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Actions placed in each video.
    #[arg(long)]
    actions_per_game: Option<usize>,
    /// Minimum spacing between actions in seconds.
    #[arg(long)]
    min_gap: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GenSynthConfig {
    out: PathBuf,
    synth: SynthSpec,
}

/// Architecture choices; dimensions, frame rate and class count come from
/// the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub pool: PoolKind,
    pub temporally_aware: bool,
    pub clusters: usize,
    pub window_s: f64,
    pub reduced_dim: Option<usize>,
    pub dropout: f64,
    pub normalize_concat: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            pool: PoolKind::NetVlad,
            temporally_aware: true,
            clusters: 64,
            window_s: 15.0,
            reduced_dim: Some(512),
            dropout: 0.4,
            normalize_concat: false,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, input_dim: usize, frame_rate: f64, classes: usize) -> ModelConfig {
        let clusters = if self.pool.has_clusters() { self.clusters } else { 0 };
        ModelConfig {
            input_dim,
            reduced_dim: self.reduced_dim,
            pool: PoolSpec {
                normalize_concat: self.normalize_concat,
                ..PoolSpec::new(self.pool, self.temporally_aware, clusters)
            },
            window: TemporalWindow::centered(frame_rate, self.window_s),
            action_classes: classes,
            background: true,
            dropout: self.dropout,
            normalize_frames: true,
        }
    }
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Pooling layer: max, avg, netvlad, netrvlad or vlad.
    #[arg(long, value_parser = parse_pool)]
    pool: Option<PoolKind>,
    /// Pool past and future halves of the window with separate heads.
    #[arg(long)]
    temporal: Option<bool>,
    /// Total cluster count, split evenly between halves when temporal.
    #[arg(long)]
    clusters: Option<usize>,
    /// Window length T in seconds.
    #[arg(long)]
    window: Option<f64>,
    /// Projection width; 0 disables the projection.
    #[arg(long)]
    reduced_dim: Option<usize>,
    /// Dropout probability on the pooled vector during training.
    #[arg(long)]
    dropout: Option<f64>,
}

impl ModelArgs {
    fn apply(&self, m: &mut ModelSettings) {
        set(&mut m.pool, self.pool);
        set(&mut m.temporally_aware, self.temporal);
        set(&mut m.clusters, self.clusters);
        set(&mut m.window_s, self.window);
        set(&mut m.dropout, self.dropout);
        if let Some(d) = self.reduced_dim {
            m.reduced_dim = (d > 0).then_some(d);
        }
    }
}

#[derive(Debug, Args)]
struct OptimArgs {
    /// Initial Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Training chunks per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Upper bound on training epochs.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without validation improvement before the rate is divided.
    #[arg(long)]
    patience: Option<usize>,
    /// Seed for initialization, shuffling and dropout.
    #[arg(long)]
    seed: Option<u64>,
}

impl OptimArgs {
    fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.initial_lr, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.max_epochs, self.max_epochs);
        set(&mut t.patience, self.patience);
        set(&mut t.seed, self.seed);
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory with train/ and val/ splits and classes.json.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the checkpoint and training log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with any subset of the resolved configuration, such as a previous run_config.json.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainRunConfig {
    data: PathBuf,
    out: PathBuf,
    model: ModelSettings,
    train: TrainConfig,
}

#[derive(Debug, Args)]
struct SpotArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of .feat files.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory, one prediction file per video.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with any subset of the resolved configuration, such as a previous run_config.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// NMS window in seconds; spots closer than half of it are suppressed.
    #[arg(long)]
    nms_window: Option<f64>,
    /// Drop spots below this confidence (default: keep all).
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SpotRunConfig {
    checkpoint: PathBuf,
    input: PathBuf,
    out: PathBuf,
    t_nms_s: f64,
    threshold: Option<f64>,
}

impl Default for SpotRunConfig {
    fn default() -> Self {
        Self { checkpoint: PathBuf::new(), input: PathBuf::new(), out: PathBuf::new(), t_nms_s: 30.0, threshold: None }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Prediction file, JSON array of prediction files, or directory of them.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Directory of .labels.json files.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Class vocabulary (default: classes.json next to the truth directory).
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Write the full report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with any subset of the resolved configuration, such as a previous run_config.json.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct EvalRunConfig {
    pred: PathBuf,
    truth: PathBuf,
    classes: Option<PathBuf>,
    out: Option<PathBuf>,
    deltas_s: Vec<f64>,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        Self { pred: PathBuf::new(), truth: PathBuf::new(), classes: None, out: None, deltas_s: default_deltas() }
    }
}

#[derive(Debug, Args)]
struct CheckGradArgs {
    /// Seed for the random inputs and models.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random end-to-end models.
    #[arg(long, default_value_t = 20)]
    models: usize,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Frames per sample.
    #[arg(long)]
    frames: Option<usize>,
    /// Number of clusters K.
    #[arg(long)]
    clusters: Option<usize>,
    /// Feature dimension D.
    #[arg(long)]
    dim: Option<usize>,
    /// Number of samples timed through each path.
    #[arg(long)]
    batch: Option<usize>,
    /// Seed for the random inputs and parameters.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the timing record as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with any subset of the resolved configuration, such as a previous run_config.json.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct BenchRunConfig {
    bench: BenchConfig,
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Existing dataset; a synthetic one is generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the comparison table and per-variant reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with any subset of the resolved configuration, such as a previous run_config.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the generated dataset and for training.
    #[arg(long)]
    seed: Option<u64>,
    /// Cluster budget of every clustering variant.
    #[arg(long)]
    clusters: Option<usize>,
    /// Upper bound on training epochs per variant.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Projection width; 0 disables the projection.
    #[arg(long)]
    reduced_dim: Option<usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct AblateRunConfig {
    data: Option<PathBuf>,
    out: PathBuf,
    synth: SynthSpec,
    ablation: AblationConfig,
}

fn parse_pool(s: &str) -> Result<PoolKind, String> {
    let lower = s.to_ascii_lowercase();
    let name = lower.strip_suffix("pool").unwrap_or(&lower);
    name.parse().map_err(|e: Error| e.to_string())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failed(Error),
    Check(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Failed(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failed(e) if e.is_numeric() => 3,
            CliError::Failed(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Failed(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn base_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => Ok(read_json(p)?),
    }
}

fn required(path: &Path, flag: &str) -> CliResult {
    if path.as_os_str().is_empty() {
        return Err(CliError::Usage(format!("missing --{flag} (or set it in --config)")));
    }
    Ok(())
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    command: &'a str,
    #[serde(flatten)]
    config: &'a T,
}

fn write_run_config<T: Serialize>(path: &Path, command: &str, config: &T) -> CliResult {
    write_json(path, &Tagged { command, config })?;
    Ok(())
}

/// Where a file output's resolved configuration goes.
fn run_config_beside(file: &Path) -> PathBuf {
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    file.with_file_name(format!("{stem}.{RUN_CONFIG_FILE}"))
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn gen_synth(args: GenSynthArgs) -> CliResult {
    let mut cfg: GenSynthConfig = base_config(args.config.as_deref())?;
    set(&mut cfg.out, args.out);
    let s = &mut cfg.synth;
    set(&mut s.seed, args.seed);
    set(&mut s.train_games, args.games);
    set(&mut s.val_games, args.val_games);
    set(&mut s.test_games, args.test_games);
    set(&mut s.duration_s, args.duration);
    set(&mut s.frame_rate, args.frame_rate);
    set(&mut s.dim, args.dim);
    set(&mut s.pairs, args.pairs);
    set(&mut s.sigma, args.sigma);
    set(&mut s.amplitude, args.amplitude);
    set(&mut s.actions_per_game, args.actions_per_game);
    set(&mut s.min_gap_s, args.min_gap);
    required(&cfg.out, "out")?;
    create_dir(&cfg.out)?;
    let videos = write_synthetic(&cfg.synth, &cfg.out)?;
    write_run_config(&cfg.out.join(RUN_CONFIG_FILE), "gen-synth", &cfg)?;
    let actions: usize = videos.iter().map(|v| v.labels.len()).sum();
    println!(
        "wrote {} videos ({} actions, {} classes) to {}",
        videos.len(),
        actions,
        cfg.synth.class_count(),
        cfg.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> CliResult {
    let mut cfg: TrainRunConfig = base_config(args.config.as_deref())?;
    set(&mut cfg.data, args.data);
    set(&mut cfg.out, args.out);
    args.model.apply(&mut cfg.model);
    args.optim.apply(&mut cfg.train);
    required(&cfg.data, "data")?;
    required(&cfg.out, "out")?;

    let dataset = Dataset::open(&cfg.data)?;
    let train_videos = dataset.load_split("train")?;
    let val_videos = dataset.load_split("val")?;
    let first = train_videos.first().ok_or(Error::Empty("training split"))?;
    let config = cfg.model.model_config(first.features.dim(), first.features.frame_rate, dataset.classes.len());
    let model = SpottingModel::new(config, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let train_chunks = chunks_for_model(&train_videos, &model)?;
    let val_chunks = chunks_for_model(&val_videos, &model)?;
    eprintln!(
        "{}: {} parameters, {} training / {} validation chunks",
        model.config().pool.kind.display_name(model.config().pool.temporally_aware),
        model.param_count().total,
        train_chunks.len(),
        val_chunks.len()
    );
    let mut progress = |r: &crate::training::EpochRecord| {
        eprintln!(
            "epoch {:>4}  train {:.5}  val {:.5}  lr {:.0e}{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lr,
            if r.improved { "  *" } else { "" }
        );
    };
    let outcome = train(model, &train_chunks, &val_chunks, &cfg.train, Some(&mut progress))?;

    create_dir(&cfg.out)?;
    save_checkpoint(&outcome.model, dataset.classes.names(), cfg.train.seed, &cfg.out.join(CHECKPOINT_FILE))?;
    outcome.log.write_jsonl(&cfg.out.join(TRAIN_LOG_FILE))?;
    write_run_config(&cfg.out.join(RUN_CONFIG_FILE), "train", &cfg)?;
    println!(
        "best epoch {} (val loss {:.6}) of {}; checkpoint in {}",
        outcome.log.best_epoch,
        outcome.log.best_val_loss,
        outcome.log.epochs.len(),
        cfg.out.display()
    );
    Ok(())
}

fn feature_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "feat") {
            paths.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

fn spot_cmd(args: SpotArgs) -> CliResult {
    let mut cfg: SpotRunConfig = base_config(args.config.as_deref())?;
    set(&mut cfg.checkpoint, args.checkpoint);
    set(&mut cfg.input, args.input);
    set(&mut cfg.out, args.out);
    set(&mut cfg.t_nms_s, args.nms_window);
    if args.threshold.is_some() {
        cfg.threshold = args.threshold;
    }
    required(&cfg.checkpoint, "checkpoint")?;
    required(&cfg.input, "input")?;
    required(&cfg.out, "out")?;

    let (model, meta) = load_checkpoint(&cfg.checkpoint)?;
    let classes = ClassVocabulary::new(meta.class_names)?;
    create_dir(&cfg.out)?;
    let files = feature_files(&cfg.input)?;
    let mut total = 0;
    for path in &files {
        let seq = load_features(path)?;
        let curve = dense_actionness(&model, &seq)?;
        let spots = nms(&curve, cfg.t_nms_s, cfg.threshold)?;
        total += spots.len();
        SpotFile::from_spots(seq.video_id.clone(), &spots, &classes)?
            .save(&cfg.out.join(format!("{}.json", seq.video_id)))?;
    }
    write_run_config(&cfg.out.join(RUN_CONFIG_FILE), "spot", &cfg)?;
    println!("{} spots over {} videos written to {}", total, files.len(), cfg.out.display());
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> CliResult {
    let mut cfg: EvalRunConfig = base_config(args.config.as_deref())?;
    set(&mut cfg.pred, args.pred);
    set(&mut cfg.truth, args.truth);
    if args.classes.is_some() {
        cfg.classes = args.classes;
    }
    if args.out.is_some() {
        cfg.out = args.out;
    }
    required(&cfg.pred, "pred")?;
    required(&cfg.truth, "truth")?;
    let classes_path = cfg.classes.clone().unwrap_or_else(|| {
        let truth = cfg.truth.canonicalize().unwrap_or_else(|_| cfg.truth.clone());
        truth.parent().map_or_else(|| PathBuf::from(CLASSES_FILE), |p| p.join(CLASSES_FILE))
    });
    let classes = ClassVocabulary::load(&classes_path)?;
    let videos = load_eval_inputs(&cfg.pred, &cfg.truth, &classes)?;
    let report = average_map(&videos, &classes, &cfg.deltas_s)?;
    print!("{}", report.to_table());
    if let Some(out) = &cfg.out {
        write_json(out, &report)?;
        write_run_config(&run_config_beside(out), "eval", &cfg)?;
    }
    Ok(())
}

fn check_grad(args: CheckGradArgs) -> CliResult {
    if args.models == 0 {
        return Err(CliError::Usage("--models must be at least 1".into()));
    }
    let report = run_gradient_suite(args.seed, args.models)?;
    print!("{}", report.to_table());
    if report.passed() {
        println!("all components within {:e}", report.tolerance);
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed (tolerance {:e})", report.tolerance)))
    }
}

fn bench_cmd(args: BenchArgs) -> CliResult {
    let mut cfg: BenchRunConfig = base_config(args.config.as_deref())?;
    set(&mut cfg.bench.frames, args.frames);
    set(&mut cfg.bench.clusters, args.clusters);
    set(&mut cfg.bench.dim, args.dim);
    set(&mut cfg.bench.batch, args.batch);
    set(&mut cfg.bench.seed, args.seed);
    if args.out.is_some() {
        cfg.out = args.out;
    }
    let report = bench_pool(&cfg.bench)?;
    let record = serde_json::to_string(&report).map_err(|e| Error::invalid(e.to_string()))?;
    println!("{record}");
    if let Some(out) = &cfg.out {
        write_json(out, &report)?;
        write_run_config(&run_config_beside(out), "bench-pool", &cfg)?;
    }
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> CliResult {
    let mut cfg: AblateRunConfig = base_config(args.config.as_deref())?;
    if args.data.is_some() {
        cfg.data = args.data;
    }
    set(&mut cfg.out, args.out);
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
        cfg.ablation.train.seed = seed;
    }
    if let Some(k) = args.clusters {
        cfg.ablation.variants = Variant::sweep(k);
    }
    set(&mut cfg.ablation.train.max_epochs, args.max_epochs);
    if let Some(d) = args.reduced_dim {
        cfg.ablation.reduced_dim = (d > 0).then_some(d);
    }
    required(&cfg.out, "out")?;

    let splits = match &cfg.data {
        Some(dir) => Splits::load(&Dataset::open(dir)?)?,
        None => {
            let videos = generate_synthetic(&cfg.synth)?;
            let pick = |split: &str| {
                videos
                    .iter()
                    .filter(|v| v.split == split)
                    .map(|v| Video { features: v.features.clone(), labels: v.labels.clone() })
                    .collect()
            };
            Splits { classes: synth_classes(&cfg.synth), train: pick("train"), val: pick("val"), test: pick("test") }
        }
    };
    let rows = run_ablation(&splits, &cfg.ablation)?;
    let table = ablation_table(&rows);
    print!("{table}");
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("ablation.json"), &rows)?;
    std::fs::write(cfg.out.join("ablation.txt"), &table).map_err(|e| Error::io(cfg.out.join("ablation.txt"), e))?;
    write_run_config(&cfg.out.join(RUN_CONFIG_FILE), "ablate", &cfg)?;
    Ok(())
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Spot(a) => spot_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::CheckGrad(a) => check_grad(a),
        Command::BenchPool(a) => bench_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage error, 2 data error, 3 numeric
/// failure or failed check.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
