//! `dmr`: command-line driver for the whole pipeline.
//!
//! Settings resolve in three layers: built-in defaults, then `--config`,
//! then explicit flags. Every command that writes to an output directory
//! also writes the resolved settings there as `config.txt`, which can be
//! passed back through `--config` to repeat the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmr_core::checkpoint::{manifest_hash, Checkpoint};
use dmr_core::config::RunConfig;
use dmr_core::evaluation::report_table;
use dmr_core::interaction::{chrono_split, ingest_log, validate_log};
use dmr_core::network::{build_neighbor_index, NeighborIndex};
use dmr_core::pipeline::{
    prepare, prepare_with_index, sweep, trace_table, train_to, Prepared, SWEEP_NEIGHBOR_COUNTS,
};
use dmr_core::synth::{generate, pair_affinity, PlantedWorld};
use dmr_core::{Error, ErrorKind, Result, UserId};

#[derive(Parser, Debug)]
#[command(
    name = "dmr",
    version,
    about = "Dynamic multi-trend recommender",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a log file and list every malformed record.
    Validate(Common),
    /// Generate a planted-trend log with ground-truth trend labels.
    Synth(SynthArgs),
    /// Chronological per-user train/test split.
    Split(Common),
    /// Build the implicit user network over the training split.
    BuildNetwork(Common),
    /// Train a model, optionally resuming from a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and the popularity baseline on the test split.
    Evaluate(ModelArgs),
    /// Top-N items for one user.
    Recommend(RecommendArgs),
    /// Train and evaluate once per neighbor count.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Interaction log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any setting as `key=value`; repeatable and applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = PlantedWorld::default().n_users)]
    users: usize,
    #[arg(long, default_value_t = PlantedWorld::default().n_items)]
    items: usize,
    #[arg(long, default_value_t = PlantedWorld::default().n_categories)]
    categories: usize,
    #[arg(long, default_value_t = PlantedWorld::default().trends_per_user)]
    trends_per_user: usize,
    #[arg(long, default_value_t = PlantedWorld::default().interactions_per_user)]
    interactions: usize,
    #[arg(long, default_value_t = PlantedWorld::default().drift_prob)]
    drift_prob: f64,
    #[arg(long, default_value_t = PlantedWorld::default().click_noise)]
    click_noise: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from this checkpoint instead of fresh parameters.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Reuse a neighbor index written by `build-network`.
    #[arg(long)]
    network: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    network: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RecommendArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    user: u32,
    #[arg(long, default_value_t = 10)]
    n: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated neighbor counts.
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_NEIGHBOR_COUNTS)]
    neighbors: Vec<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(log) = &self.log {
            cfg.log = Some(log.clone());
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("--set expects key=value, got {kv:?}"))
            })?;
            cfg.set(k.trim(), v)?;
        }
        cfg.sync_seeds();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn need_log(cfg: &RunConfig) -> Result<&Path> {
    cfg.log.as_deref().ok_or_else(|| {
        Error::InvalidArgument("no log given (use --log or log = ... in the config)".into())
    })
}

fn need_out(cfg: &RunConfig) -> Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("no output directory given (use --out)".into()))
}

/// Creates the output directory and records the resolved settings in it.
fn open_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = need_out(cfg)?.to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    cfg.save(&dir.join("config.txt"))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn prepared(cfg: &RunConfig, network: Option<&Path>) -> Result<Prepared> {
    let full = ingest_log(need_log(cfg)?, cfg.log_format())?;
    match network {
        None => prepare(full, cfg),
        Some(path) => {
            let index = NeighborIndex::load(path)?;
            if index.config != cfg.network {
                return Err(Error::InvalidArgument(format!(
                    "neighbor index {} was built with different network settings",
                    path.display()
                )));
            }
            let split = chrono_split(&full, cfg.split_fraction)?;
            prepare_with_index(full, split, index, cfg)
        }
    }
}

fn run_validate(args: &Common) -> Result<()> {
    let cfg = args.resolve()?;
    let path = need_log(&cfg)?;
    let file = fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let report =
        validate_log(std::io::BufReader::new(file), cfg.log_format()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    for v in &report.violations {
        println!("{v}");
    }
    println!(
        "users={} items={} interactions={} violations={}",
        report.users,
        report.items,
        report.interactions,
        report.violations.len()
    );
    if report.violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "{} malformed records in {}",
            report.violations.len(),
            path.display()
        )))
    }
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let world = PlantedWorld {
        n_users: args.users,
        n_items: args.items,
        n_categories: args.categories,
        trends_per_user: args.trends_per_user,
        affinity: pair_affinity(args.categories, 0.5),
        interactions_per_user: args.interactions,
        drift_prob: args.drift_prob,
        click_noise: args.click_noise,
        seed: cfg.seed,
        ..PlantedWorld::default()
    };
    let dir = open_out(&cfg)?;
    let (log, truth) = generate(&world)?;
    log.save(&dir.join("log.csv"))?;
    truth.save(&dir.join("truth.csv"))?;
    let mut text = String::new();
    for (k, v) in [
        ("users", world.n_users.to_string()),
        ("items", world.n_items.to_string()),
        ("categories", world.n_categories.to_string()),
        ("trends_per_user", world.trends_per_user.to_string()),
        ("interactions", world.interactions_per_user.to_string()),
        ("drift_prob", world.drift_prob.to_string()),
        ("click_noise", world.click_noise.to_string()),
        ("click_rate", world.click_rate.to_string()),
        ("item_skew", world.item_skew.to_string()),
        ("trend_skew", world.trend_skew.to_string()),
        ("seed", world.seed.to_string()),
    ] {
        let _ = writeln!(text, "{k} = {v}");
    }
    write_text(&dir.join("world.txt"), &text)?;
    println!(
        "wrote {} interactions for {} users to {}",
        log.len(),
        log.num_users(),
        dir.display()
    );
    Ok(())
}

fn run_split(args: &Common) -> Result<()> {
    let cfg = args.resolve()?;
    let full = ingest_log(need_log(&cfg)?, cfg.log_format())?;
    let split = chrono_split(&full, cfg.split_fraction)?;
    let dir = open_out(&cfg)?;
    split.train.save(&dir.join("train.csv"))?;
    split.test.save(&dir.join("test.csv"))?;
    println!(
        "train={} test={} dropped_users={} dropped_interactions={}",
        split.train.len(),
        split.test.len(),
        split.dropped_users,
        split.dropped_interactions
    );
    Ok(())
}

fn run_build_network(args: &Common) -> Result<()> {
    let cfg = args.resolve()?;
    let full = ingest_log(need_log(&cfg)?, cfg.log_format())?;
    let split = chrono_split(&full, cfg.split_fraction)?;
    let index = build_neighbor_index(&split.train, &cfg.network)?;
    let dir = open_out(&cfg)?;
    index.save(&dir.join("network.idx"))?;
    let linked = index.lists().values().filter(|l| !l.is_empty()).count();
    println!("users={} with_neighbors={linked}", index.num_users());
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
        cfg.validate()?;
    }
    let prepared = prepared(&cfg, args.network.as_deref())?;
    let mut ck = match &args.resume {
        Some(path) => Checkpoint::load(path)?,
        None => prepared.init_checkpoint(cfg.seed)?,
    };
    let dir = open_out(&cfg)?;
    let rows = train_to(&prepared, &mut ck, &cfg)?;
    ck.save(&dir.join("model.ckpt"), &cfg.hash())?;
    // only the epochs run by this invocation
    let trace = trace_table(&rows);
    write_text(&dir.join("trace.csv"), &trace)?;
    if let Some(last) = rows.last() {
        println!(
            "epoch={} loss={:.6} steps={}",
            last.stats.epoch, last.stats.loss, last.stats.steps
        );
    }
    Ok(())
}

fn load_model(args: &ModelArgs) -> Result<(RunConfig, Prepared, Checkpoint)> {
    let cfg = args.common.resolve()?;
    let prepared = prepared(&cfg, args.network.as_deref())?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    if ck.params.config != prepared.model {
        return Err(Error::InvalidArgument(
            "checkpoint model settings differ from the run config".into(),
        ));
    }
    if let Some(hash) = manifest_hash(&args.checkpoint)? {
        let mut expect = cfg.clone();
        expect.train.epochs = ck.epochs_done;
        if hash != cfg.hash() && hash != expect.hash() {
            eprintln!("warning: checkpoint was trained under a different config");
        }
    }
    Ok((cfg, prepared, ck))
}

fn run_evaluate(args: &ModelArgs) -> Result<()> {
    let (cfg, prepared, ck) = load_model(args)?;
    let rows = vec![
        ("dmr".to_string(), prepared.evaluate(&ck.params, &cfg)?),
        (
            "popularity".to_string(),
            prepared.evaluate_popularity(&cfg)?,
        ),
    ];
    let table = report_table(&rows);
    let dir = open_out(&cfg)?;
    write_text(&dir.join("report.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn run_recommend(args: &RecommendArgs) -> Result<()> {
    if args.n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let (cfg, prepared, ck) = load_model(&args.model)?;
    let recs = prepared.recommend(&ck.params, UserId(args.user), args.n)?;
    let mut table = String::from("rank,item,score\n");
    for (rank, (item, score)) in recs.iter().enumerate() {
        let _ = writeln!(table, "{},{},{:.9}", rank + 1, item, score);
    }
    if cfg.out.is_some() {
        let dir = open_out(&cfg)?;
        write_text(&dir.join(format!("recommend_{}.csv", args.user)), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    if args.neighbors.is_empty() || args.neighbors.contains(&0) {
        return Err(Error::InvalidArgument(
            "neighbor counts must be >= 1".into(),
        ));
    }
    let full = ingest_log(need_log(&cfg)?, cfg.log_format())?;
    let dir = open_out(&cfg)?;
    let rows = sweep(&full, &cfg, &args.neighbors)?;
    let table = report_table(&rows);
    write_text(&dir.join("sweep.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate(a) => run_validate(a),
        Command::Synth(a) => run_synth(a),
        Command::Split(a) => run_split(a),
        Command::BuildNetwork(a) => run_build_network(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Recommend(a) => run_recommend(a),
        Command::Sweep(a) => run_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(e.kind());
            let kind = format!("{:?}", e.kind()).to_lowercase();
            let message = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error\tkind={kind}\tcode={code}\tmessage={message}");
            ExitCode::from(code)
        }
    }
}
