//! `mmd` command-line tool: dataset generation, training, planning,
//! benchmarking and solution validation.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;
use thiserror::Error;

use mmd::bench::{emit_report, run_benchmark, run_trial, BenchAlgo, BenchConfig, ModelZoo, ReportFormat, Resources, TrialSettings};
use mmd::coordination::{DEFAULT_BATCH, DEFAULT_TIME_LIMIT, TILED_TIME_LIMIT};
use mmd::diffusion::{train, DenoiserModel, TrainConfig, VarianceSchedule};
use mmd::mapf::{CostMap, GridGraph};
use mmd::problem::{check_models, read_solution, validate_solution, write_solution, ProblemFile, SolutionStats};
use mmd::worlds::{Dataset, DemoConfig};
use mmd::{MmdError, RobotShape, TileKind, World};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("planning failed: {0}")]
    Planning(String),
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Planning(_) => 3,
            CliError::Validation(_) => 4,
        }
    }
}

impl From<MmdError> for CliError {
    fn from(e: MmdError) -> Self {
        CliError::Usage(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "mmd", version, about = "Multi-robot trajectory planning with single-robot diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a demonstration dataset for one map.
    GenData(GenDataArgs),
    /// Train a denoiser on a dataset.
    Train(TrainArgs),
    /// Solve a problem file and write a solution directory.
    Plan(PlanArgs),
    /// Run a benchmark described by a TOML config.
    Bench(BenchArgs),
    /// Re-check a solution directory for conflicts, endpoints and adherence.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    map: TileKind,
    #[arg(long, default_value_t = 3000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    problem: PathBuf,
    /// pp | cbs | ecbs | xcbs | xecbs | astar-ecbs | astardata-ecbs
    #[arg(long)]
    algo: BenchAlgo,
    /// Model checkpoint per map, as KIND=PATH.
    #[arg(long = "model", value_parser = parse_kind_path)]
    models: Vec<(TileKind, PathBuf)>,
    /// Dataset per map for data-derived grid costs, as KIND=PATH.
    #[arg(long = "data", value_parser = parse_kind_path)]
    datasets: Vec<(TileKind, PathBuf)>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seconds; defaults to 60, or 240 for multi-tile maps.
    #[arg(long)]
    time_limit: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Solution directory written by `plan`.
    #[arg(long)]
    solution: PathBuf,
}

fn parse_kind_path(s: &str) -> Result<(TileKind, PathBuf), String> {
    let (k, p) = s.split_once('=').ok_or_else(|| format!("expected KIND=PATH, got '{s}'"))?;
    Ok((k.parse().map_err(|e: MmdError| e.to_string())?, PathBuf::from(p)))
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let ds = Dataset::generate(a.map, a.n, a.seed, &DemoConfig::default())?;
    fs::create_dir_all(&a.out).map_err(MmdError::from)?;
    let path = a.out.join(format!("{}.mmds", a.map.name()));
    ds.write(BufWriter::new(fs::File::create(&path).map_err(MmdError::from)?))?;
    println!("{} {}", path.display(), ds.content_hash()?);
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    require_file(&a.data, "dataset")?;
    let ds = Dataset::read(BufReader::new(fs::File::open(&a.data).map_err(MmdError::from)?))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        hidden: a.hidden,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let out = train(&ds, &VarianceSchedule::default(), &cfg)?;
    fs::create_dir_all(&a.out).map_err(MmdError::from)?;
    let path = a.out.join(format!("{}.mmdm", ds.kind.name()));
    out.model.save(&path)?;
    let losses = serde_json::to_string(&out.losses).expect("losses serialize");
    fs::write(a.out.join("losses.json"), losses).map_err(MmdError::from)?;
    println!(
        "{} first loss {:.4} final loss {:.4}",
        path.display(),
        out.losses.first().copied().unwrap_or(f32::NAN),
        out.losses.last().copied().unwrap_or(f32::NAN)
    );
    Ok(())
}

/// Models and datasets loaded from explicit files; data cost maps are cached
/// under `cache` keyed by the dataset hashes.
struct FileResources {
    models: HashMap<TileKind, Arc<DenoiserModel>>,
    datasets: HashMap<TileKind, Arc<Dataset>>,
    cache: PathBuf,
}

impl Resources for FileResources {
    fn model(&self, kind: TileKind) -> mmd::Result<Arc<DenoiserModel>> {
        self.models
            .get(&kind)
            .cloned()
            .ok_or_else(|| MmdError::InvalidInput(format!("no --model given for map {}", kind.name())))
    }

    fn dataset(&self, kind: TileKind) -> mmd::Result<Arc<Dataset>> {
        self.datasets
            .get(&kind)
            .cloned()
            .ok_or_else(|| MmdError::InvalidInput(format!("no --data given for map {}", kind.name())))
    }

    fn data_cost_map(&self, pf: &ProblemFile, graph: &GridGraph, world: &World) -> mmd::Result<CostMap> {
        let mut key = format!("{:?}|{}|{}", pf.tiles, graph.step(), graph.radius());
        for k in pf.kinds() {
            key.push('|');
            key.push_str(&self.dataset(k)?.content_hash()?);
        }
        let path = self.cache.join(format!("costmap-{}.json", &mmd::worlds::hex_digest(key.as_bytes())[..16]));
        if path.is_file() {
            return CostMap::read(BufReader::new(fs::File::open(&path)?));
        }
        let datasets = pf.kinds().into_iter().map(|k| self.dataset(k)).collect::<mmd::Result<Vec<_>>>()?;
        let refs: Vec<&Dataset> = datasets.iter().map(|d| d.as_ref()).collect();
        let costs = mmd::mapf::cost_map_from_data(&mmd::mapf::world_demonstrations(world, &refs), graph);
        fs::create_dir_all(&self.cache)?;
        costs.write(BufWriter::new(fs::File::create(&path)?))?;
        Ok(costs)
    }
}

fn plan_cmd(a: &PlanArgs) -> CliResult<()> {
    require_file(&a.problem, "problem file")?;
    let pf = ProblemFile::load(&a.problem)?;
    let mut models = HashMap::new();
    for (kind, path) in &a.models {
        require_file(path, "model checkpoint")?;
        models.insert(*kind, Arc::new(DenoiserModel::load(path)?));
    }
    let mut datasets = HashMap::new();
    for (kind, path) in &a.datasets {
        require_file(path, "dataset")?;
        let ds = Dataset::read(BufReader::new(fs::File::open(path).map_err(MmdError::from)?))?;
        datasets.insert(*kind, Arc::new(ds));
    }
    if matches!(a.algo, BenchAlgo::Diffusion(_)) {
        check_models(&pf, &models).map_err(|e| CliError::Usage(format!("refusing models: {e}")))?;
    }
    let tiled = pf.tiles.len() > 1 || pf.tiles[0].len() > 1;
    let settings = TrialSettings {
        time_limit: a.time_limit.unwrap_or(if tiled { TILED_TIME_LIMIT } else { DEFAULT_TIME_LIMIT }),
        batch: a.batch,
        shape: RobotShape::default(),
        ..TrialSettings::default()
    };
    let res = FileResources {
        models,
        datasets,
        cache: a.out.join("cache"),
    };
    let out = run_trial(&pf, a.algo, a.seed, &res, &settings)?;
    let r = &out.record;
    let stats = SolutionStats {
        algo: a.algo.name().to_string(),
        seed: a.seed,
        success: r.success,
        failure: out.failure.clone(),
        wall_time: out.wall_time,
        nodes_expanded: out.nodes_expanded,
        nodes_generated: r.nodes,
        conflicts: r.conflicts,
        adherence: r.adherence.unwrap_or(0.0),
        mean_accel: r.mean_accel,
        endpoint_tol: out.endpoint_tol,
        tasks: out.tasks.clone(),
    };
    write_solution(&a.out, &pf, &out.trajs, &stats)?;
    info!("wrote solution to {}", a.out.display());
    println!(
        "{} success={} conflicts={} nodes={} time={:.2}s",
        a.algo, r.success, r.conflicts, r.nodes, out.wall_time
    );
    if !r.success {
        let why = out.failure.unwrap_or_else(|| format!("{} conflicts remain", r.conflicts));
        return Err(CliError::Planning(why));
    }
    Ok(())
}

fn bench_cmd(a: &BenchArgs) -> CliResult<()> {
    require_file(&a.config, "bench config")?;
    let text = fs::read_to_string(&a.config).map_err(MmdError::from)?;
    let cfg = BenchConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("malformed config: {e}")))?;
    let zoo = ModelZoo::new(&cfg.models_dir, cfg.train_missing);
    let report = run_benchmark(&cfg, &zoo)?;
    let files = emit_report(&report, &a.out, &[ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg])?;
    for agg in report.aggregates() {
        println!(
            "{:<12} {:<15} n={:<3} success={:>5.1}% adherence={} time={}",
            agg.map,
            agg.algo,
            agg.n,
            agg.success_rate,
            agg.adherence_mean.map_or("-".into(), |v| format!("{v:.3}")),
            agg.time_mean.map_or("-".into(), |v| format!("{v:.2}s")),
        );
    }
    for f in files {
        info!("wrote {}", f.display());
    }
    Ok(())
}

fn validate_cmd(a: &ValidateArgs) -> CliResult<()> {
    if !a.solution.is_dir() {
        return Err(CliError::Usage(format!("solution directory not found: {}", a.solution.display())));
    }
    let (pf, trajs, stats) = read_solution(&a.solution).map_err(|e| CliError::Validation(format!("unreadable solution: {e}")))?;
    let world = pf.world()?;
    let v = validate_solution(&world, &stats.tasks, &trajs, &RobotShape::default(), stats.endpoint_tol)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    println!("{}", serde_json::to_string(&v).expect("validation serializes"));
    if !v.is_valid() {
        return Err(CliError::Validation(format!(
            "{} conflicts, endpoints {}",
            v.conflicts,
            if v.endpoints_ok { "ok" } else { "mismatched" }
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Validate(a) => validate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
