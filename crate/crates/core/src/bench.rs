//! Experiment harness: scenario generation, a trained-model zoo, trial
//! execution and report output.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::info;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::coordination::{plan, Algorithm, Limits, DEFAULT_BATCH, DEFAULT_TIME_LIMIT, TILED_TIME_LIMIT};
use crate::diffusion::{train, DenoiserModel, TrainConfig, VarianceSchedule};
use crate::error::{MmdError, Result};
use crate::geometry::{disk_in_collision, sdf, RobotShape, TileCoord, TileKind, Vec2, World};
use crate::mapf::{cost_map_from_data, ecbs_grid, world_demonstrations, CostMap, GridGraph, GridOptions};
use crate::problem::{build_problem, validate_solution, ModelSet, ProblemFile, RobotTask, EXACT_ENDPOINT_TOL};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::trajectory::{mean_abs_acceleration, Trajectory};
use crate::worlds::{hex_digest, random_endpoints, Dataset, DemoConfig};

/// Minimum distance between any two starts (or any two goals).
pub const MIN_SEPARATION: f64 = 0.2;
/// Clearance from obstacles required of generated endpoints.
pub const ENDPOINT_CLEARANCE: f64 = 0.07;
pub const DEFAULT_SQUARE_HALF: f64 = 0.8;
pub const SKELETON_LENGTH: usize = 3;
const PLACEMENT_RETRIES: usize = 200;

/// Circle radius used for a single-tile map.
pub fn default_circle_radius(kind: TileKind) -> f64 {
    match kind {
        TileKind::Highways => 0.6,
        _ => 0.8,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Random,
    Circle,
    Weave,
    Tiled,
}

impl FromStr for ScenarioKind {
    type Err = MmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(ScenarioKind::Random),
            "circle" => Ok(ScenarioKind::Circle),
            "weave" => Ok(ScenarioKind::Weave),
            "tiled" => Ok(ScenarioKind::Tiled),
            other => Err(MmdError::InvalidInput(format!("unknown scenario '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    /// Tile grid, bottom row first.
    pub tiles: Vec<Vec<TileKind>>,
    pub n_robots: usize,
    pub circle_radius: f64,
    /// Half side of the square used by the weave layout.
    pub square_half: f64,
    pub seed: u64,
    /// Steps between consecutive robots' departures.
    pub stagger: usize,
}

impl Scenario {
    pub fn new(kind: ScenarioKind, tiles: Vec<Vec<TileKind>>, n_robots: usize, seed: u64) -> Self {
        let radius = default_circle_radius(tiles[0][0]);
        Scenario {
            kind,
            tiles,
            n_robots,
            circle_radius: radius,
            square_half: DEFAULT_SQUARE_HALF,
            seed,
            stagger: 0,
        }
    }
}

/// The 2x2 map used for tiled scenarios.
pub fn default_tiled_map() -> Vec<Vec<TileKind>> {
    vec![
        vec![TileKind::Empty, TileKind::Highways],
        vec![TileKind::Highways, TileKind::Empty],
    ]
}

fn clear(world: &World, p: &Vec2) -> bool {
    world.bounds().contains(p) && sdf(world, p) >= ENDPOINT_CLEARANCE
}

fn separated(points: &[Vec2], p: &Vec2) -> bool {
    points.iter().all(|q| (q - p).norm() >= MIN_SEPARATION)
}

/// Evenly spaced points on a closed curve with a random phase, paired with
/// their reflections through the world center.
fn antipodal_layout(world: &World, n: usize, rng: &mut Rng, curve: impl Fn(f64) -> Vec2) -> Result<Vec<(Vec2, Vec2)>> {
    let center = world.bounds().center();
    for _ in 0..PLACEMENT_RETRIES {
        let phase: f64 = rng.random_range(0.0..1.0);
        let starts: Vec<Vec2> = (0..n).map(|i| center + curve((phase + i as f64 / n as f64).fract())).collect();
        let pairs: Vec<(Vec2, Vec2)> = starts.iter().map(|s| (*s, center * 2.0 - s)).collect();
        let ok = pairs.iter().enumerate().all(|(i, (s, g))| {
            let prev_s: Vec<Vec2> = pairs[..i].iter().map(|p| p.0).collect();
            let prev_g: Vec<Vec2> = pairs[..i].iter().map(|p| p.1).collect();
            clear(world, s) && clear(world, g) && separated(&prev_s, s) && separated(&prev_g, g)
        });
        if ok {
            return Ok(pairs);
        }
    }
    Err(MmdError::InvalidInput(format!("cannot place {n} robots on the layout")))
}

fn square_point(half: f64, u: f64) -> Vec2 {
    let s = u * 8.0 * half;
    let side = 2.0 * half;
    match (s / side).floor() as usize {
        0 => Vec2::new(-half + s, -half),
        1 => Vec2::new(half, -half + (s - side)),
        2 => Vec2::new(half - (s - 2.0 * side), half),
        _ => Vec2::new(-half, half - (s - 3.0 * side)),
    }
}

/// Random walk over distinct adjacent tiles.
fn random_skeleton(world: &World, len: usize, rng: &mut Rng) -> Option<Vec<TileCoord>> {
    let (rows, cols) = (world.n_rows(), world.n_cols());
    let mut tiles = vec![TileCoord::new(rng.random_range(0..cols), rng.random_range(0..rows))];
    while tiles.len() < len {
        let last = *tiles.last().expect("non-empty");
        let options: Vec<TileCoord> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| TileCoord::new(c, r)))
            .filter(|t| t.is_adjacent(&last) && !tiles.contains(t))
            .collect();
        if options.is_empty() {
            return None;
        }
        tiles.push(options[rng.random_range(0..options.len())]);
    }
    Some(tiles)
}

/// Shared edges crossed by a skeleton, tagged with the seam index.
fn seam_slots(tiles: &[TileCoord]) -> Vec<(usize, TileCoord, TileCoord)> {
    tiles
        .windows(2)
        .enumerate()
        .map(|(l, w)| (l, w[0].min(w[1]), w[0].max(w[1])))
        .collect()
}

/// Deterministic problem for a scenario. Random draws use one stream per robot.
pub fn make_scenario(sc: &Scenario) -> Result<ProblemFile> {
    if sc.n_robots == 0 {
        return Err(MmdError::InvalidInput("scenario needs at least one robot".into()));
    }
    let world = World::from_tiles(sc.tiles.clone(), crate::geometry::DEFAULT_TILE_SIZE)?;
    let mut robots = Vec::with_capacity(sc.n_robots);
    match sc.kind {
        ScenarioKind::Circle | ScenarioKind::Weave => {
            let mut rng = rng_for(sc.seed, &[0x6c61]);
            let pairs = if sc.kind == ScenarioKind::Circle {
                let r = sc.circle_radius;
                antipodal_layout(&world, sc.n_robots, &mut rng, |u| {
                    let a = u * std::f64::consts::TAU;
                    Vec2::new(r * a.cos(), r * a.sin())
                })?
            } else {
                let h = sc.square_half;
                antipodal_layout(&world, sc.n_robots, &mut rng, |u| square_point(h, u))?
            };
            robots.extend(pairs.into_iter().map(|(start, goal)| RobotTask {
                start,
                goal,
                skeleton: None,
                hold: 0,
            }));
        }
        ScenarioKind::Random => {
            if world.n_rows() != 1 || world.n_cols() != 1 {
                return Err(MmdError::InvalidInput("random scenarios use a single tile".into()));
            }
            let kind = sc.tiles[0][0];
            let (mut starts, mut goals) = (Vec::new(), Vec::new());
            for i in 0..sc.n_robots {
                let mut rng = rng_for(sc.seed, &[0x7264, i as u64]);
                let found = (0..PLACEMENT_RETRIES).map(|_| random_endpoints(kind, &mut rng)).find(|(s, g)| {
                    separated(&starts, s) && separated(&goals, g)
                });
                let (s, g) = found.ok_or_else(|| MmdError::InvalidInput(format!("cannot place robot {i}")))?;
                starts.push(s);
                goals.push(g);
                robots.push(RobotTask {
                    start: s,
                    goal: g,
                    skeleton: None,
                    hold: 0,
                });
            }
        }
        ScenarioKind::Tiled => {
            let (mut starts, mut goals, mut seams) = (Vec::new(), Vec::new(), Vec::new());
            for i in 0..sc.n_robots {
                let mut rng = rng_for(sc.seed, &[0x746c, i as u64]);
                let mut placed = None;
                for _ in 0..PLACEMENT_RETRIES {
                    let Some(sk) = random_skeleton(&world, SKELETON_LENGTH, &mut rng) else { continue };
                    let (first, last) = (sk[0], sk[sk.len() - 1]);
                    let kf = world.tile_kind(first).expect("tile in grid");
                    let kl = world.tile_kind(last).expect("tile in grid");
                    let s = random_endpoints(kf, &mut rng).0 + world.tile_center(first);
                    let g = random_endpoints(kl, &mut rng).1 + world.tile_center(last);
                    let mine = seam_slots(&sk);
                    // Two robots crossing one edge in the same segment slot meet at its boundary point.
                    if mine.iter().any(|m| seams.contains(m)) || !separated(&starts, &s) || !separated(&goals, &g) {
                        continue;
                    }
                    placed = Some((sk, s, g, mine));
                    break;
                }
                let (sk, s, g, mine) = placed.ok_or_else(|| MmdError::InvalidInput(format!("cannot place robot {i}")))?;
                starts.push(s);
                goals.push(g);
                seams.extend(mine);
                robots.push(RobotTask {
                    start: s,
                    goal: g,
                    skeleton: Some(sk),
                    hold: 0,
                });
            }
        }
    }
    for (i, r) in robots.iter_mut().enumerate() {
        r.hold = sc.stagger * i;
        if disk_in_collision(&world, &r.start, RobotShape::default().radius) {
            return Err(MmdError::InvalidInput(format!("robot {i} start in collision")));
        }
    }
    let pf = ProblemFile {
        tiles: sc.tiles.clone(),
        robots,
        ..ProblemFile::single(sc.tiles[0][0], &[])
    };
    pf.check()?;
    Ok(pf)
}

// ---------------------------------------------------------------------------
// Model zoo

/// Source of trained models and demonstration datasets per map kind.
pub trait Resources: Sync {
    fn model(&self, kind: TileKind) -> Result<Arc<DenoiserModel>>;
    fn dataset(&self, kind: TileKind) -> Result<Arc<Dataset>>;

    fn models(&self, kinds: &[TileKind]) -> Result<ModelSet> {
        kinds.iter().map(|k| Ok((*k, self.model(*k)?))).collect()
    }

    /// Data-derived grid costs for a problem's world.
    fn data_cost_map(&self, pf: &ProblemFile, graph: &GridGraph, world: &World) -> Result<CostMap> {
        let datasets = pf.kinds().into_iter().map(|k| self.dataset(k)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Dataset> = datasets.iter().map(|d| d.as_ref()).collect();
        Ok(cost_map_from_data(&world_demonstrations(world, &refs), graph))
    }
}

/// Demonstration count, dataset seed and training settings for one map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooEntry {
    pub demos: usize,
    pub demo_seed: u64,
    pub train: TrainConfig,
}

impl ZooEntry {
    pub fn for_kind(kind: TileKind) -> Self {
        let (demos, epochs) = match kind {
            TileKind::DropRegion => (8000, 150),
            _ => (3000, 100),
        };
        ZooEntry {
            demos,
            demo_seed: 1,
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
        }
    }

    /// Short hash identifying the checkpoint this entry produces.
    pub fn key(&self, kind: TileKind) -> String {
        let text = format!("{kind:?}|{self:?}|{:?}|{:?}", VarianceSchedule::default(), DemoConfig::default());
        hex_digest(text.as_bytes())[..16].to_string()
    }
}

/// Trained models per map, cached as checkpoints under one directory.
pub struct ModelZoo {
    dir: PathBuf,
    train_missing: bool,
    entries: HashMap<TileKind, ZooEntry>,
    models: Mutex<HashMap<TileKind, Arc<DenoiserModel>>>,
    datasets: Mutex<HashMap<TileKind, Arc<Dataset>>>,
}

impl ModelZoo {
    /// With `train_missing`, absent checkpoints are trained and saved; otherwise they are an error.
    pub fn new(dir: impl Into<PathBuf>, train_missing: bool) -> Self {
        ModelZoo {
            dir: dir.into(),
            train_missing,
            entries: TileKind::ALL.iter().map(|k| (*k, ZooEntry::for_kind(*k))).collect(),
            models: Mutex::new(HashMap::new()),
            datasets: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_entry(mut self, kind: TileKind, entry: ZooEntry) -> Self {
        self.entries.insert(kind, entry);
        self
    }

    pub fn entry(&self, kind: TileKind) -> &ZooEntry {
        &self.entries[&kind]
    }

    pub fn checkpoint_path(&self, kind: TileKind) -> PathBuf {
        self.dir.join(format!("{}-{}.mmdm", kind.name(), self.entry(kind).key(kind)))
    }

    /// Per-epoch training losses saved next to the checkpoint.
    pub fn losses_path(&self, kind: TileKind) -> PathBuf {
        self.checkpoint_path(kind).with_extension("losses.json")
    }

    /// Loss curve of a checkpoint trained by this zoo, training it if needed.
    pub fn losses(&self, kind: TileKind) -> Result<Vec<f32>> {
        self.model(kind)?;
        let text = fs::read_to_string(self.losses_path(kind))?;
        serde_json::from_str(&text).map_err(|e| MmdError::Format(format!("losses: {e}")))
    }
}

impl Resources for ModelZoo {
    fn dataset(&self, kind: TileKind) -> Result<Arc<Dataset>> {
        if let Some(d) = self.datasets.lock().expect("dataset cache").get(&kind) {
            return Ok(d.clone());
        }
        let e = self.entry(kind);
        let ds = Arc::new(Dataset::generate(kind, e.demos, e.demo_seed, &DemoConfig::default())?);
        self.datasets.lock().expect("dataset cache").insert(kind, ds.clone());
        Ok(ds)
    }

    fn model(&self, kind: TileKind) -> Result<Arc<DenoiserModel>> {
        if let Some(m) = self.models.lock().expect("model cache").get(&kind) {
            return Ok(m.clone());
        }
        let path = self.checkpoint_path(kind);
        let model = if path.exists() {
            DenoiserModel::load(&path)?
        } else if self.train_missing {
            let ds = self.dataset(kind)?;
            info!("training {} model on {} demonstrations", kind.name(), ds.trajectories.len());
            let out = train(&ds, &VarianceSchedule::default(), &self.entry(kind).train)?;
            fs::create_dir_all(&self.dir)?;
            out.model.save(&path)?;
            fs::write(self.losses_path(kind), serde_json::to_string(&out.losses).expect("losses serialize"))?;
            out.model
        } else {
            return Err(MmdError::InvalidInput(format!("missing model checkpoint {}", path.display())));
        };
        let model = Arc::new(model);
        self.models.lock().expect("model cache").insert(kind, model.clone());
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Trials

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BenchAlgo {
    Diffusion(Algorithm),
    AstarEcbs,
    AstarDataEcbs,
}

impl BenchAlgo {
    pub fn name(self) -> &'static str {
        match self {
            BenchAlgo::Diffusion(a) => a.name(),
            BenchAlgo::AstarEcbs => "astar-ecbs",
            BenchAlgo::AstarDataEcbs => "astardata-ecbs",
        }
    }
}

impl fmt::Display for BenchAlgo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchAlgo {
    type Err = MmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "astar-ecbs" => Ok(BenchAlgo::AstarEcbs),
            "astardata-ecbs" => Ok(BenchAlgo::AstarDataEcbs),
            other => other.parse().map(BenchAlgo::Diffusion),
        }
    }
}

/// Result of one trial. Metric fields are `None` for failed trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub map: String,
    pub algo: String,
    pub n: usize,
    pub trial: usize,
    pub seed: u64,
    pub success: bool,
    pub conflicts: usize,
    pub adherence: Option<f64>,
    pub wall_time: Option<f64>,
    pub mean_accel: Option<f64>,
    pub nodes: usize,
}

/// Everything one trial produced, for callers that want the trajectories.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub record: TrialRecord,
    pub trajs: Vec<Trajectory>,
    /// Endpoints the trajectories were planned for.
    pub tasks: Vec<(Vec2, Vec2)>,
    pub endpoint_tol: f64,
    pub failure: Option<String>,
    pub nodes_expanded: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrialSettings {
    pub time_limit: f64,
    pub max_nodes: usize,
    pub batch: usize,
    pub shape: RobotShape,
}

impl Default for TrialSettings {
    fn default() -> Self {
        TrialSettings {
            time_limit: DEFAULT_TIME_LIMIT,
            max_nodes: Limits::default().max_nodes,
            batch: DEFAULT_BATCH,
            shape: RobotShape::default(),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Plans one problem and scores it with the shared validator. A trial
/// succeeds when there are no conflicts, every endpoint matches, and the
/// wall time is within the limit. Grid planners start at once and snap
/// endpoints to the nearest grid cell.
pub fn run_trial(pf: &ProblemFile, algo: BenchAlgo, seed: u64, res: &dyn Resources, settings: &TrialSettings) -> Result<TrialOutcome> {
    let world = pf.world()?;
    let clock = Instant::now();
    let (trajs, tasks, tol, failure, nodes, expanded, accel) = match algo {
        BenchAlgo::Diffusion(a) => {
            let models = res.models(&pf.kinds())?;
            let limits = Limits {
                wall_clock: settings.time_limit,
                max_nodes: settings.max_nodes,
            };
            let problem = build_problem(pf, &models, &settings.shape, limits, settings.batch)?;
            let sol = plan(&problem, a, seed)?;
            let tasks: Vec<(Vec2, Vec2)> = pf.robots.iter().map(|r| (r.start, r.goal)).collect();
            let accel = mean(sol.trajs.iter().filter_map(|t| mean_abs_acceleration(t).ok()));
            (sol.trajs, tasks, EXACT_ENDPOINT_TOL, sol.failure, sol.stats.nodes_generated, sol.stats.nodes_expanded, accel)
        }
        BenchAlgo::AstarEcbs | BenchAlgo::AstarDataEcbs => {
            let graph = GridGraph::from_world(&world, &settings.shape)?;
            let costs = if algo == BenchAlgo::AstarDataEcbs {
                res.data_cost_map(pf, &graph, &world)?
            } else {
                CostMap::uniform(&graph)
            };
            let snap = |p: &Vec2| {
                graph
                    .nearest_vertex(p)
                    .ok_or_else(|| MmdError::InvalidInput("grid has no free cells".into()))
            };
            let starts = pf.robots.iter().map(|r| snap(&r.start)).collect::<Result<Vec<_>>>()?;
            let goals = pf.robots.iter().map(|r| snap(&r.goal)).collect::<Result<Vec<_>>>()?;
            let tasks = starts.iter().zip(&goals).map(|(s, g)| (graph.position(*s), graph.position(*g))).collect();
            let opts = GridOptions {
                time_limit: settings.time_limit,
                ..GridOptions::default()
            };
            match ecbs_grid(&graph, &costs, &starts, &goals, &settings.shape, &opts) {
                Ok(sol) => (sol.trajs, tasks, EXACT_ENDPOINT_TOL, None, sol.nodes_generated, sol.nodes_expanded, None),
                Err(e @ (MmdError::TimeLimit(_) | MmdError::NodeLimit(_) | MmdError::NoPath(_))) => {
                    (Vec::new(), tasks, EXACT_ENDPOINT_TOL, Some(e.to_string()), 0, 0, None)
                }
                Err(e) => return Err(e),
            }
        }
    };
    let wall = clock.elapsed().as_secs_f64();
    let (success, conflicts, adherence) = if trajs.is_empty() {
        (false, 0, 0.0)
    } else {
        let v = validate_solution(&world, &tasks, &trajs, &settings.shape, tol)?;
        (v.is_valid() && wall <= settings.time_limit, v.conflicts, v.adherence)
    };
    let record = TrialRecord {
        map: map_label(&pf.tiles),
        algo: algo.name().to_string(),
        n: pf.robots.len(),
        trial: 0,
        seed,
        success,
        conflicts,
        adherence: success.then_some(adherence),
        wall_time: success.then_some(wall),
        mean_accel: if success { accel } else { None },
        nodes,
    };
    Ok(TrialOutcome {
        record,
        trajs,
        tasks,
        endpoint_tol: tol,
        failure,
        nodes_expanded: expanded,
        wall_time: wall,
    })
}

pub fn map_label(tiles: &[Vec<TileKind>]) -> String {
    if tiles.len() == 1 && tiles[0].len() == 1 {
        tiles[0][0].name().to_string()
    } else {
        format!("tiled-{}x{}", tiles[0].len(), tiles.len())
    }
}

// ---------------------------------------------------------------------------
// Benchmark configuration and reports

fn default_trials() -> usize {
    10
}

fn default_n() -> Vec<usize> {
    vec![2, 3, 4, 6]
}

fn default_workers() -> usize {
    1
}

fn default_models_dir() -> PathBuf {
    PathBuf::from("models")
}

/// Text configuration of a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub algos: Vec<String>,
    pub scenario: ScenarioKind,
    /// Single-tile maps to run; ignored when `tiles` is given.
    #[serde(default)]
    pub maps: Vec<TileKind>,
    /// One tiled map, bottom row first.
    #[serde(default)]
    pub tiles: Option<Vec<Vec<TileKind>>>,
    #[serde(default = "default_n")]
    pub n_robots: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Seconds per trial; defaults to 60, or 240 for tiled maps.
    #[serde(default)]
    pub time_limit: Option<f64>,
    #[serde(default)]
    pub max_nodes: Option<usize>,
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default)]
    pub stagger: usize,
    #[serde(default)]
    pub circle_radius: Option<f64>,
    #[serde(default)]
    pub lambda_obj: Option<f64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_models_dir")]
    pub models_dir: PathBuf,
    /// Train missing checkpoints instead of failing.
    #[serde(default)]
    pub train_missing: bool,
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| MmdError::Format(format!("bench config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.algos.is_empty() || self.n_robots.is_empty() || self.trials == 0 {
            return Err(MmdError::InvalidInput("config needs algos, n_robots and trials > 0".into()));
        }
        for a in &self.algos {
            a.parse::<BenchAlgo>()?;
        }
        if self.tiles.is_none() && self.maps.is_empty() {
            return Err(MmdError::InvalidInput("config names no maps".into()));
        }
        Ok(())
    }

    pub fn map_grids(&self) -> Vec<Vec<Vec<TileKind>>> {
        match &self.tiles {
            Some(t) => vec![t.clone()],
            None => self.maps.iter().map(|k| vec![vec![*k]]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub map: String,
    pub algo: String,
    pub n: usize,
    pub trials: usize,
    /// Percent of trials solved.
    pub success_rate: f64,
    pub adherence_mean: Option<f64>,
    pub time_mean: Option<f64>,
    pub accel_mean: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub records: Vec<TrialRecord>,
}

impl Report {
    /// Per (map, algo, n) summaries in first-seen order; metric means cover solved trials only.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut keys: Vec<(String, String, usize)> = Vec::new();
        for r in &self.records {
            let k = (r.map.clone(), r.algo.clone(), r.n);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(map, algo, n)| {
                let rs: Vec<&TrialRecord> = self.records.iter().filter(|r| r.map == map && r.algo == algo && r.n == n).collect();
                let solved = rs.iter().filter(|r| r.success).count();
                Aggregate {
                    success_rate: 100.0 * solved as f64 / rs.len() as f64,
                    adherence_mean: mean(rs.iter().filter_map(|r| r.adherence)),
                    time_mean: mean(rs.iter().filter_map(|r| r.wall_time)),
                    accel_mean: mean(rs.iter().filter_map(|r| r.mean_accel)),
                    trials: rs.len(),
                    map,
                    algo,
                    n,
                }
            })
            .collect()
    }
}

/// Runs every (map, algo, n, trial) combination. Scenario seeds depend only
/// on (map, n, trial), so all algorithms see the same problems.
pub fn run_benchmark(cfg: &BenchConfig, res: &dyn Resources) -> Result<Report> {
    cfg.check()?;
    let algos = cfg.algos.iter().map(|a| a.parse()).collect::<Result<Vec<BenchAlgo>>>()?;
    let mut jobs = Vec::new();
    for (m, tiles) in cfg.map_grids().into_iter().enumerate() {
        let tiled = tiles.len() > 1 || tiles[0].len() > 1;
        for &algo in &algos {
            for &n in &cfg.n_robots {
                for trial in 0..cfg.trials {
                    jobs.push((m, tiles.clone(), tiled, algo, n, trial));
                }
            }
        }
    }
    for tiles in cfg.map_grids() {
        for k in tiles.iter().flatten() {
            if algos.iter().any(|a| matches!(a, BenchAlgo::Diffusion(_))) {
                res.model(*k)?;
            }
        }
    }
    let results: Mutex<Vec<Option<Result<TrialRecord>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run_job = |idx: usize| -> Result<TrialRecord> {
        let (m, tiles, tiled, algo, n, trial) = &jobs[idx];
        let scenario_seed = derive_seed(cfg.seed, &[*m as u64, *n as u64, *trial as u64]);
        let mut sc = Scenario::new(if *tiled { ScenarioKind::Tiled } else { cfg.scenario }, tiles.clone(), *n, scenario_seed);
        sc.stagger = cfg.stagger;
        if let Some(r) = cfg.circle_radius {
            sc.circle_radius = r;
        }
        let mut pf = make_scenario(&sc)?;
        pf.lambda_obj = cfg.lambda_obj;
        let settings = TrialSettings {
            time_limit: cfg.time_limit.unwrap_or(if *tiled { TILED_TIME_LIMIT } else { DEFAULT_TIME_LIMIT }),
            max_nodes: cfg.max_nodes.unwrap_or(Limits::default().max_nodes),
            batch: cfg.batch.unwrap_or(DEFAULT_BATCH),
            shape: RobotShape::default(),
        };
        let out = run_trial(&pf, *algo, derive_seed(scenario_seed, &[1]), res, &settings)?;
        info!("{} {} n={} trial {}: success={}", out.record.map, algo, n, trial, out.record.success);
        Ok(TrialRecord {
            trial: *trial,
            ..out.record
        })
    };
    std::thread::scope(|s| {
        for _ in 0..cfg.workers.max(1) {
            s.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= jobs.len() {
                    break;
                }
                let r = run_job(idx);
                results.lock().expect("results")[idx] = Some(r);
            });
        }
    });
    let records = results
        .into_inner()
        .expect("results")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report { records })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

pub const TRIALS_CSV: &str = "trials.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUCCESS_SVG: &str = "success.svg";
pub const ADHERENCE_SVG: &str = "adherence.svg";

pub fn write_trials_csv(records: &[TrialRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| MmdError::Format(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| MmdError::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_trials_csv(text: &str) -> Result<Vec<TrialRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| MmdError::Format(format!("csv: {e}"))))
        .collect()
}

/// Line plot of one metric against robot count, one series per (map, algo).
pub fn line_plot_svg(aggs: &[Aggregate], title: &str, y_max: f64, y_label: &str, value: impl Fn(&Aggregate) -> Option<f64>) -> String {
    const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
    let (w, h, left, right, top, bottom) = (480.0, 320.0, 60.0, 20.0, 30.0, 45.0);
    let ns: Vec<usize> = {
        let mut v: Vec<usize> = aggs.iter().map(|a| a.n).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (n_lo, n_hi) = (ns[0] as f64, ns[ns.len() - 1] as f64);
    let x = |n: f64| {
        if n_hi > n_lo {
            left + (n - n_lo) / (n_hi - n_lo) * (w - left - right)
        } else {
            (left + w - right) / 2.0
        }
    };
    let y = |v: f64| h - bottom - v / y_max * (h - top - bottom);
    let mut series: Vec<String> = Vec::new();
    for a in aggs {
        let label = format!("{}/{}", a.map, a.algo);
        if !series.contains(&label) {
            series.push(label);
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - bottom,
        w - right,
        h - bottom
    );
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, h - bottom);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
            left - 5.0,
            y(v) + 3.0,
            fmt_tick(v)
        );
    }
    for n in &ns {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{n}</text>"#,
            x(*n as f64),
            h - bottom + 14.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">robots</text>"#, (left + w - right) / 2.0, h - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="11" transform="rotate(-90 14 {})">{y_label}</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0
    );
    for (i, label) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = aggs
            .iter()
            .filter(|a| format!("{}/{}", a.map, a.algo) == *label)
            .filter_map(|a| value(a).map(|v| format!("{:.1},{:.1}", x(a.n as f64), y(v))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{label}</title></polyline>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{label}</text>"#,
            left + 8.0,
            top + 12.0 * (i + 1) as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Writes the requested report files into `dir` and returns their paths.
pub fn emit_report(report: &Report, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    if report.records.is_empty() {
        return Err(MmdError::InvalidInput("report has no trials".into()));
    }
    fs::create_dir_all(dir)?;
    let aggs = report.aggregates();
    let mut out = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Csv => {
                let p = dir.join(TRIALS_CSV);
                fs::write(&p, write_trials_csv(&report.records)?)?;
                out.push(p);
            }
            ReportFormat::Json => {
                let p = dir.join(SUMMARY_JSON);
                let text = serde_json::to_string_pretty(&aggs).map_err(|e| MmdError::Format(format!("summary: {e}")))?;
                fs::write(&p, text)?;
                out.push(p);
            }
            ReportFormat::Svg => {
                let p = dir.join(SUCCESS_SVG);
                fs::write(&p, line_plot_svg(&aggs, "Success rate", 100.0, "success (%)", |a| Some(a.success_rate)))?;
                out.push(p);
                let p = dir.join(ADHERENCE_SVG);
                fs::write(&p, line_plot_svg(&aggs, "Data adherence", 1.0, "adherence", |a| a.adherence_mean))?;
                out.push(p);
            }
        }
    }
    Ok(out)
}
