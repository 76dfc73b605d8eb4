//! Problem files, solution directories and the shared solution validator.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coordination::{Limits, LowLevel, Problem, SinglePlanner, DEFAULT_BATCH};
use crate::diffusion::{DenoiserModel, GuidanceSpec, Query};
use crate::error::{MmdError, Result};
use crate::geometry::{RobotShape, TileCoord, TileKind, Vec2, World, DEFAULT_TILE_SIZE};
use crate::sequencing::{Skeleton, SkeletonPlanner};
use crate::trajectory::{find_conflicts, State, Trajectory, DEFAULT_DT, DEFAULT_HORIZON, DEFAULT_SUBSTEPS};
use crate::worlds::adherence_mean;

/// Endpoint tolerance for diffusion solutions, whose endpoints are pinned exactly.
pub const EXACT_ENDPOINT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotTask {
    pub start: Vec2,
    pub goal: Vec2,
    /// Tiles to traverse; required when start and goal lie in different tiles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skeleton: Option<Vec<TileCoord>>,
    /// Steps the robot waits at its start before moving.
    #[serde(default)]
    pub hold: usize,
}

fn default_tile_size() -> f64 {
    DEFAULT_TILE_SIZE
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

/// JSON problem description. Tiles are listed bottom row first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub tiles: Vec<Vec<TileKind>>,
    #[serde(default = "default_tile_size")]
    pub tile_size: f64,
    pub robots: Vec<RobotTask>,
    /// Per-tile-segment horizon the models must have been trained with.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Obstacle guidance weight override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_obj: Option<f64>,
}

impl ProblemFile {
    pub fn single(kind: TileKind, endpoints: &[(Vec2, Vec2)]) -> Self {
        ProblemFile {
            tiles: vec![vec![kind]],
            tile_size: DEFAULT_TILE_SIZE,
            robots: endpoints
                .iter()
                .map(|&(start, goal)| RobotTask {
                    start,
                    goal,
                    skeleton: None,
                    hold: 0,
                })
                .collect(),
            horizon: DEFAULT_HORIZON,
            dt: DEFAULT_DT,
            lambda_obj: None,
        }
    }

    pub fn world(&self) -> Result<World> {
        World::from_tiles(self.tiles.clone(), self.tile_size)
    }

    pub fn kinds(&self) -> Vec<TileKind> {
        let mut out: Vec<TileKind> = Vec::new();
        for k in self.tiles.iter().flatten() {
            if !out.contains(k) {
                out.push(*k);
            }
        }
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pf: ProblemFile = serde_json::from_str(text).map_err(|e| MmdError::Format(format!("problem: {e}")))?;
        pf.check()?;
        Ok(pf)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        ProblemFile::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Structural checks that need no models.
    pub fn check(&self) -> Result<()> {
        let world = self.world()?;
        if self.robots.is_empty() {
            return Err(MmdError::InvalidInput("problem has no robots".into()));
        }
        if self.horizon < 3 || !(self.dt > 0.0) {
            return Err(MmdError::InvalidInput(format!("bad horizon {} or dt {}", self.horizon, self.dt)));
        }
        for (i, r) in self.robots.iter().enumerate() {
            for p in [r.start, r.goal] {
                if world.tile_at(&p).is_none() {
                    return Err(MmdError::InvalidInput(format!("robot {i} endpoint {p:?} outside the world")));
                }
            }
            if let Some(sk) = &r.skeleton {
                Skeleton::new(sk.clone())?;
            }
        }
        Ok(())
    }

    /// Tiles robot `i` traverses.
    pub fn skeleton_of(&self, world: &World, i: usize) -> Result<Skeleton> {
        let r = &self.robots[i];
        match &r.skeleton {
            Some(s) => Skeleton::new(s.clone()),
            None => {
                let (a, b) = (world.tile_at(&r.start), world.tile_at(&r.goal));
                match (a, b) {
                    (Some(a), Some(b)) if a == b => Skeleton::new(vec![a]),
                    _ => Err(MmdError::InvalidInput(format!(
                        "robot {i} crosses tiles and needs an explicit skeleton"
                    ))),
                }
            }
        }
    }

    /// Global horizon of every robot's trajectory.
    pub fn global_horizon(&self, world: &World) -> Result<usize> {
        let mut h = None;
        for i in 0..self.robots.len() {
            let l = self.skeleton_of(world, i)?.len();
            let hi = l * (self.horizon - 1) + 1;
            if *h.get_or_insert(hi) != hi {
                return Err(MmdError::HorizonMismatch("robots have skeletons of different lengths".into()));
            }
        }
        Ok(h.unwrap_or(self.horizon))
    }
}

pub type ModelSet = HashMap<TileKind, Arc<DenoiserModel>>;

/// Refuses models whose horizon or step differs from the problem's.
pub fn check_models(pf: &ProblemFile, models: &ModelSet) -> Result<()> {
    for kind in pf.kinds() {
        let m = models
            .get(&kind)
            .ok_or_else(|| MmdError::InvalidInput(format!("no model for tile kind {}", kind.name())))?;
        if m.horizon != pf.horizon || (m.dt - pf.dt).abs() > 1e-12 {
            return Err(MmdError::HorizonMismatch(format!(
                "model for {} has H={} dt={}, problem wants H={} dt={}",
                kind.name(),
                m.horizon,
                m.dt,
                pf.horizon,
                pf.dt
            )));
        }
        if m.kind.is_some_and(|k| k != kind) {
            return Err(MmdError::InvalidInput(format!("model registered for {} was trained on another map", kind.name())));
        }
    }
    Ok(())
}

/// Builds the planner-facing problem: one diffusion low level per robot.
pub fn build_problem(pf: &ProblemFile, models: &ModelSet, shape: &RobotShape, limits: Limits, batch: usize) -> Result<Problem> {
    pf.check()?;
    check_models(pf, models)?;
    let world = Arc::new(pf.world()?);
    let mut guide = GuidanceSpec::with_world(world.clone(), shape.clone());
    if let Some(l) = pf.lambda_obj {
        guide.lambda_obj = l;
    }
    let single = world.n_rows() == 1 && world.n_cols() == 1 && (world.tile_size() - DEFAULT_TILE_SIZE).abs() < 1e-12;
    let mut robots: Vec<Box<dyn LowLevel>> = Vec::with_capacity(pf.robots.len());
    for (i, r) in pf.robots.iter().enumerate() {
        let (start, goal) = (State::at_rest(r.start), State::at_rest(r.goal));
        if single && r.skeleton.is_none() {
            let model = models[&world.tiles()[0][0]].clone();
            let q = Query::new(start, goal, pf.horizon);
            robots.push(Box::new(SinglePlanner::new(model, q, guide.clone())?.with_hold(r.hold)));
        } else {
            let sk = pf.skeleton_of(&world, i)?;
            let ms = sk
                .tiles
                .iter()
                .map(|t| {
                    let kind = world
                        .tile_kind(*t)
                        .ok_or_else(|| MmdError::InvalidInput(format!("skeleton tile ({}, {}) outside grid", t.col, t.row)))?;
                    Ok(models[&kind].clone())
                })
                .collect::<Result<Vec<_>>>()?;
            let p = SkeletonPlanner::new(world.clone(), sk, ms, start, goal, guide.clone())?.with_hold(r.hold);
            robots.push(Box::new(p));
        }
    }
    let problem = Problem {
        world,
        shape: shape.clone(),
        robots,
        limits,
        batch: if batch == 0 { DEFAULT_BATCH } else { batch },
    };
    problem.validate()?;
    Ok(problem)
}

/// Outcome of re-checking a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub conflicts: usize,
    pub endpoints_ok: bool,
    pub adherence: f64,
}

impl Validation {
    pub fn is_valid(&self) -> bool {
        self.conflicts == 0 && self.endpoints_ok
    }
}

/// Conflict count, endpoint agreement within `tol`, and adherence.
pub fn validate_solution(world: &World, tasks: &[(Vec2, Vec2)], trajs: &[Trajectory], shape: &RobotShape, tol: f64) -> Result<Validation> {
    if tasks.len() != trajs.len() {
        return Err(MmdError::InvalidInput(format!("{} tasks but {} trajectories", tasks.len(), trajs.len())));
    }
    let conflicts = find_conflicts(trajs, shape, DEFAULT_SUBSTEPS)?.len();
    let endpoints_ok = tasks
        .iter()
        .zip(trajs)
        .all(|((s, g), t)| (t.first().q - s).norm() <= tol && (t.last().q - g).norm() <= tol);
    Ok(Validation {
        conflicts,
        endpoints_ok,
        adherence: adherence_mean(world, trajs),
    })
}

/// Summary written next to the trajectories of a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionStats {
    pub algo: String,
    pub seed: u64,
    pub success: bool,
    #[serde(default)]
    pub failure: Option<String>,
    pub wall_time: f64,
    pub nodes_expanded: usize,
    pub nodes_generated: usize,
    pub conflicts: usize,
    pub adherence: f64,
    /// Mean acceleration magnitude; absent for grid paths.
    #[serde(default)]
    pub mean_accel: Option<f64>,
    /// Allowed endpoint deviation; grid planners snap endpoints to cells.
    pub endpoint_tol: f64,
    /// Endpoints actually planned for, one pair per robot.
    pub tasks: Vec<(Vec2, Vec2)>,
}

pub const PROBLEM_FILE: &str = "problem.json";
pub const STATS_FILE: &str = "stats.json";

fn robot_file(i: usize) -> String {
    format!("robot_{i}.traj")
}

/// Writes `problem.json`, `stats.json` and one `robot_<i>.traj` per robot.
pub fn write_solution(dir: &Path, pf: &ProblemFile, trajs: &[Trajectory], stats: &SolutionStats) -> Result<()> {
    fs::create_dir_all(dir)?;
    pf.save(&dir.join(PROBLEM_FILE))?;
    let text = serde_json::to_string_pretty(stats).map_err(|e| MmdError::Format(format!("stats: {e}")))?;
    fs::write(dir.join(STATS_FILE), text)?;
    for (i, t) in trajs.iter().enumerate() {
        t.write_text(BufWriter::new(fs::File::create(dir.join(robot_file(i)))?))?;
    }
    Ok(())
}

pub fn read_solution(dir: &Path) -> Result<(ProblemFile, Vec<Trajectory>, SolutionStats)> {
    let pf = ProblemFile::load(&dir.join(PROBLEM_FILE))?;
    let stats: SolutionStats = serde_json::from_str(&fs::read_to_string(dir.join(STATS_FILE))?)
        .map_err(|e| MmdError::Format(format!("stats: {e}")))?;
    let mut trajs = Vec::with_capacity(pf.robots.len());
    for i in 0..pf.robots.len() {
        let f = fs::File::open(dir.join(robot_file(i)))?;
        trajs.push(Trajectory::read_text(BufReader::new(f))?);
    }
    Ok((pf, trajs, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn problem_json_round_trip_and_defaults() {
        let text = r#"{"tiles": [["empty"]], "robots": [{"start": [0.8, 0.0], "goal": [-0.8, 0.0]}]}"#;
        let pf = ProblemFile::from_json(text).unwrap();
        assert_eq!((pf.horizon, pf.dt, pf.tile_size), (64, 0.04, 2.0));
        assert_eq!(ProblemFile::from_json(&pf.to_json()).unwrap(), pf);
    }

    #[test]
    fn malformed_problems_rejected() {
        assert!(ProblemFile::from_json("{").is_err());
        let outside = r#"{"tiles": [["empty"]], "robots": [{"start": [3.0, 0.0], "goal": [0.0, 0.0]}]}"#;
        assert!(ProblemFile::from_json(outside).is_err());
        let none = r#"{"tiles": [["empty"]], "robots": []}"#;
        assert!(ProblemFile::from_json(none).is_err());
    }

    #[test]
    fn crossing_tiles_needs_skeleton() {
        let pf = ProblemFile {
            tiles: vec![vec![TileKind::Empty, TileKind::Empty]],
            ..ProblemFile::single(TileKind::Empty, &[(Vec2::new(-1.5, 0.0), Vec2::new(1.5, 0.0))])
        };
        let world = pf.world().unwrap();
        assert!(pf.skeleton_of(&world, 0).is_err());
        let mut with = pf.clone();
        with.robots[0].skeleton = Some(vec![TileCoord::new(0, 0), TileCoord::new(1, 0)]);
        assert_eq!(with.global_horizon(&world).unwrap(), 127);
    }

    #[test]
    fn validator_flags_conflicts_and_endpoints() {
        let world = World::single(TileKind::Empty);
        let shape = RobotShape::default();
        let a = Trajectory::from_positions(&[Vec2::new(-0.5, 0.0), Vec2::new(0.0, 0.0), Vec2::new(0.5, 0.0)], 0.04).unwrap();
        let b = Trajectory::from_positions(&[Vec2::new(0.5, 0.0), Vec2::new(0.0, 0.02), Vec2::new(-0.5, 0.0)], 0.04).unwrap();
        let tasks = vec![(Vec2::new(-0.5, 0.0), Vec2::new(0.5, 0.0)), (Vec2::new(0.5, 0.0), Vec2::new(-0.5, 0.0))];
        let v = validate_solution(&world, &tasks, &[a.clone(), b], &shape, EXACT_ENDPOINT_TOL).unwrap();
        assert!(v.conflicts > 0 && v.endpoints_ok && !v.is_valid());
        let v = validate_solution(&world, &tasks[..1], &[a.translated(Vec2::new(0.01, 0.0))], &shape, EXACT_ENDPOINT_TOL).unwrap();
        assert!(!v.endpoints_ok);
    }

    #[test]
    fn solution_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pf = ProblemFile::single(TileKind::Empty, &[(Vec2::new(0.5, 0.0), Vec2::new(-0.5, 0.0))]);
        let t = Trajectory::from_positions(&[Vec2::new(0.5, 0.0), Vec2::new(0.0, 0.0), Vec2::new(-0.5, 0.0)], 0.04).unwrap();
        let stats = SolutionStats {
            algo: "xecbs".into(),
            seed: 3,
            success: true,
            failure: None,
            wall_time: 0.5,
            nodes_expanded: 1,
            nodes_generated: 1,
            conflicts: 0,
            adherence: 1.0,
            mean_accel: Some(0.0),
            endpoint_tol: EXACT_ENDPOINT_TOL,
            tasks: vec![(Vec2::new(0.5, 0.0), Vec2::new(-0.5, 0.0))],
        };
        write_solution(dir.path(), &pf, std::slice::from_ref(&t), &stats).unwrap();
        let (pf2, trajs, stats2) = read_solution(dir.path()).unwrap();
        assert_eq!(pf2, pf);
        assert_eq!(stats2, stats);
        assert_eq!(trajs[0].horizon(), 3);
        assert!((trajs[0].last().q - t.last().q).norm() == 0.0);
    }
}
