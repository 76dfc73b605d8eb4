//! Multi-robot coordination over diffusion low-level planners: prioritized
//! planning and the conflict-based search family.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::constraints::{constraints_from_trajectory, SphereConstraint, Strength, DEFAULT_INTERVAL_STEPS};
use crate::diffusion::{sample_pinned, DenoiserModel, GuidanceSpec, Query, SamplerConfig, Start};
use crate::error::{MmdError, Result};
use crate::geometry::{disks_overlap, RobotShape, World};
use crate::rng::derive_seed;
use crate::trajectory::{conflicts_against, count_conflicts, first_conflict, Conflict, State, Trajectory, DEFAULT_SUBSTEPS};

pub const DEFAULT_BATCH: usize = 10;
pub const DEFAULT_REUSE_STEPS: usize = 3;
pub const DEFAULT_TIME_LIMIT: f64 = 60.0;
pub const TILED_TIME_LIMIT: f64 = 240.0;

/// Single-robot trajectory generator used by the high-level searches.
///
/// Constraints use the robot's global time indices and world coordinates.
pub trait LowLevel: Send + Sync {
    fn horizon(&self) -> usize;
    fn dt(&self) -> f64;
    fn start(&self) -> State;
    fn goal(&self) -> State;
    /// A batch of trajectories. With `warm = Some((prev, k))` sampling starts
    /// from `prev` noised for `k` steps.
    fn sample(
        &self,
        constraints: &[SphereConstraint],
        batch: usize,
        seed: u64,
        warm: Option<(&Trajectory, usize)>,
    ) -> Result<Vec<Trajectory>>;
}

/// One diffusion model answering one query in the model's own frame.
pub struct SinglePlanner {
    pub model: Arc<DenoiserModel>,
    pub query: Query,
    /// Steps for which the start state is held before moving.
    pub hold: usize,
    pub guide: GuidanceSpec,
    pub sampler: SamplerConfig,
}

impl SinglePlanner {
    pub fn new(model: Arc<DenoiserModel>, query: Query, guide: GuidanceSpec) -> Result<Self> {
        if query.horizon != model.horizon {
            return Err(MmdError::HorizonMismatch(format!(
                "query horizon {} differs from model horizon {}",
                query.horizon, model.horizon
            )));
        }
        Ok(SinglePlanner {
            model,
            query,
            hold: 0,
            guide,
            sampler: SamplerConfig::default(),
        })
    }

    pub fn with_hold(mut self, hold: usize) -> Self {
        self.hold = hold;
        self
    }

    pub fn pins(&self) -> Vec<(usize, State)> {
        let h = self.query.horizon;
        let mut pins = vec![(0, self.query.start)];
        let rest = State::at_rest(self.query.start.q);
        pins.extend((1..=self.hold.min(h - 2)).map(|t| (t, rest)));
        pins.push((h - 1, self.query.goal));
        pins
    }
}

impl LowLevel for SinglePlanner {
    fn horizon(&self) -> usize {
        self.query.horizon
    }

    fn dt(&self) -> f64 {
        self.model.dt
    }

    fn start(&self) -> State {
        self.query.start
    }

    fn goal(&self) -> State {
        self.query.goal
    }

    fn sample(
        &self,
        constraints: &[SphereConstraint],
        batch: usize,
        seed: u64,
        warm: Option<(&Trajectory, usize)>,
    ) -> Result<Vec<Trajectory>> {
        let guide = self.guide.clone().with_constraints(constraints.to_vec());
        let start = match warm {
            Some((prev, k)) => Start::Warm(prev, k),
            None => Start::Noise,
        };
        sample_pinned(&self.model, &self.pins(), &guide, batch, seed, start, &self.sampler)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    /// Wall-clock budget in seconds.
    pub wall_clock: f64,
    pub max_nodes: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            wall_clock: DEFAULT_TIME_LIMIT,
            max_nodes: 10_000,
        }
    }
}

pub struct Problem {
    pub world: Arc<World>,
    pub shape: RobotShape,
    pub robots: Vec<Box<dyn LowLevel>>,
    pub limits: Limits,
    pub batch: usize,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        if self.robots.is_empty() {
            return Err(MmdError::InvalidInput("problem has no robots".into()));
        }
        if self.batch == 0 {
            return Err(MmdError::InvalidInput("batch size must be at least 1".into()));
        }
        let (h, dt) = (self.robots[0].horizon(), self.robots[0].dt());
        for (i, r) in self.robots.iter().enumerate() {
            if r.horizon() != h || (r.dt() - dt).abs() > 1e-12 {
                return Err(MmdError::HorizonMismatch(format!(
                    "robot {i} has H={} dt={}, robot 0 has H={h} dt={dt}",
                    r.horizon(),
                    r.dt()
                )));
            }
        }
        let radius = self.shape.radius;
        for i in 0..self.robots.len() {
            for j in i + 1..self.robots.len() {
                let (a, b) = (&self.robots[i], &self.robots[j]);
                if disks_overlap(&a.start().q, radius, &b.start().q, radius) {
                    return Err(MmdError::InvalidInput(format!("starts of robots {i} and {j} overlap")));
                }
                if disks_overlap(&a.goal().q, radius, &b.goal().q, radius) {
                    return Err(MmdError::InvalidInput(format!("goals of robots {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.robots[0].horizon()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Pp,
    Cbs,
    Ecbs,
    Xcbs,
    Xecbs,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Algorithm::Pp, Algorithm::Cbs, Algorithm::Ecbs, Algorithm::Xcbs, Algorithm::Xecbs];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pp => "pp",
            Algorithm::Cbs => "cbs",
            Algorithm::Ecbs => "ecbs",
            Algorithm::Xcbs => "xcbs",
            Algorithm::Xecbs => "xecbs",
        }
    }

    /// Search options for the CBS family; `None` for prioritized planning.
    pub fn cbs_options(self) -> Option<CbsOptions> {
        let (weak, reuse) = match self {
            Algorithm::Pp => return None,
            Algorithm::Cbs => (false, false),
            Algorithm::Ecbs => (true, false),
            Algorithm::Xcbs => (false, true),
            Algorithm::Xecbs => (true, true),
        };
        Some(CbsOptions {
            weak_constraints: weak,
            experience_reuse: reuse,
            reuse_steps: DEFAULT_REUSE_STEPS,
        })
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = MmdError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| MmdError::InvalidInput(format!("unknown algorithm '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbsOptions {
    pub weak_constraints: bool,
    pub experience_reuse: bool,
    /// Noising steps applied to the parent trajectory when reusing experience.
    pub reuse_steps: usize,
}

/// One expanded or generated constraint-tree node, for stats and dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub parent: Option<usize>,
    /// Robot resampled in this node; `None` for the root.
    pub robot: Option<usize>,
    pub constraint: Option<SphereConstraint>,
    pub n_conflicts: usize,
    /// Seconds spent sampling for this node.
    pub sample_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub nodes_expanded: usize,
    pub nodes_generated: usize,
    pub samples_drawn: usize,
    pub wall_time: f64,
    pub conflicts: usize,
    /// Generated nodes in creation order.
    pub tree: Vec<NodeRecord>,
    /// Conflict counts of popped nodes, paired with the smallest count left in the open list.
    pub pops: Vec<(usize, Option<usize>)>,
}

impl Stats {
    /// Mean sampling time of non-root nodes, if any were generated.
    pub fn mean_child_sample_time(&self) -> Option<f64> {
        let times: Vec<f64> = self.tree.iter().filter(|n| n.parent.is_some()).map(|n| n.sample_time).collect();
        (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub trajs: Vec<Trajectory>,
    pub success: bool,
    /// Why the search stopped without a conflict-free solution.
    pub failure: Option<String>,
    pub stats: Stats,
}

/// Constraint-tree node. Batches are shared with the parent except for the resampled robot.
#[derive(Clone)]
pub struct CtNode {
    pub id: usize,
    pub constraints: Vec<Vec<SphereConstraint>>,
    pub batches: Vec<Arc<Vec<Trajectory>>>,
    pub representative: Vec<usize>,
    pub n_conflicts: usize,
}

impl CtNode {
    pub fn representatives(&self) -> Vec<Trajectory> {
        self.batches
            .iter()
            .zip(&self.representative)
            .map(|(b, &i)| b[i].clone())
            .collect()
    }
}

/// Index of the batch element with the fewest conflicts against `others`; ties go to the lowest index.
pub fn select_representative(batch: &[Trajectory], others: &[&Trajectory], shape: &RobotShape) -> usize {
    let mut best = (usize::MAX, 0);
    for (i, t) in batch.iter().enumerate() {
        let c = conflicts_against(t, others, shape, DEFAULT_SUBSTEPS);
        if c < best.0 {
            best = (c, i);
            if c == 0 {
                break;
            }
        }
    }
    best.1
}

/// Earliest conflict among the node's representative trajectories.
pub fn get_one_conflict(node: &CtNode, shape: &RobotShape) -> Result<Conflict> {
    first_conflict(&node.representatives(), shape, DEFAULT_SUBSTEPS)?
        .ok_or_else(|| MmdError::InvalidInput("node has no conflicts".into()))
}

fn weak_from(reps: &[&Trajectory], shape: &RobotShape) -> Vec<SphereConstraint> {
    reps.iter()
        .flat_map(|t| constraints_from_trajectory(t, shape, Strength::Weak))
        .collect()
}

struct Clock {
    start: Instant,
    limit: f64,
}

impl Clock {
    fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn expired(&self) -> bool {
        self.elapsed() > self.limit
    }
}

/// Prioritized planning in robot index order.
pub fn plan_pp(problem: &Problem, seed: u64) -> Result<Solution> {
    problem.validate()?;
    let clock = Clock {
        start: Instant::now(),
        limit: problem.limits.wall_clock,
    };
    let mut stats = Stats::default();
    let mut reps: Vec<Trajectory> = Vec::with_capacity(problem.robots.len());
    for (i, robot) in problem.robots.iter().enumerate() {
        if clock.expired() {
            stats.wall_time = clock.elapsed();
            return Err(MmdError::TimeLimit(problem.limits.wall_clock));
        }
        let constraints: Vec<SphereConstraint> = reps
            .iter()
            .flat_map(|t| constraints_from_trajectory(t, &problem.shape, Strength::Strong))
            .collect();
        let t0 = Instant::now();
        let batch = robot.sample(&constraints, problem.batch, derive_seed(seed, &[0, i as u64]), None)?;
        stats.samples_drawn += batch.len();
        let others: Vec<&Trajectory> = reps.iter().collect();
        let k = select_representative(&batch, &others, &problem.shape);
        stats.tree.push(NodeRecord {
            id: i,
            parent: i.checked_sub(1),
            robot: Some(i),
            constraint: None,
            n_conflicts: conflicts_against(&batch[k], &others, &problem.shape, DEFAULT_SUBSTEPS),
            sample_time: t0.elapsed().as_secs_f64(),
        });
        reps.push(batch[k].clone());
    }
    let conflicts = count_conflicts(&reps, &problem.shape)?;
    stats.conflicts = conflicts;
    stats.nodes_generated = problem.robots.len();
    stats.nodes_expanded = problem.robots.len();
    stats.wall_time = clock.elapsed();
    let success = conflicts == 0;
    Ok(Solution {
        trajs: reps,
        success,
        failure: (!success).then(|| format!("{conflicts} conflicts remain after prioritized planning")),
        stats,
    })
}

/// Conflict-based search over diffusion low-level planners. The four
/// combinations of `options` give CBS, ECBS, xCBS and xECBS.
pub fn plan_cbs(problem: &Problem, options: CbsOptions, seed: u64) -> Result<Solution> {
    problem.validate()?;
    let clock = Clock {
        start: Instant::now(),
        limit: problem.limits.wall_clock,
    };
    let n = problem.robots.len();
    let h = problem.horizon();
    let shape = &problem.shape;
    let mut stats = Stats::default();

    // Root: robots sampled in order; under weak constraints each sees the
    // representatives chosen so far.
    let t0 = Instant::now();
    let mut batches = Vec::with_capacity(n);
    let mut reps_idx = Vec::with_capacity(n);
    let mut reps: Vec<Trajectory> = Vec::with_capacity(n);
    for (i, robot) in problem.robots.iter().enumerate() {
        let others: Vec<&Trajectory> = reps.iter().collect();
        let weak = if options.weak_constraints {
            weak_from(&others, shape)
        } else {
            Vec::new()
        };
        let batch = robot.sample(&weak, problem.batch, derive_seed(seed, &[0, i as u64]), None)?;
        stats.samples_drawn += batch.len();
        let k = select_representative(&batch, &others, shape);
        reps.push(batch[k].clone());
        reps_idx.push(k);
        batches.push(Arc::new(batch));
    }
    let root = CtNode {
        id: 0,
        constraints: vec![Vec::new(); n],
        batches,
        representative: reps_idx,
        n_conflicts: count_conflicts(&reps, shape)?,
    };
    stats.tree.push(NodeRecord {
        id: 0,
        parent: None,
        robot: None,
        constraint: None,
        n_conflicts: root.n_conflicts,
        sample_time: t0.elapsed().as_secs_f64(),
    });
    stats.nodes_generated = 1;

    let mut nodes: Vec<Option<CtNode>> = vec![Some(root)];
    let mut open: BinaryHeap<Reverse<(usize, usize)>> = BinaryHeap::new();
    open.push(Reverse((nodes[0].as_ref().map_or(0, |r| r.n_conflicts), 0)));
    let mut best: (usize, usize) = (nodes[0].as_ref().map_or(usize::MAX, |r| r.n_conflicts), 0);

    let finish = |stats: &mut Stats, node: &CtNode, failure: Option<String>, clock: &Clock| -> Solution {
        stats.conflicts = node.n_conflicts;
        stats.wall_time = clock.elapsed();
        Solution {
            trajs: node.representatives(),
            success: failure.is_none(),
            failure,
            stats: std::mem::take(stats),
        }
    };

    while let Some(Reverse((n_conf, id))) = open.pop() {
        let remaining_min = open.peek().map(|Reverse((c, _))| *c);
        stats.pops.push((n_conf, remaining_min));
        let node = nodes[id].take().expect("open nodes are stored");
        stats.nodes_expanded += 1;
        if node.n_conflicts == 0 {
            return Ok(finish(&mut stats, &node, None, &clock));
        }
        let conflict = get_one_conflict(&node, shape)?;
        debug!(
            "node {} conflicts {} split on robots {} and {} at step {}",
            node.id, node.n_conflicts, conflict.robot_i, conflict.robot_j, conflict.t_step
        );
        for k in [conflict.robot_i, conflict.robot_j] {
            if clock.expired() || stats.nodes_generated >= problem.limits.max_nodes {
                let reason = if clock.expired() {
                    format!("time limit of {:.1} s exceeded", problem.limits.wall_clock)
                } else {
                    format!("node limit of {} reached", problem.limits.max_nodes)
                };
                let best_node = if best.1 == node.id { node } else { nodes[best.1].take().unwrap_or(node) };
                return Ok(finish(&mut stats, &best_node, Some(reason), &clock));
            }
            let constraint = SphereConstraint::around(conflict.point, conflict.t_step, DEFAULT_INTERVAL_STEPS, h, Strength::Strong)?;
            let mut constraints = node.constraints.clone();
            constraints[k].push(constraint.clone());
            let parent_reps = node.representatives();
            let others: Vec<&Trajectory> = parent_reps.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, t)| t).collect();
            let mut guide_constraints = constraints[k].clone();
            if options.weak_constraints {
                guide_constraints.extend(weak_from(&others, shape));
            }
            let id_child = nodes.len();
            let t0 = Instant::now();
            let child_seed = derive_seed(seed, &[id_child as u64, k as u64]);
            let warm = options.experience_reuse.then(|| (&parent_reps[k], options.reuse_steps));
            let batch = problem.robots[k].sample(&guide_constraints, problem.batch, child_seed, warm)?;
            let sample_time = t0.elapsed().as_secs_f64();
            stats.samples_drawn += batch.len();
            let rep = select_representative(&batch, &others, shape);
            let mut batches = node.batches.clone();
            batches[k] = Arc::new(batch);
            let mut representative = node.representative.clone();
            representative[k] = rep;
            let mut child = CtNode {
                id: id_child,
                constraints,
                batches,
                representative,
                n_conflicts: 0,
            };
            child.n_conflicts = count_conflicts(&child.representatives(), shape)?;
            stats.tree.push(NodeRecord {
                id: id_child,
                parent: Some(node.id),
                robot: Some(k),
                constraint: Some(constraint),
                n_conflicts: child.n_conflicts,
                sample_time,
            });
            stats.nodes_generated += 1;
            if child.n_conflicts < best.0 {
                best = (child.n_conflicts, id_child);
            }
            open.push(Reverse((child.n_conflicts, id_child)));
            nodes.push(Some(child));
        }
        if best.1 == node.id {
            nodes[id] = Some(node);
        }
    }
    Err(MmdError::NoPath("constraint tree exhausted".into()))
}

/// Runs the named algorithm.
pub fn plan(problem: &Problem, algo: Algorithm, seed: u64) -> Result<Solution> {
    match algo.cbs_options() {
        None => plan_pp(problem, seed),
        Some(opts) => plan_cbs(problem, opts, seed),
    }
}
