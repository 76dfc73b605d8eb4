//! Grid MAPF baselines: a 4-connected time-expanded grid, focal A*, grid ECBS
//! and edge cost maps estimated from demonstrations.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{MmdError, Result};
use crate::geometry::{disk_in_collision, free_intervals, RobotShape, Vec2, World, DEFAULT_TILE_SIZE};
use crate::trajectory::{find_conflicts, first_conflict, State, Trajectory, DEFAULT_SUBSTEPS};
use crate::worlds::Dataset;

pub const DEFAULT_GRID_STEP: f64 = 0.1;
pub const DEFAULT_FOCAL_BOUND: f64 = 1.5;
/// Travel speed used when converting grid paths into timed trajectories.
pub const DEFAULT_GRID_SPEED: f64 = 1.0;
/// Cost added to a move edge, divided by the number of demonstrations using it.
pub const DATA_COST_SCALE: f64 = 10.0;
pub const DEFAULT_GRID_TIME_LIMIT: f64 = 60.0;
pub const DEFAULT_GRID_MAX_NODES: usize = 20_000;

pub type Vertex = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Wait,
}

impl Action {
    /// Move actions in tie-breaking order.
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (0, 1),
            Action::Down => (0, -1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Wait => (0, 0),
        }
    }

    pub fn direction(self) -> Vec2 {
        let (dc, dr) = self.delta();
        Vec2::new(dc as f64, dr as f64)
    }

    fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
            Action::Wait => 4,
        }
    }
}

/// Regular grid over the world bounds. A cell is a vertex when the robot disk
/// centered on it is collision-free; a move edge exists when the disk can
/// sweep the segment between two vertices.
#[derive(Debug, Clone)]
pub struct GridGraph {
    origin: Vec2,
    step: f64,
    cols: usize,
    rows: usize,
    radius: f64,
    free: Vec<bool>,
    edges: Vec<[bool; 4]>,
}

impl GridGraph {
    pub fn new(world: &World, shape: &RobotShape, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(MmdError::InvalidInput(format!("grid step must be positive, got {step}")));
        }
        let radius = shape.radius;
        let size = world.bounds().size();
        let cols = (size.x / step).round() as usize;
        let rows = (size.y / step).round() as usize;
        if cols == 0 || rows == 0 {
            return Err(MmdError::InvalidInput("grid step larger than the world".into()));
        }
        let origin = world.bounds().min + Vec2::new(step * 0.5, step * 0.5);
        let mut g = GridGraph {
            origin,
            step,
            cols,
            rows,
            radius,
            free: vec![false; cols * rows],
            edges: vec![[false; 4]; cols * rows],
        };
        for v in 0..cols * rows {
            g.free[v] = !disk_in_collision(world, &g.position(v), radius);
        }
        for v in 0..cols * rows {
            if !g.free[v] {
                continue;
            }
            for a in Action::MOVES {
                if let Some(u) = g.offset(v, a) {
                    if g.free[u] {
                        let (p, q) = (g.position(v), g.position(u));
                        let iv = free_intervals(world, &p, &q, radius);
                        g.edges[v][a.index()] = iv.len() == 1 && iv[0].0 <= 0.0 && iv[0].1 >= 1.0;
                    }
                }
            }
        }
        Ok(g)
    }

    pub fn from_world(world: &World, shape: &RobotShape) -> Result<Self> {
        GridGraph::new(world, shape, DEFAULT_GRID_STEP)
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn n_cells(&self) -> usize {
        self.free.len()
    }

    pub fn is_free(&self, v: Vertex) -> bool {
        self.free.get(v).copied().unwrap_or(false)
    }

    pub fn vertices(&self) -> impl Iterator<Item = Vertex> + '_ {
        (0..self.free.len()).filter(|&v| self.free[v])
    }

    pub fn cell(&self, col: usize, row: usize) -> Option<Vertex> {
        (col < self.cols && row < self.rows).then_some(row * self.cols + col)
    }

    pub fn coords(&self, v: Vertex) -> (usize, usize) {
        (v % self.cols, v / self.cols)
    }

    pub fn position(&self, v: Vertex) -> Vec2 {
        let (c, r) = self.coords(v);
        self.origin + Vec2::new(c as f64 * self.step, r as f64 * self.step)
    }

    /// Cell whose square contains `p`, free or not.
    pub fn cell_at(&self, p: &Vec2) -> Option<Vertex> {
        let rel = (p - self.origin) / self.step;
        let (c, r) = ((rel.x + 0.5).floor(), (rel.y + 0.5).floor());
        if c < 0.0 || r < 0.0 {
            return None;
        }
        self.cell(c as usize, r as usize)
    }

    /// Free vertex nearest to `p`.
    pub fn nearest_vertex(&self, p: &Vec2) -> Option<Vertex> {
        self.vertices()
            .min_by(|&a, &b| (self.position(a) - p).norm().total_cmp(&(self.position(b) - p).norm()))
    }

    fn offset(&self, v: Vertex, a: Action) -> Option<Vertex> {
        let (c, r) = self.coords(v);
        let (dc, dr) = a.delta();
        let (nc, nr) = (c as i64 + dc, r as i64 + dr);
        if nc < 0 || nr < 0 {
            return None;
        }
        self.cell(nc as usize, nr as usize)
    }

    /// Target of `a` from `v` if that edge exists; waiting is always allowed on a vertex.
    pub fn neighbor(&self, v: Vertex, a: Action) -> Option<Vertex> {
        if !self.is_free(v) {
            return None;
        }
        match a {
            Action::Wait => Some(v),
            _ if self.edges[v][a.index()] => self.offset(v, a),
            _ => None,
        }
    }

    pub fn manhattan(&self, a: Vertex, b: Vertex) -> usize {
        let (ca, ra) = self.coords(a);
        let (cb, rb) = self.coords(b);
        ca.abs_diff(cb) + ra.abs_diff(rb)
    }
}

/// Directed edge costs per cell and action; waiting has its own cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMap {
    pub moves: Vec<[f64; 4]>,
    pub wait: f64,
}

impl CostMap {
    pub fn uniform(graph: &GridGraph) -> Self {
        CostMap {
            moves: vec![[1.0; 4]; graph.n_cells()],
            wait: 1.0,
        }
    }

    pub fn cost(&self, v: Vertex, a: Action) -> f64 {
        match a {
            Action::Wait => self.wait,
            _ => self.moves[v][a.index()],
        }
    }

    /// Cheapest move cost over edges present in `graph`.
    pub fn min_move_cost(&self, graph: &GridGraph) -> f64 {
        graph
            .vertices()
            .flat_map(|v| Action::MOVES.iter().filter(move |a| graph.neighbor(v, **a).is_some()).map(move |a| self.cost(v, *a)))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self).map_err(|e| MmdError::Format(format!("cost map: {e}")))
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        serde_json::from_reader(r).map_err(|e| MmdError::Format(format!("cost map: {e}")))
    }
}

/// Per-edge count of demonstrations that leave a visited cell along that edge.
///
/// For each trajectory and each cell it enters, the first later state outside
/// that cell picks the outgoing edge best aligned with the displacement from
/// the cell center. Each trajectory counts at most once per edge.
pub fn edge_counts(trajs: &[Trajectory], graph: &GridGraph) -> Vec<[usize; 4]> {
    let mut counts = vec![[0usize; 4]; graph.n_cells()];
    for traj in trajs {
        let pts: Vec<Vec2> = traj.positions().collect();
        let cells: Vec<Option<Vertex>> = pts.iter().map(|p| graph.cell_at(p)).collect();
        let mut seen = HashSet::new();
        let mut used: HashSet<(Vertex, usize)> = HashSet::new();
        for i in 0..pts.len() {
            let Some(s) = cells[i] else { continue };
            if !seen.insert(s) || !graph.is_free(s) {
                continue;
            }
            let Some(j) = (i + 1..pts.len()).find(|&j| cells[j] != Some(s)) else {
                continue;
            };
            let d = pts[j] - graph.position(s);
            let mut best: Option<(f64, Action)> = None;
            for a in Action::MOVES {
                if graph.neighbor(s, a).is_none() {
                    continue;
                }
                let score = a.direction().dot(&d);
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, a));
                }
            }
            if let Some((_, a)) = best {
                used.insert((s, a.index()));
            }
        }
        for (s, a) in used {
            counts[s][a] += 1;
        }
    }
    counts
}

/// Data-derived cost map: `1 + 10 / m` for an edge used by `m > 0`
/// demonstrations and `1 + 10` for unused edges. No demonstrations gives the
/// uniform map.
pub fn cost_map_from_data(trajs: &[Trajectory], graph: &GridGraph) -> CostMap {
    if trajs.is_empty() {
        return CostMap::uniform(graph);
    }
    let counts = edge_counts(trajs, graph);
    let moves = counts
        .iter()
        .map(|c| c.map(|m| if m > 0 { 1.0 + DATA_COST_SCALE / m as f64 } else { 1.0 + DATA_COST_SCALE }))
        .collect();
    CostMap { moves, wait: 1.0 }
}

/// Places each tile's local-frame demonstrations into every tile of that kind.
pub fn world_demonstrations(world: &World, datasets: &[&Dataset]) -> Vec<Trajectory> {
    let scale = world.tile_size() / DEFAULT_TILE_SIZE;
    let mut out = Vec::new();
    for r in 0..world.n_rows() {
        for c in 0..world.n_cols() {
            let tile = crate::geometry::TileCoord::new(c, r);
            let kind = world.tile_kind(tile).expect("tile inside grid");
            let center = world.tile_center(tile);
            for ds in datasets.iter().filter(|d| d.kind == kind) {
                for t in &ds.trajectories {
                    let states = t
                        .states()
                        .iter()
                        .map(|s| State::new(s.q * scale + center, s.qdot * scale))
                        .collect();
                    out.push(Trajectory::new(states, t.dt()).expect("placed demonstration is valid"));
                }
            }
        }
    }
    out
}

/// One vertex per time step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPath {
    pub vertices: Vec<Vertex>,
}

impl GridPath {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Vertex at time `t`; the robot stays at its last vertex afterwards.
    pub fn at(&self, t: usize) -> Vertex {
        self.vertices[t.min(self.vertices.len() - 1)]
    }

    pub fn cost(&self, graph: &GridGraph, costs: &CostMap) -> f64 {
        self.vertices
            .windows(2)
            .map(|w| {
                let a = action_between(graph, w[0], w[1]).expect("consecutive path vertices are joined by an edge");
                costs.cost(w[0], a)
            })
            .sum()
    }

    /// Constant-velocity trajectory of `horizon` states (padded at the goal).
    pub fn to_trajectory(&self, graph: &GridGraph, horizon: usize, dt: f64) -> Result<Trajectory> {
        if horizon < self.len().max(2) {
            return Err(MmdError::HorizonMismatch(format!("path of {} steps exceeds horizon {horizon}", self.len())));
        }
        let pts: Vec<Vec2> = (0..horizon).map(|t| graph.position(self.at(t))).collect();
        let states = (0..horizon)
            .map(|t| {
                let v = if t + 1 < horizon { (pts[t + 1] - pts[t]) / dt } else { Vec2::zeros() };
                State::new(pts[t], v)
            })
            .collect();
        Trajectory::new(states, dt)
    }
}

pub fn action_between(graph: &GridGraph, a: Vertex, b: Vertex) -> Option<Action> {
    [Action::Up, Action::Down, Action::Left, Action::Right, Action::Wait]
        .into_iter()
        .find(|&act| graph.neighbor(a, act) == Some(b))
}

/// Forbidden vertices `(v, t)` and transitions `(from, to, t)` arriving at `t`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GridConstraints {
    pub vertex: HashSet<(Vertex, usize)>,
    pub edge: HashSet<(Vertex, Vertex, usize)>,
}

impl GridConstraints {
    pub fn latest(&self) -> usize {
        self.vertex.iter().map(|c| c.1).chain(self.edge.iter().map(|c| c.2)).max().unwrap_or(0)
    }

    fn allows(&self, from: Vertex, to: Vertex, t: usize) -> bool {
        !self.vertex.contains(&(to, t)) && !self.edge.contains(&(from, to, t))
    }

    /// Earliest arrival time after which the robot may stay at `goal` forever.
    fn goal_hold(&self, goal: Vertex) -> usize {
        self.vertex
            .iter()
            .filter(|c| c.0 == goal)
            .map(|c| c.1)
            .chain(self.edge.iter().filter(|c| c.0 == goal && c.1 == goal).map(|c| c.2))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ord64(f64);

impl Eq for Ord64 {}

impl PartialOrd for Ord64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ord64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

struct SearchNode {
    v: Vertex,
    t: usize,
    g: f64,
    f: f64,
    conflicts: usize,
    parent: Option<usize>,
}

/// Number of `others` whose disks come within contact of a robot moving
/// `a -> b` over the step ending at `t`.
fn transition_conflicts(graph: &GridGraph, a: Vertex, b: Vertex, t: usize, others: &[&GridPath]) -> usize {
    let reach = 2.0 * graph.radius() + 1e-9;
    let (pa, pb) = (graph.position(a), graph.position(b));
    others
        .iter()
        .filter(|o| {
            let (qa, qb) = (graph.position(o.at(t.saturating_sub(1))), graph.position(o.at(t)));
            (1..=DEFAULT_SUBSTEPS).any(|s| {
                let f = s as f64 / DEFAULT_SUBSTEPS as f64;
                ((pa * (1.0 - f) + pb * f) - (qa * (1.0 - f) + qb * f)).norm() < reach
            })
        })
        .count()
}

/// Focal A* over the time-expanded grid.
///
/// OPEN is ordered by `f = g + h` with `h` the Manhattan distance times the
/// cheapest move cost. FOCAL holds open nodes with `f <= w * f_min` ordered by
/// the number of contacts with `others`, then `f`. Expanded states are never
/// reopened. The search gives up after `4 * manhattan + latest constraint`
/// steps.
pub fn astar_focal(
    graph: &GridGraph,
    costs: &CostMap,
    start: Vertex,
    goal: Vertex,
    constraints: &GridConstraints,
    others: &[&GridPath],
    w: f64,
) -> Result<GridPath> {
    if !graph.is_free(start) || !graph.is_free(goal) {
        return Err(MmdError::InvalidInput(format!("start {start} or goal {goal} is not a free vertex")));
    }
    if !(w >= 1.0) {
        return Err(MmdError::InvalidInput(format!("focal bound must be at least 1, got {w}")));
    }
    if constraints.vertex.contains(&(start, 0)) {
        return Err(MmdError::NoPath("start is constrained at time 0".into()));
    }
    let min_move = costs.min_move_cost(graph);
    let hmul = if min_move.is_finite() { min_move.max(0.0) } else { 0.0 };
    let h = |v: Vertex| graph.manhattan(v, goal) as f64 * hmul;
    let lb = graph.manhattan(start, goal).max(1);
    let t_max = 4 * lb + constraints.latest();
    let hold = constraints.goal_hold(goal);

    let mut nodes: Vec<SearchNode> = Vec::new();
    let mut open: BTreeSet<(Ord64, usize)> = BTreeSet::new();
    let mut focal: BTreeSet<(usize, Ord64, usize)> = BTreeSet::new();
    let mut index: HashMap<(Vertex, usize), usize> = HashMap::new();
    let mut closed: HashSet<(Vertex, usize)> = HashSet::new();

    nodes.push(SearchNode {
        v: start,
        t: 0,
        g: 0.0,
        f: h(start),
        conflicts: 0,
        parent: None,
    });
    open.insert((Ord64(nodes[0].f), 0));
    focal.insert((0, Ord64(nodes[0].f), 0));
    index.insert((start, 0), 0);
    let mut bound = w * nodes[0].f;

    while let Some(&(_, _, id)) = focal.first() {
        let (v, t, g, fv, conf) = {
            let n = &nodes[id];
            (n.v, n.t, n.g, n.f, n.conflicts)
        };
        focal.remove(&(conf, Ord64(fv), id));
        open.remove(&(Ord64(fv), id));
        index.remove(&(v, t));
        closed.insert((v, t));

        if v == goal && t >= hold {
            let mut out = Vec::with_capacity(t + 1);
            let mut cur = Some(id);
            while let Some(c) = cur {
                out.push(nodes[c].v);
                cur = nodes[c].parent;
            }
            out.reverse();
            return Ok(GridPath { vertices: out });
        }

        if t < t_max {
            for a in [Action::Up, Action::Down, Action::Left, Action::Right, Action::Wait] {
                let Some(u) = graph.neighbor(v, a) else { continue };
                let nt = t + 1;
                if !constraints.allows(v, u, nt) || closed.contains(&(u, nt)) {
                    continue;
                }
                let ng = g + costs.cost(v, a);
                let nf = ng + h(u);
                let nc = conf + transition_conflicts(graph, v, u, nt, others);
                if let Some(&old) = index.get(&(u, nt)) {
                    if nodes[old].g <= ng {
                        continue;
                    }
                    let (of, oc) = (nodes[old].f, nodes[old].conflicts);
                    open.remove(&(Ord64(of), old));
                    focal.remove(&(oc, Ord64(of), old));
                    nodes[old].g = ng;
                    nodes[old].f = nf;
                    nodes[old].conflicts = nc;
                    nodes[old].parent = Some(id);
                    open.insert((Ord64(nf), old));
                    if nf <= bound {
                        focal.insert((nc, Ord64(nf), old));
                    }
                    continue;
                }
                let nid = nodes.len();
                nodes.push(SearchNode {
                    v: u,
                    t: nt,
                    g: ng,
                    f: nf,
                    conflicts: nc,
                    parent: Some(id),
                });
                index.insert((u, nt), nid);
                open.insert((Ord64(nf), nid));
                if nf <= bound {
                    focal.insert((nc, Ord64(nf), nid));
                }
            }
        }

        if let Some(&(Ord64(f_min), _)) = open.first() {
            let new_bound = w * f_min;
            if new_bound > bound {
                for &(Ord64(f), n) in open.range((Ord64(bound), usize::MAX)..) {
                    if f > new_bound {
                        break;
                    }
                    if f > bound {
                        focal.insert((nodes[n].conflicts, Ord64(f), n));
                    }
                }
                bound = new_bound;
            }
        }
    }
    Err(MmdError::NoPath(format!("no path from {start} to {goal} within {t_max} steps")))
}

#[derive(Debug, Clone)]
pub struct GridOptions {
    pub w: f64,
    pub time_limit: f64,
    pub max_nodes: usize,
    /// Seconds per grid step in the converted trajectories.
    pub dt: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            w: DEFAULT_FOCAL_BOUND,
            time_limit: DEFAULT_GRID_TIME_LIMIT,
            max_nodes: DEFAULT_GRID_MAX_NODES,
            dt: DEFAULT_GRID_STEP / DEFAULT_GRID_SPEED,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridSolution {
    pub paths: Vec<GridPath>,
    /// Paths as trajectories sharing one horizon.
    pub trajs: Vec<Trajectory>,
    pub nodes_expanded: usize,
    pub nodes_generated: usize,
    pub wall_time: f64,
}

struct GridCtNode {
    constraints: Vec<GridConstraints>,
    paths: Vec<GridPath>,
    n_conflicts: usize,
}

/// Paths converted to trajectories of a common horizon.
pub fn paths_to_trajectories(graph: &GridGraph, paths: &[GridPath], dt: f64) -> Result<Vec<Trajectory>> {
    let horizon = paths.iter().map(GridPath::len).max().unwrap_or(0).max(2);
    paths.iter().map(|p| p.to_trajectory(graph, horizon, dt)).collect()
}

/// Conflict-based search over grid paths with focal A* as the low level.
///
/// Conflicts come from the shared disk-overlap checker on the converted
/// trajectories. A conflict at the end of a step constrains the vertex;
/// otherwise the transition taken during that step is forbidden. Constraint
/// tree nodes are expanded in order of their conflict count.
pub fn ecbs_grid(
    graph: &GridGraph,
    costs: &CostMap,
    starts: &[Vertex],
    goals: &[Vertex],
    shape: &RobotShape,
    opts: &GridOptions,
) -> Result<GridSolution> {
    if starts.len() != goals.len() || starts.is_empty() {
        return Err(MmdError::InvalidInput("need one goal per start and at least one robot".into()));
    }
    let clock = Instant::now();
    let n = starts.len();
    let plan_one = |k: usize, cons: &GridConstraints, paths: &[GridPath]| {
        let others: Vec<&GridPath> = paths.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, p)| p).collect();
        astar_focal(graph, costs, starts[k], goals[k], cons, &others, opts.w)
    };
    let count = |paths: &[GridPath]| -> Result<usize> {
        Ok(find_conflicts(&paths_to_trajectories(graph, paths, opts.dt)?, shape, DEFAULT_SUBSTEPS)?.len())
    };

    let mut root_paths: Vec<GridPath> = Vec::with_capacity(n);
    for k in 0..n {
        let p = plan_one(k, &GridConstraints::default(), &root_paths)?;
        root_paths.push(p);
    }
    let root = GridCtNode {
        constraints: vec![GridConstraints::default(); n],
        n_conflicts: count(&root_paths)?,
        paths: root_paths,
    };
    let mut store = vec![root];
    let mut open = BinaryHeap::new();
    open.push(Reverse((store[0].n_conflicts, 0usize)));
    let mut expanded = 0usize;

    while let Some(Reverse((_, id))) = open.pop() {
        if clock.elapsed().as_secs_f64() > opts.time_limit {
            return Err(MmdError::TimeLimit(opts.time_limit));
        }
        if store.len() > opts.max_nodes {
            return Err(MmdError::NodeLimit(opts.max_nodes));
        }
        expanded += 1;
        let trajs = paths_to_trajectories(graph, &store[id].paths, opts.dt)?;
        let Some(c) = first_conflict(&trajs, shape, DEFAULT_SUBSTEPS)? else {
            return Ok(GridSolution {
                paths: store[id].paths.clone(),
                trajs,
                nodes_expanded: expanded,
                nodes_generated: store.len(),
                wall_time: clock.elapsed().as_secs_f64(),
            });
        };
        if c.t_step == 0 {
            return Err(MmdError::InvalidInput(format!(
                "robots {} and {} overlap at their starts",
                c.robot_i, c.robot_j
            )));
        }
        let t = c.t_step;
        let at_end = {
            let (a, b) = (trajs[c.robot_i].states()[t].q, trajs[c.robot_j].states()[t].q);
            shape.spheres.iter().any(|(oa, ra)| {
                shape
                    .spheres
                    .iter()
                    .any(|(ob, rb)| crate::geometry::disks_overlap(&(a + oa), *ra, &(b + ob), *rb))
            })
        };
        for k in [c.robot_i, c.robot_j] {
            let path = &store[id].paths[k];
            let mut cons = store[id].constraints.clone();
            if at_end {
                cons[k].vertex.insert((path.at(t), t));
            } else {
                cons[k].edge.insert((path.at(t - 1), path.at(t), t));
            }
            let mut paths = store[id].paths.clone();
            match plan_one(k, &cons[k], &paths) {
                Ok(p) => paths[k] = p,
                Err(MmdError::NoPath(_)) => continue,
                Err(e) => return Err(e),
            }
            let n_conflicts = count(&paths)?;
            let cid = store.len();
            store.push(GridCtNode {
                constraints: cons,
                paths,
                n_conflicts,
            });
            open.push(Reverse((n_conflicts, cid)));
        }
    }
    Err(MmdError::NoPath("constraint tree exhausted".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aabb, Shape, TileKind};
    use crate::rng::rng_for;
    use crate::worlds::{DemoConfig, Dataset};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn open_graph() -> GridGraph {
        GridGraph::from_world(&World::single(TileKind::Empty), &RobotShape::default()).unwrap()
    }

    /// Plain Dijkstra over the static graph.
    fn dijkstra(graph: &GridGraph, costs: &CostMap, s: Vertex, goal: Vertex) -> Option<f64> {
        let mut dist = vec![f64::INFINITY; graph.n_cells()];
        let mut heap = BinaryHeap::new();
        dist[s] = 0.0;
        heap.push(Reverse((Ord64(0.0), s)));
        while let Some(Reverse((Ord64(d), v))) = heap.pop() {
            if v == goal {
                return Some(d);
            }
            if d > dist[v] {
                continue;
            }
            for a in Action::MOVES {
                if let Some(u) = graph.neighbor(v, a) {
                    let nd = d + costs.cost(v, a);
                    if nd < dist[u] {
                        dist[u] = nd;
                        heap.push(Reverse((Ord64(nd), u)));
                    }
                }
            }
        }
        None
    }

    fn random_costs(graph: &GridGraph, rng: &mut crate::rng::Rng) -> CostMap {
        CostMap {
            moves: (0..graph.n_cells()).map(|_| [(); 4].map(|_| rng.random_range(1.0..11.0))).collect(),
            wait: 1.0,
        }
    }

    #[test]
    fn graph_geometry() {
        let g = open_graph();
        assert_eq!((g.cols(), g.rows()), (20, 20));
        assert!((g.position(0) - Vec2::new(-0.95, -0.95)).norm() < 1e-12);
        assert!((g.position(g.n_cells() - 1) - Vec2::new(0.95, 0.95)).norm() < 1e-12);
        let hw = GridGraph::from_world(&World::single(TileKind::Highways), &RobotShape::default()).unwrap();
        let center = hw.cell_at(&Vec2::new(0.05, 0.05)).unwrap();
        assert!(!hw.is_free(center));
        for v in hw.vertices() {
            assert!(!disk_in_collision(&World::single(TileKind::Highways), &hw.position(v), 0.05));
        }
    }

    #[test]
    fn start_equal_goal_is_single_vertex() {
        let g = open_graph();
        let p = astar_focal(&g, &CostMap::uniform(&g), 42, 42, &GridConstraints::default(), &[], 1.5).unwrap();
        assert_eq!(p.vertices, vec![42]);
    }

    #[test]
    fn uniform_open_grid_path_is_manhattan() {
        let g = open_graph();
        let (s, t) = (g.cell(2, 3).unwrap(), g.cell(15, 11).unwrap());
        let p = astar_focal(&g, &CostMap::uniform(&g), s, t, &GridConstraints::default(), &[], 1.0).unwrap();
        assert_eq!(p.len() - 1, 13 + 8);
        assert!(p.vertices.windows(2).all(|w| action_between(&g, w[0], w[1]).is_some()));
    }

    #[test]
    fn vertex_constraint_forces_detour_or_wait() {
        let g = open_graph();
        let (s, t) = (g.cell(0, 0).unwrap(), g.cell(3, 0).unwrap());
        let mut cons = GridConstraints::default();
        cons.vertex.insert((g.cell(1, 0).unwrap(), 1));
        let p = astar_focal(&g, &CostMap::uniform(&g), s, t, &cons, &[], 1.0).unwrap();
        assert_ne!(p.at(1), g.cell(1, 0).unwrap());
        assert_eq!(p.len() - 1, 4);
    }

    #[test]
    fn goal_constraint_delays_arrival() {
        let g = open_graph();
        let (s, t) = (g.cell(0, 0).unwrap(), g.cell(2, 0).unwrap());
        let mut cons = GridConstraints::default();
        cons.vertex.insert((t, 5));
        let p = astar_focal(&g, &CostMap::uniform(&g), s, t, &cons, &[], 1.0).unwrap();
        assert!(p.len() - 1 > 5);
        assert_eq!(*p.vertices.last().unwrap(), t);
    }

    #[test]
    fn focal_cost_bounded_against_dijkstra() {
        let world = World::single(TileKind::Highways);
        let g = GridGraph::from_world(&world, &RobotShape::default()).unwrap();
        let verts: Vec<Vertex> = g.vertices().collect();
        let mut rng = rng_for(99, &[]);
        for _ in 0..100 {
            let costs = random_costs(&g, &mut rng);
            let s = verts[rng.random_range(0..verts.len())];
            let t = verts[rng.random_range(0..verts.len())];
            let others: Vec<GridPath> = (0..3)
                .map(|_| {
                    let a = verts[rng.random_range(0..verts.len())];
                    let b = verts[rng.random_range(0..verts.len())];
                    astar_focal(&g, &CostMap::uniform(&g), a, b, &GridConstraints::default(), &[], 1.0).unwrap()
                })
                .collect();
            let refs: Vec<&GridPath> = others.iter().collect();
            let opt = dijkstra(&g, &costs, s, t).unwrap();
            let focal = astar_focal(&g, &costs, s, t, &GridConstraints::default(), &refs, 1.5).unwrap();
            assert!(focal.cost(&g, &costs) <= 1.5 * opt + 1e-9);
            let exact = astar_focal(&g, &costs, s, t, &GridConstraints::default(), &refs, 1.0).unwrap();
            assert!((exact.cost(&g, &costs) - opt).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_dataset_gives_uniform_costs() {
        let g = open_graph();
        assert_eq!(cost_map_from_data(&[], &g), CostMap::uniform(&g));
    }

    /// Independent re-count: walk cells in order and, for the first visit of
    /// each, look ahead for the first position in a different cell.
    fn brute_counts(traj: &Trajectory, g: &GridGraph) -> HashMap<(Vertex, Action), usize> {
        let pts: Vec<Vec2> = traj.positions().collect();
        let mut out = HashMap::new();
        let mut visited = Vec::new();
        for (i, p) in pts.iter().enumerate() {
            let col = ((p.x + 1.0) / 0.1).floor() as usize;
            let row = ((p.y + 1.0) / 0.1).floor() as usize;
            let s = row * 20 + col;
            if visited.contains(&s) {
                continue;
            }
            visited.push(s);
            let center = Vec2::new(-0.95 + col as f64 * 0.1, -0.95 + row as f64 * 0.1);
            let next = pts[i..].iter().find(|q| {
                ((q.x + 1.0) / 0.1).floor() as usize != col || ((q.y + 1.0) / 0.1).floor() as usize != row
            });
            if let Some(q) = next {
                let d = q - center;
                let best = Action::MOVES
                    .into_iter()
                    .filter(|a| g.neighbor(s, *a).is_some())
                    .fold(None::<(f64, Action)>, |acc, a| {
                        let sc = a.direction().dot(&d);
                        match acc {
                            Some((b, _)) if b >= sc => acc,
                            _ => Some((sc, a)),
                        }
                    });
                *out.entry((s, best.unwrap().1)).or_insert(0) += 1;
            }
        }
        out
    }

    #[test]
    fn east_bound_demonstration_counts() {
        let g = open_graph();
        let pts: Vec<Vec2> = (0..64).map(|t| Vec2::new(-0.93 + 0.028 * t as f64, 0.02)).collect();
        let traj = Trajectory::from_positions(&pts, 0.04).unwrap();
        let counts = edge_counts(std::slice::from_ref(&traj), &g);
        let brute = brute_counts(&traj, &g);
        for v in 0..g.n_cells() {
            for a in Action::MOVES {
                assert_eq!(counts[v][a.index()], brute.get(&(v, a)).copied().unwrap_or(0), "cell {v} {a:?}");
            }
        }
        let costs = cost_map_from_data(std::slice::from_ref(&traj), &g);
        let row = 10;
        for col in 0..18 {
            let v = g.cell(col, row).unwrap();
            assert_eq!(counts[v][Action::Right.index()], 1);
            assert_eq!(costs.cost(v, Action::Right), 11.0);
        }
    }

    #[test]
    fn highways_counts_favor_counter_clockwise() {
        let ds = Dataset::generate(TileKind::Highways, 200, 3, &DemoConfig::default()).unwrap();
        let g = GridGraph::from_world(&World::single(TileKind::Highways), &RobotShape::default()).unwrap();
        let counts = edge_counts(&ds.trajectories, &g);
        let (mut ccw, mut cw) = (0usize, 0usize);
        for v in g.vertices() {
            let p = g.position(v);
            for a in Action::MOVES {
                let d = a.direction();
                let cross = p.x * d.y - p.y * d.x;
                if cross > 0.0 {
                    ccw += counts[v][a.index()];
                } else if cross < 0.0 {
                    cw += counts[v][a.index()];
                }
            }
        }
        assert!(ccw > 2 * cw, "ccw {ccw} cw {cw}");
    }

    #[test]
    fn non_interacting_robots_need_no_splits() {
        let g = open_graph();
        let starts = [g.cell(1, 1).unwrap(), g.cell(1, 18).unwrap()];
        let goals = [g.cell(8, 1).unwrap(), g.cell(8, 18).unwrap()];
        let sol = ecbs_grid(&g, &CostMap::uniform(&g), &starts, &goals, &RobotShape::default(), &GridOptions::default()).unwrap();
        assert_eq!(sol.nodes_generated, 1);
        assert_eq!(sol.paths[0].len(), 8);
    }

    /// A one-cell-wide corridor with a two-cell-deep bay above its middle.
    fn corridor_world() -> World {
        let obstacles = vec![
            Shape::rect(-0.5, -0.5, 0.5, -0.01),
            Shape::rect(-0.5, 0.11, -0.01, 0.5),
            Shape::rect(0.11, 0.11, 0.5, 0.5),
            Shape::rect(-0.01, 0.31, 0.11, 0.5),
        ];
        World::new(vec![vec![TileKind::Empty]], 1.0, obstacles, Aabb::new(Vec2::new(-0.5, -0.5), Vec2::new(0.5, 0.5))).unwrap()
    }

    #[test]
    fn corridor_swap_uses_the_bay() {
        let world = corridor_world();
        let g = GridGraph::new(&world, &RobotShape::default(), 0.1).unwrap();
        assert_eq!(g.vertices().count(), 12);
        let (left, right) = (g.cell(0, 5).unwrap(), g.cell(9, 5).unwrap());
        let shape = RobotShape::default();
        let sol = ecbs_grid(&g, &CostMap::uniform(&g), &[left, right], &[right, left], &shape, &GridOptions::default()).unwrap();
        assert!(find_conflicts(&sol.trajs, &shape, DEFAULT_SUBSTEPS).unwrap().is_empty());
        let bay = [g.cell(5, 6).unwrap(), g.cell(5, 7).unwrap()];
        assert!(sol.paths.iter().any(|p| p.vertices.iter().any(|v| bay.contains(v))));
        assert_eq!(*sol.paths[0].vertices.last().unwrap(), right);
        assert_eq!(*sol.paths[1].vertices.last().unwrap(), left);
    }

    #[test]
    fn random_multi_robot_solutions_pass_validator() {
        let world = World::single(TileKind::Highways);
        let g = GridGraph::from_world(&world, &RobotShape::default()).unwrap();
        let shape = RobotShape::default();
        let verts: Vec<Vertex> = g.vertices().collect();
        let mut rng = rng_for(5, &[]);
        for _ in 0..10 {
            let mut pick = verts.clone();
            pick.shuffle(&mut rng);
            let spaced = |chosen: &[Vertex], v: Vertex| chosen.iter().all(|&c| g.manhattan(c, v) >= 3);
            let mut starts = Vec::new();
            let mut goals = Vec::new();
            for &v in &pick {
                if starts.len() < 4 && spaced(&starts, v) {
                    starts.push(v);
                } else if goals.len() < 4 && spaced(&goals, v) {
                    goals.push(v);
                }
            }
            let sol = ecbs_grid(&g, &CostMap::uniform(&g), &starts, &goals, &shape, &GridOptions::default()).unwrap();
            assert!(find_conflicts(&sol.trajs, &shape, DEFAULT_SUBSTEPS).unwrap().is_empty());
            for (k, p) in sol.paths.iter().enumerate() {
                assert_eq!((p.vertices[0], *p.vertices.last().unwrap()), (starts[k], goals[k]));
            }
        }
    }

    #[test]
    fn path_conversion_is_constant_velocity() {
        let g = open_graph();
        let p = GridPath {
            vertices: vec![g.cell(0, 0).unwrap(), g.cell(1, 0).unwrap(), g.cell(1, 1).unwrap()],
        };
        let traj = p.to_trajectory(&g, 5, 0.1).unwrap();
        assert_eq!(traj.horizon(), 5);
        assert!((traj.states()[0].qdot - Vec2::new(1.0, 0.0)).norm() < 1e-9);
        assert!((traj.states()[1].qdot - Vec2::new(0.0, 1.0)).norm() < 1e-9);
        assert_eq!(traj.states()[4].q, traj.states()[2].q);
        assert!(p.to_trajectory(&g, 2, 0.1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn counts_are_order_independent(seed in 0u64..1000) {
            let ds = Dataset::generate(TileKind::Highways, 12, seed, &DemoConfig::default()).unwrap();
            let g = GridGraph::from_world(&World::single(TileKind::Highways), &RobotShape::default()).unwrap();
            let mut shuffled = ds.trajectories.clone();
            shuffled.shuffle(&mut rng_for(seed, &[1]));
            prop_assert_eq!(edge_counts(&ds.trajectories, &g), edge_counts(&shuffled, &g));
        }
    }
}
