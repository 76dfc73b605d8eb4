//! Long-horizon trajectories chained across a sequence of tiles, one local
//! model per tile, joined at fixed boundary states.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::constraints::SphereConstraint;
use crate::coordination::LowLevel;
use crate::diffusion::{DenoiserModel, GuidanceSpec, ReverseProcess, SamplerConfig, Start};
use crate::error::{MmdError, Result};
use crate::geometry::{free_intervals, TileCoord, Vec2, World, DEFAULT_TILE_SIZE};
use crate::trajectory::{State, Trajectory};

/// Ordered tiles a robot passes through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub tiles: Vec<TileCoord>,
}

impl Skeleton {
    pub fn new(tiles: Vec<TileCoord>) -> Result<Self> {
        if tiles.is_empty() {
            return Err(MmdError::InvalidInput("skeleton needs at least one tile".into()));
        }
        for w in tiles.windows(2) {
            if !w[0].is_adjacent(&w[1]) {
                return Err(MmdError::InvalidInput(format!(
                    "tiles ({}, {}) and ({}, {}) are not adjacent",
                    w[0].col, w[0].row, w[1].col, w[1].row
                )));
            }
        }
        Ok(Skeleton { tiles })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

/// Endpoints of the edge shared by two adjacent tiles.
pub fn shared_edge(world: &World, a: TileCoord, b: TileCoord) -> Result<(Vec2, Vec2)> {
    if !a.is_adjacent(&b) {
        return Err(MmdError::InvalidInput("tiles are not adjacent".into()));
    }
    let (ca, cb) = (world.tile_center(a), world.tile_center(b));
    let mid = (ca + cb) * 0.5;
    let half = world.tile_size() * 0.5;
    let dir = cb - ca;
    let along = Vec2::new(-dir.y, dir.x).normalize() * half;
    Ok((mid - along, mid + along))
}

/// One boundary state per seam: the midpoint of the longest free stretch of
/// the shared edge, moving from tile `l` toward tile `l + 1` at `speeds[l]`.
pub fn choose_boundary_points(world: &World, skeleton: &Skeleton, speeds: &[f64], radius: f64) -> Result<Vec<State>> {
    let seams = skeleton.len().saturating_sub(1);
    if speeds.len() < seams {
        return Err(MmdError::InvalidInput("one speed per seam is required".into()));
    }
    let mut out = Vec::with_capacity(seams);
    for (l, w) in skeleton.tiles.windows(2).enumerate() {
        let (e0, e1) = shared_edge(world, w[0], w[1])?;
        let best = free_intervals(world, &e0, &e1, radius)
            .into_iter()
            .fold(None::<(f64, f64)>, |acc, iv| match acc {
                Some(b) if b.1 - b.0 >= iv.1 - iv.0 => Some(b),
                _ => Some(iv),
            })
            .ok_or_else(|| MmdError::InvalidInput(format!("shared edge of seam {l} is fully blocked")))?;
        let q = e0 + (e1 - e0) * (0.5 * (best.0 + best.1));
        let dir = (world.tile_center(w[1]) - world.tile_center(w[0])).normalize();
        out.push(State::new(q, dir * speeds[l]));
    }
    Ok(out)
}

/// Low-level planner for one robot following a skeleton.
pub struct SkeletonPlanner {
    pub world: Arc<World>,
    pub skeleton: Skeleton,
    pub models: Vec<Arc<DenoiserModel>>,
    pub boundaries: Vec<State>,
    pub start: State,
    pub goal: State,
    /// Steps for which the start state is held before moving.
    pub hold: usize,
    /// Weights and shape; world and constraints are filled per segment.
    pub guide: GuidanceSpec,
    pub sampler: SamplerConfig,
    locals: Vec<Arc<World>>,
}

impl SkeletonPlanner {
    /// Builds the planner with boundary points from [`choose_boundary_points`].
    pub fn new(
        world: Arc<World>,
        skeleton: Skeleton,
        models: Vec<Arc<DenoiserModel>>,
        start: State,
        goal: State,
        guide: GuidanceSpec,
    ) -> Result<Self> {
        let speeds: Vec<f64> = models.iter().map(|m| m.mean_speed).collect();
        let boundaries = choose_boundary_points(&world, &skeleton, &speeds, guide.shape.radius)?;
        Self::with_boundaries(world, skeleton, models, boundaries, start, goal, guide)
    }

    pub fn with_boundaries(
        world: Arc<World>,
        skeleton: Skeleton,
        models: Vec<Arc<DenoiserModel>>,
        boundaries: Vec<State>,
        start: State,
        goal: State,
        guide: GuidanceSpec,
    ) -> Result<Self> {
        if (world.tile_size() - DEFAULT_TILE_SIZE).abs() > 1e-12 {
            return Err(MmdError::InvalidInput("sequencing needs the default tile size".into()));
        }
        if models.len() != skeleton.len() {
            return Err(MmdError::InvalidInput(format!(
                "{} models for {} tiles",
                models.len(),
                skeleton.len()
            )));
        }
        if boundaries.len() + 1 != skeleton.len() {
            return Err(MmdError::InvalidInput("one boundary state per seam is required".into()));
        }
        let (h, dt) = (models[0].horizon, models[0].dt);
        if models.iter().any(|m| m.horizon != h || (m.dt - dt).abs() > 1e-12) {
            return Err(MmdError::HorizonMismatch("segment models disagree on H or dt".into()));
        }
        let mut locals = Vec::with_capacity(skeleton.len());
        for (l, tile) in skeleton.tiles.iter().enumerate() {
            let kind = world
                .tile_kind(*tile)
                .ok_or_else(|| MmdError::InvalidInput(format!("tile ({}, {}) outside the world", tile.col, tile.row)))?;
            if let Some(mk) = models[l].kind {
                if mk != kind {
                    return Err(MmdError::InvalidInput(format!("segment {l} model is for {mk}, tile is {kind}")));
                }
            }
            locals.push(Arc::new(World::single(kind)));
        }
        let first = skeleton.tiles[0];
        let last = skeleton.tiles[skeleton.len() - 1];
        if !world.tile_bounds(first).contains(&start.q) {
            return Err(MmdError::InvalidInput("start is not in the first skeleton tile".into()));
        }
        if !world.tile_bounds(last).contains(&goal.q) {
            return Err(MmdError::InvalidInput("goal is not in the last skeleton tile".into()));
        }
        for (l, b) in boundaries.iter().enumerate() {
            let (e0, e1) = shared_edge(&world, skeleton.tiles[l], skeleton.tiles[l + 1])?;
            let along = e1 - e0;
            let off = b.q - e0;
            let cross = along.x * off.y - along.y * off.x;
            let t = off.dot(&along) / along.norm_squared();
            if cross.abs() > 1e-9 * along.norm() || !(0.0..=1.0).contains(&t) {
                return Err(MmdError::InvalidInput(format!("boundary point {l} is off the shared edge")));
            }
        }
        Ok(SkeletonPlanner {
            world,
            skeleton,
            models,
            boundaries,
            start,
            goal,
            hold: 0,
            guide,
            sampler: SamplerConfig::default(),
            locals,
        })
    }

    pub fn with_hold(mut self, hold: usize) -> Self {
        self.hold = hold;
        self
    }

    fn segment_horizon(&self) -> usize {
        self.models[0].horizon
    }

    fn center(&self, l: usize) -> Vec2 {
        self.world.tile_center(self.skeleton.tiles[l])
    }

    /// Global state pinned at the start and end of segment `l`.
    fn segment_ends(&self, l: usize) -> (State, State) {
        let first = if l == 0 { self.start } else { self.boundaries[l - 1] };
        let last = if l + 1 == self.skeleton.len() { self.goal } else { self.boundaries[l] };
        (first, last)
    }

    /// Splits a stitched trajectory into its per-segment pieces (global frame).
    pub fn split(&self, traj: &Trajectory) -> Result<Vec<Trajectory>> {
        let h = self.segment_horizon();
        if traj.horizon() != self.horizon() {
            return Err(MmdError::HorizonMismatch(format!(
                "stitched trajectory has H={}, skeleton needs {}",
                traj.horizon(),
                self.horizon()
            )));
        }
        (0..self.skeleton.len())
            .map(|l| {
                let s = l * (h - 1);
                Trajectory::new(traj.states()[s..s + h].to_vec(), traj.dt())
            })
            .collect()
    }
}

impl LowLevel for SkeletonPlanner {
    fn horizon(&self) -> usize {
        self.skeleton.len() * (self.segment_horizon() - 1) + 1
    }

    fn dt(&self) -> f64 {
        self.models[0].dt
    }

    fn start(&self) -> State {
        self.start
    }

    fn goal(&self) -> State {
        self.goal
    }

    fn sample(
        &self,
        constraints: &[SphereConstraint],
        batch: usize,
        seed: u64,
        warm: Option<(&Trajectory, usize)>,
    ) -> Result<Vec<Trajectory>> {
        let h = self.segment_horizon();
        let n_seg = self.skeleton.len();
        let warm_parts = match warm {
            Some((prev, k)) => Some((self.split(prev)?, k)),
            None => None,
        };
        let mut guides = Vec::with_capacity(n_seg);
        let mut pins = Vec::with_capacity(n_seg);
        let mut warm_local = Vec::with_capacity(n_seg);
        for l in 0..n_seg {
            let c = self.center(l);
            let local: Vec<SphereConstraint> = constraints
                .iter()
                .filter_map(|con| con.windowed(l * (h - 1), h))
                .map(|con| con.translated(-c))
                .collect();
            let mut g = self.guide.clone().with_constraints(local);
            g.world = Some(self.locals[l].clone());
            guides.push(g);
            let (first, last) = self.segment_ends(l);
            let mut p = vec![(0, first.translated(-c))];
            if l == 0 {
                let rest = State::at_rest(first.q - c);
                p.extend((1..=self.hold.min(h - 2)).map(|t| (t, rest)));
            }
            p.push((h - 1, last.translated(-c)));
            pins.push(p);
            warm_local.push(warm_parts.as_ref().map(|(parts, _)| parts[l].translated(-c)));
        }
        let mut procs = Vec::with_capacity(n_seg);
        for l in 0..n_seg {
            let start = match (&warm_local[l], &warm_parts) {
                (Some(prev), Some((_, k))) => Start::Warm(prev, *k),
                _ => Start::Noise,
            };
            let seg_seed = crate::rng::derive_seed(seed, &[l as u64]);
            procs.push(ReverseProcess::new(
                &self.models[l],
                &pins[l],
                &guides[l],
                batch,
                seg_seed,
                start,
                &self.sampler,
            )?);
        }
        // Segments advance in lockstep; each step re-applies every segment's pins.
        while procs.iter().any(|p| p.remaining() > 0) {
            for p in procs.iter_mut().filter(|p| p.remaining() > 0) {
                p.step()?;
            }
        }
        let mut segs: Vec<Vec<Trajectory>> = Vec::with_capacity(n_seg);
        for p in procs {
            segs.push(p.finish()?);
        }
        let dt = self.dt();
        (0..batch)
            .map(|b| {
                let mut states: Vec<State> = Vec::with_capacity(self.horizon());
                for (l, seg) in segs.iter().enumerate() {
                    let c = self.center(l);
                    let part = seg[b].states();
                    let skip = usize::from(l > 0);
                    states.extend(part[skip..].iter().map(|s| s.translated(c)));
                }
                // Pinned states are restored in the global frame so seams are exact.
                for l in 0..n_seg {
                    let (first, last) = self.segment_ends(l);
                    states[l * (h - 1)] = first;
                    states[(l + 1) * (h - 1)] = last;
                }
                if self.hold > 0 {
                    let rest = State::at_rest(self.start.q);
                    for s in states.iter_mut().take(self.hold.min(h - 2) + 1).skip(1) {
                        *s = rest;
                    }
                }
                Trajectory::new(states, dt)
            })
            .collect()
    }
}

/// Single stitched trajectory for one robot along `skeleton`.
pub fn plan_skeleton(
    world: Arc<World>,
    skeleton: Skeleton,
    models: Vec<Arc<DenoiserModel>>,
    start: State,
    goal: State,
    guide: GuidanceSpec,
    seed: u64,
) -> Result<Trajectory> {
    let planner = SkeletonPlanner::new(world, skeleton, models, start, goal, guide)?;
    Ok(planner.sample(&[], 1, seed, None)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TileKind;

    fn world_2x2() -> World {
        World::from_tiles(
            vec![
                vec![TileKind::Empty, TileKind::Empty],
                vec![TileKind::Conveyor, TileKind::Highways],
            ],
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn skeleton_rejects_non_adjacent_tiles() {
        assert!(Skeleton::new(vec![TileCoord::new(0, 0), TileCoord::new(1, 1)]).is_err());
        assert!(Skeleton::new(vec![]).is_err());
        assert!(Skeleton::new(vec![TileCoord::new(0, 0), TileCoord::new(1, 0)]).is_ok());
    }

    #[test]
    fn boundary_between_empty_tiles_is_edge_midpoint() {
        let w = world_2x2();
        let sk = Skeleton::new(vec![TileCoord::new(0, 0), TileCoord::new(1, 0)]).unwrap();
        let b = choose_boundary_points(&w, &sk, &[0.7], 0.05).unwrap();
        assert!((b[0].q - Vec2::new(0.0, -1.0)).norm() < 1e-12);
        assert!((b[0].qdot - Vec2::new(0.7, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn boundary_on_half_blocked_edge_is_free_midpoint() {
        let w = world_2x2();
        // Conveyor tile (0, 1) above Empty tile (0, 0): its bottom wall spans
        // x in [-0.5, 0.5] of the tile and touches the shared edge.
        let sk = Skeleton::new(vec![TileCoord::new(0, 1), TileCoord::new(0, 0)]).unwrap();
        let b = choose_boundary_points(&w, &sk, &[1.0], 0.05).unwrap();
        let c = w.tile_center(TileCoord::new(0, 1));
        let (e0, e1) = shared_edge(&w, TileCoord::new(0, 1), TileCoord::new(0, 0)).unwrap();
        let ivs = free_intervals(&w, &e0, &e1, 0.05);
        assert_eq!(ivs.len(), 2);
        let local_x = b[0].q.x - c.x;
        // Free stretches are [-1, -0.55] and [0.55, 1] in the tile frame.
        assert!((local_x.abs() - 0.775).abs() < 1e-6, "{local_x}");
        assert!((b[0].q.y - 0.0).abs() < 1e-12);
        assert!((b[0].qdot - Vec2::new(0.0, -1.0)).norm() < 1e-12);
    }
}
