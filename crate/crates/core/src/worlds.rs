//! Procedural single-robot demonstrations per map motif, and the per-map
//! data-adherence scores.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MmdError, Result};
use crate::geometry::{
    drop_region_centers, free_intervals, sdf, TileCoord, TileKind, Vec2, World, CONVEYOR_MOUTH_X, DEFAULT_ROBOT_RADIUS,
    DEFAULT_TILE_SIZE,
};
use crate::rng::{rng_for, Rng};
use crate::trajectory::{read_batch, write_batch, State, Trajectory};

/// Fraction of the horizon a Drop-Region pause must span, consecutively.
pub const DROP_PAUSE_FRACTION: f64 = 0.25;
/// Radius of a drop-off region.
pub const DROP_REGION_RADIUS: f64 = 0.15;
/// Speed of demonstrations that enter or leave through a tile edge.
pub const PORT_SPEED: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub traj: Trajectory,
    pub map_kind: TileKind,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct AdherenceScore(f64);

impl AdherenceScore {
    pub fn new(value: f64) -> Self {
        AdherenceScore(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Probability that an endpoint is placed on a tile-edge port instead of the interior.
    pub port_probability: f64,
    pub max_retries: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            horizon: crate::trajectory::DEFAULT_HORIZON,
            dt: crate::trajectory::DEFAULT_DT,
            port_probability: 0.3,
            max_retries: 1000,
        }
    }
}

/// A point on a tile edge where trajectories may enter or leave.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Port {
    pub position: Vec2,
    /// Unit normal pointing out of the tile.
    pub outward: Vec2,
}

/// Tile edges in the order right, top, left, bottom, with their outward normals.
pub fn tile_edges(half: f64) -> [(Vec2, Vec2, Vec2); 4] {
    [
        (Vec2::new(half, -half), Vec2::new(half, half), Vec2::new(1.0, 0.0)),
        (Vec2::new(-half, half), Vec2::new(half, half), Vec2::new(0.0, 1.0)),
        (Vec2::new(-half, -half), Vec2::new(-half, half), Vec2::new(-1.0, 0.0)),
        (Vec2::new(-half, -half), Vec2::new(half, -half), Vec2::new(0.0, -1.0)),
    ]
}

/// Midpoints of every free sub-interval of every edge of a tile (tile-local frame).
pub fn edge_ports(kind: TileKind) -> Vec<Port> {
    let world = World::single(kind);
    let half = DEFAULT_TILE_SIZE * 0.5;
    let mut out = Vec::new();
    for (a, b, n) in tile_edges(half) {
        for (lo, hi) in free_intervals(&world, &a, &b, DEFAULT_ROBOT_RADIUS) {
            let s = 0.5 * (lo + hi);
            out.push(Port {
                position: a + (b - a) * s,
                outward: n,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Curves

/// Cubic spline through `points` with chord-length parameterization and clamped
/// end tangents.
struct Spline {
    knots: Vec<f64>,
    values: Vec<Vec2>,
    second: Vec<Vec2>,
}

impl Spline {
    fn clamped(points: &[Vec2], d0: Option<Vec2>, dn: Option<Vec2>) -> Spline {
        let mut knots = vec![0.0];
        let mut values = vec![points[0]];
        for p in &points[1..] {
            let step = (p - values[values.len() - 1]).norm();
            if step > 1e-9 {
                knots.push(knots[knots.len() - 1] + step);
                values.push(*p);
            }
        }
        let m = values.len();
        if m < 2 {
            return Spline {
                knots,
                values,
                second: vec![Vec2::zeros()],
            };
        }
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let chord0 = (values[1] - values[0]) / h[0];
        let chordn = (values[m - 1] - values[m - 2]) / h[m - 2];
        let d0 = d0.map(|d| d.normalize()).unwrap_or(chord0);
        let dn = dn.map(|d| d.normalize()).unwrap_or(chordn);

        // Tridiagonal system for the second derivatives.
        let mut lower = vec![0.0; m];
        let mut diag = vec![0.0; m];
        let mut upper = vec![0.0; m];
        let mut rhs = vec![Vec2::zeros(); m];
        diag[0] = 2.0 * h[0];
        upper[0] = h[0];
        rhs[0] = (chord0 - d0) * 6.0;
        for i in 1..m - 1 {
            lower[i] = h[i - 1];
            diag[i] = 2.0 * (h[i - 1] + h[i]);
            upper[i] = h[i];
            rhs[i] = ((values[i + 1] - values[i]) / h[i] - (values[i] - values[i - 1]) / h[i - 1]) * 6.0;
        }
        lower[m - 1] = h[m - 2];
        diag[m - 1] = 2.0 * h[m - 2];
        rhs[m - 1] = (dn - chordn) * 6.0;
        for i in 1..m {
            let w = lower[i] / diag[i - 1];
            diag[i] -= w * upper[i - 1];
            let prev = rhs[i - 1];
            rhs[i] -= prev * w;
        }
        let mut second = vec![Vec2::zeros(); m];
        second[m - 1] = rhs[m - 1] / diag[m - 1];
        for i in (0..m - 1).rev() {
            second[i] = (rhs[i] - second[i + 1] * upper[i]) / diag[i];
        }
        Spline { knots, values, second }
    }

    fn length_param(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    fn eval(&self, u: f64) -> Vec2 {
        let m = self.values.len();
        if m < 2 {
            return self.values[0];
        }
        let u = u.clamp(0.0, self.length_param());
        let i = match self.knots.iter().position(|&k| k > u) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => m - 2,
        }
        .min(m - 2);
        let h = self.knots[i + 1] - self.knots[i];
        let a = self.knots[i + 1] - u;
        let b = u - self.knots[i];
        self.second[i] * (a * a * a / (6.0 * h))
            + self.second[i + 1] * (b * b * b / (6.0 * h))
            + (self.values[i] / h - self.second[i] * (h / 6.0)) * a
            + (self.values[i + 1] / h - self.second[i + 1] * (h / 6.0)) * b
    }
}

/// Dense polyline of a smoothed path with cumulative arc length.
struct ArcPath {
    points: Vec<Vec2>,
    cumulative: Vec<f64>,
}

impl ArcPath {
    fn new(waypoints: &[Vec2], d0: Option<Vec2>, dn: Option<Vec2>) -> ArcPath {
        let spline = Spline::clamped(waypoints, d0, dn);
        let n = 400 * spline.values.len().max(2);
        let points: Vec<Vec2> = (0..=n)
            .map(|i| spline.eval(spline.length_param() * i as f64 / n as f64))
            .collect();
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            cumulative.push(cumulative[cumulative.len() - 1] + (w[1] - w[0]).norm());
        }
        ArcPath { points, cumulative }
    }

    fn length(&self) -> f64 {
        self.cumulative[self.cumulative.len() - 1]
    }

    fn at_length(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.length());
        let i = self.cumulative.partition_point(|&c| c < s);
        if i == 0 {
            return self.points[0];
        }
        let (c0, c1) = (self.cumulative[i - 1], self.cumulative[i]);
        let f = if c1 > c0 { (s - c0) / (c1 - c0) } else { 0.0 };
        self.points[i - 1] * (1.0 - f) + self.points[i] * f
    }
}

/// Samples `n` positions along `path` with a cubic Hermite time law clamped
/// to the given end speeds.
fn sample_leg(path: &ArcPath, n: usize, v_start: f64, v_end: f64, dt: f64) -> Vec<Vec2> {
    let len = path.length();
    let duration = (n - 1) as f64 * dt;
    let (a, b) = if len > 1e-9 {
        ((v_start * duration / len).clamp(0.0, 3.0), (v_end * duration / len).clamp(0.0, 3.0))
    } else {
        (0.0, 0.0)
    };
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let (t2, t3) = (t * t, t * t * t);
            let s = (t3 - 2.0 * t2 + t) * a + (-2.0 * t3 + 3.0 * t2) + (t3 - t2) * b;
            path.at_length(s * len)
        })
        .collect()
}

/// Positions to trajectory: interior velocities are central differences,
/// end velocities are the prescribed boundary velocities.
fn assemble(positions: Vec<Vec2>, v_start: Vec2, v_end: Vec2, dt: f64) -> Result<Trajectory> {
    let mut traj = Trajectory::from_positions(&positions, dt)?;
    let h = traj.horizon();
    let states = traj.states_mut();
    states[0].qdot = v_start;
    states[h - 1].qdot = v_end;
    Ok(traj)
}

#[derive(Debug, Clone, Copy)]
struct Endpoint {
    q: Vec2,
    /// Velocity at the endpoint; zero for rest.
    v: Vec2,
}

fn random_free_point(rng: &mut Rng, world: &World, lo: Vec2, hi: Vec2, clearance: f64) -> Vec2 {
    loop {
        let p = Vec2::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y));
        if sdf(world, &p) > clearance {
            return p;
        }
    }
}

fn trajectory_is_clear(world: &World, traj: &Trajectory) -> bool {
    let half = DEFAULT_TILE_SIZE * 0.5 + 1e-9;
    traj.positions()
        .all(|p| sdf(world, &p) > DEFAULT_ROBOT_RADIUS + 0.01 && p.x.abs() <= half && p.y.abs() <= half)
}

fn port_endpoint(port: &Port, entering: bool) -> Endpoint {
    let v = if entering { -port.outward } else { port.outward } * PORT_SPEED;
    Endpoint { q: port.position, v }
}

/// Squircle (L4) radius and angle; Highways arcs interpolate these.
fn squircle_polar(p: &Vec2) -> (f64, f64) {
    let r = (p.x.powi(4) + p.y.powi(4)).powf(0.25);
    (r, p.y.atan2(p.x))
}

fn squircle_point(r: f64, theta: f64) -> Vec2 {
    let (c, s) = (theta.cos(), theta.sin());
    let n = (c.powi(4) + s.powi(4)).powf(0.25);
    Vec2::new(c, s) * (r / n)
}

fn demo_once(kind: TileKind, rng: &mut Rng, world: &World, cfg: &DemoConfig, ports: &[Port]) -> Option<Trajectory> {
    let h = cfg.horizon;
    let dt = cfg.dt;
    let pick_port = |rng: &mut Rng, filter: &dyn Fn(&Port) -> bool| -> Option<Port> {
        let candidates: Vec<&Port> = ports.iter().filter(|p| filter(p)).collect();
        if candidates.is_empty() {
            None
        } else {
            Some(*candidates[rng.random_range(0..candidates.len())])
        }
    };
    let use_start_port = rng.random_bool(cfg.port_probability);
    let use_goal_port = rng.random_bool(cfg.port_probability);
    let at_rest = |q: Vec2| Endpoint { q, v: Vec2::zeros() };

    match kind {
        TileKind::Empty => {
            let lo = Vec2::new(-0.85, -0.85);
            let hi = Vec2::new(0.85, 0.85);
            let start = match use_start_port.then(|| pick_port(rng, &|_| true)).flatten() {
                Some(p) => port_endpoint(&p, true),
                None => at_rest(random_free_point(rng, world, lo, hi, 0.1)),
            };
            let goal = match use_goal_port.then(|| pick_port(rng, &|_| true)).flatten() {
                Some(p) => port_endpoint(&p, false),
                None => at_rest(random_free_point(rng, world, lo, hi, 0.1)),
            };
            if (goal.q - start.q).norm() < 0.4 {
                return None;
            }
            let path = ArcPath::new(&[start.q, goal.q], None, None);
            let pos = sample_leg(&path, h, start.v.norm(), goal.v.norm(), dt);
            assemble(pos, start.v, goal.v, dt).ok()
        }
        TileKind::Highways => {
            let ring = |rng: &mut Rng| {
                let r = rng.random_range(0.5..0.88);
                let th = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                squircle_point(r, th)
            };
            let start = match use_start_port.then(|| pick_port(rng, &|_| true)).flatten() {
                Some(p) => port_endpoint(&p, true),
                None => at_rest(ring(rng)),
            };
            let goal = match use_goal_port.then(|| pick_port(rng, &|_| true)).flatten() {
                Some(p) => port_endpoint(&p, false),
                None => at_rest(ring(rng)),
            };
            let (rs, ts) = squircle_polar(&start.q);
            let (rg, tg) = squircle_polar(&goal.q);
            let sweep = (tg - ts).rem_euclid(std::f64::consts::TAU);
            if !(0.5..=std::f64::consts::TAU - 0.3).contains(&sweep) {
                return None;
            }
            let n_way = ((sweep / 0.2).ceil() as usize).max(2);
            let ring_r = |r: f64| r.clamp(0.5, 0.9);
            let mut way = vec![start.q];
            for i in 1..n_way {
                let f = i as f64 / n_way as f64;
                // Ease the radius in from ports so the arc stays on the ring road.
                let r = ring_r(rs) * (1.0 - f) + ring_r(rg) * f;
                way.push(squircle_point(r, ts + sweep * f));
            }
            way.push(goal.q);
            let d0 = (start.v.norm() > 0.0).then_some(start.v);
            let dn = (goal.v.norm() > 0.0).then_some(goal.v);
            let path = ArcPath::new(&way, d0, dn);
            let pos = sample_leg(&path, h, start.v.norm(), goal.v.norm(), dt);
            assemble(pos, start.v, goal.v, dt).ok()
        }
        TileKind::Conveyor => {
            // Top corridor right-to-left, or bottom corridor left-to-right.
            let top = rng.random_bool(0.5);
            let sign = if top { 1.0 } else { -1.0 };
            let from_right = top;
            let side = |right: bool| if right { (0.62, 0.9) } else { (-0.9, -0.62) };
            let in_side = |p: &Port, right: bool| if right { p.position.x > 0.0 } else { p.position.x < 0.0 };
            let (sx0, sx1) = side(from_right);
            let (gx0, gx1) = side(!from_right);
            let start = match use_start_port
                .then(|| pick_port(rng, &|p| in_side(p, from_right)))
                .flatten()
            {
                Some(p) => port_endpoint(&p, true),
                None => at_rest(random_free_point(rng, world, Vec2::new(sx0, -0.9), Vec2::new(sx1, 0.9), 0.1)),
            };
            let goal = match use_goal_port
                .then(|| pick_port(rng, &|p| in_side(p, !from_right)))
                .flatten()
            {
                Some(p) => port_endpoint(&p, false),
                None => at_rest(random_free_point(rng, world, Vec2::new(gx0, -0.9), Vec2::new(gx1, 0.9), 0.1)),
            };
            let y = 0.4 * sign;
            let dir = if from_right { -1.0 } else { 1.0 };
            let way = [
                start.q,
                Vec2::new(-dir * 0.76, y),
                Vec2::new(-dir * 0.45, y),
                Vec2::new(dir * 0.45, y),
                Vec2::new(dir * 0.76, y),
                goal.q,
            ];
            let d0 = (start.v.norm() > 0.0).then_some(start.v);
            let dn = (goal.v.norm() > 0.0).then_some(goal.v);
            let path = ArcPath::new(&way, d0, dn);
            let pos = sample_leg(&path, h, start.v.norm(), goal.v.norm(), dt);
            assemble(pos, start.v, goal.v, dt).ok()
        }
        TileKind::DropRegion => {
            let lo = Vec2::new(-0.9, -0.9);
            let hi = Vec2::new(0.9, 0.9);
            let start = match use_start_port.then(|| pick_port(rng, &|_| true)).flatten() {
                Some(p) => port_endpoint(&p, true),
                None => at_rest(random_free_point(rng, world, lo, hi, 0.12)),
            };
            let goal = match use_goal_port.then(|| pick_port(rng, &|_| true)).flatten() {
                Some(p) => port_endpoint(&p, false),
                None => at_rest(random_free_point(rng, world, lo, hi, 0.12)),
            };
            let centers = drop_region_centers();
            let drop = centers[rng.random_range(0..centers.len())];
            let hold = (DROP_PAUSE_FRACTION * h as f64).ceil() as usize + 4;
            let l1 = (drop - start.q).norm();
            let l2 = (goal.q - drop).norm();
            let moving = h.checked_sub(hold)?;
            let n1 = ((moving as f64 * l1 / (l1 + l2 + 1e-9)).round() as usize).clamp(4, moving.saturating_sub(4));
            let n2 = moving + 1 - n1;
            if n1 < 4 || n2 < 4 {
                return None;
            }
            let d0 = (start.v.norm() > 0.0).then_some(start.v);
            let dn = (goal.v.norm() > 0.0).then_some(goal.v);
            let leg1 = sample_leg(&ArcPath::new(&[start.q, drop], d0, None), n1, start.v.norm(), 0.0, dt);
            let leg2 = sample_leg(&ArcPath::new(&[drop, goal.q], None, dn), n2, 0.0, goal.v.norm(), dt);
            let mut pos = leg1;
            pos.extend(std::iter::repeat_n(drop, hold - 1));
            pos.extend_from_slice(&leg2);
            debug_assert_eq!(pos.len(), h);
            let mut traj = assemble(pos, start.v, goal.v, dt).ok()?;
            // The pause is a full stop.
            for s in traj.states_mut().iter_mut() {
                if (s.q - drop).norm() == 0.0 {
                    s.qdot = Vec2::zeros();
                }
            }
            Some(traj)
        }
    }
}

/// Start and goal positions, at rest, drawn from the same distribution as
/// the at-rest endpoints of the demonstrations of `kind` (tile-local frame).
pub fn random_endpoints(kind: TileKind, rng: &mut Rng) -> (Vec2, Vec2) {
    let world = World::single(kind);
    let full = (Vec2::new(-0.85, -0.85), Vec2::new(0.85, 0.85));
    loop {
        let (start, goal) = match kind {
            TileKind::Empty => (
                random_free_point(rng, &world, full.0, full.1, 0.1),
                random_free_point(rng, &world, full.0, full.1, 0.1),
            ),
            TileKind::Highways => {
                let mut ring = || {
                    let r = rng.random_range(0.5..0.88);
                    let th = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                    squircle_point(r, th)
                };
                let (s, g) = (ring(), ring());
                let sweep = (squircle_polar(&g).1 - squircle_polar(&s).1).rem_euclid(std::f64::consts::TAU);
                if !(0.5..=std::f64::consts::TAU - 0.3).contains(&sweep) {
                    continue;
                }
                (s, g)
            }
            TileKind::Conveyor => {
                let right = (Vec2::new(0.62, -0.9), Vec2::new(0.9, 0.9));
                let left = (Vec2::new(-0.9, -0.9), Vec2::new(-0.62, 0.9));
                let (a, b) = if rng.random_bool(0.5) { (right, left) } else { (left, right) };
                (
                    random_free_point(rng, &world, a.0, a.1, 0.1),
                    random_free_point(rng, &world, b.0, b.1, 0.1),
                )
            }
            TileKind::DropRegion => {
                let (lo, hi) = (Vec2::new(-0.9, -0.9), Vec2::new(0.9, 0.9));
                (
                    random_free_point(rng, &world, lo, hi, 0.12),
                    random_free_point(rng, &world, lo, hi, 0.12),
                )
            }
        };
        if (goal - start).norm() >= 0.4 {
            return (start, goal);
        }
    }
}

/// Generates `n` collision-free demonstrations of the motif of `kind`, in the
/// tile-local frame. Deterministic per seed; demonstration `i` uses its own RNG stream.
pub fn generate_demonstrations(kind: TileKind, n: usize, seed: u64, cfg: &DemoConfig) -> Result<Vec<Demonstration>> {
    if n == 0 {
        return Err(MmdError::InvalidInput("demonstration count must be positive".into()));
    }
    let world = World::single(kind);
    let ports = edge_ports(kind);
    (0..n)
        .map(|i| {
            let demo_seed = crate::rng::derive_seed(seed, &[kind.code() as u64, i as u64]);
            let mut rng = rng_for(demo_seed, &[]);
            for _ in 0..cfg.max_retries {
                if let Some(traj) = demo_once(kind, &mut rng, &world, cfg, &ports) {
                    if trajectory_is_clear(&world, &traj) && adherence(kind, &traj).value() == 1.0 {
                        return Ok(Demonstration {
                            traj,
                            map_kind: kind,
                            seed: demo_seed,
                        });
                    }
                }
            }
            Err(MmdError::InvalidInput(format!(
                "could not draw a valid {kind} demonstration after {} retries",
                cfg.max_retries
            )))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Adherence

fn point_segment_distance(p: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    let ab = b - a;
    let l2 = ab.norm_squared();
    if l2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / l2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn empty_adherence(traj: &Trajectory) -> f64 {
    let a = traj.first().q;
    let b = traj.last().q;
    let l = (b - a).norm();
    let h = traj.horizon();
    let m = traj
        .positions()
        .filter(|p| {
            let d = point_segment_distance(p, &a, &b);
            if l == 0.0 {
                d == 0.0
            } else {
                d < l / 10.0
            }
        })
        .count();
    m as f64 / h as f64
}

/// Cumulative signed angle swept about the origin.
pub fn cumulative_angle(traj: &Trajectory) -> f64 {
    let pts: Vec<Vec2> = traj.positions().collect();
    pts.windows(2)
        .map(|w| {
            let (u, v) = (w[0], w[1]);
            let cross = u.x * v.y - u.y * v.x;
            cross.atan2(u.dot(&v))
        })
        .sum()
}

fn conveyor_adherence(traj: &Trajectory) -> f64 {
    let pts: Vec<Vec2> = traj.positions().collect();
    let mouth = CONVEYOR_MOUTH_X;
    let inside = |p: &Vec2| p.x.abs() < mouth;
    let mut i = 0;
    while i < pts.len() {
        if !inside(&pts[i]) {
            i += 1;
            continue;
        }
        let start = i;
        while i < pts.len() && inside(&pts[i]) {
            i += 1;
        }
        if start == 0 || i == pts.len() {
            continue;
        }
        let before = pts[start - 1];
        let after = pts[i];
        let run = &pts[start..i];
        let top = run.iter().all(|p| p.y > 0.0);
        let bottom = run.iter().all(|p| p.y < 0.0);
        if top && before.x >= mouth && after.x <= -mouth {
            return 1.0;
        }
        if bottom && before.x <= -mouth && after.x >= mouth {
            return 1.0;
        }
    }
    0.0
}

fn drop_region_adherence(traj: &Trajectory) -> f64 {
    let need = (DROP_PAUSE_FRACTION * traj.horizon() as f64).ceil() as usize;
    for c in drop_region_centers() {
        let mut run = 0;
        for p in traj.positions() {
            if (p - c).norm() <= DROP_REGION_RADIUS {
                run += 1;
                if run >= need {
                    return 1.0;
                }
            } else {
                run = 0;
            }
        }
    }
    0.0
}

/// Map-specific data adherence of a trajectory expressed in the tile-local
/// frame (2x2 tile centered at the origin).
pub fn adherence(kind: TileKind, traj: &Trajectory) -> AdherenceScore {
    let v = match kind {
        TileKind::Empty => empty_adherence(traj),
        TileKind::Highways => {
            if cumulative_angle(traj) > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        TileKind::Conveyor => conveyor_adherence(traj),
        TileKind::DropRegion => drop_region_adherence(traj),
    };
    AdherenceScore::new(v)
}

/// Expresses a world-frame trajectory in the local frame of `tile`.
pub fn to_tile_frame(world: &World, tile: TileCoord, traj: &Trajectory) -> Trajectory {
    let c = world.tile_center(tile);
    let s = DEFAULT_TILE_SIZE / world.tile_size();
    let states = traj
        .states()
        .iter()
        .map(|st| State::new((st.q - c) * s, st.qdot * s))
        .collect();
    Trajectory::new(states, traj.dt()).expect("scaled trajectory stays valid")
}

/// Splits a world-frame trajectory into maximal runs inside one tile.
/// Runs shorter than two states are dropped.
pub fn split_by_tile(world: &World, traj: &Trajectory) -> Vec<(TileCoord, Trajectory)> {
    let mut out = Vec::new();
    let states = traj.states();
    let mut i = 0;
    while i < states.len() {
        let tile = world.tile_at(&states[i].q);
        let start = i;
        while i < states.len() && world.tile_at(&states[i].q) == tile {
            i += 1;
        }
        if let Some(tile) = tile {
            if i - start >= 2 {
                let seg = Trajectory::new(states[start..i].to_vec(), traj.dt()).expect("sub-trajectory is valid");
                out.push((tile, seg));
            }
        }
    }
    out
}

/// Mean adherence over all (robot, traversed tile) pairs.
pub fn adherence_mean(world: &World, trajs: &[Trajectory]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for traj in trajs {
        for (tile, seg) in split_by_tile(world, traj) {
            let kind = world.tile_kind(tile).expect("tile inside grid");
            total += adherence(kind, &to_tile_frame(world, tile, &seg)).value();
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    total / count as f64
}

/// Mean of already-computed per-(robot, tile) scores.
pub fn mean_score(scores: &[AdherenceScore]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| s.value()).sum::<f64>() / scores.len() as f64
}

// ---------------------------------------------------------------------------
// Dataset files

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TileKind,
    pub horizon: usize,
    pub dt: f64,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn generate(kind: TileKind, n: usize, seed: u64, cfg: &DemoConfig) -> Result<Dataset> {
        let demos = generate_demonstrations(kind, n, seed, cfg)?;
        Ok(Dataset {
            kind,
            horizon: cfg.horizon,
            dt: cfg.dt,
            seed,
            trajectories: demos.into_iter().map(|d| d.traj).collect(),
        })
    }

    /// Mean speed over all states of all trajectories.
    pub fn mean_speed(&self) -> f64 {
        let (sum, n) = self
            .trajectories
            .iter()
            .flat_map(|t| t.states().iter())
            .fold((0.0, 0usize), |(s, n), st| (s + st.qdot.norm(), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    fn body(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        write_batch(&mut body, &self.trajectories)?;
        Ok(body)
    }

    /// SHA-256 of the trajectory block, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex_digest(&self.body()?))
    }

    /// Header (map kind, H, dt, count, seed), trajectory block, then the block's SHA-256.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let body = self.body()?;
        w.write_all(b"MMDS")?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u8(self.kind.code())?;
        w.write_u32::<LittleEndian>(self.horizon as u32)?;
        w.write_f64::<LittleEndian>(self.dt)?;
        w.write_u32::<LittleEndian>(self.trajectories.len() as u32)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_all(&body)?;
        w.write_all(&Sha256::digest(&body))?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MMDS" {
            return Err(MmdError::Format("not a dataset file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(MmdError::Format(format!("unsupported dataset version {version}")));
        }
        let kind = TileKind::from_code(r.read_u8()?)?;
        let horizon = r.read_u32::<LittleEndian>()? as usize;
        let dt = r.read_f64::<LittleEndian>()?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if rest.len() < 32 {
            return Err(MmdError::Format("dataset truncated".into()));
        }
        let (body, digest) = rest.split_at(rest.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(MmdError::Format("dataset checksum mismatch".into()));
        }
        let trajectories = read_batch(body)?;
        if trajectories.len() != count {
            return Err(MmdError::Format("dataset count mismatch".into()));
        }
        if trajectories.iter().any(|t| t.horizon() != horizon || t.dt() != dt) {
            return Err(MmdError::HorizonMismatch("dataset header disagrees with records".into()));
        }
        Ok(Dataset {
            kind,
            horizon,
            dt,
            seed,
            trajectories,
        })
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DemoConfig {
        DemoConfig::default()
    }

    fn line(a: Vec2, b: Vec2, h: usize) -> Trajectory {
        let pts: Vec<Vec2> = (0..h).map(|i| a + (b - a) * (i as f64 / (h - 1) as f64)).collect();
        Trajectory::from_positions(&pts, 0.04).unwrap()
    }

    #[test]
    fn empty_single_demo_is_straight() {
        let d = generate_demonstrations(TileKind::Empty, 1, 3, &cfg()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(adherence(TileKind::Empty, &d[0].traj).value(), 1.0);
        let t = &d[0].traj;
        let (a, b) = (t.first().q, t.last().q);
        for p in t.positions() {
            assert!(point_segment_distance(&p, &a, &b) < 1e-6);
        }
    }

    #[test]
    fn highways_demos_turn_counter_clockwise() {
        let d = generate_demonstrations(TileKind::Highways, 100, 11, &cfg()).unwrap();
        assert!(d.iter().all(|d| cumulative_angle(&d.traj) > 0.0));
    }

    #[test]
    fn drop_region_demos_pause() {
        let d = generate_demonstrations(TileKind::DropRegion, 10, 5, &cfg()).unwrap();
        let need = (0.25 * 64.0_f64).ceil() as usize;
        for demo in &d {
            let best = drop_region_centers()
                .iter()
                .map(|c| {
                    let mut run = 0;
                    let mut best = 0;
                    for p in demo.traj.positions() {
                        if (p - c).norm() <= DROP_REGION_RADIUS {
                            run += 1;
                            best = best.max(run);
                        } else {
                            run = 0;
                        }
                    }
                    best
                })
                .max()
                .unwrap();
            assert!(best >= need);
        }
    }

    #[test]
    fn every_generated_demo_adheres_and_is_clear() {
        for kind in TileKind::ALL {
            let world = World::single(kind);
            let demos = generate_demonstrations(kind, 40, 99, &cfg()).unwrap();
            for d in &demos {
                assert_eq!(adherence(kind, &d.traj).value(), 1.0, "{kind}");
                assert!(trajectory_is_clear(&world, &d.traj));
                assert_eq!(d.traj.horizon(), 64);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_demonstrations(TileKind::Conveyor, 5, 42, &cfg()).unwrap();
        let b = generate_demonstrations(TileKind::Conveyor, 5, 42, &cfg()).unwrap();
        assert_eq!(a, b);
        assert!(generate_demonstrations(TileKind::Conveyor, 0, 42, &cfg()).is_err());
    }

    #[test]
    fn adherence_examples() {
        let straight = line(Vec2::new(-0.8, -0.2), Vec2::new(0.7, 0.4), 64);
        assert_eq!(adherence(TileKind::Empty, &straight).value(), 1.0);

        let ccw: Vec<Vec2> = (0..64)
            .map(|i| {
                let a = 3.0 * i as f64 / 63.0;
                Vec2::new(0.7 * a.cos(), 0.7 * a.sin())
            })
            .collect();
        let ccw = Trajectory::from_positions(&ccw, 0.04).unwrap();
        assert_eq!(adherence(TileKind::Highways, &ccw).value(), 1.0);
        let cw: Vec<Vec2> = ccw.positions().map(|p| Vec2::new(p.x, -p.y)).collect();
        let cw = Trajectory::from_positions(&cw, 0.04).unwrap();
        assert_eq!(adherence(TileKind::Highways, &cw).value(), 0.0);
    }

    #[test]
    fn empty_adherence_counts_margin() {
        // Half the states bulge 0.3 off a 2-unit line: margin is 0.2.
        let pts: Vec<Vec2> = (0..64)
            .map(|i| {
                let x = -1.0 + 2.0 * i as f64 / 63.0;
                let y = if (16..48).contains(&i) { 0.3 } else { 0.0 };
                Vec2::new(x, y)
            })
            .collect();
        let t = Trajectory::from_positions(&pts, 0.04).unwrap();
        assert!((adherence(TileKind::Empty, &t).value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn conveyor_direction_matters() {
        let pts: Vec<Vec2> = (0..64)
            .map(|i| Vec2::new(0.8 - 1.6 * i as f64 / 63.0, 0.4))
            .collect();
        let left = Trajectory::from_positions(&pts, 0.04).unwrap();
        assert_eq!(adherence(TileKind::Conveyor, &left).value(), 1.0);
        let rev: Vec<Vec2> = pts.iter().rev().copied().collect();
        let right = Trajectory::from_positions(&rev, 0.04).unwrap();
        assert_eq!(adherence(TileKind::Conveyor, &right).value(), 0.0);
        let bottom: Vec<Vec2> = rev.iter().map(|p| Vec2::new(p.x, -0.4)).collect();
        let bottom = Trajectory::from_positions(&bottom, 0.04).unwrap();
        assert_eq!(adherence(TileKind::Conveyor, &bottom).value(), 1.0);
    }

    #[test]
    fn adherence_mean_arithmetic() {
        let w = World::single(TileKind::Highways);
        let ccw = |sign: f64| {
            let pts: Vec<Vec2> = (0..64)
                .map(|i| {
                    let a = sign * 2.0 * i as f64 / 63.0;
                    Vec2::new(0.7 * a.cos(), 0.7 * a.sin())
                })
                .collect();
            Trajectory::from_positions(&pts, 0.04).unwrap()
        };
        assert_eq!(adherence_mean(&w, &[ccw(1.0), ccw(1.0)]), 1.0);
        assert!((adherence_mean(&w, &[ccw(1.0), ccw(1.0), ccw(-1.0)]) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_adherence_scale_invariant() {
        let pts: Vec<Vec2> = (0..64)
            .map(|i| {
                let x = -0.5 + i as f64 / 63.0;
                Vec2::new(x, 0.08 * (x * 9.0).sin())
            })
            .collect();
        let t = Trajectory::from_positions(&pts, 0.04).unwrap();
        let scaled: Vec<Vec2> = pts.iter().map(|p| p * 1.7).collect();
        let s = Trajectory::from_positions(&scaled, 0.04).unwrap();
        assert_eq!(adherence(TileKind::Empty, &t), adherence(TileKind::Empty, &s));
    }

    #[test]
    fn dataset_round_trip_and_checksum() {
        let ds = Dataset::generate(TileKind::Empty, 4, 1, &cfg()).unwrap();
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        assert_eq!(Dataset::read(buf.as_slice()).unwrap(), ds);
        let n = buf.len();
        buf[n - 40] ^= 0xff;
        assert!(Dataset::read(buf.as_slice()).is_err());
    }

    #[test]
    fn ports_cover_edges() {
        assert_eq!(edge_ports(TileKind::Empty).len(), 4);
        assert_eq!(edge_ports(TileKind::Highways).len(), 4);
        // Conveyor walls split the top and bottom edges.
        assert_eq!(edge_ports(TileKind::Conveyor).len(), 6);
    }
}
