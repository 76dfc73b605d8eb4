//! Planar obstacle geometry, tiled worlds, and disk-robot collision predicates.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{MmdError, Result};

pub type Vec2 = Vector2<f64>;

/// Side length of one local map, in world units.
pub const DEFAULT_TILE_SIZE: f64 = 2.0;
/// Disk robot radius (diameter 0.1).
pub const DEFAULT_ROBOT_RADIUS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TileKind {
    Empty,
    Highways,
    Conveyor,
    DropRegion,
}

impl TileKind {
    pub const ALL: [TileKind; 4] = [
        TileKind::Empty,
        TileKind::Highways,
        TileKind::Conveyor,
        TileKind::DropRegion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TileKind::Empty => "empty",
            TileKind::Highways => "highways",
            TileKind::Conveyor => "conveyor",
            TileKind::DropRegion => "drop-region",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TileKind::Empty => 0,
            TileKind::Highways => 1,
            TileKind::Conveyor => 2,
            TileKind::DropRegion => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        TileKind::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| MmdError::Format(format!("unknown tile kind code {code}")))
    }
}

impl std::str::FromStr for TileKind {
    type Err = MmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "empty" => Ok(TileKind::Empty),
            "highways" => Ok(TileKind::Highways),
            "conveyor" => Ok(TileKind::Conveyor),
            "drop-region" | "dropregion" => Ok(TileKind::DropRegion),
            other => Err(MmdError::InvalidInput(format!("unknown map kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for TileKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec2,
    pub max: Vec2,
}

impl Aabb {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Aabb { min, max }
    }

    pub fn centered(center: Vec2, half: f64) -> Self {
        Aabb {
            min: center - Vec2::new(half, half),
            max: center + Vec2::new(half, half),
        }
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn contains_aabb(&self, other: &Aabb) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }

    pub fn center(&self) -> Vec2 {
        (self.min + self.max) * 0.5
    }

    pub fn size(&self) -> Vec2 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    Rect { min: Vec2, max: Vec2 },
    Circle { center: Vec2, radius: f64 },
}

impl Shape {
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Shape::Rect {
            min: Vec2::new(x0.min(x1), y0.min(y1)),
            max: Vec2::new(x0.max(x1), y0.max(y1)),
        }
    }

    pub fn circle(cx: f64, cy: f64, radius: f64) -> Self {
        Shape::Circle {
            center: Vec2::new(cx, cy),
            radius,
        }
    }

    pub fn bounding_box(&self) -> Aabb {
        match *self {
            Shape::Rect { min, max } => Aabb::new(min, max),
            Shape::Circle { center, radius } => Aabb::centered(center, radius),
        }
    }

    pub fn translated(&self, offset: Vec2) -> Shape {
        match *self {
            Shape::Rect { min, max } => Shape::Rect {
                min: min + offset,
                max: max + offset,
            },
            Shape::Circle { center, radius } => Shape::Circle {
                center: center + offset,
                radius,
            },
        }
    }

    fn scaled(&self, s: f64) -> Shape {
        match *self {
            Shape::Rect { min, max } => Shape::Rect {
                min: min * s,
                max: max * s,
            },
            Shape::Circle { center, radius } => Shape::Circle {
                center: center * s,
                radius: radius * s,
            },
        }
    }

    /// Exact signed distance and its gradient (unit length except at degenerate points).
    pub fn sdf_grad(&self, p: &Vec2) -> (f64, Vec2) {
        match *self {
            Shape::Circle { center, radius } => {
                let d = p - center;
                let n = d.norm();
                let g = if n > 0.0 { d / n } else { Vec2::zeros() };
                (n - radius, g)
            }
            Shape::Rect { min, max } => {
                let c = (min + max) * 0.5;
                let h = (max - min) * 0.5;
                let rel = p - c;
                let q = Vec2::new(rel.x.abs() - h.x, rel.y.abs() - h.y);
                let sx = if rel.x >= 0.0 { 1.0 } else { -1.0 };
                let sy = if rel.y >= 0.0 { 1.0 } else { -1.0 };
                if q.x > 0.0 || q.y > 0.0 {
                    let o = Vec2::new(q.x.max(0.0), q.y.max(0.0));
                    let n = o.norm();
                    (n, Vec2::new(sx * o.x / n, sy * o.y / n))
                } else if q.x > q.y {
                    (q.x, Vec2::new(sx, 0.0))
                } else {
                    (q.y, Vec2::new(0.0, sy))
                }
            }
        }
    }

    pub fn sdf(&self, p: &Vec2) -> f64 {
        self.sdf_grad(p).0
    }
}

/// Disk robot. The sphere list holds (offset, radius) pairs relative to the robot center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotShape {
    pub radius: f64,
    pub spheres: Vec<(Vec2, f64)>,
}

impl RobotShape {
    pub fn disk(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(MmdError::InvalidInput(format!("robot radius must be positive, got {radius}")));
        }
        Ok(RobotShape {
            radius,
            spheres: vec![(Vec2::zeros(), radius)],
        })
    }
}

impl Default for RobotShape {
    fn default() -> Self {
        RobotShape::disk(DEFAULT_ROBOT_RADIUS).expect("default radius is positive")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileCoord {
    pub col: usize,
    pub row: usize,
}

impl TileCoord {
    pub fn new(col: usize, row: usize) -> Self {
        TileCoord { col, row }
    }

    pub fn is_adjacent(&self, other: &TileCoord) -> bool {
        self.col.abs_diff(other.col) + self.row.abs_diff(other.row) == 1
    }
}

/// Fixed obstacle layout of one tile kind, in the tile-local frame of a
/// 2x2 tile centered at the origin.
///
/// Highways: one central block, leaving a 0.65-wide ring road.
/// Conveyor: top wall, central block and bottom wall spanning x in [-0.5, 0.5];
/// the two 0.4-wide corridors sit at y in [0.2, 0.6] and [-0.6, -0.2].
/// Drop-Region: four 0.3x0.3 chutes centered at (+-0.5, +-0.5).
pub fn tile_layout(kind: TileKind) -> Vec<Shape> {
    match kind {
        TileKind::Empty => Vec::new(),
        TileKind::Highways => vec![Shape::rect(-0.35, -0.35, 0.35, 0.35)],
        TileKind::Conveyor => vec![
            Shape::rect(-0.5, 0.6, 0.5, 1.0),
            Shape::rect(-0.5, -0.2, 0.5, 0.2),
            Shape::rect(-0.5, -1.0, 0.5, -0.6),
        ],
        TileKind::DropRegion => {
            let mut v = Vec::with_capacity(4);
            for &cy in &[-0.5, 0.5] {
                for &cx in &[-0.5, 0.5] {
                    v.push(Shape::rect(cx - 0.15, cy - 0.15, cx + 0.15, cy + 0.15));
                }
            }
            v
        }
    }
}

/// Conveyor corridor band limits (|y| range) in the 2x2 tile-local frame.
pub const CONVEYOR_CORRIDOR_Y: (f64, f64) = (0.2, 0.6);
/// Conveyor corridor mouths (|x|) in the 2x2 tile-local frame.
pub const CONVEYOR_MOUTH_X: f64 = 0.5;
/// Highways central block half-extent in the 2x2 tile-local frame.
pub const HIGHWAYS_BLOCK_HALF: f64 = 0.35;

/// Drop-off region centers: 0.15 off each of the 16 chute-edge midpoints, tile-local frame.
pub fn drop_region_centers() -> Vec<Vec2> {
    let mut out = Vec::with_capacity(16);
    for shape in tile_layout(TileKind::DropRegion) {
        if let Shape::Rect { min, max } = shape {
            let c = (min + max) * 0.5;
            let h = (max.x - min.x) * 0.5;
            let off = h + 0.15;
            out.push(c + Vec2::new(off, 0.0));
            out.push(c + Vec2::new(-off, 0.0));
            out.push(c + Vec2::new(0.0, off));
            out.push(c + Vec2::new(0.0, -off));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    /// `tiles[row][col]`, row 0 at the bottom (smallest y).
    tiles: Vec<Vec<TileKind>>,
    tile_size: f64,
    obstacles: Vec<Shape>,
    bounds: Aabb,
}

impl World {
    /// Builds a world, checking that tile size is positive and obstacles lie within bounds.
    pub fn new(tiles: Vec<Vec<TileKind>>, tile_size: f64, obstacles: Vec<Shape>, bounds: Aabb) -> Result<Self> {
        if !(tile_size > 0.0 && tile_size.is_finite()) {
            return Err(MmdError::InvalidInput(format!("tile_size must be positive, got {tile_size}")));
        }
        if tiles.is_empty() || tiles[0].is_empty() || tiles.iter().any(|r| r.len() != tiles[0].len()) {
            return Err(MmdError::InvalidInput("tile grid must be a non-empty rectangle".into()));
        }
        for o in &obstacles {
            if !bounds.contains_aabb(&o.bounding_box()) {
                return Err(MmdError::InvalidInput(format!("obstacle {o:?} lies outside world bounds")));
            }
        }
        Ok(World {
            tiles,
            tile_size,
            obstacles,
            bounds,
        })
    }

    /// Tiled world centered at the origin with obstacles derived from the tile layouts.
    pub fn from_tiles(tiles: Vec<Vec<TileKind>>, tile_size: f64) -> Result<Self> {
        if tiles.is_empty() || tiles[0].is_empty() {
            return Err(MmdError::InvalidInput("tile grid must be non-empty".into()));
        }
        let rows = tiles.len() as f64;
        let cols = tiles[0].len() as f64;
        let half = Vec2::new(cols * tile_size * 0.5, rows * tile_size * 0.5);
        let bounds = Aabb::new(-half, half);
        let scale = tile_size / DEFAULT_TILE_SIZE;
        let mut obstacles = Vec::new();
        for (r, row) in tiles.iter().enumerate() {
            for (c, kind) in row.iter().enumerate() {
                let center = bounds.min + Vec2::new((c as f64 + 0.5) * tile_size, (r as f64 + 0.5) * tile_size);
                obstacles.extend(tile_layout(*kind).iter().map(|s| s.scaled(scale).translated(center)));
            }
        }
        World::new(tiles, tile_size, obstacles, bounds)
    }

    pub fn single(kind: TileKind) -> Self {
        World::from_tiles(vec![vec![kind]], DEFAULT_TILE_SIZE).expect("single tile world is valid")
    }

    pub fn tiles(&self) -> &[Vec<TileKind>] {
        &self.tiles
    }

    pub fn tile_size(&self) -> f64 {
        self.tile_size
    }

    pub fn obstacles(&self) -> &[Shape] {
        &self.obstacles
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn n_rows(&self) -> usize {
        self.tiles.len()
    }

    pub fn n_cols(&self) -> usize {
        self.tiles[0].len()
    }

    pub fn tile_kind(&self, t: TileCoord) -> Option<TileKind> {
        self.tiles.get(t.row).and_then(|r| r.get(t.col)).copied()
    }

    pub fn tile_center(&self, t: TileCoord) -> Vec2 {
        self.bounds.min
            + Vec2::new(
                (t.col as f64 + 0.5) * self.tile_size,
                (t.row as f64 + 0.5) * self.tile_size,
            )
    }

    pub fn tile_bounds(&self, t: TileCoord) -> Aabb {
        Aabb::centered(self.tile_center(t), self.tile_size * 0.5)
    }

    /// Tile containing `p`; points on a shared edge go to the higher index.
    pub fn tile_at(&self, p: &Vec2) -> Option<TileCoord> {
        if !self.bounds.contains(p) {
            return None;
        }
        let rel = (p - self.bounds.min) / self.tile_size;
        let col = (rel.x.floor() as usize).min(self.n_cols() - 1);
        let row = (rel.y.floor() as usize).min(self.n_rows() - 1);
        Some(TileCoord { col, row })
    }

    pub fn sdf_grad(&self, p: &Vec2) -> (f64, Vec2) {
        let mut best = (f64::INFINITY, Vec2::zeros());
        for o in &self.obstacles {
            let (d, g) = o.sdf_grad(p);
            if d < best.0 {
                best = (d, g);
            }
        }
        best
    }

    pub fn to_file(&self) -> WorldFile {
        WorldFile {
            tile_size: self.tile_size,
            tiles: self.tiles.clone(),
            obstacles: self.obstacles.clone(),
            bounds: self.bounds,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: WorldFile = serde_json::from_str(text).map_err(|e| MmdError::Format(format!("world: {e}")))?;
        f.into_world()
    }
}

/// On-disk world description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub tile_size: f64,
    pub tiles: Vec<Vec<TileKind>>,
    pub obstacles: Vec<Shape>,
    pub bounds: Aabb,
}

impl WorldFile {
    pub fn into_world(self) -> Result<World> {
        World::new(self.tiles, self.tile_size, self.obstacles, self.bounds)
    }
}

/// Signed distance to the nearest obstacle; `+inf` when the world has none.
pub fn sdf(world: &World, p: &Vec2) -> f64 {
    world.sdf_grad(p).0
}

pub fn disk_in_collision(world: &World, center: &Vec2, radius: f64) -> bool {
    sdf(world, center) < radius
}

pub fn disks_overlap(c1: &Vec2, r1: f64, c2: &Vec2, r2: f64) -> bool {
    (c1 - c2).norm() < r1 + r2
}

/// Free sub-intervals of the segment `a -> b` for a disk of `radius`, as
/// parameter ranges in [0, 1]. Blocked where the disk centered on the segment
/// would touch an obstacle.
pub fn free_intervals(world: &World, a: &Vec2, b: &Vec2, radius: f64) -> Vec<(f64, f64)> {
    let len = (b - a).norm();
    if len == 0.0 {
        return Vec::new();
    }
    let dir = (b - a) / len;
    let mut blocked: Vec<(f64, f64)> = Vec::new();
    for o in world.obstacles() {
        let span = match *o {
            Shape::Circle { center, radius: cr } => {
                let rr = cr + radius;
                let rel = center - a;
                let along = rel.dot(&dir);
                let perp2 = rel.norm_squared() - along * along;
                if perp2 >= rr * rr {
                    None
                } else {
                    let half = (rr * rr - perp2).sqrt();
                    Some((along - half, along + half))
                }
            }
            Shape::Rect { min, max } => {
                // Minkowski sum of rectangle and disk, intersected with the line.
                segment_rounded_rect(a, &dir, len, &min, &max, radius)
            }
        };
        if let Some((lo, hi)) = span {
            let lo = (lo / len).max(0.0);
            let hi = (hi / len).min(1.0);
            if lo < hi {
                blocked.push((lo, hi));
            }
        }
    }
    blocked.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut free = Vec::new();
    let mut cursor = 0.0;
    for (lo, hi) in blocked {
        if lo > cursor {
            free.push((cursor, lo));
        }
        cursor = f64::max(cursor, hi);
    }
    if cursor < 1.0 {
        free.push((cursor, 1.0));
    }
    free
}

fn segment_rounded_rect(a: &Vec2, dir: &Vec2, len: f64, min: &Vec2, max: &Vec2, radius: f64) -> Option<(f64, f64)> {
    // The rectangle sdf is convex along a line, so the blocked set is one interval.
    let shape = Shape::Rect { min: *min, max: *max };
    let f = |s: f64| shape.sdf(&(a + dir * s)) - radius;
    let (mut lo, mut hi) = (0.0, len);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let s_min = 0.5 * (lo + hi);
    if f(s_min) >= 0.0 {
        return None;
    }
    let root = |mut inside: f64, mut outside: f64| {
        for _ in 0..100 {
            let mid = 0.5 * (inside + outside);
            if f(mid) < 0.0 {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        0.5 * (inside + outside)
    };
    let start = if f(0.0) < 0.0 { 0.0 } else { root(s_min, 0.0) };
    let end = if f(len) < 0.0 { len } else { root(s_min, len) };
    Some((start, end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sdf_examples() {
        let empty = World::single(TileKind::Empty);
        assert_eq!(sdf(&empty, &Vec2::new(0.3, 0.1)), f64::INFINITY);

        let w = World::new(
            vec![vec![TileKind::Empty]],
            2.0,
            vec![Shape::circle(0.0, 0.0, 0.5)],
            Aabb::centered(Vec2::zeros(), 1.0),
        )
        .unwrap();
        assert_eq!(sdf(&w, &Vec2::zeros()), -0.5);

        let r = World::new(
            vec![vec![TileKind::Empty]],
            4.0,
            vec![Shape::rect(-1.0, -1.0, 1.0, 1.0)],
            Aabb::centered(Vec2::zeros(), 2.0),
        )
        .unwrap();
        assert!((sdf(&r, &Vec2::new(2.0, 0.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rect_sdf_matches_dense_boundary_sampling() {
        let shape = Shape::rect(-1.0, -1.0, 1.0, 1.0);
        let boundary: Vec<Vec2> = (0..4000)
            .map(|i| {
                let s = i as f64 / 1000.0;
                match i / 1000 {
                    0 => Vec2::new(-1.0 + 2.0 * s, -1.0),
                    1 => Vec2::new(1.0, -1.0 + 2.0 * (s - 1.0)),
                    2 => Vec2::new(1.0 - 2.0 * (s - 2.0), 1.0),
                    _ => Vec2::new(-1.0, 1.0 - 2.0 * (s - 3.0)),
                }
            })
            .collect();
        for p in [Vec2::new(2.0, 0.0), Vec2::new(1.5, 1.5), Vec2::new(-3.0, 0.2), Vec2::new(0.2, 0.5)] {
            let dense = boundary.iter().map(|b| (p - b).norm()).fold(f64::INFINITY, f64::min);
            let inside = p.x.abs() < 1.0 && p.y.abs() < 1.0;
            let expected = if inside { -dense } else { dense };
            assert!((shape.sdf(&p) - expected).abs() < 3e-3, "{p:?}");
        }
    }

    #[test]
    fn disk_collision_is_strict() {
        let r = 0.25;
        assert!(!disk_in_collision(&World::single(TileKind::Empty), &Vec2::zeros(), r));
        let w = World::new(
            vec![vec![TileKind::Empty]],
            2.0,
            vec![Shape::circle(0.0, 0.0, 0.5)],
            Aabb::centered(Vec2::zeros(), 1.0),
        )
        .unwrap();
        assert!(disk_in_collision(&w, &Vec2::new(0.25, 0.0), r));
        // Exactly `r` from the boundary (binary-exact values).
        let p = Vec2::new(0.75, 0.0);
        assert_eq!(sdf(&w, &p), r);
        assert!(!disk_in_collision(&w, &p, r));
    }

    #[test]
    fn disks_overlap_examples() {
        let o = Vec2::zeros();
        assert!(disks_overlap(&o, 0.05, &o, 0.05));
        assert!(!disks_overlap(&o, 0.25, &Vec2::new(0.5, 0.0), 0.25));
        assert!(disks_overlap(&o, 0.05, &Vec2::new(0.09, 0.0), 0.05));
    }

    #[test]
    fn layouts_are_deterministic_and_leave_wide_corridors() {
        for kind in TileKind::ALL {
            let a = World::single(kind);
            let b = World::single(kind);
            assert_eq!(a, b);
        }
        // Narrowest Conveyor passage is the 0.4 corridor, Drop-Region gaps are 0.35.
        let min_gap = 3.0 * 2.0 * DEFAULT_ROBOT_RADIUS;
        assert!(CONVEYOR_CORRIDOR_Y.1 - CONVEYOR_CORRIDOR_Y.0 >= min_gap);
        assert!(1.0 - 0.65 >= min_gap - 1e-12);
        assert!(1.0 - HIGHWAYS_BLOCK_HALF >= min_gap);
        assert_eq!(drop_region_centers().len(), 16);
    }

    #[test]
    fn world_json_round_trip() {
        let w = World::from_tiles(
            vec![vec![TileKind::Highways, TileKind::Conveyor], vec![TileKind::DropRegion, TileKind::Empty]],
            2.0,
        )
        .unwrap();
        let back = World::from_json(&w.to_json()).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn out_of_bounds_obstacle_rejected() {
        let err = World::new(
            vec![vec![TileKind::Empty]],
            2.0,
            vec![Shape::circle(0.95, 0.0, 0.2)],
            Aabb::centered(Vec2::zeros(), 1.0),
        );
        assert!(err.is_err());
    }

    #[test]
    fn free_intervals_on_conveyor_top_edge() {
        let w = World::single(TileKind::Conveyor);
        let free = free_intervals(&w, &Vec2::new(-1.0, 1.0), &Vec2::new(1.0, 1.0), 0.05);
        assert_eq!(free.len(), 2);
        // Wall spans [-0.5, 0.5]; inflated by the radius it blocks [-0.55, 0.55].
        assert!((free[0].1 * 2.0 - 1.0 + 0.55).abs() < 2e-3);
        assert!((free[1].0 * 2.0 - 1.0 - 0.55).abs() < 2e-3);
    }

    fn brute_force_collision(world: &World, c: &Vec2, r: f64) -> bool {
        // 10^4 samples over the closed disk minus its boundary ring.
        let n_ring = 100;
        let n_ang = 100;
        for i in 0..n_ring {
            let rad = r * (i as f64) / n_ring as f64;
            for j in 0..n_ang {
                let a = std::f64::consts::TAU * j as f64 / n_ang as f64;
                let p = c + Vec2::new(a.cos(), a.sin()) * rad;
                if sdf(world, &p) < 0.0 {
                    return true;
                }
            }
        }
        false
    }

    proptest! {
        #[test]
        fn sdf_is_one_lipschitz(px in -1.0..1.0f64, py in -1.0..1.0f64, qx in -1.0..1.0f64, qy in -1.0..1.0f64, k in 0usize..4) {
            let w = World::single(TileKind::ALL[k]);
            let p = Vec2::new(px, py);
            let q = Vec2::new(qx, qy);
            let (a, b) = (sdf(&w, &p), sdf(&w, &q));
            if a.is_finite() {
                prop_assert!((a - b).abs() <= (p - q).norm() + 1e-12);
            }
        }

        #[test]
        fn disks_overlap_symmetric(ax in -1.0..1.0f64, ay in -1.0..1.0f64, bx in -1.0..1.0f64, by in -1.0..1.0f64, r1 in 0.01..0.5f64, r2 in 0.01..0.5f64) {
            let a = Vec2::new(ax, ay);
            let b = Vec2::new(bx, by);
            prop_assert_eq!(disks_overlap(&a, r1, &b, r2), disks_overlap(&b, r2, &a, r1));
        }

        #[test]
        fn disk_collision_matches_sampling_oracle(cx in -1.0..1.0f64, cy in -1.0..1.0f64, k in 0usize..4) {
            let w = World::single(TileKind::ALL[k]);
            let c = Vec2::new(cx, cy);
            let r = DEFAULT_ROBOT_RADIUS;
            // Skip the thin shell where the finite sampler cannot resolve the boundary.
            let d = sdf(&w, &c);
            prop_assume!((d - r).abs() > 2e-3);
            prop_assert_eq!(disk_in_collision(&w, &c, r), brute_force_collision(&w, &c, r));
        }
    }
}
