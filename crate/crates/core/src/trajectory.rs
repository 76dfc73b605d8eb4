//! Fixed-horizon trajectories, kinematic metrics and inter-robot conflict detection.

use std::io::{BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{MmdError, Result};
use crate::geometry::{disks_overlap, RobotShape, Vec2};

/// Default horizon (states per trajectory).
pub const DEFAULT_HORIZON: usize = 64;
/// Default seconds per step; a 2-step constraint interval spans 0.08 s.
pub const DEFAULT_DT: f64 = 0.04;
/// Interpolated sub-times checked inside each step interval.
pub const DEFAULT_SUBSTEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: Vec2,
    pub qdot: Vec2,
}

impl State {
    pub fn new(q: Vec2, qdot: Vec2) -> Self {
        State { q, qdot }
    }

    pub fn at_rest(q: Vec2) -> Self {
        State { q, qdot: Vec2::zeros() }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.q.x, self.q.y, self.qdot.x, self.qdot.y]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        State::new(Vec2::new(a[0], a[1]), Vec2::new(a[2], a[3]))
    }

    pub fn translated(&self, offset: Vec2) -> Self {
        State::new(self.q + offset, self.qdot)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    states: Vec<State>,
    dt: f64,
}

impl Trajectory {
    pub fn new(states: Vec<State>, dt: f64) -> Result<Self> {
        if states.len() < 2 {
            return Err(MmdError::InvalidInput(format!(
                "trajectory needs at least 2 states, got {}",
                states.len()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(MmdError::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        if let Some(i) = states.iter().position(|s| !s.is_finite()) {
            return Err(MmdError::NonFinite(format!("state {i}")));
        }
        Ok(Trajectory { states, dt })
    }

    /// Builds states from positions; velocities are central differences in the
    /// interior and one-sided at the ends.
    pub fn from_positions(positions: &[Vec2], dt: f64) -> Result<Self> {
        let h = positions.len();
        if h < 2 {
            return Err(MmdError::InvalidInput("trajectory needs at least 2 states".into()));
        }
        let states = (0..h)
            .map(|t| {
                let v = if t == 0 {
                    (positions[1] - positions[0]) / dt
                } else if t == h - 1 {
                    (positions[h - 1] - positions[h - 2]) / dt
                } else {
                    (positions[t + 1] - positions[t - 1]) / (2.0 * dt)
                };
                State::new(positions[t], v)
            })
            .collect();
        Trajectory::new(states, dt)
    }

    /// Constant-position trajectory.
    pub fn stationary(q: Vec2, horizon: usize, dt: f64) -> Result<Self> {
        Trajectory::new(vec![State::at_rest(q); horizon], dt)
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [State] {
        &mut self.states
    }

    pub fn into_states(self) -> Vec<State> {
        self.states
    }

    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn duration(&self) -> f64 {
        (self.horizon() - 1) as f64 * self.dt
    }

    pub fn first(&self) -> &State {
        &self.states[0]
    }

    pub fn last(&self) -> &State {
        &self.states[self.states.len() - 1]
    }

    pub fn positions(&self) -> impl Iterator<Item = Vec2> + '_ {
        self.states.iter().map(|s| s.q)
    }

    pub fn translated(&self, offset: Vec2) -> Trajectory {
        Trajectory {
            states: self.states.iter().map(|s| s.translated(offset)).collect(),
            dt: self.dt,
        }
    }

    /// Position at fractional step index `s` in `[0, H-1]`.
    pub fn position_at_step(&self, s: f64) -> Vec2 {
        let last = self.horizon() - 1;
        if s <= 0.0 {
            return self.states[0].q;
        }
        if s >= last as f64 {
            return self.states[last].q;
        }
        let i = s.floor() as usize;
        let f = s - i as f64;
        self.states[i].q * (1.0 - f) + self.states[i + 1].q * f
    }

    /// Flattens to `[x, y, vx, vy]` per state.
    pub fn to_flat(&self) -> Vec<f64> {
        self.states.iter().flat_map(|s| s.to_array()).collect()
    }

    pub fn from_flat(flat: &[f64], dt: f64) -> Result<Self> {
        if !flat.len().is_multiple_of(4) {
            return Err(MmdError::InvalidInput("flat trajectory length must be a multiple of 4".into()));
        }
        let states = flat
            .chunks_exact(4)
            .map(|c| State::from_array([c[0], c[1], c[2], c[3]]))
            .collect();
        Trajectory::new(states, dt)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# H={} dt={}", self.horizon(), self.dt)?;
        writeln!(w, "# t x y vx vy")?;
        for (i, s) in self.states.iter().enumerate() {
            writeln!(
                w,
                "{} {} {} {} {}",
                i as f64 * self.dt,
                s.q.x,
                s.q.y,
                s.qdot.x,
                s.qdot.y
            )?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut dt = None;
        let mut states = Vec::new();
        let mut times = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for tok in rest.split_whitespace() {
                    if let Some(v) = tok.strip_prefix("dt=") {
                        dt = Some(v.parse::<f64>().map_err(|e| MmdError::Format(format!("dt: {e}")))?);
                    }
                }
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| MmdError::Format(format!("trajectory record `{line}`: {e}")))?;
            if vals.len() != 5 {
                return Err(MmdError::Format(format!("expected 5 fields, got {} in `{line}`", vals.len())));
            }
            times.push(vals[0]);
            states.push(State::from_array([vals[1], vals[2], vals[3], vals[4]]));
        }
        let dt = match dt {
            Some(dt) => dt,
            None if times.len() >= 2 => times[1] - times[0],
            None => return Err(MmdError::Format("cannot determine dt".into())),
        };
        Trajectory::new(states, dt)
    }
}

/// Writes a batch of trajectories sharing `H` and `dt` as little-endian f64 records.
pub fn write_batch<W: Write>(mut w: W, trajs: &[Trajectory]) -> Result<()> {
    let (h, dt) = common_shape(trajs)?;
    w.write_all(b"MMDT")?;
    w.write_u32::<LittleEndian>(1)?;
    w.write_u32::<LittleEndian>(trajs.len() as u32)?;
    w.write_u32::<LittleEndian>(h as u32)?;
    w.write_f64::<LittleEndian>(dt)?;
    for t in trajs {
        for v in t.to_flat() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_batch<R: Read>(mut r: R) -> Result<Vec<Trajectory>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"MMDT" {
        return Err(MmdError::Format("not a trajectory batch file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != 1 {
        return Err(MmdError::Format(format!("unsupported batch version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let h = r.read_u32::<LittleEndian>()? as usize;
    let dt = r.read_f64::<LittleEndian>()?;
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![0.0; h * 4];
    for _ in 0..count {
        r.read_f64_into::<LittleEndian>(&mut buf)?;
        out.push(Trajectory::from_flat(&buf, dt)?);
    }
    Ok(out)
}

/// Shared `(H, dt)` of a non-empty set of trajectories.
pub fn common_shape(trajs: &[Trajectory]) -> Result<(usize, f64)> {
    let first = trajs
        .first()
        .ok_or_else(|| MmdError::InvalidInput("empty trajectory set".into()))?;
    let (h, dt) = (first.horizon(), first.dt());
    for (i, t) in trajs.iter().enumerate() {
        if t.horizon() != h || t.dt() != dt {
            return Err(MmdError::HorizonMismatch(format!(
                "trajectory {i} has H={} dt={}, expected H={h} dt={dt}",
                t.horizon(),
                t.dt()
            )));
        }
    }
    Ok((h, dt))
}

pub fn interpolate(traj: &Trajectory, t: f64) -> Result<State> {
    let end = traj.duration();
    if !(t >= 0.0 && t <= end) {
        return Err(MmdError::TimeOutOfRange { t, end });
    }
    let s = t / traj.dt;
    let i = (s.floor() as usize).min(traj.horizon() - 1);
    let f = s - i as f64;
    if i == traj.horizon() - 1 || f == 0.0 {
        return Ok(traj.states[i]);
    }
    let a = &traj.states[i];
    let b = &traj.states[i + 1];
    Ok(State::new(a.q * (1.0 - f) + b.q * f, a.qdot * (1.0 - f) + b.qdot * f))
}

/// Mean magnitude of the finite-difference acceleration, length units / s^2.
pub fn mean_abs_acceleration(traj: &Trajectory) -> Result<f64> {
    let h = traj.horizon();
    if h < 3 {
        return Err(MmdError::InvalidInput(format!("acceleration needs H >= 3, got {h}")));
    }
    let dt2 = traj.dt * traj.dt;
    let s = &traj.states;
    let total: f64 = (1..h - 1)
        .map(|t| (s[t + 1].q - s[t].q * 2.0 + s[t - 1].q).norm() / dt2)
        .sum();
    Ok(total / (h - 2) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub robot_i: usize,
    pub robot_j: usize,
    pub t_step: usize,
    pub point: Vec2,
}

fn shapes_overlap(shape: &RobotShape, a: &Vec2, b: &Vec2) -> bool {
    shape.spheres.iter().any(|(oa, ra)| {
        shape
            .spheres
            .iter()
            .any(|(ob, rb)| disks_overlap(&(a + oa), *ra, &(b + ob), *rb))
    })
}

/// Earliest overlapping sub-time within step `t` for one robot pair, as the
/// midpoint of the two centers. Step `t > 0` covers the sub-times
/// `t - 1 + s / substeps` for `s = 1..=substeps`; step 0 is the start time only.
fn pair_conflict_at_step(a: &Trajectory, b: &Trajectory, shape: &RobotShape, t: usize, substeps: usize) -> Option<Vec2> {
    if t == 0 {
        let (pa, pb) = (a.states[0].q, b.states[0].q);
        return shapes_overlap(shape, &pa, &pb).then(|| (pa + pb) * 0.5);
    }
    (1..=substeps).find_map(|s| {
        let step = (t - 1) as f64 + s as f64 / substeps as f64;
        let (pa, pb) = if s == substeps {
            (a.states[t].q, b.states[t].q)
        } else {
            (a.position_at_step(step), b.position_at_step(step))
        };
        shapes_overlap(shape, &pa, &pb).then(|| (pa + pb) * 0.5)
    })
}

/// All pairwise conflicts, one per (pair, step), sorted by step then pair.
pub fn find_conflicts(trajs: &[Trajectory], shape: &RobotShape, substeps: usize) -> Result<Vec<Conflict>> {
    if substeps == 0 {
        return Err(MmdError::InvalidInput("substeps must be at least 1".into()));
    }
    if trajs.is_empty() {
        return Ok(Vec::new());
    }
    let (h, _) = common_shape(trajs)?;
    let mut out = Vec::new();
    for t in 0..h {
        for i in 0..trajs.len() {
            for j in i + 1..trajs.len() {
                if let Some(point) = pair_conflict_at_step(&trajs[i], &trajs[j], shape, t, substeps) {
                    out.push(Conflict {
                        robot_i: i,
                        robot_j: j,
                        t_step: t,
                        point,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// First conflict in `(t, i, j)` order, without enumerating the rest.
pub fn first_conflict(trajs: &[Trajectory], shape: &RobotShape, substeps: usize) -> Result<Option<Conflict>> {
    if trajs.is_empty() {
        return Ok(None);
    }
    let (h, _) = common_shape(trajs)?;
    for t in 0..h {
        for i in 0..trajs.len() {
            for j in i + 1..trajs.len() {
                if let Some(point) = pair_conflict_at_step(&trajs[i], &trajs[j], shape, t, substeps) {
                    return Ok(Some(Conflict {
                        robot_i: i,
                        robot_j: j,
                        t_step: t,
                        point,
                    }));
                }
            }
        }
    }
    Ok(None)
}

pub fn count_conflicts(trajs: &[Trajectory], shape: &RobotShape) -> Result<usize> {
    Ok(find_conflicts(trajs, shape, DEFAULT_SUBSTEPS)?.len())
}

/// Conflicts of one trajectory against a set of others (count of colliding steps summed over others).
pub fn conflicts_against(traj: &Trajectory, others: &[&Trajectory], shape: &RobotShape, substeps: usize) -> usize {
    others
        .iter()
        .map(|o| {
            (0..traj.horizon())
                .filter(|&t| pair_conflict_at_step(traj, o, shape, t, substeps).is_some())
                .count()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(from: Vec2, to: Vec2, h: usize, dt: f64) -> Trajectory {
        let pts: Vec<Vec2> = (0..h).map(|i| from + (to - from) * (i as f64 / (h - 1) as f64)).collect();
        Trajectory::from_positions(&pts, dt).unwrap()
    }

    #[test]
    fn interpolate_examples() {
        let t = line(Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), 2, 0.5);
        assert_eq!(interpolate(&t, 0.0).unwrap(), t.states()[0]);
        assert_eq!(interpolate(&t, 0.5).unwrap(), t.states()[1]);
        let mid = interpolate(&t, 0.25).unwrap();
        assert!((mid.q - Vec2::new(0.5, 0.0)).norm() < 1e-15);
        assert!(interpolate(&t, 0.6).is_err());
        assert!(interpolate(&t, -0.1).is_err());
    }

    #[test]
    fn acceleration_examples() {
        let t = line(Vec2::new(-1.0, 0.3), Vec2::new(1.0, -0.2), 64, 0.04);
        assert!(mean_abs_acceleration(&t).unwrap() < 1e-9);
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0)];
        let t = Trajectory::from_positions(&pts, 1.0).unwrap();
        assert_eq!(mean_abs_acceleration(&t).unwrap(), 1.0);
        let two = line(Vec2::zeros(), Vec2::new(1.0, 0.0), 2, 1.0);
        assert!(mean_abs_acceleration(&two).is_err());
    }

    #[test]
    fn conflict_examples() {
        let shape = RobotShape::default();
        let a = Trajectory::stationary(Vec2::new(0.0, 0.0), 64, 0.04).unwrap();
        let b = Trajectory::stationary(Vec2::new(1.0, 0.0), 64, 0.04).unwrap();
        assert!(find_conflicts(&[a.clone(), b], &shape, 4).unwrap().is_empty());

        let p = Vec2::new(0.2, -0.3);
        let s = Trajectory::stationary(p, 64, 0.04).unwrap();
        let c = find_conflicts(&[s.clone(), s.clone()], &shape, 4).unwrap();
        assert_eq!(c.len(), 64);
        assert!(c.iter().all(|c| c.point == p));
        assert_eq!(count_conflicts(&[s.clone(), s.clone(), s], &shape).unwrap(), 3 * 64);
    }

    #[test]
    fn head_on_swap_conflicts() {
        let shape = RobotShape::default();
        let a = line(Vec2::new(-0.8, 0.0), Vec2::new(0.8, 0.0), 64, 0.04);
        let b = line(Vec2::new(0.8, 0.0), Vec2::new(-0.8, 0.0), 64, 0.04);
        assert!(count_conflicts(&[a, b], &shape).unwrap() >= 1);
    }

    #[test]
    fn mismatched_horizons_rejected() {
        let a = Trajectory::stationary(Vec2::zeros(), 10, 0.04).unwrap();
        let b = Trajectory::stationary(Vec2::zeros(), 11, 0.04).unwrap();
        assert!(matches!(
            find_conflicts(&[a, b], &RobotShape::default(), 4),
            Err(MmdError::HorizonMismatch(_))
        ));
    }

    #[test]
    fn text_and_binary_round_trip() {
        let t = line(Vec2::new(-0.5, 0.25), Vec2::new(0.75, 0.5), 16, 0.04);
        let mut buf = Vec::new();
        t.write_text(&mut buf).unwrap();
        let back = Trajectory::read_text(buf.as_slice()).unwrap();
        assert_eq!(back.horizon(), 16);
        for (a, b) in back.states().iter().zip(t.states()) {
            assert_eq!(a, b);
        }
        let mut bin = Vec::new();
        write_batch(&mut bin, &[t.clone(), t.clone()]).unwrap();
        let batch = read_batch(bin.as_slice()).unwrap();
        assert_eq!(batch, vec![t.clone(), t]);
    }

    fn random_set() -> impl Strategy<Value = Vec<Trajectory>> {
        (2usize..5, 3usize..12).prop_flat_map(|(n, h)| {
            prop::collection::vec(prop::collection::vec((-0.3..0.3f64, -0.3..0.3f64), h), n).prop_map(move |sets| {
                sets.into_iter()
                    .map(|pts| {
                        let pts: Vec<Vec2> = pts.into_iter().map(|(x, y)| Vec2::new(x, y)).collect();
                        Trajectory::from_positions(&pts, 0.04).unwrap()
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn more_substeps_never_fewer_conflicts(set in random_set(), s in 2usize..8) {
            let shape = RobotShape::default();
            let coarse = find_conflicts(&set, &shape, 1).unwrap();
            let fine = find_conflicts(&set, &shape, s).unwrap();
            for c in &coarse {
                prop_assert!(fine.iter().any(|f| f.t_step == c.t_step && f.robot_i == c.robot_i && f.robot_j == c.robot_j));
            }
        }

        #[test]
        fn relabeling_permutes_conflicts(set in random_set()) {
            let shape = RobotShape::default();
            let mut rev = set.clone();
            rev.reverse();
            let n = set.len();
            let a = find_conflicts(&set, &shape, 4).unwrap();
            let b = find_conflicts(&rev, &shape, 4).unwrap();
            prop_assert_eq!(a.len(), b.len());
            let mut mapped: Vec<(usize, usize, usize)> = b
                .iter()
                .map(|c| {
                    let (i, j) = (n - 1 - c.robot_j, n - 1 - c.robot_i);
                    (c.t_step, i, j)
                })
                .collect();
            mapped.sort();
            let orig: Vec<(usize, usize, usize)> = a.iter().map(|c| (c.t_step, c.robot_i, c.robot_j)).collect();
            prop_assert_eq!(orig, mapped);
        }
    }
}
