//! Spatio-temporal sphere soft constraints.

use serde::{Deserialize, Serialize};

use crate::error::{MmdError, Result};
use crate::geometry::{RobotShape, Vec2};
use crate::trajectory::Trajectory;

/// Default constraint radius for conflict-derived constraints.
pub const DEFAULT_CONSTRAINT_RADIUS: f64 = 0.12;
/// Default half-width, in steps, of a conflict-derived constraint interval.
pub const DEFAULT_INTERVAL_STEPS: usize = 2;
/// Default padding multiplier on the constraint radius.
pub const DEFAULT_PADDING: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Strong,
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereConstraint {
    pub center: Vec2,
    pub radius: f64,
    pub t_lo: usize,
    pub t_hi: usize,
    pub strength: Strength,
    pub padding: f64,
}

impl SphereConstraint {
    pub fn new(center: Vec2, radius: f64, t_lo: usize, t_hi: usize, strength: Strength, padding: f64) -> Result<Self> {
        if !(radius > 0.0) || !center.iter().all(|v| v.is_finite()) {
            return Err(MmdError::InvalidInput(format!("constraint radius must be positive, got {radius}")));
        }
        if t_lo > t_hi {
            return Err(MmdError::InvalidInput(format!("empty constraint interval [{t_lo}, {t_hi}]")));
        }
        if !(padding >= 1.0) {
            return Err(MmdError::InvalidInput(format!("padding must be at least 1, got {padding}")));
        }
        Ok(SphereConstraint {
            center,
            radius,
            t_lo,
            t_hi,
            strength,
            padding,
        })
    }

    /// Constraint with default radius and padding over `t ± span`, clipped to `[0, horizon)`.
    pub fn around(center: Vec2, t: usize, span: usize, horizon: usize, strength: Strength) -> Result<Self> {
        if horizon == 0 || t >= horizon {
            return Err(MmdError::InvalidInput(format!("step {t} outside horizon {horizon}")));
        }
        SphereConstraint::new(
            center,
            DEFAULT_CONSTRAINT_RADIUS,
            t.saturating_sub(span),
            (t + span).min(horizon - 1),
            strength,
            DEFAULT_PADDING,
        )
    }

    pub fn translated(&self, offset: Vec2) -> Self {
        SphereConstraint {
            center: self.center + offset,
            ..self.clone()
        }
    }

    /// Same constraint with its interval shifted by `-shift` and clipped to `[0, horizon)`.
    /// Returns `None` when nothing of the interval remains.
    pub fn windowed(&self, shift: usize, horizon: usize) -> Option<Self> {
        if self.t_hi < shift || self.t_lo >= shift + horizon {
            return None;
        }
        Some(SphereConstraint {
            t_lo: self.t_lo.saturating_sub(shift),
            t_hi: (self.t_hi - shift).min(horizon - 1),
            ..self.clone()
        })
    }
}

fn hinge(c: &SphereConstraint, q: Vec2, sphere_offset: Vec2, sphere_radius: f64) -> (f64, Vec2) {
    let diff = q + sphere_offset - c.center;
    let dist = diff.norm();
    let violation = c.padding * c.radius - (dist - sphere_radius);
    if violation <= 0.0 {
        return (0.0, Vec2::zeros());
    }
    let grad = if dist > 0.0 { -diff / dist } else { Vec2::zeros() };
    (violation, grad)
}

/// Cost of positions `qs` against one constraint.
///
/// Each in-interval step contributes `max(padding * radius - d, 0)`, where `d`
/// is the distance from the constraint center to the robot sphere surface,
/// negative inside the sphere.
pub fn constraint_cost_positions(qs: &[Vec2], c: &SphereConstraint, shape: &RobotShape) -> f64 {
    let hi = c.t_hi.min(qs.len().saturating_sub(1));
    let mut total = 0.0;
    for q in qs.iter().take(hi + 1).skip(c.t_lo) {
        for (off, r) in &shape.spheres {
            total += hinge(c, *q, *off, *r).0;
        }
    }
    total
}

/// Adds `weight * d cost / d q_t` into `grad`.
pub fn accumulate_constraint_grad(qs: &[Vec2], c: &SphereConstraint, shape: &RobotShape, weight: f64, grad: &mut [Vec2]) {
    let hi = c.t_hi.min(qs.len().saturating_sub(1));
    for t in c.t_lo..=hi {
        if t >= qs.len() {
            break;
        }
        for (off, r) in &shape.spheres {
            grad[t] += weight * hinge(c, qs[t], *off, *r).1;
        }
    }
}

pub fn constraint_cost(traj: &Trajectory, c: &SphereConstraint, shape: &RobotShape) -> f64 {
    let qs: Vec<Vec2> = traj.positions().collect();
    constraint_cost_positions(&qs, c, shape)
}

/// Position gradient of [`constraint_cost`], one entry per state.
pub fn constraint_grad(traj: &Trajectory, c: &SphereConstraint, shape: &RobotShape) -> Vec<Vec2> {
    let qs: Vec<Vec2> = traj.positions().collect();
    let mut g = vec![Vec2::zeros(); qs.len()];
    accumulate_constraint_grad(&qs, c, shape, 1.0, &mut g);
    g
}

/// One single-step constraint per (sphere of `shape`, step of `other`).
pub fn constraints_from_trajectory(other: &Trajectory, shape: &RobotShape, strength: Strength) -> Vec<SphereConstraint> {
    let mut out = Vec::with_capacity(other.horizon() * shape.spheres.len());
    for (t, s) in other.states().iter().enumerate() {
        for (off, r) in &shape.spheres {
            out.push(SphereConstraint {
                center: s.q + off,
                radius: *r,
                t_lo: t,
                t_hi: t,
                strength,
                padding: DEFAULT_PADDING,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(y: f64) -> Trajectory {
        let pts: Vec<Vec2> = (0..10).map(|t| Vec2::new(-0.9 + 0.2 * t as f64, y)).collect();
        Trajectory::from_positions(&pts, 0.04).unwrap()
    }

    #[test]
    fn far_trajectory_has_zero_cost() {
        let c = SphereConstraint::around(Vec2::zeros(), 5, 2, 10, Strength::Strong).unwrap();
        let shape = RobotShape::default();
        assert_eq!(constraint_cost(&line(0.5), &c, &shape), 0.0);
        assert!(constraint_grad(&line(0.5), &c, &shape).iter().all(|g| g.norm() == 0.0));
    }

    #[test]
    fn centered_disk_contributes_padding_radius_plus_robot_radius() {
        let shape = RobotShape::default();
        let p = Vec2::new(0.3, 0.1);
        let c = SphereConstraint::new(p, 0.12, 4, 4, Strength::Strong, 1.0).unwrap();
        let mut pts: Vec<Vec2> = (0..8).map(|t| Vec2::new(-0.9 + 0.01 * t as f64, 0.9)).collect();
        pts[4] = p;
        let traj = Trajectory::from_positions(&pts, 0.04).unwrap();
        // Hand evaluation: d = |p - p| - 0.05 = -0.05, so 1.0 * 0.12 - (-0.05).
        assert!((constraint_cost(&traj, &c, &shape) - 0.17).abs() < 1e-12);
    }

    #[test]
    fn default_radius_and_interval() {
        let c = SphereConstraint::around(Vec2::zeros(), 10, DEFAULT_INTERVAL_STEPS, 64, Strength::Weak).unwrap();
        assert_eq!(c.radius, 0.12);
        assert_eq!((c.t_lo, c.t_hi), (8, 12));
        let edge = SphereConstraint::around(Vec2::zeros(), 63, 2, 64, Strength::Weak).unwrap();
        assert_eq!((edge.t_lo, edge.t_hi), (61, 63));
    }

    #[test]
    fn constraints_from_trajectory_counts() {
        let shape = RobotShape::default();
        let other = Trajectory::stationary(Vec2::new(0.2, -0.1), 64, 0.04).unwrap();
        let cs = constraints_from_trajectory(&other, &shape, Strength::Strong);
        assert_eq!(cs.len(), 64);
        assert!(cs.iter().all(|c| c.center == Vec2::new(0.2, -0.1)));
        assert!(cs.iter().enumerate().all(|(t, c)| c.t_lo == t && c.t_hi == t));
    }

    #[test]
    fn invalid_constraints_rejected() {
        assert!(SphereConstraint::new(Vec2::zeros(), 0.0, 0, 1, Strength::Weak, 1.2).is_err());
        assert!(SphereConstraint::new(Vec2::zeros(), 0.1, 3, 1, Strength::Weak, 1.2).is_err());
        assert!(SphereConstraint::new(Vec2::zeros(), 0.1, 0, 1, Strength::Weak, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn cost_nonnegative_and_local(
            ys in prop::collection::vec(-0.3f64..0.3, 12),
            cx in -0.3f64..0.3,
            t in 0usize..12,
        ) {
            let pts: Vec<Vec2> = ys.iter().enumerate().map(|(i, y)| Vec2::new(-0.3 + 0.05 * i as f64, *y)).collect();
            let traj = Trajectory::from_positions(&pts, 0.04).unwrap();
            let shape = RobotShape::default();
            let c = SphereConstraint::around(Vec2::new(cx, 0.0), t, 2, 12, Strength::Strong).unwrap();
            let cost = constraint_cost(&traj, &c, &shape);
            prop_assert!(cost >= 0.0);
            let g = constraint_grad(&traj, &c, &shape);
            for (s, gs) in g.iter().enumerate() {
                if s < c.t_lo || s > c.t_hi {
                    prop_assert_eq!(gs.norm(), 0.0);
                }
            }
            let clear = pts[c.t_lo..=c.t_hi].iter().all(|q| (q - c.center).norm() - 0.05 >= c.padding * c.radius);
            prop_assert_eq!(cost == 0.0, clear);
        }

        #[test]
        fn gradient_matches_finite_differences(
            ys in prop::collection::vec(-0.3f64..0.3, 8),
            cx in -0.2f64..0.2,
        ) {
            let pts: Vec<Vec2> = ys.iter().enumerate().map(|(i, y)| Vec2::new(-0.2 + 0.05 * i as f64, *y)).collect();
            let shape = RobotShape::default();
            let c = SphereConstraint::new(Vec2::new(cx, 0.0), 0.12, 0, 7, Strength::Strong, 1.2).unwrap();
            let mut g = vec![Vec2::zeros(); pts.len()];
            accumulate_constraint_grad(&pts, &c, &shape, 1.0, &mut g);
            let h = 1e-7;
            for t in 0..pts.len() {
                let margin = c.padding * c.radius - ((pts[t] - c.center).norm() - 0.05);
                if margin.abs() < 1e-4 {
                    continue;
                }
                for axis in 0..2 {
                    let mut p = pts.clone();
                    p[t][axis] += h;
                    let up = constraint_cost_positions(&p, &c, &shape);
                    p[t][axis] -= 2.0 * h;
                    let down = constraint_cost_positions(&p, &c, &shape);
                    let fd = (up - down) / (2.0 * h);
                    let err = (fd - g[t][axis]).abs() / fd.abs().max(g[t][axis].abs()).max(1e-3);
                    prop_assert!(err <= 1e-4, "t={} axis={} fd={} an={}", t, axis, fd, g[t][axis]);
                }
            }
        }
    }
}
