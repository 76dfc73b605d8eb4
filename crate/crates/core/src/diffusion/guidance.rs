//! Differentiable trajectory costs used to steer sampling.

use std::sync::Arc;

use crate::constraints::{accumulate_constraint_grad, constraint_cost_positions, SphereConstraint, Strength};
use crate::geometry::{RobotShape, Vec2, World};
use crate::trajectory::Trajectory;

pub const DEFAULT_LAMBDA_SMOOTH: f64 = 8e-2;
pub const DEFAULT_LAMBDA_OBJ: f64 = 2e-2;
pub const DEFAULT_LAMBDA_STRONG: f64 = 2e-1;
pub const DEFAULT_LAMBDA_WEAK: f64 = 2e-2;
/// Clearance kept from obstacles beyond the robot radius.
pub const OBSTACLE_MARGIN_PAD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct GuidanceSpec {
    pub lambda_smooth: f64,
    pub lambda_obj: f64,
    pub lambda_strong: f64,
    pub lambda_weak: f64,
    /// Guidance step scale.
    pub eta: f64,
    /// Obstacle clearance target measured from the robot center.
    pub margin: f64,
    pub shape: RobotShape,
    pub world: Option<Arc<World>>,
    pub constraints: Vec<SphereConstraint>,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        let shape = RobotShape::default();
        GuidanceSpec {
            lambda_smooth: DEFAULT_LAMBDA_SMOOTH,
            lambda_obj: DEFAULT_LAMBDA_OBJ,
            lambda_strong: DEFAULT_LAMBDA_STRONG,
            lambda_weak: DEFAULT_LAMBDA_WEAK,
            eta: 5.0,
            margin: shape.radius + OBSTACLE_MARGIN_PAD,
            shape,
            world: None,
            constraints: Vec::new(),
        }
    }
}

impl GuidanceSpec {
    pub fn with_world(world: Arc<World>, shape: RobotShape) -> Self {
        GuidanceSpec {
            margin: shape.radius + OBSTACLE_MARGIN_PAD,
            shape,
            world: Some(world),
            ..GuidanceSpec::default()
        }
    }

    /// All weights zero: sampling follows the learned prior only.
    pub fn unguided() -> Self {
        GuidanceSpec {
            lambda_smooth: 0.0,
            lambda_obj: 0.0,
            lambda_strong: 0.0,
            lambda_weak: 0.0,
            ..GuidanceSpec::default()
        }
    }

    pub fn with_constraints(mut self, constraints: Vec<SphereConstraint>) -> Self {
        self.constraints = constraints;
        self
    }

    pub fn weight(&self, strength: Strength) -> f64 {
        match strength {
            Strength::Strong => self.lambda_strong,
            Strength::Weak => self.lambda_weak,
        }
    }

    fn is_inactive(&self) -> bool {
        self.lambda_smooth == 0.0
            && (self.lambda_obj == 0.0 || self.world.is_none())
            && self.constraints.iter().all(|c| self.weight(c.strength) == 0.0)
    }

    pub fn cost_positions(&self, qs: &[Vec2]) -> f64 {
        let mut total = 0.0;
        if self.lambda_smooth != 0.0 && qs.len() >= 3 {
            let s: f64 = qs.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).norm_squared()).sum();
            total += self.lambda_smooth * s;
        }
        if let (Some(world), true) = (&self.world, self.lambda_obj != 0.0) {
            let s: f64 = qs
                .iter()
                .map(|q| (self.margin - world.sdf_grad(q).0).max(0.0).powi(2))
                .sum();
            total += self.lambda_obj * s;
        }
        for c in &self.constraints {
            let w = self.weight(c.strength);
            if w != 0.0 {
                total += w * constraint_cost_positions(qs, c, &self.shape);
            }
        }
        total
    }

    pub fn grad_positions(&self, qs: &[Vec2]) -> Vec<Vec2> {
        let n = qs.len();
        let mut g = vec![Vec2::zeros(); n];
        if self.is_inactive() {
            return g;
        }
        if self.lambda_smooth != 0.0 && n >= 3 {
            for t in 1..n - 1 {
                let a = 2.0 * self.lambda_smooth * (qs[t + 1] - 2.0 * qs[t] + qs[t - 1]);
                g[t - 1] += a;
                g[t] -= 2.0 * a;
                g[t + 1] += a;
            }
        }
        if let (Some(world), true) = (&self.world, self.lambda_obj != 0.0) {
            for (t, q) in qs.iter().enumerate() {
                let (d, dg) = world.sdf_grad(q);
                let v = self.margin - d;
                if v > 0.0 {
                    g[t] -= 2.0 * self.lambda_obj * v * dg;
                }
            }
        }
        for c in &self.constraints {
            let w = self.weight(c.strength);
            if w != 0.0 {
                accumulate_constraint_grad(qs, c, &self.shape, w, &mut g);
            }
        }
        g
    }
}

pub fn guidance_cost(traj: &Trajectory, guide: &GuidanceSpec) -> f64 {
    let qs: Vec<Vec2> = traj.positions().collect();
    guide.cost_positions(&qs)
}

/// Position gradient of [`guidance_cost`], one entry per state.
pub fn guidance_grad(traj: &Trajectory, guide: &GuidanceSpec) -> Vec<Vec2> {
    let qs: Vec<Vec2> = traj.positions().collect();
    guide.grad_positions(&qs)
}
