//! Guided ancestral sampling with endpoint inpainting and warm restarts.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::guidance::GuidanceSpec;
use super::model::DenoiserModel;
use crate::error::{MmdError, Result};
use crate::geometry::{disk_in_collision, Vec2};
use crate::rng::rng_for;
use crate::trajectory::{State, Trajectory};

const STATE_DIM: usize = 4;
/// Bound on predicted clean values in normalized units.
const PREDICTION_CLIP: f32 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub start: State,
    pub goal: State,
    pub horizon: usize,
}

impl Query {
    pub fn new(start: State, goal: State, horizon: usize) -> Self {
        Query { start, goal, horizon }
    }

    pub fn at_rest(start: Vec2, goal: Vec2, horizon: usize) -> Self {
        Query::new(State::at_rest(start), State::at_rest(goal), horizon)
    }

    pub fn pins(&self) -> Vec<(usize, State)> {
        vec![(0, self.start), (self.horizon - 1, self.goal)]
    }
}

/// Knobs controlling how guidance gradients enter the reverse process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Gradient steps applied to the posterior mean at every diffusion step.
    pub guide_steps: usize,
    /// Extra noise-free gradient steps after the last diffusion step.
    pub post_steps: usize,
    /// Step scale of the noise-free gradient steps, in place of a schedule beta.
    pub post_scale: f64,
    /// Smallest schedule beta used to scale a guidance step.
    pub min_scale: f64,
    /// Largest position change of one state in one gradient step.
    pub max_shift: f64,
    /// Standard deviation, in steps, of the temporal smoothing of each guidance step.
    pub smooth_width: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            guide_steps: 2,
            post_steps: 8,
            post_scale: 0.1,
            min_scale: 0.02,
            max_shift: 0.05,
            smooth_width: 3.0,
        }
    }
}

/// Where the reverse process starts.
pub enum Start<'a> {
    /// Unit Gaussian noise at the last diffusion step.
    Noise,
    /// A previous trajectory noised up to the given step.
    Warm(&'a Trajectory, usize),
}

struct Frame<'m> {
    model: &'m DenoiserModel,
    dim: usize,
}

impl Frame<'_> {
    fn normalize_state(&self, s: &State) -> [f32; STATE_DIM] {
        let a = s.to_array();
        let n = &self.model.normalizer;
        std::array::from_fn(|c| ((a[c] - n.mean[c]) / n.scale[c]) as f32)
    }

    fn pin(&self, x: &mut Array2<f32>, pins: &[(usize, [f32; STATE_DIM])]) {
        for mut row in x.rows_mut() {
            for (t, v) in pins {
                for c in 0..STATE_DIM {
                    row[t * STATE_DIM + c] = v[c];
                }
            }
        }
    }

    fn positions(&self, row: ndarray::ArrayView1<'_, f32>) -> Vec<Vec2> {
        let n = &self.model.normalizer;
        (0..self.dim / STATE_DIM)
            .map(|t| {
                let i = t * STATE_DIM;
                Vec2::new(
                    row[i] as f64 * n.scale[0] + n.mean[0],
                    row[i + 1] as f64 * n.scale[1] + n.mean[1],
                )
            })
            .collect()
    }

    /// One descent step on the guidance cost. The per-state displacement is
    /// smoothed over time, clipped, and applied to positions; velocities get
    /// its central difference.
    fn guide(&self, x: &mut Array2<f32>, guide: &GuidanceSpec, scale: f64, cfg: &SamplerConfig, pinned: &[usize]) {
        let n = &self.model.normalizer;
        let dt = self.model.dt;
        let kernel = gaussian_kernel(cfg.smooth_width);
        for mut row in x.rows_mut() {
            let qs = self.positions(row.view());
            let h = qs.len();
            let grad = guide.grad_positions(&qs);
            if grad.iter().all(|g| g.norm_squared() == 0.0) {
                continue;
            }
            let raw: Vec<Vec2> = grad.iter().map(|g| -guide.eta * scale * g).collect();
            let mut shift = smooth(&raw, &kernel);
            for (t, s) in shift.iter_mut().enumerate() {
                if pinned.contains(&t) {
                    *s = Vec2::zeros();
                }
                let len = s.norm();
                if len > cfg.max_shift {
                    *s *= cfg.max_shift / len;
                }
            }
            for t in 0..h {
                let i = t * STATE_DIM;
                row[i] += (shift[t].x / n.scale[0]) as f32;
                row[i + 1] += (shift[t].y / n.scale[1]) as f32;
                if pinned.contains(&t) {
                    continue;
                }
                let (a, b) = (t.saturating_sub(1), (t + 1).min(h - 1));
                let dv = (shift[b] - shift[a]) / ((b - a) as f64 * dt);
                row[i + 2] += (dv.x / n.scale[2]) as f32;
                row[i + 3] += (dv.y / n.scale[3]) as f32;
            }
        }
    }
}

fn gaussian_kernel(width: f64) -> Vec<f64> {
    if width <= 0.0 {
        return vec![1.0];
    }
    let reach = (3.0 * width).ceil() as i64;
    let k: Vec<f64> = (-reach..=reach).map(|i| (-0.5 * (i as f64 / width).powi(2)).exp()).collect();
    let peak = k[reach as usize];
    k.into_iter().map(|v| v / peak).collect()
}

/// Convolution with a peak-normalized kernel, truncated at the ends.
fn smooth(v: &[Vec2], kernel: &[f64]) -> Vec<Vec2> {
    let reach = (kernel.len() / 2) as i64;
    let n = v.len() as i64;
    (0..n)
        .map(|t| {
            let mut acc = Vec2::zeros();
            for (j, w) in kernel.iter().enumerate() {
                let s = t + j as i64 - reach;
                if (0..n).contains(&s) {
                    acc += *w * v[s as usize];
                }
            }
            acc
        })
        .collect()
}

fn check_finite(x: &Array2<f32>, k: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MmdError::NonFinite(format!("denoising produced non-finite values at step {k}")))
    }
}

/// A guided reverse diffusion run that can be advanced one step at a time.
pub struct ReverseProcess<'a> {
    model: &'a DenoiserModel,
    guide: &'a GuidanceSpec,
    cfg: &'a SamplerConfig,
    pins: Vec<(usize, State)>,
    norm_pins: Vec<(usize, [f32; STATE_DIM])>,
    pinned: Vec<usize>,
    rng: crate::rng::Rng,
    x: Array2<f32>,
    /// Next diffusion step to run; 0 once the reverse chain is complete.
    k: usize,
}

impl<'a> ReverseProcess<'a> {
    pub fn new(
        model: &'a DenoiserModel,
        pins: &[(usize, State)],
        guide: &'a GuidanceSpec,
        batch: usize,
        seed: u64,
        start: Start<'_>,
        cfg: &'a SamplerConfig,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(MmdError::InvalidInput("batch size must be at least 1".into()));
        }
        let h = model.horizon;
        let dim = h * STATE_DIM;
        for (t, s) in pins {
            if *t >= h {
                return Err(MmdError::InvalidInput(format!("pin index {t} outside horizon {h}")));
            }
            if !s.is_finite() {
                return Err(MmdError::NonFinite("pinned state".into()));
            }
        }
        let sched = &model.schedule;
        let frame = Frame { model, dim };
        let norm_pins: Vec<(usize, [f32; STATE_DIM])> = pins.iter().map(|(t, s)| (*t, frame.normalize_state(s))).collect();
        let mut rng = rng_for(seed, &[0x5a4d]);
        let (mut x, k) = match start {
            Start::Noise => (
                Array2::from_shape_fn((batch, dim), |_| rng.sample::<f32, _>(StandardNormal)),
                sched.steps(),
            ),
            Start::Warm(prev, k_noise) => {
                if prev.horizon() != h || (prev.dt() - model.dt).abs() > 1e-12 {
                    return Err(MmdError::HorizonMismatch(format!(
                        "warm start has H={} dt={}, model has H={h} dt={}",
                        prev.horizon(),
                        prev.dt(),
                        model.dt
                    )));
                }
                if k_noise == 0 || k_noise > sched.steps() {
                    return Err(MmdError::InvalidInput(format!("noise steps {k_noise} outside 1..={}", sched.steps())));
                }
                let clean = model.normalizer.normalize(&prev.to_flat());
                let mut x = Array2::zeros((batch, dim));
                for mut row in x.rows_mut() {
                    let noise: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let noisy = sched.forward_noise(&clean, k_noise, &noise)?;
                    for (dst, v) in row.iter_mut().zip(noisy) {
                        *dst = v as f32;
                    }
                }
                (x, k_noise)
            }
        };
        frame.pin(&mut x, &norm_pins);
        Ok(ReverseProcess {
            model,
            guide,
            cfg,
            pins: pins.to_vec(),
            norm_pins,
            pinned: pins.iter().map(|(t, _)| *t).collect(),
            rng,
            x,
            k,
        })
    }

    fn frame(&self) -> Frame<'a> {
        Frame {
            model: self.model,
            dim: self.model.horizon * STATE_DIM,
        }
    }

    /// Diffusion steps left to run.
    pub fn remaining(&self) -> usize {
        self.k
    }

    /// Runs one denoising step; a no-op once the chain is complete.
    pub fn step(&mut self) -> Result<()> {
        let k = self.k;
        if k == 0 {
            return Ok(());
        }
        let frame = self.frame();
        let sched = &self.model.schedule;
        let mut x0 = self.model.predict(self.x.view(), k);
        x0.mapv_inplace(|v| v.clamp(-PREDICTION_CLIP, PREDICTION_CLIP));
        let (c0, ck, var) = sched.posterior(k);
        let mut mean = x0 * c0 as f32 + &self.x * ck as f32;
        frame.pin(&mut mean, &self.norm_pins);
        let scale = sched.beta(k).max(self.cfg.min_scale);
        for _ in 0..self.cfg.guide_steps {
            frame.guide(&mut mean, self.guide, scale, self.cfg, &self.pinned);
        }
        if var > 0.0 {
            let sd = var.sqrt() as f32;
            let rng = &mut self.rng;
            mean.mapv_inplace(|v| v + sd * rng.sample::<f32, _>(StandardNormal));
        }
        frame.pin(&mut mean, &self.norm_pins);
        check_finite(&mean, k)?;
        self.x = mean;
        self.k -= 1;
        Ok(())
    }

    /// Runs any remaining steps, the noise-free guidance steps, and returns
    /// de-normalized trajectories with pinned states set exactly.
    pub fn finish(mut self) -> Result<Vec<Trajectory>> {
        while self.k > 0 {
            self.step()?;
        }
        let frame = self.frame();
        for _ in 0..self.cfg.post_steps {
            frame.guide(&mut self.x, self.guide, self.cfg.post_scale, self.cfg, &self.pinned);
        }
        check_finite(&self.x, 0)?;
        let mut out = Vec::with_capacity(self.x.nrows());
        for row in self.x.rows() {
            let flat: Vec<f64> = row.iter().map(|v| *v as f64).collect();
            let mut traj = Trajectory::from_flat(&self.model.normalizer.denormalize(&flat), self.model.dt)?;
            for (t, s) in &self.pins {
                traj.states_mut()[*t] = *s;
            }
            out.push(traj);
        }
        Ok(out)
    }
}

/// Runs the guided reverse process with the given states pinned at their indices.
pub fn sample_pinned(
    model: &DenoiserModel,
    pins: &[(usize, State)],
    guide: &GuidanceSpec,
    batch: usize,
    seed: u64,
    start: Start<'_>,
    cfg: &SamplerConfig,
) -> Result<Vec<Trajectory>> {
    ReverseProcess::new(model, pins, guide, batch, seed, start, cfg)?.finish()
}

fn check_query(model: &DenoiserModel, query: &Query, guide: &GuidanceSpec) -> Result<()> {
    if query.horizon != model.horizon {
        return Err(MmdError::HorizonMismatch(format!(
            "query horizon {} differs from model horizon {}",
            query.horizon, model.horizon
        )));
    }
    if let Some(world) = &guide.world {
        for (name, s) in [("start", &query.start), ("goal", &query.goal)] {
            if disk_in_collision(world, &s.q, guide.shape.radius) {
                return Err(MmdError::InvalidInput(format!("{name} state collides with an obstacle")));
            }
        }
    }
    Ok(())
}

/// Fresh samples from noise with the query's start and goal inpainted.
pub fn sample(
    model: &DenoiserModel,
    query: &Query,
    guide: &GuidanceSpec,
    batch: usize,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<Vec<Trajectory>> {
    check_query(model, query, guide)?;
    sample_pinned(model, &query.pins(), guide, batch, seed, Start::Noise, cfg)
}

/// Samples that start from `prev` noised for `k_noise` steps; endpoints stay those of `prev`.
pub fn warm_sample(
    model: &DenoiserModel,
    prev: &Trajectory,
    guide: &GuidanceSpec,
    k_noise: usize,
    batch: usize,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<Vec<Trajectory>> {
    let pins = vec![(0, *prev.first()), (prev.horizon() - 1, *prev.last())];
    sample_pinned(model, &pins, guide, batch, seed, Start::Warm(prev, k_noise), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::{train_trajectories, TrainConfig};
    use crate::diffusion::schedule::VarianceSchedule;
    use std::sync::OnceLock;

    fn arc(h: usize) -> Trajectory {
        let pts: Vec<Vec2> = (0..h)
            .map(|t| {
                let a = std::f64::consts::PI * t as f64 / (h - 1) as f64;
                Vec2::new(-0.6 * a.cos(), 0.4 * a.sin())
            })
            .collect();
        Trajectory::from_positions(&pts, 0.04).unwrap()
    }

    fn point_mass_model() -> &'static DenoiserModel {
        static MODEL: OnceLock<DenoiserModel> = OnceLock::new();
        MODEL.get_or_init(|| {
            let data = vec![arc(16); 64];
            let cfg = TrainConfig {
                epochs: 400,
                batch: 32,
                lr: 2e-3,
                seed: 4,
                hidden: 64,
                blocks: 1,
                embed_dim: 16,
            };
            train_trajectories(&data, None, String::new(), &VarianceSchedule::default(), &cfg)
                .unwrap()
                .model
        })
    }

    #[test]
    fn unguided_sampling_regenerates_point_mass_data() {
        let model = point_mass_model();
        let target = arc(16);
        let query = Query::new(*target.first(), *target.last(), 16);
        let out = sample(model, &query, &GuidanceSpec::unguided(), 8, 1, &SamplerConfig::default()).unwrap();
        let final_sd = model.schedule.posterior(2).2.sqrt();
        let norm = &model.normalizer;
        for traj in &out {
            let a = norm.normalize(&traj.to_flat());
            let b = norm.normalize(&target.to_flat());
            let worst = a[4..a.len() - 4]
                .iter()
                .zip(&b[4..b.len() - 4])
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 5.0 * final_sd, "worst {worst} vs bound {}", 5.0 * final_sd);
        }
    }

    #[test]
    fn endpoints_are_inpainted_exactly_and_sampling_is_deterministic() {
        let model = point_mass_model();
        let start = State::new(Vec2::new(-0.55, 0.013), Vec2::new(0.1, 0.2));
        let goal = State::at_rest(Vec2::new(0.61, -0.07));
        let query = Query::new(start, goal, 16);
        let g = GuidanceSpec::default();
        let a = sample(model, &query, &g, 5, 9, &SamplerConfig::default()).unwrap();
        let b = sample(model, &query, &g, 5, 9, &SamplerConfig::default()).unwrap();
        assert_eq!(a, b);
        for t in &a {
            assert_eq!(*t.first(), start);
            assert_eq!(*t.last(), goal);
        }
        let c = sample(model, &query, &g, 5, 10, &SamplerConfig::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn warm_start_keeps_endpoints_and_stays_near_previous() {
        let model = point_mass_model();
        let target = arc(16);
        let query = Query::new(*target.first(), *target.last(), 16);
        let g = GuidanceSpec::unguided();
        let cfg = SamplerConfig::default();
        let prev = sample(model, &query, &g, 1, 3, &cfg).unwrap().remove(0);
        let warm = warm_sample(model, &prev, &g, 3, 10, 2, &cfg).unwrap();
        for t in &warm {
            assert_eq!(t.first(), prev.first());
            assert_eq!(t.last(), prev.last());
            let worst = t.positions().zip(prev.positions()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(worst < 0.05, "warm sample moved {worst}");
        }
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let model = point_mass_model();
        let q = Query::at_rest(Vec2::zeros(), Vec2::new(0.5, 0.0), 32);
        let g = GuidanceSpec::default();
        assert!(matches!(
            sample(model, &q, &g, 1, 0, &SamplerConfig::default()),
            Err(MmdError::HorizonMismatch(_))
        ));
        let q = Query::at_rest(Vec2::zeros(), Vec2::new(0.5, 0.0), 16);
        assert!(sample(model, &q, &g, 0, 0, &SamplerConfig::default()).is_err());
        assert!(warm_sample(model, &arc(16), &g, 0, 1, 0, &SamplerConfig::default()).is_err());
        assert!(warm_sample(model, &arc(16), &g, 26, 1, 0, &SamplerConfig::default()).is_err());
    }
}
