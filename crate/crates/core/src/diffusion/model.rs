//! Trained denoiser with its normalization statistics, training loop and checkpoint IO.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::{debug, info};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{Adam, Denoiser, MlpShape, ResidualMlp};
use super::schedule::VarianceSchedule;
use crate::error::{MmdError, Result};
use crate::geometry::TileKind;
use crate::rng::rng_for;
use crate::trajectory::{common_shape, Trajectory};
use crate::worlds::Dataset;

const MAGIC: &[u8; 4] = b"MMDM";
const VERSION: u32 = 1;
const STATE_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub hidden: usize,
    pub blocks: usize,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            hidden: 256,
            blocks: 2,
            embed_dim: 32,
        }
    }
}

/// Per-channel z-score over `(x, y, vx, vy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; STATE_DIM],
    pub scale: [f64; STATE_DIM],
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: [0.0; STATE_DIM],
            scale: [1.0; STATE_DIM],
        }
    }

    pub fn fit(trajs: &[Trajectory]) -> Self {
        let mut sum = [0.0; STATE_DIM];
        let mut sum2 = [0.0; STATE_DIM];
        let mut n = 0usize;
        for s in trajs.iter().flat_map(|t| t.states()) {
            for (c, v) in s.to_array().into_iter().enumerate() {
                sum[c] += v;
                sum2[c] += v * v;
            }
            n += 1;
        }
        let mut norm = Normalizer::identity();
        if n == 0 {
            return norm;
        }
        for c in 0..STATE_DIM {
            let mean = sum[c] / n as f64;
            let var = (sum2[c] / n as f64 - mean * mean).max(0.0);
            norm.mean[c] = mean;
            norm.scale[c] = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        }
        norm
    }

    pub fn normalize(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % STATE_DIM]) / self.scale[i % STATE_DIM])
            .collect()
    }

    pub fn denormalize(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter()
            .enumerate()
            .map(|(i, v)| v * self.scale[i % STATE_DIM] + self.mean[i % STATE_DIM])
            .collect()
    }

    /// Scale factor of flat entry `i`.
    pub fn scale_of(&self, i: usize) -> f64 {
        self.scale[i % STATE_DIM]
    }
}

/// Trained trajectory denoiser for one horizon and time step.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub schedule: VarianceSchedule,
    pub network: ResidualMlp,
    pub normalizer: Normalizer,
    pub horizon: usize,
    pub dt: f64,
    /// Mean state speed of the training data.
    pub mean_speed: f64,
    pub kind: Option<TileKind>,
    pub dataset_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    /// Mean loss per epoch.
    pub losses: Vec<f32>,
}

/// Noisy training input with endpoint states pinned to their clean values.
fn noisy_input(x0: ArrayView2<'_, f32>, ks: &[usize], sched: &VarianceSchedule, rng: &mut crate::rng::Rng) -> Array2<f32> {
    let d = x0.ncols();
    let mut xk = Array2::zeros(x0.raw_dim());
    for (r, (row, &k)) in x0.outer_iter().zip(ks).enumerate() {
        let ab = sched.alpha_bar(k);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        for c in 0..d {
            let pinned = c < STATE_DIM || c >= d - STATE_DIM;
            xk[[r, c]] = if pinned {
                row[c]
            } else {
                let e: f32 = rng.sample(StandardNormal);
                a * row[c] + b * e
            };
        }
    }
    xk
}

pub fn train(dataset: &Dataset, sched: &VarianceSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_trajectories(&dataset.trajectories, Some(dataset.kind), dataset.content_hash()?, sched, cfg)
}

/// Fits a denoiser with x0-prediction MSE over uniformly drawn diffusion steps.
pub fn train_trajectories(
    trajs: &[Trajectory],
    kind: Option<TileKind>,
    dataset_hash: String,
    sched: &VarianceSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if trajs.is_empty() {
        return Err(MmdError::InvalidInput("training dataset is empty".into()));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(MmdError::InvalidInput("epochs and batch must be positive".into()));
    }
    let (horizon, dt) = common_shape(trajs)?;
    let normalizer = Normalizer::fit(trajs);
    let d = horizon * STATE_DIM;
    let mut data = Array2::<f32>::zeros((trajs.len(), d));
    for (r, t) in trajs.iter().enumerate() {
        for (c, v) in normalizer.normalize(&t.to_flat()).into_iter().enumerate() {
            data[[r, c]] = v as f32;
        }
    }
    let shape = MlpShape {
        input_dim: d,
        hidden: cfg.hidden,
        blocks: cfg.blocks,
        embed_dim: cfg.embed_dim,
    };
    let mut rng = rng_for(cfg.seed, &[0x7472]);
    let mut net = ResidualMlp::new(shape, &mut rng);
    let mut opt = Adam::new(&net, cfg.lr);
    info!("training {} parameters on {} trajectories", net.n_parameters(), trajs.len());
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let progress = epoch as f32 / cfg.epochs as f32;
        opt.set_lr(cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())));
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let x0 = data.select(Axis(0), chunk);
            let ks: Vec<usize> = chunk.iter().map(|_| rng.random_range(1..=sched.steps())).collect();
            let xk = noisy_input(x0.view(), &ks, sched, &mut rng);
            let (loss, grads) = net.loss_and_grad(xk.view(), &ks, x0.view());
            if !loss.is_finite() {
                return Err(MmdError::NonFinite(format!("training loss diverged in epoch {}", epoch + 1)));
            }
            opt.apply(&mut net, &grads);
            total += loss as f64;
            batches += 1;
        }
        let mean = (total / batches as f64) as f32;
        debug!("epoch {} loss {mean:.5}", epoch + 1);
        losses.push(mean);
    }
    let mean_speed = {
        let (sum, n) = trajs
            .iter()
            .flat_map(|t| t.states())
            .fold((0.0, 0usize), |(s, n), st| (s + st.qdot.norm(), n + 1));
        sum / n as f64
    };
    Ok(TrainOutcome {
        model: DenoiserModel {
            schedule: sched.clone(),
            network: net,
            normalizer,
            horizon,
            dt,
            mean_speed,
            kind,
            dataset_hash,
        },
        losses,
    })
}

impl DenoiserModel {
    /// Predicted clean trajectories (normalized, flattened) for a batch at step `k`.
    pub fn predict(&self, x: ArrayView2<'_, f32>, k: usize) -> Array2<f32> {
        self.network.predict(x, k)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let (b0, b1) = self.schedule.beta_range();
        w.write_u32::<LittleEndian>(self.schedule.steps() as u32)?;
        w.write_f64::<LittleEndian>(b0)?;
        w.write_f64::<LittleEndian>(b1)?;
        w.write_u32::<LittleEndian>(self.horizon as u32)?;
        w.write_f64::<LittleEndian>(self.dt)?;
        w.write_f64::<LittleEndian>(self.mean_speed)?;
        for v in self.normalizer.mean.iter().chain(&self.normalizer.scale) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        w.write_u8(self.kind.map_or(u8::MAX, TileKind::code))?;
        let hash = self.dataset_hash.as_bytes();
        w.write_u32::<LittleEndian>(hash.len() as u32)?;
        w.write_all(hash)?;
        let s = self.network.shape();
        for v in [s.input_dim, s.hidden, s.blocks, s.embed_dim] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        for p in self.network.params() {
            for v in p.iter() {
                w.write_f32::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MmdError::Format("not a model checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(MmdError::Format(format!("unsupported checkpoint version {version}")));
        }
        let steps = r.read_u32::<LittleEndian>()? as usize;
        let b0 = r.read_f64::<LittleEndian>()?;
        let b1 = r.read_f64::<LittleEndian>()?;
        let schedule = VarianceSchedule::exponential(steps, b0, b1)?;
        let horizon = r.read_u32::<LittleEndian>()? as usize;
        let dt = r.read_f64::<LittleEndian>()?;
        let mean_speed = r.read_f64::<LittleEndian>()?;
        let mut normalizer = Normalizer::identity();
        for c in 0..STATE_DIM {
            normalizer.mean[c] = r.read_f64::<LittleEndian>()?;
        }
        for c in 0..STATE_DIM {
            normalizer.scale[c] = r.read_f64::<LittleEndian>()?;
        }
        let kind = match r.read_u8()? {
            u8::MAX => None,
            code => Some(TileKind::from_code(code)?),
        };
        let hash_len = r.read_u32::<LittleEndian>()? as usize;
        if hash_len > 1024 {
            return Err(MmdError::Format("dataset hash too long".into()));
        }
        let mut hash = vec![0u8; hash_len];
        r.read_exact(&mut hash)?;
        let dataset_hash = String::from_utf8(hash).map_err(|_| MmdError::Format("dataset hash is not UTF-8".into()))?;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let shape = MlpShape {
            input_dim: dims[0],
            hidden: dims[1],
            blocks: dims[2],
            embed_dim: dims[3],
        };
        if shape.input_dim != horizon * STATE_DIM || shape.hidden > 1 << 14 || shape.blocks > 64 || shape.embed_dim > 1 << 10 {
            return Err(MmdError::Format("inconsistent network dimensions".into()));
        }
        let mut params = Vec::new();
        for (rows, cols) in ResidualMlp::param_shapes(shape) {
            let mut buf = vec![0f32; rows * cols];
            r.read_f32_into::<LittleEndian>(&mut buf)?;
            params.push(Array2::from_shape_vec((rows, cols), buf).map_err(|e| MmdError::Format(e.to_string()))?);
        }
        let network = ResidualMlp::from_params(shape, params).ok_or_else(|| MmdError::Format("parameter block mismatch".into()))?;
        if !(dt > 0.0) || horizon < 2 {
            return Err(MmdError::Format("invalid horizon or time step".into()));
        }
        Ok(DenoiserModel {
            schedule,
            network,
            normalizer,
            horizon,
            dt,
            mean_speed,
            kind,
            dataset_hash,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch: 4,
            lr: 1e-3,
            seed: 9,
            hidden: 32,
            blocks: 1,
            embed_dim: 8,
        }
    }

    fn lines(n: usize) -> Vec<Trajectory> {
        (0..n)
            .map(|i| {
                let y = -0.5 + i as f64 / n as f64;
                let pts: Vec<Vec2> = (0..16).map(|t| Vec2::new(-0.8 + 1.6 * t as f64 / 15.0, y)).collect();
                Trajectory::from_positions(&pts, 0.04).unwrap()
            })
            .collect()
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let s = VarianceSchedule::default();
        assert!(train_trajectories(&[], None, String::new(), &s, &small_cfg()).is_err());
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let s = VarianceSchedule::default();
        let data = lines(8);
        let a = train_trajectories(&data, None, "h".into(), &s, &small_cfg()).unwrap();
        let b = train_trajectories(&data, None, "h".into(), &s, &small_cfg()).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model, b.model);
        let mut other = small_cfg();
        other.seed = 10;
        let c = train_trajectories(&data, None, "h".into(), &s, &other).unwrap();
        assert_ne!(a.losses, c.losses);
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = VarianceSchedule::default();
        let out = train_trajectories(&lines(4), Some(TileKind::Empty), "abc".into(), &s, &small_cfg()).unwrap();
        let mut buf = Vec::new();
        out.model.write(&mut buf).unwrap();
        let back = DenoiserModel::read(&buf[..]).unwrap();
        assert_eq!(back, out.model);
        buf[0] = b'X';
        assert!(DenoiserModel::read(&buf[..]).is_err());
    }

    #[test]
    fn normalizer_round_trip() {
        let data = lines(5);
        let n = Normalizer::fit(&data);
        let flat = data[2].to_flat();
        let back = n.denormalize(&n.normalize(&flat));
        for (a, b) in flat.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
