//! Synthetic task families.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{TaskCollection, TaskDataset};
use crate::error::{Error, Result};
use crate::numerics::{cholesky_with_jitter, Matrix};

/// Observation noise added on top of the latent function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseShape {
    #[default]
    Gaussian,
    /// Centered unit-rate exponential (skewness 2), scaled to `noise_std`.
    Skewed,
    /// Gaussian whose standard deviation grows linearly along the first
    /// input from `noise_std` to `noise_ratio · noise_std`.
    Heteroscedastic,
    /// Skewed noise with the heteroscedastic scale profile.
    SkewedHeteroscedastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpTaskConfig {
    pub tasks: usize,
    pub instances: usize,
    pub dims: usize,
    /// Each task's RBF length scale is drawn uniformly from this range.
    pub length_scale: (f64, f64),
    pub signal_std: f64,
    /// Standard deviation of a per-task constant offset.
    pub offset_std: f64,
    pub noise: NoiseShape,
    pub noise_std: f64,
    pub noise_ratio: f64,
    /// Each task's noise is further multiplied by a factor drawn
    /// log-uniformly from this range.
    pub task_noise_scale: (f64, f64),
    /// Inputs are uniform on this interval in every dimension.
    pub input_range: (f64, f64),
    pub seed: u64,
}

impl Default for GpTaskConfig {
    fn default() -> Self {
        Self {
            tasks: 100,
            instances: 60,
            dims: 1,
            length_scale: (0.5, 2.0),
            signal_std: 1.0,
            offset_std: 0.0,
            noise: NoiseShape::Gaussian,
            noise_std: 0.1,
            noise_ratio: 3.0,
            task_noise_scale: (1.0, 1.0),
            input_range: (-2.0, 2.0),
            seed: 0,
        }
    }
}

impl GpTaskConfig {
    fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.instances == 0 || self.dims == 0 {
            return Err(Error::Config(
                "gp tasks need positive tasks, instances and dims".into(),
            ));
        }
        let (lo, hi) = self.length_scale;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "invalid length-scale range {lo}..{hi}"
            )));
        }
        let (lo, hi) = self.task_noise_scale;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "invalid task noise-scale range {lo}..{hi}"
            )));
        }
        if !(self.input_range.1 > self.input_range.0) {
            return Err(Error::Config("input range must be non-empty".into()));
        }
        if self.noise_std < 0.0
            || self.signal_std < 0.0
            || self.offset_std < 0.0
            || self.noise_ratio <= 0.0
        {
            return Err(Error::Config(
                "noise and signal scales must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn noise_scale(&self, x0: f64) -> f64 {
        match self.noise {
            NoiseShape::Gaussian | NoiseShape::Skewed => self.noise_std,
            NoiseShape::Heteroscedastic | NoiseShape::SkewedHeteroscedastic => {
                let (lo, hi) = self.input_range;
                let u = ((x0 - lo) / (hi - lo)).clamp(0.0, 1.0);
                self.noise_std * (1.0 + (self.noise_ratio - 1.0) * u)
            }
        }
    }
}

/// Tasks whose latent functions are draws from an RBF-kernel GP prior.
pub fn gen_gp_tasks(config: &GpTaskConfig) -> Result<TaskCollection> {
    gen_gp_tasks_with_latent(config).map(|(c, _)| c)
}

/// Like [`gen_gp_tasks`], also returning each task's noise-free latent values.
pub fn gen_gp_tasks_with_latent(config: &GpTaskConfig) -> Result<(TaskCollection, Vec<Vec<f64>>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n, d) = (config.instances, config.dims);
    let mut tasks = Vec::with_capacity(config.tasks);
    let mut latents = Vec::with_capacity(config.tasks);
    for t in 0..config.tasks {
        let (lo, hi) = config.input_range;
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(lo..hi)).collect())?;
        let ell = if config.length_scale.1 > config.length_scale.0 {
            rng.random_range(config.length_scale.0..config.length_scale.1)
        } else {
            config.length_scale.0
        };
        let var = config.signal_std * config.signal_std;
        let offset_draw =
            |rng: &mut ChaCha8Rng| config.offset_std * rng.sample::<f64, _>(StandardNormal);
        let latent: Vec<f64> = if var == 0.0 {
            let offset = offset_draw(&mut rng);
            vec![offset; n]
        } else {
            let mut k = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let d2: f64 = x
                        .row(i)
                        .iter()
                        .zip(x.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    let v = var * (-0.5 * d2 / (ell * ell)).exp();
                    k.set(i, j, v);
                    k.set(j, i, v);
                }
                // Sampling jitter; RBF Gram matrices of dense inputs are numerically singular.
                k.set(i, i, k.get(i, i) + 1e-6 * var);
            }
            let (l, _) = cholesky_with_jitter(&k)?;
            let z = Matrix::column(
                (0..n)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            let offset = offset_draw(&mut rng);
            l.matmul(&z)
                .into_vec()
                .into_iter()
                .map(|f| f + offset)
                .collect()
        };
        let targets = latent
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let scale = config.noise_scale(x.get(i, 0));
                let eps: f64 = match config.noise {
                    NoiseShape::Gaussian | NoiseShape::Heteroscedastic => {
                        rng.sample(StandardNormal)
                    }
                    NoiseShape::Skewed | NoiseShape::SkewedHeteroscedastic => {
                        let e: f64 = Exp1.sample(&mut rng);
                        e - 1.0
                    }
                };
                f + scale * eps
            })
            .collect::<Vec<f64>>();
        let targets = match config.task_noise_scale {
            (lo, hi) if hi > lo => {
                let factor = rng.random_range(lo.ln()..hi.ln()).exp();
                latent
                    .iter()
                    .zip(targets)
                    .map(|(f, y): (&f64, f64)| f + factor * (y - f))
                    .collect()
            }
            _ => targets,
        };
        tasks.push(TaskDataset::new(format!("gp-{t:04}"), x, targets)?);
        latents.push(latent);
    }
    Ok((TaskCollection::new(tasks)?, latents))
}

/// Sinusoids `a·sin(ω·x + φ)` on a scalar input, with Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SineTaskConfig {
    pub tasks: usize,
    pub instances: usize,
    pub amplitude: (f64, f64),
    pub phase: (f64, f64),
    pub frequency: (f64, f64),
    pub input_range: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SineTaskConfig {
    fn default() -> Self {
        Self {
            tasks: 100,
            instances: 60,
            amplitude: (0.1, 5.0),
            phase: (0.0, std::f64::consts::PI),
            frequency: (1.0, 1.0),
            input_range: (-5.0, 5.0),
            noise_std: 0.0,
            seed: 0,
        }
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn gen_sine_tasks(config: &SineTaskConfig) -> Result<TaskCollection> {
    if config.tasks == 0 || config.instances == 0 {
        return Err(Error::Config(
            "sine tasks need positive tasks and instances".into(),
        ));
    }
    for (name, (lo, hi)) in [
        ("amplitude", config.amplitude),
        ("phase", config.phase),
        ("frequency", config.frequency),
        ("input", config.input_range),
    ] {
        if hi < lo {
            return Err(Error::Config(format!(
                "{name} range is reversed: {lo}..{hi}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tasks = Vec::with_capacity(config.tasks);
    for t in 0..config.tasks {
        let a = draw(&mut rng, config.amplitude);
        let phi = draw(&mut rng, config.phase);
        let omega = draw(&mut rng, config.frequency);
        let xs: Vec<f64> = (0..config.instances)
            .map(|_| draw(&mut rng, config.input_range))
            .collect();
        let ys = xs
            .iter()
            .map(|&x| {
                let noise: f64 = rng.sample(StandardNormal);
                a * (omega * x + phi).sin() + config.noise_std * noise
            })
            .collect();
        tasks.push(TaskDataset::new(
            format!("sine-{t:04}"),
            Matrix::column(xs),
            ys,
        )?);
    }
    TaskCollection::new(tasks)
}
