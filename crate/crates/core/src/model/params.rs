use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::special::{logistic, logit, softplus, softplus_inverse};
use crate::numerics::{Gradients, Matrix, Tape, Var};

/// Width of every hidden layer and of the encoder output.
pub const HIDDEN: usize = 32;
/// Linear layers in the encoder: D → 32 → 32 → 32.
pub const ENCODER_LAYERS: usize = 3;
/// Linear layers in the mean network: D → 32 → 32 → 32 → 1.
pub const MEAN_LAYERS: usize = 4;

pub const INITIAL_BETA: f64 = 0.1;
pub const INITIAL_SIGMA: f64 = 0.1;
pub const INITIAL_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `inputs × outputs`.
    pub weight: Matrix,
    /// `1 × outputs`.
    pub bias: Matrix,
}

/// Feed-forward network with tanh on every layer but the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Uniform weights in `±1/√fan_in`, zero biases.
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Matrix::from_vec(
                    fan_in,
                    fan_out,
                    (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                )
                .expect("sized above");
                Dense {
                    weight,
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes
                .windows(2)
                .map(|w| Dense {
                    weight: Matrix::zeros(w[0], w[1]),
                    bias: Matrix::zeros(1, w[1]),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.shape()).collect()
    }

    fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

/// Structural choices fixed for the lifetime of a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    /// Use the raw features as the kernel's latent space (no encoder network).
    pub identity_encoder: bool,
    /// Use the uncalibrated Gaussian CDF as the final CDF.
    pub disable_calibrator: bool,
    /// Hold the mixture weight at this value instead of learning it.
    pub fix_alpha: Option<f64>,
    /// Fit the GP on the first half of the support set and place the
    /// calibration mixture on the second half.
    pub split_support: bool,
}

/// All task-shared trainables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedParams {
    pub dim: usize,
    /// `None` for the identity encoder.
    pub encoder: Option<Mlp>,
    pub mean: Mlp,
    pub raw_beta: f64,
    pub raw_sigma: f64,
    pub raw_alpha: f64,
    pub options: ModelOptions,
}

impl SharedParams {
    pub fn init(dim: usize, options: ModelOptions, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if let Some(a) = options.fix_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!(
                    "fix_alpha must lie in [0, 1], got {a}"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = (!options.identity_encoder)
            .then(|| Mlp::init(&[dim, HIDDEN, HIDDEN, HIDDEN], &mut rng));
        let mean = Mlp::init(&[dim, HIDDEN, HIDDEN, HIDDEN, 1], &mut rng);
        Ok(Self {
            dim,
            encoder,
            mean,
            raw_beta: softplus_inverse(INITIAL_BETA),
            raw_sigma: softplus_inverse(INITIAL_SIGMA),
            raw_alpha: logit(INITIAL_ALPHA),
            options,
        })
    }

    /// Observation noise `β = softplus(raw_beta)`.
    pub fn beta(&self) -> f64 {
        softplus(self.raw_beta)
    }

    /// Calibration mixture width `σ = softplus(raw_sigma)`.
    pub fn sigma(&self) -> f64 {
        softplus(self.raw_sigma)
    }

    /// Mixture weight on the uncalibrated CDF.
    pub fn alpha(&self) -> f64 {
        self.options
            .fix_alpha
            .unwrap_or_else(|| logistic(self.raw_alpha))
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.as_ref().map_or(self.dim, Mlp::output_dim)
    }

    fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = Vec::new();
        if let Some(e) = &self.encoder {
            out.extend(e.tensors());
        }
        out.extend(self.mean.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if let Some(e) = &mut self.encoder {
            out.extend(e.tensors_mut());
        }
        out.extend(self.mean.tensors_mut());
        out
    }

    /// Number of trainable scalars.
    pub fn len(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum::<usize>() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat view: encoder tensors, mean tensors, then raw β, σ, α.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .tensors()
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect();
        out.extend([self.raw_beta, self.raw_sigma, self.raw_alpha]);
        out
    }

    /// Inverse of [`SharedParams::to_vec`].
    pub fn set_from_slice(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        self.raw_beta = flat[offset];
        self.raw_sigma = flat[offset + 1];
        self.raw_alpha = flat[offset + 2];
        Ok(())
    }

    pub fn with_values(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_from_slice(flat)?;
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// Parameters registered as leaves on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub(crate) encoder: Option<Vec<LayerVars>>,
    pub(crate) mean: Vec<LayerVars>,
    pub(crate) raw_beta: Var,
    pub(crate) raw_sigma: Var,
    pub(crate) raw_alpha: Var,
    pub(crate) fix_alpha: Option<f64>,
}

fn register_mlp(tape: &mut Tape, mlp: &Mlp) -> Vec<LayerVars> {
    mlp.layers
        .iter()
        .map(|l| LayerVars {
            weight: tape.leaf(l.weight.clone()),
            bias: tape.leaf(l.bias.clone()),
        })
        .collect()
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &SharedParams) -> Self {
        Self {
            encoder: params.encoder.as_ref().map(|e| register_mlp(tape, e)),
            mean: register_mlp(tape, &params.mean),
            raw_beta: tape.scalar(params.raw_beta),
            raw_sigma: tape.scalar(params.raw_sigma),
            raw_alpha: tape.scalar(params.raw_alpha),
            fix_alpha: params.options.fix_alpha,
        }
    }

    fn leaves(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layers in self.encoder.iter().chain(std::iter::once(&self.mean)) {
            for l in layers {
                out.push(l.weight);
                out.push(l.bias);
            }
        }
        out.extend([self.raw_beta, self.raw_sigma, self.raw_alpha]);
        out
    }

    /// Gradient in the order of [`SharedParams::to_vec`].
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        self.leaves()
            .into_iter()
            .flat_map(|v| grads.wrt(v).into_vec())
            .collect()
    }

    pub fn beta(&self, tape: &mut Tape) -> Var {
        tape.softplus(self.raw_beta)
    }

    pub fn sigma(&self, tape: &mut Tape) -> Var {
        tape.softplus(self.raw_sigma)
    }

    pub fn alpha(&self, tape: &mut Tape) -> Var {
        match self.fix_alpha {
            Some(a) => tape.scalar(a),
            None => tape.logistic(self.raw_alpha),
        }
    }
}

pub(crate) fn mlp_forward(tape: &mut Tape, layers: &[LayerVars], x: Var) -> Var {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        let z = tape.matmul(h, l.weight);
        let z = tape.add_row(z, l.bias);
        h = if i + 1 < layers.len() {
            tape.tanh(z)
        } else {
            z
        };
    }
    h
}
