//! Deep-kernel GP adaptation to a support set.

use serde::{Deserialize, Serialize};

use super::params::{mlp_forward, ParamVars, SharedParams};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_cdf, Matrix, Tape, Var};

/// GP predictive mean and variance at one input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPrediction {
    pub mean: f64,
    pub variance: f64,
}

/// Support and query sets drawn without overlap from one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: TaskDataset,
    pub query: TaskDataset,
}

/// Posterior mean and variance nodes (`n × 1` each) for a batch of inputs.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mean: Var,
    pub variance: Var,
}

pub(crate) fn check_dim(params: &SharedParams, cols: usize, what: &str) -> Result<()> {
    if cols != params.dim {
        return Err(Error::Shape(format!(
            "{what} has {cols} features but the model expects {}",
            params.dim
        )));
    }
    Ok(())
}

/// Latent representation of each row of `x`.
pub fn encode_on_tape(tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
    match &vars.encoder {
        Some(layers) => mlp_forward(tape, layers, x),
        None => x,
    }
}

pub fn mean_on_tape(tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
    mlp_forward(tape, &vars.mean, x)
}

/// Closed-form posterior at every row of `queries` given the support set.
///
/// The noise term `β` enters only the diagonal of the support Gram matrix
/// and the prior variance `k(x, x) = 1 + β`; cross-covariances are noise-free.
pub fn posterior_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    support_x: &Matrix,
    support_y: &[f64],
    queries: &Matrix,
) -> Result<PosteriorVars> {
    if support_x.rows() == 0 {
        return Err(Error::Domain("support set is empty".into()));
    }
    let xs = tape.leaf(support_x.clone());
    let xq = tape.leaf(queries.clone());
    let ys = tape.leaf(Matrix::column(support_y.to_vec()));
    let zs = encode_on_tape(tape, vars, xs);
    let zq = encode_on_tape(tape, vars, xq);
    let beta = vars.beta(tape);

    let d_ss = tape.sq_dist(zs, zs);
    let d_ss = tape.scale(d_ss, -0.5);
    let k_ss = tape.exp(d_ss);
    let gram = tape.add_diag(k_ss, beta);

    let d_qs = tape.sq_dist(zq, zs);
    let d_qs = tape.scale(d_qs, -0.5);
    let k_qs = tape.exp(d_qs);

    let m_s = mean_on_tape(tape, vars, xs);
    let m_q = mean_on_tape(tape, vars, xq);
    let resid = tape.sub(ys, m_s);
    let weights = tape.solve_spd(gram, resid)?;
    let shift = tape.matmul(k_qs, weights);
    let mean = tape.add(m_q, shift);

    let k_sq = tape.transpose(k_qs);
    let solved = tape.solve_spd(gram, k_sq)?;
    let solved_t = tape.transpose(solved);
    let prod = tape.mul(k_qs, solved_t);
    let explained = tape.row_sums(prod);
    let explained = tape.scale(explained, -1.0);
    let prior = tape.offset(beta, 1.0);
    let variance = tape.add_scalar(explained, prior);
    Ok(PosteriorVars { mean, variance })
}

/// `½(1 + erf((y − f)/√(2v)))` elementwise.
pub fn gaussian_cdf_on_tape(tape: &mut Tape, posterior: PosteriorVars, y: Var) -> Var {
    let diff = tape.sub(y, posterior.mean);
    let two_v = tape.scale(posterior.variance, 2.0);
    let denom = tape.sqrt(two_v);
    let z = tape.div(diff, denom);
    let e = tape.erf(z);
    let e = tape.offset(e, 1.0);
    tape.scale(e, 0.5)
}

fn read_predictions(tape: &Tape, post: PosteriorVars) -> Vec<PosteriorPrediction> {
    tape.value(post.mean)
        .data()
        .iter()
        .zip(tape.value(post.variance).data())
        .map(|(&mean, &variance)| PosteriorPrediction { mean, variance })
        .collect()
}

/// Encoder output for one feature vector.
pub fn encode(params: &SharedParams, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(params, x.len(), "input")?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let xv = tape.leaf(Matrix::from_vec(1, x.len(), x.to_vec())?);
    let z = encode_on_tape(&mut tape, &vars, xv);
    Ok(tape.value(z).data().to_vec())
}

/// Deep kernel `exp(−½‖g(x) − g(x')‖²) + β·[identical]`.
pub fn kernel(params: &SharedParams, x: &[f64], x_other: &[f64], identical: bool) -> Result<f64> {
    let a = encode(params, x)?;
    let b = encode(params, x_other)?;
    let d2: f64 = a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum();
    let noise = if identical { params.beta() } else { 0.0 };
    Ok((-0.5 * d2).exp() + noise)
}

/// Mean-network output for one feature vector.
pub fn prior_mean(params: &SharedParams, x: &[f64]) -> Result<f64> {
    check_dim(params, x.len(), "input")?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let xv = tape.leaf(Matrix::from_vec(1, x.len(), x.to_vec())?);
    let m = mean_on_tape(&mut tape, &vars, xv);
    Ok(tape.value(m).item())
}

/// Posterior at every row of `queries`.
pub fn gp_posterior_batch(
    params: &SharedParams,
    support: &TaskDataset,
    queries: &Matrix,
) -> Result<Vec<PosteriorPrediction>> {
    check_dim(params, support.dim(), "support set")?;
    check_dim(params, queries.cols(), "query")?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let post = posterior_on_tape(
        &mut tape,
        &vars,
        support.features(),
        support.targets(),
        queries,
    )?;
    Ok(read_predictions(&tape, post))
}

pub fn gp_posterior(
    params: &SharedParams,
    support: &TaskDataset,
    x: &[f64],
) -> Result<PosteriorPrediction> {
    let q = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(gp_posterior_batch(params, support, &q)?[0])
}

/// Gaussian predictive CDF `h_U(y | x; S)`.
pub fn uncalibrated_cdf(
    params: &SharedParams,
    support: &TaskDataset,
    x: &[f64],
    y: f64,
) -> Result<f64> {
    let p = gp_posterior(params, support, x)?;
    gaussian_cdf(y, p.mean, p.variance)
}
