//! Task-specific recalibration of the GP's Gaussian predictive CDF.
//!
//! Each support instance contributes its own uncalibrated CDF value
//! `h_U(yₙ | xₙ; S)`. The calibration map `r` is the CDF of an equal-weight
//! Gaussian mixture centred on those values with a shared width `σ`, so it
//! is smooth, non-decreasing and available without any fitting loop. As
//! `σ → 0` it approaches the empirical step function over the same values.
//! The final CDF mixes the two: `h = α·h_U + (1 − α)·r(h_U)`.

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::model::{
    check_dim, gaussian_cdf_on_tape, posterior_on_tape, ParamVars, PosteriorPrediction,
    PosteriorVars, SharedParams,
};
use crate::numerics::special::erf;
use crate::numerics::{gaussian_cdf, Matrix, Tape, Var};

/// Gaussian-mixture calibration map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmCalibrator {
    pub component_means: Vec<f64>,
    pub sigma: f64,
}

impl GmmCalibrator {
    pub fn new(component_means: Vec<f64>, sigma: f64) -> Result<Self> {
        if component_means.is_empty() {
            return Err(Error::Domain(
                "calibrator needs at least one component".into(),
            ));
        }
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!(
                "calibrator width must be positive, got {sigma}"
            )));
        }
        Ok(Self {
            component_means,
            sigma,
        })
    }

    /// `r(p) = (1/2N) Σᵢ (1 + erf((p − mᵢ)/(√2·σ)))`.
    pub fn apply(&self, p: f64) -> f64 {
        let scale = SQRT_2 * self.sigma;
        let total: f64 = self
            .component_means
            .iter()
            .map(|m| 1.0 + erf((p - m) / scale))
            .sum();
        total / (2.0 * self.component_means.len() as f64)
    }
}

pub fn apply_r(cal: &GmmCalibrator, p: f64) -> f64 {
    cal.apply(p)
}

/// Step-function calibration map over sorted CDF levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCalibrator {
    pub sorted_levels: Vec<f64>,
}

impl EmpiricalCalibrator {
    /// `n/N` on `[p₍ₙ₎, p₍ₙ₊₁₎)`, 0 below the smallest level, 1 from the largest on.
    pub fn apply(&self, p: f64) -> f64 {
        let n = self.sorted_levels.partition_point(|&l| l <= p);
        n as f64 / self.sorted_levels.len() as f64
    }
}

pub fn fit_empirical_calibrator(levels: &[f64]) -> Result<EmpiricalCalibrator> {
    if levels.is_empty() {
        return Err(Error::Domain(
            "empirical calibrator needs at least one level".into(),
        ));
    }
    if levels.iter().any(|l| l.is_nan()) {
        return Err(Error::Domain(
            "empirical calibrator levels must not be NaN".into(),
        ));
    }
    let mut sorted_levels = levels.to_vec();
    sorted_levels.sort_by(f64::total_cmp);
    Ok(EmpiricalCalibrator { sorted_levels })
}

pub fn apply_r_emp(cal: &EmpiricalCalibrator, p: f64) -> f64 {
    cal.apply(p)
}

/// Mixture CDF `r` on a tape: `p` is `n × 1`, `means` is `m × 1`, `sigma` is `1 × 1`.
pub fn gmm_cdf_on_tape(tape: &mut Tape, p: Var, means: Var, sigma: Var) -> Var {
    let m = tape.value(means).len() as f64;
    let diff = tape.outer_sub(p, means);
    let inv_sigma = tape.recip(sigma);
    let z = tape.mul_scalar(diff, inv_sigma);
    let z = tape.scale(z, 1.0 / SQRT_2);
    let e = tape.erf(z);
    let s = tape.row_sums(e);
    let s = tape.scale(s, 0.5 / m);
    tape.offset(s, 0.5)
}

/// `α·a + (1 − α)·b`.
pub fn mix_on_tape(tape: &mut Tape, alpha: Var, a: Var, b: Var) -> Var {
    let weighted_a = tape.mul_scalar(a, alpha);
    let neg = tape.scale(alpha, -1.0);
    let complement = tape.offset(neg, 1.0);
    let weighted_b = tape.mul_scalar(b, complement);
    tape.add(weighted_a, weighted_b)
}

/// Quantities produced by adapting to one support set on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AdaptedVars {
    /// Posterior at the requested query rows.
    pub posterior: PosteriorVars,
    /// Uncalibrated CDF values of the calibration instances (`None` when the
    /// calibrator is disabled).
    pub component_means: Option<Var>,
    pub sigma: Var,
    pub alpha: Var,
}

/// Rows `[0, k)` of the support set fit the GP when `split_support` is set;
/// the rest place the calibration components.
fn split_point(params: &SharedParams, n: usize) -> Result<usize> {
    if !params.options.split_support {
        return Ok(n);
    }
    if n < 2 {
        return Err(Error::Config(
            "split_support needs at least two support instances".into(),
        ));
    }
    Ok(n.div_ceil(2))
}

/// Adapt the GP and build the calibrator for `support`, evaluating the
/// posterior at every row of `queries`.
pub fn adapt_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &SharedParams,
    support: &TaskDataset,
    queries: &Matrix,
) -> Result<AdaptedVars> {
    let n = support.len();
    if n == 0 {
        return Err(Error::Domain("support set is empty".into()));
    }
    let cut = split_point(params, n)?;
    let fit_rows: Vec<usize> = (0..cut).collect();
    let cal_rows: Vec<usize> = if cut == n {
        fit_rows.clone()
    } else {
        (cut..n).collect()
    };
    let fit = support.subset(&fit_rows);
    let with_calibrator = !params.options.disable_calibrator;

    // One posterior pass over [calibration rows; queries].
    let (rows, n_cal) = if with_calibrator {
        let cal_x = support.features().select_rows(&cal_rows);
        let mut data = cal_x.data().to_vec();
        data.extend_from_slice(queries.data());
        (
            Matrix::from_vec(cal_rows.len() + queries.rows(), queries.cols(), data)?,
            cal_rows.len(),
        )
    } else {
        (queries.clone(), 0)
    };
    let post = posterior_on_tape(tape, vars, fit.features(), fit.targets(), &rows)?;
    let total = rows.rows();
    let (posterior, component_means) = if with_calibrator {
        let cal_idx: Vec<usize> = (0..n_cal).collect();
        let query_idx: Vec<usize> = (n_cal..total).collect();
        let cal_post = PosteriorVars {
            mean: tape.select_rows(post.mean, cal_idx.clone()),
            variance: tape.select_rows(post.variance, cal_idx),
        };
        let query_post = PosteriorVars {
            mean: tape.select_rows(post.mean, query_idx.clone()),
            variance: tape.select_rows(post.variance, query_idx),
        };
        let cal_y = tape.leaf(Matrix::column(
            cal_rows.iter().map(|&i| support.targets()[i]).collect(),
        ));
        let means = gaussian_cdf_on_tape(tape, cal_post, cal_y);
        (query_post, Some(means))
    } else {
        (post, None)
    };
    let sigma = vars.sigma(tape);
    let alpha = vars.alpha(tape);
    Ok(AdaptedVars {
        posterior,
        component_means,
        sigma,
        alpha,
    })
}

/// Final CDF at targets `y` (`n × 1`, aligned with the adapted query rows).
pub fn calibrated_cdf_on_tape(tape: &mut Tape, adapted: &AdaptedVars, y: Var) -> Var {
    let hu = gaussian_cdf_on_tape(tape, adapted.posterior, y);
    match adapted.component_means {
        None => hu,
        Some(means) => {
            let r = gmm_cdf_on_tape(tape, hu, means, adapted.sigma);
            mix_on_tape(tape, adapted.alpha, hu, r)
        }
    }
}

/// Which CDF to expose after adaptation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfVariant {
    /// Gaussian posterior CDF.
    Uncalibrated,
    /// Mixture of the Gaussian CDF and its GMM recalibration.
    #[default]
    Calibrated,
    /// Mixture of the Gaussian CDF and its empirical step recalibration.
    Empirical,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CdfTransform {
    Identity,
    Gmm {
        calibrator: GmmCalibrator,
        alpha: f64,
    },
    Empirical {
        calibrator: EmpiricalCalibrator,
        alpha: f64,
    },
}

impl CdfTransform {
    pub fn apply(&self, hu: f64) -> f64 {
        match self {
            CdfTransform::Identity => hu,
            CdfTransform::Gmm { calibrator, alpha } => {
                alpha * hu + (1.0 - alpha) * calibrator.apply(hu)
            }
            CdfTransform::Empirical { calibrator, alpha } => {
                alpha * hu + (1.0 - alpha) * calibrator.apply(hu)
            }
        }
    }
}

/// A CDF in `y` for one fixed input.
pub trait ConditionalCdf {
    fn cdf(&self, y: f64) -> f64;
    /// A central value to start bracketing from.
    fn location(&self) -> f64;
    /// A positive spread to size the initial bracket.
    fn spread(&self) -> f64;
}

/// A conditional CDF `h(y | x)`.
pub trait CdfModel {
    type Conditional: ConditionalCdf;

    fn conditional(&self, x: &[f64]) -> Result<Self::Conditional>;

    fn cdf(&self, x: &[f64], y: f64) -> Result<f64> {
        Ok(self.conditional(x)?.cdf(y))
    }
}

/// The adapted CDF at one query input.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConditional {
    pub posterior: PosteriorPrediction,
    pub transform: Arc<CdfTransform>,
}

impl TaskConditional {
    pub fn uncalibrated(&self, y: f64) -> f64 {
        gaussian_cdf(y, self.posterior.mean, self.posterior.variance)
            .expect("posterior variance is positive")
    }
}

impl ConditionalCdf for TaskConditional {
    fn cdf(&self, y: f64) -> f64 {
        self.transform.apply(self.uncalibrated(y))
    }

    fn location(&self) -> f64 {
        self.posterior.mean
    }

    fn spread(&self) -> f64 {
        self.posterior.variance.sqrt()
    }
}

/// Plain Gaussian `N(mean, variance)` as a conditional CDF.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianConditional {
    pub mean: f64,
    pub variance: f64,
}

impl ConditionalCdf for GaussianConditional {
    fn cdf(&self, y: f64) -> f64 {
        gaussian_cdf(y, self.mean, self.variance).expect("positive variance")
    }

    fn location(&self) -> f64 {
        self.mean
    }

    fn spread(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Everything a task's adapted model exposes for a fixed set of queries.
#[derive(Clone, Debug)]
pub struct AdaptedTask {
    pub predictions: Vec<PosteriorPrediction>,
    /// `None` when the calibrator is disabled.
    pub calibrator: Option<GmmCalibrator>,
    pub alpha: f64,
}

impl AdaptedTask {
    pub fn new(params: &SharedParams, support: &TaskDataset, queries: &Matrix) -> Result<Self> {
        check_dim(params, support.dim(), "support set")?;
        check_dim(params, queries.cols(), "query")?;
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params);
        let adapted = adapt_on_tape(&mut tape, &vars, params, support, queries)?;
        let predictions = tape
            .value(adapted.posterior.mean)
            .data()
            .iter()
            .zip(tape.value(adapted.posterior.variance).data())
            .map(|(&mean, &variance)| PosteriorPrediction { mean, variance })
            .collect();
        let calibrator = match adapted.component_means {
            Some(m) => Some(GmmCalibrator::new(
                tape.value(m).data().to_vec(),
                params.sigma(),
            )?),
            None => None,
        };
        Ok(Self {
            predictions,
            calibrator,
            alpha: params.alpha(),
        })
    }

    pub fn transform(&self, variant: CdfVariant) -> Result<CdfTransform> {
        Ok(match (variant, &self.calibrator) {
            (CdfVariant::Uncalibrated, _) | (_, None) => CdfTransform::Identity,
            (CdfVariant::Calibrated, Some(cal)) => CdfTransform::Gmm {
                calibrator: cal.clone(),
                alpha: self.alpha,
            },
            (CdfVariant::Empirical, Some(cal)) => CdfTransform::Empirical {
                calibrator: fit_empirical_calibrator(&cal.component_means)?,
                alpha: self.alpha,
            },
        })
    }

    /// One conditional CDF per query row.
    pub fn conditionals(&self, variant: CdfVariant) -> Result<Vec<TaskConditional>> {
        let transform = Arc::new(self.transform(variant)?);
        Ok(self
            .predictions
            .iter()
            .map(|&posterior| TaskConditional {
                posterior,
                transform: Arc::clone(&transform),
            })
            .collect())
    }
}

/// CDF model adapted to a support set, evaluated at arbitrary inputs.
#[derive(Clone, Copy, Debug)]
pub struct TaskCdfModel<'a> {
    pub params: &'a SharedParams,
    pub support: &'a TaskDataset,
    pub variant: CdfVariant,
}

impl CdfModel for TaskCdfModel<'_> {
    type Conditional = TaskConditional;

    fn conditional(&self, x: &[f64]) -> Result<TaskConditional> {
        let q = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let adapted = AdaptedTask::new(self.params, self.support, &q)?;
        Ok(adapted.conditionals(self.variant)?.remove(0))
    }
}

/// Mixture components: the uncalibrated CDF at each (calibration) support instance.
pub fn fit_gmm_calibrator(params: &SharedParams, support: &TaskDataset) -> Result<GmmCalibrator> {
    let mut forced = params.clone();
    forced.options.disable_calibrator = false;
    let adapted = AdaptedTask::new(&forced, support, &Matrix::zeros(0, params.dim))?;
    Ok(adapted.calibrator.expect("calibrator enabled"))
}

/// `h(y | x; S) = α·h_U + (1 − α)·r(h_U)`.
pub fn calibrated_cdf(
    params: &SharedParams,
    support: &TaskDataset,
    x: &[f64],
    y: f64,
) -> Result<f64> {
    TaskCdfModel {
        params,
        support,
        variant: CdfVariant::Calibrated,
    }
    .cdf(x, y)
}

/// Doublings of the search bracket before giving up.
pub const MAX_BRACKET_DOUBLINGS: usize = 60;

enum Bracket {
    Found(f64, f64),
    /// `cdf ≥ p` everywhere that was searched.
    BelowRange,
    /// `cdf < p` everywhere that was searched.
    AboveRange,
}

fn bracket(c: &impl ConditionalCdf, p: f64) -> Bracket {
    let center = c.location();
    let spread = if c.spread() > 0.0 && c.spread().is_finite() {
        c.spread()
    } else {
        1.0
    };
    let mut step = spread;
    let mut lo = center - step;
    let mut doublings = 0;
    while c.cdf(lo) >= p {
        if doublings == MAX_BRACKET_DOUBLINGS {
            return Bracket::BelowRange;
        }
        step *= 2.0;
        lo = center - step;
        doublings += 1;
    }
    step = spread;
    let mut hi = center + step;
    doublings = 0;
    while c.cdf(hi) < p {
        if doublings == MAX_BRACKET_DOUBLINGS {
            return Bracket::AboveRange;
        }
        step *= 2.0;
        hi = center + step;
        doublings += 1;
    }
    Bracket::Found(lo, hi)
}

fn check_level(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "quantile level must lie in (0, 1), got {p}"
        )));
    }
    Ok(())
}

fn bisect(c: &impl ConditionalCdf, p: f64, mut lo: f64, mut hi: f64) -> f64 {
    // Invariant: cdf(lo) < p ≤ cdf(hi).
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if c.cdf(mid) >= p {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Smallest `y` with `cdf(y) ≥ p`, located by bracket expansion and bisection.
///
/// For continuous CDFs the result satisfies `|cdf(y) − p| < 1e-8`; for CDFs
/// with jumps it is the jump location.
pub fn invert_conditional(c: &impl ConditionalCdf, p: f64) -> Result<f64> {
    check_level(p)?;
    match bracket(c, p) {
        Bracket::Found(lo, hi) => Ok(bisect(c, p, lo, hi)),
        Bracket::BelowRange => Err(Error::Convergence(format!(
            "no lower bracket for quantile {p}"
        ))),
        Bracket::AboveRange => Err(Error::Convergence(format!(
            "no upper bracket for quantile {p}"
        ))),
    }
}

/// Like [`invert_conditional`], but levels outside the CDF's range map to
/// `−∞` (the CDF already exceeds `p` in the far left tail) or `+∞` (it
/// never reaches `p`). The recalibration map is not renormalised, so the
/// calibrated CDF's limits can sit slightly inside `(0, 1)`.
pub fn generalized_quantile(c: &impl ConditionalCdf, p: f64) -> Result<f64> {
    check_level(p)?;
    Ok(match bracket(c, p) {
        Bracket::Found(lo, hi) => bisect(c, p, lo, hi),
        Bracket::BelowRange => f64::NEG_INFINITY,
        Bracket::AboveRange => f64::INFINITY,
    })
}

/// Quantile `h⁻¹(p | x)`.
pub fn invert_cdf<M: CdfModel>(model: &M, x: &[f64], p: f64) -> Result<f64> {
    invert_conditional(&model.conditional(x)?, p)
}
